#include "promptseg/service.hpp"

#include "promptseg/data_io.hpp"
#include "promptseg/weak_supervision.hpp"

#include <httplib.h>

#include <fmt/format.h>

namespace promptseg {

namespace {

ApiResponse error_response(ErrorCode code, const std::string& message) {
    const bool server_side = code == ErrorCode::BackendUnavailable || code == ErrorCode::IoError;
    return {server_side ? 503 : 400, error_json(code, message)};
}

template <class Fn>
ApiResponse guarded(Fn&& fn) {
    try {
        return fn();
    } catch (const EmptySegmentationError& e) {
        ApiResponse r = error_response(ErrorCode::EmptySegmentation, e.what());
        r.body["error"]["saliency_npy"] = base64_encode(encode_npy(e.saliency().values));
        return r;
    } catch (const Error& e) {
        return error_response(e.code(), e.what());
    } catch (const nlohmann::json::exception& e) {
        return error_response(ErrorCode::InvalidConfig, e.what());
    }
}

std::vector<std::uint8_t> required_bytes(const nlohmann::json& req, const char* key) {
    if (!req.contains(key) || !req[key].is_string())
        throw Error(ErrorCode::DecodeError, fmt::format("missing base64 field '{}'", key));
    return base64_decode(req[key].get<std::string>());
}

SegmentRequest parse_request(const nlohmann::json& req) {
    if (!req.is_object()) throw Error(ErrorCode::InvalidConfig, "request body must be a JSON object");
    SegmentRequest r;
    r.image = required_bytes(req, "image");
    if (req.contains("prompt") && req["prompt"].is_string()) r.prompt = req["prompt"].get<std::string>();
    if (req.contains("params")) r.params = req["params"];
    if (req.contains("gt") && !req["gt"].is_null()) r.gt = required_bytes(req, "gt");
    return r;
}

nlohmann::json warnings_json(const std::vector<std::string>& w) { return nlohmann::json(w); }

} // namespace

nlohmann::json to_json(const SegmentArtifacts& a) {
    nlohmann::json j = {
        {"size", {{"height", a.size.height}, {"width", a.size.width}}},
        {"mask", {{"encoding", "png"}, {"data", base64_encode(a.mask_png)}}},
        {"saliency",
         {{"heatmap", {{"encoding", "png"}, {"data", base64_encode(a.heatmap_png)}}},
          {"raw", {{"encoding", "npy"}, {"dtype", "<f4"}, {"data", base64_encode(a.saliency_npy)}}}}},
        {"boxes", a.boxes},
        {"provenance", a.provenance},
        {"timings", a.timings},
        {"warnings", warnings_json(a.warnings)},
    };
    j["metrics"] = a.metrics ? *a.metrics : nlohmann::json();
    return j;
}

nlohmann::json to_json(const SaliencyArtifacts& a) {
    return {{"size", {{"height", a.size.height}, {"width", a.size.width}}},
            {"saliency",
             {{"heatmap", {{"encoding", "png"}, {"data", base64_encode(a.heatmap_png)}}},
              {"raw", {{"encoding", "npy"}, {"dtype", "<f4"}, {"data", base64_encode(a.saliency_npy)}}}}},
            {"provenance", a.provenance},
            {"warnings", warnings_json(a.warnings)}};
}

ApiResponse handle_health(const AppContext& ctx) {
    return {200, {{"status", "ok"}, {"backends", {ctx.encoder().name()}}, {"config_hash", ctx.config_hash()}}};
}

ApiResponse handle_backends(const AppContext& ctx) {
    return guarded([&] { return ApiResponse{200, ctx.backends_json()}; });
}

ApiResponse handle_segment(const AppContext& ctx, const nlohmann::json& request) {
    return guarded([&] { return ApiResponse{200, to_json(run_segment(ctx, parse_request(request)))}; });
}

ApiResponse handle_saliency(const AppContext& ctx, const nlohmann::json& request) {
    return guarded([&] { return ApiResponse{200, to_json(run_saliency(ctx, parse_request(request)))}; });
}

ApiResponse handle_metrics(const AppContext&, const nlohmann::json& request) {
    return guarded([&] {
        if (!request.is_object()) throw Error(ErrorCode::InvalidConfig, "request body must be a JSON object");
        const Mask pred = decode_mask(required_bytes(request, "pred"));
        Mask gt = decode_mask(required_bytes(request, "gt"));
        std::optional<Map> scores;
        if (request.contains("scores") && !request["scores"].is_null())
            scores = decode_npy(required_bytes(request, "scores"));
        const ImageMetrics m = evaluate_image("request", pred, gt, scores ? &*scores : nullptr);
        return ApiResponse{200, metrics_json(m)};
    });
}

namespace {

nlohmann::json request_json(const httplib::Request& req) {
    if (req.is_multipart_form_data()) {
        nlohmann::json j = nlohmann::json::object();
        for (const auto& [key, part] : req.files) {
            if (key == "image" || key == "gt" || key == "pred" || key == "scores") {
                j[key] = base64_encode(std::vector<std::uint8_t>(part.content.begin(), part.content.end()));
            } else if (key == "params") {
                j[key] = nlohmann::json::parse(part.content);
            } else {
                j[key] = part.content;
            }
        }
        return j;
    }
    return nlohmann::json::parse(req.body);
}

void reply(httplib::Response& res, const ApiResponse& r) {
    res.status = r.status;
    res.set_content(r.body.dump(), "application/json");
}

template <class Handler>
httplib::Server::Handler post_route(const AppContext& ctx, Handler handler) {
    return [&ctx, handler](const httplib::Request& req, httplib::Response& res) {
        nlohmann::json body;
        try {
            body = request_json(req);
        } catch (const nlohmann::json::exception& e) {
            reply(res, {400, error_json(ErrorCode::DecodeError, std::string("malformed JSON: ") + e.what())});
            return;
        }
        reply(res, handler(ctx, body));
    };
}

} // namespace

Service::Service(const AppContext& ctx) : ctx_(ctx), server_(std::make_unique<httplib::Server>()) {
    server_->set_payload_max_length(64u << 20);
    server_->Get("/api/health",
                 [this](const httplib::Request&, httplib::Response& res) { reply(res, handle_health(ctx_)); });
    server_->Get("/api/backends",
                 [this](const httplib::Request&, httplib::Response& res) { reply(res, handle_backends(ctx_)); });
    server_->Post("/api/segment", post_route(ctx_, handle_segment));
    server_->Post("/api/saliency", post_route(ctx_, handle_saliency));
    server_->Post("/api/metrics", post_route(ctx_, handle_metrics));
    server_->set_exception_handler([](const httplib::Request&, httplib::Response& res, std::exception_ptr ep) {
        std::string message = "internal error";
        try {
            std::rethrow_exception(ep);
        } catch (const std::exception& e) {
            message = e.what();
        } catch (...) {
        }
        res.status = 500;
        res.set_content(nlohmann::json{{"error", {{"code", "Internal"}, {"message", message}}}}.dump(),
                        "application/json");
    });
}

Service::~Service() = default;

int Service::bind(const std::string& host, int port) {
    if (port == 0) {
        const int bound = server_->bind_to_any_port(host);
        if (bound < 0) throw Error(ErrorCode::IoError, "cannot bind " + host);
        return bound;
    }
    if (!server_->bind_to_port(host, port)) throw Error(ErrorCode::IoError, fmt::format("cannot bind {}:{}", host, port));
    return port;
}

void Service::listen() { server_->listen_after_bind(); }

void Service::stop() { server_->stop(); }

void Service::wait_until_ready() const { server_->wait_until_ready(); }

void serve(const AppContext& ctx) {
    Service service(ctx);
    const int port = service.bind(ctx.config().server.host, ctx.config().server.port);
    fmt::print(stderr, "listening on http://{}:{}\n", ctx.config().server.host, port);
    service.listen();
}

} // namespace promptseg
