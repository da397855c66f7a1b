#include "promptseg/app.hpp"

#include "promptseg/data_io.hpp"
#include "promptseg/weak_supervision.hpp"

#include <fmt/format.h>

#include <chrono>
#include <cstdlib>

namespace promptseg {

namespace {

template <class T>
void read_opt(const nlohmann::json& j, const char* key, T& out) {
    if (j.contains(key) && !j[key].is_null()) out = j[key].get<T>();
}

void apply_crf(const nlohmann::json& j, CrfParams& c) {
    read_opt(j, "iterations", c.iterations);
    read_opt(j, "gaussian_weight", c.gaussian_weight);
    read_opt(j, "gaussian_std", c.gaussian_std);
    read_opt(j, "bilateral_weight", c.bilateral_weight);
    read_opt(j, "bilateral_spatial_std", c.bilateral_spatial_std);
    read_opt(j, "bilateral_color_std", c.bilateral_color_std);
    read_opt(j, "epsilon", c.epsilon);
    read_opt(j, "normalize_saliency", c.normalize_saliency);
    read_opt(j, "max_exact_pixels", c.max_exact_pixels);
}

void apply_cam(const nlohmann::json& j, CamOptions& c) {
    if (j.contains("method")) c.method = cam_method_from_string(j["method"].get<std::string>());
    read_opt(j, "top_k", c.top_k);
    read_opt(j, "score_scale", c.score_scale);
    if (j.contains("ranking")) {
        const auto r = j["ranking"].get<std::string>();
        if (r == "mean_abs_gradient") c.ranking = ChannelRanking::MeanAbsGradient;
        else if (r == "abs_mean_gradient") c.ranking = ChannelRanking::AbsMeanGradient;
        else throw Error(ErrorCode::InvalidConfig, "unknown channel ranking '" + r + "'");
    }
    read_opt(j, "subtract_baseline", c.subtract_baseline);
}

void check_object(const nlohmann::json& j, const char* what) {
    if (!j.is_null() && !j.is_object())
        throw Error(ErrorCode::InvalidConfig, std::string(what) + " must be a JSON object");
}

} // namespace

AppConfig app_config_from_json(const nlohmann::json& j) {
    AppConfig c;
    try {
        check_object(j, "config");
        if (j.contains("backend")) {
            const auto& b = j["backend"];
            check_object(b, "backend");
            read_opt(b, "name", c.backend.name);
            std::string weights;
            read_opt(b, "weights_path", weights);
            c.backend.weights_path = weights;
            read_opt(b, "target_layer", c.backend.target_layer);
            if (b.contains("input_size")) c.backend.input_size = {b["input_size"].at(0), b["input_size"].at(1)};
        }
        if (j.contains("segmenter")) {
            check_object(j["segmenter"], "segmenter");
            read_opt(j["segmenter"], "name", c.segmenter.name);
            read_opt(j["segmenter"], "threshold", c.segmenter.threshold);
        }
        if (j.contains("cam")) apply_cam(j["cam"], c.cam);
        if (j.contains("crf")) apply_crf(j["crf"], c.crf);
        if (j.contains("boxes")) {
            read_opt(j["boxes"], "multi_box", c.boxes.multi_box);
            read_opt(j["boxes"], "min_area_fraction", c.boxes.min_area_fraction);
        }
        if (j.contains("server")) {
            read_opt(j["server"], "host", c.server.host);
            read_opt(j["server"], "port", c.server.port);
        }
    } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorCode::InvalidConfig, std::string("bad config: ") + e.what());
    }
    if (const char* env = std::getenv("PROMPTSEG_WEIGHTS_PATH"); env && *env)
        c.backend.weights_path = env;
    c.cam.validate();
    c.crf.validate();
    return c;
}

AppConfig load_app_config(const std::filesystem::path& path) {
    if (path.empty()) return app_config_from_json(nlohmann::json::object());
    const auto bytes = read_file(path);
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(bytes.begin(), bytes.end());
    } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorCode::InvalidConfig, path.string() + ": " + e.what());
    }
    return app_config_from_json(j);
}

nlohmann::json to_json(const AppConfig& c) {
    return {{"backend",
             {{"name", c.backend.name},
              {"weights_path", c.backend.weights_path.string()},
              {"target_layer", c.backend.target_layer},
              {"input_size", {c.backend.input_size.height, c.backend.input_size.width}}}},
            {"segmenter", {{"name", c.segmenter.name}, {"threshold", c.segmenter.threshold}}},
            {"cam", to_json(c.cam)},
            {"crf", to_json(c.crf)},
            {"boxes", {{"multi_box", c.boxes.multi_box}, {"min_area_fraction", c.boxes.min_area_fraction}}},
            {"server", {{"host", c.server.host}, {"port", c.server.port}}}};
}

std::string config_hash(const AppConfig& cfg) {
    nlohmann::json j = to_json(cfg);
    j.erase("server");
    std::uint64_t h = 1469598103934665603ULL;
    for (unsigned char ch : j.dump()) {
        h ^= ch;
        h *= 1099511628211ULL;
    }
    return fmt::format("{:016x}", h);
}

RequestParams apply_overrides(const AppConfig& cfg, const nlohmann::json& params) {
    RequestParams r{{cfg.cam, cfg.crf, cfg.boxes}, cfg.segmenter};
    if (params.is_null()) return r;
    if (!params.is_object()) throw Error(ErrorCode::InvalidConfig, "params must be a JSON object");
    try {
        apply_cam(params, r.options.cam);
        if (params.contains("crf")) apply_crf(params["crf"], r.options.crf);
        read_opt(params, "multi_box", r.options.boxes.multi_box);
        read_opt(params, "min_area_fraction", r.options.boxes.min_area_fraction);
        read_opt(params, "threshold", r.segmenter.threshold);
    } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorCode::InvalidConfig, std::string("bad params: ") + e.what());
    }
    r.options.cam.validate();
    r.options.crf.validate();
    return r;
}

AppContext::AppContext(AppConfig cfg)
    : cfg_(std::move(cfg)), encoder_(make_encoder(cfg_.backend)),
      lease_(std::make_unique<std::mutex>()), hash_(promptseg::config_hash(cfg_)) {
    make_segmenter(cfg_.segmenter); // fail at startup, not on the first request
}

nlohmann::json AppContext::backends_json() const {
    const auto caps = encoder_->capabilities();
    nlohmann::json enc = {{"name", encoder_->name()},
                          {"embed_dim", encoder_->embed_dim()},
                          {"input_size", {encoder_->input_size().height, encoder_->input_size().width}},
                          {"capabilities",
                           {{"gradients_available", caps.gradients_available},
                            {"activations_exposed", caps.activations_exposed},
                            {"concurrent_inference", caps.concurrent_inference}}}};
    if (const auto layer = encoder_->target_layer())
        enc["target_layer"] = {{"name", layer->name},
                               {"channels", layer->channels},
                               {"height", layer->height},
                               {"width", layer->width}};
    const auto seg = make_segmenter(cfg_.segmenter);
    return {{"encoders", {enc}},
            {"segmenters",
             {{{"name", seg->name()}, {"prompt_types", {"box"}}, {"deterministic", seg->deterministic()}}}},
            {"config_hash", hash_}};
}

nlohmann::json metrics_json(const ImageMetrics& m) {
    return {{"iou", m.iou},
            {"dsc", m.dsc},
            {"auc", m.auc ? nlohmann::json(*m.auc) : nlohmann::json()},
            {"both_empty", m.both_empty},
            {"auc_from_binary", m.auc_from_binary}};
}

nlohmann::json error_json(ErrorCode code, const std::string& message) {
    return {{"error", {{"code", to_string(code)}, {"message", message}}}};
}

namespace {

void check_prompt(std::string_view prompt) {
    if (prompt.find_first_not_of(" \t\r\n") == std::string_view::npos)
        throw Error(ErrorCode::EmptyPrompt, "prompt is empty");
}

} // namespace

SegmentArtifacts run_segment(const AppContext& ctx, const SegmentRequest& request) {
    check_prompt(request.prompt);
    const RequestParams params = apply_overrides(ctx.config(), request.params);
    const Image image = decode_image(request.image, ctx.encoder().input_size());
    std::optional<Mask> gt;
    if (request.gt) {
        gt = decode_mask(*request.gt);
        if (gt->size() != image.size()) gt = resize_mask_nearest(*gt, image.size());
    }
    const auto segmenter = make_segmenter(params.segmenter);
    const PseudoMask pm = ctx.with_encoder([&](const DualEncoder& enc) {
        return zero_shot_segment(enc, *segmenter, image, request.prompt, params.options);
    });

    SegmentArtifacts out;
    out.size = image.size();
    out.mask_png = encode_mask_png(pm.mask);
    out.saliency_npy = encode_npy(pm.saliency.values);
    out.heatmap_png = encode_heatmap_png(pm.saliency.values);
    out.boxes = boxes_json(pm.boxes);
    out.provenance = pm.provenance;
    out.provenance["config_hash"] = ctx.config_hash();
    out.provenance["segmenter_threshold"] = params.segmenter.threshold;
    out.warnings = pm.warnings;
    out.timings = {{"saliency_ms", pm.timings.saliency_ms},
                   {"crf_ms", pm.timings.crf_ms},
                   {"boxes_ms", pm.timings.boxes_ms},
                   {"segment_ms", pm.timings.segment_ms}};
    if (gt) out.metrics = metrics_json(evaluate_image("request", pm.mask, *gt, &pm.saliency.values));
    return out;
}

SaliencyArtifacts run_saliency(const AppContext& ctx, const SegmentRequest& request) {
    check_prompt(request.prompt);
    const RequestParams params = apply_overrides(ctx.config(), request.params);
    const Image image = decode_image(request.image, ctx.encoder().input_size());
    const SaliencyMap sal = ctx.with_encoder(
        [&](const DualEncoder& enc) { return compute_saliency(enc, image, request.prompt, params.options.cam); });
    SaliencyArtifacts out;
    out.size = image.size();
    out.saliency_npy = encode_npy(sal.values);
    out.heatmap_png = encode_heatmap_png(sal.values);
    out.warnings = sal.warnings;
    out.provenance = {{"backend", ctx.encoder().name()},
                      {"prompt", request.prompt},
                      {"image_digest", image_digest(image)},
                      {"cam", to_json(params.options.cam)},
                      {"cam_method", to_string(sal.method)},
                      {"top_k_used", sal.top_k ? nlohmann::json(*sal.top_k) : nlohmann::json()},
                      {"config_hash", ctx.config_hash()}};
    return out;
}

namespace {

constexpr char kAlphabet[] = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";

int sextet(char c) {
    if (c >= 'A' && c <= 'Z') return c - 'A';
    if (c >= 'a' && c <= 'z') return c - 'a' + 26;
    if (c >= '0' && c <= '9') return c - '0' + 52;
    if (c == '+' || c == '-') return 62;
    if (c == '/' || c == '_') return 63;
    return -1;
}

} // namespace

std::string base64_encode(const std::vector<std::uint8_t>& bytes) {
    std::string out;
    out.reserve((bytes.size() + 2) / 3 * 4);
    for (std::size_t i = 0; i < bytes.size(); i += 3) {
        const std::uint32_t n = (std::uint32_t(bytes[i]) << 16) |
                                (i + 1 < bytes.size() ? std::uint32_t(bytes[i + 1]) << 8 : 0) |
                                (i + 2 < bytes.size() ? std::uint32_t(bytes[i + 2]) : 0);
        out += kAlphabet[(n >> 18) & 63];
        out += kAlphabet[(n >> 12) & 63];
        out += i + 1 < bytes.size() ? kAlphabet[(n >> 6) & 63] : '=';
        out += i + 2 < bytes.size() ? kAlphabet[n & 63] : '=';
    }
    return out;
}

std::vector<std::uint8_t> base64_decode(std::string_view text) {
    // Accept data URLs ("data:image/png;base64,....").
    if (text.rfind("data:", 0) == 0) {
        const auto comma = text.find(',');
        if (comma == std::string_view::npos) throw Error(ErrorCode::DecodeError, "malformed data URL");
        text.remove_prefix(comma + 1);
    }
    std::vector<std::uint8_t> out;
    std::uint32_t acc = 0;
    int bits = 0, pad = 0;
    for (char c : text) {
        if (c == '\n' || c == '\r' || c == ' ' || c == '\t') continue;
        if (c == '=') {
            ++pad;
            continue;
        }
        const int v = sextet(c);
        if (v < 0 || pad) throw Error(ErrorCode::DecodeError, "invalid base64 payload");
        acc = (acc << 6) | static_cast<std::uint32_t>(v);
        bits += 6;
        if (bits >= 8) {
            bits -= 8;
            out.push_back(static_cast<std::uint8_t>((acc >> bits) & 0xFF));
        }
    }
    if (pad > 2 || bits >= 6) throw Error(ErrorCode::DecodeError, "invalid base64 length");
    return out;
}

} // namespace promptseg
