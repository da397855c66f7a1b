#include "promptseg/app.hpp"
#include "promptseg/data_io.hpp"
#include "promptseg/finetune.hpp"
#include "promptseg/linear_encoder.hpp"
#include "promptseg/retrieval.hpp"
#include "promptseg/service.hpp"
#include "promptseg/weak_supervision.hpp"

#include <CLI11.hpp>
#include <fmt/format.h>
#include <json.hpp>

#include <filesystem>
#include <iostream>
#include <optional>

using namespace promptseg;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

json read_json_file(const fs::path& path) {
    const auto bytes = read_file(path);
    try {
        return json::parse(bytes.begin(), bytes.end());
    } catch (const json::exception& e) {
        throw Error(ErrorCode::InvalidConfig, path.string() + ": " + e.what());
    }
}

void write_json(const fs::path& path, const json& j) { write_text(path, j.dump(2) + "\n"); }

// Image paths inside a captions CSV are relative to the CSV's directory.
std::vector<CaptionedRecord> read_corpus(const fs::path& csv) {
    auto records = read_captions_csv(csv);
    for (auto& r : records)
        if (fs::path(r.image_path).is_relative()) r.image_path = (csv.parent_path() / r.image_path).string();
    return records;
}

fs::path resolve(const fs::path& base, const json& j, const char* key) {
    if (!j.contains(key)) return {};
    const fs::path p = j[key].get<std::string>();
    return p.is_relative() ? base / p : p;
}

struct Globals {
    std::string config_path;
};

int cmd_finetune(const std::string& config_path) {
    const fs::path path = config_path;
    const json cfg = read_json_file(path);
    const fs::path base = path.parent_path();
    const json data = cfg.value("data", json::object());
    const auto train = read_corpus(resolve(base, data, "train"));
    const auto val = read_corpus(resolve(base, data, "val"));

    const json model = cfg.value("model", json::object());
    TrainConfig tc = train_config_from_json(cfg.value("train", json::object()));
    if (!tc.checkpoint_dir.empty() && tc.checkpoint_dir.is_relative()) tc.checkpoint_dir = base / tc.checkpoint_dir;

    const fs::path init = resolve(base, model, "init_weights");
    LinearDualEncoder encoder =
        init.empty() ? LinearDualEncoder(model.value("embed_dim", 32),
                                         {model.value("height", 32), model.value("width", 32)},
                                         model.value("seed", std::uint64_t{0}))
                     : LinearDualEncoder::load(init);
    const FinetuneResult r =
        finetune(encoder, CaptionedImageSet{train, Split::Train}, CaptionedImageSet{val, Split::Val}, tc);
    std::cout << json{{"best_val_top1", r.best_val_top1},
                      {"best_step", r.best_step},
                      {"best_epoch", r.best_epoch},
                      {"steps", r.steps},
                      {"checkpoint", r.checkpoint.string()},
                      {"manifest", r.manifest.string()},
                      {"log", r.log_path.string()}}
                     .dump(2)
              << "\n";
    return 0;
}

struct RetrievalArgs {
    std::string captions;
    std::string model = "model";
    std::string out;
    int batch_size = 50;
    int runs = 5;
    std::uint64_t seed = 0;
    bool keep_partial = false;
};

int cmd_eval_retrieval(const Globals& g, const RetrievalArgs& a) {
    const AppConfig cfg = load_app_config(g.config_path);
    const auto encoder = make_encoder(cfg.backend);
    RetrievalProtocol protocol;
    protocol.batch_size = a.batch_size;
    protocol.runs = a.runs;
    protocol.seed = a.seed;
    protocol.drop_last = !a.keep_partial;
    const RetrievalResult result = run_protocol(*encoder, read_corpus(a.captions), protocol);
    const std::string csv = retrieval_csv(a.model, result);
    if (a.out.empty()) std::cout << csv;
    else write_text(a.out, csv);
    return 0;
}

struct SaliencyArgs {
    std::string image, prompt, out, method;
    std::optional<int> top_k;
};

json cam_overrides(const std::string& method, const std::optional<int>& top_k) {
    json p = json::object();
    if (!method.empty()) p["method"] = method;
    if (top_k) p["top_k"] = *top_k;
    return p;
}

int cmd_saliency(const Globals& g, const SaliencyArgs& a) {
    const AppContext ctx(load_app_config(g.config_path));
    const SaliencyArtifacts s =
        run_saliency(ctx, {read_file(a.image), a.prompt, cam_overrides(a.method, a.top_k), std::nullopt});
    fs::path npy = a.out;
    if (npy.extension() != ".npy") npy += ".npy";
    if (npy.has_parent_path()) fs::create_directories(npy.parent_path());
    write_file(npy, s.saliency_npy);
    write_file(fs::path(npy).replace_extension(".png"), s.heatmap_png);
    for (const auto& w : s.warnings) std::cerr << w << "\n";
    return 0;
}

struct SegmentArgs {
    std::string image, prompt, gt, out_dir, method;
    std::optional<int> top_k;
    std::optional<double> threshold;
    bool single_box = false;
};

int cmd_segment(const Globals& g, const SegmentArgs& a) {
    const AppContext ctx(load_app_config(g.config_path));
    json params = cam_overrides(a.method, a.top_k);
    if (a.threshold) params["threshold"] = *a.threshold;
    if (a.single_box) params["multi_box"] = false;
    SegmentRequest req{read_file(a.image), a.prompt, params, std::nullopt};
    if (!a.gt.empty()) req.gt = read_file(a.gt);
    const SegmentArtifacts s = run_segment(ctx, req);

    const fs::path dir = a.out_dir;
    fs::create_directories(dir);
    write_file(dir / "mask.png", s.mask_png);
    write_file(dir / "saliency.npy", s.saliency_npy);
    write_file(dir / "saliency.png", s.heatmap_png);
    write_json(dir / "boxes.json", s.boxes);
    write_json(dir / "provenance.json", s.provenance);
    write_json(dir / "timings.json", s.timings);
    if (s.metrics) write_json(dir / "metrics.json", *s.metrics);
    for (const auto& w : s.warnings) std::cerr << w << "\n";
    return 0;
}

int cmd_train_weak(const std::string& config_path) {
    const fs::path path = config_path;
    const json cfg = read_json_file(path);
    const fs::path base = path.parent_path();
    const json data = cfg.value("data", json::object());
    const fs::path root = resolve(base, data, "root");
    SegmentationSet train = load_segmentation_set(root, data.value("train_split", "train"));
    const fs::path pseudo = resolve(base, data, "pseudo_mask_dir");
    if (!pseudo.empty()) train = with_masks_from(std::move(train), pseudo);
    const SegmentationSet val = load_segmentation_set(root, data.value("val_split", "val"));

    WeakTrainConfig wc = weak_config_from_json(cfg.value("train", json::object()));
    if (!wc.checkpoint_path.empty() && wc.checkpoint_path.is_relative()) wc.checkpoint_path = base / wc.checkpoint_path;
    if (!wc.log_path.empty() && wc.log_path.is_relative()) wc.log_path = base / wc.log_path;
    const ResUNetSpec spec = resunet_spec_from_json(cfg.value("model", json::object()));
    const WeakTrainResult r = train_weak(spec, train, val, wc, resolve(base, data, "val_pseudo_mask_dir"));
    std::cout << to_json(r.report).dump(2) << "\n";
    return 0;
}

struct PredictArgs {
    std::string ckpt, image, out, probs;
    double threshold = 0.5;
};

int cmd_predict(const PredictArgs& a) {
    const Map p = predict(fs::path(a.ckpt), load_image(a.image));
    if (!a.probs.empty()) save_npy(a.probs, p);
    save_mask(a.out, binarize(p, a.threshold));
    return 0;
}

struct EvalSegArgs {
    std::string pred_dir, gt_dir, scores_dir, out, records;
    std::string method = "method";
    std::string modality = "all";
};

int cmd_eval_seg(const EvalSegArgs& a) {
    std::vector<ImageMetrics> metrics;
    for (const fs::path& gt_path : list_images(a.gt_dir)) {
        const std::string stem = gt_path.stem().string();
        const fs::path pred_path = fs::path(a.pred_dir) / gt_path.filename();
        if (!fs::exists(pred_path))
            throw Error(ErrorCode::LengthMismatch, "no prediction for '" + stem + "' in " + a.pred_dir);
        std::optional<Map> scores;
        if (!a.scores_dir.empty()) {
            const fs::path npy = fs::path(a.scores_dir) / (stem + ".npy");
            const fs::path img = fs::path(a.scores_dir) / gt_path.filename();
            if (fs::exists(npy)) scores = load_score_map(npy);
            else if (fs::exists(img)) scores = load_score_map(img);
        }
        metrics.push_back(evaluate_image(stem, load_mask(pred_path), load_mask(gt_path), scores ? &*scores : nullptr));
    }
    if (metrics.empty()) throw Error(ErrorCode::IoError, "no ground-truth masks in " + a.gt_dir);
    const SegReport report = aggregate(std::move(metrics));
    const std::string csv = seg_report_csv(a.method, a.modality, report);
    if (a.out.empty()) std::cout << csv;
    else write_text(a.out, csv);
    if (!a.records.empty()) write_text(a.records, seg_records_csv(report));
    return 0;
}

struct ServeArgs {
    std::string host;
    std::optional<int> port;
};

int cmd_serve(const Globals& g, const ServeArgs& a) {
    AppConfig cfg = load_app_config(g.config_path);
    if (!a.host.empty()) cfg.server.host = a.host;
    if (a.port) cfg.server.port = *a.port;
    const AppContext ctx(cfg);
    serve(ctx);
    return 0;
}

void print_error(std::string_view code, const std::string& message) {
    std::cerr << json{{"error", {{"code", code}, {"message", message}}}}.dump() << "\n";
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Text-prompted medical image segmentation toolkit", "promptseg"};
    app.require_subcommand(1);
    Globals g;
    app.add_option("--config", g.config_path, "Backend/pipeline config file (JSON)");

    std::string finetune_config;
    auto* finetune_cmd = app.add_subcommand("finetune", "Fine-tune the projection heads on image-caption pairs");
    finetune_cmd->add_option("--config", finetune_config, "Fine-tuning config (JSON)")->required();

    RetrievalArgs ret;
    auto* ret_cmd = app.add_subcommand("eval-retrieval", "In-batch top-K cross-modal retrieval");
    ret_cmd->add_option("--captions", ret.captions, "Captions CSV (image,caption)")->required();
    ret_cmd->add_option("--model", ret.model, "Model name for the CSV");
    ret_cmd->add_option("--out", ret.out, "Output CSV (default stdout)");
    ret_cmd->add_option("--batch-size", ret.batch_size);
    ret_cmd->add_option("--runs", ret.runs);
    ret_cmd->add_option("--seed", ret.seed);
    ret_cmd->add_flag("--keep-partial", ret.keep_partial, "Evaluate the final partial batch");

    SaliencyArgs sal;
    auto* sal_cmd = app.add_subcommand("saliency", "Compute a text-conditioned saliency map");
    sal_cmd->add_option("--image", sal.image)->required();
    sal_cmd->add_option("--prompt", sal.prompt)->required();
    sal_cmd->add_option("--method", sal.method, "gscorecam or gradcam");
    sal_cmd->add_option("--top-k", sal.top_k);
    sal_cmd->add_option("--out", sal.out, "Output .npy (heatmap .png written alongside)")->required();

    SegmentArgs seg;
    auto* seg_cmd = app.add_subcommand("segment", "Zero-shot segmentation from a text prompt");
    seg_cmd->add_option("--image", seg.image)->required();
    seg_cmd->add_option("--prompt", seg.prompt)->required();
    seg_cmd->add_option("--gt", seg.gt, "Ground-truth mask for metrics");
    seg_cmd->add_option("--out-dir", seg.out_dir)->required();
    seg_cmd->add_option("--method", seg.method, "gscorecam or gradcam");
    seg_cmd->add_option("--top-k", seg.top_k);
    seg_cmd->add_option("--threshold", seg.threshold, "Segmenter intensity threshold");
    seg_cmd->add_flag("--single-box", seg.single_box, "Prompt with the largest box only");

    std::string weak_config;
    auto* weak_cmd = app.add_subcommand("train-weak", "Train a ResUNet on pseudo-masks");
    weak_cmd->add_option("--config", weak_config, "Weak-supervision config (JSON)")->required();

    PredictArgs pred;
    auto* pred_cmd = app.add_subcommand("predict", "Predict a mask with a trained ResUNet");
    pred_cmd->add_option("--ckpt", pred.ckpt)->required();
    pred_cmd->add_option("--image", pred.image)->required();
    pred_cmd->add_option("--out", pred.out, "Output mask PNG")->required();
    pred_cmd->add_option("--probs", pred.probs, "Output probability .npy");
    pred_cmd->add_option("--threshold", pred.threshold);

    EvalSegArgs ev;
    auto* ev_cmd = app.add_subcommand("eval-seg", "IoU/DSC/AUC report over a directory of predictions");
    ev_cmd->add_option("--pred-dir", ev.pred_dir)->required();
    ev_cmd->add_option("--gt-dir", ev.gt_dir)->required();
    ev_cmd->add_option("--scores-dir", ev.scores_dir, "Score maps (.npy or images) for AUC");
    ev_cmd->add_option("--out", ev.out, "Output CSV (default stdout)");
    ev_cmd->add_option("--records", ev.records, "Per-image CSV");
    ev_cmd->add_option("--method", ev.method);
    ev_cmd->add_option("--modality", ev.modality);

    ServeArgs srv;
    auto* srv_cmd = app.add_subcommand("serve", "Run the HTTP API");
    srv_cmd->add_option("--host", srv.host);
    srv_cmd->add_option("--port", srv.port);

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::cerr << app.help() << "\n";
        print_error(to_string(ErrorCode::UnknownCommand), e.what());
        return 2;
    }

    try {
        if (*finetune_cmd) return cmd_finetune(finetune_config);
        if (*ret_cmd) return cmd_eval_retrieval(g, ret);
        if (*sal_cmd) return cmd_saliency(g, sal);
        if (*seg_cmd) return cmd_segment(g, seg);
        if (*weak_cmd) return cmd_train_weak(weak_config);
        if (*pred_cmd) return cmd_predict(pred);
        if (*ev_cmd) return cmd_eval_seg(ev);
        if (*srv_cmd) return cmd_serve(g, srv);
    } catch (const EmptySegmentationError& e) {
        print_error(to_string(ErrorCode::EmptySegmentation), e.what());
        return 1;
    } catch (const Error& e) {
        print_error(to_string(e.code()), e.what());
        return 1;
    } catch (const std::exception& e) {
        print_error("Internal", e.what());
        return 1;
    }
    return 2;
}
