#pragma once

#include "promptseg/mask_pipeline.hpp"
#include "promptseg/metrics.hpp"

#include <json.hpp>

#include <filesystem>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

namespace promptseg {

struct ServerConfig {
    std::string host = "127.0.0.1";
    int port = 8080;
};

// Config file keys: backend{name, weights_path, target_layer, input_size},
// segmenter{name, threshold}, cam{method, top_k, score_scale, ranking,
// subtract_baseline}, crf{...CrfParams}, boxes{multi_box, min_area_fraction},
// server{host, port}. PROMPTSEG_WEIGHTS_PATH overrides backend.weights_path.
struct AppConfig {
    BackendConfig backend;
    SegmenterConfig segmenter;
    CamOptions cam;
    CrfParams crf;
    BoxOptions boxes;
    ServerConfig server;
};

AppConfig app_config_from_json(const nlohmann::json& j);
AppConfig load_app_config(const std::filesystem::path& path); // empty path = defaults
nlohmann::json to_json(const AppConfig& cfg);
std::string config_hash(const AppConfig& cfg);

// Request-level overrides: {method, top_k, score_scale, crf{...}, multi_box,
// min_area_fraction, threshold}. `threshold` is the segmenter's intensity
// threshold.
struct RequestParams {
    ZeroShotOptions options;
    SegmenterConfig segmenter;
};
RequestParams apply_overrides(const AppConfig& cfg, const nlohmann::json& params);

// Owns the configured backends. Immutable after construction, so requests
// share it without further synchronization; backends that are not safe for
// concurrent use are leased exclusively.
class AppContext {
  public:
    explicit AppContext(AppConfig cfg);

    const AppConfig& config() const { return cfg_; }
    const DualEncoder& encoder() const { return *encoder_; }
    std::string config_hash() const { return hash_; }

    template <class Fn>
    auto with_encoder(Fn&& fn) const {
        if (encoder_->capabilities().concurrent_inference) return fn(*encoder_);
        std::lock_guard<std::mutex> lease(*lease_);
        return fn(*encoder_);
    }

    nlohmann::json backends_json() const;

  private:
    AppConfig cfg_;
    std::unique_ptr<DualEncoder> encoder_;
    std::unique_ptr<std::mutex> lease_;
    std::string hash_;
};

struct SegmentRequest {
    std::vector<std::uint8_t> image; // encoded bytes
    std::string prompt;
    nlohmann::json params = nlohmann::json::object();
    std::optional<std::vector<std::uint8_t>> gt; // encoded mask
};

// Everything a segment run produces, already serialized. The CLI writes these
// bytes to files and the service embeds them (base64) in its response.
struct SegmentArtifacts {
    std::vector<std::uint8_t> mask_png;
    std::vector<std::uint8_t> saliency_npy;
    std::vector<std::uint8_t> heatmap_png;
    nlohmann::json boxes;
    nlohmann::json provenance;
    std::optional<nlohmann::json> metrics;
    nlohmann::json timings;
    std::vector<std::string> warnings;
    ImageSize size;
};

SegmentArtifacts run_segment(const AppContext& ctx, const SegmentRequest& request);

struct SaliencyArtifacts {
    std::vector<std::uint8_t> saliency_npy;
    std::vector<std::uint8_t> heatmap_png;
    nlohmann::json provenance;
    std::vector<std::string> warnings;
    ImageSize size;
};

SaliencyArtifacts run_saliency(const AppContext& ctx, const SegmentRequest& request);

// {iou, dsc, auc|null, both_empty, auc_from_binary}
nlohmann::json metrics_json(const ImageMetrics& m);

// Machine-readable error body: {"error": {"code": ..., "message": ...}}.
nlohmann::json error_json(ErrorCode code, const std::string& message);

std::string base64_encode(const std::vector<std::uint8_t>& bytes);
// Throws DecodeError on malformed input.
std::vector<std::uint8_t> base64_decode(std::string_view text);

} // namespace promptseg
