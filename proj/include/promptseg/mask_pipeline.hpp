#pragma once

#include "promptseg/error.hpp"
#include "promptseg/saliency.hpp"

#include <json.hpp>

#include <memory>
#include <string>
#include <vector>

namespace promptseg {

struct CrfParams {
    int iterations = 5;
    double gaussian_weight = 3.0;
    double gaussian_std = 3.0; // pixels
    double bilateral_weight = 4.0;
    double bilateral_spatial_std = 49.0; // pixels
    double bilateral_color_std = 5.0;    // on the 0-255 colour scale
    double epsilon = 0.01;               // unary clamp
    bool normalize_saliency = true;      // min-max normalize before clamping
    // Images with more pixels than max_exact_pixels pass messages on a
    // block-averaged grid of at most that many cells.
    int max_exact_pixels = 48 * 48;

    void validate() const;
};

// Two-label dense CRF (Potts, Gaussian + bilateral kernels) solved by
// mean-field. The unary foreground probability is the clamped saliency.
// Returns the labels with Q(foreground) > 0.5.
Mask crf_refine(const Image& image, const Map& saliency, const CrfParams& params = {});

struct BoxPrompt {
    int xmin = 0, ymin = 0, xmax = 0, ymax = 0; // inclusive pixel bounds
    friend bool operator==(const BoxPrompt&, const BoxPrompt&) = default;
};

struct BoxOptions {
    double min_area_fraction = 0.01;
    bool multi_box = true;
};

// One tight box per 8-connected component with at least
// min_area_fraction * H * W pixels, largest component first.
// Throws NoForeground when no component qualifies.
std::vector<BoxPrompt> extract_boxes(const Mask& mask, const BoxOptions& options = {});

class PromptableSegmenter {
  public:
    virtual ~PromptableSegmenter() = default;
    virtual std::string name() const = 0;
    virtual bool deterministic() const { return true; }
    // Pixels within this distance of a box may be labelled foreground.
    virtual int context_margin() const { return 0; }
    virtual Mask segment(const Image& image, const BoxPrompt& box) const = 0;
};

// Box interior intersected with (mean RGB > threshold).
class ThresholdBoxSegmenter final : public PromptableSegmenter {
  public:
    explicit ThresholdBoxSegmenter(double threshold = 0.5) : threshold_(threshold) {}
    std::string name() const override { return "threshold_box"; }
    Mask segment(const Image& image, const BoxPrompt& box) const override;
    double threshold() const { return threshold_; }

  private:
    double threshold_;
};

struct SegmenterConfig {
    std::string name = "threshold_box";
    double threshold = 0.5;
};

// Throws BackendUnavailable for anything but "threshold_box".
std::unique_ptr<PromptableSegmenter> make_segmenter(const SegmenterConfig& cfg);

// Union of the per-box masks. Boxes that produce nothing are reported in
// `warnings` when given.
Mask segment_with_boxes(const PromptableSegmenter& segmenter, const Image& image,
                        const std::vector<BoxPrompt>& boxes,
                        std::vector<std::string>* warnings = nullptr);

struct ZeroShotOptions {
    CamOptions cam;
    CrfParams crf;
    BoxOptions boxes;
};

struct StageTimings {
    double saliency_ms = 0.0;
    double crf_ms = 0.0;
    double boxes_ms = 0.0;
    double segment_ms = 0.0;
};

struct PseudoMask {
    Mask mask;
    Mask crf_mask;
    std::vector<BoxPrompt> boxes;
    SaliencyMap saliency;
    std::string segmenter;
    nlohmann::json provenance;
    std::vector<std::string> warnings;
    StageTimings timings;
};

class EmptySegmentationError : public Error {
  public:
    EmptySegmentationError(const std::string& message, SaliencyMap saliency)
        : Error(ErrorCode::EmptySegmentation, message), saliency_(std::move(saliency)) {}
    const SaliencyMap& saliency() const { return saliency_; }

  private:
    SaliencyMap saliency_;
};

// saliency -> crf_refine -> extract_boxes -> segment_with_boxes.
// Throws EmptySegmentationError when the refined saliency has no qualifying
// component.
PseudoMask zero_shot_segment(const DualEncoder& backend, const PromptableSegmenter& segmenter,
                             const Image& image, std::string_view prompt,
                             const ZeroShotOptions& options = {});

nlohmann::json to_json(const BoxPrompt& box);
nlohmann::json to_json(const CrfParams& params);
nlohmann::json to_json(const CamOptions& options);
nlohmann::json boxes_json(const std::vector<BoxPrompt>& boxes);

// FNV-1a over the pixel values, for provenance records.
std::string image_digest(const Image& image);

} // namespace promptseg
