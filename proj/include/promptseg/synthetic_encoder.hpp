#pragma once

#include "promptseg/encoder.hpp"

namespace promptseg {

struct SyntheticConcept {
    std::string token;
    std::array<double, 3> color; // RGB in [0,1]
};

// Eight bright, mutually distinct concept colors.
std::vector<SyntheticConcept> default_concepts();

// `count` concepts with colors spread around the hue circle.
std::vector<SyntheticConcept> hue_concepts(int count);

struct SyntheticEncoderConfig {
    std::vector<SyntheticConcept> concepts = default_concepts();
    ImageSize input_size{64, 64};
    int grid_stride = 4; // activation grid = input_size / grid_stride
    // Matched image-text pairs beat mismatched ones by at least `margin`
    // whenever the concept covers at least `min_coverage` of the image.
    double margin = 0.2;
    double min_coverage = 0.02;
};

// Desk-scale oracle encoder. Channel c of the target layer is a per-pixel
// detector for concept c's color (compact support, so other concepts and the
// background respond exactly 0), average-pooled over grid_stride blocks. The
// image embedding is normalize(sum_c mean(A_c) e_c + eps e_C) and the text
// embedding of concept c is e_c.
class SyntheticDualEncoder final : public DualEncoder {
  public:
    explicit SyntheticDualEncoder(SyntheticEncoderConfig cfg = {});

    std::string name() const override { return "synthetic"; }
    int embed_dim() const override { return static_cast<int>(cfg_.concepts.size()) + 1; }
    ImageSize input_size() const override { return cfg_.input_size; }
    Capabilities capabilities() const override { return {true, true, true}; }
    std::optional<TargetLayer> target_layer() const override;

    Vector encode_standardized(const Image& standardized) const override;
    FeatureMaps activations_standardized(const Image& standardized) const override;
    std::shared_ptr<const ActivationHead> score_head(const Vector& text_embedding) const override;

    const std::vector<SyntheticConcept>& concepts() const { return cfg_.concepts; }
    int concept_index(std::string_view token) const; // -1 when unknown
    double background_weight() const { return background_weight_; }
    double detector_radius() const { return radius_; }

    // Paints each (concept, region) onto a uniform background.
    Image render(const std::vector<std::pair<int, Mask>>& placements,
                 std::array<double, 3> background = {0.05, 0.05, 0.05}) const;

  protected:
    TextEmbedding encode_text_trimmed(std::string_view prompt) const override;

  private:
    Vector embed_pooled(const std::vector<double>& channel_means) const;

    SyntheticEncoderConfig cfg_;
    std::vector<std::array<double, 3>> standardized_colors_;
    double radius_ = 0.0;
    double background_weight_ = 0.0;
};

} // namespace promptseg
