#pragma once

#include "promptseg/encoder.hpp"

#include <cstdint>

namespace promptseg {

// Encoder whose towers are trainable linear projections on top of frozen
// feature extractors: a 4×4×4 RGB color histogram for images and hashed
// bag-of-words counts for text (each with a constant bias feature).
class LinearDualEncoder final : public DualEncoder {
  public:
    static constexpr int kImageFeatures = 65;
    static constexpr int kTextBuckets = 256;
    static constexpr int kTextFeatures = kTextBuckets + 1;

    LinearDualEncoder(int embed_dim, ImageSize input_size, std::uint64_t seed,
                      double init_scale = 0.1);

    static LinearDualEncoder load(const std::filesystem::path& path);
    void save(const std::filesystem::path& path) const;

    std::string name() const override { return "linear"; }
    int embed_dim() const override { return static_cast<int>(image_projection_.rows()); }
    ImageSize input_size() const override { return input_size_; }
    Capabilities capabilities() const override { return {true, false, true}; }

    Vector encode_standardized(const Image& standardized) const override;

    Vector image_features(const Image& standardized) const;
    Vector text_features(std::string_view prompt) const;

    Matrix& image_projection() { return image_projection_; }
    Matrix& text_projection() { return text_projection_; }
    const Matrix& image_projection() const { return image_projection_; }
    const Matrix& text_projection() const { return text_projection_; }

  protected:
    TextEmbedding encode_text_trimmed(std::string_view prompt) const override;

  private:
    LinearDualEncoder() = default;

    ImageSize input_size_{};
    Matrix image_projection_; // D × kImageFeatures
    Matrix text_projection_;  // D × kTextFeatures
};

} // namespace promptseg
