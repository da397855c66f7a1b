#pragma once

#include "promptseg/embedding.hpp"
#include "promptseg/image.hpp"

#include <array>
#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace promptseg {

// Channel statistics of the original CLIP image preprocessing.
inline constexpr std::array<double, 3> kClipMean = {0.48145466, 0.4578275, 0.40821073};
inline constexpr std::array<double, 3> kClipStd = {0.26862954, 0.26130258, 0.27577711};

// (x - mean) / std per channel.
Image standardize(const Image& image);
Image unstandardize(const Image& image);

struct Capabilities {
    bool gradients_available = false;
    bool activations_exposed = false;
    // Whether concurrent calls on one handle are safe.
    bool concurrent_inference = true;
};

struct TargetLayer {
    std::string name;
    int channels = 0;
    int height = 0;
    int width = 0;
};

// C×h×w activations of an encoder layer.
class FeatureMaps {
  public:
    FeatureMaps() = default;
    FeatureMaps(int channels, int height, int width, double fill = 0.0)
        : channels_(channels), height_(height), width_(width),
          data_(static_cast<std::size_t>(channels) * height * width, fill) {}

    int channels() const { return channels_; }
    int height() const { return height_; }
    int width() const { return width_; }

    double& at(int c, int y, int x) { return data_[index(c, y, x)]; }
    double at(int c, int y, int x) const { return data_[index(c, y, x)]; }

    Map channel(int c) const;
    void set_channel(int c, const Map& values);
    double channel_mean(int c) const;

    std::vector<double>& data() { return data_; }
    const std::vector<double>& data() const { return data_; }

  private:
    std::size_t index(int c, int y, int x) const {
        return (static_cast<std::size_t>(c) * height_ + y) * width_ + x;
    }

    int channels_ = 0;
    int height_ = 0;
    int width_ = 0;
    std::vector<double> data_;
};

// Maps target-layer activations to a scalar image-text score, with its
// gradient.
class ActivationHead {
  public:
    virtual ~ActivationHead() = default;
    virtual double score(const FeatureMaps& activations) const = 0;
    virtual FeatureMaps gradient(const FeatureMaps& activations) const = 0;
};

// score = sum_c weight_c * mean(channel c)
class LinearChannelHead final : public ActivationHead {
  public:
    explicit LinearChannelHead(std::vector<double> channel_weights)
        : weights_(std::move(channel_weights)) {}

    double score(const FeatureMaps& activations) const override;
    FeatureMaps gradient(const FeatureMaps& activations) const override;

  private:
    std::vector<double> weights_;
};

struct ActivationProbe {
    FeatureMaps activations;
    std::shared_ptr<const ActivationHead> head;

    double score() const { return head->score(activations); }
    FeatureMaps gradient() const { return head->gradient(activations); }
};

struct TextEmbedding {
    Vector vector;
    std::vector<std::string> warnings;
};

// Image + text encoder pair projecting into a shared D-dimensional space.
// Inputs to encode_image are RGB images in [0,1] at input_size(); the handle
// applies CLIP channel standardization itself.
class DualEncoder {
  public:
    virtual ~DualEncoder() = default;

    virtual std::string name() const = 0;
    virtual int embed_dim() const = 0;
    virtual ImageSize input_size() const = 0;
    virtual Capabilities capabilities() const = 0;
    virtual std::optional<TargetLayer> target_layer() const { return std::nullopt; }

    // Unit-norm image embedding. Throws PreprocessError on a size mismatch.
    Vector encode_image(const Image& image) const;
    // Same, for an image that has already been standardized (and possibly
    // perturbed, e.g. masked for saliency scoring).
    virtual Vector encode_standardized(const Image& standardized) const = 0;

    // Unit-norm text embedding. Throws EmptyPrompt for blank prompts.
    TextEmbedding encode_text(std::string_view prompt) const;

    // Target-layer activations of `image` plus a head scoring them against
    // `text_embedding`. Throws ActivationsUnavailable when not exposed.
    ActivationProbe target_layer_activations(const Image& image, const Vector& text_embedding) const;

    virtual FeatureMaps activations_standardized(const Image& standardized) const;
    virtual std::shared_ptr<const ActivationHead> score_head(const Vector& text_embedding) const;

    void check_input(const Image& image) const;

  protected:
    virtual TextEmbedding encode_text_trimmed(std::string_view prompt) const = 0;
};

struct BackendConfig {
    std::string name = "synthetic";
    std::filesystem::path weights_path;
    std::string target_layer;
    ImageSize input_size{};
};

// "synthetic" builds the concept oracle backend; "linear" loads a trainable
// projection encoder checkpoint from weights_path. Anything else, or missing
// weights, throws BackendUnavailable.
std::unique_ptr<DualEncoder> make_encoder(const BackendConfig& cfg);

// Lower-cased whitespace tokens with surrounding punctuation stripped.
std::vector<std::string> tokenize(std::string_view text);

} // namespace promptseg
