#include "promptseg/encoder.hpp"

#include "promptseg/error.hpp"
#include "promptseg/linear_encoder.hpp"
#include "promptseg/synthetic_encoder.hpp"

#include <cctype>

namespace promptseg {

Image standardize(const Image& image) {
    Image out = image;
    auto& d = out.data();
    for (std::size_t i = 0; i < d.size(); ++i) {
        const auto c = i % 3;
        d[i] = (d[i] - kClipMean[c]) / kClipStd[c];
    }
    return out;
}

Image unstandardize(const Image& image) {
    Image out = image;
    auto& d = out.data();
    for (std::size_t i = 0; i < d.size(); ++i) {
        const auto c = i % 3;
        d[i] = d[i] * kClipStd[c] + kClipMean[c];
    }
    return out;
}

Map FeatureMaps::channel(int c) const {
    Map m(height_, width_);
    std::copy_n(data_.begin() + index(c, 0, 0), m.count(), m.data().begin());
    return m;
}

void FeatureMaps::set_channel(int c, const Map& values) {
    std::copy(values.data().begin(), values.data().end(), data_.begin() + index(c, 0, 0));
}

double FeatureMaps::channel_mean(int c) const {
    const std::size_t n = static_cast<std::size_t>(height_) * width_;
    double sum = 0.0;
    for (std::size_t i = 0; i < n; ++i) sum += data_[index(c, 0, 0) + i];
    return n ? sum / static_cast<double>(n) : 0.0;
}

double LinearChannelHead::score(const FeatureMaps& activations) const {
    double s = 0.0;
    for (int c = 0; c < activations.channels() && c < static_cast<int>(weights_.size()); ++c)
        s += weights_[c] * activations.channel_mean(c);
    return s;
}

FeatureMaps LinearChannelHead::gradient(const FeatureMaps& activations) const {
    FeatureMaps g(activations.channels(), activations.height(), activations.width());
    const double cells = static_cast<double>(activations.height()) * activations.width();
    for (int c = 0; c < activations.channels() && c < static_cast<int>(weights_.size()); ++c)
        for (int y = 0; y < g.height(); ++y)
            for (int x = 0; x < g.width(); ++x) g.at(c, y, x) = weights_[c] / cells;
    return g;
}

void DualEncoder::check_input(const Image& image) const {
    if (image.size() != input_size() || image.channels() != 3)
        throw Error(ErrorCode::PreprocessError,
                    "expected a " + std::to_string(input_size().height) + "x" +
                        std::to_string(input_size().width) + " RGB image, got " +
                        std::to_string(image.height()) + "x" + std::to_string(image.width()) +
                        "x" + std::to_string(image.channels()));
}

Vector DualEncoder::encode_image(const Image& image) const {
    check_input(image);
    return encode_standardized(standardize(image));
}

TextEmbedding DualEncoder::encode_text(std::string_view prompt) const {
    const auto first = prompt.find_first_not_of(" \t\r\n");
    if (first == std::string_view::npos) throw Error(ErrorCode::EmptyPrompt, "prompt is empty");
    const auto last = prompt.find_last_not_of(" \t\r\n");
    return encode_text_trimmed(prompt.substr(first, last - first + 1));
}

ActivationProbe DualEncoder::target_layer_activations(const Image& image,
                                                      const Vector& text_embedding) const {
    if (!capabilities().activations_exposed)
        throw Error(ErrorCode::ActivationsUnavailable,
                    "backend '" + name() + "' does not expose activations");
    check_input(image);
    return {activations_standardized(standardize(image)), score_head(text_embedding)};
}

FeatureMaps DualEncoder::activations_standardized(const Image&) const {
    throw Error(ErrorCode::ActivationsUnavailable,
                "backend '" + name() + "' does not expose activations");
}

std::shared_ptr<const ActivationHead> DualEncoder::score_head(const Vector&) const {
    throw Error(ErrorCode::ActivationsUnavailable,
                "backend '" + name() + "' does not expose a score head");
}

std::vector<std::string> tokenize(std::string_view text) {
    std::vector<std::string> tokens;
    std::string current;
    auto flush = [&] {
        while (!current.empty() && !std::isalnum(static_cast<unsigned char>(current.back())))
            current.pop_back();
        std::size_t lead = 0;
        while (lead < current.size() && !std::isalnum(static_cast<unsigned char>(current[lead])))
            ++lead;
        if (lead < current.size()) tokens.push_back(current.substr(lead));
        current.clear();
    };
    for (char ch : text) {
        if (std::isspace(static_cast<unsigned char>(ch))) flush();
        else current.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(ch))));
    }
    flush();
    return tokens;
}

std::unique_ptr<DualEncoder> make_encoder(const BackendConfig& cfg) {
    if (cfg.name == "synthetic") {
        SyntheticEncoderConfig sc;
        if (cfg.input_size.height > 0) sc.input_size = cfg.input_size;
        if (!cfg.target_layer.empty() && cfg.target_layer != "concept_detectors")
            throw Error(ErrorCode::InvalidConfig,
                        "synthetic backend has no layer '" + cfg.target_layer + "'");
        return std::make_unique<SyntheticDualEncoder>(sc);
    }
    if (cfg.name == "linear") {
        if (cfg.weights_path.empty() || !std::filesystem::exists(cfg.weights_path))
            throw Error(ErrorCode::BackendUnavailable,
                        "linear backend weights not found at '" + cfg.weights_path.string() + "'");
        auto enc = std::make_unique<LinearDualEncoder>(LinearDualEncoder::load(cfg.weights_path));
        if (cfg.input_size.height > 0 && cfg.input_size != enc->input_size())
            throw Error(ErrorCode::InvalidConfig, "input_size disagrees with the checkpoint");
        return enc;
    }
    if (cfg.weights_path.empty() || !std::filesystem::exists(cfg.weights_path))
        throw Error(ErrorCode::BackendUnavailable,
                    "backend '" + cfg.name + "': weights not found at '" +
                        cfg.weights_path.string() + "'");
    throw Error(ErrorCode::BackendUnavailable,
                "backend '" + cfg.name + "' needs an inference runtime that this build lacks");
}

} // namespace promptseg
