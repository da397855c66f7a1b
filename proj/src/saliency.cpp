#include "promptseg/saliency.hpp"

#include "promptseg/error.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace promptseg {

std::string to_string(CamMethod method) {
    return method == CamMethod::GradCam ? "gradcam" : "gscorecam";
}

CamMethod cam_method_from_string(std::string_view name) {
    if (name == "gscorecam") return CamMethod::GScoreCam;
    if (name == "gradcam") return CamMethod::GradCam;
    throw Error(ErrorCode::InvalidConfig, "unknown CAM method '" + std::string(name) + "'");
}

void CamOptions::validate() const {
    if (top_k < 1) throw Error(ErrorCode::InvalidConfig, "cam top_k must be >= 1");
    if (!(score_scale > 0.0) || !std::isfinite(score_scale))
        throw Error(ErrorCode::InvalidConfig, "cam score_scale must be positive");
}

ScoreFunction make_score_function(const DualEncoder& backend, const Vector& text_embedding) {
    return [&backend, text_embedding](const Image& standardized) {
        return backend.encode_standardized(standardized).dot(text_embedding);
    };
}

std::vector<double> channel_relevance(const FeatureMaps& gradient, ChannelRanking ranking) {
    const double cells = static_cast<double>(gradient.height()) * gradient.width();
    std::vector<double> out(gradient.channels(), 0.0);
    for (int c = 0; c < gradient.channels(); ++c) {
        double acc = 0.0;
        for (int y = 0; y < gradient.height(); ++y)
            for (int x = 0; x < gradient.width(); ++x) {
                const double g = gradient.at(c, y, x);
                acc += ranking == ChannelRanking::MeanAbsGradient ? std::abs(g) : g;
            }
        out[c] = std::abs(acc) / cells;
    }
    return out;
}

namespace {

Map max_normalize(Map m) {
    const double peak = m.empty() ? 0.0 : *std::max_element(m.data().begin(), m.data().end());
    if (!(peak > 0.0)) {
        std::fill(m.data().begin(), m.data().end(), 0.0);
        return m;
    }
    for (double& v : m.data()) v = std::clamp(v / peak, 0.0, 1.0);
    return m;
}

Map relu(Map m) {
    for (double& v : m.data()) v = std::max(v, 0.0);
    return m;
}

Image apply_mask(const Image& standardized, const Map& mask) {
    Image out = standardized;
    for (int y = 0; y < out.height(); ++y)
        for (int x = 0; x < out.width(); ++x)
            for (int c = 0; c < out.channels(); ++c) out.at(y, x, c) *= mask(y, x);
    return out;
}

} // namespace

Map gradcam_map(const ActivationProbe& probe, ImageSize output) {
    const FeatureMaps& a = probe.activations;
    const FeatureMaps grad = probe.gradient();
    Map cam(a.height(), a.width());
    for (int c = 0; c < a.channels(); ++c) {
        const double w = grad.channel_mean(c);
        if (w == 0.0) continue;
        for (int y = 0; y < a.height(); ++y)
            for (int x = 0; x < a.width(); ++x) cam(y, x) += w * a.at(c, y, x);
    }
    return max_normalize(resize_bilinear(relu(std::move(cam)), output));
}

Map gscorecam_map(const ActivationProbe& probe, const Image& standardized,
                  const ScoreFunction& score, const CamOptions& options, GScoreCamTrace* trace) {
    options.validate();
    const FeatureMaps& a = probe.activations;
    const ImageSize out_size = standardized.size();
    GScoreCamTrace local;
    GScoreCamTrace& t = trace ? *trace : local;
    t = {};

    const auto relevance = channel_relevance(probe.gradient(), options.ranking);
    std::vector<int> order;
    for (int c = 0; c < a.channels(); ++c)
        if (relevance[c] > 0.0) order.push_back(c);
    std::stable_sort(order.begin(), order.end(),
                     [&](int l, int r) { return relevance[l] > relevance[r]; });

    if (options.top_k > a.channels())
        t.warnings.push_back("top_k " + std::to_string(options.top_k) + " exceeds " +
                             std::to_string(a.channels()) + " channels; clipped");
    const int keep = std::min<int>(options.top_k, static_cast<int>(order.size()));
    order.resize(keep);
    t.channels = order;

    Map result(out_size.height, out_size.width);
    if (keep == 0) return result;

    const double baseline =
        options.subtract_baseline
            ? score(Image(standardized.height(), standardized.width(), standardized.channels()))
            : 0.0;
    std::vector<Map> maps;
    maps.reserve(keep);
    for (int c : order) {
        maps.push_back(min_max_normalize(resize_bilinear(a.channel(c), out_size)));
        t.scores.push_back(score(apply_mask(standardized, maps.back())) - baseline);
    }

    const double top = *std::max_element(t.scores.begin(), t.scores.end());
    double total = 0.0;
    for (double s : t.scores) {
        t.weights.push_back(std::exp(options.score_scale * (s - top)));
        total += t.weights.back();
    }
    for (double& w : t.weights) w /= total;

    for (int i = 0; i < keep; ++i)
        for (std::size_t p = 0; p < result.count(); ++p)
            result.data()[p] += t.weights[i] * maps[i].data()[p];
    return max_normalize(relu(std::move(result)));
}

SaliencyMap gradcam(const DualEncoder& backend, const Image& image, std::string_view prompt) {
    if (!backend.capabilities().gradients_available)
        throw Error(ErrorCode::ActivationsUnavailable,
                    "backend '" + backend.name() + "' does not provide gradients");
    const TextEmbedding text = backend.encode_text(prompt);
    const ActivationProbe probe = backend.target_layer_activations(image, text.vector);
    SaliencyMap out;
    out.values = gradcam_map(probe, image.size());
    out.prompt = std::string(prompt);
    out.method = CamMethod::GradCam;
    out.warnings = text.warnings;
    return out;
}

SaliencyMap gscorecam(const DualEncoder& backend, const Image& image, std::string_view prompt,
                      const CamOptions& options) {
    options.validate();
    if (!backend.capabilities().gradients_available)
        throw Error(ErrorCode::ActivationsUnavailable,
                    "backend '" + backend.name() + "' does not provide gradients for ranking");
    const TextEmbedding text = backend.encode_text(prompt);
    const ActivationProbe probe = backend.target_layer_activations(image, text.vector);
    GScoreCamTrace trace;
    SaliencyMap out;
    out.values = gscorecam_map(probe, standardize(image), make_score_function(backend, text.vector),
                               options, &trace);
    out.prompt = std::string(prompt);
    out.method = CamMethod::GScoreCam;
    out.top_k = static_cast<int>(trace.channels.size());
    out.warnings = text.warnings;
    out.warnings.insert(out.warnings.end(), trace.warnings.begin(), trace.warnings.end());
    return out;
}

SaliencyMap compute_saliency(const DualEncoder& backend, const Image& image,
                             std::string_view prompt, const CamOptions& options) {
    return options.method == CamMethod::GradCam ? gradcam(backend, image, prompt)
                                                : gscorecam(backend, image, prompt, options);
}

} // namespace promptseg
