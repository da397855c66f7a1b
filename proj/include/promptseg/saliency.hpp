#pragma once

#include "promptseg/encoder.hpp"

#include <functional>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace promptseg {

enum class CamMethod { GScoreCam, GradCam };

std::string to_string(CamMethod method);
CamMethod cam_method_from_string(std::string_view name); // "gscorecam" | "gradcam"

// Statistic used to pick the channels gScoreCAM perturbs.
enum class ChannelRanking {
    MeanAbsGradient, // mean over cells of |dS/dA|
    AbsMeanGradient, // |mean over cells of dS/dA|
};

struct CamOptions {
    CamMethod method = CamMethod::GScoreCam;
    int top_k = 60;
    // Softmax inverse temperature applied to the masked-image scores.
    double score_scale = 100.0;
    ChannelRanking ranking = ChannelRanking::MeanAbsGradient;
    // Subtract the score of the all-zero (mean-colour) image before the softmax.
    bool subtract_baseline = false;

    void validate() const;
};

struct SaliencyMap {
    Map values; // H×W in [0,1]
    std::string prompt;
    CamMethod method = CamMethod::GScoreCam;
    std::optional<int> top_k; // channels actually perturbed
    std::vector<std::string> warnings;
};

// Scores a channel-standardized image against a fixed prompt embedding.
using ScoreFunction = std::function<double(const Image& standardized)>;

ScoreFunction make_score_function(const DualEncoder& backend, const Vector& text_embedding);

// Per-channel ranking statistic; larger is more relevant.
std::vector<double> channel_relevance(const FeatureMaps& gradient, ChannelRanking ranking);

// GradCAM on a probe. ReLU(sum_c w_c A_c) at the activation grid, bilinearly
// resized to `output`, then divided by its maximum (zero maps stay zero).
Map gradcam_map(const ActivationProbe& probe, ImageSize output);

struct GScoreCamTrace {
    std::vector<int> channels; // kept channels, most relevant first
    std::vector<double> scores;
    std::vector<double> weights;
    std::vector<std::string> warnings;
};

// gScoreCAM on a probe. `standardized` is the encoder input the probe was
// computed from; its size fixes the output size.
Map gscorecam_map(const ActivationProbe& probe, const Image& standardized,
                  const ScoreFunction& score, const CamOptions& options,
                  GScoreCamTrace* trace = nullptr);

// Both take an RGB image in [0,1] at the backend input size.
SaliencyMap gradcam(const DualEncoder& backend, const Image& image, std::string_view prompt);
SaliencyMap gscorecam(const DualEncoder& backend, const Image& image, std::string_view prompt,
                      const CamOptions& options = {});

// Dispatches on options.method.
SaliencyMap compute_saliency(const DualEncoder& backend, const Image& image,
                             std::string_view prompt, const CamOptions& options = {});

} // namespace promptseg
