#pragma once

#include "promptseg/data_io.hpp"
#include "promptseg/resunet.hpp"

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace promptseg {

struct WeakTrainConfig {
    double dice_weight = 0.5;
    double bce_weight = 0.5;
    double learning_rate = 1e-3;
    int epochs = 50;
    int batch_size = 4;
    int patience = 10; // epochs without validation DSC improvement
    std::uint64_t seed = 0;
    // Pixels within this many pixels of a pseudo-mask boundary are left out
    // of the loss. 0 trains on pseudo-masks as they are.
    int confidence_band = 0;
    double time_budget_seconds = 0.0; // 0 = unlimited
    ImageSize input_size{};           // resize on load; {0,0} keeps file sizes
    std::filesystem::path checkpoint_path;
    std::filesystem::path log_path; // JSON lines, one per epoch

    void validate() const;
};

WeakTrainConfig weak_config_from_json(const nlohmann::json& j);

struct SegSample {
    std::string id;
    Image image;
    Mask mask; // training: pseudo-mask; validation: ground truth
    std::optional<Mask> pseudo_mask; // validation only, for the comparison
};

// dice_weight * (1 - soft dice) + bce_weight * mean BCE, over the pixels
// whose weight is non-zero. Writes d(loss)/d(logits) when `dlogits` is set.
double dice_bce_loss(const Matrix& logits, const Mask& target, double dice_weight,
                     double bce_weight, Matrix* dlogits = nullptr, const Mask* include = nullptr);

struct WeakReport {
    double best_val_dsc = 0.0;
    int best_epoch = -1;
    int epochs_run = 0;
    bool stopped_early = false;
    std::vector<double> train_loss; // per epoch
    std::vector<double> val_dsc;    // per epoch
    std::optional<double> pseudo_val_dsc;  // pseudo-masks vs ground truth
    std::optional<double> refined_val_dsc; // best model vs ground truth
    std::filesystem::path checkpoint;
};

nlohmann::json to_json(const WeakReport& report);

struct WeakTrainResult {
    ResUNet model; // best-on-validation weights
    WeakReport report;
};

// Throws EmptyTrainingSet when `train` is empty.
WeakTrainResult train_weak(const ResUNetSpec& spec, const std::vector<SegSample>& train,
                           const std::vector<SegSample>& val, const WeakTrainConfig& cfg);

// Loads images and masks of both sets (training masks are pseudo-masks,
// validation masks ground truth). Optional pseudo masks for the validation
// images come from `val_pseudo_dir` (same stems).
WeakTrainResult train_weak(const ResUNetSpec& spec, const SegmentationSet& train,
                           const SegmentationSet& val, const WeakTrainConfig& cfg,
                           const std::filesystem::path& val_pseudo_dir = {});

std::vector<SegSample> load_samples(const SegmentationSet& set, ImageSize size);

Mask resize_mask_nearest(const Mask& mask, ImageSize size);

Map predict(ResUNet& model, const Image& image);
// Throws CheckpointCorrupt for unreadable checkpoints.
Map predict(const std::filesystem::path& checkpoint, const Image& image);

Mask binarize(const Map& probabilities, double threshold = 0.5);

} // namespace promptseg
