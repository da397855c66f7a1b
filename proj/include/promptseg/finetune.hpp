#pragma once

#include "promptseg/data_io.hpp"
#include "promptseg/linear_encoder.hpp"
#include "promptseg/losses.hpp"
#include "promptseg/retrieval.hpp"

#include <json.hpp>

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace promptseg {

enum class DecayTrigger { Epoch, Plateau };

struct TrainConfig {
    LossKind loss = LossKind::DhnNce;
    LossConfig loss_config;
    double learning_rate = 1e-6;
    double lr_decay = 0.5;
    DecayTrigger decay_trigger = DecayTrigger::Epoch;
    int plateau_patience = 1; // evaluations without improvement before decaying
    int batch_size = 64;
    int val_batch_size = 0; // 0 = batch_size
    int max_epochs = 20;
    long max_steps = 0; // 0 = no step limit
    int eval_every = 0; // steps; 0 = once per epoch
    std::uint64_t seed = 0;
    std::filesystem::path checkpoint_dir;
    bool freeze_image = false;
    bool freeze_text = false;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_epsilon = 1e-8;

    void validate() const;
};

nlohmann::json to_json(const TrainConfig& cfg);
TrainConfig train_config_from_json(const nlohmann::json& j);
// Hex FNV-1a of the canonical JSON dump.
std::string config_hash(const TrainConfig& cfg);

// initial * decay^index
double lr_schedule(double initial, double decay, int index);

struct TrainLogRecord {
    long step = 0;
    int epoch = 0;
    double loss = 0.0;
    double learning_rate = 0.0;
    std::optional<double> val_top1;
};

nlohmann::json to_json(const TrainLogRecord& r);

// Frozen features of a captioned split, one row per record.
struct FeatureSet {
    Matrix image; // N × LinearDualEncoder::kImageFeatures
    Matrix text;  // N × LinearDualEncoder::kTextFeatures
    Eigen::Index size() const { return image.rows(); }
};

FeatureSet extract_features(const LinearDualEncoder& encoder,
                            const std::vector<CaptionedRecord>& records,
                            const ImageLoader& loader = {});

// Unit-norm embeddings of a feature set under the current projections.
Matrix project_images(const LinearDualEncoder& encoder, const FeatureSet& features);
Matrix project_texts(const LinearDualEncoder& encoder, const FeatureSet& features);

// Mean of image->text and text->image top-1 over consecutive batches in stored
// order; a trailing batch with fewer than 2 items is skipped.
double validation_top1(const LinearDualEncoder& encoder, const FeatureSet& val, int batch_size);

// Adam over the projection heads of a LinearDualEncoder.
class ProjectionTrainer {
  public:
    ProjectionTrainer(LinearDualEncoder& encoder, const TrainConfig& cfg);

    // One update on the given rows of `features`; returns the batch loss
    // before the update.
    double step(const FeatureSet& features, const std::vector<Eigen::Index>& rows, double lr);
    // Loss on the given rows without updating.
    double loss(const FeatureSet& features, const std::vector<Eigen::Index>& rows) const;
    long steps_taken() const { return t_; }

  private:
    struct Moments {
        Matrix m, v;
    };
    void adam(Matrix& param, Moments& mom, const Matrix& grad, double lr);

    LinearDualEncoder& encoder_;
    TrainConfig cfg_;
    Moments image_, text_;
    long t_ = 0;
};

struct FinetuneResult {
    double best_val_top1 = 0.0;
    long best_step = 0;
    int best_epoch = 0;
    long steps = 0;
    std::vector<TrainLogRecord> log;
    std::filesystem::path checkpoint; // empty when no checkpoint_dir was set
    std::filesystem::path manifest;
    std::filesystem::path log_path;
};

// Trains the projection heads in place and leaves the best-on-validation
// weights loaded in `encoder`. Writes best.json, manifest.json and
// train_log.jsonl under cfg.checkpoint_dir when it is set.
FinetuneResult finetune(LinearDualEncoder& encoder, const FeatureSet& train, const FeatureSet& val,
                        const TrainConfig& cfg);

FinetuneResult finetune(LinearDualEncoder& encoder, const CaptionedImageSet& train,
                        const CaptionedImageSet& val, const TrainConfig& cfg,
                        const ImageLoader& loader = {});

// Throws BackendFrozen unless `backend` supports gradient updates.
FinetuneResult finetune(DualEncoder& backend, const CaptionedImageSet& train,
                        const CaptionedImageSet& val, const TrainConfig& cfg,
                        const ImageLoader& loader = {});

} // namespace promptseg
