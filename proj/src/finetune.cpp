#include "promptseg/finetune.hpp"

#include "promptseg/error.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>

namespace promptseg {

void TrainConfig::validate() const {
    loss_config.validate();
    if (!(learning_rate > 0.0)) throw Error(ErrorCode::InvalidConfig, "learning_rate must be > 0");
    if (!(lr_decay > 0.0 && lr_decay <= 1.0))
        throw Error(ErrorCode::InvalidConfig, "lr_decay must lie in (0, 1]");
    if (batch_size < 2)
        throw Error(ErrorCode::BatchTooSmall,
                    "batch_size " + std::to_string(batch_size) + " leaves no in-batch negatives");
    if (val_batch_size == 1) throw Error(ErrorCode::BatchTooSmall, "val_batch_size must be >= 2");
    if (max_epochs < 1) throw Error(ErrorCode::InvalidConfig, "max_epochs must be >= 1");
    if (max_steps < 0 || eval_every < 0 || plateau_patience < 1)
        throw Error(ErrorCode::InvalidConfig, "invalid step/eval/patience settings");
    if (freeze_image && freeze_text)
        throw Error(ErrorCode::BackendFrozen, "both towers frozen; nothing to train");
}

nlohmann::json to_json(const TrainConfig& c) {
    return {{"loss", to_string(c.loss)},
            {"temperature", c.loss_config.temperature},
            {"beta1", c.loss_config.beta1},
            {"beta2", c.loss_config.beta2},
            {"alpha", c.loss_config.alpha},
            {"reduction", c.loss_config.reduction == Reduction::Mean ? "mean" : "sum"},
            {"learning_rate", c.learning_rate},
            {"lr_decay", c.lr_decay},
            {"decay_trigger", c.decay_trigger == DecayTrigger::Plateau ? "plateau" : "epoch"},
            {"plateau_patience", c.plateau_patience},
            {"batch_size", c.batch_size},
            {"val_batch_size", c.val_batch_size},
            {"max_epochs", c.max_epochs},
            {"max_steps", c.max_steps},
            {"eval_every", c.eval_every},
            {"seed", c.seed},
            {"checkpoint_dir", c.checkpoint_dir.string()},
            {"freeze_image", c.freeze_image},
            {"freeze_text", c.freeze_text}};
}

TrainConfig train_config_from_json(const nlohmann::json& j) {
    TrainConfig c;
    try {
        c.loss = loss_kind_from_string(j.value("loss", to_string(c.loss)));
        c.loss_config.temperature = j.value("temperature", c.loss_config.temperature);
        c.loss_config.beta1 = j.value("beta1", c.loss_config.beta1);
        c.loss_config.beta2 = j.value("beta2", c.loss_config.beta2);
        c.loss_config.alpha = j.value("alpha", c.loss_config.alpha);
        c.loss_config.reduction =
            j.value("reduction", std::string("sum")) == "mean" ? Reduction::Mean : Reduction::Sum;
        c.learning_rate = j.value("learning_rate", c.learning_rate);
        c.lr_decay = j.value("lr_decay", c.lr_decay);
        const auto trigger = j.value("decay_trigger", std::string("epoch"));
        if (trigger != "epoch" && trigger != "plateau")
            throw Error(ErrorCode::InvalidConfig, "decay_trigger must be 'epoch' or 'plateau'");
        c.decay_trigger = trigger == "plateau" ? DecayTrigger::Plateau : DecayTrigger::Epoch;
        c.plateau_patience = j.value("plateau_patience", c.plateau_patience);
        c.batch_size = j.value("batch_size", c.batch_size);
        c.val_batch_size = j.value("val_batch_size", c.val_batch_size);
        c.max_epochs = j.value("max_epochs", c.max_epochs);
        c.max_steps = j.value("max_steps", c.max_steps);
        c.eval_every = j.value("eval_every", c.eval_every);
        c.seed = j.value("seed", c.seed);
        c.checkpoint_dir = j.value("checkpoint_dir", std::string());
        c.freeze_image = j.value("freeze_image", c.freeze_image);
        c.freeze_text = j.value("freeze_text", c.freeze_text);
    } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorCode::InvalidConfig, std::string("bad training config: ") + e.what());
    }
    return c;
}

std::string config_hash(const TrainConfig& cfg) {
    std::uint64_t h = 1469598103934665603ULL;
    for (unsigned char ch : to_json(cfg).dump()) {
        h ^= ch;
        h *= 1099511628211ULL;
    }
    return fmt::format("{:016x}", h);
}

double lr_schedule(double initial, double decay, int index) {
    return initial * std::pow(decay, index);
}

nlohmann::json to_json(const TrainLogRecord& r) {
    nlohmann::json j = {{"step", r.step}, {"epoch", r.epoch}, {"loss", r.loss}, {"lr", r.learning_rate}};
    j["val_top1"] = r.val_top1 ? nlohmann::json(*r.val_top1) : nlohmann::json();
    return j;
}

FeatureSet extract_features(const LinearDualEncoder& encoder,
                            const std::vector<CaptionedRecord>& records, const ImageLoader& loader) {
    FeatureSet f;
    const auto n = static_cast<Eigen::Index>(records.size());
    f.image.resize(n, LinearDualEncoder::kImageFeatures);
    f.text.resize(n, LinearDualEncoder::kTextFeatures);
    for (Eigen::Index i = 0; i < n; ++i) {
        const auto& r = records[i];
        const Image img = loader ? loader(r.image_path, encoder.input_size())
                                 : load_image(r.image_path, encoder.input_size());
        f.image.row(i) = encoder.image_features(standardize(img)).transpose();
        f.text.row(i) = encoder.text_features(r.caption).transpose();
    }
    return f;
}

namespace {

Matrix rows_of(const Matrix& m, const std::vector<Eigen::Index>& rows) {
    Matrix out(static_cast<Eigen::Index>(rows.size()), m.cols());
    for (std::size_t i = 0; i < rows.size(); ++i) out.row(i) = m.row(rows[i]);
    return out;
}

// Gradient of row-normalization: dU = (dE - (dE.e) e) / |u|.
Matrix through_normalize(const Matrix& u, const Matrix& e, const Matrix& de) {
    Matrix du(u.rows(), u.cols());
    for (Eigen::Index i = 0; i < u.rows(); ++i)
        du.row(i) = (de.row(i) - de.row(i).dot(e.row(i)) * e.row(i)) / u.row(i).norm();
    return du;
}

} // namespace

Matrix project_images(const LinearDualEncoder& encoder, const FeatureSet& features) {
    return normalize_rows(features.image * encoder.image_projection().transpose());
}

Matrix project_texts(const LinearDualEncoder& encoder, const FeatureSet& features) {
    return normalize_rows(features.text * encoder.text_projection().transpose());
}

double validation_top1(const LinearDualEncoder& encoder, const FeatureSet& val, int batch_size) {
    const Matrix img = project_images(encoder, val), txt = project_texts(encoder, val);
    std::size_t hits = 0, total = 0;
    for (Eigen::Index start = 0; start < val.size(); start += batch_size) {
        const Eigen::Index b = std::min<Eigen::Index>(batch_size, val.size() - start);
        if (b < 2) break;
        const Matrix s = img.middleRows(start, b) * txt.middleRows(start, b).transpose();
        for (const auto& sim : {SimilarityMatrix{s, Direction::ImageToText},
                                SimilarityMatrix{s.transpose(), Direction::TextToImage}}) {
            const auto ok = topk_correct(sim, 1);
            hits += std::count(ok.begin(), ok.end(), true);
            total += ok.size();
        }
    }
    if (total == 0) throw Error(ErrorCode::EmptyTrainingSet, "validation split has fewer than 2 items");
    return static_cast<double>(hits) / static_cast<double>(total);
}

ProjectionTrainer::ProjectionTrainer(LinearDualEncoder& encoder, const TrainConfig& cfg)
    : encoder_(encoder), cfg_(cfg) {
    cfg_.validate();
    for (auto* mom : {&image_, &text_}) {
        const Matrix& p = mom == &image_ ? encoder.image_projection() : encoder.text_projection();
        mom->m = Matrix::Zero(p.rows(), p.cols());
        mom->v = Matrix::Zero(p.rows(), p.cols());
    }
}

double ProjectionTrainer::loss(const FeatureSet& features, const std::vector<Eigen::Index>& rows) const {
    const Matrix ui = rows_of(features.image, rows) * encoder_.image_projection().transpose();
    const Matrix ut = rows_of(features.text, rows) * encoder_.text_projection().transpose();
    return contrastive_loss(cfg_.loss, normalize_rows(ui), normalize_rows(ut), cfg_.loss_config).value;
}

double ProjectionTrainer::step(const FeatureSet& features, const std::vector<Eigen::Index>& rows,
                               double lr) {
    const Matrix xi = rows_of(features.image, rows), xt = rows_of(features.text, rows);
    const Matrix ui = xi * encoder_.image_projection().transpose();
    const Matrix ut = xt * encoder_.text_projection().transpose();
    const Matrix ei = normalize_rows(ui), et = normalize_rows(ut);
    const LossOutput out = contrastive_loss(cfg_.loss, ei, et, cfg_.loss_config, true);

    ++t_;
    if (!cfg_.freeze_image)
        adam(encoder_.image_projection(), image_,
             through_normalize(ui, ei, *out.image_gradient).transpose() * xi, lr);
    if (!cfg_.freeze_text)
        adam(encoder_.text_projection(), text_,
             through_normalize(ut, et, *out.text_gradient).transpose() * xt, lr);
    return out.value;
}

void ProjectionTrainer::adam(Matrix& param, Moments& mom, const Matrix& grad, double lr) {
    const double b1 = cfg_.adam_beta1, b2 = cfg_.adam_beta2;
    mom.m = b1 * mom.m + (1.0 - b1) * grad;
    mom.v = b2 * mom.v + (1.0 - b2) * grad.cwiseAbs2();
    const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
    param.array() -= lr * (mom.m.array() / c1) /
                     ((mom.v.array() / c2).sqrt() + cfg_.adam_epsilon);
}

FinetuneResult finetune(LinearDualEncoder& encoder, const FeatureSet& train, const FeatureSet& val,
                        const TrainConfig& cfg) {
    cfg.validate();
    if (train.size() < 2) throw Error(ErrorCode::EmptyTrainingSet, "training split has fewer than 2 items");
    if (val.size() < 2) throw Error(ErrorCode::EmptyTrainingSet, "validation split has fewer than 2 items");
    const int val_batch = cfg.val_batch_size > 0 ? cfg.val_batch_size : cfg.batch_size;

    FinetuneResult result;
    std::ofstream log_file;
    if (!cfg.checkpoint_dir.empty()) {
        std::filesystem::create_directories(cfg.checkpoint_dir);
        result.checkpoint = cfg.checkpoint_dir / "best.json";
        result.manifest = cfg.checkpoint_dir / "manifest.json";
        result.log_path = cfg.checkpoint_dir / "train_log.jsonl";
        log_file.open(result.log_path, std::ios::trunc);
        if (!log_file) throw Error(ErrorCode::IoError, "cannot write " + result.log_path.string());
    }

    ProjectionTrainer trainer(encoder, cfg);
    LinearDualEncoder best = encoder;
    int decay_index = 0;
    int stale = 0;
    double lr = cfg.learning_rate;

    auto record = [&](const TrainLogRecord& r) {
        result.log.push_back(r);
        if (log_file) log_file << to_json(r).dump() << '\n' << std::flush;
    };
    auto save_best = [&]() {
        if (result.checkpoint.empty()) return;
        best.save(result.checkpoint);
        const nlohmann::json manifest = {{"config_hash", config_hash(cfg)},
                                         {"config", to_json(cfg)},
                                         {"step", result.best_step},
                                         {"epoch", result.best_epoch},
                                         {"metric", "val_top1"},
                                         {"value", result.best_val_top1},
                                         {"checkpoint", result.checkpoint.filename().string()},
                                         {"backend", encoder.name()}};
        write_text(result.manifest, manifest.dump(2) + "\n");
    };
    // Returns true when the metric improved.
    auto evaluate = [&](int epoch, double last_loss) {
        const double top1 = validation_top1(encoder, val, val_batch);
        record({trainer.steps_taken(), epoch, last_loss, lr, top1});
        if (top1 > result.best_val_top1 || result.log.size() == 1) {
            result.best_val_top1 = top1;
            result.best_step = trainer.steps_taken();
            result.best_epoch = epoch;
            best = encoder;
            save_best();
            return true;
        }
        return false;
    };

    evaluate(0, trainer.loss(train, [&] {
                 std::vector<Eigen::Index> first(std::min<Eigen::Index>(cfg.batch_size, train.size()));
                 std::iota(first.begin(), first.end(), 0);
                 return first;
             }()));

    std::vector<Eigen::Index> order(train.size());
    std::iota(order.begin(), order.end(), 0);
    bool done = false;
    for (int epoch = 0; epoch < cfg.max_epochs && !done; ++epoch) {
        std::mt19937_64 rng(cfg.seed + static_cast<std::uint64_t>(epoch));
        std::shuffle(order.begin(), order.end(), rng);
        double last_loss = 0.0;
        bool evaluated_at_end = false;
        for (Eigen::Index start = 0; start + 1 < train.size(); start += cfg.batch_size) {
            const Eigen::Index b = std::min<Eigen::Index>(cfg.batch_size, train.size() - start);
            if (b < 2) break;
            std::vector<Eigen::Index> rows(order.begin() + start, order.begin() + start + b);
            last_loss = trainer.step(train, rows, lr);
            evaluated_at_end = false;
            if (cfg.eval_every > 0 && trainer.steps_taken() % cfg.eval_every == 0) {
                evaluate(epoch, last_loss);
                evaluated_at_end = true;
            } else {
                record({trainer.steps_taken(), epoch, last_loss, lr, std::nullopt});
            }
            if (cfg.max_steps > 0 && trainer.steps_taken() >= cfg.max_steps) {
                done = true;
                break;
            }
        }
        const bool improved = evaluated_at_end ? result.best_step == trainer.steps_taken()
                                               : evaluate(epoch, last_loss);
        if (cfg.decay_trigger == DecayTrigger::Epoch) {
            ++decay_index;
        } else if (!improved && ++stale >= cfg.plateau_patience) {
            ++decay_index;
            stale = 0;
        } else if (improved) {
            stale = 0;
        }
        lr = lr_schedule(cfg.learning_rate, cfg.lr_decay, decay_index);
    }

    result.steps = trainer.steps_taken();
    encoder = best;
    return result;
}

FinetuneResult finetune(LinearDualEncoder& encoder, const CaptionedImageSet& train,
                        const CaptionedImageSet& val, const TrainConfig& cfg, const ImageLoader& loader) {
    cfg.validate();
    if (train.records.empty()) throw Error(ErrorCode::EmptyTrainingSet, "training split is empty");
    if (val.records.empty()) throw Error(ErrorCode::EmptyTrainingSet, "validation split is empty");
    return finetune(encoder, extract_features(encoder, train.records, loader),
                    extract_features(encoder, val.records, loader), cfg);
}

FinetuneResult finetune(DualEncoder& backend, const CaptionedImageSet& train,
                        const CaptionedImageSet& val, const TrainConfig& cfg, const ImageLoader& loader) {
    auto* trainable = dynamic_cast<LinearDualEncoder*>(&backend);
    if (!trainable || !backend.capabilities().gradients_available)
        throw Error(ErrorCode::BackendFrozen,
                    "backend '" + backend.name() + "' does not support gradient updates");
    return finetune(*trainable, train, val, cfg, loader);
}

} // namespace promptseg
