#include "promptseg/weak_supervision.hpp"

#include "promptseg/error.hpp"
#include "promptseg/metrics.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>

namespace promptseg {

void WeakTrainConfig::validate() const {
    if (dice_weight < 0 || bce_weight < 0 || dice_weight + bce_weight == 0.0)
        throw Error(ErrorCode::InvalidConfig, "loss weights must be >= 0 and not both 0");
    if (!(learning_rate > 0.0)) throw Error(ErrorCode::InvalidConfig, "learning_rate must be > 0");
    if (epochs < 1 || batch_size < 1 || patience < 1)
        throw Error(ErrorCode::InvalidConfig, "epochs, batch_size and patience must be >= 1");
    if (confidence_band < 0 || time_budget_seconds < 0)
        throw Error(ErrorCode::InvalidConfig, "confidence_band and time budget must be >= 0");
}

WeakTrainConfig weak_config_from_json(const nlohmann::json& j) {
    WeakTrainConfig c;
    try {
        c.dice_weight = j.value("dice_weight", c.dice_weight);
        c.bce_weight = j.value("bce_weight", c.bce_weight);
        c.learning_rate = j.value("learning_rate", c.learning_rate);
        c.epochs = j.value("epochs", c.epochs);
        c.batch_size = j.value("batch_size", c.batch_size);
        c.patience = j.value("patience", c.patience);
        c.seed = j.value("seed", c.seed);
        c.confidence_band = j.value("confidence_band", c.confidence_band);
        c.time_budget_seconds = j.value("time_budget_seconds", c.time_budget_seconds);
        if (j.contains("input_size")) c.input_size = {j["input_size"].at(0), j["input_size"].at(1)};
        c.checkpoint_path = j.value("checkpoint_path", std::string());
        c.log_path = j.value("log_path", std::string());
    } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorCode::InvalidConfig, std::string("bad weak training config: ") + e.what());
    }
    c.validate();
    return c;
}

double dice_bce_loss(const Matrix& logits, const Mask& target, double dice_weight, double bce_weight,
                     Matrix* dlogits, const Mask* include) {
    const auto n = logits.cols();
    if (static_cast<std::size_t>(n) != target.count())
        throw Error(ErrorCode::ShapeMismatch, "logits and target differ in size");
    auto used = [&](Eigen::Index i) { return !include || include->data()[i]; };
    const double smooth = 1.0;
    double inter = 0, psum = 0, gsum = 0, bce = 0, count = 0;
    std::vector<double> p(n);
    for (Eigen::Index i = 0; i < n; ++i) {
        const double z = logits(0, i);
        p[i] = 1.0 / (1.0 + std::exp(-z));
        if (!used(i)) continue;
        const double g = target.data()[i] ? 1.0 : 0.0;
        inter += p[i] * g;
        psum += p[i];
        gsum += g;
        bce += std::max(z, 0.0) - z * g + std::log1p(std::exp(-std::abs(z)));
        count += 1;
    }
    if (count == 0) {
        if (dlogits) *dlogits = Matrix::Zero(1, n);
        return 0.0;
    }
    const double num = 2.0 * inter + smooth, den = psum + gsum + smooth;
    const double loss = dice_weight * (1.0 - num / den) + bce_weight * bce / count;
    if (dlogits) {
        dlogits->setZero(1, n);
        for (Eigen::Index i = 0; i < n; ++i) {
            if (!used(i)) continue;
            const double g = target.data()[i] ? 1.0 : 0.0;
            const double ddice_dp = -(2.0 * g * den - num) / (den * den);
            (*dlogits)(0, i) = dice_weight * ddice_dp * p[i] * (1.0 - p[i]) + bce_weight * (p[i] - g) / count;
        }
    }
    return loss;
}

nlohmann::json to_json(const WeakReport& r) {
    nlohmann::json j = {{"best_val_dsc", r.best_val_dsc},   {"best_epoch", r.best_epoch},
                        {"epochs_run", r.epochs_run},       {"stopped_early", r.stopped_early},
                        {"train_loss", r.train_loss},       {"val_dsc", r.val_dsc},
                        {"checkpoint", r.checkpoint.string()}};
    j["pseudo_val_dsc"] = r.pseudo_val_dsc ? nlohmann::json(*r.pseudo_val_dsc) : nlohmann::json();
    j["refined_val_dsc"] = r.refined_val_dsc ? nlohmann::json(*r.refined_val_dsc) : nlohmann::json();
    return j;
}

Mask binarize(const Map& probabilities, double threshold) {
    Mask out(probabilities.rows(), probabilities.cols());
    for (std::size_t i = 0; i < out.count(); ++i) out.data()[i] = probabilities.data()[i] > threshold;
    return out;
}

Map predict(ResUNet& model, const Image& image) { return model.predict(image); }

Map predict(const std::filesystem::path& checkpoint, const Image& image) {
    ResUNet model = ResUNet::load(checkpoint);
    return model.predict(image);
}

Mask resize_mask_nearest(const Mask& mask, ImageSize size) {
    if (mask.size() == size) return mask;
    Mask out(size.height, size.width);
    for (int y = 0; y < size.height; ++y)
        for (int x = 0; x < size.width; ++x)
            out(y, x) = mask(std::min(mask.rows() - 1, static_cast<int>((y + 0.5) * mask.rows() / size.height)),
                             std::min(mask.cols() - 1, static_cast<int>((x + 0.5) * mask.cols() / size.width)));
    return out;
}

namespace {

// 1 where every pixel within `band` (Chebyshev) carries the same label.
Mask confident_pixels(const Mask& m, int band) {
    Mask out(m.rows(), m.cols(), 1);
    if (band == 0) return out;
    for (int y = 0; y < m.rows(); ++y)
        for (int x = 0; x < m.cols(); ++x)
            for (int dy = -band; dy <= band && out(y, x); ++dy)
                for (int dx = -band; dx <= band; ++dx) {
                    const int yy = std::clamp(y + dy, 0, m.rows() - 1), xx = std::clamp(x + dx, 0, m.cols() - 1);
                    if (m(yy, xx) != m(y, x)) {
                        out(y, x) = 0;
                        break;
                    }
                }
    return out;
}

double mean_dsc(ResUNet& model, const std::vector<SegSample>& set) {
    double total = 0.0;
    for (const auto& s : set) total += iou_dsc(binarize(model.predict(s.image)), s.mask).dsc;
    return total / static_cast<double>(set.size());
}

} // namespace

WeakTrainResult train_weak(const ResUNetSpec& spec, const std::vector<SegSample>& train,
                           const std::vector<SegSample>& val, const WeakTrainConfig& cfg) {
    cfg.validate();
    spec.validate();
    if (train.empty()) throw Error(ErrorCode::EmptyTrainingSet, "no training samples");
    for (const auto& s : train)
        if (s.image.size() != s.mask.size())
            throw Error(ErrorCode::ShapeMismatch, "sample '" + s.id + "' image and mask differ in size");

    using clock = std::chrono::steady_clock;
    const auto started = clock::now();
    ResUNet model(spec, cfg.seed);
    auto params = model.params();
    WeakTrainResult result{ResUNet(spec, cfg.seed), {}};
    std::string best_bytes = model.serialize();

    std::ofstream log;
    if (!cfg.log_path.empty()) {
        log.open(cfg.log_path, std::ios::trunc);
        if (!log) throw Error(ErrorCode::IoError, "cannot write " + cfg.log_path.string());
    }

    // Pad every sample once to the model's size multiple.
    const int m = spec.size_multiple();
    struct Prepared {
        nn::Tensor input;
        Mask target, include;
    };
    std::vector<Prepared> prepared;
    for (const auto& s : train) {
        const int h = (s.image.height() + m - 1) / m * m, w = (s.image.width() + m - 1) / m * m;
        Image img(h, w, s.image.channels());
        Mask target(h, w), include(h, w);
        const Mask confident = confident_pixels(s.mask, cfg.confidence_band);
        for (int y = 0; y < s.image.height(); ++y)
            for (int x = 0; x < s.image.width(); ++x) {
                for (int c = 0; c < img.channels(); ++c) img.at(y, x, c) = s.image.at(y, x, c);
                target(y, x) = s.mask(y, x) != 0;
                include(y, x) = confident(y, x);
            }
        prepared.push_back({to_tensor(img), std::move(target), std::move(include)});
    }

    std::vector<std::size_t> order(prepared.size());
    std::iota(order.begin(), order.end(), 0);
    const double b1 = 0.9, b2 = 0.999, eps = 1e-8;
    long t = 0;
    int stale = 0;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        std::mt19937_64 rng(cfg.seed + 1000003ULL * static_cast<std::uint64_t>(epoch + 1));
        std::shuffle(order.begin(), order.end(), rng);
        double epoch_loss = 0.0;
        for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
            const std::size_t end = std::min(order.size(), start + cfg.batch_size);
            model.zero_grad();
            for (std::size_t k = start; k < end; ++k) {
                const auto& s = prepared[order[k]];
                const nn::Tensor logits = model.forward(s.input);
                Matrix d;
                epoch_loss += dice_bce_loss(logits.values, s.target, cfg.dice_weight, cfg.bce_weight, &d,
                                            cfg.confidence_band ? &s.include : nullptr);
                d /= static_cast<double>(end - start);
                model.backward({logits.height, logits.width, d});
            }
            ++t;
            const double c1 = 1.0 - std::pow(b1, static_cast<double>(t));
            const double c2 = 1.0 - std::pow(b2, static_cast<double>(t));
            for (auto* p : params) {
                p->m = b1 * p->m + (1.0 - b1) * p->grad;
                p->v = b2 * p->v + (1.0 - b2) * p->grad.cwiseAbs2();
                p->value.array() -= cfg.learning_rate * (p->m.array() / c1) / ((p->v.array() / c2).sqrt() + eps);
            }
        }
        epoch_loss /= static_cast<double>(order.size());
        auto& rep = result.report;
        rep.train_loss.push_back(epoch_loss);
        rep.epochs_run = epoch + 1;

        // Without a validation set, the last epoch wins.
        const double dsc = val.empty() ? static_cast<double>(epoch) : mean_dsc(model, val);
        rep.val_dsc.push_back(val.empty() ? 0.0 : dsc);
        if (log)
            log << nlohmann::json{{"epoch", epoch}, {"train_loss", epoch_loss},
                                  {"val_dsc", val.empty() ? nlohmann::json() : nlohmann::json(dsc)}}
                       .dump()
                << '\n'
                << std::flush;
        if (rep.best_epoch < 0 || dsc > rep.best_val_dsc) {
            rep.best_val_dsc = dsc;
            rep.best_epoch = epoch;
            best_bytes = model.serialize();
            stale = 0;
        } else if (++stale >= cfg.patience) {
            rep.stopped_early = true;
            break;
        }
        if (cfg.time_budget_seconds > 0 &&
            std::chrono::duration<double>(clock::now() - started).count() > cfg.time_budget_seconds)
            break;
    }

    result.model = ResUNet::deserialize(best_bytes);
    auto& rep = result.report;
    if (val.empty()) {
        rep.best_val_dsc = 0.0;
    } else {
        rep.refined_val_dsc = rep.best_val_dsc;
        if (std::all_of(val.begin(), val.end(), [](const SegSample& s) { return s.pseudo_mask.has_value(); })) {
            double total = 0.0;
            for (const auto& s : val) total += iou_dsc(*s.pseudo_mask, s.mask).dsc;
            rep.pseudo_val_dsc = total / static_cast<double>(val.size());
        }
    }
    if (!cfg.checkpoint_path.empty()) {
        if (cfg.checkpoint_path.has_parent_path())
            std::filesystem::create_directories(cfg.checkpoint_path.parent_path());
        result.model.save(cfg.checkpoint_path);
        rep.checkpoint = cfg.checkpoint_path;
    }
    return result;
}

std::vector<SegSample> load_samples(const SegmentationSet& set, ImageSize size) {
    std::vector<SegSample> out;
    for (const auto& r : set.records) {
        if (r.mask_path.empty())
            throw Error(ErrorCode::IoError, "record '" + r.id + "' has no mask");
        SegSample s;
        s.id = r.id;
        s.image = load_image(r.image_path, size);
        s.mask = load_mask(r.mask_path);
        s.mask = resize_mask_nearest(s.mask, s.image.size());
        out.push_back(std::move(s));
    }
    return out;
}

WeakTrainResult train_weak(const ResUNetSpec& spec, const SegmentationSet& train,
                           const SegmentationSet& val, const WeakTrainConfig& cfg,
                           const std::filesystem::path& val_pseudo_dir) {
    cfg.validate();
    if (train.records.empty()) throw Error(ErrorCode::EmptyTrainingSet, "training split is empty");
    const auto train_samples = load_samples(train, cfg.input_size);
    auto val_samples = load_samples(val, cfg.input_size);
    if (!val_pseudo_dir.empty()) {
        const auto pseudo = load_samples(with_masks_from(val, val_pseudo_dir), cfg.input_size);
        for (std::size_t i = 0; i < val_samples.size(); ++i) val_samples[i].pseudo_mask = pseudo[i].mask;
    }
    return train_weak(spec, train_samples, val_samples, cfg);
}

} // namespace promptseg
