#include "promptseg/losses.hpp"

#include "promptseg/error.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>
#include <vector>

namespace promptseg {

std::string_view to_string(LossKind kind) {
    switch (kind) {
    case LossKind::InfoNce: return "infonce";
    case LossKind::Dcl: return "dcl";
    case LossKind::HnNce: return "hn_nce";
    case LossKind::DhnNce: return "dhn_nce";
    }
    return "unknown";
}

LossKind loss_kind_from_string(std::string_view name) {
    for (auto kind : {LossKind::InfoNce, LossKind::Dcl, LossKind::HnNce, LossKind::DhnNce})
        if (to_string(kind) == name) return kind;
    throw Error(ErrorCode::InvalidConfig, "unknown loss kind '" + std::string(name) + "'");
}

void LossConfig::validate() const {
    if (!(temperature > 0.0)) throw Error(ErrorCode::InvalidConfig, "temperature must be > 0");
    if (!(beta1 >= 0.0) || !(beta2 >= 0.0))
        throw Error(ErrorCode::InvalidConfig, "hardness parameters must be >= 0");
    if (!(alpha > 0.0)) throw Error(ErrorCode::InvalidConfig, "alpha must be > 0");
}

namespace {

double log_sum_exp(const std::vector<double>& xs) {
    double hi = -std::numeric_limits<double>::infinity();
    for (double x : xs) hi = std::max(hi, x);
    if (!std::isfinite(hi)) return hi;
    double sum = 0.0;
    for (double x : xs) sum += std::exp(x - hi);
    return hi + std::log(sum);
}

struct TermSpec {
    bool positive_in_denominator = false;
    double positive_weight = 1.0;
    bool hardness = false;
};

TermSpec term_spec(LossKind kind, const LossConfig& cfg) {
    switch (kind) {
    case LossKind::InfoNce: return {true, 1.0, false};
    case LossKind::Dcl: return {false, 1.0, false};
    case LossKind::HnNce: return {true, cfg.alpha, true};
    case LossKind::DhnNce: return {false, 1.0, true};
    }
    return {};
}

// One retrieval direction over a similarity matrix whose rows are anchors.
// Returns the summed loss and, when requested, d(loss)/d(sim).
double direction_loss(const Matrix& sim, const TermSpec& spec, double beta, const LossConfig& cfg,
                      Matrix* dsim) {
    const Eigen::Index b = sim.rows();
    const double tau = cfg.temperature;
    const bool hard = spec.hardness && beta != 0.0;
    const bool hard_grad = hard && !cfg.detach_weights;
    const double log_negatives = std::log(static_cast<double>(b - 1));

    if (dsim) dsim->setZero(b, b);

    std::vector<double> terms;
    std::vector<double> hard_logits;
    std::vector<double> share; // softmax of beta * z over negatives
    double total = 0.0;

    for (Eigen::Index i = 0; i < b; ++i) {
        const double z_pos = sim(i, i) / tau;

        double hard_norm = 0.0;
        if (hard) {
            hard_logits.clear();
            for (Eigen::Index j = 0; j < b; ++j)
                if (j != i) hard_logits.push_back(beta * sim(i, j) / tau);
            hard_norm = log_sum_exp(hard_logits);
        }

        terms.clear();
        share.clear();
        for (Eigen::Index j = 0; j < b; ++j) {
            if (j == i) continue;
            const double z = sim(i, j) / tau;
            double log_w = 0.0;
            if (hard) {
                log_w = log_negatives + beta * z - hard_norm;
                share.push_back(std::exp(beta * z - hard_norm));
            }
            terms.push_back(log_w + z);
        }
        if (spec.positive_in_denominator) terms.push_back(std::log(spec.positive_weight) + z_pos);

        const double denom = log_sum_exp(terms);
        total += -z_pos + denom;

        if (!dsim) continue;

        // q: normalized contribution of each denominator term.
        double negative_mass = 0.0;
        for (std::size_t t = 0; t + (spec.positive_in_denominator ? 1 : 0) < terms.size(); ++t)
            negative_mass += std::exp(terms[t] - denom);

        (*dsim)(i, i) = -1.0;
        if (spec.positive_in_denominator) (*dsim)(i, i) += std::exp(terms.back() - denom);

        std::size_t t = 0;
        for (Eigen::Index j = 0; j < b; ++j) {
            if (j == i) continue;
            const double q = std::exp(terms[t] - denom);
            double g = q;
            if (hard_grad) g = q * (1.0 + beta) - beta * share[t] * negative_mass;
            (*dsim)(i, j) = g;
            ++t;
        }
    }

    if (dsim) *dsim /= tau;
    return total;
}

} // namespace

HardnessWeights hardness_weights(const SimilarityMatrix& sim, double beta, double temperature) {
    const Eigen::Index b = sim.values.rows();
    if (b < 2) throw Error(ErrorCode::BatchTooSmall, "hardness weights need B >= 2");
    HardnessWeights w;
    w.direction = sim.direction;
    w.values = Matrix::Zero(b, b);
    std::vector<double> logits;
    for (Eigen::Index i = 0; i < b; ++i) {
        logits.clear();
        for (Eigen::Index k = 0; k < b; ++k)
            if (k != i) logits.push_back(beta * sim.values(i, k) / temperature);
        const double norm = log_sum_exp(logits);
        for (Eigen::Index j = 0; j < b; ++j) {
            if (j == i) continue;
            w.values(i, j) =
                static_cast<double>(b - 1) * std::exp(beta * sim.values(i, j) / temperature - norm);
        }
    }
    return w;
}

HardnessWeights hardness_weights(const SimilarityMatrix& sim, const LossConfig& cfg) {
    const double beta = sim.direction == Direction::ImageToText ? cfg.beta1 : cfg.beta2;
    return hardness_weights(sim, beta, cfg.temperature);
}

LossOutput contrastive_loss(LossKind kind, const Matrix& image, const Matrix& text,
                            const LossConfig& cfg, bool with_gradients) {
    cfg.validate();
    if (image.rows() != text.rows() || image.cols() != text.cols())
        throw Error(ErrorCode::ShapeMismatch, "image and text embeddings differ in shape");
    if (image.rows() < 2)
        throw Error(ErrorCode::BatchTooSmall,
                    "batch size " + std::to_string(image.rows()) + " leaves no negatives");

    const TermSpec spec = term_spec(kind, cfg);
    const Matrix sim_vt = image * text.transpose();
    const Matrix sim_tv = sim_vt.transpose();

    Matrix d_vt, d_tv;
    LossOutput out;
    out.value = direction_loss(sim_vt, spec, cfg.beta1, cfg, with_gradients ? &d_vt : nullptr) +
                direction_loss(sim_tv, spec, cfg.beta2, cfg, with_gradients ? &d_tv : nullptr);

    const double scale = cfg.reduction == Reduction::Mean ? 1.0 / image.rows() : 1.0;
    out.value *= scale;
    if (with_gradients) {
        // sim_vt = I T^T, sim_tv = T I^T
        out.image_gradient = (d_vt * text + d_tv.transpose() * text) * scale;
        out.text_gradient = (d_vt.transpose() * image + d_tv * image) * scale;
    }
    return out;
}

LossOutput dhn_nce_loss(const EmbeddingBatch& batch, const LossConfig& cfg, bool with_gradients) {
    return contrastive_loss(LossKind::DhnNce, batch.image(), batch.text(), cfg, with_gradients);
}

LossOutput baseline_loss(LossKind kind, const EmbeddingBatch& batch, const LossConfig& cfg,
                         bool with_gradients) {
    return contrastive_loss(kind, batch.image(), batch.text(), cfg, with_gradients);
}

} // namespace promptseg
