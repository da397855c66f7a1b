#pragma once

#include "promptseg/embedding.hpp"

#include <optional>
#include <string_view>

namespace promptseg {

enum class LossKind { InfoNce, Dcl, HnNce, DhnNce };

std::string_view to_string(LossKind kind);
LossKind loss_kind_from_string(std::string_view name);

enum class Reduction { Sum, Mean };

struct LossConfig {
    double temperature = 0.6;
    double beta1 = 0.15; // image -> text hardness
    double beta2 = 0.15; // text -> image hardness
    double alpha = 1.0;  // positive-term weight, HN-NCE only
    Reduction reduction = Reduction::Sum;
    // Treat hardness weights as constants when differentiating.
    bool detach_weights = false;

    void validate() const;
};

struct HardnessWeights {
    Matrix values; // diagonal is unused and left at zero
    Direction direction = Direction::ImageToText;
};

// W(i,j) = (B-1) * softmax_{k != i}(beta * sim(i,k) / tau) evaluated at j.
HardnessWeights hardness_weights(const SimilarityMatrix& sim, double beta, double temperature);
HardnessWeights hardness_weights(const SimilarityMatrix& sim, const LossConfig& cfg);

struct LossOutput {
    double value = 0.0;
    std::optional<Matrix> image_gradient;
    std::optional<Matrix> text_gradient;
};

// Decoupled hard-negative NCE: both retrieval directions, each summing over
// anchors -s_ii/tau + log(sum_{j != i} W_ij exp(s_ij / tau)).
LossOutput dhn_nce_loss(const EmbeddingBatch& batch, const LossConfig& cfg,
                        bool with_gradients = false);

// InfoNCE, DCL or HN-NCE. Passing DhnNce forwards to dhn_nce_loss.
LossOutput baseline_loss(LossKind kind, const EmbeddingBatch& batch, const LossConfig& cfg,
                         bool with_gradients = false);

// Same losses evaluated on arbitrary (not necessarily normalized) matrices.
// Gradients are with respect to these matrices, holding them fixed otherwise.
// Used by training code that backpropagates through its own normalization, and
// by finite-difference checks.
LossOutput contrastive_loss(LossKind kind, const Matrix& image, const Matrix& text,
                            const LossConfig& cfg, bool with_gradients = false);

} // namespace promptseg
