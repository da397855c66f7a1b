#include "promptseg/embedding.hpp"

#include "promptseg/error.hpp"

#include <cmath>
#include <string>

namespace promptseg {

Matrix normalize_rows(const Matrix& m) {
    Matrix out(m.rows(), m.cols());
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
        const double norm = m.row(i).norm();
        if (!(norm >= 1e-12))
            throw Error(ErrorCode::ZeroVectorRow, "row " + std::to_string(i) + " has zero norm");
        out.row(i) = m.row(i) / norm;
    }
    return out;
}

EmbeddingBatch::EmbeddingBatch(Matrix image_embeddings, Matrix text_embeddings)
    : image_(std::move(image_embeddings)), text_(std::move(text_embeddings)) {
    if (image_.rows() != text_.rows() || image_.cols() != text_.cols())
        throw Error(ErrorCode::ShapeMismatch, "image and text embeddings differ in shape");
    if (image_.rows() < 2)
        throw Error(ErrorCode::BatchTooSmall, "contrastive batches need at least two pairs");
    if (image_.cols() < 1) throw Error(ErrorCode::ShapeMismatch, "embedding dimension is zero");
    for (const Matrix* m : {&image_, &text_}) {
        for (Eigen::Index i = 0; i < m->rows(); ++i) {
            if (std::abs(m->row(i).norm() - 1.0) > 1e-6)
                throw Error(ErrorCode::ShapeMismatch,
                            "embedding row " + std::to_string(i) + " is not unit norm");
        }
    }
}

EmbeddingBatch EmbeddingBatch::from_unnormalized(const Matrix& image, const Matrix& text) {
    return EmbeddingBatch(normalize_rows(image), normalize_rows(text));
}

SimilarityMatrix similarity_matrix(const EmbeddingBatch& batch, Direction direction) {
    SimilarityMatrix sim;
    sim.direction = direction;
    if (direction == Direction::ImageToText)
        sim.values = batch.image() * batch.text().transpose();
    else
        sim.values = batch.text() * batch.image().transpose();
    return sim;
}

} // namespace promptseg
