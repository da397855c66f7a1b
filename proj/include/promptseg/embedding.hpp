#pragma once

#include <Eigen/Dense>

namespace promptseg {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

enum class Direction { ImageToText, TextToImage };

// Scales every row to unit L2 norm. Throws ZeroVectorRow if any row has norm
// below 1e-12.
Matrix normalize_rows(const Matrix& m);

// Paired, unit-normalized image/text embeddings for one batch. Row i of the
// image matrix is the positive partner of row i of the text matrix.
class EmbeddingBatch {
  public:
    // Validates shapes, B >= 2 and unit row norms (1 +- 1e-6).
    EmbeddingBatch(Matrix image_embeddings, Matrix text_embeddings);

    // Normalizes raw encoder outputs before validating.
    static EmbeddingBatch from_unnormalized(const Matrix& image, const Matrix& text);

    const Matrix& image() const { return image_; }
    const Matrix& text() const { return text_; }
    int batch_size() const { return static_cast<int>(image_.rows()); }
    int dim() const { return static_cast<int>(image_.cols()); }

  private:
    Matrix image_;
    Matrix text_;
};

struct SimilarityMatrix {
    Matrix values; // rows are anchors, columns candidates
    Direction direction = Direction::ImageToText;
};

// Entry (i,j) is dot(anchor_i, candidate_j); anchors are images for
// ImageToText and texts for TextToImage.
SimilarityMatrix similarity_matrix(const EmbeddingBatch& batch, Direction direction);

} // namespace promptseg
