#pragma once

#include "promptseg/data_io.hpp"
#include "promptseg/embedding.hpp"
#include "promptseg/encoder.hpp"

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

namespace promptseg {

// Row i counts as correct when its diagonal entry is among the k largest
// entries of the row. Ties are broken by candidate index, ascending.
std::vector<bool> topk_correct(const SimilarityMatrix& sim, int k);

// Fraction of correct rows. Throws KTooLarge unless 1 <= k <= B.
double topk_retrieval_accuracy(const SimilarityMatrix& sim, int k);

struct RetrievalProtocol {
    int batch_size = 50;
    int runs = 5;
    std::vector<int> ks = {1, 2};
    std::uint64_t seed = 0; // run r shuffles with seed + r
    bool drop_last = true;  // drop the final partial batch of each run

    void validate() const;
};

struct RetrievalCell {
    Direction direction = Direction::ImageToText;
    int k = 1;
    double mean = 0.0; // percent
    double std = 0.0;  // population std over runs, percent
    std::vector<double> per_run;
    // Per-item correctness, runs concatenated in evaluation order.
    std::vector<bool> correct;
};

struct RetrievalResult {
    std::vector<RetrievalCell> cells;
    std::size_t evaluated_examples = 0; // summed over runs and both directions

    const RetrievalCell& cell(Direction direction, int k) const;
};

// In-batch retrieval over shuffled batches. Row i of `image` pairs with row i
// of `text`. Throws CorpusTooSmall when N < batch_size.
RetrievalResult run_protocol(const Matrix& image, const Matrix& text,
                             const RetrievalProtocol& protocol);

using ImageLoader = std::function<Image(const std::string& path, ImageSize size)>;

// Encodes every record with `backend` and runs the protocol on the embeddings.
RetrievalResult run_protocol(const DualEncoder& backend,
                             const std::vector<CaptionedRecord>& corpus,
                             const RetrievalProtocol& protocol, const ImageLoader& loader = {});

// Exact two-sided McNemar test: binomial(n = discordant pairs, 1/2) tail,
// doubled and clipped to 1.
double mcnemar_test(const std::vector<bool>& correct_a, const std::vector<bool>& correct_b);

// CSV rows: model,direction,K,mean,std
std::string retrieval_csv(const std::string& model, const RetrievalResult& result,
                          bool header = true);

} // namespace promptseg
