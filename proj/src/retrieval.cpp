#include "promptseg/retrieval.hpp"

#include "promptseg/error.hpp"
#include "promptseg/metrics.hpp"

#include <boost/math/distributions/binomial.hpp>
#include <fmt/format.h>

#include <algorithm>
#include <numeric>
#include <random>

namespace promptseg {

std::vector<bool> topk_correct(const SimilarityMatrix& sim, int k) {
    const auto b = sim.values.rows();
    if (k < 1 || k > b)
        throw Error(ErrorCode::KTooLarge,
                    "k=" + std::to_string(k) + " outside [1, " + std::to_string(b) + "]");
    std::vector<bool> out(b);
    for (Eigen::Index i = 0; i < b; ++i) {
        const double target = sim.values(i, i);
        Eigen::Index ahead = 0;
        for (Eigen::Index j = 0; j < b; ++j) {
            const double s = sim.values(i, j);
            if (s > target || (s == target && j < i)) ++ahead;
        }
        out[i] = ahead < k;
    }
    return out;
}

double topk_retrieval_accuracy(const SimilarityMatrix& sim, int k) {
    const auto correct = topk_correct(sim, k);
    return static_cast<double>(std::count(correct.begin(), correct.end(), true)) /
           static_cast<double>(correct.size());
}

void RetrievalProtocol::validate() const {
    if (batch_size < 2) throw Error(ErrorCode::InvalidConfig, "retrieval batch_size must be >= 2");
    if (runs < 1) throw Error(ErrorCode::InvalidConfig, "retrieval runs must be >= 1");
    if (ks.empty()) throw Error(ErrorCode::InvalidConfig, "no K values requested");
    for (int k : ks)
        if (k < 1 || k > batch_size) throw Error(ErrorCode::KTooLarge, "K outside [1, batch_size]");
}

const RetrievalCell& RetrievalResult::cell(Direction direction, int k) const {
    for (const auto& c : cells)
        if (c.direction == direction && c.k == k) return c;
    throw Error(ErrorCode::InvalidConfig, "no result for K=" + std::to_string(k));
}

RetrievalResult run_protocol(const Matrix& image, const Matrix& text,
                             const RetrievalProtocol& protocol) {
    protocol.validate();
    if (image.rows() != text.rows() || image.cols() != text.cols())
        throw Error(ErrorCode::ShapeMismatch, "image and text embeddings differ in shape");
    const auto n = static_cast<std::size_t>(image.rows());
    const auto batch = static_cast<std::size_t>(protocol.batch_size);
    if (n < batch)
        throw Error(ErrorCode::CorpusTooSmall, "corpus of " + std::to_string(n) +
                                                   " is smaller than one batch of " +
                                                   std::to_string(batch));

    RetrievalResult result;
    for (auto dir : {Direction::ImageToText, Direction::TextToImage})
        for (int k : protocol.ks) result.cells.push_back({dir, k, 0.0, 0.0, {}, {}});

    for (int run = 0; run < protocol.runs; ++run) {
        std::vector<std::size_t> order(n);
        std::iota(order.begin(), order.end(), 0);
        std::mt19937_64 rng(protocol.seed + static_cast<std::uint64_t>(run));
        std::shuffle(order.begin(), order.end(), rng);

        std::vector<std::size_t> hits(result.cells.size(), 0);
        std::size_t evaluated = 0;
        for (std::size_t start = 0; start < n; start += batch) {
            const std::size_t size = std::min(batch, n - start);
            if (size < batch && (protocol.drop_last || size < 2)) break;
            Matrix bi(size, image.cols()), bt(size, text.cols());
            for (std::size_t r = 0; r < size; ++r) {
                bi.row(r) = image.row(order[start + r]);
                bt.row(r) = text.row(order[start + r]);
            }
            const Matrix vt = bi * bt.transpose();
            for (std::size_t c = 0; c < result.cells.size(); ++c) {
                auto& cell = result.cells[c];
                SimilarityMatrix sim{cell.direction == Direction::ImageToText ? vt : Matrix(vt.transpose()),
                                     cell.direction};
                const auto correct =
                    topk_correct(sim, std::min(cell.k, static_cast<int>(size)));
                for (bool ok : correct) {
                    cell.correct.push_back(ok);
                    hits[c] += ok;
                }
            }
            evaluated += size;
        }
        for (std::size_t c = 0; c < result.cells.size(); ++c)
            result.cells[c].per_run.push_back(100.0 * static_cast<double>(hits[c]) /
                                              static_cast<double>(evaluated));
        result.evaluated_examples += 2 * evaluated;
    }
    for (auto& cell : result.cells) {
        const auto ms = mean_std(cell.per_run);
        cell.mean = ms.mean;
        cell.std = ms.std;
    }
    return result;
}

RetrievalResult run_protocol(const DualEncoder& backend,
                             const std::vector<CaptionedRecord>& corpus,
                             const RetrievalProtocol& protocol, const ImageLoader& loader) {
    if (corpus.empty()) throw Error(ErrorCode::CorpusTooSmall, "empty corpus");
    Matrix image(corpus.size(), backend.embed_dim()), text(corpus.size(), backend.embed_dim());
    for (std::size_t i = 0; i < corpus.size(); ++i) {
        const Image img = loader ? loader(corpus[i].image_path, backend.input_size())
                                 : load_image(corpus[i].image_path, backend.input_size());
        image.row(i) = backend.encode_image(img);
        text.row(i) = backend.encode_text(corpus[i].caption).vector;
    }
    return run_protocol(image, text, protocol);
}

double mcnemar_test(const std::vector<bool>& correct_a, const std::vector<bool>& correct_b) {
    if (correct_a.size() != correct_b.size())
        throw Error(ErrorCode::LengthMismatch, "McNemar inputs differ in length");
    std::size_t only_a = 0, only_b = 0;
    for (std::size_t i = 0; i < correct_a.size(); ++i) {
        only_a += correct_a[i] && !correct_b[i];
        only_b += !correct_a[i] && correct_b[i];
    }
    const std::size_t discordant = only_a + only_b;
    if (discordant == 0) return 1.0;
    const boost::math::binomial_distribution<double> dist(static_cast<double>(discordant), 0.5);
    const double tail = boost::math::cdf(dist, static_cast<double>(std::min(only_a, only_b)));
    return std::min(1.0, 2.0 * tail);
}

std::string retrieval_csv(const std::string& model, const RetrievalResult& result, bool header) {
    std::string out = header ? "model,direction,K,mean,std\n" : "";
    for (const auto& c : result.cells)
        out += fmt::format("{},{},{},{:.2f},{:.2f}\n", model,
                           c.direction == Direction::ImageToText ? "image_to_text" : "text_to_image",
                           c.k, c.mean, c.std);
    return out;
}

} // namespace promptseg
