#include "promptseg/linear_encoder.hpp"

#include "promptseg/data_io.hpp"
#include "promptseg/error.hpp"

#include <json.hpp>

#include <algorithm>
#include <fstream>
#include <random>
#include <sstream>

namespace promptseg {

namespace {

std::uint64_t fnv1a(std::string_view s) {
    std::uint64_t h = 1469598103934665603ull;
    for (unsigned char ch : s) {
        h ^= ch;
        h *= 1099511628211ull;
    }
    return h;
}

nlohmann::json matrix_to_json(const Matrix& m) {
    nlohmann::json rows = nlohmann::json::array();
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
        std::vector<double> row(m.cols());
        for (Eigen::Index j = 0; j < m.cols(); ++j) row[j] = m(i, j);
        rows.push_back(row);
    }
    return rows;
}

Matrix matrix_from_json(const nlohmann::json& rows, Eigen::Index cols) {
    Matrix m(static_cast<Eigen::Index>(rows.size()), cols);
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
        const auto row = rows.at(i).get<std::vector<double>>();
        if (static_cast<Eigen::Index>(row.size()) != cols)
            throw Error(ErrorCode::CheckpointCorrupt, "projection row has the wrong width");
        for (Eigen::Index j = 0; j < cols; ++j) m(i, j) = row[j];
    }
    return m;
}

} // namespace

LinearDualEncoder::LinearDualEncoder(int embed_dim, ImageSize input_size, std::uint64_t seed,
                                     double init_scale)
    : input_size_(input_size), image_projection_(embed_dim, kImageFeatures),
      text_projection_(embed_dim, kTextFeatures) {
    if (embed_dim < 1) throw Error(ErrorCode::InvalidConfig, "embed_dim must be positive");
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> n(0.0, init_scale);
    for (Matrix* m : {&image_projection_, &text_projection_})
        for (Eigen::Index i = 0; i < m->rows(); ++i)
            for (Eigen::Index j = 0; j < m->cols(); ++j) (*m)(i, j) = n(rng);
}

Vector LinearDualEncoder::image_features(const Image& standardized) const {
    check_input(standardized);
    const Image raw = unstandardize(standardized);
    Vector f = Vector::Zero(kImageFeatures);
    auto bin = [](double v) { return std::clamp(static_cast<int>(v * 4.0), 0, 3); };
    for (int y = 0; y < raw.height(); ++y)
        for (int x = 0; x < raw.width(); ++x)
            f(bin(raw.at(y, x, 0)) * 16 + bin(raw.at(y, x, 1)) * 4 + bin(raw.at(y, x, 2))) += 1.0;
    f.head(64) /= static_cast<double>(raw.height()) * raw.width();
    f(64) = 1.0;
    return f;
}

Vector LinearDualEncoder::text_features(std::string_view prompt) const {
    Vector f = Vector::Zero(kTextFeatures);
    for (const auto& t : tokenize(prompt)) f(static_cast<Eigen::Index>(fnv1a(t) % kTextBuckets)) += 1.0;
    f(kTextBuckets) = 1.0;
    return f;
}

Vector LinearDualEncoder::encode_standardized(const Image& standardized) const {
    const Vector u = image_projection_ * image_features(standardized);
    const double n = u.norm();
    if (!(n >= 1e-12)) throw Error(ErrorCode::ZeroVectorRow, "image projection collapsed to zero");
    return u / n;
}

TextEmbedding LinearDualEncoder::encode_text_trimmed(std::string_view prompt) const {
    const Vector u = text_projection_ * text_features(prompt);
    const double n = u.norm();
    if (!(n >= 1e-12)) throw Error(ErrorCode::ZeroVectorRow, "text projection collapsed to zero");
    return {u / n, {}};
}

void LinearDualEncoder::save(const std::filesystem::path& path) const {
    nlohmann::json j;
    j["kind"] = "linear";
    j["embed_dim"] = embed_dim();
    j["input_size"] = {input_size_.height, input_size_.width};
    j["image_projection"] = matrix_to_json(image_projection_);
    j["text_projection"] = matrix_to_json(text_projection_);
    write_text(path, j.dump());
}

LinearDualEncoder LinearDualEncoder::load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw Error(ErrorCode::BackendUnavailable, "cannot open " + path.string());
    try {
        const auto j = nlohmann::json::parse(in);
        if (j.at("kind") != "linear")
            throw Error(ErrorCode::CheckpointCorrupt, path.string() + " is not a linear encoder");
        LinearDualEncoder enc;
        enc.input_size_ = {j.at("input_size").at(0).get<int>(), j.at("input_size").at(1).get<int>()};
        enc.image_projection_ = matrix_from_json(j.at("image_projection"), kImageFeatures);
        enc.text_projection_ = matrix_from_json(j.at("text_projection"), kTextFeatures);
        if (enc.image_projection_.rows() != j.at("embed_dim").get<int>() ||
            enc.text_projection_.rows() != enc.image_projection_.rows())
            throw Error(ErrorCode::CheckpointCorrupt, "projection heights disagree");
        return enc;
    } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorCode::CheckpointCorrupt, path.string() + ": " + e.what());
    }
}

} // namespace promptseg
