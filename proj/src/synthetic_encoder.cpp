#include "promptseg/synthetic_encoder.hpp"

#include "promptseg/error.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace promptseg {

std::vector<SyntheticConcept> default_concepts() {
    return {
        {"tumor", {1.0, 0.35, 0.35}},  {"lung", {0.35, 1.0, 0.35}},
        {"disk", {0.45, 0.45, 1.0}},   {"lesion", {1.0, 1.0, 0.3}},
        {"kidney", {1.0, 0.35, 1.0}},  {"liver", {0.3, 1.0, 1.0}},
        {"heart", {1.0, 1.0, 1.0}},    {"vessel", {1.0, 0.65, 0.2}},
    };
}

std::vector<SyntheticConcept> hue_concepts(int count) {
    std::vector<SyntheticConcept> out;
    for (int i = 0; i < count; ++i) {
        const double h = 6.0 * i / count;
        const double s = 0.7, v = 1.0;
        const double c = v * s;
        const double x = c * (1.0 - std::abs(std::fmod(h, 2.0) - 1.0));
        std::array<double, 3> rgb{};
        switch (static_cast<int>(h)) {
        case 0: rgb = {c, x, 0}; break;
        case 1: rgb = {x, c, 0}; break;
        case 2: rgb = {0, c, x}; break;
        case 3: rgb = {0, x, c}; break;
        case 4: rgb = {x, 0, c}; break;
        default: rgb = {c, 0, x}; break;
        }
        for (double& ch : rgb) ch += v - c;
        out.push_back({"concept" + std::to_string(i), rgb});
    }
    return out;
}

namespace {

std::array<double, 3> standardize_color(const std::array<double, 3>& rgb) {
    return {(rgb[0] - kClipMean[0]) / kClipStd[0], (rgb[1] - kClipMean[1]) / kClipStd[1],
            (rgb[2] - kClipMean[2]) / kClipStd[2]};
}

double distance(const std::array<double, 3>& a, const std::array<double, 3>& b) {
    return std::sqrt((a[0] - b[0]) * (a[0] - b[0]) + (a[1] - b[1]) * (a[1] - b[1]) +
                     (a[2] - b[2]) * (a[2] - b[2]));
}

std::size_t edit_distance(const std::string& a, const std::string& b) {
    std::vector<std::size_t> prev(b.size() + 1), cur(b.size() + 1);
    for (std::size_t j = 0; j <= b.size(); ++j) prev[j] = j;
    for (std::size_t i = 1; i <= a.size(); ++i) {
        cur[0] = i;
        for (std::size_t j = 1; j <= b.size(); ++j)
            cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (a[i - 1] != b[j - 1])});
        std::swap(prev, cur);
    }
    return prev[b.size()];
}

// Score head: s(A) = dot(normalize(v), t) with v_c = mean(A_c), v_C = eps.
class SimilarityHead final : public ActivationHead {
  public:
    SimilarityHead(Vector text, double eps) : text_(std::move(text)), eps_(eps) {}

    double score(const FeatureMaps& a) const override {
        const Vector v = pooled(a);
        return v.dot(text_) / v.norm();
    }

    FeatureMaps gradient(const FeatureMaps& a) const override {
        const Vector v = pooled(a);
        const double n = v.norm();
        const Vector e = v / n;
        const Vector dv = (text_ - e.dot(text_) * e) / n;
        FeatureMaps g(a.channels(), a.height(), a.width());
        const double cells = static_cast<double>(a.height()) * a.width();
        for (int c = 0; c < a.channels(); ++c)
            for (int y = 0; y < a.height(); ++y)
                for (int x = 0; x < a.width(); ++x) g.at(c, y, x) = dv(c) / cells;
        return g;
    }

  private:
    Vector pooled(const FeatureMaps& a) const {
        Vector v(a.channels() + 1);
        for (int c = 0; c < a.channels(); ++c) v(c) = a.channel_mean(c);
        v(a.channels()) = eps_;
        return v;
    }

    Vector text_;
    double eps_;
};

} // namespace

SyntheticDualEncoder::SyntheticDualEncoder(SyntheticEncoderConfig cfg) : cfg_(std::move(cfg)) {
    if (cfg_.concepts.empty()) throw Error(ErrorCode::InvalidConfig, "no synthetic concepts");
    if (cfg_.grid_stride < 1 || cfg_.input_size.height % cfg_.grid_stride != 0 ||
        cfg_.input_size.width % cfg_.grid_stride != 0)
        throw Error(ErrorCode::InvalidConfig, "input size must be a multiple of grid_stride");
    if (!(cfg_.margin > 0.0 && cfg_.margin < 1.0) || !(cfg_.min_coverage > 0.0))
        throw Error(ErrorCode::InvalidConfig, "margin must be in (0,1), min_coverage > 0");

    for (const auto& c : cfg_.concepts) standardized_colors_.push_back(standardize_color(c.color));

    // Keep detectors disjoint from each other, from the standardized zero
    // (masked-out pixels) and from dark backgrounds.
    std::vector<std::array<double, 3>> anchors = {
        {0.0, 0.0, 0.0}, standardize_color({0.0, 0.0, 0.0}), standardize_color({0.05, 0.05, 0.05})};
    double closest = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < standardized_colors_.size(); ++i) {
        for (std::size_t j = i + 1; j < standardized_colors_.size(); ++j)
            closest = std::min(closest, distance(standardized_colors_[i], standardized_colors_[j]));
        for (const auto& a : anchors)
            closest = std::min(closest, distance(standardized_colors_[i], a));
    }
    radius_ = 0.45 * closest;
    background_weight_ =
        cfg_.min_coverage * std::sqrt(1.0 - cfg_.margin * cfg_.margin) / cfg_.margin;
}

std::optional<TargetLayer> SyntheticDualEncoder::target_layer() const {
    return TargetLayer{"concept_detectors", static_cast<int>(cfg_.concepts.size()),
                       cfg_.input_size.height / cfg_.grid_stride,
                       cfg_.input_size.width / cfg_.grid_stride};
}

FeatureMaps SyntheticDualEncoder::activations_standardized(const Image& standardized) const {
    check_input(standardized);
    const int s = cfg_.grid_stride;
    const int h = standardized.height() / s, w = standardized.width() / s;
    const int channels = static_cast<int>(cfg_.concepts.size());
    FeatureMaps a(channels, h, w);
    const double block = static_cast<double>(s) * s;
    for (int y = 0; y < standardized.height(); ++y)
        for (int x = 0; x < standardized.width(); ++x) {
            const std::array<double, 3> px = {standardized.at(y, x, 0), standardized.at(y, x, 1),
                                              standardized.at(y, x, 2)};
            for (int c = 0; c < channels; ++c) {
                const double r = 1.0 - distance(px, standardized_colors_[c]) / radius_;
                if (r > 0.0) a.at(c, y / s, x / s) += r / block;
            }
        }
    return a;
}

Vector SyntheticDualEncoder::embed_pooled(const std::vector<double>& channel_means) const {
    Vector v(embed_dim());
    for (std::size_t c = 0; c < channel_means.size(); ++c) v(c) = channel_means[c];
    v(embed_dim() - 1) = background_weight_;
    return v / v.norm();
}

Vector SyntheticDualEncoder::encode_standardized(const Image& standardized) const {
    const FeatureMaps a = activations_standardized(standardized);
    std::vector<double> means(a.channels());
    for (int c = 0; c < a.channels(); ++c) means[c] = a.channel_mean(c);
    return embed_pooled(means);
}

std::shared_ptr<const ActivationHead>
SyntheticDualEncoder::score_head(const Vector& text_embedding) const {
    if (text_embedding.size() != embed_dim())
        throw Error(ErrorCode::ShapeMismatch, "text embedding has the wrong dimension");
    return std::make_shared<SimilarityHead>(text_embedding, background_weight_);
}

int SyntheticDualEncoder::concept_index(std::string_view token) const {
    for (std::size_t c = 0; c < cfg_.concepts.size(); ++c)
        if (cfg_.concepts[c].token == token) return static_cast<int>(c);
    return -1;
}

TextEmbedding SyntheticDualEncoder::encode_text_trimmed(std::string_view prompt) const {
    TextEmbedding out;
    out.vector = Vector::Zero(embed_dim());
    const auto tokens = tokenize(prompt);
    for (const auto& t : tokens)
        if (int c = concept_index(t); c >= 0) out.vector(c) = 1.0;

    if (out.vector.norm() == 0.0) {
        std::size_t best = std::numeric_limits<std::size_t>::max();
        int best_concept = 0;
        for (const auto& t : tokens)
            for (std::size_t c = 0; c < cfg_.concepts.size(); ++c) {
                const auto d = edit_distance(t, cfg_.concepts[c].token);
                if (d < best) {
                    best = d;
                    best_concept = static_cast<int>(c);
                }
            }
        out.vector(best_concept) = 1.0;
        out.warnings.push_back("NearestConceptWarning: no vocabulary token in '" +
                               std::string(prompt) + "'; using '" +
                               cfg_.concepts[best_concept].token + "'");
    }
    out.vector /= out.vector.norm();
    return out;
}

Image SyntheticDualEncoder::render(const std::vector<std::pair<int, Mask>>& placements,
                                   std::array<double, 3> background) const {
    Image img(cfg_.input_size.height, cfg_.input_size.width, 3);
    for (int y = 0; y < img.height(); ++y)
        for (int x = 0; x < img.width(); ++x)
            for (int c = 0; c < 3; ++c) img.at(y, x, c) = background[c];
    for (const auto& [concept_id, region] : placements) {
        if (region.size() != img.size())
            throw Error(ErrorCode::SizeMismatch, "placement mask does not match the input size");
        const auto& color = cfg_.concepts.at(concept_id).color;
        for (int y = 0; y < img.height(); ++y)
            for (int x = 0; x < img.width(); ++x)
                if (region(y, x))
                    for (int c = 0; c < 3; ++c) img.at(y, x, c) = color[c];
    }
    return img;
}

} // namespace promptseg
