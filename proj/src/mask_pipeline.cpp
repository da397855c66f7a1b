#include "promptseg/mask_pipeline.hpp"

#include <opencv2/imgproc.hpp>

#include <Eigen/Dense>

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>

namespace promptseg {

void CrfParams::validate() const {
    if (iterations < 0) throw Error(ErrorCode::InvalidConfig, "crf iterations must be >= 0");
    if (!(gaussian_std > 0) || !(bilateral_spatial_std > 0) || !(bilateral_color_std > 0))
        throw Error(ErrorCode::InvalidConfig, "crf standard deviations must be positive");
    if (gaussian_weight < 0 || bilateral_weight < 0)
        throw Error(ErrorCode::InvalidConfig, "crf weights must be non-negative");
    if (!(epsilon > 0.0 && epsilon < 0.5))
        throw Error(ErrorCode::InvalidConfig, "crf epsilon must lie in (0, 0.5)");
    if (max_exact_pixels < 1) throw Error(ErrorCode::InvalidConfig, "crf max_exact_pixels must be >= 1");
}

namespace {

// Cells of the message grid: block-averaged position, colour and the number
// of pixels they stand for.
struct Cells {
    int rows = 0, cols = 0, block = 1;
    std::vector<double> y, x, area;
    std::vector<std::array<double, 3>> color;
    std::size_t size() const { return area.size(); }
};

Cells make_cells(const Image& image, int block) {
    Cells g;
    g.block = block;
    g.rows = (image.height() + block - 1) / block;
    g.cols = (image.width() + block - 1) / block;
    for (int by = 0; by < g.rows; ++by)
        for (int bx = 0; bx < g.cols; ++bx) {
            double sy = 0, sx = 0, n = 0;
            std::array<double, 3> c{};
            for (int y = by * block; y < std::min(image.height(), (by + 1) * block); ++y)
                for (int x = bx * block; x < std::min(image.width(), (bx + 1) * block); ++x) {
                    sy += y;
                    sx += x;
                    n += 1;
                    for (int k = 0; k < 3; ++k) c[k] += 255.0 * image.at(y, x, std::min(k, image.channels() - 1));
                }
            g.y.push_back(sy / n);
            g.x.push_back(sx / n);
            g.area.push_back(n);
            for (auto& v : c) v /= n;
            g.color.push_back(c);
        }
    return g;
}

// W_ij = k(i, j) * (area_j - [i == j]); returns D^-1/2 W D^-1/2 scaled by
// `weight`, accumulated into `out`.
void add_kernel(const Cells& g, double weight, double spatial_std, const double* color_std,
                Eigen::MatrixXd& out) {
    if (weight == 0.0) return;
    const auto n = static_cast<Eigen::Index>(g.size());
    Eigen::MatrixXd w(n, n);
    const double sp = 1.0 / (2.0 * spatial_std * spatial_std);
    const double cl = color_std ? 1.0 / (2.0 * *color_std * *color_std) : 0.0;
    for (Eigen::Index i = 0; i < n; ++i)
        for (Eigen::Index j = 0; j < n; ++j) {
            const double dy = g.y[i] - g.y[j], dx = g.x[i] - g.x[j];
            double e = sp * (dy * dy + dx * dx);
            if (color_std)
                for (int k = 0; k < 3; ++k) {
                    const double dc = g.color[i][k] - g.color[j][k];
                    e += cl * dc * dc;
                }
            w(i, j) = std::exp(-e) * (g.area[j] - (i == j ? 1.0 : 0.0));
        }
    Eigen::VectorXd d = w.rowwise().sum();
    for (Eigen::Index i = 0; i < n; ++i) d(i) = d(i) > 0.0 ? 1.0 / std::sqrt(d(i)) : 0.0;
    out += weight * (d.asDiagonal() * w * d.asDiagonal());
}

Map block_mean(const Map& q, const Cells& g) {
    Map out(g.rows, g.cols);
    for (int y = 0; y < q.rows(); ++y)
        for (int x = 0; x < q.cols(); ++x) out(y / g.block, x / g.block) += q(y, x);
    for (std::size_t i = 0; i < out.count(); ++i) out.data()[i] /= g.area[i];
    return out;
}

// Upsamples a block-grid map to full resolution, interpolating between block
// centres.
Map block_upsample(const Map& coarse, const Cells& g, ImageSize size) {
    if (g.block == 1) return coarse;
    Map out(size.height, size.width);
    auto axis = [&](double p, int cells, int& i0, int& i1, double& t) {
        double f = (p + 0.5) / g.block - 0.5;
        f = std::clamp(f, 0.0, static_cast<double>(cells - 1));
        i0 = static_cast<int>(std::floor(f));
        i1 = std::min(i0 + 1, cells - 1);
        t = f - i0;
    };
    for (int y = 0; y < size.height; ++y) {
        int y0, y1;
        double ty;
        axis(y, g.rows, y0, y1, ty);
        for (int x = 0; x < size.width; ++x) {
            int x0, x1;
            double tx;
            axis(x, g.cols, x0, x1, tx);
            out(y, x) = (1 - ty) * ((1 - tx) * coarse(y0, x0) + tx * coarse(y0, x1)) +
                        ty * ((1 - tx) * coarse(y1, x0) + tx * coarse(y1, x1));
        }
    }
    return out;
}

} // namespace

Mask crf_refine(const Image& image, const Map& saliency, const CrfParams& params) {
    params.validate();
    if (image.size() != saliency.size())
        throw Error(ErrorCode::SizeMismatch, "image and saliency differ in size");
    const Map base = params.normalize_saliency ? min_max_normalize(saliency) : saliency;

    const std::size_t n = base.count();
    Map p(base.rows(), base.cols());
    for (std::size_t i = 0; i < n; ++i)
        p.data()[i] = std::clamp(base.data()[i], params.epsilon, 1.0 - params.epsilon);

    const bool no_pairwise = params.gaussian_weight == 0.0 && params.bilateral_weight == 0.0;
    Mask out(base.rows(), base.cols());
    if (params.iterations == 0 || no_pairwise || n == 0) {
        for (std::size_t i = 0; i < n; ++i) out.data()[i] = p.data()[i] > 0.5;
        return out;
    }

    int block = 1;
    while (static_cast<long>((image.height() + block - 1) / block) *
               ((image.width() + block - 1) / block) >
           params.max_exact_pixels)
        ++block;
    const Cells cells = make_cells(image, block);
    Eigen::MatrixXd kernel = Eigen::MatrixXd::Zero(cells.size(), cells.size());
    add_kernel(cells, params.gaussian_weight, params.gaussian_std, nullptr, kernel);
    add_kernel(cells, params.bilateral_weight, params.bilateral_spatial_std,
               &params.bilateral_color_std, kernel);

    std::vector<double> unary_fg(n), unary_bg(n);
    for (std::size_t i = 0; i < n; ++i) {
        unary_fg[i] = -std::log(p.data()[i]);
        unary_bg[i] = -std::log(1.0 - p.data()[i]);
    }

    Map q = p; // Q(foreground)
    for (int it = 0; it < params.iterations; ++it) {
        const Map coarse = block_mean(q, cells);
        const Eigen::Map<const Eigen::VectorXd> qv(coarse.data().data(), coarse.count());
        const Eigen::VectorXd msg_fg = kernel * qv;
        const Eigen::VectorXd msg_bg = kernel * (Eigen::VectorXd::Ones(qv.size()) - qv);
        Map mf(cells.rows, cells.cols), mb(cells.rows, cells.cols);
        std::memcpy(mf.data().data(), msg_fg.data(), sizeof(double) * mf.count());
        std::memcpy(mb.data().data(), msg_bg.data(), sizeof(double) * mb.count());
        const Map full_fg = block_upsample(mf, cells, image.size());
        const Map full_bg = block_upsample(mb, cells, image.size());
        for (std::size_t i = 0; i < n; ++i) {
            // Potts: a label pays for the mass its neighbours put on the other label.
            const double e_fg = unary_fg[i] + full_bg.data()[i];
            const double e_bg = unary_bg[i] + full_fg.data()[i];
            q.data()[i] = 1.0 / (1.0 + std::exp(e_fg - e_bg));
        }
    }
    for (std::size_t i = 0; i < n; ++i) out.data()[i] = q.data()[i] > 0.5;
    return out;
}

std::vector<BoxPrompt> extract_boxes(const Mask& mask, const BoxOptions& options) {
    if (options.min_area_fraction < 0.0 || options.min_area_fraction > 1.0)
        throw Error(ErrorCode::InvalidConfig, "min_area_fraction must lie in [0, 1]");
    if (mask.empty()) throw Error(ErrorCode::NoForeground, "empty mask");
    cv::Mat m(mask.rows(), mask.cols(), CV_8U);
    for (int y = 0; y < mask.rows(); ++y)
        for (int x = 0; x < mask.cols(); ++x) m.at<std::uint8_t>(y, x) = mask(y, x) ? 1 : 0;
    cv::Mat labels, stats, centroids;
    const int count = cv::connectedComponentsWithStats(m, labels, stats, centroids, 8, CV_32S);

    const double min_area = options.min_area_fraction * mask.rows() * mask.cols();
    std::vector<std::pair<int, BoxPrompt>> found;
    for (int l = 1; l < count; ++l) {
        const int area = stats.at<int>(l, cv::CC_STAT_AREA);
        if (area < min_area || area == 0) continue;
        const int x = stats.at<int>(l, cv::CC_STAT_LEFT), y = stats.at<int>(l, cv::CC_STAT_TOP);
        found.push_back({area,
                         {x, y, x + stats.at<int>(l, cv::CC_STAT_WIDTH) - 1,
                          y + stats.at<int>(l, cv::CC_STAT_HEIGHT) - 1}});
    }
    if (found.empty())
        throw Error(ErrorCode::NoForeground, "no foreground component reaches the area threshold");
    std::stable_sort(found.begin(), found.end(),
                     [](const auto& a, const auto& b) { return a.first > b.first; });
    if (!options.multi_box) found.resize(1);
    std::vector<BoxPrompt> boxes;
    for (const auto& f : found) boxes.push_back(f.second);
    return boxes;
}

Mask ThresholdBoxSegmenter::segment(const Image& image, const BoxPrompt& box) const {
    Mask out(image.height(), image.width());
    for (int y = std::max(0, box.ymin); y <= std::min(image.height() - 1, box.ymax); ++y)
        for (int x = std::max(0, box.xmin); x <= std::min(image.width() - 1, box.xmax); ++x)
            out(y, x) = image.intensity(y, x) > threshold_;
    return out;
}

std::unique_ptr<PromptableSegmenter> make_segmenter(const SegmenterConfig& cfg) {
    if (cfg.name == "threshold_box" || cfg.name == "synthetic")
        return std::make_unique<ThresholdBoxSegmenter>(cfg.threshold);
    throw Error(ErrorCode::BackendUnavailable, "segmenter '" + cfg.name + "' is not available");
}

Mask segment_with_boxes(const PromptableSegmenter& segmenter, const Image& image,
                        const std::vector<BoxPrompt>& boxes, std::vector<std::string>* warnings) {
    Mask out(image.height(), image.width());
    for (const auto& b : boxes) {
        if (b.xmin < 0 || b.ymin < 0 || b.xmin > b.xmax || b.ymin > b.ymax ||
            b.xmax >= image.width() || b.ymax >= image.height())
            throw Error(ErrorCode::InvalidConfig, "box outside the image");
        const Mask part = segmenter.segment(image, b);
        if (part.size() != image.size())
            throw Error(ErrorCode::ShapeMismatch, "segmenter returned a mask of the wrong size");
        std::size_t added = 0;
        for (std::size_t i = 0; i < out.count(); ++i) {
            added += part.data()[i] != 0;
            out.data()[i] |= part.data()[i] != 0;
        }
        if (added == 0 && warnings)
            warnings->push_back("box (" + std::to_string(b.xmin) + "," + std::to_string(b.ymin) +
                                "," + std::to_string(b.xmax) + "," + std::to_string(b.ymax) +
                                ") produced an empty mask");
    }
    return out;
}

nlohmann::json to_json(const BoxPrompt& box) {
    return {{"xmin", box.xmin}, {"ymin", box.ymin}, {"xmax", box.xmax}, {"ymax", box.ymax}};
}

nlohmann::json boxes_json(const std::vector<BoxPrompt>& boxes) {
    auto arr = nlohmann::json::array();
    for (const auto& b : boxes) arr.push_back(to_json(b));
    return arr;
}

nlohmann::json to_json(const CrfParams& p) {
    return {{"iterations", p.iterations},
            {"gaussian_weight", p.gaussian_weight},
            {"gaussian_std", p.gaussian_std},
            {"bilateral_weight", p.bilateral_weight},
            {"bilateral_spatial_std", p.bilateral_spatial_std},
            {"bilateral_color_std", p.bilateral_color_std},
            {"epsilon", p.epsilon},
            {"normalize_saliency", p.normalize_saliency},
            {"max_exact_pixels", p.max_exact_pixels}};
}

nlohmann::json to_json(const CamOptions& o) {
    return {{"method", to_string(o.method)},
            {"top_k", o.top_k},
            {"score_scale", o.score_scale},
            {"ranking", o.ranking == ChannelRanking::MeanAbsGradient ? "mean_abs_gradient"
                                                                      : "abs_mean_gradient"},
            {"subtract_baseline", o.subtract_baseline}};
}

std::string image_digest(const Image& image) {
    std::uint64_t h = 1469598103934665603ULL;
    auto mix = [&](const void* p, std::size_t len) {
        const auto* b = static_cast<const unsigned char*>(p);
        for (std::size_t i = 0; i < len; ++i) {
            h ^= b[i];
            h *= 1099511628211ULL;
        }
    };
    const int dims[3] = {image.height(), image.width(), image.channels()};
    mix(dims, sizeof dims);
    mix(image.data().data(), image.data().size() * sizeof(double));
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

PseudoMask zero_shot_segment(const DualEncoder& backend, const PromptableSegmenter& segmenter,
                             const Image& image, std::string_view prompt,
                             const ZeroShotOptions& options) {
    using clock = std::chrono::steady_clock;
    auto ms_since = [](clock::time_point t) {
        return std::chrono::duration<double, std::milli>(clock::now() - t).count();
    };
    options.crf.validate();

    PseudoMask out;
    out.segmenter = segmenter.name();
    auto t = clock::now();
    out.saliency = compute_saliency(backend, image, prompt, options.cam);
    out.timings.saliency_ms = ms_since(t);
    out.warnings = out.saliency.warnings;

    t = clock::now();
    out.crf_mask = crf_refine(image, out.saliency.values, options.crf);
    out.timings.crf_ms = ms_since(t);

    t = clock::now();
    try {
        out.boxes = extract_boxes(out.crf_mask, options.boxes);
    } catch (const Error& e) {
        if (e.code() != ErrorCode::NoForeground) throw;
        throw EmptySegmentationError("no foreground for prompt '" + std::string(prompt) + "': " +
                                         e.what(),
                                     out.saliency);
    }
    out.timings.boxes_ms = ms_since(t);

    t = clock::now();
    out.mask = segment_with_boxes(segmenter, image, out.boxes, &out.warnings);
    out.timings.segment_ms = ms_since(t);

    out.provenance = {
        {"backend", backend.name()},
        {"segmenter", segmenter.name()},
        {"prompt", std::string(prompt)},
        {"image_digest", image_digest(image)},
        {"image_size", {image.height(), image.width()}},
        {"cam", to_json(options.cam)},
        {"cam_method", to_string(out.saliency.method)},
        {"top_k_used", out.saliency.top_k ? nlohmann::json(*out.saliency.top_k) : nlohmann::json()},
        {"crf", to_json(options.crf)},
        {"boxes_options",
         {{"min_area_fraction", options.boxes.min_area_fraction}, {"multi_box", options.boxes.multi_box}}},
        {"boxes", boxes_json(out.boxes)},
        {"foreground_pixels", count_foreground(out.mask)},
    };
    return out;
}

} // namespace promptseg
