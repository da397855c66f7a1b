#include "promptseg/metrics.hpp"

#include "promptseg/error.hpp"

#include <boost/math/distributions/students_t.hpp>
#include <fmt/format.h>

#include <algorithm>
#include <cmath>
#include <numeric>

namespace promptseg {

Overlap iou_dsc(const Mask& pred, const Mask& gt) {
    if (pred.size() != gt.size()) throw Error(ErrorCode::ShapeMismatch, "mask shapes differ");
    std::size_t inter = 0, p = 0, g = 0;
    for (std::size_t i = 0; i < pred.count(); ++i) {
        const bool a = pred.data()[i] != 0, b = gt.data()[i] != 0;
        inter += a && b;
        p += a;
        g += b;
    }
    const std::size_t uni = p + g - inter;
    if (uni == 0) return {1.0, 1.0};
    return {static_cast<double>(inter) / static_cast<double>(uni),
            2.0 * static_cast<double>(inter) / static_cast<double>(p + g)};
}

double auc(const Map& scores, const Mask& gt) {
    if (scores.size() != gt.size()) throw Error(ErrorCode::ShapeMismatch, "score/mask shapes differ");
    const std::size_t n = scores.count();
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(),
              [&](std::size_t a, std::size_t b) { return scores.data()[a] < scores.data()[b]; });

    // Sum of mid-ranks of foreground pixels (Mann-Whitney U).
    double positive_rank_sum = 0.0;
    std::size_t positives = 0;
    for (std::size_t start = 0; start < n;) {
        std::size_t end = start;
        while (end < n && scores.data()[order[end]] == scores.data()[order[start]]) ++end;
        const double mid_rank = 0.5 * static_cast<double>(start + 1 + end);
        for (std::size_t i = start; i < end; ++i)
            if (gt.data()[order[i]]) {
                positive_rank_sum += mid_rank;
                ++positives;
            }
        start = end;
    }
    const std::size_t negatives = n - positives;
    if (positives == 0 || negatives == 0)
        throw Error(ErrorCode::SingleClassGT, "ground truth needs both classes for AUC");
    const double np = static_cast<double>(positives), nn = static_cast<double>(negatives);
    return (positive_rank_sum - np * (np + 1.0) / 2.0) / (np * nn);
}

TTestResult paired_ttest(const std::vector<double>& a, const std::vector<double>& b) {
    if (a.size() != b.size()) throw Error(ErrorCode::LengthMismatch, "paired samples differ in length");
    if (a.size() < 2) throw Error(ErrorCode::InvalidConfig, "paired t-test needs n >= 2");
    const double n = static_cast<double>(a.size());
    std::vector<double> d(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) d[i] = a[i] - b[i];
    const double mean = std::accumulate(d.begin(), d.end(), 0.0) / n;
    double ss = 0.0;
    for (double v : d) ss += (v - mean) * (v - mean);
    const double sd = std::sqrt(ss / (n - 1.0));

    TTestResult r;
    r.degrees_of_freedom = static_cast<int>(a.size()) - 1;
    if (!(sd > 1e-12 * std::max(1.0, std::abs(mean)))) {
        r.degenerate = true;
        return r;
    }
    r.t_statistic = mean / (sd / std::sqrt(n));
    const boost::math::students_t dist(n - 1.0);
    r.p_value = std::min(1.0, 2.0 * boost::math::cdf(boost::math::complement(
                                        dist, std::abs(r.t_statistic))));
    return r;
}

MeanStd mean_std(const std::vector<double>& values) {
    if (values.empty()) return {};
    const double n = static_cast<double>(values.size());
    const double mean = std::accumulate(values.begin(), values.end(), 0.0) / n;
    double ss = 0.0;
    for (double v : values) ss += (v - mean) * (v - mean);
    return {mean, std::sqrt(ss / n)};
}

ImageMetrics evaluate_image(const std::string& id, const Mask& pred, const Mask& gt,
                            const Map* scores) {
    ImageMetrics m;
    m.id = id;
    const Overlap o = iou_dsc(pred, gt);
    m.iou = o.iou;
    m.dsc = o.dsc;
    m.both_empty = count_foreground(pred) == 0 && count_foreground(gt) == 0;

    Map binary_scores;
    if (!scores) {
        binary_scores = Map(pred.rows(), pred.cols());
        for (std::size_t i = 0; i < pred.count(); ++i) binary_scores.data()[i] = pred.data()[i] ? 1.0 : 0.0;
        scores = &binary_scores;
        m.auc_from_binary = true;
    }
    const std::size_t fg = count_foreground(gt);
    if (fg > 0 && fg < gt.count()) m.auc = auc(*scores, gt);
    return m;
}

SegReport aggregate(std::vector<ImageMetrics> records) {
    SegReport r;
    std::vector<double> ious, dscs, aucs;
    for (const auto& m : records) {
        ious.push_back(m.iou);
        dscs.push_back(m.dsc);
        if (m.auc) aucs.push_back(*m.auc);
        else ++r.auc_skipped;
        r.both_empty_count += m.both_empty;
        r.binary_auc_count += m.auc_from_binary && m.auc;
    }
    r.iou = mean_std(ious);
    r.dsc = mean_std(dscs);
    r.auc = mean_std(aucs);
    r.records = std::move(records);
    return r;
}

MethodComparison compare_methods(const SegReport& a, const SegReport& b) {
    std::map<std::string, const ImageMetrics*> by_id;
    for (const auto& m : b.records) by_id[m.id] = &m;
    std::vector<double> ia, ib, da, db, aa, ab;
    for (const auto& m : a.records) {
        const auto it = by_id.find(m.id);
        if (it == by_id.end()) continue;
        ia.push_back(m.iou);
        ib.push_back(it->second->iou);
        da.push_back(m.dsc);
        db.push_back(it->second->dsc);
        if (m.auc && it->second->auc) {
            aa.push_back(*m.auc);
            ab.push_back(*it->second->auc);
        }
    }
    if (ia.size() < 2) throw Error(ErrorCode::LengthMismatch, "fewer than 2 shared image ids");
    MethodComparison c;
    c.paired_images = ia.size();
    c.iou = paired_ttest(ia, ib);
    c.dsc = paired_ttest(da, db);
    if (aa.size() >= 2) c.auc = paired_ttest(aa, ab);
    return c;
}

std::string seg_report_csv(const std::string& method, const std::string& modality,
                           const SegReport& report, bool header) {
    auto cell = [](const MeanStd& m) {
        return fmt::format("{:.2f} ± {:.2f}", 100.0 * m.mean, 100.0 * m.std);
    };
    std::string out = header ? "method,modality,n,IoU,DSC,AUC\n" : "";
    out += fmt::format("{},{},{},{},{},{}\n", method, modality, report.records.size(),
                       cell(report.iou), cell(report.dsc), cell(report.auc));
    return out;
}

std::string seg_records_csv(const SegReport& report) {
    std::string out = "id,iou,dsc,auc\n";
    for (const auto& m : report.records)
        out += fmt::format("{},{:.6f},{:.6f},{}\n", m.id, m.iou, m.dsc,
                           m.auc ? fmt::format("{:.6f}", *m.auc) : std::string());
    return out;
}

} // namespace promptseg
