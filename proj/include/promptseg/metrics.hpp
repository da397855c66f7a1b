#pragma once

#include "promptseg/image.hpp"

#include <map>
#include <optional>
#include <string>
#include <vector>

namespace promptseg {

struct Overlap {
    double iou = 0.0;
    double dsc = 0.0;
};

// Both-empty masks score (1, 1).
Overlap iou_dsc(const Mask& pred, const Mask& gt);

// Probability that a random foreground pixel outranks a random background
// pixel, ties counting half. Throws SingleClassGT.
double auc(const Map& scores, const Mask& gt);

struct TTestResult {
    double p_value = 1.0;
    double t_statistic = 0.0;
    int degrees_of_freedom = 0;
    bool degenerate = false; // zero-variance differences; p reported as 1
};

// Two-sided paired-sample t-test.
TTestResult paired_ttest(const std::vector<double>& a, const std::vector<double>& b);

struct MeanStd {
    double mean = 0.0;
    double std = 0.0; // population std
};

MeanStd mean_std(const std::vector<double>& values);

struct ImageMetrics {
    std::string id;
    double iou = 0.0;
    double dsc = 0.0;
    std::optional<double> auc; // absent when the ground truth is single-class
    bool both_empty = false;
    bool auc_from_binary = false; // scores were a binary mask
};

struct SegReport {
    std::vector<ImageMetrics> records;
    MeanStd iou, dsc, auc;
    std::size_t both_empty_count = 0;
    std::size_t binary_auc_count = 0;
    std::size_t auc_skipped = 0;
};

// `scores` may be empty, in which case the prediction mask is used as the
// score map for AUC.
ImageMetrics evaluate_image(const std::string& id, const Mask& pred, const Mask& gt,
                            const Map* scores = nullptr);
SegReport aggregate(std::vector<ImageMetrics> records);

struct MethodComparison {
    std::size_t paired_images = 0;
    TTestResult iou, dsc;
    std::optional<TTestResult> auc; // when both methods have AUC for >= 2 shared images
};

// Paired t-tests between two methods over the image ids they share.
// Throws LengthMismatch when fewer than 2 ids are shared.
MethodComparison compare_methods(const SegReport& a, const SegReport& b);

// method,modality,n,IoU,DSC,AUC with "mean ± std" cells in percent.
std::string seg_report_csv(const std::string& method, const std::string& modality,
                           const SegReport& report, bool header = true);
// id,iou,dsc,auc per image.
std::string seg_records_csv(const SegReport& report);

} // namespace promptseg
