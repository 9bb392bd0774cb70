#ifndef SB_METRICS_HPP
#define SB_METRICS_HPP

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "sb/common.hpp"

namespace sb {

struct ConfusionCounts {
    int64_t tp = 0, fp = 0, fn = 0, tn = 0;
    int64_t total() const { return tp + fp + fn + tn; }
};

struct SampleMetrics {
    double dice = 0, iou = 0, precision = 0, recall = 0;
};

/// p >= threshold -> 1, else 0.
std::vector<uint8_t> binarize(std::span<const double> probs, double threshold = 0.5);
std::vector<uint8_t> binarize(std::span<const float> probs, double threshold = 0.5);

/// Exact counts; throws NumericError on non-binary input.
ConfusionCounts confusion(std::span<const uint8_t> pred, std::span<const uint8_t> truth);

/// dice = 2TP/(2TP+FP+FN), iou = TP/(TP+FP+FN), precision = TP/(TP+FP),
/// recall = TP/(TP+FN). Both masks empty -> all 1; an empty denominator
/// otherwise -> 0.
SampleMetrics metrics_from(const ConfusionCounts& c);
SampleMetrics metrics(std::span<const uint8_t> pred, std::span<const uint8_t> truth);

/// Per-sample metrics with macro (mean over samples) aggregates.
struct MetricsReport {
    struct Row {
        std::string sample_id;
        SampleMetrics m;
    };
    std::vector<Row> rows;

    SampleMetrics mean() const;
    /// CSV: sample_id,dice,iou,precision,recall
    std::string to_csv() const;
    static MetricsReport from_csv(const std::string& csv);
    /// One table row in the benchmark layout: Dice | IoU | Precision | Recall.
    std::string summary_row(const std::string& method) const;
};

/// Table header matching the benchmark report layout.
std::string metrics_table_header(const std::string& title);

}  // namespace sb

#endif  // SB_METRICS_HPP
