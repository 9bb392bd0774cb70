#ifndef SB_STATS_HPP
#define SB_STATS_HPP

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "sb/common.hpp"

namespace sb {

struct PairedVolumes {
    struct Row {
        std::string subject_id;
        double actual_mm3 = 0;
        double predicted_mm3 = 0;
    };
    std::vector<Row> rows;

    std::string to_csv() const;
    static PairedVolumes from_csv(const std::string& csv);
};

/// Count of one-voxels times the voxel volume (product of spacings, mm^3).
double lesion_volume(std::span<const uint8_t> mask, const std::array<double, 3>& spacing_mm);

enum class Alternative { two_sided, greater, less };

struct WilcoxonResult {
    double w_plus = 0;        // sum of ranks of positive differences
    double w_minus = 0;
    double p_value = 1;
    int n_effective = 0;      // pairs left after dropping zero differences
    enum class Method { exact, normal_approx, degenerate } method = Method::degenerate;
};

/// Signed-rank test on differences (zero differences dropped, average ranks
/// for ties). Exact p by enumeration of sign patterns for n_eff <= exact_limit,
/// otherwise a tie-corrected normal approximation with continuity correction.
WilcoxonResult wilcoxon_signed_rank(std::span<const double> diffs,
                                    Alternative alt = Alternative::two_sided, int exact_limit = 25);

/// Differences are taken as predicted - actual.
WilcoxonResult wilcoxon_signed_rank(const PairedVolumes& pairs,
                                    Alternative alt = Alternative::two_sided, int exact_limit = 25);

struct PearsonResult {
    double r = 0;
    double p_value = 1;
    int n = 0;
};

/// Pearson correlation with the Student-t transform for the p-value.
/// Requires n >= 3 and non-constant series (else NumericError).
PearsonResult pearson(std::span<const double> x, std::span<const double> y);
PearsonResult pearson(const PairedVolumes& pairs);

/// min, q1, median, q3, max with linear interpolation between closest ranks.
struct BoxSummary {
    double min = 0, q1 = 0, median = 0, q3 = 0, max = 0;
};
BoxSummary box_summary(std::span<const double> values);

/// One row of the volume-statistics report (per model).
struct VolumeReportRow {
    std::string model_id;
    WilcoxonResult wilcoxon;
    bool has_pearson = false;
    PearsonResult pearson;
    BoxSummary actual_box, predicted_box;
    int n = 0;
};

VolumeReportRow volume_report(const std::string& model_id, const PairedVolumes& pairs,
                              Alternative alt = Alternative::two_sided);

/// CSV: model_id,W,wilcoxon_p,method,pearson_r,pearson_p,n
std::string stats_csv_header();
std::string stats_csv_row(const VolumeReportRow& row);
/// Table mirroring the published layout: W statistic + p, Pearson statistic + p.
std::string stats_table(const std::vector<VolumeReportRow>& rows);

/// Student-t two-sided survival helper (exposed for tests).
double student_t_sf_two_sided(double t, int dof);

}  // namespace sb

#endif  // SB_STATS_HPP
