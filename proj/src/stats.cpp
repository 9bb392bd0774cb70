#include "sb/stats.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <sstream>

namespace sb {

// ---------------------------------------------------------------------------
// PairedVolumes CSV
// ---------------------------------------------------------------------------

std::string PairedVolumes::to_csv() const {
    std::ostringstream out;
    out << "subject_id,actual_mm3,predicted_mm3\n";
    char buf[160];
    for (const auto& r : rows) {
        std::snprintf(buf, sizeof buf, "%s,%.6f,%.6f\n", r.subject_id.c_str(), r.actual_mm3,
                      r.predicted_mm3);
        out << buf;
    }
    return out.str();
}

PairedVolumes PairedVolumes::from_csv(const std::string& csv) {
    PairedVolumes pv;
    std::istringstream in(csv);
    std::string line;
    if (!std::getline(in, line) || line != "subject_id,actual_mm3,predicted_mm3")
        throw IoError(IoError::Kind::generic, "paired volume csv: bad header");
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        const size_t c1 = line.find(',');
        const size_t c2 = line.find(',', c1 + 1);
        if (c1 == std::string::npos || c2 == std::string::npos)
            throw IoError(IoError::Kind::generic, "paired volume csv: bad row");
        pv.rows.push_back({line.substr(0, c1), std::stod(line.substr(c1 + 1, c2 - c1 - 1)),
                           std::stod(line.substr(c2 + 1))});
    }
    return pv;
}

double lesion_volume(std::span<const uint8_t> mask, const std::array<double, 3>& spacing_mm) {
    int64_t ones = 0;
    for (uint8_t v : mask) {
        if (v > 1) throw NumericError("lesion_volume: non-binary mask");
        ones += v;
    }
    return double(ones) * spacing_mm[0] * spacing_mm[1] * spacing_mm[2];
}

// ---------------------------------------------------------------------------
// Wilcoxon signed-rank
// ---------------------------------------------------------------------------

namespace {

double normal_sf(double z) { return 0.5 * std::erfc(z / std::sqrt(2.0)); }

// Exact distribution of W+ over sign patterns via DP on doubled ranks
// (average ranks are half-integers). counts[s] = #patterns with 2*W+ == s.
std::vector<double> wplus_counts(const std::vector<double>& ranks) {
    int64_t total2 = 0;
    std::vector<int64_t> r2;
    for (double r : ranks) {
        r2.push_back(int64_t(std::llround(2 * r)));
        total2 += r2.back();
    }
    std::vector<double> dp(size_t(total2) + 1, 0.0);
    dp[0] = 1.0;
    for (int64_t r : r2)
        for (int64_t s = total2; s >= r; --s) dp[size_t(s)] += dp[size_t(s - r)];
    return dp;
}

}  // namespace

WilcoxonResult wilcoxon_signed_rank(std::span<const double> diffs, Alternative alt, int exact_limit) {
    WilcoxonResult res;
    std::vector<double> abs_d;
    std::vector<int> sign;
    for (double d : diffs) {
        if (d == 0.0) continue;  // classic convention: drop zero differences
        abs_d.push_back(std::abs(d));
        sign.push_back(d > 0 ? 1 : -1);
    }
    res.n_effective = int(abs_d.size());
    if (res.n_effective == 0) {
        res.method = WilcoxonResult::Method::degenerate;
        res.w_plus = res.w_minus = 0;
        res.p_value = 1.0;
        return res;
    }

    // average ranks of |d|
    const size_t n = abs_d.size();
    std::vector<size_t> order(n);
    std::iota(order.begin(), order.end(), size_t(0));
    std::sort(order.begin(), order.end(), [&](size_t a, size_t b) { return abs_d[a] < abs_d[b]; });
    std::vector<double> rank(n);
    std::vector<int64_t> tie_sizes;
    for (size_t i = 0; i < n;) {
        size_t j = i;
        while (j < n && abs_d[order[j]] == abs_d[order[i]]) ++j;
        const double avg = (double(i + 1) + double(j)) / 2.0;  // ranks are 1-based
        for (size_t k = i; k < j; ++k) rank[order[k]] = avg;
        if (j - i > 1) tie_sizes.push_back(int64_t(j - i));
        i = j;
    }

    double wp = 0, wm = 0;
    std::vector<double> ranks(rank.begin(), rank.end());
    for (size_t i = 0; i < n; ++i) (sign[i] > 0 ? wp : wm) += rank[i];
    res.w_plus = wp;
    res.w_minus = wm;

    const double total = wp + wm;
    if (res.n_effective <= exact_limit) {
        res.method = WilcoxonResult::Method::exact;
        const auto counts = wplus_counts(ranks);
        const double denom = std::pow(2.0, double(res.n_effective));
        const int64_t w2 = int64_t(std::llround(2 * wp));
        const int64_t total2 = int64_t(counts.size()) - 1;
        auto tail_le = [&](int64_t s) {
            double acc = 0;
            for (int64_t v = 0; v <= std::min(s, total2); ++v) acc += counts[size_t(v)];
            return acc / denom;
        };
        auto tail_ge = [&](int64_t s) {
            double acc = 0;
            for (int64_t v = std::max<int64_t>(s, 0); v <= total2; ++v) acc += counts[size_t(v)];
            return acc / denom;
        };
        switch (alt) {
            case Alternative::two_sided: {
                // P(|W - mu| >= |w - mu|) in doubled units (mu2 = total2/2)
                const double mu2 = double(total2) / 2.0;
                const double dev = std::abs(double(w2) - mu2);
                double acc = 0;
                for (int64_t v = 0; v <= total2; ++v)
                    if (std::abs(double(v) - mu2) >= dev - 1e-9) acc += counts[size_t(v)];
                res.p_value = std::min(1.0, acc / denom);
                break;
            }
            case Alternative::greater:
                res.p_value = tail_ge(w2);
                break;
            case Alternative::less:
                res.p_value = tail_le(w2);
                break;
        }
    } else {
        res.method = WilcoxonResult::Method::normal_approx;
        const double nn = double(res.n_effective);
        const double mu = nn * (nn + 1) / 4.0;
        double tie_corr = 0;
        for (int64_t t : tie_sizes) tie_corr += double(t) * double(t) * double(t) - double(t);
        const double sigma2 = nn * (nn + 1) * (2 * nn + 1) / 24.0 - tie_corr / 48.0;
        const double sigma = std::sqrt(sigma2);
        auto z_of = [&](double w, double shift) { return (w - mu + shift) / sigma; };
        switch (alt) {
            case Alternative::two_sided: {
                const double cc = wp > mu ? -0.5 : (wp < mu ? 0.5 : 0.0);  // continuity correction
                const double z = z_of(wp, cc);
                res.p_value = std::min(1.0, 2 * normal_sf(std::abs(z)));
                break;
            }
            case Alternative::greater:
                res.p_value = normal_sf(z_of(wp, -0.5));
                break;
            case Alternative::less:
                res.p_value = 1.0 - normal_sf(z_of(wp, 0.5));
                break;
        }
    }
    (void)total;
    return res;
}

WilcoxonResult wilcoxon_signed_rank(const PairedVolumes& pairs, Alternative alt, int exact_limit) {
    std::vector<double> diffs;
    for (const auto& r : pairs.rows) diffs.push_back(r.predicted_mm3 - r.actual_mm3);
    return wilcoxon_signed_rank(diffs, alt, exact_limit);
}

// ---------------------------------------------------------------------------
// Pearson correlation
// ---------------------------------------------------------------------------

namespace {

// Regularized incomplete beta via Lentz continued fraction.
double betacf(double a, double b, double x) {
    const int max_iter = 300;
    const double eps = 3e-15, fpmin = 1e-300;
    const double qab = a + b, qap = a + 1, qam = a - 1;
    double c = 1, d = 1 - qab * x / qap;
    if (std::abs(d) < fpmin) d = fpmin;
    d = 1 / d;
    double h = d;
    for (int m = 1; m <= max_iter; ++m) {
        const int m2 = 2 * m;
        double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1 + aa * d;
        if (std::abs(d) < fpmin) d = fpmin;
        c = 1 + aa / c;
        if (std::abs(c) < fpmin) c = fpmin;
        d = 1 / d;
        h *= d * c;
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1 + aa * d;
        if (std::abs(d) < fpmin) d = fpmin;
        c = 1 + aa / c;
        if (std::abs(c) < fpmin) c = fpmin;
        d = 1 / d;
        const double del = d * c;
        h *= del;
        if (std::abs(del - 1.0) < eps) break;
    }
    return h;
}

double betai(double a, double b, double x) {
    if (x <= 0) return 0;
    if (x >= 1) return 1;
    const double ln_beta = std::lgamma(a) + std::lgamma(b) - std::lgamma(a + b);
    const double front = std::exp(a * std::log(x) + b * std::log(1 - x) - ln_beta);
    if (x < (a + 1) / (a + b + 2)) return front * betacf(a, b, x) / a;
    return 1 - front * betacf(b, a, 1 - x) / b;
}

}  // namespace

double student_t_sf_two_sided(double t, int dof) {
    if (dof < 1) throw NumericError("student t: dof must be >= 1");
    const double x = double(dof) / (double(dof) + t * t);
    return betai(double(dof) / 2.0, 0.5, x);
}

PearsonResult pearson(std::span<const double> x, std::span<const double> y) {
    if (x.size() != y.size()) throw DimensionError("pearson: size mismatch");
    const int n = int(x.size());
    if (n < 3) throw NumericError("pearson: need at least 3 pairs");
    double mx = 0, my = 0;
    for (int i = 0; i < n; ++i) {
        mx += x[size_t(i)];
        my += y[size_t(i)];
    }
    mx /= n;
    my /= n;
    double sxy = 0, sxx = 0, syy = 0;
    for (int i = 0; i < n; ++i) {
        const double dx = x[size_t(i)] - mx, dy = y[size_t(i)] - my;
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if (sxx == 0 || syy == 0) throw NumericError("pearson: constant series has undefined correlation");
    PearsonResult res;
    res.n = n;
    res.r = sxy / std::sqrt(sxx * syy);
    if (res.r > 1) res.r = 1;
    if (res.r < -1) res.r = -1;
    const double r2 = res.r * res.r;
    if (r2 >= 1.0) {
        res.p_value = 0.0;
    } else {
        const double t = res.r * std::sqrt(double(n - 2) / (1 - r2));
        res.p_value = student_t_sf_two_sided(t, n - 2);
    }
    return res;
}

PearsonResult pearson(const PairedVolumes& pairs) {
    std::vector<double> a, p;
    for (const auto& r : pairs.rows) {
        a.push_back(r.actual_mm3);
        p.push_back(r.predicted_mm3);
    }
    return pearson(a, p);
}

// ---------------------------------------------------------------------------
// Box summaries and the report row
// ---------------------------------------------------------------------------

BoxSummary box_summary(std::span<const double> values) {
    if (values.empty()) throw NumericError("box_summary: empty input");
    std::vector<double> v(values.begin(), values.end());
    std::sort(v.begin(), v.end());
    auto quantile = [&](double p) {
        const double idx = p * double(v.size() - 1);
        const size_t lo = size_t(idx);
        const size_t hi = std::min(lo + 1, v.size() - 1);
        const double frac = idx - double(lo);
        return v[lo] * (1 - frac) + v[hi] * frac;
    };
    return BoxSummary{v.front(), quantile(0.25), quantile(0.5), quantile(0.75), v.back()};
}

VolumeReportRow volume_report(const std::string& model_id, const PairedVolumes& pairs,
                              Alternative alt) {
    VolumeReportRow row;
    row.model_id = model_id;
    row.n = int(pairs.rows.size());
    row.wilcoxon = wilcoxon_signed_rank(pairs, alt);
    if (pairs.rows.size() >= 3) {
        try {
            row.pearson = pearson(pairs);
            row.has_pearson = true;
        } catch (const NumericError&) {
            row.has_pearson = false;
        }
    }
    std::vector<double> a, p;
    for (const auto& r : pairs.rows) {
        a.push_back(r.actual_mm3);
        p.push_back(r.predicted_mm3);
    }
    row.actual_box = box_summary(a);
    row.predicted_box = box_summary(p);
    return row;
}

std::string stats_csv_header() { return "model_id,W,wilcoxon_p,method,pearson_r,pearson_p,n\n"; }

namespace {
const char* method_name(WilcoxonResult::Method m) {
    switch (m) {
        case WilcoxonResult::Method::exact: return "exact";
        case WilcoxonResult::Method::normal_approx: return "normal_approx";
        default: return "degenerate";
    }
}
}  // namespace

std::string stats_csv_row(const VolumeReportRow& row) {
    char buf[256];
    std::snprintf(buf, sizeof buf, "%s,%.1f,%.9f,%s,%.9f,%.9f,%d\n", row.model_id.c_str(),
                  row.wilcoxon.w_plus, row.wilcoxon.p_value, method_name(row.wilcoxon.method),
                  row.has_pearson ? row.pearson.r : std::nan(""),
                  row.has_pearson ? row.pearson.p_value : std::nan(""), row.n);
    return buf;
}

std::string stats_table(const std::vector<VolumeReportRow>& rows) {
    // W+ is the signed-rank statistic; the published table labels its column
    // "U-statistic", so the header mirrors that naming.
    std::string out;
    out += "Volume statistics (signed-rank W+ reported in the U-statistic column)\n";
    out += "Method             | U-statistic | p-value  | statistic | p-value\n";
    out += "-------------------+-------------+----------+-----------+--------\n";
    char buf[256];
    for (const auto& r : rows) {
        if (r.has_pearson)
            std::snprintf(buf, sizeof buf, "%-18s | %11.1f | %8.3g | %9.3f | %7.3g\n",
                          r.model_id.c_str(), r.wilcoxon.w_plus, r.wilcoxon.p_value, r.pearson.r,
                          r.pearson.p_value);
        else
            std::snprintf(buf, sizeof buf, "%-18s | %11.1f | %8.3g | %9s | %7s\n", r.model_id.c_str(),
                          r.wilcoxon.w_plus, r.wilcoxon.p_value, "n/a", "n/a");
        out += buf;
    }
    return out;
}

}  // namespace sb
