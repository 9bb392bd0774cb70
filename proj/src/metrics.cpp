#include "sb/metrics.hpp"

#include <cmath>
#include <cstdio>
#include <sstream>

namespace sb {

namespace {
template <class F>
std::vector<uint8_t> binarize_impl(std::span<const F> probs, double threshold) {
    std::vector<uint8_t> out(probs.size());
    for (size_t i = 0; i < probs.size(); ++i) out[i] = double(probs[i]) >= threshold ? 1 : 0;
    return out;
}
}  // namespace

std::vector<uint8_t> binarize(std::span<const double> probs, double threshold) {
    return binarize_impl(probs, threshold);
}
std::vector<uint8_t> binarize(std::span<const float> probs, double threshold) {
    return binarize_impl(probs, threshold);
}

ConfusionCounts confusion(std::span<const uint8_t> pred, std::span<const uint8_t> truth) {
    if (pred.size() != truth.size()) throw DimensionError("confusion: size mismatch");
    ConfusionCounts c;
    for (size_t i = 0; i < pred.size(); ++i) {
        const uint8_t p = pred[i], t = truth[i];
        if (p > 1 || t > 1) throw NumericError("confusion: non-binary input");
        if (p && t)
            ++c.tp;
        else if (p && !t)
            ++c.fp;
        else if (!p && t)
            ++c.fn;
        else
            ++c.tn;
    }
    return c;
}

SampleMetrics metrics_from(const ConfusionCounts& c) {
    SampleMetrics m;
    if (c.tp == 0 && c.fp == 0 && c.fn == 0) {  // both masks empty
        m.dice = m.iou = m.precision = m.recall = 1.0;
        return m;
    }
    m.dice = c.tp + c.fp + c.fn ? double(2 * c.tp) / double(2 * c.tp + c.fp + c.fn) : 0.0;
    m.iou = c.tp + c.fp + c.fn ? double(c.tp) / double(c.tp + c.fp + c.fn) : 0.0;
    m.precision = c.tp + c.fp ? double(c.tp) / double(c.tp + c.fp) : 0.0;
    m.recall = c.tp + c.fn ? double(c.tp) / double(c.tp + c.fn) : 0.0;
    return m;
}

SampleMetrics metrics(std::span<const uint8_t> pred, std::span<const uint8_t> truth) {
    return metrics_from(confusion(pred, truth));
}

SampleMetrics MetricsReport::mean() const {
    SampleMetrics m;
    if (rows.empty()) return m;
    for (const auto& r : rows) {
        m.dice += r.m.dice;
        m.iou += r.m.iou;
        m.precision += r.m.precision;
        m.recall += r.m.recall;
    }
    const double n = double(rows.size());
    m.dice /= n;
    m.iou /= n;
    m.precision /= n;
    m.recall /= n;
    return m;
}

std::string MetricsReport::to_csv() const {
    std::ostringstream out;
    out << "sample_id,dice,iou,precision,recall\n";
    char buf[160];
    for (const auto& r : rows) {
        std::snprintf(buf, sizeof buf, "%s,%.9f,%.9f,%.9f,%.9f\n", r.sample_id.c_str(), r.m.dice,
                      r.m.iou, r.m.precision, r.m.recall);
        out << buf;
    }
    return out.str();
}

MetricsReport MetricsReport::from_csv(const std::string& csv) {
    MetricsReport rep;
    std::istringstream in(csv);
    std::string line;
    if (!std::getline(in, line) || line != "sample_id,dice,iou,precision,recall")
        throw IoError(IoError::Kind::generic, "metrics csv: bad header");
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        Row r;
        size_t pos = line.find(',');
        if (pos == std::string::npos) throw IoError(IoError::Kind::generic, "metrics csv: bad row");
        r.sample_id = line.substr(0, pos);
        double* fields[4] = {&r.m.dice, &r.m.iou, &r.m.precision, &r.m.recall};
        size_t start = pos + 1;
        for (int f = 0; f < 4; ++f) {
            size_t comma = line.find(',', start);
            if (comma == std::string::npos) comma = line.size();
            *fields[f] = std::stod(line.substr(start, comma - start));
            start = comma + 1;
        }
        rep.rows.push_back(std::move(r));
    }
    return rep;
}

std::string MetricsReport::summary_row(const std::string& method) const {
    const SampleMetrics m = mean();
    char buf[256];
    std::snprintf(buf, sizeof buf, "%-18s | %10.3f | %9.3f | %9.3f | %6.3f\n", method.c_str(), m.dice,
                  m.iou, m.precision, m.recall);
    return buf;
}

std::string metrics_table_header(const std::string& title) {
    std::string out;
    out += title + " (macro-averaged over samples)\n";
    out += "Method             | Dice Score | IoU Score | Precision | Recall\n";
    out += "-------------------+------------+-----------+-----------+-------\n";
    return out;
}

}  // namespace sb
