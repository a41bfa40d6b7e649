#include "mhnes/metrics.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

#include "mhnes/rng.hpp"

namespace mhnes {

namespace {

constexpr double kFloor = 1e-12;

void check_labels(const ProbMatrix& probs, std::span<const int> labels) {
    if (labels.size() != probs.rows) {
        throw std::invalid_argument(fmt::format("{} labels for {} rows", labels.size(), probs.rows));
    }
    for (std::size_t i = 0; i < labels.size(); ++i) {
        if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= probs.cols) {
            throw std::out_of_range(fmt::format("label {} out of range for {} classes at row {}", labels[i], probs.cols, i));
        }
    }
}

std::size_t argmax(std::span<const double> row) {
    std::size_t best = 0;
    for (std::size_t c = 1; c < row.size(); ++c)
        if (row[c] > row[best]) best = c;
    return best;
}

}  // namespace

void PredictionMatrix::validate(double tolerance) const {
    if (members.empty()) throw std::invalid_argument("prediction matrix has no members");
    const auto& first = members.front();
    for (std::size_t m = 0; m < members.size(); ++m) {
        const auto& p = members[m];
        if (p.rows != first.rows || p.cols != first.cols || p.values.size() != p.rows * p.cols) {
            throw std::invalid_argument(fmt::format("member {} has shape [{},{}], expected [{},{}]", m, p.rows, p.cols,
                                                    first.rows, first.cols));
        }
        for (std::size_t r = 0; r < p.rows; ++r) {
            double total = 0.0;
            for (double v : p.row(r)) {
                if (!(v >= 0.0)) throw std::invalid_argument(fmt::format("member {} row {} has a negative entry", m, r));
                total += v;
            }
            if (std::abs(total - 1.0) > tolerance) {
                throw std::invalid_argument(fmt::format("member {} row {} sums to {}", m, r, total));
            }
        }
    }
    check_labels(first, labels);
}

ProbMatrix ensemble_average(const PredictionMatrix& preds) {
    if (preds.members.empty()) throw std::invalid_argument("ensemble_average: no members");
    ProbMatrix out{preds.members[0].rows, preds.members[0].cols,
                   std::vector<double>(preds.members[0].values.size(), 0.0)};
    for (const auto& m : preds.members)
        for (std::size_t i = 0; i < out.values.size(); ++i) out.values[i] += m.values[i];
    const double inv = 1.0 / static_cast<double>(preds.members.size());
    for (double& v : out.values) v *= inv;
    return out;
}

double nll(const ProbMatrix& probs, std::span<const int> labels) {
    check_labels(probs, labels);
    double total = 0.0;
    for (std::size_t r = 0; r < probs.rows; ++r) total += -std::log(std::max(probs.row(r)[labels[r]], kFloor));
    return total / static_cast<double>(probs.rows);
}

double error_rate(const ProbMatrix& probs, std::span<const int> labels) {
    check_labels(probs, labels);
    std::size_t wrong = 0;
    for (std::size_t r = 0; r < probs.rows; ++r) wrong += argmax(probs.row(r)) != static_cast<std::size_t>(labels[r]);
    return static_cast<double>(wrong) / static_cast<double>(probs.rows);
}

double ece(const ProbMatrix& probs, std::span<const int> labels, std::size_t num_bins) {
    if (num_bins == 0) throw std::invalid_argument("ece: num_bins must be positive");
    check_labels(probs, labels);
    std::vector<double> conf_sum(num_bins, 0.0), correct(num_bins, 0.0);
    std::vector<std::size_t> count(num_bins, 0);
    for (std::size_t r = 0; r < probs.rows; ++r) {
        auto row = probs.row(r);
        const std::size_t pred = argmax(row);
        const double conf = row[pred];
        std::size_t b = 0;
        while (b + 1 < num_bins && conf > static_cast<double>(b + 1) / static_cast<double>(num_bins)) ++b;
        conf_sum[b] += conf;
        correct[b] += pred == static_cast<std::size_t>(labels[r]) ? 1.0 : 0.0;
        ++count[b];
    }
    double total = 0.0;
    for (std::size_t b = 0; b < num_bins; ++b) {
        if (count[b] == 0) continue;
        const double n = static_cast<double>(count[b]);
        total += n / static_cast<double>(probs.rows) * std::abs(correct[b] / n - conf_sum[b] / n);
    }
    return total;
}

double oracle_ensemble_nll(const PredictionMatrix& preds) {
    if (preds.members.empty()) throw std::invalid_argument("oracle_ensemble_nll: no members");
    const std::size_t rows = preds.members[0].rows;
    check_labels(preds.members[0], preds.labels);
    double total = 0.0;
    for (std::size_t r = 0; r < rows; ++r) {
        double best = std::numeric_limits<double>::infinity();
        for (const auto& m : preds.members) best = std::min(best, -std::log(std::max(m.row(r)[preds.labels[r]], kFloor)));
        total += best;
    }
    return total / static_cast<double>(rows);
}

MetricReport evaluate(const PredictionMatrix& preds) {
    MetricReport report;
    const ProbMatrix mean = ensemble_average(preds);
    report.nll = nll(mean, preds.labels);
    report.error = error_rate(mean, preds.labels);
    report.ece = ece(mean, preds.labels);
    report.oracle_nll = oracle_ensemble_nll(preds);
    for (const auto& m : preds.members) {
        report.member_nll.push_back(nll(m, preds.labels));
        report.member_error.push_back(error_rate(m, preds.labels));
    }
    return report;
}

std::vector<double> apply_shift(std::span<const double> images, std::size_t pixels_per_image, int severity,
                                std::uint64_t seed) {
    if (severity < 0 || severity > 5) throw std::invalid_argument(fmt::format("severity {} outside 0..5", severity));
    std::vector<double> out(images.begin(), images.end());
    if (severity == 0) return out;
    if (pixels_per_image == 0 || images.size() % pixels_per_image != 0) {
        throw std::invalid_argument("apply_shift: image buffer is not a whole number of images");
    }
    Rng rng(seed);
    const double contrast = 1.0 - 0.06 * severity;
    const double noise = 0.05 * severity;
    for (std::size_t base = 0; base < out.size(); base += pixels_per_image) {
        double mean = 0.0;
        for (std::size_t p = 0; p < pixels_per_image; ++p) mean += out[base + p];
        mean /= static_cast<double>(pixels_per_image);
        for (std::size_t p = 0; p < pixels_per_image; ++p) {
            const double v = mean + (out[base + p] - mean) * contrast + noise * standard_normal(rng);
            out[base + p] = std::clamp(v, 0.0, 1.0);
        }
    }
    return out;
}

}  // namespace mhnes
