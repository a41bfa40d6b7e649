#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

namespace mhnes {

/// Row-major [rows, cols] probabilities, detached from any tape.
struct ProbMatrix {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<double> values;

    std::span<const double> row(std::size_t r) const { return std::span<const double>(values).subspan(r * cols, cols); }
};

struct PredictionMatrix {
    std::vector<ProbMatrix> members;
    std::vector<int> labels;

    std::size_t size() const { return members.size(); }
    /// Throws when members disagree in shape, rows are not distributions, or
    /// labels are out of range.
    void validate(double tolerance = 1e-8) const;
};

struct MetricReport {
    double nll = 0.0;
    double error = 0.0;
    double ece = 0.0;
    double oracle_nll = 0.0;
    std::vector<double> member_nll;
    std::vector<double> member_error;
};

ProbMatrix ensemble_average(const PredictionMatrix& preds);

double nll(const ProbMatrix& probs, std::span<const int> labels);
/// Fraction of rows whose argmax (lowest index on ties) differs from the label.
double error_rate(const ProbMatrix& probs, std::span<const int> labels);
/// Expected calibration error over equal-width, right-inclusive bins on (0,1].
double ece(const ProbMatrix& probs, std::span<const int> labels, std::size_t num_bins = 10);
/// Mean over examples of the smallest member loss.
double oracle_ensemble_nll(const PredictionMatrix& preds);

MetricReport evaluate(const PredictionMatrix& preds);

/// Contrast reduction by (1 - 0.06 s) around each image's mean plus Gaussian
/// pixel noise of std 0.05 s, clipped to [0, 1]. Severity 0 is the identity.
std::vector<double> apply_shift(std::span<const double> images, std::size_t pixels_per_image, int severity,
                                std::uint64_t seed);

}  // namespace mhnes
