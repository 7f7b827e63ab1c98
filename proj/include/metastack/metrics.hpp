#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace metastack {

/// Rows are actual classes, columns predicted classes.
class ConfusionMatrix {
 public:
  ConfusionMatrix() = default;
  explicit ConfusionMatrix(std::size_t n_classes) : n_(n_classes), counts_(n_classes * n_classes, 0) {}
  ConfusionMatrix(std::vector<std::vector<std::uint64_t>> rows);

  std::size_t size() const { return n_; }
  std::uint64_t& operator()(std::size_t actual, std::size_t predicted) { return counts_[actual * n_ + predicted]; }
  std::uint64_t operator()(std::size_t actual, std::size_t predicted) const { return counts_[actual * n_ + predicted]; }
  std::uint64_t total() const;
  std::uint64_t trace() const;
  std::uint64_t row_sum(std::size_t actual) const;
  std::uint64_t col_sum(std::size_t predicted) const;

  ConfusionMatrix& operator+=(const ConfusionMatrix& other);
  friend bool operator==(const ConfusionMatrix&, const ConfusionMatrix&) = default;

 private:
  std::size_t n_ = 0;
  std::vector<std::uint64_t> counts_;
};

struct MetricSuite {
  double mcc = 0.0;
  double accuracy = 0.0;
  double f1_weighted = 0.0;
  double precision_weighted = 0.0;
  double recall_weighted = 0.0;
  double cohens_kappa = 0.0;
};

/// Throws DataError on length mismatch or labels outside [0, n_classes).
ConfusionMatrix confusion(std::span<const int> y_true, std::span<const int> y_pred, std::size_t n_classes);

/// (TP*TN - FP*FN) / sqrt(...) on a 2x2 matrix; class 1 is the positive class.
double binary_mcc(const ConfusionMatrix& cm);

/// Gorodkin's R_k for any number of classes.
double multiclass_mcc(const ConfusionMatrix& cm);

/// Binary formula for 2x2, R_k otherwise. A zero denominator yields 0.
double mcc(const ConfusionMatrix& cm);

double cohens_kappa(const ConfusionMatrix& cm);

/// Throws DataError on an empty matrix.
MetricSuite suite(const ConfusionMatrix& cm);

/// Spearman rank correlation with average ranks for ties. Returns 0 when
/// either side is constant; throws DataError on a length mismatch or fewer
/// than two points.
double spearman(std::span<const double> x, std::span<const double> y);

}  // namespace metastack
