#include "metastack/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "metastack/common.hpp"

namespace metastack {

ConfusionMatrix::ConfusionMatrix(std::vector<std::vector<std::uint64_t>> rows) : ConfusionMatrix(rows.size()) {
  for (std::size_t a = 0; a < n_; ++a) {
    if (rows[a].size() != n_) throw DataError("confusion matrix must be square");
    for (std::size_t p = 0; p < n_; ++p) (*this)(a, p) = rows[a][p];
  }
}

std::uint64_t ConfusionMatrix::total() const {
  return std::accumulate(counts_.begin(), counts_.end(), std::uint64_t{0});
}

std::uint64_t ConfusionMatrix::trace() const {
  std::uint64_t t = 0;
  for (std::size_t k = 0; k < n_; ++k) t += (*this)(k, k);
  return t;
}

std::uint64_t ConfusionMatrix::row_sum(std::size_t actual) const {
  std::uint64_t s = 0;
  for (std::size_t p = 0; p < n_; ++p) s += (*this)(actual, p);
  return s;
}

std::uint64_t ConfusionMatrix::col_sum(std::size_t predicted) const {
  std::uint64_t s = 0;
  for (std::size_t a = 0; a < n_; ++a) s += (*this)(a, predicted);
  return s;
}

ConfusionMatrix& ConfusionMatrix::operator+=(const ConfusionMatrix& other) {
  if (other.n_ != n_) throw DataError("confusion matrices of different size");
  for (std::size_t i = 0; i < counts_.size(); ++i) counts_[i] += other.counts_[i];
  return *this;
}

ConfusionMatrix confusion(std::span<const int> y_true, std::span<const int> y_pred, std::size_t n_classes) {
  if (y_true.size() != y_pred.size()) throw DataError("label vectors differ in length");
  ConfusionMatrix cm(n_classes);
  for (std::size_t i = 0; i < y_true.size(); ++i) {
    int a = y_true[i], p = y_pred[i];
    if (a < 0 || p < 0 || static_cast<std::size_t>(a) >= n_classes || static_cast<std::size_t>(p) >= n_classes)
      throw DataError("unknown label at position " + std::to_string(i));
    ++cm(static_cast<std::size_t>(a), static_cast<std::size_t>(p));
  }
  return cm;
}

double binary_mcc(const ConfusionMatrix& cm) {
  if (cm.size() != 2) throw DataError("binary MCC needs a 2x2 matrix");
  long double tn = cm(0, 0), fp = cm(0, 1), fn = cm(1, 0), tp = cm(1, 1);
  long double denom = (tp + fp) * (tp + fn) * (tn + fp) * (tn + fn);
  if (denom == 0) return 0.0;
  return static_cast<double>((tp * tn - fp * fn) / std::sqrt(denom));
}

double multiclass_mcc(const ConfusionMatrix& cm) {
  const std::size_t n = cm.size();
  long double s = cm.total(), c = cm.trace();
  long double pt = 0, pp = 0, tt = 0;
  for (std::size_t k = 0; k < n; ++k) {
    long double t_k = cm.row_sum(k), p_k = cm.col_sum(k);
    pt += p_k * t_k;
    pp += p_k * p_k;
    tt += t_k * t_k;
  }
  long double denom = (s * s - pp) * (s * s - tt);
  if (denom <= 0) return 0.0;
  return static_cast<double>((c * s - pt) / std::sqrt(denom));
}

double mcc(const ConfusionMatrix& cm) { return cm.size() == 2 ? binary_mcc(cm) : multiclass_mcc(cm); }

double cohens_kappa(const ConfusionMatrix& cm) {
  long double total = cm.total();
  if (total == 0) return 0.0;
  long double po = cm.trace() / total;
  long double pe = 0;
  for (std::size_t k = 0; k < cm.size(); ++k) pe += (cm.row_sum(k) / total) * (cm.col_sum(k) / total);
  if (pe == 1) return 0.0;
  return static_cast<double>((po - pe) / (1 - pe));
}

MetricSuite suite(const ConfusionMatrix& cm) {
  long double total = cm.total();
  if (cm.size() == 0 || total == 0) throw DataError("metric suite needs a non-empty confusion matrix");
  MetricSuite m;
  m.mcc = mcc(cm);
  m.accuracy = static_cast<double>(cm.trace() / total);
  long double prec = 0, rec = 0, f1 = 0;
  for (std::size_t k = 0; k < cm.size(); ++k) {
    long double tp = cm(k, k), support = cm.row_sum(k), predicted = cm.col_sum(k);
    long double p = predicted > 0 ? tp / predicted : 0;
    long double r = support > 0 ? tp / support : 0;
    long double f = p + r > 0 ? 2 * p * r / (p + r) : 0;
    prec += support * p;
    rec += support * r;
    f1 += support * f;
  }
  m.precision_weighted = static_cast<double>(prec / total);
  m.recall_weighted = static_cast<double>(rec / total);
  m.f1_weighted = static_cast<double>(f1 / total);
  m.cohens_kappa = cohens_kappa(cm);
  return m;
}

namespace {

std::vector<double> average_ranks(std::span<const double> v) {
  std::vector<std::size_t> order(v.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return v[a] < v[b]; });
  std::vector<double> rank(v.size());
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j + 1 < order.size() && v[order[j + 1]] == v[order[i]]) ++j;
    double r = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
    for (std::size_t k = i; k <= j; ++k) rank[order[k]] = r;
    i = j + 1;
  }
  return rank;
}

}  // namespace

double spearman(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size()) throw DataError("spearman: length mismatch");
  if (x.size() < 2) throw DataError("spearman: need at least two points");
  auto rx = average_ranks(x), ry = average_ranks(y);
  double n = static_cast<double>(x.size());
  double mean = (n + 1.0) / 2.0;
  double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < rx.size(); ++i) {
    sxy += (rx[i] - mean) * (ry[i] - mean);
    sxx += (rx[i] - mean) * (rx[i] - mean);
    syy += (ry[i] - mean) * (ry[i] - mean);
  }
  if (sxx == 0.0 || syy == 0.0) return 0.0;
  return sxy / std::sqrt(sxx * syy);
}

}  // namespace metastack
