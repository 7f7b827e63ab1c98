#pragma once

// CART decision trees and random forests with probability outputs, plus the
// stratified-fold grid search used for model selection.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "metastack/metrics.hpp"

namespace metastack {

/// Borrowed row-major matrix.
struct FeatureMatrix {
  std::span<const double> values;
  std::size_t rows = 0;
  std::size_t cols = 0;

  FeatureMatrix() = default;
  FeatureMatrix(std::span<const double> v, std::size_t r, std::size_t c) : values(v), rows(r), cols(c) {}
  std::span<const double> row(std::size_t i) const { return values.subspan(i * cols, cols); }
  double at(std::size_t i, std::size_t j) const { return values[i * cols + j]; }
};

struct ForestParams {
  int n_estimators = 100;
  int max_depth = 25;
  /// 0: floor(sqrt(width)); negative: every feature; positive: that many.
  int features_per_split = 0;
  int min_samples_leaf = 1;
  /// Empty means unweighted.
  std::vector<double> class_weights;
  bool bootstrap = true;
  std::uint64_t seed = 0;

  int resolved_features_per_split(std::size_t width) const;
  void validate() const;  // throws DataError
};

/// One tree stored as a flat node arena; node 0 is the root.
class DecisionTree {
 public:
  struct Node {
    int feature = -1;  // -1 marks a leaf
    double threshold = 0.0;  // x[feature] <= threshold goes left
    int left = -1;
    int right = -1;
    std::uint32_t counts_offset = 0;  // leaves: index into leaf counts
  };

  DecisionTree() = default;
  DecisionTree(std::size_t n_classes, std::vector<Node> nodes, std::vector<std::uint32_t> leaf_counts)
      : n_classes_(n_classes), nodes_(std::move(nodes)), leaf_counts_(std::move(leaf_counts)) {}

  std::size_t class_count() const { return n_classes_; }
  const std::vector<Node>& nodes() const { return nodes_; }
  const std::vector<std::uint32_t>& leaf_count_storage() const { return leaf_counts_; }
  std::span<const std::uint32_t> class_counts(const Node& leaf) const {
    return {leaf_counts_.data() + leaf.counts_offset, n_classes_};
  }
  /// Index of the leaf reached by x.
  std::size_t leaf_index(std::span<const double> x) const;
  std::size_t depth() const;
  std::size_t leaf_count() const;

  friend bool operator==(const DecisionTree&, const DecisionTree&) = default;

 private:
  std::size_t n_classes_ = 0;
  std::vector<Node> nodes_;
  std::vector<std::uint32_t> leaf_counts_;
};

inline bool operator==(const DecisionTree::Node& a, const DecisionTree::Node& b) {
  return a.feature == b.feature && a.threshold == b.threshold && a.left == b.left && a.right == b.right &&
         a.counts_offset == b.counts_offset;
}

/// Anything that maps a feature row to a class distribution.
class ProbabilisticClassifier {
 public:
  virtual ~ProbabilisticClassifier() = default;
  virtual std::size_t class_count() const = 0;
  virtual std::size_t feature_width() const = 0;
  virtual std::vector<double> predict_proba(std::span<const double> x) const = 0;
};

class ForestModel : public ProbabilisticClassifier {
 public:
  ForestModel() = default;
  ForestModel(std::vector<DecisionTree> trees, ForestParams params, std::vector<std::string> classes,
              std::size_t feature_width);

  const std::vector<DecisionTree>& trees() const { return trees_; }
  const ForestParams& params() const { return params_; }
  const std::vector<std::string>& classes() const { return classes_; }
  std::size_t class_count() const override { return classes_.size(); }
  std::size_t feature_width() const override { return feature_width_; }

  /// Mean of the per-tree leaf class frequencies. Throws DataError on a
  /// width mismatch.
  std::vector<double> predict_proba(std::span<const double> x) const override;
  /// rows x classes, row-major.
  std::vector<double> predict_proba(const FeatureMatrix& X) const;
  std::vector<int> predict(const FeatureMatrix& X) const;

  std::string to_json() const;
  static ForestModel from_json(const std::string& text);
  void save(const std::filesystem::path& path) const;
  static ForestModel load(const std::filesystem::path& path);
  /// FNV-1a over the serialized form.
  std::uint64_t hash() const;

  friend bool operator==(const ForestModel& a, const ForestModel& b) {
    return a.trees_ == b.trees_ && a.classes_ == b.classes_ && a.feature_width_ == b.feature_width_;
  }

 private:
  std::vector<DecisionTree> trees_;
  ForestParams params_;
  std::vector<std::string> classes_;
  std::size_t feature_width_ = 0;
};

/// Index of the largest probability; ties go to the lowest class index.
int argmax(std::span<const double> proba);

/// Single CART tree on every row (no bootstrap). Throws DataError on empty
/// or mismatched input.
DecisionTree train_tree(const FeatureMatrix& X, std::span<const int> y, std::size_t n_classes,
                        const ForestParams& params, std::uint64_t seed);

/// Tree t is grown from seed params.seed + t, so serial and parallel
/// training agree.
ForestModel train_forest(const FeatureMatrix& X, std::span<const int> y, const std::vector<std::string>& classes,
                         const ForestParams& params);

/// Stratified fold assignment: every class is spread round-robin over the
/// folds after a seeded shuffle.
std::vector<int> stratified_folds(std::span<const int> labels, int n_folds, std::uint64_t seed);

struct ParamGrid {
  std::vector<int> n_estimators{25, 50, 100, 200, 300};
  std::vector<int> max_depths{25, 50, 100, 200, 300};

  /// Parses "25,50x10,25" (estimators x depths).
  static ParamGrid parse(const std::string& text);
  std::string str() const;
  std::size_t size() const { return n_estimators.size() * max_depths.size(); }
};

struct GridScore {
  int n_estimators = 0;
  int max_depth = 0;
  double mean_score = 0.0;
  std::vector<double> fold_scores;
};

struct GridSearchResult {
  ForestParams best;
  double best_score = 0.0;
  std::vector<GridScore> table;  // estimators-major, in grid order
  std::vector<std::string> warnings;

  const GridScore& cell(int n_estimators, int max_depth) const;
};

using MetricFn = std::function<double(const ConfusionMatrix&)>;

/// Salt mixed into ForestParams::seed to derive the grid-search fold seed.
inline constexpr std::uint64_t kGridFoldSalt = 0x67726964;

/// k-fold stratified search. The best cell has the highest mean metric; ties
/// prefer fewer estimators, then smaller depth. A fold whose training or
/// test side holds a single class scores 0 and records a warning.
GridSearchResult grid_search(const ParamGrid& grid, const FeatureMatrix& X, std::span<const int> y,
                             const std::vector<std::string>& classes, int inner_folds, const ForestParams& base,
                             const MetricFn& metric = mcc);

}  // namespace metastack
