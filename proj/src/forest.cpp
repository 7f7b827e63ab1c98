#include "metastack/forest.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <sstream>

#include "json.hpp"
#include "metastack/common.hpp"

namespace metastack {

namespace {

constexpr int kMaxBins = 256;

/// Counter-based generator; cheap to seed per node.
struct SplitMix {
  std::uint64_t state;
  std::uint64_t next() {
    std::uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }
  std::uint64_t below(std::uint64_t n) {
    return static_cast<std::uint64_t>((static_cast<unsigned __int128>(next()) * n) >> 64);
  }
};

double split_point(double lo, double hi) {
  double mid = lo + (hi - lo) / 2.0;
  return mid < hi ? mid : lo;
}

/// Quantized copy of a training matrix. Codes are column-major so the
/// per-node histogram pass walks one contiguous column.
struct BinnedData {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<std::uint8_t> codes;
  std::vector<std::vector<double>> thresholds;  // per feature, between bin b and b + 1

  std::uint8_t code(std::size_t feature, std::size_t row) const { return codes[feature * rows + row]; }
};

BinnedData bin_features(const FeatureMatrix& X) {
  BinnedData bd;
  bd.rows = X.rows;
  bd.cols = X.cols;
  bd.codes.resize(X.rows * X.cols);
  bd.thresholds.resize(X.cols);
  std::vector<double> col(X.rows);
  for (std::size_t f = 0; f < X.cols; ++f) {
    for (std::size_t i = 0; i < X.rows; ++i) col[i] = X.at(i, f);
    std::vector<double> sorted = col;
    std::sort(sorted.begin(), sorted.end());
    std::vector<double> unique = sorted;
    unique.erase(std::unique(unique.begin(), unique.end()), unique.end());

    // Upper bounds of every bin except the last.
    std::vector<double> upper;
    if (unique.size() <= static_cast<std::size_t>(kMaxBins)) {
      upper.assign(unique.begin(), unique.end() - (unique.empty() ? 0 : 1));
    } else {
      for (int j = 1; j < kMaxBins; ++j) {
        double v = sorted[static_cast<std::size_t>(j) * sorted.size() / kMaxBins];
        if (v < unique.back() && (upper.empty() || v > upper.back())) upper.push_back(v);
      }
    }
    auto& thr = bd.thresholds[f];
    thr.reserve(upper.size());
    for (double ub : upper) {
      double next = *std::upper_bound(unique.begin(), unique.end(), ub);
      thr.push_back(split_point(ub, next));
    }
    for (std::size_t i = 0; i < X.rows; ++i)
      bd.codes[f * X.rows + i] =
          static_cast<std::uint8_t>(std::lower_bound(upper.begin(), upper.end(), col[i]) - upper.begin());
  }
  return bd;
}

/// Grows one tree. Every random decision at a node is drawn from a generator
/// keyed by the node's path, so a tree grown to depth d is exactly the
/// depth-d truncation of the same tree grown deeper.
class Grower {
 public:
  Grower(const BinnedData& data, std::span<const int> y, std::size_t n_classes, const ForestParams& params)
      : data_(data), y_(y), n_classes_(n_classes), params_(params) {
    mtry_ = static_cast<std::size_t>(params.resolved_features_per_split(data.cols));
    class_w_.assign(n_classes, 1.0);
    if (!params.class_weights.empty()) class_w_ = params.class_weights;
    hist_c_.assign(static_cast<std::size_t>(kMaxBins) * n_classes, 0);
    constant_flag_.assign(data.cols, 0);
  }

  DecisionTree grow(const std::vector<std::uint32_t>& multiplicity, std::uint64_t tree_seed) {
    idx_.clear();
    mult_.clear();
    for (std::size_t i = 0; i < multiplicity.size(); ++i)
      if (multiplicity[i] > 0) {
        idx_.push_back(static_cast<std::uint32_t>(i));
        mult_.push_back(multiplicity[i]);
      }
    nodes_.clear();
    counts_.clear();
    // Features found constant in a node stay constant in its subtree; each
    // task names its inherited list as a slice of const_arena_.
    struct Task {
      std::size_t begin, end;
      int depth;
      std::uint64_t key;
      int node;
      std::size_t const_begin, const_count;
    };
    std::vector<Task> stack;
    const_arena_.clear();
    nodes_.emplace_back();
    stack.push_back({0, idx_.size(), 0, mix_seed(tree_seed, 0x7265), 0, 0, 0});
    std::vector<double> w(n_classes_);
    std::vector<std::uint32_t> c(n_classes_);
    while (!stack.empty()) {
      Task t = stack.back();
      stack.pop_back();
      std::fill(w.begin(), w.end(), 0.0);
      std::fill(c.begin(), c.end(), 0);
      std::uint64_t n_node = 0;
      for (std::size_t s = t.begin; s < t.end; ++s) {
        auto cls = static_cast<std::size_t>(y_[idx_[s]]);
        c[cls] += mult_[s];
        n_node += mult_[s];
      }
      for (std::size_t k = 0; k < n_classes_; ++k) w[k] = class_w_[k] * c[k];
      auto& node = nodes_[static_cast<std::size_t>(t.node)];
      node.counts_offset = static_cast<std::uint32_t>(counts_.size());
      counts_.insert(counts_.end(), c.begin(), c.end());

      std::size_t nonzero = static_cast<std::size_t>(std::count_if(c.begin(), c.end(), [](auto v) { return v > 0; }));
      if (t.depth >= params_.max_depth || nonzero <= 1 ||
          n_node < 2 * static_cast<std::uint64_t>(params_.min_samples_leaf))
        continue;

      std::size_t const_begin = const_arena_.size();
      for (std::size_t i = 0; i < t.const_count; ++i) const_arena_.push_back(const_arena_[t.const_begin + i]);
      Split best = find_split(t.begin, t.end, w, SplitMix{t.key}, const_begin);
      if (best.feature < 0) continue;
      std::size_t const_count = const_arena_.size() - const_begin;

      std::size_t mid = partition(t.begin, t.end, static_cast<std::size_t>(best.feature), best.bin);
      int left = static_cast<int>(nodes_.size());
      nodes_.emplace_back();
      nodes_.emplace_back();
      auto& parent = nodes_[static_cast<std::size_t>(t.node)];
      parent.feature = best.feature;
      parent.threshold = data_.thresholds[static_cast<std::size_t>(best.feature)][best.bin];
      parent.left = left;
      parent.right = left + 1;
      stack.push_back({mid, t.end, t.depth + 1, mix_seed(t.key, 2), left + 1, const_begin, const_count});
      stack.push_back({t.begin, mid, t.depth + 1, mix_seed(t.key, 1), left, const_begin, const_count});
    }
    return DecisionTree(n_classes_, std::move(nodes_), std::move(counts_));
  }

 private:
  struct Split {
    int feature = -1;
    std::size_t bin = 0;
    double score = -std::numeric_limits<double>::infinity();
  };

  /// Known constants are the arena entries from const_begin on; newly found
  /// constants are appended there.
  Split find_split(std::size_t begin, std::size_t end, const std::vector<double>& parent_w, SplitMix rng,
                   std::size_t const_begin) {
    double total_w = std::accumulate(parent_w.begin(), parent_w.end(), 0.0);
    double parent_score = 0.0;
    for (double v : parent_w) parent_score += v * v;
    parent_score /= total_w;

    for (std::size_t i = const_begin; i < const_arena_.size(); ++i) constant_flag_[const_arena_[i]] = 1;
    features_.clear();
    for (std::size_t f = 0; f < data_.cols; ++f)
      if (!constant_flag_[f]) features_.push_back(static_cast<std::uint32_t>(f));
    for (std::size_t i = const_begin; i < const_arena_.size(); ++i) constant_flag_[const_arena_[i]] = 0;

    node_y_.resize(end - begin);
    for (std::size_t s = begin; s < end; ++s) node_y_[s - begin] = static_cast<std::uint32_t>(y_[idx_[s]]);

    Split best;
    std::size_t evaluated = 0;
    for (std::size_t drawn = 0; drawn < features_.size() && evaluated < mtry_; ++drawn) {
      std::size_t pick = drawn + static_cast<std::size_t>(rng.below(features_.size() - drawn));
      std::swap(features_[drawn], features_[pick]);
      std::size_t f = features_[drawn];
      bool varies = n_classes_ == 2   ? scan_feature<2>(f, begin, end, parent_w, total_w, parent_score, best)
                    : n_classes_ == 3 ? scan_feature<3>(f, begin, end, parent_w, total_w, parent_score, best)
                                      : scan_feature<0>(f, begin, end, parent_w, total_w, parent_score, best);
      if (varies)
        ++evaluated;
      else
        const_arena_.push_back(static_cast<std::uint32_t>(f));
    }
    return best;
  }

  /// Histograms feature f over the node and offers every boundary between
  /// occupied bins to best. NC fixes the class count at compile time (0:
  /// runtime). Returns false when the node holds a single bin.
  template <std::size_t NC>
  bool scan_feature(std::size_t f, std::size_t begin, std::size_t end, const std::vector<double>& parent_w,
                    double total_w, double parent_score, Split& best) {
    const std::size_t nc = NC ? NC : n_classes_;
    const std::uint8_t* codes = &data_.codes[f * data_.rows];
    std::uint32_t* hist = hist_c_.data();
    const std::uint32_t* ys = node_y_.data() - begin;
    std::uint64_t mask[kMaxBins / 64] = {};
    for (std::size_t s = begin; s < end; ++s) {
      std::size_t b = codes[idx_[s]];
      mask[b >> 6] |= std::uint64_t{1} << (b & 63);
      hist[b * nc + ys[s]] += mult_[s];
    }
    // Set bits in ascending order give the occupied bins already sorted.
    touched_.clear();
    for (std::size_t word = 0; word < kMaxBins / 64; ++word)
      for (std::uint64_t m = mask[word]; m != 0; m &= m - 1)
        touched_.push_back(word * 64 + static_cast<std::size_t>(std::countr_zero(m)));
    const bool varies = touched_.size() > 1;
    if (varies) {
      double left_w[NC ? NC : 1];
      std::vector<double> left_dyn;
      double* lw_k = left_w;
      if constexpr (NC == 0) {
        left_dyn.assign(nc, 0.0);
        lw_k = left_dyn.data();
      } else {
        for (std::size_t k = 0; k < nc; ++k) left_w[k] = 0.0;
      }
      std::uint64_t node_n = 0;
      for (std::size_t b : touched_)
        for (std::size_t k = 0; k < nc; ++k) node_n += hist[b * nc + k];
      const auto min_leaf = static_cast<std::uint64_t>(params_.min_samples_leaf);
      std::uint64_t left_n = 0;
      for (std::size_t i = 0; i + 1 < touched_.size(); ++i) {
        std::size_t b = touched_[i];
        for (std::size_t k = 0; k < nc; ++k) {
          lw_k[k] += class_w_[k] * hist[b * nc + k];
          left_n += hist[b * nc + k];
        }
        if (left_n < min_leaf || node_n - left_n < min_leaf) continue;
        double lw = 0.0, ls = 0.0, rs = 0.0;
        for (std::size_t k = 0; k < nc; ++k) {
          lw += lw_k[k];
          ls += lw_k[k] * lw_k[k];
          double r = parent_w[k] - lw_k[k];
          rs += r * r;
        }
        double rw = total_w - lw;
        if (lw <= 0.0 || rw <= 0.0) continue;
        double score = ls / lw + rs / rw;
        // Children can never be less pure than the parent.
        if (score < parent_score) score = parent_score;
        if (score > best.score) {
          best.score = score;
          best.feature = static_cast<int>(f);
          best.bin = b;
        }
      }
    }
    for (std::size_t b : touched_)
      for (std::size_t k = 0; k < nc; ++k) hist[b * nc + k] = 0;
    return varies;
  }

  std::size_t partition(std::size_t begin, std::size_t end, std::size_t feature, std::size_t bin) {
    const std::uint8_t* codes = &data_.codes[feature * data_.rows];
    std::size_t i = begin, j = end;
    while (i < j) {
      if (codes[idx_[i]] <= bin) {
        ++i;
      } else {
        --j;
        std::swap(idx_[i], idx_[j]);
        std::swap(mult_[i], mult_[j]);
      }
    }
    return i;
  }

  const BinnedData& data_;
  std::span<const int> y_;
  std::size_t n_classes_;
  const ForestParams& params_;
  std::size_t mtry_ = 1;
  std::vector<double> class_w_;
  std::vector<std::uint32_t> hist_c_;
  std::vector<std::uint32_t> node_y_;
  std::vector<std::size_t> touched_;
  std::vector<std::uint32_t> features_;
  std::vector<std::uint8_t> constant_flag_;
  std::vector<std::uint32_t> const_arena_;
  std::vector<std::uint32_t> idx_;
  std::vector<std::uint32_t> mult_;
  std::vector<DecisionTree::Node> nodes_;
  std::vector<std::uint32_t> counts_;
};

void check_training_input(const FeatureMatrix& X, std::span<const int> y, std::size_t n_classes) {
  if (X.rows == 0 || X.cols == 0) throw DataError("training needs a non-empty matrix");
  if (X.values.size() != X.rows * X.cols) throw DataError("matrix storage does not match its shape");
  if (y.size() != X.rows) throw DataError("label count does not match row count");
  if (X.rows > std::numeric_limits<std::uint32_t>::max()) throw DataError("too many training rows");
  for (int label : y)
    if (label < 0 || static_cast<std::size_t>(label) >= n_classes) throw DataError("label outside class range");
}

std::vector<std::uint32_t> bootstrap_counts(std::size_t n, std::uint64_t seed) {
  std::vector<std::uint32_t> counts(n, 0);
  SplitMix rng{mix_seed(seed, 0)};
  for (std::size_t i = 0; i < n; ++i) ++counts[rng.below(n)];
  return counts;
}

/// Adds the normalized (weighted) class counts stored at node to sum.
void add_distribution(const DecisionTree& tree, const DecisionTree::Node& node, std::span<const double> class_w,
                      std::span<double> sum) {
  auto counts = tree.class_counts(node);
  double total = 0.0;
  for (std::size_t k = 0; k < counts.size(); ++k) total += class_w.empty() ? counts[k] : class_w[k] * counts[k];
  for (std::size_t k = 0; k < counts.size(); ++k)
    sum[k] += (class_w.empty() ? counts[k] : class_w[k] * counts[k]) / total;
}

/// Adds the leaf distribution reached by x to sum.
void accumulate_tree(const DecisionTree& tree, std::span<const double> x, std::span<const double> class_w,
                     std::span<double> sum) {
  add_distribution(tree, tree.nodes()[tree.leaf_index(x)], class_w, sum);
}

/// One walk serving several depth limits (ascending): the node where the
/// walk stands after depths[j] steps, or the leaf reached earlier, feeds
/// sums[j].
void accumulate_tree_depths(const DecisionTree& tree, std::span<const double> x, std::span<const int> depths,
                            std::span<const double> class_w, std::span<double> sums, std::size_t stride) {
  const auto& nodes = tree.nodes();
  std::size_t i = 0, j = 0;
  int depth = 0;
  while (j < depths.size()) {
    if (nodes[i].feature < 0) {
      for (; j < depths.size(); ++j) add_distribution(tree, nodes[i], class_w, sums.subspan(j * stride));
      break;
    }
    while (j < depths.size() && depths[j] == depth) add_distribution(tree, nodes[i], class_w, sums.subspan(j++ * stride));
    i = static_cast<std::size_t>(x[static_cast<std::size_t>(nodes[i].feature)] <= nodes[i].threshold ? nodes[i].left
                                                                                                     : nodes[i].right);
    ++depth;
  }
}

}  // namespace

// ---------------------------------------------------------------------------

int ForestParams::resolved_features_per_split(std::size_t width) const {
  auto w = static_cast<int>(width);
  if (features_per_split < 0) return w;
  if (features_per_split == 0) return std::max(1, static_cast<int>(std::floor(std::sqrt(static_cast<double>(width)))));
  return std::min(features_per_split, w);
}

void ForestParams::validate() const {
  if (n_estimators < 1) throw DataError("n_estimators must be positive");
  if (max_depth < 1) throw DataError("max_depth must be positive");
  if (min_samples_leaf < 1) throw DataError("min_samples_leaf must be positive");
  for (double w : class_weights)
    if (!(w > 0.0) || !std::isfinite(w)) throw DataError("class weights must be positive");
}

std::size_t DecisionTree::leaf_index(std::span<const double> x) const {
  std::size_t i = 0;
  while (nodes_[i].feature >= 0)
    i = static_cast<std::size_t>(x[static_cast<std::size_t>(nodes_[i].feature)] <= nodes_[i].threshold
                                     ? nodes_[i].left
                                     : nodes_[i].right);
  return i;
}

std::size_t DecisionTree::depth() const {
  if (nodes_.empty()) return 0;
  std::vector<std::pair<std::size_t, std::size_t>> stack{{0, 0}};
  std::size_t deepest = 0;
  while (!stack.empty()) {
    auto [i, d] = stack.back();
    stack.pop_back();
    deepest = std::max(deepest, d);
    if (nodes_[i].feature >= 0) {
      stack.emplace_back(static_cast<std::size_t>(nodes_[i].left), d + 1);
      stack.emplace_back(static_cast<std::size_t>(nodes_[i].right), d + 1);
    }
  }
  return deepest;
}

std::size_t DecisionTree::leaf_count() const {
  return static_cast<std::size_t>(std::count_if(nodes_.begin(), nodes_.end(), [](const Node& n) { return n.feature < 0; }));
}

ForestModel::ForestModel(std::vector<DecisionTree> trees, ForestParams params, std::vector<std::string> classes,
                         std::size_t feature_width)
    : trees_(std::move(trees)), params_(std::move(params)), classes_(std::move(classes)), feature_width_(feature_width) {}

std::vector<double> ForestModel::predict_proba(std::span<const double> x) const {
  if (x.size() != feature_width_)
    throw DataError("feature width mismatch: model expects " + std::to_string(feature_width_) + ", got " +
                    std::to_string(x.size()));
  std::vector<double> sum(classes_.size(), 0.0);
  for (const auto& tree : trees_)
    accumulate_tree(tree, x, params_.class_weights, sum);
  for (double& v : sum) v /= static_cast<double>(trees_.size());
  return sum;
}

std::vector<double> ForestModel::predict_proba(const FeatureMatrix& X) const {
  if (X.cols != feature_width_ && X.rows > 0)
    throw DataError("feature width mismatch: model expects " + std::to_string(feature_width_) + ", got " +
                    std::to_string(X.cols));
  const std::size_t nc = classes_.size();
  std::vector<double> out(X.rows * nc, 0.0);
  constexpr std::size_t kBlock = 256;
  std::size_t blocks = (X.rows + kBlock - 1) / kBlock;
  parallel_for(blocks, [&](std::size_t b) {
    std::size_t end = std::min(X.rows, (b + 1) * kBlock);
    // Tree-major within a block keeps one tree's nodes hot in cache.
    for (const auto& tree : trees_)
      for (std::size_t i = b * kBlock; i < end; ++i)
        accumulate_tree(tree, X.row(i), params_.class_weights, std::span<double>(out.data() + i * nc, nc));
    for (std::size_t i = b * kBlock * nc; i < end * nc; ++i) out[i] /= static_cast<double>(trees_.size());
  });
  return out;
}

std::vector<int> ForestModel::predict(const FeatureMatrix& X) const {
  auto proba = predict_proba(X);
  std::vector<int> out(X.rows);
  const std::size_t nc = classes_.size();
  for (std::size_t i = 0; i < X.rows; ++i) out[i] = argmax(std::span<const double>(proba.data() + i * nc, nc));
  return out;
}

int argmax(std::span<const double> proba) {
  std::size_t best = 0;
  for (std::size_t k = 1; k < proba.size(); ++k)
    if (proba[k] > proba[best]) best = k;
  return static_cast<int>(best);
}

// ---------------------------------------------------------------------------
// Serialization

namespace {
constexpr const char* kFormat = "metastack.forest";
constexpr int kVersion = 1;
}  // namespace

std::string ForestModel::to_json() const {
  nlohmann::json j;
  j["format"] = kFormat;
  j["version"] = kVersion;
  j["classes"] = classes_;
  j["feature_width"] = feature_width_;
  j["params"] = {{"n_estimators", params_.n_estimators},
                 {"max_depth", params_.max_depth},
                 {"features_per_split", params_.features_per_split},
                 {"min_samples_leaf", params_.min_samples_leaf},
                 {"class_weights", params_.class_weights},
                 {"bootstrap", params_.bootstrap},
                 {"seed", params_.seed}};
  auto& trees = j["trees"] = nlohmann::json::array();
  for (const auto& tree : trees_) {
    nlohmann::json t;
    std::vector<int> feature, left, right;
    std::vector<double> threshold;
    std::vector<std::uint32_t> offset;
    for (const auto& n : tree.nodes()) {
      feature.push_back(n.feature);
      threshold.push_back(n.threshold);
      left.push_back(n.left);
      right.push_back(n.right);
      offset.push_back(n.counts_offset);
    }
    t["feature"] = feature;
    t["threshold"] = threshold;
    t["left"] = left;
    t["right"] = right;
    t["offset"] = offset;
    t["counts"] = tree.leaf_count_storage();
    trees.push_back(std::move(t));
  }
  return j.dump();
}

ForestModel ForestModel::from_json(const std::string& text) {
  try {
    auto j = nlohmann::json::parse(text);
    if (j.at("format") != kFormat) throw DataError("not a forest model file");
    if (j.at("version").get<int>() != kVersion)
      throw DataError("unsupported model version " + j.at("version").dump());
    ForestParams p;
    const auto& jp = j.at("params");
    p.n_estimators = jp.at("n_estimators");
    p.max_depth = jp.at("max_depth");
    p.features_per_split = jp.at("features_per_split");
    p.min_samples_leaf = jp.at("min_samples_leaf");
    p.class_weights = jp.at("class_weights").get<std::vector<double>>();
    p.bootstrap = jp.at("bootstrap");
    p.seed = jp.at("seed");
    auto classes = j.at("classes").get<std::vector<std::string>>();
    std::vector<DecisionTree> trees;
    for (const auto& t : j.at("trees")) {
      auto feature = t.at("feature").get<std::vector<int>>();
      auto threshold = t.at("threshold").get<std::vector<double>>();
      auto left = t.at("left").get<std::vector<int>>();
      auto right = t.at("right").get<std::vector<int>>();
      auto offset = t.at("offset").get<std::vector<std::uint32_t>>();
      auto counts = t.at("counts").get<std::vector<std::uint32_t>>();
      std::size_t n = feature.size();
      if (threshold.size() != n || left.size() != n || right.size() != n || offset.size() != n || n == 0)
        throw DataError("inconsistent tree arrays in model file");
      std::vector<DecisionTree::Node> nodes(n);
      for (std::size_t i = 0; i < n; ++i) {
        nodes[i] = {feature[i], threshold[i], left[i], right[i], offset[i]};
        if (static_cast<std::size_t>(offset[i]) + classes.size() > counts.size())
          throw DataError("leaf counts out of range in model file");
        if (feature[i] >= 0 && (left[i] <= 0 || right[i] <= 0 || static_cast<std::size_t>(left[i]) >= n ||
                                static_cast<std::size_t>(right[i]) >= n))
          throw DataError("dangling child in model file");
      }
      trees.emplace_back(classes.size(), std::move(nodes), std::move(counts));
    }
    return ForestModel(std::move(trees), std::move(p), std::move(classes), j.at("feature_width").get<std::size_t>());
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("bad model file: ") + e.what());
  }
}

void ForestModel::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  out << to_json();
}

ForestModel ForestModel::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return from_json(buf.str());
}

std::uint64_t ForestModel::hash() const {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char ch : to_json()) {
    h ^= ch;
    h *= 1099511628211ULL;
  }
  return h;
}

// ---------------------------------------------------------------------------
// Training

DecisionTree train_tree(const FeatureMatrix& X, std::span<const int> y, std::size_t n_classes,
                        const ForestParams& params, std::uint64_t seed) {
  check_training_input(X, y, n_classes);
  params.validate();
  BinnedData data = bin_features(X);
  Grower grower(data, y, n_classes, params);
  return grower.grow(std::vector<std::uint32_t>(X.rows, 1), seed);
}

ForestModel train_forest(const FeatureMatrix& X, std::span<const int> y, const std::vector<std::string>& classes,
                         const ForestParams& params) {
  check_training_input(X, y, classes.size());
  params.validate();
  if (!params.class_weights.empty() && params.class_weights.size() != classes.size())
    throw DataError("class weight count does not match class count");
  BinnedData data = bin_features(X);
  std::vector<DecisionTree> trees(static_cast<std::size_t>(params.n_estimators));
  parallel_for(trees.size(), [&](std::size_t t) {
    std::uint64_t tree_seed = params.seed + t;
    Grower grower(data, y, classes.size(), params);
    auto counts = params.bootstrap ? bootstrap_counts(X.rows, tree_seed) : std::vector<std::uint32_t>(X.rows, 1);
    trees[t] = grower.grow(counts, tree_seed);
  });
  return ForestModel(std::move(trees), params, classes, X.cols);
}

std::vector<int> stratified_folds(std::span<const int> labels, int n_folds, std::uint64_t seed) {
  if (n_folds < 2) throw DataError("need at least two folds");
  int max_label = labels.empty() ? -1 : *std::max_element(labels.begin(), labels.end());
  std::vector<int> folds(labels.size(), 0);
  std::size_t offset = 0;
  for (int cls = 0; cls <= max_label; ++cls) {
    std::vector<std::size_t> members;
    for (std::size_t i = 0; i < labels.size(); ++i)
      if (labels[i] == cls) members.push_back(i);
    SplitMix rng{mix_seed(seed, static_cast<std::uint64_t>(cls))};
    for (std::size_t i = members.size(); i > 1; --i) std::swap(members[i - 1], members[rng.below(i)]);
    for (std::size_t j = 0; j < members.size(); ++j)
      folds[members[j]] = static_cast<int>((offset + j) % static_cast<std::size_t>(n_folds));
    offset += members.size();
  }
  return folds;
}

// ---------------------------------------------------------------------------
// Grid search

ParamGrid ParamGrid::parse(const std::string& text) {
  auto x = text.find('x');
  if (x == std::string::npos) throw DataError("grid must look like '25,50x10,25'");
  auto parse_list = [](const std::string& s) {
    std::vector<int> out;
    std::stringstream ss(s);
    std::string tok;
    while (std::getline(ss, tok, ',')) {
      double v;
      if (!parse_double(tok, v) || v < 1 || v != std::floor(v)) throw DataError("bad grid value '" + tok + "'");
      out.push_back(static_cast<int>(v));
    }
    if (out.empty()) throw DataError("empty grid axis");
    return out;
  };
  ParamGrid g;
  g.n_estimators = parse_list(text.substr(0, x));
  g.max_depths = parse_list(text.substr(x + 1));
  return g;
}

std::string ParamGrid::str() const {
  std::string out;
  for (std::size_t i = 0; i < n_estimators.size(); ++i) out += (i ? "," : "") + std::to_string(n_estimators[i]);
  out += "x";
  for (std::size_t i = 0; i < max_depths.size(); ++i) out += (i ? "," : "") + std::to_string(max_depths[i]);
  return out;
}

const GridScore& GridSearchResult::cell(int n_estimators, int max_depth) const {
  for (const auto& c : table)
    if (c.n_estimators == n_estimators && c.max_depth == max_depth) return c;
  throw DataError("grid cell not found");
}

GridSearchResult grid_search(const ParamGrid& grid, const FeatureMatrix& X, std::span<const int> y,
                             const std::vector<std::string>& classes, int inner_folds, const ForestParams& base,
                             const MetricFn& metric) {
  if (grid.size() == 0) throw DataError("parameter grid is empty");
  check_training_input(X, y, classes.size());
  const std::size_t nc = classes.size();

  GridSearchResult result;
  for (int n : grid.n_estimators)
    for (int d : grid.max_depths) result.table.push_back({n, d, 0.0, {}});

  // A forest of N trees is the N-prefix of a larger one, and a depth-d tree
  // is the depth-d truncation of a deeper one, so each fold trains a single
  // forest at the largest cell and scores every cell from it.
  ForestParams widest = base;
  widest.n_estimators = *std::max_element(grid.n_estimators.begin(), grid.n_estimators.end());
  widest.max_depth = *std::max_element(grid.max_depths.begin(), grid.max_depths.end());
  std::vector<int> est_sorted = grid.n_estimators;
  std::sort(est_sorted.begin(), est_sorted.end());
  est_sorted.erase(std::unique(est_sorted.begin(), est_sorted.end()), est_sorted.end());
  std::vector<int> depth_sorted = grid.max_depths;
  std::sort(depth_sorted.begin(), depth_sorted.end());
  depth_sorted.erase(std::unique(depth_sorted.begin(), depth_sorted.end()), depth_sorted.end());

  auto folds = stratified_folds(y, inner_folds, mix_seed(base.seed, kGridFoldSalt));
  for (int f = 0; f < inner_folds; ++f) {
    std::vector<std::size_t> train, test;
    for (std::size_t i = 0; i < y.size(); ++i) (folds[i] == f ? test : train).push_back(i);
    std::vector<int> y_train, y_test;
    std::vector<double> x_train, x_test;
    for (std::size_t i : train) {
      y_train.push_back(y[i]);
      auto r = X.row(i);
      x_train.insert(x_train.end(), r.begin(), r.end());
    }
    for (std::size_t i : test) {
      y_test.push_back(y[i]);
      auto r = X.row(i);
      x_test.insert(x_test.end(), r.begin(), r.end());
    }
    auto classes_in = [&](const std::vector<int>& labels) {
      std::vector<bool> seen(nc, false);
      for (int l : labels) seen[static_cast<std::size_t>(l)] = true;
      return std::count(seen.begin(), seen.end(), true);
    };
    if (train.empty() || test.empty() || classes_in(y_train) < 2 || classes_in(y_test) < 2) {
      result.warnings.push_back("fold " + std::to_string(f) + " holds a single class; scored 0");
      for (auto& cell : result.table) cell.fold_scores.push_back(0.0);
      continue;
    }
    FeatureMatrix Xtr(x_train, train.size(), X.cols);
    ForestModel forest = train_forest(Xtr, y_train, classes, widest);

    // sums is laid out depth-major: depth slot j holds test.size() * nc values.
    const std::size_t slot = test.size() * nc;
    std::vector<double> sums(depth_sorted.size() * slot, 0.0);
    std::vector<ConfusionMatrix> at(depth_sorted.size() * est_sorted.size(), ConfusionMatrix(nc));
    std::size_t next = 0;
    std::vector<double> proba(nc);
    for (std::size_t t = 0; t < forest.trees().size() && next < est_sorted.size(); ++t) {
      for (std::size_t i = 0; i < test.size(); ++i)
        accumulate_tree_depths(forest.trees()[t], std::span<const double>(x_test.data() + i * X.cols, X.cols),
                               depth_sorted, base.class_weights, std::span<double>(sums).subspan(i * nc), slot);
      while (next < est_sorted.size() && static_cast<std::size_t>(est_sorted[next]) == t + 1) {
        for (std::size_t j = 0; j < depth_sorted.size(); ++j)
          for (std::size_t i = 0; i < test.size(); ++i) {
            for (std::size_t k = 0; k < nc; ++k) proba[k] = sums[j * slot + i * nc + k] / static_cast<double>(t + 1);
            ++at[j * est_sorted.size() + next](static_cast<std::size_t>(y_test[i]),
                                               static_cast<std::size_t>(argmax(proba)));
          }
        ++next;
      }
    }
    for (auto& cell : result.table) {
      auto e = std::lower_bound(est_sorted.begin(), est_sorted.end(), cell.n_estimators) - est_sorted.begin();
      auto d = std::lower_bound(depth_sorted.begin(), depth_sorted.end(), cell.max_depth) - depth_sorted.begin();
      cell.fold_scores.push_back(
          metric(at[static_cast<std::size_t>(d) * est_sorted.size() + static_cast<std::size_t>(e)]));
    }
  }

  const GridScore* best = nullptr;
  for (auto& cell : result.table) {
    cell.mean_score = std::accumulate(cell.fold_scores.begin(), cell.fold_scores.end(), 0.0) /
                      static_cast<double>(cell.fold_scores.size());
    if (!best || cell.mean_score > best->mean_score ||
        (cell.mean_score == best->mean_score &&
         (cell.n_estimators < best->n_estimators ||
          (cell.n_estimators == best->n_estimators && cell.max_depth < best->max_depth))))
      best = &cell;
  }
  result.best = base;
  result.best.n_estimators = best->n_estimators;
  result.best.max_depth = best->max_depth;
  result.best_score = best->mean_score;
  return result;
}

}  // namespace metastack
