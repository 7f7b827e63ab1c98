#include <algorithm>
#include <cmath>
#include <random>

#include "doctest.h"
#include "metastack/common.hpp"
#include "metastack/dataset.hpp"
#include "metastack/forest.hpp"
#include "metastack/synth.hpp"

using namespace metastack;

namespace {

const std::vector<std::string> kBinary{"no scrap", "scrap"};

struct Blob {
  std::vector<double> x;
  std::vector<int> y;
  std::size_t rows = 0, cols = 0;
  FeatureMatrix matrix() const { return {x, rows, cols}; }
};

Blob noisy_blob(std::size_t rows, std::size_t cols, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, 1.0);
  Blob b;
  b.rows = rows;
  b.cols = cols;
  for (std::size_t i = 0; i < rows; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < cols; ++j) {
      double v = std::round(n(rng) * 1000.0) / 1000.0;
      b.x.push_back(v);
      if (j < 2) s += v;
    }
    b.y.push_back(s + 0.7 * n(rng) > 0.3 ? 1 : 0);
  }
  return b;
}

// Independent tree walk: follows thresholds from the root and normalizes
// the leaf counts.
std::vector<double> walk(const DecisionTree& tree, std::span<const double> x) {
  const auto& nodes = tree.nodes();
  std::size_t i = 0;
  while (nodes[i].feature >= 0)
    i = static_cast<std::size_t>(x[static_cast<std::size_t>(nodes[i].feature)] <= nodes[i].threshold ? nodes[i].left
                                                                                                     : nodes[i].right);
  auto c = tree.class_counts(nodes[i]);
  double total = 0.0;
  for (auto v : c) total += v;
  std::vector<double> out;
  for (auto v : c) out.push_back(v / total);
  return out;
}

double gini(std::span<const std::uint32_t> counts) {
  double total = 0.0, sq = 0.0;
  for (auto v : counts) total += v;
  for (auto v : counts) sq += (v / total) * (v / total);
  return 1.0 - sq;
}

double training_accuracy(const ForestModel& m, const Blob& b) {
  auto pred = m.predict(b.matrix());
  std::size_t ok = 0;
  for (std::size_t i = 0; i < b.rows; ++i) ok += pred[i] == b.y[i];
  return static_cast<double>(ok) / static_cast<double>(b.rows);
}

}  // namespace

TEST_CASE("two points split once into pure children") {
  std::vector<double> x{0.0, 1.0};
  std::vector<int> y{0, 1};
  ForestParams p;
  p.max_depth = 1;
  p.features_per_split = -1;
  auto tree = train_tree({x, 2, 1}, y, 2, p, 1);
  const auto& root = tree.nodes()[0];
  REQUIRE(root.feature == 0);
  CHECK(root.threshold > 0.0);
  CHECK(root.threshold < 1.0);
  auto l = tree.class_counts(tree.nodes()[static_cast<std::size_t>(root.left)]);
  auto r = tree.class_counts(tree.nodes()[static_cast<std::size_t>(root.right)]);
  CHECK(l[0] == 1);
  CHECK(l[1] == 0);
  CHECK(r[0] == 0);
  CHECK(r[1] == 1);
}

TEST_CASE("single-class labels give a single leaf") {
  std::vector<double> x{0.0, 1.0, 2.0};
  std::vector<int> y{1, 1, 1};
  auto tree = train_tree({x, 3, 1}, y, 2, {}, 1);
  CHECK(tree.nodes().size() == 1);
  CHECK(tree.depth() == 0);
}

TEST_CASE("separable data is fit exactly at depth 1") {
  std::mt19937_64 rng(9);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  Blob b;
  b.rows = 50;
  b.cols = 2;
  for (int i = 0; i < 50; ++i) {
    double f0 = u(rng), f1 = u(rng);
    b.x.push_back(f0);
    b.x.push_back(f1);
    b.y.push_back(f1 > 0.1 ? 1 : 0);
  }
  // Oracle: an exhaustive threshold scan on feature 1 finds a perfect cut.
  bool separable = false;
  for (std::size_t t = 0; t < 50 && !separable; ++t) {
    double thr = b.x[t * 2 + 1];
    bool ok = true;
    for (std::size_t i = 0; i < 50; ++i) ok = ok && ((b.x[i * 2 + 1] > thr) == (b.y[i] == 1));
    separable = ok;
  }
  REQUIRE(separable);
  for (int depth : {1, 2, 5}) {
    ForestParams p;
    p.n_estimators = 1;
    p.max_depth = depth;
    p.features_per_split = -1;
    p.bootstrap = false;
    auto m = train_forest(b.matrix(), b.y, kBinary, p);
    CHECK(training_accuracy(m, b) == 1.0);
  }
}

TEST_CASE("training input errors") {
  std::vector<double> x;
  std::vector<int> y;
  CHECK_THROWS_AS(train_tree({x, 0, 1}, y, 2, {}, 1), DataError);
  std::vector<double> x2{1.0, 2.0};
  std::vector<int> y1{0};
  CHECK_THROWS_AS(train_tree({x2, 2, 1}, y1, 2, {}, 1), DataError);
  std::vector<int> y_bad{0, 5};
  CHECK_THROWS_AS(train_forest({x2, 2, 1}, y_bad, kBinary, {}), DataError);
  ForestParams p;
  p.n_estimators = 0;
  std::vector<int> y2{0, 1};
  CHECK_THROWS_AS(train_forest({x2, 2, 1}, y2, kBinary, p), DataError);
}

TEST_CASE("one tree on one row reproduces its label") {
  std::vector<double> x{0.3, -2.0};
  std::vector<int> y{1};
  ForestParams p;
  p.n_estimators = 1;
  auto m = train_forest({x, 1, 2}, y, kBinary, p);
  auto proba = m.predict_proba(std::span<const double>(x));
  CHECK(proba[0] == 0.0);
  CHECK(proba[1] == 1.0);
}

TEST_CASE("same seed gives identical forests") {
  auto b = noisy_blob(400, 6, 1);
  ForestParams p;
  p.n_estimators = 20;
  p.max_depth = 8;
  p.seed = 77;
  auto a = train_forest(b.matrix(), b.y, kBinary, p);
  auto c = train_forest(b.matrix(), b.y, kBinary, p);
  CHECK(a.hash() == c.hash());
  CHECK(a.predict_proba(b.matrix()) == c.predict_proba(b.matrix()));
  p.seed = 78;
  CHECK(train_forest(b.matrix(), b.y, kBinary, p).hash() != a.hash());
}

TEST_CASE("forest learns the planted synthetic signal") {
  SynthSpec spec;
  spec.seed = 7;
  auto ds = impute_marker(generate_synthetic(spec), {-1000.0});
  ForestParams p;
  p.n_estimators = 100;
  p.max_depth = 25;
  auto cols = all_columns(ds);
  std::vector<std::size_t> rows(ds.rows());
  for (std::size_t i = 0; i < rows.size(); ++i) rows[i] = i;
  auto x = gather(ds, rows, cols);
  FeatureMatrix X(x, ds.rows(), ds.cols());
  auto m = train_forest(X, ds.labels, ds.classes, p);
  auto pred = m.predict(X);
  CHECK(mcc(confusion(ds.labels, pred, 2)) > 0.5);
}

TEST_CASE("predict_proba averages tree leaf frequencies") {
  using Node = DecisionTree::Node;
  DecisionTree pure0(2, {Node{}}, {3, 0});
  DecisionTree pure1(2, {Node{}}, {0, 5});
  ForestModel all0({pure0, pure0}, {}, kBinary, 1);
  std::vector<double> x{0.0};
  auto p = all0.predict_proba(std::span<const double>(x));
  CHECK(p == std::vector<double>{1.0, 0.0});

  ForestModel split({pure0, pure1}, {}, kBinary, 1);
  auto q = split.predict_proba(std::span<const double>(x));
  CHECK(q == std::vector<double>{0.5, 0.5});
  CHECK(argmax(q) == 0);

  std::vector<double> wide{0.0, 1.0};
  CHECK_THROWS_AS(split.predict_proba(std::span<const double>(wide)), DataError);
}

TEST_CASE("forest output is the mean of independent tree walks") {
  auto b = noisy_blob(300, 5, 2);
  ForestParams p;
  p.n_estimators = 15;
  p.max_depth = 6;
  auto m = train_forest(b.matrix(), b.y, kBinary, p);
  auto probe = noisy_blob(50, 5, 3);
  for (std::size_t i = 0; i < probe.rows; ++i) {
    auto x = probe.matrix().row(i);
    std::vector<double> mean(2, 0.0);
    for (const auto& t : m.trees()) {
      auto d = walk(t, x);
      for (std::size_t k = 0; k < 2; ++k) mean[k] += d[k];
    }
    for (double& v : mean) v /= static_cast<double>(m.trees().size());
    auto got = m.predict_proba(x);
    CHECK(got == mean);
    CHECK(std::abs(got[0] + got[1] - 1.0) <= 1e-9);
  }
}

TEST_CASE("every accepted split has non-negative Gini gain") {
  auto b = noisy_blob(500, 4, 4);
  ForestParams p;
  p.n_estimators = 5;
  p.max_depth = 12;
  auto m = train_forest(b.matrix(), b.y, kBinary, p);
  for (const auto& t : m.trees()) {
    for (const auto& n : t.nodes()) {
      if (n.feature < 0) continue;
      auto pc = t.class_counts(n);
      auto lc = t.class_counts(t.nodes()[static_cast<std::size_t>(n.left)]);
      auto rc = t.class_counts(t.nodes()[static_cast<std::size_t>(n.right)]);
      double np = pc[0] + pc[1], nl = lc[0] + lc[1], nr = rc[0] + rc[1];
      CHECK(nl + nr == np);
      CHECK(nl >= 1);
      CHECK(nr >= 1);
      double gain = gini(pc) - (nl / np) * gini(lc) - (nr / np) * gini(rc);
      CHECK(gain >= -1e-12);
    }
    CHECK(t.depth() <= 12u);
  }
}

TEST_CASE("deeper trees never lose training accuracy") {
  auto b = noisy_blob(400, 4, 5);
  double prev = 0.0;
  for (int depth = 1; depth <= 14; ++depth) {
    ForestParams p;
    p.n_estimators = 1;
    p.max_depth = depth;
    p.features_per_split = -1;
    p.bootstrap = false;
    double acc = training_accuracy(train_forest(b.matrix(), b.y, kBinary, p), b);
    CHECK(acc >= prev);
    prev = acc;
  }
}

TEST_CASE("min_samples_leaf bounds every leaf") {
  auto b = noisy_blob(300, 3, 6);
  ForestParams p;
  p.n_estimators = 3;
  p.max_depth = 30;
  p.min_samples_leaf = 7;
  auto m = train_forest(b.matrix(), b.y, kBinary, p);
  for (const auto& t : m.trees())
    for (const auto& n : t.nodes())
      if (n.feature < 0) {
        auto c = t.class_counts(n);
        CHECK(c[0] + c[1] >= 7u);
      }
}

TEST_CASE("class weights shift the leaf distribution") {
  using Node = DecisionTree::Node;
  DecisionTree leaf(2, {Node{}}, {3, 1});
  ForestParams p;
  p.class_weights = {1.0, 3.0};
  ForestModel m({leaf}, p, kBinary, 1);
  std::vector<double> x{0.0};
  auto q = m.predict_proba(std::span<const double>(x));
  CHECK(q[0] == 0.5);
  CHECK(q[1] == 0.5);
}

TEST_CASE("model serialization round-trips exactly") {
  auto b = noisy_blob(300, 5, 7);
  ForestParams p;
  p.n_estimators = 10;
  p.max_depth = 9;
  p.seed = 3;
  auto m = train_forest(b.matrix(), b.y, kBinary, p);
  auto back = ForestModel::from_json(m.to_json());
  CHECK(back == m);
  CHECK(back.hash() == m.hash());
  CHECK(back.predict_proba(b.matrix()) == m.predict_proba(b.matrix()));
  CHECK_THROWS_AS(ForestModel::from_json("{\"format\":\"other\"}"), DataError);
  CHECK_THROWS_AS(ForestModel::from_json("not json"), DataError);
}

TEST_CASE("multiclass forest") {
  std::mt19937_64 rng(8);
  std::normal_distribution<double> n(0.0, 1.0);
  Blob b;
  b.rows = 600;
  b.cols = 3;
  for (std::size_t i = 0; i < b.rows; ++i) {
    int cls = static_cast<int>(i % 3);
    for (std::size_t j = 0; j < 3; ++j) b.x.push_back(n(rng) + (static_cast<int>(j) == cls ? 3.0 : 0.0));
    b.y.push_back(cls);
  }
  ForestParams p;
  p.n_estimators = 20;
  auto m = train_forest(b.matrix(), b.y, {"a", "b", "c"}, p);
  CHECK(training_accuracy(m, b) > 0.95);
}

TEST_CASE("stratified folds balance every class") {
  std::vector<int> labels;
  for (int i = 0; i < 90; ++i) labels.push_back(i < 30 ? 1 : 0);
  auto folds = stratified_folds(labels, 3, 5);
  for (int f = 0; f < 3; ++f) {
    int pos = 0, all = 0;
    for (std::size_t i = 0; i < labels.size(); ++i)
      if (folds[i] == f) {
        ++all;
        pos += labels[i];
      }
    CHECK(all == 30);
    CHECK(pos == 10);
  }
  CHECK(stratified_folds(labels, 3, 5) == folds);
  CHECK_THROWS_AS(stratified_folds(labels, 1, 5), DataError);
}

TEST_CASE("grid search scores equal separately trained cells") {
  auto b = noisy_blob(360, 5, 10);
  ParamGrid grid;
  grid.n_estimators = {3, 7};
  grid.max_depths = {2, 6};
  ForestParams base;
  base.seed = 21;
  auto result = grid_search(grid, b.matrix(), b.y, kBinary, 2, base);
  REQUIRE(result.table.size() == 4);

  auto folds = stratified_folds(b.y, 2, mix_seed(base.seed, kGridFoldSalt));
  for (const auto& cell : result.table) {
    std::vector<double> scores;
    for (int f = 0; f < 2; ++f) {
      Blob tr, te;
      tr.cols = te.cols = b.cols;
      for (std::size_t i = 0; i < b.rows; ++i) {
        Blob& dst = folds[i] == f ? te : tr;
        auto r = b.matrix().row(i);
        dst.x.insert(dst.x.end(), r.begin(), r.end());
        dst.y.push_back(b.y[i]);
        ++dst.rows;
      }
      ForestParams p = base;
      p.n_estimators = cell.n_estimators;
      p.max_depth = cell.max_depth;
      auto m = train_forest(tr.matrix(), tr.y, kBinary, p);
      scores.push_back(mcc(confusion(te.y, m.predict(te.matrix()), 2)));
    }
    CHECK(cell.fold_scores == scores);
  }
}

TEST_CASE("grid search selection and tie rules") {
  auto b = noisy_blob(200, 4, 11);
  ParamGrid one;
  one.n_estimators = {5};
  one.max_depths = {3};
  auto r1 = grid_search(one, b.matrix(), b.y, kBinary, 2, {});
  CHECK(r1.best.n_estimators == 5);
  CHECK(r1.best.max_depth == 3);

  ParamGrid grid;
  grid.n_estimators = {10, 4};
  grid.max_depths = {6, 2};
  auto constant = [](const ConfusionMatrix&) { return 0.25; };
  auto tied = grid_search(grid, b.matrix(), b.y, kBinary, 2, {}, constant);
  CHECK(tied.best.n_estimators == 4);
  CHECK(tied.best.max_depth == 2);

  auto real = grid_search(grid, b.matrix(), b.y, kBinary, 2, {});
  for (const auto& c : real.table) CHECK(c.mean_score <= real.best_score);
}

TEST_CASE("default grid produces a 5x5 table") {
  auto b = noisy_blob(80, 3, 12);
  auto r = grid_search(ParamGrid{}, b.matrix(), b.y, kBinary, 2, {});
  CHECK(r.table.size() == 25);
  CHECK_NOTHROW(r.cell(50, 25));
  CHECK_THROWS(r.cell(51, 25));
  CHECK(ParamGrid::parse("25,50x10,25").str() == "25,50x10,25");
  CHECK_THROWS_AS(ParamGrid::parse("25,50"), DataError);
}

TEST_CASE("single-class folds score zero with a warning") {
  Blob b;
  b.rows = 21;
  b.cols = 1;
  for (int i = 0; i < 21; ++i) {
    b.x.push_back(i);
    b.y.push_back(i == 20 ? 1 : 0);
  }
  ParamGrid grid;
  grid.n_estimators = {3};
  grid.max_depths = {2};
  auto r = grid_search(grid, b.matrix(), b.y, kBinary, 2, {});
  CHECK(r.warnings.size() == 2);
  CHECK(r.table[0].mean_score == 0.0);
}

TEST_CASE("parallel and serial training agree") {
  auto b = noisy_blob(300, 5, 13);
  ForestParams p;
  p.n_estimators = 12;
  p.seed = 4;
  auto parallel = train_forest(b.matrix(), b.y, kBinary, p);
  std::vector<DecisionTree> serial;
  for (int t = 0; t < 12; ++t) {
    ForestParams one = p;
    one.n_estimators = 1;
    one.seed = p.seed + static_cast<std::uint64_t>(t);
    serial.push_back(train_forest(b.matrix(), b.y, kBinary, one).trees()[0]);
  }
  CHECK(parallel.trees() == serial);
}
