#include <cmath>
#include <random>

#include "doctest.h"
#include "metastack/common.hpp"
#include "metastack/metrics.hpp"

using namespace metastack;

namespace {
const ConfusionMatrix kComplete({{1180766, 2981}, {5177, 1702}});
const ConfusionMatrix kMeta({{1180558, 3189}, {5231, 1648}});
const ConfusionMatrix kSub0({{1175324, 8423}, {5221, 1658}});
const ConfusionMatrix kSensorComplete({{1048299, 16513, 12980}, {10170, 562431, 9687}, {5490, 9841, 553349}});

ConfusionMatrix random_matrix(std::mt19937_64& rng, std::size_t n, int max_count) {
  std::uniform_int_distribution<int> d(0, max_count);
  ConfusionMatrix cm(n);
  for (std::size_t a = 0; a < n; ++a)
    for (std::size_t p = 0; p < n; ++p) cm(a, p) = static_cast<std::uint64_t>(d(rng));
  return cm;
}
}  // namespace

TEST_CASE("confusion counts the diagonal") {
  std::vector<int> y{0, 1};
  auto cm = confusion(y, y, 2);
  CHECK(cm(0, 0) == 1);
  CHECK(cm(1, 1) == 1);
  CHECK(cm(0, 1) == 0);
  CHECK(cm.total() == 2);
}

TEST_CASE("confusion matches a hand tally") {
  std::mt19937_64 rng(42);
  std::uniform_int_distribution<int> lab(0, 2);
  std::vector<int> t(100), p(100);
  for (int i = 0; i < 100; ++i) {
    t[static_cast<std::size_t>(i)] = lab(rng);
    p[static_cast<std::size_t>(i)] = lab(rng);
  }
  auto cm = confusion(t, p, 3);
  for (std::size_t a = 0; a < 3; ++a)
    for (std::size_t q = 0; q < 3; ++q) {
      std::uint64_t tally = 0;
      for (std::size_t i = 0; i < 100; ++i) tally += (t[i] == static_cast<int>(a) && p[i] == static_cast<int>(q));
      CHECK(cm(a, q) == tally);
    }
}

TEST_CASE("confusion rejects unknown labels") {
  std::vector<int> t{0, 2}, p{0, 1};
  CHECK_THROWS(confusion(t, p, 2));
  std::vector<int> shorter{0};
  CHECK_THROWS(confusion(t, shorter, 3));
}

TEST_CASE("published binary MCC values") {
  CHECK(std::abs(mcc(kComplete) - 0.296544) < 1e-6);
  CHECK(std::abs(mcc(kMeta) - 0.282242) < 1e-6);
  CHECK(std::abs(mcc(kSub0) - 0.193483) < 1e-6);
}

TEST_CASE("published multiclass MCC value") {
  CHECK(std::abs(mcc(kSensorComplete) - 0.954285) < 1e-6);
}

TEST_CASE("perfect and degenerate matrices") {
  CHECK(mcc(ConfusionMatrix({{5, 0}, {0, 3}})) == 1.0);
  CHECK(mcc(ConfusionMatrix({{4, 0, 0}, {0, 2, 0}, {0, 0, 9}})) == doctest::Approx(1.0));
  CHECK(mcc(ConfusionMatrix({{5, 0}, {3, 0}})) == 0.0);
  CHECK(cohens_kappa(ConfusionMatrix({{5, 0}, {0, 0}})) == 0.0);
}

TEST_CASE("suite reproduces the complete-model table") {
  auto m = suite(kComplete);
  CHECK(std::abs(m.accuracy - 0.993148) < 1e-6);
  CHECK(std::abs(m.f1_weighted - 0.992501) < 1e-6);
  CHECK(std::abs(m.precision_weighted - 0.991982) < 1e-6);
  CHECK(std::abs(m.recall_weighted - 0.993148) < 1e-6);
  CHECK(std::abs(m.cohens_kappa - 0.291095) < 1e-6);
}

TEST_CASE("suite on sub-model 0") {
  auto m = suite(kSub0);
  CHECK(std::abs(m.mcc - 0.193483) < 1e-6);
  CHECK(std::abs(m.cohens_kappa - 0.189955) < 1e-6);
}

TEST_CASE("identity matrix scores 1 everywhere") {
  auto m = suite(ConfusionMatrix({{1, 0}, {0, 1}}));
  CHECK(m.mcc == 1.0);
  CHECK(m.accuracy == 1.0);
  CHECK(m.f1_weighted == 1.0);
  CHECK(m.precision_weighted == 1.0);
  CHECK(m.recall_weighted == 1.0);
  CHECK(m.cohens_kappa == 1.0);
}

TEST_CASE("empty matrix is rejected") {
  CHECK_THROWS(suite(ConfusionMatrix(2)));
  CHECK_THROWS(suite(ConfusionMatrix()));
}

TEST_CASE("R_k equals the binary formula on 2x2 matrices") {
  std::mt19937_64 rng(1);
  for (int i = 0; i < 1000; ++i) {
    auto cm = random_matrix(rng, 2, 50);
    CHECK(std::abs(multiclass_mcc(cm) - binary_mcc(cm)) <= 1e-12);
  }
}

TEST_CASE("MCC is invariant under relabeling classes") {
  std::mt19937_64 rng(2);
  for (int i = 0; i < 200; ++i) {
    auto cm = random_matrix(rng, 3, 30);
    std::vector<std::size_t> perm{2, 0, 1};
    ConfusionMatrix permuted(3);
    for (std::size_t a = 0; a < 3; ++a)
      for (std::size_t p = 0; p < 3; ++p) permuted(perm[a], perm[p]) = cm(a, p);
    CHECK(std::abs(mcc(permuted) - mcc(cm)) <= 1e-12);
  }
}

TEST_CASE("swapping prediction columns negates binary MCC") {
  std::mt19937_64 rng(3);
  for (int i = 0; i < 200; ++i) {
    auto cm = random_matrix(rng, 2, 40);
    ConfusionMatrix swapped(2);
    for (std::size_t a = 0; a < 2; ++a)
      for (std::size_t p = 0; p < 2; ++p) swapped(a, 1 - p) = cm(a, p);
    CHECK(std::abs(mcc(swapped) + mcc(cm)) <= 1e-12);
  }
}

TEST_CASE("accuracy equals weighted recall and ranges hold") {
  std::mt19937_64 rng(4);
  for (int i = 0; i < 200; ++i) {
    auto cm = random_matrix(rng, 2 + static_cast<std::size_t>(i % 3), 20);
    if (cm.total() == 0) continue;
    auto m = suite(cm);
    CHECK(std::abs(m.accuracy - m.recall_weighted) <= 1e-12);
    CHECK(m.mcc >= -1.0);
    CHECK(m.mcc <= 1.0);
    for (double v : {m.accuracy, m.f1_weighted, m.precision_weighted, m.recall_weighted}) {
      CHECK(v >= 0.0);
      CHECK(v <= 1.0);
    }
  }
}

TEST_CASE("spearman matches the rank-difference formula without ties") {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<double> x(12), y(12);
    for (auto& v : x) v = u(rng);
    for (auto& v : y) v = u(rng);
    auto rank = [](const std::vector<double>& v, std::size_t i) {
      double r = 1;
      for (double w : v) r += w < v[i] ? 1 : 0;
      return r;
    };
    double d2 = 0;
    for (std::size_t i = 0; i < x.size(); ++i) d2 += std::pow(rank(x, i) - rank(y, i), 2);
    double n = 12;
    CHECK(spearman(x, y) == doctest::Approx(1 - 6 * d2 / (n * (n * n - 1))).epsilon(1e-12));
  }
}

TEST_CASE("spearman handles ties, constants and bad input") {
  std::vector<double> a{1, 2, 2, 3}, b{1, 2, 3, 4};
  // Pearson correlation of the average ranks (1, 2.5, 2.5, 4) and (1, 2, 3, 4).
  CHECK(spearman(a, b) == doctest::Approx(3.0 / std::sqrt(10.0)));
  std::vector<double> lam{0, 0.1, 0.2, 0.3}, mcc{0.5, 0.4, 0.4, 0.1};
  CHECK(spearman(lam, mcc) == doctest::Approx(-3.0 / std::sqrt(10.0)));
  std::vector<double> flat{1, 1, 1, 1};
  CHECK(spearman(flat, b) == 0.0);
  std::vector<double> one{1};
  CHECK_THROWS_AS(spearman(one, one), DataError);
  CHECK_THROWS_AS(spearman(a, one), DataError);
}
