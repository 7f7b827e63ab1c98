#include <bit>
#include <cmath>
#include <random>

#include "doctest.h"
#include "metastack/baselines.hpp"
#include "metastack/synth.hpp"

using namespace metastack;

namespace {

Dataset plant(int items, std::vector<double> visits, std::uint64_t seed = 3) {
  SynthSpec spec;
  spec.n_items = items;
  spec.visit_probabilities = std::move(visits);
  spec.unit_feature_counts = {6, 6, 6, 6};
  spec.seed = seed;
  auto raw = generate_synthetic(spec);
  return impute_marker(raw, {default_marker(raw)});
}

ScenarioConfig tiny_config() {
  ScenarioConfig c;
  c.grid = ParamGrid::parse("10x6");
  c.plan.seed = 11;
  return c;
}

std::size_t count_kind(const std::vector<TranscriptEntry>& t, const std::string& phase, MessageKind kind) {
  std::size_t n = 0;
  for (const auto& e : t) n += e.phase == phase && e.message.kind == kind ? 1 : 0;
  return n;
}

}  // namespace

TEST_CASE("prediction exchange sends one sub-prediction per item and unit") {
  auto ds = plant(100, {1, 1, 1, 1});
  auto parts = partition_by_unit(ds);
  auto report = run_scenario(ds, parts, 2, tiny_config());
  auto entries = report.transcript.entries();
  CHECK(count_kind(entries, "score", MessageKind::sub_prediction) == 400);
  CHECK(count_kind(entries, "result", MessageKind::meta_prediction) == 100);
  CHECK(count_kind(entries, "train", MessageKind::sub_prediction) > 0);
  for (const auto& e : entries) CHECK(e.message.kind != MessageKind::raw_row);
  CHECK(report.audit.pass);
  CHECK(report.audit.messages_scanned == entries.size());
  CHECK(report.traffic.total.messages == entries.size());
  CHECK(report.traffic.by_channel.at("score L2->meta").messages == 100);
  CHECK(report.models.size() == 5);
  CHECK(report.model("meta").items_scored == 100);
  CHECK(report.volume.ratio_num * 24 == report.volume.ratio_den * 8);
  CHECK(check_fold_records(report.folds, ds.rows(), 3).empty());
}

TEST_CASE("shared pool ships raw rows and fails the audit") {
  auto ds = plant(120, {1, 0.5, 0.5, 1});
  auto parts = partition_by_unit(ds);
  auto report = run_scenario(ds, parts, 3, tiny_config());
  auto entries = report.transcript.entries();
  std::size_t covered = 0, observed = 0;
  for (const auto& p : parts) {
    covered += p.covered_count();
    for (std::size_t r = 0; r < ds.rows(); ++r)
      for (auto c : p.column_indices) observed += ds.observed(r, c) ? 1 : 0;
  }
  CHECK(entries.size() == covered);
  CHECK(report.traffic.total.value_fields == observed);
  CHECK_FALSE(report.audit.pass);
  CHECK(report.audit.flagged_messages().size() == entries.size());
  REQUIRE(report.models.size() == 1);
  CHECK(report.model("complete").items_scored == 120);
  CHECK_THROWS_AS(report.best_sub(), DataError);
}

TEST_CASE("isolated units exchange nothing") {
  auto ds = plant(90, {1, 1, 0.5, 1});
  auto parts = partition_by_unit(ds);
  auto report = run_scenario(ds, parts, 1, tiny_config());
  CHECK(report.transcript.size() == 0);
  CHECK(report.audit.pass);
  CHECK(report.audit.messages_scanned == 0);
  REQUIRE(report.models.size() == 4);
  for (std::size_t u = 0; u < 4; ++u) {
    CHECK(report.models[u].model == parts[u].unit_id);
    CHECK(report.models[u].items_scored == 90);
  }
  double best = -2;
  for (const auto& m : report.models) best = std::max(best, m.metrics.mcc);
  CHECK(report.best_sub().metrics.mcc == best);
  CHECK_THROWS_AS(report.model("meta"), DataError);
  CHECK_THROWS_AS(run_scenario(ds, parts, 4, tiny_config()), DataError);
}

TEST_CASE("column sigmas match a two-pass estimate over observed cells") {
  auto ds = plant(300, {1, 0.4, 0.4, 1});
  auto sigma = column_sigmas(ds);
  for (std::size_t c = 0; c < ds.cols(); ++c) {
    std::vector<double> v;
    for (std::size_t r = 0; r < ds.rows(); ++r)
      if (ds.observed(r, c)) v.push_back(ds.at(r, c));
    double mean = 0;
    for (double x : v) mean += x;
    mean /= static_cast<double>(v.size());
    double ss = 0;
    for (double x : v) ss += (x - mean) * (x - mean);
    CHECK(sigma[c] == doctest::Approx(std::sqrt(ss / static_cast<double>(v.size() - 1))).epsilon(1e-10));
  }
}

TEST_CASE("noise touches only observed cells and scales with lambda") {
  auto ds = plant(2000, {1, 0.3, 0.3, 1});
  auto same = add_noise(ds, 0.0, 99);
  for (std::size_t i = 0; i < ds.values.size(); ++i)
    CHECK(std::bit_cast<std::uint64_t>(same.values[i]) == std::bit_cast<std::uint64_t>(ds.values[i]));

  auto sigma = column_sigmas(ds);
  auto half = add_noise(ds, 0.5, 99);
  auto full = add_noise(ds, 1.0, 99);
  CHECK(add_noise(ds, 0.5, 99).values == half.values);
  std::size_t untouched = 0;
  double z2 = 0;
  std::size_t n = 0;
  for (std::size_t r = 0; r < ds.rows(); ++r)
    for (std::size_t c = 0; c < ds.cols(); ++c) {
      double x = ds.at(r, c);
      if (!ds.observed(r, c)) {
        untouched += half.at(r, c) == x || (std::isnan(x) && std::isnan(half.at(r, c))) ? 1 : 0;
        continue;
      }
      double e1 = full.at(r, c) - x, e5 = half.at(r, c) - x;
      // Shared seed: the same draw, scaled by lambda.
      CHECK(e5 == doctest::Approx(e1 / 2).epsilon(1e-9).scale(sigma[c]));
      z2 += (e1 / sigma[c]) * (e1 / sigma[c]);
      ++n;
    }
  std::size_t unobserved = 0;
  for (std::size_t r = 0; r < ds.rows(); ++r)
    for (std::size_t c = 0; c < ds.cols(); ++c) unobserved += ds.observed(r, c) ? 0 : 1;
  CHECK(unobserved > 0);
  CHECK(untouched == unobserved);
  CHECK(std::sqrt(z2 / static_cast<double>(n)) == doctest::Approx(1.0).epsilon(0.02));
  CHECK(add_noise(ds, 1.0, 100).values != full.values);
  CHECK_THROWS_AS(add_noise(ds, -0.1, 1), DataError);
}

TEST_CASE("noise sweep starts at the un-noised baseline and degrades") {
  auto ds = plant(1500, {1, 0.5, 0.5, 1});
  CvPlan plan;
  plan.seed = 4;
  auto grid = ParamGrid::parse("20x8");
  auto sweep = noising_sweep(ds, grid, {0.0, 1.0, 4.0}, plan, 17);
  auto base = nested_cv_complete(ds, grid, plan).report;
  REQUIRE(sweep.mcc.size() == 3);
  CHECK(sweep.reports[0].predictions == base.predictions);
  CHECK(sweep.mcc[0] == base.metrics.mcc);
  CHECK(sweep.mcc[0] > sweep.mcc[1]);
  CHECK(sweep.mcc[1] > sweep.mcc[2]);
  CHECK(default_lambdas().size() == 11);
  CHECK(default_lambdas()[3] == 0.3);
  CHECK_THROWS_AS(noising_sweep(ds, grid, {}, plan, 1), DataError);
}

TEST_CASE("price of privacy in both renderings") {
  auto p = price_of_privacy(0.2822, 0.2965);
  REQUIRE(p.relative_gap);
  REQUIRE(p.ratio_minus_one);
  CHECK(*p.relative_gap * 100 == doctest::Approx(4.82).epsilon(1e-3));
  CHECK(*p.ratio_minus_one * 100 == doctest::Approx(5.07).epsilon(1e-3));
  CHECK_FALSE(price_of_privacy(0.0, 0.3).ratio_minus_one);
  CHECK(price_of_privacy(0.0, 0.3).relative_gap);
  CHECK_FALSE(price_of_privacy(0.1, -0.2).relative_gap);
  CHECK(*price_of_privacy(0.3, 0.3).relative_gap == 0.0);
}

TEST_CASE("unit noise doubles the variance of a column") {
  Dataset ds;
  std::mt19937_64 rng(8);
  std::normal_distribution<double> x(3.0, 2.0);
  const std::size_t n = 100000;
  for (std::size_t i = 0; i < n; ++i) {
    ds.items.push_back("#" + std::to_string(i));
    ds.values.push_back(x(rng));
    ds.labels.push_back(static_cast<int>(i % 2));
  }
  ds.columns = {{FeatureId{0, 0, 0}, ColumnKind::numeric}};
  ds.classes = {"a", "b"};
  auto variance = [](const std::vector<double>& v) {
    double m = 0, s = 0;
    for (double e : v) m += e;
    m /= static_cast<double>(v.size());
    for (double e : v) s += (e - m) * (e - m);
    return s / static_cast<double>(v.size() - 1);
  };
  double base = variance(ds.values);
  CHECK(variance(add_noise(ds, 1.0, 21).values) == doctest::Approx(2 * base).epsilon(0.05));
}
