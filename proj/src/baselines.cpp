#include "metastack/baselines.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include "metastack/common.hpp"

namespace metastack {

namespace {

std::set<std::string> feature_names(const Dataset& ds) {
  std::set<std::string> names;
  for (const auto& c : ds.columns) names.insert(c.id.str());
  return names;
}

VolumeAccount volume_for(const std::vector<UnitPartition>& partitions) {
  std::vector<std::int64_t> widths;
  for (const auto& p : partitions) widths.push_back(static_cast<std::int64_t>(p.width()));
  // Each sub-model sends a label and a certainty.
  return account_volume(static_cast<int>(partitions.size()), 2, widths);
}

void record_meta_run(const MetaRun& run, Transcript& t) {
  for (const auto& m : run.train_messages) t.record("train", m.unit_id, "meta", BoundaryMessage::from(m));
  for (const auto& m : run.score_messages) t.record("score", m.unit_id, "meta", BoundaryMessage::from(m));
  for (const auto& m : run.meta_outputs) t.record("result", "meta", "client", BoundaryMessage::from(m));
}

void record_pool(const Dataset& ds, const std::vector<UnitPartition>& partitions, Transcript& t) {
  for (std::size_t r = 0; r < ds.rows(); ++r)
    for (const auto& p : partitions) {
      if (!p.coverage[r]) continue;
      std::vector<std::pair<std::string, double>> cells;
      for (auto c : p.column_indices)
        if (ds.observed(r, c)) cells.emplace_back(ds.columns[c].id.str(), ds.at(r, c));
      if (!cells.empty()) t.record("pool", p.unit_id, "pool", BoundaryMessage::raw_row(ds.items[r], p.unit_id, cells));
    }
}

}  // namespace

const EvaluationReport& ScenarioReport::model(const std::string& name) const {
  for (const auto& m : models)
    if (m.model == name) return m;
  throw DataError("scenario " + std::to_string(scenario) + " has no model '" + name + "'");
}

const EvaluationReport& ScenarioReport::best_sub() const {
  const EvaluationReport* best = nullptr;
  for (const auto& m : models) {
    if (m.model == "meta" || m.model == "complete") continue;
    if (!best || m.metrics.mcc > best->metrics.mcc) best = &m;
  }
  if (!best) throw DataError("scenario " + std::to_string(scenario) + " has no unit models");
  return *best;
}

ScenarioReport run_scenario(const Dataset& ds, const std::vector<UnitPartition>& partitions, int scenario,
                            const ScenarioConfig& config) {
  if (scenario < 1 || scenario > 3) throw DataError("scenario must be 1, 2 or 3");
  if (partitions.empty()) throw DataError("no unit partitions");
  ScenarioReport out;
  out.scenario = scenario;
  out.volume = volume_for(partitions);

  if (scenario == 1) {
    for (const auto& p : partitions) {
      auto run = nested_cv_complete(ds, config.grid, config.plan, p.column_indices, p.unit_id);
      out.models.push_back(std::move(run.report));
      if (out.folds.empty()) out.folds = std::move(run.folds);
    }
  } else if (scenario == 2) {
    auto run = nested_cv_meta(ds, partitions, config.grid, config.plan);
    record_meta_run(run, out.transcript);
    out.models = std::move(run.subs);
    out.models.push_back(std::move(run.meta));
    out.folds = std::move(run.folds);
  } else {
    auto run = nested_cv_complete(ds, config.grid, config.plan);
    record_pool(ds, partitions, out.transcript);
    out.models.push_back(std::move(run.report));
    out.folds = std::move(run.folds);
  }

  auto entries = out.transcript.entries();
  out.traffic = measure_traffic(entries);
  out.audit = audit_confidentiality(entries, feature_names(ds), RawValueIndex::build(ds, partitions));
  return out;
}

std::vector<double> column_sigmas(const Dataset& ds) {
  std::vector<double> sigma(ds.cols(), 0.0);
  for (std::size_t c = 0; c < ds.cols(); ++c) {
    double n = 0, mean = 0, m2 = 0;
    for (std::size_t r = 0; r < ds.rows(); ++r) {
      if (!ds.observed(r, c)) continue;
      double x = ds.at(r, c);
      n += 1;
      double d = x - mean;
      mean += d / n;
      m2 += d * (x - mean);
    }
    if (n >= 2) sigma[c] = std::sqrt(m2 / (n - 1));
  }
  return sigma;
}

Dataset add_noise(const Dataset& ds, double lambda, std::uint64_t seed) {
  if (!(lambda >= 0.0) || !std::isfinite(lambda)) throw DataError("noise level must be finite and non-negative");
  Dataset out = ds;
  if (lambda == 0.0) return out;
  auto sigma = column_sigmas(ds);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> eps(0.0, 1.0);
  for (std::size_t r = 0; r < ds.rows(); ++r)
    for (std::size_t c = 0; c < ds.cols(); ++c) {
      if (ds.columns[c].kind != ColumnKind::numeric || !ds.observed(r, c)) continue;
      out.values[r * ds.cols() + c] = ds.at(r, c) + lambda * sigma[c] * eps(rng);
    }
  return out;
}

std::vector<double> default_lambdas() {
  std::vector<double> l;
  for (int i = 0; i <= 10; ++i) l.push_back(i / 10.0);
  return l;
}

NoiseSweepResult noising_sweep(const Dataset& ds, const ParamGrid& grid, const std::vector<double>& lambdas,
                               const CvPlan& plan, std::uint64_t noise_seed) {
  if (lambdas.empty()) throw DataError("no noise levels given");
  NoiseSweepResult res;
  res.lambdas = lambdas;
  res.sigmas = column_sigmas(ds);
  res.reports.resize(lambdas.size());
  parallel_for(lambdas.size(), [&](std::size_t i) {
    auto noised = add_noise(ds, lambdas[i], noise_seed);
    res.reports[i] = nested_cv_complete(noised, grid, plan).report;
  });
  for (const auto& r : res.reports) res.mcc.push_back(r.metrics.mcc);
  return res;
}

PriceOfPrivacy price_of_privacy(double mcc_meta, double mcc_complete) {
  PriceOfPrivacy p;
  if (mcc_complete > 0.0) p.relative_gap = (mcc_complete - mcc_meta) / mcc_complete;
  if (mcc_meta > 0.0) p.ratio_minus_one = mcc_complete / mcc_meta - 1.0;
  return p;
}

PriceOfPrivacy price_of_privacy(const ScenarioReport& scenario2, const ScenarioReport& scenario3) {
  return price_of_privacy(scenario2.model("meta").metrics.mcc, scenario3.model("complete").metrics.mcc);
}

}  // namespace metastack
