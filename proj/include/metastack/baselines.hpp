#pragma once

// The three comparison scenarios (isolated units, prediction exchange,
// shared data pool) and the additive-noise baseline.

#include <optional>
#include <string>
#include <vector>

#include "metastack/stacking.hpp"
#include "metastack/transport.hpp"

namespace metastack {

struct ScenarioConfig {
  ParamGrid grid;
  CvPlan plan;
};

struct ScenarioReport {
  int scenario = 0;
  /// Scenario 1: one entry per unit. Scenario 2: per unit, then "meta".
  /// Scenario 3: "complete" only.
  std::vector<EvaluationReport> models;
  VolumeAccount volume;
  Transcript transcript;
  TrafficReport traffic;
  AuditVerdict audit;
  std::vector<FoldRecord> folds;

  /// Throws DataError when the model is absent.
  const EvaluationReport& model(const std::string& name) const;
  /// Highest-MCC unit entry (scenarios 1 and 2).
  const EvaluationReport& best_sub() const;
};

/// Scenario 1 evaluates each unit on its own columns over every item with
/// the shared-pool protocol and exchanges nothing. Scenario 2 runs the
/// two-stage protocol and records every sub- and meta-prediction. Scenario 3
/// runs the shared-pool protocol on all columns and records the raw rows
/// each unit contributes. Every transcript is audited.
ScenarioReport run_scenario(const Dataset& dataset, const std::vector<UnitPartition>& partitions, int scenario,
                            const ScenarioConfig& config);

/// Per-column sample standard deviation over observed cells (0 with fewer
/// than two).
std::vector<double> column_sigmas(const Dataset& dataset);

/// x + lambda * sigma_j * eps on every observed numeric cell, eps standard
/// normal drawn in row-major order from `seed`. Marker and missing cells are
/// untouched; lambda = 0 returns an identical copy.
Dataset add_noise(const Dataset& dataset, double lambda, std::uint64_t seed);

struct NoiseSweepResult {
  std::vector<double> lambdas;
  std::vector<double> mcc;
  std::vector<double> sigmas;
  std::vector<EvaluationReport> reports;
};

/// 0.0, 0.1, ..., 1.0
std::vector<double> default_lambdas();

/// Shared-pool protocol on a noised copy per lambda. All points share the
/// noise seed and the plan, so lambda = 0 reproduces the un-noised run.
NoiseSweepResult noising_sweep(const Dataset& dataset, const ParamGrid& grid, const std::vector<double>& lambdas,
                               const CvPlan& plan, std::uint64_t noise_seed);

struct PriceOfPrivacy {
  std::optional<double> relative_gap;  // (mcc3 - mcc2) / mcc3, unset when mcc3 <= 0
  std::optional<double> ratio_minus_one;  // mcc3 / mcc2 - 1, unset when mcc2 <= 0
};

PriceOfPrivacy price_of_privacy(double mcc_meta, double mcc_complete);
PriceOfPrivacy price_of_privacy(const ScenarioReport& scenario2, const ScenarioReport& scenario3);

}  // namespace metastack
