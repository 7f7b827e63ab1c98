#pragma once

// Run configuration, data preparation and report emission shared by the
// command-line tool, the acceptance suite and the Python module.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "metastack/baselines.hpp"

namespace metastack {

struct RunConfig {
  std::string csv;       // numeric data file; empty selects the generator
  std::string date_csv;  // optional date file joined on Id
  std::string synth = "default";
  std::optional<double> marker;  // unset: derived from the data
  bool dates_per_unit = true;
  std::string grid = "25,50x10,25";
  int outer_folds = 3;
  int inner_folds = 2;
  int meta_folds = 3;
  std::uint64_t seed = 7;
  std::vector<int> scenarios{1, 2, 3};
  std::vector<double> lambdas = default_lambdas();
  std::vector<std::string> classes{"no scrap", "scrap"};
  std::string out = "metastack-out";

  void validate() const;  // throws DataError
  CvPlan plan() const;
  ParamGrid param_grid() const;
  /// Sorted-key JSON; from_json(to_json()) reproduces the config.
  std::string to_json() const;
  /// Missing keys keep their defaults; unknown keys are rejected.
  static RunConfig from_json(const std::string& text);
};

struct PreparedData {
  Dataset dataset;  // dates compressed, marker imputed
  std::vector<UnitPartition> partitions;
  std::string source;
  double marker = 0.0;
  std::size_t missing_cells = 0;  // before imputation
};

/// Loads or generates the data, compresses date columns and imputes the
/// marker. The generator seed is the config seed unless the synthetic spec
/// names its own.
PreparedData prepare_data(const RunConfig& config);

struct CompareResult {
  RunConfig config;
  std::string source;
  std::size_t items = 0;
  std::size_t columns = 0;
  double marker = 0.0;
  std::size_t missing_cells = 0;
  std::vector<std::string> unit_ids;
  std::vector<std::size_t> unit_widths;
  std::vector<double> visit_shares;
  std::vector<ScenarioReport> scenarios;  // config order
  std::optional<PriceOfPrivacy> price;    // when scenarios 2 and 3 both ran

  const ScenarioReport* find(int scenario) const;
};

CompareResult run_compare(const RunConfig& config, const PreparedData& data);

/// Machine-readable form; every figure of the text report comes from it.
std::string compare_report_json(const CompareResult& result);
std::string compare_report_text(const CompareResult& result);
std::string models_csv(const CompareResult& result);
std::string visit_shares_csv(const std::vector<std::string>& unit_ids, const std::vector<double>& shares);
std::string visit_shares_gnuplot(const std::string& csv_name);

/// report.txt, report.json, models.csv, visit_shares.csv/.gp, config.json,
/// folds_scenario<N>.csv and transcript_scenario<N>.ndjson.
void write_compare_outputs(const CompareResult& result, const std::filesystem::path& dir);

struct SweepReport {
  RunConfig config;
  std::string source;
  NoiseSweepResult sweep;
  double spearman = 0.0;  // between lambda and MCC
};

SweepReport run_noise_sweep(const RunConfig& config, const PreparedData& data);
std::string sweep_report_json(const SweepReport& report);
std::string sweep_report_text(const SweepReport& report);
std::string sweep_csv(const SweepReport& report);
std::string sweep_gnuplot(const std::string& csv_name);
/// noise_sweep.txt, noise_sweep.json, noise_sweep.csv/.gp, config.json.
void write_sweep_outputs(const SweepReport& report, const std::filesystem::path& dir);

/// Most frequent (trees, depth) over folds; ties go to the earliest fold.
std::pair<int, int> modal_params(const std::vector<std::pair<int, int>>& fold_params);

void write_text_file(const std::filesystem::path& path, const std::string& text);

}  // namespace metastack
