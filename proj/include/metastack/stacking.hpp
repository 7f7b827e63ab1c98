#pragma once

// Two-stage stacking: per-unit sub-models, their boundary predictions, the
// meta-feature aggregation, and the two nested cross-validation protocols.

#include <filesystem>
#include <string>
#include <vector>

#include "metastack/dataset.hpp"
#include "metastack/forest.hpp"
#include "metastack/metrics.hpp"

namespace metastack {

/// What a sub-unit sends across its boundary for one item.
struct SubPrediction {
  std::string part_id;
  std::string unit_id;
  std::string label;
  double certainty = 0.0;  // probability of the predicted class

  friend bool operator==(const SubPrediction&, const SubPrediction&) = default;
};

/// Final answer of the meta unit for one item.
struct MetaPrediction {
  std::string part_id;
  std::string label;
  double certainty = 0.0;

  friend bool operator==(const MetaPrediction&, const MetaPrediction&) = default;
};

inline constexpr double kAbsentCode = -1.0;

/// (label_code, certainty) per expected unit, in unit order. Units without a
/// message hold (kAbsentCode, marker).
struct MetaFeatureRow {
  std::string part_id;
  std::vector<double> values;

  friend bool operator==(const MetaFeatureRow&, const MetaFeatureRow&) = default;
};

struct CvPlan {
  int outer_folds = 3;
  int inner_folds = 2;
  int meta_folds = 3;
  bool stratified = true;
  std::uint64_t seed = 0;

  void validate() const;  // throws DataError
  /// One-line description written into report headers.
  std::string topology(bool meta) const;
};

/// A trained sub-model together with the columns it reads.
struct UnitModel {
  std::string unit_id;
  std::vector<std::size_t> columns;  // indices into the training dataset
  std::vector<std::string> feature_ids;
  ForestModel model;
};

/// Builds the boundary message from a class distribution.
SubPrediction make_subprediction(const std::string& part_id, const std::string& unit_id,
                                 std::span<const double> proba, const std::vector<std::string>& classes);

/// Trains one model per partition on the given rows, restricted to rows the
/// unit covers. Units with fewer than `min_covered` such rows, or with a
/// single class among them, are skipped with a warning.
std::vector<UnitModel> train_subunits(const Dataset& dataset, const std::vector<UnitPartition>& partitions,
                                      const std::vector<std::size_t>& rows,
                                      const std::vector<ForestParams>& params_per_unit, std::size_t min_covered,
                                      std::vector<std::string>* warnings = nullptr);

/// One SubPrediction per (item, covered unit), item-major then model order.
/// Throws DataError when a model's width differs from its partition.
std::vector<SubPrediction> emit_subpredictions(const std::vector<UnitModel>& models,
                                               const std::vector<UnitPartition>& partitions, const Dataset& dataset,
                                               const std::vector<std::size_t>& rows);

/// Groups messages by part. With `expected_parts` empty, rows follow the
/// order in which parts first appear. A repeated (part, unit) message
/// replaces the earlier one and records a warning. Unknown units or labels
/// throw DataError.
std::vector<MetaFeatureRow> aggregate(const std::vector<SubPrediction>& messages,
                                      const std::vector<std::string>& expected_units,
                                      const std::vector<std::string>& classes, double marker,
                                      const std::vector<std::string>& expected_parts = {},
                                      std::vector<std::string>* warnings = nullptr);

/// Where one item sat within one evaluation path. Roles: "test" (outer test),
/// "A" (fitted a sub-model), "B" (fitted the meta model), "train" (complete
/// protocol), "A+B" (both; a leak), "unused".
struct FoldRecord {
  std::string item;
  int outer = 0;
  std::string role;
  int inner = -1;  // grid-search fold for the complete protocol
};

/// Problems found in fold bookkeeping; empty means leak-free.
std::vector<std::string> check_fold_records(const std::vector<FoldRecord>& records, std::size_t n_items,
                                            int outer_folds);

/// Text file, one line per record: item, outer fold, role, inner fold.
void write_fold_audit(const std::vector<FoldRecord>& records, const std::filesystem::path& path);

struct EvaluationReport {
  std::string model;     // "complete", "meta", or a unit id
  std::string protocol;  // "complete" or "meta"
  std::string topology;
  ConfusionMatrix confusion;
  MetricSuite metrics;
  std::vector<double> fold_mcc;
  std::vector<std::pair<int, int>> fold_params;  // (n_estimators, max_depth) chosen per outer fold
  std::vector<int> predictions;                  // per dataset row; -1 when not scored
  std::size_t items_scored = 0;
  std::vector<std::string> warnings;
};

struct CompleteRun {
  EvaluationReport report;
  std::vector<FoldRecord> folds;
};

struct MetaRun {
  EvaluationReport meta;
  std::vector<EvaluationReport> subs;  // partition order
  std::vector<FoldRecord> folds;
  std::vector<SubPrediction> train_messages;  // A-models predicting fold B
  std::vector<SubPrediction> score_messages;  // A-models predicting the outer test fold
  std::vector<MetaPrediction> meta_outputs;
};

/// Outer fold per item shared by both protocols.
std::vector<int> outer_folds(const Dataset& dataset, const CvPlan& plan);

/// Shared-pool protocol on the given columns (all columns when empty).
/// Throws ExperimentError when an outer fold holds a single class.
CompleteRun nested_cv_complete(const Dataset& dataset, const ParamGrid& grid, const CvPlan& plan,
                               const std::vector<std::size_t>& columns = {}, const std::string& model = "complete");

/// Two-stage protocol: sub-models on fold A, meta model on fold B, scored on
/// the outer test fold.
MetaRun nested_cv_meta(const Dataset& dataset, const std::vector<UnitPartition>& partitions, const ParamGrid& grid,
                       const CvPlan& plan);

/// Deployable stack: sub-models fitted on fold A of the whole dataset and
/// the meta model on fold B.
struct StackModel {
  std::vector<std::string> classes;
  double marker = 0.0;
  std::vector<std::string> expected_units;
  std::vector<UnitModel> units;
  ForestModel meta;

  MetaPrediction predict_row(const MetaFeatureRow& row) const;
  /// In-process pipeline: emit, aggregate, meta-predict.
  std::vector<MetaPrediction> predict(const Dataset& dataset, const std::vector<UnitPartition>& partitions,
                                      const std::vector<std::size_t>& rows) const;

  /// Writes meta.json plus one unit_<id>.json per sub-model.
  void save(const std::filesystem::path& dir) const;
  static StackModel load(const std::filesystem::path& dir);
};

StackModel fit_stack(const Dataset& dataset, const std::vector<UnitPartition>& partitions, const ParamGrid& grid,
                     const CvPlan& plan, std::vector<std::string>* warnings = nullptr);

/// Single unit artifact, as consumed by a sub-unit service.
struct UnitArtifact {
  std::string unit_id;
  std::vector<std::string> feature_ids;
  double marker = 0.0;
  ForestModel model;
};

std::string unit_artifact_json(const UnitModel& unit, double marker);
UnitArtifact parse_unit_artifact(const std::string& text);

}  // namespace metastack
