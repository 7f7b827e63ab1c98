#pragma once

// Tabular core: feature naming, the sparse dataset, unit partitions, marker
// imputation, date compression and CSV ingestion.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "metastack/common.hpp"

namespace metastack {

/// Column name of the form L{unit}_S{station}_F{number}.
///
/// Raw date columns use the letter D (L0_S0_D1). Compressed date summaries
/// carry no station: L{unit}_T{k} per unit, or G_T{k} for the global scope
/// (unit == kGlobalUnit).
struct FeatureId {
  enum class Kind : char { numeric = 'F', date = 'D', date_summary = 'T' };
  static constexpr int kGlobalUnit = -1;

  int unit = 0;
  int station = 0;
  int number = 0;
  Kind kind = Kind::numeric;

  std::string str() const;
  static FeatureId parse(std::string_view text);  // throws DataError
  static std::optional<FeatureId> try_parse(std::string_view text);

  friend bool operator==(const FeatureId&, const FeatureId&) = default;
  friend auto operator<=>(const FeatureId&, const FeatureId&) = default;
};

/// "L{u}" for a line, "G" for the global scope.
std::string unit_name(int unit);

enum class ColumnKind { numeric, date };

struct Column {
  FeatureId id;
  ColumnKind kind = ColumnKind::numeric;
};

inline constexpr double kMissing = std::numeric_limits<double>::quiet_NaN();

/// Item x column grid of optional reals. Missing cells hold NaN. Once a
/// dataset has been imputed, `imputed` flags cells that were filled with the
/// marker (or otherwise synthesized), so pre-imputation missingness stays
/// recoverable.
struct Dataset {
  std::vector<std::string> items;
  std::vector<Column> columns;
  std::vector<double> values;  // row-major, items.size() * columns.size()
  std::vector<std::uint8_t> imputed;  // empty, or same shape as values
  std::vector<int> labels;
  std::vector<std::string> classes;
  std::optional<double> marker;

  std::size_t rows() const { return items.size(); }
  std::size_t cols() const { return columns.size(); }
  double at(std::size_t r, std::size_t c) const { return values[r * cols() + c]; }
  bool observed(std::size_t r, std::size_t c) const {
    std::size_t i = r * cols() + c;
    return !std::isnan(values[i]) && (imputed.empty() || imputed[i] == 0);
  }
  std::size_t missing_count() const;
  std::size_t class_count() const { return classes.size(); }

  /// Throws DataError when any structural invariant is broken.
  void validate() const;
};

/// Columns owned by one unit plus the per-item visit flag.
struct UnitPartition {
  std::string unit_id;
  int unit = 0;
  std::vector<std::size_t> column_indices;
  std::vector<bool> coverage;  // item visited this unit

  std::size_t width() const { return column_indices.size(); }
  std::size_t covered_count() const;
};

struct SchemaOptions {
  /// Column names that hold dates even if named with F.
  std::set<std::string> date_columns;
  /// Treat names with the D letter as date columns.
  bool dates_by_name = true;
  bool require_response = true;
  std::vector<std::string> class_names{"no scrap", "scrap"};
};

Dataset load_csv(const std::filesystem::path& path, const SchemaOptions& options = {});
Dataset parse_csv(std::string_view text, const SchemaOptions& options = {});
void write_csv(const Dataset& dataset, const std::filesystem::path& path);
std::string to_csv(const Dataset& dataset);

/// Appends the columns of `extra` (matched by item id) to `base`.
/// Items missing from `extra` get missing cells.
Dataset join_columns(const Dataset& base, const Dataset& extra);

std::vector<UnitPartition> partition_by_unit(const Dataset& dataset);

struct ImputationConfig {
  double marker = 0.0;
};

/// global_min - 2 * (global_max - global_min) over observed cells, rounded
/// down to an integer. Falls back to -1 when nothing is observed.
double default_marker(const Dataset& dataset);

Dataset impute_marker(const Dataset& dataset, const ImputationConfig& config);

/// Replaces date columns by (min, max, max - min, count) per scope. Items
/// without any populated date cell in a scope get (marker, marker, marker, 0);
/// if no marker is given the first three stay missing until imputation.
/// Those synthesized cells are not counted as observed.
Dataset compress_dates(const Dataset& dataset, bool per_unit,
                       std::optional<double> marker = std::nullopt);

/// Fraction of items whose coverage flag is set, per partition.
std::vector<double> visit_shares(const std::vector<UnitPartition>& partitions);

/// Dense copy of the selected rows and columns, row-major.
std::vector<double> gather(const Dataset& dataset, const std::vector<std::size_t>& rows,
                           const std::vector<std::size_t>& cols);

std::vector<std::size_t> all_columns(const Dataset& dataset);

}  // namespace metastack
