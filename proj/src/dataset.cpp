#include "metastack/dataset.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <map>
#include <sstream>
#include <unordered_map>

namespace metastack {

namespace {

bool parse_int(std::string_view text, int& out) {
  if (text.empty()) return false;
  auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), out);
  return ec == std::errc() && ptr == text.data() + text.size() && out >= 0;
}

std::vector<std::string_view> split_csv_line(std::string_view line, std::string& scratch) {
  std::vector<std::string_view> fields;
  if (line.find('"') == std::string_view::npos) {
    std::size_t start = 0;
    for (;;) {
      std::size_t comma = line.find(',', start);
      if (comma == std::string_view::npos) {
        fields.push_back(line.substr(start));
        break;
      }
      fields.push_back(line.substr(start, comma - start));
      start = comma + 1;
    }
    return fields;
  }
  // Quoted fields: unescape into scratch, then slice.
  scratch.clear();
  scratch.reserve(line.size());
  std::vector<std::pair<std::size_t, std::size_t>> spans;
  std::size_t begin = 0;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    char ch = line[i];
    if (quoted) {
      if (ch == '"' && i + 1 < line.size() && line[i + 1] == '"') {
        scratch.push_back('"');
        ++i;
      } else if (ch == '"') {
        quoted = false;
      } else {
        scratch.push_back(ch);
      }
    } else if (ch == '"') {
      quoted = true;
    } else if (ch == ',') {
      spans.emplace_back(begin, scratch.size() - begin);
      begin = scratch.size();
    } else {
      scratch.push_back(ch);
    }
  }
  if (quoted) throw DataError("unterminated quote in CSV line");
  spans.emplace_back(begin, scratch.size() - begin);
  for (auto [b, n] : spans) fields.emplace_back(scratch.data() + b, n);
  return fields;
}

std::string_view trim_cr(std::string_view line) {
  if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
  return line;
}

}  // namespace

// ---------------------------------------------------------------------------
// FeatureId

std::string FeatureId::str() const {
  std::string prefix = unit == kGlobalUnit ? "G" : "L" + std::to_string(unit);
  if (kind == Kind::date_summary) return prefix + "_T" + std::to_string(number);
  return prefix + "_S" + std::to_string(station) + "_" + static_cast<char>(kind) +
         std::to_string(number);
}

std::optional<FeatureId> FeatureId::try_parse(std::string_view text) {
  FeatureId id;
  std::size_t us = text.find('_');
  if (us == std::string_view::npos) return std::nullopt;
  std::string_view head = text.substr(0, us);
  std::string_view rest = text.substr(us + 1);
  if (head == "G") {
    id.unit = kGlobalUnit;
  } else if (head.size() >= 2 && head[0] == 'L' && parse_int(head.substr(1), id.unit)) {
  } else {
    return std::nullopt;
  }
  auto canonical = [&](const FeatureId& parsed) -> std::optional<FeatureId> {
    // Reject leading zeros and similar non-canonical spellings.
    if (parsed.str() != text) return std::nullopt;
    return parsed;
  };
  if (rest.size() >= 2 && rest[0] == 'T') {
    id.kind = Kind::date_summary;
    id.station = 0;
    if (!parse_int(rest.substr(1), id.number)) return std::nullopt;
    return canonical(id);
  }
  if (id.unit == kGlobalUnit) return std::nullopt;
  if (rest.size() < 2 || rest[0] != 'S') return std::nullopt;
  std::size_t us2 = rest.find('_');
  if (us2 == std::string_view::npos) return std::nullopt;
  if (!parse_int(rest.substr(1, us2 - 1), id.station)) return std::nullopt;
  std::string_view tail = rest.substr(us2 + 1);
  if (tail.size() < 2) return std::nullopt;
  if (tail[0] == 'F') {
    id.kind = Kind::numeric;
  } else if (tail[0] == 'D') {
    id.kind = Kind::date;
  } else {
    return std::nullopt;
  }
  if (!parse_int(tail.substr(1), id.number)) return std::nullopt;
  return canonical(id);
}

FeatureId FeatureId::parse(std::string_view text) {
  auto id = try_parse(text);
  if (!id) throw DataError("not a feature id: '" + std::string(text) + "'");
  return *id;
}

std::string unit_name(int unit) {
  return unit == FeatureId::kGlobalUnit ? "G" : "L" + std::to_string(unit);
}

// ---------------------------------------------------------------------------
// Dataset

std::size_t Dataset::missing_count() const {
  std::size_t n = 0;
  for (std::size_t r = 0; r < rows(); ++r)
    for (std::size_t c = 0; c < cols(); ++c)
      if (!observed(r, c)) ++n;
  return n;
}

void Dataset::validate() const {
  if (classes.size() < 2) throw DataError("dataset needs at least two classes");
  if (values.size() != rows() * cols()) throw DataError("value grid does not match dimensions");
  if (!imputed.empty() && imputed.size() != values.size())
    throw DataError("imputation mask does not match dimensions");
  if (labels.size() != rows()) throw DataError("label count does not match item count");
  for (int l : labels)
    if (l < 0 || static_cast<std::size_t>(l) >= classes.size())
      throw DataError("label index out of range");
}

std::size_t UnitPartition::covered_count() const {
  return static_cast<std::size_t>(std::count(coverage.begin(), coverage.end(), true));
}

// ---------------------------------------------------------------------------
// CSV

Dataset parse_csv(std::string_view text, const SchemaOptions& options) {
  Dataset ds;
  ds.classes = options.class_names;
  std::string scratch;

  std::size_t pos = 0;
  auto next_line = [&](std::string_view& line) {
    if (pos >= text.size()) return false;
    std::size_t nl = text.find('\n', pos);
    if (nl == std::string_view::npos) nl = text.size();
    line = trim_cr(text.substr(pos, nl - pos));
    pos = nl + 1;
    return true;
  };

  std::string_view header;
  if (!next_line(header) || header.empty()) throw DataError("CSV has no header row");
  auto names = split_csv_line(header, scratch);
  std::vector<std::string> owned(names.begin(), names.end());

  std::ptrdiff_t id_col = -1, response_col = -1;
  std::vector<std::ptrdiff_t> feature_slot(owned.size(), -1);
  std::set<std::string> seen;
  for (std::size_t i = 0; i < owned.size(); ++i) {
    const std::string& name = owned[i];
    if (!seen.insert(name).second) throw DataError("malformed header: duplicate column '" + name + "'");
    if (name == "Id") {
      id_col = static_cast<std::ptrdiff_t>(i);
    } else if (name == "Response") {
      response_col = static_cast<std::ptrdiff_t>(i);
    } else {
      auto id = FeatureId::try_parse(name);
      if (!id) throw DataError("malformed header: unrecognized column '" + name + "'");
      Column col{*id, ColumnKind::numeric};
      if (options.date_columns.count(name) ||
          (options.dates_by_name && id->kind == FeatureId::Kind::date))
        col.kind = ColumnKind::date;
      feature_slot[i] = static_cast<std::ptrdiff_t>(ds.columns.size());
      ds.columns.push_back(col);
    }
  }
  if (id_col < 0) throw DataError("malformed header: missing 'Id' column");
  if (options.require_response && response_col < 0)
    throw DataError("malformed header: missing 'Response' column");

  std::string_view line;
  std::size_t line_no = 1;
  while (next_line(line)) {
    ++line_no;
    if (line.empty()) continue;
    auto fields = split_csv_line(line, scratch);
    if (fields.size() != owned.size())
      throw DataError("line " + std::to_string(line_no) + ": expected " +
                      std::to_string(owned.size()) + " fields, got " + std::to_string(fields.size()));
    ds.items.emplace_back(fields[static_cast<std::size_t>(id_col)]);
    std::size_t base = ds.values.size();
    ds.values.resize(base + ds.columns.size(), kMissing);
    for (std::size_t i = 0; i < fields.size(); ++i) {
      if (feature_slot[i] < 0 || fields[i].empty()) continue;
      double v;
      if (!parse_double(fields[i], v) || !std::isfinite(v))
        throw DataError("line " + std::to_string(line_no) + ": non-numeric cell '" +
                        std::string(fields[i]) + "' in column " + owned[i]);
      ds.values[base + static_cast<std::size_t>(feature_slot[i])] = v;
    }
    int label = 0;
    if (response_col >= 0) {
      std::string_view cell = fields[static_cast<std::size_t>(response_col)];
      if (!parse_int(cell, label) || static_cast<std::size_t>(label) >= ds.classes.size())
        throw DataError("line " + std::to_string(line_no) + ": unknown label value '" +
                        std::string(cell) + "'");
    }
    ds.labels.push_back(label);
  }
  ds.validate();
  return ds;
}

Dataset load_csv(const std::filesystem::path& path, const SchemaOptions& options) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_csv(buf.str(), options);
}

std::string to_csv(const Dataset& ds) {
  std::string out = "Id";
  for (const auto& c : ds.columns) out += "," + c.id.str();
  out += ",Response\n";
  for (std::size_t r = 0; r < ds.rows(); ++r) {
    out += ds.items[r];
    for (std::size_t c = 0; c < ds.cols(); ++c) {
      out += ',';
      if (ds.observed(r, c)) out += format_double(ds.at(r, c));
    }
    out += ',' + std::to_string(ds.labels[r]) + '\n';
  }
  return out;
}

void write_csv(const Dataset& ds, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  out << to_csv(ds);
}

Dataset join_columns(const Dataset& base, const Dataset& extra) {
  std::unordered_map<std::string, std::size_t> row_of;
  for (std::size_t r = 0; r < extra.rows(); ++r) row_of.emplace(extra.items[r], r);
  Dataset out = base;
  out.columns.insert(out.columns.end(), extra.columns.begin(), extra.columns.end());
  std::size_t width = out.cols();
  out.values.assign(base.rows() * width, kMissing);
  if (!base.imputed.empty() || !extra.imputed.empty()) out.imputed.assign(out.values.size(), 0);
  for (std::size_t r = 0; r < base.rows(); ++r) {
    for (std::size_t c = 0; c < base.cols(); ++c) {
      out.values[r * width + c] = base.at(r, c);
      if (!base.imputed.empty()) out.imputed[r * width + c] = base.imputed[r * base.cols() + c];
    }
    auto it = row_of.find(base.items[r]);
    if (it == row_of.end()) continue;
    for (std::size_t c = 0; c < extra.cols(); ++c) {
      std::size_t dst = r * width + base.cols() + c;
      out.values[dst] = extra.at(it->second, c);
      if (!extra.imputed.empty()) out.imputed[dst] = extra.imputed[it->second * extra.cols() + c];
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Partitioning

std::vector<UnitPartition> partition_by_unit(const Dataset& ds) {
  std::map<int, std::vector<std::size_t>> by_unit;
  for (std::size_t c = 0; c < ds.cols(); ++c) by_unit[ds.columns[c].id.unit].push_back(c);
  std::vector<UnitPartition> parts;
  for (auto& [unit, cols] : by_unit) {
    UnitPartition p;
    p.unit = unit;
    p.unit_id = unit_name(unit);
    p.column_indices = std::move(cols);
    p.coverage.assign(ds.rows(), false);
    for (std::size_t r = 0; r < ds.rows(); ++r)
      for (std::size_t c : p.column_indices)
        if (ds.observed(r, c)) {
          p.coverage[r] = true;
          break;
        }
    parts.push_back(std::move(p));
  }
  return parts;
}

std::vector<double> visit_shares(const std::vector<UnitPartition>& partitions) {
  std::vector<double> shares;
  for (const auto& p : partitions)
    shares.push_back(p.coverage.empty() ? 0.0
                                        : static_cast<double>(p.covered_count()) /
                                              static_cast<double>(p.coverage.size()));
  return shares;
}

// ---------------------------------------------------------------------------
// Imputation

double default_marker(const Dataset& ds) {
  double lo = std::numeric_limits<double>::infinity();
  double hi = -lo;
  for (std::size_t r = 0; r < ds.rows(); ++r)
    for (std::size_t c = 0; c < ds.cols(); ++c)
      if (ds.observed(r, c)) {
        lo = std::min(lo, ds.at(r, c));
        hi = std::max(hi, ds.at(r, c));
      }
  if (!std::isfinite(lo)) return -1.0;
  double range = hi - lo;
  // A constant dataset has zero range; any value below it will do.
  if (range == 0.0) range = 1.0;
  return std::floor(lo - 2.0 * range);
}

Dataset impute_marker(const Dataset& ds, const ImputationConfig& config) {
  if (!std::isfinite(config.marker)) throw DataError("marker must be finite");
  for (std::size_t c = 0; c < ds.cols(); ++c) {
    double lo = std::numeric_limits<double>::infinity();
    double hi = -lo;
    for (std::size_t r = 0; r < ds.rows(); ++r)
      if (ds.observed(r, c)) {
        lo = std::min(lo, ds.at(r, c));
        hi = std::max(hi, ds.at(r, c));
      }
    if (config.marker >= lo && config.marker <= hi)
      throw DataError("marker " + format_double(config.marker) + " lies inside the observed range of " +
                      ds.columns[c].id.str());
  }
  Dataset out = ds;
  if (out.imputed.empty()) out.imputed.assign(out.values.size(), 0);
  for (std::size_t i = 0; i < out.values.size(); ++i)
    if (std::isnan(out.values[i])) {
      out.values[i] = config.marker;
      out.imputed[i] = 1;
    }
  out.marker = config.marker;
  return out;
}

// ---------------------------------------------------------------------------
// Date compression

Dataset compress_dates(const Dataset& ds, bool per_unit, std::optional<double> marker) {
  std::vector<std::size_t> keep;
  std::map<int, std::vector<std::size_t>> scopes;
  for (std::size_t c = 0; c < ds.cols(); ++c) {
    if (ds.columns[c].kind == ColumnKind::date)
      scopes[per_unit ? ds.columns[c].id.unit : FeatureId::kGlobalUnit].push_back(c);
    else
      keep.push_back(c);
  }
  if (!marker && ds.marker) marker = ds.marker;
  double fill = marker ? *marker : kMissing;

  Dataset out;
  out.items = ds.items;
  out.labels = ds.labels;
  out.classes = ds.classes;
  out.marker = ds.marker;
  for (std::size_t c : keep) out.columns.push_back(ds.columns[c]);
  for (const auto& [unit, cols] : scopes)
    for (int k = 0; k < 4; ++k)
      out.columns.push_back({FeatureId{unit, 0, k, FeatureId::Kind::date_summary}, ColumnKind::numeric});

  std::size_t width = out.cols();
  out.values.assign(ds.rows() * width, kMissing);
  out.imputed.assign(out.values.size(), 0);
  bool any_synth = !ds.imputed.empty();
  for (std::size_t r = 0; r < ds.rows(); ++r) {
    std::size_t dst = r * width;
    for (std::size_t c : keep) {
      out.values[dst] = ds.at(r, c);
      if (!ds.imputed.empty()) out.imputed[dst] = ds.imputed[r * ds.cols() + c];
      ++dst;
    }
    for (const auto& [unit, cols] : scopes) {
      double lo = std::numeric_limits<double>::infinity();
      double hi = -lo;
      std::size_t count = 0;
      for (std::size_t c : cols)
        if (ds.observed(r, c)) {
          lo = std::min(lo, ds.at(r, c));
          hi = std::max(hi, ds.at(r, c));
          ++count;
        }
      if (count > 0) {
        out.values[dst] = lo;
        out.values[dst + 1] = hi;
        out.values[dst + 2] = hi - lo;
        out.values[dst + 3] = static_cast<double>(count);
      } else {
        out.values[dst] = out.values[dst + 1] = out.values[dst + 2] = fill;
        out.values[dst + 3] = 0.0;
        for (int k = 0; k < 4; ++k) out.imputed[dst + k] = 1;
        any_synth = true;
      }
      dst += 4;
    }
  }
  if (!any_synth) out.imputed.clear();
  return out;
}

// ---------------------------------------------------------------------------

std::vector<double> gather(const Dataset& ds, const std::vector<std::size_t>& rows,
                           const std::vector<std::size_t>& cols) {
  std::vector<double> out;
  out.reserve(rows.size() * cols.size());
  for (std::size_t r : rows)
    for (std::size_t c : cols) out.push_back(ds.at(r, c));
  return out;
}

std::vector<std::size_t> all_columns(const Dataset& ds) {
  std::vector<std::size_t> cols(ds.cols());
  for (std::size_t c = 0; c < cols.size(); ++c) cols[c] = c;
  return cols;
}

}  // namespace metastack
