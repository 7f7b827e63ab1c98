#include "metastack/run.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <map>
#include <set>
#include <sstream>

#include "json.hpp"
#include "metastack/common.hpp"
#include "metastack/synth.hpp"

namespace metastack {

namespace {

using json = nlohmann::json;

std::string fixed(double v, int decimals = 4) {
  std::ostringstream s;
  s << std::fixed << std::setprecision(decimals) << v;
  return s.str();
}

std::string pct(double v) { return fixed(100.0 * v, 2) + "%"; }

template <class T>
std::string join(const std::vector<T>& items, const std::string& sep = ",") {
  std::ostringstream s;
  for (std::size_t i = 0; i < items.size(); ++i) {
    if (i) s << sep;
    if constexpr (std::is_same_v<T, double>)
      s << format_double(items[i]);
    else
      s << items[i];
  }
  return s.str();
}

// The output directory is left out so reports written to different places
// compare equal.
json config_json(const RunConfig& c) {
  auto j = json::parse(c.to_json());
  j.erase("out");
  return j;
}

json model_json(const EvaluationReport& r) {
  json m;
  m["model"] = r.model;
  m["protocol"] = r.protocol;
  m["topology"] = r.topology;
  m["mcc"] = r.metrics.mcc;
  m["accuracy"] = r.metrics.accuracy;
  m["f1_weighted"] = r.metrics.f1_weighted;
  m["precision_weighted"] = r.metrics.precision_weighted;
  m["recall_weighted"] = r.metrics.recall_weighted;
  m["cohens_kappa"] = r.metrics.cohens_kappa;
  json cm = json::array();
  for (std::size_t a = 0; a < r.confusion.size(); ++a) {
    json row = json::array();
    for (std::size_t p = 0; p < r.confusion.size(); ++p) row.push_back(r.confusion(a, p));
    cm.push_back(row);
  }
  m["confusion"] = cm;
  m["fold_mcc"] = r.fold_mcc;
  json fp = json::array();
  for (auto [e, d] : r.fold_params) fp.push_back({e, d});
  m["fold_params"] = fp;
  auto [e, d] = modal_params(r.fold_params);
  m["n_estimators"] = e;
  m["max_depth"] = d;
  m["items_scored"] = r.items_scored;
  m["warnings"] = r.warnings;
  return m;
}

json totals_json(const TrafficTotals& t) {
  return {{"messages", t.messages}, {"bytes", t.bytes}, {"value_fields", t.value_fields}};
}

double analytic_volume(const VolumeAccount& v, int scenario) {
  return scenario == 1 ? v.scenario1 : scenario == 2 ? v.scenario2 : v.scenario3;
}

json scenario_json(const ScenarioReport& s) {
  json j;
  j["scenario"] = s.scenario;
  json models = json::array();
  for (const auto& m : s.models) models.push_back(model_json(m));
  j["models"] = models;
  const auto& v = s.volume;
  j["volume"]["analytic"] = {{"k", v.k},
                             {"m", v.m},
                             {"n_i", v.n_i},
                             {"s", v.s},
                             {"sum_n", v.sum_n},
                             {"volume", analytic_volume(v, s.scenario)},
                             {"warnings", v.warnings}};
  j["volume"]["measured"] = totals_json(s.traffic.total);
  json channels = json::object();
  for (const auto& [name, t] : s.traffic.by_channel) channels[name] = totals_json(t);
  j["volume"]["measured"]["by_channel"] = channels;
  j["audit"] = {{"pass", s.audit.pass},
                {"messages_scanned", s.audit.messages_scanned},
                {"violations", s.audit.violations.size()},
                {"flagged_messages", s.audit.flagged_messages().size()}};
  j["fold_audit"] = "folds_scenario" + std::to_string(s.scenario) + ".csv";
  j["transcript"] = s.scenario == 1 ? "" : "transcript_scenario" + std::to_string(s.scenario) + ".ndjson";
  return j;
}

json optional_number(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }

std::string audit_line(const json& audit) {
  std::ostringstream s;
  auto violations = audit["violations"].get<std::size_t>();
  if (audit["pass"].get<bool>())
    s << "PASS, 0 violations (" << audit["messages_scanned"].get<std::size_t>() << " messages)";
  else
    s << "FAIL, " << violations << " violations in " << audit["flagged_messages"].get<std::size_t>() << " of "
      << audit["messages_scanned"].get<std::size_t>() << " messages";
  return s.str();
}

std::string pad(const std::string& s, std::size_t width) {
  return s.size() >= width ? s + " " : s + std::string(width - s.size(), ' ');
}

}  // namespace

// ---------------------------------------------------------------------------
// Configuration

void RunConfig::validate() const {
  plan().validate();
  param_grid();
  if (scenarios.empty()) throw DataError("no scenarios selected");
  for (int s : scenarios)
    if (s < 1 || s > 3) throw DataError("scenarios must be 1, 2 or 3");
  if (lambdas.empty()) throw DataError("no noise levels given");
  for (double l : lambdas)
    if (!(l >= 0.0) || !std::isfinite(l)) throw DataError("noise levels must be finite and non-negative");
  if (classes.size() < 2) throw DataError("need at least two class names");
}

CvPlan RunConfig::plan() const {
  CvPlan p;
  p.outer_folds = outer_folds;
  p.inner_folds = inner_folds;
  p.meta_folds = meta_folds;
  p.seed = seed;
  return p;
}

ParamGrid RunConfig::param_grid() const { return grid == "paper" ? ParamGrid{} : ParamGrid::parse(grid); }

std::string RunConfig::to_json() const {
  json j;
  j["csv"] = csv;
  j["date_csv"] = date_csv;
  j["synth"] = synth;
  j["marker"] = marker ? json(*marker) : json(nullptr);
  j["dates_per_unit"] = dates_per_unit;
  j["grid"] = grid;
  j["outer_folds"] = outer_folds;
  j["inner_folds"] = inner_folds;
  j["meta_folds"] = meta_folds;
  j["seed"] = seed;
  j["scenarios"] = scenarios;
  j["lambdas"] = lambdas;
  j["classes"] = classes;
  j["out"] = out;
  return j.dump();
}

RunConfig RunConfig::from_json(const std::string& text) {
  static const std::set<std::string> known{"csv",         "date_csv",   "synth", "marker",    "dates_per_unit",
                                           "grid",        "outer_folds", "inner_folds", "meta_folds", "seed",
                                           "scenarios",   "lambdas",    "classes", "out"};
  try {
    auto j = json::parse(text);
    if (!j.is_object()) throw DataError("run config must be a JSON object");
    for (auto it = j.begin(); it != j.end(); ++it)
      if (!known.count(it.key())) throw DataError("unknown run config key '" + it.key() + "'");
    RunConfig c;
    c.csv = j.value("csv", c.csv);
    c.date_csv = j.value("date_csv", c.date_csv);
    c.synth = j.value("synth", c.synth);
    if (j.contains("marker") && !j["marker"].is_null()) c.marker = j["marker"].get<double>();
    c.dates_per_unit = j.value("dates_per_unit", c.dates_per_unit);
    c.grid = j.value("grid", c.grid);
    c.outer_folds = j.value("outer_folds", c.outer_folds);
    c.inner_folds = j.value("inner_folds", c.inner_folds);
    c.meta_folds = j.value("meta_folds", c.meta_folds);
    c.seed = j.value("seed", c.seed);
    c.scenarios = j.value("scenarios", c.scenarios);
    c.lambdas = j.value("lambdas", c.lambdas);
    c.classes = j.value("classes", c.classes);
    c.out = j.value("out", c.out);
    return c;
  } catch (const json::exception& e) {
    throw DataError(std::string("malformed run config: ") + e.what());
  }
}

// ---------------------------------------------------------------------------
// Data

PreparedData prepare_data(const RunConfig& config) {
  PreparedData out;
  Dataset raw;
  if (!config.csv.empty()) {
    SchemaOptions options;
    options.class_names = config.classes;
    raw = load_csv(config.csv, options);
    out.source = config.csv;
    if (!config.date_csv.empty()) {
      SchemaOptions dates;
      dates.require_response = false;
      dates.class_names = config.classes;
      raw = join_columns(raw, load_csv(config.date_csv, dates));
      out.source += " + " + config.date_csv;
    }
  } else {
    auto spec = parse_synth_spec(config.synth);
    if (config.synth.find("seed=") == std::string::npos) spec.seed = config.seed;
    raw = generate_synthetic(spec);
    out.source = "synthetic " + config.synth + " (generator seed " + std::to_string(spec.seed) + ")";
  }
  bool has_dates = false;
  for (const auto& c : raw.columns) has_dates = has_dates || c.kind == ColumnKind::date;
  if (has_dates) raw = compress_dates(raw, config.dates_per_unit);
  for (double v : raw.values) out.missing_cells += std::isnan(v) ? 1 : 0;
  out.marker = config.marker.value_or(default_marker(raw));
  out.dataset = impute_marker(raw, {out.marker});
  out.partitions = partition_by_unit(out.dataset);
  return out;
}

// ---------------------------------------------------------------------------
// Comparison

const ScenarioReport* CompareResult::find(int scenario) const {
  for (const auto& s : scenarios)
    if (s.scenario == scenario) return &s;
  return nullptr;
}

CompareResult run_compare(const RunConfig& config, const PreparedData& data) {
  config.validate();
  CompareResult r;
  r.config = config;
  r.source = data.source;
  r.items = data.dataset.rows();
  r.columns = data.dataset.cols();
  r.marker = data.marker;
  r.missing_cells = data.missing_cells;
  for (const auto& p : data.partitions) {
    r.unit_ids.push_back(p.unit_id);
    r.unit_widths.push_back(p.width());
  }
  r.visit_shares = visit_shares(data.partitions);
  ScenarioConfig sc{config.param_grid(), config.plan()};
  for (int s : config.scenarios) r.scenarios.push_back(run_scenario(data.dataset, data.partitions, s, sc));
  if (r.find(2) && r.find(3)) r.price = price_of_privacy(*r.find(2), *r.find(3));
  return r;
}

std::pair<int, int> modal_params(const std::vector<std::pair<int, int>>& fold_params) {
  if (fold_params.empty()) return {0, 0};
  std::pair<int, int> best = fold_params.front();
  long best_count = 0;
  for (const auto& p : fold_params) {
    long n = std::count(fold_params.begin(), fold_params.end(), p);
    if (n > best_count) {
      best = p;
      best_count = n;
    }
  }
  return best;
}

std::string compare_report_json(const CompareResult& r) {
  json j;
  j["format"] = "metastack.compare";
  j["config"] = config_json(r.config);
  json units = json::array();
  for (std::size_t u = 0; u < r.unit_ids.size(); ++u)
    units.push_back({{"unit_id", r.unit_ids[u]}, {"width", r.unit_widths[u]}, {"visit_share", r.visit_shares[u]}});
  j["data"] = {{"source", r.source},
               {"items", r.items},
               {"columns", r.columns},
               {"marker", r.marker},
               {"missing_cells_before_imputation", r.missing_cells},
               {"units", units}};
  json scenarios = json::array();
  for (const auto& s : r.scenarios) scenarios.push_back(scenario_json(s));
  j["scenarios"] = scenarios;
  if (!r.scenarios.empty()) {
    const auto& v = r.scenarios.front().volume;
    j["volume_ratio"] = {{"numerator", v.ratio_num},
                         {"denominator", v.ratio_den},
                         {"value", v.ratio()},
                         {"percent", v.ratio_percent()},
                         {"savings", v.savings}};
  }
  if (r.price)
    j["price_of_privacy"] = {{"relative_gap", optional_number(r.price->relative_gap)},
                             {"ratio_minus_one", optional_number(r.price->ratio_minus_one)}};
  return j.dump(2) + "\n";
}

std::string compare_report_text(const CompareResult& r) {
  auto j = json::parse(compare_report_json(r));
  std::ostringstream o;
  const auto& c = j["config"];
  o << "metastack scenario comparison\n";
  o << "config: grid=" << c["grid"].get<std::string>() << " seed=" << c["seed"].get<std::uint64_t>()
    << " outer=" << c["outer_folds"].get<int>() << " inner=" << c["inner_folds"].get<int>()
    << " meta=" << c["meta_folds"].get<int>() << "\n";
  const auto& d = j["data"];
  o << "data: " << d["source"].get<std::string>() << "\n";
  o << "      " << d["items"].get<std::size_t>() << " items, " << d["columns"].get<std::size_t>() << " columns, "
    << d["units"].size() << " units, marker " << format_double(d["marker"].get<double>()) << ", "
    << d["missing_cells_before_imputation"].get<std::size_t>() << " missing cells before imputation\n";
  o << "units:";
  for (const auto& u : d["units"])
    o << " " << u["unit_id"].get<std::string>() << " (" << u["width"].get<std::size_t>() << " features, visited by "
      << pct(u["visit_share"].get<double>()) << ")";
  o << "\n\n";

  o << pad("Scenario", 10) << pad("Model", 10) << pad("MCC", 9) << pad("Trees", 7) << pad("Depth", 7)
    << pad("Accuracy", 10) << pad("F1w", 9) << pad("Precw", 9) << pad("Recw", 9) << "Kappa\n";
  for (const auto& s : j["scenarios"])
    for (const auto& m : s["models"])
      o << pad(std::to_string(s["scenario"].get<int>()), 10) << pad(m["model"].get<std::string>(), 10)
        << pad(fixed(m["mcc"].get<double>()), 9) << pad(std::to_string(m["n_estimators"].get<int>()), 7)
        << pad(std::to_string(m["max_depth"].get<int>()), 7) << pad(fixed(m["accuracy"].get<double>()), 10)
        << pad(fixed(m["f1_weighted"].get<double>()), 9) << pad(fixed(m["precision_weighted"].get<double>()), 9)
        << pad(fixed(m["recall_weighted"].get<double>()), 9) << fixed(m["cohens_kappa"].get<double>()) << "\n";
  o << "(Trees/Depth: most frequent choice over outer folds; per-fold choices are in report.json)\n\n";

  for (const auto& s : j["scenarios"])
    if (!s["models"].empty())
      o << "protocol, scenario " << s["scenario"].get<int>() << ": " << s["models"].back()["topology"].get<std::string>()
        << "\n";

  if (!j["scenarios"].empty()) {
    const auto& a = j["scenarios"][0]["volume"]["analytic"];
    o << "\ndata volume per item (analytic, s=" << format_double(a["s"].get<double>()) << "): k=" << a["k"].get<int>()
      << " m=" << a["m"].get<int>() << " n_i=" << join(a["n_i"].get<std::vector<std::int64_t>>())
      << " sum=" << a["sum_n"].get<std::int64_t>() << "\n";
    for (const auto& s : j["scenarios"])
      o << "  scenario " << s["scenario"].get<int>() << ": "
        << format_double(s["volume"]["analytic"]["volume"].get<double>()) << "\n";
    const auto& ratio = j["volume_ratio"];
    o << "  ratio scenario 2 / scenario 3: " << ratio["numerator"].get<std::int64_t>() << "/"
      << ratio["denominator"].get<std::int64_t>() << " = " << ratio["percent"].get<std::string>()
      << ", savings " << format_double(ratio["savings"].get<double>()) << "\n";
    for (const auto& w : a["warnings"]) o << "  warning: " << w.get<std::string>() << "\n";
    o << "measured traffic (canonical encoding):\n";
    for (const auto& s : j["scenarios"]) {
      const auto& m = s["volume"]["measured"];
      o << "  scenario " << s["scenario"].get<int>() << ": " << m["messages"].get<std::size_t>() << " messages, "
        << m["bytes"].get<std::size_t>() << " bytes, " << m["value_fields"].get<std::size_t>() << " value fields\n";
    }
  }

  o << "\nconfidentiality audit:\n";
  for (const auto& s : j["scenarios"])
    o << "  scenario " << s["scenario"].get<int>() << ": " << audit_line(s["audit"]) << "\n";

  if (j.contains("price_of_privacy")) {
    const auto& p = j["price_of_privacy"];
    o << "\nprice of privacy: relative gap (MCC3 - MCC2) / MCC3 = "
      << (p["relative_gap"].is_null() ? std::string("undefined (MCC3 <= 0)") : pct(p["relative_gap"].get<double>()))
      << "; MCC3 / MCC2 - 1 = "
      << (p["ratio_minus_one"].is_null() ? std::string("undefined (MCC2 <= 0)")
                                         : pct(p["ratio_minus_one"].get<double>()))
      << "\n";
  }

  o << "\nfold bookkeeping:";
  for (const auto& s : j["scenarios"]) o << " " << s["fold_audit"].get<std::string>();
  o << "\n";
  bool any_warning = false;
  for (const auto& s : j["scenarios"])
    for (const auto& m : s["models"])
      for (const auto& w : m["warnings"]) {
        if (!any_warning) o << "\nwarnings:\n";
        any_warning = true;
        o << "  scenario " << s["scenario"].get<int>() << " " << m["model"].get<std::string>() << ": "
          << w.get<std::string>() << "\n";
      }
  return o.str();
}

std::string models_csv(const CompareResult& r) {
  std::ostringstream o;
  o << "scenario,model,mcc,accuracy,f1_weighted,precision_weighted,recall_weighted,cohens_kappa,n_estimators,"
       "max_depth,items_scored\n";
  for (const auto& s : r.scenarios)
    for (const auto& m : s.models) {
      auto [e, d] = modal_params(m.fold_params);
      o << s.scenario << "," << m.model << "," << format_double(m.metrics.mcc) << ","
        << format_double(m.metrics.accuracy) << "," << format_double(m.metrics.f1_weighted) << ","
        << format_double(m.metrics.precision_weighted) << "," << format_double(m.metrics.recall_weighted) << ","
        << format_double(m.metrics.cohens_kappa) << "," << e << "," << d << "," << m.items_scored << "\n";
    }
  return o.str();
}

std::string visit_shares_csv(const std::vector<std::string>& unit_ids, const std::vector<double>& shares) {
  std::ostringstream o;
  o << "unit,share\n";
  for (std::size_t u = 0; u < unit_ids.size(); ++u) o << unit_ids[u] << "," << format_double(shares[u]) << "\n";
  return o.str();
}

std::string visit_shares_gnuplot(const std::string& csv_name) {
  return "# Share of items passing each unit\n"
         "set datafile separator ','\n"
         "set style data histograms\n"
         "set style fill solid 0.6\n"
         "set yrange [0:1]\n"
         "set ylabel 'share of items'\n"
         "set xlabel 'unit'\n"
         "plot '" +
         csv_name + "' using 2:xtic(1) skip 1 title 'visit share'\n";
}

void write_text_file(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  out << text;
}

void write_compare_outputs(const CompareResult& r, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  write_text_file(dir / "config.json", r.config.to_json() + "\n");
  write_text_file(dir / "report.json", compare_report_json(r));
  write_text_file(dir / "report.txt", compare_report_text(r));
  write_text_file(dir / "models.csv", models_csv(r));
  write_text_file(dir / "visit_shares.csv", visit_shares_csv(r.unit_ids, r.visit_shares));
  write_text_file(dir / "visit_shares.gp", visit_shares_gnuplot("visit_shares.csv"));
  for (const auto& s : r.scenarios) {
    write_fold_audit(s.folds, dir / ("folds_scenario" + std::to_string(s.scenario) + ".csv"));
    if (s.scenario != 1) s.transcript.save(dir / ("transcript_scenario" + std::to_string(s.scenario) + ".ndjson"));
  }
}

// ---------------------------------------------------------------------------
// Noise sweep

SweepReport run_noise_sweep(const RunConfig& config, const PreparedData& data) {
  config.validate();
  SweepReport r;
  r.config = config;
  r.source = data.source;
  r.sweep = noising_sweep(data.dataset, config.param_grid(), config.lambdas, config.plan(), config.seed);
  r.spearman = r.sweep.lambdas.size() >= 2 ? spearman(r.sweep.lambdas, r.sweep.mcc) : 0.0;
  return r;
}

std::string sweep_report_json(const SweepReport& r) {
  json j;
  j["format"] = "metastack.noise_sweep";
  j["config"] = config_json(r.config);
  j["source"] = r.source;
  j["noise"] = "x + lambda * sigma_j * eps on observed numeric cells of training and evaluation rows alike";
  j["protocol"] = r.sweep.reports.empty() ? "" : r.sweep.reports.front().topology;
  json points = json::array();
  for (std::size_t i = 0; i < r.sweep.lambdas.size(); ++i)
    points.push_back({{"lambda", r.sweep.lambdas[i]}, {"mcc", r.sweep.mcc[i]}});
  j["points"] = points;
  j["sigmas"] = r.sweep.sigmas;
  j["spearman"] = r.spearman;
  return j.dump(2) + "\n";
}

std::string sweep_report_text(const SweepReport& r) {
  auto j = json::parse(sweep_report_json(r));
  std::ostringstream o;
  o << "metastack noise sweep (shared-pool model on noised data)\n";
  o << "noise: " << j["noise"].get<std::string>() << "; noise seed " << j["config"]["seed"].get<std::uint64_t>()
    << " shared by all levels\n";
  o << "data: " << j["source"].get<std::string>() << "\n";
  o << "protocol: " << j["protocol"].get<std::string>() << "\n\n";
  o << pad("lambda", 9) << "MCC\n";
  for (const auto& p : j["points"]) o << pad(fixed(p["lambda"].get<double>(), 2), 9) << fixed(p["mcc"].get<double>()) << "\n";
  o << "\nSpearman rank correlation (lambda, MCC): " << fixed(j["spearman"].get<double>()) << "\n";
  return o.str();
}

std::string sweep_csv(const SweepReport& r) {
  std::ostringstream o;
  o << "lambda,mcc\n";
  for (std::size_t i = 0; i < r.sweep.lambdas.size(); ++i)
    o << format_double(r.sweep.lambdas[i]) << "," << format_double(r.sweep.mcc[i]) << "\n";
  return o.str();
}

std::string sweep_gnuplot(const std::string& csv_name) {
  return "# Model performance against the additive noise level\n"
         "set datafile separator ','\n"
         "set xlabel 'noise level lambda (multiples of the column standard deviation)'\n"
         "set ylabel 'MCC'\n"
         "set grid\n"
         "plot '" +
         csv_name + "' using 1:2 skip 1 with linespoints title 'shared-pool model'\n";
}

void write_sweep_outputs(const SweepReport& r, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  write_text_file(dir / "config.json", r.config.to_json() + "\n");
  write_text_file(dir / "noise_sweep.json", sweep_report_json(r));
  write_text_file(dir / "noise_sweep.txt", sweep_report_text(r));
  write_text_file(dir / "noise_sweep.csv", sweep_csv(r));
  write_text_file(dir / "noise_sweep.gp", sweep_gnuplot("noise_sweep.csv"));
}

}  // namespace metastack
