// metastack command-line tool.
//
// Exit codes: 0 success, 1 usage error, 2 data error, 3 experiment failure
// or failed audit.

#include <atomic>
#include <chrono>
#include <csignal>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <thread>

#include "CLI11.hpp"
#include "json.hpp"
#include "metastack/common.hpp"
#include "metastack/run.hpp"
#include "metastack/service.hpp"
#include "metastack/synth.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;
using namespace metastack;

namespace {

constexpr int kUsage = 1;
constexpr int kData = 2;
constexpr int kExperiment = 3;

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

std::vector<std::string> split(const std::string& text, char sep) {
  std::vector<std::string> out;
  std::stringstream ss(text);
  std::string tok;
  while (std::getline(ss, tok, sep))
    if (!tok.empty()) out.push_back(tok);
  return out;
}

/// Flag values as typed; applied over the config file only when given.
struct Flags {
  std::string config, csv, date_csv, synth, marker, grid, scenarios, lambdas, classes, out;
  std::optional<std::uint64_t> seed;
  std::optional<int> outer, inner, meta_folds;
  bool global_dates = false;
};

void add_data_flags(CLI::App* cmd, Flags& f) {
  cmd->add_option("--config", f.config, "Run config file (JSON); flags override it");
  cmd->add_option("--csv", f.csv, "Numeric data CSV with Id and Response columns");
  cmd->add_option("--date-csv", f.date_csv, "Date CSV joined on Id");
  cmd->add_option("--synth", f.synth, "Synthetic spec, e.g. default or k=4,n=16,items=20000");
  cmd->add_option("--seed", f.seed, "Seed for the generator, folds and forests");
  cmd->add_option("--marker", f.marker, "Marker value for missing cells (default: derived)");
  cmd->add_option("--classes", f.classes, "Comma-separated class names for Response 0,1,...");
  cmd->add_flag("--global-dates", f.global_dates, "Compress date columns globally instead of per unit");
}

void add_eval_flags(CLI::App* cmd, Flags& f) {
  cmd->add_option("--grid", f.grid, "Grid as trees x depths, e.g. 25,50x10,25, or 'paper'");
  cmd->add_option("--outer", f.outer, "Outer folds");
  cmd->add_option("--inner", f.inner, "Inner (grid-search) folds");
  cmd->add_option("--meta-folds", f.meta_folds, "Meta-model grid-search folds");
}

RunConfig resolve(const Flags& f) {
  RunConfig c;
  if (!f.config.empty()) c = RunConfig::from_json(read_file(f.config));
  if (!f.csv.empty()) c.csv = f.csv;
  if (!f.date_csv.empty()) c.date_csv = f.date_csv;
  if (!f.synth.empty()) {
    c.synth = f.synth;
    c.csv.clear();
  }
  if (f.seed) c.seed = *f.seed;
  if (!f.marker.empty()) {
    double m = 0;
    if (!parse_double(f.marker, m)) throw UsageError("--marker must be a number");
    c.marker = m;
  }
  if (!f.classes.empty()) c.classes = split(f.classes, ',');
  if (f.global_dates) c.dates_per_unit = false;
  if (!f.grid.empty()) c.grid = f.grid;
  if (f.outer) c.outer_folds = *f.outer;
  if (f.inner) c.inner_folds = *f.inner;
  if (f.meta_folds) c.meta_folds = *f.meta_folds;
  if (!f.scenarios.empty()) {
    c.scenarios.clear();
    for (const auto& s : split(f.scenarios, ',')) {
      double v = 0;
      if (!parse_double(s, v)) throw UsageError("--scenarios takes a list such as 1,2,3");
      c.scenarios.push_back(static_cast<int>(v));
    }
  }
  if (!f.lambdas.empty()) {
    c.lambdas.clear();
    for (const auto& s : split(f.lambdas, ',')) {
      double v = 0;
      if (!parse_double(s, v)) throw UsageError("--lambdas takes a list such as 0,0.5,1");
      c.lambdas.push_back(v);
    }
  }
  if (!f.out.empty()) c.out = f.out;
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------

int cmd_synth(const Flags& f) {
  auto c = resolve(f);
  if (f.out.empty()) throw UsageError("synth needs --out FILE");
  auto spec = parse_synth_spec(c.synth);
  if (c.synth.find("seed=") == std::string::npos) spec.seed = c.seed;
  auto ds = generate_synthetic(spec);
  fs::path out = f.out;
  if (out.has_parent_path()) fs::create_directories(out.parent_path());
  write_csv(ds, out);
  std::cout << "wrote " << ds.rows() << " items, " << ds.cols() << " columns, " << partition_by_unit(ds).size()
            << " units to " << out.string() << "\n";
  return 0;
}

int cmd_ingest(const Flags& f) {
  auto c = resolve(f);
  if (c.csv.empty()) throw UsageError("ingest needs --csv FILE");
  auto data = prepare_data(c);
  const auto& ds = data.dataset;
  std::vector<std::string> ids;
  json units = json::array();
  auto shares = visit_shares(data.partitions);
  for (std::size_t u = 0; u < data.partitions.size(); ++u) {
    ids.push_back(data.partitions[u].unit_id);
    units.push_back({{"unit_id", ids.back()},
                     {"width", data.partitions[u].width()},
                     {"covered", data.partitions[u].covered_count()},
                     {"visit_share", shares[u]}});
  }
  std::vector<std::size_t> per_class(ds.classes.size(), 0);
  for (int y : ds.labels) ++per_class[static_cast<std::size_t>(y)];
  double cells = static_cast<double>(ds.rows() * ds.cols());
  json j{{"format", "metastack.ingest"},
         {"source", data.source},
         {"items", ds.rows()},
         {"columns", ds.cols()},
         {"classes", ds.classes},
         {"class_counts", per_class},
         {"marker", data.marker},
         {"missing_cells_before_imputation", data.missing_cells},
         {"missing_rate", cells > 0 ? static_cast<double>(data.missing_cells) / cells : 0.0},
         {"units", units}};
  std::ostringstream text;
  text << "source: " << data.source << "\n"
       << ds.rows() << " items, " << ds.cols() << " columns (dates compressed "
       << (c.dates_per_unit ? "per unit" : "globally") << "), marker " << format_double(data.marker) << "\n"
       << "missing cells before imputation: " << data.missing_cells << " ("
       << format_double(std::round(j["missing_rate"].get<double>() * 10000) / 100) << "%)\n";
  for (std::size_t k = 0; k < ds.classes.size(); ++k) text << "class " << ds.classes[k] << ": " << per_class[k] << "\n";
  for (const auto& u : units)
    text << u["unit_id"].get<std::string>() << ": " << u["width"].get<std::size_t>() << " features, visited by "
         << u["covered"].get<std::size_t>() << " items\n";
  std::cout << text.str();
  if (!f.out.empty()) {
    fs::create_directories(f.out);
    write_text_file(fs::path(f.out) / "ingest.json", j.dump(2) + "\n");
    write_text_file(fs::path(f.out) / "ingest.txt", text.str());
    write_text_file(fs::path(f.out) / "visit_shares.csv", visit_shares_csv(ids, shares));
    write_text_file(fs::path(f.out) / "visit_shares.gp", visit_shares_gnuplot("visit_shares.csv"));
  }
  return 0;
}

int cmd_train(const Flags& f, int base_port) {
  auto c = resolve(f);
  auto data = prepare_data(c);
  std::vector<std::string> warnings;
  auto stack = fit_stack(data.dataset, data.partitions, c.param_grid(), c.plan(), &warnings);
  fs::path out = fs::absolute(c.out);
  stack.save(out / "model");
  fs::create_directories(out / "services");
  ServiceConfig meta;
  meta.unit_id = "meta";
  meta.listen = "127.0.0.1:" + std::to_string(base_port);
  meta.model = out / "model" / "meta.json";
  meta.expected_units = stack.expected_units;
  write_text_file(out / "services" / "meta.json", meta.to_json() + "\n");
  json mesh = json::object();
  for (std::size_t u = 0; u < stack.units.size(); ++u) {
    ServiceConfig s;
    s.unit_id = stack.units[u].unit_id;
    s.listen = "127.0.0.1:" + std::to_string(base_port + 1 + static_cast<int>(u));
    s.downstream = meta.listen;
    s.model = out / "model" / ("unit_" + s.unit_id + ".json");
    write_text_file(out / "services" / (s.unit_id + ".json"), s.to_json() + "\n");
    mesh[s.unit_id] = s.listen;
  }
  write_text_file(out / "mesh.json", mesh.dump(2) + "\n");
  write_text_file(out / "config.json", c.to_json() + "\n");
  for (const auto& w : warnings) std::cerr << "warning: " << w << "\n";
  std::cout << "trained " << stack.units.size() << " sub-models and the meta model on " << data.dataset.rows()
            << " items; artifacts in " << (out / "model").string() << ", service configs in "
            << (out / "services").string() << "\n";
  return 0;
}

int cmd_compare(const Flags& f) {
  auto c = resolve(f);
  auto data = prepare_data(c);
  auto result = run_compare(c, data);
  write_compare_outputs(result, c.out);
  std::cout << compare_report_text(result);
  if (const auto* s2 = result.find(2); s2 && !s2->audit.pass) {
    std::cerr << "error: scenario 2 transcript failed the confidentiality audit\n";
    return kExperiment;
  }
  return 0;
}

int cmd_noise_sweep(const Flags& f) {
  auto c = resolve(f);
  auto data = prepare_data(c);
  auto report = run_noise_sweep(c, data);
  write_sweep_outputs(report, c.out);
  std::cout << sweep_report_text(report);
  return 0;
}

int cmd_audit(const Flags& f, const std::string& transcript_path, bool with_data) {
  auto transcript = Transcript::load(transcript_path);
  std::set<std::string> names;
  RawValueIndex index;
  if (with_data) {
    auto data = prepare_data(resolve(f));
    for (const auto& col : data.dataset.columns) names.insert(col.id.str());
    index = RawValueIndex::build(data.dataset, data.partitions);
  }
  auto verdict = audit_confidentiality(transcript.entries(), names, index);
  if (verdict.pass) {
    std::cout << "PASS, 0 violations (" << verdict.messages_scanned << " messages"
              << (with_data ? "" : "; raw-value rule skipped without --csv/--synth") << ")\n";
    return 0;
  }
  std::cout << "FAIL, " << verdict.violations.size() << " violations in " << verdict.flagged_messages().size()
            << " of " << verdict.messages_scanned << " messages\n";
  std::size_t shown = 0;
  for (const auto& v : verdict.violations) {
    if (++shown > 10) {
      std::cout << "  ...\n";
      break;
    }
    std::cout << "  message " << v.message_index << ": " << v.rule << " (field " << v.field << ")\n";
  }
  return kExperiment;
}

std::atomic<bool> g_stop{false};

void on_signal(int) { g_stop = true; }

int cmd_serve(const std::string& config_path, const std::string& mesh_dir, const std::string& ready_file) {
  std::vector<std::unique_ptr<HttpService>> services;
  std::vector<std::string> listens;
  auto add = [&](const ServiceConfig& config) {
    if (config.unit_id == "meta")
      services.push_back(std::make_unique<MetaService>(load_meta_artifact(config.model), config));
    else
      services.push_back(std::make_unique<SubUnitService>(parse_unit_artifact(read_file(config.model)), config));
    listens.push_back(config.listen);
  };
  if (!config_path.empty()) add(ServiceConfig::from_json(read_file(config_path)));
  if (!mesh_dir.empty()) {
    fs::path dir = fs::path(mesh_dir) / "services";
    add(ServiceConfig::from_json(read_file(dir / "meta.json")));
    std::vector<fs::path> units;
    for (const auto& e : fs::directory_iterator(dir))
      if (e.path().filename() != "meta.json" && e.path().extension() == ".json") units.push_back(e.path());
    std::sort(units.begin(), units.end());
    for (const auto& p : units) add(ServiceConfig::from_json(read_file(p)));
  }
  if (services.empty()) throw UsageError("serve needs --config FILE or --mesh DIR");

  std::signal(SIGINT, on_signal);
  std::signal(SIGTERM, on_signal);
  for (std::size_t i = 0; i < services.size(); ++i) {
    services[i]->start(listens[i]);
    std::cout << "serving POST /predict at " << services[i]->address() << "\n" << std::flush;
  }
  if (!ready_file.empty()) write_text_file(ready_file, "ready\n");
  while (!g_stop) std::this_thread::sleep_for(std::chrono::milliseconds(100));
  for (auto& s : services) s->stop();
  return 0;
}

int cmd_replay(const Flags& f, const std::string& mesh_file, const std::vector<std::string>& unit_flags, double rate,
               std::size_t concurrency, std::size_t limit) {
  auto c = resolve(f);
  std::map<std::string, std::string> addresses;
  if (!mesh_file.empty()) {
    auto j = json::parse(read_file(mesh_file), nullptr, false);
    if (!j.is_object()) throw DataError("mesh file must map unit ids to host:port");
    for (auto it = j.begin(); it != j.end(); ++it) addresses[it.key()] = it->get<std::string>();
  }
  for (const auto& u : unit_flags) {
    auto eq = u.find('=');
    if (eq == std::string::npos) throw UsageError("--unit takes ID=host:port");
    addresses[u.substr(0, eq)] = u.substr(eq + 1);
  }
  if (addresses.empty()) throw UsageError("replay needs --mesh FILE or --unit ID=host:port");
  auto data = prepare_data(c);
  Dataset ds = data.dataset;
  if (limit > 0 && limit < ds.rows()) {
    ds.items.resize(limit);
    ds.labels.resize(limit);
    ds.values.resize(limit * ds.cols());
    if (!ds.imputed.empty()) ds.imputed.resize(limit * ds.cols());
    data.partitions = partition_by_unit(ds);
  }
  ReplayOptions options;
  options.parts_per_second = rate;
  options.concurrency = concurrency;
  auto result = replay(ds, data.partitions, addresses, options);

  std::set<std::string> names;
  for (const auto& col : ds.columns) names.insert(col.id.str());
  auto entries = result.transcript.entries();
  auto verdict = audit_confidentiality(entries, names, RawValueIndex::build(ds, data.partitions));
  auto traffic = measure_traffic(entries);

  fs::path out = c.out;
  fs::create_directories(out);
  std::ostringstream csv;
  csv << "part_id,ok,prediction,probability,deliveries,error\n";
  for (const auto& o : result.outcomes)
    csv << o.part_id << "," << (o.ok ? 1 : 0) << "," << o.prediction << "," << format_double(o.probability) << ","
        << o.deliveries << ",\"" << o.error << "\"\n";
  write_text_file(out / "outcomes.csv", csv.str());
  result.transcript.save(out / "transcript.ndjson");
  std::ostringstream text;
  text << "replayed " << result.outcomes.size() << " parts: " << result.outcomes.size() - result.failed
       << " final meta predictions, " << result.failed << " failed\n"
       << "traffic: " << traffic.total.messages << " messages, " << traffic.total.bytes << " bytes\n"
       << "audit: "
       << (verdict.pass ? "PASS, 0 violations"
                        : "FAIL, " + std::to_string(verdict.violations.size()) + " violations")
       << "\n";
  write_text_file(out / "replay.txt", text.str());
  std::cout << text.str();
  return verdict.pass ? 0 : kExperiment;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"metastack: stacked prediction exchange across organisational units"};
  app.require_subcommand(1);
  Flags f;

  auto* synth = app.add_subcommand("synth", "Write a synthetic dataset as CSV");
  add_data_flags(synth, f);
  synth->add_option("--out", f.out, "Output CSV file");

  auto* ingest = app.add_subcommand("ingest", "Load, compress and summarise a CSV dataset");
  add_data_flags(ingest, f);
  ingest->add_option("--out", f.out, "Directory for the summary and visit-share plot data");

  int base_port = 8100;
  auto* train = app.add_subcommand("train", "Fit the deployable stack and write service configs");
  add_data_flags(train, f);
  add_eval_flags(train, f);
  train->add_option("--out", f.out, "Output directory");
  train->add_option("--base-port", base_port, "Meta service port; sub-units take the following ports");

  auto* compare = app.add_subcommand("compare", "Run scenarios 1-3 and write the comparison report");
  add_data_flags(compare, f);
  add_eval_flags(compare, f);
  compare->add_option("--scenarios", f.scenarios, "Comma-separated subset of 1,2,3");
  compare->add_option("--out", f.out, "Output directory");

  auto* sweep = app.add_subcommand("noise-sweep", "Shared-pool performance under additive noise");
  add_data_flags(sweep, f);
  add_eval_flags(sweep, f);
  sweep->add_option("--lambdas", f.lambdas, "Comma-separated noise levels (default 0,0.1,...,1)");
  sweep->add_option("--out", f.out, "Output directory");

  std::string transcript_path;
  auto* audit = app.add_subcommand("audit", "Check a transcript for confidentiality violations");
  audit->add_option("transcript", transcript_path, "Transcript file (one canonical message per line)")->required();
  add_data_flags(audit, f);

  std::string service_config, mesh_dir, ready_file;
  auto* serve = app.add_subcommand("serve", "Run sub-unit and meta services");
  serve->add_option("--config", service_config, "One service config file");
  serve->add_option("--mesh", mesh_dir, "Output directory of 'train'; runs every service in it");
  serve->add_option("--ready-file", ready_file, "File written once all services listen");

  std::string mesh_file;
  std::vector<std::string> unit_flags;
  double rate = 0.0;
  std::size_t concurrency = 8, limit = 0;
  auto* replay_cmd = app.add_subcommand("replay", "Stream parts through a running mesh");
  add_data_flags(replay_cmd, f);
  replay_cmd->add_option("--mesh", mesh_file, "mesh.json written by 'train'");
  replay_cmd->add_option("--unit", unit_flags, "ID=host:port, repeatable");
  replay_cmd->add_option("--rate", rate, "Parts per second (0 = unlimited)");
  replay_cmd->add_option("--concurrency", concurrency, "Parallel parts when unlimited");
  replay_cmd->add_option("--limit", limit, "Replay only the first N parts");
  replay_cmd->add_option("--out", f.out, "Output directory");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return kUsage;
  }

  try {
    if (*synth) return cmd_synth(f);
    if (*ingest) return cmd_ingest(f);
    if (*train) return cmd_train(f, base_port);
    if (*compare) return cmd_compare(f);
    if (*sweep) return cmd_noise_sweep(f);
    if (*audit) return cmd_audit(f, transcript_path, !f.csv.empty() || !f.synth.empty() || !f.config.empty());
    if (*serve) return cmd_serve(service_config, mesh_dir, ready_file);
    if (*replay_cmd) return cmd_replay(f, mesh_file, unit_flags, rate, concurrency, limit);
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return kUsage;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kData;
  } catch (const ExperimentError& e) {
    std::cerr << "experiment failure: " << e.what() << "\n";
    return kExperiment;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kData;
  }
  return kUsage;
}
