#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "json.hpp"
#include "metastack/baselines.hpp"
#include "metastack/metrics.hpp"
#include "metastack/run.hpp"
#include "metastack/synth.hpp"
#include "metastack/transport.hpp"

namespace py = pybind11;
using json = nlohmann::json;
using namespace metastack;

namespace {

// Run configuration from a JSON object; the Python side builds it from
// keyword arguments.
RunConfig config_from(const std::string& config_json) {
  auto c = RunConfig::from_json(config_json);
  c.validate();
  return c;
}

py::dict suite_dict(const MetricSuite& s) {
  py::dict d;
  d["mcc"] = s.mcc;
  d["accuracy"] = s.accuracy;
  d["f1_weighted"] = s.f1_weighted;
  d["precision_weighted"] = s.precision_weighted;
  d["recall_weighted"] = s.recall_weighted;
  d["cohens_kappa"] = s.cohens_kappa;
  return d;
}

std::vector<TranscriptEntry> entries_from_lines(const std::vector<std::string>& lines) {
  std::vector<TranscriptEntry> out;
  out.reserve(lines.size());
  for (const auto& line : lines) {
    auto m = BoundaryMessage::decode(line);
    std::string from = "meta";
    if (auto it = m.payload.find("unit_id"); it != m.payload.end() && std::holds_alternative<std::string>(it->second))
      from = std::get<std::string>(it->second);
    out.push_back({"", from, "", std::move(m)});
  }
  return out;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Native core of the metastack package";

  static py::exception<DataError> data_error(m, "DataError", PyExc_ValueError);
  static py::exception<ExperimentError> experiment_error(m, "ExperimentError", PyExc_RuntimeError);
  py::register_exception_translator([](std::exception_ptr p) {
    try {
      if (p) std::rethrow_exception(p);
    } catch (const DataError& e) {
      data_error(e.what());
    } catch (const ExperimentError& e) {
      experiment_error(e.what());
    }
  });

  m.def(
      "metric_suite",
      [](const std::vector<std::vector<std::uint64_t>>& rows) { return suite_dict(suite(ConfusionMatrix(rows))); },
      py::arg("confusion"), "Metrics of a square confusion matrix (rows actual, columns predicted).");

  m.def(
      "metric_suite_from_labels",
      [](const std::vector<int>& y_true, const std::vector<int>& y_pred, std::size_t n_classes) {
        return suite_dict(suite(confusion(y_true, y_pred, n_classes)));
      },
      py::arg("y_true"), py::arg("y_pred"), py::arg("n_classes"));

  m.def(
      "spearman", [](const std::vector<double>& x, const std::vector<double>& y) { return spearman(x, y); },
      py::arg("x"), py::arg("y"));

  m.def(
      "account_volume",
      [](int k, int mm, const std::vector<std::int64_t>& n_i, double s) {
        auto v = account_volume(k, mm, n_i, s);
        py::dict d;
        d["scenario1"] = v.scenario1;
        d["scenario2"] = v.scenario2;
        d["scenario3"] = v.scenario3;
        d["savings"] = v.savings;
        d["ratio"] = py::make_tuple(v.ratio_num, v.ratio_den);
        d["ratio_percent"] = v.ratio_percent();
        d["warnings"] = v.warnings;
        return d;
      },
      py::arg("k"), py::arg("m"), py::arg("n_i"), py::arg("s") = 1.0);

  m.def(
      "synthesize_csv",
      [](const std::string& spec, std::uint64_t seed) {
        auto s = parse_synth_spec(spec);
        if (spec.find("seed=") == std::string::npos) s.seed = seed;
        return to_csv(generate_synthetic(s));
      },
      py::arg("spec") = "default", py::arg("seed") = 7, "Planted synthetic dataset as CSV text.");

  m.def(
      "compare_json",
      [](const std::string& config_json) {
        auto c = config_from(config_json);
        py::gil_scoped_release release;
        auto data = prepare_data(c);
        return compare_report_json(run_compare(c, data));
      },
      py::arg("config_json"));

  m.def(
      "noise_sweep_json",
      [](const std::string& config_json) {
        auto c = config_from(config_json);
        py::gil_scoped_release release;
        auto data = prepare_data(c);
        return sweep_report_json(run_noise_sweep(c, data));
      },
      py::arg("config_json"));

  m.def("default_config_json", [] { return RunConfig{}.to_json(); });

  m.def(
      "encode_subprediction",
      [](const std::string& part_id, const std::string& unit_id, const std::string& label, double certainty) {
        return BoundaryMessage::from(SubPrediction{part_id, unit_id, label, certainty}).encode();
      },
      py::arg("part_id"), py::arg("unit_id"), py::arg("label"), py::arg("certainty"));

  m.def(
      "decode_message",
      [](const std::string& text) {
        auto msg = BoundaryMessage::decode(text);
        py::dict d;
        d["kind"] = kind_name(msg.kind);
        for (const auto& [key, value] : msg.payload)
          std::visit([&](const auto& v) { d[py::str(key)] = v; }, value);
        return d;
      },
      py::arg("text"));

  m.def(
      "audit_messages",
      [](const std::vector<std::string>& lines, const std::vector<std::string>& feature_ids) {
        auto verdict = audit_confidentiality(entries_from_lines(lines),
                                             std::set<std::string>(feature_ids.begin(), feature_ids.end()), {});
        py::list violations;
        for (const auto& v : verdict.violations) {
          py::dict d;
          d["message"] = v.message_index;
          d["field"] = v.field;
          d["rule"] = v.rule;
          violations.append(d);
        }
        py::dict d;
        d["pass"] = verdict.pass;
        d["messages"] = verdict.messages_scanned;
        d["violations"] = violations;
        return d;
      },
      py::arg("lines"), py::arg("feature_ids") = std::vector<std::string>{},
      "Audits canonical messages by kind and field names; the raw-value rule needs the data and is skipped.");
}
