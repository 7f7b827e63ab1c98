#include "metastack/stacking.hpp"

#include <algorithm>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>
#include <unordered_map>

#include "json.hpp"

namespace metastack {

namespace {

using json = nlohmann::json;

constexpr std::uint64_t kOuterSalt = 0x6f75746572;
constexpr std::uint64_t kSplitSalt = 0x6162;
constexpr std::uint64_t kMetaSalt = 0x6d657461;

void require_imputed(const Dataset& ds) {
  for (double v : ds.values)
    if (std::isnan(v)) throw DataError("dataset must be imputed before training");
}

std::vector<std::size_t> iota_rows(std::size_t n) {
  std::vector<std::size_t> r(n);
  std::iota(r.begin(), r.end(), std::size_t{0});
  return r;
}

std::vector<int> labels_of(const Dataset& ds, const std::vector<std::size_t>& rows) {
  std::vector<int> y;
  y.reserve(rows.size());
  for (auto r : rows) y.push_back(ds.labels[r]);
  return y;
}

std::size_t distinct_classes(std::span<const int> y) {
  std::vector<int> v(y.begin(), y.end());
  std::sort(v.begin(), v.end());
  return static_cast<std::size_t>(std::unique(v.begin(), v.end()) - v.begin());
}

std::vector<std::string> column_names(const Dataset& ds, const std::vector<std::size_t>& cols) {
  std::vector<std::string> out;
  for (auto c : cols) out.push_back(ds.columns[c].id.str());
  return out;
}

EvaluationReport finish_report(EvaluationReport r, const Dataset& ds, const std::vector<int>& folds, int n_folds) {
  r.confusion = ConfusionMatrix(ds.class_count());
  std::vector<ConfusionMatrix> per_fold(static_cast<std::size_t>(n_folds), ConfusionMatrix(ds.class_count()));
  for (std::size_t i = 0; i < r.predictions.size(); ++i) {
    if (r.predictions[i] < 0) continue;
    auto a = static_cast<std::size_t>(ds.labels[i]);
    auto p = static_cast<std::size_t>(r.predictions[i]);
    ++r.confusion(a, p);
    ++per_fold[static_cast<std::size_t>(folds[i])](a, p);
    ++r.items_scored;
  }
  for (const auto& cm : per_fold) r.fold_mcc.push_back(cm.total() ? mcc(cm) : 0.0);
  if (r.items_scored > 0) r.metrics = suite(r.confusion);
  return r;
}

void check_outer_fold(const Dataset& ds, const std::vector<int>& folds, int f) {
  std::vector<int> train, test;
  for (std::size_t i = 0; i < ds.rows(); ++i) (folds[i] == f ? test : train).push_back(ds.labels[i]);
  if (distinct_classes(train) < 2 || distinct_classes(test) < 2)
    throw ExperimentError("outer fold " + std::to_string(f) +
                          " holds a single class on one side; the evaluation cannot proceed");
}

/// Meta-feature matrix and labels for the given rows.
std::vector<double> meta_matrix(const std::vector<MetaFeatureRow>& rows) {
  std::vector<double> x;
  for (const auto& r : rows) x.insert(x.end(), r.values.begin(), r.values.end());
  return x;
}

json forest_json(const ForestModel& m) { return json::parse(m.to_json()); }

std::string read_text(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  out << text;
}

}  // namespace

void CvPlan::validate() const {
  if (outer_folds < 2 || inner_folds < 2 || meta_folds < 2) throw DataError("every fold count must be at least 2");
}

std::string CvPlan::topology(bool meta) const {
  std::string s = "outer=" + std::to_string(outer_folds) + " stratified";
  if (meta)
    s += "; outer-train split A/B; sub-models: " + std::to_string(inner_folds) +
         "-fold search on A, refit on A; meta: " + std::to_string(meta_folds) +
         "-fold search on B rows, refit on B; test scored by A-models + meta";
  else
    s += "; " + std::to_string(inner_folds) + "-fold search on outer-train, refit on outer-train";
  return s + "; pooled confusion over outer folds; seed=" + std::to_string(seed);
}

SubPrediction make_subprediction(const std::string& part_id, const std::string& unit_id,
                                 std::span<const double> proba, const std::vector<std::string>& classes) {
  int k = argmax(proba);
  return {part_id, unit_id, classes[static_cast<std::size_t>(k)], proba[static_cast<std::size_t>(k)]};
}

std::vector<UnitModel> train_subunits(const Dataset& ds, const std::vector<UnitPartition>& partitions,
                                      const std::vector<std::size_t>& rows,
                                      const std::vector<ForestParams>& params_per_unit, std::size_t min_covered,
                                      std::vector<std::string>* warnings) {
  if (params_per_unit.size() != partitions.size()) throw DataError("one parameter set per unit is required");
  require_imputed(ds);
  std::vector<std::optional<UnitModel>> slots(partitions.size());
  std::vector<std::string> notes(partitions.size());
  parallel_for(partitions.size(), [&](std::size_t u) {
    const auto& p = partitions[u];
    std::vector<std::size_t> covered;
    for (auto r : rows)
      if (p.coverage[r]) covered.push_back(r);
    auto y = labels_of(ds, covered);
    if (covered.size() < min_covered || distinct_classes(y) < 2) {
      notes[u] = "unit " + p.unit_id + " has " + std::to_string(covered.size()) +
                 " covered training items" + (covered.size() < min_covered ? "" : " of a single class") +
                 "; excluded";
      return;
    }
    auto x = gather(ds, covered, p.column_indices);
    FeatureMatrix X(x, covered.size(), p.width());
    slots[u] = UnitModel{p.unit_id, p.column_indices, column_names(ds, p.column_indices),
                         train_forest(X, y, ds.classes, params_per_unit[u])};
  });
  std::vector<UnitModel> out;
  for (std::size_t u = 0; u < slots.size(); ++u) {
    if (slots[u]) out.push_back(std::move(*slots[u]));
    if (!notes[u].empty() && warnings) warnings->push_back(notes[u]);
  }
  return out;
}

std::vector<SubPrediction> emit_subpredictions(const std::vector<UnitModel>& models,
                                               const std::vector<UnitPartition>& partitions, const Dataset& ds,
                                               const std::vector<std::size_t>& rows) {
  require_imputed(ds);
  struct Bound {
    const UnitModel* model;
    const UnitPartition* part;
    std::vector<std::size_t> covered;  // positions into rows
    std::vector<double> proba;
  };
  std::vector<Bound> bound;
  for (const auto& m : models) {
    auto it = std::find_if(partitions.begin(), partitions.end(),
                           [&](const UnitPartition& p) { return p.unit_id == m.unit_id; });
    if (it == partitions.end()) throw DataError("no partition for unit " + m.unit_id);
    if (m.model.feature_width() != it->width())
      throw DataError("unit " + m.unit_id + " model expects " + std::to_string(m.model.feature_width()) +
                      " features, partition has " + std::to_string(it->width()));
    if (!m.feature_ids.empty() && m.feature_ids != column_names(ds, it->column_indices))
      throw DataError("unit " + m.unit_id + " model was trained on different feature columns");
    bound.push_back({&m, &*it, {}, {}});
  }
  for (auto& b : bound) {
    std::vector<std::size_t> covered_rows;
    for (std::size_t i = 0; i < rows.size(); ++i)
      if (b.part->coverage[rows[i]]) {
        b.covered.push_back(i);
        covered_rows.push_back(rows[i]);
      }
    auto x = gather(ds, covered_rows, b.part->column_indices);
    b.proba = b.model->model.predict_proba(FeatureMatrix(x, covered_rows.size(), b.part->width()));
  }
  const std::size_t nc = ds.class_count();
  std::vector<std::size_t> cursor(bound.size(), 0);
  std::vector<SubPrediction> out;
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (std::size_t u = 0; u < bound.size(); ++u) {
      auto& b = bound[u];
      if (cursor[u] < b.covered.size() && b.covered[cursor[u]] == i) {
        std::span<const double> p(b.proba.data() + cursor[u] * nc, nc);
        out.push_back(make_subprediction(ds.items[rows[i]], b.model->unit_id, p, ds.classes));
        ++cursor[u];
      }
    }
  return out;
}

std::vector<MetaFeatureRow> aggregate(const std::vector<SubPrediction>& messages,
                                      const std::vector<std::string>& expected_units,
                                      const std::vector<std::string>& classes, double marker,
                                      const std::vector<std::string>& expected_parts,
                                      std::vector<std::string>* warnings) {
  std::unordered_map<std::string, std::size_t> unit_slot, class_code, part_row;
  for (std::size_t u = 0; u < expected_units.size(); ++u) unit_slot[expected_units[u]] = u;
  for (std::size_t k = 0; k < classes.size(); ++k) class_code[classes[k]] = k;

  std::vector<MetaFeatureRow> rows;
  auto blank = [&](const std::string& part) {
    MetaFeatureRow r{part, std::vector<double>(2 * expected_units.size())};
    for (std::size_t u = 0; u < expected_units.size(); ++u) {
      r.values[2 * u] = kAbsentCode;
      r.values[2 * u + 1] = marker;
    }
    return r;
  };
  for (const auto& p : expected_parts)
    if (part_row.emplace(p, rows.size()).second) rows.push_back(blank(p));

  std::vector<std::vector<bool>> filled(rows.size(), std::vector<bool>(expected_units.size(), false));
  for (const auto& m : messages) {
    auto us = unit_slot.find(m.unit_id);
    if (us == unit_slot.end()) throw DataError("message from unexpected unit " + m.unit_id);
    auto cc = class_code.find(m.label);
    if (cc == class_code.end()) throw DataError("unknown class label '" + m.label + "'");
    auto pr = part_row.find(m.part_id);
    if (pr == part_row.end()) {
      if (!expected_parts.empty()) throw DataError("message for unexpected part " + m.part_id);
      pr = part_row.emplace(m.part_id, rows.size()).first;
      rows.push_back(blank(m.part_id));
      filled.emplace_back(expected_units.size(), false);
    }
    auto r = pr->second, u = us->second;
    if (filled[r][u] && warnings)
      warnings->push_back("duplicate message for part " + m.part_id + " from unit " + m.unit_id + "; kept the last");
    filled[r][u] = true;
    rows[r].values[2 * u] = static_cast<double>(cc->second);
    rows[r].values[2 * u + 1] = m.certainty;
  }
  return rows;
}

std::vector<std::string> check_fold_records(const std::vector<FoldRecord>& records, std::size_t n_items,
                                            int outer_folds) {
  std::vector<std::string> issues;
  std::map<std::string, int> tested;
  std::map<std::pair<std::string, int>, int> seen;
  for (const auto& r : records) {
    if (r.role == "A+B") issues.push_back(r.item + " fitted both a sub-model and the meta model in fold " +
                                          std::to_string(r.outer));
    if (r.role == "test") ++tested[r.item];
    if (++seen[{r.item, r.outer}] > 1)
      issues.push_back(r.item + " appears twice in fold " + std::to_string(r.outer));
    if (r.outer < 0 || r.outer >= outer_folds) issues.push_back(r.item + " has an invalid outer fold");
  }
  if (tested.size() != n_items)
    issues.push_back(std::to_string(tested.size()) + " of " + std::to_string(n_items) + " items were tested");
  for (const auto& [item, n] : tested)
    if (n != 1) issues.push_back(item + " is tested " + std::to_string(n) + " times");
  return issues;
}

void write_fold_audit(const std::vector<FoldRecord>& records, const std::filesystem::path& path) {
  std::string out = "item,outer,role,inner\n";
  for (const auto& r : records)
    out += r.item + "," + std::to_string(r.outer) + "," + r.role + "," + std::to_string(r.inner) + "\n";
  write_text(path, out);
}

std::vector<int> outer_folds(const Dataset& ds, const CvPlan& plan) {
  return stratified_folds(ds.labels, plan.outer_folds, mix_seed(plan.seed, kOuterSalt));
}

CompleteRun nested_cv_complete(const Dataset& ds, const ParamGrid& grid, const CvPlan& plan,
                               const std::vector<std::size_t>& columns, const std::string& model) {
  plan.validate();
  require_imputed(ds);
  const auto cols = columns.empty() ? all_columns(ds) : columns;
  const auto folds = outer_folds(ds, plan);
  for (int f = 0; f < plan.outer_folds; ++f) check_outer_fold(ds, folds, f);

  struct FoldOut {
    std::vector<std::pair<std::size_t, int>> predictions;
    std::vector<FoldRecord> records;
    std::pair<int, int> params;
    std::vector<std::string> warnings;
  };
  std::vector<FoldOut> outs(static_cast<std::size_t>(plan.outer_folds));
  parallel_for(outs.size(), [&](std::size_t fi) {
    int f = static_cast<int>(fi);
    std::vector<std::size_t> train, test;
    for (std::size_t i = 0; i < ds.rows(); ++i) (folds[i] == f ? test : train).push_back(i);
    auto y = labels_of(ds, train);
    auto x = gather(ds, train, cols);
    FeatureMatrix X(x, train.size(), cols.size());
    ForestParams base;
    base.seed = mix_seed(plan.seed, fi + 1);
    auto gs = grid_search(grid, X, y, ds.classes, plan.inner_folds, base);
    auto forest = train_forest(X, y, ds.classes, gs.best);
    auto xt = gather(ds, test, cols);
    auto pred = forest.predict(FeatureMatrix(xt, test.size(), cols.size()));

    auto& o = outs[fi];
    o.params = {gs.best.n_estimators, gs.best.max_depth};
    for (auto& w : gs.warnings) o.warnings.push_back("fold " + std::to_string(f) + ": " + w);
    for (std::size_t i = 0; i < test.size(); ++i) o.predictions.emplace_back(test[i], pred[i]);
    auto inner = stratified_folds(y, plan.inner_folds, mix_seed(base.seed, kGridFoldSalt));
    for (std::size_t i = 0; i < train.size(); ++i) o.records.push_back({ds.items[train[i]], f, "train", inner[i]});
    for (auto t : test) o.records.push_back({ds.items[t], f, "test", -1});
  });

  CompleteRun run;
  auto& r = run.report;
  r.model = model;
  r.protocol = "complete";
  r.topology = plan.topology(false);
  r.predictions.assign(ds.rows(), -1);
  for (auto& o : outs) {
    for (auto [i, p] : o.predictions) r.predictions[i] = p;
    r.fold_params.push_back(o.params);
    r.warnings.insert(r.warnings.end(), o.warnings.begin(), o.warnings.end());
    run.folds.insert(run.folds.end(), o.records.begin(), o.records.end());
  }
  r = finish_report(std::move(r), ds, folds, plan.outer_folds);
  return run;
}

MetaRun nested_cv_meta(const Dataset& ds, const std::vector<UnitPartition>& partitions, const ParamGrid& grid,
                       const CvPlan& plan) {
  plan.validate();
  require_imputed(ds);
  if (partitions.empty()) throw DataError("at least one unit partition is required");
  if (!ds.marker) throw DataError("dataset has no marker; impute it first");
  const double marker = *ds.marker;
  const auto folds = outer_folds(ds, plan);
  for (int f = 0; f < plan.outer_folds; ++f) check_outer_fold(ds, folds, f);
  std::vector<std::string> units;
  for (const auto& p : partitions) units.push_back(p.unit_id);
  const std::size_t min_covered = static_cast<std::size_t>(plan.outer_folds) * 2;

  struct FoldOut {
    std::vector<std::pair<std::size_t, int>> meta_pred;
    std::vector<std::vector<std::pair<std::size_t, int>>> sub_pred;
    std::vector<std::pair<int, int>> sub_params;
    std::pair<int, int> meta_params;
    std::vector<FoldRecord> records;
    std::vector<SubPrediction> train_messages, score_messages;
    std::vector<MetaPrediction> meta_outputs;
    std::vector<std::string> warnings;
  };
  std::vector<FoldOut> outs(static_cast<std::size_t>(plan.outer_folds));

  parallel_for(outs.size(), [&](std::size_t fi) {
    int f = static_cast<int>(fi);
    auto& o = outs[fi];
    auto warn = [&](const std::string& w) { o.warnings.push_back("fold " + std::to_string(f) + ": " + w); };
    const std::uint64_t fold_seed = mix_seed(plan.seed, fi + 1);

    std::vector<std::size_t> train, test;
    for (std::size_t i = 0; i < ds.rows(); ++i) (folds[i] == f ? test : train).push_back(i);
    auto y_train = labels_of(ds, train);
    auto ab = stratified_folds(y_train, 2, mix_seed(fold_seed, kSplitSalt));
    std::vector<std::size_t> A, B;
    for (std::size_t i = 0; i < train.size(); ++i) (ab[i] == 0 ? A : B).push_back(train[i]);

    // Stage 1: per-unit search and fit on the covered part of A.
    std::vector<ForestParams> params(partitions.size());
    o.sub_params.assign(partitions.size(), {0, 0});
    for (std::size_t u = 0; u < partitions.size(); ++u) {
      const auto& p = partitions[u];
      params[u].seed = mix_seed(fold_seed, u + 1);
      std::vector<std::size_t> covered;
      for (auto r : A)
        if (p.coverage[r]) covered.push_back(r);
      auto y = labels_of(ds, covered);
      if (covered.size() < min_covered || distinct_classes(y) < 2) continue;  // train_subunits reports it
      auto x = gather(ds, covered, p.column_indices);
      auto gs = grid_search(grid, FeatureMatrix(x, covered.size(), p.width()), y, ds.classes, plan.inner_folds,
                            params[u]);
      for (auto& w : gs.warnings) warn("unit " + p.unit_id + ": " + w);
      params[u] = gs.best;
      o.sub_params[u] = {gs.best.n_estimators, gs.best.max_depth};
    }
    std::vector<std::string> sub_warnings;
    auto models = train_subunits(ds, partitions, A, params, min_covered, &sub_warnings);
    for (auto& w : sub_warnings) warn(w + " (slot absent-coded)");

    // Stage 2: A-models describe B, the meta model learns from those rows.
    o.train_messages = emit_subpredictions(models, partitions, ds, B);
    std::vector<std::string> b_parts;
    for (auto r : B) b_parts.push_back(ds.items[r]);
    auto b_rows = aggregate(o.train_messages, units, ds.classes, marker, b_parts);
    auto y_b = labels_of(ds, B);
    if (distinct_classes(y_b) < 2) throw ExperimentError("fold " + std::to_string(f) + ": fold B holds one class");
    auto xb = meta_matrix(b_rows);
    FeatureMatrix XB(xb, B.size(), 2 * units.size());
    ForestParams meta_base;
    meta_base.seed = mix_seed(fold_seed, kMetaSalt);
    auto gs = grid_search(grid, XB, y_b, ds.classes, plan.meta_folds, meta_base);
    for (auto& w : gs.warnings) warn("meta: " + w);
    o.meta_params = {gs.best.n_estimators, gs.best.max_depth};
    auto meta = train_forest(XB, y_b, ds.classes, gs.best);

    // Scoring on the outer test fold.
    o.score_messages = emit_subpredictions(models, partitions, ds, test);
    std::vector<std::string> t_parts;
    for (auto r : test) t_parts.push_back(ds.items[r]);
    auto t_rows = aggregate(o.score_messages, units, ds.classes, marker, t_parts);
    auto xt = meta_matrix(t_rows);
    auto proba = meta.predict_proba(FeatureMatrix(xt, test.size(), 2 * units.size()));
    const std::size_t nc = ds.class_count();
    for (std::size_t i = 0; i < test.size(); ++i) {
      std::span<const double> p(proba.data() + i * nc, nc);
      int k = argmax(p);
      o.meta_pred.emplace_back(test[i], k);
      o.meta_outputs.push_back({ds.items[test[i]], ds.classes[static_cast<std::size_t>(k)], p[static_cast<std::size_t>(k)]});
    }

    std::unordered_map<std::string, std::size_t> row_of, class_of, unit_of;
    for (auto r : test) row_of[ds.items[r]] = r;
    for (std::size_t k = 0; k < nc; ++k) class_of[ds.classes[k]] = k;
    for (std::size_t u = 0; u < units.size(); ++u) unit_of[units[u]] = u;
    o.sub_pred.assign(partitions.size(), {});
    for (const auto& m : o.score_messages)
      o.sub_pred[unit_of[m.unit_id]].emplace_back(row_of[m.part_id], static_cast<int>(class_of[m.label]));

    // Bookkeeping from the rows that actually fitted each stage.
    std::vector<bool> fit_a(ds.rows(), false), fit_b(ds.rows(), false);
    for (const auto& m : models)
      for (auto r : A)
        for (const auto& p : partitions)
          if (p.unit_id == m.unit_id && p.coverage[r]) fit_a[r] = true;
    for (auto r : B) fit_b[r] = true;
    for (auto r : train) {
      std::string role = fit_a[r] && fit_b[r] ? "A+B" : fit_a[r] ? "A" : fit_b[r] ? "B" : "unused";
      o.records.push_back({ds.items[r], f, role, -1});
    }
    for (auto r : test) o.records.push_back({ds.items[r], f, "test", -1});
  });

  MetaRun run;
  run.meta.model = "meta";
  run.meta.protocol = "meta";
  run.meta.topology = plan.topology(true);
  run.meta.predictions.assign(ds.rows(), -1);
  run.subs.resize(partitions.size());
  for (std::size_t u = 0; u < partitions.size(); ++u) {
    run.subs[u].model = partitions[u].unit_id;
    run.subs[u].protocol = "meta";
    run.subs[u].topology = run.meta.topology;
    run.subs[u].predictions.assign(ds.rows(), -1);
  }
  for (auto& o : outs) {
    for (auto [i, p] : o.meta_pred) run.meta.predictions[i] = p;
    run.meta.fold_params.push_back(o.meta_params);
    run.meta.warnings.insert(run.meta.warnings.end(), o.warnings.begin(), o.warnings.end());
    for (std::size_t u = 0; u < partitions.size(); ++u) {
      for (auto [i, p] : o.sub_pred[u]) run.subs[u].predictions[i] = p;
      run.subs[u].fold_params.push_back(o.sub_params[u]);
    }
    run.folds.insert(run.folds.end(), o.records.begin(), o.records.end());
    run.train_messages.insert(run.train_messages.end(), o.train_messages.begin(), o.train_messages.end());
    run.score_messages.insert(run.score_messages.end(), o.score_messages.begin(), o.score_messages.end());
    run.meta_outputs.insert(run.meta_outputs.end(), o.meta_outputs.begin(), o.meta_outputs.end());
  }
  run.meta = finish_report(std::move(run.meta), ds, folds, plan.outer_folds);
  for (auto& s : run.subs) s = finish_report(std::move(s), ds, folds, plan.outer_folds);
  return run;
}

// ---------------------------------------------------------------------------
// Deployable stack

MetaPrediction StackModel::predict_row(const MetaFeatureRow& row) const {
  auto p = meta.predict_proba(std::span<const double>(row.values));
  int k = argmax(p);
  return {row.part_id, classes[static_cast<std::size_t>(k)], p[static_cast<std::size_t>(k)]};
}

std::vector<MetaPrediction> StackModel::predict(const Dataset& ds, const std::vector<UnitPartition>& partitions,
                                                const std::vector<std::size_t>& rows) const {
  auto messages = emit_subpredictions(units, partitions, ds, rows);
  std::vector<std::string> parts;
  for (auto r : rows) parts.push_back(ds.items[r]);
  auto meta_rows = aggregate(messages, expected_units, classes, marker, parts);
  std::vector<MetaPrediction> out;
  for (const auto& r : meta_rows) out.push_back(predict_row(r));
  return out;
}

void StackModel::save(const std::filesystem::path& dir) const {
  std::filesystem::create_directories(dir);
  json m;
  m["format"] = "metastack.meta";
  m["version"] = 1;
  m["classes"] = classes;
  m["marker"] = marker;
  m["expected_units"] = expected_units;
  m["model"] = forest_json(meta);
  std::vector<std::string> files;
  for (const auto& u : units) {
    files.push_back("unit_" + u.unit_id + ".json");
    write_text(dir / files.back(), unit_artifact_json(u, marker));
  }
  m["unit_files"] = files;
  write_text(dir / "meta.json", m.dump());
}

StackModel StackModel::load(const std::filesystem::path& dir) {
  json m;
  try {
    m = json::parse(read_text(dir / "meta.json"));
    if (m.at("format") != "metastack.meta") throw DataError("not a meta model artifact");
    StackModel s;
    s.classes = m.at("classes").get<std::vector<std::string>>();
    s.marker = m.at("marker").get<double>();
    s.expected_units = m.at("expected_units").get<std::vector<std::string>>();
    s.meta = ForestModel::from_json(m.at("model").dump());
    for (const auto& file : m.at("unit_files")) {
      auto a = parse_unit_artifact(read_text(dir / file.get<std::string>()));
      s.units.push_back({a.unit_id, {}, a.feature_ids, std::move(a.model)});
    }
    return s;
  } catch (const json::exception& e) {
    throw DataError(std::string("malformed stack artifact: ") + e.what());
  }
}

StackModel fit_stack(const Dataset& ds, const std::vector<UnitPartition>& partitions, const ParamGrid& grid,
                     const CvPlan& plan, std::vector<std::string>* warnings) {
  plan.validate();
  require_imputed(ds);
  if (!ds.marker) throw DataError("dataset has no marker; impute it first");
  auto rows = iota_rows(ds.rows());
  auto ab = stratified_folds(ds.labels, 2, mix_seed(plan.seed, kSplitSalt));
  std::vector<std::size_t> A, B;
  for (auto r : rows) (ab[r] == 0 ? A : B).push_back(r);

  StackModel s;
  s.classes = ds.classes;
  s.marker = *ds.marker;
  for (const auto& p : partitions) s.expected_units.push_back(p.unit_id);

  std::vector<ForestParams> params(partitions.size());
  const std::size_t min_covered = static_cast<std::size_t>(plan.outer_folds) * 2;
  for (std::size_t u = 0; u < partitions.size(); ++u) {
    params[u].seed = mix_seed(plan.seed, u + 1);
    std::vector<std::size_t> covered;
    for (auto r : A)
      if (partitions[u].coverage[r]) covered.push_back(r);
    auto y = labels_of(ds, covered);
    if (covered.size() < min_covered || distinct_classes(y) < 2) continue;
    auto x = gather(ds, covered, partitions[u].column_indices);
    params[u] = grid_search(grid, FeatureMatrix(x, covered.size(), partitions[u].width()), y, ds.classes,
                            plan.inner_folds, params[u])
                    .best;
  }
  s.units = train_subunits(ds, partitions, A, params, min_covered, warnings);

  auto messages = emit_subpredictions(s.units, partitions, ds, B);
  std::vector<std::string> parts;
  for (auto r : B) parts.push_back(ds.items[r]);
  auto meta_rows = aggregate(messages, s.expected_units, ds.classes, s.marker, parts);
  auto y_b = labels_of(ds, B);
  if (distinct_classes(y_b) < 2) throw ExperimentError("fold B holds a single class");
  auto xb = meta_matrix(meta_rows);
  FeatureMatrix XB(xb, B.size(), 2 * partitions.size());
  ForestParams meta_base;
  meta_base.seed = mix_seed(plan.seed, kMetaSalt);
  auto best = grid_search(grid, XB, y_b, ds.classes, plan.meta_folds, meta_base).best;
  s.meta = train_forest(XB, y_b, ds.classes, best);
  return s;
}

std::string unit_artifact_json(const UnitModel& unit, double marker) {
  json j;
  j["format"] = "metastack.unit";
  j["version"] = 1;
  j["unit_id"] = unit.unit_id;
  j["feature_ids"] = unit.feature_ids;
  j["marker"] = marker;
  j["model"] = forest_json(unit.model);
  return j.dump();
}

UnitArtifact parse_unit_artifact(const std::string& text) {
  try {
    auto j = json::parse(text);
    if (j.at("format") != "metastack.unit") throw DataError("not a unit model artifact");
    UnitArtifact a;
    a.unit_id = j.at("unit_id").get<std::string>();
    a.feature_ids = j.at("feature_ids").get<std::vector<std::string>>();
    a.marker = j.at("marker").get<double>();
    a.model = ForestModel::from_json(j.at("model").dump());
    if (a.model.feature_width() != a.feature_ids.size())
      throw DataError("unit artifact lists " + std::to_string(a.feature_ids.size()) + " features for a model of width " +
                      std::to_string(a.model.feature_width()));
    return a;
  } catch (const json::exception& e) {
    throw DataError(std::string("malformed unit artifact: ") + e.what());
  }
}

}  // namespace metastack
