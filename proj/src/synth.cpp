#include "metastack/synth.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <optional>
#include <random>
#include <sstream>

namespace metastack {

void SynthSpec::validate() const {
  if (unit_feature_counts.empty()) throw DataError("synthetic spec needs at least one unit");
  if (visit_probabilities.size() != unit_feature_counts.size())
    throw DataError("visit probabilities must match the number of units");
  for (int n : unit_feature_counts)
    if (n < 1) throw DataError("every unit needs at least one feature");
  for (double p : visit_probabilities)
    if (!(p > 0.0 && p <= 1.0)) throw DataError("visit probabilities must lie in (0, 1]");
  if (n_items < 1) throw DataError("synthetic spec needs at least one item");
  if (!(class_prior > 0.0 && class_prior < 1.0)) throw DataError("class prior must lie in (0, 1)");
  if (!(signal_strength >= 0.0 && signal_strength <= 1.0))
    throw DataError("signal strength must lie in [0, 1]");
  if (dates_per_unit < 0) throw DataError("dates per unit must be non-negative");
}

SynthResult generate_synthetic_with_truth(const SynthSpec& spec) {
  spec.validate();
  const std::size_t k = spec.unit_feature_counts.size();
  const std::size_t n = static_cast<std::size_t>(spec.n_items);
  const double flip_rate = (1.0 - spec.signal_strength) / 2.0;
  const double clean_rate =
      spec.signal_strength > 0.0 ? (spec.class_prior - flip_rate) / spec.signal_strength : spec.class_prior;
  if (!(clean_rate > 0.0 && clean_rate < 1.0))
    throw DataError("class prior unreachable at this signal strength");

  SynthResult result;
  Dataset& ds = result.dataset;
  SynthTruth& truth = result.truth;
  ds.classes = {"no scrap", "scrap"};

  // Column layout: per unit, numeric features then raw dates.
  std::vector<std::size_t> unit_first_col(k), unit_first_date(k);
  int feature_no = 0;
  for (std::size_t u = 0; u < k; ++u) {
    unit_first_col[u] = ds.columns.size();
    for (int f = 0; f < spec.unit_feature_counts[u]; ++f, ++feature_no)
      ds.columns.push_back({FeatureId{static_cast<int>(u), feature_no / 4, feature_no, FeatureId::Kind::numeric},
                            ColumnKind::numeric});
    unit_first_date[u] = ds.columns.size();
    for (int d = 0; d < spec.dates_per_unit; ++d, ++feature_no)
      ds.columns.push_back({FeatureId{static_cast<int>(u), feature_no / 4, feature_no, FeatureId::Kind::date},
                            ColumnKind::date});
  }
  const std::size_t width = ds.columns.size();
  ds.values.assign(n * width, kMissing);
  ds.items.resize(n);
  truth.visited.assign(n, std::vector<bool>(k, false));
  truth.latent_score.assign(n, 0.0);
  truth.sign_sum.assign(n, 0);

  std::mt19937_64 rng(spec.seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  constexpr double kFeatureNoise = 0.35;

  const std::size_t id_width = std::max<std::size_t>(3, std::to_string(n).size());
  for (std::size_t i = 0; i < n; ++i) {
    std::string id = std::to_string(i + 1);
    ds.items[i] = "#" + std::string(id_width - id.size(), '0') + id;
    double* row = &ds.values[i * width];
    double clock = std::round(static_cast<double>(i) * 0.37 * 100.0) / 100.0;
    for (std::size_t u = 0; u < k; ++u) {
      if (unif(rng) >= spec.visit_probabilities[u]) {
        truth.missing_cells += static_cast<std::size_t>(spec.unit_feature_counts[u] + spec.dates_per_unit);
        continue;
      }
      truth.visited[i][u] = true;
      double z = normal(rng);
      int nf = spec.unit_feature_counts[u];
      double g = 0.0;
      int used = std::min(nf, 3);
      for (int f = 0; f < nf; ++f) {
        double v = f < 3 ? z + kFeatureNoise * normal(rng) : normal(rng);
        row[unit_first_col[u] + static_cast<std::size_t>(f)] = v;
        if (f < 3) g += v;
      }
      g /= used;
      truth.latent_score[i] += g;
      truth.sign_sum[i] += g >= 0.0 ? 1 : -1;
      for (int d = 0; d < spec.dates_per_unit; ++d) {
        clock += std::round((0.05 + unif(rng)) * 100.0) / 100.0;
        row[unit_first_date[u] + static_cast<std::size_t>(d)] = clock;
      }
    }
  }

  // Threshold on (sign_sum, latent_score) at the clean-rate quantile.
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (truth.sign_sum[a] != truth.sign_sum[b]) return truth.sign_sum[a] > truth.sign_sum[b];
    return truth.latent_score[a] > truth.latent_score[b];
  });
  auto positives = static_cast<std::size_t>(std::llround(clean_rate * static_cast<double>(n)));
  if (positives == 0 || positives >= n) throw DataError("class prior unreachable: threshold selects no items");
  std::size_t pivot = order[positives - 1];
  truth.sign_threshold = truth.sign_sum[pivot];
  truth.score_threshold = truth.latent_score[pivot];

  std::mt19937_64 flip_rng(mix_seed(spec.seed, 1));
  std::uniform_real_distribution<double> flip_unif(0.0, 1.0);
  truth.clean_label.resize(n);
  ds.labels.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    bool positive = truth.sign_sum[i] > truth.sign_threshold ||
                    (truth.sign_sum[i] == truth.sign_threshold && truth.latent_score[i] >= truth.score_threshold);
    truth.clean_label[i] = positive ? 1 : 0;
    bool flip = flip_unif(flip_rng) < flip_rate;
    ds.labels[i] = flip ? 1 - truth.clean_label[i] : truth.clean_label[i];
  }
  ds.validate();
  return result;
}

Dataset generate_synthetic(const SynthSpec& spec) { return generate_synthetic_with_truth(spec).dataset; }

namespace {

std::vector<double> parse_list(const std::string& text) {
  std::vector<double> out;
  std::stringstream ss(text);
  std::string tok;
  while (std::getline(ss, tok, ':')) {
    double v;
    if (!parse_double(tok, v)) throw DataError("bad number in synthetic spec: '" + tok + "'");
    out.push_back(v);
  }
  return out;
}

}  // namespace

SynthSpec parse_synth_spec(const std::string& text) {
  SynthSpec spec;
  std::stringstream ss(text);
  std::string tok;
  std::optional<int> k, per_unit;
  while (std::getline(ss, tok, ',')) {
    if (tok.empty() || tok == "default") continue;
    auto eq = tok.find('=');
    if (eq == std::string::npos) throw DataError("bad synthetic spec token '" + tok + "'");
    std::string key = tok.substr(0, eq), val = tok.substr(eq + 1);
    double num = 0.0;
    bool is_num = parse_double(val, num);
    auto need_num = [&] {
      if (!is_num) throw DataError("synthetic spec value for '" + key + "' is not a number");
      return num;
    };
    if (key == "k") {
      k = static_cast<int>(need_num());
    } else if (key == "n") {
      per_unit = static_cast<int>(need_num());
    } else if (key == "units") {
      spec.unit_feature_counts.clear();
      for (double v : parse_list(val)) spec.unit_feature_counts.push_back(static_cast<int>(v));
    } else if (key == "items") {
      spec.n_items = static_cast<int>(need_num());
    } else if (key == "visits") {
      spec.visit_probabilities = parse_list(val);
    } else if (key == "signal") {
      spec.signal_strength = need_num();
    } else if (key == "prior") {
      spec.class_prior = need_num();
    } else if (key == "seed") {
      spec.seed = static_cast<std::uint64_t>(need_num());
    } else if (key == "dates") {
      spec.dates_per_unit = static_cast<int>(need_num());
    } else {
      throw DataError("unknown synthetic spec key '" + key + "'");
    }
  }
  if (k || per_unit) {
    int units = k.value_or(static_cast<int>(spec.unit_feature_counts.size()));
    int width = per_unit.value_or(spec.unit_feature_counts.empty() ? 16 : spec.unit_feature_counts.front());
    if (units < 1) throw DataError("k must be positive");
    spec.unit_feature_counts.assign(static_cast<std::size_t>(units), width);
    if (spec.visit_probabilities.size() != static_cast<std::size_t>(units))
      spec.visit_probabilities.resize(static_cast<std::size_t>(units), 1.0);
  }
  spec.validate();
  return spec;
}

}  // namespace metastack
