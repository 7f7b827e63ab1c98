#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "metastack/dataset.hpp"

namespace metastack {

/// Desk-scale stand-in for a multi-unit production dataset.
///
/// Each visited unit u draws a latent z ~ N(0, 1); its first three features
/// are z plus small independent noise, the rest are pure noise. The latent
/// score g_u is the mean of the first three features. The label is 1 iff the
/// key (sum of sign(g_u) over visited units, sum of g_u) reaches the quantile
/// that yields the requested prior after label flipping, and is then flipped
/// with probability (1 - signal_strength) / 2.
struct SynthSpec {
  std::vector<int> unit_feature_counts{16, 16, 16, 16};
  int n_items = 20000;
  std::vector<double> visit_probabilities{1.0, 0.3, 0.3, 0.87};
  double signal_strength = 0.9;
  double class_prior = 0.3;
  std::uint64_t seed = 7;
  /// Raw date columns per unit (0 = none).
  int dates_per_unit = 0;

  void validate() const;  // throws DataError
};

/// Generator bookkeeping, kept outside the dataset so tests can check the
/// plant independently.
struct SynthTruth {
  std::vector<std::vector<bool>> visited;  // [item][unit]
  std::vector<double> latent_score;        // per item, sum of g_u over visited units
  std::vector<int> sign_sum;
  std::vector<int> clean_label;  // before flipping
  int sign_threshold = 0;
  double score_threshold = 0.0;  // tie-break on latent_score when sign_sum == sign_threshold
  std::size_t missing_cells = 0;
};

struct SynthResult {
  Dataset dataset;
  SynthTruth truth;
};

SynthResult generate_synthetic_with_truth(const SynthSpec& spec);
Dataset generate_synthetic(const SynthSpec& spec);

/// Parses "default" or a comma list such as
/// "k=4,n=16,items=20000,visits=1:0.3:0.3:0.87,signal=0.9,prior=0.3,dates=0".
SynthSpec parse_synth_spec(const std::string& text);

}  // namespace metastack
