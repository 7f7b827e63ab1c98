#pragma once

// Unit-boundary messages: canonical encoding, transcripts, the
// confidentiality audit and data-volume accounting.

#include <cstdint>
#include <filesystem>
#include <map>
#include <mutex>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <unordered_map>
#include <unordered_set>
#include <variant>
#include <vector>

#include "metastack/dataset.hpp"
#include "metastack/stacking.hpp"

namespace metastack {

enum class MessageKind { sub_prediction, meta_prediction, raw_row };

std::string kind_name(MessageKind kind);
std::optional<MessageKind> parse_kind(std::string_view name);

using FieldValue = std::variant<std::string, double>;

/// A message crossing a unit boundary. The canonical encoding is a flat JSON
/// object with sorted keys, no whitespace and shortest round-trip numbers;
/// "kind" sits next to the payload fields.
struct BoundaryMessage {
  MessageKind kind = MessageKind::sub_prediction;
  std::map<std::string, FieldValue> payload;

  /// Throws DataError for an empty payload, a non-finite number or a payload
  /// field named "kind".
  std::string encode() const;
  /// Throws DataError for malformed text, an unknown kind, an empty payload
  /// or a field that is neither a string nor a number.
  static BoundaryMessage decode(std::string_view bytes);
  std::size_t byte_size() const { return encode().size(); }

  static BoundaryMessage from(const SubPrediction& p);
  static BoundaryMessage from(const MetaPrediction& p);
  /// Observed cells of one unit for one item.
  static BoundaryMessage raw_row(const std::string& part_id, const std::string& unit_id,
                                 const std::vector<std::pair<std::string, double>>& cells);

  SubPrediction to_subprediction() const;  // throws DataError on a schema mismatch
  MetaPrediction to_metaprediction() const;

  friend bool operator==(const BoundaryMessage&, const BoundaryMessage&) = default;
};

/// Payload fields that identify a message rather than carry a value.
bool is_identifier_field(std::string_view name);

struct TranscriptEntry {
  std::string phase;  // e.g. "train", "score", "pool"
  std::string from;
  std::string to;
  BoundaryMessage message;
};

/// Append-only record of every boundary crossing of a run.
class Transcript {
 public:
  Transcript() = default;
  Transcript(const Transcript& other);
  Transcript& operator=(const Transcript& other);

  void record(std::string phase, std::string from, std::string to, BoundaryMessage message);
  std::vector<TranscriptEntry> entries() const;
  std::size_t size() const;

  /// Newline-delimited canonical messages.
  void save(const std::filesystem::path& path) const;
  /// Reads a saved transcript; the sender is taken from the unit_id field
  /// ("meta" when absent).
  static Transcript load(const std::filesystem::path& path);

 private:
  mutable std::mutex mutex_;
  std::vector<TranscriptEntry> entries_;
};

/// Analytic data volume per scenario.
struct VolumeAccount {
  int k = 0;
  int m = 0;
  std::vector<std::int64_t> n_i;
  double s = 1.0;
  std::int64_t sum_n = 0;
  double scenario1 = 0.0;
  double scenario2 = 0.0;
  double scenario3 = 0.0;
  double savings = 0.0;
  /// k*m / sum(n_i) in lowest terms.
  std::int64_t ratio_num = 0;
  std::int64_t ratio_den = 1;
  std::vector<std::string> warnings;

  double ratio() const { return static_cast<double>(ratio_num) / static_cast<double>(ratio_den); }
  /// e.g. "0.81%"
  std::string ratio_percent(int decimals = 2) const;
};

/// Throws DataError unless k, m, s and every n_i are positive and
/// n_i.size() == k. Warns when m exceeds some n_i.
VolumeAccount account_volume(int k, int m, const std::vector<std::int64_t>& n_i, double s = 1.0);

struct TrafficTotals {
  std::size_t messages = 0;
  std::size_t bytes = 0;
  std::size_t value_fields = 0;  // payload fields other than identifiers
};

struct TrafficReport {
  std::map<std::string, TrafficTotals> by_channel;  // "phase from->to"
  TrafficTotals total;
};

TrafficReport measure_traffic(const std::vector<TranscriptEntry>& transcript);

/// Bit patterns of every observed raw cell, per unit id.
struct RawValueIndex {
  std::unordered_map<std::string, std::unordered_set<std::uint64_t>> by_unit;

  static RawValueIndex build(const Dataset& dataset, const std::vector<UnitPartition>& partitions);
  bool contains(const std::string& unit_id, double value) const;
};

struct AuditViolation {
  std::size_t message_index = 0;
  std::string field;
  std::string rule;  // "raw_row", "feature_name" or "raw_value"
};

struct AuditVerdict {
  std::size_t messages_scanned = 0;
  std::vector<AuditViolation> violations;
  bool pass = true;
  /// Indices of messages with at least one violation.
  std::set<std::size_t> flagged_messages() const;
};

/// A message violates confidentiality if it is a raw_row, if a field name is
/// a feature name (listed or parseable), or if a numeric field equals a raw
/// cell of the sending unit bit for bit.
AuditVerdict audit_confidentiality(const std::vector<TranscriptEntry>& transcript,
                                   const std::set<std::string>& raw_feature_ids, const RawValueIndex& index);

}  // namespace metastack
