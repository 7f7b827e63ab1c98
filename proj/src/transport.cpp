#include "metastack/transport.hpp"

#include <bit>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include "json.hpp"

namespace metastack {

namespace {

using json = nlohmann::json;

const std::string& string_field(const BoundaryMessage& m, const std::string& key) {
  auto it = m.payload.find(key);
  if (it == m.payload.end() || !std::holds_alternative<std::string>(it->second))
    throw DataError(kind_name(m.kind) + " message lacks string field " + key);
  return std::get<std::string>(it->second);
}

double number_field(const BoundaryMessage& m, const std::string& key) {
  auto it = m.payload.find(key);
  if (it == m.payload.end() || !std::holds_alternative<double>(it->second))
    throw DataError(kind_name(m.kind) + " message lacks numeric field " + key);
  return std::get<double>(it->second);
}

std::string percent(std::int64_t num, std::int64_t den, int decimals) {
  std::ostringstream out;
  out.setf(std::ios::fixed);
  out.precision(decimals);
  out << 100.0L * static_cast<long double>(num) / static_cast<long double>(den) << "%";
  return out.str();
}

}  // namespace

std::string kind_name(MessageKind kind) {
  switch (kind) {
    case MessageKind::sub_prediction:
      return "sub_prediction";
    case MessageKind::meta_prediction:
      return "meta_prediction";
    case MessageKind::raw_row:
      return "raw_row";
  }
  return "unknown";
}

std::optional<MessageKind> parse_kind(std::string_view name) {
  if (name == "sub_prediction") return MessageKind::sub_prediction;
  if (name == "meta_prediction") return MessageKind::meta_prediction;
  if (name == "raw_row") return MessageKind::raw_row;
  return std::nullopt;
}

bool is_identifier_field(std::string_view name) { return name == "part_id" || name == "unit_id"; }

std::string BoundaryMessage::encode() const {
  if (payload.empty()) throw DataError("message payload is empty");
  json j = json::object();
  for (const auto& [key, value] : payload) {
    if (key == "kind") throw DataError("payload field name 'kind' is reserved");
    if (const double* d = std::get_if<double>(&value)) {
      if (!std::isfinite(*d)) throw DataError("field " + key + " is not finite");
      j[key] = *d;
    } else {
      j[key] = std::get<std::string>(value);
    }
  }
  j["kind"] = kind_name(kind);
  return j.dump();
}

BoundaryMessage BoundaryMessage::decode(std::string_view bytes) {
  json j;
  try {
    j = json::parse(bytes);
  } catch (const json::exception& e) {
    throw DataError(std::string("malformed message: ") + e.what());
  }
  if (!j.is_object()) throw DataError("message is not a JSON object");
  auto k = j.find("kind");
  if (k == j.end() || !k->is_string()) throw DataError("message has no kind");
  auto kind = parse_kind(k->get<std::string>());
  if (!kind) throw DataError("unknown message kind '" + k->get<std::string>() + "'");
  BoundaryMessage m;
  m.kind = *kind;
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (it.key() == "kind") continue;
    if (it->is_string())
      m.payload[it.key()] = it->get<std::string>();
    else if (it->is_number())
      m.payload[it.key()] = it->get<double>();
    else
      throw DataError("field " + it.key() + " must be a string or a number");
  }
  if (m.payload.empty()) throw DataError("message payload is empty");
  return m;
}

BoundaryMessage BoundaryMessage::from(const SubPrediction& p) {
  return {MessageKind::sub_prediction,
          {{"part_id", p.part_id}, {"unit_id", p.unit_id}, {"prediction", p.label}, {"probability", p.certainty}}};
}

BoundaryMessage BoundaryMessage::from(const MetaPrediction& p) {
  return {MessageKind::meta_prediction,
          {{"part_id", p.part_id}, {"prediction", p.label}, {"probability", p.certainty}}};
}

BoundaryMessage BoundaryMessage::raw_row(const std::string& part_id, const std::string& unit_id,
                                         const std::vector<std::pair<std::string, double>>& cells) {
  BoundaryMessage m{MessageKind::raw_row, {{"part_id", part_id}, {"unit_id", unit_id}}};
  for (const auto& [name, value] : cells) m.payload[name] = value;
  return m;
}

SubPrediction BoundaryMessage::to_subprediction() const {
  if (kind != MessageKind::sub_prediction) throw DataError("not a sub_prediction message");
  return {string_field(*this, "part_id"), string_field(*this, "unit_id"), string_field(*this, "prediction"),
          number_field(*this, "probability")};
}

MetaPrediction BoundaryMessage::to_metaprediction() const {
  if (kind != MessageKind::meta_prediction) throw DataError("not a meta_prediction message");
  return {string_field(*this, "part_id"), string_field(*this, "prediction"), number_field(*this, "probability")};
}

// ---------------------------------------------------------------------------

Transcript::Transcript(const Transcript& other) : entries_(other.entries()) {}

Transcript& Transcript::operator=(const Transcript& other) {
  if (this != &other) {
    auto copy = other.entries();
    std::lock_guard lock(mutex_);
    entries_ = std::move(copy);
  }
  return *this;
}

void Transcript::record(std::string phase, std::string from, std::string to, BoundaryMessage message) {
  std::lock_guard lock(mutex_);
  entries_.push_back({std::move(phase), std::move(from), std::move(to), std::move(message)});
}

std::vector<TranscriptEntry> Transcript::entries() const {
  std::lock_guard lock(mutex_);
  return entries_;
}

std::size_t Transcript::size() const {
  std::lock_guard lock(mutex_);
  return entries_.size();
}

void Transcript::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  for (const auto& e : entries()) out << e.message.encode() << '\n';
}

Transcript Transcript::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  Transcript t;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    auto m = BoundaryMessage::decode(line);
    auto it = m.payload.find("unit_id");
    std::string from =
        it != m.payload.end() && std::holds_alternative<std::string>(it->second) ? std::get<std::string>(it->second)
                                                                                 : "meta";
    t.record("", from, "", std::move(m));
  }
  return t;
}

// ---------------------------------------------------------------------------

std::string VolumeAccount::ratio_percent(int decimals) const { return percent(ratio_num, ratio_den, decimals); }

VolumeAccount account_volume(int k, int m, const std::vector<std::int64_t>& n_i, double s) {
  if (k <= 0 || m <= 0 || !(s > 0.0)) throw DataError("k, m and s must be positive");
  if (n_i.size() != static_cast<std::size_t>(k)) throw DataError("need one feature count per unit");
  VolumeAccount v;
  v.k = k;
  v.m = m;
  v.n_i = n_i;
  v.s = s;
  for (auto n : n_i) {
    if (n <= 0) throw DataError("feature counts must be positive");
    if (n < m) v.warnings.push_back("a unit has fewer features (" + std::to_string(n) + ") than outputs per model");
    v.sum_n += n;
  }
  const std::int64_t km = static_cast<std::int64_t>(k) * m;
  v.scenario2 = static_cast<double>(km) * s;
  v.scenario3 = static_cast<double>(v.sum_n) * s;
  v.savings = static_cast<double>(v.sum_n - km) * s;
  std::int64_t g = std::gcd(km, v.sum_n);
  v.ratio_num = km / g;
  v.ratio_den = v.sum_n / g;
  return v;
}

TrafficReport measure_traffic(const std::vector<TranscriptEntry>& transcript) {
  TrafficReport r;
  for (const auto& e : transcript) {
    std::size_t bytes = e.message.byte_size();
    std::size_t fields = 0;
    for (const auto& [key, value] : e.message.payload) fields += is_identifier_field(key) ? 0 : 1;
    auto& c = r.by_channel[e.phase + " " + e.from + "->" + e.to];
    for (auto* t : {&c, &r.total}) {
      t->messages += 1;
      t->bytes += bytes;
      t->value_fields += fields;
    }
  }
  return r;
}

RawValueIndex RawValueIndex::build(const Dataset& ds, const std::vector<UnitPartition>& partitions) {
  RawValueIndex idx;
  for (const auto& p : partitions) {
    auto& set = idx.by_unit[p.unit_id];
    for (std::size_t r = 0; r < ds.rows(); ++r)
      for (auto c : p.column_indices)
        if (ds.observed(r, c)) set.insert(std::bit_cast<std::uint64_t>(ds.at(r, c)));
  }
  return idx;
}

bool RawValueIndex::contains(const std::string& unit_id, double value) const {
  auto it = by_unit.find(unit_id);
  return it != by_unit.end() && it->second.count(std::bit_cast<std::uint64_t>(value)) > 0;
}

std::set<std::size_t> AuditVerdict::flagged_messages() const {
  std::set<std::size_t> out;
  for (const auto& v : violations) out.insert(v.message_index);
  return out;
}

AuditVerdict audit_confidentiality(const std::vector<TranscriptEntry>& transcript,
                                   const std::set<std::string>& raw_feature_ids, const RawValueIndex& index) {
  AuditVerdict v;
  for (std::size_t i = 0; i < transcript.size(); ++i) {
    const auto& e = transcript[i];
    ++v.messages_scanned;
    if (e.message.kind == MessageKind::raw_row) v.violations.push_back({i, "kind", "raw_row"});
    std::string sender = e.from;
    auto u = e.message.payload.find("unit_id");
    if (u != e.message.payload.end() && std::holds_alternative<std::string>(u->second))
      sender = std::get<std::string>(u->second);
    for (const auto& [key, value] : e.message.payload) {
      if (raw_feature_ids.count(key) || FeatureId::try_parse(key)) v.violations.push_back({i, key, "feature_name"});
      if (const double* d = std::get_if<double>(&value); d && index.contains(sender, *d))
        v.violations.push_back({i, key, "raw_value"});
    }
  }
  v.pass = v.violations.empty();
  return v;
}

}  // namespace metastack
