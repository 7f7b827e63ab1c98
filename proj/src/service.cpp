#include "metastack/service.hpp"

#include <algorithm>
#include <chrono>
#include <fstream>
#include <iostream>
#include <random>
#include <sstream>

#include "httplib.h"
#include "json.hpp"
#include "metastack/common.hpp"

namespace metastack {

namespace {

using json = nlohmann::json;

HttpReply error_reply(int status, const std::string& message) {
  json j;
  j["error"] = message;
  return {status, j.dump(), {}};
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

}  // namespace

// ---------------------------------------------------------------------------
// Configuration

std::string ServiceConfig::to_json() const {
  json j;
  j["unit_id"] = unit_id;
  j["listen"] = listen;
  j["downstream"] = downstream;
  j["model"] = model.string();
  j["expected_units"] = expected_units;
  if (marker) j["marker"] = *marker;
  j["forward_attempts"] = forward_attempts;
  j["backoff_ms"] = backoff_ms;
  return j.dump();
}

ServiceConfig ServiceConfig::from_json(const std::string& text) {
  try {
    auto j = json::parse(text);
    ServiceConfig c;
    c.unit_id = j.at("unit_id").get<std::string>();
    c.listen = j.value("listen", c.listen);
    c.downstream = j.value("downstream", std::string());
    c.model = j.at("model").get<std::string>();
    c.expected_units = j.value("expected_units", std::vector<std::string>{});
    if (j.contains("marker")) c.marker = j.at("marker").get<double>();
    c.forward_attempts = j.value("forward_attempts", c.forward_attempts);
    c.backoff_ms = j.value("backoff_ms", c.backoff_ms);
    if (c.forward_attempts < 1 || c.backoff_ms < 0) throw DataError("forward_attempts must be >= 1, backoff_ms >= 0");
    return c;
  } catch (const json::exception& e) {
    throw DataError(std::string("malformed service config: ") + e.what());
  }
}

std::pair<std::string, int> parse_address(const std::string& address) {
  auto colon = address.rfind(':');
  if (colon == std::string::npos || colon == 0) throw DataError("address must be host:port, got '" + address + "'");
  double port = 0;
  if (!parse_double(address.substr(colon + 1), port) || port < 0 || port > 65535 || port != static_cast<int>(port))
    throw DataError("bad port in '" + address + "'");
  return {address.substr(0, colon), static_cast<int>(port)};
}

// ---------------------------------------------------------------------------
// Assembly buffer

std::vector<SubPrediction> AssemblyBuffer::upsert(const SubPrediction& message, bool* replaced) {
  std::lock_guard lock(mutex_);
  auto& part = messages_[message.part_id];
  bool had = part.count(message.unit_id) > 0;
  part[message.unit_id] = message;
  if (replaced) *replaced = had;
  std::vector<SubPrediction> out;
  for (const auto& [unit, m] : part) out.push_back(m);
  return out;
}

std::vector<SubPrediction> AssemblyBuffer::messages(const std::string& part_id) const {
  std::lock_guard lock(mutex_);
  std::vector<SubPrediction> out;
  auto it = messages_.find(part_id);
  if (it != messages_.end())
    for (const auto& [unit, m] : it->second) out.push_back(m);
  return out;
}

void AssemblyBuffer::set_result(const MetaPrediction& result) {
  std::lock_guard lock(mutex_);
  results_[result.part_id] = result;
}

std::optional<MetaPrediction> AssemblyBuffer::result(const std::string& part_id) const {
  std::lock_guard lock(mutex_);
  auto it = results_.find(part_id);
  if (it == results_.end()) return std::nullopt;
  return it->second;
}

std::size_t AssemblyBuffer::parts() const {
  std::lock_guard lock(mutex_);
  return messages_.size();
}

// ---------------------------------------------------------------------------
// HTTP plumbing

struct HttpService::Server {
  httplib::Server http;
};

HttpService::HttpService() : server_(std::make_unique<Server>()) {
  server_->http.Post("/predict", [this](const httplib::Request& req, httplib::Response& res) {
    HttpReply reply;
    try {
      reply = handle(req.body);
    } catch (const std::exception& e) {
      reply = error_reply(500, e.what());
    }
    res.status = reply.status;
    for (const auto& [k, v] : reply.headers) res.set_header(k, v);
    res.set_content(reply.body, "application/json");
  });
}

HttpService::~HttpService() { stop(); }

int HttpService::bind(const std::string& listen) {
  auto [host, port] = parse_address(listen);
  host_ = host;
  if (port == 0) {
    port_ = server_->http.bind_to_any_port(host);
    if (port_ < 0) throw DataError("cannot bind " + listen);
  } else {
    if (!server_->http.bind_to_port(host, port)) throw DataError("cannot bind " + listen);
    port_ = port;
  }
  return port_;
}

int HttpService::start(const std::string& listen) {
  int port = bind(listen);
  thread_ = std::thread([this] { server_->http.listen_after_bind(); });
  server_->http.wait_until_ready();
  return port;
}

void HttpService::run(const std::string& listen) {
  bind(listen);
  server_->http.listen_after_bind();
}

void HttpService::stop() {
  if (server_) server_->http.stop();
  if (thread_.joinable()) thread_.join();
}

std::string HttpService::address() const { return host_ + ":" + std::to_string(port_); }

// ---------------------------------------------------------------------------
// Sub-unit service

SubUnitService::SubUnitService(UnitArtifact artifact, ServiceConfig config, Transcript* sink)
    : artifact_(std::move(artifact)), config_(std::move(config)), sink_(sink) {
  marker_ = config_.marker.value_or(artifact_.marker);
  for (std::size_t i = 0; i < artifact_.feature_ids.size(); ++i) column_of_[artifact_.feature_ids[i]] = i;
  if (config_.unit_id.empty()) config_.unit_id = artifact_.unit_id;
  if (config_.unit_id != artifact_.unit_id)
    throw DataError("service configured as " + config_.unit_id + " but the artifact belongs to " + artifact_.unit_id);
}

SubUnitService::~SubUnitService() { stop(); }

HttpReply SubUnitService::handle(const std::string& body) {
  json j;
  try {
    j = json::parse(body);
  } catch (const json::exception& e) {
    return error_reply(400, std::string("malformed body: ") + e.what());
  }
  if (!j.is_object() || !j.contains("part_id") || !j["part_id"].is_string())
    return error_reply(400, "body needs a string part_id");
  const auto part_id = j["part_id"].get<std::string>();
  std::vector<double> row(artifact_.feature_ids.size(), marker_);
  if (j.contains("features")) {
    const auto& f = j["features"];
    if (!f.is_object()) return error_reply(400, "features must be an object");
    for (auto it = f.begin(); it != f.end(); ++it) {
      auto col = column_of_.find(it.key());
      if (col == column_of_.end()) return error_reply(422, "unknown feature " + it.key() + " for unit " + unit_id());
      if (!it->is_number()) return error_reply(400, "feature " + it.key() + " is not a number");
      row[col->second] = it->get<double>();
    }
  }

  auto proba = artifact_.model.predict_proba(std::span<const double>(row));
  auto message = BoundaryMessage::from(make_subprediction(part_id, unit_id(), proba, artifact_.model.classes()));
  HttpReply reply{200, message.encode(), {}};
  if (config_.downstream.empty()) return reply;

  if (sink_) sink_->record("score", unit_id(), "meta", message);
  auto [host, port] = parse_address(config_.downstream);
  std::string failure;
  for (int attempt = 0; attempt < config_.forward_attempts; ++attempt) {
    if (attempt > 0) std::this_thread::sleep_for(std::chrono::milliseconds(config_.backoff_ms << (attempt - 1)));
    httplib::Client client(host, port);
    client.set_connection_timeout(1, 0);
    client.set_read_timeout(10, 0);
    auto res = client.Post("/predict", reply.body, "application/json");
    if (!res) {
      failure = "meta service unreachable: " + httplib::to_string(res.error());
      continue;
    }
    if (res->status == 200) {
      reply.headers[kMetaResponseHeader] = res->body;
      return reply;
    }
    failure = "meta service answered " + std::to_string(res->status) + ": " + res->body;
    break;
  }
  std::cerr << "metastack: " << unit_id() << " dropped " << part_id << " after forward failure: " << failure << "\n";
  reply.status = 502;
  reply.headers["X-Forward-Error"] = failure;
  return reply;
}

// ---------------------------------------------------------------------------
// Meta service

MetaService::MetaService(StackModel meta, ServiceConfig config, Transcript* sink)
    : model_(std::move(meta)), config_(std::move(config)), sink_(sink) {
  if (!config_.expected_units.empty()) model_.expected_units = config_.expected_units;
  if (config_.marker) model_.marker = *config_.marker;
  if (model_.expected_units.empty()) throw DataError("meta service needs the expected units");
  if (model_.meta.feature_width() != 2 * model_.expected_units.size())
    throw DataError("meta model width does not match the expected units");
}

MetaService::~MetaService() { stop(); }

HttpReply MetaService::handle(const std::string& body) {
  SubPrediction sub;
  try {
    sub = BoundaryMessage::decode(body).to_subprediction();
  } catch (const DataError& e) {
    return error_reply(400, e.what());
  }
  if (std::find(model_.expected_units.begin(), model_.expected_units.end(), sub.unit_id) ==
      model_.expected_units.end())
    return error_reply(422, "unknown unit " + sub.unit_id);
  if (std::find(model_.classes.begin(), model_.classes.end(), sub.label) == model_.classes.end())
    return error_reply(422, "unknown label " + sub.label);

  auto held = buffer_.upsert(sub);
  auto rows = aggregate(held, model_.expected_units, model_.classes, model_.marker, {sub.part_id});
  auto result = model_.predict_row(rows.front());
  buffer_.set_result(result);
  auto message = BoundaryMessage::from(result);
  if (sink_) sink_->record("result", "meta", "client", message);
  return {200, message.encode(), {}};
}

StackModel load_meta_artifact(const std::filesystem::path& meta_json) {
  try {
    auto m = json::parse(read_file(meta_json));
    if (m.at("format") != "metastack.meta") throw DataError("not a meta model artifact");
    StackModel s;
    s.classes = m.at("classes").get<std::vector<std::string>>();
    s.marker = m.at("marker").get<double>();
    s.expected_units = m.at("expected_units").get<std::vector<std::string>>();
    s.meta = ForestModel::from_json(m.at("model").dump());
    return s;
  } catch (const json::exception& e) {
    throw DataError(std::string("malformed meta artifact: ") + e.what());
  }
}

// ---------------------------------------------------------------------------
// Replay

ReplayResult replay(const Dataset& ds, const std::vector<UnitPartition>& partitions,
                    const std::map<std::string, std::string>& unit_addresses, const ReplayOptions& options) {
  ReplayResult result;
  result.outcomes.resize(ds.rows());
  std::vector<std::pair<std::string, int>> endpoints(partitions.size(), {"", -1});
  for (std::size_t u = 0; u < partitions.size(); ++u) {
    auto it = unit_addresses.find(partitions[u].unit_id);
    if (it != unit_addresses.end()) endpoints[u] = parse_address(it->second);
  }

  auto deliver_part = [&](std::size_t r) {
    ReplayOutcome& out = result.outcomes[r];
    out.part_id = ds.items[r];
    std::vector<std::size_t> order;
    for (std::size_t u = 0; u < partitions.size(); ++u)
      if (endpoints[u].second >= 0 && partitions[u].coverage[r]) order.push_back(u);
    if (options.shuffle_seed) {
      std::mt19937_64 rng(mix_seed(*options.shuffle_seed, r));
      std::shuffle(order.begin(), order.end(), rng);
    }
    if (order.empty()) {
      out.error = "no unit covers this part";
      return;
    }
    std::optional<MetaPrediction> last;
    for (auto u : order) {
      json body;
      body["part_id"] = ds.items[r];
      body["features"] = json::object();
      for (auto c : partitions[u].column_indices)
        if (ds.observed(r, c)) body["features"][ds.columns[c].id.str()] = ds.at(r, c);
      httplib::Client client(endpoints[u].first, endpoints[u].second);
      client.set_connection_timeout(1, 0);
      client.set_read_timeout(options.timeout_ms / 1000, (options.timeout_ms % 1000) * 1000);
      auto res = client.Post("/predict", body.dump(), "application/json");
      ++out.deliveries;
      if (!res) {
        out.error = partitions[u].unit_id + " unreachable: " + httplib::to_string(res.error());
        return;
      }
      if (res->status != 200 && res->status != 502) {
        out.error = partitions[u].unit_id + " answered " + std::to_string(res->status) + ": " + res->body;
        return;
      }
      result.transcript.record("score", partitions[u].unit_id, "meta", BoundaryMessage::decode(res->body));
      if (res->status == 502) {
        out.error = partitions[u].unit_id + " could not reach the meta service";
        return;
      }
      auto meta = BoundaryMessage::decode(res->get_header_value(kMetaResponseHeader));
      result.transcript.record("result", "meta", "client", meta);
      last = meta.to_metaprediction();
    }
    out.ok = true;
    out.prediction = last->label;
    out.probability = last->certainty;
  };
  auto replay_part = [&](std::size_t r) {
    try {
      deliver_part(r);
    } catch (const std::exception& e) {
      result.outcomes[r].ok = false;
      result.outcomes[r].error = e.what();
    }
  };

  if (options.parts_per_second > 0.0) {
    auto t0 = std::chrono::steady_clock::now();
    for (std::size_t r = 0; r < ds.rows(); ++r) {
      std::this_thread::sleep_until(t0 + std::chrono::duration_cast<std::chrono::steady_clock::duration>(
                                             std::chrono::duration<double>(r / options.parts_per_second)));
      replay_part(r);
    }
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::jthread> workers;
    std::size_t n = std::max<std::size_t>(1, std::min(options.concurrency, ds.rows()));
    for (std::size_t w = 0; w < n; ++w)
      workers.emplace_back([&] {
        for (std::size_t r; (r = next.fetch_add(1)) < ds.rows();) replay_part(r);
      });
  }
  for (const auto& o : result.outcomes) result.failed += o.ok ? 0 : 1;
  return result;
}

}  // namespace metastack
