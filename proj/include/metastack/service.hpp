#pragma once

// HTTP deployment of a trained stack: one service per sub-unit, one meta
// service, and a replay driver that streams parts through them. Every
// service answers POST /predict and nothing else.

#include <atomic>
#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "metastack/stacking.hpp"
#include "metastack/transport.hpp"

namespace metastack {

inline constexpr const char* kMetaResponseHeader = "X-Meta-Response";

struct ServiceConfig {
  std::string unit_id;  // "meta" for the meta service
  std::string listen = "127.0.0.1:0";
  std::string downstream;  // meta service address, sub-units only
  std::filesystem::path model;
  std::vector<std::string> expected_units;  // meta only; taken from the artifact when empty
  std::optional<double> marker;             // taken from the artifact when unset
  int forward_attempts = 3;
  int backoff_ms = 20;

  std::string to_json() const;
  static ServiceConfig from_json(const std::string& text);  // throws DataError
};

/// "host:port" split; throws DataError.
std::pair<std::string, int> parse_address(const std::string& address);

struct HttpReply {
  int status = 200;
  std::string body;
  std::map<std::string, std::string> headers;
};

/// Received sub-predictions per part, one per unit, later messages replacing
/// earlier ones.
class AssemblyBuffer {
 public:
  /// Stores the message and returns every message now held for its part.
  /// `replaced` reports whether an earlier message from the same unit was
  /// overwritten.
  std::vector<SubPrediction> upsert(const SubPrediction& message, bool* replaced = nullptr);
  std::vector<SubPrediction> messages(const std::string& part_id) const;
  void set_result(const MetaPrediction& result);
  std::optional<MetaPrediction> result(const std::string& part_id) const;
  std::size_t parts() const;

 private:
  mutable std::mutex mutex_;
  std::map<std::string, std::map<std::string, SubPrediction>> messages_;
  std::map<std::string, MetaPrediction> results_;
};

/// Owns an HTTP server bound to one POST route; the handler runs on the
/// server's worker threads.
class HttpService {
 public:
  virtual ~HttpService();
  HttpService(const HttpService&) = delete;
  HttpService& operator=(const HttpService&) = delete;

  /// Binds and serves in a background thread; returns the bound port.
  int start(const std::string& listen);
  /// Binds and serves on the calling thread until stop().
  void run(const std::string& listen);
  void stop();
  int port() const { return port_; }
  std::string address() const;

  virtual HttpReply handle(const std::string& body) = 0;

 protected:
  HttpService();

 private:
  int bind(const std::string& listen);

  struct Server;
  std::unique_ptr<Server> server_;
  std::thread thread_;
  std::string host_;
  int port_ = 0;
};

class SubUnitService : public HttpService {
 public:
  /// `sink`, when given, records every forwarded message.
  SubUnitService(UnitArtifact artifact, ServiceConfig config, Transcript* sink = nullptr);
  ~SubUnitService() override;

  /// Body: {"part_id": ..., "features": {feature id: number}}. Unknown
  /// feature ids give 422, malformed bodies 400. Missing owned features take
  /// the marker. The prediction is forwarded to the downstream meta service
  /// and returned; the meta answer travels back in X-Meta-Response. When the
  /// meta service cannot be reached after the configured attempts the
  /// status is 502 and the body still holds the prediction.
  HttpReply handle(const std::string& body) override;

  const std::string& unit_id() const { return artifact_.unit_id; }

 private:
  UnitArtifact artifact_;
  ServiceConfig config_;
  double marker_;
  std::map<std::string, std::size_t> column_of_;
  Transcript* sink_;
};

class MetaService : public HttpService {
 public:
  MetaService(StackModel meta, ServiceConfig config, Transcript* sink = nullptr);
  ~MetaService() override;

  /// Body: one sub_prediction message. Re-predicts the part on every
  /// arrival, absent-coding units that have not reported yet.
  HttpReply handle(const std::string& body) override;

  const AssemblyBuffer& buffer() const { return buffer_; }

 private:
  StackModel model_;
  ServiceConfig config_;
  AssemblyBuffer buffer_;
  Transcript* sink_;
};

/// Loads only the meta part of a saved stack (meta.json).
StackModel load_meta_artifact(const std::filesystem::path& meta_json);

struct ReplayOptions {
  double parts_per_second = 0.0;  // 0 = unlimited
  std::size_t concurrency = 8;    // ignored when rate limited
  std::optional<std::uint64_t> shuffle_seed;  // per-part unit order
  int timeout_ms = 5000;
};

struct ReplayOutcome {
  std::string part_id;
  bool ok = false;
  std::string prediction;
  double probability = 0.0;
  int deliveries = 0;
  std::string error;
};

struct ReplayResult {
  std::vector<ReplayOutcome> outcomes;  // dataset row order
  Transcript transcript;                // sub- and meta-predictions seen by the driver
  std::size_t failed = 0;
};

/// Posts each part's observed cells to the services of the units that
/// covered it; units absent from `unit_addresses` are skipped. The meta
/// answer to the last delivery of a part is its final prediction. A service
/// that cannot be reached fails the part and the replay moves on.
ReplayResult replay(const Dataset& dataset, const std::vector<UnitPartition>& partitions,
                    const std::map<std::string, std::string>& unit_addresses, const ReplayOptions& options = {});

}  // namespace metastack
