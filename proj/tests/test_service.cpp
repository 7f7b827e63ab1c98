#include <bit>
#include <filesystem>
#include <memory>

#include "doctest.h"
#include "httplib.h"
#include "json.hpp"
#include "metastack/service.hpp"
#include "metastack/synth.hpp"

using namespace metastack;
using json = nlohmann::json;

namespace {

struct Fixture {
  Dataset ds;
  std::vector<UnitPartition> parts;
  StackModel stack;
};

const Fixture& fixture() {
  static const Fixture f = [] {
    Fixture f;
    SynthSpec spec;
    spec.n_items = 800;
    spec.unit_feature_counts = {5, 5, 5, 5};
    spec.seed = 12;
    auto raw = generate_synthetic(spec);
    f.ds = impute_marker(raw, {default_marker(raw)});
    f.parts = partition_by_unit(f.ds);
    CvPlan plan;
    plan.seed = 5;
    f.stack = fit_stack(f.ds, f.parts, ParamGrid::parse("10x6"), plan);
    return f;
  }();
  return f;
}

UnitArtifact artifact(const StackModel& s, std::size_t u) {
  return parse_unit_artifact(unit_artifact_json(s.units[u], s.marker));
}

StackModel meta_only(const StackModel& s) {
  StackModel m = s;
  m.units.clear();
  return m;
}

/// Meta service plus one service per trained unit, all on ephemeral ports.
struct Mesh {
  Transcript wire;
  std::unique_ptr<MetaService> meta;
  std::vector<std::unique_ptr<SubUnitService>> subs;
  std::map<std::string, std::string> addresses;

  explicit Mesh(const StackModel& s) {
    meta = std::make_unique<MetaService>(meta_only(s), ServiceConfig{}, &wire);
    meta->start("127.0.0.1:0");
    for (std::size_t u = 0; u < s.units.size(); ++u) {
      ServiceConfig c;
      c.downstream = meta->address();
      subs.push_back(std::make_unique<SubUnitService>(artifact(s, u), c, &wire));
      subs.back()->start("127.0.0.1:0");
      addresses[s.units[u].unit_id] = subs.back()->address();
    }
  }
};

std::set<std::string> feature_names(const Dataset& ds) {
  std::set<std::string> names;
  for (const auto& c : ds.columns) names.insert(c.id.str());
  return names;
}

Dataset head(const Dataset& ds, std::size_t n) {
  Dataset out = ds;
  out.items.resize(n);
  out.labels.resize(n);
  out.values.resize(n * ds.cols());
  if (!out.imputed.empty()) out.imputed.resize(n * ds.cols());
  return out;
}

}  // namespace

TEST_CASE("assembly buffer keeps the last message per unit") {
  AssemblyBuffer b;
  bool replaced = true;
  CHECK(b.upsert({"#1", "L0", "scrap", 0.6}, &replaced).size() == 1);
  CHECK_FALSE(replaced);
  CHECK(b.upsert({"#1", "L1", "scrap", 0.7}).size() == 2);
  auto held = b.upsert({"#1", "L0", "no scrap", 0.9}, &replaced);
  CHECK(replaced);
  REQUIRE(held.size() == 2);
  CHECK(held[0] == SubPrediction{"#1", "L0", "no scrap", 0.9});
  CHECK(b.parts() == 1);
  CHECK(b.messages("#2").empty());
  CHECK_FALSE(b.result("#1"));
  b.set_result({"#1", "scrap", 0.55});
  CHECK(b.result("#1")->certainty == 0.55);
}

TEST_CASE("sub-unit handler validates bodies and imputes the marker") {
  const auto& f = fixture();
  auto a = artifact(f.stack, 0);
  SubUnitService svc(a, ServiceConfig{});
  CHECK(svc.handle("{").status == 400);
  CHECK(svc.handle("[1]").status == 400);
  CHECK(svc.handle(R"({"features":{}})").status == 400);
  CHECK(svc.handle(R"({"part_id":"#1","features":{"L9_S0_F0":1.0}})").status == 422);
  CHECK(svc.handle(R"({"part_id":"#1","features":{")" + a.feature_ids[0] + R"(":"x"}})").status == 400);

  auto empty = svc.handle(R"({"part_id":"#7","features":{}})");
  REQUIRE(empty.status == 200);
  std::vector<double> markers(a.feature_ids.size(), f.stack.marker);
  auto expect = make_subprediction("#7", a.unit_id, a.model.predict_proba(std::span<const double>(markers)),
                                   a.model.classes());
  CHECK(BoundaryMessage::decode(empty.body).to_subprediction() == expect);
  CHECK(empty.headers.empty());
}

TEST_CASE("meta handler predicts on first arrival and absent-codes the rest") {
  const auto& f = fixture();
  MetaService svc(meta_only(f.stack), ServiceConfig{});
  CHECK(svc.handle("nope").status == 400);
  CHECK(svc.handle(BoundaryMessage::from(MetaPrediction{"#1", "scrap", 0.5}).encode()).status == 400);
  CHECK(svc.handle(BoundaryMessage::from(SubPrediction{"#1", "L7", f.ds.classes[0], 0.5}).encode()).status == 422);
  CHECK(svc.handle(BoundaryMessage::from(SubPrediction{"#1", "L0", "maybe", 0.5}).encode()).status == 422);

  SubPrediction first{"#1", "L0", f.ds.classes[1], 0.8};
  auto r = svc.handle(BoundaryMessage::from(first).encode());
  REQUIRE(r.status == 200);
  auto rows = aggregate({first}, f.stack.expected_units, f.stack.classes, f.stack.marker, {"#1"});
  CHECK(rows[0].values[2] == kAbsentCode);
  CHECK(BoundaryMessage::decode(r.body).to_metaprediction() == f.stack.predict_row(rows[0]));

  SubPrediction again{"#1", "L0", f.ds.classes[0], 0.9};
  svc.handle(BoundaryMessage::from(again).encode());
  CHECK(svc.buffer().messages("#1") == std::vector<SubPrediction>{again});
}

TEST_CASE("mesh replay matches the in-process pipeline bit for bit") {
  const auto& f = fixture();
  auto ds = head(f.ds, 150);
  Mesh mesh(f.stack);
  auto run = replay(ds, f.parts, mesh.addresses);
  CHECK(run.failed == 0);
  std::vector<std::size_t> rows(ds.rows());
  for (std::size_t i = 0; i < rows.size(); ++i) rows[i] = i;
  auto expect = f.stack.predict(ds, f.parts, rows);
  REQUIRE(run.outcomes.size() == expect.size());
  for (std::size_t i = 0; i < expect.size(); ++i) {
    CHECK(run.outcomes[i].ok);
    CHECK(run.outcomes[i].prediction == expect[i].label);
    CHECK(std::bit_cast<std::uint64_t>(run.outcomes[i].probability) ==
          std::bit_cast<std::uint64_t>(expect[i].certainty));
  }

  auto index = RawValueIndex::build(ds, f.parts);
  auto wire = audit_confidentiality(mesh.wire.entries(), feature_names(ds), index);
  CHECK(wire.pass);
  CHECK(wire.messages_scanned > 0);
  CHECK(audit_confidentiality(run.transcript.entries(), feature_names(ds), index).pass);
  for (const auto& e : mesh.wire.entries())
    for (const auto& [key, value] : e.message.payload) CHECK_FALSE(FeatureId::try_parse(key));

  ReplayOptions shuffled;
  shuffled.shuffle_seed = 3;
  auto again = replay(ds, f.parts, mesh.addresses, shuffled);
  for (std::size_t i = 0; i < expect.size(); ++i) {
    CHECK(again.outcomes[i].prediction == run.outcomes[i].prediction);
    CHECK(again.outcomes[i].probability == run.outcomes[i].probability);
  }
}

TEST_CASE("rate-limited replay gives the same answers") {
  const auto& f = fixture();
  auto ds = head(f.ds, 20);
  Mesh mesh(f.stack);
  auto fast = replay(ds, f.parts, mesh.addresses);
  ReplayOptions slow;
  slow.parts_per_second = 200;
  auto paced = replay(ds, f.parts, mesh.addresses, slow);
  for (std::size_t i = 0; i < ds.rows(); ++i) {
    CHECK(paced.outcomes[i].ok);
    CHECK(paced.outcomes[i].prediction == fast.outcomes[i].prediction);
    CHECK(paced.outcomes[i].probability == fast.outcomes[i].probability);
  }
  CHECK(replay(head(f.ds, 0), f.parts, mesh.addresses).outcomes.empty());
}

TEST_CASE("services answer one route and survive a missing meta service") {
  const auto& f = fixture();
  Mesh mesh(f.stack);
  auto [host, port] = parse_address(mesh.addresses.begin()->second);
  httplib::Client client(host, port);
  CHECK(client.Get("/predict")->status == 404);
  CHECK(client.Post("/other", "{}", "application/json")->status == 404);

  ServiceConfig orphan;
  orphan.downstream = "127.0.0.1:1";
  orphan.forward_attempts = 2;
  orphan.backoff_ms = 1;
  SubUnitService lonely(artifact(f.stack, 0), orphan);
  auto r = lonely.handle(R"({"part_id":"#9","features":{}})");
  CHECK(r.status == 502);
  CHECK(BoundaryMessage::decode(r.body).to_subprediction().part_id == "#9");

  auto addresses = mesh.addresses;
  addresses[f.parts[0].unit_id] = "127.0.0.1:1";
  auto broken = replay(head(f.ds, 5), f.parts, addresses);
  CHECK(broken.failed == 5);
  CHECK(broken.outcomes.size() == 5);
  CHECK_FALSE(broken.outcomes[0].error.empty());
}

TEST_CASE("service config and meta artifact load from disk") {
  ServiceConfig c;
  c.unit_id = "meta";
  c.listen = "0.0.0.0:8000";
  c.model = "/tmp/stack/meta.json";
  c.expected_units = {"L0", "L1"};
  c.marker = -3.0;
  auto back = ServiceConfig::from_json(c.to_json());
  CHECK(back.to_json() == c.to_json());
  CHECK_THROWS_AS(ServiceConfig::from_json("{}"), DataError);
  CHECK_THROWS_AS(parse_address("nohost"), DataError);
  CHECK_THROWS_AS(parse_address("h:99999"), DataError);
  CHECK(parse_address("localhost:80") == std::pair<std::string, int>{"localhost", 80});

  const auto& f = fixture();
  auto dir = std::filesystem::temp_directory_path() / "metastack_service_test";
  f.stack.save(dir);
  auto m = load_meta_artifact(dir / "meta.json");
  CHECK(m.meta == f.stack.meta);
  CHECK(m.expected_units == f.stack.expected_units);
  CHECK(m.units.empty());
  std::filesystem::remove_all(dir);
}
