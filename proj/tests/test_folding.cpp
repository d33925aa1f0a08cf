#include <cmath>
#include <fstream>
#include <thread>

#include "doctest.h"
#include "rldif/folding.hpp"
#include "rldif/metrics.hpp"
#include "test_util.hpp"

// After Eigen: resolv.h, pulled in here, defines a _res macro.
#include "httplib.h"

using namespace rldif;
using namespace rldif::fold;
using rldif::testing::random_sequence;
using rldif::testing::TempDir;

namespace {

// Counts calls and optionally blocks so concurrent callers overlap.
class CountingOracle : public FoldOracle {
 public:
  explicit CountingOracle(std::string id = "counting", int delay_ms = 0) : id_(std::move(id)), delay_ms_(delay_ms) {}
  std::string id() const override { return id_; }
  FoldResult fold(const Sequence& s) override {
    ++calls;
    if (delay_ms_ > 0) std::this_thread::sleep_for(std::chrono::milliseconds(delay_ms_));
    FoldResult r = toy_.fold(s);
    r.oracle_id = id_;
    return r;
  }
  std::atomic<int> calls{0};

 private:
  std::string id_;
  int delay_ms_;
  ToyFolder toy_;
};

OracleSpec http_spec(int port, int retries = 3, int max_in_flight = 4) {
  OracleSpec s;
  s.kind = OracleSpec::Kind::Http;
  s.endpoint = "http://127.0.0.1:" + std::to_string(port);
  s.timeout_s = 10;
  s.retries = retries;
  s.max_in_flight = max_in_flight;
  s.backoff_s = 0.01;
  return s;
}

}  // namespace

TEST_CASE("toy folder is deterministic and well formed") {
  Rng rng(1);
  const Sequence s = random_sequence(50, rng);
  ToyFolder toy;
  const FoldResult a = toy.fold(s), b = toy.fold(s);
  CHECK(a == b);
  CHECK(a.ca_coords.size() == 50);
  CHECK(a.oracle_id == "toy-v1");
  CHECK(a.digest == sha256_hex(s.to_text()));
  CHECK(toy.calls() == 2);
  for (size_t i = 1; i < a.ca_coords.size(); ++i)
    CHECK(distance(a.ca_coords[i], a.ca_coords[i - 1]) == doctest::Approx(kToyCaSpacing).epsilon(1e-12));
  const ToyAngles ang = toy_angles(s);
  for (size_t i = 0; i < 50; ++i) {
    CHECK(ang.turn[i] >= kToyTurnMinDeg * M_PI / 180 - 1e-12);
    CHECK(ang.turn[i] <= kToyTurnMaxDeg * M_PI / 180 + 1e-12);
    CHECK(ang.torsion[i] >= -M_PI);
    CHECK(ang.torsion[i] < M_PI);
  }
  CHECK(metrics::tm_score(a.ca_coords, b.ca_coords) == 1.0);
}

TEST_CASE("toy folder is local") {
  Rng rng(2);
  for (int trial = 0; trial < 50; ++trial) {
    const Sequence s = random_sequence(30, rng);
    auto r = s.residues();
    const size_t i = static_cast<size_t>(rng.uniform_int(0, 29));
    r[i] = (r[i] + rng.uniform_int(1, kNumAminoAcids - 1)) % kNumAminoAcids;
    const ToyAngles a = toy_angles(s), b = toy_angles(Sequence(r));
    for (size_t j = 0; j < 30; ++j) {
      if (j + 1 >= i && j <= i + 1) continue;
      CHECK(a.turn[j] == b.turn[j]);
      CHECK(a.torsion[j] == b.torsion[j]);
    }
    CHECK(a.turn[i] != b.turn[i]);
  }
}

TEST_CASE("poly-A centre substitution regression") {
  const Sequence poly(std::vector<int>(40, 0));
  auto r = poly.residues();
  r[20] = Sequence::from_text("W")[0];
  ToyFolder toy;
  const double tm = metrics::tm_score(toy.fold(poly).ca_coords, toy.fold(Sequence(r)).ca_coords);
  // Frozen from the toy folder + TM-score pipeline.
  CHECK(std::abs(tm - 0.53402865313637871) < 1e-12);
}

TEST_CASE("toy dataset") {
  const auto data = make_toy_dataset(20, 30, 60, 7);
  CHECK(data.size() == 20);
  for (size_t i = 0; i < data.size(); ++i) {
    CHECK(data[i].id == "toy" + std::to_string(i));
    CHECK(data[i].sequence.size() >= 30);
    CHECK(data[i].sequence.size() <= 60);
    CHECK(data[i].backbone.residues.size() == data[i].sequence.size());
    const auto ca = toy_ca_trace(data[i].sequence);
    for (size_t j = 0; j < ca.size(); ++j) CHECK(data[i].backbone.residues[j].atom(BackboneAtom::CA) == ca[j]);
  }
  const auto again = make_toy_dataset(20, 30, 60, 7);
  CHECK(again[7].sequence == data[7].sequence);
  CHECK_THROWS_AS(make_toy_dataset(2, 2, 60, 7), InvalidArgument);
}

TEST_CASE("fold cache") {
  TempDir dir;
  Rng rng(3);
  const Sequence s = random_sequence(35, rng);

  SUBCASE("transparent and hit on second call") {
    CountingOracle oracle;
    FoldCache cache(dir.path(), oracle);
    const FoldResult fresh = oracle.fold(s);
    oracle.calls = 0;
    CHECK(cache.fold(s) == fresh);
    CHECK(cache.fold(s) == fresh);
    CHECK(oracle.calls == 1);
    CHECK(cache.hits() == 1);
    CHECK(fold_cached(dir.path(), oracle, s) == fresh);
    CHECK(oracle.calls == 1);
    for (int trial = 0; trial < 10; ++trial) {
      const Sequence x = random_sequence(static_cast<size_t>(rng.uniform_int(3, 60)), rng);
      ToyFolder toy;
      CHECK(fold_cached(dir.path(), toy, x) == toy.fold(x));
      CHECK(fold_cached(dir.path(), toy, x) == toy.fold(x));
    }
  }
  SUBCASE("oracle id is part of the key") {
    CountingOracle a("alpha"), b("beta");
    FoldCache ca(dir.path(), a), cb(dir.path(), b);
    CHECK(ca.key(s) != cb.key(s));
    ca.fold(s);
    cb.fold(s);
    CHECK(a.calls == 1);
    CHECK(b.calls == 1);
    CHECK(ca.key(s) == sha256_hex(std::string("alpha") + '\0' + s.to_text()));
  }
  SUBCASE("corrupt entries are refolded and replaced") {
    CountingOracle oracle;
    FoldCache cache(dir.path(), oracle);
    const FoldResult first = cache.fold(s);
    const auto path = dir.path() / (cache.key(s) + ".json");
    std::string text;
    {
      std::ifstream in(path);
      std::getline(in, text, '\0');
    }
    const auto pos = text.find("\"ca_coords\":[[") + 14;
    text[pos] = text[pos] == '1' ? '2' : '1';
    std::ofstream(path, std::ios::trunc) << text;
    CHECK(cache.fold(s) == first);
    CHECK(oracle.calls == 2);
    CHECK(cache.corrupt() == 1);
    CHECK(cache.fold(s) == first);
    CHECK(oracle.calls == 2);
    std::ofstream(path, std::ios::trunc) << "{not json";
    CHECK(cache.fold(s) == first);
    CHECK(oracle.calls == 3);
  }
  SUBCASE("single flight coalesces concurrent duplicates") {
    CountingOracle oracle("slow", 200);
    FoldCache cache(dir.path(), oracle, true);
    std::vector<Sequence> same(8, s);
    const auto out = cache.fold_many(same, 8);
    CHECK(oracle.calls == 1);
    for (const auto& o : out) CHECK(o.result.has_value());
  }
  SUBCASE("fold_many reports failures per item") {
    class Failing : public FoldOracle {
     public:
      std::string id() const override { return "failing"; }
      FoldResult fold(const Sequence& x) override {
        if (x.size() == 5) throw Error("refused");
        return ToyFolder().fold(x);
      }
    } failing;
    FoldCache cache(dir.path(), failing);
    const std::vector<Sequence> seqs{random_sequence(5, rng), random_sequence(6, rng)};
    const auto out = cache.fold_many(seqs, 2);
    CHECK_FALSE(out[0].result.has_value());
    CHECK(out[0].error == "refused");
    CHECK(out[1].result.has_value());
  }
}

TEST_CASE("http client against the stub server") {
  Rng rng(4);
  const std::vector<Sequence> seqs{random_sequence(30, rng), random_sequence(41, rng), random_sequence(12, rng)};
  ToyFolder toy;

  SUBCASE("results are returned verbatim") {
    ToyFoldServer server;
    HttpFoldClient client(http_spec(server.start()));
    const auto out = client.fold_batch(seqs);
    REQUIRE(out.size() == 3);
    for (size_t i = 0; i < 3; ++i) {
      CHECK(out[i].ca_coords == toy.fold(seqs[i]).ca_coords);
      CHECK_FALSE(out[i].plddt.has_value());
      CHECK(out[i].digest == sha256_hex(seqs[i].to_text()));
    }
    CHECK(client.id() == "http:http://127.0.0.1:" + std::to_string(server.port()));
    CHECK(server.sequences_folded() == 3);
  }
  SUBCASE("5xx responses are retried") {
    ToyFoldServer server({.delay_ms = 0, .fail_first = 2, .fail_status = 503, .thread_count = 2});
    HttpFoldClient client(http_spec(server.start()));
    CHECK(client.fold(seqs[0]).ca_coords == toy.fold(seqs[0]).ca_coords);
    CHECK(server.requests() == 3);
    CHECK(client.requests() == 3);
  }
  SUBCASE("retries are bounded") {
    ToyFoldServer server({.delay_ms = 0, .fail_first = 100, .fail_status = 500, .thread_count = 2});
    HttpFoldClient client(http_spec(server.start(), 2));
    try {
      client.fold(seqs[0]);
      FAIL("expected a backend error");
    } catch (const FoldBackendError& e) {
      CHECK(e.status == 500);
      CHECK(std::string(e.what()).find("injected failure") != std::string::npos);
    }
    CHECK(server.requests() == 3);
  }
  SUBCASE("4xx is fatal") {
    ToyFoldServer server({.delay_ms = 0, .fail_first = 100, .fail_status = 422, .thread_count = 2});
    HttpFoldClient client(http_spec(server.start()));
    CHECK_THROWS_AS(client.fold(seqs[0]), FoldBackendError);
    CHECK(server.requests() == 1);
  }
  SUBCASE("timeouts surface as FoldTimeout") {
    ToyFoldServer server({.delay_ms = 600, .fail_first = 0, .fail_status = 503, .thread_count = 2});
    OracleSpec spec = http_spec(server.start(), 1);
    spec.timeout_s = 0.2;
    HttpFoldClient client(spec);
    CHECK_THROWS_AS(client.fold(seqs[0]), FoldTimeout);
  }
  SUBCASE("in-flight requests stay within the bound") {
    ToyFoldServer server({.delay_ms = 50, .fail_first = 0, .fail_status = 503, .thread_count = 8});
    HttpFoldClient client(http_spec(server.start(), 3, 2));
    TempDir dir;
    FoldCache cache(dir.path(), client, true);
    std::vector<Sequence> many;
    for (int i = 0; i < 12; ++i) many.push_back(random_sequence(20, rng));
    const auto out = cache.fold_many(many, 8);
    for (const auto& o : out) CHECK(o.result.has_value());
    CHECK(server.max_in_flight() <= 2);
    CHECK(server.max_in_flight() >= 1);
    CHECK(server.requests() == 12);
  }
  SUBCASE("single flight over HTTP folds duplicates once") {
    ToyFoldServer server({.delay_ms = 150, .fail_first = 0, .fail_status = 503, .thread_count = 8});
    HttpFoldClient client(http_spec(server.start()));
    TempDir dir;
    FoldCache cache(dir.path(), client, true);
    const std::vector<Sequence> dup(6, seqs[1]);
    const auto out = cache.fold_many(dup, 6);
    for (const auto& o : out) CHECK(o.result->ca_coords == toy.fold(seqs[1]).ca_coords);
    CHECK(server.requests() == 1);
  }
  SUBCASE("malformed request bodies are rejected") {
    ToyFoldServer server;
    const int port = server.start();
    httplib::Client raw("http://127.0.0.1:" + std::to_string(port));
    auto res = raw.Post("/fold", "{\"seq\": 1}", "application/json");
    REQUIRE(res);
    CHECK(res->status == 400);
    CHECK(nlohmann::json::parse(res->body).contains("error"));
  }
  SUBCASE("length mismatches are detected") {
    nlohmann::json bad{{"ca_coords", {{0, 0, 0}, {1, 0, 0}}}, {"plddt", nullptr}};
    CHECK_THROWS_AS(fold_result_from_json(bad, "x", Sequence::from_text("ACD")), InvalidLength);
  }
}

TEST_CASE("oracle spec validation and serialization") {
  OracleSpec s = http_spec(1234);
  const OracleSpec back = OracleSpec::from_json(s.to_json());
  CHECK(back.endpoint == s.endpoint);
  CHECK(back.kind == OracleSpec::Kind::Http);
  s.max_in_flight = 0;
  CHECK_THROWS_AS(s.validate(), InvalidArgument);
  CHECK_THROWS_AS(OracleSpec::from_json({{"kind", "magic"}}), InvalidArgument);
  CHECK(make_oracle(OracleSpec{})->id() == "toy-v1");
}
