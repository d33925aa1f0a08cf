// Folding oracles: a deterministic toy folder, an HTTP client for external
// folding services, a content-addressed result cache, and a stub server that
// speaks the client's wire protocol over the toy folder.
//
// Wire protocol:
//   POST {endpoint}/fold  {"sequences": ["ACD...", ...]}
//   200 -> {"results": [{"ca_coords": [[x,y,z], ...], "plddt": [...] | null}, ...]}
//   non-200 -> {"error": "..."}

#ifndef RLDIF_FOLDING_HPP_
#define RLDIF_FOLDING_HPP_

#include <atomic>
#include <condition_variable>
#include <filesystem>
#include <future>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include "json.hpp"
#include "rldif/core.hpp"

namespace rldif::fold {

RLDIF_DEFINE_ERROR(FoldTimeout);
RLDIF_DEFINE_ERROR(InvalidLength);
RLDIF_DEFINE_ERROR(CacheCorrupt);

struct FoldBackendError : Error {
  FoldBackendError(int status, const std::string& body);
  int status;
};

std::string sha256_hex(std::string_view data);

struct FoldResult {
  std::vector<Vec3> ca_coords;
  std::optional<std::vector<double>> plddt;
  std::string oracle_id;
  std::string digest;  // SHA-256 of the sequence text

  friend bool operator==(const FoldResult&, const FoldResult&) = default;
};

class FoldOracle {
 public:
  virtual ~FoldOracle() = default;
  virtual std::string id() const = 0;
  virtual FoldResult fold(const Sequence& sequence) = 0;
};

// Toy folder. Cα i+1 is placed by NeRF from the virtual bond angle at i and
// the torsion about (i-1, i); both angles are hashed from the 3-mer
// (s[i-1], s[i], s[i+1]) with out-of-range neighbours mapped to a sentinel.
inline constexpr double kToyCaSpacing = 3.8;
inline constexpr double kToyTurnMinDeg = 80.0;
inline constexpr double kToyTurnMaxDeg = 140.0;
inline constexpr std::string_view kToyOracleId = "toy-v1";

struct ToyAngles {
  std::vector<double> turn;     // radians, per residue
  std::vector<double> torsion;  // radians in [-pi, pi), per residue
};
ToyAngles toy_angles(const Sequence& sequence);
std::vector<Vec3> toy_ca_trace(const Sequence& sequence);

class ToyFolder : public FoldOracle {
 public:
  std::string id() const override { return std::string(kToyOracleId); }
  FoldResult fold(const Sequence& sequence) override;
  long calls() const { return calls_.load(); }

 private:
  std::atomic<long> calls_{0};
};

// Pseudo N/C/O atoms placed rigidly relative to each Cα and its neighbours,
// so the full-backbone featurizer can run on Cα-only structures.
Backbone backbone_from_ca_trace(std::span<const Vec3> ca, const std::string& chain_id = "A");

// Entries whose backbones come from toy-folding uniformly random sequences
// with lengths in [min_length, max_length]; ids are "toy<index>".
std::vector<DatasetEntry> make_toy_dataset(int count, int min_length, int max_length, uint64_t seed,
                                           Split split = Split::Train);

struct OracleSpec {
  enum class Kind { Http, Toy };
  Kind kind = Kind::Toy;
  std::string endpoint;
  std::string oracle_id;   // cache namespace; defaults to "http:" + endpoint
  double timeout_s = 120;
  int retries = 3;
  int max_in_flight = 4;
  double backoff_s = 0.25;  // doubled after each failed attempt

  void validate() const;
  nlohmann::json to_json() const;
  static OracleSpec from_json(const nlohmann::json& j);
};

class HttpFoldClient : public FoldOracle {
 public:
  explicit HttpFoldClient(OracleSpec spec);

  std::string id() const override;
  FoldResult fold(const Sequence& sequence) override;
  std::vector<FoldResult> fold_batch(std::span<const Sequence> sequences);

  long requests() const { return requests_.load(); }

 private:
  nlohmann::json post_with_retry(const std::string& body);

  OracleSpec spec_;
  std::string host_;
  std::string base_path_;
  std::mutex mutex_;
  std::condition_variable slot_free_;
  int in_flight_ = 0;
  std::atomic<long> requests_{0};
};

std::unique_ptr<FoldOracle> make_oracle(const OracleSpec& spec);

struct FoldOutcome {
  std::optional<FoldResult> result;
  std::string error;
};

// Content-addressed cache in front of an oracle. Entries live in
// dir/<sha256(oracle id, NUL, sequence)>.json and carry a checksum; corrupt
// entries are refolded and replaced.
class FoldCache {
 public:
  FoldCache(std::filesystem::path dir, FoldOracle& oracle, bool single_flight = true);

  FoldResult fold(const Sequence& sequence);
  // Folds every sequence; failures are reported per item instead of thrown.
  std::vector<FoldOutcome> fold_many(std::span<const Sequence> sequences, int parallelism = 1);

  std::string key(const Sequence& sequence) const;
  const std::filesystem::path& dir() const { return dir_; }
  FoldOracle& oracle() { return oracle_; }
  long hits() const { return hits_.load(); }
  long misses() const { return misses_.load(); }
  long corrupt() const { return corrupt_.load(); }

 private:
  std::optional<FoldResult> read(const std::filesystem::path& path, const Sequence& sequence);
  void write(const std::filesystem::path& path, const Sequence& sequence, const FoldResult& result);
  FoldResult fold_uncoalesced(const Sequence& sequence);

  std::filesystem::path dir_;
  FoldOracle& oracle_;
  bool single_flight_;
  std::mutex mutex_;
  std::map<std::string, std::shared_future<FoldResult>> pending_;
  std::atomic<long> hits_{0}, misses_{0}, corrupt_{0};
};

FoldResult fold_cached(const std::filesystem::path& dir, FoldOracle& oracle, const Sequence& sequence);

nlohmann::json fold_result_to_json(const FoldResult& r);
FoldResult fold_result_from_json(const nlohmann::json& j, const std::string& oracle_id, const Sequence& sequence);

struct StubServerOptions {
  int delay_ms = 0;            // per-request processing delay
  int fail_first = 0;          // answer the first n requests with fail_status
  int fail_status = 503;
  int thread_count = 8;
};

// Toy-folder HTTP server; port 0 binds an ephemeral port.
class ToyFoldServer {
 public:
  explicit ToyFoldServer(StubServerOptions options = {});
  ~ToyFoldServer();

  int start(const std::string& host = "127.0.0.1", int port = 0);
  void stop();
  // Blocks serving requests until stop() is called from another thread.
  void listen(const std::string& host, int port);

  int port() const { return port_; }
  long requests() const { return requests_.load(); }
  long sequences_folded() const { return sequences_.load(); }
  int max_in_flight() const { return max_in_flight_.load(); }

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
  StubServerOptions options_;
  std::thread thread_;
  int port_ = 0;
  std::atomic<long> requests_{0}, sequences_{0};
  std::atomic<int> in_flight_{0}, max_in_flight_{0};
};

}  // namespace rldif::fold

#endif  // RLDIF_FOLDING_HPP_
