#include "rldif/folding.hpp"

#include <openssl/evp.h>

#include <chrono>
#include <cmath>
#include <fstream>
#include <numbers>
#include <sstream>

#include "httplib.h"

namespace rldif::fold {

namespace {

constexpr double kPi = std::numbers::pi;
constexpr int kBoundarySentinel = kNumAminoAcids;

double unit_interval(uint64_t h) { return static_cast<double>(h >> 11) * 0x1.0p-53; }

double to_radians(double deg) { return deg * kPi / 180.0; }

std::string excerpt(const std::string& body) { return body.size() > 200 ? body.substr(0, 200) + "..." : body; }

}  // namespace

FoldBackendError::FoldBackendError(int status_code, const std::string& body)
    : Error("fold backend error (status " + std::to_string(status_code) + "): " + excerpt(body)),
      status(status_code) {}

std::string sha256_hex(std::string_view data) {
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(data.data(), data.size(), md, &len, EVP_sha256(), nullptr) != 1)
    throw Error("SHA-256 digest failed");
  static constexpr char kHex[] = "0123456789abcdef";
  std::string out;
  out.reserve(2 * len);
  for (unsigned int i = 0; i < len; ++i) {
    out.push_back(kHex[md[i] >> 4]);
    out.push_back(kHex[md[i] & 15]);
  }
  return out;
}

// Both angles are dominated by a hash of the centre residue, with a smaller
// term hashed from the whole 3-mer, so the geometry stays local but the
// residue at i is recoverable from the local shape.
ToyAngles toy_angles(const Sequence& sequence) {
  const size_t n = sequence.size();
  ToyAngles a;
  a.turn.resize(n);
  a.torsion.resize(n);
  constexpr double kContextWeight = 0.1;
  for (size_t i = 0; i < n; ++i) {
    const uint64_t prev = i > 0 ? static_cast<uint64_t>(sequence[i - 1]) : kBoundarySentinel;
    const uint64_t mid = static_cast<uint64_t>(sequence[i]);
    const uint64_t next = i + 1 < n ? static_cast<uint64_t>(sequence[i + 1]) : kBoundarySentinel;
    const uint64_t hc = splitmix64(0x746f792d63656e74ULL ^ mid);
    const uint64_t hx = splitmix64(0x746f792d336d6572ULL ^ ((prev * 21 + mid) * 21 + next));
    const double turn_u = (1 - kContextWeight) * unit_interval(hc) + kContextWeight * unit_interval(hx);
    double tors_u = unit_interval(splitmix64(hc)) + kContextWeight * (unit_interval(splitmix64(hx)) - 0.5);
    tors_u -= std::floor(tors_u);
    a.turn[i] = to_radians(kToyTurnMinDeg + (kToyTurnMaxDeg - kToyTurnMinDeg) * turn_u);
    a.torsion[i] = to_radians(-180.0 + 360.0 * tors_u);
    if (a.torsion[i] >= kPi) a.torsion[i] = -kPi;
  }
  return a;
}

std::vector<Vec3> toy_ca_trace(const Sequence& sequence) {
  const size_t n = sequence.size();
  const ToyAngles a = toy_angles(sequence);
  const double d = kToyCaSpacing;
  std::vector<Vec3> p;
  p.reserve(n);
  p.push_back({0, 0, 0});
  if (n > 1) p.push_back({d, 0, 0});
  if (n > 2) p.push_back(p[1] + Vec3{-d * std::cos(a.turn[1]), d * std::sin(a.turn[1]), 0});
  for (size_t i = 2; i + 1 < n; ++i) {
    const Vec3 bc = normalized(p[i] - p[i - 1]);
    const Vec3 nrm = normalized(cross(p[i - 1] - p[i - 2], bc));
    const Vec3 m = cross(nrm, bc);
    const double th = a.turn[i], ph = a.torsion[i];
    p.push_back(p[i] + bc * (-d * std::cos(th)) + m * (d * std::sin(th) * std::cos(ph)) +
                nrm * (d * std::sin(th) * std::sin(ph)));
  }
  return p;
}

FoldResult ToyFolder::fold(const Sequence& sequence) {
  ++calls_;
  FoldResult r;
  r.ca_coords = toy_ca_trace(sequence);
  r.oracle_id = id();
  r.digest = sha256_hex(sequence.to_text());
  return r;
}

Backbone backbone_from_ca_trace(std::span<const Vec3> ca, const std::string& chain_id) {
  const size_t n = ca.size();
  if (n < 3) throw InvalidArgument("a Cα trace needs at least 3 residues to place backbone atoms");
  struct Frame {
    Vec3 along, inward, perp;
  };
  auto frame_at = [&](size_t i) {
    const Vec3 u = normalized(ca[i - 1] - ca[i]);
    const Vec3 w = normalized(ca[i + 1] - ca[i]);
    const Vec3 c = cross(u, w);
    if (!(norm(c) > 1e-8)) throw InvalidArgument("collinear Cα trace at residue " + std::to_string(i));
    return Frame{normalized(w - u), normalized(u + w), normalized(c)};
  };
  Backbone bb;
  bb.chain_id = chain_id;
  bb.residues.resize(n);
  for (size_t i = 0; i < n; ++i) {
    const Frame f = frame_at(std::clamp<size_t>(i, 1, n - 2));
    auto place = [&](double a, double b, double c) { return f.along * a + f.inward * b + f.perp * c; };
    Residue& r = bb.residues[i];
    r.number = static_cast<int>(i) + 1;
    const Vec3 x = ca[i];
    r.atoms[static_cast<int>(BackboneAtom::CA)] = x;
    r.atoms[static_cast<int>(BackboneAtom::N)] = x + normalized(place(-0.80, -0.35, 0.48)) * 1.458;
    const Vec3 c = x + normalized(place(0.80, -0.35, -0.48)) * 1.525;
    r.atoms[static_cast<int>(BackboneAtom::C)] = c;
    r.atoms[static_cast<int>(BackboneAtom::O)] = c + normalized(place(0.30, -0.55, -0.78)) * 1.231;
  }
  return bb;
}

std::vector<DatasetEntry> make_toy_dataset(int count, int min_length, int max_length, uint64_t seed, Split split) {
  if (count < 0 || min_length < 3 || max_length < min_length) throw InvalidArgument("bad toy dataset extents");
  Rng rng(seed);
  std::vector<DatasetEntry> out;
  for (int i = 0; i < count; ++i) {
    const int len = rng.uniform_int(min_length, max_length);
    std::vector<int> s(static_cast<size_t>(len));
    for (auto& x : s) x = rng.uniform_int(0, kNumAminoAcids - 1);
    DatasetEntry e;
    e.id = "toy" + std::to_string(i);
    e.sequence = Sequence(std::move(s));
    e.backbone = backbone_from_ca_trace(toy_ca_trace(e.sequence));
    e.split = split;
    out.push_back(std::move(e));
  }
  return out;
}

void OracleSpec::validate() const {
  if (kind == Kind::Http && endpoint.empty()) throw InvalidArgument("http oracle needs an endpoint");
  if (!(timeout_s > 0) || retries < 0 || max_in_flight < 1 || backoff_s < 0)
    throw InvalidArgument("oracle limits must be positive");
}

nlohmann::json OracleSpec::to_json() const {
  return {{"kind", kind == Kind::Http ? "http" : "toy"}, {"endpoint", endpoint}, {"oracle_id", oracle_id},
          {"timeout_s", timeout_s}, {"retries", retries}, {"max_in_flight", max_in_flight},
          {"backoff_s", backoff_s}};
}

OracleSpec OracleSpec::from_json(const nlohmann::json& j) {
  OracleSpec s;
  const std::string kind = j.value("kind", std::string("toy"));
  if (kind == "http")
    s.kind = Kind::Http;
  else if (kind == "toy")
    s.kind = Kind::Toy;
  else
    throw InvalidArgument("unknown oracle kind: " + kind);
  s.endpoint = j.value("endpoint", s.endpoint);
  s.oracle_id = j.value("oracle_id", s.oracle_id);
  s.timeout_s = j.value("timeout_s", s.timeout_s);
  s.retries = j.value("retries", s.retries);
  s.max_in_flight = j.value("max_in_flight", s.max_in_flight);
  s.backoff_s = j.value("backoff_s", s.backoff_s);
  s.validate();
  return s;
}

HttpFoldClient::HttpFoldClient(OracleSpec spec) : spec_(std::move(spec)) {
  spec_.validate();
  std::string ep = spec_.endpoint;
  while (!ep.empty() && ep.back() == '/') ep.pop_back();
  const auto scheme = ep.find("://");
  const auto path_start = ep.find('/', scheme == std::string::npos ? 0 : scheme + 3);
  host_ = ep.substr(0, path_start);
  base_path_ = path_start == std::string::npos ? "" : ep.substr(path_start);
}

std::string HttpFoldClient::id() const {
  return spec_.oracle_id.empty() ? "http:" + spec_.endpoint : spec_.oracle_id;
}

nlohmann::json HttpFoldClient::post_with_retry(const std::string& body) {
  {
    std::unique_lock lock(mutex_);
    slot_free_.wait(lock, [&] { return in_flight_ < spec_.max_in_flight; });
    ++in_flight_;
  }
  struct Release {
    HttpFoldClient* self;
    ~Release() {
      {
        std::lock_guard lock(self->mutex_);
        --self->in_flight_;
      }
      self->slot_free_.notify_one();
    }
  } release{this};

  const auto secs = static_cast<time_t>(spec_.timeout_s);
  const auto usecs = static_cast<time_t>((spec_.timeout_s - static_cast<double>(secs)) * 1e6);
  double delay = spec_.backoff_s;
  bool timed_out = false;
  int last_status = 0;
  std::string last_message;
  for (int attempt = 0; attempt <= spec_.retries; ++attempt) {
    if (attempt > 0) {
      std::this_thread::sleep_for(std::chrono::duration<double>(delay));
      delay *= 2;
    }
    ++requests_;
    httplib::Client client(host_);
    client.set_connection_timeout(secs, usecs);
    client.set_read_timeout(secs, usecs);
    client.set_write_timeout(secs, usecs);
    auto res = client.Post(base_path_ + "/fold", body, "application/json");
    if (!res) {
      const auto err = res.error();
      timed_out = err == httplib::Error::Read || err == httplib::Error::ConnectionTimeout;
      last_status = 0;
      last_message = httplib::to_string(err);
      continue;
    }
    timed_out = false;
    if (res->status == 200) {
      try {
        return nlohmann::json::parse(res->body);
      } catch (const nlohmann::json::exception& e) {
        throw FoldBackendError(200, std::string("unparseable response: ") + e.what());
      }
    }
    last_status = res->status;
    last_message = res->body;
    if (res->status >= 400 && res->status < 500) throw FoldBackendError(res->status, res->body);
  }
  if (timed_out) throw FoldTimeout("fold request timed out after " + std::to_string(spec_.retries + 1) + " attempts");
  throw FoldBackendError(last_status, last_message);
}

std::vector<FoldResult> HttpFoldClient::fold_batch(std::span<const Sequence> sequences) {
  nlohmann::json req{{"sequences", nlohmann::json::array()}};
  for (const auto& s : sequences) req["sequences"].push_back(s.to_text());
  const nlohmann::json res = post_with_retry(req.dump());
  if (!res.contains("results") || !res["results"].is_array() || res["results"].size() != sequences.size())
    throw FoldBackendError(200, "response has " + std::string(res.contains("results") ? "a wrong number of" : "no") +
                                    " results");
  std::vector<FoldResult> out;
  for (size_t i = 0; i < sequences.size(); ++i) out.push_back(fold_result_from_json(res["results"][i], id(), sequences[i]));
  return out;
}

FoldResult HttpFoldClient::fold(const Sequence& sequence) {
  return fold_batch(std::span<const Sequence>(&sequence, 1)).front();
}

std::unique_ptr<FoldOracle> make_oracle(const OracleSpec& spec) {
  spec.validate();
  if (spec.kind == OracleSpec::Kind::Toy) return std::make_unique<ToyFolder>();
  return std::make_unique<HttpFoldClient>(spec);
}

nlohmann::json fold_result_to_json(const FoldResult& r) {
  nlohmann::json coords = nlohmann::json::array();
  for (const Vec3& v : r.ca_coords) coords.push_back({v.x, v.y, v.z});
  nlohmann::json j{{"ca_coords", std::move(coords)}};
  j["plddt"] = r.plddt ? nlohmann::json(*r.plddt) : nlohmann::json(nullptr);
  return j;
}

FoldResult fold_result_from_json(const nlohmann::json& j, const std::string& oracle_id, const Sequence& sequence) {
  FoldResult r;
  try {
    for (const auto& c : j.at("ca_coords")) {
      if (c.size() != 3) throw FoldBackendError(200, "coordinate triple has " + std::to_string(c.size()) + " entries");
      r.ca_coords.push_back({c[0].get<double>(), c[1].get<double>(), c[2].get<double>()});
    }
    if (j.contains("plddt") && !j["plddt"].is_null()) r.plddt = j["plddt"].get<std::vector<double>>();
  } catch (const nlohmann::json::exception& e) {
    throw FoldBackendError(200, std::string("malformed fold result: ") + e.what());
  }
  if (r.ca_coords.size() != sequence.size())
    throw InvalidLength("backend returned " + std::to_string(r.ca_coords.size()) + " coordinates for a length-" +
                        std::to_string(sequence.size()) + " sequence");
  if (r.plddt && r.plddt->size() != sequence.size()) throw InvalidLength("plddt length differs from sequence length");
  for (const Vec3& v : r.ca_coords)
    if (!is_finite(v)) throw FoldBackendError(200, "non-finite coordinate in fold result");
  r.oracle_id = oracle_id;
  r.digest = sha256_hex(sequence.to_text());
  return r;
}

FoldCache::FoldCache(std::filesystem::path dir, FoldOracle& oracle, bool single_flight)
    : dir_(std::move(dir)), oracle_(oracle), single_flight_(single_flight) {
  std::filesystem::create_directories(dir_);
}

std::string FoldCache::key(const Sequence& sequence) const {
  std::string material = oracle_.id();
  material.push_back('\0');
  material += sequence.to_text();
  return sha256_hex(material);
}

std::optional<FoldResult> FoldCache::read(const std::filesystem::path& path, const Sequence& sequence) {
  std::ifstream in(path);
  if (!in) return std::nullopt;
  std::stringstream buf;
  buf << in.rdbuf();
  try {
    const auto j = nlohmann::json::parse(buf.str());
    const auto& payload = j.at("payload");
    if (sha256_hex(payload.dump()) != j.at("checksum").get<std::string>())
      throw CacheCorrupt("checksum mismatch in " + path.string());
    if (payload.at("oracle_id") != oracle_.id() || payload.at("sequence") != sequence.to_text())
      throw CacheCorrupt("cache entry " + path.string() + " belongs to a different key");
    return fold_result_from_json(payload.at("result"), oracle_.id(), sequence);
  } catch (const std::exception&) {
    ++corrupt_;
    return std::nullopt;
  }
}

void FoldCache::write(const std::filesystem::path& path, const Sequence& sequence, const FoldResult& result) {
  nlohmann::json payload{{"oracle_id", oracle_.id()}, {"sequence", sequence.to_text()},
                         {"result", fold_result_to_json(result)}};
  nlohmann::json entry{{"payload", payload}, {"checksum", sha256_hex(payload.dump())}};
  static std::atomic<uint64_t> counter{0};
  auto tmp = path;
  tmp += ".tmp" + std::to_string(std::hash<std::thread::id>{}(std::this_thread::get_id())) + "." +
         std::to_string(counter++);
  {
    std::ofstream out(tmp, std::ios::trunc);
    out << entry.dump();
    if (!out) throw Error("cannot write cache entry " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

FoldResult FoldCache::fold_uncoalesced(const Sequence& sequence) {
  const auto path = dir_ / (key(sequence) + ".json");
  if (auto hit = read(path, sequence)) {
    ++hits_;
    return *hit;
  }
  ++misses_;
  FoldResult r = oracle_.fold(sequence);
  write(path, sequence, r);
  return r;
}

FoldResult FoldCache::fold(const Sequence& sequence) {
  if (!single_flight_) return fold_uncoalesced(sequence);
  const std::string k = key(sequence);
  std::promise<FoldResult> promise;
  {
    std::unique_lock lock(mutex_);
    if (auto it = pending_.find(k); it != pending_.end()) {
      auto fut = it->second;
      lock.unlock();
      return fut.get();
    }
    pending_.emplace(k, promise.get_future().share());
  }
  try {
    FoldResult r = fold_uncoalesced(sequence);
    promise.set_value(r);
    std::lock_guard lock(mutex_);
    pending_.erase(k);
    return r;
  } catch (...) {
    promise.set_exception(std::current_exception());
    std::lock_guard lock(mutex_);
    pending_.erase(k);
    throw;
  }
}

std::vector<FoldOutcome> FoldCache::fold_many(std::span<const Sequence> sequences, int parallelism) {
  std::vector<FoldOutcome> out(sequences.size());
  std::atomic<size_t> next{0};
  auto worker = [&] {
    for (size_t i = next++; i < sequences.size(); i = next++) {
      try {
        out[i].result = fold(sequences[i]);
      } catch (const std::exception& e) {
        out[i].error = e.what();
      }
    }
  };
  const int threads = std::max(1, std::min<int>(parallelism, static_cast<int>(sequences.size())));
  if (threads == 1) {
    worker();
    return out;
  }
  std::vector<std::thread> pool;
  for (int t = 0; t < threads; ++t) pool.emplace_back(worker);
  for (auto& th : pool) th.join();
  return out;
}

FoldResult fold_cached(const std::filesystem::path& dir, FoldOracle& oracle, const Sequence& sequence) {
  FoldCache cache(dir, oracle, false);
  return cache.fold(sequence);
}

struct ToyFoldServer::Impl {
  httplib::Server server;
};

ToyFoldServer::ToyFoldServer(StubServerOptions options) : impl_(std::make_unique<Impl>()), options_(options) {
  const size_t threads = static_cast<size_t>(std::max(1, options_.thread_count));
  impl_->server.new_task_queue = [threads] { return new httplib::ThreadPool(threads); };
  impl_->server.Post("/fold", [this](const httplib::Request& req, httplib::Response& res) {
    const long n = ++requests_;
    const int now = ++in_flight_;
    for (int seen = max_in_flight_.load(); now > seen && !max_in_flight_.compare_exchange_weak(seen, now);) {
    }
    struct Leave {
      std::atomic<int>& c;
      ~Leave() { --c; }
    } leave{in_flight_};
    if (options_.delay_ms > 0) std::this_thread::sleep_for(std::chrono::milliseconds(options_.delay_ms));
    auto fail = [&](int status, const std::string& message) {
      res.status = status;
      res.set_content(nlohmann::json{{"error", message}}.dump(), "application/json");
    };
    if (n <= options_.fail_first) return fail(options_.fail_status, "injected failure");
    nlohmann::json body;
    try {
      body = nlohmann::json::parse(req.body);
    } catch (const nlohmann::json::exception& e) {
      return fail(400, std::string("invalid JSON: ") + e.what());
    }
    if (!body.contains("sequences") || !body["sequences"].is_array())
      return fail(400, "request needs a \"sequences\" array");
    ToyFolder folder;
    nlohmann::json results = nlohmann::json::array();
    for (const auto& s : body["sequences"]) {
      if (!s.is_string()) return fail(400, "sequences must be strings");
      try {
        results.push_back(fold_result_to_json(folder.fold(Sequence::from_text(s.get<std::string>()))));
      } catch (const Error& e) {
        return fail(400, e.what());
      }
    }
    sequences_ += static_cast<long>(results.size());
    res.set_content(nlohmann::json{{"results", std::move(results)}}.dump(), "application/json");
  });
}

ToyFoldServer::~ToyFoldServer() { stop(); }

int ToyFoldServer::start(const std::string& host, int port) {
  if (port == 0) {
    port_ = impl_->server.bind_to_any_port(host);
  } else {
    if (!impl_->server.bind_to_port(host, port)) port_ = -1;
    else port_ = port;
  }
  if (port_ <= 0) throw Error("cannot bind stub fold server on " + host + ":" + std::to_string(port));
  thread_ = std::thread([this] { impl_->server.listen_after_bind(); });
  impl_->server.wait_until_ready();
  return port_;
}

void ToyFoldServer::listen(const std::string& host, int port) {
  port_ = port;
  if (!impl_->server.listen(host, port)) throw Error("cannot listen on " + host + ":" + std::to_string(port));
}

void ToyFoldServer::stop() {
  impl_->server.stop();
  if (thread_.joinable()) thread_.join();
}

}  // namespace rldif::fold
