// Shared fixtures and oracles for the unit tests.

#ifndef RLDIF_TEST_UTIL_HPP_
#define RLDIF_TEST_UTIL_HPP_

#include <algorithm>
#include <atomic>
#include <cmath>
#include <filesystem>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include <unistd.h>

#include "rldif/autodiff.hpp"
#include "rldif/core.hpp"
#include "rldif/featurize.hpp"
#include "rldif/folding.hpp"

namespace rldif::testing {

// Rotation by `angle` about a unit axis followed by a translation.
struct RigidMotion {
  Vec3 axis{0.36, -0.48, 0.8};
  double angle = 1.1;
  Vec3 shift{3.5, -7.25, 12.0};

  Vec3 operator()(const Vec3& p) const {
    const Vec3 k = normalized(axis);
    const double c = std::cos(angle), s = std::sin(angle);
    const Vec3 r = p * c + cross(k, p) * s + k * (dot(k, p) * (1 - c));
    return r + shift;
  }
  Vec3 apply(const Vec3& p) const { return (*this)(p); }

  static RigidMotion random(Rng& rng) {
    return {{rng.normal(), rng.normal(), rng.normal()},
            6.283185307179586 * rng.uniform(),
            {20 * rng.uniform() - 10, 20 * rng.uniform() - 10, 20 * rng.uniform() - 10}};
  }
};

inline Backbone moved(const Backbone& bb, const RigidMotion& m = {}) {
  Backbone out = bb;
  for (auto& r : out.residues)
    for (auto& a : r.atoms) a = m(a);
  return out;
}

inline std::vector<Vec3> moved(std::span<const Vec3> pts, const RigidMotion& m = {}) {
  std::vector<Vec3> out;
  for (const auto& p : pts) out.push_back(m(p));
  return out;
}

inline Sequence random_sequence(size_t n, Rng& rng) {
  std::vector<int> r(n);
  for (auto& x : r) x = rng.uniform_int(0, kNumAminoAcids - 1);
  return Sequence(std::move(r));
}

inline Backbone toy_backbone(const Sequence& s) { return fold::backbone_from_ca_trace(fold::toy_ca_trace(s)); }

// Largest feature difference between two graphs over the same nodes. Equidistant
// neighbours may swap order under round-off, so edges are matched by (src, dst).
// Returns infinity when the edge sets differ.
inline double graph_feature_gap(const ResidueGraph& a, const ResidueGraph& b) {
  if (a.num_nodes != b.num_nodes || a.node_dim != b.node_dim || a.edge_dim != b.edge_dim ||
      a.num_edges() != b.num_edges())
    return INFINITY;
  double worst = 0;
  for (size_t i = 0; i < a.node_features.size(); ++i)
    worst = std::max(worst, std::abs(a.node_features[i] - b.node_features[i]));
  std::map<std::pair<int, int>, size_t> index;
  for (size_t e = 0; e < a.num_edges(); ++e) index[{a.src[e], a.dst[e]}] = e;
  const auto w = static_cast<size_t>(a.edge_dim);
  for (size_t e = 0; e < b.num_edges(); ++e) {
    const auto it = index.find({b.src[e], b.dst[e]});
    if (it == index.end()) return INFINITY;
    for (size_t j = 0; j < w; ++j)
      worst = std::max(worst, std::abs(a.edge_features[it->second * w + j] - b.edge_features[e * w + j]));
  }
  return worst;
}

inline ad::Tensor random_tensor(size_t rows, size_t cols, Rng& rng, double scale = 1.0) {
  ad::Tensor t(rows, cols);
  for (size_t i = 0; i < t.size(); ++i) t[i] = scale * (2 * rng.uniform() - 1);
  return t;
}

// Max over entries of |analytic - numeric| / max(|analytic|, |numeric|, floor)
// with central differences of step h.
using ScalarFn = std::function<ad::Var(ad::Tape&, const std::vector<ad::Var>&)>;
inline double grad_check(const ScalarFn& f, std::vector<ad::Tensor> inputs, double h = 1e-5, double floor = 1e-3) {
  ad::Tape tape;
  std::vector<ad::Var> leaves;
  for (const auto& t : inputs) leaves.push_back(tape.leaf(t));
  tape.backward(f(tape, leaves));
  auto eval = [&] {
    ad::Tape t2;
    std::vector<ad::Var> l2;
    for (const auto& t : inputs) l2.push_back(t2.leaf(t, false));
    return f(t2, l2).value().item();
  };
  double worst = 0;
  for (size_t k = 0; k < inputs.size(); ++k) {
    for (size_t i = 0; i < inputs[k].size(); ++i) {
      const double x = inputs[k][i];
      inputs[k][i] = x + h;
      const double up = eval();
      inputs[k][i] = x - h;
      const double down = eval();
      inputs[k][i] = x;
      const double numeric = (up - down) / (2 * h);
      const double analytic = leaves[k].grad()[i];
      const double denom = std::max({std::abs(analytic), std::abs(numeric), floor});
      worst = std::max(worst, std::abs(analytic - numeric) / denom);
    }
  }
  return worst;
}

// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  TempDir() {
    static std::atomic<int> counter{0};
    path_ = std::filesystem::temp_directory_path() /
            ("rldif_test_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() { std::filesystem::remove_all(path_); }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
};

}  // namespace rldif::testing

#endif  // RLDIF_TEST_UTIL_HPP_
