#include "rldif/featurize.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <numeric>

#include "rldif/kernels.hpp"

namespace rldif {

std::vector<Edge> knn_graph(std::span<const Vec3> points, int k) {
  const size_t n = points.size();
  if (n < 2) throw TooFewResidues("kNN graph needs at least 2 residues");
  if (k < 1) throw InvalidArgument("k must be positive");
  for (const auto& p : points)
    if (!is_finite(p)) throw InvalidArgument("non-finite CA coordinate");

  const size_t degree = std::min(static_cast<size_t>(k), n - 1);
  std::vector<double> d2(n * n);
  kernels::pairwise_sq_dist(points, d2);

  std::vector<Edge> edges(n * degree);
  const auto rows = static_cast<std::ptrdiff_t>(n);
#pragma omp parallel for schedule(static) if (n > 256)
  for (std::ptrdiff_t ii = 0; ii < rows; ++ii) {
    const auto i = static_cast<size_t>(ii);
    const double* row = d2.data() + i * n;
    std::vector<int> cand;
    cand.reserve(n - 1);
    for (size_t j = 0; j < n; ++j)
      if (j != i) cand.push_back(static_cast<int>(j));
    auto closer = [row](int a, int b) { return row[a] < row[b] || (row[a] == row[b] && a < b); };
    std::partial_sort(cand.begin(), cand.begin() + static_cast<std::ptrdiff_t>(degree), cand.end(),
                      closer);
    for (size_t e = 0; e < degree; ++e)
      edges[i * degree + e] = {static_cast<int>(i), cand[e], std::sqrt(row[cand[e]])};
  }
  return edges;
}

std::vector<Edge> knn_graph(const Backbone& backbone, int k) {
  auto ca = backbone.ca_trace();
  return knn_graph(std::span<const Vec3>(ca), k);
}

double dihedral(const Vec3& p1, const Vec3& p2, const Vec3& p3, const Vec3& p4) {
  const Vec3 b1 = p2 - p1;
  const Vec3 b2 = p3 - p2;
  const Vec3 b3 = p4 - p3;
  const Vec3 n1 = cross(b1, b2);
  const Vec3 n2 = cross(b2, b3);
  if (norm(n1) < 1e-8 || norm(n2) < 1e-8)
    throw DegenerateGeometry("dihedral undefined: collinear or coincident points");
  const double y = norm(b2) * dot(b1, n2);
  const double x = dot(n1, n2);
  double angle = std::atan2(y, x);
  if (angle <= -std::numbers::pi) angle = std::numbers::pi;
  return angle;
}

LocalFrame local_frame(const Residue& r) {
  const Vec3 ca = r.ca();
  const Vec3 to_c = r.atom(BackboneAtom::C) - ca;
  const Vec3 to_n = r.atom(BackboneAtom::N) - ca;
  if (norm(to_c) < 1e-8) throw DegenerateGeometry("C coincides with CA");
  LocalFrame f;
  f.e1 = normalized(to_c);
  Vec3 u = to_n - f.e1 * dot(to_n, f.e1);
  if (norm(u) < 1e-8) throw DegenerateGeometry("N, CA, C are collinear");
  f.e2 = normalized(u);
  f.e3 = cross(f.e1, f.e2);
  return f;
}

BackboneTorsions backbone_torsions(const Backbone& bb) {
  const size_t n = bb.size();
  constexpr double nan = std::numeric_limits<double>::quiet_NaN();
  BackboneTorsions t{std::vector<double>(n, nan), std::vector<double>(n, nan),
                     std::vector<double>(n, nan)};
  using A = BackboneAtom;
  for (size_t i = 0; i < n; ++i) {
    const Residue& r = bb.residues[i];
    if (i > 0) {
      const Residue& prev = bb.residues[i - 1];
      t.phi[i] = dihedral(prev.atom(A::C), r.atom(A::N), r.atom(A::CA), r.atom(A::C));
      t.omega[i] = dihedral(prev.atom(A::CA), prev.atom(A::C), r.atom(A::N), r.atom(A::CA));
    }
    if (i + 1 < n) {
      const Residue& next = bb.residues[i + 1];
      t.psi[i] = dihedral(r.atom(A::N), r.atom(A::CA), r.atom(A::C), next.atom(A::N));
    }
  }
  return t;
}

double rbf(double d, double center, double width) {
  const double z = (d - center) / width;
  return std::exp(-z * z);
}

ResidueGraph build_features(const Backbone& bb, const FeatureConfig& config) {
  if (!bb.all_finite()) throw InvalidArgument("backbone has non-finite coordinates");
  if (config.rbf_count < 2) throw InvalidArgument("need at least 2 RBF centers");
  const int n = static_cast<int>(bb.size());
  auto edges = knn_graph(bb, config.k);

  ResidueGraph g;
  g.num_nodes = n;
  g.node_dim = config.node_dim();
  g.edge_dim = config.edge_dim();

  std::vector<LocalFrame> frames;
  frames.reserve(static_cast<size_t>(n));
  for (const auto& r : bb.residues) frames.push_back(local_frame(r));

  const auto torsions = backbone_torsions(bb);
  g.node_features.assign(static_cast<size_t>(n * g.node_dim), 0.0);
  for (int i = 0; i < n; ++i) {
    double* f = g.node_features.data() + static_cast<size_t>(i * g.node_dim);
    const std::array<double, 3> angles{torsions.phi[i], torsions.psi[i], torsions.omega[i]};
    for (int a = 0; a < 3; ++a) {
      if (std::isnan(angles[a])) continue;
      f[2 * a] = std::sin(angles[a]);
      f[2 * a + 1] = std::cos(angles[a]);
    }
    const Residue& r = bb.residues[i];
    const std::array<Vec3, 3> dirs{r.atom(BackboneAtom::N) - r.ca(), r.atom(BackboneAtom::C) - r.ca(),
                                   r.atom(BackboneAtom::O) - r.ca()};
    for (int v = 0; v < 3; ++v) {
      if (norm(dirs[v]) < 1e-8) throw DegenerateGeometry("backbone atom coincides with CA");
      const Vec3 local = frames[i].to_local(normalized(dirs[v]));
      f[6 + 3 * v] = local.x;
      f[7 + 3 * v] = local.y;
      f[8 + 3 * v] = local.z;
    }
  }

  const size_t ne = edges.size();
  g.src.resize(ne);
  g.dst.resize(ne);
  g.edge_features.assign(ne * static_cast<size_t>(g.edge_dim), 0.0);
  const double spacing = config.rbf_max / (config.rbf_count - 1);
  const auto edge_count = static_cast<std::ptrdiff_t>(ne);
#pragma omp parallel for schedule(static) if (ne > 2048)
  for (std::ptrdiff_t ei = 0; ei < edge_count; ++ei) {
    const Edge& e = edges[static_cast<size_t>(ei)];
    g.src[ei] = e.src;
    g.dst[ei] = e.dst;
    double* f = g.edge_features.data() + static_cast<size_t>(ei) * g.edge_dim;
    const Residue& ri = bb.residues[e.src];
    const Residue& rj = bb.residues[e.dst];
    int col = 0;
    for (int a = 0; a < kBackboneAtoms; ++a)
      for (int b = 0; b < kBackboneAtoms; ++b) {
        const double d = distance(ri.atoms[a], rj.atoms[b]);
        for (int c = 0; c < config.rbf_count; ++c) f[col++] = rbf(d, c * spacing, spacing);
      }
    const Vec3 dir = frames[e.src].to_local(normalized(rj.ca() - ri.ca()));
    f[col++] = dir.x;
    f[col++] = dir.y;
    f[col++] = dir.z;
    const int sep = std::clamp(e.dst - e.src, -config.max_separation, config.max_separation);
    f[col++] = static_cast<double>(sep) / config.max_separation;
  }
  return g;
}

}  // namespace rldif
