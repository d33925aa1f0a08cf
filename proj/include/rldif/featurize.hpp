// Residue kNN graph and geometric node/edge features for the denoiser.
//
// Node features (15): sin/cos of phi, psi, omega, then the N-CA, C-CA and
// O-CA unit vectors in the residue's local frame. Undefined terminal angles
// are encoded as sin = cos = 0.
//
// Edge features (260 by default): Gaussian RBF expansion of the 16 ordered
// backbone atom-pair distances, the unit CA->CA direction in the source
// frame, and the clipped, scaled signed sequence separation.

#ifndef RLDIF_FEATURIZE_HPP_
#define RLDIF_FEATURIZE_HPP_

#include <array>
#include <vector>

#include "rldif/core.hpp"

namespace rldif {

RLDIF_DEFINE_ERROR(TooFewResidues);
RLDIF_DEFINE_ERROR(DegenerateGeometry);

struct Edge {
  int src = 0;
  int dst = 0;
  double distance = 0;  // CA-CA, Angstrom
};

// Out-edges of every node to its min(k, N-1) nearest residues by CA distance,
// sorted by (source, distance, target).
std::vector<Edge> knn_graph(const Backbone& backbone, int k = 30);
std::vector<Edge> knn_graph(std::span<const Vec3> points, int k);

// Signed torsion about the p2-p3 axis, in (-pi, pi].
double dihedral(const Vec3& p1, const Vec3& p2, const Vec3& p3, const Vec3& p4);

struct FeatureConfig {
  int k = 30;
  int rbf_count = 16;
  double rbf_max = 20.0;
  int max_separation = 32;

  int node_dim() const { return 15; }
  int edge_dim() const { return kBackboneAtoms * kBackboneAtoms * rbf_count + 3 + 1; }
};

// Orthonormal frame at a residue: e1 along CA->C, e2 from CA->N by Gram-Schmidt.
struct LocalFrame {
  Vec3 e1, e2, e3;
  Vec3 to_local(const Vec3& v) const { return {dot(v, e1), dot(v, e2), dot(v, e3)}; }
};
LocalFrame local_frame(const Residue& r);

// phi/psi/omega per residue; NaN marks undefined terminal angles.
struct BackboneTorsions {
  std::vector<double> phi, psi, omega;
};
BackboneTorsions backbone_torsions(const Backbone& backbone);

double rbf(double d, double center, double width);

struct ResidueGraph {
  int num_nodes = 0;
  int node_dim = 0;
  int edge_dim = 0;
  std::vector<int> src, dst;
  std::vector<double> node_features;  // num_nodes x node_dim
  std::vector<double> edge_features;  // num_edges x edge_dim

  size_t num_edges() const { return src.size(); }
};

ResidueGraph build_features(const Backbone& backbone, const FeatureConfig& config = {});

}  // namespace rldif

#endif  // RLDIF_FEATURIZE_HPP_
