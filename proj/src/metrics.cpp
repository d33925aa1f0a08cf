#include "rldif/metrics.hpp"

#include <algorithm>
#include <cmath>

namespace rldif::metrics {

namespace {

void check_equal_lengths(std::span<const Sequence> designs) {
  for (const auto& d : designs)
    if (d.size() != designs.front().size()) throw LengthMismatch("designs differ in length");
}

Eigen::Vector3d to_eigen(const Vec3& v) { return {v.x, v.y, v.z}; }

double score_under(const Superposition& s, std::span<const Vec3> a, std::span<const Vec3> b, double d0,
                   std::vector<double>& dist) {
  double total = 0;
  for (size_t i = 0; i < a.size(); ++i) {
    dist[i] = distance(s.apply(a[i]), b[i]);
    const double r = dist[i] / d0;
    total += 1.0 / (1.0 + r * r);
  }
  return total / static_cast<double>(a.size());
}

Superposition kabsch_subset(std::span<const Vec3> a, std::span<const Vec3> b, const std::vector<size_t>& idx) {
  std::vector<Vec3> pa, pb;
  pa.reserve(idx.size());
  pb.reserve(idx.size());
  for (size_t i : idx) {
    pa.push_back(a[i]);
    pb.push_back(b[i]);
  }
  return kabsch(pa, pb);
}

// Fragment-seeded iterative superposition search superposing a onto b.
double tm_search(std::span<const Vec3> a, std::span<const Vec3> b) {
  const size_t len = a.size();
  const double d0 = tm_d0(len);
  const size_t stride = std::max<size_t>(len / 8, 1);
  std::vector<double> dist(len);
  double best = 0;
  std::vector<size_t> frag_lengths;
  for (size_t f : {len, len / 2, len / 4})
    if (f >= 3 && std::find(frag_lengths.begin(), frag_lengths.end(), f) == frag_lengths.end())
      frag_lengths.push_back(f);
  constexpr int kMaxIterations = 20;
  for (size_t frag : frag_lengths) {
    for (size_t start = 0; start + frag <= len; start += stride) {
      std::vector<size_t> included(frag);
      for (size_t i = 0; i < frag; ++i) included[i] = start + i;
      Superposition s;
      try {
        s = kabsch_subset(a, b, included);
      } catch (const DegeneratePointSet&) {
        continue;
      }
      for (int iter = 0; iter < kMaxIterations; ++iter) {
        best = std::max(best, score_under(s, a, b, d0, dist));
        std::vector<size_t> next;
        for (size_t i = 0; i < len; ++i)
          if (dist[i] < d0) next.push_back(i);
        if (next.size() < 3 || next == included) break;
        included = std::move(next);
        try {
          s = kabsch_subset(a, b, included);
        } catch (const DegeneratePointSet&) {
          break;
        }
      }
    }
  }
  return best;
}

}  // namespace

double sequence_recovery(const Sequence& design, const Sequence& reference) {
  if (design.size() != reference.size()) throw LengthMismatch("design and reference differ in length");
  size_t same = 0;
  for (size_t i = 0; i < design.size(); ++i) same += design[i] == reference[i];
  return static_cast<double>(same) / static_cast<double>(design.size());
}

double hamming_fraction(const Sequence& a, const Sequence& b) {
  if (a.size() != b.size()) throw LengthMismatch("sequences differ in length");
  size_t diff = 0;
  for (size_t i = 0; i < a.size(); ++i) diff += a[i] != b[i];
  return static_cast<double>(diff) / static_cast<double>(a.size());
}

double sequence_diversity(std::span<const Sequence> designs) {
  if (designs.size() < 2) throw SingletonSet("diversity needs at least 2 designs");
  check_equal_lengths(designs);
  const size_t m = designs.size();
  double total = 0;
  for (size_t j = 0; j < m; ++j)
    for (size_t k = j + 1; k < m; ++k) total += hamming_fraction(designs[j], designs[k]);
  return total / static_cast<double>(m * (m - 1) / 2);
}

void FDConfig::validate() const {
  if (!(tm_min >= 0.0 && tm_min <= 1.0)) throw InvalidArgument("tm_min must lie in [0, 1]");
}

double foldable_diversity(std::span<const Sequence> designs, std::span<const double> sc_tm, double tm_min) {
  if (designs.size() < 2) throw SingletonSet("foldable diversity needs at least 2 designs");
  if (sc_tm.size() != designs.size()) throw LengthMismatch("one sc-TM value is needed per design");
  check_equal_lengths(designs);
  const size_t m = designs.size();
  double total = 0;
  for (size_t j = 0; j < m; ++j)
    for (size_t k = j + 1; k < m; ++k)
      if (std::min(sc_tm[j], sc_tm[k]) > tm_min) total += hamming_fraction(designs[j], designs[k]);
  return total / static_cast<double>(m * (m - 1) / 2);
}

void DesignSet::validate() const {
  if (designs.empty()) throw SingletonSet("design set is empty");
  if (sc_tm.size() != designs.size()) throw LengthMismatch("one sc-TM value is needed per design");
  for (const auto& d : designs)
    if (d.size() != reference.size()) throw LengthMismatch("design length differs from the reference");
  for (double v : sc_tm)
    if (!(v >= 0.0 && v <= 1.0)) throw InvalidArgument("sc-TM values must lie in [0, 1]");
}

double foldable_diversity(const DesignSet& set, const FDConfig& config) {
  set.validate();
  config.validate();
  return foldable_diversity(set.designs, set.sc_tm, config.tm_min);
}

Vec3 Superposition::apply(const Vec3& p) const {
  const Eigen::Vector3d r = rotation * to_eigen(p) + translation;
  return {r.x(), r.y(), r.z()};
}

Superposition kabsch(std::span<const Vec3> p, std::span<const Vec3> q) {
  if (p.size() != q.size()) throw LengthMismatch("kabsch needs paired point sets");
  if (p.size() < 3) throw TooShort("kabsch needs at least 3 points");
  const auto n = static_cast<Eigen::Index>(p.size());
  Eigen::Matrix<double, Eigen::Dynamic, 3> a(n, 3), b(n, 3);
  for (Eigen::Index i = 0; i < n; ++i) {
    if (!is_finite(p[i]) || !is_finite(q[i])) throw InvalidArgument("non-finite coordinate");
    a.row(i) = to_eigen(p[i]).transpose();
    b.row(i) = to_eigen(q[i]).transpose();
  }
  const Eigen::RowVector3d ca = a.colwise().mean(), cb = b.colwise().mean();
  a.rowwise() -= ca;
  b.rowwise() -= cb;
  for (const auto* m : {&a, &b}) {
    const Eigen::Vector3d sv = Eigen::JacobiSVD<Eigen::MatrixXd>(*m).singularValues();
    if (!(sv(1) > 1e-9 * std::max(1.0, sv(0)))) throw DegeneratePointSet("point set has rank below 2");
  }
  const Eigen::Matrix3d h = a.transpose() * b;
  Eigen::JacobiSVD<Eigen::Matrix3d> svd(h, Eigen::ComputeFullU | Eigen::ComputeFullV);
  Eigen::Matrix3d d = Eigen::Matrix3d::Identity();
  if ((svd.matrixV() * svd.matrixU().transpose()).determinant() < 0) d(2, 2) = -1;
  Superposition s;
  s.rotation = svd.matrixV() * d * svd.matrixU().transpose();
  s.translation = cb.transpose() - s.rotation * ca.transpose();
  double sq = 0;
  for (Eigen::Index i = 0; i < n; ++i) sq += (s.rotation * a.row(i).transpose() - b.row(i).transpose()).squaredNorm();
  s.rmsd = std::sqrt(sq / static_cast<double>(n));
  return s;
}

double tm_d0(size_t length) {
  const double raw = 1.24 * std::cbrt(static_cast<double>(length) - 15.0) - 1.8;
  return std::max(raw, 0.5);
}

double tm_score(std::span<const Vec3> a, std::span<const Vec3> b) {
  if (a.size() != b.size()) throw LengthMismatch("tm_score needs equal-length paired traces");
  if (a.size() < 3) throw TooShort("tm_score needs at least 3 residues");
  if (std::equal(a.begin(), a.end(), b.begin())) return 1.0;
  return std::min(1.0, std::max(tm_search(a, b), tm_search(b, a)));
}

double sc_tm(const Sequence& design, const Sequence& reference, fold::FoldCache& cache) {
  if (design.size() != reference.size()) throw LengthMismatch("design and reference differ in length");
  const auto folded_design = cache.fold(design);
  const auto folded_reference = cache.fold(reference);
  return tm_score(folded_design.ca_coords, folded_reference.ca_coords);
}

}  // namespace rldif::metrics
