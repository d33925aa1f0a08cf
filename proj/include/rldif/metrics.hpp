// Evaluation metrics: sequence recovery, diversity, foldable diversity,
// Kabsch superposition, TM-score and self-consistency TM-score.

#ifndef RLDIF_METRICS_HPP_
#define RLDIF_METRICS_HPP_

#include <Eigen/Dense>
#include <span>
#include <string>
#include <vector>

#include "rldif/core.hpp"
#include "rldif/folding.hpp"

namespace rldif::metrics {

RLDIF_DEFINE_ERROR(SingletonSet);
RLDIF_DEFINE_ERROR(DegeneratePointSet);
RLDIF_DEFINE_ERROR(TooShort);

// Fraction of positions where design and reference agree.
double sequence_recovery(const Sequence& design, const Sequence& reference);

// Length-normalized Hamming distance.
double hamming_fraction(const Sequence& a, const Sequence& b);

// Mean pairwise normalized Hamming distance over all design pairs.
double sequence_diversity(std::span<const Sequence> designs);

struct FDConfig {
  double tm_min = 0.7;
  void validate() const;
};

// Diversity restricted to pairs whose sc-TM values both exceed tm_min
// (strictly); the normalizer is always the full pair count.
double foldable_diversity(std::span<const Sequence> designs, std::span<const double> sc_tm, double tm_min);

struct DesignSet {
  std::string target_id;
  Sequence reference;
  std::vector<Sequence> designs;
  std::vector<double> sc_tm;

  void validate() const;
};
double foldable_diversity(const DesignSet& set, const FDConfig& config = {});

// Rigid motion x -> rotation * x + translation mapping P onto Q.
struct Superposition {
  Eigen::Matrix3d rotation = Eigen::Matrix3d::Identity();
  Eigen::Vector3d translation = Eigen::Vector3d::Zero();
  double rmsd = 0;

  Vec3 apply(const Vec3& p) const;
};

Superposition kabsch(std::span<const Vec3> p, std::span<const Vec3> q);

double tm_d0(size_t length);

// TM-score of two position-paired Cα traces of equal length.
double tm_score(std::span<const Vec3> a, std::span<const Vec3> b);

// TM-score between Fold(design) and Fold(reference).
double sc_tm(const Sequence& design, const Sequence& reference, fold::FoldCache& cache);

}  // namespace rldif::metrics

#endif  // RLDIF_METRICS_HPP_
