// Categorical diffusion over the amino-acid vocabulary with uniform
// transition kernels: schedules, forward process, exact posterior,
// model-marginalized reverse step and the hybrid training loss.

#ifndef RLDIF_D3PM_HPP_
#define RLDIF_D3PM_HPP_

#include <string>
#include <vector>

#include "json.hpp"
#include "rldif/autodiff.hpp"
#include "rldif/core.hpp"

namespace rldif::d3pm {

RLDIF_DEFINE_ERROR(InvalidBeta);
RLDIF_DEFINE_ERROR(StepOutOfRange);
RLDIF_DEFINE_ERROR(ZeroSupportPosterior);

// Per-step mixing rates beta_t. "cosine" makes the cumulative retention
// follow cos^2((t/T + s)/(1 + s) * pi/2); "linear" interpolates
// beta_start..beta_end; "custom" uses `betas` verbatim.
struct ScheduleSpec {
  std::string name = "cosine";
  double s = 0.008;
  double beta_start = 0.02;
  double beta_end = 1.0;
  std::vector<double> betas;

  nlohmann::json to_json() const;
  static ScheduleSpec from_json(const nlohmann::json& j);
};

// K x K row-stochastic kernel (1 - beta) I + (beta / K) 11^T, row-major.
std::vector<double> uniform_transition(int vocab, double beta);

class TransitionSchedule {
 public:
  TransitionSchedule(int steps, const ScheduleSpec& spec);

  int steps() const { return steps_; }
  const ScheduleSpec& spec() const { return spec_; }
  double beta(int t) const { return betas_.at(static_cast<size_t>(t)); }
  // Q_t for t in [1, T]; row-major 20 x 20.
  const std::vector<double>& q(int t) const;
  // Cumulative product Q_1 ... Q_t for t in [0, T]; Qbar_0 = I.
  const std::vector<double>& qbar(int t) const;
  double q_at(int t, int from, int to) const { return q(t)[from * kNumAminoAcids + to]; }
  double qbar_at(int t, int from, int to) const { return qbar(t)[from * kNumAminoAcids + to]; }
  // Stationary distribution of the forward process (uniform).
  std::vector<double> stationary() const;

  nlohmann::json to_json() const;
  static TransitionSchedule from_json(const nlohmann::json& j);

 private:
  int steps_;
  ScheduleSpec spec_;
  std::vector<double> betas_;  // index 0 unused
  std::vector<std::vector<double>> q_, qbar_;
};

TransitionSchedule make_uniform_schedule(int steps, const ScheduleSpec& spec = {});

struct NoisySample {
  Sequence s_t;
  int t = 0;
};

void check_step(const TransitionSchedule& schedule, int t);

CategoricalDist forward_marginal(const Sequence& s0, int t, const TransitionSchedule& schedule);
NoisySample forward_sample(const Sequence& s0, int t, const TransitionSchedule& schedule, Rng& rng);

// q(S_{t-1} | S_t, S_0) per residue.
CategoricalDist posterior(const Sequence& s_t, const Sequence& s0, int t, const TransitionSchedule& schedule);

// p(S_{t-1} | S_t) proportional to sum_v q(S_t | S_{t-1}) q(S_{t-1} | v) p0_hat(v | S_t).
CategoricalDist reverse_step(const CategoricalDist& p0_hat, const Sequence& s_t, int t,
                             const TransitionSchedule& schedule);

// Tape versions. `p0_hat` is N x 20 probabilities; returns N x 20.
ad::Var reverse_probs(ad::Var p0_hat, const Sequence& s_t, int t, const TransitionSchedule& schedule);

struct HybridLossTerms {
  ad::Var total;
  ad::Var vb;  // KL to the posterior, or -log p(S_0 | S_1) at t = 1
  ad::Var ce;
};

// Mean over residues of the variational term plus lambda * cross-entropy of
// p0_hat (= softmax(logits)) against S_0.
HybridLossTerms hybrid_loss(ad::Var logits, const Sequence& s0, const Sequence& s_t, int t,
                            const TransitionSchedule& schedule, double lambda);

// Same quantity evaluated directly on a probability table (no tape).
struct HybridLossValue {
  double total = 0, vb = 0, ce = 0;
};
HybridLossValue hybrid_loss_value(const CategoricalDist& p0_hat, const Sequence& s0, const Sequence& s_t,
                                  int t, const TransitionSchedule& schedule, double lambda);

}  // namespace rldif::d3pm

#endif  // RLDIF_D3PM_HPP_
