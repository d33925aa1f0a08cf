// Policy-gradient fine-tuning of the denoiser: reverse diffusion is treated
// as a T-step decision process, rewarded by the self-consistency TM-score of
// the final sequence, and optimized with a clipped importance-weighted
// surrogate.

#ifndef RLDIF_DDPO_HPP_
#define RLDIF_DDPO_HPP_

#include <filesystem>
#include <functional>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "rldif/autodiff.hpp"
#include "rldif/d3pm.hpp"
#include "rldif/denoiser.hpp"
#include "rldif/folding.hpp"

namespace rldif::ddpo {

RLDIF_DEFINE_ERROR(GroupTooSmall);
RLDIF_DEFINE_ERROR(NonFiniteRatio);

struct DDPOConfig {
  int structures_per_step = 32;
  int samples_per_structure = 4;
  double clip = 0.2;
  double lr = 1e-5;
  int steps = 1000;
  int inner_epochs = 1;
  int timestep_subsample = 0;  // 0 = every step
  int minibatch = 32;          // trajectories per optimizer step
  uint64_t seed = 0;
  int fold_parallelism = 4;
  double max_fold_failure = 0.5;  // fraction of failed folds that aborts a step
  int checkpoint_every = 0;
  std::filesystem::path checkpoint_dir;

  void validate() const;
  nlohmann::json to_json() const;
  static DDPOConfig from_json(const nlohmann::json& j);
};

// states[k] = S_{T-k}; logp[k][i] = log p_old(states[k+1][i] | states[k]) at
// step timesteps[k] = T - k.
struct Trajectory {
  std::string structure_id;
  size_t structure_index = 0;
  std::vector<Sequence> states;
  std::vector<std::vector<double>> logp;
  std::vector<int> timesteps;

  const Sequence& final_sequence() const { return states.back(); }
};

// `samples` reverse-diffusion rollouts per structure under frozen params.
std::vector<Trajectory> rollout(const ad::ParamSet& params, const DenoiserConfig& config,
                                std::span<const PreparedEntry* const> structures, int samples,
                                const d3pm::TransitionSchedule& schedule, Rng& rng);

// Log-probabilities of a trajectory's chosen tokens recomputed under params.
std::vector<std::vector<double>> replay_logp(const ad::ParamSet& params, const DenoiserConfig& config,
                                             const ResidueGraph& graph, const Trajectory& trajectory,
                                             const d3pm::TransitionSchedule& schedule);

// (r - mean) / (population std + eps); an all-equal group maps to zeros.
std::vector<double> standardize_rewards(std::span<const double> raw, double eps = 1e-8);

struct RewardBatch {
  std::vector<std::vector<double>> raw;
  std::vector<std::vector<double>> advantages;
};
RewardBatch standardize_groups(const std::vector<std::vector<double>>& raw, double eps = 1e-8);

struct PgItem {
  const ResidueGraph* graph = nullptr;
  const Trajectory* trajectory = nullptr;
  double advantage = 0;
};

struct PgLoss {
  ad::Var loss;
  long tokens = 0;   // ratios evaluated
  long clipped = 0;  // ratios outside [1 - eps, 1 + eps]
  long skipped = 0;  // trajectories dropped for an excessive log-prob gap
  double max_abs_log_ratio = 0;
};

inline constexpr double kMaxLogRatio = 50.0;

// -sum_t sum_i min(r A, clip(r, 1 - eps, 1 + eps) A) with per-token ratios
// r = exp(logp_theta - logp_old), scaled by T / |subset|, averaged over the
// trajectories that were not skipped. `subset` lists timesteps in [1, T];
// empty means all.
PgLoss clipped_pg_loss(ad::Tape& tape, const ad::BoundParams& params, const DenoiserConfig& config,
                       std::span<const PgItem> items, double eps, std::span<const int> subset,
                       const d3pm::TransitionSchedule& schedule);

// Single-trajectory form; throws NonFiniteRatio instead of skipping.
ad::Var clipped_pg_loss(ad::Tape& tape, const ad::BoundParams& params, const DenoiserConfig& config,
                        const ResidueGraph& graph, const Trajectory& trajectory, double advantage, double eps,
                        std::span<const int> subset, const d3pm::TransitionSchedule& schedule);

struct StepStats {
  int step = 0;
  double mean_reward = 0;
  double std_reward = 0;
  double clip_fraction = 0;
  long skipped_trajectories = 0;
  long failed_folds = 0;
  bool aborted = false;
};

struct RlResult {
  ad::ParamSet params;
  std::vector<StepStats> history;
};

// sc-TM of each design against Fold(reference); failed folds yield NaN.
std::vector<double> score_designs(fold::FoldCache& cache, const Sequence& reference,
                                  std::span<const Sequence> designs, int parallelism, long* failures = nullptr);

RlResult rl_train(const ad::ParamSet& pretrained, const DenoiserConfig& model, std::span<const PreparedEntry> dataset,
                  const DDPOConfig& config, fold::FoldCache& cache,
                  const std::function<void(const StepStats&)>& progress = {});

// Mean sc-TM of `samples` designs per structure, drawn with a fixed seed.
double mean_reward(const ad::ParamSet& params, const DenoiserConfig& model, std::span<const PreparedEntry> panel,
                   int samples, uint64_t seed, fold::FoldCache& cache);

void write_history_csv(std::ostream& out, std::span<const StepStats> history);

}  // namespace rldif::ddpo

#endif  // RLDIF_DDPO_HPP_
