// Structure-conditioned denoising network p0_hat(S_0 | S_t, X), its
// pretraining loop, and ancestral sampling through the reverse process.
//
// Dataflow per replica (one structure, one noisy sequence, one step):
//   h'_V = MLP(h_V), h'_E = MLP(h_E), h_o = MLP([onehot(S_t), emb(t)])
//   h_Vs = [h'_V, h_o]
//   (h_out, e_out) = L message-passing layers over (h_Vs, h'_E)
//   logits = MLP([h_out, h_Vs])
// Several replicas are evaluated as one disjoint graph; every op is
// row-local, so a replica's outputs do not depend on its batch mates.

#ifndef RLDIF_DENOISER_HPP_
#define RLDIF_DENOISER_HPP_

#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "rldif/autodiff.hpp"
#include "rldif/core.hpp"
#include "rldif/d3pm.hpp"
#include "rldif/featurize.hpp"

namespace rldif {

RLDIF_DEFINE_ERROR(EmptyDataset);

struct DenoiserConfig {
  int layers = 3;
  int hidden = 64;
  int k = 30;
  int steps = 150;  // diffusion steps T
  d3pm::ScheduleSpec schedule;
  double lambda = 0.01;
  double lr = 1e-3;
  int batch_size = 8;
  int epochs = 200;
  uint64_t seed = 0;
  int checkpoint_every = 0;  // optimizer steps; 0 disables
  std::filesystem::path checkpoint_dir;
  int val_draws = 4;         // fixed (t, S_t) draws per validation structure
  bool validate_every_epoch = true;
  std::string activation = "relu";  // hidden MLP nonlinearity: "relu" or "gelu"

  // Settings reported for the full-size model.
  static DenoiserConfig full_scale();

  FeatureConfig features() const {
    FeatureConfig f;
    f.k = k;
    return f;
  }
  nlohmann::json to_json() const;
  static DenoiserConfig from_json(const nlohmann::json& j);
};

inline constexpr int kTimeEmbeddingDim = 17;  // 8 sin/cos pairs of t/T plus t/T

ad::ParamSet init_denoiser_params(const DenoiserConfig& config, uint64_t seed);

std::vector<double> time_embedding(int t, int steps);

struct Replica {
  const ResidueGraph* graph = nullptr;
  const Sequence* s_t = nullptr;
  int t = 1;
};

// Logits for all replicas stacked in order: (sum of N) x 20.
ad::Var denoise_logits(ad::Tape& tape, const ad::BoundParams& params, const DenoiserConfig& config,
                       std::span<const Replica> replicas);

// p0_hat(S_0 | S_t, X) for one structure.
CategoricalDist denoise_forward(const ad::ParamSet& params, const DenoiserConfig& config,
                                const ResidueGraph& graph, const Sequence& s_t, int t);

// Reverse-step distribution p(S_{t-1} | S_t) for each replica, rows stacked.
ad::Var replica_reverse_probs(ad::Var logits, std::span<const Replica> replicas,
                              const d3pm::TransitionSchedule& schedule);

struct PreparedEntry {
  const DatasetEntry* entry = nullptr;
  ResidueGraph graph;
};
std::vector<PreparedEntry> prepare_entries(std::span<const DatasetEntry* const> entries,
                                           const FeatureConfig& features);

struct PretrainProgress {
  int epoch = 0;
  long step = 0;
  double train_loss = 0;
  std::optional<double> val_loss;
};

struct PretrainResult {
  ad::ParamSet params;
  std::vector<double> train_loss;  // per optimizer step
  std::vector<double> val_loss;    // [0] before training, then per evaluation
};

double validation_loss(const ad::ParamSet& params, const DenoiserConfig& config,
                       std::span<const PreparedEntry> val, const d3pm::TransitionSchedule& schedule);

PretrainResult pretrain(const DenoiserConfig& config, std::span<const PreparedEntry> train,
                        std::span<const PreparedEntry> val,
                        const std::function<void(const PretrainProgress&)>& progress = {});

// Mean hybrid loss over a batch of (structure, S_0, S_t, t); the tape holds the graph.
ad::Var batch_hybrid_loss(ad::Tape& tape, const ad::BoundParams& params, const DenoiserConfig& config,
                          std::span<const PreparedEntry* const> items, std::span<const d3pm::NoisySample> noisy,
                          const d3pm::TransitionSchedule& schedule);

// Reverse-process rollout states S_T .. S_0 with the log-probability of each
// chosen token: logp[k][i] = log p(S_{t-1}[i] | S_t) for t = T - k.
struct ReverseTrace {
  std::vector<Sequence> states;
  std::vector<std::vector<double>> logp;
};

std::vector<Sequence> sample_sequences(const ad::ParamSet& params, const DenoiserConfig& config,
                                       const ResidueGraph& graph, int count,
                                       const d3pm::TransitionSchedule& schedule, Rng& rng,
                                       std::vector<ReverseTrace>* traces = nullptr);

void save_denoiser(const std::filesystem::path& path, const ad::ParamSet& params, const DenoiserConfig& config);
std::pair<ad::ParamSet, DenoiserConfig> load_denoiser(const std::filesystem::path& path);

}  // namespace rldif

#endif  // RLDIF_DENOISER_HPP_
