#include "rldif/ddpo.hpp"

#include <cmath>
#include <numeric>
#include <ostream>

#include "rldif/metrics.hpp"

namespace rldif::ddpo {

using ad::Tensor;
using ad::Var;

void DDPOConfig::validate() const {
  if (structures_per_step < 1 || samples_per_structure < 1 || steps < 0 || inner_epochs < 1 || minibatch < 1 ||
      timestep_subsample < 0 || fold_parallelism < 1)
    throw InvalidArgument("DDPO counts must be positive");
  if (!(clip > 0 && clip < 1)) throw InvalidArgument("clip epsilon must lie in (0, 1)");
  if (!(lr > 0)) throw InvalidArgument("learning rate must be positive");
  if (!(max_fold_failure >= 0 && max_fold_failure <= 1)) throw InvalidArgument("fold failure budget must lie in [0, 1]");
}

nlohmann::json DDPOConfig::to_json() const {
  return {{"structures_per_step", structures_per_step},
          {"samples_per_structure", samples_per_structure},
          {"clip", clip},
          {"lr", lr},
          {"steps", steps},
          {"inner_epochs", inner_epochs},
          {"timestep_subsample", timestep_subsample},
          {"minibatch", minibatch},
          {"seed", seed},
          {"fold_parallelism", fold_parallelism},
          {"max_fold_failure", max_fold_failure},
          {"checkpoint_every", checkpoint_every},
          {"checkpoint_dir", checkpoint_dir.string()}};
}

DDPOConfig DDPOConfig::from_json(const nlohmann::json& j) {
  DDPOConfig c;
  c.structures_per_step = j.value("structures_per_step", c.structures_per_step);
  c.samples_per_structure = j.value("samples_per_structure", c.samples_per_structure);
  c.clip = j.value("clip", c.clip);
  c.lr = j.value("lr", c.lr);
  c.steps = j.value("steps", c.steps);
  c.inner_epochs = j.value("inner_epochs", c.inner_epochs);
  c.timestep_subsample = j.value("timestep_subsample", c.timestep_subsample);
  c.minibatch = j.value("minibatch", c.minibatch);
  c.seed = j.value("seed", c.seed);
  c.fold_parallelism = j.value("fold_parallelism", c.fold_parallelism);
  c.max_fold_failure = j.value("max_fold_failure", c.max_fold_failure);
  c.checkpoint_every = j.value("checkpoint_every", c.checkpoint_every);
  c.checkpoint_dir = j.value("checkpoint_dir", std::string());
  c.validate();
  return c;
}

std::vector<Trajectory> rollout(const ad::ParamSet& params, const DenoiserConfig& config,
                                std::span<const PreparedEntry* const> structures, int samples,
                                const d3pm::TransitionSchedule& schedule, Rng& rng) {
  std::vector<Trajectory> out;
  for (size_t s = 0; s < structures.size(); ++s) {
    std::vector<ReverseTrace> traces;
    sample_sequences(params, config, structures[s]->graph, samples, schedule, rng, &traces);
    for (auto& tr : traces) {
      Trajectory t;
      t.structure_id = structures[s]->entry->id;
      t.structure_index = s;
      t.states = std::move(tr.states);
      t.logp = std::move(tr.logp);
      for (int step = schedule.steps(); step >= 1; --step) t.timesteps.push_back(step);
      out.push_back(std::move(t));
    }
  }
  return out;
}

namespace {

constexpr size_t kReplicasPerChunk = 16;

std::vector<int> resolve_subset(std::span<const int> subset, int steps) {
  std::vector<int> out;
  if (subset.empty()) {
    for (int t = steps; t >= 1; --t) out.push_back(t);
    return out;
  }
  for (int t : subset) {
    if (t < 1 || t > steps) throw d3pm::StepOutOfRange("timestep " + std::to_string(t) + " outside [1, T]");
    out.push_back(t);
  }
  return out;
}

struct TokenLogp {
  Var logp;                   // rows: tokens of all items, item-major then step-major
  std::vector<double> old;    // matching stored log-probs
  std::vector<size_t> begin;  // first row of each item
};

TokenLogp chosen_token_logp(ad::Tape& tape, const ad::BoundParams& params, const DenoiserConfig& config,
                            std::span<const PgItem> items, const std::vector<int>& steps,
                            const d3pm::TransitionSchedule& schedule) {
  const int big_t = schedule.steps();
  std::vector<Replica> replicas;
  std::vector<int> chosen;
  TokenLogp out;
  for (const PgItem& item : items) {
    const Trajectory& tr = *item.trajectory;
    if (tr.states.size() != static_cast<size_t>(big_t) + 1 || tr.logp.size() != static_cast<size_t>(big_t))
      throw InvalidArgument("trajectory length does not match the schedule");
    out.begin.push_back(chosen.size());
    for (int t : steps) {
      const auto k = static_cast<size_t>(big_t - t);
      replicas.push_back({item.graph, &tr.states[k], t});
      const auto& next = tr.states[k + 1].residues();
      chosen.insert(chosen.end(), next.begin(), next.end());
      out.old.insert(out.old.end(), tr.logp[k].begin(), tr.logp[k].end());
    }
  }
  out.begin.push_back(chosen.size());
  Var rev = replica_reverse_probs(denoise_logits(tape, params, config, replicas), replicas, schedule);
  out.logp = ad::log(ad::pick(rev, chosen));
  return out;
}

}  // namespace

std::vector<std::vector<double>> replay_logp(const ad::ParamSet& params, const DenoiserConfig& config,
                                             const ResidueGraph& graph, const Trajectory& trajectory,
                                             const d3pm::TransitionSchedule& schedule) {
  ad::Tape tape;
  ad::BoundParams p(tape, params, false);
  const PgItem item{&graph, &trajectory, 0.0};
  const auto steps = resolve_subset({}, schedule.steps());
  const TokenLogp tl = chosen_token_logp(tape, p, config, std::span<const PgItem>(&item, 1), steps, schedule);
  const size_t n = trajectory.states.front().size();
  std::vector<std::vector<double>> out(steps.size(), std::vector<double>(n));
  const Tensor& v = tl.logp.value();
  for (size_t k = 0; k < steps.size(); ++k)
    for (size_t i = 0; i < n; ++i) out[k][i] = v[k * n + i];
  return out;
}

std::vector<double> standardize_rewards(std::span<const double> raw, double eps) {
  if (raw.size() < 2) throw GroupTooSmall("reward standardization needs at least 2 samples");
  const double n = static_cast<double>(raw.size());
  const double mean = std::accumulate(raw.begin(), raw.end(), 0.0) / n;
  double var = 0;
  for (double r : raw) var += (r - mean) * (r - mean);
  const double sd = std::sqrt(var / n);
  std::vector<double> out(raw.size(), 0.0);
  if (std::all_of(raw.begin(), raw.end(), [&](double r) { return r == raw.front(); })) return out;
  for (size_t i = 0; i < raw.size(); ++i) out[i] = (raw[i] - mean) / (sd + eps);
  return out;
}

RewardBatch standardize_groups(const std::vector<std::vector<double>>& raw, double eps) {
  RewardBatch b;
  b.raw = raw;
  for (const auto& g : raw) b.advantages.push_back(standardize_rewards(g, eps));
  return b;
}

PgLoss clipped_pg_loss(ad::Tape& tape, const ad::BoundParams& params, const DenoiserConfig& config,
                       std::span<const PgItem> items, double eps, std::span<const int> subset,
                       const d3pm::TransitionSchedule& schedule) {
  if (items.empty()) throw InvalidArgument("policy-gradient loss needs at least one trajectory");
  if (!(eps > 0 && eps < 1)) throw InvalidArgument("clip epsilon must lie in (0, 1)");
  const auto steps = resolve_subset(subset, schedule.steps());
  const TokenLogp tl = chosen_token_logp(tape, params, config, items, steps, schedule);
  const Tensor& now = tl.logp.value();
  const size_t total = tl.old.size();
  Var ratio = ad::exp(ad::sub(tl.logp, tape.constant(Tensor(total, 1, tl.old))));
  const Tensor& r = ratio.value();

  PgLoss out;
  std::vector<Var> parts;
  for (size_t b = 0; b < items.size(); ++b) {
    const size_t lo = tl.begin[b], hi = tl.begin[b + 1];
    double gap = 0;
    for (size_t i = lo; i < hi; ++i) {
      const double d = std::abs(now[i] - tl.old[i]);
      gap = std::isfinite(d) ? std::max(gap, d) : INFINITY;
    }
    out.max_abs_log_ratio = std::max(out.max_abs_log_ratio, gap);
    if (!(gap <= kMaxLogRatio)) {
      ++out.skipped;
      continue;
    }
    for (size_t i = lo; i < hi; ++i) out.clipped += std::abs(r[i] - 1.0) > eps;
    out.tokens += static_cast<long>(hi - lo);
    Var rb = items.size() == 1 ? ratio : ad::slice_rows(ratio, lo, hi);
    const double a = items[b].advantage;
    parts.push_back(ad::sum(ad::minimum(ad::scale(rb, a), ad::scale(ad::clamp(rb, 1 - eps, 1 + eps), a))));
  }
  if (parts.empty()) {
    out.loss = tape.constant(Tensor::scalar(0.0));
    return out;
  }
  const double weight = static_cast<double>(schedule.steps()) / static_cast<double>(steps.size()) /
                        static_cast<double>(parts.size());
  Var s = parts.size() == 1 ? parts[0] : ad::sum(ad::concat_rows(parts));
  out.loss = ad::scale(s, -weight);
  return out;
}

Var clipped_pg_loss(ad::Tape& tape, const ad::BoundParams& params, const DenoiserConfig& config,
                    const ResidueGraph& graph, const Trajectory& trajectory, double advantage, double eps,
                    std::span<const int> subset, const d3pm::TransitionSchedule& schedule) {
  const PgItem item{&graph, &trajectory, advantage};
  PgLoss l = clipped_pg_loss(tape, params, config, std::span<const PgItem>(&item, 1), eps, subset, schedule);
  if (l.skipped > 0)
    throw NonFiniteRatio("log-probability gap of " + std::to_string(l.max_abs_log_ratio) + " nats exceeds " +
                         std::to_string(kMaxLogRatio));
  return l.loss;
}

std::vector<double> score_designs(fold::FoldCache& cache, const Sequence& reference, std::span<const Sequence> designs,
                                  int parallelism, long* failures) {
  std::vector<Sequence> all(designs.begin(), designs.end());
  all.push_back(reference);
  const auto folded = cache.fold_many(all, parallelism);
  std::vector<double> out(designs.size(), std::numeric_limits<double>::quiet_NaN());
  long failed = 0;
  for (const auto& f : folded) failed += !f.result.has_value();
  if (folded.back().result) {
    for (size_t i = 0; i < designs.size(); ++i)
      if (folded[i].result) out[i] = metrics::tm_score(folded[i].result->ca_coords, folded.back().result->ca_coords);
  }
  if (failures) *failures += failed;
  return out;
}

RlResult rl_train(const ad::ParamSet& pretrained, const DenoiserConfig& model, std::span<const PreparedEntry> dataset,
                  const DDPOConfig& config, fold::FoldCache& cache,
                  const std::function<void(const StepStats&)>& progress) {
  config.validate();
  if (dataset.empty()) throw EmptyDataset("RL dataset is empty");
  const auto schedule = d3pm::make_uniform_schedule(model.steps, model.schedule);
  RlResult result{pretrained, {}};
  ad::AdamState adam;
  const ad::AdamConfig adam_config{.lr = config.lr};
  const size_t per_step = std::min(dataset.size(), static_cast<size_t>(config.structures_per_step));
  std::vector<size_t> order(dataset.size());

  for (int step = 0; step < config.steps; ++step) {
    Rng rng(derive_seed(config.seed, 0xdd90, static_cast<uint64_t>(step)));
    std::iota(order.begin(), order.end(), size_t{0});
    rng.shuffle(order.begin(), order.end());
    std::vector<const PreparedEntry*> chosen;
    for (size_t i = 0; i < per_step; ++i) chosen.push_back(&dataset[order[i]]);

    const auto trajectories = rollout(result.params, model, chosen, config.samples_per_structure, schedule, rng);

    StepStats stats;
    stats.step = step;
    std::vector<std::vector<double>> rewards(chosen.size());
    std::vector<std::vector<size_t>> members(chosen.size());
    std::vector<double> flat;
    long fold_attempts = 0;
    for (size_t s = 0; s < chosen.size(); ++s) {
      std::vector<Sequence> designs;
      for (size_t j = 0; j < trajectories.size(); ++j)
        if (trajectories[j].structure_index == s) {
          designs.push_back(trajectories[j].final_sequence());
          members[s].push_back(j);
        }
      rewards[s] = score_designs(cache, chosen[s]->entry->sequence, designs, config.fold_parallelism,
                                 &stats.failed_folds);
      fold_attempts += static_cast<long>(designs.size()) + 1;
      for (double r : rewards[s])
        if (std::isfinite(r)) flat.push_back(r);
    }
    if (!flat.empty()) {
      stats.mean_reward = std::accumulate(flat.begin(), flat.end(), 0.0) / static_cast<double>(flat.size());
      double var = 0;
      for (double r : flat) var += (r - stats.mean_reward) * (r - stats.mean_reward);
      stats.std_reward = std::sqrt(var / static_cast<double>(flat.size()));
    } else {
      stats.mean_reward = stats.std_reward = std::numeric_limits<double>::quiet_NaN();
    }
    stats.aborted =
        static_cast<double>(stats.failed_folds) > config.max_fold_failure * static_cast<double>(fold_attempts);

    if (!stats.aborted) {
      // Standardize once per rollout over the samples that were scored.
      std::vector<PgItem> items;
      for (size_t s = 0; s < chosen.size(); ++s) {
        std::vector<double> ok;
        std::vector<size_t> idx;
        for (size_t j = 0; j < rewards[s].size(); ++j)
          if (std::isfinite(rewards[s][j])) {
            ok.push_back(rewards[s][j]);
            idx.push_back(members[s][j]);
          }
        if (ok.size() < 2) continue;
        const auto adv = standardize_rewards(ok);
        for (size_t j = 0; j < idx.size(); ++j) items.push_back({&chosen[s]->graph, &trajectories[idx[j]], adv[j]});
      }
      long tokens = 0, clipped = 0;
      for (int epoch = 0; epoch < config.inner_epochs; ++epoch) {
        rng.shuffle(items.begin(), items.end());
        for (size_t start = 0; start < items.size(); start += static_cast<size_t>(config.minibatch)) {
          const size_t end = std::min(items.size(), start + static_cast<size_t>(config.minibatch));
          std::vector<int> subset;
          if (config.timestep_subsample > 0 && config.timestep_subsample < schedule.steps()) {
            std::vector<int> all(static_cast<size_t>(schedule.steps()));
            std::iota(all.begin(), all.end(), 1);
            rng.shuffle(all.begin(), all.end());
            subset.assign(all.begin(), all.begin() + config.timestep_subsample);
          }
          // Small tapes stay cache resident; chunk gradients are reweighted so
          // the sum equals the gradient of the whole-minibatch loss.
          const size_t per_chunk =
              std::max<size_t>(1, kReplicasPerChunk / static_cast<size_t>(subset.empty() ? schedule.steps()
                                                                                         : subset.size()));
          std::vector<Tensor> grads;
          long kept = 0;
          for (size_t lo = start; lo < end; lo += per_chunk) {
            const size_t hi = std::min(end, lo + per_chunk);
            ad::Tape tape;
            ad::BoundParams p(tape, result.params);
            PgLoss loss = clipped_pg_loss(tape, p, model, std::span<const PgItem>(items.data() + lo, hi - lo),
                                          config.clip, subset, schedule);
            tokens += loss.tokens;
            clipped += loss.clipped;
            stats.skipped_trajectories += loss.skipped;
            const long parts = static_cast<long>(hi - lo) - loss.skipped;
            if (parts == 0) continue;
            tape.backward(loss.loss);
            auto g = p.gradients();
            if (grads.empty()) {
              grads = std::move(g);
              for (auto& t : grads)
                for (size_t i = 0; i < t.size(); ++i) t[i] *= static_cast<double>(parts);
            } else {
              for (size_t k = 0; k < grads.size(); ++k)
                for (size_t i = 0; i < grads[k].size(); ++i) grads[k][i] += static_cast<double>(parts) * g[k][i];
            }
            kept += parts;
          }
          if (kept == 0) continue;
          for (auto& t : grads)
            for (size_t i = 0; i < t.size(); ++i) t[i] /= static_cast<double>(kept);
          ad::adam_step(result.params, grads, adam, adam_config);
        }
      }
      stats.clip_fraction = tokens > 0 ? static_cast<double>(clipped) / static_cast<double>(tokens) : 0.0;
    }
    if (config.checkpoint_every > 0 && (step + 1) % config.checkpoint_every == 0 && !config.checkpoint_dir.empty()) {
      std::filesystem::create_directories(config.checkpoint_dir);
      save_denoiser(config.checkpoint_dir / ("rl_step" + std::to_string(step + 1) + ".ckpt"), result.params, model);
    }
    result.history.push_back(stats);
    if (progress) progress(stats);
  }
  return result;
}

double mean_reward(const ad::ParamSet& params, const DenoiserConfig& model, std::span<const PreparedEntry> panel,
                   int samples, uint64_t seed, fold::FoldCache& cache) {
  if (panel.empty()) throw EmptyDataset("reward panel is empty");
  const auto schedule = d3pm::make_uniform_schedule(model.steps, model.schedule);
  Rng rng(seed);
  double total = 0;
  long count = 0;
  for (const auto& entry : panel) {
    const auto designs = sample_sequences(params, model, entry.graph, samples, schedule, rng);
    for (double r : score_designs(cache, entry.entry->sequence, designs, 1)) {
      if (!std::isfinite(r)) throw Error("fold failed while scoring the reward panel");
      total += r;
      ++count;
    }
  }
  return total / static_cast<double>(count);
}

void write_history_csv(std::ostream& out, std::span<const StepStats> history) {
  out << "step,mean_reward,std_reward,clip_fraction,skipped_trajectories\n";
  out.precision(17);
  for (const auto& s : history)
    out << s.step << ',' << s.mean_reward << ',' << s.std_reward << ',' << s.clip_fraction << ','
        << s.skipped_trajectories << '\n';
}

}  // namespace rldif::ddpo
