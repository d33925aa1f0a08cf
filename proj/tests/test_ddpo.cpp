#include <cmath>
#include <sstream>

#include "doctest.h"
#include "rldif/ddpo.hpp"
#include "test_util.hpp"

using namespace rldif;
using namespace rldif::ddpo;
using rldif::testing::random_sequence;
using rldif::testing::TempDir;
using rldif::testing::toy_backbone;

namespace {

DenoiserConfig tiny_config() {
  DenoiserConfig c;
  c.layers = 2;
  c.hidden = 8;
  c.k = 4;
  c.steps = 6;
  c.seed = 5;
  return c;
}

ad::ParamSet randomized(const DenoiserConfig& c, uint64_t seed, double scale = 0.3) {
  ad::ParamSet p = init_denoiser_params(c, seed);
  Rng rng(seed + 1);
  for (auto& t : p.values())
    for (size_t i = 0; i < t.size(); ++i) t[i] += scale * (2 * rng.uniform() - 1);
  return p;
}

struct Fixture {
  DenoiserConfig config = tiny_config();
  d3pm::TransitionSchedule schedule = d3pm::make_uniform_schedule(config.steps, config.schedule);
  std::vector<DatasetEntry> entries;
  std::vector<PreparedEntry> prepared;
  ad::ParamSet params;

  explicit Fixture(size_t structures = 2, size_t length = 8) {
    Rng rng(17);
    for (size_t i = 0; i < structures; ++i) {
      DatasetEntry e;
      e.id = "s" + std::to_string(i);
      e.sequence = random_sequence(length + i, rng);
      e.backbone = toy_backbone(e.sequence);
      entries.push_back(std::move(e));
    }
    std::vector<const DatasetEntry*> ptr;
    for (const auto& e : entries) ptr.push_back(&e);
    prepared = prepare_entries(ptr, config.features());
    params = randomized(config, 2);
  }

  std::vector<Trajectory> roll(int samples, uint64_t seed) const {
    std::vector<const PreparedEntry*> ptr;
    for (const auto& p : prepared) ptr.push_back(&p);
    Rng rng(seed);
    return rollout(params, config, ptr, samples, schedule, rng);
  }
};

// Plain REINFORCE surrogate: -(1 / n) sum_b A_b sum_t sum_i log p(chosen).
ad::Var reinforce_loss(ad::Tape& tape, const ad::BoundParams& p, const Fixture& f, std::span<const PgItem> items) {
  std::vector<ad::Var> parts;
  for (const PgItem& item : items) {
    std::vector<Replica> reps;
    std::vector<int> chosen;
    const Trajectory& tr = *item.trajectory;
    for (size_t k = 0; k < tr.logp.size(); ++k) {
      reps.push_back({item.graph, &tr.states[k], tr.timesteps[k]});
      chosen.insert(chosen.end(), tr.states[k + 1].residues().begin(), tr.states[k + 1].residues().end());
    }
    ad::Var rev = replica_reverse_probs(denoise_logits(tape, p, f.config, reps), reps, f.schedule);
    parts.push_back(ad::scale(ad::sum(ad::log(ad::pick(rev, chosen))), item.advantage));
  }
  return ad::scale(ad::sum(ad::concat_rows(parts)), -1.0 / static_cast<double>(items.size()));
}

std::vector<ad::Tensor> gradients_of(const Fixture& f, const std::function<ad::Var(ad::Tape&, const ad::BoundParams&)>& fn) {
  ad::Tape tape;
  ad::BoundParams p(tape, f.params);
  tape.backward(fn(tape, p));
  return p.gradients();
}

double max_abs_diff(const std::vector<ad::Tensor>& a, const std::vector<ad::Tensor>& b) {
  double worst = 0;
  for (size_t k = 0; k < a.size(); ++k)
    for (size_t i = 0; i < a[k].size(); ++i) worst = std::max(worst, std::abs(a[k][i] - b[k][i]));
  return worst;
}

double max_abs(const std::vector<ad::Tensor>& a) {
  double worst = 0;
  for (const auto& t : a)
    for (size_t i = 0; i < t.size(); ++i) worst = std::max(worst, std::abs(t[i]));
  return worst;
}

}  // namespace

TEST_CASE("reward standardization") {
  const auto adv = standardize_rewards(std::vector{0.5, 0.7, 0.9, 0.7});
  CHECK(adv[0] == doctest::Approx(-std::sqrt(2.0)).epsilon(1e-7));
  CHECK(std::abs(adv[1]) < 1e-12);
  CHECK(adv[2] == doctest::Approx(std::sqrt(2.0)).epsilon(1e-7));
  CHECK(std::abs(adv[3]) < 1e-12);
  CHECK(standardize_rewards(std::vector{0.4, 0.4, 0.4, 0.4}) == std::vector<double>(4, 0.0));
  CHECK_THROWS_AS(standardize_rewards(std::vector{0.4}), GroupTooSmall);
  Rng rng(1);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<double> r(4);
    for (auto& x : r) x = rng.uniform();
    const auto a = standardize_rewards(r);
    double mean = 0, var = 0;
    for (double x : a) mean += x / 4;
    for (double x : a) var += (x - mean) * (x - mean) / 4;
    CHECK(std::abs(mean) < 1e-12);
    CHECK(std::abs(std::sqrt(var) - 1) < 1e-6);
  }
  const RewardBatch b = standardize_groups({{0.1, 0.2}, {0.3, 0.3, 0.6}});
  CHECK(b.advantages.size() == 2);
  CHECK(b.advantages[1].size() == 3);
}

TEST_CASE("rollout contracts") {
  const Fixture f;
  const auto a = f.roll(3, 9), b = f.roll(3, 9);
  REQUIRE(a.size() == 6);
  for (size_t j = 0; j < a.size(); ++j) {
    CHECK(a[j].states == b[j].states);
    CHECK(a[j].logp == b[j].logp);
    CHECK(a[j].states.size() == static_cast<size_t>(f.config.steps) + 1);
    CHECK(a[j].logp.size() == static_cast<size_t>(f.config.steps));
    CHECK(a[j].timesteps.front() == f.config.steps);
    CHECK(a[j].timesteps.back() == 1);
    CHECK(a[j].structure_id == f.entries[a[j].structure_index].id);
    CHECK(a[j].final_sequence().size() == f.entries[a[j].structure_index].sequence.size());
    const auto replay = replay_logp(f.params, f.config, f.prepared[a[j].structure_index].graph, a[j], f.schedule);
    for (size_t k = 0; k < replay.size(); ++k)
      for (size_t i = 0; i < replay[k].size(); ++i) CHECK(std::abs(replay[k][i] - a[j].logp[k][i]) <= 1e-12);
  }
}

TEST_CASE("clipped policy-gradient loss") {
  const Fixture f;
  auto trajs = f.roll(2, 3);
  const ResidueGraph& g0 = f.prepared[0].graph;
  const ResidueGraph& g1 = f.prepared[1].graph;
  const std::vector<PgItem> items{{&g0, &trajs[0], 0.8}, {&g0, &trajs[1], -0.8}, {&g1, &trajs[2], 1.3},
                                  {&g1, &trajs[3], -1.3}};
  const double big_t = f.config.steps;

  SUBCASE("ratios are one before any update") {
    ad::Tape tape;
    ad::BoundParams p(tape, f.params);
    const PgLoss l = clipped_pg_loss(tape, p, f.config, items, 0.2, {}, f.schedule);
    CHECK(l.max_abs_log_ratio <= 1e-12);
    CHECK(l.clipped == 0);
    double expected = 0;
    for (const auto& it : items) expected += it.advantage * big_t * static_cast<double>(it.trajectory->states[0].size());
    CHECK(std::abs(l.loss.value().item() + expected / 4) < 1e-10);
  }
  SUBCASE("at the sampling policy the gradient is REINFORCE") {
    const auto pg = gradients_of(f, [&](ad::Tape& t, const ad::BoundParams& p) {
      return clipped_pg_loss(t, p, f.config, items, 0.2, {}, f.schedule).loss;
    });
    const auto re = gradients_of(f, [&](ad::Tape& t, const ad::BoundParams& p) { return reinforce_loss(t, p, f, items); });
    CHECK(max_abs(re) > 1e-3);
    CHECK(max_abs_diff(pg, re) < 1e-10 * std::max(1.0, max_abs(re)));
    const auto tiny = gradients_of(f, [&](ad::Tape& t, const ad::BoundParams& p) {
      return clipped_pg_loss(t, p, f.config, items, 1e-12, {}, f.schedule).loss;
    });
    CHECK(max_abs_diff(tiny, re) < 1e-8);
  }
  SUBCASE("zero advantage gives zero loss and gradient") {
    std::vector<PgItem> zero = items;
    for (auto& it : zero) it.advantage = 0;
    const auto g = gradients_of(f, [&](ad::Tape& t, const ad::BoundParams& p) {
      ad::Var l = clipped_pg_loss(t, p, f.config, zero, 0.2, {}, f.schedule).loss;
      CHECK(l.value().item() == 0.0);
      return l;
    });
    CHECK(max_abs(g) == 0.0);
  }
  SUBCASE("hand-computed clipping of a shifted ratio") {
    // Shift stored log-probs so every ratio is exactly 1.5 at the current params.
    Trajectory shifted = trajs[0];
    for (auto& row : shifted.logp)
      for (auto& v : row) v -= std::log(1.5);
    const double tokens = big_t * static_cast<double>(shifted.states[0].size());
    const auto scalar_ref = [](double r, double eps, double a) { return std::min(r * a, std::clamp(r, 1 - eps, 1 + eps) * a); };
    CHECK(scalar_ref(1.5, 0.2, 1.0) == doctest::Approx(1.2));
    for (double a : {1.0, -1.0}) {
      const PgItem it{&g0, &shifted, a};
      ad::Tape tape;
      ad::BoundParams p(tape, f.params);
      const PgLoss l = clipped_pg_loss(tape, p, f.config, std::span(&it, 1), 0.2, {}, f.schedule);
      CHECK(l.loss.value().item() == doctest::Approx(-tokens * scalar_ref(1.5, 0.2, a)).epsilon(1e-10));
      CHECK(l.clipped == static_cast<long>(tokens));
      tape.backward(l.loss);
      if (a > 0)
        CHECK(max_abs(p.gradients()) == 0.0);
      else
        CHECK(max_abs(p.gradients()) > 0.0);
    }
  }
  SUBCASE("contributions are bounded by |A|(1 + eps)") {
    Rng rng(4);
    Trajectory noisy = trajs[1];
    for (auto& row : noisy.logp)
      for (auto& v : row) v += 3 * (2 * rng.uniform() - 1);
    for (double a : {2.0, -0.5}) {
      const PgItem it{&g0, &noisy, a};
      ad::Tape tape;
      ad::BoundParams p(tape, f.params, false);
      const PgLoss l = clipped_pg_loss(tape, p, f.config, std::span(&it, 1), 0.2, {}, f.schedule);
      const double tokens = big_t * static_cast<double>(noisy.states[0].size());
      if (a > 0) CHECK(std::abs(l.loss.value().item()) <= std::abs(a) * 1.2 * tokens + 1e-9);
      CHECK(l.clipped > 0);
    }
  }
  SUBCASE("timestep subsets are rescaled") {
    const std::vector<int> subset{2, 5};
    ad::Tape tape;
    ad::BoundParams p(tape, f.params, false);
    const PgLoss l = clipped_pg_loss(tape, p, f.config, std::span(items).first(1), 0.2, subset, f.schedule);
    CHECK(l.tokens == static_cast<long>(2 * trajs[0].states[0].size()));
    CHECK(std::abs(l.loss.value().item() + 0.8 * big_t * static_cast<double>(trajs[0].states[0].size())) < 1e-10);
    CHECK_THROWS_AS(clipped_pg_loss(tape, p, f.config, items, 0.2, std::vector<int>{0}, f.schedule),
                    d3pm::StepOutOfRange);
    CHECK_THROWS_AS(clipped_pg_loss(tape, p, f.config, items, 1.5, {}, f.schedule), InvalidArgument);
  }
  SUBCASE("runaway log-ratios are skipped") {
    Trajectory far = trajs[2];
    far.logp[1][0] -= 60;
    const std::vector<PgItem> mixed{{&g1, &far, 1.0}, {&g1, &trajs[3], 0.5}};
    ad::Tape tape;
    ad::BoundParams p(tape, f.params, false);
    const PgLoss l = clipped_pg_loss(tape, p, f.config, mixed, 0.2, {}, f.schedule);
    CHECK(l.skipped == 1);
    CHECK(l.max_abs_log_ratio > 50);
    CHECK(std::abs(l.loss.value().item() + 0.5 * big_t * static_cast<double>(far.states[0].size())) < 1e-10);
    CHECK_THROWS_AS(clipped_pg_loss(tape, p, f.config, g1, far, 1.0, 0.2, {}, f.schedule), NonFiniteRatio);
  }
  SUBCASE("degenerate groups contribute nothing") {
    const auto adv = standardize_rewards(std::vector{0.6, 0.6});
    const std::vector<PgItem> flat{{&g0, &trajs[0], adv[0]}, {&g0, &trajs[1], adv[1]}};
    ad::Tape tape;
    ad::BoundParams p(tape, f.params, false);
    CHECK(clipped_pg_loss(tape, p, f.config, flat, 0.2, {}, f.schedule).loss.value().item() == 0.0);
  }
}

TEST_CASE("clipped loss gradient passes a central-difference check") {
  Fixture f(1, 5);
  f.config.hidden = 4;
  f.config.k = 3;
  f.params = randomized(f.config, 3, 0.5);
  auto trajs = f.roll(2, 6);
  Rng rng(8);
  for (auto& tr : trajs)
    for (auto& row : tr.logp)
      for (auto& v : row) v += 0.05 * (2 * rng.uniform() - 1);
  const std::vector<PgItem> items{{&f.prepared[0].graph, &trajs[0], 0.7}, {&f.prepared[0].graph, &trajs[1], -1.1}};
  ad::ParamSet params = f.params;
  const auto loss = [&](const ad::ParamSet& ps) {
    ad::Tape tape;
    ad::BoundParams bp(tape, ps, false);
    return clipped_pg_loss(tape, bp, f.config, items, 0.2, std::vector<int>{1, 3, 6}, f.schedule).loss.value().item();
  };
  ad::Tape tape;
  ad::BoundParams bp(tape, params);
  tape.backward(clipped_pg_loss(tape, bp, f.config, items, 0.2, std::vector<int>{1, 3, 6}, f.schedule).loss);
  const auto grads = bp.gradients();
  const double h = 1e-5;
  double worst = 0;
  for (size_t k = 0; k < params.size(); ++k)
    for (size_t i = 0; i < params.values()[k].size(); ++i) {
      double& x = params.values()[k][i];
      const double saved = x;
      x = saved + h;
      const double up = loss(params);
      x = saved - h;
      const double down = loss(params);
      x = saved;
      const double numeric = (up - down) / (2 * h);
      worst = std::max(worst, std::abs(numeric - grads[k][i]) /
                                  std::max({std::abs(numeric), std::abs(grads[k][i]), 1e-3}));
    }
  CHECK(worst < 1e-4);
}

TEST_CASE("rl_train bookkeeping") {
  Fixture f(3, 8);
  TempDir dir;
  fold::ToyFolder toy;
  fold::FoldCache cache(dir.path(), toy);
  DDPOConfig cfg;
  cfg.steps = 3;
  cfg.structures_per_step = 2;
  cfg.samples_per_structure = 3;
  cfg.minibatch = 4;
  cfg.inner_epochs = 2;
  cfg.timestep_subsample = 3;
  cfg.lr = 1e-3;
  cfg.seed = 21;
  cfg.fold_parallelism = 2;
  const RlResult a = rl_train(f.params, f.config, f.prepared, cfg, cache);
  const RlResult b = rl_train(f.params, f.config, f.prepared, cfg, cache);
  CHECK(a.history.size() == 3);
  CHECK(a.params == b.params);
  CHECK_FALSE(a.params == f.params);
  for (size_t i = 0; i < 3; ++i) {
    CHECK(a.history[i].step == static_cast<int>(i));
    CHECK(a.history[i].mean_reward == b.history[i].mean_reward);
    CHECK(a.history[i].mean_reward > 0);
    CHECK(a.history[i].mean_reward <= 1);
    CHECK_FALSE(a.history[i].aborted);
  }
  std::ostringstream csv;
  write_history_csv(csv, a.history);
  CHECK(csv.str().rfind("step,mean_reward,std_reward,clip_fraction,skipped_trajectories\n", 0) == 0);

  SUBCASE("steps abort when most folds fail") {
    class Broken : public fold::FoldOracle {
     public:
      std::string id() const override { return "broken"; }
      fold::FoldResult fold(const Sequence&) override { throw Error("offline"); }
    } broken;
    fold::FoldCache bad(dir.path(), broken);
    cfg.steps = 2;
    const RlResult r = rl_train(f.params, f.config, f.prepared, cfg, bad);
    CHECK(r.history.size() == 2);
    for (const auto& s : r.history) CHECK(s.aborted);
    CHECK(r.params == f.params);
  }
  SUBCASE("validation") {
    cfg.clip = 0;
    CHECK_THROWS_AS(rl_train(f.params, f.config, f.prepared, cfg, cache), InvalidArgument);
    cfg.clip = 0.2;
    CHECK_THROWS_AS(rl_train(f.params, f.config, {}, cfg, cache), EmptyDataset);
    CHECK(DDPOConfig::from_json(cfg.to_json()).to_json() == cfg.to_json());
  }
}

TEST_CASE("reward panel") {
  Fixture f(2, 8);
  TempDir dir;
  fold::ToyFolder toy;
  fold::FoldCache cache(dir.path(), toy);
  const double a = mean_reward(f.params, f.config, f.prepared, 3, 5, cache);
  CHECK(a == mean_reward(f.params, f.config, f.prepared, 3, 5, cache));
  CHECK(a > 0);
  CHECK(a <= 1);
  const auto s = score_designs(cache, f.entries[0].sequence, std::vector{f.entries[0].sequence}, 1);
  CHECK(s[0] == 1.0);
}
