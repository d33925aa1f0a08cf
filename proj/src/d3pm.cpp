#include "rldif/d3pm.hpp"

#include <cmath>
#include <numbers>

namespace rldif::d3pm {

namespace {

constexpr int K = kNumAminoAcids;

std::vector<double> matmul_kk(const std::vector<double>& a, const std::vector<double>& b) {
  std::vector<double> c(K * K, 0.0);
  for (int i = 0; i < K; ++i)
    for (int p = 0; p < K; ++p) {
      const double av = a[i * K + p];
      for (int j = 0; j < K; ++j) c[i * K + j] += av * b[p * K + j];
    }
  return c;
}

void check_row_stochastic(const std::vector<double>& m, const char* what, int t) {
  for (int i = 0; i < K; ++i) {
    double s = 0;
    for (int j = 0; j < K; ++j) {
      if (m[i * K + j] < 0) throw InvalidBeta(std::string(what) + " has a negative entry at t=" + std::to_string(t));
      s += m[i * K + j];
    }
    if (std::abs(s - 1.0) > 1e-12)
      throw InvalidBeta(std::string(what) + " row does not sum to 1 at t=" + std::to_string(t));
  }
}

std::vector<double> betas_for(int steps, const ScheduleSpec& spec) {
  std::vector<double> betas(static_cast<size_t>(steps) + 1, 0.0);
  if (spec.name == "cosine") {
    auto f = [&](int t) {
      const double c = std::cos((static_cast<double>(t) / steps + spec.s) / (1.0 + spec.s) * std::numbers::pi / 2);
      return c * c;
    };
    const double f0 = f(0);
    double prev = 1.0;
    for (int t = 1; t <= steps; ++t) {
      const double cur = f(t) / f0;
      betas[t] = std::clamp(1.0 - cur / prev, 0.0, 1.0);
      prev = cur;
    }
  } else if (spec.name == "linear") {
    for (int t = 1; t <= steps; ++t) {
      const double frac = steps == 1 ? 1.0 : static_cast<double>(t - 1) / (steps - 1);
      betas[t] = spec.beta_start + frac * (spec.beta_end - spec.beta_start);
    }
  } else if (spec.name == "custom") {
    if (spec.betas.size() != static_cast<size_t>(steps))
      throw InvalidBeta("custom schedule needs exactly T betas");
    for (int t = 1; t <= steps; ++t) betas[t] = spec.betas[t - 1];
  } else {
    throw InvalidBeta("unknown schedule '" + spec.name + "'");
  }
  for (int t = 1; t <= steps; ++t)
    if (!(betas[t] >= 0.0 && betas[t] <= 1.0))
      throw InvalidBeta("beta_" + std::to_string(t) + " = " + std::to_string(betas[t]) + " outside [0,1]");
  return betas;
}

}  // namespace

nlohmann::json ScheduleSpec::to_json() const {
  nlohmann::json j{{"name", name}};
  if (name == "cosine") j["s"] = s;
  if (name == "linear") {
    j["beta_start"] = beta_start;
    j["beta_end"] = beta_end;
  }
  if (name == "custom") j["betas"] = betas;
  return j;
}

ScheduleSpec ScheduleSpec::from_json(const nlohmann::json& j) {
  ScheduleSpec spec;
  spec.name = j.value("name", spec.name);
  spec.s = j.value("s", spec.s);
  spec.beta_start = j.value("beta_start", spec.beta_start);
  spec.beta_end = j.value("beta_end", spec.beta_end);
  if (j.contains("betas")) spec.betas = j["betas"].get<std::vector<double>>();
  return spec;
}

std::vector<double> uniform_transition(int vocab, double beta) {
  if (!(beta >= 0.0 && beta <= 1.0)) throw InvalidBeta("beta outside [0,1]");
  std::vector<double> q(static_cast<size_t>(vocab * vocab), beta / vocab);
  for (int i = 0; i < vocab; ++i) q[i * vocab + i] += 1.0 - beta;
  return q;
}

TransitionSchedule::TransitionSchedule(int steps, const ScheduleSpec& spec)
    : steps_(steps), spec_(spec) {
  if (steps < 1) throw InvalidArgument("diffusion needs T >= 1");
  betas_ = betas_for(steps, spec);
  q_.resize(static_cast<size_t>(steps) + 1);
  qbar_.resize(static_cast<size_t>(steps) + 1);
  qbar_[0] = uniform_transition(K, 0.0);
  for (int t = 1; t <= steps; ++t) {
    q_[t] = uniform_transition(K, betas_[t]);
    qbar_[t] = matmul_kk(qbar_[t - 1], q_[t]);
    check_row_stochastic(q_[t], "Q", t);
    check_row_stochastic(qbar_[t], "Qbar", t);
  }
}

const std::vector<double>& TransitionSchedule::q(int t) const {
  if (t < 1 || t > steps_) throw StepOutOfRange("Q_t needs t in [1, T], got " + std::to_string(t));
  return q_[t];
}

const std::vector<double>& TransitionSchedule::qbar(int t) const {
  if (t < 0 || t > steps_) throw StepOutOfRange("Qbar_t needs t in [0, T], got " + std::to_string(t));
  return qbar_[t];
}

std::vector<double> TransitionSchedule::stationary() const { return std::vector<double>(K, 1.0 / K); }

nlohmann::json TransitionSchedule::to_json() const { return {{"T", steps_}, {"schedule", spec_.to_json()}}; }

TransitionSchedule TransitionSchedule::from_json(const nlohmann::json& j) {
  return TransitionSchedule(j.at("T").get<int>(), ScheduleSpec::from_json(j.at("schedule")));
}

TransitionSchedule make_uniform_schedule(int steps, const ScheduleSpec& spec) {
  return TransitionSchedule(steps, spec);
}

void check_step(const TransitionSchedule& schedule, int t) {
  if (t < 1 || t > schedule.steps())
    throw StepOutOfRange("step " + std::to_string(t) + " outside [1, " + std::to_string(schedule.steps()) + "]");
}

CategoricalDist forward_marginal(const Sequence& s0, int t, const TransitionSchedule& schedule) {
  check_step(schedule, t);
  const auto& qb = schedule.qbar(t);
  std::vector<double> probs(s0.size() * K);
  for (size_t i = 0; i < s0.size(); ++i)
    std::copy_n(qb.begin() + s0[i] * K, K, probs.begin() + static_cast<std::ptrdiff_t>(i * K));
  return CategoricalDist(s0.size(), std::move(probs));
}

NoisySample forward_sample(const Sequence& s0, int t, const TransitionSchedule& schedule, Rng& rng) {
  check_step(schedule, t);
  const auto& qb = schedule.qbar(t);
  std::vector<int> out(s0.size());
  for (size_t i = 0; i < s0.size(); ++i)
    out[i] = rng.categorical(std::span<const double>(qb.data() + s0[i] * K, K));
  return {Sequence(std::move(out)), t};
}

CategoricalDist posterior(const Sequence& s_t, const Sequence& s0, int t, const TransitionSchedule& schedule) {
  check_step(schedule, t);
  if (s_t.size() != s0.size()) throw LengthMismatch("posterior: S_t and S_0 lengths differ");
  const auto& qt = schedule.q(t);
  const auto& qb_prev = schedule.qbar(t - 1);
  const auto& qb = schedule.qbar(t);
  std::vector<double> probs(s0.size() * K);
  for (size_t i = 0; i < s0.size(); ++i) {
    const int xt = s_t[i], x0 = s0[i];
    const double z = qb[x0 * K + xt];
    if (z < 1e-300)
      throw ZeroSupportPosterior("q(S_t | S_0) vanishes at residue " + std::to_string(i));
    for (int x = 0; x < K; ++x) probs[i * K + x] = qt[x * K + xt] * qb_prev[x0 * K + x] / z;
  }
  return CategoricalDist(s0.size(), std::move(probs));
}

CategoricalDist reverse_step(const CategoricalDist& p0_hat, const Sequence& s_t, int t,
                             const TransitionSchedule& schedule) {
  check_step(schedule, t);
  if (p0_hat.rows() != s_t.size()) throw LengthMismatch("reverse_step: p0_hat and S_t lengths differ");
  const auto& qt = schedule.q(t);
  const auto& qb_prev = schedule.qbar(t - 1);
  std::vector<double> probs(s_t.size() * K);
  for (size_t i = 0; i < s_t.size(); ++i) {
    const auto p0 = p0_hat.row(i);
    double z = 0;
    for (int x = 0; x < K; ++x) {
      double mix = 0;
      for (int v = 0; v < K; ++v) mix += p0[v] * qb_prev[v * K + x];
      probs[i * K + x] = qt[x * K + s_t[i]] * mix;
      z += probs[i * K + x];
    }
    if (z < 1e-300) throw ZeroSupportPosterior("reverse step has no support at residue " + std::to_string(i));
    for (int x = 0; x < K; ++x) probs[i * K + x] /= z;
  }
  return CategoricalDist(s_t.size(), std::move(probs));
}

ad::Var reverse_probs(ad::Var p0_hat, const Sequence& s_t, int t, const TransitionSchedule& schedule) {
  check_step(schedule, t);
  const size_t n = s_t.size();
  if (p0_hat.rows() != n || p0_hat.cols() != static_cast<size_t>(K))
    throw ad::ShapeMismatch("reverse_probs: p0_hat " + p0_hat.value().shape_string() + " for length " +
                            std::to_string(n));
  ad::Tape& tape = *p0_hat.tape;
  ad::Var qb_prev = tape.constant(ad::Tensor(K, K, schedule.qbar(t - 1)));
  const auto& qt = schedule.q(t);
  ad::Tensor likelihood(n, K);
  for (size_t i = 0; i < n; ++i)
    for (int x = 0; x < K; ++x) likelihood(i, x) = qt[x * K + s_t[i]];
  ad::Var mix = ad::matmul(p0_hat, qb_prev);
  return ad::row_normalize(ad::mul(mix, tape.constant(std::move(likelihood))));
}

HybridLossTerms hybrid_loss(ad::Var logits, const Sequence& s0, const Sequence& s_t, int t,
                            const TransitionSchedule& schedule, double lambda) {
  if (lambda < 0) throw InvalidArgument("hybrid loss weight must be nonnegative");
  if (s0.size() != s_t.size()) throw LengthMismatch("hybrid_loss: S_0 and S_t lengths differ");
  ad::Tape& tape = *logits.tape;
  const double n = static_cast<double>(s0.size());
  ad::Var p0 = ad::softmax(logits);
  ad::Var rev = reverse_probs(p0, s_t, t, schedule);

  ad::Var vb;
  if (t == 1) {
    vb = ad::scale(ad::sum(ad::log(ad::pick(rev, s0.residues()))), -1.0 / n);
  } else {
    const CategoricalDist post = posterior(s_t, s0, t, schedule);
    double entropy_term = 0;
    for (double p : post.values())
      if (p > 0) entropy_term += p * std::log(p);
    ad::Var post_c = tape.constant(ad::Tensor(s0.size(), K, post.values()));
    // Floor keeps 0 * log 0 finite where the posterior has no support.
    ad::Var cross = ad::sum(ad::mul(post_c, ad::log(ad::add_scalar(rev, 1e-300))));
    vb = ad::add_scalar(ad::scale(cross, -1.0 / n), entropy_term / n);
  }
  ad::Var ce = ad::cross_entropy(logits, s0.residues());
  return {ad::add(vb, ad::scale(ce, lambda)), vb, ce};
}

HybridLossValue hybrid_loss_value(const CategoricalDist& p0_hat, const Sequence& s0, const Sequence& s_t,
                                  int t, const TransitionSchedule& schedule, double lambda) {
  if (lambda < 0) throw InvalidArgument("hybrid loss weight must be nonnegative");
  const CategoricalDist rev = reverse_step(p0_hat, s_t, t, schedule);
  const double n = static_cast<double>(s0.size());
  HybridLossValue out;
  if (t == 1) {
    for (size_t i = 0; i < s0.size(); ++i) out.vb -= std::log(rev.at(i, s0[i])) / n;
  } else {
    const CategoricalDist post = posterior(s_t, s0, t, schedule);
    for (size_t i = 0; i < s0.size(); ++i)
      for (int x = 0; x < K; ++x) {
        const double p = post.at(i, x);
        if (p > 0) out.vb += p * std::log(p / rev.at(i, x)) / n;
      }
  }
  for (size_t i = 0; i < s0.size(); ++i) {
    const double p = p0_hat.at(i, s0[i]);
    if (p < 1.0) out.ce -= std::log(p) / n;
  }
  out.total = out.vb + lambda * out.ce;
  return out;
}

}  // namespace rldif::d3pm
