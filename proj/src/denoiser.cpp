#include "rldif/denoiser.hpp"

#include <cmath>
#include <fstream>
#include <map>
#include <numbers>

namespace rldif {

using ad::Tensor;
using ad::Var;

DenoiserConfig DenoiserConfig::full_scale() {
  DenoiserConfig c;
  c.layers = 10;
  c.hidden = 128;
  c.k = 30;
  c.steps = 150;
  c.lr = 1e-3;
  c.batch_size = 64;
  c.epochs = 200;
  return c;
}

nlohmann::json DenoiserConfig::to_json() const {
  return {{"layers", layers},         {"hidden", hidden},
          {"k", k},                   {"steps", steps},
          {"schedule", schedule.to_json()},
          {"lambda", lambda},         {"lr", lr},
          {"batch_size", batch_size}, {"epochs", epochs},
          {"seed", seed},             {"checkpoint_every", checkpoint_every},
          {"checkpoint_dir", checkpoint_dir.string()},
          {"val_draws", val_draws},   {"validate_every_epoch", validate_every_epoch},
          {"activation", activation}};
}

DenoiserConfig DenoiserConfig::from_json(const nlohmann::json& j) {
  DenoiserConfig c;
  c.layers = j.value("layers", c.layers);
  c.hidden = j.value("hidden", c.hidden);
  c.k = j.value("k", c.k);
  c.steps = j.value("steps", c.steps);
  if (j.contains("schedule")) c.schedule = d3pm::ScheduleSpec::from_json(j["schedule"]);
  c.lambda = j.value("lambda", c.lambda);
  c.lr = j.value("lr", c.lr);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.epochs = j.value("epochs", c.epochs);
  c.seed = j.value("seed", c.seed);
  c.checkpoint_every = j.value("checkpoint_every", c.checkpoint_every);
  c.checkpoint_dir = j.value("checkpoint_dir", std::string());
  c.val_draws = j.value("val_draws", c.val_draws);
  c.validate_every_epoch = j.value("validate_every_epoch", c.validate_every_epoch);
  c.activation = j.value("activation", c.activation);
  if (c.activation != "relu" && c.activation != "gelu") throw InvalidArgument("unknown activation: " + c.activation);
  if (c.layers < 1 || c.hidden < 1 || c.k < 1 || c.steps < 1 || c.batch_size < 1 || c.epochs < 0)
    throw InvalidArgument("denoiser config extents must be positive");
  return c;
}

namespace {

Tensor truncated_normal(size_t rows, size_t cols, double std, Rng& rng) {
  Tensor t(rows, cols);
  for (size_t i = 0; i < t.size(); ++i) {
    double z = rng.normal();
    while (std::abs(z) > 2.0) z = rng.normal();
    t[i] = z * std;
  }
  return t;
}

struct ParamBuilder {
  ad::ParamSet& params;
  Rng& rng;

  void linear(const std::string& name, size_t in, size_t out, bool zero = false) {
    params.add(name + ".w", zero ? Tensor(in, out, 0.0) : truncated_normal(in, out, 0.02, rng));
    params.add(name + ".b", Tensor(1, out, 0.0));
  }
  void weight(const std::string& name, size_t in, size_t out) {
    params.add(name, truncated_normal(in, out, 0.02, rng));
  }
  void norm(const std::string& name, size_t width) {
    params.add(name + ".g", Tensor(1, width, 1.0));
    params.add(name + ".b", Tensor(1, width, 0.0));
  }
};

std::string layer_name(int l, const char* part) { return "layer" + std::to_string(l) + "." + part; }

Var linear(Var x, const ad::BoundParams& p, const std::string& name) {
  return ad::add_bias(ad::matmul(x, p[name + ".w"]), p[name + ".b"]);
}

Var activate(Var x, const DenoiserConfig& c) { return c.activation == "gelu" ? ad::gelu(x) : ad::relu(x); }

Var mlp(Var x, const ad::BoundParams& p, const std::string& name, const DenoiserConfig& c) {
  return linear(activate(linear(x, p, name + ".0"), c), p, name + ".1");
}

// First layer of an MLP over [h_src, h_dst, e], split by operand so the node
// projections are computed once per node rather than once per edge.
Var edge_input_layer(Var h, Var e, const std::vector<int>& src, const std::vector<int>& dst,
                     const ad::BoundParams& p, const std::string& name) {
  Var from_src = ad::gather_rows(ad::matmul(h, p[name + ".w_src"]), src);
  Var from_dst = ad::gather_rows(ad::matmul(h, p[name + ".w_dst"]), dst);
  Var from_edge = ad::matmul(e, p[name + ".w_edge"]);
  return ad::add_bias(ad::add(ad::add(from_src, from_dst), from_edge), p[name + ".b"]);
}

bool is_identity(const std::vector<int>& index, size_t rows) {
  if (index.size() != rows) return false;
  for (size_t i = 0; i < index.size(); ++i)
    if (index[i] != static_cast<int>(i)) return false;
  return true;
}

Var gather_or_self(Var x, const std::vector<int>& index) {
  return is_identity(index, x.rows()) ? x : ad::gather_rows(x, index);
}

}  // namespace

ad::ParamSet init_denoiser_params(const DenoiserConfig& config, uint64_t seed) {
  const auto h = static_cast<size_t>(config.hidden);
  const size_t d = 2 * h;
  const FeatureConfig f = config.features();
  ad::ParamSet params;
  Rng rng(derive_seed(seed, 0x1417));
  ParamBuilder b{params, rng};

  b.linear("enc_v.0", static_cast<size_t>(f.node_dim()), h);
  b.linear("enc_v.1", h, h);
  b.linear("enc_e.0", static_cast<size_t>(f.edge_dim()), h);
  b.linear("enc_e.1", h, h);
  b.linear("enc_s.0", kNumAminoAcids + kTimeEmbeddingDim, h);
  b.linear("enc_s.1", h, h);
  for (int l = 0; l < config.layers; ++l) {
    b.weight(layer_name(l, "msg.0.w_src"), d, h);
    b.weight(layer_name(l, "msg.0.w_dst"), d, h);
    b.weight(layer_name(l, "msg.0.w_edge"), h, h);
    params.add(layer_name(l, "msg.0.b"), Tensor(1, h, 0.0));
    b.linear(layer_name(l, "msg.1"), h, h);
    b.linear(layer_name(l, "node.0"), h, h);
    b.linear(layer_name(l, "node.1"), h, d);
    b.norm(layer_name(l, "node_norm"), d);
    if (l + 1 < config.layers) {  // the last layer's edge states are never read
      b.weight(layer_name(l, "edge.0.w_src"), d, h);
      b.weight(layer_name(l, "edge.0.w_dst"), d, h);
      b.weight(layer_name(l, "edge.0.w_edge"), h, h);
      params.add(layer_name(l, "edge.0.b"), Tensor(1, h, 0.0));
      b.linear(layer_name(l, "edge.1"), h, h);
      b.norm(layer_name(l, "edge_norm"), h);
    }
  }
  b.linear("head.0", 2 * d, h);
  b.linear("head.1", h, kNumAminoAcids, /*zero=*/true);
  return params;
}

std::vector<double> time_embedding(int t, int steps) {
  const double tau = static_cast<double>(t) / steps;
  std::vector<double> e;
  e.reserve(kTimeEmbeddingDim);
  for (int j = 0; j < 8; ++j) {
    const double w = std::numbers::pi * std::ldexp(1.0, j);
    e.push_back(std::sin(w * tau));
    e.push_back(std::cos(w * tau));
  }
  e.push_back(tau);
  return e;
}

Var denoise_logits(ad::Tape& tape, const ad::BoundParams& p, const DenoiserConfig& config,
                   std::span<const Replica> replicas) {
  if (replicas.empty()) throw InvalidArgument("denoise_logits needs at least one replica");

  // Encode each distinct structure once.
  std::vector<const ResidueGraph*> graphs;
  std::map<const ResidueGraph*, size_t> graph_slot;
  for (const Replica& r : replicas) {
    if (!r.graph || !r.s_t) throw InvalidArgument("replica is missing its graph or sequence");
    if (static_cast<size_t>(r.graph->num_nodes) != r.s_t->size())
      throw ad::ShapeMismatch("graph has " + std::to_string(r.graph->num_nodes) + " nodes but S_t has " +
                              std::to_string(r.s_t->size()) + " residues");
    if (r.t < 1 || r.t > config.steps) throw d3pm::StepOutOfRange("denoiser step out of range");
    if (graph_slot.emplace(r.graph, graphs.size()).second) graphs.push_back(r.graph);
  }
  std::vector<Var> node_enc, edge_enc;
  std::vector<size_t> node_base, edge_base;
  size_t nodes_total = 0, edges_total = 0;
  for (const ResidueGraph* g : graphs) {
    Var hv = tape.constant(Tensor(static_cast<size_t>(g->num_nodes), static_cast<size_t>(g->node_dim), g->node_features));
    Var he = tape.constant(Tensor(g->num_edges(), static_cast<size_t>(g->edge_dim), g->edge_features));
    node_enc.push_back(mlp(hv, p, "enc_v", config));
    edge_enc.push_back(mlp(he, p, "enc_e", config));
    node_base.push_back(nodes_total);
    edge_base.push_back(edges_total);
    nodes_total += static_cast<size_t>(g->num_nodes);
    edges_total += g->num_edges();
  }
  Var all_nodes = node_enc.size() == 1 ? node_enc[0] : ad::concat_rows(node_enc);
  Var all_edges = edge_enc.size() == 1 ? edge_enc[0] : ad::concat_rows(edge_enc);

  std::vector<int> node_index, edge_index, src, dst;
  size_t offset = 0;
  Tensor seq_input(0, 0);
  std::vector<double> seq_data;
  for (const Replica& r : replicas) {
    const size_t slot = graph_slot[r.graph];
    const ResidueGraph& g = *r.graph;
    for (int i = 0; i < g.num_nodes; ++i) node_index.push_back(static_cast<int>(node_base[slot]) + i);
    for (size_t e = 0; e < g.num_edges(); ++e) {
      edge_index.push_back(static_cast<int>(edge_base[slot] + e));
      src.push_back(static_cast<int>(offset) + g.src[e]);
      dst.push_back(static_cast<int>(offset) + g.dst[e]);
    }
    const auto temb = time_embedding(r.t, config.steps);
    for (int i = 0; i < g.num_nodes; ++i) {
      for (int a = 0; a < kNumAminoAcids; ++a) seq_data.push_back((*r.s_t)[static_cast<size_t>(i)] == a ? 1.0 : 0.0);
      seq_data.insert(seq_data.end(), temb.begin(), temb.end());
    }
    offset += static_cast<size_t>(g.num_nodes);
  }
  const size_t n = offset;
  Var h_v = gather_or_self(all_nodes, node_index);
  Var e = gather_or_self(all_edges, edge_index);
  Var h_o = mlp(tape.constant(Tensor(n, kNumAminoAcids + kTimeEmbeddingDim, std::move(seq_data))), p, "enc_s", config);
  Var h_vs = ad::concat_cols({h_v, h_o});

  Var h = h_vs;
  for (int l = 0; l < config.layers; ++l) {
    Var m = activate(edge_input_layer(h, e, src, dst, p, layer_name(l, "msg.0")), config);
    m = linear(m, p, layer_name(l, "msg.1"));
    Var agg = ad::segment_mean(m, src, n);
    Var upd = mlp(agg, p, layer_name(l, "node"), config);
    h = ad::layer_norm(ad::add(h, upd), p[layer_name(l, "node_norm.g")], p[layer_name(l, "node_norm.b")]);
    if (l + 1 < config.layers) {
      Var eu = activate(edge_input_layer(h, e, src, dst, p, layer_name(l, "edge.0")), config);
      eu = linear(eu, p, layer_name(l, "edge.1"));
      e = ad::layer_norm(ad::add(e, eu), p[layer_name(l, "edge_norm.g")], p[layer_name(l, "edge_norm.b")]);
    }
  }
  return mlp(ad::concat_cols({h, h_vs}), p, "head", config);
}

CategoricalDist denoise_forward(const ad::ParamSet& params, const DenoiserConfig& config,
                                const ResidueGraph& graph, const Sequence& s_t, int t) {
  ad::Tape tape;
  ad::BoundParams p(tape, params, false);
  const Replica r{&graph, &s_t, t};
  Var probs = ad::softmax(denoise_logits(tape, p, config, std::span<const Replica>(&r, 1)));
  return CategoricalDist(s_t.size(), probs.value().data());
}

Var replica_reverse_probs(Var logits, std::span<const Replica> replicas, const d3pm::TransitionSchedule& schedule) {
  Var p0 = ad::softmax(logits);
  if (replicas.size() == 1) return d3pm::reverse_probs(p0, *replicas[0].s_t, replicas[0].t, schedule);
  std::vector<Var> parts;
  size_t offset = 0;
  for (const Replica& r : replicas) {
    const size_t len = r.s_t->size();
    parts.push_back(d3pm::reverse_probs(ad::slice_rows(p0, offset, offset + len), *r.s_t, r.t, schedule));
    offset += len;
  }
  return ad::concat_rows(parts);
}

std::vector<PreparedEntry> prepare_entries(std::span<const DatasetEntry* const> entries, const FeatureConfig& features) {
  std::vector<PreparedEntry> out(entries.size());
  const auto count = static_cast<std::ptrdiff_t>(entries.size());
#pragma omp parallel for schedule(dynamic)
  for (std::ptrdiff_t i = 0; i < count; ++i) {
    out[i].entry = entries[i];
    out[i].graph = build_features(entries[i]->backbone, features);
  }
  return out;
}

Var batch_hybrid_loss(ad::Tape& tape, const ad::BoundParams& params, const DenoiserConfig& config,
                      std::span<const PreparedEntry* const> items, std::span<const d3pm::NoisySample> noisy,
                      const d3pm::TransitionSchedule& schedule) {
  if (items.empty() || items.size() != noisy.size()) throw InvalidArgument("batch_hybrid_loss: bad batch");
  std::vector<Replica> replicas;
  for (size_t b = 0; b < items.size(); ++b)
    replicas.push_back({&items[b]->graph, &noisy[b].s_t, noisy[b].t});
  Var logits = denoise_logits(tape, params, config, replicas);
  std::vector<Var> losses;
  size_t offset = 0;
  for (size_t b = 0; b < items.size(); ++b) {
    const size_t len = noisy[b].s_t.size();
    Var slice = items.size() == 1 ? logits : ad::slice_rows(logits, offset, offset + len);
    losses.push_back(d3pm::hybrid_loss(slice, items[b]->entry->sequence, noisy[b].s_t, noisy[b].t, schedule,
                                       config.lambda).total);
    offset += len;
  }
  Var total = losses.size() == 1 ? losses[0] : ad::sum(ad::concat_rows(losses));
  return ad::scale(total, 1.0 / static_cast<double>(losses.size()));
}

double validation_loss(const ad::ParamSet& params, const DenoiserConfig& config, std::span<const PreparedEntry> val,
                       const d3pm::TransitionSchedule& schedule) {
  if (val.empty()) throw EmptyDataset("validation split is empty");
  std::vector<double> per(val.size());
  const auto count = static_cast<std::ptrdiff_t>(val.size());
#pragma omp parallel for schedule(dynamic)
  for (std::ptrdiff_t v = 0; v < count; ++v) {
    Rng rng(derive_seed(config.seed, 0x7a11, static_cast<uint64_t>(v)));
    std::vector<d3pm::NoisySample> noisy;
    std::vector<const PreparedEntry*> items;
    for (int d = 0; d < config.val_draws; ++d) {
      const int t = rng.uniform_int(1, schedule.steps());
      noisy.push_back(d3pm::forward_sample(val[v].entry->sequence, t, schedule, rng));
      items.push_back(&val[v]);
    }
    ad::Tape tape;
    ad::BoundParams p(tape, params, false);
    per[v] = batch_hybrid_loss(tape, p, config, items, noisy, schedule).value().item();
  }
  double s = 0;
  for (double x : per) s += x;
  return s / static_cast<double>(per.size());
}

PretrainResult pretrain(const DenoiserConfig& config, std::span<const PreparedEntry> train,
                        std::span<const PreparedEntry> val,
                        const std::function<void(const PretrainProgress&)>& progress) {
  if (train.empty()) throw EmptyDataset("training split is empty");
  const auto schedule = d3pm::make_uniform_schedule(config.steps, config.schedule);
  PretrainResult result;
  result.params = init_denoiser_params(config, config.seed);
  ad::AdamState adam;
  const ad::AdamConfig adam_config{.lr = config.lr};
  Rng rng(derive_seed(config.seed, 0x9e7a));

  if (!val.empty()) result.val_loss.push_back(validation_loss(result.params, config, val, schedule));

  std::vector<size_t> order(train.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;
  long step = 0;
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    rng.shuffle(order.begin(), order.end());
    for (size_t start = 0; start < order.size(); start += static_cast<size_t>(config.batch_size)) {
      const size_t end = std::min(order.size(), start + static_cast<size_t>(config.batch_size));
      std::vector<const PreparedEntry*> items;
      std::vector<d3pm::NoisySample> noisy;
      for (size_t b = start; b < end; ++b) {
        const PreparedEntry& item = train[order[b]];
        const int t = rng.uniform_int(1, schedule.steps());
        noisy.push_back(d3pm::forward_sample(item.entry->sequence, t, schedule, rng));
        items.push_back(&item);
      }
      ad::Tape tape;
      ad::BoundParams p(tape, result.params);
      Var loss = batch_hybrid_loss(tape, p, config, items, noisy, schedule);
      tape.backward(loss);
      ad::adam_step(result.params, p.gradients(), adam, adam_config);
      result.train_loss.push_back(loss.value().item());
      ++step;
      if (config.checkpoint_every > 0 && step % config.checkpoint_every == 0 && !config.checkpoint_dir.empty()) {
        std::filesystem::create_directories(config.checkpoint_dir);
        save_denoiser(config.checkpoint_dir / ("step" + std::to_string(step) + ".ckpt"), result.params, config);
      }
    }
    const bool last = epoch + 1 == config.epochs;
    PretrainProgress info{epoch, step, result.train_loss.back(), std::nullopt};
    if (!val.empty() && (config.validate_every_epoch || last)) {
      result.val_loss.push_back(validation_loss(result.params, config, val, schedule));
      info.val_loss = result.val_loss.back();
    }
    if (progress) progress(info);
  }
  return result;
}

std::vector<Sequence> sample_sequences(const ad::ParamSet& params, const DenoiserConfig& config,
                                       const ResidueGraph& graph, int count,
                                       const d3pm::TransitionSchedule& schedule, Rng& rng,
                                       std::vector<ReverseTrace>* traces) {
  if (count < 1) throw InvalidArgument("sample count must be at least 1");
  if (schedule.steps() != config.steps) throw InvalidArgument("schedule length differs from the model's T");
  const auto n = static_cast<size_t>(graph.num_nodes);
  std::vector<Sequence> current;
  for (int m = 0; m < count; ++m) {
    std::vector<int> s(n);
    for (auto& x : s) x = rng.uniform_int(0, kNumAminoAcids - 1);
    current.emplace_back(std::move(s));
  }
  if (traces) {
    traces->assign(static_cast<size_t>(count), {});
    for (int m = 0; m < count; ++m) (*traces)[m].states.push_back(current[m]);
  }
  for (int t = schedule.steps(); t >= 1; --t) {
    ad::Tape tape;
    ad::BoundParams p(tape, params, false);
    std::vector<Replica> replicas;
    for (const auto& s : current) replicas.push_back({&graph, &s, t});
    Var rev = replica_reverse_probs(denoise_logits(tape, p, config, replicas), replicas, schedule);
    const Tensor& probs = rev.value();
    std::vector<Sequence> next;
    for (int m = 0; m < count; ++m) {
      std::vector<int> s(n);
      std::vector<double> logp(n);
      for (size_t i = 0; i < n; ++i) {
        const double* row = probs.row_ptr(static_cast<size_t>(m) * n + i);
        s[i] = rng.categorical(std::span<const double>(row, kNumAminoAcids));
        logp[i] = std::log(row[s[i]]);
      }
      next.emplace_back(std::move(s));
      if (traces) {
        (*traces)[m].states.push_back(next.back());
        (*traces)[m].logp.push_back(std::move(logp));
      }
    }
    current = std::move(next);
  }
  return current;
}

void save_denoiser(const std::filesystem::path& path, const ad::ParamSet& params, const DenoiserConfig& config) {
  nlohmann::json meta{{"model", "denoiser"}, {"config", config.to_json()},
                      {"schedule", {{"T", config.steps}, {"schedule", config.schedule.to_json()}}}};
  ad::save_checkpoint(path, params, meta);
  auto sidecar = path;
  sidecar += ".json";
  std::ofstream(sidecar) << meta.dump(2) << "\n";
}

std::pair<ad::ParamSet, DenoiserConfig> load_denoiser(const std::filesystem::path& path) {
  auto [params, meta] = ad::load_checkpoint(path);
  if (!meta.contains("config")) throw ad::CheckpointError(path.string() + " has no denoiser config");
  return {std::move(params), DenoiserConfig::from_json(meta["config"])};
}

}  // namespace rldif
