// Command-line front end: pretraining, RL fine-tuning, sampling, evaluation,
// TM_min sweeps, cross-split overlap and a toy folding server.

#include <fstream>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"
#include "rldif/bench.hpp"
#include "rldif/ddpo.hpp"
#include "rldif/denoiser.hpp"
#include "rldif/folding.hpp"
#include "rldif/kernels.hpp"
#include "rldif/structio.hpp"

using namespace rldif;
using nlohmann::json;

namespace {

json load_config(const std::string& path) {
  if (path.empty()) return json::object();
  return json::parse(read_text_file(path));
}

json section(const json& config, const char* key) {
  return config.contains(key) ? config.at(key) : json::object();
}

Split parse_split(const std::string& name) {
  for (Split s : {Split::Train, Split::Validation, Split::Test})
    if (split_name(s) == name) return s;
  throw InvalidArgument("unknown split: " + name);
}

// A chain_set.jsonl with a splits file, or a directory of PDB files.
struct DatasetArgs {
  std::string data;
  std::string splits;
  std::string split = "test";
  int limit = 0;

  void add(CLI::App* app, const std::string& default_split) {
    split = default_split;
    app->add_option("--data", data, "chain_set.jsonl or a directory of PDB files")->required();
    app->add_option("--splits", splits, "split JSON for a chain set");
    app->add_option("--split", split, "train, validation or test")->capture_default_str();
    app->add_option("--limit", limit, "use only the first N structures");
  }
};

std::vector<DatasetEntry> load_entries(const DatasetArgs& args, Split split) {
  std::vector<DatasetEntry> out;
  if (std::filesystem::is_directory(args.data)) {
    std::vector<std::filesystem::path> files;
    for (const auto& e : std::filesystem::directory_iterator(args.data))
      if (e.path().extension() == ".pdb") files.push_back(e.path());
    std::sort(files.begin(), files.end());
    for (const auto& f : files) {
      PdbChain chain = read_pdb_file(f);
      out.push_back({f.stem().string(), std::move(chain.sequence), std::move(chain.backbone), split});
    }
  } else {
    if (args.splits.empty()) throw InvalidArgument("--splits is required with a chain set");
    ChainSet set = load_chain_set(args.data, args.splits);
    for (const auto& w : set.warnings) std::cerr << "warning: " << w << '\n';
    for (const auto* e : set.split(split)) out.push_back(*e);
  }
  if (args.limit > 0 && out.size() > static_cast<size_t>(args.limit)) out.resize(args.limit);
  if (out.empty()) throw EmptyDataset("no structures in split " + std::string(split_name(split)));
  return out;
}

// Oracle selection: flags beat the config file, which beats the environment.
struct OracleArgs {
  std::string fold_url;
  std::string cache_dir;
  bool toy = false;

  void add(CLI::App* app) {
    app->add_option("--fold-url", fold_url, "folding service endpoint (env RLDIF_FOLD_URL)");
    app->add_option("--cache-dir", cache_dir, "fold cache directory (env RLDIF_CACHE_DIR)");
    app->add_flag("--toy-oracle", toy, "use the deterministic toy folder");
  }

  fold::OracleSpec spec(const json& config) const {
    fold::OracleSpec s = fold::OracleSpec::from_json(section(config, "oracle"));
    std::string url = fold_url;
    if (url.empty())
      if (const char* env = std::getenv("RLDIF_FOLD_URL")) url = env;
    if (toy) {
      s.kind = fold::OracleSpec::Kind::Toy;
    } else if (!url.empty()) {
      s.kind = fold::OracleSpec::Kind::Http;
      s.endpoint = url;
    }
    s.validate();
    return s;
  }

  std::filesystem::path cache(const json& config) const {
    if (!cache_dir.empty()) return cache_dir;
    if (config.contains("cache_dir")) return config.at("cache_dir").get<std::string>();
    if (const char* env = std::getenv("RLDIF_CACHE_DIR")) return env;
    return ".rldif_cache";
  }
};

void write_text(const std::string& path, const std::function<void(std::ostream&)>& body) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path);
  body(out);
}

std::vector<double> parse_thresholds(const std::string& text) {
  std::vector<double> out;
  if (text.find(':') != std::string::npos) {
    double lo = 0, hi = 0, step = 0;
    char c1 = 0, c2 = 0;
    std::istringstream in(text);
    if (!(in >> lo >> c1 >> hi >> c2 >> step) || step <= 0 || hi < lo)
      throw InvalidArgument("thresholds range must be lo:hi:step");
    const int n = static_cast<int>(std::floor((hi - lo) / step + 1e-9));
    for (int i = 0; i <= n; ++i) out.push_back(lo + step * i);
    return out;
  }
  std::stringstream in(text);
  for (std::string cell; std::getline(in, cell, ',');) out.push_back(std::stod(cell));
  return out;
}

std::vector<bench::NamedSequence> read_named(const std::string& path) {
  std::vector<bench::NamedSequence> out;
  for (auto& r : bench::parse_fasta(read_text_file(path))) out.push_back({r.header, r.sequence});
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  kernels::configure_allocator();
  CLI::App app{"Categorical diffusion inverse folding with RL fine-tuning"};
  app.require_subcommand(1);
  std::string config_path;
  app.add_option("--config", config_path, "JSON config with model, ddpo and oracle sections");

  // make-toy-dataset
  auto* toy_cmd = app.add_subcommand("make-toy-dataset", "write a chain set folded by the toy oracle");
  int toy_count = 300, toy_min = 30, toy_max = 60;
  uint64_t toy_seed = 7;
  double toy_val = 0.1, toy_test = 0.0;
  std::string toy_out, toy_splits;
  toy_cmd->add_option("--count", toy_count)->capture_default_str();
  toy_cmd->add_option("--min-length", toy_min)->capture_default_str();
  toy_cmd->add_option("--max-length", toy_max)->capture_default_str();
  toy_cmd->add_option("--seed", toy_seed)->capture_default_str();
  toy_cmd->add_option("--val-fraction", toy_val)->capture_default_str();
  toy_cmd->add_option("--test-fraction", toy_test)->capture_default_str();
  toy_cmd->add_option("--out", toy_out, "chain_set.jsonl path")->required();
  toy_cmd->add_option("--splits-out", toy_splits, "split JSON path")->required();

  // pretrain
  auto* pre_cmd = app.add_subcommand("pretrain", "train the denoiser with the hybrid loss");
  std::string pre_data, pre_splits, pre_out;
  pre_cmd->add_option("--data", pre_data, "chain_set.jsonl")->required();
  pre_cmd->add_option("--splits", pre_splits, "split JSON")->required();
  std::optional<int> pre_epochs, pre_layers, pre_hidden, pre_k, pre_steps, pre_batch;
  std::optional<double> pre_lr;
  std::optional<uint64_t> pre_seed;
  pre_cmd->add_option("--out", pre_out, "checkpoint path")->required();
  pre_cmd->add_option("--epochs", pre_epochs);
  pre_cmd->add_option("--layers", pre_layers);
  pre_cmd->add_option("--hidden", pre_hidden);
  pre_cmd->add_option("--k", pre_k, "neighbors per residue");
  pre_cmd->add_option("--steps", pre_steps, "diffusion steps T");
  pre_cmd->add_option("--batch", pre_batch);
  pre_cmd->add_option("--lr", pre_lr);
  pre_cmd->add_option("--seed", pre_seed);

  // rl-tune
  auto* rl_cmd = app.add_subcommand("rl-tune", "fine-tune a checkpoint against the folding oracle");
  std::string rl_ckpt, rl_out, rl_history, rl_data, rl_splits;
  std::optional<int> rl_steps, rl_structures, rl_samples, rl_subsample, rl_epochs;
  std::optional<double> rl_lr, rl_clip;
  std::optional<uint64_t> rl_seed;
  OracleArgs rl_oracle;
  rl_cmd->add_option("--checkpoint", rl_ckpt)->required();
  rl_cmd->add_option("--data", rl_data, "chain_set.jsonl")->required();
  rl_cmd->add_option("--splits", rl_splits, "split JSON")->required();
  rl_cmd->add_option("--out", rl_out, "fine-tuned checkpoint path")->required();
  rl_cmd->add_option("--history", rl_history, "per-step CSV");
  rl_cmd->add_option("--steps", rl_steps);
  rl_cmd->add_option("--structures-per-step", rl_structures);
  rl_cmd->add_option("--samples", rl_samples);
  rl_cmd->add_option("--timestep-subsample", rl_subsample);
  rl_cmd->add_option("--inner-epochs", rl_epochs);
  rl_cmd->add_option("--lr", rl_lr);
  rl_cmd->add_option("--clip", rl_clip);
  rl_cmd->add_option("--seed", rl_seed);
  rl_oracle.add(rl_cmd);

  // sample
  auto* sample_cmd = app.add_subcommand("sample", "sample designs for each structure");
  std::string sample_ckpt, sample_out;
  int sample_m = 4;
  uint64_t sample_seed = 0;
  DatasetArgs sample_data;
  sample_cmd->add_option("--checkpoint", sample_ckpt)->required();
  sample_data.add(sample_cmd, "test");
  sample_cmd->add_option("-m,--designs", sample_m)->capture_default_str();
  sample_cmd->add_option("--seed", sample_seed)->capture_default_str();
  sample_cmd->add_option("--out", sample_out, "FASTA path (stdout when omitted)");

  // eval
  auto* eval_cmd = app.add_subcommand("eval", "score designs: recovery, sc-TM, foldable diversity");
  std::string eval_ckpt, eval_designs, eval_csv, eval_designs_csv, eval_label = "model";
  int eval_m = 4;
  double eval_tm_min = 0.7;
  uint64_t eval_seed = 0;
  DatasetArgs eval_data;
  OracleArgs eval_oracle;
  auto* eval_src = eval_cmd->add_option_group("source");
  eval_src->add_option("--checkpoint", eval_ckpt, "sample designs from a model");
  eval_src->add_option("--designs", eval_designs, "FASTA file or directory of external designs");
  eval_src->require_option(1);
  eval_data.add(eval_cmd, "test");
  eval_cmd->add_option("-m,--designs-per-structure", eval_m)->capture_default_str();
  eval_cmd->add_option("--tm-min", eval_tm_min)->capture_default_str();
  eval_cmd->add_option("--seed", eval_seed)->capture_default_str();
  eval_cmd->add_option("--csv", eval_csv, "per-structure CSV");
  eval_cmd->add_option("--designs-csv", eval_designs_csv, "per-design sc-TM CSV for sweeps");
  eval_cmd->add_option("--label", eval_label)->capture_default_str();
  eval_oracle.add(eval_cmd);

  // sweep
  auto* sweep_cmd = app.add_subcommand("sweep", "foldable diversity across TM_min from stored sc-TMs");
  std::string sweep_in, sweep_out, sweep_thresholds = "0.5:0.9:0.05";
  sweep_cmd->add_option("--designs-csv", sweep_in)->required();
  sweep_cmd->add_option("--thresholds", sweep_thresholds, "lo:hi:step or a comma list")->capture_default_str();
  sweep_cmd->add_option("--out", sweep_out, "CSV path (stdout when omitted)");

  // overlap
  auto* overlap_cmd = app.add_subcommand("overlap", "cross-split overlap by sequence identity");
  std::string ov_queries, ov_refs, ov_out, ov_command;
  double ov_threshold = 0.3;
  overlap_cmd->add_option("--queries", ov_queries, "FASTA")->required();
  overlap_cmd->add_option("--references", ov_refs, "FASTA")->required();
  overlap_cmd->add_option("--threshold", ov_threshold)->capture_default_str();
  overlap_cmd->add_option("--structure-command", ov_command,
                          "shell command with {queries} and {references}; prints flagged ids");
  overlap_cmd->add_option("--out", ov_out, "per-query CSV");

  // serve-toy-folder
  auto* serve_cmd = app.add_subcommand("serve-toy-folder", "serve the toy folder over the HTTP protocol");
  std::string serve_host = "127.0.0.1";
  int serve_port = 8765;
  fold::StubServerOptions serve_opts;
  serve_cmd->add_option("--host", serve_host)->capture_default_str();
  serve_cmd->add_option("--port", serve_port)->capture_default_str();
  serve_cmd->add_option("--delay-ms", serve_opts.delay_ms)->capture_default_str();
  serve_cmd->add_option("--threads", serve_opts.thread_count)->capture_default_str();

  CLI11_PARSE(app, argc, argv);

  try {
    const json config = load_config(config_path);

    if (*toy_cmd) {
      auto entries = fold::make_toy_dataset(toy_count, toy_min, toy_max, toy_seed);
      const auto n_test = static_cast<size_t>(std::lround(toy_test * toy_count));
      const auto n_val = static_cast<size_t>(std::lround(toy_val * toy_count));
      json splits = {{"train", json::array()}, {"validation", json::array()}, {"test", json::array()}};
      write_text(toy_out, [&](std::ostream& out) {
        for (size_t i = 0; i < entries.size(); ++i) {
          const auto& e = entries[i];
          out << format_chain_record(to_chain_record(e.id, e.sequence, e.backbone)) << '\n';
          const char* key = i + n_test >= entries.size() ? "test"
                            : i + n_test + n_val >= entries.size() ? "validation"
                                                                   : "train";
          splits[key].push_back(e.id);
        }
      });
      write_text(toy_splits, [&](std::ostream& out) { out << splits.dump(1) << '\n'; });
      std::cout << "wrote " << entries.size() << " structures to " << toy_out << '\n';
    }

    if (*pre_cmd) {
      DenoiserConfig model = DenoiserConfig::from_json(section(config, "model"));
      if (pre_epochs) model.epochs = *pre_epochs;
      if (pre_layers) model.layers = *pre_layers;
      if (pre_hidden) model.hidden = *pre_hidden;
      if (pre_k) model.k = *pre_k;
      if (pre_steps) model.steps = *pre_steps;
      if (pre_batch) model.batch_size = *pre_batch;
      if (pre_lr) model.lr = *pre_lr;
      if (pre_seed) model.seed = *pre_seed;
      ChainSet set = load_chain_set(pre_data, pre_splits);
      auto train = prepare_entries(set.split(Split::Train), model.features());
      auto val = prepare_entries(set.split(Split::Validation), model.features());
      std::cerr << "train " << train.size() << " validation " << val.size() << " skipped " << set.skipped << '\n';
      auto result = pretrain(model, train, val, [](const PretrainProgress& p) {
        std::cerr << "epoch " << p.epoch << " train_loss " << p.train_loss;
        if (p.val_loss) std::cerr << " val_loss " << *p.val_loss;
        std::cerr << '\n';
      });
      save_denoiser(pre_out, result.params, model);
      if (!result.val_loss.empty())
        std::cout << "validation loss " << result.val_loss.front() << " -> " << result.val_loss.back() << '\n';
    }

    if (*rl_cmd) {
      auto [params, model] = load_denoiser(rl_ckpt);
      ddpo::DDPOConfig rl = ddpo::DDPOConfig::from_json(section(config, "ddpo"));
      if (rl_steps) rl.steps = *rl_steps;
      if (rl_structures) rl.structures_per_step = *rl_structures;
      if (rl_samples) rl.samples_per_structure = *rl_samples;
      if (rl_subsample) rl.timestep_subsample = *rl_subsample;
      if (rl_epochs) rl.inner_epochs = *rl_epochs;
      if (rl_lr) rl.lr = *rl_lr;
      if (rl_clip) rl.clip = *rl_clip;
      if (rl_seed) rl.seed = *rl_seed;
      rl.validate();
      ChainSet set = load_chain_set(rl_data, rl_splits);
      auto train = prepare_entries(set.split(Split::Train), model.features());
      auto oracle = fold::make_oracle(rl_oracle.spec(config));
      fold::FoldCache cache(rl_oracle.cache(config), *oracle);
      auto result = ddpo::rl_train(params, model, train, rl, cache, [](const ddpo::StepStats& s) {
        std::cerr << "step " << s.step << " mean_reward " << s.mean_reward << " clip_fraction " << s.clip_fraction
                  << (s.aborted ? " aborted" : "") << '\n';
      });
      save_denoiser(rl_out, result.params, model);
      if (!rl_history.empty())
        write_text(rl_history, [&](std::ostream& out) { ddpo::write_history_csv(out, result.history); });
    }

    if (*sample_cmd) {
      auto [params, model] = load_denoiser(sample_ckpt);
      auto entries = load_entries(sample_data, parse_split(sample_data.split));
      auto source = bench::model_designs(params, model, sample_seed);
      std::vector<bench::FastaRecord> records;
      for (const auto& e : entries) {
        auto designs = source(e, sample_m);
        for (size_t i = 0; i < designs.size(); ++i)
          records.push_back({bench::design_header(e.id, static_cast<int>(i)), designs[i].to_text()});
      }
      if (sample_out.empty())
        bench::write_fasta(std::cout, records);
      else
        write_text(sample_out, [&](std::ostream& out) { bench::write_fasta(out, records); });
    }

    if (*eval_cmd) {
      auto entries = load_entries(eval_data, parse_split(eval_data.split));
      auto oracle = fold::make_oracle(eval_oracle.spec(config));
      fold::FoldCache cache(eval_oracle.cache(config), *oracle);
      ad::ParamSet params;
      DenoiserConfig model;
      bench::DesignSource source;
      if (!eval_ckpt.empty()) {
        std::tie(params, model) = load_denoiser(eval_ckpt);
        source = bench::model_designs(params, model, eval_seed);
      } else {
        source = bench::external_designs(bench::load_design_fasta(eval_designs));
      }
      auto report = bench::evaluate_dataset(entries, source, cache, eval_m, eval_tm_min);
      std::cout << bench::summary_table(report, eval_label);
      if (!eval_csv.empty()) write_text(eval_csv, [&](std::ostream& out) { bench::write_eval_csv(out, report); });
      if (!eval_designs_csv.empty())
        write_text(eval_designs_csv, [&](std::ostream& out) { bench::write_designs_csv(out, report.rows); });
    }

    if (*sweep_cmd) {
      std::ifstream in(sweep_in);
      if (!in) throw IoError("cannot open " + sweep_in);
      auto rows = bench::read_designs_csv(in);
      auto sweep = bench::tmmin_sweep(rows, parse_thresholds(sweep_thresholds));
      if (sweep_out.empty())
        bench::write_sweep_csv(std::cout, sweep);
      else
        write_text(sweep_out, [&](std::ostream& out) { bench::write_sweep_csv(out, sweep); });
    }

    if (*overlap_cmd) {
      auto queries = read_named(ov_queries);
      auto refs = read_named(ov_refs);
      std::optional<std::string> command;
      if (!ov_command.empty()) command = ov_command;
      auto result = bench::cross_split_overlap(queries, refs, ov_threshold, command);
      if (result.structure_arm_error) std::cerr << "structure arm failed: " << *result.structure_arm_error << '\n';
      std::cout << "overlap " << result.overlap << " (" << queries.size() << " queries)\n";
      if (!ov_out.empty()) write_text(ov_out, [&](std::ostream& out) { bench::write_overlap_csv(out, result); });
    }

    if (*serve_cmd) {
      fold::ToyFoldServer server(serve_opts);
      std::cerr << "serving toy folder on http://" << serve_host << ':' << serve_port << "/fold\n";
      server.listen(serve_host, serve_port);
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
