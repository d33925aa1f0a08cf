#include "rldif/bench.hpp"

#include <boost/math/distributions/students_t.hpp>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <sstream>

#include "rldif/metrics.hpp"

namespace rldif::bench {

namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return std::string(s.substr(b, e - b + 1));
}

uint64_t fnv1a(std::string_view s) {
  uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot read " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

double mean_of(std::span<const double> v) {
  return v.empty() ? 0.0 : std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

double row_fd(const EvalRow& row, double tm_min) {
  return row.designs.size() < 2 ? 0.0 : metrics::foldable_diversity(row.designs, row.sc_tm, tm_min);
}

}  // namespace

std::vector<FastaRecord> parse_fasta(std::string_view text) {
  std::vector<FastaRecord> out;
  std::istringstream in{std::string(text)};
  std::string line;
  while (std::getline(in, line)) {
    const std::string t = trim(line);
    if (t.empty() || t[0] == ';') continue;
    if (t[0] == '>') {
      out.push_back({trim(std::string_view(t).substr(1)), {}});
    } else {
      if (out.empty()) throw InvalidArgument("FASTA sequence line before any header");
      out.back().sequence += t;
    }
  }
  return out;
}

void write_fasta(std::ostream& out, std::span<const FastaRecord> records) {
  for (const auto& r : records) out << '>' << r.header << '\n' << r.sequence << '\n';
}

std::string design_header(const std::string& structure_id, int index) {
  return structure_id + "_sample" + std::to_string(index);
}

std::map<std::string, std::vector<Sequence>> load_design_fasta(const std::filesystem::path& path) {
  std::vector<std::filesystem::path> files;
  if (std::filesystem::is_directory(path)) {
    for (const auto& e : std::filesystem::directory_iterator(path)) {
      const auto ext = e.path().extension().string();
      if (ext == ".fa" || ext == ".fasta" || ext == ".faa") files.push_back(e.path());
    }
    std::sort(files.begin(), files.end());
  } else {
    files.push_back(path);
  }
  std::map<std::string, std::vector<std::pair<int, Sequence>>> indexed;
  for (const auto& f : files) {
    for (const auto& rec : parse_fasta(read_file(f))) {
      const auto cut = rec.header.rfind("_sample");
      std::string id = rec.header;
      int index = 0;
      if (cut != std::string::npos) {
        id = rec.header.substr(0, cut);
        try {
          index = std::stoi(rec.header.substr(cut + 7));
        } catch (const std::exception&) {
          throw InvalidArgument("bad design header: " + rec.header);
        }
      } else {
        index = static_cast<int>(indexed[id].size());
      }
      indexed[id].emplace_back(index, Sequence::from_text(rec.sequence));
    }
  }
  std::map<std::string, std::vector<Sequence>> out;
  for (auto& [id, list] : indexed) {
    std::stable_sort(list.begin(), list.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
    for (auto& [i, s] : list) out[id].push_back(std::move(s));
  }
  return out;
}

DesignSource model_designs(const ad::ParamSet& params, const DenoiserConfig& config, uint64_t seed) {
  auto schedule = std::make_shared<d3pm::TransitionSchedule>(d3pm::make_uniform_schedule(config.steps, config.schedule));
  return [&params, config, seed, schedule](const DatasetEntry& entry, int m) {
    const ResidueGraph graph = build_features(entry.backbone, config.features());
    Rng rng(derive_seed(seed, fnv1a(entry.id)));
    return sample_sequences(params, config, graph, m, *schedule, rng);
  };
}

DesignSource external_designs(std::map<std::string, std::vector<Sequence>> designs) {
  auto table = std::make_shared<std::map<std::string, std::vector<Sequence>>>(std::move(designs));
  return [table](const DatasetEntry& entry, int m) {
    const auto it = table->find(entry.id);
    const size_t have = it == table->end() ? 0 : it->second.size();
    if (have < static_cast<size_t>(m))
      throw MissingDesigns("structure " + entry.id + " has " + std::to_string(have) + " designs, expected " +
                           std::to_string(m));
    return std::vector<Sequence>(it->second.begin(), it->second.begin() + m);
  };
}

EvalRow evaluate_structure(const DatasetEntry& entry, std::vector<Sequence> designs, fold::FoldCache& cache,
                           double tm_min) {
  if (designs.empty()) throw MissingDesigns("structure " + entry.id + " has no designs");
  EvalRow row;
  row.id = entry.id;
  row.n_designs = static_cast<int>(designs.size());
  std::vector<double> recovery;
  for (const auto& d : designs) {
    recovery.push_back(metrics::sequence_recovery(d, entry.sequence));
    row.sc_tm.push_back(metrics::sc_tm(d, entry.sequence, cache));
  }
  row.designs = std::move(designs);
  row.mean_recovery = mean_of(recovery);
  row.mean_sctm = mean_of(row.sc_tm);
  if (row.designs.size() >= 2) row.diversity = metrics::sequence_diversity(row.designs);
  row.foldable_diversity = row_fd(row, tm_min);
  return row;
}

EvalAggregate aggregate_rows(std::span<const EvalRow> rows) {
  EvalAggregate a;
  a.structures = rows.size();
  if (rows.empty()) return a;
  for (const auto& r : rows) {
    a.mean_recovery += r.mean_recovery;
    a.mean_sctm += r.mean_sctm;
    a.foldable_diversity += r.foldable_diversity;
    a.diversity += r.diversity;
  }
  const auto n = static_cast<double>(rows.size());
  a.mean_recovery /= n;
  a.mean_sctm /= n;
  a.foldable_diversity /= n;
  a.diversity /= n;
  return a;
}

EvalReport evaluate_dataset(std::span<const DatasetEntry> dataset, const DesignSource& source, fold::FoldCache& cache,
                            int m, double tm_min) {
  if (m < 1) throw InvalidArgument("need at least one design per structure");
  metrics::FDConfig{tm_min}.validate();
  EvalReport report;
  report.tm_min = tm_min;
  report.dataset_digest = dataset_digest(dataset);
  report.rows.resize(dataset.size());
  std::vector<std::exception_ptr> errors(dataset.size());
  const auto count = static_cast<std::ptrdiff_t>(dataset.size());
#pragma omp parallel for schedule(dynamic)
  for (std::ptrdiff_t i = 0; i < count; ++i) {
    try {
      report.rows[i] = evaluate_structure(dataset[i], source(dataset[i], m), cache, tm_min);
    } catch (...) {
      errors[i] = std::current_exception();
    }
  }
  for (const auto& e : errors)
    if (e) std::rethrow_exception(e);
  report.aggregate = aggregate_rows(report.rows);
  return report;
}

std::string dataset_digest(std::span<const DatasetEntry> dataset) {
  std::string material;
  for (const auto& e : dataset) material += e.id + '\t' + e.sequence.to_text() + '\n';
  return fold::sha256_hex(material);
}

void write_eval_csv(std::ostream& out, const EvalReport& report) {
  out << "id,n_designs,mean_recovery,mean_sctm,foldable_diversity\n";
  out << std::setprecision(17);
  for (const auto& r : report.rows)
    out << r.id << ',' << r.n_designs << ',' << r.mean_recovery << ',' << r.mean_sctm << ',' << r.foldable_diversity
        << '\n';
}

void write_designs_csv(std::ostream& out, std::span<const EvalRow> rows) {
  out << "id,index,sequence,sctm\n";
  out << std::setprecision(17);
  for (const auto& r : rows)
    for (size_t i = 0; i < r.designs.size(); ++i)
      out << r.id << ',' << i << ',' << r.designs[i].to_text() << ',' << r.sc_tm[i] << '\n';
}

std::vector<EvalRow> read_designs_csv(std::istream& in) {
  std::string line;
  if (!std::getline(in, line) || trim(line) != "id,index,sequence,sctm")
    throw InvalidArgument("designs CSV must start with the header id,index,sequence,sctm");
  std::vector<EvalRow> rows;
  std::map<std::string, size_t> slot;
  int line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(trim(line));
    for (std::string cell; std::getline(ss, cell, ',');) f.push_back(cell);
    if (f.size() != 4) throw InvalidArgument("designs CSV line " + std::to_string(line_no) + " needs 4 fields");
    auto [it, fresh] = slot.emplace(f[0], rows.size());
    if (fresh) {
      rows.emplace_back();
      rows.back().id = f[0];
    }
    EvalRow& r = rows[it->second];
    r.designs.push_back(Sequence::from_text(f[2]));
    r.sc_tm.push_back(std::stod(f[3]));
    r.n_designs = static_cast<int>(r.designs.size());
  }
  for (auto& r : rows) {
    r.mean_sctm = mean_of(r.sc_tm);
    if (r.designs.size() >= 2) r.diversity = metrics::sequence_diversity(r.designs);
  }
  return rows;
}

std::string summary_table(const EvalReport& report, const std::string& label) {
  std::ostringstream out;
  out << std::left << std::setw(16) << "Model" << std::right << std::setw(20) << "Foldable Diversity" << std::setw(10)
      << "sc-TM" << std::setw(20) << "Sequence Recovery" << '\n';
  out << std::fixed << std::left << std::setw(16) << label << std::right << std::setw(19) << std::setprecision(1)
      << 100.0 * report.aggregate.foldable_diversity << '%' << std::setw(10) << std::setprecision(3)
      << report.aggregate.mean_sctm << std::setw(19) << std::setprecision(1) << 100.0 * report.aggregate.mean_recovery
      << '%' << '\n';
  out << "structures: " << report.aggregate.structures << "  TM_min: " << std::setprecision(2) << report.tm_min
      << "  dataset sha256: " << report.dataset_digest << '\n';
  return out.str();
}

std::vector<SweepRow> tmmin_sweep(std::span<const EvalRow> rows, std::span<const double> thresholds) {
  std::vector<SweepRow> out;
  for (double t : thresholds) {
    metrics::FDConfig{t}.validate();
    double total = 0;
    for (const auto& r : rows) total += row_fd(r, t);
    out.push_back({t, rows.empty() ? 0.0 : total / static_cast<double>(rows.size())});
  }
  return out;
}

void write_sweep_csv(std::ostream& out, std::span<const SweepRow> rows) {
  out << "tm_min,foldable_diversity\n" << std::setprecision(17);
  for (const auto& r : rows) out << r.tm_min << ',' << r.foldable_diversity << '\n';
}

double alignment_identity(std::string_view a, std::string_view b) {
  if (a.empty() || b.empty()) throw InvalidArgument("alignment needs nonempty sequences");
  // Cell value: (matches, aligned columns), compared lexicographically.
  using Cell = std::pair<int, int>;
  std::vector<Cell> prev(b.size() + 1, {0, 0}), cur(b.size() + 1);
  for (size_t i = 1; i <= a.size(); ++i) {
    cur[0] = {0, 0};
    for (size_t j = 1; j <= b.size(); ++j) {
      Cell diag{prev[j - 1].first + (a[i - 1] == b[j - 1]), prev[j - 1].second + 1};
      cur[j] = std::max({diag, prev[j], cur[j - 1]});
    }
    std::swap(prev, cur);
  }
  const auto [matches, columns] = prev[b.size()];
  const auto length = static_cast<double>(a.size() + b.size()) - columns;
  return matches / length;
}

OverlapResult cross_split_overlap(std::span<const NamedSequence> queries, std::span<const NamedSequence> references,
                                  double threshold, const std::optional<std::string>& structure_command) {
  OverlapResult result;
  result.threshold = threshold;
  for (const auto& q : queries) {
    OverlapFlag f;
    f.id = q.id;
    for (const auto& r : references) {
      const double id = alignment_identity(q.sequence, r.sequence);
      if (id > f.best_identity || f.best_reference.empty()) {
        f.best_identity = id;
        f.best_reference = r.id;
      }
    }
    f.sequence_hit = f.best_identity > threshold;
    result.flags.push_back(std::move(f));
  }
  if (structure_command) {
    try {
      const auto dir = std::filesystem::temp_directory_path() /
                       ("rldif_overlap_" + std::to_string(fnv1a(*structure_command) ^ reinterpret_cast<uintptr_t>(&result)));
      std::filesystem::create_directories(dir);
      auto dump = [&](const std::filesystem::path& p, std::span<const NamedSequence> set) {
        std::ofstream out(p);
        for (const auto& s : set) out << '>' << s.id << '\n' << s.sequence << '\n';
      };
      dump(dir / "queries.fasta", queries);
      dump(dir / "references.fasta", references);
      std::string cmd = *structure_command;
      for (const auto& [key, file] : {std::pair{std::string("{queries}"), dir / "queries.fasta"},
                                      std::pair{std::string("{references}"), dir / "references.fasta"}})
        for (auto pos = cmd.find(key); pos != std::string::npos; pos = cmd.find(key))
          cmd.replace(pos, key.size(), file.string());
      FILE* pipe = popen(cmd.c_str(), "r");
      if (!pipe) throw ExternalCommandFailed("cannot start structure search command");
      std::string output;
      char buf[4096];
      while (size_t n = fread(buf, 1, sizeof buf, pipe)) output.append(buf, n);
      const int status = pclose(pipe);
      std::filesystem::remove_all(dir);
      if (status != 0) throw ExternalCommandFailed("structure search command exited with status " + std::to_string(status));
      std::istringstream lines(output);
      for (std::string line; std::getline(lines, line);) {
        const std::string id = trim(line);
        for (auto& f : result.flags)
          if (f.id == id) f.structure_hit = true;
      }
    } catch (const std::exception& e) {
      result.structure_arm_error = e.what();
      for (auto& f : result.flags) f.structure_hit = false;
    }
  }
  size_t flagged = 0;
  for (const auto& f : result.flags) flagged += f.flagged();
  result.overlap = queries.empty() ? 0.0 : static_cast<double>(flagged) / static_cast<double>(queries.size());
  return result;
}

void write_overlap_csv(std::ostream& out, const OverlapResult& result) {
  out << "id,best_identity,best_reference,sequence_hit,structure_hit\n" << std::setprecision(17);
  for (const auto& f : result.flags)
    out << f.id << ',' << f.best_identity << ',' << f.best_reference << ',' << f.sequence_hit << ','
        << f.structure_hit << '\n';
}

WelchResult welch_t_test(std::span<const double> a, std::span<const double> b) {
  if (a.size() < 2 || b.size() < 2) throw InvalidArgument("Welch's test needs at least 2 samples per group");
  auto moments = [](std::span<const double> x) {
    const double m = mean_of(x);
    double ss = 0;
    for (double v : x) ss += (v - m) * (v - m);
    return std::pair{m, ss / static_cast<double>(x.size() - 1)};
  };
  const auto [ma, va] = moments(a);
  const auto [mb, vb] = moments(b);
  const double na = static_cast<double>(a.size()), nb = static_cast<double>(b.size());
  const double se2 = va / na + vb / nb;
  WelchResult r;
  if (se2 == 0) {
    r.t = ma == mb ? 0.0 : std::copysign(INFINITY, ma - mb);
    r.df = na + nb - 2;
    r.p_value = ma == mb ? 1.0 : 0.0;
    return r;
  }
  r.t = (ma - mb) / std::sqrt(se2);
  r.df = se2 * se2 / ((va / na) * (va / na) / (na - 1) + (vb / nb) * (vb / nb) / (nb - 1));
  const boost::math::students_t dist(r.df);
  r.p_value = 2.0 * boost::math::cdf(boost::math::complement(dist, std::abs(r.t)));
  return r;
}

}  // namespace rldif::bench
