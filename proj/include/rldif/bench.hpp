// Evaluation harness: per-structure design metrics, dataset aggregates,
// TM_min sweeps, cross-split overlap and report writers.

#ifndef RLDIF_BENCH_HPP_
#define RLDIF_BENCH_HPP_

#include <filesystem>
#include <functional>
#include <iosfwd>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "rldif/core.hpp"
#include "rldif/denoiser.hpp"
#include "rldif/folding.hpp"

namespace rldif::bench {

RLDIF_DEFINE_ERROR(MissingDesigns);
RLDIF_DEFINE_ERROR(ExternalCommandFailed);

struct FastaRecord {
  std::string header;
  std::string sequence;
};
std::vector<FastaRecord> parse_fasta(std::string_view text);
void write_fasta(std::ostream& out, std::span<const FastaRecord> records);
std::string design_header(const std::string& structure_id, int index);  // "<id>_sample<index>"

// Designs grouped by structure id from one FASTA file or every *.fa/*.fasta
// file in a directory, keyed by the "<id>_sample<n>" header convention.
std::map<std::string, std::vector<Sequence>> load_design_fasta(const std::filesystem::path& path);

struct EvalRow {
  std::string id;
  int n_designs = 0;
  double mean_recovery = 0;
  double mean_sctm = 0;
  double foldable_diversity = 0;
  double diversity = 0;
  std::vector<Sequence> designs;
  std::vector<double> sc_tm;
};

struct EvalAggregate {
  size_t structures = 0;
  double mean_recovery = 0;
  double mean_sctm = 0;
  double foldable_diversity = 0;
  double diversity = 0;
};

struct EvalReport {
  std::vector<EvalRow> rows;
  EvalAggregate aggregate;
  double tm_min = 0.7;
  std::string dataset_digest;
};

// Produces M designs for a structure.
using DesignSource = std::function<std::vector<Sequence>(const DatasetEntry& entry, int m)>;

// Samples from a denoiser; each structure draws from its own seed so results
// do not depend on evaluation order.
DesignSource model_designs(const ad::ParamSet& params, const DenoiserConfig& config, uint64_t seed);
// Reads pre-computed designs; MissingDesigns if an id has fewer than M.
DesignSource external_designs(std::map<std::string, std::vector<Sequence>> designs);

EvalRow evaluate_structure(const DatasetEntry& entry, std::vector<Sequence> designs, fold::FoldCache& cache,
                           double tm_min);

EvalAggregate aggregate_rows(std::span<const EvalRow> rows);

EvalReport evaluate_dataset(std::span<const DatasetEntry> dataset, const DesignSource& source, fold::FoldCache& cache,
                            int m = 4, double tm_min = 0.7);

std::string dataset_digest(std::span<const DatasetEntry> dataset);

void write_eval_csv(std::ostream& out, const EvalReport& report);
void write_designs_csv(std::ostream& out, std::span<const EvalRow> rows);
std::vector<EvalRow> read_designs_csv(std::istream& in);
std::string summary_table(const EvalReport& report, const std::string& label = "model");

struct SweepRow {
  double tm_min = 0;
  double foldable_diversity = 0;
};
// Dataset-mean foldable diversity at each threshold from stored sc-TMs.
std::vector<SweepRow> tmmin_sweep(std::span<const EvalRow> rows, std::span<const double> thresholds);
void write_sweep_csv(std::ostream& out, std::span<const SweepRow> rows);

// Global alignment maximizing matches (mismatch and gap score 0), then the
// number of aligned columns; identity = matches / alignment length.
double alignment_identity(std::string_view a, std::string_view b);

struct NamedSequence {
  std::string id;
  std::string sequence;
};

struct OverlapFlag {
  std::string id;
  double best_identity = 0;
  std::string best_reference;
  bool sequence_hit = false;
  bool structure_hit = false;
  bool flagged() const { return sequence_hit || structure_hit; }
};

struct OverlapResult {
  double threshold = 0.3;
  double overlap = 0;
  std::vector<OverlapFlag> flags;
  std::optional<std::string> structure_arm_error;
};

// `structure_command` runs through the shell with {queries} and {references}
// replaced by FASTA paths and prints flagged query ids one per line.
OverlapResult cross_split_overlap(std::span<const NamedSequence> queries, std::span<const NamedSequence> references,
                                  double threshold = 0.3,
                                  const std::optional<std::string>& structure_command = std::nullopt);
void write_overlap_csv(std::ostream& out, const OverlapResult& result);

struct WelchResult {
  double t = 0;
  double df = 0;
  double p_value = 1;
};
// Two-sided Welch's unequal-variance t-test.
WelchResult welch_t_test(std::span<const double> a, std::span<const double> b);

}  // namespace rldif::bench

#endif  // RLDIF_BENCH_HPP_
