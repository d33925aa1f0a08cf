// Readers for PDB fixed-column files and the chain-set JSONL dataset format.

#ifndef RLDIF_STRUCTIO_HPP_
#define RLDIF_STRUCTIO_HPP_

#include <array>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "rldif/core.hpp"

namespace rldif {

RLDIF_DEFINE_ERROR(MissingBackboneAtom);
RLDIF_DEFINE_ERROR(UnknownResidue);
RLDIF_DEFINE_ERROR(EmptyChain);
RLDIF_DEFINE_ERROR(MalformedLine);
RLDIF_DEFINE_ERROR(SplitNameNotFound);
RLDIF_DEFINE_ERROR(IoError);

struct PdbChain {
  Sequence sequence;
  Backbone backbone;
};

// Parses ATOM records of one chain (the first chain seen when `chain` is empty).
// Only the first MODEL is read.
PdbChain parse_pdb(std::string_view content, std::optional<char> chain = std::nullopt);
PdbChain read_pdb_file(const std::filesystem::path& path, std::optional<char> chain = std::nullopt);

// One line of chain_set.jsonl. Coordinates use NaN for missing atoms.
struct ChainRecord {
  std::string name;
  std::string seq;
  std::array<std::vector<Vec3>, kBackboneAtoms> coords;  // N, CA, C, O
};

// Throws MalformedLine (without line context) on schema violations.
ChainRecord parse_chain_record(std::string_view json_line);
std::string format_chain_record(const ChainRecord& record);
ChainRecord to_chain_record(const std::string& name, const Sequence& seq, const Backbone& bb);

struct ChainSet {
  std::vector<DatasetEntry> entries;
  size_t skipped = 0;
  std::vector<std::string> warnings;

  std::vector<const DatasetEntry*> split(Split s) const;
};

ChainSet load_chain_set(const std::filesystem::path& jsonl_path,
                        const std::filesystem::path& splits_path);

std::string read_text_file(const std::filesystem::path& path);

}  // namespace rldif

#endif  // RLDIF_STRUCTIO_HPP_
