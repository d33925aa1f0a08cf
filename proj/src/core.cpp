#include "rldif/core.hpp"

#include <algorithm>
#include <utility>

namespace rldif {

namespace {

struct ThreeLetter {
  std::string_view name;
  char code;
};

constexpr std::array<ThreeLetter, 20> kThreeLetter{{
    {"ALA", 'A'}, {"CYS", 'C'}, {"ASP", 'D'}, {"GLU", 'E'}, {"PHE", 'F'},
    {"GLY", 'G'}, {"HIS", 'H'}, {"ILE", 'I'}, {"LYS", 'K'}, {"LEU", 'L'},
    {"MET", 'M'}, {"ASN", 'N'}, {"PRO", 'P'}, {"GLN", 'Q'}, {"ARG", 'R'},
    {"SER", 'S'}, {"THR", 'T'}, {"VAL", 'V'}, {"TRP", 'W'}, {"TYR", 'Y'},
}};

}  // namespace

int residue_index_from_three_letter(std::string_view name) {
  for (const auto& entry : kThreeLetter)
    if (entry.name == name) return residue_index(entry.code);
  return -1;
}

Sequence::Sequence(std::vector<int> residues) : residues_(std::move(residues)) {
  if (residues_.empty()) throw InvalidArgument("sequence must be nonempty");
  for (int r : residues_)
    if (r < 0 || r >= kNumAminoAcids)
      throw InvalidResidue("residue index out of range: " + std::to_string(r));
}

Sequence Sequence::from_text(std::string_view text) {
  if (text.empty()) throw InvalidArgument("sequence text must be nonempty");
  std::vector<int> out;
  out.reserve(text.size());
  for (size_t i = 0; i < text.size(); ++i) {
    int idx = residue_index(text[i]);
    if (idx < 0)
      throw InvalidResidue("invalid residue '" + std::string(1, text[i]) + "' at position " +
                           std::to_string(i));
    out.push_back(idx);
  }
  return Sequence(std::move(out));
}

std::string Sequence::to_text() const {
  std::string s;
  s.reserve(residues_.size());
  for (int r : residues_) s.push_back(residue_symbol(r));
  return s;
}

std::vector<double> Sequence::one_hot() const {
  std::vector<double> m(residues_.size() * kNumAminoAcids, 0.0);
  for (size_t i = 0; i < residues_.size(); ++i)
    m[i * kNumAminoAcids + static_cast<size_t>(residues_[i])] = 1.0;
  return m;
}

std::vector<Vec3> Backbone::ca_trace() const {
  std::vector<Vec3> out;
  out.reserve(residues.size());
  for (const auto& r : residues) out.push_back(r.ca());
  return out;
}

bool Backbone::all_finite() const {
  return std::all_of(residues.begin(), residues.end(), [](const Residue& r) {
    return std::all_of(r.atoms.begin(), r.atoms.end(), [](const Vec3& v) { return is_finite(v); });
  });
}

CategoricalDist::CategoricalDist(size_t rows, std::vector<double> probs)
    : rows_(rows), probs_(std::move(probs)) {
  if (probs_.size() != rows_ * kNumAminoAcids)
    throw LengthMismatch("categorical distribution needs rows*20 probabilities");
  for (size_t i = 0; i < rows_; ++i) {
    double sum = 0;
    for (double p : row(i)) {
      if (!(p >= 0.0)) throw InvalidArgument("negative or NaN probability");
      sum += p;
    }
    if (std::abs(sum - 1.0) > 1e-9)
      throw InvalidArgument("probability row " + std::to_string(i) + " sums to " + std::to_string(sum));
  }
}

int Rng::uniform_int(int lo, int hi) {
  if (hi < lo) throw InvalidArgument("empty integer range");
  const auto span = static_cast<uint64_t>(hi - lo) + 1;
  return lo + static_cast<int>(next() % span);
}

int Rng::categorical(std::span<const double> weights) {
  double total = 0;
  for (double w : weights) total += w;
  if (!(total > 0)) throw InvalidArgument("categorical weights sum to zero");
  const double u = uniform() * total;
  double acc = 0;
  for (size_t i = 0; i < weights.size(); ++i) {
    acc += weights[i];
    if (u < acc) return static_cast<int>(i);
  }
  // u landed in rounding slack at the top; return the last positive weight.
  for (size_t i = weights.size(); i-- > 0;)
    if (weights[i] > 0) return static_cast<int>(i);
  return static_cast<int>(weights.size()) - 1;
}

double Rng::normal() {
  // Box-Muller on two portable uniforms.
  double u1 = uniform();
  while (u1 <= 0.0) u1 = uniform();
  const double u2 = uniform();
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * 3.14159265358979323846 * u2);
}

std::string_view split_name(Split s) {
  switch (s) {
    case Split::Train: return "train";
    case Split::Validation: return "validation";
    case Split::Test: return "test";
  }
  return "unknown";
}

}  // namespace rldif
