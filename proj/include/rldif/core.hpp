// Domain types shared across the library: amino-acid alphabet, sequences,
// backbones and categorical distributions.

#ifndef RLDIF_CORE_HPP_
#define RLDIF_CORE_HPP_

#include <array>
#include <cmath>
#include <cstdint>
#include <random>
#include <utility>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace rldif {

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

#define RLDIF_DEFINE_ERROR(Name)      \
  struct Name : Error {               \
    using Error::Error;               \
  }

RLDIF_DEFINE_ERROR(InvalidResidue);
RLDIF_DEFINE_ERROR(LengthMismatch);
RLDIF_DEFINE_ERROR(InvalidArgument);

inline constexpr int kNumAminoAcids = 20;
inline constexpr std::string_view kAlphabet = "ACDEFGHIKLMNPQRSTVWY";

// Index of a one-letter code in kAlphabet, or -1.
constexpr int residue_index(char c) {
  for (int i = 0; i < kNumAminoAcids; ++i)
    if (kAlphabet[i] == c) return i;
  return -1;
}

constexpr char residue_symbol(int index) { return kAlphabet.at(static_cast<size_t>(index)); }

// Maps a three-letter residue name (ALA, GLY, ...) to its alphabet index, -1 if unknown.
int residue_index_from_three_letter(std::string_view name);

class Sequence {
 public:
  Sequence() = default;
  explicit Sequence(std::vector<int> residues);

  static Sequence from_text(std::string_view text);
  std::string to_text() const;

  size_t size() const { return residues_.size(); }
  int operator[](size_t i) const { return residues_[i]; }
  const std::vector<int>& residues() const { return residues_; }

  // Row-major N x 20 one-hot matrix.
  std::vector<double> one_hot() const;

  friend bool operator==(const Sequence&, const Sequence&) = default;

 private:
  std::vector<int> residues_;
};

inline Sequence encode_sequence(std::string_view text) { return Sequence::from_text(text); }
inline std::string decode_sequence(const Sequence& s) { return s.to_text(); }

struct Vec3 {
  double x = 0, y = 0, z = 0;

  constexpr Vec3 operator+(const Vec3& o) const { return {x + o.x, y + o.y, z + o.z}; }
  constexpr Vec3 operator-(const Vec3& o) const { return {x - o.x, y - o.y, z - o.z}; }
  constexpr Vec3 operator*(double s) const { return {x * s, y * s, z * s}; }
  constexpr Vec3 operator-() const { return {-x, -y, -z}; }
  constexpr double operator[](int i) const { return i == 0 ? x : (i == 1 ? y : z); }
  friend bool operator==(const Vec3&, const Vec3&) = default;
};

constexpr double dot(const Vec3& a, const Vec3& b) { return a.x * b.x + a.y * b.y + a.z * b.z; }
constexpr Vec3 cross(const Vec3& a, const Vec3& b) {
  return {a.y * b.z - a.z * b.y, a.z * b.x - a.x * b.z, a.x * b.y - a.y * b.x};
}
inline double norm(const Vec3& a) { return std::sqrt(dot(a, a)); }
inline double distance(const Vec3& a, const Vec3& b) { return norm(a - b); }
inline Vec3 normalized(const Vec3& a) { return a * (1.0 / norm(a)); }
inline bool is_finite(const Vec3& a) {
  return std::isfinite(a.x) && std::isfinite(a.y) && std::isfinite(a.z);
}

enum class BackboneAtom : int { N = 0, CA = 1, C = 2, O = 3 };
inline constexpr int kBackboneAtoms = 4;

struct Residue {
  std::array<Vec3, kBackboneAtoms> atoms;
  int number = 0;
  char insertion_code = ' ';

  const Vec3& atom(BackboneAtom a) const { return atoms[static_cast<int>(a)]; }
  const Vec3& ca() const { return atom(BackboneAtom::CA); }
};

struct Backbone {
  std::string chain_id;
  std::vector<Residue> residues;

  size_t size() const { return residues.size(); }
  std::vector<Vec3> ca_trace() const;
  bool all_finite() const;
};

// Rows of per-residue probability vectors over the 20 amino acids.
class CategoricalDist {
 public:
  CategoricalDist() = default;
  CategoricalDist(size_t rows, std::vector<double> probs);

  size_t rows() const { return rows_; }
  std::span<const double> row(size_t i) const {
    return {probs_.data() + i * kNumAminoAcids, static_cast<size_t>(kNumAminoAcids)};
  }
  double at(size_t i, int a) const { return probs_[i * kNumAminoAcids + static_cast<size_t>(a)]; }
  const std::vector<double>& values() const { return probs_; }

 private:
  size_t rows_ = 0;
  std::vector<double> probs_;
};

// splitmix64 finalizer; also used to derive independent seeds.
constexpr uint64_t splitmix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

constexpr uint64_t derive_seed(uint64_t seed, uint64_t a, uint64_t b = 0, uint64_t c = 0) {
  return splitmix64(splitmix64(splitmix64(seed ^ splitmix64(a)) ^ b) ^ c);
}

// 64-bit Mersenne Twister with portable real/categorical draws.
class Rng {
 public:
  explicit Rng(uint64_t seed) : engine_(seed) {}

  uint64_t next() { return engine_(); }
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
  // Uniform integer in [lo, hi].
  int uniform_int(int lo, int hi);
  // Index drawn from nonnegative weights (need not be normalized).
  int categorical(std::span<const double> weights);
  double normal();

  template <typename It>
  void shuffle(It first, It last) {
    for (auto n = last - first; n > 1; --n) {
      auto j = static_cast<decltype(n)>(next() % static_cast<uint64_t>(n));
      std::swap(first[n - 1], first[j]);
    }
  }

 private:
  std::mt19937_64 engine_;
};

enum class Split { Train, Validation, Test };
std::string_view split_name(Split s);

struct DatasetEntry {
  std::string id;
  Sequence sequence;
  Backbone backbone;
  Split split = Split::Train;
};

}  // namespace rldif

#endif  // RLDIF_CORE_HPP_
