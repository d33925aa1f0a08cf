#include <map>

#include "doctest.h"
#include "rldif/core.hpp"

using namespace rldif;

TEST_CASE("alphabet round trip") {
  const Sequence s = encode_sequence("ACDEFGHIKLMNPQRSTVWY");
  for (int i = 0; i < kNumAminoAcids; ++i) CHECK(s[static_cast<size_t>(i)] == i);
  CHECK(decode_sequence(s) == "ACDEFGHIKLMNPQRSTVWY");
  CHECK(decode_sequence(encode_sequence("ACD")) == "ACD");
  CHECK(encode_sequence(decode_sequence(Sequence({3, 1, 4, 1, 5}))) == Sequence({3, 1, 4, 1, 5}));
}

TEST_CASE("invalid residues and empty sequences are rejected") {
  CHECK_THROWS_AS(encode_sequence("AXA"), InvalidResidue);
  CHECK_THROWS_AS(encode_sequence("acd"), InvalidResidue);
  CHECK_THROWS_AS(Sequence({0, 20}), InvalidResidue);
  CHECK_THROWS_AS(encode_sequence(""), InvalidArgument);
}

TEST_CASE("three letter codes") {
  CHECK(residue_index_from_three_letter("ALA") == 0);
  CHECK(residue_index_from_three_letter("TYR") == 19);
  CHECK(residue_index_from_three_letter("HOH") == -1);
}

TEST_CASE("one-hot has a single 1 per row") {
  Rng rng(3);
  std::vector<int> r(37);
  for (auto& x : r) x = rng.uniform_int(0, 19);
  const auto oh = Sequence(r).one_hot();
  REQUIRE(oh.size() == 37 * 20);
  for (size_t i = 0; i < 37; ++i) {
    double sum = 0;
    for (int a = 0; a < 20; ++a) {
      const double v = oh[i * 20 + a];
      CHECK((v == 0.0 || v == 1.0));
      sum += v;
    }
    CHECK(sum == 1.0);
    CHECK(oh[i * 20 + r[i]] == 1.0);
  }
}

TEST_CASE("categorical distributions validate rows") {
  std::vector<double> p(40, 0.05);
  CHECK(CategoricalDist(2, p).at(1, 3) == 0.05);
  p[0] = 0.5;
  CHECK_THROWS_AS(CategoricalDist(2, p), InvalidArgument);
  CHECK_THROWS_AS(CategoricalDist(3, std::vector<double>(40, 0.05)), LengthMismatch);
}

TEST_CASE("rng is reproducible and categorical draws follow weights") {
  Rng a(42), b(42);
  for (int i = 0; i < 100; ++i) CHECK(a.next() == b.next());
  Rng rng(5);
  const std::vector<double> w{1, 0, 3};
  std::map<int, int> counts;
  const int n = 40000;
  for (int i = 0; i < n; ++i) ++counts[rng.categorical(w)];
  CHECK(counts[1] == 0);
  const double p = counts[2] / static_cast<double>(n);
  CHECK(std::abs(p - 0.75) < 4 * std::sqrt(0.75 * 0.25 / n));
  CHECK_THROWS_AS(rng.categorical(std::vector<double>{0, 0}), InvalidArgument);
}

TEST_CASE("derived seeds differ by stream") {
  CHECK(derive_seed(1, 2) != derive_seed(1, 3));
  CHECK(derive_seed(1, 2, 0) != derive_seed(1, 2, 1));
  CHECK(derive_seed(9, 9, 9) == derive_seed(9, 9, 9));
}
