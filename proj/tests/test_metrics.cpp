#include <cmath>
#include <numbers>

#include "doctest.h"
#include "rldif/metrics.hpp"
#include "test_util.hpp"

using namespace rldif;
using namespace rldif::metrics;
using rldif::testing::moved;
using rldif::testing::random_sequence;
using rldif::testing::RigidMotion;
using rldif::testing::TempDir;

namespace {

Sequence seq(const char* text) { return Sequence::from_text(text); }

std::vector<Sequence> random_designs(size_t m, size_t n, Rng& rng, int alphabet) {
  std::vector<Sequence> out;
  for (size_t j = 0; j < m; ++j) {
    std::vector<int> s(n);
    for (auto& x : s) x = rng.uniform_int(0, alphabet - 1);
    out.emplace_back(std::move(s));
  }
  return out;
}

// Pair enumeration with explicit position counting.
double pair_oracle(const std::vector<Sequence>& d, const std::vector<double>* tm, double tm_min) {
  double total = 0;
  long pairs = 0;
  for (size_t j = 0; j < d.size(); ++j)
    for (size_t k = 0; k < d.size(); ++k) {
      if (j >= k) continue;
      ++pairs;
      if (tm && !((*tm)[j] > tm_min && (*tm)[k] > tm_min)) continue;
      long diff = 0;
      for (size_t i = 0; i < d[j].size(); ++i) diff += d[j][i] != d[k][i];
      total += static_cast<double>(diff) / static_cast<double>(d[j].size());
    }
  return total / static_cast<double>(pairs);
}

std::vector<Vec3> random_cloud(size_t n, Rng& rng) {
  std::vector<Vec3> p;
  for (size_t i = 0; i < n; ++i) p.push_back({10 * rng.uniform(), 10 * rng.uniform(), 10 * rng.uniform()});
  return p;
}

double rmsd_after(std::span<const Vec3> p, std::span<const Vec3> q, const RigidMotion& m) {
  double s = 0;
  for (size_t i = 0; i < p.size(); ++i) {
    const double d = distance(m.apply(p[i]), q[i]);
    s += d * d;
  }
  return std::sqrt(s / static_cast<double>(p.size()));
}

}  // namespace

TEST_CASE("sequence recovery") {
  CHECK(sequence_recovery(seq("ACDE"), seq("ACDE")) == 1.0);
  CHECK(sequence_recovery(seq("ACDE"), seq("ACDF")) == 0.75);
  CHECK_THROWS_AS(sequence_recovery(seq("ACD"), seq("ACDF")), LengthMismatch);
  Rng rng(1);
  for (int trial = 0; trial < 50; ++trial) {
    const size_t n = static_cast<size_t>(rng.uniform_int(1, 50));
    const auto d = random_designs(2, n, rng, 3);
    long same = 0;
    for (size_t i = 0; i < n; ++i) same += d[0][i] == d[1][i];
    CHECK(sequence_recovery(d[0], d[1]) == static_cast<double>(same) / static_cast<double>(n));
  }
}

TEST_CASE("sequence diversity") {
  CHECK(sequence_diversity(std::vector{seq("ACD"), seq("ACD"), seq("ACD")}) == 0.0);
  CHECK(sequence_diversity(std::vector{seq("ACD"), seq("EFG")}) == 1.0);
  CHECK(sequence_diversity(std::vector{seq("AAA"), seq("AAC"), seq("ACC")}) == doctest::Approx(4.0 / 9.0).epsilon(1e-15));
  CHECK_THROWS_AS(sequence_diversity(std::vector{seq("ACD")}), SingletonSet);
  CHECK_THROWS_AS(sequence_diversity(std::vector{seq("ACD"), seq("AC")}), LengthMismatch);
}

TEST_CASE("foldable diversity hand cases") {
  const std::vector d{seq("ACD"), seq("ACA"), seq("AAA")};
  CHECK(foldable_diversity(d, std::vector{0.9, 0.8, 0.2}, 0.7) == doctest::Approx(1.0 / 9.0).epsilon(1e-15));
  CHECK(foldable_diversity(d, std::vector{0.7, 0.5, 0.2}, 0.7) == 0.0);
  CHECK(foldable_diversity(d, std::vector{0.71, 0.9, 0.95}, 0.7) == sequence_diversity(d));
  CHECK_THROWS_AS(foldable_diversity(d, std::vector{0.9, 0.8}, 0.7), LengthMismatch);
  DesignSet set{"x", seq("ACD"), d, {0.9, 0.8, 1.2}};
  CHECK_THROWS_AS(set.validate(), InvalidArgument);
  CHECK_THROWS_AS(FDConfig{1.5}.validate(), InvalidArgument);
}

TEST_CASE("diversity metrics equal brute-force enumeration on random sets") {
  Rng rng(2);
  for (int trial = 0; trial < 300; ++trial) {
    const size_t m = static_cast<size_t>(rng.uniform_int(2, 6));
    const size_t n = static_cast<size_t>(rng.uniform_int(1, 50));
    const auto d = random_designs(m, n, rng, rng.uniform_int(2, 20));
    std::vector<double> tm(m);
    for (auto& x : tm) x = rng.uniform();
    const double tm_min = rng.uniform();
    const double div = sequence_diversity(d), fd = foldable_diversity(d, tm, tm_min);
    CHECK(div == pair_oracle(d, nullptr, 0));
    CHECK(fd == pair_oracle(d, &tm, tm_min));
    CHECK(fd <= div);
    CHECK(foldable_diversity(d, tm, 0.0) <= div);
    CHECK(foldable_diversity(d, tm, 1.0) == 0.0);
    double prev = foldable_diversity(d, tm, 0.0);
    for (double thr = 0.05; thr <= 1.0; thr += 0.05) {
      const double cur = foldable_diversity(d, tm, thr);
      CHECK(cur <= prev);
      prev = cur;
    }
    auto pd = d;
    auto ptm = tm;
    std::swap(pd.front(), pd.back());
    std::swap(ptm.front(), ptm.back());
    CHECK(std::abs(foldable_diversity(pd, ptm, tm_min) - fd) < 1e-15);
    CHECK(std::abs(sequence_diversity(pd) - div) < 1e-15);
  }
}

TEST_CASE("foldable diversity at threshold 0 equals diversity when every sc-TM is positive") {
  Rng rng(3);
  const auto d = random_designs(5, 20, rng, 4);
  const std::vector<double> tm{0.1, 0.3, 0.9, 0.5, 0.01};
  CHECK(foldable_diversity(d, tm, 0.0) == sequence_diversity(d));
}

TEST_CASE("kabsch") {
  Rng rng(4);
  const auto p = random_cloud(20, rng);
  const Superposition self = kabsch(p, p);
  CHECK(self.rmsd < 1e-12);
  CHECK((self.rotation - Eigen::Matrix3d::Identity()).norm() < 1e-9);

  const RigidMotion quarter_turn{{0, 0, 1}, std::numbers::pi / 2, {1.5, -2, 3}};
  CHECK(kabsch(p, moved(p, quarter_turn)).rmsd < 1e-9);
  for (int trial = 0; trial < 5; ++trial) {
    const auto q = moved(p, RigidMotion::random(rng));
    CHECK(kabsch(p, q).rmsd < 1e-9);
  }

  auto noisy = moved(p, RigidMotion::random(rng));
  for (auto& x : noisy) x = x + Vec3{rng.normal(), rng.normal(), rng.normal()};
  const double best = kabsch(p, noisy).rmsd;
  for (int trial = 0; trial < 1000; ++trial) CHECK(best <= rmsd_after(p, noisy, RigidMotion::random(rng)) + 1e-12);

  std::vector<Vec3> line;
  for (int i = 0; i < 5; ++i) line.push_back({1.0 * i, 2.0 * i, 0});
  CHECK_THROWS_AS(kabsch(line, line), DegeneratePointSet);
  CHECK_THROWS_AS(kabsch(std::span(p).first(2), std::span(p).first(2)), TooShort);
}

TEST_CASE("TM-score") {
  CHECK(tm_d0(100) == doctest::Approx(1.24 * std::cbrt(85.0) - 1.8).epsilon(1e-15));
  CHECK(std::abs(tm_d0(100) - 3.652) < 5e-4);
  CHECK(tm_d0(10) == 0.5);

  Rng rng(5);
  const Sequence s = random_sequence(60, rng);
  const auto a = fold::toy_ca_trace(s);
  CHECK(tm_score(a, a) == 1.0);
  const auto b = fold::toy_ca_trace(random_sequence(60, rng));
  const double ab = tm_score(a, b);
  CHECK(ab > 0);
  CHECK(ab < 1);
  CHECK(std::abs(tm_score(b, a) - ab) < 1e-6);
  for (int trial = 0; trial < 3; ++trial) {
    CHECK(std::abs(tm_score(moved(a, RigidMotion::random(rng)), b) - ab) < 1e-9);
    CHECK(std::abs(tm_score(a, moved(b, RigidMotion::random(rng))) - ab) < 1e-9);
    CHECK(tm_score(a, moved(a, RigidMotion::random(rng))) == doctest::Approx(1.0).epsilon(1e-12));
  }
  CHECK_THROWS_AS(tm_score(std::span(a).first(10), std::span(b).first(11)), LengthMismatch);
  CHECK_THROWS_AS(tm_score(std::span(a).first(2), std::span(b).first(2)), TooShort);
}

TEST_CASE("sc-TM composes folding and TM-score") {
  TempDir dir;
  fold::ToyFolder toy;
  fold::FoldCache cache(dir.path(), toy);
  Rng rng(6);
  const Sequence ref = random_sequence(40, rng);
  CHECK(sc_tm(ref, ref, cache) == 1.0);
  for (int trial = 0; trial < 4; ++trial) {
    const Sequence d = random_sequence(40, rng);
    const double expected = tm_score(fold::toy_ca_trace(d), fold::toy_ca_trace(ref));
    CHECK(sc_tm(d, ref, cache) == expected);
    CHECK(sc_tm(d, ref, cache) == expected);
  }
  CHECK_THROWS_AS(sc_tm(random_sequence(39, rng), ref, cache), LengthMismatch);
}
