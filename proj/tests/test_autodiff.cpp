#include <cmath>
#include <fstream>

#include "doctest.h"
#include "rldif/autodiff.hpp"
#include "rldif/kernels.hpp"
#include "test_util.hpp"

using namespace rldif;
using namespace rldif::ad;
using rldif::testing::grad_check;
using rldif::testing::random_tensor;
using rldif::testing::TempDir;

namespace {

// sum(x * W) with fixed pseudo-random weights so every entry's gradient differs.
Var weighted(Tape& t, Var x, uint64_t seed = 99) {
  Rng rng(seed);
  return sum(mul(x, t.constant(random_tensor(x.rows(), x.cols(), rng))));
}

constexpr double kTol = 1e-5;

}  // namespace

TEST_CASE("softmax of equal logits is uniform") {
  Tape t;
  const Var p = softmax(t.constant(Tensor(3, 20, 1.7)));
  for (size_t i = 0; i < p.value().size(); ++i) CHECK(p.value()[i] == doctest::Approx(0.05).epsilon(1e-15));
}

TEST_CASE("layer norm leaves a standardized row unchanged") {
  Tape t;
  const Tensor x(1, 4, {-1.5, -0.5, 0.5, 1.5});
  const double sd = std::sqrt(1.25);
  Tensor z(1, 4);
  for (size_t i = 0; i < 4; ++i) z[i] = x[i] / sd;
  const Var y = layer_norm(t.constant(z), t.constant(Tensor(1, 4, 1.0)), t.constant(Tensor(1, 4, 0.0)), 0.0);
  for (size_t i = 0; i < 4; ++i) CHECK(std::abs(y.value()[i] - z[i]) < 1e-12);
}

TEST_CASE("matmul matches a triple loop") {
  Rng rng(1);
  const Tensor a = random_tensor(17, 33, rng), b = random_tensor(33, 9, rng);
  Tape t;
  const Tensor& c = matmul(t.constant(a), t.constant(b)).value();
  for (size_t i = 0; i < 17; ++i)
    for (size_t j = 0; j < 9; ++j) {
      double s = 0;
      for (size_t k = 0; k < 33; ++k) s += a(i, k) * b(k, j);
      CHECK(std::abs(c(i, j) - s) < 1e-12);
    }
}

TEST_CASE("square has gradient 2x") {
  Tape t;
  const Var x = t.leaf(Tensor::scalar(3.0));
  t.backward(sum(mul(x, x)));
  CHECK(x.grad()[0] == 6.0);
}

TEST_CASE("cross-entropy gradient is probabilities minus one-hot") {
  Rng rng(2);
  Tape t;
  const Var logits = t.leaf(random_tensor(1, 20, rng));
  t.backward(cross_entropy(logits, std::vector<int>{7}));
  const Tensor p = softmax(t.constant(logits.value())).value();
  for (int c = 0; c < 20; ++c) CHECK(std::abs(logits.grad()[c] - (p[c] - (c == 7))) < 1e-12);
}

TEST_CASE("shared subexpressions accumulate gradients") {
  Rng rng(3);
  const Tensor x0 = random_tensor(2, 3, rng);
  Tape a;
  const Var x = a.leaf(x0);
  const Var h = relu(scale(x, 2.0));
  a.backward(sum(add(mul(h, h), h)));
  // Same function with the shared node built twice.
  Tape b;
  const Var y = b.leaf(x0);
  b.backward(sum(add(mul(relu(scale(y, 2.0)), relu(scale(y, 2.0))), relu(scale(y, 2.0)))));
  for (size_t i = 0; i < x0.size(); ++i) CHECK(std::abs(x.grad()[i] - y.grad()[i]) < 1e-14);
}

TEST_CASE("every op passes a central-difference check") {
  Rng rng(4);
  const Tensor a = random_tensor(3, 4, rng), b = random_tensor(3, 4, rng), c = random_tensor(4, 5, rng);
  const Tensor bias = random_tensor(1, 4, rng);
  const Tensor pos = [&] {
    Tensor p = random_tensor(3, 4, rng);
    for (size_t i = 0; i < p.size(); ++i) p[i] = 0.5 + std::abs(p[i]);
    return p;
  }();

  SUBCASE("matmul") {
    CHECK(grad_check([](Tape& t, const std::vector<Var>& v) { return weighted(t, matmul(v[0], v[1])); }, {a, c}) < kTol);
  }
  SUBCASE("add sub mul") {
    CHECK(grad_check([](Tape& t, const std::vector<Var>& v) { return weighted(t, add(v[0], v[1])); }, {a, b}) < kTol);
    CHECK(grad_check([](Tape& t, const std::vector<Var>& v) { return weighted(t, sub(v[0], v[1])); }, {a, b}) < kTol);
    CHECK(grad_check([](Tape& t, const std::vector<Var>& v) { return weighted(t, mul(v[0], v[1])); }, {a, b}) < kTol);
  }
  SUBCASE("bias scale shift") {
    CHECK(grad_check([](Tape& t, const std::vector<Var>& v) { return weighted(t, add_bias(v[0], v[1])); },
                     {a, bias}) < kTol);
    CHECK(grad_check([](Tape& t, const std::vector<Var>& v) { return weighted(t, scale(v[0], -1.7)); }, {a}) < kTol);
    CHECK(grad_check([](Tape& t, const std::vector<Var>& v) { return weighted(t, add_scalar(v[0], 0.3)); }, {a}) < kTol);
  }
  SUBCASE("concat and slice") {
    CHECK(grad_check([](Tape& t, const std::vector<Var>& v) { return weighted(t, concat_cols({v[0], v[1]})); },
                     {a, b}) < kTol);
    CHECK(grad_check([](Tape& t, const std::vector<Var>& v) { return weighted(t, concat_rows({v[0], v[1]})); },
                     {a, b}) < kTol);
    CHECK(grad_check([](Tape& t, const std::vector<Var>& v) { return weighted(t, slice_cols(v[0], 1, 3)); }, {a}) < kTol);
    CHECK(grad_check([](Tape& t, const std::vector<Var>& v) { return weighted(t, slice_rows(v[0], 1, 3)); }, {a}) < kTol);
  }
  SUBCASE("nonlinearities") {
    CHECK(grad_check([](Tape& t, const std::vector<Var>& v) { return weighted(t, relu(v[0])); }, {a}) < kTol);
    CHECK(grad_check([](Tape& t, const std::vector<Var>& v) { return weighted(t, gelu(v[0])); }, {a}) < kTol);
    CHECK(grad_check([](Tape& t, const std::vector<Var>& v) { return weighted(t, exp(v[0])); }, {a}) < kTol);
    CHECK(grad_check([](Tape& t, const std::vector<Var>& v) { return weighted(t, log(v[0])); }, {pos}) < kTol);
  }
  SUBCASE("normalizations") {
    const Tensor g = random_tensor(1, 4, rng), beta = random_tensor(1, 4, rng);
    CHECK(grad_check([](Tape& t, const std::vector<Var>& v) { return weighted(t, layer_norm(v[0], v[1], v[2])); },
                     {a, g, beta}) < kTol);
    CHECK(grad_check([](Tape& t, const std::vector<Var>& v) { return weighted(t, softmax(v[0])); }, {a}) < kTol);
    CHECK(grad_check([](Tape& t, const std::vector<Var>& v) { return weighted(t, row_normalize(v[0])); }, {pos}) < kTol);
  }
  SUBCASE("reductions and indexing") {
    CHECK(grad_check([](Tape&, const std::vector<Var>& v) { return scale(sum(mul(v[0], v[0])), 0.5); }, {a}) < kTol);
    CHECK(grad_check([](Tape&, const std::vector<Var>& v) { return mean(mul(v[0], v[0])); }, {a}) < kTol);
    CHECK(grad_check(
              [](Tape& t, const std::vector<Var>& v) { return weighted(t, segment_mean(v[0], {1, 0, 1}, 3)); }, {a}) <
          kTol);
    CHECK(grad_check(
              [](Tape& t, const std::vector<Var>& v) { return weighted(t, gather_rows(v[0], {2, 0, 2, 1, 2})); }, {a}) <
          kTol);
    CHECK(grad_check([](Tape& t, const std::vector<Var>& v) { return weighted(t, pick(v[0], {3, 0, 2})); }, {a}) < kTol);
  }
  SUBCASE("clamp and minimum away from kinks") {
    CHECK(grad_check([](Tape& t, const std::vector<Var>& v) { return weighted(t, clamp(v[0], -0.4, 0.45)); }, {a}) <
          kTol);
    CHECK(grad_check([](Tape& t, const std::vector<Var>& v) { return weighted(t, minimum(v[0], v[1])); }, {a, b}) < kTol);
  }
  SUBCASE("cross entropy") {
    Tensor target(3, 4, 0.0);
    target(0, 1) = 1;
    target(1, 0) = 0.25;
    target(1, 3) = 0.75;
    target(2, 2) = 1;
    CHECK(grad_check([&](Tape&, const std::vector<Var>& v) { return cross_entropy(v[0], target); }, {a}) < kTol);
    CHECK(grad_check([](Tape&, const std::vector<Var>& v) { return cross_entropy(v[0], std::vector<int>{1, 3, 0}); },
                     {a}) < kTol);
  }
}

TEST_CASE("two-layer gelu and layer-norm network passes a central-difference check") {
  Rng rng(5);
  const Tensor x = random_tensor(6, 5, rng), w1 = random_tensor(5, 8, rng), b1 = random_tensor(1, 8, rng);
  const Tensor g = random_tensor(1, 8, rng), beta = random_tensor(1, 8, rng), w2 = random_tensor(8, 3, rng);
  const auto net = [](Tape&, const std::vector<Var>& v) {
    const Var h = layer_norm(gelu(add_bias(matmul(v[0], v[1]), v[2])), v[3], v[4]);
    return cross_entropy(matmul(h, v[5]), std::vector<int>{0, 1, 2, 2, 1, 0});
  };
  CHECK(grad_check(net, {x, w1, b1, g, beta, w2}) < 1e-5);
}

TEST_CASE("shape errors and non-scalar losses") {
  Tape t;
  const Var a = t.leaf(Tensor(2, 3)), b = t.leaf(Tensor(2, 2));
  CHECK_THROWS_AS(matmul(a, b), ShapeMismatch);
  CHECK_THROWS_AS(add(a, b), ShapeMismatch);
  CHECK_THROWS_AS(t.backward(a), NonScalarLoss);
}

TEST_CASE("adam") {
  SUBCASE("zero gradient leaves parameters unchanged") {
    ParamSet p;
    p.add("w", Tensor(1, 3, {1.0, -2.0, 0.5}));
    AdamState s;
    adam_step(p, {Tensor(1, 3, 0.0)}, s, {.lr = 0.1});
    CHECK(p["w"] == Tensor(1, 3, {1.0, -2.0, 0.5}));
  }
  SUBCASE("first step moves by lr against the gradient sign") {
    ParamSet p;
    p.add("w", Tensor(1, 3, {1.0, -2.0, 0.5}));
    AdamState s;
    adam_step(p, {Tensor(1, 3, {3.0, -0.01, 100.0})}, s, {.lr = 0.1});
    CHECK(p["w"][0] == doctest::Approx(0.9).epsilon(1e-6));
    CHECK(p["w"][1] == doctest::Approx(-1.9).epsilon(1e-5));
    CHECK(p["w"][2] == doctest::Approx(0.4).epsilon(1e-6));
  }
  SUBCASE("converges on a quadratic") {
    ParamSet p;
    p.add("x", Tensor::scalar(0.0));
    AdamState s;
    for (int i = 0; i < 100; ++i) adam_step(p, {Tensor::scalar(2 * (p["x"][0] - 2))}, s, {.lr = 0.1});
    CHECK(std::abs(p["x"][0] - 2) < 0.1);
  }
}

TEST_CASE("checkpoints round trip bit for bit") {
  TempDir dir;
  Rng rng(6);
  ParamSet p;
  p.add("a.w", random_tensor(3, 7, rng));
  p.add("b", random_tensor(1, 2, rng));
  save_checkpoint(dir.path() / "x.ckpt", p, {{"note", "hi"}});
  const auto [q, meta] = load_checkpoint(dir.path() / "x.ckpt");
  CHECK(q == p);
  CHECK(meta.at("note") == "hi");
  std::ofstream(dir.path() / "bad.ckpt") << "not a checkpoint";
  CHECK_THROWS_AS(load_checkpoint(dir.path() / "bad.ckpt"), CheckpointError);
}

TEST_CASE("parallel kernels agree with the serial reference") {
  Rng rng(7);
  const size_t n = 61, k = 45, m = 29;
  const Tensor a = random_tensor(n, k, rng), b = random_tensor(k, m, rng), g = random_tensor(n, m, rng);
  const Tensor bt = random_tensor(k, m, rng);
  std::vector<double> c1(n * m), c2(n * m);
  kernels::matmul_serial(a.data(), b.data(), c1, n, k, m);
  kernels::matmul_parallel(a.data(), b.data(), c2, n, k, m);
  for (size_t i = 0; i < c1.size(); ++i) CHECK(std::abs(c1[i] - c2[i]) < 1e-12);

  std::vector<double> ga1(k * m, 0.5), ga2(k * m, 0.5);
  kernels::matmul_at_b_acc_serial(a.data(), g.data(), ga1, n, k, m);
  kernels::matmul_at_b_acc_parallel(a.data(), g.data(), ga2, n, k, m);
  for (size_t i = 0; i < ga1.size(); ++i) CHECK(std::abs(ga1[i] - ga2[i]) < 1e-12);

  std::vector<double> gb1(n * k, -0.25), gb2(n * k, -0.25);
  kernels::matmul_a_bt_acc_serial(g.data(), bt.data(), gb1, n, k, m);
  kernels::matmul_a_bt_acc_parallel(g.data(), bt.data(), gb2, n, k, m);
  for (size_t i = 0; i < gb1.size(); ++i) CHECK(std::abs(gb1[i] - gb2[i]) < 1e-12);

  std::vector<Vec3> pts;
  for (int i = 0; i < 40; ++i) pts.push_back({rng.normal(), rng.normal(), rng.normal()});
  std::vector<double> d1(40 * 40), d2(40 * 40);
  kernels::pairwise_sq_dist_serial(pts, d1);
  kernels::pairwise_sq_dist_parallel(pts, d2);
  CHECK(d1 == d2);
}
