#include "rldif/kernels.hpp"

#define EIGEN_DONT_PARALLELIZE
#include <Eigen/Dense>
#include <algorithm>
#include <malloc.h>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace rldif::kernels {

namespace {

constexpr size_t kParallelWork = 1 << 15;

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMatrix>;
using MutMap = Eigen::Map<RowMatrix>;

// Half-open block [begin, end) of `count` items owned by the calling thread.
std::pair<size_t, size_t> thread_block(size_t count) {
#ifdef _OPENMP
  const auto threads = static_cast<size_t>(omp_get_num_threads());
  const auto id = static_cast<size_t>(omp_get_thread_num());
#else
  const size_t threads = 1, id = 0;
#endif
  const size_t block = (count + threads - 1) / threads;
  const size_t begin = std::min(count, id * block);
  return {begin, std::min(count, begin + block)};
}

auto as_matrix(std::span<const double> x, size_t rows, size_t cols) {
  return ConstMap(x.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}
auto as_matrix(std::span<double> x, size_t rows, size_t cols) {
  return MutMap(x.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}

inline Eigen::Index idx(size_t v) { return static_cast<Eigen::Index>(v); }

inline void sq_dist_row(std::span<const Vec3> p, double* d, size_t i) {
  for (size_t j = 0; j < p.size(); ++j) {
    Vec3 v = p[i] - p[j];
    d[j] = dot(v, v);
  }
}

}  // namespace

void matmul_serial(std::span<const double> a, std::span<const double> b, std::span<double> c,
                   size_t n, size_t k, size_t m) {
  for (size_t i = 0; i < n; ++i) {
    double* ci = c.data() + i * m;
    std::fill(ci, ci + m, 0.0);
    for (size_t p = 0; p < k; ++p) {
      const double av = a[i * k + p];
      const double* bp = b.data() + p * m;
      for (size_t j = 0; j < m; ++j) ci[j] += av * bp[j];
    }
  }
}

void matmul_parallel(std::span<const double> a, std::span<const double> b, std::span<double> c,
                     size_t n, size_t k, size_t m) {
  const auto bm = as_matrix(b, k, m);
#pragma omp parallel if (n * k * m > kParallelWork)
  {
    const auto [r0, r1] = thread_block(n);
    if (r0 < r1)
      as_matrix(c, n, m).middleRows(idx(r0), idx(r1 - r0)).noalias() =
          as_matrix(a, n, k).middleRows(idx(r0), idx(r1 - r0)) * bm;
  }
}

void matmul_at_b_acc_serial(std::span<const double> a, std::span<const double> g,
                            std::span<double> c, size_t n, size_t k, size_t m) {
  for (size_t i = 0; i < n; ++i)
    for (size_t p = 0; p < k; ++p) {
      const double av = a[i * k + p];
      double* cp = c.data() + p * m;
      for (size_t j = 0; j < m; ++j) cp[j] += av * g[i * m + j];
    }
}

void matmul_at_b_acc_parallel(std::span<const double> a, std::span<const double> g,
                              std::span<double> c, size_t n, size_t k, size_t m) {
  const auto am = as_matrix(a, n, k);
  const auto gm = as_matrix(g, n, m);
#pragma omp parallel if (n * k * m > kParallelWork)
  {
    const auto [p0, p1] = thread_block(k);
    if (p0 < p1)
      as_matrix(c, k, m).middleRows(idx(p0), idx(p1 - p0)).noalias() +=
          am.middleCols(idx(p0), idx(p1 - p0)).transpose() * gm;
  }
}

void matmul_a_bt_acc_serial(std::span<const double> g, std::span<const double> b,
                            std::span<double> c, size_t n, size_t k, size_t m) {
  for (size_t i = 0; i < n; ++i)
    for (size_t p = 0; p < k; ++p) {
      double s = 0.0;
      for (size_t j = 0; j < m; ++j) s += g[i * m + j] * b[p * m + j];
      c[i * k + p] += s;
    }
}

void matmul_a_bt_acc_parallel(std::span<const double> g, std::span<const double> b,
                              std::span<double> c, size_t n, size_t k, size_t m) {
  const auto gm = as_matrix(g, n, m);
  const auto bm = as_matrix(b, k, m);
#pragma omp parallel if (n * k * m > kParallelWork)
  {
    const auto [r0, r1] = thread_block(n);
    if (r0 < r1)
      as_matrix(c, n, k).middleRows(idx(r0), idx(r1 - r0)).noalias() +=
          gm.middleRows(idx(r0), idx(r1 - r0)) * bm.transpose();
  }
}

void pairwise_sq_dist_serial(std::span<const Vec3> p, std::span<double> d) {
  for (size_t i = 0; i < p.size(); ++i) sq_dist_row(p, d.data() + i * p.size(), i);
}

void pairwise_sq_dist_parallel(std::span<const Vec3> p, std::span<double> d) {
  const auto rows = static_cast<std::ptrdiff_t>(p.size());
#pragma omp parallel for schedule(static) if (p.size() > 256)
  for (std::ptrdiff_t i = 0; i < rows; ++i)
    sq_dist_row(p, d.data() + i * p.size(), static_cast<size_t>(i));
}

void matmul(std::span<const double> a, std::span<const double> b, std::span<double> c, size_t n,
            size_t k, size_t m) {
  matmul_parallel(a, b, c, n, k, m);
}

void matmul_at_b_acc(std::span<const double> a, std::span<const double> g, std::span<double> c,
                     size_t n, size_t k, size_t m) {
  matmul_at_b_acc_parallel(a, g, c, n, k, m);
}

void matmul_a_bt_acc(std::span<const double> g, std::span<const double> b, std::span<double> c,
                     size_t n, size_t k, size_t m) {
  matmul_a_bt_acc_parallel(g, b, c, n, k, m);
}

void pairwise_sq_dist(std::span<const Vec3> p, std::span<double> d) {
  pairwise_sq_dist_parallel(p, d);
}

int max_threads() {
#ifdef _OPENMP
  return omp_get_max_threads();
#else
  return 1;
#endif
}

void configure_allocator() {
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
}

}  // namespace rldif::kernels
