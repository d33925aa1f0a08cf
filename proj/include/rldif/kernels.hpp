// Dense inner loops with an OpenMP-parallel path and a plain-loop serial
// reference. The parallel path splits output rows across threads and runs a
// blocked GEMM on each block; it agrees with the reference to rounding.

#ifndef RLDIF_KERNELS_HPP_
#define RLDIF_KERNELS_HPP_

#include <cstddef>
#include <span>

#include "rldif/core.hpp"

namespace rldif::kernels {

// C[n,m] = A[n,k] * B[k,m]
void matmul_serial(std::span<const double> a, std::span<const double> b, std::span<double> c,
                   size_t n, size_t k, size_t m);
void matmul_parallel(std::span<const double> a, std::span<const double> b, std::span<double> c,
                     size_t n, size_t k, size_t m);

// C[k,m] += A[n,k]^T * G[n,m]
void matmul_at_b_acc_serial(std::span<const double> a, std::span<const double> g,
                            std::span<double> c, size_t n, size_t k, size_t m);
void matmul_at_b_acc_parallel(std::span<const double> a, std::span<const double> g,
                              std::span<double> c, size_t n, size_t k, size_t m);

// C[n,k] += G[n,m] * B[k,m]^T
void matmul_a_bt_acc_serial(std::span<const double> g, std::span<const double> b,
                            std::span<double> c, size_t n, size_t k, size_t m);
void matmul_a_bt_acc_parallel(std::span<const double> g, std::span<const double> b,
                              std::span<double> c, size_t n, size_t k, size_t m);

// D[i*n+j] = |p_i - p_j|^2
void pairwise_sq_dist_serial(std::span<const Vec3> p, std::span<double> d);
void pairwise_sq_dist_parallel(std::span<const Vec3> p, std::span<double> d);

// Dispatch used by the library; parallel when built with OpenMP.
void matmul(std::span<const double> a, std::span<const double> b, std::span<double> c, size_t n,
            size_t k, size_t m);
void matmul_at_b_acc(std::span<const double> a, std::span<const double> g, std::span<double> c,
                     size_t n, size_t k, size_t m);
void matmul_a_bt_acc(std::span<const double> g, std::span<const double> b, std::span<double> c,
                     size_t n, size_t k, size_t m);
void pairwise_sq_dist(std::span<const Vec3> p, std::span<double> d);

int max_threads();

// Keeps large freed buffers on the heap instead of returning them to the OS,
// so tape tensors are recycled rather than page-faulted in on every step.
void configure_allocator();

}  // namespace rldif::kernels

#endif  // RLDIF_KERNELS_HPP_
