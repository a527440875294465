// SPDX-License-Identifier: Apache-2.0
#include "instatune/kernels.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <stdexcept>

namespace instatune::kernels {
namespace {

std::atomic<Backend> g_backend{Backend::automatic};

constexpr std::size_t kParallelWork = 1 << 16;

struct GemmDims {
  std::size_t m, n, k;
};

GemmDims gemm_dims(ConstMat a, Trans ta, ConstMat b, Trans tb, Mat c) {
  std::size_t m = ta == Trans::no ? a.rows : a.cols;
  std::size_t k = ta == Trans::no ? a.cols : a.rows;
  std::size_t kb = tb == Trans::no ? b.rows : b.cols;
  std::size_t n = tb == Trans::no ? b.cols : b.rows;
  if (k != kb || c.rows != m || c.cols != n)
    throw std::invalid_argument("gemm: inconsistent operand extents");
  return {m, n, k};
}

inline double elem(ConstMat x, Trans t, std::size_t r, std::size_t c) {
  return t == Trans::no ? x(r, c) : x(c, r);
}

// One output row. Inner loop order over k is fixed so every backend sums
// identically.
inline void gemm_row(ConstMat a, Trans ta, ConstMat b, Trans tb, Mat c,
                     bool accumulate, const GemmDims& d, std::size_t i) {
  double* crow = &c(i, 0);
  if (!accumulate) std::fill(crow, crow + d.n, 0.0);
  if (tb == Trans::no) {
    for (std::size_t p = 0; p < d.k; ++p) {
      double aip = elem(a, ta, i, p);
      const double* brow = &b(p, 0);
      for (std::size_t j = 0; j < d.n; ++j) crow[j] += aip * brow[j];
    }
  } else {
    for (std::size_t p = 0; p < d.k; ++p) {
      double aip = elem(a, ta, i, p);
      for (std::size_t j = 0; j < d.n; ++j) crow[j] += aip * b(j, p);
    }
  }
}

inline void softmax_row(ConstMat x, Mat y, std::size_t r) {
  double mx = x(r, 0);
  for (std::size_t j = 1; j < x.cols; ++j) mx = std::max(mx, x(r, j));
  double total = 0.0;
  for (std::size_t j = 0; j < x.cols; ++j) {
    double e = std::exp(x(r, j) - mx);
    y(r, j) = e;
    total += e;
  }
  for (std::size_t j = 0; j < x.cols; ++j) y(r, j) /= total;
}

}  // namespace

void gemm_serial(ConstMat a, Trans ta, ConstMat b, Trans tb, Mat c,
                 bool accumulate) {
  auto d = gemm_dims(a, ta, b, tb, c);
  for (std::size_t i = 0; i < d.m; ++i)
    gemm_row(a, ta, b, tb, c, accumulate, d, i);
}

void gemm_parallel(ConstMat a, Trans ta, ConstMat b, Trans tb, Mat c,
                   bool accumulate) {
  auto d = gemm_dims(a, ta, b, tb, c);
  const auto m = static_cast<long long>(d.m);
#pragma omp parallel for schedule(static)
  for (long long i = 0; i < m; ++i)
    gemm_row(a, ta, b, tb, c, accumulate, d, static_cast<std::size_t>(i));
}

void softmax_rows_serial(ConstMat x, Mat y) {
  for (std::size_t r = 0; r < x.rows; ++r) softmax_row(x, y, r);
}

void softmax_rows_parallel(ConstMat x, Mat y) {
  const auto rows = static_cast<long long>(x.rows);
#pragma omp parallel for schedule(static)
  for (long long r = 0; r < rows; ++r)
    softmax_row(x, y, static_cast<std::size_t>(r));
}

void set_backend(Backend b) { g_backend.store(b); }
Backend backend() { return g_backend.load(); }

void gemm(ConstMat a, Trans ta, ConstMat b, Trans tb, Mat c, bool accumulate) {
  switch (backend()) {
    case Backend::serial:
      return gemm_serial(a, ta, b, tb, c, accumulate);
    case Backend::parallel:
      return gemm_parallel(a, ta, b, tb, c, accumulate);
    case Backend::automatic: {
      std::size_t k = ta == Trans::no ? a.cols : a.rows;
      if (c.rows * c.cols * k >= kParallelWork)
        return gemm_parallel(a, ta, b, tb, c, accumulate);
      return gemm_serial(a, ta, b, tb, c, accumulate);
    }
  }
}

void softmax_rows(ConstMat x, Mat y) {
  if (backend() == Backend::parallel ||
      (backend() == Backend::automatic && x.rows * x.cols >= kParallelWork))
    return softmax_rows_parallel(x, y);
  softmax_rows_serial(x, y);
}

}  // namespace instatune::kernels
