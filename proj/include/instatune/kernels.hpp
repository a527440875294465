// SPDX-License-Identifier: Apache-2.0
#pragma once

// Dense kernels over strided row-major matrix views. Each kernel has a serial
// reference and an OpenMP variant; both assign every output element to one
// thread and accumulate in the same order, so results are bit-identical.

#include <cstddef>

namespace instatune::kernels {

/// Non-owning strided view: element (r, c) lives at data[r * ld + c].
template <typename T>
struct MatView {
  T* data = nullptr;
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::size_t ld = 0;

  T& operator()(std::size_t r, std::size_t c) const { return data[r * ld + c]; }
  operator MatView<const T>() const { return {data, rows, cols, ld}; }
};

using ConstMat = MatView<const double>;
using Mat = MatView<double>;

enum class Trans { no, yes };

// C (+)= op(A) * op(B). When `accumulate` is false C is overwritten.
void gemm_serial(ConstMat a, Trans ta, ConstMat b, Trans tb, Mat c,
                 bool accumulate);
void gemm_parallel(ConstMat a, Trans ta, ConstMat b, Trans tb, Mat c,
                   bool accumulate);

void softmax_rows_serial(ConstMat x, Mat y);
void softmax_rows_parallel(ConstMat x, Mat y);

enum class Backend { serial, parallel, automatic };

/// Process-wide backend choice used by the graph. `automatic` runs the
/// parallel kernel only above a work threshold.
void set_backend(Backend backend);
Backend backend();

void gemm(ConstMat a, Trans ta, ConstMat b, Trans tb, Mat c, bool accumulate);
void softmax_rows(ConstMat x, Mat y);

}  // namespace instatune::kernels
