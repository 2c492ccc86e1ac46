// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>

// Low-level float kernels shared by the autograd ops, the attention module and
// the probe trainer. All matrices are row-major with an explicit row stride.
namespace fpe::kernels {

struct MatView {
  const float* data;
  int64_t rows;
  int64_t cols;
  int64_t stride;  // elements between consecutive rows
};

struct MutMatView {
  float* data;
  int64_t rows;
  int64_t cols;
  int64_t stride;
};

inline MatView view(const float* data, int64_t rows, int64_t cols) { return {data, rows, cols, cols}; }
inline MutMatView mut_view(float* data, int64_t rows, int64_t cols) { return {data, rows, cols, cols}; }

// out (+)= alpha * op(a) * op(b), op = transpose when the flag is set.
void gemm(MatView a, bool trans_a, MatView b, bool trans_b, MutMatView out, float alpha = 1.0f,
          bool accumulate = false);

// In-place numerically stable softmax over each row. When causal is set,
// entries with column > row + causal_offset are masked to zero probability.
void softmax_rows(float* x, int64_t rows, int64_t cols, bool causal = false);

// Row-stochastic attention probabilities softmax(q k^T * scale) for one head.
void attention_probs(MatView q, MatView k, float scale, bool causal, float* probs_out);

}  // namespace fpe::kernels
