// SPDX-License-Identifier: Apache-2.0
#include "fpe/kernels.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>

#include "fpe/tensor.hpp"

namespace fpe::kernels {

namespace {

using RowMat = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat, 0, Eigen::OuterStride<>>;
using MutMap = Eigen::Map<RowMat, 0, Eigen::OuterStride<>>;

ConstMap as_map(MatView v) { return ConstMap(v.data, v.rows, v.cols, Eigen::OuterStride<>(v.stride)); }
MutMap as_map(MutMatView v) { return MutMap(v.data, v.rows, v.cols, Eigen::OuterStride<>(v.stride)); }

}  // namespace

void gemm(MatView a, bool trans_a, MatView b, bool trans_b, MutMatView out, float alpha, bool accumulate) {
  const int64_t m = trans_a ? a.cols : a.rows;
  const int64_t ka = trans_a ? a.rows : a.cols;
  const int64_t kb = trans_b ? b.cols : b.rows;
  const int64_t n = trans_b ? b.rows : b.cols;
  if (ka != kb || out.rows != m || out.cols != n) {
    throw ShapeError("gemm dimension mismatch: (" + std::to_string(m) + "x" + std::to_string(ka) + ") * (" +
                     std::to_string(kb) + "x" + std::to_string(n) + ") -> (" + std::to_string(out.rows) + "x" +
                     std::to_string(out.cols) + ")");
  }
  if (m == 0 || n == 0) return;
  auto o = as_map(out);
  if (ka == 0) {
    if (!accumulate) o.setZero();
    return;
  }
  auto am = as_map(a);
  auto bm = as_map(b);
  if (!accumulate) o.setZero();
  if (!trans_a && !trans_b) {
    o.noalias() += alpha * (am * bm);
  } else if (trans_a && !trans_b) {
    o.noalias() += alpha * (am.transpose() * bm);
  } else if (!trans_a && trans_b) {
    o.noalias() += alpha * (am * bm.transpose());
  } else {
    o.noalias() += alpha * (am.transpose() * bm.transpose());
  }
}

void softmax_rows(float* x, int64_t rows, int64_t cols, bool causal) {
  for (int64_t r = 0; r < rows; ++r) {
    float* row = x + r * cols;
    const int64_t live = causal ? std::min(cols, r + 1) : cols;
    float mx = -std::numeric_limits<float>::infinity();
    for (int64_t c = 0; c < live; ++c) mx = std::max(mx, row[c]);
    double sum = 0.0;
    for (int64_t c = 0; c < live; ++c) {
      row[c] = std::exp(row[c] - mx);
      sum += row[c];
    }
    const float inv = static_cast<float>(1.0 / sum);
    for (int64_t c = 0; c < live; ++c) row[c] *= inv;
    for (int64_t c = live; c < cols; ++c) row[c] = 0.0f;
  }
}

void attention_probs(MatView q, MatView k, float scale, bool causal, float* probs_out) {
  gemm(q, false, k, true, mut_view(probs_out, q.rows, k.rows), scale);
  softmax_rows(probs_out, q.rows, k.rows, causal);
}

}  // namespace fpe::kernels
