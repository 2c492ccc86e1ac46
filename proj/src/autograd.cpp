// SPDX-License-Identifier: Apache-2.0
#include "fpe/autograd.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <unordered_set>

#include "fpe/kernels.hpp"

namespace fpe::ag {

namespace {

thread_local bool g_grad_enabled = true;

using NodePtr = std::shared_ptr<Node>;

Var make(Tensor value, std::initializer_list<const Var*> inputs, std::function<void(Node&)> bw) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  if (g_grad_enabled) {
    bool tracked = false;
    for (const Var* in : inputs) tracked = tracked || in->requires_grad();
    if (tracked) {
      node->requires_grad = true;
      for (const Var* in : inputs) node->parents.push_back(in->node());
      node->backward = std::move(bw);
    }
  }
  return Var(std::move(node));
}

void accumulate(const NodePtr& target, Tensor g) {
  if (!target || !target->requires_grad) return;
  if (target->grad.empty()) {
    target->grad = std::move(g);
  } else {
    target->grad += g;
  }
}

void require_same_shape(const Var& a, const Var& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
}

float sigmoid(float x) { return 1.0f / (1.0f + std::exp(-x)); }

// Convolution geometry for a single [C, H, W] input.
struct ConvGeom {
  int64_t channels, height, width;
  int64_t out_channels, kh, kw;
  int64_t out_h, out_w;
  ConvSpec spec;

  int64_t patch() const { return channels * kh * kw; }
};

ConvGeom conv_geometry(const Shape& x, const Shape& w, ConvSpec spec) {
  if (x.size() != 3 || w.size() != 4) {
    throw ShapeError("conv2d expects x [C,H,W] and weight [O,C,kh,kw], got " + shape_str(x) + " and " +
                     shape_str(w));
  }
  if (x[0] != w[1]) {
    throw ShapeError("conv2d channel mismatch: input " + shape_str(x) + ", weight " + shape_str(w));
  }
  ConvGeom g{x[0], x[1], x[2], w[0], w[2], w[3], 0, 0, spec};
  g.out_h = (g.height + spec.pad_top + spec.pad_bottom - g.kh) / spec.stride + 1;
  g.out_w = (g.width + spec.pad_left + spec.pad_right - g.kw) / spec.stride + 1;
  if (g.out_h <= 0 || g.out_w <= 0) throw ShapeError("conv2d output would be empty for input " + shape_str(x));
  return g;
}

bool is_pointwise(const ConvGeom& g) {
  const auto& s = g.spec;
  return g.kh == 1 && g.kw == 1 && s.stride == 1 && s.pad_top == 0 && s.pad_left == 0 && s.pad_bottom == 0 &&
         s.pad_right == 0;
}

int64_t rows_per_chunk(const ConvGeom& g) {
  constexpr int64_t kBudget = int64_t{1} << 24;  // floats in the column buffer
  return std::clamp<int64_t>(kBudget / std::max<int64_t>(1, g.patch() * g.out_w), 1, g.out_h);
}

void im2col(const float* x, const ConvGeom& g, int64_t r0, int64_t r1, float* col) {
  const int64_t n = (r1 - r0) * g.out_w;
  for (int64_t c = 0; c < g.channels; ++c) {
    for (int64_t ki = 0; ki < g.kh; ++ki) {
      for (int64_t kj = 0; kj < g.kw; ++kj) {
        float* dst = col + ((c * g.kh + ki) * g.kw + kj) * n;
        for (int64_t oy = r0; oy < r1; ++oy) {
          const int64_t iy = oy * g.spec.stride - g.spec.pad_top + ki;
          float* drow = dst + (oy - r0) * g.out_w;
          if (iy < 0 || iy >= g.height) {
            std::fill(drow, drow + g.out_w, 0.0f);
            continue;
          }
          const float* srow = x + (c * g.height + iy) * g.width;
          for (int64_t ox = 0; ox < g.out_w; ++ox) {
            const int64_t ix = ox * g.spec.stride - g.spec.pad_left + kj;
            drow[ox] = (ix >= 0 && ix < g.width) ? srow[ix] : 0.0f;
          }
        }
      }
    }
  }
}

void col2im_add(const float* col, const ConvGeom& g, int64_t r0, int64_t r1, float* x) {
  const int64_t n = (r1 - r0) * g.out_w;
  for (int64_t c = 0; c < g.channels; ++c) {
    for (int64_t ki = 0; ki < g.kh; ++ki) {
      for (int64_t kj = 0; kj < g.kw; ++kj) {
        const float* src = col + ((c * g.kh + ki) * g.kw + kj) * n;
        for (int64_t oy = r0; oy < r1; ++oy) {
          const int64_t iy = oy * g.spec.stride - g.spec.pad_top + ki;
          if (iy < 0 || iy >= g.height) continue;
          const float* srow = src + (oy - r0) * g.out_w;
          float* xrow = x + (c * g.height + iy) * g.width;
          for (int64_t ox = 0; ox < g.out_w; ++ox) {
            const int64_t ix = ox * g.spec.stride - g.spec.pad_left + kj;
            if (ix >= 0 && ix < g.width) xrow[ix] += srow[ox];
          }
        }
      }
    }
  }
}

}  // namespace

Var::Var(Tensor value) : node_(std::make_shared<Node>()) { node_->value = std::move(value); }

Var Var::leaf(Tensor value, bool requires_grad) {
  Var v(std::move(value));
  v.node_->requires_grad = requires_grad;
  return v;
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

void backward(const Var& root, const Tensor& seed) {
  if (!root.requires_grad()) throw Error("backward called on a value that does not require grad");
  if (seed.shape() != root.shape()) throw ShapeError("backward seed shape mismatch");

  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, size_t>> stack{{root.node().get(), 0}};
  seen.insert(root.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* p = node->parents[next++].get();
      if (p->requires_grad && !seen.count(p)) {
        seen.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  accumulate(root.node(), seed);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward && !n->grad.empty()) n->backward(*n);
  }
}

Var linear(const Var& x, const Tensor& weight, const Tensor* bias) {
  if (x.value().rank() != 2 || weight.rank() != 2 || x.shape()[1] != weight.dim(1)) {
    throw ShapeError("linear: input " + shape_str(x.shape()) + " vs weight " + shape_str(weight.shape()));
  }
  const int64_t n = x.shape()[0], in = weight.dim(1), out = weight.dim(0);
  Tensor y({n, out});
  kernels::gemm(kernels::view(x.value().data(), n, in), false, kernels::view(weight.data(), out, in), true,
                kernels::mut_view(y.data(), n, out));
  if (bias) {
    for (int64_t r = 0; r < n; ++r) {
      for (int64_t c = 0; c < out; ++c) y[r * out + c] += (*bias)[c];
    }
  }
  NodePtr xn = x.node();
  const Tensor* w = &weight;
  return make(std::move(y), {&x}, [xn, w, n, in, out](Node& self) {
    Tensor gx({n, in});
    kernels::gemm(kernels::view(self.grad.data(), n, out), false, kernels::view(w->data(), out, in), false,
                  kernels::mut_view(gx.data(), n, in));
    accumulate(xn, std::move(gx));
  });
}

Var conv2d(const Var& x, const Tensor& weight, const Tensor* bias, ConvSpec spec) {
  const ConvGeom g = conv_geometry(x.shape(), weight.shape(), spec);
  const int64_t plane = g.out_h * g.out_w;
  Tensor y({g.out_channels, g.out_h, g.out_w});
  const auto wview = kernels::view(weight.data(), g.out_channels, g.patch());
  if (is_pointwise(g)) {
    kernels::gemm(wview, false, kernels::view(x.value().data(), g.channels, plane), false,
                  kernels::mut_view(y.data(), g.out_channels, plane));
  } else {
    const int64_t chunk = rows_per_chunk(g);
    std::vector<float> col(static_cast<size_t>(g.patch() * chunk * g.out_w));
    for (int64_t r0 = 0; r0 < g.out_h; r0 += chunk) {
      const int64_t r1 = std::min(g.out_h, r0 + chunk);
      const int64_t n = (r1 - r0) * g.out_w;
      im2col(x.value().data(), g, r0, r1, col.data());
      kernels::gemm(wview, false, kernels::view(col.data(), g.patch(), n), false,
                    {y.data() + r0 * g.out_w, g.out_channels, n, plane});
    }
  }
  if (bias) {
    for (int64_t o = 0; o < g.out_channels; ++o) {
      float* p = y.data() + o * plane;
      const float b = (*bias)[o];
      for (int64_t i = 0; i < plane; ++i) p[i] += b;
    }
  }
  NodePtr xn = x.node();
  const Tensor* w = &weight;
  return make(std::move(y), {&x}, [xn, w, g](Node& self) {
    const int64_t plane = g.out_h * g.out_w;
    Tensor gx({g.channels, g.height, g.width});
    const auto wview = kernels::view(w->data(), g.out_channels, g.patch());
    if (is_pointwise(g)) {
      kernels::gemm(wview, true, kernels::view(self.grad.data(), g.out_channels, plane), false,
                    kernels::mut_view(gx.data(), g.channels, plane));
    } else {
      const int64_t chunk = rows_per_chunk(g);
      std::vector<float> col(static_cast<size_t>(g.patch() * chunk * g.out_w));
      for (int64_t r0 = 0; r0 < g.out_h; r0 += chunk) {
        const int64_t r1 = std::min(g.out_h, r0 + chunk);
        const int64_t n = (r1 - r0) * g.out_w;
        kernels::gemm(wview, true, {self.grad.data() + r0 * g.out_w, g.out_channels, n, plane}, false,
                      kernels::mut_view(col.data(), g.patch(), n));
        col2im_add(col.data(), g, r0, r1, gx.data());
      }
    }
    accumulate(xn, std::move(gx));
  });
}

Var group_norm(const Var& x, int groups, const Tensor& gamma, const Tensor& beta, float eps) {
  const Tensor& xv = x.value();
  const int64_t channels = xv.dim(0);
  if (groups <= 0 || channels % groups != 0) {
    throw ShapeError("group_norm: " + std::to_string(channels) + " channels not divisible into " +
                     std::to_string(groups) + " groups");
  }
  if (gamma.numel() != channels || beta.numel() != channels) throw ShapeError("group_norm: affine size mismatch");
  const int64_t spatial = xv.numel() / channels;
  const int64_t cpg = channels / groups;
  const int64_t count = cpg * spatial;
  std::vector<float> means(static_cast<size_t>(groups)), rstds(static_cast<size_t>(groups));
  Tensor y(xv.shape());
  for (int gi = 0; gi < groups; ++gi) {
    const float* p = xv.data() + gi * count;
    double sum = 0.0, sq = 0.0;
    for (int64_t i = 0; i < count; ++i) sum += p[i];
    const double mean = sum / static_cast<double>(count);
    for (int64_t i = 0; i < count; ++i) {
      const double d = p[i] - mean;
      sq += d * d;
    }
    const double var = sq / static_cast<double>(count);
    const float rstd = static_cast<float>(1.0 / std::sqrt(var + eps));
    means[gi] = static_cast<float>(mean);
    rstds[gi] = rstd;
    for (int64_t c = 0; c < cpg; ++c) {
      const int64_t ch = gi * cpg + c;
      const float* src = p + c * spatial;
      float* dst = y.data() + ch * spatial;
      for (int64_t i = 0; i < spatial; ++i) {
        dst[i] = (src[i] - means[gi]) * rstd * gamma[ch] + beta[ch];
      }
    }
  }
  NodePtr xn = x.node();
  const Tensor* gm = &gamma;
  return make(std::move(y), {&x}, [xn, gm, groups, cpg, spatial, count, means, rstds](Node& self) {
    const Tensor& xv = xn->value;
    Tensor gx(xv.shape());
    std::vector<float> dxhat(static_cast<size_t>(count)), xhat(static_cast<size_t>(count));
    for (int gi = 0; gi < groups; ++gi) {
      double s1 = 0.0, s2 = 0.0;
      for (int64_t c = 0; c < cpg; ++c) {
        const int64_t ch = gi * cpg + c;
        for (int64_t i = 0; i < spatial; ++i) {
          const int64_t k = c * spatial + i;
          const int64_t idx = ch * spatial + i;
          xhat[k] = (xv[idx] - means[gi]) * rstds[gi];
          dxhat[k] = self.grad[idx] * (*gm)[ch];
          s1 += dxhat[k];
          s2 += static_cast<double>(dxhat[k]) * xhat[k];
        }
      }
      const float m1 = static_cast<float>(s1 / count), m2 = static_cast<float>(s2 / count);
      for (int64_t k = 0; k < count; ++k) {
        gx[gi * count + k] = rstds[gi] * (dxhat[k] - m1 - xhat[k] * m2);
      }
    }
    accumulate(xn, std::move(gx));
  });
}

Var layer_norm(const Var& x, const Tensor& gamma, const Tensor& beta, float eps) {
  const Tensor& xv = x.value();
  if (xv.rank() != 2) throw ShapeError("layer_norm expects [N, D], got " + shape_str(xv.shape()));
  const int64_t rows = xv.dim(0), d = xv.dim(1);
  if (gamma.numel() != d || beta.numel() != d) throw ShapeError("layer_norm: affine size mismatch");
  Tensor y(xv.shape());
  std::vector<float> means(static_cast<size_t>(rows)), rstds(static_cast<size_t>(rows));
  for (int64_t r = 0; r < rows; ++r) {
    const float* p = xv.data() + r * d;
    double sum = 0.0, sq = 0.0;
    for (int64_t i = 0; i < d; ++i) sum += p[i];
    const double mean = sum / static_cast<double>(d);
    for (int64_t i = 0; i < d; ++i) sq += (p[i] - mean) * (p[i] - mean);
    const float rstd = static_cast<float>(1.0 / std::sqrt(sq / static_cast<double>(d) + eps));
    means[r] = static_cast<float>(mean);
    rstds[r] = rstd;
    for (int64_t i = 0; i < d; ++i) y[r * d + i] = (p[i] - means[r]) * rstd * gamma[i] + beta[i];
  }
  NodePtr xn = x.node();
  const Tensor* gm = &gamma;
  return make(std::move(y), {&x}, [xn, gm, rows, d, means, rstds](Node& self) {
    const Tensor& xv = xn->value;
    Tensor gx(xv.shape());
    std::vector<float> dxhat(static_cast<size_t>(d)), xhat(static_cast<size_t>(d));
    for (int64_t r = 0; r < rows; ++r) {
      double s1 = 0.0, s2 = 0.0;
      for (int64_t i = 0; i < d; ++i) {
        xhat[i] = (xv[r * d + i] - means[r]) * rstds[r];
        dxhat[i] = self.grad[r * d + i] * (*gm)[i];
        s1 += dxhat[i];
        s2 += static_cast<double>(dxhat[i]) * xhat[i];
      }
      const float m1 = static_cast<float>(s1 / d), m2 = static_cast<float>(s2 / d);
      for (int64_t i = 0; i < d; ++i) gx[r * d + i] = rstds[r] * (dxhat[i] - m1 - xhat[i] * m2);
    }
    accumulate(xn, std::move(gx));
  });
}

namespace {

template <typename F, typename DF>
Var pointwise(const Var& x, F f, DF df) {
  Tensor y(x.shape());
  const Tensor& xv = x.value();
  for (int64_t i = 0; i < xv.numel(); ++i) y[i] = f(xv[i]);
  NodePtr xn = x.node();
  return make(std::move(y), {&x}, [xn, df](Node& self) {
    Tensor gx(xn->value.shape());
    for (int64_t i = 0; i < gx.numel(); ++i) gx[i] = self.grad[i] * df(xn->value[i]);
    accumulate(xn, std::move(gx));
  });
}

}  // namespace

Var silu(const Var& x) {
  return pointwise(
      x, [](float v) { return v * sigmoid(v); },
      [](float v) {
        const float s = sigmoid(v);
        return s * (1.0f + v * (1.0f - s));
      });
}

Var gelu(const Var& x) {
  constexpr float kInvSqrt2 = 0.70710678118654752f;
  const float inv_sqrt_2pi = static_cast<float>(1.0 / std::sqrt(2.0 * std::numbers::pi));
  return pointwise(
      x, [](float v) { return 0.5f * v * (1.0f + std::erf(v * kInvSqrt2)); },
      [inv_sqrt_2pi](float v) {
        return 0.5f * (1.0f + std::erf(v * kInvSqrt2)) + v * std::exp(-0.5f * v * v) * inv_sqrt_2pi;
      });
}

Var quick_gelu(const Var& x) {
  return pointwise(
      x, [](float v) { return v * sigmoid(1.702f * v); },
      [](float v) {
        const float s = sigmoid(1.702f * v);
        return s + 1.702f * v * s * (1.0f - s);
      });
}

Var add(const Var& a, const Var& b) {
  require_same_shape(a, b, "add");
  Tensor y = a.value() + b.value();
  NodePtr an = a.node(), bn = b.node();
  return make(std::move(y), {&a, &b}, [an, bn](Node& self) {
    accumulate(an, self.grad);
    accumulate(bn, self.grad);
  });
}

Var sub(const Var& a, const Var& b) {
  require_same_shape(a, b, "sub");
  Tensor y = a.value() - b.value();
  NodePtr an = a.node(), bn = b.node();
  return make(std::move(y), {&a, &b}, [an, bn](Node& self) {
    accumulate(an, self.grad);
    accumulate(bn, self.grad * -1.0f);
  });
}

Var mul(const Var& a, const Var& b) {
  require_same_shape(a, b, "mul");
  Tensor y(a.shape());
  for (int64_t i = 0; i < y.numel(); ++i) y[i] = a.value()[i] * b.value()[i];
  NodePtr an = a.node(), bn = b.node();
  return make(std::move(y), {&a, &b}, [an, bn](Node& self) {
    if (an->requires_grad) {
      Tensor g(self.grad.shape());
      for (int64_t i = 0; i < g.numel(); ++i) g[i] = self.grad[i] * bn->value[i];
      accumulate(an, std::move(g));
    }
    if (bn->requires_grad) {
      Tensor g(self.grad.shape());
      for (int64_t i = 0; i < g.numel(); ++i) g[i] = self.grad[i] * an->value[i];
      accumulate(bn, std::move(g));
    }
  });
}

Var scale(const Var& x, float s) {
  NodePtr xn = x.node();
  return make(x.value() * s, {&x}, [xn, s](Node& self) { accumulate(xn, self.grad * s); });
}

Var add_channel_bias(const Var& x, const Var& bias) {
  const int64_t channels = x.value().dim(0);
  if (bias.value().numel() != channels) {
    throw ShapeError("add_channel_bias: " + shape_str(x.shape()) + " vs " + shape_str(bias.shape()));
  }
  const int64_t inner = x.value().numel() / channels;
  Tensor y = x.value();
  for (int64_t c = 0; c < channels; ++c) {
    for (int64_t i = 0; i < inner; ++i) y[c * inner + i] += bias.value()[c];
  }
  NodePtr xn = x.node(), bn = bias.node();
  return make(std::move(y), {&x, &bias}, [xn, bn, channels, inner](Node& self) {
    accumulate(xn, self.grad);
    if (bn->requires_grad) {
      Tensor gb(bn->value.shape());
      for (int64_t c = 0; c < channels; ++c) {
        double s = 0.0;
        for (int64_t i = 0; i < inner; ++i) s += self.grad[c * inner + i];
        gb[c] = static_cast<float>(s);
      }
      accumulate(bn, std::move(gb));
    }
  });
}

Var concat0(const Var& a, const Var& b) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  if (sa.size() != sb.size() || sa.empty() || !std::equal(sa.begin() + 1, sa.end(), sb.begin() + 1)) {
    throw ShapeError("concat0: " + shape_str(sa) + " vs " + shape_str(sb));
  }
  Shape out = sa;
  out[0] += sb[0];
  std::vector<float> data;
  data.reserve(static_cast<size_t>(a.value().numel() + b.value().numel()));
  data.insert(data.end(), a.value().storage().begin(), a.value().storage().end());
  data.insert(data.end(), b.value().storage().begin(), b.value().storage().end());
  NodePtr an = a.node(), bn = b.node();
  const int64_t na = a.value().numel();
  return make(Tensor(out, std::move(data)), {&a, &b}, [an, bn, na](Node& self) {
    const auto& g = self.grad.storage();
    if (an->requires_grad) {
      accumulate(an, Tensor(an->value.shape(), std::vector<float>(g.begin(), g.begin() + na)));
    }
    if (bn->requires_grad) {
      accumulate(bn, Tensor(bn->value.shape(), std::vector<float>(g.begin() + na, g.end())));
    }
  });
}

std::pair<Var, Var> split_last(const Var& x, int64_t at) {
  const Shape& s = x.shape();
  const int64_t last = s.back();
  if (at <= 0 || at >= last) throw ShapeError("split_last: split point out of range");
  const int64_t rows = x.value().numel() / last;
  Shape s1 = s, s2 = s;
  s1.back() = at;
  s2.back() = last - at;
  Tensor a(s1), b(s2);
  for (int64_t r = 0; r < rows; ++r) {
    const float* src = x.value().data() + r * last;
    std::copy(src, src + at, a.data() + r * at);
    std::copy(src + at, src + last, b.data() + r * (last - at));
  }
  NodePtr xn = x.node();
  Var va = make(std::move(a), {&x}, [xn, rows, last, at](Node& self) {
    Tensor gx(xn->value.shape());
    for (int64_t r = 0; r < rows; ++r) {
      std::copy(self.grad.data() + r * at, self.grad.data() + (r + 1) * at, gx.data() + r * last);
    }
    accumulate(xn, std::move(gx));
  });
  Var vb = make(std::move(b), {&x}, [xn, rows, last, at](Node& self) {
    Tensor gx(xn->value.shape());
    const int64_t w = last - at;
    for (int64_t r = 0; r < rows; ++r) {
      std::copy(self.grad.data() + r * w, self.grad.data() + (r + 1) * w, gx.data() + r * last + at);
    }
    accumulate(xn, std::move(gx));
  });
  return {va, vb};
}

Var upsample_nearest2x(const Var& x) {
  const Shape& s = x.shape();
  if (s.size() != 3) throw ShapeError("upsample expects [C,H,W], got " + shape_str(s));
  const int64_t c = s[0], h = s[1], w = s[2];
  Tensor y({c, 2 * h, 2 * w});
  for (int64_t ch = 0; ch < c; ++ch) {
    for (int64_t i = 0; i < 2 * h; ++i) {
      const float* src = x.value().data() + (ch * h + i / 2) * w;
      float* dst = y.data() + (ch * 2 * h + i) * 2 * w;
      for (int64_t j = 0; j < 2 * w; ++j) dst[j] = src[j / 2];
    }
  }
  NodePtr xn = x.node();
  return make(std::move(y), {&x}, [xn, c, h, w](Node& self) {
    Tensor gx({c, h, w});
    for (int64_t ch = 0; ch < c; ++ch) {
      for (int64_t i = 0; i < 2 * h; ++i) {
        const float* src = self.grad.data() + (ch * 2 * h + i) * 2 * w;
        float* dst = gx.data() + (ch * h + i / 2) * w;
        for (int64_t j = 0; j < 2 * w; ++j) dst[j / 2] += src[j];
      }
    }
    accumulate(xn, std::move(gx));
  });
}

Var reshape(const Var& x, Shape shape) {
  NodePtr xn = x.node();
  return make(x.value().reshaped(std::move(shape)), {&x},
              [xn](Node& self) { accumulate(xn, self.grad.reshaped(xn->value.shape())); });
}

Var transpose2d(const Var& x) {
  const Shape& s = x.shape();
  if (s.size() != 2) throw ShapeError("transpose2d expects a matrix, got " + shape_str(s));
  const int64_t a = s[0], b = s[1];
  Tensor y({b, a});
  for (int64_t i = 0; i < a; ++i) {
    for (int64_t j = 0; j < b; ++j) y[j * a + i] = x.value()[i * b + j];
  }
  NodePtr xn = x.node();
  return make(std::move(y), {&x}, [xn, a, b](Node& self) {
    Tensor gx({a, b});
    for (int64_t i = 0; i < a; ++i) {
      for (int64_t j = 0; j < b; ++j) gx[i * b + j] = self.grad[j * a + i];
    }
    accumulate(xn, std::move(gx));
  });
}

Var select_row(const Var& x, int64_t row) {
  const Shape& s = x.shape();
  if (s.size() != 2 || row < 0 || row >= s[0]) throw ShapeError("select_row out of range");
  const int64_t d = s[1];
  Tensor y({1, d}, std::vector<float>(x.value().data() + row * d, x.value().data() + (row + 1) * d));
  NodePtr xn = x.node();
  return make(std::move(y), {&x}, [xn, row, d](Node& self) {
    Tensor gx(xn->value.shape());
    std::copy(self.grad.data(), self.grad.data() + d, gx.data() + row * d);
    accumulate(xn, std::move(gx));
  });
}

Var mse(const Var& a, const Var& b) {
  require_same_shape(a, b, "mse");
  const float n = static_cast<float>(a.value().numel());
  Tensor y({1}, std::vector<float>{mean_squared_error(a.value(), b.value())});
  NodePtr an = a.node(), bn = b.node();
  return make(std::move(y), {&a, &b}, [an, bn, n](Node& self) {
    Tensor diff = an->value - bn->value;
    diff *= 2.0f * self.grad[0] / n;
    if (bn->requires_grad) accumulate(bn, diff * -1.0f);
    accumulate(an, std::move(diff));
  });
}

Var attention(const Var& q, const Var& k, const Var& v, int heads, bool causal, const ProbsHook& hook) {
  const Shape &sq = q.shape(), &sk = k.shape(), &sv = v.shape();
  if (sq.size() != 2 || sk.size() != 2 || sv.size() != 2 || sq[1] != sk[1] || sk[0] != sv[0] || heads <= 0 ||
      sq[1] % heads != 0 || sv[1] % heads != 0) {
    throw ShapeError("attention: q " + shape_str(sq) + ", k " + shape_str(sk) + ", v " + shape_str(sv) +
                     ", heads " + std::to_string(heads));
  }
  const int64_t n = sq[0], m = sk[0], inner = sq[1], d = inner / heads, vinner = sv[1], dv = vinner / heads;
  const float scale_factor = 1.0f / std::sqrt(static_cast<float>(d));
  Tensor probs({heads, n, m});
  for (int h = 0; h < heads; ++h) {
    kernels::attention_probs({q.value().data() + h * d, n, d, inner}, {k.value().data() + h * d, m, d, inner},
                             scale_factor, causal, probs.data() + h * n * m);
  }
  bool replaced = false;
  if (hook) {
    replaced = hook(probs);
    if (probs.shape() != Shape{heads, n, m}) {
      throw ShapeError("attention hook changed the probability shape to " + shape_str(probs.shape()));
    }
  }
  Tensor out({n, vinner});
  for (int h = 0; h < heads; ++h) {
    kernels::gemm(kernels::view(probs.data() + h * n * m, n, m), false, {v.value().data() + h * dv, m, dv, vinner},
                  false, {out.data() + h * dv, n, dv, vinner});
  }
  NodePtr qn = q.node(), kn = k.node(), vn = v.node();
  auto saved = std::make_shared<Tensor>(std::move(probs));
  return make(std::move(out), {&q, &k, &v},
              [qn, kn, vn, saved, heads, n, m, d, dv, inner, vinner, scale_factor, replaced](Node& self) {
                Tensor gq({n, inner}), gk({m, inner}), gv({m, vinner});
                std::vector<float> dp(static_cast<size_t>(n * m));
                for (int h = 0; h < heads; ++h) {
                  const float* p = saved->data() + h * n * m;
                  const kernels::MatView gout{self.grad.data() + h * dv, n, dv, vinner};
                  kernels::gemm(kernels::view(p, n, m), true, gout, false, {gv.data() + h * dv, m, dv, vinner});
                  if (replaced) continue;
                  kernels::gemm(gout, false, {vn->value.data() + h * dv, m, dv, vinner}, true,
                                kernels::mut_view(dp.data(), n, m));
                  for (int64_t r = 0; r < n; ++r) {
                    double dot = 0.0;
                    for (int64_t c = 0; c < m; ++c) dot += static_cast<double>(dp[r * m + c]) * p[r * m + c];
                    for (int64_t c = 0; c < m; ++c) {
                      dp[r * m + c] = p[r * m + c] * (dp[r * m + c] - static_cast<float>(dot));
                    }
                  }
                  kernels::gemm(kernels::view(dp.data(), n, m), false, {kn->value.data() + h * d, m, d, inner}, false,
                                {gq.data() + h * d, n, d, inner}, scale_factor);
                  kernels::gemm(kernels::view(dp.data(), n, m), true, {qn->value.data() + h * d, n, d, inner}, false,
                                {gk.data() + h * d, m, d, inner}, scale_factor);
                }
                if (!replaced) {
                  accumulate(qn, std::move(gq));
                  accumulate(kn, std::move(gk));
                }
                accumulate(vn, std::move(gv));
              });
}

}  // namespace fpe::ag
