// SPDX-License-Identifier: Apache-2.0
// Tensor, kernel, autograd and scheduler checks against naive references.
#include <doctest.h>

#include <cmath>
#include <functional>
#include <vector>

#include "fpe/attention.hpp"
#include "fpe/autograd.hpp"
#include "fpe/kernels.hpp"
#include "fpe/scheduler.hpp"

using namespace fpe;

namespace {

Tensor random_tensor(Rng& rng, Shape shape, float scale = 1.0f) {
  Tensor t = rng.randn(shape);
  t *= scale;
  return t;
}

// softmax(q k^T / sqrt(d)) with three nested loops in double precision.
std::vector<double> naive_attention(const Tensor& q, const Tensor& k, int d) {
  const int64_t n = q.dim(0), m = k.dim(0);
  std::vector<double> out(static_cast<size_t>(n * m));
  for (int64_t i = 0; i < n; ++i) {
    double peak = -1e300;
    for (int64_t j = 0; j < m; ++j) {
      double dot = 0.0;
      for (int c = 0; c < d; ++c) dot += double(q[i * d + c]) * double(k[j * d + c]);
      out[i * m + j] = dot / std::sqrt(double(d));
      peak = std::max(peak, out[i * m + j]);
    }
    double total = 0.0;
    for (int64_t j = 0; j < m; ++j) total += out[i * m + j] = std::exp(out[i * m + j] - peak);
    for (int64_t j = 0; j < m; ++j) out[i * m + j] /= total;
  }
  return out;
}

// Central-difference gradient of `f` at `x`, compared with the analytic one.
double gradient_error(const Tensor& x, const std::function<ag::Var(const ag::Var&)>& f, uint64_t seed) {
  Rng rng(seed);
  ag::Var leaf = ag::Var::leaf(x, true);
  ag::Var y = f(leaf);
  const Tensor weights = rng.randn(y.shape());
  ag::backward(y, weights);
  const Tensor analytic = leaf.grad();

  auto objective = [&](const Tensor& input) {
    ag::NoGradGuard guard;
    const Tensor out = f(ag::Var(input)).value();
    double s = 0.0;
    for (int64_t i = 0; i < out.numel(); ++i) s += double(out[i]) * double(weights[i]);
    return s;
  };
  double worst = 0.0;
  const float h = 1e-2f;
  for (int64_t i = 0; i < x.numel(); ++i) {
    Tensor plus = x, minus = x;
    plus[i] += h;
    minus[i] -= h;
    const double numeric = (objective(plus) - objective(minus)) / (2.0 * h);
    const double denom = std::max(1.0, std::abs(numeric));
    worst = std::max(worst, std::abs(numeric - analytic[i]) / denom);
  }
  return worst;
}

}  // namespace

TEST_SUITE("tensor") {
  TEST_CASE("reshape keeps data and rejects a mismatched element count") {
    Tensor t({2, 3}, {1, 2, 3, 4, 5, 6});
    const Tensor r = t.reshaped({3, 2});
    CHECK(r.shape() == Shape{3, 2});
    CHECK(r[5] == 6.0f);
    CHECK_THROWS_AS(t.reshaped({4, 2}), ShapeError);
  }

  TEST_CASE("elementwise helpers match hand-computed values") {
    Tensor a({3}, {1, 2, 3}), b({3}, {1, 0, 5});
    CHECK(mean_squared_error(a, b) == doctest::Approx((0.0 + 4.0 + 4.0) / 3.0));
    CHECK(l2_distance(a, b) == doctest::Approx(std::sqrt(8.0)));
    CHECK(max_abs_diff(a, b) == doctest::Approx(2.0));
    CHECK((a - b)[1] == 2.0f);
    CHECK((a * 2.0f)[2] == 6.0f);
  }

  TEST_CASE("rng streams are reproducible per seed") {
    Rng a(9), b(9), c(10);
    const Tensor x = a.randn({64}), y = b.randn({64}), z = c.randn({64});
    CHECK(x.bit_equal(y));
    CHECK_FALSE(x.bit_equal(z));
  }

  TEST_CASE("normal draws have unit moments") {
    Rng rng(3);
    const Tensor x = rng.randn({20000});
    double mean = 0.0, sq = 0.0;
    for (float v : x.values()) {
      mean += v;
      sq += double(v) * v;
    }
    mean /= x.numel();
    CHECK(std::abs(mean) < 0.03);
    CHECK(std::abs(sq / x.numel() - 1.0) < 0.05);
  }

  TEST_CASE("non-finite values are detected") {
    Tensor t({2}, {1.0f, 0.0f});
    CHECK(t.all_finite());
    t[1] = std::nanf("");
    CHECK_FALSE(t.all_finite());
  }
}

TEST_SUITE("kernels") {
  TEST_CASE("gemm matches a naive product for every transpose combination") {
    Rng rng(1);
    for (bool ta : {false, true}) {
      for (bool tb : {false, true}) {
        const int64_t m = 7, k = 5, n = 9;
        const Tensor a = rng.randn(ta ? Shape{k, m} : Shape{m, k});
        const Tensor b = rng.randn(tb ? Shape{n, k} : Shape{k, n});
        Tensor out({m, n});
        kernels::gemm(kernels::view(a.data(), a.dim(0), a.dim(1)), ta, kernels::view(b.data(), b.dim(0), b.dim(1)),
                      tb, kernels::mut_view(out.data(), m, n));
        for (int64_t i = 0; i < m; ++i) {
          for (int64_t j = 0; j < n; ++j) {
            double ref = 0.0;
            for (int64_t p = 0; p < k; ++p) {
              const float av = ta ? a[p * m + i] : a[i * k + p];
              const float bv = tb ? b[j * k + p] : b[p * n + j];
              ref += double(av) * bv;
            }
            CHECK(out[i * n + j] == doctest::Approx(ref).epsilon(1e-5));
          }
        }
      }
    }
  }

  TEST_CASE("causal softmax zeroes entries above the diagonal") {
    Tensor x({3, 3}, std::vector<float>(9, 0.5f));
    kernels::softmax_rows(x.data(), 3, 3, true);
    CHECK(x[1] == 0.0f);
    CHECK(x[2] == 0.0f);
    CHECK(x[5] == 0.0f);
    CHECK(x[0] == doctest::Approx(1.0));
    CHECK(x[3] == doctest::Approx(0.5));
  }

  TEST_CASE("softmax is stable for large logits") {
    Tensor x({1, 3}, {1000.0f, 1000.0f, -1000.0f});
    kernels::softmax_rows(x.data(), 1, 3);
    CHECK(x[0] == doctest::Approx(0.5));
    CHECK(x[2] == 0.0f);
  }
}

TEST_SUITE("attention math") {
  TEST_CASE("compute_attention matches the naive oracle on random shapes") {
    Rng rng(2024);
    double worst = 0.0, worst_row = 0.0;
    for (int trial = 0; trial < 200; ++trial) {
      const int64_t n = 1 + static_cast<int64_t>(rng.uniform() * 40);
      const int64_t m = 1 + static_cast<int64_t>(rng.uniform() * 80);
      const int d = 1 + static_cast<int>(rng.uniform() * 64);
      const Tensor q = random_tensor(rng, {n, d}, 2.0f), k = random_tensor(rng, {m, d}, 2.0f);
      const Tensor p = compute_attention(q, k, d);
      const auto ref = naive_attention(q, k, d);
      for (int64_t i = 0; i < p.numel(); ++i) worst = std::max(worst, std::abs(double(p[i]) - ref[i]));
      worst_row = std::max(worst_row, row_stochastic_error(p.reshaped({1, n, m})).first);
    }
    CHECK(worst <= 1e-5);
    CHECK(worst_row <= 1e-4);
  }

  TEST_CASE("compute_attention rejects inconsistent shapes") {
    CHECK_THROWS_AS(compute_attention(Tensor({2, 3}), Tensor({4, 5}), 3), ShapeError);
    CHECK_THROWS_AS(compute_attention(Tensor({2, 3}), Tensor({4, 3}), 0), ValidationError);
  }

  TEST_CASE("row_stochastic_error reports row-sum deviation and range") {
    Tensor good({1, 2, 2}, {0.25f, 0.75f, 1.0f, 0.0f});
    CHECK(row_stochastic_error(good).first == doctest::Approx(0.0));
    CHECK(row_stochastic_error(good).second);
    Tensor bad({1, 1, 2}, {0.7f, 0.7f});
    CHECK(row_stochastic_error(bad).first == doctest::Approx(0.4).epsilon(1e-5));
    Tensor negative({1, 1, 2}, {1.5f, -0.5f});
    CHECK_FALSE(row_stochastic_error(negative).second);
  }
}

TEST_SUITE("autograd") {
  TEST_CASE("linear, norms and activations match central differences") {
    Rng rng(5);
    const Tensor x = rng.randn({3, 4});
    const Tensor w = rng.randn({5, 4}), b = rng.randn({5});
    const Tensor gamma = rng.randn({4}), beta = rng.randn({4});
    CHECK(gradient_error(x, [&](const ag::Var& v) { return ag::linear(v, w, &b); }, 1) < 1e-2);
    CHECK(gradient_error(x, [&](const ag::Var& v) { return ag::layer_norm(v, gamma, beta, 1e-5f); }, 2) < 2e-2);
    CHECK(gradient_error(x, [](const ag::Var& v) { return ag::silu(v); }, 3) < 1e-2);
    CHECK(gradient_error(x, [](const ag::Var& v) { return ag::gelu(v); }, 4) < 1e-2);
    CHECK(gradient_error(x, [](const ag::Var& v) { return ag::quick_gelu(v); }, 5) < 1e-2);
  }

  TEST_CASE("conv2d and group norm match central differences") {
    Rng rng(6);
    const Tensor x = rng.randn({4, 5, 5});
    const Tensor w = rng.randn({3, 4, 3, 3}), b = rng.randn({3});
    CHECK(gradient_error(x, [&](const ag::Var& v) { return ag::conv2d(v, w, &b, ag::ConvSpec::same(1)); }, 6) <
          1e-2);
    CHECK(gradient_error(x, [&](const ag::Var& v) { return ag::conv2d(v, w, &b, ag::ConvSpec::same(1, 2)); }, 7) <
          1e-2);
    const Tensor gamma = rng.randn({4}), beta = rng.randn({4});
    CHECK(gradient_error(x, [&](const ag::Var& v) { return ag::group_norm(v, 2, gamma, beta, 1e-5f); }, 8) < 2e-2);
  }

  TEST_CASE("attention gradients flow to queries, keys and values") {
    Rng rng(7);
    const Tensor q = rng.randn({4, 6}), k = rng.randn({5, 6}), v = rng.randn({5, 6});
    auto wrt_q = [&](const ag::Var& x) { return ag::attention(x, ag::Var(k), ag::Var(v), 2, false, {}); };
    auto wrt_k = [&](const ag::Var& x) { return ag::attention(ag::Var(q), x, ag::Var(v), 2, false, {}); };
    auto wrt_v = [&](const ag::Var& x) { return ag::attention(ag::Var(q), ag::Var(k), x, 2, false, {}); };
    CHECK(gradient_error(q, wrt_q, 9) < 1e-2);
    CHECK(gradient_error(k, wrt_k, 10) < 1e-2);
    CHECK(gradient_error(v, wrt_v, 11) < 1e-2);
  }

  TEST_CASE("a hook that overwrites probabilities changes the output") {
    Rng rng(8);
    const Tensor q = rng.randn({3, 4}), k = rng.randn({3, 4}), v = rng.randn({3, 4});
    ag::NoGradGuard guard;
    const Tensor base = ag::attention(ag::Var(q), ag::Var(k), ag::Var(v), 1, false, {}).value();
    const Tensor uniform = ag::attention(ag::Var(q), ag::Var(k), ag::Var(v), 1, false, [](Tensor& p) {
                             for (float& x : p.values()) x = 1.0f / 3.0f;
                             return true;
                           }).value();
    CHECK_FALSE(base.bit_equal(uniform));
    // Uniform weights give the column mean of V for every query.
    for (int c = 0; c < 4; ++c) {
      const double mean = (v[c] + v[4 + c] + v[8 + c]) / 3.0;
      CHECK(uniform[c] == doctest::Approx(mean).epsilon(1e-5));
      CHECK(uniform[8 + c] == doctest::Approx(mean).epsilon(1e-5));
    }
  }
}

TEST_SUITE("scheduler") {
  TEST_CASE("alpha_bar follows the scaled-linear schedule") {
    const ScheduleConfig cfg = ScheduleConfig::sd15();
    const DdimScheduler sched(cfg, 50);
    std::vector<double> cumprod;
    double running = 1.0;
    const double s0 = std::sqrt(cfg.beta_start), s1 = std::sqrt(cfg.beta_end);
    for (int i = 0; i < cfg.num_train_timesteps; ++i) {
      const double root = s0 + (s1 - s0) * i / (cfg.num_train_timesteps - 1);
      running *= 1.0 - root * root;
      cumprod.push_back(running);
    }
    for (int k = 1; k <= 50; ++k) {
      CHECK(sched.timestep(k) == (k - 1) * 20 + 1);
      CHECK(sched.alpha_bar(k) == doctest::Approx(cumprod[static_cast<size_t>(sched.timestep(k))]).epsilon(1e-5));
    }
    CHECK(sched.alpha_bar(0) == doctest::Approx(cumprod[0]).epsilon(1e-6));
    CHECK_THROWS(sched.timestep(51));
  }

  TEST_CASE("deterministic step matches the closed-form update") {
    const DdimScheduler sched(ScheduleConfig::sd15(), 10);
    Rng rng(4);
    const Tensor z = rng.randn({2, 3, 3}), eps = rng.randn({2, 3, 3});
    const int k = 6;
    const Tensor prev = sched.step(eps, k, z);
    const double a = sched.alpha_bar(k), ap = sched.alpha_bar(k - 1);
    for (int64_t i = 0; i < z.numel(); ++i) {
      const double x0 = (z[i] - std::sqrt(1.0 - a) * eps[i]) / std::sqrt(a);
      const double ref = std::sqrt(ap) * x0 + std::sqrt(1.0 - ap) * eps[i];
      CHECK(prev[i] == doctest::Approx(ref).epsilon(1e-5));
    }
  }

  TEST_CASE("one inversion step undoes one denoising step for a shared noise estimate") {
    for (int steps : {1, 10, 50}) {
      const DdimScheduler sched(ScheduleConfig::sd15(), steps);
      Rng rng(static_cast<uint64_t>(steps));
      const Tensor z = rng.randn({4, 4, 4}), eps = rng.randn({4, 4, 4});
      for (int k = 1; k <= steps; k += std::max(1, steps / 5)) {
        const Tensor back = sched.invert_step(eps, k, sched.step(eps, k, z));
        CHECK(max_abs_diff(back, z) < 1e-4f);
      }
    }
  }
}
