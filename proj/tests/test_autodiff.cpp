// Copyright (c) 2026, The survlm Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>
#include <functional>

#include "survlm/rng.hpp"
#include "survlm/tensor.hpp"

using namespace survlm;

namespace {

using Fn = std::function<Tensor(const std::vector<Tensor>&)>;

Tensor random_tensor(Shape shape, std::uint64_t stream, double sd = 1.0) {
  CounterRng rng(99, stream);
  std::vector<double> v(shape_numel(shape));
  for (double& x : v) x = rng.normal(0.0, sd);
  return Tensor::from(std::move(shape), std::move(v), true);
}

// Reduces an arbitrary output to a scalar through fixed random weights so
// every output coordinate contributes to the gradient.
Tensor project(const Tensor& out) {
  if (out.numel() == 1) return reshape(out, {});
  CounterRng rng(7, 7);
  std::vector<double> w(out.numel());
  for (double& x : w) x = rng.uniform(-1.0, 1.0);
  return sum(mul(out, Tensor::from(out.shape(), std::move(w))));
}

// Central differences against the analytic gradient for every input
// coordinate.
void expect_gradients_match(const Fn& f, std::vector<Tensor> inputs, double tol = 1e-6) {
  for (auto& t : inputs) t.zero_grad();
  project(f(inputs)).backward();
  const double h = 1e-6;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    if (!inputs[k].requires_grad()) continue;
    auto analytic = inputs[k].grad();
    ASSERT_EQ(analytic.size(), inputs[k].numel());
    for (std::size_t i = 0; i < inputs[k].numel(); ++i) {
      double saved = inputs[k].data()[i];
      double fp, fm;
      {
        NoGradGuard guard;
        inputs[k].mutable_data()[i] = saved + h;
        fp = project(f(inputs)).item();
        inputs[k].mutable_data()[i] = saved - h;
        fm = project(f(inputs)).item();
        inputs[k].mutable_data()[i] = saved;
      }
      double numeric = (fp - fm) / (2 * h);
      double scale = std::max({std::abs(numeric), std::abs(analytic[i]), 1.0});
      EXPECT_NEAR(analytic[i], numeric, tol * scale) << "input " << k << " index " << i;
    }
  }
}

}  // namespace

TEST(Autodiff, Elementwise) {
  auto a = random_tensor({3, 4}, 1), b = random_tensor({3, 4}, 2);
  expect_gradients_match([](auto& in) { return add(in[0], in[1]); }, {a, b});
  expect_gradients_match([](auto& in) { return sub(in[0], in[1]); }, {a, b});
  expect_gradients_match([](auto& in) { return mul(in[0], in[1]); }, {a, b});
  expect_gradients_match([](auto& in) { return scale(in[0], -2.5); }, {a});
  expect_gradients_match([](auto& in) { return gelu(in[0]); }, {a});
  expect_gradients_match([](auto& in) { return reshape(in[0], {4, 3}); }, {a});
}

TEST(Autodiff, Reductions) {
  auto a = random_tensor({2, 5}, 3), b = random_tensor({2, 5}, 4);
  expect_gradients_match([](auto& in) { return sum(in[0]); }, {a});
  expect_gradients_match([](auto& in) { return mean(in[0]); }, {a});
  expect_gradients_match([](auto& in) { return dot(in[0], in[1]); }, {a, b});
  expect_gradients_match([](auto& in) { return norm2(in[0]); }, {a});
  expect_gradients_match([](auto& in) { return mean_rows(in[0]); }, {a});
  expect_gradients_match([](auto& in) { return add_all({in[0], in[1], in[0]}); }, {a, b});
}

TEST(Autodiff, NormAtZeroHasZeroSubgradient) {
  auto z = Tensor::zeros({4}, true);
  norm2(z).backward();
  for (double g : z.grad()) EXPECT_EQ(g, 0.0);
}

TEST(Autodiff, MatrixProducts) {
  auto a = random_tensor({3, 4}, 5), b = random_tensor({4, 2}, 6), c = random_tensor({5, 4}, 7);
  auto x = random_tensor({4}, 8), bias = random_tensor({2}, 9);
  expect_gradients_match([](auto& in) { return matmul(in[0], in[1]); }, {a, b});
  expect_gradients_match([](auto& in) { return matmul_nt(in[0], in[1]); }, {a, c});
  expect_gradients_match([](auto& in) { return linear_vec(in[0], in[1]); }, {c, x});
  expect_gradients_match(
      [](auto& in) { return add_row_broadcast(matmul(in[0], in[1]), in[2]); }, {a, b, bias});
}

TEST(Autodiff, NormalizationAndSoftmax) {
  auto x = random_tensor({3, 6}, 10), g = random_tensor({6}, 11), s = random_tensor({6}, 12);
  auto sq = random_tensor({4, 4}, 13), v = random_tensor({5}, 14);
  expect_gradients_match([](auto& in) { return layer_norm(in[0], in[1], in[2]); }, {x, g, s},
                         1e-5);
  expect_gradients_match([](auto& in) { return softmax(in[0]); }, {x});
  expect_gradients_match([](auto& in) { return softmax(in[0]); }, {v});
  expect_gradients_match([](auto& in) { return causal_softmax(in[0]); }, {sq});
}

TEST(Autodiff, IndexingAndConcatenation) {
  auto t = random_tensor({6, 3}, 15), u = random_tensor({2, 3}, 16), w = random_tensor({6, 2}, 17);
  auto s1 = random_tensor({3}, 18), s2 = random_tensor({3}, 19);
  expect_gradients_match([](auto& in) { return embedding(in[0], {1, 4, 1, 0}); }, {t});
  expect_gradients_match([](auto& in) { return slice_rows(in[0], 2, 3); }, {t});
  expect_gradients_match([](auto& in) { return row(in[0], 5); }, {t});
  expect_gradients_match([](auto& in) { return slice_cols(in[0], 1, 2); }, {t});
  expect_gradients_match([](auto& in) { return concat_rows({in[0], in[1]}); }, {t, u});
  expect_gradients_match([](auto& in) { return concat_cols({in[0], in[1]}); }, {t, w});
  expect_gradients_match([](auto& in) { return stack({in[0], in[1], in[0]}); }, {s1, s2});
}

TEST(Autodiff, SharedSubgraphAccumulates) {
  auto a = random_tensor({4}, 20);
  // f(a) = sum(a * a) + sum(gelu(a) * a) reuses a along several paths
  expect_gradients_match([](auto& in) { return add(dot(in[0], in[0]), dot(gelu(in[0]), in[0])); },
                         {a});
}

TEST(Autodiff, AttentionBlock) {
  auto x = random_tensor({4, 6}, 21, 0.5), wq = random_tensor({6, 6}, 22, 0.4);
  auto wk = random_tensor({6, 6}, 23, 0.4), wv = random_tensor({6, 6}, 24, 0.4);
  expect_gradients_match(
      [](auto& in) {
        auto q = matmul_nt(in[0], in[1]), k = matmul_nt(in[0], in[2]), v = matmul_nt(in[0], in[3]);
        return matmul(causal_softmax(scale(matmul_nt(q, k), 0.5)), v);
      },
      {x, wq, wk, wv}, 1e-5);
}

TEST(Autodiff, CausalSoftmaxMasksFuture) {
  auto s = random_tensor({3, 3}, 25);
  auto p = causal_softmax(s);
  for (std::size_t i = 0; i < 3; ++i) {
    double total = 0;
    for (std::size_t j = 0; j < 3; ++j) {
      if (j > i) {
        EXPECT_EQ(p.at(i, j), 0.0);
      }
      total += p.at(i, j);
    }
    EXPECT_NEAR(total, 1.0, 1e-15);
  }
}

TEST(Autodiff, NoGradGuardBuildsNoGraph) {
  auto a = random_tensor({3}, 26);
  Tensor out;
  {
    NoGradGuard guard;
    out = sum(mul(a, a));
  }
  EXPECT_FALSE(out.requires_grad());
  out.backward();
  EXPECT_FALSE(a.has_grad());
}

TEST(Autodiff, DetachStopsGradient) {
  auto a = random_tensor({3}, 27);
  sum(mul(a.detach(), a)).backward();
  for (std::size_t i = 0; i < 3; ++i) EXPECT_DOUBLE_EQ(a.grad()[i], a.data()[i]);
}

TEST(Autodiff, ShapeErrors) {
  auto a = random_tensor({2, 3}, 28), b = random_tensor({2, 2}, 29);
  EXPECT_THROW(add(a, b), std::invalid_argument);
  EXPECT_THROW(matmul(a, b), std::invalid_argument);
  EXPECT_THROW(Tensor::from({2, 2}, {1.0}), std::invalid_argument);
  EXPECT_THROW(a.backward(), std::logic_error);
}

TEST(Autodiff, MatmulMatchesNaiveProduct) {
  auto a = random_tensor({3, 5}, 30), b = random_tensor({5, 4}, 31);
  auto c = matmul(a, b);
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 4; ++j) {
      double s = 0;
      for (std::size_t k = 0; k < 5; ++k) s += a.at(i, k) * b.at(k, j);
      EXPECT_NEAR(c.at(i, j), s, 1e-14);
    }
}
