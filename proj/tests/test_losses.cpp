// Copyright (c) 2026, The survlm Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>
#include <functional>

#include "survlm/losses.hpp"
#include "survlm/rng.hpp"

using namespace survlm;

namespace {

std::vector<SurvivalRecord> cohort(const std::vector<double>& times, const std::vector<int>& events) {
  std::vector<SurvivalRecord> out;
  for (std::size_t i = 0; i < times.size(); ++i)
    out.push_back({"p" + std::to_string(i), times[i], events[i] != 0});
  return out;
}

std::vector<SurvivalRecord> random_cohort(CounterRng& rng, std::size_t n, bool ensure_event) {
  std::vector<SurvivalRecord> out;
  for (std::size_t i = 0; i < n; ++i)
    out.push_back({"p" + std::to_string(i), static_cast<double>(rng.uniform_int(1, 6)),
                   rng.uniform() < 0.6});
  if (ensure_event) out[0].event = true;
  return out;
}

std::vector<double> random_values(CounterRng& rng, std::size_t n, double sd = 1.0) {
  std::vector<double> v(n);
  for (double& x : v) x = rng.normal(0.0, sd);
  return v;
}

std::vector<double> random_simplex_rows(CounterRng& rng, std::size_t n, std::size_t k) {
  std::vector<double> p(n * k);
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0;
    for (std::size_t l = 0; l < k; ++l) s += (p[i * k + l] = rng.uniform(0.05, 1.0));
    for (std::size_t l = 0; l < k; ++l) p[i * k + l] /= s;
  }
  return p;
}

// Scalar oracles written directly from the loss definitions.

double oracle_cox(const std::vector<double>& h, const std::vector<SurvivalRecord>& r) {
  double total = 0;
  int events = 0;
  for (std::size_t i = 0; i < r.size(); ++i) {
    if (!r[i].event) continue;
    ++events;
    double s = 0;
    for (std::size_t j = 0; j < r.size(); ++j)
      if (r[j].time >= r[i].time) s += std::exp(h[j]);
    total += h[i] - std::log(s);
  }
  return -total / events;
}

double oracle_deephit(const std::vector<double>& p, std::size_t k,
                      const std::vector<SurvivalRecord>& r, const TimeGrid& grid) {
  double total = 0;
  for (std::size_t i = 0; i < r.size(); ++i) {
    std::size_t b = 0;
    while (b + 1 < k && r[i].time >= grid.edges[b + 1]) ++b;
    if (r[i].event) {
      total += std::log(p[i * k + b]);
    } else if (b + 1 < k) {
      double tail = 0;
      for (std::size_t l = b + 1; l < k; ++l) tail += p[i * k + l];
      total += std::log(tail);
    }
  }
  return -total / static_cast<double>(r.size());
}

double oracle_dispersion_continuous(const std::vector<double>& z, std::size_t d,
                                    const std::vector<double>& t, double sigma) {
  const std::size_t m = t.size();
  double total = 0, pairs = 0;
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < m; ++j) {
      if (i == j) continue;
      double sq = 0;
      for (std::size_t c = 0; c < d; ++c) sq += (z[i * d + c] - z[j * d + c]) * (z[i * d + c] - z[j * d + c]);
      total += std::exp(-(t[i] - t[j]) * (t[i] - t[j]) / (2 * sigma * sigma)) * std::sqrt(sq);
      pairs += 1;
    }
  return total / pairs;
}

double oracle_dispersion_discrete(const std::vector<double>& mu, std::size_t k, std::size_t d,
                                  double tau) {
  double total = 0;
  for (std::size_t i = 0; i < k; ++i) {
    double s = 0;
    for (std::size_t j = 0; j < k; ++j) {
      if (j == i) continue;
      double dotp = 0;
      for (std::size_t c = 0; c < d; ++c) dotp += mu[i * d + c] * mu[j * d + c];
      s += std::exp(dotp / tau);
    }
    total += std::log(s / static_cast<double>(k));
  }
  return total / static_cast<double>(k);
}

double oracle_lm(const std::vector<double>& logits, std::size_t v, const std::vector<int>& targets,
                 const std::vector<bool>& mask) {
  double total = 0;
  int count = 0;
  for (std::size_t i = 0; i < targets.size(); ++i) {
    if (!mask[i]) continue;
    double z = 0;
    for (std::size_t j = 0; j < v; ++j) z += std::exp(logits[i * v + j]);
    total += std::log(z) - logits[i * v + targets[i]];
    ++count;
  }
  return total / count;
}

// Central-difference check of d loss / d input for a fused loss.
double max_gradient_error(const std::function<Tensor(const Tensor&)>& loss, Tensor input,
                          double h = 1e-5) {
  input.zero_grad();
  loss(input).backward();
  auto analytic = input.grad();
  double worst = 0;
  for (std::size_t i = 0; i < input.numel(); ++i) {
    double saved = input.data()[i];
    input.mutable_data()[i] = saved + h;
    double fp = loss(input.detach()).item();
    input.mutable_data()[i] = saved - h;
    double fm = loss(input.detach()).item();
    input.mutable_data()[i] = saved;
    double numeric = (fp - fm) / (2 * h);
    double err = std::abs(numeric - analytic[i]) /
                 std::max({std::abs(numeric), std::abs(analytic[i]), 1e-2});
    worst = std::max(worst, err);
  }
  return worst;
}

}  // namespace

// --- lm_loss ----------------------------------------------------------------

TEST(LmLoss, UniformLogits) {
  auto logits = Tensor::zeros({3, 8});
  EXPECT_NEAR(lm_loss(logits, {1, 5, 7}, {true, false, true}).item(), std::log(8.0), 1e-12);
}

TEST(LmLoss, SaturatedCorrectLogits) {
  // log(1 + (V - 1) e^-20) with V = 2
  std::vector<double> v{20, 0, 0, 20};
  EXPECT_LT(lm_loss(Tensor::matrix(2, 2, v), {0, 1}, {true, true}).item(), 1e-8);
}

TEST(LmLoss, MatchesScalarOracleAndBounds) {
  CounterRng rng(1, 0);
  for (int trial = 0; trial < 20; ++trial) {
    auto logits = random_values(rng, 5 * 11, 2.0);
    std::vector<int> targets;
    std::vector<bool> mask;
    for (int i = 0; i < 5; ++i) {
      targets.push_back(static_cast<int>(rng.uniform_int(0, 10)));
      mask.push_back(i == 0 || rng.uniform() < 0.5);
    }
    double got = lm_loss(Tensor::matrix(5, 11, logits), targets, mask).item();
    EXPECT_NEAR(got, oracle_lm(logits, 11, targets, mask), 1e-12);
    EXPECT_GE(got, 0.0);
  }
}

TEST(LmLoss, Errors) {
  EXPECT_THROW(lm_loss(Tensor::zeros({2, 4}), {0, 1}, {false, false}), std::invalid_argument);
  EXPECT_THROW(lm_loss(Tensor::zeros({2, 4}), {0, 9}, {true, true}), std::out_of_range);
}

// --- cox_loss ---------------------------------------------------------------

TEST(CoxLoss, ClosedForms) {
  auto two = cox_loss(Tensor::vector({0.0, 0.0}), cohort({1, 2}, {1, 1}));
  EXPECT_NEAR(two.item(), std::log(2.0) / 2.0, 1e-12);
  for (double h : {-3.0, 0.0, 12.5})
    EXPECT_NEAR(cox_loss(Tensor::vector({h}), cohort({4}, {1})).item(), 0.0, 1e-15);
  EXPECT_THROW(cox_loss(Tensor::vector({0.0, 1.0}), cohort({1, 2}, {0, 0})), std::invalid_argument);
}

TEST(CoxLoss, MatchesDoubleLoopOracle) {
  CounterRng rng(2, 0);
  for (int trial = 0; trial < 50; ++trial) {
    auto recs = random_cohort(rng, 10, true);
    auto h = random_values(rng, 10);
    EXPECT_NEAR(cox_loss(Tensor::vector(h), recs).item(), oracle_cox(h, recs), 1e-12);
  }
}

TEST(CoxLoss, ShiftInvarianceAndMonotonicity) {
  CounterRng rng(3, 0);
  for (int trial = 0; trial < 30; ++trial) {
    auto recs = random_cohort(rng, 8, true);
    auto h = random_values(rng, 8);
    auto shifted = h;
    for (double& x : shifted) x += 7.0;
    double base = cox_loss(Tensor::vector(h), recs).item();
    EXPECT_LT(std::abs(cox_loss(Tensor::vector(shifted), recs).item() - base), 1e-9);
    // The earliest event, when untied, appears in no other event's risk set,
    // so raising its score can only help.
    std::size_t first = recs.size();
    for (std::size_t i = 0; i < recs.size(); ++i)
      if (recs[i].event && (first == recs.size() || recs[i].time < recs[first].time)) first = i;
    std::size_t tied = 0, risk_set = 0;
    for (const auto& r : recs) {
      tied += r.event && r.time == recs[first].time;
      risk_set += r.time >= recs[first].time;
    }
    if (tied > 1 || risk_set < 2) continue;
    auto raised = h;
    raised[first] += 1.0;
    EXPECT_LT(cox_loss(Tensor::vector(raised), recs).item(), base);
  }
}

TEST(CoxLoss, LargeRisksStayFinite) {
  auto v = cox_loss(Tensor::vector({800.0, 805.0, 790.0}), cohort({1, 2, 3}, {1, 1, 0}));
  EXPECT_TRUE(std::isfinite(v.item()));
}

TEST(CoxLoss, Gradients) {
  CounterRng rng(4, 0);
  for (int trial = 0; trial < 50; ++trial) {
    auto recs = random_cohort(rng, 2 + trial % 9, true);
    auto h = Tensor::vector(random_values(rng, recs.size()), true);
    EXPECT_LT(max_gradient_error([&](const Tensor& x) { return cox_loss(x, recs); }, h), 1e-6);
  }
}

// --- deephit_loss -----------------------------------------------------------

TEST(DeepHitLoss, ClosedForms) {
  TimeGrid grid{{0, 1, 2, 3, 4}};
  auto uniform = Tensor::matrix(1, 4, {0.25, 0.25, 0.25, 0.25});
  EXPECT_NEAR(deephit_loss(uniform, cohort({2.5}, {1}), grid).item(), std::log(4.0), 1e-12);
  // censored in the second bin leaves two bins of tail mass
  EXPECT_NEAR(deephit_loss(uniform, cohort({1.5}, {0}), grid).item(), std::log(2.0), 1e-12);
  EXPECT_EQ(deephit_loss(uniform, cohort({3.5}, {0}), grid).item(), 0.0);
}

TEST(DeepHitLoss, ZeroProbabilityIsFloored) {
  TimeGrid grid{{0, 1, 2}};
  auto v = deephit_loss(Tensor::matrix(1, 2, {1.0, 0.0}), cohort({1.5}, {1}), grid).item();
  EXPECT_NEAR(v, -std::log(kProbabilityFloor), 1e-9);
}

TEST(DeepHitLoss, Errors) {
  TimeGrid grid{{0, 1, 2}};
  EXPECT_THROW(deephit_loss(Tensor::matrix(1, 2, {0.7, 0.7}), cohort({1}, {1}), grid),
               std::invalid_argument);
  EXPECT_THROW(deephit_loss(Tensor::matrix(1, 3, {0.2, 0.3, 0.5}), cohort({1}, {1}), grid),
               std::invalid_argument);
}

TEST(DeepHitLoss, MatchesOracle) {
  CounterRng rng(5, 0);
  TimeGrid grid{{0, 1.5, 3, 4.5, 6}};
  for (int trial = 0; trial < 50; ++trial) {
    auto recs = random_cohort(rng, 6, false);
    auto p = random_simplex_rows(rng, 6, 4);
    EXPECT_NEAR(deephit_loss(Tensor::matrix(6, 4, p), recs, grid).item(),
                oracle_deephit(p, 4, recs, grid), 1e-12);
  }
}

TEST(DeepHitLoss, MassTowardEventBinLowersLoss) {
  TimeGrid grid{{0, 1, 2, 3}};
  auto recs = cohort({1.5}, {1});
  double before = deephit_loss(Tensor::matrix(1, 3, {0.4, 0.3, 0.3}), recs, grid).item();
  double after = deephit_loss(Tensor::matrix(1, 3, {0.3, 0.4, 0.3}), recs, grid).item();
  EXPECT_LT(after, before);
}

TEST(DeepHitLoss, GradientsThroughSoftmax) {
  CounterRng rng(6, 0);
  TimeGrid grid{{0, 1.5, 3, 4.5, 6}};
  for (int trial = 0; trial < 50; ++trial) {
    auto recs = random_cohort(rng, 5, false);
    auto logits = Tensor::matrix(5, 4, random_values(rng, 20), true);
    EXPECT_LT(max_gradient_error(
                  [&](const Tensor& x) { return deephit_loss(softmax(x), recs, grid); }, logits),
              1e-6);
  }
}

TEST(TimeGridBins, ZeroBasedWithClosedLastBin) {
  TimeGrid grid{{0, 5.5, 10}};
  EXPECT_EQ(grid.bin_of(0.0), 0u);
  EXPECT_EQ(grid.bin_of(5.4), 0u);
  EXPECT_EQ(grid.bin_of(5.5), 1u);
  EXPECT_EQ(grid.bin_of(10.0), 1u);
  EXPECT_EQ(grid.bin_of(30.0), 1u);
  EXPECT_THROW(grid.bin_of(-1.0), std::out_of_range);
}

// --- dispersion -------------------------------------------------------------

TEST(DispersionContinuous, ClosedForms) {
  EXPECT_EQ(dispersion_continuous(Tensor::matrix(3, 2, {1, 2, 1, 2, 1, 2}), {1, 2, 3}, 1.0).item(), 0.0);
  EXPECT_NEAR(dispersion_continuous(Tensor::matrix(2, 1, {0, 1}), {4, 4}, 1.0).item(), 1.0, 1e-15);
  EXPECT_EQ(dispersion_continuous(Tensor::matrix(1, 3, {1, 2, 3}), {4}, 1.0).item(), 0.0);
  EXPECT_EQ(dispersion_continuous(Tensor::zeros({0, 3}), {}, 1.0).item(), 0.0);
  EXPECT_THROW(dispersion_continuous(Tensor::matrix(2, 1, {0, 1}), {4, 4}, 0.0), std::invalid_argument);
}

TEST(DispersionContinuous, MatchesOracleAndIsNonnegative) {
  CounterRng rng(7, 0);
  for (int trial = 0; trial < 50; ++trial) {
    auto z = random_values(rng, 5 * 3);
    auto t = random_values(rng, 5, 3.0);
    double got = dispersion_continuous(Tensor::matrix(5, 3, z), t, 2.0).item();
    EXPECT_NEAR(got, oracle_dispersion_continuous(z, 3, t, 2.0), 1e-12);
    EXPECT_GT(got, 0.0);
  }
}

TEST(DispersionContinuous, Gradients) {
  CounterRng rng(8, 0);
  for (int trial = 0; trial < 50; ++trial) {
    auto t = random_values(rng, 4, 2.0);
    auto z = Tensor::matrix(4, 3, random_values(rng, 12), true);
    EXPECT_LT(max_gradient_error([&](const Tensor& x) { return dispersion_continuous(x, t, 1.5); }, z),
              1e-6);
  }
}

TEST(DispersionDiscrete, ClosedForms) {
  EXPECT_NEAR(dispersion_discrete(Tensor::matrix(2, 2, {1, 0, 1, 0}), 1.0).item(),
              1.0 - std::log(2.0), 1e-12);
  EXPECT_NEAR(dispersion_discrete(Tensor::matrix(2, 2, {1, 0, 0, 1}), 1.0).item(), -std::log(2.0),
              1e-12);
  EXPECT_THROW(dispersion_discrete(Tensor::matrix(1, 2, {1, 0}), 1.0), std::invalid_argument);
  EXPECT_THROW(dispersion_discrete(Tensor::matrix(2, 2, {1, 0, 0, 1}), 0.0), std::invalid_argument);
}

TEST(DispersionDiscrete, MatchesOracle) {
  CounterRng rng(9, 0);
  for (int trial = 0; trial < 50; ++trial) {
    auto mu = random_values(rng, 4 * 3);
    EXPECT_NEAR(dispersion_discrete(Tensor::matrix(4, 3, mu), 0.5).item(),
                oracle_dispersion_discrete(mu, 4, 3, 0.5), 1e-12);
  }
}

TEST(DispersionDiscrete, Gradients) {
  CounterRng rng(10, 0);
  for (int trial = 0; trial < 50; ++trial) {
    auto mu = Tensor::matrix(3, 4, random_values(rng, 12, 0.7), true);
    EXPECT_LT(max_gradient_error([](const Tensor& x) { return dispersion_discrete(x, 0.5); }, mu), 1e-6);
  }
}

// --- alignment and total ------------------------------------------------------

TEST(AlignmentLoss, Values) {
  EXPECT_EQ(alignment_loss(Tensor::vector({1, 2}), Tensor::vector({1, 2})).item(), 0.0);
  EXPECT_EQ(alignment_loss(Tensor::vector({1, 0}), Tensor::vector({0, 0})).item(), 1.0);
  EXPECT_THROW(alignment_loss(Tensor::vector({1, 0}), Tensor::vector({0})), std::invalid_argument);
  CounterRng rng(11, 0);
  auto a = random_values(rng, 16), b = random_values(rng, 16);
  double sq = 0;
  for (int i = 0; i < 16; ++i) sq += (a[i] - b[i]) * (a[i] - b[i]);
  EXPECT_NEAR(alignment_loss(Tensor::vector(a), Tensor::vector(b)).item(), std::sqrt(sq), 1e-12);
}

TEST(TotalLoss, ArithmeticAndReassembly) {
  auto t = total_loss(Tensor::scalar(1), Tensor::scalar(2), Tensor::scalar(3), Tensor::scalar(4), 0.5);
  EXPECT_EQ(t.breakdown.total, 9.0);
  CounterRng rng(12, 0);
  for (int trial = 0; trial < 100; ++trial) {
    auto v = random_values(rng, 4, 3.0);
    auto r = total_loss(Tensor::scalar(v[0]), Tensor::scalar(v[1]), Tensor::scalar(v[2]),
                        Tensor::scalar(v[3]), 0.5);
    EXPECT_EQ(reassemble_total(r.breakdown), r.breakdown.total);
    EXPECT_EQ(r.total.item(), r.breakdown.total);
  }
}

TEST(TotalLoss, ZeroAlphaIgnoresSurvival) {
  auto surv = Tensor::scalar(123.0, true);
  auto a = total_loss(Tensor::scalar(1), surv, Tensor::scalar(0), Tensor::scalar(0), 0.0);
  auto b = total_loss(Tensor::scalar(1), Tensor::scalar(-5), Tensor::scalar(0), Tensor::scalar(0), 0.0);
  EXPECT_EQ(a.breakdown.total, b.breakdown.total);
  a.total.backward();
  EXPECT_EQ(surv.grad()[0], 0.0);
}

TEST(TotalLoss, GradientFlowsThroughAllTerms) {
  auto lm = Tensor::scalar(1, true), s = Tensor::scalar(1, true), d = Tensor::scalar(1, true),
       al = Tensor::scalar(1, true);
  total_loss(lm, s, d, al, 0.5).total.backward();
  EXPECT_EQ(lm.grad()[0], 1.0);
  EXPECT_EQ(s.grad()[0], 0.5);
  EXPECT_EQ(d.grad()[0], 1.0);
  EXPECT_EQ(al.grad()[0], 1.0);
}
