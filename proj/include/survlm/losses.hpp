// Copyright (c) 2026, The survlm Authors
// SPDX-License-Identifier: Apache-2.0
//
// Training objectives: masked language-model NLL, Cox partial likelihood,
// discrete-time (DeepHit) likelihood, the two dispersion regularizers,
// hidden-state alignment and the weighted total.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include "survlm/survstats.hpp"
#include "survlm/tensor.hpp"

namespace survlm {

inline constexpr double kProbabilityFloor = 1e-12;

// K bins over event time. bin_of() is 0-based: bin k covers
// [edges[k], edges[k+1]), the last bin is closed on the right, and times
// past the last edge fall into the last bin.
struct TimeGrid {
  std::vector<double> edges;

  std::size_t bins() const { return edges.empty() ? 0 : edges.size() - 1; }

  std::size_t bin_of(double t) const {
    if (edges.size() < 2) throw std::logic_error("TimeGrid: fewer than two edges");
    if (t < edges.front()) throw std::out_of_range("TimeGrid: negative time");
    auto it = std::upper_bound(edges.begin(), edges.end(), t);
    const auto k = static_cast<std::size_t>(it - edges.begin());
    return std::min(k - 1, bins() - 1);
  }
};

struct LossBreakdown {
  double lm = 0.0;
  double surv = 0.0;
  double dispersion = 0.0;
  double alignment = 0.0;
  double total = 0.0;
  double alpha = 0.0;
};

struct TotalLoss {
  Tensor total;
  LossBreakdown breakdown;
};

namespace detail {

inline double log_sum_exp(const double* x, std::size_t n) {
  const double mx = *std::max_element(x, x + n);
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) s += std::exp(x[i] - mx);
  return mx + std::log(s);
}

}  // namespace detail

// Mean over supervised positions of -log softmax(logits_i)[target_i].
// Row i of logits must already be the prediction for target_ids[i].
inline Tensor lm_loss(const Tensor& logits, const std::vector<int>& target_ids,
                      const std::vector<bool>& loss_mask) {
  detail::require_rank(logits, 2, "lm_loss");
  const std::size_t len = logits.dim(0), vocab = logits.dim(1);
  if (vocab < 2) throw std::invalid_argument("lm_loss: vocabulary must have at least 2 entries");
  if (target_ids.size() != len || loss_mask.size() != len)
    throw std::invalid_argument("lm_loss: targets and mask must match logits rows");
  std::size_t supervised = 0;
  for (std::size_t i = 0; i < len; ++i) {
    if (!loss_mask[i]) continue;
    if (target_ids[i] < 0 || static_cast<std::size_t>(target_ids[i]) >= vocab)
      throw std::out_of_range("lm_loss: target id outside vocabulary");
    ++supervised;
  }
  if (supervised == 0) throw std::invalid_argument("no supervised tokens");

  const double* x = logits.data().data();
  double total = 0.0;
  for (std::size_t i = 0; i < len; ++i) {
    if (!loss_mask[i]) continue;
    const double* row = x + i * vocab;
    total += detail::log_sum_exp(row, vocab) - row[target_ids[i]];
  }
  const double inv = 1.0 / static_cast<double>(supervised);
  return make_op({}, {total * inv}, {logits},
                 [len, vocab, inv, target_ids, loss_mask](detail::Node& self) {
                   auto* g = detail::grad_of(self, 0);
                   if (!g) return;
                   const double* x = self.parents[0]->value.data();
                   const double up = self.grad[0] * inv;
                   for (std::size_t i = 0; i < len; ++i) {
                     if (!loss_mask[i]) continue;
                     const double* row = x + i * vocab;
                     const double lse = detail::log_sum_exp(row, vocab);
                     for (std::size_t j = 0; j < vocab; ++j)
                       (*g)[i * vocab + j] += up * std::exp(row[j] - lse);
                     (*g)[i * vocab + static_cast<std::size_t>(target_ids[i])] -= up;
                   }
                 });
}

// Negative Cox partial log-likelihood averaged over events, Breslow ties
// (every event at time T shares the full risk set {j : T_j >= T}).
inline Tensor cox_loss(const Tensor& risks, const std::vector<SurvivalRecord>& records) {
  detail::require_rank(risks, 1, "cox_loss");
  const std::size_t n = risks.numel();
  if (records.size() != n) throw std::invalid_argument("cox_loss: risks and records differ in length");
  std::size_t events = 0;
  for (const auto& r : records) events += r.event ? 1 : 0;
  if (events == 0) throw std::invalid_argument("no events for partial likelihood");

  const double* h = risks.data().data();
  // Per-event log-sum-exp over its risk set, with max subtraction.
  std::vector<double> lse(n, 0.0);
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    if (!records[i].event) continue;
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < n; ++j)
      if (records[j].time >= records[i].time) mx = std::max(mx, h[j]);
    double s = 0.0;
    for (std::size_t j = 0; j < n; ++j)
      if (records[j].time >= records[i].time) s += std::exp(h[j] - mx);
    lse[i] = mx + std::log(s);
    total += h[i] - lse[i];
  }
  const double inv = 1.0 / static_cast<double>(events);
  return make_op({}, {-total * inv}, {risks}, [n, inv, records, lse](detail::Node& self) {
    auto* g = detail::grad_of(self, 0);
    if (!g) return;
    const double* h = self.parents[0]->value.data();
    const double up = self.grad[0] * inv;
    for (std::size_t i = 0; i < n; ++i) {
      if (!records[i].event) continue;
      (*g)[i] -= up;
      for (std::size_t j = 0; j < n; ++j)
        if (records[j].time >= records[i].time) (*g)[j] += up * std::exp(h[j] - lse[i]);
    }
  });
}

inline Tensor cox_loss(const std::vector<Tensor>& risks, const std::vector<SurvivalRecord>& records) {
  return cox_loss(stack(risks), records);
}

// DeepHit likelihood: events score log p at their bin, censored records
// score the log of the mass strictly after their censoring bin. Censoring
// in the last bin leaves an empty tail and contributes 0.
inline Tensor deephit_loss(const Tensor& probs, const std::vector<SurvivalRecord>& records,
                           const TimeGrid& grid) {
  detail::require_rank(probs, 2, "deephit_loss");
  const std::size_t n = probs.dim(0), k = probs.dim(1);
  if (records.size() != n) throw std::invalid_argument("deephit_loss: probs and records differ in length");
  if (n == 0) throw std::invalid_argument("deephit_loss: empty batch");
  if (grid.bins() != k)
    throw std::invalid_argument("deephit_loss: grid has " + std::to_string(grid.bins()) +
                                " bins, probs have " + std::to_string(k));
  const double* p = probs.data().data();
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0.0;
    for (std::size_t l = 0; l < k; ++l) s += p[i * k + l];
    if (std::abs(s - 1.0) > 1e-6)
      throw std::invalid_argument("deephit_loss: probability row " + std::to_string(i) +
                                  " sums to " + std::to_string(s));
  }
  std::vector<std::size_t> bin(n);
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    bin[i] = grid.bin_of(records[i].time);
    if (records[i].event) {
      total += std::log(std::max(p[i * k + bin[i]], kProbabilityFloor));
    } else if (bin[i] + 1 < k) {
      double tail = 0.0;
      for (std::size_t l = bin[i] + 1; l < k; ++l) tail += p[i * k + l];
      total += std::log(std::max(tail, kProbabilityFloor));
    }
  }
  const double inv = 1.0 / static_cast<double>(n);
  return make_op({}, {-total * inv}, {probs}, [n, k, inv, records, bin](detail::Node& self) {
    auto* g = detail::grad_of(self, 0);
    if (!g) return;
    const double* p = self.parents[0]->value.data();
    const double up = self.grad[0] * inv;
    for (std::size_t i = 0; i < n; ++i) {
      if (records[i].event) {
        const double pe = p[i * k + bin[i]];
        if (pe > kProbabilityFloor) (*g)[i * k + bin[i]] -= up / pe;
      } else if (bin[i] + 1 < k) {
        double tail = 0.0;
        for (std::size_t l = bin[i] + 1; l < k; ++l) tail += p[i * k + l];
        if (tail > kProbabilityFloor)
          for (std::size_t l = bin[i] + 1; l < k; ++l) (*g)[i * k + l] -= up / tail;
      }
    }
  });
}

// Time-weighted mean pairwise distance among uncensored embeddings:
// sum over ordered pairs i != j of w_ij * ||z_i - z_j|| / (M (M - 1)),
// w_ij = exp(-(t_i - t_j)^2 / (2 sigma^2)).
inline Tensor dispersion_continuous(const Tensor& embeddings, const std::vector<double>& times,
                                    double sigma) {
  if (!(sigma > 0.0)) throw std::invalid_argument("dispersion_continuous: sigma must be positive");
  detail::require_rank(embeddings, 2, "dispersion_continuous");
  const std::size_t m = embeddings.dim(0), d = embeddings.dim(1);
  if (times.size() != m) throw std::invalid_argument("dispersion_continuous: times length mismatch");
  if (m <= 1) return make_op({}, {0.0}, {embeddings}, [](detail::Node&) {});

  const double* z = embeddings.data().data();
  const double two_sigma_sq = 2.0 * sigma * sigma;
  double total = 0.0;
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < m; ++j) {
      if (i == j) continue;
      double dist_sq = 0.0;
      for (std::size_t c = 0; c < d; ++c) {
        const double diff = z[i * d + c] - z[j * d + c];
        dist_sq += diff * diff;
      }
      const double dt = times[i] - times[j];
      total += std::exp(-dt * dt / two_sigma_sq) * std::sqrt(dist_sq);
    }
  const double inv = 1.0 / static_cast<double>(m * (m - 1));
  return make_op({}, {total * inv}, {embeddings},
                 [m, d, inv, times, two_sigma_sq](detail::Node& self) {
                   auto* g = detail::grad_of(self, 0);
                   if (!g) return;
                   const double* z = self.parents[0]->value.data();
                   const double up = self.grad[0] * inv;
                   for (std::size_t i = 0; i < m; ++i)
                     for (std::size_t j = i + 1; j < m; ++j) {
                       double dist_sq = 0.0;
                       for (std::size_t c = 0; c < d; ++c) {
                         const double diff = z[i * d + c] - z[j * d + c];
                         dist_sq += diff * diff;
                       }
                       if (dist_sq == 0.0) continue;
                       const double dt = times[i] - times[j];
                       // Both ordered pairs (i,j) and (j,i) carry the same term.
                       const double coef =
                           2.0 * up * std::exp(-dt * dt / two_sigma_sq) / std::sqrt(dist_sq);
                       for (std::size_t c = 0; c < d; ++c) {
                         const double diff = z[i * d + c] - z[j * d + c];
                         (*g)[i * d + c] += coef * diff;
                         (*g)[j * d + c] -= coef * diff;
                       }
                     }
                 });
}

// (1/K) sum_i log[(1/K) sum_{j != i} exp(mu_i . mu_j / tau)] over K group means.
inline Tensor dispersion_discrete(const Tensor& group_means, double tau) {
  if (!(tau > 0.0)) throw std::invalid_argument("dispersion_discrete: tau must be positive");
  detail::require_rank(group_means, 2, "dispersion_discrete");
  const std::size_t k = group_means.dim(0), d = group_means.dim(1);
  if (k < 2) throw std::invalid_argument("need two groups");

  const double* mu = group_means.data().data();
  std::vector<double> a(k * k, 0.0);
  for (std::size_t i = 0; i < k; ++i)
    for (std::size_t j = 0; j < k; ++j) {
      double s = 0.0;
      for (std::size_t c = 0; c < d; ++c) s += mu[i * d + c] * mu[j * d + c];
      a[i * k + j] = s / tau;
    }
  // q_ij = softmax over j != i of a_ij
  std::vector<double> q(k * k, 0.0);
  const double log_k = std::log(static_cast<double>(k));
  double total = 0.0;
  for (std::size_t i = 0; i < k; ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < k; ++j)
      if (j != i) mx = std::max(mx, a[i * k + j]);
    double s = 0.0;
    for (std::size_t j = 0; j < k; ++j)
      if (j != i) s += (q[i * k + j] = std::exp(a[i * k + j] - mx));
    for (std::size_t j = 0; j < k; ++j) q[i * k + j] /= s;
    total += mx + std::log(s) - log_k;
  }
  const double inv = 1.0 / static_cast<double>(k);
  return make_op({}, {total * inv}, {group_means}, [k, d, tau, inv, q](detail::Node& self) {
    auto* g = detail::grad_of(self, 0);
    if (!g) return;
    const double* mu = self.parents[0]->value.data();
    const double up = self.grad[0] * inv / tau;
    for (std::size_t m = 0; m < k; ++m)
      for (std::size_t j = 0; j < k; ++j) {
        if (j == m) continue;
        const double w = q[m * k + j] + q[j * k + m];
        for (std::size_t c = 0; c < d; ++c) (*g)[m * d + c] += up * w * mu[j * d + c];
      }
  });
}

inline Tensor alignment_loss(const Tensor& z_surv, const Tensor& z_pooled) {
  if (z_surv.shape() != z_pooled.shape())
    throw std::invalid_argument("alignment_loss: dimension mismatch " + shape_str(z_surv.shape()) +
                                " vs " + shape_str(z_pooled.shape()));
  return norm2(sub(z_surv, z_pooled));
}

// total = ((lm + alpha * surv) + dispersion) + alignment; the breakdown's
// total is the value of the returned tensor.
inline TotalLoss total_loss(const Tensor& lm, const Tensor& surv, const Tensor& dispersion,
                            const Tensor& alignment, double alpha) {
  if (!(alpha >= 0.0)) throw std::invalid_argument("total_loss: alpha must be nonnegative");
  Tensor t = add(add(add(lm, scale(surv, alpha)), dispersion), alignment);
  TotalLoss out{t, {}};
  out.breakdown.lm = lm.item();
  out.breakdown.surv = surv.item();
  out.breakdown.dispersion = dispersion.item();
  out.breakdown.alignment = alignment.item();
  out.breakdown.alpha = alpha;
  out.breakdown.total = t.item();
  return out;
}

inline double reassemble_total(const LossBreakdown& b) {
  return ((b.lm + b.alpha * b.surv) + b.dispersion) + b.alignment;
}

}  // namespace survlm
