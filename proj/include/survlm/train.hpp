// Copyright (c) 2026, The survlm Authors
// SPDX-License-Identifier: Apache-2.0
//
// Two-stage training: Stage 1 fits the projection and decoder on QA pairs
// with the LM loss; Stage 2 fine-tunes decoder, adaptor and the active
// survival head on the joint objective. AdamW with a warmup-cosine
// schedule; frozen groups are never touched.

#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <numbers>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "survlm/error.hpp"
#include "survlm/losses.hpp"
#include "survlm/model.hpp"
#include "survlm/rng.hpp"
#include "survlm/tokenizer.hpp"

namespace survlm {

enum class Stage { Pretrain, Finetune };

inline std::string to_string(Stage s) { return s == Stage::Pretrain ? "pretrain" : "finetune"; }

inline Stage parse_stage(const std::string& s) {
  if (s == "pretrain" || s == "Pretrain") return Stage::Pretrain;
  if (s == "finetune" || s == "Finetune") return Stage::Finetune;
  throw std::invalid_argument("unknown stage '" + s + "'");
}

struct TrainConfig {
  Stage stage = Stage::Pretrain;
  double lr_peak = 3e-4;
  std::size_t warmup_steps = 20;
  std::size_t total_steps = 200;
  std::size_t batch_size = 8;
  std::size_t grad_accum_steps = 1;
  double alpha = 0.5;
  std::array<double, 2> betas{0.9, 0.999};
  double weight_decay = 0.0;
  HeadType head = HeadType::Continuous;
  std::size_t k_bins = 5;
  std::optional<double> sigma;
  double tau = 0.5;
  std::uint64_t seed = 0;

  std::size_t effective_batch() const { return batch_size * grad_accum_steps; }

  void validate() const {
    if (!(lr_peak > 0.0)) throw std::invalid_argument("train config: lr_peak must be positive");
    if (warmup_steps > total_steps)
      throw std::invalid_argument("train config: warmup_steps exceeds total_steps");
    if (batch_size < 1) throw std::invalid_argument("train config: batch_size must be at least 1");
    if (grad_accum_steps < 1) throw std::invalid_argument("train config: grad_accum_steps must be at least 1");
    if (!(alpha >= 0.0)) throw std::invalid_argument("train config: alpha must be nonnegative");
    for (double b : betas)
      if (!(b >= 0.0 && b < 1.0)) throw std::invalid_argument("train config: betas must lie in [0, 1)");
    if (!(weight_decay >= 0.0)) throw std::invalid_argument("train config: weight_decay must be nonnegative");
    if (k_bins < 2) throw std::invalid_argument("train config: k_bins must be at least 2");
    if (sigma && !(*sigma > 0.0)) throw std::invalid_argument("train config: sigma must be positive");
    if (!(tau > 0.0)) throw std::invalid_argument("train config: tau must be positive");
  }
};

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = nlohmann::json{{"stage", to_string(c.stage)},
                     {"lr_peak", c.lr_peak},
                     {"warmup_steps", c.warmup_steps},
                     {"total_steps", c.total_steps},
                     {"batch_size", c.batch_size},
                     {"grad_accum_steps", c.grad_accum_steps},
                     {"alpha", c.alpha},
                     {"betas", c.betas},
                     {"weight_decay", c.weight_decay},
                     {"head", to_string(c.head)},
                     {"k_bins", c.k_bins},
                     {"sigma", c.sigma ? nlohmann::json(*c.sigma) : nlohmann::json(nullptr)},
                     {"tau", c.tau},
                     {"seed", c.seed}};
}

// Unknown keys are rejected; missing keys keep their defaults.
inline void from_json(const nlohmann::json& j, TrainConfig& c) {
  static const std::set<std::string> known{"stage",  "lr_peak", "warmup_steps", "total_steps", "batch_size",
                                           "grad_accum_steps", "alpha", "betas", "weight_decay", "head",
                                           "k_bins", "sigma", "tau", "seed"};
  if (!j.is_object()) throw std::invalid_argument("train config: expected a JSON object");
  for (auto it = j.begin(); it != j.end(); ++it)
    if (!known.count(it.key())) throw std::invalid_argument("train config: unknown key '" + it.key() + "'");
  auto get = [&](const char* key, auto& field) {
    if (j.contains(key)) j.at(key).get_to(field);
  };
  if (j.contains("stage")) c.stage = parse_stage(j.at("stage").get<std::string>());
  get("lr_peak", c.lr_peak);
  get("warmup_steps", c.warmup_steps);
  get("total_steps", c.total_steps);
  get("batch_size", c.batch_size);
  get("grad_accum_steps", c.grad_accum_steps);
  get("alpha", c.alpha);
  get("betas", c.betas);
  get("weight_decay", c.weight_decay);
  if (j.contains("head")) c.head = parse_head_type(j.at("head").get<std::string>());
  get("k_bins", c.k_bins);
  if (j.contains("sigma")) {
    if (j.at("sigma").is_null()) c.sigma.reset(); else c.sigma = j.at("sigma").get<double>();
  }
  get("tau", c.tau);
  get("seed", c.seed);
}

// ---------------------------------------------------------------------------
// Schedule and optimizer

// Linear warmup from 0 to lr_peak, then half-cosine decay to 0 at
// total_steps.
inline double cosine_warmup_lr(std::size_t step, const TrainConfig& c) {
  if (step > c.total_steps) throw std::out_of_range("cosine_warmup_lr: step beyond total_steps");
  if (step == c.total_steps) return 0.0;
  if (step < c.warmup_steps)
    return c.lr_peak * static_cast<double>(step) / static_cast<double>(c.warmup_steps);
  const double progress = static_cast<double>(step - c.warmup_steps) /
                          static_cast<double>(c.total_steps - c.warmup_steps);
  return c.lr_peak * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

struct AdamState {
  std::vector<double> m, v;
  std::uint64_t t = 0;
};

// Optimizer state keyed by the parameter's qualified name.
struct AdamW {
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8, weight_decay = 0.0;
  std::map<std::string, AdamState> state;

  // One decoupled-weight-decay Adam update on a single tensor.
  void update(const std::string& name, Tensor& param, double lr) {
    auto& s = state[name];
    const std::size_t n = param.numel();
    if (s.m.empty()) {
      s.m.assign(n, 0.0);
      s.v.assign(n, 0.0);
    }
    ++s.t;
    const std::vector<double> g = param.has_grad() ? param.grad() : std::vector<double>(n, 0.0);
    const double c1 = 1.0 - std::pow(beta1, static_cast<double>(s.t));
    const double c2 = 1.0 - std::pow(beta2, static_cast<double>(s.t));
    auto w = param.mutable_data();
    for (std::size_t i = 0; i < n; ++i) {
      s.m[i] = beta1 * s.m[i] + (1.0 - beta1) * g[i];
      s.v[i] = beta2 * s.v[i] + (1.0 - beta2) * g[i] * g[i];
      const double mhat = s.m[i] / c1;
      const double vhat = s.v[i] / c2;
      if (weight_decay != 0.0) w[i] -= lr * weight_decay * w[i];
      w[i] -= lr * mhat / (std::sqrt(vhat) + eps);
    }
  }

  // Steps every tensor of every unfrozen group; frozen groups keep both
  // their values and their optimizer state.
  void step(ModelParams& p, double lr) {
    for (auto g : kAllGroups) {
      if (p.is_frozen(g)) continue;
      for (auto& nt : p.group(g)) {
        Tensor t = nt.tensor;
        update(std::string(group_name(g)) + "." + nt.name, t, lr);
      }
    }
  }
};

// ---------------------------------------------------------------------------
// Freeze policy

inline std::set<ParamGroupId> trainable_groups(Stage stage, HeadType head) {
  if (stage == Stage::Pretrain) return {ParamGroupId::Projection, ParamGroupId::Decoder};
  return {ParamGroupId::Decoder, ParamGroupId::Adaptor,
          head == HeadType::Continuous ? ParamGroupId::HeadContinuous : ParamGroupId::HeadDiscrete};
}

inline void apply_freeze_policy(ModelParams& p, Stage stage, HeadType head) {
  const auto trainable = trainable_groups(stage, head);
  for (auto g : kAllGroups) p.set_frozen(g, !trainable.count(g));
}

// ---------------------------------------------------------------------------
// Training data

struct QAItem {
  std::vector<int> question;  // ends with <boa>
  std::vector<int> answer;    // ends with <eoa>
};

// One patient with its cached visual tokens. The encoder is frozen in both
// stages, so Z_v is computed once.
struct PatientSample {
  std::string id;
  Tensor z_v;
  std::vector<int> clinical;
  std::vector<QAItem> qa;
  SurvivalRecord record;
};

struct TrainStepLog {
  std::size_t step = 0;
  double lr = 0.0;
  LossBreakdown loss;
};

inline nlohmann::json to_json(const TrainStepLog& s) {
  return nlohmann::json{{"step", s.step},
                        {"lr", s.lr},
                        {"lm", s.loss.lm},
                        {"surv", s.loss.surv},
                        {"dispersion", s.loss.dispersion},
                        {"alignment", s.loss.alignment},
                        {"total", s.loss.total}};
}

// Everything needed to continue a run.
struct TrainState {
  ModelConfig model;
  TrainConfig train;
  ModelParams params;
  AdamW optimizer;
  std::size_t step = 0;
  std::vector<std::string> vocabulary;
  std::optional<TimeGrid> grid;
  double sigma = 1.0;
};

struct TrainHooks {
  std::function<void(const TrainStepLog&)> on_step = {};
  std::function<void(const TrainState&)> on_checkpoint = {};
  std::function<void(const std::string&)> on_warning = {};
  // Ends the run early at this step, as an interruption would; the state
  // is checkpointed there and can be resumed.
  std::optional<std::size_t> stop_at_step = {};
};

// ---------------------------------------------------------------------------
// Sampling

namespace detail {

inline constexpr std::uint64_t kStreamEpoch = 0x1000;
inline constexpr std::uint64_t kStreamQuestion = 0x2000;

// Index of global draw number `k` from an epoch-shuffled stream over n
// items.
inline std::size_t epoch_draw(std::size_t n, std::uint64_t seed, std::size_t k,
                              std::vector<std::size_t>& cache, std::size_t& cached_epoch) {
  const std::size_t epoch = k / n;
  if (cache.empty() || cached_epoch != epoch) {
    cache = permutation(n, seed, kStreamEpoch + epoch);
    cached_epoch = epoch;
  }
  return cache[k % n];
}

}  // namespace detail

// Indices drawn for optimizer step `step`, effective_batch of them.
inline std::vector<std::size_t> batch_indices(std::size_t n_items, const TrainConfig& c, std::size_t step) {
  if (n_items == 0) throw DataError("training corpus is empty");
  std::vector<std::size_t> out;
  std::vector<std::size_t> cache;
  std::size_t epoch = 0;
  const std::size_t b = c.effective_batch();
  for (std::size_t i = 0; i < b; ++i) out.push_back(detail::epoch_draw(n_items, c.seed, step * b + i, cache, epoch));
  return out;
}

// ---------------------------------------------------------------------------
// Per-batch objectives

struct Stage1Item {
  const PatientSample* patient;
  const QAItem* qa;
};

inline Tensor stage1_sample_loss(const ModelConfig& cfg, const ModelParams& p, const PatientSample& s,
                                 const QAItem& qa) {
  TokenSequence seq = pack_sequence(p.token_embedding, s.clinical, project_visual(s.z_v, p.projection),
                                    qa.question, qa.answer);
  return sequence_lm_loss(cfg, p, decode_hidden(cfg, p, seq), seq);
}

// Mean of per-sample LM losses.
inline Tensor stage1_batch_loss(const ModelConfig& cfg, const ModelParams& p,
                                const std::vector<Stage1Item>& items) {
  std::vector<Tensor> losses;
  for (const auto& it : items) losses.push_back(stage1_sample_loss(cfg, p, *it.patient, *it.qa));
  return scale(add_all(losses), 1.0 / static_cast<double>(losses.size()));
}

struct Stage2Item {
  const PatientSample* patient;
  const QAItem* qa;
};

struct Stage2Context {
  const TrainConfig* train = nullptr;
  const TimeGrid* grid = nullptr;
  double sigma = 1.0;
  std::function<void(const std::string&)> warn;
};

// All four terms for one micro-batch. The survival head reads the hidden
// state at the <boa> position, which is the last instruction token.
inline TotalLoss stage2_batch_loss(const ModelConfig& cfg, const ModelParams& p,
                                   const std::vector<Stage2Item>& items, const Stage2Context& ctx) {
  if (items.empty()) throw std::invalid_argument("stage2: empty batch");
  std::vector<Tensor> lm, align, risks, probs, z_surv;
  std::vector<SurvivalRecord> records;
  for (const auto& it : items) {
    const auto& s = *it.patient;
    TokenSequence seq = pack_sequence(p.token_embedding, s.clinical, project_visual(s.z_v, p.projection),
                                      it.qa->question, it.qa->answer);
    Tensor hidden = decode_hidden(cfg, p, seq);
    lm.push_back(sequence_lm_loss(cfg, p, hidden, seq));
    SurvivalOutput out = survival_branch(cfg, p, hidden, seq.instruction_end());
    align.push_back(alignment_loss(out.z_surv, pool_hidden(hidden)));
    z_surv.push_back(out.z_surv);
    if (cfg.head == HeadType::Continuous) risks.push_back(out.risk); else probs.push_back(out.probs);
    records.push_back(s.record);
  }
  const double inv = 1.0 / static_cast<double>(items.size());
  Tensor lm_mean = scale(add_all(lm), inv);
  Tensor align_mean = scale(add_all(align), inv);

  Tensor surv;
  if (cfg.head == HeadType::Continuous) {
    const bool any_event = std::any_of(records.begin(), records.end(), [](const auto& r) { return r.event; });
    if (any_event) {
      surv = cox_loss(stack(risks), records);
    } else {
      if (ctx.warn) ctx.warn("batch has no events; Cox term set to 0");
      surv = scale(sum(stack(risks)), 0.0);
    }
  } else {
    if (!ctx.grid) throw std::logic_error("stage2: discrete head needs a time grid");
    surv = deephit_loss(stack(probs), records, *ctx.grid);
  }

  // dispersion over the uncensored members only
  std::vector<std::size_t> uncensored;
  for (std::size_t i = 0; i < records.size(); ++i)
    if (records[i].event) uncensored.push_back(i);
  Tensor dispersion;
  if (cfg.head == HeadType::Continuous) {
    if (uncensored.size() >= 2) {
      std::vector<Tensor> rows;
      std::vector<double> times;
      for (auto i : uncensored) {
        rows.push_back(z_surv[i]);
        times.push_back(records[i].time);
      }
      dispersion = dispersion_continuous(stack(rows), times, ctx.sigma);
    }
  } else {
    std::map<std::size_t, std::vector<Tensor>> by_bin;
    for (auto i : uncensored) by_bin[ctx.grid->bin_of(records[i].time)].push_back(z_surv[i]);
    if (by_bin.size() >= 2) {
      std::vector<Tensor> means;
      for (auto& [bin, rows] : by_bin) means.push_back(mean_rows(stack(rows)));
      dispersion = dispersion_discrete(stack(means), ctx.train->tau);
    }
  }
  if (!dispersion.defined()) dispersion = scale(sum(z_surv.front()), 0.0);
  return total_loss(lm_mean, surv, dispersion, align_mean, ctx.train->alpha);
}

// ---------------------------------------------------------------------------
// Stage runners

inline double median_pairwise_event_gap(const std::vector<SurvivalRecord>& records) {
  std::vector<double> times;
  for (const auto& r : records)
    if (r.event) times.push_back(r.time);
  std::vector<double> gaps;
  for (std::size_t i = 0; i < times.size(); ++i)
    for (std::size_t j = i + 1; j < times.size(); ++j) gaps.push_back(std::abs(times[i] - times[j]));
  if (gaps.empty()) return 1.0;
  std::sort(gaps.begin(), gaps.end());
  const std::size_t n = gaps.size();
  const double med = n % 2 ? gaps[n / 2] : 0.5 * (gaps[n / 2 - 1] + gaps[n / 2]);
  return med > 0.0 ? med : 1.0;
}

namespace detail {

inline void check_finite(const LossBreakdown& b, std::size_t step) {
  for (double v : {b.lm, b.surv, b.dispersion, b.alignment, b.total})
    if (!std::isfinite(v)) throw NumericError("non-finite loss at step " + std::to_string(step));
}

inline std::size_t checkpoint_every(std::size_t total) { return std::max<std::size_t>(1, total / 10); }

inline void accumulate(LossBreakdown& acc, const LossBreakdown& b, double w) {
  acc.lm += w * b.lm;
  acc.surv += w * b.surv;
  acc.dispersion += w * b.dispersion;
  acc.alignment += w * b.alignment;
  acc.total += w * b.total;
  acc.alpha = b.alpha;
}

// Shared loop: `micro_loss(step, micro_index)` builds one micro-batch loss.
// NaN losses abort before the update, after handing the last good state to
// the checkpoint hook.
template <class MicroLoss>
void run_loop(TrainState& st, const TrainHooks& hooks, MicroLoss micro_loss) {
  const auto& tc = st.train;
  st.optimizer.beta1 = tc.betas[0];
  st.optimizer.beta2 = tc.betas[1];
  st.optimizer.weight_decay = tc.weight_decay;
  const std::size_t every = checkpoint_every(tc.total_steps);
  const double inv_acc = 1.0 / static_cast<double>(tc.grad_accum_steps);
  const std::size_t end = std::min(tc.total_steps, hooks.stop_at_step.value_or(tc.total_steps));
  while (st.step < end) {
    st.params.zero_grad();
    TrainStepLog log;
    log.step = st.step;
    log.lr = cosine_warmup_lr(st.step, tc);
    for (std::size_t m = 0; m < tc.grad_accum_steps; ++m) {
      TotalLoss loss = micro_loss(st.step, m);
      try {
        check_finite(loss.breakdown, st.step);
      } catch (const NumericError&) {
        if (hooks.on_checkpoint) hooks.on_checkpoint(st);
        throw;
      }
      scale(loss.total, inv_acc).backward();
      accumulate(log.loss, loss.breakdown, inv_acc);
    }
    st.optimizer.step(st.params, log.lr);
    st.params.zero_grad();
    ++st.step;
    if (hooks.on_step) hooks.on_step(log);
    if (hooks.on_checkpoint && (st.step % every == 0 || st.step == tc.total_steps || st.step == end))
      hooks.on_checkpoint(st);
  }
}

}  // namespace detail

inline std::vector<Stage1Item> stage1_items(const std::vector<PatientSample>& corpus) {
  std::vector<Stage1Item> items;
  for (const auto& p : corpus)
    for (const auto& q : p.qa) items.push_back({&p, &q});
  return items;
}

// Runs Stage 1 from st.step to total_steps. Losses carry only the LM term.
inline void run_stage1(TrainState& st, const std::vector<PatientSample>& corpus, const TrainHooks& hooks = {}) {
  st.train.validate();
  const auto items = stage1_items(corpus);
  if (items.empty()) throw DataError("stage 1: corpus has no QA pairs");
  apply_freeze_policy(st.params, Stage::Pretrain, st.model.head);
  const auto& tc = st.train;
  std::size_t cached_step = static_cast<std::size_t>(-1);
  std::vector<std::size_t> idx;
  detail::run_loop(st, hooks, [&](std::size_t step, std::size_t m) {
    if (step != cached_step) {
      idx = batch_indices(items.size(), tc, step);
      cached_step = step;
    }
    std::vector<Stage1Item> micro;
    for (std::size_t i = m * tc.batch_size; i < (m + 1) * tc.batch_size; ++i) micro.push_back(items[idx[i]]);
    Tensor lm = stage1_batch_loss(st.model, st.params, micro);
    Tensor zero = Tensor::scalar(0.0);
    return total_loss(lm, zero, zero, zero, 0.0);
  });
}

// Runs Stage 2 from st.step to total_steps over patients with survival
// labels. Each patient contributes one of its QA pairs per draw.
inline void run_stage2(TrainState& st, const std::vector<PatientSample>& corpus, const TrainHooks& hooks = {}) {
  st.train.validate();
  if (corpus.empty()) throw DataError("stage 2: corpus is empty");
  for (const auto& p : corpus)
    if (p.qa.empty()) throw DataError("stage 2: patient " + p.id + " has no QA pairs");
  if (st.model.head != st.train.head) throw std::invalid_argument("stage 2: model and train config disagree on head type");
  if (st.model.head == HeadType::Discrete && !st.grid) throw std::logic_error("stage 2: discrete head needs a time grid");
  apply_freeze_policy(st.params, Stage::Finetune, st.model.head);
  const auto& tc = st.train;
  Stage2Context ctx{&st.train, st.grid ? &*st.grid : nullptr, st.sigma, hooks.on_warning};
  std::size_t cached_step = static_cast<std::size_t>(-1);
  std::vector<std::size_t> idx;
  detail::run_loop(st, hooks, [&](std::size_t step, std::size_t m) {
    if (step != cached_step) {
      idx = batch_indices(corpus.size(), tc, step);
      cached_step = step;
    }
    std::vector<Stage2Item> micro;
    for (std::size_t i = m * tc.batch_size; i < (m + 1) * tc.batch_size; ++i) {
      const auto& patient = corpus[idx[i]];
      const std::size_t draw = step * tc.effective_batch() + i;
      const auto q = counter_hash(tc.seed, detail::kStreamQuestion, draw) % patient.qa.size();
      micro.push_back({&patient, &patient.qa[q]});
    }
    return stage2_batch_loss(st.model, st.params, micro, ctx);
  });
}

// ---------------------------------------------------------------------------
// Gradient check

enum class LossSelector { Lm, Cox, DeepHit, DispersionContinuous, DispersionDiscrete, Alignment, Stage2Total };

inline const std::vector<std::pair<std::string, LossSelector>>& loss_selectors() {
  static const std::vector<std::pair<std::string, LossSelector>> s{
      {"lm", LossSelector::Lm},
      {"cox", LossSelector::Cox},
      {"deephit", LossSelector::DeepHit},
      {"dispersion_continuous", LossSelector::DispersionContinuous},
      {"dispersion_discrete", LossSelector::DispersionDiscrete},
      {"alignment", LossSelector::Alignment},
      {"total", LossSelector::Stage2Total}};
  return s;
}

inline LossSelector parse_loss_selector(const std::string& name) {
  for (const auto& [n, s] : loss_selectors())
    if (n == name) return s;
  throw std::invalid_argument("unknown loss '" + name + "'");
}

namespace detail {

// Central differences over every coordinate of `inputs`; returns the
// largest |a - n| / max(|a|, |n|, 1e-2).
inline double fd_max_relative_error(const std::function<Tensor()>& loss, std::vector<Tensor> inputs,
                                    double h) {
  for (auto& t : inputs) t.zero_grad();
  loss().backward();
  std::vector<std::vector<double>> analytic;
  for (auto& t : inputs) analytic.push_back(t.has_grad() ? t.grad() : std::vector<double>(t.numel(), 0.0));
  NoGradGuard no_grad;
  double worst = 0.0;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    auto data = inputs[k].mutable_data();
    for (std::size_t i = 0; i < data.size(); ++i) {
      const double saved = data[i];
      data[i] = saved + h;
      const double fp = loss().item();
      data[i] = saved - h;
      const double fm = loss().item();
      data[i] = saved;
      const double numeric = (fp - fm) / (2.0 * h);
      const double a = analytic[k][i];
      worst = std::max(worst, std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 1e-2}));
    }
  }
  return worst;
}

inline std::vector<double> normal_vector(CounterRng& rng, std::size_t n, double sd = 1.0) {
  std::vector<double> v(n);
  for (double& x : v) x = rng.normal(0.0, sd);
  return v;
}

inline std::vector<SurvivalRecord> random_records(CounterRng& rng, std::size_t n) {
  std::vector<SurvivalRecord> r;
  for (std::size_t i = 0; i < n; ++i)
    r.push_back({"g" + std::to_string(i), static_cast<double>(rng.uniform_int(1, 8)), rng.uniform() < 0.6});
  r[0].event = true;
  return r;
}

}  // namespace detail

// Tape gradients vs. central finite differences (step h) on a random small
// configuration drawn from `seed`.
inline double gradcheck(LossSelector which, std::uint64_t seed, double h = 1e-3) {
  CounterRng rng(seed, 0xC0FFEE);
  switch (which) {
    case LossSelector::Lm: {
      const std::size_t len = 2 + rng.uniform_int(0, 4), vocab = 3 + rng.uniform_int(0, 8);
      auto logits = Tensor::matrix(len, vocab, detail::normal_vector(rng, len * vocab, 2.0), true);
      std::vector<int> targets;
      std::vector<bool> mask;
      for (std::size_t i = 0; i < len; ++i) {
        targets.push_back(static_cast<int>(rng.uniform_int(0, static_cast<std::int64_t>(vocab) - 1)));
        mask.push_back(i == 0 || rng.uniform() < 0.6);
      }
      return detail::fd_max_relative_error([&] { return lm_loss(logits, targets, mask); }, {logits}, h);
    }
    case LossSelector::Cox: {
      const std::size_t n = 2 + rng.uniform_int(0, 10);
      auto recs = detail::random_records(rng, n);
      auto risks = Tensor::vector(detail::normal_vector(rng, n), true);
      return detail::fd_max_relative_error([&] { return cox_loss(risks, recs); }, {risks}, h);
    }
    case LossSelector::DeepHit: {
      const std::size_t n = 1 + rng.uniform_int(0, 7), k = 2 + rng.uniform_int(0, 4);
      TimeGrid grid;
      for (std::size_t i = 0; i <= k; ++i) grid.edges.push_back(8.0 * static_cast<double>(i) / static_cast<double>(k));
      auto recs = detail::random_records(rng, n);
      auto logits = Tensor::matrix(n, k, detail::normal_vector(rng, n * k), true);
      return detail::fd_max_relative_error([&] { return deephit_loss(softmax(logits), recs, grid); }, {logits}, h);
    }
    case LossSelector::DispersionContinuous: {
      const std::size_t m = 2 + rng.uniform_int(0, 5), d = 1 + rng.uniform_int(0, 5);
      auto z = Tensor::matrix(m, d, detail::normal_vector(rng, m * d), true);
      auto t = detail::normal_vector(rng, m, 3.0);
      const double sigma = rng.uniform(0.5, 3.0);
      return detail::fd_max_relative_error([&] { return dispersion_continuous(z, t, sigma); }, {z}, h);
    }
    case LossSelector::DispersionDiscrete: {
      const std::size_t k = 2 + rng.uniform_int(0, 4), d = 1 + rng.uniform_int(0, 5);
      auto mu = Tensor::matrix(k, d, detail::normal_vector(rng, k * d, 0.7), true);
      const double tau = rng.uniform(0.3, 2.0);
      return detail::fd_max_relative_error([&] { return dispersion_discrete(mu, tau); }, {mu}, h);
    }
    case LossSelector::Alignment: {
      const std::size_t d = 1 + rng.uniform_int(0, 15);
      auto a = Tensor::vector(detail::normal_vector(rng, d), true);
      auto b = Tensor::vector(detail::normal_vector(rng, d), true);
      return detail::fd_max_relative_error([&] { return alignment_loss(a, b); }, {a, b}, h);
    }
    case LossSelector::Stage2Total: {
      ModelConfig cfg = ModelConfig::tiny(12);
      cfg.max_len = 24;
      cfg.init_seed = seed;
      cfg.head = rng.uniform() < 0.5 ? HeadType::Continuous : HeadType::Discrete;
      ModelParams p = init_params(cfg);
      apply_freeze_policy(p, Stage::Finetune, cfg.head);
      // move the adaptor and layer norms off their init values so every
      // branch carries gradient; embeddings go to unit scale so a step of
      // h stays small next to the layer-norm row spread
      for (auto& nt : p.all()) {
        if (!nt.tensor.requires_grad()) continue;
        const bool embedding = nt.name.find("embedding") != std::string::npos;
        auto data = nt.tensor.mutable_data();
        for (double& x : data) x += rng.normal(0.0, embedding ? 1.0 : 0.1);
      }
      const std::size_t n = 3 + rng.uniform_int(0, 2);
      std::vector<PatientSample> patients(n);
      for (std::size_t i = 0; i < n; ++i) {
        auto& s = patients[i];
        s.id = "g" + std::to_string(i);
        s.z_v = Tensor::matrix(cfg.visual_tokens(), cfg.d_vis, detail::normal_vector(rng, cfg.visual_tokens() * cfg.d_vis));
        if (rng.uniform() < 0.5) s.clinical = {4, 5};
        s.qa.push_back({{6, 7, Tokenizer::kBeginAnswer}, {8, 9, Tokenizer::kEndAnswer}});
        s.record = {s.id, rng.uniform(0.5, 8.0), i < 2 || rng.uniform() < 0.5};
      }
      TimeGrid grid;
      for (std::size_t i = 0; i <= cfg.k_bins; ++i)
        grid.edges.push_back(8.0 * static_cast<double>(i) / static_cast<double>(cfg.k_bins));
      TrainConfig tc;
      tc.head = cfg.head;
      tc.k_bins = cfg.k_bins;
      tc.alpha = 0.5;
      Stage2Context ctx{&tc, &grid, 2.0, {}};
      std::vector<Stage2Item> items;
      for (const auto& s : patients) items.push_back({&s, &s.qa[0]});
      std::vector<Tensor> inputs;
      for (auto& nt : p.all())
        if (nt.tensor.requires_grad()) inputs.push_back(nt.tensor);
      return detail::fd_max_relative_error([&] { return stage2_batch_loss(cfg, p, items, ctx).total; }, inputs, h);
    }
  }
  return 0.0;
}

}  // namespace survlm
