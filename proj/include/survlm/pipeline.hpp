// Copyright (c) 2026, The survlm Authors
// SPDX-License-Identifier: Apache-2.0
//
// Glue between on-disk cohorts and the training/evaluation code: loading a
// cohort directory, building the tokenizer, caching visual tokens and
// scoring a checkpoint.

#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "survlm/dataprep.hpp"
#include "survlm/model.hpp"
#include "survlm/survstats.hpp"
#include "survlm/tokenizer.hpp"
#include "survlm/train.hpp"

namespace survlm {

// A cohort directory holds reports.jsonl and volumes/<scan_id>.{json,raw};
// cohort.csv and split.json are optional. Without cohort.csv the labels
// come from the reports' time/event fields; without split.json every
// patient is in the training split and the test split is empty.
struct CohortData {
  std::string dir;
  std::vector<ReportRecord> reports;
  std::map<std::string, SurvivalRecord> labels;
  CohortSplit split;

  const ReportRecord& report(const std::string& id) const {
    for (const auto& r : reports)
      if (r.scan_id == id) return r;
    throw DataError(dir + ": unknown patient " + id);
  }
  std::vector<SurvivalRecord> records(const std::vector<std::string>& ids) const {
    std::vector<SurvivalRecord> out;
    for (const auto& id : ids) {
      auto it = labels.find(id);
      if (it == labels.end()) throw DataError(dir + ": patient " + id + " has no survival label");
      out.push_back(it->second);
    }
    return out;
  }
};

inline CohortData load_cohort(const std::string& dir) {
  namespace fs = std::filesystem;
  CohortData c;
  c.dir = dir;
  c.reports = read_reports_jsonl((fs::path(dir) / "reports.jsonl").string());
  if (c.reports.empty()) throw DataError(dir + ": reports.jsonl is empty");
  const auto csv = fs::path(dir) / "cohort.csv";
  if (fs::exists(csv)) {
    for (const auto& r : read_cohort_csv(csv.string())) c.labels[r.patient_id] = r;
  } else {
    for (const auto& r : c.reports)
      if (r.time && r.event) c.labels[r.scan_id] = {r.scan_id, *r.time, *r.event};
  }
  const auto split = fs::path(dir) / "split.json";
  if (fs::exists(split)) {
    c.split = read_split(split.string());
  } else {
    for (const auto& r : c.reports) c.split.train.push_back(r.scan_id);
  }
  return c;
}

// Vocabulary from the template questions, the extracted answers and the
// clinical sentences of the given reports.
inline Tokenizer build_tokenizer(const std::vector<ReportRecord>& reports,
                                 const std::vector<QuestionTemplate>& templates) {
  std::vector<std::string> corpus;
  for (const auto& t : templates) corpus.push_back(t.question);
  corpus.emplace_back(kFallbackAnswer);
  for (const auto& r : reports) {
    corpus.push_back(clinical_to_sentence(r.clinical));
    for (const auto& qa : extract_answers(r, templates)) corpus.push_back(qa.answer);
  }
  return Tokenizer::build(corpus);
}

inline std::vector<std::vector<int>> encode_questions(const Tokenizer& tok,
                                                      const std::vector<QuestionTemplate>& templates) {
  std::vector<std::vector<int>> out;
  for (const auto& t : templates) out.push_back(tok.encode_question(t.question));
  return out;
}

// Loads, preprocesses and encodes one volume; the result is constant
// because the encoder never trains.
inline Tensor cached_visual_tokens(const ModelConfig& cfg, const ModelParams& p, const std::string& stem) {
  PreprocessConfig pc;
  pc.target_shape = cfg.volume_shape;
  Volume v = preprocess_volume(read_volume(stem), pc);
  NoGradGuard no_grad;
  return encode_volume(cfg, p, v).detach();
}

// Builds the training samples for `ids`. Answers that would overflow the
// context are cut, keeping the end marker.
inline std::vector<PatientSample> build_samples(const ModelConfig& cfg, const ModelParams& p,
                                                const Tokenizer& tok, const CohortData& cohort,
                                                const std::vector<std::string>& ids,
                                                const std::vector<QuestionTemplate>& templates,
                                                bool require_labels) {
  namespace fs = std::filesystem;
  std::vector<PatientSample> out;
  for (const auto& id : ids) {
    const auto& r = cohort.report(id);
    PatientSample s;
    s.id = id;
    s.z_v = cached_visual_tokens(cfg, p, (fs::path(cohort.dir) / "volumes" / id).string());
    s.clinical = tok.encode(clinical_to_sentence(r.clinical));
    for (const auto& qa : extract_answers(r, templates)) {
      QAItem item{tok.encode_question(qa.question), tok.encode_answer(qa.answer)};
      const std::size_t prefix = s.clinical.size() + s.z_v.dim(0) + item.question.size();
      if (prefix + 1 > cfg.max_len)
        throw DataError("patient " + id + ": instruction of " + std::to_string(prefix) +
                        " tokens does not fit max_len " + std::to_string(cfg.max_len));
      if (prefix + item.answer.size() > cfg.max_len) {
        item.answer.resize(cfg.max_len - prefix);
        item.answer.back() = Tokenizer::kEndAnswer;
      }
      s.qa.push_back(std::move(item));
    }
    auto it = cohort.labels.find(id);
    if (it != cohort.labels.end()) {
      s.record = it->second;
    } else if (require_labels) {
      throw DataError("patient " + id + " has no survival label");
    }
    out.push_back(std::move(s));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Evaluation

struct EvalMetrics {
  double c_index = 0.5;
  std::optional<double> token_f1_mean;
  double log_rank_p = 1.0;
  bool log_rank_degenerate = false;
  std::size_t n = 0;
  std::size_t n_censored = 0;
  StepFunction km_high, km_low;
  std::size_t n_high = 0, n_low = 0;
};

inline nlohmann::json to_json(const EvalMetrics& m) {
  return nlohmann::json{{"c_index", m.c_index},
                        {"token_f1_mean", m.token_f1_mean ? nlohmann::json(*m.token_f1_mean) : nlohmann::json(nullptr)},
                        {"log_rank_p", m.log_rank_p},
                        {"log_rank_degenerate", m.log_rank_degenerate},
                        {"n", m.n},
                        {"n_censored", m.n_censored}};
}

// Survival metrics for given risks: c-index, median split, log-rank and
// both KM curves. An empty group (all risks tied) gives p = 1 and the
// degenerate flag.
inline EvalMetrics survival_metrics(const std::vector<SurvivalRecord>& records, const std::vector<double>& risks) {
  if (records.size() < 2) throw DataError("evaluation needs at least 2 patients");
  EvalMetrics m;
  m.n = records.size();
  for (const auto& r : records) m.n_censored += r.event ? 0 : 1;
  m.c_index = concordance_index(records, risks);
  const auto groups = stratify_median(risks);
  std::vector<SurvivalRecord> high, low;
  for (std::size_t i = 0; i < records.size(); ++i) (groups[i] == RiskGroup::High ? high : low).push_back(records[i]);
  m.n_high = high.size();
  m.n_low = low.size();
  if (!high.empty()) m.km_high = km_estimate(high);
  if (!low.empty()) m.km_low = km_estimate(low);
  const bool any_event = std::any_of(records.begin(), records.end(), [](const auto& r) { return r.event; });
  if (high.empty() || low.empty() || !any_event) {
    m.log_rank_degenerate = true;
    m.log_rank_p = 1.0;
  } else {
    m.log_rank_p = log_rank_test(high, low).p_value;
  }
  return m;
}

struct PatientPrediction {
  double risk = 0.0;
  std::vector<std::string> answers;  // generated, one per question
};

inline PatientPrediction predict_patient(const ModelConfig& cfg, const ModelParams& p, const Tokenizer& tok,
                                         const PatientSample& s, const std::vector<std::vector<int>>& questions,
                                         std::size_t answer_tokens) {
  PatientPrediction out;
  PatientInput in{s.z_v, s.clinical};
  out.risk = ensemble_predict(cfg, p, in, questions, true);
  if (answer_tokens > 0)
    for (const auto& q : questions) out.answers.push_back(tok.decode(generate(cfg, p, in, q, answer_tokens)));
  return out;
}

// Scores every sample; when answer_tokens > 0 also generates answers and
// reports the mean token F1 against the extracted references.
inline EvalMetrics evaluate_samples(const ModelConfig& cfg, const ModelParams& p, const Tokenizer& tok,
                                    const std::vector<PatientSample>& samples,
                                    const std::vector<QuestionTemplate>& templates,
                                    const std::vector<ReportRecord>& reports, std::size_t answer_tokens,
                                    std::vector<double>* risks_out = nullptr) {
  const auto questions = encode_questions(tok, templates);
  std::vector<double> risks;
  std::vector<SurvivalRecord> records;
  double f1_sum = 0.0;
  std::size_t f1_count = 0;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    auto pred = predict_patient(cfg, p, tok, samples[i], questions, answer_tokens);
    risks.push_back(pred.risk);
    records.push_back(samples[i].record);
    if (answer_tokens > 0) {
      const auto refs = extract_answers(reports.at(i), templates);
      for (std::size_t q = 0; q < refs.size(); ++q) {
        f1_sum += token_f1(pred.answers[q], Tokenizer::normalize(refs[q].answer));
        ++f1_count;
      }
    }
  }
  EvalMetrics m = survival_metrics(records, risks);
  if (f1_count > 0) m.token_f1_mean = f1_sum / static_cast<double>(f1_count);
  if (risks_out) *risks_out = std::move(risks);
  return m;
}

}  // namespace survlm
