// Copyright (c) 2026, The survlm Authors
// SPDX-License-Identifier: Apache-2.0
//
// Command implementations behind the `survlm` executable. Each command
// takes a plain options struct, writes its outputs under out_dir and ends
// with a manifest.json naming every file it wrote.

#pragma once

#include <chrono>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "survlm/checkpoint.hpp"
#include "survlm/dataprep.hpp"
#include "survlm/pipeline.hpp"
#include "survlm/train.hpp"

#ifndef SURVLM_VERSION
#define SURVLM_VERSION "0.1.0"
#endif

namespace survlm::cli {

namespace fs = std::filesystem;

inline constexpr const char* kCheckpointName = "checkpoint.ckpt";
inline constexpr const char* kMetricsLogName = "metrics.jsonl";

// ---------------------------------------------------------------------------
// Manifest

inline std::string utc_now() {
  const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  std::ostringstream ss;
  ss << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return ss.str();
}

struct RunManifest {
  std::string command = {};
  std::string config_path = {};
  std::vector<std::string> inputs = {};
  std::string out_dir = {};
  std::uint64_t seed = 0;
  std::string version = SURVLM_VERSION;
  std::string started = utc_now();
  std::string finished = {};
  std::vector<std::string> outputs = {};

  // Output paths are stored relative to out_dir.
  void add_output(const fs::path& p) { outputs.push_back(fs::relative(p, out_dir).generic_string()); }

  nlohmann::json to_json() const {
    return {{"command", command}, {"config", config_path}, {"inputs", inputs},   {"out_dir", out_dir},
            {"seed", seed},       {"version", version},     {"started", started}, {"finished", finished},
            {"outputs", outputs}};
  }

  // Atomic: written to a temporary name and renamed into place.
  void write() {
    finished = utc_now();
    for (const auto& o : outputs)
      if (!fs::exists(fs::path(out_dir) / o)) throw std::logic_error("manifest names missing output " + o);
    const auto target = fs::path(out_dir) / "manifest.json";
    const auto tmp = fs::path(out_dir) / "manifest.json.tmp";
    {
      std::ofstream f(tmp, std::ios::binary);
      if (!f) throw DataError("cannot write " + tmp.string());
      f << to_json().dump(2) << '\n';
    }
    fs::rename(tmp, target);
  }
};

namespace detail {

inline std::ofstream open_out(const fs::path& p) {
  std::ofstream f(p, std::ios::binary);
  if (!f) throw DataError("cannot write " + p.string());
  return f;
}

inline nlohmann::json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path);
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw DataError(path + ": " + e.what());
  }
}

template <class T>
T load_config(const std::optional<std::string>& path) {
  if (!path) return T{};
  try {
    return read_json_file(*path).get<T>();
  } catch (const nlohmann::json::exception& e) {
    throw DataError(*path + ": " + e.what());
  } catch (const std::invalid_argument& e) {
    throw DataError(*path + ": " + e.what());
  }
}

inline std::vector<QuestionTemplate> templates_or_default(const std::optional<std::string>& path) {
  return path ? load_templates(*path) : default_templates();
}

}  // namespace detail

// ---------------------------------------------------------------------------
// prepare-data

struct PrepareOptions {
  std::string reports = {};
  std::optional<std::string> templates = {};
  std::string out_dir = {};
  std::size_t top_k = 50;
};

inline void cmd_prepare_data(const PrepareOptions& o) {
  RunManifest m{.command = "prepare-data", .config_path = o.templates.value_or(""), .inputs = {o.reports},
                .out_dir = o.out_dir};
  const auto templates = detail::templates_or_default(o.templates);
  const auto reports = read_reports_jsonl(o.reports);
  if (reports.empty()) throw DataError(o.reports + ": no reports");
  fs::create_directories(o.out_dir);

  std::vector<QAPair> pairs;
  for (const auto& r : reports) {
    auto qa = extract_answers(r, templates);
    pairs.insert(pairs.end(), qa.begin(), qa.end());
  }
  const auto qa_path = fs::path(o.out_dir) / "qa.jsonl";
  {
    auto f = detail::open_out(qa_path);
    write_qa_jsonl(f, pairs);
  }
  m.add_output(qa_path);
  const auto wf_path = fs::path(o.out_dir) / "word_freq.csv";
  {
    auto f = detail::open_out(wf_path);
    write_word_frequency_csv(f, word_frequency(reports, default_stoplist(), o.top_k));
  }
  m.add_output(wf_path);
  m.write();
}

// ---------------------------------------------------------------------------
// synth

struct SynthOptions {
  std::optional<std::string> config = {};
  std::optional<std::uint64_t> seed = {};
  std::string out_dir = {};
};

inline void cmd_synth(const SynthOptions& o) {
  auto cfg = detail::load_config<SynthCohortConfig>(o.config);
  if (o.seed) cfg.seed = *o.seed;
  try {
    cfg.validate();
  } catch (const std::invalid_argument& e) {
    throw DataError(e.what());
  }
  RunManifest m{.command = "synth", .config_path = o.config.value_or(""), .out_dir = o.out_dir, .seed = cfg.seed};
  const auto cohort = generate_synth_cohort(cfg);
  for (const auto& p : write_synth_cohort(o.out_dir, cohort)) m.add_output(p);
  m.write();
}

// ---------------------------------------------------------------------------
// pretrain / finetune

struct TrainOptions {
  std::optional<std::string> config = {};
  std::optional<std::string> model_config = {};
  std::optional<std::string> templates = {};
  std::string data_dir = {};
  std::string out_dir = {};
  std::optional<std::uint64_t> seed = {};
  std::optional<std::size_t> total_steps = {};
  std::optional<std::string> init_checkpoint = {};  // finetune: stage-1 checkpoint
  bool from_scratch = false;
  std::optional<std::string> resume = {};  // checkpoint of this same run
  std::optional<std::size_t> stop_after = {};
  std::ostream* log = nullptr;
};

namespace detail {

// Keeps metrics lines with step < `step` and appends from there.
inline std::ofstream open_metrics(const fs::path& path, std::size_t step) {
  std::vector<std::string> kept;
  if (step > 0 && fs::exists(path)) {
    std::ifstream in(path);
    std::string line;
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      if (nlohmann::json::parse(line).at("step").get<std::size_t>() < step) kept.push_back(line);
    }
  }
  auto f = open_out(path);
  for (const auto& l : kept) f << l << '\n';
  return f;
}

inline void run_training(TrainState& st, const std::vector<PatientSample>& corpus, const TrainOptions& o,
                         RunManifest& m) {
  const auto ckpt = fs::path(o.out_dir) / kCheckpointName;
  const auto metrics_path = fs::path(o.out_dir) / kMetricsLogName;
  auto metrics = open_metrics(metrics_path, st.step);
  TrainHooks hooks;
  hooks.on_step = [&](const TrainStepLog& l) {
    metrics << to_json(l).dump() << '\n';
    metrics.flush();
    if (o.log && (l.step % 50 == 0 || l.step + 1 == st.train.total_steps))
      *o.log << to_string(st.train.stage) << " step " << l.step << " lr " << l.lr << " total " << l.loss.total << '\n';
  };
  hooks.on_checkpoint = [&](const TrainState& s) { write_checkpoint(ckpt.string(), s); };
  hooks.on_warning = [&](const std::string& w) {
    if (o.log) *o.log << "warning: " << w << '\n';
  };
  hooks.stop_at_step = o.stop_after;
  if (st.step == 0) write_checkpoint(ckpt.string(), st);
  if (st.train.stage == Stage::Pretrain) run_stage1(st, corpus, hooks); else run_stage2(st, corpus, hooks);
  m.add_output(ckpt);
  m.add_output(metrics_path);
}

inline TrainConfig train_config_for(const TrainOptions& o, Stage stage) {
  auto tc = load_config<TrainConfig>(o.config);
  tc.stage = stage;
  if (o.seed) tc.seed = *o.seed;
  if (o.total_steps) {
    tc.total_steps = *o.total_steps;
    tc.warmup_steps = std::min(tc.warmup_steps, tc.total_steps);
  }
  try {
    tc.validate();
  } catch (const std::invalid_argument& e) {
    throw DataError(std::string("train config: ") + e.what());
  }
  return tc;
}

// The resumed checkpoint must describe the same run.
inline TrainState resume_state(const std::string& path, const TrainConfig& tc) {
  auto st = read_checkpoint(path);
  if (st.train.stage != tc.stage) throw DataError(path + ": checkpoint is from the " + to_string(st.train.stage) + " stage");
  if (nlohmann::json(st.train) != nlohmann::json(tc))
    throw DataError(path + ": checkpoint train config differs from the requested run");
  return st;
}

}  // namespace detail

inline void cmd_pretrain(const TrainOptions& o) {
  const auto tc = detail::train_config_for(o, Stage::Pretrain);
  RunManifest m{.command = "pretrain", .config_path = o.config.value_or(""), .inputs = {o.data_dir},
                .out_dir = o.out_dir, .seed = tc.seed};
  const auto templates = detail::templates_or_default(o.templates);
  const auto cohort = load_cohort(o.data_dir);
  fs::create_directories(o.out_dir);

  TrainState st;
  if (o.resume) {
    st = detail::resume_state(*o.resume, tc);
    m.inputs.push_back(*o.resume);
  } else {
    std::vector<ReportRecord> train_reports;
    for (const auto& id : cohort.split.train) train_reports.push_back(cohort.report(id));
    const auto tok = build_tokenizer(train_reports, templates);
    st.model = detail::load_config<ModelConfig>(o.model_config);
    st.model.vocab_size = tok.size();
    st.model.init_seed = tc.seed;
    try {
      st.model.validate();
    } catch (const std::invalid_argument& e) {
      throw DataError(e.what());
    }
    st.train = tc;
    st.vocabulary = tok.words();
    st.params = init_params(st.model);
    st.optimizer = AdamW{};
  }
  if (o.model_config) m.inputs.push_back(*o.model_config);
  const auto tok = Tokenizer::from_words(st.vocabulary);
  const auto corpus = build_samples(st.model, st.params, tok, cohort, cohort.split.train, templates, false);
  detail::run_training(st, corpus, o, m);
  m.write();
}

inline void cmd_finetune(const TrainOptions& o) {
  const auto tc = detail::train_config_for(o, Stage::Finetune);
  RunManifest m{.command = "finetune", .config_path = o.config.value_or(""), .inputs = {o.data_dir},
                .out_dir = o.out_dir, .seed = tc.seed};
  const auto templates = detail::templates_or_default(o.templates);
  const auto cohort = load_cohort(o.data_dir);

  TrainState st;
  if (o.resume) {
    st = detail::resume_state(*o.resume, tc);
    m.inputs.push_back(*o.resume);
  } else if (o.init_checkpoint) {
    auto init = read_checkpoint(*o.init_checkpoint);
    m.inputs.push_back(*o.init_checkpoint);
    if (init.model.k_bins != tc.k_bins)
      throw DataError(*o.init_checkpoint + ": model has " + std::to_string(init.model.k_bins) +
                      " bins but the config asks for " + std::to_string(tc.k_bins));
    if (init.train.stage != Stage::Pretrain && init.model.head != tc.head)
      throw DataError(*o.init_checkpoint + ": checkpoint head type " + to_string(init.model.head) +
                      " does not match config head " + to_string(tc.head));
    st.model = init.model;
    st.params = std::move(init.params);
    st.vocabulary = std::move(init.vocabulary);
  } else if (o.from_scratch) {
    std::vector<ReportRecord> train_reports;
    for (const auto& id : cohort.split.train) train_reports.push_back(cohort.report(id));
    const auto tok = build_tokenizer(train_reports, templates);
    st.model = detail::load_config<ModelConfig>(o.model_config);
    st.model.vocab_size = tok.size();
    st.model.init_seed = tc.seed;
    st.model.k_bins = tc.k_bins;
    st.vocabulary = tok.words();
    st.params = init_params(st.model);
  } else {
    throw std::invalid_argument("finetune needs --init <stage-1 checkpoint> or --from-scratch");
  }
  fs::create_directories(o.out_dir);

  const auto tok = Tokenizer::from_words(st.vocabulary);
  const auto corpus = build_samples(st.model, st.params, tok, cohort, cohort.split.train, templates, true);
  if (!o.resume) {
    st.model.head = tc.head;
    st.train = tc;
    st.step = 0;
    st.optimizer = AdamW{};
    std::vector<SurvivalRecord> records;
    for (const auto& s : corpus) records.push_back(s.record);
    st.sigma = tc.sigma ? *tc.sigma : median_pairwise_event_gap(records);
    if (tc.head == HeadType::Discrete) st.grid = build_time_grid(records, tc.k_bins); else st.grid.reset();
  }
  detail::run_training(st, corpus, o, m);
  m.write();
}

// ---------------------------------------------------------------------------
// evaluate

struct EvaluateOptions {
  std::optional<std::string> checkpoint = {};
  std::optional<std::string> risks = {};  // patient_id,risk CSV scored instead of a model
  std::optional<std::string> templates = {};
  std::string data_dir = {};
  std::string out_dir = {};
  std::string split = "auto";  // auto | train | test | all
  std::size_t answer_tokens = 24;
  bool svg = false;
};

namespace detail {

inline std::vector<std::string> split_ids(const CohortData& c, const std::string& split) {
  if (split == "train") return c.split.train;
  if (split == "test") return c.split.test;
  std::vector<std::string> all;
  if (split == "all") {
    for (const auto& r : c.reports) all.push_back(r.scan_id);
    return all;
  }
  if (split == "auto") return c.split.test.empty() ? split_ids(c, "all") : c.split.test;
  throw std::invalid_argument("unknown split '" + split + "'");
}

// Two KM step functions as an SVG polyline chart; time on x, survival on y.
inline std::string km_svg(const StepFunction& high, const StepFunction& low) {
  const double w = 480, h = 320, pad = 40;
  double t_max = 1.0;
  for (const auto* c : {&high, &low})
    if (!c->times.empty()) t_max = std::max(t_max, c->times.back());
  auto x = [&](double t) { return pad + (w - 2 * pad) * t / t_max; };
  auto y = [&](double s) { return h - pad - (h - 2 * pad) * s; };
  auto path = [&](const StepFunction& c) {
    std::ostringstream d;
    d << "M" << x(0) << "," << y(1.0);
    double prev = 1.0;
    for (std::size_t i = 0; i < c.times.size(); ++i) {
      d << " L" << x(c.times[i]) << "," << y(prev) << " L" << x(c.times[i]) << "," << y(c.values[i]);
      prev = c.values[i];
    }
    d << " L" << x(t_max) << "," << y(prev);
    return d.str();
  };
  std::ostringstream s;
  s << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << w << "\" height=\"" << h << "\">\n"
    << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
    << "<line x1=\"" << pad << "\" y1=\"" << h - pad << "\" x2=\"" << w - pad << "\" y2=\"" << h - pad
    << "\" stroke=\"black\"/>\n"
    << "<line x1=\"" << pad << "\" y1=\"" << pad << "\" x2=\"" << pad << "\" y2=\"" << h - pad
    << "\" stroke=\"black\"/>\n"
    << "<path d=\"" << path(high) << "\" fill=\"none\" stroke=\"#c0392b\"/>\n"
    << "<path d=\"" << path(low) << "\" fill=\"none\" stroke=\"#2471a3\"/>\n"
    << "<text x=\"" << w - pad - 80 << "\" y=\"" << pad << "\" fill=\"#c0392b\">high risk</text>\n"
    << "<text x=\"" << w - pad - 80 << "\" y=\"" << pad + 16 << "\" fill=\"#2471a3\">low risk</text>\n"
    << "</svg>\n";
  return s.str();
}

inline void write_evaluation(const EvalMetrics& metrics, const std::vector<std::string>& ids,
                             const std::vector<double>& risks, const EvaluateOptions& o, RunManifest& m) {
  fs::create_directories(o.out_dir);
  const auto out = fs::path(o.out_dir);
  {
    auto f = open_out(out / "metrics.json");
    f << to_json(metrics).dump(2) << '\n';
  }
  m.add_output(out / "metrics.json");
  for (const auto& [name, curve, size] : {std::tuple{"km_high.csv", &metrics.km_high, metrics.n_high},
                                          std::tuple{"km_low.csv", &metrics.km_low, metrics.n_low}}) {
    auto f = open_out(out / name);
    if (size > 0) write_km_csv(f, *curve); else f << "time,survival,at_risk,events\n";
    m.add_output(out / name);
  }
  {
    auto f = open_out(out / "risks.csv");
    f << "patient_id,risk\n";
    for (std::size_t i = 0; i < ids.size(); ++i) f << ids[i] << ',' << format_double(risks[i]) << '\n';
  }
  m.add_output(out / "risks.csv");
  if (o.svg) {
    auto f = open_out(out / "km.svg");
    f << km_svg(metrics.km_high, metrics.km_low);
    m.add_output(out / "km.svg");
  }
}

}  // namespace detail

inline EvalMetrics cmd_evaluate(const EvaluateOptions& o) {
  RunManifest m{.command = "evaluate", .inputs = {o.data_dir}, .out_dir = o.out_dir};
  const auto cohort = load_cohort(o.data_dir);
  const auto ids = detail::split_ids(cohort, o.split);
  if (ids.size() < 2) throw DataError("evaluation needs at least 2 patients, got " + std::to_string(ids.size()));
  const auto records = cohort.records(ids);

  std::vector<double> risks;
  EvalMetrics metrics;
  if (o.risks) {
    m.inputs.push_back(*o.risks);
    const auto table = read_risks_csv(*o.risks);
    for (const auto& id : ids) {
      auto it = table.find(id);
      if (it == table.end()) throw DataError(*o.risks + ": no risk for patient " + id);
      risks.push_back(it->second);
    }
    metrics = survival_metrics(records, risks);
  } else {
    if (!o.checkpoint) throw std::invalid_argument("evaluate needs --checkpoint or --risks");
    m.inputs.push_back(*o.checkpoint);
    const auto st = read_checkpoint(*o.checkpoint);
    m.seed = st.train.seed;
    const auto templates = detail::templates_or_default(o.templates);
    const auto tok = Tokenizer::from_words(st.vocabulary);
    auto samples = build_samples(st.model, st.params, tok, cohort, ids, templates, true);
    std::vector<ReportRecord> reports;
    for (const auto& id : ids) reports.push_back(cohort.report(id));
    metrics = evaluate_samples(st.model, st.params, tok, samples, templates, reports, o.answer_tokens, &risks);
  }
  detail::write_evaluation(metrics, ids, risks, o, m);
  m.write();
  return metrics;
}

// ---------------------------------------------------------------------------
// gradcheck

struct GradcheckOptions {
  std::string loss = "all";
  std::size_t configs = 50;
  std::uint64_t seed = 0;
  std::optional<std::string> out_dir = {};
};

inline double gradcheck_tolerance(LossSelector s) { return s == LossSelector::Stage2Total ? 1e-3 : 1e-4; }

// Returns true when every selected loss is within tolerance.
inline bool cmd_gradcheck(const GradcheckOptions& o, std::ostream& out) {
  std::vector<std::pair<std::string, LossSelector>> selected;
  if (o.loss == "all") selected = loss_selectors(); else selected.push_back({o.loss, parse_loss_selector(o.loss)});
  nlohmann::json report = nlohmann::json::array();
  bool ok = true;
  for (const auto& [name, sel] : selected) {
    double worst = 0.0;
    for (std::size_t i = 0; i < o.configs; ++i) worst = std::max(worst, gradcheck(sel, o.seed + i));
    const bool pass = worst < gradcheck_tolerance(sel);
    ok = ok && pass;
    nlohmann::json row{{"loss", name}, {"configs", o.configs}, {"max_rel_error", worst},
                       {"tolerance", gradcheck_tolerance(sel)}, {"pass", pass}};
    out << row.dump() << '\n';
    report.push_back(row);
  }
  if (o.out_dir) {
    fs::create_directories(*o.out_dir);
    RunManifest m{.command = "gradcheck", .out_dir = *o.out_dir, .seed = o.seed};
    const auto path = fs::path(*o.out_dir) / "gradcheck.json";
    {
      auto f = detail::open_out(path);
      f << report.dump(2) << '\n';
    }
    m.add_output(path);
    m.write();
  }
  return ok;
}

}  // namespace survlm::cli
