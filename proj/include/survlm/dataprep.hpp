// Copyright (c) 2026, The survlm Authors
// SPDX-License-Identifier: Apache-2.0
//
// Corpus ingestion and preparation: report records, rule-based question
// answering over report sentences, word frequencies, clinical sentences,
// CT preprocessing, time-grid construction and the synthetic cohort.

#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <json.hpp>

#include "survlm/error.hpp"
#include "survlm/losses.hpp"
#include "survlm/rng.hpp"
#include "survlm/survstats.hpp"
#include "survlm/tokenizer.hpp"
#include "survlm/volume.hpp"

namespace survlm {

struct ReportRecord {
  std::string scan_id;
  std::string report_text;
  std::map<std::string, std::string> clinical;
  std::optional<double> time;
  std::optional<bool> event;
};

struct QAPair {
  std::string scan_id;
  int question_id = 0;
  std::string question;
  std::string answer;

  bool operator==(const QAPair&) const = default;
};

struct QuestionTemplate {
  int id = 0;
  std::string question;
  std::vector<std::string> triggers;  // lowercase words or word sequences
};

inline constexpr std::string_view kFallbackAnswer = "No relevant findings reported.";

inline std::vector<QuestionTemplate> default_templates() {
  return {
      {1, "What is the location and size of the primary lung tumor?",
       {"tumor", "mass", "nodule", "neoplasm", "carcinoma", "primary"}},
      {2, "Which lymph nodes are involved, and what are their size and location?",
       {"lymph", "node", "nodes", "lymphadenopathy", "adenopathy", "hilar", "mediastinal"}},
      {3, "Is there any pleural involvement or effusion present?",
       {"pleural", "pleura", "effusion", "effusions"}},
      {4, "Are metastases or involvement of other organs observed?",
       {"metastasis", "metastases", "metastatic", "adrenal", "liver", "hepatic", "brain", "organs"}},
      {5, "Are major vessels involved or compressed?",
       {"vessel", "vessels", "vascular", "artery", "arteries", "vein", "aorta", "aortic", "vena cava",
        "encased", "encasement", "compressed", "compression"}},
      {6, "Are there skeleton/bone changes on the scan?",
       {"bone", "bones", "osseous", "skeletal", "skeleton", "rib", "ribs", "vertebra", "vertebral",
        "spine", "lytic", "sclerotic"}},
  };
}

// Template config file: {"1": {"question": ..., "triggers": [...]}, ...}.
inline nlohmann::json templates_to_json(const std::vector<QuestionTemplate>& templates) {
  nlohmann::json j = nlohmann::json::object();
  for (const auto& t : templates)
    j[std::to_string(t.id)] = {{"question", t.question}, {"triggers", t.triggers}};
  return j;
}

inline std::vector<QuestionTemplate> templates_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw DataError("templates: expected a JSON object keyed by question id");
  std::vector<QuestionTemplate> out;
  for (auto it = j.begin(); it != j.end(); ++it) {
    QuestionTemplate t;
    try {
      t.id = std::stoi(it.key());
      t.question = it.value().at("question").get<std::string>();
      for (const auto& w : it.value().at("triggers")) t.triggers.push_back(Tokenizer::normalize(w.get<std::string>()));
    } catch (const std::exception& e) {
      throw DataError("templates: entry '" + it.key() + "': " + e.what());
    }
    out.push_back(std::move(t));
  }
  std::sort(out.begin(), out.end(), [](const auto& a, const auto& b) { return a.id < b.id; });
  for (std::size_t i = 0; i < out.size(); ++i)
    if (out[i].id != static_cast<int>(i) + 1)
      throw DataError("templates: question ids must be 1..N without gaps");
  return out;
}

inline std::vector<QuestionTemplate> load_templates(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open templates file " + path);
  try {
    return templates_from_json(nlohmann::json::parse(in));
  } catch (const nlohmann::json::exception& e) {
    throw DataError(path + ": " + e.what());
  }
}

// ---------------------------------------------------------------------------
// Sentences and answers

// Splits at '.', '!' or '?' followed by whitespace or end of text, so
// decimals such as "2.5 cm" stay inside their sentence. Sentences keep
// their terminal punctuation and are trimmed.
inline std::vector<std::string> split_sentences(std::string_view text) {
  std::vector<std::string> out;
  auto flush = [&](std::size_t begin, std::size_t end) {
    while (begin < end && std::isspace(static_cast<unsigned char>(text[begin]))) ++begin;
    while (end > begin && std::isspace(static_cast<unsigned char>(text[end - 1]))) --end;
    if (end > begin) out.emplace_back(text.substr(begin, end - begin));
  };
  std::size_t start = 0;
  for (std::size_t i = 0; i < text.size(); ++i) {
    const char c = text[i];
    if ((c == '.' || c == '!' || c == '?') &&
        (i + 1 == text.size() || std::isspace(static_cast<unsigned char>(text[i + 1])))) {
      flush(start, i + 1);
      start = i + 1;
    }
  }
  flush(start, text.size());
  return out;
}

namespace detail {

inline bool contains_trigger(const std::vector<std::string>& words, const std::string& trigger) {
  const auto needle = word_tokens(trigger);
  if (needle.empty()) return false;
  return std::search(words.begin(), words.end(), needle.begin(), needle.end()) != words.end();
}

}  // namespace detail

inline std::vector<QAPair> extract_answers(const ReportRecord& report,
                                           const std::vector<QuestionTemplate>& templates) {
  const auto sentences = split_sentences(report.report_text);
  std::vector<std::vector<std::string>> words;
  for (const auto& s : sentences) words.push_back(word_tokens(s));
  std::vector<QAPair> out;
  for (const auto& t : templates) {
    std::string answer;
    for (std::size_t i = 0; i < sentences.size(); ++i) {
      const bool hit = std::any_of(t.triggers.begin(), t.triggers.end(), [&](const std::string& w) {
        return detail::contains_trigger(words[i], w);
      });
      if (!hit) continue;
      if (!answer.empty()) answer.push_back(' ');
      answer += sentences[i];
    }
    if (answer.empty()) answer = kFallbackAnswer;
    out.push_back({report.scan_id, t.id, t.question, std::move(answer)});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Word frequency

inline std::set<std::string> default_stoplist() {
  return {"a",    "an",   "and",  "are",  "as",   "at",    "be",   "by",    "for",  "from",
          "has",  "have", "in",   "is",   "it",   "its",   "no",   "not",   "of",   "on",
          "or",   "seen", "that", "the",  "there", "these", "this", "to",   "was",  "were",
          "with", "which", "up",  "mm",   "cm",   "measuring", "noted", "again", "also", "any"};
}

inline bool is_number_token(const std::string& w) {
  return !w.empty() && std::all_of(w.begin(), w.end(), [](unsigned char c) { return std::isdigit(c); });
}

inline std::vector<std::pair<std::string, std::size_t>> word_frequency(
    const std::vector<ReportRecord>& corpus, const std::set<std::string>& stoplist,
    std::size_t top_k) {
  if (top_k == 0) throw std::invalid_argument("word_frequency: top_k must be at least 1");
  std::map<std::string, std::size_t> counts;
  for (const auto& r : corpus)
    for (auto& w : word_tokens(r.report_text))
      if (!stoplist.count(w) && !is_number_token(w)) ++counts[w];
  std::vector<std::pair<std::string, std::size_t>> ranked(counts.begin(), counts.end());
  std::stable_sort(ranked.begin(), ranked.end(),
                   [](const auto& a, const auto& b) { return a.second > b.second; });
  if (ranked.size() > top_k) ranked.resize(top_k);
  return ranked;
}

inline void write_word_frequency_csv(std::ostream& out,
                                     const std::vector<std::pair<std::string, std::size_t>>& ranked) {
  out << "rank,word,count\n";
  for (std::size_t i = 0; i < ranked.size(); ++i)
    out << i + 1 << ',' << ranked[i].first << ',' << ranked[i].second << '\n';
}

// ---------------------------------------------------------------------------
// Clinical sentence

// One covariate slot of a sentence template. Head phrases are joined by
// spaces in front of the noun; tail phrases follow as ", <phrase>".
struct ClinicalPhrase {
  std::string key;
  std::string prefix;
  std::string suffix;
  bool tail = false;
};

struct ClinicalSchema {
  std::string noun;
  std::vector<ClinicalPhrase> phrases;

  static ClinicalSchema lung() {
    return {"lung cancer patient",
            {{"age", "", " year-old", false},
             {"gender", "", "", false},
             {"smoking", "", " smoker", false},
             {"stage", "stage ", "", true},
             {"T", "T stage is ", "", true},
             {"N", "N stage is ", "", true},
             {"M", "M stage is ", "", true}}};
  }
};

inline std::string clinical_to_sentence(const std::map<std::string, std::string>& covariates,
                                        const ClinicalSchema& schema = ClinicalSchema::lung()) {
  std::string head, tail;
  bool any = false;
  for (const auto& ph : schema.phrases) {
    auto it = covariates.find(ph.key);
    if (it == covariates.end() || it->second.empty()) continue;
    any = true;
    const std::string text = ph.prefix + it->second + ph.suffix;
    if (ph.tail) {
      tail += ", " + text;
    } else {
      if (!head.empty()) head.push_back(' ');
      head += text;
    }
  }
  if (!any) return "";
  return (head.empty() ? schema.noun : head + " " + schema.noun) + tail + ".";
}

// ---------------------------------------------------------------------------
// Report files

namespace detail {

inline std::string clinical_value(const nlohmann::json& v) {
  if (v.is_string()) return v.get<std::string>();
  if (v.is_number_integer()) return std::to_string(v.get<long long>());
  if (v.is_number()) return format_double(v.get<double>());
  if (v.is_boolean()) return v.get<bool>() ? "true" : "false";
  if (v.is_null()) return "";
  throw DataError("clinical values must be scalars");
}

}  // namespace detail

inline ReportRecord report_from_json(const nlohmann::json& j) {
  ReportRecord r;
  r.scan_id = j.at("scan_id").get<std::string>();
  r.report_text = j.at("report").get<std::string>();
  if (r.scan_id.empty()) throw DataError("empty scan_id");
  if (r.report_text.empty()) throw DataError("scan " + r.scan_id + ": empty report");
  if (j.contains("clinical") && !j.at("clinical").is_null())
    for (auto it = j.at("clinical").begin(); it != j.at("clinical").end(); ++it)
      r.clinical[it.key()] = detail::clinical_value(it.value());
  if (j.contains("time") && !j.at("time").is_null()) r.time = j.at("time").get<double>();
  if (j.contains("event") && !j.at("event").is_null()) {
    const auto& e = j.at("event");
    r.event = e.is_boolean() ? e.get<bool>() : e.get<int>() != 0;
  }
  return r;
}

inline nlohmann::json report_to_json(const ReportRecord& r) {
  nlohmann::json j{{"scan_id", r.scan_id}, {"report", r.report_text}, {"clinical", r.clinical}};
  if (r.time) j["time"] = *r.time;
  if (r.event) j["event"] = *r.event ? 1 : 0;
  return j;
}

// Reads JSON Lines; blank lines are skipped. Errors carry the line number.
inline std::vector<ReportRecord> read_reports_jsonl(std::istream& in, const std::string& name = "reports") {
  std::vector<ReportRecord> out;
  std::set<std::string> seen;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      auto r = report_from_json(nlohmann::json::parse(line));
      if (!seen.insert(r.scan_id).second) throw DataError("duplicate scan_id " + r.scan_id);
      out.push_back(std::move(r));
    } catch (const std::exception& e) {
      throw DataError(name + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  return out;
}

inline std::vector<ReportRecord> read_reports_jsonl(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path);
  return read_reports_jsonl(in, path);
}

inline void write_reports_jsonl(std::ostream& out, const std::vector<ReportRecord>& reports) {
  for (const auto& r : reports) out << report_to_json(r).dump() << '\n';
}

inline void write_qa_jsonl(std::ostream& out, const std::vector<QAPair>& pairs) {
  for (const auto& q : pairs)
    out << nlohmann::json{{"scan_id", q.scan_id}, {"question_id", q.question_id},
                          {"question", q.question}, {"answer", q.answer}}
               .dump()
        << '\n';
}

inline std::vector<QAPair> read_qa_jsonl(std::istream& in, const std::string& name = "qa") {
  std::vector<QAPair> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      auto j = nlohmann::json::parse(line);
      QAPair q{j.at("scan_id").get<std::string>(), j.at("question_id").get<int>(),
               j.at("question").get<std::string>(), j.at("answer").get<std::string>()};
      if (q.answer.empty()) throw DataError("empty answer");
      out.push_back(std::move(q));
    } catch (const std::exception& e) {
      throw DataError(name + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  return out;
}

inline std::vector<QAPair> read_qa_jsonl(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path);
  return read_qa_jsonl(in, path);
}

// ---------------------------------------------------------------------------
// Volume preprocessing

inline constexpr double kHuMin = -1000.0;
inline constexpr double kHuMax = 1000.0;

struct PreprocessConfig {
  std::array<double, 3> target_spacing_mm{1.5, 1.5, 3.0};
  std::array<std::size_t, 3> target_shape{24, 24, 16};
};

// Trilinear resampling: output voxel i along an axis samples the input at
// continuous index i * s_out / s_in. The output covers the input extent,
// n_out = floor((n_in - 1) * s_in / s_out) + 1.
inline Volume resample_trilinear(const Volume& in, std::array<double, 3> spacing_out) {
  std::array<std::size_t, 3> dims{};
  std::array<double, 3> step{};
  for (int a = 0; a < 3; ++a) {
    if (!(in.spacing_mm[a] > 0.0) || !(spacing_out[a] > 0.0))
      throw DataError("preprocess: spacing must be positive");
    step[a] = spacing_out[a] / in.spacing_mm[a];
    dims[a] = static_cast<std::size_t>(std::floor(static_cast<double>(in.dims[a] - 1) / step[a] + 1e-9)) + 1;
  }
  Volume out(dims, spacing_out);
  auto locate = [&](int a, std::size_t i, std::size_t& lo, std::size_t& hi, double& frac) {
    const double pos = std::min(static_cast<double>(i) * step[a], static_cast<double>(in.dims[a] - 1));
    lo = static_cast<std::size_t>(std::floor(pos));
    hi = std::min(lo + 1, in.dims[a] - 1);
    frac = pos - static_cast<double>(lo);
  };
  for (std::size_t z = 0; z < dims[2]; ++z) {
    std::size_t z0, z1;
    double fz;
    locate(2, z, z0, z1, fz);
    for (std::size_t y = 0; y < dims[1]; ++y) {
      std::size_t y0, y1;
      double fy;
      locate(1, y, y0, y1, fy);
      for (std::size_t x = 0; x < dims[0]; ++x) {
        std::size_t x0, x1;
        double fx;
        locate(0, x, x0, x1, fx);
        auto lerp = [](double a, double b, double t) { return t == 0.0 ? a : a + (b - a) * t; };
        const double c00 = lerp(in.at(x0, y0, z0), in.at(x1, y0, z0), fx);
        const double c10 = lerp(in.at(x0, y1, z0), in.at(x1, y1, z0), fx);
        const double c01 = lerp(in.at(x0, y0, z1), in.at(x1, y0, z1), fx);
        const double c11 = lerp(in.at(x0, y1, z1), in.at(x1, y1, z1), fx);
        out.at(x, y, z) = lerp(lerp(c00, c10, fy), lerp(c01, c11, fy), fz);
      }
    }
  }
  return out;
}

// Center crop or pad (with air, -1000 HU) to the target shape.
inline Volume center_fit(const Volume& in, std::array<std::size_t, 3> shape) {
  Volume out(shape, in.spacing_mm, kHuMin);
  std::array<std::ptrdiff_t, 3> offset{};
  for (int a = 0; a < 3; ++a)
    offset[a] = (static_cast<std::ptrdiff_t>(in.dims[a]) - static_cast<std::ptrdiff_t>(shape[a])) / 2;
  for (std::size_t z = 0; z < shape[2]; ++z)
    for (std::size_t y = 0; y < shape[1]; ++y)
      for (std::size_t x = 0; x < shape[0]; ++x) {
        const auto sx = static_cast<std::ptrdiff_t>(x) + offset[0];
        const auto sy = static_cast<std::ptrdiff_t>(y) + offset[1];
        const auto sz = static_cast<std::ptrdiff_t>(z) + offset[2];
        if (sx < 0 || sy < 0 || sz < 0 || sx >= static_cast<std::ptrdiff_t>(in.dims[0]) ||
            sy >= static_cast<std::ptrdiff_t>(in.dims[1]) || sz >= static_cast<std::ptrdiff_t>(in.dims[2]))
          continue;
        out.at(x, y, z) = in.at(static_cast<std::size_t>(sx), static_cast<std::size_t>(sy),
                                static_cast<std::size_t>(sz));
      }
  return out;
}

inline Volume clip_hu(Volume v) {
  for (double& x : v.data) x = std::clamp(x, kHuMin, kHuMax);
  return v;
}

// Clip to [-1000, 1000] HU, resample to the target spacing, then crop or
// pad to the target shape.
inline Volume preprocess_volume(const Volume& raw, const PreprocessConfig& cfg = {}) {
  if (raw.size() == 0 || raw.data.size() != raw.size()) throw DataError("preprocess: empty volume");
  for (int a = 0; a < 3; ++a)
    if (!(raw.spacing_mm[a] > 0.0)) throw DataError("preprocess: spacing must be positive");
  for (double x : raw.data)
    if (std::isnan(x)) throw DataError("preprocess: NaN voxel");
  return center_fit(resample_trilinear(clip_hu(raw), cfg.target_spacing_mm), cfg.target_shape);
}

// ---------------------------------------------------------------------------
// Time grid

// Type-7 sample quantile of sorted values.
inline double quantile_sorted(const std::vector<double>& sorted, double p) {
  const double h = static_cast<double>(sorted.size() - 1) * p;
  const auto lo = static_cast<std::size_t>(std::floor(h));
  const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
  return sorted[lo] + (h - static_cast<double>(lo)) * (sorted[hi] - sorted[lo]);
}

inline TimeGrid build_time_grid(const std::vector<SurvivalRecord>& records, std::size_t k) {
  if (k < 2) throw std::invalid_argument("build_time_grid: k must be at least 2");
  std::vector<double> events;
  double max_time = 0.0;
  for (const auto& r : records) {
    if (r.event) events.push_back(r.time);
    max_time = std::max(max_time, r.time);
  }
  std::sort(events.begin(), events.end());
  std::vector<double> distinct(events);
  distinct.erase(std::unique(distinct.begin(), distinct.end()), distinct.end());
  if (distinct.size() < k)
    throw DataError("build_time_grid: only " + std::to_string(distinct.size()) +
                    " distinct event times for " + std::to_string(k) + " bins; use a smaller k_bins");
  TimeGrid grid;
  grid.edges.push_back(0.0);
  for (std::size_t j = 1; j < k; ++j)
    grid.edges.push_back(quantile_sorted(events, static_cast<double>(j) / static_cast<double>(k)));
  grid.edges.push_back(max_time);
  grid.edges.erase(std::unique(grid.edges.begin(), grid.edges.end()), grid.edges.end());
  if (grid.bins() != k)
    throw DataError("build_time_grid: tied event times collapse the grid to " +
                    std::to_string(grid.bins()) + " bins; use a smaller k_bins");
  return grid;
}

// ---------------------------------------------------------------------------
// Synthetic cohort

enum class RiskLaw { LinearInLesionSize, TwoGroup };

inline std::string to_string(RiskLaw r) {
  return r == RiskLaw::LinearInLesionSize ? "linear_in_lesion_size" : "two_group";
}

inline RiskLaw parse_risk_law(const std::string& s) {
  if (s == "linear_in_lesion_size" || s == "LinearInLesionSize") return RiskLaw::LinearInLesionSize;
  if (s == "two_group" || s == "TwoGroup") return RiskLaw::TwoGroup;
  throw std::invalid_argument("unknown risk law '" + s + "'");
}

struct SynthCohortConfig {
  std::size_t n_patients = 400;
  double censor_rate = 0.25;
  std::size_t feature_dim = 7;  // clinical covariates emitted, 0..7
  RiskLaw risk_law = RiskLaw::LinearInLesionSize;
  std::uint64_t seed = 7;
  double beta = 1.0;
  double baseline_rate = 1.0 / 365.0;  // events per day at zero log-risk
  std::array<std::size_t, 3> volume_shape{24, 24, 16};
  std::array<double, 3> spacing_mm{1.5, 1.5, 3.0};
  std::size_t lesion_min = 3;   // in-plane side, voxels
  std::size_t lesion_max = 10;
  double test_fraction = 0.25;

  void validate() const {
    if (n_patients < 2) throw std::invalid_argument("synth: need at least 2 patients");
    if (!(censor_rate >= 0.0 && censor_rate < 1.0))
      throw std::invalid_argument("synth: censor_rate must lie in [0, 1)");
    if (feature_dim > 7) throw std::invalid_argument("synth: feature_dim must be at most 7");
    if (lesion_min < 1 || lesion_min > lesion_max)
      throw std::invalid_argument("synth: bad lesion size range");
    for (int a = 0; a < 2; ++a)
      if (volume_shape[a] < lesion_max + 2) throw std::invalid_argument("synth: volume too small for lesions");
    if (volume_shape[2] < (lesion_max + 1) / 2 + 2)
      throw std::invalid_argument("synth: volume too shallow for lesions");
    if (!(test_fraction > 0.0 && test_fraction < 1.0))
      throw std::invalid_argument("synth: test_fraction must lie in (0, 1)");
  }
};

inline void to_json(nlohmann::json& j, const SynthCohortConfig& c) {
  j = nlohmann::json{{"n_patients", c.n_patients},   {"censor_rate", c.censor_rate},
                     {"feature_dim", c.feature_dim}, {"risk_law", to_string(c.risk_law)},
                     {"seed", c.seed},               {"beta", c.beta},
                     {"baseline_rate", c.baseline_rate}, {"volume_shape", c.volume_shape},
                     {"spacing_mm", c.spacing_mm},   {"lesion_min", c.lesion_min},
                     {"lesion_max", c.lesion_max},   {"test_fraction", c.test_fraction}};
}

inline void from_json(const nlohmann::json& j, SynthCohortConfig& c) {
  static const std::set<std::string> known{"n_patients", "censor_rate", "feature_dim", "risk_law",
                                           "seed", "beta", "baseline_rate", "volume_shape",
                                           "spacing_mm", "lesion_min", "lesion_max", "test_fraction"};
  for (auto it = j.begin(); it != j.end(); ++it)
    if (!known.count(it.key())) throw std::invalid_argument("synth config: unknown key '" + it.key() + "'");
  auto get = [&](const char* key, auto& field) {
    if (j.contains(key)) j.at(key).get_to(field);
  };
  get("n_patients", c.n_patients);
  get("censor_rate", c.censor_rate);
  get("feature_dim", c.feature_dim);
  if (j.contains("risk_law")) c.risk_law = parse_risk_law(j.at("risk_law").get<std::string>());
  get("seed", c.seed);
  get("beta", c.beta);
  get("baseline_rate", c.baseline_rate);
  get("volume_shape", c.volume_shape);
  get("spacing_mm", c.spacing_mm);
  get("lesion_min", c.lesion_min);
  get("lesion_max", c.lesion_max);
  get("test_fraction", c.test_fraction);
}

struct SynthCohort {
  std::vector<Volume> volumes;
  std::vector<ReportRecord> reports;
  std::vector<SurvivalRecord> records;
  std::vector<double> oracle_risk;
  std::vector<double> lesion_mm;
  std::vector<std::string> train_ids;
  std::vector<std::string> test_ids;
};

namespace detail {

// RNG streams used by the generator.
enum SynthStream : std::uint64_t {
  kStreamLesion = 1,
  kStreamEvent = 2,
  kStreamCensor = 3,
  kStreamClinical = 4,
  kStreamReport = 5,
  kStreamSplit = 6,
  kStreamVolume = 1000,  // + patient index
};

inline std::string patient_id(std::size_t i, std::size_t n) {
  const std::size_t width = std::max<std::size_t>(4, std::to_string(n).size());
  std::string s = std::to_string(i + 1);
  return "P" + std::string(width - s.size(), '0') + s;
}

// Fraction of records censored when censoring times are scale * u_i.
inline double censored_fraction(const std::vector<double>& event_times, const std::vector<double>& u,
                                double scale) {
  std::size_t c = 0;
  for (std::size_t i = 0; i < u.size(); ++i) c += scale * u[i] < event_times[i];
  return static_cast<double>(c) / static_cast<double>(u.size());
}

}  // namespace detail

// Each patient gets a background volume with a bright cubic lesion of
// in-plane side s voxels; the true log-risk is beta times the standardized
// size (linear law) or beta for large lesions (two-group law). Event times
// are exponential, censoring is uniform on [0, c] with c tuned so the
// censored fraction matches censor_rate.
inline SynthCohort generate_synth_cohort(const SynthCohortConfig& cfg) {
  cfg.validate();
  const std::size_t n = cfg.n_patients;
  SynthCohort out;

  CounterRng lesion_rng(cfg.seed, detail::kStreamLesion);
  std::vector<std::size_t> side(n);
  std::vector<std::array<std::size_t, 3>> corner(n);
  const double lo = static_cast<double>(cfg.lesion_min), hi = static_cast<double>(cfg.lesion_max);
  const double mean_side = 0.5 * (lo + hi);
  const double sd_side = std::sqrt(((hi - lo + 1) * (hi - lo + 1) - 1) / 12.0);
  for (std::size_t i = 0; i < n; ++i) {
    if (cfg.risk_law == RiskLaw::TwoGroup) {
      side[i] = lesion_rng.uniform() < 0.5 ? cfg.lesion_min : cfg.lesion_max;
    } else {
      side[i] = static_cast<std::size_t>(lesion_rng.uniform_int(static_cast<std::int64_t>(cfg.lesion_min),
                                                                static_cast<std::int64_t>(cfg.lesion_max)));
    }
    const std::size_t depth = (side[i] + 1) / 2;
    corner[i] = {static_cast<std::size_t>(lesion_rng.uniform_int(1, static_cast<std::int64_t>(cfg.volume_shape[0] - side[i] - 1))),
                 static_cast<std::size_t>(lesion_rng.uniform_int(1, static_cast<std::int64_t>(cfg.volume_shape[1] - side[i] - 1))),
                 static_cast<std::size_t>(lesion_rng.uniform_int(1, static_cast<std::int64_t>(cfg.volume_shape[2] - depth - 1)))};
    double risk = 0.0;
    if (cfg.risk_law == RiskLaw::TwoGroup) {
      risk = side[i] == cfg.lesion_max ? cfg.beta : 0.0;
    } else {
      risk = cfg.beta * (static_cast<double>(side[i]) - mean_side) / (sd_side > 0 ? sd_side : 1.0);
    }
    out.oracle_risk.push_back(risk);
    out.lesion_mm.push_back(static_cast<double>(side[i]) * cfg.spacing_mm[0]);
  }

  CounterRng event_rng(cfg.seed, detail::kStreamEvent);
  CounterRng censor_rng(cfg.seed, detail::kStreamCensor);
  std::vector<double> event_time(n), u(n);
  for (std::size_t i = 0; i < n; ++i) {
    event_time[i] = -std::log(event_rng.uniform_open0()) / (cfg.baseline_rate * std::exp(out.oracle_risk[i]));
    u[i] = censor_rng.uniform_open0();
  }
  double scale = std::numeric_limits<double>::infinity();
  if (cfg.censor_rate > 0.0) {
    // censored fraction is nonincreasing in the scale; bisect on it
    double a = 0.0, b = *std::max_element(event_time.begin(), event_time.end()) /
                        *std::min_element(u.begin(), u.end());
    for (int it = 0; it < 200; ++it) {
      const double mid = 0.5 * (a + b);
      if (detail::censored_fraction(event_time, u, mid) > cfg.censor_rate) a = mid; else b = mid;
    }
    scale = b;
  }
  for (std::size_t i = 0; i < n; ++i) {
    const double c = scale * u[i];
    const bool event = !(c < event_time[i]);
    out.records.push_back({detail::patient_id(i, n), event ? event_time[i] : c, event});
  }

  // Clinical covariates carry no survival signal.
  static const std::array<const char*, 7> keys{"age", "gender", "smoking", "stage", "T", "N", "M"};
  CounterRng clin_rng(cfg.seed, detail::kStreamClinical);
  CounterRng report_rng(cfg.seed, detail::kStreamReport);
  for (std::size_t i = 0; i < n; ++i) {
    ReportRecord r;
    r.scan_id = out.records[i].patient_id;
    std::map<std::string, std::string> all;
    all["age"] = std::to_string(clin_rng.uniform_int(45, 85));
    all["gender"] = clin_rng.uniform() < 0.5 ? "male" : "female";
    static const std::array<const char*, 3> smoking{"never", "former", "current"};
    all["smoking"] = smoking[static_cast<std::size_t>(clin_rng.uniform_int(0, 2))];
    all["stage"] = std::to_string(clin_rng.uniform_int(1, 4));
    all["T"] = "T" + std::to_string(clin_rng.uniform_int(1, 4));
    all["N"] = "N" + std::to_string(clin_rng.uniform_int(0, 3));
    all["M"] = "M" + std::to_string(clin_rng.uniform_int(0, 1));
    for (std::size_t k = 0; k < cfg.feature_dim; ++k) r.clinical[keys[k]] = all[keys[k]];

    const std::size_t s = side[i];
    const auto& c = corner[i];
    const double size_mm = out.lesion_mm[i];
    const std::string lr = c[0] + s / 2 < cfg.volume_shape[0] / 2 ? "right" : "left";
    const std::string ul = c[2] + s / 4 < cfg.volume_shape[2] / 2 ? "lower" : "upper";
    const double big = static_cast<double>(s - cfg.lesion_min) /
                       std::max(1.0, static_cast<double>(cfg.lesion_max - cfg.lesion_min));
    std::string text = "There is a " + format_double(size_mm) + " mm mass in the " + lr + " " + ul + " lobe.";
    if (big > 0.6) {
      text += " Enlarged " + lr + " hilar lymph nodes measuring up to " +
              std::to_string(8 + static_cast<int>(s)) + " mm.";
    } else {
      text += " No enlarged lymph nodes.";
    }
    text += report_rng.uniform() < 0.2 + 0.5 * big ? " Small " + lr + " pleural effusion."
                                                      : " No pleural effusion.";
    text += " The heart size is normal.";
    if (big > 0.8 && report_rng.uniform() < 0.7) {
      text += " Adrenal nodule suspicious for metastasis.";
    } else if (report_rng.uniform() < 0.5) {
      text += " No evidence of distant metastases.";
    }
    if (big > 0.5) {
      text += " The " + lr + " pulmonary artery is encased.";
    } else if (report_rng.uniform() < 0.5) {
      text += " Major vessels are patent.";
    }
    if (report_rng.uniform() < 0.3) text += " Degenerative changes of the thoracic spine.";
    r.report_text = text;
    r.time = out.records[i].time;
    r.event = out.records[i].event;
    out.reports.push_back(std::move(r));

    Volume v(cfg.volume_shape, cfg.spacing_mm);
    CounterRng vol_rng(cfg.seed, detail::kStreamVolume + i);
    for (double& x : v.data) x = std::clamp(-850.0 + 40.0 * vol_rng.normal(), kHuMin, kHuMax);
    const std::size_t depth = (s + 1) / 2;
    for (std::size_t z = c[2]; z < c[2] + depth; ++z)
      for (std::size_t y = c[1]; y < c[1] + s; ++y)
        for (std::size_t x = c[0]; x < c[0] + s; ++x) v.at(x, y, z) = 40.0 + 20.0 * vol_rng.normal();
    out.volumes.push_back(std::move(v));
  }

  const auto order = permutation(n, cfg.seed, detail::kStreamSplit);
  const auto n_test = std::max<std::size_t>(
      1, std::min(n - 1, static_cast<std::size_t>(std::llround(cfg.test_fraction * static_cast<double>(n)))));
  std::vector<std::size_t> test(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_test));
  std::vector<std::size_t> train(order.begin() + static_cast<std::ptrdiff_t>(n_test), order.end());
  std::sort(test.begin(), test.end());
  std::sort(train.begin(), train.end());
  for (auto i : train) out.train_ids.push_back(out.records[i].patient_id);
  for (auto i : test) out.test_ids.push_back(out.records[i].patient_id);
  return out;
}

// ---------------------------------------------------------------------------
// Cohort directory layout
//
//   reports.jsonl, cohort.csv, oracle_risks.csv, split.json,
//   volumes/<scan_id>.json + volumes/<scan_id>.raw

inline std::vector<std::string> write_synth_cohort(const std::string& dir, const SynthCohort& c) {
  namespace fs = std::filesystem;
  fs::create_directories(fs::path(dir) / "volumes");
  std::vector<std::string> written;
  auto open = [&](const std::string& name) {
    const auto path = (fs::path(dir) / name).string();
    std::ofstream f(path, std::ios::binary);
    if (!f) throw DataError("cannot write " + path);
    written.push_back(path);
    return f;
  };
  {
    auto f = open("reports.jsonl");
    write_reports_jsonl(f, c.reports);
  }
  {
    auto f = open("cohort.csv");
    write_cohort_csv(f, c.records);
  }
  {
    auto f = open("oracle_risks.csv");
    f << "patient_id,risk\n";
    for (std::size_t i = 0; i < c.records.size(); ++i)
      f << c.records[i].patient_id << ',' << format_double(c.oracle_risk[i]) << '\n';
  }
  {
    auto f = open("split.json");
    f << nlohmann::json{{"train", c.train_ids}, {"test", c.test_ids}}.dump() << '\n';
  }
  for (std::size_t i = 0; i < c.volumes.size(); ++i) {
    const auto stem = (fs::path(dir) / "volumes" / c.records[i].patient_id).string();
    write_volume(stem, c.volumes[i]);
    written.push_back(stem + ".json");
    written.push_back(stem + ".raw");
  }
  return written;
}

struct CohortSplit {
  std::vector<std::string> train;
  std::vector<std::string> test;
};

inline CohortSplit read_split(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path);
  try {
    auto j = nlohmann::json::parse(in);
    return {j.at("train").get<std::vector<std::string>>(), j.at("test").get<std::vector<std::string>>()};
  } catch (const nlohmann::json::exception& e) {
    throw DataError(path + ": " + e.what());
  }
}

// patient_id -> risk
inline std::map<std::string, double> read_risks_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path);
  std::string line;
  if (!std::getline(in, line) || line.substr(0, line.find_last_not_of("\r") + 1) != "patient_id,risk")
    throw DataError(path + ": expected header 'patient_id,risk'");
  std::map<std::string, double> out;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    auto cols = split_csv_line(line);
    const std::string where = path + ":" + std::to_string(line_no);
    if (cols.size() != 2) throw DataError(where + ": expected 2 columns");
    if (!out.emplace(std::string(cols[0]), parse_double(cols[1], where)).second)
      throw DataError(where + ": duplicate patient_id");
  }
  return out;
}

}  // namespace survlm
