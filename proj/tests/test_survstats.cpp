// Copyright (c) 2026, The survlm Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "survlm/rng.hpp"
#include "survlm/survstats.hpp"

using namespace survlm;

namespace {

std::vector<SurvivalRecord> cohort(const std::vector<double>& times, const std::vector<int>& events) {
  std::vector<SurvivalRecord> out;
  for (std::size_t i = 0; i < times.size(); ++i)
    out.push_back({"p" + std::to_string(i), times[i], events[i] != 0});
  return out;
}

// Direct pairwise enumeration over every ordered pair (i, j).
double brute_force_cindex(const std::vector<SurvivalRecord>& r, const std::vector<double>& risk) {
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < r.size(); ++i)
    for (std::size_t j = 0; j < r.size(); ++j) {
      if (i == j || !r[i].event) continue;
      if (r[i].time < r[j].time) {
        den += 1.0;
        num += risk[i] > risk[j] ? 1.0 : (risk[i] == risk[j] ? 0.5 : 0.0);
      } else if (r[i].time == r[j].time && r[j].event && i < j) {
        den += 1.0;
        num += 0.5;
      }
    }
  if (den == 0.0) throw std::runtime_error("no comparable pairs");
  return num / den;
}

struct HandLogRank {
  double o_minus_e = 0.0;
  double variance = 0.0;
};

// Tabulates O - E and the hypergeometric variance for group a, counting
// the risk sets from scratch at every distinct event time.
HandLogRank tabulate_log_rank(const std::vector<SurvivalRecord>& a,
                              const std::vector<SurvivalRecord>& b) {
  std::vector<double> times;
  for (const auto* g : {&a, &b})
    for (const auto& r : *g)
      if (r.event) times.push_back(r.time);
  std::sort(times.begin(), times.end());
  times.erase(std::unique(times.begin(), times.end()), times.end());
  HandLogRank out;
  for (double t : times) {
    double na = 0, nb = 0, da = 0, db = 0;
    for (const auto& r : a) {
      na += r.time >= t;
      da += r.time == t && r.event;
    }
    for (const auto& r : b) {
      nb += r.time >= t;
      db += r.time == t && r.event;
    }
    const double n = na + nb, d = da + db;
    if (n < 2) continue;
    out.o_minus_e += da - d * na / n;
    out.variance += d * (na / n) * (nb / n) * (n - d) / (n - 1);
  }
  return out;
}

std::vector<SurvivalRecord> random_cohort(CounterRng& rng, std::size_t n, double censor_p,
                                          bool integer_times) {
  std::vector<SurvivalRecord> out;
  for (std::size_t i = 0; i < n; ++i) {
    double t = integer_times ? static_cast<double>(rng.uniform_int(1, 8)) : rng.uniform(0.1, 50.0);
    out.push_back({"p" + std::to_string(i), t, rng.uniform() >= censor_p});
  }
  return out;
}

}  // namespace

// --- Kaplan-Meier -----------------------------------------------------------

TEST(KaplanMeier, AllEvents) {
  auto km = km_estimate(cohort({1, 2, 3}, {1, 1, 1}));
  ASSERT_EQ(km.times.size(), 3u);
  EXPECT_DOUBLE_EQ(km.values[0], 2.0 / 3.0);
  EXPECT_DOUBLE_EQ(km.values[1], 1.0 / 3.0);
  EXPECT_DOUBLE_EQ(km.values[2], 0.0);
  EXPECT_EQ(km.at_risk, (std::vector<std::size_t>{3, 2, 1}));
}

TEST(KaplanMeier, AllCensoredHasNoKnots) {
  auto km = km_estimate(cohort({1, 2, 3}, {0, 0, 0}));
  EXPECT_TRUE(km.times.empty());
  EXPECT_EQ(km(0.0), 1.0);
  EXPECT_EQ(km(100.0), 1.0);
}

TEST(KaplanMeier, CensoredRecordShrinksRiskSet) {
  auto km = km_estimate(cohort({1, 2, 3}, {1, 0, 1}));
  ASSERT_EQ(km.times, (std::vector<double>{1, 3}));
  EXPECT_DOUBLE_EQ(km.values[0], 2.0 / 3.0);
  EXPECT_DOUBLE_EQ(km.values[1], 0.0);
  EXPECT_EQ(km.at_risk[1], 1u);
}

TEST(KaplanMeier, RightContinuousEvaluation) {
  auto km = km_estimate(cohort({1, 2, 3}, {1, 1, 1}));
  EXPECT_EQ(km(0.999), 1.0);
  EXPECT_DOUBLE_EQ(km(1.0), 2.0 / 3.0);
  EXPECT_DOUBLE_EQ(km(2.5), 1.0 / 3.0);
}

TEST(KaplanMeier, TiedEventsShareRiskSet) {
  auto km = km_estimate(cohort({2, 2, 5, 7}, {1, 1, 0, 1}));
  ASSERT_EQ(km.times, (std::vector<double>{2, 7}));
  EXPECT_DOUBLE_EQ(km.values[0], 0.5);
  EXPECT_EQ(km.events[0], 2u);
}

TEST(KaplanMeier, EmptyCohortThrows) {
  EXPECT_THROW(km_estimate({}), std::invalid_argument);
}

TEST(KaplanMeier, PropertiesOnRandomCohorts) {
  CounterRng rng(11, 0);
  for (int trial = 0; trial < 100; ++trial) {
    auto recs = random_cohort(rng, 1 + trial % 25, 0.3, trial % 2 == 0);
    auto km = km_estimate(recs);
    EXPECT_EQ(km(0.0), 1.0);
    double prev = 1.0;
    for (double v : km.values) {
      EXPECT_LE(v, prev);
      EXPECT_GE(v, 0.0);
      prev = v;
    }
  }
}

TEST(KaplanMeier, UncensoredEqualsEmpiricalSurvival) {
  CounterRng rng(12, 0);
  for (int trial = 0; trial < 50; ++trial) {
    auto recs = random_cohort(rng, 2 + trial % 20, 0.0, trial % 2 == 0);
    auto km = km_estimate(recs);
    for (const auto& probe : recs) {
      double below = 0;
      for (const auto& r : recs) below += r.time <= probe.time;
      EXPECT_NEAR(km(probe.time), 1.0 - below / static_cast<double>(recs.size()), 1e-12);
    }
  }
}

// --- log-rank ---------------------------------------------------------------

TEST(LogRank, IdenticalGroupsGiveZero) {
  auto a = cohort({1, 3, 4, 7}, {1, 0, 1, 1});
  auto res = log_rank_test(a, a);
  EXPECT_NEAR(res.statistic, 0.0, 1e-15);
  EXPECT_NEAR(res.p_value, 1.0, 1e-15);
}

TEST(LogRank, SeparatedGroupsMatchHandTabulation) {
  auto a = cohort({1, 2}, {1, 1});
  auto b = cohort({10, 11}, {1, 1});
  auto hand = tabulate_log_rank(a, b);
  // O - E = 1/2 + 2/3, V = 1/4 + 2/9
  EXPECT_NEAR(hand.o_minus_e, 7.0 / 6.0, 1e-15);
  EXPECT_NEAR(hand.variance, 17.0 / 36.0, 1e-15);
  auto res = log_rank_test(a, b);
  EXPECT_NEAR(res.statistic, 49.0 / 17.0, 1e-12);
  EXPECT_NEAR(res.p_value, std::erfc(std::sqrt(49.0 / 34.0)), 1e-12);
}

TEST(LogRank, AllCensoredGroupSkipsZeroVarianceTimes) {
  auto a = cohort({1, 2, 3}, {0, 0, 0});
  auto b = cohort({1.5, 2.5}, {1, 1});
  auto hand = tabulate_log_rank(a, b);
  auto res = log_rank_test(a, b);
  ASSERT_TRUE(std::isfinite(res.statistic));
  EXPECT_NEAR(res.statistic, hand.o_minus_e * hand.o_minus_e / hand.variance, 1e-12);
  EXPECT_NEAR(res.statistic, 2.0, 1e-12);
}

TEST(LogRank, NoEventsIsDegenerate) {
  EXPECT_THROW(log_rank_test(cohort({1}, {0}), cohort({2}, {0})), std::invalid_argument);
  EXPECT_THROW(log_rank_test({}, cohort({2}, {1})), std::invalid_argument);
}

TEST(LogRank, SymmetricAndMatchesTabulation) {
  CounterRng rng(13, 0);
  for (int trial = 0; trial < 100; ++trial) {
    auto a = random_cohort(rng, 2 + trial % 9, 0.3, trial % 3 == 0);
    auto b = random_cohort(rng, 2 + trial % 7, 0.3, trial % 3 == 0);
    bool any = false;
    for (const auto* g : {&a, &b})
      for (const auto& r : *g) any = any || r.event;
    if (!any) continue;
    auto ab = log_rank_test(a, b);
    auto ba = log_rank_test(b, a);
    EXPECT_NEAR(ab.statistic, ba.statistic, 1e-12);
    EXPECT_NEAR(ab.p_value, ba.p_value, 1e-12);
    auto hand = tabulate_log_rank(a, b);
    if (hand.variance > 0) {
      EXPECT_NEAR(ab.statistic, hand.o_minus_e * hand.o_minus_e / hand.variance, 1e-9);
    }
  }
}

TEST(ChiSquare, IncompleteGammaMatchesErfc) {
  for (double x : {1e-6, 0.01, 0.5, 1.0, 2.0, 3.84, 6.63, 10.0, 25.0, 60.0}) {
    EXPECT_NEAR(chi_square_sf(x, 1.0), std::erfc(std::sqrt(x / 2.0)), 1e-10) << x;
  }
  // chi-square(2) has survival exp(-x/2)
  for (double x : {0.1, 1.0, 5.0, 20.0}) EXPECT_NEAR(chi_square_sf(x, 2.0), std::exp(-x / 2), 1e-12);
  EXPECT_EQ(chi_square_sf(0.0, 1.0), 1.0);
}

// --- concordance ------------------------------------------------------------

TEST(Concordance, PerfectAndTied) {
  auto recs = cohort({1, 2, 3}, {1, 1, 1});
  EXPECT_EQ(concordance_index(recs, {3, 2, 1}), 1.0);
  EXPECT_EQ(concordance_index(recs, {1, 1, 1}), 0.5);
  EXPECT_EQ(concordance_index(recs, {1, 2, 3}), 0.0);
}

TEST(Concordance, CensoredEarlierTimeIsNotComparable) {
  auto recs = cohort({1, 2, 3}, {0, 1, 0});
  // only (2 -> 3) is comparable
  EXPECT_EQ(concordance_index(recs, {0, 5, 1}), 1.0);
  EXPECT_THROW(concordance_index(cohort({1, 2}, {0, 0}), {1, 2}), std::invalid_argument);
  EXPECT_THROW(concordance_index(cohort({1, 2}, {1, 1}), {1}), std::invalid_argument);
}

TEST(Concordance, MatchesBruteForceOracle) {
  CounterRng rng(14, 0);
  int checked = 0;
  for (int trial = 0; trial < 300; ++trial) {
    auto recs = random_cohort(rng, 2 + trial % 29, 0.35, trial % 2 == 0);
    std::vector<double> risk;
    for (std::size_t i = 0; i < recs.size(); ++i)
      risk.push_back(trial % 3 == 0 ? static_cast<double>(rng.uniform_int(0, 3)) : rng.normal());
    double expected;
    try {
      expected = brute_force_cindex(recs, risk);
    } catch (const std::runtime_error&) {
      EXPECT_THROW(concordance_index(recs, risk), std::invalid_argument);
      continue;
    }
    EXPECT_EQ(concordance_index(recs, risk), expected);
    ++checked;
  }
  EXPECT_GT(checked, 250);
}

TEST(Concordance, RankInvarianceAndNegation) {
  CounterRng rng(15, 0);
  for (int trial = 0; trial < 50; ++trial) {
    auto recs = random_cohort(rng, 20, 0.3, false);
    std::vector<double> risk, transformed, negated;
    for (std::size_t i = 0; i < recs.size(); ++i) {
      double r = rng.normal();
      risk.push_back(r);
      transformed.push_back(std::exp(3.0 * r) + 7.0);
      negated.push_back(-r);
    }
    double c = concordance_index(recs, risk);
    EXPECT_EQ(c, concordance_index(recs, transformed));
    EXPECT_NEAR(c + concordance_index(recs, negated), 1.0, 1e-12);
  }
}

// --- stratification ----------------------------------------------------------

TEST(Stratify, MedianRule) {
  using G = RiskGroup;
  EXPECT_EQ(stratify_median({1, 2, 3}), (std::vector<G>{G::Low, G::Low, G::High}));
  EXPECT_EQ(stratify_median({4, 1, 3, 2}), (std::vector<G>{G::High, G::Low, G::High, G::Low}));
  EXPECT_EQ(stratify_median({5, 5, 5}), (std::vector<G>{G::Low, G::Low, G::Low}));
  EXPECT_EQ(lower_median({4, 1, 3, 2}), 2.0);
}

TEST(Stratify, Properties) {
  CounterRng rng(16, 0);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<double> risks;
    const std::size_t n = 1 + trial % 17;
    for (std::size_t i = 0; i < n; ++i) risks.push_back(rng.normal());
    auto labels = stratify_median(risks);
    const auto high = std::count(labels.begin(), labels.end(), RiskGroup::High);
    EXPECT_LT(static_cast<std::size_t>(high), n);
    if (n % 2 == 0) {
      EXPECT_EQ(static_cast<std::size_t>(high), n / 2);
    }
  }
}

// --- token F1 ---------------------------------------------------------------

TEST(TokenF1, WorkedExamples) {
  EXPECT_EQ(token_f1("no pleural effusion", "no pleural effusion"), 1.0);
  EXPECT_EQ(token_f1("tumor", "nodule"), 0.0);
  EXPECT_DOUBLE_EQ(token_f1("left upper lobe mass", "mass in left lobe"), 0.75);
  EXPECT_EQ(token_f1("", ""), 1.0);
  EXPECT_EQ(token_f1("", "x"), 0.0);
  EXPECT_EQ(token_f1("x", "  "), 0.0);
  EXPECT_EQ(token_f1("No Effusion", "no effusion"), 1.0);
}

TEST(TokenF1, MultisetClipping) {
  // prediction repeats "mass" three times; only one copy is in the reference
  EXPECT_DOUBLE_EQ(token_f1("mass mass mass", "mass seen"), 2.0 * (1.0 / 3) * 0.5 / (1.0 / 3 + 0.5));
}

TEST(TokenF1, Symmetric) {
  const std::vector<std::string> texts{"a b c", "a a b", "c d", "b", "a b c d e", "e e e a"};
  for (const auto& x : texts)
    for (const auto& y : texts) EXPECT_DOUBLE_EQ(token_f1(x, y), token_f1(y, x));
}

// --- CSV --------------------------------------------------------------------

TEST(CohortCsv, RoundTripAndValidation) {
  auto recs = cohort({0.1, 2.5, 1e-3 + 1.0 / 3.0}, {1, 0, 1});
  std::stringstream ss;
  write_cohort_csv(ss, recs);
  auto back = read_cohort_csv(ss);
  ASSERT_EQ(back.size(), recs.size());
  for (std::size_t i = 0; i < recs.size(); ++i) {
    EXPECT_EQ(back[i].patient_id, recs[i].patient_id);
    EXPECT_EQ(back[i].time, recs[i].time);
    EXPECT_EQ(back[i].event, recs[i].event);
  }
  std::stringstream bad_header("id,time,event\n");
  EXPECT_THROW(read_cohort_csv(bad_header), DataError);
  std::stringstream bad_event("patient_id,time,event\na,1,2\n");
  EXPECT_THROW(read_cohort_csv(bad_event), DataError);
  std::stringstream dup("patient_id,time,event\na,1,1\na,2,0\n");
  EXPECT_THROW(read_cohort_csv(dup), DataError);
  std::stringstream neg("patient_id,time,event\na,-1,1\n");
  EXPECT_THROW(read_cohort_csv(neg), DataError);
}

TEST(KmCsv, Header) {
  std::stringstream ss;
  write_km_csv(ss, km_estimate(cohort({1, 2}, {1, 1})));
  EXPECT_EQ(ss.str(), "time,survival,at_risk,events\n1,0.5,2,1\n2,0,1,1\n");
}
