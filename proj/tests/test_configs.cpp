// Copyright (c) 2026, The survlm Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "survlm/dataprep.hpp"
#include "survlm/train.hpp"

using namespace survlm;
namespace fs = std::filesystem;

namespace {

nlohmann::json read(const std::string& name) {
  std::ifstream in(fs::path(SURVLM_CONFIG_DIR) / name);
  EXPECT_TRUE(in.good()) << name;
  return nlohmann::json::parse(in);
}

}  // namespace

TEST(ShippedConfigs, ModelConfigParsesAndValidates) {
  auto c = read("model_desk.json").get<ModelConfig>();
  c.vocab_size = 100;
  EXPECT_NO_THROW(c.validate());
  EXPECT_EQ(nlohmann::json(c)["d_text"], ModelConfig{}.d_text);
}

TEST(ShippedConfigs, TrainPresetsParseAndValidate) {
  for (const char* name : {"pretrain_desk.json", "finetune_desk_continuous.json", "finetune_desk_discrete.json",
                           "pretrain_paper.json", "finetune_paper_continuous.json", "finetune_paper_discrete.json",
                           "pretrain_small.json", "finetune_small.json"}) {
    auto c = read(name).get<TrainConfig>();
    EXPECT_NO_THROW(c.validate()) << name;
  }
}

TEST(ShippedConfigs, PaperPresetsKeepPublishedSettings) {
  for (const char* name : {"pretrain_paper.json", "finetune_paper_continuous.json", "finetune_paper_discrete.json"}) {
    auto c = read(name).get<TrainConfig>();
    EXPECT_EQ(c.lr_peak, 1e-6) << name;
    EXPECT_EQ(c.warmup_steps, 500u) << name;
    EXPECT_EQ(c.effective_batch(), 96u) << name;
    EXPECT_EQ(c.betas, (std::array<double, 2>{0.9, 0.999})) << name;
    EXPECT_EQ(c.alpha, 0.5) << name;
  }
}

TEST(ShippedConfigs, SynthPresetsParse) {
  auto d = read("synth_default.json").get<SynthCohortConfig>();
  EXPECT_NO_THROW(d.validate());
  EXPECT_EQ(nlohmann::json(d), nlohmann::json(SynthCohortConfig{}));
  EXPECT_NO_THROW(read("synth_small.json").get<SynthCohortConfig>().validate());
}

TEST(ShippedConfigs, TemplatesMatchDefaults) {
  const auto t = templates_from_json(read("templates.json"));
  EXPECT_EQ(templates_to_json(t), templates_to_json(default_templates()));
}
