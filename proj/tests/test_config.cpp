// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <filesystem>
#include <sstream>

#include <boost/property_tree/ini_parser.hpp>

#include "bplm/config.hpp"

using namespace bplm;
namespace pt = boost::property_tree;

namespace {

pt::ptree ini(const std::string& text) {
  std::istringstream is(text);
  pt::ptree t;
  pt::read_ini(is, t);
  return t;
}

}  // namespace

TEST(Config, DefaultsBecomeExplicit) {
  auto t = ini("[experiment]\nname=x\n");
  const auto c = expand_config(t);
  EXPECT_EQ(c.regime, Regime::kPfs);
  EXPECT_EQ(c.train.schedule.total_steps, 200);
  EXPECT_EQ(c.train.schedule.warmup_steps, 10);  // ceil(200 * 2000 / 42000)
  EXPECT_EQ(t.get<std::string>("train.mask_ratio"), "0.4");
  EXPECT_TRUE(t.get_optional<std::string>("model.embed_dim").has_value());
  EXPECT_TRUE(t.get_optional<std::string>("finetune.learning_rates").has_value());
  // Expanding an expanded tree is a fixed point.
  auto again = t;
  expand_config(again);
  EXPECT_EQ(again, t);
}

TEST(Config, Presets) {
  const auto names = preset_names();
  EXPECT_NE(std::find(names.begin(), names.end(), "biphasic-25-75"), names.end());

  auto b = ini("[experiment]\npreset=biphasic-25-75\n[train]\ntotal_steps=12\n");
  const auto c = expand_config(b);
  EXPECT_EQ(c.regime, Regime::kBiphasic);
  EXPECT_EQ(c.train.plan, biphasic_plan(3, 9));

  auto m = ini("[experiment]\npreset=pfs-mlm-20\n");
  const auto mc = expand_config(m);
  EXPECT_EQ(mc.train.plan.front().objective, Objective::kMlm);
  EXPECT_EQ(mc.train.mask_ratio, 0.2);

  auto cpt = ini("[experiment]\npreset=cpt-from-clm-12k\n");
  const auto cc = expand_config(cpt);
  EXPECT_EQ(cc.regime, Regime::kCpt);
  EXPECT_EQ(cc.cpt_steps, 12000);
  EXPECT_EQ(cc.cpt_base_objective, Objective::kClm);

  // Explicit keys win over the preset.
  auto over = ini("[experiment]\npreset=pfs-mlm-20\n[train]\nmask_ratio=0.5\n");
  EXPECT_EQ(expand_config(over).train.mask_ratio, 0.5);

  auto bad = ini("[experiment]\npreset=biphasic-30-70\n");
  EXPECT_THROW(expand_config(bad), ConfigFileError);
}

TEST(Config, ErrorsNameTheKey) {
  auto t = ini("[train]\ntotal_steps=abc\n");
  try {
    expand_config(t);
    FAIL();
  } catch (const ConfigFileError& e) {
    EXPECT_NE(std::string(e.what()).find("train.total_steps"), std::string::npos);
  }
  auto gen = ini("[data]\ngenerator=zipf\n");
  EXPECT_THROW(expand_config(gen), ConfigFileError);
}

TEST(Config, StudyGuardrail) {
  auto t = ini("[train]\nmask_ratio=0.7\n");
  const auto c = expand_config(t);
  EXPECT_THROW(check_study_settings(c, false), ConfigFileError);
  EXPECT_NO_THROW(check_study_settings(c, true));
}

TEST(Config, FileRoundTrip) {
  auto t = ini("[experiment]\npreset=pfs-clm\n");
  expand_config(t);
  const auto path = std::filesystem::temp_directory_path() / ("bplm_cfg_" + std::to_string(::getpid()) + ".ini");
  write_config_tree(path, t);
  EXPECT_EQ(read_config_tree(path), t);
  std::filesystem::remove(path);
  EXPECT_THROW(read_config_tree(path), ConfigFileError);
}
