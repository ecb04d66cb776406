// SPDX-License-Identifier: Apache-2.0
//
// Experiment configuration: INI files with [experiment], [model], [train],
// [data] and [finetune] sections. A named preset fills in regime keys the
// file leaves unset; every remaining key gets its default, and the expanded
// result is what gets written next to the outputs.

#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <boost/property_tree/ptree.hpp>

#include "bplm/data.hpp"
#include "bplm/finetune.hpp"
#include "bplm/model.hpp"
#include "bplm/pretrain.hpp"

namespace bplm {

enum class Regime { kPfs, kBiphasic, kCpt };

const char* to_string(Regime regime);
Regime parse_regime(std::string_view name);

struct FinetuneSection {
  Task task = Task::kSc;
  std::string dataset = "synthetic";
  /// Directory with train/val/test JSONL; empty means generate synthetic data.
  std::filesystem::path data_dir;
  std::size_t generate_size = 200;
  std::uint64_t data_seed = 0;
  GridSearchSpec grid;
  FinetuneOptions options;
  /// IR only: dataset evaluated with the selected model and no extra training.
  std::filesystem::path zero_shot_dir;
};

struct ExperimentConfig {
  std::string name = "run";
  std::string preset;
  Regime regime = Regime::kPfs;
  ModelConfig model;
  TrainConfig train;
  CorpusSpec corpus;
  PackingSpec packing;
  std::int64_t cpt_steps = 0;
  std::optional<Objective> cpt_base_objective;
  FinetuneSection finetune;
  std::filesystem::path out_dir;
};

class ConfigFileError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

std::vector<std::string> preset_names();

/// Writes the keys implied by `preset` into `tree` unless already present.
void apply_preset(const std::string& preset, boost::property_tree::ptree& tree);

/// Preset expansion plus defaults; every key ends up explicit in `tree`.
ExperimentConfig expand_config(boost::property_tree::ptree& tree);

boost::property_tree::ptree read_config_tree(const std::filesystem::path& path);
void write_config_tree(const std::filesystem::path& path, const boost::property_tree::ptree& tree);

/// Study-grid guardrail: masking ratio must be one of the study ratios.
void check_study_settings(const ExperimentConfig& cfg, bool allow_nonstudy);

}  // namespace bplm
