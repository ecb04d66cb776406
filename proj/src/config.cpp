// SPDX-License-Identifier: Apache-2.0

#include "bplm/config.hpp"

#include <boost/property_tree/ini_parser.hpp>

#include <charconv>
#include <cmath>
#include <regex>
#include <sstream>

namespace bplm {

namespace pt = boost::property_tree;

namespace {

// Paper-scale schedule proportions: 2,000 warmup and decay steps of 42,000.
std::int64_t default_edge(std::int64_t total) { return (total * 2000 + 41999) / 42000; }

std::string fmt_double(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

class Reader {
 public:
  explicit Reader(pt::ptree& tree) : tree_(tree) {}

  template <typename T>
  T get(const std::string& key, const T& fallback) {
    const auto raw = tree_.get_optional<std::string>(key);
    T value = fallback;
    if (raw) {
      try {
        value = tree_.get<T>(key);
      } catch (const pt::ptree_bad_data&) {
        throw ConfigFileError("config key '" + key + "': cannot parse '" + *raw + "'");
      }
    }
    put(key, value);
    return value;
  }

  std::string str(const std::string& key, const std::string& fallback) {
    const auto v = tree_.get<std::string>(key, fallback);
    tree_.put(key, v);
    return v;
  }

  bool flag(const std::string& key, bool fallback) {
    const auto v = str(key, fallback ? "true" : "false");
    if (v == "true" || v == "1" || v == "yes") return put_bool(key, true);
    if (v == "false" || v == "0" || v == "no") return put_bool(key, false);
    throw ConfigFileError("config key '" + key + "': expected true/false, got '" + v + "'");
  }

 private:
  template <typename T>
  void put(const std::string& key, const T& value) {
    if constexpr (std::is_floating_point_v<T>) {
      tree_.put(key, fmt_double(value));
    } else {
      tree_.put(key, value);
    }
  }
  bool put_bool(const std::string& key, bool v) {
    tree_.put(key, v ? "true" : "false");
    return v;
  }

  pt::ptree& tree_;
};

template <typename T>
std::vector<T> parse_list(const std::string& key, const std::string& text) {
  std::vector<T> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item.erase(0, item.find_first_not_of(" \t"));
    item.erase(item.find_last_not_of(" \t") + 1);
    if (item.empty()) continue;
    try {
      if constexpr (std::is_floating_point_v<T>) {
        out.push_back(std::stod(item));
      } else {
        out.push_back(static_cast<T>(std::stoull(item)));
      }
    } catch (const std::exception&) {
      throw ConfigFileError("config key '" + key + "': bad list item '" + item + "'");
    }
  }
  return out;
}

template <typename T>
std::string join(const std::vector<T>& items) {
  std::string out;
  for (std::size_t i = 0; i < items.size(); ++i) {
    if (i) out += ",";
    if constexpr (std::is_floating_point_v<T>) {
      out += fmt_double(items[i]);
    } else {
      out += std::to_string(items[i]);
    }
  }
  return out;
}

void put_default(pt::ptree& tree, const std::string& key, const std::string& value) {
  if (!tree.get_optional<std::string>(key)) tree.put(key, value);
}

}  // namespace

const char* to_string(Regime regime) {
  switch (regime) {
    case Regime::kPfs: return "pfs";
    case Regime::kBiphasic: return "biphasic";
    case Regime::kCpt: return "cpt";
  }
  return "?";
}

Regime parse_regime(std::string_view name) {
  if (name == "pfs") return Regime::kPfs;
  if (name == "biphasic") return Regime::kBiphasic;
  if (name == "cpt") return Regime::kCpt;
  throw ConfigFileError("unknown regime '" + std::string(name) + "'");
}

std::vector<std::string> preset_names() {
  std::vector<std::string> out{"pfs-clm"};
  for (int r : {20, 30, 40, 50}) out.push_back("pfs-mlm-" + std::to_string(r));
  for (int c : {0, 25, 50, 75, 100}) {
    out.push_back("biphasic-" + std::to_string(c) + "-" + std::to_string(100 - c));
  }
  for (const char* base : {"clm", "mlm"}) {
    for (const char* n : {"2k", "12k", "22k"}) out.push_back(std::string("cpt-from-") + base + "-" + n);
  }
  return out;
}

void apply_preset(const std::string& preset, pt::ptree& tree) {
  if (preset.empty()) return;
  std::smatch m;
  if (preset == "pfs-clm") {
    put_default(tree, "train.regime", "pfs");
    put_default(tree, "train.objective", "clm");
  } else if (std::regex_match(preset, m, std::regex(R"(pfs-mlm-(20|30|40|50))"))) {
    put_default(tree, "train.regime", "pfs");
    put_default(tree, "train.objective", "mlm");
    put_default(tree, "train.mask_ratio", fmt_double(std::stoi(m[1]) / 100.0));
  } else if (std::regex_match(preset, m, std::regex(R"(biphasic-(\d+)-(\d+))"))) {
    const int clm = std::stoi(m[1]);
    if (clm + std::stoi(m[2]) != 100 || clm % 25 != 0) {
      throw ConfigFileError("unknown preset '" + preset + "'");
    }
    put_default(tree, "train.regime", "biphasic");
    put_default(tree, "train.clm_percent", std::to_string(clm));
  } else if (std::regex_match(preset, m, std::regex(R"(cpt-from-(clm|mlm)-(2|12|22)k)"))) {
    put_default(tree, "train.regime", "cpt");
    put_default(tree, "train.cpt_base_objective", m[1]);
    put_default(tree, "train.cpt_steps", std::to_string(std::stoi(m[2]) * 1000));
  } else {
    throw ConfigFileError("unknown preset '" + preset + "'");
  }
}

ExperimentConfig expand_config(pt::ptree& tree) {
  ExperimentConfig c;
  Reader r(tree);
  c.name = r.str("experiment.name", "run");
  c.preset = r.str("experiment.preset", "");
  apply_preset(c.preset, tree);
  const auto out = r.str("experiment.out", "");
  c.out_dir = out;

  auto& m = c.model;
  m.layers = r.get<std::size_t>("model.layers", m.layers);
  m.embed_dim = r.get<std::size_t>("model.embed_dim", m.embed_dim);
  m.ffn_dim = r.get<std::size_t>("model.ffn_dim", m.ffn_dim);
  m.heads = r.get<std::size_t>("model.heads", m.heads);
  m.kv_heads = r.get<std::size_t>("model.kv_heads", m.kv_heads);
  m.vocab_size = r.get<std::size_t>("model.vocab_size", m.vocab_size);
  m.max_seq_len = r.get<std::size_t>("model.max_seq_len", m.max_seq_len);
  m.rope_theta = r.get<double>("model.rope_theta", m.rope_theta);
  m.rmsnorm_eps = r.get<double>("model.rmsnorm_eps", m.rmsnorm_eps);
  m.init_std = r.get<double>("model.init_std", m.init_std);
  m.tie_embeddings = r.flag("model.tie_embeddings", m.tie_embeddings);
  try {
    m.validate();
  } catch (const std::exception& e) {
    throw ConfigFileError(std::string("[model] ") + e.what());
  }

  auto& t = c.train;
  c.regime = parse_regime(r.str("train.regime", "pfs"));
  const auto total = r.get<std::int64_t>("train.total_steps", 200);
  t.schedule.total_steps = total;
  t.schedule.peak_lr = r.get<double>("train.peak_lr", 5e-4);
  t.schedule.warmup_steps = r.get<std::int64_t>("train.warmup_steps", default_edge(total));
  t.schedule.decay_steps = r.get<std::int64_t>("train.decay_steps", default_edge(total));
  t.decay_applied_at_end = r.flag("train.decay_applied_at_end", true);
  t.mask_ratio = r.get<double>("train.mask_ratio", 0.4);
  t.corruption.mask = r.get<double>("train.corrupt_mask", 1.0);
  t.corruption.random = r.get<double>("train.corrupt_random", 0.0);
  t.corruption.keep = r.get<double>("train.corrupt_keep", 0.0);
  t.tokens_per_step = r.get<std::size_t>("train.tokens_per_step", 0);
  t.seed = r.get<std::uint64_t>("train.seed", 0);
  t.checkpoint_every = r.get<std::int64_t>("train.checkpoint_every", 0);
  t.adam.beta1 = r.get<double>("train.beta1", t.adam.beta1);
  t.adam.beta2 = r.get<double>("train.beta2", t.adam.beta2);
  t.adam.eps = r.get<double>("train.adam_eps", t.adam.eps);
  t.adam.weight_decay = r.get<double>("train.weight_decay", t.adam.weight_decay);
  t.clip_norm = r.get<double>("train.clip_norm", 1.0);
  t.reset_optimizer_at_switch = r.flag("train.reset_optimizer_at_switch", false);

  switch (c.regime) {
    case Regime::kPfs: {
      const auto objective = parse_objective(r.str("train.objective", "clm"));
      t.plan = pfs_plan(objective, total);
      break;
    }
    case Regime::kBiphasic: {
      const auto pct = r.get<std::int64_t>("train.clm_percent", 50);
      if (pct < 0 || pct > 100) throw ConfigFileError("train.clm_percent must be in [0, 100]");
      const auto clm = r.get<std::int64_t>("train.clm_steps", total * pct / 100);
      t.plan = biphasic_plan(clm, total - clm);
      break;
    }
    case Regime::kCpt: {
      c.cpt_steps = r.get<std::int64_t>("train.cpt_steps", 2000);
      const auto base = r.str("train.cpt_base_objective", "");
      if (!base.empty()) c.cpt_base_objective = parse_objective(base);
      t.plan = pfs_plan(Objective::kMlm, c.cpt_steps);
      break;
    }
  }

  auto& d = c.corpus;
  const auto gen = r.str("data.generator", "markov");
  if (gen == "markov") {
    d.generator = CorpusGenerator::kMarkov;
  } else if (gen == "pattern") {
    d.generator = CorpusGenerator::kRepeatedPattern;
  } else {
    throw ConfigFileError("data.generator must be markov or pattern");
  }
  d.order = r.get<std::size_t>("data.order", 1);
  d.alphabet = r.get<std::size_t>("data.alphabet", 16);
  d.seed = r.get<std::uint64_t>("data.seed", 0);
  d.target_tokens = r.get<std::size_t>("data.target_tokens", 20000);
  d.min_len = r.get<std::size_t>("data.min_len", 12);
  d.max_len = r.get<std::size_t>("data.max_len", 32);
  d.sharpness = r.get<double>("data.sharpness", 1.5);
  const auto rows = r.str("data.rows", "independent");
  if (rows == "independent") {
    d.rows = RowMode::kIndependent;
  } else if (rows == "permuted_shared") {
    d.rows = RowMode::kPermutedShared;
  } else {
    throw ConfigFileError("data.rows must be independent or permuted_shared");
  }
  d.pattern = parse_list<TokenId>("data.pattern", r.str("data.pattern", ""));
  try {
    d.validate(m.max_seq_len);
  } catch (const std::exception& e) {
    throw ConfigFileError(std::string("[data] ") + e.what());
  }
  c.packing.batch_rows = r.get<std::size_t>("data.batch_rows", 4);
  c.packing.min_len = d.min_len;
  c.packing.max_len = d.max_len;
  c.packing.seed = r.get<std::uint64_t>("data.shuffle_seed", d.seed);
  c.packing.max_epochs = r.get<std::size_t>("data.max_epochs", 0);

  auto& f = c.finetune;
  f.task = parse_task(r.str("finetune.task", "sc"));
  f.dataset = r.str("finetune.dataset", "synthetic");
  f.data_dir = r.str("finetune.data_dir", "");
  f.generate_size = r.get<std::size_t>("finetune.generate_size", 200);
  f.data_seed = r.get<std::uint64_t>("finetune.data_seed", 0);
  f.grid.learning_rates =
      parse_list<double>("finetune.learning_rates",
                         r.str("finetune.learning_rates",
                               join(std::vector<double>(kStudyLearningRates.begin(), kStudyLearningRates.end()))));
  f.grid.seeds = parse_list<std::uint64_t>("finetune.seeds", r.str("finetune.seeds", "0,1,2,3,4"));
  f.grid.max_steps = r.get<std::int64_t>("finetune.max_steps", 1000);
  f.grid.batch_size = r.get<std::size_t>("finetune.batch_size", 32);
  f.options.batch_size = f.grid.batch_size;
  f.options.max_steps = f.grid.max_steps;
  f.options.temperature = r.get<double>("finetune.temperature", 0.05);
  f.options.ir_hard_negatives = r.flag("finetune.ir_hard_negatives", false);
  f.options.head_init_std = r.get<double>("finetune.head_init_std", 0.02);
  f.zero_shot_dir = r.str("finetune.zero_shot_dir", "");
  return c;
}

pt::ptree read_config_tree(const std::filesystem::path& path) {
  pt::ptree tree;
  try {
    pt::read_ini(path.string(), tree);
  } catch (const pt::ini_parser_error& e) {
    throw ConfigFileError(e.what());
  }
  return tree;
}

void write_config_tree(const std::filesystem::path& path, const pt::ptree& tree) {
  pt::write_ini(path.string(), tree);
}

void check_study_settings(const ExperimentConfig& cfg, bool allow_nonstudy) {
  if (!is_study_ratio(cfg.train.mask_ratio) && !allow_nonstudy) {
    throw ConfigFileError("masking ratio " + fmt_double(cfg.train.mask_ratio) +
                          " is outside the study set {0.2, 0.3, 0.4, 0.5}; pass --allow-nonstudy to override");
  }
}

}  // namespace bplm
