// SPDX-License-Identifier: Apache-2.0
//
// bplm: pretraining, continued pretraining, fine-tuning grids and reports.

#include <algorithm>
#include <CLI11.hpp>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "bplm/checkpoint.hpp"
#include "bplm/config.hpp"
#include "bplm/data.hpp"
#include "bplm/finetune.hpp"
#include "bplm/pretrain.hpp"

namespace fs = std::filesystem;
using namespace bplm;

namespace {

struct Common {
  std::string config;
  std::string out;
  std::optional<std::uint64_t> seed;
  bool allow_nonstudy = false;
  bool timing = false;
};

fs::path resolve_out(const Common& opt, const ExperimentConfig& cfg) {
  if (!opt.out.empty()) return opt.out;
  if (!cfg.out_dir.empty()) return cfg.out_dir;
  if (const char* root = std::getenv("BPLM_OUT_DIR"); root && *root) return fs::path(root) / cfg.name;
  return fs::path("runs") / cfg.name;
}

struct Loaded {
  boost::property_tree::ptree tree;
  ExperimentConfig cfg;
  fs::path out;
};

Loaded load(const Common& opt) {
  Loaded l;
  if (!opt.config.empty()) l.tree = read_config_tree(opt.config);
  if (opt.seed) l.tree.put("train.seed", *opt.seed);
  l.cfg = expand_config(l.tree);
  check_study_settings(l.cfg, opt.allow_nonstudy);
  if (opt.allow_nonstudy && !is_study_ratio(l.cfg.train.mask_ratio)) {
    std::cerr << "WARNING: masking ratio " << l.cfg.train.mask_ratio << " is outside the study set\n";
  }
  l.out = resolve_out(opt, l.cfg);
  fs::create_directories(l.out);
  return l;
}

std::string step_file(std::int64_t step) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "step_%08lld.bplm", static_cast<long long>(step));
  return buf;
}

RunHooks make_hooks(const fs::path& out, std::ostream& events) {
  RunHooks hooks;
  fs::create_directories(out / "checkpoints");
  hooks.on_checkpoint = [out](const Checkpoint& c) { save_checkpoint(c, out / "checkpoints" / step_file(c.step)); };
  hooks.on_phase_start = [&events](std::size_t phase, const PhaseSpec& spec, const Checkpoint& c) {
    std::ostringstream line;
    line << "phase " << phase << " (" << to_string(spec.objective) << ", "
         << to_string(attention_mode_for(spec.objective)) << " attention) starts at step " << c.step;
    std::cerr << line.str() << "\n";
    events << line.str() << "\n";
  };
  return hooks;
}

void write_outputs(const Loaded& l, const RunResult& result, bool timing) {
  save_checkpoint(result.checkpoint, l.out / "final.bplm");
  std::ofstream csv(l.out / "metrics.csv");
  write_trace_csv(csv, result.trace, timing);
  write_config_tree(l.out / "config.ini", l.tree);
  std::cerr << "wrote " << (l.out / "final.bplm").string() << " (step " << result.checkpoint.step
            << ", history " << history_str(result.checkpoint.history) << ")\n";
}

BatchStream make_stream(const ExperimentConfig& cfg) {
  Corpus corpus = gen_corpus(cfg.corpus);
  BatchStream stream(std::move(corpus.sequences), cfg.packing);
  if (stream.discarded() > 0) {
    std::cerr << "discarded " << stream.discarded() << " sequences shorter than " << cfg.packing.min_len << "\n";
  }
  return stream;
}

int cmd_pretrain(const Common& opt, const std::string& resume) {
  auto l = load(opt);
  if (l.cfg.regime == Regime::kCpt) throw ConfigError("regime 'cpt' runs through `bplm cpt`");
  const auto stream = make_stream(l.cfg);
  std::ofstream events(l.out / "events.log");
  const auto hooks = make_hooks(l.out, events);
  RunResult result;
  if (!resume.empty()) {
    result = resume_run(load_checkpoint(resume), l.cfg.train, stream, hooks);
  } else if (l.cfg.regime == Regime::kPfs) {
    result = run_pfs(l.cfg.model, l.cfg.train, stream, hooks);
  } else {
    result = run_biphasic(l.cfg.model, l.cfg.train, stream, hooks);
  }
  write_outputs(l, result, opt.timing);
  return 0;
}

int cmd_cpt(const Common& opt, const std::string& base_path, bool force) {
  auto l = load(opt);
  if (l.cfg.regime != Regime::kCpt) throw ConfigError("`bplm cpt` needs train.regime = cpt (or a cpt-from-* preset)");
  const Checkpoint base = load_checkpoint(base_path);
  if (l.cfg.cpt_base_objective && !base.history.empty() &&
      base.history.back().objective != *l.cfg.cpt_base_objective && !force) {
    throw ConfigError(std::string("preset expects a ") + to_string(*l.cfg.cpt_base_objective) +
                      " base but the checkpoint history is " + history_str(base.history));
  }
  l.cfg.model = base.model;
  const auto stream = make_stream(l.cfg);
  std::ofstream events(l.out / "events.log");
  const auto hooks = make_hooks(l.out, events);
  events << "base " << base_path << " history " << history_str(base.history) << "\n";
  const auto result = run_cpt(base, l.cfg.cpt_steps, l.cfg.train, stream, hooks, force);
  write_outputs(l, result, opt.timing);
  return 0;
}

TaskSplits task_data(const ExperimentConfig& cfg, const ModelConfig& model, const fs::path& out) {
  const auto& f = cfg.finetune;
  if (!f.data_dir.empty()) return load_splits(f.data_dir, f.task);
  // Generated data has to fit the checkpoint, not the config's model section.
  TaskDataOptions opts = TaskDataOptions::fitted(model.vocab_size);
  opts.max_len = std::min(opts.max_len, model.max_seq_len);
  opts.min_len = std::min(opts.min_len, opts.max_len);
  auto splits = gen_task_data(f.task, f.generate_size, f.data_seed, opts);
  write_splits(out / "data", splits);
  return splits;
}

int cmd_finetune(const Common& opt, const std::string& ckpt_path, std::size_t jobs, std::optional<std::size_t> seeds) {
  auto l = load(opt);
  auto& f = l.cfg.finetune;
  bool nonstudy = opt.allow_nonstudy;
  if (seeds) {
    f.grid.seeds.clear();
    for (std::size_t i = 0; i < *seeds; ++i) f.grid.seeds.push_back(i);
    l.tree.put("finetune.seeds", [&] {
      std::string s;
      for (std::size_t i = 0; i < *seeds; ++i) s += (i ? "," : "") + std::to_string(i);
      return s;
    }());
    if (*seeds != kStudySeedCount) {
      std::cerr << "WARNING: --seeds " << *seeds << " overrides the 5-seed study grid\n";
      nonstudy = true;
    }
  }
  f.grid.validate(nonstudy);
  const Checkpoint base = load_checkpoint(ckpt_path);
  const auto splits = task_data(l.cfg, base.model, l.out);
  const auto report = run_grid_search(base, f.task, f.dataset, splits, f.grid, f.options, jobs);

  std::ofstream runs(l.out / "runs.csv");
  write_runs_csv(runs, report);
  std::ofstream agg(l.out / "aggregate.csv");
  write_aggregate_csv(agg, report);
  if (!report.test.ci95) std::cerr << "NOTE: single seed, ci95 left empty\n";

  if (!f.zero_shot_dir.empty()) {
    if (f.task != Task::kIr) throw ConfigError("zero-shot evaluation applies to IR only");
    const auto target = load_splits(f.zero_shot_dir, Task::kIr);
    const auto model = finetune(base, f.task, splits, report.selected_lr, f.grid.seeds.front(), f.options);
    const auto zs = zero_shot_eval(model, target.test);
    std::ofstream zcsv(l.out / "zero_shot.csv");
    zcsv << "task,dataset,lr,seed,split,metric,value,skipped\n"
         << "ir," << f.zero_shot_dir.filename().string() << "," << report.selected_lr << "," << f.grid.seeds.front()
         << ",test," << zs.metric << "," << zs.value << "," << zs.skipped << "\n";
  }
  write_config_tree(l.out / "config.ini", l.tree);
  std::cerr << to_string(report.task) << " " << report.metric << ": selected lr " << report.selected_lr
            << ", test mean " << report.test.mean << "\n";
  return 0;
}

int cmd_data(Task task, std::size_t size, std::uint64_t seed, const std::string& out) {
  write_splits(out, gen_task_data(task, size, seed));
  return 0;
}

// Collects aggregate.csv and the final metrics row of each run directory.
int cmd_report(const std::vector<std::string>& dirs, const std::string& out) {
  std::ofstream os(out);
  os << "run,source,row\n";
  for (const auto& d : dirs) {
    const fs::path dir(d);
    bool found = false;
    for (const char* name : {"aggregate.csv", "metrics.csv", "zero_shot.csv"}) {
      std::ifstream is(dir / name);
      if (!is) continue;
      found = true;
      std::string line, last;
      std::getline(is, line);  // header
      std::vector<std::string> rows;
      while (std::getline(is, line)) {
        if (!line.empty()) rows.push_back(line);
      }
      if (std::string(name) == "metrics.csv" && !rows.empty()) rows = {rows.back()};
      for (const auto& r : rows) os << dir.filename().string() << "," << name << ",\"" << r << "\"\n";
    }
    if (!found) throw std::runtime_error("no report inputs in " + d);
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"bplm: masked/causal pretraining and fine-tuning experiments"};
  app.require_subcommand(1);

  Common common;
  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", common.config, "INI experiment config");
    sub->add_option("--out", common.out, "output directory (default $BPLM_OUT_DIR/<name>)");
    sub->add_option("--seed", common.seed, "override train.seed");
    sub->add_flag("--allow-nonstudy", common.allow_nonstudy, "permit settings outside the study grid");
    sub->add_flag("--timing", common.timing, "record wall-clock milliseconds in metrics.csv");
  };

  auto* pre = app.add_subcommand("pretrain", "PFS or biphasic pretraining");
  add_common(pre);
  std::string resume;
  pre->add_option("--resume", resume, "continue from a cadence checkpoint");

  auto* cpt = app.add_subcommand("cpt", "MLM continued pretraining from a decayed checkpoint");
  add_common(cpt);
  std::string base;
  bool force = false;
  cpt->add_option("--base", base, "base checkpoint")->required();
  cpt->add_flag("--force", force, "accept a base that has not finished its decay");

  auto* ft = app.add_subcommand("finetune", "learning-rate grid search on a task dataset");
  add_common(ft);
  std::string ckpt;
  std::size_t jobs = 1;
  std::optional<std::size_t> seeds;
  ft->add_option("--checkpoint", ckpt, "pretrained checkpoint")->required();
  ft->add_option("--jobs", jobs, "parallel grid cells")->check(CLI::PositiveNumber);
  ft->add_option("--seeds", seeds, "number of fine-tuning seeds")->check(CLI::PositiveNumber);

  auto* data = app.add_subcommand("data", "write a synthetic task dataset as JSONL splits");
  std::string task_name = "sc", data_out;
  std::size_t size = 200;
  std::uint64_t data_seed = 0;
  data->add_option("--task", task_name, "sc, tc, qa or ir");
  data->add_option("--size", size, "examples before splitting");
  data->add_option("--seed", data_seed);
  data->add_option("--out", data_out)->required();

  auto* rep = app.add_subcommand("report", "collect run outputs into one CSV");
  std::vector<std::string> dirs;
  std::string report_out = "report.csv";
  rep->add_option("runs", dirs, "run directories")->required();
  rep->add_option("--out", report_out);

  CLI11_PARSE(app, argc, argv);
  try {
    if (*pre) return cmd_pretrain(common, resume);
    if (*cpt) return cmd_cpt(common, base, force);
    if (*ft) return cmd_finetune(common, ckpt, jobs, seeds);
    if (*data) return cmd_data(parse_task(task_name), size, data_seed, data_out);
    if (*rep) return cmd_report(dirs, report_out);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}
