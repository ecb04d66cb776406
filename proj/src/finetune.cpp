// SPDX-License-Identifier: Apache-2.0

#include "bplm/finetune.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <exception>
#include <map>
#include <mutex>
#include <numeric>
#include <ostream>
#include <set>
#include <stdexcept>
#include <thread>

#include "bplm/rng.hpp"

namespace bplm {

namespace {

constexpr std::uint64_t kHeadStream = 7;
constexpr std::uint64_t kOrderStream = 11;

void require_task(const FinetunedModel& model, const TaskExample& ex) {
  if (ex.task != model.head.task) {
    throw std::invalid_argument(std::string("task mismatch: model is ") + to_string(model.head.task) +
                                ", example is " + to_string(ex.task));
  }
}

std::size_t argmax(std::span<const double> v) {
  return static_cast<std::size_t>(std::max_element(v.begin(), v.end()) - v.begin());
}

Tensor head_logits(Tape& tape, const FinetunedModel& m, const Tensor& hidden) {
  return matmul(tape, hidden, m.params.at(kTaskHeadName));
}

// Scores [T×2] split into start and end rows [1×T].
std::pair<Tensor, Tensor> qa_scores(Tape& tape, const FinetunedModel& m, const TaskExample& ex) {
  const auto h = encode(tape, m.params, m.cfg, ex.tokens).hidden;
  const auto s = head_logits(tape, m, h);
  const std::size_t T = ex.tokens.size();
  return {reshape(tape, slice_cols(tape, s, 0, 1), {1, T}), reshape(tape, slice_cols(tape, s, 1, 1), {1, T})};
}

std::vector<const std::vector<TokenId>*> ir_candidates(const TaskExample& ex) {
  std::vector<const std::vector<TokenId>*> docs{&ex.positive};
  for (const auto& n : ex.negatives) docs.push_back(&n);
  return docs;
}

std::string fmt(const char* spec, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, spec, v);
  return buf;
}

}  // namespace

ForwardResult encode(Tape& tape, const Parameters& params, const ModelConfig& cfg,
                     std::span<const TokenId> tokens) {
  return forward(tape, params, cfg, tokens, AttentionMode::kBidirectional, {}, false);
}

Tensor embed_sequence(Tape& tape, const Parameters& params, const ModelConfig& cfg,
                      std::span<const TokenId> tokens) {
  const auto h = encode(tape, params, cfg, tokens).hidden;
  return mean_pool(tape, h, Mask(tokens.size(), 1));
}

HeadShape infer_head(Task task, const TaskSplits& splits) {
  HeadShape head{task, 0};
  auto each = [&](auto&& fn) {
    for (const auto* part : {&splits.train, &splits.validation, &splits.test}) {
      for (const auto& ex : *part) fn(ex);
    }
  };
  switch (task) {
    case Task::kSc: {
      int hi = 1;
      each([&](const TaskExample& ex) { hi = std::max(hi, ex.label); });
      head.outputs = static_cast<std::size_t>(hi) + 1;
      break;
    }
    case Task::kTc: {
      int hi = 0;
      each([&](const TaskExample& ex) {
        for (int t : ex.tags) hi = std::max(hi, t);
      });
      // O plus a B/I pair per entity type.
      const int types = std::max(1, (hi + 1) / 2);
      head.outputs = static_cast<std::size_t>(1 + 2 * types);
      break;
    }
    case Task::kQa:
      head.outputs = 2;
      break;
    case Task::kIr:
      head.outputs = 0;
      break;
  }
  return head;
}

FinetunedModel make_finetune_model(const Checkpoint& base, const HeadShape& head, std::uint64_t seed,
                                   const FinetuneOptions& opts) {
  check_parameters(base.params, base.model);
  FinetunedModel m;
  m.cfg = base.model;
  m.head = head;
  for (const auto& [name, t] : base.params) {
    if (name == "head.weight") continue;
    Tensor copy = t.clone();
    copy.set_requires_grad(true);
    m.params.insert(name, copy);
  }
  if (head.outputs > 0) {
    const std::size_t d = m.cfg.embed_dim;
    std::vector<double> w(d * head.outputs);
    Rng rng(derive_seed(seed, kHeadStream));
    for (auto& x : w) x = opts.head_init_std * rng.normal();
    m.params.insert(kTaskHeadName, Tensor::from({d, head.outputs}, std::move(w), true));
  }
  return m;
}

Tensor info_nce(Tape& tape, const Tensor& queries, const Tensor& docs, std::span<const std::int64_t> targets,
                double temperature) {
  if (!(temperature > 0)) throw std::invalid_argument("info_nce: temperature must be positive");
  if (queries.rank() != 2 || docs.rank() != 2 || queries.dim(1) != docs.dim(1)) {
    throw ShapeError("info_nce: expected [B×d] queries and [N×d] documents");
  }
  if (targets.size() != queries.dim(0)) throw ShapeError("info_nce: one target per query required");
  for (auto t : targets) {
    if (t < 0 || static_cast<std::size_t>(t) >= docs.dim(0)) throw std::out_of_range("info_nce: target out of range");
  }
  const auto qn = l2_normalize_rows(tape, queries);
  const auto dn = l2_normalize_rows(tape, docs);
  const auto sim = scale(tape, matmul(tape, qn, transpose(tape, dn)), 1.0 / temperature);
  return cross_entropy_from_logits(tape, sim, targets);
}

Tensor task_loss(Tape& tape, const FinetunedModel& m, std::span<const TaskExample> batch,
                 const FinetuneOptions& opts) {
  if (batch.empty()) throw std::invalid_argument("task_loss: empty batch");
  for (const auto& ex : batch) require_task(m, ex);
  switch (m.head.task) {
    case Task::kSc: {
      std::vector<Tensor> pooled;
      std::vector<std::int64_t> labels;
      for (const auto& ex : batch) {
        pooled.push_back(embed_sequence(tape, m.params, m.cfg, ex.tokens));
        labels.push_back(ex.label);
      }
      return cross_entropy_from_logits(tape, head_logits(tape, m, stack_rows(tape, pooled)), labels);
    }
    case Task::kTc: {
      std::vector<Tensor> losses;
      for (const auto& ex : batch) {
        const auto h = encode(tape, m.params, m.cfg, ex.tokens).hidden;
        std::vector<std::int64_t> tags(ex.tags.begin(), ex.tags.end());
        losses.push_back(cross_entropy_from_logits(tape, head_logits(tape, m, h), tags));
      }
      return mean_of(tape, losses);
    }
    case Task::kQa: {
      std::vector<Tensor> losses;
      for (const auto& ex : batch) {
        const auto [start, end] = qa_scores(tape, m, ex);
        const std::int64_t s = ex.answer ? static_cast<std::int64_t>(ex.answer->start) : 0;
        const std::int64_t e = ex.answer ? static_cast<std::int64_t>(ex.answer->end) : 0;
        const std::int64_t ts[] = {s};
        const std::int64_t te[] = {e};
        losses.push_back(cross_entropy_from_logits(tape, start, ts));
        losses.push_back(cross_entropy_from_logits(tape, end, te));
      }
      return mean_of(tape, losses);
    }
    case Task::kIr: {
      std::vector<Tensor> queries, docs;
      std::vector<std::int64_t> targets;
      for (const auto& ex : batch) {
        queries.push_back(embed_sequence(tape, m.params, m.cfg, ex.tokens));
        targets.push_back(static_cast<std::int64_t>(docs.size()));
        docs.push_back(embed_sequence(tape, m.params, m.cfg, ex.positive));
        if (opts.ir_hard_negatives) {
          for (const auto& n : ex.negatives) docs.push_back(embed_sequence(tape, m.params, m.cfg, n));
        }
      }
      return info_nce(tape, stack_rows(tape, queries), stack_rows(tape, docs), targets, opts.temperature);
    }
  }
  throw std::logic_error("task_loss: unknown task");
}

std::optional<TokenSpan> decode_qa(std::span<const double> start_scores, std::span<const double> end_scores) {
  if (start_scores.empty() || start_scores.size() != end_scores.size()) {
    throw std::invalid_argument("decode_qa: score vectors must be non-empty and equal length");
  }
  const std::size_t s = argmax(start_scores);
  if (s == 0) return std::nullopt;
  std::size_t e = argmax(end_scores);
  if (e < s) e = s;
  return TokenSpan{s, e};
}

Prediction predict(const FinetunedModel& m, const TaskExample& ex) {
  require_task(m, ex);
  Tape tape = Tape::inference();
  Prediction p;
  switch (m.head.task) {
    case Task::kSc: {
      const auto pooled = embed_sequence(tape, m.params, m.cfg, ex.tokens);
      const auto logits = head_logits(tape, m, reshape(tape, pooled, {1, m.cfg.embed_dim}));
      p.label = static_cast<int>(argmax(logits.data()));
      break;
    }
    case Task::kTc: {
      const auto logits = head_logits(tape, m, encode(tape, m.params, m.cfg, ex.tokens).hidden);
      const std::size_t K = m.head.outputs;
      const auto v = logits.data();
      for (std::size_t t = 0; t < ex.tokens.size(); ++t) {
        p.tags.push_back(static_cast<int>(argmax(v.subspan(t * K, K))));
      }
      break;
    }
    case Task::kQa: {
      const auto [start, end] = qa_scores(tape, m, ex);
      p.answer = decode_qa(start.data(), end.data());
      break;
    }
    case Task::kIr: {
      const auto q = embed_sequence(tape, m.params, m.cfg, ex.tokens);
      const auto cands = ir_candidates(ex);
      std::vector<double> scores;
      auto unit = [](std::span<const double> v) {
        double n = 0.0;
        for (double x : v) n += x * x;
        return std::max(std::sqrt(n), 1e-12);
      };
      const auto qv = q.data();
      const double qn = unit(qv);
      for (const auto* doc : cands) {
        const auto d = embed_sequence(tape, m.params, m.cfg, *doc);
        const auto dv = d.data();
        double dot = 0.0;
        for (std::size_t i = 0; i < dv.size(); ++i) dot += qv[i] * dv[i];
        scores.push_back(dot / (qn * unit(dv)));
      }
      p.ranking.resize(cands.size());
      std::iota(p.ranking.begin(), p.ranking.end(), 0);
      std::stable_sort(p.ranking.begin(), p.ranking.end(),
                       [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
      break;
    }
  }
  return p;
}

const char* metric_name(Task task) {
  switch (task) {
    case Task::kSc: return "accuracy";
    case Task::kTc: return "entity_f1";
    case Task::kQa: return "qa_f1";
    case Task::kIr: return "ndcg@10";
  }
  return "?";
}

EvalResult evaluate(const FinetunedModel& m, std::span<const TaskExample> examples) {
  if (examples.empty()) throw std::invalid_argument("evaluate: empty split");
  EvalResult r;
  r.metric = metric_name(m.head.task);
  switch (m.head.task) {
    case Task::kSc: {
      std::vector<int> preds, golds;
      for (const auto& ex : examples) {
        preds.push_back(predict(m, ex).label);
        golds.push_back(ex.label);
      }
      r.value = accuracy(preds, golds);
      break;
    }
    case Task::kTc: {
      std::vector<std::vector<int>> preds, golds;
      for (const auto& ex : examples) {
        preds.push_back(predict(m, ex).tags);
        golds.push_back(ex.tags);
      }
      r.value = entity_f1(preds, golds);
      r.token_f1 = token_tag_f1(preds, golds);
      break;
    }
    case Task::kQa: {
      auto span_tokens = [](const TaskExample& ex, const std::optional<TokenSpan>& s) {
        if (!s) return std::vector<TokenId>{};
        return std::vector<TokenId>(ex.tokens.begin() + static_cast<std::ptrdiff_t>(s->start),
                                    ex.tokens.begin() + static_cast<std::ptrdiff_t>(s->end) + 1);
      };
      double sum = 0.0;
      for (const auto& ex : examples) {
        sum += qa_f1(span_tokens(ex, predict(m, ex).answer), span_tokens(ex, ex.answer));
      }
      r.value = sum / static_cast<double>(examples.size());
      break;
    }
    case Task::kIr: {
      double sum = 0.0;
      std::size_t n = 0;
      for (const auto& ex : examples) {
        std::vector<double> relevance(1 + ex.negatives.size(), 0.0);
        relevance[0] = 1.0;
        const auto score = ndcg_at_10(predict(m, ex).ranking, relevance);
        if (!score) {
          ++r.skipped;
          continue;
        }
        sum += *score;
        ++n;
      }
      r.value = n == 0 ? 0.0 : sum / static_cast<double>(n);
      break;
    }
  }
  return r;
}

std::int64_t finetune_steps(std::size_t train_size, const FinetuneOptions& opts) {
  if (opts.batch_size == 0) throw std::invalid_argument("finetune_steps: batch_size must be positive");
  const auto epoch = static_cast<std::int64_t>((train_size + opts.batch_size - 1) / opts.batch_size);
  return std::min(opts.max_steps, epoch);
}

FinetunedModel finetune(const Checkpoint& base, Task task, const TaskSplits& splits, double lr,
                        std::uint64_t seed, const FinetuneOptions& opts, std::optional<double> fixed_lr) {
  if (splits.train.empty()) throw std::invalid_argument("finetune: empty train split");
  FinetunedModel m = make_finetune_model(base, infer_head(task, splits), seed, opts);
  const std::int64_t steps = finetune_steps(splits.train.size(), opts);
  std::vector<std::size_t> order(splits.train.size());
  std::iota(order.begin(), order.end(), 0);
  Rng(derive_seed(seed, kOrderStream)).shuffle(order);

  AdamWState state = AdamWState::fresh(m.params, opts.adam);
  for (std::int64_t s = 0; s < steps; ++s) {
    const std::size_t lo = static_cast<std::size_t>(s) * opts.batch_size;
    const std::size_t hi = std::min(order.size(), lo + opts.batch_size);
    std::vector<TaskExample> batch;
    for (std::size_t i = lo; i < hi; ++i) batch.push_back(splits.train[order[i]]);
    Tape tape;
    const auto loss = task_loss(tape, m, batch, opts);
    tape.backward(loss);
    clip_global_norm(m.params, opts.clip_norm);
    adamw_step(m.params, state, fixed_lr ? *fixed_lr : finetune_lr(lr, steps, s));
    m.params.zero_grad();
  }
  return m;
}

void GridSearchSpec::validate(bool allow_nonstudy) const {
  if (learning_rates.empty() || seeds.empty()) throw std::invalid_argument("grid: empty learning-rate or seed list");
  if (max_steps <= 0 || batch_size == 0) throw std::invalid_argument("grid: steps and batch size must be positive");
  for (double lr : learning_rates) {
    if (!(lr > 0)) throw std::invalid_argument("grid: learning rates must be positive");
  }
  if (std::set<std::uint64_t>(seeds.begin(), seeds.end()).size() != seeds.size()) {
    throw std::invalid_argument("grid: duplicate seeds");
  }
  if (allow_nonstudy) return;
  std::vector<double> lrs = learning_rates;
  std::sort(lrs.begin(), lrs.end());
  if (!std::equal(lrs.begin(), lrs.end(), kStudyLearningRates.begin(), kStudyLearningRates.end())) {
    throw std::invalid_argument("grid: learning rates differ from the study grid (use --allow-nonstudy)");
  }
  if (seeds.size() != kStudySeedCount) {
    throw std::invalid_argument("grid: study grid uses 5 seeds (use --allow-nonstudy)");
  }
  if (max_steps != 1000 || batch_size != 32) {
    throw std::invalid_argument("grid: study grid uses 1000 max steps and batch 32 (use --allow-nonstudy)");
  }
}

double select_learning_rate(std::span<const RunCell> runs) {
  if (runs.empty()) throw std::invalid_argument("select_learning_rate: no runs");
  std::map<double, std::pair<double, std::size_t>> by_lr;
  for (const auto& c : runs) {
    auto& [sum, n] = by_lr[c.lr];
    sum += c.validation;
    ++n;
  }
  // Ascending lr order, so a strict comparison keeps the smaller rate on ties.
  double best_lr = 0.0, best = 0.0;
  bool first = true;
  for (const auto& [lr, acc] : by_lr) {
    const double mean = acc.first / static_cast<double>(acc.second);
    if (first || mean > best) {
      best = mean;
      best_lr = lr;
      first = false;
    }
  }
  return best_lr;
}

RunReport aggregate_runs(Task task, const std::string& dataset, const std::string& metric,
                         std::vector<RunCell> runs) {
  RunReport r;
  r.task = task;
  r.dataset = dataset;
  r.metric = metric;
  r.runs = std::move(runs);
  r.selected_lr = select_learning_rate(r.runs);
  std::vector<double> val, test;
  for (const auto& c : r.runs) {
    if (c.lr != r.selected_lr) continue;
    val.push_back(c.validation);
    test.push_back(c.test);
  }
  r.validation = mean_ci95(val);
  r.test = mean_ci95(test);
  return r;
}

RunReport run_grid(Task task, const std::string& dataset, const GridSearchSpec& spec, const CellRunner& runner,
                   std::size_t jobs) {
  std::vector<std::pair<double, std::uint64_t>> cells;
  for (double lr : spec.learning_rates) {
    for (auto seed : spec.seeds) cells.emplace_back(lr, seed);
  }
  std::vector<RunCell> results(cells.size());
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mu;
  auto worker = [&] {
    for (std::size_t i = next++; i < cells.size(); i = next++) {
      try {
        results[i] = runner(cells[i].first, cells[i].second);
      } catch (...) {
        std::lock_guard lock(failure_mu);
        if (!failure) failure = std::current_exception();
      }
    }
  };
  jobs = std::clamp<std::size_t>(jobs, 1, cells.size());
  if (jobs == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t j = 0; j < jobs; ++j) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  if (failure) std::rethrow_exception(failure);
  return aggregate_runs(task, dataset, metric_name(task), std::move(results));
}

RunReport run_grid_search(const Checkpoint& base, Task task, const std::string& dataset,
                          const TaskSplits& splits, const GridSearchSpec& spec, const FinetuneOptions& opts,
                          std::size_t jobs) {
  if (splits.train.empty() || splits.validation.empty() || splits.test.empty()) {
    throw std::invalid_argument("grid search: train, validation and test splits must be non-empty");
  }
  FinetuneOptions o = opts;
  o.batch_size = spec.batch_size;
  o.max_steps = spec.max_steps;
  auto runner = [&](double lr, std::uint64_t seed) {
    const auto model = finetune(base, task, splits, lr, seed, o);
    return RunCell{lr, seed, evaluate(model, splits.validation).value, evaluate(model, splits.test).value};
  };
  return run_grid(task, dataset, spec, runner, jobs);
}

EvalResult zero_shot_eval(const FinetunedModel& model, std::span<const TaskExample> examples) {
  if (model.head.task != Task::kIr) throw std::invalid_argument("zero_shot_eval: model is not an IR model");
  for (const auto& ex : examples) require_task(model, ex);
  return evaluate(model, examples);
}

void write_runs_csv(std::ostream& os, const RunReport& r, bool header) {
  if (header) os << "task,dataset,lr,seed,split,metric,value\n";
  for (const auto& c : r.runs) {
    const std::string prefix = std::string(to_string(r.task)) + "," + r.dataset + "," + fmt("%g", c.lr) + "," +
                               std::to_string(c.seed) + ",";
    os << prefix << "validation," << r.metric << "," << fmt("%.10g", c.validation) << "\n";
    os << prefix << "test," << r.metric << "," << fmt("%.10g", c.test) << "\n";
  }
}

void write_aggregate_csv(std::ostream& os, const RunReport& r, bool header) {
  if (header) os << "task,dataset,metric,selected_lr,split,mean,ci95,n,note\n";
  auto row = [&](const char* split, const SeedStats& s) {
    os << to_string(r.task) << "," << r.dataset << "," << r.metric << "," << fmt("%g", r.selected_lr) << ","
       << split << "," << fmt("%.10g", s.mean) << "," << (s.ci95 ? fmt("%.10g", *s.ci95) : "") << "," << s.n
       << "," << (s.ci95 ? "" : "single_seed") << "\n";
  };
  row("validation", r.validation);
  row("test", r.test);
}

}  // namespace bplm
