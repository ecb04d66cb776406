// SPDX-License-Identifier: Apache-2.0

#include "bplm/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include "bplm/rng.hpp"
#include "json.hpp"

namespace bplm {

using nlohmann::json;

// ---- Vocab -----------------------------------------------------------------

Vocab Vocab::bytes(std::size_t size) {
  if (size <= static_cast<std::size_t>(kFirstSymbol)) {
    throw std::invalid_argument("Vocab::bytes: size must exceed the reserved ids");
  }
  const std::size_t count = std::min<std::size_t>(size - kFirstSymbol, 256);
  std::vector<std::string> symbols;
  symbols.reserve(count);
  for (std::size_t b = 0; b < count; ++b) symbols.emplace_back(1, static_cast<char>(b));
  return Vocab(size, std::move(symbols));
}

Vocab::Vocab(std::size_t size, std::vector<std::string> symbols)
    : size_(size), symbols_(std::move(symbols)) {
  if (kFirstSymbol + symbols_.size() > size_) {
    throw std::invalid_argument("Vocab: symbol table does not fit in vocabulary size");
  }
  for (std::size_t i = 0; i < symbols_.size(); ++i) {
    if (symbols_[i].empty()) throw std::invalid_argument("Vocab: empty symbol");
    if (!index_.emplace(symbols_[i], kFirstSymbol + static_cast<TokenId>(i)).second) {
      throw std::invalid_argument("Vocab: duplicate symbol");
    }
    longest_ = std::max(longest_, symbols_[i].size());
  }
}

std::vector<TokenId> Vocab::encode(std::string_view text) const {
  std::vector<TokenId> out;
  std::size_t pos = 0;
  while (pos < text.size()) {
    TokenId id = kUnk;
    std::size_t used = 1;
    for (std::size_t len = std::min(longest_, text.size() - pos); len > 0; --len) {
      auto it = index_.find(std::string(text.substr(pos, len)));
      if (it != index_.end()) {
        id = it->second;
        used = len;
        break;
      }
    }
    out.push_back(id);
    pos += used;
  }
  return out;
}

std::string Vocab::decode(std::span<const TokenId> ids) const {
  std::string out;
  for (TokenId id : ids) {
    if (id < kFirstSymbol) continue;
    const auto idx = static_cast<std::size_t>(id - kFirstSymbol);
    if (idx >= symbols_.size()) {
      throw std::out_of_range("Vocab::decode: id " + std::to_string(id) + " has no symbol");
    }
    out += symbols_[idx];
  }
  return out;
}

// ---- corpora ---------------------------------------------------------------

void CorpusSpec::validate(std::size_t max_seq_len) const {
  auto fail = [](const std::string& m) { throw std::invalid_argument("CorpusSpec: " + m); };
  if (min_len < 2) fail("min_len must be at least 2");
  if (max_len < min_len) fail("max_len must be >= min_len");
  if (max_len > max_seq_len) fail("max_len exceeds the model's max_seq_len");
  if (target_tokens == 0) fail("target_tokens must be positive");
  if (generator == CorpusGenerator::kMarkov) {
    if (order == 0) fail("order must be positive");
    if (alphabet < 2) fail("alphabet must have at least 2 symbols");
    if (std::pow(static_cast<double>(alphabet), static_cast<double>(order)) > 1e6) {
      fail("state space too large");
    }
  } else if (pattern.empty()) {
    fail("repeated-pattern generator needs a non-empty pattern");
  }
}

MarkovSource::MarkovSource(std::size_t order, std::size_t alphabet, TokenId first_token,
                           std::vector<std::vector<double>> rows)
    : order_(order), alphabet_(alphabet), first_(first_token), rows_(std::move(rows)) {
  std::size_t states = 1;
  for (std::size_t i = 0; i < order_; ++i) states *= alphabet_;
  if (rows_.size() != states) throw std::invalid_argument("MarkovSource: wrong number of rows");
  for (auto& row : rows_) {
    if (row.size() != alphabet_) throw std::invalid_argument("MarkovSource: wrong row width");
    double total = 0.0;
    for (double p : row) {
      if (!(p >= 0)) throw std::invalid_argument("MarkovSource: negative transition weight");
      total += p;
    }
    if (!(total > 0)) throw std::invalid_argument("MarkovSource: empty transition row");
    for (double& p : row) p /= total;
  }

  // Lazy power iteration (π ← ½π + ½πP) converges for any irreducible chain,
  // periodic ones included.
  stationary_.assign(states, 1.0 / static_cast<double>(states));
  std::vector<double> next(states);
  for (int iter = 0; iter < 200000; ++iter) {
    std::fill(next.begin(), next.end(), 0.0);
    for (std::size_t s = 0; s < states; ++s) {
      const std::size_t shifted = (s * alphabet_) % states;
      for (std::size_t j = 0; j < alphabet_; ++j) next[shifted + j] += stationary_[s] * rows_[s][j];
    }
    double diff = 0.0;
    for (std::size_t s = 0; s < states; ++s) {
      next[s] = 0.5 * stationary_[s] + 0.5 * next[s];
      diff += std::abs(next[s] - stationary_[s]);
    }
    stationary_.swap(next);
    if (diff < 1e-16) break;
  }
}

MarkovSource MarkovSource::random(const CorpusSpec& spec) {
  std::size_t states = 1;
  for (std::size_t i = 0; i < spec.order; ++i) states *= spec.alphabet;
  Rng rng(derive_seed(spec.seed, 1));
  auto draw_row = [&] {
    std::vector<double> row(spec.alphabet);
    for (double& w : row) w = std::exp(spec.sharpness * rng.normal());
    return row;
  };
  std::vector<std::vector<double>> rows;
  rows.reserve(states);
  if (spec.rows == RowMode::kPermutedShared) {
    const auto base = draw_row();
    for (std::size_t s = 0; s < states; ++s) {
      auto row = base;
      rng.shuffle(row);
      rows.push_back(std::move(row));
    }
  } else {
    for (std::size_t s = 0; s < states; ++s) rows.push_back(draw_row());
  }
  return MarkovSource(spec.order, spec.alphabet, spec.first_token, std::move(rows));
}

std::size_t MarkovSource::state_of(std::span<const TokenId> last) const {
  std::size_t s = 0;
  for (TokenId t : last) {
    const auto sym = static_cast<std::int64_t>(t) - first_;
    if (sym < 0 || static_cast<std::size_t>(sym) >= alphabet_) {
      throw std::out_of_range("MarkovSource: token outside the chain alphabet");
    }
    s = s * alphabet_ + static_cast<std::size_t>(sym);
  }
  return s;
}

const std::vector<double>& MarkovSource::next_distribution(std::span<const TokenId> context) const {
  if (context.size() < order_) throw std::invalid_argument("MarkovSource: context shorter than order");
  return rows_[state_of(context.subspan(context.size() - order_))];
}

double MarkovSource::entropy_rate() const {
  double h = 0.0;
  for (std::size_t s = 0; s < rows_.size(); ++s) {
    double hs = 0.0;
    for (double p : rows_[s])
      if (p > 0) hs -= p * std::log(p);
    h += stationary_[s] * hs;
  }
  return h;
}

std::vector<TokenId> MarkovSource::sample(std::size_t length, std::uint64_t seed) const {
  Rng rng(seed);
  std::vector<TokenId> out;
  out.reserve(length);
  std::size_t state = rng.categorical(stationary_);
  // Unpack the initial state into its `order` tokens.
  std::vector<TokenId> first(order_);
  std::size_t s = state;
  for (std::size_t i = order_; i > 0; --i) {
    first[i - 1] = first_ + static_cast<TokenId>(s % alphabet_);
    s /= alphabet_;
  }
  for (std::size_t i = 0; i < std::min(length, order_); ++i) out.push_back(first[i]);
  const std::size_t states = rows_.size();
  while (out.size() < length) {
    const std::size_t j = rng.categorical(rows_[state]);
    out.push_back(first_ + static_cast<TokenId>(j));
    state = (state * alphabet_) % states + j;
  }
  return out;
}

std::size_t Corpus::total_tokens() const {
  std::size_t n = 0;
  for (const auto& s : sequences) n += s.size();
  return n;
}

Corpus gen_corpus(const CorpusSpec& spec) {
  spec.validate();
  Corpus corpus;
  Rng lengths(derive_seed(spec.seed, 2));
  if (spec.generator == CorpusGenerator::kMarkov) {
    corpus.source = MarkovSource::random(spec);
    corpus.entropy_rate = corpus.source->entropy_rate();
  } else {
    corpus.entropy_rate = 0.0;
  }
  std::size_t total = 0;
  for (std::uint64_t i = 0; total < spec.target_tokens; ++i) {
    const auto len = static_cast<std::size_t>(lengths.range(
        static_cast<std::int64_t>(spec.min_len), static_cast<std::int64_t>(spec.max_len)));
    std::vector<TokenId> seq;
    if (corpus.source) {
      seq = corpus.source->sample(len, derive_seed(spec.seed, 3, i));
    } else {
      const std::size_t phase = lengths.below(spec.pattern.size());
      for (std::size_t t = 0; t < len; ++t) seq.push_back(spec.pattern[(phase + t) % spec.pattern.size()]);
    }
    total += seq.size();
    corpus.sequences.push_back(std::move(seq));
  }
  return corpus;
}

namespace {

void put_u32(std::ostream& os, std::uint32_t v) {
  unsigned char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  os.write(reinterpret_cast<const char*>(b), 4);
}

void put_u64(std::ostream& os, std::uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  os.write(reinterpret_cast<const char*>(b), 8);
}

std::uint64_t get_le(std::istream& is, int bytes) {
  unsigned char b[8] = {};
  if (!is.read(reinterpret_cast<char*>(b), bytes)) throw std::runtime_error("corpus cache: truncated file");
  std::uint64_t v = 0;
  for (int i = 0; i < bytes; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return v;
}

}  // namespace

void save_corpus(const std::filesystem::path& path, const Corpus& corpus) {
  json header = {{"format", "bplm-corpus"},
                 {"version", 1},
                 {"entropy_rate", corpus.entropy_rate},
                 {"sequences", corpus.sequences.size()},
                 {"tokens", corpus.total_tokens()}};
  const std::string text = header.dump();
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write corpus cache " + path.string());
  put_u32(os, static_cast<std::uint32_t>(text.size()));
  os.write(text.data(), static_cast<std::streamsize>(text.size()));
  put_u64(os, corpus.sequences.size());
  for (const auto& seq : corpus.sequences) {
    put_u32(os, static_cast<std::uint32_t>(seq.size()));
    for (TokenId t : seq) put_u32(os, static_cast<std::uint32_t>(t));
  }
  if (!os) throw std::runtime_error("failed writing corpus cache " + path.string());
}

Corpus load_corpus(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot read corpus cache " + path.string());
  const auto header_len = get_le(is, 4);
  std::string text(header_len, '\0');
  if (!is.read(text.data(), static_cast<std::streamsize>(header_len))) {
    throw std::runtime_error("corpus cache: truncated header");
  }
  const json header = json::parse(text);
  Corpus corpus;
  corpus.entropy_rate = header.at("entropy_rate").get<double>();
  const auto count = get_le(is, 8);
  corpus.sequences.resize(count);
  for (auto& seq : corpus.sequences) {
    const auto len = get_le(is, 4);
    seq.resize(len);
    for (auto& t : seq) t = static_cast<TokenId>(get_le(is, 4));
  }
  return corpus;
}

// ---- packing ---------------------------------------------------------------

BatchStream::BatchStream(std::vector<std::vector<TokenId>> sequences, PackingSpec spec)
    : spec_(spec) {
  if (spec_.batch_rows == 0) throw std::invalid_argument("pack_batches: batch_rows must be positive");
  if (spec_.min_len < 1 || spec_.max_len < spec_.min_len) {
    throw std::invalid_argument("pack_batches: invalid length bounds");
  }
  for (auto& seq : sequences) {
    if (seq.size() < spec_.min_len) {
      ++discarded_;
      continue;
    }
    if (seq.size() > spec_.max_len) seq.resize(spec_.max_len);
    sequences_.push_back(std::move(seq));
  }
  per_epoch_ = sequences_.size() / spec_.batch_rows;
  if (per_epoch_ == 0) throw DataExhausted("pack_batches: fewer usable sequences than batch_rows");
}

std::size_t BatchStream::capacity() const {
  return spec_.max_epochs == 0 ? SIZE_MAX : per_epoch_ * spec_.max_epochs;
}

LmBatch BatchStream::batch(std::size_t index) const {
  if (index >= capacity()) {
    throw DataExhausted("data stream exhausted at batch " + std::to_string(index));
  }
  const std::size_t epoch = index / per_epoch_;
  const std::size_t slot = index % per_epoch_;
  std::vector<std::size_t> order(sequences_.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng rng(derive_seed(spec_.seed, 4, epoch));
  rng.shuffle(order);

  LmBatch b;
  b.rows = spec_.batch_rows;
  for (std::size_t r = 0; r < b.rows; ++r) {
    b.width = std::max(b.width, sequences_[order[slot * b.rows + r]].size());
  }
  b.tokens.assign(b.rows * b.width, spec_.pad_id);
  b.is_pad.assign(b.rows * b.width, 1);
  for (std::size_t r = 0; r < b.rows; ++r) {
    const auto& seq = sequences_[order[slot * b.rows + r]];
    for (std::size_t t = 0; t < seq.size(); ++t) {
      b.tokens[r * b.width + t] = seq[t];
      b.is_pad[r * b.width + t] = 0;
    }
  }
  return b;
}

BatchStream pack_batches(std::vector<std::vector<TokenId>> sequences, std::size_t batch_rows,
                         std::size_t min_len, std::size_t max_len, TokenId pad_id,
                         std::uint64_t seed) {
  PackingSpec spec;
  spec.batch_rows = batch_rows;
  spec.min_len = min_len;
  spec.max_len = max_len;
  spec.pad_id = pad_id;
  spec.seed = seed;
  return BatchStream(std::move(sequences), spec);
}

// ---- tasks -----------------------------------------------------------------

const char* to_string(Task task) {
  switch (task) {
    case Task::kSc: return "sc";
    case Task::kTc: return "tc";
    case Task::kQa: return "qa";
    case Task::kIr: return "ir";
  }
  return "?";
}

Task parse_task(std::string_view name) {
  if (name == "sc") return Task::kSc;
  if (name == "tc") return Task::kTc;
  if (name == "qa") return Task::kQa;
  if (name == "ir") return Task::kIr;
  throw std::invalid_argument("unknown task '" + std::string(name) + "'");
}

void validate_example(const TaskExample& ex) {
  auto fail = [&](const std::string& m) {
    throw std::invalid_argument(std::string(to_string(ex.task)) + " example: " + m);
  };
  if (ex.tokens.empty()) fail("empty token sequence");
  switch (ex.task) {
    case Task::kSc:
      if (ex.label < 0) fail("negative class label");
      break;
    case Task::kTc:
      if (ex.tags.size() != ex.tokens.size()) fail("tag count differs from token count");
      for (int t : ex.tags)
        if (t < 0) fail("negative tag id");
      break;
    case Task::kQa:
      if (ex.answer) {
        if (ex.answer->start > ex.answer->end) fail("answer start after end");
        if (ex.answer->end >= ex.tokens.size()) fail("answer span outside the sequence");
        if (ex.answer->start == 0) fail("answer may not start at the no-answer position 0");
      }
      break;
    case Task::kIr:
      if (ex.positive.empty()) fail("IR example needs a positive document");
      for (const auto& n : ex.negatives)
        if (n.empty()) fail("empty negative document");
      break;
  }
}

TokenId TaskDataOptions::keyword(std::size_t cls, std::size_t k) const {
  return filler_begin() + static_cast<TokenId>(filler + cls * keywords_per_class + k);
}

TokenId TaskDataOptions::entity_token(std::size_t type, std::size_t k) const {
  return keyword(num_classes, 0) + static_cast<TokenId>(type * entity_alphabet + k);
}

TokenId TaskDataOptions::qa_marker() const { return entity_token(entity_types, 0); }

TokenId TaskDataOptions::answer_token(std::size_t k) const {
  return qa_marker() + 1 + static_cast<TokenId>(k);
}

TokenId TaskDataOptions::rare_token(std::size_t k) const {
  return answer_token(answer_alphabet) + static_cast<TokenId>(k);
}

TokenId TaskDataOptions::end_id() const { return rare_token(rare_pool); }

TaskDataOptions TaskDataOptions::fitted(std::size_t vocab) {
  TaskDataOptions o;
  o.vocab_size = vocab;
  const std::size_t planted =
      o.num_classes * o.keywords_per_class + o.entity_types * o.entity_alphabet + 1 + o.answer_alphabet;
  const std::size_t reserved = static_cast<std::size_t>(Vocab::kFirstSymbol) + planted;
  const std::size_t min_rare = 2 + o.ir_negatives;
  if (vocab < reserved + min_rare + 4) {
    throw std::invalid_argument("TaskDataOptions: vocabulary of " + std::to_string(vocab) +
                                " is too small for task data");
  }
  const std::size_t room = vocab - reserved;
  o.rare_pool = std::min(o.rare_pool, std::max(min_rare, room / 2));
  o.filler = std::min(o.filler, room - o.rare_pool);
  return o;
}

void TaskDataOptions::validate() const {
  auto fail = [](const std::string& m) { throw std::invalid_argument("TaskDataOptions: " + m); };
  if (filler < 2 || num_classes < 2 || keywords_per_class == 0 || entity_types == 0 ||
      entity_alphabet == 0 || answer_alphabet == 0 || rare_pool < 2 + ir_negatives) {
    fail("token family sizes too small");
  }
  if (static_cast<std::size_t>(end_id()) > vocab_size) fail("token layout exceeds vocab_size");
  if (min_len < 8 || max_len < min_len) fail("length bounds must satisfy 8 <= min_len <= max_len");
  if (!(qa_no_answer_rate >= 0 && qa_no_answer_rate < 1)) fail("qa_no_answer_rate must be in [0,1)");
}

namespace {

std::vector<TokenId> filler_run(Rng& rng, const TaskDataOptions& o, std::size_t n) {
  std::vector<TokenId> out(n);
  for (auto& t : out) t = o.filler_begin() + static_cast<TokenId>(rng.below(o.filler));
  return out;
}

std::size_t draw_len(Rng& rng, std::size_t lo, std::size_t hi) {
  return static_cast<std::size_t>(rng.range(static_cast<std::int64_t>(lo), static_cast<std::int64_t>(hi)));
}

TaskExample make_sc(Rng& rng, const TaskDataOptions& o) {
  TaskExample ex;
  ex.task = Task::kSc;
  ex.label = static_cast<int>(rng.below(o.num_classes));
  ex.tokens = filler_run(rng, o, draw_len(rng, o.min_len, o.max_len));
  const auto kw = o.keyword(static_cast<std::size_t>(ex.label), rng.below(o.keywords_per_class));
  ex.tokens[rng.below(ex.tokens.size())] = kw;
  return ex;
}

TaskExample make_tc(Rng& rng, const TaskDataOptions& o) {
  TaskExample ex;
  ex.task = Task::kTc;
  const std::size_t len = draw_len(rng, o.min_len, o.max_len);
  ex.tokens = filler_run(rng, o, len);
  ex.tags.assign(len, 0);
  // Entity runs of 1-3 tokens, each preceded by at least one filler token.
  std::size_t pos = 1 + rng.below(3);
  const std::size_t wanted = 1 + rng.below(3);
  for (std::size_t e = 0; e < wanted; ++e) {
    const std::size_t run = 1 + rng.below(3);
    if (pos + run > len) break;
    const std::size_t type = rng.below(o.entity_types);
    for (std::size_t i = 0; i < run; ++i) {
      ex.tokens[pos + i] = o.entity_token(type, rng.below(o.entity_alphabet));
      ex.tags[pos + i] = static_cast<int>(i == 0 ? 1 + 2 * type : 2 + 2 * type);
    }
    pos += run + 1 + rng.below(4);
  }
  return ex;
}

TaskExample make_qa(Rng& rng, const TaskDataOptions& o) {
  TaskExample ex;
  ex.task = Task::kQa;
  const std::size_t len = std::max<std::size_t>(draw_len(rng, o.min_len, o.max_len), 8);
  ex.tokens = filler_run(rng, o, len);
  const std::size_t ans_len = 1 + rng.below(3);
  if (rng.uniform() >= o.qa_no_answer_rate) {
    const std::size_t marker = 1 + rng.below(len - ans_len - 1);
    ex.tokens[marker] = o.qa_marker();
    for (std::size_t i = 0; i < ans_len; ++i) {
      ex.tokens[marker + 1 + i] = o.answer_token(rng.below(o.answer_alphabet));
    }
    ex.answer = TokenSpan{marker + 1, marker + ans_len};
  } else {
    // Distractor answer-like run with no marker in front.
    const std::size_t at = 1 + rng.below(len - ans_len);
    for (std::size_t i = 0; i < ans_len; ++i) {
      ex.tokens[at + i] = o.answer_token(rng.below(o.answer_alphabet));
    }
  }
  return ex;
}

TaskExample make_ir(Rng& rng, const TaskDataOptions& o) {
  TaskExample ex;
  ex.task = Task::kIr;
  std::vector<std::size_t> rare(o.rare_pool);
  for (std::size_t i = 0; i < rare.size(); ++i) rare[i] = i;
  rng.shuffle(rare);
  const TokenId planted = o.rare_token(rare[0]);
  const std::size_t qlen = std::max<std::size_t>(o.min_len / 2, 2);
  ex.tokens = filler_run(rng, o, draw_len(rng, qlen, qlen + 4));
  ex.tokens[rng.below(ex.tokens.size())] = planted;
  ex.positive = filler_run(rng, o, draw_len(rng, o.min_len, o.max_len));
  ex.positive[rng.below(ex.positive.size())] = planted;
  for (std::size_t n = 0; n < o.ir_negatives; ++n) {
    auto doc = filler_run(rng, o, draw_len(rng, o.min_len, o.max_len));
    doc[rng.below(doc.size())] = o.rare_token(rare[1 + n]);
    ex.negatives.push_back(std::move(doc));
  }
  return ex;
}

}  // namespace

TaskSplits gen_task_data(Task task, std::size_t size, std::uint64_t seed,
                         const TaskDataOptions& options) {
  options.validate();
  if (size < 30) throw std::invalid_argument("gen_task_data: size must be at least 30 to stratify splits");
  Rng rng(derive_seed(seed, 5, static_cast<std::uint64_t>(task)));
  std::set<std::string> seen;
  std::vector<TaskExample> all;
  std::size_t attempts = 0;
  while (all.size() < size) {
    if (++attempts > size * 100) throw std::runtime_error("gen_task_data: could not draw enough unique examples");
    TaskExample ex;
    switch (task) {
      case Task::kSc: ex = make_sc(rng, options); break;
      case Task::kTc: ex = make_tc(rng, options); break;
      case Task::kQa: ex = make_qa(rng, options); break;
      case Task::kIr: ex = make_ir(rng, options); break;
    }
    validate_example(ex);
    if (seen.insert(to_jsonl_line(ex)).second) all.push_back(std::move(ex));
  }
  const std::size_t n_train = size * 70 / 100;
  const std::size_t n_val = size * 15 / 100;
  TaskSplits splits;
  splits.train.assign(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(n_train));
  splits.validation.assign(all.begin() + static_cast<std::ptrdiff_t>(n_train),
                           all.begin() + static_cast<std::ptrdiff_t>(n_train + n_val));
  splits.test.assign(all.begin() + static_cast<std::ptrdiff_t>(n_train + n_val), all.end());
  return splits;
}

// ---- JSONL -----------------------------------------------------------------

JsonlError::JsonlError(std::size_t line, const std::string& field, const std::string& what)
    : std::runtime_error("line " + std::to_string(line) + ": field '" + field + "': " + what),
      line_(line),
      field_(field) {}

std::string to_jsonl_line(const TaskExample& ex) {
  json j;
  j["task"] = to_string(ex.task);
  switch (ex.task) {
    case Task::kSc:
      j["tokens"] = ex.tokens;
      j["label"] = ex.label;
      break;
    case Task::kTc:
      j["tokens"] = ex.tokens;
      j["tags"] = ex.tags;
      break;
    case Task::kQa:
      j["tokens"] = ex.tokens;
      j["answer"] = ex.answer ? json{{"start", ex.answer->start}, {"end", ex.answer->end}} : json(nullptr);
      break;
    case Task::kIr:
      j["query"] = ex.tokens;
      j["positive"] = ex.positive;
      j["negatives"] = ex.negatives;
      break;
  }
  return j.dump();
}

TaskExample parse_jsonl_line(std::string_view line, Task task, std::size_t line_no) {
  json j;
  try {
    j = json::parse(line);
  } catch (const json::parse_error& e) {
    throw JsonlError(line_no, "<line>", std::string("malformed JSON: ") + e.what());
  }
  if (!j.is_object()) throw JsonlError(line_no, "<line>", "expected a JSON object");

  auto field = [&](const char* name) -> const json& {
    auto it = j.find(name);
    if (it == j.end()) throw JsonlError(line_no, name, "missing");
    return *it;
  };
  auto tokens_of = [&](const json& v, const char* name) {
    try {
      return v.get<std::vector<TokenId>>();
    } catch (const json::exception&) {
      throw JsonlError(line_no, name, "expected an array of token ids");
    }
  };

  TaskExample ex;
  ex.task = task;
  if (auto it = j.find("task"); it != j.end()) {
    if (!it->is_string() || it->get<std::string>() != to_string(task)) {
      throw JsonlError(line_no, "task", std::string("expected \"") + to_string(task) + "\"");
    }
  }
  try {
    switch (task) {
      case Task::kSc: {
        ex.tokens = tokens_of(field("tokens"), "tokens");
        const json& label = field("label");
        if (!label.is_number_integer()) throw JsonlError(line_no, "label", "expected an integer");
        ex.label = label.get<int>();
        break;
      }
      case Task::kTc: {
        ex.tokens = tokens_of(field("tokens"), "tokens");
        const json& tags = field("tags");
        if (!tags.is_array()) throw JsonlError(line_no, "tags", "expected an array");
        ex.tags = tags.get<std::vector<int>>();
        break;
      }
      case Task::kQa: {
        ex.tokens = tokens_of(field("tokens"), "tokens");
        const json& ans = field("answer");
        if (!ans.is_null()) {
          if (!ans.is_object() || !ans.contains("start") || !ans.contains("end")) {
            throw JsonlError(line_no, "answer", "expected {\"start\":s,\"end\":e} or null");
          }
          ex.answer = TokenSpan{ans.at("start").get<std::size_t>(), ans.at("end").get<std::size_t>()};
        }
        break;
      }
      case Task::kIr: {
        ex.tokens = tokens_of(field("query"), "query");
        ex.positive = tokens_of(field("positive"), "positive");
        const json& negs = field("negatives");
        if (!negs.is_array()) throw JsonlError(line_no, "negatives", "expected an array of documents");
        for (const auto& n : negs) ex.negatives.push_back(tokens_of(n, "negatives"));
        break;
      }
    }
  } catch (const json::exception& e) {
    throw JsonlError(line_no, "<value>", e.what());
  }
  try {
    validate_example(ex);
  } catch (const std::invalid_argument& e) {
    throw JsonlError(line_no, "<example>", e.what());
  }
  return ex;
}

void write_jsonl(const std::filesystem::path& path, const std::vector<TaskExample>& examples) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  for (const auto& ex : examples) os << to_jsonl_line(ex) << '\n';
  if (!os) throw std::runtime_error("failed writing " + path.string());
}

std::vector<TaskExample> load_jsonl(const std::filesystem::path& path, Task task) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot read " + path.string());
  std::vector<TaskExample> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    out.push_back(parse_jsonl_line(line, task, line_no));
  }
  return out;
}

void write_splits(const std::filesystem::path& dir, const TaskSplits& splits) {
  std::filesystem::create_directories(dir);
  write_jsonl(dir / "train.jsonl", splits.train);
  write_jsonl(dir / "val.jsonl", splits.validation);
  write_jsonl(dir / "test.jsonl", splits.test);
}

TaskSplits load_splits(const std::filesystem::path& dir, Task task) {
  TaskSplits s;
  s.train = load_jsonl(dir / "train.jsonl", task);
  s.validation = load_jsonl(dir / "val.jsonl", task);
  s.test = load_jsonl(dir / "test.jsonl", task);
  return s;
}

}  // namespace bplm
