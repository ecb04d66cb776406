// SPDX-License-Identifier: Apache-2.0
//
// Tokenizer, synthetic corpora with analytic entropy rates, variable-length
// batch packing, and synthetic fine-tuning datasets.

#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "bplm/batch.hpp"
#include "bplm/tensor.hpp"

namespace bplm {

// ---- vocabulary ------------------------------------------------------------

class Vocab {
 public:
  static constexpr TokenId kPad = 0;
  static constexpr TokenId kMask = 1;
  static constexpr TokenId kUnk = 2;
  static constexpr TokenId kFirstSymbol = 3;

  /// ids [3, size) map to the single bytes 0x00, 0x01, ...
  static Vocab bytes(std::size_t size = 256);

  /// `symbols[i]` gets id kFirstSymbol + i. Symbols must be unique and
  /// non-empty; size must cover them.
  Vocab(std::size_t size, std::vector<std::string> symbols);

  std::size_t size() const { return size_; }
  TokenId pad_id() const { return kPad; }
  TokenId mask_id() const { return kMask; }
  TokenId unk_id() const { return kUnk; }
  /// Ids [first_symbol(), symbol_end()) carry symbols.
  TokenId first_symbol() const { return kFirstSymbol; }
  TokenId symbol_end() const { return kFirstSymbol + static_cast<TokenId>(symbols_.size()); }

  /// Greedy longest-match; bytes with no symbol become kUnk.
  std::vector<TokenId> encode(std::string_view text) const;
  /// Reserved ids decode to the empty string; symbol-less ids throw.
  std::string decode(std::span<const TokenId> ids) const;

 private:
  std::size_t size_;
  std::vector<std::string> symbols_;
  std::unordered_map<std::string, TokenId> index_;
  std::size_t longest_ = 1;
};

// ---- corpora ---------------------------------------------------------------

enum class CorpusGenerator { kMarkov, kRepeatedPattern };

/// How Markov transition rows are drawn. kPermutedShared makes every row a
/// permutation of one base distribution, so every state has the same
/// conditional entropy.
enum class RowMode { kIndependent, kPermutedShared };

struct CorpusSpec {
  CorpusGenerator generator = CorpusGenerator::kMarkov;
  std::size_t order = 1;
  std::size_t alphabet = 8;
  TokenId first_token = Vocab::kFirstSymbol;
  std::uint64_t seed = 0;
  std::size_t target_tokens = 10000;
  std::size_t min_len = 8;
  std::size_t max_len = 128;
  /// Spread of log transition weights; larger = lower entropy.
  double sharpness = 1.5;
  RowMode rows = RowMode::kIndependent;
  /// Repeated-pattern generator: tokens cycled with a random phase.
  std::vector<TokenId> pattern;

  /// Throws std::invalid_argument; `max_seq_len` bounds max_len.
  void validate(std::size_t max_seq_len = SIZE_MAX) const;
};

/// Order-k Markov chain over `alphabet` symbols starting at `first_token`.
class MarkovSource {
 public:
  MarkovSource(std::size_t order, std::size_t alphabet, TokenId first_token,
               std::vector<std::vector<double>> rows);

  static MarkovSource random(const CorpusSpec& spec);

  std::size_t order() const { return order_; }
  std::size_t alphabet() const { return alphabet_; }
  TokenId first_token() const { return first_; }
  std::size_t num_states() const { return rows_.size(); }
  const std::vector<std::vector<double>>& rows() const { return rows_; }
  const std::vector<double>& stationary() const { return stationary_; }

  /// Next-token distribution (over the alphabet) given the last `order`
  /// tokens of `context`.
  const std::vector<double>& next_distribution(std::span<const TokenId> context) const;

  /// -Σ_s π_s Σ_j P(j|s) ln P(j|s), in nats per token.
  double entropy_rate() const;

  std::vector<TokenId> sample(std::size_t length, std::uint64_t seed) const;

 private:
  std::size_t state_of(std::span<const TokenId> last) const;

  std::size_t order_;
  std::size_t alphabet_;
  TokenId first_;
  std::vector<std::vector<double>> rows_;
  std::vector<double> stationary_;
};

struct Corpus {
  std::vector<std::vector<TokenId>> sequences;
  double entropy_rate = 0.0;
  std::optional<MarkovSource> source;  // set for Markov corpora
  std::size_t total_tokens() const;
};

Corpus gen_corpus(const CorpusSpec& spec);

/// Cache layout: u32 header length, UTF-8 JSON header (spec summary and
/// entropy rate), u64 sequence count, then per sequence a u32 length and
/// its ids as little-endian u32.
void save_corpus(const std::filesystem::path& path, const Corpus& corpus);
Corpus load_corpus(const std::filesystem::path& path);

// ---- packing ---------------------------------------------------------------

class DataExhausted : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct PackingSpec {
  std::size_t batch_rows = 8;
  std::size_t min_len = 8;
  std::size_t max_len = 128;
  TokenId pad_id = Vocab::kPad;
  std::uint64_t seed = 0;
  /// 0 = unlimited passes over the data.
  std::size_t max_epochs = 0;
};

/// Deterministic random-access batch stream. Each epoch visits the retained
/// sequences in a seed-derived order; sequences shorter than min_len are
/// discarded (counted), longer ones are cut to max_len.
class BatchStream {
 public:
  BatchStream(std::vector<std::vector<TokenId>> sequences, PackingSpec spec);

  std::size_t batches_per_epoch() const { return per_epoch_; }
  std::size_t discarded() const { return discarded_; }
  /// Total batches available; SIZE_MAX when epochs are unlimited.
  std::size_t capacity() const;
  const PackingSpec& spec() const { return spec_; }

  /// Throws DataExhausted past capacity().
  LmBatch batch(std::size_t index) const;

 private:
  std::vector<std::vector<TokenId>> sequences_;
  PackingSpec spec_;
  std::size_t per_epoch_ = 0;
  std::size_t discarded_ = 0;
};

BatchStream pack_batches(std::vector<std::vector<TokenId>> sequences, std::size_t batch_rows,
                         std::size_t min_len, std::size_t max_len, TokenId pad_id,
                         std::uint64_t seed);

// ---- fine-tuning tasks -----------------------------------------------------

enum class Task { kSc, kTc, kQa, kIr };

const char* to_string(Task task);
Task parse_task(std::string_view name);

/// Inclusive token span.
struct TokenSpan {
  std::size_t start = 0;
  std::size_t end = 0;
  bool operator==(const TokenSpan&) const = default;
};

/// One labeled example. `tokens` is the input sequence (the query for IR);
/// which label fields are meaningful depends on `task`.
struct TaskExample {
  Task task = Task::kSc;
  std::vector<TokenId> tokens;
  int label = -1;                        // SC
  std::vector<int> tags;                 // TC, BIO ids (see metrics.hpp)
  std::optional<TokenSpan> answer;       // QA; nullopt = no answer
  std::vector<TokenId> positive;         // IR
  std::vector<std::vector<TokenId>> negatives;  // IR

  bool operator==(const TaskExample&) const = default;
};

/// Throws std::invalid_argument on a broken construction invariant.
void validate_example(const TaskExample& ex);

struct TaskSplits {
  std::vector<TaskExample> train;
  std::vector<TaskExample> validation;
  std::vector<TaskExample> test;
};

/// Token-id layout of the synthetic tasks. Filler tokens start at
/// kFirstSymbol; each planted token family follows in a disjoint range.
struct TaskDataOptions {
  std::size_t vocab_size = 256;
  std::size_t filler = 48;
  std::size_t num_classes = 2;
  std::size_t keywords_per_class = 2;
  std::size_t entity_types = 2;
  std::size_t entity_alphabet = 4;
  std::size_t answer_alphabet = 8;
  std::size_t rare_pool = 64;
  std::size_t ir_negatives = 9;
  std::size_t min_len = 8;
  std::size_t max_len = 24;
  double qa_no_answer_rate = 0.2;

  TokenId filler_begin() const { return Vocab::kFirstSymbol; }
  TokenId keyword(std::size_t cls, std::size_t k) const;
  TokenId entity_token(std::size_t type, std::size_t k) const;
  TokenId qa_marker() const;
  TokenId answer_token(std::size_t k) const;
  TokenId rare_token(std::size_t k) const;
  TokenId end_id() const;
  std::size_t num_tags() const { return 1 + 2 * entity_types; }
  void validate() const;

  /// Defaults with the filler and rare pools shrunk to fit `vocab`.
  static TaskDataOptions fitted(std::size_t vocab);
};

/// Learnable-by-construction data: SC label = planted class keyword; TC =
/// planted entity runs with BIO tags; QA answer = span after a marker token;
/// IR positive shares a planted rare token with the query. Splits 70/15/15,
/// disjoint by exact content.
TaskSplits gen_task_data(Task task, std::size_t size, std::uint64_t seed,
                         const TaskDataOptions& options = {});

// ---- JSONL -----------------------------------------------------------------

class JsonlError : public std::runtime_error {
 public:
  JsonlError(std::size_t line, const std::string& field, const std::string& what);
  std::size_t line() const { return line_; }
  const std::string& field() const { return field_; }

 private:
  std::size_t line_;
  std::string field_;
};

/// One object per line:
///   SC {"task":"sc","tokens":[...],"label":k}
///   TC {"task":"tc","tokens":[...],"tags":[...]}
///   QA {"task":"qa","tokens":[...],"answer":{"start":s,"end":e} | null}
///   IR {"task":"ir","query":[...],"positive":[...],"negatives":[[...],...]}
std::string to_jsonl_line(const TaskExample& ex);
TaskExample parse_jsonl_line(std::string_view line, Task task, std::size_t line_no);

void write_jsonl(const std::filesystem::path& path, const std::vector<TaskExample>& examples);
/// Blank lines are skipped; an empty file yields an empty list.
std::vector<TaskExample> load_jsonl(const std::filesystem::path& path, Task task);

void write_splits(const std::filesystem::path& dir, const TaskSplits& splits);
TaskSplits load_splits(const std::filesystem::path& dir, Task task);

}  // namespace bplm
