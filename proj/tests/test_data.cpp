// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

#include "bplm/data.hpp"
#include "oracles.hpp"

using namespace bplm;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  auto p = fs::temp_directory_path() / ("bplm_test_" + std::to_string(::getpid())) / name;
  fs::create_directories(p.parent_path());
  return p;
}

}  // namespace

TEST(Vocab, EncodeDecodeRoundTrip) {
  Vocab v(16, {"ab", "a", "b", "c"});
  const auto ids = v.encode("abacx");
  EXPECT_EQ(ids, (std::vector<TokenId>{3, 4, 6, Vocab::kUnk}));
  EXPECT_EQ(v.decode(std::vector<TokenId>{3, 6, Vocab::kPad}), "abc");
  EXPECT_ANY_THROW(Vocab(4, {"a", "b"}));
  EXPECT_ANY_THROW(Vocab(16, {"a", "a"}));
  const auto bytes = Vocab::bytes();
  EXPECT_EQ(bytes.decode(bytes.encode("hello")), "hello");
}

TEST(Markov, StationaryAndEntropyMatchOracle) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    CorpusSpec spec;
    spec.alphabet = 5;
    spec.seed = seed;
    const auto src = MarkovSource::random(spec);
    const auto pi = oracle::stationary(src.rows());
    double h = 0.0;
    for (std::size_t s = 0; s < pi.size(); ++s) {
      EXPECT_NEAR(src.stationary()[s], pi[s], 1e-10);
      for (double p : src.rows()[s]) {
        if (p > 0) h -= pi[s] * p * std::log(p);
      }
    }
    EXPECT_NEAR(src.entropy_rate(), h, 1e-10);
  }
}

TEST(Markov, PermutedSharedRowsHaveEqualEntropy) {
  CorpusSpec spec;
  spec.alphabet = 7;
  spec.rows = RowMode::kPermutedShared;
  const auto src = MarkovSource::random(spec);
  auto row_h = [](const std::vector<double>& r) {
    double h = 0;
    for (double p : r) h -= p > 0 ? p * std::log(p) : 0.0;
    return h;
  };
  for (const auto& r : src.rows()) EXPECT_NEAR(row_h(r), row_h(src.rows()[0]), 1e-12);
  EXPECT_NEAR(src.entropy_rate(), row_h(src.rows()[0]), 1e-12);
}

TEST(Corpus, DeterministicAndWithinBounds) {
  CorpusSpec spec;
  spec.min_len = 5;
  spec.max_len = 9;
  spec.target_tokens = 500;
  const auto a = gen_corpus(spec), b = gen_corpus(spec);
  EXPECT_EQ(a.sequences, b.sequences);
  EXPECT_GE(a.total_tokens(), 500u);
  for (const auto& s : a.sequences) {
    EXPECT_GE(s.size(), 5u);
    EXPECT_LE(s.size(), 9u);
    for (auto t : s) {
      EXPECT_GE(t, spec.first_token);
      EXPECT_LT(t, spec.first_token + static_cast<TokenId>(spec.alphabet));
    }
  }
  spec.max_len = 4;
  EXPECT_ANY_THROW(spec.validate());
}

TEST(Corpus, PatternGeneratorCycles) {
  CorpusSpec spec;
  spec.generator = CorpusGenerator::kRepeatedPattern;
  spec.pattern = {3, 4, 5};
  spec.target_tokens = 100;
  for (const auto& s : gen_corpus(spec).sequences) {
    for (std::size_t i = 3; i < s.size(); ++i) EXPECT_EQ(s[i], s[i - 3]);
  }
}

TEST(Corpus, SaveLoadRoundTrip) {
  CorpusSpec spec;
  spec.target_tokens = 300;
  const auto c = gen_corpus(spec);
  const auto path = scratch("corpus.bin");
  save_corpus(path, c);
  const auto back = load_corpus(path);
  EXPECT_EQ(back.sequences, c.sequences);
  EXPECT_EQ(back.entropy_rate, c.entropy_rate);
}

TEST(BatchStream, RandomAccessAndEpochs) {
  std::vector<std::vector<TokenId>> seqs;
  for (int i = 0; i < 10; ++i) seqs.push_back(std::vector<TokenId>(3 + i, static_cast<TokenId>(3 + i)));
  PackingSpec ps;
  ps.batch_rows = 3;
  ps.min_len = 4;
  ps.max_len = 8;
  ps.max_epochs = 2;
  const BatchStream s(seqs, ps);
  EXPECT_EQ(s.discarded(), 1u);
  EXPECT_EQ(s.batches_per_epoch(), 3u);
  EXPECT_EQ(s.capacity(), 6u);
  EXPECT_EQ(s.batch(4), s.batch(4));
  EXPECT_THROW(s.batch(6), DataExhausted);
  std::multiset<TokenId> firsts;
  for (std::size_t i = 0; i < 3; ++i) {
    const auto b = s.batch(i);
    EXPECT_LE(b.width, 8u);
    for (std::size_t r = 0; r < b.rows; ++r) {
      firsts.insert(b.row(r)[0]);
      for (std::size_t k = b.row_length(r); k < b.width; ++k) EXPECT_EQ(b.row(r)[k], Vocab::kPad);
    }
  }
  EXPECT_EQ(firsts.size(), 9u);
  EXPECT_EQ(std::set<TokenId>(firsts.begin(), firsts.end()).size(), 9u);
}

TEST(TaskData, DeterministicDisjointSplits) {
  for (Task task : {Task::kSc, Task::kTc, Task::kQa, Task::kIr}) {
    const auto a = gen_task_data(task, 100, 3), b = gen_task_data(task, 100, 3);
    EXPECT_EQ(a.train, b.train);
    EXPECT_EQ(a.train.size() + a.validation.size() + a.test.size(), 100u);
    std::set<std::vector<TokenId>> train;
    for (const auto& e : a.train) train.insert(e.tokens);
    for (const auto& e : a.test) EXPECT_EQ(train.count(e.tokens), 0u) << to_string(task);
    for (const auto& e : a.train) EXPECT_NO_THROW(validate_example(e));
  }
}

TEST(TaskData, FittedOptionsRespectVocab) {
  const auto o = TaskDataOptions::fitted(64);
  EXPECT_NO_THROW(o.validate());
  EXPECT_LE(static_cast<std::size_t>(o.end_id()), 64u);
  for (const auto& e : gen_task_data(Task::kIr, 60, 1, o).train) {
    for (auto t : e.tokens) EXPECT_LT(t, 64);
  }
  EXPECT_ANY_THROW(TaskDataOptions::fitted(32));
}

TEST(Jsonl, RoundTripAndErrors) {
  for (Task task : {Task::kSc, Task::kTc, Task::kQa, Task::kIr}) {
    const auto splits = gen_task_data(task, 40, 2);
    const auto dir = scratch(std::string("splits_") + to_string(task));
    write_splits(dir, splits);
    const auto back = load_splits(dir, task);
    EXPECT_EQ(back.train, splits.train);
    EXPECT_EQ(back.test, splits.test);
  }
  try {
    parse_jsonl_line(R"({"task":"sc","tokens":[3,4]})", Task::kSc, 7);
    FAIL() << "missing label accepted";
  } catch (const JsonlError& e) {
    EXPECT_EQ(e.line(), 7u);
    EXPECT_EQ(e.field(), "label");
  }
  EXPECT_THROW(parse_jsonl_line("{not json", Task::kSc, 1), JsonlError);
  const auto empty = scratch("empty.jsonl");
  std::ofstream(empty).close();
  EXPECT_TRUE(load_jsonl(empty, Task::kSc).empty());
}
