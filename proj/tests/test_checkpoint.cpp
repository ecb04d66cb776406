// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "bplm/checkpoint.hpp"
#include "bplm/pretrain.hpp"

using namespace bplm;
namespace fs = std::filesystem;

namespace {

Checkpoint sample() {
  ModelConfig m;
  m.layers = 1;
  m.embed_dim = 8;
  m.ffn_dim = 16;
  m.heads = 2;
  m.kv_heads = 1;
  m.vocab_size = 12;
  m.max_seq_len = 8;
  TrainConfig t;
  t.seed = 3;
  t.schedule = {1e-3, 1, 10, 1};
  auto c = initial_state(m, t);
  c.step = 4;
  c.history = {{Objective::kClm, 4}};
  c.optimizer.step_count = 4;
  c.optimizer.moments.begin()->second.m[0] = 0.1234567890123;
  return c;
}

Checkpoint expect_error(std::vector<std::uint8_t> bytes, CheckpointError::Kind kind) {
  try {
    return deserialize_checkpoint(bytes);
  } catch (const CheckpointError& e) {
    EXPECT_EQ(static_cast<int>(e.kind()), static_cast<int>(kind)) << e.what();
  }
  return {};
}

}  // namespace

TEST(Checkpoint, HistoryText) {
  const std::vector<PhaseRecord> h{{Objective::kClm, 3}, {Objective::kMlm, 9}};
  EXPECT_EQ(history_str(h), "clm:3,mlm:9");
  EXPECT_EQ(parse_history("clm:3,mlm:9"), h);
  EXPECT_TRUE(parse_history("").empty());
  EXPECT_ANY_THROW(parse_history("clm3"));
}

TEST(Checkpoint, SerializeRoundTripIsBitExact) {
  const auto c = sample();
  const auto bytes = serialize_checkpoint(c);
  const auto back = deserialize_checkpoint(bytes);
  EXPECT_TRUE(back.bit_equal(c));
  EXPECT_EQ(serialize_checkpoint(back), bytes);
  EXPECT_NE(canonical_config_text(c).find("history=clm:4"), std::string::npos);
}

TEST(Checkpoint, DetectsCorruption) {
  const auto bytes = serialize_checkpoint(sample());
  auto flipped = bytes;
  flipped[bytes.size() / 2] ^= 0x10;
  expect_error(flipped, CheckpointError::Kind::kChecksum);

  expect_error({bytes.begin(), bytes.begin() + bytes.size() / 3}, CheckpointError::Kind::kTruncated);

  auto magic = bytes;
  magic[0] = 'X';
  expect_error(magic, CheckpointError::Kind::kBadMagic);

  auto version = bytes;
  version[4] = 99;
  expect_error(version, CheckpointError::Kind::kVersion);
}

TEST(Checkpoint, SaveIsAtomicAndLoadsBack) {
  const auto dir = fs::temp_directory_path() / ("bplm_ckpt_" + std::to_string(::getpid()));
  fs::create_directories(dir);
  const auto path = dir / "a.bplm";
  const auto c = sample();
  save_checkpoint(c, path);
  EXPECT_FALSE(fs::exists(dir / "a.bplm.tmp"));
  EXPECT_TRUE(load_checkpoint(path).bit_equal(c));
  try {
    load_checkpoint(dir / "missing.bplm");
    FAIL();
  } catch (const CheckpointError& e) {
    EXPECT_EQ(e.kind(), CheckpointError::Kind::kIo);
  }
  fs::remove_all(dir);
}

TEST(Checkpoint, DecayedFlag) {
  auto c = sample();
  EXPECT_FALSE(c.decayed());
  c.step = 10;
  EXPECT_TRUE(c.decayed());
  c.schedule.decay_steps = 0;
  EXPECT_FALSE(c.decayed());
}
