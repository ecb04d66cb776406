// SPDX-License-Identifier: Apache-2.0
//
// Binary checkpoint format (all integers little-endian):
//
//   "BPLM"                         magic, 4 bytes
//   u32 version
//   u64 n, n bytes                 canonical config text (key=value lines)
//   u64 record count
//   per record:
//     u32 n, n bytes               tensor name
//     u32 rank, rank × u64 dims
//     numel × f64                  IEEE-754 binary64 payload
//     u32 crc32(payload)
//   u32 crc32(all preceding bytes)
//
// Records hold the model parameters under their own names and the AdamW
// moments under "adam.m/<name>" and "adam.v/<name>".

#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "bplm/model.hpp"
#include "bplm/objectives.hpp"
#include "bplm/optim.hpp"

namespace bplm {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct PhaseRecord {
  Objective objective = Objective::kClm;
  std::int64_t steps = 0;
  bool operator==(const PhaseRecord&) const = default;
};

struct Checkpoint {
  std::uint32_t format_version = kCheckpointVersion;
  ModelConfig model;
  Parameters params;
  AdamWState optimizer;
  std::int64_t step = 0;  // optimizer steps completed under `schedule`
  WsdSchedule schedule;
  std::vector<PhaseRecord> history;
  std::string rng_state;

  /// True once the run reached the end of a schedule that has a decay window.
  bool decayed() const { return schedule.decay_steps > 0 && step >= schedule.total_steps; }

  /// Deep copy (parameters are not shared).
  Checkpoint clone() const;
  /// Field-wise equality with bitwise parameter comparison.
  bool bit_equal(const Checkpoint& other) const;
};

std::string history_str(const std::vector<PhaseRecord>& history);
std::vector<PhaseRecord> parse_history(const std::string& text);

class CheckpointError : public std::runtime_error {
 public:
  enum class Kind { kIo, kBadMagic, kVersion, kChecksum, kTruncated, kFormat };
  CheckpointError(Kind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  Kind kind() const { return kind_; }

 private:
  Kind kind_;
};

std::string canonical_config_text(const Checkpoint& ckpt);

std::vector<std::uint8_t> serialize_checkpoint(const Checkpoint& ckpt);
Checkpoint deserialize_checkpoint(const std::vector<std::uint8_t>& bytes);

/// Writes to "<path>.tmp" and renames into place.
void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace bplm
