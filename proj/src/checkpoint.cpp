// SPDX-License-Identifier: Apache-2.0

#include "bplm/checkpoint.hpp"

#include <zlib.h>

#include <bit>
#include <charconv>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>

namespace bplm {

namespace {

constexpr char kMagic[4] = {'B', 'P', 'L', 'M'};

std::uint32_t crc32_of(const std::uint8_t* data, std::size_t n) {
  uLong crc = crc32(0L, Z_NULL, 0);
  // zlib takes uInt lengths; feed in chunks.
  while (n > 0) {
    const auto chunk = static_cast<uInt>(std::min<std::size_t>(n, 1u << 30));
    crc = crc32(crc, data, chunk);
    data += chunk;
    n -= chunk;
  }
  return static_cast<std::uint32_t>(crc);
}

std::string fmt_double(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, v);  // shortest round-trip form
  return std::string(buf, res.ptr);
}

class Writer {
 public:
  void bytes(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    out_.insert(out_.end(), b, b + n);
  }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void f64s(std::span<const double> values) {
    for (double d : values) u64(std::bit_cast<std::uint64_t>(d));
  }
  std::vector<std::uint8_t>& buffer() { return out_; }

 private:
  std::vector<std::uint8_t> out_;
};

class Reader {
 public:
  Reader(const std::vector<std::uint8_t>& in, std::size_t end) : in_(in), end_(end) {}

  const std::uint8_t* take(std::size_t n) {
    if (n > end_ - pos_) throw CheckpointError(CheckpointError::Kind::kTruncated, "checkpoint truncated");
    const auto* p = in_.data() + pos_;
    pos_ += n;
    return p;
  }
  std::uint64_t le(int width) {
    const auto* p = take(static_cast<std::size_t>(width));
    std::uint64_t v = 0;
    for (int i = 0; i < width; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
    return v;
  }
  std::uint32_t u32() { return static_cast<std::uint32_t>(le(4)); }
  std::uint64_t u64() { return le(8); }
  std::size_t pos() const { return pos_; }

 private:
  const std::vector<std::uint8_t>& in_;
  std::size_t end_;
  std::size_t pos_ = 0;
};

void write_record(Writer& w, const std::string& name, const Shape& shape,
                  std::span<const double> payload) {
  w.u32(static_cast<std::uint32_t>(name.size()));
  w.bytes(name.data(), name.size());
  w.u32(static_cast<std::uint32_t>(shape.size()));
  for (auto d : shape) w.u64(d);
  const std::size_t start = w.buffer().size();
  w.f64s(payload);
  const std::uint32_t crc = crc32_of(w.buffer().data() + start, payload.size() * 8);
  w.u32(crc);
}

std::map<std::string, std::string> parse_kv(const std::string& text) {
  std::map<std::string, std::string> kv;
  std::istringstream is(text);
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw CheckpointError(CheckpointError::Kind::kFormat, "config block: malformed line '" + line + "'");
    }
    kv[line.substr(0, eq)] = line.substr(eq + 1);
  }
  return kv;
}

}  // namespace

Checkpoint Checkpoint::clone() const {
  Checkpoint c = *this;
  c.params = params.clone();
  return c;
}

bool Checkpoint::bit_equal(const Checkpoint& o) const {
  return format_version == o.format_version && model == o.model && params.bit_equal(o.params) &&
         optimizer == o.optimizer && step == o.step && schedule == o.schedule &&
         history == o.history && rng_state == o.rng_state;
}

std::string history_str(const std::vector<PhaseRecord>& history) {
  std::string out;
  for (std::size_t i = 0; i < history.size(); ++i) {
    if (i) out += ",";
    out += std::string(to_string(history[i].objective)) + ":" + std::to_string(history[i].steps);
  }
  return out;
}

std::vector<PhaseRecord> parse_history(const std::string& text) {
  std::vector<PhaseRecord> out;
  std::istringstream is(text);
  std::string item;
  while (std::getline(is, item, ',')) {
    if (item.empty()) continue;
    const auto colon = item.find(':');
    if (colon == std::string::npos) throw std::invalid_argument("history: malformed entry '" + item + "'");
    out.push_back({parse_objective(item.substr(0, colon)), std::stoll(item.substr(colon + 1))});
  }
  return out;
}

std::string canonical_config_text(const Checkpoint& c) {
  std::ostringstream os;
  const auto& m = c.model;
  os << "model.layers=" << m.layers << "\n"
     << "model.embed_dim=" << m.embed_dim << "\n"
     << "model.ffn_dim=" << m.ffn_dim << "\n"
     << "model.heads=" << m.heads << "\n"
     << "model.kv_heads=" << m.kv_heads << "\n"
     << "model.vocab_size=" << m.vocab_size << "\n"
     << "model.max_seq_len=" << m.max_seq_len << "\n"
     << "model.rope_theta=" << fmt_double(m.rope_theta) << "\n"
     << "model.rmsnorm_eps=" << fmt_double(m.rmsnorm_eps) << "\n"
     << "model.init_std=" << fmt_double(m.init_std) << "\n"
     << "model.tie_embeddings=" << (m.tie_embeddings ? 1 : 0) << "\n";
  const auto& h = c.optimizer.hyper;
  os << "adam.beta1=" << fmt_double(h.beta1) << "\n"
     << "adam.beta2=" << fmt_double(h.beta2) << "\n"
     << "adam.eps=" << fmt_double(h.eps) << "\n"
     << "adam.weight_decay=" << fmt_double(h.weight_decay) << "\n"
     << "adam.decay_norm_gains=" << (h.decay_norm_gains ? 1 : 0) << "\n"
     << "adam.step_count=" << c.optimizer.step_count << "\n";
  os << "schedule.peak_lr=" << fmt_double(c.schedule.peak_lr) << "\n"
     << "schedule.warmup_steps=" << c.schedule.warmup_steps << "\n"
     << "schedule.total_steps=" << c.schedule.total_steps << "\n"
     << "schedule.decay_steps=" << c.schedule.decay_steps << "\n";
  os << "step=" << c.step << "\n"
     << "history=" << history_str(c.history) << "\n"
     << "rng_state=" << c.rng_state << "\n";
  return os.str();
}

std::vector<std::uint8_t> serialize_checkpoint(const Checkpoint& c) {
  Writer w;
  w.bytes(kMagic, 4);
  w.u32(c.format_version);
  const std::string text = canonical_config_text(c);
  w.u64(text.size());
  w.bytes(text.data(), text.size());
  w.u64(c.params.size() + 2 * c.optimizer.moments.size());
  for (const auto& [name, t] : c.params) write_record(w, name, t.shape(), t.data());
  for (const auto& [name, mom] : c.optimizer.moments) {
    const Shape shape = c.params.contains(name) ? c.params.at(name).shape() : Shape{mom.m.size()};
    write_record(w, "adam.m/" + name, shape, mom.m);
    write_record(w, "adam.v/" + name, shape, mom.v);
  }
  const std::uint32_t file_crc = crc32_of(w.buffer().data(), w.buffer().size());
  w.u32(file_crc);
  return std::move(w.buffer());
}

Checkpoint deserialize_checkpoint(const std::vector<std::uint8_t>& bytes) {
  using Kind = CheckpointError::Kind;
  if (bytes.size() < 12) throw CheckpointError(Kind::kTruncated, "checkpoint truncated");
  if (std::memcmp(bytes.data(), kMagic, 4) != 0) throw CheckpointError(Kind::kBadMagic, "not a BPLM checkpoint");
  Reader r(bytes, bytes.size() - 4);
  r.take(4);
  Checkpoint c;
  c.format_version = r.u32();
  if (c.format_version != kCheckpointVersion) {
    throw CheckpointError(Kind::kVersion, "unsupported checkpoint version " + std::to_string(c.format_version));
  }
  const auto text_len = r.u64();
  const auto* text_ptr = r.take(text_len);
  const auto kv = parse_kv(std::string(reinterpret_cast<const char*>(text_ptr), text_len));

  auto get = [&](const std::string& key) -> const std::string& {
    auto it = kv.find(key);
    if (it == kv.end()) throw CheckpointError(Kind::kFormat, "config block missing '" + key + "'");
    return it->second;
  };
  auto num = [&](const std::string& key) { return std::stod(get(key)); };
  auto integer = [&](const std::string& key) { return std::stoll(get(key)); };
  auto uint = [&](const std::string& key) { return static_cast<std::size_t>(std::stoull(get(key))); };

  try {
    auto& m = c.model;
    m.layers = uint("model.layers");
    m.embed_dim = uint("model.embed_dim");
    m.ffn_dim = uint("model.ffn_dim");
    m.heads = uint("model.heads");
    m.kv_heads = uint("model.kv_heads");
    m.vocab_size = uint("model.vocab_size");
    m.max_seq_len = uint("model.max_seq_len");
    m.rope_theta = num("model.rope_theta");
    m.rmsnorm_eps = num("model.rmsnorm_eps");
    m.init_std = num("model.init_std");
    m.tie_embeddings = integer("model.tie_embeddings") != 0;
    auto& h = c.optimizer.hyper;
    h.beta1 = num("adam.beta1");
    h.beta2 = num("adam.beta2");
    h.eps = num("adam.eps");
    h.weight_decay = num("adam.weight_decay");
    h.decay_norm_gains = integer("adam.decay_norm_gains") != 0;
    c.optimizer.step_count = integer("adam.step_count");
    c.schedule.peak_lr = num("schedule.peak_lr");
    c.schedule.warmup_steps = integer("schedule.warmup_steps");
    c.schedule.total_steps = integer("schedule.total_steps");
    c.schedule.decay_steps = integer("schedule.decay_steps");
    c.step = integer("step");
    c.history = parse_history(get("history"));
    c.rng_state = get("rng_state");
  } catch (const CheckpointError&) {
    throw;
  } catch (const std::exception& e) {
    throw CheckpointError(Kind::kFormat, std::string("config block: ") + e.what());
  }

  const auto count = r.u64();
  for (std::uint64_t i = 0; i < count; ++i) {
    const auto name_len = r.u32();
    const auto* name_ptr = r.take(name_len);
    std::string name(reinterpret_cast<const char*>(name_ptr), name_len);
    const auto rank = r.u32();
    Shape shape(rank);
    for (auto& d : shape) d = r.u64();
    const std::size_t n = shape_numel(shape);
    if (n > (bytes.size() / 8)) throw CheckpointError(Kind::kTruncated, "checkpoint truncated");
    const auto* payload = r.take(n * 8);
    const auto stored_crc = r.u32();
    if (crc32_of(payload, n * 8) != stored_crc) {
      throw CheckpointError(Kind::kChecksum, "checksum mismatch in tensor '" + name + "'");
    }
    std::vector<double> values(n);
    for (std::size_t j = 0; j < n; ++j) {
      std::uint64_t bits = 0;
      for (int b = 0; b < 8; ++b) bits |= static_cast<std::uint64_t>(payload[j * 8 + b]) << (8 * b);
      values[j] = std::bit_cast<double>(bits);
    }
    if (name.starts_with("adam.m/")) {
      c.optimizer.moments[name.substr(7)].m = std::move(values);
    } else if (name.starts_with("adam.v/")) {
      c.optimizer.moments[name.substr(7)].v = std::move(values);
    } else {
      c.params.insert(name, Tensor::from(shape, std::move(values), true));
    }
  }
  if (r.pos() != bytes.size() - 4) throw CheckpointError(Kind::kFormat, "trailing bytes after tensor records");
  std::uint32_t stored = 0;
  for (int b = 0; b < 4; ++b) stored |= static_cast<std::uint32_t>(bytes[bytes.size() - 4 + b]) << (8 * b);
  if (crc32_of(bytes.data(), bytes.size() - 4) != stored) {
    throw CheckpointError(Kind::kChecksum, "file checksum mismatch");
  }
  return c;
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  const auto bytes = serialize_checkpoint(ckpt);
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw CheckpointError(CheckpointError::Kind::kIo, "cannot write " + tmp.string());
    os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!os) throw CheckpointError(CheckpointError::Kind::kIo, "failed writing " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw CheckpointError(CheckpointError::Kind::kIo, "cannot read " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  return deserialize_checkpoint(bytes);
}

}  // namespace bplm
