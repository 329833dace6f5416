#pragma once

// Binary checkpoint layout:
//   8 bytes magic "MBRTCKPT" | u32 format version | u64 metadata length | metadata JSON
//   | tensor blobs (little-endian f32, in metadata order) | u64 FNV-1a of everything before it

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "mbert/config_io.hpp"
#include "mbert/io.hpp"
#include "mbert/model.hpp"
#include "mbert/optim.hpp"
#include "mbert/tokenizer.hpp"
#include "mbert/train_config.hpp"

namespace mbert {

inline constexpr char kCheckpointMagic[8] = {'M', 'B', 'R', 'T', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

class CheckpointError : public FormatError {
 public:
  enum class Kind { BadMagic, VersionMismatch, Truncated, Corrupt, FingerprintMismatch, Inconsistent };

  CheckpointError(Kind kind, const std::string& msg) : FormatError("checkpoint: " + msg), kind_(kind) {}
  Kind kind() const noexcept { return kind_; }

 private:
  Kind kind_;
};

/// Position of the training data stream: epoch number and offset in its permutation.
struct DataCursor {
  std::uint64_t epoch = 0;
  std::size_t position = 0;
  bool operator==(const DataCursor&) const = default;
};

struct Checkpoint {
  TrainConfig train;
  EncoderWeights<float> weights;
  AdamWState<float> optimizer;
  std::int64_t step = 0;
  std::string rng_state;
  std::string tokenizer_fingerprint;
  DataCursor cursor;

  const ModelConfig& model() const { return weights.config; }
  int stage() const { return train.stage; }
};

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out += static_cast<char>((v >> (8 * i)) & 0xff);
}

inline void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out += static_cast<char>((v >> (8 * i)) & 0xff);
}

inline std::uint64_t get_le(const std::string& in, std::size_t at, int bytes) {
  std::uint64_t v = 0;
  for (int i = 0; i < bytes; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(in[at + i])) << (8 * i);
  return v;
}

inline void put_floats(std::string& out, const std::vector<float>& v) {
  for (float x : v) put_u32(out, std::bit_cast<std::uint32_t>(x));
}

}  // namespace detail

inline std::string serialize_checkpoint(const Checkpoint& c) {
  const auto params = c.weights.parameters();
  if (c.optimizer.m.size() != params.size() || c.optimizer.v.size() != params.size()) {
    throw CheckpointError(CheckpointError::Kind::Inconsistent, "optimizer state does not match parameters");
  }
  Json meta;
  meta["format"] = "mbert-checkpoint";
  meta["model"] = to_json_value(c.weights.config);
  meta["train"] = to_json_value(c.train);
  meta["step"] = c.step;
  meta["stage"] = c.train.stage;
  meta["optimizer_step"] = c.optimizer.t;
  meta["rng_state"] = c.rng_state;
  meta["tokenizer_fingerprint"] = c.tokenizer_fingerprint;
  meta["data_cursor"] = {{"epoch", c.cursor.epoch}, {"position", c.cursor.position}};
  Json tensors = Json::array();
  std::vector<const std::vector<float>*> blobs;
  auto add = [&](const std::string& name, const Tensor<float>& t) {
    tensors.push_back({{"name", name}, {"shape", t.shape}});
    blobs.push_back(&t.data);
  };
  for (std::size_t i = 0; i < params.size(); ++i) add(params[i].name, *params[i].tensor);
  for (std::size_t i = 0; i < params.size(); ++i) add("adamw.m." + params[i].name, c.optimizer.m[i]);
  for (std::size_t i = 0; i < params.size(); ++i) add("adamw.v." + params[i].name, c.optimizer.v[i]);
  meta["tensors"] = tensors;

  const std::string meta_text = meta.dump();
  std::string out(kCheckpointMagic, sizeof kCheckpointMagic);
  detail::put_u32(out, kCheckpointVersion);
  detail::put_u64(out, meta_text.size());
  out += meta_text;
  for (const auto* b : blobs) detail::put_floats(out, *b);
  detail::put_u64(out, fnv1a64(out));
  return out;
}

/// Parses a checkpoint completely before returning; nothing is handed back on error.
/// A non-empty `expected_fingerprint` must equal the stored tokenizer fingerprint.
inline Checkpoint deserialize_checkpoint(const std::string& bytes, const std::string& expected_fingerprint = "") {
  using K = CheckpointError::Kind;
  const std::size_t header = sizeof kCheckpointMagic + 4 + 8;
  if (bytes.size() < sizeof kCheckpointMagic || std::memcmp(bytes.data(), kCheckpointMagic, sizeof kCheckpointMagic) != 0) {
    throw CheckpointError(K::BadMagic, "not a checkpoint file (bad magic)");
  }
  if (bytes.size() < header) throw CheckpointError(K::Truncated, "file truncated in header");
  const auto version = static_cast<std::uint32_t>(detail::get_le(bytes, 8, 4));
  if (version != kCheckpointVersion) {
    throw CheckpointError(K::VersionMismatch, "format version " + std::to_string(version) + ", expected " +
                                                  std::to_string(kCheckpointVersion));
  }
  const std::uint64_t meta_len = detail::get_le(bytes, 12, 8);
  if (meta_len > bytes.size() - header) throw CheckpointError(K::Truncated, "file truncated in metadata");
  Json meta;
  try {
    meta = Json::parse(bytes.substr(header, meta_len));
  } catch (const Json::exception& e) {
    throw CheckpointError(K::Corrupt, std::string("metadata is not valid JSON: ") + e.what());
  }

  Checkpoint c;
  std::vector<std::pair<std::string, Shape>> table;
  try {
    if (meta.at("format") != "mbert-checkpoint") throw CheckpointError(K::Corrupt, "unexpected format tag");
    const ModelConfig model = config_from_json<ModelConfig>(meta.at("model"), "model");
    c.train = config_from_json<TrainConfig>(meta.at("train"), "train");
    c.step = meta.at("step").get<std::int64_t>();
    c.optimizer.t = meta.at("optimizer_step").get<std::int64_t>();
    c.rng_state = meta.at("rng_state").get<std::string>();
    c.tokenizer_fingerprint = meta.at("tokenizer_fingerprint").get<std::string>();
    c.cursor.epoch = meta.at("data_cursor").at("epoch").get<std::uint64_t>();
    c.cursor.position = meta.at("data_cursor").at("position").get<std::size_t>();
    for (const auto& t : meta.at("tensors")) table.emplace_back(t.at("name").get<std::string>(), t.at("shape").get<Shape>());
    c.weights = init_model<float>(model);
  } catch (const CheckpointError&) {
    throw;
  } catch (const std::exception& e) {
    throw CheckpointError(K::Corrupt, std::string("malformed metadata: ") + e.what());
  }

  std::size_t need = header + meta_len + 8;
  for (const auto& [name, shape] : table) need += 4 * numel(shape);
  if (bytes.size() < need) throw CheckpointError(K::Truncated, "file truncated in tensor data");
  if (bytes.size() > need) throw CheckpointError(K::Corrupt, "trailing bytes after checksum");
  if (detail::get_le(bytes, need - 8, 8) != fnv1a64(std::string_view(bytes).substr(0, need - 8))) {
    throw CheckpointError(K::Corrupt, "checksum mismatch");
  }
  if (!expected_fingerprint.empty() && expected_fingerprint != c.tokenizer_fingerprint) {
    throw CheckpointError(K::FingerprintMismatch, "tokenizer fingerprint " + c.tokenizer_fingerprint +
                                                      " does not match expected " + expected_fingerprint);
  }

  std::map<std::string, Tensor<float>> loaded;
  std::size_t at = header + meta_len;
  for (const auto& [name, shape] : table) {
    Tensor<float> t(shape);
    for (auto& x : t.data) {
      x = std::bit_cast<float>(static_cast<std::uint32_t>(detail::get_le(bytes, at, 4)));
      at += 4;
    }
    if (!loaded.emplace(name, std::move(t)).second) throw CheckpointError(K::Corrupt, "duplicate tensor " + name);
  }
  auto take = [&](const std::string& name, const Shape& shape) {
    auto it = loaded.find(name);
    if (it == loaded.end()) throw CheckpointError(K::Inconsistent, "missing tensor " + name);
    if (it->second.shape != shape) {
      throw CheckpointError(K::Inconsistent, "tensor " + name + " has shape " + shape_str(it->second.shape) +
                                                 ", model expects " + shape_str(shape));
    }
    Tensor<float> t = std::move(it->second);
    loaded.erase(it);
    return t;
  };
  const auto params = c.weights.parameters();
  for (const auto& p : params) p.tensor->data = take(p.name, p.tensor->shape).data;
  for (const auto& p : params) c.optimizer.m.push_back(take("adamw.m." + p.name, p.tensor->shape));
  for (const auto& p : params) c.optimizer.v.push_back(take("adamw.v." + p.name, p.tensor->shape));
  if (!loaded.empty()) throw CheckpointError(K::Inconsistent, "unexpected tensor " + loaded.begin()->first);
  return c;
}

inline void save_checkpoint(const Checkpoint& c, const std::filesystem::path& path) {
  write_file_atomic(path, serialize_checkpoint(c));
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path, const std::string& expected_fingerprint = "") {
  return deserialize_checkpoint(read_file(path), expected_fingerprint);
}

}  // namespace mbert
