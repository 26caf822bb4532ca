// Copyright (c) 2026 direct-pretrain contributors
// SPDX-License-Identifier: Apache-2.0
//
// Checkpoint archive: magic header + JSON index (meta, part tags, array
// table) + raw little-endian payload guarded by a CRC32. Partial loading
// overwrites exactly the shape-matched parameters whose part tag was
// requested and reports everything else.
#pragma once

#include <nlohmann/json.hpp>
#include <zlib.h>

#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "dpt/common.hpp"
#include "dpt/nn.hpp"

namespace dpt {

inline constexpr char kCheckpointMagic[8] = {'D', 'P', 'T', 'C', 'K', 'P', 'T', '1'};

struct CheckpointMeta {
  std::string phase;            // "pretrain" | "finetune" | ""
  std::string schedule_preset;  // e.g. "P3x"
  int resolution = 0;           // base size or max long edge of the phase
  int batch = 0;
  std::uint64_t seed = 0;
  std::int64_t iterations = 0;

  nlohmann::ordered_json to_json() const {
    return {{"phase", phase},   {"schedule_preset", schedule_preset},
            {"resolution", resolution}, {"batch", batch},
            {"seed", seed},     {"iterations", iterations}};
  }
  static CheckpointMeta from_json(const nlohmann::json& j) {
    CheckpointMeta m;
    m.phase = j.value("phase", "");
    m.schedule_preset = j.value("schedule_preset", "");
    m.resolution = j.value("resolution", 0);
    m.batch = j.value("batch", 0);
    m.seed = j.value("seed", std::uint64_t{0});
    m.iterations = j.value("iterations", std::int64_t{0});
    return m;
  }
};

struct StoredArray {
  std::string name;
  std::string dtype;  // "f32" | "f64"
  std::vector<std::int64_t> shape;
  std::vector<unsigned char> bytes;

  std::size_t numel() const {
    std::size_t n = 1;
    for (const auto d : shape) n *= static_cast<std::size_t>(d);
    return n;
  }
};

struct Checkpoint {
  CheckpointMeta meta;
  std::map<std::string, std::string> part_index;  // array name -> part tag
  std::vector<StoredArray> arrays;

  const StoredArray* find(const std::string& name) const {
    for (const auto& a : arrays)
      if (a.name == name) return &a;
    return nullptr;
  }
};

using PartRegistry = std::vector<std::pair<std::string, std::string>>;

/// Deterministic prefix tagging; unregistered prefixes map to "other".
inline std::string part_of(const std::string& param_name, const PartRegistry& registry) {
  for (const auto& [prefix, tag] : registry) {
    if (param_name.rfind(prefix, 0) == 0) return tag;
  }
  return "other";
}

inline const std::set<std::string>& valid_part_tags() {
  static const std::set<std::string> tags = {"backbone", "neck", "rpn", "box_head", "mask_head",
                                             "other"};
  return tags;
}

namespace detail {

template <typename T>
const char* dtype_name() {
  if constexpr (sizeof(T) == 4) return "f32";
  return "f64";
}

inline std::uint32_t payload_crc(const std::vector<StoredArray>& arrays) {
  uLong crc = crc32(0L, Z_NULL, 0);
  for (const auto& a : arrays) {
    crc = crc32(crc, a.bytes.data(), static_cast<uInt>(a.bytes.size()));
  }
  return static_cast<std::uint32_t>(crc);
}

}  // namespace detail

/// Builds a checkpoint from named arrays and a part registry.
template <typename T>
Checkpoint make_checkpoint(std::vector<nn::ArrayRef<T>> arrays, const PartRegistry& registry,
                           const CheckpointMeta& meta) {
  Checkpoint ckpt;
  ckpt.meta = meta;
  for (const auto& a : arrays) {
    StoredArray sa;
    sa.name = a.name;
    sa.dtype = detail::dtype_name<T>();
    sa.shape = a.shape;
    sa.bytes.resize(a.size * sizeof(T));
    std::memcpy(sa.bytes.data(), a.data, sa.bytes.size());
    ckpt.part_index[a.name] = part_of(a.name, registry);
    ckpt.arrays.push_back(std::move(sa));
  }
  return ckpt;
}

inline void write_checkpoint(const Checkpoint& ckpt, const std::string& path) {
  nlohmann::ordered_json header;
  header["version"] = 1;
  header["meta"] = ckpt.meta.to_json();
  header["part_index"] = ckpt.part_index;
  header["arrays"] = nlohmann::ordered_json::array();
  std::size_t offset = 0;
  std::size_t payload = 0;
  for (const auto& a : ckpt.arrays) {
    header["arrays"].push_back({{"name", a.name},
                                {"dtype", a.dtype},
                                {"shape", a.shape},
                                {"offset", offset},
                                {"nbytes", a.bytes.size()}});
    offset += a.bytes.size();
    payload += a.bytes.size();
  }
  header["payload_bytes"] = payload;
  header["payload_crc32"] = detail::payload_crc(ckpt.arrays);
  const std::string head = header.dump();

  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("write_checkpoint: cannot open " + path);
  out.write(kCheckpointMagic, sizeof(kCheckpointMagic));
  const std::uint64_t head_len = head.size();
  out.write(reinterpret_cast<const char*>(&head_len), sizeof(head_len));
  out.write(head.data(), static_cast<std::streamsize>(head.size()));
  for (const auto& a : ckpt.arrays) {
    out.write(reinterpret_cast<const char*>(a.bytes.data()),
              static_cast<std::streamsize>(a.bytes.size()));
  }
  if (!out) throw Error("write_checkpoint: write failed for " + path);
}

inline Checkpoint read_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("read_checkpoint: cannot open " + path);
  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kCheckpointMagic, sizeof(magic)) != 0)
    throw IntegrityError("read_checkpoint: bad magic in " + path);
  std::uint64_t head_len = 0;
  in.read(reinterpret_cast<char*>(&head_len), sizeof(head_len));
  if (!in || head_len == 0 || head_len > (1ull << 30))
    throw IntegrityError("read_checkpoint: bad header length in " + path);
  std::string head(head_len, '\0');
  in.read(head.data(), static_cast<std::streamsize>(head_len));
  if (!in) throw IntegrityError("read_checkpoint: truncated header in " + path);

  nlohmann::json header;
  try {
    header = nlohmann::json::parse(head);
  } catch (const nlohmann::json::parse_error& e) {
    throw IntegrityError("read_checkpoint: corrupt header JSON: " + std::string(e.what()));
  }
  if (header.value("version", 0) != 1)
    throw IntegrityError("read_checkpoint: unsupported version");

  Checkpoint ckpt;
  ckpt.meta = CheckpointMeta::from_json(header.at("meta"));
  for (const auto& [name, tag] : header.at("part_index").items()) ckpt.part_index[name] = tag;
  for (const auto& a : header.at("arrays")) {
    StoredArray sa;
    sa.name = a.at("name").get<std::string>();
    sa.dtype = a.at("dtype").get<std::string>();
    sa.shape = a.at("shape").get<std::vector<std::int64_t>>();
    sa.bytes.resize(a.at("nbytes").get<std::size_t>());
    in.read(reinterpret_cast<char*>(sa.bytes.data()),
            static_cast<std::streamsize>(sa.bytes.size()));
    if (!in) throw IntegrityError("read_checkpoint: truncated payload in " + path);
    ckpt.arrays.push_back(std::move(sa));
  }
  const auto expect_crc = header.at("payload_crc32").get<std::uint32_t>();
  if (detail::payload_crc(ckpt.arrays) != expect_crc)
    throw IntegrityError("read_checkpoint: payload CRC mismatch in " + path);
  return ckpt;
}

struct TransferReport {
  std::vector<std::string> loaded;
  std::vector<std::string> missing;           // requested but absent in the checkpoint
  std::vector<std::string> unexpected;        // checkpoint names (in parts) absent in the model
  std::vector<std::string> shape_mismatches;  // requested, present, different shape
};

namespace detail {

template <typename T>
void copy_stored(const StoredArray& src, T* dst, std::size_t n) {
  if (src.dtype == dtype_name<T>()) {
    std::memcpy(dst, src.bytes.data(), n * sizeof(T));
  } else if (src.dtype == "f32") {
    const float* s = reinterpret_cast<const float*>(src.bytes.data());
    for (std::size_t i = 0; i < n; ++i) dst[i] = static_cast<T>(s[i]);
  } else if (src.dtype == "f64") {
    const double* s = reinterpret_cast<const double*>(src.bytes.data());
    for (std::size_t i = 0; i < n; ++i) dst[i] = static_cast<T>(s[i]);
  } else {
    throw IntegrityError("checkpoint: unknown dtype " + src.dtype);
  }
}

}  // namespace detail

/// Overwrites exactly the model arrays whose tag is in `parts` and whose
/// shapes match the checkpoint. Everything else is untouched. In strict mode
/// a shape mismatch on a requested name escalates to an error (after the
/// report is fully built).
template <typename T>
TransferReport load_partial(std::vector<nn::ArrayRef<T>> model_arrays,
                            const PartRegistry& registry, const Checkpoint& ckpt,
                            const std::set<std::string>& parts, bool strict = true) {
  for (const auto& p : parts) {
    if (!valid_part_tags().count(p))
      throw Error("load_partial: unknown part tag '" + p + "'");
  }
  TransferReport report;
  std::set<std::string> model_names;
  for (const auto& a : model_arrays) model_names.insert(a.name);

  for (auto& a : model_arrays) {
    if (!parts.count(part_of(a.name, registry))) continue;
    const auto* stored = ckpt.find(a.name);
    if (stored == nullptr) {
      report.missing.push_back(a.name);
      continue;
    }
    if (stored->shape != a.shape) {
      report.shape_mismatches.push_back(a.name);
      continue;
    }
    detail::copy_stored(*stored, a.data, a.size);
    report.loaded.push_back(a.name);
  }
  for (const auto& sa : ckpt.arrays) {
    const auto it = ckpt.part_index.find(sa.name);
    const std::string tag = it != ckpt.part_index.end() ? it->second : "other";
    if (parts.count(tag) && !model_names.count(sa.name)) report.unexpected.push_back(sa.name);
  }
  if (strict && !report.shape_mismatches.empty()) {
    std::string msg = "load_partial: shape mismatch on";
    for (const auto& n : report.shape_mismatches) msg += " " + n;
    throw Error(msg);
  }
  return report;
}

/// True iff every requested, shape-matched array is numerically equal
/// between the model and the checkpoint.
template <typename T>
bool verify_transfer(std::vector<nn::ArrayRef<T>> model_arrays, const PartRegistry& registry,
                     const Checkpoint& ckpt, const std::set<std::string>& parts) {
  for (const auto& a : model_arrays) {
    if (!parts.count(part_of(a.name, registry))) continue;
    const auto* stored = ckpt.find(a.name);
    if (stored == nullptr || stored->shape != a.shape) continue;
    std::vector<T> tmp(a.size);
    detail::copy_stored(*stored, tmp.data(), a.size);
    for (std::size_t i = 0; i < a.size; ++i) {
      if (!(tmp[i] == a.data[i])) return false;
    }
  }
  return true;
}

inline std::set<std::string> all_part_tags() {
  return {"backbone", "neck", "rpn", "box_head", "mask_head"};
}

/// Parses "backbone,neck" style lists; "all" expands to the five part tags.
inline std::set<std::string> parse_parts(const std::string& csv) {
  if (csv == "all") return all_part_tags();
  std::set<std::string> parts;
  std::size_t start = 0;
  while (start <= csv.size()) {
    const auto comma = csv.find(',', start);
    const auto token = csv.substr(start, comma == std::string::npos ? csv.size() - start
                                                                    : comma - start);
    if (!token.empty()) {
      if (!valid_part_tags().count(token))
        throw ConfigError("unknown part tag '" + token +
                          "' (allowed: backbone, neck, rpn, box_head, mask_head, other, all)");
      parts.insert(token);
    }
    if (comma == std::string::npos) break;
    start = comma + 1;
  }
  if (parts.empty()) throw ConfigError("empty part list");
  return parts;
}

}  // namespace dpt
