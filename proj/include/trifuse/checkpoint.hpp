// Copyright 2026 The Trifuse Authors
// Binary checkpoint container with byte-exact round trips
//
// Licensed under the Apache License, Version 2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "trifuse/nn.hpp"

namespace trifuse::ckpt {

/// One named parameter payload. dtype 0 = little-endian float64 (the only
/// dtype currently written).
struct ParamRecord {
  std::string name;
  std::uint8_t dtype = 0;
  std::vector<std::uint64_t> dims;
  std::vector<double> data;

  std::uint64_t element_count() const {
    std::uint64_t n = 1;
    for (const std::uint64_t d : dims) n *= d;
    return n;
  }
};

/// File layout: 8-byte magic "TRIFCKP1", u32 format version, u64 metadata
/// length + UTF-8 JSON metadata, u32 record count, then per record:
/// u32 name length + name bytes, u8 dtype, u32 rank, u64 dims[rank],
/// float64 payload. All integers little-endian.
struct Checkpoint {
  nlohmann::json metadata;
  std::vector<ParamRecord> records;

  const ParamRecord* find(const std::string& name) const;
};

void save(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load(const std::filesystem::path& path);

/// Snapshot of a parameter list (order preserved).
Checkpoint from_params(const nn::ParamRefs& params, nlohmann::json metadata);

/// Copies checkpoint values into matching parameters. Every parameter
/// whose name starts with `prefix` (empty = all) must be present in the
/// checkpoint with an identical shape.
void load_into(const Checkpoint& ckpt, const nn::ParamRefs& params,
               const std::string& prefix = "");

/// Keeps transformer layers 0..k-1 of the layer stack named
/// "<layer_prefix>.<index>." and drops the rest; every other record is
/// carried over unchanged. Retained payloads are copied bit-exactly.
/// Metadata gains {"truncated_layers": k, "original_layers": L}.
Checkpoint truncate_encoder(const Checkpoint& ckpt,
                            const std::string& layer_prefix, int keep_layers);

}  // namespace trifuse::ckpt
