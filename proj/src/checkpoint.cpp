// Copyright 2026 The Trifuse Authors
// Binary checkpoint container
//
// Licensed under the Apache License, Version 2.0

#include "trifuse/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <map>
#include <set>

#include "trifuse/errors.hpp"

namespace trifuse::ckpt {

namespace {

constexpr char kMagic[8] = {'T', 'R', 'I', 'F', 'C', 'K', 'P', '1'};
constexpr std::uint32_t kVersion = 1;

template <typename T>
void write_pod(std::ostream& os, const T& v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::istream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw DataError("checkpoint truncated");
  return v;
}

}  // namespace

const ParamRecord* Checkpoint::find(const std::string& name) const {
  for (const ParamRecord& r : records) {
    if (r.name == name) return &r;
  }
  return nullptr;
}

void save(const Checkpoint& ckpt, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot open checkpoint for writing: " + path.string());

  os.write(kMagic, sizeof(kMagic));
  write_pod(os, kVersion);

  const std::string meta = ckpt.metadata.dump();
  write_pod(os, static_cast<std::uint64_t>(meta.size()));
  os.write(meta.data(), static_cast<std::streamsize>(meta.size()));

  write_pod(os, static_cast<std::uint32_t>(ckpt.records.size()));
  for (const ParamRecord& r : ckpt.records) {
    if (r.element_count() != r.data.size()) {
      throw ContractError("checkpoint record " + r.name +
                          ": dims do not match payload size");
    }
    write_pod(os, static_cast<std::uint32_t>(r.name.size()));
    os.write(r.name.data(), static_cast<std::streamsize>(r.name.size()));
    write_pod(os, r.dtype);
    write_pod(os, static_cast<std::uint32_t>(r.dims.size()));
    for (const std::uint64_t d : r.dims) write_pod(os, d);
    os.write(reinterpret_cast<const char*>(r.data.data()),
             static_cast<std::streamsize>(r.data.size() * sizeof(double)));
  }
  if (!os) throw DataError("failed writing checkpoint: " + path.string());
}

Checkpoint load(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open checkpoint: " + path.string());

  char magic[8];
  is.read(magic, sizeof(magic));
  if (!is || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
    throw DataError("not a checkpoint file: " + path.string());
  }
  const auto version = read_pod<std::uint32_t>(is);
  if (version != kVersion) {
    throw DataError("unsupported checkpoint version " + std::to_string(version));
  }

  Checkpoint ckpt;
  const auto meta_len = read_pod<std::uint64_t>(is);
  std::string meta(meta_len, '\0');
  is.read(meta.data(), static_cast<std::streamsize>(meta_len));
  if (!is) throw DataError("checkpoint truncated in metadata");
  try {
    ckpt.metadata = nlohmann::json::parse(meta);
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("bad checkpoint metadata: ") + e.what());
  }

  const auto n_records = read_pod<std::uint32_t>(is);
  std::set<std::string> seen;
  ckpt.records.reserve(n_records);
  for (std::uint32_t i = 0; i < n_records; ++i) {
    ParamRecord r;
    const auto name_len = read_pod<std::uint32_t>(is);
    r.name.resize(name_len);
    is.read(r.name.data(), name_len);
    if (!is) throw DataError("checkpoint truncated in record name");
    r.dtype = read_pod<std::uint8_t>(is);
    if (r.dtype != 0) {
      throw DataError("record " + r.name + ": unsupported dtype tag " +
                      std::to_string(r.dtype));
    }
    const auto rank = read_pod<std::uint32_t>(is);
    r.dims.resize(rank);
    for (std::uint32_t d = 0; d < rank; ++d) {
      r.dims[d] = read_pod<std::uint64_t>(is);
    }
    r.data.resize(r.element_count());
    is.read(reinterpret_cast<char*>(r.data.data()),
            static_cast<std::streamsize>(r.data.size() * sizeof(double)));
    if (!is) throw DataError("checkpoint truncated in record payload");
    if (!seen.insert(r.name).second) {
      throw DataError("duplicate record name: " + r.name);
    }
    ckpt.records.push_back(std::move(r));
  }
  return ckpt;
}

Checkpoint from_params(const nn::ParamRefs& params, nlohmann::json metadata) {
  Checkpoint ckpt;
  ckpt.metadata = std::move(metadata);
  std::set<std::string> seen;
  for (const nn::Parameter* p : params) {
    if (!seen.insert(p->name).second) {
      throw ContractError("duplicate parameter name: " + p->name);
    }
    ParamRecord r;
    r.name = p->name;
    for (const Eigen::Index d : p->tensor.shape()) {
      r.dims.push_back(static_cast<std::uint64_t>(d));
    }
    const Eigen::ArrayXd& v = p->tensor.values();
    r.data.assign(v.data(), v.data() + v.size());
    ckpt.records.push_back(std::move(r));
  }
  return ckpt;
}

void load_into(const Checkpoint& ckpt, const nn::ParamRefs& params,
               const std::string& prefix) {
  for (nn::Parameter* p : params) {
    if (!prefix.empty() && p->name.rfind(prefix, 0) != 0) continue;
    const ParamRecord* r = ckpt.find(p->name);
    if (r == nullptr) {
      throw DataError("checkpoint is missing parameter " + p->name);
    }
    if (static_cast<Eigen::Index>(r->element_count()) != p->tensor.size()) {
      throw DataError("checkpoint parameter " + p->name + " has wrong size");
    }
    Eigen::ArrayXd& v = p->tensor.values_mut();
    std::memcpy(v.data(), r->data.data(), r->data.size() * sizeof(double));
  }
}

Checkpoint truncate_encoder(const Checkpoint& ckpt,
                            const std::string& layer_prefix, int keep_layers) {
  const std::string needle = layer_prefix + ".";
  // Which layer indices exist?
  std::set<int> layers;
  for (const ParamRecord& r : ckpt.records) {
    if (r.name.rfind(needle, 0) != 0) continue;
    const std::size_t start = needle.size();
    std::size_t end = start;
    while (end < r.name.size() && r.name[end] >= '0' && r.name[end] <= '9') {
      ++end;
    }
    if (end == start || end >= r.name.size() || r.name[end] != '.') {
      throw DataError("cannot parse layer index in record " + r.name);
    }
    layers.insert(std::stoi(r.name.substr(start, end - start)));
  }
  if (layers.empty()) {
    throw InvalidInputError("no layers found under prefix " + layer_prefix);
  }
  const int stored = static_cast<int>(layers.size());
  if (*layers.begin() != 0 || *layers.rbegin() != stored - 1) {
    throw DataError("layer indices under " + layer_prefix + " are not dense");
  }
  if (keep_layers < 1 || keep_layers > stored) {
    throw InvalidInputError("cannot keep " + std::to_string(keep_layers) +
                            " of " + std::to_string(stored) + " layers");
  }

  Checkpoint out;
  out.metadata = ckpt.metadata;
  out.metadata["truncated_layers"] = keep_layers;
  out.metadata["original_layers"] = stored;
  for (const ParamRecord& r : ckpt.records) {
    if (r.name.rfind(needle, 0) == 0) {
      const std::size_t start = needle.size();
      std::size_t end = start;
      while (end < r.name.size() && r.name[end] >= '0' && r.name[end] <= '9') {
        ++end;
      }
      const int layer = std::stoi(r.name.substr(start, end - start));
      if (layer >= keep_layers) continue;
    }
    out.records.push_back(r);
  }
  return out;
}

}  // namespace trifuse::ckpt
