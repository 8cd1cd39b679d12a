#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "granage/common.hpp"
#include "granage/nn.hpp"
#include "granage/tensor.hpp"

namespace granage::serialize {

using json = nlohmann::json;

// Archive layout: ASCII magic line, little-endian u64 header length, JSON
// header, then the raw tensor payload (doubles, little-endian) in header
// manifest order. Doubles round-trip bit-exactly.

inline void write_u64(std::ostream& os, uint64_t v) {
  unsigned char buf[8];
  for (int i = 0; i < 8; ++i) buf[i] = static_cast<unsigned char>(v >> (8 * i));
  os.write(reinterpret_cast<const char*>(buf), 8);
}

inline uint64_t read_u64(std::istream& is) {
  unsigned char buf[8];
  is.read(reinterpret_cast<char*>(buf), 8);
  if (!is) throw RuntimeError("archive: truncated length field");
  uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(buf[i]) << (8 * i);
  return v;
}

inline json tensor_manifest(const std::vector<nn::ParamRef>& tensors) {
  json m = json::array();
  for (const auto& t : tensors)
    m.push_back({{"name", t.name}, {"shape", t.tensor->shape}});
  return m;
}

inline void write_archive(const std::string& path, const std::string& magic, const json& header,
                          const std::vector<nn::ParamRef>& tensors) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw RuntimeError("archive: cannot open for writing: " + path);
  os << magic << "\n";
  const std::string hs = header.dump();
  write_u64(os, hs.size());
  os.write(hs.data(), static_cast<std::streamsize>(hs.size()));
  for (const auto& t : tensors)
    os.write(reinterpret_cast<const char*>(t.tensor->data.data()),
             static_cast<std::streamsize>(t.tensor->data.size() * sizeof(double)));
  if (!os) throw RuntimeError("archive: write failed: " + path);
}

struct ArchiveReader {
  json header;
  std::ifstream stream;

  // Reads tensors in manifest order; must be called exactly once per entry.
  Tensor next_tensor(const json& entry) {
    std::vector<int64_t> shape = entry.at("shape").get<std::vector<int64_t>>();
    Tensor t(shape);
    stream.read(reinterpret_cast<char*>(t.data.data()),
                static_cast<std::streamsize>(t.data.size() * sizeof(double)));
    if (!stream)
      throw RuntimeError("archive: truncated tensor payload for " +
                         entry.at("name").get<std::string>());
    return t;
  }
};

// Validates the magic line. A recognizable family prefix with the wrong
// version is reported with both versions; anything else is not an archive.
inline ArchiveReader open_archive(const std::string& path, const std::string& family,
                                  int supported_version) {
  ArchiveReader r;
  r.stream.open(path, std::ios::binary);
  if (!r.stream) throw RuntimeError("archive: cannot open: " + path);
  std::string magic;
  if (!std::getline(r.stream, magic)) throw RuntimeError("archive: empty file: " + path);
  const std::string expected = family + "-" + std::to_string(supported_version);
  if (magic != expected) {
    if (magic.rfind(family + "-", 0) == 0)
      throw RuntimeError("archive: version mismatch in " + path + ": file is " + magic +
                         ", supported is " + expected);
    throw RuntimeError("archive: " + path + " is not a " + family + " archive");
  }
  const uint64_t hlen = read_u64(r.stream);
  std::string hs(hlen, '\0');
  r.stream.read(hs.data(), static_cast<std::streamsize>(hlen));
  if (!r.stream) throw RuntimeError("archive: truncated header: " + path);
  try {
    r.header = json::parse(hs);
  } catch (const json::exception& e) {
    throw RuntimeError("archive: corrupt header in " + path + ": " + e.what());
  }
  return r;
}

inline json layers_to_json(const nn::LayerStack& stack) {
  json arr = json::array();
  for (const auto& layer : stack.layers) {
    if (const auto* c = std::get_if<nn::Conv2d>(&layer))
      arr.push_back({{"type", "conv"}, {"in", c->in_ch}, {"out", c->out_ch},
                     {"k", c->ksize}, {"s", c->stride}, {"p", c->pad}});
    else if (std::get_if<nn::ReLU>(&layer))
      arr.push_back({{"type", "relu"}});
    else if (std::get_if<nn::GlobalAvgPool>(&layer))
      arr.push_back({{"type", "gap"}});
    else if (const auto* d = std::get_if<nn::Dense>(&layer))
      arr.push_back({{"type", "dense"}, {"in", d->in_dim}, {"out", d->out_dim}});
  }
  return arr;
}

inline nn::LayerStack layers_from_json(const json& arr) {
  nn::LayerStack stack;
  for (const auto& e : arr) {
    const std::string type = e.at("type").get<std::string>();
    if (type == "conv") {
      nn::Conv2d c;
      c.in_ch = e.at("in").get<int>();
      c.out_ch = e.at("out").get<int>();
      c.ksize = e.at("k").get<int>();
      c.stride = e.at("s").get<int>();
      c.pad = e.at("p").get<int>();
      c.w = Tensor({c.out_ch, c.in_ch, c.ksize, c.ksize});
      c.b = Tensor({c.out_ch});
      stack.layers.emplace_back(std::move(c));
    } else if (type == "relu") {
      stack.layers.emplace_back(nn::ReLU{});
    } else if (type == "gap") {
      stack.layers.emplace_back(nn::GlobalAvgPool{});
    } else if (type == "dense") {
      nn::Dense d;
      d.in_dim = e.at("in").get<int>();
      d.out_dim = e.at("out").get<int>();
      d.w = Tensor({d.out_dim, d.in_dim});
      d.b = Tensor({d.out_dim});
      stack.layers.emplace_back(std::move(d));
    } else {
      throw RuntimeError("archive: unknown layer type '" + type + "'");
    }
  }
  return stack;
}

}  // namespace granage::serialize
