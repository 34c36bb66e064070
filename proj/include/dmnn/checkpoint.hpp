// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "dmnn/network.hpp"
#include "dmnn/topology.hpp"

namespace dmnn {

/// Checkpoint container: magic "DMNN", format version u16, then repeated
/// records of (name: u32 length + UTF-8, dtype code u8, rank u8, dims u32
/// each, raw little-endian payload). Dtype codes: 0 = f32, 2 = u8. The
/// network description travels as one u8 record named "meta.spec_json" so a
/// checkpoint reconstructs the network by itself.
class CheckpointError : public std::runtime_error {
 public:
  explicit CheckpointError(const std::string& msg) : std::runtime_error(msg) {}
};

namespace ckpt_detail {

constexpr std::uint16_t kFormatVersion = 1;
constexpr std::uint8_t kDtypeF32 = 0;
constexpr std::uint8_t kDtypeU8 = 2;

inline void put_u16(std::ostream& os, std::uint16_t v) {
  const char b[2] = {static_cast<char>(v & 0xff), static_cast<char>(v >> 8)};
  os.write(b, 2);
}
inline void put_u32(std::ostream& os, std::uint32_t v) {
  char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xff);
  os.write(b, 4);
}
inline std::uint16_t get_u16(std::istream& is) {
  unsigned char b[2];
  is.read(reinterpret_cast<char*>(b), 2);
  return static_cast<std::uint16_t>(b[0] | (b[1] << 8));
}
inline std::uint32_t get_u32(std::istream& is) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

inline void put_f32_payload(std::ostream& os, const std::vector<float>& v) {
  static_assert(std::endian::native == std::endian::little,
                "payload writer assumes a little-endian host");
  os.write(reinterpret_cast<const char*>(v.data()),
           static_cast<std::streamsize>(v.size() * sizeof(float)));
}

struct RawRecord {
  std::uint8_t dtype = 0;
  std::vector<std::uint32_t> dims;
  std::vector<char> payload;

  std::size_t elem_count() const {
    std::size_t n = 1;
    for (auto d : dims) n *= d;
    return n;
  }
};

inline void write_record(std::ostream& os, const std::string& name, std::uint8_t dtype,
                         const std::vector<std::uint32_t>& dims, const char* payload,
                         std::size_t payload_bytes) {
  put_u32(os, static_cast<std::uint32_t>(name.size()));
  os.write(name.data(), static_cast<std::streamsize>(name.size()));
  os.put(static_cast<char>(dtype));
  os.put(static_cast<char>(dims.size()));
  for (auto d : dims) put_u32(os, d);
  os.write(payload, static_cast<std::streamsize>(payload_bytes));
}

}  // namespace ckpt_detail

inline void save_checkpoint(DmnnNetwork& net, const std::string& path) {
  namespace cd = ckpt_detail;
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw CheckpointError("save_checkpoint: cannot open '" + path + "' for writing");
  os.write("DMNN", 4);
  cd::put_u16(os, cd::kFormatVersion);

  const std::string spec_json = to_json(net.spec()).dump();
  cd::write_record(os, "meta.spec_json", cd::kDtypeU8,
                   {static_cast<std::uint32_t>(spec_json.size())}, spec_json.data(),
                   spec_json.size());

  for (auto& nt : net.named_tensors()) {
    std::vector<std::uint32_t> dims;
    for (int d : nt.tensor->shape()) dims.push_back(static_cast<std::uint32_t>(d));
    static_assert(std::endian::native == std::endian::little,
                  "payload writer assumes a little-endian host");
    cd::write_record(os, nt.name, cd::kDtypeF32, dims,
                     reinterpret_cast<const char*>(nt.tensor->data()),
                     nt.tensor->values().size() * sizeof(float));
  }
  if (!os) throw CheckpointError("save_checkpoint: write failed for '" + path + "'");
}

inline DmnnNetwork load_checkpoint(const std::string& path) {
  namespace cd = ckpt_detail;
  std::ifstream is(path, std::ios::binary);
  if (!is) throw CheckpointError("load_checkpoint: cannot open '" + path + "'");
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, "DMNN", 4) != 0) {
    throw CheckpointError("load_checkpoint: bad magic bytes in '" + path + "' (expected 'DMNN')");
  }
  const std::uint16_t version = cd::get_u16(is);
  if (version != cd::kFormatVersion) {
    throw CheckpointError("load_checkpoint: unsupported format version " +
                          std::to_string(version) + " (expected " +
                          std::to_string(cd::kFormatVersion) + ")");
  }

  std::map<std::string, cd::RawRecord> records;
  while (true) {
    const std::uint32_t name_len = cd::get_u32(is);
    if (is.eof() || !is) break;
    std::string name(name_len, '\0');
    is.read(name.data(), name_len);
    cd::RawRecord rec;
    rec.dtype = static_cast<std::uint8_t>(is.get());
    const int rank = is.get();
    for (int i = 0; i < rank; ++i) rec.dims.push_back(cd::get_u32(is));
    const std::size_t elem_bytes = rec.dtype == cd::kDtypeF32 ? 4 : 1;
    rec.payload.resize(rec.elem_count() * elem_bytes);
    is.read(rec.payload.data(), static_cast<std::streamsize>(rec.payload.size()));
    if (!is) throw CheckpointError("load_checkpoint: truncated record '" + name + "'");
    if (records.count(name)) {
      throw CheckpointError("load_checkpoint: duplicate record '" + name + "'");
    }
    records.emplace(std::move(name), std::move(rec));
  }

  auto meta = records.find("meta.spec_json");
  if (meta == records.end()) {
    throw CheckpointError("load_checkpoint: missing meta.spec_json record");
  }
  NetworkSpec spec = spec_from_json(
      nlohmann::json::parse(std::string(meta->second.payload.begin(), meta->second.payload.end())));
  records.erase(meta);

  DmnnNetwork net(std::move(spec), 0);
  for (auto& nt : net.named_tensors()) {
    auto it = records.find(nt.name);
    if (it == records.end()) {
      throw CheckpointError("load_checkpoint: missing tensor record '" + nt.name + "'");
    }
    const auto& rec = it->second;
    if (rec.dtype != cd::kDtypeF32) {
      throw CheckpointError("load_checkpoint: record '" + nt.name + "' has unexpected dtype");
    }
    if (static_cast<std::size_t>(nt.tensor->numel()) != rec.elem_count()) {
      throw CheckpointError("load_checkpoint: record '" + nt.name + "' has " +
                            std::to_string(rec.elem_count()) + " values, network expects " +
                            std::to_string(nt.tensor->numel()));
    }
    std::memcpy(nt.tensor->data(), rec.payload.data(), rec.payload.size());
    records.erase(it);
  }
  if (!records.empty()) {
    throw CheckpointError("load_checkpoint: unknown extra record '" + records.begin()->first + "'");
  }
  return net;
}

}  // namespace dmnn
