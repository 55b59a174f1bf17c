/* Copyright 2026 The frill Authors. All Rights Reserved.

Licensed under the Apache License, Version 2.0 (the "License");
you may not use this file except in compliance with the License.
You may obtain a copy of the License at

    http://www.apache.org/licenses/LICENSE-2.0

Unless required by applicable law or agreed to in writing, software
distributed under the License is distributed on an "AS IS" BASIS,
WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
See the License for the specific language governing permissions and
limitations under the License.
==============================================================================*/

#pragma once

// Binary model file.
//
//   "FRL1" | u32 version | descriptor | u32 record count | records | u32 crc
//
// All integers and floats are little-endian. Strings are u32 length + bytes.
// descriptor:
//   string config name
//   u8 size | f64 width | u8 flags (1 gap, 2 comp, 4 qat, 8 fake quant)
//   u32 embedding_dim | u32 input_frames | u32 input_bins
//   u32 stem | u32 block count | per block:
//     u32 kernel | u32 expansion | u32 out | u8 se | u8 activation | u32 stride
//   u32 last_conv | u32 final_conv
//   u8 bottleneck kind (0 dense, 1 low-rank, 2 int8 dense, 3 int8 low-rank)
//   f64 lambda
// record:
//   string name | u8 dtype (0 f32, 1 i8) | [f32 scale if i8]
//   u32 rank | u64 dims[rank] | u64 payload bytes | payload
// The trailing CRC-32 (zlib polynomial) covers every byte before it.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <zlib.h>

#include "frill/error.hpp"
#include "frill/model.hpp"

namespace frill {

inline constexpr char kModelMagic[4] = {'F', 'R', 'L', '1'};
inline constexpr std::uint32_t kModelFormatVersion = 1;

enum class BottleneckKind : std::uint8_t {
  kDense = 0,
  kLowRank = 1,
  kInt8Dense = 2,
  kInt8LowRank = 3,
};

namespace detail {

class ByteWriter {
 public:
  void bytes(const void* p, std::size_t n) {
    const auto* c = static_cast<const std::uint8_t*>(p);
    buf_.insert(buf_.end(), c, c + n);
  }
  void u8(std::uint8_t v) { buf_.push_back(v); }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
  void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
  void str(const std::string& s) {
    u32(static_cast<std::uint32_t>(s.size()));
    bytes(s.data(), s.size());
  }
  std::vector<std::uint8_t>& buffer() { return buf_; }

 private:
  std::vector<std::uint8_t> buf_;
};

class ByteReader {
 public:
  ByteReader(const std::uint8_t* data, std::size_t size) : p_(data), end_(data + size) {}

  const std::uint8_t* take(std::size_t n) {
    if (static_cast<std::size_t>(end_ - p_) < n) {
      fail(ErrorCode::kFormat, "model file ends inside a field");
    }
    const std::uint8_t* out = p_;
    p_ += n;
    return out;
  }
  std::uint8_t u8() { return *take(1); }
  std::uint32_t u32() {
    const auto* b = take(4);
    std::uint32_t v = 0;
    for (int i = 3; i >= 0; --i) v = (v << 8) | b[i];
    return v;
  }
  std::uint64_t u64() {
    const auto* b = take(8);
    std::uint64_t v = 0;
    for (int i = 7; i >= 0; --i) v = (v << 8) | b[i];
    return v;
  }
  float f32() { return std::bit_cast<float>(u32()); }
  double f64() { return std::bit_cast<double>(u64()); }
  std::string str() {
    const std::uint32_t n = u32();
    const auto* b = take(n);
    return std::string(reinterpret_cast<const char*>(b), n);
  }
  bool done() const { return p_ == end_; }

 private:
  const std::uint8_t* p_;
  const std::uint8_t* end_;
};

inline std::uint32_t crc32_of(const std::uint8_t* data, std::size_t n) {
  uLong crc = crc32(0L, Z_NULL, 0);
  while (n > 0) {
    const auto chunk = static_cast<uInt>(std::min<std::size_t>(n, 1u << 30));
    crc = crc32(crc, data, chunk);
    data += chunk;
    n -= chunk;
  }
  return static_cast<std::uint32_t>(crc);
}

inline void write_f32_record(ByteWriter& w, const std::string& name, const Tensor<float>& t) {
  w.str(name);
  w.u8(0);
  w.u32(static_cast<std::uint32_t>(t.rank()));
  for (std::size_t d : t.shape()) w.u64(d);
  w.u64(static_cast<std::uint64_t>(t.size()) * 4);
  for (float v : t.storage()) w.f32(v);
}

inline void write_i8_record(ByteWriter& w, const std::string& name, const QuantizedMatrix& q) {
  w.str(name);
  w.u8(1);
  w.f32(q.spec.scale);
  w.u32(static_cast<std::uint32_t>(q.shape.size()));
  for (std::size_t d : q.shape) w.u64(d);
  w.u64(q.values.size());
  w.bytes(q.values.data(), q.values.size());
}

struct RawRecord {
  std::string name;
  std::uint8_t dtype = 0;
  float scale = 1.0f;
  Shape shape;
  const std::uint8_t* payload = nullptr;
  std::size_t payload_bytes = 0;
  std::size_t record_bytes = 0;
};

inline RawRecord read_record(ByteReader& r) {
  RawRecord rec;
  rec.name = r.str();
  rec.dtype = r.u8();
  if (rec.dtype > 1) fail(ErrorCode::kFormat, "record '", rec.name, "' has unknown dtype ", int{rec.dtype});
  if (rec.dtype == 1) rec.scale = r.f32();
  const std::uint32_t rank = r.u32();
  if (rank == 0 || rank > 8) fail(ErrorCode::kFormat, "record '", rec.name, "' has rank ", rank);
  for (std::uint32_t i = 0; i < rank; ++i) rec.shape.push_back(static_cast<std::size_t>(r.u64()));
  const std::uint64_t len = r.u64();
  const std::size_t elem = rec.dtype == 0 ? 4 : 1;
  if (len != shape_size(rec.shape) * elem) {
    fail(ErrorCode::kFormat, "record '", rec.name, "' payload is ", len, " bytes, shape ",
         shape_string(rec.shape), " needs ", shape_size(rec.shape) * elem);
  }
  rec.payload_bytes = static_cast<std::size_t>(len);
  rec.payload = r.take(rec.payload_bytes);
  rec.record_bytes = 4 + rec.name.size() + 1 + (rec.dtype == 1 ? 4 : 0) + 4 + 8 * rank + 8 +
                     rec.payload_bytes;
  return rec;
}

inline Tensor<float> as_f32(const RawRecord& rec) {
  if (rec.dtype != 0) fail(ErrorCode::kFormat, "record '", rec.name, "' should be f32");
  Tensor<float> t(rec.shape);
  for (std::size_t i = 0; i < t.size(); ++i) {
    std::uint32_t bits = 0;
    for (int b = 3; b >= 0; --b) bits = (bits << 8) | rec.payload[4 * i + static_cast<std::size_t>(b)];
    t[i] = std::bit_cast<float>(bits);
  }
  return t;
}

inline QuantizedMatrix as_i8(const RawRecord& rec) {
  if (rec.dtype != 1) fail(ErrorCode::kFormat, "record '", rec.name, "' should be i8");
  if (rec.shape.size() != 2) fail(ErrorCode::kFormat, "record '", rec.name, "' must be a matrix");
  QuantizedMatrix q;
  q.shape = rec.shape;
  q.values.resize(rec.payload_bytes);
  std::memcpy(q.values.data(), rec.payload, rec.payload_bytes);
  q.spec.scale = rec.scale;
  return q;
}

// Magic, version and checksum, checked in that order.
inline void check_envelope(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < 12) {
    fail(ErrorCode::kChecksum, "model file is truncated (", bytes.size(), " bytes)");
  }
  if (std::memcmp(bytes.data(), kModelMagic, 4) != 0) {
    fail(ErrorCode::kBadMagic, "not a model file: magic is not FRL1");
  }
  ByteReader r(bytes.data() + 4, 4);
  const std::uint32_t version = r.u32();
  if (version != kModelFormatVersion) {
    fail(ErrorCode::kBadVersion, "model file version ", version, " is not supported (expected ",
         kModelFormatVersion, ")");
  }
  const std::size_t body = bytes.size() - 4;
  ByteReader tail(bytes.data() + body, 4);
  const std::uint32_t stored = tail.u32();
  const std::uint32_t actual = crc32_of(bytes.data(), body);
  if (stored != actual) {
    fail(ErrorCode::kChecksum, "checksum mismatch: file says ", stored, ", contents give ",
         actual);
  }
}

}  // namespace detail

inline std::vector<std::uint8_t> serialize(const StudentModel<float>& m) {
  detail::ByteWriter w;
  w.bytes(kModelMagic, 4);
  w.u32(kModelFormatVersion);

  const ModelConfig& c = m.config;
  w.str(c.name());
  w.u8(static_cast<std::uint8_t>(c.size));
  w.f64(c.width);
  w.u8(static_cast<std::uint8_t>((c.gap ? 1 : 0) | (c.compressed ? 2 : 0) | (c.qat ? 4 : 0) |
                                 (m.fake_quant_active ? 8 : 0)));
  w.u32(static_cast<std::uint32_t>(c.embedding_dim));
  w.u32(static_cast<std::uint32_t>(m.input_frames));
  w.u32(static_cast<std::uint32_t>(m.input_bins));
  const Topology& t = m.topology;
  w.u32(static_cast<std::uint32_t>(t.stem));
  w.u32(static_cast<std::uint32_t>(t.blocks.size()));
  for (const BlockSpec& b : t.blocks) {
    w.u32(static_cast<std::uint32_t>(b.kernel));
    w.u32(static_cast<std::uint32_t>(b.expansion));
    w.u32(static_cast<std::uint32_t>(b.out));
    w.u8(b.se ? 1 : 0);
    w.u8(static_cast<std::uint8_t>(b.act));
    w.u32(static_cast<std::uint32_t>(b.stride));
  }
  w.u32(static_cast<std::uint32_t>(t.last_conv));
  w.u32(static_cast<std::uint32_t>(t.final_conv));
  w.u8(static_cast<std::uint8_t>(m.bottleneck.index()));
  const double lambda = std::holds_alternative<LowRankDense<float>>(m.bottleneck)
                            ? std::get<LowRankDense<float>>(m.bottleneck).lambda
                            : 0.0;
  w.f64(lambda);

  // Count records first so the header can carry the total.
  std::uint32_t count = 0;
  visit_trunk_tensors(m, [&](const std::string&, const Tensor<float>&, bool) { ++count; });
  std::visit(
      [&](const auto& layer) {
        using L = std::decay_t<decltype(layer)>;
        if constexpr (std::is_same_v<L, LowRankDense<float>>) count += layer.w ? 4 : 3;
        else if constexpr (std::is_same_v<L, QuantizedLowRank<float>>) count += 3;
        else count += 2;
      },
      m.bottleneck);
  w.u32(count);

  visit_trunk_tensors(m, [&](const std::string& name, const Tensor<float>& tensor, bool) {
    detail::write_f32_record(w, name, tensor);
  });
  std::visit(
      [&](const auto& layer) {
        using L = std::decay_t<decltype(layer)>;
        if constexpr (std::is_same_v<L, DenseLayer<float>>) {
          detail::write_f32_record(w, "bottleneck/w", layer.w);
        } else if constexpr (std::is_same_v<L, LowRankDense<float>>) {
          if (layer.w) detail::write_f32_record(w, "bottleneck/w", *layer.w);
          detail::write_f32_record(w, "bottleneck/u", layer.u);
          detail::write_f32_record(w, "bottleneck/v", layer.v);
        } else if constexpr (std::is_same_v<L, QuantizedDense<float>>) {
          detail::write_i8_record(w, "bottleneck/w", layer.kernel);
        } else {
          detail::write_i8_record(w, "bottleneck/u", layer.u);
          detail::write_i8_record(w, "bottleneck/v", layer.v);
        }
        detail::write_f32_record(w, "bottleneck/b", layer.b);
      },
      m.bottleneck);

  auto& buf = w.buffer();
  const std::uint32_t crc = detail::crc32_of(buf.data(), buf.size());
  w.u32(crc);
  return std::move(buf);
}

struct RecordInfo {
  std::string name;
  std::string dtype;  // "f32" or "i8"
  Shape shape;
  std::size_t payload_bytes = 0;
  std::size_t record_bytes = 0;  // header + payload
};

struct ModelFileInfo {
  std::uint32_t version = 0;
  std::string config_name;
  std::size_t total_bytes = 0;
  std::vector<RecordInfo> records;

  // Bytes taken by records whose name starts with `prefix`.
  std::size_t record_bytes(std::string_view prefix) const {
    std::size_t total = 0;
    for (const auto& r : records) {
      if (r.name.compare(0, prefix.size(), prefix) == 0) total += r.record_bytes;
    }
    return total;
  }
};

namespace detail {

struct ParsedFile {
  ModelConfig config;
  bool fake_quant = false;
  BuildOptions options;
  Topology topology;
  BottleneckKind kind = BottleneckKind::kDense;
  double lambda = 0.0;
  std::vector<RawRecord> records;
};

inline ParsedFile parse_model_file(const std::vector<std::uint8_t>& bytes) {
  check_envelope(bytes);
  ByteReader r(bytes.data() + 8, bytes.size() - 12);
  ParsedFile p;
  const std::string name = r.str();
  const std::uint8_t size = r.u8();
  if (size > 2) fail(ErrorCode::kFormat, "unknown size code ", int{size});
  p.config.size = static_cast<Mv3Size>(size);
  p.config.width = r.f64();
  const std::uint8_t flags = r.u8();
  p.config.gap = flags & 1;
  p.config.compressed = flags & 2;
  p.config.qat = flags & 4;
  p.fake_quant = flags & 8;
  p.config.embedding_dim = static_cast<int>(r.u32());
  if (p.config.name() != name) {
    fail(ErrorCode::kFormat, "descriptor fields give '", p.config.name(), "' but name says '",
         name, "'");
  }
  p.options.input_frames = r.u32();
  p.options.input_bins = r.u32();
  p.topology.stem = static_cast<int>(r.u32());
  const std::uint32_t nblocks = r.u32();
  for (std::uint32_t i = 0; i < nblocks; ++i) {
    BlockSpec b;
    b.kernel = static_cast<int>(r.u32());
    b.expansion = static_cast<int>(r.u32());
    b.out = static_cast<int>(r.u32());
    b.se = r.u8() != 0;
    const std::uint8_t act = r.u8();
    if (act > 2) fail(ErrorCode::kFormat, "unknown activation code ", int{act});
    b.act = static_cast<Activation>(act);
    b.stride = static_cast<int>(r.u32());
    if (b.kernel <= 0 || b.expansion <= 0 || b.out <= 0 || b.stride <= 0) {
      fail(ErrorCode::kFormat, "block ", i + 1, " has a non-positive dimension");
    }
    p.topology.blocks.push_back(b);
  }
  p.topology.last_conv = static_cast<int>(r.u32());
  p.topology.final_conv = static_cast<int>(r.u32());
  const std::uint8_t kind = r.u8();
  if (kind > 3) fail(ErrorCode::kFormat, "unknown bottleneck kind ", int{kind});
  p.kind = static_cast<BottleneckKind>(kind);
  p.lambda = r.f64();
  const std::uint32_t count = r.u32();
  for (std::uint32_t i = 0; i < count; ++i) p.records.push_back(read_record(r));
  if (!r.done()) fail(ErrorCode::kFormat, "trailing bytes after the last record");
  return p;
}

}  // namespace detail

inline ModelFileInfo inspect(const std::vector<std::uint8_t>& bytes) {
  const auto p = detail::parse_model_file(bytes);
  ModelFileInfo info;
  info.version = kModelFormatVersion;
  info.config_name = p.config.name();
  info.total_bytes = bytes.size();
  for (const auto& r : p.records) {
    info.records.push_back({r.name, r.dtype == 0 ? "f32" : "i8", r.shape, r.payload_bytes,
                            r.record_bytes});
  }
  return info;
}

inline StudentModel<float> deserialize(const std::vector<std::uint8_t>& bytes) {
  auto p = detail::parse_model_file(bytes);
  if (p.topology.blocks.empty() || p.config.embedding_dim <= 0 || p.options.input_frames == 0 ||
      p.options.input_bins == 0) {
    fail(ErrorCode::kFormat, "descriptor describes an empty model");
  }
  Rng rng(0);
  StudentModel<float> m = detail::build_trunk<float>(p.topology, p.config, p.options, rng);
  m.fake_quant_active = p.fake_quant;

  std::map<std::string, const detail::RawRecord*> by_name;
  for (const auto& r : p.records) {
    if (!by_name.emplace(r.name, &r).second) {
      fail(ErrorCode::kFormat, "record '", r.name, "' appears twice");
    }
  }
  std::size_t used = 0;
  auto take = [&](const std::string& name) -> const detail::RawRecord& {
    auto it = by_name.find(name);
    if (it == by_name.end()) fail(ErrorCode::kFormat, "missing record '", name, "'");
    ++used;
    return *it->second;
  };
  visit_trunk_tensors(m, [&](const std::string& name, Tensor<float>& t, bool) {
    Tensor<float> loaded = detail::as_f32(take(name));
    if (loaded.shape() != t.shape()) {
      fail(ErrorCode::kFormat, "record '", name, "' has shape ", shape_string(loaded.shape()),
           ", topology needs ", shape_string(t.shape()));
    }
    t = std::move(loaded);
  });

  Tensor<float> b = detail::as_f32(take("bottleneck/b"));
  switch (p.kind) {
    case BottleneckKind::kDense:
      m.bottleneck = DenseLayer<float>{detail::as_f32(take("bottleneck/w")), std::move(b)};
      break;
    case BottleneckKind::kLowRank: {
      LowRankDense<float> layer;
      if (by_name.count("bottleneck/w")) layer.w = detail::as_f32(take("bottleneck/w"));
      layer.u = detail::as_f32(take("bottleneck/u"));
      layer.v = detail::as_f32(take("bottleneck/v"));
      layer.b = std::move(b);
      layer.lambda = p.lambda;
      layer.validate();
      m.bottleneck = std::move(layer);
      break;
    }
    case BottleneckKind::kInt8Dense:
      m.bottleneck = QuantizedDense<float>{detail::as_i8(take("bottleneck/w")), std::move(b)};
      break;
    case BottleneckKind::kInt8LowRank:
      m.bottleneck = QuantizedLowRank<float>{detail::as_i8(take("bottleneck/u")),
                                             detail::as_i8(take("bottleneck/v")), std::move(b)};
      break;
  }
  if (used != p.records.size()) {
    fail(ErrorCode::kFormat, p.records.size() - used, " record(s) not used by the descriptor");
  }
  if (bottleneck_input_dim(m.bottleneck) != m.pooled_dim() ||
      m.embedding_dim() != static_cast<std::size_t>(p.config.embedding_dim)) {
    fail(ErrorCode::kFormat, "bottleneck shape does not fit the trunk");
  }
  return m;
}

inline void save_model(const StudentModel<float>& m, const std::string& path) {
  const auto bytes = serialize(m);
  std::ofstream out(path, std::ios::binary);
  if (!out) fail(ErrorCode::kIo, "cannot write ", path);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) fail(ErrorCode::kIo, "short write to ", path);
}

inline std::vector<std::uint8_t> read_file_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorCode::kIo, "cannot open ", path);
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), {});
}

inline StudentModel<float> load_model(const std::string& path) {
  return deserialize(read_file_bytes(path));
}

inline std::uintmax_t model_size(const std::string& path) {
  std::error_code ec;
  const auto n = std::filesystem::file_size(path, ec);
  if (ec) fail(ErrorCode::kIo, "cannot stat ", path, ": ", ec.message());
  return n;
}

}  // namespace frill
