#pragma once

// Flat checkpoint files of named float32 records.
//
// Layout (all integers little-endian):
//
//   magic    4 bytes  "DSAT"
//   version  1 byte   0x01
//   records  until end of file, each:
//     name_len  u32
//     name      name_len bytes, UTF-8, no terminator
//     rank      u32
//     extents   rank x u64
//     values    product(extents) x IEEE-754 binary32
//
// Records keep the order they were written in. Names are unique per file.

#include <bit>
#include <cstdint>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "dsat/layers.hpp"
#include "dsat/tensor.hpp"

namespace dsat {

inline constexpr char kCheckpointMagic[4] = {'D', 'S', 'A', 'T'};
inline constexpr std::uint8_t kCheckpointVersion = 1;

struct Record {
  std::string name;
  Shape shape;
  std::vector<float> values;
};

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}
inline void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

class ByteReader {
 public:
  ByteReader(const std::string& bytes, std::string path) : bytes_(bytes), path_(std::move(path)) {}

  bool done() const { return pos_ == bytes_.size(); }

  std::uint64_t uint(int width) {
    need(static_cast<std::size_t>(width));
    std::uint64_t v = 0;
    for (int i = 0; i < width; ++i)
      v |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    pos_ += static_cast<std::size_t>(width);
    return v;
  }
  std::string string(std::size_t n) {
    need(n);
    auto s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > bytes_.size()) throw DataError(path_ + ": truncated checkpoint");
  }
  const std::string& bytes_;
  std::string path_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::string encode_checkpoint(const std::vector<Record>& records) {
  std::string out(kCheckpointMagic, 4);
  out.push_back(static_cast<char>(kCheckpointVersion));
  for (const auto& r : records) {
    if (numel(r.shape) != static_cast<std::int64_t>(r.values.size()))
      throw DimensionError("checkpoint record " + r.name + " has inconsistent shape");
    detail::put_u32(out, static_cast<std::uint32_t>(r.name.size()));
    out += r.name;
    detail::put_u32(out, static_cast<std::uint32_t>(r.shape.size()));
    for (auto e : r.shape) detail::put_u64(out, static_cast<std::uint64_t>(e));
    for (float v : r.values) detail::put_u32(out, std::bit_cast<std::uint32_t>(v));
  }
  return out;
}

inline std::vector<Record> decode_checkpoint(const std::string& bytes, const std::string& path = "<memory>") {
  if (bytes.size() < 5 || bytes.compare(0, 4, kCheckpointMagic, 4) != 0)
    throw DataError(path + ": not a checkpoint (bad magic)");
  if (static_cast<std::uint8_t>(bytes[4]) != kCheckpointVersion)
    throw DataError(path + ": unsupported checkpoint version " +
                    std::to_string(static_cast<int>(static_cast<std::uint8_t>(bytes[4]))));
  detail::ByteReader in(bytes, path);
  in.string(5);
  std::vector<Record> records;
  while (!in.done()) {
    Record r;
    r.name = in.string(static_cast<std::size_t>(in.uint(4)));
    const auto rank = in.uint(4);
    for (std::uint64_t i = 0; i < rank; ++i) r.shape.push_back(static_cast<std::int64_t>(in.uint(8)));
    const auto n = numel(r.shape);
    if (n < 0 || n > (std::int64_t{1} << 34)) throw DataError(path + ": implausible record size");
    r.values.resize(static_cast<std::size_t>(n));
    for (auto& v : r.values) v = std::bit_cast<float>(static_cast<std::uint32_t>(in.uint(4)));
    records.push_back(std::move(r));
  }
  return records;
}

inline void write_checkpoint(const std::string& path, const std::vector<Record>& records) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError(path + ": cannot open for writing");
  const auto bytes = encode_checkpoint(records);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw DataError(path + ": write failed");
}

inline std::vector<Record> read_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError(path + ": cannot open checkpoint");
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_checkpoint(bytes, path);
}

template <class T>
Record to_record(const std::string& name, const Tensor<T>& t) {
  return {name, t.shape(), std::vector<float>(t.data().begin(), t.data().end())};
}

template <class T>
void append_records(std::vector<Record>& out, const ParamList<T>& params, const std::string& prefix = "") {
  for (const auto& p : params.items()) out.push_back(to_record(prefix + p.name, p.tensor));
}

using RecordIndex = std::map<std::string, const Record*>;

inline RecordIndex index_records(const std::vector<Record>& records) {
  RecordIndex idx;
  for (const auto& r : records) idx[r.name] = &r;
  return idx;
}

/// Copies matching records into the parameters; every parameter must be present.
template <class T>
void load_records(ParamList<T>& params, const RecordIndex& idx, const std::string& prefix = "") {
  for (auto& p : params.items()) {
    auto it = idx.find(prefix + p.name);
    if (it == idx.end()) throw DataError("checkpoint is missing parameter " + prefix + p.name);
    const Record& r = *it->second;
    if (r.shape != p.tensor.shape())
      throw DataError("checkpoint parameter " + r.name + " has shape " + to_string(r.shape) +
                      ", expected " + to_string(p.tensor.shape()));
    auto dst = p.tensor.mutable_data();
    std::copy(r.values.begin(), r.values.end(), dst.begin());
  }
}

inline double record_scalar(const RecordIndex& idx, const std::string& name) {
  auto it = idx.find(name);
  if (it == idx.end() || it->second->values.size() != 1)
    throw DataError("checkpoint is missing scalar " + name);
  return it->second->values[0];
}

inline Record scalar_record(const std::string& name, double v) {
  return {name, {1}, {static_cast<float>(v)}};
}

}  // namespace dsat
