#pragma once

// Binary weight files.
//
//   "KOAW" | u32 version | u32 count | count x entry
//   entry: u32 name_len | name | u8 dtype | u32 rank | rank x u64 dim | payload
//
// All integers and payload scalars are little-endian.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "koa/errors.hpp"
#include "koa/model.hpp"
#include "koa/tensor.hpp"

namespace koa {

inline constexpr char kWeightMagic[4] = {'K', 'O', 'A', 'W'};
inline constexpr std::uint32_t kWeightVersion = 1;

namespace detail {

template <typename U>
void put_le(std::vector<unsigned char>& out, U v) {
  for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<unsigned char>((static_cast<std::uint64_t>(v) >> (8 * i)) & 0xff));
}

template <typename T>
void put_scalars(std::vector<unsigned char>& out, std::span<const T> values) {
  using Bits = std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>;
  for (T v : values) put_le(out, std::bit_cast<Bits>(v));
}

class ByteReader {
 public:
  explicit ByteReader(std::span<const unsigned char> bytes) : bytes_(bytes) {}

  void need(std::size_t n, const std::string& what) const {
    if (bytes_.size() - pos_ < n)
      throw WeightFileError(WeightFileError::Kind::Truncated, "weight file truncated while reading " + what);
  }

  template <typename U>
  U get(const std::string& what) {
    need(sizeof(U), what);
    std::uint64_t v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<std::uint64_t>(bytes_[pos_ + i]) << (8 * i);
    pos_ += sizeof(U);
    return static_cast<U>(v);
  }

  std::span<const unsigned char> take(std::size_t n, const std::string& what) {
    need(n, what);
    auto s = bytes_.subspan(pos_, n);
    pos_ += n;
    return s;
  }

  std::size_t remaining() const { return bytes_.size() - pos_; }

 private:
  std::span<const unsigned char> bytes_;
  std::size_t pos_ = 0;
};

struct RawEntry {
  std::string name;
  std::uint8_t dtype = 0;
  Shape shape;
  std::span<const unsigned char> payload;
};

inline std::size_t dtype_size(std::uint8_t code) { return code == static_cast<std::uint8_t>(DType::F32) ? 4 : 8; }

inline std::vector<RawEntry> parse_weight_bytes(std::span<const unsigned char> bytes) {
  ByteReader in(bytes);
  if (bytes.size() >= 4 && std::memcmp(bytes.data(), kWeightMagic, 4) != 0)
    throw WeightFileError(WeightFileError::Kind::BadMagic, "not a weight file (bad magic)");
  in.take(4, "magic");
  const auto version = in.get<std::uint32_t>("version");
  if (version != kWeightVersion)
    throw WeightFileError(WeightFileError::Kind::BadVersion,
                          "unsupported weight file version " + std::to_string(version));
  const auto count = in.get<std::uint32_t>("entry count");
  std::vector<RawEntry> entries;
  std::set<std::string> names;
  for (std::uint32_t e = 0; e < count; ++e) {
    const std::string where = "entry " + std::to_string(e);
    RawEntry r;
    const auto len = in.get<std::uint32_t>(where + " name length");
    auto name = in.take(len, where + " name");
    r.name.assign(name.begin(), name.end());
    r.dtype = in.get<std::uint8_t>(where + " dtype");
    if (r.dtype != static_cast<std::uint8_t>(DType::F32) && r.dtype != static_cast<std::uint8_t>(DType::F64))
      throw WeightFileError(WeightFileError::Kind::DtypeMismatch,
                            "tensor '" + r.name + "' has unknown dtype code " + std::to_string(r.dtype));
    const auto rank = in.get<std::uint32_t>(where + " rank");
    in.need(std::size_t{rank} * 8, where + " dims");
    std::size_t elems = 1;
    for (std::uint32_t d = 0; d < rank; ++d) {
      const auto dim = in.get<std::uint64_t>(where + " dims");
      r.shape.push_back(static_cast<std::size_t>(dim));
      elems *= static_cast<std::size_t>(dim);
    }
    r.payload = in.take(elems * dtype_size(r.dtype), "payload of '" + r.name + "'");
    if (!names.insert(r.name).second)
      throw WeightFileError(WeightFileError::Kind::ShapeMismatch, "duplicate tensor '" + r.name + "' in weight file");
    entries.push_back(std::move(r));
  }
  if (in.remaining() != 0)
    throw WeightFileError(WeightFileError::Kind::Truncated,
                          "weight file has " + std::to_string(in.remaining()) + " unexpected trailing bytes");
  return entries;
}

}  // namespace detail

template <std::floating_point T>
std::vector<unsigned char> serialize_weights(const ModelGraph<T>& model) {
  std::vector<unsigned char> out(std::begin(kWeightMagic), std::end(kWeightMagic));
  const auto all = model.state();
  detail::put_le(out, kWeightVersion);
  detail::put_le(out, static_cast<std::uint32_t>(all.size()));
  for (const auto& [name, t] : all) {
    detail::put_le(out, static_cast<std::uint32_t>(name.size()));
    out.insert(out.end(), name.begin(), name.end());
    detail::put_le(out, static_cast<std::uint8_t>(dtype_of<T>()));
    detail::put_le(out, static_cast<std::uint32_t>(t->rank()));
    for (auto d : t->shape()) detail::put_le(out, static_cast<std::uint64_t>(d));
    detail::put_scalars<T>(out, t->data());
  }
  return out;
}

// Validates the whole file against the model (entry order, names, dtypes,
// shapes) before touching any tensor; a failure leaves the model intact.
template <std::floating_point T>
void deserialize_weights(ModelGraph<T>& model, std::span<const unsigned char> bytes) {
  const auto entries = detail::parse_weight_bytes(bytes);
  const auto all = model.state();
  const std::size_t n = std::min(entries.size(), all.size());
  for (std::size_t i = 0; i < n; ++i) {
    const auto& e = entries[i];
    const auto& [name, t] = all[i];
    if (e.name != name || e.shape != t->shape())
      throw WeightFileError(WeightFileError::Kind::ShapeMismatch,
                            "tensor " + std::to_string(i) + ": file has '" + e.name + "' " + shape_string(e.shape) +
                                ", model '" + model.arch + "' expects '" + name + "' " + shape_string(t->shape()));
    if (e.dtype != static_cast<std::uint8_t>(dtype_of<T>()))
      throw WeightFileError(WeightFileError::Kind::DtypeMismatch,
                            "tensor '" + e.name + "' is stored as " + (e.dtype == 1 ? "f32" : "f64") +
                                " but the model uses " + (dtype_of<T>() == DType::F32 ? "f32" : "f64"));
  }
  if (entries.size() != all.size()) {
    const std::string first = entries.size() > all.size() ? "unexpected '" + entries[n].name + "'"
                                                          : "missing '" + all[n].name + "'";
    throw WeightFileError(WeightFileError::Kind::ShapeMismatch,
                          "weight file has " + std::to_string(entries.size()) + " tensors, model '" + model.arch +
                              "' has " + std::to_string(all.size()) + " (first difference: " + first + ")");
  }
  using Bits = std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>;
  for (std::size_t i = 0; i < all.size(); ++i) {
    auto dst = all[i].tensor->data();
    const auto& src = entries[i].payload;
    for (std::size_t j = 0; j < dst.size(); ++j) {
      Bits b = 0;
      for (std::size_t k = 0; k < sizeof(T); ++k) b |= static_cast<Bits>(src[j * sizeof(T) + k]) << (8 * k);
      dst[j] = std::bit_cast<T>(b);
    }
  }
}

template <std::floating_point T>
void save_weights(const ModelGraph<T>& model, const std::filesystem::path& path) {
  const auto bytes = serialize_weights(model);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw WeightFileError(WeightFileError::Kind::Io, "cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw WeightFileError(WeightFileError::Kind::Io, "failed writing " + path.string());
}

template <std::floating_point T>
void load_weights(ModelGraph<T>& model, const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw WeightFileError(WeightFileError::Kind::Io, "cannot open " + path.string());
  const std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  deserialize_weights(model, bytes);
}

}  // namespace koa
