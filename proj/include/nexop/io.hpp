#pragma once

// NXT tensor files and binary PGM images.
//
// NXT layout: "NXT1", u32 ndims, u32 dims[ndims], u32 dtype, payload. All
// integers and doubles are little-endian. dtype 0 is f64, dtype 1 is
// interleaved (re, im) f64 pairs; dims count complex elements in that case.

#include <algorithm>
#include <bit>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <span>
#include <string>
#include <vector>

#include "nexop/error.hpp"
#include "nexop/tensor.hpp"

namespace nexop::io {

enum class DType : std::uint32_t { F64 = 0, C64Pair = 1 };

struct NxtArray {
  Shape shape;
  DType dtype = DType::F64;
  std::vector<double> payload;  // interleaved for C64Pair

  Tensor to_tensor() const {
    if (dtype != DType::F64) throw FormatError("expected a real (dtype 0) NXT array");
    return Tensor(shape, payload);
  }

  /// Complex payload as a planar [N,2,H,W] tensor; a rank-2 array is N = 1.
  Tensor to_planar() const {
    if (dtype != DType::C64Pair) throw FormatError("expected a complex (dtype 1) NXT array");
    if (shape.size() < 2) throw FormatError("complex NXT array needs rank >= 2");
    const std::size_t h = shape[shape.size() - 2], w = shape.back(), hw = h * w;
    const std::size_t n = hw == 0 ? 0 : shape_size(shape) / hw;
    Tensor out({n, 2, h, w});
    for (std::size_t k = 0; k < n; ++k)
      for (std::size_t i = 0; i < hw; ++i) {
        out[2 * k * hw + i] = payload[2 * (k * hw + i)];
        out[(2 * k + 1) * hw + i] = payload[2 * (k * hw + i) + 1];
      }
    return out;
  }
};

namespace detail {

inline void put_u32(std::vector<unsigned char>& out, std::uint32_t v) {
  for (int b = 0; b < 4; ++b) out.push_back(static_cast<unsigned char>((v >> (8 * b)) & 0xFFu));
}

inline void put_f64(std::vector<unsigned char>& out, double v) {
  const auto bits = std::bit_cast<std::uint64_t>(v);
  for (int b = 0; b < 8; ++b) out.push_back(static_cast<unsigned char>((bits >> (8 * b)) & 0xFFu));
}

class Reader {
 public:
  Reader(std::span<const unsigned char> bytes, std::string name) : bytes_(bytes), name_(std::move(name)) {}

  std::uint32_t u32(const char* what) {
    need(4, what);
    std::uint32_t v = 0;
    for (int b = 0; b < 4; ++b) v |= static_cast<std::uint32_t>(bytes_[pos_ + b]) << (8 * b);
    pos_ += 4;
    return v;
  }
  double f64(const char* what) {
    need(8, what);
    std::uint64_t v = 0;
    for (int b = 0; b < 8; ++b) v |= static_cast<std::uint64_t>(bytes_[pos_ + b]) << (8 * b);
    pos_ += 8;
    return std::bit_cast<double>(v);
  }
  void need(std::size_t n, const char* what) const {
    if (pos_ + n > bytes_.size())
      throw FormatError(name_ + ": truncated while reading " + what + " at byte offset " + std::to_string(pos_) +
                        " (file has " + std::to_string(bytes_.size()) + " bytes)");
  }
  std::size_t pos() const { return pos_; }
  void skip(std::size_t n) { pos_ += n; }
  std::span<const unsigned char> bytes() const { return bytes_; }

 private:
  std::span<const unsigned char> bytes_;
  std::string name_;
  std::size_t pos_ = 0;
};

inline std::vector<unsigned char> slurp(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  return std::vector<unsigned char>(std::istreambuf_iterator<char>(in), {});
}

inline void dump(const std::filesystem::path& path, const std::vector<unsigned char>& bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

}  // namespace detail

inline std::vector<unsigned char> encode_nxt(const NxtArray& a) {
  const std::size_t expected = shape_size(a.shape) * (a.dtype == DType::C64Pair ? 2 : 1);
  if (a.payload.size() != expected) throw FormatError("NXT payload length does not match its shape");
  std::vector<unsigned char> out{'N', 'X', 'T', '1'};
  detail::put_u32(out, static_cast<std::uint32_t>(a.shape.size()));
  for (std::size_t d : a.shape) detail::put_u32(out, static_cast<std::uint32_t>(d));
  detail::put_u32(out, static_cast<std::uint32_t>(a.dtype));
  out.reserve(out.size() + 8 * a.payload.size());
  for (double v : a.payload) detail::put_f64(out, v);
  return out;
}

inline NxtArray decode_nxt(std::span<const unsigned char> bytes, const std::string& name = "<memory>") {
  detail::Reader r(bytes, name);
  r.need(4, "magic");
  if (std::memcmp(bytes.data(), "NXT1", 4) != 0) throw FormatError(name + ": bad magic, expected NXT1");
  r.skip(4);
  NxtArray a;
  const std::uint32_t ndims = r.u32("ndims");
  if (ndims > 16) throw FormatError(name + ": implausible rank " + std::to_string(ndims));
  for (std::uint32_t i = 0; i < ndims; ++i) a.shape.push_back(r.u32("dims"));
  const std::uint32_t code = r.u32("dtype");
  if (code > 1) throw FormatError(name + ": unknown dtype code " + std::to_string(code));
  a.dtype = static_cast<DType>(code);
  const std::size_t count = shape_size(a.shape) * (a.dtype == DType::C64Pair ? 2 : 1);
  r.need(count * 8, "payload");
  a.payload.resize(count);
  for (std::size_t i = 0; i < count; ++i) a.payload[i] = r.f64("payload");
  if (r.pos() != bytes.size())
    throw FormatError(name + ": " + std::to_string(bytes.size() - r.pos()) + " trailing bytes after payload");
  return a;
}

inline void write_nxt(const std::filesystem::path& path, const Tensor& t) {
  detail::dump(path, encode_nxt(NxtArray{t.shape(), DType::F64, {t.vec().begin(), t.vec().end()}}));
}

/// Writes a planar [N,2,H,W] tensor as a complex N×H×W array (H×W when N = 1).
inline void write_nxt_complex(const std::filesystem::path& path, const Tensor& planar) {
  const std::size_t n = planar.dim(0), h = planar.dim(2), w = planar.dim(3), hw = h * w;
  NxtArray a;
  a.shape = n == 1 ? Shape{h, w} : Shape{n, h, w};
  a.dtype = DType::C64Pair;
  a.payload.resize(2 * n * hw);
  for (std::size_t k = 0; k < n; ++k)
    for (std::size_t i = 0; i < hw; ++i) {
      a.payload[2 * (k * hw + i)] = planar[2 * k * hw + i];
      a.payload[2 * (k * hw + i) + 1] = planar[(2 * k + 1) * hw + i];
    }
  detail::dump(path, encode_nxt(a));
}

inline NxtArray read_nxt(const std::filesystem::path& path) {
  const auto bytes = detail::slurp(path);
  return decode_nxt(bytes, path.string());
}

/// Binary PGM (P5, maxval 255). Values are scaled by 255/max_value and clamped.
inline void write_pgm(const std::filesystem::path& path, const Tensor& img, double max_value = 1.0) {
  if (img.rank() != 2) throw FormatError("PGM needs a rank-2 image");
  const std::string header =
      "P5\n" + std::to_string(img.dim(1)) + " " + std::to_string(img.dim(0)) + "\n255\n";
  std::vector<unsigned char> out(header.begin(), header.end());
  for (double v : img.vec()) {
    const double s = max_value > 0 ? v / max_value : 0.0;
    out.push_back(static_cast<unsigned char>(std::lround(std::clamp(s, 0.0, 1.0) * 255.0)));
  }
  detail::dump(path, out);
}

/// Reads a P5 PGM into [0,1] (value / maxval).
inline Tensor read_pgm(const std::filesystem::path& path) {
  const auto bytes = detail::slurp(path);
  std::size_t pos = 0;
  auto token = [&]() {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(bytes[pos])) {
        ++pos;
      } else {
        break;
      }
    }
    std::string s;
    while (pos < bytes.size() && !std::isspace(bytes[pos])) s.push_back(static_cast<char>(bytes[pos++]));
    return s;
  };
  if (token() != "P5") throw FormatError(path.string() + ": not a binary PGM");
  const std::size_t w = std::stoul(token()), h = std::stoul(token()), maxval = std::stoul(token());
  ++pos;
  if (maxval == 0 || maxval > 255) throw FormatError(path.string() + ": only 8-bit PGM is supported");
  if (pos + w * h > bytes.size()) throw FormatError(path.string() + ": truncated PGM at byte offset " + std::to_string(bytes.size()));
  Tensor out({h, w});
  for (std::size_t i = 0; i < w * h; ++i) out[i] = static_cast<double>(bytes[pos + i]) / static_cast<double>(maxval);
  return out;
}

}  // namespace nexop::io
