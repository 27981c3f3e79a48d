#pragma once

// Little-endian binary helpers, the PAPW1 weight format, PPM images and
// SHA-256 digests shared by the file formats of every module.

#include <algorithm>
#include <array>
#include <cmath>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <openssl/evp.h>

#include "pap/tensor.hpp"

namespace pap {

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace io {

static_assert(std::endian::native == std::endian::little, "binary formats assume a little-endian host");

class Writer {
 public:
  void bytes(const void* p, std::size_t n) {
    const auto* b = static_cast<const char*>(p);
    buf_.insert(buf_.end(), b, b + n);
  }
  void magic(std::string_view m) { bytes(m.data(), m.size()); }
  void u8(std::uint8_t v) { bytes(&v, 1); }
  void u32(std::uint32_t v) { bytes(&v, 4); }
  void f32(float v) { bytes(&v, 4); }
  const std::string& str() const { return buf_; }

 private:
  std::string buf_;
};

class Reader {
 public:
  explicit Reader(std::string data, std::string what) : buf_(std::move(data)), what_(std::move(what)) {}

  bool done() const { return pos_ == buf_.size(); }
  void bytes(void* p, std::size_t n) {
    if (pos_ + n > buf_.size()) throw IoError(what_ + ": truncated");
    std::memcpy(p, buf_.data() + pos_, n);
    pos_ += n;
  }
  void expect_magic(std::string_view m) {
    std::string got(m.size(), '\0');
    bytes(got.data(), got.size());
    if (got != m) throw IoError(what_ + ": bad magic, expected " + std::string(m));
  }
  std::uint8_t u8() { std::uint8_t v; bytes(&v, 1); return v; }
  std::uint32_t u32() { std::uint32_t v; bytes(&v, 4); return v; }
  float f32() { float v; bytes(&v, 4); return v; }
  std::string string(std::size_t n) {
    std::string s(n, '\0');
    bytes(s.data(), n);
    return s;
  }

 private:
  std::string buf_;
  std::string what_;
  std::size_t pos_ = 0;
};

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_file(const std::filesystem::path& path, std::string_view data) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(data.data(), static_cast<std::streamsize>(data.size()));
  if (!out) throw IoError("write failed: " + path.string());
}

inline std::string sha256_hex(std::string_view data) {
  std::array<unsigned char, EVP_MAX_MD_SIZE> md{};
  unsigned int len = 0;
  if (EVP_Digest(data.data(), data.size(), md.data(), &len, EVP_sha256(), nullptr) != 1)
    throw IoError("sha256 failed");
  std::ostringstream os;
  for (unsigned int i = 0; i < len; ++i) os << std::hex << std::setw(2) << std::setfill('0') << int(md[i]);
  return os.str();
}

inline std::string sha256_file(const std::filesystem::path& path) { return sha256_hex(read_file(path)); }

}  // namespace io

// ---------------------------------------------------------------------------
// PAPW1: "PAPW1", then per parameter: u32 name length, UTF-8 name, u32 rank,
// rank x u32 dims, values as f32. Records run to end of file.

template <class T>
using NamedTensors = std::vector<std::pair<std::string, Tensor<T>>>;

template <class T>
std::string encode_weights(const NamedTensors<T>& params) {
  io::Writer w;
  w.magic("PAPW1");
  for (const auto& [name, t] : params) {
    w.u32(static_cast<std::uint32_t>(name.size()));
    w.bytes(name.data(), name.size());
    w.u32(static_cast<std::uint32_t>(t.rank()));
    for (auto d : t.shape()) w.u32(static_cast<std::uint32_t>(d));
    for (T v : t.data()) w.f32(static_cast<float>(v));
  }
  return w.str();
}

template <class T>
NamedTensors<T> decode_weights(std::string bytes) {
  io::Reader r(std::move(bytes), "PAPW1");
  r.expect_magic("PAPW1");
  NamedTensors<T> out;
  while (!r.done()) {
    std::string name = r.string(r.u32());
    Shape shape(r.u32());
    for (auto& d : shape) d = r.u32();
    std::vector<T> values(numel(shape));
    for (auto& v : values) v = static_cast<T>(r.f32());
    out.emplace_back(std::move(name), Tensor<T>(std::move(shape), std::move(values)));
  }
  return out;
}

template <class T>
void save_weights(const std::filesystem::path& path, const NamedTensors<T>& params) {
  io::write_file(path, encode_weights(params));
}

template <class T>
NamedTensors<T> load_weights(const std::filesystem::path& path) {
  return decode_weights<T>(io::read_file(path));
}

// ---------------------------------------------------------------------------
// Binary PPM (P6), 8-bit. Planar [C,H,W] values in [0,1]; C is 1 or 3.

struct Image {
  std::size_t channels = 0, height = 0, width = 0;
  std::vector<float> values;  // planar
};

inline std::string encode_ppm(const Image& img) {
  if (img.channels != 1 && img.channels != 3) throw IoError("PPM needs 1 or 3 channels");
  std::ostringstream os;
  os << "P6\n" << img.width << ' ' << img.height << "\n255\n";
  std::string out = os.str();
  const std::size_t hw = img.height * img.width;
  out.reserve(out.size() + 3 * hw);
  for (std::size_t p = 0; p < hw; ++p)
    for (std::size_t c = 0; c < 3; ++c) {
      const float v = img.values[(img.channels == 1 ? 0 : c) * hw + p];
      out.push_back(static_cast<char>(static_cast<unsigned char>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f))));
    }
  return out;
}

// Decodes to planar RGB, or to one channel when gray is set (channel mean).
inline Image decode_ppm(const std::string& bytes, bool gray) {
  std::istringstream is(bytes);
  std::string magic;
  std::size_t w = 0, h = 0, maxval = 0;
  is >> magic >> w >> h >> maxval;
  if (magic != "P6" || maxval != 255 || !is) throw IoError("unsupported PPM header");
  is.get();
  const auto start = static_cast<std::size_t>(is.tellg());
  if (bytes.size() < start + 3 * w * h) throw IoError("PPM truncated");
  Image img{gray ? 1u : 3u, h, w, {}};
  img.values.assign(img.channels * w * h, 0.0f);
  for (std::size_t p = 0; p < w * h; ++p) {
    float rgb[3];
    for (int c = 0; c < 3; ++c) rgb[c] = static_cast<unsigned char>(bytes[start + 3 * p + c]) / 255.0f;
    if (gray)
      img.values[p] = (rgb[0] == rgb[1] && rgb[1] == rgb[2]) ? rgb[0] : (rgb[0] + rgb[1] + rgb[2]) / 3.0f;
    else
      for (int c = 0; c < 3; ++c) img.values[c * w * h + p] = rgb[c];
  }
  return img;
}

}  // namespace pap
