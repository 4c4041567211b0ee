#pragma once

// Shared numeric types, random streams and little-endian binary helpers.

#include <Eigen/Dense>

#include <algorithm>
#include <array>
#include <bit>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <istream>
#include <ostream>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "gfr/error.hpp"

namespace gfr {

template <typename S>
using Mat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic>;
template <typename S>
using RowMat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename S>
using Vec = Eigen::Matrix<S, Eigen::Dynamic, 1>;

using Labels = std::vector<int>;

/// Batch of images or feature maps, NCHW. Each sample is one contiguous row.
template <typename S>
struct Tensor {
  int c = 0;
  int h = 1;
  int w = 1;
  RowMat<S> data;

  Tensor() = default;
  Tensor(int n, int channels, int height, int width)
      : c(channels), h(height), w(width), data(RowMat<S>::Zero(n, channels * height * width)) {}

  static Tensor from_matrix(const Mat<S>& m) {
    Tensor t;
    t.c = static_cast<int>(m.cols());
    t.data = m;
    return t;
  }

  [[nodiscard]] int n() const { return static_cast<int>(data.rows()); }
  [[nodiscard]] int plane() const { return h * w; }
  [[nodiscard]] int sample_size() const { return c * h * w; }
  [[nodiscard]] bool same_shape(const Tensor& o) const {
    return c == o.c && h == o.h && w == o.w && n() == o.n();
  }

  S* sample(int i) { return data.data() + static_cast<std::ptrdiff_t>(i) * sample_size(); }
  const S* sample(int i) const { return data.data() + static_cast<std::ptrdiff_t>(i) * sample_size(); }

  /// Flattened n × (c·h·w) view as a column-major matrix.
  [[nodiscard]] Mat<S> flat() const { return data; }

  [[nodiscard]] std::string shape_string() const {
    return std::to_string(n()) + "x" + std::to_string(c) + "x" + std::to_string(h) + "x" + std::to_string(w);
  }
};

/// Concatenate along the batch dimension.
template <typename S>
Tensor<S> concat_batch(const Tensor<S>& a, const Tensor<S>& b) {
  if (a.n() == 0) return b;
  if (b.n() == 0) return a;
  if (a.c != b.c || a.h != b.h || a.w != b.w) {
    throw InputError("concat_batch: shape mismatch " + a.shape_string() + " vs " + b.shape_string());
  }
  Tensor<S> out(a.n() + b.n(), a.c, a.h, a.w);
  out.data.topRows(a.n()) = a.data;
  out.data.bottomRows(b.n()) = b.data;
  return out;
}

template <typename S>
Tensor<S> slice_batch(const Tensor<S>& t, int begin, int count) {
  Tensor<S> out(count, t.c, t.h, t.w);
  out.data = t.data.middleRows(begin, count);
  return out;
}

using Rng = std::mt19937_64;

/// Derive an independent stream seed from a base seed and a tag tuple (splitmix64 mixing).
inline std::uint64_t derive_seed(std::uint64_t base, std::uint64_t a, std::uint64_t b = 0) {
  auto mix = [](std::uint64_t z) {
    z += 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  };
  return mix(mix(mix(base) ^ a) ^ (b * 0x2545f4914f6cdd1dULL));
}

template <typename S>
S standard_normal(Rng& rng) {
  std::normal_distribution<double> nd(0.0, 1.0);
  return static_cast<S>(nd(rng));
}

template <typename S>
S uniform(Rng& rng, double lo, double hi) {
  std::uniform_real_distribution<double> ud(lo, hi);
  return static_cast<S>(ud(rng));
}

inline int uniform_int(Rng& rng, int lo, int hi_inclusive) {
  std::uniform_int_distribution<int> ud(lo, hi_inclusive);
  return ud(rng);
}

template <typename S>
Mat<S> normal_matrix(int rows, int cols, Rng& rng) {
  Mat<S> m(rows, cols);
  // fill row by row so the draw order does not depend on storage order
  for (int i = 0; i < rows; ++i)
    for (int j = 0; j < cols; ++j) m(i, j) = standard_normal<S>(rng);
  return m;
}

/// Fan-in scaled uniform initialization, U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
template <typename S>
void fan_in_uniform(std::span<S> values, int fan_in, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  for (auto& v : values) v = uniform<S>(rng, -bound, bound);
}

/// Shortest round-trip decimal rendering.
inline std::string format_number(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

namespace binio {

static_assert(std::endian::native == std::endian::little || std::endian::native == std::endian::big);

template <typename T>
T byteswap_if_big(T v) {
  if constexpr (std::endian::native == std::endian::big) {
    auto bytes = std::bit_cast<std::array<unsigned char, sizeof(T)>>(v);
    std::reverse(bytes.begin(), bytes.end());
    return std::bit_cast<T>(bytes);
  } else {
    return v;
  }
}

inline void write_u32(std::ostream& os, std::uint32_t v) {
  v = byteswap_if_big(v);
  os.write(reinterpret_cast<const char*>(&v), sizeof(v));
}

inline void write_f32(std::ostream& os, float v) {
  auto bits = byteswap_if_big(std::bit_cast<std::uint32_t>(v));
  os.write(reinterpret_cast<const char*>(&bits), sizeof(bits));
}

inline std::uint32_t read_u32(std::istream& is) {
  std::uint32_t v = 0;
  is.read(reinterpret_cast<char*>(&v), sizeof(v));
  if (!is) throw IoError("unexpected end of binary stream");
  return byteswap_if_big(v);
}

inline float read_f32(std::istream& is) {
  return std::bit_cast<float>(read_u32(is));
}

}  // namespace binio

}  // namespace gfr
