#pragma once

// Dense row-major matrices, elementwise helpers and a counter-based RNG.
// Every reduction runs in a fixed sequential order so results are
// bit-reproducible across runs.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <numbers>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace plab {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class DimensionError : public Error {
 public:
  using Error::Error;
};

using Vec = std::vector<double>;

class Matrix {
 public:
  Matrix() = default;

  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), values_(rows * cols, fill) {}

  Matrix(std::size_t rows, std::size_t cols, Vec values)
      : rows_(rows), cols_(cols), values_(std::move(values)) {
    if (values_.size() != rows_ * cols_) {
      throw DimensionError("Matrix: " + std::to_string(values_.size()) +
                           " values for shape " + shape_string(rows_, cols_));
    }
  }

  Matrix(std::initializer_list<std::initializer_list<double>> rows) {
    rows_ = rows.size();
    cols_ = rows_ == 0 ? 0 : rows.begin()->size();
    values_.reserve(rows_ * cols_);
    for (const auto& r : rows) {
      if (r.size() != cols_) throw DimensionError("Matrix: ragged initializer");
      values_.insert(values_.end(), r.begin(), r.end());
    }
  }

  static Matrix identity(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
  }

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return values_.size(); }
  bool empty() const noexcept { return values_.empty(); }

  double& operator()(std::size_t r, std::size_t c) { return values_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return values_[r * cols_ + c]; }

  std::span<double> row(std::size_t r) { return {values_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const { return {values_.data() + r * cols_, cols_}; }

  std::span<double> values() noexcept { return values_; }
  std::span<const double> values() const noexcept { return values_; }
  const Vec& storage() const noexcept { return values_; }

  std::string shape() const { return shape_string(rows_, cols_); }

  static std::string shape_string(std::size_t r, std::size_t c) {
    return std::to_string(r) + "x" + std::to_string(c);
  }

  friend bool operator==(const Matrix&, const Matrix&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  Vec values_;
};

namespace detail {

inline void require_same_shape(const Matrix& a, const Matrix& b, const char* what) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw DimensionError(std::string(what) + ": shape mismatch " + a.shape() + " vs " +
                         b.shape());
  }
}

}  // namespace detail

inline Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.rows()) {
    throw DimensionError("matmul: shape mismatch " + a.shape() + " vs " + b.shape());
  }
  Matrix out(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    auto dst = out.row(i);
    for (std::size_t k = 0; k < a.cols(); ++k) {
      const double aik = a(i, k);
      const auto src = b.row(k);
      for (std::size_t j = 0; j < b.cols(); ++j) dst[j] += aik * src[j];
    }
  }
  return out;
}

// a * b^T
inline Matrix matmul_bt(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.cols()) {
    throw DimensionError("matmul_bt: shape mismatch " + a.shape() + " vs " + b.shape());
  }
  Matrix out(a.rows(), b.rows());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    const auto ai = a.row(i);
    for (std::size_t j = 0; j < b.rows(); ++j) {
      const auto bj = b.row(j);
      double s = 0.0;
      for (std::size_t k = 0; k < a.cols(); ++k) s += ai[k] * bj[k];
      out(i, j) = s;
    }
  }
  return out;
}

// a^T * b
inline Matrix matmul_at(const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows()) {
    throw DimensionError("matmul_at: shape mismatch " + a.shape() + " vs " + b.shape());
  }
  Matrix out(a.cols(), b.cols());
  for (std::size_t r = 0; r < a.rows(); ++r) {
    const auto ar = a.row(r);
    const auto br = b.row(r);
    for (std::size_t i = 0; i < a.cols(); ++i) {
      const double ari = ar[i];
      auto dst = out.row(i);
      for (std::size_t j = 0; j < b.cols(); ++j) dst[j] += ari * br[j];
    }
  }
  return out;
}

inline Matrix transpose(const Matrix& a) {
  Matrix out(a.cols(), a.rows());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) out(j, i) = a(i, j);
  return out;
}

inline Matrix operator+(const Matrix& a, const Matrix& b) {
  detail::require_same_shape(a, b, "add");
  Matrix out = a;
  auto o = out.values();
  auto bv = b.values();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] += bv[i];
  return out;
}

inline Matrix operator-(const Matrix& a, const Matrix& b) {
  detail::require_same_shape(a, b, "subtract");
  Matrix out = a;
  auto o = out.values();
  auto bv = b.values();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] -= bv[i];
  return out;
}

inline Matrix operator*(double s, const Matrix& a) {
  Matrix out = a;
  for (double& v : out.values()) v *= s;
  return out;
}

// a + s * b, in place on a.
inline void axpy(Matrix& a, double s, const Matrix& b) {
  detail::require_same_shape(a, b, "axpy");
  auto o = a.values();
  auto bv = b.values();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] += s * bv[i];
}

inline double dot(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) {
    throw DimensionError("dot: length mismatch " + std::to_string(a.size()) + " vs " +
                         std::to_string(b.size()));
  }
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline double norm2(std::span<const double> a) { return std::sqrt(dot(a, a)); }

inline bool all_finite(std::span<const double> a) {
  return std::all_of(a.begin(), a.end(), [](double v) { return std::isfinite(v); });
}

// Row-wise softmax with per-row max subtraction.
inline Matrix softmax_rows(const Matrix& logits) {
  Matrix out(logits.rows(), logits.cols());
  for (std::size_t i = 0; i < logits.rows(); ++i) {
    const auto in = logits.row(i);
    auto dst = out.row(i);
    const double mx = *std::max_element(in.begin(), in.end());
    double z = 0.0;
    for (std::size_t j = 0; j < in.size(); ++j) {
      dst[j] = std::exp(in[j] - mx);
      z += dst[j];
    }
    for (double& v : dst) v /= z;
  }
  return out;
}

inline Matrix clip_box(const Matrix& x, double lo, double hi) {
  if (lo > hi) {
    throw Error("clip_box: empty box [" + std::to_string(lo) + ", " + std::to_string(hi) + "]");
  }
  Matrix out = x;
  for (double& v : out.values()) v = std::clamp(v, lo, hi);
  return out;
}

// Minimizer of 1/2 |u - v|^2 + (eta*beta/2) |u - anchor|^2, i.e.
// (v + eta*beta*anchor) / (1 + eta*beta). Entries already at the anchor are
// returned unchanged.
inline Matrix prox_avg(const Matrix& v, const Matrix& anchor, double eta, double beta) {
  detail::require_same_shape(v, anchor, "prox_avg");
  if (eta < 0.0 || beta < 0.0) throw Error("prox_avg: eta and beta must be non-negative");
  const double c = eta * beta;
  Matrix out = v;
  auto o = out.values();
  auto a = anchor.values();
  for (std::size_t i = 0; i < o.size(); ++i) {
    if (o[i] != a[i]) o[i] = (o[i] + c * a[i]) / (1.0 + c);
  }
  return out;
}

struct Norms {
  double l2 = 0.0;
  double linf = 0.0;
};

inline Norms norms(const Matrix& x) {
  Norms n;
  double ss = 0.0;
  for (double v : x.values()) {
    ss += v * v;
    n.linf = std::max(n.linf, std::abs(v));
  }
  n.l2 = std::sqrt(ss);
  return n;
}

inline Matrix vstack(const Matrix& top, const Matrix& bottom) {
  if (top.empty() && top.cols() == 0) return bottom;
  if (top.cols() != bottom.cols()) {
    throw DimensionError("vstack: shape mismatch " + top.shape() + " vs " + bottom.shape());
  }
  Vec v(top.storage());
  v.insert(v.end(), bottom.storage().begin(), bottom.storage().end());
  return Matrix(top.rows() + bottom.rows(), top.cols(), std::move(v));
}

inline Matrix select_rows(const Matrix& x, std::span<const std::size_t> idx) {
  Matrix out(idx.size(), x.cols());
  for (std::size_t i = 0; i < idx.size(); ++i) {
    const auto src = x.row(idx[i]);
    std::copy(src.begin(), src.end(), out.row(i).begin());
  }
  return out;
}

// ---------------------------------------------------------------------------
// Counter-based splittable RNG. Output k of stream (seed, stream) is a pure
// function of (seed, stream, k), so sequences are platform independent.

namespace detail {

constexpr std::uint64_t mix64(std::uint64_t z) noexcept {
  z += 0x9E3779B97F4A7C15ULL;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

}  // namespace detail

class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0, std::uint64_t stream = 0) noexcept
      : seed_(seed), stream_(stream), key_(make_key(seed, stream)) {}

  std::uint64_t seed() const noexcept { return seed_; }
  std::uint64_t stream() const noexcept { return stream_; }
  std::uint64_t counter() const noexcept { return counter_; }

  std::uint64_t next_u64() noexcept { return detail::mix64(key_ ^ detail::mix64(counter_++)); }

  // Uniform in [0, 1).
  double uniform() noexcept { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) noexcept { return lo + (hi - lo) * uniform(); }

  double gaussian() noexcept {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    const double u1 = 1.0 - uniform();  // (0, 1]
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double th = 2.0 * std::numbers::pi * u2;
    spare_ = r * std::sin(th);
    has_spare_ = true;
    return r * std::cos(th);
  }

  // Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n) {
    if (n == 0) throw Error("Rng::below: empty range");
    const std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % n);
    std::uint64_t v;
    do {
      v = next_u64();
    } while (v >= limit);
    return v % n;
  }

  // Child generator on a fresh stream; the parent advances its split counter only.
  Rng split() noexcept {
    const std::uint64_t child = detail::mix64(stream_ ^ detail::mix64(0xA5A5A5A5ULL + ++splits_));
    return Rng(seed_ ^ detail::mix64(child), child);
  }

  // k distinct indices from [0, n), partial Fisher-Yates.
  std::vector<std::size_t> sample_without_replacement(std::size_t n, std::size_t k) {
    if (k > n) throw Error("sample_without_replacement: k > n");
    std::vector<std::size_t> idx(n);
    for (std::size_t i = 0; i < n; ++i) idx[i] = i;
    for (std::size_t i = 0; i < k; ++i) {
      const std::size_t j = i + static_cast<std::size_t>(below(n - i));
      std::swap(idx[i], idx[j]);
    }
    idx.resize(k);
    return idx;
  }

  std::vector<std::size_t> permutation(std::size_t n) { return sample_without_replacement(n, n); }

 private:
  static std::uint64_t make_key(std::uint64_t seed, std::uint64_t stream) noexcept {
    return detail::mix64(seed ^ detail::mix64(stream ^ 0x6A09E667F3BCC909ULL));
  }

  std::uint64_t seed_;
  std::uint64_t stream_;
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
  std::uint64_t splits_ = 0;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

inline Matrix sample_gaussian(Rng& rng, std::size_t rows, std::size_t cols, double mean,
                              double std) {
  if (std < 0.0) throw Error("sample_gaussian: negative std");
  Matrix out(rows, cols);
  for (double& v : out.values()) v = mean + std * rng.gaussian();
  return out;
}

inline Matrix sample_uniform(Rng& rng, std::size_t rows, std::size_t cols, double lo,
                             double hi) {
  if (lo > hi) throw Error("sample_uniform: lo > hi");
  Matrix out(rows, cols);
  for (double& v : out.values()) v = rng.uniform(lo, hi);
  return out;
}

inline Rng split(Rng& rng) { return rng.split(); }

}  // namespace plab
