#pragma once

// On-disk formats and synthetic data.
//
// Dataset file (little-endian):
//   "PLABDS01" | n:u32 | d:u32 | c:u32 | X: n*d f64 row-major | y: n u32
// Model file (little-endian):
//   "PLABMD01" | layers:u32 | per layer { in:u32 out:u32 W: out*in f64 b: out f64 } | crc32:u32
// The CRC32 covers every byte between the magic and the checksum.

#include <zlib.h>

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "plab/attacks.hpp"
#include "plab/model.hpp"

namespace plab {

class FormatError : public Error {
 public:
  enum class Kind { bad_magic, truncated, checksum, label_range, malformed, io };

  FormatError(Kind kind, const std::string& msg) : Error(msg), kind_(kind) {}
  Kind kind() const noexcept { return kind_; }

 private:
  Kind kind_;
};

inline constexpr std::string_view kDatasetMagic = "PLABDS01";
inline constexpr std::string_view kModelMagic = "PLABMD01";

namespace detail {

class ByteWriter {
 public:
  void raw(std::string_view s) { bytes_.insert(bytes_.end(), s.begin(), s.end()); }

  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) bytes_.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
  }

  void f64(double d) {
    const auto v = std::bit_cast<std::uint64_t>(d);
    for (int i = 0; i < 8; ++i) bytes_.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
  }

  const std::string& bytes() const noexcept { return bytes_; }

 private:
  std::string bytes_;
};

class ByteReader {
 public:
  ByteReader(std::string_view bytes, std::string what) : bytes_(bytes), what_(std::move(what)) {}

  std::string_view raw(std::size_t n) {
    need(n);
    auto s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i)
      v |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    pos_ += 4;
    return v;
  }

  double f64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i)
      v |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    pos_ += 8;
    return std::bit_cast<double>(v);
  }

  std::size_t pos() const noexcept { return pos_; }
  std::size_t remaining() const noexcept { return bytes_.size() - pos_; }

  void need(std::size_t n) const {
    if (remaining() < n) {
      throw FormatError(FormatError::Kind::truncated,
                        what_ + ": truncated file (needed " + std::to_string(n) +
                            " more bytes at offset " + std::to_string(pos_) + ", have " +
                            std::to_string(remaining()) + ")");
    }
  }

 private:
  std::string_view bytes_;
  std::size_t pos_ = 0;
  std::string what_;
};

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError(FormatError::Kind::io, "cannot open '" + path + "': file not found");
  return std::string(std::istreambuf_iterator<char>(in), {});
}

inline void write_file(const std::string& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError(FormatError::Kind::io, "cannot write '" + path + "'");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw FormatError(FormatError::Kind::io, "write failed for '" + path + "'");
}

inline std::uint32_t crc32_of(std::string_view bytes) {
  return static_cast<std::uint32_t>(
      ::crc32(0L, reinterpret_cast<const Bytef*>(bytes.data()), static_cast<uInt>(bytes.size())));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Datasets

inline std::string encode_dataset(const LabeledData& d) {
  validate(d);
  detail::ByteWriter w;
  w.raw(kDatasetMagic);
  w.u32(static_cast<std::uint32_t>(d.size()));
  w.u32(static_cast<std::uint32_t>(d.X.cols()));
  w.u32(static_cast<std::uint32_t>(d.classes));
  for (double v : d.X.values()) w.f64(v);
  for (auto y : d.y) w.u32(y);
  return w.bytes();
}

inline LabeledData decode_dataset(std::string_view bytes, const std::string& what = "dataset") {
  detail::ByteReader r(bytes, what);
  if (bytes.size() < kDatasetMagic.size() || r.raw(kDatasetMagic.size()) != kDatasetMagic) {
    throw FormatError(FormatError::Kind::bad_magic, what + ": bad magic (expected PLABDS01)");
  }
  const std::uint32_t n = r.u32();
  const std::uint32_t d = r.u32();
  const std::uint32_t c = r.u32();
  const std::uint64_t expected = 20 + 8ULL * n * d + 4ULL * n;
  if (bytes.size() < expected) {
    throw FormatError(FormatError::Kind::truncated,
                      what + ": truncated file (" + std::to_string(bytes.size()) +
                          " bytes, header implies " + std::to_string(expected) + ")");
  }
  if (bytes.size() > expected) {
    throw FormatError(FormatError::Kind::malformed,
                      what + ": " + std::to_string(bytes.size() - expected) + " trailing bytes");
  }
  Vec x(static_cast<std::size_t>(n) * d);
  for (double& v : x) v = r.f64();
  LabeledData out{Matrix(n, d, std::move(x)), Labels(n), c};
  for (auto& y : out.y) {
    y = r.u32();
    if (y >= c) {
      throw FormatError(FormatError::Kind::label_range,
                        what + ": label " + std::to_string(y) + " out of range for " +
                            std::to_string(c) + " classes");
    }
  }
  return out;
}

inline void write_dataset(const std::string& path, const LabeledData& d) {
  detail::write_file(path, encode_dataset(d));
}

inline LabeledData read_dataset(const std::string& path) {
  return decode_dataset(detail::read_file(path), path);
}

// Header row x0,...,x{d-1},label; one sample per line.
inline LabeledData parse_csv_dataset(std::string_view text,
                                     std::optional<std::size_t> classes = std::nullopt) {
  std::istringstream in{std::string(text)};
  std::string line;
  if (!std::getline(in, line)) throw FormatError(FormatError::Kind::malformed, "csv: empty input");
  auto split = [](const std::string& s) {
    std::vector<std::string> out;
    std::string cur;
    for (char ch : s) {
      if (ch == ',') {
        out.push_back(cur);
        cur.clear();
      } else if (ch != '\r') {
        cur.push_back(ch);
      }
    }
    out.push_back(cur);
    return out;
  };
  const auto header = split(line);
  if (header.size() < 2 || header.back() != "label") {
    throw FormatError(FormatError::Kind::malformed, "csv: header must end with 'label'");
  }
  const std::size_t d = header.size() - 1;
  for (std::size_t j = 0; j < d; ++j) {
    if (header[j] != "x" + std::to_string(j)) {
      throw FormatError(FormatError::Kind::malformed,
                        "csv: header column " + std::to_string(j) + " must be x" +
                            std::to_string(j));
    }
  }
  Vec x;
  Labels y;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line == "\r") continue;
    const auto cells = split(line);
    if (cells.size() != d + 1) {
      throw FormatError(FormatError::Kind::malformed,
                        "csv: line " + std::to_string(lineno) + " has " +
                            std::to_string(cells.size()) + " fields, expected " +
                            std::to_string(d + 1));
    }
    try {
      for (std::size_t j = 0; j < d; ++j) x.push_back(std::stod(cells[j]));
      const long label = std::stol(cells[d]);
      if (label < 0) throw std::out_of_range("negative");
      y.push_back(static_cast<std::uint32_t>(label));
    } catch (const std::logic_error&) {
      throw FormatError(FormatError::Kind::malformed,
                        "csv: unparsable value on line " + std::to_string(lineno));
    }
  }
  std::size_t c = 0;
  for (auto v : y) c = std::max<std::size_t>(c, v + 1);
  if (classes) {
    for (auto v : y) {
      if (v >= *classes) {
        throw FormatError(FormatError::Kind::label_range,
                          "csv: label " + std::to_string(v) + " out of range for " +
                              std::to_string(*classes) + " classes");
      }
    }
    c = *classes;
  }
  const std::size_t n = y.size();
  return LabeledData{Matrix(n, d, std::move(x)), std::move(y), c};
}

inline LabeledData read_csv_dataset(const std::string& path,
                                    std::optional<std::size_t> classes = std::nullopt) {
  return parse_csv_dataset(detail::read_file(path), classes);
}

// ---------------------------------------------------------------------------
// Models

inline std::string encode_model(const Mlp& m) {
  detail::ByteWriter payload;
  payload.u32(static_cast<std::uint32_t>(m.depth()));
  for (const auto& l : m.layers()) {
    payload.u32(static_cast<std::uint32_t>(l.in_dim()));
    payload.u32(static_cast<std::uint32_t>(l.out_dim()));
    for (double v : l.weight.values()) payload.f64(v);
    for (double v : l.bias) payload.f64(v);
  }
  detail::ByteWriter w;
  w.raw(kModelMagic);
  w.raw(payload.bytes());
  w.u32(detail::crc32_of(payload.bytes()));
  return w.bytes();
}

inline Mlp decode_model(std::string_view bytes, const std::string& what = "model") {
  detail::ByteReader r(bytes, what);
  if (bytes.size() < kModelMagic.size() || r.raw(kModelMagic.size()) != kModelMagic) {
    throw FormatError(FormatError::Kind::bad_magic, what + ": bad magic (expected PLABMD01)");
  }
  const std::uint32_t count = r.u32();
  if (count == 0) throw FormatError(FormatError::Kind::malformed, what + ": zero layers");
  std::vector<Dense> layers;
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::uint32_t in = r.u32();
    const std::uint32_t out = r.u32();
    r.need(8ULL * (static_cast<std::uint64_t>(in) * out + out));
    Vec w(static_cast<std::size_t>(in) * out);
    for (double& v : w) v = r.f64();
    Vec b(out);
    for (double& v : b) v = r.f64();
    layers.push_back(Dense{Matrix(out, in, std::move(w)), std::move(b)});
  }
  const std::size_t payload_end = r.pos();
  const std::uint32_t stored = r.u32();
  if (r.remaining() != 0) {
    throw FormatError(FormatError::Kind::malformed,
                      what + ": " + std::to_string(r.remaining()) + " trailing bytes");
  }
  const auto payload = bytes.substr(kModelMagic.size(), payload_end - kModelMagic.size());
  if (detail::crc32_of(payload) != stored) {
    throw FormatError(FormatError::Kind::checksum, what + ": checksum mismatch");
  }
  try {
    return Mlp(std::move(layers), true);
  } catch (const DimensionError& e) {
    throw FormatError(FormatError::Kind::malformed, what + ": " + e.what());
  }
}

inline void write_model(const std::string& path, const Mlp& m) {
  detail::write_file(path, encode_model(m));
}

inline Mlp read_model(const std::string& path) { return decode_model(detail::read_file(path), path); }

// A head is stored as a single-layer model.
inline Mlp head_as_model(const LinearHead& h) { return Mlp({Dense{h.W, h.b}}, true); }

inline LinearHead model_as_head(const Mlp& m) {
  if (m.depth() != 1) {
    throw FormatError(FormatError::Kind::malformed,
                      "expected a single-layer head model, got " + std::to_string(m.depth()) +
                          " layers");
  }
  return LinearHead(m.layers()[0].weight, m.layers()[0].bias);
}

inline void write_head(const std::string& path, const LinearHead& h) {
  write_model(path, head_as_model(h));
}

inline LinearHead read_head(const std::string& path) { return model_as_head(read_model(path)); }

// ---------------------------------------------------------------------------
// Synthetic data

struct BlobSpec {
  std::size_t n = 600;
  std::size_t d = 8;
  std::size_t classes = 3;
  double separation = 3.0;
  double std = 1.0;
  Box box{-5.0, 5.0};

  friend bool operator==(const BlobSpec&, const BlobSpec&) = default;
};

// Class means at pairwise distance `separation` (scaled basis vectors when
// classes <= d, random directions otherwise); labels cycle 0..c-1.
inline LabeledData gen_blobs(Rng& rng, const BlobSpec& spec) {
  if (spec.classes < 2) throw Error("gen_blobs: need at least 2 classes");
  if (spec.separation < 0.0) throw Error("gen_blobs: separation must be >= 0");
  if (spec.box.lo > spec.box.hi) throw Error("gen_blobs: empty box");
  Matrix means(spec.classes, spec.d);
  if (spec.classes <= spec.d) {
    for (std::size_t k = 0; k < spec.classes; ++k) means(k, k) = spec.separation / std::sqrt(2.0);
  } else {
    for (std::size_t k = 0; k < spec.classes; ++k) {
      auto row = means.row(k);
      for (double& v : row) v = rng.gaussian();
      const double nrm = norm2(row);
      for (double& v : row) v *= spec.separation / (std::sqrt(2.0) * (nrm > 0 ? nrm : 1.0));
    }
  }
  LabeledData out{Matrix(spec.n, spec.d), Labels(spec.n), spec.classes};
  for (std::size_t i = 0; i < spec.n; ++i) {
    const auto k = static_cast<std::uint32_t>(i % spec.classes);
    out.y[i] = k;
    auto row = out.X.row(i);
    for (std::size_t j = 0; j < spec.d; ++j) {
      row[j] = std::clamp(means(k, j) + spec.std * rng.gaussian(), spec.box.lo, spec.box.hi);
    }
  }
  return out;
}

inline LabeledData gen_blobs(Rng& rng, std::size_t n, std::size_t d, std::size_t c,
                             double separation, Box box) {
  BlobSpec spec;
  spec.n = n;
  spec.d = d;
  spec.classes = c;
  spec.separation = separation;
  spec.box = box;
  return gen_blobs(rng, spec);
}

}  // namespace plab
