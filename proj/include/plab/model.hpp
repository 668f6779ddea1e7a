#pragma once

// Frozen MLP feature extractor, softmax linear head, cross-entropy loss and
// the analytic derivatives the attacks are built from.
//
// Head parameters flatten as W (row-major, c x p) followed by b (length c).
// All losses are means over the supplied samples.

#include <algorithm>
#include <cstdint>
#include <span>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

#include "plab/numkit.hpp"

namespace plab {

using Labels = std::vector<std::uint32_t>;

struct LabeledData {
  Matrix X;
  Labels y;
  std::size_t classes = 0;

  std::size_t size() const noexcept { return y.size(); }
  friend bool operator==(const LabeledData&, const LabeledData&) = default;
};

struct FeatureData {
  Matrix Z;
  Labels y;
  std::size_t classes = 0;

  std::size_t size() const noexcept { return y.size(); }
  friend bool operator==(const FeatureData&, const FeatureData&) = default;
};

namespace detail {

template <typename Data>
void check_labels(const Data& d, const Matrix& m, const char* what) {
  if (m.rows() != d.y.size()) {
    throw DimensionError(std::string(what) + ": " + std::to_string(m.rows()) + " rows but " +
                         std::to_string(d.y.size()) + " labels");
  }
  for (auto label : d.y) {
    if (label >= d.classes) {
      throw Error(std::string(what) + ": label " + std::to_string(label) +
                  " out of range for " + std::to_string(d.classes) + " classes");
    }
  }
}

}  // namespace detail

inline void validate(const LabeledData& d) { detail::check_labels(d, d.X, "LabeledData"); }
inline void validate(const FeatureData& d) { detail::check_labels(d, d.Z, "FeatureData"); }

inline LabeledData concat(const LabeledData& a, const LabeledData& b) {
  LabeledData out{vstack(a.X, b.X), a.y, std::max(a.classes, b.classes)};
  out.y.insert(out.y.end(), b.y.begin(), b.y.end());
  return out;
}

inline FeatureData concat(const FeatureData& a, const FeatureData& b) {
  FeatureData out{vstack(a.Z, b.Z), a.y, std::max(a.classes, b.classes)};
  out.y.insert(out.y.end(), b.y.begin(), b.y.end());
  return out;
}

template <typename Data>
Data subset(const Data& d, std::span<const std::size_t> idx) {
  Data out;
  if constexpr (std::is_same_v<Data, LabeledData>) {
    out.X = select_rows(d.X, idx);
  } else {
    out.Z = select_rows(d.Z, idx);
  }
  out.classes = d.classes;
  out.y.reserve(idx.size());
  for (auto i : idx) out.y.push_back(d.y[i]);
  return out;
}

// ---------------------------------------------------------------------------

struct Dense {
  Matrix weight;  // out x in
  Vec bias;       // out

  std::size_t in_dim() const noexcept { return weight.cols(); }
  std::size_t out_dim() const noexcept { return weight.rows(); }

  friend bool operator==(const Dense&, const Dense&) = default;
};

// Forward activations retained for reverse mode.
struct MlpTrace {
  std::vector<Matrix> inputs;  // input to each layer
  std::vector<Matrix> pre;     // pre-activation of each layer
  Matrix output;
};

struct MlpGrad {
  std::vector<Dense> layers;
  Matrix input;
};

// Multilayer perceptron with ReLU hidden activations and identity output.
class Mlp {
 public:
  Mlp() = default;

  explicit Mlp(std::vector<Dense> layers, bool frozen = false)
      : layers_(std::move(layers)), frozen_(frozen) {
    if (layers_.empty()) throw Error("Mlp: at least one layer required");
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      const auto& l = layers_[i];
      if (l.bias.size() != l.out_dim()) {
        throw DimensionError("Mlp: layer " + std::to_string(i) + " bias length " +
                             std::to_string(l.bias.size()) + " vs weight " + l.weight.shape());
      }
      if (i > 0 && l.in_dim() != layers_[i - 1].out_dim()) {
        throw DimensionError("Mlp: layer " + std::to_string(i) + " expects input " +
                             std::to_string(l.in_dim()) + " but previous layer emits " +
                             std::to_string(layers_[i - 1].out_dim()));
      }
    }
  }

  // Seeded uniform init in [-1/sqrt(fan_in), 1/sqrt(fan_in)].
  static Mlp random(std::span<const std::size_t> dims, Rng& rng) {
    if (dims.size() < 2) throw Error("Mlp::random: need at least input and output dims");
    std::vector<Dense> layers;
    for (std::size_t i = 1; i < dims.size(); ++i) {
      const double bound = 1.0 / std::sqrt(static_cast<double>(dims[i - 1]));
      Dense l{sample_uniform(rng, dims[i], dims[i - 1], -bound, bound), Vec(dims[i])};
      for (double& b : l.bias) b = rng.uniform(-bound, bound);
      layers.push_back(std::move(l));
    }
    return Mlp(std::move(layers));
  }

  static Mlp identity(std::size_t d) {
    return Mlp({Dense{Matrix::identity(d), Vec(d, 0.0)}}, true);
  }

  std::size_t in_dim() const { return layers_.front().in_dim(); }
  std::size_t out_dim() const { return layers_.back().out_dim(); }
  std::size_t depth() const noexcept { return layers_.size(); }
  const std::vector<Dense>& layers() const noexcept { return layers_; }
  std::vector<Dense>& mutable_layers() {
    if (frozen_) throw Error("Mlp: weights are frozen");
    return layers_;
  }
  bool frozen() const noexcept { return frozen_; }
  Mlp frozen_copy() const { return Mlp(layers_, true); }
  Mlp trainable_copy() const { return Mlp(layers_, false); }

  Matrix forward(const Matrix& x) const { return trace(x).output; }

  MlpTrace trace(const Matrix& x) const {
    if (x.cols() != in_dim()) {
      throw DimensionError("encode: input " + x.shape() + " vs encoder input dim " +
                           std::to_string(in_dim()));
    }
    MlpTrace t;
    Matrix h = x;
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      const auto& l = layers_[i];
      Matrix a = matmul_bt(h, l.weight);
      for (std::size_t r = 0; r < a.rows(); ++r) {
        auto row = a.row(r);
        for (std::size_t j = 0; j < row.size(); ++j) row[j] += l.bias[j];
      }
      t.inputs.push_back(std::move(h));
      h = a;
      if (i + 1 < layers_.size()) {
        for (double& v : h.values()) v = v > 0.0 ? v : 0.0;
      }
      t.pre.push_back(std::move(a));
    }
    t.output = std::move(h);
    return t;
  }

  // Reverse mode from d(loss)/d(output). ReLU'(0) is taken as 0.
  MlpGrad backward(const MlpTrace& t, const Matrix& d_out, bool want_params) const {
    if (d_out.rows() != t.output.rows() || d_out.cols() != t.output.cols()) {
      throw DimensionError("Mlp::backward: gradient " + d_out.shape() + " vs output " +
                           t.output.shape());
    }
    MlpGrad g;
    if (want_params) g.layers.resize(layers_.size());
    Matrix delta = d_out;
    for (std::size_t i = layers_.size(); i-- > 0;) {
      if (i + 1 < layers_.size()) {
        const auto pre = t.pre[i].values();
        auto dv = delta.values();
        for (std::size_t k = 0; k < dv.size(); ++k)
          if (!(pre[k] > 0.0)) dv[k] = 0.0;
      }
      if (want_params) {
        g.layers[i].weight = matmul_at(delta, t.inputs[i]);
        g.layers[i].bias.assign(delta.cols(), 0.0);
        for (std::size_t r = 0; r < delta.rows(); ++r) {
          const auto row = delta.row(r);
          for (std::size_t j = 0; j < row.size(); ++j) g.layers[i].bias[j] += row[j];
        }
      }
      delta = matmul(delta, layers_[i].weight);
    }
    g.input = std::move(delta);
    return g;
  }

  friend bool operator==(const Mlp&, const Mlp&) = default;

 private:
  std::vector<Dense> layers_;
  bool frozen_ = false;
};

using Encoder = Mlp;
using Decoder = Mlp;

inline Matrix encode(const Encoder& f, const Matrix& x) { return f.forward(x); }

inline FeatureData encode(const Encoder& f, const LabeledData& d) {
  return FeatureData{f.forward(d.X), d.y, d.classes};
}

// ---------------------------------------------------------------------------

struct LinearHead {
  Matrix W;  // c x p
  Vec b;     // c

  LinearHead() = default;
  LinearHead(Matrix w, Vec bias) : W(std::move(w)), b(std::move(bias)) {
    if (b.size() != W.rows()) {
      throw DimensionError("LinearHead: W " + W.shape() + " vs b length " +
                           std::to_string(b.size()));
    }
    if (W.rows() < 2) throw Error("LinearHead: need at least 2 classes");
  }

  static LinearHead zeros(std::size_t classes, std::size_t features) {
    return LinearHead(Matrix(classes, features), Vec(classes, 0.0));
  }

  std::size_t classes() const noexcept { return W.rows(); }
  std::size_t features() const noexcept { return W.cols(); }
  std::size_t param_count() const noexcept { return W.size() + b.size(); }

  Vec flatten() const {
    Vec v(W.storage());
    v.insert(v.end(), b.begin(), b.end());
    return v;
  }

  static LinearHead unflatten(std::size_t classes, std::size_t features,
                              std::span<const double> flat) {
    if (flat.size() != classes * (features + 1)) {
      throw DimensionError("LinearHead::unflatten: " + std::to_string(flat.size()) +
                           " values for " + std::to_string(classes) + " classes x " +
                           std::to_string(features) + " features");
    }
    const auto split = flat.begin() + static_cast<std::ptrdiff_t>(classes * features);
    return LinearHead(Matrix(classes, features, Vec(flat.begin(), split)), Vec(split, flat.end()));
  }

  friend bool operator==(const LinearHead&, const LinearHead&) = default;
};

struct HeadGrad {
  Matrix dW;
  Vec db;

  Vec flatten() const {
    Vec v(dW.storage());
    v.insert(v.end(), db.begin(), db.end());
    return v;
  }
};

namespace detail {

inline void check_head(const LinearHead& h, const FeatureData& d, const char* what) {
  if (d.Z.cols() != h.features()) {
    throw DimensionError(std::string(what) + ": features " + d.Z.shape() + " vs head W " +
                         h.W.shape());
  }
  if (d.Z.rows() != d.y.size()) {
    throw DimensionError(std::string(what) + ": " + std::to_string(d.Z.rows()) +
                         " rows but " + std::to_string(d.y.size()) + " labels");
  }
  for (auto label : d.y) {
    if (label >= h.classes()) {
      throw Error(std::string(what) + ": label " + std::to_string(label) + " >= " +
                  std::to_string(h.classes()) + " classes");
    }
  }
}

inline void check_flat(const LinearHead& h, std::span<const double> v, const char* what) {
  if (v.size() != h.param_count()) {
    throw DimensionError(std::string(what) + ": vector length " + std::to_string(v.size()) +
                         " vs " + std::to_string(h.param_count()) + " head parameters");
  }
}

}  // namespace detail

inline Matrix logits(const LinearHead& h, const Matrix& Z) {
  Matrix s = matmul_bt(Z, h.W);
  for (std::size_t i = 0; i < s.rows(); ++i) {
    auto row = s.row(i);
    for (std::size_t j = 0; j < row.size(); ++j) row[j] += h.b[j];
  }
  return s;
}

inline double ce_loss(const LinearHead& h, const FeatureData& d) {
  detail::check_head(h, d, "ce_loss");
  if (d.size() == 0) return 0.0;
  const Matrix s = logits(h, d.Z);
  double total = 0.0;
  for (std::size_t i = 0; i < s.rows(); ++i) {
    const auto row = s.row(i);
    const double mx = *std::max_element(row.begin(), row.end());
    double z = 0.0;
    for (double v : row) z += std::exp(v - mx);
    total += mx + std::log(z) - row[d.y[i]];
  }
  return total / static_cast<double>(d.size());
}

// Per-sample (softmax - onehot) / n, the shared factor of every head gradient.
inline Matrix logit_residual(const LinearHead& h, const FeatureData& d) {
  Matrix r = softmax_rows(logits(h, d.Z));
  const double inv_n = d.size() == 0 ? 0.0 : 1.0 / static_cast<double>(d.size());
  for (std::size_t i = 0; i < r.rows(); ++i) {
    r(i, d.y[i]) -= 1.0;
    for (double& v : r.row(i)) v *= inv_n;
  }
  return r;
}

inline HeadGrad grad_head(const LinearHead& h, const FeatureData& d) {
  detail::check_head(h, d, "grad_head");
  const Matrix r = logit_residual(h, d);
  HeadGrad g{matmul_at(r, d.Z), Vec(h.classes(), 0.0)};
  for (std::size_t i = 0; i < r.rows(); ++i) {
    const auto row = r.row(i);
    for (std::size_t j = 0; j < row.size(); ++j) g.db[j] += row[j];
  }
  return g;
}

inline Vec grad_head_flat(const LinearHead& h, const FeatureData& d) {
  return grad_head(h, d).flatten();
}

// d ce_loss / d z_i = W^T (p_i - e_{y_i}) / n, stacked n x p.
inline Matrix grad_features(const LinearHead& h, const FeatureData& d) {
  detail::check_head(h, d, "grad_features");
  return matmul(logit_residual(h, d), h.W);
}

inline Matrix grad_inputs(const Encoder& f, const LinearHead& h, const LabeledData& d) {
  const MlpTrace t = f.trace(d.X);
  const FeatureData z{t.output, d.y, d.classes};
  return f.backward(t, grad_features(h, z), false).input;
}

// Gradient of 1/2 |f(nu) - zeta|^2 with respect to nu.
inline Matrix grad_inputs_matching(const Encoder& f, const Matrix& nu, const Matrix& zeta) {
  const MlpTrace t = f.trace(nu);
  if (zeta.rows() != t.output.rows() || zeta.cols() != t.output.cols()) {
    throw DimensionError("grad_inputs_matching: f(nu) " + t.output.shape() + " vs zeta " +
                         zeta.shape());
  }
  return f.backward(t, t.output - zeta, false).input;
}

inline double matching_loss(const Encoder& f, const Matrix& nu, const Matrix& zeta) {
  const Matrix diff = f.forward(nu) - zeta;
  double s = 0.0;
  for (double v : diff.values()) s += v * v;
  return 0.5 * s;
}

// Exact Hessian-vector product of ce_loss in the flattened head parameters.
inline Vec hvp_head(const LinearHead& h, const FeatureData& d, std::span<const double> v) {
  detail::check_head(h, d, "hvp_head");
  detail::check_flat(h, v, "hvp_head");
  const std::size_t c = h.classes();
  const std::size_t p = h.features();
  const LinearHead dir = LinearHead::unflatten(c, p, v);
  const Matrix P = softmax_rows(logits(h, d.Z));
  const Matrix U = logits(dir, d.Z);  // logit-space direction per sample
  Matrix R(d.size(), c);
  const double inv_n = d.size() == 0 ? 0.0 : 1.0 / static_cast<double>(d.size());
  for (std::size_t i = 0; i < d.size(); ++i) {
    const auto pi = P.row(i);
    const auto ui = U.row(i);
    const double pu = dot(pi, ui);
    for (std::size_t j = 0; j < c; ++j) R(i, j) = inv_n * pi[j] * (ui[j] - pu);
  }
  HeadGrad out{matmul_at(R, d.Z), Vec(c, 0.0)};
  for (std::size_t i = 0; i < R.rows(); ++i)
    for (std::size_t j = 0; j < c; ++j) out.db[j] += R(i, j);
  return out.flatten();
}

// d/dZ <grad_head(h, d), v>: vector-Jacobian product of the mixed second
// derivative, per feature row.
inline Matrix cross_grad_vjp(const LinearHead& h, const FeatureData& d,
                             std::span<const double> v) {
  detail::check_head(h, d, "cross_grad_vjp");
  detail::check_flat(h, v, "cross_grad_vjp");
  const std::size_t c = h.classes();
  const LinearHead dir = LinearHead::unflatten(c, h.features(), v);
  const Matrix P = softmax_rows(logits(h, d.Z));
  const Matrix U = logits(dir, d.Z);
  const double inv_n = d.size() == 0 ? 0.0 : 1.0 / static_cast<double>(d.size());
  // row i: V^T (p - e_y) + W^T (diag p - p p^T) u, all over n
  Matrix A(d.size(), c);  // coefficients on rows of V
  Matrix B(d.size(), c);  // coefficients on rows of W
  for (std::size_t i = 0; i < d.size(); ++i) {
    const auto pi = P.row(i);
    const auto ui = U.row(i);
    const double pu = dot(pi, ui);
    for (std::size_t j = 0; j < c; ++j) {
      A(i, j) = inv_n * (pi[j] - (j == d.y[i] ? 1.0 : 0.0));
      B(i, j) = inv_n * pi[j] * (ui[j] - pu);
    }
  }
  Matrix out = matmul(A, dir.W);
  axpy(out, 1.0, matmul(B, h.W));
  return out;
}

inline Matrix cross_grad_vjp(const Encoder& f, const LinearHead& h, const LabeledData& d,
                             std::span<const double> v) {
  const MlpTrace t = f.trace(d.X);
  const FeatureData z{t.output, d.y, d.classes};
  return f.backward(t, cross_grad_vjp(h, z, v), false).input;
}

// Argmax with ties toward the lowest class index.
inline std::vector<std::uint32_t> predict(const LinearHead& h, const Matrix& Z) {
  const Matrix s = logits(h, Z);
  std::vector<std::uint32_t> out(s.rows());
  for (std::size_t i = 0; i < s.rows(); ++i) {
    const auto row = s.row(i);
    std::size_t best = 0;
    for (std::size_t j = 1; j < row.size(); ++j)
      if (row[j] > row[best]) best = j;
    out[i] = static_cast<std::uint32_t>(best);
  }
  return out;
}

}  // namespace plab
