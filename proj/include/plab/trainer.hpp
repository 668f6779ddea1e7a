#pragma once

// Gradient-descent training loops: the defender's linear head, a supervised
// encoder (stand-in for a pretrained feature extractor) and MLP decoders.

#include <cmath>
#include <numbers>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "plab/model.hpp"

namespace plab {

enum class Schedule { constant, cosine };

struct TrainConfig {
  std::size_t epochs = 100;
  double lr = 0.1;
  Schedule schedule = Schedule::cosine;
  std::size_t batch = 0;  // 0 = full batch
  std::uint64_t seed = 0;

  void validate() const {
    if (epochs < 1) throw Error("TrainConfig: epochs must be >= 1");
    if (!(lr > 0.0)) throw Error("TrainConfig: lr must be > 0");
  }

  friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

inline double lr_at(const TrainConfig& cfg, std::size_t epoch) {
  if (cfg.schedule == Schedule::constant) return cfg.lr;
  const double frac = static_cast<double>(epoch) / static_cast<double>(cfg.epochs);
  return 0.5 * cfg.lr * (1.0 + std::cos(std::numbers::pi * frac));
}

namespace detail {

// Mini-batch index lists for one epoch; a single full batch when cfg.batch is 0.
inline std::vector<std::vector<std::size_t>> epoch_batches(const TrainConfig& cfg, std::size_t n,
                                                           Rng& rng) {
  std::vector<std::vector<std::size_t>> out;
  if (cfg.batch == 0 || cfg.batch >= n) {
    std::vector<std::size_t> all(n);
    for (std::size_t i = 0; i < n; ++i) all[i] = i;
    out.push_back(std::move(all));
    return out;
  }
  const auto perm = rng.permutation(n);
  for (std::size_t s = 0; s < n; s += cfg.batch) {
    out.emplace_back(perm.begin() + static_cast<std::ptrdiff_t>(s),
                     perm.begin() + static_cast<std::ptrdiff_t>(std::min(n, s + cfg.batch)));
  }
  return out;
}

inline void require_finite_loss(double loss, std::size_t epoch, const char* what) {
  if (!std::isfinite(loss)) {
    throw Error(std::string(what) + ": non-finite loss at epoch " + std::to_string(epoch));
  }
}

inline void sgd_step(Mlp& m, const MlpGrad& g, double lr) {
  auto& layers = m.mutable_layers();
  for (std::size_t i = 0; i < layers.size(); ++i) {
    axpy(layers[i].weight, -lr, g.layers[i].weight);
    for (std::size_t j = 0; j < layers[i].bias.size(); ++j)
      layers[i].bias[j] -= lr * g.layers[i].bias[j];
  }
}

inline void sgd_step(LinearHead& h, const HeadGrad& g, double lr) {
  axpy(h.W, -lr, g.dW);
  for (std::size_t j = 0; j < h.b.size(); ++j) h.b[j] -= lr * g.db[j];
}

}  // namespace detail

// Head training on precomputed features. Starts from `init` or zeros.
inline LinearHead train_head(const FeatureData& d, const TrainConfig& cfg,
                             std::optional<LinearHead> init = std::nullopt,
                             std::vector<double>* loss_trace = nullptr) {
  cfg.validate();
  if (d.size() == 0) throw Error("train_head: empty training set");
  LinearHead h = init ? std::move(*init) : LinearHead::zeros(d.classes, d.Z.cols());
  Rng rng(cfg.seed, 0x4EAD);
  for (std::size_t e = 0; e < cfg.epochs; ++e) {
    const double lr = lr_at(cfg, e);
    for (const auto& idx : detail::epoch_batches(cfg, d.size(), rng)) {
      if (idx.size() == d.size()) {
        detail::sgd_step(h, grad_head(h, d), lr);
      } else {
        detail::sgd_step(h, grad_head(h, subset(d, idx)), lr);
      }
    }
    const double loss = ce_loss(h, d);
    detail::require_finite_loss(loss, e, "train_head");
    if (loss_trace) loss_trace->push_back(loss);
  }
  return h;
}

inline LinearHead train_head(const Encoder& f, const LabeledData& d, const TrainConfig& cfg) {
  return train_head(encode(f, d), cfg);
}

inline double accuracy(const LinearHead& h, const FeatureData& d) {
  if (d.size() == 0) return 0.0;
  const auto pred = predict(h, d.Z);
  std::size_t hit = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) hit += pred[i] == d.y[i] ? 1 : 0;
  return static_cast<double>(hit) / static_cast<double>(d.size());
}

inline double accuracy(const Encoder& f, const LinearHead& h, const LabeledData& d) {
  return accuracy(h, encode(f, d));
}

struct JointModel {
  Mlp encoder;
  LinearHead head;
};

// Encoder and head trained together on cross-entropy. The encoder must be
// trainable; the result keeps it trainable.
inline JointModel train_joint(Mlp encoder, LinearHead head, const LabeledData& d,
                              const TrainConfig& cfg) {
  cfg.validate();
  if (encoder.frozen()) throw Error("train_joint: encoder is frozen");
  Rng rng(cfg.seed, 0x101);
  for (std::size_t e = 0; e < cfg.epochs; ++e) {
    const double lr = lr_at(cfg, e);
    for (const auto& idx : detail::epoch_batches(cfg, d.size(), rng)) {
      const LabeledData batch = idx.size() == d.size() ? d : subset(d, idx);
      const MlpTrace t = encoder.trace(batch.X);
      const FeatureData z{t.output, batch.y, batch.classes};
      const HeadGrad hg = grad_head(head, z);
      const MlpGrad eg = encoder.backward(t, grad_features(head, z), true);
      detail::sgd_step(head, hg, lr);
      detail::sgd_step(encoder, eg, lr);
    }
    detail::require_finite_loss(ce_loss(head, encode(encoder, d)), e, "train_joint");
  }
  return {std::move(encoder), std::move(head)};
}

// Supervised stand-in for a pretrained extractor; returns the encoder frozen.
inline Encoder pretrain_encoder(const LabeledData& d, std::span<const std::size_t> dims,
                                const TrainConfig& cfg) {
  if (dims.empty() || dims.front() != d.X.cols()) {
    throw DimensionError("pretrain_encoder: dims must start with data dim " +
                         std::to_string(d.X.cols()));
  }
  Rng rng(cfg.seed, 0xE1C);
  Mlp enc = Mlp::random(dims, rng);
  LinearHead head = LinearHead::zeros(d.classes, enc.out_dim());
  return train_joint(std::move(enc), std::move(head), d, cfg).encoder.frozen_copy();
}

// Mean over entries of (g(f(x)) - x)^2.
inline double reconstruction_mse(const Encoder& f, const Decoder& g, const Matrix& X) {
  const Matrix diff = g.forward(f.forward(X)) - X;
  double s = 0.0;
  for (double v : diff.values()) s += v * v;
  return X.empty() ? 0.0 : s / static_cast<double>(X.size());
}

namespace detail {

inline Matrix mse_grad(const Matrix& out, const Matrix& target) {
  Matrix g = out - target;
  const double scale = 2.0 / static_cast<double>(target.size());
  for (double& v : g.values()) v *= scale;
  return g;
}

}  // namespace detail

struct AutoEncoder {
  Encoder encoder;
  Decoder decoder;
};

// Decoder g minimizing reconstruction_mse(f, g, X) with f held fixed. `dims`
// runs from the feature dim to the data dim.
inline Decoder train_decoder(const Encoder& f, const LabeledData& d,
                             std::span<const std::size_t> dims, const TrainConfig& cfg) {
  cfg.validate();
  if (dims.size() < 2 || dims.front() != f.out_dim() || dims.back() != d.X.cols()) {
    throw DimensionError("train_decoder: dims must run from feature dim " +
                         std::to_string(f.out_dim()) + " to data dim " +
                         std::to_string(d.X.cols()));
  }
  Rng rng(cfg.seed, 0xDEC);
  Decoder g = Mlp::random(dims, rng);
  const Matrix Z = f.forward(d.X);
  Rng batch_rng(cfg.seed, 0xDEC1);
  for (std::size_t e = 0; e < cfg.epochs; ++e) {
    const double lr = lr_at(cfg, e);
    for (const auto& idx : detail::epoch_batches(cfg, d.size(), batch_rng)) {
      const bool full = idx.size() == d.size();
      const Matrix zb = full ? Z : select_rows(Z, idx);
      const Matrix xb = full ? d.X : select_rows(d.X, idx);
      const MlpTrace t = g.trace(zb);
      detail::sgd_step(g, g.backward(t, detail::mse_grad(t.output, xb), true), lr);
    }
    detail::require_finite_loss(reconstruction_mse(f, g, d.X), e, "train_decoder");
  }
  return g.frozen_copy();
}

// Control run: encoder (initialized from `encoder_init`) and a fresh decoder
// trained together.
inline AutoEncoder train_autoencoder(const Encoder& encoder_init, const LabeledData& d,
                                     std::span<const std::size_t> decoder_dims,
                                     const TrainConfig& cfg) {
  cfg.validate();
  Rng rng(cfg.seed, 0xDEC);
  Mlp enc = encoder_init.trainable_copy();
  Mlp dec = Mlp::random(decoder_dims, rng);
  if (dec.in_dim() != enc.out_dim() || dec.out_dim() != d.X.cols()) {
    throw DimensionError("train_autoencoder: decoder dims do not chain with encoder/data");
  }
  Rng batch_rng(cfg.seed, 0xDEC1);
  for (std::size_t e = 0; e < cfg.epochs; ++e) {
    const double lr = lr_at(cfg, e);
    for (const auto& idx : detail::epoch_batches(cfg, d.size(), batch_rng)) {
      const Matrix xb = idx.size() == d.size() ? d.X : select_rows(d.X, idx);
      const MlpTrace te = enc.trace(xb);
      const MlpTrace td = dec.trace(te.output);
      const MlpGrad gd = dec.backward(td, detail::mse_grad(td.output, xb), true);
      const MlpGrad ge = enc.backward(te, gd.input, true);
      detail::sgd_step(dec, gd, lr);
      detail::sgd_step(enc, ge, lr);
    }
    detail::require_finite_loss(reconstruction_mse(enc, dec, d.X), e, "train_autoencoder");
  }
  return {enc.frozen_copy(), dec.frozen_copy()};
}

}  // namespace plab
