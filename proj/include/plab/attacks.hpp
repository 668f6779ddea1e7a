#pragma once

// Poison construction: gradient canceling in feature and input space, TGDA
// with implicit total gradients, feature matching (forward gradient step plus
// backward proximal step) with nearest-feature base pairing, error-minimizing
// noise, and decoder inversion.

#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "plab/model.hpp"
#include "plab/trainer.hpp"

namespace plab {

struct Box {
  double lo = -1.0;
  double hi = 1.0;

  double range() const noexcept { return hi - lo; }
  friend bool operator==(const Box&, const Box&) = default;
};

struct EmnOptions {
  std::size_t rounds = 20;
  std::size_t head_steps = 10;   // M
  std::size_t pgd_steps = 10;    // per round
  double step_fraction = 0.25;   // PGD step = step_fraction * eps_inf
  double head_lr = 0.01;
  double head_init_scale = 3.0;  // surrogate head ~ U(-a, a), a = scale / sqrt(features)
  bool random_start = true;      // delta ~ U(-eps_inf, eps_inf) before the first round
  bool end_to_end = false;       // control: encoder trainable during the min-min

  friend bool operator==(const EmnOptions&, const EmnOptions&) = default;
};

struct AttackConfig {
  double eps_d = 0.03;
  double eta = 0.1;
  std::size_t epochs = 2000;       // GC descent epochs
  std::size_t tgda_epochs = 200;
  double gamma = 1.0;
  double beta = 0.25;
  std::optional<Box> box;
  double stop_residual = 1e-5;
  std::size_t k = 1;
  std::size_t s = 50;              // only used with use_optional_refinement
  std::size_t t = 2000;
  bool use_optional_refinement = false;
  bool constrained = false;
  double damping = 1e-3;
  double cg_tol = 1e-8;
  std::size_t cg_max_iter = 500;
  std::size_t max_halvings = 40;
  TrainConfig defender{};          // TGDA warm start of the defender head
  EmnOptions emn{};
  TrainConfig decoder{2000, 0.05, Schedule::cosine, 0, 0};
  std::vector<std::size_t> decoder_hidden{16};

  friend bool operator==(const AttackConfig&, const AttackConfig&) = default;
};

// round(eps_d * n), half up.
inline std::size_t poison_count(double eps_d, std::size_t n) {
  if (!(eps_d > 0.0)) throw Error("eps_d must be > 0");
  const auto m = static_cast<std::size_t>(std::floor(eps_d * static_cast<double>(n) + 0.5));
  if (m == 0) {
    throw Error("eps_d = " + std::to_string(eps_d) + " rounds to zero poison points for n = " +
                std::to_string(n));
  }
  return m;
}

enum class PoisonSpace { input, feature };

struct PoisonResult {
  PoisonSpace space = PoisonSpace::input;
  LabeledData nu;    // input-space poison
  FeatureData zeta;  // poisoned features (feature-space result, or FM targets)
  Vec residual_trace;
  double final_linf = 0.0;
  std::vector<std::size_t> pairing;  // poison row -> base row in the clean set
};

// ---------------------------------------------------------------------------
// Gradient canceling

// 1/2 |g_clean + weight * grad_head(head_hat, nu)|^2 where grad_head is the
// mean over nu. With weight = |nu| / |mu| a zero residual makes head_hat a
// stationary point of the mean loss over the union of clean and poison data.
inline double gc_residual(std::span<const double> g_clean, const LinearHead& head_hat,
                          const FeatureData& nu, double weight = 1.0) {
  detail::check_flat(head_hat, g_clean, "gc_residual");
  const Vec gn = grad_head_flat(head_hat, nu);
  double s = 0.0;
  for (std::size_t i = 0; i < gn.size(); ++i) {
    const double r = g_clean[i] + weight * gn[i];
    s += r * r;
  }
  return 0.5 * s;
}

inline double gc_residual(std::span<const double> g_clean, const Encoder& f,
                          const LinearHead& head_hat, const LabeledData& nu, double weight = 1.0) {
  return gc_residual(g_clean, head_hat, encode(f, nu), weight);
}

namespace detail {

struct GcEval {
  double value = 0.0;
  Vec residual;
};

inline GcEval gc_eval(std::span<const double> g_clean, const LinearHead& head_hat,
                      const FeatureData& nu, double weight) {
  GcEval e;
  e.residual = grad_head_flat(head_hat, nu);
  double s = 0.0;
  for (std::size_t i = 0; i < e.residual.size(); ++i) {
    e.residual[i] = g_clean[i] + weight * e.residual[i];
    s += e.residual[i] * e.residual[i];
  }
  e.value = 0.5 * s;
  return e;
}

// d residual / d Z for the poison features Z.
inline Matrix gc_feature_grad(const LinearHead& head_hat, const FeatureData& nu,
                              const GcEval& at, double weight) {
  Matrix g = cross_grad_vjp(head_hat, nu, at.residual);
  for (double& v : g.values()) v *= weight;
  return g;
}

inline std::vector<std::size_t> pick_base_rows(Rng& rng, std::size_t n, std::size_t m) {
  if (m <= n) return rng.sample_without_replacement(n, m);
  std::vector<std::size_t> idx;
  while (idx.size() < m) {
    const auto perm = rng.permutation(n);
    for (auto i : perm) {
      if (idx.size() == m) break;
      idx.push_back(i);
    }
  }
  return idx;
}

inline void require_finite(double v, std::size_t epoch, const char* what) {
  if (!std::isfinite(v)) {
    throw Error(std::string(what) + ": non-finite objective at epoch " + std::to_string(epoch));
  }
}

// One descent step with step halving until the objective does not increase.
// Returns the accepted step size, or 0 when every trial increased it.
template <typename Propose, typename Objective>
double backtracked_step(Matrix& x, double& fx, double eta, std::size_t max_halvings,
                        Propose&& propose, Objective&& objective) {
  double step = eta;
  for (std::size_t h = 0; h <= max_halvings; ++h, step *= 0.5) {
    Matrix trial = propose(x, step);
    const double ft = objective(trial);
    if (std::isfinite(ft) && ft <= fx) {
      x = std::move(trial);
      fx = ft;
      return step;
    }
  }
  return 0.0;
}

}  // namespace detail

// Descends the GC residual over poison features `zeta` in place.
inline Vec gc_descend_features(FeatureData& zeta, std::span<const double> g_clean,
                               const LinearHead& head_hat, double weight, double eta,
                               std::size_t epochs, double stop_residual,
                               std::size_t max_halvings) {
  Vec trace;
  auto objective = [&](const Matrix& Z) {
    return gc_residual(g_clean, head_hat, FeatureData{Z, zeta.y, zeta.classes}, weight);
  };
  detail::GcEval at = detail::gc_eval(g_clean, head_hat, zeta, weight);
  detail::require_finite(at.value, 0, "gc_feature_attack");
  double fx = at.value;
  double trial = eta;
  trace.push_back(fx);
  Matrix prev_x, prev_g;
  for (std::size_t e = 0; e < epochs && fx >= stop_residual; ++e) {
    const Matrix grad = detail::gc_feature_grad(head_hat, zeta, at, weight);
    if (e > 0) {
      const Matrix sx = zeta.Z - prev_x;
      const Matrix sg = grad - prev_g;
      const double sy = dot(sx.values(), sg.values());
      if (sy > 0.0) trial = dot(sx.values(), sx.values()) / sy;
    }
    prev_x = zeta.Z;
    prev_g = grad;
    const double step = detail::backtracked_step(
        zeta.Z, fx, trial, max_halvings,
        [&](const Matrix& Z, double st) {
          Matrix out = Z;
          axpy(out, -st, grad);
          return out;
        },
        objective);
    detail::require_finite(fx, e + 1, "gc_feature_attack");
    trace.push_back(fx);
    if (step == 0.0) break;
    trial = 2.0 * step;
    at = detail::gc_eval(g_clean, head_hat, zeta, weight);
  }
  return trace;
}

// GC in feature space. `clean` is f(mu); poison features start from randomly
// chosen clean rows and keep their labels.
inline PoisonResult gc_feature_attack(const FeatureData& clean, const LinearHead& head_hat,
                                      const AttackConfig& cfg, Rng& rng) {
  detail::check_head(head_hat, clean, "gc_feature_attack");
  const std::size_t m = poison_count(cfg.eps_d, clean.size());
  const auto base = detail::pick_base_rows(rng, clean.size(), m);
  PoisonResult out;
  out.space = PoisonSpace::feature;
  out.zeta = subset(clean, base);
  out.pairing = base;
  const Vec g_clean = grad_head_flat(head_hat, clean);
  const double weight = static_cast<double>(m) / static_cast<double>(clean.size());
  out.residual_trace = gc_descend_features(out.zeta, g_clean, head_hat, weight, cfg.eta,
                                           cfg.epochs, cfg.stop_residual, cfg.max_halvings);
  out.final_linf = norms(out.zeta.Z).linf;
  return out;
}

// GC in input space through the frozen encoder, optionally with the fidelity
// penalty beta/2 |nu - mu'|^2 (cfg.constrained) and box projection (cfg.box).
inline PoisonResult gc_input_attack(const LabeledData& mu, const Encoder& f,
                                    const LinearHead& head_hat, const AttackConfig& cfg,
                                    Rng& rng) {
  const std::size_t m = poison_count(cfg.eps_d, mu.size());
  const auto base = detail::pick_base_rows(rng, mu.size(), m);
  const LabeledData anchor = subset(mu, base);
  const FeatureData clean = encode(f, mu);
  detail::check_head(head_hat, clean, "gc_input_attack");
  const Vec g_clean = grad_head_flat(head_hat, clean);
  const double weight = static_cast<double>(m) / static_cast<double>(mu.size());
  const double beta = cfg.constrained ? cfg.beta : 0.0;

  auto penalty = [&](const Matrix& X) {
    if (beta == 0.0) return 0.0;
    double s = 0.0;
    const auto a = anchor.X.values();
    const auto x = X.values();
    for (std::size_t i = 0; i < x.size(); ++i) s += (x[i] - a[i]) * (x[i] - a[i]);
    return 0.5 * beta * s;
  };
  auto objective = [&](const Matrix& X) {
    return gc_residual(g_clean, head_hat, FeatureData{f.forward(X), anchor.y, anchor.classes},
                       weight) +
           penalty(X);
  };
  auto project = [&](Matrix X) { return cfg.box ? clip_box(X, cfg.box->lo, cfg.box->hi) : X; };

  PoisonResult out;
  out.space = PoisonSpace::input;
  out.pairing = base;
  out.nu = anchor;
  out.nu.X = project(out.nu.X);
  double fx = objective(out.nu.X);
  detail::require_finite(fx, 0, "gc_input_attack");
  out.residual_trace.push_back(fx);
  double trial = cfg.eta;
  for (std::size_t e = 0; e < cfg.epochs; ++e) {
    const MlpTrace tr = f.trace(out.nu.X);
    const FeatureData z{tr.output, anchor.y, anchor.classes};
    const detail::GcEval at = detail::gc_eval(g_clean, head_hat, z, weight);
    if (at.value < cfg.stop_residual) break;
    Matrix grad = f.backward(tr, detail::gc_feature_grad(head_hat, z, at, weight), false).input;
    if (beta != 0.0) axpy(grad, beta, out.nu.X - anchor.X);
    const double step = detail::backtracked_step(
        out.nu.X, fx, trial, cfg.max_halvings,
        [&](const Matrix& X, double st) {
          Matrix next = X;
          axpy(next, -st, grad);
          return project(std::move(next));
        },
        objective);
    detail::require_finite(fx, e + 1, "gc_input_attack");
    out.residual_trace.push_back(fx);
    if (step == 0.0) break;
    trial = 2.0 * step;
  }
  out.final_linf = norms(out.nu.X).linf;
  return out;
}

// ---------------------------------------------------------------------------
// TGDA

struct CgResult {
  Vec x;
  std::size_t iterations = 0;
  double residual_norm = 0.0;
};

// Conjugate gradients for a symmetric positive definite operator.
inline CgResult conjugate_gradient(const std::function<Vec(const Vec&)>& apply, const Vec& b,
                                   double rel_tol, std::size_t max_iter) {
  CgResult res;
  res.x.assign(b.size(), 0.0);
  const double bn = norm2(b);
  if (bn == 0.0) return res;
  Vec r = b;
  Vec p = r;
  double rr = dot(r, r);
  for (std::size_t it = 0; it < max_iter; ++it) {
    const Vec Ap = apply(p);
    const double pAp = dot(p, Ap);
    if (!(pAp > 0.0)) {
      throw Error("conjugate_gradient: operator not positive definite (p'Ap = " +
                  std::to_string(pAp) + ")");
    }
    const double alpha = rr / pAp;
    for (std::size_t i = 0; i < b.size(); ++i) {
      res.x[i] += alpha * p[i];
      r[i] -= alpha * Ap[i];
    }
    const double rr_next = dot(r, r);
    res.iterations = it + 1;
    res.residual_norm = std::sqrt(rr_next);
    if (res.residual_norm <= rel_tol * bn) return res;
    const double beta = rr_next / rr;
    for (std::size_t i = 0; i < b.size(); ++i) p[i] = r[i] + beta * p[i];
    rr = rr_next;
  }
  throw Error("conjugate_gradient: no convergence after " + std::to_string(max_iter) +
              " iterations, residual norm " + std::to_string(res.residual_norm));
}

struct CgOptions {
  double damping = 1e-3;
  double tol = 1e-8;
  std::size_t max_iter = 500;
};

// Total derivative of the validation loss with respect to poison features,
// -d2l2/(dw dnu) . (d2l2/dw2 + damping I)^-1 . dl1/dw, where l2 is the mean
// loss over clean + poison features and l1 the validation loss.
inline Matrix total_gradient(const LinearHead& head, const FeatureData& clean,
                             const FeatureData& nu, const FeatureData& val,
                             const CgOptions& opt = {}) {
  const FeatureData mixed = concat(clean, nu);
  const Vec g1 = grad_head_flat(head, val);
  const CgResult q = conjugate_gradient(
      [&](const Vec& v) {
        Vec hv = hvp_head(head, mixed, v);
        for (std::size_t i = 0; i < hv.size(); ++i) hv[i] += opt.damping * v[i];
        return hv;
      },
      g1, opt.tol, opt.max_iter);
  Matrix out = cross_grad_vjp(head, nu, q.x);
  const double share = static_cast<double>(nu.size()) / static_cast<double>(mixed.size());
  for (double& v : out.values()) v *= -share;
  return out;
}

inline Matrix total_gradient(const Encoder& f, const LinearHead& head, const LabeledData& clean,
                             const LabeledData& nu, const LabeledData& val,
                             const CgOptions& opt = {}) {
  const MlpTrace t = f.trace(nu.X);
  const FeatureData z{t.output, nu.y, nu.classes};
  const Matrix dz = total_gradient(head, encode(f, clean), z, encode(f, val), opt);
  return f.backward(t, dz, false).input;
}

// Total gradient ascent on the validation loss for the attacker, gradient
// descent on the mixed training loss for the defender.
inline PoisonResult tgda_attack(const LabeledData& mu, const LabeledData& val, const Encoder& f,
                                const AttackConfig& cfg, Rng& rng) {
  const std::size_t m = poison_count(cfg.eps_d, mu.size());
  const auto base = detail::pick_base_rows(rng, mu.size(), m);
  const LabeledData anchor = subset(mu, base);
  const FeatureData clean = encode(f, mu);
  const FeatureData val_z = encode(f, val);
  const CgOptions cg{cfg.damping, cfg.cg_tol, cfg.cg_max_iter};

  PoisonResult out;
  out.space = PoisonSpace::input;
  out.pairing = base;
  out.nu = anchor;
  LinearHead head = train_head(concat(clean, encode(f, out.nu)), cfg.defender);
  out.residual_trace.push_back(ce_loss(head, val_z));
  for (std::size_t e = 0; e < cfg.tgda_epochs; ++e) {
    const Matrix d = total_gradient(f, head, mu, out.nu, val, cg);
    axpy(out.nu.X, cfg.eta, d);
    if (cfg.constrained) out.nu.X = prox_avg(out.nu.X, anchor.X, cfg.eta, cfg.beta);
    if (cfg.box) out.nu.X = clip_box(out.nu.X, cfg.box->lo, cfg.box->hi);
    const FeatureData mixed = concat(clean, encode(f, out.nu));
    detail::sgd_step(head, grad_head(head, mixed), cfg.eta);
    const double l1 = ce_loss(head, val_z);
    detail::require_finite(l1, e + 1, "tgda_attack");
    out.residual_trace.push_back(l1);
  }
  out.final_linf = norms(out.nu.X).linf;
  return out;
}

// ---------------------------------------------------------------------------
// Feature matching

struct RankResult {
  std::vector<std::size_t> pairing;
  Vec sq_distances;
  FeatureData zeta;  // relabeled with the paired clean labels
};

// Nearest clean feature row (squared L2, lowest index on ties) for each zeta row.
inline RankResult rank_pair(const FeatureData& clean, const FeatureData& zeta) {
  if (clean.Z.cols() != zeta.Z.cols()) {
    throw DimensionError("rank_pair: clean features " + clean.Z.shape() + " vs zeta " +
                         zeta.Z.shape());
  }
  if (clean.size() == 0) throw Error("rank_pair: empty clean set");
  RankResult r;
  r.zeta = zeta;
  r.zeta.classes = std::max(zeta.classes, clean.classes);
  r.pairing.resize(zeta.size());
  r.sq_distances.resize(zeta.size());
  for (std::size_t i = 0; i < zeta.size(); ++i) {
    const auto z = zeta.Z.row(i);
    double best = std::numeric_limits<double>::infinity();
    std::size_t arg = 0;
    for (std::size_t j = 0; j < clean.size(); ++j) {
      const auto x = clean.Z.row(j);
      double d = 0.0;
      for (std::size_t k = 0; k < z.size(); ++k) d += (z[k] - x[k]) * (z[k] - x[k]);
      if (d < best) {
        best = d;
        arg = j;
      }
    }
    r.pairing[i] = arg;
    r.sq_distances[i] = best;
    r.zeta.y[i] = clean.y[arg];
  }
  return r;
}

namespace detail {

inline double matching_objective(const Encoder& f, const Matrix& nu, const Matrix& zeta,
                                 const Matrix& anchor, double gamma, double beta) {
  double s = gamma == 0.0 ? 0.0 : gamma * matching_loss(f, nu, zeta);
  if (beta != 0.0) {
    double a = 0.0;
    const auto x = nu.values();
    const auto b = anchor.values();
    for (std::size_t i = 0; i < x.size(); ++i) a += (x[i] - b[i]) * (x[i] - b[i]);
    s += 0.5 * beta * a;
  }
  return s;
}

}  // namespace detail

struct MatchingResult {
  Matrix nu;
  Vec trace;  // gamma/2 |f(nu)-zeta|^2 + beta/2 |nu-anchor|^2 after each step
};

// Forward-backward matching of f(nu) to zeta anchored at `anchor`, starting
// from nu0. The step follows a cosine schedule from cfg.eta over cfg.t steps,
// halved whenever the objective would increase.
inline MatchingResult match_features(const Encoder& f, const Matrix& nu0, const Matrix& zeta,
                                     const Matrix& anchor, const AttackConfig& cfg) {
  const double gamma = cfg.gamma;
  const double beta = cfg.beta;
  MatchingResult out{nu0, {}};
  auto objective = [&](const Matrix& X) {
    return detail::matching_objective(f, X, zeta, anchor, gamma, beta);
  };
  double fx = objective(out.nu);
  detail::require_finite(fx, 0, "feature_matching_attack");
  const TrainConfig sched{std::max<std::size_t>(cfg.t, 1), cfg.eta, Schedule::cosine, 0, 0};
  for (std::size_t step = 0; step < cfg.t; ++step) {
    Matrix grad = grad_inputs_matching(f, out.nu, zeta);
    for (double& v : grad.values()) v *= gamma;
    detail::backtracked_step(
        out.nu, fx, lr_at(sched, step), cfg.max_halvings,
        [&](const Matrix& X, double eta) {
          Matrix fwd = X;
          axpy(fwd, -eta, grad);
          Matrix bwd = prox_avg(fwd, anchor, eta, beta);
          return cfg.box ? clip_box(bwd, cfg.box->lo, cfg.box->hi) : bwd;
        },
        objective);
    detail::require_finite(fx, step + 1, "feature_matching_attack");
    out.trace.push_back(fx);
  }
  return out;
}

// GC feature-space targets, nearest-feature base pairing with label
// reassignment, then k rounds of (optional zeta refinement, feature matching).
inline PoisonResult feature_matching_attack(const LabeledData& mu, const Encoder& f,
                                            const LinearHead& head_hat, const AttackConfig& cfg,
                                            Rng& rng) {
  const FeatureData clean = encode(f, mu);
  const PoisonResult gc = gc_feature_attack(clean, head_hat, cfg, rng);
  RankResult ranked = rank_pair(clean, gc.zeta);
  const LabeledData anchor = subset(mu, ranked.pairing);

  PoisonResult out;
  out.space = PoisonSpace::input;
  out.pairing = ranked.pairing;
  out.zeta = std::move(ranked.zeta);
  out.nu = anchor;
  if (cfg.box) out.nu.X = clip_box(out.nu.X, cfg.box->lo, cfg.box->hi);

  const Vec g_clean = grad_head_flat(head_hat, clean);
  const double weight = static_cast<double>(out.zeta.size()) / static_cast<double>(mu.size());
  for (std::size_t round = 0; round < cfg.k; ++round) {
    if (cfg.use_optional_refinement) {
      for (std::size_t s = 0; s < cfg.s; ++s) {
        gc_descend_features(out.zeta, g_clean, head_hat, weight, cfg.eta, 1, 0.0,
                            cfg.max_halvings);
        out.zeta.Z = prox_avg(out.zeta.Z, f.forward(out.nu.X), cfg.eta, cfg.gamma);
      }
    }
    MatchingResult mr = match_features(f, out.nu.X, out.zeta.Z, anchor.X, cfg);
    out.nu.X = std::move(mr.nu);
    out.residual_trace.insert(out.residual_trace.end(), mr.trace.begin(), mr.trace.end());
  }
  out.final_linf = norms(out.nu.X).linf;
  return out;
}

// ---------------------------------------------------------------------------
// Decoder inversion

inline LabeledData decoder_invert(const Decoder& g, const FeatureData& zeta,
                                  std::optional<Box> box) {
  if (zeta.Z.cols() != g.in_dim()) {
    throw DimensionError("decoder_invert: zeta " + zeta.Z.shape() + " vs decoder input dim " +
                         std::to_string(g.in_dim()));
  }
  Matrix x = g.forward(zeta.Z);
  if (box) x = clip_box(x, box->lo, box->hi);
  return LabeledData{std::move(x), zeta.y, zeta.classes};
}

// GC feature-space targets inverted through a decoder of the frozen encoder.
inline PoisonResult decoder_inversion_attack(const LabeledData& mu, const Encoder& f,
                                             const Decoder& g, const LinearHead& head_hat,
                                             const AttackConfig& cfg, Rng& rng) {
  PoisonResult gc = gc_feature_attack(encode(f, mu), head_hat, cfg, rng);
  PoisonResult out;
  out.space = PoisonSpace::input;
  out.nu = decoder_invert(g, gc.zeta, cfg.box);
  out.zeta = std::move(gc.zeta);
  out.pairing = std::move(gc.pairing);
  out.residual_trace = std::move(gc.residual_trace);
  out.final_linf = norms(out.nu.X).linf;
  return out;
}

// ---------------------------------------------------------------------------
// Error-minimizing noise

struct EmnResult {
  LabeledData perturbed;
  Vec loss_trace;  // training loss on the perturbed set after each round
  Mlp encoder;     // final encoder (differs from f only for the end-to-end control)
  LinearHead head;
};

// Alternating minimization of the training loss over the head (M steps per
// round) and over per-sample noise delta with |delta_i|_inf <= eps_inf (signed
// projected gradient steps). Perturbs every training point.
inline EmnResult emn_attack(const LabeledData& mu, const Encoder& f, const AttackConfig& cfg,
                            double eps_inf, Rng& rng) {
  if (eps_inf < 0.0) throw Error("emn_attack: eps_inf must be >= 0");
  const EmnOptions& opt = cfg.emn;
  Mlp enc = opt.end_to_end ? f.trainable_copy() : f;
  LinearHead head = LinearHead::zeros(mu.classes, f.out_dim());
  const double a = opt.head_init_scale / std::sqrt(static_cast<double>(f.out_dim()));
  for (double& w : head.W.values()) w = rng.uniform(-a, a);
  Matrix delta(mu.X.rows(), mu.X.cols());
  if (opt.random_start && eps_inf > 0.0) {
    for (double& d : delta.values()) d = rng.uniform(-eps_inf, eps_inf);
  }
  const double step = opt.step_fraction * eps_inf;
  EmnResult out;

  auto perturbed = [&] {
    Matrix x = mu.X + delta;
    return cfg.box ? clip_box(x, cfg.box->lo, cfg.box->hi) : x;
  };

  for (std::size_t round = 0; round < opt.rounds; ++round) {
    LabeledData cur{perturbed(), mu.y, mu.classes};
    for (std::size_t s = 0; s < opt.head_steps; ++s) {
      if (opt.end_to_end) {
        const MlpTrace t = enc.trace(cur.X);
        const FeatureData z{t.output, cur.y, cur.classes};
        const HeadGrad hg = grad_head(head, z);
        const MlpGrad eg = enc.backward(t, grad_features(head, z), true);
        detail::sgd_step(head, hg, opt.head_lr);
        detail::sgd_step(enc, eg, opt.head_lr);
      } else {
        detail::sgd_step(head, grad_head(head, encode(enc, cur)), opt.head_lr);
      }
    }
    for (std::size_t s = 0; s < opt.pgd_steps && step > 0.0; ++s) {
      const Matrix g = grad_inputs(enc, head, cur);
      auto dv = delta.values();
      const auto gv = g.values();
      for (std::size_t i = 0; i < dv.size(); ++i) {
        const double sg = gv[i] > 0.0 ? 1.0 : (gv[i] < 0.0 ? -1.0 : 0.0);
        dv[i] = std::clamp(dv[i] - step * sg, -eps_inf, eps_inf);
      }
      if (cfg.box) {
        const auto xv = mu.X.values();
        for (std::size_t i = 0; i < dv.size(); ++i)
          dv[i] = std::clamp(xv[i] + dv[i], cfg.box->lo, cfg.box->hi) - xv[i];
      }
      cur.X = perturbed();
    }
    const double loss = ce_loss(head, encode(enc, cur));
    detail::require_finite(loss, round, "emn_attack");
    out.loss_trace.push_back(loss);
  }
  out.perturbed = LabeledData{perturbed(), mu.y, mu.classes};
  out.encoder = opt.end_to_end ? enc.frozen_copy() : f;
  out.head = std::move(head);
  return out;
}

}  // namespace plab
