#pragma once

// GradPC: corrupt the head parameters directly by normalized gradient ascent
// on a validation loss, keeping the displacement at a fixed L2 radius.

#include <cmath>
#include <string>

#include "plab/model.hpp"

namespace plab {

struct TargetSpec {
  double eps_w = 1.0;
  std::size_t steps = 1;
  // 1: eps_w is the L2 radius. 2: eps_w is the squared L2 distance.
  int norm_power = 1;

  double radius() const { return norm_power == 2 ? std::sqrt(eps_w) : eps_w; }
  friend bool operator==(const TargetSpec&, const TargetSpec&) = default;
};

inline LinearHead gradpc(const LinearHead& head, const FeatureData& val, const TargetSpec& spec) {
  if (!(spec.eps_w > 0.0)) throw Error("gradpc: eps_w must be > 0");
  if (spec.steps < 1) throw Error("gradpc: steps must be >= 1");
  if (spec.norm_power != 1 && spec.norm_power != 2) throw Error("gradpc: norm_power must be 1 or 2");
  const double radius = spec.radius();
  const std::size_t c = head.classes();
  const std::size_t p = head.features();
  const Vec origin = head.flatten();
  Vec current = origin;
  for (std::size_t s = 0; s < spec.steps; ++s) {
    const Vec g = grad_head_flat(LinearHead::unflatten(c, p, current), val);
    const double gn = norm2(g);
    if (!(gn > 0.0) || !std::isfinite(gn)) {
      throw Error("gradpc: validation gradient vanishes at step " + std::to_string(s) +
                  " (stationary point, no ascent direction)");
    }
    Vec disp(origin.size());
    for (std::size_t i = 0; i < disp.size(); ++i)
      disp[i] = current[i] + radius * g[i] / gn - origin[i];
    const double dn = norm2(disp);
    for (std::size_t i = 0; i < disp.size(); ++i) current[i] = origin[i] + radius * disp[i] / dn;
  }
  return LinearHead::unflatten(c, p, current);
}

// Input-space view: encode the validation set through the frozen extractor.
inline LinearHead gradpc(const Encoder& f, const LinearHead& head, const LabeledData& val,
                         const TargetSpec& spec) {
  return gradpc(head, encode(f, val), spec);
}

inline double param_distance(const LinearHead& a, const LinearHead& b) {
  const Vec va = a.flatten();
  const Vec vb = b.flatten();
  if (va.size() != vb.size()) throw DimensionError("param_distance: head shapes differ");
  double s = 0.0;
  for (std::size_t i = 0; i < va.size(); ++i) s += (va[i] - vb[i]) * (va[i] - vb[i]);
  return std::sqrt(s);
}

}  // namespace plab
