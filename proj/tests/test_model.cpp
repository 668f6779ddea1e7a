#include <gtest/gtest.h>

#include <cmath>

#include "plab/model.hpp"
#include "test_util.hpp"

using namespace plab;
using namespace plab::testing;

namespace {

Matrix mat(std::size_t r, std::size_t c, const Vec& v) { return Matrix(r, c, v); }

struct Instance {
  std::size_t n, d, p, c;
  Encoder f;
  LabeledData D;
  FeatureData Z;
  LinearHead h;
};

Instance make_instance(std::uint64_t seed) {
  Rng rng(seed);
  Instance in{};
  in.n = 3 + rng.below(18);
  in.d = 2 + rng.below(9);
  in.p = 2 + rng.below(7);
  in.c = 2 + rng.below(4);
  in.f = random_encoder(rng, {in.d, 9, in.p});
  in.D = random_labeled(rng, in.n, in.d, in.c);
  in.Z = encode(in.f, in.D);
  in.h = random_head(rng, in.c, in.p);
  return in;
}

}  // namespace

TEST(Encode, ZeroWeightsGiveZeroFeatures) {
  const Mlp f({Dense{Matrix(4, 3), Vec(4, 0.0)}, Dense{Matrix(2, 4), Vec(2, 0.0)}}, true);
  Rng rng(1);
  EXPECT_EQ(f.forward(sample_gaussian(rng, 5, 3, 0.0, 1.0)), Matrix(5, 2));
}

TEST(Encode, IdentityEncoder) {
  Rng rng(2);
  const Matrix X = sample_gaussian(rng, 6, 4, 0.0, 1.0);
  EXPECT_EQ(encode(Mlp::identity(4), X), X);
}

TEST(Encode, MatchesPerSampleLoop) {
  Rng rng(3);
  const Encoder f = random_encoder(rng, {5, 7, 3});
  const Matrix X = sample_gaussian(rng, 8, 5, 0.0, 1.0);
  const Matrix Z = f.forward(X);
  const auto& L = f.layers();
  for (std::size_t i = 0; i < X.rows(); ++i) {
    Vec h(7);
    for (std::size_t j = 0; j < 7; ++j) {
      double s = L[0].bias[j];
      for (std::size_t k = 0; k < 5; ++k) s += L[0].weight(j, k) * X(i, k);
      h[j] = std::max(0.0, s);
    }
    for (std::size_t j = 0; j < 3; ++j) {
      double s = L[1].bias[j];
      for (std::size_t k = 0; k < 7; ++k) s += L[1].weight(j, k) * h[k];
      EXPECT_NEAR(Z(i, j), s, 1e-12);
    }
  }
}

TEST(Encode, DimensionMismatch) {
  Rng rng(4);
  const Encoder f = random_encoder(rng, {5, 3});
  EXPECT_THROW(f.forward(Matrix(2, 4)), DimensionError);
  EXPECT_THROW(Mlp({Dense{Matrix(3, 2), Vec(3)}, Dense{Matrix(2, 4), Vec(2)}}), DimensionError);
}

TEST(CeLoss, UniformPredictorGivesLogC) {
  Rng rng(5);
  for (std::size_t c : {2u, 3u, 10u}) {
    const FeatureData Z = random_features(rng, 7, 4, c);
    EXPECT_DOUBLE_EQ(ce_loss(LinearHead::zeros(c, 4), Z), std::log(static_cast<double>(c)));
  }
}

TEST(CeLoss, SaturatedCorrectLogit) {
  const LinearHead h(Matrix{{100.0}, {-100.0}}, Vec{0.0, 0.0});
  EXPECT_LE(ce_loss(h, FeatureData{Matrix{{1.0}}, {0}, 2}), 1e-9);
}

TEST(CeLoss, MatchesDefinition) {
  const Instance in = make_instance(6);
  double total = 0.0;
  for (std::size_t i = 0; i < in.n; ++i) {
    Vec s(in.c);
    double z = 0.0;
    for (std::size_t j = 0; j < in.c; ++j) {
      s[j] = in.h.b[j];
      for (std::size_t k = 0; k < in.p; ++k) s[j] += in.h.W(j, k) * in.Z.Z(i, k);
      z += std::exp(s[j]);
    }
    total += -std::log(std::exp(s[in.Z.y[i]]) / z);
  }
  EXPECT_NEAR(ce_loss(in.h, in.Z), total / in.n, 1e-12);
}

TEST(CeLoss, InvariantToUniformBiasShift) {
  const Instance in = make_instance(7);
  LinearHead shifted = in.h;
  for (double& b : shifted.b) b += 3.7;
  EXPECT_NEAR(ce_loss(in.h, in.Z), ce_loss(shifted, in.Z), 1e-10);
}

TEST(CeLoss, LabelOutOfRange) {
  EXPECT_THROW(ce_loss(LinearHead::zeros(2, 1), FeatureData{Matrix{{1.0}}, {2}, 3}), Error);
  EXPECT_THROW(ce_loss(LinearHead::zeros(2, 2), FeatureData{Matrix{{1.0}}, {0}, 2}), DimensionError);
}

TEST(GradHead, UniformSoftmaxClosedForm) {
  const std::size_t c = 3;
  const Matrix z{{0.5, -2.0, 1.5}};
  for (double scale : {1.0, 4.0}) {
    const HeadGrad g = grad_head(LinearHead::zeros(c, 3), FeatureData{scale * z, {1}, c});
    for (std::size_t j = 0; j < c; ++j) {
      const double coeff = 1.0 / 3.0 - (j == 1 ? 1.0 : 0.0);
      EXPECT_NEAR(g.db[j], coeff, 1e-15);
      for (std::size_t k = 0; k < 3; ++k) EXPECT_NEAR(g.dW(j, k), coeff * scale * z(0, k), 1e-14);
    }
  }
}

TEST(GradHead, StationaryAtSeparableMinimizer) {
  // Both points in class 0, so a large class-0 bias is a near minimizer.
  const FeatureData Z{Matrix{{1.0}, {-1.0}}, {0, 0}, 2};
  const LinearHead h(Matrix{{0.0}, {0.0}}, Vec{20.0, 0.0});
  EXPECT_LE(norm2(grad_head_flat(h, Z)), 1e-6);
}

TEST(GradHead, FiniteDifferences) {
  for (std::uint64_t s = 10; s < 15; ++s) {
    const Instance in = make_instance(s);
    const Vec fd = central_diff(in.h.flatten(), [&](const Vec& w) {
      return ce_loss(LinearHead::unflatten(in.c, in.p, w), in.Z);
    });
    EXPECT_LE(rel_err(grad_head_flat(in.h, in.Z), fd), 1e-5);
  }
}

TEST(GradFeatures, ZeroWeightsGiveZero) {
  Rng rng(20);
  const FeatureData Z = random_features(rng, 5, 3, 3);
  EXPECT_EQ(grad_features(LinearHead::zeros(3, 3), Z), Matrix(5, 3));
}

TEST(GradFeatures, DuplicateSampleDuplicatesRow) {
  Rng rng(21);
  FeatureData Z = random_features(rng, 4, 3, 3);
  for (std::size_t k = 0; k < 3; ++k) Z.Z(3, k) = Z.Z(1, k);
  Z.y[3] = Z.y[1];
  const Matrix g = grad_features(random_head(rng, 3, 3), Z);
  for (std::size_t k = 0; k < 3; ++k) EXPECT_EQ(g(3, k), g(1, k));
}

TEST(GradFeatures, FiniteDifferences) {
  for (std::uint64_t s = 22; s < 27; ++s) {
    const Instance in = make_instance(s);
    const Vec fd = central_diff(in.Z.Z.storage(), [&](const Vec& z) {
      return ce_loss(in.h, FeatureData{mat(in.n, in.p, z), in.Z.y, in.c});
    });
    EXPECT_LE(rel_err(grad_features(in.h, in.Z).storage(), fd), 1e-5);
  }
}

TEST(GradInputs, FiniteDifferences) {
  for (std::uint64_t s = 30; s < 35; ++s) {
    const Instance in = make_instance(s);
    const Vec fd = central_diff(in.D.X.storage(), [&](const Vec& x) {
      return ce_loss(in.h, FeatureData{in.f.forward(mat(in.n, in.d, x)), in.D.y, in.c});
    });
    EXPECT_LE(rel_err(grad_inputs(in.f, in.h, in.D).storage(), fd), 1e-4);
  }
}

TEST(GradInputsMatching, IdentityEncoder) {
  Rng rng(36);
  const Matrix nu = sample_gaussian(rng, 5, 3, 0.0, 1.0);
  const Matrix zeta = sample_gaussian(rng, 5, 3, 0.0, 1.0);
  EXPECT_EQ(grad_inputs_matching(Mlp::identity(3), nu, zeta), nu - zeta);
}

TEST(GradInputsMatching, ZeroWhenMatched) {
  Rng rng(37);
  const Encoder f = random_encoder(rng, {4, 6, 2});
  const Matrix nu = sample_gaussian(rng, 5, 4, 0.0, 1.0);
  EXPECT_EQ(grad_inputs_matching(f, nu, f.forward(nu)), Matrix(5, 4));
}

TEST(GradInputsMatching, FiniteDifferences) {
  for (std::uint64_t s = 38; s < 43; ++s) {
    Instance in = make_instance(s);
    Rng rng(s + 100);
    const Matrix zeta = sample_gaussian(rng, in.n, in.p, 0.0, 1.0);
    const Vec fd = central_diff(in.D.X.storage(), [&](const Vec& x) {
      return matching_loss(in.f, mat(in.n, in.d, x), zeta);
    });
    EXPECT_LE(rel_err(grad_inputs_matching(in.f, in.D.X, zeta).storage(), fd), 1e-4);
  }
}

TEST(Hvp, ZeroDirection) {
  const Instance in = make_instance(44);
  const Vec hv = hvp_head(in.h, in.Z, Vec(in.h.param_count(), 0.0));
  for (double v : hv) EXPECT_EQ(v, 0.0);
}

TEST(Hvp, PositiveSemidefiniteAndSymmetric) {
  for (std::uint64_t s = 45; s < 50; ++s) {
    const Instance in = make_instance(s);
    Rng rng(s);
    const Vec u = random_vec(rng, in.h.param_count());
    const Vec v = random_vec(rng, in.h.param_count());
    EXPECT_GE(dot(v, hvp_head(in.h, in.Z, v)), -1e-10);
    EXPECT_NEAR(dot(u, hvp_head(in.h, in.Z, v)), dot(v, hvp_head(in.h, in.Z, u)), 1e-10);
  }
}

TEST(Hvp, FiniteDifferenceOfGradient) {
  for (std::uint64_t s = 50; s < 55; ++s) {
    const Instance in = make_instance(s);
    Rng rng(s);
    const Vec v = random_vec(rng, in.h.param_count());
    const double eps = 1e-5;
    Vec wp = in.h.flatten(), wm = wp;
    for (std::size_t i = 0; i < v.size(); ++i) {
      wp[i] += eps * v[i];
      wm[i] -= eps * v[i];
    }
    const Vec gp = grad_head_flat(LinearHead::unflatten(in.c, in.p, wp), in.Z);
    const Vec gm = grad_head_flat(LinearHead::unflatten(in.c, in.p, wm), in.Z);
    Vec fd(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) fd[i] = (gp[i] - gm[i]) / (2 * eps);
    EXPECT_LE(rel_err(hvp_head(in.h, in.Z, v), fd), 1e-4);
  }
}

TEST(CrossGradVjp, ZeroDirection) {
  const Instance in = make_instance(56);
  const Vec zero(in.h.param_count(), 0.0);
  EXPECT_EQ(cross_grad_vjp(in.h, in.Z, zero), Matrix(in.n, in.p));
}

TEST(CrossGradVjp, TwoClassOneFeatureSymbolic) {
  // grad_head = [(p - e_y) z ; (p - e_y)] with p = softmax(w z + b). For v = (v0, v1, c0, c1):
  // d/dz <g, v> = sum_k (p_k - e_yk) v_k + sum_k dp_k/dz (v_k z + c_k), dp/dz = S w.
  const double z = 0.8, w0 = 0.3, w1 = -1.1, b0 = 0.2, b1 = 0.4;
  const Vec v{0.7, -0.4, 1.3, 0.5};
  const LinearHead h(Matrix{{w0}, {w1}}, Vec{b0, b1});
  const double a0 = w0 * z + b0, a1 = w1 * z + b1;
  const double p0 = std::exp(a0) / (std::exp(a0) + std::exp(a1)), p1 = 1 - p0;
  const double dp0 = p0 * p1 * (w0 - w1), dp1 = -dp0;
  for (std::uint32_t y : {0u, 1u}) {
    const double r0 = p0 - (y == 0), r1 = p1 - (y == 1);
    const double expected = r0 * v[0] + r1 * v[1] + dp0 * (v[0] * z + v[2]) + dp1 * (v[1] * z + v[3]);
    const Matrix got = cross_grad_vjp(h, FeatureData{Matrix{{z}}, {y}, 2}, v);
    EXPECT_NEAR(got(0, 0), expected, 1e-14);
  }
}

TEST(CrossGradVjp, FiniteDifferencesFeatureAndInput) {
  for (std::uint64_t s = 57; s < 62; ++s) {
    const Instance in = make_instance(s);
    Rng rng(s);
    const Vec v = random_vec(rng, in.h.param_count());
    const Vec fdz = central_diff(in.Z.Z.storage(), [&](const Vec& z) {
      return dot(grad_head_flat(in.h, FeatureData{mat(in.n, in.p, z), in.Z.y, in.c}), v);
    });
    EXPECT_LE(rel_err(cross_grad_vjp(in.h, in.Z, v).storage(), fdz), 1e-4);
    const Vec fdx = central_diff(in.D.X.storage(), [&](const Vec& x) {
      return dot(grad_head_flat(in.h, FeatureData{in.f.forward(mat(in.n, in.d, x)), in.D.y, in.c}), v);
    });
    EXPECT_LE(rel_err(cross_grad_vjp(in.f, in.h, in.D, v).storage(), fdx), 1e-4);
  }
}

TEST(CrossGradVjp, LengthMismatch) {
  const Instance in = make_instance(63);
  EXPECT_THROW(cross_grad_vjp(in.h, in.Z, Vec(1)), DimensionError);
  EXPECT_THROW(hvp_head(in.h, in.Z, Vec(1)), DimensionError);
}

TEST(Frozen, GradientOpsLeaveEncoderUntouched) {
  Instance in = make_instance(64);
  const Encoder before = in.f;
  Rng rng(64);
  const Vec v = random_vec(rng, in.h.param_count());
  (void)grad_inputs(in.f, in.h, in.D);
  (void)grad_inputs_matching(in.f, in.D.X, in.Z.Z);
  (void)cross_grad_vjp(in.f, in.h, in.D, v);
  (void)encode(in.f, in.D);
  EXPECT_EQ(in.f, before);
  EXPECT_TRUE(in.f.frozen());
  EXPECT_THROW(in.f.mutable_layers(), Error);
}

TEST(HeadFlatten, RowMajorThenBias) {
  const LinearHead h(Matrix{{1, 2}, {3, 4}}, Vec{5, 6});
  EXPECT_EQ(h.flatten(), (Vec{1, 2, 3, 4, 5, 6}));
  EXPECT_EQ(LinearHead::unflatten(2, 2, h.flatten()), h);
  EXPECT_THROW(LinearHead::unflatten(2, 2, Vec(5)), DimensionError);
  EXPECT_THROW(LinearHead::zeros(1, 3), Error);
}

TEST(Predict, TiesGoToLowestClass) {
  const auto y = predict(LinearHead::zeros(4, 2), Matrix{{1, 2}, {-3, 0}});
  EXPECT_EQ(y, (std::vector<std::uint32_t>{0, 0}));
}
