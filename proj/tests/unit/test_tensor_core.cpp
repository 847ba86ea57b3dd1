#include <gtest/gtest.h>

#include <cmath>
#include <functional>
#include <numeric>

#include "phg/autodiff.hpp"
#include "phg/error.hpp"
#include "phg/optim.hpp"
#include "phg/rng.hpp"
#include "phg/tensor.hpp"

namespace phg {
namespace {

Tensor random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(shape));
  for (float& v : t.data()) v = static_cast<float>(rng.uniform(lo, hi));
  return t;
}

LabelMap random_labels(std::size_t h, std::size_t w, std::size_t k, Rng& rng) {
  LabelMap m(h, w);
  for (auto& l : m.labels) l = static_cast<std::uint8_t>(rng.below(k));
  return m;
}

// Direct six-loop cross-correlation used as the reference for conv2d.
Tensor conv_oracle(const Tensor& in, const Tensor& k, const Tensor* bias, std::size_t pad) {
  const std::size_t ci = in.dim(0), h = in.dim(1), w = in.dim(2);
  const std::size_t co = k.dim(0), kh = k.dim(2), kw = k.dim(3);
  const std::size_t ho = h + 2 * pad - kh + 1, wo = w + 2 * pad - kw + 1;
  Tensor out({co, ho, wo});
  for (std::size_t o = 0; o < co; ++o)
    for (std::size_t y = 0; y < ho; ++y)
      for (std::size_t x = 0; x < wo; ++x) {
        double s = bias ? (*bias)[o] : 0.0;
        for (std::size_t c = 0; c < ci; ++c)
          for (std::size_t dy = 0; dy < kh; ++dy)
            for (std::size_t dx = 0; dx < kw; ++dx) {
              const long iy = static_cast<long>(y + dy) - static_cast<long>(pad);
              const long ix = static_cast<long>(x + dx) - static_cast<long>(pad);
              if (iy < 0 || ix < 0 || iy >= static_cast<long>(h) || ix >= static_cast<long>(w)) continue;
              s += static_cast<double>(in.at(c, iy, ix)) * k[((o * ci + c) * kh + dy) * kw + dx];
            }
        out.at(o, y, x) = static_cast<float>(s);
      }
  return out;
}

TEST(Conv2d, AdjacentSumKernelOnOneDimensionalSignal) {
  const Tensor in({1, 1, 5}, {1, 2, 3, 4, 5});
  const Tensor k({1, 1, 1, 2}, {1, 1});
  const Tensor out = conv2d(in, k, nullptr, 0);
  EXPECT_EQ(out, Tensor({1, 1, 4}, {3, 5, 7, 9}));
}

TEST(Conv2d, IdentityKernelPreservesInput) {
  Rng rng(3);
  const Tensor in = random_tensor({2, 6, 7}, rng);
  Tensor k({2, 2, 3, 3});
  k[((0 * 2 + 0) * 3 + 1) * 3 + 1] = 1.0f;
  k[((1 * 2 + 1) * 3 + 1) * 3 + 1] = 1.0f;
  EXPECT_EQ(conv2d(in, k, nullptr, 1), in);
}

TEST(Conv2d, MatchesLoopOracle) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    Rng rng(seed);
    const Tensor in = random_tensor({3, 8, 8}, rng);
    const Tensor k = random_tensor({4, 3, 3, 3}, rng);
    const Tensor b = random_tensor({4}, rng);
    for (std::size_t pad : {0u, 1u}) {
      EXPECT_LT(max_abs_diff(conv2d(in, k, nullptr, pad), conv_oracle(in, k, nullptr, pad)), 1e-5);
      EXPECT_LT(max_abs_diff(conv2d(in, k, &b, pad), conv_oracle(in, k, &b, pad)), 1e-5);
    }
  }
}

TEST(Conv2d, PointwiseMatchesOracle) {
  Rng rng(11);
  const Tensor in = random_tensor({5, 4, 6}, rng);
  const Tensor k = random_tensor({3, 5, 1, 1}, rng);
  EXPECT_LT(max_abs_diff(conv2d(in, k, nullptr, 0), conv_oracle(in, k, nullptr, 0)), 1e-5);
}

TEST(Conv2d, IsLinearInInput) {
  Rng rng(5);
  const Tensor x = random_tensor({3, 8, 8}, rng);
  const Tensor y = random_tensor({3, 8, 8}, rng);
  const Tensor k = random_tensor({4, 3, 3, 3}, rng);
  const float a = 0.7f, b = -1.3f;
  Tensor mix(x.shape());
  for (std::size_t i = 0; i < mix.size(); ++i) mix[i] = a * x[i] + b * y[i];
  const Tensor lhs = conv2d(mix, k, nullptr, 1);
  const Tensor cx = conv2d(x, k, nullptr, 1), cy = conv2d(y, k, nullptr, 1);
  Tensor rhs(lhs.shape());
  for (std::size_t i = 0; i < rhs.size(); ++i) rhs[i] = a * cx[i] + b * cy[i];
  EXPECT_LT(max_abs_diff(lhs, rhs), 1e-5);
}

TEST(Conv2d, RejectsChannelMismatch) {
  EXPECT_THROW(conv2d(Tensor({2, 4, 4}), Tensor({1, 3, 3, 3}), nullptr, 1), DataError);
}

// ---------------------------------------------------------------------------
// Finite-difference gradient checks

using Build = std::function<Var(Tape&, std::span<const Var>)>;

double weighted_output(const Build& f, const std::vector<Tensor>& inputs, const Tensor& w) {
  Tape tape;
  std::vector<Var> vars;
  for (const Tensor& t : inputs) vars.push_back(tape.constant(t));
  const Tensor& y = tape.value(f(tape, vars));
  double s = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) s += static_cast<double>(w[i]) * y[i];
  return s;
}

// Largest norm-wise relative error between analytic and central-difference
// gradients over all inputs.
// `exact` optionally evaluates the unweighted output in double precision; scalar
// losses need it because a float loss value swamps the 2e-3 stencil.
using Exact = std::function<double(const std::vector<Tensor>&)>;

double fd_relative_error(const Build& f, std::vector<Tensor> inputs, Rng& rng, const Exact& exact = {},
                         double eps = 1e-3) {
  Tensor w;
  {
    Tape probe;
    std::vector<Var> vars;
    for (const Tensor& t : inputs) vars.push_back(probe.constant(t));
    w = random_tensor(probe.value(f(probe, vars)).shape(), rng, 0.5, 1.5);
  }
  Tape tape;
  std::vector<Var> vars;
  for (std::size_t i = 0; i < inputs.size(); ++i) vars.push_back(tape.parameter(i, inputs[i]));
  const Var out = f(tape, vars);
  const Var loss = ad::sum(tape, ad::mul(tape, out, tape.constant(w)));
  const std::vector<Tensor> grads = tape.gradients(loss, inputs);

  double worst = 0.0;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    double diff2 = 0.0, a2 = 0.0, n2 = 0.0;
    for (std::size_t j = 0; j < inputs[i].size(); ++j) {
      std::vector<Tensor> plus = inputs, minus = inputs;
      plus[i][j] += static_cast<float>(eps);
      minus[i][j] -= static_cast<float>(eps);
      const double fp = exact ? w[0] * exact(plus) : weighted_output(f, plus, w);
      const double fm = exact ? w[0] * exact(minus) : weighted_output(f, minus, w);
      const double num = (fp - fm) /
                         (static_cast<double>(plus[i][j]) - minus[i][j]);
      const double ana = grads[i][j];
      diff2 += (ana - num) * (ana - num);
      a2 += ana * ana;
      n2 += num * num;
    }
    const double denom = std::max({std::sqrt(a2), std::sqrt(n2), 1e-8});
    worst = std::max(worst, std::sqrt(diff2) / denom);
  }
  return worst;
}

// Values pushed away from zero so ReLU kinks stay outside the FD stencil.
Tensor away_from_zero(Tensor t) {
  for (float& v : t.data()) {
    if (std::abs(v) < 0.05f) v = v < 0 ? v - 0.05f : v + 0.05f;
  }
  return t;
}

// Distinct values spaced well apart so pooling winners never swap.
Tensor well_separated(Shape shape, Rng& rng) {
  Tensor t(std::move(shape));
  std::vector<std::size_t> order(t.size());
  std::iota(order.begin(), order.end(), 0);
  for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
  for (std::size_t i = 0; i < t.size(); ++i) t[order[i]] = 0.05f * static_cast<float>(i) - 1.0f;
  return t;
}

constexpr int kSeeds = 20;
constexpr double kTol = 1e-3;

TEST(GradientCheck, Conv2dSamePadding) {
  for (int s = 0; s < kSeeds; ++s) {
    Rng rng(100 + s);
    auto f = [](Tape& t, std::span<const Var> v) { return ad::conv2d(t, v[0], v[1], v[2], 1); };
    EXPECT_LT(fd_relative_error(f, {random_tensor({2, 5, 4}, rng), random_tensor({3, 2, 3, 3}, rng),
                                    random_tensor({3}, rng)}, rng), kTol) << "seed " << s;
  }
}

TEST(GradientCheck, Conv2dValidAndPointwise) {
  for (int s = 0; s < kSeeds; ++s) {
    Rng rng(200 + s);
    auto valid = [](Tape& t, std::span<const Var> v) { return ad::conv2d(t, v[0], v[1], Var{}, 0); };
    EXPECT_LT(fd_relative_error(valid, {random_tensor({2, 4, 5}, rng), random_tensor({2, 2, 1, 2}, rng)}, rng), kTol);
    auto point = [](Tape& t, std::span<const Var> v) { return ad::conv2d(t, v[0], v[1], v[2], 0); };
    EXPECT_LT(fd_relative_error(point, {random_tensor({3, 3, 4}, rng), random_tensor({2, 3, 1, 1}, rng),
                                        random_tensor({2}, rng)}, rng), kTol);
  }
}

TEST(GradientCheck, Relu) {
  for (int s = 0; s < kSeeds; ++s) {
    Rng rng(300 + s);
    auto f = [](Tape& t, std::span<const Var> v) { return ad::relu(t, v[0]); };
    EXPECT_LT(fd_relative_error(f, {away_from_zero(random_tensor({2, 3, 4}, rng))}, rng), kTol);
  }
}

TEST(GradientCheck, MaxPool) {
  for (int s = 0; s < kSeeds; ++s) {
    Rng rng(400 + s);
    auto f = [](Tape& t, std::span<const Var> v) { return ad::max_pool2(t, v[0]); };
    EXPECT_LT(fd_relative_error(f, {well_separated({2, 4, 6}, rng)}, rng), kTol);
  }
}

TEST(GradientCheck, UpsampleConcatSlice) {
  for (int s = 0; s < kSeeds; ++s) {
    Rng rng(500 + s);
    auto up = [](Tape& t, std::span<const Var> v) { return ad::upsample2(t, v[0]); };
    EXPECT_LT(fd_relative_error(up, {random_tensor({2, 3, 2}, rng)}, rng), kTol);
    auto cat = [](Tape& t, std::span<const Var> v) { return ad::concat_channels(t, v); };
    EXPECT_LT(fd_relative_error(cat, {random_tensor({1, 3, 3}, rng), random_tensor({2, 3, 3}, rng)}, rng), kTol);
    auto sl = [](Tape& t, std::span<const Var> v) { return ad::slice_channels(t, v[0], 1, 3); };
    EXPECT_LT(fd_relative_error(sl, {random_tensor({4, 2, 3}, rng)}, rng), kTol);
  }
}

TEST(GradientCheck, SoftmaxAndElementwise) {
  for (int s = 0; s < kSeeds; ++s) {
    Rng rng(600 + s);
    auto sm = [](Tape& t, std::span<const Var> v) { return ad::softmax(t, v[0]); };
    EXPECT_LT(fd_relative_error(sm, {random_tensor({4, 2, 3}, rng, -2, 2)}, rng), kTol);
    auto add = [](Tape& t, std::span<const Var> v) { return ad::add(t, v[0], v[1]); };
    EXPECT_LT(fd_relative_error(add, {random_tensor({2, 2, 2}, rng), random_tensor({2, 2, 2}, rng)}, rng), kTol);
    auto mul = [](Tape& t, std::span<const Var> v) { return ad::mul(t, v[0], v[1]); };
    EXPECT_LT(fd_relative_error(mul, {random_tensor({2, 2, 2}, rng), random_tensor({2, 2, 2}, rng)}, rng), kTol);
    auto sc = [](Tape& t, std::span<const Var> v) { return ad::scale(t, v[0], -0.37f); };
    EXPECT_LT(fd_relative_error(sc, {random_tensor({3, 2, 2}, rng)}, rng), kTol);
    auto sm2 = [](Tape& t, std::span<const Var> v) { return ad::sum(t, v[0]); };
    EXPECT_LT(fd_relative_error(sm2, {random_tensor({3, 2, 2}, rng)}, rng), kTol);
  }
}

TEST(GradientCheck, Losses) {
  for (int s = 0; s < kSeeds; ++s) {
    Rng rng(700 + s);
    const LabelMap target = random_labels(3, 4, 5, rng);
    auto ce = [&](Tape& t, std::span<const Var> v) { return ad::cross_entropy(t, v[0], target); };
    auto ce_exact = [&](const std::vector<Tensor>& in) { return loss_cross_entropy(in[0], target); };
    EXPECT_LT(fd_relative_error(ce, {random_tensor({5, 3, 4}, rng, -2, 2)}, rng, ce_exact), kTol);

    const Tensor reg_target = random_tensor({2, 3, 3}, rng);
    auto l2 = [&](Tape& t, std::span<const Var> v) { return ad::l2_loss(t, v[0], reg_target); };
    auto l2_exact = [&](const std::vector<Tensor>& in) { return loss_l2(in[0], reg_target); };
    EXPECT_LT(fd_relative_error(l2, {random_tensor({2, 3, 3}, rng)}, rng, l2_exact), kTol);

    const Tensor teacher = random_tensor({4, 3, 3}, rng, -2, 2);
    auto kl = [&](Tape& t, std::span<const Var> v) { return ad::kl_logits(t, v[0], teacher); };
    auto kl_exact = [&](const std::vector<Tensor>& in) { return loss_kl_logits(in[0], teacher); };
    EXPECT_LT(fd_relative_error(kl, {random_tensor({4, 3, 3}, rng, -2, 2)}, rng, kl_exact), kTol);
  }
}

TEST(Backward, LinearFunctionGradientIsTheOtherFactor) {
  Rng rng(1);
  const Tensor x = random_tensor({2, 3, 3}, rng);
  const std::vector<Tensor> params{random_tensor({2, 3, 3}, rng)};
  Tape tape;
  const Var w = tape.parameter(0, params[0]);
  const Var loss = ad::sum(tape, ad::mul(tape, w, tape.constant(x)));
  const auto grads = tape.gradients(loss, params);
  EXPECT_EQ(grads[0], x);
}

TEST(Backward, ConstantLossGivesZeroGradients) {
  const std::vector<Tensor> params{Tensor({3}, 2.0f), Tensor({2, 2}, 1.0f)};
  Tape tape;
  tape.parameter(0, params[0]);
  const Var loss = ad::sum(tape, tape.constant(Tensor({4}, 1.5f)));
  const auto grads = tape.gradients(loss, params);
  EXPECT_EQ(grads[0], Tensor({3}));
  EXPECT_EQ(grads[1], Tensor({2, 2}));
}

TEST(Backward, VisitsNodesInReverseRecordingOrder) {
  Rng rng(2);
  const std::vector<Tensor> params{random_tensor({1, 2, 2}, rng)};
  Tape tape;
  const Var p = tape.parameter(0, params[0]);
  const Var a = ad::scale(tape, p, 2.0f);
  const Var b = ad::relu(tape, a);
  const Var c = ad::add(tape, b, a);
  const Var loss = ad::sum(tape, c);
  tape.gradients(loss, params);
  const auto& order = tape.last_backward_order();
  ASSERT_EQ(order.size(), 5u);
  EXPECT_TRUE(std::is_sorted(order.rbegin(), order.rend()));
  EXPECT_EQ(order.front(), loss.id);
  EXPECT_EQ(order.back(), p.id);
}

TEST(Backward, RejectsNonScalarLossAndEmptyTape) {
  Tape empty;
  const std::vector<Tensor> none;
  EXPECT_THROW(empty.gradients(Var{0}, none), DataError);
  Tape tape;
  const Var v = tape.constant(Tensor({2}, 1.0f));
  EXPECT_THROW(tape.gradients(v, none), DataError);
}

// ---------------------------------------------------------------------------
// Losses

double ce_oracle(const Tensor& logits, const LabelMap& target) {
  const std::size_t k = logits.dim(0), h = logits.dim(1), w = logits.dim(2);
  double total = 0.0;
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      double z = 0.0;
      for (std::size_t c = 0; c < k; ++c) z += std::exp(static_cast<double>(logits.at(c, y, x)));
      total += -std::log(std::exp(static_cast<double>(logits.at(target.at(y, x), y, x))) / z);
    }
  return total / static_cast<double>(h * w);
}

TEST(Losses, CrossEntropyUniformLogitsIsLogK) {
  LabelMap target(3, 3, 2);
  EXPECT_NEAR(loss_cross_entropy(Tensor({8, 3, 3}), target), std::log(8.0), 1e-6);
  EXPECT_NEAR(std::log(8.0), 2.0794, 1e-4);
}

TEST(Losses, CrossEntropyPerfectPredictionApproachesZero) {
  LabelMap target(2, 2, 1);
  Tensor logits({3, 2, 2});
  for (std::size_t p = 0; p < 4; ++p) logits[1 * 4 + p] = 50.0f;
  EXPECT_LT(loss_cross_entropy(logits, target), 1e-12);
}

TEST(Losses, CrossEntropyMatchesScalarOracle) {
  for (std::uint64_t s = 0; s < 5; ++s) {
    Rng rng(s);
    const Tensor logits = random_tensor({8, 4, 4}, rng, -3, 3);
    const LabelMap target = random_labels(4, 4, 8, rng);
    EXPECT_NEAR(loss_cross_entropy(logits, target), ce_oracle(logits, target), 1e-5);
  }
}

TEST(Losses, CrossEntropyRejectsOutOfRangeClass) {
  LabelMap target(1, 1, 8);
  EXPECT_THROW(loss_cross_entropy(Tensor({8, 1, 1}), target), DataError);
}

TEST(Losses, L2Cases) {
  Rng rng(9);
  const Tensor a = random_tensor({2, 3, 3}, rng);
  EXPECT_EQ(loss_l2(a, a), 0.0);
  Tensor b = a;
  for (float& v : b.data()) v += 1.0f;
  EXPECT_NEAR(loss_l2(b, a), 1.0, 1e-6);
  const Tensor c = random_tensor({2, 3, 3}, rng);
  double oracle = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) oracle += (a[i] - c[i]) * (a[i] - c[i]);
  EXPECT_NEAR(loss_l2(a, c), oracle / 18.0, 1e-6);
  EXPECT_THROW(loss_l2(a, Tensor({3, 3, 2})), DataError);
}

TEST(Losses, KlCases) {
  Rng rng(12);
  const Tensor a = random_tensor({8, 3, 3}, rng, -2, 2);
  EXPECT_NEAR(loss_kl_logits(a, a), 0.0, 1e-9);

  Tensor teacher({8, 2, 2});
  for (std::size_t p = 0; p < 4; ++p) teacher[3 * 4 + p] = 60.0f;
  EXPECT_NEAR(loss_kl_logits(Tensor({8, 2, 2}), teacher), std::log(8.0), 1e-6);

  const Tensor s = random_tensor({8, 3, 3}, rng, -2, 2);
  const Tensor t = random_tensor({8, 3, 3}, rng, -2, 2);
  double oracle = 0.0;
  for (std::size_t y = 0; y < 3; ++y)
    for (std::size_t x = 0; x < 3; ++x) {
      double zs = 0.0, zt = 0.0;
      for (std::size_t c = 0; c < 8; ++c) {
        zs += std::exp(static_cast<double>(s.at(c, y, x)));
        zt += std::exp(static_cast<double>(t.at(c, y, x)));
      }
      for (std::size_t c = 0; c < 8; ++c) {
        const double p = std::exp(static_cast<double>(t.at(c, y, x))) / zt;
        const double q = std::exp(static_cast<double>(s.at(c, y, x))) / zs;
        oracle += p * (std::log(p) - std::log(q));
      }
    }
  EXPECT_NEAR(loss_kl_logits(s, t), oracle / 9.0, 1e-5);
  EXPECT_THROW(loss_kl_logits(s, Tensor({7, 3, 3})), DataError);
}

TEST(Softmax, RowsSumToOne) {
  Rng rng(4);
  const Tensor p = softmax_channels(random_tensor({8, 5, 5}, rng, -10, 10));
  for (std::size_t px = 0; px < 25; ++px) {
    double s = 0.0;
    for (std::size_t c = 0; c < 8; ++c) s += p[c * 25 + px];
    EXPECT_NEAR(s, 1.0, 1e-6);
  }
}

TEST(Tensor, ArgmaxBreaksTiesTowardLowestClass) {
  const Tensor scores({3, 1, 2}, {0.5f, 0.1f, 0.5f, 0.7f, 0.2f, 0.7f});
  const LabelMap m = argmax_channels(scores);
  EXPECT_EQ(m.labels, (std::vector<std::uint8_t>{0, 1}));
}

TEST(Tensor, ConstructorRejectsSizeMismatch) {
  EXPECT_THROW(Tensor({2, 2}, std::vector<float>{1, 2, 3}), DataError);
}

// ---------------------------------------------------------------------------
// Optimizer

TEST(CyclicLr, StaysWithinBoundsAndPeaksMidCycle) {
  CyclicLr s{1e-4, 1e-2, 10};
  for (std::size_t i = 0; i < 100; ++i) {
    EXPECT_GE(s.at(i), 1e-4 - 1e-15);
    EXPECT_LE(s.at(i), 1e-2 + 1e-15);
  }
  EXPECT_DOUBLE_EQ(s.at(0), 1e-4);
  EXPECT_DOUBLE_EQ(s.at(5), 1e-2);
  EXPECT_DOUBLE_EQ(s.at(10), 1e-4);
}

TEST(AdamW, ZeroGradientZeroDecayLeavesParams) {
  std::vector<Tensor> params{Tensor({3}, {1.0f, -2.0f, 3.0f})};
  const std::vector<Tensor> grads{Tensor({3})};
  AdamWConfig cfg;
  cfg.weight_decay = 0.0;
  OptimizerState st(cfg, params);
  for (int i = 0; i < 5; ++i) adamw_step(params, grads, st);
  EXPECT_EQ(params[0], Tensor({3}, {1.0f, -2.0f, 3.0f}));
  EXPECT_EQ(st.step, 5u);
}

TEST(AdamW, ConstantGradientMovesOppositeItsSign) {
  std::vector<Tensor> params{Tensor({2}, {0.0f, 0.0f})};
  const std::vector<Tensor> grads{Tensor({2}, {0.5f, -2.0f})};
  OptimizerState st(AdamWConfig{}, params);
  for (int i = 0; i < 50; ++i) adamw_step(params, grads, st);
  EXPECT_LT(params[0][0], 0.0f);
  EXPECT_GT(params[0][1], 0.0f);
}

TEST(AdamW, QuadraticTrajectoryMatchesScalarReimplementation) {
  // f(p) = (p - 3)^2, gradient 2(p - 3).
  AdamWConfig cfg;
  cfg.weight_decay = 0.01;
  cfg.schedule = CyclicLr{0.01, 0.1, 8};
  std::vector<Tensor> params{Tensor({1}, 0.5f)};
  OptimizerState st(cfg, params);

  double p = 0.5, m = 0.0, v = 0.0;
  double prev_loss = (p - 3.0) * (p - 3.0);
  for (int step = 0; step < 20; ++step) {
    const std::vector<Tensor> grads{Tensor({1}, 2.0f * (params[0][0] - 3.0f))};
    adamw_step(params, grads, st);

    const double g = 2.0 * (p - 3.0);
    const double lr = cfg.schedule.at(static_cast<std::size_t>(step));
    m = 0.9 * m + 0.1 * g;
    v = 0.999 * v + 0.001 * g * g;
    const double mh = m / (1.0 - std::pow(0.9, step + 1));
    const double vh = v / (1.0 - std::pow(0.999, step + 1));
    p = p * (1.0 - lr * 0.01) - lr * mh / (std::sqrt(vh) + 1e-8);

    EXPECT_NEAR(params[0][0], p, 1e-6) << "step " << step;
    const double loss = (p - 3.0) * (p - 3.0);
    EXPECT_LT(loss, prev_loss);
    prev_loss = loss;
  }
}

}  // namespace
}  // namespace phg
