#include <gtest/gtest.h>

#include <cmath>
#include <numeric>
#include <vector>

#include "mbert/kernels.hpp"
#include "mbert/optim.hpp"
#include "support/gradcheck.hpp"

namespace mbert {
namespace {

using testing::grad_check;
using testing::random_param;
using testing::random_tensor;

constexpr double kKernelTol = 1e-4;

Var<double> reduce(Tape<double>& tape, const Var<double>& out, const Tensor<double>& w) {
  return weighted_sum(tape, out, w);
}

TEST(Kernels, SoftmaxOfZerosIsUniform) {
  Tape<float> tape(false);
  auto y = softmax(tape, tape.constant(Tensor<float>({1, 2}, {0.f, 0.f})));
  EXPECT_FLOAT_EQ(y.value().data[0], 0.5f);
  EXPECT_FLOAT_EQ(y.value().data[1], 0.5f);
}

TEST(Kernels, SoftmaxRowsSumToOne) {
  Rng rng(7);
  Tape<float> tape(false);
  Tensor<float> x({13, 29});
  for (auto& v : x.data) v = static_cast<float>(10.0 * rng.normal());
  auto y = softmax(tape, tape.constant(x));
  for (std::size_t r = 0; r < 13; ++r) {
    double s = 0;
    for (std::size_t c = 0; c < 29; ++c) {
      const float p = y.value().data[r * 29 + c];
      EXPECT_GE(p, 0.f);
      EXPECT_LE(p, 1.f);
      s += p;
    }
    EXPECT_NEAR(s, 1.0, 1e-6);
  }
}

TEST(Kernels, LayernormOfConstantIsZero) {
  Tape<double> tape(false);
  auto y = layernorm<double>(tape, tape.constant(Tensor<double>({2, 4}, 3.25)), nullptr, 1e-5);
  for (double v : y.value().data) EXPECT_EQ(v, 0.0);
}

TEST(Kernels, ShapeErrorsNameKernelAndShapes) {
  Tape<float> tape(false);
  auto a = tape.constant(Tensor<float>({2, 3}));
  auto b = tape.constant(Tensor<float>({4, 2}));
  try {
    matmul(tape, a, b);
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    EXPECT_EQ(e.kernel(), "matmul");
    EXPECT_NE(std::string(e.what()).find("[2, 3]"), std::string::npos);
    EXPECT_NE(std::string(e.what()).find("[4, 2]"), std::string::npos);
  }
  EXPECT_THROW(add(tape, a, b), ShapeError);
  EXPECT_THROW(slice_cols(tape, a, 2, 5), ShapeError);
}

TEST(Kernels, MatmulBackwardMatchesFiniteDifferences) {
  Rng rng(1);
  auto a = random_param({3, 4}, rng);
  auto b = random_param({4, 2}, rng);
  auto w = random_tensor({3, 2}, rng);
  auto r = grad_check({a, b}, [&](Tape<double>& t) {
    return reduce(t, matmul(t, t.param(a), t.param(b)), w);
  });
  EXPECT_LT(r.max_rel_error, kKernelTol);
  EXPECT_EQ(r.checked, 20u);
}

// Each kernel is checked over at least ten random shapes.
class KernelGradients : public ::testing::TestWithParam<int> {
 protected:
  Rng rng{static_cast<std::uint64_t>(100 + GetParam())};
  std::size_t dim(std::size_t lo, std::size_t hi) { return lo + rng.below(hi - lo + 1); }
};

TEST_P(KernelGradients, Matmul) {
  const auto m = dim(1, 5), k = dim(1, 5), n = dim(1, 5);
  auto a = random_param({m, k}, rng), b = random_param({k, n}, rng);
  auto w = random_tensor({m, n}, rng);
  EXPECT_LT(grad_check({a, b}, [&](Tape<double>& t) { return reduce(t, matmul(t, t.param(a), t.param(b)), w); })
                .max_rel_error,
            kKernelTol);
}

TEST_P(KernelGradients, Linear) {
  const auto m = dim(1, 5), k = dim(1, 5), n = dim(1, 5);
  auto x = random_param({m, k}, rng), wt = random_param({n, k}, rng);
  auto w = random_tensor({m, n}, rng);
  EXPECT_LT(grad_check({x, wt}, [&](Tape<double>& t) { return reduce(t, linear(t, t.param(x), t.param(wt)), w); })
                .max_rel_error,
            kKernelTol);
}

TEST_P(KernelGradients, AddMulScaleBias) {
  const auto m = dim(1, 4), n = dim(1, 6);
  auto a = random_param({m, n}, rng), b = random_param({m, n}, rng), bias = random_param({n}, rng);
  auto w = random_tensor({m, n}, rng);
  EXPECT_LT(grad_check({a, b, bias},
                       [&](Tape<double>& t) {
                         auto s = add(t, t.param(a), mul(t, t.param(a), t.param(b)));
                         return reduce(t, scale(t, add_row(t, s, t.param(bias)), 0.7), w);
                       })
                .max_rel_error,
            kKernelTol);
}

TEST_P(KernelGradients, Softmax) {
  const auto m = dim(1, 4), n = dim(2, 7);
  auto a = random_param({m, n}, rng);
  auto w = random_tensor({m, n}, rng);
  EXPECT_LT(grad_check({a}, [&](Tape<double>& t) { return reduce(t, softmax(t, t.param(a)), w); }).max_rel_error,
            kKernelTol);
}

TEST_P(KernelGradients, Layernorm) {
  const auto m = dim(1, 4), n = dim(2, 8);
  auto x = random_param({m, n}, rng), g = random_param({n}, rng);
  auto w = random_tensor({m, n}, rng);
  EXPECT_LT(grad_check({x, g},
                       [&](Tape<double>& t) {
                         auto gv = t.param(g);
                         return reduce(t, layernorm(t, t.param(x), &gv, 1e-5), w);
                       })
                .max_rel_error,
            kKernelTol);
}

TEST_P(KernelGradients, Gelu) {
  const auto m = dim(1, 4), n = dim(1, 6);
  auto x = random_param({m, n}, rng);
  auto w = random_tensor({m, n}, rng);
  EXPECT_LT(grad_check({x}, [&](Tape<double>& t) { return reduce(t, gelu(t, t.param(x)), w); }).max_rel_error,
            kKernelTol);
}

TEST_P(KernelGradients, EmbeddingAndGather) {
  const auto V = dim(2, 6), d = dim(1, 5), n = dim(1, 7);
  auto table = random_param({V, d}, rng);
  std::vector<std::int32_t> ids(n);
  for (auto& id : ids) id = static_cast<std::int32_t>(rng.below(V));
  std::vector<std::size_t> rows = {0, n - 1, 0};
  auto w = random_tensor({rows.size(), d}, rng);
  EXPECT_LT(grad_check({table},
                       [&](Tape<double>& t) {
                         auto e = embedding(t, t.param(table), std::span<const std::int32_t>(ids));
                         return reduce(t, gather_rows(t, e, rows), w);
                       })
                .max_rel_error,
            kKernelTol);
}

TEST_P(KernelGradients, TransposeSliceConcat) {
  const auto m = dim(1, 4), n = dim(3, 7);
  auto a = random_param({m, n}, rng), b = random_param({n, m}, rng);
  const std::size_t out_cols = 1 + m + (m > 1 ? m - 1 : 0);
  auto w = random_tensor({n, out_cols}, rng);
  EXPECT_LT(grad_check({a, b},
                       [&](Tape<double>& t) {
                         auto at = transpose(t, t.param(a));           // [n, m]
                         std::vector<Var<double>> parts{slice_cols(t, t.param(b), 0, 1), at};
                         if (m > 1) parts.push_back(slice_cols(t, t.param(b), 1, m));
                         return reduce(t, concat_cols(t, parts), w);
                       })
                .max_rel_error,
            kKernelTol);
}

TEST_P(KernelGradients, Rope) {
  const auto rows = dim(1, 6), heads = dim(1, 3), hd = 2 * dim(1, 3);
  auto x = random_param({rows, heads * hd}, rng);
  std::vector<std::int64_t> pos(rows);
  for (auto& p : pos) p = static_cast<std::int64_t>(rng.below(50));
  auto w = random_tensor({rows, heads * hd}, rng);
  EXPECT_LT(grad_check({x}, [&](Tape<double>& t) { return reduce(t, rope(t, t.param(x), pos, heads, 10000.0), w); })
                .max_rel_error,
            kKernelTol);
}

TEST_P(KernelGradients, MaskedAttention) {
  const auto B = dim(1, 2), L = dim(2, 5), H = dim(1, 2), hd = dim(1, 3);
  auto q = random_param({B * L, H * hd}, rng), k = random_param({B * L, H * hd}, rng),
       v = random_param({B * L, H * hd}, rng);
  AttentionMask mask{B, L, std::vector<std::uint8_t>(B * L * L, 1)};
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t i = 0; i < L; ++i) {
      for (std::size_t j = 0; j < L; ++j) {
        // keep the diagonal visible; drop a random third of the rest
        if (i != j && rng.below(3) == 0) mask.allowed[(b * L + i) * L + j] = 0;
      }
    }
  }
  auto w = random_tensor({B * L, H * hd}, rng);
  EXPECT_LT(grad_check({q, k, v},
                       [&](Tape<double>& t) {
                         return reduce(t, attention(t, t.param(q), t.param(k), t.param(v), {B, L, H}, mask), w);
                       })
                .max_rel_error,
            kKernelTol);
}

TEST_P(KernelGradients, CrossEntropy) {
  const auto N = dim(2, 6), V = dim(2, 9);
  auto logits = random_param({N, V}, rng);
  std::vector<std::int32_t> targets(N);
  for (auto& tg : targets) tg = static_cast<std::int32_t>(rng.below(V));
  targets[0] = kIgnoreLabel;
  EXPECT_LT(grad_check({logits}, [&](Tape<double>& t) { return cross_entropy(t, t.param(logits), targets); })
                .max_rel_error,
            kKernelTol);
}

TEST_P(KernelGradients, MeanSquaredError) {
  const auto N = dim(1, 6);
  auto pred = random_param({N, 1}, rng);
  std::vector<double> targets(N);
  for (auto& tg : targets) tg = rng.normal();
  EXPECT_LT(grad_check({pred}, [&](Tape<double>& t) {
              return mse_loss(t, t.param(pred), std::span<const double>(targets));
            }).max_rel_error,
            kKernelTol);
}

INSTANTIATE_TEST_SUITE_P(RandomShapes, KernelGradients, ::testing::Range(0, 10));

TEST(Kernels, AttentionRowsSumToOneAndRespectMask) {
  Rng rng(3);
  const std::size_t L = 5, H = 1, hd = 4;
  Tape<double> tape(false);
  auto q = tape.constant(random_tensor({L, hd}, rng));
  auto k = tape.constant(random_tensor({L, hd}, rng));
  // v = identity rows so the output equals the attention weights
  Tensor<double> eye({L, L});
  for (std::size_t i = 0; i < L; ++i) eye.data[i * L + i] = 1.0;
  AttentionMask mask{1, L, std::vector<std::uint8_t>(L * L, 1)};
  mask.allowed[0 * L + 3] = 0;
  mask.allowed[2 * L + 0] = 0;
  Tensor<double> qp({L, L}), kp({L, L});
  for (std::size_t i = 0; i < L; ++i) {
    for (std::size_t c = 0; c < hd; ++c) {
      qp.data[i * L + c] = q.value().data[i * hd + c];
      kp.data[i * L + c] = k.value().data[i * hd + c];
    }
  }
  auto out = attention(tape, tape.constant(qp), tape.constant(kp), tape.constant(eye), {1, L, H}, mask);
  for (std::size_t i = 0; i < L; ++i) {
    double s = 0;
    for (std::size_t j = 0; j < L; ++j) s += out.value().data[i * L + j];
    EXPECT_NEAR(s, 1.0, 1e-6);
  }
  EXPECT_EQ(out.value().data[0 * L + 3], 0.0);
  EXPECT_EQ(out.value().data[2 * L + 0], 0.0);
}

// ---------------------------------------------------------------------------------

TEST(CrossEntropy, ConfidentCorrectClassIsNearZero) {
  Tape<double> tape(false);
  Tensor<double> logits({1, 4}, {50.0, 0.0, 0.0, 0.0});
  std::vector<std::int32_t> tg{0};
  EXPECT_NEAR(cross_entropy(tape, tape.constant(logits), tg).value().data[0], 0.0, 1e-12);
}

TEST(CrossEntropy, UniformLogitsGiveLogV) {
  Tape<double> tape(false);
  std::vector<std::int32_t> tg{3};
  const double loss = cross_entropy(tape, tape.constant(Tensor<double>({1, 8}, 0.25)), tg).value().data[0];
  EXPECT_NEAR(loss, std::log(8.0), 1e-12);
  EXPECT_NEAR(loss, 2.0794, 1e-4);
}

TEST(CrossEntropy, IgnoredPositionsContributeNothing) {
  Tape<double> tape(false);
  Tensor<double> two({2, 3}, {1.0, 2.0, 3.0, 9.0, -1.0, 0.5});
  Tensor<double> one({1, 3}, {1.0, 2.0, 3.0});
  std::vector<std::int32_t> tg2{2, kIgnoreLabel}, tg1{2};
  EXPECT_DOUBLE_EQ(cross_entropy(tape, tape.constant(two), tg2).value().data[0],
                   cross_entropy(tape, tape.constant(one), tg1).value().data[0]);
}

TEST(CrossEntropy, AllIgnoredIsEmptyLoss) {
  Tape<double> tape(false);
  std::vector<std::int32_t> tg{kIgnoreLabel, kIgnoreLabel};
  try {
    cross_entropy(tape, tape.constant(Tensor<double>({2, 3})), tg);
    FAIL();
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("empty loss"), std::string::npos);
  }
}

TEST(CrossEntropy, TargetOutOfRange) {
  Tape<double> tape(false);
  std::vector<std::int32_t> tg{3};
  EXPECT_THROW(cross_entropy(tape, tape.constant(Tensor<double>({1, 3})), tg), ShapeError);
}

// ---------------------------------------------------------------------------------

std::vector<NamedParam<double>> scalar_param(double value, double grad) {
  auto t = std::make_shared<Tensor<double>>(Shape{1}, value);
  t->grad = {grad};
  return {{"theta", t, true}};
}

TEST(AdamW, DefaultsMatchTrainingTable) {
  AdamWConfig cfg;
  EXPECT_EQ(cfg.beta1, 0.9);
  EXPECT_EQ(cfg.beta2, 0.98);
  EXPECT_EQ(cfg.eps, 1e-6);
  EXPECT_EQ(cfg.weight_decay, 1e-5);
}

TEST(AdamW, SingleStepFromZero) {
  auto params = scalar_param(0.0, 1.0);
  auto state = AdamWState<double>::fresh(params);
  AdamWConfig cfg;
  cfg.weight_decay = 0.0;
  adamw_step<double>(params, state, 1e-3, cfg);
  EXPECT_NEAR(params[0].tensor->data[0], -9.99999e-4, 1e-12);
  EXPECT_EQ(state.t, 1);
}

TEST(AdamW, ZeroGradientZeroDecayIsIdentity) {
  Rng rng(5);
  auto t = std::make_shared<Tensor<double>>(Shape{3, 4});
  for (auto& v : t->data) v = rng.normal();
  const auto before = t->data;
  t->grad.assign(t->size(), 0.0);
  std::vector<NamedParam<double>> params{{"w", t, true}};
  auto state = AdamWState<double>::fresh(params);
  AdamWConfig cfg;
  cfg.weight_decay = 0.0;
  for (int i = 0; i < 5; ++i) adamw_step<double>(params, state, 1e-2, cfg);
  EXPECT_EQ(t->data, before);
  EXPECT_EQ(state.t, 5);
}

TEST(AdamW, NonFiniteGradientNamesParameterAndStep) {
  auto params = scalar_param(1.0, std::nan(""));
  auto state = AdamWState<double>::fresh(params);
  try {
    adamw_step<double>(params, state, 1e-3, {});
    FAIL();
  } catch (const NumericError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("theta"), std::string::npos);
    EXPECT_NE(msg.find("step 1"), std::string::npos);
  }
  EXPECT_EQ(state.t, 0);
}

TEST(AdamW, DecayIsDecoupled) {
  auto params = scalar_param(2.0, 0.0);
  auto state = AdamWState<double>::fresh(params);
  AdamWConfig cfg;
  cfg.weight_decay = 0.1;
  adamw_step<double>(params, state, 0.5, cfg);
  EXPECT_DOUBLE_EQ(params[0].tensor->data[0], 2.0 * (1.0 - 0.05));
}

// ---------------------------------------------------------------------------------

TEST(LrSchedule, WarmupPeakAndTerminus) {
  LrSchedule s{5e-4, 24'000, 500'000};
  EXPECT_EQ(lr_at(0, s), 0.0);
  EXPECT_DOUBLE_EQ(lr_at(24'000, s), 5e-4);
  EXPECT_EQ(lr_at(500'000, s), 0.0);
  EXPECT_DOUBLE_EQ(lr_at(12'000, s), 2.5e-4);
  EXPECT_DOUBLE_EQ(lr_at(262'000, s), 2.5e-4);
}

TEST(LrSchedule, ContinuousAtWarmupBoundary) {
  LrSchedule s{1e-3, 100, 1000};
  EXPECT_NEAR(lr_at(99, s), lr_at(100, s), 1e-5 + 1e-12);
  EXPECT_NEAR(lr_at(101, s), lr_at(100, s), 1e-5);
}

TEST(LrSchedule, PastEndClampsWithWarning) {
  LrSchedule s{1e-3, 10, 100};
  std::string warning;
  EXPECT_EQ(lr_at(150, s, &warning), 0.0);
  EXPECT_NE(warning.find("clamped"), std::string::npos);
}

TEST(LrSchedule, Validation) {
  EXPECT_THROW((LrSchedule{1e-3, 0, 10}.validate()), std::invalid_argument);
  EXPECT_THROW((LrSchedule{1e-3, 10, 10}.validate()), std::invalid_argument);
  EXPECT_THROW((LrSchedule{0.0, 1, 10}.validate()), std::invalid_argument);
  EXPECT_NO_THROW((LrSchedule{1e-3, 1, 10}.validate()));
}

// ---------------------------------------------------------------------------------

double grad_norm(const std::vector<Tensor<double>*>& ts) {
  double s = 0;
  for (auto* t : ts) {
    for (double g : t->grad) s += g * g;
  }
  return std::sqrt(s);
}

TEST(ClipGlobalNorm, ScalesToMaxNorm) {
  Tensor<double> t({2});
  t.grad = {3.0, 4.0};
  std::vector<Tensor<double>*> ts{&t};
  EXPECT_DOUBLE_EQ(clip_global_norm<double>(ts, 1.0), 5.0);
  EXPECT_NEAR(t.grad[0], 0.6, 1e-15);
  EXPECT_NEAR(t.grad[1], 0.8, 1e-15);
}

TEST(ClipGlobalNorm, SmallGradsUnchanged) {
  Tensor<double> t({2});
  t.grad = {0.1, 0.1};
  std::vector<Tensor<double>*> ts{&t};
  clip_global_norm<double>(ts, 1.0);
  EXPECT_EQ(t.grad, (std::vector<double>{0.1, 0.1}));
}

TEST(ClipGlobalNorm, PostClipNormBoundedAndIdempotent) {
  Rng rng(11);
  for (int trial = 0; trial < 100; ++trial) {
    Tensor<double> a({1 + rng.below(8)}), b({1 + rng.below(8)});
    for (auto* t : {&a, &b}) {
      t->grad.resize(t->size());
      for (auto& g : t->grad) g = 3.0 * rng.normal();
    }
    std::vector<Tensor<double>*> ts{&a, &b};
    const double max_norm = 0.5 + rng.uniform();
    clip_global_norm<double>(ts, max_norm);
    EXPECT_LE(grad_norm(ts), max_norm * (1 + 1e-12));
    const auto ga = a.grad, gb = b.grad;
    clip_global_norm<double>(ts, max_norm);
    EXPECT_EQ(a.grad, ga);
    EXPECT_EQ(b.grad, gb);
  }
}

TEST(ClipGlobalNorm, RejectsNonFinite) {
  Tensor<double> t({1});
  t.grad = {INFINITY};
  std::vector<Tensor<double>*> ts{&t};
  EXPECT_THROW(clip_global_norm<double>(ts, 1.0), NumericError);
  EXPECT_THROW(clip_global_norm<double>(ts, 0.0), std::invalid_argument);
}

TEST(Tape, GradsAccumulateAcrossUses) {
  auto p = std::make_shared<Tensor<double>>(Shape{1, 1}, 3.0);
  Tape<double> tape;
  auto x = tape.param(p);
  auto y = mul(tape, x, x);  // d(x^2)/dx = 2x
  tape.backward(weighted_sum(tape, y, Tensor<double>({1, 1}, 1.0)));
  EXPECT_DOUBLE_EQ(p->grad[0], 6.0);
}

}  // namespace
}  // namespace mbert
