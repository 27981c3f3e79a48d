#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "pap/attack.hpp"
#include "pap/scenes.hpp"

using namespace pap;
using TD = Tensor<double>;

namespace {

double ref_sigmoid(double z) { return 1.0 / (1.0 + std::exp(-z)); }

// align_corners=false bilinear, written out per output pixel
double ref_bilinear(const std::vector<double>& in, std::size_t h, std::size_t w, std::size_t H, std::size_t W,
                    std::size_t r, std::size_t c) {
  auto src = [](std::size_t o, std::size_t n_in, std::size_t n_out) {
    double s = (static_cast<double>(o) + 0.5) * static_cast<double>(n_in) / static_cast<double>(n_out) - 0.5;
    return s < 0 ? 0.0 : s;
  };
  const double sy = src(r, h, H), sx = src(c, w, W);
  const auto y0 = static_cast<std::size_t>(std::floor(sy)), x0 = static_cast<std::size_t>(std::floor(sx));
  const std::size_t y1 = std::min(y0 + 1, h - 1), x1 = std::min(x0 + 1, w - 1);
  const double ly = sy - static_cast<double>(y0), lx = sx - static_cast<double>(x0);
  return (1 - ly) * ((1 - lx) * in[y0 * w + x0] + lx * in[y0 * w + x1]) +
         ly * ((1 - lx) * in[y1 * w + x0] + lx * in[y1 * w + x1]);
}

Model<float> small_model() {
  auto spec = ModelSpec::multi_column(5);
  return Model<float>(spec);
}

}  // namespace

TEST(DensityWeights, HandExample) {
  TD I({1, 1, 1, 1}, 1.0), pred({1, 1, 1, 1}, 0.5);
  EXPECT_NEAR(density_weights(I, pred)[0], 0.6224593, 1e-7);
}

TEST(LossOracles, RandomSmallInputs) {
  std::mt19937_64 rng(21);
  std::uniform_int_distribution<std::size_t> dim(1, 6);
  for (int t = 0; t < 1000; ++t) {
    const std::size_t h = dim(rng), w = dim(rng);
    auto I = TD::uniform({1, 1, h, w}, 0.0, 2.0, rng), pred = TD::uniform({1, 1, h, w}, -1.0, 3.0, rng);
    const auto W = density_weights(I, pred);
    double ls_ref = 0;
    for (std::size_t i = 0; i < h * w; ++i) {
      const double wr = ref_sigmoid(I[i] - pred[i]);
      ASSERT_NEAR(W[i], wr, 1e-6);
      ls_ref += wr * pred[i];
    }
    ASSERT_NEAR(scale_loss(W, pred).item(), ls_ref, 1e-6);

    // position loss: S upsampled to the image, summed over the footprint
    const std::size_t H = h * (1 + rng() % 4) + rng() % 3, Wd = w * (1 + rng() % 4) + rng() % 3;
    const std::size_t P = 1 + rng() % std::min(H, Wd);
    auto S = TD::uniform({1, 1, h, w}, 0.0, 1.0, rng);
    const auto shape = static_cast<PatchShape>(rng() % 3);
    const auto M = make_mask(shape, P, H, Wd, std::nullopt, rng, (rng() & 1) != 0);
    const std::vector<double> s(S.data().begin(), S.data().end());
    double lp_ref = 0, whole_ref = 0;
    for (std::size_t r = 0; r < H; ++r)
      for (std::size_t c = 0; c < Wd; ++c) {
        const double v = ref_bilinear(s, h, w, H, Wd, r, c);
        whole_ref += v;
        if (M.values[r * Wd + c]) lp_ref += v;
      }
    ASSERT_NEAR(position_loss(S, M).item(), lp_ref, 1e-6);
    ASSERT_NEAR(position_loss(S, M, true).item(), whole_ref, 1e-6);
  }
}

TEST(PositionLoss, OnesOverSquare) {
  TD S = TD::ones({1, 1, 3, 3});
  const auto M = place_mask(PatchShape::square, 4, 12, 12, 2, 5);
  EXPECT_NEAR(position_loss(S, M).item(), 16.0, 1e-12);
}

TEST(Mask, FootprintAreas) {
  const auto circ = make_footprint(PatchShape::circle, 10);
  const auto n = std::count(circ.begin(), circ.end(), 1);
  EXPECT_GE(n, 60);
  EXPECT_LE(n, 88);
  std::mt19937_64 rng(1);
  EXPECT_EQ(make_mask(PatchShape::square, 81, 768, 1024, std::nullopt, rng).ones(), 6561u);
  const auto trap = make_footprint(PatchShape::trapezoid, 20);
  // top row narrower than the bottom row
  EXPECT_LT(std::count(trap.begin(), trap.begin() + 20, 1), std::count(trap.end() - 20, trap.end(), 1));
}

TEST(Mask, RotationPreservesArea) {
  for (auto shape : {PatchShape::square, PatchShape::circle, PatchShape::trapezoid})
    for (int q = 0; q < 4; ++q) EXPECT_EQ(place_mask(shape, 9, 20, 20, 3, 4, q).ones(), place_mask(shape, 9, 20, 20, 3, 4, 0).ones());
  EXPECT_THROW(place_mask(PatchShape::square, 9, 20, 20, 12, 0), std::invalid_argument);
  std::mt19937_64 rng(2);
  EXPECT_THROW(make_mask(PatchShape::square, 21, 20, 20, std::nullopt, rng), std::invalid_argument);
}

TEST(Compose, HandExample) {
  TD x({1, 1, 2, 2}, std::vector<double>{0.2, 0.4, 0.6, 0.8});
  TD delta({1, 1, 1}, std::vector<double>{1.0});
  const auto M = place_mask(PatchShape::square, 1, 2, 2, 0, 1);
  const auto y = apply_patch(x, delta, M);
  EXPECT_DOUBLE_EQ(y[0], 0.2);
  EXPECT_DOUBLE_EQ(y[1], 1.0);
  EXPECT_DOUBLE_EQ(y[2], 0.6);
  EXPECT_DOUBLE_EQ(y[3], 0.8);
}

TEST(Compose, OutsideMaskUntouchedAndRangeKept) {
  std::mt19937_64 rng(3);
  for (int t = 0; t < 20; ++t) {
    auto x = TD::uniform({1, 3, 16, 16}, 0.0, 1.0, rng);
    auto delta = TD::uniform({3, 5, 5}, 0.0, 1.0, rng);
    const auto M = make_mask(static_cast<PatchShape>(t % 3), 5, 16, 16, std::nullopt, rng, true);
    const auto y = apply_patch(x, delta, M);
    for (std::size_t c = 0; c < 3; ++c)
      for (std::size_t p = 0; p < 256; ++p) {
        const double v = y[c * 256 + p];
        ASSERT_GE(v, 0.0);
        ASSERT_LE(v, 1.0);
        if (!M.values[p]) ASSERT_EQ(v, x[c * 256 + p]);
      }
  }
}

TEST(Patch, EncodeDecodeRoundTrip) {
  std::mt19937_64 rng(4);
  Patch<float> p{Tensor<float>::uniform({3, 7, 7}, 0.0f, 1.0f, rng), PatchShape::trapezoid};
  const auto q = decode_patch<float>(encode_patch(p));
  EXPECT_EQ(q.shape, p.shape);
  EXPECT_EQ(std::vector<float>(q.delta.data().begin(), q.delta.data().end()),
            std::vector<float>(p.delta.data().begin(), p.delta.data().end()));
  EXPECT_THROW(decode_patch<float>("PAPP1"), IoError);
}

TEST(Attention, NonNegativeOnRandomInputs) {
  auto m = small_model();
  std::mt19937_64 rng(5);
  for (int t = 0; t < 10; ++t) {
    auto x = Tensor<float>::uniform({1, 1, 32, 32}, 0.0f, 1.0f, rng);
    const auto att = attention_map(m, x);
    for (float v : att.map.data()) ASSERT_GE(v, 0.0f);
  }
  EXPECT_THROW(attention_map(m, Tensor<float>({1, 1, 32, 32}, 0.5f), "nope"), std::invalid_argument);
}

TEST(Attack, IncreaseStepAscendsScaleLoss) {
  // One raw-gradient step with W held fixed raises L_s.
  Model<double> model(ModelSpec::multi_column(6));
  std::mt19937_64 rng(6);
  auto x = TD::uniform({1, 1, 32, 32}, 0.0, 1.0, rng);
  auto target = TD::uniform({1, 1, 8, 8}, 0.0, 0.2, rng);
  const auto M = place_mask(PatchShape::square, 8, 32, 32, 10, 12);
  auto delta = TD::uniform({1, 8, 8}, 0.2, 0.8, rng);
  delta.set_requires_grad(true);
  TD W;
  std::vector<double> g;
  double before = 0;
  {
    TapeScope<double> scope;
    auto pred = model.forward(apply_patch(x, delta, M));
    W = density_weights(target, pred);
    auto ls = scale_loss(W, pred);
    before = ls.item();
    backward(ls);
    g.assign(delta.grad().begin(), delta.grad().end());
  }
  double norm = 0;
  for (double v : g) norm += v * v;
  ASSERT_GT(norm, 0.0);
  auto stepped = delta.detach();
  for (std::size_t i = 0; i < g.size(); ++i) stepped.data()[i] += 1e-3 * g[i] / std::sqrt(norm);
  const double after = scale_loss(W, model.forward(apply_patch(x, stepped, M))).item();
  EXPECT_GT(after, before);
}

TEST(Attack, PatchStaysInUnitRangeAndIsDeterministic) {
  auto d = preset_config("standard");
  d.n_train = 3;
  const auto samples = to_samples<float>(make_split(d, "train", 2), 4);
  auto m = small_model();
  AttackConfig cfg;
  cfg.T = 3;
  cfg.epochs = 1;
  cfg.alpha = 0.5;
  cfg.seed = 17;
  std::vector<StepRecord> trace;
  const auto a = pap_generate(m, samples, cfg, &trace);
  const auto b = pap_generate(m, samples, cfg);
  EXPECT_EQ(trace.size(), 9u);
  for (float v : a.delta.data()) {
    ASSERT_GE(v, 0.0f);
    ASSERT_LE(v, 1.0f);
  }
  EXPECT_EQ(std::vector<float>(a.delta.data().begin(), a.delta.data().end()),
            std::vector<float>(b.delta.data().begin(), b.delta.data().end()));
  cfg.seed = 18;
  const auto c = pap_generate(m, samples, cfg);
  EXPECT_NE(std::vector<float>(a.delta.data().begin(), a.delta.data().end()),
            std::vector<float>(c.delta.data().begin(), c.delta.data().end()));
}

TEST(Attack, ZeroEpochsReturnsInitialPatch) {
  auto d = preset_config("standard");
  d.n_train = 1;
  const auto samples = to_samples<float>(make_split(d, "train", 2), 4);
  AttackConfig cfg;
  cfg.epochs = 0;
  cfg.seed = 3;
  const auto p = pap_generate(small_model(), samples, cfg);
  const auto q = initial_patch<float>(cfg, 1);
  EXPECT_TRUE(std::equal(p.delta.data().begin(), p.delta.data().end(), q.data().begin()));
}

TEST(Attack, InvalidConfigThrows) {
  AttackConfig c;
  c.alpha = 0;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = {};
  c.scale_term = false;
  c.lambda = 0;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = {};
  EXPECT_EQ(AttackConfig::from_json(c.to_json()).to_json(), c.to_json());
  c.position = std::make_pair(std::size_t{3}, std::size_t{4});
  EXPECT_EQ(AttackConfig::from_json(c.to_json()).position, c.position);
}
