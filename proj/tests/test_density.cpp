#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "pap/density.hpp"
#include "pap/scenes.hpp"

using namespace pap;

namespace {

PointSet random_interior(std::size_t n, std::size_t H, std::size_t W, double margin, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> ux(margin, static_cast<double>(W) - margin),
      uy(margin, static_cast<double>(H) - margin);
  PointSet ps{{}, W, H};
  for (std::size_t i = 0; i < n; ++i) ps.points.push_back({ux(rng), uy(rng)});
  return ps;
}

// Per-pixel accumulation straight from the definition.
std::vector<double> brute_force_density(const PointSet& ps, const std::vector<double>& sigma) {
  std::vector<double> out(ps.image_h * ps.image_w, 0.0);
  for (std::size_t h = 0; h < ps.size(); ++h) {
    const auto& p = ps.points[h];
    const double s = sigma[h];
    const double R = std::ceil(4 * s);
    const double cx = std::floor(p.x), cy = std::floor(p.y);
    double z = 0;
    for (double r = cy - R; r <= cy + R; r += 1)
      for (double c = cx - R; c <= cx + R; c += 1) z += std::exp(-((r - p.y) * (r - p.y) + (c - p.x) * (c - p.x)) / (2 * s * s));
    for (std::size_t r = 0; r < ps.image_h; ++r)
      for (std::size_t c = 0; c < ps.image_w; ++c) {
        const double dr = static_cast<double>(r), dc = static_cast<double>(c);
        if (std::abs(dr - cy) > R || std::abs(dc - cx) > R) continue;
        out[r * ps.image_w + c] +=
            std::exp(-((dr - p.y) * (dr - p.y) + (dc - p.x) * (dc - p.x)) / (2 * s * s)) / z;
      }
  }
  return out;
}

}  // namespace

TEST(Knn, HandExamples) {
  PointSet two{{{0, 0}, {10, 0}}, 32, 32};
  EXPECT_EQ(knn_avg_distance(two, 3), (std::vector<double>{10, 10}));
  PointSet line{{{0, 0}, {10, 0}, {20, 0}}, 32, 32};
  const auto d = knn_avg_distance(line, 3);
  EXPECT_DOUBLE_EQ(d[0], 15);
  EXPECT_DOUBLE_EQ(d[1], 10);
  EXPECT_DOUBLE_EQ(d[2], 15);
  PointSet dup{{{5, 5}, {5, 5}}, 32, 32};
  EXPECT_EQ(knn_avg_distance(dup, 1), (std::vector<double>{0, 0}));
  EXPECT_THROW(knn_avg_distance(PointSet{{{1, 1}}, 4, 4}, 3), std::invalid_argument);
}

TEST(Density, EmptyAndSingleHead) {
  DensityConfig c;
  c.mode = KernelMode::constant;
  EXPECT_EQ(gen_density_map(PointSet{{}, 16, 16}, c).sum(), 0.0);
  PointSet one{{{128, 128}}, 256, 256};
  EXPECT_NEAR(gen_density_map(one, c).sum(), 1.0, 1e-6);
}

TEST(Density, InvalidConfigThrows) {
  PointSet ps{{{3, 3}, {8, 8}}, 16, 16};
  DensityConfig c;
  c.beta = 0;
  EXPECT_THROW(gen_density_map(ps, c), std::invalid_argument);
  c = {};
  c.mode = KernelMode::constant;
  c.sigma_const = -1;
  EXPECT_THROW(gen_density_map(ps, c), std::invalid_argument);
  c = {};
  EXPECT_THROW(gen_density_map(PointSet{{{3, 3}}, 16, 16}, c), std::invalid_argument);
  EXPECT_THROW(gen_density_map(PointSet{{{30, 3}}, 16, 16}, c), std::invalid_argument);
}

TEST(Density, MatchesBruteForceOracle) {
  std::mt19937_64 rng(11);
  for (int t = 0; t < 10; ++t) {
    auto ps = random_interior(5, 64, 64, 12, rng);
    DensityConfig c;  // adaptive, beta 0.3, k 3
    const auto sig = kernel_sigmas(ps, c);
    const auto m = gen_density_map(ps, c);
    const auto ref = brute_force_density(ps, sig);
    double sum = 0;
    for (std::size_t i = 0; i < ref.size(); ++i) {
      EXPECT_NEAR(m.values[i], ref[i], 1e-6);
      sum += ref[i];
    }
    bool interior = true;
    for (std::size_t i = 0; i < ps.size(); ++i) {
      const double R = std::ceil(4 * sig[i]);
      interior = interior && std::floor(ps.points[i].x) - R >= 0 && std::floor(ps.points[i].x) + R < 64 &&
                 std::floor(ps.points[i].y) - R >= 0 && std::floor(ps.points[i].y) + R < 64;
    }
    if (interior) EXPECT_NEAR(m.sum(), 5.0, 1e-4);
  }
}

TEST(Density, AdaptiveSigmaIsBetaTimesKnn) {
  PointSet line{{{10, 10}, {20, 10}, {30, 10}, {40, 10}}, 64, 64};
  const auto sig = kernel_sigmas(line, DensityConfig{});
  const auto d = knn_avg_distance(line, 3);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_DOUBLE_EQ(sig[i], 0.3 * d[i]);
}

TEST(Density, MassConservationInteriorHeads) {
  std::mt19937_64 rng(12);
  for (int t = 0; t < 100; ++t) {
    const std::size_t n = 2 + rng() % 30;
    auto ps = random_interior(n, 96, 96, 20, rng);
    DensityConfig c;
    const auto sig = kernel_sigmas(ps, c);
    bool interior = true;
    for (std::size_t i = 0; i < n; ++i) {
      const double R = std::ceil(4 * sig[i]);
      interior = interior && std::floor(ps.points[i].x) >= R && std::floor(ps.points[i].x) + R < 96 &&
                 std::floor(ps.points[i].y) >= R && std::floor(ps.points[i].y) + R < 96;
    }
    if (!interior) continue;
    EXPECT_LT(std::abs(gen_density_map(ps, c).sum() - static_cast<double>(n)), 1e-4 * static_cast<double>(n));
  }
}

TEST(Density, BorderHeadsLoseClippedMass) {
  PointSet corner{{{0.5, 0.5}}, 32, 32};
  DensityConfig c;
  c.mode = KernelMode::constant;
  c.sigma_const = 3;
  const double s = gen_density_map(corner, c).sum();
  EXPECT_LT(s, 0.5);
  EXPECT_GT(s, 0.2);
}

TEST(Downsample, PreservesMassAndBlocks) {
  std::mt19937_64 rng(13);
  std::uniform_real_distribution<float> u(0, 1);
  DensityMap m(16, 24);
  for (auto& v : m.values) v = u(rng);
  for (std::size_t f : {1u, 2u, 4u, 8u}) {
    const auto d = downsample_preserving_sum(m, f);
    EXPECT_EQ(d.height, 16 / f);
    EXPECT_EQ(d.scale, f);
    EXPECT_NEAR(d.sum(), m.sum(), 1e-9 * m.sum() + 1e-5);
    double block = 0;
    for (std::size_t i = 0; i < f; ++i)
      for (std::size_t j = 0; j < f; ++j) block += m.at(i, f + j);
    EXPECT_NEAR(d.at(0, 1), block, 1e-5);
  }
  EXPECT_THROW(downsample_preserving_sum(m, 5), std::invalid_argument);
  EXPECT_THROW(downsample_preserving_sum(m, 0), std::invalid_argument);
}

TEST(Density, FileRoundTrips) {
  std::mt19937_64 rng(14);
  auto ps = random_interior(7, 32, 40, 4, rng);
  const auto m = gen_density_map(ps, DensityConfig{});
  EXPECT_EQ(decode_density(encode_density(m)), m);
  EXPECT_THROW(decode_density("PAPD1"), IoError);
  EXPECT_THROW(decode_density("XXXXX0000"), IoError);
  std::vector<Annotation> anns = {{"images/a.ppm", ps.points}, {"images/b.ppm", {}}};
  const auto back = decode_annotations(encode_annotations(anns));
  ASSERT_EQ(back.size(), 2u);
  EXPECT_EQ(back[0].image, "images/a.ppm");
  EXPECT_EQ(back[0].points, ps.points);
  EXPECT_TRUE(back[1].points.empty());
}

TEST(Scenes, AnnotationCountMatchesRenderedBlobs) {
  std::mt19937_64 rng(15);
  for (int t = 0; t < 100; ++t) {
    SceneConfig c;
    c.min_heads = rng() % 10;
    c.max_heads = c.min_heads + rng() % 30;
    c.max_distractors = rng() % 4;
    auto sc = gen_scene(c, rng);
    EXPECT_EQ(sc.points.size(), sc.heads.size());
    EXPECT_NO_THROW(sc.points.validate());
    for (float v : sc.image.values) ASSERT_TRUE(v >= 0.0f && v <= 1.0f);
  }
}

TEST(Scenes, ZeroHeadsAndNegatives) {
  SceneConfig c;
  c.min_heads = c.max_heads = 0;
  std::mt19937_64 rng(16);
  auto sc = gen_scene(c, rng);
  EXPECT_EQ(sc.points.size(), 0u);
  auto d = preset_config("clutter");
  d.n_test = 40;
  std::size_t negatives = 0;
  for (const auto& s : make_split(d, "test", 3)) {
    if (!s.negative) continue;
    ++negatives;
    EXPECT_EQ(s.points.size(), 0u);
    float lo = 1, hi = 0;
    for (float v : s.image.values) lo = std::min(lo, v), hi = std::max(hi, v);
    EXPECT_GT(hi - lo, 0.1f);  // distractors make the image non-trivial
  }
  EXPECT_GT(negatives, 0u);
}

TEST(Scenes, OvercrowdedConfigThrows) {
  SceneConfig c;
  c.height = c.width = 16;
  c.min_heads = c.max_heads = 200;
  c.max_retries = 20;
  std::mt19937_64 rng(17);
  EXPECT_THROW(gen_scene(c, rng), std::runtime_error);
  c.height = 20;
  EXPECT_THROW(c.validate(), std::invalid_argument);
}

TEST(Scenes, DensityOfGeneratedSceneConservesInteriorMass) {
  auto d = preset_config("standard");
  for (const auto& s : make_split(d, "train", 21)) {
    if (s.points.size() < 4) continue;
    const auto sig = kernel_sigmas(s.points, d.density);
    double expect = 0;
    for (std::size_t i = 0; i < s.points.size(); ++i) {
      const double R = std::ceil(4 * sig[i]);
      const auto& p = s.points.points[i];
      const bool in = std::floor(p.x) >= R && std::floor(p.x) + R < 96 && std::floor(p.y) >= R && std::floor(p.y) + R < 96;
      if (in) expect += 1;
    }
    // interior heads alone bound the sum from below
    EXPECT_GE(s.density.sum() + 1e-4, expect);
    EXPECT_LE(s.density.sum(), static_cast<double>(s.points.size()) + 1e-4);
  }
}

TEST(Scenes, DeterministicFromSeed) {
  auto d = preset_config("scale-shift");
  d.n_train = 4;
  d.n_test = 4;
  const auto a = make_split(d, "test", 9), b = make_split(d, "test", 9), c = make_split(d, "test", 10);
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].image.values, b[i].image.values);
    EXPECT_EQ(a[i].points, b[i].points);
  }
  EXPECT_NE(a[0].image.values, c[0].image.values);
}

TEST(Scenes, DatasetOnDiskRoundTrips) {
  namespace fs = std::filesystem;
  const fs::path dir = fs::temp_directory_path() / "pap_test_dataset";
  const fs::path dir2 = fs::temp_directory_path() / "pap_test_dataset2";
  fs::remove_all(dir);
  fs::remove_all(dir2);
  auto d = preset_config("standard");
  d.n_train = 3;
  d.n_test = 2;
  const auto m1 = gen_dataset(d, 5, dir);
  const auto m2 = gen_dataset(d, 5, dir2);
  EXPECT_EQ(m1, m2);
  EXPECT_EQ(io::sha256_file(dir / "manifest.json"), io::sha256_file(dir2 / "manifest.json"));
  const auto mem = make_split(d, "test", 5);
  const auto disk = load_split(dir, "test");
  ASSERT_EQ(disk.size(), 2u);
  for (std::size_t i = 0; i < 2; ++i) {
    EXPECT_EQ(disk[i].image.values, mem[i].image.values);
    EXPECT_EQ(disk[i].density, mem[i].density);
    EXPECT_EQ(disk[i].points.points, mem[i].points.points);
  }
  fs::remove_all(dir);
  fs::remove_all(dir2);
}

TEST(Io, Sha256KnownVector) {
  EXPECT_EQ(io::sha256_hex("abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
}
