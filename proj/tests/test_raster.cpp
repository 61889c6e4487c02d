#include "gavatar/raster.hpp"
#include "test_util.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <numeric>

using namespace gavatar;
using namespace gavatar::raster;
using gavatar::testing::flat;
using gavatar::testing::numeric_gradient;
using gavatar::testing::random_vec;
using gavatar::testing::rel_err;

namespace {

Camera axis_camera(double f, int w, int h) {
  Camera c;
  c.width = w;
  c.height = h;
  c.K << f, 0, 0.5 * (w - 1), 0, f, 0.5 * (h - 1), 0, 0, 1;
  return c;
}

GlobalGaussians random_scene(int n, int channels, const Camera& cam, std::mt19937_64& rng, double smin = 0.03,
                             double smax = 0.15) {
  std::uniform_real_distribution<double> u(0, 1);
  GlobalGaussians g = GlobalGaussians::zeros(n, channels);
  for (int i = 0; i < n; ++i) {
    const double z = 2.0 + 2.0 * u(rng);
    const double half_w = 0.5 * cam.width / cam.K(0, 0) * z;
    const double half_h = 0.5 * cam.height / cam.K(1, 1) * z;
    g.mu.row(i) << (2 * u(rng) - 1) * half_w, (2 * u(rng) - 1) * half_h, z;
    g.rot.row(i) = random_vec(4, rng).normalized().transpose();
    for (int k = 0; k < 3; ++k) g.scale(i, k) = smin + (smax - smin) * u(rng);
    g.opacity[i] = 0.05 + 0.9 * u(rng);
    for (int c = 0; c < channels; ++c) g.h(i, c) = u(rng);
  }
  return g;
}

double max_abs_diff(const Image& a, const Image& b) {
  double m = 0;
  for (size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a.data[i] - b.data[i]));
  return m;
}

double max_diff(const RenderOutput& a, const RenderOutput& b) {
  return std::max({max_abs_diff(a.rgb, b.rgb), max_abs_diff(a.feat, b.feat), max_abs_diff(a.alpha, b.alpha)});
}

double weighted(const RenderOutput& o, const RenderOutput& w) {
  return o.rgb.vec().dot(w.rgb.vec()) + o.feat.vec().dot(w.feat.vec()) + o.alpha.vec().dot(w.alpha.vec());
}

RenderOutput random_like(int feat, int h, int w, std::mt19937_64& rng) {
  RenderOutput o = RenderOutput::zeros(feat, h, w);
  o.rgb.vec() = random_vec(o.rgb.size(), rng);
  o.feat.vec() = random_vec(o.feat.size(), rng);
  o.alpha.vec() = random_vec(o.alpha.size(), rng);
  return o;
}

}  // namespace

TEST(Project, PinholeCenter) {
  Camera c;
  c.width = c.height = 64;
  c.K << 100, 0, 32, 0, 100, 32, 0, 0, 1;
  const Projection p = project_gaussian(Vec3(0, 0, 2), Vec4(1, 0, 0, 0), Vec3(0.1, 0.1, 0.1), c);
  ASSERT_FALSE(p.culled);
  EXPECT_LE((p.mean - Vec2(32, 32)).norm(), 1e-12);
  EXPECT_DOUBLE_EQ(p.depth, 2.0);
}

TEST(Project, IsotropicClosedForm) {
  Camera c = axis_camera(100, 64, 64);
  const double sigma = 0.05, d = 2.5;
  const Projection p = project_gaussian(Vec3(0, 0, d), Vec4(0.3, 0.4, -0.2, 0.8), Vec3::Constant(sigma), c, 0.0);
  const double expect = std::pow(100 * sigma / d, 2);
  EXPECT_LE((p.cov - expect * Mat2::Identity()).cwiseAbs().maxCoeff(), 1e-9);
  const Projection pb = project_gaussian(Vec3(0, 0, d), Vec4(1, 0, 0, 0), Vec3::Constant(sigma), c);
  EXPECT_LE((pb.cov - (expect + 0.3) * Mat2::Identity()).cwiseAbs().maxCoeff(), 1e-9);
}

TEST(Project, BehindCameraIsCulled) {
  Camera c = axis_camera(100, 64, 64);
  EXPECT_TRUE(project_gaussian(Vec3(0, 0, -1), Vec4(1, 0, 0, 0), Vec3::Constant(0.1), c).culled);
  EXPECT_TRUE(project_gaussian(Vec3(0, 0, 0), Vec4(1, 0, 0, 0), Vec3::Constant(0.1), c).culled);
}

TEST(Rasterize, EmptySceneIsBlack) {
  Camera c = axis_camera(50, 32, 32);
  const RenderOutput o = rasterize(GlobalGaussians::zeros(0, 5), c);
  EXPECT_EQ(o.rgb.vec().cwiseAbs().maxCoeff(), 0.0);
  EXPECT_EQ(o.feat.vec().cwiseAbs().maxCoeff(), 0.0);
  EXPECT_EQ(o.alpha.vec().cwiseAbs().maxCoeff(), 0.0);
  EXPECT_EQ(o.feat.channels, 2);
}

TEST(Rasterize, ZeroOpacityIsBlack) {
  Camera c = axis_camera(50, 32, 32);
  GlobalGaussians g = GlobalGaussians::zeros(1, 3);
  g.mu.row(0) << 0, 0, 2;
  g.scale.row(0).setConstant(0.1);
  g.h.setOnes();
  g.opacity[0] = 0.0;
  const RenderOutput o = rasterize(g, c);
  EXPECT_EQ(o.rgb.vec().cwiseAbs().maxCoeff(), 0.0);
  EXPECT_EQ(o.alpha.vec().cwiseAbs().maxCoeff(), 0.0);
}

TEST(Rasterize, CenteredGaussianPeaksAtItsPixel) {
  Camera c;
  c.width = c.height = 32;
  c.K << 40, 0, 10, 0, 40, 20, 0, 0, 1;
  GlobalGaussians g = GlobalGaussians::zeros(1, 3);
  g.mu.row(0) << 0, 0, 3;
  g.scale.row(0) << 0.1, 0.05, 0.08;
  g.rot.row(0) = Vec4(0.8, 0.1, 0.3, -0.2).normalized().transpose();
  g.opacity[0] = 1.0;
  g.h.setConstant(0.5);
  const RenderOutput o = rasterize(g, c);
  const RenderOutput naive = rasterize_naive(g, c);
  EXPECT_EQ(max_diff(o, naive), 0.0);
  Eigen::Index idx;
  o.alpha.vec().maxCoeff(&idx);
  EXPECT_EQ(idx, 20 * 32 + 10);
  EXPECT_DOUBLE_EQ(o.alpha.at(0, 20, 10), 1.0);
}

TEST(Rasterize, FullyOpaqueFrontOccludes) {
  Camera c = axis_camera(60, 33, 33);
  GlobalGaussians g = GlobalGaussians::zeros(2, 4);
  g.mu.row(0) << 0, 0, 2;  // front
  g.mu.row(1) << 0, 0, 3;
  g.scale.row(0).setConstant(0.1);
  g.scale.row(1).setConstant(0.15);
  g.opacity << 1.0, 0.8;
  g.h.row(0) << 0.2, 0.4, 0.6, 0.9;
  g.h.row(1) << 1.0, 0.0, 1.0, -2.0;
  const RenderOutput both = rasterize(g, c);
  EXPECT_DOUBLE_EQ(both.rgb.at(0, 16, 16), 0.2);
  EXPECT_DOUBLE_EQ(both.rgb.at(1, 16, 16), 0.4);
  EXPECT_DOUBLE_EQ(both.rgb.at(2, 16, 16), 0.6);
  EXPECT_DOUBLE_EQ(both.feat.at(0, 16, 16), 0.9);
}

TEST(Rasterize, TiledMatchesNaiveOnRandomScenes) {
  std::mt19937_64 rng(42);
  for (int scene = 0; scene < 10; ++scene) {
    Camera c = axis_camera(60, 64, 64);
    const GlobalGaussians g = random_scene(1 + scene * 5, 6, c, rng, 0.02, 0.3);
    EXPECT_LE(max_diff(rasterize(g, c), rasterize_naive(g, c)), 1e-5);
  }
}

TEST(Rasterize, OutputIndependentOfInputOrder) {
  std::mt19937_64 rng(8);
  Camera c = axis_camera(40, 32, 32);
  const GlobalGaussians g = random_scene(25, 5, c, rng);
  std::vector<int> perm(25);
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng);
  GlobalGaussians p = g;
  for (int i = 0; i < 25; ++i) {
    p.mu.row(i) = g.mu.row(perm[i]);
    p.rot.row(i) = g.rot.row(perm[i]);
    p.scale.row(i) = g.scale.row(perm[i]);
    p.opacity[i] = g.opacity[perm[i]];
    p.h.row(i) = g.h.row(perm[i]);
  }
  EXPECT_EQ(max_diff(rasterize(g, c), rasterize(p, c)), 0.0);
}

TEST(Rasterize, EqualDepthNonOverlappingPermutationIsStable) {
  Camera c = axis_camera(40, 32, 32);
  GlobalGaussians g = GlobalGaussians::zeros(2, 3);
  g.mu.row(0) << -0.5, 0, 2;
  g.mu.row(1) << 0.5, 0, 2;
  g.scale.setConstant(0.05);
  g.opacity << 0.7, 0.6;
  g.h.row(0) << 1, 0, 0;
  g.h.row(1) << 0, 1, 0;
  GlobalGaussians p = g;
  p.mu.row(0).swap(p.mu.row(1));
  std::swap(p.opacity[0], p.opacity[1]);
  p.h.row(0).swap(p.h.row(1));
  EXPECT_EQ(max_diff(rasterize(g, c), rasterize(p, c)), 0.0);
}

TEST(Rasterize, AlphaMonotoneAndWeightsBounded) {
  std::mt19937_64 rng(9);
  Camera c = axis_camera(40, 32, 32);
  GlobalGaussians g = random_scene(15, 3, c, rng);
  RenderOutput prev = rasterize(g, c);
  for (int add = 0; add < 10; ++add) {
    const GlobalGaussians extra = random_scene(1, 3, c, rng);
    GlobalGaussians next = GlobalGaussians::zeros(g.size() + 1, 3);
    next.mu << g.mu, extra.mu;
    next.rot << g.rot, extra.rot;
    next.scale << g.scale, extra.scale;
    next.opacity << g.opacity, extra.opacity;
    next.h << g.h, extra.h;
    const RenderOutput cur = rasterize(next, c);
    for (size_t i = 0; i < cur.alpha.size(); ++i) {
      EXPECT_GE(cur.alpha.data[i], prev.alpha.data[i] - 1e-12);
      EXPECT_LE(cur.alpha.data[i], 1.0 + 1e-12);
    }
    g = next;
    prev = cur;
  }
}

TEST(RasterizeBackward, MissingStateThrows) {
  EXPECT_THROW(rasterize_backward(RenderOutput::zeros(0, 4, 4), std::nullopt), Error);
}

TEST(RasterizeBackward, ZeroUpstreamGivesZeroGradients) {
  std::mt19937_64 rng(10);
  Camera c = axis_camera(30, 16, 16);
  const GlobalGaussians g = random_scene(10, 4, c, rng);
  std::optional<RasterState> st(std::in_place);
  rasterize(g, c, &*st);
  const GaussianGrads gr = rasterize_backward(RenderOutput::zeros(1, 16, 16), st);
  EXPECT_EQ(gr.mu.cwiseAbs().maxCoeff(), 0.0);
  EXPECT_EQ(gr.rot.cwiseAbs().maxCoeff(), 0.0);
  EXPECT_EQ(gr.scale.cwiseAbs().maxCoeff(), 0.0);
  EXPECT_EQ(gr.opacity.cwiseAbs().maxCoeff(), 0.0);
  EXPECT_EQ(gr.h.cwiseAbs().maxCoeff(), 0.0);
}

TEST(RasterizeBackward, SinglePrimitiveColorAdjoint) {
  Camera c = axis_camera(30, 17, 17);
  GlobalGaussians g = GlobalGaussians::zeros(1, 3);
  g.mu.row(0) << 0.01, -0.02, 2;
  g.scale.row(0).setConstant(0.07);
  g.opacity[0] = 0.6;
  g.h.row(0) << 0.3, 0.5, 0.7;
  std::optional<RasterState> st(std::in_place);
  const RenderOutput o = rasterize(g, c, &*st);
  RenderOutput up = RenderOutput::zeros(0, 17, 17);
  up.rgb.at(1, 8, 8) = 1.0;  // loss = green value at the center pixel
  const GaussianGrads gr = rasterize_backward(up, st);
  EXPECT_DOUBLE_EQ(gr.h(0, 1), o.alpha.at(0, 8, 8));
  EXPECT_EQ(gr.h(0, 0), 0.0);
}

TEST(RasterizeBackward, MatchesFiniteDifferences) {
  std::mt19937_64 rng(11);
  for (int scene = 0; scene < 4; ++scene) {
    Camera c = axis_camera(30, 16, 16);
    c.K(0, 1) = 0.5 * scene;  // exercise skew
    const Mat3 R = Eigen::AngleAxisd(0.1 * scene, Vec3(0.3, 1, 0.2).normalized()).toRotationMatrix();
    c.E.topLeftCorner<3, 3>() = R;
    c.E.topRightCorner<3, 1>() = -R * Vec3(0.05, -0.02, 0.1) + Vec3(0.05, -0.02, 0.1);
    const int n = 5 + 5 * scene;
    const GlobalGaussians g = random_scene(n, 5, c, rng, 0.05, 0.25);
    const RenderOutput W = random_like(2, 16, 16, rng);
    std::optional<RasterState> st(std::in_place);
    rasterize(g, c, &*st);
    const GaussianGrads gr = rasterize_backward(W, st);

    auto check = [&](auto member, const auto& analytic, const char* name) {
      auto f = [&](const VecX& x) {
        GlobalGaussians gg = g;
        flat(gg.*member) = x;
        return weighted(rasterize(gg, c), W);
      };
      EXPECT_LE(rel_err(flat(analytic), numeric_gradient(f, flat(g.*member), 1e-6)), 1e-4)
          << name << " scene " << scene;
    };
    check(&GlobalGaussians::mu, gr.mu, "mu");
    check(&GlobalGaussians::rot, gr.rot, "rot");
    check(&GlobalGaussians::scale, gr.scale, "scale");
    check(&GlobalGaussians::opacity, gr.opacity, "opacity");
    check(&GlobalGaussians::h, gr.h, "h");
  }
}
