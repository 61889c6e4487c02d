#include "gavatar/splat.hpp"
#include "test_util.hpp"

#include <gtest/gtest.h>

using namespace gavatar;
using namespace gavatar::splat;
using gavatar::testing::flat;
using gavatar::testing::numeric_gradient;
using gavatar::testing::random_vec;
using gavatar::testing::rel_err;

namespace {

using RowMat3 = Eigen::Matrix<double, 3, 3, Eigen::RowMajor>;

TriangleFrame random_frame(std::mt19937_64& rng) {
  TriangleFrame f;
  f.R = headmodel::rodrigues(random_vec(3, rng));
  f.s = 0.5 + std::abs(random_vec(1, rng)[0]);
  f.T = random_vec(3, rng);
  return f;
}

LocalGaussians random_locals(int n, int channels, std::mt19937_64& rng) {
  LocalGaussians l = LocalGaussians::zeros(n, channels);
  l.mu = random_vec(3 * n, rng).reshaped<Eigen::RowMajor>(n, 3);
  l.rot = random_vec(4 * n, rng).reshaped<Eigen::RowMajor>(n, 4);
  l.scale = (random_vec(3 * n, rng).array().abs() + 0.1).matrix().reshaped<Eigen::RowMajor>(n, 3);
  l.opacity = (random_vec(n, rng).array().abs().min(1.0)).matrix();
  l.h = random_vec(n * channels, rng).reshaped<Eigen::RowMajor>(n, channels);
  return l;
}

}  // namespace

TEST(UvPointCloud, ZeroResolutionIsAnError) {
  const auto t = headmodel::make_synthetic_template();
  EXPECT_THROW(init_uv_pointcloud(t, {.uv_resolution = 0}), Error);
}

TEST(UvPointCloud, CountScalesWithResolutionSquared) {
  const auto t = headmodel::make_synthetic_template();
  const auto a = init_uv_pointcloud(t, {.uv_resolution = 32});
  const auto b = init_uv_pointcloud(t, {.uv_resolution = 64});
  const double ratio = static_cast<double>(b.size()) / a.size();
  EXPECT_NEAR(ratio, 4.0, 0.4);
  // Desk-scale default lands in the 3-5k range.
  EXPECT_GE(b.size(), 3000);
  EXPECT_LE(b.size(), 5000);
}

TEST(UvPointCloud, LabelsAnchorsAndEncodings) {
  const auto t = headmodel::make_synthetic_template();
  const auto pc = init_uv_pointcloud(t, {.uv_resolution = 48, .seed = 3});
  const auto frames = headmodel::triangle_frames(t.vertices, t.faces);
  for (int i = 0; i < pc.size(); ++i) {
    const int f = pc.parent_face[i];
    ASSERT_GE(f, 0);
    ASSERT_LT(f, t.num_faces());
    EXPECT_EQ(pc.part[i], headmodel::part_of_face(t, f));
    EXPECT_NEAR(pc.barycentric.row(i).sum(), 1.0, 1e-12);
    EXPECT_GE(pc.barycentric.row(i).minCoeff(), -1e-12);
    // The anchor maps back to the barycentric surface point through the binding transform.
    Vec3 p = Vec3::Zero();
    for (int c = 0; c < 3; ++c) p += pc.barycentric(i, c) * t.vertices.row(t.faces(f, c)).transpose();
    const Vec3 back = frames[f].s * frames[f].R * pc.anchor_local.row(i).transpose() + frames[f].T;
    EXPECT_LE((back - p).norm(), 1e-12);
  }
  EXPECT_EQ(pc.encoding.cols(), 48);
  const double sd = std::sqrt(pc.encoding.array().square().mean());
  EXPECT_NEAR(sd, 0.01, 0.001);
  const auto again = init_uv_pointcloud(t, {.uv_resolution = 48, .seed = 3});
  EXPECT_EQ(again.encoding, pc.encoding);
  // Every part is represented.
  const auto members = pc.part_members();
  for (const auto& m : members) EXPECT_FALSE(m.empty());
}

TEST(LocalToGlobal, DirectSubstitution) {
  TriangleFrame f;
  f.R = Mat3::Identity();
  f.s = 2.0;
  f.T = Vec3(1, 0, 0);
  LocalGaussian l;
  l.mu = Vec3(0.5, 0, 0);
  l.scale = Vec3(0.1, 0.1, 0.1);
  l.opacity = 0.3;
  l.h = VecX::LinSpaced(5, 0, 1);
  const LocalGaussian g = local_to_global(l, f);
  EXPECT_LE((g.mu - Vec3(2, 0, 0)).norm(), 1e-15);
  EXPECT_LE((g.scale - Vec3(0.2, 0.2, 0.2)).norm(), 1e-15);
  EXPECT_EQ(g.opacity, l.opacity);
  EXPECT_EQ(g.h, l.h);
}

TEST(LocalToGlobal, IdentityFrameIsIdentity) {
  std::mt19937_64 rng(1);
  LocalGaussian l;
  l.mu = random_vec(3, rng);
  l.rot = Vec4(0.9, 0.1, -0.2, 0.3).normalized();
  l.scale = Vec3(0.2, 0.3, 0.4);
  l.h = random_vec(4, rng);
  const LocalGaussian g = local_to_global(l, TriangleFrame{});
  EXPECT_EQ(g.mu, l.mu);
  EXPECT_LE((g.rot - l.rot).norm(), 1e-15);
  EXPECT_EQ(g.scale, l.scale);
}

TEST(LocalToGlobal, ComposesWithRigidMotion) {
  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 20; ++trial) {
    const TriangleFrame f = random_frame(rng);
    LocalGaussian l;
    l.mu = random_vec(3, rng);
    l.rot = random_vec(4, rng).normalized();
    l.scale = random_vec(3, rng).cwiseAbs();
    const Mat3 R0 = headmodel::rodrigues(random_vec(3, rng));
    const Vec3 t0 = random_vec(3, rng);
    const LocalGaussian g = local_to_global(l, f);
    TriangleFrame composed{R0 * f.R, f.s, R0 * f.T + t0};
    const LocalGaussian gc = local_to_global(l, composed);
    EXPECT_LE((gc.mu - (R0 * g.mu + t0)).norm(), 1e-12);
    EXPECT_LE((quat_to_matrix(gc.rot) - R0 * quat_to_matrix(g.rot)).cwiseAbs().maxCoeff(), 1e-12);
    EXPECT_LE((gc.scale - g.scale).norm(), 1e-15);
    EXPECT_NEAR(gc.rot.norm(), 1.0, 1e-6);
  }
}

TEST(LocalToGlobal, BatchedMatchesSingleAndPassesThroughExactly) {
  std::mt19937_64 rng(3);
  std::vector<TriangleFrame> frames = {random_frame(rng), random_frame(rng), random_frame(rng)};
  const LocalGaussians l = random_locals(10, 6, rng);
  std::vector<int> parent = {0, 1, 2, 0, 1, 2, 0, 1, 2, 2};
  const GlobalGaussians g = local_to_global(l, frames, parent);
  EXPECT_EQ(g.opacity, l.opacity);
  EXPECT_EQ(g.h, l.h);
  for (int i = 0; i < 10; ++i) {
    LocalGaussian s{l.mu.row(i).transpose(), l.rot.row(i).transpose(), l.scale.row(i).transpose(), 0, VecX()};
    const LocalGaussian r = local_to_global(s, frames[parent[i]]);
    EXPECT_LE((r.mu - g.mu.row(i).transpose()).norm(), 1e-15);
    EXPECT_LE((r.rot - g.rot.row(i).transpose()).norm(), 1e-15);
    EXPECT_NEAR(g.rot.row(i).norm(), 1.0, 1e-6);
  }
}

TEST(LocalToGlobal, BackwardMatchesFiniteDifferences) {
  std::mt19937_64 rng(4);
  std::vector<TriangleFrame> frames = {random_frame(rng), random_frame(rng)};
  const LocalGaussians l = random_locals(6, 3, rng);
  const std::vector<int> parent = {0, 1, 1, 0, 1, 0};
  // Loss over global mu, rotation matrix and scale with fixed random weights.
  const MatX3 Wmu = random_vec(18, rng).reshaped<Eigen::RowMajor>(6, 3);
  const MatX9 WR = random_vec(54, rng).reshaped<Eigen::RowMajor>(6, 9);
  const MatX3 WS = random_vec(18, rng).reshaped<Eigen::RowMajor>(6, 3);
  auto loss_of = [&](const LocalGaussians& ll, const std::vector<TriangleFrame>& ff) {
    const GlobalGaussians g = local_to_global(ll, ff, parent);
    double v = (g.mu.array() * Wmu.array()).sum() + (g.scale.array() * WS.array()).sum();
    for (int i = 0; i < 6; ++i) {
      const RowMat3 R = quat_to_matrix(g.rot.row(i).transpose());
      v += (Eigen::Map<const VecX>(R.data(), 9).array() * WR.row(i).transpose().array()).sum();
    }
    return v;
  };
  GaussianGrads gg = GaussianGrads::zeros(6, 3);
  gg.mu = Wmu;
  gg.rotmat = WR;
  gg.scale = WS;
  std::vector<FrameGrad> fg(2);
  const GaussianGrads lg = local_to_global_backward(l, frames, parent, gg, fg);

  auto fd_member = [&](auto member, const auto& analytic, const char* name) {
    auto f = [&](const VecX& x) {
      LocalGaussians ll = l;
      flat(ll.*member) = x;
      return loss_of(ll, frames);
    };
    EXPECT_LE(rel_err(flat(analytic), numeric_gradient(f, flat(l.*member))), 1e-4) << name;
  };
  fd_member(&LocalGaussians::mu, lg.mu, "mu");
  fd_member(&LocalGaussians::rot, lg.rot, "rot");
  fd_member(&LocalGaussians::scale, lg.scale, "scale");

  for (int k = 0; k < 2; ++k) {
    auto fR = [&](const VecX& x) {
      auto ff = frames;
      ff[k].R = Eigen::Map<const Mat3>(x.data());
      return loss_of(l, ff);
    };
    // The rotation-matrix gradient is only meaningful on the rotation manifold;
    // compare it projected onto the tangent space R * skew(w).
    const VecX gRnum = numeric_gradient(fR, Eigen::Map<const VecX>(frames[k].R.data(), 9));
    const Mat3 Gnum = Eigen::Map<const Mat3>(gRnum.data());
    for (int a = 0; a < 3; ++a) {
      const Mat3 D = frames[k].R * skew(Vec3::Unit(a));
      EXPECT_NEAR((fg[k].R.array() * D.array()).sum(), (Gnum.array() * D.array()).sum(), 1e-6);
    }
    auto fs = [&](const VecX& x) {
      auto ff = frames;
      ff[k].s = x[0];
      return loss_of(l, ff);
    };
    EXPECT_NEAR(fg[k].s, numeric_gradient(fs, VecX::Constant(1, frames[k].s))[0], 1e-6);
    auto fT = [&](const VecX& x) {
      auto ff = frames;
      ff[k].T = x;
      return loss_of(l, ff);
    };
    EXPECT_LE(rel_err(fg[k].T, numeric_gradient(fT, frames[k].T)), 1e-4);
  }
}

TEST(DynamicSignal, ZeroWhenPosedEqualsNeutral) {
  std::mt19937_64 rng(5);
  const TriangleFrame f = random_frame(rng);
  const Vec3 e = dynamic_signal(Vec3(random_vec(3, rng)), f, f);
  EXPECT_EQ(e, Vec3::Zero());
}

TEST(DynamicSignal, PureTranslation) {
  TriangleFrame neutral;
  TriangleFrame posed;
  posed.T = Vec3(0.01, -0.02, 0.03);
  const Vec3 e = dynamic_signal(Vec3(0.3, 0.2, -0.1), posed, neutral);
  EXPECT_LE((e - posed.T).norm(), 1e-15);
}

TEST(DynamicSignal, JawOpenMovesOnlyJawFaces) {
  const auto t = headmodel::make_synthetic_template();
  const auto pc = init_uv_pointcloud(t, {.uv_resolution = 32});
  headmodel::HeadParams neutral = headmodel::HeadParams::zeros(t);
  headmodel::HeadParams posed = neutral;
  posed.theta[3 * headmodel::kJawJoint] = 0.25;
  const auto vn = headmodel::pose_mesh(t, neutral);
  const auto vp = headmodel::pose_mesh(t, posed);
  const auto fn = headmodel::triangle_frames(vn, t.faces);
  const auto fp = headmodel::triangle_frames(vp, t.faces);
  const MatX3 e = dynamic_signal(pc.anchor_local, fp, fn, pc.parent_face);
  int moving = 0;
  for (int i = 0; i < pc.size(); ++i) {
    const int f = pc.parent_face[i];
    double disp = 0;
    for (int c = 0; c < 3; ++c) disp += (vp.row(t.faces(f, c)) - vn.row(t.faces(f, c))).norm();
    if (disp == 0.0) {
      EXPECT_EQ(e.row(i).norm(), 0.0);
    } else {
      ++moving;
    }
  }
  EXPECT_GT(moving, 0);
  EXPECT_GT(e.rowwise().norm().maxCoeff(), 1e-3);
}

TEST(DynamicSignal, BackwardMatchesFiniteDifferences) {
  std::mt19937_64 rng(6);
  std::vector<TriangleFrame> fp = {random_frame(rng), random_frame(rng)};
  std::vector<TriangleFrame> fn = {random_frame(rng), random_frame(rng)};
  const std::vector<int> parent = {1, 0, 1, 1};
  const MatX3 mu = random_vec(12, rng).reshaped<Eigen::RowMajor>(4, 3);
  const MatX3 G = random_vec(12, rng).reshaped<Eigen::RowMajor>(4, 3);
  std::vector<FrameGrad> gp(2), gn(2);
  const MatX3 gmu = dynamic_signal_backward(mu, fp, fn, parent, G, gp, gn);
  auto f = [&](const VecX& x) {
    const MatX3 m = x.reshaped<Eigen::RowMajor>(4, 3);
    return (dynamic_signal(m, fp, fn, parent).array() * G.array()).sum();
  };
  EXPECT_LE(rel_err(flat(gmu), numeric_gradient(f, flat(mu))), 1e-4);
  for (int k = 0; k < 2; ++k) {
    auto fT = [&](const VecX& x) {
      auto pp = fp;
      pp[k].T = x;
      return (dynamic_signal(mu, pp, fn, parent).array() * G.array()).sum();
    };
    EXPECT_LE(rel_err(gp[k].T, numeric_gradient(fT, fp[k].T)), 1e-4);
    auto fs = [&](const VecX& x) {
      auto nn = fn;
      nn[k].s = x[0];
      return (dynamic_signal(mu, fp, nn, parent).array() * G.array()).sum();
    };
    EXPECT_NEAR(gn[k].s, numeric_gradient(fs, VecX::Constant(1, fn[k].s))[0], 1e-6);
    auto fR = [&](const VecX& x) {
      auto pp = fp;
      pp[k].R = Eigen::Map<const Mat3>(x.data());
      return (dynamic_signal(mu, pp, fn, parent).array() * G.array()).sum();
    };
    const VecX num = numeric_gradient(fR, Eigen::Map<const VecX>(fp[k].R.data(), 9));
    EXPECT_LE(rel_err(Eigen::Map<const VecX>(gp[k].R.data(), 9), num), 1e-4);
  }
}
