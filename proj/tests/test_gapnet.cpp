#include "gavatar/gapnet.hpp"
#include "test_util.hpp"

#include <gtest/gtest.h>

using namespace gavatar;
using namespace gavatar::gapnet;
using diff::ParamGroup;
using gavatar::testing::flat;
using gavatar::testing::numeric_gradient;
using gavatar::testing::random_vec;
using gavatar::testing::rel_err;
using headmodel::kNumParts;

namespace {

NetConfig tiny_config(int uv) {
  NetConfig c;
  c.encoding_dim = 4;
  c.code_dim = 5;
  c.channels = 6;
  c.hidden = 8;
  c.cnn_layers = 2;
  c.cnn_width = 4;
  c.uv_resolution = uv;
  c.encoding_sigma = 0.3;
  c.code_sigma = 0.5;
  c.init_scale = 1.5;
  return c;
}

headmodel::HeadTemplate small_template() {
  headmodel::TemplateOptions o;
  o.rings = 8;
  o.segments = 8;
  o.shape_dim = 3;
  o.expr_dim = 2;
  return headmodel::make_synthetic_template(o);
}

raster::Camera front_camera(int size) {
  return raster::Camera::look_at(Vec3(0, -0.02, 0.6), Vec3(0, -0.02, 0), Vec3(0, 1, 0), 1.6 * size, size, size);
}

std::array<MatX, kNumParts> codebook(Model& m) {
  std::array<MatX, kNumParts> z;
  for (int l = 0; l < kNumParts; ++l)
    z[l] = m.params().at("codebook." + std::string(headmodel::part_name(headmodel::part_from_index(l)))).value;
  return z;
}

double max_diff(const Image& a, const Image& b) { return (a.vec() - b.vec()).cwiseAbs().maxCoeff(); }

}  // namespace

TEST(Geometry, HeadCodomains) {
  Model m(small_template(), tiny_config(8), 2, 1);
  std::mt19937_64 rng(1);
  for (auto* g : m.params().with_prefix("geo.")) flat(g->value) = random_vec(g->value.size(), rng, 0.5);
  const LocalAttributes a = local_attributes(m, CodeSource::identity(1));
  EXPECT_GT(a.opacity.minCoeff(), 0.0);
  EXPECT_LT(a.opacity.maxCoeff(), 1.0);
  EXPECT_GT(a.scale.minCoeff(), 0.0);
  EXPECT_LE((a.rot.rowwise().norm().array() - 1.0).abs().maxCoeff(), 1e-12);
  EXPECT_LE(a.mu.cwiseAbs().maxCoeff(), m.config().pos_range);
}

TEST(Geometry, ZeroFinalLayerGivesBiasOnlyOutputs) {
  Model m(small_template(), tiny_config(8), 2, 2);
  const int last = m.config().mlp_layers - 1;
  for (int l = 0; l < kNumParts; ++l)
    m.params().at(group_prefix("geo", headmodel::part_from_index(l)) + ".l" + std::to_string(last) + ".W")
        .value.setZero();
  const LocalAttributes a = local_attributes(m, CodeSource::identity(0));
  EXPECT_EQ(a.mu.cwiseAbs().maxCoeff(), 0.0);
  EXPECT_LE((a.rot.col(0).array() - 1.0).abs().maxCoeff(), 0.0);
  EXPECT_LE((a.scale.array() - m.config().init_scale).abs().maxCoeff(), 1e-12);
  EXPECT_LE((a.opacity.array() - m.config().init_opacity).abs().maxCoeff(), 1e-12);
}

TEST(Geometry, IdenticalInputsGiveIdenticalOutputs) {
  Model m(small_template(), tiny_config(8), 2, 3);
  auto& enc = m.params().at("encoding").value;
  enc.row(1) = enc.row(0);
  // Points 0 and 1 share a part when they share a parent face.
  ASSERT_EQ(m.points().part[0], m.points().part[1]);
  const LocalAttributes a = local_attributes(m, CodeSource::identity(0));
  EXPECT_TRUE(a.mu.row(0) == a.mu.row(1));
  EXPECT_TRUE(a.scale.row(0) == a.scale.row(1));
  EXPECT_TRUE(a.rot.row(0) == a.rot.row(1));
}

TEST(Appearance, RgbRangeAndDynamicGradient) {
  Model m(small_template(), tiny_config(8), 2, 4);
  std::mt19937_64 rng(4);
  const Part part = headmodel::Part::Other;
  const int n = 5;
  const MatX f = random_vec(n * 4, rng).reshaped(n, 4);
  const MatX z = random_vec(5, rng).transpose();
  const MatX e0 = random_vec(n * 3, rng, 0.01).reshaped(n, 3);
  auto run = [&](const MatX& e, MatX* grad_e) {
    diff::Tape t;
    diff::ParamGroup eg{"e", e, MatX::Zero(n, 3)};
    Var ev = t.param(eg);
    Var fv = t.constant(f), zv = t.constant(z);
    const GeometryVars geo = predict_geometry(t, m, part, fv, zv);
    Var h = predict_appearance(t, m, part, fv, zv, ev, geo);
    const MatX out = t.value(h);
    if (grad_e) {
      t.backward(diff::sum(t, diff::mul(t, h, t.constant(MatX::Ones(n, 6) + out))));
      *grad_e = eg.grad;
    }
    return out;
  };
  const MatX h = run(e0, nullptr);
  EXPECT_EQ(h.cols(), 6);
  EXPECT_GT(h.leftCols(3).minCoeff(), 0.0);
  EXPECT_LT(h.leftCols(3).maxCoeff(), 1.0);
  EXPECT_TRUE(run(e0, nullptr) == h);
  MatX g;
  run(e0, &g);
  auto loss = [&](const VecX& x) {
    const MatX out = run(x.reshaped(n, 3), nullptr);
    return (out.array() * (MatX::Ones(n, 6) + h).array()).sum();
  };
  // loss uses the fixed weights (1 + h(e0)); the analytic run used (1 + h(e)) which is identical at e0.
  EXPECT_LE(rel_err(flat(g), numeric_gradient(loss, flat(e0), 1e-7)), 1e-4);
}

TEST(CombineIdentity, UniformLogitsGiveMean) {
  std::mt19937_64 rng(5);
  std::array<MatX, kNumParts> z;
  for (auto& zl : z) zl = random_vec(4 * 7, rng).reshaped(4, 7);
  const MatX out = combine_identity(MatX::Zero(4, kNumParts), z);
  for (int l = 0; l < kNumParts; ++l)
    EXPECT_LE((out.row(l) - z[l].colwise().mean()).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(CombineIdentity, SaturatedLogitRecoversRow) {
  std::mt19937_64 rng(6);
  std::array<MatX, kNumParts> z;
  for (auto& zl : z) zl = random_vec(4 * 7, rng, 0.1).reshaped(4, 7);
  MatX w = MatX::Zero(4, kNumParts);
  w.row(2).setConstant(20.0);
  const MatX out = combine_identity(w, z);
  for (int l = 0; l < kNumParts; ++l) EXPECT_LE((out.row(l) - z[l].row(2)).cwiseAbs().maxCoeff(), 1e-6);
}

TEST(CombineIdentity, StaysInsideCodebookEnvelope) {
  std::mt19937_64 rng(7);
  std::array<MatX, kNumParts> z;
  for (auto& zl : z) zl = random_vec(5 * 6, rng).reshaped(5, 6);
  for (int draw = 0; draw < 1000; ++draw) {
    const MatX w = random_vec(5 * kNumParts, rng, 3.0).reshaped(5, kNumParts);
    const MatX out = combine_identity(w, z);
    for (int l = 0; l < kNumParts; ++l) {
      ASSERT_TRUE((out.row(l).array() >= z[l].colwise().minCoeff().array() - 1e-15).all());
      ASSERT_TRUE((out.row(l).array() <= z[l].colwise().maxCoeff().array() + 1e-15).all());
    }
  }
}

TEST(CombineIdentity, EmptyCodebookThrows) {
  std::array<MatX, kNumParts> z;
  for (auto& zl : z) zl = MatX(0, 3);
  EXPECT_THROW(combine_identity(MatX(0, kNumParts), z), Error);
}

TEST(CombineIdentity, TapeGradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(8);
  const MatX w0 = random_vec(3 * kNumParts, rng).reshaped(3, kNumParts);
  const MatX z0 = random_vec(3 * 4, rng).reshaped(3, 4);
  const MatX W = random_vec(4, rng).transpose();
  auto eval = [&](const MatX& w, const MatX& z, MatX* gw, MatX* gz) {
    diff::ParamStore ps;
    ParamGroup& a = ps.add("w", w);
    ParamGroup& b = ps.add("z", z);
    diff::Tape t;
    Var out = combine_identity(t, t.param(a), t.param(b), 4);
    Var loss = diff::sum(t, diff::mul(t, out, t.constant(W)));
    if (gw) {
      t.backward(loss);
      *gw = a.grad;
      *gz = b.grad;
    }
    return t.value(loss)(0, 0);
  };
  MatX gw, gz;
  eval(w0, z0, &gw, &gz);
  EXPECT_LE(rel_err(flat(gw), numeric_gradient([&](const VecX& x) { return eval(x.reshaped(3, kNumParts), z0, nullptr, nullptr); }, flat(w0))), 1e-6);
  EXPECT_LE(rel_err(flat(gz), numeric_gradient([&](const VecX& x) { return eval(w0, x.reshaped(3, 4), nullptr, nullptr); }, flat(z0))), 1e-6);
}

TEST(Refine, PreservesResolution) {
  Model m(small_template(), tiny_config(8), 1, 9);
  for (auto [H, W] : {std::pair{8, 8}, {5, 13}, {16, 3}}) {
    diff::Tape t(false);
    Var y = refine(t, m, t.constant(MatX::Constant(H * W, 3, 0.3)), t.constant(MatX::Zero(H * W, 3)), H, W);
    EXPECT_EQ(t.value(y).rows(), H * W);
    EXPECT_EQ(t.value(y).cols(), 3);
    EXPECT_GT(t.value(y).minCoeff(), 0.0);
    EXPECT_LT(t.value(y).maxCoeff(), 1.0);
  }
  diff::Tape t(false);
  EXPECT_THROW(refine(t, m, t.constant(MatX::Zero(64, 3)), t.constant(MatX::Zero(63, 3)), 8, 8), DimensionError);
}

TEST(Refine, ZeroFinalLayerGivesHalf) {
  Model m(small_template(), tiny_config(8), 1, 10);
  const int L = m.config().cnn_layers - 1;
  m.params().at("cnn.l" + std::to_string(L) + ".W").value.setZero();
  m.params().at("cnn.l" + std::to_string(L) + ".b").value.setZero();
  std::mt19937_64 rng(10);
  diff::Tape t(false);
  Var y = refine(t, m, t.constant(random_vec(36 * 3, rng).reshaped(36, 3)),
                 t.constant(random_vec(36 * 3, rng).reshaped(36, 3)), 6, 6);
  EXPECT_EQ((t.value(y).array() - 0.5).abs().maxCoeff(), 0.0);
}

TEST(Refine, InputGradientMatchesFiniteDifferences) {
  Model m(small_template(), tiny_config(8), 1, 11);
  std::mt19937_64 rng(11);
  const MatX rgb = random_vec(64 * 3, rng).reshaped(64, 3);
  const MatX feat = random_vec(64 * 3, rng).reshaped(64, 3);
  const MatX W = random_vec(64 * 3, rng).reshaped(64, 3);
  auto eval = [&](const MatX& r, const MatX& f, MatX* gr, MatX* gf) {
    diff::ParamStore ps;
    ParamGroup& a = ps.add("r", r);
    ParamGroup& b = ps.add("f", f);
    diff::Tape t;
    Var y = refine(t, m, t.param(a), t.param(b), 8, 8);
    Var loss = diff::sum(t, diff::mul(t, y, t.constant(W)));
    if (gr) {
      t.backward(loss);
      *gr = a.grad;
      *gf = b.grad;
    }
    return t.value(loss)(0, 0);
  };
  MatX gr, gf;
  eval(rgb, feat, &gr, &gf);
  EXPECT_LE(rel_err(flat(gr), numeric_gradient([&](const VecX& x) { return eval(x.reshaped(64, 3), feat, nullptr, nullptr); }, flat(rgb))), 1e-6);
  EXPECT_LE(rel_err(flat(gf), numeric_gradient([&](const VecX& x) { return eval(rgb, x.reshaped(64, 3), nullptr, nullptr); }, flat(feat))), 1e-6);
}

TEST(ForwardAvatar, PureAndDeterministic) {
  Model m(small_template(), tiny_config(8), 2, 12);
  const auto p = headmodel::HeadParams::zeros(m.head());
  const auto cam = front_camera(24);
  const Rendered a = render(m, p, cam, CodeSource::identity(1));
  const Rendered b = render(m, p, cam, CodeSource::identity(1));
  EXPECT_EQ(max_diff(a.image, b.image), 0.0);
  EXPECT_EQ(max_diff(a.alpha, b.alpha), 0.0);
  EXPECT_GT(a.alpha.vec().maxCoeff(), 0.1);
}

TEST(ForwardAvatar, SaturatedMixtureMatchesCodebookRow) {
  Model m(small_template(), tiny_config(8), 3, 13);
  MatX& w = m.add_mixture().value;
  w.setZero();
  w.row(1).setConstant(40.0);
  const auto p = headmodel::HeadParams::zeros(m.head());
  const auto cam = front_camera(24);
  const Rendered a = render(m, p, cam, CodeSource::identity(1));
  const Rendered b = render(m, p, cam, CodeSource::mixture());
  EXPECT_LE(max_diff(a.image, b.image), 1e-6);
  EXPECT_LE(max_diff(a.rgb, b.rgb), 1e-6);
}

TEST(ForwardAvatar, PartIsolationIsExact) {
  Model m(small_template(), tiny_config(16), 2, 14);
  const LocalAttributes before = local_attributes(m, CodeSource::identity(0));
  const headmodel::Part part = m.points().part[m.num_points() / 2];
  const int target = headmodel::part_index(part);
  m.params().at("codebook." + std::string(headmodel::part_name(part))).value.row(0).array() += 0.5;
  const LocalAttributes after = local_attributes(m, CodeSource::identity(0));
  int changed = 0;
  for (int i = 0; i < m.num_points(); ++i) {
    const bool inside = headmodel::part_index(m.points().part[i]) == target;
    const bool same = before.mu.row(i) == after.mu.row(i) && before.scale.row(i) == after.scale.row(i) &&
                      before.rot.row(i) == after.rot.row(i) && before.opacity[i] == after.opacity[i];
    if (!inside) EXPECT_TRUE(same) << "point " << i;
    changed += inside && !same;
  }
  EXPECT_GT(changed, 0);
}

TEST(ForwardAvatar, EndToEndGradientMatchesFiniteDifferences) {
  Model m(small_template(), tiny_config(3), 2, 15);
  ASSERT_LE(m.num_points(), 10);
  const int S = 16;
  const auto cam = front_camera(S);
  std::mt19937_64 rng(15);
  const MatX Wimg = random_vec(S * S * 3, rng).reshaped(S * S, 3);
  const MatX Walpha = random_vec(S * S, rng).reshaped(S * S, 1);
  headmodel::HeadParams p = headmodel::HeadParams::zeros(m.head());
  p.theta[3 * headmodel::kJawJoint] = 0.2;
  p.phi[0] = 0.3;
  auto loss_of = [&](Model& mm, diff::Tape& t) {
    const AvatarVars a = forward_avatar(t, mm, graph::head_constants(t, p), cam, CodeSource::identity(1));
    Var l1 = diff::sum(t, diff::mul(t, a.image, t.constant(Wimg)));
    Var l2 = diff::sum(t, diff::mul(t, a.alpha, t.constant(Walpha)));
    return diff::add(t, l1, l2);
  };
  m.params().zero_grad();
  {
    diff::Tape t;
    t.backward(loss_of(m, t));
  }
  auto value_of = [&]() {
    diff::Tape t(false);
    return t.value(loss_of(m, t))(0, 0);
  };
  // Probe a few entries of every group that the identity-1 render depends on.
  int checked = 0;
  for (ParamGroup* g : m.params().groups()) {
    const auto n = g->value.size();
    std::vector<Eigen::Index> probe;
    for (Eigen::Index k = 0; k < std::min<Eigen::Index>(n, 4); ++k) probe.push_back((k * 7919 + 13) % n);
    VecX analytic(probe.size()), numeric(probe.size());
    for (size_t k = 0; k < probe.size(); ++k) {
      double& x = g->value.data()[probe[k]];
      const double x0 = x, h = 1e-6;
      x = x0 + h;
      const double fp = value_of();
      x = x0 - h;
      const double fm = value_of();
      x = x0;
      numeric[k] = (fp - fm) / (2 * h);
      analytic[k] = g->grad.data()[probe[k]];
    }
    if (numeric.norm() < 1e-9 && analytic.norm() < 1e-9) continue;
    ++checked;
    EXPECT_LE(rel_err(analytic, numeric, 1e-8), 1e-4) << g->name;
  }
  EXPECT_GT(checked, 20);
}

TEST(ForwardAvatar, MeshParameterGradientMatchesFiniteDifferences) {
  Model m(small_template(), tiny_config(3), 1, 16);
  const int S = 16;
  const auto cam = front_camera(S);
  std::mt19937_64 rng(16);
  const MatX Wimg = random_vec(S * S * 3, rng).reshaped(S * S, 3);
  headmodel::HeadParams p0 = headmodel::HeadParams::zeros(m.head());
  p0.theta[3 * headmodel::kJawJoint] = 0.15;
  p0.beta[0] = 0.5;
  auto run = [&](const headmodel::HeadParams& p, headmodel::ParamsGrad* g) {
    diff::ParamStore ps;
    ParamGroup& b = ps.add("beta", p.beta.transpose());
    ParamGroup& th = ps.add("theta", p.theta.transpose());
    ParamGroup& ph = ps.add("phi", p.phi.transpose());
    ParamGroup& d = ps.add("delta", MatX(p.delta));
    diff::Tape t;
    graph::HeadVars hv{t.param(b), t.param(th), t.param(ph), t.param(d)};
    const AvatarVars a = forward_avatar(t, m, hv, cam, CodeSource::identity(0));
    Var loss = diff::sum(t, diff::mul(t, a.image, t.constant(Wimg)));
    if (g) {
      t.backward(loss);
      g->beta = b.grad.transpose();
      g->theta = th.grad.transpose();
      g->phi = ph.grad.transpose();
    }
    return t.value(loss)(0, 0);
  };
  headmodel::ParamsGrad g;
  run(p0, &g);
  auto fb = [&](const VecX& x) {
    auto p = p0;
    p.beta = x;
    return run(p, nullptr);
  };
  auto ft = [&](const VecX& x) {
    auto p = p0;
    p.theta = x;
    return run(p, nullptr);
  };
  auto fp = [&](const VecX& x) {
    auto p = p0;
    p.phi = x;
    return run(p, nullptr);
  };
  EXPECT_LE(rel_err(g.beta, numeric_gradient(fb, p0.beta)), 1e-4);
  EXPECT_LE(rel_err(g.theta, numeric_gradient(ft, p0.theta)), 1e-4);
  EXPECT_LE(rel_err(g.phi, numeric_gradient(fp, p0.phi)), 1e-4);
}
