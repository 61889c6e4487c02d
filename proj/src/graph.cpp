#include "gavatar/graph.hpp"

#include <memory>

namespace gavatar::graph {

using headmodel::FrameGrad;
using headmodel::TriangleFrame;
using RowMat3 = Eigen::Matrix<double, 3, 3, Eigen::RowMajor>;

HeadVars head_constants(Tape& t, const headmodel::HeadParams& p) {
  return {t.constant(p.beta.transpose()), t.constant(p.theta.transpose()), t.constant(p.phi.transpose()),
          t.constant(MatX(p.delta))};
}

headmodel::HeadParams head_values(const Tape& t, const HeadVars& h) {
  headmodel::HeadParams p;
  p.beta = t.value(h.beta).transpose();
  p.theta = t.value(h.theta).transpose();
  p.phi = t.value(h.phi).transpose();
  p.delta = t.value(h.delta);
  return p;
}

Var pose(Tape& t, const headmodel::HeadTemplate& tmpl, const HeadVars& h) {
  const headmodel::HeadParams p = head_values(t, h);
  MatX verts = headmodel::pose_mesh(tmpl, p);
  const auto* tp = &tmpl;
  Var in[] = {h.beta, h.theta, h.phi, h.delta};
  return t.record1(in, std::move(verts), [tp, p](auto og, auto ig) {
    const headmodel::Vertices g = *og[0];
    const headmodel::ParamsGrad pg = headmodel::pose_mesh_backward(*tp, p, g);
    if (ig[0]) *ig[0] += pg.beta.transpose();
    if (ig[1]) *ig[1] += pg.theta.transpose();
    if (ig[2]) *ig[2] += pg.phi.transpose();
    if (ig[3]) *ig[3] += MatX(pg.delta);
  });
}

FrameVars frames(Tape& t, Var vertices, const MatX3i& faces) {
  auto posed = std::make_shared<headmodel::Vertices>(t.value(vertices));
  const auto fr = headmodel::triangle_frames(*posed, faces);
  const auto F = static_cast<Eigen::Index>(fr.size());
  MatX R(F, 9), s(F, 1), T(F, 3);
  for (Eigen::Index f = 0; f < F; ++f) {
    R.row(f) = Eigen::Map<const VecX>(RowMat3(fr[f].R).data(), 9).transpose();
    s(f, 0) = fr[f].s;
    T.row(f) = fr[f].T.transpose();
  }
  auto fc = std::make_shared<MatX3i>(faces);
  Var in[] = {vertices};
  std::vector<MatX> outs;
  outs.push_back(std::move(R));
  outs.push_back(std::move(s));
  outs.push_back(std::move(T));
  auto v = t.record(in, std::move(outs), [posed, fc](auto og, auto ig) {
    if (!ig[0]) return;
    const Eigen::Index F = og[0]->rows();
    std::vector<FrameGrad> g(F);
    for (Eigen::Index f = 0; f < F; ++f) {
      const VecX r = og[0]->row(f).transpose();
      g[f].R = Eigen::Map<const RowMat3>(r.data());
      g[f].s = (*og[1])(f, 0);
      g[f].T = og[2]->row(f).transpose();
    }
    headmodel::Vertices gv = headmodel::Vertices::Zero(posed->rows(), 3);
    headmodel::triangle_frames_backward(*posed, *fc, g, gv);
    *ig[0] += MatX(gv);
  });
  return {v[0], v[1], v[2]};
}

std::vector<TriangleFrame> frames_value(const Tape& t, const FrameVars& f) {
  const MatX& R = t.value(f.R);
  const MatX& s = t.value(f.s);
  const MatX& T = t.value(f.T);
  std::vector<TriangleFrame> out(R.rows());
  for (Eigen::Index i = 0; i < R.rows(); ++i) {
    const VecX r = R.row(i).transpose();
    out[i].R = Eigen::Map<const RowMat3>(r.data());
    out[i].s = s(i, 0);
    out[i].T = T.row(i).transpose();
  }
  return out;
}

namespace {

void frame_grads_to(const std::vector<FrameGrad>& g, std::span<MatX* const> ig, size_t first) {
  for (size_t f = 0; f < g.size(); ++f) {
    const auto fi = static_cast<Eigen::Index>(f);
    if (ig[first]) ig[first]->row(fi) += Eigen::Map<const VecX>(RowMat3(g[f].R).data(), 9).transpose();
    if (ig[first + 1]) (*ig[first + 1])(fi, 0) += g[f].s;
    if (ig[first + 2]) ig[first + 2]->row(fi) += g[f].T.transpose();
  }
}

}  // namespace

BoundVars bind(Tape& t, Var mu_local, Var rot_local, Var scale_local, const FrameVars& f,
               std::span<const int> parent) {
  auto local = std::make_shared<splat::LocalGaussians>(splat::LocalGaussians::zeros(
      static_cast<int>(t.value(mu_local).rows()), 0));
  local->mu = t.value(mu_local);
  local->rot = t.value(rot_local);
  local->scale = t.value(scale_local);
  auto fr = std::make_shared<std::vector<TriangleFrame>>(frames_value(t, f));
  auto par = std::make_shared<std::vector<int>>(parent.begin(), parent.end());
  const splat::GlobalGaussians g = splat::local_to_global(*local, *fr, *par);
  const int n = g.size();
  MatX rotmat(n, 9);
  for (int i = 0; i < n; ++i)
    rotmat.row(i) = Eigen::Map<const VecX>(RowMat3(quat_to_matrix(g.rot.row(i).transpose())).data(), 9).transpose();
  std::vector<MatX> outs;
  outs.push_back(MatX(g.mu));
  outs.push_back(std::move(rotmat));
  outs.push_back(MatX(g.scale));
  Var in[] = {mu_local, rot_local, scale_local, f.R, f.s, f.T};
  auto v = t.record(in, std::move(outs), [local, fr, par](auto og, auto ig) {
    const int n = local->size();
    splat::GaussianGrads gg = splat::GaussianGrads::zeros(n, 0);
    gg.mu = *og[0];
    gg.rotmat = *og[1];
    gg.scale = *og[2];
    std::vector<FrameGrad> fg(fr->size());
    const splat::GaussianGrads lg = splat::local_to_global_backward(*local, *fr, *par, gg, fg);
    if (ig[0]) *ig[0] += MatX(lg.mu);
    if (ig[1]) *ig[1] += MatX(lg.rot);
    if (ig[2]) *ig[2] += MatX(lg.scale);
    frame_grads_to(fg, ig, 3);
  });
  return {v[0], v[1], v[2]};
}

Var dynamic_signal(Tape& t, Var mu_local, const FrameVars& posed, const FrameVars& neutral,
                   std::span<const int> parent) {
  auto mu = std::make_shared<MatX3>(t.value(mu_local));
  auto pf = std::make_shared<std::vector<TriangleFrame>>(frames_value(t, posed));
  auto nf = std::make_shared<std::vector<TriangleFrame>>(frames_value(t, neutral));
  auto par = std::make_shared<std::vector<int>>(parent.begin(), parent.end());
  MatX e = splat::dynamic_signal(*mu, *pf, *nf, *par);
  Var in[] = {mu_local, posed.R, posed.s, posed.T, neutral.R, neutral.s, neutral.T};
  return t.record1(in, std::move(e), [mu, pf, nf, par](auto og, auto ig) {
    std::vector<FrameGrad> pg(pf->size()), ng(nf->size());
    const MatX3 ge = *og[0];
    const MatX3 gmu = splat::dynamic_signal_backward(*mu, *pf, *nf, *par, ge, pg, ng);
    if (ig[0]) *ig[0] += MatX(gmu);
    frame_grads_to(pg, ig, 1);
    frame_grads_to(ng, ig, 4);
  });
}

ImageVars rasterize(Tape& t, const BoundVars& b, Var opacity, Var h, const raster::Camera& cam,
                    const raster::RasterSettings& settings) {
  const MatX& rm = t.value(b.rotmat);
  const int n = static_cast<int>(rm.rows());
  splat::GlobalGaussians g;
  g.mu = t.value(b.mu);
  g.rot.resize(n, 4);
  for (int i = 0; i < n; ++i) {
    const VecX r = rm.row(i).transpose();
    g.rot.row(i) = matrix_to_quat(Eigen::Map<const RowMat3>(r.data())).transpose();
  }
  g.scale = t.value(b.scale);
  require(t.value(opacity).cols() == 1, "rasterize: opacity must be n x 1");
  g.opacity = t.value(opacity).col(0);
  g.h = t.value(h);
  auto state = std::make_shared<std::optional<raster::RasterState>>(std::in_place);
  const raster::RenderOutput out = raster::rasterize(g, cam, &**state, settings);
  std::vector<MatX> outs;
  outs.push_back(diff::image_to_mat(out.rgb));
  outs.push_back(diff::image_to_mat(out.feat));
  outs.push_back(diff::image_to_mat(out.alpha));
  Var in[] = {b.mu, b.rotmat, b.scale, opacity, h};
  const int H = cam.height, W = cam.width;
  auto v = t.record(in, std::move(outs), [state, H, W](auto og, auto ig) {
    raster::RenderOutput up;
    up.rgb = diff::mat_to_image(*og[0], H, W);
    up.feat = diff::mat_to_image(*og[1], H, W);
    up.alpha = diff::mat_to_image(*og[2], H, W);
    const splat::GaussianGrads gr = raster::rasterize_backward(up, *state);
    if (ig[0]) *ig[0] += MatX(gr.mu);
    if (ig[1]) *ig[1] += MatX(gr.rotmat);
    if (ig[2]) *ig[2] += MatX(gr.scale);
    if (ig[3]) ig[3]->col(0) += gr.opacity;
    if (ig[4]) *ig[4] += gr.h;
  });
  return {v[0], v[1], v[2]};
}

Var arap(Tape& t, Var vertices, const headmodel::Vertices& reference, const MatX3i& faces) {
  const headmodel::Vertices x = t.value(vertices);
  auto grad = std::make_shared<headmodel::Vertices>(headmodel::Vertices::Zero(x.rows(), 3));
  const double e = headmodel::arap_energy(x, reference, faces, grad.get());
  Var in[] = {vertices};
  return t.record1(in, MatX::Constant(1, 1, e), [grad](auto og, auto ig) {
    if (ig[0]) *ig[0] += (*og[0])(0, 0) * MatX(*grad);
  });
}

}  // namespace gavatar::graph
