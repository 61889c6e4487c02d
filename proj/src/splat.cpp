#include "gavatar/splat.hpp"

#include <algorithm>
#include <cmath>
#include <random>

namespace gavatar::splat {

std::array<std::vector<int>, headmodel::kNumParts> FeaturePointCloud::part_members() const {
  std::array<std::vector<int>, headmodel::kNumParts> out;
  for (int i = 0; i < size(); ++i) out[headmodel::part_index(part[i])].push_back(i);
  return out;
}

FeaturePointCloud init_uv_pointcloud(const headmodel::HeadTemplate& t, const PointCloudOptions& opts) {
  if (opts.uv_resolution <= 0) throw Error("init_uv_pointcloud: uv_resolution must be positive");
  require(opts.encoding_dim > 0, "init_uv_pointcloud: encoding_dim must be positive");
  const int res = opts.uv_resolution;
  std::vector<int> owner(static_cast<size_t>(res) * res, -1);
  std::vector<Vec3> bary(owner.size());

  for (int f = 0; f < t.num_faces(); ++f) {
    const Vec2 a = t.uv.row(t.faces(f, 0)).transpose();
    const Vec2 b = t.uv.row(t.faces(f, 1)).transpose();
    const Vec2 c = t.uv.row(t.faces(f, 2)).transpose();
    const double det = (b - a).x() * (c - a).y() - (b - a).y() * (c - a).x();
    if (std::abs(det) < 1e-18) continue;  // zero-area in UV: owns no texels
    const double umin = std::min({a.x(), b.x(), c.x()}), umax = std::max({a.x(), b.x(), c.x()});
    const double vmin = std::min({a.y(), b.y(), c.y()}), vmax = std::max({a.y(), b.y(), c.y()});
    const int i0 = std::max(0, static_cast<int>(std::floor(umin * res - 0.5)));
    const int i1 = std::min(res - 1, static_cast<int>(std::ceil(umax * res - 0.5)));
    const int j0 = std::max(0, static_cast<int>(std::floor(vmin * res - 0.5)));
    const int j1 = std::min(res - 1, static_cast<int>(std::ceil(vmax * res - 0.5)));
    for (int j = j0; j <= j1; ++j)
      for (int i = i0; i <= i1; ++i) {
        const size_t idx = static_cast<size_t>(j) * res + i;
        if (owner[idx] >= 0) continue;
        const Vec2 p((i + 0.5) / res, (j + 0.5) / res);
        const double l1 = ((p - a).x() * (c - a).y() - (p - a).y() * (c - a).x()) / det;
        const double l2 = ((b - a).x() * (p - a).y() - (b - a).y() * (p - a).x()) / det;
        const double l0 = 1 - l1 - l2;
        if (l0 < -1e-12 || l1 < -1e-12 || l2 < -1e-12) continue;
        owner[idx] = f;
        bary[idx] = Vec3(l0, l1, l2);
      }
  }

  FeaturePointCloud pc;
  std::vector<size_t> texels;
  for (size_t i = 0; i < owner.size(); ++i)
    if (owner[i] >= 0) texels.push_back(i);
  if (texels.empty()) throw Error("init_uv_pointcloud: UV atlas covers no texel centers");

  const int n = static_cast<int>(texels.size());
  pc.parent_face.resize(n);
  pc.part.resize(n);
  pc.barycentric.resize(n, 3);
  pc.anchor_local.resize(n, 3);
  pc.uv.resize(n, 2);
  const auto frames = headmodel::triangle_frames(t.vertices, t.faces);
  for (int k = 0; k < n; ++k) {
    const size_t idx = texels[k];
    const int f = owner[idx];
    pc.parent_face[k] = f;
    pc.part[k] = headmodel::part_of_face(t, f);
    pc.barycentric.row(k) = bary[idx].transpose();
    pc.uv.row(k) << (idx % res + 0.5) / res, (idx / res + 0.5) / res;
    Vec3 p = Vec3::Zero();
    for (int c = 0; c < 3; ++c) p += bary[idx][c] * t.vertices.row(t.faces(f, c)).transpose();
    pc.anchor_local.row(k) = (frames[f].R.transpose() * (p - frames[f].T) / frames[f].s).transpose();
  }
  std::mt19937_64 rng(opts.seed);
  std::normal_distribution<double> nd(0.0, opts.encoding_sigma);
  pc.encoding.resize(n, opts.encoding_dim);
  for (int i = 0; i < n; ++i)
    for (int c = 0; c < opts.encoding_dim; ++c) pc.encoding(i, c) = nd(rng);
  return pc;
}

Gaussians Gaussians::zeros(int n, int channels) {
  Gaussians g;
  g.mu = MatX3::Zero(n, 3);
  g.rot = MatX4::Zero(n, 4);
  g.rot.col(0).setOnes();
  g.scale = MatX3::Ones(n, 3);
  g.opacity = VecX::Zero(n);
  g.h = MatX::Zero(n, channels);
  return g;
}

void Gaussians::check() const {
  const auto n = mu.rows();
  require(rot.rows() == n && scale.rows() == n && opacity.size() == n && h.rows() == n,
          "gaussians: attribute arrays must share the primitive count");
}

GaussianGrads GaussianGrads::zeros(int n, int channels) {
  GaussianGrads g;
  g.mu = MatX3::Zero(n, 3);
  g.rot = MatX4::Zero(n, 4);
  g.rotmat = MatX9::Zero(n, 9);
  g.scale = MatX3::Zero(n, 3);
  g.opacity = VecX::Zero(n);
  g.h = MatX::Zero(n, channels);
  return g;
}

LocalGaussian local_to_global(const LocalGaussian& l, const TriangleFrame& fr) {
  LocalGaussian g;
  g.mu = fr.s * (fr.R * l.mu) + fr.T;
  g.rot = quat_mul(matrix_to_quat(fr.R), l.rot / l.rot.norm());
  g.rot /= g.rot.norm();
  g.scale = fr.s * l.scale;
  g.opacity = l.opacity;
  g.h = l.h;
  return g;
}

GlobalGaussians local_to_global(const LocalGaussians& l, std::span<const TriangleFrame> frames,
                                std::span<const int> parent) {
  l.check();
  require(static_cast<int>(parent.size()) == l.size(), "local_to_global: one parent per primitive");
  std::vector<Vec4> frame_quat(frames.size());
  for (size_t f = 0; f < frames.size(); ++f) frame_quat[f] = matrix_to_quat(frames[f].R);
  GlobalGaussians g;
  const int n = l.size();
  g.mu.resize(n, 3);
  g.rot.resize(n, 4);
  g.scale.resize(n, 3);
  g.opacity = l.opacity;
  g.h = l.h;
  for (int i = 0; i < n; ++i) {
    const int f = parent[i];
    require(f >= 0 && f < static_cast<int>(frames.size()), "local_to_global: parent face out of range");
    const TriangleFrame& fr = frames[f];
    g.mu.row(i) = (fr.s * (fr.R * l.mu.row(i).transpose()) + fr.T).transpose();
    const Vec4 q = l.rot.row(i).transpose();
    Vec4 r = quat_mul(frame_quat[f], q / q.norm());
    g.rot.row(i) = (r / r.norm()).transpose();
    g.scale.row(i) = fr.s * l.scale.row(i);
  }
  return g;
}

GaussianGrads local_to_global_backward(const LocalGaussians& l, std::span<const TriangleFrame> frames,
                                       std::span<const int> parent, const GaussianGrads& gg,
                                       std::span<FrameGrad> frame_grads) {
  require(frame_grads.size() == frames.size(), "local_to_global_backward: frame gradient buffer size");
  const int n = l.size();
  GaussianGrads out = GaussianGrads::zeros(n, l.channels());
  out.opacity = gg.opacity;
  out.h = gg.h;
  for (int i = 0; i < n; ++i) {
    const int f = parent[i];
    const TriangleFrame& fr = frames[f];
    FrameGrad& fg = frame_grads[f];
    const Vec3 mu = l.mu.row(i).transpose();
    const Vec3 gmu = gg.mu.row(i).transpose();
    out.mu.row(i) = (fr.s * (fr.R.transpose() * gmu)).transpose();
    fg.R += fr.s * gmu * mu.transpose();
    fg.s += gmu.dot(fr.R * mu);
    fg.T += gmu;

    const Vec3 gS = gg.scale.row(i).transpose();
    out.scale.row(i) = fr.s * gg.scale.row(i);
    fg.s += gS.dot(l.scale.row(i).transpose());

    const Mat3 gRg = Eigen::Map<const Eigen::Matrix<double, 3, 3, Eigen::RowMajor>>(gg.rotmat.row(i).data());
    const Vec4 q = l.rot.row(i).transpose();
    const Mat3 Rl = quat_to_matrix(q);
    fg.R += gRg * Rl.transpose();
    const Mat3 gRl = fr.R.transpose() * gRg;
    out.rot.row(i) = quat_to_matrix_backward(q, gRl).transpose();
    Eigen::Map<Eigen::Matrix<double, 3, 3, Eigen::RowMajor>>(out.rotmat.row(i).data()) = gRl;
  }
  return out;
}

Vec3 dynamic_signal(const Vec3& m, const TriangleFrame& p, const TriangleFrame& n) {
  return (p.s * (p.R * m) + p.T) - (n.s * (n.R * m) + n.T);
}

MatX3 dynamic_signal(const MatX3& mu, std::span<const TriangleFrame> posed,
                     std::span<const TriangleFrame> neutral, std::span<const int> parent) {
  require(posed.size() == neutral.size(), "dynamic_signal: posed/neutral frame count mismatch");
  require(static_cast<Eigen::Index>(parent.size()) == mu.rows(), "dynamic_signal: one parent per point");
  MatX3 e(mu.rows(), 3);
  for (Eigen::Index i = 0; i < mu.rows(); ++i) {
    const int f = parent[i];
    e.row(i) = dynamic_signal(Vec3(mu.row(i).transpose()), posed[f], neutral[f]).transpose();
  }
  return e;
}

MatX3 dynamic_signal_backward(const MatX3& mu, std::span<const TriangleFrame> posed,
                              std::span<const TriangleFrame> neutral, std::span<const int> parent,
                              const MatX3& ge, std::span<FrameGrad> pg, std::span<FrameGrad> ng) {
  MatX3 gmu(mu.rows(), 3);
  for (Eigen::Index i = 0; i < mu.rows(); ++i) {
    const int f = parent[i];
    const Vec3 m = mu.row(i).transpose();
    const Vec3 g = ge.row(i).transpose();
    const TriangleFrame& p = posed[f];
    const TriangleFrame& n = neutral[f];
    gmu.row(i) = (p.s * (p.R.transpose() * g) - n.s * (n.R.transpose() * g)).transpose();
    pg[f].R += p.s * g * m.transpose();
    pg[f].s += g.dot(p.R * m);
    pg[f].T += g;
    ng[f].R -= n.s * g * m.transpose();
    ng[f].s -= g.dot(n.R * m);
    ng[f].T -= g;
  }
  return gmu;
}

}  // namespace gavatar::splat
