#include "gavatar/raster.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace gavatar::raster {

namespace {

using RowMat3 = Eigen::Matrix<double, 3, 3, Eigen::RowMajor>;

struct PixelHit {
  int g;
  double alpha;
  double T;  // transmittance before this primitive
  double dx, dy;
};

// Composites one pixel over `list` (indices into proj, in compositing order).
// Returns the final transmittance; calls emit(hit) for every contributing primitive.
template <class List, class Emit>
double composite_pixel(const List& list, const std::vector<RasterState::Projected>& proj, const VecX& opacity,
                       double px, double py, double cutoff2, double min_T, Emit&& emit) {
  double T = 1.0;
  for (int g : list) {
    const RasterState::Projected& p = proj[g];
    const double dx = px - p.mean.x();
    const double dy = py - p.mean.y();
    const double maha = p.conic(0, 0) * dx * dx + 2 * p.conic(0, 1) * dx * dy + p.conic(1, 1) * dy * dy;
    if (maha > cutoff2) continue;
    const double alpha = opacity[g] * std::exp(-0.5 * maha);
    emit(PixelHit{g, alpha, T, dx, dy});
    T *= (1.0 - alpha);
    if (T < min_T) break;
  }
  return T;
}

void prepare(const GlobalGaussians& g, const Camera& cam, const RasterSettings& s, RasterState& st) {
  g.check();
  cam.check();
  require(g.channels() >= 3, "rasterize: need at least 3 appearance channels (RGB)");
  require(s.tile_size > 0, "rasterize: tile size must be positive");
  st.inputs = g;
  st.camera = cam;
  st.settings = s;
  const int n = g.size();
  st.proj.assign(n, {});
  const Mat3 W = cam.rotation();
  const Vec3 tw = cam.translation();
  const double fx = cam.K(0, 0), sk = cam.K(0, 1), cx = cam.K(0, 2), fy = cam.K(1, 1), cy = cam.K(1, 2);
  for (int i = 0; i < n; ++i) {
    RasterState::Projected& p = st.proj[i];
    p.cam = W * g.mu.row(i).transpose() + tw;
    const double x = p.cam.x(), y = p.cam.y(), z = p.cam.z();
    p.depth = z;
    if (!(z > s.near_plane)) {
      p.culled = true;
      continue;
    }
    p.mean = Vec2((fx * x + sk * y) / z + cx, fy * y / z + cy);
    p.J << fx / z, sk / z, -(fx * x + sk * y) / (z * z), 0, fy / z, -fy * y / (z * z);
    const Mat3 R = quat_to_matrix(g.rot.row(i).transpose());
    const Mat3 M = R * g.scale.row(i).transpose().asDiagonal();
    const Eigen::Matrix<double, 2, 3> JW = p.J * W;
    p.cov = JW * (M * M.transpose()) * JW.transpose();
    p.cov(0, 1) = p.cov(1, 0) = 0.5 * (p.cov(0, 1) + p.cov(1, 0));
    p.cov += s.blur * Mat2::Identity();
    const double det = p.cov.determinant();
    if (!(det > 0) || g.opacity[i] <= 0.0) {
      p.culled = true;
      continue;
    }
    p.conic << p.cov(1, 1) / det, -p.cov(0, 1) / det, -p.cov(1, 0) / det, p.cov(0, 0) / det;
    const double mid = 0.5 * (p.cov(0, 0) + p.cov(1, 1));
    const double half = 0.5 * (p.cov(0, 0) - p.cov(1, 1));
    const double lmax = mid + std::sqrt(half * half + p.cov(0, 1) * p.cov(0, 1));
    const double r = s.cutoff_sigma * std::sqrt(lmax);
    p.x0 = std::max(0, static_cast<int>(std::floor(p.mean.x() - r)) - 1);
    p.x1 = std::min(cam.width - 1, static_cast<int>(std::ceil(p.mean.x() + r)) + 1);
    p.y0 = std::max(0, static_cast<int>(std::floor(p.mean.y() - r)) - 1);
    p.y1 = std::min(cam.height - 1, static_cast<int>(std::ceil(p.mean.y() + r)) + 1);
    p.culled = p.x0 > p.x1 || p.y0 > p.y1;
  }
  st.order.clear();
  for (int i = 0; i < n; ++i)
    if (!st.proj[i].culled) st.order.push_back(i);
  std::stable_sort(st.order.begin(), st.order.end(),
                   [&](int a, int b) { return st.proj[a].depth < st.proj[b].depth; });

  st.tiles_x = (cam.width + s.tile_size - 1) / s.tile_size;
  st.tiles_y = (cam.height + s.tile_size - 1) / s.tile_size;
  st.tiles.assign(static_cast<size_t>(st.tiles_x) * st.tiles_y, {});
  for (int g_idx : st.order) {
    const auto& p = st.proj[g_idx];
    for (int ty = p.y0 / s.tile_size; ty <= p.y1 / s.tile_size; ++ty)
      for (int tx = p.x0 / s.tile_size; tx <= p.x1 / s.tile_size; ++tx)
        st.tiles[static_cast<size_t>(ty) * st.tiles_x + tx].push_back(g_idx);
  }
}

RenderOutput split_output(const Image& color, const Image& alpha) {
  RenderOutput out;
  out.rgb = slice_channels(color, 0, 3);
  out.feat = slice_channels(color, 3, color.channels - 3);
  out.alpha = alpha;
  return out;
}

}  // namespace

void Camera::check() const {
  require(width > 0 && height > 0, "camera: resolution must be positive");
  require(K(0, 0) > 0 && K(1, 1) > 0, "camera: focal lengths must be positive");
  require(K(1, 0) == 0 && K(2, 0) == 0 && K(2, 1) == 0 && K(2, 2) == 1, "camera: K must be upper triangular");
  const Mat3 R = rotation();
  require((R.transpose() * R - Mat3::Identity()).cwiseAbs().maxCoeff() < 1e-6, "camera: E must be rigid");
}

Camera Camera::look_at(const Vec3& eye, const Vec3& target, const Vec3& up, double focal, int width,
                       int height) {
  const Vec3 fwd = (target - eye).normalized();
  const Vec3 right = fwd.cross(up).normalized();
  const Vec3 down = fwd.cross(right);
  Camera c;
  c.width = width;
  c.height = height;
  c.K << focal, 0, 0.5 * (width - 1), 0, focal, 0.5 * (height - 1), 0, 0, 1;
  Mat3 R;
  R.row(0) = right.transpose();
  R.row(1) = down.transpose();
  R.row(2) = fwd.transpose();
  c.E.setIdentity();
  c.E.topLeftCorner<3, 3>() = R;
  c.E.topRightCorner<3, 1>() = -R * eye;
  return c;
}

RenderOutput RenderOutput::zeros(int feat_channels, int height, int width) {
  return {Image(3, height, width), Image(feat_channels, height, width), Image(1, height, width)};
}

Projection project_gaussian(const Vec3& mu, const Vec4& rot, const Vec3& scale, const Camera& cam, double blur,
                            double near_plane) {
  GlobalGaussians g = GlobalGaussians::zeros(1, 3);
  g.mu.row(0) = mu.transpose();
  g.rot.row(0) = rot.transpose();
  g.scale.row(0) = scale.transpose();
  g.opacity[0] = 1.0;
  RasterState st;
  RasterSettings s;
  s.blur = blur;
  s.near_plane = near_plane;
  prepare(g, cam, s, st);
  Projection out;
  const auto& p = st.proj[0];
  out.depth = p.depth;
  out.culled = !(p.depth > near_plane);
  if (!out.culled) {
    out.mean = p.mean;
    out.cov = p.cov;
  }
  return out;
}

RenderOutput rasterize(const GlobalGaussians& g, const Camera& cam, RasterState* saved,
                       const RasterSettings& settings) {
  RasterState local;
  RasterState& st = saved ? *saved : local;
  prepare(g, cam, settings, st);
  const int C = g.channels();
  const int H = cam.height, Wd = cam.width;
  Image color(C, H, Wd);
  Image alpha(1, H, Wd);
  const int ts = settings.tile_size;
  const double cutoff2 = settings.cutoff_sigma * settings.cutoff_sigma;
  const int ntiles = st.tiles_x * st.tiles_y;
  const size_t plane = color.plane();

#pragma omp parallel for schedule(dynamic) num_threads(thread_count())
  for (int t = 0; t < ntiles; ++t) {
    const auto& list = st.tiles[t];
    if (list.empty()) continue;
    const int tx = t % st.tiles_x, ty = t / st.tiles_x;
    for (int y = ty * ts; y < std::min(H, (ty + 1) * ts); ++y)
      for (int x = tx * ts; x < std::min(Wd, (tx + 1) * ts); ++x) {
        const size_t pix = static_cast<size_t>(y) * Wd + x;
        double acc_a = 0.0;
        composite_pixel(list, st.proj, g.opacity, x, y, cutoff2, settings.min_transmittance,
                        [&](const PixelHit& h) {
                          const double w = h.alpha * h.T;
                          for (int c = 0; c < C; ++c) color.data[c * plane + pix] += w * g.h(h.g, c);
                          acc_a += w;
                        });
        alpha.data[pix] = acc_a;
      }
  }
  return split_output(color, alpha);
}

RenderOutput rasterize_naive(const GlobalGaussians& g, const Camera& cam, const RasterSettings& settings) {
  RasterState st;
  prepare(g, cam, settings, st);
  const int C = g.channels();
  Image color(C, cam.height, cam.width);
  Image alpha(1, cam.height, cam.width);
  const double cutoff2 = settings.cutoff_sigma * settings.cutoff_sigma;
  const size_t plane = color.plane();
  for (int y = 0; y < cam.height; ++y)
    for (int x = 0; x < cam.width; ++x) {
      const size_t pix = static_cast<size_t>(y) * cam.width + x;
      double acc_a = 0.0;
      composite_pixel(st.order, st.proj, g.opacity, x, y, cutoff2, settings.min_transmittance,
                      [&](const PixelHit& h) {
                        const double w = h.alpha * h.T;
                        for (int c = 0; c < C; ++c) color.data[c * plane + pix] += w * g.h(h.g, c);
                        acc_a += w;
                      });
      alpha.data[pix] = acc_a;
    }
  return split_output(color, alpha);
}

GaussianGrads rasterize_backward(const RenderOutput& grad, const std::optional<RasterState>& saved) {
  if (!saved || saved->proj.size() != static_cast<size_t>(saved->inputs.size()))
    throw Error("rasterize_backward: missing saved forward state");
  const RasterState& st = *saved;
  const GlobalGaussians& g = st.inputs;
  const Camera& cam = st.camera;
  const int n = g.size();
  const int C = g.channels();
  const int H = cam.height, Wd = cam.width;
  require(grad.rgb.channels == 3 && grad.rgb.height == H && grad.rgb.width == Wd,
          "rasterize_backward: rgb gradient shape");
  require(grad.feat.channels == C - 3 && grad.feat.height == H && grad.feat.width == Wd,
          "rasterize_backward: feature gradient shape");
  require(grad.alpha.channels == 1 && grad.alpha.height == H && grad.alpha.width == Wd,
          "rasterize_backward: alpha gradient shape");

  const int ts = st.settings.tile_size;
  const double cutoff2 = st.settings.cutoff_sigma * st.settings.cutoff_sigma;
  const size_t plane = static_cast<size_t>(H) * Wd;
  const int ntiles = st.tiles_x * st.tiles_y;

  // Per (tile, list entry) slots keep accumulation order independent of thread count.
  // Slot layout: dmean(2), dconic(a, b, c), dopacity, dcolor(C).
  const int S = 6 + C;
  std::vector<size_t> offset(ntiles + 1, 0);
  for (int t = 0; t < ntiles; ++t) offset[t + 1] = offset[t] + st.tiles[t].size();
  std::vector<double> slots(offset[ntiles] * S, 0.0);

  auto upstream = [&](int c, size_t pix) {
    return c < 3 ? grad.rgb.data[c * plane + pix] : grad.feat.data[(c - 3) * plane + pix];
  };

#pragma omp parallel num_threads(thread_count())
  {
    std::vector<PixelHit> hits;
    std::vector<int> slot_of;  // primitive -> position in current tile list
    std::vector<double> back(C + 1);
    std::vector<double> gcol(C);
#pragma omp for schedule(dynamic)
    for (int t = 0; t < ntiles; ++t) {
      const auto& list = st.tiles[t];
      if (list.empty()) continue;
      slot_of.assign(n, -1);
      for (size_t k = 0; k < list.size(); ++k) slot_of[list[k]] = static_cast<int>(k);
      double* tile_slots = slots.data() + offset[t] * S;
      const int tx = t % st.tiles_x, ty = t / st.tiles_x;
      for (int y = ty * ts; y < std::min(H, (ty + 1) * ts); ++y)
        for (int x = tx * ts; x < std::min(Wd, (tx + 1) * ts); ++x) {
          const size_t pix = static_cast<size_t>(y) * Wd + x;
          hits.clear();
          composite_pixel(list, st.proj, g.opacity, x, y, cutoff2, st.settings.min_transmittance,
                          [&](const PixelHit& h) { hits.push_back(h); });
          if (hits.empty()) continue;
          for (int c = 0; c < C; ++c) gcol[c] = upstream(c, pix);
          const double galpha = grad.alpha.data[pix];
          std::fill(back.begin(), back.end(), 0.0);
          for (auto it = hits.rbegin(); it != hits.rend(); ++it) {
            const PixelHit& h = *it;
            double* sl = tile_slots + static_cast<size_t>(slot_of[h.g]) * S;
            const double w = h.alpha * h.T;
            double dalpha = 0.0;
            for (int c = 0; c < C; ++c) {
              const double col = g.h(h.g, c);
              sl[6 + c] += w * gcol[c];
              dalpha += gcol[c] * (col - back[c]);
              back[c] = col * h.alpha + (1 - h.alpha) * back[c];
            }
            dalpha += galpha * (1.0 - back[C]);
            back[C] = h.alpha + (1 - h.alpha) * back[C];
            dalpha *= h.T;

            const auto& p = st.proj[h.g];
            const double G = h.alpha / g.opacity[h.g];
            sl[5] += G * dalpha;
            const double dmaha = -0.5 * h.alpha * dalpha;
            sl[2] += dmaha * h.dx * h.dx;
            sl[3] += dmaha * 2 * h.dx * h.dy;
            sl[4] += dmaha * h.dy * h.dy;
            sl[0] += -2 * dmaha * (p.conic(0, 0) * h.dx + p.conic(0, 1) * h.dy);
            sl[1] += -2 * dmaha * (p.conic(0, 1) * h.dx + p.conic(1, 1) * h.dy);
          }
        }
    }
  }

  // Reduce slots per primitive in fixed tile order.
  std::vector<double> acc(static_cast<size_t>(n) * S, 0.0);
  for (int t = 0; t < ntiles; ++t)
    for (size_t k = 0; k < st.tiles[t].size(); ++k) {
      const double* sl = slots.data() + (offset[t] + k) * S;
      double* a = acc.data() + static_cast<size_t>(st.tiles[t][k]) * S;
      for (int j = 0; j < S; ++j) a[j] += sl[j];
    }

  GaussianGrads out = GaussianGrads::zeros(n, C);
  const Mat3 W = cam.rotation();
  const double fx = cam.K(0, 0), sk = cam.K(0, 1), fy = cam.K(1, 1);
  for (int i = 0; i < n; ++i) {
    const auto& p = st.proj[i];
    if (p.culled) continue;
    const double* a = acc.data() + static_cast<size_t>(i) * S;
    for (int c = 0; c < C; ++c) out.h(i, c) = a[6 + c];
    out.opacity[i] = a[5];

    Mat2 gQ;
    gQ << a[2], 0.5 * a[3], 0.5 * a[3], a[4];
    const Mat2 gCov = -p.conic * gQ * p.conic;
    const Mat3 R = quat_to_matrix(g.rot.row(i).transpose());
    const Vec3 S3 = g.scale.row(i).transpose();
    const Mat3 M = R * S3.asDiagonal();
    const Mat3 Sigma = M * M.transpose();
    const Eigen::Matrix<double, 2, 3> JW = p.J * W;
    const Mat3 gSigma = JW.transpose() * gCov * JW;
    const Eigen::Matrix<double, 2, 3> gJW = 2.0 * gCov * JW * Sigma;
    const Eigen::Matrix<double, 2, 3> gJ = gJW * W.transpose();
    const Mat3 gM = 2.0 * gSigma * M;
    Mat3 gR;
    for (int k = 0; k < 3; ++k) {
      gR.col(k) = gM.col(k) * S3[k];
      out.scale(i, k) = gM.col(k).dot(R.col(k));
    }
    out.rot.row(i) = quat_to_matrix_backward(g.rot.row(i).transpose(), gR).transpose();
    Eigen::Map<RowMat3>(out.rotmat.row(i).data()) = gR;

    const double x = p.cam.x(), y = p.cam.y(), z = p.cam.z();
    const double z2 = z * z, z3 = z2 * z;
    const double u_num = fx * x + sk * y;
    const double gmx = a[0], gmy = a[1];
    Vec3 gt;
    gt.x() = gmx * fx / z - gJ(0, 2) * fx / z2;
    gt.y() = gmx * sk / z + gmy * fy / z - gJ(0, 2) * sk / z2 - gJ(1, 2) * fy / z2;
    gt.z() = -gmx * u_num / z2 - gmy * fy * y / z2 - gJ(0, 0) * fx / z2 - gJ(0, 1) * sk / z2 -
             gJ(1, 1) * fy / z2 + gJ(0, 2) * 2 * u_num / z3 + gJ(1, 2) * 2 * fy * y / z3;
    out.mu.row(i) = (W.transpose() * gt).transpose();
  }
  return out;
}

}  // namespace gavatar::raster
