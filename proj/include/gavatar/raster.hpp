#pragma once

// Tile-based differentiable splatting of global Gaussians into RGB, latent
// feature and accumulated-opacity images, plus a per-pixel reference path.

#include "gavatar/common.hpp"
#include "gavatar/splat.hpp"

#include <optional>

namespace gavatar::raster {

using splat::GaussianGrads;
using splat::GlobalGaussians;

struct Camera {
  Mat3 K = Mat3::Identity();  // pixels; upper triangular
  Mat4 E = Mat4::Identity();  // world -> camera, rigid
  int width = 0;
  int height = 0;

  void check() const;
  Mat3 rotation() const { return E.topLeftCorner<3, 3>(); }
  Vec3 translation() const { return E.topRightCorner<3, 1>(); }
  Vec3 center() const { return -rotation().transpose() * translation(); }

  /// Camera at `eye` looking at `target`; image x right, image y down, `up` in world.
  static Camera look_at(const Vec3& eye, const Vec3& target, const Vec3& up, double focal, int width,
                        int height);
};

struct RasterSettings {
  int tile_size = 16;
  double blur = 0.3;              // px^2 added to every screen-space covariance
  double cutoff_sigma = 3.0;      // footprint radius in standard deviations
  double near_plane = 0.01;
  double min_transmittance = 1e-4;  // compositing stops once T falls below this
};

struct Projection {
  Vec2 mean = Vec2::Zero();
  Mat2 cov = Mat2::Identity();
  double depth = 0.0;
  bool culled = true;
};

Projection project_gaussian(const Vec3& mu, const Vec4& rot, const Vec3& scale, const Camera& cam,
                            double blur = 0.3, double near_plane = 0.01);

struct RenderOutput {
  Image rgb;    // 3 x H x W
  Image feat;   // (C - 3) x H x W
  Image alpha;  // 1 x H x W

  static RenderOutput zeros(int feat_channels, int height, int width);
};

/// Everything the backward pass needs from a forward call.
struct RasterState {
  GlobalGaussians inputs;
  Camera camera;
  RasterSettings settings;
  struct Projected {
    Vec2 mean;
    Mat2 cov;
    Mat2 conic;
    Vec3 cam;  // camera-space position
    Eigen::Matrix<double, 2, 3> J;
    double depth = 0;
    bool culled = true;
    int x0 = 0, x1 = -1, y0 = 0, y1 = -1;  // pixel bounding box (inclusive)
  };
  std::vector<Projected> proj;
  std::vector<int> order;                 // unculled primitives sorted by (depth, index)
  std::vector<std::vector<int>> tiles;    // per tile, primitives in compositing order
  int tiles_x = 0;
  int tiles_y = 0;
};

RenderOutput rasterize(const GlobalGaussians& g, const Camera& cam, RasterState* saved = nullptr,
                       const RasterSettings& settings = {});

/// Per-pixel evaluation over every sorted primitive, no tiling.
RenderOutput rasterize_naive(const GlobalGaussians& g, const Camera& cam, const RasterSettings& settings = {});

/// Adjoint of rasterize. Fills mu, rot, rotmat, scale, opacity and h.
GaussianGrads rasterize_backward(const RenderOutput& grad, const std::optional<RasterState>& saved);

}  // namespace gavatar::raster
