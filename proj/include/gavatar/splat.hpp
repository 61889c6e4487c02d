#pragma once

// Gaussian primitive storage bound to mesh faces: UV-based initialization, the
// local-to-global binding transform and the per-point dynamic signal.

#include "gavatar/common.hpp"
#include "gavatar/headmodel.hpp"

#include <array>
#include <cstdint>

namespace gavatar::splat {

using headmodel::FrameGrad;
using headmodel::Part;
using headmodel::TriangleFrame;

/// Fixed-size point set; the count and part labels never change after init.
struct FeaturePointCloud {
  std::vector<int> parent_face;
  std::vector<Part> part;
  MatX3 barycentric;   // weights of the parent face's vertices
  MatX3 anchor_local;  // texel surface point in the rest-template face frame
  MatX2 uv;            // texel centers
  MatX encoding;       // n x c1, learnable

  int size() const { return static_cast<int>(parent_face.size()); }
  /// Point indices grouped by part (index = part_index(label)).
  std::array<std::vector<int>, headmodel::kNumParts> part_members() const;
};

struct PointCloudOptions {
  int uv_resolution = 64;
  int encoding_dim = 48;
  double encoding_sigma = 0.01;
  std::uint64_t seed = 0;
};

/// One primitive per texel whose center lies inside a face's UV triangle.
FeaturePointCloud init_uv_pointcloud(const headmodel::HeadTemplate& t, const PointCloudOptions& opts);

/// Attributes of a batch of primitives (structure of arrays). Quaternions are (w, x, y, z).
struct Gaussians {
  MatX3 mu;
  MatX4 rot;
  MatX3 scale;
  VecX opacity;
  MatX h;  // appearance channels

  int size() const { return static_cast<int>(mu.rows()); }
  int channels() const { return static_cast<int>(h.cols()); }
  static Gaussians zeros(int n, int channels);
  void check() const;
};

using LocalGaussians = Gaussians;
using GlobalGaussians = Gaussians;

/// Gradients w.r.t. a Gaussians batch. `rotmat` holds dL/dR for each primitive's
/// rotation matrix (row-major 3x3 per row); `rot` the equivalent quaternion gradient.
struct GaussianGrads {
  MatX3 mu;
  MatX4 rot;
  MatX9 rotmat;
  MatX3 scale;
  VecX opacity;
  MatX h;

  static GaussianGrads zeros(int n, int channels);
};

struct LocalGaussian {
  Vec3 mu = Vec3::Zero();
  Vec4 rot = Vec4(1, 0, 0, 0);
  Vec3 scale = Vec3::Ones();
  double opacity = 1.0;
  VecX h;
};

/// r = R r', mu = s R mu' + T, S = s S'; opacity and h pass through.
LocalGaussian local_to_global(const LocalGaussian& local, const TriangleFrame& frame);

/// Batched binding; primitive i uses frames[parent[i]].
GlobalGaussians local_to_global(const LocalGaussians& local, std::span<const TriangleFrame> frames,
                                std::span<const int> parent);

/// Adjoint of the batched binding. Uses global_grads.rotmat (not .rot) for rotations.
/// Frame gradients are accumulated into frame_grads (sized like frames).
GaussianGrads local_to_global_backward(const LocalGaussians& local, std::span<const TriangleFrame> frames,
                                       std::span<const int> parent, const GaussianGrads& global_grads,
                                       std::span<FrameGrad> frame_grads);

/// e = T(mu'; posed) - T(mu'; neutral), positions only.
Vec3 dynamic_signal(const Vec3& mu_local, const TriangleFrame& posed, const TriangleFrame& neutral);

MatX3 dynamic_signal(const MatX3& mu_local, std::span<const TriangleFrame> posed,
                     std::span<const TriangleFrame> neutral, std::span<const int> parent);

/// Adjoint of the batched dynamic signal; returns dL/dmu_local, accumulates frame gradients.
MatX3 dynamic_signal_backward(const MatX3& mu_local, std::span<const TriangleFrame> posed,
                              std::span<const TriangleFrame> neutral, std::span<const int> parent,
                              const MatX3& grad_e, std::span<FrameGrad> posed_grads,
                              std::span<FrameGrad> neutral_grads);

}  // namespace gavatar::splat
