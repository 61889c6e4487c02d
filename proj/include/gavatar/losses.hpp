#pragma once

// Training objectives. Tape variants take images as (H*W) x C matrices; the
// Image overloads evaluate the same quantities without recording.

#include "gavatar/diff.hpp"
#include "gavatar/gapnet.hpp"

#include <map>
#include <memory>

namespace gavatar::losses {

using diff::Tape;
using diff::Var;

struct LossWeights {
  double mouth = 10.0;
  double l1 = 0.8;
  double ssim = 0.2;
  double lpips = 0.4;
  double alpha = 1.0;
  double scale = 1.0;
  double position = 0.01;
  double arap = 1.0;
  double ref = 0.01;
  double eps_scale = 0.6;
  double eps_position = 1.0;

  void validate() const;
};

/// One supervised frame.
struct SupervisionBundle {
  Image image;  // 3 x H x W in [0,1]
  Image mask;   // 1 x H x W, binary head mask
  Image mouth;  // 1 x H x W, binary mouth mask
  raster::Camera camera;
  headmodel::HeadParams params;

  void validate() const;
};

constexpr int kSsimWindow = 11;
constexpr double kSsimSigma = 1.5;

/// Mean SSIM over channels and valid window positions.
double ssim(const Image& a, const Image& b);
Var ssim(Tape& t, Var a, Var b, int height, int width);

/// Feature extractor used for the perceptual term.
class PerceptualBackend {
 public:
  virtual ~PerceptualBackend() = default;
  virtual Var distance(Tape& t, Var a, Var b, int height, int width) const = 0;
};

/// Frozen random 3x3 filter bank applied on an image pyramid; the raw pixels are part of the features.
class RandomPyramid : public PerceptualBackend {
 public:
  explicit RandomPyramid(std::uint64_t seed = 7, int scales = 3, int filters = 8);
  Var distance(Tape& t, Var a, Var b, int height, int width) const override;

 private:
  int scales_;
  std::vector<MatX> weights_;  // per scale, 27 x filters
};

const PerceptualBackend& default_perceptual();

double perceptual(const Image& a, const Image& b, const PerceptualBackend& backend = default_perceptual());
double l1(const Image& a, const Image& b);

/// l1 * L1 + ssim * (1 - SSIM) + lpips * perceptual.
Var reconstruction(Tape& t, Var image, Var target, int height, int width, const LossWeights& w,
                   const PerceptualBackend& backend = default_perceptual());
double reconstruction(const Image& image, const Image& target, const LossWeights& w,
                      const PerceptualBackend& backend = default_perceptual());

struct Terms {
  Var total;
  std::map<std::string, double> parts;  // named scalar components for logging
};

/// alpha * mean|I_alpha - mask| + scale * ||max(S', eps_s)|| + position * ||max(mu', eps_mu)||
/// + arap * ARAP(rest shape, reference).
Terms regularization(Tape& t, Var alpha, const Image& mask, Var scale_local, Var mu_local, Var rest_shape,
                     const headmodel::Vertices& reference, const MatX3i& faces, const LossWeights& w);

/// Scalar form of the regularizer given plain values (no ARAP term when rest_shape is empty).
double regularization(const Image& alpha, const Image& mask, const MatX3& scale_local, const MatX3& mu_local,
                      const LossWeights& w);

/// Per-frame objective: L_rec(I) + L_rec(I_rgb) + mouth * L_rec(I * M, I* * M) + L_reg.
Terms prior_loss(Tape& t, const gapnet::AvatarVars& out, const SupervisionBundle& b, const Image& mouth_mask,
                 Var rest_shape, const headmodel::Vertices& reference, const MatX3i& faces, const LossWeights& w,
                 const PerceptualBackend& backend = default_perceptual());

/// Adds ref * sum_i L_rec(R_i, cached_i) to a data term; throws when the cache is empty.
Terms finetune_loss(Tape& t, const Terms& data, std::span<const Var> reference_renders,
                    std::span<const Image> cache, double cache_scale, const LossWeights& w,
                    const PerceptualBackend& backend = default_perceptual());

/// Alpha of mouth-part primitives thresholded at 0.5, merged with `given` (may be empty).
Image mouth_mask(const splat::GlobalGaussians& g, const std::vector<int>& mouth_points, const raster::Camera& cam,
                 const Image& given, const raster::RasterSettings& settings = {});

}  // namespace gavatar::losses
