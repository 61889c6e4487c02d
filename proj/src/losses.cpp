#include "gavatar/losses.hpp"

#include <cmath>
#include <random>

namespace gavatar::losses {

using namespace diff;

void LossWeights::validate() const {
  for (double v : {mouth, l1, ssim, lpips, alpha, scale, position, arap, ref, eps_scale, eps_position})
    if (!(v >= 0) || !std::isfinite(v)) throw ConfigError("loss weights must be finite and non-negative");
}

void SupervisionBundle::validate() const {
  require(image.channels == 3, "bundle: image must have 3 channels");
  require(mask.channels == 1 && mask.height == image.height && mask.width == image.width,
          "bundle: head mask must be 1 x H x W");
  require(mouth.channels == 1 && mouth.height == image.height && mouth.width == image.width,
          "bundle: mouth mask must be 1 x H x W");
  require(camera.width == image.width && camera.height == image.height, "bundle: camera resolution mismatch");
}

namespace {

const std::array<double, kSsimWindow>& gauss_taps() {
  static const std::array<double, kSsimWindow> taps = [] {
    std::array<double, kSsimWindow> g{};
    double s = 0;
    for (int i = 0; i < kSsimWindow; ++i) {
      const double d = i - kSsimWindow / 2;
      g[i] = std::exp(-d * d / (2 * kSsimSigma * kSsimSigma));
      s += g[i];
    }
    for (double& v : g) v /= s;
    return g;
  }();
  return taps;
}

// Separable valid filtering of an H x W plane (row-major) to (H-10) x (W-10).
std::vector<double> filter_valid(const double* x, int H, int W) {
  const auto& g = gauss_taps();
  const int oh = H - kSsimWindow + 1, ow = W - kSsimWindow + 1;
  std::vector<double> tmp(static_cast<size_t>(H) * ow), out(static_cast<size_t>(oh) * ow);
  for (int y = 0; y < H; ++y)
    for (int xo = 0; xo < ow; ++xo) {
      double s = 0;
      for (int k = 0; k < kSsimWindow; ++k) s += g[k] * x[y * W + xo + k];
      tmp[y * ow + xo] = s;
    }
  for (int yo = 0; yo < oh; ++yo)
    for (int xo = 0; xo < ow; ++xo) {
      double s = 0;
      for (int k = 0; k < kSsimWindow; ++k) s += g[k] * tmp[(yo + k) * ow + xo];
      out[yo * ow + xo] = s;
    }
  return out;
}

// Adjoint of filter_valid: scatters an (H-10) x (W-10) map back onto H x W, adding into dst.
void filter_adjoint(const std::vector<double>& m, int H, int W, double* dst) {
  const auto& g = gauss_taps();
  const int oh = H - kSsimWindow + 1, ow = W - kSsimWindow + 1;
  std::vector<double> tmp(static_cast<size_t>(H) * ow, 0.0);
  for (int yo = 0; yo < oh; ++yo)
    for (int k = 0; k < kSsimWindow; ++k)
      for (int xo = 0; xo < ow; ++xo) tmp[(yo + k) * ow + xo] += g[k] * m[yo * ow + xo];
  for (int y = 0; y < H; ++y)
    for (int xo = 0; xo < ow; ++xo)
      for (int k = 0; k < kSsimWindow; ++k) dst[y * W + xo + k] += g[k] * tmp[y * ow + xo];
}

constexpr double kC1 = 0.01 * 0.01, kC2 = 0.03 * 0.03;

struct SsimChannel {
  double value = 0;                          // sum of S over positions
  std::vector<double> ga, gb;                // dS/d(a), dS/d(b) summed over positions (if requested)
};

SsimChannel ssim_channel(const double* a, const double* b, int H, int W, bool grad) {
  const size_t P = static_cast<size_t>(H) * W;
  std::vector<double> aa(P), bb(P), ab(P);
  for (size_t i = 0; i < P; ++i) {
    aa[i] = a[i] * a[i];
    bb[i] = b[i] * b[i];
    ab[i] = a[i] * b[i];
  }
  const auto mu_a = filter_valid(a, H, W), mu_b = filter_valid(b, H, W);
  const auto e_aa = filter_valid(aa.data(), H, W), e_bb = filter_valid(bb.data(), H, W);
  const auto e_ab = filter_valid(ab.data(), H, W);
  const size_t Q = mu_a.size();
  SsimChannel out;
  std::vector<double> Aa, Ab, Ba, Bb, Cc;
  if (grad) {
    Aa.resize(Q);
    Ab.resize(Q);
    Ba.resize(Q);
    Bb.resize(Q);
    Cc.resize(Q);
  }
  for (size_t q = 0; q < Q; ++q) {
    const double ma = mu_a[q], mb = mu_b[q];
    const double va = e_aa[q] - ma * ma, vb = e_bb[q] - mb * mb, cab = e_ab[q] - ma * mb;
    const double a1 = 2 * ma * mb + kC1, a2 = 2 * cab + kC2;
    const double b1 = ma * ma + mb * mb + kC1, b2 = va + vb + kC2;
    const double S = a1 * a2 / (b1 * b2);
    out.value += S;
    if (grad) {
      // Partials with respect to the means, variances and covariance.
      const double dma = 2 * mb * a2 / (b1 * b2) - S * 2 * ma / b1;
      const double dmb = 2 * ma * a2 / (b1 * b2) - S * 2 * mb / b1;
      const double dva = -S / b2, dvb = -S / b2;
      const double dcab = 2 * a1 / (b1 * b2);
      // x_q enters via mu (weight w), E[x^2] (2 x w) and E[xy] (y w); the -mu terms fold into these coefficients.
      Aa[q] = dma - 2 * dva * ma - dcab * mb;
      Ab[q] = dmb - 2 * dvb * mb - dcab * ma;
      Ba[q] = dva;
      Bb[q] = dvb;
      Cc[q] = dcab;
    }
  }
  if (grad) {
    std::vector<double> fA(P, 0), fB(P, 0), gA(P, 0), gB(P, 0), fC(P, 0);
    filter_adjoint(Aa, H, W, fA.data());
    filter_adjoint(Ba, H, W, fB.data());
    filter_adjoint(Ab, H, W, gA.data());
    filter_adjoint(Bb, H, W, gB.data());
    filter_adjoint(Cc, H, W, fC.data());
    out.ga.resize(P);
    out.gb.resize(P);
    for (size_t i = 0; i < P; ++i) {
      out.ga[i] = fA[i] + 2 * a[i] * fB[i] + b[i] * fC[i];
      out.gb[i] = gA[i] + 2 * b[i] * gB[i] + a[i] * fC[i];
    }
  }
  return out;
}

void check_ssim_size(int H, int W) {
  if (H < kSsimWindow || W < kSsimWindow)
    throw DimensionError("ssim: image " + std::to_string(H) + "x" + std::to_string(W) +
                         " is smaller than the 11x11 window");
}

}  // namespace

double ssim(const Image& a, const Image& b) {
  require_same_shape(a, b, "ssim");
  check_ssim_size(a.height, a.width);
  double s = 0;
  for (int c = 0; c < a.channels; ++c)
    s += ssim_channel(a.channel(c).data(), b.channel(c).data(), a.height, a.width, false).value;
  const double count = static_cast<double>(a.channels) * (a.height - kSsimWindow + 1) * (a.width - kSsimWindow + 1);
  return s / count;
}

Var ssim(Tape& t, Var a, Var b, int H, int W) {
  const MatX& A = t.value(a);
  const MatX& B = t.value(b);
  if (A.rows() != B.rows() || A.cols() != B.cols()) throw DimensionError("ssim: image shape mismatch");
  require(A.rows() == static_cast<Eigen::Index>(H) * W, "ssim: pixel count mismatch");
  check_ssim_size(H, W);
  const bool grad = t.requires_grad(a) || t.requires_grad(b);
  const double count = static_cast<double>(A.cols()) * (H - kSsimWindow + 1) * (W - kSsimWindow + 1);
  double s = 0;
  auto ga = std::make_shared<MatX>(grad ? MatX::Zero(A.rows(), A.cols()) : MatX());
  auto gb = std::make_shared<MatX>(grad ? MatX::Zero(A.rows(), A.cols()) : MatX());
  for (Eigen::Index c = 0; c < A.cols(); ++c) {
    const SsimChannel r = ssim_channel(A.col(c).data(), B.col(c).data(), H, W, grad);
    s += r.value;
    if (grad) {
      std::copy(r.ga.begin(), r.ga.end(), ga->col(c).data());
      std::copy(r.gb.begin(), r.gb.end(), gb->col(c).data());
    }
  }
  Var in[] = {a, b};
  return t.record1(in, MatX::Constant(1, 1, s / count), [ga, gb, count](auto og, auto ig) {
    const double k = (*og[0])(0, 0) / count;
    if (ig[0]) *ig[0] += k * *ga;
    if (ig[1]) *ig[1] += k * *gb;
  });
}

RandomPyramid::RandomPyramid(std::uint64_t seed, int scales, int filters) : scales_(scales) {
  require(scales >= 1 && filters >= 1, "RandomPyramid: need at least one scale and one filter");
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> nd(0.0, 1.0);
  for (int s = 0; s < scales; ++s) {
    MatX w(27, filters);
    for (Eigen::Index j = 0; j < w.cols(); ++j) {
      for (Eigen::Index i = 0; i < w.rows(); ++i) w(i, j) = nd(rng);
      w.col(j) /= w.col(j).norm();
    }
    weights_.push_back(std::move(w));
  }
}

Var RandomPyramid::distance(Tape& t, Var a, Var b, int H, int W) const {
  require(t.value(a).cols() == 3 && t.value(b).cols() == 3, "perceptual: expects RGB inputs");
  std::vector<Var> terms;
  std::vector<double> weights;
  Var x = a, y = b;
  int h = H, w = W;
  for (int s = 0; s < scales_; ++s) {
    if (s > 0) {
      if (h < 2 || w < 2) break;
      x = avg_pool2(t, x, h, w);
      y = avg_pool2(t, y, h, w);
      h /= 2;
      w /= 2;
    }
    terms.push_back(square_mean(t, sub(t, x, y)));
    weights.push_back(1.0);
    Var wk = t.constant(weights_[s]);
    Var bk = t.constant(MatX::Zero(1, weights_[s].cols()));
    Var fx = relu(t, conv3x3(t, x, wk, bk, h, w));
    Var fy = relu(t, conv3x3(t, y, wk, bk, h, w));
    terms.push_back(square_mean(t, sub(t, fx, fy)));
    weights.push_back(1.0);
  }
  return weighted_sum(t, terms, weights);
}

const PerceptualBackend& default_perceptual() {
  static const RandomPyramid backend;
  return backend;
}

double perceptual(const Image& a, const Image& b, const PerceptualBackend& backend) {
  require_same_shape(a, b, "perceptual");
  Tape t(false);
  return t.value(backend.distance(t, t.constant(image_to_mat(a)), t.constant(image_to_mat(b)), a.height, a.width))(0, 0);
}

double l1(const Image& a, const Image& b) {
  require_same_shape(a, b, "l1");
  return (a.vec() - b.vec()).cwiseAbs().mean();
}

Var reconstruction(Tape& t, Var image, Var target, int H, int W, const LossWeights& w,
                   const PerceptualBackend& backend) {
  const MatX& a = t.value(image);
  const MatX& b = t.value(target);
  if (a.rows() != b.rows() || a.cols() != b.cols()) throw DimensionError("reconstruction: image shape mismatch");
  std::vector<Var> terms = {abs_mean(t, sub(t, image, target))};
  std::vector<double> weights = {w.l1};
  if (w.ssim != 0) {
    terms.push_back(add_scalar(t, scale(t, ssim(t, image, target, H, W), -1.0), 1.0));
    weights.push_back(w.ssim);
  }
  if (w.lpips != 0) {
    terms.push_back(backend.distance(t, image, target, H, W));
    weights.push_back(w.lpips);
  }
  return weighted_sum(t, terms, weights);
}

double reconstruction(const Image& image, const Image& target, const LossWeights& w,
                      const PerceptualBackend& backend) {
  require_same_shape(image, target, "reconstruction");
  Tape t(false);
  return t.value(reconstruction(t, t.constant(image_to_mat(image)), t.constant(image_to_mat(target)), image.height,
                                image.width, w, backend))(0, 0);
}

Terms regularization(Tape& t, Var alpha, const Image& mask, Var scale_local, Var mu_local, Var rest_shape,
                     const headmodel::Vertices& reference, const MatX3i& faces, const LossWeights& w) {
  const MatX m = image_to_mat(mask);
  if (t.value(alpha).rows() != m.rows() || t.value(alpha).cols() != m.cols())
    throw DimensionError("regularization: alpha and mask shapes differ");
  Terms r;
  Var la = abs_mean(t, sub(t, alpha, t.constant(m)));
  Var ls = frobenius(t, max_floor(t, scale_local, w.eps_scale));
  Var lm = frobenius(t, max_floor(t, mu_local, w.eps_position));
  std::vector<Var> terms = {la, ls, lm};
  std::vector<double> weights = {w.alpha, w.scale, w.position};
  r.parts["reg_alpha"] = t.value(la)(0, 0);
  r.parts["reg_scale"] = t.value(ls)(0, 0);
  r.parts["reg_position"] = t.value(lm)(0, 0);
  if (rest_shape.valid()) {
    Var lr = graph::arap(t, rest_shape, reference, faces);
    terms.push_back(lr);
    weights.push_back(w.arap);
    r.parts["reg_arap"] = t.value(lr)(0, 0);
  }
  r.total = weighted_sum(t, terms, weights);
  return r;
}

double regularization(const Image& alpha, const Image& mask, const MatX3& scale_local, const MatX3& mu_local,
                      const LossWeights& w) {
  require_same_shape(alpha, mask, "regularization");
  return w.alpha * l1(alpha, mask) + w.scale * scale_local.cwiseMax(w.eps_scale).norm() +
         w.position * mu_local.cwiseMax(w.eps_position).norm();
}

Terms prior_loss(Tape& t, const gapnet::AvatarVars& out, const SupervisionBundle& b, const Image& mouth,
                 Var rest_shape, const headmodel::Vertices& reference, const MatX3i& faces, const LossWeights& w,
                 const PerceptualBackend& backend) {
  b.validate();
  const int H = b.image.height, W = b.image.width;
  require(mouth.channels == 1 && mouth.height == H && mouth.width == W, "prior_loss: mouth mask shape");
  Var gt = t.constant(image_to_mat(b.image));
  Terms r;
  Var rec = reconstruction(t, out.image, gt, H, W, w, backend);
  Var rec_rgb = reconstruction(t, out.rgb, gt, H, W, w, backend);
  MatX m3(static_cast<Eigen::Index>(H) * W, 3);
  for (int c = 0; c < 3; ++c) m3.col(c) = image_to_mat(mouth).col(0);
  Var rec_m = reconstruction(t, mul_mask(t, out.image, m3), t.constant(image_to_mat(b.image).cwiseProduct(m3)), H, W,
                             w, backend);
  Terms reg = regularization(t, out.alpha, b.mask, out.scale_local, out.mu_local, rest_shape, reference, faces, w);
  Var terms[] = {rec, rec_rgb, rec_m, reg.total};
  const double weights[] = {1.0, 1.0, w.mouth, 1.0};
  r.total = weighted_sum(t, terms, weights);
  r.parts = reg.parts;
  r.parts["rec"] = t.value(rec)(0, 0);
  r.parts["rec_rgb"] = t.value(rec_rgb)(0, 0);
  r.parts["rec_mouth"] = t.value(rec_m)(0, 0);
  r.parts["reg"] = t.value(reg.total)(0, 0);
  r.parts["total"] = t.value(r.total)(0, 0);
  return r;
}

Terms finetune_loss(Tape& t, const Terms& data, std::span<const Var> renders, std::span<const Image> cache,
                    double cache_scale, const LossWeights& w, const PerceptualBackend& backend) {
  if (cache.empty()) throw PhaseError("finetune_loss: reference render cache is missing");
  require(renders.size() == cache.size(), "finetune_loss: one cached reference per render");
  std::vector<Var> terms = {data.total};
  std::vector<double> weights = {1.0};
  double ref = 0;
  for (size_t i = 0; i < renders.size(); ++i) {
    Var r = reconstruction(t, renders[i], t.constant(image_to_mat(cache[i])), cache[i].height, cache[i].width, w,
                           backend);
    ref += t.value(r)(0, 0);
    terms.push_back(r);
    weights.push_back(w.ref * cache_scale);
  }
  Terms out;
  out.total = weighted_sum(t, terms, weights);
  out.parts = data.parts;
  out.parts["ref"] = ref * cache_scale;
  out.parts["total"] = t.value(out.total)(0, 0);
  return out;
}

Image mouth_mask(const splat::GlobalGaussians& g, const std::vector<int>& mouth_points, const raster::Camera& cam,
                 const Image& given, const raster::RasterSettings& settings) {
  splat::GlobalGaussians sub = splat::GlobalGaussians::zeros(static_cast<int>(mouth_points.size()), 3);
  for (size_t k = 0; k < mouth_points.size(); ++k) {
    const int i = mouth_points[k];
    const auto kk = static_cast<Eigen::Index>(k);
    sub.mu.row(kk) = g.mu.row(i);
    sub.rot.row(kk) = g.rot.row(i);
    sub.scale.row(kk) = g.scale.row(i);
    sub.opacity[kk] = g.opacity[i];
  }
  const raster::RenderOutput r = raster::rasterize(sub, cam, nullptr, settings);
  Image m(1, cam.height, cam.width);
  const bool merge = given.size() == m.size();
  for (size_t i = 0; i < m.size(); ++i) {
    const bool on = r.alpha.data[i] >= 0.5 || (merge && given.data[i] >= 0.5);
    m.data[i] = on ? 1.0 : 0.0;
  }
  return m;
}

}  // namespace gavatar::losses
