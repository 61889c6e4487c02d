#pragma once

// Prior network: per-part identity codebook, per-part geometry and appearance
// MLPs, identity mixing for inversion, and the screen-space refinement CNN.
// All learnable tensors live in Model::params under these names:
//   encoding                      n x c1 point features
//   codebook.<part>               k x c2 codes
//   geo.<part>.*, app.<part>.*    MLP weights
//   cnn.<layer>.W / .b            refinement weights
//   mix.w                         k x p inversion logits (only after add_mixture)

#include "gavatar/diff.hpp"
#include "gavatar/graph.hpp"

#include <optional>

namespace gavatar::gapnet {

using diff::Tape;
using diff::Var;
using headmodel::Part;

struct NetConfig {
  int encoding_dim = 48;
  int code_dim = 128;
  int channels = 34;  // 3 RGB + latent
  int hidden = 128;
  int mlp_layers = 4;
  int cnn_layers = 6;
  int cnn_width = 32;
  int uv_resolution = 64;
  double encoding_sigma = 0.01;
  double code_sigma = 0.1;
  double pos_range = 2.0;        // mu' = pos_range * tanh(.)
  double dynamic_scale = 100.0;  // e is multiplied by this before entering the appearance MLP
  double init_scale = 0.45;      // S' at initialization
  double init_opacity = 0.7;
  double log_scale_min = -8.0;
  double log_scale_max = 1.5;
  double cnn_slope = 0.2;
};

class Model {
 public:
  Model(headmodel::HeadTemplate tmpl, const NetConfig& cfg, int identities, std::uint64_t seed);

  const headmodel::HeadTemplate& head() const { return tmpl_; }
  const NetConfig& config() const { return cfg_; }
  const splat::FeaturePointCloud& points() const { return points_; }
  const std::array<std::vector<int>, headmodel::kNumParts>& members() const { return members_; }
  int identities() const { return k_; }
  int num_points() const { return points_.size(); }

  diff::ParamStore& params() { return params_; }
  const diff::ParamStore& params() const { return params_; }

  /// Adds the k x p inversion logits (zeros) if absent.
  diff::ParamGroup& add_mixture();
  bool has_mixture() const { return params_.contains("mix.w"); }

  /// Reset the trainable state to a fresh draw from `seed` (codebook, encodings, MLP and CNN).
  void reinitialize(std::uint64_t seed);

  /// Names of groups owned by mouth parts (lip, teeth): their MLPs and codebook slices.
  std::vector<std::string> mouth_groups() const;
  std::vector<int> mouth_points() const;

 private:
  headmodel::HeadTemplate tmpl_;
  NetConfig cfg_;
  int k_;
  splat::FeaturePointCloud points_;
  std::array<std::vector<int>, headmodel::kNumParts> members_;
  diff::ParamStore params_;
};

std::string group_prefix(const char* net, Part p);

/// Where part codes come from.
struct CodeSource {
  enum class Kind { Row, Mixture, Explicit } kind = Kind::Row;
  int row = 0;
  MatX codes;       // p x c2 for Explicit
  MatX appearance;  // optional p x c2 override fed to the appearance MLPs only

  static CodeSource identity(int j) { return {Kind::Row, j, {}, {}}; }
  static CodeSource mixture() { return {Kind::Mixture, 0, {}, {}}; }
  static CodeSource explicit_codes(MatX c) { return {Kind::Explicit, 0, std::move(c), {}}; }
};

/// Per-part code variables (1 x c2 each).
std::array<Var, headmodel::kNumParts> part_codes(Tape& t, Model& m, const CodeSource& src);

/// Softmax over identities per part, then the convex combination of codes. w: k x p, z[l]: k x c2.
MatX combine_identity(const MatX& w, const std::array<MatX, headmodel::kNumParts>& codebook);
Var combine_identity(Tape& t, Var w, Var codebook_part, int part);

struct GeometryVars {
  Var mu, rot, scale, opacity;  // mu' (n x 3), unit quaternion (n x 4), S' (n x 3), alpha (n x 1)
};

GeometryVars predict_geometry(Tape& t, Model& m, Part part, Var f, Var z);
/// h (n x channels): sigmoid RGB followed by unbounded latent channels.
Var predict_appearance(Tape& t, Model& m, Part part, Var f, Var z, Var e, const GeometryVars& geo);
/// Refined RGB ((H*W) x 3); rgb and feat are (H*W) x 3 and (H*W) x (channels-3).
Var refine(Tape& t, Model& m, Var rgb, Var feat, int height, int width);

struct AvatarVars {
  Var image, rgb, feat, alpha;
  Var mu_local, scale_local, opacity;  // all points, n x 3 / n x 3 / n x 1
  Var vertices;                        // posed mesh
  graph::BoundVars global;
  Var h;
};

struct RenderOptions {
  raster::RasterSettings raster;
  bool refine = true;
};

/// Full mapping from mesh parameters, camera and identity codes to images.
AvatarVars forward_avatar(Tape& t, Model& m, const graph::HeadVars& head, const raster::Camera& cam,
                          const CodeSource& codes, const RenderOptions& opts = {});

/// Non-differentiable convenience: rendered images for the given parameters.
struct Rendered {
  Image image, rgb, feat, alpha;
};
Rendered render(Model& m, const headmodel::HeadParams& p, const raster::Camera& cam, const CodeSource& codes,
                const RenderOptions& opts = {});

/// Local attributes of every point for the given codes (no rendering).
struct LocalAttributes {
  MatX3 mu, scale;
  MatX4 rot;
  VecX opacity;
};
LocalAttributes local_attributes(Model& m, const CodeSource& codes);

}  // namespace gavatar::gapnet
