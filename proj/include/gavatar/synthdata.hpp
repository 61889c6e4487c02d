#pragma once

// Procedural multi-identity, multi-view, multi-expression datasets rendered
// from the textured template mesh under uniform lighting.

#include "gavatar/losses.hpp"

#include <filesystem>

namespace gavatar::synthdata {

using headmodel::HeadParams;
using headmodel::HeadTemplate;
using headmodel::Part;

/// Per-identity surface color as a function of template UV and part label.
struct Albedo {
  struct Wave {
    int fu = 1;  // integer so the texture is continuous across the UV seam
    int fv = 1;
    double phase = 0;
    Vec3 amplitude = Vec3::Zero();
  };
  Vec3 skin = Vec3(0.8, 0.6, 0.5);
  Vec3 hair = Vec3(0.2, 0.12, 0.08);
  Vec3 brow = Vec3(0.15, 0.1, 0.07);
  Vec3 lip = Vec3(0.7, 0.3, 0.3);
  Vec3 iris = Vec3(0.25, 0.35, 0.5);
  Vec3 teeth = Vec3(0.92, 0.9, 0.84);
  std::vector<Wave> waves;

  Vec3 at(const Vec2& uv, Part part) const;
};

struct SyntheticIdentity {
  std::uint64_t seed = 0;
  HeadParams base;  // beta and delta; theta = phi = 0
  Albedo albedo;
  std::vector<HeadParams> expressions;  // [0] is the exact neutral
};

/// Identity draw; `expressions` counts the neutral.
SyntheticIdentity make_identity(const HeadTemplate& t, std::uint64_t seed, int expressions);

/// Camera at azimuth/elevation (degrees) on a sphere around the head, looking at it.
raster::Camera orbit_camera(double azimuth_deg, double elevation_deg, int resolution);
/// Capture rig on a frontal arc: azimuth spread over [-60, 60], elevation alternating +12 / -8.
std::vector<raster::Camera> make_rig(int views, int resolution);
/// 4 x 4 grid over azimuth [-60, 60] and elevation [-20, 20].
std::vector<raster::Camera> reference_rig(int resolution);

struct MeshImages {
  Image rgb;    // 3 x H x W on a black background
  Image mask;   // 1 x H x W binary head mask
  Image mouth;  // 1 x H x W binary lip/teeth mask
};

/// Z-buffered triangle rasterization with `supersample`^2 samples per pixel,
/// perspective-correct UV and unlit albedo.
MeshImages render_mesh(const HeadTemplate& t, const headmodel::Vertices& posed, const Albedo& albedo,
                       const raster::Camera& cam, int supersample = 3);

struct GenerateOptions {
  int identities = 2;
  int views = 16;
  int expressions = 3;  // including neutral
  int resolution = 64;
  std::uint64_t seed = 0;
  headmodel::TemplateOptions tmpl;
};

struct Frame {
  int identity = 0;
  int expression = 0;
  int view = 0;
  losses::SupervisionBundle bundle;
};

struct Dataset {
  GenerateOptions options;
  HeadTemplate tmpl;
  std::vector<raster::Camera> cameras;
  std::vector<SyntheticIdentity> identities;
  std::vector<Frame> frames;  // identity-major, then expression, then view

  const Frame& frame(int identity, int expression, int view) const;
  /// Frames of one identity restricted to the given expressions and views (all when empty).
  std::vector<const Frame*> select(int identity, const std::vector<int>& expressions = {},
                                   const std::vector<int>& views = {}) const;
};

/// Images are quantized to 8 bits so that an in-memory dataset equals its reloaded copy.
Dataset generate_dataset(const GenerateOptions& opts);

/// Layout: manifest.json, template.obj/.json, id_XXX/identity.json, id_XXX/eYY.json (params) and
/// id_XXX/eYY_vZZ_{rgb,mask,mouth}.png.
void write_dataset(const Dataset& d, const std::filesystem::path& dir);
Dataset load_dataset(const std::filesystem::path& dir);

}  // namespace gavatar::synthdata
