#pragma once

// Prior learning over several identities, few-shot personalization (inversion
// then fine-tuning), reenactment, identity editing and image metrics.

#include "gavatar/checkpoint.hpp"
#include "gavatar/losses.hpp"
#include "gavatar/synthdata.hpp"

#include <filesystem>
#include <functional>
#include <memory>
#include <ostream>

namespace gavatar::pipeline {

using headmodel::HeadParams;
using losses::SupervisionBundle;

enum class Phase { Prior, Inverted, Finetuned };
std::string_view phase_name(Phase p);
Phase phase_from_name(std::string_view s);

struct PriorConfig {
  int steps = 20000;  // 100K at full scale
  int batch = 4;      // 32 at full scale
  double lr0 = 1e-3;
  double lr_min = 0.0;
  bool optimize_tracking = true;  // per-identity beta/delta and per-frame theta/phi
  double tracking_lr_mult = 0.1;
  int log_every = 50;
  std::uint64_t seed = 0;
  gapnet::NetConfig net;
  losses::LossWeights weights;
  raster::RasterSettings raster;

  void validate() const;
};

struct PersonalizationConfig {
  int inversion_steps = 500;
  double inversion_lr = 0.02;
  int finetune_steps = 500;
  double lr_f = 1e-3;     // point encodings
  double lr_other = 1e-5;  // every other trainable group
  std::vector<headmodel::Part> frozen_parts = {headmodel::Part::Lip, headmodel::Part::Teeth};
  int reference_views = 16;
  int reference_batch = 16;  // cached views evaluated per fine-tune step
  bool view_regularization = true;
  std::uint64_t seed = 0;
  losses::LossWeights weights;  // weights.ref is the reference-view weight
  raster::RasterSettings raster;

  void validate() const;
};

/// Model plus everything needed to render and resume it.
struct Avatar {
  Phase phase = Phase::Prior;
  std::unique_ptr<gapnet::Model> model;
  headmodel::TemplateOptions tmpl;
  std::uint64_t model_seed = 0;
  nlohmann::json config = nlohmann::json::object();  // echo of the producing run
  nlohmann::json info = nlohmann::json::object();    // training summary
  std::string prior_id;       // fingerprint of the prior this avatar descends from
  HeadParams subject;         // personalized avatars: the subject's tracked neutral parameters

  Avatar() = default;
  Avatar(Avatar&&) = default;
  Avatar& operator=(Avatar&&) = default;
  Avatar clone() const;

  gapnet::CodeSource codes(int identity = -1) const;
};

checkpoint::Container to_container(const Avatar& a);
Avatar from_container(const checkpoint::Container& c);
void save(const Avatar& a, const std::filesystem::path& path);
Avatar load(const std::filesystem::path& path);

/// Hex digest of every parameter blob of a container.
std::string fingerprint(const checkpoint::Container& c);

/// Names of the tracking parameter groups.
std::string track_name(int identity, const std::string& field);
std::string track_name(int identity, int expression, const std::string& field);
/// Tracked parameters of a training identity/expression as currently stored in the avatar.
HeadParams tracked_params(const Avatar& a, int identity, int expression);

struct LogRow {
  long step = 0;
  double lr = 0;
  std::map<std::string, double> parts;
};
using LogSink = std::function<void(const LogRow&)>;

/// Writes the header on the first row, then one comma-separated line per row.
LogSink csv_log(std::ostream& out);

/// Trains the prior on frames of the given dataset identities (all when empty) and views (all when empty).
Avatar train_prior(const synthdata::Dataset& data, const PriorConfig& cfg, const std::vector<int>& identities = {},
                   const std::vector<int>& views = {}, const LogSink& log = {});

struct InversionResult {
  Avatar avatar;
  MatX w;  // k x p logits
  std::vector<Image> renders;  // one per input shot
  double initial_loss = 0;
  double final_loss = 0;
};

/// Optimizes only the mixture logits; every network parameter stays bit-identical.
InversionResult invert(const Avatar& prior, std::span<const SupervisionBundle> shots,
                       const PersonalizationConfig& cfg, const LogSink& log = {});

/// Reference cameras: the first `reference_views` of the 4 x 4 reference grid, evenly subsampled.
std::vector<raster::Camera> reference_cameras(int resolution, const PersonalizationConfig& cfg);
/// Reference renders of an avatar (subject neutral, mixture codes) on the reference cameras.
std::vector<Image> reference_cache(const Avatar& a, int resolution, const PersonalizationConfig& cfg);

/// Fine-tunes an inverted avatar; `cache` holds its renders on the reference rig (required when
/// view regularization is on).
Avatar finetune(const Avatar& inverted, std::span<const SupervisionBundle> shots, std::span<const Image> cache,
                const PersonalizationConfig& cfg, const LogSink& log = {});

/// The same architecture trained from scratch on the shots alone (k = 1, no prior); each step uses
/// min(batch, shots) of them.
Avatar train_base(const headmodel::TemplateOptions& tmpl, std::span<const SupervisionBundle> shots,
                  const PriorConfig& cfg, const LogSink& log = {});

/// Renders every (params, camera) pair. Prior avatars need an identity selection.
std::vector<Image> reenact(const Avatar& a, std::span<const HeadParams> driving, std::span<const raster::Camera> cams,
                           int identity = -1, const raster::RasterSettings& settings = {});

enum class EditMode { Interpolate, SwapTexture, SwapGeometry };
/// Interpolate: codes (1-t) z_a + t z_b on `mesh`. SwapTexture: a's appearance codes with b's geometry
/// codes and b's mesh. SwapGeometry: a's codes on b's mesh. Rendered with a's network.
Image edit_identity(const Avatar& a, const Avatar& b, EditMode mode, double t, const HeadParams& mesh,
                    const raster::Camera& cam, const raster::RasterSettings& settings = {});

/// Per-part effective codes (p x c2) of an avatar.
MatX effective_codes(const Avatar& a, int identity = -1);

struct Metrics {
  double psnr = 0;  // +inf for identical images
  double ssim = 0;
  double l1 = 0;
};
Metrics metrics(const Image& pred, const Image& gt);
Metrics mean_metrics(std::span<const Metrics> m);

/// Mean metrics of the avatar rendered with each bundle's parameters and camera.
Metrics evaluate(const Avatar& a, std::span<const SupervisionBundle* const> frames, int identity = -1,
                 const raster::RasterSettings& settings = {});

}  // namespace gavatar::pipeline
