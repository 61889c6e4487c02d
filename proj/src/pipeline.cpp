#include "gavatar/pipeline.hpp"

#include "gavatar/config.hpp"
#include "gavatar/io.hpp"

#include <cmath>
#include <cstdio>
#include <limits>
#include <numeric>
#include <random>

namespace gavatar::pipeline {

using diff::ParamGroup;
using diff::ParamStore;
using diff::Tape;
using diff::Var;
using gapnet::CodeSource;
using nlohmann::json;

std::string_view phase_name(Phase p) {
  switch (p) {
    case Phase::Prior: return "prior";
    case Phase::Inverted: return "inverted";
    case Phase::Finetuned: return "finetuned";
  }
  return "?";
}

Phase phase_from_name(std::string_view s) {
  if (s == "prior") return Phase::Prior;
  if (s == "inverted") return Phase::Inverted;
  if (s == "finetuned") return Phase::Finetuned;
  throw FormatError("unknown phase tag '" + std::string(s) + "'");
}

void PriorConfig::validate() const {
  if (steps <= 0) throw ConfigError("prior: steps must be positive");
  if (batch < 1) throw ConfigError("prior: batch must be >= 1");
  if (!(lr0 > 0) || !(lr_min >= 0) || lr_min > lr0) throw ConfigError("prior: need 0 <= lr_min <= lr0, lr0 > 0");
  if (!(tracking_lr_mult > 0)) throw ConfigError("prior: tracking_lr_mult must be positive");
  if (log_every < 1) throw ConfigError("prior: log_every must be >= 1");
  weights.validate();
}

void PersonalizationConfig::validate() const {
  if (inversion_steps < 0 || finetune_steps < 0) throw ConfigError("personalize: step counts must be >= 0");
  if (!(inversion_lr > 0) || !(lr_f > 0) || !(lr_other > 0)) throw ConfigError("personalize: learning rates must be positive");
  if (reference_views < 1 || reference_views > 16) throw ConfigError("personalize: reference_views must be in [1, 16]");
  if (reference_batch < 1 || reference_batch > reference_views)
    throw ConfigError("personalize: reference_batch must be in [1, reference_views]");
  weights.validate();
}

// ---------------------------------------------------------------------------------------------
// Avatar persistence

namespace {

constexpr const char* kParam = "param/";
constexpr const char* kAdamM = "adam.m/";
constexpr const char* kAdamV = "adam.v/";

bool has_subject(const HeadParams& p) { return p.beta.size() > 0; }

}  // namespace

checkpoint::Container to_container(const Avatar& a) {
  if (!a.model) throw Error("avatar has no model");
  const gapnet::Model& m = *a.model;
  checkpoint::Container c;
  json groups = json::array();
  for (const ParamGroup* g : m.params().groups()) {
    std::vector<int> rows;
    for (size_t r = 0; r < g->row_frozen.size(); ++r)
      if (g->row_frozen[r]) rows.push_back(static_cast<int>(r));
    groups.push_back({{"name", g->name}, {"lr_mult", g->lr_mult}, {"frozen", g->frozen}, {"frozen_rows", rows}});
  }
  c.meta = {{"kind", "avatar"},
            {"phase", phase_name(a.phase)},
            {"template", config::to_json(a.tmpl)},
            {"net", config::to_json(m.config())},
            {"identities", m.identities()},
            {"model_seed", a.model_seed},
            {"adam_step", m.params().step()},
            {"groups", groups},
            {"prior_id", a.prior_id},
            {"config", a.config},
            {"info", a.info}};
  if (has_subject(a.subject)) c.meta["subject"] = io::params_to_json(a.subject);
  c.put("template/vertices", MatX(m.head().vertices));
  for (const ParamGroup* g : m.params().groups()) {
    c.put(kParam + g->name, g->value);
    c.put(kAdamM + g->name, g->m);
    c.put(kAdamV + g->name, g->v);
  }
  return c;
}

Avatar from_container(const checkpoint::Container& c) {
  Avatar a;
  try {
    if (c.meta.at("kind").get<std::string>() != "avatar") throw FormatError("checkpoint: not an avatar");
    a.phase = phase_from_name(c.meta.at("phase").get<std::string>());
    a.tmpl = config::template_from_json(c.meta.at("template"));
    const gapnet::NetConfig net = config::net_from_json(c.meta.at("net"));
    a.model_seed = c.meta.at("model_seed").get<std::uint64_t>();
    a.prior_id = c.meta.at("prior_id").get<std::string>();
    a.config = c.meta.at("config");
    a.info = c.meta.at("info");
    if (c.meta.contains("subject")) a.subject = io::params_from_json(c.meta.at("subject"));
    headmodel::HeadTemplate tmpl = headmodel::make_synthetic_template(a.tmpl);
    const MatX& verts = c.get("template/vertices");
    if (verts.rows() != tmpl.num_vertices() || verts.cols() != 3 || verts != MatX(tmpl.vertices))
      throw FormatError("checkpoint: template does not match its options");
    a.model = std::make_unique<gapnet::Model>(std::move(tmpl), net, c.meta.at("identities").get<int>(), a.model_seed);
    ParamStore& ps = a.model->params();
    std::vector<std::string> names;
    for (const auto& gj : c.meta.at("groups")) {
      const std::string name = gj.at("name").get<std::string>();
      names.push_back(name);
      const MatX& value = c.get(kParam + name);
      ParamGroup* g = nullptr;
      if (ps.contains(name)) {
        g = &ps.at(name);
        if (g->value.rows() != value.rows() || g->value.cols() != value.cols())
          throw FormatError("checkpoint: shape mismatch for '" + name + "'");
        g->value = value;
      } else {
        g = &ps.add(name, value, gj.at("lr_mult").get<double>());
      }
      g->lr_mult = gj.at("lr_mult").get<double>();
      g->frozen = gj.at("frozen").get<bool>();
      g->row_frozen.clear();
      const auto rows = gj.at("frozen_rows").get<std::vector<int>>();
      if (!rows.empty()) g->freeze_rows(rows);
      g->m = c.get(kAdamM + name);
      g->v = c.get(kAdamV + name);
      g->grad = MatX::Zero(value.rows(), value.cols());
    }
    for (ParamGroup* g : ps.groups())
      if (std::find(names.begin(), names.end(), g->name) == names.end()) ps.remove(g->name);
    ps.set_step(c.meta.at("adam_step").get<long>());
  } catch (const json::exception& e) {
    throw FormatError(std::string("checkpoint: bad metadata: ") + e.what());
  }
  return a;
}

void save(const Avatar& a, const std::filesystem::path& path) { checkpoint::write(path, to_container(a)); }
Avatar load(const std::filesystem::path& path) { return from_container(checkpoint::read(path)); }

Avatar Avatar::clone() const { return from_container(to_container(*this)); }

CodeSource Avatar::codes(int identity) const {
  if (phase == Phase::Prior) {
    if (identity < 0) throw PhaseError("prior avatar needs an identity selection");
    return CodeSource::identity(identity);
  }
  return CodeSource::mixture();
}

std::string fingerprint(const checkpoint::Container& c) {
  std::uint64_t h = 1469598103934665603ULL;
  auto mix = [&h](const void* p, size_t n) {
    const auto* b = static_cast<const unsigned char*>(p);
    for (size_t i = 0; i < n; ++i) h = (h ^ b[i]) * 1099511628211ULL;
  };
  for (const auto& [name, m] : c.blobs) {
    if (name.rfind(kParam, 0) != 0) continue;
    mix(name.data(), name.size());
    mix(m.data(), sizeof(double) * static_cast<size_t>(m.size()));
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

std::string track_name(int identity, const std::string& field) {
  return "track." + std::to_string(identity) + "." + field;
}
std::string track_name(int identity, int expression, const std::string& field) {
  return "track." + std::to_string(identity) + ".e" + std::to_string(expression) + "." + field;
}

HeadParams tracked_params(const Avatar& a, int identity, int expression) {
  const ParamStore& ps = a.model->params();
  if (!ps.contains(track_name(identity, "beta")) || !ps.contains(track_name(identity, expression, "theta")))
    throw Error("no tracked parameters for identity " + std::to_string(identity) + " expression " +
                std::to_string(expression));
  HeadParams p;
  p.beta = ps.at(track_name(identity, "beta")).value.transpose();
  p.delta = ps.at(track_name(identity, "delta")).value;
  p.theta = ps.at(track_name(identity, expression, "theta")).value.transpose();
  p.phi = ps.at(track_name(identity, expression, "phi")).value.transpose();
  return p;
}

LogSink csv_log(std::ostream& out) {
  auto keys = std::make_shared<std::vector<std::string>>();
  return [&out, keys](const LogRow& r) {
    if (keys->empty()) {
      out << "step,lr";
      for (const auto& [k, v] : r.parts) {
        keys->push_back(k);
        out << ',' << k;
      }
      out << '\n';
    }
    char buf[64];
    out << r.step;
    std::snprintf(buf, sizeof buf, ",%.9g", r.lr);
    out << buf;
    for (const auto& k : *keys) {
      auto it = r.parts.find(k);
      out << ',';
      if (it != r.parts.end()) {
        std::snprintf(buf, sizeof buf, "%.9g", it->second);
        out << buf;
      }
    }
    out << '\n';
    out.flush();
  };
}

// ---------------------------------------------------------------------------------------------
// Training helpers

namespace {

splat::GlobalGaussians global_values(const Tape& t, const gapnet::AvatarVars& out) {
  const MatX& mu = t.value(out.global.mu);
  const MatX& R = t.value(out.global.rotmat);
  const int n = static_cast<int>(mu.rows());
  splat::GlobalGaussians g = splat::GlobalGaussians::zeros(n, 3);
  g.mu = mu;
  g.scale = t.value(out.global.scale);
  g.opacity = t.value(out.opacity).col(0);
  for (int i = 0; i < n; ++i) {
    Mat3 r;
    for (int k = 0; k < 9; ++k) r(k / 3, k % 3) = R(i, k);
    g.rot.row(i) = matrix_to_quat(r).transpose();
  }
  return g;
}

/// Reconstruction plus regularization loss of one frame; `head` may mix parameters and constants.
losses::Terms frame_loss(Tape& t, gapnet::Model& m, const graph::HeadVars& head, const SupervisionBundle& b,
                         const CodeSource& codes, const losses::LossWeights& w, const raster::RasterSettings& rs) {
  gapnet::RenderOptions ro;
  ro.raster = rs;
  const gapnet::AvatarVars out = gapnet::forward_avatar(t, m, head, b.camera, codes, ro);
  graph::HeadVars rest = head;
  rest.theta = t.constant(MatX::Zero(1, t.value(head.theta).cols()));
  rest.phi = t.constant(MatX::Zero(1, t.value(head.phi).cols()));
  const Var rest_shape = graph::pose(t, m.head(), rest);
  HeadParams ref = graph::head_values(t, head);
  ref.theta.setZero();
  ref.phi.setZero();
  ref.delta.setZero();
  const headmodel::Vertices reference = headmodel::rest_vertices(m.head(), ref);
  const Image mouth = losses::mouth_mask(global_values(t, out), m.mouth_points(), b.camera, b.mouth, rs);
  return losses::prior_loss(t, out, b, mouth, rest_shape, reference, m.head().faces, w);
}

void accumulate(std::map<std::string, double>& acc, const std::map<std::string, double>& parts, double scale) {
  for (const auto& [k, v] : parts) acc[k] += v * scale;
}

void check_finite(const std::map<std::string, double>& parts, long step) {
  auto it = parts.find("total");
  if (it != parts.end() && !std::isfinite(it->second))
    throw NumericError("non-finite loss at step " + std::to_string(step));
}

/// One optimizer step over a set of frames, each contributing loss / count.
struct FrameJob {
  const SupervisionBundle* bundle;
  CodeSource codes;
  int track_identity = -1;  // >= 0: mesh parameters come from tracking groups
  int track_expression = -1;
};

std::map<std::string, double> accumulate_frames(gapnet::Model& m, std::span<const FrameJob> jobs,
                                                const losses::LossWeights& w, const raster::RasterSettings& rs) {
  std::map<std::string, double> parts;
  const double scale = 1.0 / static_cast<double>(jobs.size());
  for (const FrameJob& job : jobs) {
    Tape t;
    graph::HeadVars hv;
    if (job.track_identity >= 0) {
      ParamStore& ps = m.params();
      hv.beta = t.param(ps.at(track_name(job.track_identity, "beta")));
      hv.delta = t.param(ps.at(track_name(job.track_identity, "delta")));
      hv.theta = t.param(ps.at(track_name(job.track_identity, job.track_expression, "theta")));
      hv.phi = t.param(ps.at(track_name(job.track_identity, job.track_expression, "phi")));
    } else {
      hv = graph::head_constants(t, job.bundle->params);
    }
    const losses::Terms terms = frame_loss(t, m, hv, *job.bundle, job.codes, w, rs);
    accumulate(parts, terms.parts, scale);
    t.backward(diff::scale(t, terms.total, scale));
  }
  return parts;
}

double evaluate_frames(gapnet::Model& m, std::span<const FrameJob> jobs, const losses::LossWeights& w,
                       const raster::RasterSettings& rs) {
  double total = 0;
  for (const FrameJob& job : jobs) {
    Tape t(false);
    const graph::HeadVars hv = graph::head_constants(t, job.bundle->params);
    total += frame_loss(t, m, hv, *job.bundle, job.codes, w, rs).parts.at("total");
  }
  return total / static_cast<double>(jobs.size());
}

void check_shots(std::span<const SupervisionBundle> shots, const gapnet::Model& m, const char* who) {
  if (shots.empty()) throw Error(std::string(who) + ": need at least one input image");
  for (const auto& b : shots) {
    b.validate();
    headmodel::check_params(m.head(), b.params);
  }
}

Image render_image(gapnet::Model& m, const HeadParams& p, const raster::Camera& cam, const CodeSource& codes,
                   const raster::RasterSettings& rs) {
  gapnet::RenderOptions ro;
  ro.raster = rs;
  return gapnet::render(m, p, cam, codes, ro).image;
}

}  // namespace

// ---------------------------------------------------------------------------------------------
// Prior learning

Avatar train_prior(const synthdata::Dataset& data, const PriorConfig& cfg, const std::vector<int>& identities,
                   const std::vector<int>& views, const LogSink& log) {
  cfg.validate();
  std::vector<int> ids = identities;
  if (ids.empty()) {
    ids.resize(data.options.identities);
    std::iota(ids.begin(), ids.end(), 0);
  }
  if (ids.size() < 2) throw ConfigError("train_prior: prior learning needs at least 2 identities");
  for (int id : ids)
    if (id < 0 || id >= data.options.identities)
      throw ConfigError("train_prior: identity " + std::to_string(id) + " not in dataset");
  for (int v : views)
    if (v < 0 || v >= data.options.views) throw ConfigError("train_prior: view " + std::to_string(v) + " not in dataset");

  Avatar a;
  a.phase = Phase::Prior;
  a.tmpl = data.options.tmpl;
  a.model_seed = cfg.seed;
  a.model = std::make_unique<gapnet::Model>(data.tmpl, cfg.net, static_cast<int>(ids.size()), cfg.seed);
  gapnet::Model& m = *a.model;
  ParamStore& ps = m.params();

  const int E = data.options.expressions;
  for (size_t li = 0; li < ids.size(); ++li) {
    const auto& id = data.identities[ids[li]];
    const int i = static_cast<int>(li);
    ps.add(track_name(i, "beta"), MatX(id.base.beta.transpose()), cfg.tracking_lr_mult);
    ps.add(track_name(i, "delta"), MatX(id.base.delta), cfg.tracking_lr_mult);
    for (int e = 0; e < E; ++e) {
      ps.add(track_name(i, e, "theta"), MatX(id.expressions[e].theta.transpose()), cfg.tracking_lr_mult);
      ps.add(track_name(i, e, "phi"), MatX(id.expressions[e].phi.transpose()), cfg.tracking_lr_mult);
    }
  }
  ps.set_frozen("track.", !cfg.optimize_tracking);

  std::vector<FrameJob> pool;
  for (size_t li = 0; li < ids.size(); ++li)
    for (const synthdata::Frame* f : data.select(ids[li], {}, views))
      pool.push_back({&f->bundle, CodeSource::identity(static_cast<int>(li)), static_cast<int>(li), f->expression});

  std::mt19937_64 rng(cfg.seed ^ 0x7072696f72ULL);
  std::uniform_int_distribution<size_t> pick(0, pool.size() - 1);
  double first = 0, last = 0;
  std::map<std::string, double> window;
  int window_n = 0;
  for (long step = 0; step < cfg.steps; ++step) {
    std::vector<FrameJob> batch;
    for (int b = 0; b < cfg.batch; ++b) batch.push_back(pool[pick(rng)]);
    const double lr = diff::cosine_lr(step, cfg.steps, cfg.lr0, cfg.lr_min);
    ps.zero_grad();
    const auto parts = accumulate_frames(m, batch, cfg.weights, cfg.raster);
    check_finite(parts, step);
    diff::adam_step(ps, lr);
    if (step == 0) first = parts.at("total");
    last = parts.at("total");
    accumulate(window, parts, 1.0);
    ++window_n;
    if (log && ((step + 1) % cfg.log_every == 0 || step + 1 == cfg.steps)) {
      LogRow row{step + 1, lr, {}};
      for (const auto& [k, v] : window) row.parts[k] = v / window_n;
      log(row);
      window.clear();
      window_n = 0;
    }
  }
  a.info = {{"steps", cfg.steps}, {"initial_loss", first}, {"final_loss", last}, {"identities", ids},
            {"expressions", E}, {"views", views}};
  return a;
}

// ---------------------------------------------------------------------------------------------
// Personalization

InversionResult invert(const Avatar& prior, std::span<const SupervisionBundle> shots, const PersonalizationConfig& cfg,
                       const LogSink& log) {
  cfg.validate();
  if (!prior.model) throw Error("invert: avatar has no model");
  if (prior.phase != Phase::Prior)
    throw PhaseError("invert: requires a prior checkpoint (got phase '" + std::string(phase_name(prior.phase)) + "')");
  check_shots(shots, *prior.model, "invert");

  InversionResult res;
  res.avatar = prior.clone();
  Avatar& a = res.avatar;
  a.phase = Phase::Inverted;
  a.prior_id = fingerprint(to_container(prior));
  a.subject = shots[0].params.neutral();
  gapnet::Model& m = *a.model;
  ParamStore& ps = m.params();
  for (ParamGroup* g : ps.groups()) g->frozen = true;
  ParamGroup& w = m.add_mixture();
  w.value.setZero();
  w.frozen = false;
  w.lr_mult = 1.0;
  ps.reset_optimizer();
  ps.set_step(0);

  std::vector<FrameJob> jobs;
  for (const auto& b : shots) jobs.push_back({&b, CodeSource::mixture()});
  res.initial_loss = evaluate_frames(m, jobs, cfg.weights, cfg.raster);
  for (long step = 0; step < cfg.inversion_steps; ++step) {
    const double lr = diff::cosine_lr(step, cfg.inversion_steps, cfg.inversion_lr);
    ps.zero_grad();
    const auto parts = accumulate_frames(m, jobs, cfg.weights, cfg.raster);
    check_finite(parts, step);
    diff::adam_step(ps, lr);
    if (log) log({step + 1, lr, parts});
  }
  res.final_loss = evaluate_frames(m, jobs, cfg.weights, cfg.raster);
  res.w = w.value;
  for (const auto& b : shots) res.renders.push_back(render_image(m, b.params, b.camera, CodeSource::mixture(), cfg.raster));
  a.info = {{"inversion_steps", cfg.inversion_steps},
            {"initial_loss", res.initial_loss},
            {"final_loss", res.final_loss},
            {"shots", shots.size()}};
  return res;
}

std::vector<raster::Camera> reference_cameras(int resolution, const PersonalizationConfig& cfg) {
  const auto all = synthdata::reference_rig(resolution);
  std::vector<raster::Camera> out;
  const int m = cfg.reference_views;
  for (int i = 0; i < m; ++i) out.push_back(all[static_cast<size_t>(i) * all.size() / m]);
  return out;
}

std::vector<Image> reference_cache(const Avatar& a, int resolution, const PersonalizationConfig& cfg) {
  if (a.phase == Phase::Prior) throw PhaseError("reference_cache: avatar has not been inverted");
  std::vector<Image> cache;
  for (const auto& cam : reference_cameras(resolution, cfg))
    cache.push_back(render_image(*a.model, a.subject, cam, CodeSource::mixture(), cfg.raster));
  return cache;
}

Avatar finetune(const Avatar& inverted, std::span<const SupervisionBundle> shots, std::span<const Image> cache,
                const PersonalizationConfig& cfg, const LogSink& log) {
  cfg.validate();
  if (!inverted.model) throw Error("finetune: avatar has no model");
  if (inverted.phase != Phase::Inverted)
    throw PhaseError("finetune: requires an inverted avatar (got phase '" + std::string(phase_name(inverted.phase)) +
                     "')");
  check_shots(shots, *inverted.model, "finetune");
  const bool view_reg = cfg.view_regularization && cfg.weights.ref > 0;
  if (view_reg && cache.empty()) throw PhaseError("finetune: reference render cache is missing");
  if (view_reg && static_cast<int>(cache.size()) != cfg.reference_views)
    throw DimensionError("finetune: cache holds " + std::to_string(cache.size()) + " renders, expected " +
                         std::to_string(cfg.reference_views));

  Avatar a = inverted.clone();
  a.phase = Phase::Finetuned;
  gapnet::Model& m = *a.model;
  ParamStore& ps = m.params();
  for (ParamGroup* g : ps.groups()) {
    g->frozen = false;
    g->row_frozen.clear();
    g->lr_mult = cfg.lr_other / cfg.lr_f;
  }
  ps.at("encoding").lr_mult = 1.0;
  ps.set_frozen("mix.w", true);
  ps.set_frozen("track.", true);
  std::vector<int> frozen_rows;
  for (headmodel::Part p : cfg.frozen_parts) {
    ps.set_frozen(gapnet::group_prefix("geo", p) + ".", true);
    ps.set_frozen(gapnet::group_prefix("app", p) + ".", true);
    ps.at("codebook." + std::string(headmodel::part_name(p))).frozen = true;
    const auto& mem = m.members()[headmodel::part_index(p)];
    frozen_rows.insert(frozen_rows.end(), mem.begin(), mem.end());
  }
  if (!frozen_rows.empty()) ps.at("encoding").freeze_rows(frozen_rows);
  ps.reset_optimizer();
  ps.set_step(0);

  const int res = shots[0].image.height;
  const auto ref_cams = reference_cameras(res, cfg);
  if (view_reg)
    for (const Image& img : cache)
      require(img.channels == 3 && img.height == ref_cams[0].height && img.width == ref_cams[0].width,
              "finetune: cached render resolution mismatch");

  std::vector<FrameJob> jobs;
  for (const auto& b : shots) jobs.push_back({&b, CodeSource::mixture()});
  std::mt19937_64 rng(cfg.seed ^ 0x66696e65ULL);
  std::vector<int> order(ref_cams.size());
  std::iota(order.begin(), order.end(), 0);
  const double cache_scale = static_cast<double>(cfg.reference_views) / cfg.reference_batch;
  gapnet::RenderOptions ro;
  ro.raster = cfg.raster;
  double first = 0, last = 0;
  for (long step = 0; step < cfg.finetune_steps; ++step) {
    ps.zero_grad();
    auto parts = accumulate_frames(m, jobs, cfg.weights, cfg.raster);
    check_finite(parts, step);
    double ref = 0;
    if (view_reg) {
      std::shuffle(order.begin(), order.end(), rng);
      for (int k = 0; k < cfg.reference_batch; ++k) {
        const int v = order[k];
        Tape t;
        const auto out = gapnet::forward_avatar(t, m, graph::head_constants(t, a.subject), ref_cams[v],
                                                CodeSource::mixture(), ro);
        Var r = losses::reconstruction(t, out.image, t.constant(diff::image_to_mat(cache[v])), res, res, cfg.weights);
        ref += t.value(r)(0, 0);
        t.backward(diff::scale(t, r, cfg.weights.ref * cache_scale));
      }
      parts["ref"] = ref * cache_scale;
      parts["total"] += cfg.weights.ref * ref * cache_scale;
    }
    diff::adam_step(ps, cfg.lr_f);
    if (step == 0) first = parts.at("total");
    last = parts.at("total");
    if (log) log({step + 1, cfg.lr_f, parts});
  }
  a.info = {{"finetune_steps", cfg.finetune_steps},
            {"initial_loss", first},
            {"final_loss", last},
            {"view_regularization", view_reg},
            {"inversion", inverted.info}};
  return a;
}

Avatar train_base(const headmodel::TemplateOptions& tmpl, std::span<const SupervisionBundle> shots,
                  const PriorConfig& cfg, const LogSink& log) {
  cfg.validate();
  Avatar a;
  a.phase = Phase::Finetuned;
  a.tmpl = tmpl;
  a.model_seed = cfg.seed;
  a.prior_id = "base";
  a.model = std::make_unique<gapnet::Model>(headmodel::make_synthetic_template(tmpl), cfg.net, 1, cfg.seed);
  check_shots(shots, *a.model, "train_base");
  a.subject = shots[0].params.neutral();
  gapnet::Model& m = *a.model;
  m.add_mixture().frozen = true;
  ParamStore& ps = m.params();
  std::vector<FrameJob> pool;
  for (const auto& b : shots) pool.push_back({&b, CodeSource::mixture()});
  std::mt19937_64 rng(cfg.seed ^ 0x62617365ULL);
  std::vector<int> order(pool.size());
  std::iota(order.begin(), order.end(), 0);
  const size_t per_step = std::min(pool.size(), static_cast<size_t>(cfg.batch));
  double first = 0, last = 0;
  for (long step = 0; step < cfg.steps; ++step) {
    const double lr = diff::cosine_lr(step, cfg.steps, cfg.lr0, cfg.lr_min);
    std::vector<FrameJob> jobs;
    if (per_step < pool.size()) std::shuffle(order.begin(), order.end(), rng);
    for (size_t k = 0; k < per_step; ++k) jobs.push_back(pool[order[k]]);
    ps.zero_grad();
    const auto parts = accumulate_frames(m, jobs, cfg.weights, cfg.raster);
    check_finite(parts, step);
    diff::adam_step(ps, lr);
    if (step == 0) first = parts.at("total");
    last = parts.at("total");
    if (log && ((step + 1) % cfg.log_every == 0 || step + 1 == cfg.steps)) log({step + 1, lr, parts});
  }
  a.info = {{"steps", cfg.steps}, {"initial_loss", first}, {"final_loss", last}, {"shots", shots.size()}};
  return a;
}

// ---------------------------------------------------------------------------------------------
// Reenactment, editing, metrics

std::vector<Image> reenact(const Avatar& a, std::span<const HeadParams> driving, std::span<const raster::Camera> cams,
                           int identity, const raster::RasterSettings& settings) {
  if (!a.model) throw Error("reenact: avatar has no model");
  const CodeSource codes = a.codes(identity);
  if (cams.empty()) throw DimensionError("reenact: need at least one camera");
  if (cams.size() != 1 && cams.size() != driving.size())
    throw DimensionError("reenact: need one camera or one per driving frame");
  for (const auto& p : driving) headmodel::check_params(a.model->head(), p);
  std::vector<Image> out(driving.size());
  const long n = static_cast<long>(driving.size());
#pragma omp parallel for schedule(dynamic) num_threads(thread_count())
  for (long i = 0; i < n; ++i)
    out[i] = render_image(*a.model, driving[i], cams.size() == 1 ? cams[0] : cams[i], codes, settings);
  return out;
}

MatX effective_codes(const Avatar& a, int identity) {
  const gapnet::Model& m = *a.model;
  std::array<MatX, headmodel::kNumParts> book;
  for (int l = 0; l < headmodel::kNumParts; ++l)
    book[l] = m.params().at("codebook." + std::string(headmodel::part_name(headmodel::part_from_index(l)))).value;
  if (a.phase == Phase::Prior) {
    if (identity < 0 || identity >= m.identities()) throw PhaseError("effective_codes: prior avatar needs an identity");
    MatX z(headmodel::kNumParts, m.config().code_dim);
    for (int l = 0; l < headmodel::kNumParts; ++l) z.row(l) = book[l].row(identity);
    return z;
  }
  return gapnet::combine_identity(m.params().at("mix.w").value, book);
}

Image edit_identity(const Avatar& a, const Avatar& b, EditMode mode, double t, const HeadParams& mesh,
                    const raster::Camera& cam, const raster::RasterSettings& settings) {
  if (!a.model || !b.model) throw Error("edit_identity: avatar has no model");
  if (a.phase == Phase::Prior || b.phase == Phase::Prior) throw PhaseError("edit_identity: avatars must be personalized");
  if (a.prior_id.empty() || a.prior_id != b.prior_id)
    throw PhaseError("edit_identity: avatars descend from different priors");
  const MatX za = effective_codes(a), zb = effective_codes(b);
  switch (mode) {
    case EditMode::Interpolate:
      return render_image(*a.model, mesh, cam, CodeSource::explicit_codes((1 - t) * za + t * zb), settings);
    case EditMode::SwapTexture: {
      CodeSource src = CodeSource::explicit_codes(zb);
      src.appearance = za;
      return render_image(*a.model, b.subject, cam, src, settings);
    }
    case EditMode::SwapGeometry:
      return render_image(*a.model, b.subject, cam, CodeSource::explicit_codes(za), settings);
  }
  throw Error("edit_identity: unknown mode");
}

Metrics metrics(const Image& pred, const Image& gt) {
  require_same_shape(pred, gt, "metrics");
  if (pred.size() == 0) throw DimensionError("metrics: empty images");
  double se = 0;
  for (size_t i = 0; i < pred.size(); ++i) se += (pred.data[i] - gt.data[i]) * (pred.data[i] - gt.data[i]);
  const double mse = se / static_cast<double>(pred.size());
  Metrics r;
  r.psnr = mse == 0 ? std::numeric_limits<double>::infinity() : 10.0 * std::log10(1.0 / mse);
  r.ssim = losses::ssim(pred, gt);
  r.l1 = losses::l1(pred, gt);
  return r;
}

Metrics mean_metrics(std::span<const Metrics> ms) {
  Metrics r;
  if (ms.empty()) return r;
  for (const auto& m : ms) {
    r.psnr += m.psnr;
    r.ssim += m.ssim;
    r.l1 += m.l1;
  }
  const double n = static_cast<double>(ms.size());
  r.psnr /= n;
  r.ssim /= n;
  r.l1 /= n;
  return r;
}

Metrics evaluate(const Avatar& a, std::span<const SupervisionBundle* const> frames, int identity,
                 const raster::RasterSettings& settings) {
  if (frames.empty()) throw Error("evaluate: no frames");
  std::vector<HeadParams> params;
  std::vector<raster::Camera> cams;
  for (const auto* f : frames) {
    params.push_back(f->params);
    cams.push_back(f->camera);
  }
  const auto renders = reenact(a, params, cams, identity, settings);
  std::vector<Metrics> ms;
  for (size_t i = 0; i < frames.size(); ++i) ms.push_back(metrics(renders[i], frames[i]->image));
  return mean_metrics(ms);
}

}  // namespace gavatar::pipeline
