// Command-line front end: one subcommand per pipeline stage.

#include "gavatar/config.hpp"
#include "gavatar/io.hpp"

#include <CLI11.hpp>

#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>

using namespace gavatar;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Common {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::vector<std::string> overrides;
};

struct Summary {
  std::vector<std::pair<std::string, std::string>> items;
  void add(const std::string& k, const std::string& v) { items.emplace_back(k, v); }
  void add(const std::string& k, double v) {
    char buf[64];
    if (std::isinf(v))
      std::snprintf(buf, sizeof buf, "%s", v > 0 ? "inf" : "-inf");
    else
      std::snprintf(buf, sizeof buf, "%.9g", v);
    items.emplace_back(k, buf);
  }
  void add(const std::string& k, long v) { items.emplace_back(k, std::to_string(v)); }
  void add_metrics(const std::string& prefix, const pipeline::Metrics& m) {
    add(prefix + "psnr", m.psnr);
    add(prefix + "ssim", m.ssim);
    add(prefix + "l1", m.l1);
  }
  void print() const {
    for (size_t i = 0; i < items.size(); ++i) std::cout << (i ? " " : "") << items[i].first << '=' << items[i].second;
    std::cout << std::endl;
  }
};

config::RunConfig load_config(const Common& c, json& echo) {
  json doc = c.config_path.empty() ? json::object() : io::read_json(c.config_path);
  for (const auto& o : c.overrides) config::apply_override(doc, o);
  if (c.seed) doc["seed"] = *c.seed;
  config::RunConfig cfg = config::from_json(doc);
  echo = config::to_json(cfg);
  return cfg;
}

fs::path prepare_out(const Common& c, const std::string& fallback, const json& echo) {
  const fs::path out = c.out.empty() ? fs::path("runs") / fallback : fs::path(c.out);
  std::error_code ec;
  fs::create_directories(out, ec);
  if (ec) throw Error("cannot create run directory " + out.string() + ": " + ec.message());
  io::write_json(out / "config.json", echo);
  return out;
}

fs::path require_path(const std::string& p, const char* key, const char* cmd, bool phase) {
  if (p.empty() || !fs::exists(p)) {
    const std::string msg = std::string(cmd) + ": " + key + " " + (p.empty() ? "is not set" : "'" + p + "' does not exist");
    if (phase) throw PhaseError(msg);
    throw ConfigError(msg);
  }
  return p;
}

synthdata::Dataset dataset(const config::RunConfig& cfg, const char* cmd) {
  return synthdata::load_dataset(require_path(cfg.paths.dataset, "paths.dataset", cmd, false));
}

std::vector<const losses::SupervisionBundle*> bundles(const synthdata::Dataset& d, int identity,
                                                      const std::vector<int>& expressions,
                                                      const std::vector<int>& views) {
  std::vector<const losses::SupervisionBundle*> out;
  for (const auto* f : d.select(identity, expressions, views)) out.push_back(&f->bundle);
  return out;
}

std::vector<losses::SupervisionBundle> subject_shots(const synthdata::Dataset& d, const config::RunConfig& cfg) {
  if (cfg.subject.identity < 0 || cfg.subject.identity >= d.options.identities)
    throw ConfigError("subject.identity is not in the dataset");
  for (int v : cfg.subject.shots)
    if (v < 0 || v >= d.options.views) throw ConfigError("subject.shots lists a view not in the dataset");
  std::vector<losses::SupervisionBundle> out;
  for (const auto* b : bundles(d, cfg.subject.identity, {cfg.subject.expression}, cfg.subject.shots)) out.push_back(*b);
  return out;
}

std::vector<int> novel_views(const synthdata::Dataset& d, const config::RunConfig& cfg) {
  if (!cfg.eval.views.empty()) return cfg.eval.views;
  std::vector<int> v;
  for (int i = 0; i < d.options.views; ++i)
    if (std::find(cfg.subject.shots.begin(), cfg.subject.shots.end(), i) == cfg.subject.shots.end()) v.push_back(i);
  return v;
}

std::vector<int> prior_identities(const synthdata::Dataset& d, const config::RunConfig& cfg) {
  if (!cfg.prior_identities.empty()) return cfg.prior_identities;
  std::vector<int> ids;
  for (int i = 0; i < d.options.identities; ++i)
    if (i != cfg.subject.identity) ids.push_back(i);
  return ids;
}

pipeline::LogSink file_log(std::ofstream& f, const fs::path& path) {
  f.open(path);
  if (!f) throw Error("cannot open " + path.string());
  return pipeline::csv_log(f);
}

void write_grid(const fs::path& path, const std::vector<Image>& images, int cols) {
  io::write_png(path, io::tile_images(images, cols));
}

// ---------------------------------------------------------------------------------------------

int cmd_gen_data(const Common& c) {
  json echo;
  const config::RunConfig cfg = load_config(c, echo);
  const fs::path out = prepare_out(c, "data", echo);
  const synthdata::Dataset d = synthdata::generate_dataset(cfg.data);
  synthdata::write_dataset(d, out);
  Summary s;
  s.add("command", "gen-data");
  s.add("identities", static_cast<long>(d.options.identities));
  s.add("views", static_cast<long>(d.options.views));
  s.add("expressions", static_cast<long>(d.options.expressions));
  s.add("bundles", static_cast<long>(d.frames.size()));
  s.add("dataset", out.string());
  s.print();
  return 0;
}

int cmd_train_prior(const Common& c) {
  json echo;
  const config::RunConfig cfg = load_config(c, echo);
  const synthdata::Dataset d = dataset(cfg, "train-prior");
  const fs::path out = prepare_out(c, "prior", echo);
  const std::vector<int> ids = prior_identities(d, cfg);
  std::ofstream logf;
  pipeline::Avatar a = pipeline::train_prior(d, cfg.prior, ids, cfg.prior_views, file_log(logf, out / "prior_log.csv"));
  a.config = echo;
  pipeline::save(a, out / "prior.ckpt");
  std::vector<pipeline::Metrics> train, held;
  std::vector<Image> grid;
  std::vector<int> held_views;
  if (!cfg.prior_views.empty())
    for (int v = 0; v < d.options.views; ++v)
      if (std::find(cfg.prior_views.begin(), cfg.prior_views.end(), v) == cfg.prior_views.end()) held_views.push_back(v);
  for (size_t li = 0; li < ids.size(); ++li) {
    const auto fr = bundles(d, ids[li], {}, cfg.prior_views);
    train.push_back(pipeline::evaluate(a, fr, static_cast<int>(li), cfg.prior.raster));
    if (!held_views.empty())
      held.push_back(pipeline::evaluate(a, bundles(d, ids[li], {}, held_views), static_cast<int>(li), cfg.prior.raster));
    const auto* f = fr.front();
    grid.push_back(pipeline::reenact(a, std::span(&f->params, 1), std::span(&f->camera, 1), static_cast<int>(li),
                                     cfg.prior.raster)[0]);
    grid.push_back(f->image);
  }
  write_grid(out / "prior_grid.png", grid, 2);
  Summary s;
  s.add("command", "train-prior");
  s.add("steps", static_cast<long>(cfg.prior.steps));
  s.add("initial_loss", a.info.at("initial_loss").get<double>());
  s.add("final_loss", a.info.at("final_loss").get<double>());
  s.add_metrics("train_", pipeline::mean_metrics(train));
  if (!held.empty()) s.add_metrics("heldout_", pipeline::mean_metrics(held));
  s.add("checkpoint", (out / "prior.ckpt").string());
  s.print();
  return 0;
}

int cmd_invert(const Common& c) {
  json echo;
  const config::RunConfig cfg = load_config(c, echo);
  const fs::path prior_path = require_path(cfg.paths.prior, "paths.prior (prior checkpoint)", "invert", true);
  const pipeline::Avatar prior = pipeline::load(prior_path);
  const synthdata::Dataset d = dataset(cfg, "invert");
  const fs::path out = prepare_out(c, "invert", echo);
  const auto shots = subject_shots(d, cfg);
  std::ofstream logf;
  pipeline::InversionResult r = pipeline::invert(prior, shots, cfg.personalize, file_log(logf, out / "invert_log.csv"));
  r.avatar.config = echo;
  pipeline::save(r.avatar, out / "inverted.ckpt");
  std::vector<pipeline::Metrics> ms;
  std::vector<Image> grid;
  for (size_t i = 0; i < shots.size(); ++i) {
    ms.push_back(pipeline::metrics(r.renders[i], shots[i].image));
    grid.push_back(r.renders[i]);
    grid.push_back(shots[i].image);
  }
  write_grid(out / "invert_grid.png", grid, 2);
  const auto novel = bundles(d, cfg.subject.identity, {cfg.subject.expression}, novel_views(d, cfg));
  Summary s;
  s.add("command", "invert");
  s.add("initial_loss", r.initial_loss);
  s.add("final_loss", r.final_loss);
  s.add_metrics("train_", pipeline::mean_metrics(ms));
  if (!novel.empty()) s.add_metrics("novel_", pipeline::evaluate(r.avatar, novel, -1, cfg.personalize.raster));
  s.add("checkpoint", (out / "inverted.ckpt").string());
  s.print();
  return 0;
}

int cmd_finetune(const Common& c) {
  json echo;
  const config::RunConfig cfg = load_config(c, echo);
  const fs::path inv_path = require_path(cfg.paths.inverted, "paths.inverted (inverted checkpoint)", "finetune", true);
  const pipeline::Avatar inv = pipeline::load(inv_path);
  if (inv.phase != pipeline::Phase::Inverted)
    throw PhaseError("finetune: requires an inverted avatar (got phase '" + std::string(pipeline::phase_name(inv.phase)) +
                     "')");
  const synthdata::Dataset d = dataset(cfg, "finetune");
  const fs::path out = prepare_out(c, "finetune", echo);
  const auto shots = subject_shots(d, cfg);
  std::vector<Image> cache;
  if (cfg.personalize.view_regularization) cache = pipeline::reference_cache(inv, d.options.resolution, cfg.personalize);
  std::ofstream logf;
  pipeline::Avatar a =
      pipeline::finetune(inv, shots, cache, cfg.personalize, file_log(logf, out / "finetune_log.csv"));
  a.config = echo;
  pipeline::save(a, out / "finetuned.ckpt");
  std::vector<const losses::SupervisionBundle*> train;
  for (const auto& b : shots) train.push_back(&b);
  const auto novel = bundles(d, cfg.subject.identity, {cfg.subject.expression}, novel_views(d, cfg));
  Summary s;
  s.add("command", "finetune");
  s.add("initial_loss", a.info.at("initial_loss").get<double>());
  s.add("final_loss", a.info.at("final_loss").get<double>());
  s.add_metrics("train_", pipeline::evaluate(a, train, -1, cfg.personalize.raster));
  if (!novel.empty()) s.add_metrics("novel_", pipeline::evaluate(a, novel, -1, cfg.personalize.raster));
  if (!cache.empty()) {
    const auto after = pipeline::reference_cache(a, d.options.resolution, cfg.personalize);
    double drift = 0;
    for (size_t i = 0; i < cache.size(); ++i) drift += losses::l1(after[i], cache[i]) / cache.size();
    s.add("reference_drift_l1", drift);
  }
  s.add("checkpoint", (out / "finetuned.ckpt").string());
  s.print();
  return 0;
}

pipeline::Avatar load_avatar(const config::RunConfig& cfg, const char* cmd) {
  return pipeline::load(require_path(cfg.paths.avatar, "paths.avatar (avatar checkpoint)", cmd, true));
}

int cmd_reenact(const Common& c) {
  json echo;
  const config::RunConfig cfg = load_config(c, echo);
  const pipeline::Avatar a = load_avatar(cfg, "reenact");
  if (a.phase == pipeline::Phase::Prior)
    throw PhaseError("reenact: requires a personalized avatar (got phase 'prior')");
  const synthdata::Dataset d = dataset(cfg, "reenact");
  const fs::path out = prepare_out(c, "reenact", echo);
  std::vector<int> exprs = cfg.eval.expressions;
  if (exprs.empty())
    for (int e = 0; e < d.options.expressions; ++e)
      if (e != cfg.subject.expression) exprs.push_back(e);
  if (exprs.empty()) exprs.push_back(cfg.subject.expression);
  const auto frames = bundles(d, cfg.subject.identity, exprs, {cfg.subject.shots.front()});
  std::vector<headmodel::HeadParams> driving;
  std::vector<raster::Camera> cams;
  for (const auto* f : frames) {
    driving.push_back(f->params);
    cams.push_back(f->camera);
  }
  const auto renders = pipeline::reenact(a, driving, cams, -1, cfg.personalize.raster);
  std::vector<pipeline::Metrics> ms;
  std::vector<Image> grid;
  for (size_t i = 0; i < renders.size(); ++i) {
    char name[32];
    std::snprintf(name, sizeof name, "frame_%03zu.png", i);
    io::write_png(out / name, renders[i]);
    ms.push_back(pipeline::metrics(renders[i], frames[i]->image));
    grid.push_back(renders[i]);
    grid.push_back(frames[i]->image);
  }
  write_grid(out / "reenact_grid.png", grid, 2);
  Summary s;
  s.add("command", "reenact");
  s.add("frames", static_cast<long>(renders.size()));
  s.add_metrics("", pipeline::mean_metrics(ms));
  s.print();
  return 0;
}

int cmd_metrics(const Common& c, const std::string& pred, const std::string& gt) {
  json echo;
  load_config(c, echo);
  const pipeline::Metrics m = pipeline::metrics(io::read_png(pred), io::read_png(gt));
  Summary s;
  s.add("command", "metrics");
  s.add_metrics("", m);
  s.print();
  return 0;
}

int cmd_render_grid(const Common& c) {
  json echo;
  const config::RunConfig cfg = load_config(c, echo);
  const pipeline::Avatar a = load_avatar(cfg, "render-grid");
  const synthdata::Dataset d = dataset(cfg, "render-grid");
  const fs::path out = prepare_out(c, "grid", echo);
  std::vector<int> exprs = cfg.eval.expressions;
  if (exprs.empty())
    for (int e = 0; e < d.options.expressions; ++e) exprs.push_back(e);
  std::vector<int> views = cfg.eval.views;
  if (views.empty())
    for (int v = 0; v < d.options.views; ++v) views.push_back(v);
  const int identity = a.phase == pipeline::Phase::Prior ? 0 : -1;
  const int data_identity = a.phase == pipeline::Phase::Prior
                                ? a.info.at("identities").at(0).get<int>()
                                : cfg.subject.identity;
  const auto frames = bundles(d, data_identity, exprs, views);
  std::vector<headmodel::HeadParams> driving;
  std::vector<raster::Camera> cams;
  for (const auto* f : frames) {
    driving.push_back(f->params);
    cams.push_back(f->camera);
  }
  const auto renders = pipeline::reenact(a, driving, cams, identity, cfg.personalize.raster);
  std::vector<pipeline::Metrics> ms;
  for (size_t i = 0; i < renders.size(); ++i) ms.push_back(pipeline::metrics(renders[i], frames[i]->image));
  write_grid(out / "render_grid.png", renders, static_cast<int>(views.size()));
  Summary s;
  s.add("command", "render-grid");
  s.add("images", static_cast<long>(renders.size()));
  s.add_metrics("", pipeline::mean_metrics(ms));
  s.add("grid", (out / "render_grid.png").string());
  s.print();
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Gaussian head avatars: synthetic data, prior learning and few-shot personalization"};
  app.require_subcommand(1);
  Common common;
  std::string pred, gt;
  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", common.config_path, "JSON run configuration");
    sub->add_option("--seed", common.seed, "Seed for every random draw");
    sub->add_option("--out", common.out, "Run directory");
    sub->add_option("--override", common.overrides, "Set a config value, key=value with dotted keys (repeatable)");
  };
  CLI::App* gen = app.add_subcommand("gen-data", "Generate a synthetic dataset");
  CLI::App* prior = app.add_subcommand("train-prior", "Learn the prior over dataset identities");
  CLI::App* inv = app.add_subcommand("invert", "Fit mixture weights to the subject's shots");
  CLI::App* ft = app.add_subcommand("finetune", "Fine-tune an inverted avatar");
  CLI::App* re = app.add_subcommand("reenact", "Drive a personalized avatar with the subject's expressions");
  CLI::App* met = app.add_subcommand("metrics", "PSNR, SSIM and L1 between two PNG images");
  CLI::App* grid = app.add_subcommand("render-grid", "Render an avatar over views x expressions");
  for (CLI::App* sub : {gen, prior, inv, ft, re, met, grid}) add_common(sub);
  met->add_option("--pred", pred, "Predicted image")->required();
  met->add_option("--gt", gt, "Reference image")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }
  try {
    if (gen->parsed()) return cmd_gen_data(common);
    if (prior->parsed()) return cmd_train_prior(common);
    if (inv->parsed()) return cmd_invert(common);
    if (ft->parsed()) return cmd_finetune(common);
    if (re->parsed()) return cmd_reenact(common);
    if (met->parsed()) return cmd_metrics(common, pred, gt);
    if (grid->parsed()) return cmd_render_grid(common);
  } catch (const PhaseError& e) {
    std::cerr << "gavatar: phase error: " << e.what() << std::endl;
    return 3;
  } catch (const ConfigError& e) {
    std::cerr << "gavatar: config error: " << e.what() << std::endl;
    return 2;
  } catch (const std::exception& e) {
    std::string msg = e.what();
    std::replace(msg.begin(), msg.end(), '\n', ' ');
    std::cerr << "gavatar: error: " << msg << std::endl;
    return 1;
  }
  return 1;
}
