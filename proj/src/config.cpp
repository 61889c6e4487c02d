#include "gavatar/config.hpp"

#include <set>

namespace gavatar::config {

using nlohmann::json;

namespace {

class Fields {
 public:
  Fields(const json& j, std::string where) : j_(j), where_(std::move(where)) {
    if (!j_.is_object()) throw ConfigError(label() + ": expected an object");
  }
  template <class T>
  void get(const char* key, T& out) {
    if (!j_.contains(key)) return;
    used_.insert(key);
    try {
      out = j_.at(key).get<T>();
    } catch (const json::exception&) {
      throw ConfigError("config key '" + join(key) + "' has the wrong type");
    }
  }
  const json* sub(const char* key) {
    if (!j_.contains(key)) return nullptr;
    used_.insert(key);
    return &j_.at(key);
  }
  std::string join(const std::string& key) const { return where_.empty() ? key : where_ + "." + key; }
  void finish() const {
    for (const auto& item : j_.items())
      if (!used_.count(item.key())) throw ConfigError("unknown config key '" + join(item.key()) + "'");
  }

 private:
  std::string label() const { return where_.empty() ? "config" : "config key '" + where_ + "'"; }
  const json& j_;
  std::string where_;
  std::set<std::string> used_;
};

void read(const json& j, const std::string& where, gapnet::NetConfig& c) {
  Fields f(j, where);
  f.get("encoding_dim", c.encoding_dim);
  f.get("code_dim", c.code_dim);
  f.get("channels", c.channels);
  f.get("hidden", c.hidden);
  f.get("mlp_layers", c.mlp_layers);
  f.get("cnn_layers", c.cnn_layers);
  f.get("cnn_width", c.cnn_width);
  f.get("uv_resolution", c.uv_resolution);
  f.get("encoding_sigma", c.encoding_sigma);
  f.get("code_sigma", c.code_sigma);
  f.get("pos_range", c.pos_range);
  f.get("dynamic_scale", c.dynamic_scale);
  f.get("init_scale", c.init_scale);
  f.get("init_opacity", c.init_opacity);
  f.get("log_scale_min", c.log_scale_min);
  f.get("log_scale_max", c.log_scale_max);
  f.get("cnn_slope", c.cnn_slope);
  f.finish();
}

void read(const json& j, const std::string& where, losses::LossWeights& w) {
  Fields f(j, where);
  f.get("mouth", w.mouth);
  f.get("l1", w.l1);
  f.get("ssim", w.ssim);
  f.get("lpips", w.lpips);
  f.get("alpha", w.alpha);
  f.get("scale", w.scale);
  f.get("position", w.position);
  f.get("arap", w.arap);
  f.get("ref", w.ref);
  f.get("eps_scale", w.eps_scale);
  f.get("eps_position", w.eps_position);
  f.finish();
}

void read(const json& j, const std::string& where, raster::RasterSettings& s) {
  Fields f(j, where);
  f.get("tile_size", s.tile_size);
  f.get("blur", s.blur);
  f.get("cutoff_sigma", s.cutoff_sigma);
  f.get("near_plane", s.near_plane);
  f.get("min_transmittance", s.min_transmittance);
  f.finish();
}

void read(const json& j, const std::string& where, headmodel::TemplateOptions& t) {
  Fields f(j, where);
  f.get("rings", t.rings);
  f.get("segments", t.segments);
  f.get("shape_dim", t.shape_dim);
  f.get("expr_dim", t.expr_dim);
  f.finish();
}

}  // namespace

json to_json(const gapnet::NetConfig& c) {
  return {{"encoding_dim", c.encoding_dim},   {"code_dim", c.code_dim},
          {"channels", c.channels},           {"hidden", c.hidden},
          {"mlp_layers", c.mlp_layers},       {"cnn_layers", c.cnn_layers},
          {"cnn_width", c.cnn_width},         {"uv_resolution", c.uv_resolution},
          {"encoding_sigma", c.encoding_sigma}, {"code_sigma", c.code_sigma},
          {"pos_range", c.pos_range},         {"dynamic_scale", c.dynamic_scale},
          {"init_scale", c.init_scale},       {"init_opacity", c.init_opacity},
          {"log_scale_min", c.log_scale_min}, {"log_scale_max", c.log_scale_max},
          {"cnn_slope", c.cnn_slope}};
}

json to_json(const losses::LossWeights& w) {
  return {{"mouth", w.mouth}, {"l1", w.l1},       {"ssim", w.ssim},   {"lpips", w.lpips},
          {"alpha", w.alpha}, {"scale", w.scale}, {"position", w.position}, {"arap", w.arap},
          {"ref", w.ref},     {"eps_scale", w.eps_scale}, {"eps_position", w.eps_position}};
}

json to_json(const raster::RasterSettings& s) {
  return {{"tile_size", s.tile_size},
          {"blur", s.blur},
          {"cutoff_sigma", s.cutoff_sigma},
          {"near_plane", s.near_plane},
          {"min_transmittance", s.min_transmittance}};
}

json to_json(const headmodel::TemplateOptions& t) {
  return {{"rings", t.rings}, {"segments", t.segments}, {"shape_dim", t.shape_dim}, {"expr_dim", t.expr_dim}};
}

gapnet::NetConfig net_from_json(const json& j) {
  gapnet::NetConfig c;
  read(j, "net", c);
  return c;
}

headmodel::TemplateOptions template_from_json(const json& j) {
  headmodel::TemplateOptions t;
  read(j, "template", t);
  return t;
}

json to_json(const RunConfig& c) {
  std::vector<std::string> frozen;
  for (auto p : c.personalize.frozen_parts) frozen.emplace_back(headmodel::part_name(p));
  const auto& d = c.data;
  const auto& p = c.prior;
  const auto& q = c.personalize;
  return {
      {"seed", c.seed},
      {"data",
       {{"identities", d.identities},
        {"views", d.views},
        {"expressions", d.expressions},
        {"resolution", d.resolution},
        {"template", to_json(d.tmpl)}}},
      {"prior",
       {{"identities", c.prior_identities},
        {"views", c.prior_views},
        {"steps", p.steps},
        {"batch", p.batch},
        {"lr0", p.lr0},
        {"lr_min", p.lr_min},
        {"optimize_tracking", p.optimize_tracking},
        {"tracking_lr_mult", p.tracking_lr_mult},
        {"log_every", p.log_every},
        {"net", to_json(p.net)},
        {"weights", to_json(p.weights)},
        {"raster", to_json(p.raster)}}},
      {"personalize",
       {{"inversion_steps", q.inversion_steps},
        {"inversion_lr", q.inversion_lr},
        {"finetune_steps", q.finetune_steps},
        {"lr_f", q.lr_f},
        {"lr_other", q.lr_other},
        {"frozen_parts", frozen},
        {"reference_views", q.reference_views},
        {"reference_batch", q.reference_batch},
        {"view_regularization", q.view_regularization},
        {"weights", to_json(q.weights)},
        {"raster", to_json(q.raster)}}},
      {"subject", {{"identity", c.subject.identity}, {"expression", c.subject.expression}, {"shots", c.subject.shots}}},
      {"eval", {{"views", c.eval.views}, {"expressions", c.eval.expressions}}},
      {"paths",
       {{"dataset", c.paths.dataset}, {"prior", c.paths.prior}, {"inverted", c.paths.inverted}, {"avatar", c.paths.avatar}}},
  };
}

RunConfig from_json(const json& j) {
  RunConfig c;
  Fields top(j, "");
  top.get("seed", c.seed);
  if (const json* d = top.sub("data")) {
    Fields f(*d, "data");
    f.get("identities", c.data.identities);
    f.get("views", c.data.views);
    f.get("expressions", c.data.expressions);
    f.get("resolution", c.data.resolution);
    if (const json* t = f.sub("template")) read(*t, "data.template", c.data.tmpl);
    f.finish();
  }
  if (const json* p = top.sub("prior")) {
    Fields f(*p, "prior");
    f.get("identities", c.prior_identities);
    f.get("views", c.prior_views);
    f.get("steps", c.prior.steps);
    f.get("batch", c.prior.batch);
    f.get("lr0", c.prior.lr0);
    f.get("lr_min", c.prior.lr_min);
    f.get("optimize_tracking", c.prior.optimize_tracking);
    f.get("tracking_lr_mult", c.prior.tracking_lr_mult);
    f.get("log_every", c.prior.log_every);
    if (const json* s = f.sub("net")) read(*s, "prior.net", c.prior.net);
    if (const json* s = f.sub("weights")) read(*s, "prior.weights", c.prior.weights);
    if (const json* s = f.sub("raster")) read(*s, "prior.raster", c.prior.raster);
    f.finish();
  }
  if (const json* p = top.sub("personalize")) {
    Fields f(*p, "personalize");
    auto& q = c.personalize;
    f.get("inversion_steps", q.inversion_steps);
    f.get("inversion_lr", q.inversion_lr);
    f.get("finetune_steps", q.finetune_steps);
    f.get("lr_f", q.lr_f);
    f.get("lr_other", q.lr_other);
    std::vector<std::string> frozen;
    bool has_frozen = p->contains("frozen_parts");
    f.get("frozen_parts", frozen);
    if (has_frozen) {
      q.frozen_parts.clear();
      for (const auto& name : frozen) {
        try {
          q.frozen_parts.push_back(headmodel::part_from_name(name));
        } catch (const Error&) {
          throw ConfigError("config key 'personalize.frozen_parts': unknown part '" + name + "'");
        }
      }
    }
    f.get("reference_views", q.reference_views);
    f.get("reference_batch", q.reference_batch);
    f.get("view_regularization", q.view_regularization);
    if (const json* s = f.sub("weights")) read(*s, "personalize.weights", q.weights);
    if (const json* s = f.sub("raster")) read(*s, "personalize.raster", q.raster);
    f.finish();
  }
  if (const json* s = top.sub("subject")) {
    Fields f(*s, "subject");
    f.get("identity", c.subject.identity);
    f.get("expression", c.subject.expression);
    f.get("shots", c.subject.shots);
    f.finish();
  }
  if (const json* s = top.sub("eval")) {
    Fields f(*s, "eval");
    f.get("views", c.eval.views);
    f.get("expressions", c.eval.expressions);
    f.finish();
  }
  if (const json* s = top.sub("paths")) {
    Fields f(*s, "paths");
    f.get("dataset", c.paths.dataset);
    f.get("prior", c.paths.prior);
    f.get("inverted", c.paths.inverted);
    f.get("avatar", c.paths.avatar);
    f.finish();
  }
  top.finish();
  c.propagate_seed();
  c.validate();
  return c;
}

void RunConfig::propagate_seed() {
  data.seed = seed;
  prior.seed = seed;
  personalize.seed = seed;
}

void RunConfig::validate() const {
  try {
    if (data.identities < 1 || data.views < 1 || data.expressions < 1 || data.resolution < 8)
      throw ConfigError("config: data needs identities, views, expressions >= 1 and resolution >= 8");
    prior.validate();
    personalize.validate();
    if (subject.shots.empty() || subject.shots.size() > 3)
      throw ConfigError("config: subject.shots must list 1 to 3 views");
  } catch (const ConfigError&) {
    throw;
  } catch (const Error& e) {
    throw ConfigError(e.what());
  }
}

void apply_override(json& doc, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + assignment + "' is not key=value");
  const std::string key = assignment.substr(0, eq), text = assignment.substr(eq + 1);
  const json defaults = to_json(RunConfig{});
  json* node = &doc;
  const json* ref = &defaults;
  size_t start = 0;
  while (true) {
    const size_t dot = key.find('.', start);
    const std::string part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (!ref->is_object() || !ref->contains(part)) throw ConfigError("unknown config key '" + key + "'");
    ref = &ref->at(part);
    if (!node->is_object()) *node = json::object();
    node = &(*node)[part];
    if (dot == std::string::npos) break;
    start = dot + 1;
  }
  json value;
  try {
    value = json::parse(text);
  } catch (const json::exception&) {
    value = text;
  }
  *node = value;
}

}  // namespace gavatar::config
