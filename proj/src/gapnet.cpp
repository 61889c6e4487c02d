#include "gavatar/gapnet.hpp"

#include <cmath>
#include <random>

namespace gavatar::gapnet {

using namespace diff;
using headmodel::kNumParts;
using headmodel::part_from_index;

namespace {

constexpr int kGeoOut = 11;  // mu'(3) rot(4) log-scale(3) opacity(1)
constexpr int kFreeAppInputs = 3 + 3 + 4 + 3 + 1;

MatX normal(Eigen::Index r, Eigen::Index c, double sigma, std::mt19937_64& rng) {
  std::normal_distribution<double> d(0.0, sigma);
  MatX m(r, c);
  for (Eigen::Index j = 0; j < c; ++j)
    for (Eigen::Index i = 0; i < r; ++i) m(i, j) = d(rng);
  return m;
}

std::string layer(const std::string& prefix, int i, const char* what) {
  return prefix + ".l" + std::to_string(i) + "." + what;
}

}  // namespace

std::string group_prefix(const char* net, Part p) { return std::string(net) + "." + std::string(headmodel::part_name(p)); }

Model::Model(headmodel::HeadTemplate tmpl, const NetConfig& cfg, int identities, std::uint64_t seed)
    : tmpl_(std::move(tmpl)), cfg_(cfg), k_(identities) {
  if (identities < 1) throw Error("Model: need at least one identity");
  require(cfg.mlp_layers >= 2 && cfg.cnn_layers >= 2, "Model: MLP and CNN need at least two layers");
  require(cfg.channels > 3, "Model: appearance channels must exceed the 3 RGB channels");
  tmpl_.validate();
  splat::PointCloudOptions po;
  po.uv_resolution = cfg.uv_resolution;
  po.encoding_dim = cfg.encoding_dim;
  po.encoding_sigma = cfg.encoding_sigma;
  po.seed = seed;
  points_ = splat::init_uv_pointcloud(tmpl_, po);
  members_ = points_.part_members();
  reinitialize(seed);
}

void Model::reinitialize(std::uint64_t seed) {
  const bool had_mix = has_mixture();
  params_ = ParamStore();
  std::mt19937_64 rng(seed ^ 0x9e3779b97f4a7c15ULL);
  const int H = cfg_.hidden;
  {
    std::mt19937_64 erng(seed);
    std::normal_distribution<double> nd(0.0, cfg_.encoding_sigma);
    MatX enc(num_points(), cfg_.encoding_dim);
    for (Eigen::Index i = 0; i < enc.rows(); ++i)
      for (Eigen::Index c = 0; c < enc.cols(); ++c) enc(i, c) = nd(erng);
    params_.add("encoding", std::move(enc));
  }
  for (int l = 0; l < kNumParts; ++l)
    params_.add("codebook." + std::string(headmodel::part_name(part_from_index(l))),
                normal(k_, cfg_.code_dim, cfg_.code_sigma, rng));

  const double ls = std::log(cfg_.init_scale);
  const double lo = std::log(cfg_.init_opacity / (1 - cfg_.init_opacity));
  for (int l = 0; l < kNumParts; ++l) {
    const Part p = part_from_index(l);
    for (int net = 0; net < 2; ++net) {
      const std::string pre = group_prefix(net == 0 ? "geo" : "app", p);
      const int free_in = cfg_.encoding_dim + (net == 0 ? 0 : kFreeAppInputs);
      const int fan0 = free_in + cfg_.code_dim;
      const int out = net == 0 ? kGeoOut : cfg_.channels;
      params_.add(layer(pre, 0, "Wx"), normal(free_in, H, std::sqrt(2.0 / fan0), rng));
      params_.add(layer(pre, 0, "Wz"), normal(cfg_.code_dim, H, std::sqrt(2.0 / fan0), rng));
      params_.add(layer(pre, 0, "b"), MatX::Zero(1, H));
      for (int i = 1; i + 1 < cfg_.mlp_layers; ++i) {
        params_.add(layer(pre, i, "W"), normal(H, H, std::sqrt(2.0 / H), rng));
        params_.add(layer(pre, i, "b"), MatX::Zero(1, H));
      }
      const int last = cfg_.mlp_layers - 1;
      const double gain = net == 0 ? 0.1 : 1.0;
      params_.add(layer(pre, last, "W"), normal(H, out, gain * std::sqrt(1.0 / H), rng));
      MatX b = MatX::Zero(1, out);
      if (net == 0) {
        b.middleCols(7, 3).setConstant(ls);
        b(0, 10) = lo;
      }
      params_.add(layer(pre, last, "b"), std::move(b));
    }
  }

  // Refiner starts close to passing the RGB channels through.
  const int L = cfg_.cnn_layers;
  int cin = cfg_.channels;
  for (int i = 0; i < L; ++i) {
    const int cout = i + 1 == L ? 3 : cfg_.cnn_width;
    MatX W = normal(9 * cin, cout, 0.1 * std::sqrt(2.0 / (9 * cin)), rng);
    MatX b = MatX::Zero(1, cout);
    for (int c = 0; c < 3; ++c) W(4 * cin + c, c) += i + 1 == L ? 4.0 : 1.0;
    if (i + 1 == L) b.setConstant(-2.0);
    params_.add("cnn.l" + std::to_string(i) + ".W", std::move(W));
    params_.add("cnn.l" + std::to_string(i) + ".b", std::move(b));
    cin = cout;
  }
  if (had_mix) add_mixture();
}

ParamGroup& Model::add_mixture() {
  if (!has_mixture()) params_.add("mix.w", MatX::Zero(k_, kNumParts));
  return params_.at("mix.w");
}

std::vector<std::string> Model::mouth_groups() const {
  std::vector<std::string> out;
  for (const ParamGroup* g : params_.groups()) {
    for (Part p : {Part::Lip, Part::Teeth}) {
      const std::string pn(headmodel::part_name(p));
      if (g->name == "codebook." + pn || g->name.rfind("geo." + pn + ".", 0) == 0 ||
          g->name.rfind("app." + pn + ".", 0) == 0)
        out.push_back(g->name);
    }
  }
  return out;
}

std::vector<int> Model::mouth_points() const {
  std::vector<int> out;
  for (Part p : {Part::Lip, Part::Teeth})
    for (int i : members_[headmodel::part_index(p)]) out.push_back(i);
  std::sort(out.begin(), out.end());
  return out;
}

MatX combine_identity(const MatX& w, const std::array<MatX, kNumParts>& codebook) {
  if (w.rows() == 0) throw Error("combine_identity: codebook has no identities (k = 0)");
  require(w.cols() == kNumParts, "combine_identity: w must be k x p");
  const Eigen::Index c2 = codebook[0].cols();
  MatX out(kNumParts, c2);
  for (int l = 0; l < kNumParts; ++l) {
    require(codebook[l].rows() == w.rows() && codebook[l].cols() == c2, "combine_identity: codebook shape");
    const VecX col = w.col(l);
    VecX a = (col.array() - col.maxCoeff()).exp();
    a /= a.sum();
    out.row(l) = a.transpose() * codebook[l];
  }
  return out;
}

Var combine_identity(Tape& t, Var w, Var codebook_part, int part) {
  const MatX& W = t.value(w);
  const MatX& Z = t.value(codebook_part);
  if (W.rows() == 0) throw Error("combine_identity: codebook has no identities (k = 0)");
  require(Z.rows() == W.rows() && part >= 0 && part < W.cols(), "combine_identity: shape mismatch");
  const VecX col = W.col(part);
  VecX a = (col.array() - col.maxCoeff()).exp();
  a /= a.sum();
  auto zc = std::make_shared<MatX>(Z);
  Var in[] = {w, codebook_part};
  return t.record1(in, a.transpose() * Z, [a, zc, part](auto og, auto ig) {
    const MatX& g = *og[0];  // 1 x c2
    if (ig[1]) ig[1]->noalias() += a * g;
    if (ig[0]) {
      const VecX da = *zc * g.transpose();
      ig[0]->col(part) += a.cwiseProduct(da.array().matrix() - VecX::Constant(a.size(), a.dot(da)));
    }
  });
}

std::array<Var, kNumParts> part_codes(Tape& t, Model& m, const CodeSource& src) {
  std::array<Var, kNumParts> z;
  Var w;
  if (src.kind == CodeSource::Kind::Mixture) {
    if (!m.has_mixture()) throw PhaseError("part_codes: model has no inversion weights");
    w = t.param(m.params().at("mix.w"));
  }
  if (src.kind == CodeSource::Kind::Explicit)
    require(src.codes.rows() == kNumParts && src.codes.cols() == m.config().code_dim,
            "part_codes: explicit codes must be p x c2");
  if (src.kind == CodeSource::Kind::Row && (src.row < 0 || src.row >= m.identities()))
    throw Error("part_codes: identity " + std::to_string(src.row) + " out of range [0, " +
                std::to_string(m.identities()) + ")");
  for (int l = 0; l < kNumParts; ++l) {
    const std::string name = "codebook." + std::string(headmodel::part_name(part_from_index(l)));
    switch (src.kind) {
      case CodeSource::Kind::Row: z[l] = row(t, t.param(m.params().at(name)), src.row); break;
      case CodeSource::Kind::Mixture: z[l] = combine_identity(t, w, t.param(m.params().at(name)), l); break;
      case CodeSource::Kind::Explicit: z[l] = t.constant(src.codes.row(l)); break;
    }
  }
  return z;
}

namespace {

Var mlp(Tape& t, Model& m, const std::string& pre, Var x, Var z) {
  ParamStore& ps = m.params();
  Var zrow = add(t, matmul(t, z, t.param(ps.at(layer(pre, 0, "Wz")))), t.param(ps.at(layer(pre, 0, "b"))));
  Var h = relu(t, add_row(t, matmul(t, x, t.param(ps.at(layer(pre, 0, "Wx")))), zrow));
  const int L = m.config().mlp_layers;
  for (int i = 1; i < L; ++i) {
    h = add_row(t, matmul(t, h, t.param(ps.at(layer(pre, i, "W")))), t.param(ps.at(layer(pre, i, "b"))));
    if (i + 1 < L) h = relu(t, h);
  }
  return h;
}

}  // namespace

GeometryVars predict_geometry(Tape& t, Model& m, Part part, Var f, Var z) {
  const NetConfig& c = m.config();
  Var o = mlp(t, m, group_prefix("geo", part), f, z);
  GeometryVars g;
  g.mu = scale(t, diff::tanh(t, cols(t, o, 0, 3)), c.pos_range);
  MatX unit = MatX::Zero(1, 4);
  unit(0, 0) = 1.0;
  g.rot = normalize_rows(t, add_row(t, cols(t, o, 3, 4), t.constant(unit)));
  g.scale = diff::exp(t, clamp(t, cols(t, o, 7, 3), c.log_scale_min, c.log_scale_max));
  g.opacity = sigmoid(t, cols(t, o, 10, 1));
  return g;
}

Var predict_appearance(Tape& t, Model& m, Part part, Var f, Var z, Var e, const GeometryVars& geo) {
  const NetConfig& c = m.config();
  Var parts[] = {f, scale(t, e, c.dynamic_scale), geo.mu, geo.rot, geo.scale, geo.opacity};
  Var o = mlp(t, m, group_prefix("app", part), concat_cols(t, parts), z);
  Var split[] = {sigmoid(t, cols(t, o, 0, 3)), cols(t, o, 3, c.channels - 3)};
  return concat_cols(t, split);
}

Var refine(Tape& t, Model& m, Var rgb, Var feat, int height, int width) {
  const MatX& r = t.value(rgb);
  const MatX& f = t.value(feat);
  if (r.rows() != f.rows() || r.rows() != static_cast<Eigen::Index>(height) * width)
    throw DimensionError("refine: rgb and feature images must share the resolution " + std::to_string(height) +
                         "x" + std::to_string(width));
  require(r.cols() == 3 && f.cols() == m.config().channels - 3, "refine: channel count mismatch");
  Var in[] = {rgb, feat};
  Var x = concat_cols(t, in);
  const int L = m.config().cnn_layers;
  for (int i = 0; i < L; ++i) {
    const std::string pre = "cnn.l" + std::to_string(i);
    x = conv3x3(t, x, t.param(m.params().at(pre + ".W")), t.param(m.params().at(pre + ".b")), height, width);
    x = i + 1 < L ? leaky_relu(t, x, m.config().cnn_slope) : sigmoid(t, x);
  }
  return x;
}

namespace {

struct PartGeometry {
  std::array<GeometryVars, kNumParts> geo;
  std::array<Var, kNumParts> f;
  std::vector<std::vector<int>> rows;
  std::vector<int> active;  // part indices with points
};

PartGeometry geometry_all(Tape& t, Model& m, const std::array<Var, kNumParts>& z) {
  PartGeometry pg;
  Var enc = t.param(m.params().at("encoding"));
  for (int l = 0; l < kNumParts; ++l) {
    const auto& idx = m.members()[l];
    if (idx.empty()) continue;
    pg.active.push_back(l);
    pg.rows.push_back(idx);
    pg.f[l] = gather_rows(t, enc, idx);
    pg.geo[l] = predict_geometry(t, m, part_from_index(l), pg.f[l], z[l]);
  }
  return pg;
}

template <class Get>
Var scatter(Tape& t, const PartGeometry& pg, int n, Get get) {
  std::vector<Var> vs;
  for (int l : pg.active) vs.push_back(get(l));
  return scatter_rows(t, vs, pg.rows, n);
}

}  // namespace

AvatarVars forward_avatar(Tape& t, Model& m, const graph::HeadVars& head, const raster::Camera& cam,
                          const CodeSource& codes, const RenderOptions& opts) {
  const headmodel::HeadTemplate& tmpl = m.head();
  headmodel::check_params(tmpl, graph::head_values(t, head));
  cam.check();
  const int n = m.num_points();
  AvatarVars out;
  out.vertices = graph::pose(t, tmpl, head);
  const graph::FrameVars posed = graph::frames(t, out.vertices, tmpl.faces);
  graph::HeadVars rest = head;
  rest.theta = t.constant(MatX::Zero(1, t.value(head.theta).cols()));
  rest.phi = t.constant(MatX::Zero(1, t.value(head.phi).cols()));
  const graph::FrameVars neutral = graph::frames(t, graph::pose(t, tmpl, rest), tmpl.faces);

  const auto z = part_codes(t, m, codes);
  auto z_app = z;
  if (codes.appearance.size() != 0) {
    require(codes.appearance.rows() == kNumParts && codes.appearance.cols() == m.config().code_dim,
            "forward_avatar: appearance codes must be p x c2");
    for (int l = 0; l < kNumParts; ++l) z_app[l] = t.constant(codes.appearance.row(l));
  }
  const PartGeometry pg = geometry_all(t, m, z);
  out.mu_local = scatter(t, pg, n, [&](int l) { return pg.geo[l].mu; });
  out.scale_local = scatter(t, pg, n, [&](int l) { return pg.geo[l].scale; });
  out.opacity = scatter(t, pg, n, [&](int l) { return pg.geo[l].opacity; });
  Var rot = scatter(t, pg, n, [&](int l) { return pg.geo[l].rot; });
  Var mu_eff = add(t, out.mu_local, t.constant(MatX(m.points().anchor_local)));

  const std::vector<int>& parent = m.points().parent_face;
  Var e = graph::dynamic_signal(t, mu_eff, posed, neutral, parent);
  std::array<Var, kNumParts> h{};
  for (size_t a = 0; a < pg.active.size(); ++a) {
    const int l = pg.active[a];
    Var el = gather_rows(t, e, pg.rows[a]);
    h[l] = predict_appearance(t, m, part_from_index(l), pg.f[l], z_app[l], el, pg.geo[l]);
  }
  out.h = scatter(t, pg, n, [&](int l) { return h[l]; });

  out.global = graph::bind(t, mu_eff, rot, out.scale_local, posed, parent);
  const graph::ImageVars img = graph::rasterize(t, out.global, out.opacity, out.h, cam, opts.raster);
  out.rgb = img.rgb;
  out.feat = img.feat;
  out.alpha = img.alpha;
  out.image = opts.refine ? refine(t, m, img.rgb, img.feat, cam.height, cam.width) : img.rgb;
  return out;
}

Rendered render(Model& m, const headmodel::HeadParams& p, const raster::Camera& cam, const CodeSource& codes,
                const RenderOptions& opts) {
  Tape t(false);
  const AvatarVars a = forward_avatar(t, m, graph::head_constants(t, p), cam, codes, opts);
  Rendered r;
  r.image = mat_to_image(t.value(a.image), cam.height, cam.width);
  r.rgb = mat_to_image(t.value(a.rgb), cam.height, cam.width);
  r.feat = mat_to_image(t.value(a.feat), cam.height, cam.width);
  r.alpha = mat_to_image(t.value(a.alpha), cam.height, cam.width);
  return r;
}

LocalAttributes local_attributes(Model& m, const CodeSource& codes) {
  Tape t(false);
  const auto z = part_codes(t, m, codes);
  const PartGeometry pg = geometry_all(t, m, z);
  const int n = m.num_points();
  LocalAttributes a;
  a.mu = t.value(scatter(t, pg, n, [&](int l) { return pg.geo[l].mu; }));
  a.scale = t.value(scatter(t, pg, n, [&](int l) { return pg.geo[l].scale; }));
  a.rot = t.value(scatter(t, pg, n, [&](int l) { return pg.geo[l].rot; }));
  a.opacity = t.value(scatter(t, pg, n, [&](int l) { return pg.geo[l].opacity; })).col(0);
  return a;
}

}  // namespace gavatar::gapnet
