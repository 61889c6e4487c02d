#include "gavatar/synthdata.hpp"

#include "gavatar/io.hpp"

#include <cmath>
#include <cstdio>
#include <limits>
#include <nlohmann/json.hpp>
#include <numbers>
#include <random>

namespace gavatar::synthdata {

namespace fs = std::filesystem;
using headmodel::Vertices;

namespace {

constexpr double kPi = std::numbers::pi;
constexpr double kDeg = kPi / 180.0;
constexpr double kDistance = 0.6;
constexpr double kTargetY = -0.04;
constexpr double kFocalScale = 1.6;
constexpr int kFormatVersion = 1;

double smoothstep(double e0, double e1, double x) {
  const double t = std::clamp((x - e0) / (e1 - e0), 0.0, 1.0);
  return t * t * (3 - 2 * t);
}

double bump(double a, double sa, double b, double sb) { return std::exp(-(a * a) / (sa * sa) - (b * b) / (sb * sb)); }

Vec3 mix(const Vec3& a, const Vec3& b, double t) { return a + t * (b - a); }

std::uint64_t identity_seed(std::uint64_t seed, int i) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(i), 0x5eedu};
  std::uint32_t out[2];
  seq.generate(out, out + 2);
  return (static_cast<std::uint64_t>(out[0]) << 32) | out[1];
}

Albedo draw_albedo(std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Albedo a;
  const double tone = 0.35 + 0.5 * u(rng);
  a.skin = Vec3(tone * (1.05 + 0.1 * u(rng)), tone * (0.78 + 0.08 * u(rng)), tone * (0.62 + 0.1 * u(rng)));
  const double hl = 0.05 + 0.55 * u(rng) * u(rng);
  a.hair = Vec3(hl * (1.2 + 0.4 * u(rng)), hl * (0.9 + 0.2 * u(rng)), hl * (0.6 + 0.3 * u(rng)));
  a.brow = 0.8 * a.hair;
  a.lip = Vec3(0.55 + 0.3 * u(rng), 0.2 + 0.2 * u(rng), 0.22 + 0.2 * u(rng)).cwiseMin(a.skin * 1.1 + Vec3::Constant(0.1));
  a.iris = Vec3(0.1 + 0.4 * u(rng), 0.1 + 0.35 * u(rng), 0.1 + 0.45 * u(rng));
  a.teeth = Vec3(0.9, 0.88, 0.82);
  for (int k = 0; k < 5; ++k) {
    Albedo::Wave w;
    w.fu = 1 + static_cast<int>(u(rng) * 5);
    w.fv = 1 + static_cast<int>(u(rng) * 6);
    w.phase = 2 * kPi * u(rng);
    w.amplitude = Vec3(u(rng), u(rng), u(rng)) * 0.05;
    a.waves.push_back(w);
  }
  for (Vec3* c : {&a.skin, &a.hair, &a.brow, &a.lip, &a.iris}) *c = c->cwiseMax(0.03).cwiseMin(0.97);
  return a;
}

MatX3 draw_delta(const HeadTemplate& t, std::mt19937_64& rng) {
  std::uniform_int_distribution<int> pick(0, t.num_vertices() - 1);
  std::normal_distribution<double> amp(0.0, 0.002);
  const Vec3 center(0, 0, 0);
  MatX3 delta = MatX3::Zero(t.num_vertices(), 3);
  for (int k = 0; k < 6; ++k) {
    const Vec3 c = t.vertices.row(pick(rng)).transpose();
    const double a = amp(rng);
    for (int i = 0; i < t.num_vertices(); ++i) {
      const Vec3 p = t.vertices.row(i).transpose();
      const double d2 = (p - c).squaredNorm();
      const Vec3 dir = (p - center).normalized();
      delta.row(i) += (a * std::exp(-d2 / (0.03 * 0.03)) * dir).transpose();
    }
  }
  return delta;
}

}  // namespace

Vec3 Albedo::at(const Vec2& uv, Part part) const {
  const Vec2 ll = headmodel::synthetic_lat_lon(uv);
  const double lat = ll.x(), alon = std::abs(ll.y());
  Vec3 c = skin;
  switch (part) {
    case Part::Teeth:
      c = teeth;
      break;
    case Part::Lip:
      c = lip;
      break;
    case Part::Hair:
      c = hair;
      break;
    case Part::Neck:
      c = 0.9 * skin;
      break;
    case Part::Eye: {
      const double r = std::hypot((alon - 0.42) / 0.07, (lat - 0.12) / 0.07);
      c = r < 0.5 ? Vec3(0.05, 0.04, 0.04) : (r < 1.0 ? iris : Vec3(0.93, 0.92, 0.9));
      break;
    }
    default: {
      const double hairline = std::max(smoothstep(0.62, 0.78, lat), smoothstep(1.75, 2.0, alon) * smoothstep(-0.5, -0.3, lat));
      c = mix(c, hair, hairline);
      c = mix(c, brow, 0.9 * bump(alon - 0.42, 0.2, lat - 0.3, 0.04));
      c = mix(c, lip, 0.25 * bump(alon - 0.6, 0.2, lat + 0.2, 0.15));
    }
  }
  for (const Wave& w : waves) c += w.amplitude * std::sin(2 * kPi * (w.fu * uv.x() + w.fv * uv.y()) + w.phase);
  return c.cwiseMax(0.0).cwiseMin(1.0);
}

SyntheticIdentity make_identity(const HeadTemplate& t, std::uint64_t seed, int expressions) {
  require(expressions >= 1, "make_identity: need at least the neutral expression");
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n01(0.0, 1.0);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  SyntheticIdentity id;
  id.seed = seed;
  id.albedo = draw_albedo(rng);
  id.base = HeadParams::zeros(t);
  for (int k = 0; k < t.shape_dim(); ++k) id.base.beta(k) = n01(rng);
  id.base.delta = draw_delta(t, rng);
  id.expressions.push_back(id.base);
  for (int e = 1; e < expressions; ++e) {
    HeadParams p = id.base;
    for (int k = 0; k < t.expr_dim(); ++k) p.phi(k) = 0.8 * n01(rng);
    p.theta(3 * headmodel::kJawJoint) = (5 + 15 * u(rng)) * kDeg;
    p.theta(3 * headmodel::kNeckJoint) = (-5 + 10 * u(rng)) * kDeg;
    p.theta(3 * headmodel::kNeckJoint + 1) = (-5 + 10 * u(rng)) * kDeg;
    id.expressions.push_back(p);
  }
  return id;
}

raster::Camera orbit_camera(double azimuth_deg, double elevation_deg, int resolution) {
  require(resolution > 0, "orbit_camera: resolution must be positive");
  const double az = azimuth_deg * kDeg, el = elevation_deg * kDeg;
  const Vec3 target(0, kTargetY, 0);
  const Vec3 eye = target + kDistance * Vec3(std::sin(az) * std::cos(el), std::sin(el), std::cos(az) * std::cos(el));
  return raster::Camera::look_at(eye, target, Vec3(0, 1, 0), kFocalScale * resolution, resolution, resolution);
}

std::vector<raster::Camera> make_rig(int views, int resolution) {
  require(views >= 1, "make_rig: need at least one view");
  std::vector<raster::Camera> rig;
  for (int i = 0; i < views; ++i) {
    const double az = views == 1 ? 0.0 : -60.0 + 120.0 * i / (views - 1);
    rig.push_back(orbit_camera(az, i % 2 == 0 ? 12.0 : -8.0, resolution));
  }
  return rig;
}

std::vector<raster::Camera> reference_rig(int resolution) {
  std::vector<raster::Camera> rig;
  for (int e = 0; e < 4; ++e)
    for (int a = 0; a < 4; ++a) rig.push_back(orbit_camera(-60.0 + 40.0 * a, -20.0 + 40.0 / 3.0 * e, resolution));
  return rig;
}

MeshImages render_mesh(const HeadTemplate& t, const Vertices& posed, const Albedo& albedo, const raster::Camera& cam,
                       int supersample) {
  cam.check();
  require(posed.rows() == t.num_vertices(), "render_mesh: vertex count mismatch");
  require(supersample >= 1, "render_mesh: supersample must be >= 1");
  const int ss = supersample, W = cam.width, H = cam.height, SW = W * ss, SH = H * ss;
  const Mat3 R = cam.rotation();
  const Vec3 tr = cam.translation();
  const int V = t.num_vertices();
  MatX3 scr(V, 3);  // x, y in pixels, z camera depth
  for (int i = 0; i < V; ++i) {
    const Vec3 pc = R * posed.row(i).transpose() + tr;
    scr(i, 2) = pc.z();
    scr(i, 0) = cam.K(0, 0) * pc.x() / pc.z() + cam.K(0, 1) * pc.y() / pc.z() + cam.K(0, 2);
    scr(i, 1) = cam.K(1, 1) * pc.y() / pc.z() + cam.K(1, 2);
  }
  std::vector<double> depth(static_cast<size_t>(SW) * SH, std::numeric_limits<double>::infinity());
  std::vector<int> face_of(depth.size(), -1);
  std::vector<Vec2> uv_of(depth.size());
  auto sample_pos = [ss](int s) { return (s + 0.5) / ss - 0.5; };
  for (int f = 0; f < t.num_faces(); ++f) {
    const int a = t.faces(f, 0), b = t.faces(f, 1), c = t.faces(f, 2);
    if (scr(a, 2) <= 1e-3 || scr(b, 2) <= 1e-3 || scr(c, 2) <= 1e-3) continue;
    const Vec2 pa(scr(a, 0), scr(a, 1)), pb(scr(b, 0), scr(b, 1)), pc(scr(c, 0), scr(c, 1));
    const double area = (pb - pa).x() * (pc - pa).y() - (pb - pa).y() * (pc - pa).x();
    if (std::abs(area) < 1e-12) continue;
    const double xmin = std::min({pa.x(), pb.x(), pc.x()}), xmax = std::max({pa.x(), pb.x(), pc.x()});
    const double ymin = std::min({pa.y(), pb.y(), pc.y()}), ymax = std::max({pa.y(), pb.y(), pc.y()});
    const int sx0 = std::max(0, static_cast<int>(std::ceil((xmin + 0.5) * ss - 0.5)));
    const int sx1 = std::min(SW - 1, static_cast<int>(std::floor((xmax + 0.5) * ss - 0.5)));
    const int sy0 = std::max(0, static_cast<int>(std::ceil((ymin + 0.5) * ss - 0.5)));
    const int sy1 = std::min(SH - 1, static_cast<int>(std::floor((ymax + 0.5) * ss - 0.5)));
    const double iza = 1 / scr(a, 2), izb = 1 / scr(b, 2), izc = 1 / scr(c, 2);
    for (int sy = sy0; sy <= sy1; ++sy)
      for (int sx = sx0; sx <= sx1; ++sx) {
        const Vec2 p(sample_pos(sx), sample_pos(sy));
        auto edge = [](const Vec2& u, const Vec2& v, const Vec2& q) {
          return (v - u).x() * (q - u).y() - (v - u).y() * (q - u).x();
        };
        const double w0 = edge(pb, pc, p) / area, w1 = edge(pc, pa, p) / area, w2 = edge(pa, pb, p) / area;
        if (w0 < 0 || w1 < 0 || w2 < 0) continue;
        const double iz = w0 * iza + w1 * izb + w2 * izc;
        const double z = 1 / iz;
        const size_t k = static_cast<size_t>(sy) * SW + sx;
        if (z >= depth[k]) continue;
        depth[k] = z;
        face_of[k] = f;
        const Vec2 uv = (w0 * iza * t.uv.row(a) + w1 * izb * t.uv.row(b) + w2 * izc * t.uv.row(c)).transpose() / iz;
        uv_of[k] = uv;
      }
  }
  MeshImages out{Image(3, H, W), Image(1, H, W), Image(1, H, W)};
  const double inv = 1.0 / (ss * ss);
  const int half = (ss * ss + 1) / 2;
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      Vec3 color = Vec3::Zero();
      int covered = 0, mouth = 0;
      for (int j = 0; j < ss; ++j)
        for (int i = 0; i < ss; ++i) {
          const size_t k = static_cast<size_t>(y * ss + j) * SW + (x * ss + i);
          if (face_of[k] < 0) continue;
          const Part part = t.face_parts[face_of[k]];
          color += albedo.at(uv_of[k], part);
          ++covered;
          mouth += headmodel::is_mouth(part);
        }
      for (int ch = 0; ch < 3; ++ch) out.rgb.at(ch, y, x) = color(ch) * inv;
      out.mask.at(0, y, x) = covered >= half ? 1.0 : 0.0;
      out.mouth.at(0, y, x) = mouth >= half ? 1.0 : 0.0;
    }
  return out;
}

const Frame& Dataset::frame(int identity, int expression, int view) const {
  const int E = options.expressions, Vw = options.views;
  require(identity >= 0 && identity < options.identities && expression >= 0 && expression < E && view >= 0 &&
              view < Vw,
          "dataset: frame index out of range");
  return frames[(static_cast<size_t>(identity) * E + expression) * Vw + view];
}

std::vector<const Frame*> Dataset::select(int identity, const std::vector<int>& expressions,
                                          const std::vector<int>& views) const {
  std::vector<int> es = expressions, vs = views;
  if (es.empty())
    for (int e = 0; e < options.expressions; ++e) es.push_back(e);
  if (vs.empty())
    for (int v = 0; v < options.views; ++v) vs.push_back(v);
  std::vector<const Frame*> out;
  for (int e : es)
    for (int v : vs) out.push_back(&frame(identity, e, v));
  return out;
}

namespace {

void validate_options(const GenerateOptions& o) {
  require(o.identities >= 1, "generate_dataset: k must be >= 1");
  require(o.views >= 1 && o.expressions >= 1, "generate_dataset: need at least one view and expression");
  require(o.resolution >= 8, "generate_dataset: resolution must be >= 8");
}

void render_frames(Dataset& d) {
  const int k = d.options.identities, E = d.options.expressions, Vw = d.options.views;
  d.frames.assign(static_cast<size_t>(k) * E * Vw, Frame{});
  std::vector<Vertices> posed(static_cast<size_t>(k) * E);
  for (int i = 0; i < k; ++i)
    for (int e = 0; e < E; ++e) posed[i * E + e] = headmodel::pose_mesh(d.tmpl, d.identities[i].expressions[e]);
  const long total = static_cast<long>(d.frames.size());
#pragma omp parallel for schedule(dynamic) num_threads(thread_count())
  for (long idx = 0; idx < total; ++idx) {
    const int v = static_cast<int>(idx % Vw), e = static_cast<int>((idx / Vw) % E), i = static_cast<int>(idx / (Vw * E));
    MeshImages img = render_mesh(d.tmpl, posed[i * E + e], d.identities[i].albedo, d.cameras[v]);
    io::quantize8(img.rgb);
    Frame& f = d.frames[idx];
    f.identity = i;
    f.expression = e;
    f.view = v;
    f.bundle.image = std::move(img.rgb);
    f.bundle.mask = std::move(img.mask);
    f.bundle.mouth = std::move(img.mouth);
    f.bundle.camera = d.cameras[v];
    f.bundle.params = d.identities[i].expressions[e];
  }
}

std::string id_dir(int i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "id_%03d", i);
  return buf;
}
std::string stem(int e, int v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "e%02d_v%02d", e, v);
  return buf;
}
std::string params_file(int e) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "e%02d.json", e);
  return buf;
}

}  // namespace

Dataset generate_dataset(const GenerateOptions& opts) {
  validate_options(opts);
  Dataset d;
  d.options = opts;
  d.tmpl = headmodel::make_synthetic_template(opts.tmpl);
  d.cameras = make_rig(opts.views, opts.resolution);
  for (int i = 0; i < opts.identities; ++i)
    d.identities.push_back(make_identity(d.tmpl, identity_seed(opts.seed, i), opts.expressions));
  render_frames(d);
  return d;
}

void write_dataset(const Dataset& d, const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw Error("cannot create " + dir.string() + ": " + ec.message());
  headmodel::save_template(d.tmpl, dir / "template.obj", dir / "template.json");
  nlohmann::json cams = nlohmann::json::array();
  for (const auto& c : d.cameras) cams.push_back(io::camera_to_json(c));
  const auto& o = d.options;
  nlohmann::json m = {{"format", "gavatar-synthetic"},
                      {"version", kFormatVersion},
                      {"identities", o.identities},
                      {"views", o.views},
                      {"expressions", o.expressions},
                      {"resolution", o.resolution},
                      {"seed", o.seed},
                      {"template", {{"rings", o.tmpl.rings}, {"segments", o.tmpl.segments},
                                    {"shape_dim", o.tmpl.shape_dim}, {"expr_dim", o.tmpl.expr_dim}}},
                      {"cameras", cams}};
  io::write_json(dir / "manifest.json", m);
  for (int i = 0; i < o.identities; ++i) {
    const fs::path idir = dir / id_dir(i);
    fs::create_directories(idir, ec);
    if (ec) throw Error("cannot create " + idir.string() + ": " + ec.message());
    const SyntheticIdentity& id = d.identities[i];
    io::write_json(idir / "identity.json", {{"seed", id.seed}, {"base", io::params_to_json(id.base)}});
    for (int e = 0; e < o.expressions; ++e) {
      io::write_json(idir / params_file(e), io::params_to_json(id.expressions[e], false));
      for (int v = 0; v < o.views; ++v) {
        const Frame& f = d.frame(i, e, v);
        io::write_png(idir / (stem(e, v) + "_rgb.png"), f.bundle.image);
        io::write_png(idir / (stem(e, v) + "_mask.png"), f.bundle.mask);
        io::write_png(idir / (stem(e, v) + "_mouth.png"), f.bundle.mouth);
      }
    }
  }
}

Dataset load_dataset(const fs::path& dir) {
  const nlohmann::json m = io::read_json(dir / "manifest.json");
  Dataset d;
  try {
    if (m.at("format").get<std::string>() != "gavatar-synthetic") throw FormatError("manifest: unknown format");
    if (m.at("version").get<int>() != kFormatVersion)
      throw FormatError("manifest: unsupported version " + std::to_string(m.at("version").get<int>()));
    auto& o = d.options;
    o.identities = m.at("identities");
    o.views = m.at("views");
    o.expressions = m.at("expressions");
    o.resolution = m.at("resolution");
    o.seed = m.at("seed");
    const auto& tj = m.at("template");
    o.tmpl = {tj.at("rings"), tj.at("segments"), tj.at("shape_dim"), tj.at("expr_dim")};
    for (const auto& c : m.at("cameras")) d.cameras.push_back(io::camera_from_json(c));
    if (static_cast<int>(d.cameras.size()) != o.views) throw FormatError("manifest: camera count mismatch");
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("manifest: ") + e.what());
  }
  validate_options(d.options);
  d.tmpl = headmodel::load_template(dir / "template.obj", dir / "template.json");
  const auto& o = d.options;
  for (int i = 0; i < o.identities; ++i) {
    const fs::path idir = dir / id_dir(i);
    const nlohmann::json ij = io::read_json(idir / "identity.json");
    SyntheticIdentity id = make_identity(d.tmpl, ij.at("seed").get<std::uint64_t>(), 1);
    id.base = io::params_from_json(ij.at("base"));
    id.expressions.clear();
    for (int e = 0; e < o.expressions; ++e) {
      HeadParams p = io::params_from_json(io::read_json(idir / params_file(e)));
      p.delta = id.base.delta;
      headmodel::check_params(d.tmpl, p);
      id.expressions.push_back(std::move(p));
    }
    d.identities.push_back(std::move(id));
  }
  d.frames.reserve(static_cast<size_t>(o.identities) * o.expressions * o.views);
  for (int i = 0; i < o.identities; ++i)
    for (int e = 0; e < o.expressions; ++e)
      for (int v = 0; v < o.views; ++v) {
        const fs::path idir = dir / id_dir(i);
        Frame f;
        f.identity = i;
        f.expression = e;
        f.view = v;
        f.bundle.image = io::read_png(idir / (stem(e, v) + "_rgb.png"));
        f.bundle.mask = io::read_png(idir / (stem(e, v) + "_mask.png"));
        f.bundle.mouth = io::read_png(idir / (stem(e, v) + "_mouth.png"));
        f.bundle.camera = d.cameras[v];
        f.bundle.params = d.identities[i].expressions[e];
        f.bundle.validate();
        d.frames.push_back(std::move(f));
      }
  return d;
}

}  // namespace gavatar::synthdata
