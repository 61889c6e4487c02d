#include "gavatar/headmodel.hpp"

#include <cmath>
#include <numbers>

namespace gavatar::headmodel {

namespace {

constexpr double kPi = std::numbers::pi;

// Head ellipsoid radii and the latitude span covered by the head rows.
constexpr double kRx = 0.078, kRy = 0.105, kRz = 0.095;
constexpr double kLatBottom = -0.96;  // ~ -55 degrees, where the neck attaches
constexpr double kLatTop = 1.40;
constexpr double kNeckFraction = 0.2;  // fraction of the v axis used by the neck tube
constexpr double kTopV = 0.96;          // v of the last ring; the pole sits at v = 1
constexpr double kNeckDrop = 0.11;

double gauss2(double a, double sa, double b, double sb) {
  return std::exp(-(a * a) / (sa * sa) - (b * b) / (sb * sb));
}

double smoothstep(double e0, double e1, double x) {
  const double t = std::clamp((x - e0) / (e1 - e0), 0.0, 1.0);
  return t * t * (3 - 2 * t);
}

struct SurfacePoint {
  double lat;  // head latitude (clamped to the bottom ring for neck rows)
  double lon;
  bool neck;
  double neck_t;  // 0 at the neck base, 1 where the neck meets the head
};

SurfacePoint surface_coords(double v, double lon) {
  SurfacePoint sp{};
  sp.lon = lon;
  if (v < kNeckFraction) {
    sp.neck = true;
    sp.neck_t = v / kNeckFraction;
    sp.lat = kLatBottom;
  } else {
    sp.neck = false;
    sp.neck_t = 1.0;
    sp.lat = kLatBottom + (v - kNeckFraction) / (kTopV - kNeckFraction) * (kLatTop - kLatBottom);
  }
  return sp;
}

Vec3 ellipsoid(double lat, double lon) {
  return {kRx * std::cos(lat) * std::sin(lon), kRy * std::sin(lat), kRz * std::cos(lat) * std::cos(lon)};
}

}  // namespace

Vec2 synthetic_lat_lon(const Vec2& uv) {
  const SurfacePoint sp = surface_coords(uv.y(), -kPi + 2 * kPi * uv.x());
  return {sp.lat, sp.lon};
}

HeadTemplate make_synthetic_template(const TemplateOptions& opts) {
  require(opts.rings >= 8 && opts.segments >= 8, "template: need at least 8 rings and segments");
  const int rings = opts.rings;
  const int cols = opts.segments + 1;  // seam column duplicated for the UV atlas
  const int V = rings * cols + 1;
  const int pole = V - 1;

  // Mouth line sits halfway between two rows so that the teeth band is exactly one row of faces.
  const double dv = kTopV / (rings - 1);
  const double lat_step = dv / (kTopV - kNeckFraction) * (kLatTop - kLatBottom);
  auto lat_of_row = [&](int r) { return surface_coords(r * dv, 0).lat; };
  int mouth_row = 0;
  for (int r = 0; r < rings - 1; ++r)
    if (lat_of_row(r) <= -0.45 && !surface_coords(r * dv, 0).neck) mouth_row = r;
  const double lat_mouth = 0.5 * (lat_of_row(mouth_row) + lat_of_row(mouth_row + 1));

  HeadTemplate t;
  t.vertices.resize(V, 3);
  t.uv.resize(V, 2);
  std::vector<SurfacePoint> sps(V);
  for (int r = 0; r < rings; ++r) {
    const double v = r * dv;
    for (int c = 0; c < cols; ++c) {
      const double u = static_cast<double>(c) / opts.segments;
      const double lon = -kPi + 2 * kPi * u;
      const SurfacePoint sp = surface_coords(v, lon);
      Vec3 p = ellipsoid(sp.lat, lon);
      if (sp.neck) {
        p.z() -= 0.012 * (1 - sp.neck_t);
        p.y() -= kNeckDrop * (1 - sp.neck_t);
      } else {
        const Vec3 radial = p.normalized();
        const double alon = std::abs(lon);
        double bump = 0.022 * gauss2(lon, 0.17, sp.lat + 0.08, 0.2);            // nose
        bump += 0.012 * gauss2(alon - kPi / 2, 0.16, sp.lat - 0.02, 0.2);        // ears
        bump += 0.004 * gauss2(lon, 0.5, sp.lat - 0.3, 0.08);                    // brow ridge
        bump += 0.006 * gauss2(lon, 0.35, sp.lat - lat_mouth, 0.12);             // lips
        bump -= 0.006 * gauss2(alon - 0.42, 0.14, sp.lat - 0.12, 0.08);          // eye sockets
        bump += 0.008 * gauss2(lon, 0.3, sp.lat + 0.8, 0.14);                    // chin
        p += bump * radial;
      }
      const int idx = r * cols + c;
      t.vertices.row(idx) = p.transpose();
      t.uv.row(idx) << u, v;
      sps[idx] = sp;
    }
  }
  t.vertices.row(pole) << 0.0, kRy, 0.0;
  t.uv.row(pole) << 0.5, 1.0;
  sps[pole] = {kPi / 2, 0.0, false, 1.0};

  // Faces: quads split into two triangles with outward orientation, plus the top fan.
  std::vector<Eigen::Vector3i> faces;
  for (int r = 0; r + 1 < rings; ++r)
    for (int c = 0; c + 1 < cols; ++c) {
      const int a = r * cols + c, b = a + 1, d = a + cols, e = d + 1;
      faces.emplace_back(a, b, e);
      faces.emplace_back(a, e, d);
    }
  for (int c = 0; c + 1 < cols; ++c) {
    const int a = (rings - 1) * cols + c;
    faces.emplace_back(a, a + 1, pole);
  }
  t.faces.resize(faces.size(), 3);
  for (size_t f = 0; f < faces.size(); ++f) t.faces.row(f) = faces[f].transpose();

  // Part labels from the face centroid in (lat, lon).
  t.face_parts.resize(faces.size());
  for (size_t f = 0; f < faces.size(); ++f) {
    double u = 0, v = 0;
    for (int k = 0; k < 3; ++k) {
      u += t.uv(faces[f][k], 0) / 3;
      v += t.uv(faces[f][k], 1) / 3;
    }
    const bool fan = static_cast<int>(f) >= (rings - 1) * (cols - 1) * 2;
    const SurfacePoint sp = surface_coords(v, -kPi + 2 * kPi * u);
    const double lat = sp.lat, lon = sp.lon, alon = std::abs(lon);
    const int row = static_cast<int>(std::floor(v / dv));
    Part p;
    if (fan) {
      p = Part::Hair;
    } else if (sp.neck) {
      p = Part::Neck;
    } else if (row == mouth_row && alon < 0.38) {
      p = Part::Teeth;
    } else if ((row == mouth_row - 1 || row == mouth_row + 1 || row == mouth_row) && alon < 0.5) {
      p = Part::Lip;
    } else if (alon < 0.2 && lat > -0.32 && lat < 0.15) {
      p = Part::Nose;
    } else if (std::pow((alon - 0.42) / 0.17, 2) + std::pow((lat - 0.12) / 0.11, 2) < 1.0) {
      p = Part::Eye;
    } else if (std::pow((alon - kPi / 2) / 0.24, 2) + std::pow(lat / 0.3, 2) < 1.0) {
      p = Part::Ear;
    } else if (lat > 0.22 && lat < 0.75 && alon < 0.85) {
      p = Part::Forehead;
    } else if (lat >= 0.75 || (alon > 1.95 && lat > -0.35)) {
      p = Part::Hair;
    } else if (alon >= 0.85 && alon < 1.05 && lat < 0.75) {
      p = Part::Boundary;
    } else if (alon < 0.85 && lat < 0.22) {
      p = Part::OtherFace;
    } else {
      p = Part::Other;
    }
    t.face_parts[f] = p;
  }

  // Joints: global (neck base), neck, jaw hinge.
  t.joints = {{"global", Vec3(0, -0.21, -0.012), -1},
              {"neck", Vec3(0, -0.10, -0.012), 0},
              {"jaw", Vec3(0, -0.02, -0.025), 1}};

  t.skin_weights = MatX::Zero(V, 3);
  const double lat_jaw_top = lat_mouth - 0.5 * lat_step;
  for (int i = 0; i < V; ++i) {
    const SurfacePoint& sp = sps[i];
    if (sp.neck) {
      t.skin_weights(i, 0) = 1 - sp.neck_t;
      t.skin_weights(i, 1) = sp.neck_t;
      continue;
    }
    double jaw = (sp.lat < lat_jaw_top) ? 1.0 : 0.0;
    jaw *= 1.0 - smoothstep(0.9, 1.35, std::abs(sp.lon));
    jaw *= smoothstep(kLatBottom, kLatBottom + 0.3, sp.lat);
    t.skin_weights(i, 2) = jaw;
    t.skin_weights(i, 1) = 1 - jaw;
  }

  // Blendshapes as smooth displacement fields.
  t.shape_basis = MatX::Zero(3 * V, opts.shape_dim);
  t.expr_basis = MatX::Zero(3 * V, opts.expr_dim);
  for (int i = 0; i < V; ++i) {
    const SurfacePoint& sp = sps[i];
    const Vec3 p = t.vertices.row(i).transpose();
    const Vec3 radial = sp.neck ? Vec3(p.x(), 0, p.z()).normalized() : p.normalized();
    const double lat = sp.lat, lon = sp.lon, alon = std::abs(lon);
    const double head = sp.neck ? 0.3 * sp.neck_t : 1.0;
    std::vector<Vec3> shape = {
        Vec3(0.06 * p.x(), 0, 0),
        Vec3(0, 0.05 * p.y(), 0),
        Vec3(0, 0, 0.05 * p.z()),
        0.006 * gauss2(lon, 0.17, lat + 0.08, 0.2) * radial * head,
        Vec3(0.006 * std::sin(lon) * smoothstep(-0.2, -0.7, lat), 0, 0) * head,
        0.005 * gauss2(lon, 0.6, lat - 0.45, 0.2) * radial * head,
        0.005 * (gauss2(lon - 0.7, 0.25, lat + 0.2, 0.2) + gauss2(lon + 0.7, 0.25, lat + 0.2, 0.2)) *
            radial * head,
        0.004 * gauss2(alon - kPi / 2, 0.16, lat, 0.2) * radial * head,
        Vec3(0, -0.002, 0.005) * gauss2(lon, 0.3, lat + 0.8, 0.16) * head,
        Vec3(0.05 * p.x() * p.y() / kRy, 0, 0),
    };
    for (int k = 0; k < opts.shape_dim; ++k) {
      const Vec3 d = shape[k % shape.size()] * (k < static_cast<int>(shape.size()) ? 1.0 : 0.5);
      t.shape_basis.block<3, 1>(3 * i, k) = d;
    }
    if (sp.neck) continue;
    const double dm = lat - lat_mouth;
    std::vector<Vec3> expr = {
        Vec3(0, 0.006, -0.003) * (gauss2(lon - 0.4, 0.15, dm, 0.12) + gauss2(lon + 0.4, 0.15, dm, 0.12)),
        Vec3(0.005 * std::sin(lon), 0, 0) * gauss2(lon, 0.45, dm, 0.12),
        Vec3(0, 0, 0.006) * gauss2(lon, 0.25, dm, 0.12),
        Vec3(0, 0.006, 0) * gauss2(lon, 0.7, lat - 0.3, 0.12),
        Vec3(0, -0.004, 0) * gauss2(alon - 0.42, 0.16, lat - 0.17, 0.06),
        0.006 * (gauss2(lon - 0.65, 0.25, lat + 0.25, 0.2) + gauss2(lon + 0.65, 0.25, lat + 0.25, 0.2)) *
            radial,
        Vec3(0, -0.004, 0.002) * gauss2(lon, 0.35, lat - (lat_mouth - 1.5 * lat_step), 0.08),
        Vec3(0, 0.003, 0) * gauss2(lon, 0.15, lat - 0.08, 0.1),
    };
    for (int k = 0; k < opts.expr_dim; ++k) {
      const Vec3 d = expr[k % expr.size()] * (k < static_cast<int>(expr.size()) ? 1.0 : 0.5);
      t.expr_basis.block<3, 1>(3 * i, k) = d;
    }
  }
  t.validate();
  return t;
}

}  // namespace gavatar::headmodel
