#include "gavatar/headmodel.hpp"

#include <Eigen/SVD>
#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

namespace gavatar::headmodel {

namespace {

constexpr std::array<std::string_view, kNumParts> kPartNames = {
    "forehead", "nose", "eye", "teeth", "lip", "ear", "hair", "boundary", "neck", "other_face", "other"};

Eigen::Map<const MatX3> as_vertices(const VecX& v) {
  return {v.data(), v.size() / 3, 3};
}

}  // namespace

std::string_view part_name(Part p) { return kPartNames.at(part_index(p)); }

Part part_from_name(std::string_view name) {
  for (int i = 0; i < kNumParts; ++i)
    if (kPartNames[i] == name) return part_from_index(i);
  throw FormatError("unknown part name '" + std::string(name) + "'");
}

void HeadTemplate::validate() const {
  const int V = num_vertices();
  require(V > 0, "template: no vertices");
  require(uv.rows() == V, "template: uv rows must equal vertex count");
  require(shape_basis.rows() == 3 * V, "template: shape_basis must have 3V rows");
  require(expr_basis.rows() == 3 * V, "template: expr_basis must have 3V rows");
  require(!joints.empty(), "template: at least one joint required");
  require(skin_weights.rows() == V && skin_weights.cols() == num_joints(),
          "template: skin_weights must be V x J");
  require(static_cast<int>(face_parts.size()) == num_faces(), "template: one part label per face");
  for (int j = 0; j < num_joints(); ++j)
    require(joints[j].parent < j, "template: joint parents must precede children");
  for (int f = 0; f < num_faces(); ++f)
    for (int c = 0; c < 3; ++c)
      require(faces(f, c) >= 0 && faces(f, c) < V, "template: face " + std::to_string(f) +
                                                       " references invalid vertex");
  for (int v = 0; v < V; ++v) {
    require((skin_weights.row(v).array() >= 0).all(), "template: negative skin weight");
    require(std::abs(skin_weights.row(v).sum() - 1.0) <= 1e-6, "template: skin weights must sum to 1");
  }
  for (Part p : face_parts)
    require(static_cast<int>(p) >= 1 && static_cast<int>(p) <= kNumParts, "template: bad part label");
}

HeadParams HeadParams::zeros(const HeadTemplate& t) {
  HeadParams p;
  p.beta = VecX::Zero(t.shape_dim());
  p.theta = VecX::Zero(3 * t.num_joints());
  p.phi = VecX::Zero(t.expr_dim());
  p.delta = MatX3::Zero(t.num_vertices(), 3);
  return p;
}

HeadParams HeadParams::neutral() const {
  HeadParams p = *this;
  p.theta.setZero();
  p.phi.setZero();
  return p;
}

void check_params(const HeadTemplate& t, const HeadParams& p) {
  require(p.beta.size() == t.shape_dim(), "params: beta dimension " + std::to_string(p.beta.size()) +
                                              " != " + std::to_string(t.shape_dim()));
  require(p.theta.size() == 3 * t.num_joints(), "params: theta must hold 3 values per joint");
  require(p.phi.size() == t.expr_dim(), "params: phi dimension " + std::to_string(p.phi.size()) +
                                            " != " + std::to_string(t.expr_dim()));
  require(p.delta.rows() == t.num_vertices(), "params: delta must be V x 3");
  require(p.delta.allFinite(), "params: delta not finite");
}

Vertices rest_vertices(const HeadTemplate& t, const HeadParams& p) {
  check_params(t, p);
  Vertices rest = t.vertices + p.delta;
  if (t.shape_dim() > 0) rest += as_vertices(t.shape_basis * p.beta);
  if (t.expr_dim() > 0) rest += as_vertices(t.expr_basis * p.phi);
  return rest;
}

Mat3 rodrigues(const Vec3& v) {
  const double angle = v.norm();
  if (angle < 1e-12) return Mat3::Identity() + skew(v);
  return Eigen::AngleAxisd(angle, v / angle).toRotationMatrix();
}

std::array<Mat3, 3> rodrigues_jacobian(const Vec3& v) {
  std::array<Mat3, 3> J;
  const double n2 = v.squaredNorm();
  if (n2 < 1e-24) {
    for (int i = 0; i < 3; ++i) J[i] = skew(Vec3::Unit(i));
    return J;
  }
  const Mat3 R = rodrigues(v);
  const Mat3 IR = Mat3::Identity() - R;
  for (int i = 0; i < 3; ++i) {
    J[i] = (v[i] * skew(v) + skew(v.cross(IR.col(i)))) / n2 * R;
  }
  return J;
}

std::vector<std::pair<Mat3, Vec3>> joint_transforms(const HeadTemplate& t, const VecX& theta) {
  const int J = t.num_joints();
  std::vector<std::pair<Mat3, Vec3>> G(J);
  for (int j = 0; j < J; ++j) {
    const Mat3 Rj = rodrigues(theta.segment<3>(3 * j));
    const Vec3 tj = t.joints[j].position - Rj * t.joints[j].position;
    const int par = t.joints[j].parent;
    if (par < 0) {
      G[j] = {Rj, tj};
    } else {
      G[j] = {G[par].first * Rj, G[par].first * tj + G[par].second};
    }
  }
  return G;
}

Vertices pose_mesh(const HeadTemplate& t, const HeadParams& p) {
  const Vertices rest = rest_vertices(t, p);
  const auto G = joint_transforms(t, p.theta);
  const int V = t.num_vertices();
  Vertices out(V, 3);
  for (int v = 0; v < V; ++v) {
    // r + sum_j w_j ((A_j - I) r + b_j): exact for identity transforms.
    const Vec3 r = rest.row(v).transpose();
    Vec3 acc = r;
    for (int j = 0; j < t.num_joints(); ++j) {
      const double w = t.skin_weights(v, j);
      if (w != 0.0) acc += w * ((G[j].first * r - r) + G[j].second);
    }
    out.row(v) = acc.transpose();
  }
  return out;
}

ParamsGrad pose_mesh_backward(const HeadTemplate& t, const HeadParams& p, const Vertices& grad) {
  require(grad.rows() == t.num_vertices(), "pose_mesh_backward: gradient must be V x 3");
  const Vertices rest = rest_vertices(t, p);
  const auto G = joint_transforms(t, p.theta);
  const int V = t.num_vertices();
  const int J = t.num_joints();

  std::vector<Mat3> dA(J, Mat3::Zero());
  std::vector<Vec3> db(J, Vec3::Zero());
  ParamsGrad out;
  out.delta = MatX3::Zero(V, 3);
  for (int v = 0; v < V; ++v) {
    const Vec3 g = grad.row(v).transpose();
    const Vec3 r = rest.row(v).transpose();
    Vec3 dr = Vec3::Zero();
    for (int j = 0; j < J; ++j) {
      const double w = t.skin_weights(v, j);
      if (w == 0.0) continue;
      dr += w * G[j].first.transpose() * g;
      dA[j] += w * g * r.transpose();
      db[j] += w * g;
    }
    out.delta.row(v) = dr.transpose();
  }
  const Eigen::Map<const VecX> flat(out.delta.data(), 3 * V);
  out.beta = t.shape_dim() > 0 ? VecX(t.shape_basis.transpose() * flat) : VecX();
  out.phi = t.expr_dim() > 0 ? VecX(t.expr_basis.transpose() * flat) : VecX();

  out.theta = VecX::Zero(3 * J);
  for (int j = J - 1; j >= 0; --j) {
    const Vec3 aa = p.theta.segment<3>(3 * j);
    const Mat3 Rj = rodrigues(aa);
    const Vec3& pj = t.joints[j].position;
    const Vec3 tj = pj - Rj * pj;
    const int par = t.joints[j].parent;
    const Mat3 Ap = par < 0 ? Mat3::Identity() : G[par].first;
    Mat3 dR = Ap.transpose() * dA[j];
    const Vec3 dt = Ap.transpose() * db[j];
    dR -= dt * pj.transpose();
    if (par >= 0) {
      dA[par] += dA[j] * Rj.transpose() + db[j] * tj.transpose();
      db[par] += db[j];
    }
    const auto dRdv = rodrigues_jacobian(aa);
    for (int i = 0; i < 3; ++i) out.theta[3 * j + i] = (dR.array() * dRdv[i].array()).sum();
  }
  return out;
}

std::vector<TriangleFrame> triangle_frames(const Vertices& posed, const MatX3i& faces) {
  std::vector<TriangleFrame> frames(faces.rows());
  for (int f = 0; f < faces.rows(); ++f) {
    const Vec3 v0 = posed.row(faces(f, 0)).transpose();
    const Vec3 v1 = posed.row(faces(f, 1)).transpose();
    const Vec3 v2 = posed.row(faces(f, 2)).transpose();
    const Vec3 e1 = v1 - v0;
    const Vec3 n = e1.cross(v2 - v0);
    const double a = e1.norm();
    const double b = n.norm();
    if (!(b > 1e-18) || !(a > 0)) {
      throw DegenerateFaceError(f, "triangle_frames: degenerate (zero-area) face " + std::to_string(f));
    }
    TriangleFrame& fr = frames[f];
    const Vec3 c0 = e1 / a;
    const Vec3 c2 = n / b;
    fr.R.col(0) = c0;
    fr.R.col(1) = c2.cross(c0);
    fr.R.col(2) = c2;
    fr.s = std::sqrt(0.5 * b);
    fr.T = (v0 + v1 + v2) / 3.0;
  }
  return frames;
}

void triangle_frames_backward(const Vertices& posed, const MatX3i& faces,
                              std::span<const FrameGrad> grads, Vertices& grad_posed) {
  require(static_cast<Eigen::Index>(grads.size()) == faces.rows(),
          "triangle_frames_backward: one gradient per face");
  require(grad_posed.rows() == posed.rows(), "triangle_frames_backward: gradient buffer must be V x 3");
  for (int f = 0; f < faces.rows(); ++f) {
    const FrameGrad& g = grads[f];
    const int i0 = faces(f, 0), i1 = faces(f, 1), i2 = faces(f, 2);
    const Vec3 v0 = posed.row(i0).transpose();
    const Vec3 e1 = posed.row(i1).transpose() - v0;
    const Vec3 e2 = posed.row(i2).transpose() - v0;
    const Vec3 n = e1.cross(e2);
    const double a = e1.norm();
    const double b = n.norm();
    const Vec3 c0 = e1 / a;
    const Vec3 c2 = n / b;
    const double s = std::sqrt(0.5 * b);

    Vec3 gc0 = g.R.col(0);
    const Vec3 gc1 = g.R.col(1);
    Vec3 gc2 = g.R.col(2);
    // c1 = c2 x c0
    gc2 += c0.cross(gc1);
    gc0 += gc1.cross(c2);
    Vec3 ge1 = (gc0 - c0 * c0.dot(gc0)) / a;
    Vec3 gn = (gc2 - c2 * c2.dot(gc2)) / b;
    gn += (g.s / (4.0 * s)) * c2;
    ge1 += e2.cross(gn);
    const Vec3 ge2 = gn.cross(e1);
    const Vec3 gT = g.T / 3.0;
    grad_posed.row(i0) += (gT - ge1 - ge2).transpose();
    grad_posed.row(i1) += (gT + ge1).transpose();
    grad_posed.row(i2) += (gT + ge2).transpose();
  }
}

double arap_energy(const Vertices& posed, const Vertices& reference, const MatX3i& faces,
                   Vertices* grad_posed) {
  require(posed.rows() == reference.rows(), "arap_energy: vertex count mismatch");
  const int V = static_cast<int>(posed.rows());
  std::vector<std::vector<int>> nbrs(V);
  {
    std::set<std::pair<int, int>> edges;
    for (int f = 0; f < faces.rows(); ++f)
      for (int c = 0; c < 3; ++c) {
        const int a = faces(f, c), b = faces(f, (c + 1) % 3);
        require(a < V && b < V && a >= 0 && b >= 0, "arap_energy: face index out of range");
        edges.insert({std::min(a, b), std::max(a, b)});
      }
    for (const auto& [a, b] : edges) {
      nbrs[a].push_back(b);
      nbrs[b].push_back(a);
    }
  }
  if (grad_posed) *grad_posed = Vertices::Zero(V, 3);
  double energy = 0.0;
  for (int i = 0; i < V; ++i) {
    if (nbrs[i].empty()) continue;
    Mat3 S = Mat3::Zero();
    bool undeformed = true;
    for (int j : nbrs[i]) {
      const Vec3 e = (reference.row(i) - reference.row(j)).transpose();
      const Vec3 d = (posed.row(i) - posed.row(j)).transpose();
      S += e * d.transpose();
      undeformed = undeformed && (d == e);
    }
    if (undeformed) continue;  // identity is the exact best-fit rotation
    Eigen::JacobiSVD<Mat3> svd(S, Eigen::ComputeFullU | Eigen::ComputeFullV);
    Mat3 U = svd.matrixU();
    const Mat3 Vm = svd.matrixV();
    Mat3 R = Vm * U.transpose();
    if (R.determinant() < 0) {
      U.col(2) *= -1;  // singular values are sorted; flip the smallest
      R = Vm * U.transpose();
    }
    for (int j : nbrs[i]) {
      const Vec3 e = (reference.row(i) - reference.row(j)).transpose();
      const Vec3 d = (posed.row(i) - posed.row(j)).transpose();
      const Vec3 r = d - R * e;
      energy += r.squaredNorm();
      if (grad_posed) {
        grad_posed->row(i) += 2.0 * r.transpose();
        grad_posed->row(j) -= 2.0 * r.transpose();
      }
    }
  }
  return energy;
}

Part part_of_face(const HeadTemplate& t, int face_id) {
  require(face_id >= 0 && face_id < t.num_faces(), "part_of_face: face index out of range");
  return t.face_parts[face_id];
}

// ---------------------------------------------------------------------------
// Serialization

namespace {
constexpr int kTemplateSchemaVersion = 1;
}

void save_template(const HeadTemplate& t, const std::filesystem::path& obj,
                   const std::filesystem::path& sidecar) {
  t.validate();
  {
    std::ofstream out(obj);
    if (!out) throw FormatError("cannot write " + obj.string());
    out.precision(17);
    out << "# head template\n";
    for (int v = 0; v < t.num_vertices(); ++v)
      out << "v " << t.vertices(v, 0) << ' ' << t.vertices(v, 1) << ' ' << t.vertices(v, 2) << '\n';
    for (int v = 0; v < t.num_vertices(); ++v) out << "vt " << t.uv(v, 0) << ' ' << t.uv(v, 1) << '\n';
    for (int f = 0; f < t.num_faces(); ++f) {
      out << 'f';
      for (int c = 0; c < 3; ++c) out << ' ' << t.faces(f, c) + 1 << '/' << t.faces(f, c) + 1;
      out << '\n';
    }
  }
  nlohmann::json j;
  j["schema_version"] = kTemplateSchemaVersion;
  j["num_vertices"] = t.num_vertices();
  auto dump_matrix = [](const MatX& m) {
    nlohmann::json rows = nlohmann::json::array();
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
      std::vector<double> row(m.cols());
      for (Eigen::Index c = 0; c < m.cols(); ++c) row[c] = m(r, c);
      rows.push_back(row);
    }
    return rows;
  };
  j["shape_basis"] = dump_matrix(t.shape_basis);
  j["expr_basis"] = dump_matrix(t.expr_basis);
  j["skin_weights"] = dump_matrix(t.skin_weights);
  for (const Joint& jt : t.joints) {
    j["joints"].push_back({{"name", jt.name},
                           {"parent", jt.parent},
                           {"position", {jt.position.x(), jt.position.y(), jt.position.z()}}});
  }
  std::vector<std::string> parts;
  for (Part p : t.face_parts) parts.emplace_back(part_name(p));
  j["face_parts"] = parts;
  std::ofstream out(sidecar);
  if (!out) throw FormatError("cannot write " + sidecar.string());
  out << j.dump();
}

HeadTemplate load_template(const std::filesystem::path& obj, const std::filesystem::path& sidecar) {
  HeadTemplate t;
  std::vector<Vec3> verts;
  std::vector<Vec2> uvs;
  std::vector<Eigen::Vector3i> faces;
  {
    std::ifstream in(obj);
    if (!in) throw FormatError("cannot read " + obj.string());
    std::string line;
    while (std::getline(in, line)) {
      std::istringstream ls(line);
      std::string tag;
      ls >> tag;
      if (tag == "v") {
        Vec3 p;
        ls >> p.x() >> p.y() >> p.z();
        verts.push_back(p);
      } else if (tag == "vt") {
        Vec2 p;
        ls >> p.x() >> p.y();
        uvs.push_back(p);
      } else if (tag == "f") {
        Eigen::Vector3i f;
        for (int c = 0; c < 3; ++c) {
          std::string tok;
          ls >> tok;
          f[c] = std::stoi(tok.substr(0, tok.find('/'))) - 1;
        }
        std::string extra;
        if (ls >> extra) throw FormatError("OBJ: only triangles are supported");
        faces.push_back(f);
      } else if (!tag.empty() && tag[0] != '#') {
        throw FormatError("OBJ: unsupported record '" + tag + "'");
      }
    }
  }
  if (uvs.size() != verts.size()) throw FormatError("OBJ: expected one vt per v");
  t.vertices.resize(verts.size(), 3);
  t.uv.resize(verts.size(), 2);
  for (size_t i = 0; i < verts.size(); ++i) {
    t.vertices.row(i) = verts[i].transpose();
    t.uv.row(i) = uvs[i].transpose();
  }
  t.faces.resize(faces.size(), 3);
  for (size_t i = 0; i < faces.size(); ++i) t.faces.row(i) = faces[i].transpose();

  std::ifstream in(sidecar);
  if (!in) throw FormatError("cannot read " + sidecar.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("template sidecar: ") + e.what());
  }
  if (j.value("schema_version", -1) != kTemplateSchemaVersion)
    throw FormatError("template sidecar: unsupported schema version");
  if (j.at("num_vertices").get<int>() != static_cast<int>(verts.size()))
    throw FormatError("template sidecar: vertex count does not match OBJ");
  auto load_matrix = [](const nlohmann::json& rows, Eigen::Index ncols_if_empty) {
    const Eigen::Index r = rows.size();
    const Eigen::Index c = r > 0 ? static_cast<Eigen::Index>(rows[0].size()) : ncols_if_empty;
    MatX m(r, c);
    for (Eigen::Index i = 0; i < r; ++i) {
      if (static_cast<Eigen::Index>(rows[i].size()) != c) throw FormatError("ragged matrix in sidecar");
      for (Eigen::Index k = 0; k < c; ++k) m(i, k) = rows[i][k].get<double>();
    }
    return m;
  };
  t.shape_basis = load_matrix(j.at("shape_basis"), 0);
  t.expr_basis = load_matrix(j.at("expr_basis"), 0);
  t.skin_weights = load_matrix(j.at("skin_weights"), 0);
  for (const auto& jt : j.at("joints")) {
    Joint joint;
    joint.name = jt.at("name").get<std::string>();
    joint.parent = jt.at("parent").get<int>();
    const auto pos = jt.at("position").get<std::vector<double>>();
    if (pos.size() != 3) throw FormatError("joint position must have 3 entries");
    joint.position = Vec3(pos[0], pos[1], pos[2]);
    t.joints.push_back(joint);
  }
  for (const auto& name : j.at("face_parts")) t.face_parts.push_back(part_from_name(name.get<std::string>()));
  try {
    t.validate();
  } catch (const DimensionError& e) {
    throw FormatError(std::string("loaded template is invalid: ") + e.what());
  }
  return t;
}

}  // namespace gavatar::headmodel
