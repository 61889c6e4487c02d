#pragma once

// Parametric blendshape head mesh: shape/expression blendshapes, linear blend
// skinning over a small joint hierarchy, per-face frames used to bind Gaussian
// primitives, semantic part labels and the as-rigid-as-possible energy.

#include "gavatar/common.hpp"

#include <array>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

namespace gavatar::headmodel {

enum class Part : std::uint8_t {
  Forehead = 1,
  Nose = 2,
  Eye = 3,
  Teeth = 4,
  Lip = 5,
  Ear = 6,
  Hair = 7,
  Boundary = 8,
  Neck = 9,
  OtherFace = 10,
  Other = 11,
};

inline constexpr int kNumParts = 11;

/// Zero-based index of a part, for table lookups.
inline int part_index(Part p) { return static_cast<int>(p) - 1; }
inline Part part_from_index(int i) { return static_cast<Part>(i + 1); }
std::string_view part_name(Part p);
Part part_from_name(std::string_view name);

inline bool is_mouth(Part p) { return p == Part::Lip || p == Part::Teeth; }

struct Joint {
  std::string name;
  Vec3 position = Vec3::Zero();  // rest position, meters
  int parent = -1;               // parents precede children
};

struct HeadTemplate {
  MatX3 vertices;     // V x 3, meters
  MatX3i faces;       // T x 3
  MatX2 uv;           // V x 2 in [0,1]^2
  MatX shape_basis;   // 3V x dim(beta); row 3*v + axis
  MatX expr_basis;    // 3V x dim(phi)
  std::vector<Joint> joints;
  MatX skin_weights;  // V x J, rows sum to one
  std::vector<Part> face_parts;  // T

  int num_vertices() const { return static_cast<int>(vertices.rows()); }
  int num_faces() const { return static_cast<int>(faces.rows()); }
  int num_joints() const { return static_cast<int>(joints.size()); }
  int shape_dim() const { return static_cast<int>(shape_basis.cols()); }
  int expr_dim() const { return static_cast<int>(expr_basis.cols()); }

  /// Throws DimensionError describing the first violated invariant.
  void validate() const;
};

/// Shape beta, per-joint axis-angle theta (3J, radians), expression phi and
/// per-vertex static offsets delta (meters).
struct HeadParams {
  VecX beta;
  VecX theta;
  VecX phi;
  MatX3 delta;

  static HeadParams zeros(const HeadTemplate& t);
  /// Same identity (beta, delta) with pose and expression reset.
  HeadParams neutral() const;
};

using Vertices = MatX3;

struct TriangleFrame {
  Mat3 R = Mat3::Identity();
  double s = 1.0;
  Vec3 T = Vec3::Zero();
};

struct FrameGrad {
  Mat3 R = Mat3::Zero();
  double s = 0.0;
  Vec3 T = Vec3::Zero();
};

struct ParamsGrad {
  VecX beta;
  VecX theta;
  VecX phi;
  MatX3 delta;
};

void check_params(const HeadTemplate& t, const HeadParams& p);

/// Unposed vertices: template + shape + expression blendshapes + offsets.
Vertices rest_vertices(const HeadTemplate& t, const HeadParams& p);

Vertices pose_mesh(const HeadTemplate& t, const HeadParams& p);

/// Vector-Jacobian product of pose_mesh.
ParamsGrad pose_mesh_backward(const HeadTemplate& t, const HeadParams& p, const Vertices& grad_posed);

/// World transforms (rotation, translation) of every joint for pose theta.
std::vector<std::pair<Mat3, Vec3>> joint_transforms(const HeadTemplate& t, const VecX& theta);

Mat3 rodrigues(const Vec3& axis_angle);
/// d R / d v_i for i = 0..2.
std::array<Mat3, 3> rodrigues_jacobian(const Vec3& axis_angle);

std::vector<TriangleFrame> triangle_frames(const Vertices& posed, const MatX3i& faces);
/// Accumulates dL/dvertices into grad_posed (which must be sized V x 3).
void triangle_frames_backward(const Vertices& posed, const MatX3i& faces,
                              std::span<const FrameGrad> grads, Vertices& grad_posed);

/// Uniform-weight cell ARAP energy of `posed` relative to `reference`.
double arap_energy(const Vertices& posed, const Vertices& reference, const MatX3i& faces,
                   Vertices* grad_posed = nullptr);

Part part_of_face(const HeadTemplate& t, int face_id);

struct TemplateOptions {
  int rings = 28;     // latitude rows
  int segments = 36;  // longitude columns
  int shape_dim = 10;
  int expr_dim = 8;
};

/// Procedural head + neck surface with a lat-long UV atlas, smooth blendshapes,
/// global/neck/jaw joints and procedurally assigned part labels.
HeadTemplate make_synthetic_template(const TemplateOptions& opts = {});

/// Surface (latitude, longitude) in radians of a synthetic-template UV coordinate; neck rows
/// report the bottom head latitude. Longitude 0 faces +z.
Vec2 synthetic_lat_lon(const Vec2& uv);

/// Jaw joint index in synthetic templates.
inline constexpr int kJawJoint = 2;
inline constexpr int kNeckJoint = 1;

// OBJ subset (v/vt/f) plus a JSON sidecar carrying bases, joints, weights and labels.
void save_template(const HeadTemplate& t, const std::filesystem::path& obj,
                   const std::filesystem::path& sidecar);
HeadTemplate load_template(const std::filesystem::path& obj, const std::filesystem::path& sidecar);

}  // namespace gavatar::headmodel
