#pragma once

// Tape nodes wrapping the head model, binding transform, dynamic signal and
// rasterizer with their handwritten adjoints.

#include "gavatar/diff.hpp"
#include "gavatar/headmodel.hpp"
#include "gavatar/raster.hpp"
#include "gavatar/splat.hpp"

namespace gavatar::graph {

using diff::Tape;
using diff::Var;

/// Mesh parameters as tape variables: beta, theta, phi are 1 x d rows; delta is V x 3.
struct HeadVars {
  Var beta, theta, phi, delta;
};

HeadVars head_constants(Tape& t, const headmodel::HeadParams& p);
headmodel::HeadParams head_values(const Tape& t, const HeadVars& h);

/// Posed vertices (V x 3).
Var pose(Tape& t, const headmodel::HeadTemplate& tmpl, const HeadVars& h);

/// Face frames of a V x 3 vertex variable: R as F x 9 (row-major 3x3 per row), s as F x 1, T as F x 3.
struct FrameVars {
  Var R, s, T;
};
FrameVars frames(Tape& t, Var vertices, const MatX3i& faces);

std::vector<headmodel::TriangleFrame> frames_value(const Tape& t, const FrameVars& f);

/// Global mean (n x 3), rotation matrix (n x 9 row-major) and scale (n x 3).
struct BoundVars {
  Var mu, rotmat, scale;
};
BoundVars bind(Tape& t, Var mu_local, Var rot_local, Var scale_local, const FrameVars& f,
               std::span<const int> parent);

/// Per-point dynamic signal (n x 3).
Var dynamic_signal(Tape& t, Var mu_local, const FrameVars& posed, const FrameVars& neutral,
                   std::span<const int> parent);

/// Rasterized images as (H*W) x C matrices: rgb (3), feat (C-3) and alpha (1).
struct ImageVars {
  Var rgb, feat, alpha;
};
ImageVars rasterize(Tape& t, const BoundVars& g, Var opacity, Var h, const raster::Camera& cam,
                    const raster::RasterSettings& settings = {});

/// ARAP energy of `vertices` against a constant reference shape.
Var arap(Tape& t, Var vertices, const headmodel::Vertices& reference, const MatX3i& faces);

}  // namespace gavatar::graph
