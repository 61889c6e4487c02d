#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace gavatar {

using Vec2 = Eigen::Vector2d;
using Vec3 = Eigen::Vector3d;
using Vec4 = Eigen::Vector4d;  // quaternions are stored (w, x, y, z)
using Mat2 = Eigen::Matrix2d;
using Mat3 = Eigen::Matrix3d;
using Mat4 = Eigen::Matrix4d;
using MatX = Eigen::MatrixXd;
using VecX = Eigen::VectorXd;
using MatX3 = Eigen::Matrix<double, Eigen::Dynamic, 3, Eigen::RowMajor>;
using MatX3i = Eigen::Matrix<int, Eigen::Dynamic, 3, Eigen::RowMajor>;
using MatX2 = Eigen::Matrix<double, Eigen::Dynamic, 2, Eigen::RowMajor>;
using MatX4 = Eigen::Matrix<double, Eigen::Dynamic, 4, Eigen::RowMajor>;
using MatX9 = Eigen::Matrix<double, Eigen::Dynamic, 9, Eigen::RowMajor>;

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class DimensionError : public Error {
 public:
  using Error::Error;
};

class DegenerateFaceError : public Error {
 public:
  DegenerateFaceError(int face, const std::string& msg) : Error(msg), face_(face) {}
  int face() const { return face_; }

 private:
  int face_;
};

class NumericError : public Error {
 public:
  using Error::Error;
};

class PhaseError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class FormatError : public Error {
 public:
  using Error::Error;
};

inline void require(bool cond, const std::string& msg) {
  if (!cond) throw DimensionError(msg);
}

/// Planar multi-channel image, channel-major (C x H x W).
struct Image {
  int channels = 0;
  int height = 0;
  int width = 0;
  std::vector<double> data;

  Image() = default;
  Image(int c, int h, int w, double fill = 0.0)
      : channels(c), height(h), width(w), data(static_cast<size_t>(c) * h * w, fill) {}

  size_t plane() const { return static_cast<size_t>(height) * width; }
  size_t size() const { return data.size(); }
  double& at(int c, int y, int x) { return data[c * plane() + static_cast<size_t>(y) * width + x]; }
  double at(int c, int y, int x) const {
    return data[c * plane() + static_cast<size_t>(y) * width + x];
  }
  std::span<double> channel(int c) { return {data.data() + c * plane(), plane()}; }
  std::span<const double> channel(int c) const { return {data.data() + c * plane(), plane()}; }
  bool same_shape(const Image& o) const {
    return channels == o.channels && height == o.height && width == o.width;
  }
  Eigen::Map<Eigen::VectorXd> vec() { return {data.data(), static_cast<Eigen::Index>(data.size())}; }
  Eigen::Map<const Eigen::VectorXd> vec() const {
    return {data.data(), static_cast<Eigen::Index>(data.size())};
  }
};

inline void require_same_shape(const Image& a, const Image& b, const char* what) {
  if (!a.same_shape(b)) {
    throw DimensionError(std::string(what) + ": image shape mismatch (" +
                         std::to_string(a.channels) + "x" + std::to_string(a.height) + "x" +
                         std::to_string(a.width) + " vs " + std::to_string(b.channels) + "x" +
                         std::to_string(b.height) + "x" + std::to_string(b.width) + ")");
  }
}

/// Copy a channel range [first, first+count) into a new image.
Image slice_channels(const Image& img, int first, int count);
/// Stack images along the channel axis; all must share H x W.
Image concat_channels(const std::vector<const Image*>& parts);

// Quaternion helpers, (w, x, y, z) convention.
Mat3 quat_to_matrix(const Vec4& q);  // q need not be normalized; it is normalized first
Vec4 matrix_to_quat(const Mat3& R);
Vec4 quat_mul(const Vec4& a, const Vec4& b);
/// Adjoint of quat_to_matrix: given dL/dR returns dL/dq for the unnormalized input q.
Vec4 quat_to_matrix_backward(const Vec4& q, const Mat3& dR);

Mat3 skew(const Vec3& v);

/// Number of worker threads, from GAVATAR_THREADS (defaults to hardware concurrency).
int thread_count();

}  // namespace gavatar
