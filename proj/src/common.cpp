#include "gavatar/common.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <thread>

namespace gavatar {

Image slice_channels(const Image& img, int first, int count) {
  require(first >= 0 && count >= 0 && first + count <= img.channels, "slice_channels: range out of bounds");
  Image out(count, img.height, img.width);
  std::copy_n(img.data.begin() + first * img.plane(), count * img.plane(), out.data.begin());
  return out;
}

Image concat_channels(const std::vector<const Image*>& parts) {
  require(!parts.empty(), "concat_channels: no inputs");
  int c = 0;
  for (const Image* p : parts) {
    require(p->height == parts[0]->height && p->width == parts[0]->width,
            "concat_channels: resolution mismatch");
    c += p->channels;
  }
  Image out(c, parts[0]->height, parts[0]->width);
  auto it = out.data.begin();
  for (const Image* p : parts) it = std::copy(p->data.begin(), p->data.end(), it);
  return out;
}

Mat3 quat_to_matrix(const Vec4& q_raw) {
  const Vec4 q = q_raw / q_raw.norm();
  const double w = q[0], x = q[1], y = q[2], z = q[3];
  Mat3 R;
  R << 1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
      2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
      2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y);
  return R;
}

Vec4 quat_to_matrix_backward(const Vec4& q_raw, const Mat3& d) {
  const double len = q_raw.norm();
  const Vec4 q = q_raw / len;
  const double w = q[0], x = q[1], y = q[2], z = q[3];
  Vec4 dq;
  dq[0] = 2 * (-z * d(0, 1) + y * d(0, 2) + z * d(1, 0) - x * d(1, 2) - y * d(2, 0) + x * d(2, 1));
  dq[1] = 2 * (y * d(0, 1) + z * d(0, 2) + y * d(1, 0) - 2 * x * d(1, 1) - w * d(1, 2) +
               z * d(2, 0) + w * d(2, 1) - 2 * x * d(2, 2));
  dq[2] = 2 * (-2 * y * d(0, 0) + x * d(0, 1) + w * d(0, 2) + x * d(1, 0) + z * d(1, 2) -
               w * d(2, 0) + z * d(2, 1) - 2 * y * d(2, 2));
  dq[3] = 2 * (-2 * z * d(0, 0) - w * d(0, 1) + x * d(0, 2) + w * d(1, 0) - 2 * z * d(1, 1) +
               y * d(1, 2) + x * d(2, 0) + y * d(2, 1));
  return (dq - q * q.dot(dq)) / len;
}

Vec4 matrix_to_quat(const Mat3& R) {
  Vec4 q;
  const double tr = R.trace();
  if (tr > 0) {
    const double s = std::sqrt(tr + 1.0) * 2;
    q << 0.25 * s, (R(2, 1) - R(1, 2)) / s, (R(0, 2) - R(2, 0)) / s, (R(1, 0) - R(0, 1)) / s;
  } else if (R(0, 0) > R(1, 1) && R(0, 0) > R(2, 2)) {
    const double s = std::sqrt(1.0 + R(0, 0) - R(1, 1) - R(2, 2)) * 2;
    q << (R(2, 1) - R(1, 2)) / s, 0.25 * s, (R(0, 1) + R(1, 0)) / s, (R(0, 2) + R(2, 0)) / s;
  } else if (R(1, 1) > R(2, 2)) {
    const double s = std::sqrt(1.0 + R(1, 1) - R(0, 0) - R(2, 2)) * 2;
    q << (R(0, 2) - R(2, 0)) / s, (R(0, 1) + R(1, 0)) / s, 0.25 * s, (R(1, 2) + R(2, 1)) / s;
  } else {
    const double s = std::sqrt(1.0 + R(2, 2) - R(0, 0) - R(1, 1)) * 2;
    q << (R(1, 0) - R(0, 1)) / s, (R(0, 2) + R(2, 0)) / s, (R(1, 2) + R(2, 1)) / s, 0.25 * s;
  }
  if (q[0] < 0) q = -q;
  return q / q.norm();
}

Vec4 quat_mul(const Vec4& a, const Vec4& b) {
  return {a[0] * b[0] - a[1] * b[1] - a[2] * b[2] - a[3] * b[3],
          a[0] * b[1] + a[1] * b[0] + a[2] * b[3] - a[3] * b[2],
          a[0] * b[2] - a[1] * b[3] + a[2] * b[0] + a[3] * b[1],
          a[0] * b[3] + a[1] * b[2] - a[2] * b[1] + a[3] * b[0]};
}

Mat3 skew(const Vec3& v) {
  Mat3 m;
  m << 0, -v.z(), v.y(), v.z(), 0, -v.x(), -v.y(), v.x(), 0;
  return m;
}

int thread_count() {
  if (const char* env = std::getenv("GAVATAR_THREADS")) {
    const int n = std::atoi(env);
    if (n > 0) return n;
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

}  // namespace gavatar
