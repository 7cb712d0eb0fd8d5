#pragma once

#include <array>
#include <cmath>

namespace etg {

struct Vec3 {
  double x = 0, y = 0, z = 0;

  Vec3() = default;
  Vec3(double x_, double y_, double z_) : x(x_), y(y_), z(z_) {}

  Vec3 operator+(const Vec3& o) const { return {x + o.x, y + o.y, z + o.z}; }
  Vec3 operator-(const Vec3& o) const { return {x - o.x, y - o.y, z - o.z}; }
  Vec3 operator*(double s) const { return {x * s, y * s, z * s}; }
  Vec3 operator-() const { return {-x, -y, -z}; }
  Vec3& operator+=(const Vec3& o) {
    x += o.x;
    y += o.y;
    z += o.z;
    return *this;
  }
  double dot(const Vec3& o) const { return x * o.x + y * o.y + z * o.z; }
  Vec3 cross(const Vec3& o) const {
    return {y * o.z - z * o.y, z * o.x - x * o.z, x * o.y - y * o.x};
  }
  double norm() const { return std::sqrt(x * x + y * y + z * z); }
  Vec3 normalized() const {
    const double n = norm();
    return n > 0 ? Vec3{x / n, y / n, z / n} : Vec3{};
  }
  double operator[](int i) const { return i == 0 ? x : (i == 1 ? y : z); }
};

inline Vec3 operator*(double s, const Vec3& v) { return v * s; }

// Row-major 3x3.
struct Mat3 {
  std::array<double, 9> m{};

  static Mat3 identity() {
    Mat3 r;
    r.m = {1, 0, 0, 0, 1, 0, 0, 0, 1};
    return r;
  }
  static Mat3 from_cols(const Vec3& a, const Vec3& b, const Vec3& c) {
    Mat3 r;
    r.m = {a.x, b.x, c.x, a.y, b.y, c.y, a.z, b.z, c.z};
    return r;
  }
  double operator()(int i, int j) const { return m[i * 3 + j]; }
  double& operator()(int i, int j) { return m[i * 3 + j]; }

  Vec3 operator*(const Vec3& v) const {
    return {m[0] * v.x + m[1] * v.y + m[2] * v.z,
            m[3] * v.x + m[4] * v.y + m[5] * v.z,
            m[6] * v.x + m[7] * v.y + m[8] * v.z};
  }
  Mat3 operator*(const Mat3& o) const {
    Mat3 r;
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j) {
        double s = 0;
        for (int k = 0; k < 3; ++k) s += (*this)(i, k) * o(k, j);
        r(i, j) = s;
      }
    return r;
  }
  Mat3 operator+(const Mat3& o) const {
    Mat3 r;
    for (int i = 0; i < 9; ++i) r.m[i] = m[i] + o.m[i];
    return r;
  }
  Mat3 operator*(double s) const {
    Mat3 r;
    for (int i = 0; i < 9; ++i) r.m[i] = m[i] * s;
    return r;
  }
  Mat3 transposed() const {
    Mat3 r;
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j) r(i, j) = (*this)(j, i);
    return r;
  }
  Vec3 transposed_mul(const Vec3& v) const {
    return {m[0] * v.x + m[3] * v.y + m[6] * v.z,
            m[1] * v.x + m[4] * v.y + m[7] * v.z,
            m[2] * v.x + m[5] * v.y + m[8] * v.z};
  }
  double det() const {
    return m[0] * (m[4] * m[8] - m[5] * m[7]) -
           m[1] * (m[3] * m[8] - m[5] * m[6]) +
           m[2] * (m[3] * m[7] - m[4] * m[6]);
  }
};

inline Mat3 skew(const Vec3& v) {
  Mat3 r;
  r.m = {0, -v.z, v.y, v.z, 0, -v.x, -v.y, v.x, 0};
  return r;
}

inline Mat3 outer(const Vec3& a, const Vec3& b) {
  Mat3 r;
  r.m = {a.x * b.x, a.x * b.y, a.x * b.z, a.y * b.x, a.y * b.y,
         a.y * b.z, a.z * b.x, a.z * b.y, a.z * b.z};
  return r;
}

// Unit quaternion (w, x, y, z).
struct Quat {
  double w = 1, x = 0, y = 0, z = 0;

  Quat() = default;
  Quat(double w_, double x_, double y_, double z_) : w(w_), x(x_), y(y_), z(z_) {}

  static Quat identity() { return {1, 0, 0, 0}; }

  double norm() const { return std::sqrt(w * w + x * x + y * y + z * z); }
  Quat normalized() const {
    const double n = norm();
    return {w / n, x / n, y / n, z / n};
  }
  Quat conj() const { return {w, -x, -y, -z}; }

  // Hamilton product: this ⊗ o
  Quat operator*(const Quat& o) const {
    return {w * o.w - x * o.x - y * o.y - z * o.z,
            w * o.x + x * o.w + y * o.z - z * o.y,
            w * o.y - x * o.z + y * o.w + z * o.x,
            w * o.z + x * o.y - y * o.x + z * o.w};
  }

  double operator[](int i) const {
    return i == 0 ? w : (i == 1 ? x : (i == 2 ? y : z));
  }
};

// Rotation matrix of a unit quaternion.
inline Mat3 quat_to_mat(const Quat& q) {
  const double w = q.w, x = q.x, y = q.y, z = q.z;
  Mat3 r;
  r.m = {1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
         2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
         2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)};
  return r;
}

// d(quat_to_mat)/dq_k for a unit quaternion, k in {w,x,y,z}.
inline Mat3 quat_to_mat_jac(const Quat& q, int k) {
  const double w = q.w, x = q.x, y = q.y, z = q.z;
  Mat3 r;
  switch (k) {
    case 0:
      r.m = {0, -2 * z, 2 * y, 2 * z, 0, -2 * x, -2 * y, 2 * x, 0};
      break;
    case 1:
      r.m = {0, 2 * y, 2 * z, 2 * y, -4 * x, -2 * w, 2 * z, 2 * w, -4 * x};
      break;
    case 2:
      r.m = {-4 * y, 2 * x, 2 * w, 2 * x, 0, 2 * z, -2 * w, 2 * z, -4 * y};
      break;
    default:
      r.m = {-4 * z, -2 * w, 2 * x, 2 * w, -4 * z, 2 * y, 2 * x, 2 * y, 0};
      break;
  }
  return r;
}

// Axis-angle (norm = angle) to rotation matrix. Total function; the zero
// vector maps to the identity. Stable small-angle series below theta^2 = 1e-12.
Mat3 rodrigues(const Vec3& r);

// dR/dr_i, i in {0,1,2}, consistent with rodrigues() including the
// small-angle branch.
std::array<Mat3, 3> rodrigues_jacobian(const Vec3& r);

// Rotation matrix to quaternion, Shepperd-style branch on the largest
// component. Returns a unit quaternion with nonnegative w... not enforced;
// branch choice only. Optionally fills d q / d m (4 rows x 9 matrix entries).
Quat mat_to_quat(const Mat3& m, std::array<std::array<double, 9>, 4>* jac = nullptr);

// Quaternion product Jacobians: d(a⊗b)/da and d(a⊗b)/db as 4x4 row-major.
void quat_mul_jacobians(const Quat& a, const Quat& b,
                        std::array<double, 16>& dda,
                        std::array<double, 16>& ddb);

// d(q/|q|)/dq as 4x4 row-major.
void quat_normalize_jacobian(const Quat& q, std::array<double, 16>& j);

}  // namespace etg
