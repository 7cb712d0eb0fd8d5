#include "etg/geometry.h"

namespace etg {

Mat3 rodrigues(const Vec3& r) {
  const double t2 = r.dot(r);
  double a, b;
  if (t2 < 1e-12) {
    a = 1.0 - t2 / 6.0 + t2 * t2 / 120.0;
    b = 0.5 - t2 / 24.0 + t2 * t2 / 720.0;
  } else {
    const double t = std::sqrt(t2);
    a = std::sin(t) / t;
    b = (1.0 - std::cos(t)) / t2;
  }
  const Mat3 k = skew(r);
  return Mat3::identity() + k * a + (k * k) * b;
}

std::array<Mat3, 3> rodrigues_jacobian(const Vec3& r) {
  const double t2 = r.dot(r);
  double a, b, da_dt2, db_dt2;  // d a / d(theta^2) form keeps the zero limit finite
  if (t2 < 1e-12) {
    a = 1.0 - t2 / 6.0 + t2 * t2 / 120.0;
    b = 0.5 - t2 / 24.0 + t2 * t2 / 720.0;
    da_dt2 = -1.0 / 6.0 + t2 / 60.0;
    db_dt2 = -1.0 / 24.0 + t2 / 360.0;
  } else {
    const double t = std::sqrt(t2);
    const double s = std::sin(t), c = std::cos(t);
    a = s / t;
    b = (1.0 - c) / t2;
    // da/dt = (t c - s)/t^2, dt/d(t2) = 1/(2t)
    da_dt2 = (t * c - s) / (2.0 * t2 * t);
    db_dt2 = (t * s - 2.0 * (1.0 - c)) / (2.0 * t2 * t2);
  }
  const Mat3 k = skew(r);
  const Mat3 k2 = k * k;
  std::array<Mat3, 3> out;
  const Vec3 axes[3] = {{1, 0, 0}, {0, 1, 0}, {0, 0, 1}};
  for (int i = 0; i < 3; ++i) {
    const double ri = r[i];
    const double da = 2.0 * ri * da_dt2;  // d(theta^2)/dr_i = 2 r_i
    const double db = 2.0 * ri * db_dt2;
    const Mat3 ki = skew(axes[i]);
    out[i] = k * da + ki * a + k2 * db + (ki * k + k * ki) * b;
  }
  return out;
}

Quat mat_to_quat(const Mat3& m, std::array<std::array<double, 9>, 4>* jac) {
  const double tr = m(0, 0) + m(1, 1) + m(2, 2);
  int branch;
  if (tr > m(0, 0) && tr > m(1, 1) && tr > m(2, 2))
    branch = 0;
  else if (m(0, 0) >= m(1, 1) && m(0, 0) >= m(2, 2))
    branch = 1;
  else if (m(1, 1) >= m(2, 2))
    branch = 2;
  else
    branch = 3;

  // t = 1 + sum(tcoef .* m); component c = (sum(ncoef_c .* m)) / (2u) except
  // the pivot which is u/2. Entry order is row-major m00..m22.
  static const double tcoefs[4][9] = {
      {1, 0, 0, 0, 1, 0, 0, 0, 1},
      {1, 0, 0, 0, -1, 0, 0, 0, -1},
      {-1, 0, 0, 0, 1, 0, 0, 0, -1},
      {-1, 0, 0, 0, -1, 0, 0, 0, 1}};
  // ncoef per quaternion component (w,x,y,z); pivot row unused.
  static const double ncoefs[4][4][9] = {
      // branch 0: pivot w; x=(m21-m12), y=(m02-m20), z=(m10-m01)
      {{0, 0, 0, 0, 0, 0, 0, 0, 0},
       {0, 0, 0, 0, 0, -1, 0, 1, 0},
       {0, 0, 1, 0, 0, 0, -1, 0, 0},
       {0, -1, 0, 1, 0, 0, 0, 0, 0}},
      // branch 1: pivot x; w=(m21-m12), y=(m01+m10), z=(m02+m20)
      {{0, 0, 0, 0, 0, -1, 0, 1, 0},
       {0, 0, 0, 0, 0, 0, 0, 0, 0},
       {0, 1, 0, 1, 0, 0, 0, 0, 0},
       {0, 0, 1, 0, 0, 0, 1, 0, 0}},
      // branch 2: pivot y; w=(m02-m20), x=(m01+m10), z=(m12+m21)
      {{0, 0, 1, 0, 0, 0, -1, 0, 0},
       {0, 1, 0, 1, 0, 0, 0, 0, 0},
       {0, 0, 0, 0, 0, 0, 0, 0, 0},
       {0, 0, 0, 0, 0, 1, 0, 1, 0}},
      // branch 3: pivot z; w=(m10-m01), x=(m02+m20), y=(m12+m21)
      {{0, -1, 0, 1, 0, 0, 0, 0, 0},
       {0, 0, 1, 0, 0, 0, 1, 0, 0},
       {0, 0, 0, 0, 0, 1, 0, 1, 0},
       {0, 0, 0, 0, 0, 0, 0, 0, 0}}};

  const double* tc = tcoefs[branch];
  double t = 1.0;
  for (int e = 0; e < 9; ++e) t += tc[e] * m.m[e];
  const double u = std::sqrt(t);
  double q[4];
  double n[4] = {0, 0, 0, 0};
  for (int c = 0; c < 4; ++c) {
    if (c == branch) {
      q[c] = 0.5 * u;
    } else {
      for (int e = 0; e < 9; ++e) n[c] += ncoefs[branch][c][e] * m.m[e];
      q[c] = n[c] / (2.0 * u);
    }
  }
  if (jac) {
    for (int c = 0; c < 4; ++c)
      for (int e = 0; e < 9; ++e) {
        if (c == branch) {
          (*jac)[c][e] = tc[e] / (4.0 * u);
        } else {
          (*jac)[c][e] = ncoefs[branch][c][e] / (2.0 * u) -
                         n[c] * tc[e] / (4.0 * u * u * u);
        }
      }
  }
  return Quat{q[0], q[1], q[2], q[3]};
}

void quat_mul_jacobians(const Quat& a, const Quat& b,
                        std::array<double, 16>& dda,
                        std::array<double, 16>& ddb) {
  dda = {b.w, -b.x, -b.y, -b.z,
         b.x, b.w,  b.z,  -b.y,
         b.y, -b.z, b.w,  b.x,
         b.z, b.y,  -b.x, b.w};
  ddb = {a.w, -a.x, -a.y, -a.z,
         a.x, a.w,  -a.z, a.y,
         a.y, a.z,  a.w,  -a.x,
         a.z, -a.y, a.x,  a.w};
}

void quat_normalize_jacobian(const Quat& q, std::array<double, 16>& j) {
  const double n = q.norm();
  const Quat qn = q.normalized();
  const double qv[4] = {qn.w, qn.x, qn.y, qn.z};
  for (int i = 0; i < 4; ++i)
    for (int k = 0; k < 4; ++k)
      j[i * 4 + k] = ((i == k ? 1.0 : 0.0) - qv[i] * qv[k]) / n;
}

}  // namespace etg
