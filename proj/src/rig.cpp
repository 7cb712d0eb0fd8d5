#include "etg/rig.h"

#include <algorithm>
#include <cmath>
#include <map>
#include <memory>
#include <set>
#include <sstream>

#include "etg/common.h"
#include "etg/io.h"
#include "etg/rng.h"

namespace etg {

// ---------------------------------------------------------------------------
// GaussianCloud

size_t GaussianCloud::mouth_count() const {
  size_t n = 0;
  for (uint8_t m : mouth_mask) n += m != 0;
  return n;
}

LocalGaussian GaussianCloud::gaussian(size_t i) const {
  LocalGaussian g;
  g.mu_l = {mu_l[i * 3], mu_l[i * 3 + 1], mu_l[i * 3 + 2]};
  g.rot_l = {rot_l[i * 4], rot_l[i * 4 + 1], rot_l[i * 4 + 2], rot_l[i * 4 + 3]};
  g.scale_l = {scale_l[i * 3], scale_l[i * 3 + 1], scale_l[i * 3 + 2]};
  g.alpha_l = alpha_l[i];
  const size_t bands = sh_bands();
  g.sh_dc = {sh_l[(i * 3 + 0) * bands], sh_l[(i * 3 + 1) * bands],
             sh_l[(i * 3 + 2) * bands]};
  g.parent_tri = parent_tri[i];
  g.bary = {bary[i * 3], bary[i * 3 + 1], bary[i * 3 + 2]};
  return g;
}

void GaussianCloud::validate(size_t tri_count) const {
  const size_t m = size();
  if (mu_l.ndim() != 2 || mu_l.dim(0) != m || mu_l.dim(1) != 3)
    throw ValidationError("cloud: mu_l must be Mx3");
  if (rot_l.ndim() != 2 || rot_l.dim(0) != m || rot_l.dim(1) != 4)
    throw ValidationError("cloud: rot_l must be Mx4");
  if (scale_l.ndim() != 2 || scale_l.dim(0) != m || scale_l.dim(1) != 3)
    throw ValidationError("cloud: scale_l must be Mx3");
  if (alpha_l.size() != m) throw ValidationError("cloud: alpha_l must be M");
  if (sh_l.ndim() != 3 || sh_l.dim(0) != m || sh_l.dim(1) != 3)
    throw ValidationError("cloud: sh_l must be Mx3xB");
  if (bary.ndim() != 2 || bary.dim(0) != m || bary.dim(1) != 3)
    throw ValidationError("cloud: bary must be Mx3");
  if (mouth_mask.size() != m)
    throw ValidationError("cloud: mouth_mask length mismatch");
  for (size_t i = 0; i < m; ++i) {
    if (parent_tri[i] >= tri_count) {
      std::ostringstream os;
      os << "cloud: gaussian " << i << " has parent triangle " << parent_tri[i]
         << " out of " << tri_count;
      throw ValidationError(os.str());
    }
    const double b0 = bary[i * 3], b1 = bary[i * 3 + 1], b2 = bary[i * 3 + 2];
    if (b0 < -1e-9 || b1 < -1e-9 || b2 < -1e-9 ||
        std::fabs(b0 + b1 + b2 - 1.0) > 1e-9) {
      std::ostringstream os;
      os << "cloud: gaussian " << i << " barycentric weights invalid";
      throw ValidationError(os.str());
    }
    const double qn = std::sqrt(
        rot_l[i * 4] * rot_l[i * 4] + rot_l[i * 4 + 1] * rot_l[i * 4 + 1] +
        rot_l[i * 4 + 2] * rot_l[i * 4 + 2] + rot_l[i * 4 + 3] * rot_l[i * 4 + 3]);
    if (std::fabs(qn - 1.0) > 1e-9) {
      std::ostringstream os;
      os << "cloud: gaussian " << i << " quaternion norm " << qn;
      throw ValidationError(os.str());
    }
    for (int c = 0; c < 3; ++c)
      if (!(scale_l[i * 3 + c] > 0.0)) {
        std::ostringstream os;
        os << "cloud: gaussian " << i << " nonpositive scale";
        throw ValidationError(os.str());
      }
    if (alpha_l[i] < 0.0 || alpha_l[i] > 1.0) {
      std::ostringstream os;
      os << "cloud: gaussian " << i << " opacity outside [0,1]";
      throw ValidationError(os.str());
    }
  }
}

GlobalGaussian GlobalCloud::gaussian(size_t i) const {
  GlobalGaussian g;
  g.mu = {mu[i * 3], mu[i * 3 + 1], mu[i * 3 + 2]};
  g.rot = {rot[i * 4], rot[i * 4 + 1], rot[i * 4 + 2], rot[i * 4 + 3]};
  g.scale = {scale[i * 3], scale[i * 3 + 1], scale[i * 3 + 2]};
  g.alpha = alpha[i];
  const size_t bands = sh.dim(2);
  g.sh_dc = {sh[(i * 3 + 0) * bands], sh[(i * 3 + 1) * bands],
             sh[(i * 3 + 2) * bands]};
  return g;
}

// ---------------------------------------------------------------------------
// sampling

GaussianCloud sample_bindings(const Mesh& mesh, size_t total, uint64_t seed) {
  const size_t tris = mesh.tri_count();
  if (tris == 0) throw ValidationError("sample_bindings: mesh has no faces");
  if (total < tris) {
    std::ostringstream os;
    os << "sample_bindings: requested " << total << " Gaussians for " << tris
       << " triangles (need at least one per triangle)";
    throw ValidationError(os.str());
  }
  const size_t base = total / tris, extra = total % tris;

  // surface area for the initial scale: mean spacing of `total` samples
  double area = 0.0;
  for (size_t t = 0; t < tris; ++t) {
    const uint32_t* f = mesh.faces->data() + t * 3;
    const Vec3 a = mesh.vertex(f[0]), b = mesh.vertex(f[1]),
               c = mesh.vertex(f[2]);
    area += 0.5 * (b - a).cross(c - a).norm();
  }
  const double spacing = std::sqrt(area / double(total));

  GaussianCloud cloud;
  cloud.mu_l = Tensor({total, 3});
  cloud.rot_l = Tensor({total, 4});
  cloud.scale_l = Tensor({total, 3});
  cloud.alpha_l = Tensor({total});
  cloud.sh_l = Tensor({total, 3, 1});
  cloud.bary = Tensor({total, 3});
  cloud.parent_tri.resize(total);
  cloud.mouth_mask.assign(total, 0);

  Rng rng(seed);
  size_t idx = 0;
  for (size_t t = 0; t < tris; ++t) {
    const size_t count = base + (t < extra ? 1 : 0);
    const TriangleFrame frame = compute_triangle_frame(mesh, t);
    const double local_scale = spacing / frame.k;
    for (size_t s = 0; s < count; ++s, ++idx) {
      const double r1 = rng.uniform(), r2 = rng.uniform();
      const double sq = std::sqrt(r1);
      const double w0 = 1.0 - sq, w1 = sq * (1.0 - r2), w2 = sq * r2;
      cloud.parent_tri[idx] = uint32_t(t);
      cloud.bary[idx * 3] = w0;
      cloud.bary[idx * 3 + 1] = w1;
      cloud.bary[idx * 3 + 2] = w2;
      cloud.rot_l[idx * 4] = 1.0;  // identity quaternion
      for (int c = 0; c < 3; ++c) cloud.scale_l[idx * 3 + c] = local_scale;
      cloud.alpha_l[idx] = 0.5;
      for (int c = 0; c < 3; ++c) cloud.sh_l[idx * 3 + c] = 0.5;  // gray DC
    }
  }
  return cloud;
}

// ---------------------------------------------------------------------------
// triangle frames

namespace {

struct FrameFwd {
  Vec3 a, b, c;
  Vec3 u, w;          // b - a, c - a
  double ulen = 0;
  Vec3 e1, e2, n;
  Vec3 nvec;
  double nlen = 0;
  Vec3 hvec;
  double h = 0;
  Mat3 R;
  double k = 0;
  Vec3 centroid;
};

FrameFwd frame_forward(const Vec3& a, const Vec3& b, const Vec3& c) {
  FrameFwd f;
  f.a = a;
  f.b = b;
  f.c = c;
  f.u = b - a;
  f.w = c - a;
  f.ulen = f.u.norm();
  f.nvec = f.u.cross(f.w);
  f.nlen = f.nvec.norm();
  if (0.5 * f.nlen <= 1e-12)
    throw ValidationError("triangle frame: degenerate triangle (area <= 1e-12)");
  f.e1 = f.u * (1.0 / f.ulen);
  f.n = f.nvec * (1.0 / f.nlen);
  f.e2 = f.n.cross(f.e1);
  f.hvec = f.w - f.e1 * f.w.dot(f.e1);
  f.h = f.hvec.norm();
  f.k = 0.5 * (f.ulen + f.h);
  f.R = Mat3::from_cols(f.e1, f.e2, f.n);
  f.centroid = (a + b + c) * (1.0 / 3.0);
  return f;
}

// VJP of (R, k) w.r.t. the three vertices; accumulates into ga/gb/gc.
void frame_backward(const FrameFwd& f, const Mat3& gR, double gk, Vec3& ga,
                    Vec3& gb, Vec3& gc) {
  Vec3 ge1{gR(0, 0), gR(1, 0), gR(2, 0)};
  const Vec3 ge2{gR(0, 1), gR(1, 1), gR(2, 1)};
  Vec3 gn{gR(0, 2), gR(1, 2), gR(2, 2)};

  // e2 = n x e1
  gn += f.e1.cross(ge2);
  ge1 += ge2.cross(f.n);

  // k = (|u| + h) / 2
  const double gulen0 = 0.5 * gk;
  const double gh = 0.5 * gk;

  // h = |hvec|, hvec = w - (w.e1) e1
  Vec3 gw{}, gu{};
  if (f.h > 1e-300) {
    const Vec3 ghvec = f.hvec * (gh / f.h);
    gw += ghvec - f.e1 * f.e1.dot(ghvec);
    ge1 += -(f.e1.dot(ghvec)) * f.w - f.w.dot(f.e1) * ghvec;
  }

  // n = nvec/|nvec|, nvec = u x w
  const Vec3 gnvec = (gn - f.n * f.n.dot(gn)) * (1.0 / f.nlen);
  gu += f.w.cross(gnvec);
  gw += gnvec.cross(f.u);

  // e1 = u/|u|
  gu += (ge1 - f.e1 * f.e1.dot(ge1)) * (1.0 / f.ulen);
  gu += f.e1 * gulen0;

  ga += -(gu + gw);
  gb += gu;
  gc += gw;
}

void tri_vertices(const Mesh& mesh, size_t tri, Vec3& a, Vec3& b, Vec3& c) {
  const uint32_t* f = mesh.faces->data() + tri * 3;
  a = mesh.vertex(f[0]);
  b = mesh.vertex(f[1]);
  c = mesh.vertex(f[2]);
}

}  // namespace

TriangleFrame compute_triangle_frame(const Mesh& mesh, size_t tri) {
  if (tri >= mesh.tri_count())
    throw ValidationError("triangle frame: index out of range");
  Vec3 a, b, c;
  tri_vertices(mesh, tri, a, b, c);
  const FrameFwd f = frame_forward(a, b, c);
  return TriangleFrame{f.R, f.centroid, f.k};
}

// ---------------------------------------------------------------------------
// rigging

GlobalCloud rig_to_global(const GaussianCloud& cloud, const Mesh& mesh) {
  const size_t m = cloud.size();
  cloud.validate(mesh.tri_count());
  GlobalCloud out;
  out.mu = Tensor({m, 3});
  out.rot = Tensor({m, 4});
  out.scale = Tensor({m, 3});
  out.alpha = cloud.alpha_l;
  out.sh = cloud.sh_l;

  std::vector<FrameFwd> frames(mesh.tri_count());
  std::vector<Quat> frame_quat(mesh.tri_count());
  std::vector<uint8_t> have(mesh.tri_count(), 0);

  for (size_t i = 0; i < m; ++i) {
    const uint32_t t = cloud.parent_tri[i];
    if (!have[t]) {
      Vec3 a, b, c;
      tri_vertices(mesh, t, a, b, c);
      frames[t] = frame_forward(a, b, c);
      frame_quat[t] = mat_to_quat(frames[t].R);
      have[t] = 1;
    }
    const FrameFwd& f = frames[t];
    const Vec3 mu_l{cloud.mu_l[i * 3], cloud.mu_l[i * 3 + 1],
                    cloud.mu_l[i * 3 + 2]};
    const Vec3 bind = f.a * cloud.bary[i * 3] + f.b * cloud.bary[i * 3 + 1] +
                      f.c * cloud.bary[i * 3 + 2];
    const Vec3 mu = f.R * mu_l * f.k + bind;
    const Quat rot = frame_quat[t] * Quat{cloud.rot_l[i * 4],
                                          cloud.rot_l[i * 4 + 1],
                                          cloud.rot_l[i * 4 + 2],
                                          cloud.rot_l[i * 4 + 3]};
    out.mu[i * 3] = mu.x;
    out.mu[i * 3 + 1] = mu.y;
    out.mu[i * 3 + 2] = mu.z;
    out.rot[i * 4] = rot.w;
    out.rot[i * 4 + 1] = rot.x;
    out.rot[i * 4 + 2] = rot.y;
    out.rot[i * 4 + 3] = rot.z;
    for (int c = 0; c < 3; ++c)
      out.scale[i * 3 + c] = f.k * cloud.scale_l[i * 3 + c];
  }
  return out;
}

namespace {

struct RigCache {
  // owned copies: the caller's cloud may not outlive the backward pass
  std::vector<uint32_t> parent_tri;
  Tensor bary;
  std::shared_ptr<const std::vector<uint32_t>> faces;
  std::vector<FrameFwd> frames;
  std::vector<Quat> quat;
  std::vector<std::array<std::array<double, 9>, 4>> quat_jac;
  std::vector<uint8_t> have;
};

}  // namespace

RigOutputs rig_to_global_op(ad::Tape& tape, const GaussianCloud& cloud,
                            std::shared_ptr<const std::vector<uint32_t>> faces,
                            ad::ValueRef vertices, ad::ValueRef mu_l,
                            ad::ValueRef rot_l, ad::ValueRef scale_l) {
  const Tensor& verts = tape.val(vertices);
  if (verts.ndim() != 2 || verts.dim(1) != 3)
    throw ValidationError("rig op: vertices must be Nx3");
  if (!faces || faces->empty())
    throw ValidationError("rig op: missing face topology");
  const size_t m = cloud.size();
  const size_t tris = faces->size() / 3;
  const Tensor &lmu = tape.val(mu_l), &lrot = tape.val(rot_l),
               &lscale = tape.val(scale_l);
  if (lmu.dim(0) != m || lrot.dim(0) != m || lscale.dim(0) != m)
    throw ValidationError("rig op: local attribute count mismatch with cloud");
  for (uint32_t t : cloud.parent_tri)
    if (t >= tris)
      throw ValidationError("rig op: cloud topology mismatch with mesh");

  auto cache = std::make_shared<RigCache>();
  cache->parent_tri = cloud.parent_tri;
  cache->bary = cloud.bary;
  cache->faces = faces;
  cache->frames.resize(tris);
  cache->quat.resize(tris);
  cache->quat_jac.resize(tris);
  cache->have.assign(tris, 0);

  auto vertex_at = [&verts](uint32_t i) {
    return Vec3{verts[i * 3], verts[i * 3 + 1], verts[i * 3 + 2]};
  };

  Tensor out_mu({m, 3}), out_rot({m, 4}), out_scale({m, 3});
  for (size_t i = 0; i < m; ++i) {
    const uint32_t t = cloud.parent_tri[i];
    if (!cache->have[t]) {
      const uint32_t* f = faces->data() + t * 3;
      cache->frames[t] = frame_forward(vertex_at(f[0]), vertex_at(f[1]),
                                       vertex_at(f[2]));
      cache->quat[t] = mat_to_quat(cache->frames[t].R, &cache->quat_jac[t]);
      cache->have[t] = 1;
    }
    const FrameFwd& f = cache->frames[t];
    const Vec3 lmu_i{lmu[i * 3], lmu[i * 3 + 1], lmu[i * 3 + 2]};
    const Vec3 bind = f.a * cloud.bary[i * 3] + f.b * cloud.bary[i * 3 + 1] +
                      f.c * cloud.bary[i * 3 + 2];
    const Vec3 mu = f.R * lmu_i * f.k + bind;
    const Quat rot =
        cache->quat[t] * Quat{lrot[i * 4], lrot[i * 4 + 1], lrot[i * 4 + 2],
                              lrot[i * 4 + 3]};
    out_mu[i * 3] = mu.x;
    out_mu[i * 3 + 1] = mu.y;
    out_mu[i * 3 + 2] = mu.z;
    out_rot[i * 4] = rot.w;
    out_rot[i * 4 + 1] = rot.x;
    out_rot[i * 4 + 2] = rot.y;
    out_rot[i * 4 + 3] = rot.z;
    for (int c = 0; c < 3; ++c)
      out_scale[i * 3 + c] = f.k * lscale[i * 3 + c];
  }

  auto backward = [cache, vertices, mu_l, rot_l, scale_l](
                      ad::Tape& t, const std::vector<const Tensor*>& g) {
    const std::vector<uint32_t>& parent_tri = cache->parent_tri;
    const Tensor& bary = cache->bary;
    const std::vector<uint32_t>& faces = *cache->faces;
    const size_t m = parent_tri.size();
    const Tensor* gmu = g[0];
    const Tensor* grot = g[1];
    const Tensor* gscale = g[2];
    const Tensor& lmu = t.val(mu_l);
    const Tensor& lscale = t.val(scale_l);
    const Tensor& lrot = t.val(rot_l);

    Tensor* gverts = t.grad_buffer(vertices);
    Tensor* gmu_l = t.grad_buffer(mu_l);
    Tensor* grot_l = t.grad_buffer(rot_l);
    Tensor* gscale_l = t.grad_buffer(scale_l);

    const size_t tris = cache->frames.size();
    std::vector<Mat3> gR(tris);
    std::vector<double> gk(tris, 0.0);
    std::vector<std::array<double, 4>> gqR(tris, {0, 0, 0, 0});

    for (size_t i = 0; i < m; ++i) {
      const uint32_t tri = parent_tri[i];
      const FrameFwd& f = cache->frames[tri];
      const Vec3 lmu_i{lmu[i * 3], lmu[i * 3 + 1], lmu[i * 3 + 2]};
      if (gscale) {
        const Vec3 gs{(*gscale)[i * 3], (*gscale)[i * 3 + 1],
                      (*gscale)[i * 3 + 2]};
        if (gscale_l)
          for (int c = 0; c < 3; ++c)
            (*gscale_l)[i * 3 + c] += f.k * gs[c];
        gk[tri] += gs.x * lscale[i * 3] + gs.y * lscale[i * 3 + 1] +
                   gs.z * lscale[i * 3 + 2];
      }
      if (gmu) {
        const Vec3 gm{(*gmu)[i * 3], (*gmu)[i * 3 + 1], (*gmu)[i * 3 + 2]};
        if (gmu_l) {
          const Vec3 gl = f.R.transposed_mul(gm) * f.k;
          (*gmu_l)[i * 3] += gl.x;
          (*gmu_l)[i * 3 + 1] += gl.y;
          (*gmu_l)[i * 3 + 2] += gl.z;
        }
        gk[tri] += gm.dot(f.R * lmu_i);
        gR[tri] = gR[tri] + outer(gm, lmu_i) * f.k;
        if (gverts) {
          const uint32_t* fc = faces.data() + tri * 3;
          for (int v = 0; v < 3; ++v) {
            const double w = bary[i * 3 + v];
            (*gverts)[fc[v] * 3] += w * gm.x;
            (*gverts)[fc[v] * 3 + 1] += w * gm.y;
            (*gverts)[fc[v] * 3 + 2] += w * gm.z;
          }
        }
      }
      if (grot) {
        const Quat rl{lrot[i * 4], lrot[i * 4 + 1], lrot[i * 4 + 2],
                      lrot[i * 4 + 3]};
        std::array<double, 16> dda, ddb;
        quat_mul_jacobians(cache->quat[tri], rl, dda, ddb);
        for (int c = 0; c < 4; ++c) {
          double acc_a = 0.0, acc_b = 0.0;
          for (int o = 0; o < 4; ++o) {
            const double go = (*grot)[i * 4 + o];
            acc_a += go * dda[o * 4 + c];
            acc_b += go * ddb[o * 4 + c];
          }
          gqR[tri][c] += acc_a;
          if (grot_l) (*grot_l)[i * 4 + c] += acc_b;
        }
      }
    }

    if (gverts) {
      for (size_t tri = 0; tri < tris; ++tri) {
        if (!cache->have[tri]) continue;
        Mat3 gRt = gR[tri];
        const auto& qj = cache->quat_jac[tri];
        for (int e = 0; e < 9; ++e) {
          double acc = 0.0;
          for (int c = 0; c < 4; ++c) acc += gqR[tri][c] * qj[c][e];
          gRt.m[e] += acc;
        }
        bool any = gk[tri] != 0.0;
        for (int e = 0; e < 9 && !any; ++e) any = gRt.m[e] != 0.0;
        if (!any) continue;
        Vec3 ga{}, gb{}, gc{};
        frame_backward(cache->frames[tri], gRt, gk[tri], ga, gb, gc);
        const uint32_t* fc = faces.data() + tri * 3;
        const Vec3 parts[3] = {ga, gb, gc};
        for (int v = 0; v < 3; ++v) {
          (*gverts)[fc[v] * 3] += parts[v].x;
          (*gverts)[fc[v] * 3 + 1] += parts[v].y;
          (*gverts)[fc[v] * 3 + 2] += parts[v].z;
        }
      }
    }
  };

  auto refs = tape.custom({vertices, mu_l, rot_l, scale_l},
                          {std::move(out_mu), std::move(out_rot),
                           std::move(out_scale)},
                          backward);
  return RigOutputs{refs[0], refs[1], refs[2]};
}

// ---------------------------------------------------------------------------
// intra-oral residuals

namespace {

// Axis-angle to quaternion with the exact angle-halving parameterization;
// alpha = sin(t/2)/t stays finite at zero.
Quat axis_angle_quat(const Vec3& r, double* alpha_out = nullptr,
                     double* dalpha_dt2_out = nullptr) {
  const double t2 = r.dot(r);
  double alpha, dalpha_dt2, w;
  if (t2 < 1e-12) {
    alpha = 0.5 - t2 / 48.0 + t2 * t2 / 3840.0;
    dalpha_dt2 = -1.0 / 48.0 + t2 / 1920.0;
    w = 1.0 - t2 / 8.0 + t2 * t2 / 384.0;
  } else {
    const double t = std::sqrt(t2);
    alpha = std::sin(0.5 * t) / t;
    dalpha_dt2 = (0.5 * t * std::cos(0.5 * t) - std::sin(0.5 * t)) / (2.0 * t2 * t);
    w = std::cos(0.5 * t);
  }
  if (alpha_out) *alpha_out = alpha;
  if (dalpha_dt2_out) *dalpha_dt2_out = dalpha_dt2;
  return Quat{w, alpha * r.x, alpha * r.y, alpha * r.z};
}

}  // namespace

size_t apply_mouth_residual(GlobalCloud& globals,
                            const std::vector<uint8_t>& mouth_mask,
                            const Tensor& residual) {
  const size_t m = globals.size();
  if (mouth_mask.size() != m)
    throw ValidationError("mouth residual: mask length mismatch");
  size_t mouth = 0;
  for (uint8_t v : mouth_mask) mouth += v != 0;
  if (residual.ndim() != 2 || residual.dim(0) != mouth || residual.dim(1) != 9) {
    std::ostringstream os;
    os << "mouth residual: expected " << mouth << "x9 residual, got "
       << residual.shape_str();
    throw ValidationError(os.str());
  }
  size_t clamped = 0;
  size_t row = 0;
  for (size_t i = 0; i < m; ++i) {
    if (!mouth_mask[i]) continue;
    const double* r = residual.data() + row * 9;
    globals.mu[i * 3] += r[0];
    globals.mu[i * 3 + 1] += r[1];
    globals.mu[i * 3 + 2] += r[2];
    const Quat dq = axis_angle_quat({r[3], r[4], r[5]});
    const Quat q{globals.rot[i * 4], globals.rot[i * 4 + 1],
                 globals.rot[i * 4 + 2], globals.rot[i * 4 + 3]};
    const Quat qn = (dq * q).normalized();
    globals.rot[i * 4] = qn.w;
    globals.rot[i * 4 + 1] = qn.x;
    globals.rot[i * 4 + 2] = qn.y;
    globals.rot[i * 4 + 3] = qn.z;
    for (int c = 0; c < 3; ++c) {
      const double s = globals.scale[i * 3 + c] + r[6 + c];
      if (s < 1e-6) {
        globals.scale[i * 3 + c] = 1e-6;
        ++clamped;
      } else {
        globals.scale[i * 3 + c] = s;
      }
    }
    ++row;
  }
  return clamped;
}

ResidualOutputs apply_mouth_residual_op(ad::Tape& tape,
                                        const std::vector<uint8_t>& mouth_mask,
                                        ad::ValueRef mu, ad::ValueRef rot,
                                        ad::ValueRef scale,
                                        ad::ValueRef residual) {
  const Tensor &vmu = tape.val(mu), &vrot = tape.val(rot),
               &vscale = tape.val(scale), &vres = tape.val(residual);
  const size_t m = vmu.dim(0);
  if (mouth_mask.size() != m)
    throw ValidationError("mouth residual op: mask length mismatch");
  size_t mouth = 0;
  for (uint8_t v : mouth_mask) mouth += v != 0;
  if (vres.ndim() != 2 || vres.dim(0) != mouth || vres.dim(1) != 9)
    throw ValidationError("mouth residual op: residual shape mismatch");

  auto mask = std::make_shared<std::vector<uint8_t>>(mouth_mask);
  Tensor out_mu = vmu, out_rot = vrot, out_scale = vscale;
  // rows of the mouth subset, for the backward pass
  auto rows = std::make_shared<std::vector<uint32_t>>();
  rows->reserve(mouth);
  size_t row = 0;
  for (size_t i = 0; i < m; ++i) {
    if (!(*mask)[i]) continue;
    rows->push_back(uint32_t(i));
    const double* r = vres.data() + row * 9;
    out_mu[i * 3] += r[0];
    out_mu[i * 3 + 1] += r[1];
    out_mu[i * 3 + 2] += r[2];
    const Quat dq = axis_angle_quat({r[3], r[4], r[5]});
    const Quat q{vrot[i * 4], vrot[i * 4 + 1], vrot[i * 4 + 2],
                 vrot[i * 4 + 3]};
    const Quat qn = (dq * q).normalized();
    out_rot[i * 4] = qn.w;
    out_rot[i * 4 + 1] = qn.x;
    out_rot[i * 4 + 2] = qn.y;
    out_rot[i * 4 + 3] = qn.z;
    for (int c = 0; c < 3; ++c) {
      const double s = vscale[i * 3 + c] + r[6 + c];
      out_scale[i * 3 + c] = s < 1e-6 ? 1e-6 : s;
    }
    ++row;
  }

  auto backward = [mask, rows, mu, rot, scale, residual](
                      ad::Tape& t, const std::vector<const Tensor*>& g) {
    const Tensor* gmu = g[0];
    const Tensor* grot = g[1];
    const Tensor* gscale = g[2];
    const Tensor& vrot = t.val(rot);
    const Tensor& vscale = t.val(scale);
    const Tensor& vres = t.val(residual);
    Tensor* in_gmu = t.grad_buffer(mu);
    Tensor* in_grot = t.grad_buffer(rot);
    Tensor* in_gscale = t.grad_buffer(scale);
    Tensor* gres = t.grad_buffer(residual);
    const size_t m = mask->size();

    // pass-through for untouched gaussians
    std::vector<uint8_t>& msk = *mask;
    if (gmu && in_gmu)
      for (size_t i = 0; i < m; ++i)
        if (!msk[i])
          for (int c = 0; c < 3; ++c)
            (*in_gmu)[i * 3 + c] += (*gmu)[i * 3 + c];
    if (grot && in_grot)
      for (size_t i = 0; i < m; ++i)
        if (!msk[i])
          for (int c = 0; c < 4; ++c)
            (*in_grot)[i * 4 + c] += (*grot)[i * 4 + c];
    if (gscale && in_gscale)
      for (size_t i = 0; i < m; ++i)
        if (!msk[i])
          for (int c = 0; c < 3; ++c)
            (*in_gscale)[i * 3 + c] += (*gscale)[i * 3 + c];

    for (size_t rix = 0; rix < rows->size(); ++rix) {
      const size_t i = (*rows)[rix];
      const double* r = vres.data() + rix * 9;
      if (gmu) {
        for (int c = 0; c < 3; ++c) {
          const double gv = (*gmu)[i * 3 + c];
          if (in_gmu) (*in_gmu)[i * 3 + c] += gv;
          if (gres) (*gres)[rix * 9 + c] += gv;
        }
      }
      if (gscale) {
        for (int c = 0; c < 3; ++c) {
          const double s = vscale[i * 3 + c] + r[6 + c];
          const double gv = s < 1e-6 ? 0.0 : (*gscale)[i * 3 + c];
          if (in_gscale) (*in_gscale)[i * 3 + c] += gv;
          if (gres) (*gres)[rix * 9 + 6 + c] += gv;
        }
      }
      if (grot) {
        const Vec3 aa{r[3], r[4], r[5]};
        double alpha, dalpha_dt2;
        const Quat dq = axis_angle_quat(aa, &alpha, &dalpha_dt2);
        const Quat q{vrot[i * 4], vrot[i * 4 + 1], vrot[i * 4 + 2],
                     vrot[i * 4 + 3]};
        const Quat prod = dq * q;
        std::array<double, 16> jn;
        quat_normalize_jacobian(prod, jn);
        // pull the output grad through the normalization
        double gprod[4] = {0, 0, 0, 0};
        for (int c = 0; c < 4; ++c)
          for (int o = 0; o < 4; ++o)
            gprod[c] += (*grot)[i * 4 + o] * jn[o * 4 + c];
        std::array<double, 16> dda, ddb;
        quat_mul_jacobians(dq, q, dda, ddb);
        double gdq[4] = {0, 0, 0, 0};
        for (int c = 0; c < 4; ++c)
          for (int o = 0; o < 4; ++o) {
            gdq[c] += gprod[o] * dda[o * 4 + c];
            if (in_grot) (*in_grot)[i * 4 + c] += gprod[o] * ddb[o * 4 + c];
          }
        if (gres) {
          // dq.w = cos(t/2): d/daa_j = -(alpha/2) aa_j
          // dq.v_c = alpha aa_c: d/daa_j = 2 aa_j dalpha_dt2 aa_c + alpha d_cj
          for (int j = 0; j < 3; ++j) {
            double acc = gdq[0] * (-0.5 * alpha * aa[j]);
            for (int c = 0; c < 3; ++c) {
              double d = 2.0 * aa[j] * dalpha_dt2 * aa[c];
              if (c == j) d += alpha;
              acc += gdq[1 + c] * d;
            }
            (*gres)[rix * 9 + 3 + j] += acc;
          }
        }
      }
    }
  };

  auto refs = tape.custom({mu, rot, scale, residual},
                          {std::move(out_mu), std::move(out_rot),
                           std::move(out_scale)},
                          backward);
  return ResidualOutputs{refs[0], refs[1], refs[2]};
}

// ---------------------------------------------------------------------------
// landmarks and the mouth region

std::vector<std::optional<LandmarkAnchor>> anchor_landmarks(
    const Tensor& landmarks_2d, const Camera& camera, const Mesh& mesh) {
  camera.validate();
  if (landmarks_2d.ndim() != 2 || landmarks_2d.dim(1) != 2)
    throw ValidationError("anchor_landmarks: landmarks must be Lx2 pixels");
  const size_t L = landmarks_2d.dim(0);
  const size_t tris = mesh.tri_count();
  const Vec3 origin = camera.position();

  std::vector<std::optional<LandmarkAnchor>> out(L);
  for (size_t l = 0; l < L; ++l) {
    const Vec3 dir = camera.pixel_ray(landmarks_2d[l * 2],
                                      landmarks_2d[l * 2 + 1]);
    double best_t = std::numeric_limits<double>::infinity();
    for (size_t t = 0; t < tris; ++t) {
      Vec3 a, b, c;
      tri_vertices(mesh, t, a, b, c);
      const Vec3 e1 = b - a, e2 = c - a;
      const Vec3 p = dir.cross(e2);
      const double det = e1.dot(p);
      if (det <= 1e-12) continue;  // back-facing or parallel
      const double inv = 1.0 / det;
      const Vec3 tv = origin - a;
      const double u = tv.dot(p) * inv;
      if (u < -1e-9 || u > 1.0 + 1e-9) continue;
      const Vec3 q = tv.cross(e1);
      const double v = dir.dot(q) * inv;
      if (v < -1e-9 || u + v > 1.0 + 1e-9) continue;
      const double hit_t = e2.dot(q) * inv;
      if (hit_t > 1e-9 && hit_t < best_t) {
        best_t = hit_t;
        out[l] = LandmarkAnchor{uint32_t(t), Vec3{1.0 - u - v, u, v}};
      }
    }
  }
  return out;
}

std::vector<uint32_t> grow_mouth_triangles(
    const Mesh& mesh, const std::vector<LandmarkAnchor>& seeds, double rho) {
  if (seeds.empty())
    throw ValidationError("mouth region: at least one seed required");
  const size_t tris = mesh.tri_count();
  for (const LandmarkAnchor& s : seeds)
    if (s.tri >= tris)
      throw ValidationError("mouth region: seed triangle out of range");

  // seed points in 3-D
  std::vector<Vec3> points;
  points.reserve(seeds.size());
  for (const LandmarkAnchor& s : seeds) {
    Vec3 a, b, c;
    tri_vertices(mesh, s.tri, a, b, c);
    points.push_back(a * s.bary.x + b * s.bary.y + c * s.bary.z);
  }
  auto near_seed = [&points, rho](const Vec3& p) {
    for (const Vec3& q : points)
      if ((p - q).norm() <= rho) return true;
    return false;
  };

  // edge adjacency
  std::map<uint64_t, std::vector<uint32_t>> edges;
  for (size_t t = 0; t < tris; ++t) {
    const uint32_t* f = mesh.faces->data() + t * 3;
    for (int e = 0; e < 3; ++e) {
      const uint32_t v0 = std::min(f[e], f[(e + 1) % 3]);
      const uint32_t v1 = std::max(f[e], f[(e + 1) % 3]);
      edges[(uint64_t(v0) << 32) | v1].push_back(uint32_t(t));
    }
  }
  auto centroid = [&mesh](uint32_t t) {
    Vec3 a, b, c;
    tri_vertices(mesh, t, a, b, c);
    return (a + b + c) * (1.0 / 3.0);
  };

  // seed triangles are admitted unconditionally; growth is gated by the
  // centroid-to-seed distance
  std::set<uint32_t> admitted;
  std::set<uint32_t> frontier;
  for (const LandmarkAnchor& s : seeds) {
    admitted.insert(s.tri);
    frontier.insert(s.tri);
  }
  while (!frontier.empty()) {
    const uint32_t t = *frontier.begin();
    frontier.erase(frontier.begin());
    const uint32_t* f = mesh.faces->data() + t * 3;
    for (int e = 0; e < 3; ++e) {
      const uint32_t v0 = std::min(f[e], f[(e + 1) % 3]);
      const uint32_t v1 = std::max(f[e], f[(e + 1) % 3]);
      for (uint32_t nb : edges[(uint64_t(v0) << 32) | v1]) {
        if (nb == t || admitted.count(nb)) continue;
        if (near_seed(centroid(nb))) {
          admitted.insert(nb);
          frontier.insert(nb);
        }
      }
    }
  }
  return std::vector<uint32_t>(admitted.begin(), admitted.end());
}

std::vector<uint8_t> select_mouth_region(
    const Mesh& mesh, const GaussianCloud& cloud,
    const std::vector<LandmarkAnchor>& seeds, double rho) {
  const std::vector<uint32_t> region = grow_mouth_triangles(mesh, seeds, rho);
  std::vector<uint8_t> in_region(mesh.tri_count(), 0);
  for (uint32_t t : region) in_region[t] = 1;
  std::vector<uint8_t> mask(cloud.size(), 0);
  size_t marked = 0;
  for (size_t i = 0; i < cloud.size(); ++i) {
    mask[i] = in_region[cloud.parent_tri[i]];
    marked += mask[i];
  }
  if (marked == 0)
    throw ValidationError(
        "mouth region: no Gaussians inside the grown region (rho too small?)");
  return mask;
}

// ---------------------------------------------------------------------------
// cloud file

namespace {
constexpr char kCloudMagic[4] = {'E', 'T', 'G', 'G'};
}

void save_cloud(const std::string& path, const GaussianCloud& cloud) {
  std::vector<io::Section> s;
  s.push_back(io::Section::of_tensor("mu_l", cloud.mu_l));
  s.push_back(io::Section::of_tensor("rot_l", cloud.rot_l));
  s.push_back(io::Section::of_tensor("scale_l", cloud.scale_l));
  s.push_back(io::Section::of_tensor("alpha_l", cloud.alpha_l));
  s.push_back(io::Section::of_tensor("sh_l", cloud.sh_l));
  s.push_back(io::Section::of_tensor("bary", cloud.bary));
  std::vector<double> pt(cloud.parent_tri.begin(), cloud.parent_tri.end());
  s.push_back(io::Section::of_tensor(
      "parent_tri", Tensor({cloud.size()}, std::move(pt))));
  std::vector<double> mm(cloud.mouth_mask.begin(), cloud.mouth_mask.end());
  s.push_back(io::Section::of_tensor(
      "mouth_mask", Tensor({cloud.size()}, std::move(mm))));
  io::write_sections(path, kCloudMagic, 1, s);
}

GaussianCloud load_cloud(const std::string& path) {
  auto sections = io::read_sections(path, kCloudMagic);
  GaussianCloud c;
  c.mu_l = io::find_section(sections, "mu_l").as_tensor();
  c.rot_l = io::find_section(sections, "rot_l").as_tensor();
  c.scale_l = io::find_section(sections, "scale_l").as_tensor();
  c.alpha_l = io::find_section(sections, "alpha_l").as_tensor();
  c.sh_l = io::find_section(sections, "sh_l").as_tensor();
  c.bary = io::find_section(sections, "bary").as_tensor();
  const Tensor& pt = io::find_section(sections, "parent_tri").as_tensor();
  c.parent_tri.resize(pt.size());
  for (size_t i = 0; i < pt.size(); ++i) {
    if (pt[i] < 0 || pt[i] != std::floor(pt[i]))
      throw ValidationError(path + ": non-integral parent triangle index");
    c.parent_tri[i] = uint32_t(pt[i]);
  }
  const Tensor& mm = io::find_section(sections, "mouth_mask").as_tensor();
  c.mouth_mask.resize(mm.size());
  for (size_t i = 0; i < mm.size(); ++i) c.mouth_mask[i] = mm[i] != 0.0;
  return c;
}

}  // namespace etg
