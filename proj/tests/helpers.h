#pragma once

// Shared fixture builders for the unit tests.

#include <cmath>
#include <memory>
#include <vector>

#include "etg/camera.h"
#include "etg/headmodel.h"
#include "etg/rig.h"
#include "etg/rng.h"
#include "etg/tensor.h"

namespace etg::testing {

// Octahedron head with K expression components and a y-split jaw weighting.
inline HeadModelAssets make_test_model(size_t K = 4, uint64_t seed = 11) {
  HeadModelAssets m;
  m.template_verts = Tensor(
      {6, 3}, {1, 0, 0, -1, 0, 0, 0, 1, 0, 0, -1, 0, 0, 0, 1, 0, 0, -1});
  Rng rng(seed);
  Tensor basis({6, 3, K});
  for (size_t i = 0; i < basis.size(); ++i) basis[i] = 0.2 * rng.normal();
  m.expr_basis = std::move(basis);
  Tensor skin({6, 2});
  for (size_t i = 0; i < 6; ++i) {
    const double y = m.template_verts[i * 3 + 1];
    const double wj = std::clamp(0.5 - 0.5 * y, 0.0, 1.0);
    skin[i * 2] = 1.0 - wj;
    skin[i * 2 + 1] = wj;
  }
  m.skin_weights = std::move(skin);
  m.jaw_pivot = {0.0, 0.1, -0.2};
  m.faces = std::make_shared<const std::vector<uint32_t>>(
      std::vector<uint32_t>{0, 2, 4, 2, 1, 4, 1, 3, 4, 3, 0, 4,
                            2, 0, 5, 1, 2, 5, 3, 1, 5, 0, 3, 5});
  return m;
}

inline Quat random_unit_quat(Rng& rng) {
  Quat q{rng.normal(), rng.normal(), rng.normal(), rng.normal()};
  return q.normalized();
}

inline Vec3 random_vec3(Rng& rng, double scale = 1.0) {
  return {scale * rng.normal(), scale * rng.normal(), scale * rng.normal()};
}

// Mesh with one unit right triangle in the z=0 plane.
inline Mesh make_single_triangle() {
  Mesh mesh;
  mesh.vertices = Tensor({3, 3}, {0, 0, 0, 1, 0, 0, 0, 1, 0});
  mesh.faces = std::make_shared<const std::vector<uint32_t>>(
      std::vector<uint32_t>{0, 1, 2});
  return mesh;
}

// Flat strip of `quads`*2 triangles in the z=0 plane, vertices on a grid of
// (quads+1) columns x 2 rows, edge length `cell`.
inline Mesh make_strip(size_t quads, double cell = 1.0) {
  Mesh mesh;
  const size_t cols = quads + 1;
  Tensor verts({cols * 2, 3});
  for (size_t r = 0; r < 2; ++r)
    for (size_t c = 0; c < cols; ++c) {
      const size_t i = r * cols + c;
      verts[i * 3] = double(c) * cell;
      verts[i * 3 + 1] = double(r) * cell;
      verts[i * 3 + 2] = 0.0;
    }
  std::vector<uint32_t> faces;
  for (size_t c = 0; c + 1 < cols; ++c) {
    const uint32_t a = uint32_t(c), b = uint32_t(c + 1);
    const uint32_t d = uint32_t(cols + c), e = uint32_t(cols + c + 1);
    faces.insert(faces.end(), {a, b, d});
    faces.insert(faces.end(), {b, e, d});
  }
  mesh.vertices = std::move(verts);
  mesh.faces = std::make_shared<const std::vector<uint32_t>>(std::move(faces));
  return mesh;
}

inline Camera make_test_camera(size_t wh = 64, double fx = 100.0) {
  Camera cam;
  cam.fx = cam.fy = fx;
  cam.cx = cam.cy = double(wh) / 2.0;
  cam.width = cam.height = wh;
  cam.near = 0.05;
  cam.rot = Mat3::identity();
  cam.trans = {0, 0, 0};
  return cam;
}

// One-gaussian global cloud helper.
inline GlobalCloud make_cloud(const std::vector<GlobalGaussian>& gs) {
  GlobalCloud c;
  const size_t m = gs.size();
  c.mu = Tensor({m, 3});
  c.rot = Tensor({m, 4});
  c.scale = Tensor({m, 3});
  c.alpha = Tensor({m});
  c.sh = Tensor({m, 3, 1});
  for (size_t i = 0; i < m; ++i) {
    const GlobalGaussian& g = gs[i];
    c.mu[i * 3] = g.mu.x;
    c.mu[i * 3 + 1] = g.mu.y;
    c.mu[i * 3 + 2] = g.mu.z;
    c.rot[i * 4] = g.rot.w;
    c.rot[i * 4 + 1] = g.rot.x;
    c.rot[i * 4 + 2] = g.rot.y;
    c.rot[i * 4 + 3] = g.rot.z;
    c.scale[i * 3] = g.scale.x;
    c.scale[i * 3 + 1] = g.scale.y;
    c.scale[i * 3 + 2] = g.scale.z;
    c.alpha[i] = g.alpha;
    c.sh[i * 3] = g.sh_dc.x;
    c.sh[i * 3 + 1] = g.sh_dc.y;
    c.sh[i * 3 + 2] = g.sh_dc.z;
  }
  return c;
}

}  // namespace etg::testing
