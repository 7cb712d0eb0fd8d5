#include <cstdio>
#include <filesystem>

#include "doctest.h"
#include "etg/autodiff.h"
#include "etg/common.h"
#include "etg/geometry.h"
#include "etg/headmodel.h"
#include "etg/rng.h"
#include "helpers.h"

using namespace etg;
using etg::testing::make_test_model;

namespace {
double mat_diff(const Mat3& a, const Mat3& b) {
  double w = 0;
  for (int i = 0; i < 9; ++i) w = std::max(w, std::fabs(a.m[i] - b.m[i]));
  return w;
}
}  // namespace

TEST_CASE("rodrigues: zero maps to identity") {
  CHECK(mat_diff(rodrigues({0, 0, 0}), Mat3::identity()) == 0.0);
}

TEST_CASE("rodrigues: quarter turn about z") {
  const Mat3 r = rodrigues({0, 0, 1.5707963267948966});
  const Vec3 v = r * Vec3{1, 0, 0};
  CHECK(v.x == doctest::Approx(0.0).epsilon(1e-12));
  CHECK(v.y == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(v.z == doctest::Approx(0.0).epsilon(1e-12));
}

TEST_CASE("rodrigues: R(r) R(-r) = I for random axis-angles") {
  Rng rng(3);
  for (int i = 0; i < 50; ++i) {
    const Vec3 r = etg::testing::random_vec3(rng, 0.8);
    const Mat3 prod = rodrigues(r) * rodrigues(-r);
    CHECK(mat_diff(prod, Mat3::identity()) < 1e-12);
  }
}

TEST_CASE("rodrigues is a proper rotation") {
  Rng rng(4);
  for (int i = 0; i < 20; ++i) {
    const Mat3 r = rodrigues(etg::testing::random_vec3(rng, 1.2));
    CHECK(r.det() == doctest::Approx(1.0).epsilon(1e-12));
    const Mat3 rrt = r * r.transposed();
    CHECK(mat_diff(rrt, Mat3::identity()) < 1e-12);
  }
}

TEST_CASE("rodrigues_jacobian matches finite differences") {
  Rng rng(5);
  for (int rep = 0; rep < 10; ++rep) {
    const Vec3 r = rep == 0 ? Vec3{1e-9, -2e-9, 0}
                            : etg::testing::random_vec3(rng, 0.9);
    const auto jac = rodrigues_jacobian(r);
    const double h = 1e-6;
    for (int i = 0; i < 3; ++i) {
      Vec3 rp = r, rm = r;
      (i == 0 ? rp.x : i == 1 ? rp.y : rp.z) += h;
      (i == 0 ? rm.x : i == 1 ? rm.y : rm.z) -= h;
      const Mat3 num = (rodrigues(rp) + rodrigues(rm) * -1.0) * (0.5 / h);
      CHECK(mat_diff(num, jac[i]) < 1e-8);
    }
  }
}

TEST_CASE("mat_to_quat round trips and its jacobian is consistent") {
  Rng rng(6);
  for (int rep = 0; rep < 40; ++rep) {
    const Mat3 r = rodrigues(etg::testing::random_vec3(rng, 1.4));
    std::array<std::array<double, 9>, 4> jac;
    const Quat q = mat_to_quat(r, &jac);
    CHECK(q.norm() == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(mat_diff(quat_to_mat(q), r) < 1e-12);
    // directional finite difference within the tangent space of rotations
    const Vec3 dr = etg::testing::random_vec3(rng, 1.0);
    const double h = 1e-7;
    const Mat3 rp = rodrigues(dr * h) * r;
    const Mat3 rm = rodrigues(dr * -h) * r;
    const Quat qp = mat_to_quat(rp);
    const Quat qm = mat_to_quat(rm);
    for (int c = 0; c < 4; ++c) {
      double analytic = 0.0;
      for (int e = 0; e < 9; ++e) analytic += jac[c][e] * (rp.m[e] - rm.m[e]);
      const double numeric = (qp[c] - qm[c]);
      CHECK(std::fabs(analytic - numeric) < 1e-9);
    }
  }
}

TEST_CASE("deform: rest pose returns the template exactly") {
  const HeadModelAssets m = make_test_model();
  const Mesh mesh = deform_mesh(m, {Tensor({4})}, {Vec3{}});
  for (size_t i = 0; i < mesh.vertices.size(); ++i)
    CHECK(mesh.vertices[i] == m.template_verts[i]);
}

TEST_CASE("deform: unit expression on a head-skinned vertex adds the basis column") {
  HeadModelAssets m = make_test_model();
  // vertex 2 is (0,1,0): fully head-skinned by construction
  CHECK(m.skin_weights[2 * 2] == doctest::Approx(1.0));
  const size_t k = 1;
  Tensor psi({4});
  psi[k] = 1.0;
  const Mesh mesh = deform_mesh(m, {psi}, {Vec3{}});
  for (int c = 0; c < 3; ++c) {
    const double expect =
        m.template_verts[2 * 3 + c] + m.expr_basis[(2 * 3 + c) * 4 + k];
    CHECK(mesh.vertices[2 * 3 + c] == doctest::Approx(expect).epsilon(1e-12));
  }
}

TEST_CASE("deform: fully jaw-skinned vertex is rigidly rotated about the pivot") {
  HeadModelAssets m = make_test_model();
  // vertex 3 is (0,-1,0): fully jaw-skinned
  CHECK(m.skin_weights[3 * 2 + 1] == doctest::Approx(1.0));
  const Vec3 jaw{0.3, 0, 0};
  const Mesh mesh = deform_mesh(m, {Tensor({4})}, {jaw});
  const Vec3 v = m.template_vertex(3);
  const Vec3 expect = rodrigues(jaw) * (v - m.jaw_pivot) + m.jaw_pivot;
  CHECK(mesh.vertices[3 * 3] == doctest::Approx(expect.x).epsilon(1e-12));
  CHECK(mesh.vertices[3 * 3 + 1] == doctest::Approx(expect.y).epsilon(1e-12));
  CHECK(mesh.vertices[3 * 3 + 2] == doctest::Approx(expect.z).epsilon(1e-12));
}

TEST_CASE("blendshape linearity before skinning") {
  const HeadModelAssets m = make_test_model();
  Rng rng(7);
  Tensor p1({4}), p2({4});
  for (size_t i = 0; i < 4; ++i) {
    p1[i] = rng.normal();
    p2[i] = rng.normal();
  }
  const double a = 0.7, b = -1.3;
  Tensor mix({4});
  for (size_t i = 0; i < 4; ++i) mix[i] = a * p1[i] + b * p2[i];
  const Mesh vm = deform_mesh(m, {mix}, {Vec3{}});
  const Mesh v1 = deform_mesh(m, {p1}, {Vec3{}});
  const Mesh v2 = deform_mesh(m, {p2}, {Vec3{}});
  for (size_t i = 0; i < vm.vertices.size(); ++i) {
    const double expect = a * v1.vertices[i] + b * v2.vertices[i] -
                          (a + b - 1.0) * m.template_verts[i];
    CHECK(vm.vertices[i] == doctest::Approx(expect).epsilon(1e-10));
  }
}

TEST_CASE("jaw rotation preserves distances among jaw-skinned vertices and pivot") {
  HeadModelAssets m = make_test_model();
  // make two vertices fully jaw-skinned
  m.skin_weights[3 * 2] = 0.0;
  m.skin_weights[3 * 2 + 1] = 1.0;
  m.skin_weights[5 * 2] = 0.0;
  m.skin_weights[5 * 2 + 1] = 1.0;
  const Vec3 jaw{0.2, -0.3, 0.1};
  const Mesh mesh = deform_mesh(m, {Tensor({4})}, {jaw});
  auto at = [&mesh](size_t i) {
    return Vec3{mesh.vertices[i * 3], mesh.vertices[i * 3 + 1],
                mesh.vertices[i * 3 + 2]};
  };
  const double d0 = (m.template_vertex(3) - m.template_vertex(5)).norm();
  const double d1 = (at(3) - at(5)).norm();
  CHECK(d1 == doctest::Approx(d0).epsilon(1e-10));
  const double p0 = (m.template_vertex(3) - m.jaw_pivot).norm();
  const double p1 = (at(3) - m.jaw_pivot).norm();
  CHECK(p1 == doctest::Approx(p0).epsilon(1e-10));
}

TEST_CASE("deform gradients pass the finite-difference oracle") {
  const HeadModelAssets m = make_test_model();
  Rng rng(8);
  Tensor weights({6, 3});
  for (size_t i = 0; i < weights.size(); ++i) weights[i] = rng.normal();

  // combined input: first K entries psi, last 3 jaw
  Tensor x({7});
  for (size_t i = 0; i < 4; ++i) x[i] = 0.3 * rng.normal();
  for (size_t i = 4; i < 7; ++i) x[i] = 0.2 * rng.normal();
  auto build = [&](ad::Tape& t, ad::ValueRef in) {
    ad::ValueRef flat = t.reshape(in, {1, 7});
    ad::ValueRef psi = t.reshape(t.slice_cols(flat, 0, 4), {4});
    ad::ValueRef jaw = t.reshape(t.slice_cols(flat, 4, 7), {3});
    ad::ValueRef verts = deform_mesh_op(t, m, psi, jaw);
    return t.sum(t.mul(verts, t.constant(weights)));
  };
  CHECK(ad::finite_diff_check(build, x, 1e-5) < 1e-6);
}

TEST_CASE("deform rejects K mismatch and out-of-range jaw") {
  const HeadModelAssets m = make_test_model();
  CHECK_THROWS_AS(deform_mesh(m, {Tensor({3})}, {Vec3{}}), ValidationError);
  CHECK_THROWS_AS(deform_mesh(m, {Tensor({4})}, {Vec3{3.2, 0, 0}}),
                  ValidationError);
}

TEST_CASE("head model save/load round trip") {
  namespace fs = std::filesystem;
  const HeadModelAssets m = make_test_model();
  const std::string path =
      (fs::temp_directory_path() / "etg_test_head.etga").string();
  save_head_model(path, m);
  const HeadModelAssets r = load_head_model(path);
  CHECK(r.vertex_count() == m.vertex_count());
  CHECK(r.expr_dim() == m.expr_dim());
  for (size_t i = 0; i < m.template_verts.size(); ++i)
    CHECK(r.template_verts[i] == m.template_verts[i]);
  for (size_t i = 0; i < m.expr_basis.size(); ++i)
    CHECK(r.expr_basis[i] == m.expr_basis[i]);
  CHECK(*r.faces == *m.faces);
  fs::remove(path);
}

TEST_CASE("bad skin row is rejected with its index") {
  namespace fs = std::filesystem;
  HeadModelAssets m = make_test_model();
  m.skin_weights[2 * 2] = 0.4;
  m.skin_weights[2 * 2 + 1] = 0.5;  // sums to 0.9
  const std::string path =
      (fs::temp_directory_path() / "etg_test_bad_head.etga").string();
  try {
    save_head_model(path, m);
    FAIL("expected ValidationError");
  } catch (const ValidationError& e) {
    CHECK(std::string(e.what()).find("row 2") != std::string::npos);
  }
  fs::remove(path);
}

TEST_CASE("rigid_transform_op gradient") {
  Rng rng(12);
  const Mat3 R = rodrigues(etg::testing::random_vec3(rng, 0.7));
  const Vec3 t{0.1, -0.2, 0.3};
  Tensor x({4, 3});
  for (size_t i = 0; i < x.size(); ++i) x[i] = rng.normal();
  Tensor w({4, 3});
  for (size_t i = 0; i < w.size(); ++i) w[i] = rng.normal();
  auto build = [&](ad::Tape& tp, ad::ValueRef in) {
    return tp.sum(tp.mul(rigid_transform_op(tp, in, R, t), tp.constant(w)));
  };
  CHECK(ad::finite_diff_check(build, x, 1e-5) < 1e-7);
}
