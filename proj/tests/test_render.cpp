#include <cstring>

#include "doctest.h"
#include "etg/autodiff.h"
#include "etg/common.h"
#include "etg/render.h"
#include "etg/rng.h"
#include "helpers.h"

using namespace etg;
using etg::testing::make_cloud;
using etg::testing::make_test_camera;

namespace {

GlobalGaussian basic_gaussian(const Vec3& mu, double scale, double alpha,
                              const Vec3& color) {
  GlobalGaussian g;
  g.mu = mu;
  g.rot = Quat::identity();
  g.scale = {scale, scale, scale};
  g.alpha = alpha;
  g.sh_dc = color;
  return g;
}

}  // namespace

TEST_CASE("projection: gaussian on the optical axis lands at the principal point") {
  Camera cam = make_test_camera(64, 100.0);
  cam.cx = cam.cy = 32.0;
  const auto p =
      project_gaussian(basic_gaussian({0, 0, 1}, 0.05, 0.9, {1, 0, 0}), cam);
  CHECK(!p.culled);
  CHECK(p.mean2d[0] == doctest::Approx(32.0).epsilon(1e-12));
  CHECK(p.mean2d[1] == doctest::Approx(32.0).epsilon(1e-12));
  CHECK(p.z == doctest::Approx(1.0));
}

TEST_CASE("projection: isotropic covariance matches the hand formula") {
  Camera cam = make_test_camera(64, 100.0);
  const double s = 0.04, z = 2.0;
  const auto p =
      project_gaussian(basic_gaussian({0, 0, z}, s, 0.9, {1, 0, 0}), cam);
  REQUIRE(!p.culled);
  const double expect = (100.0 * s / z) * (100.0 * s / z) + 0.3;
  CHECK(p.cov2d[0] == doctest::Approx(expect).epsilon(1e-10));
  CHECK(p.cov2d[1] == doctest::Approx(0.0).epsilon(1e-12));
  CHECK(p.cov2d[2] == doctest::Approx(expect).epsilon(1e-10));
}

TEST_CASE("projection: gaussian behind the camera is culled") {
  Camera cam = make_test_camera();
  const auto p =
      project_gaussian(basic_gaussian({0, 0, -1}, 0.05, 0.9, {1, 0, 0}), cam);
  CHECK(p.culled);
}

TEST_CASE("render: empty scene gives black, alpha 0, far depth") {
  Camera cam = make_test_camera(16);
  GlobalCloud empty;
  const RenderOutput out = render(empty, cam);
  for (size_t i = 0; i < out.color.size(); ++i) CHECK(out.color[i] == 0.0);
  for (size_t i = 0; i < out.alpha.size(); ++i) CHECK(out.alpha[i] == 0.0);
  for (size_t i = 0; i < out.depth.size(); ++i) CHECK(out.depth[i] == kFarDepth);
}

TEST_CASE("render: single splat centered on a pixel matches the closed form") {
  Camera cam = make_test_camera(64, 100.0);
  // mean2d = (32.5, 32.5): the center of pixel (32, 32)
  const Vec3 mu{0.005, 0.005, 1.0};
  const double alpha = 0.8;
  const Vec3 color{0.7, 0.3, 0.2};
  const GlobalCloud cloud = make_cloud({basic_gaussian(mu, 0.05, alpha, color)});
  const RenderOutput out = render(cloud, cam);
  const size_t pix = 32 * 64 + 32;
  CHECK(out.alpha[pix] == doctest::Approx(alpha).epsilon(1e-5));
  CHECK(out.color[pix * 3] == doctest::Approx(alpha * 0.7).epsilon(1e-5));
  CHECK(out.color[pix * 3 + 1] == doctest::Approx(alpha * 0.3).epsilon(1e-5));
  CHECK(out.color[pix * 3 + 2] == doctest::Approx(alpha * 0.2).epsilon(1e-5));
  CHECK(out.depth[pix] == doctest::Approx(1.0).epsilon(1e-9));
  CHECK(out.contrib_count[pix] >= 1);
}

TEST_CASE("render: nearer red occludes farther blue") {
  Camera cam = make_test_camera(64, 100.0);
  const GlobalCloud cloud = make_cloud(
      {basic_gaussian({0.005, 0.005, 2.0}, 0.2, 0.99, {0, 0, 1}),
       basic_gaussian({0.005, 0.005, 1.0}, 0.1, 0.99, {1, 0, 0})});
  const RenderOutput out = render(cloud, cam);
  const size_t pix = 32 * 64 + 32;
  CHECK(out.color[pix * 3] > 0.9);
  CHECK(out.color[pix * 3 + 2] < 0.05);
}

TEST_CASE("render: adding a gaussian never decreases pixel alpha") {
  Camera cam = make_test_camera(32, 50.0);
  Rng rng(17);
  std::vector<GlobalGaussian> gs;
  for (int i = 0; i < 5; ++i)
    gs.push_back(basic_gaussian({0.2 * rng.normal(), 0.2 * rng.normal(),
                                 1.0 + 0.5 * rng.uniform()},
                                0.05 + 0.05 * rng.uniform(),
                                0.3 + 0.4 * rng.uniform(),
                                {0.5, 0.5, 0.5}));
  const RenderOutput before = render(make_cloud(gs), cam);
  gs.push_back(basic_gaussian({0.0, 0.0, 1.2}, 0.1, 0.6, {0.9, 0.1, 0.1}));
  const RenderOutput after = render(make_cloud(gs), cam);
  for (size_t i = 0; i < before.alpha.size(); ++i)
    CHECK(after.alpha[i] >= before.alpha[i] - 1e-12);
}

TEST_CASE("render is invariant to input order and bitwise repeatable") {
  Camera cam = make_test_camera(32, 50.0);
  Rng rng(19);
  std::vector<GlobalGaussian> gs;
  for (int i = 0; i < 12; ++i)
    gs.push_back(basic_gaussian({0.3 * rng.normal(), 0.3 * rng.normal(),
                                 1.0 + rng.uniform()},
                                0.04 + 0.04 * rng.uniform(),
                                0.2 + 0.6 * rng.uniform(),
                                {rng.uniform(), rng.uniform(), rng.uniform()}));
  const RenderOutput a = render(make_cloud(gs), cam);
  const RenderOutput a2 = render(make_cloud(gs), cam);
  CHECK(std::memcmp(a.color.data(), a2.color.data(),
                    a.color.size() * sizeof(double)) == 0);

  std::vector<GlobalGaussian> shuffled = gs;
  std::reverse(shuffled.begin(), shuffled.end());
  const RenderOutput b = render(make_cloud(shuffled), cam);
  CHECK(std::memcmp(a.color.data(), b.color.data(),
                    a.color.size() * sizeof(double)) == 0);
  CHECK(std::memcmp(a.alpha.data(), b.alpha.data(),
                    a.alpha.size() * sizeof(double)) == 0);
  CHECK(std::memcmp(a.depth.data(), b.depth.data(),
                    a.depth.size() * sizeof(double)) == 0);
}

TEST_CASE("render results do not depend on the thread count") {
  Camera cam = make_test_camera(48, 60.0);
  Rng rng(23);
  std::vector<GlobalGaussian> gs;
  for (int i = 0; i < 30; ++i)
    gs.push_back(basic_gaussian({0.3 * rng.normal(), 0.3 * rng.normal(),
                                 1.0 + rng.uniform()},
                                0.05, 0.5, {0.3, 0.6, 0.9}));
  RenderOptions one;
  one.threads = 1;
  RenderOptions four;
  four.threads = 4;
  const RenderOutput a = render(make_cloud(gs), cam, one);
  const RenderOutput b = render(make_cloud(gs), cam, four);
  CHECK(std::memcmp(a.color.data(), b.color.data(),
                    a.color.size() * sizeof(double)) == 0);
  CHECK(std::memcmp(a.depth.data(), b.depth.data(),
                    a.depth.size() * sizeof(double)) == 0);
}

TEST_CASE("render_op gradients pass finite differences (interior pixels)") {
  Camera cam = make_test_camera(24, 40.0);
  Rng rng(29);
  const size_t m = 3;
  // mu(3) rot(4) scale(3) alpha(1) sh(3) = 14 per gaussian
  Tensor x({m * 14});
  for (size_t i = 0; i < m; ++i) {
    double* p = x.data() + i * 14;
    p[0] = 0.05 * rng.normal();
    p[1] = 0.05 * rng.normal();
    p[2] = 0.9 + 0.4 * double(i);
    p[3] = 1.0;
    p[4] = 0.3 * rng.normal();
    p[5] = 0.3 * rng.normal();
    p[6] = 0.3 * rng.normal();
    for (int c = 0; c < 3; ++c) p[7 + c] = 0.05 + 0.03 * rng.uniform();
    p[10] = 0.35 + 0.3 * rng.uniform();
    for (int c = 0; c < 3; ++c) p[11 + c] = 0.25 + 0.5 * rng.uniform();
  }
  Tensor wc({24, 24, 3}), wa({24, 24});
  for (size_t i = 0; i < wc.size(); ++i) wc[i] = rng.normal();
  for (size_t i = 0; i < wa.size(); ++i) wa[i] = rng.normal();
  auto build = [&](ad::Tape& t, ad::ValueRef in) {
    ad::ValueRef flat = t.reshape(in, {1, m * 14});
    ad::ValueRef mu = t.reshape(
        t.concat_cols(t.concat_cols(t.slice_cols(flat, 0, 3),
                                    t.slice_cols(flat, 14, 17)),
                      t.slice_cols(flat, 28, 31)),
        {m, 3});
    ad::ValueRef rot = t.reshape(
        t.concat_cols(t.concat_cols(t.slice_cols(flat, 3, 7),
                                    t.slice_cols(flat, 17, 21)),
                      t.slice_cols(flat, 31, 35)),
        {m, 4});
    ad::ValueRef sc = t.reshape(
        t.concat_cols(t.concat_cols(t.slice_cols(flat, 7, 10),
                                    t.slice_cols(flat, 21, 24)),
                      t.slice_cols(flat, 35, 38)),
        {m, 3});
    ad::ValueRef al = t.reshape(
        t.concat_cols(t.concat_cols(t.slice_cols(flat, 10, 11),
                                    t.slice_cols(flat, 24, 25)),
                      t.slice_cols(flat, 38, 39)),
        {m});
    ad::ValueRef sh = t.reshape(
        t.concat_cols(t.concat_cols(t.slice_cols(flat, 11, 14),
                                    t.slice_cols(flat, 25, 28)),
                      t.slice_cols(flat, 39, 42)),
        {m, 3, 1});
    RenderRefs out = render_op(t, cam, mu, rot, sc, al, sh);
    ad::ValueRef lc = t.sum(t.mul(out.color, t.constant(wc)));
    ad::ValueRef la = t.sum(t.mul(out.alpha, t.constant(wa)));
    return t.add(lc, la);
  };
  CHECK(ad::finite_diff_check(build, x, 1e-4) < 5e-3);
}

TEST_CASE("render_op depth gradient on a covered pixel") {
  Camera cam = make_test_camera(16, 40.0);
  Rng rng(31);
  // one big opaque splat covering the center; probe depth sensitivity
  Tensor x({3}, {0.01, 0.01, 1.2});  // mu only
  auto build = [&](ad::Tape& t, ad::ValueRef in) {
    ad::ValueRef mu = t.reshape(in, {1, 3});
    ad::ValueRef rot = t.constant(Tensor({1, 4}, {1, 0, 0, 0}));
    ad::ValueRef sc = t.constant(Tensor({1, 3}, {0.3, 0.3, 0.3}));
    ad::ValueRef al = t.constant(Tensor({1}, {0.9}));
    ad::ValueRef sh = t.constant(Tensor({1, 3, 1}, {0.5, 0.5, 0.5}));
    RenderRefs out = render_op(t, cam, mu, rot, sc, al, sh);
    // average depth over the 4 center pixels
    ad::ValueRef d = t.reshape(out.depth, {16, 16});
    ad::ValueRef center = t.slice_cols(t.slice_rows(d, 7, 9), 7, 9);
    return t.mean(center);
  };
  CHECK(ad::finite_diff_check(build, x, 1e-4) < 5e-3);
}

TEST_CASE("render_op with degree-1 sh: view-dependent gradients check out") {
  Camera cam = make_test_camera(24, 40.0);
  Rng rng(37);
  // mu(3) + sh(3x4 = 12) = 15 inputs
  Tensor x({15});
  x[0] = 0.03;
  x[1] = -0.02;
  x[2] = 1.1;
  // sh layout per channel: [dc, b1, b2, b3]; keep colors away from the clamp
  for (size_t i = 3; i < 15; ++i) {
    const bool dc = (i - 3) % 4 == 0;
    x[i] = dc ? 0.5 + 0.05 * rng.normal() : 0.05 * rng.normal();
  }
  Tensor wc({24, 24, 3});
  for (size_t i = 0; i < wc.size(); ++i) wc[i] = rng.normal();
  auto build = [&](ad::Tape& t, ad::ValueRef in) {
    ad::ValueRef flat = t.reshape(in, {1, 15});
    ad::ValueRef mu = t.reshape(t.slice_cols(flat, 0, 3), {1, 3});
    ad::ValueRef sh = t.reshape(t.slice_cols(flat, 3, 15), {1, 3, 4});
    ad::ValueRef rot = t.constant(Tensor({1, 4}, {1, 0, 0, 0}));
    ad::ValueRef sc = t.constant(Tensor({1, 3}, {0.08, 0.08, 0.08}));
    ad::ValueRef al = t.constant(Tensor({1}, {0.6}));
    RenderRefs out = render_op(t, cam, mu, rot, sc, al, sh);
    return t.sum(t.mul(out.color, t.constant(wc)));
  };
  CHECK(ad::finite_diff_check(build, x, 1e-4) < 5e-3);
}

TEST_CASE("depth_to_normals: frontal plane gives (0,0,-1)") {
  Camera cam = make_test_camera(16, 40.0);
  Tensor depth = Tensor::full({16, 16}, 2.0);
  Tensor alpha = Tensor::full({16, 16}, 1.0);
  Tensor mask;
  const Tensor n = depth_to_normals(depth, cam, alpha, 0.5, &mask);
  for (size_t y = 1; y < 15; ++y)
    for (size_t x = 1; x < 15; ++x) {
      const size_t pix = y * 16 + x;
      CHECK(mask[pix] == 1.0);
      CHECK(n[pix * 3] == doctest::Approx(0.0).epsilon(1e-12));
      CHECK(n[pix * 3 + 1] == doctest::Approx(0.0).epsilon(1e-12));
      CHECK(n[pix * 3 + 2] == doctest::Approx(-1.0).epsilon(1e-12));
    }
  // border pixels are undefined
  CHECK(n[0] == 0.0);
  CHECK(mask[0] == 0.0);
}

TEST_CASE("depth_to_normals: tilted plane matches the analytic normal") {
  Camera cam = make_test_camera(32, 60.0);
  const Vec3 plane_n = Vec3{0.3, -0.2, -1.0}.normalized();
  const double plane_c = -2.0;  // n . P = c with n.z < 0, z > 0
  Tensor depth({32, 32});
  Tensor alpha = Tensor::full({32, 32}, 1.0);
  for (size_t y = 0; y < 32; ++y)
    for (size_t x = 0; x < 32; ++x) {
      const double au = (double(x) + 0.5 - cam.cx) / cam.fx;
      const double bv = (double(y) + 0.5 - cam.cy) / cam.fy;
      depth[y * 32 + x] =
          plane_c / (au * plane_n.x + bv * plane_n.y + plane_n.z);
    }
  const Tensor n = depth_to_normals(depth, cam, alpha, 0.5);
  for (size_t y = 2; y < 30; ++y)
    for (size_t x = 2; x < 30; ++x) {
      const size_t pix = y * 32 + x;
      CHECK(std::fabs(n[pix * 3] - plane_n.x) < 1e-3);
      CHECK(std::fabs(n[pix * 3 + 1] - plane_n.y) < 1e-3);
      CHECK(std::fabs(n[pix * 3 + 2] - plane_n.z) < 1e-3);
    }
}

TEST_CASE("depth_to_normals background pixels give the zero vector") {
  Camera cam = make_test_camera(16, 40.0);
  Tensor depth = Tensor::full({16, 16}, kFarDepth);
  Tensor alpha({16, 16});
  const Tensor n = depth_to_normals(depth, cam, alpha, 0.5);
  for (size_t i = 0; i < n.size(); ++i) CHECK(n[i] == 0.0);
}

TEST_CASE("depth_to_normals_op gradient on a ramp") {
  Camera cam = make_test_camera(10, 30.0);
  Rng rng(41);
  Tensor depth({10, 10});
  for (size_t y = 0; y < 10; ++y)
    for (size_t x = 0; x < 10; ++x)
      depth[y * 10 + x] = 2.0 + 0.05 * double(x) - 0.03 * double(y);
  Tensor alpha = Tensor::full({10, 10}, 1.0);
  Tensor w({10, 10, 3});
  for (size_t i = 0; i < w.size(); ++i) w[i] = rng.normal();
  auto build = [&](ad::Tape& t, ad::ValueRef in) {
    ad::ValueRef n = depth_to_normals_op(t, in, cam, alpha, 0.5);
    return t.sum(t.mul(n, t.constant(w)));
  };
  CHECK(ad::finite_diff_check(build, depth, 1e-5) < 1e-4);
}
