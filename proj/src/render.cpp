#include "etg/render.h"

#include <algorithm>
#include <cmath>
#include <memory>
#include <thread>

#include "etg/common.h"

namespace etg {

size_t sh_basis_size(int degree) {
  if (degree < 0 || degree > 3)
    throw ValidationError("sh degree must be in 0..3");
  return size_t((degree + 1) * (degree + 1));
}

namespace {

constexpr int kTile = 16;
constexpr double kCovReg = 0.3;  // px^2 added to the 2-D covariance diagonal

constexpr double kC1 = 0.4886025119029199;
constexpr double kC2[5] = {1.0925484305920792, -1.0925484305920792,
                           0.31539156525252005, -1.0925484305920792,
                           0.5462742152960396};
constexpr double kC3[7] = {-0.5900435899266435, 2.890611442640554,
                           -0.4570457994644658, 0.3731763325901154,
                           -0.4570457994644658, 1.445305721320277,
                           -0.5900435899266435};

// Basis values for bands 1..B-1 (band 0 is the direct DC color).
void sh_basis(const Vec3& d, size_t bands, double* y) {
  const double x = d.x, yy = d.y, z = d.z;
  y[0] = 1.0;
  if (bands <= 1) return;
  y[1] = -kC1 * yy;
  y[2] = kC1 * z;
  y[3] = -kC1 * x;
  if (bands <= 4) return;
  y[4] = kC2[0] * x * yy;
  y[5] = kC2[1] * yy * z;
  y[6] = kC2[2] * (2.0 * z * z - x * x - yy * yy);
  y[7] = kC2[3] * x * z;
  y[8] = kC2[4] * (x * x - yy * yy);
  if (bands <= 9) return;
  y[9] = kC3[0] * yy * (3.0 * x * x - yy * yy);
  y[10] = kC3[1] * x * yy * z;
  y[11] = kC3[2] * yy * (4.0 * z * z - x * x - yy * yy);
  y[12] = kC3[3] * z * (2.0 * z * z - 3.0 * x * x - 3.0 * yy * yy);
  y[13] = kC3[4] * x * (4.0 * z * z - x * x - yy * yy);
  y[14] = kC3[5] * z * (x * x - yy * yy);
  y[15] = kC3[6] * x * (x * x - 3.0 * yy * yy);
}

// d y_b / d dir for bands 0..B-1.
void sh_basis_grad(const Vec3& d, size_t bands, Vec3* gy) {
  const double x = d.x, yy = d.y, z = d.z;
  gy[0] = {0, 0, 0};
  if (bands <= 1) return;
  gy[1] = {0, -kC1, 0};
  gy[2] = {0, 0, kC1};
  gy[3] = {-kC1, 0, 0};
  if (bands <= 4) return;
  gy[4] = {kC2[0] * yy, kC2[0] * x, 0};
  gy[5] = {0, kC2[1] * z, kC2[1] * yy};
  gy[6] = {-2.0 * kC2[2] * x, -2.0 * kC2[2] * yy, 4.0 * kC2[2] * z};
  gy[7] = {kC2[3] * z, 0, kC2[3] * x};
  gy[8] = {2.0 * kC2[4] * x, -2.0 * kC2[4] * yy, 0};
  if (bands <= 9) return;
  gy[9] = {kC3[0] * 6.0 * x * yy, kC3[0] * (3.0 * x * x - 3.0 * yy * yy), 0};
  gy[10] = {kC3[1] * yy * z, kC3[1] * x * z, kC3[1] * x * yy};
  gy[11] = {-2.0 * kC3[2] * x * yy,
            kC3[2] * (4.0 * z * z - x * x - 3.0 * yy * yy),
            kC3[2] * 8.0 * yy * z};
  gy[12] = {-6.0 * kC3[3] * x * z, -6.0 * kC3[3] * yy * z,
            kC3[3] * (6.0 * z * z - 3.0 * x * x - 3.0 * yy * yy)};
  gy[13] = {kC3[4] * (4.0 * z * z - 3.0 * x * x - yy * yy),
            -2.0 * kC3[4] * x * yy, kC3[4] * 8.0 * x * z};
  gy[14] = {2.0 * kC3[5] * x * z, -2.0 * kC3[5] * yy * z,
            kC3[5] * (x * x - yy * yy)};
  gy[15] = {kC3[6] * (3.0 * x * x - 3.0 * yy * yy), -kC3[6] * 6.0 * x * yy, 0};
}

struct VisRecord {
  uint32_t index;
  double mean2d[2];
  double cov[3];      // packed xx, xy, yy (regularized)
  double inv_cov[3];  // packed inverse
  double z;
  double color[3];
  uint8_t clamped[3];
  double alpha;
  int x0, x1, y0, y1;
  Vec3 p_cam;
  Vec3 dir;        // unit view direction, world frame
  double dir_len;  // |mu - camera position|
};

// Projects one Gaussian given raw attribute pointers. Returns false if culled.
bool project_one(const Camera& cam, const double* mu, const double* rot,
                 const double* scale, double alpha, const double* sh,
                 size_t bands, VisRecord& out) {
  const Vec3 p = cam.to_camera({mu[0], mu[1], mu[2]});
  if (p.z < cam.near) return false;

  const Quat q = Quat{rot[0], rot[1], rot[2], rot[3]}.normalized();
  const Mat3 r = quat_to_mat(q);
  // Sigma = R diag(s^2) R^T
  Mat3 sigma;
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) {
      double acc = 0.0;
      for (int c = 0; c < 3; ++c)
        acc += scale[c] * scale[c] * r(i, c) * r(j, c);
      sigma(i, j) = acc;
    }

  const double iz = 1.0 / p.z;
  const double jr0[3] = {cam.fx * iz, 0.0, -cam.fx * p.x * iz * iz};
  const double jr1[3] = {0.0, cam.fy * iz, -cam.fy * p.y * iz * iz};
  // M = J W, rows m0/m1
  Vec3 m0{}, m1{};
  for (int c2 = 0; c2 < 3; ++c2) {
    double a0 = 0.0, a1 = 0.0;
    for (int k = 0; k < 3; ++k) {
      a0 += jr0[k] * cam.rot(k, c2);
      a1 += jr1[k] * cam.rot(k, c2);
    }
    if (c2 == 0) {
      m0.x = a0;
      m1.x = a1;
    } else if (c2 == 1) {
      m0.y = a0;
      m1.y = a1;
    } else {
      m0.z = a0;
      m1.z = a1;
    }
  }
  const Vec3 sm0 = sigma * m0, sm1 = sigma * m1;
  out.cov[0] = m0.dot(sm0) + kCovReg;
  out.cov[1] = m0.dot(sm1);
  out.cov[2] = m1.dot(sm1) + kCovReg;

  const double det = out.cov[0] * out.cov[2] - out.cov[1] * out.cov[1];
  if (det <= 0.0) return false;
  const double idet = 1.0 / det;
  out.inv_cov[0] = out.cov[2] * idet;
  out.inv_cov[1] = -out.cov[1] * idet;
  out.inv_cov[2] = out.cov[0] * idet;

  out.mean2d[0] = cam.fx * p.x * iz + cam.cx;
  out.mean2d[1] = cam.fy * p.y * iz + cam.cy;
  out.z = p.z;
  out.p_cam = p;
  out.alpha = alpha;

  // 5.7 sigma: beyond this the weight is below alpha_min for any opacity,
  // so the box edge never truncates a visible contribution
  const double mid = 0.5 * (out.cov[0] + out.cov[2]);
  const double disc = std::sqrt(std::max(mid * mid - det, 0.0));
  const double radius = 5.7 * std::sqrt(std::max(mid + disc, 0.0));
  out.x0 = int(std::floor(out.mean2d[0] - radius));
  out.x1 = int(std::ceil(out.mean2d[0] + radius));
  out.y0 = int(std::floor(out.mean2d[1] - radius));
  out.y1 = int(std::ceil(out.mean2d[1] + radius));
  out.x0 = std::max(out.x0, 0);
  out.y0 = std::max(out.y0, 0);
  out.x1 = std::min(out.x1, int(cam.width) - 1);
  out.y1 = std::min(out.y1, int(cam.height) - 1);
  if (out.x0 > out.x1 || out.y0 > out.y1) return false;

  // view-dependent color
  const Vec3 cpos = cam.position();
  const Vec3 dvec = Vec3{mu[0], mu[1], mu[2]} - cpos;
  out.dir_len = dvec.norm();
  out.dir = dvec * (1.0 / out.dir_len);
  double basis[16];
  sh_basis(out.dir, bands, basis);
  for (int c = 0; c < 3; ++c) {
    double v = sh[c * bands];  // DC color directly
    for (size_t b = 1; b < bands; ++b) v += sh[c * bands + b] * basis[b];
    if (v < 0.0) {
      out.color[c] = 0.0;
      out.clamped[c] = 1;
    } else if (v > 1.0) {
      out.color[c] = 1.0;
      out.clamped[c] = 1;
    } else {
      out.color[c] = v;
      out.clamped[c] = 0;
    }
  }
  return true;
}

struct Contribution {
  uint32_t vis;  // index into the visible list
  double sigma;
  double w;
  double T;  // transmittance before this splat
};

struct TileData {
  int px0, py0, px1, py1;            // pixel rect (inclusive)
  std::vector<uint32_t> bins;        // visible-list indices, depth order
  std::vector<Contribution> contribs;
  std::vector<uint32_t> counts;      // contributions per pixel, tile order
};

struct ForwardResult {
  std::vector<VisRecord> vis;
  std::vector<TileData> tiles;
  Tensor color, alpha, depth;
  std::vector<uint32_t> contrib_count;
};

// Shared forward pass. keep_contribs enables the backward replay buffers.
void forward_pass(const Camera& cam, const RenderOptions& opts, size_t count,
                  const double* mu, const double* rot, const double* scale,
                  const double* alpha, const double* sh, size_t bands,
                  bool keep_contribs, ForwardResult& res) {
  cam.validate();
  const size_t W = cam.width, H = cam.height;
  res.color = Tensor({H, W, 3});
  res.alpha = Tensor({H, W});
  res.depth = Tensor::full({H, W}, kFarDepth);
  res.contrib_count.assign(H * W, 0);

  res.vis.clear();
  res.vis.reserve(count);
  for (size_t i = 0; i < count; ++i) {
    for (int c = 0; c < 3; ++c) {
      if (!std::isfinite(mu[i * 3 + c]) || !std::isfinite(scale[i * 3 + c]))
        throw NumericError("render: non-finite attribute on gaussian " +
                           std::to_string(i));
    }
    if (!std::isfinite(alpha[i]))
      throw NumericError("render: non-finite opacity on gaussian " +
                         std::to_string(i));
    VisRecord rec;
    if (project_one(cam, mu + i * 3, rot + i * 4, scale + i * 3, alpha[i],
                    sh + i * 3 * bands, bands, rec)) {
      rec.index = uint32_t(i);
      res.vis.push_back(rec);
    }
  }
  std::sort(res.vis.begin(), res.vis.end(),
            [](const VisRecord& a, const VisRecord& b) {
              if (a.z != b.z) return a.z < b.z;
              return a.index < b.index;
            });

  const int tiles_x = int((W + kTile - 1) / kTile);
  const int tiles_y = int((H + kTile - 1) / kTile);
  res.tiles.assign(size_t(tiles_x) * tiles_y, TileData{});
  for (int ty = 0; ty < tiles_y; ++ty)
    for (int tx = 0; tx < tiles_x; ++tx) {
      TileData& t = res.tiles[size_t(ty) * tiles_x + tx];
      t.px0 = tx * kTile;
      t.py0 = ty * kTile;
      t.px1 = std::min(t.px0 + kTile - 1, int(W) - 1);
      t.py1 = std::min(t.py0 + kTile - 1, int(H) - 1);
    }
  for (uint32_t v = 0; v < res.vis.size(); ++v) {
    const VisRecord& r = res.vis[v];
    const int tx0 = r.x0 / kTile, tx1 = r.x1 / kTile;
    const int ty0 = r.y0 / kTile, ty1 = r.y1 / kTile;
    for (int ty = ty0; ty <= ty1; ++ty)
      for (int tx = tx0; tx <= tx1; ++tx)
        res.tiles[size_t(ty) * tiles_x + tx].bins.push_back(v);
  }

  auto run_tile = [&](TileData& tile) {
    if (keep_contribs)
      tile.counts.assign(
          size_t(tile.px1 - tile.px0 + 1) * size_t(tile.py1 - tile.py0 + 1),
          0);
    size_t pix_in_tile = 0;
    for (int py = tile.py0; py <= tile.py1; ++py) {
      for (int px = tile.px0; px <= tile.px1; ++px, ++pix_in_tile) {
        const double cxp = px + 0.5, cyp = py + 0.5;
        double T = 1.0;
        double acc[3] = {0, 0, 0};
        double acc_a = 0.0, acc_z = 0.0;
        uint32_t n = 0;
        for (uint32_t v : tile.bins) {
          const VisRecord& r = res.vis[v];
          if (px < r.x0 || px > r.x1 || py < r.y0 || py > r.y1) continue;
          const double dx = cxp - r.mean2d[0];
          const double dy = cyp - r.mean2d[1];
          const double power =
              -0.5 * (r.inv_cov[0] * dx * dx + 2.0 * r.inv_cov[1] * dx * dy +
                      r.inv_cov[2] * dy * dy);
          if (power < -16.2) continue;  // below alpha_min for any opacity
          const double sigma = std::exp(power);
          double w = r.alpha * sigma;
          if (w < opts.alpha_min) continue;
          if (w > opts.max_weight) w = opts.max_weight;
          const double omega = T * w;
          acc[0] += omega * r.color[0];
          acc[1] += omega * r.color[1];
          acc[2] += omega * r.color[2];
          acc_a += omega;
          acc_z += omega * r.z;
          ++n;
          if (keep_contribs) {
            tile.contribs.push_back({v, sigma, w, T});
            ++tile.counts[pix_in_tile];
          }
          T *= 1.0 - w;
          if (T < opts.transmittance_min) break;
        }
        const size_t pix = size_t(py) * W + px;
        res.color[pix * 3] = acc[0];
        res.color[pix * 3 + 1] = acc[1];
        res.color[pix * 3 + 2] = acc[2];
        res.alpha[pix] = acc_a;
        res.depth[pix] = acc_a >= 1e-6 ? acc_z / acc_a : kFarDepth;
        res.contrib_count[pix] = n;
      }
    }
  };

  const int nthreads = std::max(1, opts.threads);
  if (nthreads == 1 || res.tiles.size() <= 1) {
    for (TileData& t : res.tiles) run_tile(t);
  } else {
    std::vector<std::thread> pool;
    const size_t per = res.tiles.size();
    for (int w = 0; w < nthreads; ++w)
      pool.emplace_back([&, w]() {
        for (size_t t = size_t(w); t < per; t += size_t(nthreads))
          run_tile(res.tiles[t]);
      });
    for (auto& th : pool) th.join();
  }
}

}  // namespace

ProjectedGaussian project_gaussian(const GlobalGaussian& g, const Camera& cam) {
  cam.validate();
  ProjectedGaussian out;
  const double mu[3] = {g.mu.x, g.mu.y, g.mu.z};
  const double rot[4] = {g.rot.w, g.rot.x, g.rot.y, g.rot.z};
  const double scale[3] = {g.scale.x, g.scale.y, g.scale.z};
  const double sh[3] = {g.sh_dc.x, g.sh_dc.y, g.sh_dc.z};
  VisRecord rec;
  if (!project_one(cam, mu, rot, scale, g.alpha, sh, 1, rec)) return out;
  out.culled = false;
  out.mean2d[0] = rec.mean2d[0];
  out.mean2d[1] = rec.mean2d[1];
  out.cov2d[0] = rec.cov[0];
  out.cov2d[1] = rec.cov[1];
  out.cov2d[2] = rec.cov[2];
  out.z = rec.z;
  return out;
}

RenderOutput render(const GlobalCloud& globals, const Camera& cam,
                    const RenderOptions& opts) {
  const size_t m = globals.size();
  ForwardResult res;
  static const double kNoData = 0.0;
  const size_t bands = m ? globals.sh.dim(2) : 1;
  forward_pass(cam, opts, m, m ? globals.mu.data() : &kNoData,
               m ? globals.rot.data() : &kNoData,
               m ? globals.scale.data() : &kNoData,
               m ? globals.alpha.data() : &kNoData,
               m ? globals.sh.data() : &kNoData, bands,
               /*keep_contribs=*/false, res);
  return RenderOutput{std::move(res.color), std::move(res.alpha),
                      std::move(res.depth), std::move(res.contrib_count)};
}

RenderRefs render_op(ad::Tape& tape, const Camera& cam, ad::ValueRef mu,
                     ad::ValueRef rot, ad::ValueRef scale, ad::ValueRef alpha,
                     ad::ValueRef sh, const RenderOptions& opts) {
  const Tensor& vmu = tape.val(mu);
  const Tensor& vrot = tape.val(rot);
  const Tensor& vscale = tape.val(scale);
  const Tensor& valpha = tape.val(alpha);
  const Tensor& vsh = tape.val(sh);
  const size_t m = valpha.size();
  if (vmu.dim(0) != m || vrot.dim(0) != m || vscale.dim(0) != m ||
      vsh.dim(0) != m)
    throw ValidationError("render op: attribute count mismatch");
  const size_t bands = vsh.dim(2);

  auto res = std::make_shared<ForwardResult>();
  forward_pass(cam, opts, m, vmu.data(), vrot.data(), vscale.data(),
               valpha.data(), vsh.data(), bands, /*keep_contribs=*/true, *res);

  Tensor out_color = res->color;
  Tensor out_alpha = res->alpha;
  Tensor out_depth = res->depth;

  const Camera cam_copy = cam;
  auto backward = [res, cam_copy, bands, mu, rot, scale, alpha, sh](
                      ad::Tape& t, const std::vector<const Tensor*>& g) {
    const Tensor* gcolor = g[0];
    const Tensor* galpha = g[1];
    const Tensor* gdepth = g[2];
    const size_t W = cam_copy.width;
    const size_t nvis = res->vis.size();
    if (nvis == 0) return;

    // per-visible accumulators: mean2d(2) invcov(3) alpha(1) color(3) z(1)
    std::vector<double> acc(nvis * 10, 0.0);

    for (const TileData& tile : res->tiles) {
      size_t cursor = 0;
      size_t pix_in_tile = 0;
      for (int py = tile.py0; py <= tile.py1; ++py) {
        for (int px = tile.px0; px <= tile.px1; ++px, ++pix_in_tile) {
          const uint32_t n = tile.counts.empty() ? 0 : tile.counts[pix_in_tile];
          if (n == 0) continue;
          const size_t pix = size_t(py) * W + px;
          const double gc[3] = {
              gcolor ? (*gcolor)[pix * 3] : 0.0,
              gcolor ? (*gcolor)[pix * 3 + 1] : 0.0,
              gcolor ? (*gcolor)[pix * 3 + 2] : 0.0};
          const double ga = galpha ? (*galpha)[pix] : 0.0;
          const double sa = res->alpha[pix];
          const bool depth_valid = sa >= 1e-6;
          const double gd =
              (gdepth && depth_valid) ? (*gdepth)[pix] : 0.0;
          const double dval = depth_valid ? res->depth[pix] : 0.0;
          const double cxp = px + 0.5, cyp = py + 0.5;

          // suffix accumulation over this pixel's contributions
          double s_after = 0.0;
          for (size_t j = cursor + n; j-- > cursor;) {
            const Contribution& cb = tile.contribs[j];
            const VisRecord& r = res->vis[cb.vis];
            double a_j = gc[0] * r.color[0] + gc[1] * r.color[1] +
                         gc[2] * r.color[2] + ga;
            if (gd != 0.0) a_j += gd * (r.z - dval) / sa;
            const double omega = cb.T * cb.w;
            const double gw = a_j * cb.T - s_after / (1.0 - cb.w);
            s_after += a_j * omega;

            double* slot = acc.data() + size_t(cb.vis) * 10;
            // color and depth direct terms
            slot[6] += omega * gc[0];
            slot[7] += omega * gc[1];
            slot[8] += omega * gc[2];
            if (gd != 0.0) slot[9] += gd * omega / sa;
            // w = alpha * sigma (zero gradient when the ceiling clipped it)
            const bool capped = r.alpha * cb.sigma > cb.w;
            if (!capped) {
              slot[5] += cb.sigma * gw;
              const double gsigma = r.alpha * gw;
              const double gpower = gsigma * cb.sigma;
              const double dx = cxp - r.mean2d[0];
              const double dy = cyp - r.mean2d[1];
              // power = -1/2 d^T Lambda d with d = pix - mean2d
              slot[0] += gpower * (r.inv_cov[0] * dx + r.inv_cov[1] * dy);
              slot[1] += gpower * (r.inv_cov[1] * dx + r.inv_cov[2] * dy);
              slot[2] += gpower * (-0.5 * dx * dx);
              slot[3] += gpower * (-dx * dy);
              slot[4] += gpower * (-0.5 * dy * dy);
            }
          }
          cursor += n;
        }
      }
    }

    // chain the per-visible accumulators back to the input attributes
    Tensor* gmu = t.grad_buffer(mu);
    Tensor* grot = t.grad_buffer(rot);
    Tensor* gscale = t.grad_buffer(scale);
    Tensor* galpha_in = t.grad_buffer(alpha);
    Tensor* gsh = t.grad_buffer(sh);
    const Tensor& vrot = t.val(rot);
    const Tensor& vscale = t.val(scale);
    const Tensor& vsh_t = t.val(sh);

    for (size_t v = 0; v < nvis; ++v) {
      const VisRecord& r = res->vis[v];
      const double* slot = acc.data() + v * 10;
      const size_t i = r.index;
      bool any = false;
      for (int k = 0; k < 10 && !any; ++k) any = slot[k] != 0.0;
      if (!any) continue;

      if (galpha_in) (*galpha_in)[i] += slot[5];

      // color -> sh coefficients (and view direction for higher bands)
      if (gsh || gmu) {
        double basis[16];
        sh_basis(r.dir, bands, basis);
        Vec3 gdir{};
        for (int c = 0; c < 3; ++c) {
          const double gcol = slot[6 + c];
          if (gcol == 0.0 || r.clamped[c]) continue;
          if (gsh)
            for (size_t b = 0; b < bands; ++b)
              (*gsh)[(i * 3 + c) * bands + b] += gcol * basis[b];
          if (bands > 1) {
            Vec3 gb[16];
            sh_basis_grad(r.dir, bands, gb);
            for (size_t b = 1; b < bands; ++b)
              gdir += gb[b] * (gcol * vsh_t[(i * 3 + c) * bands + b]);
          }
        }
        if (gmu && bands > 1 &&
            (gdir.x != 0.0 || gdir.y != 0.0 || gdir.z != 0.0)) {
          const Vec3 gvec =
              (gdir - r.dir * r.dir.dot(gdir)) * (1.0 / r.dir_len);
          (*gmu)[i * 3] += gvec.x;
          (*gmu)[i * 3 + 1] += gvec.y;
          (*gmu)[i * 3 + 2] += gvec.z;
        }
      }

      // inv_cov (packed, with the explicit 2x factor on the off-diagonal)
      // -> cov -> (Sigma, J) -> (q, s, p)
      const double gl_xx = slot[2], gl_xy = slot[3], gl_yy = slot[4];
      // G_cov_full = -Lambda G_Lambda_full Lambda
      const double L[4] = {r.inv_cov[0], r.inv_cov[1], r.inv_cov[1],
                           r.inv_cov[2]};
      const double GL[4] = {gl_xx, 0.5 * gl_xy, 0.5 * gl_xy, gl_yy};
      double tmp[4] = {
          L[0] * GL[0] + L[1] * GL[2], L[0] * GL[1] + L[1] * GL[3],
          L[2] * GL[0] + L[3] * GL[2], L[2] * GL[1] + L[3] * GL[3]};
      double gcov_full[4] = {
          -(tmp[0] * L[0] + tmp[1] * L[2]), -(tmp[0] * L[1] + tmp[1] * L[3]),
          -(tmp[2] * L[0] + tmp[3] * L[2]), -(tmp[2] * L[1] + tmp[3] * L[3])};
      const double gcov_xx = gcov_full[0];
      const double gcov_xy = gcov_full[1] + gcov_full[2];
      const double gcov_yy = gcov_full[3];

      // rebuild projection intermediates
      const Quat qraw{vrot[i * 4], vrot[i * 4 + 1], vrot[i * 4 + 2],
                      vrot[i * 4 + 3]};
      const Quat qn = qraw.normalized();
      const Mat3 rm = quat_to_mat(qn);
      const double s0 = vscale[i * 3], s1 = vscale[i * 3 + 1],
                   s2 = vscale[i * 3 + 2];
      Mat3 sigma;
      for (int a2 = 0; a2 < 3; ++a2)
        for (int b2 = 0; b2 < 3; ++b2)
          sigma(a2, b2) = s0 * s0 * rm(a2, 0) * rm(b2, 0) +
                          s1 * s1 * rm(a2, 1) * rm(b2, 1) +
                          s2 * s2 * rm(a2, 2) * rm(b2, 2);
      const Vec3 p = r.p_cam;
      const double iz = 1.0 / p.z;
      const double jr0[3] = {cam_copy.fx * iz, 0.0,
                             -cam_copy.fx * p.x * iz * iz};
      const double jr1[3] = {0.0, cam_copy.fy * iz,
                             -cam_copy.fy * p.y * iz * iz};
      Vec3 m0{}, m1{};
      for (int c2 = 0; c2 < 3; ++c2) {
        double a0 = 0.0, a1 = 0.0;
        for (int k = 0; k < 3; ++k) {
          a0 += jr0[k] * cam_copy.rot(k, c2);
          a1 += jr1[k] * cam_copy.rot(k, c2);
        }
        (c2 == 0 ? m0.x : c2 == 1 ? m0.y : m0.z) = a0;
        (c2 == 0 ? m1.x : c2 == 1 ? m1.y : m1.z) = a1;
      }
      const Vec3 sm0 = sigma * m0, sm1 = sigma * m1;

      // gSigma (full) and gm0/gm1
      Mat3 gsigma = outer(m0, m0) * gcov_xx + outer(m0, m1) * gcov_xy +
                    outer(m1, m1) * gcov_yy;
      Vec3 gm0 = sm0 * (2.0 * gcov_xx) + sm1 * gcov_xy;
      Vec3 gm1 = sm0 * gcov_xy + sm1 * (2.0 * gcov_yy);

      Vec3 gp{};
      // mean2d
      const double gu = slot[0], gv = slot[1];
      gp.x += gu * cam_copy.fx * iz;
      gp.y += gv * cam_copy.fy * iz;
      gp.z += -gu * cam_copy.fx * p.x * iz * iz -
              gv * cam_copy.fy * p.y * iz * iz;
      // depth
      gp.z += slot[9];
      // J entries through M = J W: gJ_row = W * gM_row
      const Vec3 gj0 = cam_copy.rot * gm0;
      const Vec3 gj1 = cam_copy.rot * gm1;
      gp.x += gj0.z * (-cam_copy.fx * iz * iz);
      gp.y += gj1.z * (-cam_copy.fy * iz * iz);
      gp.z += gj0.x * (-cam_copy.fx * iz * iz) +
              gj1.y * (-cam_copy.fy * iz * iz) +
              gj0.z * (2.0 * cam_copy.fx * p.x * iz * iz * iz) +
              gj1.z * (2.0 * cam_copy.fy * p.y * iz * iz * iz);

      if (gmu) {
        const Vec3 gm = cam_copy.rot.transposed_mul(gp);
        (*gmu)[i * 3] += gm.x;
        (*gmu)[i * 3 + 1] += gm.y;
        (*gmu)[i * 3 + 2] += gm.z;
      }

      // Sigma = R diag(s^2) R^T
      if (gscale) {
        const Vec3 cols[3] = {{rm(0, 0), rm(1, 0), rm(2, 0)},
                              {rm(0, 1), rm(1, 1), rm(2, 1)},
                              {rm(0, 2), rm(1, 2), rm(2, 2)}};
        const double sv[3] = {s0, s1, s2};
        for (int c = 0; c < 3; ++c) {
          const Vec3 gsc = gsigma * cols[c];
          (*gscale)[i * 3 + c] += 2.0 * sv[c] * cols[c].dot(gsc);
        }
      }
      if (grot) {
        // gR = (G + G^T) R D
        Mat3 gsym = gsigma + gsigma.transposed();
        Mat3 rd = rm;
        const double sv[3] = {s0 * s0, s1 * s1, s2 * s2};
        for (int a2 = 0; a2 < 3; ++a2)
          for (int c = 0; c < 3; ++c) rd(a2, c) = rm(a2, c) * sv[c];
        const Mat3 gr = gsym * rd;
        double gqn[4] = {0, 0, 0, 0};
        for (int k = 0; k < 4; ++k) {
          const Mat3 dj = quat_to_mat_jac(qn, k);
          double a3 = 0.0;
          for (int e = 0; e < 9; ++e) a3 += gr.m[e] * dj.m[e];
          gqn[k] = a3;
        }
        std::array<double, 16> jn;
        quat_normalize_jacobian(qraw, jn);
        for (int c = 0; c < 4; ++c) {
          double a3 = 0.0;
          for (int o = 0; o < 4; ++o) a3 += gqn[o] * jn[o * 4 + c];
          (*grot)[i * 4 + c] += a3;
        }
      }
    }
  };

  auto refs = tape.custom({mu, rot, scale, alpha, sh},
                          {std::move(out_color), std::move(out_alpha),
                           std::move(out_depth)},
                          backward);
  return RenderRefs{refs[0], refs[1], refs[2]};
}

// ---------------------------------------------------------------------------
// normals from depth

namespace {

struct NormalsCache {
  Camera cam;
  std::vector<uint8_t> valid;  // per pixel
  std::vector<uint8_t> flip;   // orientation sign per pixel
};

Vec3 backproject(const Camera& cam, size_t px, size_t py, double z) {
  return {(double(px) + 0.5 - cam.cx) / cam.fx * z,
          (double(py) + 0.5 - cam.cy) / cam.fy * z, z};
}

Tensor normals_forward(const Tensor& depth, const Camera& cam,
                       const Tensor& alpha, double thr,
                       std::shared_ptr<NormalsCache> cache) {
  if (depth.ndim() != 2)
    throw ValidationError("depth_to_normals: depth must be HxW");
  const size_t H = depth.dim(0), W = depth.dim(1);
  if (alpha.ndim() != 2 || alpha.dim(0) != H || alpha.dim(1) != W)
    throw ValidationError("depth_to_normals: alpha shape mismatch");
  Tensor out({H, W, 3});
  std::vector<uint8_t> ok(H * W, 0);
  for (size_t p = 0; p < H * W; ++p)
    ok[p] = alpha[p] > thr && depth[p] < 0.5 * kFarDepth;
  if (cache) {
    cache->cam = cam;
    cache->valid.assign(H * W, 0);
    cache->flip.assign(H * W, 0);
  }
  for (size_t py = 1; py + 1 < H; ++py) {
    for (size_t px = 1; px + 1 < W; ++px) {
      const size_t pix = py * W + px;
      if (!ok[pix] || !ok[pix - 1] || !ok[pix + 1] || !ok[pix - W] ||
          !ok[pix + W])
        continue;
      const Vec3 pr = backproject(cam, px + 1, py, depth[pix + 1]);
      const Vec3 pl = backproject(cam, px - 1, py, depth[pix - 1]);
      const Vec3 pd = backproject(cam, px, py + 1, depth[pix + W]);
      const Vec3 pu = backproject(cam, px, py - 1, depth[pix - W]);
      const Vec3 a = pr - pl, b = pd - pu;
      const Vec3 cr = a.cross(b);
      const double n = cr.norm();
      if (n < 1e-18) continue;
      Vec3 nv = cr * (1.0 / n);
      bool flip = false;
      if (nv.z > 0.0) {
        nv = -nv;
        flip = true;
      }
      out[pix * 3] = nv.x;
      out[pix * 3 + 1] = nv.y;
      out[pix * 3 + 2] = nv.z;
      if (cache) {
        cache->valid[pix] = 1;
        cache->flip[pix] = flip;
      }
    }
  }
  return out;
}

}  // namespace

Tensor depth_to_normals(const Tensor& depth, const Camera& cam,
                        const Tensor& alpha, double alpha_threshold,
                        Tensor* valid_mask) {
  auto cache = std::make_shared<NormalsCache>();
  Tensor out = normals_forward(depth, cam, alpha, alpha_threshold, cache);
  if (valid_mask) {
    Tensor m(depth.dims());
    for (size_t i = 0; i < m.size(); ++i) m[i] = cache->valid[i] ? 1.0 : 0.0;
    *valid_mask = std::move(m);
  }
  return out;
}

ad::ValueRef depth_to_normals_op(ad::Tape& tape, ad::ValueRef depth,
                                 const Camera& cam, const Tensor& alpha,
                                 double alpha_threshold, Tensor* valid_mask) {
  auto cache = std::make_shared<NormalsCache>();
  Tensor out =
      normals_forward(tape.val(depth), cam, alpha, alpha_threshold, cache);
  if (valid_mask) {
    Tensor m(tape.val(depth).dims());
    for (size_t i = 0; i < m.size(); ++i) m[i] = cache->valid[i] ? 1.0 : 0.0;
    *valid_mask = std::move(m);
  }
  auto backward = [cache, depth](ad::Tape& t,
                                 const std::vector<const Tensor*>& g) {
    const Tensor& go = *g[0];
    Tensor* gd = t.grad_buffer(depth);
    if (!gd) return;
    const Tensor& d = t.val(depth);
    const Camera& cam = cache->cam;
    const size_t H = d.dim(0), W = d.dim(1);
    for (size_t py = 1; py + 1 < H; ++py) {
      for (size_t px = 1; px + 1 < W; ++px) {
        const size_t pix = py * W + px;
        if (!cache->valid[pix]) continue;
        Vec3 gn{go[pix * 3], go[pix * 3 + 1], go[pix * 3 + 2]};
        if (gn.x == 0.0 && gn.y == 0.0 && gn.z == 0.0) continue;
        if (cache->flip[pix]) gn = -gn;
        const Vec3 pr = backproject(cam, px + 1, py, d[pix + 1]);
        const Vec3 pl = backproject(cam, px - 1, py, d[pix - 1]);
        const Vec3 pd = backproject(cam, px, py + 1, d[pix + W]);
        const Vec3 pu = backproject(cam, px, py - 1, d[pix - W]);
        const Vec3 a = pr - pl, b = pd - pu;
        const Vec3 cr = a.cross(b);
        const double n = cr.norm();
        const Vec3 nhat = cr * (1.0 / n);
        const Vec3 gcr = (gn - nhat * nhat.dot(gn)) * (1.0 / n);
        const Vec3 ga = b.cross(gcr);
        const Vec3 gb = gcr.cross(a);
        // dP/dz at a pixel is ((px+.5-cx)/fx, (py+.5-cy)/fy, 1)
        auto dpdz = [&cam](size_t x, size_t y) {
          return Vec3{(double(x) + 0.5 - cam.cx) / cam.fx,
                      (double(y) + 0.5 - cam.cy) / cam.fy, 1.0};
        };
        (*gd)[pix + 1] += ga.dot(dpdz(px + 1, py));
        (*gd)[pix - 1] -= ga.dot(dpdz(px - 1, py));
        (*gd)[pix + W] += gb.dot(dpdz(px, py + 1));
        (*gd)[pix - W] -= gb.dot(dpdz(px, py - 1));
      }
    }
  };
  return tape.custom({depth}, {std::move(out)}, backward)[0];
}

}  // namespace etg
