#include "etg/gradsuite.h"

#include <cmath>
#include <cstdio>

#include "etg/autodiff.h"
#include "etg/grmn.h"
#include "etg/headmodel.h"
#include "etg/losses.h"
#include "etg/render.h"
#include "etg/rig.h"
#include "etg/rng.h"
#include "etg/synthetic.h"

namespace etg {

namespace {

using ad::Tape;
using ad::ValueRef;

Tensor rand_tensor(Rng& rng, std::vector<size_t> dims, double lo, double hi) {
  Tensor t(std::move(dims));
  for (size_t i = 0; i < t.size(); ++i) t[i] = rng.uniform(lo, hi);
  return t;
}

double elementary_ops_worst(size_t reps, uint64_t seed) {
  Rng rng(seed);
  double worst = 0.0;
  for (size_t rep = 0; rep < reps; ++rep) {
    Tensor a = rand_tensor(rng, {3, 4}, -2.0, 2.0);
    Tensor b = rand_tensor(rng, {3, 4}, 0.2, 2.0);
    Tensor w = rand_tensor(rng, {4, 3}, -1.0, 1.0);
    Tensor bias = rand_tensor(rng, {1, 4}, -1.0, 1.0);
    Tensor s = rand_tensor(rng, {3, 1}, -1.5, 1.5);
    const std::function<ValueRef(Tape&, ValueRef)> builders[] = {
        [&](Tape& t, ValueRef x) {
          return t.sum(t.square(t.add(x, t.constant(b))));
        },
        [&](Tape& t, ValueRef x) {
          return t.sum(t.mul(t.sub(x, t.constant(b)), t.constant(b)));
        },
        [&](Tape& t, ValueRef x) { return t.sum(t.div(x, t.constant(b))); },
        [&](Tape& t, ValueRef x) {
          return t.sum(t.square(t.matmul(x, t.constant(w))));
        },
        [&](Tape& t, ValueRef x) {
          return t.sum(t.square(t.add_rowvec(x, t.constant(bias))));
        },
        [&](Tape& t, ValueRef x) { return t.sum(t.sigmoid(x)); },
        [&](Tape& t, ValueRef x) { return t.sum(t.tanh_(x)); },
        [&](Tape& t, ValueRef x) { return t.sum(t.exp_(t.scale(x, 0.3))); },
        [&](Tape& t, ValueRef x) {
          return t.sum(t.square(t.softmax_rows(x)));
        },
        [&](Tape& t, ValueRef x) {
          return t.sum(t.square(t.logsoftmax_rows(x)));
        },
        [&](Tape& t, ValueRef x) {
          return t.sum(
              t.square(t.mul(t.layer_norm_rows(x, 1e-5), t.constant(b))));
        },
        [&](Tape& t, ValueRef x) {
          return t.sum(
              t.square(t.mul(t.instance_norm_time(x, 1e-5), t.constant(b))));
        },
        [&](Tape& t, ValueRef x) {
          return t.sum(t.square(t.row_scale(x, t.constant(s))));
        },
        [&](Tape& t, ValueRef x) {
          return t.sum(t.square(t.mul_rowvec(x, t.constant(bias))));
        },
        [&](Tape& t, ValueRef x) {
          return t.sum(t.square(t.transpose(x)));
        },
    };
    for (const auto& build : builders)
      worst = std::max(worst, ad::finite_diff_check(build, a, 1e-5));
  }
  return worst;
}

double deform_worst(uint64_t seed) {
  const HeadModelAssets head = build_synthetic_head(6, seed);
  Rng rng(seed + 1);
  Tensor w = rand_tensor(rng, {head.vertex_count(), 3}, -1.0, 1.0);
  Tensor x({9});
  for (size_t i = 0; i < 6; ++i) x[i] = 0.3 * rng.normal();
  for (size_t i = 6; i < 9; ++i) x[i] = 0.15 * rng.normal();
  auto build = [&](Tape& t, ValueRef in) {
    ValueRef flat = t.reshape(in, {1, 9});
    ValueRef psi = t.reshape(t.slice_cols(flat, 0, 6), {6});
    ValueRef jaw = t.reshape(t.slice_cols(flat, 6, 9), {3});
    return t.sum(t.mul(deform_mesh_op(t, head, psi, jaw), t.constant(w)));
  };
  return ad::finite_diff_check(build, x, 1e-5);
}

double rig_worst(uint64_t seed) {
  const HeadModelAssets head = build_synthetic_head(6, seed);
  const Mesh mesh = deform_mesh(head, {Tensor({6})}, {Vec3{}});
  const GaussianCloud cloud = sample_bindings(mesh, mesh.tri_count(), seed);
  // probe a small subset of gaussians via the local attributes
  Rng rng(seed + 2);
  const size_t m = cloud.size();
  Tensor wmu = rand_tensor(rng, {m, 3}, -1.0, 1.0);
  Tensor wrot = rand_tensor(rng, {m, 4}, -1.0, 1.0);
  Tensor wsc = rand_tensor(rng, {m, 3}, -1.0, 1.0);
  const size_t nv = mesh.vertex_count();
  Tensor x({nv * 3});
  for (size_t i = 0; i < nv * 3; ++i) x[i] = mesh.vertices[i];
  auto build = [&](Tape& t, ValueRef in) {
    ValueRef verts = t.reshape(in, {nv, 3});
    ValueRef mu = t.leaf(cloud.mu_l);
    ValueRef rot = t.constant(cloud.rot_l);
    ValueRef sc = t.constant(cloud.scale_l);
    RigOutputs out = rig_to_global_op(t, cloud, mesh.faces, verts, mu, rot, sc);
    // quaternion sign is a representation choice (q and -q rotate alike),
    // so penalize rot through squares to stay smooth across branch flips
    return t.add(t.sum(t.mul(out.mu, t.constant(wmu))),
                 t.add(t.sum(t.mul(t.square(out.rot), t.constant(wrot))),
                       t.sum(t.mul(out.scale, t.constant(wsc)))));
  };
  return ad::finite_diff_check(build, x, 1e-5);
}

double residual_worst(uint64_t seed) {
  Rng rng(seed);
  const size_t m = 6;
  std::vector<uint8_t> mask = {1, 0, 1, 1, 0, 1};
  Tensor wmu = rand_tensor(rng, {m, 3}, -1, 1);
  Tensor wrot = rand_tensor(rng, {m, 4}, -1, 1);
  Tensor wsc = rand_tensor(rng, {m, 3}, -1, 1);
  Tensor mu = rand_tensor(rng, {m, 3}, -1, 1);
  Tensor rot({m, 4});
  for (size_t i = 0; i < m; ++i) {
    Quat q{rng.normal(), rng.normal(), rng.normal(), rng.normal()};
    q = q.normalized();
    rot[i * 4] = q.w;
    rot[i * 4 + 1] = q.x;
    rot[i * 4 + 2] = q.y;
    rot[i * 4 + 3] = q.z;
  }
  Tensor sc = rand_tensor(rng, {m, 3}, 0.3, 1.0);
  Tensor x = rand_tensor(rng, {4, 9}, -0.1, 0.1);
  auto build = [&](Tape& t, ValueRef in) {
    ResidualOutputs out = apply_mouth_residual_op(
        t, mask, t.constant(mu), t.constant(rot), t.constant(sc), in);
    return t.add(t.sum(t.mul(out.mu, t.constant(wmu))),
                 t.add(t.sum(t.mul(out.rot, t.constant(wrot))),
                       t.sum(t.mul(out.scale, t.constant(wsc)))));
  };
  return ad::finite_diff_check(build, x, 1e-5);
}

double render_worst(uint64_t seed) {
  Rng rng(seed);
  Camera cam;
  cam.fx = cam.fy = 40.0;
  cam.cx = cam.cy = 12.0;
  cam.width = cam.height = 24;
  cam.near = 0.05;
  const size_t m = 3;
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
  Tensor wc = rand_tensor(rng, {24, 24, 3}, -1, 1);
  Tensor wa = rand_tensor(rng, {24, 24}, -1, 1);
  auto build = [&](Tape& t, ValueRef in) {
    ValueRef flat = t.reshape(in, {1, m * 14});
    auto block = [&](size_t o, size_t w2) {
      return t.concat_cols(
          t.concat_cols(t.slice_cols(flat, o, o + w2),
                        t.slice_cols(flat, 14 + o, 14 + o + w2)),
          t.slice_cols(flat, 28 + o, 28 + o + w2));
    };
    ValueRef mu = t.reshape(block(0, 3), {m, 3});
    ValueRef rot = t.reshape(block(3, 4), {m, 4});
    ValueRef sc = t.reshape(block(7, 3), {m, 3});
    ValueRef al = t.reshape(block(10, 1), {m});
    ValueRef sh = t.reshape(block(11, 3), {m, 3, 1});
    RenderRefs out = render_op(t, cam, mu, rot, sc, al, sh);
    return t.add(t.sum(t.mul(out.color, t.constant(wc))),
                 t.sum(t.mul(out.alpha, t.constant(wa))));
  };
  return ad::finite_diff_check(build, x, 1e-4);
}

double normals_worst(uint64_t seed) {
  Rng rng(seed);
  Camera cam;
  cam.fx = cam.fy = 30.0;
  cam.cx = cam.cy = 5.0;
  cam.width = cam.height = 10;
  Tensor depth({10, 10});
  for (size_t y = 0; y < 10; ++y)
    for (size_t x = 0; x < 10; ++x)
      depth[y * 10 + x] = 2.0 + 0.05 * double(x) - 0.03 * double(y) +
                          0.002 * rng.normal();
  Tensor alpha = Tensor::full({10, 10}, 1.0);
  Tensor w = rand_tensor(rng, {10, 10, 3}, -1, 1);
  auto build = [&](Tape& t, ValueRef in) {
    return t.sum(t.mul(depth_to_normals_op(t, in, cam, alpha, 0.5),
                       t.constant(w)));
  };
  return ad::finite_diff_check(build, depth, 1e-5);
}

struct GrmnFixture {
  GrmnConfig cfg;
  ParamStore store;
  Tensor id_embed;

  explicit GrmnFixture(uint64_t seed) {
    cfg.audio_dim = 8;
    cfg.au_dim = 5;
    cfg.id_dim = 16;
    cfg.hidden = 16;
    cfg.layers = 1;
    cfg.heads = 2;
    cfg.expr_dim = 3;
    cfg.mouth_count = 2;
    cfg.adain_hidden = 8;
    cfg.head_hidden = 12;
    cfg.gate_hidden = 6;
    Rng rng(seed);
    init_grmn_params(store, cfg, rng);
    init_adain_params(store, cfg, "probe", rng);
    id_embed = Tensor({cfg.id_dim});
    for (size_t i = 0; i < cfg.id_dim; ++i) id_embed[i] = rng.normal();
  }
};

double adain_worst(uint64_t seed) {
  GrmnFixture f(seed);
  Rng rng(seed + 1);
  Tensor x = rand_tensor(rng, {6, f.cfg.hidden}, -1.5, 1.5);
  Tensor w = rand_tensor(rng, {6, f.cfg.hidden}, -1, 1);
  auto build = [&](Tape& t, ValueRef in) {
    return t.sum(t.mul(
        adain_op(t, f.store, f.cfg, "probe", "audio", in, f.id_embed),
        t.constant(w)));
  };
  return ad::finite_diff_check(build, x, 1e-5);
}

double grmn_heads_worst(uint64_t seed) {
  GrmnFixture f(seed);
  Rng rng(seed + 1);
  Tensor aus = rand_tensor(rng, {2, f.cfg.au_dim}, 0.0, 1.0);
  Tensor x = rand_tensor(rng, {2, f.cfg.audio_dim}, -1.0, 1.0);
  auto build = [&](Tape& t, ValueRef in) {
    ValueRef enc = encode_audio_op(t, f.store, f.cfg, in);
    ValueRef mod_a =
        adain_op(t, f.store, f.cfg, "probe", "audio", enc, f.id_embed);
    ValueRef enc_e = encode_au_op(t, f.store, f.cfg, t.constant(aus));
    ValueRef mod_e =
        adain_op(t, f.store, f.cfg, "probe", "au", enc_e, f.id_embed);
    BaseRefs base = decode_base_op(t, f.store, f.cfg, mod_a);
    ResidualRefs res = decode_residual_op(t, f.store, f.cfg, mod_a, mod_e);
    ValueRef g = decode_gate_op(t, f.store, f.cfg, res.z_e, mod_a);
    ValueRef face = t.add(base.face, t.row_scale(res.face, g));
    ValueRef mouth = t.add(base.mouth, t.row_scale(res.mouth, g));
    return t.add(t.sum(t.square(face)),
                 t.add(t.sum(t.square(mouth)), t.sum(t.square(g))));
  };
  return ad::finite_diff_check(build, x, 1e-5);
}

double conv_worst(uint64_t seed) {
  Rng rng(seed);
  Tensor x = rand_tensor(rng, {7, 4}, -1, 1);
  Tensor w = rand_tensor(rng, {5, 12}, -0.5, 0.5);
  Tensor b = rand_tensor(rng, {1, 5}, -0.2, 0.2);
  Tensor wo = rand_tensor(rng, {7, 5}, -1, 1);
  auto build = [&](Tape& t, ValueRef in) {
    return t.sum(t.mul(
        conv1d_same_op(t, in, t.constant(w), t.constant(b)), t.constant(wo)));
  };
  return ad::finite_diff_check(build, x, 1e-5);
}

double losses_worst(uint64_t seed) {
  Rng rng(seed);
  double worst = 0.0;
  {
    Tensor gt = rand_tensor(rng, {13, 13, 1}, 0.1, 0.9);
    Tensor img = rand_tensor(rng, {13, 13, 1}, 0.1, 0.9);
    worst = std::max(worst, ad::finite_diff_check(
                                [&](Tape& t, ValueRef in) {
                                  return loss_render_op(t, in, gt, 0.2);
                                },
                                img, 1e-5));
  }
  {
    TeacherSignals ts;
    const size_t T = 3;
    ts.p_emo = Tensor({T, 7});
    ts.e = Tensor({T, 1});
    ts.present.assign(T, 1);
    for (size_t t = 0; t < T; ++t) {
      double sum = 0.0;
      for (size_t c = 0; c < 7; ++c) {
        ts.p_emo[t * 7 + c] = 0.05 + rng.uniform();
        sum += ts.p_emo[t * 7 + c];
      }
      for (size_t c = 0; c < 7; ++c) ts.p_emo[t * 7 + c] /= sum;
      ts.e[t] = 1.0 - ts.p_emo[t * 7 + kNeutralClass];
    }
    Tensor z = rand_tensor(rng, {T, 7}, -1.5, 1.5);
    worst = std::max(worst, ad::finite_diff_check(
                                [&](Tape& t, ValueRef in) {
                                  return loss_kl_op(t, in, ts);
                                },
                                z, 1e-5));
    Tensor g = rand_tensor(rng, {T, 1}, 0.05, 0.95);
    worst = std::max(worst, ad::finite_diff_check(
                                [&](Tape& t, ValueRef in) {
                                  return loss_score_op(t, in, ts);
                                },
                                g, 1e-5));
  }
  {
    const size_t H = 5, W = 5;
    Tensor dgt = rand_tensor(rng, {H, W}, 1.8, 2.2);
    Tensor ngt({H, W, 3});
    Tensor mask = Tensor::full({H, W}, 1.0);
    for (size_t p = 0; p < H * W; ++p) {
      Vec3 v{rng.normal(), rng.normal(), -1.0 - rng.uniform()};
      v = v.normalized();
      ngt[p * 3] = v.x;
      ngt[p * 3 + 1] = v.y;
      ngt[p * 3 + 2] = v.z;
    }
    Tensor x({H * W * 4});
    for (size_t i = 0; i < H * W; ++i) x[i] = 2.0 + 0.1 * rng.normal();
    for (size_t i = 0; i < H * W * 3; ++i) x[H * W + i] = 0.5 * rng.normal();
    worst = std::max(
        worst, ad::finite_diff_check(
                   [&](Tape& t, ValueRef in) {
                     ValueRef flat = t.reshape(in, {1, H * W * 4});
                     ValueRef d = t.reshape(t.slice_cols(flat, 0, H * W),
                                            {H, W});
                     ValueRef n = t.reshape(
                         t.slice_cols(flat, H * W, H * W * 4), {H, W, 3});
                     return loss_geo_op(t, d, n, dgt, ngt, mask, 1e-2, 1e-3);
                   },
                   x, 1e-5));
  }
  return worst;
}

}  // namespace

std::vector<GradCheckResult> run_gradient_suite(bool quick) {
  std::vector<GradCheckResult> out;
  auto add = [&out](std::string name, double err, double tol) {
    out.push_back({std::move(name), err, tol, err < tol});
  };
  add("elementary tape ops", elementary_ops_worst(quick ? 10 : 100, 11), 1e-4);
  add("deform_mesh", deform_worst(21), 1e-4);
  add("rig_to_global", rig_worst(31), 1e-4);
  add("apply_mouth_residual", residual_worst(41), 1e-4);
  add("conv1d", conv_worst(51), 1e-4);
  add("adain", adain_worst(61), 1e-4);
  add("grmn decoder heads", grmn_heads_worst(71), 1e-4);
  add("losses (render/kl/score/geo)", losses_worst(81), 1e-4);
  add("depth_to_normals", normals_worst(91), 1e-4);
  add("render", render_worst(101), 5e-3);
  return out;
}

bool print_gradient_suite(bool quick) {
  bool ok = true;
  for (const GradCheckResult& r : run_gradient_suite(quick)) {
    std::printf("[%s] %-28s max rel err %.3e (tolerance %.0e)\n",
                r.passed ? "PASS" : "FAIL", r.name.c_str(), r.max_error,
                r.tolerance);
    ok = ok && r.passed;
  }
  return ok;
}

}  // namespace etg
