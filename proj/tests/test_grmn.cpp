#include <cstring>

#include "doctest.h"
#include "etg/autodiff.h"
#include "etg/common.h"
#include "etg/grmn.h"
#include "etg/rng.h"

using namespace etg;
using ad::Tape;
using ad::ValueRef;

namespace {

GrmnConfig small_cfg() {
  GrmnConfig cfg;
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
  return cfg;
}

struct Fixture {
  GrmnConfig cfg = small_cfg();
  ParamStore store;
  Tensor id_embed;

  explicit Fixture(uint64_t seed = 5) {
    Rng rng(seed);
    init_grmn_params(store, cfg, rng);
    init_adain_params(store, cfg, "idA", rng);
    init_adain_params(store, cfg, "idB", rng);
    id_embed = Tensor({cfg.id_dim});
    for (size_t i = 0; i < cfg.id_dim; ++i) id_embed[i] = rng.normal();
  }

  Tensor rand_audio(size_t T, uint64_t seed) {
    Rng rng(seed);
    Tensor a({T, cfg.audio_dim});
    for (size_t i = 0; i < a.size(); ++i) a[i] = rng.normal();
    return a;
  }
  Tensor rand_aus(size_t T, uint64_t seed) {
    Rng rng(seed);
    Tensor a({T, cfg.au_dim});
    for (size_t i = 0; i < a.size(); ++i) a[i] = std::fabs(rng.normal());
    return a;
  }
};

}  // namespace

TEST_CASE("orthogonal_init produces orthonormal columns") {
  Rng rng(3);
  const Tensor w = orthogonal_init(12, 6, 1.0, rng);
  for (size_t a = 0; a < 6; ++a)
    for (size_t b = 0; b < 6; ++b) {
      double dot = 0.0;
      for (size_t r = 0; r < 12; ++r) dot += w[r * 6 + a] * w[r * 6 + b];
      CHECK(dot == doctest::Approx(a == b ? 1.0 : 0.0).epsilon(1e-10));
    }
}

TEST_CASE("adain: identity modulation normalizes per channel over time") {
  Tape t;
  Rng rng(7);
  Tensor x({20, 4});
  for (size_t i = 0; i < x.size(); ++i) x[i] = 2.0 + 3.0 * rng.normal();
  ValueRef in = t.leaf(x);
  ValueRef gamma = t.constant(Tensor::full({1, 4}, 1.0));
  ValueRef beta = t.constant(Tensor({1, 4}));
  const Tensor& out = t.val(adain_modulate_op(t, in, gamma, beta));
  for (size_t c = 0; c < 4; ++c) {
    double mean = 0.0, var = 0.0;
    for (size_t i = 0; i < 20; ++i) mean += out[i * 4 + c];
    mean /= 20.0;
    for (size_t i = 0; i < 20; ++i) {
      const double d = out[i * 4 + c] - mean;
      var += d * d;
    }
    var /= 20.0;
    CHECK(std::fabs(mean) < 1e-10);
    CHECK(var == doctest::Approx(1.0).epsilon(1e-4));
  }
}

TEST_CASE("adain: zero gain broadcasts the shift; constant channels hit the eps floor") {
  Tape t;
  Tensor x({6, 2}, {1, 5, 2, 5, 3, 5, 4, 5, 5, 5, 6, 5});  // col 1 constant
  ValueRef in = t.leaf(x);
  SUBCASE("gamma = 0") {
    ValueRef gamma = t.constant(Tensor({1, 2}));
    ValueRef beta = t.constant(Tensor({1, 2}, {0.7, -0.3}));
    const Tensor& out = t.val(adain_modulate_op(t, in, gamma, beta));
    for (size_t i = 0; i < 6; ++i) {
      CHECK(out[i * 2] == doctest::Approx(0.7));
      CHECK(out[i * 2 + 1] == doctest::Approx(-0.3));
    }
  }
  SUBCASE("constant channel normalizes to zero, so output is beta") {
    ValueRef gamma = t.constant(Tensor::full({1, 2}, 2.0));
    ValueRef beta = t.constant(Tensor({1, 2}, {0.1, 0.9}));
    const Tensor& out = t.val(adain_modulate_op(t, in, gamma, beta));
    for (size_t i = 0; i < 6; ++i)
      CHECK(out[i * 2 + 1] == doctest::Approx(0.9).epsilon(1e-12));
  }
}

TEST_CASE("adain gradcheck through the predicted modulation") {
  Fixture f;
  const size_t T = 5;
  Tensor x({T, f.cfg.hidden});
  Rng rng(11);
  for (size_t i = 0; i < x.size(); ++i) x[i] = rng.normal();
  auto build = [&](Tape& t, ValueRef in) {
    ValueRef mod = adain_op(t, f.store, f.cfg, "idA", "audio", in, f.id_embed);
    Tensor w({T, f.cfg.hidden});
    Rng r2(12);
    for (size_t i = 0; i < w.size(); ++i) w[i] = r2.normal();
    return t.sum(t.mul(mod, t.constant(w)));
  };
  CHECK(ad::finite_diff_check(build, x, 1e-5) < 1e-5);
}

TEST_CASE("encode_audio: shape contract, determinism, global receptive field") {
  Fixture f;
  for (size_t T : {size_t(1), size_t(25), size_t(100)}) {
    Tape t;
    ValueRef in = t.constant(f.rand_audio(T, 100 + T));
    const Tensor& out = t.val(encode_audio_op(t, f.store, f.cfg, in));
    CHECK(out.dim(0) == T);
    CHECK(out.dim(1) == f.cfg.hidden);
  }
  // determinism
  Tensor a = f.rand_audio(12, 55);
  auto run = [&](const Tensor& x) {
    Tape t;
    return t.val(encode_audio_op(t, f.store, f.cfg, t.constant(x)));
  };
  Tensor o1 = run(a), o2 = run(a);
  CHECK(std::memcmp(o1.data(), o2.data(), o1.size() * sizeof(double)) == 0);
  // perturbing one frame moves every output frame (attention is global)
  Tensor b = a;
  b[5 * f.cfg.audio_dim + 2] += 0.7;
  Tensor o3 = run(b);
  for (size_t frame = 0; frame < 12; ++frame) {
    double delta = 0.0;
    for (size_t c = 0; c < f.cfg.hidden; ++c)
      delta = std::max(delta, std::fabs(o3[frame * f.cfg.hidden + c] -
                                        o1[frame * f.cfg.hidden + c]));
    CHECK(delta > 0.0);
  }
}

TEST_CASE("encode_au: shape, frame locality, zero input with zero biases") {
  Fixture f;
  Tensor a = f.rand_aus(9, 77);
  auto run = [&](const Tensor& x) {
    Tape t;
    return t.val(encode_au_op(t, f.store, f.cfg, t.constant(x)));
  };
  Tensor o1 = run(a);
  CHECK(o1.dim(0) == 9);
  CHECK(o1.dim(1) == f.cfg.hidden);
  Tensor b = a;
  b[3 * f.cfg.au_dim + 1] += 0.5;
  Tensor o2 = run(b);
  for (size_t frame = 0; frame < 9; ++frame) {
    double delta = 0.0;
    for (size_t c = 0; c < f.cfg.hidden; ++c)
      delta = std::max(delta, std::fabs(o2[frame * f.cfg.hidden + c] -
                                        o1[frame * f.cfg.hidden + c]));
    if (frame == 3)
      CHECK(delta > 0.0);
    else
      CHECK(delta == 0.0);
  }
  // zero input, zero biases -> zero output (relu(0) = 0 through both layers)
  Tensor zero = run(Tensor({4, f.cfg.au_dim}));
  for (size_t i = 0; i < zero.size(); ++i) CHECK(zero[i] == 0.0);
}

TEST_CASE("decode_base: shapes, zeroed heads, gradcheck") {
  Fixture f;
  const size_t T = 4;
  Tensor h({T, f.cfg.hidden});
  Rng rng(31);
  for (size_t i = 0; i < h.size(); ++i) h[i] = rng.normal();
  {
    Tape t;
    BaseRefs out = decode_base_op(t, f.store, f.cfg, t.constant(h));
    CHECK(t.val(out.face).dim(0) == T);
    CHECK(t.val(out.face).dim(1) == f.cfg.face_dim());
    CHECK(t.val(out.mouth).dim(1) == f.cfg.mouth_dim());
  }
  {
    // zero head weights -> zero deltas
    Fixture zf;
    for (auto* name : {"grmn/base/face/w", "grmn/base/mouth/w"}) {
      Tensor& w = zf.store.at(name).value;
      for (size_t i = 0; i < w.size(); ++i) w[i] = 0.0;
    }
    Tape t;
    BaseRefs out = decode_base_op(t, zf.store, zf.cfg, t.constant(h));
    const Tensor& face = t.val(out.face);
    for (size_t i = 0; i < face.size(); ++i) CHECK(face[i] == 0.0);
  }
  auto build = [&](Tape& t, ValueRef in) {
    BaseRefs out = decode_base_op(t, f.store, f.cfg, in);
    return t.add(t.sum(t.square(out.face)), t.sum(t.square(out.mouth)));
  };
  CHECK(ad::finite_diff_check(build, h, 1e-5) < 1e-4);
}

TEST_CASE("decode_residual: z_e logits, softmax rows, gradcheck") {
  Fixture f;
  const size_t T = 6;
  Rng rng(41);
  Tensor ha({T, f.cfg.hidden}), he({T, f.cfg.hidden});
  for (size_t i = 0; i < ha.size(); ++i) ha[i] = rng.normal();
  for (size_t i = 0; i < he.size(); ++i) he[i] = rng.normal();
  Tape t;
  ResidualRefs out =
      decode_residual_op(t, f.store, f.cfg, t.constant(ha), t.constant(he));
  const Tensor& z = t.val(out.z_e);
  CHECK(z.dim(0) == T);
  CHECK(z.dim(1) == 7);
  const Tensor& sm = t.val(t.softmax_rows(out.z_e));
  for (size_t r = 0; r < T; ++r) {
    double sum = 0.0;
    for (size_t c = 0; c < 7; ++c) sum += sm[r * 7 + c];
    CHECK(sum == doctest::Approx(1.0).epsilon(1e-12));
  }
  auto build = [&](Tape& tp, ValueRef in) {
    ResidualRefs o =
        decode_residual_op(tp, f.store, f.cfg, in, tp.constant(he));
    return tp.add(tp.sum(tp.square(o.z_e)),
                  tp.add(tp.sum(tp.square(o.face)), tp.sum(tp.square(o.mouth))));
  };
  CHECK(ad::finite_diff_check(build, ha, 1e-5) < 1e-4);
}

TEST_CASE("decode_gate: range, sigmoid(0) at zero weights, monotone last layer") {
  Fixture f;
  Rng rng(51);
  // range over 1000 random frames
  const size_t T = 1000;
  Tensor z({T, 7}), h({T, f.cfg.hidden});
  for (size_t i = 0; i < z.size(); ++i) z[i] = 3.0 * rng.normal();
  for (size_t i = 0; i < h.size(); ++i) h[i] = 3.0 * rng.normal();
  {
    Tape t;
    const Tensor& g =
        t.val(decode_gate_op(t, f.store, f.cfg, t.constant(z), t.constant(h)));
    for (size_t i = 0; i < T; ++i) {
      CHECK(g[i] > 0.0);
      CHECK(g[i] < 1.0);
    }
  }
  {
    // zero weights and biases -> exactly 0.5
    Fixture zf;
    for (auto* name : {"grmn/gate/fc2/w", "grmn/gate/fc2/b"}) {
      Tensor& w = zf.store.at(name).value;
      for (size_t i = 0; i < w.size(); ++i) w[i] = 0.0;
    }
    Tape t;
    const Tensor& g = t.val(
        decode_gate_op(t, zf.store, zf.cfg, t.constant(z), t.constant(h)));
    for (size_t i = 0; i < 10; ++i) CHECK(g[i] == doctest::Approx(0.5));
  }
  {
    // shifting the final pre-activation (bias) strictly raises the gate
    Fixture mf;
    Tape t1;
    const Tensor g1 = t1.val(
        decode_gate_op(t1, mf.store, mf.cfg, t1.constant(z), t1.constant(h)));
    mf.store.at("grmn/gate/fc2/b").value[0] += 0.5;
    Tape t2;
    const Tensor g2 = t2.val(
        decode_gate_op(t2, mf.store, mf.cfg, t2.constant(z), t2.constant(h)));
    for (size_t i = 0; i < 50; ++i) CHECK(g2[i] > g1[i]);
  }
}

TEST_CASE("fuse identities: g=0, g=1 and midpoint arithmetic") {
  Tape t;
  ValueRef base = t.constant(Tensor({1, 2}, {1.0, 2.0}));
  ValueRef res = t.constant(Tensor({1, 2}, {2.0, -2.0}));
  auto fuse = [&](double gv) {
    ValueRef g = t.constant(Tensor({1, 1}, {gv}));
    return t.val(t.add(base, t.row_scale(res, g)));
  };
  const Tensor f0 = fuse(0.0);
  CHECK(f0[0] == 1.0);
  CHECK(f0[1] == 2.0);
  const Tensor f1 = fuse(1.0);
  CHECK(f1[0] == 3.0);
  CHECK(f1[1] == 0.0);
  const Tensor fh = fuse(0.5);
  CHECK(fh[0] == 2.0);
  CHECK(fh[1] == 1.0);
}

TEST_CASE("grmn_forward: shapes, fusion identity, determinism") {
  Fixture f;
  const size_t T = 7;
  const Tensor audio = f.rand_audio(T, 61);
  const Tensor aus = f.rand_aus(T, 62);
  Tape t;
  MotionRefs out =
      grmn_forward_op(t, f.store, f.cfg, "idA", audio, aus, f.id_embed);
  const Tensor& face = t.val(out.face);
  const Tensor& mouth = t.val(out.mouth);
  const Tensor& g = t.val(out.gate);
  CHECK(face.dim(0) == T);
  CHECK(face.dim(1) == f.cfg.face_dim());
  CHECK(mouth.dim(1) == f.cfg.mouth_dim());
  CHECK(g.dim(0) == T);
  // fused = base + g * residual, argument-level identity
  const Tensor& fb = t.val(out.face_base);
  const Tensor& fr = t.val(out.face_residual);
  for (size_t r = 0; r < T; ++r)
    for (size_t c = 0; c < f.cfg.face_dim(); ++c) {
      const double expect = fb[r * f.cfg.face_dim() + c] +
                            g[r] * fr[r * f.cfg.face_dim() + c];
      CHECK(std::fabs(face[r * f.cfg.face_dim() + c] - expect) < 1e-12);
    }
  for (size_t i = 0; i < g.size(); ++i) {
    CHECK(g[i] > 0.0);
    CHECK(g[i] < 1.0);
  }
  // determinism
  Tape t2;
  MotionRefs out2 =
      grmn_forward_op(t2, f.store, f.cfg, "idA", audio, aus, f.id_embed);
  CHECK(std::memcmp(t2.val(out2.face).data(), face.data(),
                    face.size() * sizeof(double)) == 0);
}

TEST_CASE("personalization flows only through AdaIN: identities differ") {
  Fixture f;
  // give identity B different modulation weights
  Rng rng(99);
  for (const char* stream : {"audio", "au"}) {
    Tensor& w =
        f.store.at("adain/idB/" + std::string(stream) + "/fc2/w").value;
    for (size_t i = 0; i < w.size(); ++i) w[i] += 0.1 * rng.normal();
  }
  const size_t T = 5;
  const Tensor audio = f.rand_audio(T, 71);
  const Tensor aus = f.rand_aus(T, 72);
  Tape ta, tb;
  MotionRefs oa =
      grmn_forward_op(ta, f.store, f.cfg, "idA", audio, aus, f.id_embed);
  MotionRefs ob =
      grmn_forward_op(tb, f.store, f.cfg, "idB", audio, aus, f.id_embed);
  double delta = 0.0;
  const Tensor &fa = ta.val(oa.face), &fb = tb.val(ob.face);
  for (size_t i = 0; i < fa.size(); ++i)
    delta = std::max(delta, std::fabs(fa[i] - fb[i]));
  CHECK(delta > 0.0);
}

TEST_CASE("grmn end-to-end gradcheck on a 2-frame fixture") {
  Fixture f;
  const size_t T = 2;
  const Tensor aus = f.rand_aus(T, 82);
  Tensor audio = f.rand_audio(T, 81);
  auto build = [&](Tape& t, ValueRef in) {
    // route the probe through the audio input
    Tape* tp = &t;
    ValueRef enc = encode_audio_op(*tp, f.store, f.cfg, in);
    ValueRef mod_a = adain_op(*tp, f.store, f.cfg, "idA", "audio", enc,
                              f.id_embed);
    ValueRef enc_e =
        encode_au_op(*tp, f.store, f.cfg, tp->constant(aus));
    ValueRef mod_e =
        adain_op(*tp, f.store, f.cfg, "idA", "au", enc_e, f.id_embed);
    BaseRefs base = decode_base_op(*tp, f.store, f.cfg, mod_a);
    ResidualRefs res = decode_residual_op(*tp, f.store, f.cfg, mod_a, mod_e);
    ValueRef g = decode_gate_op(*tp, f.store, f.cfg, res.z_e, mod_a);
    ValueRef face = tp->add(base.face, tp->row_scale(res.face, g));
    ValueRef mouth = tp->add(base.mouth, tp->row_scale(res.mouth, g));
    return tp->add(tp->sum(tp->square(face)),
                   tp->add(tp->sum(tp->square(mouth)), tp->sum(tp->square(g))));
  };
  CHECK(ad::finite_diff_check(build, audio, 1e-5) < 1e-4);
}

TEST_CASE("row-sliced window path agrees with the full forward") {
  Fixture f;
  const size_t T = 6;
  const Tensor audio = f.rand_audio(T, 91);
  const Tensor aus = f.rand_aus(T, 92);
  Tape ta, tb;
  MotionRefs full =
      grmn_forward_op(ta, f.store, f.cfg, "idA", audio, aus, f.id_embed);
  WindowRefs win =
      grmn_window_op(tb, f.store, f.cfg, "idA", audio, aus, f.id_embed);
  const Tensor& face_full = ta.val(full.face);
  const Tensor& face_win = tb.val(win.face);
  CHECK(std::memcmp(face_full.data(), face_win.data(),
                    face_full.size() * sizeof(double)) == 0);
  CHECK(std::memcmp(ta.val(full.gate).data(), tb.val(win.gate).data(),
                    T * sizeof(double)) == 0);
  CHECK(std::memcmp(ta.val(full.z_e).data(), tb.val(win.z_e).data(),
                    T * 7 * sizeof(double)) == 0);
  const Tensor& mouth_full = ta.val(full.mouth);
  for (size_t row : {size_t(0), size_t(3), size_t(5)}) {
    const Tensor& mrow =
        tb.val(mouth_row_op(tb, f.store, f.cfg, win, row));
    for (size_t i = 0; i < f.cfg.mouth_dim(); ++i)
      CHECK(mrow[i] == mouth_full[row * f.cfg.mouth_dim() + i]);
  }
}

TEST_CASE("every trainable parameter is reachable by backward") {
  Fixture f;
  std::map<std::string, double> total_grad;
  for (uint64_t seed = 0; seed < 3; ++seed) {
    const size_t T = 4;
    const Tensor audio = f.rand_audio(T, 200 + seed);
    const Tensor aus = f.rand_aus(T, 300 + seed);
    Tape t;
    MotionRefs out =
        grmn_forward_op(t, f.store, f.cfg, "idA", audio, aus, f.id_embed);
    ValueRef loss =
        t.add(t.sum(t.square(out.face)),
              t.add(t.sum(t.square(out.mouth)),
                    t.add(t.sum(t.square(out.gate)), t.sum(t.square(out.z_e)))));
    t.backward(loss);
    for (const auto& [name, ref] : t.params()) {
      const Tensor g = t.param_grad(name);
      double acc = 0.0;
      for (size_t i = 0; i < g.size(); ++i) acc += std::fabs(g[i]);
      total_grad[name] += acc;
    }
  }
  size_t checked = 0;
  for (const auto& [name, acc] : total_grad) {
    INFO("parameter " << name);
    CHECK(acc > 0.0);
    ++checked;
  }
  // grmn weights + idA adain weights all appear in the graph
  size_t expected = 0;
  for (const auto& [name, e] : f.store.entries()) {
    (void)e;
    if (name.rfind("grmn/", 0) == 0 || name.rfind("adain/idA/", 0) == 0)
      ++expected;
  }
  CHECK(checked == expected);
}
