#include "etg/grmn.h"

#include <cmath>

#include "etg/common.h"

namespace etg {

using ad::Tape;
using ad::ValueRef;

Tensor orthogonal_init(size_t rows, size_t cols, double gain, Rng& rng) {
  const bool tall = rows >= cols;
  const size_t n = tall ? rows : cols, k = tall ? cols : rows;
  // draw n x k, orthonormalize the k columns
  std::vector<std::vector<double>> col(k, std::vector<double>(n));
  for (size_t j = 0; j < k; ++j)
    for (size_t i = 0; i < n; ++i) col[j][i] = rng.normal();
  for (size_t j = 0; j < k; ++j) {
    for (size_t p = 0; p < j; ++p) {
      double dot = 0.0;
      for (size_t i = 0; i < n; ++i) dot += col[j][i] * col[p][i];
      for (size_t i = 0; i < n; ++i) col[j][i] -= dot * col[p][i];
    }
    double norm = 0.0;
    for (size_t i = 0; i < n; ++i) norm += col[j][i] * col[j][i];
    norm = std::sqrt(norm);
    if (norm < 1e-12) {  // astronomically unlikely; fall back to a basis vector
      col[j].assign(n, 0.0);
      col[j][j % n] = 1.0;
      norm = 1.0;
    }
    for (size_t i = 0; i < n; ++i) col[j][i] /= norm;
  }
  Tensor out({rows, cols});
  for (size_t r = 0; r < rows; ++r)
    for (size_t c = 0; c < cols; ++c)
      out[r * cols + c] = gain * (tall ? col[c][r] : col[r][c]);
  return out;
}

namespace {

constexpr double kHeadGain = 1e-2;   // decoder output heads start near zero
constexpr double kAdainGain = 1e-3;  // modulation starts near identity

void linear(ParamStore& s, const std::string& name, size_t in, size_t out,
            double gain, Rng& rng) {
  s.create(name + "/w", orthogonal_init(in, out, gain, rng));
  s.create(name + "/b", Tensor({1, out}));
}

ValueRef apply_linear(Tape& t, ParamStore& s, const std::string& name,
                      ValueRef x) {
  ValueRef w = t.param(name + "/w", &s.at(name + "/w").value);
  ValueRef b = t.param(name + "/b", &s.at(name + "/b").value);
  return t.add_rowvec(t.matmul(x, w), b);
}

}  // namespace

void init_grmn_params(ParamStore& store, const GrmnConfig& cfg, Rng& rng) {
  const size_t h = cfg.hidden;
  // audio encoder
  store.create("grmn/audio/conv/w",
               orthogonal_init(h, cfg.audio_dim * 3, 1.0, rng));
  store.create("grmn/audio/conv/b", Tensor({1, h}));
  linear(store, "grmn/audio/proj", h, h, 1.0, rng);
  for (size_t l = 0; l < cfg.layers; ++l) {
    const std::string p = "grmn/audio/layer" + std::to_string(l);
    linear(store, p + "/wq", h, h, 1.0, rng);
    linear(store, p + "/wk", h, h, 1.0, rng);
    linear(store, p + "/wv", h, h, 1.0, rng);
    linear(store, p + "/wo", h, h, 1.0, rng);
    linear(store, p + "/ffn1", h, 4 * h, 1.0, rng);
    linear(store, p + "/ffn2", 4 * h, h, 1.0, rng);
  }
  // au encoder
  linear(store, "grmn/au/fc1", cfg.au_dim, h, 1.0, rng);
  linear(store, "grmn/au/fc2", h, h, 1.0, rng);
  // base branch
  linear(store, "grmn/base/trunk", h, cfg.head_hidden, 1.0, rng);
  linear(store, "grmn/base/face", cfg.head_hidden, cfg.face_dim(), kHeadGain,
         rng);
  linear(store, "grmn/base/mouth", cfg.head_hidden, cfg.mouth_dim(), kHeadGain,
         rng);
  // residual branch
  linear(store, "grmn/emo/enc1", 2 * h, cfg.head_hidden, 1.0, rng);
  linear(store, "grmn/emo/enc2", cfg.head_hidden, GrmnConfig::emotion_classes,
         1.0, rng);
  linear(store, "grmn/emo/dec1", GrmnConfig::emotion_classes, cfg.head_hidden,
         1.0, rng);
  linear(store, "grmn/emo/face", cfg.head_hidden, cfg.face_dim(), kHeadGain,
         rng);
  linear(store, "grmn/emo/mouth", cfg.head_hidden, cfg.mouth_dim(), kHeadGain,
         rng);
  // gate branch
  linear(store, "grmn/gate/fc1", GrmnConfig::emotion_classes + h,
         cfg.gate_hidden, 1.0, rng);
  linear(store, "grmn/gate/fc2", cfg.gate_hidden, 1, kHeadGain, rng);
}

void init_adain_params(ParamStore& store, const GrmnConfig& cfg,
                       const std::string& identity, Rng& rng) {
  for (const char* stream : {"audio", "au"}) {
    const std::string p = "adain/" + identity + "/" + stream;
    linear(store, p + "/fc1", cfg.id_dim, cfg.adain_hidden, 1.0, rng);
    linear(store, p + "/fc2", cfg.adain_hidden, 2 * cfg.hidden, kAdainGain,
           rng);
  }
}

ValueRef adain_modulate_op(Tape& tape, ValueRef stream, ValueRef gamma,
                           ValueRef beta, double eps) {
  ValueRef norm = tape.instance_norm_time(stream, eps);
  return tape.add_rowvec(tape.mul_rowvec(norm, gamma), beta);
}

AdainRefs adain_predict_op(Tape& tape, ParamStore& store, const GrmnConfig& cfg,
                           const std::string& identity,
                           const std::string& stream, const Tensor& id_embed) {
  if (id_embed.size() != cfg.id_dim)
    throw ValidationError("adain: identity embedding width mismatch");
  const std::string p = "adain/" + identity + "/" + stream;
  if (!store.has(p + "/fc1/w"))
    throw ValidationError("adain: no modulation parameters for identity '" +
                          identity + "'");
  Tensor s_row({1, cfg.id_dim});
  for (size_t i = 0; i < cfg.id_dim; ++i) s_row[i] = id_embed[i];
  ValueRef s = tape.constant(std::move(s_row));
  ValueRef hidden = tape.relu(apply_linear(tape, store, p + "/fc1", s));
  ValueRef out = apply_linear(tape, store, p + "/fc2", hidden);
  // gain parameterized around 1 so a fresh identity starts as a no-op
  ValueRef gamma =
      tape.add_const(tape.slice_cols(out, 0, cfg.hidden), 1.0);
  ValueRef beta = tape.slice_cols(out, cfg.hidden, 2 * cfg.hidden);
  return {gamma, beta};
}

ValueRef adain_op(Tape& tape, ParamStore& store, const GrmnConfig& cfg,
                  const std::string& identity, const std::string& stream,
                  ValueRef features, const Tensor& id_embed) {
  AdainRefs mod =
      adain_predict_op(tape, store, cfg, identity, stream, id_embed);
  return adain_modulate_op(tape, features, mod.gamma, mod.beta);
}

Tensor sinusoidal_positions(size_t frames, size_t dim) {
  Tensor out({frames, dim});
  for (size_t t = 0; t < frames; ++t)
    for (size_t i = 0; i < dim; ++i) {
      const double rate = std::pow(10000.0, -double(i / 2 * 2) / double(dim));
      out[t * dim + i] =
          (i % 2 == 0) ? std::sin(double(t) * rate) : std::cos(double(t) * rate);
    }
  return out;
}

ValueRef conv1d_same_op(Tape& tape, ValueRef x, ValueRef w, ValueRef b) {
  const Tensor& vx = tape.val(x);
  const Tensor& vw = tape.val(w);
  const Tensor& vb = tape.val(b);
  if (vx.ndim() != 2 || vw.ndim() != 2)
    throw ValidationError("conv1d: x must be TxC, w must be C_out x (C_in*3)");
  const size_t T = vx.dim(0), cin = vx.dim(1);
  const size_t cout = vw.dim(0);
  if (vw.dim(1) != cin * 3 || vb.size() != cout)
    throw ValidationError("conv1d: weight/bias shape mismatch");

  Tensor out({T, cout});
  for (size_t t = 0; t < T; ++t)
    for (size_t o = 0; o < cout; ++o) {
      double acc = vb[o];
      for (int k = -1; k <= 1; ++k) {
        const long tt = long(t) + k;
        if (tt < 0 || tt >= long(T)) continue;
        const double* xr = vx.data() + size_t(tt) * cin;
        const double* wr = vw.data() + o * cin * 3 + size_t(k + 1) * cin;
        for (size_t c = 0; c < cin; ++c) acc += wr[c] * xr[c];
      }
      out[t * cout + o] = acc;
    }
  return tape.custom(
      {x, w, b}, {std::move(out)},
      [x, w, b, T, cin, cout](Tape& tp, const std::vector<const Tensor*>& g) {
        const Tensor& go = *g[0];
        const Tensor& vx = tp.val(x);
        const Tensor& vw = tp.val(w);
        Tensor* gx = tp.grad_buffer(x);
        Tensor* gw = tp.grad_buffer(w);
        Tensor* gb = tp.grad_buffer(b);
        for (size_t t = 0; t < T; ++t)
          for (size_t o = 0; o < cout; ++o) {
            const double gv = go[t * cout + o];
            if (gv == 0.0) continue;
            if (gb) (*gb)[o] += gv;
            for (int k = -1; k <= 1; ++k) {
              const long tt = long(t) + k;
              if (tt < 0 || tt >= long(T)) continue;
              const double* xr = vx.data() + size_t(tt) * cin;
              const double* wr = vw.data() + o * cin * 3 + size_t(k + 1) * cin;
              for (size_t c = 0; c < cin; ++c) {
                if (gx) (*gx)[size_t(tt) * cin + c] += gv * wr[c];
                if (gw)
                  (*gw)[o * cin * 3 + size_t(k + 1) * cin + c] += gv * xr[c];
              }
            }
          }
      })[0];
}

namespace {

ValueRef transformer_layer(Tape& t, ParamStore& s, const GrmnConfig& cfg,
                           const std::string& prefix, ValueRef h) {
  const size_t dh = cfg.hidden, heads = cfg.heads, hd = dh / heads;
  ValueRef x = t.layer_norm_rows(h, 1e-5);
  ValueRef q = apply_linear(t, s, prefix + "/wq", x);
  ValueRef k = apply_linear(t, s, prefix + "/wk", x);
  ValueRef v = apply_linear(t, s, prefix + "/wv", x);
  ValueRef heads_out;
  bool first = true;
  for (size_t i = 0; i < heads; ++i) {
    ValueRef qh = t.slice_cols(q, i * hd, (i + 1) * hd);
    ValueRef kh = t.slice_cols(k, i * hd, (i + 1) * hd);
    ValueRef vh = t.slice_cols(v, i * hd, (i + 1) * hd);
    ValueRef att = t.softmax_rows(
        t.scale(t.matmul(qh, t.transpose(kh)), 1.0 / std::sqrt(double(hd))));
    ValueRef oh = t.matmul(att, vh);
    heads_out = first ? oh : t.concat_cols(heads_out, oh);
    first = false;
  }
  h = t.add(h, apply_linear(t, s, prefix + "/wo", heads_out));
  ValueRef y = t.layer_norm_rows(h, 1e-5);
  ValueRef f = apply_linear(
      t, s, prefix + "/ffn2",
      t.relu(apply_linear(t, s, prefix + "/ffn1", y)));
  return t.add(h, f);
}

}  // namespace

ValueRef encode_audio_op(Tape& tape, ParamStore& store, const GrmnConfig& cfg,
                         ValueRef audio) {
  const Tensor& va = tape.val(audio);
  if (va.ndim() != 2 || va.dim(1) != cfg.audio_dim)
    throw ValidationError("encode_audio: input must be T x audio_dim");
  const size_t T = va.dim(0);
  ValueRef w = tape.param("grmn/audio/conv/w",
                          &store.at("grmn/audio/conv/w").value);
  ValueRef b = tape.param("grmn/audio/conv/b",
                          &store.at("grmn/audio/conv/b").value);
  ValueRef h = conv1d_same_op(tape, audio, w, b);
  h = tape.relu(h);
  h = tape.relu(apply_linear(tape, store, "grmn/audio/proj", h));
  h = tape.add(h, tape.constant(sinusoidal_positions(T, cfg.hidden)));
  for (size_t l = 0; l < cfg.layers; ++l)
    h = transformer_layer(tape, store, cfg,
                          "grmn/audio/layer" + std::to_string(l), h);
  return h;
}

ValueRef encode_au_op(Tape& tape, ParamStore& store, const GrmnConfig& cfg,
                      ValueRef aus) {
  const Tensor& va = tape.val(aus);
  if (va.ndim() != 2 || va.dim(1) != cfg.au_dim)
    throw ValidationError("encode_au: input must be T x au_dim");
  ValueRef h = tape.relu(apply_linear(tape, store, "grmn/au/fc1", aus));
  return apply_linear(tape, store, "grmn/au/fc2", h);
}

BaseRefs decode_base_op(Tape& tape, ParamStore& store, const GrmnConfig& cfg,
                        ValueRef mod_audio) {
  (void)cfg;
  ValueRef h =
      tape.relu(apply_linear(tape, store, "grmn/base/trunk", mod_audio));
  BaseRefs out;
  out.face = apply_linear(tape, store, "grmn/base/face", h);
  out.mouth = apply_linear(tape, store, "grmn/base/mouth", h);
  return out;
}

ResidualRefs decode_residual_op(Tape& tape, ParamStore& store,
                                const GrmnConfig& cfg, ValueRef mod_audio,
                                ValueRef mod_au) {
  (void)cfg;
  const Tensor& a = tape.val(mod_audio);
  const Tensor& e = tape.val(mod_au);
  if (a.dim(0) != e.dim(0))
    throw ValidationError("decode_residual: stream lengths differ");
  ValueRef joint = tape.concat_cols(mod_audio, mod_au);
  ValueRef h = tape.relu(apply_linear(tape, store, "grmn/emo/enc1", joint));
  ResidualRefs out;
  out.z_e = apply_linear(tape, store, "grmn/emo/enc2", h);
  ValueRef d = tape.relu(apply_linear(tape, store, "grmn/emo/dec1", out.z_e));
  out.face = apply_linear(tape, store, "grmn/emo/face", d);
  out.mouth = apply_linear(tape, store, "grmn/emo/mouth", d);
  return out;
}

ValueRef decode_gate_op(Tape& tape, ParamStore& store, const GrmnConfig& cfg,
                        ValueRef z_e, ValueRef mod_audio) {
  (void)cfg;
  const Tensor& z = tape.val(z_e);
  const Tensor& a = tape.val(mod_audio);
  if (z.dim(0) != a.dim(0))
    throw ValidationError("decode_gate: input lengths differ");
  ValueRef joint = tape.concat_cols(z_e, mod_audio);
  ValueRef h = tape.relu(apply_linear(tape, store, "grmn/gate/fc1", joint));
  return tape.sigmoid(apply_linear(tape, store, "grmn/gate/fc2", h));
}

WindowRefs grmn_window_op(Tape& tape, ParamStore& store, const GrmnConfig& cfg,
                          const std::string& identity, const Tensor& audio,
                          const Tensor& aus, const Tensor& id_embed) {
  if (audio.dim(0) != aus.dim(0))
    throw ValidationError("grmn_window: audio/AU lengths differ");
  ValueRef a_in = tape.constant(audio);
  ValueRef e_in = tape.constant(aus);
  ValueRef enc_a = encode_audio_op(tape, store, cfg, a_in);
  ValueRef enc_e = encode_au_op(tape, store, cfg, e_in);
  ValueRef mod_a = adain_op(tape, store, cfg, identity, "audio", enc_a, id_embed);
  ValueRef mod_e = adain_op(tape, store, cfg, identity, "au", enc_e, id_embed);

  WindowRefs out;
  out.base_hidden =
      tape.relu(apply_linear(tape, store, "grmn/base/trunk", mod_a));
  ValueRef joint = tape.concat_cols(mod_a, mod_e);
  ValueRef eh = tape.relu(apply_linear(tape, store, "grmn/emo/enc1", joint));
  out.z_e = apply_linear(tape, store, "grmn/emo/enc2", eh);
  out.emo_hidden =
      tape.relu(apply_linear(tape, store, "grmn/emo/dec1", out.z_e));
  out.gate = decode_gate_op(tape, store, cfg, out.z_e, mod_a);
  ValueRef face_base = apply_linear(tape, store, "grmn/base/face",
                                    out.base_hidden);
  ValueRef face_res =
      apply_linear(tape, store, "grmn/emo/face", out.emo_hidden);
  out.face = tape.add(face_base, tape.row_scale(face_res, out.gate));
  return out;
}

ValueRef mouth_row_op(Tape& tape, ParamStore& store, const GrmnConfig& cfg,
                      const WindowRefs& window, size_t row) {
  ValueRef bh = tape.slice_rows(window.base_hidden, row, row + 1);
  ValueRef ehid = tape.slice_rows(window.emo_hidden, row, row + 1);
  ValueRef g = tape.slice_rows(window.gate, row, row + 1);
  ValueRef base = apply_linear(tape, store, "grmn/base/mouth", bh);
  ValueRef res = apply_linear(tape, store, "grmn/emo/mouth", ehid);
  ValueRef fused = tape.add(base, tape.row_scale(res, g));
  return tape.reshape(fused, {cfg.mouth_count, 9});
}

MotionRefs grmn_forward_op(Tape& tape, ParamStore& store, const GrmnConfig& cfg,
                           const std::string& identity, const Tensor& audio,
                           const Tensor& aus, const Tensor& id_embed) {
  if (audio.dim(0) != aus.dim(0))
    throw ValidationError("grmn_forward: audio/AU lengths differ");
  ValueRef a_in = tape.constant(audio);
  ValueRef e_in = tape.constant(aus);
  ValueRef enc_a = encode_audio_op(tape, store, cfg, a_in);
  ValueRef enc_e = encode_au_op(tape, store, cfg, e_in);
  ValueRef mod_a = adain_op(tape, store, cfg, identity, "audio", enc_a, id_embed);
  ValueRef mod_e = adain_op(tape, store, cfg, identity, "au", enc_e, id_embed);

  MotionRefs out;
  BaseRefs base = decode_base_op(tape, store, cfg, mod_a);
  ResidualRefs res = decode_residual_op(tape, store, cfg, mod_a, mod_e);
  out.face_base = base.face;
  out.mouth_base = base.mouth;
  out.face_residual = res.face;
  out.mouth_residual = res.mouth;
  out.z_e = res.z_e;
  out.gate = decode_gate_op(tape, store, cfg, res.z_e, mod_a);
  out.face = tape.add(base.face, tape.row_scale(res.face, out.gate));
  out.mouth = tape.add(base.mouth, tape.row_scale(res.mouth, out.gate));
  return out;
}

}  // namespace etg
