#pragma once

#include <string>

#include "etg/autodiff.h"
#include "etg/optim.h"
#include "etg/rng.h"
#include "etg/tensor.h"

namespace etg {

// Architecture knobs for the gated residual motion network. mouth_count is
// fixed when the binding is built and baked into the decoder head shapes.
struct GrmnConfig {
  size_t audio_dim = 64;    // per-frame speech feature width
  size_t au_dim = 17;       // action-unit intensities
  size_t id_dim = 512;      // identity embedding width
  size_t hidden = 64;       // shared hidden width
  size_t layers = 2;        // transformer encoder depth
  size_t heads = 4;
  size_t expr_dim = 10;     // expression coefficients (jaw adds 3)
  size_t mouth_count = 0;   // intra-oral gaussians driven by the decoders
  size_t adain_hidden = 32;
  size_t head_hidden = 64;
  size_t gate_hidden = 32;
  static constexpr size_t emotion_classes = 7;

  size_t face_dim() const { return expr_dim + 3; }
  size_t mouth_dim() const { return mouth_count * 9; }
};

// Semi-orthogonal init (modified Gram-Schmidt on a seeded normal draw).
Tensor orthogonal_init(size_t rows, size_t cols, double gain, Rng& rng);

// Registers all shared network weights under "grmn/...".
void init_grmn_params(ParamStore& store, const GrmnConfig& cfg, Rng& rng);

// Registers one identity's modulation MLPs under "adain/<identity>/...".
void init_adain_params(ParamStore& store, const GrmnConfig& cfg,
                       const std::string& identity, Rng& rng);

// Instance-normalizes the stream over time, then applies an explicit
// per-channel gain/shift (gamma, beta_adain are 1xC nodes).
ad::ValueRef adain_modulate_op(ad::Tape& tape, ad::ValueRef stream,
                               ad::ValueRef gamma, ad::ValueRef beta,
                               double eps = 1e-5);

// gamma/beta predicted from the identity embedding by that identity's MLP.
struct AdainRefs {
  ad::ValueRef gamma, beta;
};
AdainRefs adain_predict_op(ad::Tape& tape, ParamStore& store,
                           const GrmnConfig& cfg, const std::string& identity,
                           const std::string& stream, const Tensor& id_embed);

ad::ValueRef adain_op(ad::Tape& tape, ParamStore& store, const GrmnConfig& cfg,
                      const std::string& identity, const std::string& stream,
                      ad::ValueRef features, const Tensor& id_embed);

// Temporal conv (k=3, same padding) -> pointwise MLP -> transformer encoder
// with sinusoidal positions. audio is TxD_a.
ad::ValueRef encode_audio_op(ad::Tape& tape, ParamStore& store,
                             const GrmnConfig& cfg, ad::ValueRef audio);

// Frame-local MLP; aus is TxD_e.
ad::ValueRef encode_au_op(ad::Tape& tape, ParamStore& store,
                          const GrmnConfig& cfg, ad::ValueRef aus);

struct BaseRefs {
  ad::ValueRef face;   // T x (K+3)
  ad::ValueRef mouth;  // T x (M*9)
};
BaseRefs decode_base_op(ad::Tape& tape, ParamStore& store,
                        const GrmnConfig& cfg, ad::ValueRef mod_audio);

struct ResidualRefs {
  ad::ValueRef z_e;    // T x 7 logits
  ad::ValueRef face;   // T x (K+3)
  ad::ValueRef mouth;  // T x (M*9)
};
ResidualRefs decode_residual_op(ad::Tape& tape, ParamStore& store,
                                const GrmnConfig& cfg, ad::ValueRef mod_audio,
                                ad::ValueRef mod_au);

// Scalar gate per frame, strictly inside (0,1).
ad::ValueRef decode_gate_op(ad::Tape& tape, ParamStore& store,
                            const GrmnConfig& cfg, ad::ValueRef z_e,
                            ad::ValueRef mod_audio);

struct MotionRefs {
  ad::ValueRef face_base, mouth_base;
  ad::ValueRef face_residual, mouth_residual;
  ad::ValueRef z_e;
  ad::ValueRef gate;          // T x 1
  ad::ValueRef face, mouth;   // fused: base + g * residual
};

MotionRefs grmn_forward_op(ad::Tape& tape, ParamStore& store,
                           const GrmnConfig& cfg, const std::string& identity,
                           const Tensor& audio, const Tensor& aus,
                           const Tensor& id_embed);

// Training-path variant: full-window gate/latent/face motion, but the wide
// intra-oral heads are evaluated per rendered row via mouth_row_op. Values
// agree with grmn_forward_op exactly.
struct WindowRefs {
  ad::ValueRef z_e, gate;
  ad::ValueRef face;                     // fused, T x (K+3)
  ad::ValueRef base_hidden, emo_hidden;  // T x head_hidden, post-activation
};
WindowRefs grmn_window_op(ad::Tape& tape, ParamStore& store,
                          const GrmnConfig& cfg, const std::string& identity,
                          const Tensor& audio, const Tensor& aus,
                          const Tensor& id_embed);

// Fused mouth deltas for one window row, shaped M x 9.
ad::ValueRef mouth_row_op(ad::Tape& tape, ParamStore& store,
                          const GrmnConfig& cfg, const WindowRefs& window,
                          size_t row);

// 1-D temporal convolution, kernel 3, zero-padded. x: TxC_in,
// w: {C_out, C_in, 3}, b: 1xC_out.
ad::ValueRef conv1d_same_op(ad::Tape& tape, ad::ValueRef x, ad::ValueRef w,
                            ad::ValueRef b);

// Sinusoidal position table, TxD.
Tensor sinusoidal_positions(size_t frames, size_t dim);

}  // namespace etg
