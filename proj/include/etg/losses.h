#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "etg/autodiff.h"
#include "etg/tensor.h"

namespace etg {

// Class order of the 7-way teacher distribution; "neutral" is last.
inline constexpr std::array<const char*, 7> kEmotionNames = {
    "angry", "disgust", "fear", "happy", "sad", "surprise", "neutral"};
inline constexpr size_t kNeutralClass = 6;

// Per-frame teacher supervision. Frames with present=0 carry no signal and
// are skipped by the distillation losses, never imputed.
struct TeacherSignals {
  Tensor p_emo;  // T x 7
  Tensor e;      // T x 1
  std::vector<uint8_t> present;

  size_t frames() const { return present.size(); }
  void validate() const;
};

struct LossWeights {
  double dssim = 0.2;
  double depth = 1e-2;
  double normal = 1e-3;
  double kl = 1.0;
  double score = 1.0;
};

enum class TrainPhase { kPretrain, kAdapt };

// e = 1 - p(neutral). Throws on a non-normalized distribution.
double emotion_score(const Tensor& p_emo_row);

// 11x11 Gaussian-window SSIM (sigma 1.5, K1=0.01, K2=0.03, unit range),
// valid region, channels averaged. Plain version for metrics and oracles.
double ssim_value(const Tensor& a, const Tensor& b);

// Differentiable mean SSIM of img (HxWxC node) against a constant target.
ad::ValueRef ssim_mean_op(ad::Tape& tape, ad::ValueRef img, const Tensor& gt);

// L1 + lambda_dssim * (1 - SSIM).
ad::ValueRef loss_render_op(ad::Tape& tape, ad::ValueRef img, const Tensor& gt,
                            double lambda_dssim);

// mean over supervised frames of KL(p_emo || softmax(z_e)).
ad::ValueRef loss_kl_op(ad::Tape& tape, ad::ValueRef z_e,
                        const TeacherSignals& teacher);

// mean over supervised frames of |g - e|.
ad::ValueRef loss_score_op(ad::Tape& tape, ad::ValueRef gate,
                           const TeacherSignals& teacher);

// lambda_D * mean|D - D_gt| + lambda_N * mean(1 - N . N_gt) over the mask.
ad::ValueRef loss_geo_op(ad::Tape& tape, ad::ValueRef depth,
                         ad::ValueRef normals, const Tensor& depth_gt,
                         const Tensor& normals_gt, const Tensor& mask,
                         double lambda_depth, double lambda_normal);

struct LossParts {
  ad::ValueRef render;
  ad::ValueRef kl;
  ad::ValueRef score;
  ad::ValueRef geo;      // ignored during pretraining
  bool has_geo = false;
};

// L_Render + kl_w * L_KL + score_w * L_Score (+ L_Geo when adapting).
// Throws NumericError naming the first non-finite term.
ad::ValueRef total_loss_op(ad::Tape& tape, const LossParts& parts,
                           TrainPhase phase, const LossWeights& weights);

}  // namespace etg
