#include "etg/losses.h"

#include <cmath>
#include <memory>
#include <sstream>

#include "etg/common.h"

namespace etg {

using ad::Tape;
using ad::ValueRef;

void TeacherSignals::validate() const {
  const size_t T = frames();
  if (p_emo.ndim() != 2 || p_emo.dim(0) != T || p_emo.dim(1) != 7)
    throw ValidationError("teacher: p_emo must be Tx7");
  if (e.size() != T) throw ValidationError("teacher: e must have T entries");
  for (size_t t = 0; t < T; ++t) {
    if (!present[t]) continue;
    double sum = 0.0;
    for (size_t c = 0; c < 7; ++c) {
      if (p_emo[t * 7 + c] < 0.0) {
        std::ostringstream os;
        os << "teacher: negative probability at frame " << t;
        throw ValidationError(os.str());
      }
      sum += p_emo[t * 7 + c];
    }
    if (std::fabs(sum - 1.0) > 1e-6) {
      std::ostringstream os;
      os << "teacher: frame " << t << " distribution sums to " << sum;
      throw ValidationError(os.str());
    }
    if (std::fabs(e[t] - (1.0 - p_emo[t * 7 + kNeutralClass])) > 1e-6) {
      std::ostringstream os;
      os << "teacher: frame " << t << " score disagrees with 1 - p(neutral)";
      throw ValidationError(os.str());
    }
    if (e[t] < -1e-9 || e[t] > 1.0 + 1e-9)
      throw ValidationError("teacher: score outside [0,1]");
  }
}

double emotion_score(const Tensor& p_emo_row) {
  if (p_emo_row.size() != 7)
    throw ValidationError("emotion_score: expected a 7-way distribution");
  double sum = 0.0;
  for (size_t c = 0; c < 7; ++c) {
    if (p_emo_row[c] < 0.0)
      throw ValidationError("emotion_score: negative probability");
    sum += p_emo_row[c];
  }
  if (std::fabs(sum - 1.0) > 1e-6)
    throw ValidationError("emotion_score: distribution does not sum to 1");
  return 1.0 - p_emo_row[kNeutralClass];
}

// ---------------------------------------------------------------------------
// SSIM

namespace {

constexpr int kWin = 11;
constexpr double kSigma = 1.5;
constexpr double kC1 = 0.01 * 0.01;  // (K1 L)^2, L = 1
constexpr double kC2 = 0.03 * 0.03;

const std::array<double, kWin>& gaussian_window() {
  static const std::array<double, kWin> w = [] {
    std::array<double, kWin> k{};
    double sum = 0.0;
    for (int i = 0; i < kWin; ++i) {
      const double d = double(i - kWin / 2);
      k[i] = std::exp(-0.5 * d * d / (kSigma * kSigma));
      sum += k[i];
    }
    for (auto& v : k) v /= sum;
    return k;
  }();
  return w;
}

struct ImgShape {
  size_t h, w, c;
};

ImgShape img_shape(const Tensor& t, const char* what) {
  if (t.ndim() == 2) return {t.dim(0), t.dim(1), 1};
  if (t.ndim() == 3) return {t.dim(0), t.dim(1), t.dim(2)};
  throw ValidationError(std::string(what) + ": expected HxW or HxWxC image");
}

// Separable valid-region Gaussian blur of an HxWxC image.
Tensor blur_valid(const Tensor& img, const ImgShape& s) {
  const auto& k = gaussian_window();
  const size_t oh = s.h - kWin + 1, ow = s.w - kWin + 1;
  if (s.h < kWin || s.w < kWin)
    throw ValidationError("ssim: image smaller than the 11x11 window");
  Tensor rows({s.h, ow, s.c});
  for (size_t y = 0; y < s.h; ++y)
    for (size_t x = 0; x < ow; ++x)
      for (size_t c = 0; c < s.c; ++c) {
        double acc = 0.0;
        for (int i = 0; i < kWin; ++i)
          acc += k[i] * img[(y * s.w + x + i) * s.c + c];
        rows[(y * ow + x) * s.c + c] = acc;
      }
  Tensor out({oh, ow, s.c});
  for (size_t y = 0; y < oh; ++y)
    for (size_t x = 0; x < ow; ++x)
      for (size_t c = 0; c < s.c; ++c) {
        double acc = 0.0;
        for (int i = 0; i < kWin; ++i)
          acc += k[i] * rows[((y + i) * ow + x) * s.c + c];
        out[(y * ow + x) * s.c + c] = acc;
      }
  return out;
}

// Tape wrapper; the adjoint of valid correlation with a symmetric kernel is
// zero-padded full convolution with the same kernel.
ValueRef blur_valid_op(Tape& tape, ValueRef img) {
  const Tensor& v = tape.val(img);
  const ImgShape s = img_shape(v, "ssim blur");
  Tensor out = blur_valid(v, s);
  return tape.custom(
      {img}, {std::move(out)},
      [img, s](Tape& t, const std::vector<const Tensor*>& g) {
        const Tensor& go = *g[0];
        Tensor* gi = t.grad_buffer(img);
        if (!gi) return;
        const auto& k = gaussian_window();
        const size_t oh = s.h - kWin + 1, ow = s.w - kWin + 1;
        for (size_t y = 0; y < oh; ++y)
          for (size_t x = 0; x < ow; ++x)
            for (size_t c = 0; c < s.c; ++c) {
              const double gv = go[(y * ow + x) * s.c + c];
              if (gv == 0.0) continue;
              for (int i = 0; i < kWin; ++i)
                for (int j = 0; j < kWin; ++j)
                  (*gi)[((y + i) * s.w + x + j) * s.c + c] +=
                      gv * k[i] * k[j];
            }
      })[0];
}

}  // namespace

double ssim_value(const Tensor& a, const Tensor& b) {
  const ImgShape s = img_shape(a, "ssim");
  if (!a.same_shape(b)) throw ValidationError("ssim: image shapes differ");
  Tensor a2(a.dims()), b2(a.dims()), ab(a.dims());
  for (size_t i = 0; i < a.size(); ++i) {
    a2[i] = a[i] * a[i];
    b2[i] = b[i] * b[i];
    ab[i] = a[i] * b[i];
  }
  const Tensor mu_a = blur_valid(a, s);
  const Tensor mu_b = blur_valid(b, s);
  const Tensor m_a2 = blur_valid(a2, s);
  const Tensor m_b2 = blur_valid(b2, s);
  const Tensor m_ab = blur_valid(ab, s);
  double acc = 0.0;
  for (size_t i = 0; i < mu_a.size(); ++i) {
    const double va = m_a2[i] - mu_a[i] * mu_a[i];
    const double vb = m_b2[i] - mu_b[i] * mu_b[i];
    const double cov = m_ab[i] - mu_a[i] * mu_b[i];
    const double num = (2.0 * mu_a[i] * mu_b[i] + kC1) * (2.0 * cov + kC2);
    const double den =
        (mu_a[i] * mu_a[i] + mu_b[i] * mu_b[i] + kC1) * (va + vb + kC2);
    acc += num / den;
  }
  return acc / double(mu_a.size());
}

ValueRef ssim_mean_op(Tape& tape, ValueRef img, const Tensor& gt) {
  const Tensor& v = tape.val(img);
  if (!v.same_shape(gt))
    throw ValidationError("ssim: image shapes differ");
  const ImgShape s = img_shape(v, "ssim");
  Tensor gt2(gt.dims());
  for (size_t i = 0; i < gt.size(); ++i) gt2[i] = gt[i] * gt[i];
  ValueRef y = tape.constant(gt);
  ValueRef mu_x = blur_valid_op(tape, img);
  ValueRef mu_y = tape.constant(blur_valid(gt, s));
  ValueRef m_x2 = blur_valid_op(tape, tape.square(img));
  ValueRef m_y2 = tape.constant(blur_valid(gt2, s));
  ValueRef m_xy = blur_valid_op(tape, tape.mul(img, y));

  ValueRef mu_xy = tape.mul(mu_x, mu_y);
  ValueRef var_x = tape.sub(m_x2, tape.square(mu_x));
  ValueRef var_y = tape.sub(m_y2, tape.square(mu_y));
  ValueRef cov = tape.sub(m_xy, mu_xy);
  ValueRef num = tape.mul(tape.add_const(tape.scale(mu_xy, 2.0), kC1),
                          tape.add_const(tape.scale(cov, 2.0), kC2));
  ValueRef den =
      tape.mul(tape.add_const(tape.add(tape.square(mu_x), tape.square(mu_y)),
                              kC1),
               tape.add_const(tape.add(var_x, var_y), kC2));
  return tape.mean(tape.div(num, den));
}

ValueRef loss_render_op(Tape& tape, ValueRef img, const Tensor& gt,
                        double lambda_dssim) {
  const Tensor& v = tape.val(img);
  if (!v.same_shape(gt))
    throw ValidationError("loss_render: image dimensions differ");
  ValueRef l1 = tape.mean(tape.abs_(tape.sub(img, tape.constant(gt))));
  if (lambda_dssim == 0.0) return l1;
  ValueRef dssim = tape.add_const(tape.neg(ssim_mean_op(tape, img, gt)), 1.0);
  return tape.add(l1, tape.scale(dssim, lambda_dssim));
}

ValueRef loss_kl_op(Tape& tape, ValueRef z_e, const TeacherSignals& teacher) {
  teacher.validate();
  const Tensor& z = tape.val(z_e);
  const size_t T = teacher.frames();
  if (z.ndim() != 2 || z.dim(0) != T || z.dim(1) != 7)
    throw ValidationError("loss_kl: z_e must be Tx7 and match the teacher");
  size_t count = 0;
  for (uint8_t p : teacher.present) count += p != 0;
  if (count == 0) return tape.constant(Tensor::scalar(0.0));

  // sum_c p log p (constant) and masked p for the cross term
  Tensor p_masked({T, 7});
  double entropy_acc = 0.0;
  for (size_t t = 0; t < T; ++t) {
    if (!teacher.present[t]) continue;
    for (size_t c = 0; c < 7; ++c) {
      const double p = teacher.p_emo[t * 7 + c];
      p_masked[t * 7 + c] = p;
      if (p > 0.0) entropy_acc += p * std::log(p);
    }
  }
  ValueRef lsm = tape.logsoftmax_rows(z_e);
  ValueRef cross = tape.sum(tape.mul(lsm, tape.constant(std::move(p_masked))));
  return tape.add_const(tape.scale(cross, -1.0 / double(count)),
                        entropy_acc / double(count));
}

ValueRef loss_score_op(Tape& tape, ValueRef gate, const TeacherSignals& teacher) {
  teacher.validate();
  const Tensor& g = tape.val(gate);
  const size_t T = teacher.frames();
  if (g.size() != T)
    throw ValidationError("loss_score: gate length must match the teacher");
  size_t count = 0;
  Tensor mask(g.dims());
  Tensor target(g.dims());
  for (size_t t = 0; t < T; ++t) {
    if (!teacher.present[t]) continue;
    mask[t] = 1.0;
    target[t] = teacher.e[t];
    ++count;
  }
  if (count == 0) return tape.constant(Tensor::scalar(0.0));
  ValueRef diff = tape.abs_(tape.sub(gate, tape.constant(std::move(target))));
  return tape.scale(tape.sum(tape.mul(diff, tape.constant(std::move(mask)))),
                    1.0 / double(count));
}

ValueRef loss_geo_op(Tape& tape, ValueRef depth, ValueRef normals,
                     const Tensor& depth_gt, const Tensor& normals_gt,
                     const Tensor& mask, double lambda_depth,
                     double lambda_normal) {
  const Tensor& d = tape.val(depth);
  const Tensor& n = tape.val(normals);
  if (!d.same_shape(depth_gt) || !d.same_shape(mask))
    throw ValidationError("loss_geo: depth/mask shapes disagree");
  if (!n.same_shape(normals_gt))
    throw ValidationError("loss_geo: normal shapes disagree");
  double count = 0.0;
  for (size_t i = 0; i < mask.size(); ++i) count += mask[i] != 0.0 ? 1.0 : 0.0;
  if (count == 0.0)
    throw ValidationError("loss_geo: empty mask");

  const size_t hw = d.size();
  ValueRef mask_col = tape.constant(mask);
  ValueRef dterm = tape.scale(
      tape.sum(tape.mul(tape.abs_(tape.sub(depth, tape.constant(depth_gt))),
                        mask_col)),
      lambda_depth / count);
  // per-pixel cosine: reshape to (H*W)x3 and dot against the target
  ValueRef nflat = tape.reshape(normals, {hw, 3});
  ValueRef prod = tape.mul(nflat, tape.constant(
                                      Tensor({hw, 3}, std::vector<double>(
                                                          normals_gt.data(),
                                                          normals_gt.data() +
                                                              normals_gt.size()))));
  ValueRef dots = tape.matmul(prod, tape.constant(Tensor({3, 1}, {1, 1, 1})));
  ValueRef one_minus = tape.add_const(tape.neg(dots), 1.0);
  ValueRef mask_flat = tape.constant(
      Tensor({hw, 1}, std::vector<double>(mask.data(), mask.data() + hw)));
  ValueRef nterm = tape.scale(tape.sum(tape.mul(one_minus, mask_flat)),
                              lambda_normal / count);
  return tape.add(dterm, nterm);
}

ValueRef total_loss_op(Tape& tape, const LossParts& parts, TrainPhase phase,
                       const LossWeights& weights) {
  auto check_term = [&tape](ValueRef r, const char* name) {
    const Tensor& v = tape.val(r);
    if (v.size() != 1 || !std::isfinite(v[0]))
      throw NumericError(std::string("total_loss: non-finite term ") + name);
  };
  check_term(parts.render, "L_Render");
  check_term(parts.kl, "L_KL");
  check_term(parts.score, "L_Score");
  ValueRef total = tape.add(parts.render,
                            tape.add(tape.scale(parts.kl, weights.kl),
                                     tape.scale(parts.score, weights.score)));
  if (phase == TrainPhase::kAdapt && parts.has_geo) {
    check_term(parts.geo, "L_Geo");
    total = tape.add(total, parts.geo);
  }
  return total;
}

}  // namespace etg
