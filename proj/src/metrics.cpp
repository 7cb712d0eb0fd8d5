#include "etg/metrics.h"

#include <cmath>

#include "etg/common.h"
#include "etg/losses.h"

namespace etg {

double psnr(const Tensor& img, const Tensor& gt) {
  if (!img.same_shape(gt)) throw ValidationError("psnr: shapes differ");
  double mse = 0.0;
  for (size_t i = 0; i < img.size(); ++i) {
    const double d = img[i] - gt[i];
    mse += d * d;
  }
  mse /= double(img.size());
  if (mse < 1e-10) return 99.0;
  return 10.0 * std::log10(1.0 / mse);
}

double lmd(const Tensor& pred, const Tensor& gt) {
  if (!pred.same_shape(gt) || pred.ndim() != 2 || pred.dim(1) != 2)
    throw ValidationError("lmd: landmark sets must both be Lx2");
  const size_t n = pred.dim(0);
  double acc = 0.0;
  for (size_t i = 0; i < n; ++i) {
    const double dx = pred[i * 2] - gt[i * 2];
    const double dy = pred[i * 2 + 1] - gt[i * 2 + 1];
    acc += std::sqrt(dx * dx + dy * dy);
  }
  return acc / double(n);
}

double ssim_metric(const Tensor& img, const Tensor& gt) {
  return ssim_value(img, gt);
}

}  // namespace etg
