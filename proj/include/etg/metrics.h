#pragma once

#include "etg/tensor.h"

namespace etg {

// 10*log10(1/MSE) for unit-range images, capped at 99 dB when MSE < 1e-10.
double psnr(const Tensor& img, const Tensor& gt);

// Mean Euclidean pixel distance between Lx2 landmark sets.
double lmd(const Tensor& pred, const Tensor& gt);

// ssim lives in losses.h (ssim_value) so the loss and the metric share the
// same window; re-exported here for callers that only need metrics.
double ssim_metric(const Tensor& img, const Tensor& gt);

}  // namespace etg
