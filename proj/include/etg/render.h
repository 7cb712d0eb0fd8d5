#pragma once

#include <cstdint>
#include <vector>

#include "etg/autodiff.h"
#include "etg/camera.h"
#include "etg/rig.h"
#include "etg/tensor.h"

namespace etg {

// Depth sentinel written to background pixels.
inline constexpr double kFarDepth = 1e9;

struct RenderOptions {
  int threads = 1;                   // forward tiling; results do not depend on it
  double alpha_min = 1e-7;           // contributions below this are skipped
  double transmittance_min = 1e-5;   // front-to-back early stop
  double max_weight = 0.995;         // per-splat weight ceiling
};

struct RenderOutput {
  Tensor color;  // H x W x 3, in [0,1]
  Tensor alpha;  // H x W, accumulated opacity
  Tensor depth;  // H x W, alpha-weighted expected camera-z; kFarDepth outside
  std::vector<uint32_t> contrib_count;  // per pixel
};

// Screen-space footprint of one Gaussian. cov2d/inv_cov are packed (xx, xy,
// yy) and include the +0.3 px^2 regularization.
struct ProjectedGaussian {
  bool culled = true;
  double mean2d[2] = {0, 0};
  double cov2d[3] = {0, 0, 0};
  double z = 0;
};

ProjectedGaussian project_gaussian(const GlobalGaussian& g, const Camera& cam);

RenderOutput render(const GlobalCloud& globals, const Camera& cam,
                    const RenderOptions& opts = {});

// Differentiable render on the tape. Inputs are the global attribute nodes
// (mu Mx3, rot Mx4, scale Mx3, alpha M, sh Mx3xB); outputs color/alpha/depth
// nodes. The depth sort is treated as fixed by the backward pass.
struct RenderRefs {
  ad::ValueRef color, alpha, depth;
};
RenderRefs render_op(ad::Tape& tape, const Camera& cam, ad::ValueRef mu,
                     ad::ValueRef rot, ad::ValueRef scale, ad::ValueRef alpha,
                     ad::ValueRef sh, const RenderOptions& opts = {});

// Central-difference screen-space normals from expected depth, camera frame,
// oriented toward the camera; zero vector on background/border pixels.
// valid_mask (H x W, 0/1) marks pixels where all four neighbors and the
// center pass the alpha threshold.
Tensor depth_to_normals(const Tensor& depth, const Camera& cam,
                        const Tensor& alpha, double alpha_threshold,
                        Tensor* valid_mask = nullptr);

ad::ValueRef depth_to_normals_op(ad::Tape& tape, ad::ValueRef depth,
                                 const Camera& cam, const Tensor& alpha,
                                 double alpha_threshold,
                                 Tensor* valid_mask = nullptr);

// Number of spherical-harmonic basis functions for a degree (0..3).
size_t sh_basis_size(int degree);

}  // namespace etg
