#pragma once

#include <cstddef>

#include "etg/geometry.h"
#include "etg/tensor.h"

namespace etg {

// Pinhole camera, OpenCV convention: p_cam = R p_world + t, +z forward,
// pixel = (fx x/z + cx, fy y/z + cy). Pixel (i,j) covers [j,j+1)x[i,i+1)
// with center (j+0.5, i+0.5).
struct Camera {
  double fx = 1, fy = 1, cx = 0, cy = 0;
  Mat3 rot = Mat3::identity();  // world -> camera
  Vec3 trans;
  size_t width = 0, height = 0;
  double near = 0.01;

  Vec3 to_camera(const Vec3& p) const { return rot * p + trans; }
  Vec3 position() const { return -rot.transposed_mul(trans); }

  // World-space unit direction through pixel coordinate (u, v).
  Vec3 pixel_ray(double u, double v) const {
    const Vec3 d{(u - cx) / fx, (v - cy) / fy, 1.0};
    return rot.transposed_mul(d).normalized();
  }

  void validate() const;

  // 19-value layout: fx fy cx cy width height near R[9] t[3]
  Tensor to_tensor() const;
  static Camera from_tensor(const Tensor& t);
};

}  // namespace etg
