#include "etg/camera.h"

#include "etg/common.h"

namespace etg {

void Camera::validate() const {
  if (!(fx > 0.0) || !(fy > 0.0))
    throw ValidationError("camera: focal lengths must be > 0");
  if (!(near > 0.0)) throw ValidationError("camera: near plane must be > 0");
  if (width == 0 || height == 0)
    throw ValidationError("camera: zero image dimensions");
  const double d = rot.det();
  if (std::fabs(d - 1.0) > 1e-6)
    throw ValidationError("camera: rotation determinant is not 1");
}

Tensor Camera::to_tensor() const {
  std::vector<double> d(19);
  d[0] = fx;
  d[1] = fy;
  d[2] = cx;
  d[3] = cy;
  d[4] = double(width);
  d[5] = double(height);
  d[6] = near;
  for (int i = 0; i < 9; ++i) d[7 + i] = rot.m[i];
  d[16] = trans.x;
  d[17] = trans.y;
  d[18] = trans.z;
  return Tensor({19}, std::move(d));
}

Camera Camera::from_tensor(const Tensor& t) {
  if (t.size() != 19)
    throw ValidationError("camera: expected a 19-value tensor");
  Camera c;
  c.fx = t[0];
  c.fy = t[1];
  c.cx = t[2];
  c.cy = t[3];
  c.width = size_t(t[4]);
  c.height = size_t(t[5]);
  c.near = t[6];
  for (int i = 0; i < 9; ++i) c.rot.m[i] = t[7 + i];
  c.trans = {t[16], t[17], t[18]};
  c.validate();
  return c;
}

}  // namespace etg
