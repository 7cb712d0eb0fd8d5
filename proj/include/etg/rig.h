#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "etg/autodiff.h"
#include "etg/camera.h"
#include "etg/geometry.h"
#include "etg/headmodel.h"
#include "etg/tensor.h"

namespace etg {

// One Gaussian's local attributes in its parent triangle's frame.
struct LocalGaussian {
  Vec3 mu_l;
  Quat rot_l;
  Vec3 scale_l;
  double alpha_l;
  Vec3 sh_dc;  // degree-0 color; higher bands live in the cloud tensor
  uint32_t parent_tri;
  Vec3 bary;
};

// Triangle-rigged Gaussians, struct-of-arrays. sh_l is M x 3 x B where
// B = (sh_degree+1)^2 basis functions; column 0 is the DC color.
struct GaussianCloud {
  Tensor mu_l;     // M x 3
  Tensor rot_l;    // M x 4 unit quaternions (w,x,y,z)
  Tensor scale_l;  // M x 3, > 0
  Tensor alpha_l;  // M
  Tensor sh_l;     // M x 3 x B
  std::vector<uint32_t> parent_tri;  // M
  Tensor bary;                       // M x 3, nonnegative, rows sum to 1
  std::vector<uint8_t> mouth_mask;   // M, membership in the intra-oral set

  size_t size() const { return parent_tri.size(); }
  size_t sh_bands() const { return sh_l.dim(2); }
  size_t mouth_count() const;
  LocalGaussian gaussian(size_t i) const;
  void validate(size_t tri_count) const;
};

struct TriangleFrame {
  Mat3 R;    // columns: first edge, in-plane perpendicular, normal
  Vec3 C;    // vertex centroid
  double k;  // isotropic scale: mean of first-edge length and opposing height
};

struct GlobalGaussian {
  Vec3 mu;
  Quat rot;
  Vec3 scale;
  double alpha;
  Vec3 sh_dc;
};

// World-space attributes, struct-of-arrays; alpha/sh are shared with the
// cloud they came from (copied, unchanged by the rig).
struct GlobalCloud {
  Tensor mu;     // M x 3
  Tensor rot;    // M x 4
  Tensor scale;  // M x 3
  Tensor alpha;  // M
  Tensor sh;     // M x 3 x B

  size_t size() const { return alpha.size(); }
  GlobalGaussian gaussian(size_t i) const;
};

// Uniform per-triangle sampling: floor(total/T) Gaussians per triangle with
// the remainder assigned to the lowest triangle indices; barycentric weights
// uniform on the simplex via square-root warping.
GaussianCloud sample_bindings(const Mesh& mesh, size_t total, uint64_t seed);

// Throws ValidationError on a degenerate triangle (area < 1e-12).
TriangleFrame compute_triangle_frame(const Mesh& mesh, size_t tri);

// mu = k R mu_l + bind, rot = quat(R) (x) rot_l, scale = k scale_l, with
// bind the Gaussian's barycentric point so mu_l = 0 recovers it. alpha and
// sh copy through untouched.
GlobalCloud rig_to_global(const GaussianCloud& cloud, const Mesh& mesh);

// Tape version: inputs are vertices (Nx3) and local attribute nodes;
// returns {mu, rot, scale} nodes. Binding topology comes from the cloud
// plus the face list the vertices are indexed by.
struct RigOutputs {
  ad::ValueRef mu, rot, scale;
};
RigOutputs rig_to_global_op(ad::Tape& tape, const GaussianCloud& cloud,
                            std::shared_ptr<const std::vector<uint32_t>> faces,
                            ad::ValueRef vertices, ad::ValueRef mu_l,
                            ad::ValueRef rot_l, ad::ValueRef scale_l);

// Eq-8-style residual on the masked subset: mu* = mu + dmu,
// rot* = quat(rodrigues(drot)) (x) rot (renormalized), scale* = scale + ds
// clamped to >= 1e-6. residual rows are (dmu[3], drot[3], dscale[3]) per
// masked Gaussian, in mask order. Returns the number of clamped scales.
size_t apply_mouth_residual(GlobalCloud& globals,
                            const std::vector<uint8_t>& mouth_mask,
                            const Tensor& residual);

struct ResidualOutputs {
  ad::ValueRef mu, rot, scale;
};
ResidualOutputs apply_mouth_residual_op(ad::Tape& tape,
                                        const std::vector<uint8_t>& mouth_mask,
                                        ad::ValueRef mu, ad::ValueRef rot,
                                        ad::ValueRef scale,
                                        ad::ValueRef residual);

// Ray-cast 2D landmarks onto the mesh. Misses are reported as nullopt, never
// fabricated.
struct LandmarkAnchor {
  uint32_t tri;
  Vec3 bary;
};
std::vector<std::optional<LandmarkAnchor>> anchor_landmarks(
    const Tensor& landmarks_2d, const Camera& camera, const Mesh& mesh);

// Breadth-first growth over edge-adjacent triangles from the seed triangles
// (always admitted), admitting a neighbor iff its centroid lies within rho
// of any seed point. Deterministic and invariant to seed ordering.
std::vector<uint32_t> grow_mouth_triangles(
    const Mesh& mesh, const std::vector<LandmarkAnchor>& seeds, double rho);

// Marks Gaussians whose parent triangle was admitted.
std::vector<uint8_t> select_mouth_region(
    const Mesh& mesh, const GaussianCloud& cloud,
    const std::vector<LandmarkAnchor>& seeds, double rho);

void save_cloud(const std::string& path, const GaussianCloud& cloud);
GaussianCloud load_cloud(const std::string& path);

}  // namespace etg
