#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "etg/autodiff.h"
#include "etg/geometry.h"
#include "etg/tensor.h"

namespace etg {

// Parametric head: template vertices + linear expression blendshapes + one
// jaw joint skinned over {head, jaw}. Identity shape is baked into the
// template. Immutable after load; deformation is pure and re-entrant.
struct HeadModelAssets {
  Tensor template_verts;  // N x 3
  Tensor expr_basis;      // N x 3 x K
  Tensor skin_weights;    // N x 2, columns {head, jaw}, rows sum to 1
  Vec3 jaw_pivot;
  std::shared_ptr<const std::vector<uint32_t>> faces;  // 3T flat indices
  std::vector<uint32_t> landmark_vertices;  // optional, for landmark metrics

  size_t vertex_count() const { return template_verts.dim(0); }
  size_t expr_dim() const { return expr_basis.dim(2); }
  size_t tri_count() const { return faces ? faces->size() / 3 : 0; }

  Vec3 template_vertex(size_t i) const {
    return {template_verts[i * 3], template_verts[i * 3 + 1],
            template_verts[i * 3 + 2]};
  }

  // Checks all structural invariants; throws ValidationError naming the
  // offending row / triangle.
  void validate() const;
};

struct ExpressionParams {
  Tensor psi;  // K
};

struct JawPose {
  Vec3 theta;  // axis-angle, |theta| < pi
};

struct Mesh {
  Tensor vertices;  // N x 3
  std::shared_ptr<const std::vector<uint32_t>> faces;

  size_t vertex_count() const { return vertices.dim(0); }
  size_t tri_count() const { return faces ? faces->size() / 3 : 0; }
  Vec3 vertex(size_t i) const {
    return {vertices[i * 3], vertices[i * 3 + 1], vertices[i * 3 + 2]};
  }
};

// v_i = LBS over {identity, rotation about jaw_pivot} of
//       (template_i + sum_k psi_k * basis_{i,:,k})
Mesh deform_mesh(const HeadModelAssets& model, const ExpressionParams& psi,
                 const JawPose& jaw);

// VJP of deform_mesh: scatters d(loss)/d(vertices) into psi and jaw grads.
void deform_mesh_backward(const HeadModelAssets& model, const Tensor& psi,
                          const Vec3& jaw, const Tensor& grad_vertices,
                          Tensor& grad_psi, Vec3& grad_jaw);

// Tape op: vertices node (N x 3) from psi (K) and jaw (3) nodes.
ad::ValueRef deform_mesh_op(ad::Tape& tape, const HeadModelAssets& model,
                            ad::ValueRef psi, ad::ValueRef jaw);

// Rigid transform of a vertex tensor (head pose): v' = R v + t.
Tensor rigid_transform(const Tensor& vertices, const Mat3& R, const Vec3& t);
ad::ValueRef rigid_transform_op(ad::Tape& tape, ad::ValueRef vertices,
                                const Mat3& R, const Vec3& t);

HeadModelAssets load_head_model(const std::string& path);
void save_head_model(const std::string& path, const HeadModelAssets& model);

}  // namespace etg
