#include "etg/headmodel.h"

#include <cmath>
#include <sstream>

#include "etg/common.h"
#include "etg/io.h"

namespace etg {

void HeadModelAssets::validate() const {
  const size_t n = vertex_count();
  if (template_verts.ndim() != 2 || template_verts.dim(1) != 3)
    throw ValidationError("head model: template must be Nx3");
  if (expr_basis.ndim() != 3 || expr_basis.dim(0) != n ||
      expr_basis.dim(1) != 3)
    throw ValidationError("head model: expr_basis must be Nx3xK");
  if (skin_weights.ndim() != 2 || skin_weights.dim(0) != n ||
      skin_weights.dim(1) != 2)
    throw ValidationError("head model: skin_weights must be Nx2");
  for (size_t i = 0; i < n; ++i) {
    const double a = skin_weights[i * 2], b = skin_weights[i * 2 + 1];
    if (a < 0.0 || b < 0.0 || std::fabs(a + b - 1.0) > 1e-6) {
      std::ostringstream os;
      os << "head model: skin_weights row " << i << " = (" << a << ", " << b
         << ") must be nonnegative and sum to 1";
      throw ValidationError(os.str());
    }
  }
  if (!faces || faces->empty() || faces->size() % 3 != 0)
    throw ValidationError("head model: faces must be a Tx3 index list");
  for (size_t t = 0; t < tri_count(); ++t) {
    const uint32_t* f = faces->data() + t * 3;
    for (int k = 0; k < 3; ++k)
      if (f[k] >= n) {
        std::ostringstream os;
        os << "head model: triangle " << t << " references vertex " << f[k]
           << " out of " << n;
        throw ValidationError(os.str());
      }
    const Vec3 v0 = template_vertex(f[0]);
    const Vec3 v1 = template_vertex(f[1]);
    const Vec3 v2 = template_vertex(f[2]);
    const double area = 0.5 * (v1 - v0).cross(v2 - v0).norm();
    if (area <= 1e-12) {
      std::ostringstream os;
      os << "head model: degenerate triangle " << t << " (area " << area
         << ")";
      throw ValidationError(os.str());
    }
  }
  for (uint32_t lv : landmark_vertices)
    if (lv >= n)
      throw ValidationError("head model: landmark vertex index out of range");
}

namespace {

// shaped_i = template_i + sum_k psi_k * basis[i,:,k]
void shaped_vertices(const HeadModelAssets& m, const Tensor& psi,
                     Tensor& out) {
  const size_t n = m.vertex_count(), k = m.expr_dim();
  out = m.template_verts;
  const double* basis = m.expr_basis.data();
  for (size_t i = 0; i < n; ++i)
    for (size_t c = 0; c < 3; ++c) {
      double acc = 0.0;
      const double* row = basis + (i * 3 + c) * k;
      for (size_t j = 0; j < k; ++j) acc += psi[j] * row[j];
      out[i * 3 + c] += acc;
    }
}

}  // namespace

Mesh deform_mesh(const HeadModelAssets& model, const ExpressionParams& psi,
                 const JawPose& jaw) {
  if (psi.psi.size() != model.expr_dim()) {
    std::ostringstream os;
    os << "deform_mesh: psi has " << psi.psi.size() << " coefficients, model "
       << "expects " << model.expr_dim();
    throw ValidationError(os.str());
  }
  if (!(jaw.theta.norm() < 3.14159265358979323846))
    throw ValidationError("deform_mesh: jaw axis-angle norm must be < pi");

  Tensor shaped;
  shaped_vertices(model, psi.psi, shaped);
  // delta form of the two-bone blend: v = s + w_j (R - I)(s - pivot).
  // At the rest pose R - I is exactly zero, so v == s bitwise.
  const Mat3 r = rodrigues(jaw.theta);
  Mat3 rmi = r;
  for (int d = 0; d < 3; ++d) rmi(d, d) -= 1.0;
  const Vec3 p = model.jaw_pivot;
  const size_t n = model.vertex_count();
  Tensor out({n, 3});
  for (size_t i = 0; i < n; ++i) {
    const Vec3 s{shaped[i * 3], shaped[i * 3 + 1], shaped[i * 3 + 2]};
    const double wj = model.skin_weights[i * 2 + 1];
    const Vec3 v = s + wj * (rmi * (s - p));
    out[i * 3] = v.x;
    out[i * 3 + 1] = v.y;
    out[i * 3 + 2] = v.z;
  }
  return Mesh{std::move(out), model.faces};
}

void deform_mesh_backward(const HeadModelAssets& model, const Tensor& psi,
                          const Vec3& jaw, const Tensor& grad_vertices,
                          Tensor& grad_psi, Vec3& grad_jaw) {
  const size_t n = model.vertex_count(), k = model.expr_dim();
  Tensor shaped;
  shaped_vertices(model, psi, shaped);
  const Mat3 r = rodrigues(jaw);
  const auto jr = rodrigues_jacobian(jaw);
  const Vec3 p = model.jaw_pivot;
  if (!grad_psi.same_shape(psi)) grad_psi = Tensor(psi.dims());
  grad_jaw = Vec3{};
  const double* basis = model.expr_basis.data();
  for (size_t i = 0; i < n; ++i) {
    const Vec3 g{grad_vertices[i * 3], grad_vertices[i * 3 + 1],
                 grad_vertices[i * 3 + 2]};
    const double wj = model.skin_weights[i * 2 + 1];
    // dv/ds = (1 - wj) I + wj R, so pull g back through it before dotting
    // the basis.
    const Vec3 gs = (1.0 - wj) * g + wj * r.transposed_mul(g);
    for (size_t c = 0; c < 3; ++c) {
      const double gc = c == 0 ? gs.x : (c == 1 ? gs.y : gs.z);
      if (gc == 0.0) continue;
      const double* row = basis + (i * 3 + c) * k;
      for (size_t j = 0; j < k; ++j) grad_psi[j] += gc * row[j];
    }
    if (wj != 0.0) {
      const Vec3 s{shaped[i * 3], shaped[i * 3 + 1], shaped[i * 3 + 2]};
      const Vec3 d = s - p;
      grad_jaw.x += wj * g.dot(jr[0] * d);
      grad_jaw.y += wj * g.dot(jr[1] * d);
      grad_jaw.z += wj * g.dot(jr[2] * d);
    }
  }
}

ad::ValueRef deform_mesh_op(ad::Tape& tape, const HeadModelAssets& model,
                            ad::ValueRef psi, ad::ValueRef jaw) {
  const Tensor& psi_v = tape.val(psi);
  const Tensor& jaw_v = tape.val(jaw);
  if (jaw_v.size() != 3)
    throw ValidationError("deform_mesh_op: jaw must have 3 entries");
  ExpressionParams ep{psi_v};
  JawPose jp{{jaw_v[0], jaw_v[1], jaw_v[2]}};
  Mesh mesh = deform_mesh(model, ep, jp);
  const HeadModelAssets* m = &model;
  return tape.custom(
      {psi, jaw}, {std::move(mesh.vertices)},
      [m, psi, jaw](ad::Tape& t, const std::vector<const Tensor*>& g) {
        const Tensor& go = *g[0];
        const Tensor& psi_v = t.val(psi);
        const Tensor& jaw_v = t.val(jaw);
        Tensor gpsi;
        Vec3 gjaw;
        deform_mesh_backward(*m, psi_v, {jaw_v[0], jaw_v[1], jaw_v[2]}, go,
                             gpsi, gjaw);
        if (Tensor* gp = t.grad_buffer(psi))
          for (size_t i = 0; i < gp->size(); ++i) (*gp)[i] += gpsi[i];
        if (Tensor* gj = t.grad_buffer(jaw)) {
          (*gj)[0] += gjaw.x;
          (*gj)[1] += gjaw.y;
          (*gj)[2] += gjaw.z;
        }
      })[0];
}

Tensor rigid_transform(const Tensor& vertices, const Mat3& R, const Vec3& t) {
  const size_t n = vertices.dim(0);
  Tensor out({n, 3});
  for (size_t i = 0; i < n; ++i) {
    const Vec3 v{vertices[i * 3], vertices[i * 3 + 1], vertices[i * 3 + 2]};
    const Vec3 w = R * v + t;
    out[i * 3] = w.x;
    out[i * 3 + 1] = w.y;
    out[i * 3 + 2] = w.z;
  }
  return out;
}

ad::ValueRef rigid_transform_op(ad::Tape& tape, ad::ValueRef vertices,
                                const Mat3& R, const Vec3& t) {
  Tensor out = rigid_transform(tape.val(vertices), R, t);
  return tape.custom(
      {vertices}, {std::move(out)},
      [vertices, R](ad::Tape& tp, const std::vector<const Tensor*>& g) {
        const Tensor& go = *g[0];
        if (Tensor* gv = tp.grad_buffer(vertices)) {
          const size_t n = go.dim(0);
          for (size_t i = 0; i < n; ++i) {
            const Vec3 gr{go[i * 3], go[i * 3 + 1], go[i * 3 + 2]};
            const Vec3 gi = R.transposed_mul(gr);
            (*gv)[i * 3] += gi.x;
            (*gv)[i * 3 + 1] += gi.y;
            (*gv)[i * 3 + 2] += gi.z;
          }
        }
      })[0];
}

// --- asset file ------------------------------------------------------------

namespace {
constexpr char kAssetMagic[4] = {'E', 'T', 'G', 'A'};

Tensor faces_to_tensor(const std::vector<uint32_t>& faces) {
  std::vector<double> d(faces.begin(), faces.end());
  return Tensor({faces.size() / 3, 3}, std::move(d));
}

std::vector<uint32_t> tensor_to_indices(const Tensor& t, const char* what) {
  std::vector<uint32_t> out(t.size());
  for (size_t i = 0; i < t.size(); ++i) {
    const double v = t[i];
    if (v < 0.0 || v != std::floor(v) || v > double(UINT32_MAX))
      throw ValidationError(std::string(what) +
                            ": non-integral index at position " +
                            std::to_string(i));
    out[i] = uint32_t(v);
  }
  return out;
}
}  // namespace

void save_head_model(const std::string& path, const HeadModelAssets& model) {
  model.validate();
  std::vector<io::Section> sections;
  sections.push_back(io::Section::of_tensor("template", model.template_verts));
  sections.push_back(io::Section::of_tensor("expr_basis", model.expr_basis));
  sections.push_back(
      io::Section::of_tensor("skin_weights", model.skin_weights));
  sections.push_back(io::Section::of_tensor(
      "jaw_pivot", Tensor({3}, {model.jaw_pivot.x, model.jaw_pivot.y,
                                model.jaw_pivot.z})));
  sections.push_back(io::Section::of_tensor("faces", faces_to_tensor(*model.faces)));
  if (!model.landmark_vertices.empty()) {
    std::vector<double> d(model.landmark_vertices.begin(),
                          model.landmark_vertices.end());
    sections.push_back(io::Section::of_tensor(
        "landmark_vertices", Tensor({model.landmark_vertices.size()}, std::move(d))));
  }
  io::write_sections(path, kAssetMagic, 1, sections);
}

HeadModelAssets load_head_model(const std::string& path) {
  auto sections = io::read_sections(path, kAssetMagic);
  HeadModelAssets m;
  m.template_verts = io::find_section(sections, "template").as_tensor();
  m.expr_basis = io::find_section(sections, "expr_basis").as_tensor();
  m.skin_weights = io::find_section(sections, "skin_weights").as_tensor();
  const Tensor& pivot = io::find_section(sections, "jaw_pivot").as_tensor();
  if (pivot.size() != 3)
    throw ValidationError(path + ": jaw_pivot must have 3 entries");
  m.jaw_pivot = {pivot[0], pivot[1], pivot[2]};
  const Tensor& faces = io::find_section(sections, "faces").as_tensor();
  if (faces.ndim() != 2 || faces.dim(1) != 3)
    throw ValidationError(path + ": faces must be Tx3");
  m.faces = std::make_shared<const std::vector<uint32_t>>(
      tensor_to_indices(faces, "faces"));
  if (const io::Section* s = io::maybe_section(sections, "landmark_vertices"))
    m.landmark_vertices = tensor_to_indices(s->as_tensor(), "landmark_vertices");
  m.validate();
  return m;
}

}  // namespace etg
