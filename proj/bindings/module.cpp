// Python bindings for the core operations: tensor file IO, the head model,
// gaussian binding/rigging, rendering, metrics and the gradient suite.

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "etg/camera.h"
#include "etg/common.h"
#include "etg/gradsuite.h"
#include "etg/headmodel.h"
#include "etg/io.h"
#include "etg/losses.h"
#include "etg/metrics.h"
#include "etg/render.h"
#include "etg/rig.h"
#include "etg/synthetic.h"

namespace py = pybind11;
using namespace etg;

namespace {

Tensor from_array(const py::array_t<double, py::array::c_style |
                                                py::array::forcecast>& a) {
  std::vector<size_t> dims(a.ndim());
  for (py::ssize_t i = 0; i < a.ndim(); ++i) dims[i] = size_t(a.shape(i));
  std::vector<double> data(a.data(), a.data() + a.size());
  return Tensor(std::move(dims), std::move(data));
}

py::array_t<double> to_array(const Tensor& t) {
  std::vector<py::ssize_t> shape(t.dims().begin(), t.dims().end());
  py::array_t<double> out(shape);
  std::copy(t.data(), t.data() + t.size(), out.mutable_data());
  return out;
}

Camera camera_from_array(const py::array_t<double>& a) {
  return Camera::from_tensor(from_array(a));
}

}  // namespace

PYBIND11_MODULE(_etg, m) {
  m.doc() = "triangle-rigged gaussian talking-head core";

  m.def("read_tensor",
        [](const std::string& path) { return to_array(io::read_tensor(path)); },
        py::arg("path"));
  m.def("write_tensor",
        [](const std::string& path, const py::array_t<double>& a, bool f64) {
          io::write_tensor(path, from_array(a),
                           f64 ? io::Dtype::f64 : io::Dtype::f32);
        },
        py::arg("path"), py::arg("array"), py::arg("f64") = false);

  m.def("rodrigues",
        [](const py::array_t<double>& aa) {
          const Tensor t = from_array(aa);
          if (t.size() != 3) throw ValidationError("rodrigues: need 3 values");
          const Mat3 r = rodrigues({t[0], t[1], t[2]});
          py::array_t<double> out({3, 3});
          std::copy(r.m.begin(), r.m.end(), out.mutable_data());
          return out;
        },
        py::arg("axis_angle"));

  m.def("emotion_score",
        [](const py::array_t<double>& p) { return emotion_score(from_array(p)); },
        py::arg("p_emo"));

  m.def("psnr",
        [](const py::array_t<double>& a, const py::array_t<double>& b) {
          return psnr(from_array(a), from_array(b));
        });
  m.def("ssim",
        [](const py::array_t<double>& a, const py::array_t<double>& b) {
          return ssim_metric(from_array(a), from_array(b));
        });
  m.def("lmd",
        [](const py::array_t<double>& a, const py::array_t<double>& b) {
          return lmd(from_array(a), from_array(b));
        });

  py::class_<HeadModelAssets>(m, "HeadModel")
      .def(py::init(&load_head_model), py::arg("path"))
      .def_property_readonly("vertex_count", &HeadModelAssets::vertex_count)
      .def_property_readonly("expr_dim", &HeadModelAssets::expr_dim)
      .def_property_readonly("tri_count", &HeadModelAssets::tri_count)
      .def_property_readonly("faces",
                             [](const HeadModelAssets& h) {
                               py::array_t<uint32_t> out(
                                   {py::ssize_t(h.tri_count()),
                                    py::ssize_t(3)});
                               std::copy(h.faces->begin(), h.faces->end(),
                                         out.mutable_data());
                               return out;
                             })
      .def_property_readonly("landmark_vertices",
                             [](const HeadModelAssets& h) {
                               return h.landmark_vertices;
                             })
      .def("deform",
           [](const HeadModelAssets& h, const py::array_t<double>& psi,
              const py::array_t<double>& jaw) {
             const Tensor j = from_array(jaw);
             if (j.size() != 3)
               throw ValidationError("deform: jaw needs 3 values");
             const Mesh mesh =
                 deform_mesh(h, {from_array(psi)}, {{j[0], j[1], j[2]}});
             return to_array(mesh.vertices);
           },
           py::arg("psi"), py::arg("jaw"));

  m.def("sample_cloud",
        [](const std::string& head_path, size_t total, uint64_t seed,
           const std::string& out_path) {
          const HeadModelAssets head = load_head_model(head_path);
          const Mesh rest =
              deform_mesh(head, {Tensor({head.expr_dim()})}, {Vec3{}});
          save_cloud(out_path, sample_bindings(rest, total, seed));
        },
        py::arg("head_path"), py::arg("total"), py::arg("seed"),
        py::arg("out_path"),
        "Bind a fresh gaussian cloud to the head's rest mesh");

  m.def("render_head",
        [](const std::string& head_path, const std::string& cloud_path,
           const py::array_t<double>& psi, const py::array_t<double>& jaw,
           const py::array_t<double>& camera) {
          const HeadModelAssets head = load_head_model(head_path);
          const GaussianCloud cloud = load_cloud(cloud_path);
          const Tensor j = from_array(jaw);
          if (j.size() != 3)
            throw ValidationError("render_head: jaw needs 3 values");
          const Mesh mesh =
              deform_mesh(head, {from_array(psi)}, {{j[0], j[1], j[2]}});
          const RenderOutput out =
              render(rig_to_global(cloud, mesh), camera_from_array(camera));
          py::dict d;
          d["color"] = to_array(out.color);
          d["alpha"] = to_array(out.alpha);
          d["depth"] = to_array(out.depth);
          return d;
        },
        py::arg("head_path"), py::arg("cloud_path"), py::arg("psi"),
        py::arg("jaw"), py::arg("camera"),
        "Deform, rig and splat in one call; camera is the 19-value layout");

  m.def("gradcheck", [](bool quick) { return print_gradient_suite(quick); },
        py::arg("quick") = true);

  m.def("make_synthetic_head",
        [](const std::string& out_path, size_t expr_dim, uint64_t seed) {
          save_head_model(out_path, build_synthetic_head(expr_dim, seed));
        },
        py::arg("out_path"), py::arg("expr_dim") = 10, py::arg("seed") = 1,
        "Write a procedural desk-scale head asset");

  py::register_exception<ValidationError>(m, "ValidationError",
                                          PyExc_ValueError);
  py::register_exception<NumericError>(m, "NumericError",
                                       PyExc_ArithmeticError);
}
