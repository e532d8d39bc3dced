// Python bindings: metrics, synthetic data, clusterers, attack generators and
// the config-driven run entry point. Images cross the boundary as float64
// arrays shaped (n, c, h, w).

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "clusterbreak/attack.hpp"
#include "clusterbreak/clustering.hpp"
#include "clusterbreak/data.hpp"
#include "clusterbreak/error.hpp"
#include "clusterbreak/metrics.hpp"
#include "clusterbreak/run.hpp"

namespace py = pybind11;
namespace cb = clusterbreak;
namespace cl = clusterbreak::clustering;
namespace at = clusterbreak::attack;

using Images = py::array_t<double, py::array::c_style | py::array::forcecast>;
using Labels = py::array_t<int, py::array::c_style | py::array::forcecast>;

namespace {

cb::Tensor to_tensor(const Images& a) {
  if (a.ndim() != 4) throw cb::Error(cb::ErrorCode::invalid_shape, "images must be shaped (n, c, h, w)");
  cb::Shape shape;
  for (py::ssize_t i = 0; i < 4; ++i) shape.push_back(static_cast<int>(a.shape(i)));
  return cb::Tensor(shape, std::vector<double>(a.data(), a.data() + a.size()));
}

Images to_array(const cb::Tensor& t) {
  std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
  Images out(shape);
  std::copy(t.data(), t.data() + t.size(), out.mutable_data());
  return out;
}

Images to_array(const cb::Matrix& m) {
  Images out({m.rows(), m.cols()});
  std::copy(m.data(), m.data() + m.size(), out.mutable_data());
  return out;
}

std::span<const int> span_of(const Labels& a) { return {a.data(), static_cast<std::size_t>(a.size())}; }

Labels to_labels(const std::vector<int>& v) {
  Labels out(static_cast<py::ssize_t>(v.size()));
  std::copy(v.begin(), v.end(), out.mutable_data());
  return out;
}

// Wraps any ClusterModel so Python sees a single class.
struct PyModel {
  std::shared_ptr<cl::ClusterModel> model;
};

struct PyGenerator {
  at::TrainedGenerator generator;
};

}  // namespace

PYBIND11_MODULE(_clusterbreak, m) {
  m.doc() = "clusterbreak native core";

  // Raised for every library error; `code` holds the stable error name.
  static PyObject* error_type = PyErr_NewException("clusterbreak._clusterbreak.ClusterbreakError", PyExc_RuntimeError, nullptr);
  m.add_object("ClusterbreakError", py::handle(error_type));
  py::register_exception_translator([](std::exception_ptr p) {
    try {
      if (p) std::rethrow_exception(p);
    } catch (const cb::Error& e) {
      py::object exc = py::reinterpret_borrow<py::object>(error_type)(py::str(e.what()));
      exc.attr("code") = py::str(std::string(cb::to_string(e.code())));
      PyErr_SetObject(error_type, exc.ptr());
    }
  });

  m.def("nmi", [](const Labels& p, const Labels& t) { return cb::metrics::nmi(span_of(p), span_of(t)); });
  m.def("ari", [](const Labels& p, const Labels& t) { return cb::metrics::ari(span_of(p), span_of(t)); });
  m.def("acc", [](const Labels& p, const Labels& t) { return cb::metrics::acc(span_of(p), span_of(t)).acc; });
  m.def("_metrics_report", [](const Labels& p, const Labels& t) {
    return cb::metrics::to_json(cb::metrics::report(span_of(p), span_of(t))).dump();
  });

  m.def(
      "make_synthetic",
      [](int n_per_class, int k_true, double class_separation, int height, int width, std::uint64_t seed) {
        cb::data::SyntheticSpec s;
        s.n_per_class = n_per_class;
        s.k_true = k_true;
        s.class_separation = class_separation;
        s.height = height;
        s.width = width;
        s.seed = seed;
        const auto ds = cb::data::make_synthetic_image_dataset(s);
        return py::make_tuple(to_array(ds.images().pixels()), to_labels(ds.labels()));
      },
      py::arg("n_per_class") = 100, py::arg("k_true") = 4, py::arg("class_separation") = 5.0, py::arg("height") = 12,
      py::arg("width") = 12, py::arg("seed") = 0);

  py::class_<PyModel>(m, "ClusterModel")
      .def_static(
          "train_toy",
          [](const Images& images, int k, std::uint64_t seed, int pretrain_epochs, int refine_epochs) {
            cl::TrainerSettings t;
            t.seed = seed;
            t.pretrain_epochs = pretrain_epochs;
            t.refine_epochs = refine_epochs;
            const cb::data::ImageSet set(to_tensor(images));
            py::gil_scoped_release release;
            return PyModel{cl::train_toy_clusterer(set, k, t)};
          },
          py::arg("images"), py::arg("k"), py::arg("seed") = 0, py::arg("pretrain_epochs") = 25,
          py::arg("refine_epochs") = 10)
      .def_static(
          "kmeans",
          [](const Images& images, int k, std::uint64_t seed) {
            return PyModel{cl::kmeans_baseline(cb::data::ImageSet(to_tensor(images)), k, seed)};
          },
          py::arg("images"), py::arg("k"), py::arg("seed") = 0)
      .def_static("load", [](const std::filesystem::path& p) { return PyModel{cl::load_cluster_model(p)}; })
      .def("save", [](const PyModel& s, const std::filesystem::path& p) { s.model->save(p); })
      .def("memberships",
           [](const PyModel& s, const Images& images) {
             return to_array(s.model->query({to_tensor(images), {}}).probs());
           })
      .def("predict",
           [](const PyModel& s, const Images& images) {
             return to_labels(cl::predict(*s.model, cb::data::ImageSet(to_tensor(images))));
           })
      .def_property_readonly("k", [](const PyModel& s) { return s.model->k(); })
      .def_property_readonly("kind", [](const PyModel& s) { return s.model->kind(); })
      .def_property_readonly("query_count", [](const PyModel& s) { return s.model->query_count(); });

  py::class_<PyGenerator>(m, "Generator")
      .def_static(
          "_train",
          [](const PyModel& victim, const Images& images, double epsilon, int max_batches, std::uint64_t seed) {
            at::AttackConfig c;
            c.epsilon = epsilon;
            c.max_batches = max_batches;
            c.seed = seed;
            const cb::data::ImageSet set(to_tensor(images));
            py::gil_scoped_release release;
            auto r = at::train_attack(*victim.model, set, c);
            py::gil_scoped_acquire acquire;
            return py::make_tuple(PyGenerator{std::move(r.generator)}, at::to_json(r.ledger).dump(), r.converged);
          })
      .def_static("load", [](const std::filesystem::path& p) { return PyGenerator{at::TrainedGenerator::load(p)}; })
      .def("save", [](const PyGenerator& g, const std::filesystem::path& p) { g.generator.save(p); })
      .def("perturb",
           [](const PyGenerator& g, const Images& images) {
             return to_array(at::generate_adversarial_set(g.generator, cb::data::ImageSet(to_tensor(images))).pixels());
           })
      .def_property_readonly("epsilon", [](const PyGenerator& g) { return g.generator.config().epsilon; });

  m.def("_run", [](const std::map<std::string, std::string>& overrides) {
    const auto config = cb::run::make_config({}, overrides);
    py::gil_scoped_release release;
    return cb::run::run(config).dump();
  });
}
