#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "ucan/backbone.hpp"
#include "ucan/container.hpp"
#include "ucan/dataset.hpp"
#include "ucan/detectors.hpp"
#include "ucan/errors.hpp"
#include "ucan/eval.hpp"
#include "ucan/pipeline.hpp"

namespace py = pybind11;
using namespace ucan;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

Tensor to_tensor(const Array& a) {
  Shape shape(a.shape(), a.shape() + a.ndim());
  return Tensor(std::move(shape), std::vector<double>(a.data(), a.data() + a.size()));
}

std::vector<char> to_mask(const std::vector<bool>& v) { return {v.begin(), v.end()}; }

py::dict cell_dict(const EvalCell& c) {
  py::dict d;
  d["detector"] = c.detector;
  d["source"] = c.source;
  d["attack"] = c.attack;
  d["epsilon"] = c.epsilon;
  d["seed"] = c.seed;
  d["status"] = c.status;
  d["benign"] = c.benign;
  d["adversarial"] = c.adversarial;
  d["success_rate"] = c.success_rate;
  d["threshold"] = c.threshold;
  d["best_f1"] = c.f1;
  return d;
}

py::list report_cells(const EvalReport& r) {
  py::list out;
  for (const auto& c : r.cells) out.append(cell_dict(c));
  return out;
}

template <class F>
void bind_stage(py::module_& m, const char* name, F stage, const char* doc) {
  m.def(
      name,
      [stage](const RunConfig& cfg, std::uint64_t seed) {
        py::gil_scoped_release release;
        stage(make_context(cfg, seed));
      },
      py::arg("config"), py::arg("seed") = 1, doc);
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Adversarial example detection on frozen classifiers with refined layer embeddings";

  auto base = py::register_exception<Error>(m, "Error");
  py::register_exception<ConfigError>(m, "ConfigError", base.ptr());
  py::register_exception<DataError>(m, "DataError", base.ptr());
  py::register_exception<ResolutionError>(m, "ResolutionError", base.ptr());
  py::register_exception<ConvergenceError>(m, "ConvergenceError", base.ptr());
  py::register_exception<ContractError>(m, "ContractError", base.ptr());
  py::register_exception<DimensionError>(m, "DimensionError", base.ptr());

  py::class_<RunConfig>(m, "RunConfig")
      .def(py::init<>())
      .def_property(
          "seeds", [](const RunConfig& c) { return c.seeds; },
          [](RunConfig& c, std::vector<std::uint64_t> s) { c.seeds = std::move(s); })
      .def_property(
          "out_dir", [](const RunConfig& c) { return c.out_dir; },
          [](RunConfig& c, std::filesystem::path p) { c.out_dir = std::move(p); })
      .def("validate", &RunConfig::validate)
      .def("dump", &dump_config)
      .def("__repr__", [](const RunConfig& c) { return "<RunConfig out_dir='" + c.out_dir.string() + "'>"; });
  m.def("load_config", &load_config, py::arg("path"));
  m.def("parse_config", &parse_config, py::arg("text"));

  bind_stage(m, "gen_data", &stage_gen_data, "Generate and split the dataset.");
  bind_stage(m, "train_backbone", &stage_train_backbone, "Train and freeze the backbone.");
  bind_stage(m, "train_aux", &stage_train_aux, "Train the auxiliary blocks.");
  bind_stage(m, "select_layers", [](const StageContext& c) { stage_select_layers(c); }, "Score and select layers.");
  bind_stage(m, "attack", &stage_attack, "Craft PGD and C&W batches.");
  bind_stage(m, "build_detectors", &stage_build_detectors, "Fit detectors and adaptive batches.");
  bind_stage(m, "bench", [](const StageContext& c) { stage_bench(c); }, "Detection latency.");
  m.def(
      "evaluate",
      [](const RunConfig& cfg, std::uint64_t seed) {
        EvalReport r;
        {
          py::gil_scoped_release release;
          r = stage_evaluate(make_context(cfg, seed));
        }
        return report_cells(r);
      },
      py::arg("config"), py::arg("seed") = 1, "Run the detector x attack grid; returns one dict per cell.");
  m.def(
      "run_pipeline",
      [](const RunConfig& cfg, std::uint64_t seed) {
        EvalReport r;
        {
          py::gil_scoped_release release;
          r = run_pipeline(make_context(cfg, seed));
        }
        return report_cells(r);
      },
      py::arg("config"), py::arg("seed") = 1, "Every stage for one seed; returns one dict per cell.");
  m.def("run_dir", [](const RunConfig& cfg, std::uint64_t seed) { return run_paths(cfg, seed).root; },
        py::arg("config"), py::arg("seed") = 1);
  m.def(
      "read_layer_selection",
      [](const std::filesystem::path& p) {
        const auto s = read_layer_selection(p);
        py::dict d;
        d["initial_tcs"] = s.initial_tcs;
        d["tcs"] = s.scores.tcs;
        d["selected"] = s.selected;
        py::list layers;
        for (const auto& l : s.scores.layers) {
          py::dict e;
          e["layer"] = l.layer;
          e["cs_plus"] = l.cs_plus;
          e["cs_minus"] = l.cs_minus;
          e["cs_avg"] = l.cs_avg;
          layers.append(e);
        }
        d["layers"] = layers;
        return d;
      },
      py::arg("path"));

  m.def(
      "gen_synthetic",
      [](std::size_t classes, std::size_t per_class, std::size_t image_size, std::size_t channels, double separation,
         double noise, double nuisance, std::uint64_t seed) {
        SyntheticImageSpec spec{classes, per_class, image_size, channels, separation, noise, nuisance, seed};
        const auto ds = gen_synthetic(spec);
        py::array_t<double> x({ds.size(), channels, image_size, image_size});
        auto* out = x.mutable_data();
        for (const auto& s : ds.samples) out = std::copy(s.data().begin(), s.data().end(), out);
        return py::make_tuple(x, py::array_t<std::size_t>(ds.labels.size(), ds.labels.data()));
      },
      py::arg("classes") = 4, py::arg("per_class") = 100, py::arg("image_size") = 16, py::arg("channels") = 3,
      py::arg("separation") = 1.0, py::arg("noise") = 0.15, py::arg("nuisance") = 0.0, py::arg("seed") = 0,
      "Synthetic image classes as (images[N,C,H,W], labels[N]).");

  py::class_<BackboneModel>(m, "Backbone")
      .def_static("load", [](const std::filesystem::path& p) { return read_backbone(Container::load(p)); })
      .def("parameter_count", &BackboneModel::parameter_count)
      .def("logits",
           [](const BackboneModel& b, const Array& x) {
             const auto t = b.logits(to_tensor(x));
             return std::vector<double>(t.data().begin(), t.data().end());
           })
      .def("predict", [](const BackboneModel& b, const Array& x) { return b.predict(to_tensor(x)); });

  m.def(
      "pr_curve",
      [](const std::vector<double>& scores, const std::vector<bool>& adversarial) {
        py::list out;
        for (const auto& p : pr_curve(scores, to_mask(adversarial)))
          out.append(py::make_tuple(p.threshold, p.precision, p.recall, p.f1));
        return out;
      },
      py::arg("scores"), py::arg("adversarial"), "(threshold, precision, recall, f1) rows, ascending thresholds.");
  m.def(
      "best_f1",
      [](const std::vector<double>& scores, const std::vector<bool>& adversarial) {
        const auto t = calibrate_threshold(scores, to_mask(adversarial));
        return py::make_tuple(t.threshold, t.f1);
      },
      py::arg("scores"), py::arg("adversarial"), "F1-maximising (threshold, f1); flag when score >= threshold.");
  m.def("aux_parameter_count",
        [](const std::vector<std::size_t>& channels, std::size_t embed_dim, std::size_t classes) {
          return aux_parameter_count(channels, embed_dim, classes);
        },
        py::arg("channels"), py::arg("embed_dim"), py::arg("classes"));
  m.def("sad_score", [](const std::vector<double>& logits) { return sad_score(logits); }, py::arg("logits"));
}
