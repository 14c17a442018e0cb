#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "guard/attacks.hpp"
#include "guard/curvature.hpp"
#include "guard/distill.hpp"
#include "guard/errors.hpp"
#include "guard/harness.hpp"
#include "guard/models.hpp"
#include "guard/theory.hpp"
#include "guard/train.hpp"

namespace py = pybind11;
using nlohmann::json;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

guard::Tensor from_numpy(const Array& a) {
  guard::Shape shape(a.shape(), a.shape() + a.ndim());
  std::vector<double> data(a.data(), a.data() + a.size());
  return {shape, data};
}

Array to_numpy(const guard::Tensor& t) {
  std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
  Array out(shape);
  std::copy(t.data().begin(), t.data().end(), out.mutable_data());
  return out;
}

Eigen::VectorXd to_vec(const Array& a) {
  if (a.ndim() != 1) throw guard::ShapeError("expected a 1-d array");
  return Eigen::Map<const Eigen::VectorXd>(a.data(), a.shape(0));
}

Eigen::MatrixXd to_mat(const Array& a) {
  if (a.ndim() != 2) throw guard::ShapeError("expected a 2-d array");
  Eigen::MatrixXd m(a.shape(0), a.shape(1));
  for (py::ssize_t i = 0; i < a.shape(0); ++i)
    for (py::ssize_t j = 0; j < a.shape(1); ++j) m(i, j) = a.at(i, j);
  return m;
}

guard::Targets targets(const std::vector<int>& y) { return {y, std::nullopt}; }

guard::Dataset dataset(const Array& x, const std::vector<int>& y, std::size_t classes) {
  guard::Dataset d;
  d.inputs = from_numpy(x);
  d.labels = y;
  d.classes = classes;
  d.validate();
  return d;
}

py::tuple split(const guard::Dataset& d) { return py::make_tuple(to_numpy(d.inputs), d.labels); }

py::dict synthetic_dict(const guard::SyntheticSet& s) {
  py::dict out;
  out["inputs"] = to_numpy(s.inputs);
  out["labels"] = s.labels;
  out["soft"] = s.soft ? py::object(to_numpy(*s.soft)) : py::object(py::none());
  out["ipc"] = s.ipc;
  out["classes"] = s.classes;
  out["provenance"] = s.provenance.dump();
  return out;
}

}  // namespace

PYBIND11_MODULE(_guard, m) {
  m.doc() = "Curvature-regularized robust dataset distillation";

  auto base = py::register_exception<guard::Error>(m, "GuardError", PyExc_RuntimeError);
  py::register_exception<guard::ConfigError>(m, "ConfigError", base.ptr());
  py::register_exception<guard::ShapeError>(m, "ShapeError", base.ptr());
  py::register_exception<guard::ParseError>(m, "ParseError", base.ptr());
  py::register_exception<guard::NonFiniteError>(m, "NonFiniteError", base.ptr());
  py::register_exception<guard::DivergenceError>(m, "DivergenceError", base.ptr());

  py::class_<guard::Model>(m, "Model")
      .def_property_readonly("spec", [](const guard::Model& md) { return md.spec.to_json().dump(); })
      .def_property_readonly("num_params", &guard::Model::num_params)
      .def_property_readonly("param_names", [](const guard::Model& md) { return md.names; });

  m.def(
      "init_model",
      [](const std::string& spec, std::uint64_t seed) {
        guard::ModelSpec s = guard::ModelSpec::from_json(json::parse(spec));
        s.validate();
        guard::Rng r(seed);
        return guard::init(s, r);
      },
      py::arg("spec"), py::arg("seed") = 0);
  m.def("save_model", [](const std::string& path, const guard::Model& md) { guard::save_model(path, md); });
  m.def("load_model", [](const std::string& path) { return guard::load_model(path); });
  m.def("predict_logits", [](const guard::Model& md, const Array& x) { return to_numpy(guard::predict_logits(md, from_numpy(x))); });
  m.def("predict", [](const guard::Model& md, const Array& x) { return guard::predict(md, from_numpy(x)); });
  m.def("accuracy", [](const guard::Model& md, const Array& x, const std::vector<int>& y) {
    return guard::accuracy(md, dataset(x, y, md.spec.classes));
  });

  m.def(
      "load_dataset",
      [](const std::string& name, const std::string& params, std::uint64_t seed) {
        guard::Rng r(seed);
        guard::DatasetPair d = guard::harness::load_dataset(name, json::parse(params), r);
        py::dict out;
        out["train"] = split(d.train);
        out["test"] = split(d.test);
        out["classes"] = d.train.classes;
        out["hash"] = guard::harness::dataset_hash(d);
        return out;
      },
      py::arg("name"), py::arg("params") = "{}", py::arg("seed") = 0);

  m.def(
      "train",
      [](guard::Model& md, const Array& x, const std::vector<int>& y, const std::string& cfg, std::uint64_t seed) {
        guard::TrainConfig c = guard::TrainConfig::from_json(json::parse(cfg));
        return guard::train(md, dataset(x, y, md.spec.classes), c, guard::Rng(seed)).epoch_loss;
      },
      py::arg("model"), py::arg("x"), py::arg("y"), py::arg("config") = "{}", py::arg("seed") = 0);

  m.def(
      "guard_loss",
      [](const guard::Model& md, const Array& x, const std::vector<int>& y, double lambda, double h) {
        guard::ad::Tape tape(2);
        guard::ad::Var xv = tape.leaf(from_numpy(x));
        guard::RegularizerConfig rc;
        rc.lambda = lambda;
        rc.h = h;
        return guard::guard_loss(guard::model_objective(md, targets(y)), xv, rc).value().item();
      },
      py::arg("model"), py::arg("x"), py::arg("y"), py::arg("lam") = 1.0, py::arg("h") = 0.1);
  m.def(
      "guard_penalty",
      [](const guard::Model& md, const Array& x, const std::vector<int>& y, double h) {
        guard::ad::Tape tape(2);
        guard::ad::Var xv = tape.leaf(from_numpy(x));
        guard::RegularizerConfig rc;
        rc.h = h;
        return guard::guard_penalty(guard::model_objective(md, targets(y)), xv, rc).value().item();
      },
      py::arg("model"), py::arg("x"), py::arg("y"), py::arg("h") = 0.1);
  m.def("input_grad", [](const guard::Model& md, const Array& x, const std::vector<int>& y) {
    return to_numpy(guard::input_grad(guard::model_objective(md, targets(y)), from_numpy(x)));
  });
  m.def(
      "hvp_fd",
      [](const guard::Model& md, const Array& x, const std::vector<int>& y, const Array& v, double h) {
        return to_numpy(guard::hvp_fd(guard::model_objective(md, targets(y)), from_numpy(x), from_numpy(v), h));
      },
      py::arg("model"), py::arg("x"), py::arg("y"), py::arg("v"), py::arg("h") = 1e-4);
  m.def(
      "lambda1",
      [](const guard::Model& md, const Array& x, const std::vector<int>& y, std::size_t iters, double tol,
         std::uint64_t seed) {
        guard::PowerConfig pc;
        pc.iters = iters;
        pc.tol = tol;
        guard::Rng r(seed);
        std::vector<double> out;
        for (const auto& e : guard::lambda1_power(guard::model_objective(md, targets(y)), from_numpy(x), pc, r))
          out.push_back(e.value);
        return out;
      },
      py::arg("model"), py::arg("x"), py::arg("y"), py::arg("iters") = 500, py::arg("tol") = 1e-4,
      py::arg("seed") = 0);

  m.def(
      "trust_region_max",
      [](const Array& g, const Array& H, double rho, double loss) {
        guard::QuadModel q{loss, to_vec(g), to_mat(H), rho};
        guard::TrustRegionResult r = guard::trust_region_max(q);
        py::dict out;
        out["value"] = r.value;
        out["v"] = std::vector<double>(r.v.data(), r.v.data() + r.v.size());
        out["sigma"] = r.sigma;
        out["interior"] = r.interior;
        out["hard_case"] = r.hard_case;
        return out;
      },
      py::arg("g"), py::arg("H"), py::arg("rho"), py::arg("loss") = 0.0);
  m.def(
      "per_sample_bound",
      [](const Array& g, const Array& H, double rho, double loss) {
        guard::BoundCheck b = guard::per_sample_bound({loss, to_vec(g), to_mat(H), rho});
        py::dict out;
        out["exact"] = b.exact;
        out["bound"] = b.bound;
        out["lambda1"] = b.lambda1;
        out["concave_regime"] = b.concave_regime;
        out["violated"] = b.violated;
        return out;
      },
      py::arg("g"), py::arg("H"), py::arg("rho"), py::arg("loss") = 0.0);

  m.def(
      "attack",
      [](const guard::Model& md, const Array& x, const std::vector<int>& y, const std::string& spec,
         std::uint64_t seed) {
        guard::AttackSpec s = guard::AttackSpec::from_json(json::parse(spec));
        guard::AttackResult r = guard::perturb(md, from_numpy(x), y, s, guard::Rng(seed));
        py::dict out;
        out["x_adv"] = to_numpy(r.x_adv);
        out["norm"] = r.norm;
        out["success"] = std::vector<bool>(r.success.begin(), r.success.end());
        out["final_loss"] = r.final_loss;
        return out;
      },
      py::arg("model"), py::arg("x"), py::arg("y"), py::arg("spec") = "{}", py::arg("seed") = 0);
  m.def(
      "robust_accuracy",
      [](const guard::Model& md, const Array& x, const std::vector<int>& y, const std::string& spec,
         std::uint64_t seed) {
        return guard::robust_accuracy(md, dataset(x, y, md.spec.classes),
                                      guard::AttackSpec::from_json(json::parse(spec)), guard::Rng(seed));
      },
      py::arg("model"), py::arg("x"), py::arg("y"), py::arg("spec") = "{}", py::arg("seed") = 0);

  m.def(
      "distill",
      [](const Array& x, const std::vector<int>& y, std::size_t classes, const std::string& spec,
         const std::string& cfg, std::uint64_t seed) {
        guard::Dataset d = dataset(x, y, classes);
        guard::ModelSpec s = guard::ModelSpec::from_json(json::parse(spec));
        if (s.input_shape.empty()) s.input_shape = d.sample_shape();
        if (s.classes == 0) s.classes = classes;
        return synthetic_dict(
            guard::distill(d, s, guard::DistillConfig::from_json(json::parse(cfg)), guard::Rng(seed)));
      },
      py::arg("x"), py::arg("y"), py::arg("classes"), py::arg("spec"), py::arg("config") = "{}",
      py::arg("seed") = 0);
  m.def("load_synthetic", [](const std::string& path) { return synthetic_dict(guard::load_synthetic(path)); });

  m.def("default_config", [] { return guard::harness::default_config().dump(); });
  m.def("resolve_config", [](const std::string& user) { return guard::harness::resolve_config(json::parse(user)).dump(); });
  m.def("config_hash", [](const std::string& cfg) {
    return guard::harness::config_hash(guard::harness::resolve_config(json::parse(cfg)));
  });
  m.def("subcommands", &guard::harness::subcommands);
  m.def(
      "run",
      [](const std::string& sub, const std::string& cfg, const std::vector<std::string>& overrides,
         const std::string& out) {
        guard::harness::RunResult r = guard::harness::run(sub, json::parse(cfg), overrides, out);
        return py::make_tuple(r.summary.dump(), r.artifacts);
      },
      py::arg("subcommand"), py::arg("config") = "{}", py::arg("overrides") = std::vector<std::string>{},
      py::arg("out") = "");
}
