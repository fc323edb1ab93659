#include <pybind11/eigen.h>
#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <nlohmann/json.hpp>

#include <limits>
#include <string>
#include <vector>

#include "kinetos/errors.hpp"
#include "kinetos/fourier.hpp"
#include "kinetos/kernel.hpp"
#include "kinetos/moments.hpp"
#include "kinetos/particles.hpp"
#include "kinetos/runner.hpp"

namespace py = pybind11;
using namespace kinetos;

namespace {

using Samples = py::array_t<double, py::array::c_style | py::array::forcecast>;

Samples to_numpy(const Ensemble& e) {
  Samples out({static_cast<py::ssize_t>(e.size()), py::ssize_t{3}});
  auto view = out.mutable_unchecked<2>();
  for (std::size_t i = 0; i < e.size(); ++i) {
    for (int c = 0; c < 3; ++c) view(static_cast<py::ssize_t>(i), c) = e.v[i][c];
  }
  return out;
}

Ensemble from_numpy(const Samples& a, std::uint64_t seed) {
  if (a.ndim() != 2 || a.shape(1) != 3) throw InvalidArgument("samples must have shape (n, 3)");
  auto view = a.unchecked<2>();
  Ensemble e;
  e.seed = seed;
  e.v.resize(static_cast<std::size_t>(a.shape(0)));
  for (py::ssize_t i = 0; i < a.shape(0); ++i) e.v[i] = Vec3(view(i, 0), view(i, 1), view(i, 2));
  return e;
}

py::dict eigen_dict(const EigenReport& r) {
  py::dict d;
  d["beta_bar"] = r.beta_bar;
  d["N_bar"] = r.N_bar.matrix();
  d["gap"] = r.gap;
  d["simple"] = r.simple;
  d["residual"] = r.residual;
  return d;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Kinetic simulations of Maxwell molecules under a linear velocity drift";
  m.attr("__version__") = version();

  static py::exception<Error> base(m, "KinetosError", PyExc_RuntimeError);
  static py::exception<ConfigError> config(m, "ConfigError", PyExc_ValueError);
  static py::exception<NonAdmissible> non_admissible(m, "NonAdmissible", base.ptr());
  static py::exception<NoConvergence> no_convergence(m, "NoConvergence", base.ptr());
  static py::exception<RateUnresolvable> unresolvable(m, "RateUnresolvable", base.ptr());
  py::register_exception_translator([](std::exception_ptr p) {
    try {
      if (p) std::rethrow_exception(p);
    } catch (const ConfigError& e) {
      py::set_error(config, e.what());
    } catch (const NonAdmissible& e) {
      py::set_error(non_admissible, e.what());
    } catch (const NoConvergence& e) {
      py::set_error(no_convergence, e.what());
    } catch (const RateUnresolvable& e) {
      py::set_error(unresolvable, e.what());
    } catch (const InvalidArgument& e) {
      PyErr_SetString(PyExc_ValueError, e.what());
    } catch (const Error& e) {
      py::set_error(base, e.what());
    }
  });

  py::class_<Kernel>(m, "Kernel")
      .def_static("constant", &Kernel::constant, py::arg("value"), py::arg("kappa") = 0.5)
      .def_static("power_law", &Kernel::power_law, py::arg("kappa"), py::arg("strength") = 1.0)
      .def_property_readonly("kappa", &Kernel::kappa)
      .def_property_readonly("strength", &Kernel::strength)
      .def_property_readonly("singular", &Kernel::singular)
      .def("__call__", &Kernel::operator(), py::arg("theta"))
      .def("scaled", &Kernel::scaled, py::arg("factor"));

  py::class_<CutoffKernel>(m, "CutoffKernel")
      .def(py::init([](const Kernel& k, double theta_min) { return CutoffKernel(k, theta_min); }),
           py::arg("kernel"), py::arg("theta_min"))
      .def_property_readonly("theta_min", &CutoffKernel::theta_min)
      .def_property_readonly("bbar", &CutoffKernel::bbar)
      .def_property_readonly("Lambda", &CutoffKernel::Lambda)
      .def_property_readonly("total_rate", &CutoffKernel::total_rate)
      .def("lambda_p", &CutoffKernel::lambda, py::arg("p"))
      .def("scaled", &CutoffKernel::scaled, py::arg("factor"));

  m.def(
      "angular_constants",
      [](const Kernel& k, double theta_min) {
        const auto c = angular_constants(k, theta_min);
        py::dict d;
        d["bbar"] = c.bbar;
        d["Lambda"] = c.Lambda;
        return d;
      },
      py::arg("kernel"), py::arg("theta_min") = 0.0);
  m.def(
      "total_rate", [](const Kernel& k, double theta_min) { return total_rate(k, theta_min); }, py::arg("kernel"),
      py::arg("theta_min") = 0.0);
  m.def(
      "lambda_p", [](const Kernel& k, double p, double theta_min) { return lambda_p(k, p, theta_min); },
      py::arg("kernel"), py::arg("p"), py::arg("theta_min") = 0.0);

  m.def(
      "leading_eigenpair",
      [](double alpha, const Mat3& drift) { return eigen_dict(leading_eigenpair(assemble_operator(alpha, drift))); },
      py::arg("alpha"), py::arg("drift"), "Leading eigenpair of the second-moment operator.");
  m.def(
      "integrate_moments",
      [](const Mat3& drift, double alpha, const Mat3& m0, const std::vector<double>& times) {
        std::vector<Mat3> out;
        for (const auto& s : integrate_moments(drift, alpha, SymMat3::from_matrix(m0), times)) out.push_back(s.matrix());
        return out;
      },
      py::arg("drift"), py::arg("alpha"), py::arg("m0"), py::arg("times"));
  m.def(
      "probe_radius",
      [](double alpha, const Mat3& direction, double s_max) {
        const auto r = probe_radius(alpha, direction, s_max);
        py::dict d;
        d["radius"] = r.radius;
        d["capped"] = r.capped;
        d["reason"] = r.reason;
        return d;
      },
      py::arg("alpha"), py::arg("direction"), py::arg("s_max"));

  m.def(
      "sample_json",
      [](const std::string& law, std::size_t n, std::uint64_t seed) {
        const auto spec = InitialSpec::from_json(nlohmann::json::parse(law));
        return to_numpy(init_ensemble(spec, n, seed));
      },
      py::arg("law"), py::arg("n"), py::arg("seed") = 1, "Draw n velocities from a law given as JSON.");
  m.def(
      "evolve",
      [](const Samples& v, const CutoffKernel& kernel, const Mat3& drift, double t_end, double dt, std::uint64_t seed,
         std::size_t threads) {
        Ensemble e = from_numpy(v, seed);
        {
          py::gil_scoped_release release;
          DriftSpec d(drift, dt > 0.0 ? dt : default_dt(kernel));
          Collider collider(kernel);
          RunOptions ro;
          ro.t_end = t_end;
          ro.threads = threads;
          ro.observe_every = std::numeric_limits<std::size_t>::max();
          run(e, d, collider, ro);
        }
        return to_numpy(e);
      },
      py::arg("samples"), py::arg("kernel"), py::arg("drift"), py::arg("t_end"), py::arg("dt") = 0.0,
      py::arg("seed") = 1, py::arg("threads") = 0, "Strang-split particle run; returns the final velocities.");
  m.def(
      "d2",
      [](const Samples& a, const Samples& b, std::size_t directions, std::size_t radii, double k_min, double k_max) {
        const auto grid = KGrid::fibonacci(directions, radii, k_min, k_max);
        const auto r = d2(ecf(from_numpy(a, 0), grid), ecf(from_numpy(b, 0), grid));
        py::dict d;
        d["value"] = r.value;
        d["noise_floor"] = r.noise_floor;
        d["low_k_trend"] = r.low_k_trend;
        return d;
      },
      py::arg("a"), py::arg("b"), py::arg("directions") = 64, py::arg("radii") = 48, py::arg("k_min") = 0.1,
      py::arg("k_max") = 10.0, "Fourier distance sup |φ−ψ|/|k|² between two empirical laws.");

  m.def(
      "canonical_spec", [](const std::string& spec) { return ExperimentSpec::from_json(nlohmann::json::parse(spec)).canonical(); },
      py::arg("spec"));
  m.def(
      "execute_json",
      [](const std::string& spec, const std::string& out) {
        const auto s = ExperimentSpec::from_json(nlohmann::json::parse(spec));
        ExperimentRecord rec;
        {
          py::gil_scoped_release release;
          rec = execute(s, out.empty() ? s.output_dir : out);
        }
        auto j = rec.to_json();
        j["summary"] = rec.summary;
        j["exit_code"] = rec.exit_code();
        return j.dump();
      },
      py::arg("spec"), py::arg("out") = "");
}
