// Python bindings. Arrays are float64 numpy arrays; token sets are N x d
// (one token per row) on the Python side and d x N inside the core.

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <sstream>

#include "energy_attn/attention.hpp"
#include "energy_attn/cli.hpp"
#include "energy_attn/descent.hpp"
#include "energy_attn/energy.hpp"
#include "energy_attn/equivalence.hpp"
#include "energy_attn/loopsim.hpp"

namespace py = pybind11;
using namespace energy_attn;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

Vector to_vector(const Array& a) {
  if (a.ndim() != 1) throw dimension_error("expected a 1-d array");
  return Vector(std::vector<double>(a.data(), a.data() + a.size()));
}

Matrix to_matrix(const Array& a) {
  if (a.ndim() != 2) throw dimension_error("expected a 2-d array");
  return Matrix(a.shape(0), a.shape(1), std::vector<double>(a.data(), a.data() + a.size()));
}

Matrix to_tokens(const Array& a) { return tokens_from_rows(to_matrix(a)); }

Array from_vector(const Vector& v) {
  Array out(std::vector<py::ssize_t>{static_cast<py::ssize_t>(v.dim())});
  std::copy(v.begin(), v.end(), out.mutable_data());
  return out;
}

Array from_matrix(const Matrix& m) {
  Array out(std::vector<py::ssize_t>{static_cast<py::ssize_t>(m.rows()), static_cast<py::ssize_t>(m.cols())});
  std::copy(m.data().begin(), m.data().end(), out.mutable_data());
  return out;
}

std::vector<Matrix> to_matrices(const std::vector<Array>& as) {
  std::vector<Matrix> out;
  for (const Array& a : as) out.push_back(to_matrix(a));
  return out;
}

GlobalEnergyKind global_kind(const std::string& global, double temperature, const std::optional<Array>& gates) {
  if (global == "helmholtz") return Helmholtz{temperature};
  if (global == "square-sum") return WeightedSquareSum{temperature, gates ? to_vector(*gates) : Vector{}};
  throw error("unknown global energy '" + global + "'");
}

EnergySpec single_spec(const std::string& pair, const Array& w, const std::string& global, double temperature,
                       const std::optional<Array>& gates) {
  PairEnergyKind kind;
  if (pair == "elastic") {
    kind = Elastic{to_matrix(w)};
  } else if (pair == "inner") {
    kind = InnerProduct{to_matrix(w)};
  } else {
    throw error("unknown pair energy '" + pair + "'");
  }
  return make_spec(std::move(kind), global_kind(global, temperature, gates));
}

EnergySpec head_spec(const std::string& pair, const std::vector<Array>& w1, const std::vector<Array>& w2,
                     double temperature) {
  if (pair == "elastic") return make_spec(PerHeadElastic{to_matrices(w1), to_matrices(w2)}, Helmholtz{temperature});
  if (pair == "inner") return make_spec(PerHeadInner{to_matrices(w1), to_matrices(w2)}, Helmholtz{temperature});
  throw error("unknown pair energy '" + pair + "'");
}

AttentionParams make_params(const std::vector<Array>& w_q, const std::vector<Array>& w_k,
                            const std::vector<Array>& w_v, const std::vector<Array>& w_o,
                            std::optional<double> temperature, std::optional<double> temperature_bias,
                            double tau, double eta, double beta) {
  if (w_q.size() != w_k.size() || w_q.size() != w_v.size() || (!w_o.empty() && w_o.size() != w_q.size())) {
    throw dimension_error("one W_Q, W_K, W_V (and W_O) per head");
  }
  AttentionParams p;
  p.eta = eta;
  p.beta = beta;
  for (std::size_t h = 0; h < w_q.size(); ++h) {
    HeadParams hp;
    hp.w_q = to_matrix(w_q[h]);
    hp.w_k = to_matrix(w_k[h]);
    hp.w_v = to_matrix(w_v[h]);
    if (!w_o.empty()) hp.w_o = to_matrix(w_o[h]);
    hp.temperature = temperature.value_or(dot_score_temperature(hp.w_q.rows()));
    hp.temperature_bias = temperature_bias.value_or(hp.temperature);
    hp.tau = tau;
    p.heads.push_back(std::move(hp));
  }
  return p;
}

OptimizerKind make_optimizer(const std::string& name, double eta, double beta) {
  if (name == "vanilla") return Vanilla{eta};
  if (name == "momentum") return Momentum{eta, beta};
  if (name == "nag") return Nag{eta, beta};
  if (name == "nag-literal") return Nag{eta, beta, Lookahead::literal};
  if (name == "newton-exact") return NewtonSubspace{eta, NewtonMode::exact};
  if (name == "newton-taylor1") return NewtonSubspace{eta, NewtonMode::taylor1};
  throw error("unknown optimizer '" + name + "'");
}

py::dict report_dict(const VerificationReport& r) {
  py::dict d;
  d["claim"] = r.claim;
  d["instances"] = r.instances;
  d["max_abs_error"] = r.max_abs_error;
  d["threshold"] = r.threshold;
  d["pass"] = r.pass;
  return d;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Energy-based attention: energies, attention variants, descent and verification.";

  py::register_exception<dimension_error>(m, "DimensionError", PyExc_ValueError);
  py::register_exception<error>(m, "Error", PyExc_ValueError);

  m.def("logsumexp", [](const Array& x) { return logsumexp(to_vector(x)); }, py::arg("x"));
  m.def("softmax", [](const Array& x) { return from_vector(softmax(to_vector(x))); }, py::arg("x"));

  py::class_<EnergySpec>(m, "EnergySpec")
      .def_property_readonly("dim", &EnergySpec::dim)
      .def_property_readonly("heads", [](const EnergySpec& s) { return s.heads; })
      .def_property_readonly("temperature", &EnergySpec::temperature)
      .def("__repr__", [](const EnergySpec& s) { return "<EnergySpec " + s.summary() + ">"; });

  m.def("energy_spec", &single_spec, py::arg("pair"), py::arg("w"), py::arg("global_energy") = "helmholtz",
        py::arg("temperature") = 1.0, py::arg("gates") = py::none(),
        "Single-head spec: pair in {elastic, inner}, global in {helmholtz, square-sum}.");
  m.def("head_energy_spec", &head_spec, py::arg("pair"), py::arg("w1"), py::arg("w2"),
        py::arg("temperature") = 1.0, "Per-head Helmholtz spec with one (W1, W2) pair per head.");

  m.def("pair_energies", [](const EnergySpec& s, const Array& z, const Array& tokens, std::size_t head) {
    return from_vector(pair_energies(s, to_vector(z), to_tokens(tokens), head));
  }, py::arg("spec"), py::arg("z"), py::arg("tokens"), py::arg("head") = 0);
  m.def("boltzmann_weights", [](const EnergySpec& s, const Array& z, const Array& tokens, std::size_t head) {
    return from_vector(boltzmann_weights(s, to_vector(z), to_tokens(tokens), head));
  }, py::arg("spec"), py::arg("z"), py::arg("tokens"), py::arg("head") = 0);
  m.def("free_energy", [](const EnergySpec& s, const Array& z, const Array& tokens, const Array& p) {
    return free_energy(s, to_vector(z), to_tokens(tokens), to_vector(p));
  }, py::arg("spec"), py::arg("z"), py::arg("tokens"), py::arg("p"));
  m.def("global_energy", [](const EnergySpec& s, const Array& z, const Array& tokens) {
    return global_energy(s, to_vector(z), to_tokens(tokens));
  }, py::arg("spec"), py::arg("z"), py::arg("tokens"));
  m.def("grad_z", [](const EnergySpec& s, const Array& z, const Array& tokens, bool temperature_scaled) {
    return from_vector(grad_z(s, to_vector(z), to_tokens(tokens),
                              temperature_scaled ? GradConvention::temperature_scaled : GradConvention::strict));
  }, py::arg("spec"), py::arg("z"), py::arg("tokens"), py::arg("temperature_scaled") = false);
  m.def("grad_w", [](const EnergySpec& s, const Array& z, const Array& tokens) {
    return from_matrix(grad_w(s, to_vector(z), to_tokens(tokens)));
  }, py::arg("spec"), py::arg("z"), py::arg("tokens"));
  m.def("hessian_split", [](const EnergySpec& s, const Array& z, const Array& tokens) {
    const HessianSplit h = hessian_split(s, to_vector(z), to_tokens(tokens));
    return py::make_tuple(from_matrix(h.psd_part), from_matrix(h.nsd_part));
  }, py::arg("spec"), py::arg("z"), py::arg("tokens"), "Returns (psd, nsd) with psd + nsd the Hessian in z.");

  py::class_<AttentionParams>(m, "AttentionParams")
      .def_property_readonly("dim", &AttentionParams::dim)
      .def_property_readonly("heads", &AttentionParams::num_heads)
      .def_readwrite("eta", &AttentionParams::eta)
      .def_readwrite("beta", &AttentionParams::beta);

  m.def("attention_params", &make_params, py::arg("w_q"), py::arg("w_k"), py::arg("w_v"),
        py::arg("w_o") = std::vector<Array>{}, py::arg("temperature") = py::none(),
        py::arg("temperature_bias") = py::none(), py::arg("tau") = 0.01, py::arg("eta") = 1.0,
        py::arg("beta") = 0.9, "Lists of per-head maps; temperature defaults to sqrt(d_h).");
  m.def("tied_single_head", [](const Array& w, double eta, double t) {
    return tied_single_head(to_matrix(w), eta, t);
  }, py::arg("w"), py::arg("eta"), py::arg("temperature"));
  m.def("tied_newton", &tied_newton, py::arg("params"));

  auto forward = [&m](const char* name, Vector (*fn)(const AttentionParams&, const Vector&, const Matrix&)) {
    m.def(name, [fn](const AttentionParams& p, const Array& z, const Array& tokens) {
      return from_vector(fn(p, to_vector(z), to_tokens(tokens)));
    }, py::arg("params"), py::arg("z"), py::arg("tokens"));
  };
  forward("softmax_attention", &softmax_attention);
  forward("mha", &mha);
  forward("mha2nd1st", static_cast<Vector (*)(const AttentionParams&, const Vector&, const Matrix&)>(&mha2nd1st));
  forward("mha2nd1st_noV", &mha2nd1st_noV);
  forward("light_mha2nd1st", &light_mha2nd1st);

  m.def("linear_attention", [](const AttentionParams& p, const Array& z, const Array& tokens,
                               const std::optional<Array>& gates) {
    return from_vector(linear_attention(p, to_vector(z), to_tokens(tokens), gates ? to_vector(*gates) : Vector{}));
  }, py::arg("params"), py::arg("z"), py::arg("tokens"), py::arg("gates") = py::none());
  m.def("mha2nd_exact", [](const AttentionParams& p, const Array& z, const Array& tokens, double eps) {
    return from_vector(mha2nd_exact(p, to_vector(z), to_tokens(tokens), NewtonOptions{eps}));
  }, py::arg("params"), py::arg("z"), py::arg("tokens"), py::arg("epsilon") = 0.0);
  m.def("momen_mha", [](const AttentionParams& p, const Array& z, const Array& tokens, const Array& mom) {
    const MomentumStep s = momen_mha(p, to_vector(z), to_tokens(tokens), {to_vector(mom)});
    return py::make_tuple(from_vector(s.z), from_vector(s.state.p));
  }, py::arg("params"), py::arg("z"), py::arg("tokens"), py::arg("momentum"), "Returns (z, momentum).");
  m.def("nag_mha", [](const AttentionParams& p, const Array& z, const Array& tokens, const Array& mom) {
    const MomentumStep s = nag_mha(p, to_vector(z), to_tokens(tokens), {to_vector(mom)});
    return py::make_tuple(from_vector(s.z), from_vector(s.state.p));
  }, py::arg("params"), py::arg("z"), py::arg("tokens"), py::arg("momentum"), "Returns (z, momentum).");

  m.def("descend", [](const EnergySpec& s, const std::string& optimizer, const Array& z0, const Array& tokens,
                      double eta, double beta, std::size_t steps, double tol) {
    DescentOptions o;
    o.max_iters = steps;
    o.tol = tol;
    const DescentTrace t = descend(s, make_optimizer(optimizer, eta, beta), to_vector(z0), to_tokens(tokens), o);
    std::vector<double> energies, norms;
    for (const DescentStep& st : t.steps) {
      energies.push_back(st.energy);
      norms.push_back(st.grad_norm);
    }
    py::dict d;
    d["z"] = from_vector(t.last().z);
    d["energy"] = energies;
    d["grad_norm"] = norms;
    d["stop_reason"] = to_string(t.stop);
    d["iterations"] = t.iterations();
    return d;
  }, py::arg("spec"), py::arg("optimizer"), py::arg("z0"), py::arg("tokens"), py::arg("eta") = 0.01,
     py::arg("beta") = 0.9, py::arg("steps") = 1000, py::arg("tol") = 1e-8);

  m.def("cross_entropy", [](const Array& logits, const Array& y) {
    return cross_entropy(to_vector(logits), to_vector(y));
  }, py::arg("logits"), py::arg("y"));

  m.def("verify", [](const std::string& claim, std::uint64_t seed, std::size_t instances) {
    SweepConfig c;
    c.seed = seed;
    c.instances = instances;
    std::vector<VerificationReport> reports;
    if (claim == "thm1") {
      reports.push_back(verify_theorem1(c));
    } else if (claim == "thm2") {
      reports.push_back(verify_theorem2(c));
      c.instance.gated = true;
      reports.push_back(verify_theorem2(c));
    } else if (claim == "thm3") {
      reports = verify_theorem3(c);
    } else if (claim == "lemma1") {
      reports = verify_lemma1_suite(c);
    } else if (claim == "lemma2") {
      reports = verify_lemma2_suite(c, 0.1);
    } else if (claim == "newton") {
      reports = verify_newton_taylor(c);
    } else {
      throw error("unknown claim '" + claim + "'");
    }
    py::list out;
    for (const VerificationReport& r : reports) out.append(report_dict(r));
    return out;
  }, py::arg("claim"), py::arg("seed") = 0, py::arg("instances") = 100,
     "claim in {thm1, thm2, thm3, lemma1, lemma2, newton}; returns one dict per sub-claim.");

  m.def("run_cli", [](const std::vector<std::string>& args) {
    std::ostringstream out, err;
    const int code = run_cli(args, out, err);
    return py::make_tuple(code, out.str(), err.str());
  }, py::arg("args"), "Runs the energy-attn command line; returns (exit_code, stdout, stderr).");
}
