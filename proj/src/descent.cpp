#include "energy_attn/descent.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <tuple>

namespace energy_attn {

namespace {

template <class... Ts>
struct overloaded : Ts... {
  using Ts::operator()...;
};
template <class... Ts>
overloaded(Ts...) -> overloaded<Ts...>;

struct SingularStep {};

// Head maps (W1_h, W2_h) of an elastic spec, with M_h = pinv(W1_h) cached.
struct NewtonSetup {
  std::vector<Matrix> w1;
  std::vector<Matrix> w2;
  std::vector<Matrix> pinv;
};

NewtonSetup newton_setup(const EnergySpec& spec) {
  if (!spec.is_helmholtz()) throw error("Newton descent needs a Helmholtz energy");
  NewtonSetup s;
  if (const auto* e = std::get_if<Elastic>(&spec.pair)) {
    s.w1.push_back(Matrix::identity(e->w.rows()));
    s.w2.push_back(e->w);
  } else if (const auto* e = std::get_if<PerHeadElastic>(&spec.pair)) {
    s.w1 = e->w1;
    s.w2 = e->w2;
  } else {
    throw error("Newton descent supports elastic energies only");
  }
  for (const Matrix& w : s.w1) s.pinv.push_back(range_space_pinv(w));
  return s;
}

Vector newton_direction(const EnergySpec& spec, const NewtonSetup& setup,
                        const NewtonSubspace& opt, const Vector& z, const Matrix& tokens) {
  const double t = spec.temperature();
  Vector dir(z.dim());
  for (std::size_t h = 0; h < setup.w1.size(); ++h) {
    const Vector p = boltzmann_weights(spec, z, tokens, h);
    const Matrix keys = setup.w2[h] * tokens;
    const Vector mean = keys * p;
    const Vector r = setup.w1[h] * z - mean;
    const std::size_t m = r.dim();

    Matrix cov(m, m);
    for (std::size_t i = 0; i < keys.cols(); ++i) {
      const Vector d = keys.column(i) - mean;
      add_outer(cov, d, d, p[i]);
    }
    Vector local;
    if (opt.mode == NewtonMode::taylor1) {
      local = r + (1.0 / t) * (cov * r);
    } else {
      Matrix bracket = Matrix::identity(m) - (1.0 / t) * cov;
      for (std::size_t k = 0; k < m; ++k) bracket(k, k) += opt.epsilon;
      try {
        local = solve(bracket, r);
      } catch (const error&) {
        throw SingularStep{};
      }
    }
    dir += setup.pinv[h] * local;
  }
  return (1.0 / static_cast<double>(setup.w1.size())) * std::move(dir);
}

}  // namespace

std::string optimizer_name(const OptimizerKind& opt) {
  return std::visit(overloaded{[](const Vanilla&) { return std::string("vanilla"); },
                               [](const Momentum&) { return std::string("momentum"); },
                               [](const Nag& n) {
                                 return std::string(n.lookahead == Lookahead::scaled ? "nag"
                                                                                     : "nag-literal");
                               },
                               [](const NewtonSubspace& n) {
                                 return std::string(n.mode == NewtonMode::exact ? "newton-exact"
                                                                                : "newton-taylor1");
                               }},
                    opt);
}

void validate_optimizer(const OptimizerKind& opt) {
  auto check_beta = [](double beta) {
    if (!(beta >= 0.0 && beta < 1.0)) throw error("optimizer: beta must lie in [0, 1)");
  };
  std::visit(overloaded{[](const NewtonSubspace& n) {
                          if (!(n.epsilon >= 0.0)) throw error("optimizer: epsilon must be >= 0");
                        },
                        [&](const Momentum& m) { check_beta(m.beta); },
                        [&](const Nag& m) { check_beta(m.beta); },
                        [](const Vanilla&) {}},
             opt);
  const double eta = std::visit([](const auto& o) { return o.eta; }, opt);
  if (!(eta > 0.0)) throw error("optimizer: eta must be positive");
}

std::string to_string(StopReason reason) {
  switch (reason) {
    case StopReason::converged: return "converged";
    case StopReason::max_iters: return "max_iters";
    case StopReason::diverged: return "diverged";
    case StopReason::singular: return "singular";
  }
  return "unknown";
}

DescentTrace descend(const EnergySpec& spec, const OptimizerKind& opt, const Vector& z0,
                     const Matrix& tokens, const DescentOptions& options) {
  validate_optimizer(opt);
  if (!(options.tol > 0.0)) throw error("descend: tol must be positive");
  if (options.project_radius && !(*options.project_radius > 0.0)) {
    throw error("descend: projection radius must be positive");
  }

  std::optional<NewtonSetup> newton;
  if (std::holds_alternative<NewtonSubspace>(opt)) newton = newton_setup(spec);

  DescentTrace trace;
  trace.spec_summary = spec.summary();
  trace.optimizer = optimizer_name(opt);
  trace.seed = options.seed;

  auto gradient = [&](const Vector& x) { return grad_z(spec, x, tokens, options.convention); };

  Vector z = z0;
  ValueGrad eg = energy_and_grad(spec, z, tokens, options.convention);
  if (!std::isfinite(eg.value) || !is_finite(eg.grad)) {
    trace.stop = StopReason::diverged;
    return trace;
  }
  trace.steps.push_back({0, z, eg.value, norm(eg.grad)});
  Vector g = std::move(eg.grad);
  Vector p(z.dim());

  trace.stop = StopReason::max_iters;
  for (std::size_t k = 1;; ++k) {
    if (trace.last().grad_norm < options.tol) {
      trace.stop = StopReason::converged;
      break;
    }
    if (k > options.max_iters) break;

    try {
      std::visit(overloaded{[&](const Vanilla& o) { axpy(-o.eta, g, z); },
                            [&](const Momentum& o) {
                              p = o.beta * p + g;
                              axpy(-o.eta, p, z);
                            },
                            [&](const Nag& o) {
                              const double reach =
                                  o.lookahead == Lookahead::scaled ? o.eta * o.beta : o.beta;
                              const Vector lookahead = z - reach * p;
                              p = o.beta * p + gradient(lookahead);
                              axpy(-o.eta, p, z);
                            },
                            [&](const NewtonSubspace& o) {
                              axpy(-o.eta, newton_direction(spec, *newton, o, z, tokens), z);
                            }},
                 opt);
    } catch (const SingularStep&) {
      trace.stop = StopReason::singular;
      break;
    }
    if (!is_finite(z)) {
      trace.stop = StopReason::diverged;
      break;
    }
    if (options.project_radius) {
      const double n = norm(z);
      if (n > 0.0) z *= *options.project_radius / n;
    }

    eg = energy_and_grad(spec, z, tokens, options.convention);
    if (!std::isfinite(eg.value) || !is_finite(eg.grad)) {
      trace.stop = StopReason::diverged;
      break;
    }
    trace.steps.push_back({k, z, eg.value, norm(eg.grad)});
    g = std::move(eg.grad);
  }
  return trace;
}

bool is_monotone(const DescentTrace& trace, double slack) {
  for (std::size_t k = 1; k < trace.steps.size(); ++k) {
    if (trace.steps[k].energy - trace.steps[k - 1].energy > slack) return false;
  }
  return true;
}

std::optional<double> find_monotone_eta(const EnergySpec& spec, const Vector& z0,
                                        const Matrix& tokens, std::size_t steps, double start,
                                        double min_eta) {
  DescentOptions options;
  options.max_iters = steps;
  options.tol = std::numeric_limits<double>::min();
  for (double eta = start; eta >= min_eta; eta *= 0.5) {
    const DescentTrace trace = descend(spec, Vanilla{eta}, z0, tokens, options);
    if (trace.stop != StopReason::diverged && is_monotone(trace)) return eta;
  }
  return std::nullopt;
}

std::vector<ComparisonRow> compare_optimizers(const EnergySpec& spec, const Vector& z0,
                                              const Matrix& tokens,
                                              const std::vector<OptimizerKind>& opts,
                                              std::size_t budget, double tol) {
  DescentOptions options;
  options.max_iters = budget;
  options.tol = tol;
  std::vector<ComparisonRow> rows;
  rows.reserve(opts.size());
  for (const OptimizerKind& opt : opts) {
    const DescentTrace trace = descend(spec, opt, z0, tokens, options);
    ComparisonRow row;
    row.optimizer = trace.optimizer;
    row.stop = trace.stop;
    if (trace.stop == StopReason::converged) row.iters_to_tol = trace.iterations();
    row.final_energy = trace.steps.empty() ? std::numeric_limits<double>::infinity()
                                           : trace.last().energy;
    rows.push_back(std::move(row));
  }
  auto key = [](const ComparisonRow& r) {
    return std::make_tuple(r.iters_to_tol.value_or(std::numeric_limits<std::size_t>::max()),
                           r.final_energy, r.optimizer);
  };
  std::stable_sort(rows.begin(), rows.end(),
                   [&](const ComparisonRow& a, const ComparisonRow& b) { return key(a) < key(b); });
  return rows;
}

DescentInstance make_descent_instance(Rng& rng, EnergyFamily family, std::size_t dim,
                                      std::size_t tokens, std::size_t heads, double temperature) {
  if (heads == 0 || dim % heads != 0) throw dimension_error("descent instance: H must divide d");
  if (tokens == 0) throw error("descent instance: need at least one token");
  if (family == EnergyFamily::square_sum && heads != 1) {
    throw error("descent instance: square-sum energy is single-head only");
  }
  const double scale = 1.0 / std::sqrt(static_cast<double>(dim));
  DescentInstance inst;

  if (heads == 1) {
    const Matrix w = rng.normal_matrix(dim, dim, scale);
    switch (family) {
      case EnergyFamily::elastic:
        inst.spec = make_spec(Elastic{w}, Helmholtz{temperature});
        break;
      case EnergyFamily::inner:
        inst.spec = make_spec(InnerProduct{w}, Helmholtz{temperature});
        break;
      case EnergyFamily::square_sum:
        inst.spec = make_spec(InnerProduct{w}, WeightedSquareSum{temperature, {}});
        break;
    }
  } else {
    const std::size_t dh = dim / heads;
    const Matrix q = random_orthogonal(rng, dim);
    std::vector<Matrix> w1, w2;
    for (std::size_t h = 0; h < heads; ++h) {
      Matrix block(dh, dim);
      for (std::size_t r = 0; r < dh; ++r) {
        for (std::size_t c = 0; c < dim; ++c) block(r, c) = q(h * dh + r, c);
      }
      w1.push_back(std::move(block));
      w2.push_back(rng.normal_matrix(dh, dim, scale));
    }
    if (family == EnergyFamily::elastic) {
      inst.spec = make_spec(PerHeadElastic{w1, w2}, Helmholtz{temperature});
    } else {
      inst.spec = make_spec(PerHeadInner{w1, w2}, Helmholtz{temperature});
    }
  }
  inst.z0 = rng.normal_vector(dim);
  inst.tokens = rng.normal_matrix(dim, tokens);
  return inst;
}

}  // namespace energy_attn
