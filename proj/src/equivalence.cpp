#include "energy_attn/equivalence.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>

namespace energy_attn {

namespace {

constexpr int kRejectionBudget = 100;
constexpr double kMaxCondition = 1e3;

double condition_number(const Matrix& w) {
  const Vector ev = sym_eigvals(w.transpose() * w);
  if (!(ev[0] > 0.0)) return std::numeric_limits<double>::infinity();
  return std::sqrt(ev[ev.dim() - 1] / ev[0]);
}

Matrix well_conditioned(Rng& rng, std::size_t n) {
  const double scale = 1.0 / std::sqrt(static_cast<double>(n));
  for (int attempt = 0; attempt < kRejectionBudget; ++attempt) {
    Matrix w = rng.normal_matrix(n, n, scale);
    if (condition_number(w) < kMaxCondition) return w;
  }
  throw error("cannot satisfy norm constraints");
}

Matrix gaussian_tokens(Rng& rng, std::size_t d, std::size_t n) { return rng.normal_matrix(d, n); }

// Embeds a d_h x d_h block at column offset h * d_h of a d_h x d matrix.
Matrix block_embed(const Matrix& block, std::size_t head, std::size_t dim) {
  const std::size_t dh = block.rows();
  Matrix out(dh, dim);
  for (std::size_t r = 0; r < dh; ++r) {
    for (std::size_t c = 0; c < dh; ++c) out(r, head * dh + c) = block(r, c);
  }
  return out;
}

void check_heads(const InstanceConfig& c) {
  if (c.heads == 0 || c.dim % c.heads != 0) throw dimension_error("instance: H must divide d");
  if (c.tokens == 0) throw error("instance: need at least one token");
  if (!(c.rho > 0.0)) throw error("instance: rho must be positive");
  if (!(c.temperature > 0.0)) throw error("instance: temperature must be positive");
}

VerificationReport summarize(std::string claim, const std::vector<double>& errors,
                             const std::vector<std::uint64_t>& seeds, double threshold) {
  VerificationReport report;
  report.claim = std::move(claim);
  report.instances = errors.size();
  report.threshold = threshold;
  for (std::size_t i = 0; i < errors.size(); ++i) {
    // A NaN error sticks and fails the report.
    if (!std::isnan(report.max_abs_error) &&
        (std::isnan(errors[i]) || errors[i] > report.max_abs_error)) {
      report.max_abs_error = errors[i];
    }
    if (!(errors[i] <= threshold) && !report.witness) report.witness = seeds[i];
  }
  report.pass = report.max_abs_error <= threshold && !report.witness;
  return report;
}

std::vector<std::uint64_t> seeds_for(const SweepConfig& config) {
  std::vector<std::uint64_t> seeds(config.instances);
  for (std::size_t i = 0; i < config.instances; ++i) seeds[i] = instance_seed(config.seed, i);
  return seeds;
}

EnergySpec with_temperature(const EnergySpec& spec, double temperature) {
  EnergySpec out = spec;
  out.global = Helmholtz{temperature};
  return out;
}

// Scales x so that max over maps of ||m x|| equals `radius`.
Vector scale_to_max_norm(const std::vector<Matrix>& maps, Vector x, double radius) {
  double largest = 0.0;
  for (const Matrix& m : maps) largest = std::max(largest, norm(m * x));
  if (largest > 0.0) x *= radius / largest;
  return x;
}

}  // namespace

std::string to_string(Tying tying) {
  switch (tying) {
    case Tying::softmax_elastic: return "thm1";
    case Tying::linear_square: return "thm2";
    case Tying::multi_head_block: return "thm3";
    case Tying::multi_head_free: return "thm3.general";
  }
  return "unknown";
}

std::uint64_t instance_seed(std::uint64_t base, std::size_t index) {
  return base * 0x100000001B3ULL + 0x9E3779B97F4A7C15ULL * (static_cast<std::uint64_t>(index) + 1);
}

TiedInstance make_tied_instance(Rng& rng, Tying tying, const InstanceConfig& c) {
  check_heads(c);
  const std::size_t d = c.dim;
  const std::size_t n = c.tokens;
  TiedInstance inst;
  inst.tying = tying;
  inst.rho = c.rho;
  inst.eta = c.eta;

  switch (tying) {
    case Tying::softmax_elastic: {
      const Matrix w = well_conditioned(rng, d);
      inst.z = sample_hypersphere(rng, d, c.rho);
      inst.tokens = Matrix(d, n);
      for (std::size_t i = 0; i < n; ++i) {
        inst.tokens.set_column(i, solve(w, sample_hypersphere(rng, d, c.rho)));
      }
      inst.spec = make_spec(Elastic{w}, Helmholtz{c.temperature});
      inst.params = tied_single_head(w, c.eta, c.temperature);
      if (c.break_tying) inst.params.heads[0].w_v *= 2.0;
      break;
    }
    case Tying::linear_square: {
      const Matrix w = rng.normal_matrix(d, d, 1.0 / std::sqrt(static_cast<double>(d)));
      inst.z = rng.normal_vector(d);
      inst.tokens = gaussian_tokens(rng, d, n);
      if (c.gated) {
        inst.gates = Vector(n);
        for (std::size_t i = 0; i < n; ++i) inst.gates[i] = rng.uniform();
      }
      inst.spec = make_spec(InnerProduct{w}, WeightedSquareSum{c.temperature, inst.gates});
      inst.params = tied_single_head(w, c.eta, c.temperature);
      if (c.break_tying) inst.params.heads[0].w_v *= 2.0;
      break;
    }
    case Tying::multi_head_block: {
      const std::size_t dh = d / c.heads;
      std::vector<Matrix> w1, w2;
      inst.z = Vector(d);
      inst.tokens = Matrix(d, n);
      for (std::size_t h = 0; h < c.heads; ++h) {
        const Matrix a = well_conditioned(rng, dh);
        const Matrix b = well_conditioned(rng, dh);
        const Vector zh = solve(a, sample_hypersphere(rng, dh, c.rho));
        for (std::size_t r = 0; r < dh; ++r) inst.z[h * dh + r] = zh[r];
        for (std::size_t i = 0; i < n; ++i) {
          const Vector hh = solve(b, sample_hypersphere(rng, dh, c.rho));
          for (std::size_t r = 0; r < dh; ++r) inst.tokens(h * dh + r, i) = hh[r];
        }
        w1.push_back(block_embed(a, h, d));
        w2.push_back(block_embed(b, h, d));
      }
      inst.spec = make_spec(PerHeadElastic{w1, w2}, Helmholtz{c.temperature});
      inst.params = tied_multi_head(w1, w2, c.eta, c.temperature);
      break;
    }
    case Tying::multi_head_free: {
      const std::size_t dh = d / c.heads;
      const double scale = 1.0 / std::sqrt(static_cast<double>(d));
      std::vector<Matrix> w1, w2;
      for (std::size_t h = 0; h < c.heads; ++h) {
        w1.push_back(rng.normal_matrix(dh, d, scale));
        w2.push_back(rng.normal_matrix(dh, d, scale));
      }
      inst.z = rng.normal_vector(d);
      inst.tokens = gaussian_tokens(rng, d, n);
      inst.spec = make_spec(PerHeadElastic{w1, w2}, Helmholtz{c.temperature});
      inst.params = tied_multi_head(w1, w2, c.eta, c.temperature);
      break;
    }
  }
  if (c.break_tying &&
      (tying == Tying::multi_head_block || tying == Tying::multi_head_free)) {
    // Only the last head is broken.
    inst.params.heads.back().w_o *= 2.0;
  }
  return inst;
}

double equivalence_error(const TiedInstance& inst) {
  switch (inst.tying) {
    case Tying::softmax_elastic: {
      const Vector lhs = softmax_attention(inst.params, inst.z, inst.tokens);
      const Vector g =
          grad_z(upper_bound_spec(inst.spec), inst.z, inst.tokens, GradConvention::temperature_scaled);
      return max_abs_diff(lhs, inst.z - inst.eta * g);
    }
    case Tying::linear_square: {
      const Vector lhs = linear_attention(inst.params, inst.z, inst.tokens, inst.gates);
      const Vector g = grad_z(inst.spec, inst.z, inst.tokens, GradConvention::strict);
      return max_abs_diff(lhs, inst.z - inst.eta * g);
    }
    case Tying::multi_head_block:
    case Tying::multi_head_free: {
      const Vector lhs = mha(inst.params, inst.z, inst.tokens);
      const Vector g =
          grad_z(upper_bound_spec(inst.spec), inst.z, inst.tokens, GradConvention::temperature_scaled);
      return max_abs_diff(lhs, inst.z - inst.eta * g);
    }
  }
  return std::numeric_limits<double>::infinity();
}

VerificationReport verify_tying(Tying tying, const SweepConfig& config) {
  const std::vector<std::uint64_t> seeds = seeds_for(config);
  const std::vector<double> errors = parallel_map(seeds.size(), [&](std::size_t i) {
    Rng rng(seeds[i]);
    return equivalence_error(make_tied_instance(rng, tying, config.instance));
  });
  std::string claim = to_string(tying);
  if (tying == Tying::linear_square && config.instance.gated) claim += ".gated";
  VerificationReport report = summarize(std::move(claim), errors, seeds, kEquivalenceThreshold);
  if (config.instance.break_tying) report.note = "negative control: tying deliberately broken";
  return report;
}

VerificationReport verify_theorem1(const SweepConfig& config) {
  return verify_tying(Tying::softmax_elastic, config);
}

VerificationReport verify_theorem2(const SweepConfig& config) {
  return verify_tying(Tying::linear_square, config);
}

std::vector<VerificationReport> verify_theorem3(const SweepConfig& config) {
  return {verify_tying(Tying::multi_head_block, config),
          verify_tying(Tying::multi_head_free, config)};
}

// ---------------------------------------------------------------------------
// Boltzmann optimality

namespace {

// Visits every point of the simplex grid with spacing 1/m.
void for_each_grid_point(std::size_t n, std::size_t m, const std::function<void(const Vector&)>& fn) {
  std::vector<std::size_t> counts(n, 0);
  Vector p(n);
  std::function<void(std::size_t, std::size_t)> rec = [&](std::size_t idx, std::size_t left) {
    if (idx + 1 == n) {
      counts[idx] = left;
      for (std::size_t k = 0; k < n; ++k) {
        p[k] = static_cast<double>(counts[k]) / static_cast<double>(m);
      }
      fn(p);
      return;
    }
    for (std::size_t c = 0; c <= left; ++c) {
      counts[idx] = c;
      rec(idx + 1, left - c);
    }
  };
  rec(0, m);
}

}  // namespace

VerificationReport verify_lemma1(const EnergySpec& spec, const Vector& z, const Matrix& tokens,
                                 double grid_res, std::size_t dirichlet_draws, std::uint64_t seed) {
  const std::size_t n = tokens.cols();
  if (grid_res > 0.0 && n > 8) throw error("use sampling mode");
  if (grid_res < 0.0 || grid_res > 1.0) throw error("lemma1: grid resolution must lie in (0, 1]");

  const double f_star = helmholtz_free_energy(spec, z, tokens);
  const Vector boltzmann = boltzmann_weights(spec, z, tokens);

  double violation = 0.0;
  std::size_t evaluated = 0;
  auto visit = [&](const Vector& p) {
    const double f = free_energy(spec, z, tokens, p);
    violation = std::max(violation, f_star - f);
    ++evaluated;
    return f;
  };

  double cell_excess = 0.0;
  if (grid_res > 0.0) {
    const auto m = static_cast<std::size_t>(std::llround(1.0 / grid_res));
    double best = std::numeric_limits<double>::infinity();
    Vector argmin;
    for_each_grid_point(n, m, [&](const Vector& p) {
      const double f = visit(p);
      if (f < best) {
        best = f;
        argmin = p;
      }
    });
    const double cell = 1.0 / static_cast<double>(m);
    cell_excess = std::max(0.0, max_abs_diff(argmin, boltzmann) - cell);
  }

  Rng rng(seed);
  for (std::size_t k = 0; k < dirichlet_draws; ++k) visit(rng.dirichlet(n));

  VerificationReport report;
  report.claim = "lemma1";
  report.instances = evaluated;
  report.max_abs_error = std::max(violation, cell_excess);
  report.threshold = kLemma1Threshold;
  report.pass = report.max_abs_error <= report.threshold;
  if (!report.pass) report.witness = seed;
  report.note = "N=" + std::to_string(n) + (grid_res > 0.0 ? " grid+sampling" : " sampling");
  return report;
}

std::vector<VerificationReport> verify_lemma1_suite(const SweepConfig& config) {
  const InstanceConfig& c = config.instance;
  const std::vector<std::uint64_t> seeds = seeds_for(config);
  auto run = [&](const char* claim, std::size_t n, double grid_res, std::size_t draws) {
    const std::vector<VerificationReport> parts = parallel_map(seeds.size(), [&](std::size_t i) {
      Rng rng(seeds[i]);
      const double scale = 1.0 / std::sqrt(static_cast<double>(c.dim));
      const EnergySpec spec =
          make_spec(Elastic{rng.normal_matrix(c.dim, c.dim, scale)}, Helmholtz{c.temperature});
      const Vector z = sample_hypersphere(rng, c.dim, c.rho);
      Matrix tokens(c.dim, n);
      for (std::size_t j = 0; j < n; ++j) tokens.set_column(j, sample_hypersphere(rng, c.dim, c.rho));
      return verify_lemma1(spec, z, tokens, grid_res, draws, seeds[i]);
    });
    std::vector<double> errors;
    for (const VerificationReport& r : parts) errors.push_back(r.max_abs_error);
    return summarize(claim, errors, seeds, kLemma1Threshold);
  };
  return {run("lemma1.grid", 3, 0.01, 0), run("lemma1.dirichlet", 8, 0.0, 10000)};
}

// ---------------------------------------------------------------------------
// Hessian structure

Lemma2Result verify_lemma2(const EnergySpec& spec, const Vector& z, const Matrix& tokens) {
  if (!spec.is_helmholtz() || (!std::holds_alternative<PerHeadElastic>(spec.pair) &&
                               !std::holds_alternative<Elastic>(spec.pair))) {
    throw error("lemma2: needs an elastic Helmholtz spec");
  }
  Lemma2Result out;
  const HessianSplit split = hessian_split(spec, z, tokens);
  const Vector nsd = sym_eigvals(split.nsd_part);
  const Vector psd = sym_eigvals(split.psd_part);
  const Matrix full = split.psd_part + split.nsd_part;
  const Vector full_ev = sym_eigvals(full);
  out.nsd_max_eig = nsd[nsd.dim() - 1];
  out.psd_min_eig = psd[0];
  out.full_min_eig = full_ev[0];
  out.full_max_eig = full_ev[full_ev.dim() - 1];

  const Vector upper = sym_eigvals(hessian_z(upper_bound_spec(spec), z, tokens));
  out.upper_max_eig = upper[upper.dim() - 1];

  const Matrix fd = fd_jacobian([&](const Vector& x) { return grad_z(spec, x, tokens); }, z);
  out.hessian_fd_error = scaled_error(fd, full);

  if (const auto zs = find_stationary_point(spec, z, tokens)) {
    out.stationary_residual =
        static_cast<double>(spec.heads) * norm(grad_z(spec, *zs, tokens, GradConvention::strict));
  }
  return out;
}

Lemma2Instance make_lemma2_instance(Rng& rng, const InstanceConfig& c) {
  check_heads(c);
  const std::size_t dh = c.dim / c.heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(c.dim));
  std::vector<Matrix> w1, w2;
  for (std::size_t h = 0; h < c.heads; ++h) {
    w1.push_back(rng.normal_matrix(dh, c.dim, scale));
    w2.push_back(rng.normal_matrix(dh, c.dim, scale));
  }
  Lemma2Instance inst;
  // Radii drawn uniformly in (0, rho] keep every mapped norm <= rho.
  inst.z = scale_to_max_norm(w1, rng.normal_vector(c.dim), c.rho * (1.0 - rng.uniform()));
  inst.tokens = Matrix(c.dim, c.tokens);
  for (std::size_t i = 0; i < c.tokens; ++i) {
    inst.tokens.set_column(
        i, scale_to_max_norm(w2, rng.normal_vector(c.dim), c.rho * (1.0 - rng.uniform())));
  }
  inst.spec = make_spec(PerHeadElastic{w1, w2}, Helmholtz{c.temperature});
  return inst;
}

std::vector<VerificationReport> verify_lemma2_suite(const SweepConfig& config,
                                                    double witness_temperature) {
  const std::vector<std::uint64_t> seeds = seeds_for(config);
  struct Row {
    Lemma2Result result;
    bool witness_indefinite = false;
  };
  const std::vector<Row> rows = parallel_map(seeds.size(), [&](std::size_t i) {
    Rng rng(seeds[i]);
    const Lemma2Instance inst = make_lemma2_instance(rng, config.instance);
    Row row;
    row.result = verify_lemma2(inst.spec, inst.z, inst.tokens);
    const Vector ev = sym_eigvals(
        hessian_z(with_temperature(inst.spec, witness_temperature), inst.z, inst.tokens));
    row.witness_indefinite = ev[0] < -kEigenThreshold && ev[ev.dim() - 1] > kEigenThreshold;
    return row;
  });

  std::vector<double> nsd, psd, upper, fd, stationary;
  std::vector<std::uint64_t> stationary_seeds;
  std::optional<std::uint64_t> witness;
  std::size_t indefinite = 0;
  std::size_t indefinite_base = 0;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const Lemma2Result& r = rows[i].result;
    nsd.push_back(std::max(0.0, r.nsd_max_eig));
    psd.push_back(std::max(0.0, -r.psd_min_eig));
    upper.push_back(std::max(0.0, r.upper_max_eig));
    fd.push_back(r.hessian_fd_error);
    if (r.stationary_residual) {
      stationary.push_back(*r.stationary_residual);
      stationary_seeds.push_back(seeds[i]);
    }
    if (r.indefinite()) ++indefinite_base;
    if (rows[i].witness_indefinite) {
      ++indefinite;
      if (!witness) witness = seeds[i];
    }
  }

  std::vector<VerificationReport> reports;
  reports.push_back(summarize("lemma2.nsd", nsd, seeds, kEigenThreshold));
  reports.push_back(summarize("lemma2.psd", psd, seeds, kEigenThreshold));
  reports.push_back(summarize("lemma2.upper_concave", upper, seeds, kEigenThreshold));

  VerificationReport st = summarize("lemma2.stationary", stationary, stationary_seeds,
                                    kEigenThreshold);
  const std::size_t skipped = seeds.size() - stationary.size();
  if (skipped > 0) {
    st.note = "construction did not converge on " + std::to_string(skipped) + " instance(s)";
  }
  if (stationary.empty()) st.pass = false;
  reports.push_back(std::move(st));

  reports.push_back(summarize("lemma2.hessian_fd", fd, seeds, kHessianFdThreshold));

  VerificationReport w;
  w.claim = "lemma2.nonconvex_witness";
  w.instances = seeds.size();
  w.max_abs_error = witness ? 0.0 : 1.0;
  w.threshold = 0.0;
  w.pass = witness.has_value();
  w.witness = witness;
  w.note = std::to_string(indefinite) + " indefinite at T=" + std::to_string(witness_temperature) +
           ", " + std::to_string(indefinite_base) + " at the configured T";
  reports.push_back(std::move(w));
  return reports;
}

// ---------------------------------------------------------------------------
// Newton vs first-order Taylor

NewtonTaylorSweep newton_taylor_sweep(std::uint64_t seed, const InstanceConfig& c,
                                      const std::vector<double>& multipliers) {
  check_heads(c);
  Rng rng(seed);
  AttentionParams params = random_params(rng, c.dim, c.heads, ScoreKind::distance);
  params.eta = c.eta;
  params = tied_newton(std::move(params));
  const Vector z = rng.normal_vector(c.dim);
  const Matrix tokens = gaussian_tokens(rng, c.dim, c.tokens);
  const Preconditioner pre = precompute(params);

  NewtonTaylorSweep sweep;
  sweep.multipliers = multipliers;
  for (const HeadParams& hp : params.heads) {
    const DistanceHead dh = distance_head(hp, z, tokens);
    for (std::size_t i = 0; i < dh.deviations.rows(); ++i) {
      double sq = 0.0;
      for (double v : dh.deviations.row(i)) sq += v * v;
      sweep.max_deviation_sq = std::max(sweep.max_deviation_sq, sq);
    }
  }
  for (double m : multipliers) {
    for (HeadParams& hp : params.heads) hp.temperature_bias = m * sweep.max_deviation_sq;
    const Vector exact = mha2nd_exact(params, pre, z, tokens) - z;
    const Vector taylor = mha2nd1st(params, pre, z, tokens) - z;
    sweep.relative_diff.push_back(max_abs_diff(exact, taylor) / norm_inf(exact));
  }
  return sweep;
}

std::vector<VerificationReport> verify_newton_taylor(const SweepConfig& config) {
  const std::vector<double> multipliers{1.0, 10.0, 100.0, 1000.0};
  const std::vector<std::uint64_t> seeds = seeds_for(config);
  const std::vector<NewtonTaylorSweep> sweeps = parallel_map(seeds.size(), [&](std::size_t i) {
    return newton_taylor_sweep(seeds[i], config.instance, multipliers);
  });
  std::vector<double> increase, at100;
  for (const NewtonTaylorSweep& s : sweeps) {
    double worst = 0.0;
    for (std::size_t k = 1; k < s.relative_diff.size(); ++k) {
      worst = std::max(worst, s.relative_diff[k] - s.relative_diff[k - 1]);
    }
    increase.push_back(worst);
    at100.push_back(s.relative_diff[2]);
  }
  return {summarize("newton_taylor.monotone", increase, seeds, 1e-12),
          summarize("newton_taylor.fidelity", at100, seeds, 1e-2)};
}

}  // namespace energy_attn
