#include "energy_attn/energy.hpp"

#include <cmath>
#include <sstream>

namespace energy_attn {

namespace {

template <class... Ts>
struct overloaded : Ts... {
  using Ts::operator()...;
};
template <class... Ts>
overloaded(Ts...) -> overloaded<Ts...>;

bool is_inner_kind(const PairEnergyKind& pair) {
  return std::holds_alternative<InnerProduct>(pair) || std::holds_alternative<PerHeadInner>(pair) ||
         std::holds_alternative<KernelInner>(pair);
}

std::size_t pair_heads(const PairEnergyKind& pair) {
  return std::visit(overloaded{[](const PerHeadElastic& p) { return p.w1.size(); },
                               [](const PerHeadInner& p) { return p.w1.size(); },
                               [](const auto&) { return std::size_t{1}; }},
                    pair);
}

void validate_per_head(const std::vector<Matrix>& w1, const std::vector<Matrix>& w2,
                       std::size_t heads) {
  if (w1.empty()) throw error("per-head energy needs at least one head");
  if (w1.size() != w2.size()) throw error("per-head energy: W1 and W2 head counts differ");
  if (w1.size() != heads) throw error("per-head energy: heads != number of weight pairs");
  const std::size_t d = w1.front().cols();
  const std::size_t dh = w1.front().rows();
  if (dh * heads != d) throw dimension_error("per-head energy: H * d_h must equal d");
  for (std::size_t h = 0; h < heads; ++h) {
    for (const Matrix* m : {&w1[h], &w2[h]}) {
      if (m->rows() != dh || m->cols() != d) {
        throw dimension_error("per-head energy: every W1_h, W2_h must be d_h x d");
      }
    }
  }
}

double phi(FeatureMap map, double x) { return map == FeatureMap::exponential ? std::exp(x) : x; }
double phi_prime(FeatureMap map, double x) {
  return map == FeatureMap::exponential ? std::exp(x) : 1.0;
}

// Per-head evaluation. Every supported pair energy has gradient
// grad_z E_i = L^T u_i for a head-level input map L (identity when null), and
// elastic kinds have constant curvature L^T L. Row i of `reduced` is u_i.
struct HeadEval {
  const Matrix* map = nullptr;
  Vector energies;
  Matrix reduced;
  bool elastic_curvature = false;
};

Vector lift(const Matrix* map, const Vector& u) { return map ? transpose_times(*map, u) : u; }

void check_tokens(const EnergySpec& spec, const Vector& z, const Matrix& tokens) {
  const std::size_t d = spec.dim();
  if (z.dim() != d) throw dimension_error("query dimension does not match energy spec");
  if (tokens.rows() != d) throw dimension_error("token dimension does not match energy spec");
  if (tokens.cols() == 0) throw error("empty token set");
}

// Row i is (w h_i)^T.
Matrix mapped_rows(const Matrix& w, const Matrix& tokens) {
  return tokens.transpose() * w.transpose();
}

// Rows become u_i = q - k_i (elastic) or -k_i (inner); energies filled alongside.
void elastic_rows(const Vector& q, Matrix& rows, Vector& energies) {
  for (std::size_t i = 0; i < rows.rows(); ++i) {
    auto r = rows.row(i);
    double e = 0.0;
    for (std::size_t k = 0; k < r.size(); ++k) {
      r[k] = q[k] - r[k];
      e += r[k] * r[k];
    }
    energies[i] = 0.5 * e;
  }
}

void inner_rows(const Vector& q, Matrix& rows, Vector& energies) {
  for (std::size_t i = 0; i < rows.rows(); ++i) {
    auto r = rows.row(i);
    double e = 0.0;
    for (std::size_t k = 0; k < r.size(); ++k) {
      e -= q[k] * r[k];
      r[k] = -r[k];
    }
    energies[i] = e;
  }
}

HeadEval evaluate_head(const EnergySpec& spec, const Vector& z, const Matrix& tokens,
                       std::size_t head) {
  check_tokens(spec, z, tokens);
  if (head >= spec.heads) throw error("head index out of range");
  const std::size_t n = tokens.cols();
  HeadEval out;
  out.energies = Vector(n);

  std::visit(
      overloaded{
          [&](const Elastic& e) {
            out.elastic_curvature = true;
            out.reduced = mapped_rows(e.w, tokens);
            elastic_rows(z, out.reduced, out.energies);
          },
          [&](const InnerProduct& e) {
            out.reduced = mapped_rows(e.w, tokens);
            inner_rows(z, out.reduced, out.energies);
          },
          [&](const KernelInner& e) {
            out.map = &e.w_q;
            const Vector a = e.w_q * z;
            Vector phi_a(a.dim()), dphi_a(a.dim());
            for (std::size_t k = 0; k < a.dim(); ++k) {
              phi_a[k] = phi(e.phi, a[k]);
              dphi_a[k] = phi_prime(e.phi, a[k]);
            }
            out.reduced = mapped_rows(e.w_k, tokens);
            for (std::size_t i = 0; i < n; ++i) {
              auto r = out.reduced.row(i);
              double en = 0.0;
              for (std::size_t k = 0; k < r.size(); ++k) {
                const double b = phi(e.phi, r[k]);
                en -= phi_a[k] * b;
                r[k] = -dphi_a[k] * b;
              }
              out.energies[i] = en;
            }
          },
          [&](const PerHeadElastic& e) {
            out.map = &e.w1[head];
            out.elastic_curvature = true;
            out.reduced = mapped_rows(e.w2[head], tokens);
            elastic_rows(e.w1[head] * z, out.reduced, out.energies);
          },
          [&](const PerHeadInner& e) {
            out.map = &e.w1[head];
            out.reduced = mapped_rows(e.w2[head], tokens);
            inner_rows(e.w1[head] * z, out.reduced, out.energies);
          }},
      spec.pair);
  return out;
}

const Helmholtz& require_helmholtz(const EnergySpec& spec, const char* op) {
  if (const auto* h = std::get_if<Helmholtz>(&spec.global)) return *h;
  throw error(std::string(op) + ": requires a Helmholtz global energy");
}

Vector head_weights(const HeadEval& eval, double temperature) {
  return softmax(-(1.0 / temperature) * eval.energies);
}

Matrix lift_matrix(const Matrix* map, const Matrix& inner) {
  return map ? map->transpose() * inner * *map : inner;
}

// Hessian of one head's free energy, split into curvature and variance parts.
HessianSplit head_split(const EnergySpec& spec, const Vector& z, const Matrix& tokens,
                        std::size_t head) {
  const double t = require_helmholtz(spec, "hessian_z").temperature;
  if (std::holds_alternative<KernelInner>(spec.pair)) {
    throw error("hessian_z: unsupported pair energy (kernel feature map)");
  }
  const HeadEval eval = evaluate_head(spec, z, tokens, head);
  const Vector p = head_weights(eval, t);
  const Vector mean = transpose_times(eval.reduced, p);
  const std::size_t m = mean.dim();

  Matrix cov(m, m);
  Vector c(m);
  for (std::size_t i = 0; i < eval.reduced.rows(); ++i) {
    auto u = eval.reduced.row(i);
    for (std::size_t k = 0; k < m; ++k) c[k] = u[k] - mean[k];
    add_outer(cov, c, c, p[i]);
  }
  const std::size_t d = z.dim();
  HessianSplit split{Matrix(d, d), lift_matrix(eval.map, (-1.0 / t) * cov)};
  if (eval.elastic_curvature) split.psd_part = lift_matrix(eval.map, Matrix::identity(m));
  return split;
}

// Free energy and strict gradient of one head.
std::pair<double, Vector> head_value_grad(const EnergySpec& spec, const Vector& z,
                                          const Matrix& tokens, std::size_t head, double t) {
  const HeadEval eval = evaluate_head(spec, z, tokens, head);
  const Vector logits = -(1.0 / t) * eval.energies;
  const double lse = logsumexp(logits);
  Vector p(logits.dim());
  for (std::size_t i = 0; i < p.dim(); ++i) p[i] = std::exp(logits[i] - lse);
  return {-t * lse, lift(eval.map, transpose_times(eval.reduced, p))};
}

}  // namespace

// ---------------------------------------------------------------------------
// EnergySpec

void EnergySpec::validate() const {
  std::visit(overloaded{[&](const Elastic& e) {
                          if (!e.w.is_square()) throw dimension_error("Elastic: W must be d x d");
                        },
                        [&](const InnerProduct& e) {
                          if (!e.w.is_square()) {
                            throw dimension_error("InnerProduct: W must be d x d");
                          }
                        },
                        [&](const KernelInner& e) {
                          if (e.w_q.rows() != e.w_k.rows() || e.w_q.cols() != e.w_k.cols()) {
                            throw dimension_error("KernelInner: W_Q and W_K shapes differ");
                          }
                        },
                        [&](const PerHeadElastic& e) { validate_per_head(e.w1, e.w2, heads); },
                        [&](const PerHeadInner& e) { validate_per_head(e.w1, e.w2, heads); }},
             pair);
  if (heads != pair_heads(pair)) throw error("EnergySpec: heads does not match pair energy");
  if (!(temperature() > 0.0)) throw error("EnergySpec: temperature must be positive");
  if (const auto* s = std::get_if<WeightedSquareSum>(&global)) {
    for (double g : s->gates) {
      if (g < 0.0) throw error("EnergySpec: gates must be non-negative");
    }
  }
}

std::size_t EnergySpec::dim() const {
  return std::visit(overloaded{[](const Elastic& e) { return e.w.cols(); },
                               [](const InnerProduct& e) { return e.w.cols(); },
                               [](const KernelInner& e) { return e.w_q.cols(); },
                               [](const PerHeadElastic& e) { return e.w1.front().cols(); },
                               [](const PerHeadInner& e) { return e.w1.front().cols(); }},
                    pair);
}

double EnergySpec::temperature() const {
  return std::visit([](const auto& g) { return g.temperature; }, global);
}

bool EnergySpec::is_multi_head() const {
  return std::holds_alternative<PerHeadElastic>(pair) || std::holds_alternative<PerHeadInner>(pair);
}

std::string EnergySpec::summary() const {
  std::ostringstream os;
  os << std::visit(overloaded{[](const Elastic&) { return "elastic"; },
                              [](const InnerProduct&) { return "inner"; },
                              [](const KernelInner&) { return "kernel-inner"; },
                              [](const PerHeadElastic&) { return "per-head-elastic"; },
                              [](const PerHeadInner&) { return "per-head-inner"; }},
                   pair);
  os << (is_helmholtz() ? "/helmholtz" : "/square-sum") << " d=" << dim() << " H=" << heads
     << " T=" << temperature();
  return os.str();
}

EnergySpec make_spec(PairEnergyKind pair, GlobalEnergyKind global) {
  EnergySpec spec{std::move(pair), std::move(global), 1};
  spec.heads = pair_heads(spec.pair);
  spec.validate();
  return spec;
}

// ---------------------------------------------------------------------------
// Scalars

double pair_energy(const EnergySpec& spec, const Vector& z, const Vector& h, std::size_t head) {
  Matrix single(h.dim(), 1);
  single.set_column(0, h);
  return evaluate_head(spec, z, single, head).energies[0];
}

Vector pair_energies(const EnergySpec& spec, const Vector& z, const Matrix& tokens,
                     std::size_t head) {
  return evaluate_head(spec, z, tokens, head).energies;
}

double free_energy(const EnergySpec& spec, const Vector& z, const Matrix& tokens, const Vector& p) {
  const double t = require_helmholtz(spec, "free_energy").temperature;
  if (spec.heads != 1) throw error("free_energy: single-head specs only");
  const Vector e = pair_energies(spec, z, tokens);
  if (p.dim() != e.dim()) throw dimension_error("free_energy: weight vector length != N");
  double total = 0.0;
  for (double x : p) {
    if (x < -1e-10) throw error("free_energy: p off simplex (negative entry)");
    total += x;
  }
  if (std::abs(total - 1.0) > 1e-10) throw error("free_energy: p off simplex (sum != 1)");

  double internal = 0.0;
  double neg_entropy = 0.0;
  for (std::size_t i = 0; i < e.dim(); ++i) {
    internal += p[i] * e[i];
    if (p[i] > 0.0) neg_entropy += p[i] * std::log(p[i]);
  }
  return internal + t * neg_entropy;
}

Vector boltzmann_weights(const EnergySpec& spec, const Vector& z, const Matrix& tokens,
                         std::size_t head) {
  const double t = require_helmholtz(spec, "boltzmann_weights").temperature;
  return head_weights(evaluate_head(spec, z, tokens, head), t);
}

double head_free_energy(const EnergySpec& spec, const Vector& z, const Matrix& tokens,
                        std::size_t head) {
  const double t = require_helmholtz(spec, "helmholtz_free_energy").temperature;
  const Vector e = pair_energies(spec, z, tokens, head);
  return -t * logsumexp(-(1.0 / t) * e);
}

double helmholtz_free_energy(const EnergySpec& spec, const Vector& z, const Matrix& tokens) {
  double total = 0.0;
  for (std::size_t h = 0; h < spec.heads; ++h) total += head_free_energy(spec, z, tokens, h);
  return total / static_cast<double>(spec.heads);
}

EnergySpec upper_bound_spec(const EnergySpec& spec) {
  const double t = spec.temperature();
  PairEnergyKind pair = std::visit(
      overloaded{[](const Elastic& e) -> PairEnergyKind { return InnerProduct{e.w}; },
                 [](const PerHeadElastic& e) -> PairEnergyKind { return PerHeadInner{e.w1, e.w2}; },
                 [](const InnerProduct& e) -> PairEnergyKind { return e; },
                 [](const PerHeadInner& e) -> PairEnergyKind { return e; },
                 [](const KernelInner&) -> PairEnergyKind {
                   throw error("upper bound: no inner-product counterpart for kernel energies");
                 }},
      spec.pair);
  return make_spec(std::move(pair), Helmholtz{t});
}

double upper_bound_energy(const EnergySpec& spec, const Vector& z, const Matrix& tokens) {
  return helmholtz_free_energy(upper_bound_spec(spec), z, tokens);
}

double square_sum_energy(const EnergySpec& spec, const Vector& z, const Matrix& tokens) {
  const auto* s = std::get_if<WeightedSquareSum>(&spec.global);
  if (!s) throw error("square_sum_energy: requires a weighted square-sum global energy");
  if (spec.heads != 1) throw error("square_sum_energy: single-head specs only");
  const Vector e = pair_energies(spec, z, tokens);
  if (!s->gates.empty() && s->gates.dim() != e.dim()) {
    throw dimension_error("square_sum_energy: gate length != N");
  }
  double total = 0.0;
  for (std::size_t i = 0; i < e.dim(); ++i) {
    const double g = s->gates.empty() ? 1.0 : s->gates[i];
    total += g * e[i] * e[i];
  }
  return -0.5 * s->temperature * total;
}

double global_energy(const EnergySpec& spec, const Vector& z, const Matrix& tokens) {
  return spec.is_helmholtz() ? helmholtz_free_energy(spec, z, tokens)
                             : square_sum_energy(spec, z, tokens);
}

// ---------------------------------------------------------------------------
// Gradients

Vector head_grad_z(const EnergySpec& spec, const Vector& z, const Matrix& tokens, std::size_t head) {
  const double t = require_helmholtz(spec, "grad_z").temperature;
  return head_value_grad(spec, z, tokens, head, t).second;
}

Vector grad_z(const EnergySpec& spec, const Vector& z, const Matrix& tokens,
              GradConvention convention) {
  if (const auto* s = std::get_if<WeightedSquareSum>(&spec.global)) {
    if (spec.heads != 1) throw error("grad_z: square-sum energy is single-head only");
    const HeadEval eval = evaluate_head(spec, z, tokens, 0);
    if (!s->gates.empty() && s->gates.dim() != eval.energies.dim()) {
      throw dimension_error("grad_z: gate length != N");
    }
    Vector weights(eval.energies.dim());
    for (std::size_t i = 0; i < eval.energies.dim(); ++i) {
      const double g = s->gates.empty() ? 1.0 : s->gates[i];
      weights[i] = -s->temperature * g * eval.energies[i];
    }
    return lift(eval.map, transpose_times(eval.reduced, weights));
  }

  Vector g(z.dim());
  for (std::size_t h = 0; h < spec.heads; ++h) g += head_grad_z(spec, z, tokens, h);
  double scale = 1.0 / static_cast<double>(spec.heads);
  if (convention == GradConvention::temperature_scaled && is_inner_kind(spec.pair)) scale *= spec.temperature();
  return scale * std::move(g);
}

ValueGrad energy_and_grad(const EnergySpec& spec, const Vector& z, const Matrix& tokens,
                          GradConvention convention) {
  if (!spec.is_helmholtz()) {
    return {square_sum_energy(spec, z, tokens), grad_z(spec, z, tokens, convention)};
  }
  const double t = spec.temperature();
  ValueGrad out{0.0, Vector(z.dim())};
  for (std::size_t h = 0; h < spec.heads; ++h) {
    auto [value, grad] = head_value_grad(spec, z, tokens, h, t);
    out.value += value;
    out.grad += grad;
  }
  const double inv_heads = 1.0 / static_cast<double>(spec.heads);
  out.value *= inv_heads;
  double scale = inv_heads;
  if (convention == GradConvention::temperature_scaled && is_inner_kind(spec.pair)) scale *= t;
  out.grad *= scale;
  return out;
}

Matrix grad_w(const EnergySpec& spec, const Vector& z, const Matrix& tokens) {
  require_helmholtz(spec, "grad_W");
  const Vector p = boltzmann_weights(spec, z, tokens);
  const std::size_t d = z.dim();
  Matrix g(d, d);
  if (const auto* e = std::get_if<Elastic>(&spec.pair)) {
    for (std::size_t i = 0; i < tokens.cols(); ++i) {
      const Vector h = tokens.column(i);
      add_outer(g, e->w * h - z, h, p[i]);
    }
    return g;
  }
  if (std::holds_alternative<InnerProduct>(spec.pair)) {
    for (std::size_t i = 0; i < tokens.cols(); ++i) add_outer(g, z, tokens.column(i), -p[i]);
    return g;
  }
  throw error("no analytic grad_W for this pair energy");
}

// ---------------------------------------------------------------------------
// Hessians

Matrix head_hessian_z(const EnergySpec& spec, const Vector& z, const Matrix& tokens,
                      std::size_t head) {
  const HessianSplit s = head_split(spec, z, tokens, head);
  return s.psd_part + s.nsd_part;
}

HessianSplit hessian_split(const EnergySpec& spec, const Vector& z, const Matrix& tokens) {
  const std::size_t d = z.dim();
  HessianSplit total{Matrix(d, d), Matrix(d, d)};
  for (std::size_t h = 0; h < spec.heads; ++h) {
    const HessianSplit s = head_split(spec, z, tokens, h);
    total.psd_part += s.psd_part;
    total.nsd_part += s.nsd_part;
  }
  const double inv_heads = 1.0 / static_cast<double>(spec.heads);
  total.psd_part *= inv_heads;
  total.nsd_part *= inv_heads;
  return total;
}

Matrix hessian_z(const EnergySpec& spec, const Vector& z, const Matrix& tokens) {
  const HessianSplit s = hessian_split(spec, z, tokens);
  return s.psd_part + s.nsd_part;
}

// ---------------------------------------------------------------------------
// Stationary points

std::optional<Vector> find_stationary_point(const EnergySpec& spec, const Vector& z0,
                                            const Matrix& tokens,
                                            const StationaryOptions& options) {
  const double t = require_helmholtz(spec, "find_stationary_point").temperature;
  if (!std::holds_alternative<Elastic>(spec.pair) &&
      !std::holds_alternative<PerHeadElastic>(spec.pair)) {
    throw error("find_stationary_point: elastic energies only");
  }
  check_tokens(spec, z0, tokens);
  const std::size_t d = z0.dim();

  // A = sum_h L_h^T L_h
  Matrix a(d, d);
  for (std::size_t h = 0; h < spec.heads; ++h) {
    const HeadEval eval = evaluate_head(spec, z0, tokens, h);
    a += eval.map ? eval.map->transpose() * *eval.map : Matrix::identity(d);
  }
  const Matrix a_inv = solve_inverse(a);

  Vector z = z0;
  for (int it = 0; it < options.max_iters; ++it) {
    // sum_h L_h^T kbar_h, using kbar_h = L_h z - sum_i p_i r_i.
    Vector pull(d);
    for (std::size_t h = 0; h < spec.heads; ++h) {
      const HeadEval eval = evaluate_head(spec, z, tokens, h);
      const Vector mean_residual = transpose_times(eval.reduced, head_weights(eval, t));
      const Vector q = eval.map ? *eval.map * z : z;
      pull += lift(eval.map, q - mean_residual);
    }
    const Vector target = a_inv * pull;
    Vector next = (1.0 - options.damping) * z + options.damping * target;
    const double residual = norm(next - z);
    z = std::move(next);
    if (!is_finite(z)) return std::nullopt;
    if (residual < options.residual_tol) return z;
  }
  return std::nullopt;
}

}  // namespace energy_attn
