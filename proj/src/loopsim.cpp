#include "energy_attn/loopsim.hpp"

#include <cmath>

namespace energy_attn {

namespace {

void check_loop_spec(const EnergySpec& spec) {
  if (!spec.is_helmholtz()) throw error("loop: needs a Helmholtz spec");
  spec_weight(spec);
}

Vector column_mean(const Matrix& m) {
  Vector out(m.rows());
  for (std::size_t r = 0; r < m.rows(); ++r) {
    double s = 0.0;
    for (double x : m.row(r)) s += x;
    out[r] = s / static_cast<double>(m.cols());
  }
  return out;
}

}  // namespace

const Matrix& spec_weight(const EnergySpec& spec) {
  if (const auto* e = std::get_if<Elastic>(&spec.pair)) return e->w;
  if (const auto* e = std::get_if<InnerProduct>(&spec.pair)) return e->w;
  throw error("loop: needs a single-head Elastic or InnerProduct spec");
}

EnergySpec with_weight(const EnergySpec& spec, const Matrix& w) {
  EnergySpec out = spec;
  if (auto* e = std::get_if<Elastic>(&out.pair)) {
    e->w = w;
  } else if (auto* e = std::get_if<InnerProduct>(&out.pair)) {
    e->w = w;
  } else {
    throw error("loop: needs a single-head Elastic or InnerProduct spec");
  }
  out.validate();
  return out;
}

Matrix attended_set(const Matrix& h, std::size_t position, bool causal) {
  return causal ? h.leading_columns(position + 1) : h;
}

double loop_objective(const EnergySpec& spec, const Matrix& z, const Matrix& h, bool causal) {
  double total = 0.0;
  for (std::size_t i = 0; i < z.cols(); ++i) {
    total += helmholtz_free_energy(spec, z.column(i), attended_set(h, i, causal));
  }
  return total;
}

LoopTrace loop_forward(const LoopConfig& config, const Matrix& h0) {
  check_loop_spec(config.spec);
  if (h0.cols() == 0) throw error("loop_forward: empty token set");
  if (h0.rows() != config.spec.dim()) throw dimension_error("loop_forward: token dimension mismatch");

  LoopTrace trace;
  Matrix z = h0;
  trace.states.push_back(z);
  trace.objectives.push_back(loop_objective(config.spec, z, z, config.causal));

  for (std::size_t k = 0; k < config.iterations; ++k) {
    // Every position reads the same frozen H = Z^(k).
    const Matrix& h = z;
    const std::vector<Vector> cols = parallel_map(h.cols(), [&](std::size_t i) {
      const Vector zi = h.column(i);
      return zi - config.eta * grad_z(config.spec, zi, attended_set(h, i, config.causal),
                                      config.convention);
    });
    Matrix next(h.rows(), h.cols());
    for (std::size_t i = 0; i < cols.size(); ++i) {
      if (!is_finite(cols[i])) {
        trace.stop_reason = "diverged";
        return trace;
      }
      next.set_column(i, cols[i]);
    }
    const double objective = loop_objective(config.spec, next, next, config.causal);
    if (!std::isfinite(objective)) {
      trace.stop_reason = "diverged";
      return trace;
    }
    z = std::move(next);
    trace.states.push_back(z);
    trace.objectives.push_back(objective);
  }
  return trace;
}

double cross_entropy(const Vector& logits, const Vector& y) {
  if (logits.dim() != y.dim()) throw dimension_error("cross_entropy: logits and label differ in length");
  const double lse = logsumexp(logits);
  double total = 0.0;
  for (std::size_t c = 0; c < y.dim(); ++c) {
    if (y[c] != 0.0) total += y[c] * (lse - logits[c]);
  }
  return total;
}

Matrix ce_grad_E(const Matrix& e, const Vector& z, const Vector& y) {
  if (e.rows() != z.dim()) throw dimension_error("ce_grad_E: E rows != dim(z)");
  if (e.cols() != y.dim()) throw dimension_error("ce_grad_E: E cols != dim(y)");
  Vector residual = softmax(transpose_times(e, z));
  residual -= y;
  return outer(z, residual);
}

std::vector<Sample> two_cluster_dataset(Rng& rng, const ClusterConfig& c) {
  if (c.classes < 2) throw error("dataset: need at least two classes");
  if (c.tokens == 0 || c.per_class == 0) throw error("dataset: empty samples");
  std::vector<Vector> centres;
  for (std::size_t k = 0; k < c.classes; ++k) centres.push_back(sample_hypersphere(rng, c.dim, c.rho));

  std::vector<Sample> data;
  data.reserve(c.classes * c.per_class);
  for (std::size_t k = 0; k < c.classes; ++k) {
    for (std::size_t s = 0; s < c.per_class; ++s) {
      Sample sample{Matrix(c.dim, c.tokens), Vector(c.classes)};
      for (std::size_t i = 0; i < c.tokens; ++i) {
        Vector h = centres[k] + rng.normal_vector(c.dim, c.spread);
        const double n = norm(h);
        if (n > 0.0) h *= c.rho / n;
        sample.tokens.set_column(i, h);
      }
      sample.label[k] = 1.0;
      data.push_back(std::move(sample));
    }
  }
  return data;
}

LoopTrace alternating_optimize(const AlternatingConfig& config, const std::vector<Sample>& data) {
  if (data.empty()) throw error("alternating_optimize: empty dataset");
  check_loop_spec(config.spec);
  const std::size_t d = config.spec.dim();
  if (config.e.rows() != d) throw dimension_error("alternating_optimize: E must be d x C");

  Matrix w = spec_weight(config.spec);
  Matrix e = config.e;
  const double inv_m = 1.0 / static_cast<double>(data.size());
  std::vector<Vector> z;
  z.reserve(data.size());
  for (const Sample& s : data) {
    if (s.tokens.rows() != d) throw dimension_error("alternating_optimize: token dimension mismatch");
    if (s.label.dim() != e.cols()) throw dimension_error("alternating_optimize: label length != C");
    z.push_back(column_mean(s.tokens));
  }

  LoopTrace trace;
  auto record = [&](const EnergySpec& spec) {
    double ce = 0.0;
    double reg = 0.0;
    for (std::size_t i = 0; i < data.size(); ++i) {
      ce += cross_entropy(transpose_times(e, z[i]), data[i].label);
      reg += helmholtz_free_energy(spec, z[i], data[i].tokens);
    }
    trace.ce.push_back(ce * inv_m);
    trace.objectives.push_back((ce + reg) * inv_m);
    trace.w_norms.push_back(max_abs(w));
    trace.e_norms.push_back(max_abs(e));
    return std::isfinite(trace.objectives.back());
  };

  EnergySpec spec = config.spec;
  record(spec);
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    // Forward: one GD step per sample.
    for (std::size_t i = 0; i < data.size(); ++i) {
      z[i] -= config.eta * grad_z(spec, z[i], data[i].tokens, GradConvention::temperature_scaled);
    }
    // Backward: averaged parameter gradients at the new representations.
    const std::vector<Matrix> gw = parallel_map(data.size(), [&](std::size_t i) {
      return grad_w(spec, z[i], data[i].tokens);
    });
    Matrix gw_sum(d, d);
    Matrix ge_sum(e.rows(), e.cols());
    for (std::size_t i = 0; i < data.size(); ++i) {
      gw_sum += gw[i];
      ge_sum += ce_grad_E(e, z[i], data[i].label);
    }
    w -= (config.eta * inv_m) * gw_sum;
    e -= (config.eta * inv_m) * ge_sum;
    if (!is_finite(w) || !is_finite(e)) {
      trace.stop_reason = "diverged";
      break;
    }
    spec = with_weight(spec, w);
    if (!record(spec)) {
      trace.stop_reason = "diverged";
      break;
    }
  }
  trace.w = w;
  trace.e = e;
  trace.representations = z;
  return trace;
}

LoopTrace loop_train(const LoopConfig& config, const Matrix& h0, const std::vector<Vector>& labels,
                     const Matrix& e0, std::size_t epochs) {
  check_loop_spec(config.spec);
  const std::size_t n = h0.cols();
  if (labels.size() != n) throw dimension_error("loop_train: need one label per position");
  if (e0.rows() != h0.rows()) throw dimension_error("loop_train: E must be d x C");
  for (const Vector& y : labels) {
    if (y.dim() != e0.cols()) throw dimension_error("loop_train: label length != C");
  }

  LoopConfig cfg = config;
  Matrix w = spec_weight(cfg.spec);
  Matrix e = e0;
  const double inv_n = 1.0 / static_cast<double>(n);
  LoopTrace trace;

  for (std::size_t epoch = 0;; ++epoch) {
    const LoopTrace fwd = loop_forward(cfg, h0);
    if (fwd.stop_reason != "completed") {
      trace.stop_reason = fwd.stop_reason;
      break;
    }
    const Matrix& zk = fwd.states.back();
    double ce = 0.0;
    for (std::size_t i = 0; i < n; ++i) ce += cross_entropy(transpose_times(e, zk.column(i)), labels[i]);
    trace.ce.push_back(ce * inv_n);
    trace.objectives.push_back(ce * inv_n + fwd.objectives.back() * inv_n);
    trace.w_norms.push_back(max_abs(w));
    trace.e_norms.push_back(max_abs(e));
    trace.states.push_back(zk);
    if (epoch == epochs) break;

    // H^(K) = Z^(K) after the final synchronization.
    Matrix gw_sum(w.rows(), w.cols());
    Matrix ge_sum(e.rows(), e.cols());
    for (std::size_t i = 0; i < n; ++i) {
      const Vector zi = zk.column(i);
      gw_sum += grad_w(cfg.spec, zi, attended_set(zk, i, cfg.causal));
      ge_sum += ce_grad_E(e, zi, labels[i]);
    }
    w -= (cfg.eta * inv_n) * gw_sum;
    e -= (cfg.eta * inv_n) * ge_sum;
    if (!is_finite(w) || !is_finite(e)) {
      trace.stop_reason = "diverged";
      break;
    }
    cfg.spec = with_weight(cfg.spec, w);
  }
  trace.w = w;
  trace.e = e;
  return trace;
}

}  // namespace energy_attn
