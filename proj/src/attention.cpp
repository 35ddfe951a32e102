#include "energy_attn/attention.hpp"

#include <algorithm>
#include <string>

namespace energy_attn {

namespace {

void check_inputs(const AttentionParams& params, const Vector& z, const Matrix& tokens,
                  bool need_output) {
  params.validate(need_output);
  if (z.dim() != params.dim()) throw dimension_error("attention: query dimension mismatch");
  if (tokens.rows() != params.dim()) throw dimension_error("attention: token dimension mismatch");
  if (tokens.cols() == 0) throw error("attention: empty token set");
}

void check_single_head(const AttentionParams& params, const char* op) {
  if (params.heads.size() != 1 || params.head_dim() != params.dim()) {
    throw dimension_error(std::string(op) + ": needs one head with square d x d weights");
  }
}

// Row i is (w h_i)^T. Streams the N x d transposed tokens once.
Matrix mapped_rows(const Matrix& w, const Matrix& tokens_t) { return tokens_t * w.transpose(); }

// out_i = row_i . q
Vector row_dots(const Matrix& rows, const Vector& q) {
  Vector out(rows.rows());
  for (std::size_t i = 0; i < rows.rows(); ++i) {
    auto r = rows.row(i);
    double s = 0.0;
    for (std::size_t k = 0; k < r.size(); ++k) s += r[k] * q[k];
    out[i] = s;
  }
  return out;
}

struct DotHead {
  Vector scores;
  Vector mean_value;
};

// Dot-product scores softmax(q . k_i / T) and the weighted value mean W_V H p.
DotHead dot_head(const HeadParams& head, const Vector& z, const Matrix& tokens,
                 const Matrix& tokens_t) {
  Vector logits = row_dots(mapped_rows(head.w_k, tokens_t), head.w_q * z);
  logits *= 1.0 / head.temperature;
  DotHead out{softmax(logits), {}};
  out.mean_value = head.w_v * (tokens * out.scores);
  return out;
}

}  // namespace

void AttentionParams::validate(bool need_output) const {
  if (heads.empty()) throw error("attention: no heads");
  const std::size_t d = heads.front().w_q.cols();
  const std::size_t dh = heads.front().w_q.rows();
  if (d == 0 || dh == 0) throw dimension_error("attention: empty weights");
  if (dh * heads.size() != d) throw dimension_error("attention: H * d_h must equal d");
  for (const HeadParams& h : heads) {
    for (const Matrix* m : {&h.w_q, &h.w_k, &h.w_v}) {
      if (m->rows() != dh || m->cols() != d) {
        throw dimension_error("attention: W_Q, W_K, W_V must be d_h x d");
      }
    }
    if (need_output && (h.w_o.rows() != d || h.w_o.cols() != dh)) {
      throw dimension_error("attention: W_O must be d x d_h");
    }
    if (!(h.temperature > 0.0) || !(h.temperature_bias > 0.0)) {
      throw error("attention: temperatures must be positive");
    }
  }
}

std::size_t AttentionParams::dim() const {
  return heads.empty() ? 0 : heads.front().w_q.cols();
}

std::size_t AttentionParams::head_dim() const {
  return heads.empty() ? 0 : heads.front().w_q.rows();
}

Preconditioner precompute(const AttentionParams& params) {
  params.validate(false);
  Preconditioner pre;
  pre.pinv.reserve(params.heads.size());
  for (const HeadParams& h : params.heads) pre.pinv.push_back(range_space_pinv(h.w_q));
  return pre;
}

AttentionParams random_params(Rng& rng, std::size_t dim, std::size_t heads, ScoreKind kind) {
  if (heads == 0 || dim % heads != 0) throw dimension_error("random_params: H must divide d");
  const std::size_t dh = dim / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dim));
  const double t = kind == ScoreKind::dot ? dot_score_temperature(dh)
                                          : distance_score_temperature(dh);
  AttentionParams params;
  for (std::size_t h = 0; h < heads; ++h) {
    HeadParams hp;
    hp.w_q = rng.normal_matrix(dh, dim, scale);
    hp.w_k = rng.normal_matrix(dh, dim, scale);
    hp.w_v = rng.normal_matrix(dh, dim, scale);
    hp.w_o = rng.normal_matrix(dim, dh, scale);
    hp.temperature = t;
    hp.temperature_bias = t;
    params.heads.push_back(std::move(hp));
  }
  return params;
}

AttentionParams tied_single_head(const Matrix& w, double eta, double temperature) {
  if (!w.is_square()) throw dimension_error("tied_single_head: W must be square");
  HeadParams hp;
  hp.w_q = Matrix::identity(w.rows());
  hp.w_k = w;
  hp.w_v = (eta * temperature) * w;
  hp.temperature = temperature;
  hp.temperature_bias = temperature;
  AttentionParams params;
  params.heads.push_back(std::move(hp));
  params.eta = eta;
  return params;
}

AttentionParams tied_multi_head(const std::vector<Matrix>& w1, const std::vector<Matrix>& w2,
                                double eta, double temperature) {
  if (w1.size() != w2.size() || w1.empty()) throw error("tied_multi_head: head count mismatch");
  const double scale = eta * temperature / static_cast<double>(w1.size());
  AttentionParams params;
  params.eta = eta;
  for (std::size_t h = 0; h < w1.size(); ++h) {
    HeadParams hp;
    hp.w_q = w1[h];
    hp.w_k = w2[h];
    hp.w_v = w2[h];
    hp.w_o = scale * w1[h].transpose();
    hp.temperature = temperature;
    hp.temperature_bias = temperature;
    params.heads.push_back(std::move(hp));
  }
  params.validate();
  return params;
}

AttentionParams tied_newton(AttentionParams params) {
  const Preconditioner pre = precompute(params);
  const double scale = -params.eta / static_cast<double>(params.heads.size());
  for (std::size_t h = 0; h < params.heads.size(); ++h) {
    params.heads[h].w_v = params.heads[h].w_q;
    params.heads[h].w_o = scale * pre.pinv[h];
  }
  return params;
}

Vector softmax_attention(const AttentionParams& params, const Vector& z, const Matrix& tokens) {
  check_inputs(params, z, tokens, false);
  check_single_head(params, "softmax_attention");
  return z + dot_head(params.heads.front(), z, tokens, tokens.transpose()).mean_value;
}

Vector linear_attention(const AttentionParams& params, const Vector& z, const Matrix& tokens,
                        const Vector& gates) {
  check_inputs(params, z, tokens, false);
  check_single_head(params, "linear_attention");
  if (!gates.empty() && gates.dim() != tokens.cols()) {
    throw dimension_error("linear_attention: gate length != N");
  }
  const HeadParams& h = params.heads.front();
  Vector weights = row_dots(mapped_rows(h.w_k, tokens.transpose()), h.w_q * z);
  if (!gates.empty()) {
    for (std::size_t i = 0; i < weights.dim(); ++i) weights[i] *= gates[i];
  }
  return z + h.w_v * (tokens * weights);
}

Vector mha(const AttentionParams& params, const Vector& z, const Matrix& tokens) {
  check_inputs(params, z, tokens, true);
  const Matrix tokens_t = tokens.transpose();
  Vector out = z;
  for (const HeadParams& h : params.heads) out += h.w_o * dot_head(h, z, tokens, tokens_t).mean_value;
  return out;
}

MomentumStep momen_mha(const AttentionParams& params, const Vector& z, const Matrix& tokens,
                       const MomentumState& state) {
  if (state.p.dim() != z.dim()) throw dimension_error("momen_mha: momentum dimension mismatch");
  const Vector g = z - mha(params, z, tokens);
  MomentumState next{params.beta * state.p + g};
  Vector out = z - params.eta * next.p;
  return {std::move(out), std::move(next)};
}

MomentumStep nag_mha(const AttentionParams& params, const Vector& z, const Matrix& tokens,
                     const MomentumState& state) {
  if (state.p.dim() != z.dim()) throw dimension_error("nag_mha: momentum dimension mismatch");
  const Vector lookahead = z - params.beta * state.p;
  const Vector g = lookahead - mha(params, lookahead, tokens);
  MomentumState next{params.beta * state.p + g};
  Vector out = z - params.eta * next.p;
  return {std::move(out), std::move(next)};
}

DistanceHead distance_head_t(const HeadParams& head, const Vector& z, const Matrix& tokens_t) {
  DistanceHead out;
  out.query = head.w_q * z;
  out.deviations = mapped_rows(head.w_k, tokens_t);
  const std::size_t n = out.deviations.rows();
  const std::size_t m = out.query.dim();

  Vector logits(n);
  for (std::size_t i = 0; i < n; ++i) {
    auto k = out.deviations.row(i);
    double s = 0.0;
    for (std::size_t r = 0; r < m; ++r) {
      const double diff = out.query[r] - k[r];
      s += diff * diff;
    }
    logits[i] = -0.5 * s / head.temperature;
  }
  out.scores = softmax(logits);
  out.mean_key = transpose_times(out.deviations, out.scores);
  for (std::size_t i = 0; i < n; ++i) {
    auto k = out.deviations.row(i);
    for (std::size_t r = 0; r < m; ++r) k[r] -= out.mean_key[r];
  }
  return out;
}

DistanceHead distance_head(const HeadParams& head, const Vector& z, const Matrix& tokens) {
  return distance_head_t(head, z, tokens.transpose());
}

Vector newton_bias(const DistanceHead& head, const Vector& r, double temperature_bias) {
  // s_i = d_i . r, then sum_i (p_i s_i / T_b) d_i
  Vector weights = row_dots(head.deviations, r);
  for (std::size_t i = 0; i < weights.dim(); ++i) {
    weights[i] *= head.scores[i] / temperature_bias;
  }
  return transpose_times(head.deviations, weights);
}

Vector light_bias(const Matrix& values, const Vector& p) {
  const Vector mean = transpose_times(values, p);
  Vector weights = row_dots(values, mean);
  for (std::size_t i = 0; i < weights.dim(); ++i) weights[i] *= p[i];
  return transpose_times(values, weights) - dot(mean, mean) * mean;
}

Vector mha2nd_exact(const AttentionParams& params, const Preconditioner& pre, const Vector& z,
                    const Matrix& tokens, const NewtonOptions& options) {
  check_inputs(params, z, tokens, false);
  if (pre.pinv.size() != params.heads.size()) {
    throw error("mha2nd_exact: preconditioner does not match params");
  }
  const Matrix tokens_t = tokens.transpose();
  Vector step(z.dim());
  for (std::size_t h = 0; h < params.heads.size(); ++h) {
    const HeadParams& hp = params.heads[h];
    const DistanceHead dh = distance_head_t(hp, z, tokens_t);
    const std::size_t m = dh.query.dim();

    Matrix bracket = Matrix::identity(m);
    Vector d(m);
    for (std::size_t i = 0; i < dh.scores.dim(); ++i) {
      auto row = dh.deviations.row(i);
      std::copy(row.begin(), row.end(), d.begin());
      add_outer(bracket, d, d, -dh.scores[i] / hp.temperature_bias);
    }
    for (std::size_t k = 0; k < m; ++k) bracket(k, k) += options.epsilon;

    Matrix inverse;
    try {
      inverse = solve_inverse(bracket);
    } catch (const error&) {
      throw error("Hessian preconditioner singular");
    }
    step += pre.pinv[h] * (inverse * (dh.query - dh.mean_key));
  }
  return z - (params.eta / static_cast<double>(params.heads.size())) * step;
}

Vector mha2nd_exact(const AttentionParams& params, const Vector& z, const Matrix& tokens,
                    const NewtonOptions& options) {
  return mha2nd_exact(params, precompute(params), z, tokens, options);
}

Vector mha2nd1st(const AttentionParams& params, const Preconditioner& pre, const Vector& z,
                 const Matrix& tokens) {
  check_inputs(params, z, tokens, true);
  if (pre.pinv.size() != params.heads.size()) {
    throw error("mha2nd1st: preconditioner does not match params");
  }
  const Matrix tokens_t = tokens.transpose();
  Vector out = z;
  for (std::size_t h = 0; h < params.heads.size(); ++h) {
    const HeadParams& hp = params.heads[h];
    const DistanceHead dh = distance_head_t(hp, z, tokens_t);
    const Vector r = dh.query - dh.mean_key;
    const Vector target = r + newton_bias(dh, r, hp.temperature_bias);
    out += hp.w_o * (hp.w_v * (pre.pinv[h] * target));
  }
  return out;
}

Vector mha2nd1st(const AttentionParams& params, const Vector& z, const Matrix& tokens) {
  return mha2nd1st(params, precompute(params), z, tokens);
}

Vector mha2nd1st_noV(const AttentionParams& params, const Vector& z, const Matrix& tokens) {
  check_inputs(params, z, tokens, true);
  const Matrix tokens_t = tokens.transpose();
  Vector out = z;
  for (const HeadParams& hp : params.heads) {
    const DistanceHead dh = distance_head_t(hp, z, tokens_t);
    const Vector r = dh.query - dh.mean_key;
    out += hp.w_o * (r + newton_bias(dh, r, hp.temperature_bias));
  }
  return out;
}

Vector light_mha2nd1st(const AttentionParams& params, const Vector& z, const Matrix& tokens) {
  check_inputs(params, z, tokens, true);
  const Matrix tokens_t = tokens.transpose();
  Vector out = z;
  for (const HeadParams& hp : params.heads) {
    Vector logits = row_dots(mapped_rows(hp.w_k, tokens_t), hp.w_q * z);
    logits *= 1.0 / hp.temperature;
    const Vector p = softmax(logits);
    const Matrix values = mapped_rows(hp.w_v, tokens_t);
    Vector update = transpose_times(values, p);
    if (hp.tau != 0.0) axpy(hp.tau, light_bias(values, p), update);
    out += hp.w_o * update;
  }
  return out;
}

}  // namespace energy_attn
