#pragma once

// Forward passes of the attention variants. Every variant is a pure function
// of (params, z, tokens); the momentum variants also take and return a
// caller-owned MomentumState.
//
// Shapes: W_Q, W_K, W_V are d_h x d per head, W_O is d x d_h. The single-head
// forms (softmax_attention, linear_attention) use d x d W_Q, W_K, W_V and
// ignore W_O.

#include <cmath>
#include <vector>

#include "energy_attn/numkit.hpp"

namespace energy_attn {

struct HeadParams {
  Matrix w_q;
  Matrix w_k;
  Matrix w_v;
  Matrix w_o;
  double temperature = 1.0;       // score temperature T_h
  double temperature_bias = 1.0;  // temperature of the Newton bias / bracket
  double tau = 0.01;              // light-variant bias scale
};

struct AttentionParams {
  std::vector<HeadParams> heads;
  double beta = 0.9;
  double eta = 1.0;

  // Shape and positivity checks. `need_output` requires every W_O to be d x d_h.
  void validate(bool need_output = true) const;
  std::size_t dim() const;
  std::size_t head_dim() const;
  std::size_t num_heads() const { return heads.size(); }
};

struct MomentumState {
  Vector p;

  static MomentumState zeros(std::size_t dim) { return {Vector(dim)}; }
};

struct MomentumStep {
  Vector z;
  MomentumState state;
};

// W_Q^T (W_Q W_Q^T)^{-1} per head, computed once per parameter set.
struct Preconditioner {
  std::vector<Matrix> pinv;
};

Preconditioner precompute(const AttentionParams& params);

// Default temperatures by score kind.
inline double dot_score_temperature(std::size_t head_dim) {
  return std::sqrt(static_cast<double>(head_dim));
}
inline double distance_score_temperature(std::size_t head_dim) {
  return std::sqrt(2.0 * static_cast<double>(head_dim));
}

enum class ScoreKind { dot, distance };

// Gaussian weights with stddev 1/sqrt(d) and the default scalars for `kind`.
AttentionParams random_params(Rng& rng, std::size_t dim, std::size_t heads,
                              ScoreKind kind = ScoreKind::dot);

// Single-head parameters with W_Q = I, W_K = w, W_V = eta * T * w.
AttentionParams tied_single_head(const Matrix& w, double eta, double temperature);

// Per head: W_Q = W1_h, W_K = W_V = W2_h, W_O = (eta T / H) W1_h^T.
AttentionParams tied_multi_head(const std::vector<Matrix>& w1, const std::vector<Matrix>& w2,
                                double eta, double temperature);

// Rewrites W_V = W_Q and W_O = -(eta/H) M_h, so W_O W_V M_h = -(eta/H) M_h and
// mha2nd1st becomes the first-order Taylor truncation of mha2nd_exact.
AttentionParams tied_newton(AttentionParams params);

// z + W_V H softmax(H^T W_K^T W_Q z / T)
Vector softmax_attention(const AttentionParams& params, const Vector& z, const Matrix& tokens);

// z + sum_i gamma_i (z^T W_Q^T W_K h_i) W_V h_i; empty gates mean all ones.
Vector linear_attention(const AttentionParams& params, const Vector& z, const Matrix& tokens,
                        const Vector& gates = {});

Vector mha(const AttentionParams& params, const Vector& z, const Matrix& tokens);

// g = z - mha(z), p' = beta p + g, z' = z - eta p'.
MomentumStep momen_mha(const AttentionParams& params, const Vector& z, const Matrix& tokens,
                       const MomentumState& state);
// Same recurrence with g evaluated at the lookahead z - beta p.
MomentumStep nag_mha(const AttentionParams& params, const Vector& z, const Matrix& tokens,
                     const MomentumState& state);

struct NewtonOptions {
  // Adds epsilon * I to the bracket before inversion.
  double epsilon = 0.0;
};

// z - (eta/H) sum_h M_h [I - (1/T_b) sum_i p_i d_i d_i^T]^{-1} (q_h - kbar_h),
// with distance scores. Throws "Hessian preconditioner singular".
Vector mha2nd_exact(const AttentionParams& params, const Preconditioner& pre, const Vector& z,
                    const Matrix& tokens, const NewtonOptions& options = {});
Vector mha2nd_exact(const AttentionParams& params, const Vector& z, const Matrix& tokens,
                    const NewtonOptions& options = {});

// z + sum_h W_O W_V M_h (q_h - kbar_h + b_h),
// b_h = (1/T_b) sum_i p_i d_i (d_i^T (q_h - kbar_h)).
Vector mha2nd1st(const AttentionParams& params, const Preconditioner& pre, const Vector& z,
                 const Matrix& tokens);
Vector mha2nd1st(const AttentionParams& params, const Vector& z, const Matrix& tokens);

// z + sum_h W_O (q_h - kbar_h + b_h)
Vector mha2nd1st_noV(const AttentionParams& params, const Vector& z, const Matrix& tokens);

// z + sum_h W_O (vbar_h + tau_h b_h), b_h = sum_i p_i v_i (v_i^T vbar) - vbar (vbar^T vbar),
// with dot-product scores.
Vector light_mha2nd1st(const AttentionParams& params, const Vector& z, const Matrix& tokens);

// Pieces exposed for tests and the bias-temperature sweep.
struct DistanceHead {
  Vector scores;         // p_i
  Vector query;          // q_h
  Vector mean_key;       // kbar_h
  Matrix deviations;     // row i is d_i = k_i - kbar
};
DistanceHead distance_head(const HeadParams& head, const Vector& z, const Matrix& tokens);
// Same, from the N x d transposed token matrix (shared across heads).
DistanceHead distance_head_t(const HeadParams& head, const Vector& z, const Matrix& tokens_t);
// (1/T_b) sum_i p_i d_i (d_i^T r), inner products first.
Vector newton_bias(const DistanceHead& head, const Vector& r, double temperature_bias);
// sum_i p_i v_i (v_i^T vbar) - vbar (vbar^T vbar); row i of `values` is v_i.
Vector light_bias(const Matrix& values, const Vector& p);

}  // namespace energy_attn
