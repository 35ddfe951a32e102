#pragma once

// Loop-transformer forward (every position takes one GD step against its
// attended set, then H <- Z) and the alternating-optimization training loops
// with a cross-entropy head.

#include <cstdint>
#include <string>
#include <vector>

#include "energy_attn/energy.hpp"

namespace energy_attn {

struct LoopConfig {
  std::size_t iterations = 1;  // K
  double eta = 0.1;
  bool causal = false;
  // Single-head Elastic or InnerProduct Helmholtz spec; its W is shared.
  EnergySpec spec;
  GradConvention convention = GradConvention::temperature_scaled;
};

struct LoopTrace {
  std::vector<Matrix> states;      // Z^(k), k = 0..K (forward)
  std::vector<double> objectives;  // sum_i F*(z_i, H_<=i) per iteration, or per-epoch totals
  std::vector<double> ce;          // mean cross-entropy per epoch (training only)
  std::vector<double> w_norms;     // max |W| per epoch (training only)
  std::vector<double> e_norms;     // max |E| per epoch (training only)
  Matrix w;                        // final parameters (training only)
  Matrix e;
  std::vector<Vector> representations;  // final z_i (alternating_optimize)
  std::string stop_reason = "completed";
};

// Tokens position i attends to: the first i+1 columns when causal, else all.
Matrix attended_set(const Matrix& h, std::size_t position, bool causal);

double loop_objective(const EnergySpec& spec, const Matrix& z, const Matrix& h, bool causal);

LoopTrace loop_forward(const LoopConfig& config, const Matrix& h0);

// -sum_c y_c log softmax(logits)_c
double cross_entropy(const Vector& logits, const Vector& y);
// Gradient of cross_entropy(E^T z, y) in E (d x C): z (softmax(E^T z) - y)^T.
Matrix ce_grad_E(const Matrix& e, const Vector& z, const Vector& y);

// Copy of `spec` with its single weight matrix replaced.
EnergySpec with_weight(const EnergySpec& spec, const Matrix& w);
const Matrix& spec_weight(const EnergySpec& spec);

struct Sample {
  Matrix tokens;  // d x N
  Vector label;   // simplex over C classes
};

struct ClusterConfig {
  std::size_t dim = 8;
  std::size_t classes = 2;
  std::size_t per_class = 50;
  std::size_t tokens = 4;
  double rho = 1.0;
  double spread = 0.5;  // noise stddev before projection to the sphere
};

// Classes get random centres on the rho-sphere; every token of a sample is
// its class centre plus Gaussian noise, projected back to the sphere.
std::vector<Sample> two_cluster_dataset(Rng& rng, const ClusterConfig& config);

struct AlternatingConfig {
  EnergySpec spec;  // initial W (single-head elastic or inner product, Helmholtz)
  Matrix e;         // initial d x C head
  double eta = 0.1;
  std::size_t epochs = 50;
};

// Alternating optimization: per epoch, one z step per sample (z_i persists across
// epochs, starting at the token mean), then averaged grad_W and ce_grad_E
// steps. ce[k] and objectives[k] describe the state at the start of epoch k;
// the last entry is the final state.
LoopTrace alternating_optimize(const AlternatingConfig& config, const std::vector<Sample>& data);

// Loop training, repeated for `epochs`: K loop iterations from h0, then one W
// step (mean grad_W over positions at Z^(K)) and one E step (mean CE
// gradient over positions).
LoopTrace loop_train(const LoopConfig& config, const Matrix& h0, const std::vector<Vector>& labels,
                     const Matrix& e0, std::size_t epochs);

}  // namespace energy_attn
