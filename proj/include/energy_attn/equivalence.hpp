#pragma once

// Parameter-tied instances and the checks that an attention forward equals
// one gradient step on the matching energy, plus the free-energy optimality
// and Hessian-structure checks.

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "energy_attn/attention.hpp"
#include "energy_attn/energy.hpp"

namespace energy_attn {

enum class Tying {
  softmax_elastic,   // single head, Helmholtz, tokens on the rho-sphere
  linear_square,     // single head, weighted square sum, no norm constraint
  multi_head_block,  // block-diagonal heads, per-head norms on the rho-sphere
  multi_head_free,   // general heads, no norm constraint
};

std::string to_string(Tying tying);

struct InstanceConfig {
  std::size_t dim = 8;
  std::size_t tokens = 16;
  std::size_t heads = 2;
  double rho = 1.0;
  double eta = 0.1;
  double temperature = 1.0;
  bool gated = false;        // linear_square: gates uniform on [0, 1]
  bool break_tying = false;  // negative control: doubles one value/output map
};

struct TiedInstance {
  Tying tying = Tying::softmax_elastic;
  EnergySpec spec;
  AttentionParams params;
  Vector z;
  Matrix tokens;
  Vector gates;
  double rho = 1.0;
  double eta = 0.1;
};

// Throws "cannot satisfy norm constraints" when 100 draws of W all have
// condition number >= 1e3.
TiedInstance make_tied_instance(Rng& rng, Tying tying, const InstanceConfig& config);

// max |attention(z) - (z - eta * grad)| for one instance.
double equivalence_error(const TiedInstance& inst);

struct VerificationReport {
  std::string claim;
  std::size_t instances = 0;
  double max_abs_error = 0.0;
  double threshold = 0.0;
  bool pass = false;
  std::optional<std::uint64_t> witness;  // seed of the first failing (or found) instance
  std::string note;
};

std::uint64_t instance_seed(std::uint64_t base, std::size_t index);

struct SweepConfig {
  std::uint64_t seed = 0;
  std::size_t instances = 100;
  InstanceConfig instance;
};

inline constexpr double kEquivalenceThreshold = 1e-10;
inline constexpr double kEigenThreshold = 1e-8;
inline constexpr double kLemma1Threshold = 1e-9;
inline constexpr double kHessianFdThreshold = 1e-4;

VerificationReport verify_tying(Tying tying, const SweepConfig& config);
VerificationReport verify_theorem1(const SweepConfig& config);
// Ungated or gated per config.instance.gated.
VerificationReport verify_theorem2(const SweepConfig& config);
// Block instances (claim "thm3") and general instances ("thm3.general").
std::vector<VerificationReport> verify_theorem3(const SweepConfig& config);

// F(p) >= F* - 1e-9 over a simplex grid (grid_res > 0, N <= 8) and over
// Dirichlet draws; the grid argmin must lie within one cell of the Boltzmann
// weights. The error is max(worst violation, argmin distance beyond one cell).
VerificationReport verify_lemma1(const EnergySpec& spec, const Vector& z, const Matrix& tokens,
                                 double grid_res, std::size_t dirichlet_draws,
                                 std::uint64_t seed = 0);

// lemma1.grid (N = 3, grid resolution 0.01) and lemma1.dirichlet (N = 8,
// 10^4 draws), each over config.instances single-head elastic instances with
// z and tokens on the rho-sphere.
std::vector<VerificationReport> verify_lemma1_suite(const SweepConfig& config);

struct Lemma2Result {
  double nsd_max_eig = 0.0;
  double psd_min_eig = 0.0;
  double upper_max_eig = 0.0;
  double full_min_eig = 0.0;
  double full_max_eig = 0.0;
  double hessian_fd_error = 0.0;
  // ||sum_h sum_i p_ih W1_h^T (W1_h z - W2_h h_i)|| at a constructed
  // stationary point; nothing when the construction did not converge.
  std::optional<double> stationary_residual;

  bool indefinite() const {
    return full_min_eig < -kEigenThreshold && full_max_eig > kEigenThreshold;
  }
};

// Multi-head elastic Helmholtz spec.
Lemma2Result verify_lemma2(const EnergySpec& spec, const Vector& z, const Matrix& tokens);

// Random per-head elastic instance with every ||W1_h z||, ||W2_h h_i|| <= rho.
struct Lemma2Instance {
  EnergySpec spec;
  Vector z;
  Matrix tokens;
};
Lemma2Instance make_lemma2_instance(Rng& rng, const InstanceConfig& config);

// Sub-claims lemma2.{nsd, psd, upper_concave, stationary, hessian_fd} on the
// configured instances, and lemma2.nonconvex_witness on the same instances at
// temperature witness_temperature.
std::vector<VerificationReport> verify_lemma2_suite(const SweepConfig& config,
                                                    double witness_temperature);

struct NewtonTaylorSweep {
  std::vector<double> multipliers;
  double max_deviation_sq = 0.0;     // max_h,i ||d_i||^2
  std::vector<double> relative_diff;  // per multiplier
};

// mha2nd_exact against tied mha2nd1st with the bias temperature of every head
// set to multiplier * max ||d_i||^2. The difference is measured on the update
// (output - z), relative to the exact update.
NewtonTaylorSweep newton_taylor_sweep(std::uint64_t seed, const InstanceConfig& config,
                                      const std::vector<double>& multipliers);

// newton_taylor.monotone (largest step-to-step increase, threshold 1e-12) and
// newton_taylor.fidelity (relative difference at the 100x point, threshold 1e-2).
std::vector<VerificationReport> verify_newton_taylor(const SweepConfig& config);

}  // namespace energy_attn
