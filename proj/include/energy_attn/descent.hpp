#pragma once

// Optimizers that minimize a global energy directly over z and record a
// trace of every iterate.

#include <cstdint>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "energy_attn/energy.hpp"

namespace energy_attn {

struct Vanilla {
  double eta = 0.01;
};

// p' = beta p + g, z' = z - eta p'
struct Momentum {
  double eta = 0.01;
  double beta = 0.9;
};

// Where the lookahead gradient is taken. `scaled` is z - eta beta p, the
// position the momentum step is about to reach; `literal` is z - beta p,
// which coincides with it only at eta = 1 (the attention-layer setting).
enum class Lookahead { scaled, literal };

// Same as Momentum with g taken at the lookahead point.
struct Nag {
  double eta = 0.01;
  double beta = 0.9;
  Lookahead lookahead = Lookahead::scaled;
};

enum class NewtonMode { exact, taylor1 };

// Per-head Newton step z' = z - (eta/H) sum_h M_h C_h^{-1} (q_h - kbar_h),
// C_h = I - (1/T) sum_i p_i d_i d_i^T, or I + (1/T) sum_i p_i d_i d_i^T for taylor1.
// Elastic Helmholtz specs only.
struct NewtonSubspace {
  double eta = 1.0;
  NewtonMode mode = NewtonMode::exact;
  double epsilon = 0.0;
};

using OptimizerKind = std::variant<Vanilla, Momentum, Nag, NewtonSubspace>;

std::string optimizer_name(const OptimizerKind& opt);
// eta > 0, beta in [0, 1), epsilon >= 0.
void validate_optimizer(const OptimizerKind& opt);

enum class StopReason { converged, max_iters, diverged, singular };
std::string to_string(StopReason reason);

struct DescentStep {
  std::size_t k = 0;
  Vector z;
  double energy = 0.0;
  double grad_norm = 0.0;
};

struct DescentTrace {
  std::vector<DescentStep> steps;  // steps[0] is the initial point
  std::string spec_summary;
  std::string optimizer;
  std::uint64_t seed = 0;
  StopReason stop = StopReason::max_iters;
  // Largest eta = 2^-j found monotone by find_monotone_eta, when requested.
  std::optional<double> monotone_eta;

  std::size_t iterations() const { return steps.empty() ? 0 : steps.size() - 1; }
  const DescentStep& last() const { return steps.back(); }
};

struct DescentOptions {
  std::size_t max_iters = 1000;
  double tol = 1e-8;
  GradConvention convention = GradConvention::strict;
  // Radial rescale to this norm after every step.
  std::optional<double> project_radius;
  std::uint64_t seed = 0;  // recorded only
};

DescentTrace descend(const EnergySpec& spec, const OptimizerKind& opt, const Vector& z0,
                     const Matrix& tokens, const DescentOptions& options = {});

// Halves eta from `start` until `steps` vanilla steps give a non-increasing
// energy (each increase <= 1e-12). Returns nothing below `min_eta`.
std::optional<double> find_monotone_eta(const EnergySpec& spec, const Vector& z0,
                                        const Matrix& tokens, std::size_t steps,
                                        double start = 1.0, double min_eta = 1e-6);

// True when no energy increase exceeds `slack`.
bool is_monotone(const DescentTrace& trace, double slack = 1e-12);

struct ComparisonRow {
  std::string optimizer;
  std::optional<std::size_t> iters_to_tol;  // nothing when the budget ran out
  double final_energy = 0.0;
  StopReason stop = StopReason::max_iters;
};

// One row per optimizer, sorted by iterations (non-converged last), then by
// final energy, then by name.
std::vector<ComparisonRow> compare_optimizers(const EnergySpec& spec, const Vector& z0,
                                              const Matrix& tokens,
                                              const std::vector<OptimizerKind>& opts,
                                              std::size_t budget, double tol);

enum class EnergyFamily { elastic, inner, square_sum };

struct DescentInstance {
  EnergySpec spec;
  Vector z0;
  Matrix tokens;
};

// Gaussian z0 and tokens. One head: W ~ N(0, 1/d). Several heads: W1_h are
// row blocks of a random orthogonal matrix, W2_h ~ N(0, 1/d). square_sum is
// single-head only.
DescentInstance make_descent_instance(Rng& rng, EnergyFamily family, std::size_t dim,
                                      std::size_t tokens, std::size_t heads, double temperature);

}  // namespace energy_attn
