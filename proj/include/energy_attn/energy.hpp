#pragma once

// Pairwise energies E_i(z, h_i), global energies (Helmholtz free energy and
// the weighted square sum), Boltzmann weights, and analytic derivatives.
//
// Token sets are d x N matrices (one token per column). Multi-head kinds
// carry one (W1, W2) pair per head, each d_h x d.

#include <optional>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include "energy_attn/numkit.hpp"

namespace energy_attn {

enum class FeatureMap {
  identity,
  exponential,  // elementwise exp(x), a fixed positive map
};

// E = 1/2 ||z - W h||^2
struct Elastic {
  Matrix w;
};

// E = -z^T W h
struct InnerProduct {
  Matrix w;
};

// E = -phi(W_Q z)^T phi(W_K h)
struct KernelInner {
  Matrix w_q;
  Matrix w_k;
  FeatureMap phi = FeatureMap::exponential;
};

// E_h = 1/2 ||W1_h z - W2_h h||^2
struct PerHeadElastic {
  std::vector<Matrix> w1;
  std::vector<Matrix> w2;
};

// E_h = -(W1_h z)^T (W2_h h)
struct PerHeadInner {
  std::vector<Matrix> w1;
  std::vector<Matrix> w2;
};

using PairEnergyKind = std::variant<Elastic, InnerProduct, KernelInner, PerHeadElastic, PerHeadInner>;

// F* = -(T/H) sum_h log sum_i exp(-E_{i,h} / T)
struct Helmholtz {
  double temperature = 1.0;
};

// F* = -(T/2) sum_i gamma_i E_i^2; empty gates mean all ones.
struct WeightedSquareSum {
  double temperature = 1.0;
  Vector gates;
};

using GlobalEnergyKind = std::variant<Helmholtz, WeightedSquareSum>;

struct EnergySpec {
  PairEnergyKind pair;
  GlobalEnergyKind global;
  std::size_t heads = 1;

  // Throws energy_attn::error on a malformed spec.
  void validate() const;
  std::size_t dim() const;
  double temperature() const;
  bool is_helmholtz() const { return std::holds_alternative<Helmholtz>(global); }
  bool is_multi_head() const;
  std::string summary() const;
};

EnergySpec make_spec(PairEnergyKind pair, GlobalEnergyKind global);

// Which scaling grad_z uses. `strict` is the exact derivative of the energy
// scalar. `temperature_scaled` multiplies inner-product Helmholtz gradients by T, the
// convention under which W_V = eta * T * W ties attention to one GD step.
enum class GradConvention { strict, temperature_scaled };

double pair_energy(const EnergySpec& spec, const Vector& z, const Vector& h, std::size_t head = 0);
Vector pair_energies(const EnergySpec& spec, const Vector& z, const Matrix& tokens,
                     std::size_t head = 0);

// U - T S with U = sum p_i E_i, S = -sum p_i log p_i (0 log 0 = 0).
// Single-head Helmholtz specs only.
double free_energy(const EnergySpec& spec, const Vector& z, const Matrix& tokens, const Vector& p);

Vector boltzmann_weights(const EnergySpec& spec, const Vector& z, const Matrix& tokens,
                         std::size_t head = 0);

double helmholtz_free_energy(const EnergySpec& spec, const Vector& z, const Matrix& tokens);
// Free energy of one head, -T log Z_h (not divided by H).
double head_free_energy(const EnergySpec& spec, const Vector& z, const Matrix& tokens,
                        std::size_t head);

// The inner-product counterpart of an elastic spec: Elastic(W) -> InnerProduct(W),
// PerHeadElastic -> PerHeadInner. Inner-product specs map to themselves.
EnergySpec upper_bound_spec(const EnergySpec& spec);

// F~* = -(T/H) sum_h log sum_i exp(z^T W1_h^T W2_h h_i / T)
double upper_bound_energy(const EnergySpec& spec, const Vector& z, const Matrix& tokens);

double square_sum_energy(const EnergySpec& spec, const Vector& z, const Matrix& tokens);

// Dispatches on the global kind.
double global_energy(const EnergySpec& spec, const Vector& z, const Matrix& tokens);

Vector grad_z(const EnergySpec& spec, const Vector& z, const Matrix& tokens,
              GradConvention convention = GradConvention::strict);
// Gradient of head_free_energy (strict).
Vector head_grad_z(const EnergySpec& spec, const Vector& z, const Matrix& tokens, std::size_t head);

struct ValueGrad {
  double value = 0.0;
  Vector grad;
};

// global_energy and grad_z from one evaluation of the pair energies.
ValueGrad energy_and_grad(const EnergySpec& spec, const Vector& z, const Matrix& tokens,
                          GradConvention convention = GradConvention::strict);

// Single-head Elastic or InnerProduct Helmholtz specs only.
Matrix grad_w(const EnergySpec& spec, const Vector& z, const Matrix& tokens);

struct HessianSplit {
  Matrix psd_part;
  Matrix nsd_part;
};

Matrix hessian_z(const EnergySpec& spec, const Vector& z, const Matrix& tokens);
HessianSplit hessian_split(const EnergySpec& spec, const Vector& z, const Matrix& tokens);
// Hessian of head_free_energy.
Matrix head_hessian_z(const EnergySpec& spec, const Vector& z, const Matrix& tokens,
                      std::size_t head);

struct StationaryOptions {
  double damping = 0.5;
  int max_iters = 500;
  double residual_tol = 1e-10;
};

// Damped fixed-point iteration z <- (1-a) z + a A^{-1} sum_h W1_h^T kbar_h(z),
// A = sum_h W1_h^T W1_h. Elastic Helmholtz specs only. Returns nothing when
// the step residual does not fall below residual_tol.
std::optional<Vector> find_stationary_point(const EnergySpec& spec, const Vector& z0,
                                            const Matrix& tokens,
                                            const StationaryOptions& options = {});

}  // namespace energy_attn
