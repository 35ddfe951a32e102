#pragma once

// Dense linear algebra and numerical utilities shared by every other module.
//
// Conventions: 64-bit floats, row-major storage. Token sets are stored as
// d x N matrices with one token per column.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace energy_attn {

class error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class dimension_error : public error {
 public:
  using error::error;
};

class Vector {
 public:
  Vector() = default;
  explicit Vector(std::size_t dim, double fill = 0.0);
  Vector(std::initializer_list<double> values);
  // Throws if any entry is NaN or infinite.
  explicit Vector(std::vector<double> values);

  std::size_t dim() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  double& operator[](std::size_t i) noexcept { return data_[i]; }
  double operator[](std::size_t i) const noexcept { return data_[i]; }

  std::span<double> values() noexcept { return data_; }
  std::span<const double> values() const noexcept { return data_; }
  const std::vector<double>& data() const noexcept { return data_; }

  auto begin() noexcept { return data_.begin(); }
  auto end() noexcept { return data_.end(); }
  auto begin() const noexcept { return data_.begin(); }
  auto end() const noexcept { return data_.end(); }

  Vector& operator+=(const Vector& other);
  Vector& operator-=(const Vector& other);
  Vector& operator*=(double s) noexcept;

  bool operator==(const Vector&) const = default;

 private:
  std::vector<double> data_;
};

class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0);
  // Row-major data; throws on size mismatch or non-finite entries.
  Matrix(std::size_t rows, std::size_t cols, std::vector<double> data);

  static Matrix identity(std::size_t n);
  static Matrix diagonal(const Vector& diag);
  static Matrix from_rows(std::initializer_list<std::initializer_list<double>> rows);
  static Matrix from_columns(const std::vector<Vector>& columns);

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  bool is_square() const noexcept { return rows_ == cols_; }

  double& operator()(std::size_t r, std::size_t c) noexcept { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const noexcept { return data_[r * cols_ + c]; }

  std::span<double> row(std::size_t r) noexcept { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const noexcept {
    return {data_.data() + r * cols_, cols_};
  }
  Vector column(std::size_t c) const;
  void set_column(std::size_t c, const Vector& v);
  // First n columns (the causal prefix of a token matrix).
  Matrix leading_columns(std::size_t n) const;

  std::span<const double> values() const noexcept { return data_; }
  const std::vector<double>& data() const noexcept { return data_; }

  Matrix transpose() const;

  Matrix& operator+=(const Matrix& other);
  Matrix& operator-=(const Matrix& other);
  Matrix& operator*=(double s) noexcept;

  bool operator==(const Matrix&) const = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

Vector operator+(Vector a, const Vector& b);
Vector operator-(Vector a, const Vector& b);
Vector operator-(Vector a);
Vector operator*(double s, Vector a);
Vector operator*(Vector a, double s);

Matrix operator+(Matrix a, const Matrix& b);
Matrix operator-(Matrix a, const Matrix& b);
Matrix operator*(double s, Matrix a);
Matrix operator*(const Matrix& a, const Matrix& b);
Vector operator*(const Matrix& a, const Vector& x);

// a^T x without materializing the transpose.
Vector transpose_times(const Matrix& a, const Vector& x);

double dot(const Vector& a, const Vector& b);
double norm(const Vector& v);
double norm_inf(const Vector& v);
double max_abs(const Matrix& m);
double max_abs_diff(const Vector& a, const Vector& b);
double max_abs_diff(const Matrix& a, const Matrix& b);
double trace(const Matrix& m);

Matrix outer(const Vector& a, const Vector& b);
// m += scale * a b^T
void add_outer(Matrix& m, const Vector& a, const Vector& b, double scale = 1.0);
// y += scale * x
void axpy(double scale, const Vector& x, Vector& y);

Matrix symmetrize(const Matrix& m);
bool is_finite(const Vector& v) noexcept;
bool is_finite(const Matrix& m) noexcept;

// Converts N x d external data (one token per row) to the d x N convention.
Matrix tokens_from_rows(const Matrix& n_by_d);

// ---------------------------------------------------------------------------
// Reductions

double logsumexp(const Vector& values);
Vector softmax(const Vector& values);

// ---------------------------------------------------------------------------
// Symmetric eigensolver (cyclic Jacobi).

struct SymEigen {
  Vector values;   // ascending
  Matrix vectors;  // column j is the eigenvector of values[j]
  int sweeps = 0;
};

inline constexpr double kJacobiOffTolerance = 1e-12;
inline constexpr int kJacobiMaxSweeps = 100;
inline constexpr double kSymmetryTolerance = 1e-10;

SymEigen sym_eigen(const Matrix& a);
Vector sym_eigvals(const Matrix& a);

// ---------------------------------------------------------------------------
// Inverses

inline constexpr double kPivotTolerance = 1e-12;

// Gauss-Jordan with partial pivoting. Throws "singular matrix".
Matrix solve_inverse(const Matrix& a);
Vector solve(const Matrix& a, const Vector& b);

// W^T (W W^T)^{-1} for a wide (rows <= cols) full-row-rank W.
// Throws "rank-deficient rows" when W W^T is singular.
Matrix range_space_pinv(const Matrix& w);

// ---------------------------------------------------------------------------
// Finite differences

inline constexpr double kDefaultFdStep = 1e-5;

using ScalarField = std::function<double(const Vector&)>;
using MatrixScalarField = std::function<double(const Matrix&)>;
using VectorField = std::function<Vector(const Vector&)>;

Vector fd_gradient(const ScalarField& f, const Vector& x, double h = kDefaultFdStep);
// Entrywise central differences over a matrix argument.
Matrix fd_gradient(const MatrixScalarField& f, const Matrix& x, double h = kDefaultFdStep);
// Column j holds the central difference of g along e_j.
Matrix fd_jacobian(const VectorField& g, const Vector& x, double h = kDefaultFdStep);

// max|a - b| / max(1, max|b|): relative for O(1)+ magnitudes, absolute below.
double scaled_error(const Vector& a, const Vector& b);
double scaled_error(const Matrix& a, const Matrix& b);

// ---------------------------------------------------------------------------
// Seeded randomness: splitmix64 seeding, xoshiro256** stream.

class Rng {
 public:
  explicit Rng(std::uint64_t seed);

  std::uint64_t next_u64() noexcept;
  // Uniform on [0, 1) with 53 random bits.
  double uniform() noexcept;
  double uniform(double lo, double hi) noexcept;
  double normal() noexcept;
  Vector normal_vector(std::size_t dim, double stddev = 1.0);
  Matrix normal_matrix(std::size_t rows, std::size_t cols, double stddev = 1.0);
  // Symmetric Dirichlet(alpha) draw on the (n-1)-simplex.
  Vector dirichlet(std::size_t n, double alpha = 1.0);

 private:
  double gamma(double shape) noexcept;

  std::uint64_t s_[4];
  bool has_spare_ = false;
  double spare_ = 0.0;
};

Vector sample_hypersphere(Rng& rng, std::size_t dim, double rho);

// Haar-ish orthogonal matrix from Gram-Schmidt on a Gaussian draw.
Matrix random_orthogonal(Rng& rng, std::size_t n);

// ---------------------------------------------------------------------------
// Parallel evaluation over independent instances.

// Worker cap from ENERGY_ATTN_THREADS (0 or unset = hardware concurrency).
std::size_t thread_budget();

// Runs fn(i) for i in [0, n) across up to thread_budget() threads. Results
// are returned in index order so reductions stay deterministic.
template <typename Fn>
auto parallel_map(std::size_t n, Fn&& fn) -> std::vector<decltype(fn(std::size_t{}))>;

}  // namespace energy_attn

#include "energy_attn/detail/parallel_map.hpp"
