#include "energy_attn/numkit.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <limits>
#include <numbers>
#include <thread>

namespace energy_attn {

namespace {

void require_finite(std::span<const double> values, const char* what) {
  for (double v : values) {
    if (!std::isfinite(v)) throw error(std::string(what) + ": non-finite entry");
  }
}

void require_same_dim(const Vector& a, const Vector& b, const char* op) {
  if (a.dim() != b.dim()) {
    throw dimension_error(std::string(op) + ": dimension mismatch " + std::to_string(a.dim()) +
                          " vs " + std::to_string(b.dim()));
  }
}

void require_same_shape(const Matrix& a, const Matrix& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw dimension_error(std::string(op) + ": shape mismatch");
  }
}

}  // namespace

// ---------------------------------------------------------------------------
// Vector

Vector::Vector(std::size_t dim, double fill) : data_(dim, fill) {}

Vector::Vector(std::initializer_list<double> values) : data_(values) {
  require_finite(data_, "Vector");
}

Vector::Vector(std::vector<double> values) : data_(std::move(values)) {
  require_finite(data_, "Vector");
}

Vector& Vector::operator+=(const Vector& other) {
  require_same_dim(*this, other, "vector +");
  for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += other.data_[i];
  return *this;
}

Vector& Vector::operator-=(const Vector& other) {
  require_same_dim(*this, other, "vector -");
  for (std::size_t i = 0; i < data_.size(); ++i) data_[i] -= other.data_[i];
  return *this;
}

Vector& Vector::operator*=(double s) noexcept {
  for (double& v : data_) v *= s;
  return *this;
}

Vector operator+(Vector a, const Vector& b) { return a += b; }
Vector operator-(Vector a, const Vector& b) { return a -= b; }
Vector operator-(Vector a) { return a *= -1.0; }
Vector operator*(double s, Vector a) { return a *= s; }
Vector operator*(Vector a, double s) { return a *= s; }

double dot(const Vector& a, const Vector& b) {
  require_same_dim(a, b, "dot");
  double acc = 0.0;
  for (std::size_t i = 0; i < a.dim(); ++i) acc += a[i] * b[i];
  return acc;
}

double norm(const Vector& v) { return std::sqrt(dot(v, v)); }

double norm_inf(const Vector& v) {
  double m = 0.0;
  for (double x : v) m = std::max(m, std::abs(x));
  return m;
}

double max_abs_diff(const Vector& a, const Vector& b) {
  require_same_dim(a, b, "max_abs_diff");
  double m = 0.0;
  for (std::size_t i = 0; i < a.dim(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

void axpy(double scale, const Vector& x, Vector& y) {
  require_same_dim(x, y, "axpy");
  for (std::size_t i = 0; i < x.dim(); ++i) y[i] += scale * x[i];
}

bool is_finite(const Vector& v) noexcept {
  return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
}

// ---------------------------------------------------------------------------
// Matrix

Matrix::Matrix(std::size_t rows, std::size_t cols, double fill)
    : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

Matrix::Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
  if (data_.size() != rows * cols) throw dimension_error("Matrix: data length != rows * cols");
  require_finite(data_, "Matrix");
}

Matrix Matrix::identity(std::size_t n) {
  Matrix m(n, n);
  for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
  return m;
}

Matrix Matrix::diagonal(const Vector& diag) {
  Matrix m(diag.dim(), diag.dim());
  for (std::size_t i = 0; i < diag.dim(); ++i) m(i, i) = diag[i];
  return m;
}

Matrix Matrix::from_rows(std::initializer_list<std::initializer_list<double>> rows) {
  const std::size_t r = rows.size();
  const std::size_t c = r == 0 ? 0 : rows.begin()->size();
  std::vector<double> data;
  data.reserve(r * c);
  for (const auto& row : rows) {
    if (row.size() != c) throw dimension_error("Matrix::from_rows: ragged rows");
    data.insert(data.end(), row.begin(), row.end());
  }
  return Matrix(r, c, std::move(data));
}

Matrix Matrix::from_columns(const std::vector<Vector>& columns) {
  if (columns.empty()) return {};
  Matrix m(columns.front().dim(), columns.size());
  for (std::size_t j = 0; j < columns.size(); ++j) m.set_column(j, columns[j]);
  return m;
}

Vector Matrix::column(std::size_t c) const {
  Vector v(rows_);
  for (std::size_t r = 0; r < rows_; ++r) v[r] = (*this)(r, c);
  return v;
}

void Matrix::set_column(std::size_t c, const Vector& v) {
  if (v.dim() != rows_) throw dimension_error("set_column: dimension mismatch");
  for (std::size_t r = 0; r < rows_; ++r) (*this)(r, c) = v[r];
}

Matrix Matrix::leading_columns(std::size_t n) const {
  if (n > cols_) throw dimension_error("leading_columns: n exceeds column count");
  Matrix m(rows_, n);
  for (std::size_t r = 0; r < rows_; ++r) {
    for (std::size_t c = 0; c < n; ++c) m(r, c) = (*this)(r, c);
  }
  return m;
}

Matrix Matrix::transpose() const {
  Matrix t(cols_, rows_);
  for (std::size_t r = 0; r < rows_; ++r) {
    for (std::size_t c = 0; c < cols_; ++c) t(c, r) = (*this)(r, c);
  }
  return t;
}

Matrix& Matrix::operator+=(const Matrix& other) {
  require_same_shape(*this, other, "matrix +");
  for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += other.data_[i];
  return *this;
}

Matrix& Matrix::operator-=(const Matrix& other) {
  require_same_shape(*this, other, "matrix -");
  for (std::size_t i = 0; i < data_.size(); ++i) data_[i] -= other.data_[i];
  return *this;
}

Matrix& Matrix::operator*=(double s) noexcept {
  for (double& v : data_) v *= s;
  return *this;
}

Matrix operator+(Matrix a, const Matrix& b) { return a += b; }
Matrix operator-(Matrix a, const Matrix& b) { return a -= b; }
Matrix operator*(double s, Matrix a) { return a *= s; }

Matrix operator*(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.rows()) throw dimension_error("matmul: inner dimension mismatch");
  Matrix out(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    auto out_row = out.row(i);
    for (std::size_t k = 0; k < a.cols(); ++k) {
      const double aik = a(i, k);
      if (aik == 0.0) continue;
      auto b_row = b.row(k);
      for (std::size_t j = 0; j < b.cols(); ++j) out_row[j] += aik * b_row[j];
    }
  }
  return out;
}

Vector operator*(const Matrix& a, const Vector& x) {
  if (a.cols() != x.dim()) throw dimension_error("matvec: dimension mismatch");
  Vector y(a.rows());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    auto r = a.row(i);
    double acc = 0.0;
    for (std::size_t j = 0; j < r.size(); ++j) acc += r[j] * x[j];
    y[i] = acc;
  }
  return y;
}

Vector transpose_times(const Matrix& a, const Vector& x) {
  if (a.rows() != x.dim()) throw dimension_error("transpose_times: dimension mismatch");
  Vector y(a.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    auto r = a.row(i);
    const double xi = x[i];
    for (std::size_t j = 0; j < r.size(); ++j) y[j] += r[j] * xi;
  }
  return y;
}

double max_abs(const Matrix& m) {
  double v = 0.0;
  for (double x : m.values()) v = std::max(v, std::abs(x));
  return v;
}

double max_abs_diff(const Matrix& a, const Matrix& b) {
  require_same_shape(a, b, "max_abs_diff");
  double m = 0.0;
  for (std::size_t i = 0; i < a.data().size(); ++i) {
    m = std::max(m, std::abs(a.data()[i] - b.data()[i]));
  }
  return m;
}

double trace(const Matrix& m) {
  if (!m.is_square()) throw dimension_error("trace: non-square matrix");
  double t = 0.0;
  for (std::size_t i = 0; i < m.rows(); ++i) t += m(i, i);
  return t;
}

Matrix outer(const Vector& a, const Vector& b) {
  Matrix m(a.dim(), b.dim());
  add_outer(m, a, b);
  return m;
}

void add_outer(Matrix& m, const Vector& a, const Vector& b, double scale) {
  if (m.rows() != a.dim() || m.cols() != b.dim()) throw dimension_error("add_outer: shape mismatch");
  for (std::size_t i = 0; i < a.dim(); ++i) {
    const double ai = scale * a[i];
    auto r = m.row(i);
    for (std::size_t j = 0; j < b.dim(); ++j) r[j] += ai * b[j];
  }
}

Matrix symmetrize(const Matrix& m) {
  if (!m.is_square()) throw dimension_error("symmetrize: non-square matrix");
  Matrix s(m.rows(), m.cols());
  for (std::size_t i = 0; i < m.rows(); ++i) {
    for (std::size_t j = 0; j < m.cols(); ++j) s(i, j) = 0.5 * (m(i, j) + m(j, i));
  }
  return s;
}

bool is_finite(const Matrix& m) noexcept {
  return std::all_of(m.values().begin(), m.values().end(),
                     [](double x) { return std::isfinite(x); });
}

Matrix tokens_from_rows(const Matrix& n_by_d) { return n_by_d.transpose(); }

// ---------------------------------------------------------------------------
// Reductions

double logsumexp(const Vector& values) {
  if (values.empty()) throw error("empty reduction");
  const double m = *std::max_element(values.begin(), values.end());
  if (!std::isfinite(m)) throw error("logsumexp: non-finite input");
  if (values.dim() == 1) return values[0];
  double acc = 0.0;
  for (double v : values) acc += std::exp(v - m);
  return m + std::log(acc);
}

Vector softmax(const Vector& values) {
  if (values.empty()) throw error("empty reduction");
  const double m = *std::max_element(values.begin(), values.end());
  if (!std::isfinite(m)) throw error("softmax: non-finite input");
  Vector p(values.dim());
  double acc = 0.0;
  for (std::size_t i = 0; i < values.dim(); ++i) {
    p[i] = std::exp(values[i] - m);
    acc += p[i];
  }
  p *= 1.0 / acc;
  return p;
}

// ---------------------------------------------------------------------------
// Cyclic Jacobi

SymEigen sym_eigen(const Matrix& input) {
  if (!input.is_square()) throw dimension_error("sym_eigvals: non-square matrix");
  const std::size_t n = input.rows();
  const double scale = std::max(1.0, max_abs(input));
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      if (std::abs(input(i, j) - input(j, i)) > kSymmetryTolerance * scale) {
        throw error("sym_eigvals: matrix is not symmetric");
      }
    }
  }

  Matrix a = symmetrize(input);
  Matrix v = Matrix::identity(n);

  auto off_norm = [&] {
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = i + 1; j < n; ++j) s += 2.0 * a(i, j) * a(i, j);
    }
    return std::sqrt(s);
  };

  int sweep = 0;
  while (sweep < kJacobiMaxSweeps && off_norm() >= kJacobiOffTolerance) {
    ++sweep;
    for (std::size_t p = 0; p + 1 < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        const double apq = a(p, q);
        if (apq == 0.0) continue;
        const double theta = (a(q, q) - a(p, p)) / (2.0 * apq);
        const double t = (theta >= 0.0 ? 1.0 : -1.0) /
                         (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0);
        const double s = t * c;

        for (std::size_t k = 0; k < n; ++k) {
          const double akp = a(k, p);
          const double akq = a(k, q);
          a(k, p) = c * akp - s * akq;
          a(k, q) = s * akp + c * akq;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double apk = a(p, k);
          const double aqk = a(q, k);
          a(p, k) = c * apk - s * aqk;
          a(q, k) = s * apk + c * aqk;
        }
        a(p, q) = 0.0;
        a(q, p) = 0.0;
        for (std::size_t k = 0; k < n; ++k) {
          const double vkp = v(k, p);
          const double vkq = v(k, q);
          v(k, p) = c * vkp - s * vkq;
          v(k, q) = s * vkp + c * vkq;
        }
      }
    }
  }

  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t x, std::size_t y) { return a(x, x) < a(y, y); });

  SymEigen out{Vector(n), Matrix(n, n), sweep};
  for (std::size_t j = 0; j < n; ++j) {
    out.values[j] = a(order[j], order[j]);
    for (std::size_t k = 0; k < n; ++k) out.vectors(k, j) = v(k, order[j]);
  }
  return out;
}

Vector sym_eigvals(const Matrix& a) { return sym_eigen(a).values; }

// ---------------------------------------------------------------------------
// Inverses

Matrix solve_inverse(const Matrix& input) {
  if (!input.is_square()) throw dimension_error("solve_inverse: non-square matrix");
  const std::size_t n = input.rows();
  Matrix a = input;
  Matrix inv = Matrix::identity(n);

  for (std::size_t col = 0; col < n; ++col) {
    std::size_t pivot = col;
    for (std::size_t r = col + 1; r < n; ++r) {
      if (std::abs(a(r, col)) > std::abs(a(pivot, col))) pivot = r;
    }
    if (std::abs(a(pivot, col)) < kPivotTolerance) throw error("singular matrix");
    if (pivot != col) {
      for (std::size_t c = 0; c < n; ++c) {
        std::swap(a(pivot, c), a(col, c));
        std::swap(inv(pivot, c), inv(col, c));
      }
    }
    const double d = 1.0 / a(col, col);
    for (std::size_t c = 0; c < n; ++c) {
      a(col, c) *= d;
      inv(col, c) *= d;
    }
    for (std::size_t r = 0; r < n; ++r) {
      if (r == col) continue;
      const double f = a(r, col);
      if (f == 0.0) continue;
      for (std::size_t c = 0; c < n; ++c) {
        a(r, c) -= f * a(col, c);
        inv(r, c) -= f * inv(col, c);
      }
    }
  }
  return inv;
}

Vector solve(const Matrix& a, const Vector& b) { return solve_inverse(a) * b; }

Matrix range_space_pinv(const Matrix& w) {
  if (w.rows() > w.cols()) throw dimension_error("range_space_pinv: W must be wide (rows <= cols)");
  const Matrix gram = w * w.transpose();
  Matrix gram_inv;
  try {
    gram_inv = solve_inverse(gram);
  } catch (const dimension_error&) {
    throw;
  } catch (const error&) {
    throw error("rank-deficient rows");
  }
  return w.transpose() * gram_inv;
}

// ---------------------------------------------------------------------------
// Finite differences

Vector fd_gradient(const ScalarField& f, const Vector& x, double h) {
  Vector g(x.dim());
  Vector probe = x;
  for (std::size_t j = 0; j < x.dim(); ++j) {
    probe[j] = x[j] + h;
    const double fp = f(probe);
    probe[j] = x[j] - h;
    const double fm = f(probe);
    probe[j] = x[j];
    if (!std::isfinite(fp) || !std::isfinite(fm)) throw error("fd_gradient: non-finite evaluation");
    g[j] = (fp - fm) / (2.0 * h);
  }
  return g;
}

Matrix fd_gradient(const MatrixScalarField& f, const Matrix& x, double h) {
  Matrix g(x.rows(), x.cols());
  Matrix probe = x;
  for (std::size_t r = 0; r < x.rows(); ++r) {
    for (std::size_t c = 0; c < x.cols(); ++c) {
      probe(r, c) = x(r, c) + h;
      const double fp = f(probe);
      probe(r, c) = x(r, c) - h;
      const double fm = f(probe);
      probe(r, c) = x(r, c);
      if (!std::isfinite(fp) || !std::isfinite(fm)) {
        throw error("fd_gradient: non-finite evaluation");
      }
      g(r, c) = (fp - fm) / (2.0 * h);
    }
  }
  return g;
}

Matrix fd_jacobian(const VectorField& g, const Vector& x, double h) {
  Matrix jac;
  Vector probe = x;
  for (std::size_t j = 0; j < x.dim(); ++j) {
    probe[j] = x[j] + h;
    const Vector gp = g(probe);
    probe[j] = x[j] - h;
    const Vector gm = g(probe);
    probe[j] = x[j];
    if (!is_finite(gp) || !is_finite(gm)) throw error("fd_jacobian: non-finite evaluation");
    if (j == 0) jac = Matrix(gp.dim(), x.dim());
    for (std::size_t i = 0; i < gp.dim(); ++i) jac(i, j) = (gp[i] - gm[i]) / (2.0 * h);
  }
  return jac;
}

double scaled_error(const Vector& a, const Vector& b) {
  return max_abs_diff(a, b) / std::max(1.0, norm_inf(b));
}

double scaled_error(const Matrix& a, const Matrix& b) {
  return max_abs_diff(a, b) / std::max(1.0, max_abs(b));
}

// ---------------------------------------------------------------------------
// Rng

namespace {

std::uint64_t splitmix64(std::uint64_t& x) noexcept {
  std::uint64_t z = (x += 0x9e3779b97f4a7c15ULL);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

constexpr std::uint64_t rotl(std::uint64_t x, int k) noexcept { return (x << k) | (x >> (64 - k)); }

}  // namespace

Rng::Rng(std::uint64_t seed) {
  std::uint64_t x = seed;
  for (auto& s : s_) s = splitmix64(x);
}

std::uint64_t Rng::next_u64() noexcept {
  const std::uint64_t result = rotl(s_[1] * 5, 7) * 9;
  const std::uint64_t t = s_[1] << 17;
  s_[2] ^= s_[0];
  s_[3] ^= s_[1];
  s_[1] ^= s_[2];
  s_[0] ^= s_[3];
  s_[2] ^= t;
  s_[3] = rotl(s_[3], 45);
  return result;
}

double Rng::uniform() noexcept { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

double Rng::uniform(double lo, double hi) noexcept { return lo + (hi - lo) * uniform(); }

double Rng::normal() noexcept {
  if (has_spare_) {
    has_spare_ = false;
    return spare_;
  }
  // Box-Muller; 1 - u keeps the log argument in (0, 1].
  const double u1 = 1.0 - uniform();
  const double u2 = uniform();
  const double r = std::sqrt(-2.0 * std::log(u1));
  const double theta = 2.0 * std::numbers::pi * u2;
  spare_ = r * std::sin(theta);
  has_spare_ = true;
  return r * std::cos(theta);
}

Vector Rng::normal_vector(std::size_t dim, double stddev) {
  Vector v(dim);
  for (double& x : v) x = stddev * normal();
  return v;
}

Matrix Rng::normal_matrix(std::size_t rows, std::size_t cols, double stddev) {
  Matrix m(rows, cols);
  for (std::size_t r = 0; r < rows; ++r) {
    for (double& x : m.row(r)) x = stddev * normal();
  }
  return m;
}

double Rng::gamma(double shape) noexcept {
  if (shape == 1.0) return -std::log(1.0 - uniform());
  if (shape < 1.0) {
    const double u = 1.0 - uniform();
    return gamma(shape + 1.0) * std::pow(u, 1.0 / shape);
  }
  // Marsaglia-Tsang
  const double d = shape - 1.0 / 3.0;
  const double c = 1.0 / std::sqrt(9.0 * d);
  for (;;) {
    double x = 0.0;
    double v = 0.0;
    do {
      x = normal();
      v = 1.0 + c * x;
    } while (v <= 0.0);
    v = v * v * v;
    const double u = 1.0 - uniform();
    if (std::log(u) < 0.5 * x * x + d - d * v + d * std::log(v)) return d * v;
  }
}

Vector Rng::dirichlet(std::size_t n, double alpha) {
  if (n == 0) throw error("dirichlet: empty simplex");
  Vector p(n);
  double total = 0.0;
  for (double& x : p) {
    x = gamma(alpha);
    total += x;
  }
  p *= 1.0 / total;
  return p;
}

Vector sample_hypersphere(Rng& rng, std::size_t dim, double rho) {
  if (dim == 0) throw dimension_error("sample_hypersphere: dim must be >= 1");
  if (!(rho > 0.0)) throw error("sample_hypersphere: rho must be positive");
  for (;;) {
    Vector v = rng.normal_vector(dim);
    const double n = norm(v);
    if (n < 1e-12) continue;
    v *= rho / n;
    return v;
  }
}

Matrix random_orthogonal(Rng& rng, std::size_t n) {
  if (n == 0) throw dimension_error("random_orthogonal: n must be >= 1");
  std::vector<Vector> basis;
  basis.reserve(n);
  while (basis.size() < n) {
    Vector v = rng.normal_vector(n);
    // Two passes of modified Gram-Schmidt keep the basis orthogonal to ~1e-15.
    for (int pass = 0; pass < 2; ++pass) {
      for (const Vector& b : basis) axpy(-dot(b, v), b, v);
    }
    const double len = norm(v);
    if (len < 1e-8) continue;
    v *= 1.0 / len;
    basis.push_back(std::move(v));
  }
  return Matrix::from_columns(basis).transpose();
}

std::size_t thread_budget() {
  std::size_t requested = 0;
  if (const char* env = std::getenv("ENERGY_ATTN_THREADS")) {
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (end != env && v > 0) requested = static_cast<std::size_t>(v);
  }
  if (requested == 0) requested = std::max(1u, std::thread::hardware_concurrency());
  return requested;
}

}  // namespace energy_attn
