#pragma once

// Reference computations used by the tests. None of them call into the
// library's own reduction, gradient or inverse code paths.

#include <algorithm>
#include <cmath>
#include <numbers>
#include <vector>

#include "energy_attn/numkit.hpp"

namespace oracle {

using energy_attn::Matrix;
using energy_attn::Vector;

// -T log sum exp(-E/T), summed directly in long double (no max shift).
inline long double helmholtz(const std::vector<long double>& energies, long double t) {
  long double z = 0.0L;
  for (long double e : energies) z += std::exp(-e / t);
  return -t * std::log(z);
}

inline std::vector<long double> boltzmann(const std::vector<long double>& energies, long double t) {
  std::vector<long double> p;
  long double z = 0.0L;
  for (long double e : energies) {
    p.push_back(std::exp(-e / t));
    z += p.back();
  }
  for (long double& x : p) x /= z;
  return p;
}

inline long double dot_ld(const Vector& a, const Vector& b) {
  long double s = 0.0L;
  for (std::size_t i = 0; i < a.dim(); ++i) s += static_cast<long double>(a[i]) * b[i];
  return s;
}

// Naive triple loop.
inline Matrix matmul(const Matrix& a, const Matrix& b) {
  Matrix c(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    for (std::size_t j = 0; j < b.cols(); ++j) {
      long double s = 0.0L;
      for (std::size_t k = 0; k < a.cols(); ++k) s += static_cast<long double>(a(i, k)) * b(k, j);
      c(i, j) = static_cast<double>(s);
    }
  }
  return c;
}

inline Vector matvec(const Matrix& a, const Vector& x) {
  Vector y(a.rows());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    long double s = 0.0L;
    for (std::size_t k = 0; k < a.cols(); ++k) s += static_cast<long double>(a(i, k)) * x[k];
    y[i] = static_cast<double>(s);
  }
  return y;
}

inline Matrix transpose(const Matrix& a) {
  Matrix t(a.cols(), a.rows());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    for (std::size_t j = 0; j < a.cols(); ++j) t(j, i) = a(i, j);
  }
  return t;
}

// Closed-form eigenvalues of a symmetric 2x2, ascending.
inline std::vector<double> eig2(const Matrix& a) {
  const double m = 0.5 * (a(0, 0) + a(1, 1));
  const double r = std::hypot(0.5 * (a(0, 0) - a(1, 1)), a(0, 1));
  return {m - r, m + r};
}

// Trigonometric closed form for a symmetric 3x3, ascending.
inline std::vector<double> eig3(const Matrix& a) {
  const double p1 = a(0, 1) * a(0, 1) + a(0, 2) * a(0, 2) + a(1, 2) * a(1, 2);
  const double q = (a(0, 0) + a(1, 1) + a(2, 2)) / 3.0;
  if (p1 == 0.0) {
    std::vector<double> d{a(0, 0), a(1, 1), a(2, 2)};
    std::sort(d.begin(), d.end());
    return d;
  }
  const double p2 = (a(0, 0) - q) * (a(0, 0) - q) + (a(1, 1) - q) * (a(1, 1) - q) +
                    (a(2, 2) - q) * (a(2, 2) - q) + 2.0 * p1;
  const double p = std::sqrt(p2 / 6.0);
  Matrix b(3, 3);
  for (std::size_t i = 0; i < 3; ++i) {
    for (std::size_t j = 0; j < 3; ++j) b(i, j) = (a(i, j) - (i == j ? q : 0.0)) / p;
  }
  const double det = b(0, 0) * (b(1, 1) * b(2, 2) - b(1, 2) * b(2, 1)) -
                     b(0, 1) * (b(1, 0) * b(2, 2) - b(1, 2) * b(2, 0)) +
                     b(0, 2) * (b(1, 0) * b(2, 1) - b(1, 1) * b(2, 0));
  const double r = std::clamp(det / 2.0, -1.0, 1.0);
  const double phi = std::acos(r) / 3.0;
  const double e1 = q + 2.0 * p * std::cos(phi);
  const double e3 = q + 2.0 * p * std::cos(phi + 2.0 * std::numbers::pi / 3.0);
  const double e2 = 3.0 * q - e1 - e3;
  std::vector<double> out{e1, e2, e3};
  std::sort(out.begin(), out.end());
  return out;
}

// Moore-Penrose pseudoinverse of a symmetric matrix from its eigenpairs,
// dropping eigenvalues below rel_tol * max|lambda|.
inline Matrix penrose_symmetric(const Matrix& a, double rel_tol = 1e-10) {
  const energy_attn::SymEigen eig = energy_attn::sym_eigen(a);
  double scale = 0.0;
  for (double v : eig.values) scale = std::max(scale, std::abs(v));
  Matrix out(a.rows(), a.cols());
  for (std::size_t k = 0; k < eig.values.dim(); ++k) {
    const double l = eig.values[k];
    if (std::abs(l) <= rel_tol * scale) continue;
    for (std::size_t i = 0; i < a.rows(); ++i) {
      for (std::size_t j = 0; j < a.cols(); ++j) {
        out(i, j) += eig.vectors(i, k) * eig.vectors(j, k) / l;
      }
    }
  }
  return out;
}

// Largest violation of the four Penrose conditions for x = pinv(a).
inline double penrose_residual(const Matrix& a, const Matrix& x) {
  const Matrix ax = matmul(a, x);
  const Matrix xa = matmul(x, a);
  double worst = energy_attn::max_abs_diff(matmul(ax, a), a);
  worst = std::max(worst, energy_attn::max_abs_diff(matmul(xa, x), x));
  worst = std::max(worst, energy_attn::max_abs_diff(ax, transpose(ax)));
  worst = std::max(worst, energy_attn::max_abs_diff(xa, transpose(xa)));
  return worst;
}

// (1/T) [sum_i p_i d_i d_i^T] r with the d_h x d_h matrix formed explicitly;
// column i of `deviations` is d_i.
inline Vector explicit_bias(const Matrix& deviations, const Vector& p, const Vector& r, double t) {
  const std::size_t m = deviations.rows();
  Matrix cov(m, m);
  for (std::size_t i = 0; i < deviations.cols(); ++i) {
    for (std::size_t a = 0; a < m; ++a) {
      for (std::size_t b = 0; b < m; ++b) cov(a, b) += p[i] * deviations(a, i) * deviations(b, i);
    }
  }
  Vector out = matvec(cov, r);
  for (double& x : out) x /= t;
  return out;
}

// -sum_c y_c log softmax(logits)_c in long double.
inline long double cross_entropy(const Vector& logits, const Vector& y) {
  long double z = 0.0L;
  for (double l : logits) z += std::exp(static_cast<long double>(l));
  long double out = 0.0L;
  for (std::size_t c = 0; c < y.dim(); ++c) {
    out -= y[c] * (static_cast<long double>(logits[c]) - std::log(z));
  }
  return out;
}

}  // namespace oracle
