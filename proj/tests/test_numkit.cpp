#include <doctest.h>

#include <cmath>
#include <numeric>

#include "energy_attn/numkit.hpp"
#include "oracles.hpp"

using namespace energy_attn;

TEST_CASE("logsumexp") {
  CHECK(logsumexp(Vector{0.0, 0.0}) == doctest::Approx(std::log(2.0)).epsilon(1e-15));
  CHECK(logsumexp(Vector{5.0}) == 5.0);
  CHECK(logsumexp(Vector{1000.0, 1000.0}) == doctest::Approx(1000.0 + std::log(2.0)).epsilon(1e-15));
  CHECK(std::isfinite(logsumexp(Vector{-1000.0, -2000.0})));
  CHECK_THROWS_WITH_AS(logsumexp(Vector{}), doctest::Contains("empty reduction"), error);

  Rng rng(1);
  const Vector x = rng.normal_vector(20, 3.0);
  long double z = 0.0L;
  for (double v : x) z += std::exp(static_cast<long double>(v));
  CHECK(std::abs(logsumexp(x) - static_cast<double>(std::log(z))) < 1e-13);
}

TEST_CASE("softmax") {
  const Vector u = softmax(Vector{0.0, 0.0, 0.0});
  for (double v : u) CHECK(v == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
  CHECK(softmax(Vector{42.0})[0] == 1.0);
  const Vector p = softmax(Vector{std::log(3.0), 0.0});
  CHECK(p[0] == doctest::Approx(0.75).epsilon(1e-15));
  CHECK(p[1] == doctest::Approx(0.25).epsilon(1e-15));
  const Vector big = softmax(Vector{1000.0, 999.0});
  CHECK(big[0] + big[1] == doctest::Approx(1.0));
  CHECK_THROWS_AS(softmax(Vector{}), error);
}

TEST_CASE("symmetric eigenvalues") {
  SUBCASE("trivial") {
    const Vector e = sym_eigvals(Matrix::identity(3));
    for (double v : e) CHECK(v == doctest::Approx(1.0));
    const Vector d = sym_eigvals(Matrix::diagonal(Vector{5.0, -2.0, 0.0}));
    CHECK(d[0] == doctest::Approx(-2.0));
    CHECK(std::abs(d[1]) < 1e-15);
    CHECK(d[2] == doctest::Approx(5.0));
  }
  SUBCASE("closed forms at 2x2 and 3x3") {
    Rng rng(11);
    for (int trial = 0; trial < 50; ++trial) {
      const std::size_t n = trial % 2 ? 3 : 2;
      const Matrix g = rng.normal_matrix(n, n);
      const Matrix a = symmetrize(g);
      const Vector got = sym_eigvals(a);
      const std::vector<double> want = n == 2 ? oracle::eig2(a) : oracle::eig3(a);
      for (std::size_t i = 0; i < n; ++i) CHECK(std::abs(got[i] - want[i]) < 1e-10);
    }
  }
  SUBCASE("random 4x4 reconstructs and has the right invariants") {
    Rng rng(5);
    const Matrix a = symmetrize(rng.normal_matrix(4, 4));
    const SymEigen e = sym_eigen(a);
    // A v = lambda v for every pair, trace = sum of eigenvalues.
    for (std::size_t k = 0; k < 4; ++k) {
      const Vector v = e.vectors.column(k);
      CHECK(max_abs_diff(oracle::matvec(a, v), e.values[k] * v) < 1e-10);
    }
    CHECK(std::abs(trace(a) - std::accumulate(e.values.begin(), e.values.end(), 0.0)) < 1e-12);
    for (std::size_t k = 1; k < 4; ++k) CHECK(e.values[k - 1] <= e.values[k]);
  }
  CHECK_THROWS_AS(sym_eigvals(Matrix(2, 3)), dimension_error);
}

TEST_CASE("inverse and range-space pseudoinverse") {
  CHECK(solve_inverse(Matrix::identity(3)) == Matrix::identity(3));
  const Matrix d = solve_inverse(Matrix::diagonal(Vector{2.0, 4.0}));
  CHECK(d(0, 0) == doctest::Approx(0.5));
  CHECK(d(1, 1) == doctest::Approx(0.25));
  CHECK(d(0, 1) == 0.0);

  Rng rng(3);
  const Matrix a = rng.normal_matrix(5, 5) + 5.0 * Matrix::identity(5);
  CHECK(max_abs_diff(oracle::matmul(a, solve_inverse(a)), Matrix::identity(5)) < 1e-12);
  CHECK_THROWS_WITH(solve_inverse(Matrix(2, 2)), doctest::Contains("singular matrix"));

  const Matrix q = random_orthogonal(rng, 6);
  Matrix rows(2, 6);
  for (std::size_t c = 0; c < 6; ++c) {
    rows(0, c) = q(0, c);
    rows(1, c) = q(1, c);
  }
  CHECK(max_abs_diff(range_space_pinv(rows), rows.transpose()) < 1e-12);

  const Matrix p = range_space_pinv(Matrix::from_rows({{2.0, 0.0}}));
  CHECK(p(0, 0) == doctest::Approx(0.5));
  CHECK(p(1, 0) == 0.0);

  const Matrix w = rng.normal_matrix(4, 16);
  const Matrix pw = range_space_pinv(w);
  CHECK(max_abs_diff(oracle::matmul(w, pw), Matrix::identity(4)) < 1e-10);
  CHECK(oracle::penrose_residual(w, pw) < 1e-10);
}

TEST_CASE("finite differences") {
  Rng rng(2);
  const Vector x = rng.normal_vector(6);
  const Vector g = fd_gradient([](const Vector& v) { return 0.5 * dot(v, v); }, x);
  CHECK(max_abs_diff(g, x) < 1e-8);
  const Vector zero = fd_gradient([](const Vector&) { return 3.0; }, x);
  CHECK(max_abs(Matrix::diagonal(zero)) == 0.0);

  const Matrix m = rng.normal_matrix(3, 2);
  const Matrix gm = fd_gradient(
      [](const Matrix& a) {
        double s = 0.0;
        for (double v : a.values()) s += v * v * v;
        return s;
      },
      m);
  for (std::size_t i = 0; i < 3; ++i) {
    for (std::size_t j = 0; j < 2; ++j) CHECK(gm(i, j) == doctest::Approx(3 * m(i, j) * m(i, j)).epsilon(1e-8));
  }
}

TEST_CASE("rng and hypersphere sampling") {
  Rng a(42), b(42);
  const Vector va = sample_hypersphere(a, 8, 1.0);
  const Vector vb = sample_hypersphere(b, 8, 1.0);
  CHECK(va == vb);
  CHECK(std::abs(norm(va) - 1.0) < 1e-12);

  Rng c(0);
  for (int i = 0; i < 20; ++i) CHECK(std::abs(std::abs(sample_hypersphere(c, 1, 2.0)[0]) - 2.0) < 1e-12);
  for (int i = 0; i < 20; ++i) CHECK(std::abs(norm(sample_hypersphere(c, 5, 3.5)) - 3.5) < 1e-12);

  const Vector p = c.dirichlet(8);
  CHECK(std::accumulate(p.begin(), p.end(), 0.0) == doctest::Approx(1.0));
  for (double v : p) CHECK(v >= 0.0);

  const Matrix q = random_orthogonal(c, 7);
  CHECK(max_abs_diff(oracle::matmul(q, q.transpose()), Matrix::identity(7)) < 1e-12);
}

TEST_CASE("shape and finiteness errors") {
  CHECK_THROWS_AS(Vector(1, 0.0) + Vector(2, 0.0), dimension_error);
  CHECK_THROWS_AS(Matrix(2, 2) * Vector(3), dimension_error);
  CHECK_THROWS_AS(Vector(std::vector<double>{1.0, std::nan("")}), error);
  Vector v{1.0, 2.0};
  v[1] = INFINITY;
  CHECK_FALSE(is_finite(v));
}

TEST_CASE("parallel_map keeps index order") {
  const std::vector<std::size_t> out = parallel_map(50, [](std::size_t i) { return i * i; });
  for (std::size_t i = 0; i < out.size(); ++i) CHECK(out[i] == i * i);
}
