#include <doctest.h>

#include <cmath>

#include "energy_attn/attention.hpp"
#include "energy_attn/energy.hpp"
#include "oracles.hpp"

using namespace energy_attn;

namespace {

AttentionParams single(const Matrix& wq, const Matrix& wk, const Matrix& wv, double t) {
  HeadParams hp;
  hp.w_q = wq;
  hp.w_k = wk;
  hp.w_v = wv;
  hp.temperature = t;
  hp.temperature_bias = t;
  AttentionParams p;
  p.heads.push_back(hp);
  return p;
}

Matrix orthonormal_rows(Rng& rng, std::size_t rows, std::size_t d) {
  const Matrix q = random_orthogonal(rng, d);
  Matrix out(rows, d);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < d; ++c) out(r, c) = q(r, c);
  }
  return out;
}

}  // namespace

TEST_CASE("softmax attention") {
  Rng rng(1);
  const Matrix wq = rng.normal_matrix(4, 4), wk = rng.normal_matrix(4, 4), wv = rng.normal_matrix(4, 4);
  const AttentionParams p = single(wq, wk, wv, 2.0);
  const Vector z = rng.normal_vector(4);
  const Matrix one = rng.normal_matrix(4, 1);
  CHECK(max_abs_diff(softmax_attention(p, z, one), z + oracle::matvec(wv, one.column(0))) < 1e-14);

  const Matrix tokens = rng.normal_matrix(4, 6);
  CHECK(softmax_attention(single(wq, wk, Matrix(4, 4), 2.0), z, tokens) == z);

  // Direct evaluation of z + W_V H softmax(H^T W_K^T W_Q z / T).
  std::vector<long double> e;
  for (std::size_t i = 0; i < 6; ++i) {
    e.push_back(-oracle::dot_ld(oracle::matvec(wk, tokens.column(i)), oracle::matvec(wq, z)));
  }
  const auto w = oracle::boltzmann(e, 2.0L);
  Vector ref = z;
  for (std::size_t i = 0; i < 6; ++i) ref += static_cast<double>(w[i]) * oracle::matvec(wv, tokens.column(i));
  CHECK(max_abs_diff(softmax_attention(p, z, tokens), ref) < 1e-13);

  CHECK_THROWS_AS(softmax_attention(p, Vector(3), tokens), dimension_error);
}

TEST_CASE("linear attention") {
  Rng rng(2);
  const Matrix wq = rng.normal_matrix(3, 3), wk = rng.normal_matrix(3, 3), wv = rng.normal_matrix(3, 3);
  const AttentionParams p = single(wq, wk, wv, 1.0);
  const Vector z = rng.normal_vector(3);
  const Matrix h = rng.normal_matrix(3, 1);
  const double s = dot(oracle::matvec(wq, z), oracle::matvec(wk, h.column(0)));
  CHECK(max_abs_diff(linear_attention(p, z, h), z + s * oracle::matvec(wv, h.column(0))) < 1e-13);

  // z orthogonal to every W_Q^T W_K h_i gives zero scores.
  const AttentionParams id = single(Matrix::identity(3), Matrix::identity(3), wv, 1.0);
  const Matrix tokens = Matrix::from_columns({Vector{1.0, 0.0, 0.0}, Vector{0.0, 1.0, 0.0}});
  CHECK(linear_attention(id, Vector{0.0, 0.0, 2.0}, tokens) == Vector{0.0, 0.0, 2.0});

  const Matrix many = rng.normal_matrix(3, 5);
  CHECK(linear_attention(p, z, many, Vector(5)) == z);
  CHECK_THROWS_AS(linear_attention(p, z, many, Vector(4)), dimension_error);
}

TEST_CASE("multi-head attention") {
  Rng rng(3);
  AttentionParams p = random_params(rng, 8, 2);
  const Vector z = rng.normal_vector(8);
  const Matrix tokens = rng.normal_matrix(8, 10);
  AttentionParams zero = p;
  for (HeadParams& h : zero.heads) h.w_o = Matrix(8, 4);
  CHECK(mha(zero, z, tokens) == z);

  // H = 1 reduces to softmax attention with W_V <- W_O W_V.
  AttentionParams one = random_params(rng, 5, 1);
  const HeadParams& h = one.heads.front();
  const AttentionParams merged = single(h.w_q, h.w_k, h.w_o * h.w_v, h.temperature);
  const Vector z5 = rng.normal_vector(5);
  const Matrix t5 = rng.normal_matrix(5, 7);
  CHECK(max_abs_diff(mha(one, z5, t5), softmax_attention(merged, z5, t5)) < 1e-13);

  CHECK(p.dim() == 8);
  CHECK(p.head_dim() == 4);
  p.heads[1].w_o = Matrix(8, 3);
  CHECK_THROWS_AS(mha(p, z, tokens), dimension_error);
}

TEST_CASE("momentum and Nesterov attention") {
  Rng rng(4);
  AttentionParams p = random_params(rng, 6, 2);
  const Vector z0 = rng.normal_vector(6);
  const Matrix tokens = rng.normal_matrix(6, 9);
  const MomentumState fresh = MomentumState::zeros(6);

  SUBCASE("degenerate settings reduce to mha") {
    p.eta = 1.0;
    for (double beta : {0.0, 0.9}) {
      p.beta = beta;
      CHECK(max_abs_diff(momen_mha(p, z0, tokens, fresh).z, mha(p, z0, tokens)) <= 1e-14);
      CHECK(max_abs_diff(nag_mha(p, z0, tokens, fresh).z, mha(p, z0, tokens)) <= 1e-14);
    }
    p.beta = 0.0;
    MomentumState warm{rng.normal_vector(6)};
    CHECK(max_abs_diff(momen_mha(p, z0, tokens, warm).z, mha(p, z0, tokens)) <= 1e-14);
    CHECK(max_abs_diff(nag_mha(p, z0, tokens, warm).z, mha(p, z0, tokens)) <= 1e-14);
  }

  SUBCASE("two steps against a hand-rolled recurrence") {
    p.beta = 0.9;
    p.eta = 0.7;
    const Vector g1 = z0 - mha(p, z0, tokens);
    const Vector p1 = g1;
    const Vector z1 = z0 - 0.7 * p1;
    const Vector g2 = z1 - mha(p, z1, tokens);
    const Vector z2 = z1 - 0.7 * (0.9 * p1 + g2);

    const MomentumStep s1 = momen_mha(p, z0, tokens, fresh);
    const MomentumStep s2 = momen_mha(p, s1.z, tokens, s1.state);
    CHECK(max_abs_diff(s1.z, z1) < 1e-14);
    CHECK(max_abs_diff(s2.z, z2) < 1e-14);

    const Vector look = z1 - 0.9 * p1;
    const Vector n2 = z1 - 0.7 * (0.9 * p1 + (look - mha(p, look, tokens)));
    const MomentumStep t1 = nag_mha(p, z0, tokens, fresh);
    const MomentumStep t2 = nag_mha(p, t1.z, tokens, t1.state);
    CHECK(max_abs_diff(t1.z, z1) < 1e-14);
    CHECK(max_abs_diff(t2.z, n2) < 1e-14);
  }
  CHECK_THROWS_AS(momen_mha(p, z0, tokens, MomentumState::zeros(5)), dimension_error);
}

TEST_CASE("exact Newton attention") {
  Rng rng(5);
  const std::size_t d = 8, heads = 2;
  AttentionParams p = random_params(rng, d, heads, ScoreKind::distance);
  p.eta = 0.6;
  const Vector z = rng.normal_vector(d);
  const Matrix tokens = rng.normal_matrix(d, 12);

  SUBCASE("matches the pseudoinverse of the per-head energy Hessian") {
    std::vector<Matrix> w1, w2;
    for (const HeadParams& h : p.heads) {
      w1.push_back(h.w_q);
      w2.push_back(h.w_k);
    }
    const double t = p.heads.front().temperature;
    const EnergySpec spec = make_spec(PerHeadElastic{w1, w2}, Helmholtz{t});
    Vector step(d);
    for (std::size_t h = 0; h < heads; ++h) {
      const Matrix hess = head_hessian_z(spec, z, tokens, h);
      step += oracle::matvec(oracle::penrose_symmetric(hess), head_grad_z(spec, z, tokens, h));
    }
    const Vector ref = z - (0.6 / heads) * step;
    CHECK(max_abs_diff(mha2nd_exact(p, z, tokens), ref) < 1e-10);
  }

  SUBCASE("single token: identity bracket") {
    const Matrix one = tokens.leading_columns(1);
    Vector step(d);
    for (const HeadParams& h : p.heads) {
      step += range_space_pinv(h.w_q) * (h.w_q * z - h.w_k * one.column(0));
    }
    CHECK(max_abs_diff(mha2nd_exact(p, z, one), z - (0.6 / heads) * step) < 1e-13);
  }

  SUBCASE("orthonormal queries at huge bias temperature") {
    AttentionParams q = p;
    for (HeadParams& h : q.heads) h.temperature_bias = 1e14;
    q.heads[0].w_q = orthonormal_rows(rng, 4, d);
    q.heads[1].w_q = orthonormal_rows(rng, 4, d);
    Vector step(d);
    for (const HeadParams& h : q.heads) {
      const DistanceHead dh = distance_head(h, z, tokens);
      step += oracle::matvec(h.w_q.transpose(), dh.query - dh.mean_key);
    }
    CHECK(max_abs_diff(mha2nd_exact(q, z, tokens), z - (0.6 / heads) * step) < 1e-12);
  }

  SUBCASE("singular bracket") {
    // One token pair with a large deviation makes I - Cov/T singular at a chosen T.
    AttentionParams s = random_params(rng, 2, 1, ScoreKind::distance);
    s.heads[0].w_q = Matrix::identity(2);
    s.heads[0].w_k = Matrix::identity(2);
    s.heads[0].temperature = 1e300;  // uniform scores
    const Matrix pair = Matrix::from_columns({Vector{1.0, 0.0}, Vector{-1.0, 0.0}});
    // Cov = diag(1, 0); bracket = I - Cov / T_b is singular at T_b = 1.
    s.heads[0].temperature_bias = 1.0;
    CHECK_THROWS_WITH(mha2nd_exact(s, Vector{0.3, 0.1}, pair), doctest::Contains("Hessian preconditioner singular"));
    NewtonOptions opt;
    opt.epsilon = 0.5;
    CHECK(is_finite(mha2nd_exact(s, Vector{0.3, 0.1}, pair, opt)));
  }
}

TEST_CASE("Taylor-truncated Newton attention") {
  Rng rng(6);
  const std::size_t d = 8;
  AttentionParams p = random_params(rng, d, 2, ScoreKind::distance);
  const Vector z = rng.normal_vector(d);
  const Matrix tokens = rng.normal_matrix(d, 11);

  SUBCASE("bias against an explicit covariance matrix") {
    for (const HeadParams& h : p.heads) {
      const DistanceHead dh = distance_head(h, z, tokens);
      const Vector r = dh.query - dh.mean_key;
      const Vector ref = oracle::explicit_bias(dh.deviations.transpose(), dh.scores, r, 1.7);
      CHECK(max_abs_diff(newton_bias(dh, r, 1.7), ref) < 1e-13);
      double total = 0.0;
      for (double s : dh.scores) total += s;
      CHECK(total == doctest::Approx(1.0));
    }
  }

  SUBCASE("single token and infinite bias temperature") {
    const Matrix one = tokens.leading_columns(1);
    Vector ref = z;
    for (const HeadParams& h : p.heads) {
      ref += h.w_o * (h.w_v * (range_space_pinv(h.w_q) * (h.w_q * z - h.w_k * one.column(0))));
    }
    CHECK(max_abs_diff(mha2nd1st(p, z, one), ref) < 1e-13);

    AttentionParams cold = p;
    for (HeadParams& h : cold.heads) h.temperature_bias = 1e300;
    Vector limit = z;
    for (const HeadParams& h : cold.heads) {
      const DistanceHead dh = distance_head(h, z, tokens);
      limit += h.w_o * (h.w_v * (range_space_pinv(h.w_q) * (dh.query - dh.mean_key)));
    }
    CHECK(max_abs_diff(mha2nd1st(cold, z, tokens), limit) < 1e-13);
  }

  SUBCASE("value-free form") {
    AttentionParams zero = p;
    for (HeadParams& h : zero.heads) h.w_o = Matrix(d, 4);
    CHECK(mha2nd1st_noV(zero, z, tokens) == z);

    const Matrix one = tokens.leading_columns(1);
    Vector ref = z;
    for (const HeadParams& h : p.heads) ref += h.w_o * (h.w_q * z - h.w_k * one.column(0));
    CHECK(max_abs_diff(mha2nd1st_noV(p, z, one), ref) < 1e-13);

    AttentionParams ortho = p;
    ortho.heads[0].w_q = orthonormal_rows(rng, 4, d);
    ortho.heads[1].w_q = orthonormal_rows(rng, 4, d);
    for (HeadParams& h : ortho.heads) h.w_v = h.w_q;
    CHECK(max_abs_diff(mha2nd1st_noV(ortho, z, tokens), mha2nd1st(ortho, z, tokens)) < 1e-12);
  }

  SUBCASE("tied form is the first-order truncation") {
    AttentionParams tied = p;
    tied.eta = 0.5;
    tied = tied_newton(tied);
    double dmax = 0.0;
    for (const HeadParams& h : tied.heads) {
      const DistanceHead dh = distance_head(h, z, tokens);
      for (std::size_t i = 0; i < dh.deviations.rows(); ++i) {
        double s = 0.0;
        for (double v : dh.deviations.row(i)) s += v * v;
        dmax = std::max(dmax, s);
      }
    }
    double previous = INFINITY;
    for (double m : {1.0, 10.0, 100.0, 1000.0}) {
      for (HeadParams& h : tied.heads) h.temperature_bias = m * dmax;
      const Vector exact = mha2nd_exact(tied, z, tokens) - z;
      const Vector taylor = mha2nd1st(tied, z, tokens) - z;
      const double rel = max_abs_diff(exact, taylor) / norm_inf(exact);
      CHECK(rel <= previous + 1e-12);
      if (m == 100.0) CHECK(rel < 1e-2);
      previous = rel;
    }
  }
}

TEST_CASE("light Newton attention") {
  Rng rng(7);
  AttentionParams p = random_params(rng, 8, 2);
  const Vector z = rng.normal_vector(8);
  const Matrix tokens = rng.normal_matrix(8, 13);
  CHECK(p.heads[0].tau == 0.01);

  AttentionParams plain = p;
  for (HeadParams& h : plain.heads) h.tau = 0.0;
  CHECK(max_abs_diff(light_mha2nd1st(plain, z, tokens), mha(plain, z, tokens)) <= 1e-14);

  AttentionParams zero = p;
  for (HeadParams& h : zero.heads) h.w_o = Matrix(8, 4);
  CHECK(light_mha2nd1st(zero, z, tokens) == z);

  const Matrix one = tokens.leading_columns(1);
  Vector ref = z;
  for (const HeadParams& h : p.heads) ref += h.w_o * (h.w_v * one.column(0));
  CHECK(max_abs_diff(light_mha2nd1st(p, z, one), ref) < 1e-13);

  // Covariance form sum_i p_i (v_i - vbar)(v_i - vbar)^T vbar.
  const Matrix values = rng.normal_matrix(13, 4);
  const Vector w = rng.dirichlet(13);
  Vector vbar(4);
  for (std::size_t i = 0; i < 13; ++i) {
    for (std::size_t k = 0; k < 4; ++k) vbar[k] += w[i] * values(i, k);
  }
  Matrix dev(4, 13);
  for (std::size_t i = 0; i < 13; ++i) {
    for (std::size_t k = 0; k < 4; ++k) dev(k, i) = values(i, k) - vbar[k];
  }
  CHECK(max_abs_diff(light_bias(values, w), oracle::explicit_bias(dev, w, vbar, 1.0)) < 1e-13);
}

TEST_CASE("default scalars") {
  Rng rng(8);
  const AttentionParams dot_p = random_params(rng, 16, 4);
  CHECK(dot_p.beta == 0.9);
  CHECK(dot_p.eta == 1.0);
  CHECK(dot_p.heads[0].temperature == doctest::Approx(2.0));
  const AttentionParams dist = random_params(rng, 16, 4, ScoreKind::distance);
  CHECK(dist.heads[0].temperature == doctest::Approx(std::sqrt(8.0)));
  CHECK_THROWS_AS(random_params(rng, 10, 4), dimension_error);
}
