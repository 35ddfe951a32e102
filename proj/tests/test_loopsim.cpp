#include <doctest.h>

#include <cmath>

#include "energy_attn/attention.hpp"
#include "energy_attn/descent.hpp"
#include "energy_attn/loopsim.hpp"
#include "oracles.hpp"

using namespace energy_attn;

namespace {

LoopConfig config(const EnergySpec& spec, std::size_t k, double eta = 0.1, bool causal = false) {
  LoopConfig c;
  c.spec = spec;
  c.iterations = k;
  c.eta = eta;
  c.causal = causal;
  return c;
}

AlternatingConfig alg1(Rng& rng, std::size_t d, std::size_t classes) {
  AlternatingConfig ac;
  ac.spec = make_spec(Elastic{rng.normal_matrix(d, d, 1.0 / std::sqrt(double(d)))}, Helmholtz{1.0});
  ac.e = rng.normal_matrix(d, classes, 0.01);
  return ac;
}

}  // namespace

TEST_CASE("loop forward") {
  Rng rng(1);
  const Matrix w = rng.normal_matrix(6, 6, 0.4);
  const EnergySpec spec = make_spec(InnerProduct{w}, Helmholtz{1.0});
  const Matrix h0 = rng.normal_matrix(6, 9);

  const LoopTrace zero = loop_forward(config(spec, 0), h0);
  REQUIRE(zero.states.size() == 1);
  CHECK(zero.states[0] == h0);
  CHECK(zero.objectives.size() == 1);

  SUBCASE("one iteration is one batched tied attention application") {
    const LoopTrace one = loop_forward(config(spec, 1, 0.1), h0);
    const AttentionParams tied = tied_single_head(w, 0.1, 1.0);
    for (std::size_t i = 0; i < 9; ++i) {
      CHECK(max_abs_diff(one.states[1].column(i), softmax_attention(tied, h0.column(i), h0)) <= 1e-12);
    }
  }

  SUBCASE("zero weights freeze the state") {
    const EnergySpec flat = make_spec(InnerProduct{Matrix(6, 6)}, Helmholtz{1.0});
    const LoopTrace t = loop_forward(config(flat, 4), h0);
    for (const Matrix& z : t.states) CHECK(z == h0);
  }

  SUBCASE("causal first position sees itself only") {
    const LoopTrace t = loop_forward(config(spec, 3, 0.1, true), h0);
    const LoopTrace alone = loop_forward(config(spec, 3, 0.1, true), h0.leading_columns(1));
    for (std::size_t k = 0; k < 4; ++k) {
      CHECK(max_abs_diff(t.states[k].column(0), alone.states[k].column(0)) == 0.0);
    }
  }

  SUBCASE("single token matches repeated one-step descent") {
    const EnergySpec el = make_spec(Elastic{w}, Helmholtz{1.0});
    LoopConfig c = config(el, 5, 0.2, true);
    const LoopTrace t = loop_forward(c, h0.leading_columns(1));
    Vector z = h0.column(0);
    DescentOptions o;
    o.max_iters = 1;
    o.tol = 1e-300;
    o.convention = GradConvention::temperature_scaled;
    for (std::size_t k = 1; k <= 5; ++k) {
      const Matrix tokens = Matrix::from_columns({z});
      z = descend(el, Vanilla{0.2}, z, tokens, o).last().z;
      CHECK(max_abs_diff(t.states[k].column(0), z) < 1e-14);
    }
  }

  const EnergySpec ph = make_spec(PerHeadElastic{{Matrix::identity(6)}, {Matrix::identity(6)}}, Helmholtz{1.0});
  CHECK_THROWS_AS(loop_forward(config(ph, 1), h0), error);
}

TEST_CASE("cross entropy") {
  CHECK(cross_entropy(Vector{0.3, 0.3, 0.3}, Vector{0.0, 1.0, 0.0}) == doctest::Approx(std::log(3.0)));
  CHECK(cross_entropy(Vector{1000.0, 0.0}, Vector{1.0, 0.0}) < 1e-300);
  Rng rng(2);
  for (int k = 0; k < 10; ++k) {
    const Vector logits = rng.normal_vector(5, 3.0);
    const Vector y = rng.dirichlet(5);
    CHECK(std::abs(cross_entropy(logits, y) - static_cast<double>(oracle::cross_entropy(logits, y))) < 1e-13);
  }
}

TEST_CASE("cross-entropy gradient") {
  Rng rng(3);
  CHECK(max_abs(ce_grad_E(Matrix(4, 2), rng.normal_vector(4), Vector{0.5, 0.5})) == 0.0);
  CHECK(max_abs(ce_grad_E(rng.normal_matrix(4, 3), Vector(4), Vector{0.0, 1.0, 0.0})) == 0.0);
  for (int k = 0; k < 5; ++k) {
    const Matrix e = rng.normal_matrix(4, 3);
    const Vector z = rng.normal_vector(4);
    const Vector y{0.0, 0.0, 1.0};
    const Matrix fd = fd_gradient([&](const Matrix& m) { return cross_entropy(transpose_times(m, z), y); }, e);
    CHECK(scaled_error(ce_grad_E(e, z, y), fd) < 1e-6);
  }
}

TEST_CASE("dataset") {
  Rng rng(4);
  ClusterConfig cc;
  cc.rho = 2.0;
  const std::vector<Sample> data = two_cluster_dataset(rng, cc);
  CHECK(data.size() == 100);
  for (const Sample& s : data) {
    double sum = 0.0;
    for (double v : s.label) sum += v;
    CHECK(sum == 1.0);
    for (std::size_t i = 0; i < s.tokens.cols(); ++i) CHECK(std::abs(norm(s.tokens.column(i)) - 2.0) < 1e-12);
  }
}

TEST_CASE("alternating optimization") {
  SUBCASE("zero epochs leave the parameters alone") {
    Rng rng(5);
    const std::vector<Sample> data = two_cluster_dataset(rng, ClusterConfig{});
    AlternatingConfig ac = alg1(rng, 8, 2);
    ac.epochs = 0;
    const LoopTrace t = alternating_optimize(ac, data);
    CHECK(t.w == spec_weight(ac.spec));
    CHECK(t.e == ac.e);
    CHECK(t.ce.size() == 1);
  }

  SUBCASE("constructed equilibrium stays put") {
    const Vector h{0.6, -0.8, 0.0};
    Sample s{Matrix::from_columns({h, h, h}), Vector{0.5, 0.5}};
    AlternatingConfig ac;
    ac.spec = make_spec(Elastic{Matrix::identity(3)}, Helmholtz{1.0});
    ac.e = Matrix(3, 2);
    ac.epochs = 5;
    CHECK(max_abs(grad_w(ac.spec, h, s.tokens)) <= 1e-8);
    CHECK(norm(grad_z(ac.spec, h, s.tokens)) <= 1e-8);
    const LoopTrace t = alternating_optimize(ac, {s});
    for (double o : t.objectives) CHECK(o == doctest::Approx(t.objectives.front()).epsilon(1e-12));
    CHECK(max_abs_diff(t.w, Matrix::identity(3)) <= 1e-8);
  }

  SUBCASE("two-cluster training lowers cross entropy") {
    int improved = 0;
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
      Rng rng(seed);
      const std::vector<Sample> data = two_cluster_dataset(rng, ClusterConfig{});
      const AlternatingConfig ac = alg1(rng, 8, 2);
      const LoopTrace t = alternating_optimize(ac, data);
      CHECK(t.ce.size() == 51);
      if (t.ce.back() < t.ce.front()) ++improved;
    }
    CHECK(improved >= 9);
  }
}

TEST_CASE("loop training") {
  Rng rng(6);
  ClusterConfig cc;
  cc.tokens = 1;
  cc.per_class = 10;
  const std::vector<Sample> data = two_cluster_dataset(rng, cc);
  Matrix h0(8, data.size());
  std::vector<Vector> labels;
  for (std::size_t i = 0; i < data.size(); ++i) {
    h0.set_column(i, data[i].tokens.column(0));
    labels.push_back(data[i].label);
  }
  const EnergySpec spec = make_spec(InnerProduct{rng.normal_matrix(8, 8, 0.3)}, Helmholtz{1.0});
  const LoopTrace t = loop_train(config(spec, 2, 0.1, true), h0, labels, rng.normal_matrix(8, 2, 0.01), 30);
  CHECK(t.ce.size() == 31);
  CHECK(t.stop_reason == "completed");
  CHECK(t.ce.back() < t.ce.front());
  CHECK_THROWS_AS(loop_train(config(spec, 1), h0, {labels[0]}, Matrix(8, 2), 1), dimension_error);
}
