#include <cmath>
#include <functional>
#include <vector>

#include <gtest/gtest.h>

#include "captioner/numeric/rng.hpp"
#include "captioner/numeric/tape.hpp"
#include "support/oracles.hpp"

using namespace captioner;
using captioner::testing::central_difference;
using captioner::testing::max_relative_error;

namespace {

Matrix<double> random_matrix(std::size_t r, std::size_t c, Rng& rng, double lo = -1, double hi = 1) {
  Matrix<double> m(r, c);
  for (auto& v : m.data()) v = rng.uniform(lo, hi);
  return m;
}

// Builds a scalar from parameters a and b; `body` maps them to some node and
// the loss is sum(node ⊙ weights) so every output entry gets a distinct
// upstream gradient.
using Body = std::function<Var(Tape<double>&, Var, Var)>;

double check_primitive(const Body& body, Matrix<double> a, Matrix<double> b, Rng& rng) {
  Matrix<double> ga(a.rows(), a.cols()), gb(b.rows(), b.cols());
  Matrix<double> weights;
  const auto loss_of = [&](Tape<double>& t, Var va, Var vb) {
    const Var out = body(t, va, vb);
    if (weights.empty()) weights = random_matrix(t.value(out).rows(), t.value(out).cols(), rng);
    return t.sum(t.mul(out, t.constant(weights)));
  };
  {
    Tape<double> t;
    const Var va = t.parameter(a, &ga);
    const Var vb = t.parameter(b, &gb);
    t.backward(loss_of(t, va, vb));
  }
  const auto f = [&] {
    Tape<double> t;
    return t.value(loss_of(t, t.parameter(a), t.parameter(b)))[0];
  };
  return std::max(max_relative_error(ga, central_difference(f, a)), max_relative_error(gb, central_difference(f, b)));
}

}  // namespace

TEST(Tape, SumGradientIsOnes) {
  Rng rng(1);
  const auto w = random_matrix(3, 4, rng);
  Matrix<double> g(3, 4);
  Tape<double> t;
  const Var v = t.parameter(w, &g);
  t.backward(t.sum(v));
  EXPECT_EQ(g, Matrix<double>(3, 4, 1.0));
  EXPECT_EQ(t.grad(v), Matrix<double>(3, 4, 1.0));
}

TEST(Tape, TanhAtOriginHasUnitGradient) {
  const Matrix<double> w(2, 5);
  Matrix<double> g(2, 5);
  Tape<double> t;
  t.backward(t.sum(t.tanh(t.parameter(w, &g))));
  EXPECT_EQ(g, Matrix<double>(2, 5, 1.0));
}

TEST(Tape, GradBeforeBackwardIsInvalidState) {
  const Matrix<double> w(2, 2, 1.0);
  Tape<double> t;
  const Var v = t.parameter(w);
  const Var s = t.sum(v);
  EXPECT_THROW(t.grad(v), InvalidState);
  t.backward(s);
  EXPECT_NO_THROW(t.grad(v));
}

TEST(Tape, BackwardOnEmptyTapeIsInvalidState) {
  Tape<double> t;
  EXPECT_THROW(t.backward(Var{0}), InvalidState);
}

TEST(Tape, BackwardNeedsScalar) {
  const Matrix<double> w(2, 2, 1.0);
  Tape<double> t;
  const Var v = t.parameter(w);
  EXPECT_THROW(t.backward(v), ShapeError);
}

TEST(Tape, ReusedParameterAccumulates) {
  // loss = sum(w ⊙ w) → grad 2w
  Rng rng(4);
  const auto w = random_matrix(2, 3, rng);
  Matrix<double> g(2, 3);
  Tape<double> t;
  const Var v = t.parameter(w, &g);
  t.backward(t.sum(t.mul(v, v)));
  for (std::size_t i = 0; i < w.size(); ++i) EXPECT_DOUBLE_EQ(g[i], 2 * w[i]);
}

// Every differentiable primitive against central differences (h = 1e-5).
class PrimitiveGradient : public ::testing::TestWithParam<int> {};

TEST_P(PrimitiveGradient, MatchesCentralDifferences) {
  Rng rng(1000 + GetParam());
  const auto m = [&](std::size_t r, std::size_t c) { return random_matrix(r, c, rng); };
  double worst = 0;
  worst = std::max(worst, check_primitive([](auto& t, Var a, Var b) { return t.matmul(a, b); }, m(3, 4), m(4, 2), rng));
  worst = std::max(worst, check_primitive([](auto& t, Var a, Var b) { return t.add(a, b); }, m(3, 4), m(3, 4), rng));
  worst = std::max(worst, check_primitive([](auto& t, Var a, Var b) { return t.add_row(a, b); }, m(3, 4), m(1, 4), rng));
  worst = std::max(worst, check_primitive([](auto& t, Var a, Var b) { return t.mul(a, b); }, m(2, 5), m(2, 5), rng));
  worst = std::max(worst, check_primitive([](auto& t, Var a, Var) { return t.affine(a, -1.5, 0.25); }, m(2, 3), m(1, 1), rng));
  worst = std::max(worst, check_primitive([](auto& t, Var a, Var) { return t.tanh(a); }, m(3, 3), m(1, 1), rng));
  worst = std::max(worst, check_primitive([](auto& t, Var a, Var) { return t.sigmoid(a); }, m(3, 3), m(1, 1), rng));
  // Keep relu inputs away from the kink so differences stay one-sided-free.
  {
    auto a = m(3, 3);
    for (auto& v : a.data()) v += (v >= 0 ? 0.1 : -0.1);
    worst = std::max(worst, check_primitive([](auto& t, Var x, Var) { return t.relu(x); }, a, m(1, 1), rng));
  }
  worst = std::max(worst, check_primitive([](auto& t, Var a, Var) { return t.softmax_rows(a); }, m(3, 5), m(1, 1), rng));
  worst = std::max(worst, check_primitive([](auto& t, Var a, Var) { return t.transpose(a); }, m(2, 5), m(1, 1), rng));
  worst = std::max(worst, check_primitive([](auto& t, Var a, Var b) { return t.concat_cols(a, b); }, m(2, 3), m(2, 4), rng));
  worst = std::max(worst, check_primitive(
                              [](auto& t, Var a, Var b) {
                                const std::vector<Var> parts{a, b, a};
                                return t.concat_rows(parts);
                              },
                              m(2, 3), m(1, 3), rng));
  worst = std::max(worst, check_primitive([](auto& t, Var a, Var) { return t.embedding(a, 2); }, m(4, 3), m(1, 1), rng));
  worst = std::max(worst, check_primitive([](auto& t, Var a, Var) { return t.sum(a); }, m(3, 2), m(1, 1), rng));
  worst = std::max(worst, check_primitive(
                              [](auto& t, Var a, Var) {
                                return t.cross_entropy(a, {1, 0, 4}, {true, false, true});
                              },
                              m(3, 5), m(1, 1), rng));
  EXPECT_LT(worst, 1e-4);
}

INSTANTIATE_TEST_SUITE_P(RandomOperands, PrimitiveGradient, ::testing::Range(0, 10));

TEST(Tape, EmbeddingIndexOutOfRange) {
  const Matrix<double> table(3, 2);
  Tape<double> t;
  EXPECT_THROW(t.embedding(t.parameter(table), 3), InvalidArgument);
}

TEST(Tape, ConstantsReceiveNoGradient) {
  const Matrix<double> w(1, 2, 0.5);
  Tape<double> t;
  const Var c = t.constant(Matrix<double>(1, 2, 3.0));
  const Var p = t.parameter(w);
  t.backward(t.sum(t.mul(c, p)));
  EXPECT_THROW(t.grad(c), InvalidState);
  EXPECT_EQ(t.grad(p), Matrix<double>(1, 2, 3.0));
}
