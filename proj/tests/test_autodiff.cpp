#include <catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "s2o/autodiff.hpp"
#include "s2o/network.hpp"

using namespace s2o;

namespace {

Var grad_leaf(Tape& tape, const Tensor& t) {
  Tensor v = t;
  v.requires_grad = true;
  return tape.leaf(v);
}

}  // namespace

TEST_CASE("add and sub route gradients with signs") {
  Tape t;
  Var a = grad_leaf(t, Tensor({2}, {1, 2}));
  Var b = grad_leaf(t, Tensor({2}, {3, 4}));
  Var z = t.sum(t.sub(t.add(a, a), b));  // 2a - b
  t.backward(z);
  CHECK(t.grad(a).data == std::vector<double>{2, 2});
  CHECK(t.grad(b).data == std::vector<double>{-1, -1});
}

TEST_CASE("mul gradient is the other operand") {
  Tape t;
  Var a = grad_leaf(t, Tensor({2}, {1, 2}));
  Var b = grad_leaf(t, Tensor({2}, {5, 7}));
  t.backward(t.sum(t.mul(a, b)));
  CHECK(t.grad(a).data == std::vector<double>{5, 7});
  CHECK(t.grad(b).data == std::vector<double>{1, 2});
}

TEST_CASE("matmul gradients against the ones seed") {
  // z = sum(A B): dA = 1 B^T, dB = A^T 1
  Tape t;
  const Tensor av({2, 2}, {1, 2, 3, 4});
  const Tensor bv({2, 2}, {5, 6, 7, 8});
  Var a = grad_leaf(t, av);
  Var b = grad_leaf(t, bv);
  t.backward(t.sum(t.matmul(a, b)));
  const Tensor ones({2, 2}, {1, 1, 1, 1});
  CHECK(max_abs_diff(t.grad(a), matmul_nt(ones, bv)) == 0.0);
  CHECK(max_abs_diff(t.grad(b), matmul_tn(av, ones)) == 0.0);
}

TEST_CASE("transpose and diag_part gradients") {
  Tape t;
  Var a = grad_leaf(t, Tensor({2, 2}, {1, 2, 3, 4}));
  t.backward(t.sum(t.diag_part(t.transpose(a))));
  CHECK(t.grad(a).data == std::vector<double>{1, 0, 0, 1});
}

TEST_CASE("add_scaled_identity feeds the trace scalar") {
  Tape t;
  Var m = grad_leaf(t, Tensor({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1}));
  Var s = grad_leaf(t, Tensor::scalar(2.0));
  Var out = t.add_scaled_identity(m, s, 0.5);
  // out = m + 0.5*s*I, so out(0,0) = 2 and d sum(out) / ds = 0.5 * 3
  CHECK(t.value(out).at(0, 0) == 2.0);
  t.backward(t.sum(out));
  CHECK(t.grad(s).value() == 1.5);
  CHECK(t.grad(m).data == std::vector<double>(9, 1.0));
}

TEST_CASE("row_col_scale value and gradient") {
  Tape t;
  const Tensor mv({2, 2}, {1, 2, 3, 4});
  const Tensor sv({2}, {2, 3});
  Var m = grad_leaf(t, mv);
  Var s = grad_leaf(t, sv);
  Var out = t.row_col_scale(m, s);
  // out(i,j) = m(i,j) s_i s_j
  CHECK(t.value(out).data == std::vector<double>{4, 12, 18, 36});
  t.backward(t.sum(out));
  CHECK(t.grad(m).data == std::vector<double>{4, 6, 6, 9});
  // ds_k = sum_j m(k,j) s_j + sum_i m(i,k) s_i
  // ds_0 = (1*2 + 2*3) + (1*2 + 3*3) = 8 + 11 = 19
  // ds_1 = (3*2 + 4*3) + (2*2 + 4*3) = 18 + 16 = 34
  CHECK(t.grad(s).data == std::vector<double>{19, 34});
}

TEST_CASE("relu kinks and tanh slope") {
  Tape t;
  Var a = grad_leaf(t, Tensor({3}, {-2, 3, 0.5}));
  t.backward(t.sum(t.relu(a)));
  CHECK(t.grad(a).data == std::vector<double>{0, 1, 1});

  Tape t2;
  Var b = grad_leaf(t2, Tensor({1}, {0.5}));
  t2.backward(t2.sum(t2.tanh(b)));
  const double th = std::tanh(0.5);
  CHECK(std::abs(t2.grad(b)[0] - (1 - th * th)) < 1e-15);
}

TEST_CASE("exp log pow chain") {
  Tape t;
  Var a = grad_leaf(t, Tensor({1}, {2.0}));
  // z = log(exp(a)^3) = 3a, dz/da = 3
  t.backward(t.sum(t.log(t.pow_const(t.exp(a), 3.0))));
  CHECK(std::abs(t.grad(a)[0] - 3.0) < 1e-12);
  CHECK_THROWS_AS(t.log(grad_leaf(t, Tensor({1}, {-1.0}))), NumericsError);
}

TEST_CASE("sum mean frobenius_sq") {
  Tape t;
  const Tensor av({2, 2}, {1, -2, 3, 4});
  Var a = grad_leaf(t, av);
  CHECK(t.value(t.sum(a)).value() == 6.0);
  CHECK(t.value(t.mean(a)).value() == 1.5);
  Var f = t.frobenius_sq(a);
  CHECK(t.value(f).value() == 30.0);
  t.backward(f);
  CHECK(t.grad(a).data == std::vector<double>{2, -4, 6, 8});
}

TEST_CASE("inverse norm gradient on a diagonal matrix") {
  // f(W) = ||inv(W)||_F^2 at W = diag(2, 4): f = a^-2 + b^-2, so
  // df/da = -2 a^-3 giving [-0.25, -0.03125] on the diagonal.
  Tape t;
  Var w = grad_leaf(t, Tensor({2, 2}, {2, 0, 0, 4}));
  Var f = t.frobenius_sq(t.spd_inverse(w));
  CHECK(std::abs(t.value(f).value() - (0.25 + 0.0625)) < 1e-15);
  t.backward(f);
  const Tensor g = t.grad(w);
  CHECK(std::abs(g.at(0, 0) - (-0.25)) < 1e-12);
  CHECK(std::abs(g.at(1, 1) - (-0.03125)) < 1e-12);
}

TEST_CASE("cross entropy at confident logits") {
  // CE([10, -10], label 0) = log(1 + exp(-20)) ~= 2.06e-9. The log-softmax
  // route computes 10 - logsumexp, so allow ulp-scale cancellation around 10.
  const Tensor logits({1, 2}, {10, -10});
  const double ce = cross_entropy(logits, {0});
  CHECK(std::abs(ce - std::log1p(std::exp(-20.0))) < 1e-14);
  CHECK(ce > 0.0);
}

TEST_CASE("softmax KL frozen value") {
  // softmax([ln 4, 0]) = (0.8, 0.2); KL((0.8,0.2) || (0.5,0.5))
  const Tensor p({1, 2}, {std::log(4.0), 0.0});
  const Tensor q({1, 2}, {0.0, 0.0});
  CHECK(std::abs(kl_softmax(p, q) - 0.192744757021758) < 1e-12);
  CHECK(std::abs(kl_softmax(p, p)) < 1e-15);
}

TEST_CASE("log_softmax rows sum to one after exp") {
  Tape t;
  Var z = grad_leaf(t, Tensor({2, 3}, {1, 2, 3, -1, 0, 1}));
  const Tensor ls = t.value(t.log_softmax(z));
  for (std::size_t i = 0; i < 2; ++i) {
    double row = 0.0;
    for (std::size_t j = 0; j < 3; ++j) row += std::exp(ls.at(i, j));
    CHECK(std::abs(row - 1.0) < 1e-14);
  }
}

TEST_CASE("pick grabs per-row entries") {
  Tape t;
  Var z = grad_leaf(t, Tensor({2, 3}, {1, 2, 3, 4, 5, 6}));
  Var p = t.pick(z, {2, 0});
  CHECK(t.value(p).data == std::vector<double>{3, 4});
  t.backward(t.sum(p));
  CHECK(t.grad(z).data == std::vector<double>{0, 0, 1, 1, 0, 0});
  CHECK_THROWS_AS(t.pick(z, {3, 0}), ShapeError);
}

TEST_CASE("gradient accumulates over reused nodes") {
  Tape t;
  Var a = grad_leaf(t, Tensor({1}, {3.0}));
  // z = a*a, dz/da = 2a = 6
  t.backward(t.sum(t.mul(a, a)));
  CHECK(t.grad(a)[0] == 6.0);
}

TEST_CASE("constants do not expose gradients") {
  Tape t;
  Var c = t.constant(Tensor({1}, {2.0}));
  Var a = grad_leaf(t, Tensor({1}, {5.0}));
  t.backward(t.sum(t.mul(a, c)));
  CHECK(t.grad(a)[0] == 2.0);
  CHECK_THROWS_AS(t.grad(c), NumericsError);
}

TEST_CASE("backward with a seed scales gradients") {
  Tape t;
  Var a = grad_leaf(t, Tensor({2}, {1, 2}));
  Var z = t.scale(a, 3.0);
  t.backward(z, Tensor({2}, {1, 10}));
  CHECK(t.grad(a).data == std::vector<double>{3, 30});
}
