#include <catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "s2o/network.hpp"

using namespace s2o;

namespace {

// 2 -> 2 -> 2 net with hand-picked weights for closed-form checks.
MlpNetwork tiny_net(Activation act) {
  MlpNetwork net;
  net.dims = {2, 2, 2};
  net.activation = act;
  Tensor w0({2, 2}, {1, 0, -1, 1});
  Tensor w1({2, 2}, {1, 1, 0, 2});
  w0.requires_grad = w1.requires_grad = true;
  net.weights = {w0, w1};
  return net;
}

}  // namespace

TEST_CASE("forward matches a hand computation") {
  const MlpNetwork net = tiny_net(Activation::relu);
  const Tensor x({1, 2}, {2, 3});
  // pre0 = x W0^T = [2*1+3*0, 2*-1+3*1] = [2, 1]; relu keeps both
  // logits = [2, 1] W1^T = [2+1, 0+2] = [3, 2]
  const Tensor out = forward(net, x);
  CHECK(out.at(0, 0) == 3.0);
  CHECK(out.at(0, 1) == 2.0);
}

TEST_CASE("relu zeroes the negative path") {
  const MlpNetwork net = tiny_net(Activation::relu);
  const Tensor x({1, 2}, {3, 1});
  // pre0 = [3, -2] -> relu [3, 0] -> logits [3, 0]
  const Tensor out = forward(net, x);
  CHECK(out.at(0, 0) == 3.0);
  CHECK(out.at(0, 1) == 0.0);
}

TEST_CASE("linear activation is a pure matrix product") {
  const MlpNetwork net = tiny_net(Activation::linear);
  const Tensor x({1, 2}, {3, 1});
  // pre0 = [3, -2] -> logits = [3 + (-2), 2*(-2)] = [1, -4]
  const Tensor out = forward(net, x);
  CHECK(out.at(0, 0) == 1.0);
  CHECK(out.at(0, 1) == -4.0);
}

TEST_CASE("forward_cache layers line up") {
  const MlpNetwork net = tiny_net(Activation::relu);
  const Tensor x({2, 2}, {2, 3, 3, 1});
  const ForwardCache cache = forward_cache(net, x);
  REQUIRE(cache.act.size() == net.n_layers());
  REQUIRE(cache.pre.size() == net.n_layers());
  CHECK(max_abs_diff(cache.act[0], x) == 0.0);
  // act[l] is relu(pre[l-1])
  for (std::size_t i = 0; i < 4; ++i)
    CHECK(cache.act[1].data[i] == std::max(0.0, cache.pre[0].data[i]));
  // final pre equals the plain forward output
  CHECK(max_abs_diff(cache.pre[1], forward(net, x)) == 0.0);
}

TEST_CASE("init_network is deterministic and bounded") {
  const MlpNetwork a = init_network({3, 4, 2}, Activation::relu, 5);
  const MlpNetwork b = init_network({3, 4, 2}, Activation::relu, 5);
  const MlpNetwork c = init_network({3, 4, 2}, Activation::relu, 6);
  REQUIRE(a.n_layers() == 2);
  CHECK(a.weights[0].rows() == 4);
  CHECK(a.weights[0].cols() == 3);
  CHECK(max_abs_diff(a.weights[0], b.weights[0]) == 0.0);
  CHECK(max_abs_diff(a.weights[1], b.weights[1]) == 0.0);
  CHECK(max_abs_diff(a.weights[0], c.weights[0]) != 0.0);
  const double limit0 = std::sqrt(6.0 / 3.0);
  for (const double v : a.weights[0].data) REQUIRE(std::abs(v) <= limit0);
  CHECK(a.weights[0].requires_grad);
  CHECK_THROWS_AS(init_network({3}, Activation::relu, 1), ConfigError);
  CHECK_THROWS_AS(init_network({3, 0, 2}, Activation::relu, 1), ConfigError);
}

TEST_CASE("activation names round trip") {
  for (const char* name : {"relu", "tanh", "linear"})
    CHECK(activation_name(activation_from_name(name)) == name);
  CHECK_THROWS_AS(activation_from_name("gelu"), ConfigError);
}

TEST_CASE("activation_derivative values") {
  CHECK(activation_derivative(Activation::relu, -1.0) == 0.0);
  CHECK(activation_derivative(Activation::relu, 2.0) == 1.0);
  CHECK(activation_derivative(Activation::linear, -3.0) == 1.0);
  const double t = std::tanh(0.7);
  CHECK(std::abs(activation_derivative(Activation::tanh, 0.7) - (1 - t * t)) < 1e-15);
}

TEST_CASE("tape forward agrees with the value forward") {
  const MlpNetwork net = init_network({3, 5, 4, 2}, Activation::tanh, 11);
  Tensor x = Tensor::zeros({6, 3});
  Rng rng(2);
  rng.fill_uniform(x, -1.0, 1.0);
  Tape tape;
  const std::vector<Var> wv = register_weights(net, tape);
  const TapeForward tf = forward_on_tape(net, tape, tape.constant(x), wv);
  CHECK(max_abs_diff(tape.value(tf.logits), forward(net, x)) == 0.0);
  REQUIRE(tf.activations.size() == net.n_layers());
  const ForwardCache cache = forward_cache(net, x);
  for (std::size_t l = 0; l < tf.activations.size(); ++l)
    CHECK(max_abs_diff(tape.value(tf.activations[l]), cache.act[l]) == 0.0);
}

TEST_CASE("forward rejects a feature-dim mismatch") {
  const MlpNetwork net = tiny_net(Activation::relu);
  CHECK_THROWS_AS(forward(net, Tensor::zeros({1, 3})), ShapeError);
}

TEST_CASE("accuracy requires a strict argmax win") {
  const Tensor logits({3, 2}, {2, 1, 1, 1, 0, 5});
  // row 0: class 0 wins; row 1: tie is not correct; row 2: class 1 wins
  CHECK(accuracy(logits, {0, 0, 1}) == Catch::Approx(2.0 / 3.0));
  CHECK(accuracy(logits, {1, 1, 0}) == Catch::Approx(0.0));
}

TEST_CASE("margin_loss counts thin wins") {
  const Tensor logits({2, 2}, {3, 1, 1.5, 1});
  // margin 1: row 0 wins by 2 (ok), row 1 wins by 0.5 (counted as loss)
  CHECK(margin_loss(logits, {0, 0}, 1.0) == Catch::Approx(0.5));
  CHECK(margin_loss(logits, {0, 0}, 0.0) == Catch::Approx(0.0));
  CHECK_THROWS_AS(margin_loss(logits, {0, 0}, -1.0), ConfigError);
}

TEST_CASE("soft cross entropy reduces to hard labels on one-hot") {
  const Tensor logits({2, 3}, {1, 2, 0, 0, 1, 3});
  const Tensor onehot({2, 3}, {0, 1, 0, 0, 0, 1});
  Tape t;
  Var z = t.constant(logits);
  const double soft = t.value(soft_cross_entropy_on_tape(t, z, onehot)).value();
  CHECK(std::abs(soft - cross_entropy(logits, {1, 2})) < 1e-14);
}
