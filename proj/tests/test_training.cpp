#include <catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "s2o/training.hpp"

using namespace s2o;

namespace {

MlpNetwork single_layer(std::size_t in, std::size_t out) {
  MlpNetwork net;
  net.dims = {in, out};
  net.activation = Activation::linear;
  Tensor w = Tensor::zeros({out, in});
  for (std::size_t i = 0; i < std::min(in, out); ++i) w.at(i, i) = 1.0;
  w.requires_grad = true;
  net.weights = {w};
  return net;
}

// Batch whose input second moment is [[1, rho], [rho, 1]].
Tensor batch_with_correlation(double rho) {
  const double l11 = std::sqrt(2.0);
  const double l21 = 2.0 * rho / l11;
  const double l22 = std::sqrt(2.0 - l21 * l21);
  return Tensor({2, 2}, {l11, l21, 0.0, l22});
}

Dataset tiny_blobs() { return make_blobs(3, 6, 20, 0.15, 5); }

TrainConfig tiny_config() {
  TrainConfig cfg;
  cfg.hidden = {8};
  cfg.activation = Activation::tanh;
  cfg.epochs = 2;
  cfg.batch_size = 16;
  cfg.seed = 3;
  cfg.attack.epsilon = 0.05;
  cfg.attack.step_size = 0.02;
  cfg.attack.iterations = 3;
  cfg.optimizer.lr = 0.05;
  return cfg;
}

}  // namespace

TEST_CASE("penalty closed form on one correlated layer") {
  // For a 2-column input with second-moment correlation rho, the normalized
  // matrix (inverse or not) is [[1, -+rho], [-+rho, 1]] up to the tiny ridge.
  // Exact mode sums squared Frobenius norms: 2 + 2 rho^2 per domain. Fast
  // mode averages the squared off-diagonal entries: rho^2 per domain.
  const MlpNetwork net = single_layer(2, 2);
  const Tensor x1 = batch_with_correlation(0.6);
  const Tensor x2 = batch_with_correlation(0.3);
  const double exact_expect = (2.0 + 2.0 * 0.36) + (2.0 + 2.0 * 0.09);
  const double fast_expect = 0.36 + 0.09;
  const double exact = s2o_penalty_value(net, x1, x2, S2oMode::exact);
  const double fast = s2o_penalty_value(net, x1, x2, S2oMode::fast);
  CHECK(std::abs(exact - exact_expect) < 1e-4);
  CHECK(std::abs(fast - fast_expect) < 1e-4);
  CHECK(s2o_penalty_value(net, x1, x2, S2oMode::off) == 0.0);
}

TEST_CASE("penalty grows with correlation") {
  const MlpNetwork net = single_layer(2, 2);
  const Tensor lo = batch_with_correlation(0.1);
  const Tensor hi = batch_with_correlation(0.9);
  CHECK(s2o_penalty_value(net, hi, hi, S2oMode::exact) >
        s2o_penalty_value(net, lo, lo, S2oMode::exact));
}

TEST_CASE("alpha zero and mode off train bitwise identically") {
  const Dataset ds = tiny_blobs();
  TrainConfig a = tiny_config();
  a.alpha = 0.0;
  a.s2o_mode = S2oMode::fast;
  TrainConfig b = tiny_config();
  b.alpha = 0.3;
  b.s2o_mode = S2oMode::off;
  const TrainResult ra = run_training(a, ds);
  const TrainResult rb = run_training(b, ds);
  REQUIRE(!ra.aborted);
  REQUIRE(!rb.aborted);
  for (std::size_t l = 0; l < ra.net.n_layers(); ++l)
    CHECK(max_abs_diff(ra.net.weights[l], rb.net.weights[l]) == 0.0);
  REQUIRE(ra.history.size() == rb.history.size());
  for (std::size_t e = 0; e < ra.history.size(); ++e) {
    CHECK(ra.history[e].train_loss == rb.history[e].train_loss);
    CHECK(ra.history[e].penalty == 0.0);
    CHECK(rb.history[e].penalty == 0.0);
  }
}

TEST_CASE("penalty weight changes the trajectory") {
  const Dataset ds = tiny_blobs();
  TrainConfig a = tiny_config();
  a.alpha = 0.0;
  TrainConfig b = tiny_config();
  b.alpha = 0.3;
  b.s2o_mode = S2oMode::fast;
  const TrainResult ra = run_training(a, ds);
  const TrainResult rb = run_training(b, ds);
  REQUIRE(!rb.aborted);
  CHECK(max_abs_diff(ra.net.weights[0], rb.net.weights[0]) != 0.0);
  for (const MetricsRecord& rec : rb.history) CHECK(rec.penalty > 0.0);
}

TEST_CASE("smooth_labels distributes mass") {
  const Tensor s = smooth_labels({2, 0}, 4, 0.7);
  // off entries (1 - 0.7)/4 = 0.075, label entry 0.7 + 0.075
  CHECK(std::abs(s.at(0, 2) - 0.775) < 1e-15);
  CHECK(std::abs(s.at(0, 0) - 0.075) < 1e-15);
  CHECK(std::abs(s.at(1, 0) - 0.775) < 1e-15);
  for (std::size_t i = 0; i < 2; ++i) {
    double row = 0.0;
    for (std::size_t c = 0; c < 4; ++c) row += s.at(i, c);
    CHECK(std::abs(row - 1.0) < 1e-14);
  }
}

TEST_CASE("weight ascent stays inside its radius") {
  const MlpNetwork net = init_network({4, 6, 3}, Activation::tanh, 9);
  LabeledBatch batch;
  batch.x = Tensor::zeros({10, 4});
  Rng rng(10);
  rng.fill_uniform(batch.x, 0.0, 1.0);
  batch.y.resize(10);
  for (std::size_t i = 0; i < 10; ++i) batch.y[i] = static_cast<int>(rng.below(3));

  const double gamma = 0.01;
  const std::vector<Tensor> v = awp_wrap(net, batch, gamma, 2);
  REQUIRE(v.size() == net.n_layers());
  for (std::size_t l = 0; l < v.size(); ++l) {
    const double cap = gamma * frobenius_norm(net.weights[l]);
    CHECK(frobenius_norm(v[l]) <= cap * (1.0 + 1e-12));
    CHECK(frobenius_norm(v[l]) > 0.0);
  }
  // gamma 0 is a no-op
  for (const Tensor& z : awp_wrap(net, batch, 0.0, 1)) CHECK(max_abs(z) == 0.0);
}

TEST_CASE("sgd hand check with momentum") {
  MlpNetwork net = single_layer(1, 1);
  net.weights[0].at(0, 0) = 1.0;
  OptimizerConfig oc;
  oc.lr = 0.1;
  oc.momentum = 0.9;
  oc.weight_decay = 0.0;
  Sgd opt(oc);
  const std::vector<Tensor> g = {Tensor({1, 1}, {0.5})};
  opt.step(net, g);
  // v = 0.5, W = 1 - 0.05
  CHECK(std::abs(net.weights[0].at(0, 0) - 0.95) < 1e-15);
  opt.step(net, g);
  // v = 0.45 + 0.5 = 0.95, W = 0.95 - 0.095
  CHECK(std::abs(net.weights[0].at(0, 0) - 0.855) < 1e-15);
  CHECK_THROWS_AS(opt.step(net, {}), ShapeError);
}

TEST_CASE("weight decay folds into the gradient") {
  MlpNetwork net = single_layer(1, 1);
  net.weights[0].at(0, 0) = 2.0;
  OptimizerConfig oc;
  oc.lr = 0.1;
  oc.momentum = 0.0;
  oc.weight_decay = 0.01;
  Sgd opt(oc);
  opt.step(net, {Tensor({1, 1}, {0.0})});
  // v = 0 + 0 + 0.01*2 = 0.02, W = 2 - 0.002
  CHECK(std::abs(net.weights[0].at(0, 0) - 1.998) < 1e-15);
}

TEST_CASE("milestones step the learning rate") {
  const Dataset ds = tiny_blobs();
  TrainConfig cfg = tiny_config();
  cfg.epochs = 3;
  cfg.optimizer.milestones = {1, 2};
  cfg.optimizer.decay = 0.1;
  const TrainResult r = run_training(cfg, ds);
  REQUIRE(r.history.size() == 3);
  CHECK(r.history[0].lr == Catch::Approx(0.05));
  CHECK(r.history[1].lr == Catch::Approx(0.005));
  // epoch 2 has passed both milestones, so the decay applies twice
  CHECK(r.history[2].lr == Catch::Approx(0.0005));
}

TEST_CASE("trades at zero KL weight reduces to the clean objective") {
  const Dataset ds = tiny_blobs();
  TrainConfig at = tiny_config();
  at.method = Method::at;
  at.alpha = 0.0;
  at.epochs = 1;
  at.batch_size = 0;  // full batch
  at.attack.epsilon = 0.0;  // adversarial inputs collapse onto clean ones
  TrainConfig tr = at;
  tr.method = Method::trades;
  tr.trades_inv_lambda = 0.0;
  const TrainResult ra = run_training(at, ds);
  const TrainResult rt = run_training(tr, ds);
  // both objectives are the clean cross-entropy on the same batch
  CHECK(std::abs(ra.history[0].train_loss - rt.history[0].train_loss) < 1e-12);
}

TEST_CASE("training history is ordered and bounded") {
  const Dataset ds = tiny_blobs();
  TrainConfig cfg = tiny_config();
  cfg.method = Method::avmixup;
  const TrainResult r = run_training(cfg, ds);
  REQUIRE(!r.aborted);
  REQUIRE(r.history.size() == 2);
  for (std::size_t e = 0; e < r.history.size(); ++e) {
    CHECK(r.history[e].epoch == static_cast<int>(e));
    CHECK(r.history[e].clean_acc >= 0.0);
    CHECK(r.history[e].clean_acc <= 1.0);
    CHECK(r.history[e].robust_acc >= 0.0);
    CHECK(r.history[e].robust_acc <= 1.0);
    CHECK(std::isfinite(r.history[e].train_loss));
  }
}

TEST_CASE("training is deterministic in the seed") {
  const Dataset ds = tiny_blobs();
  TrainConfig cfg = tiny_config();
  cfg.awp = true;
  cfg.awp_gamma = 0.005;
  const TrainResult a = run_training(cfg, ds);
  const TrainResult b = run_training(cfg, ds);
  for (std::size_t l = 0; l < a.net.n_layers(); ++l)
    CHECK(max_abs_diff(a.net.weights[l], b.net.weights[l]) == 0.0);
}

TEST_CASE("a blown-up objective aborts and restores the last good weights") {
  const Dataset ds = tiny_blobs();
  TrainConfig cfg = tiny_config();
  cfg.optimizer.lr = 1e100;  // overflow to inf within two epochs
  cfg.epochs = 4;
  const TrainResult r = run_training(cfg, ds);
  REQUIRE(r.aborted);
  CHECK(r.abort_reason.find("epoch") != std::string::npos);
  for (const Tensor& w : r.net.weights)
    for (const double v : w.data) REQUIRE(std::isfinite(v));
}

TEST_CASE("config validation rejects bad settings") {
  TrainConfig cfg;
  cfg.alpha = -0.1;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = TrainConfig{};
  cfg.epochs = 0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = TrainConfig{};
  cfg.avmixup_beta_a = 0.0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = TrainConfig{};
  cfg.optimizer.milestones = {3, 3};
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = TrainConfig{};
  cfg.avmixup_lambda2 = 1.5;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  CHECK_NOTHROW(TrainConfig{}.validate());
}

TEST_CASE("method and mode names round trip") {
  for (const char* m : {"at", "trades", "avmixup"})
    CHECK(method_name(method_from_name(m)) == m);
  for (const char* m : {"off", "fast", "exact"})
    CHECK(s2o_mode_name(s2o_mode_from_name(m)) == m);
  CHECK_THROWS_AS(method_from_name("pgd"), ConfigError);
  CHECK_THROWS_AS(s2o_mode_from_name("on"), ConfigError);
}

TEST_CASE("kl objective drives the trades attack") {
  const MlpNetwork net = init_network({3, 5, 2}, Activation::tanh, 12);
  Tensor x = Tensor::zeros({4, 3});
  Rng rng(13);
  rng.fill_uniform(x, 0.0, 1.0);
  const Tensor clean_logits = forward(net, x);
  const AttackObjective obj = kl_objective(net, clean_logits);
  // at the clean point the KL to itself is zero
  Tape tape;
  Tensor xv = x;
  xv.requires_grad = true;
  Var loss = obj(tape, tape.leaf(xv));
  CHECK(std::abs(tape.value(loss).value()) < 1e-12);
}
