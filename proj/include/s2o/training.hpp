#pragma once

// Adversarial training loop with pluggable objectives (standard adversarial
// training, TRADES, AVMixup) plus an optional adversarial weight perturbation
// wrapper, each composable with the decorrelation penalty in exact or fast
// mode. One trainer owns the network; everything is deterministic under the
// run seed.

#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <sstream>
#include <vector>

#include "attacks.hpp"
#include "statistics.hpp"

namespace s2o {

enum class Method { at, trades, avmixup };

inline std::string method_name(Method m) {
  switch (m) {
    case Method::at: return "at";
    case Method::trades: return "trades";
    case Method::avmixup: return "avmixup";
  }
  return "at";
}

inline Method method_from_name(const std::string& s) {
  if (s == "at") return Method::at;
  if (s == "trades") return Method::trades;
  if (s == "avmixup") return Method::avmixup;
  throw ConfigError("unknown training method '" + s + "' (expected at|trades|avmixup)");
}

enum class S2oMode { off, fast, exact };

inline std::string s2o_mode_name(S2oMode m) {
  switch (m) {
    case S2oMode::off: return "off";
    case S2oMode::fast: return "fast";
    case S2oMode::exact: return "exact";
  }
  return "off";
}

inline S2oMode s2o_mode_from_name(const std::string& s) {
  if (s == "off") return S2oMode::off;
  if (s == "fast") return S2oMode::fast;
  if (s == "exact") return S2oMode::exact;
  throw ConfigError("unknown penalty mode '" + s + "' (expected off|fast|exact)");
}

struct OptimizerConfig {
  double lr = 0.1;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  std::vector<int> milestones;  // epochs at which lr is multiplied by decay
  double decay = 0.1;
};

struct TrainConfig {
  Method method = Method::at;
  double alpha = 0.3;                  // penalty weight
  S2oMode s2o_mode = S2oMode::fast;    // fast normalization is the default
  AttackConfig attack;                 // training-time attack
  std::optional<AttackConfig> eval_attack;  // held-out robustness probe; defaults to attack
  OptimizerConfig optimizer;
  std::vector<std::size_t> hidden = {64, 64};
  Activation activation = Activation::relu;
  int epochs = 10;
  std::size_t batch_size = 128;        // 0 = full batch
  std::uint64_t seed = 0;

  double trades_inv_lambda = 6.0;      // weight of the KL term; 0 = natural training

  double avmixup_gamma = 2.0;
  double avmixup_lambda1 = 1.0;
  double avmixup_lambda2 = 0.1;
  double avmixup_beta_a = 1.0;
  double avmixup_beta_b = 1.0;
  // The mixed sample as printed upstream has no clean-image anchor at beta=0;
  // this flag switches to s + (1-beta)*gamma*(s'-s) instead.
  bool avmixup_anchored = false;

  bool awp = false;                    // wrap the step in a weight ascent
  double awp_gamma = 5e-3;             // relative Frobenius radius of the ascent
  int awp_steps = 1;

  void validate() const {
    if (alpha < 0.0) throw ConfigError("train: alpha must be >= 0");
    if (epochs < 1) throw ConfigError("train: epochs must be >= 1");
    if (trades_inv_lambda < 0.0) throw ConfigError("train: trades_inv_lambda must be >= 0");
    if (!(avmixup_beta_a > 0.0) || !(avmixup_beta_b > 0.0))
      throw ConfigError("train: beta distribution parameters must be > 0");
    if (avmixup_lambda1 < 0.0 || avmixup_lambda1 > 1.0 || avmixup_lambda2 < 0.0 ||
        avmixup_lambda2 > 1.0)
      throw ConfigError("train: label smoothing factors must lie in [0,1]");
    if (awp_gamma < 0.0) throw ConfigError("train: awp_gamma must be >= 0");
    if (awp_steps < 1) throw ConfigError("train: awp_steps must be >= 1");
    for (std::size_t i = 1; i < optimizer.milestones.size(); ++i)
      if (optimizer.milestones[i] <= optimizer.milestones[i - 1])
        throw ConfigError("train: schedule milestones must be strictly increasing");
    attack.validate();
    if (eval_attack) eval_attack->validate();
  }
};

// SGD with classical momentum and decoupled-from-nothing weight decay folded
// into the gradient: v = mu*v + g + wd*W; W -= lr*v.
struct Sgd {
  double lr = 0.1;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  std::vector<Tensor> velocity;

  explicit Sgd(const OptimizerConfig& c = {})
      : lr(c.lr), momentum(c.momentum), weight_decay(c.weight_decay) {}

  void step(MlpNetwork& net, const std::vector<Tensor>& grads) {
    if (grads.size() != net.n_layers())
      throw ShapeError("optimizer step: gradient count does not match layer count");
    if (velocity.empty())
      for (const Tensor& w : net.weights) velocity.push_back(Tensor::zeros(w.shape));
    for (std::size_t l = 0; l < net.n_layers(); ++l) {
      require_same_shape("optimizer step", net.weights[l], grads[l]);
      Tensor& v = velocity[l];
      Tensor& w = net.weights[l];
      const Tensor& g = grads[l];
      for (std::size_t i = 0; i < w.numel(); ++i) {
        v.data[i] = momentum * v.data[i] + g.data[i] + weight_decay * w.data[i];
        w.data[i] -= lr * v.data[i];
      }
    }
  }
};

// Decorrelation penalty over both input domains, built on the live tape so
// gradients reach the weights through every deeper layer's activations.
// For each layer the batch second moment M = A^T A / B of that layer's input
// is damped by a trace-relative ridge kept inside the graph.
//
// Exact mode correlation-normalizes inv(M) (the gradient flows through the
// inversion) and sums the squared Frobenius norms of the normalized matrices
// over layers and domains. Fast mode skips the inversion and penalizes the
// mean squared off-diagonal entry of the correlation-normalized second
// moment instead: a width-independent quantity in [0, 1] per layer and
// domain, so one alpha balances the penalty against the classification loss
// across layer sizes (the exact sum grows with width h, which makes any
// fixed alpha width-dependent in effect).
inline Var s2o_penalty_on_tape(Tape& tape, const MlpNetwork& net,
                               const std::vector<Var>& weight_vars,
                               const std::vector<const TapeForward*>& domains, S2oMode mode) {
  if (mode == S2oMode::off) return tape.constant_scalar(0.0);
  if (weight_vars.size() != net.n_layers())
    throw ShapeError("s2o_penalty: weight var count does not match layer count");
  Var total = tape.constant_scalar(0.0);
  for (const TapeForward* fwd : domains) {
    for (std::size_t l = 0; l < net.n_layers(); ++l) {
      const Var a = fwd->activations[l];
      const std::size_t b = tape.value(a).rows();
      const std::size_t h = tape.value(a).cols();
      Var m = tape.scale(tape.matmul(tape.transpose(a), a), 1.0 / static_cast<double>(b));
      Var tr = tape.sum(tape.diag_part(m));
      Var damped = tape.add_scaled_identity(m, tr, 1e-6 / static_cast<double>(h));
      Var target = damped;
      try {
        if (mode == S2oMode::exact) {
          target = tape.spd_inverse(damped);
          Var s = tape.pow_const(tape.diag_part(target), -0.5);
          Var normalized = tape.row_col_scale(target, s);
          total = tape.add(total, tape.frobenius_sq(normalized));
        } else {
          Var s = tape.pow_const(tape.diag_part(target), -0.5);
          Var normalized = tape.row_col_scale(target, s);
          // The unit diagonal contributes exactly h; what remains after
          // removing it is the off-diagonal sum, averaged over the h(h-1)
          // off-diagonal slots (a width-1 layer has none and contributes 0).
          if (h > 1) {
            const double hd = static_cast<double>(h);
            Var off = tape.sub(tape.frobenius_sq(normalized), tape.constant_scalar(hd));
            total = tape.add(total, tape.scale(off, 1.0 / (hd * (hd - 1.0))));
          }
        }
      } catch (const NumericsError& e) {
        std::ostringstream os;
        os << "s2o_penalty (" << s2o_mode_name(mode) << " mode): second moment of layer " << l
           << " is singular beyond damping: " << e.what();
        throw NumericsError(os.str());
      }
    }
  }
  return total;
}

// Value-only penalty for diagnostics: same graph on a throwaway tape with
// fixed weights.
inline double s2o_penalty_value(const MlpNetwork& net, const Tensor& clean_x,
                                const Tensor& adv_x, S2oMode mode) {
  if (mode == S2oMode::off) return 0.0;
  Tape tape;
  std::vector<Var> wv;
  wv.reserve(net.n_layers());
  for (const Tensor& w : net.weights) wv.push_back(tape.constant(w));
  TapeForward clean_fwd = forward_on_tape(net, tape, tape.constant(clean_x), wv);
  TapeForward adv_fwd = forward_on_tape(net, tape, tape.constant(adv_x), wv);
  Var p = s2o_penalty_on_tape(tape, net, wv, {&clean_fwd, &adv_fwd}, mode);
  return tape.value(p).value();
}

// TRADES inner maximization target: KL(f(s) || f(s')) in s', clean logits
// frozen.
inline AttackObjective kl_objective(const MlpNetwork& net, const Tensor& clean_logits) {
  return [&net, clean_logits](Tape& tape, Var x) {
    std::vector<Var> wv;
    wv.reserve(net.n_layers());
    for (const Tensor& w : net.weights) wv.push_back(tape.constant(w));
    TapeForward fwd = forward_on_tape(net, tape, x, wv);
    return kl_softmax_on_tape(tape, tape.constant(clean_logits), fwd.logits);
  };
}

// Label smoothing: lambda * onehot + (1 - lambda)/C per class; rows sum to 1.
inline Tensor smooth_labels(const std::vector<int>& labels, std::size_t num_classes,
                            double lambda) {
  if (lambda < 0.0 || lambda > 1.0)
    throw ConfigError("smooth_labels: lambda must lie in [0,1]");
  Tensor out = Tensor::full({labels.size(), num_classes}, (1.0 - lambda) / num_classes);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= num_classes)
      throw ShapeError("smooth_labels: label out of range");
    out.at(i, static_cast<std::size_t>(labels[i])) += lambda;
  }
  return out;
}

// Adversarial weight perturbation: `steps` normalized ascent steps on the
// adversarial cross-entropy, each layer's perturbation projected onto the
// relative Frobenius ball ||V_l||_F <= gamma * ||W_l||_F. The caller
// evaluates the outer gradient at W + V and applies the update to W.
inline std::vector<Tensor> awp_wrap(const MlpNetwork& net, const LabeledBatch& adv_batch,
                                    double gamma, int steps) {
  if (gamma < 0.0) throw ConfigError("awp_wrap: gamma must be >= 0");
  if (steps < 1) throw ConfigError("awp_wrap: steps must be >= 1");
  std::vector<Tensor> v;
  v.reserve(net.n_layers());
  for (const Tensor& w : net.weights) v.push_back(Tensor::zeros(w.shape));
  if (gamma == 0.0) return v;

  MlpNetwork probe = net;
  for (int s = 0; s < steps; ++s) {
    for (std::size_t l = 0; l < net.n_layers(); ++l)
      probe.weights[l] = add(net.weights[l], v[l]);
    Tape tape;
    std::vector<Var> wv = register_weights(probe, tape);
    TapeForward fwd = forward_on_tape(probe, tape, tape.constant(adv_batch.x), wv);
    Var loss = cross_entropy_on_tape(tape, fwd.logits, adv_batch.y);
    tape.backward(loss);
    for (std::size_t l = 0; l < net.n_layers(); ++l) {
      const Tensor g = tape.grad(wv[l]);
      const double gn = frobenius_norm(g);
      if (gn == 0.0) continue;
      const double wn = frobenius_norm(net.weights[l]);
      const double step_scale = gamma * wn / gn;
      for (std::size_t i = 0; i < g.numel(); ++i) v[l].data[i] += step_scale * g.data[i];
      const double vn = frobenius_norm(v[l]);
      const double cap = gamma * wn;
      if (vn > cap && vn > 0.0) {
        const double shrink = cap / vn;
        for (double& x : v[l].data) x *= shrink;
      }
    }
  }
  return v;
}

namespace detail {

// Shared step scaffolding: builds the method objective on a tape whose weight
// leaves sit at W (+ V when the ascent wrapper is active), backpropagates,
// and applies one optimizer step to W. Returns the objective value.
struct StepGraph {
  Tape tape;
  std::vector<Var> weight_leaves;   // gradients accumulate here
  std::vector<Var> weight_vars;     // leaves, possibly shifted by the ascent offset
};

inline void build_weight_vars(StepGraph& g, const MlpNetwork& net,
                              const std::vector<Tensor>* awp_offset) {
  g.weight_leaves = register_weights(net, g.tape);
  g.weight_vars = g.weight_leaves;
  if (awp_offset) {
    for (std::size_t l = 0; l < net.n_layers(); ++l)
      g.weight_vars[l] = g.tape.add(g.weight_leaves[l], g.tape.constant((*awp_offset)[l]));
  }
}

}  // namespace detail

struct StepResult {
  double objective = 0.0;
  double penalty = 0.0;
};

// One optimizer step of the configured method on one minibatch. step_tag
// makes the attack and mixing randomness unique and reproducible per step.
inline StepResult train_step(MlpNetwork& net, Sgd& opt, const LabeledBatch& batch,
                             const TrainConfig& cfg, std::uint64_t step_tag) {
  const std::size_t num_classes =
      net.dims.empty() ? 0 : net.dims[net.n_layers()];
  AttackConfig atk = cfg.attack;
  atk.seed = derive_seed(cfg.seed, 0xA77, step_tag);

  // Inner maximization. The adversarial inputs are detached: weight
  // gradients never flow back through the attack trajectory.
  Tensor adv_x;
  Tensor clean_logits;
  if (cfg.method == Method::trades) {
    clean_logits = forward(net, batch.x);
    adv_x = pgd_perturb_objective(net, batch.x, kl_objective(net, clean_logits), atk);
  } else {
    adv_x = pgd_perturb(net, batch, atk);
  }

  std::optional<std::vector<Tensor>> awp_offset;
  if (cfg.awp)
    awp_offset = awp_wrap(net, {adv_x, batch.y}, cfg.awp_gamma, cfg.awp_steps);

  detail::StepGraph g;
  detail::build_weight_vars(g, net, awp_offset ? &*awp_offset : nullptr);
  Tape& tape = g.tape;

  // Both domains are forwarded once and shared by the objective and penalty.
  TapeForward clean_fwd = forward_on_tape(net, tape, tape.constant(batch.x), g.weight_vars);
  TapeForward adv_fwd = forward_on_tape(net, tape, tape.constant(adv_x), g.weight_vars);

  Var objective = tape.constant_scalar(0.0);
  switch (cfg.method) {
    case Method::at:
      objective = cross_entropy_on_tape(tape, adv_fwd.logits, batch.y);
      break;
    case Method::trades: {
      Var ce = cross_entropy_on_tape(tape, clean_fwd.logits, batch.y);
      Var kl = kl_softmax_on_tape(tape, clean_fwd.logits, adv_fwd.logits);
      objective = tape.add(ce, tape.scale(kl, cfg.trades_inv_lambda));
      break;
    }
    case Method::avmixup: {
      Rng mix_rng(derive_seed(cfg.seed, 0xA53D, step_tag));
      const std::size_t b = batch.x.rows(), d = batch.x.cols();
      Tensor mixed = Tensor::zeros({b, d});
      Tensor soft = Tensor::zeros({b, num_classes});
      const Tensor y1 = smooth_labels(batch.y, num_classes, cfg.avmixup_lambda1);
      const Tensor y2 = smooth_labels(batch.y, num_classes, cfg.avmixup_lambda2);
      for (std::size_t i = 0; i < b; ++i) {
        const double beta = mix_rng.beta(cfg.avmixup_beta_a, cfg.avmixup_beta_b);
        for (std::size_t j = 0; j < d; ++j) {
          const double s = batch.x.at(i, j);
          const double diff = cfg.avmixup_gamma * (adv_x.at(i, j) - s);
          mixed.at(i, j) = cfg.avmixup_anchored ? s + (1.0 - beta) * diff
                                                : beta * s + (1.0 - beta) * diff;
        }
        for (std::size_t c = 0; c < num_classes; ++c)
          soft.at(i, c) = beta * y1.at(i, c) + (1.0 - beta) * y2.at(i, c);
      }
      TapeForward mixed_fwd = forward_on_tape(net, tape, tape.constant(mixed), g.weight_vars);
      objective = soft_cross_entropy_on_tape(tape, mixed_fwd.logits, soft);
      break;
    }
  }

  double penalty_value = 0.0;
  if (cfg.alpha > 0.0 && cfg.s2o_mode != S2oMode::off) {
    Var penalty = s2o_penalty_on_tape(tape, net, g.weight_vars, {&clean_fwd, &adv_fwd},
                                      cfg.s2o_mode);
    penalty_value = tape.value(penalty).value();
    objective = tape.add(objective, tape.scale(penalty, cfg.alpha));
  }

  const double loss_value = tape.value(objective).value();
  if (!std::isfinite(loss_value)) {
    std::ostringstream os;
    os << "non-finite training objective (" << loss_value << ") at step tag " << step_tag
       << "; aborting before the optimizer step";
    throw NumericsError(os.str());
  }

  tape.backward(objective);
  std::vector<Tensor> grads;
  grads.reserve(net.n_layers());
  for (Var wv : g.weight_leaves) grads.push_back(tape.grad(wv));
  opt.step(net, grads);
  return {loss_value, penalty_value};
}

struct MetricsRecord {
  int epoch = 0;
  double lr = 0.0;
  double train_loss = 0.0;    // mean objective over the epoch's steps
  double penalty = 0.0;       // mean penalty value over the epoch's steps
  double clean_acc = 0.0;     // held-out split
  double robust_acc = 0.0;    // held-out split under the eval attack
};

struct TrainResult {
  MlpNetwork net;
  std::vector<MetricsRecord> history;
  bool aborted = false;
  std::string abort_reason;
};

using EpochCallback = std::function<void(int epoch, const MlpNetwork&, const MetricsRecord&)>;

// Full training loop: shuffled minibatches, stepped lr schedule (decay at
// each milestone epoch), per-epoch held-out evaluation. On a non-finite
// objective the loop stops and returns the last completed epoch's weights.
inline TrainResult run_training(const TrainConfig& cfg, const Dataset& data,
                                const EpochCallback& on_epoch = {}) {
  cfg.validate();
  if (data.train.x.rows() == 0) throw ConfigError("run_training: empty training split");

  std::vector<std::size_t> dims;
  dims.push_back(data.train.x.cols());
  for (std::size_t h : cfg.hidden) dims.push_back(h);
  dims.push_back(data.num_classes);

  TrainResult result;
  result.net = init_network(dims, cfg.activation, derive_seed(cfg.seed, 0x1217));
  Sgd opt(cfg.optimizer);

  AttackConfig eval_atk = cfg.eval_attack ? *cfg.eval_attack : cfg.attack;
  eval_atk.clamp = data.clamp;
  AttackConfig train_atk_base = cfg.attack;
  train_atk_base.clamp = data.clamp;

  const std::size_t n = data.train.x.rows();
  const std::size_t bs = cfg.batch_size == 0 ? n : std::min(cfg.batch_size, n);

  MlpNetwork last_good = result.net;
  std::uint64_t step_tag = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    double lr = cfg.optimizer.lr;
    for (int m : cfg.optimizer.milestones)
      if (epoch >= m) lr *= cfg.optimizer.decay;
    opt.lr = lr;

    Rng shuffle_rng(derive_seed(cfg.seed, 0x5F0F, static_cast<std::uint64_t>(epoch)));
    const std::vector<std::size_t> order = shuffle_rng.permutation(n);

    double loss_acc = 0.0, pen_acc = 0.0;
    std::size_t steps = 0;
    bool epoch_ok = true;
    for (std::size_t start = 0; start < n; start += bs) {
      std::vector<std::size_t> idx(order.begin() + static_cast<std::ptrdiff_t>(start),
                                   order.begin() +
                                       static_cast<std::ptrdiff_t>(std::min(start + bs, n)));
      LabeledBatch batch = take_rows(data.train, idx);
      TrainConfig step_cfg = cfg;
      step_cfg.attack = train_atk_base;
      try {
        StepResult sr = train_step(result.net, opt, batch, step_cfg, step_tag++);
        loss_acc += sr.objective;
        pen_acc += sr.penalty;
        ++steps;
      } catch (const NumericsError& e) {
        result.aborted = true;
        std::ostringstream os;
        os << "epoch " << epoch << ": " << e.what();
        result.abort_reason = os.str();
        result.net = last_good;
        epoch_ok = false;
        break;
      }
    }
    if (!epoch_ok) break;

    MetricsRecord rec;
    rec.epoch = epoch;
    rec.lr = lr;
    rec.train_loss = steps ? loss_acc / static_cast<double>(steps) : 0.0;
    rec.penalty = steps ? pen_acc / static_cast<double>(steps) : 0.0;
    AttackConfig ea = eval_atk;
    ea.seed = derive_seed(cfg.seed, 0xE7A1, static_cast<std::uint64_t>(epoch));
    rec.clean_acc = clean_eval(result.net, data.test).accuracy;
    rec.robust_acc = robust_eval(result.net, data.test, ea).accuracy;
    result.history.push_back(rec);
    last_good = result.net;
    if (on_epoch) on_epoch(epoch, result.net, rec);
  }
  return result;
}

}  // namespace s2o
