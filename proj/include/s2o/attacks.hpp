#pragma once

// White-box first-order attacks under l-inf and l-2 threat models: one-shot
// gradient attacks (sign rule / normalized gradient) and projected gradient
// descent with optional random start. All per-sample: each batch row carries
// its own direction normalization and projection. PGD keeps the perturbation
// as loop state so the one-step/no-random-start case reproduces the one-shot
// attack bit for bit.

#include <cstdint>
#include <functional>
#include <optional>
#include <utility>
#include <vector>

#include "dataset.hpp"
#include "network.hpp"

namespace s2o {

enum class NormKind { linf, l2 };

inline std::string norm_name(NormKind n) { return n == NormKind::linf ? "linf" : "l2"; }

inline NormKind norm_from_name(const std::string& s) {
  if (s == "linf") return NormKind::linf;
  if (s == "l2") return NormKind::l2;
  throw ConfigError("unknown attack norm '" + s + "' (expected linf|l2)");
}

struct AttackConfig {
  NormKind norm = NormKind::linf;
  double epsilon = 8.0 / 255.0;
  double step_size = 2.0 / 255.0;
  int iterations = 10;
  bool random_start = true;
  std::uint64_t seed = 0;
  std::optional<std::pair<double, double>> clamp;

  // epsilon == 0 is admitted as the degenerate identity attack.
  void validate() const {
    if (epsilon < 0.0) throw ConfigError("attack: epsilon must be nonnegative");
    if (!(step_size > 0.0)) throw ConfigError("attack: step_size must be positive");
    if (iterations < 1) throw ConfigError("attack: iterations must be >= 1");
    if (clamp && !(clamp->first < clamp->second))
      throw ConfigError("attack: clamp range must have lo < hi");
  }
};

// Builds a scalar objective from the current adversarial inputs; the attack
// ascends it. The default objective is cross-entropy at the true labels.
using AttackObjective = std::function<Var(Tape&, Var)>;

inline AttackObjective ce_objective(const MlpNetwork& net, const std::vector<int>& labels) {
  return [&net, labels](Tape& tape, Var x) {
    // Weights enter as constants: only the input gradient is wanted here.
    std::vector<Var> weight_vars;
    weight_vars.reserve(net.n_layers());
    for (const Tensor& w : net.weights) weight_vars.push_back(tape.constant(w));
    TapeForward fwd = forward_on_tape(net, tape, x, weight_vars);
    return cross_entropy_on_tape(tape, fwd.logits, labels);
  };
}

// Gradient of the objective with respect to the inputs, weights held fixed.
inline Tensor input_gradient(const MlpNetwork& net, const Tensor& x, const AttackObjective& obj) {
  check_batch(net, x);
  Tape tape;
  Tensor xin = x;
  xin.requires_grad = true;
  Var xv = tape.leaf(xin);
  Var loss = obj(tape, xv);
  tape.backward(loss);
  return tape.grad(xv);
}

namespace detail {

// Steepest-ascent direction per row: sign(g) under l-inf, g/||g||_2 under
// l-2; zero-gradient rows get a zero direction.
inline Tensor ascent_direction(const Tensor& grad, NormKind norm) {
  Tensor dir = grad;
  const std::size_t b = grad.rows(), d = grad.cols();
  if (norm == NormKind::linf) {
    for (double& v : dir.data) v = v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0);
  } else {
    for (std::size_t i = 0; i < b; ++i) {
      double n2 = 0.0;
      for (std::size_t j = 0; j < d; ++j) n2 += grad.at(i, j) * grad.at(i, j);
      const double n = std::sqrt(n2);
      if (n == 0.0) {
        for (std::size_t j = 0; j < d; ++j) dir.at(i, j) = 0.0;
      } else {
        for (std::size_t j = 0; j < d; ++j) dir.at(i, j) = grad.at(i, j) / n;
      }
    }
  }
  return dir;
}

inline void clamp_rows(Tensor& x, const std::optional<std::pair<double, double>>& clamp) {
  if (!clamp) return;
  for (double& v : x.data) v = std::min(clamp->second, std::max(clamp->first, v));
}

// Rounding in adv = clean + delta can land the measured difference a fraction
// of an ulp past the budget even though delta itself was projected. Walk the
// offending entries back toward the clean point until the measured
// perturbation is within epsilon with no slack at all. Every move stays
// between clean and adv, so clamp ranges are preserved. Shared by the
// one-shot and iterated attacks, which keeps their outputs bitwise equal in
// the one-step configuration.
inline void enforce_budget(const Tensor& clean, Tensor& adv, double epsilon, NormKind norm) {
  const std::size_t b = clean.rows(), d = clean.cols();
  if (norm == NormKind::linf) {
    for (std::size_t i = 0; i < clean.numel(); ++i)
      while (std::abs(adv.data[i] - clean.data[i]) > epsilon)
        adv.data[i] = std::nextafter(adv.data[i], clean.data[i]);
    return;
  }
  for (std::size_t i = 0; i < b; ++i) {
    for (;;) {
      double n2 = 0.0;
      for (std::size_t j = 0; j < d; ++j) {
        const double dv = adv.at(i, j) - clean.at(i, j);
        n2 += dv * dv;
      }
      const double n = std::sqrt(n2);
      if (n <= epsilon) break;
      const double s = epsilon / n;
      bool changed = false;
      for (std::size_t j = 0; j < d; ++j) {
        const double nd = clean.at(i, j) + s * (adv.at(i, j) - clean.at(i, j));
        if (nd != adv.at(i, j)) {
          adv.at(i, j) = nd;
          changed = true;
        }
      }
      // The rescale can be an identity at machine precision; force one ulp
      // of progress so the loop terminates.
      if (!changed)
        for (std::size_t j = 0; j < d; ++j)
          adv.at(i, j) = std::nextafter(adv.at(i, j), clean.at(i, j));
    }
  }
}

}  // namespace detail

// Projects each row of delta onto the epsilon-ball. l-inf clips coordinates;
// l-2 rescales to the sphere only when the row is outside the ball, with a
// one-ulp-scale tolerance so exact boundary points pass through unchanged.
inline Tensor project(const Tensor& delta, double epsilon, NormKind norm) {
  if (epsilon < 0.0) throw ConfigError("project: epsilon must be nonnegative");
  require_matrix("project", delta);
  Tensor out = delta;
  const std::size_t b = delta.rows(), d = delta.cols();
  if (norm == NormKind::linf) {
    for (double& v : out.data) v = std::min(epsilon, std::max(-epsilon, v));
  } else {
    for (std::size_t i = 0; i < b; ++i) {
      double n2 = 0.0;
      for (std::size_t j = 0; j < d; ++j) n2 += out.at(i, j) * out.at(i, j);
      const double n = std::sqrt(n2);
      if (n > epsilon * (1.0 + 1e-12)) {
        const double s = epsilon / n;
        for (std::size_t j = 0; j < d; ++j) out.at(i, j) *= s;
      }
    }
  }
  return out;
}

// One-shot gradient attack: epsilon * sign(grad) under l-inf (FGSM),
// epsilon * grad/||grad|| under l-2 (FGM). Clamp applied last.
inline Tensor fgm_perturb(const MlpNetwork& net, const LabeledBatch& batch, double epsilon,
                          NormKind norm,
                          const std::optional<std::pair<double, double>>& clamp = std::nullopt) {
  if (epsilon < 0.0) throw ConfigError("fgm_perturb: epsilon must be nonnegative");
  const Tensor grad = input_gradient(net, batch.x, ce_objective(net, batch.y));
  const Tensor dir = detail::ascent_direction(grad, norm);
  Tensor adv = batch.x;
  for (std::size_t i = 0; i < adv.numel(); ++i) adv.data[i] += epsilon * dir.data[i];
  detail::clamp_rows(adv, clamp);
  detail::enforce_budget(batch.x, adv, epsilon, norm);
  return adv;
}

// PGD with a custom objective (TRADES uses a KL objective; everything else
// uses cross-entropy at the labels). Each iteration: ascent step on delta,
// projection onto the epsilon-ball around the clean input, clamp.
inline Tensor pgd_perturb_objective(const MlpNetwork& net, const Tensor& clean,
                                    const AttackObjective& obj, const AttackConfig& cfg) {
  cfg.validate();
  check_batch(net, clean);
  const std::size_t b = clean.rows(), d = clean.cols();
  Tensor delta = Tensor::zeros({b, d});
  if (cfg.random_start && cfg.epsilon > 0.0) {
    Rng rng(derive_seed(cfg.seed, 0xA77AC4));
    if (cfg.norm == NormKind::linf) {
      rng.fill_uniform(delta, -cfg.epsilon, cfg.epsilon);
    } else {
      // Uniform in the l2 ball: uniform direction, radius epsilon * u^(1/d).
      for (std::size_t i = 0; i < b; ++i) {
        double n2 = 0.0;
        std::vector<double> dirv(d);
        for (std::size_t j = 0; j < d; ++j) {
          dirv[j] = rng.normal();
          n2 += dirv[j] * dirv[j];
        }
        const double n = std::sqrt(n2);
        const double radius =
            cfg.epsilon * std::pow(rng.uniform(), 1.0 / static_cast<double>(d));
        if (n > 0.0)
          for (std::size_t j = 0; j < d; ++j) delta.at(i, j) = radius * dirv[j] / n;
      }
    }
  }
  Tensor adv = s2o::add(clean, delta);
  if (cfg.clamp) {
    detail::clamp_rows(adv, cfg.clamp);
    delta = s2o::sub(adv, clean);
  }
  for (int it = 0; it < cfg.iterations; ++it) {
    const Tensor grad = input_gradient(net, adv, obj);
    const Tensor dir = detail::ascent_direction(grad, cfg.norm);
    for (std::size_t i = 0; i < delta.numel(); ++i)
      delta.data[i] += cfg.step_size * dir.data[i];
    delta = project(delta, cfg.epsilon, cfg.norm);
    adv = s2o::add(clean, delta);
    if (cfg.clamp) {
      detail::clamp_rows(adv, cfg.clamp);
      delta = s2o::sub(adv, clean);
    }
  }
  detail::enforce_budget(clean, adv, cfg.epsilon, cfg.norm);
  return adv;
}

inline Tensor pgd_perturb(const MlpNetwork& net, const LabeledBatch& batch,
                          const AttackConfig& cfg) {
  return pgd_perturb_objective(net, batch.x, ce_objective(net, batch.y), cfg);
}

struct EvalResult {
  double accuracy = 0.0;
  double mean_loss = 0.0;
};

inline EvalResult clean_eval(const MlpNetwork& net, const LabeledBatch& batch) {
  const Tensor logits = forward(net, batch.x);
  return {accuracy(logits, batch.y), cross_entropy(logits, batch.y)};
}

// Accuracy on attacked inputs. iterations == 1 with no random start and
// step_size >= epsilon degenerates to the one-shot attack.
inline EvalResult robust_eval(const MlpNetwork& net, const LabeledBatch& batch,
                              const AttackConfig& cfg) {
  const Tensor adv = pgd_perturb(net, batch, cfg);
  const Tensor logits = forward(net, adv);
  return {accuracy(logits, batch.y), cross_entropy(logits, batch.y)};
}

inline double robust_accuracy(const MlpNetwork& net, const LabeledBatch& batch,
                              const AttackConfig& cfg) {
  return robust_eval(net, batch, cfg).accuracy;
}

// Mean adversarial loss after each PGD step count 0..iterations; diagnostic
// for the expected (approximate) monotonicity of the inner maximization.
inline std::vector<double> pgd_loss_curve(const MlpNetwork& net, const LabeledBatch& batch,
                                          const AttackConfig& cfg) {
  std::vector<double> curve;
  curve.push_back(cross_entropy(forward(net, batch.x), batch.y));
  for (int k = 1; k <= cfg.iterations; ++k) {
    AttackConfig c = cfg;
    c.iterations = k;
    const Tensor adv = pgd_perturb(net, batch, c);
    curve.push_back(cross_entropy(forward(net, adv), batch.y));
  }
  return curve;
}

// Largest per-row perturbation norm; the budget-exactness checks use it.
inline double max_perturbation(const Tensor& clean, const Tensor& adv, NormKind norm) {
  require_same_shape("max_perturbation", clean, adv);
  const std::size_t b = clean.rows(), d = clean.cols();
  double worst = 0.0;
  for (std::size_t i = 0; i < b; ++i) {
    if (norm == NormKind::linf) {
      for (std::size_t j = 0; j < d; ++j)
        worst = std::max(worst, std::abs(adv.at(i, j) - clean.at(i, j)));
    } else {
      double n2 = 0.0;
      for (std::size_t j = 0; j < d; ++j) {
        const double dv = adv.at(i, j) - clean.at(i, j);
        n2 += dv * dv;
      }
      worst = std::max(worst, std::sqrt(n2));
    }
  }
  return worst;
}

}  // namespace s2o
