#pragma once

// Finite-difference validation of the reverse-mode gradients: every tape
// primitive over many random cases, and each full training objective with
// the attack inputs and any weight-ascent offset held fixed so both sides
// differentiate the identical function.

#include <cmath>
#include <cstdint>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "training.hpp"

namespace s2o {

struct GradCheckResult {
  std::string name;
  double rel_error = 0.0;
  std::size_t cases = 0;
  bool pass = false;
};

namespace gradcheck_detail {

// A case owns its leaf tensors and evaluates a scalar from them; the checker
// reads gradients analytically and by central differences.
struct Case {
  std::vector<Tensor> leaves;
  // Builds the scalar objective from tape leaves (one Var per leaf, in order).
  std::function<Var(Tape&, const std::vector<Var>&)> build;
};

inline double run_case(const Case& c, double fd_step) {
  Tape tape;
  std::vector<Var> vars;
  vars.reserve(c.leaves.size());
  for (const Tensor& t : c.leaves) {
    Tensor leaf = t;
    leaf.requires_grad = true;
    vars.push_back(tape.leaf(leaf));
  }
  Var root = c.build(tape, vars);
  tape.backward(root);

  double worst_ad = 0.0, worst_fd = 0.0, worst_diff = 0.0;
  for (std::size_t li = 0; li < c.leaves.size(); ++li) {
    const Tensor ad = tape.grad(vars[li]);
    for (std::size_t i = 0; i < c.leaves[li].numel(); ++i) {
      Case shifted = c;
      shifted.leaves[li].data[i] += fd_step;
      Tape tp;
      std::vector<Var> vp;
      for (const Tensor& t : shifted.leaves) vp.push_back(tp.constant(t));
      const double up = tp.value(shifted.build(tp, vp)).value();
      shifted.leaves[li].data[i] -= 2.0 * fd_step;
      Tape tm;
      std::vector<Var> vm;
      for (const Tensor& t : shifted.leaves) vm.push_back(tm.constant(t));
      const double down = tm.value(shifted.build(tm, vm)).value();
      const double fd = (up - down) / (2.0 * fd_step);
      worst_ad = std::max(worst_ad, std::abs(ad.data[i]));
      worst_fd = std::max(worst_fd, std::abs(fd));
      worst_diff = std::max(worst_diff, std::abs(ad.data[i] - fd));
    }
  }
  return worst_diff / std::max({worst_ad, worst_fd, 1e-8});
}

inline Tensor random_matrix(Rng& rng, std::size_t r, std::size_t c, double lo = -1.0,
                            double hi = 1.0) {
  Tensor t = Tensor::zeros({r, c});
  rng.fill_uniform(t, lo, hi);
  return t;
}

inline Tensor random_spd(Rng& rng, std::size_t n) {
  Tensor g = random_matrix(rng, n, n + 2);
  Tensor m = matmul_nt(g, g);
  for (std::size_t i = 0; i < n; ++i) m.at(i, i) += 0.5;
  return m;
}

}  // namespace gradcheck_detail

// One named primitive checked over `cases` random instances; the reported
// error is the worst over all cases.
inline GradCheckResult check_primitive(
    const std::string& name, std::uint64_t seed, std::size_t cases, double tol,
    const std::function<gradcheck_detail::Case(Rng&)>& make) {
  GradCheckResult res;
  res.name = name;
  res.cases = cases;
  Rng rng(derive_seed(seed, 0x6C, std::hash<std::string>{}(name)));
  for (std::size_t i = 0; i < cases; ++i) {
    const double err = gradcheck_detail::run_case(make(rng), 1e-5);
    res.rel_error = std::max(res.rel_error, err);
  }
  res.pass = res.rel_error < tol;
  return res;
}

// Objective gradient with respect to the weights for a fixed minibatch,
// fixed adversarial inputs, and fixed ascent offset: the same graph the
// training step builds, minus the optimizer.
inline double objective_for_weights(const MlpNetwork& net, const TrainConfig& cfg,
                                    const LabeledBatch& batch, const Tensor& adv_x,
                                    const std::vector<Tensor>* awp_offset,
                                    std::uint64_t mix_tag,
                                    std::vector<Tensor>* grads_out) {
  Tape tape;
  std::vector<Var> leaves = register_weights(net, tape);
  std::vector<Var> wv = leaves;
  if (awp_offset)
    for (std::size_t l = 0; l < wv.size(); ++l)
      wv[l] = tape.add(leaves[l], tape.constant((*awp_offset)[l]));

  TapeForward clean_fwd = forward_on_tape(net, tape, tape.constant(batch.x), wv);
  TapeForward adv_fwd = forward_on_tape(net, tape, tape.constant(adv_x), wv);
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
      const std::size_t num_classes = net.dims.back();
      Rng mix_rng(derive_seed(cfg.seed, 0xA53D, mix_tag));
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
      TapeForward mixed_fwd = forward_on_tape(net, tape, tape.constant(mixed), wv);
      objective = soft_cross_entropy_on_tape(tape, mixed_fwd.logits, soft);
      break;
    }
  }
  if (cfg.alpha > 0.0 && cfg.s2o_mode != S2oMode::off) {
    Var penalty = s2o_penalty_on_tape(tape, net, wv, {&clean_fwd, &adv_fwd}, cfg.s2o_mode);
    objective = tape.add(objective, tape.scale(penalty, cfg.alpha));
  }
  const double value = tape.value(objective).value();
  if (grads_out) {
    tape.backward(objective);
    grads_out->clear();
    for (Var v : leaves) grads_out->push_back(tape.grad(v));
  }
  return value;
}

// Full objective gradcheck: analytic weight gradients against central
// differences on a tiny net. The attack inputs are generated once outside
// the differentiated function.
inline GradCheckResult check_objective(const std::string& name, const TrainConfig& base_cfg,
                                       std::uint64_t seed, std::size_t cases, double tol) {
  GradCheckResult res;
  res.name = name;
  res.cases = cases;
  for (std::size_t k = 0; k < cases; ++k) {
    TrainConfig cfg = base_cfg;
    cfg.seed = derive_seed(seed, 0x0B7, k);
    MlpNetwork net = init_network({3, 4, 3}, Activation::tanh, derive_seed(seed, 0x9E7, k));
    Rng rng(derive_seed(seed, 0xDA7A, k));
    LabeledBatch batch;
    batch.x = gradcheck_detail::random_matrix(rng, 4, 3, 0.0, 1.0);
    for (int i = 0; i < 4; ++i) batch.y.push_back(static_cast<int>(rng.below(3)));

    AttackConfig atk = cfg.attack;
    atk.seed = derive_seed(cfg.seed, 0xA77, k);
    Tensor adv_x;
    if (cfg.method == Method::trades)
      adv_x = pgd_perturb_objective(net, batch.x, kl_objective(net, forward(net, batch.x)), atk);
    else
      adv_x = pgd_perturb(net, batch, atk);

    std::vector<Tensor> offset;
    std::vector<Tensor>* offset_ptr = nullptr;
    if (cfg.awp) {
      offset = awp_wrap(net, {adv_x, batch.y}, cfg.awp_gamma, cfg.awp_steps);
      offset_ptr = &offset;
    }

    std::vector<Tensor> ad;
    objective_for_weights(net, cfg, batch, adv_x, offset_ptr, k, &ad);

    double worst_ad = 0.0, worst_fd = 0.0, worst_diff = 0.0;
    const double step = 1e-5;
    for (std::size_t l = 0; l < net.n_layers(); ++l)
      for (std::size_t i = 0; i < net.weights[l].numel(); ++i) {
        MlpNetwork shifted = net;
        shifted.weights[l].data[i] += step;
        const double up =
            objective_for_weights(shifted, cfg, batch, adv_x, offset_ptr, k, nullptr);
        shifted.weights[l].data[i] -= 2.0 * step;
        const double down =
            objective_for_weights(shifted, cfg, batch, adv_x, offset_ptr, k, nullptr);
        const double fd = (up - down) / (2.0 * step);
        worst_ad = std::max(worst_ad, std::abs(ad[l].data[i]));
        worst_fd = std::max(worst_fd, std::abs(fd));
        worst_diff = std::max(worst_diff, std::abs(ad[l].data[i] - fd));
      }
    res.rel_error =
        std::max(res.rel_error, worst_diff / std::max({worst_ad, worst_fd, 1e-8}));
  }
  res.pass = res.rel_error < tol;
  return res;
}

// The whole suite: primitives at >= 100 cases each, every training objective
// composition on tiny nets.
inline std::vector<GradCheckResult> run_gradcheck_suite(std::uint64_t seed, double tol = 1e-5,
                                                        std::size_t primitive_cases = 100,
                                                        std::size_t objective_cases = 10) {
  using gradcheck_detail::Case;
  using gradcheck_detail::random_matrix;
  using gradcheck_detail::random_spd;
  std::vector<GradCheckResult> out;

  auto dims = [](Rng& rng) { return 2 + rng.below(3); };  // 2..4

  out.push_back(check_primitive("add", seed, primitive_cases, tol, [&](Rng& rng) {
    const std::size_t r = dims(rng), c = dims(rng);
    Case cs;
    cs.leaves = {random_matrix(rng, r, c), random_matrix(rng, r, c)};
    cs.build = [](Tape& t, const std::vector<Var>& v) {
      return t.frobenius_sq(t.add(v[0], v[1]));
    };
    return cs;
  }));
  out.push_back(check_primitive("sub_scale", seed, primitive_cases, tol, [&](Rng& rng) {
    const std::size_t r = dims(rng), c = dims(rng);
    Case cs;
    cs.leaves = {random_matrix(rng, r, c), random_matrix(rng, r, c)};
    cs.build = [](Tape& t, const std::vector<Var>& v) {
      return t.frobenius_sq(t.sub(t.scale(v[0], 1.7), v[1]));
    };
    return cs;
  }));
  out.push_back(check_primitive("hadamard", seed, primitive_cases, tol, [&](Rng& rng) {
    const std::size_t r = dims(rng), c = dims(rng);
    Case cs;
    cs.leaves = {random_matrix(rng, r, c), random_matrix(rng, r, c)};
    cs.build = [](Tape& t, const std::vector<Var>& v) { return t.sum(t.mul(v[0], v[1])); };
    return cs;
  }));
  out.push_back(check_primitive("matmul", seed, primitive_cases, tol, [&](Rng& rng) {
    const std::size_t r = dims(rng), k = dims(rng), c = dims(rng);
    Case cs;
    cs.leaves = {random_matrix(rng, r, k), random_matrix(rng, k, c)};
    cs.build = [](Tape& t, const std::vector<Var>& v) {
      return t.frobenius_sq(t.matmul(v[0], v[1]));
    };
    return cs;
  }));
  out.push_back(check_primitive("transpose", seed, primitive_cases, tol, [&](Rng& rng) {
    const std::size_t r = dims(rng), c = dims(rng);
    Case cs;
    cs.leaves = {random_matrix(rng, r, c)};
    cs.build = [](Tape& t, const std::vector<Var>& v) {
      return t.frobenius_sq(t.matmul(t.transpose(v[0]), v[0]));
    };
    return cs;
  }));
  out.push_back(check_primitive("diag_sum_mean", seed, primitive_cases, tol, [&](Rng& rng) {
    const std::size_t n = dims(rng);
    Case cs;
    cs.leaves = {random_matrix(rng, n, n)};
    cs.build = [](Tape& t, const std::vector<Var>& v) {
      return t.add(t.sum(t.diag_part(v[0])), t.mean(v[0]));
    };
    return cs;
  }));
  out.push_back(
      check_primitive("add_scaled_identity", seed, primitive_cases, tol, [&](Rng& rng) {
        const std::size_t n = dims(rng);
        Case cs;
        cs.leaves = {random_spd(rng, n)};
        cs.build = [](Tape& t, const std::vector<Var>& v) {
          Var tr = t.sum(t.diag_part(v[0]));
          return t.frobenius_sq(t.add_scaled_identity(v[0], tr, 0.01));
        };
        return cs;
      }));
  out.push_back(check_primitive("row_col_scale", seed, primitive_cases, tol, [&](Rng& rng) {
    const std::size_t n = dims(rng);
    Case cs;
    cs.leaves = {random_spd(rng, n)};
    cs.build = [](Tape& t, const std::vector<Var>& v) {
      Var s = t.pow_const(t.diag_part(v[0]), -0.5);
      return t.frobenius_sq(t.row_col_scale(v[0], s));
    };
    return cs;
  }));
  out.push_back(check_primitive("spd_inverse", seed, primitive_cases, tol, [&](Rng& rng) {
    const std::size_t n = dims(rng);
    Case cs;
    // The SPD argument is built on the tape from a general leaf: perturbing a
    // raw SPD leaf entrywise leaves the symmetric cone, where the factorized
    // forward and the idealized symmetric derivative legitimately disagree.
    cs.leaves = {random_matrix(rng, n, n + 2)};
    cs.build = [](Tape& t, const std::vector<Var>& v) {
      Var m = t.matmul(v[0], t.transpose(v[0]));
      Var tr = t.sum(t.diag_part(m));
      return t.frobenius_sq(t.spd_inverse(t.add_scaled_identity(m, tr, 0.1)));
    };
    return cs;
  }));
  out.push_back(check_primitive("relu_tanh", seed, primitive_cases, tol, [&](Rng& rng) {
    const std::size_t r = dims(rng), c = dims(rng);
    Case cs;
    // Keep entries away from the relu kink where the subgradient and the
    // finite difference legitimately disagree.
    Tensor m = random_matrix(rng, r, c);
    for (double& v : m.data)
      if (std::abs(v) < 1e-3) v += 0.1;
    cs.leaves = {m};
    cs.build = [](Tape& t, const std::vector<Var>& v) {
      return t.sum(t.add(t.relu(v[0]), t.tanh(v[0])));
    };
    return cs;
  }));
  out.push_back(check_primitive("exp_log_pow", seed, primitive_cases, tol, [&](Rng& rng) {
    const std::size_t r = dims(rng), c = dims(rng);
    Case cs;
    cs.leaves = {random_matrix(rng, r, c, 0.5, 2.0)};
    cs.build = [](Tape& t, const std::vector<Var>& v) {
      return t.sum(t.add(t.exp(t.scale(v[0], 0.3)), t.add(t.log(v[0]), t.pow_const(v[0], 1.5))));
    };
    return cs;
  }));
  out.push_back(check_primitive("log_softmax_pick", seed, primitive_cases, tol, [&](Rng& rng) {
    const std::size_t b = dims(rng), c = 2 + dims(rng);
    Case cs;
    cs.leaves = {random_matrix(rng, b, c, -2.0, 2.0)};
    std::vector<int> labels;
    for (std::size_t i = 0; i < b; ++i) labels.push_back(static_cast<int>(rng.below(c)));
    cs.build = [labels](Tape& t, const std::vector<Var>& v) {
      return t.neg(t.mean(t.pick(t.log_softmax(v[0]), labels)));
    };
    return cs;
  }));
  out.push_back(check_primitive("softmax_kl", seed, primitive_cases, tol, [&](Rng& rng) {
    const std::size_t b = dims(rng), c = 2 + dims(rng);
    Case cs;
    cs.leaves = {random_matrix(rng, b, c, -2.0, 2.0), random_matrix(rng, b, c, -2.0, 2.0)};
    cs.build = [](Tape& t, const std::vector<Var>& v) {
      return kl_softmax_on_tape(t, v[0], v[1]);
    };
    return cs;
  }));

  // Composite objectives: tiny tanh net, fixed attack inputs.
  TrainConfig base;
  base.attack.epsilon = 0.05;
  base.attack.step_size = 0.02;
  base.attack.iterations = 3;
  base.attack.random_start = true;
  base.alpha = 0.0;
  base.s2o_mode = S2oMode::off;

  {
    TrainConfig cfg = base;
    cfg.method = Method::at;
    out.push_back(check_objective("objective_at", cfg, seed, objective_cases, tol));
  }
  {
    TrainConfig cfg = base;
    cfg.method = Method::trades;
    out.push_back(check_objective("objective_trades", cfg, seed, objective_cases, tol));
  }
  {
    TrainConfig cfg = base;
    cfg.method = Method::avmixup;
    out.push_back(check_objective("objective_avmixup", cfg, seed, objective_cases, tol));
  }
  {
    TrainConfig cfg = base;
    cfg.method = Method::at;
    cfg.awp = true;
    cfg.awp_gamma = 0.01;
    out.push_back(check_objective("objective_awp_wrapped", cfg, seed, objective_cases, tol));
  }
  {
    TrainConfig cfg = base;
    cfg.method = Method::at;
    cfg.alpha = 0.3;
    cfg.s2o_mode = S2oMode::exact;
    out.push_back(check_objective("objective_s2o_exact", cfg, seed, objective_cases, tol));
  }
  {
    TrainConfig cfg = base;
    cfg.method = Method::at;
    cfg.alpha = 0.3;
    cfg.s2o_mode = S2oMode::fast;
    out.push_back(check_objective("objective_s2o_fast", cfg, seed, objective_cases, tol));
  }
  return out;
}

}  // namespace s2o
