#pragma once

// Bias-free multilayer perceptron: f(s) = W_n act(W_{n-1} ... act(W_1 s)).
// Weight W_l has shape (dims[l] x dims[l-1]); batches are (B x d) with
// samples as rows, so a layer application is X W^T. Keeping the network
// bias-free preserves positive homogeneity for relu activations, which the
// norm-based capacity expressions assume.

#include <cstdint>
#include <string>
#include <vector>

#include "autodiff.hpp"
#include "rng.hpp"
#include "tensor.hpp"

namespace s2o {

enum class Activation { relu, tanh, linear };

inline std::string activation_name(Activation a) {
  switch (a) {
    case Activation::relu: return "relu";
    case Activation::tanh: return "tanh";
    case Activation::linear: return "linear";
  }
  return "?";
}

inline Activation activation_from_name(const std::string& s) {
  if (s == "relu") return Activation::relu;
  if (s == "tanh") return Activation::tanh;
  if (s == "linear") return Activation::linear;
  throw ConfigError("unknown activation '" + s + "' (expected relu|tanh|linear)");
}

struct MlpNetwork {
  std::vector<std::size_t> dims;  // [input, hidden..., classes]
  std::vector<Tensor> weights;    // weights[l]: dims[l+1] x dims[l]
  Activation activation = Activation::relu;

  std::size_t n_layers() const { return weights.size(); }
  std::size_t input_dim() const { return dims.front(); }
  std::size_t output_dim() const { return dims.back(); }
};

// He-uniform fan-in initialization: U(-sqrt(6/fan_in), sqrt(6/fan_in)).
inline MlpNetwork init_network(const std::vector<std::size_t>& dims, Activation act,
                               std::uint64_t seed) {
  if (dims.size() < 2) throw ConfigError("init_network: need at least input and output dims");
  for (std::size_t d : dims)
    if (d == 0) throw ConfigError("init_network: zero layer width");
  MlpNetwork net;
  net.dims = dims;
  net.activation = act;
  Rng rng(derive_seed(seed, 0x1217));
  for (std::size_t l = 0; l + 1 < dims.size(); ++l) {
    Tensor w = Tensor::zeros({dims[l + 1], dims[l]});
    const double limit = std::sqrt(6.0 / static_cast<double>(dims[l]));
    rng.fill_uniform(w, -limit, limit);
    w.requires_grad = true;
    net.weights.push_back(std::move(w));
  }
  return net;
}

inline void check_batch(const MlpNetwork& net, const Tensor& x) {
  require_matrix("forward", x);
  if (x.cols() != net.input_dim())
    throw ShapeError("forward: batch feature dim " + std::to_string(x.cols()) +
                     " does not match network input dim " + std::to_string(net.input_dim()));
}

struct ForwardCache {
  // act[l] is the input to layer l+1: act[0] = x, act[l] = activation(pre[l-1]).
  std::vector<Tensor> act;
  // pre[l] is the pre-activation of layer l+1 (logits for the last layer).
  std::vector<Tensor> pre;
};

inline Tensor apply_activation(const Tensor& pre, Activation act) {
  Tensor out = pre;
  switch (act) {
    case Activation::relu:
      for (double& v : out.data) v = v > 0.0 ? v : 0.0;
      break;
    case Activation::tanh:
      for (double& v : out.data) v = std::tanh(v);
      break;
    case Activation::linear:
      break;
  }
  return out;
}

inline double activation_derivative(Activation act, double pre) {
  switch (act) {
    case Activation::relu:
      return pre > 0.0 ? 1.0 : 0.0;
    case Activation::tanh: {
      const double t = std::tanh(pre);
      return 1.0 - t * t;
    }
    case Activation::linear:
      return 1.0;
  }
  return 1.0;
}

// Plain value forward; pass a cache to keep per-layer activations and
// pre-activations (the curvature recursion needs both).
inline Tensor forward(const MlpNetwork& net, const Tensor& x, ForwardCache* cache = nullptr) {
  check_batch(net, x);
  Tensor a = x;
  if (cache) {
    cache->act.clear();
    cache->pre.clear();
    cache->act.push_back(a);
  }
  for (std::size_t l = 0; l < net.n_layers(); ++l) {
    Tensor pre = matmul_nt(a, net.weights[l]);  // X W^T
    if (cache) cache->pre.push_back(pre);
    if (l + 1 < net.n_layers()) {
      a = apply_activation(pre, net.activation);
      if (cache) cache->act.push_back(a);
    } else {
      a = std::move(pre);
    }
  }
  return a;
}

inline ForwardCache forward_cache(const MlpNetwork& net, const Tensor& x) {
  ForwardCache cache;
  forward(net, x, &cache);
  return cache;
}

// --- tape-side forward ---

struct TapeForward {
  Var logits;
  std::vector<Var> activations;  // activations[l] = input to layer l+1 (activations[0] = x)
};

inline std::vector<Var> register_weights(const MlpNetwork& net, Tape& tape) {
  std::vector<Var> vars;
  vars.reserve(net.n_layers());
  for (const Tensor& w : net.weights) vars.push_back(tape.leaf(w));
  return vars;
}

inline TapeForward forward_on_tape(const MlpNetwork& net, Tape& tape, Var x,
                                   const std::vector<Var>& weight_vars) {
  check_batch(net, tape.value(x));
  if (weight_vars.size() != net.n_layers())
    throw ShapeError("forward_on_tape: expected " + std::to_string(net.n_layers()) +
                     " weight vars, got " + std::to_string(weight_vars.size()));
  TapeForward out;
  Var a = x;
  out.activations.push_back(a);
  for (std::size_t l = 0; l < net.n_layers(); ++l) {
    Var pre = tape.matmul(a, tape.transpose(weight_vars[l]));
    if (l + 1 < net.n_layers()) {
      switch (net.activation) {
        case Activation::relu: a = tape.relu(pre); break;
        case Activation::tanh: a = tape.tanh(pre); break;
        case Activation::linear: a = pre; break;
      }
      out.activations.push_back(a);
    } else {
      out.logits = pre;
    }
  }
  return out;
}

// --- losses ---

inline void check_labels(const Tensor& logits, const std::vector<int>& labels) {
  require_matrix("loss", logits);
  if (labels.size() != logits.rows())
    throw ShapeError("loss: label count " + std::to_string(labels.size()) +
                     " does not match batch rows " + std::to_string(logits.rows()));
  for (std::size_t i = 0; i < labels.size(); ++i)
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= logits.cols())
      throw ShapeError("loss: label " + std::to_string(labels[i]) + " out of range for " +
                       std::to_string(logits.cols()) + " classes at row " + std::to_string(i));
}

// Mean softmax cross-entropy at integer labels (tape version).
inline Var cross_entropy_on_tape(Tape& tape, Var logits, const std::vector<int>& labels) {
  check_labels(tape.value(logits), labels);
  Var ls = tape.log_softmax(logits);
  Var picked = tape.pick(ls, labels);
  return tape.scale(tape.sum(picked), -1.0 / static_cast<double>(labels.size()));
}

// Mean soft-label cross-entropy: -mean_b sum_c y[b,c] log_softmax(logits)[b,c].
inline Var soft_cross_entropy_on_tape(Tape& tape, Var logits, const Tensor& soft_labels) {
  require_same_shape("soft_cross_entropy", tape.value(logits), soft_labels);
  Var ls = tape.log_softmax(logits);
  Var prod = tape.mul(ls, tape.constant(soft_labels));
  return tape.scale(tape.sum(prod), -1.0 / static_cast<double>(soft_labels.rows()));
}

// Mean KL(softmax(p) || softmax(q)) rowwise; gradients flow into both
// arguments.
inline Var kl_softmax_on_tape(Tape& tape, Var logits_p, Var logits_q) {
  require_same_shape("kl_softmax", tape.value(logits_p), tape.value(logits_q));
  Var lp = tape.log_softmax(logits_p);
  Var lq = tape.log_softmax(logits_q);
  Var p = tape.exp(lp);
  Var term = tape.mul(p, tape.sub(lp, lq));
  return tape.scale(tape.sum(term), 1.0 / static_cast<double>(tape.value(logits_p).rows()));
}

// Value-side scalar losses for evaluation.

inline double cross_entropy(const Tensor& logits, const std::vector<int>& labels) {
  Tape tape;
  Var z = tape.constant(logits);
  Var loss = cross_entropy_on_tape(tape, z, labels);
  return tape.value(loss).value();
}

inline double kl_softmax(const Tensor& logits_p, const Tensor& logits_q) {
  Tape tape;
  Var loss = kl_softmax_on_tape(tape, tape.constant(logits_p), tape.constant(logits_q));
  return tape.value(loss).value();
}

// 0-1 margin loss at margin gamma: a row counts as a loss when
// logit[y] <= gamma + max_{j != y} logit[j] (ties count as losses).
inline double margin_loss(const Tensor& logits, const std::vector<int>& labels, double gamma) {
  check_labels(logits, labels);
  if (gamma < 0.0) throw ConfigError("margin_loss: gamma must be nonnegative");
  std::size_t losses = 0;
  for (std::size_t i = 0; i < logits.rows(); ++i) {
    const std::size_t y = static_cast<std::size_t>(labels[i]);
    double other = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < logits.cols(); ++j)
      if (j != y) other = std::max(other, logits.at(i, j));
    if (logits.at(i, y) <= gamma + other) ++losses;
  }
  return static_cast<double>(losses) / static_cast<double>(logits.rows());
}

// Strict-argmax accuracy: correct iff logit[y] beats every other class.
inline double accuracy(const Tensor& logits, const std::vector<int>& labels) {
  return 1.0 - margin_loss(logits, labels, 0.0);
}

}  // namespace s2o
