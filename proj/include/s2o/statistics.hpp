#pragma once

// Second-order statistics of weights: batch second moments of layer inputs,
// Gauss-Newton pre-activation curvature, Kronecker-factored Laplace
// covariance, posterior weight sampling, and the correlation matrices (with
// their two Kronecker marginals) that the generalization bounds consume.
//
// Vectorization convention, fixed project-wide: matrices are flattened
// row-major, so for a weight matrix W (rows x cols) the flat index of W[i,j]
// is i*cols + j. Under this convention a Kronecker-structured covariance of
// vec(W) has the ROW-index factor on the left: Cov = F_row (x) F_col, where
// F_row is rows x rows and F_col is cols x cols.

#include <cmath>
#include <cstdint>
#include <optional>
#include <sstream>
#include <utility>
#include <vector>

#include "attacks.hpp"
#include "linalg.hpp"
#include "network.hpp"

namespace s2o {

enum class DomainTag { clean, adversarial };

inline std::string domain_name(DomainTag d) {
  return d == DomainTag::clean ? "clean" : "adversarial";
}

inline DomainTag domain_from_name(const std::string& s) {
  if (s == "clean") return DomainTag::clean;
  if (s == "adversarial") return DomainTag::adversarial;
  throw ConfigError("unknown domain tag '" + s + "' (expected clean|adversarial)");
}

enum class EstimatorTag { sampling, laplace };

inline std::string estimator_name(EstimatorTag e) {
  return e == EstimatorTag::sampling ? "sampling" : "laplace";
}

// Running second moments of each layer's input activations: per layer l the
// mean over samples of a_{l-1} a_{l-1}^T, where a_0 is the network input and
// a_l the post-activation. Single-writer accumulator.
struct ActivationStats {
  std::vector<Tensor> sums;  // one (dims[l] x dims[l]) matrix per weight layer
  std::size_t count = 0;
  DomainTag domain = DomainTag::clean;

  explicit ActivationStats(DomainTag d = DomainTag::clean) : domain(d) {}

  void accumulate_cache(const MlpNetwork& net, const Tensor& x, const ForwardCache& cache) {
    check_batch(net, x);
    if (cache.act.size() != net.n_layers() ||
        cache.act[0].shape != x.shape || cache.act[0].data != x.data)
      throw NumericsError("accumulate_activations: activation cache is stale for this batch");
    if (sums.empty()) {
      sums.reserve(net.n_layers());
      for (std::size_t l = 0; l < net.n_layers(); ++l)
        sums.push_back(Tensor::zeros({net.dims[l], net.dims[l]}));
    } else if (sums.size() != net.n_layers()) {
      throw ShapeError("accumulate_activations: accumulator was built for a different network");
    }
    for (std::size_t l = 0; l < net.n_layers(); ++l) {
      const Tensor& a = cache.act[l];  // batch x dims[l]
      sums[l] = add(sums[l], matmul_tn(a, a));
    }
    count += x.rows();
  }

  void accumulate(const MlpNetwork& net, const Tensor& x) {
    accumulate_cache(net, x, forward_cache(net, x));
  }

  Tensor mean(std::size_t l) const {
    if (count == 0) throw NumericsError("activation stats read before any accumulation");
    if (l >= sums.size()) throw ShapeError("activation stats: layer index out of range");
    return s2o::scale(sums[l], 1.0 / static_cast<double>(count));
  }

  std::vector<Tensor> means() const {
    std::vector<Tensor> out;
    out.reserve(sums.size());
    for (std::size_t l = 0; l < sums.size(); ++l) out.push_back(mean(l));
    return out;
  }
};

enum class CurvatureHead { softmax_ce, squared_error };

// Per-layer Gauss-Newton curvature of the loss with respect to each layer's
// pre-activation, averaged over the batch. Output layer: diag(p) - p p^T for
// the softmax cross-entropy head, identity for the squared-error head
// (loss 0.5*||f - y||^2). Hidden layers follow the backward recursion
// H_l = D_l W_{l+1}^T H_{l+1} W_{l+1} D_l with D_l = diag(act'(pre_l)),
// evaluated per sample before averaging. PSD by construction.
inline std::vector<Tensor> ggn_preactivation_curvature(
    const MlpNetwork& net, const Tensor& x, CurvatureHead head = CurvatureHead::softmax_ce) {
  check_batch(net, x);
  const std::size_t n = net.n_layers();
  const std::size_t b = x.rows();
  const ForwardCache cache = forward_cache(net, x);
  std::vector<Tensor> acc;
  acc.reserve(n);
  for (std::size_t l = 0; l < n; ++l)
    acc.push_back(Tensor::zeros({net.dims[l + 1], net.dims[l + 1]}));

  const std::size_t out_dim = net.dims[n];
  for (std::size_t s = 0; s < b; ++s) {
    Tensor h = Tensor::zeros({out_dim, out_dim});
    if (head == CurvatureHead::squared_error) {
      h = Tensor::identity(out_dim);
    } else {
      // Softmax probabilities of this sample from the cached logits.
      std::vector<double> p(out_dim);
      double mx = cache.pre[n - 1].at(s, 0);
      for (std::size_t j = 1; j < out_dim; ++j) mx = std::max(mx, cache.pre[n - 1].at(s, j));
      double z = 0.0;
      for (std::size_t j = 0; j < out_dim; ++j) {
        p[j] = std::exp(cache.pre[n - 1].at(s, j) - mx);
        z += p[j];
      }
      for (std::size_t j = 0; j < out_dim; ++j) p[j] /= z;
      for (std::size_t i = 0; i < out_dim; ++i)
        for (std::size_t j = 0; j < out_dim; ++j)
          h.at(i, j) = (i == j ? p[i] : 0.0) - p[i] * p[j];
    }
    acc[n - 1] = add(acc[n - 1], h);
    for (std::size_t l = n - 1; l-- > 0;) {
      const Tensor& w_next = net.weights[l + 1];
      Tensor m = matmul_tn(w_next, matmul(h, w_next));  // W^T H W
      // Sandwich with the activation derivative at this sample's pre-acts.
      const std::size_t dim = net.dims[l + 1];
      std::vector<double> d(dim);
      for (std::size_t i = 0; i < dim; ++i)
        d[i] = activation_derivative(net.activation, cache.pre[l].at(s, i));
      for (std::size_t i = 0; i < dim; ++i)
        for (std::size_t j = 0; j < dim; ++j) m.at(i, j) *= d[i] * d[j];
      h = std::move(m);
      acc[l] = add(acc[l], h);
    }
  }
  for (std::size_t l = 0; l < n; ++l)
    acc[l] = s2o::scale(acc[l], 1.0 / static_cast<double>(b));
  return acc;
}

// Inverse Kronecker factors of the per-layer posterior covariance around the
// trained weights: curvature_inv (x) activation_inv covers vec(W_l) under the
// row-major convention (curvature factor indexes rows). The full
// (rows*cols)^2 matrix is never formed here.
struct LaplaceLayer {
  Tensor curvature_inv;   // rows x rows: inverse of (E[H_l] + lambda I)
  Tensor activation_inv;  // cols x cols: inverse of (E[A_{l-1}] + lambda I)
};

// damping: absent -> trace-relative default per factor (1e-6 * trace/dim);
// 0 -> exact inverse; any other value -> absolute ridge added to both factors.
inline std::vector<LaplaceLayer> laplace_covariance(const ActivationStats& stats,
                                                    const std::vector<Tensor>& curvature,
                                                    std::optional<double> damping = std::nullopt) {
  if (stats.sums.size() != curvature.size())
    throw ShapeError("laplace_covariance: activation and curvature layer counts differ");
  std::vector<LaplaceLayer> out;
  out.reserve(curvature.size());
  for (std::size_t l = 0; l < curvature.size(); ++l) {
    const Tensor a_mean = stats.mean(l);
    const Tensor& h_mean = curvature[l];
    const double lam_a = damping ? *damping : default_damping(a_mean);
    const double lam_h = damping ? *damping : default_damping(h_mean);
    try {
      out.push_back({spd_inverse(h_mean, lam_h), spd_inverse(a_mean, lam_a)});
    } catch (const NumericsError& e) {
      std::ostringstream os;
      os << "laplace_covariance: factor inversion failed at layer " << l << ": " << e.what();
      throw NumericsError(os.str());
    }
  }
  return out;
}

// One layer's correlation description. Laplace estimates keep the two
// correlation-normalized Kronecker factors and never store the dense matrix;
// sampling estimates store the dense empirical correlation. Both carry the
// marginals r_prime = E[U^T U]/sigma^2 (cols x cols, diagonal = rows) and
// r_dprime = E[U U^T]/sigma^2 (rows x rows, diagonal = cols).
struct LayerCorrelation {
  std::size_t rows = 0;                // weight matrix height
  std::size_t cols = 0;                // weight matrix width
  std::optional<Tensor> dense;         // (rows*cols)^2 correlation, sampling path
  std::optional<Tensor> row_factor;    // rows x rows unit-diagonal factor, laplace path
  std::optional<Tensor> col_factor;    // cols x cols unit-diagonal factor, laplace path
  Tensor r_prime;
  Tensor r_dprime;
  double sigma = 0.0;                  // mean diagonal std before normalization
  double log_det_r = 0.0;
  bool degenerate = false;

  // Materializes the dense correlation; refuses above the cap to keep the
  // quadratic blow-up opt-in.
  Tensor dense_r(std::size_t cap = 4096) const {
    if (dense) return *dense;
    if (!row_factor || !col_factor)
      throw NumericsError("layer correlation holds neither dense matrix nor factors");
    const std::size_t d = rows * cols;
    if (d > cap) {
      std::ostringstream os;
      os << "dense correlation of dimension " << d << " exceeds cap " << cap;
      throw NumericsError(os.str());
    }
    return kron(*row_factor, *col_factor);
  }
};

struct CorrelationEstimate {
  std::vector<LayerCorrelation> layers;
  EstimatorTag estimator = EstimatorTag::laplace;
  DomainTag domain = DomainTag::clean;
  std::uint64_t seed = 0;
};

// Elementwise correlation normalization of a dense covariance:
// R[i,j] = C[i,j]/sqrt(C[i,i]*C[j,j]).
inline Tensor correlation_from_covariance(const Tensor& cov) {
  return correlation_normalize(cov);
}

// Marginals of a dense correlation of vec(U) for U of shape rows x cols,
// flat index (i,j) -> i*cols + j. The first marginal sums the cols x cols
// diagonal blocks (E[U^T U]/sigma^2); the second sums with stride cols
// (E[U U^T]/sigma^2).
inline std::pair<Tensor, Tensor> kronecker_marginals_dense(const Tensor& r, std::size_t rows,
                                                           std::size_t cols) {
  require_square("kronecker_marginals", r);
  if (r.rows() != rows * cols) {
    std::ostringstream os;
    os << "kronecker_marginals: matrix of dimension " << r.rows() << " does not factor as "
       << rows << "*" << cols;
    throw ShapeError(os.str());
  }
  Tensor rp = Tensor::zeros({cols, cols});
  Tensor rdp = Tensor::zeros({rows, rows});
  for (std::size_t a = 0; a < cols; ++a)
    for (std::size_t c = 0; c < cols; ++c) {
      double acc = 0.0;
      for (std::size_t i = 0; i < rows; ++i) acc += r.at(i * cols + a, i * cols + c);
      rp.at(a, c) = acc;
    }
  for (std::size_t a = 0; a < rows; ++a)
    for (std::size_t c = 0; c < rows; ++c) {
      double acc = 0.0;
      for (std::size_t j = 0; j < cols; ++j) acc += r.at(a * cols + j, c * cols + j);
      rdp.at(a, c) = acc;
    }
  return {rp, rdp};
}

// Square-layer convenience: infers rows = cols = sqrt(dim).
inline std::pair<Tensor, Tensor> kronecker_marginals(const Tensor& r) {
  require_square("kronecker_marginals", r);
  const std::size_t d = r.rows();
  const auto h = static_cast<std::size_t>(std::llround(std::sqrt(static_cast<double>(d))));
  if (h * h != d) {
    std::ostringstream os;
    os << "kronecker_marginals: dimension " << d
       << " is not a perfect square; supply explicit row/col dims";
    throw ShapeError(os.str());
  }
  return kronecker_marginals_dense(r, h, h);
}

// Closed forms for a factored correlation R = row_factor (x) col_factor:
// E[U^T U] picks up the trace of the row factor and vice versa.
inline std::pair<Tensor, Tensor> kronecker_marginals_factored(const Tensor& row_factor,
                                                              const Tensor& col_factor) {
  require_square("kronecker_marginals_factored", row_factor);
  require_square("kronecker_marginals_factored", col_factor);
  return {s2o::scale(col_factor, trace(row_factor)), s2o::scale(row_factor, trace(col_factor))};
}

inline std::pair<Tensor, Tensor> kronecker_marginals(const LayerCorrelation& layer) {
  if (layer.row_factor && layer.col_factor)
    return kronecker_marginals_factored(*layer.row_factor, *layer.col_factor);
  if (layer.dense) return kronecker_marginals_dense(*layer.dense, layer.rows, layer.cols);
  throw NumericsError("layer correlation holds neither dense matrix nor factors");
}

// Correlation estimate from inverse Kronecker covariance factors. Factors are
// normalized independently (correlation of a Kronecker product is the
// Kronecker product of the factor correlations). The column factor is exactly
// the normalized inverse input second moment, the matrix the exact penalty
// mode optimizes. sigma is the mean of sqrt(diag) over the implied dense
// diagonal, which factorizes into a product of per-factor means.
inline CorrelationEstimate correlation_from_covariance(const std::vector<LaplaceLayer>& factors,
                                                       DomainTag domain,
                                                       std::uint64_t seed = 0) {
  CorrelationEstimate est;
  est.estimator = EstimatorTag::laplace;
  est.domain = domain;
  est.seed = seed;
  est.layers.reserve(factors.size());
  for (const LaplaceLayer& f : factors) {
    LayerCorrelation lc;
    lc.rows = f.curvature_inv.rows();
    lc.cols = f.activation_inv.rows();
    lc.row_factor = correlation_normalize(f.curvature_inv);
    lc.col_factor = correlation_normalize(f.activation_inv);
    auto [rp, rdp] = kronecker_marginals_factored(*lc.row_factor, *lc.col_factor);
    lc.r_prime = std::move(rp);
    lc.r_dprime = std::move(rdp);
    double mr = 0.0, mc = 0.0;
    for (std::size_t i = 0; i < lc.rows; ++i) mr += std::sqrt(f.curvature_inv.at(i, i));
    for (std::size_t j = 0; j < lc.cols; ++j) mc += std::sqrt(f.activation_inv.at(j, j));
    lc.sigma = (mr / static_cast<double>(lc.rows)) * (mc / static_cast<double>(lc.cols));
    // det(A (x) B) = det(A)^dim(B) * det(B)^dim(A).
    lc.log_det_r = static_cast<double>(lc.cols) * log_det_spd(*lc.row_factor) +
                   static_cast<double>(lc.rows) * log_det_spd(*lc.col_factor);
    est.layers.push_back(std::move(lc));
  }
  return est;
}

// Weight snapshots W + eta whose loss stays within eps_prime of the base
// loss, produced by low-learning-rate noisy training from a converged net.
struct WeightSampleSet {
  std::vector<std::vector<Tensor>> samples;  // per snapshot, per layer
  std::vector<double> losses;                // designated-dataset loss per snapshot
  double base_loss = 0.0;
  double eps_prime = 0.0;
};

// One noisy low-lr training trajectory from the converged base network:
// each epoch injects fresh per-layer Gaussian noise (std proportional to the
// layer's Frobenius norm over sqrt(entry count)), takes one full-batch
// gradient step at the given learning rate, and keeps the snapshot iff its
// loss deviates from the base loss by at most eps_prime. The base network is
// left untouched; the trajectory continues from the perturbed weights.
inline WeightSampleSet sample_posterior_weights(const MlpNetwork& net, const LabeledBatch& data,
                                                double noise_std, int epochs, double lr,
                                                double eps_prime, std::uint64_t seed) {
  if (epochs < 1) throw ConfigError("sample_posterior_weights: epochs must be >= 1");
  if (noise_std < 0.0) throw ConfigError("sample_posterior_weights: noise_std must be >= 0");
  if (eps_prime < 0.0) throw ConfigError("sample_posterior_weights: eps_prime must be >= 0");
  check_batch(net, data.x);

  WeightSampleSet set;
  set.eps_prime = eps_prime;
  set.base_loss = cross_entropy(forward(net, data.x), data.y);

  MlpNetwork work = net;
  Rng rng(derive_seed(seed, 0x5EED5A));
  for (int epoch = 0; epoch < epochs; ++epoch) {
    for (Tensor& w : work.weights) {
      const double sd = noise_std * frobenius_norm(w) /
                        std::sqrt(static_cast<double>(w.numel()));
      if (sd > 0.0)
        for (double& v : w.data) v += sd * rng.normal();
    }
    {
      Tape tape;
      std::vector<Var> wv = register_weights(work, tape);
      Var xv = tape.constant(data.x);
      TapeForward fwd = forward_on_tape(work, tape, xv, wv);
      Var loss = cross_entropy_on_tape(tape, fwd.logits, data.y);
      tape.backward(loss);
      for (std::size_t l = 0; l < work.n_layers(); ++l) {
        const Tensor g = tape.grad(wv[l]);
        for (std::size_t i = 0; i < g.numel(); ++i)
          work.weights[l].data[i] -= lr * g.data[i];
      }
    }
    const double loss_now = cross_entropy(forward(work, data.x), data.y);
    if (std::abs(loss_now - set.base_loss) <= eps_prime) {
      set.samples.push_back(work.weights);
      set.losses.push_back(loss_now);
    }
  }
  if (set.samples.size() < 5) {
    std::ostringstream os;
    os << "posterior sampling retained only " << set.samples.size() << " of " << epochs
       << " snapshots; increase eps_prime or reduce noise_std";
    throw ConfigError(os.str());
  }
  return set;
}

// Empirical correlation of vec(W + eta) across retained snapshots, per layer,
// with marginals from the dense contraction path. A layer whose snapshots are
// all identical is flagged degenerate (identity correlation stands in); a
// layer where only some entries are frozen cannot be normalized and errors.
inline CorrelationEstimate correlation_from_samples(const WeightSampleSet& set, DomainTag domain,
                                                    std::uint64_t seed = 0) {
  const std::size_t s_count = set.samples.size();
  if (s_count < 5) throw ConfigError("correlation_from_samples: need at least 5 samples");
  const std::size_t n_layers = set.samples.front().size();
  CorrelationEstimate est;
  est.estimator = EstimatorTag::sampling;
  est.domain = domain;
  est.seed = seed;
  est.layers.reserve(n_layers);

  for (std::size_t l = 0; l < n_layers; ++l) {
    const std::size_t rows = set.samples.front()[l].rows();
    const std::size_t cols = set.samples.front()[l].cols();
    const std::size_t d = rows * cols;
    Tensor mean = Tensor::zeros({d});
    for (std::size_t s = 0; s < s_count; ++s)
      for (std::size_t i = 0; i < d; ++i) mean[i] += set.samples[s][l].data[i];
    for (std::size_t i = 0; i < d; ++i) mean[i] /= static_cast<double>(s_count);

    Tensor cov = Tensor::zeros({d, d});
    for (std::size_t s = 0; s < s_count; ++s) {
      std::vector<double> dev(d);
      for (std::size_t i = 0; i < d; ++i) dev[i] = set.samples[s][l].data[i] - mean[i];
      for (std::size_t i = 0; i < d; ++i) {
        if (dev[i] == 0.0) continue;
        for (std::size_t j = 0; j < d; ++j) cov.at(i, j) += dev[i] * dev[j];
      }
    }
    cov = s2o::scale(cov, 1.0 / static_cast<double>(s_count - 1));

    LayerCorrelation lc;
    lc.rows = rows;
    lc.cols = cols;
    double max_var = 0.0, min_var = cov.at(0, 0);
    double sig = 0.0;
    for (std::size_t i = 0; i < d; ++i) {
      max_var = std::max(max_var, cov.at(i, i));
      min_var = std::min(min_var, cov.at(i, i));
      sig += std::sqrt(std::max(0.0, cov.at(i, i)));
    }
    if (max_var == 0.0) {
      // All snapshots identical: no correlation information at all.
      lc.degenerate = true;
      lc.dense = Tensor::identity(d);
      lc.sigma = 0.0;
    } else if (min_var <= 0.0) {
      std::ostringstream os;
      os << "correlation_from_samples: zero-variance entry in layer " << l
         << " (degenerate sample set)";
      throw NumericsError(os.str());
    } else {
      lc.dense = correlation_normalize(cov);
      lc.sigma = sig / static_cast<double>(d);
    }
    auto [rp, rdp] = kronecker_marginals_dense(*lc.dense, rows, cols);
    lc.r_prime = std::move(rp);
    lc.r_dprime = std::move(rdp);
    // Fewer snapshots than dimensions makes the empirical correlation
    // rank-deficient; fall back to a ridged log-det and flag it.
    try {
      lc.log_det_r = log_det_spd(*lc.dense);
    } catch (const NumericsError&) {
      lc.degenerate = true;
      lc.log_det_r = log_det_spd(*lc.dense, 1e-8);
    }
    est.layers.push_back(std::move(lc));
  }
  return est;
}

// Diagnostic: relative Frobenius gap between the mean of per-sample Kronecker
// blocks and the Kronecker product of the means, for the factorization
// E[A (x) H] ~ E[A] (x) E[H]. Tiny nets only (the dense block is quadratic).
inline double kron_factorization_residual(const MlpNetwork& net, const Tensor& x,
                                          CurvatureHead head = CurvatureHead::softmax_ce,
                                          std::size_t layer = 0, std::size_t cap = 1024) {
  check_batch(net, x);
  const std::size_t n = net.n_layers();
  if (layer >= n) throw ShapeError("kron_factorization_residual: layer index out of range");
  const std::size_t d = net.dims[layer] * net.dims[layer + 1];
  if (d > cap) {
    std::ostringstream os;
    os << "kron_factorization_residual: dense block dimension " << d << " exceeds cap " << cap;
    throw NumericsError(os.str());
  }
  const std::size_t b = x.rows();
  Tensor mean_block = Tensor::zeros({d, d});
  Tensor mean_a = Tensor::zeros({net.dims[layer], net.dims[layer]});
  Tensor mean_h = Tensor::zeros({net.dims[layer + 1], net.dims[layer + 1]});
  for (std::size_t s = 0; s < b; ++s) {
    const Tensor xs = take_rows(x, {s});
    const Tensor a_vec = take_rows(forward_cache(net, xs).act[layer], {0});
    const Tensor a_outer = matmul_tn(a_vec, a_vec);
    const Tensor h_mat = ggn_preactivation_curvature(net, xs, head)[layer];
    mean_a = add(mean_a, a_outer);
    mean_h = add(mean_h, h_mat);
    mean_block = add(mean_block, kron(h_mat, a_outer));
  }
  const double inv_b = 1.0 / static_cast<double>(b);
  mean_a = s2o::scale(mean_a, inv_b);
  mean_h = s2o::scale(mean_h, inv_b);
  mean_block = s2o::scale(mean_block, inv_b);
  const Tensor factored = kron(mean_h, mean_a);
  const double denom = std::max(frobenius_norm(mean_block), 1e-30);
  return frobenius_norm(sub(mean_block, factored)) / denom;
}

}  // namespace s2o
