#pragma once

// Scalar ingredients of the adversarial PAC-Bayes generalization comparator:
// the attack-aware capacity factor Phi (one-shot and iterated attack forms),
// Psi = (B+eps)^2 * Phi, the posterior KL term, per-layer spectral extremes
// of the correlation matrices and their marginals, the eigenvalue-profile
// determinant lower bound, and the assembled complexity term. Everything here
// is a relative comparator across models and checkpoints: the universal
// constants of the underlying statement are fixed at 1 and no absolute
// certificate is claimed.

#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "statistics.hpp"

namespace s2o {

enum class AttackKind { fgm, pgm };

inline std::string attack_kind_name(AttackKind k) { return k == AttackKind::fgm ? "fgm" : "pgm"; }

inline AttackKind attack_kind_from_name(const std::string& s) {
  if (s == "fgm") return AttackKind::fgm;
  if (s == "pgm") return AttackKind::pgm;
  throw ConfigError("unknown attack kind '" + s + "' (expected fgm|pgm)");
}

enum class SigmaConvention { uniform, spectral };

inline std::string sigma_convention_name(SigmaConvention c) {
  return c == SigmaConvention::uniform ? "uniform" : "spectral";
}

inline SigmaConvention sigma_convention_from_name(const std::string& s) {
  if (s == "uniform") return SigmaConvention::uniform;
  if (s == "spectral") return SigmaConvention::spectral;
  throw ConfigError("unknown sigma convention '" + s + "' (expected uniform|spectral)");
}

struct BoundInputs {
  std::vector<double> spectral_norms;  // per-layer ||W_l||_2
  std::vector<double> frob_norms;      // per-layer ||W_l||_F
  std::size_t m = 2;                   // training sample count
  double input_bound = 1.0;            // B: max clean-input l2 norm
  double epsilon = 0.0;                // attack budget
  double kappa = 1.0;                  // lower bound on input-gradient norms
  double margin = 1.0;                 // gamma
  double delta = 0.05;                 // confidence level
  double sigma = 1.0;                  // base posterior noise scale
  SigmaConvention sigma_convention = SigmaConvention::uniform;
  AttackKind attack = AttackKind::fgm;
  int pgm_iterations = 1;              // r
  double pgm_step = 0.0;               // per-iteration noise power Z

  void validate() const {
    if (spectral_norms.size() != frob_norms.size() || spectral_norms.empty())
      throw ConfigError("bound inputs: need matching nonempty per-layer norm lists");
    for (double v : spectral_norms)
      if (v < 0.0) throw ConfigError("bound inputs: negative spectral norm");
    for (double v : frob_norms)
      if (v < 0.0) throw ConfigError("bound inputs: negative Frobenius norm");
    if (m < 2) throw ConfigError("bound inputs: m must be >= 2");
    if (epsilon < 0.0) throw ConfigError("bound inputs: epsilon must be >= 0");
    if (epsilon > 0.0 && !(kappa > 0.0))
      throw ConfigError("bound inputs: kappa must be > 0 for a nonzero attack budget");
    if (!(margin > 0.0)) throw ConfigError("bound inputs: margin must be > 0");
    if (!(delta > 0.0) || delta >= 1.0)
      throw ConfigError("bound inputs: delta must lie in (0,1)");
    if (!(sigma > 0.0)) throw ConfigError("bound inputs: sigma must be > 0");
    if (pgm_iterations < 1) throw ConfigError("bound inputs: pgm_iterations must be >= 1");
    if (pgm_step < 0.0) throw ConfigError("bound inputs: pgm_step must be >= 0");
    if (input_bound < 0.0) throw ConfigError("bound inputs: input bound must be >= 0");
  }
};

namespace detail {

inline void require_nondegenerate_layers(const std::vector<double>& spectral) {
  for (std::size_t l = 0; l < spectral.size(); ++l)
    if (!(spectral[l] > 0.0)) {
      std::ostringstream os;
      os << "degenerate layer " << l << ": zero spectral norm makes the capacity factor vacuous";
      throw NumericsError(os.str());
    }
}

// Product of all spectral norms and the depth-weighted prefix-product sum
// sum_l prod_{j<=l} ||W_j||_2; the latter times the former is the Lipschitz
// factor of the loss-gradient composition used by both attack forms.
struct NormAggregates {
  double prod_spectral = 1.0;
  double prefix_sum = 0.0;
  double stable_rank_sum = 0.0;  // sum_l ||W_l||_F^2 / ||W_l||_2^2
};

inline NormAggregates aggregate_norms(const BoundInputs& in) {
  require_nondegenerate_layers(in.spectral_norms);
  NormAggregates agg;
  double prefix = 1.0;
  for (std::size_t l = 0; l < in.spectral_norms.size(); ++l) {
    prefix *= in.spectral_norms[l];
    agg.prefix_sum += prefix;
    const double ratio = in.frob_norms[l] / in.spectral_norms[l];
    agg.stable_rank_sum += ratio * ratio;
  }
  agg.prod_spectral = prefix;
  return agg;
}

}  // namespace detail

// Capacity factor for the one-shot gradient attack:
// (prod ||W||_2)^2 * {1 + (eps/kappa) * (prod ||W||_2) * sum_l prod_{j<=l}
// ||W_j||_2}^2 * sum_l ||W_l||_F^2/||W_l||_2^2.
inline double phi_adv_fgm(const BoundInputs& in) {
  in.validate();
  const detail::NormAggregates agg = detail::aggregate_norms(in);
  const double amp = in.epsilon > 0.0
                         ? 1.0 + (in.epsilon / in.kappa) * agg.prod_spectral * agg.prefix_sum
                         : 1.0;
  return agg.prod_spectral * agg.prod_spectral * amp * amp * agg.stable_rank_sum;
}

// r-term geometric sum 1 + x + ... + x^{r-1}: closed form where stable, the
// explicit partial sum when the ratio reaches 1 or the denominator degenerates.
inline double geometric_sum(double x, int r) {
  if (r < 1) throw ConfigError("geometric_sum: r must be >= 1");
  if (x >= 1.0 || std::abs(1.0 - x) < 1e-12) {
    double acc = 0.0, pow_x = 1.0;
    for (int t = 0; t < r; ++t) {
      acc += pow_x;
      pow_x *= x;
    }
    return acc;
  }
  return (1.0 - std::pow(x, r)) / (1.0 - x);
}

// Capacity factor for the r-step attack with per-iteration noise power Z:
// {prod ||W||_2 * (1 + (Z/kappa) * G * lipbar)}^2 * sum ||W_l||_F^2/||W_l||_2^2,
// where lipbar = (prod ||W||_2) * sum_l prod_{j<=l} ||W_j||_2 and G is the
// r-term geometric sum in the amplification ratio 2Z/kappa * lipbar. At r=1
// this reduces to the one-shot form with eps replaced by Z.
inline double phi_adv_pgm(const BoundInputs& in) {
  in.validate();
  const detail::NormAggregates agg = detail::aggregate_norms(in);
  double amp = 1.0;
  if (in.pgm_step > 0.0) {
    if (!(in.kappa > 0.0))
      throw ConfigError("bound inputs: kappa must be > 0 for a nonzero attack step");
    const double lipbar = agg.prod_spectral * agg.prefix_sum;
    const double ratio = (2.0 * in.pgm_step / in.kappa) * lipbar;
    const double g = geometric_sum(ratio, in.pgm_iterations);
    amp = 1.0 + (in.pgm_step / in.kappa) * g * lipbar;
  }
  const double braced = agg.prod_spectral * amp;
  return braced * braced * agg.stable_rank_sum;
}

inline double phi_adv(const BoundInputs& in) {
  return in.attack == AttackKind::fgm ? phi_adv_fgm(in) : phi_adv_pgm(in);
}

// Perturbation-inclusive capacity: (B + eps)^2 * Phi.
inline double psi_adv(const BoundInputs& in) {
  const double reach = in.input_bound + in.epsilon;
  return reach * reach * phi_adv(in);
}

// Per-layer posterior noise scales: uniform sigma, or sigma scaled by each
// layer's spectral norm over the geometric mean of all spectral norms.
inline std::vector<double> sigma_per_layer(const BoundInputs& in) {
  in.validate();
  std::vector<double> out(in.spectral_norms.size(), in.sigma);
  if (in.sigma_convention == SigmaConvention::spectral) {
    detail::require_nondegenerate_layers(in.spectral_norms);
    double log_mean = 0.0;
    for (double s : in.spectral_norms) log_mean += std::log(s);
    const double beta = std::exp(log_mean / static_cast<double>(in.spectral_norms.size()));
    for (std::size_t l = 0; l < out.size(); ++l)
      out[l] = in.sigma * in.spectral_norms[l] / beta;
  }
  return out;
}

// KL between the correlated posterior and the isotropic prior, up to the
// shared constants: sum_l ( ||W_l||_F^2 / (2 sigma_l^2) - ln det R_l ).
inline double kl_term(const BoundInputs& in, const std::vector<double>& log_det_r) {
  if (log_det_r.size() != in.frob_norms.size())
    throw ShapeError("kl_term: per-layer log-determinant count does not match layer count");
  const std::vector<double> sig = sigma_per_layer(in);
  double acc = 0.0;
  for (std::size_t l = 0; l < log_det_r.size(); ++l)
    acc += in.frob_norms[l] * in.frob_norms[l] / (2.0 * sig[l] * sig[l]) - log_det_r[l];
  return acc;
}

inline double kl_term(const BoundInputs& in, const CorrelationEstimate& est) {
  std::vector<double> ld;
  ld.reserve(est.layers.size());
  for (const LayerCorrelation& lc : est.layers) ld.push_back(lc.log_det_r);
  return kl_term(in, ld);
}

struct LayerLambdas {
  double lambda_prime_max = 0.0;   // max over domains of ||R'||_2^{1/2}
  double lambda_dprime_max = 0.0;  // max over domains of ||R''||_2^{1/2}
  double lambda_min = 0.0;         // smallest eigenvalue of R over domains
  double lambda_max = 0.0;         // largest eigenvalue of R over domains
};

namespace detail {

// Eigenvalue extremes of a layer's correlation matrix. Kronecker-factored
// storage multiplies factor extremes (both factors are PSD); dense storage
// goes through the symmetric solver.
inline EigenExtremes correlation_extremes(const LayerCorrelation& lc) {
  if (lc.row_factor && lc.col_factor) {
    const EigenExtremes er = symmetric_extremes(*lc.row_factor);
    const EigenExtremes ec = symmetric_extremes(*lc.col_factor);
    return {std::max(0.0, er.min) * std::max(0.0, ec.min), er.max * ec.max,
            er.converged && ec.converged};
  }
  if (lc.dense) return symmetric_extremes(*lc.dense);
  throw NumericsError("layer correlation holds neither dense matrix nor factors");
}

inline double psd_spectral_sqrt(const Tensor& m) {
  const EigenExtremes e = symmetric_extremes(m);
  return std::sqrt(std::max(0.0, e.max));
}

}  // namespace detail

inline std::vector<LayerLambdas> lambda_extremes(const CorrelationEstimate& clean,
                                                 const CorrelationEstimate& adv) {
  if (clean.layers.size() != adv.layers.size())
    throw ShapeError("lambda_extremes: estimates have different layer counts");
  std::vector<LayerLambdas> out;
  out.reserve(clean.layers.size());
  for (std::size_t l = 0; l < clean.layers.size(); ++l) {
    const LayerCorrelation& a = clean.layers[l];
    const LayerCorrelation& b = adv.layers[l];
    if (a.rows != b.rows || a.cols != b.cols)
      throw ShapeError("lambda_extremes: estimates have different layer shapes");
    LayerLambdas ll;
    ll.lambda_prime_max = std::max(detail::psd_spectral_sqrt(a.r_prime),
                                   detail::psd_spectral_sqrt(b.r_prime));
    ll.lambda_dprime_max = std::max(detail::psd_spectral_sqrt(a.r_dprime),
                                    detail::psd_spectral_sqrt(b.r_dprime));
    const EigenExtremes ea = detail::correlation_extremes(a);
    const EigenExtremes eb = detail::correlation_extremes(b);
    ll.lambda_min = std::min(ea.min, eb.min);
    ll.lambda_max = std::max(ea.max, eb.max);
    out.push_back(ll);
  }
  return out;
}

// Single-domain variant: both roles played by the same estimate.
inline std::vector<LayerLambdas> lambda_extremes(const CorrelationEstimate& only) {
  return lambda_extremes(only, only);
}

// Lower bound on det R from its eigenvalue extremes for a dim-dimensional
// correlation matrix: the eigenvalue profile that minimizes the determinant
// subject to trace = dim puts k eigenvalues at lambda_min and the rest at
// lambda_max, with k = dim*(lambda_max - 1)/(lambda_max - lambda_min).
// Returned in log space; the coincident case collapses to dim*ln(lambda_max).
inline double log_det_lower_bound(double lambda_min, double lambda_max, std::size_t dim) {
  if (!(lambda_min > 0.0))
    throw NumericsError("det lower bound: lambda_min <= 0 makes the bound vacuous");
  if (lambda_max < lambda_min)
    throw ConfigError("det lower bound: lambda_max must be >= lambda_min");
  const double d = static_cast<double>(dim);
  if (lambda_max == lambda_min) return d * std::log(lambda_max);
  const double k = d * (lambda_max - 1.0) / (lambda_max - lambda_min);
  return k * std::log(lambda_min) + (d - k) * std::log(lambda_max);
}

inline double det_lower_bound(double lambda_min, double lambda_max, std::size_t dim) {
  return std::exp(log_det_lower_bound(lambda_min, lambda_max, dim));
}

inline double det_bound_k(double lambda_min, double lambda_max, std::size_t dim) {
  const double d = static_cast<double>(dim);
  if (lambda_max == lambda_min) return 0.0;
  return d * (lambda_max - 1.0) / (lambda_max - lambda_min);
}

// The assembled comparator:
// sqrt( Psi * (sum_l (c1*L'_l + c2*L''_l))^2 + ln(m/delta) - sum_l ln detLB_l )
// / (margin * sqrt(m)), with c1 = c2 = 1.
inline double complexity_term(double psi, double lambda_sum, double m, double delta,
                              double sum_log_det_lb, double margin) {
  if (!(m >= 2.0)) throw ConfigError("complexity term: m must be >= 2");
  if (!(margin > 0.0)) throw ConfigError("complexity term: margin must be > 0");
  if (!(delta > 0.0) || delta >= 1.0)
    throw ConfigError("complexity term: delta must lie in (0,1)");
  const double radicand = psi * lambda_sum * lambda_sum + std::log(m / delta) - sum_log_det_lb;
  if (radicand < 0.0)
    throw NumericsError("complexity term: negative radicand; inputs are inconsistent");
  return std::sqrt(radicand) / (margin * std::sqrt(m));
}

struct BoundReport {
  double phi = 0.0;
  double psi = 0.0;
  double kl_clean = 0.0;
  double kl_adv = 0.0;
  double kl = 0.0;  // max over domains
  std::vector<LayerLambdas> lambdas;
  std::vector<double> k_values;
  std::vector<double> log_det_bounds;
  double lambda_sum = 0.0;
  double complexity = 0.0;
  // conventions
  std::string attack_kind;
  std::string sigma_convention;
  std::string estimator;
  std::string clean_domain;
  std::string adv_domain;
  double c1 = 1.0, c2 = 1.0;
  bool comparator_only = true;  // universal prefactor constants are dropped
};

inline BoundReport corollary_bound(const BoundInputs& in, const CorrelationEstimate& clean,
                                   const CorrelationEstimate& adv) {
  in.validate();
  if (clean.layers.size() != in.spectral_norms.size())
    throw ShapeError("corollary_bound: estimate layer count does not match norm lists");
  BoundReport rep;
  rep.phi = phi_adv(in);
  rep.psi = psi_adv(in);
  rep.kl_clean = kl_term(in, clean);
  rep.kl_adv = kl_term(in, adv);
  rep.kl = std::max(rep.kl_clean, rep.kl_adv);
  rep.lambdas = lambda_extremes(clean, adv);
  for (std::size_t l = 0; l < rep.lambdas.size(); ++l) {
    const std::size_t dim = clean.layers[l].rows * clean.layers[l].cols;
    const LayerLambdas& ll = rep.lambdas[l];
    rep.k_values.push_back(det_bound_k(ll.lambda_min, ll.lambda_max, dim));
    rep.log_det_bounds.push_back(log_det_lower_bound(ll.lambda_min, ll.lambda_max, dim));
    rep.lambda_sum += rep.c1 * ll.lambda_prime_max + rep.c2 * ll.lambda_dprime_max;
  }
  double sum_ld = 0.0;
  for (double v : rep.log_det_bounds) sum_ld += v;
  rep.complexity = complexity_term(rep.psi, rep.lambda_sum, static_cast<double>(in.m), in.delta,
                                   sum_ld, in.margin);
  rep.attack_kind = attack_kind_name(in.attack);
  rep.sigma_convention = sigma_convention_name(in.sigma_convention);
  rep.estimator = estimator_name(clean.estimator);
  rep.clean_domain = domain_name(clean.domain);
  rep.adv_domain = domain_name(adv.domain);
  return rep;
}

// Per-layer spectral and Frobenius norms of the live network.
inline void layer_norms(const MlpNetwork& net, std::vector<double>& spectral,
                        std::vector<double>& frob) {
  spectral.clear();
  frob.clear();
  for (const Tensor& w : net.weights) {
    const SpectralResult sr = spectral_norm(w);
    if (!sr.converged)
      throw NumericsError("layer_norms: spectral norm power iteration did not converge");
    spectral.push_back(sr.value);
    frob.push_back(frobenius_norm(w));
  }
}

struct KappaB {
  double kappa = 0.0;
  double input_bound = 0.0;
  bool kappa_floored = false;
};

// Empirical constants of the comparator: B is the largest clean-input l2
// norm; kappa the smallest per-sample input-gradient norm over clean and
// attacked inputs, floored at 1e-8 (flagged when the floor binds). Batch
// gradients are rescaled to per-sample gradients before taking norms.
inline KappaB estimate_kappa_B(const MlpNetwork& net, const LabeledBatch& batch,
                               const AttackConfig& attack) {
  KappaB out;
  const std::size_t b = batch.x.rows(), d = batch.x.cols();
  for (std::size_t i = 0; i < b; ++i) {
    double n2 = 0.0;
    for (std::size_t j = 0; j < d; ++j) n2 += batch.x.at(i, j) * batch.x.at(i, j);
    out.input_bound = std::max(out.input_bound, std::sqrt(n2));
  }
  const Tensor adv = pgd_perturb(net, batch, attack);
  double kmin = std::numeric_limits<double>::infinity();
  for (const Tensor* x : {&batch.x, &adv}) {
    const Tensor g = input_gradient(net, *x, ce_objective(net, batch.y));
    for (std::size_t i = 0; i < b; ++i) {
      double n2 = 0.0;
      for (std::size_t j = 0; j < d; ++j) n2 += g.at(i, j) * g.at(i, j);
      // The batch objective averages per-sample losses; undo the 1/b.
      kmin = std::min(kmin, std::sqrt(n2) * static_cast<double>(b));
    }
  }
  if (kmin < 1e-8) {
    out.kappa = 1e-8;
    out.kappa_floored = true;
  } else {
    out.kappa = kmin;
  }
  return out;
}

}  // namespace s2o
