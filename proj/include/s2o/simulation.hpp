#pragma once

// Synthetic correlation-matrix studies: equicorrelated closed forms, random
// scatter experiments linking ||R||_F^2 to the marginal spectral extremes and
// the determinant lower bound, and the monotone-trend checks those closed
// forms admit. Everything is sequential and bitwise reproducible under seed.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "bounds.hpp"

namespace s2o {

enum class SimGenerator { wishart_normalized, equicorrelated_sweep, identity };

inline std::string generator_name(SimGenerator g) {
  switch (g) {
    case SimGenerator::wishart_normalized: return "wishart-normalized";
    case SimGenerator::equicorrelated_sweep: return "equicorrelated-sweep";
    case SimGenerator::identity: return "identity";
  }
  return "wishart-normalized";
}

inline SimGenerator generator_from_name(const std::string& s) {
  if (s == "wishart-normalized") return SimGenerator::wishart_normalized;
  if (s == "equicorrelated-sweep") return SimGenerator::equicorrelated_sweep;
  if (s == "identity") return SimGenerator::identity;
  throw ConfigError("unknown generator '" + s +
                    "' (expected wishart-normalized|equicorrelated-sweep|identity)");
}

struct SimConfig {
  std::size_t dim = 9;  // dimension of R; must be a perfect square
  std::size_t count = 10000;
  SimGenerator generator = SimGenerator::wishart_normalized;
  std::uint64_t seed = 0;

  std::size_t h() const {
    const auto r = static_cast<std::size_t>(std::llround(std::sqrt(static_cast<double>(dim))));
    if (r * r != dim || dim < 4) {
      std::ostringstream os;
      os << "simulation: dimension " << dim << " must be a perfect square >= 4";
      throw ConfigError(os.str());
    }
    return r;
  }

  void validate() const {
    if (count < 1) throw ConfigError("simulation: count must be >= 1");
    (void)h();
  }
};

// Unit-diagonal PSD matrix from a normalized Gaussian Gram factor with
// oversampling 2 (G is dim x 2*dim), which keeps the spectrum away from zero.
inline Tensor random_correlation_matrix(std::size_t dim, std::uint64_t seed) {
  if (dim < 2) throw ConfigError("random_correlation_matrix: dimension must be >= 2");
  Rng rng(derive_seed(seed, 0xC0221));
  Tensor g = Tensor::zeros({dim, 2 * dim});
  rng.fill_normal(g);
  return correlation_normalize(matmul_nt(g, g));
}

// Equicorrelated matrix (1-r)I + rJ at the given dimension.
inline Tensor equicorrelated_matrix(std::size_t dim, double r) {
  Tensor m = Tensor::full({dim, dim}, r);
  for (std::size_t i = 0; i < dim; ++i) m.at(i, i) = 1.0;
  return m;
}

struct EquicorrelationQuantities {
  double lambda_prime_max = 0.0;
  double lambda_dprime_max = 0.0;
  double c_value = 0.0;  // determinant lower bound at the dominating r
};

namespace detail {

inline void require_equicorrelation_r(std::size_t h, double r) {
  const double dim = static_cast<double>(h * h);
  if (!(r > -1.0 / (dim - 1.0)) || !(r < 1.0)) {
    std::ostringstream os;
    os << "equicorrelation: r = " << r << " outside the positive-definite range (-1/"
       << (dim - 1.0) << ", 1) at dimension " << h * h;
    throw ConfigError(os.str());
  }
}

}  // namespace detail

// Closed forms for a pair of equicorrelated correlation matrices of dimension
// h^2 with off-diagonals r_s (clean) and r_s_prime (adversarial), both of one
// sign. The marginal extreme is sqrt(h(1+(h-1)r)) at the dominating
// nonnegative r and sqrt(h(1-r)) at the dominating nonpositive r; the
// determinant factor is c(r) = (1-r)^{h^2-1} (1+(h^2-1)r) at that same r.
inline EquicorrelationQuantities equicorrelation_quantities(std::size_t h, double r_s,
                                                            double r_s_prime) {
  if (h < 2) throw ConfigError("equicorrelation: h must be >= 2");
  detail::require_equicorrelation_r(h, r_s);
  detail::require_equicorrelation_r(h, r_s_prime);
  if (r_s * r_s_prime < 0.0)
    throw ConfigError(
        "equicorrelation: r_s and r_s_prime must share a sign; the closed forms assume a "
        "single-sign pair");
  const double hd = static_cast<double>(h);
  const double dim = hd * hd;
  const bool nonneg = r_s >= 0.0 && r_s_prime >= 0.0;
  const double dominating = nonneg ? std::max(r_s, r_s_prime) : std::min(r_s, r_s_prime);
  EquicorrelationQuantities out;
  const double lam = nonneg ? hd * (1.0 + (hd - 1.0) * dominating) : hd * (1.0 - dominating);
  out.lambda_prime_max = std::sqrt(lam);
  out.lambda_dprime_max = out.lambda_prime_max;
  out.c_value = std::pow(1.0 - dominating, dim - 1.0) * (1.0 + (dim - 1.0) * dominating);
  return out;
}

// Spearman rank correlation with average ranks for ties; undefined (nullopt)
// when either argument is constant.
inline std::optional<double> spearman(const std::vector<double>& xs,
                                      const std::vector<double>& ys) {
  if (xs.size() != ys.size()) throw ShapeError("spearman: length mismatch");
  const std::size_t n = xs.size();
  if (n < 2) return std::nullopt;
  auto ranks = [](const std::vector<double>& v) {
    const std::size_t n = v.size();
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
    std::vector<double> r(n);
    std::size_t i = 0;
    while (i < n) {
      std::size_t j = i;
      while (j + 1 < n && v[idx[j + 1]] == v[idx[i]]) ++j;
      const double avg = 0.5 * (static_cast<double>(i) + static_cast<double>(j)) + 1.0;
      for (std::size_t t = i; t <= j; ++t) r[idx[t]] = avg;
      i = j + 1;
    }
    return r;
  };
  const std::vector<double> rx = ranks(xs), ry = ranks(ys);
  double mx = 0.0, my = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    mx += rx[i];
    my += ry[i];
  }
  mx /= static_cast<double>(n);
  my /= static_cast<double>(n);
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    sxy += (rx[i] - mx) * (ry[i] - my);
    sxx += (rx[i] - mx) * (rx[i] - mx);
    syy += (ry[i] - my) * (ry[i] - my);
  }
  if (sxx == 0.0 || syy == 0.0) return std::nullopt;
  return sxy / std::sqrt(sxx * syy);
}

struct ScatterRow {
  double frob_sq = 0.0;
  double lambda_prime_max = 0.0;
  double lambda_dprime_max = 0.0;
  double det_bound = 0.0;
};

struct ScatterResult {
  std::vector<ScatterRow> rows;
  // Rank correlations of frob_sq against each column; nullopt = undefined
  // (constant column, e.g. under the identity generator).
  std::optional<double> spearman_lambda_prime;
  std::optional<double> spearman_lambda_dprime;
  std::optional<double> spearman_det_bound;
  std::size_t dim = 0;
  std::size_t count = 0;
  std::uint64_t seed = 0;
  std::string generator;
};

// One matrix per index: squared Frobenius norm, square roots of the two
// marginal spectral norms, and the determinant lower bound from the
// eigenvalue extremes of R itself.
inline ScatterResult scatter_experiment(const SimConfig& cfg) {
  cfg.validate();
  const std::size_t h = cfg.h();
  ScatterResult res;
  res.dim = cfg.dim;
  res.count = cfg.count;
  res.seed = cfg.seed;
  res.generator = generator_name(cfg.generator);
  res.rows.reserve(cfg.count);
  for (std::size_t i = 0; i < cfg.count; ++i) {
    Tensor r;
    switch (cfg.generator) {
      case SimGenerator::wishart_normalized:
        r = random_correlation_matrix(cfg.dim, derive_seed(cfg.seed, 0x5CA7, i));
        break;
      case SimGenerator::equicorrelated_sweep: {
        const double rho =
            cfg.count == 1 ? 0.0
                           : 0.9 * static_cast<double>(i) / static_cast<double>(cfg.count - 1);
        r = equicorrelated_matrix(cfg.dim, rho);
        break;
      }
      case SimGenerator::identity:
        r = Tensor::identity(cfg.dim);
        break;
    }
    ScatterRow row;
    row.frob_sq = frobenius_sq(r);
    const auto [rp, rdp] = kronecker_marginals_dense(r, h, h);
    row.lambda_prime_max = std::sqrt(std::max(0.0, symmetric_extremes(rp).max));
    row.lambda_dprime_max = std::sqrt(std::max(0.0, symmetric_extremes(rdp).max));
    const EigenExtremes ex = symmetric_extremes(r);
    row.det_bound = det_lower_bound(std::max(ex.min, 1e-12), ex.max, cfg.dim);
    res.rows.push_back(row);
  }
  std::vector<double> fs, lp, ld, db;
  fs.reserve(cfg.count);
  for (const ScatterRow& row : res.rows) {
    fs.push_back(row.frob_sq);
    lp.push_back(row.lambda_prime_max);
    ld.push_back(row.lambda_dprime_max);
    db.push_back(row.det_bound);
  }
  res.spearman_lambda_prime = spearman(fs, lp);
  res.spearman_lambda_dprime = spearman(fs, ld);
  res.spearman_det_bound = spearman(fs, db);
  return res;
}

inline std::string scatter_csv(const ScatterResult& res) {
  std::ostringstream os;
  os.precision(17);
  os << "frob_sq,lambda_prime_max,lambda_dprime_max,det_bound\n";
  for (const ScatterRow& row : res.rows)
    os << row.frob_sq << "," << row.lambda_prime_max << "," << row.lambda_dprime_max << ","
       << row.det_bound << "\n";
  return os.str();
}

struct TrendPair {
  double r_from = 0.0;
  double r_to = 0.0;
  bool lambda_ok = false;  // extreme non-decreasing in |r|
  bool c_ok = false;       // determinant factor non-increasing in |r|
};

struct TrendReport {
  std::size_t h = 0;
  std::vector<TrendPair> pairs;
  bool all_pass = true;
};

// Monotonicity of the closed forms along an equicorrelated sweep: as |r|
// grows within one sign regime, the marginal extreme must not fall and the
// determinant factor must not rise. Single-point grids pass vacuously.
inline TrendReport lemma_trend_check(std::size_t h, std::vector<double> r_grid) {
  bool has_pos = false, has_neg = false;
  for (double r : r_grid) {
    has_pos = has_pos || r > 0.0;
    has_neg = has_neg || r < 0.0;
  }
  if (has_pos && has_neg)
    throw ConfigError("lemma_trend_check: grid must not mix signs");
  std::sort(r_grid.begin(), r_grid.end(),
            [](double a, double b) { return std::abs(a) < std::abs(b); });
  TrendReport rep;
  rep.h = h;
  for (std::size_t i = 1; i < r_grid.size(); ++i) {
    const EquicorrelationQuantities qa = equicorrelation_quantities(h, r_grid[i - 1], r_grid[i - 1]);
    const EquicorrelationQuantities qb = equicorrelation_quantities(h, r_grid[i], r_grid[i]);
    TrendPair p;
    p.r_from = r_grid[i - 1];
    p.r_to = r_grid[i];
    p.lambda_ok = qb.lambda_prime_max >= qa.lambda_prime_max - 1e-12;
    p.c_ok = qb.c_value <= qa.c_value + 1e-12;
    rep.all_pass = rep.all_pass && p.lambda_ok && p.c_ok;
    rep.pairs.push_back(p);
  }
  return rep;
}

}  // namespace s2o
