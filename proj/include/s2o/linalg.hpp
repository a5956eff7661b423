#pragma once

// Symmetric/SPD kernels: Cholesky factorization and its derived inverse and
// log-determinant, power-iteration spectral norm, cyclic Jacobi eigensolve,
// and correlation normalization. Everything is deterministic; iterative
// routines take explicit tolerances and report convergence instead of
// silently returning garbage.

#include <cmath>
#include <cstdint>
#include <limits>

#include "rng.hpp"
#include "tensor.hpp"

namespace s2o {

// lambda = 1e-6 * trace/dim; the scale-relative default damping used wherever
// an SPD matrix built from data is factorized.
inline double default_damping(const Tensor& a) {
  require_square("default_damping", a);
  const double t = trace(a);
  return 1e-6 * t / static_cast<double>(a.rows());
}

// Lower-triangular Cholesky factor of (a + damping*I).
inline Tensor cholesky(const Tensor& a, double damping = 0.0) {
  require_square("cholesky", a);
  const std::size_t n = a.rows();
  Tensor L = Tensor::zeros({n, n});
  for (std::size_t j = 0; j < n; ++j) {
    double d = a.at(j, j) + damping;
    for (std::size_t k = 0; k < j; ++k) d -= L.at(j, k) * L.at(j, k);
    if (!(d > 0.0))
      throw NumericsError("cholesky: non-positive pivot " + std::to_string(d) + " at index " +
                          std::to_string(j) + " (matrix not positive definite at this damping)");
    L.at(j, j) = std::sqrt(d);
    for (std::size_t i = j + 1; i < n; ++i) {
      double s = a.at(i, j);
      for (std::size_t k = 0; k < j; ++k) s -= L.at(i, k) * L.at(j, k);
      L.at(i, j) = s / L.at(j, j);
    }
  }
  return L;
}

// log det(a + damping*I) through the Cholesky factor.
inline double log_det_spd(const Tensor& a, double damping = 0.0) {
  Tensor L = cholesky(a, damping);
  double acc = 0.0;
  for (std::size_t i = 0; i < L.rows(); ++i) acc += std::log(L.at(i, i));
  return 2.0 * acc;
}

// Inverse of an SPD matrix via its Cholesky factor.
inline Tensor spd_inverse(const Tensor& a, double damping = 0.0) {
  Tensor L = cholesky(a, damping);
  const std::size_t n = L.rows();
  // Invert L in place (forward substitution against unit columns).
  Tensor Linv = Tensor::zeros({n, n});
  for (std::size_t j = 0; j < n; ++j) {
    Linv.at(j, j) = 1.0 / L.at(j, j);
    for (std::size_t i = j + 1; i < n; ++i) {
      double s = 0.0;
      for (std::size_t k = j; k < i; ++k) s -= L.at(i, k) * Linv.at(k, j);
      Linv.at(i, j) = s / L.at(i, i);
    }
  }
  // inv = Linv^T Linv.
  Tensor inv = Tensor::zeros({n, n});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j <= i; ++j) {
      double s = 0.0;
      for (std::size_t k = i; k < n; ++k) s += Linv.at(k, i) * Linv.at(k, j);
      inv.at(i, j) = s;
      inv.at(j, i) = s;
    }
  return inv;
}

struct SpectralResult {
  double value = 0.0;
  bool converged = false;
  int iterations = 0;
};

// Largest singular value via power iteration on M^T M with a seeded start
// vector. A zero matrix converges immediately to 0.
inline SpectralResult spectral_norm(const Tensor& m, double tol = 1e-9, int max_iter = 10000,
                                    std::uint64_t seed = 0x5EED5EED5EEDull) {
  require_matrix("spectral_norm", m);
  const std::size_t rows = m.rows(), cols = m.cols();
  SpectralResult res;
  if (max_abs(m) == 0.0) {
    res.value = 0.0;
    res.converged = true;
    return res;
  }
  Rng rng(seed);
  Tensor v = Tensor::zeros({cols});
  rng.fill_normal(v);
  double nv = frobenius_norm(v);
  for (double& x : v.data) x /= nv;
  double lambda_prev = 0.0;
  Tensor u = Tensor::zeros({rows});
  Tensor w = Tensor::zeros({cols});
  for (int it = 1; it <= max_iter; ++it) {
    // u = M v; w = M^T u.
    for (std::size_t i = 0; i < rows; ++i) {
      double s = 0.0;
      const double* row = &m.data[i * cols];
      for (std::size_t j = 0; j < cols; ++j) s += row[j] * v[j];
      u[i] = s;
    }
    std::fill(w.data.begin(), w.data.end(), 0.0);
    for (std::size_t i = 0; i < rows; ++i) {
      const double ui = u[i];
      if (ui == 0.0) continue;
      const double* row = &m.data[i * cols];
      for (std::size_t j = 0; j < cols; ++j) w[j] += row[j] * ui;
    }
    double lambda = 0.0;  // Rayleigh quotient v^T (M^T M) v with ||v|| = 1
    for (std::size_t j = 0; j < cols; ++j) lambda += v[j] * w[j];
    const double nw = frobenius_norm(w);
    res.iterations = it;
    if (nw == 0.0) {
      // v landed in the null space; singular value along this direction is 0.
      res.value = 0.0;
      res.converged = true;
      return res;
    }
    for (std::size_t j = 0; j < cols; ++j) v[j] = w[j] / nw;
    if (it > 1 && std::abs(lambda - lambda_prev) <= tol * std::max(1.0, std::abs(lambda))) {
      res.value = std::sqrt(std::max(lambda, 0.0));
      res.converged = true;
      return res;
    }
    lambda_prev = lambda;
  }
  res.value = std::sqrt(std::max(lambda_prev, 0.0));
  res.converged = false;
  return res;
}

// All eigenvalues of a symmetric matrix, ascending, by cyclic Jacobi sweeps.
inline std::vector<double> symmetric_eigenvalues(const Tensor& a_in, int max_sweeps = 100,
                                                 double tol = 1e-14) {
  require_square("symmetric_eigenvalues", a_in);
  Tensor a = a_in;
  const std::size_t n = a.rows();
  if (n == 1) return {a.at(0, 0)};
  double scale = 0.0;
  for (double v : a.data) scale = std::max(scale, std::abs(v));
  if (scale == 0.0) return std::vector<double>(n, 0.0);
  for (int sweep = 0; sweep < max_sweeps; ++sweep) {
    double off = 0.0;
    for (std::size_t p = 0; p < n; ++p)
      for (std::size_t q = p + 1; q < n; ++q) off += a.at(p, q) * a.at(p, q);
    if (std::sqrt(off) <= tol * scale * static_cast<double>(n)) break;
    for (std::size_t p = 0; p < n; ++p)
      for (std::size_t q = p + 1; q < n; ++q) {
        const double apq = a.at(p, q);
        if (std::abs(apq) <= tol * scale) continue;
        const double app = a.at(p, p), aqq = a.at(q, q);
        const double theta = (aqq - app) / (2.0 * apq);
        const double t = (theta >= 0.0 ? 1.0 : -1.0) /
                         (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0);
        const double s = t * c;
        for (std::size_t k = 0; k < n; ++k) {
          const double akp = a.at(k, p), akq = a.at(k, q);
          a.at(k, p) = c * akp - s * akq;
          a.at(k, q) = s * akp + c * akq;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double apk = a.at(p, k), aqk = a.at(q, k);
          a.at(p, k) = c * apk - s * aqk;
          a.at(q, k) = s * apk + c * aqk;
        }
      }
  }
  std::vector<double> ev(n);
  for (std::size_t i = 0; i < n; ++i) ev[i] = a.at(i, i);
  std::sort(ev.begin(), ev.end());
  return ev;
}

struct EigenExtremes {
  double min = 0.0;
  double max = 0.0;
  bool converged = true;
};

// Extreme eigenvalues of a symmetric PSD-ish matrix. Full Jacobi eigensolve
// up to dim 256; shifted power iteration above that (lambda_min recovered
// from the largest eigenvalue of lambda_max*I - A).
inline EigenExtremes symmetric_extremes(const Tensor& a, double tol = 1e-9, int max_iter = 10000,
                                        std::uint64_t seed = 0xE16E5ull) {
  require_square("symmetric_extremes", a);
  const std::size_t n = a.rows();
  EigenExtremes ex;
  if (n <= 256) {
    const std::vector<double> ev = symmetric_eigenvalues(a);
    ex.min = ev.front();
    ex.max = ev.back();
    return ex;
  }
  auto dominant = [&](const Tensor& mat, double shift, std::uint64_t sd, bool& ok) {
    Rng rng(sd);
    Tensor v = Tensor::zeros({n});
    rng.fill_normal(v);
    double nv = frobenius_norm(v);
    for (double& x : v.data) x /= nv;
    double lambda = 0.0, lambda_prev = std::numeric_limits<double>::infinity();
    Tensor w = Tensor::zeros({n});
    ok = false;
    for (int it = 1; it <= max_iter; ++it) {
      for (std::size_t i = 0; i < n; ++i) {
        double s = shift * v[i];
        const double* row = &mat.data[i * n];
        for (std::size_t j = 0; j < n; ++j) s += row[j] * v[j];
        w[i] = s;
      }
      lambda = 0.0;
      for (std::size_t i = 0; i < n; ++i) lambda += v[i] * w[i];
      const double nw = frobenius_norm(w);
      if (nw == 0.0) { ok = true; return 0.0; }
      for (std::size_t i = 0; i < n; ++i) v[i] = w[i] / nw;
      if (it > 1 && std::abs(lambda - lambda_prev) <= tol * std::max(1.0, std::abs(lambda))) {
        ok = true;
        return lambda;
      }
      lambda_prev = lambda;
    }
    return lambda;
  };
  bool ok_max = false, ok_min = false;
  // Shift by the trace-bound so the dominant eigenvalue of A + shift*I is the
  // algebraically largest one even if A has large negative eigenvalues.
  const double tshift = std::abs(trace(a)) + 1.0;
  ex.max = dominant(a, tshift, seed, ok_max) - tshift;
  Tensor neg = scale(a, -1.0);
  ex.min = ex.max - dominant(neg, ex.max, seed + 1, ok_min);
  ex.converged = ok_max && ok_min;
  return ex;
}

// Scales an SPD-ish matrix to unit diagonal: R_ij = C_ij / sqrt(C_ii C_jj),
// with the diagonal set to exactly 1.
inline Tensor correlation_normalize(const Tensor& c) {
  require_square("correlation_normalize", c);
  const std::size_t n = c.rows();
  std::vector<double> inv_sd(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double d = c.at(i, i);
    if (!(d > 0.0))
      throw NumericsError("correlation_normalize: non-positive diagonal entry " + std::to_string(d) +
                          " at index " + std::to_string(i));
    inv_sd[i] = 1.0 / std::sqrt(d);
  }
  Tensor r = Tensor::zeros({n, n});
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) r.at(i, j) = c.at(i, j) * inv_sd[i] * inv_sd[j];
    r.at(i, i) = 1.0;
  }
  return r;
}

}  // namespace s2o
