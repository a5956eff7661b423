#pragma once

// Independent reference implementations used only by the tests. Deliberately
// different algorithms from the library: determinants via LU with partial
// pivoting, spectral norms via one-sided Jacobi SVD, Hessians via double
// finite differences.

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <vector>

#include "s2o/network.hpp"
#include "s2o/tensor.hpp"

namespace oracle {

// Determinant by LU decomposition with partial pivoting.
inline double lu_det(const s2o::Tensor& a) {
  const std::size_t n = a.rows();
  std::vector<std::vector<double>> m(n, std::vector<double>(n));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) m[i][j] = a.at(i, j);
  double det = 1.0;
  for (std::size_t col = 0; col < n; ++col) {
    std::size_t piv = col;
    for (std::size_t r = col + 1; r < n; ++r)
      if (std::abs(m[r][col]) > std::abs(m[piv][col])) piv = r;
    if (m[piv][col] == 0.0) return 0.0;
    if (piv != col) {
      std::swap(m[piv], m[col]);
      det = -det;
    }
    det *= m[col][col];
    for (std::size_t r = col + 1; r < n; ++r) {
      const double f = m[r][col] / m[col][col];
      for (std::size_t c = col; c < n; ++c) m[r][c] -= f * m[col][c];
    }
  }
  return det;
}

// Largest singular value by one-sided Jacobi: orthogonalize column pairs of a
// working copy until convergence; singular values are the column norms.
inline double jacobi_spectral_norm(const s2o::Tensor& a) {
  const std::size_t rows = a.rows(), cols = a.cols();
  std::vector<std::vector<double>> u(cols, std::vector<double>(rows));
  for (std::size_t j = 0; j < cols; ++j)
    for (std::size_t i = 0; i < rows; ++i) u[j][i] = a.at(i, j);
  for (int sweep = 0; sweep < 60; ++sweep) {
    double off = 0.0;
    for (std::size_t p = 0; p + 1 < cols; ++p)
      for (std::size_t q = p + 1; q < cols; ++q) {
        double app = 0.0, aqq = 0.0, apq = 0.0;
        for (std::size_t i = 0; i < rows; ++i) {
          app += u[p][i] * u[p][i];
          aqq += u[q][i] * u[q][i];
          apq += u[p][i] * u[q][i];
        }
        off = std::max(off, std::abs(apq));
        if (std::abs(apq) < 1e-15 * std::sqrt(app * aqq) || apq == 0.0) continue;
        const double tau = (aqq - app) / (2.0 * apq);
        const double t = (tau >= 0.0 ? 1.0 : -1.0) /
                         (std::abs(tau) + std::sqrt(1.0 + tau * tau));
        const double c = 1.0 / std::sqrt(1.0 + t * t);
        const double s = c * t;
        for (std::size_t i = 0; i < rows; ++i) {
          const double up = u[p][i], uq = u[q][i];
          u[p][i] = c * up - s * uq;
          u[q][i] = s * up + c * uq;
        }
      }
    if (off < 1e-14) break;
  }
  double best = 0.0;
  for (std::size_t j = 0; j < cols; ++j) {
    double n2 = 0.0;
    for (std::size_t i = 0; i < rows; ++i) n2 += u[j][i] * u[j][i];
    best = std::max(best, n2);
  }
  return std::sqrt(best);
}

// Full Hessian of a scalar function of one weight layer by central
// differences of central differences.
template <typename F>
s2o::Tensor fd_weight_hessian(const s2o::MlpNetwork& net, std::size_t layer, F loss,
                              double step = 1e-4) {
  const std::size_t n = net.weights[layer].numel();
  s2o::Tensor h = s2o::Tensor::zeros({n, n});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      auto eval = [&](double di, double dj) {
        s2o::MlpNetwork m = net;
        m.weights[layer].data[i] += di;
        m.weights[layer].data[j] += dj;
        return loss(m);
      };
      h.at(i, j) = (eval(step, step) - eval(step, -step) - eval(-step, step) +
                    eval(-step, -step)) /
                   (4.0 * step * step);
    }
  return h;
}

// Spearman rank correlation with average ranks for ties; reference for the
// library implementation.
inline double spearman_ref(std::vector<double> x, std::vector<double> y) {
  const std::size_t n = x.size();
  auto ranks = [&](const std::vector<double>& v) {
    std::vector<std::size_t> idx(n);
    for (std::size_t i = 0; i < n; ++i) idx[i] = i;
    std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
    std::vector<double> r(n);
    std::size_t i = 0;
    while (i < n) {
      std::size_t j = i;
      while (j + 1 < n && v[idx[j + 1]] == v[idx[i]]) ++j;
      const double avg = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
      for (std::size_t k = i; k <= j; ++k) r[idx[k]] = avg;
      i = j + 1;
    }
    return r;
  };
  const std::vector<double> rx = ranks(x), ry = ranks(y);
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
  return sxy / std::sqrt(sxx * syy);
}

}  // namespace oracle
