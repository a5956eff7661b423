#pragma once

// Dense row-major double tensors and the plain (non-differentiated) kernels
// the rest of the library builds on. Rank is dynamic; matrices are rank-2,
// batches are (B x d) matrices, scalars are rank-0 with one element.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace s2o {

class ShapeError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class NumericsError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

using Shape = std::vector<std::size_t>;

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "(";
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ")";
  return os.str();
}

inline std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (std::size_t d : s) n *= d;
  return n;
}

struct Tensor {
  Shape shape;
  std::vector<double> data;
  bool requires_grad = false;
  // Populated for leaves by Tape::backward; same length as data.
  std::optional<std::vector<double>> grad;

  Tensor() = default;
  Tensor(Shape s, std::vector<double> d) : shape(std::move(s)), data(std::move(d)) {
    if (data.size() != shape_numel(shape))
      throw ShapeError("Tensor: payload size " + std::to_string(data.size()) +
                       " does not match shape " + shape_str(shape));
  }

  static Tensor zeros(Shape s) {
    Tensor t;
    t.shape = std::move(s);
    t.data.assign(shape_numel(t.shape), 0.0);
    return t;
  }
  static Tensor scalar(double v) {
    Tensor t;
    t.data.assign(1, v);
    return t;
  }
  static Tensor full(Shape s, double v) {
    Tensor t = zeros(std::move(s));
    std::fill(t.data.begin(), t.data.end(), v);
    return t;
  }
  static Tensor identity(std::size_t n) {
    Tensor t = zeros({n, n});
    for (std::size_t i = 0; i < n; ++i) t.data[i * n + i] = 1.0;
    return t;
  }

  std::size_t numel() const { return data.size(); }
  std::size_t rank() const { return shape.size(); }
  bool is_scalar() const { return shape.empty() && data.size() == 1; }
  bool is_matrix() const { return shape.size() == 2; }
  bool is_vector() const { return shape.size() == 1; }

  std::size_t rows() const {
    if (!is_matrix()) throw ShapeError("rows: tensor of shape " + shape_str(shape) + " is not a matrix");
    return shape[0];
  }
  std::size_t cols() const {
    if (!is_matrix()) throw ShapeError("cols: tensor of shape " + shape_str(shape) + " is not a matrix");
    return shape[1];
  }

  double& at(std::size_t i, std::size_t j) { return data[i * shape[1] + j]; }
  double at(std::size_t i, std::size_t j) const { return data[i * shape[1] + j]; }
  double& operator[](std::size_t i) { return data[i]; }
  double operator[](std::size_t i) const { return data[i]; }

  double value() const {
    if (data.size() != 1) throw ShapeError("value: tensor of shape " + shape_str(shape) + " is not a scalar");
    return data[0];
  }
};

inline bool same_shape(const Tensor& a, const Tensor& b) { return a.shape == b.shape; }

inline void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (!same_shape(a, b))
    throw ShapeError(std::string(op) + ": operand shapes disagree (" + shape_str(a.shape) + " vs " +
                     shape_str(b.shape) + ")");
}

inline void require_matrix(const char* op, const Tensor& a) {
  if (!a.is_matrix())
    throw ShapeError(std::string(op) + ": expected a matrix, got shape " + shape_str(a.shape));
}

inline void require_square(const char* op, const Tensor& a) {
  require_matrix(op, a);
  if (a.rows() != a.cols())
    throw ShapeError(std::string(op) + ": expected a square matrix, got shape " + shape_str(a.shape));
}

// --- elementwise / reductions ---

inline Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape("add", a, b);
  Tensor out = a;
  for (std::size_t i = 0; i < out.numel(); ++i) out.data[i] += b.data[i];
  return out;
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape("sub", a, b);
  Tensor out = a;
  for (std::size_t i = 0; i < out.numel(); ++i) out.data[i] -= b.data[i];
  return out;
}

inline Tensor scale(const Tensor& a, double c) {
  Tensor out = a;
  for (double& v : out.data) v *= c;
  return out;
}

inline Tensor hadamard(const Tensor& a, const Tensor& b) {
  require_same_shape("hadamard", a, b);
  Tensor out = a;
  for (std::size_t i = 0; i < out.numel(); ++i) out.data[i] *= b.data[i];
  return out;
}

inline double frobenius_sq(const Tensor& a) {
  double acc = 0.0;
  for (double v : a.data) acc += v * v;
  return acc;
}

inline double frobenius_norm(const Tensor& a) { return std::sqrt(frobenius_sq(a)); }

inline double trace(const Tensor& a) {
  require_square("trace", a);
  double t = 0.0;
  for (std::size_t i = 0; i < a.rows(); ++i) t += a.at(i, i);
  return t;
}

inline Tensor diag_part(const Tensor& a) {
  require_square("diag_part", a);
  Tensor d = Tensor::zeros({a.rows()});
  for (std::size_t i = 0; i < a.rows(); ++i) d[i] = a.at(i, i);
  return d;
}

inline Tensor take_rows(const Tensor& m, const std::vector<std::size_t>& rows) {
  require_matrix("take_rows", m);
  Tensor out = Tensor::zeros({rows.size(), m.cols()});
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= m.rows()) throw ShapeError("take_rows: row index out of range");
    for (std::size_t j = 0; j < m.cols(); ++j) out.at(i, j) = m.at(rows[i], j);
  }
  return out;
}

inline double max_abs(const Tensor& a) {
  double m = 0.0;
  for (double v : a.data) m = std::max(m, std::abs(v));
  return m;
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
  require_same_shape("max_abs_diff", a, b);
  double m = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a.data[i] - b.data[i]));
  return m;
}

// --- matrix products ---

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  require_matrix("matmul", a);
  require_matrix("matmul", b);
  if (a.cols() != b.rows())
    throw ShapeError("matmul: inner dimensions disagree (" + shape_str(a.shape) + " vs " +
                     shape_str(b.shape) + ")");
  const std::size_t n = a.rows(), k = a.cols(), m = b.cols();
  Tensor out = Tensor::zeros({n, m});
  for (std::size_t i = 0; i < n; ++i) {
    const double* arow = &a.data[i * k];
    double* orow = &out.data[i * m];
    for (std::size_t p = 0; p < k; ++p) {
      const double av = arow[p];
      if (av == 0.0) continue;
      const double* brow = &b.data[p * m];
      for (std::size_t j = 0; j < m; ++j) orow[j] += av * brow[j];
    }
  }
  return out;
}

// A^T B without forming the transpose.
inline Tensor matmul_tn(const Tensor& a, const Tensor& b) {
  require_matrix("matmul_tn", a);
  require_matrix("matmul_tn", b);
  if (a.rows() != b.rows())
    throw ShapeError("matmul_tn: inner dimensions disagree (" + shape_str(a.shape) + "^T vs " +
                     shape_str(b.shape) + ")");
  const std::size_t n = a.cols(), k = a.rows(), m = b.cols();
  Tensor out = Tensor::zeros({n, m});
  for (std::size_t p = 0; p < k; ++p) {
    const double* arow = &a.data[p * n];
    const double* brow = &b.data[p * m];
    for (std::size_t i = 0; i < n; ++i) {
      const double av = arow[i];
      if (av == 0.0) continue;
      double* orow = &out.data[i * m];
      for (std::size_t j = 0; j < m; ++j) orow[j] += av * brow[j];
    }
  }
  return out;
}

// A B^T.
inline Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  require_matrix("matmul_nt", a);
  require_matrix("matmul_nt", b);
  if (a.cols() != b.cols())
    throw ShapeError("matmul_nt: inner dimensions disagree (" + shape_str(a.shape) + " vs " +
                     shape_str(b.shape) + "^T)");
  const std::size_t n = a.rows(), k = a.cols(), m = b.rows();
  Tensor out = Tensor::zeros({n, m});
  for (std::size_t i = 0; i < n; ++i) {
    const double* arow = &a.data[i * k];
    for (std::size_t j = 0; j < m; ++j) {
      const double* brow = &b.data[j * k];
      double acc = 0.0;
      for (std::size_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
      out.data[i * m + j] = acc;
    }
  }
  return out;
}

inline Tensor transpose(const Tensor& a) {
  require_matrix("transpose", a);
  Tensor out = Tensor::zeros({a.cols(), a.rows()});
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) out.at(j, i) = a.at(i, j);
  return out;
}

inline Tensor outer(const Tensor& u, const Tensor& v) {
  if (!u.is_vector() || !v.is_vector())
    throw ShapeError("outer: expected vectors, got " + shape_str(u.shape) + " and " + shape_str(v.shape));
  Tensor out = Tensor::zeros({u.numel(), v.numel()});
  for (std::size_t i = 0; i < u.numel(); ++i)
    for (std::size_t j = 0; j < v.numel(); ++j) out.at(i, j) = u[i] * v[j];
  return out;
}

// Kronecker product; the left factor indexes the slow (outer) position, which
// under the library-wide row-major vec(.) convention is the row index of the
// unvectorized matrix.
inline Tensor kron(const Tensor& a, const Tensor& b) {
  require_matrix("kron", a);
  require_matrix("kron", b);
  const std::size_t ar = a.rows(), ac = a.cols(), br = b.rows(), bc = b.cols();
  Tensor out = Tensor::zeros({ar * br, ac * bc});
  for (std::size_t i = 0; i < ar; ++i)
    for (std::size_t j = 0; j < ac; ++j) {
      const double av = a.at(i, j);
      if (av == 0.0) continue;
      for (std::size_t p = 0; p < br; ++p)
        for (std::size_t q = 0; q < bc; ++q) out.at(i * br + p, j * bc + q) = av * b.at(p, q);
    }
  return out;
}

// Row-major vec of a matrix: rows are stacked, row index is the slow index.
inline Tensor vec_row_major(const Tensor& a) {
  require_matrix("vec_row_major", a);
  Tensor v;
  v.shape = {a.numel()};
  v.data = a.data;
  return v;
}

inline Tensor reshape(const Tensor& a, Shape s) {
  if (shape_numel(s) != a.numel())
    throw ShapeError("reshape: cannot view " + shape_str(a.shape) + " as " + shape_str(s));
  Tensor out;
  out.shape = std::move(s);
  out.data = a.data;
  return out;
}

}  // namespace s2o
