#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <vector>

#include "spf/common.hpp"
#include "spf/rng.hpp"

namespace spf {

// Dense double-precision array. Parameters additionally carry a grad slot of
// the same shape (allocated via ensure_grad); activations leave it empty.
struct Tensor {
  std::vector<int> shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty unless this tensor is a parameter

  Tensor() = default;
  Tensor(std::vector<int> s, std::vector<double> d) : shape(std::move(s)), data(std::move(d)) {
    SPF_CHECK(static_cast<std::size_t>(numel_of(shape)) == data.size(),
              "Tensor: data length " << data.size() << " != product of shape " << numel_of(shape));
  }

  static long numel_of(const std::vector<int>& s) {
    long n = 1;
    for (int d : s) {
      SPF_CHECK(d > 0, "Tensor: dimensions must be positive");
      n *= d;
    }
    return n;
  }

  static Tensor zeros(std::vector<int> s) {
    long n = numel_of(s);
    return Tensor(std::move(s), std::vector<double>(static_cast<std::size_t>(n), 0.0));
  }

  long numel() const { return static_cast<long>(data.size()); }
  int rows() const { return shape.at(0); }
  int cols() const { return shape.at(1); }
  double& at(int i) { return data[static_cast<std::size_t>(i)]; }
  double at(int i) const { return data[static_cast<std::size_t>(i)]; }
  double& at(int r, int c) { return data[static_cast<std::size_t>(r) * cols() + c]; }
  double at(int r, int c) const { return data[static_cast<std::size_t>(r) * cols() + c]; }

  bool has_grad() const { return !grad.empty(); }
  void ensure_grad() {
    if (grad.empty()) grad.assign(data.size(), 0.0);
  }
  void zero_grad() { std::fill(grad.begin(), grad.end(), 0.0); }

  bool finite() const {
    for (double v : data)
      if (!std::isfinite(v)) return false;
    return true;
  }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }
};

// Numeric kernels. Both the inference path and the autodiff tape run
// forward math through these, so the two paths agree bit for bit.
namespace kernels {

constexpr double kMaskedLogit = -1e30;

inline void matvec(const Tensor& w, const Tensor& x, Tensor& y) {
  const int r = w.rows(), c = w.cols();
  const double* wd = w.data.data();
  const double* xd = x.data.data();
  double* yd = y.data.data();
  for (int i = 0; i < r; ++i) {
    double acc = 0.0;
    const double* row = wd + static_cast<std::size_t>(i) * c;
    for (int j = 0; j < c; ++j) acc += row[j] * xd[j];
    yd[i] = acc;
  }
}

inline void add(const Tensor& a, const Tensor& b, Tensor& y) {
  for (std::size_t i = 0; i < y.data.size(); ++i) y.data[i] = a.data[i] + b.data[i];
}

inline void sub(const Tensor& a, const Tensor& b, Tensor& y) {
  for (std::size_t i = 0; i < y.data.size(); ++i) y.data[i] = a.data[i] - b.data[i];
}

inline void mul(const Tensor& a, const Tensor& b, Tensor& y) {
  for (std::size_t i = 0; i < y.data.size(); ++i) y.data[i] = a.data[i] * b.data[i];
}

inline void relu(const Tensor& x, Tensor& y) {
  for (std::size_t i = 0; i < y.data.size(); ++i) y.data[i] = x.data[i] > 0.0 ? x.data[i] : 0.0;
}

inline void sigmoid(const Tensor& x, Tensor& y) {
  for (std::size_t i = 0; i < y.data.size(); ++i) y.data[i] = 1.0 / (1.0 + std::exp(-x.data[i]));
}

inline void tanh(const Tensor& x, Tensor& y) {
  for (std::size_t i = 0; i < y.data.size(); ++i) y.data[i] = std::tanh(x.data[i]);
}

// y = gamma * (x - mean) / sqrt(var + eps) + beta; also reports the
// normalized vector and inverse stddev for the backward pass.
inline void layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps,
                       Tensor& y, Tensor& xhat, double& inv_std) {
  const std::size_t n = x.data.size();
  double mean = 0.0;
  for (double v : x.data) mean += v;
  mean /= static_cast<double>(n);
  double var = 0.0;
  for (double v : x.data) var += (v - mean) * (v - mean);
  var /= static_cast<double>(n);
  inv_std = 1.0 / std::sqrt(var + eps);
  for (std::size_t i = 0; i < n; ++i) {
    xhat.data[i] = (x.data[i] - mean) * inv_std;
    y.data[i] = gamma.data[i] * xhat.data[i] + beta.data[i];
  }
}

// Log-probabilities of a masked categorical: masked entries get kMaskedLogit
// (so exp() underflows to exactly 0), legal entries are log-softmax over the
// legal set only.
inline void masked_log_softmax(const Tensor& logits, const std::vector<std::uint8_t>& mask, Tensor& out) {
  const std::size_t n = logits.data.size();
  double mx = -HUGE_VAL;
  for (std::size_t i = 0; i < n; ++i)
    if (mask[i] && logits.data[i] > mx) mx = logits.data[i];
  SPF_CHECK(mx > -HUGE_VAL, "masked_log_softmax: mask allows no action");
  double sum = 0.0;
  for (std::size_t i = 0; i < n; ++i)
    if (mask[i]) sum += std::exp(logits.data[i] - mx);
  double lse = mx + std::log(sum);
  for (std::size_t i = 0; i < n; ++i) out.data[i] = mask[i] ? logits.data[i] - lse : kMaskedLogit;
}

}  // namespace kernels

// Orthogonal(-row or -column) init via Householder QR of a normal sample,
// with the usual sign fix so the result is drawn from the Haar measure.
// rows <= cols: M M^T = gain^2 I; otherwise M^T M = gain^2 I.
inline Tensor orthogonal_init(int rows, int cols, double gain, Rng& rng) {
  SPF_CHECK(rows >= 1 && cols >= 1 && gain > 0.0, "orthogonal_init: bad dimensions or gain");
  const int n = std::max(rows, cols);
  const int m = std::min(rows, cols);

  // A: n x m standard normal
  std::vector<double> a(static_cast<std::size_t>(n) * m);
  for (double& v : a) v = rng.normal();

  // Householder QR in-place; v vectors stored below the diagonal, R on/above.
  std::vector<double> beta(m), vhead(m), rdiag(m);
  auto A = [&](int i, int j) -> double& { return a[static_cast<std::size_t>(i) * m + j]; };
  for (int k = 0; k < m; ++k) {
    double norm = 0.0;
    for (int i = k; i < n; ++i) norm += A(i, k) * A(i, k);
    norm = std::sqrt(norm);
    double alpha = A(k, k) >= 0.0 ? -norm : norm;
    double v0 = A(k, k) - alpha;
    double vnorm2 = v0 * v0;
    for (int i = k + 1; i < n; ++i) vnorm2 += A(i, k) * A(i, k);
    rdiag[k] = alpha;
    if (vnorm2 == 0.0) {
      beta[k] = 0.0;
      vhead[k] = 0.0;
      continue;
    }
    beta[k] = 2.0 / vnorm2;
    vhead[k] = v0;
    for (int j = k + 1; j < m; ++j) {
      double dot = v0 * A(k, j);
      for (int i = k + 1; i < n; ++i) dot += A(i, k) * A(i, j);
      double s = beta[k] * dot;
      A(k, j) -= s * v0;
      for (int i = k + 1; i < n; ++i) A(i, j) -= s * A(i, k);
    }
    A(k, k) = alpha;
  }

  // Accumulate thin Q = H_0 ... H_{m-1} applied to the first m columns of I.
  std::vector<double> q(static_cast<std::size_t>(n) * m, 0.0);
  auto Q = [&](int i, int j) -> double& { return q[static_cast<std::size_t>(i) * m + j]; };
  for (int j = 0; j < m; ++j) Q(j, j) = 1.0;
  for (int k = m - 1; k >= 0; --k) {
    if (beta[k] == 0.0) continue;
    for (int j = 0; j < m; ++j) {
      double dot = vhead[k] * Q(k, j);
      for (int i = k + 1; i < n; ++i) dot += A(i, k) * Q(i, j);
      double s = beta[k] * dot;
      Q(k, j) -= s * vhead[k];
      for (int i = k + 1; i < n; ++i) Q(i, j) -= s * A(i, k);
    }
  }
  for (int j = 0; j < m; ++j) {
    if (rdiag[j] < 0.0)
      for (int i = 0; i < n; ++i) Q(i, j) = -Q(i, j);
  }

  Tensor out = Tensor::zeros({rows, cols});
  if (rows <= cols) {
    // M = gain * Q^T, rows of M orthonormal
    for (int i = 0; i < rows; ++i)
      for (int j = 0; j < cols; ++j) out.at(i, j) = gain * Q(j, i);
  } else {
    for (int i = 0; i < rows; ++i)
      for (int j = 0; j < cols; ++j) out.at(i, j) = gain * Q(i, j);
  }
  return out;
}

}  // namespace spf
