#pragma once

#include <cmath>
#include <functional>
#include <memory>
#include <span>
#include <unordered_map>
#include <utility>
#include <vector>

#include "spf/tensor.hpp"

namespace spf {

// Reverse-mode differentiation over a recorded tape of tensor operations.
//
// Node creation order is a topological order of the computation graph, so
// backward() is a single reverse sweep. Parameters enter the tape as leaf
// nodes with a sink pointer; their adjoints are accumulated into
// Tensor::grad at the end of the sweep (callers zero grads beforehand).
//
// Forward math is delegated to the same kernels the inference path uses, so
// a taped forward pass is bit-identical to an untaped one.
struct Var {
  int id = -1;
};

class Tape {
 public:
  using V = Var;
  static constexpr bool kRecordsGrad = true;

  V input(const Tensor& t) { return push(t, {}, nullptr); }

  V param(Tensor& p) {
    auto it = leased_.find(&p);
    if (it != leased_.end()) return it->second;
    SPF_CHECK(p.has_grad(), "Tape::param: parameter has no grad slot");
    V v = push(Tensor(p.shape, p.data), {});
    leased_.emplace(&p, v);
    return v;
  }

  const Tensor& value(V v) const { return nodes_[v.id].val; }

  V matvec(Tensor& w, V x) {
    V wv = param(w);
    Tensor y = Tensor::zeros({w.rows()});
    kernels::matvec(w, val(x), y);
    return push(std::move(y), [this, wv, x](int self) {
      const Tensor& W = val(wv);
      const Tensor& X = val(x);
      const int r = W.rows(), c = W.cols();
      const std::vector<double>& g = nodes_[self].grad;
      std::vector<double>& gw = nodes_[wv.id].grad;
      std::vector<double>& gx = nodes_[x.id].grad;
      for (int i = 0; i < r; ++i) {
        const double gi = g[i];
        if (gi == 0.0) continue;
        const double* wrow = W.data.data() + static_cast<std::size_t>(i) * c;
        double* gwrow = gw.data() + static_cast<std::size_t>(i) * c;
        for (int j = 0; j < c; ++j) {
          gwrow[j] += gi * X.data[j];
          gx[j] += gi * wrow[j];
        }
      }
    });
  }

  V add_bias(V x, Tensor& b) {
    V bv = param(b);
    Tensor y = Tensor::zeros(val(x).shape);
    kernels::add(val(x), b, y);
    return push(std::move(y), [this, x, bv](int self) {
      accumulate(x, nodes_[self].grad);
      accumulate(bv, nodes_[self].grad);
    });
  }

  V add(V a, V b) {
    Tensor y = Tensor::zeros(val(a).shape);
    kernels::add(val(a), val(b), y);
    return push(std::move(y), [this, a, b](int self) {
      accumulate(a, nodes_[self].grad);
      accumulate(b, nodes_[self].grad);
    });
  }

  V sub(V a, V b) {
    Tensor y = Tensor::zeros(val(a).shape);
    kernels::sub(val(a), val(b), y);
    return push(std::move(y), [this, a, b](int self) {
      const auto& g = nodes_[self].grad;
      auto& ga = nodes_[a.id].grad;
      auto& gb = nodes_[b.id].grad;
      for (std::size_t i = 0; i < g.size(); ++i) {
        ga[i] += g[i];
        gb[i] -= g[i];
      }
    });
  }

  V mul(V a, V b) {
    Tensor y = Tensor::zeros(val(a).shape);
    kernels::mul(val(a), val(b), y);
    return push(std::move(y), [this, a, b](int self) {
      const auto& g = nodes_[self].grad;
      const auto& av = val(a).data;
      const auto& bv = val(b).data;
      auto& ga = nodes_[a.id].grad;
      auto& gb = nodes_[b.id].grad;
      for (std::size_t i = 0; i < g.size(); ++i) {
        ga[i] += g[i] * bv[i];
        gb[i] += g[i] * av[i];
      }
    });
  }

  V relu(V x) {
    Tensor y = Tensor::zeros(val(x).shape);
    kernels::relu(val(x), y);
    return push(std::move(y), [this, x](int self) {
      const auto& g = nodes_[self].grad;
      const auto& xv = val(x).data;
      auto& gx = nodes_[x.id].grad;
      for (std::size_t i = 0; i < g.size(); ++i)
        if (xv[i] > 0.0) gx[i] += g[i];
    });
  }

  V sigmoid(V x) {
    Tensor y = Tensor::zeros(val(x).shape);
    kernels::sigmoid(val(x), y);
    return push(std::move(y), [this, x](int self) {
      const auto& g = nodes_[self].grad;
      const auto& yv = nodes_[self].val.data;
      auto& gx = nodes_[x.id].grad;
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * yv[i] * (1.0 - yv[i]);
    });
  }

  V tanh_(V x) {
    Tensor y = Tensor::zeros(val(x).shape);
    kernels::tanh(val(x), y);
    return push(std::move(y), [this, x](int self) {
      const auto& g = nodes_[self].grad;
      const auto& yv = nodes_[self].val.data;
      auto& gx = nodes_[x.id].grad;
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * (1.0 - yv[i] * yv[i]);
    });
  }

  V exp_(V x) {
    const Tensor& xv = val(x);
    Tensor y = Tensor::zeros(xv.shape);
    for (std::size_t i = 0; i < y.data.size(); ++i) y.data[i] = std::exp(xv.data[i]);
    return push(std::move(y), [this, x](int self) {
      const auto& g = nodes_[self].grad;
      const auto& yv = nodes_[self].val.data;
      auto& gx = nodes_[x.id].grad;
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * yv[i];
    });
  }

  V layer_norm(V x, Tensor& gamma, Tensor& beta, double eps) {
    V gv = param(gamma), bv = param(beta);
    Tensor y = Tensor::zeros(val(x).shape);
    Tensor xhat = Tensor::zeros(val(x).shape);
    double inv_std = 0.0;
    kernels::layer_norm(val(x), gamma, beta, eps, y, xhat, inv_std);
    auto saved = std::make_shared<Tensor>(std::move(xhat));
    return push(std::move(y), [this, x, gv, bv, saved, inv_std](int self) {
      const auto& g = nodes_[self].grad;
      const auto& gm = val(gv).data;
      const auto& xh = saved->data;
      const std::size_t n = g.size();
      auto& ggamma = nodes_[gv.id].grad;
      auto& gbeta = nodes_[bv.id].grad;
      auto& gx = nodes_[x.id].grad;
      double mean_dxhat = 0.0, mean_dxhat_xhat = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        double dxhat = g[i] * gm[i];
        mean_dxhat += dxhat;
        mean_dxhat_xhat += dxhat * xh[i];
        ggamma[i] += g[i] * xh[i];
        gbeta[i] += g[i];
      }
      mean_dxhat /= static_cast<double>(n);
      mean_dxhat_xhat /= static_cast<double>(n);
      for (std::size_t i = 0; i < n; ++i) {
        double dxhat = g[i] * gm[i];
        gx[i] += inv_std * (dxhat - mean_dxhat - xh[i] * mean_dxhat_xhat);
      }
    });
  }

  V concat(std::span<const V> parts) {
    int total = 0;
    for (V p : parts) total += static_cast<int>(val(p).numel());
    Tensor y = Tensor::zeros({total});
    int off = 0;
    for (V p : parts) {
      const auto& d = val(p).data;
      std::copy(d.begin(), d.end(), y.data.begin() + off);
      off += static_cast<int>(d.size());
    }
    std::vector<V> ps(parts.begin(), parts.end());
    return push(std::move(y), [this, ps](int self) {
      const auto& g = nodes_[self].grad;
      std::size_t off2 = 0;
      for (V p : ps) {
        auto& gp = nodes_[p.id].grad;
        for (std::size_t i = 0; i < gp.size(); ++i) gp[i] += g[off2 + i];
        off2 += gp.size();
      }
    });
  }

  V slice(V x, int off, int len) {
    Tensor y = Tensor::zeros({len});
    const auto& d = val(x).data;
    std::copy(d.begin() + off, d.begin() + off + len, y.data.begin());
    return push(std::move(y), [this, x, off](int self) {
      const auto& g = nodes_[self].grad;
      auto& gx = nodes_[x.id].grad;
      for (std::size_t i = 0; i < g.size(); ++i) gx[off + i] += g[i];
    });
  }

  // Row lookup in an embedding table (n x d).
  V embed(Tensor& table, int row) {
    V tv = param(table);
    const int d = table.cols();
    Tensor y = Tensor::zeros({d});
    for (int j = 0; j < d; ++j) y.at(j) = table.at(row, j);
    return push(std::move(y), [this, tv, row, d](int self) {
      const auto& g = nodes_[self].grad;
      auto& gt = nodes_[tv.id].grad;
      for (int j = 0; j < d; ++j) gt[static_cast<std::size_t>(row) * d + j] += g[j];
    });
  }

  V masked_log_softmax(V logits, const std::vector<std::uint8_t>& mask) {
    Tensor y = Tensor::zeros(val(logits).shape);
    kernels::masked_log_softmax(val(logits), mask, y);
    auto m = std::make_shared<std::vector<std::uint8_t>>(mask);
    return push(std::move(y), [this, logits, m](int self) {
      const auto& g = nodes_[self].grad;
      const auto& yv = nodes_[self].val.data;
      auto& gx = nodes_[logits.id].grad;
      double gsum = 0.0;
      for (std::size_t i = 0; i < g.size(); ++i)
        if ((*m)[i]) gsum += g[i];
      for (std::size_t i = 0; i < g.size(); ++i)
        if ((*m)[i]) gx[i] += g[i] - std::exp(yv[i]) * gsum;
    });
  }

  V pick(V x, int idx) {
    Tensor y({1}, {val(x).at(idx)});
    return push(std::move(y), [this, x, idx](int self) {
      nodes_[x.id].grad[idx] += nodes_[self].grad[0];
    });
  }

  // Entropy of a masked categorical given its log-probs: -sum_legal p*logp.
  V entropy_from_logp(V logp, const std::vector<std::uint8_t>& mask) {
    const auto& lp = val(logp).data;
    double h = 0.0;
    for (std::size_t i = 0; i < lp.size(); ++i)
      if (mask[i]) h -= std::exp(lp[i]) * lp[i];
    auto m = std::make_shared<std::vector<std::uint8_t>>(mask);
    return push(Tensor({1}, {h}), [this, logp, m](int self) {
      const double g = nodes_[self].grad[0];
      const auto& lp2 = val(logp).data;
      auto& gx = nodes_[logp.id].grad;
      for (std::size_t i = 0; i < gx.size(); ++i)
        if ((*m)[i]) gx[i] -= g * std::exp(lp2[i]) * (lp2[i] + 1.0);
    });
  }

  V scale(V x, double c) {
    const Tensor& xv = val(x);
    Tensor y = Tensor::zeros(xv.shape);
    for (std::size_t i = 0; i < y.data.size(); ++i) y.data[i] = xv.data[i] * c;
    return push(std::move(y), [this, x, c](int self) {
      const auto& g = nodes_[self].grad;
      auto& gx = nodes_[x.id].grad;
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * c;
    });
  }

  V add_const(V x, double c) {
    const Tensor& xv = val(x);
    Tensor y = Tensor::zeros(xv.shape);
    for (std::size_t i = 0; i < y.data.size(); ++i) y.data[i] = xv.data[i] + c;
    return push(std::move(y), [this, x](int self) { accumulate(x, nodes_[self].grad); });
  }

  // Elementwise min; ties route the gradient to the first argument.
  V min_(V a, V b) {
    const Tensor& av = val(a);
    const Tensor& bv = val(b);
    Tensor y = Tensor::zeros(av.shape);
    for (std::size_t i = 0; i < y.data.size(); ++i) y.data[i] = std::min(av.data[i], bv.data[i]);
    return push(std::move(y), [this, a, b](int self) {
      const auto& g = nodes_[self].grad;
      const auto& av2 = val(a).data;
      const auto& bv2 = val(b).data;
      auto& ga = nodes_[a.id].grad;
      auto& gb = nodes_[b.id].grad;
      for (std::size_t i = 0; i < g.size(); ++i) {
        if (av2[i] <= bv2[i])
          ga[i] += g[i];
        else
          gb[i] += g[i];
      }
    });
  }

  V max_(V a, V b) {
    const Tensor& av = val(a);
    const Tensor& bv = val(b);
    Tensor y = Tensor::zeros(av.shape);
    for (std::size_t i = 0; i < y.data.size(); ++i) y.data[i] = std::max(av.data[i], bv.data[i]);
    return push(std::move(y), [this, a, b](int self) {
      const auto& g = nodes_[self].grad;
      const auto& av2 = val(a).data;
      const auto& bv2 = val(b).data;
      auto& ga = nodes_[a.id].grad;
      auto& gb = nodes_[b.id].grad;
      for (std::size_t i = 0; i < g.size(); ++i) {
        if (av2[i] >= bv2[i])
          ga[i] += g[i];
        else
          gb[i] += g[i];
      }
    });
  }

  // Gradient is zero outside [lo, hi].
  V clamp(V x, double lo, double hi) {
    const Tensor& xv = val(x);
    Tensor y = Tensor::zeros(xv.shape);
    for (std::size_t i = 0; i < y.data.size(); ++i) y.data[i] = std::clamp(xv.data[i], lo, hi);
    return push(std::move(y), [this, x, lo, hi](int self) {
      const auto& g = nodes_[self].grad;
      const auto& xv2 = val(x).data;
      auto& gx = nodes_[x.id].grad;
      for (std::size_t i = 0; i < g.size(); ++i)
        if (xv2[i] >= lo && xv2[i] <= hi) gx[i] += g[i];
    });
  }

  V sum(V x) {
    double s = 0.0;
    for (double v : val(x).data) s += v;
    return push(Tensor({1}, {s}), [this, x](int self) {
      const double g = nodes_[self].grad[0];
      auto& gx = nodes_[x.id].grad;
      for (double& v : gx) v += g;
    });
  }

  V mean(V x) {
    const double n = static_cast<double>(val(x).numel());
    double s = 0.0;
    for (double v : val(x).data) s += v;
    return push(Tensor({1}, {s / n}), [this, x, n](int self) {
      const double g = nodes_[self].grad[0] / n;
      auto& gx = nodes_[x.id].grad;
      for (double& v : gx) v += g;
    });
  }

  // Elementwise sum of same-shaped vars (flat graph, not a chain of adds).
  V add_n(std::span<const V> xs) {
    SPF_CHECK(!xs.empty(), "add_n: empty span");
    if (xs.size() == 1) return xs[0];
    Tensor y = Tensor::zeros(val(xs[0]).shape);
    for (V x : xs)
      for (std::size_t i = 0; i < y.data.size(); ++i) y.data[i] += val(x).data[i];
    std::vector<V> ps(xs.begin(), xs.end());
    return push(std::move(y), [this, ps](int self) {
      const auto& g = nodes_[self].grad;
      for (V p : ps) accumulate(p, g);
    });
  }

  // Seeds d(loss)/d(loss) = 1, sweeps the tape in reverse creation order,
  // then flushes leaf adjoints into the leased parameters' grad slots.
  void backward(V loss) {
    SPF_CHECK(val(loss).numel() == 1, "backward: loss must be scalar");
    SPF_CHECK(std::isfinite(val(loss).at(0)), "backward: loss is not finite");
    SPF_CHECK(!swept_, "backward: tape already swept; reset() first");
    swept_ = true;
    nodes_[loss.id].grad[0] = 1.0;
    for (int i = static_cast<int>(nodes_.size()) - 1; i >= 0; --i)
      if (nodes_[i].back) nodes_[i].back(i);
    for (auto& [p, v] : leased_) {
      const auto& g = nodes_[v.id].grad;
      for (std::size_t i = 0; i < g.size(); ++i) p->grad[i] += g[i];
    }
  }

  void reset() {
    nodes_.clear();
    leased_.clear();
    swept_ = false;
  }

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor val;
    std::vector<double> grad;
    std::function<void(int)> back;
  };

  const Tensor& val(V v) const { return nodes_[v.id].val; }

  void accumulate(V v, const std::vector<double>& g) {
    auto& gx = nodes_[v.id].grad;
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
  }

  V push(Tensor t, std::function<void(int)> back) {
    Node n;
    n.grad.assign(t.data.size(), 0.0);
    n.val = std::move(t);
    n.back = std::move(back);
    nodes_.push_back(std::move(n));
    return V{static_cast<int>(nodes_.size()) - 1};
  }

  std::vector<Node> nodes_;
  std::unordered_map<Tensor*, V> leased_;
  bool swept_ = false;
};

// Same op surface as Tape but computes plain values: the inference path for
// actors and evaluation matches. V is a value type, no graph is built.
struct EvalCtx {
  using V = Tensor;
  static constexpr bool kRecordsGrad = false;

  V input(const Tensor& t) { return t; }
  const Tensor& value(const V& v) const { return v; }

  V matvec(Tensor& w, const V& x) {
    Tensor y = Tensor::zeros({w.rows()});
    kernels::matvec(w, x, y);
    return y;
  }
  V add_bias(const V& x, Tensor& b) {
    Tensor y = Tensor::zeros(x.shape);
    kernels::add(x, b, y);
    return y;
  }
  V add(const V& a, const V& b) {
    Tensor y = Tensor::zeros(a.shape);
    kernels::add(a, b, y);
    return y;
  }
  V sub(const V& a, const V& b) {
    Tensor y = Tensor::zeros(a.shape);
    kernels::sub(a, b, y);
    return y;
  }
  V mul(const V& a, const V& b) {
    Tensor y = Tensor::zeros(a.shape);
    kernels::mul(a, b, y);
    return y;
  }
  V relu(const V& x) {
    Tensor y = Tensor::zeros(x.shape);
    kernels::relu(x, y);
    return y;
  }
  V sigmoid(const V& x) {
    Tensor y = Tensor::zeros(x.shape);
    kernels::sigmoid(x, y);
    return y;
  }
  V tanh_(const V& x) {
    Tensor y = Tensor::zeros(x.shape);
    kernels::tanh(x, y);
    return y;
  }
  V layer_norm(const V& x, Tensor& gamma, Tensor& beta, double eps) {
    Tensor y = Tensor::zeros(x.shape);
    Tensor xhat = Tensor::zeros(x.shape);
    double inv_std = 0.0;
    kernels::layer_norm(x, gamma, beta, eps, y, xhat, inv_std);
    return y;
  }
  V concat(std::span<const V> parts) {
    int total = 0;
    for (const V& p : parts) total += static_cast<int>(p.numel());
    Tensor y = Tensor::zeros({total});
    int off = 0;
    for (const V& p : parts) {
      std::copy(p.data.begin(), p.data.end(), y.data.begin() + off);
      off += static_cast<int>(p.data.size());
    }
    return y;
  }
  V slice(const V& x, int off, int len) {
    Tensor y = Tensor::zeros({len});
    std::copy(x.data.begin() + off, x.data.begin() + off + len, y.data.begin());
    return y;
  }
  V embed(Tensor& table, int row) {
    const int d = table.cols();
    Tensor y = Tensor::zeros({d});
    for (int j = 0; j < d; ++j) y.at(j) = table.at(row, j);
    return y;
  }
  V masked_log_softmax(const V& logits, const std::vector<std::uint8_t>& mask) {
    Tensor y = Tensor::zeros(logits.shape);
    kernels::masked_log_softmax(logits, mask, y);
    return y;
  }
};

}  // namespace spf
