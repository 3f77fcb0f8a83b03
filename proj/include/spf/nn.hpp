#pragma once

#include <cstring>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "spf/autodiff.hpp"
#include "spf/rng.hpp"
#include "spf/tensor.hpp"

namespace spf {

constexpr double kLayerNormEps = 1e-5;

struct NetworkSpec {
  std::vector<int> obs_part_widths;  // one entry per observation group
  int global_state_width = 1;       // value-network input width
  int encoder_hidden = 64;
  int lstm_hidden = 64;
  int num_actions = 2;
  int num_agents = 1;
  int embedding_width = 8;

  void validate() const {
    SPF_CHECK(!obs_part_widths.empty(), "NetworkSpec: need at least one observation part");
    for (int w : obs_part_widths) SPF_CHECK(w >= 1, "NetworkSpec: part widths must be >= 1");
    SPF_CHECK(global_state_width >= 1 && encoder_hidden >= 1 && lstm_hidden >= 1 &&
                  embedding_width >= 1 && num_agents >= 1,
              "NetworkSpec: widths must be >= 1");
    SPF_CHECK(num_actions >= 2, "NetworkSpec: action count must be >= 2");
  }

  // FNV-1a over all fields in declaration order; stored in parameter blobs
  // so a blob can never be deserialized against the wrong architecture.
  std::uint64_t fingerprint() const {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    auto mix = [&h](std::uint64_t v) {
      for (int i = 0; i < 8; ++i) {
        h ^= (v >> (8 * i)) & 0xff;
        h *= 0x100000001b3ULL;
      }
    };
    mix(obs_part_widths.size());
    for (int w : obs_part_widths) mix(static_cast<std::uint64_t>(w));
    mix(static_cast<std::uint64_t>(global_state_width));
    mix(static_cast<std::uint64_t>(encoder_hidden));
    mix(static_cast<std::uint64_t>(lstm_hidden));
    mix(static_cast<std::uint64_t>(num_actions));
    mix(static_cast<std::uint64_t>(num_agents));
    mix(static_cast<std::uint64_t>(embedding_width));
    return h;
  }

  bool operator==(const NetworkSpec&) const = default;
};

struct LinearParams {
  Tensor w, b;

  void init(int out, int in, double gain, Rng& rng) {
    w = orthogonal_init(out, in, gain, rng);
    b = Tensor::zeros({out});
    w.ensure_grad();
    b.ensure_grad();
  }
};

struct LayerNormParams {
  Tensor gamma, beta;

  void init(int n) {
    gamma = Tensor({n}, std::vector<double>(n, 1.0));
    beta = Tensor::zeros({n});
    gamma.ensure_grad();
    beta.ensure_grad();
  }
};

// Two fully-connected layers, each Linear -> LayerNorm -> ReLU.
struct EncoderParams {
  LinearParams l1, l2;
  LayerNormParams n1, n2;

  void init(int in, int hidden, Rng& rng) {
    l1.init(hidden, in, std::sqrt(2.0), rng);
    n1.init(hidden);
    l2.init(hidden, hidden, std::sqrt(2.0), rng);
    n2.init(hidden);
  }
};

// Gate layout in w_x / w_h / b rows: [input, forget, cell, output].
struct LstmParams {
  Tensor w_x, w_h, b;
  int hidden = 0;

  void init(int in, int h, Rng& rng) {
    hidden = h;
    w_x = orthogonal_init(4 * h, in, 1.0, rng);
    w_h = orthogonal_init(4 * h, h, 1.0, rng);
    b = Tensor::zeros({4 * h});
    w_x.ensure_grad();
    w_h.ensure_grad();
    b.ensure_grad();
  }
};

struct RecurrentState {
  Tensor h, c;

  static RecurrentState zero(int width) {
    return RecurrentState{Tensor::zeros({width}), Tensor::zeros({width})};
  }
  bool finite() const { return h.finite() && c.finite(); }
};

template <class Ctx>
typename Ctx::V encoder_forward(Ctx& cx, EncoderParams& p, typename Ctx::V x) {
  auto h1 = cx.relu(cx.layer_norm(cx.add_bias(cx.matvec(p.l1.w, x), p.l1.b), p.n1.gamma, p.n1.beta, kLayerNormEps));
  return cx.relu(cx.layer_norm(cx.add_bias(cx.matvec(p.l2.w, h1), p.l2.b), p.n2.gamma, p.n2.beta, kLayerNormEps));
}

template <class Ctx>
struct LstmOut {
  typename Ctx::V h, c;
};

template <class Ctx>
LstmOut<Ctx> lstm_step(Ctx& cx, LstmParams& p, typename Ctx::V x, typename Ctx::V h_prev, typename Ctx::V c_prev) {
  const int H = p.hidden;
  auto z = cx.add_bias(cx.add(cx.matvec(p.w_x, x), cx.matvec(p.w_h, h_prev)), p.b);
  auto gi = cx.sigmoid(cx.slice(z, 0, H));
  auto gf = cx.sigmoid(cx.slice(z, H, H));
  auto gc = cx.tanh_(cx.slice(z, 2 * H, H));
  auto go = cx.sigmoid(cx.slice(z, 3 * H, H));
  auto c = cx.add(cx.mul(gf, c_prev), cx.mul(gi, gc));
  auto h = cx.mul(go, cx.tanh_(c));
  return {h, c};
}

// Shared policy network: per-part encoders -> LSTM -> [h, player-ID
// embedding] -> action head. One parameter set serves all teammates; the
// embedding row is what tells agents apart.
struct PolicyNet {
  NetworkSpec spec;
  std::vector<EncoderParams> encoders;
  LstmParams lstm;
  Tensor embedding;  // num_agents x embedding_width
  LinearParams head;

  void init(Rng& rng) {
    spec.validate();
    encoders.resize(spec.obs_part_widths.size());
    for (std::size_t i = 0; i < encoders.size(); ++i)
      encoders[i].init(spec.obs_part_widths[i], spec.encoder_hidden, rng);
    lstm.init(static_cast<int>(encoders.size()) * spec.encoder_hidden, spec.lstm_hidden, rng);
    embedding = orthogonal_init(spec.num_agents, spec.embedding_width, 1.0, rng);
    embedding.ensure_grad();
    head.init(spec.num_actions, spec.lstm_hidden + spec.embedding_width, 0.01, rng);
  }

  // Serialization / optimizer ordering: encoders in part order
  // (l1.w, l1.b, n1.gamma, n1.beta, l2.w, l2.b, n2.gamma, n2.beta),
  // then lstm.w_x, lstm.w_h, lstm.b, embedding, head.w, head.b.
  void visit(const std::function<void(Tensor&)>& fn) {
    for (auto& e : encoders) {
      fn(e.l1.w);
      fn(e.l1.b);
      fn(e.n1.gamma);
      fn(e.n1.beta);
      fn(e.l2.w);
      fn(e.l2.b);
      fn(e.n2.gamma);
      fn(e.n2.beta);
    }
    fn(lstm.w_x);
    fn(lstm.w_h);
    fn(lstm.b);
    fn(embedding);
    fn(head.w);
    fn(head.b);
  }
};

// Centralized value network: global-state encoder -> LSTM -> scalar head.
struct ValueNet {
  NetworkSpec spec;
  EncoderParams encoder;
  LstmParams lstm;
  LinearParams head;

  void init(Rng& rng) {
    spec.validate();
    encoder.init(spec.global_state_width, spec.encoder_hidden, rng);
    lstm.init(spec.encoder_hidden, spec.lstm_hidden, rng);
    head.init(1, spec.lstm_hidden, 1.0, rng);
  }

  void visit(const std::function<void(Tensor&)>& fn) {
    fn(encoder.l1.w);
    fn(encoder.l1.b);
    fn(encoder.n1.gamma);
    fn(encoder.n1.beta);
    fn(encoder.l2.w);
    fn(encoder.l2.b);
    fn(encoder.n2.gamma);
    fn(encoder.n2.beta);
    fn(lstm.w_x);
    fn(lstm.w_h);
    fn(lstm.b);
    fn(head.w);
    fn(head.b);
  }
};

template <class Net>
std::vector<Tensor*> parameters(Net& net) {
  std::vector<Tensor*> out;
  net.visit([&out](Tensor& t) { out.push_back(&t); });
  return out;
}

template <class Net>
long parameter_count(Net& net) {
  long n = 0;
  net.visit([&n](Tensor& t) { n += t.numel(); });
  return n;
}

template <class Net>
void zero_grads(Net& net) {
  net.visit([](Tensor& t) { t.zero_grad(); });
}

// Discrete action distribution with hard-masked illegal actions: their
// probability is exactly zero, the legal probabilities renormalize.
struct MaskedCategorical {
  Tensor logits;
  std::vector<std::uint8_t> mask;

  Tensor log_probs() const {
    Tensor out = Tensor::zeros(logits.shape);
    kernels::masked_log_softmax(logits, mask, out);
    return out;
  }

  Tensor probs() const {
    Tensor lp = log_probs();
    Tensor p = Tensor::zeros(lp.shape);
    for (std::size_t i = 0; i < p.data.size(); ++i) p.data[i] = mask[i] ? std::exp(lp.data[i]) : 0.0;
    return p;
  }

  double log_prob(int action) const {
    SPF_CHECK(action >= 0 && action < static_cast<int>(mask.size()) && mask[action],
              "log_prob: action " << action << " is illegal under the mask");
    return log_probs().at(action);
  }

  double entropy() const {
    Tensor lp = log_probs();
    double h = 0.0;
    for (std::size_t i = 0; i < lp.data.size(); ++i)
      if (mask[i]) h -= std::exp(lp.data[i]) * lp.data[i];
    return h;
  }

  int sample(Rng& rng) const {
    Tensor p = probs();
    double u = rng.uniform();
    double acc = 0.0;
    int last_legal = -1;
    for (std::size_t i = 0; i < p.data.size(); ++i) {
      if (!mask[i]) continue;
      last_legal = static_cast<int>(i);
      acc += p.data[i];
      if (u < acc) return last_legal;
    }
    return last_legal;  // u landed in the rounding tail
  }

  int argmax() const {
    Tensor p = probs();
    int best = -1;
    double bv = -1.0;
    for (std::size_t i = 0; i < p.data.size(); ++i) {
      if (mask[i] && p.data[i] > bv) {
        bv = p.data[i];
        best = static_cast<int>(i);
      }
    }
    return best;
  }
};

template <class Ctx>
struct PolicyOut {
  typename Ctx::V logits;
  typename Ctx::V h, c;
};

// One policy step for one agent. Callers apply masked_log_softmax (training)
// or build a MaskedCategorical (acting) from the logits.
template <class Ctx>
PolicyOut<Ctx> policy_forward(Ctx& cx, PolicyNet& net, std::span<const Tensor> obs_parts, int player_id,
                              typename Ctx::V h, typename Ctx::V c) {
  SPF_CHECK(obs_parts.size() == net.spec.obs_part_widths.size(),
            "policy_forward: expected " << net.spec.obs_part_widths.size() << " obs parts, got " << obs_parts.size());
  SPF_CHECK(player_id >= 0 && player_id < net.spec.num_agents, "policy_forward: player_id out of range");
  std::vector<typename Ctx::V> encoded;
  encoded.reserve(obs_parts.size());
  for (std::size_t i = 0; i < obs_parts.size(); ++i) {
    SPF_CHECK(obs_parts[i].numel() == net.spec.obs_part_widths[i],
              "policy_forward: obs part " << i << " width " << obs_parts[i].numel() << " != spec "
                                          << net.spec.obs_part_widths[i]);
    encoded.push_back(encoder_forward(cx, net.encoders[i], cx.input(obs_parts[i])));
  }
  auto u = cx.concat(std::span<const typename Ctx::V>(encoded));
  auto lo = lstm_step(cx, net.lstm, u, h, c);
  std::vector<typename Ctx::V> hp{lo.h, cx.embed(net.embedding, player_id)};
  auto a = cx.concat(std::span<const typename Ctx::V>(hp));
  auto logits = cx.add_bias(cx.matvec(net.head.w, a), net.head.b);
  return {logits, lo.h, lo.c};
}

template <class Ctx>
struct ValueOut {
  typename Ctx::V v;
  typename Ctx::V h, c;
};

template <class Ctx>
ValueOut<Ctx> value_forward(Ctx& cx, ValueNet& net, const Tensor& global_state, typename Ctx::V h,
                            typename Ctx::V c) {
  SPF_CHECK(global_state.numel() == net.spec.global_state_width, "value_forward: global state width mismatch");
  SPF_CHECK(global_state.finite(), "value_forward: non-finite input");
  auto e = encoder_forward(cx, net.encoder, cx.input(global_state));
  auto lo = lstm_step(cx, net.lstm, e, h, c);
  auto v = cx.add_bias(cx.matvec(net.head.w, lo.h), net.head.b);
  return {v, lo.h, lo.c};
}

// Acting-path helpers (no tape).

struct PolicyStepResult {
  MaskedCategorical dist;
  RecurrentState state;
};

inline PolicyStepResult policy_step(PolicyNet& net, std::span<const Tensor> obs_parts, int player_id,
                                    const RecurrentState& state, const std::vector<std::uint8_t>& mask) {
  bool any = false;
  for (auto m : mask) any = any || m;
  SPF_CHECK(any, "policy_step: all actions masked (environment bug)");
  SPF_CHECK(static_cast<int>(mask.size()) == net.spec.num_actions, "policy_step: mask width mismatch");
  EvalCtx cx;
  auto out = policy_forward(cx, net, obs_parts, player_id, state.h, state.c);
  return {MaskedCategorical{std::move(out.logits), mask}, RecurrentState{std::move(out.h), std::move(out.c)}};
}

struct ValueStepResult {
  double v;
  RecurrentState state;
};

inline ValueStepResult value_step(ValueNet& net, const Tensor& global_state, const RecurrentState& state) {
  EvalCtx cx;
  auto out = value_forward(cx, net, global_state, state.h, state.c);
  return {out.v.at(0), RecurrentState{std::move(out.h), std::move(out.c)}};
}

// Bias-corrected Adam over a fixed parameter visit order.
struct AdamConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

class Adam {
 public:
  Adam() = default;
  Adam(AdamConfig cfg, std::span<Tensor* const> params) : cfg_(cfg) {
    for (Tensor* p : params) {
      m_.push_back(Tensor::zeros(p->shape));
      v_.push_back(Tensor::zeros(p->shape));
    }
  }

  void step(std::span<Tensor* const> params) {
    SPF_CHECK(params.size() == m_.size(), "Adam::step: parameter list changed");
    for (Tensor* p : params) {
      SPF_CHECK(p->has_grad(), "Adam::step: parameter missing grad");
      for (double g : p->grad) SPF_CHECK(std::isfinite(g), "Adam::step: non-finite gradient, no update applied");
    }
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (std::size_t k = 0; k < params.size(); ++k) {
      Tensor& p = *params[k];
      for (std::size_t i = 0; i < p.data.size(); ++i) {
        const double g = p.grad[i];
        m_[k].data[i] = cfg_.beta1 * m_[k].data[i] + (1.0 - cfg_.beta1) * g;
        v_[k].data[i] = cfg_.beta2 * v_[k].data[i] + (1.0 - cfg_.beta2) * g * g;
        const double mhat = m_[k].data[i] / bc1;
        const double vhat = v_[k].data[i] / bc2;
        p.data[i] -= cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps);
      }
    }
  }

  long step_count() const { return t_; }
  const AdamConfig& config() const { return cfg_; }

  // Moments + step counter, appended to a byte buffer (little-endian doubles).
  void serialize(std::vector<std::uint8_t>& out) const;
  void deserialize(const std::vector<std::uint8_t>& in, std::size_t& off);

 private:
  AdamConfig cfg_;
  long t_ = 0;
  std::vector<Tensor> m_, v_;
};

// Global-norm gradient clipping; returns the pre-clip norm.
template <class Net>
double clip_grad_norm(Net& net, double max_norm) {
  double sq = 0.0;
  net.visit([&sq](Tensor& t) {
    for (double g : t.grad) sq += g * g;
  });
  double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    double s = max_norm / norm;
    net.visit([s](Tensor& t) {
      for (double& g : t.grad) g *= s;
    });
  }
  return norm;
}

// ---- Parameter blob format ----------------------------------------------
// Little-endian. Header: magic "SPFG", format version u32, NetworkSpec
// fingerprint u64. Payload: raw doubles in visit() order. Loaders know the
// expected payload length from the spec, so truncated or mismatched blobs
// are rejected.

namespace detail {

inline void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>((v >> (8 * i)) & 0xff));
}

inline void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>((v >> (8 * i)) & 0xff));
}

inline void put_f64(std::vector<std::uint8_t>& out, double d) {
  std::uint64_t v;
  std::memcpy(&v, &d, 8);
  put_u64(out, v);
}

inline std::uint32_t get_u32(const std::vector<std::uint8_t>& in, std::size_t& off) {
  SPF_CHECK(off + 4 <= in.size(), "blob: truncated");
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(in[off + i]) << (8 * i);
  off += 4;
  return v;
}

inline std::uint64_t get_u64(const std::vector<std::uint8_t>& in, std::size_t& off) {
  SPF_CHECK(off + 8 <= in.size(), "blob: truncated");
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(in[off + i]) << (8 * i);
  off += 8;
  return v;
}

inline double get_f64(const std::vector<std::uint8_t>& in, std::size_t& off) {
  std::uint64_t v = get_u64(in, off);
  double d;
  std::memcpy(&d, &v, 8);
  return d;
}

constexpr std::uint32_t kBlobVersion = 1;
constexpr char kBlobMagic[4] = {'S', 'P', 'F', 'G'};

}  // namespace detail

template <class Net>
std::vector<std::uint8_t> serialize_params(Net& net) {
  std::vector<std::uint8_t> out;
  out.insert(out.end(), detail::kBlobMagic, detail::kBlobMagic + 4);
  detail::put_u32(out, detail::kBlobVersion);
  detail::put_u64(out, net.spec.fingerprint());
  net.visit([&out](Tensor& t) {
    for (double d : t.data) detail::put_f64(out, d);
  });
  return out;
}

template <class Net>
void deserialize_params(const std::vector<std::uint8_t>& blob, Net& net) {
  std::size_t off = 0;
  SPF_CHECK(blob.size() >= 16, "blob: too short for header");
  SPF_CHECK(std::memcmp(blob.data(), detail::kBlobMagic, 4) == 0, "blob: bad magic");
  off = 4;
  std::uint32_t ver = detail::get_u32(blob, off);
  SPF_CHECK(ver == detail::kBlobVersion, "blob: unsupported format version " << ver);
  std::uint64_t fp = detail::get_u64(blob, off);
  SPF_CHECK(fp == net.spec.fingerprint(), "blob: NetworkSpec fingerprint mismatch");
  long count = parameter_count(net);
  SPF_CHECK(blob.size() == off + static_cast<std::size_t>(count) * 8,
            "blob: payload size mismatch (" << blob.size() - off << " bytes, expected " << count * 8 << ")");
  net.visit([&blob, &off](Tensor& t) {
    for (double& d : t.data) d = detail::get_f64(blob, off);
  });
}

inline void Adam::serialize(std::vector<std::uint8_t>& out) const {
  detail::put_u64(out, static_cast<std::uint64_t>(t_));
  detail::put_u64(out, m_.size());
  for (const auto& list : {std::cref(m_), std::cref(v_)})
    for (const Tensor& t : list.get())
      for (double d : t.data) detail::put_f64(out, d);
}

inline void Adam::deserialize(const std::vector<std::uint8_t>& in, std::size_t& off) {
  t_ = static_cast<long>(detail::get_u64(in, off));
  std::uint64_t n = detail::get_u64(in, off);
  SPF_CHECK(n == m_.size(), "Adam::deserialize: moment count mismatch");
  for (auto* list : {&m_, &v_})
    for (Tensor& t : *list)
      for (double& d : t.data) d = detail::get_f64(in, off);
}

}  // namespace spf
