// Independent oracles and fixtures shared by the unit tests and the acceptance binary.
#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <span>
#include <vector>

#include "attacks.hpp"
#include "network.hpp"
#include "tensor.hpp"

namespace advcheck::testing {

inline Tensor random_tensor(const Shape& shape, std::mt19937_64& rng, float lo = 0.0f, float hi = 1.0f) {
  std::uniform_real_distribution<float> u(lo, hi);
  Tensor t(shape);
  for (auto& v : t.data) v = u(rng);
  return t;
}

/// Direct nested-loop convolution over a (C, H, W) input; weight is (O, C, K, K).
inline Tensor naive_conv2d(const Tensor& x, const Tensor& w, const Tensor& b, std::size_t stride,
                           std::size_t padding) {
  const std::size_t C = x.shape[0], H = x.shape[1], W = x.shape[2];
  const std::size_t O = w.shape[0], K = w.shape[2];
  const std::size_t OH = (H + 2 * padding - K) / stride + 1, OW = (W + 2 * padding - K) / stride + 1;
  Tensor y({O, OH, OW});
  for (std::size_t o = 0; o < O; ++o)
    for (std::size_t i = 0; i < OH; ++i)
      for (std::size_t j = 0; j < OW; ++j) {
        double acc = b.data.empty() ? 0.0 : b.data[o];
        for (std::size_t c = 0; c < C; ++c)
          for (std::size_t ki = 0; ki < K; ++ki)
            for (std::size_t kj = 0; kj < K; ++kj) {
              const long r = long(i * stride + ki) - long(padding);
              const long s = long(j * stride + kj) - long(padding);
              if (r < 0 || s < 0 || r >= long(H) || s >= long(W)) continue;
              acc += double(w.data[((o * C + c) * K + ki) * K + kj]) * x.data[(c * H + std::size_t(r)) * W + std::size_t(s)];
            }
        y.data[(o * OH + i) * OW + j] = float(acc);
      }
  return y;
}

inline Tensor naive_relu(Tensor x) {
  for (auto& v : x.data) v = v > 0.0f ? v : 0.0f;
  return x;
}

inline Tensor naive_maxpool(const Tensor& x, std::size_t k, std::size_t stride) {
  const std::size_t C = x.shape[0], H = x.shape[1], W = x.shape[2];
  const std::size_t OH = (H - k) / stride + 1, OW = (W - k) / stride + 1;
  Tensor y({C, OH, OW});
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t i = 0; i < OH; ++i)
      for (std::size_t j = 0; j < OW; ++j) {
        float m = -INFINITY;
        for (std::size_t a = 0; a < k; ++a)
          for (std::size_t bb = 0; bb < k; ++bb) m = std::max(m, x.data[(c * H + i * stride + a) * W + j * stride + bb]);
        y.data[(c * OH + i) * OW + j] = m;
      }
  return y;
}

inline Tensor naive_dense(const Tensor& x, const Tensor& w, const Tensor& b) {
  const std::size_t out = w.shape[0], in = w.shape[1];
  Tensor y({out});
  for (std::size_t o = 0; o < out; ++o) {
    double acc = b.data.empty() ? 0.0 : b.data[o];
    for (std::size_t i = 0; i < in; ++i) acc += double(w.data[o * in + i]) * x.data[i];
    y.data[o] = float(acc);
  }
  return y;
}

inline void randomize_biases(netcore::Network& net, std::mt19937_64& rng, float scale = 0.1f) {
  std::uniform_real_distribution<float> u(-scale, scale);
  for (auto& l : net.mutable_layers())
    for (auto& v : l.bias.data) v = u(rng);
}

/// A random conv or dense-only classifier with 2-4 classes and random biases.
inline netcore::Network random_small_network(std::mt19937_64& rng) {
  using netcore::LayerSpec;
  std::uniform_int_distribution<int> coin(0, 1);
  std::uniform_int_distribution<std::size_t> classes(2, 4);
  const std::size_t C = classes(rng);
  if (coin(rng) == 0) {
    std::uniform_int_distribution<std::size_t> side(6, 9), ch(1, 2), oc(2, 4);
    const std::size_t s = side(rng), in_ch = ch(rng);
    std::vector<LayerSpec> layers{LayerSpec::conv2d(oc(rng), 3, 1, std::size_t(coin(rng))), LayerSpec::relu(),
                                  LayerSpec::maxpool2d(2), LayerSpec::flatten(), LayerSpec::dense(8),
                                  LayerSpec::relu(), LayerSpec::dense(C)};
    auto net = netcore::Network::initialized({in_ch, s, s}, std::move(layers), rng());
    randomize_biases(net, rng);
    return net;
  }
  std::uniform_int_distribution<std::size_t> width(4, 12);
  std::vector<LayerSpec> layers{LayerSpec::flatten(), LayerSpec::dense(width(rng)), LayerSpec::relu(),
                                LayerSpec::dense(width(rng)), LayerSpec::relu(), LayerSpec::dense(C)};
  auto net = netcore::Network::initialized({1, 4, 4}, std::move(layers), rng());
  randomize_biases(net, rng);
  return net;
}

/// The layers above `layer_index` as a standalone network fed by that layer's output.
inline netcore::Network tail_network(const netcore::Network& net, std::size_t layer_index) {
  const auto& layers = net.layers();
  std::vector<netcore::LayerSpec> rest(layers.begin() + long(layer_index) + 1, layers.end());
  return netcore::Network(layers[layer_index].output_shape, std::move(rest));
}

inline double score_of(const std::vector<float>& logits, std::size_t c, netcore::GradientTarget target) {
  if (target == netcore::GradientTarget::logit) return logits[c];
  double top = logits[0];
  for (float v : logits) top = std::max(top, double(v));
  double sum = 0.0;
  for (float v : logits) sum += std::exp(double(v) - top);
  return std::exp(double(logits[c]) - top) / sum;
}

inline double cross_entropy(const std::vector<float>& logits, std::size_t label) {
  double top = logits[0];
  for (float v : logits) top = std::max(top, double(v));
  double sum = 0.0;
  for (float v : logits) sum += std::exp(double(v) - top);
  return top + std::log(sum) - logits[label];
}

inline bool fd_agrees(double analytic, double numeric, double rel = 1e-2, double abs = 1e-4) {
  const double err = std::abs(analytic - numeric);
  if (err <= abs) return true;
  return err <= rel * std::max(std::abs(analytic), std::abs(numeric));
}

struct FdStats {
  std::size_t checked = 0;
  std::size_t failed = 0;
  std::size_t kinks_skipped = 0;
  double worst_abs = 0.0;
};

/// Compares `analytic` to central differences (h = 1e-3) of `f` along `count` coordinates drawn from
/// [0, n). Coordinates where the forward and backward one-sided differences disagree sit on a kink of a
/// piecewise-linear layer (relu at 0, a maxpool tie) and are redrawn; at most 10*count draws are made.
template <class F>
FdStats finite_difference_check(std::span<const float> analytic, std::size_t n, F&& f, std::size_t count,
                                std::mt19937_64& rng) {
  std::uniform_int_distribution<std::size_t> pick(0, n - 1);
  FdStats st;
  const float h = 1e-3f;
  for (std::size_t draw = 0; st.checked < count && draw < 10 * count; ++draw) {
    const auto i = pick(rng);
    const double f0 = f(i, 0.0f), fp = f(i, h), fm = f(i, -h);
    const double forward = (fp - f0) / h, backward = (f0 - fm) / h;
    if (!fd_agrees(forward, backward)) {
      ++st.kinks_skipped;
      continue;
    }
    const double num = (fp - fm) / (2.0 * h);
    ++st.checked;
    st.worst_abs = std::max(st.worst_abs, std::abs(num - analytic[i]));
    if (!fd_agrees(analytic[i], num)) ++st.failed;
  }
  return st;
}

/// Cross-entropy at `label` against central differences over random input coordinates.
inline FdStats check_input_gradient(const netcore::Network& net, const Tensor& x, std::size_t label,
                                    std::size_t count, std::mt19937_64& rng) {
  const auto g = net.grad_wrt_input(x, netcore::CrossEntropyLoss{label});
  auto f = [&](std::size_t i, float d) {
    Tensor xp = x;
    xp.data[i] += d;
    return cross_entropy(net.logits(xp), label);
  };
  return finite_difference_check(g.span(), x.size(), f, count, rng);
}

/// Class score against central differences over random coordinates of layer `layer_index`'s output.
inline FdStats check_layer_gradient(const netcore::Network& net, const Tensor& x, std::size_t layer_index,
                                    std::size_t class_index, netcore::GradientTarget target, std::size_t count,
                                    std::mt19937_64& rng) {
  const auto trace = net.forward(x);
  const auto g = net.grad_wrt_layer(trace, x, layer_index, class_index, target);
  const auto& phi = trace.outputs[layer_index];
  const bool is_logit = layer_index == net.logit_layer();
  const auto tail = is_logit ? netcore::Network() : tail_network(net, layer_index);
  auto f = [&](std::size_t i, float d) {
    Tensor p = phi;
    p.data[i] += d;
    return score_of(is_logit ? p.data : tail.logits(p), class_index, target);
  };
  return finite_difference_check(g.span(), phi.size(), f, count, rng);
}

/// O(n^2) pairwise count with ties worth one half.
inline double pairwise_auc(const std::vector<double>& benign, const std::vector<double>& mis) {
  double wins = 0.0;
  for (double m : mis)
    for (double b : benign) wins += m > b ? 1.0 : (m == b ? 0.5 : 0.0);
  return wins / (double(benign.size()) * double(mis.size()));
}

struct FuzzStats {
  std::size_t runs = 0;
  std::size_t violations = 0;
  std::size_t per_kind[6] = {0, 0, 0, 0, 0, 0};
};

/// Runs `runs` attacks of every kind in rotation with random budgets on random small networks and
/// counts results that leave [0, 1] or the configured norm ball (tolerance 1e-6).
inline FuzzStats fuzz_attack_contracts(std::size_t runs, std::uint64_t seed) {
  using namespace attacks;
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> eps_linf(0.001f, 0.5f), eps_l2(0.01f, 3.0f), frac(0.05f, 1.0f);
  std::uniform_int_distribution<int> iters(1, 12);
  FuzzStats st;
  netcore::Network net;
  for (std::size_t r = 0; r < runs; ++r) {
    if (r % 25 == 0) net = random_small_network(rng);
    const auto kind = AttackKind(r % 6);
    AttackConfig cfg = AttackConfig::defaults(kind);
    cfg.seed = rng();
    cfg.epsilon = native_norm(kind) == Norm::l_inf ? eps_linf(rng) : eps_l2(rng);
    cfg.step_size = cfg.epsilon * frac(rng);
    cfg.max_iterations = kind == AttackKind::adaptive ? iters(rng) % 4 + 1 : iters(rng) * 10;
    cfg.lambda = frac(rng) * 2.0f;
    const auto x = random_tensor(net.input_shape(), rng);
    std::uniform_int_distribution<std::size_t> layer(0, net.logit_layer());
    const auto res = run_attack(net, x, net.predict(x), cfg, layer(rng));
    ++st.runs;
    ++st.per_kind[int(kind)];
    bool ok = res.x_adv.shape == x.shape;
    for (float v : res.x_adv.data) ok = ok && v >= 0.0f && v <= 1.0f;
    double linf = 0.0, l2 = 0.0;
    for (std::size_t i = 0; ok && i < x.size(); ++i) {
      const double d = double(res.x_adv.data[i]) - double(x.data[i]);
      linf = std::max(linf, std::abs(d));
      l2 += d * d;
    }
    const double dist = cfg.norm == Norm::l_inf ? linf : std::sqrt(l2);
    ok = ok && dist <= double(cfg.epsilon) + 1e-6;
    if (!ok) ++st.violations;
  }
  return st;
}

}  // namespace advcheck::testing
