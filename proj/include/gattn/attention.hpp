#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "gattn/ops.hpp"

namespace gattn {

enum class MaskKind { Softmax, Sigmoid };

inline std::string mask_kind_name(MaskKind m) {
  return m == MaskKind::Softmax ? "softmax" : "sigmoid";
}

inline MaskKind parse_mask_kind(const std::string& s) {
  if (s == "softmax") return MaskKind::Softmax;
  if (s == "sigmoid") return MaskKind::Sigmoid;
  throw ConfigError("unknown mask kind '" + s + "' (want softmax|sigmoid)");
}

struct AttentionModuleConfig {
  std::int64_t heads = 1;   // K, the attention width
  std::int64_t labels = 2;  // class count
  MaskKind mask = MaskKind::Softmax;
};

/// One attention module: K spatial attention heads, per-head class score
/// maps, and the layer gates picking the most informative head. All three
/// projections are 1x1 convolutions over the tapped feature map.
template <typename T>
struct AttentionModule {
  AttentionModuleConfig cfg;
  std::int64_t in_channels = 0;
  Tensor<T> w_heads, b_heads;  // [K, c, 1, 1], [K]
  Tensor<T> w_out, b_out;      // [labels*K, c, 1, 1], [labels*K]
  Tensor<T> w_gate, b_gate;    // [K, c, 1, 1], [K]

  static AttentionModule create(std::int64_t in_channels, AttentionModuleConfig cfg, Rng& rng) {
    if (cfg.heads < 1) throw ConfigError("attention module: heads must be >= 1");
    if (cfg.labels < 2) throw ConfigError("attention module: labels must be >= 2");
    AttentionModule m;
    m.cfg = cfg;
    m.in_channels = in_channels;
    const std::int64_t K = cfg.heads, L = cfg.labels;
    m.w_heads = Tensor<T>::he_normal({K, in_channels, 1, 1}, in_channels, rng).set_requires_grad();
    m.b_heads = Tensor<T>::zeros({K}).set_requires_grad();
    m.w_out = Tensor<T>::he_normal({L * K, in_channels, 1, 1}, in_channels, rng).set_requires_grad();
    m.b_out = Tensor<T>::zeros({L * K}).set_requires_grad();
    m.w_gate = Tensor<T>::he_normal({K, in_channels, 1, 1}, in_channels, rng).set_requires_grad();
    m.b_gate = Tensor<T>::zeros({K}).set_requires_grad();
    return m;
  }
};

/// Per-module forward artifacts. In softmax mode every tensor here is
/// distribution-valued along its normalized axis.
template <typename T>
struct ModuleForward {
  Tensor<T> masks;       // [N,K,H,W]
  Tensor<T> head_probs;  // [N,K,labels]
  Tensor<T> head_gates;  // [N,K]
  Tensor<T> module_prob; // [N,labels]
};

/// K attention masks from the tapped feature map. Softmax mode normalizes
/// each head over the spatial grid; sigmoid mode squashes elementwise with
/// no normalization guarantee.
template <typename T>
Tensor<T> attention_masks(const AttentionModule<T>& m, const Tensor<T>& z) {
  auto pre = conv2d(z, m.w_heads, m.b_heads);
  return m.cfg.mask == MaskKind::Softmax ? spatial_softmax(pre) : sigmoid(pre);
}

/// Per-location class distributions for each head: [N,K,labels,H,W]. The
/// labels*K conv channels are computed in one pass, then each location is
/// softmax-normalized over the label axis.
template <typename T>
Tensor<T> local_class_maps(const AttentionModule<T>& m, const Tensor<T>& z) {
  auto pre = conv2d(z, m.w_out, m.b_out);
  const std::int64_t N = pre.dim(0), H = pre.dim(2), W = pre.dim(3);
  auto maps = reshape(pre, {N, m.cfg.heads, m.cfg.labels, H, W});
  return softmax(maps, 2);
}

/// Mask-weighted spatial average of the class maps: [N,K,labels].
template <typename T>
Tensor<T> head_outputs(const Tensor<T>& masks, const Tensor<T>& class_maps) {
  return weighted_spatial_sum(masks, class_maps);
}

/// Layer attention gates (softmax over heads of tanh-squashed scores):
/// conv the feature map to K channels, weight by the masks, sum spatially.
template <typename T>
Tensor<T> layer_gate_scores(const AttentionModule<T>& m, const Tensor<T>& z,
                            const Tensor<T>& masks) {
  auto gmap = conv2d(z, m.w_gate, m.b_gate);
  auto weighted = mul(gmap, masks);
  const std::int64_t P = weighted.dim(2) * weighted.dim(3);
  auto summed = scale(global_avg_pool(weighted), static_cast<T>(P));
  return softmax(tanh_op(summed), 1);
}

/// Module output: gate-weighted average of the K head distributions.
template <typename T>
Tensor<T> module_output(const Tensor<T>& head_probs, const Tensor<T>& head_gates) {
  return mix_distributions(head_gates, head_probs);
}

/// Full module pass. With uniform_gates the learned layer gates are replaced
/// by constant 1/K weights (the "no gates" ablation). In sigmoid mask mode
/// head outputs are renormalized to unit rows before gating.
template <typename T>
ModuleForward<T> module_forward(const AttentionModule<T>& m, const Tensor<T>& z,
                                bool uniform_gates = false) {
  ModuleForward<T> f;
  f.masks = attention_masks(m, z);
  auto maps = local_class_maps(m, z);
  f.head_probs = head_outputs(f.masks, maps);
  if (m.cfg.mask == MaskKind::Sigmoid) f.head_probs = renormalize(f.head_probs, 2);
  if (uniform_gates) {
    const std::int64_t N = z.dim(0);
    f.head_gates = Tensor<T>::full({N, m.cfg.heads}, T(1) / static_cast<T>(m.cfg.heads));
  } else {
    f.head_gates = layer_gate_scores(m, z, f.masks);
  }
  f.module_prob = module_output(f.head_probs, f.head_gates);
  return f;
}

/// Global gate parameters: rows of w map the pooled last feature activation
/// to one relevance score per gate. Row 0 is the network-output gate g_net;
/// width is attention depth + 1. Zero initialization starts all gates
/// uniform.
template <typename T>
struct GlobalGate {
  Tensor<T> w;  // [n_gates, c_last]
  Tensor<T> b;  // [n_gates]

  static GlobalGate create(std::int64_t n_gates, std::int64_t c_last) {
    GlobalGate g;
    g.w = Tensor<T>::zeros({n_gates, c_last}).set_requires_grad();
    g.b = Tensor<T>::zeros({n_gates}).set_requires_grad();
    return g;
  }

  std::int64_t width() const { return w.dim(0); }
};

/// Relevance scores from the last feature activation: global average pool,
/// affine map, tanh, then one softmax jointly over all gates (g_net first).
template <typename T>
Tensor<T> global_gates(const GlobalGate<T>& g, const Tensor<T>& z_last) {
  if (z_last.rank() != 4)
    throw ShapeError("global_gates: expected [N,C,H,W] features, got " +
                     shape_str(z_last.shape()));
  if (z_last.dim(1) != g.w.dim(1))
    throw ShapeError("global_gates: feature channels (axis 1 = " + std::to_string(z_last.dim(1)) +
                     ") do not match gate weight columns (axis 1 = " + std::to_string(g.w.dim(1)) +
                     ")");
  auto pooled = global_avg_pool(z_last);
  auto scores = tanh_op(linear(pooled, g.w, g.b));
  return softmax(scores, 1);
}

/// Gated rectification of the base prediction (element 0 of each gate row
/// weights output_net, the rest weight the module outputs in order). All
/// probability rows must already be normalized.
template <typename T>
Tensor<T> rectify(const Tensor<T>& output_net_probs, const std::vector<Tensor<T>>& module_probs,
                  const Tensor<T>& gates) {
  if (gates.rank() != 2 ||
      gates.dim(1) != static_cast<std::int64_t>(module_probs.size()) + 1)
    throw ShapeError("rectify: gate width " +
                     (gates.rank() == 2 ? std::to_string(gates.dim(1)) : shape_str(gates.shape())) +
                     " does not match 1 + " + std::to_string(module_probs.size()) + " outputs");
  auto check_rows = [](const Tensor<T>& p, const char* what) {
    const std::int64_t N = p.dim(0), L = p.dim(1);
    for (std::int64_t n = 0; n < N; ++n) {
      T s = T(0);
      for (std::int64_t l = 0; l < L; ++l) s += p.data()[static_cast<std::size_t>(n * L + l)];
      if (std::abs(static_cast<double>(s) - 1.0) > 1e-4)
        throw ValueError(std::string("rectify: ") + what + " row " + std::to_string(n) +
                         " is not normalized (sum = " + std::to_string(static_cast<double>(s)) +
                         ")");
    }
  };
  check_rows(output_net_probs, "output_net");
  for (const auto& p : module_probs) check_rows(p, "module output");
  std::vector<Tensor<T>> parts;
  parts.reserve(module_probs.size() + 1);
  parts.push_back(output_net_probs);
  for (const auto& p : module_probs) parts.push_back(p);
  return mix_distributions(gates, stack_rows(parts));
}

/// Head-diversity penalty: squared dot products of every ordered pair of
/// flattened masks at the same depth, summed over pairs and the batch, then
/// divided by the batch size. Zero iff all pairs are orthogonal; K=1 gives 0.
template <typename T>
Tensor<T> head_regularizer(const Tensor<T>& masks) {
  detail::require_rank(masks, 4, "head_regularizer", "masks");
  const std::int64_t N = masks.dim(0), K = masks.dim(1);
  const std::int64_t P = masks.dim(2) * masks.dim(3);
  if (K == 1) {
    Tensor<T> zero = Tensor<T>::scalar(T(0));
    return zero;
  }
  // Per-sample Gram matrix of the flattened masks.
  std::vector<T> gram(static_cast<std::size_t>(N * K * K));
  {
    const T* md = masks.data().data();
    for (std::int64_t n = 0; n < N; ++n) {
      ConstMatMap<T> h(md + n * K * P, K, P);
      MatMap<T>(gram.data() + n * K * K, K, K).noalias() = h * h.transpose();
    }
  }
  double total = 0.0;
  for (std::int64_t n = 0; n < N; ++n)
    for (std::int64_t i = 0; i < K; ++i)
      for (std::int64_t j = 0; j < K; ++j)
        if (i != j) {
          const double d = static_cast<double>(gram[static_cast<std::size_t>(n * K * K + i * K + j)]);
          total += d * d;
        }
  Tensor<T> out = Tensor<T>::scalar(static_cast<T>(total / static_cast<double>(N)));
  auto mp = masks.payload();
  auto op = out.payload();
  mark_recorded(out, {&masks}, [=, gram = std::move(gram)](BackwardCtx<T>& ctx) {
    const std::vector<T>* g = ctx.incoming(op);
    if (!g || !mp->requires_grad) return;
    // dL/dh_i = (4/N) * sum_{j != i} (h_i . h_j) h_j   (both ordered pairs).
    auto& dm = ctx.acc(mp);
    const T coef = (*g)[0] * T(4) / static_cast<T>(N);
    for (std::int64_t n = 0; n < N; ++n) {
      ConstMatMap<T> h(mp->value.data() + n * K * P, K, P);
      MatMap<T> d(dm.data() + n * K * P, K, P);
      RowMat<T> goff = ConstMatMap<T>(gram.data() + n * K * K, K, K);
      goff.diagonal().setZero();
      d.noalias() += coef * (goff * h);
    }
  });
  return out;
}

}  // namespace gattn
