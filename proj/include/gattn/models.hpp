#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "gattn/attention.hpp"
#include "gattn/checkpoint.hpp"
#include "gattn/config.hpp"
#include "gattn/ops.hpp"

namespace gattn {

// ---------------------------------------------------------------------------
// Layers
// ---------------------------------------------------------------------------

template <typename T>
struct Conv2dLayer {
  Tensor<T> w;
  Tensor<T> b;  // undefined when bias-free
  std::int64_t stride = 1, pad = 1;

  static Conv2dLayer create(std::int64_t in, std::int64_t out, std::int64_t k,
                            std::int64_t stride, std::int64_t pad, bool bias, Rng& rng) {
    Conv2dLayer l;
    l.w = Tensor<T>::he_normal({out, in, k, k}, in * k * k, rng).set_requires_grad();
    if (bias) l.b = Tensor<T>::zeros({out}).set_requires_grad();
    l.stride = stride;
    l.pad = pad;
    return l;
  }

  Tensor<T> operator()(const Tensor<T>& x) const {
    if (b.defined()) return conv2d(x, w, b, stride, pad);
    return conv2d(x, w, std::nullopt, stride, pad);
  }

  void collect_params(std::vector<ParamRef<T>>& out, const std::string& prefix) const {
    out.push_back({prefix + ".w", w});
    if (b.defined()) out.push_back({prefix + ".b", b});
  }
};

template <typename T>
struct BatchNorm2dLayer {
  Tensor<T> gamma, beta;
  Tensor<T> running_mean, running_var;
  T momentum = T(0.1);
  T eps = T(1e-5);

  static BatchNorm2dLayer create(std::int64_t c) {
    BatchNorm2dLayer l;
    l.gamma = Tensor<T>::full({c}, T(1)).set_requires_grad();
    l.beta = Tensor<T>::zeros({c}).set_requires_grad();
    l.running_mean = Tensor<T>::zeros({c});
    l.running_var = Tensor<T>::full({c}, T(1));
    return l;
  }

  Tensor<T> operator()(const Tensor<T>& x, bool train) const {
    auto& self = const_cast<BatchNorm2dLayer&>(*this);
    return batch_norm2d(x, gamma, beta, self.running_mean, self.running_var, train, momentum,
                        eps);
  }

  void collect_params(std::vector<ParamRef<T>>& out, const std::string& prefix) const {
    out.push_back({prefix + ".gamma", gamma});
    out.push_back({prefix + ".beta", beta});
  }
  void collect_state(std::vector<ParamRef<T>>& out, const std::string& prefix) const {
    out.push_back({prefix + ".running_mean", running_mean});
    out.push_back({prefix + ".running_var", running_var});
  }
};

template <typename T>
struct LinearLayer {
  Tensor<T> w, b;

  static LinearLayer create(std::int64_t in, std::int64_t out, Rng& rng) {
    LinearLayer l;
    l.w = Tensor<T>::he_normal({out, in}, in, rng).set_requires_grad();
    l.b = Tensor<T>::zeros({out}).set_requires_grad();
    return l;
  }

  Tensor<T> operator()(const Tensor<T>& x) const { return linear(x, w, b); }

  void collect_params(std::vector<ParamRef<T>>& out, const std::string& prefix) const {
    out.push_back({prefix + ".w", w});
    out.push_back({prefix + ".b", b});
  }
};

// ---------------------------------------------------------------------------
// Model configuration (also the checkpoint manifest)
// ---------------------------------------------------------------------------

struct ModelConfig {
  std::string base = "cnn";  // cnn | wrn
  std::int64_t labels = 10;
  std::vector<std::int64_t> channels = {32, 64, 128, 128, 128};
  std::int64_t fc_hidden = 256;
  std::int64_t input_channels = 1;
  std::int64_t input_h = 40, input_w = 40;
  std::int64_t wrn_depth = 10, wrn_widen = 1;
  std::int64_t ad = 0;  // attention depth; 0 = unaugmented
  std::int64_t aw = 1;  // attention width
  MaskKind mask = MaskKind::Softmax;
  bool uniform_gates = false;  // "no gates" ablation (layer + global)
  double gamma = 0.001;
  bool block_gradients = false;
  bool tap_after_pool = false;
  std::uint64_t init_seed = 1;

  std::string to_manifest() const {
    Config c;
    c.set("model", "base", base);
    c.set("model", "labels", std::to_string(labels));
    std::string ch;
    for (std::size_t i = 0; i < channels.size(); ++i)
      ch += (i ? "," : "") + std::to_string(channels[i]);
    c.set("model", "channels", ch);
    c.set("model", "fc_hidden", std::to_string(fc_hidden));
    c.set("model", "input_channels", std::to_string(input_channels));
    c.set("model", "input_h", std::to_string(input_h));
    c.set("model", "input_w", std::to_string(input_w));
    c.set("model", "wrn_depth", std::to_string(wrn_depth));
    c.set("model", "wrn_widen", std::to_string(wrn_widen));
    c.set("model", "ad", std::to_string(ad));
    c.set("model", "aw", std::to_string(aw));
    c.set("model", "mask", mask_kind_name(mask));
    c.set("model", "uniform_gates", uniform_gates ? "true" : "false");
    c.set("model", "gamma", std::to_string(gamma));
    c.set("model", "block_gradients", block_gradients ? "true" : "false");
    c.set("model", "tap_after_pool", tap_after_pool ? "true" : "false");
    c.set("model", "init_seed", std::to_string(init_seed));
    return c.serialize();
  }

  static ModelConfig from_config(const Config& c) {
    ModelConfig m;
    m.base = c.get_str("model", "base", m.base);
    if (m.base != "cnn" && m.base != "wrn")
      throw ConfigError("model.base must be cnn or wrn, got '" + m.base + "'");
    m.labels = c.get_int("model", "labels", m.labels);
    m.channels = c.get_int_list("model", "channels", m.channels);
    m.fc_hidden = c.get_int("model", "fc_hidden", m.fc_hidden);
    m.input_channels = c.get_int("model", "input_channels", m.input_channels);
    m.input_h = c.get_int("model", "input_h", m.input_h);
    m.input_w = c.get_int("model", "input_w", m.input_w);
    m.wrn_depth = c.get_int("model", "wrn_depth", m.wrn_depth);
    m.wrn_widen = c.get_int("model", "wrn_widen", m.wrn_widen);
    m.ad = c.get_int("model", "ad", m.ad);
    m.aw = c.get_int("model", "aw", m.aw);
    m.mask = parse_mask_kind(c.get_str("model", "mask", mask_kind_name(m.mask)));
    m.uniform_gates = c.get_bool("model", "uniform_gates", m.uniform_gates);
    m.gamma = c.get_double("model", "gamma", m.gamma);
    m.block_gradients = c.get_bool("model", "block_gradients", m.block_gradients);
    m.tap_after_pool = c.get_bool("model", "tap_after_pool", m.tap_after_pool);
    m.init_seed = c.get_u64("model", "init_seed", m.init_seed);
    return m;
  }

  static ModelConfig from_manifest(const std::string& text) {
    return from_config(Config::parse(text, "<manifest>"));
  }
};

// ---------------------------------------------------------------------------
// Baseline CNN (five 3x3 convs, BN + 2x2 max-pool after convs 1-3, two FC)
// ---------------------------------------------------------------------------

template <typename T>
struct TapsOut {
  std::vector<Tensor<T>> taps;  // feature activations, shallow to deep
  Tensor<T> logits;
};

template <typename T>
struct BaseCnn {
  std::vector<std::int64_t> channels;
  std::int64_t labels = 10, fc_hidden = 256;
  std::int64_t in_channels = 1, in_h = 40, in_w = 40;
  bool tap_after_pool = false;
  std::vector<Conv2dLayer<T>> convs;       // 5
  std::vector<BatchNorm2dLayer<T>> bns;    // 3, after convs 1-3
  LinearLayer<T> fc1, fc2;

  std::int64_t tap_count() const { return 5; }

  std::int64_t tap_channels(std::int64_t i) const { return channels[static_cast<std::size_t>(i)]; }

  std::int64_t feature_channels() const { return channels.back(); }

  /// Forward pass exposing the tap-point activations. Taps sit after each
  /// conv block's activation; with tap_after_pool the first three taps move
  /// past their pooling layer instead.
  TapsOut<T> forward_taps(const Tensor<T>& x, bool train) const {
    if (x.rank() != 4 || x.dim(1) != in_channels || x.dim(2) != in_h || x.dim(3) != in_w)
      throw ShapeError("base cnn: expected input [N," + std::to_string(in_channels) + "," +
                       std::to_string(in_h) + "," + std::to_string(in_w) + "], got " +
                       shape_str(x.shape()));
    TapsOut<T> out;
    Tensor<T> h = x;
    for (int i = 0; i < 5; ++i) {
      h = convs[static_cast<std::size_t>(i)](h);
      if (i < 3) h = bns[static_cast<std::size_t>(i)](h, train);
      h = relu(h);
      if (i < 3) {
        if (tap_after_pool) {
          h = max_pool2d(h);
          out.taps.push_back(h);
        } else {
          out.taps.push_back(h);
          h = max_pool2d(h);
        }
      } else {
        out.taps.push_back(h);
      }
    }
    const std::int64_t N = h.dim(0);
    auto flat = reshape(h, {N, h.dim(1) * h.dim(2) * h.dim(3)});
    out.logits = fc2(relu(fc1(flat)));
    return out;
  }

  Tensor<T> forward(const Tensor<T>& x, bool train) const {
    return forward_taps(x, train).logits;
  }

  void collect_params(std::vector<ParamRef<T>>& out, const std::string& prefix) const {
    for (int i = 0; i < 5; ++i)
      convs[static_cast<std::size_t>(i)].collect_params(out, prefix + ".conv" + std::to_string(i + 1));
    for (int i = 0; i < 3; ++i)
      bns[static_cast<std::size_t>(i)].collect_params(out, prefix + ".bn" + std::to_string(i + 1));
    fc1.collect_params(out, prefix + ".fc1");
    fc2.collect_params(out, prefix + ".fc2");
  }
  void collect_state(std::vector<ParamRef<T>>& out, const std::string& prefix) const {
    for (int i = 0; i < 3; ++i)
      bns[static_cast<std::size_t>(i)].collect_state(out, prefix + ".bn" + std::to_string(i + 1));
  }

  /// Trainable conv kernels/biases only; used by the gradient-blocking checks.
  void collect_conv_params(std::vector<ParamRef<T>>& out, const std::string& prefix) const {
    for (int i = 0; i < 5; ++i)
      convs[static_cast<std::size_t>(i)].collect_params(out, prefix + ".conv" + std::to_string(i + 1));
  }
};

/// Builds the ablation baseline: five 3x3 convolutions (BN and 2x2 max-pool
/// after the first three) and two fully-connected layers, He-initialized.
template <typename T>
BaseCnn<T> build_baseline(const ModelConfig& cfg, Rng& rng) {
  if (cfg.labels < 2) throw ConfigError("build_baseline: labels must be >= 2");
  if (cfg.channels.size() != 5)
    throw ConfigError("build_baseline: channel plan must list 5 extents, got " +
                      std::to_string(cfg.channels.size()));
  if (cfg.input_h % 8 != 0 || cfg.input_w % 8 != 0)
    throw ConfigError("build_baseline: input extents must be divisible by 8 (three poolings)");
  BaseCnn<T> net;
  net.channels = cfg.channels;
  net.labels = cfg.labels;
  net.fc_hidden = cfg.fc_hidden;
  net.in_channels = cfg.input_channels;
  net.in_h = cfg.input_h;
  net.in_w = cfg.input_w;
  net.tap_after_pool = cfg.tap_after_pool;
  std::int64_t prev = cfg.input_channels;
  for (int i = 0; i < 5; ++i) {
    net.convs.push_back(Conv2dLayer<T>::create(prev, cfg.channels[static_cast<std::size_t>(i)], 3, 1, 1,
                                               /*bias=*/true, rng));
    prev = cfg.channels[static_cast<std::size_t>(i)];
  }
  for (int i = 0; i < 3; ++i)
    net.bns.push_back(BatchNorm2dLayer<T>::create(cfg.channels[static_cast<std::size_t>(i)]));
  const std::int64_t flat = cfg.channels[4] * (cfg.input_h / 8) * (cfg.input_w / 8);
  net.fc1 = LinearLayer<T>::create(flat, cfg.fc_hidden, rng);
  net.fc2 = LinearLayer<T>::create(cfg.fc_hidden, cfg.labels, rng);
  return net;
}

// ---------------------------------------------------------------------------
// Toy-scale wide residual network (pre-activation blocks, three groups)
// ---------------------------------------------------------------------------

template <typename T>
struct WrnBlock {
  BatchNorm2dLayer<T> bn1, bn2;
  Conv2dLayer<T> conv1, conv2;
  Conv2dLayer<T> proj;  // defined only when the shortcut changes shape
  bool has_proj = false;

  Tensor<T> operator()(const Tensor<T>& x, bool train) const {
    auto h = relu(bn1(x, train));
    auto y = conv2(relu(bn2(conv1(h), train)));
    auto shortcut = has_proj ? proj(h) : x;
    return add(y, shortcut);
  }

  void collect_params(std::vector<ParamRef<T>>& out, const std::string& prefix) const {
    bn1.collect_params(out, prefix + ".bn1");
    conv1.collect_params(out, prefix + ".conv1");
    bn2.collect_params(out, prefix + ".bn2");
    conv2.collect_params(out, prefix + ".conv2");
    if (has_proj) proj.collect_params(out, prefix + ".proj");
  }
  void collect_state(std::vector<ParamRef<T>>& out, const std::string& prefix) const {
    bn1.collect_state(out, prefix + ".bn1");
    bn2.collect_state(out, prefix + ".bn2");
  }
};

template <typename T>
struct ToyWrn {
  std::int64_t depth = 10, widen = 1;
  std::int64_t labels = 10, in_channels = 3, in_h = 32, in_w = 32;
  Conv2dLayer<T> conv0;
  std::vector<std::vector<WrnBlock<T>>> groups;  // 3 groups of n blocks
  BatchNorm2dLayer<T> bn_final;
  LinearLayer<T> fc;

  std::int64_t tap_count() const { return 3; }

  std::int64_t tap_channels(std::int64_t i) const {
    return (std::int64_t{16} << i) * widen;
  }

  std::int64_t feature_channels() const { return 64 * widen; }

  /// Taps after each convolutional group; the deepest tap is the final
  /// post-BN-ReLU feature activation that also feeds the classifier.
  TapsOut<T> forward_taps(const Tensor<T>& x, bool train) const {
    if (x.rank() != 4 || x.dim(1) != in_channels)
      throw ShapeError("toy wrn: expected input [N," + std::to_string(in_channels) +
                       ",H,W], got " + shape_str(x.shape()));
    TapsOut<T> out;
    Tensor<T> h = conv0(x);
    for (std::size_t g = 0; g < 3; ++g) {
      for (const auto& block : groups[g]) h = block(h, train);
      if (g < 2) out.taps.push_back(h);
    }
    h = relu(bn_final(h, train));
    out.taps.push_back(h);
    auto pooled = global_avg_pool(h);
    out.logits = fc(pooled);
    return out;
  }

  Tensor<T> forward(const Tensor<T>& x, bool train) const {
    return forward_taps(x, train).logits;
  }

  void collect_params(std::vector<ParamRef<T>>& out, const std::string& prefix) const {
    conv0.collect_params(out, prefix + ".conv0");
    for (std::size_t g = 0; g < groups.size(); ++g)
      for (std::size_t b = 0; b < groups[g].size(); ++b)
        groups[g][b].collect_params(out, prefix + ".g" + std::to_string(g + 1) + ".b" +
                                             std::to_string(b + 1));
    bn_final.collect_params(out, prefix + ".bn_final");
    fc.collect_params(out, prefix + ".fc");
  }
  void collect_state(std::vector<ParamRef<T>>& out, const std::string& prefix) const {
    for (std::size_t g = 0; g < groups.size(); ++g)
      for (std::size_t b = 0; b < groups[g].size(); ++b)
        groups[g][b].collect_state(out, prefix + ".g" + std::to_string(g + 1) + ".b" +
                                            std::to_string(b + 1));
    bn_final.collect_state(out, prefix + ".bn_final");
  }

  void collect_conv_params(std::vector<ParamRef<T>>& out, const std::string& prefix) const {
    conv0.collect_params(out, prefix + ".conv0");
    for (std::size_t g = 0; g < groups.size(); ++g)
      for (std::size_t b = 0; b < groups[g].size(); ++b) {
        const auto& blk = groups[g][b];
        const std::string bp = prefix + ".g" + std::to_string(g + 1) + ".b" + std::to_string(b + 1);
        blk.conv1.collect_params(out, bp + ".conv1");
        blk.conv2.collect_params(out, bp + ".conv2");
        if (blk.has_proj) blk.proj.collect_params(out, bp + ".proj");
      }
  }
};

/// Wide-residual backbone at toy width. depth must satisfy depth = 6n+4.
template <typename T>
ToyWrn<T> build_toy_wrn(const ModelConfig& cfg, Rng& rng) {
  const std::int64_t depth = cfg.wrn_depth, widen = cfg.wrn_widen;
  if (depth < 10 || (depth - 4) % 6 != 0)
    throw ConfigError("build_toy_wrn: depth must be 6n+4 with n >= 1, got " +
                      std::to_string(depth));
  if (widen < 1) throw ConfigError("build_toy_wrn: widen factor must be >= 1");
  const std::int64_t n = (depth - 4) / 6;
  ToyWrn<T> net;
  net.depth = depth;
  net.widen = widen;
  net.labels = cfg.labels;
  net.in_channels = cfg.input_channels;
  net.in_h = cfg.input_h;
  net.in_w = cfg.input_w;
  net.conv0 = Conv2dLayer<T>::create(cfg.input_channels, 16, 3, 1, 1, /*bias=*/false, rng);
  std::int64_t prev = 16;
  net.groups.resize(3);
  for (std::int64_t g = 0; g < 3; ++g) {
    const std::int64_t width = (std::int64_t{16} << g) * widen;
    const std::int64_t group_stride = g == 0 ? 1 : 2;
    for (std::int64_t b = 0; b < n; ++b) {
      WrnBlock<T> blk;
      const std::int64_t stride = b == 0 ? group_stride : 1;
      blk.bn1 = BatchNorm2dLayer<T>::create(prev);
      blk.conv1 = Conv2dLayer<T>::create(prev, width, 3, stride, 1, false, rng);
      blk.bn2 = BatchNorm2dLayer<T>::create(width);
      blk.conv2 = Conv2dLayer<T>::create(width, width, 3, 1, 1, false, rng);
      if (prev != width || stride != 1) {
        blk.proj = Conv2dLayer<T>::create(prev, width, 1, stride, 0, false, rng);
        blk.has_proj = true;
      }
      net.groups[static_cast<std::size_t>(g)].push_back(std::move(blk));
      prev = width;
    }
  }
  net.bn_final = BatchNorm2dLayer<T>::create(prev);
  net.fc = LinearLayer<T>::create(prev, cfg.labels, rng);
  return net;
}

// ---------------------------------------------------------------------------
// Augmented model
// ---------------------------------------------------------------------------

enum class GateMode {
  Learned,   // Eq. global gates from the last feature activation
  ForceNet,  // one-hot on g_net: reproduces the unaugmented model
  Uniform,   // all gates 1/(N+1): plain averaging
  ZeroNet,   // learned gates, g_net zeroed, rest renormalized (diagnostics)
};

struct ForwardOptions {
  GateMode gate_mode = GateMode::Learned;
  bool uniform_layer_gates = false;
};

template <typename T>
struct ForwardBundle {
  Tensor<T> output;      // [N,labels] rectified distribution
  Tensor<T> output_net;  // [N,labels] base model distribution
  Tensor<T> gates;       // [N,AD+1], g_net first
  Tensor<T> reg_loss;    // scalar, sum of per-module head regularizers
  std::vector<ModuleForward<T>> modules;  // deepest-first
};

/// A base network plus attention modules at its deepest `ad` tap points and
/// one global gate. Base parameters are shared, not copied, so attaching to
/// a trained base leaves it untouched.
template <typename T, typename Base>
struct Augmented {
  Base base;
  std::vector<AttentionModule<T>> modules;   // deepest-first
  std::vector<std::int64_t> tap_indices;     // deepest-first
  GlobalGate<T> gate;
  bool block_base_gradients = false;
  bool uniform_gates = false;  // ablation: both gate levels uniform
  T gamma = T(0.001);

  std::int64_t depth() const { return static_cast<std::int64_t>(modules.size()); }

  ForwardBundle<T> forward(const Tensor<T>& x, bool train, ForwardOptions opts = {}) const {
    if (uniform_gates) {
      opts.gate_mode = GateMode::Uniform;
      opts.uniform_layer_gates = true;
    }
    ForwardBundle<T> out;
    auto bt = base.forward_taps(x, train);
    out.output_net = softmax(bt.logits, 1);
    const std::int64_t N = x.dim(0);
    const std::int64_t G = depth() + 1;

    Tensor<T> reg = Tensor<T>::scalar(T(0));
    std::vector<Tensor<T>> module_probs;
    for (std::size_t i = 0; i < modules.size(); ++i) {
      Tensor<T> z = bt.taps[static_cast<std::size_t>(tap_indices[i])];
      if (block_base_gradients) z = detach(z);
      auto mf = module_forward(modules[i], z, opts.uniform_layer_gates);
      reg = add(reg, head_regularizer(mf.masks));
      module_probs.push_back(mf.module_prob);
      out.modules.push_back(std::move(mf));
    }
    out.reg_loss = reg;

    switch (opts.gate_mode) {
      case GateMode::Learned:
      case GateMode::ZeroNet: {
        Tensor<T> z_last = bt.taps.back();
        if (block_base_gradients) z_last = detach(z_last);
        auto g = global_gates(gate, z_last);
        if (opts.gate_mode == GateMode::ZeroNet) {
          // Zero the g_net component; renormalize the rest so the rectified
          // output stays a distribution. Component 0 remains exactly 0.
          auto mask = Tensor<T>::full({N, G}, T(1));
          for (std::int64_t n = 0; n < N; ++n) mask.data()[static_cast<std::size_t>(n * G)] = T(0);
          g = renormalize(mul(g, mask), 1);
        }
        out.gates = g;
        break;
      }
      case GateMode::Uniform:
        out.gates = Tensor<T>::full({N, G}, T(1) / static_cast<T>(G));
        break;
      case GateMode::ForceNet: {
        auto g = Tensor<T>::zeros({N, G});
        for (std::int64_t n = 0; n < N; ++n) g.data()[static_cast<std::size_t>(n * G)] = T(1);
        out.gates = g;
        break;
      }
    }
    out.output = rectify(out.output_net, module_probs, out.gates);
    return out;
  }

  void collect_params(std::vector<ParamRef<T>>& out) const {
    base.collect_params(out, "base");
    collect_attention_params(out);
  }
  void collect_attention_params(std::vector<ParamRef<T>>& out) const {
    for (std::size_t i = 0; i < modules.size(); ++i) {
      const std::string p = "att" + std::to_string(i + 1);
      out.push_back({p + ".w_heads", modules[i].w_heads});
      out.push_back({p + ".b_heads", modules[i].b_heads});
      out.push_back({p + ".w_out", modules[i].w_out});
      out.push_back({p + ".b_out", modules[i].b_out});
      out.push_back({p + ".w_gate", modules[i].w_gate});
      out.push_back({p + ".b_gate", modules[i].b_gate});
    }
    out.push_back({"gate.w", gate.w});
    out.push_back({"gate.b", gate.b});
  }
  void collect_state(std::vector<ParamRef<T>>& out) const { base.collect_state(out, "base"); }
};

/// Attaches `ad` attention modules (K = aw heads each) at the deepest taps
/// of the base, deepest first, plus a global gate of width ad + 1.
template <typename T, typename Base>
Augmented<T, Base> attach_attention(Base base, std::int64_t ad, std::int64_t aw, MaskKind mask,
                                    double gamma, bool block_gradients, std::int64_t labels,
                                    Rng& rng) {
  if (ad < 1 || ad > base.tap_count())
    throw ConfigError("attach_attention: attention depth " + std::to_string(ad) +
                      " must be in [1, " + std::to_string(base.tap_count()) + "]");
  if (aw < 1) throw ConfigError("attach_attention: attention width must be >= 1");
  Augmented<T, Base> m;
  m.base = std::move(base);
  m.block_base_gradients = block_gradients;
  m.gamma = static_cast<T>(gamma);
  for (std::int64_t i = 0; i < ad; ++i) {
    const std::int64_t tap = m.base.tap_count() - 1 - i;
    m.tap_indices.push_back(tap);
    m.modules.push_back(AttentionModule<T>::create(
        m.base.tap_channels(tap), {aw, labels, mask}, rng));
  }
  m.gate = GlobalGate<T>::create(ad + 1, m.base.feature_channels());
  return m;
}

template <typename T>
std::int64_t param_count(const std::vector<ParamRef<T>>& refs) {
  std::int64_t n = 0;
  for (const auto& r : refs) n += r.tensor.numel();
  return n;
}

}  // namespace gattn
