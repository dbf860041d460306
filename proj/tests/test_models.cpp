#include <gtest/gtest.h>

#include <cmath>
#include <cstdio>
#include <vector>

#include "gattn/grad_check.hpp"
#include "gattn/models.hpp"

using gattn::Augmented;
using gattn::BaseCnn;
using gattn::ForwardOptions;
using gattn::GateMode;
using gattn::MaskKind;
using gattn::ModelConfig;
using gattn::ParamRef;
using gattn::Rng;
using gattn::Shape;
using gattn::Tape;
using gattn::Tensor;
using gattn::ToyWrn;

namespace {

ModelConfig default_cfg() { return ModelConfig{}; }

ModelConfig small_cfg() {
  ModelConfig cfg;
  cfg.channels = {4, 5, 6, 6, 6};
  cfg.fc_hidden = 16;
  cfg.input_h = cfg.input_w = 16;
  return cfg;
}

}  // namespace

TEST(BuildBaseline, TapShapesOnDefaultPlan) {
  Rng rng(1);
  auto net = gattn::build_baseline<float>(default_cfg(), rng);
  Rng drng(2);
  auto x = Tensor<float>::uniform({1, 1, 40, 40}, 0, 1, drng);
  auto out = net.forward_taps(x, /*train=*/false);
  const std::vector<std::pair<std::int64_t, std::int64_t>> want = {
      {40, 40}, {20, 20}, {10, 10}, {5, 5}, {5, 5}};
  ASSERT_EQ(out.taps.size(), 5u);
  const std::vector<std::int64_t> ch = {32, 64, 128, 128, 128};
  for (int i = 0; i < 5; ++i) {
    EXPECT_EQ(out.taps[static_cast<std::size_t>(i)].dim(1), ch[static_cast<std::size_t>(i)]);
    EXPECT_EQ(out.taps[static_cast<std::size_t>(i)].dim(2), want[static_cast<std::size_t>(i)].first);
    EXPECT_EQ(out.taps[static_cast<std::size_t>(i)].dim(3), want[static_cast<std::size_t>(i)].second);
  }
  EXPECT_EQ(out.logits.shape(), (Shape{1, 10}));
}

TEST(BuildBaseline, TapAfterPoolFlag) {
  ModelConfig cfg = default_cfg();
  cfg.tap_after_pool = true;
  Rng rng(1);
  auto net = gattn::build_baseline<float>(cfg, rng);
  Rng drng(2);
  auto x = Tensor<float>::uniform({1, 1, 40, 40}, 0, 1, drng);
  auto out = net.forward_taps(x, false);
  const std::vector<std::int64_t> want = {20, 10, 5, 5, 5};
  for (int i = 0; i < 5; ++i)
    EXPECT_EQ(out.taps[static_cast<std::size_t>(i)].dim(2), want[static_cast<std::size_t>(i)]);
}

TEST(BuildBaseline, ZeroImageGivesFiniteLogits) {
  Rng rng(3);
  auto net = gattn::build_baseline<float>(default_cfg(), rng);
  auto x = Tensor<float>::zeros({2, 1, 40, 40});
  auto logits = net.forward(x, false);
  for (float v : logits.data()) EXPECT_TRUE(std::isfinite(v));
}

TEST(BuildBaseline, ParamCountMatchesClosedForm) {
  Rng rng(4);
  auto net = gattn::build_baseline<float>(default_cfg(), rng);
  std::vector<ParamRef<float>> refs;
  net.collect_params(refs, "base");
  // conv k: out*in*9 + out; bn: 2c; fc: out*in + out.
  const std::int64_t want = (32 * 1 * 9 + 32) + (64 * 32 * 9 + 64) + (128 * 64 * 9 + 128) +
                            (128 * 128 * 9 + 128) + (128 * 128 * 9 + 128) + 2 * 32 + 2 * 64 +
                            2 * 128 + (256 * 128 * 25 + 256) + (10 * 256 + 10);
  EXPECT_EQ(gattn::param_count(refs), want);
}

TEST(AttachAttention, RejectsZeroAndTooDeep) {
  Rng rng(5);
  auto net = gattn::build_baseline<float>(small_cfg(), rng);
  EXPECT_THROW(gattn::attach_attention<float>(net, 0, 1, MaskKind::Softmax, 0.001, false, 10, rng),
               gattn::ConfigError);
  EXPECT_THROW(gattn::attach_attention<float>(net, 6, 1, MaskKind::Softmax, 0.001, false, 10, rng),
               gattn::ConfigError);
}

TEST(AttachAttention, DepthOneAttachesDeepestTap) {
  Rng rng(6);
  auto net = gattn::build_baseline<float>(small_cfg(), rng);
  auto m = gattn::attach_attention<float>(net, 1, 2, MaskKind::Softmax, 0.001, false, 10, rng);
  ASSERT_EQ(m.modules.size(), 1u);
  EXPECT_EQ(m.tap_indices[0], 4);
  EXPECT_EQ(m.gate.width(), 2);
}

TEST(AttachAttention, BestConfigHasFourModulesGateWidthFive) {
  Rng rng(7);
  auto net = gattn::build_baseline<float>(small_cfg(), rng);
  auto m = gattn::attach_attention<float>(net, 4, 4, MaskKind::Softmax, 0.001, false, 10, rng);
  EXPECT_EQ(m.modules.size(), 4u);
  EXPECT_EQ(m.gate.width(), 5);
  EXPECT_EQ((std::vector<std::int64_t>{4, 3, 2, 1}), m.tap_indices);
  for (const auto& mod : m.modules) EXPECT_EQ(mod.cfg.heads, 4);
}

TEST(AugmentedForward, RowsSumToOne) {
  Rng rng(8);
  auto net = gattn::build_baseline<float>(small_cfg(), rng);
  auto m = gattn::attach_attention<float>(net, 3, 2, MaskKind::Softmax, 0.001, false, 10, rng);
  Rng drng(9);
  auto x = Tensor<float>::uniform({3, 1, 16, 16}, 0, 1, drng);
  auto out = m.forward(x, false);
  for (int n = 0; n < 3; ++n) {
    double s = 0.0;
    for (int l = 0; l < 10; ++l) s += out.output.at({n, l});
    EXPECT_NEAR(s, 1.0, 1e-5);
  }
}

TEST(AugmentedForward, ForceNetReproducesBaseBitwise) {
  Rng rng(10);
  auto net = gattn::build_baseline<float>(small_cfg(), rng);
  auto m = gattn::attach_attention<float>(net, 4, 4, MaskKind::Softmax, 0.001, false, 10, rng);
  Rng drng(11);
  auto x = Tensor<float>::uniform({4, 1, 16, 16}, 0, 1, drng);
  auto base_probs = gattn::softmax(net.forward(x, false), 1);
  ForwardOptions opts;
  opts.gate_mode = GateMode::ForceNet;
  auto out = m.forward(x, false, opts);
  ASSERT_EQ(out.output.data().size(), base_probs.data().size());
  for (std::size_t i = 0; i < base_probs.data().size(); ++i)
    EXPECT_EQ(out.output.data()[i], base_probs.data()[i]);  // bitwise
}

TEST(AugmentedForward, OutputNetIndependentOfAttention) {
  // "the modules are independent of the original path": output_net from the
  // augmented forward equals the bare base forward bitwise.
  Rng rng(12);
  auto net = gattn::build_baseline<float>(small_cfg(), rng);
  auto m = gattn::attach_attention<float>(net, 2, 3, MaskKind::Softmax, 0.001, false, 10, rng);
  Rng drng(13);
  auto x = Tensor<float>::uniform({2, 1, 16, 16}, 0, 1, drng);
  auto bare = gattn::softmax(net.forward(x, false), 1);
  auto out = m.forward(x, false);
  for (std::size_t i = 0; i < bare.data().size(); ++i)
    EXPECT_EQ(out.output_net.data()[i], bare.data()[i]);
}

TEST(AugmentedForward, MatchesComposedModuleOracles) {
  // AD=2 on a 2-sample batch vs a from-scratch recomposition of the
  // module-level operations.
  Rng rng(14);
  auto net = gattn::build_baseline<float>(small_cfg(), rng);
  auto m = gattn::attach_attention<float>(net, 2, 2, MaskKind::Softmax, 0.001, false, 10, rng);
  Rng drng(15);
  auto x = Tensor<float>::uniform({2, 1, 16, 16}, 0, 1, drng);
  auto out = m.forward(x, false);

  auto bt = net.forward_taps(x, false);
  auto p_net = gattn::softmax(bt.logits, 1);
  std::vector<Tensor<float>> probs;
  for (int i = 0; i < 2; ++i) {
    const auto& z = bt.taps[static_cast<std::size_t>(m.tap_indices[static_cast<std::size_t>(i)])];
    auto masks = gattn::attention_masks(m.modules[static_cast<std::size_t>(i)], z);
    auto maps = gattn::local_class_maps(m.modules[static_cast<std::size_t>(i)], z);
    auto head_probs = gattn::head_outputs(masks, maps);
    auto gates = gattn::layer_gate_scores(m.modules[static_cast<std::size_t>(i)], z, masks);
    probs.push_back(gattn::module_output(head_probs, gates));
  }
  auto ggates = gattn::global_gates(m.gate, bt.taps.back());
  auto expect = gattn::rectify(p_net, probs, ggates);
  for (std::size_t i = 0; i < expect.data().size(); ++i)
    EXPECT_NEAR(out.output.data()[i], expect.data()[i], 1e-6);
}

TEST(ToyWrn, RejectsInvalidDepth) {
  ModelConfig cfg;
  cfg.base = "wrn";
  cfg.input_channels = 3;
  cfg.input_h = cfg.input_w = 32;
  cfg.wrn_depth = 12;
  Rng rng(16);
  EXPECT_THROW(gattn::build_toy_wrn<float>(cfg, rng), gattn::ConfigError);
}

TEST(ToyWrn, Depth10ShapesAndForward) {
  ModelConfig cfg;
  cfg.base = "wrn";
  cfg.input_channels = 3;
  cfg.input_h = cfg.input_w = 32;
  cfg.wrn_depth = 10;
  cfg.wrn_widen = 1;
  Rng rng(17);
  auto net = gattn::build_toy_wrn<float>(cfg, rng);
  for (int g = 0; g < 3; ++g) EXPECT_EQ(net.groups[static_cast<std::size_t>(g)].size(), 1u);
  Rng drng(18);
  auto x = Tensor<float>::uniform({2, 3, 32, 32}, -1, 1, drng);
  auto out = net.forward_taps(x, false);
  ASSERT_EQ(out.taps.size(), 3u);
  EXPECT_EQ(out.taps[0].shape(), (Shape{2, 16, 32, 32}));
  EXPECT_EQ(out.taps[1].shape(), (Shape{2, 32, 16, 16}));
  EXPECT_EQ(out.taps[2].shape(), (Shape{2, 64, 8, 8}));
  EXPECT_EQ(out.logits.shape(), (Shape{2, 10}));
}

TEST(ToyWrn, IdentityInitializedResidualEqualsShortcut) {
  ModelConfig cfg;
  cfg.base = "wrn";
  cfg.input_channels = 3;
  cfg.input_h = cfg.input_w = 32;
  cfg.wrn_depth = 10;
  Rng rng(19);
  auto net = gattn::build_toy_wrn<float>(cfg, rng);
  // Zero the residual branch of the first group-1 block (identity shortcut).
  auto& blk = net.groups[0][0];
  ASSERT_FALSE(blk.has_proj);
  std::fill(blk.conv2.w.data().begin(), blk.conv2.w.data().end(), 0.0f);
  Rng drng(20);
  auto x = Tensor<float>::uniform({1, 16, 8, 8}, -1, 1, drng);
  auto y = blk(x, false);
  for (std::size_t i = 0; i < x.data().size(); ++i) EXPECT_EQ(y.data()[i], x.data()[i]);
}

TEST(ToyWrn, Depth16Widen2ParamCountMatchesFormula) {
  ModelConfig cfg;
  cfg.base = "wrn";
  cfg.input_channels = 3;
  cfg.input_h = cfg.input_w = 32;
  cfg.wrn_depth = 16;
  cfg.wrn_widen = 2;
  Rng rng(21);
  auto net = gattn::build_toy_wrn<float>(cfg, rng);
  std::vector<ParamRef<float>> refs;
  net.collect_params(refs, "base");
  auto block = [](std::int64_t cin, std::int64_t cout, bool proj) {
    return 2 * cin + cout * cin * 9 + 2 * cout + cout * cout * 9 + (proj ? cout * cin : 0);
  };
  const std::int64_t want = 16 * 3 * 9                        // conv0
                            + block(16, 32, true) + block(32, 32, false)    // group 1
                            + block(32, 64, true) + block(64, 64, false)    // group 2
                            + block(64, 128, true) + block(128, 128, false) // group 3
                            + 2 * 128                          // final bn
                            + 10 * 128 + 10;                   // fc
  EXPECT_EQ(gattn::param_count(refs), want);
}

TEST(ToyWrn, AttachesAttention) {
  ModelConfig cfg;
  cfg.base = "wrn";
  cfg.input_channels = 3;
  cfg.input_h = cfg.input_w = 32;
  cfg.wrn_depth = 10;
  Rng rng(22);
  auto net = gattn::build_toy_wrn<float>(cfg, rng);
  auto m = gattn::attach_attention<float>(net, 2, 2, MaskKind::Softmax, 0.001, false, 10, rng);
  Rng drng(23);
  auto x = Tensor<float>::uniform({2, 3, 32, 32}, -1, 1, drng);
  auto out = m.forward(x, false);
  for (int n = 0; n < 2; ++n) {
    double s = 0.0;
    for (int l = 0; l < 10; ++l) s += out.output.at({n, l});
    EXPECT_NEAR(s, 1.0, 1e-5);
  }
}

TEST(GradientBlocking, ZeroNetAndBlockingZeroBaseGrads) {
  Rng rng(24);
  auto net = gattn::build_baseline<float>(small_cfg(), rng);
  auto m = gattn::attach_attention<float>(net, 2, 2, MaskKind::Softmax, 0.001, true, 10, rng);
  Rng drng(25);
  auto x = Tensor<float>::uniform({4, 1, 16, 16}, 0, 1, drng);
  std::vector<int> targets{1, 2, 3, 4};
  ForwardOptions opts;
  opts.gate_mode = GateMode::ZeroNet;
  Tape<float> tape;
  auto out = m.forward(x, true, opts);
  auto loss = gattn::add(gattn::nll_from_probs(out.output, targets),
                         gattn::scale(out.reg_loss, m.gamma));
  tape.backward(loss);

  std::vector<ParamRef<float>> conv_refs;
  net.collect_conv_params(conv_refs, "base");
  for (const auto& r : conv_refs)
    for (float g : r.tensor.grad()) EXPECT_EQ(g, 0.0f) << r.name;

  std::vector<ParamRef<float>> att_refs;
  m.collect_attention_params(att_refs);
  for (const auto& r : att_refs) {
    double norm = 0.0;
    for (float g : r.tensor.grad()) norm += std::abs(static_cast<double>(g));
    EXPECT_GT(norm, 0.0) << r.name;
  }
}

TEST(GradientBlocking, BaseGradEqualsBaseOnlyPath) {
  // With blocking on, base gradients must match a run where the attention
  // outputs and gates are detached constants.
  Rng rng(26);
  auto net = gattn::build_baseline<float>(small_cfg(), rng);
  auto m = gattn::attach_attention<float>(net, 2, 2, MaskKind::Softmax, 0.001, true, 10, rng);
  Rng drng(27);
  auto x = Tensor<float>::uniform({3, 1, 16, 16}, 0, 1, drng);
  std::vector<int> targets{0, 5, 9};

  std::vector<ParamRef<float>> conv_refs;
  net.collect_conv_params(conv_refs, "base");

  {
    Tape<float> tape;
    auto out = m.forward(x, false);
    auto loss = gattn::add(gattn::nll_from_probs(out.output, targets),
                           gattn::scale(out.reg_loss, m.gamma));
    tape.backward(loss);
  }
  std::vector<std::vector<float>> blocked;
  for (auto& r : conv_refs) {
    blocked.push_back(r.tensor.grad());
    r.tensor.zero_grad();
  }
  std::vector<ParamRef<float>> all_refs;
  m.collect_params(all_refs);
  for (auto& r : all_refs) r.tensor.zero_grad();

  {
    Tape<float> tape;
    auto bt = net.forward_taps(x, false);
    auto p_net = gattn::softmax(bt.logits, 1);
    auto ref = m.forward(x, false);  // values only; used as constants
    std::vector<Tensor<float>> detached;
    for (const auto& mf : ref.modules) detached.push_back(gattn::detach(mf.module_prob));
    auto out = gattn::rectify(p_net, detached, gattn::detach(ref.gates));
    auto loss = gattn::nll_from_probs(out, targets);
    tape.backward(loss);
  }
  for (std::size_t i = 0; i < conv_refs.size(); ++i) {
    const auto& got = conv_refs[i].tensor.grad();
    for (std::size_t j = 0; j < got.size(); ++j)
      EXPECT_EQ(got[j], blocked[i][j]) << conv_refs[i].name;
  }
}

TEST(Checkpoint, RoundTripsAugmentedModel) {
  ModelConfig cfg = small_cfg();
  cfg.ad = 2;
  cfg.aw = 2;
  Rng rng(28);
  auto net = gattn::build_baseline<float>(cfg, rng);
  auto m = gattn::attach_attention<float>(net, cfg.ad, cfg.aw, cfg.mask, cfg.gamma, false,
                                          cfg.labels, rng);
  std::vector<ParamRef<float>> refs;
  m.collect_params(refs);
  m.collect_state(refs);
  const std::string path = "/tmp/gattn_test_ckpt.bin";
  gattn::save_checkpoint(path, gattn::stage_checkpoint(cfg.to_manifest(), refs));

  auto loaded = gattn::load_checkpoint(path);
  auto cfg2 = ModelConfig::from_manifest(loaded.manifest);
  EXPECT_EQ(cfg2.ad, 2);
  EXPECT_EQ(cfg2.channels, cfg.channels);
  Rng rng2(999);  // init values are irrelevant; overwritten by assign
  auto net2 = gattn::build_baseline<float>(cfg2, rng2);
  auto m2 = gattn::attach_attention<float>(net2, cfg2.ad, cfg2.aw, cfg2.mask, cfg2.gamma,
                                           cfg2.block_gradients, cfg2.labels, rng2);
  std::vector<ParamRef<float>> refs2;
  m2.collect_params(refs2);
  m2.collect_state(refs2);
  gattn::assign_checkpoint(loaded, refs2);

  Rng drng(29);
  auto x = Tensor<float>::uniform({2, 1, 16, 16}, 0, 1, drng);
  auto a = m.forward(x, false);
  auto b = m2.forward(x, false);
  for (std::size_t i = 0; i < a.output.data().size(); ++i)
    EXPECT_EQ(a.output.data()[i], b.output.data()[i]);
  std::remove(path.c_str());
}

TEST(Checkpoint, HeaderBytes) {
  gattn::CheckpointData ckpt;
  ckpt.manifest = "[model]\n";
  ckpt.tensors.push_back({"t", {2}, {1.0f, 2.0f}});
  const std::string path = "/tmp/gattn_test_hdr.bin";
  gattn::save_checkpoint(path, ckpt);
  std::ifstream in(path, std::ios::binary);
  std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  ASSERT_GE(bytes.size(), 8u);
  EXPECT_EQ(std::string(bytes.data(), 8), "GATNCKPT");
  // version u32 LE = 1
  EXPECT_EQ(bytes[8], 1);
  EXPECT_EQ(bytes[9], 0);
  // manifest length u64 LE = 8
  EXPECT_EQ(bytes[12], 8);
  EXPECT_EQ(std::string(bytes.data() + 20, 8), "[model]\n");
  std::remove(path.c_str());
}

TEST(Checkpoint, TruncationDetected) {
  gattn::CheckpointData ckpt;
  ckpt.manifest = "[model]\n";
  ckpt.tensors.push_back({"t", {4}, {1, 2, 3, 4}});
  const std::string path = "/tmp/gattn_test_trunc.bin";
  gattn::save_checkpoint(path, ckpt);
  // Truncate the payload.
  std::ifstream in(path, std::ios::binary);
  std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  in.close();
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size() - 6));
  out.close();
  EXPECT_THROW(gattn::load_checkpoint(path), gattn::FormatError);
  std::remove(path.c_str());
}

TEST(AugmentedModel, EndToEndGradCheck) {
  // Full loss (nll + gamma * L_R) through an AD=2, AW=2 augmented BaseCnn on
  // 2 samples in double precision, against finite differences.
  ModelConfig cfg;
  cfg.channels = {2, 3, 4, 4, 4};
  cfg.fc_hidden = 8;
  cfg.input_h = cfg.input_w = 16;
  Rng rng(30);
  auto net = gattn::build_baseline<double>(cfg, rng);
  auto m = gattn::attach_attention<double>(net, 2, 2, MaskKind::Softmax, 0.001, false, 10, rng);
  // Gate weights start at zero; nudge them so the gate path has signal.
  Rng grng(31);
  for (auto& v : m.gate.w.data()) v = grng.uniform(-0.3, 0.3);
  Rng drng(32);
  auto x = Tensor<double>::uniform({2, 1, 16, 16}, 0, 1, drng);
  std::vector<int> targets{3, 7};
  auto f = [&] {
    auto out = m.forward(x, /*train=*/true);
    return gattn::add(gattn::nll_from_probs(out.output, targets),
                      gattn::scale(out.reg_loss, m.gamma));
  };
  std::vector<ParamRef<double>> refs;
  m.collect_params(refs);
  std::vector<Tensor<double>> probes;
  for (auto& r : refs) probes.push_back(r.tensor);
  // eps 1e-4: smaller steps amplify rounding noise in directions the
  // loss is exactly flat in (softmax shift invariance).
  const double err = gattn::grad_check(f, probes, 1e-4);
  EXPECT_LT(err, 1e-4);
}
