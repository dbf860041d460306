#pragma once

#include <CLI11.hpp>
#include <Eigen/Core>

#include <cstdio>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#ifdef _OPENMP
#include <omp.h>
#endif

#include "gattn/grad_check.hpp"
#include "gattn/training.hpp"
#include "gattn/viz.hpp"

namespace gattn::cli {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Config schema and resolution
// ---------------------------------------------------------------------------

inline const std::map<std::string, std::set<std::string>>& config_schema() {
  static const std::map<std::string, std::set<std::string>> schema = {
      {"data",
       {"source", "mnist_dir", "cifar_dir", "synthetic_train", "synthetic_test", "train", "val",
        "test", "distractors", "seed"}},
      {"model",
       {"base", "labels", "channels", "fc_hidden", "input_channels", "input_h", "input_w",
        "wrn_depth", "wrn_widen", "ad", "aw", "mask", "uniform_gates", "gamma",
        "block_gradients", "tap_after_pool", "init_seed"}},
      {"train",
       {"lr", "milestones", "epochs", "batch", "momentum", "weight_decay", "augment", "seed",
        "out_dir", "threads"}},
      {"ablate", {"ad", "aw", "gates", "mask", "reg"}},
      {"sweep", {"distractors"}},
  };
  return schema;
}

inline Config resolve_config(const std::string& path, const std::vector<std::string>& sets) {
  Config c = path.empty() ? Config{} : Config::parse_file(path);
  for (const auto& s : sets) c.set(s);
  c.check_known(config_schema());
  return c;
}

inline DatasetSpec data_spec_from(const Config& c) {
  DatasetSpec spec;
  spec.train_n = c.get_int("data", "train", 20000);
  spec.val_n = c.get_int("data", "val", 5000);
  spec.test_n = c.get_int("data", "test", 5000);
  spec.distractors = static_cast<int>(c.get_int("data", "distractors", 8));
  spec.mnist_dir = c.get_str("data", "mnist_dir", "");
  spec.synthetic_train = c.get_int("data", "synthetic_train", 4000);
  spec.synthetic_test = c.get_int("data", "synthetic_test", 1000);
  spec.master_seed = c.get_u64("data", "seed", 1);
  return spec;
}

inline TrainConfig train_config_from(const Config& c) {
  TrainConfig t;
  t.lr0 = c.get_double("train", "lr", 0.1);
  t.milestones = c.get_int_list("train", "milestones", {60});
  t.epochs = c.get_int("train", "epochs", 200);
  t.batch = c.get_int("train", "batch", 128);
  t.momentum = c.get_double("train", "momentum", 0.0);
  t.weight_decay = c.get_double("train", "weight_decay", 0.0);
  t.gamma = c.get_double("model", "gamma", 0.001);
  t.augment = c.get_bool("train", "augment", false);
  t.seed = c.get_u64("train", "seed", 1);
  t.validate();
  return t;
}

inline ModelConfig model_config_from(const Config& c) {
  ModelConfig m = ModelConfig::from_config(c);
  if (!c.has("model", "init_seed")) m.init_seed = c.get_u64("train", "seed", 1);
  return m;
}

/// The fully materialized configuration actually used by a run; written
/// beside the outputs so any run is reproducible from its snapshot alone.
inline Config resolved_snapshot(const Config& c) {
  Config out;
  const DatasetSpec d = data_spec_from(c);
  out.set("data", "source", c.get_str("data", "source", "cluttered"));
  out.set("data", "mnist_dir", d.mnist_dir);
  out.set("data", "cifar_dir", c.get_str("data", "cifar_dir", ""));
  out.set("data", "synthetic_train", std::to_string(d.synthetic_train));
  out.set("data", "synthetic_test", std::to_string(d.synthetic_test));
  out.set("data", "train", std::to_string(d.train_n));
  out.set("data", "val", std::to_string(d.val_n));
  out.set("data", "test", std::to_string(d.test_n));
  out.set("data", "distractors", std::to_string(d.distractors));
  out.set("data", "seed", std::to_string(d.master_seed));

  const ModelConfig m = model_config_from(c);
  const Config mc = Config::parse(m.to_manifest(), "<manifest>");
  for (const auto& [key, value] : mc.sections().at("model")) out.set("model", key, value);

  const TrainConfig t = train_config_from(c);
  out.set("train", "lr", detail::fmt_g(t.lr0));
  std::string ms;
  for (std::size_t i = 0; i < t.milestones.size(); ++i)
    ms += (i ? "," : "") + std::to_string(t.milestones[i]);
  out.set("train", "milestones", ms);
  out.set("train", "epochs", std::to_string(t.epochs));
  out.set("train", "batch", std::to_string(t.batch));
  out.set("train", "momentum", detail::fmt_g(t.momentum));
  out.set("train", "weight_decay", detail::fmt_g(t.weight_decay));
  out.set("train", "augment", t.augment ? "true" : "false");
  out.set("train", "seed", std::to_string(t.seed));
  out.set("train", "out_dir", c.get_str("train", "out_dir", "runs/default"));
  out.set("train", "threads", std::to_string(c.get_int("train", "threads", 0)));
  for (const char* key : {"ad", "aw", "gates", "mask", "reg"})
    if (c.has("ablate", key)) out.set("ablate", key, c.sections().at("ablate").at(key));
  if (c.has("sweep", "distractors"))
    out.set("sweep", "distractors", c.sections().at("sweep").at("distractors"));
  return out;
}

inline void apply_thread_config(const Config& c) {
  const auto threads = c.get_int("train", "threads", 0);
#ifdef _OPENMP
  if (threads > 0) omp_set_num_threads(static_cast<int>(threads));
#endif
  // Library parallelism lives in the op kernels; Eigen stays single-threaded
  // inside them.
  Eigen::setNbThreads(1);
}

// ---------------------------------------------------------------------------
// Model holding and dispatch
// ---------------------------------------------------------------------------

struct LoadedModel {
  ModelConfig cfg;
  std::optional<BaseCnn<float>> cnn;
  std::optional<ToyWrn<float>> wrn;
  std::optional<Augmented<float, BaseCnn<float>>> aug_cnn;
  std::optional<Augmented<float, ToyWrn<float>>> aug_wrn;

  void collect_checkpoint(std::vector<ParamRef<float>>& refs) {
    if (aug_cnn) {
      aug_cnn->collect_params(refs);
      aug_cnn->collect_state(refs);
    } else if (aug_wrn) {
      aug_wrn->collect_params(refs);
      aug_wrn->collect_state(refs);
    } else if (cnn) {
      cnn->collect_params(refs, "base");
      cnn->collect_state(refs, "base");
    } else {
      wrn->collect_params(refs, "base");
      wrn->collect_state(refs, "base");
    }
  }
};

inline LoadedModel build_model(const ModelConfig& cfg) {
  LoadedModel m;
  m.cfg = cfg;
  Rng rng(cfg.init_seed);
  if (cfg.base == "cnn") {
    auto base = build_baseline<float>(cfg, rng);
    if (cfg.ad > 0) {
      m.aug_cnn = attach_attention<float>(std::move(base), cfg.ad, cfg.aw, cfg.mask, cfg.gamma,
                                          cfg.block_gradients, cfg.labels, rng);
      m.aug_cnn->uniform_gates = cfg.uniform_gates;
    } else {
      m.cnn = std::move(base);
    }
  } else {
    auto base = build_toy_wrn<float>(cfg, rng);
    if (cfg.ad > 0) {
      m.aug_wrn = attach_attention<float>(std::move(base), cfg.ad, cfg.aw, cfg.mask, cfg.gamma,
                                          cfg.block_gradients, cfg.labels, rng);
      m.aug_wrn->uniform_gates = cfg.uniform_gates;
    } else {
      m.wrn = std::move(base);
    }
  }
  return m;
}

inline LoadedModel load_model(const std::string& ckpt_path) {
  auto ckpt = load_checkpoint(ckpt_path);
  auto cfg = ModelConfig::from_manifest(ckpt.manifest);
  auto m = build_model(cfg);
  std::vector<ParamRef<float>> refs;
  m.collect_checkpoint(refs);
  assign_checkpoint(ckpt, refs);
  return m;
}

/// Calls fn with a training/eval driver matching the held model kind.
template <typename Fn>
void with_driver(LoadedModel& m, Fn&& fn) {
  const std::string manifest = m.cfg.to_manifest();
  if (m.aug_cnn) {
    AugmentedDriver<float, BaseCnn<float>> d{&*m.aug_cnn, {}, manifest};
    fn(d);
  } else if (m.aug_wrn) {
    AugmentedDriver<float, ToyWrn<float>> d{&*m.aug_wrn, {}, manifest};
    fn(d);
  } else if (m.cnn) {
    BaseDriver<float, BaseCnn<float>> d{&*m.cnn, manifest};
    fn(d);
  } else {
    BaseDriver<float, ToyWrn<float>> d{&*m.wrn, manifest};
    fn(d);
  }
}

// ---------------------------------------------------------------------------
// Dataset building
// ---------------------------------------------------------------------------

struct DataBundle {
  Dataset<float> train, val, test;
  std::optional<ClutteredGenerator> gen;  // present for the cluttered source
};

inline DataBundle build_data(const Config& c) {
  const std::string source = c.get_str("data", "source", "cluttered");
  DataBundle b;
  if (source == "cluttered") {
    auto gen = ClutteredGenerator::from_spec(data_spec_from(c));
    b.train = to_float<float>(materialize(gen, Split::Train));
    b.val = to_float<float>(materialize(gen, Split::Val));
    b.test = to_float<float>(materialize(gen, Split::Test));
    b.gen = std::move(gen);
  } else if (source == "cifar") {
    auto cd = load_cifar10<float>(c.require_str("data", "cifar_dir"));
    b.train = std::move(cd.train);
    b.val = cd.test;  // no held-out val split in the CIFAR binary layout
    b.test = std::move(cd.test);
  } else {
    throw ConfigError("data.source must be cluttered or cifar, got '" + source + "'");
  }
  return b;
}

inline void write_snapshot(const Config& c, const std::string& out_dir) {
  fs::create_directories(out_dir);
  write_text_file(out_dir + "/config_resolved.toml", resolved_snapshot(c).serialize());
}

// ---------------------------------------------------------------------------
// Commands
// ---------------------------------------------------------------------------

inline int cmd_generate(const Config& c, const std::string& out_dir) {
  write_snapshot(c, out_dir);
  const DatasetSpec spec = data_spec_from(c);
  auto gen = ClutteredGenerator::from_spec(spec);
  for (Split s : {Split::Train, Split::Val, Split::Test}) {
    auto ds = materialize(gen, s);
    DatasetCacheHeader hdr{spec.master_seed, static_cast<std::uint32_t>(s),
                           static_cast<std::uint32_t>(spec.distractors)};
    const std::string path = out_dir + "/" + split_name(s) + ".gattnds";
    write_dataset_cache(path, ds, hdr);
    std::printf("wrote %s (%lld samples, D=%d)\n", path.c_str(), static_cast<long long>(ds.n),
                spec.distractors);
  }
  if (spec.mnist_dir.empty()) {
    // Emit the synthetic digit corpus in MNIST IDX layout for inspection and
    // reuse as an on-disk source.
    const auto train = make_digit_corpus(spec.synthetic_train,
                                         hash_combine(spec.master_seed, 0xD161751ull));
    const auto test = make_digit_corpus(spec.synthetic_test,
                                        hash_combine(spec.master_seed, 0xD16175Eull));
    save_idx_u8(out_dir + "/train-images-idx3-ubyte", {train.count, 28, 28}, train.images);
    save_idx_u8(out_dir + "/train-labels-idx1-ubyte", {train.count}, train.labels);
    save_idx_u8(out_dir + "/t10k-images-idx3-ubyte", {test.count, 28, 28}, test.images);
    save_idx_u8(out_dir + "/t10k-labels-idx1-ubyte", {test.count}, test.labels);
    std::printf("wrote synthetic digit corpus (%lld train / %lld test digits)\n",
                static_cast<long long>(train.count), static_cast<long long>(test.count));
  }
  return 0;
}

inline int cmd_train(const Config& c, const std::string& out_dir_flag) {
  const std::string out_dir =
      out_dir_flag.empty() ? c.get_str("train", "out_dir", "runs/default") : out_dir_flag;
  write_snapshot(c, out_dir);
  auto data = build_data(c);
  auto model = build_model(model_config_from(c));
  const TrainConfig tcfg = train_config_from(c);
  RunMetrics metrics;
  with_driver(model, [&](auto& driver) {
    metrics = gattn::train(driver, data.train, data.val, tcfg, out_dir);
  });
  for (const auto& e : metrics.epochs)
    std::printf("epoch %lld lr %.4g train_loss %.4f train_acc %.4f val_acc %.4f\n",
                static_cast<long long>(e.epoch), e.lr, e.train_loss, e.train_acc, e.val_acc);
  if (metrics.diverged) {
    std::fprintf(stderr, "training aborted: %s (best checkpoint kept)\n", metrics.note.c_str());
    return 1;
  }
  std::printf("best val_acc %.4f at epoch %lld; checkpoint %s/best.ckpt\n", metrics.best_val_acc,
              static_cast<long long>(metrics.best_epoch), out_dir.c_str());
  return 0;
}

inline int cmd_eval(const Config& c, const std::string& ckpt, const std::string& split_name_arg,
                    std::int64_t distractor_override, const std::string& out_dir) {
  auto model = load_model(ckpt);
  Split split = Split::Test;
  if (split_name_arg == "train") split = Split::Train;
  else if (split_name_arg == "val") split = Split::Val;
  else if (split_name_arg != "test")
    throw ConfigError("eval: unknown split '" + split_name_arg + "'");

  Dataset<float> data;
  const std::string source = c.get_str("data", "source", "cluttered");
  if (source == "cluttered") {
    auto gen = ClutteredGenerator::from_spec(data_spec_from(c));
    std::optional<int> d;
    if (distractor_override >= 0) d = static_cast<int>(distractor_override);
    data = to_float<float>(materialize(gen, split, d));
  } else {
    auto bundle = build_data(c);
    data = split == Split::Train ? std::move(bundle.train) : std::move(bundle.test);
  }

  EvalResult r;
  with_driver(model, [&](auto& driver) { r = evaluate(driver, data); });
  std::printf("split %s: accuracy %.6f loss %.6f n %lld\n", split_name_arg.c_str(), r.accuracy,
              r.loss, static_cast<long long>(r.count));
  if (!r.gate_means.empty()) {
    std::printf("mean gates:");
    for (std::size_t g = 0; g < r.gate_means.size(); ++g)
      std::printf(" %s=%.4f", g == 0 ? "g_net" : ("g_mod" + std::to_string(g)).c_str(),
                  r.gate_means[g]);
    std::printf("\n");
  }
  if (!out_dir.empty()) {
    write_snapshot(c, out_dir);
    std::string csv = "split,accuracy,loss,n\n";
    csv += split_name_arg + "," + detail::fmt_g(r.accuracy) + "," + detail::fmt_g(r.loss) + "," +
           std::to_string(r.count) + "\n";
    write_text_file(out_dir + "/eval.csv", csv);
  }
  return 0;
}

inline int cmd_ablate(const Config& c, const std::string& out_dir_flag) {
  const std::string out_dir =
      out_dir_flag.empty() ? c.get_str("train", "out_dir", "runs/ablate") : out_dir_flag;
  GridSpec grid;
  grid.ad_list = c.get_int_list("ablate", "ad", {1});
  grid.aw_list = c.get_int_list("ablate", "aw", {1});
  grid.gates_list.clear();
  grid.mask_list.clear();
  grid.reg_list.clear();
  for (const auto& g : c.get_int_list("ablate", "gates", {1})) grid.gates_list.push_back(static_cast<int>(g));
  {
    std::string masks = c.get_str("ablate", "mask", "softmax");
    std::istringstream in(masks);
    std::string item;
    while (std::getline(in, item, ','))
      if (!item.empty()) grid.mask_list.push_back(parse_mask_kind(item));
  }
  for (const auto& r : c.get_int_list("ablate", "reg", {1})) grid.reg_list.push_back(static_cast<int>(r));
  if (grid.cells() == 0) throw ConfigError("ablate: empty grid");

  write_snapshot(c, out_dir);
  auto data = build_data(c);
  const ModelConfig mc = model_config_from(c);
  const TrainConfig tcfg = train_config_from(c);
  auto rows = ablation_grid(mc, grid, data.train, data.val, data.test, tcfg);
  write_text_file(out_dir + "/ablation.csv", ablation_csv(rows));
  for (const auto& r : rows)
    std::printf("ad=%lld aw=%lld %s %s %s: val %.4f test %.4f\n",
                static_cast<long long>(r.cell.ad), static_cast<long long>(r.cell.aw),
                r.cell.gates ? "gates" : "no-gates", mask_kind_name(r.cell.mask).c_str(),
                r.cell.reg ? "reg" : "no-reg", r.val_acc, r.test_acc);
  std::printf("wrote %s/ablation.csv (%zu cells)\n", out_dir.c_str(), rows.size());
  return 0;
}

inline int cmd_sweep(const Config& c, const std::string& ckpt, const std::string& out_dir_flag) {
  const std::string out_dir =
      out_dir_flag.empty() ? c.get_str("train", "out_dir", "runs/sweep") : out_dir_flag;
  std::vector<int> d_list;
  for (auto d : c.get_int_list("sweep", "distractors", {4, 8, 16, 32, 64}))
    d_list.push_back(static_cast<int>(d));
  if (d_list.empty()) throw ConfigError("sweep: empty distractor list");
  write_snapshot(c, out_dir);
  auto model = load_model(ckpt);
  auto gen = ClutteredGenerator::from_spec(data_spec_from(c));
  std::vector<std::pair<int, double>> rows;
  with_driver(model, [&](auto& driver) {
    rows = robustness_sweep<float>(driver, gen, d_list);
  });
  write_text_file(out_dir + "/sweep.csv", sweep_csv(rows));
  for (const auto& [d, acc] : rows) std::printf("D=%d: accuracy %.6f\n", d, acc);
  return 0;
}

inline int cmd_export_masks(const std::string& ckpt, const std::string& images_path,
                            const std::string& out_dir, std::int64_t count) {
  auto model = load_model(ckpt);
  if (!model.aug_cnn && !model.aug_wrn)
    throw ConfigError("export-masks: checkpoint holds an unaugmented model (ad = 0)");
  auto arr = load_idx_u8(images_path);
  if (arr.shape.size() != 3)
    throw FormatError("export-masks: expected a rank-3 IDX image file, got " +
                      shape_str(arr.shape));
  const std::int64_t n = count > 0 ? std::min<std::int64_t>(count, arr.shape[0]) : arr.shape[0];
  const std::int64_t h = arr.shape[1], w = arr.shape[2];
  auto images = Tensor<float>::zeros({n, 1, h, w});
  for (std::int64_t i = 0; i < n * h * w; ++i)
    images.data()[static_cast<std::size_t>(i)] = arr.bytes[static_cast<std::size_t>(i)] / 255.0f;
  fs::create_directories(out_dir);
  std::int64_t files = 0;
  if (model.aug_cnn) files = export_masks(*model.aug_cnn, images, out_dir);
  else files = export_masks(*model.aug_wrn, images, out_dir);
  std::printf("wrote %lld mask/overlay files to %s\n", static_cast<long long>(files),
              out_dir.c_str());
  return 0;
}

inline int cmd_grad_check(double tol) {
  double worst = 0.0;
  {
    Rng rng(2);
    auto x = Tensor<double>::uniform({2, 3, 6, 6}, -1, 1, rng);
    auto w = Tensor<double>::uniform({2, 3, 3, 3}, -0.5, 0.5, rng);
    auto maps = Tensor<double>::uniform({2, 2, 4, 6, 6}, 0.0, 1.0, rng);
    auto f = [&] {
      auto mask = spatial_softmax(conv2d(x, w, std::nullopt, 1, 1));
      auto pooled = weighted_spatial_sum(mask, maps);
      return sum_all(mul(pooled, pooled));
    };
    const double err = grad_check(f, {x, w, maps}, 1e-4);
    std::printf("conv2d + spatial_softmax + weighted_spatial_sum: max rel err %.3g\n", err);
    worst = std::max(worst, err);
  }
  {
    Rng rng(3);
    auto m = AttentionModule<double>::create(3, {2, 4, MaskKind::Softmax}, rng);
    auto z = Tensor<double>::uniform({2, 3, 8, 8}, -1, 1, rng);
    std::vector<int> targets{1, 3};
    auto f = [&] {
      auto fwd = module_forward(m, z);
      return add(nll_from_probs(fwd.module_prob, targets),
                 scale(head_regularizer(fwd.masks), 0.001));
    };
    const double err =
        grad_check(f, {z, m.w_heads, m.b_heads, m.w_out, m.b_out, m.w_gate, m.b_gate}, 1e-4);
    std::printf("attention module forward + loss: max rel err %.3g\n", err);
    worst = std::max(worst, err);
  }
  {
    ModelConfig cfg;
    cfg.channels = {2, 3, 4, 4, 4};
    cfg.fc_hidden = 8;
    cfg.input_h = cfg.input_w = 16;
    Rng rng(4);
    auto net = build_baseline<double>(cfg, rng);
    auto model = attach_attention<double>(net, 2, 2, MaskKind::Softmax, 0.001, false, 10, rng);
    for (auto& v : model.gate.w.data()) v = rng.uniform(-0.3, 0.3);
    auto x = Tensor<double>::uniform({2, 1, 16, 16}, 0, 1, rng);
    std::vector<int> targets{3, 7};
    auto f = [&] {
      auto out = model.forward(x, true);
      return add(nll_from_probs(out.output, targets), scale(out.reg_loss, model.gamma));
    };
    std::vector<ParamRef<double>> refs;
    model.collect_params(refs);
    std::vector<Tensor<double>> probes;
    for (auto& r : refs) probes.push_back(r.tensor);
    const double err = grad_check(f, probes, 1e-4);
    std::printf("augmented model end-to-end (AD=2, AW=2): max rel err %.3g\n", err);
    worst = std::max(worst, err);
  }
  std::printf("worst relative error %.3g (tolerance %.3g)\n", worst, tol);
  return worst < tol ? 0 : 1;
}

// ---------------------------------------------------------------------------
// Entry point
// ---------------------------------------------------------------------------

inline int run(int argc, char** argv) {
  CLI::App app{"gated-attention CNN library tools"};
  app.require_subcommand(1);

  struct Common {
    std::string config;
    std::vector<std::string> sets;
  };
  auto add_common = [](CLI::App* sub, Common& c) {
    sub->add_option("--config", c.config, "TOML-style config file");
    sub->add_option("--set", c.sets, "override: section.key=value")->take_all();
  };

  Common gen_c, train_c, eval_c, ablate_c, sweep_c;
  std::string gen_out = "runs/generate", train_out, eval_out, ablate_out, sweep_out;
  std::string eval_ckpt, sweep_ckpt, export_ckpt, export_images, export_out = "runs/masks";
  std::string eval_split = "test";
  std::int64_t eval_distractors = -1, export_count = 0;
  double gc_tol = 1e-4;

  auto* gen = app.add_subcommand("generate", "materialize cluttered datasets to cache files");
  add_common(gen, gen_c);
  gen->add_option("--out", gen_out, "output directory");

  auto* tr = app.add_subcommand("train", "train a model");
  add_common(tr, train_c);
  tr->add_option("--out", train_out, "output directory (default: train.out_dir)");

  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint");
  add_common(ev, eval_c);
  ev->add_option("--checkpoint", eval_ckpt, "checkpoint path")->required();
  ev->add_option("--split", eval_split, "train|val|test (default test)");
  ev->add_option("--distractors", eval_distractors, "override distractor count");
  ev->add_option("--out", eval_out, "optional output directory for eval.csv");

  auto* ab = app.add_subcommand("ablate", "run the ablation grid");
  add_common(ab, ablate_c);
  ab->add_option("--out", ablate_out, "output directory");

  auto* sw = app.add_subcommand("sweep", "distractor-robustness sweep of a checkpoint");
  add_common(sw, sweep_c);
  sw->add_option("--checkpoint", sweep_ckpt, "checkpoint path")->required();
  sw->add_option("--out", sweep_out, "output directory");

  auto* ex = app.add_subcommand("export-masks", "write attention mask heatmaps as PGM");
  ex->add_option("--checkpoint", export_ckpt, "checkpoint path")->required();
  ex->add_option("--images", export_images, "IDX image file")->required();
  ex->add_option("--out", export_out, "output directory");
  ex->add_option("--count", export_count, "number of images (default all)");

  auto* gc = app.add_subcommand("grad-check", "finite-difference gradient verification");
  gc->add_option("--tol", gc_tol, "max acceptable relative error");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (gen->parsed()) {
      const Config c = resolve_config(gen_c.config, gen_c.sets);
      apply_thread_config(c);
      return cmd_generate(c, gen_out);
    }
    if (tr->parsed()) {
      const Config c = resolve_config(train_c.config, train_c.sets);
      apply_thread_config(c);
      return cmd_train(c, train_out);
    }
    if (ev->parsed()) {
      const Config c = resolve_config(eval_c.config, eval_c.sets);
      apply_thread_config(c);
      return cmd_eval(c, eval_ckpt, eval_split, eval_distractors, eval_out);
    }
    if (ab->parsed()) {
      const Config c = resolve_config(ablate_c.config, ablate_c.sets);
      apply_thread_config(c);
      return cmd_ablate(c, ablate_out);
    }
    if (sw->parsed()) {
      const Config c = resolve_config(sweep_c.config, sweep_c.sets);
      apply_thread_config(c);
      return cmd_sweep(c, sweep_ckpt, sweep_out);
    }
    if (ex->parsed()) return cmd_export_masks(export_ckpt, export_images, export_out, export_count);
    if (gc->parsed()) return cmd_grad_check(gc_tol);
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}

}  // namespace gattn::cli
