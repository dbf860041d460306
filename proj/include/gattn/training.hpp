#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <span>
#include <string>
#include <vector>

#include "gattn/data.hpp"
#include "gattn/models.hpp"

namespace gattn {

// ---------------------------------------------------------------------------
// Optimizer and schedule
// ---------------------------------------------------------------------------

struct TrainConfig {
  double lr0 = 0.1;
  std::vector<std::int64_t> milestones = {60};  // divide lr by 10 from each milestone epoch on
  std::int64_t epochs = 200;
  std::int64_t batch = 128;
  double momentum = 0.0;
  double weight_decay = 0.0;
  double gamma = 0.001;
  bool augment = false;  // CIFAR-style pad-crop + flip
  std::uint64_t seed = 1;

  void validate() const {
    if (lr0 <= 0) throw ConfigError("train: lr0 must be positive");
    if (epochs < 1) throw ConfigError("train: epochs must be >= 1");
    if (batch < 1) throw ConfigError("train: batch must be >= 1");
    for (std::size_t i = 1; i < milestones.size(); ++i)
      if (milestones[i] <= milestones[i - 1])
        throw ConfigError("train: milestones must be strictly increasing");
  }
};

inline double lr_at(const TrainConfig& cfg, std::int64_t epoch) {
  if (epoch < 0) throw ConfigError("lr_at: epoch must be >= 0");
  int passed = 0;
  for (auto m : cfg.milestones)
    if (epoch >= m) ++passed;
  return cfg.lr0 * std::pow(0.1, passed);
}

template <typename T>
struct SgdState {
  std::vector<std::vector<T>> velocity;
};

/// v <- momentum*v + grad + wd*w;  w <- w - lr*v. Throws on non-finite
/// gradients so the training loop can abort with a diagnostic.
template <typename T>
void sgd_update(std::vector<ParamRef<T>>& params, SgdState<T>& state, T lr, T momentum, T wd) {
  if (state.velocity.empty()) state.velocity.resize(params.size());
  if (state.velocity.size() != params.size())
    throw ShapeError("sgd_update: optimizer state does not match parameter list");
  for (std::size_t p = 0; p < params.size(); ++p) {
    auto& w = params[p].tensor.data();
    const auto& g = params[p].tensor.grad();
    auto& v = state.velocity[p];
    if (v.empty()) v.assign(w.size(), T(0));
    for (std::size_t i = 0; i < w.size(); ++i) {
      if (!std::isfinite(g[i]))
        throw ValueError("sgd_update: non-finite gradient in " + params[p].name);
      v[i] = momentum * v[i] + g[i] + wd * w[i];
      w[i] -= lr * v[i];
    }
  }
}

// ---------------------------------------------------------------------------
// Drivers: uniform training interface over plain and augmented models
// ---------------------------------------------------------------------------

template <typename T>
struct StepOut {
  Tensor<T> loss;   // scalar; tape-connected when a tape is active
  Tensor<T> probs;  // [N,labels]
  double reg = 0.0;
  std::vector<double> gate_means;  // per-gate batch means; empty for baselines
};

template <typename T, typename Base>
struct BaseDriver {
  Base* net = nullptr;
  std::string manifest;

  StepOut<T> forward_loss(const Tensor<T>& x, std::span<const int> y, bool train) {
    StepOut<T> out;
    out.probs = softmax(net->forward(x, train), 1);
    out.loss = nll_from_probs(out.probs, y);
    return out;
  }
  void collect_params(std::vector<ParamRef<T>>& out) { net->collect_params(out, "base"); }
  void collect_checkpoint(std::vector<ParamRef<T>>& out) {
    net->collect_params(out, "base");
    net->collect_state(out, "base");
  }
};

template <typename T, typename Base>
struct AugmentedDriver {
  Augmented<T, Base>* model = nullptr;
  ForwardOptions opts{};
  std::string manifest;

  StepOut<T> forward_loss(const Tensor<T>& x, std::span<const int> y, bool train) {
    StepOut<T> out;
    auto bundle = model->forward(x, train, opts);
    out.probs = bundle.output;
    auto nll = nll_from_probs(bundle.output, y);
    out.reg = bundle.reg_loss.item();
    out.loss = model->gamma != T(0) ? add(nll, scale(bundle.reg_loss, model->gamma)) : nll;
    const std::int64_t n = bundle.gates.dim(0), g = bundle.gates.dim(1);
    out.gate_means.assign(static_cast<std::size_t>(g), 0.0);
    for (std::int64_t i = 0; i < n; ++i)
      for (std::int64_t j = 0; j < g; ++j)
        out.gate_means[static_cast<std::size_t>(j)] +=
            static_cast<double>(bundle.gates.data()[static_cast<std::size_t>(i * g + j)]) /
            static_cast<double>(n);
    return out;
  }
  void collect_params(std::vector<ParamRef<T>>& out) { model->collect_params(out); }
  void collect_checkpoint(std::vector<ParamRef<T>>& out) {
    model->collect_params(out);
    model->collect_state(out);
  }
};

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

struct EpochMetrics {
  std::int64_t epoch = 0;
  double lr = 0, train_loss = 0, train_acc = 0, val_acc = 0, val_loss = 0, reg_loss = 0;
  std::vector<double> gate_means;
};

struct RunMetrics {
  std::vector<EpochMetrics> epochs;
  double best_val_acc = 0.0;
  std::int64_t best_epoch = -1;
  bool diverged = false;
  std::string note;
};

struct EvalResult {
  double accuracy = 0.0;
  double loss = 0.0;
  std::vector<double> gate_means;
  std::int64_t count = 0;
};

namespace detail {

inline std::string fmt_g(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.9g", v);
  return buf;
}

inline int argmax_row(const float* p, std::int64_t l) {
  int best = 0;
  for (std::int64_t i = 1; i < l; ++i)
    if (p[i] > p[best]) best = static_cast<int>(i);
  return best;
}
inline int argmax_row(const double* p, std::int64_t l) {
  int best = 0;
  for (std::int64_t i = 1; i < l; ++i)
    if (p[i] > p[best]) best = static_cast<int>(i);
  return best;
}

}  // namespace detail

inline std::string metrics_csv(const RunMetrics& m, std::int64_t gate_count) {
  std::string out = "epoch,lr,train_loss,train_acc,val_acc,val_loss,reg_loss";
  out += ",g_net";
  for (std::int64_t g = 1; g < gate_count; ++g) out += ",g_mod" + std::to_string(g);
  out += "\n";
  for (const auto& e : m.epochs) {
    out += std::to_string(e.epoch) + "," + detail::fmt_g(e.lr) + "," +
           detail::fmt_g(e.train_loss) + "," + detail::fmt_g(e.train_acc) + "," +
           detail::fmt_g(e.val_acc) + "," + detail::fmt_g(e.val_loss) + "," +
           detail::fmt_g(e.reg_loss);
    for (std::int64_t g = 0; g < gate_count; ++g)
      out += "," + (g < static_cast<std::int64_t>(e.gate_means.size())
                        ? detail::fmt_g(e.gate_means[static_cast<std::size_t>(g)])
                        : std::string("0"));
    out += "\n";
  }
  return out;
}

inline void write_text_file(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path);
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
}

// ---------------------------------------------------------------------------
// Evaluation and training
// ---------------------------------------------------------------------------

/// Argmax accuracy and mean loss over a split, eval mode, no recording.
template <typename T, typename Driver>
EvalResult evaluate(Driver& driver, const Dataset<T>& data, std::int64_t batch = 256) {
  EvalResult r;
  r.count = data.size();
  BatchIterator<T> it(data, batch, /*seed=*/0, /*shuffle=*/false, /*augment=*/false);
  std::int64_t correct = 0;
  double loss_sum = 0.0;
  std::vector<double> gate_sum;
  while (auto b = it.next()) {
    auto so = driver.forward_loss(b->images, b->labels, /*train=*/false);
    const std::int64_t n = b->images.dim(0);
    const std::int64_t l = so.probs.dim(1);
    for (std::int64_t i = 0; i < n; ++i)
      if (detail::argmax_row(so.probs.data().data() + i * l, l) ==
          b->labels[static_cast<std::size_t>(i)])
        ++correct;
    loss_sum += so.loss.item() * static_cast<double>(n);
    if (!so.gate_means.empty()) {
      if (gate_sum.empty()) gate_sum.assign(so.gate_means.size(), 0.0);
      for (std::size_t g = 0; g < gate_sum.size(); ++g)
        gate_sum[g] += so.gate_means[g] * static_cast<double>(n);
    }
  }
  r.accuracy = static_cast<double>(correct) / static_cast<double>(r.count);
  r.loss = loss_sum / static_cast<double>(r.count);
  for (double g : gate_sum) r.gate_means.push_back(g / static_cast<double>(r.count));
  return r;
}

/// SGD training with the step schedule, per-epoch validation, and
/// best-validation checkpointing. Fully seeded: identical configs produce
/// bitwise-identical metrics and checkpoints. On divergence (non-finite
/// loss or gradient) training aborts, keeping the best checkpoint written
/// so far.
template <typename T, typename Driver>
RunMetrics train(Driver& driver, const Dataset<T>& train_data, const Dataset<T>& val_data,
                 const TrainConfig& cfg, const std::string& out_dir = "") {
  cfg.validate();
  RunMetrics metrics;
  std::vector<ParamRef<T>> params;
  driver.collect_params(params);
  SgdState<T> opt;

  const std::string ckpt_path = out_dir.empty() ? "" : out_dir + "/best.ckpt";
  for (std::int64_t epoch = 0; epoch < cfg.epochs && !metrics.diverged; ++epoch) {
    const double lr = lr_at(cfg, epoch);
    BatchIterator<T> it(train_data, cfg.batch,
                        hash_combine(cfg.seed, static_cast<std::uint64_t>(epoch) + 1),
                        /*shuffle=*/true, cfg.augment);
    double loss_sum = 0.0, reg_sum = 0.0;
    std::int64_t correct = 0, seen = 0, steps = 0;
    std::vector<double> gate_sum;
    while (auto b = it.next()) {
      Tape<T> tape;
      StepOut<T> so;
      try {
        so = driver.forward_loss(b->images, b->labels, /*train=*/true);
        const double lv = so.loss.item();
        if (!std::isfinite(lv)) throw ValueError("train: non-finite loss");
        tape.backward(so.loss);
        sgd_update(params, opt, static_cast<T>(lr), static_cast<T>(cfg.momentum),
                   static_cast<T>(cfg.weight_decay));
      } catch (const ValueError& e) {
        metrics.diverged = true;
        metrics.note = std::string(e.what()) + " (epoch " + std::to_string(epoch) + ", step " +
                       std::to_string(steps) + ")";
        break;
      }
      for (auto& p : params) p.tensor.zero_grad();
      const std::int64_t n = b->images.dim(0);
      const std::int64_t l = so.probs.dim(1);
      for (std::int64_t i = 0; i < n; ++i)
        if (detail::argmax_row(so.probs.data().data() + i * l, l) ==
            b->labels[static_cast<std::size_t>(i)])
          ++correct;
      loss_sum += so.loss.item() * static_cast<double>(n);
      reg_sum += so.reg * static_cast<double>(n);
      if (!so.gate_means.empty()) {
        if (gate_sum.empty()) gate_sum.assign(so.gate_means.size(), 0.0);
        for (std::size_t g = 0; g < gate_sum.size(); ++g)
          gate_sum[g] += so.gate_means[g] * static_cast<double>(n);
      }
      seen += n;
      ++steps;
    }
    if (metrics.diverged) break;

    EpochMetrics em;
    em.epoch = epoch;
    em.lr = lr;
    em.train_loss = loss_sum / static_cast<double>(seen);
    em.train_acc = static_cast<double>(correct) / static_cast<double>(seen);
    em.reg_loss = reg_sum / static_cast<double>(seen);
    for (double g : gate_sum) em.gate_means.push_back(g / static_cast<double>(seen));
    auto val = evaluate(driver, val_data);
    em.val_acc = val.accuracy;
    em.val_loss = val.loss;
    metrics.epochs.push_back(em);

    if (em.val_acc > metrics.best_val_acc || metrics.best_epoch < 0) {
      metrics.best_val_acc = em.val_acc;
      metrics.best_epoch = epoch;
      if (!ckpt_path.empty()) {
        std::vector<ParamRef<T>> refs;
        driver.collect_checkpoint(refs);
        save_checkpoint(ckpt_path, stage_checkpoint(driver.manifest, refs));
      }
    }
  }
  if (!out_dir.empty()) {
    const std::int64_t gates = metrics.epochs.empty()
                                   ? 0
                                   : static_cast<std::int64_t>(metrics.epochs[0].gate_means.size());
    write_text_file(out_dir + "/metrics.csv", metrics_csv(metrics, gates));
  }
  return metrics;
}

// ---------------------------------------------------------------------------
// Ablation grid and distractor-robustness sweep
// ---------------------------------------------------------------------------

struct AblationCell {
  std::int64_t ad = 1, aw = 1;
  bool gates = true;  // false: both gate levels replaced by uniform weights
  MaskKind mask = MaskKind::Softmax;
  bool reg = true;  // false: gamma = 0
};

struct AblationResult {
  AblationCell cell;
  double val_acc = 0, test_acc = 0;
};

struct GridSpec {
  std::vector<std::int64_t> ad_list{1};
  std::vector<std::int64_t> aw_list{1};
  std::vector<int> gates_list{1};
  std::vector<MaskKind> mask_list{MaskKind::Softmax};
  std::vector<int> reg_list{1};

  std::size_t cells() const {
    return ad_list.size() * aw_list.size() * gates_list.size() * mask_list.size() *
           reg_list.size();
  }
};

inline std::string ablation_csv(const std::vector<AblationResult>& rows) {
  std::string out = "ad,aw,gates,mask,reg,val_acc,test_acc\n";
  for (const auto& r : rows) {
    out += std::to_string(r.cell.ad) + "," + std::to_string(r.cell.aw) + "," +
           (r.cell.gates ? "gates" : "no-gates") + "," + mask_kind_name(r.cell.mask) + "," +
           (r.cell.reg ? "reg" : "no-reg") + "," + detail::fmt_g(r.val_acc) + "," +
           detail::fmt_g(r.test_acc) + "\n";
  }
  return out;
}

/// One seeded training run per grid cell; per-cell seeds derive from the
/// base seed and the cell index so the grid is reproducible cell by cell.
template <typename T>
std::vector<AblationResult> ablation_grid(const ModelConfig& base_cfg, const GridSpec& grid,
                                          const Dataset<T>& train_data,
                                          const Dataset<T>& val_data, const Dataset<T>& test_data,
                                          const TrainConfig& tcfg) {
  if (grid.cells() == 0) throw ConfigError("ablation grid: empty grid");
  std::vector<AblationResult> results;
  std::size_t cell_index = 0;
  for (auto ad : grid.ad_list)
    for (auto aw : grid.aw_list)
      for (int gates : grid.gates_list)
        for (auto mask : grid.mask_list)
          for (int reg : grid.reg_list) {
            ModelConfig mc = base_cfg;
            mc.ad = ad;
            mc.aw = aw;
            mc.mask = mask;
            mc.uniform_gates = gates == 0;
            mc.gamma = reg ? tcfg.gamma : 0.0;
            mc.init_seed = hash_combine(tcfg.seed, static_cast<std::uint64_t>(cell_index));
            TrainConfig cell_tcfg = tcfg;
            cell_tcfg.gamma = mc.gamma;
            cell_tcfg.seed = mc.init_seed;

            Rng rng(mc.init_seed);
            auto base = build_baseline<T>(mc, rng);
            auto model = attach_attention<T>(base, mc.ad, mc.aw, mc.mask, mc.gamma,
                                             mc.block_gradients, mc.labels, rng);
            model.uniform_gates = mc.uniform_gates;
            AugmentedDriver<T, BaseCnn<T>> driver{&model, {}, mc.to_manifest()};
            auto metrics = train(driver, train_data, val_data, cell_tcfg);
            auto test = evaluate(driver, test_data);
            AblationResult r;
            r.cell = {ad, aw, gates != 0, mask, reg != 0};
            r.val_acc = metrics.epochs.empty() ? 0.0 : metrics.best_val_acc;
            r.test_acc = test.accuracy;
            results.push_back(r);
            ++cell_index;
          }
  return results;
}

inline std::string sweep_csv(const std::vector<std::pair<int, double>>& rows) {
  std::string out = "distractors,test_acc\n";
  for (const auto& [d, acc] : rows) out += std::to_string(d) + "," + detail::fmt_g(acc) + "\n";
  return out;
}

/// Evaluates a trained model on regenerated test sets with varying
/// distractor counts. Per-index seeding keeps digit placement paired
/// across D values.
template <typename T, typename Driver>
std::vector<std::pair<int, double>> robustness_sweep(Driver& driver,
                                                     const ClutteredGenerator& gen,
                                                     const std::vector<int>& d_list) {
  std::vector<std::pair<int, double>> rows;
  for (int d : d_list) {
    auto test = to_float<T>(materialize(gen, Split::Test, d));
    auto r = evaluate(driver, test);
    rows.emplace_back(d, r.accuracy);
  }
  return rows;
}

}  // namespace gattn
