#pragma once

#include <algorithm>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <utility>
#include <vector>

#include "gattn/common.hpp"
#include "gattn/rng.hpp"

namespace gattn {

template <typename T>
class Tape;

template <typename T>
struct TensorPayload {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;   // persistent accumulated gradient; sized lazily
  std::vector<T> bgrad;  // scratch gradient for one backward pass
  bool requires_grad = false;
  Tape<T>* tape = nullptr;  // producing tape, if recorded
  std::int64_t step = -1;   // index of the producing step on that tape
};

/// Dense n-dimensional array with reverse-mode autodiff linkage. Cheap to
/// copy: a Tensor is a shared handle to its payload. Values are treated as
/// immutable once consumed by an op; parameters are mutated only between
/// forward passes (optimizer steps).
template <typename T>
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape) {
    return from_data(std::move(shape), {});
  }

  static Tensor full(Shape shape, T v) {
    Tensor t = zeros(std::move(shape));
    std::fill(t.data().begin(), t.data().end(), v);
    return t;
  }

  static Tensor scalar(T v) { return full({1}, v); }

  static Tensor from_data(Shape shape, std::vector<T> values) {
    auto p = std::make_shared<TensorPayload<T>>();
    const std::int64_t n = numel_of(shape);
    if (n < 0) throw ShapeError("tensor: negative extent in " + shape_str(shape));
    if (values.empty()) {
      values.assign(static_cast<std::size_t>(n), T(0));
    } else if (static_cast<std::int64_t>(values.size()) != n) {
      throw ShapeError("tensor: " + std::to_string(values.size()) +
                       " values for shape " + shape_str(shape));
    }
    p->shape = std::move(shape);
    p->value = std::move(values);
    return Tensor(std::move(p));
  }

  /// He-normal initialization: N(0, sqrt(2 / fan_in)).
  static Tensor he_normal(Shape shape, std::int64_t fan_in, Rng& rng) {
    Tensor t = zeros(std::move(shape));
    const double stddev = std::sqrt(2.0 / static_cast<double>(fan_in));
    for (auto& v : t.data()) v = static_cast<T>(rng.normal(0.0, stddev));
    return t;
  }

  static Tensor uniform(Shape shape, T lo, T hi, Rng& rng) {
    Tensor t = zeros(std::move(shape));
    for (auto& v : t.data()) v = static_cast<T>(rng.uniform(lo, hi));
    return t;
  }

  bool defined() const { return static_cast<bool>(p_); }
  const Shape& shape() const { return p_->shape; }
  std::int64_t rank() const { return static_cast<std::int64_t>(p_->shape.size()); }
  std::int64_t dim(std::int64_t i) const { return p_->shape[static_cast<std::size_t>(i)]; }
  std::int64_t numel() const { return static_cast<std::int64_t>(p_->value.size()); }

  std::vector<T>& data() { return p_->value; }
  const std::vector<T>& data() const { return p_->value; }

  T item() const {
    if (numel() != 1)
      throw ValueError("item(): tensor has " + std::to_string(numel()) + " elements");
    return p_->value[0];
  }

  /// Row-major element access; for tests and small utilities, not kernels.
  T at(std::initializer_list<std::int64_t> idx) const {
    const Shape& s = p_->shape;
    if (idx.size() != s.size())
      throw ShapeError("at(): " + std::to_string(idx.size()) + " indices for rank " +
                       std::to_string(s.size()));
    std::int64_t flat = 0;
    std::size_t k = 0;
    for (auto i : idx) {
      flat = flat * s[k] + i;
      ++k;
    }
    return p_->value[static_cast<std::size_t>(flat)];
  }

  bool requires_grad() const { return p_->requires_grad; }

  Tensor& set_requires_grad(bool b = true) {
    p_->requires_grad = b;
    return *this;
  }

  bool has_grad() const { return !p_->grad.empty(); }

  /// Accumulated gradient; zero-filled buffer is allocated on first use.
  std::vector<T>& grad() {
    if (p_->grad.empty()) p_->grad.assign(p_->value.size(), T(0));
    return p_->grad;
  }
  const std::vector<T>& grad() const {
    return const_cast<Tensor*>(this)->grad();
  }

  void zero_grad() {
    std::fill(p_->grad.begin(), p_->grad.end(), T(0));
  }

  const std::shared_ptr<TensorPayload<T>>& payload() const { return p_; }

 private:
  explicit Tensor(std::shared_ptr<TensorPayload<T>> p) : p_(std::move(p)) {}
  std::shared_ptr<TensorPayload<T>> p_;
};

/// Per-backward-pass scratch state. Op closures pull the upstream gradient of
/// their output with incoming() and add into inputs with acc(); keeping these
/// buffers separate from the persistent .grad makes repeated backward calls
/// accumulate exactly additively.
template <typename T>
struct BackwardCtx {
  std::vector<std::shared_ptr<TensorPayload<T>>> touched;

  std::vector<T>& acc(const std::shared_ptr<TensorPayload<T>>& p) {
    if (p->bgrad.empty()) {
      p->bgrad.assign(p->value.size(), T(0));
      touched.push_back(p);
    }
    return p->bgrad;
  }

  const std::vector<T>* incoming(const std::shared_ptr<TensorPayload<T>>& p) const {
    return p->bgrad.empty() ? nullptr : &p->bgrad;
  }
};

/// Recording of one forward pass: an ordered list of primitive applications.
/// Appending order is execution order, so replaying in reverse visits each
/// node exactly once in valid topological order. Single-owner; recording is
/// active between construction and destruction (stack discipline).
template <typename T>
class Tape {
 public:
  Tape() : prev_(active_ref()) { active_ref() = this; }
  ~Tape() { active_ref() = prev_; }
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape* active() { return active_ref(); }

  std::int64_t record(std::function<void(BackwardCtx<T>&)> fn) {
    steps_.push_back(std::move(fn));
    return static_cast<std::int64_t>(steps_.size()) - 1;
  }

  std::size_t size() const { return steps_.size(); }

  /// Reverse-mode sweep from a scalar loss. Gradients are accumulated into
  /// the persistent .grad of every requires-grad tensor reached; calling
  /// again without zeroing adds the same contribution a second time.
  void backward(const Tensor<T>& loss) {
    if (loss.numel() != 1)
      throw ValueError("backward: loss must be scalar, got shape " + shape_str(loss.shape()));
    const auto& lp = loss.payload();
    if (lp->tape != this || lp->step < 0)
      throw ValueError("backward: loss is not connected to this tape");
    BackwardCtx<T> ctx;
    ctx.acc(lp)[0] = T(1);
    for (std::int64_t i = lp->step; i >= 0; --i) {
      steps_[static_cast<std::size_t>(i)](ctx);
    }
    for (auto& p : ctx.touched) {
      if (p->requires_grad) {
        if (p->grad.empty()) p->grad.assign(p->value.size(), T(0));
        for (std::size_t k = 0; k < p->grad.size(); ++k) p->grad[k] += p->bgrad[k];
      }
      p->bgrad = std::vector<T>();
    }
  }

 private:
  static Tape*& active_ref() {
    thread_local Tape* active = nullptr;
    return active;
  }

  std::vector<std::function<void(BackwardCtx<T>&)>> steps_;
  Tape* prev_ = nullptr;
};

template <typename T>
void backward(const Tensor<T>& loss) {
  Tape<T>* tape = loss.payload()->tape;
  if (!tape)
    throw ValueError("backward: loss is not connected to a tape");
  tape->backward(loss);
}

/// Registers `out` as the result of a recorded op when a tape is active and
/// any input requires grad. `fn` is the backward closure.
template <typename T, typename F>
void mark_recorded(Tensor<T>& out, std::initializer_list<const Tensor<T>*> inputs, F&& fn) {
  Tape<T>* tape = Tape<T>::active();
  if (!tape) return;
  bool needs = false;
  for (const Tensor<T>* in : inputs)
    if (in && in->defined() && in->requires_grad()) needs = true;
  if (!needs) return;
  out.set_requires_grad(true);
  out.payload()->tape = tape;
  out.payload()->step =
      tape->record(std::function<void(BackwardCtx<T>&)>(std::forward<F>(fn)));
}

}  // namespace gattn
