#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "subformer/rng.hpp"

namespace subformer {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_string(const Shape& shape);

namespace detail {
struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until first accumulation
  bool requires_grad = false;
};
}  // namespace detail

// Dense row-major float64 array. Copies are cheap handles that alias the same
// storage; clone() makes an independent copy.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  std::size_t rank() const { return impl_->shape.size(); }
  std::size_t dim(std::size_t axis) const { return impl_->shape.at(axis); }
  std::size_t numel() const { return impl_->data.size(); }

  std::span<const double> data() const { return impl_->data; }
  // Writable view for initialisers, optimisers and finite differences.
  std::span<double> mutable_data() const { return impl_->data; }
  double item() const;
  double at(std::size_t flat) const { return impl_->data[flat]; }

  bool requires_grad() const { return impl_->requires_grad; }
  void set_requires_grad(bool flag) const { impl_->requires_grad = flag; }

  bool has_grad() const { return !impl_->grad.empty(); }
  std::span<const double> grad() const { return impl_->grad; }
  // Allocates a zero gradient on first use.
  std::span<double> mutable_grad() const;
  void zero_grad() const;

  Tensor clone() const;

  bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }
  const void* id() const { return impl_.get(); }

 private:
  explicit Tensor(std::shared_ptr<detail::TensorImpl> impl) : impl_(std::move(impl)) {}
  std::shared_ptr<detail::TensorImpl> impl_;
};

// Ordered record of differentiable operations for the current thread.
// Operations are appended only when recording is enabled and at least one
// input requires a gradient.
class Tape {
 public:
  struct Node {
    Tensor output;
    std::function<void()> backward;
  };

  static Tape& current();

  void record(Tensor output, std::function<void()> backward);
  std::size_t size() const { return nodes_.size(); }
  void clear() { nodes_.clear(); }

  // Resets every intermediate gradient, seeds d(loss)=1, then runs the
  // recorded rules in exact reverse order. Leaf gradients accumulate across
  // calls.
  void backward(const Tensor& loss);

  bool recording() const { return recording_; }
  void set_recording(bool on) { recording_ = on; }

 private:
  std::vector<Node> nodes_;
  bool recording_ = true;
};

// Disables tape recording for the lifetime of the guard.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(Tape::current().recording()) { Tape::current().set_recording(false); }
  ~NoGradGuard() { Tape::current().set_recording(previous_); }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

void backward(const Tensor& loss);

// ---- operations -----------------------------------------------------------

// a: [..., k], b: [k, n] -> [..., n]. Leading axes of `a` are flattened.
Tensor matmul(const Tensor& a, const Tensor& b);
// a: [..., k], b: [n, k] -> [..., n], i.e. a * b^T.
Tensor matmul_nt(const Tensor& a, const Tensor& b);
// Batched: a [B, m, k] x b [B, k, n] -> [B, m, n].
Tensor bmm(const Tensor& a, const Tensor& b);
// Batched a * b^T: a [B, m, k] x b [B, n, k] -> [B, m, n].
Tensor bmm_nt(const Tensor& a, const Tensor& b);

// Elementwise with broadcasting of `b` when b is a scalar or its shape is a
// trailing suffix of a's shape.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor add(const Tensor& a, double b);
Tensor scale(const Tensor& a, double factor);

Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);

Tensor softmax(const Tensor& x, std::size_t axis);
Tensor softmax(const Tensor& x);  // last axis

// Normalises over the last axis. gamma and beta have the last extent.
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5);

Tensor gelu(const Tensor& x);
Tensor relu(const Tensor& x);

// Row gather from table [V, d] -> [ids.size(), d].
Tensor embedding_lookup(const Tensor& table, std::span<const int> ids);

// Copy with a new shape of identical element count.
Tensor reshape(const Tensor& x, Shape shape);

// [B, n, H*dh] -> [B*H, n, dh] and back.
Tensor split_heads(const Tensor& x, std::size_t heads);
Tensor merge_heads(const Tensor& x, std::size_t heads);

// scores: [B*H, n, m]; allowed: B*n*m flags (row-major per batch entry),
// shared by the H heads of each batch entry. Disallowed entries become -inf.
Tensor mask_fill(const Tensor& scores, std::span<const unsigned char> allowed, std::size_t heads);

// Inverted dropout. Identity when p == 0.
Tensor dropout(const Tensor& x, double p, Rng& rng);

// Mean smoothed negative log-likelihood over rows whose target is not
// `ignore_id`. Target weight 1-eps, every other class eps/(V-1).
Tensor cross_entropy(const Tensor& logits, std::span<const int> targets, double label_smoothing = 0.0,
                     std::optional<int> ignore_id = std::nullopt);

}  // namespace subformer
