#pragma once

#include <functional>
#include <memory>
#include <span>
#include <vector>

#include "trida/tensor.hpp"

namespace trida {

struct Node {
  Tensor value;
  Tensor grad;  // allocated on first accumulation
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  Tensor& grad_buffer();
};

/// Handle to a node of a dynamically built reverse-mode graph.
///
/// Parameters are persistent leaves; every op creates a new node holding
/// its value and a closure that pushes the output gradient into its
/// parents. Graphs are released when the last handle to the root goes.
class Var {
 public:
  Var() = default;

  static Var constant(Tensor value);
  static Var parameter(Tensor value);
  static Var from_node(std::shared_ptr<Node> node);

  bool defined() const { return static_cast<bool>(node_); }
  const Tensor& value() const { return node_->value; }
  Tensor& mutable_value() { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  double item() const { return node_->value.item(); }

  bool requires_grad() const { return node_ && node_->requires_grad; }
  bool has_grad() const { return node_ && !node_->grad.empty(); }
  const Tensor& grad() const { return node_->grad; }
  void zero_grad();

  /// Seeds d(this)/d(this) = 1 and propagates through the graph.
  /// The root must hold a single value.
  void backward() const;

  const std::shared_ptr<Node>& node() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

bool grad_enabled();

/// Ops created while a guard is alive record no parents.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

/// Running statistics owned by a normalization layer.
struct NormStats {
  Tensor mean;
  Tensor var;
};

namespace ops {

Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double factor);
Var add_scalar(const Var& a, double value);

/// alpha * a + (1 - alpha) * b.
Var lerp(const Var& a, const Var& b, double alpha);

Var relu(const Var& x);
Var abs(const Var& x);
Var log(const Var& x, double eps = 0.0);
Var square(const Var& x);

Var reshape(const Var& x, Shape shape);
Var flatten(const Var& x);  // N x ... -> N x D
Var detach(const Var& x);

Var sum(const Var& x);
Var mean(const Var& x);
Var mean_rows(const Var& x);  // N x D -> 1 x D
Var sum_cols(const Var& x);   // N x D -> N x 1

/// x W^T + b with x: N x D, W: O x D, b: O (b may be undefined).
Var linear(const Var& x, const Var& weight, const Var& bias);

/// Weight-normalised rows: g_o * v_o / |v_o|.
Var weight_norm_rows(const Var& v, const Var& g);

/// 2-D convolution, x: N x C x H x W, weight: O x C x k x k.
Var conv2d(const Var& x, const Var& weight, const Var& bias, int stride, int pad);

/// Batch normalisation over every axis but 1. In training mode batch
/// moments normalise and, when `update` is given, the running statistics
/// receive a momentum update (unbiased variance); otherwise the running
/// statistics normalise.
Var batch_norm(const Var& x, const Var& gamma, const Var& beta, const NormStats& running, bool training,
               double eps, NormStats* update = nullptr, double momentum = 0.1);

/// Per-channel mean and biased variance over every axis but 1.
Var channel_mean(const Var& x);
Var channel_var(const Var& x);

Var softmax(const Var& logits);
Var log_softmax(const Var& logits);
Var l2_normalize_rows(const Var& x, double eps = 1e-12);

/// Mean cross-entropy against hard labels with optional label smoothing
/// (target = (1 - eps) one_hot + eps / K).
Var cross_entropy(const Var& logits, std::span<const int> labels, double smoothing = 0.0);

/// Mean binary cross-entropy of N x 1 logits against 0/1 targets.
Var bce_with_logits(const Var& logits, std::span<const double> targets);

/// Identity forward, gradient multiplied by -coeff.
Var grad_reverse(const Var& x, double coeff);

/// Mean squared forward difference along H plus along W, averaged over
/// the batch and channels, for N x C x H x W images.
Var total_variation(const Var& images);

}  // namespace ops

inline Var operator+(const Var& a, const Var& b) { return ops::add(a, b); }
inline Var operator-(const Var& a, const Var& b) { return ops::sub(a, b); }
inline Var operator*(const Var& a, const Var& b) { return ops::mul(a, b); }
inline Var operator*(double s, const Var& a) { return ops::scale(a, s); }
inline Var operator*(const Var& a, double s) { return ops::scale(a, s); }

}  // namespace trida
