#pragma once

// Minimal reverse-mode autograd over dense double tensors.
//
// A Tensor is a shared handle to a graph node. Operations (see ops.hpp)
// create new nodes that remember their inputs while grad mode is enabled;
// backward() walks the graph from a scalar root in reverse topological order.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace rundet {

class Shape {
 public:
  Shape() = default;
  Shape(std::initializer_list<int> extents);
  explicit Shape(std::vector<int> extents);

  std::size_t rank() const { return extents_.size(); }
  int operator[](std::size_t axis) const { return extents_[axis]; }
  std::size_t numel() const;
  const std::vector<int>& extents() const { return extents_; }
  std::string str() const;

  friend bool operator==(const Shape&, const Shape&) = default;

 private:
  std::vector<int> extents_;
};

enum class OpKind : std::uint8_t {
  kLeaf,
  kConv2d,
  kDeconv2d,
  kMaxPool2d,
  kRelu,
  kL2Norm,
  kAdd,
  kConcatChannels,
  kAffine,
  kSoftmaxCE,
  kSmoothL1,
};

const char* op_name(OpKind kind);

class Tensor;

namespace detail {
struct Node;
Node& node_of(const Tensor& t);
}  // namespace detail

class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(const Shape& shape, bool requires_grad = false);
  static Tensor from(const Shape& shape, std::vector<double> values,
                     bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  std::size_t numel() const { return shape().numel(); }

  std::span<const double> data() const;
  std::span<double> mutable_data();
  double item() const;

  /// Accumulated gradient; all zeros when nothing has flowed into this node.
  std::span<const double> grad() const;
  std::span<double> mutable_grad();
  void zero_grad();

  bool requires_grad() const;
  void set_requires_grad(bool flag);

  OpKind op() const;
  const std::vector<Tensor>& inputs() const;

  /// Free-form tag used by structural audits (e.g. "branch2").
  const std::string& label() const;
  Tensor& set_label(std::string label);

  /// Stable identity of the underlying node.
  const void* id() const { return node_.get(); }

  friend bool same_node(const Tensor& a, const Tensor& b) {
    return a.node_ == b.node_;
  }

 private:
  friend Tensor make_result(OpKind, const Shape&, std::vector<Tensor>);
  friend void backward(const Tensor& loss);
  friend detail::Node& detail::node_of(const Tensor& t);
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}

  std::shared_ptr<detail::Node> node_;
};

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until first accumulation
  bool requires_grad = false;
  OpKind kind = OpKind::kLeaf;
  std::vector<Tensor> inputs;
  std::string label;
  // Propagates this node's grad into its inputs.
  std::function<void(const Node&)> backward_fn;

  std::span<double> grad_buffer() {
    if (grad.empty()) grad.assign(data.size(), 0.0);
    return grad;
  }
};

// Grad buffer of an input tensor (allocated on demand).
std::span<double> grad_of(const Tensor& t);

}  // namespace detail

/// Builds an op result. Inputs are recorded only while grad mode is enabled;
/// requires_grad is the OR of the inputs' flags under the same condition.
Tensor make_result(OpKind kind, const Shape& shape, std::vector<Tensor> inputs);

/// Runs reverse-mode accumulation from a scalar (single element) root.
/// Seeds d(loss)/d(loss) = 1 and adds into every reachable grad buffer.
void backward(const Tensor& loss);

bool grad_enabled();

/// Disables graph recording within its scope (inference).
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

/// A named trainable tensor. Freezing clears requires_grad so no gradient is
/// computed for it, and optimizers skip it.
class Param {
 public:
  Param(std::string name, Tensor tensor);

  const std::string& name() const { return name_; }
  const Tensor& tensor() const { return tensor_; }
  Tensor& tensor() { return tensor_; }
  bool frozen() const { return frozen_; }
  void set_frozen(bool frozen);

 private:
  std::string name_;
  Tensor tensor_;
  bool frozen_ = false;
};

/// Ordered parameter registry. Creation order is the serialization order.
class ParamStore {
 public:
  Tensor add(const std::string& name, const Shape& shape);

  std::size_t size() const { return params_.size(); }
  std::vector<Param>& params() { return params_; }
  const std::vector<Param>& params() const { return params_; }

  Param* find(const std::string& name);
  const Param* find(const std::string& name) const;

  void zero_grad();
  std::size_t total_elements() const;
  std::size_t trainable_elements() const;
  /// Freezes every parameter for which `pred(name)` is true; unfreezes others.
  void freeze_where(const std::function<bool(const std::string&)>& pred);

 private:
  std::vector<Param> params_;
};

}  // namespace rundet
