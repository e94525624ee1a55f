#include "rundet/tensor.hpp"

#include <algorithm>
#include <numeric>
#include <sstream>
#include <unordered_set>

#include "rundet/errors.hpp"

namespace rundet {

namespace {
thread_local bool g_grad_enabled = true;
}

Shape::Shape(std::initializer_list<int> extents) : Shape(std::vector<int>(extents)) {}

Shape::Shape(std::vector<int> extents) : extents_(std::move(extents)) {
  for (int e : extents_) {
    if (e < 1) throw DimensionError("tensor extents must be >= 1, got " + str());
  }
}

std::size_t Shape::numel() const {
  if (extents_.empty()) return 0;
  return std::accumulate(extents_.begin(), extents_.end(), std::size_t{1},
                         [](std::size_t acc, int e) { return acc * static_cast<std::size_t>(e); });
}

std::string Shape::str() const {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < extents_.size(); ++i) os << (i ? "," : "") << extents_[i];
  os << ')';
  return os.str();
}

const char* op_name(OpKind kind) {
  switch (kind) {
    case OpKind::kLeaf: return "leaf";
    case OpKind::kConv2d: return "conv2d";
    case OpKind::kDeconv2d: return "deconv2d";
    case OpKind::kMaxPool2d: return "maxpool2d";
    case OpKind::kRelu: return "relu";
    case OpKind::kL2Norm: return "l2norm";
    case OpKind::kAdd: return "add";
    case OpKind::kConcatChannels: return "concat";
    case OpKind::kAffine: return "affine";
    case OpKind::kSoftmaxCE: return "softmax_ce";
    case OpKind::kSmoothL1: return "smooth_l1";
  }
  return "?";
}

// ---- Tensor ---------------------------------------------------------------

Tensor Tensor::zeros(const Shape& shape, bool requires_grad) {
  if (shape.rank() == 0) throw DimensionError("tensor needs rank >= 1");
  auto node = std::make_shared<detail::Node>();
  node->shape = shape;
  node->data.assign(shape.numel(), 0.0);
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

Tensor Tensor::from(const Shape& shape, std::vector<double> values, bool requires_grad) {
  if (values.size() != shape.numel()) {
    throw DimensionError("value count " + std::to_string(values.size()) +
                         " does not match shape " + shape.str());
  }
  Tensor t = zeros(shape, requires_grad);
  t.node_->data = std::move(values);
  return t;
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return from(Shape{1}, {value}, requires_grad);
}

const Shape& Tensor::shape() const { return node_->shape; }
std::span<const double> Tensor::data() const { return node_->data; }
std::span<double> Tensor::mutable_data() { return node_->data; }

double Tensor::item() const {
  if (numel() != 1) throw ContractError("item() on tensor of shape " + shape().str());
  return node_->data[0];
}

std::span<const double> Tensor::grad() const { return node_->grad_buffer(); }
std::span<double> Tensor::mutable_grad() { return node_->grad_buffer(); }

void Tensor::zero_grad() {
  std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
}

bool Tensor::requires_grad() const { return node_->requires_grad; }
void Tensor::set_requires_grad(bool flag) { node_->requires_grad = flag; }
OpKind Tensor::op() const { return node_->kind; }
const std::vector<Tensor>& Tensor::inputs() const { return node_->inputs; }
const std::string& Tensor::label() const { return node_->label; }

Tensor& Tensor::set_label(std::string label) {
  node_->label = std::move(label);
  return *this;
}

namespace detail {
Node& node_of(const Tensor& t) { return *t.node_; }
std::span<double> grad_of(const Tensor& t) { return node_of(t).grad_buffer(); }
}  // namespace detail

// ---- graph ----------------------------------------------------------------

Tensor make_result(OpKind kind, const Shape& shape, std::vector<Tensor> inputs) {
  Tensor out = Tensor::zeros(shape);
  detail::Node& node = *out.node_;
  node.kind = kind;
  if (g_grad_enabled) {
    node.requires_grad = std::any_of(inputs.begin(), inputs.end(),
                                     [](const Tensor& t) { return t.requires_grad(); });
    node.inputs = std::move(inputs);
  }
  return out;
}

void backward(const Tensor& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw ContractError("backward() requires a scalar root, got shape " +
                        (loss.defined() ? loss.shape().str() : std::string("<undefined>")));
  }
  if (!loss.requires_grad()) return;

  // Iterative post-order DFS gives a topological order (inputs before users).
  std::vector<detail::Node*> order;
  std::unordered_set<const detail::Node*> visited;
  std::vector<std::pair<detail::Node*, std::size_t>> stack;
  stack.emplace_back(loss.node_.get(), 0);
  visited.insert(loss.node_.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      detail::Node* child = node->inputs[next++].node_.get();
      if (child->requires_grad && visited.insert(child).second) stack.emplace_back(child, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  // Interior grads are per-call scratch; only leaves accumulate across calls.
  for (detail::Node* node : order) {
    if (node->kind != OpKind::kLeaf) node->grad.clear();
  }
  loss.node_->grad_buffer()[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    detail::Node& node = **it;
    if (node.backward_fn && !node.grad.empty()) node.backward_fn(node);
  }
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

// ---- parameters -------------------------------------------------------------

Param::Param(std::string name, Tensor tensor) : name_(std::move(name)), tensor_(std::move(tensor)) {
  tensor_.set_requires_grad(true);
}

void Param::set_frozen(bool frozen) {
  frozen_ = frozen;
  tensor_.set_requires_grad(!frozen);
}

Tensor ParamStore::add(const std::string& name, const Shape& shape) {
  if (find(name) != nullptr) throw ContractError("duplicate parameter name: " + name);
  params_.emplace_back(name, Tensor::zeros(shape, true));
  return params_.back().tensor();
}

Param* ParamStore::find(const std::string& name) {
  auto it = std::find_if(params_.begin(), params_.end(),
                         [&](const Param& p) { return p.name() == name; });
  return it == params_.end() ? nullptr : &*it;
}

const Param* ParamStore::find(const std::string& name) const {
  return const_cast<ParamStore*>(this)->find(name);
}

void ParamStore::zero_grad() {
  for (auto& p : params_) p.tensor().zero_grad();
}

std::size_t ParamStore::total_elements() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.tensor().numel();
  return n;
}

std::size_t ParamStore::trainable_elements() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.frozen() ? 0 : p.tensor().numel();
  return n;
}

void ParamStore::freeze_where(const std::function<bool(const std::string&)>& pred) {
  for (auto& p : params_) p.set_frozen(pred(p.name()));
}

}  // namespace rundet
