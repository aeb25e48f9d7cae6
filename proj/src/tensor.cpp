#include "ucan/tensor.hpp"

#include <cmath>
#include <sstream>
#include <unordered_set>

namespace ucan {

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

namespace {

void check_finite(const std::vector<double>& values) {
  for (double v : values) {
    if (!std::isfinite(v)) throw NonFiniteError("operation produced a non-finite value");
  }
}

detail::NodePtr make_leaf(Shape shape, std::vector<double> values, bool requires_grad) {
  if (shape_numel(shape) != values.size()) {
    throw DimensionError("tensor shape " + shape_str(shape) + " does not match " +
                         std::to_string(values.size()) + " values");
  }
  check_finite(values);
  auto node = std::make_shared<detail::Node>();
  node->shape = std::move(shape);
  node->value = std::move(values);
  node->requires_grad = requires_grad;
  return node;
}

}  // namespace

Tensor::Tensor() : node_(make_leaf({}, {0.0}, false)) {}

Tensor::Tensor(Shape shape, bool requires_grad) {
  auto n = shape_numel(shape);
  node_ = make_leaf(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
}

Tensor::Tensor(Shape shape, std::vector<double> values, bool requires_grad)
    : node_(make_leaf(std::move(shape), std::move(values), requires_grad)) {}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return Tensor(Shape{}, {value}, requires_grad);
}

Tensor Tensor::vector(std::vector<double> values, bool requires_grad) {
  Shape s{values.size()};
  return Tensor(std::move(s), std::move(values), requires_grad);
}

const Shape& Tensor::shape() const { return node_->shape; }

std::size_t Tensor::dim(std::size_t axis) const {
  if (axis >= node_->shape.size()) {
    throw DimensionError("axis " + std::to_string(axis) + " out of range for " +
                         shape_str(node_->shape));
  }
  return node_->shape[axis];
}

std::size_t Tensor::numel() const { return node_->value.size(); }

std::span<const double> Tensor::data() const { return node_->value; }

std::span<double> Tensor::mutable_data() {
  if (!node_->is_leaf()) throw ContractError("mutable_data() is only allowed on leaf tensors");
  return node_->value;
}

double Tensor::item() const {
  if (numel() != 1) throw ContractError("item() needs a single-element tensor, got " + shape_str(shape()));
  return node_->value[0];
}

bool Tensor::requires_grad() const { return node_->requires_grad; }
bool Tensor::is_leaf() const { return node_->is_leaf(); }

std::span<const double> Tensor::grad() const {
  return node_->ensure_grad();
}

void Tensor::zero_grad() { node_->grad.assign(node_->value.size(), 0.0); }

void Tensor::backward() const {
  if (numel() != 1) {
    throw ContractError("backward() needs a scalar root, got " + shape_str(shape()));
  }
  if (!requires_grad()) throw ContractError("backward() root does not depend on any gradient leaf");
  Graph::trace(*this).run_backward();
}

Tensor Tensor::detach(bool requires_grad) const {
  return Tensor(node_->shape, node_->value, requires_grad);
}

Tensor Tensor::reshape(Shape shape) const {
  if (shape_numel(shape) != numel()) {
    throw DimensionError("cannot reshape " + shape_str(this->shape()) + " to " + shape_str(shape));
  }
  return from_op(std::move(shape), node_->value, {*this}, [](detail::Node& self) {
    auto& in = *self.inputs[0];
    if (!in.requires_grad) return;
    auto& g = in.ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

Tensor Tensor::from_op(Shape shape, std::vector<double> values,
                       std::initializer_list<Tensor> inputs, detail::BackwardFn fn) {
  return from_op(std::move(shape), std::move(values), std::vector<Tensor>(inputs), std::move(fn));
}

Tensor Tensor::from_op(Shape shape, std::vector<double> values, const std::vector<Tensor>& inputs,
                       detail::BackwardFn fn) {
  auto node = make_leaf(std::move(shape), std::move(values), false);
  bool any = false;
  for (const auto& t : inputs) any = any || t.requires_grad();
  if (any) {
    node->requires_grad = true;
    node->inputs.reserve(inputs.size());
    for (const auto& t : inputs) node->inputs.push_back(t.node());
    node->backward = std::move(fn);
  }
  return Tensor(std::move(node));
}

Graph Graph::trace(const Tensor& root) {
  Graph g;
  g.root_ = root.node();
  std::unordered_set<const detail::Node*> seen;
  // Iterative post-order DFS; only nodes that carry gradients are recorded.
  std::vector<std::pair<detail::Node*, std::size_t>> stack;
  if (g.root_->requires_grad) stack.emplace_back(g.root_.get(), 0);
  seen.insert(g.root_.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      detail::Node* child = node->inputs[next++].get();
      if (child->requires_grad && seen.insert(child).second) stack.emplace_back(child, 0);
    } else {
      g.order_.push_back(node);
      stack.pop_back();
    }
  }
  return g;
}

void Graph::run_backward() {
  if (order_.empty()) return;
  // Interior gradients are per-pass scratch; leaves accumulate.
  for (auto* n : order_) {
    if (!n->is_leaf()) n->grad.assign(n->value.size(), 0.0);
  }
  auto& rg = root_->ensure_grad();
  for (auto& v : rg) v += 1.0;
  for (auto it = order_.rbegin(); it != order_.rend(); ++it) {
    if ((*it)->backward) (*it)->backward(**it);
  }
}

}  // namespace ucan
