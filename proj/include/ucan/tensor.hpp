#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "ucan/errors.hpp"

namespace ucan {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

/// Raised when an operation produces NaN or Inf.
class NonFiniteError : public Error {
 public:
  using Error::Error;
};

namespace detail {

struct Node;
using NodePtr = std::shared_ptr<Node>;

/// Propagates `self.grad` into the gradients of `self.inputs`.
using BackwardFn = std::function<void(Node& self)>;

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;
  bool requires_grad = false;
  std::vector<NodePtr> inputs;
  BackwardFn backward;

  bool is_leaf() const { return inputs.empty(); }
  std::vector<double>& ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
    return grad;
  }
};

}  // namespace detail

/// Dense row-major f64 array with an optional gradient slot.
///
/// A Tensor is a cheap handle; copies share the underlying storage. Values are
/// treated as immutable once produced by an operation. Leaves (parameters,
/// inputs) may be updated in place through `mutable_data()` between episodes.
class Tensor {
 public:
  Tensor();
  explicit Tensor(Shape shape, bool requires_grad = false);
  Tensor(Shape shape, std::vector<double> values, bool requires_grad = false);

  static Tensor scalar(double value, bool requires_grad = false);
  static Tensor vector(std::vector<double> values, bool requires_grad = false);

  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const;

  std::span<const double> data() const;
  std::span<double> mutable_data();
  double operator[](std::size_t i) const { return data()[i]; }
  double item() const;

  bool requires_grad() const;
  bool is_leaf() const;
  /// Gradient buffer; all zeros when backward never reached this tensor.
  std::span<const double> grad() const;
  void zero_grad();

  /// Reverse-mode pass from a scalar root. Gradients accumulate into leaves.
  void backward() const;

  /// Copy of the values with no graph history.
  Tensor detach(bool requires_grad = false) const;
  /// Differentiable reshape; element count must match.
  Tensor reshape(Shape shape) const;

  /// Builds the result of a custom operation. When no input requires a
  /// gradient the result is a constant and `fn` is dropped.
  static Tensor from_op(Shape shape, std::vector<double> values,
                        std::initializer_list<Tensor> inputs,
                        detail::BackwardFn fn);
  static Tensor from_op(Shape shape, std::vector<double> values,
                        const std::vector<Tensor>& inputs,
                        detail::BackwardFn fn);

  const detail::NodePtr& node() const { return node_; }

 private:
  explicit Tensor(detail::NodePtr node) : node_(std::move(node)) {}
  detail::NodePtr node_;
};

/// Topologically ordered record of the operations reachable from a root.
/// Each node appears once, inputs before the nodes that consume them.
class Graph {
 public:
  static Graph trace(const Tensor& root);

  std::size_t size() const { return order_.size(); }
  const std::vector<detail::Node*>& nodes() const { return order_; }

  /// Seeds d(root)/d(root) = 1 and runs every recorded backward rule once,
  /// in reverse topological order.
  void run_backward();

 private:
  detail::NodePtr root_;
  std::vector<detail::Node*> order_;
};

}  // namespace ucan
