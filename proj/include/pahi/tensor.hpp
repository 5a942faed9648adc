#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace pahi {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_string(const Shape& shape);

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class DomainError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

enum class OpKind {
  leaf,
  matmul,
  add,
  subtract,
  multiply,
  tanh,
  exp,
  log,
  square,
  softplus,
  negate,
  sum,
  mean,
  add_row,
  reshape,
};

const char* op_name(OpKind kind);

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until a backward pass touches it
  bool requires_grad = false;
  OpKind kind = OpKind::leaf;
  std::vector<std::shared_ptr<Node>> inputs;
  // Accumulates this node's grad into the grads of its inputs.
  std::function<void(Node&)> backward_rule;

  std::vector<double>& ensure_grad();
};

}  // namespace detail

/// Dense row-major array of doubles with optional membership in a
/// reverse-mode differentiation tape.
///
/// A Tensor is a handle: copies share the same storage and gradient. The tape
/// is rebuilt on every forward pass; an op records a node only when at least
/// one input requires a gradient, so inference code pays no tape cost.
class Tensor {
 public:
  Tensor();

  static Tensor zeros(Shape shape);
  static Tensor full(Shape shape, double value);
  static Tensor from(Shape shape, std::vector<double> values);
  static Tensor scalar(double value);
  static Tensor vector(std::vector<double> values);
  /// Leaf tensor that receives gradients.
  static Tensor parameter(Shape shape, std::vector<double> values);

  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t size() const;
  std::size_t rows() const;
  std::size_t cols() const;

  std::span<const double> data() const;
  /// Raw write access for optimizers and initializers. Never call on a tensor
  /// that is an input to a tape still awaiting backward().
  std::span<double> mutable_data();
  double at(std::size_t i) const;
  double at(std::size_t r, std::size_t c) const;
  double item() const;
  std::vector<double> to_vector() const;

  bool requires_grad() const;
  void set_requires_grad(bool on);
  OpKind kind() const;

  /// Gradient from the most recent backward passes; zeros when none reached
  /// this tensor.
  std::vector<double> grad() const;
  bool has_grad() const;
  void zero_grad();

  /// Same values, cut from the tape.
  Tensor detach() const;
  /// Deep copy of the values with a fresh (grad-free) node.
  Tensor clone() const;

  /// Back-propagates d(this)/d(.) into every reachable requires_grad tensor.
  /// Gradients accumulate into leaves; intermediate grads are reset first.
  void backward() const;

  bool same_node(const Tensor& other) const { return node_ == other.node_; }

  // Used by the primitive implementations.
  explicit Tensor(std::shared_ptr<detail::Node> node);
  const std::shared_ptr<detail::Node>& node() const { return node_; }

 private:
  std::shared_ptr<detail::Node> node_;
};

void zero_grads(std::span<Tensor> tensors);

}  // namespace pahi
