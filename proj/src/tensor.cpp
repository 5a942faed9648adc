#include "pahi/tensor.hpp"

#include <algorithm>
#include <sstream>
#include <unordered_set>
#include <utility>

namespace pahi {

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto extent : shape) n *= extent;
  return n;
}

std::string shape_string(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out << ',';
    out << shape[i];
  }
  out << ']';
  return out.str();
}

const char* op_name(OpKind kind) {
  switch (kind) {
    case OpKind::leaf: return "leaf";
    case OpKind::matmul: return "matmul";
    case OpKind::add: return "add";
    case OpKind::subtract: return "subtract";
    case OpKind::multiply: return "multiply";
    case OpKind::tanh: return "tanh";
    case OpKind::exp: return "exp";
    case OpKind::log: return "log";
    case OpKind::square: return "square";
    case OpKind::softplus: return "softplus";
    case OpKind::negate: return "negate";
    case OpKind::sum: return "sum";
    case OpKind::mean: return "mean";
    case OpKind::add_row: return "add_row";
    case OpKind::reshape: return "reshape";
  }
  return "unknown";
}

namespace detail {

std::vector<double>& Node::ensure_grad() {
  if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
  return grad;
}

}  // namespace detail

namespace {

std::shared_ptr<detail::Node> make_node(Shape shape, std::vector<double> values) {
  for (auto extent : shape) {
    if (extent == 0) throw ShapeError("tensor extents must be positive, got " + shape_string(shape));
  }
  if (shape_numel(shape) != values.size()) {
    throw ShapeError("shape " + shape_string(shape) + " holds " + std::to_string(shape_numel(shape)) +
                     " values, got " + std::to_string(values.size()));
  }
  auto node = std::make_shared<detail::Node>();
  node->shape = std::move(shape);
  node->data = std::move(values);
  return node;
}

}  // namespace

Tensor::Tensor() : node_(make_node({}, {0.0})) {}

Tensor::Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}

Tensor Tensor::zeros(Shape shape) { return full(std::move(shape), 0.0); }

Tensor Tensor::full(Shape shape, double value) {
  const auto n = shape_numel(shape);
  return Tensor(make_node(std::move(shape), std::vector<double>(n, value)));
}

Tensor Tensor::from(Shape shape, std::vector<double> values) {
  return Tensor(make_node(std::move(shape), std::move(values)));
}

Tensor Tensor::scalar(double value) { return Tensor(make_node({}, {value})); }

Tensor Tensor::vector(std::vector<double> values) {
  const Shape shape{values.size()};
  return Tensor(make_node(shape, std::move(values)));
}

Tensor Tensor::parameter(Shape shape, std::vector<double> values) {
  Tensor t = from(std::move(shape), std::move(values));
  t.node_->requires_grad = true;
  return t;
}

const Shape& Tensor::shape() const { return node_->shape; }
std::size_t Tensor::size() const { return node_->data.size(); }

std::size_t Tensor::rows() const {
  if (rank() == 0) throw ShapeError("rows() of a scalar");
  return shape()[0];
}

std::size_t Tensor::cols() const {
  if (rank() != 2) throw ShapeError("cols() needs a matrix, got " + shape_string(shape()));
  return shape()[1];
}

std::span<const double> Tensor::data() const { return node_->data; }
std::span<double> Tensor::mutable_data() { return node_->data; }

double Tensor::at(std::size_t i) const { return node_->data.at(i); }

double Tensor::at(std::size_t r, std::size_t c) const {
  return node_->data.at(r * cols() + c);
}

double Tensor::item() const {
  if (size() != 1) throw ShapeError("item() needs a single element, got " + shape_string(shape()));
  return node_->data[0];
}

std::vector<double> Tensor::to_vector() const { return node_->data; }

bool Tensor::requires_grad() const { return node_->requires_grad; }

void Tensor::set_requires_grad(bool on) {
  if (node_->kind != OpKind::leaf) throw std::logic_error("requires_grad can only be toggled on leaves");
  node_->requires_grad = on;
}

OpKind Tensor::kind() const { return node_->kind; }

std::vector<double> Tensor::grad() const {
  if (node_->grad.empty()) return std::vector<double>(size(), 0.0);
  return node_->grad;
}

bool Tensor::has_grad() const { return !node_->grad.empty(); }

void Tensor::zero_grad() { std::fill(node_->grad.begin(), node_->grad.end(), 0.0); }

Tensor Tensor::detach() const { return Tensor(make_node(shape(), node_->data)); }

Tensor Tensor::clone() const {
  Tensor t = detach();
  t.node_->requires_grad = node_->kind == OpKind::leaf && node_->requires_grad;
  return t;
}

void Tensor::backward() const {
  if (size() != 1) {
    throw ShapeError("backward() needs a scalar loss, got shape " + shape_string(shape()));
  }
  if (!node_->requires_grad) return;

  // Iterative post-order DFS gives a topological order (inputs before users).
  std::vector<detail::Node*> order;
  std::unordered_set<detail::Node*> visited;
  std::vector<std::pair<detail::Node*, std::size_t>> stack{{node_.get(), 0}};
  visited.insert(node_.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      detail::Node* child = node->inputs[next++].get();
      if (child->requires_grad && visited.insert(child).second) stack.emplace_back(child, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  for (auto* node : order) {
    if (node->kind != OpKind::leaf) node->grad.assign(node->data.size(), 0.0);
  }
  node_->ensure_grad()[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    detail::Node* node = *it;
    if (node->kind != OpKind::leaf && node->backward_rule) node->backward_rule(*node);
  }
}

void zero_grads(std::span<Tensor> tensors) {
  for (auto& t : tensors) t.zero_grad();
}

}  // namespace pahi
