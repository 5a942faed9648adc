#include "pahi/ops.hpp"

#include <cmath>
#include <limits>
#include <utility>

namespace pahi {

namespace {

using detail::Node;
using Rule = std::function<void(Node&)>;

void check_finite([[maybe_unused]] OpKind kind, [[maybe_unused]] const std::vector<double>& values) {
#ifndef NDEBUG
  for (double v : values) {
    if (!std::isfinite(v)) {
      throw DomainError(std::string(op_name(kind)) + " produced a non-finite value");
    }
  }
#endif
}

Tensor record(OpKind kind, Shape shape, std::vector<double> values, std::vector<Tensor> inputs, Rule rule) {
  check_finite(kind, values);
  Tensor out = Tensor::from(std::move(shape), std::move(values));
  bool tracked = false;
  for (const auto& in : inputs) tracked = tracked || in.requires_grad();
  if (!tracked) return out;
  auto& node = *out.node();
  node.kind = kind;
  node.requires_grad = true;
  for (auto& in : inputs) node.inputs.push_back(in.node());
  node.backward_rule = std::move(rule);
  return out;
}

void require_same_shape(OpKind kind, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op_name(kind)) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                     shape_string(b.shape()));
  }
}

template <class Forward, class Derivative>
Tensor unary(OpKind kind, const Tensor& x, Forward f, Derivative df) {
  std::vector<double> out(x.size());
  auto in = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(in[i]);
  return record(kind, x.shape(), std::move(out), {x}, [df](Node& self) {
    Node& a = *self.inputs[0];
    if (!a.requires_grad) return;
    auto& g = a.ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * df(a.data[i], self.data[i]);
  });
}

}  // namespace

double softplus_value(double x) {
  // log(1 + e^x) = max(x, 0) + log1p(e^{-|x|})
  return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x)));
}

double sigmoid_value(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0]) {
    throw ShapeError("matmul: cannot multiply " + shape_string(a.shape()) + " by " + shape_string(b.shape()));
  }
  const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  std::vector<double> out(m * n, 0.0);
  auto A = a.data();
  auto B = b.data();
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = A[i * k + p];
      const double* brow = &B[p * n];
      double* orow = &out[i * n];
      for (std::size_t j = 0; j < n; ++j) orow[j] += aip * brow[j];
    }
  }
  return record(OpKind::matmul, {m, n}, std::move(out), {a, b}, [m, k, n](Node& self) {
    Node& lhs = *self.inputs[0];
    Node& rhs = *self.inputs[1];
    const auto& G = self.grad;
    if (lhs.requires_grad) {
      auto& ga = lhs.ensure_grad();  // G B^T
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          double acc = 0.0;
          for (std::size_t j = 0; j < n; ++j) acc += G[i * n + j] * rhs.data[p * n + j];
          ga[i * k + p] += acc;
        }
    }
    if (rhs.requires_grad) {
      auto& gb = rhs.ensure_grad();  // A^T G
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          const double aip = lhs.data[i * k + p];
          for (std::size_t j = 0; j < n; ++j) gb[p * n + j] += aip * G[i * n + j];
        }
    }
  });
}

namespace {

template <class Combine>
Tensor binary(OpKind kind, const Tensor& a, const Tensor& b, Combine f, double sign_b) {
  require_same_shape(kind, a, b);
  std::vector<double> out(a.size());
  auto A = a.data();
  auto B = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(A[i], B[i]);
  return record(kind, a.shape(), std::move(out), {a, b}, [sign_b](Node& self) {
    for (int side = 0; side < 2; ++side) {
      Node& in = *self.inputs[side];
      if (!in.requires_grad) continue;
      auto& g = in.ensure_grad();
      const double s = side == 0 ? 1.0 : sign_b;
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += s * self.grad[i];
    }
  });
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  return binary(OpKind::add, a, b, [](double x, double y) { return x + y; }, 1.0);
}

Tensor subtract(const Tensor& a, const Tensor& b) {
  return binary(OpKind::subtract, a, b, [](double x, double y) { return x - y; }, -1.0);
}

Tensor multiply(const Tensor& a, const Tensor& b) {
  require_same_shape(OpKind::multiply, a, b);
  std::vector<double> out(a.size());
  auto A = a.data();
  auto B = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = A[i] * B[i];
  return record(OpKind::multiply, a.shape(), std::move(out), {a, b}, [](Node& self) {
    Node& x = *self.inputs[0];
    Node& y = *self.inputs[1];
    if (x.requires_grad) {
      auto& g = x.ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * y.data[i];
    }
    if (y.requires_grad) {
      auto& g = y.ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * x.data[i];
    }
  });
}

Tensor tanh(const Tensor& x) {
  return unary(
      OpKind::tanh, x, [](double v) { return std::tanh(v); }, [](double, double y) { return 1.0 - y * y; });
}

Tensor exp(const Tensor& x) {
  return unary(
      OpKind::exp, x, [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

Tensor log(const Tensor& x) {
  for (double v : x.data()) {
    if (!(v > 0.0)) throw DomainError("log: non-positive input " + std::to_string(v));
  }
  return unary(
      OpKind::log, x, [](double v) { return std::log(v); }, [](double v, double) { return 1.0 / v; });
}

Tensor square(const Tensor& x) {
  return unary(
      OpKind::square, x, [](double v) { return v * v; }, [](double v, double) { return 2.0 * v; });
}

Tensor softplus(const Tensor& x) {
  return unary(OpKind::softplus, x, softplus_value, [](double v, double) { return sigmoid_value(v); });
}

Tensor negate(const Tensor& x) {
  return unary(
      OpKind::negate, x, [](double v) { return -v; }, [](double, double) { return -1.0; });
}

Tensor sum(const Tensor& x) {
  double total = 0.0;
  for (double v : x.data()) total += v;
  return record(OpKind::sum, {}, {total}, {x}, [](Node& self) {
    Node& a = *self.inputs[0];
    if (!a.requires_grad) return;
    for (auto& g : a.ensure_grad()) g += self.grad[0];
  });
}

Tensor mean(const Tensor& x) {
  // Shifted by the first element: exact for constant inputs and less
  // cancellation when values are close together.
  const auto values = x.data();
  const double shift = values.empty() ? 0.0 : values[0];
  double total = 0.0;
  for (double v : values) total += v - shift;
  const double n = static_cast<double>(x.size());
  return record(OpKind::mean, {}, {shift + total / n}, {x}, [n](Node& self) {
    Node& a = *self.inputs[0];
    if (!a.requires_grad) return;
    for (auto& g : a.ensure_grad()) g += self.grad[0] / n;
  });
}

Tensor add_row(const Tensor& x, const Tensor& row) {
  if (x.rank() != 2 || row.rank() != 1 || row.shape()[0] != x.shape()[1]) {
    throw ShapeError("add_row: cannot broadcast " + shape_string(row.shape()) + " over rows of " +
                     shape_string(x.shape()));
  }
  const std::size_t m = x.shape()[0], n = x.shape()[1];
  std::vector<double> out(x.size());
  auto X = x.data();
  auto R = row.data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = X[i * n + j] + R[j];
  return record(OpKind::add_row, x.shape(), std::move(out), {x, row}, [m, n](Node& self) {
    Node& a = *self.inputs[0];
    Node& r = *self.inputs[1];
    if (a.requires_grad) {
      auto& g = a.ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (r.requires_grad) {
      auto& g = r.ensure_grad();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) g[j] += self.grad[i * n + j];
    }
  });
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.size()) {
    throw ShapeError("reshape: cannot view " + shape_string(x.shape()) + " as " + shape_string(shape));
  }
  return record(OpKind::reshape, std::move(shape), x.to_vector(), {x}, [](Node& self) {
    Node& a = *self.inputs[0];
    if (!a.requires_grad) return;
    auto& g = a.ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

Tensor apply_primitive(OpKind kind, std::span<const Tensor> inputs) {
  auto need = [&](std::size_t n) {
    if (inputs.size() != n) {
      throw std::invalid_argument(std::string(op_name(kind)) + " takes " + std::to_string(n) + " input(s), got " +
                                  std::to_string(inputs.size()));
    }
  };
  switch (kind) {
    case OpKind::matmul: need(2); return matmul(inputs[0], inputs[1]);
    case OpKind::add: need(2); return add(inputs[0], inputs[1]);
    case OpKind::subtract: need(2); return subtract(inputs[0], inputs[1]);
    case OpKind::multiply: need(2); return multiply(inputs[0], inputs[1]);
    case OpKind::add_row: need(2); return add_row(inputs[0], inputs[1]);
    case OpKind::tanh: need(1); return tanh(inputs[0]);
    case OpKind::exp: need(1); return exp(inputs[0]);
    case OpKind::log: need(1); return log(inputs[0]);
    case OpKind::square: need(1); return square(inputs[0]);
    case OpKind::softplus: need(1); return softplus(inputs[0]);
    case OpKind::negate: need(1); return negate(inputs[0]);
    case OpKind::sum: need(1); return sum(inputs[0]);
    case OpKind::mean: need(1); return mean(inputs[0]);
    case OpKind::leaf:
    case OpKind::reshape:
      break;
  }
  throw std::invalid_argument(std::string("apply_primitive: unsupported kind ") + op_name(kind));
}

Tensor scale(const Tensor& x, double c) { return multiply(x, Tensor::full(x.shape(), c)); }

Tensor row_sum(const Tensor& x) {
  if (x.rank() != 2) throw ShapeError("row_sum: expected a matrix, got " + shape_string(x.shape()));
  return matmul(x, Tensor::full({x.shape()[1], 1}, 1.0));
}

Tensor tile_rows(const Tensor& row, std::size_t count) {
  if (row.rank() != 1) throw ShapeError("tile_rows: expected a vector, got " + shape_string(row.shape()));
  return matmul(Tensor::full({count, 1}, 1.0), reshape(row, {1, row.size()}));
}

}  // namespace pahi
