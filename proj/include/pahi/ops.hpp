#pragma once

#include <span>

#include "pahi/tensor.hpp"

namespace pahi {

// Differentiable primitives. Shapes follow these rules:
//   matmul   [m,k] x [k,n] -> [m,n]
//   add/subtract/multiply   identical shapes
//   add_row  [m,n] + [n] -> [m,n]   (the only broadcast)
//   sum/mean any -> scalar (shape [])
//   reshape  any -> any shape with the same element count
// Elementwise unary ops keep the input shape.

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor add(const Tensor& a, const Tensor& b);
Tensor subtract(const Tensor& a, const Tensor& b);
Tensor multiply(const Tensor& a, const Tensor& b);
Tensor tanh(const Tensor& x);
Tensor exp(const Tensor& x);
Tensor log(const Tensor& x);
Tensor square(const Tensor& x);
Tensor softplus(const Tensor& x);
Tensor negate(const Tensor& x);
Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
Tensor add_row(const Tensor& x, const Tensor& row);
Tensor reshape(const Tensor& x, Shape shape);

/// Dispatches on an op tag; unary kinds take one input, binary kinds two.
Tensor apply_primitive(OpKind kind, std::span<const Tensor> inputs);

// Composites built from the primitives above.

/// x * c for a constant c.
Tensor scale(const Tensor& x, double c);
/// [m,n] -> [m,1] row sums.
Tensor row_sum(const Tensor& x);
/// [n] -> [count,n] by stacking the row.
Tensor tile_rows(const Tensor& row, std::size_t count);

/// Numerically stable log(1 + e^x).
double softplus_value(double x);
double sigmoid_value(double x);

}  // namespace pahi
