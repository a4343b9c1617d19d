#pragma once

#include "stormlatent/tensor.hpp"

#include <functional>

namespace stormlatent {

using ScalarFunction = std::function<Tensor(const Tensor&)>;

// Central differences (f(x+h e_i) - f(x-h e_i)) / 2h for every coordinate of x.
// Throws if f is non-finite at a probe point, naming the coordinate.
Array finite_difference_gradient(const ScalarFunction& f, const Tensor& x, double h = 1e-5);

// Reverse-mode gradient of f at x (x is copied into a fresh leaf).
Array autodiff_gradient(const ScalarFunction& f, const Tensor& x);

// max|a-b| / max(max|a|, max|b|, floor): normwise relative error in the max norm.
double max_relative_error(const Array& a, const Array& b, double floor = 1e-8);

}  // namespace stormlatent
