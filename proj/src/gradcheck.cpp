#include "stormlatent/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

namespace stormlatent {

Array finite_difference_gradient(const ScalarFunction& f, const Tensor& x, double h) {
  if (!(h > 0.0)) throw std::invalid_argument("finite_difference_gradient: step must be positive");
  NoGradGuard no_grad;
  Array base = x.value();
  Array out(base.size());
  for (Index i = 0; i < base.size(); ++i) {
    Array probe = base;
    probe[i] = base[i] + h;
    const double up = f(Tensor::from(x.shape(), probe)).item();
    probe[i] = base[i] - h;
    const double down = f(Tensor::from(x.shape(), probe)).item();
    if (!std::isfinite(up) || !std::isfinite(down)) {
      throw std::domain_error("finite_difference_gradient: non-finite value at coordinate " + std::to_string(i));
    }
    out[i] = (up - down) / (2.0 * h);
  }
  return out;
}

Array autodiff_gradient(const ScalarFunction& f, const Tensor& x) {
  Tensor leaf = Tensor::from(x.shape(), x.value(), true);
  Tensor y = f(leaf);
  y.backward();
  return leaf.grad();
}

double max_relative_error(const Array& a, const Array& b, double floor) {
  if (a.size() != b.size()) throw std::invalid_argument("max_relative_error: size mismatch");
  if (a.size() == 0) return 0.0;
  const double scale = std::max({a.abs().maxCoeff(), b.abs().maxCoeff(), floor});
  return (a - b).abs().maxCoeff() / scale;
}

}  // namespace stormlatent
