#pragma once

#include "stormlatent/gradcheck.hpp"
#include "stormlatent/model.hpp"
#include "stormlatent/tensor.hpp"

#include <cmath>
#include <random>

namespace testing {

using namespace stormlatent;

inline Tensor random_tensor(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  Array v(numel(shape));
  for (Index i = 0; i < v.size(); ++i) v[i] = u(rng);
  return Tensor::from(std::move(shape), std::move(v));
}

// Values bounded away from zero, for kinked functions (abs, leaky relu).
inline Tensor random_away_from_zero(Shape shape, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.05, 1.0);
  std::bernoulli_distribution sign(0.5);
  Array v(numel(shape));
  for (Index i = 0; i < v.size(); ++i) v[i] = sign(rng) ? u(rng) : -u(rng);
  return Tensor::from(std::move(shape), std::move(v));
}

// A fixed random linear functional of the output, so every output element
// contributes a distinct weight to the scalar being differentiated.
inline Tensor probe(const Tensor& y, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  Tensor w = random_tensor(y.shape(), rng);
  return sum(mul(y, w));
}

inline double gradient_error(const ScalarFunction& f, const Tensor& x) {
  return max_relative_error(autodiff_gradient(f, x), finite_difference_gradient(f, x, 1e-5));
}

// Smallest configuration that exercises every model path; cheap enough for
// coordinate-wise finite differences.
inline ModelConfig tiny_config() {
  ModelConfig c;
  c.height = 16;
  c.width = 16;
  c.coarse_height = 8;
  c.coarse_width = 8;
  c.latent_channels = 4;
  c.time_channels = 2;
  c.const_channels = 2;
  c.feature_channels = 2;
  c.recon_hidden = 3;
  c.vit_patch = 2;
  c.vit_width = 8;
  c.vit_heads = 2;
  c.vit_blocks = 1;
  c.lpm_blocks = 1;
  c.projector_patch = 2;
  return c;
}

// Copy of `p` whose parameter `name` is the given tensor (shares the others).
inline ModelParams with_param(const ModelParams& p, const std::string& name, const Tensor& value) {
  ModelParams q = p;
  q.store.at(name) = value;
  return q;
}

}  // namespace testing
