#pragma once

// Named parameters and the small layer vocabulary the model is built from.

#include "stormlatent/serialize.hpp"
#include "stormlatent/tensor.hpp"

#include <cstdint>
#include <random>
#include <string>
#include <unordered_map>
#include <vector>

namespace stormlatent {

// Ordered collection of trainable tensors addressed by dotted names.
class ParamStore {
 public:
  // Registers a leaf with requires_grad set. Names must be unique.
  Tensor& add(const std::string& name, Tensor value);
  const Tensor& operator[](const std::string& name) const;
  Tensor& at(const std::string& name);
  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  std::size_t size() const { return entries_.size(); }
  const NamedTensors& entries() const { return entries_; }
  NamedTensors& entries() { return entries_; }
  // Total scalar count of tensors whose name starts with `prefix`.
  Index count(const std::string& prefix = "") const;
  void zero_grad();

  // Copies values from `source`; names and shapes must match exactly.
  void assign(const NamedTensors& source);

 private:
  NamedTensors entries_;
  std::unordered_map<std::string, std::size_t> index_;
};

// Per-forward state: train/eval mode and a dropout seed stream.
struct RunContext {
  bool train = false;
  double dropout = 0.0;
  std::uint64_t seed = 0;
  std::uint64_t calls = 0;

  std::uint64_t next_seed();
  static RunContext eval() { return {}; }
};

// Centered uniform fan-in initialization.
class Initializer {
 public:
  explicit Initializer(std::uint64_t seed) : rng_(seed) {}
  Tensor uniform(Shape shape, Index fan_in);
  std::mt19937_64& rng() { return rng_; }

 private:
  std::mt19937_64 rng_;
};

// ---- registration --------------------------------------------------------------

void add_conv(ParamStore& ps, Initializer& init, const std::string& name, Index in, Index out, Index k,
              bool zero = false);
void add_linear(ParamStore& ps, Initializer& init, const std::string& name, Index in, Index out);
void add_norm(ParamStore& ps, const std::string& name, Index channels);
void add_multi_scale_block(ParamStore& ps, Initializer& init, const std::string& name, Index channels);
void add_attention(ParamStore& ps, Initializer& init, const std::string& name, Index dim, Index inner);
void add_mlp(ParamStore& ps, Initializer& init, const std::string& name, Index in, Index hidden, Index out);

// ---- forward -------------------------------------------------------------------

Tensor conv(const ParamStore& ps, const std::string& name, const Tensor& x, Index stride = 1);
// tokens [N,in] -> [N,out]
Tensor linear(const ParamStore& ps, const std::string& name, const Tensor& x);
Tensor norm_last(const ParamStore& ps, const std::string& name, const Tensor& x);
// conv -> group norm (2 groups) -> SiLU
Tensor conv_block(const ParamStore& ps, const std::string& name, const Tensor& x);
// x + Conv1x1(cat(ConvBlock3x3(x), ConvBlock5x5(x)))
Tensor multi_scale_block(const ParamStore& ps, const std::string& name, const Tensor& x);

// Multi-head self-attention over tokens [N,dim]. If `weights` is given it
// receives one [N,N] row-stochastic matrix per head.
Tensor attention(const ParamStore& ps, const std::string& name, const Tensor& tokens, Index heads, RunContext& ctx,
                 std::vector<Tensor>* weights = nullptr);
// Linear -> GELU -> Linear, dropout on the output.
Tensor mlp(const ParamStore& ps, const std::string& name, const Tensor& x, RunContext& ctx);

}  // namespace stormlatent
