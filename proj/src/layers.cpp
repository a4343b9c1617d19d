#include "stormlatent/layers.hpp"

#include <cmath>
#include <stdexcept>

namespace stormlatent {

Tensor& ParamStore::add(const std::string& name, Tensor value) {
  if (index_.count(name)) throw std::logic_error("duplicate parameter " + name);
  value.set_requires_grad(true);
  index_[name] = entries_.size();
  entries_.emplace_back(name, std::move(value));
  return entries_.back().second;
}

const Tensor& ParamStore::operator[](const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw std::out_of_range("no parameter named '" + name + "'");
  return entries_[it->second].second;
}

Tensor& ParamStore::at(const std::string& name) {
  auto it = index_.find(name);
  if (it == index_.end()) throw std::out_of_range("no parameter named '" + name + "'");
  return entries_[it->second].second;
}

Index ParamStore::count(const std::string& prefix) const {
  Index n = 0;
  for (const auto& [name, t] : entries_)
    if (name.compare(0, prefix.size(), prefix) == 0) n += t.numel();
  return n;
}

void ParamStore::zero_grad() {
  for (auto& [name, t] : entries_) t.zero_grad();
}

void ParamStore::assign(const NamedTensors& source) {
  if (source.size() != entries_.size())
    throw std::runtime_error("parameter count mismatch: expected " + std::to_string(entries_.size()) + ", got " +
                             std::to_string(source.size()));
  for (auto& [name, t] : entries_) {
    const Tensor& s = find_tensor(source, name);
    if (s.shape() != t.shape())
      throw std::runtime_error("shape mismatch for " + name + ": expected " + shape_string(t.shape()) + ", got " +
                               shape_string(s.shape()));
    t.mutable_value() = s.value();
  }
}

std::uint64_t RunContext::next_seed() {
  // splitmix64 step over (seed, call counter)
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (++calls);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

Tensor Initializer::uniform(Shape shape, Index fan_in) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  std::uniform_real_distribution<double> u(-bound, bound);
  Array v(numel(shape));
  for (Index i = 0; i < v.size(); ++i) v[i] = u(rng_);
  return Tensor::from(std::move(shape), std::move(v));
}

void add_conv(ParamStore& ps, Initializer& init, const std::string& name, Index in, Index out, Index k, bool zero) {
  if (zero) {
    ps.add(name + ".w", Tensor::zeros({out, in, k, k}));
  } else {
    ps.add(name + ".w", init.uniform({out, in, k, k}, in * k * k));
  }
  ps.add(name + ".b", Tensor::zeros({out}));
}

void add_linear(ParamStore& ps, Initializer& init, const std::string& name, Index in, Index out) {
  ps.add(name + ".w", init.uniform({in, out}, in));
  ps.add(name + ".b", Tensor::zeros({out}));
}

void add_norm(ParamStore& ps, const std::string& name, Index channels) {
  ps.add(name + ".g", Tensor::full({channels}, 1.0));
  ps.add(name + ".b", Tensor::zeros({channels}));
}

void add_multi_scale_block(ParamStore& ps, Initializer& init, const std::string& name, Index channels) {
  if (channels % 2 != 0) throw std::invalid_argument(name + ": channel count must be even for 2-group norm");
  for (Index k : {3, 5}) {
    const std::string branch = name + ".b" + std::to_string(k);
    add_conv(ps, init, branch + ".conv", channels, channels, k);
    add_norm(ps, branch + ".norm", channels);
  }
  add_conv(ps, init, name + ".merge", 2 * channels, channels, 1);
}

void add_attention(ParamStore& ps, Initializer& init, const std::string& name, Index dim, Index inner) {
  for (const char* p : {".q", ".k", ".v"}) add_linear(ps, init, name + p, dim, inner);
  add_linear(ps, init, name + ".o", inner, dim);
}

void add_mlp(ParamStore& ps, Initializer& init, const std::string& name, Index in, Index hidden, Index out) {
  add_linear(ps, init, name + ".fc1", in, hidden);
  add_linear(ps, init, name + ".fc2", hidden, out);
}

Tensor conv(const ParamStore& ps, const std::string& name, const Tensor& x, Index stride) {
  const Tensor& w = ps[name + ".w"];
  if (x.rank() != 3 || x.dim(0) != w.dim(1))
    throw std::invalid_argument(name + ": expected " + std::to_string(w.dim(1)) + " input channels, got " +
                                shape_string(x.shape()));
  return conv2d(x, w, ps[name + ".b"], stride);
}

Tensor linear(const ParamStore& ps, const std::string& name, const Tensor& x) {
  return broadcast_add(matmul(x, ps[name + ".w"]), ps[name + ".b"], 1);
}

Tensor norm_last(const ParamStore& ps, const std::string& name, const Tensor& x) {
  return layer_norm(x, ps[name + ".g"], ps[name + ".b"]);
}

Tensor conv_block(const ParamStore& ps, const std::string& name, const Tensor& x) {
  Tensor y = conv(ps, name + ".conv", x);
  y = group_norm(y, 2, ps[name + ".norm.g"], ps[name + ".norm.b"]);
  return silu(y);
}

Tensor multi_scale_block(const ParamStore& ps, const std::string& name, const Tensor& x) {
  Tensor a = conv_block(ps, name + ".b3", x);
  Tensor b = conv_block(ps, name + ".b5", x);
  return x + conv(ps, name + ".merge", concat({a, b}, 0));
}

Tensor attention(const ParamStore& ps, const std::string& name, const Tensor& tokens, Index heads, RunContext& ctx,
                 std::vector<Tensor>* weights) {
  Tensor q = linear(ps, name + ".q", tokens);
  Tensor k = linear(ps, name + ".k", tokens);
  Tensor v = linear(ps, name + ".v", tokens);
  const Index inner = q.dim(1);
  if (inner % heads != 0) throw std::invalid_argument(name + ": width not divisible by head count");
  const Index d = inner / heads;
  const double scale_factor = 1.0 / std::sqrt(static_cast<double>(d));
  std::vector<Tensor> outs;
  for (Index h = 0; h < heads; ++h) {
    Tensor qh = slice(q, 1, h * d, (h + 1) * d);
    Tensor kh = slice(k, 1, h * d, (h + 1) * d);
    Tensor vh = slice(v, 1, h * d, (h + 1) * d);
    Tensor a = softmax(scale(matmul(qh, transpose(kh)), scale_factor));
    if (weights) weights->push_back(a);
    outs.push_back(matmul(a, vh));
  }
  Tensor y = linear(ps, name + ".o", heads == 1 ? outs[0] : concat(outs, 1));
  return dropout(y, ctx.dropout, ctx.train, ctx.train ? ctx.next_seed() : 0);
}

Tensor mlp(const ParamStore& ps, const std::string& name, const Tensor& x, RunContext& ctx) {
  Tensor y = linear(ps, name + ".fc2", gelu(linear(ps, name + ".fc1", x)));
  return dropout(y, ctx.dropout, ctx.train, ctx.train ? ctx.next_seed() : 0);
}

}  // namespace stormlatent
