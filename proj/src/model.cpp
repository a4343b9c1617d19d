#include "stormlatent/model.hpp"

#include <cmath>
#include <stdexcept>

namespace stormlatent {

void ModelConfig::validate() const {
  auto require = [](bool ok, const std::string& what) {
    if (!ok) throw std::invalid_argument("model config: " + what);
  };
  require(height > 0 && width > 0 && height % 4 == 0 && width % 4 == 0, "grid must be a positive multiple of 4");
  require(coarse_height > 0 && coarse_width > 0, "coarse grid must be positive");
  require(latent_height() % vit_patch == 0 && latent_width() % vit_patch == 0,
          "latent grid not divisible by vit_patch");
  require(latent_height() % projector_patch == 0 && latent_width() % projector_patch == 0,
          "latent grid not divisible by projector_patch");
  require(latent_channels % 2 == 0 && feature_channels % 2 == 0 && recon_hidden > 0,
          "latent/feature channels must be even");
  require(time_channels % 2 == 0 && time_channels > 0, "time_channels must be even and positive");
  require(const_channels > 0, "const_channels must be positive");
  require(vit_heads > 0 && vit_width % vit_heads == 0, "vit_width must be divisible by vit_heads");
  require(projector_heads > 0 && 64 % projector_heads == 0, "projector_heads must divide 64");
  require(vit_blocks >= 0 && lpm_blocks >= 0, "block counts must be nonnegative");
}

// ---- ViT ----------------------------------------------------------------------------

void add_vit(ParamStore& ps, Initializer& init, const std::string& prefix, const VitShape& s) {
  if (s.patch <= 0 || s.height % s.patch != 0 || s.width % s.patch != 0)
    throw std::invalid_argument(prefix + ": extent not divisible by patch " + std::to_string(s.patch));
  const Index tokens = (s.height / s.patch) * (s.width / s.patch);
  const Index patch_dim = s.patch * s.patch * s.channels;
  add_linear(ps, init, prefix + ".embed", patch_dim, s.token_width);
  ps.add(prefix + ".pos", init.uniform({tokens, s.token_width}, s.token_width));
  for (Index b = 0; b < s.blocks; ++b) {
    const std::string blk = prefix + ".blk" + std::to_string(b);
    add_norm(ps, blk + ".ln1", s.token_width);
    add_attention(ps, init, blk + ".attn", s.token_width, s.token_width);
    add_norm(ps, blk + ".ln2", s.token_width);
    add_mlp(ps, init, blk + ".mlp", s.token_width, 2 * s.token_width, s.token_width);
  }
  add_norm(ps, prefix + ".ln", s.token_width);
  add_mlp(ps, init, prefix + ".head", s.token_width, 2 * s.token_width, patch_dim);
}

Tensor vit_forward(const ParamStore& ps, const std::string& prefix, const VitShape& s, const Tensor& z,
                   RunContext& ctx, std::vector<Tensor>* attention_weights) {
  if (z.rank() != 3 || z.dim(0) != s.channels || z.dim(1) != s.height || z.dim(2) != s.width)
    throw std::invalid_argument(prefix + ": unexpected input " + shape_string(z.shape()));
  Tensor x = linear(ps, prefix + ".embed", patchify(z, s.patch)) + ps[prefix + ".pos"];
  for (Index b = 0; b < s.blocks; ++b) {
    const std::string blk = prefix + ".blk" + std::to_string(b);
    x = attention(ps, blk + ".attn", norm_last(ps, blk + ".ln1", x), s.heads, ctx, attention_weights) + x;
    Tensor n = norm_last(ps, blk + ".ln2", x);
    x = mlp(ps, blk + ".mlp", n, ctx) + n;
  }
  x = norm_last(ps, prefix + ".ln", x);
  x = linear(ps, prefix + ".head.fc2", gelu(linear(ps, prefix + ".head.fc1", x)));
  return unpatchify(x, s.channels, s.height, s.width, s.patch);
}

// ---- LPM ----------------------------------------------------------------------------

void add_lpm(ParamStore& ps, Initializer& init, const std::string& prefix, const LpmShape& s) {
  for (Index b = 0; b < s.blocks; ++b) add_multi_scale_block(ps, init, prefix + ".pre" + std::to_string(b), s.in_channels);
  add_conv(ps, init, prefix + ".fuse", s.in_channels, s.hidden, 3);
  add_vit(ps, init, prefix + ".vit", s.vit);
  for (Index b = 0; b < s.blocks; ++b) add_multi_scale_block(ps, init, prefix + ".post" + std::to_string(b), s.hidden);
  if (s.hidden != s.out_channels) add_conv(ps, init, prefix + ".head", s.hidden, s.out_channels, 3);
}

Tensor lpm_forward(const ParamStore& ps, const std::string& prefix, const LpmShape& s, const Tensor& stacked,
                   RunContext& ctx) {
  if (stacked.dim(0) != s.in_channels)
    throw std::invalid_argument(prefix + ": expected " + std::to_string(s.in_channels) + " stacked channels");
  Tensor x = stacked;
  for (Index b = 0; b < s.blocks; ++b) x = multi_scale_block(ps, prefix + ".pre" + std::to_string(b), x);
  x = conv(ps, prefix + ".fuse", x);
  x = vit_forward(ps, prefix + ".vit", s.vit, x, ctx);
  for (Index b = 0; b < s.blocks; ++b) x = multi_scale_block(ps, prefix + ".post" + std::to_string(b), x);
  if (s.hidden != s.out_channels) x = conv(ps, prefix + ".head", x);
  return x;
}

Tensor time_embedding(Index time_index, Index channels, Index height, Index width) {
  if (channels % 2 != 0) throw std::invalid_argument("time embedding needs an even channel count");
  Array v(channels * height * width);
  const Index plane = height * width;
  for (Index j = 0; j < channels / 2; ++j) {
    const double omega = std::pow(1000.0, -2.0 * static_cast<double>(j) / static_cast<double>(channels));
    const double t = static_cast<double>(time_index);
    v.segment(2 * j * plane, plane).setConstant(std::sin(t * omega));
    v.segment((2 * j + 1) * plane, plane).setConstant(std::cos(t * omega));
  }
  return Tensor::from({channels, height, width}, std::move(v));
}

// ---- model --------------------------------------------------------------------------

LpmShape latent_lpm_shape(const ModelConfig& c) {
  const Index step_channels = c.latent_channels + c.time_channels + c.const_channels;
  return {2 * step_channels,
          c.latent_channels,
          c.latent_channels,
          c.lpm_blocks,
          {c.latent_channels, c.latent_height(), c.latent_width(), c.vit_patch, c.vit_width, c.vit_heads,
           c.vit_blocks}};
}

VitShape projector_shape(const ModelConfig& c) {
  return {c.latent_channels, c.latent_height(), c.latent_width(), c.projector_patch, 64, c.projector_heads, 0};
}

std::string lpm_prefix(int delta) {
  if (delta != 1 && delta != 2 && delta != 4) throw std::invalid_argument("unknown interval " + std::to_string(delta));
  return "lpm" + std::to_string(delta);
}

namespace {

void add_fine_branch(ParamStore& ps, Initializer& init, const std::string& prefix, Index in, Index f) {
  add_conv(ps, init, prefix + ".stem", in, f, 3);
  add_multi_scale_block(ps, init, prefix + ".ms0", f);
  add_multi_scale_block(ps, init, prefix + ".ms1", f);
  add_conv(ps, init, prefix + ".down0", f, f, 3);
  add_multi_scale_block(ps, init, prefix + ".ms2", f);
  add_multi_scale_block(ps, init, prefix + ".ms3", f);
  add_conv(ps, init, prefix + ".down1", f, f, 3);
}

Tensor fine_branch(const ParamStore& ps, const std::string& prefix, const Tensor& x) {
  Tensor y = conv(ps, prefix + ".stem", x);
  y = multi_scale_block(ps, prefix + ".ms0", y);
  y = multi_scale_block(ps, prefix + ".ms1", y);
  y = conv(ps, prefix + ".down0", y, 2);
  y = multi_scale_block(ps, prefix + ".ms2", y);
  y = multi_scale_block(ps, prefix + ".ms3", y);
  return conv(ps, prefix + ".down1", y, 2);
}

void check_grid(const Tensor& t, Index channels, Index h, Index w, const std::string& what) {
  if (!t.defined()) throw std::invalid_argument("missing " + what + " stack");
  if (t.rank() != 3 || t.dim(0) != channels || t.dim(1) != h || t.dim(2) != w)
    throw std::invalid_argument(what + ": expected " + shape_string({channels, h, w}) + ", got " +
                                shape_string(t.shape()));
}

void add_recon_head(ParamStore& ps, Initializer& init, const std::string& prefix, const ModelConfig& c, Index out) {
  add_conv(ps, init, prefix + ".c1", c.latent_channels, c.recon_hidden, 3);
  add_conv(ps, init, prefix + ".c2", c.recon_hidden, out, 3);
}

Tensor recon_head(const ParamStore& ps, const std::string& prefix, const Tensor& h, Index out_h, Index out_w) {
  Tensor y = conv(ps, prefix + ".c2", leaky_relu(conv(ps, prefix + ".c1", h)));
  return resize_bilinear(y, out_h, out_w);
}

}  // namespace

ModelParams ModelParams::init(const ModelConfig& c, std::uint64_t seed) {
  c.validate();
  ModelParams p;
  p.config = c;
  Initializer init(seed);
  ParamStore& ps = p.store;
  const Index f = c.feature_channels;

  add_fine_branch(ps, init, "encoder.qpe", c.qpe_channels, f);
  if (c.use_satellite) add_fine_branch(ps, init, "encoder.satellite", c.satellite_channels, f);
  add_conv(ps, init, "encoder.reanalysis.stem", c.reanalysis_channels, f, 3);
  for (int b = 0; b < 4; ++b) add_multi_scale_block(ps, init, "encoder.reanalysis.ms" + std::to_string(b), f);
  add_conv(ps, init, "encoder.out", (c.use_satellite ? 3 : 2) * f, c.latent_channels, 3);

  ps.add("const_embed", init.uniform({c.const_channels, c.latent_height(), c.latent_width()}, c.const_channels));
  for (int d : kIntervals) add_lpm(ps, init, lpm_prefix(d), latent_lpm_shape(c));

  add_multi_scale_block(ps, init, "projector.ms", c.latent_channels);
  const VitShape pj = projector_shape(c);
  const Index patch_dim = pj.patch * pj.patch * pj.channels;
  add_norm(ps, "projector.ln", patch_dim);
  add_attention(ps, init, "projector.attn", patch_dim, pj.token_width);
  add_conv(ps, init, "projector.out", c.latent_channels, 1, 3, /*zero=*/true);

  add_recon_head(ps, init, "reconstructor.qpe", c, c.qpe_channels);
  add_recon_head(ps, init, "reconstructor.reanalysis", c, c.reanalysis_channels);
  if (c.use_satellite) add_recon_head(ps, init, "reconstructor.satellite", c, c.satellite_channels);
  return p;
}

LatentState encode(const ModelParams& p, const MultiSourceSample& s) {
  const ModelConfig& c = p.config;
  const ParamStore& ps = p.store;
  check_grid(s.qpe_radar, c.qpe_channels, c.height, c.width, "qpe_radar");
  check_grid(s.reanalysis, c.reanalysis_channels, c.coarse_height, c.coarse_width, "reanalysis");

  std::vector<Tensor> features;
  features.push_back(fine_branch(ps, "encoder.qpe", s.qpe_radar));
  if (c.use_satellite) {
    if (s.has_satellite()) {
      check_grid(s.satellite, c.satellite_channels, c.height, c.width, "satellite");
      features.push_back(fine_branch(ps, "encoder.satellite", s.satellite));
    } else {
      features.push_back(Tensor::zeros({c.feature_channels, c.latent_height(), c.latent_width()}));
    }
  }
  Tensor r = conv(ps, "encoder.reanalysis.stem", s.reanalysis);
  for (int b = 0; b < 4; ++b) r = multi_scale_block(ps, "encoder.reanalysis.ms" + std::to_string(b), r);
  features.push_back(resize_bilinear(r, c.latent_height(), c.latent_width()));

  return {conv(ps, "encoder.out", concat(features, 0)), s.time_index};
}

LatentState lpm_predict(const ModelParams& p, int delta, const LatentState& a, const LatentState& b,
                        RunContext& ctx) {
  const std::string prefix = lpm_prefix(delta);
  if (b.time_index - a.time_index != delta)
    throw std::invalid_argument(prefix + ": inputs at " + std::to_string(a.time_index) + " and " +
                                std::to_string(b.time_index) + " are not spaced by " + std::to_string(delta));
  const ModelConfig& c = p.config;
  const Tensor& ce = p["const_embed"];
  const Index h = c.latent_height(), w = c.latent_width();
  Tensor stacked = concat({a.value, time_embedding(a.time_index, c.time_channels, h, w), ce, b.value,
                           time_embedding(b.time_index, c.time_channels, h, w), ce},
                          0);
  return {lpm_forward(p.store, prefix, latent_lpm_shape(c), stacked, ctx), b.time_index + delta};
}

Tensor project(const ModelParams& p, const Tensor& latent, RunContext& ctx) {
  const ModelConfig& c = p.config;
  check_grid(latent, c.latent_channels, c.latent_height(), c.latent_width(), "latent");
  const ParamStore& ps = p.store;
  const VitShape pj = projector_shape(c);
  Tensor h = multi_scale_block(ps, "projector.ms", latent);
  Tensor tok = patchify(h, pj.patch);
  tok = tok + attention(ps, "projector.attn", norm_last(ps, "projector.ln", tok), pj.heads, ctx);
  h = unpatchify(tok, pj.channels, pj.height, pj.width, pj.patch);
  return conv(ps, "projector.out", upsample_nearest(h, 4));
}

std::vector<Tensor> project_batch(const ModelParams& p, const std::vector<Tensor>& latents, RunContext& ctx) {
  std::vector<Tensor> out;
  out.reserve(latents.size());
  for (const auto& l : latents) out.push_back(project(p, l, ctx));
  return out;
}

Reconstruction reconstruct(const ModelParams& p, const Tensor& latent) {
  const ModelConfig& c = p.config;
  check_grid(latent, c.latent_channels, c.latent_height(), c.latent_width(), "latent");
  Reconstruction r;
  r.qpe_radar = recon_head(p.store, "reconstructor.qpe", latent, c.height, c.width);
  r.reanalysis = recon_head(p.store, "reconstructor.reanalysis", latent, c.coarse_height, c.coarse_width);
  if (c.use_satellite) r.satellite = recon_head(p.store, "reconstructor.satellite", latent, c.height, c.width);
  return r;
}

void save_checkpoint(const std::filesystem::path& path, const ParamStore& store) {
  save_archive(path, store.entries());
}

void load_checkpoint(const std::filesystem::path& path, ParamStore& store) { store.assign(load_archive(path)); }

}  // namespace stormlatent
