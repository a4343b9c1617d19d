#pragma once

// Encoder, latent predictors (LPM), projector and reconstructor.
//
// Parameter names are grouped under encoder.*, lpm1.*, lpm2.*, lpm4.*,
// projector.*, reconstructor.* and const_embed.

#include "stormlatent/layers.hpp"
#include "stormlatent/synth.hpp"

#include <array>
#include <filesystem>

namespace stormlatent {

inline constexpr std::array<int, 3> kIntervals{1, 2, 4};

struct ModelConfig {
  Index height = 64;
  Index width = 64;
  Index coarse_height = 16;
  Index coarse_width = 16;
  Index qpe_channels = kQpeRadarChannels;
  Index reanalysis_channels = kReanalysisChannels;
  Index satellite_channels = kSatelliteChannels;
  bool use_satellite = true;

  Index latent_channels = 16;
  Index time_channels = 4;
  Index const_channels = 4;
  Index feature_channels = 8;  // per-modality encoder width
  Index recon_hidden = 16;

  Index vit_patch = 4;
  Index vit_width = 64;
  Index vit_heads = 2;
  Index vit_blocks = 2;
  Index lpm_blocks = 4;  // multi-scale blocks before and after the ViT
  Index projector_patch = 4;
  Index projector_heads = 2;

  Index latent_height() const { return height / 4; }
  Index latent_width() const { return width / 4; }
  void validate() const;
};

struct ModelParams {
  ModelConfig config;
  ParamStore store;

  static ModelParams init(const ModelConfig& config, std::uint64_t seed);
  const Tensor& operator[](const std::string& name) const { return store[name]; }
};

struct LatentState {
  Tensor value;  // [C_lat, H/4, W/4]
  Index time_index = 0;
};

struct Reconstruction {
  Tensor qpe_radar;   // [4,H,W]
  Tensor reanalysis;  // [8,Hc,Wc]
  Tensor satellite;   // [3,H,W] or undefined
};

// ---- generic building blocks (shared with the physical-space baseline) --------

struct VitShape {
  Index channels, height, width, patch, token_width, heads, blocks;
};
void add_vit(ParamStore& ps, Initializer& init, const std::string& prefix, const VitShape& s);
// Patch embedding + positional encoding -> transformer blocks -> norm + MLP -> patch recovery.
Tensor vit_forward(const ParamStore& ps, const std::string& prefix, const VitShape& s, const Tensor& z,
                   RunContext& ctx, std::vector<Tensor>* attention_weights = nullptr);

struct LpmShape {
  Index in_channels;  // channels of the stacked two-step input
  Index hidden;       // width after the two-step fusion
  Index out_channels;
  Index blocks;
  VitShape vit;
};
void add_lpm(ParamStore& ps, Initializer& init, const std::string& prefix, const LpmShape& s);
// stacked [in_channels,h,w] -> [out_channels,h,w]
Tensor lpm_forward(const ParamStore& ps, const std::string& prefix, const LpmShape& s, const Tensor& stacked,
                   RunContext& ctx);

// Sinusoidal features of the absolute step index, broadcast over the grid.
Tensor time_embedding(Index time_index, Index channels, Index height, Index width);

// ---- model operations -------------------------------------------------------------

LpmShape latent_lpm_shape(const ModelConfig& c);
VitShape projector_shape(const ModelConfig& c);
std::string lpm_prefix(int delta);

LatentState encode(const ModelParams& p, const MultiSourceSample& normalized);
// Predicts the latent at b.time_index + delta from (a, b) spaced delta apart.
LatentState lpm_predict(const ModelParams& p, int delta, const LatentState& a, const LatentState& b,
                        RunContext& ctx);
// Latent -> normalized intensity [1,H,W].
Tensor project(const ModelParams& p, const Tensor& latent, RunContext& ctx);
std::vector<Tensor> project_batch(const ModelParams& p, const std::vector<Tensor>& latents, RunContext& ctx);
Reconstruction reconstruct(const ModelParams& p, const Tensor& latent);

void save_checkpoint(const std::filesystem::path& path, const ParamStore& store);
void load_checkpoint(const std::filesystem::path& path, ParamStore& store);

}  // namespace stormlatent
