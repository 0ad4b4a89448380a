#pragma once
#include <array>
#include <string>
#include <vector>

#include "arlon/io.hpp"
#include "arlon/nn.hpp"
#include "arlon/optim.hpp"
#include "arlon/tensor.hpp"
#include "arlon/video_vae.hpp"

namespace arlon::vq {

// In-memory quantized grid; shares the persisted token-file layout
// (compression triple, grid dims, codebook size, row-major uint16 indices).
using IndexGrid = io::IndexFile;

struct VqVaeConfig {
  std::array<int, 3> compression = {2, 2, 2};  // (r, o, o) over the latent grid
  int64_t codebook_size = 64;                  // K   (full-scale reference: 2048)
  int64_t code_dim = 32;                       // m   (full-scale reference: 256)
  int64_t hidden = 32;                         // conv/attention trunk width h
  int64_t input_channels = 8;                  // channels of the latent it compresses
  double commitment_weight = 0.25;
  int attn_heads = 4;

  static VqVaeConfig fine();    // (2,2,2) — drives the sequence model
  static VqVaeConfig coarse();  // (2,4,4) — conditions diffusion training
  std::string to_json() const;
  static VqVaeConfig from_json(const std::string& text);
  void validate() const;
};

struct Codebook {
  ag::NodePtr entries;               // (K, m)
  std::vector<int64_t> usage_counts; // per-entry hits since the last reset

  int64_t size() const { return entries->val.shape[0]; }
  int64_t dim() const { return entries->val.shape[1]; }
  void reset_usage() { usage_counts.assign(usage_counts.size(), 0); }
};

// Nearest-entry assignment plus the two VQ loss terms. `quantized` carries
// straight-through gradients (decoder gradients pass to the encoder unchanged).
struct QuantizeResult {
  IndexGrid grid;
  ag::NodePtr quantized;        // same shape as V
  ag::NodePtr codebook_loss;    // || e - sg[V] ||, pulls entries toward V
  ag::NodePtr commitment_loss;  // || V - sg[e] ||, pulls V toward entries
};

struct VqLosses {
  double total = 0, reconstruction = 0, codebook = 0, commitment = 0;
};

// Self-attention over every grid position with a residual skip.
struct ResAttnBlock {
  nn::LayerNorm norm;
  nn::Attention attn;

  static ResAttnBlock create(int64_t dim, int heads, Rng& rng);
  ag::NodePtr forward(const ag::NodePtr& grid) const;  // (T,H,W,C) in and out
  void reg(nn::ParamRegistry& r, const std::string& prefix) const;
};

// Discrete bottleneck over the continuous video latent: conv + attention
// encoder down to the compressed grid, codebook lookup, mirrored decoder
// back to the full latent grid. The decoder output lives in the same space
// as its input latent, so the fine and coarse variants (independent models)
// reconstruct the same object and can stand in for one another downstream.
struct VqVae {
  VqVaeConfig cfg;
  nn::Conv3d stem;                        // input_channels -> h
  std::vector<nn::Conv3d> enc_convs;      // strided stages
  std::vector<vae::VaeResBlock> enc_res;
  ResAttnBlock enc_attn;
  nn::Conv3d to_code;                     // 1x1x1, h -> m
  Codebook codebook;
  nn::Conv3d from_code;                   // 1x1x1, m -> h
  ResAttnBlock dec_attn;
  std::vector<nn::Conv3d> dec_convs;      // upsample stages, mirrored
  std::vector<vae::VaeResBlock> dec_res;
  nn::Conv3d recon_head;                  // h -> input_channels

  static VqVae create(const VqVaeConfig& cfg, Rng& rng);

  // (T',H',W',C_z) latent -> (T'/r, H'/o, W'/o, m) pre-quantization embeddings.
  ag::NodePtr encode_node(const ag::NodePtr& z) const;
  Tensor encode(const Tensor& z) const;

  // Updates usage counts; ties go to the lowest index.
  QuantizeResult quantize(const ag::NodePtr& embeddings);

  // Compressed-grid embeddings -> reconstructed latent (T',H',W',C_z).
  ag::NodePtr decode_node(const ag::NodePtr& quantized) const;
  // Validates every index (< K, naming the offending position), looks the
  // entries up and decodes. Fine and coarse variants agree on the output grid.
  Tensor decode_indices(const IndexGrid& grid) const;

  // Full discretization of a latent: encode, quantize, return the grid.
  IndexGrid tokenize_latent(const Tensor& z);

  // Mean VQ objective over the batch: recon MSE + codebook + beta*commitment.
  VqLosses train_step(const std::vector<const Tensor*>& batch, nn::Adam& opt);

  // Re-seeds every unused entry from random encoder outputs of `latents`;
  // warns on stderr when more than 90% of the book is dead. Resets usage.
  int revive_dead_entries(const std::vector<const Tensor*>& latents, Rng& rng);

  void validate_latent_shape(const Tensor& z) const;
  std::array<int64_t, 3> code_grid_shape(const std::array<int64_t, 3>& latent_grid) const;

  void reg(nn::ParamRegistry& r) const;
  nn::ParamRegistry params() const;
  void save(const std::string& path) const;
  static VqVae load(const std::string& path);
};

// F = D_latent(E_latent(E_video(x))): pixel video -> condition features on the
// full latent grid, through the frozen outer VAE and this quantizer.
Tensor semantic_condition(const vae::VideoVae& outer, VqVae& inner, const Tensor& video);

}  // namespace arlon::vq
