#pragma once
#include <array>
#include <functional>
#include <string>
#include <vector>

#include "arlon/nn.hpp"
#include "arlon/optim.hpp"
#include "arlon/tensor.hpp"

namespace arlon::dit {

enum class ScheduleKind { linear_beta, cosine };
ScheduleKind schedule_kind_from_string(const std::string& name);
std::string to_string(ScheduleKind kind);

// Forward-process constants: alphas[t-1] = a_t, alpha_bars[t-1] = cumulative
// product up to t. alpha_bar(0) is defined as 1 (the clean-data endpoint).
struct NoiseSchedule {
  ScheduleKind kind = ScheduleKind::linear_beta;
  int64_t steps = 0;
  std::vector<double> alphas;
  std::vector<double> alpha_bars;

  static NoiseSchedule build(ScheduleKind kind, int64_t t_diff);
  double alpha_bar(int64_t t) const;
  void validate() const;
};

// z_t = sqrt(abar_t) z0 + sqrt(1 - abar_t) eps, elementwise.
Tensor forward_diffuse(const Tensor& z0, int64_t t, const Tensor& eps,
                       const NoiseSchedule& sched);

struct DiTConfig {
  int depth = 8;  // full-scale reference uses 28 blocks
  int heads = 4;
  int64_t dim = 128;
  std::array<int, 3> patch{1, 2, 2};
  int64_t text_dim = 32;
  int64_t latent_channels = 8;
  int64_t t_diff = 1000;
  ScheduleKind schedule = ScheduleKind::linear_beta;
  // Classifier-free guidance knobs; disabled by default.
  bool classifier_free = false;
  double text_drop_prob = 0.1;
  double guidance_scale = 1.0;

  int64_t patch_volume() const { return int64_t{patch[0]} * patch[1] * patch[2]; }
  std::string to_json() const;
  static DiTConfig from_json(const std::string& text);
  void validate() const;
};

// Per-latent-frame conditioning flags: true = noise-free conditioning frame.
struct FrameMask {
  std::vector<uint8_t> conditioning;

  static FrameMask none(int64_t frames) { return {std::vector<uint8_t>(frames, 0)}; }
  int64_t frames() const { return static_cast<int64_t>(conditioning.size()); }
  int64_t conditioning_count() const;
  bool is_conditioning(int64_t f) const { return conditioning[static_cast<size_t>(f)] != 0; }
};

// Training-time mask policy: half the steps use no conditioning, the rest
// condition on a prefix of 1..frames/2 frames.
FrameMask sample_train_mask(int64_t frames, Rng& rng);

// (frame tokens, spatial tokens) for a latent shape under a patch size.
std::array<int64_t, 2> token_grid(const std::vector<int64_t>& latent_shape,
                                  std::array<int, 3> patch);

// Sinusoidal embedding of an integer timestep; dim must be even.
Tensor sinusoidal_timestep(int64_t t, int64_t dim);

// Spatial attention -> temporal attention -> text cross-attention -> FFN, all
// pre-norm residual branches; timestep enters as scale/shift modulation of the
// spatial and FFN norms. Attention/FFN output projections are zero-initialized
// so a fresh block is the identity map.
struct DiTBlock {
  nn::LayerNorm ln_spatial, ln_temporal, ln_cross, ln_ffn;
  nn::Attention attn_spatial, attn_temporal, attn_cross;
  nn::Mlp mlp;
  nn::Linear modulation;  // silu(temb) -> (scale, shift) x 2, zero-initialized

  static DiTBlock create(const DiTConfig& cfg, Rng& rng);
  // x: (frame tokens, spatial tokens, dim); text_kv: (1, text len, dim);
  // temb: (dim). Rope tables cover the spatial / temporal extents.
  ag::NodePtr forward(const ag::NodePtr& x, const ag::NodePtr& text_kv,
                      const ag::NodePtr& temb, const Tensor& rope_cos_s,
                      const Tensor& rope_sin_s, const Tensor& rope_cos_t,
                      const Tensor& rope_sin_t) const;
  void reg(nn::ParamRegistry& r, const std::string& prefix) const;
};

// Interception point for condition injection: called before block `index`
// with the current token grid; returns the (possibly fused) replacement.
using BlockHook = std::function<ag::NodePtr(int index, const ag::NodePtr& x)>;

struct DiT {
  DiTConfig cfg;
  NoiseSchedule sched;
  nn::Linear patch_proj;  // patch volume * C -> dim
  nn::Linear text_proj;   // text_dim -> dim
  nn::Mlp temb_mlp;       // sinusoidal(dim) -> dim
  std::vector<DiTBlock> blocks;
  nn::LayerNorm final_ln;
  nn::Linear head;        // dim -> patch volume * C, zero-initialized

  static DiT create(const DiTConfig& cfg, Rng& rng);

  void validate_latent_shape(const Tensor& z) const;

  // Full stack: patchify -> modulated blocks (hook applied before each block
  // when provided) -> unpatchify. Output has z_t's shape.
  ag::NodePtr predict_noise_node(const ag::NodePtr& z_t, int64_t t, const ag::NodePtr& text,
                                 const BlockHook& hook = {}) const;
  Tensor predict_noise(const Tensor& z_t, int64_t t, const Tensor& text,
                       const BlockHook& hook = {}) const;

  // Masked noise-prediction objective at explicit (t, eps): conditioning
  // frames stay clean in the input and are excluded from the loss mean.
  ag::NodePtr diffusion_loss_at(const Tensor& z0, int64_t t, const Tensor& eps,
                                const ag::NodePtr& text, const FrameMask& mask,
                                const BlockHook& hook = {}) const;
  // Samples t uniform on [1, t_diff] and eps ~ N(0, I), then defers to _at.
  ag::NodePtr diffusion_loss(const Tensor& z0, const ag::NodePtr& text, const FrameMask& mask,
                             Rng& rng, const BlockHook& hook = {}) const;

  void reg(nn::ParamRegistry& r) const;
  nn::ParamRegistry params() const;
  void save(const std::string& path) const;
  static DiT load(const std::string& path);
};

// Uniformly spaced descending sub-schedule over [1, t_diff]; always starts at
// t_diff and ends at 1.
std::vector<int64_t> ddim_timesteps(int64_t t_diff, int64_t steps);

using NoisePredictor = std::function<Tensor(const Tensor& z_t, int64_t t)>;

// Deterministic DDIM (eta = 0). Conditioning frames (mask true) are
// overwritten with their clean latents at initialization and after every
// step, so they come back bit-equal. `init_noise` fixes z_T for tests;
// otherwise it is drawn from rng.
Tensor ddim_sample(const NoisePredictor& predict, const NoiseSchedule& sched,
                   const std::vector<int64_t>& latent_shape, int64_t steps,
                   const FrameMask* mask, const Tensor* cond_latents, Rng& rng,
                   const Tensor* init_noise = nullptr);

}  // namespace arlon::dit
