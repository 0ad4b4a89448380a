#pragma once
// Condition-feature injection for the diffusion backbone: a patch embedder
// shared with the backbone's token geometry, a residual adapter chain, optional
// per-channel uncertainty sampling, and a zero-initialized gated fusion that
// leaves a fresh model bit-identical to the unconditioned one.
#include <functional>
#include <string>
#include <vector>

#include "arlon/dit.hpp"
#include "arlon/nn.hpp"
#include "arlon/tensor.hpp"

namespace arlon::inject {

enum class Variant { adaptive_norm, mlp_adapter };
Variant variant_from_string(const std::string& s);
std::string variant_to_string(Variant v);

struct InjectionConfig {
  Variant variant = Variant::adaptive_norm;
  // Block indices that receive fused condition features; the default covers
  // the first half of the default-depth backbone.
  std::vector<int> inject_layers = {0, 1, 2, 3};
  double uncertainty_prob = 0.1;   // Bernoulli chance per injected layer per training step
  double gaussian_noise_std = 0.0; // ablation: additive noise on the raw condition
  double epsilon_std = 1e-5;       // whitening guard for constant channels
  // true: sampled scale is centered at 1 (expectation is whitened+recentered
  // features); false: centered at the channel scale, so the expectation
  // recovers the input feature.
  bool literal_expectation = true;
  int64_t cond_channels = 8; // channel width of the raw condition volume

  std::string to_json() const;
  static InjectionConfig from_json(const std::string& text);
  void validate(int backbone_depth) const;
};

// Residual MLP refinement stage: F_out = Mlp(LayerNorm(F)) + F. The MLP output
// projection starts at zero, so a fresh adapter is the identity.
struct Adapter {
  nn::LayerNorm ln;
  nn::Mlp mlp;

  static Adapter create(int64_t dim, Rng& rng);
  ag::NodePtr forward(const ag::NodePtr& f) const;
  void reg(nn::ParamRegistry& r, const std::string& prefix) const;
};

// Gated adaptive-norm fusion. A small MLP over the condition tokens emits
// (alpha, beta, gamma); the alpha head starts at zero, so a fresh gate returns
// X unchanged: X' = alpha * Mlp(gamma * LayerNorm(X) + beta) + X.
struct FusionGate {
  nn::LayerNorm ln;
  nn::Linear trunk;             // condition -> hidden
  nn::Linear to_alpha;          // hidden -> dim, zero-initialized gate
  nn::Linear to_beta, to_gamma; // hidden -> dim
  nn::Mlp mlp;

  static FusionGate create(int64_t dim, Rng& rng);
  ag::NodePtr forward(const ag::NodePtr& x, const ag::NodePtr& cond) const;
  void reg(nn::ParamRegistry& r, const std::string& prefix) const;
};

// Ablation fusion: X' = X + ZeroInitProj(Gelu(Proj(LayerNorm(cond)))) —
// additive injection with no adaptive modulation.
struct MlpAdapterFusion {
  nn::LayerNorm ln;
  nn::Mlp mlp; // zero-initialized output projection

  static MlpAdapterFusion create(int64_t dim, Rng& rng);
  ag::NodePtr forward(const ag::NodePtr& x, const ag::NodePtr& cond) const;
  void reg(nn::ParamRegistry& r, const std::string& prefix) const;
};

// Per-channel uncertainty sampling over token positions: whiten each channel,
// then redraw its scale and mean from Gaussians parameterized by the channel
// statistics. `tokens` is (frames, space, dim).
ag::NodePtr uncertainty_sample(const ag::NodePtr& tokens, double epsilon_std,
                               bool literal_expectation, Rng& rng);

// Additive Gaussian noise on a raw condition volume; passthrough at std = 0.
Tensor gaussian_noise_ablation(const Tensor& cond, double std, Rng& rng);

// Owns every injection parameter and builds per-step block hooks for the
// backbone. The condition enters as a raw latent volume (T, H, W,
// cond_channels) on the same grid the backbone diffuses over.
struct Injector {
  InjectionConfig cfg;
  std::array<int, 3> patch{1, 2, 2};
  int64_t dim = 0;
  nn::Linear embed; // patch_volume * cond_channels -> dim
  std::vector<Adapter> adapters;             // one per injected layer
  std::vector<FusionGate> gates;             // adaptive_norm variant
  std::vector<MlpAdapterFusion> mlp_gates;   // mlp_adapter variant

  static Injector create(const InjectionConfig& cfg, const dit::DiTConfig& backbone, Rng& rng);

  // Patch-embed the raw condition volume into backbone tokens (frames, space, dim).
  ag::NodePtr embed_condition(const ag::NodePtr& cond) const;

  // Precompute the adapter chain for one forward pass and return a hook that
  // fuses into the configured blocks; other blocks get their input back
  // untouched (same node). Build a fresh hook per training step. At train time
  // `rng` drives the uncertainty gating and the noise ablation; at inference
  // both are off and `rng` may be null.
  dit::BlockHook make_hook(const Tensor& cond, bool train, Rng* rng) const;

  void reg(nn::ParamRegistry& r, const std::string& prefix) const;
  nn::ParamRegistry params() const;
  void save(const std::string& path) const;
  static Injector load(const std::string& path);
};

}  // namespace arlon::inject
