#pragma once
#include <string>
#include <utility>
#include <vector>

#include "arlon/nn.hpp"
#include "arlon/optim.hpp"
#include "arlon/tensor.hpp"

namespace arlon::vae {

struct VideoVaeConfig {
  int temporal_stride = 2;  // total T compression (1 or 2)
  int spatial_stride = 4;   // total H and W compression (1, 2, or 4)
  int64_t latent_channels = 8;
  std::vector<int64_t> widths = {24, 48, 64};  // channels after each stage
  bool variational = false;  // sample the latent + KL penalty when true
  double kl_weight = 1e-4;

  std::string to_json() const;
  static VideoVaeConfig from_json(const std::string& text);
  void validate() const;
};

// Channel-norm + two 3x3x3 convs with a skip connection; the second conv is
// zero-initialized so a fresh block is the identity.
struct VaeResBlock {
  nn::LayerNorm norm;
  nn::Conv3d conv1, conv2;

  static VaeResBlock create(int64_t channels, Rng& rng);
  ag::NodePtr forward(const ag::NodePtr& x) const;
  void reg(nn::ParamRegistry& r, const std::string& prefix) const;
};

// Outer 3D autoencoder between pixel videos (T,H,W,3) in [0,1] and the
// continuous latent space (T/rt, H/rs, W/rs, C_z) that every later stage
// operates in. Trained first on the corpus, then frozen.
struct VideoVae {
  VideoVaeConfig cfg;
  // encoder: a light full-resolution stem (edge positions are sub-cell after
  // the first stride, so they must be featurized before any downsampling),
  // then three strided conv stages, each followed by a residual block
  nn::Conv3d enc_stem;  // 3 -> stem width, stride 1
  std::vector<nn::Conv3d> enc_convs;
  std::vector<VaeResBlock> enc_res;
  nn::Conv3d enc_head_mu;      // widths.back() -> C_z
  nn::Conv3d enc_head_logvar;  // created only in variational mode
  // decoder: mirrors the stages in reverse, but upsamples by sub-pixel
  // convolution (predict factor*channels at the coarse grid, then scatter
  // with depth-to-space) so edge placement is a learned per-subcell linear
  // map instead of a blurry nearest-neighbour copy. All heavy convs run on
  // coarse grids; the only full-resolution work is the output projection.
  nn::Conv3d dec_head;  // C_z -> widths.back()
  VaeResBlock dec_head_res;
  std::vector<nn::Conv3d> dec_unpack;  // stage conv producing factor*channels
  std::vector<VaeResBlock> dec_res;
  nn::Conv3d dec_out;  // tail width -> 3, linear (decode() clamps to [0,1])

  static VideoVae create(const VideoVaeConfig& cfg, Rng& rng);

  // Training-graph paths.
  ag::NodePtr encode_node(const ag::NodePtr& x) const;  // mean latent
  // (mean, logvar); variational mode only.
  std::pair<ag::NodePtr, ag::NodePtr> encode_dist(const ag::NodePtr& x) const;
  ag::NodePtr decode_node(const ag::NodePtr& z) const;

  // Deterministic inference paths (mean latent; no graph built).
  Tensor encode(const Tensor& video) const;
  Tensor decode(const Tensor& latent) const;

  // Mean reconstruction MSE over the batch (+ KL when variational);
  // steps the optimizer. Throws StageError on a non-finite loss.
  double train_step(const std::vector<const Tensor*>& batch, nn::Adam& opt, Rng& rng);

  void reg(nn::ParamRegistry& r) const;
  nn::ParamRegistry params() const;
  void validate_video_shape(const Tensor& video) const;
  void validate_latent_shape(const Tensor& latent) const;

  void save(const std::string& path) const;
  static VideoVae load(const std::string& path);
};

// Plain mean-squared reconstruction error (exactly zero on identical inputs).
double reconstruction_loss(const Tensor& recon, const Tensor& target);

}  // namespace arlon::vae
