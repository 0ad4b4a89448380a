#include "arlon/video_vae.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>

#include "arlon/errors.hpp"
#include "arlon/io.hpp"

namespace arlon::vae {

using ag::NodePtr;
using nlohmann::json;

std::string VideoVaeConfig::to_json() const {
  json j = {{"temporal_stride", temporal_stride}, {"spatial_stride", spatial_stride},
            {"latent_channels", latent_channels}, {"widths", widths},
            {"variational", variational},         {"kl_weight", kl_weight}};
  return j.dump();
}

VideoVaeConfig VideoVaeConfig::from_json(const std::string& text) {
  json j = json::parse(text);
  VideoVaeConfig c;
  c.temporal_stride = j.at("temporal_stride").get<int>();
  c.spatial_stride = j.at("spatial_stride").get<int>();
  c.latent_channels = j.at("latent_channels").get<int64_t>();
  c.widths = j.at("widths").get<std::vector<int64_t>>();
  c.variational = j.at("variational").get<bool>();
  c.kl_weight = j.at("kl_weight").get<double>();
  return c;
}

void VideoVaeConfig::validate() const {
  require_that(temporal_stride == 1 || temporal_stride == 2,
               "video vae: temporal_stride must be 1 or 2");
  require_that(spatial_stride == 1 || spatial_stride == 2 || spatial_stride == 4,
               "video vae: spatial_stride must be 1, 2 or 4");
  require_that(latent_channels >= 1, "video vae: latent_channels must be >= 1");
  require_that(widths.size() == 3, "video vae: exactly 3 stage widths expected");
  for (int64_t w : widths) require_that(w >= 1, "video vae: stage widths must be >= 1");
}

// Per-stage strides whose product is (temporal_stride, spatial, spatial):
// the two spatial halvings come first, the temporal halving last.
static std::array<std::array<int, 3>, 3> stage_strides(const VideoVaeConfig& cfg) {
  const int sp0 = cfg.spatial_stride >= 2 ? 2 : 1;
  const int sp1 = cfg.spatial_stride == 4 ? 2 : 1;
  return {{{1, sp0, sp0}, {1, sp1, sp1}, {cfg.temporal_stride, 1, 1}}};
}

VaeResBlock VaeResBlock::create(int64_t channels, Rng& rng) {
  VaeResBlock b;
  b.norm = nn::LayerNorm::create(channels);
  b.conv1 = nn::Conv3d::create({3, 3, 3}, channels, channels, {1, 1, 1}, {1, 1, 1}, rng);
  b.conv2 = nn::Conv3d::create({3, 3, 3}, channels, channels, {1, 1, 1}, {1, 1, 1}, rng);
  for (double& v : b.conv2.w->val.data) v = 0.0;  // fresh block == identity
  return b;
}

NodePtr VaeResBlock::forward(const NodePtr& x) const {
  return ag::add(x, conv2.forward(ag::silu(conv1.forward(ag::silu(norm.forward(x))))));
}

void VaeResBlock::reg(nn::ParamRegistry& r, const std::string& prefix) const {
  norm.reg(r, prefix + "/norm");
  conv1.reg(r, prefix + "/conv1");
  conv2.reg(r, prefix + "/conv2");
}

// Width of the full-resolution stem and of the decoder tail. Kept small:
// full-resolution convs dominate the step cost, so capacity lives on the
// coarse grids and the full-resolution ends stay thin.
static constexpr int64_t kEdgeWidth = 12;

// Channel plan for the decoder stages: unwinding the encoder stages in
// reverse lands on the earlier encoder widths, ending at the tail width.
static std::array<int64_t, 3> decoder_widths(const VideoVaeConfig& cfg) {
  return {cfg.widths[1], cfg.widths[0], kEdgeWidth};
}

VideoVae VideoVae::create(const VideoVaeConfig& cfg, Rng& rng) {
  cfg.validate();
  VideoVae m;
  m.cfg = cfg;
  auto strides = stage_strides(cfg);
  m.enc_stem = nn::Conv3d::create({3, 3, 3}, 3, kEdgeWidth, {1, 1, 1}, {1, 1, 1}, rng);
  int64_t cin = kEdgeWidth;
  for (int i = 0; i < 3; ++i) {
    m.enc_convs.push_back(
        nn::Conv3d::create({3, 3, 3}, cin, cfg.widths[i], strides[i], {1, 1, 1}, rng));
    m.enc_res.push_back(VaeResBlock::create(cfg.widths[i], rng));
    cin = cfg.widths[i];
  }
  m.enc_head_mu = nn::Conv3d::create({3, 3, 3}, cfg.widths[2], cfg.latent_channels,
                                     {1, 1, 1}, {1, 1, 1}, rng);
  if (cfg.variational)
    m.enc_head_logvar = nn::Conv3d::create({3, 3, 3}, cfg.widths[2], cfg.latent_channels,
                                           {1, 1, 1}, {1, 1, 1}, rng);

  m.dec_head = nn::Conv3d::create({3, 3, 3}, cfg.latent_channels, cfg.widths[2],
                                  {1, 1, 1}, {1, 1, 1}, rng);
  m.dec_head_res = VaeResBlock::create(cfg.widths[2], rng);
  const std::array<int64_t, 3> dec_ch = decoder_widths(cfg);
  int64_t dcin = cfg.widths[2];
  for (int i = 0; i < 3; ++i) {
    const auto& s = strides[2 - i];  // unwind stages in reverse
    const int64_t factor = s[0] * s[1] * s[2];
    m.dec_unpack.push_back(
        nn::Conv3d::create({3, 3, 3}, dcin, dec_ch[i] * factor, {1, 1, 1}, {1, 1, 1}, rng));
    m.dec_res.push_back(VaeResBlock::create(dec_ch[i], rng));
    dcin = dec_ch[i];
  }
  m.dec_out = nn::Conv3d::create({3, 3, 3}, kEdgeWidth, 3, {1, 1, 1}, {1, 1, 1}, rng);
  return m;
}

static NodePtr encoder_trunk(const VideoVae& m, const NodePtr& x) {
  NodePtr h = m.enc_stem.forward(x);
  for (int i = 0; i < 3; ++i) h = m.enc_res[i].forward(m.enc_convs[i].forward(h));
  return h;
}

// Scatter a (T,H,W,factor*C) stage output onto the (T*st,H*sh,W*sw,C) grid:
// the sub-pixel convolution trick, each coarse cell predicting its own block
// of fine cells. A pure index bijection, so gradients pass through exactly.
static NodePtr subpixel_unpack(const NodePtr& h, const std::array<int, 3>& s, int64_t out_ch) {
  if (s[0] * s[1] * s[2] == 1) return h;
  const auto& sh = h->val.shape;
  NodePtr tokens = ag::reshape(h, {sh[0] * sh[1] * sh[2], sh[3]});
  return ag::unpatchify3d(tokens, {sh[0] * s[0], sh[1] * s[1], sh[2] * s[2], out_ch},
                          {s[0], s[1], s[2]});
}

NodePtr VideoVae::encode_node(const NodePtr& x) const {
  return enc_head_mu.forward(encoder_trunk(*this, x));
}

std::pair<NodePtr, NodePtr> VideoVae::encode_dist(const NodePtr& x) const {
  require_that(cfg.variational, "encode_dist requires the variational flag");
  NodePtr h = encoder_trunk(*this, x);
  return {enc_head_mu.forward(h), enc_head_logvar.forward(h)};
}

NodePtr VideoVae::decode_node(const NodePtr& z) const {
  NodePtr h = dec_head_res.forward(dec_head.forward(z));
  auto strides = stage_strides(cfg);
  const std::array<int64_t, 3> dec_ch = decoder_widths(cfg);
  for (int i = 0; i < 3; ++i) {
    const auto& s = strides[2 - i];  // unwind stages in reverse
    h = subpixel_unpack(dec_unpack[i].forward(h), s, dec_ch[i]);
    h = dec_res[i].forward(h);
  }
  // Linear output: a bounded nonlinearity here saturates against the mostly-
  // zero background and starves edge pixels of gradient, so the training path
  // stays unclamped and only the video-producing decode() projects to [0,1].
  return dec_out.forward(h);
}

void VideoVae::validate_video_shape(const Tensor& video) const {
  require_that(video.rank() == 4 && video.shape[3] == 3,
               "video vae: expected a (T,H,W,3) video, got " + video.shape_str());
  require_that(video.shape[0] % cfg.temporal_stride == 0 &&
                   video.shape[1] % cfg.spatial_stride == 0 &&
                   video.shape[2] % cfg.spatial_stride == 0,
               "video vae: video shape " + video.shape_str() +
                   " must be divisible by strides (T by " + std::to_string(cfg.temporal_stride) +
                   ", H and W by " + std::to_string(cfg.spatial_stride) + ")");
}

void VideoVae::validate_latent_shape(const Tensor& latent) const {
  require_that(latent.rank() == 4 && latent.shape[3] == cfg.latent_channels,
               "video vae: expected a (T',H',W'," + std::to_string(cfg.latent_channels) +
                   ") latent, got " + latent.shape_str());
}

Tensor VideoVae::encode(const Tensor& video) const {
  validate_video_shape(video);
  ag::NoGradGuard ng;
  return encode_node(ag::constant(video))->val;
}

Tensor VideoVae::decode(const Tensor& latent) const {
  validate_latent_shape(latent);
  ag::NoGradGuard ng;
  Tensor out = decode_node(ag::constant(latent))->val;
  for (double& v : out.data) v = std::clamp(v, 0.0, 1.0);
  return out;
}

double VideoVae::train_step(const std::vector<const Tensor*>& batch, nn::Adam& opt, Rng& rng) {
  require_that(!batch.empty(), "video vae: empty training batch");
  NodePtr total;
  for (const Tensor* item : batch) {
    validate_video_shape(*item);
    NodePtr x = ag::constant(*item);
    NodePtr recon;
    NodePtr kl;
    if (cfg.variational) {
      auto [mu, logvar] = encode_dist(x);
      NodePtr eps = ag::constant(Tensor::randn(mu->val.shape, rng));
      NodePtr z = ag::add(mu, ag::mul(ag::exp_op(ag::scale(logvar, 0.5)), eps));
      recon = decode_node(z);
      // KL(N(mu, sigma^2) || N(0,1)) averaged over latent entries
      NodePtr term = ag::sub(ag::add(ag::square(mu), ag::exp_op(logvar)),
                             ag::add_scalar(logvar, 1.0));
      kl = ag::scale(ag::mean_all(term), 0.5 * cfg.kl_weight);
    } else {
      recon = decode_node(encode_node(x));
    }
    NodePtr loss = ag::mean_all(ag::square(ag::sub(recon, x)));
    if (kl) loss = ag::add(loss, kl);
    total = total ? ag::add(total, loss) : loss;
  }
  total = ag::scale(total, 1.0 / static_cast<double>(batch.size()));
  const double value = total->val.data[0];
  if (!std::isfinite(value))
    throw StageError("video vae: non-finite training loss (" + std::to_string(value) +
                     ") at optimizer step " + std::to_string(opt.steps_taken()));
  opt.zero_grad();
  ag::backward(total);
  opt.step();
  return value;
}

void VideoVae::reg(nn::ParamRegistry& r) const {
  enc_stem.reg(r, "enc/stem");
  for (int i = 0; i < 3; ++i) {
    enc_convs[i].reg(r, "enc/conv" + std::to_string(i));
    enc_res[i].reg(r, "enc/res" + std::to_string(i));
  }
  enc_head_mu.reg(r, "enc/head_mu");
  if (cfg.variational) enc_head_logvar.reg(r, "enc/head_logvar");
  dec_head.reg(r, "dec/head");
  dec_head_res.reg(r, "dec/head_res");
  for (int i = 0; i < 3; ++i) {
    dec_unpack[i].reg(r, "dec/unpack" + std::to_string(i));
    dec_res[i].reg(r, "dec/res" + std::to_string(i));
  }
  dec_out.reg(r, "dec/out");
}

nn::ParamRegistry VideoVae::params() const {
  nn::ParamRegistry r;
  reg(r);
  return r;
}

void VideoVae::save(const std::string& path) const {
  io::save_checkpoint(path, cfg.to_json(), params());
}

VideoVae VideoVae::load(const std::string& path) {
  io::Checkpoint ck = io::load_checkpoint(path);
  Rng rng(0);
  VideoVae m = create(VideoVaeConfig::from_json(ck.config_json), rng);
  nn::ParamRegistry r = m.params();
  io::restore_params(ck, r);
  return m;
}

double reconstruction_loss(const Tensor& recon, const Tensor& target) {
  require_that(recon.shape == target.shape,
               "reconstruction_loss: shape mismatch " + recon.shape_str() + " vs " +
                   target.shape_str());
  return tensor_mse(recon, target);
}

}  // namespace arlon::vae
