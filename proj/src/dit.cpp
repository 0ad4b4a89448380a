#include "arlon/dit.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>

#include "arlon/errors.hpp"
#include "arlon/io.hpp"

namespace arlon::dit {

using ag::NodePtr;
using nlohmann::json;

ScheduleKind schedule_kind_from_string(const std::string& name) {
  if (name == "linear-beta") return ScheduleKind::linear_beta;
  if (name == "cosine") return ScheduleKind::cosine;
  throw ValidationError("unknown noise schedule '" + name +
                        "' (expected linear-beta or cosine)");
}

std::string to_string(ScheduleKind kind) {
  return kind == ScheduleKind::linear_beta ? "linear-beta" : "cosine";
}

NoiseSchedule NoiseSchedule::build(ScheduleKind kind, int64_t t_diff) {
  require_that(t_diff >= 1, "noise schedule needs at least one step");
  NoiseSchedule s;
  s.kind = kind;
  s.steps = t_diff;
  s.alphas.reserve(static_cast<size_t>(t_diff));
  if (kind == ScheduleKind::linear_beta) {
    const double beta_start = 1e-4, beta_end = 0.02;
    for (int64_t t = 1; t <= t_diff; ++t) {
      const double frac = t_diff > 1 ? static_cast<double>(t - 1) / (t_diff - 1) : 0.0;
      s.alphas.push_back(1.0 - (beta_start + frac * (beta_end - beta_start)));
    }
  } else {
    const double offset = 0.008;
    auto f = [&](double u) {
      const double c = std::cos((u + offset) / (1.0 + offset) * M_PI / 2.0);
      return c * c;
    };
    double prev_bar = 1.0;
    for (int64_t t = 1; t <= t_diff; ++t) {
      const double bar = f(static_cast<double>(t) / t_diff) / f(0.0);
      double alpha = bar / prev_bar;
      alpha = std::clamp(alpha, 0.001, 0.9999);  // conventional beta clip
      s.alphas.push_back(alpha);
      prev_bar *= alpha;
    }
  }
  double prod = 1.0;
  for (double a : s.alphas) s.alpha_bars.push_back(prod *= a);
  s.validate();
  return s;
}

double NoiseSchedule::alpha_bar(int64_t t) const {
  require_that(t >= 0 && t <= steps, "schedule timestep " + std::to_string(t) +
                                         " outside [0, " + std::to_string(steps) + "]");
  return t == 0 ? 1.0 : alpha_bars[static_cast<size_t>(t - 1)];
}

void NoiseSchedule::validate() const {
  require_that(steps >= 1 && static_cast<int64_t>(alphas.size()) == steps &&
                   static_cast<int64_t>(alpha_bars.size()) == steps,
               "noise schedule arrays out of step with the step count");
  double prod = 1.0;
  for (int64_t t = 1; t <= steps; ++t) {
    const double a = alphas[static_cast<size_t>(t - 1)];
    const double bar = alpha_bars[static_cast<size_t>(t - 1)];
    require_that(a > 0.0 && a <= 1.0 && bar > 0.0 && bar <= 1.0,
                 "noise schedule values must lie in (0,1]");
    prod *= a;
    require_that(std::abs(bar - prod) <= 1e-12,
                 "cumulative alpha disagrees with the loop product at t=" + std::to_string(t));
    if (t > 1)
      require_that(bar < alpha_bars[static_cast<size_t>(t - 2)],
                   "cumulative alphas must be strictly decreasing");
  }
}

Tensor forward_diffuse(const Tensor& z0, int64_t t, const Tensor& eps,
                       const NoiseSchedule& sched) {
  require_that(t >= 1 && t <= sched.steps, "diffusion timestep " + std::to_string(t) +
                                               " outside [1, " + std::to_string(sched.steps) +
                                               "]");
  require_that(eps.shape == z0.shape, "noise shape must match the latent shape");
  const double bar = sched.alpha_bar(t);
  const double a = std::sqrt(bar), b = std::sqrt(1.0 - bar);
  Tensor out(z0.shape);
  for (size_t i = 0; i < out.data.size(); ++i) out.data[i] = a * z0.data[i] + b * eps.data[i];
  return out;
}

std::string DiTConfig::to_json() const {
  json j = {{"depth", depth},
            {"heads", heads},
            {"dim", dim},
            {"patch", patch},
            {"text_dim", text_dim},
            {"latent_channels", latent_channels},
            {"t_diff", t_diff},
            {"schedule", to_string(schedule)},
            {"classifier_free", classifier_free},
            {"text_drop_prob", text_drop_prob},
            {"guidance_scale", guidance_scale}};
  return j.dump();
}

DiTConfig DiTConfig::from_json(const std::string& text) {
  json j = json::parse(text);
  DiTConfig c;
  c.depth = j.at("depth").get<int>();
  c.heads = j.at("heads").get<int>();
  c.dim = j.at("dim").get<int64_t>();
  c.patch = j.at("patch").get<std::array<int, 3>>();
  c.text_dim = j.at("text_dim").get<int64_t>();
  c.latent_channels = j.at("latent_channels").get<int64_t>();
  c.t_diff = j.at("t_diff").get<int64_t>();
  c.schedule = schedule_kind_from_string(j.at("schedule").get<std::string>());
  c.classifier_free = j.value("classifier_free", false);
  c.text_drop_prob = j.value("text_drop_prob", 0.1);
  c.guidance_scale = j.value("guidance_scale", 1.0);
  return c;
}

void DiTConfig::validate() const {
  require_that(depth >= 2, "dit: depth must be >= 2");
  require_that(heads >= 1 && dim % heads == 0, "dit: model dim must be divisible by heads");
  require_that(dim % 2 == 0 && (dim / heads) % 2 == 0,
               "dit: dim and head dim must be even for sinusoidal/rotary phases");
  require_that(patch[0] >= 1 && patch[1] >= 1 && patch[2] >= 1, "dit: patch sizes must be >= 1");
  require_that(text_dim >= 1 && latent_channels >= 1, "dit: widths must be >= 1");
  require_that(t_diff >= 1, "dit: diffusion steps must be >= 1");
  require_that(text_drop_prob >= 0.0 && text_drop_prob <= 1.0,
               "dit: text drop probability must be in [0,1]");
}

int64_t FrameMask::conditioning_count() const {
  int64_t n = 0;
  for (uint8_t b : conditioning) n += b != 0;
  return n;
}

FrameMask sample_train_mask(int64_t frames, Rng& rng) {
  require_that(frames >= 2, "train mask needs at least two latent frames");
  FrameMask m = FrameMask::none(frames);
  if (rng.uniform() < 0.5) return m;
  const int64_t k = 1 + rng.randint(0, frames / 2);  // prefix length in [1, frames/2]
  for (int64_t f = 0; f < k; ++f) m.conditioning[static_cast<size_t>(f)] = 1;
  return m;
}

std::array<int64_t, 2> token_grid(const std::vector<int64_t>& latent_shape,
                                  std::array<int, 3> patch) {
  require_that(latent_shape.size() == 4, "token grid expects a (T,H,W,C) latent shape");
  require_that(latent_shape[0] % patch[0] == 0 && latent_shape[1] % patch[1] == 0 &&
                   latent_shape[2] % patch[2] == 0,
               "latent dims must be divisible by the patch size");
  return {latent_shape[0] / patch[0], (latent_shape[1] / patch[1]) * (latent_shape[2] / patch[2])};
}

Tensor sinusoidal_timestep(int64_t t, int64_t dim) {
  require_that(dim >= 2 && dim % 2 == 0, "sinusoidal embedding dim must be even");
  const int64_t half = dim / 2;
  Tensor out({dim});
  for (int64_t i = 0; i < half; ++i) {
    const double freq = std::exp(-std::log(10000.0) * static_cast<double>(i) / half);
    out.data[static_cast<size_t>(i)] = std::sin(static_cast<double>(t) * freq);
    out.data[static_cast<size_t>(half + i)] = std::cos(static_cast<double>(t) * freq);
  }
  return out;
}

DiTBlock DiTBlock::create(const DiTConfig& cfg, Rng& rng) {
  DiTBlock b;
  b.ln_spatial = nn::LayerNorm::create(cfg.dim);
  b.ln_temporal = nn::LayerNorm::create(cfg.dim);
  b.ln_cross = nn::LayerNorm::create(cfg.dim);
  b.ln_ffn = nn::LayerNorm::create(cfg.dim);
  b.attn_spatial = nn::Attention::create(cfg.dim, cfg.heads, rng, 0.02, true);
  b.attn_temporal = nn::Attention::create(cfg.dim, cfg.heads, rng, 0.02, true);
  b.attn_cross = nn::Attention::create(cfg.dim, cfg.heads, rng, 0.02, true);
  b.mlp = nn::Mlp::create(cfg.dim, 4 * cfg.dim, rng, 0.02, true);
  b.modulation = nn::Linear::create_zero(cfg.dim, 4 * cfg.dim);
  return b;
}

static NodePtr modulate(const NodePtr& h, const NodePtr& scale, const NodePtr& shift) {
  return ag::add_row(ag::mul_row(h, ag::add_scalar(scale, 1.0)), shift);
}

NodePtr DiTBlock::forward(const NodePtr& x_in, const NodePtr& text_kv, const NodePtr& temb,
                          const Tensor& rope_cos_s, const Tensor& rope_sin_s,
                          const Tensor& rope_cos_t, const Tensor& rope_sin_t) const {
  const int64_t ft = x_in->val.shape[0], st = x_in->val.shape[1], d = x_in->val.shape[2];
  NodePtr mod = modulation.forward(ag::silu(temb));
  NodePtr scale_s = ag::slice0(mod, 0, d), shift_s = ag::slice0(mod, d, d);
  NodePtr scale_f = ag::slice0(mod, 2 * d, d), shift_f = ag::slice0(mod, 3 * d, d);

  // Spatial attention within each frame: groups = frame tokens.
  NodePtr x = x_in;
  NodePtr hs = modulate(ln_spatial.forward(x), scale_s, shift_s);
  x = ag::add(x, attn_spatial.forward(hs, hs, &rope_cos_s, &rope_sin_s));

  // Temporal attention across frames: regroup so groups = spatial tokens.
  NodePtr xt = ag::permute(x, {1, 0, 2});
  NodePtr ht = ln_temporal.forward(xt);
  xt = ag::add(xt, attn_temporal.forward(ht, ht, &rope_cos_t, &rope_sin_t));
  x = ag::permute(xt, {1, 0, 2});

  // Text cross-attention over the flattened token set.
  NodePtr xq = ag::reshape(x, {1, ft * st, d});
  NodePtr hx = ln_cross.forward(xq);
  x = ag::reshape(ag::add(xq, attn_cross.forward(hx, text_kv)), {ft, st, d});

  NodePtr hf = modulate(ln_ffn.forward(x), scale_f, shift_f);
  return ag::add(x, mlp.forward(hf));
}

void DiTBlock::reg(nn::ParamRegistry& r, const std::string& prefix) const {
  ln_spatial.reg(r, prefix + "/ln_spatial");
  ln_temporal.reg(r, prefix + "/ln_temporal");
  ln_cross.reg(r, prefix + "/ln_cross");
  ln_ffn.reg(r, prefix + "/ln_ffn");
  attn_spatial.reg(r, prefix + "/attn_spatial");
  attn_temporal.reg(r, prefix + "/attn_temporal");
  attn_cross.reg(r, prefix + "/attn_cross");
  mlp.reg(r, prefix + "/mlp");
  modulation.reg(r, prefix + "/modulation");
}

DiT DiT::create(const DiTConfig& cfg, Rng& rng) {
  cfg.validate();
  DiT m;
  m.cfg = cfg;
  m.sched = NoiseSchedule::build(cfg.schedule, cfg.t_diff);
  m.patch_proj = nn::Linear::create(cfg.patch_volume() * cfg.latent_channels, cfg.dim, rng, 0.02);
  m.text_proj = nn::Linear::create(cfg.text_dim, cfg.dim, rng, 0.02);
  m.temb_mlp = nn::Mlp::create(cfg.dim, cfg.dim, rng, 0.02);
  for (int i = 0; i < cfg.depth; ++i) m.blocks.push_back(DiTBlock::create(cfg, rng));
  m.final_ln = nn::LayerNorm::create(cfg.dim);
  m.head = nn::Linear::create_zero(cfg.dim, cfg.patch_volume() * cfg.latent_channels);
  return m;
}

void DiT::validate_latent_shape(const Tensor& z) const {
  require_that(z.rank() == 4 && z.shape[3] == cfg.latent_channels,
               "dit: expected a (T,H,W," + std::to_string(cfg.latent_channels) +
                   ") latent, got " + z.shape_str());
  require_that(z.shape[0] % cfg.patch[0] == 0 && z.shape[1] % cfg.patch[1] == 0 &&
                   z.shape[2] % cfg.patch[2] == 0,
               "dit: latent shape " + z.shape_str() + " is not divisible by the patch size");
}

NodePtr DiT::predict_noise_node(const NodePtr& z_t, int64_t t, const NodePtr& text,
                                const BlockHook& hook) const {
  validate_latent_shape(z_t->val);
  require_that(t >= 1 && t <= cfg.t_diff, "dit: timestep " + std::to_string(t) +
                                              " outside [1, " + std::to_string(cfg.t_diff) + "]");
  require_that(text->val.rank() == 2 && text->val.shape[1] == cfg.text_dim,
               "dit: text embedding must be (*, " + std::to_string(cfg.text_dim) + ")");
  const auto grid = token_grid(z_t->val.shape, cfg.patch);
  const int64_t ft = grid[0], st = grid[1];
  const int64_t head_dim = cfg.dim / cfg.heads;

  Tensor rope_cos_s, rope_sin_s, rope_cos_t, rope_sin_t;
  nn::make_rope_tables(st, head_dim, 10000.0, rope_cos_s, rope_sin_s);
  nn::make_rope_tables(ft, head_dim, 10000.0, rope_cos_t, rope_sin_t);

  NodePtr x = ag::reshape(patch_proj.forward(ag::patchify3d(z_t, cfg.patch)), {ft, st, cfg.dim});
  NodePtr temb = temb_mlp.forward(ag::constant(sinusoidal_timestep(t, cfg.dim)));
  NodePtr text_kv =
      ag::reshape(text_proj.forward(text), {1, text->val.shape[0], cfg.dim});

  for (int i = 0; i < cfg.depth; ++i) {
    if (hook) x = hook(i, x);
    x = blocks[static_cast<size_t>(i)].forward(x, text_kv, temb, rope_cos_s, rope_sin_s,
                                               rope_cos_t, rope_sin_t);
  }
  NodePtr out = head.forward(final_ln.forward(ag::reshape(x, {ft * st, cfg.dim})));
  return ag::unpatchify3d(out, z_t->val.shape, cfg.patch);
}

Tensor DiT::predict_noise(const Tensor& z_t, int64_t t, const Tensor& text,
                          const BlockHook& hook) const {
  ag::NoGradGuard ng;
  return predict_noise_node(ag::constant(z_t), t, ag::constant(text), hook)->val;
}

NodePtr DiT::diffusion_loss_at(const Tensor& z0, int64_t t, const Tensor& eps,
                               const NodePtr& text, const FrameMask& mask,
                               const BlockHook& hook) const {
  validate_latent_shape(z0);
  require_that(eps.shape == z0.shape, "dit: noise shape must match the latent shape");
  require_that(mask.frames() == z0.shape[0],
               "dit: frame mask covers " + std::to_string(mask.frames()) + " frames, latent has " +
                   std::to_string(z0.shape[0]));
  require_that(mask.conditioning_count() < mask.frames(),
               "dit: every frame is a conditioning frame; nothing to train on");

  // Conditioning frames enter clean; the rest are diffused to level t.
  Tensor z_t = forward_diffuse(z0, t, eps, sched);
  const int64_t frame_elems = z0.shape[1] * z0.shape[2] * z0.shape[3];
  for (int64_t f = 0; f < mask.frames(); ++f)
    if (mask.is_conditioning(f))
      std::copy_n(z0.data.begin() + f * frame_elems, frame_elems,
                  z_t.data.begin() + f * frame_elems);

  NodePtr eps_hat = predict_noise_node(ag::constant(z_t), t, text, hook);

  std::vector<NodePtr> pred_frames;
  std::vector<double> target;
  for (int64_t f = 0; f < mask.frames(); ++f) {
    if (mask.is_conditioning(f)) continue;
    pred_frames.push_back(ag::slice0(eps_hat, f, 1));
    target.insert(target.end(), eps.data.begin() + f * frame_elems,
                  eps.data.begin() + (f + 1) * frame_elems);
  }
  NodePtr pred = pred_frames.size() == 1 ? pred_frames[0] : ag::concat0(pred_frames);
  Tensor target_t({static_cast<int64_t>(pred_frames.size()), z0.shape[1], z0.shape[2],
                   z0.shape[3]});
  target_t.data = std::move(target);
  return ag::mean_all(ag::square(ag::sub(pred, ag::constant(target_t))));
}

NodePtr DiT::diffusion_loss(const Tensor& z0, const NodePtr& text, const FrameMask& mask,
                            Rng& rng, const BlockHook& hook) const {
  const int64_t t = 1 + rng.randint(0, cfg.t_diff);
  Tensor eps = Tensor::randn(z0.shape, rng);
  return diffusion_loss_at(z0, t, eps, text, mask, hook);
}

void DiT::reg(nn::ParamRegistry& r) const {
  patch_proj.reg(r, "patch_proj");
  text_proj.reg(r, "text_proj");
  temb_mlp.reg(r, "temb_mlp");
  for (size_t i = 0; i < blocks.size(); ++i) blocks[i].reg(r, "block" + std::to_string(i));
  final_ln.reg(r, "final_ln");
  head.reg(r, "head");
}

nn::ParamRegistry DiT::params() const {
  nn::ParamRegistry r;
  reg(r);
  return r;
}

void DiT::save(const std::string& path) const {
  io::save_checkpoint(path, cfg.to_json(), params());
}

DiT DiT::load(const std::string& path) {
  io::Checkpoint ck = io::load_checkpoint(path);
  Rng rng(0);
  DiT m = create(DiTConfig::from_json(ck.config_json), rng);
  nn::ParamRegistry r = m.params();
  io::restore_params(ck, r);
  return m;
}

std::vector<int64_t> ddim_timesteps(int64_t t_diff, int64_t steps) {
  require_that(steps >= 1 && steps <= t_diff,
               "ddim steps " + std::to_string(steps) + " outside [1, " + std::to_string(t_diff) +
                   "]");
  std::vector<int64_t> ts;
  if (steps == 1) {
    ts.push_back(t_diff);
    return ts;
  }
  for (int64_t k = 0; k < steps; ++k) {
    const double u = static_cast<double>(k) / (steps - 1);
    const int64_t t = std::llround(t_diff - u * (t_diff - 1));
    if (ts.empty() || t < ts.back()) ts.push_back(t);
  }
  return ts;
}

Tensor ddim_sample(const NoisePredictor& predict, const NoiseSchedule& sched,
                   const std::vector<int64_t>& latent_shape, int64_t steps,
                   const FrameMask* mask, const Tensor* cond_latents, Rng& rng,
                   const Tensor* init_noise) {
  require_that(latent_shape.size() == 4, "ddim expects a (T,H,W,C) latent shape");
  const std::vector<int64_t> shape = latent_shape;
  if (mask) {
    require_that(mask->frames() == shape[0], "ddim: frame mask length mismatch");
    if (mask->conditioning_count() > 0) {
      require_that(cond_latents != nullptr && cond_latents->shape == shape,
                   "ddim: conditioning frames need matching clean latents");
    }
  }

  Tensor z = init_noise ? *init_noise : Tensor::randn(shape, rng);
  require_that(z.shape == shape, "ddim: init noise shape mismatch");
  const int64_t frame_elems = shape[1] * shape[2] * shape[3];
  auto pin_conditioning = [&](Tensor& cur) {
    if (!mask) return;
    for (int64_t f = 0; f < mask->frames(); ++f)
      if (mask->is_conditioning(f))
        std::copy_n(cond_latents->data.begin() + f * frame_elems, frame_elems,
                    cur.data.begin() + f * frame_elems);
  };
  pin_conditioning(z);

  const std::vector<int64_t> ts = ddim_timesteps(sched.steps, steps);
  for (size_t k = 0; k < ts.size(); ++k) {
    const int64_t t_now = ts[k];
    const int64_t t_prev = k + 1 < ts.size() ? ts[k + 1] : 0;
    const Tensor eps_hat = predict(z, t_now);
    require_that(eps_hat.shape == shape, "ddim: predictor returned a mismatched shape");
    const double ab_now = sched.alpha_bar(t_now), ab_prev = sched.alpha_bar(t_prev);
    const double c0 = std::sqrt(ab_prev / ab_now);
    const double ce = std::sqrt(1.0 - ab_prev) - std::sqrt(ab_prev * (1.0 - ab_now) / ab_now);
    for (size_t i = 0; i < z.data.size(); ++i)
      z.data[i] = c0 * z.data[i] + ce * eps_hat.data[i];
    if (!z.all_finite()) throw StageError("ddim: non-finite latent at t=" + std::to_string(t_now));
    pin_conditioning(z);
  }
  return z;
}

}  // namespace arlon::dit
