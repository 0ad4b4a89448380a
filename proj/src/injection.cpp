#include "arlon/injection.hpp"

#include <json.hpp>

#include <algorithm>
#include <unordered_map>

#include "arlon/errors.hpp"
#include "arlon/io.hpp"

namespace arlon::inject {

using ag::NodePtr;
using nlohmann::json;

Variant variant_from_string(const std::string& s) {
  if (s == "adaptive_norm") return Variant::adaptive_norm;
  if (s == "mlp_adapter") return Variant::mlp_adapter;
  throw ValidationError("unknown injection variant: " + s);
}

std::string variant_to_string(Variant v) {
  return v == Variant::adaptive_norm ? "adaptive_norm" : "mlp_adapter";
}

std::string InjectionConfig::to_json() const {
  json j = {{"variant", variant_to_string(variant)},
            {"inject_layers", inject_layers},
            {"uncertainty_prob", uncertainty_prob},
            {"gaussian_noise_std", gaussian_noise_std},
            {"epsilon_std", epsilon_std},
            {"literal_expectation", literal_expectation},
            {"cond_channels", cond_channels}};
  return j.dump();
}

InjectionConfig InjectionConfig::from_json(const std::string& text) {
  json j = json::parse(text);
  InjectionConfig c;
  c.variant = variant_from_string(j.at("variant").get<std::string>());
  c.inject_layers = j.at("inject_layers").get<std::vector<int>>();
  c.uncertainty_prob = j.at("uncertainty_prob").get<double>();
  c.gaussian_noise_std = j.at("gaussian_noise_std").get<double>();
  c.epsilon_std = j.at("epsilon_std").get<double>();
  c.literal_expectation = j.at("literal_expectation").get<bool>();
  c.cond_channels = j.at("cond_channels").get<int64_t>();
  return c;
}

void InjectionConfig::validate(int backbone_depth) const {
  require_that(std::is_sorted(inject_layers.begin(), inject_layers.end()) &&
                   std::adjacent_find(inject_layers.begin(), inject_layers.end()) ==
                       inject_layers.end(),
               "inject_layers must be strictly ascending");
  for (int l : inject_layers)
    require_that(l >= 0 && l < backbone_depth,
                 "inject layer " + std::to_string(l) + " outside the backbone depth " +
                     std::to_string(backbone_depth));
  require_that(uncertainty_prob >= 0.0 && uncertainty_prob <= 1.0,
               "uncertainty_prob must lie in [0, 1]");
  require_that(gaussian_noise_std >= 0.0, "gaussian_noise_std must be non-negative");
  require_that(epsilon_std > 0.0, "epsilon_std must be positive");
  require_that(cond_channels >= 1, "cond_channels must be at least 1");
}

// ---- adapter ----

Adapter Adapter::create(int64_t dim, Rng& rng) {
  Adapter a;
  a.ln = nn::LayerNorm::create(dim);
  a.mlp = nn::Mlp::create(dim, dim, rng, 0.02, /*zero_out_proj=*/true);
  return a;
}

NodePtr Adapter::forward(const NodePtr& f) const {
  return ag::add(mlp.forward(ln.forward(f)), f);
}

void Adapter::reg(nn::ParamRegistry& r, const std::string& prefix) const {
  ln.reg(r, prefix + "/ln");
  mlp.reg(r, prefix + "/mlp");
}

// ---- adaptive-norm fusion ----

FusionGate FusionGate::create(int64_t dim, Rng& rng) {
  FusionGate g;
  g.ln = nn::LayerNorm::create(dim);
  g.trunk = nn::Linear::create(dim, dim, rng, 0.02);
  g.to_alpha = nn::Linear::create_zero(dim, dim);
  g.to_beta = nn::Linear::create(dim, dim, rng, 0.02);
  g.to_gamma = nn::Linear::create(dim, dim, rng, 0.02);
  g.mlp = nn::Mlp::create(dim, dim, rng, 0.02);
  return g;
}

NodePtr FusionGate::forward(const NodePtr& x, const NodePtr& cond) const {
  require_that(x->val.shape == cond->val.shape,
               "fusion token grids differ: " + x->val.shape_str() + " vs " +
                   cond->val.shape_str());
  NodePtr h = ag::gelu(trunk.forward(cond));
  NodePtr alpha = to_alpha.forward(h);
  NodePtr beta = to_beta.forward(h);
  NodePtr gamma = to_gamma.forward(h);
  NodePtr inner = mlp.forward(ag::add(ag::mul(gamma, ln.forward(x)), beta));
  return ag::add(ag::mul(alpha, inner), x);
}

void FusionGate::reg(nn::ParamRegistry& r, const std::string& prefix) const {
  ln.reg(r, prefix + "/ln");
  trunk.reg(r, prefix + "/trunk");
  to_alpha.reg(r, prefix + "/to_alpha");
  to_beta.reg(r, prefix + "/to_beta");
  to_gamma.reg(r, prefix + "/to_gamma");
  mlp.reg(r, prefix + "/mlp");
}

// ---- additive mlp-adapter fusion ----

MlpAdapterFusion MlpAdapterFusion::create(int64_t dim, Rng& rng) {
  MlpAdapterFusion g;
  g.ln = nn::LayerNorm::create(dim);
  g.mlp = nn::Mlp::create(dim, dim, rng, 0.02, /*zero_out_proj=*/true);
  return g;
}

NodePtr MlpAdapterFusion::forward(const NodePtr& x, const NodePtr& cond) const {
  require_that(x->val.shape == cond->val.shape,
               "fusion token grids differ: " + x->val.shape_str() + " vs " +
                   cond->val.shape_str());
  return ag::add(x, mlp.forward(ln.forward(cond)));
}

void MlpAdapterFusion::reg(nn::ParamRegistry& r, const std::string& prefix) const {
  ln.reg(r, prefix + "/ln");
  mlp.reg(r, prefix + "/mlp");
}

// ---- uncertainty sampling ----

NodePtr uncertainty_sample(const NodePtr& tokens, double epsilon_std,
                           bool literal_expectation, Rng& rng) {
  require_that(tokens->val.rank() == 3, "uncertainty sampling expects (frames, space, dim)");
  const int64_t ft = tokens->val.dim(0), st = tokens->val.dim(1), c = tokens->val.dim(2);
  NodePtr flat = ag::reshape(tokens, {ft * st, c});

  NodePtr mu = ag::mean_rows(flat);
  NodePtr centered = ag::add_row(flat, ag::neg(mu));
  NodePtr sigma = ag::sqrt_op(ag::mean_rows(ag::square(centered)));
  NodePtr whitened = ag::mul_row(centered, ag::reciprocal(ag::add_scalar(sigma, epsilon_std)));

  NodePtr n_scale = ag::constant(Tensor::randn({c}, rng));
  NodePtr n_mean = ag::constant(Tensor::randn({c}, rng));
  // Scale draw ~ N(1, sigma) in the literal form; the recovery form centers it
  // at sigma so the sampled features keep the input's expectation.
  NodePtr scale_hat = literal_expectation
                          ? ag::add_scalar(ag::mul(sigma, n_scale), 1.0)
                          : ag::mul(sigma, ag::add_scalar(n_scale, 1.0));
  NodePtr mean_hat = ag::add(mu, ag::mul(sigma, n_mean));
  NodePtr out = ag::add_row(ag::mul_row(whitened, scale_hat), mean_hat);
  return ag::reshape(out, {ft, st, c});
}

Tensor gaussian_noise_ablation(const Tensor& cond, double std, Rng& rng) {
  require_that(std >= 0.0, "noise std must be non-negative");
  if (std == 0.0) return cond;
  Tensor out = cond;
  for (double& v : out.data) v += std * rng.normal();
  return out;
}

// ---- injector ----

Injector Injector::create(const InjectionConfig& cfg, const dit::DiTConfig& backbone, Rng& rng) {
  cfg.validate(backbone.depth);
  Injector inj;
  inj.cfg = cfg;
  inj.patch = backbone.patch;
  inj.dim = backbone.dim;
  inj.embed = nn::Linear::create(backbone.patch_volume() * cfg.cond_channels, backbone.dim,
                                 rng, 0.02);
  for (size_t k = 0; k < cfg.inject_layers.size(); ++k) {
    inj.adapters.push_back(Adapter::create(backbone.dim, rng));
    if (cfg.variant == Variant::adaptive_norm)
      inj.gates.push_back(FusionGate::create(backbone.dim, rng));
    else
      inj.mlp_gates.push_back(MlpAdapterFusion::create(backbone.dim, rng));
  }
  return inj;
}

NodePtr Injector::embed_condition(const NodePtr& cond) const {
  require_that(cond->val.rank() == 4, "condition must be a (T,H,W,C) volume");
  require_that(cond->val.dim(3) == cfg.cond_channels,
               "condition channel width " + std::to_string(cond->val.dim(3)) +
                   " != configured " + std::to_string(cfg.cond_channels));
  const auto grid = dit::token_grid(cond->val.shape, patch);
  NodePtr tokens = ag::patchify3d(cond, patch);
  return ag::reshape(embed.forward(tokens), {grid[0], grid[1], dim});
}

dit::BlockHook Injector::make_hook(const Tensor& cond, bool train, Rng* rng) const {
  const bool stochastic = train && (cfg.uncertainty_prob > 0.0 || cfg.gaussian_noise_std > 0.0);
  require_that(!stochastic || rng != nullptr, "training hooks need an rng");

  Tensor raw = (train && cfg.gaussian_noise_std > 0.0)
                   ? gaussian_noise_ablation(cond, cfg.gaussian_noise_std, *rng)
                   : cond;
  NodePtr g = embed_condition(ag::constant(std::move(raw)));

  // Refine sequentially; each injected layer fuses the chain state reached at
  // its own adapter, and uncertainty-sampled features feed the next stage.
  std::vector<NodePtr> fused_inputs(adapters.size());
  for (size_t k = 0; k < adapters.size(); ++k) {
    g = adapters[k].forward(g);
    if (train && cfg.uncertainty_prob > 0.0 && rng->bernoulli(cfg.uncertainty_prob))
      g = uncertainty_sample(g, cfg.epsilon_std, cfg.literal_expectation, *rng);
    fused_inputs[k] = g;
  }

  std::unordered_map<int, size_t> layer_to_stage;
  for (size_t k = 0; k < cfg.inject_layers.size(); ++k)
    layer_to_stage.emplace(cfg.inject_layers[k], k);

  return [this, stages = std::move(fused_inputs),
          map = std::move(layer_to_stage)](int index, const NodePtr& x) -> NodePtr {
    auto it = map.find(index);
    if (it == map.end()) return x;
    const size_t k = it->second;
    return cfg.variant == Variant::adaptive_norm ? gates[k].forward(x, stages[k])
                                                 : mlp_gates[k].forward(x, stages[k]);
  };
}

void Injector::reg(nn::ParamRegistry& r, const std::string& prefix) const {
  embed.reg(r, prefix + "embed");
  for (size_t k = 0; k < adapters.size(); ++k) {
    const std::string n = std::to_string(k);
    adapters[k].reg(r, prefix + "adapter" + n);
    if (cfg.variant == Variant::adaptive_norm)
      gates[k].reg(r, prefix + "gate" + n);
    else
      mlp_gates[k].reg(r, prefix + "gate" + n);
  }
}

nn::ParamRegistry Injector::params() const {
  nn::ParamRegistry r;
  reg(r, "");
  return r;
}

void Injector::save(const std::string& path) const {
  json j{{"injection", json::parse(cfg.to_json())},
         {"patch", std::vector<int>(patch.begin(), patch.end())},
         {"dim", dim}};
  io::save_checkpoint(path, j.dump(), params());
}

Injector Injector::load(const std::string& path) {
  io::Checkpoint ck = io::load_checkpoint(path);
  json j = json::parse(ck.config_json);
  InjectionConfig cfg = InjectionConfig::from_json(j.at("injection").dump());
  dit::DiTConfig backbone;
  auto p = j.at("patch").get<std::vector<int>>();
  require_that(p.size() == 3, "patch must have three extents");
  backbone.patch = {p[0], p[1], p[2]};
  backbone.dim = j.at("dim").get<int64_t>();
  backbone.depth = cfg.inject_layers.empty() ? 1 : cfg.inject_layers.back() + 1;
  Rng rng(0);
  Injector inj = create(cfg, backbone, rng);
  nn::ParamRegistry r = inj.params();
  io::restore_params(ck, r);
  return inj;
}

}  // namespace arlon::inject
