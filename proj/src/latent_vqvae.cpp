#include "arlon/latent_vqvae.hpp"

#include <json.hpp>

#include <iostream>

#include "arlon/errors.hpp"

namespace arlon::vq {

using ag::NodePtr;
using nlohmann::json;

VqVaeConfig VqVaeConfig::fine() { return VqVaeConfig{}; }

VqVaeConfig VqVaeConfig::coarse() {
  VqVaeConfig c;
  c.compression = {2, 4, 4};
  return c;
}

std::string VqVaeConfig::to_json() const {
  json j = {{"compression", compression}, {"codebook_size", codebook_size},
            {"code_dim", code_dim},       {"hidden", hidden},
            {"input_channels", input_channels}, {"commitment_weight", commitment_weight},
            {"attn_heads", attn_heads}};
  return j.dump();
}

VqVaeConfig VqVaeConfig::from_json(const std::string& text) {
  json j = json::parse(text);
  VqVaeConfig c;
  c.compression = j.at("compression").get<std::array<int, 3>>();
  c.codebook_size = j.at("codebook_size").get<int64_t>();
  c.code_dim = j.at("code_dim").get<int64_t>();
  c.hidden = j.at("hidden").get<int64_t>();
  c.input_channels = j.at("input_channels").get<int64_t>();
  c.commitment_weight = j.at("commitment_weight").get<double>();
  c.attn_heads = j.at("attn_heads").get<int>();
  return c;
}

static bool is_pow2(int v) { return v >= 1 && (v & (v - 1)) == 0; }

static std::string variant_label(const std::array<int, 3>& c) {
  if (c == std::array<int, 3>{2, 2, 2}) return "fine";
  if (c == std::array<int, 3>{2, 4, 4}) return "coarse";
  return "custom(" + std::to_string(c[0]) + "," + std::to_string(c[1]) + "," +
         std::to_string(c[2]) + ")";
}

void VqVaeConfig::validate() const {
  require_that(is_pow2(compression[0]) && is_pow2(compression[1]) && is_pow2(compression[2]),
               "vq vae: compression factors must be powers of two");
  require_that(compression[1] == compression[2],
               "vq vae: spatial compression must match in H and W");
  require_that(codebook_size >= 1 && codebook_size <= 65535,
               "vq vae: codebook size must be in [1, 65535]");
  require_that(code_dim >= 1 && hidden >= 1 && input_channels >= 1,
               "vq vae: widths must be >= 1");
  require_that(hidden % attn_heads == 0, "vq vae: attn_heads must divide hidden width");
  require_that(commitment_weight >= 0.0, "vq vae: commitment weight must be >= 0");
}

// Halve every factor that is still > 1 until the full compression is reached;
// (2,2,2) gives one stage, (2,4,4) gives (2,2,2) then (1,2,2).
static std::vector<std::array<int, 3>> stage_strides(const std::array<int, 3>& compression) {
  std::vector<std::array<int, 3>> stages;
  int r = compression[0], oh = compression[1], ow = compression[2];
  while (r > 1 || oh > 1 || ow > 1) {
    std::array<int, 3> s = {r > 1 ? 2 : 1, oh > 1 ? 2 : 1, ow > 1 ? 2 : 1};
    stages.push_back(s);
    r /= s[0];
    oh /= s[1];
    ow /= s[2];
  }
  return stages;
}

ResAttnBlock ResAttnBlock::create(int64_t dim, int heads, Rng& rng) {
  ResAttnBlock b;
  b.norm = nn::LayerNorm::create(dim);
  b.attn = nn::Attention::create(dim, heads, rng, 0.02, /*zero_out_proj=*/true);
  return b;
}

NodePtr ResAttnBlock::forward(const NodePtr& grid) const {
  const auto& s = grid->val.shape;
  NodePtr x = ag::reshape(grid, {1, s[0] * s[1] * s[2], s[3]});
  NodePtr normed = norm.forward(x);
  NodePtr y = attn.forward(normed, normed);
  return ag::reshape(ag::add(x, y), {s[0], s[1], s[2], s[3]});
}

void ResAttnBlock::reg(nn::ParamRegistry& r, const std::string& prefix) const {
  norm.reg(r, prefix + "/norm");
  attn.reg(r, prefix + "/attn");
}

VqVae VqVae::create(const VqVaeConfig& cfg, Rng& rng) {
  cfg.validate();
  VqVae m;
  m.cfg = cfg;
  const int64_t h = cfg.hidden;
  m.stem = nn::Conv3d::create({3, 3, 3}, cfg.input_channels, h, {1, 1, 1}, {1, 1, 1}, rng);
  for (const auto& s : stage_strides(cfg.compression)) {
    m.enc_convs.push_back(nn::Conv3d::create({3, 3, 3}, h, h, s, {1, 1, 1}, rng));
    m.enc_res.push_back(vae::VaeResBlock::create(h, rng));
  }
  m.enc_attn = ResAttnBlock::create(h, cfg.attn_heads, rng);
  m.to_code = nn::Conv3d::create({1, 1, 1}, h, cfg.code_dim, {1, 1, 1}, {0, 0, 0}, rng);
  m.codebook.entries =
      ag::leaf(Tensor::randn({cfg.codebook_size, cfg.code_dim}, rng, 0.0, 0.5), true);
  m.codebook.usage_counts.assign(static_cast<size_t>(cfg.codebook_size), 0);
  m.from_code = nn::Conv3d::create({1, 1, 1}, cfg.code_dim, h, {1, 1, 1}, {0, 0, 0}, rng);
  m.dec_attn = ResAttnBlock::create(h, cfg.attn_heads, rng);
  for (const auto& s : stage_strides(cfg.compression)) {
    (void)s;
    m.dec_convs.push_back(nn::Conv3d::create({3, 3, 3}, h, h, {1, 1, 1}, {1, 1, 1}, rng));
    m.dec_res.push_back(vae::VaeResBlock::create(h, rng));
  }
  m.recon_head = nn::Conv3d::create({3, 3, 3}, h, cfg.input_channels, {1, 1, 1}, {1, 1, 1}, rng);
  return m;
}

void VqVae::validate_latent_shape(const Tensor& z) const {
  require_that(z.rank() == 4 && z.shape[3] == cfg.input_channels,
               "vq vae (" + variant_label(cfg.compression) + "): expected a (T',H',W'," +
                   std::to_string(cfg.input_channels) + ") latent, got " + z.shape_str());
  require_that(z.shape[0] % cfg.compression[0] == 0 && z.shape[1] % cfg.compression[1] == 0 &&
                   z.shape[2] % cfg.compression[2] == 0,
               "vq vae (" + variant_label(cfg.compression) + "): latent dims " + z.shape_str() +
                   " must be divisible by the compression triple (" +
                   std::to_string(cfg.compression[0]) + "," + std::to_string(cfg.compression[1]) +
                   "," + std::to_string(cfg.compression[2]) + ")");
}

std::array<int64_t, 3> VqVae::code_grid_shape(const std::array<int64_t, 3>& g) const {
  return {g[0] / cfg.compression[0], g[1] / cfg.compression[1], g[2] / cfg.compression[2]};
}

NodePtr VqVae::encode_node(const NodePtr& z) const {
  NodePtr h = stem.forward(z);
  for (size_t i = 0; i < enc_convs.size(); ++i)
    h = enc_res[i].forward(enc_convs[i].forward(h));
  return to_code.forward(enc_attn.forward(h));
}

Tensor VqVae::encode(const Tensor& z) const {
  validate_latent_shape(z);
  ag::NoGradGuard ng;
  return encode_node(ag::constant(z))->val;
}

QuantizeResult VqVae::quantize(const NodePtr& embeddings) {
  const auto& s = embeddings->val.shape;
  require_that(s.size() == 4 && s[3] == codebook.dim(),
               "quantize: embeddings last dim must equal the code dimension " +
                   std::to_string(codebook.dim()) + ", got " + embeddings->val.shape_str());
  const int64_t n = s[0] * s[1] * s[2], m = s[3], k = codebook.size();
  const double* v = embeddings->val.data.data();
  const double* e = codebook.entries->val.data.data();

  QuantizeResult out;
  out.grid.compression = {static_cast<uint32_t>(cfg.compression[0]),
                          static_cast<uint32_t>(cfg.compression[1]),
                          static_cast<uint32_t>(cfg.compression[2])};
  out.grid.grid = {static_cast<uint32_t>(s[0]), static_cast<uint32_t>(s[1]),
                   static_cast<uint32_t>(s[2])};
  out.grid.codebook_size = static_cast<uint32_t>(k);
  out.grid.indices.resize(static_cast<size_t>(n));

  std::vector<int64_t> ids(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) {
    const double* row = v + i * m;
    double best = std::numeric_limits<double>::infinity();
    int64_t best_j = 0;
    for (int64_t j = 0; j < k; ++j) {
      const double* entry = e + j * m;
      double d = 0;
      for (int64_t c = 0; c < m; ++c) {
        const double diff = row[c] - entry[c];
        d += diff * diff;
      }
      if (d < best) {  // strict: ties keep the lowest index
        best = d;
        best_j = j;
      }
    }
    ids[static_cast<size_t>(i)] = best_j;
    out.grid.indices[static_cast<size_t>(i)] = static_cast<uint16_t>(best_j);
    ++codebook.usage_counts[static_cast<size_t>(best_j)];
  }

  NodePtr selected = ag::reshape(ag::embed_rows(codebook.entries, ids), {s[0], s[1], s[2], m});
  Tensor jump = selected->val;  // e - V, constant: the straight-through hop
  for (int64_t i = 0; i < jump.numel(); ++i) jump.data[static_cast<size_t>(i)] -=
      embeddings->val.data[static_cast<size_t>(i)];
  out.quantized = ag::add(embeddings, ag::constant(jump));
  out.codebook_loss = ag::mean_all(ag::square(ag::sub(selected, ag::constant(embeddings->val))));
  out.commitment_loss =
      ag::mean_all(ag::square(ag::sub(embeddings, ag::constant(selected->val))));
  return out;
}

NodePtr VqVae::decode_node(const NodePtr& quantized) const {
  NodePtr h = dec_attn.forward(from_code.forward(quantized));
  auto stages = stage_strides(cfg.compression);
  for (size_t i = 0; i < stages.size(); ++i) {
    const auto& st = stages[stages.size() - 1 - i];
    h = ag::upsample3d_nearest(h, {st[0], st[1], st[2]});
    h = dec_res[i].forward(dec_convs[i].forward(h));
  }
  return recon_head.forward(h);
}

Tensor VqVae::decode_indices(const IndexGrid& grid) const {
  require_that(grid.compression[0] == static_cast<uint32_t>(cfg.compression[0]) &&
                   grid.compression[1] == static_cast<uint32_t>(cfg.compression[1]) &&
                   grid.compression[2] == static_cast<uint32_t>(cfg.compression[2]),
               "decode_indices: grid was produced by compression (" +
                   std::to_string(grid.compression[0]) + "," +
                   std::to_string(grid.compression[1]) + "," +
                   std::to_string(grid.compression[2]) + "), this model is " +
                   variant_label(cfg.compression));
  const int64_t t = grid.grid[0], gh = grid.grid[1], gw = grid.grid[2];
  require_that(static_cast<int64_t>(grid.indices.size()) == t * gh * gw,
               "decode_indices: index count does not match the grid dims");
  std::vector<int64_t> ids(grid.indices.size());
  for (int64_t i = 0; i < static_cast<int64_t>(grid.indices.size()); ++i) {
    const uint16_t idx = grid.indices[static_cast<size_t>(i)];
    if (idx >= codebook.size()) {
      const int64_t ti = i / (gh * gw), hi = (i / gw) % gh, wi = i % gw;
      throw ValidationError("decode_indices: index " + std::to_string(idx) +
                            " at position (t=" + std::to_string(ti) + ",h=" + std::to_string(hi) +
                            ",w=" + std::to_string(wi) + ") is outside the codebook (K=" +
                            std::to_string(codebook.size()) + ")");
    }
    ids[static_cast<size_t>(i)] = idx;
  }
  ag::NoGradGuard ng;
  NodePtr q = ag::reshape(ag::embed_rows(codebook.entries, ids), {t, gh, gw, codebook.dim()});
  return decode_node(q)->val;
}

IndexGrid VqVae::tokenize_latent(const Tensor& z) {
  validate_latent_shape(z);
  ag::NoGradGuard ng;
  return quantize(encode_node(ag::constant(z))).grid;
}

VqLosses VqVae::train_step(const std::vector<const Tensor*>& batch, nn::Adam& opt) {
  require_that(!batch.empty(), "vq vae: empty training batch");
  NodePtr total, recon_sum, code_sum, commit_sum;
  auto accum = [](NodePtr& acc, const NodePtr& term) {
    acc = acc ? ag::add(acc, term) : term;
  };
  for (const Tensor* z : batch) {
    validate_latent_shape(*z);
    NodePtr zc = ag::constant(*z);
    QuantizeResult qr = quantize(encode_node(zc));
    NodePtr recon = decode_node(qr.quantized);
    NodePtr rec_loss = ag::mean_all(ag::square(ag::sub(recon, zc)));
    accum(recon_sum, rec_loss);
    accum(code_sum, qr.codebook_loss);
    accum(commit_sum, qr.commitment_loss);
    accum(total, ag::add(rec_loss, ag::add(qr.codebook_loss,
                                           ag::scale(qr.commitment_loss,
                                                     cfg.commitment_weight))));
  }
  const double inv = 1.0 / static_cast<double>(batch.size());
  total = ag::scale(total, inv);
  VqLosses out;
  out.total = total->val.data[0];
  out.reconstruction = recon_sum->val.data[0] * inv;
  out.codebook = code_sum->val.data[0] * inv;
  out.commitment = commit_sum->val.data[0] * inv;
  if (!std::isfinite(out.total))
    throw StageError("vq vae (" + variant_label(cfg.compression) +
                     "): non-finite training loss at optimizer step " +
                     std::to_string(opt.steps_taken()));
  opt.zero_grad();
  ag::backward(total);
  opt.step();
  return out;
}

int VqVae::revive_dead_entries(const std::vector<const Tensor*>& latents, Rng& rng) {
  const int64_t k = codebook.size();
  int64_t dead = 0;
  for (int64_t j = 0; j < k; ++j)
    if (codebook.usage_counts[static_cast<size_t>(j)] == 0) ++dead;
  if (dead > (9 * k) / 10)
    std::cerr << "[vq vae " << variant_label(cfg.compression) << "] warning: codebook collapse, "
              << dead << "/" << k << " entries unused this epoch\n";
  if (dead > 0 && !latents.empty()) {
    // pool of fresh encoder outputs to reseed from
    std::vector<Tensor> pool;
    for (int draw = 0; draw < 4 && static_cast<int64_t>(pool.size()) * 8 < dead * 2; ++draw)
      pool.push_back(encode(*latents[static_cast<size_t>(
          rng.randint(0, static_cast<int64_t>(latents.size())))]));
    std::vector<const double*> rows;
    for (const Tensor& p : pool) {
      const int64_t n = p.numel() / p.shape[3];
      for (int64_t i = 0; i < n; ++i) rows.push_back(p.data.data() + i * p.shape[3]);
    }
    const int64_t m = codebook.dim();
    for (int64_t j = 0; j < k; ++j) {
      if (codebook.usage_counts[static_cast<size_t>(j)] != 0) continue;
      const double* src = rows[static_cast<size_t>(
          rng.randint(0, static_cast<int64_t>(rows.size())))];
      std::copy(src, src + m, codebook.entries->val.data.begin() + j * m);
    }
  }
  codebook.reset_usage();
  return static_cast<int>(dead);
}

void VqVae::reg(nn::ParamRegistry& r) const {
  stem.reg(r, "enc/stem");
  for (size_t i = 0; i < enc_convs.size(); ++i) {
    enc_convs[i].reg(r, "enc/conv" + std::to_string(i));
    enc_res[i].reg(r, "enc/res" + std::to_string(i));
  }
  enc_attn.reg(r, "enc/attn");
  to_code.reg(r, "enc/to_code");
  r.add("codebook/entries", codebook.entries);
  from_code.reg(r, "dec/from_code");
  dec_attn.reg(r, "dec/attn");
  for (size_t i = 0; i < dec_convs.size(); ++i) {
    dec_convs[i].reg(r, "dec/conv" + std::to_string(i));
    dec_res[i].reg(r, "dec/res" + std::to_string(i));
  }
  recon_head.reg(r, "dec/recon_head");
}

nn::ParamRegistry VqVae::params() const {
  nn::ParamRegistry r;
  reg(r);
  return r;
}

void VqVae::save(const std::string& path) const {
  Tensor usage({static_cast<int64_t>(codebook.usage_counts.size())});
  for (size_t i = 0; i < codebook.usage_counts.size(); ++i)
    usage.data[i] = static_cast<double>(codebook.usage_counts[i]);
  io::save_checkpoint(path, cfg.to_json(), params(), {{"usage_counts", usage}});
}

VqVae VqVae::load(const std::string& path) {
  io::Checkpoint ck = io::load_checkpoint(path);
  Rng rng(0);
  VqVae m = create(VqVaeConfig::from_json(ck.config_json), rng);
  nn::ParamRegistry r = m.params();
  io::restore_params(ck, r);
  if (const Tensor* usage = ck.find("usage_counts"))
    for (size_t i = 0; i < m.codebook.usage_counts.size(); ++i)
      m.codebook.usage_counts[i] = static_cast<int64_t>(usage->data[i]);
  return m;
}

Tensor semantic_condition(const vae::VideoVae& outer, VqVae& inner, const Tensor& video) {
  return inner.decode_indices(inner.tokenize_latent(outer.encode(video)));
}

}  // namespace arlon::vq
