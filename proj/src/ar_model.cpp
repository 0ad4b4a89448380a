#include "arlon/ar_model.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>

#include "arlon/errors.hpp"
#include "arlon/io.hpp"

namespace arlon::ar {

using ag::NodePtr;
using nlohmann::json;

std::string ARConfig::to_json() const {
  json j = {{"layers", layers},     {"heads", heads},
            {"dim", dim},           {"ffn", ffn},
            {"dropout", dropout},   {"max_seq", max_seq},
            {"codebook_size", codebook_size}, {"frame_h", frame_h},
            {"frame_w", frame_w},   {"compression", compression},
            {"text_dim", text_dim}};
  return j.dump();
}

ARConfig ARConfig::from_json(const std::string& text) {
  json j = json::parse(text);
  ARConfig c;
  c.layers = j.at("layers").get<int>();
  c.heads = j.at("heads").get<int>();
  c.dim = j.at("dim").get<int64_t>();
  c.ffn = j.at("ffn").get<int64_t>();
  c.dropout = j.at("dropout").get<double>();
  c.max_seq = j.at("max_seq").get<int64_t>();
  c.codebook_size = j.at("codebook_size").get<int64_t>();
  c.frame_h = j.at("frame_h").get<int64_t>();
  c.frame_w = j.at("frame_w").get<int64_t>();
  c.compression = j.at("compression").get<std::array<int, 3>>();
  c.text_dim = j.at("text_dim").get<int64_t>();
  return c;
}

void ARConfig::validate() const {
  require_that(layers >= 1 && heads >= 1, "ar: layers and heads must be >= 1");
  require_that(dim % heads == 0, "ar: model dim must be divisible by heads");
  require_that(ffn >= 1 && text_dim >= 1, "ar: widths must be >= 1");
  require_that(dropout >= 0.0 && dropout < 1.0, "ar: dropout must be in [0,1)");
  require_that(codebook_size >= 1 && codebook_size <= 65535,
               "ar: codebook size must be in [1, 65535]");
  require_that(frame_h >= 1 && frame_w >= 1, "ar: frame grid must be >= 1x1");
  require_that(max_seq >= sequence_length(1),
               "ar: max_seq " + std::to_string(max_seq) +
                   " cannot hold even a single frame (needs " +
                   std::to_string(sequence_length(1)) + ")");
}

TokenSequence flatten_grid(const vq::IndexGrid& grid, const ARConfig& cfg) {
  require_that(grid.codebook_size == static_cast<uint32_t>(cfg.codebook_size),
               "flatten: grid codebook size " + std::to_string(grid.codebook_size) +
                   " does not match the model's K=" + std::to_string(cfg.codebook_size));
  const int64_t frames = grid.grid[0], gh = grid.grid[1], gw = grid.grid[2];
  require_that(static_cast<int64_t>(grid.indices.size()) == frames * gh * gw,
               "flatten: index count does not match the grid dims");
  TokenSequence seq;
  seq.compression = grid.compression;
  seq.grid = grid.grid;
  seq.codebook_size = grid.codebook_size;
  seq.tokens.reserve(static_cast<size_t>(cfg.sequence_length(frames)));
  seq.tokens.push_back(cfg.bos_id());
  int64_t at = 0;
  for (int64_t f = 0; f < frames; ++f) {
    for (int64_t i = 0; i < gh * gw; ++i, ++at) {
      const uint16_t idx = grid.indices[static_cast<size_t>(at)];
      require_that(idx < cfg.codebook_size, "flatten: content index out of range");
      seq.tokens.push_back(idx);
    }
    seq.frame_boundaries.push_back(static_cast<int64_t>(seq.tokens.size()));
    seq.tokens.push_back(cfg.frame_id());
  }
  seq.tokens.push_back(cfg.eos_id());
  return seq;
}

vq::IndexGrid unflatten_tokens(const TokenSequence& seq, const ARConfig& cfg) {
  const int64_t frames = seq.grid[0], gh = seq.grid[1], gw = seq.grid[2];
  require_that(static_cast<int64_t>(seq.tokens.size()) == cfg.sequence_length(frames),
               "unflatten: sequence length " + std::to_string(seq.tokens.size()) +
                   " does not match " + std::to_string(frames) + " frames of " +
                   std::to_string(gh) + "x" + std::to_string(gw) + " codes");
  require_that(seq.tokens.front() == cfg.bos_id(), "unflatten: sequence must start with BOS");
  require_that(seq.tokens.back() == cfg.eos_id(), "unflatten: sequence must end with EOS");
  vq::IndexGrid grid;
  grid.compression = seq.compression;
  grid.grid = seq.grid;
  grid.codebook_size = seq.codebook_size;
  grid.indices.reserve(static_cast<size_t>(frames * gh * gw));
  int64_t p = 1;
  for (int64_t f = 0; f < frames; ++f) {
    for (int64_t i = 0; i < gh * gw; ++i, ++p) {
      const int64_t tok = seq.tokens[static_cast<size_t>(p)];
      require_that(tok >= 0 && tok < cfg.codebook_size,
                   "unflatten: expected a content token at position " + std::to_string(p) +
                       ", got " + std::to_string(tok));
      grid.indices.push_back(static_cast<uint16_t>(tok));
    }
    require_that(seq.tokens[static_cast<size_t>(p)] == cfg.frame_id(),
                 "unflatten: expected the FRAME marker at position " + std::to_string(p));
    ++p;
  }
  return grid;
}

ARBlock ARBlock::create(const ARConfig& cfg, Rng& rng) {
  ARBlock b;
  b.ln1 = nn::LayerNorm::create(cfg.dim);
  b.ln2 = nn::LayerNorm::create(cfg.dim);
  b.attn = nn::Attention::create(cfg.dim, cfg.heads, rng, 0.02);
  b.mlp = nn::Mlp::create(cfg.dim, cfg.ffn, rng, 0.02);
  return b;
}

void ARBlock::reg(nn::ParamRegistry& r, const std::string& prefix) const {
  ln1.reg(r, prefix + "/ln1");
  ln2.reg(r, prefix + "/ln2");
  attn.reg(r, prefix + "/attn");
  mlp.reg(r, prefix + "/mlp");
}

ARModel ARModel::create(const ARConfig& cfg, Rng& rng) {
  cfg.validate();
  ARModel m;
  m.cfg = cfg;
  m.token_emb = nn::Embedding::create(cfg.vocab(), cfg.dim, rng);
  m.pos = ag::leaf(Tensor::randn({cfg.max_seq, cfg.dim}, rng, 0.0, 0.02), true);
  m.text_proj = nn::Linear::create(cfg.text_dim, cfg.dim, rng, 0.02);
  for (int i = 0; i < cfg.layers; ++i) m.blocks.push_back(ARBlock::create(cfg, rng));
  m.final_ln = nn::LayerNorm::create(cfg.dim);
  m.head = nn::Linear::create(cfg.dim, cfg.vocab(), rng, 0.02);
  return m;
}

// Text prefix: bidirectional within itself, blind to the visual suffix.
// Visual positions: see all text plus visual positions <= their own.
static Tensor prefix_causal_mask(int64_t lt, int64_t lv) {
  const double neg_inf = -std::numeric_limits<double>::infinity();
  const int64_t n = lt + lv;
  Tensor mask = Tensor::zeros({n, n});
  for (int64_t q = 0; q < n; ++q)
    for (int64_t k = 0; k < n; ++k) {
      const bool blocked = k >= lt && (q < lt || k > q);
      if (blocked) mask.at({q, k}) = neg_inf;
    }
  return mask;
}

NodePtr ARModel::forward(const std::vector<int64_t>& visual, const NodePtr& text, bool train,
                         Rng* rng) const {
  const int64_t lv = static_cast<int64_t>(visual.size());
  require_that(lv >= 1, "ar forward: empty visual sequence");
  require_that(lv <= cfg.max_seq, "ar forward: visual sequence of " + std::to_string(lv) +
                                      " tokens exceeds the position table (max " +
                                      std::to_string(cfg.max_seq) + ")");
  require_that(text->val.rank() == 2 && text->val.shape[1] == cfg.text_dim,
               "ar forward: text embedding must be (*, " + std::to_string(cfg.text_dim) + ")");
  require_that(!train || rng != nullptr, "ar forward: training mode needs an rng");
  const int64_t lt = text->val.shape[0];

  Rng unused_rng(0);
  Rng& drop_rng = rng ? *rng : unused_rng;
  NodePtr t = text_proj.forward(text);
  NodePtr v = ag::add(token_emb.forward(visual), ag::slice0(pos, 0, lv));
  NodePtr x = ag::reshape(ag::concat0({t, v}), {1, lt + lv, cfg.dim});
  Tensor mask = prefix_causal_mask(lt, lv);
  for (const ARBlock& b : blocks) {
    NodePtr normed = b.ln1.forward(x);
    NodePtr a = b.attn.forward(normed, normed, nullptr, nullptr, &mask);
    x = ag::add(x, nn::dropout(a, cfg.dropout, train, drop_rng));
    NodePtr f = b.mlp.forward(b.ln2.forward(x));
    x = ag::add(x, nn::dropout(f, cfg.dropout, train, drop_rng));
  }
  NodePtr flat = ag::reshape(x, {lt + lv, cfg.dim});
  return head.forward(final_ln.forward(ag::slice0(flat, lt, lv)));
}

NodePtr ARModel::loss(const TokenSequence& seq, const NodePtr& text, bool train,
                      Rng* rng) const {
  require_that(seq.tokens.size() >= 2, "ar loss: sequence too short");
  std::vector<int64_t> input(seq.tokens.begin(), seq.tokens.end() - 1);
  std::vector<int64_t> targets(seq.tokens.begin() + 1, seq.tokens.end());
  for (int64_t& t : targets)
    if (t == cfg.pad_id()) t = -1;  // excluded from the mean
  NodePtr logits = forward(input, text, train, rng);
  return ag::cross_entropy_rows(logits, targets);
}

double ARModel::train_step(
    const std::vector<std::pair<const TokenSequence*, std::string>>& batch,
    const data::TextEncoder& text_enc, nn::Adam& opt, Rng& rng) {
  require_that(!batch.empty(), "ar: empty training batch");
  NodePtr total;
  for (const auto& [seq, caption] : batch) {
    NodePtr li = loss(*seq, text_enc.encode(caption), true, &rng);
    total = total ? ag::add(total, li) : li;
  }
  total = ag::scale(total, 1.0 / static_cast<double>(batch.size()));
  const double value = total->val.data[0];
  if (!std::isfinite(value))
    throw StageError("ar: non-finite training loss at optimizer step " +
                     std::to_string(opt.steps_taken()));
  opt.zero_grad();
  ag::backward(total);
  opt.step();
  return value;
}

// Temperature/top-k draw from one logits row restricted to content ids;
// ties and temperature 0 resolve to the lowest index.
static int64_t pick_content_token(const double* row, const ARConfig& cfg, double temperature,
                                  int64_t top_k, Rng& rng) {
  require_that(temperature >= 0.0, "ar sample: temperature must be >= 0");
  std::vector<std::pair<double, int64_t>> cand;
  cand.reserve(static_cast<size_t>(cfg.codebook_size));
  for (int64_t id = 0; id < cfg.codebook_size; ++id) cand.emplace_back(row[id], id);
  std::sort(cand.begin(), cand.end(), [](const auto& a, const auto& b) {
    return a.first != b.first ? a.first > b.first : a.second < b.second;
  });
  const int64_t k = std::clamp<int64_t>(top_k, 1, cfg.codebook_size);
  if (temperature == 0.0) return cand[0].second;
  std::vector<double> w(static_cast<size_t>(k));
  double z = 0;
  for (int64_t i = 0; i < k; ++i) {
    w[static_cast<size_t>(i)] = std::exp((cand[static_cast<size_t>(i)].first - cand[0].first) /
                                         temperature);
    z += w[static_cast<size_t>(i)];
  }
  double u = rng.uniform() * z, acc = 0;
  for (int64_t i = 0; i < k; ++i) {
    acc += w[static_cast<size_t>(i)];
    if (u <= acc) return cand[static_cast<size_t>(i)].second;
  }
  return cand[static_cast<size_t>(k - 1)].second;
}

static SampleResult sample_impl(const ARModel& m, const Tensor& text,
                                const std::vector<uint16_t>* forced_frame,
                                int64_t requested_frames, double temperature, int64_t top_k,
                                Rng& rng) {
  const ARConfig& cfg = m.cfg;
  require_that(requested_frames >= 1, "ar sample: must request at least one frame");
  const int64_t cap = (cfg.max_seq - 2) / (cfg.frame_tokens() + 1);
  SampleResult out;
  const int64_t frames = std::min(requested_frames, cap);
  out.truncated = frames < requested_frames;

  ag::NoGradGuard ng;
  NodePtr text_node = ag::constant(text);
  std::vector<int64_t> vis;
  vis.reserve(static_cast<size_t>(cfg.sequence_length(frames)));
  vis.push_back(cfg.bos_id());
  int64_t first_free_frame = 0;
  if (forced_frame) {
    require_that(static_cast<int64_t>(forced_frame->size()) == cfg.frame_tokens(),
                 "ar continuation: conditioning frame must hold " +
                     std::to_string(cfg.frame_tokens()) + " codes, got " +
                     std::to_string(forced_frame->size()));
    for (uint16_t c : *forced_frame) {
      require_that(c < cfg.codebook_size, "ar continuation: conditioning code out of range");
      vis.push_back(c);
    }
    vis.push_back(cfg.frame_id());
    first_free_frame = 1;
  }
  for (int64_t f = first_free_frame; f < frames; ++f) {
    for (int64_t i = 0; i < cfg.frame_tokens(); ++i) {
      NodePtr logits = m.forward(vis, text_node);
      const double* row =
          logits->val.data.data() + (logits->val.shape[0] - 1) * logits->val.shape[1];
      vis.push_back(pick_content_token(row, cfg, temperature, top_k, rng));
    }
    vis.push_back(cfg.frame_id());
  }
  vis.push_back(cfg.eos_id());

  TokenSequence seq;
  seq.tokens = std::move(vis);
  seq.compression = {static_cast<uint32_t>(cfg.compression[0]),
                     static_cast<uint32_t>(cfg.compression[1]),
                     static_cast<uint32_t>(cfg.compression[2])};
  seq.grid = {static_cast<uint32_t>(frames), static_cast<uint32_t>(cfg.frame_h),
              static_cast<uint32_t>(cfg.frame_w)};
  seq.codebook_size = static_cast<uint32_t>(cfg.codebook_size);
  out.grid = unflatten_tokens(seq, cfg);
  return out;
}

SampleResult ARModel::sample(const Tensor& text, int64_t frames, double temperature,
                             int64_t top_k, Rng& rng) const {
  return sample_impl(*this, text, nullptr, frames, temperature, top_k, rng);
}

SampleResult ARModel::sample_continued(const Tensor& text,
                                       const std::vector<uint16_t>& last_frame_codes,
                                       int64_t total_frames, double temperature, int64_t top_k,
                                       Rng& rng) const {
  return sample_impl(*this, text, &last_frame_codes, total_frames, temperature, top_k, rng);
}

void ARModel::reg(nn::ParamRegistry& r) const {
  token_emb.reg(r, "token_emb");
  r.add("pos", pos);
  text_proj.reg(r, "text_proj");
  for (size_t i = 0; i < blocks.size(); ++i) blocks[i].reg(r, "block" + std::to_string(i));
  final_ln.reg(r, "final_ln");
  head.reg(r, "head");
}

nn::ParamRegistry ARModel::params() const {
  nn::ParamRegistry r;
  reg(r);
  return r;
}

void ARModel::save(const std::string& path) const {
  io::save_checkpoint(path, cfg.to_json(), params());
}

ARModel ARModel::load(const std::string& path) {
  io::Checkpoint ck = io::load_checkpoint(path);
  Rng rng(0);
  ARModel m = create(ARConfig::from_json(ck.config_json), rng);
  nn::ParamRegistry r = m.params();
  io::restore_params(ck, r);
  return m;
}

}  // namespace arlon::ar
