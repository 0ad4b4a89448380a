#pragma once
#include <array>
#include <string>
#include <vector>

#include "arlon/latent_vqvae.hpp"
#include "arlon/nn.hpp"
#include "arlon/optim.hpp"
#include "arlon/synth_data.hpp"
#include "arlon/tensor.hpp"

namespace arlon::ar {

// Flattened spacetime token stream: BOS, then per frame the raster-order code
// indices followed by one FRAME marker, then one EOS after the last frame.
struct TokenSequence {
  std::vector<int64_t> tokens;
  std::vector<int64_t> frame_boundaries;  // positions of the FRAME markers
  std::array<uint32_t, 3> compression{2, 2, 2};
  std::array<uint32_t, 3> grid{0, 0, 0};  // (code frames, H/o, W/o)
  uint32_t codebook_size = 0;
};

struct ARConfig {
  int layers = 4;
  int heads = 4;
  int64_t dim = 128;       // full-scale reference: 24 layers, 16 heads, dim 1024
  int64_t ffn = 512;
  double dropout = 0.1;
  int64_t max_seq = 96;    // visual positions the position table covers
  int64_t codebook_size = 64;  // content vocabulary K
  int64_t frame_h = 4, frame_w = 4;  // code grid of one frame
  std::array<int, 3> compression = {2, 2, 2};
  int64_t text_dim = 32;

  int64_t frame_tokens() const { return frame_h * frame_w; }
  // content vocabulary + FRAME, EOS, BOS, PAD
  int64_t vocab() const { return codebook_size + 4; }
  int64_t frame_id() const { return codebook_size; }
  int64_t eos_id() const { return codebook_size + 1; }
  int64_t bos_id() const { return codebook_size + 2; }
  int64_t pad_id() const { return codebook_size + 3; }
  // BOS + frames * (codes + FRAME) + EOS
  int64_t sequence_length(int64_t frames) const {
    return 1 + frames * (frame_tokens() + 1) + 1;
  }

  std::string to_json() const;
  static ARConfig from_json(const std::string& text);
  void validate() const;
};

TokenSequence flatten_grid(const vq::IndexGrid& grid, const ARConfig& cfg);
vq::IndexGrid unflatten_tokens(const TokenSequence& seq, const ARConfig& cfg);

struct ARBlock {
  nn::LayerNorm ln1, ln2;
  nn::Attention attn;
  nn::Mlp mlp;

  static ARBlock create(const ARConfig& cfg, Rng& rng);
  void reg(nn::ParamRegistry& r, const std::string& prefix) const;
};

struct SampleResult {
  vq::IndexGrid grid;
  bool truncated = false;  // requested frames did not fit the position table
};

// Decoder-only transformer over [projected text prefix | visual tokens].
// The text prefix is fully visible to every visual position (and attends
// bidirectionally within itself); visual positions are causally masked.
struct ARModel {
  ARConfig cfg;
  nn::Embedding token_emb;  // (K+4, dim)
  ag::NodePtr pos;          // learned absolute positions, (max_seq, dim)
  nn::Linear text_proj;     // text_dim -> dim
  std::vector<ARBlock> blocks;
  nn::LayerNorm final_ln;
  nn::Linear head;          // dim -> K+4

  static ARModel create(const ARConfig& cfg, Rng& rng);

  // Per-position logits over the extended vocabulary for the visual segment:
  // (len(visual), K+4). `train` enables dropout (rng required then).
  ag::NodePtr forward(const std::vector<int64_t>& visual, const ag::NodePtr& text,
                      bool train = false, Rng* rng = nullptr) const;

  // Mean teacher-forcing cross-entropy of next-token prediction over the
  // sequence (PAD targets excluded).
  ag::NodePtr loss(const TokenSequence& seq, const ag::NodePtr& text, bool train = false,
                   Rng* rng = nullptr) const;

  // Joint training step over (sequence, caption) pairs; the text encoder is
  // part of the graph, so its parameters train when the optimizer holds them.
  double train_step(const std::vector<std::pair<const TokenSequence*, std::string>>& batch,
                    const data::TextEncoder& text_enc, nn::Adam& opt, Rng& rng);

  // Masked ancestral sampling: content positions draw from the content
  // vocabulary (temperature/top-k; temperature 0 = greedy), structure
  // positions are forced, so the result always parses.
  SampleResult sample(const Tensor& text, int64_t frames, double temperature, int64_t top_k,
                      Rng& rng) const;

  // Same, but the first frame is forced to `last_frame_codes` (the overlap
  // conditioning hook); the returned grid includes it as frame 0.
  SampleResult sample_continued(const Tensor& text, const std::vector<uint16_t>& last_frame_codes,
                                int64_t total_frames, double temperature, int64_t top_k,
                                Rng& rng) const;

  void reg(nn::ParamRegistry& r) const;
  nn::ParamRegistry params() const;
  void save(const std::string& path) const;
  static ARModel load(const std::string& path);
};

}  // namespace arlon::ar
