#pragma once
#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "arlon/nn.hpp"
#include "arlon/tensor.hpp"

namespace arlon::data {

enum class Shape { square, circle, triangle };
enum class Color { red, green, blue, yellow, magenta, cyan };
enum class Motion { left_to_right, right_to_left, top_to_bottom, bottom_to_top, diagonal, statik };

const char* to_string(Shape s);
const char* to_string(Color c);
const char* to_string(Motion m);
std::array<double, 3> rgb_of(Color c);
// Unit step (dx, dy) per frame at speed 1; x = column, y = row.
std::array<int, 2> direction_of(Motion m);

struct SceneSpec {
  Shape shape = Shape::square;
  Color color = Color::red;
  Motion motion = Motion::statik;
  int speed = 0;  // pixels per frame; static scenes use 0, moving scenes >= 1
  uint64_t seed = 0;
};

struct RenderConfig {
  int frames = 16;
  int height = 32;
  int width = 32;
  int shape_size = 8;  // bounding-box side of the shape, pixels
  int margin = 1;      // minimum distance kept from every border
};

// Validates that the shape stays fully inside the frame for all frames
// (start position is seeded within the legal band); throws ValidationError
// naming the offending fields otherwise.
void validate_scene(const SceneSpec& spec, const RenderConfig& cfg);

// (T,H,W,3) float video in [0,1]; background black, one rigidly moving shape.
Tensor render_video(const SceneSpec& spec, const RenderConfig& cfg);

// Binary foreground mask (H,W) for frame t; the renderer's ground truth.
Tensor ground_truth_mask(const SceneSpec& spec, const RenderConfig& cfg, int t);

// Top-left shape position at frame t (x=column, y=row).
std::array<int, 2> shape_position(const SceneSpec& spec, const RenderConfig& cfg, int t);

std::string caption_for(const SceneSpec& spec);

// ---- caption vocabulary ----
// Fixed word list (id 0 is the pad token); tokenize splits on spaces and
// rejects words outside the grammar, detokenize(tokenize(s)) == s.
int64_t vocab_size();
int64_t pad_token_id();
std::vector<int64_t> tokenize(const std::string& caption);
std::string detokenize(const std::vector<int64_t>& ids);

struct TextConfig {
  int64_t max_tokens = 12;  // prompts are padded/validated to this length
  int64_t dim = 32;
};

// Learned token embedding + learned positional offsets. Trained jointly with
// the autoregressive stage, then frozen for the diffusion stages.
struct TextEncoder {
  TextConfig cfg;
  nn::Embedding table;  // (vocab, dim)
  ag::NodePtr pos;      // (max_tokens, dim)

  static TextEncoder create(const TextConfig& cfg, Rng& rng);
  // Pads with the pad token to max_tokens; rejects longer prompts.
  // Output shape: (max_tokens, dim).
  ag::NodePtr encode(const std::string& caption) const;
  ag::NodePtr encode_ids(std::vector<int64_t> ids) const;
  Tensor encode_const(const std::string& caption) const;
  void reg(nn::ParamRegistry& r, const std::string& prefix) const;
};

// ---- corpus ----
struct CorpusConfig {
  RenderConfig render;
  int per_motion = 20;           // videos per motion class
  double holdout_fraction = 0.1;
  int moving_speed = 1;
  uint64_t master_seed = 1234;
};

struct CorpusItem {
  std::string id;
  SceneSpec spec;
  std::string caption;
  std::string file;  // relative path under the corpus root
  std::string split; // "train" | "holdout"
  std::string content_hash;
};

struct Corpus {
  CorpusConfig cfg;
  std::string root;
  std::vector<CorpusItem> items;

  std::vector<const CorpusItem*> split_items(const std::string& split) const;
};

// Renders every video, writes raw array files + captions.tsv + manifest.json.
// Fully deterministic in the master seed.
Corpus build_corpus(const std::string& root, const CorpusConfig& cfg);
Corpus load_corpus(const std::string& root);
Tensor load_video(const Corpus& corpus, const CorpusItem& item);

}  // namespace arlon::data
