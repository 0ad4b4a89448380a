#include "arlon/synth_data.hpp"

#include <json.hpp>
#include <map>
#include <sstream>

#include "arlon/errors.hpp"
#include "arlon/io.hpp"

namespace arlon::data {

using nlohmann::json;

const char* to_string(Shape s) {
  switch (s) {
    case Shape::square: return "square";
    case Shape::circle: return "circle";
    case Shape::triangle: return "triangle";
  }
  return "?";
}

const char* to_string(Color c) {
  switch (c) {
    case Color::red: return "red";
    case Color::green: return "green";
    case Color::blue: return "blue";
    case Color::yellow: return "yellow";
    case Color::magenta: return "magenta";
    case Color::cyan: return "cyan";
  }
  return "?";
}

const char* to_string(Motion m) {
  switch (m) {
    case Motion::left_to_right: return "left_to_right";
    case Motion::right_to_left: return "right_to_left";
    case Motion::top_to_bottom: return "top_to_bottom";
    case Motion::bottom_to_top: return "bottom_to_top";
    case Motion::diagonal: return "diagonal";
    case Motion::statik: return "static";
  }
  return "?";
}

static Shape shape_from_string(const std::string& s) {
  if (s == "square") return Shape::square;
  if (s == "circle") return Shape::circle;
  if (s == "triangle") return Shape::triangle;
  throw ValidationError("unknown shape: " + s);
}

static Color color_from_string(const std::string& s) {
  for (int i = 0; i < 6; ++i)
    if (s == to_string(static_cast<Color>(i))) return static_cast<Color>(i);
  throw ValidationError("unknown color: " + s);
}

static Motion motion_from_string(const std::string& s) {
  for (int i = 0; i < 6; ++i)
    if (s == to_string(static_cast<Motion>(i))) return static_cast<Motion>(i);
  throw ValidationError("unknown motion: " + s);
}

std::array<double, 3> rgb_of(Color c) {
  switch (c) {
    case Color::red: return {1, 0, 0};
    case Color::green: return {0, 1, 0};
    case Color::blue: return {0, 0, 1};
    case Color::yellow: return {1, 1, 0};
    case Color::magenta: return {1, 0, 1};
    case Color::cyan: return {0, 1, 1};
  }
  return {0, 0, 0};
}

std::array<int, 2> direction_of(Motion m) {
  switch (m) {
    case Motion::left_to_right: return {1, 0};
    case Motion::right_to_left: return {-1, 0};
    case Motion::top_to_bottom: return {0, 1};
    case Motion::bottom_to_top: return {0, -1};
    case Motion::diagonal: return {1, 1};
    case Motion::statik: return {0, 0};
  }
  return {0, 0};
}

void validate_scene(const SceneSpec& spec, const RenderConfig& cfg) {
  require_that(cfg.frames >= 1, "scene: frames must be >= 1");
  require_that(cfg.shape_size >= 2, "scene: shape_size must be >= 2");
  if (spec.motion == Motion::statik) {
    require_that(spec.speed == 0, "scene: static motion requires speed 0, got speed=" +
                                      std::to_string(spec.speed));
  } else {
    require_that(spec.speed >= 1, "scene: motion " + std::string(to_string(spec.motion)) +
                                      " requires speed >= 1, got speed=" +
                                      std::to_string(spec.speed));
  }
  auto dir = direction_of(spec.motion);
  const int travel = spec.speed * (cfg.frames - 1);
  const int room_x = cfg.width - cfg.shape_size - 2 * cfg.margin;
  const int room_y = cfg.height - cfg.shape_size - 2 * cfg.margin;
  require_that(room_x >= std::abs(dir[0]) * travel && room_y >= std::abs(dir[1]) * travel,
               "scene: shape would leave the frame: motion=" +
                   std::string(to_string(spec.motion)) + " speed=" + std::to_string(spec.speed) +
                   " frames=" + std::to_string(cfg.frames) + " travel=" + std::to_string(travel) +
                   "px exceeds room (" + std::to_string(room_x) + "," + std::to_string(room_y) +
                   ")px at size " + std::to_string(cfg.width) + "x" + std::to_string(cfg.height));
}

std::array<int, 2> shape_position(const SceneSpec& spec, const RenderConfig& cfg, int t) {
  validate_scene(spec, cfg);
  auto dir = direction_of(spec.motion);
  const int travel = spec.speed * (cfg.frames - 1);
  const int dx_total = dir[0] * travel, dy_total = dir[1] * travel;
  const int lo_x = cfg.margin + std::max(0, -dx_total);
  const int hi_x = cfg.width - cfg.shape_size - cfg.margin - std::max(0, dx_total);
  const int lo_y = cfg.margin + std::max(0, -dy_total);
  const int hi_y = cfg.height - cfg.shape_size - cfg.margin - std::max(0, dy_total);
  Rng rng(derive_seed(spec.seed, 0xA11CE));
  const int x0 = lo_x + static_cast<int>(rng.randint(0, hi_x - lo_x + 1));
  const int y0 = lo_y + static_cast<int>(rng.randint(0, hi_y - lo_y + 1));
  return {x0 + dir[0] * spec.speed * t, y0 + dir[1] * spec.speed * t};
}

// Shape stencil in its size x size bounding box; translated rigidly per frame
// so the centroid moves by exactly `speed` pixels per frame.
static std::vector<char> shape_stencil(Shape shape, int s) {
  std::vector<char> m(static_cast<size_t>(s) * s, 0);
  const double c = s / 2.0;
  for (int i = 0; i < s; ++i)
    for (int j = 0; j < s; ++j) {
      bool in = false;
      const double y = i + 0.5 - c, x = j + 0.5 - c;
      switch (shape) {
        case Shape::square: in = true; break;
        case Shape::circle: in = x * x + y * y <= c * c; break;
        case Shape::triangle: {
          // upward-pointing wedge: width grows linearly with the row
          const double half_w = (i + 0.5) / s * c;
          in = std::abs(x) <= half_w;
          break;
        }
      }
      if (in) m[static_cast<size_t>(i) * s + j] = 1;
    }
  return m;
}

Tensor ground_truth_mask(const SceneSpec& spec, const RenderConfig& cfg, int t) {
  auto pos = shape_position(spec, cfg, t);
  auto stencil = shape_stencil(spec.shape, cfg.shape_size);
  Tensor mask({cfg.height, cfg.width});
  for (int i = 0; i < cfg.shape_size; ++i)
    for (int j = 0; j < cfg.shape_size; ++j)
      if (stencil[static_cast<size_t>(i) * cfg.shape_size + j])
        mask.at({pos[1] + i, pos[0] + j}) = 1.0;
  return mask;
}

Tensor render_video(const SceneSpec& spec, const RenderConfig& cfg) {
  validate_scene(spec, cfg);
  auto rgb = rgb_of(spec.color);
  auto stencil = shape_stencil(spec.shape, cfg.shape_size);
  Tensor video({cfg.frames, cfg.height, cfg.width, 3});
  for (int t = 0; t < cfg.frames; ++t) {
    auto pos = shape_position(spec, cfg, t);
    for (int i = 0; i < cfg.shape_size; ++i)
      for (int j = 0; j < cfg.shape_size; ++j) {
        if (!stencil[static_cast<size_t>(i) * cfg.shape_size + j]) continue;
        double* px = video.data.data() +
                     ((static_cast<int64_t>(t) * cfg.height + (pos[1] + i)) * cfg.width +
                      (pos[0] + j)) * 3;
        px[0] = rgb[0];
        px[1] = rgb[1];
        px[2] = rgb[2];
      }
  }
  return video;
}

std::string caption_for(const SceneSpec& spec) {
  std::string s = std::string("a ") + to_string(spec.color) + " " + to_string(spec.shape);
  switch (spec.motion) {
    case Motion::left_to_right: return s + " moving left to right";
    case Motion::right_to_left: return s + " moving right to left";
    case Motion::top_to_bottom: return s + " moving top to bottom";
    case Motion::bottom_to_top: return s + " moving bottom to top";
    case Motion::diagonal: return s + " moving diagonally";
    case Motion::statik: return s + " staying still";
  }
  return s;
}

// ---- vocabulary -----------------------------------------------------------

static const std::vector<std::string>& word_list() {
  static const std::vector<std::string> words = {
      "<pad>", "a",      "red",  "green",  "blue",   "yellow", "magenta",
      "cyan",  "square", "circle", "triangle", "moving", "staying", "still",
      "left",  "to",     "right", "top",    "bottom", "diagonally"};
  return words;
}

int64_t vocab_size() { return static_cast<int64_t>(word_list().size()); }
int64_t pad_token_id() { return 0; }

std::vector<int64_t> tokenize(const std::string& caption) {
  std::vector<int64_t> ids;
  std::istringstream is(caption);
  std::string w;
  const auto& words = word_list();
  while (is >> w) {
    int64_t id = -1;
    for (size_t i = 0; i < words.size(); ++i)
      if (words[i] == w) {
        id = static_cast<int64_t>(i);
        break;
      }
    require_that(id > 0, "tokenize: word not in the caption grammar: \"" + w + "\"");
    ids.push_back(id);
  }
  return ids;
}

std::string detokenize(const std::vector<int64_t>& ids) {
  const auto& words = word_list();
  std::string out;
  for (int64_t id : ids) {
    require_that(id >= 0 && id < vocab_size(), "detokenize: id out of range: " +
                                                   std::to_string(id));
    if (id == pad_token_id()) continue;
    if (!out.empty()) out += ' ';
    out += words[static_cast<size_t>(id)];
  }
  return out;
}

// ---- text encoder ---------------------------------------------------------

TextEncoder TextEncoder::create(const TextConfig& cfg, Rng& rng) {
  TextEncoder e;
  e.cfg = cfg;
  e.table = nn::Embedding::create(vocab_size(), cfg.dim, rng);
  e.pos = ag::leaf(Tensor::randn({cfg.max_tokens, cfg.dim}, rng, 0.0, 0.02), true);
  return e;
}

ag::NodePtr TextEncoder::encode_ids(std::vector<int64_t> ids) const {
  require_that(static_cast<int64_t>(ids.size()) <= cfg.max_tokens,
               "encode_text: prompt has " + std::to_string(ids.size()) +
                   " tokens, max is " + std::to_string(cfg.max_tokens));
  ids.resize(static_cast<size_t>(cfg.max_tokens), pad_token_id());
  return ag::add(table.forward(ids), pos);
}

ag::NodePtr TextEncoder::encode(const std::string& caption) const {
  return encode_ids(tokenize(caption));
}

Tensor TextEncoder::encode_const(const std::string& caption) const {
  ag::NoGradGuard ng;
  return encode(caption)->val;
}

void TextEncoder::reg(nn::ParamRegistry& r, const std::string& prefix) const {
  table.reg(r, prefix + "/table");
  r.add(prefix + "/pos", pos);
}

// ---- corpus ---------------------------------------------------------------

std::vector<const CorpusItem*> Corpus::split_items(const std::string& split) const {
  std::vector<const CorpusItem*> out;
  for (const auto& it : items)
    if (it.split == split) out.push_back(&it);
  return out;
}

static json spec_to_json(const SceneSpec& s) {
  return json{{"shape", to_string(s.shape)},
              {"color", to_string(s.color)},
              {"motion", to_string(s.motion)},
              {"speed", s.speed},
              {"seed", s.seed}};
}

static SceneSpec spec_from_json(const json& j) {
  SceneSpec s;
  s.shape = shape_from_string(j.at("shape").get<std::string>());
  s.color = color_from_string(j.at("color").get<std::string>());
  s.motion = motion_from_string(j.at("motion").get<std::string>());
  s.speed = j.at("speed").get<int>();
  s.seed = j.at("seed").get<uint64_t>();
  return s;
}

Corpus build_corpus(const std::string& root, const CorpusConfig& cfg) {
  require_that(cfg.per_motion >= 1, "corpus: per_motion must be >= 1");
  require_that(cfg.holdout_fraction >= 0.0 && cfg.holdout_fraction < 1.0,
               "corpus: holdout_fraction must be in [0,1)");
  Corpus corpus;
  corpus.cfg = cfg;
  corpus.root = root;

  // Shape x color combos cycled per class, order shuffled by the master seed.
  std::vector<std::pair<Shape, Color>> combos;
  for (int s = 0; s < 3; ++s)
    for (int c = 0; c < 6; ++c)
      combos.emplace_back(static_cast<Shape>(s), static_cast<Color>(c));

  const int holdout_per_class =
      std::max(cfg.holdout_fraction > 0.0 ? 1 : 0,
               static_cast<int>(cfg.per_motion * cfg.holdout_fraction));

  std::string tsv;
  json manifest_videos = json::array();
  int index = 0;
  for (int m = 0; m < 6; ++m) {
    Rng class_rng(derive_seed(cfg.master_seed, 0xC0DE + static_cast<uint64_t>(m)));
    std::vector<std::pair<Shape, Color>> order = combos;
    class_rng.shuffle(order);
    for (int i = 0; i < cfg.per_motion; ++i, ++index) {
      SceneSpec spec;
      spec.motion = static_cast<Motion>(m);
      spec.shape = order[static_cast<size_t>(i) % order.size()].first;
      spec.color = order[static_cast<size_t>(i) % order.size()].second;
      spec.speed = spec.motion == Motion::statik ? 0 : cfg.moving_speed;
      spec.seed = derive_seed(cfg.master_seed, 0xF00D + static_cast<uint64_t>(index));

      CorpusItem item;
      char buf[16];
      std::snprintf(buf, sizeof(buf), "vid_%04d", index);
      item.id = buf;
      item.spec = spec;
      item.caption = caption_for(spec);
      item.file = "videos/" + item.id + ".arlv";
      item.split = i >= cfg.per_motion - holdout_per_class ? "holdout" : "train";

      Tensor video = render_video(spec, cfg.render);
      io::write_array_f32(root + "/" + item.file, video);
      item.content_hash = io::hex64(io::fnv1a64_file(root + "/" + item.file));

      tsv += item.id + "\t" + item.caption + "\n";
      json jv = {{"id", item.id},          {"file", item.file},
                 {"caption", item.caption}, {"split", item.split},
                 {"hash", item.content_hash}, {"spec", spec_to_json(spec)}};
      manifest_videos.push_back(jv);
      corpus.items.push_back(std::move(item));
    }
  }

  io::write_text_file(root + "/captions.tsv", tsv);
  json manifest = {
      {"master_seed", cfg.master_seed},
      {"config",
       {{"frames", cfg.render.frames},
        {"height", cfg.render.height},
        {"width", cfg.render.width},
        {"shape_size", cfg.render.shape_size},
        {"margin", cfg.render.margin},
        {"per_motion", cfg.per_motion},
        {"holdout_fraction", cfg.holdout_fraction},
        {"moving_speed", cfg.moving_speed}}},
      {"videos", manifest_videos}};
  io::write_text_file(root + "/manifest.json", manifest.dump(2));
  return corpus;
}

Corpus load_corpus(const std::string& root) {
  require_that(io::file_exists(root + "/manifest.json"),
               "corpus manifest not found under " + root);
  json manifest = json::parse(io::read_text_file(root + "/manifest.json"));
  Corpus corpus;
  corpus.root = root;
  corpus.cfg.master_seed = manifest.at("master_seed").get<uint64_t>();
  const json& c = manifest.at("config");
  corpus.cfg.render.frames = c.at("frames").get<int>();
  corpus.cfg.render.height = c.at("height").get<int>();
  corpus.cfg.render.width = c.at("width").get<int>();
  corpus.cfg.render.shape_size = c.at("shape_size").get<int>();
  corpus.cfg.render.margin = c.at("margin").get<int>();
  corpus.cfg.per_motion = c.at("per_motion").get<int>();
  corpus.cfg.holdout_fraction = c.at("holdout_fraction").get<double>();
  corpus.cfg.moving_speed = c.at("moving_speed").get<int>();
  for (const auto& jv : manifest.at("videos")) {
    CorpusItem item;
    item.id = jv.at("id").get<std::string>();
    item.file = jv.at("file").get<std::string>();
    item.caption = jv.at("caption").get<std::string>();
    item.split = jv.at("split").get<std::string>();
    item.content_hash = jv.at("hash").get<std::string>();
    item.spec = spec_from_json(jv.at("spec"));
    corpus.items.push_back(std::move(item));
  }
  return corpus;
}

Tensor load_video(const Corpus& corpus, const CorpusItem& item) {
  return io::read_array_f32(corpus.root + "/" + item.file);
}

}  // namespace arlon::data
