#include <doctest.h>

#include <cstdio>
#include <filesystem>
#include <set>

#include "arlon/errors.hpp"
#include "arlon/io.hpp"
#include "arlon/synth_data.hpp"

using namespace arlon;
using namespace arlon::data;

namespace {

// Foreground centroid of one frame, (x, y) in pixel coordinates.
std::array<double, 2> frame_centroid(const Tensor& video, int t) {
  const int64_t H = video.shape[1], W = video.shape[2];
  double sx = 0, sy = 0, n = 0;
  for (int64_t i = 0; i < H; ++i)
    for (int64_t j = 0; j < W; ++j) {
      double lum = (video.at({t, i, j, 0}) + video.at({t, i, j, 1}) + video.at({t, i, j, 2})) / 3.0;
      if (lum > 0) {
        sx += static_cast<double>(j);
        sy += static_cast<double>(i);
        n += 1;
      }
    }
  REQUIRE(n > 0);
  return {sx / n, sy / n};
}

std::string temp_dir(const char* tag) {
  auto p = std::filesystem::temp_directory_path() / (std::string("arlon_test_") + tag);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p / "videos");
  return p.string();
}

}  // namespace

TEST_CASE("captions follow the fixed grammar") {
  SceneSpec a{Shape::square, Color::red, Motion::left_to_right, 1, 0};
  CHECK(caption_for(a) == "a red square moving left to right");
  SceneSpec b{Shape::circle, Color::blue, Motion::statik, 0, 0};
  CHECK(caption_for(b) == "a blue circle staying still");
  SceneSpec c{Shape::triangle, Color::magenta, Motion::diagonal, 1, 0};
  CHECK(caption_for(c) == "a magenta triangle moving diagonally");
}

TEST_CASE("tokenizer roundtrips every caption and rejects unknown words") {
  CHECK(vocab_size() == 20);
  CHECK(pad_token_id() == 0);
  for (int s = 0; s < 3; ++s)
    for (int c = 0; c < 6; ++c)
      for (int m = 0; m < 6; ++m) {
        SceneSpec spec{static_cast<Shape>(s), static_cast<Color>(c), static_cast<Motion>(m),
                       static_cast<Motion>(m) == Motion::statik ? 0 : 1, 0};
        std::string cap = caption_for(spec);
        auto ids = tokenize(cap);
        CHECK(static_cast<int64_t>(ids.size()) <= TextConfig{}.max_tokens);
        CHECK(detokenize(ids) == cap);
        for (auto id : ids) CHECK(id > 0);
      }
  CHECK_THROWS_AS((void)tokenize("a purple square"), ValidationError);
}

TEST_CASE("moving shape translates rigidly at exactly its speed") {
  // Derived oracle: integer start + rigid stencil translation means the
  // foreground centroid shifts by precisely speed px/frame along the motion
  // direction and not at all across it.
  SceneSpec spec{Shape::circle, Color::blue, Motion::left_to_right, 2, 7};
  RenderConfig cfg;
  cfg.frames = 16;
  cfg.height = 64;
  cfg.width = 64;
  Tensor video = render_video(spec, cfg);
  REQUIRE(video.shape == std::vector<int64_t>({16, 64, 64, 3}));
  auto c0 = frame_centroid(video, 0);
  for (int t = 1; t < cfg.frames; ++t) {
    auto ct = frame_centroid(video, t);
    CHECK(ct[0] - c0[0] == doctest::Approx(2.0 * t).epsilon(1e-12));
    CHECK(ct[1] == doctest::Approx(c0[1]).epsilon(1e-12));
  }
}

TEST_CASE("rendered pixels are the pure shape color on black") {
  SceneSpec spec{Shape::square, Color::yellow, Motion::top_to_bottom, 1, 3};
  RenderConfig cfg;
  Tensor video = render_video(spec, cfg);
  int fg = 0;
  for (int t = 0; t < cfg.frames; ++t) {
    Tensor mask = ground_truth_mask(spec, cfg, t);
    for (int i = 0; i < cfg.height; ++i)
      for (int j = 0; j < cfg.width; ++j) {
        double r = video.at({t, i, j, 0}), g = video.at({t, i, j, 1}), b = video.at({t, i, j, 2});
        if (mask.at({i, j}) > 0) {
          CHECK(r == 1.0);
          CHECK(g == 1.0);
          CHECK(b == 0.0);
          ++fg;
        } else {
          CHECK(r == 0.0);
          CHECK(g == 0.0);
          CHECK(b == 0.0);
        }
      }
  }
  // A square fills its full bounding box every frame.
  CHECK(fg == cfg.frames * cfg.shape_size * cfg.shape_size);
}

TEST_CASE("shape stays inside the frame with the margin respected") {
  for (int m = 0; m < 6; ++m)
    for (uint64_t seed : {0ULL, 1ULL, 42ULL, 999ULL}) {
      SceneSpec spec{Shape::triangle, Color::green, static_cast<Motion>(m),
                     static_cast<Motion>(m) == Motion::statik ? 0 : 1, seed};
      RenderConfig cfg;
      for (int t = 0; t < cfg.frames; ++t) {
        auto pos = shape_position(spec, cfg, t);
        CHECK(pos[0] >= cfg.margin);
        CHECK(pos[1] >= cfg.margin);
        CHECK(pos[0] + cfg.shape_size <= cfg.width - cfg.margin);
        CHECK(pos[1] + cfg.shape_size <= cfg.height - cfg.margin);
      }
    }
}

TEST_CASE("static scenes repeat the first frame exactly") {
  SceneSpec spec{Shape::circle, Color::cyan, Motion::statik, 0, 11};
  RenderConfig cfg;
  Tensor video = render_video(spec, cfg);
  for (int t = 1; t < cfg.frames; ++t)
    for (int i = 0; i < cfg.height; ++i)
      for (int j = 0; j < cfg.width; ++j)
        for (int ch = 0; ch < 3; ++ch)
          CHECK(video.at({t, i, j, ch}) == video.at({0, i, j, ch}));
}

TEST_CASE("scene validation names the offending fields") {
  RenderConfig cfg;
  SceneSpec bad_static{Shape::square, Color::red, Motion::statik, 1, 0};
  CHECK_THROWS_WITH_AS(validate_scene(bad_static, cfg),
                       doctest::Contains("speed"), ValidationError);
  SceneSpec bad_moving{Shape::square, Color::red, Motion::left_to_right, 0, 0};
  CHECK_THROWS_WITH_AS(validate_scene(bad_moving, cfg),
                       doctest::Contains("speed"), ValidationError);
  SceneSpec too_fast{Shape::square, Color::red, Motion::left_to_right, 5, 0};
  CHECK_THROWS_WITH_AS(validate_scene(too_fast, cfg),
                       doctest::Contains("leave the frame"), ValidationError);
}

TEST_CASE("text encoder adds positional offsets to token embeddings") {
  Rng rng(5);
  TextEncoder enc = TextEncoder::create(TextConfig{}, rng);
  ag::NoGradGuard ng;
  Tensor one = enc.encode("green")->val;  // token id 3 at position 0
  REQUIRE(one.shape == std::vector<int64_t>({12, 32}));
  for (int64_t d = 0; d < 32; ++d) {
    CHECK(one.at({0, d}) == enc.table.table->val.at({3, d}) + enc.pos->val.at({0, d}));
    // remaining rows are padded
    CHECK(one.at({5, d}) == enc.table.table->val.at({0, d}) + enc.pos->val.at({5, d}));
  }
  Tensor empty = enc.encode("")->val;
  for (int64_t d = 0; d < 32; ++d)
    CHECK(empty.at({0, d}) == enc.table.table->val.at({0, d}) + enc.pos->val.at({0, d}));
  CHECK_THROWS_AS((void)enc.encode("a a a a a a a a a a a a a"), ValidationError);
}

TEST_CASE("corpus build is deterministic and the manifest checks out") {
  CorpusConfig cfg;
  cfg.per_motion = 3;  // small corpus for the test
  cfg.master_seed = 77;
  std::string root1 = temp_dir("corpus1");
  std::string root2 = temp_dir("corpus2");
  Corpus c1 = build_corpus(root1, cfg);
  Corpus c2 = build_corpus(root2, cfg);
  REQUIRE(c1.items.size() == 18);
  REQUIRE(c2.items.size() == 18);

  std::set<std::string> ids;
  for (size_t i = 0; i < c1.items.size(); ++i) {
    CHECK(c1.items[i].content_hash == c2.items[i].content_hash);
    CHECK(c1.items[i].caption == c2.items[i].caption);
    ids.insert(c1.items[i].id);
  }
  CHECK(ids.size() == c1.items.size());

  // holdout split: ceil(3 * 0.1) = 1 per motion class
  CHECK(c1.split_items("holdout").size() == 6);
  CHECK(c1.split_items("train").size() == 12);

  // manifest roundtrip picks up the same corpus
  Corpus loaded = load_corpus(root1);
  REQUIRE(loaded.items.size() == c1.items.size());
  for (size_t i = 0; i < loaded.items.size(); ++i) {
    CHECK(loaded.items[i].id == c1.items[i].id);
    CHECK(loaded.items[i].split == c1.items[i].split);
    CHECK(loaded.items[i].spec.speed == c1.items[i].spec.speed);
    Tensor v = load_video(loaded, loaded.items[i]);
    CHECK(v.shape == std::vector<int64_t>({16, 32, 32, 3}));
  }

  // captions describe the actual motion: check one moving item end to end
  for (const auto* item : loaded.split_items("train")) {
    if (item->spec.motion != Motion::left_to_right) continue;
    Tensor v = load_video(loaded, *item);
    auto first = frame_centroid(v, 0);
    auto last = frame_centroid(v, 15);
    CHECK(last[0] > first[0]);
    CHECK(last[1] == doctest::Approx(first[1]));
    CHECK(item->caption.find("moving left to right") != std::string::npos);
    break;
  }

  std::filesystem::remove_all(root1);
  std::filesystem::remove_all(root2);
}
