#include <doctest.h>

#include <cstdio>
#include <filesystem>

#include "arlon/errors.hpp"
#include "arlon/io.hpp"
#include "arlon/nn.hpp"

using namespace arlon;

namespace {
std::string tmp_path(const char* name) {
  return (std::filesystem::temp_directory_path() / name).string();
}
}  // namespace

TEST_CASE("raw f32 array file round trip with exact header") {
  Rng r(5);
  Tensor t = Tensor::rand_uniform({3, 4, 5, 2}, r, 0.0, 1.0);
  // Quantize to f32-representable values so the round trip is exact.
  for (double& x : t.data) x = static_cast<double>(static_cast<float>(x));
  std::string p = tmp_path("arlon_io_video.arlv");
  io::write_array_f32(p, t);
  Tensor back = io::read_array_f32(p);
  CHECK(back.shape == t.shape);
  CHECK(tensor_bit_equal(back, t));

  // Header layout: magic + 4 little-endian u32 dims.
  std::string bytes = io::read_text_file(p);
  CHECK(bytes.substr(0, 4) == "ARLV");
  CHECK(static_cast<unsigned char>(bytes[4]) == 3);
  CHECK(static_cast<unsigned char>(bytes[8]) == 4);
  CHECK(static_cast<unsigned char>(bytes[12]) == 5);
  CHECK(static_cast<unsigned char>(bytes[16]) == 2);
  CHECK(bytes.size() == 20 + t.data.size() * 4);
  std::remove(p.c_str());
}

TEST_CASE("index file round trip and validation") {
  io::IndexFile f;
  f.compression = {2, 2, 2};
  f.grid = {2, 3, 4};
  f.codebook_size = 64;
  for (uint16_t i = 0; i < 24; ++i) f.indices.push_back(static_cast<uint16_t>(i % 64));
  std::string p = tmp_path("arlon_io_tokens.arlq");
  io::write_index_file(p, f);
  io::IndexFile g = io::read_index_file(p);
  CHECK(g.compression == f.compression);
  CHECK(g.grid == f.grid);
  CHECK(g.codebook_size == 64);
  CHECK(g.indices == f.indices);

  // An index >= K must be rejected on write...
  io::IndexFile bad = f;
  bad.indices[5] = 64;
  CHECK_THROWS_AS(io::write_index_file(tmp_path("arlon_io_bad.arlq"), bad), ValidationError);

  // ...and a corrupted file rejected on read.
  std::string bytes = io::read_text_file(p);
  bytes[bytes.size() - 1] = static_cast<char>(0x7f);  // high byte of last u16 -> 0x7fxx >= 64
  io::write_text_file(p, bytes);
  CHECK_THROWS_AS(io::read_index_file(p), ValidationError);
  std::remove(p.c_str());
}

TEST_CASE("checkpoint container: config echo, float64 round trip, restore") {
  Rng r(9);
  nn::ParamRegistry reg;
  auto w = ag::leaf(Tensor::randn({4, 3}, r), true);
  auto b = ag::leaf(Tensor::randn({3}, r), true);
  reg.add("layer/w", w);
  reg.add("layer/b", b);

  std::string p = tmp_path("arlon_io_ckpt.arlc");
  io::save_checkpoint(p, "{\"dim\":3}", reg, {{"extra/counts", Tensor::from({2}, {1, 2})}});

  io::Checkpoint c = io::load_checkpoint(p);
  CHECK(c.version == 1);
  CHECK(c.config_json == "{\"dim\":3}");
  REQUIRE(c.find("layer/w") != nullptr);
  CHECK(tensor_bit_equal(*c.find("layer/w"), w->val));
  CHECK(tensor_bit_equal(*c.find("extra/counts"), Tensor::from({2}, {1, 2})));

  // restore into fresh parameters
  nn::ParamRegistry reg2;
  auto w2 = ag::leaf(Tensor::zeros({4, 3}), true);
  auto b2 = ag::leaf(Tensor::zeros({3}), true);
  reg2.add("layer/w", w2);
  reg2.add("layer/b", b2);
  io::restore_params(c, reg2);
  CHECK(tensor_bit_equal(w2->val, w->val));
  CHECK(tensor_bit_equal(b2->val, b->val));

  // missing names / wrong shapes are validation errors
  nn::ParamRegistry reg3;
  reg3.add("layer/missing", ag::leaf(Tensor::zeros({1}), true));
  CHECK_THROWS_AS(io::restore_params(c, reg3), ValidationError);
  std::remove(p.c_str());
}

TEST_CASE("fnv1a64 hashing is stable") {
  const char* s = "arlon";
  uint64_t h1 = io::fnv1a64(s, 5);
  uint64_t h2 = io::fnv1a64(s, 5);
  CHECK(h1 == h2);
  CHECK(io::hex64(h1).size() == 16);
  CHECK(io::fnv1a64("a", 1) != io::fnv1a64("b", 1));
}
