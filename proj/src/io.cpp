#include "arlon/io.hpp"

#include <array>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "arlon/errors.hpp"

namespace arlon::io {

namespace {

void put_u32(std::ostream& os, uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                        static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

uint32_t get_u32(std::istream& is) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  return static_cast<uint32_t>(b[0]) | (static_cast<uint32_t>(b[1]) << 8) |
         (static_cast<uint32_t>(b[2]) << 16) | (static_cast<uint32_t>(b[3]) << 24);
}

std::ofstream open_out(const std::string& path) {
  std::filesystem::path p(path);
  if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
  std::ofstream os(path, std::ios::binary);
  require_that(os.good(), "cannot open for writing: " + path);
  return os;
}

std::ifstream open_in(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  require_that(is.good(), "cannot open for reading: " + path);
  return is;
}

void expect_magic(std::istream& is, const char* magic, const std::string& path) {
  char got[4];
  is.read(got, 4);
  require_that(is.good() && std::memcmp(got, magic, 4) == 0,
               path + ": bad magic, expected " + std::string(magic, 4));
}

}  // namespace

void write_array_f32(const std::string& path, const Tensor& t) {
  require_that(t.rank() == 4, "write_array_f32: tensor must be 4D, got " + t.shape_str());
  auto os = open_out(path);
  os.write("ARLV", 4);
  for (int i = 0; i < 4; ++i) put_u32(os, static_cast<uint32_t>(t.dim(i)));
  std::vector<float> buf(t.data.size());
  for (size_t i = 0; i < buf.size(); ++i) buf[i] = static_cast<float>(t.data[i]);
  os.write(reinterpret_cast<const char*>(buf.data()),
           static_cast<std::streamsize>(buf.size() * sizeof(float)));
  require_that(os.good(), "write failed: " + path);
}

Tensor read_array_f32(const std::string& path) {
  auto is = open_in(path);
  expect_magic(is, "ARLV", path);
  std::vector<int64_t> shape(4);
  for (int i = 0; i < 4; ++i) shape[static_cast<size_t>(i)] = get_u32(is);
  const int64_t n = numel_of(shape);
  std::vector<float> buf(static_cast<size_t>(n));
  is.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(n * sizeof(float)));
  require_that(is.good(), path + ": truncated payload");
  Tensor t(shape);
  for (size_t i = 0; i < buf.size(); ++i) t.data[i] = static_cast<double>(buf[i]);
  return t;
}

void write_index_file(const std::string& path, const IndexFile& f) {
  const size_t n = static_cast<size_t>(f.grid[0]) * f.grid[1] * f.grid[2];
  require_that(f.indices.size() == n, "write_index_file: index count " +
                                          std::to_string(f.indices.size()) + " != grid volume " +
                                          std::to_string(n));
  for (uint16_t ix : f.indices)
    require_that(ix < f.codebook_size, "write_index_file: index " + std::to_string(ix) +
                                           " >= K=" + std::to_string(f.codebook_size));
  auto os = open_out(path);
  os.write("ARLQ", 4);
  for (uint32_t v : f.compression) put_u32(os, v);
  for (uint32_t v : f.grid) put_u32(os, v);
  put_u32(os, f.codebook_size);
  os.write(reinterpret_cast<const char*>(f.indices.data()),
           static_cast<std::streamsize>(f.indices.size() * sizeof(uint16_t)));
  require_that(os.good(), "write failed: " + path);
}

IndexFile read_index_file(const std::string& path) {
  auto is = open_in(path);
  expect_magic(is, "ARLQ", path);
  IndexFile f;
  for (auto& v : f.compression) v = get_u32(is);
  for (auto& v : f.grid) v = get_u32(is);
  f.codebook_size = get_u32(is);
  const size_t n = static_cast<size_t>(f.grid[0]) * f.grid[1] * f.grid[2];
  f.indices.resize(n);
  is.read(reinterpret_cast<char*>(f.indices.data()),
          static_cast<std::streamsize>(n * sizeof(uint16_t)));
  require_that(is.good(), path + ": truncated payload");
  for (uint16_t ix : f.indices)
    require_that(ix < f.codebook_size,
                 path + ": index " + std::to_string(ix) + " >= K=" +
                     std::to_string(f.codebook_size));
  return f;
}

const Tensor* Checkpoint::find(const std::string& name) const {
  for (const auto& [n, t] : arrays)
    if (n == name) return &t;
  return nullptr;
}

static void write_named_array(std::ostream& os, const std::string& name, const Tensor& t) {
  put_u32(os, static_cast<uint32_t>(name.size()));
  os.write(name.data(), static_cast<std::streamsize>(name.size()));
  put_u32(os, static_cast<uint32_t>(t.shape.size()));
  for (int64_t d : t.shape) put_u32(os, static_cast<uint32_t>(d));
  os.write(reinterpret_cast<const char*>(t.data.data()),
           static_cast<std::streamsize>(t.data.size() * sizeof(double)));
}

void save_checkpoint(const std::string& path, const std::string& config_json,
                     const nn::ParamRegistry& params,
                     const std::vector<std::pair<std::string, Tensor>>& extra) {
  auto os = open_out(path);
  os.write("ARLC", 4);
  put_u32(os, 1);  // container format version
  put_u32(os, static_cast<uint32_t>(config_json.size()));
  os.write(config_json.data(), static_cast<std::streamsize>(config_json.size()));
  put_u32(os, static_cast<uint32_t>(params.items.size() + extra.size()));
  for (const auto& [name, p] : params.items) write_named_array(os, name, p->val);
  for (const auto& [name, t] : extra) write_named_array(os, name, t);
  require_that(os.good(), "write failed: " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
  auto is = open_in(path);
  expect_magic(is, "ARLC", path);
  Checkpoint c;
  c.version = get_u32(is);
  require_that(c.version == 1, path + ": unsupported checkpoint version " +
                                   std::to_string(c.version));
  uint32_t cfg_len = get_u32(is);
  c.config_json.resize(cfg_len);
  is.read(c.config_json.data(), cfg_len);
  uint32_t n_arrays = get_u32(is);
  for (uint32_t i = 0; i < n_arrays; ++i) {
    uint32_t name_len = get_u32(is);
    std::string name(name_len, '\0');
    is.read(name.data(), name_len);
    uint32_t rank = get_u32(is);
    std::vector<int64_t> shape(rank);
    for (auto& d : shape) d = get_u32(is);
    Tensor t(shape);
    is.read(reinterpret_cast<char*>(t.data.data()),
            static_cast<std::streamsize>(t.data.size() * sizeof(double)));
    require_that(is.good(), path + ": truncated array " + name);
    c.arrays.emplace_back(std::move(name), std::move(t));
  }
  return c;
}

void restore_params(const Checkpoint& ckpt, nn::ParamRegistry& params) {
  for (auto& [name, p] : params.items) {
    const Tensor* t = ckpt.find(name);
    require_that(t != nullptr, "checkpoint missing parameter: " + name);
    require_that(t->shape == p->val.shape,
                 "checkpoint shape mismatch for " + name + ": file " + t->shape_str() +
                     " vs model " + p->val.shape_str());
    p->val = *t;
  }
}

uint64_t fnv1a64(const void* data, size_t n) {
  const unsigned char* p = static_cast<const unsigned char*>(data);
  uint64_t h = 0xcbf29ce484222325ull;
  for (size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ull;
  }
  return h;
}

uint64_t fnv1a64_file(const std::string& path) {
  auto is = open_in(path);
  std::ostringstream ss;
  ss << is.rdbuf();
  std::string s = ss.str();
  return fnv1a64(s.data(), s.size());
}

std::string hex64(uint64_t v) {
  static const char* digits = "0123456789abcdef";
  std::string s(16, '0');
  for (int i = 15; i >= 0; --i) {
    s[static_cast<size_t>(i)] = digits[v & 0xf];
    v >>= 4;
  }
  return s;
}

void write_text_file(const std::string& path, const std::string& text) {
  auto os = open_out(path);
  os.write(text.data(), static_cast<std::streamsize>(text.size()));
  require_that(os.good(), "write failed: " + path);
}

std::string read_text_file(const std::string& path) {
  auto is = open_in(path);
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

bool file_exists(const std::string& path) { return std::filesystem::exists(path); }

}  // namespace arlon::io
