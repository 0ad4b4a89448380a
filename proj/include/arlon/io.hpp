#pragma once
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "arlon/nn.hpp"
#include "arlon/tensor.hpp"

namespace arlon::io {

// ---- raw float32 array files (dataset videos, generated videos) ----
// Layout: magic "ARLV", then 4 dims as little-endian uint32, then row-major
// little-endian float32 payload.
void write_array_f32(const std::string& path, const Tensor& t4d);
Tensor read_array_f32(const std::string& path);

// ---- quantized-index files ----
// Layout: magic "ARLQ", compression triple (3 x u32), grid dims (3 x u32),
// codebook size K (u32), then uint16 indices row-major (W fastest, then H,
// then T).
struct IndexFile {
  std::array<uint32_t, 3> compression;  // (temporal, spatial_h, spatial_w)
  std::array<uint32_t, 3> grid;         // (T, H, W)
  uint32_t codebook_size = 0;
  std::vector<uint16_t> indices;
};
void write_index_file(const std::string& path, const IndexFile& f);
IndexFile read_index_file(const std::string& path);

// ---- checkpoint container ----
// Versioned container: magic "ARLC", format version, a config echo (JSON
// text), then named float64 parameter arrays using the same header idiom as
// the raw array files (dims as u32).
struct Checkpoint {
  uint32_t version = 1;
  std::string config_json;
  std::vector<std::pair<std::string, Tensor>> arrays;

  const Tensor* find(const std::string& name) const;
};

void save_checkpoint(const std::string& path, const std::string& config_json,
                     const nn::ParamRegistry& params,
                     const std::vector<std::pair<std::string, Tensor>>& extra = {});
Checkpoint load_checkpoint(const std::string& path);

// Copies values from a loaded checkpoint into live parameters; errors on any
// missing name or shape mismatch.
void restore_params(const Checkpoint& ckpt, nn::ParamRegistry& params);

// ---- hashing / misc ----
uint64_t fnv1a64(const void* data, size_t n);
uint64_t fnv1a64_file(const std::string& path);
std::string hex64(uint64_t v);

void write_text_file(const std::string& path, const std::string& text);
std::string read_text_file(const std::string& path);
bool file_exists(const std::string& path);

}  // namespace arlon::io
