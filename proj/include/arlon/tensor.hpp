#pragma once
#include <cstdint>
#include <initializer_list>
#include <string>
#include <vector>

#include "arlon/rng.hpp"

namespace arlon {

// Dense row-major float64 tensor. All model math runs in double so the
// finite-difference gradient checks and the bit-equality tests have headroom.
struct Tensor {
  std::vector<int64_t> shape;
  std::vector<double> data;

  Tensor() = default;
  explicit Tensor(std::vector<int64_t> s);

  static Tensor zeros(std::vector<int64_t> s) { return Tensor(std::move(s)); }
  static Tensor full(std::vector<int64_t> s, double v);
  static Tensor from(std::vector<int64_t> s, std::vector<double> d);
  static Tensor randn(std::vector<int64_t> s, Rng& rng, double mean = 0.0, double std = 1.0);
  static Tensor rand_uniform(std::vector<int64_t> s, Rng& rng, double lo, double hi);

  int64_t numel() const { return static_cast<int64_t>(data.size()); }
  int rank() const { return static_cast<int>(shape.size()); }
  int64_t dim(int i) const { return shape[static_cast<size_t>(i)]; }

  double& operator[](int64_t i) { return data[static_cast<size_t>(i)]; }
  double operator[](int64_t i) const { return data[static_cast<size_t>(i)]; }

  // Multi-index access; no bounds checks beyond debug asserts.
  double& at(std::initializer_list<int64_t> idx) { return data[static_cast<size_t>(offset(idx))]; }
  double at(std::initializer_list<int64_t> idx) const {
    return data[static_cast<size_t>(offset(idx))];
  }
  int64_t offset(std::initializer_list<int64_t> idx) const;

  // Same data, new shape (element count must match).
  Tensor reshaped(std::vector<int64_t> s) const;

  // Rows/cols view of the flattened tensor: all leading dims x last dim.
  int64_t last_dim() const { return shape.empty() ? 1 : shape.back(); }
  int64_t rows() const { return shape.empty() ? 1 : numel() / last_dim(); }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }
  bool all_finite() const;
  std::string shape_str() const;
};

std::string shape_to_string(const std::vector<int64_t>& s);
int64_t numel_of(const std::vector<int64_t>& s);

// Elementwise helpers on raw tensors (no autograd); used by inference-only
// code paths and the test oracles.
Tensor operator+(const Tensor& a, const Tensor& b);
Tensor operator-(const Tensor& a, const Tensor& b);
Tensor operator*(const Tensor& a, const Tensor& b);
Tensor operator*(const Tensor& a, double c);
Tensor operator+(const Tensor& a, double c);

double tensor_max_abs_diff(const Tensor& a, const Tensor& b);
bool tensor_bit_equal(const Tensor& a, const Tensor& b);
double tensor_mse(const Tensor& a, const Tensor& b);
double tensor_mean(const Tensor& a);

}  // namespace arlon
