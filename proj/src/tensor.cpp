#include "arlon/tensor.hpp"

#include <cassert>
#include <cmath>
#include <sstream>

#include "arlon/errors.hpp"

namespace arlon {

int64_t numel_of(const std::vector<int64_t>& s) {
  int64_t n = 1;
  for (int64_t d : s) n *= d;
  return n;
}

std::string shape_to_string(const std::vector<int64_t>& s) {
  std::ostringstream os;
  os << "(";
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ")";
  return os.str();
}

Tensor::Tensor(std::vector<int64_t> s) : shape(std::move(s)) {
  data.assign(static_cast<size_t>(numel_of(shape)), 0.0);
}

Tensor Tensor::full(std::vector<int64_t> s, double v) {
  Tensor t(std::move(s));
  for (double& x : t.data) x = v;
  return t;
}

Tensor Tensor::from(std::vector<int64_t> s, std::vector<double> d) {
  Tensor t;
  t.shape = std::move(s);
  t.data = std::move(d);
  require_that(numel_of(t.shape) == static_cast<int64_t>(t.data.size()),
               "Tensor::from: shape " + shape_to_string(t.shape) + " does not match data size");
  return t;
}

Tensor Tensor::randn(std::vector<int64_t> s, Rng& rng, double mean, double std) {
  Tensor t(std::move(s));
  for (double& x : t.data) x = rng.normal(mean, std);
  return t;
}

Tensor Tensor::rand_uniform(std::vector<int64_t> s, Rng& rng, double lo, double hi) {
  Tensor t(std::move(s));
  for (double& x : t.data) x = rng.uniform(lo, hi);
  return t;
}

int64_t Tensor::offset(std::initializer_list<int64_t> idx) const {
  assert(idx.size() == shape.size());
  int64_t off = 0;
  size_t i = 0;
  for (int64_t v : idx) {
    off = off * shape[i] + v;
    ++i;
  }
  return off;
}

Tensor Tensor::reshaped(std::vector<int64_t> s) const {
  require_that(numel_of(s) == numel(),
               "reshape: cannot view " + shape_to_string(shape) + " as " + shape_to_string(s));
  Tensor t;
  t.shape = std::move(s);
  t.data = data;
  return t;
}

bool Tensor::all_finite() const {
  for (double x : data)
    if (!std::isfinite(x)) return false;
  return true;
}

std::string Tensor::shape_str() const { return shape_to_string(shape); }

static void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  require_that(a.shape == b.shape, std::string(op) + ": shape mismatch " + a.shape_str() + " vs " +
                                       b.shape_str());
}

Tensor operator+(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "tensor+");
  Tensor out = a;
  for (size_t i = 0; i < out.data.size(); ++i) out.data[i] += b.data[i];
  return out;
}

Tensor operator-(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "tensor-");
  Tensor out = a;
  for (size_t i = 0; i < out.data.size(); ++i) out.data[i] -= b.data[i];
  return out;
}

Tensor operator*(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "tensor*");
  Tensor out = a;
  for (size_t i = 0; i < out.data.size(); ++i) out.data[i] *= b.data[i];
  return out;
}

Tensor operator*(const Tensor& a, double c) {
  Tensor out = a;
  for (double& x : out.data) x *= c;
  return out;
}

Tensor operator+(const Tensor& a, double c) {
  Tensor out = a;
  for (double& x : out.data) x += c;
  return out;
}

double tensor_max_abs_diff(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "max_abs_diff");
  double m = 0.0;
  for (size_t i = 0; i < a.data.size(); ++i) m = std::max(m, std::abs(a.data[i] - b.data[i]));
  return m;
}

bool tensor_bit_equal(const Tensor& a, const Tensor& b) {
  if (a.shape != b.shape) return false;
  for (size_t i = 0; i < a.data.size(); ++i)
    if (a.data[i] != b.data[i]) return false;
  return true;
}

double tensor_mse(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "mse");
  double s = 0.0;
  for (size_t i = 0; i < a.data.size(); ++i) {
    double d = a.data[i] - b.data[i];
    s += d * d;
  }
  return a.data.empty() ? 0.0 : s / static_cast<double>(a.data.size());
}

double tensor_mean(const Tensor& a) {
  double s = 0.0;
  for (double x : a.data) s += x;
  return a.data.empty() ? 0.0 : s / static_cast<double>(a.data.size());
}

}  // namespace arlon
