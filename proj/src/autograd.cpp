#include "arlon/autograd.hpp"

#include <Eigen/Core>
#include <cmath>
#include <unordered_set>

#include "arlon/errors.hpp"

namespace arlon::ag {

using EigenRM = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapRM = Eigen::Map<EigenRM>;
using CMapRM = Eigen::Map<const EigenRM>;

static thread_local bool g_grad_enabled = true;

bool grad_enabled() { return g_grad_enabled; }
NoGradGuard::NoGradGuard() : prev_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev_; }

NodePtr leaf(Tensor v, bool requires_grad) {
  auto n = std::make_shared<Node>();
  n->val = std::move(v);
  n->requires_grad = requires_grad && g_grad_enabled;
  return n;
}

NodePtr constant(Tensor v) { return leaf(std::move(v), false); }

NodePtr scalar_const(double v) { return constant(Tensor::from({1}, {v})); }

static NodePtr fresh(Tensor val) {
  auto n = std::make_shared<Node>();
  n->val = std::move(val);
  return n;
}

// Wires parents/backprop only when somebody upstream wants gradients.
static void record(const NodePtr& out, std::vector<NodePtr> parents, std::function<void()> fn) {
  if (!g_grad_enabled) return;
  bool need = false;
  for (const auto& p : parents) need = need || p->requires_grad;
  if (!need) return;
  out->requires_grad = true;
  out->parents = std::move(parents);
  out->backprop = std::move(fn);
}

void backward(const NodePtr& root) {
  require_that(root->val.numel() == 1, "backward: root must be scalar, got " +
                                           root->val.shape_str());
  if (!root->requires_grad) return;
  // Iterative post-order DFS so deep graphs cannot blow the stack.
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  struct Frame {
    Node* n;
    size_t next;
  };
  std::vector<Frame> stack{{root.get(), 0}};
  seen.insert(root.get());
  while (!stack.empty()) {
    Frame& f = stack.back();
    if (f.next < f.n->parents.size()) {
      Node* p = f.n->parents[f.next++].get();
      if (p->requires_grad && seen.insert(p).second) stack.push_back({p, 0});
    } else {
      order.push_back(f.n);
      stack.pop_back();
    }
  }
  root->g().data[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it)
    if ((*it)->backprop) (*it)->backprop();
}

void zero_grad(const std::vector<NodePtr>& params) {
  for (const auto& p : params) {
    if (!p->grad.data.empty())
      std::fill(p->grad.data.begin(), p->grad.data.end(), 0.0);
  }
}

// ---------------------------------------------------------------- elementwise

template <typename F, typename DF>
static NodePtr unary_op(const NodePtr& a, const char* /*name*/, F f, DF df) {
  Tensor v = a->val;
  for (double& x : v.data) x = f(x);
  auto out = fresh(std::move(v));
  Node* o = out.get();
  Node* an = a.get();
  record(out, {a}, [o, an, df]() {
    Tensor& g = an->g();
    const size_t n = g.data.size();
    for (size_t i = 0; i < n; ++i)
      g.data[i] += o->grad.data[i] * df(an->val.data[i], o->val.data[i]);
  });
  return out;
}

NodePtr add(const NodePtr& a, const NodePtr& b) {
  require_that(a->val.shape == b->val.shape,
               "add: shape mismatch " + a->val.shape_str() + " vs " + b->val.shape_str());
  auto out = fresh(a->val + b->val);
  Node* o = out.get();
  Node* an = a.get();
  Node* bn = b.get();
  record(out, {a, b}, [o, an, bn]() {
    if (an->requires_grad) {
      Tensor& g = an->g();
      for (size_t i = 0; i < g.data.size(); ++i) g.data[i] += o->grad.data[i];
    }
    if (bn->requires_grad) {
      Tensor& g = bn->g();
      for (size_t i = 0; i < g.data.size(); ++i) g.data[i] += o->grad.data[i];
    }
  });
  return out;
}

NodePtr sub(const NodePtr& a, const NodePtr& b) {
  require_that(a->val.shape == b->val.shape,
               "sub: shape mismatch " + a->val.shape_str() + " vs " + b->val.shape_str());
  auto out = fresh(a->val - b->val);
  Node* o = out.get();
  Node* an = a.get();
  Node* bn = b.get();
  record(out, {a, b}, [o, an, bn]() {
    if (an->requires_grad) {
      Tensor& g = an->g();
      for (size_t i = 0; i < g.data.size(); ++i) g.data[i] += o->grad.data[i];
    }
    if (bn->requires_grad) {
      Tensor& g = bn->g();
      for (size_t i = 0; i < g.data.size(); ++i) g.data[i] -= o->grad.data[i];
    }
  });
  return out;
}

NodePtr mul(const NodePtr& a, const NodePtr& b) {
  require_that(a->val.shape == b->val.shape,
               "mul: shape mismatch " + a->val.shape_str() + " vs " + b->val.shape_str());
  auto out = fresh(a->val * b->val);
  Node* o = out.get();
  Node* an = a.get();
  Node* bn = b.get();
  record(out, {a, b}, [o, an, bn]() {
    if (an->requires_grad) {
      Tensor& g = an->g();
      for (size_t i = 0; i < g.data.size(); ++i) g.data[i] += o->grad.data[i] * bn->val.data[i];
    }
    if (bn->requires_grad) {
      Tensor& g = bn->g();
      for (size_t i = 0; i < g.data.size(); ++i) g.data[i] += o->grad.data[i] * an->val.data[i];
    }
  });
  return out;
}

NodePtr scale(const NodePtr& a, double c) {
  return unary_op(a, "scale", [c](double x) { return x * c; },
                  [c](double, double) { return c; });
}

NodePtr add_scalar(const NodePtr& a, double c) {
  return unary_op(a, "add_scalar", [c](double x) { return x + c; },
                  [](double, double) { return 1.0; });
}

NodePtr neg(const NodePtr& a) { return scale(a, -1.0); }

NodePtr exp_op(const NodePtr& a) {
  return unary_op(a, "exp", [](double x) { return std::exp(x); },
                  [](double, double y) { return y; });
}

NodePtr log_op(const NodePtr& a) {
  return unary_op(a, "log", [](double x) { return std::log(x); },
                  [](double x, double) { return 1.0 / x; });
}

NodePtr sqrt_op(const NodePtr& a) {
  return unary_op(a, "sqrt", [](double x) { return std::sqrt(x); },
                  [](double, double y) { return 0.5 / y; });
}

NodePtr square(const NodePtr& a) {
  return unary_op(a, "square", [](double x) { return x * x; },
                  [](double x, double) { return 2.0 * x; });
}

NodePtr reciprocal(const NodePtr& a) {
  return unary_op(a, "reciprocal", [](double x) { return 1.0 / x; },
                  [](double, double y) { return -y * y; });
}

NodePtr sigmoid(const NodePtr& a) {
  return unary_op(a, "sigmoid", [](double x) { return 1.0 / (1.0 + std::exp(-x)); },
                  [](double, double y) { return y * (1.0 - y); });
}

NodePtr silu(const NodePtr& a) {
  return unary_op(a, "silu",
                  [](double x) { return x / (1.0 + std::exp(-x)); },
                  [](double x, double) {
                    double s = 1.0 / (1.0 + std::exp(-x));
                    return s * (1.0 + x * (1.0 - s));
                  });
}

NodePtr gelu(const NodePtr& a) {
  constexpr double kInvSqrt2 = 0.7071067811865475244;
  constexpr double kInvSqrt2Pi = 0.3989422804014326779;
  return unary_op(a, "gelu",
                  [kInvSqrt2](double x) { return 0.5 * x * (1.0 + std::erf(x * kInvSqrt2)); },
                  [kInvSqrt2, kInvSqrt2Pi](double x, double) {
                    double phi = 0.5 * (1.0 + std::erf(x * kInvSqrt2));
                    double pdf = kInvSqrt2Pi * std::exp(-0.5 * x * x);
                    return phi + x * pdf;
                  });
}

NodePtr tanh_op(const NodePtr& a) {
  return unary_op(a, "tanh", [](double x) { return std::tanh(x); },
                  [](double, double y) { return 1.0 - y * y; });
}

NodePtr relu(const NodePtr& a) {
  return unary_op(a, "relu", [](double x) { return x > 0.0 ? x : 0.0; },
                  [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

// ----------------------------------------------------------------- broadcast

static void check_row_vec(const NodePtr& a, const NodePtr& vec, const char* op) {
  require_that(vec->val.rank() == 1 && vec->val.last_dim() == a->val.last_dim(),
               std::string(op) + ": vector " + vec->val.shape_str() +
                   " does not match last dim of " + a->val.shape_str());
}

NodePtr add_row(const NodePtr& a, const NodePtr& vec) {
  check_row_vec(a, vec, "add_row");
  const int64_t rows = a->val.rows(), cols = a->val.last_dim();
  Tensor v = a->val;
  for (int64_t r = 0; r < rows; ++r)
    for (int64_t c = 0; c < cols; ++c) v.data[static_cast<size_t>(r * cols + c)] += vec->val[c];
  auto out = fresh(std::move(v));
  Node* o = out.get();
  Node* an = a.get();
  Node* vn = vec.get();
  record(out, {a, vec}, [o, an, vn, rows, cols]() {
    if (an->requires_grad) {
      Tensor& g = an->g();
      for (size_t i = 0; i < g.data.size(); ++i) g.data[i] += o->grad.data[i];
    }
    if (vn->requires_grad) {
      Tensor& g = vn->g();
      for (int64_t r = 0; r < rows; ++r)
        for (int64_t c = 0; c < cols; ++c)
          g.data[static_cast<size_t>(c)] += o->grad.data[static_cast<size_t>(r * cols + c)];
    }
  });
  return out;
}

NodePtr mul_row(const NodePtr& a, const NodePtr& vec) {
  check_row_vec(a, vec, "mul_row");
  const int64_t rows = a->val.rows(), cols = a->val.last_dim();
  Tensor v = a->val;
  for (int64_t r = 0; r < rows; ++r)
    for (int64_t c = 0; c < cols; ++c) v.data[static_cast<size_t>(r * cols + c)] *= vec->val[c];
  auto out = fresh(std::move(v));
  Node* o = out.get();
  Node* an = a.get();
  Node* vn = vec.get();
  record(out, {a, vec}, [o, an, vn, rows, cols]() {
    if (an->requires_grad) {
      Tensor& g = an->g();
      for (int64_t r = 0; r < rows; ++r)
        for (int64_t c = 0; c < cols; ++c) {
          size_t i = static_cast<size_t>(r * cols + c);
          g.data[i] += o->grad.data[i] * vn->val[c];
        }
    }
    if (vn->requires_grad) {
      Tensor& g = vn->g();
      for (int64_t r = 0; r < rows; ++r)
        for (int64_t c = 0; c < cols; ++c) {
          size_t i = static_cast<size_t>(r * cols + c);
          g.data[static_cast<size_t>(c)] += o->grad.data[i] * an->val.data[i];
        }
    }
  });
  return out;
}

// ----------------------------------------------------------------- reductions

NodePtr sum_all(const NodePtr& a) {
  double s = 0.0;
  for (double x : a->val.data) s += x;
  auto out = fresh(Tensor::from({1}, {s}));
  Node* o = out.get();
  Node* an = a.get();
  record(out, {a}, [o, an]() {
    Tensor& g = an->g();
    const double gy = o->grad.data[0];
    for (double& x : g.data) x += gy;
  });
  return out;
}

NodePtr mean_all(const NodePtr& a) {
  return scale(sum_all(a), 1.0 / static_cast<double>(a->val.numel()));
}

NodePtr sum_rows(const NodePtr& a) {
  const int64_t rows = a->val.rows(), cols = a->val.last_dim();
  Tensor v = Tensor::zeros({cols});
  for (int64_t r = 0; r < rows; ++r)
    for (int64_t c = 0; c < cols; ++c) v[c] += a->val.data[static_cast<size_t>(r * cols + c)];
  auto out = fresh(std::move(v));
  Node* o = out.get();
  Node* an = a.get();
  record(out, {a}, [o, an, rows, cols]() {
    Tensor& g = an->g();
    for (int64_t r = 0; r < rows; ++r)
      for (int64_t c = 0; c < cols; ++c)
        g.data[static_cast<size_t>(r * cols + c)] += o->grad.data[static_cast<size_t>(c)];
  });
  return out;
}

NodePtr mean_rows(const NodePtr& a) {
  return scale(sum_rows(a), 1.0 / static_cast<double>(a->val.rows()));
}

// ------------------------------------------------------------- linear algebra

NodePtr mm(const NodePtr& a, const NodePtr& b) {
  require_that(a->val.rank() == 2 && b->val.rank() == 2 && a->val.dim(1) == b->val.dim(0),
               "mm: bad shapes " + a->val.shape_str() + " x " + b->val.shape_str());
  const int64_t M = a->val.dim(0), K = a->val.dim(1), N = b->val.dim(1);
  Tensor v = Tensor::zeros({M, N});
  {
    CMapRM am(a->val.data.data(), M, K), bm(b->val.data.data(), K, N);
    MapRM vm(v.data.data(), M, N);
    vm.noalias() = am * bm;
  }
  auto out = fresh(std::move(v));
  Node* o = out.get();
  Node* an = a.get();
  Node* bn = b.get();
  record(out, {a, b}, [o, an, bn, M, K, N]() {
    CMapRM gy(o->grad.data.data(), M, N);
    if (an->requires_grad) {
      MapRM ga(an->g().data.data(), M, K);
      CMapRM bm(bn->val.data.data(), K, N);
      ga.noalias() += gy * bm.transpose();
    }
    if (bn->requires_grad) {
      MapRM gb(bn->g().data.data(), K, N);
      CMapRM am(an->val.data.data(), M, K);
      gb.noalias() += am.transpose() * gy;
    }
  });
  return out;
}

NodePtr bmm(const NodePtr& a, const NodePtr& b, bool trans_b) {
  require_that(a->val.rank() == 3 && b->val.rank() == 3 && a->val.dim(0) == b->val.dim(0),
               "bmm: bad shapes " + a->val.shape_str() + " x " + b->val.shape_str());
  const int64_t B = a->val.dim(0), M = a->val.dim(1), K = a->val.dim(2);
  const int64_t N = trans_b ? b->val.dim(1) : b->val.dim(2);
  require_that(trans_b ? b->val.dim(2) == K : b->val.dim(1) == K,
               "bmm: inner dim mismatch " + a->val.shape_str() + " x " + b->val.shape_str());
  Tensor v = Tensor::zeros({B, M, N});
  for (int64_t i = 0; i < B; ++i) {
    CMapRM am(a->val.data.data() + i * M * K, M, K);
    MapRM vm(v.data.data() + i * M * N, M, N);
    if (trans_b) {
      CMapRM bm(b->val.data.data() + i * N * K, N, K);
      vm.noalias() = am * bm.transpose();
    } else {
      CMapRM bm(b->val.data.data() + i * K * N, K, N);
      vm.noalias() = am * bm;
    }
  }
  auto out = fresh(std::move(v));
  Node* o = out.get();
  Node* an = a.get();
  Node* bn = b.get();
  record(out, {a, b}, [o, an, bn, B, M, K, N, trans_b]() {
    for (int64_t i = 0; i < B; ++i) {
      CMapRM gy(o->grad.data.data() + i * M * N, M, N);
      if (trans_b) {
        CMapRM bm(bn->val.data.data() + i * N * K, N, K);
        CMapRM am(an->val.data.data() + i * M * K, M, K);
        if (an->requires_grad) {
          MapRM ga(an->g().data.data() + i * M * K, M, K);
          ga.noalias() += gy * bm;
        }
        if (bn->requires_grad) {
          MapRM gb(bn->g().data.data() + i * N * K, N, K);
          gb.noalias() += gy.transpose() * am;
        }
      } else {
        CMapRM bm(bn->val.data.data() + i * K * N, K, N);
        CMapRM am(an->val.data.data() + i * M * K, M, K);
        if (an->requires_grad) {
          MapRM ga(an->g().data.data() + i * M * K, M, K);
          ga.noalias() += gy * bm.transpose();
        }
        if (bn->requires_grad) {
          MapRM gb(bn->g().data.data() + i * K * N, K, N);
          gb.noalias() += am.transpose() * gy;
        }
      }
    }
  });
  return out;
}

// ----------------------------------------------------------------------- shape

NodePtr reshape(const NodePtr& a, std::vector<int64_t> shape) {
  auto out = fresh(a->val.reshaped(std::move(shape)));
  Node* o = out.get();
  Node* an = a.get();
  record(out, {a}, [o, an]() {
    Tensor& g = an->g();
    for (size_t i = 0; i < g.data.size(); ++i) g.data[i] += o->grad.data[i];
  });
  return out;
}

static std::vector<int64_t> strides_of(const std::vector<int64_t>& shape) {
  std::vector<int64_t> st(shape.size(), 1);
  for (int i = static_cast<int>(shape.size()) - 2; i >= 0; --i)
    st[static_cast<size_t>(i)] = st[static_cast<size_t>(i + 1)] * shape[static_cast<size_t>(i + 1)];
  return st;
}

// Flat index mapping out -> in for a permutation of axes.
static std::vector<int64_t> permute_index_map(const std::vector<int64_t>& in_shape,
                                              const std::vector<int>& perm) {
  const size_t r = in_shape.size();
  std::vector<int64_t> out_shape(r);
  for (size_t i = 0; i < r; ++i) out_shape[i] = in_shape[static_cast<size_t>(perm[i])];
  std::vector<int64_t> in_st = strides_of(in_shape);
  std::vector<int64_t> out_st = strides_of(out_shape);
  const int64_t n = numel_of(in_shape);
  std::vector<int64_t> map(static_cast<size_t>(n));
  std::vector<int64_t> coord(r, 0);
  for (int64_t o = 0; o < n; ++o) {
    int64_t rem = o;
    int64_t src = 0;
    for (size_t i = 0; i < r; ++i) {
      int64_t c = rem / out_st[i];
      rem -= c * out_st[i];
      src += c * in_st[static_cast<size_t>(perm[i])];
    }
    map[static_cast<size_t>(o)] = src;
  }
  return map;
}

NodePtr permute(const NodePtr& a, std::vector<int> perm) {
  require_that(perm.size() == a->val.shape.size(), "permute: rank mismatch");
  auto map = permute_index_map(a->val.shape, perm);
  std::vector<int64_t> out_shape(perm.size());
  for (size_t i = 0; i < perm.size(); ++i)
    out_shape[i] = a->val.shape[static_cast<size_t>(perm[i])];
  Tensor v(out_shape);
  for (size_t o = 0; o < map.size(); ++o) v.data[o] = a->val.data[static_cast<size_t>(map[o])];
  auto out = fresh(std::move(v));
  Node* o = out.get();
  Node* an = a.get();
  auto map_shared = std::make_shared<std::vector<int64_t>>(std::move(map));
  record(out, {a}, [o, an, map_shared]() {
    Tensor& g = an->g();
    const auto& m = *map_shared;
    for (size_t i = 0; i < m.size(); ++i) g.data[static_cast<size_t>(m[i])] += o->grad.data[i];
  });
  return out;
}

NodePtr slice0(const NodePtr& a, int64_t start, int64_t len) {
  require_that(a->val.rank() >= 1 && start >= 0 && len >= 0 && start + len <= a->val.dim(0),
               "slice0: range [" + std::to_string(start) + "," + std::to_string(start + len) +
                   ") out of bounds for " + a->val.shape_str());
  const int64_t block = a->val.numel() / a->val.dim(0);
  std::vector<int64_t> out_shape = a->val.shape;
  out_shape[0] = len;
  Tensor v(out_shape);
  std::copy(a->val.data.begin() + start * block, a->val.data.begin() + (start + len) * block,
            v.data.begin());
  auto out = fresh(std::move(v));
  Node* o = out.get();
  Node* an = a.get();
  record(out, {a}, [o, an, start, block]() {
    Tensor& g = an->g();
    for (size_t i = 0; i < o->grad.data.size(); ++i)
      g.data[static_cast<size_t>(start * block) + i] += o->grad.data[i];
  });
  return out;
}

NodePtr concat0(const std::vector<NodePtr>& parts) {
  require_that(!parts.empty(), "concat0: empty list");
  std::vector<int64_t> out_shape = parts[0]->val.shape;
  int64_t total = 0;
  for (const auto& p : parts) {
    require_that(p->val.rank() == static_cast<int>(out_shape.size()),
                 "concat0: rank mismatch");
    for (size_t i = 1; i < out_shape.size(); ++i)
      require_that(p->val.shape[i] == out_shape[i], "concat0: trailing dim mismatch");
    total += p->val.dim(0);
  }
  out_shape[0] = total;
  Tensor v(out_shape);
  int64_t off = 0;
  for (const auto& p : parts) {
    std::copy(p->val.data.begin(), p->val.data.end(), v.data.begin() + off);
    off += p->val.numel();
  }
  auto out = fresh(std::move(v));
  Node* o = out.get();
  std::vector<Node*> raw;
  for (const auto& p : parts) raw.push_back(p.get());
  record(out, parts, [o, raw]() {
    int64_t off2 = 0;
    for (Node* p : raw) {
      if (p->requires_grad) {
        Tensor& g = p->g();
        for (size_t i = 0; i < g.data.size(); ++i)
          g.data[i] += o->grad.data[static_cast<size_t>(off2) + i];
      }
      off2 += p->val.numel();
    }
  });
  return out;
}

// ------------------------------------------------- normalization / attention

NodePtr softmax_lastdim(const NodePtr& a) {
  const int64_t rows = a->val.rows(), cols = a->val.last_dim();
  Tensor v = a->val;
  for (int64_t r = 0; r < rows; ++r) {
    double* row = v.data.data() + r * cols;
    double mx = row[0];
    for (int64_t c = 1; c < cols; ++c) mx = std::max(mx, row[c]);
    double sum = 0.0;
    for (int64_t c = 0; c < cols; ++c) {
      row[c] = std::exp(row[c] - mx);
      sum += row[c];
    }
    const double inv = 1.0 / sum;
    for (int64_t c = 0; c < cols; ++c) row[c] *= inv;
  }
  auto out = fresh(std::move(v));
  Node* o = out.get();
  Node* an = a.get();
  record(out, {a}, [o, an, rows, cols]() {
    Tensor& g = an->g();
    for (int64_t r = 0; r < rows; ++r) {
      const double* y = o->val.data.data() + r * cols;
      const double* gy = o->grad.data.data() + r * cols;
      double dot = 0.0;
      for (int64_t c = 0; c < cols; ++c) dot += y[c] * gy[c];
      double* gx = g.data.data() + r * cols;
      for (int64_t c = 0; c < cols; ++c) gx[c] += y[c] * (gy[c] - dot);
    }
  });
  return out;
}

NodePtr layernorm_lastdim(const NodePtr& a, double eps) {
  const int64_t rows = a->val.rows(), cols = a->val.last_dim();
  Tensor v = a->val;
  Tensor inv_std({rows});
  for (int64_t r = 0; r < rows; ++r) {
    double* row = v.data.data() + r * cols;
    double mu = 0.0;
    for (int64_t c = 0; c < cols; ++c) mu += row[c];
    mu /= static_cast<double>(cols);
    double var = 0.0;
    for (int64_t c = 0; c < cols; ++c) {
      double d = row[c] - mu;
      var += d * d;
    }
    var /= static_cast<double>(cols);
    const double inv = 1.0 / std::sqrt(var + eps);
    inv_std[r] = inv;
    for (int64_t c = 0; c < cols; ++c) row[c] = (row[c] - mu) * inv;
  }
  auto out = fresh(std::move(v));
  Node* o = out.get();
  Node* an = a.get();
  auto inv_keep = std::make_shared<Tensor>(std::move(inv_std));
  record(out, {a}, [o, an, inv_keep, rows, cols]() {
    Tensor& g = an->g();
    for (int64_t r = 0; r < rows; ++r) {
      const double* y = o->val.data.data() + r * cols;
      const double* gy = o->grad.data.data() + r * cols;
      double mean_gy = 0.0, mean_gyy = 0.0;
      for (int64_t c = 0; c < cols; ++c) {
        mean_gy += gy[c];
        mean_gyy += gy[c] * y[c];
      }
      mean_gy /= static_cast<double>(cols);
      mean_gyy /= static_cast<double>(cols);
      const double inv = (*inv_keep)[r];
      double* gx = g.data.data() + r * cols;
      for (int64_t c = 0; c < cols; ++c)
        gx[c] += inv * (gy[c] - mean_gy - y[c] * mean_gyy);
    }
  });
  return out;
}

NodePtr rope_rotate(const NodePtr& a, const Tensor& cos_t, const Tensor& sin_t) {
  require_that(a->val.rank() == 3, "rope: expected (B,N,D), got " + a->val.shape_str());
  const int64_t B = a->val.dim(0), N = a->val.dim(1), D = a->val.dim(2);
  const int64_t H = D / 2;
  require_that(D % 2 == 0, "rope: feature dim must be even");
  require_that(cos_t.shape == std::vector<int64_t>({N, H}) && sin_t.shape == cos_t.shape,
               "rope: phase tables must be (N, D/2)");
  Tensor v = a->val;
  for (int64_t b = 0; b < B; ++b)
    for (int64_t n = 0; n < N; ++n) {
      double* row = v.data.data() + (b * N + n) * D;
      const double* cs = cos_t.data.data() + n * H;
      const double* sn = sin_t.data.data() + n * H;
      for (int64_t h = 0; h < H; ++h) {
        double x1 = row[h], x2 = row[H + h];
        row[h] = x1 * cs[h] - x2 * sn[h];
        row[H + h] = x1 * sn[h] + x2 * cs[h];
      }
    }
  auto out = fresh(std::move(v));
  Node* o = out.get();
  Node* an = a.get();
  auto cos_keep = std::make_shared<Tensor>(cos_t);
  auto sin_keep = std::make_shared<Tensor>(sin_t);
  record(out, {a}, [o, an, cos_keep, sin_keep, B, N, D, H]() {
    Tensor& g = an->g();
    for (int64_t b = 0; b < B; ++b)
      for (int64_t n = 0; n < N; ++n) {
        double* gx = g.data.data() + (b * N + n) * D;
        const double* gy = o->grad.data.data() + (b * N + n) * D;
        const double* cs = cos_keep->data.data() + n * H;
        const double* sn = sin_keep->data.data() + n * H;
        for (int64_t h = 0; h < H; ++h) {
          // Inverse rotation on the gradient.
          gx[h] += gy[h] * cs[h] + gy[H + h] * sn[h];
          gx[H + h] += -gy[h] * sn[h] + gy[H + h] * cs[h];
        }
      }
  });
  return out;
}

// -------------------------------------------------------------------- indexing

NodePtr embed_rows(const NodePtr& table, const std::vector<int64_t>& ids) {
  require_that(table->val.rank() == 2, "embed_rows: table must be 2D");
  const int64_t V = table->val.dim(0), D = table->val.dim(1);
  for (int64_t id : ids)
    require_that(id >= 0 && id < V,
                 "embed_rows: id " + std::to_string(id) + " out of range [0," +
                     std::to_string(V) + ")");
  const int64_t N = static_cast<int64_t>(ids.size());
  Tensor v({N, D});
  for (int64_t i = 0; i < N; ++i)
    std::copy(table->val.data.begin() + ids[static_cast<size_t>(i)] * D,
              table->val.data.begin() + (ids[static_cast<size_t>(i)] + 1) * D,
              v.data.begin() + i * D);
  auto out = fresh(std::move(v));
  Node* o = out.get();
  Node* tn = table.get();
  auto ids_keep = std::make_shared<std::vector<int64_t>>(ids);
  record(out, {table}, [o, tn, ids_keep, D]() {
    Tensor& g = tn->g();
    const auto& idv = *ids_keep;
    for (size_t i = 0; i < idv.size(); ++i) {
      const double* gy = o->grad.data.data() + static_cast<int64_t>(i) * D;
      double* gt = g.data.data() + idv[i] * D;
      for (int64_t d = 0; d < D; ++d) gt[d] += gy[d];
    }
  });
  return out;
}

NodePtr cross_entropy_rows(const NodePtr& logits, const std::vector<int64_t>& targets) {
  require_that(logits->val.rank() == 2, "cross_entropy: logits must be 2D");
  const int64_t R = logits->val.dim(0), V = logits->val.dim(1);
  require_that(static_cast<int64_t>(targets.size()) == R,
               "cross_entropy: targets size " + std::to_string(targets.size()) +
                   " != rows " + std::to_string(R));
  Tensor probs({R, V});
  double loss = 0.0;
  int64_t count = 0;
  for (int64_t r = 0; r < R; ++r) {
    const double* row = logits->val.data.data() + r * V;
    double* p = probs.data.data() + r * V;
    double mx = row[0];
    for (int64_t c = 1; c < V; ++c) mx = std::max(mx, row[c]);
    double sum = 0.0;
    for (int64_t c = 0; c < V; ++c) {
      p[c] = std::exp(row[c] - mx);
      sum += p[c];
    }
    const double inv = 1.0 / sum;
    for (int64_t c = 0; c < V; ++c) p[c] *= inv;
    int64_t t = targets[static_cast<size_t>(r)];
    if (t < 0) continue;
    require_that(t < V, "cross_entropy: target " + std::to_string(t) + " out of range");
    loss -= std::log(std::max(p[t], 1e-300));
    ++count;
  }
  require_that(count > 0, "cross_entropy: every position is ignored");
  loss /= static_cast<double>(count);
  auto out = fresh(Tensor::from({1}, {loss}));
  Node* o = out.get();
  Node* ln = logits.get();
  auto probs_keep = std::make_shared<Tensor>(std::move(probs));
  auto tgt_keep = std::make_shared<std::vector<int64_t>>(targets);
  record(out, {logits}, [o, ln, probs_keep, tgt_keep, R, V, count]() {
    Tensor& g = ln->g();
    const double gy = o->grad.data[0] / static_cast<double>(count);
    for (int64_t r = 0; r < R; ++r) {
      int64_t t = (*tgt_keep)[static_cast<size_t>(r)];
      if (t < 0) continue;
      const double* p = probs_keep->data.data() + r * V;
      double* gx = g.data.data() + r * V;
      for (int64_t c = 0; c < V; ++c) gx[c] += gy * (p[c] - (c == t ? 1.0 : 0.0));
    }
  });
  return out;
}

// ------------------------------------------------------------------- conv3d

struct ConvDims {
  int64_t T, H, W, Ci, Co;
  int kt, kh, kw, st, sh, sw, pt, ph, pw;
  int64_t To, Ho, Wo, K;
};

static ConvDims conv_dims(const Tensor& x, const Tensor& w, std::array<int, 3> stride,
                          std::array<int, 3> pad) {
  require_that(x.rank() == 4, "conv3d: input must be (T,H,W,C), got " + x.shape_str());
  require_that(w.rank() == 5, "conv3d: weight must be (kt,kh,kw,Cin,Cout), got " + w.shape_str());
  ConvDims d;
  d.T = x.dim(0);
  d.H = x.dim(1);
  d.W = x.dim(2);
  d.Ci = x.dim(3);
  d.kt = static_cast<int>(w.dim(0));
  d.kh = static_cast<int>(w.dim(1));
  d.kw = static_cast<int>(w.dim(2));
  require_that(w.dim(3) == d.Ci, "conv3d: Cin mismatch");
  d.Co = w.dim(4);
  d.st = stride[0];
  d.sh = stride[1];
  d.sw = stride[2];
  d.pt = pad[0];
  d.ph = pad[1];
  d.pw = pad[2];
  d.To = (d.T + 2 * d.pt - d.kt) / d.st + 1;
  d.Ho = (d.H + 2 * d.ph - d.kh) / d.sh + 1;
  d.Wo = (d.W + 2 * d.pw - d.kw) / d.sw + 1;
  require_that(d.To >= 1 && d.Ho >= 1 && d.Wo >= 1, "conv3d: output would be empty");
  d.K = static_cast<int64_t>(d.kt) * d.kh * d.kw * d.Ci;
  return d;
}

// Gathers input patches into (To*Ho*Wo, K). Temporal out-of-range reads clamp
// to the edge frame (replicate padding); spatial out-of-range reads are zero.
static Tensor im2col(const Tensor& x, const ConvDims& d) {
  Tensor cols({d.To * d.Ho * d.Wo, d.K});
  int64_t p = 0;
  for (int64_t to = 0; to < d.To; ++to)
    for (int64_t ho = 0; ho < d.Ho; ++ho)
      for (int64_t wo = 0; wo < d.Wo; ++wo, ++p) {
        double* dst = cols.data.data() + p * d.K;
        for (int dt = 0; dt < d.kt; ++dt) {
          int64_t t = to * d.st + dt - d.pt;
          t = std::min(std::max<int64_t>(t, 0), d.T - 1);
          for (int dh = 0; dh < d.kh; ++dh) {
            int64_t h = ho * d.sh + dh - d.ph;
            const bool h_ok = h >= 0 && h < d.H;
            for (int dw = 0; dw < d.kw; ++dw, dst += d.Ci) {
              int64_t w = wo * d.sw + dw - d.pw;
              if (!h_ok || w < 0 || w >= d.W) continue;  // zeros
              const double* src = x.data.data() + ((t * d.H + h) * d.W + w) * d.Ci;
              std::copy(src, src + d.Ci, dst);
            }
          }
        }
      }
  return cols;
}

static void col2im_accum(const Tensor& dcols, const ConvDims& d, Tensor& gx) {
  int64_t p = 0;
  for (int64_t to = 0; to < d.To; ++to)
    for (int64_t ho = 0; ho < d.Ho; ++ho)
      for (int64_t wo = 0; wo < d.Wo; ++wo, ++p) {
        const double* src = dcols.data.data() + p * d.K;
        for (int dt = 0; dt < d.kt; ++dt) {
          int64_t t = to * d.st + dt - d.pt;
          t = std::min(std::max<int64_t>(t, 0), d.T - 1);
          for (int dh = 0; dh < d.kh; ++dh) {
            int64_t h = ho * d.sh + dh - d.ph;
            const bool h_ok = h >= 0 && h < d.H;
            for (int dw = 0; dw < d.kw; ++dw, src += d.Ci) {
              int64_t w = wo * d.sw + dw - d.pw;
              if (!h_ok || w < 0 || w >= d.W) continue;
              double* dst = gx.data.data() + ((t * d.H + h) * d.W + w) * d.Ci;
              for (int64_t c = 0; c < d.Ci; ++c) dst[c] += src[c];
            }
          }
        }
      }
}

NodePtr conv3d(const NodePtr& x, const NodePtr& w, const NodePtr& b, std::array<int, 3> stride,
               std::array<int, 3> pad) {
  ConvDims d = conv_dims(x->val, w->val, stride, pad);
  require_that(b->val.rank() == 1 && b->val.dim(0) == d.Co, "conv3d: bias must be (Cout)");
  auto cols = std::make_shared<Tensor>(im2col(x->val, d));
  const int64_t P = d.To * d.Ho * d.Wo;
  Tensor v({d.To, d.Ho, d.Wo, d.Co});
  {
    CMapRM cm(cols->data.data(), P, d.K), wm(w->val.data.data(), d.K, d.Co);
    MapRM vm(v.data.data(), P, d.Co);
    vm.noalias() = cm * wm;
    for (int64_t p = 0; p < P; ++p)
      for (int64_t c = 0; c < d.Co; ++c) v.data[static_cast<size_t>(p * d.Co + c)] += b->val[c];
  }
  auto out = fresh(std::move(v));
  Node* o = out.get();
  Node* xn = x.get();
  Node* wn = w.get();
  Node* bn = b.get();
  record(out, {x, w, b}, [o, xn, wn, bn, cols, d, P]() {
    CMapRM gy(o->grad.data.data(), P, d.Co);
    if (wn->requires_grad) {
      MapRM gw(wn->g().data.data(), d.K, d.Co);
      CMapRM cm(cols->data.data(), P, d.K);
      gw.noalias() += cm.transpose() * gy;
    }
    if (bn->requires_grad) {
      Tensor& gb = bn->g();
      for (int64_t p = 0; p < P; ++p)
        for (int64_t c = 0; c < d.Co; ++c)
          gb.data[static_cast<size_t>(c)] += o->grad.data[static_cast<size_t>(p * d.Co + c)];
    }
    if (xn->requires_grad) {
      Tensor dcols({P, d.K});
      MapRM dcm(dcols.data.data(), P, d.K);
      CMapRM wm(wn->val.data.data(), d.K, d.Co);
      dcm.noalias() = gy * wm.transpose();
      col2im_accum(dcols, d, xn->g());
    }
  });
  return out;
}

NodePtr upsample3d_nearest(const NodePtr& x, std::array<int, 3> factor) {
  require_that(x->val.rank() == 4, "upsample3d: input must be (T,H,W,C)");
  const int64_t T = x->val.dim(0), H = x->val.dim(1), W = x->val.dim(2), C = x->val.dim(3);
  const int ft = factor[0], fh = factor[1], fw = factor[2];
  Tensor v({T * ft, H * fh, W * fw, C});
  for (int64_t t = 0; t < T * ft; ++t)
    for (int64_t h = 0; h < H * fh; ++h)
      for (int64_t w = 0; w < W * fw; ++w) {
        const double* src = x->val.data.data() + (((t / ft) * H + h / fh) * W + w / fw) * C;
        double* dst = v.data.data() + ((t * H * fh + h) * W * fw + w) * C;
        std::copy(src, src + C, dst);
      }
  auto out = fresh(std::move(v));
  Node* o = out.get();
  Node* xn = x.get();
  record(out, {x}, [o, xn, T, H, W, C, ft, fh, fw]() {
    Tensor& g = xn->g();
    for (int64_t t = 0; t < T * ft; ++t)
      for (int64_t h = 0; h < H * fh; ++h)
        for (int64_t w = 0; w < W * fw; ++w) {
          const double* gy = o->grad.data.data() + ((t * H * fh + h) * W * fw + w) * C;
          double* gx = g.data.data() + (((t / ft) * H + h / fh) * W + w / fw) * C;
          for (int64_t c = 0; c < C; ++c) gx[c] += gy[c];
        }
  });
  return out;
}

// -------------------------------------------------------------- patch plumbing

static std::vector<int64_t> patch_index_map(const std::vector<int64_t>& vol_shape,
                                            std::array<int, 3> patch) {
  const int64_t T = vol_shape[0], H = vol_shape[1], W = vol_shape[2], C = vol_shape[3];
  const int pt = patch[0], ph = patch[1], pw = patch[2];
  const int64_t Tp = T / pt, Hp = H / ph, Wp = W / pw;
  std::vector<int64_t> map(static_cast<size_t>(T * H * W * C));
  int64_t o = 0;
  for (int64_t tt = 0; tt < Tp; ++tt)
    for (int64_t hh = 0; hh < Hp; ++hh)
      for (int64_t ww = 0; ww < Wp; ++ww)
        for (int dt = 0; dt < pt; ++dt)
          for (int dh = 0; dh < ph; ++dh)
            for (int dw = 0; dw < pw; ++dw)
              for (int64_t c = 0; c < C; ++c, ++o) {
                int64_t t = tt * pt + dt, h = hh * ph + dh, w = ww * pw + dw;
                map[static_cast<size_t>(o)] = ((t * H + h) * W + w) * C + c;
              }
  return map;
}

NodePtr patchify3d(const NodePtr& x, std::array<int, 3> patch) {
  require_that(x->val.rank() == 4, "patchify: input must be (T,H,W,C)");
  const int64_t T = x->val.dim(0), H = x->val.dim(1), W = x->val.dim(2), C = x->val.dim(3);
  require_that(T % patch[0] == 0 && H % patch[1] == 0 && W % patch[2] == 0,
               "patchify: volume " + x->val.shape_str() + " not divisible by patch");
  auto map = std::make_shared<std::vector<int64_t>>(patch_index_map(x->val.shape, patch));
  const int64_t ntok = (T / patch[0]) * (H / patch[1]) * (W / patch[2]);
  const int64_t dim = static_cast<int64_t>(patch[0]) * patch[1] * patch[2] * C;
  Tensor v({ntok, dim});
  for (size_t i = 0; i < map->size(); ++i) v.data[i] = x->val.data[static_cast<size_t>((*map)[i])];
  auto out = fresh(std::move(v));
  Node* o = out.get();
  Node* xn = x.get();
  record(out, {x}, [o, xn, map]() {
    Tensor& g = xn->g();
    for (size_t i = 0; i < map->size(); ++i)
      g.data[static_cast<size_t>((*map)[i])] += o->grad.data[i];
  });
  return out;
}

NodePtr unpatchify3d(const NodePtr& tokens, std::vector<int64_t> vol_shape,
                     std::array<int, 3> patch) {
  require_that(tokens->val.rank() == 2, "unpatchify: tokens must be 2D");
  require_that(vol_shape.size() == 4, "unpatchify: vol_shape must be (T,H,W,C)");
  require_that(numel_of(vol_shape) == tokens->val.numel(),
               "unpatchify: token count does not match volume");
  auto map = std::make_shared<std::vector<int64_t>>(patch_index_map(vol_shape, patch));
  Tensor v(vol_shape);
  for (size_t i = 0; i < map->size(); ++i)
    v.data[static_cast<size_t>((*map)[i])] = tokens->val.data[i];
  auto out = fresh(std::move(v));
  Node* o = out.get();
  Node* tn = tokens.get();
  record(out, {tokens}, [o, tn, map]() {
    Tensor& g = tn->g();
    for (size_t i = 0; i < map->size(); ++i)
      g.data[i] += o->grad.data[static_cast<size_t>((*map)[i])];
  });
  return out;
}

NodePtr detach(const NodePtr& a) { return constant(a->val); }

}  // namespace arlon::ag
