#pragma once
#include <string>
#include <utility>
#include <vector>

#include "arlon/autograd.hpp"
#include "arlon/rng.hpp"

namespace arlon::nn {

using ag::NodePtr;

// Flat name -> parameter map; the checkpoint container serializes these names
// verbatim, so they must be stable across runs.
struct ParamRegistry {
  std::vector<std::pair<std::string, NodePtr>> items;

  void add(const std::string& name, const NodePtr& p) { items.emplace_back(name, p); }
  std::vector<NodePtr> ptrs() const {
    std::vector<NodePtr> out;
    out.reserve(items.size());
    for (const auto& [_, p] : items) out.push_back(p);
    return out;
  }
  int64_t count() const {
    int64_t n = 0;
    for (const auto& [_, p] : items) n += p->val.numel();
    return n;
  }
};

struct Linear {
  NodePtr w;  // (in, out)
  NodePtr b;  // (out) or empty
  bool has_bias = true;

  static Linear create(int64_t in, int64_t out, Rng& rng, double w_std, bool bias = true);
  static Linear create_zero(int64_t in, int64_t out, bool bias = true);

  NodePtr forward(const NodePtr& x) const;  // (..., in) -> (..., out)
  void reg(ParamRegistry& r, const std::string& prefix) const;
};

struct LayerNorm {
  NodePtr gamma, beta;
  double eps = 1e-6;

  static LayerNorm create(int64_t dim, double eps = 1e-6);
  NodePtr forward(const NodePtr& x) const;
  void reg(ParamRegistry& r, const std::string& prefix) const;
};

struct Embedding {
  NodePtr table;  // (vocab, dim)

  static Embedding create(int64_t vocab, int64_t dim, Rng& rng, double std = 0.02);
  NodePtr forward(const std::vector<int64_t>& ids) const { return ag::embed_rows(table, ids); }
  void reg(ParamRegistry& r, const std::string& prefix) const { r.add(prefix + "/table", table); }
};

struct Conv3d {
  NodePtr w;  // (kt,kh,kw,Cin,Cout)
  NodePtr b;  // (Cout)
  std::array<int, 3> stride{1, 1, 1};
  std::array<int, 3> pad{0, 0, 0};

  static Conv3d create(std::array<int, 3> kernel, int64_t cin, int64_t cout,
                       std::array<int, 3> stride, std::array<int, 3> pad, Rng& rng);
  NodePtr forward(const NodePtr& x) const { return ag::conv3d(x, w, b, stride, pad); }
  void reg(ParamRegistry& r, const std::string& prefix) const;
};

// Two-layer MLP with GELU, the transformer feed-forward shape.
struct Mlp {
  Linear fc1, fc2;

  static Mlp create(int64_t dim, int64_t hidden, Rng& rng, double w_std,
                    bool zero_out_proj = false);
  NodePtr forward(const NodePtr& x) const { return fc2.forward(ag::gelu(fc1.forward(x))); }
  void reg(ParamRegistry& r, const std::string& prefix) const;
};

// Multi-head scaled-dot-product attention over grouped sequences.
// q_in: (G, Nq, D), kv_in: (G, Nk, D). Optional rotary tables apply to q & k
// (self-attention only); optional additive mask (Nq, Nk) is shared by every
// group and head — 0 keeps a link, -inf removes it exactly.
struct Attention {
  Linear wq, wk, wv, wo;
  int heads = 1;

  static Attention create(int64_t dim, int heads, Rng& rng, double w_std,
                          bool zero_out_proj = false);
  NodePtr forward(const NodePtr& q_in, const NodePtr& kv_in, const Tensor* rope_cos = nullptr,
                  const Tensor* rope_sin = nullptr, const Tensor* mask = nullptr) const;
  void reg(ParamRegistry& r, const std::string& prefix) const;
};

// Inverted-frequency rotary phase tables for positions [0, n).
void make_rope_tables(int64_t n, int64_t head_dim, double base, Tensor& cos_t, Tensor& sin_t);

// Sinusoidal embedding of a scalar step index into `dim` channels.
Tensor sinusoidal_embedding(double t, int64_t dim, double max_period = 10000.0);

// Inverted dropout; identity when train is false or p == 0.
NodePtr dropout(const NodePtr& x, double p, bool train, Rng& rng);

}  // namespace arlon::nn
