#include "arlon/nn.hpp"

#include <cmath>

#include "arlon/errors.hpp"

namespace arlon::nn {

using namespace arlon::ag;

Linear Linear::create(int64_t in, int64_t out, Rng& rng, double w_std, bool bias) {
  Linear l;
  l.w = leaf(Tensor::randn({in, out}, rng, 0.0, w_std), true);
  l.has_bias = bias;
  if (bias) l.b = leaf(Tensor::zeros({out}), true);
  return l;
}

Linear Linear::create_zero(int64_t in, int64_t out, bool bias) {
  Linear l;
  l.w = leaf(Tensor::zeros({in, out}), true);
  l.has_bias = bias;
  if (bias) l.b = leaf(Tensor::zeros({out}), true);
  return l;
}

NodePtr Linear::forward(const NodePtr& x) const {
  const int64_t in = w->val.dim(0), out_dim = w->val.dim(1);
  require_that(x->val.last_dim() == in, "Linear: input last dim " +
                                            std::to_string(x->val.last_dim()) + " != " +
                                            std::to_string(in));
  std::vector<int64_t> out_shape = x->val.shape;
  out_shape.back() = out_dim;
  NodePtr flat = reshape(x, {x->val.rows(), in});
  NodePtr y = mm(flat, w);
  if (has_bias) y = add_row(y, b);
  return reshape(y, std::move(out_shape));
}

void Linear::reg(ParamRegistry& r, const std::string& prefix) const {
  r.add(prefix + "/w", w);
  if (has_bias) r.add(prefix + "/b", b);
}

LayerNorm LayerNorm::create(int64_t dim, double eps) {
  LayerNorm n;
  n.gamma = leaf(Tensor::full({dim}, 1.0), true);
  n.beta = leaf(Tensor::zeros({dim}), true);
  n.eps = eps;
  return n;
}

NodePtr LayerNorm::forward(const NodePtr& x) const {
  return add_row(mul_row(layernorm_lastdim(x, eps), gamma), beta);
}

void LayerNorm::reg(ParamRegistry& r, const std::string& prefix) const {
  r.add(prefix + "/gamma", gamma);
  r.add(prefix + "/beta", beta);
}

Embedding Embedding::create(int64_t vocab, int64_t dim, Rng& rng, double std) {
  Embedding e;
  e.table = leaf(Tensor::randn({vocab, dim}, rng, 0.0, std), true);
  return e;
}

Conv3d Conv3d::create(std::array<int, 3> kernel, int64_t cin, int64_t cout,
                      std::array<int, 3> stride, std::array<int, 3> pad, Rng& rng) {
  Conv3d c;
  const int64_t fan_in = static_cast<int64_t>(kernel[0]) * kernel[1] * kernel[2] * cin;
  const double std = std::sqrt(2.0 / static_cast<double>(fan_in));
  c.w = leaf(Tensor::randn({kernel[0], kernel[1], kernel[2], cin, cout}, rng, 0.0, std), true);
  c.b = leaf(Tensor::zeros({cout}), true);
  c.stride = stride;
  c.pad = pad;
  return c;
}

void Conv3d::reg(ParamRegistry& r, const std::string& prefix) const {
  r.add(prefix + "/w", w);
  r.add(prefix + "/b", b);
}

Mlp Mlp::create(int64_t dim, int64_t hidden, Rng& rng, double w_std, bool zero_out_proj) {
  Mlp m;
  m.fc1 = Linear::create(dim, hidden, rng, w_std);
  m.fc2 = zero_out_proj ? Linear::create_zero(hidden, dim) : Linear::create(hidden, dim, rng, w_std);
  return m;
}

void Mlp::reg(ParamRegistry& r, const std::string& prefix) const {
  fc1.reg(r, prefix + "/fc1");
  fc2.reg(r, prefix + "/fc2");
}

Attention Attention::create(int64_t dim, int heads, Rng& rng, double w_std, bool zero_out_proj) {
  require_that(dim % heads == 0, "Attention: dim must divide by heads");
  Attention a;
  a.heads = heads;
  a.wq = Linear::create(dim, dim, rng, w_std);
  a.wk = Linear::create(dim, dim, rng, w_std);
  a.wv = Linear::create(dim, dim, rng, w_std);
  a.wo = zero_out_proj ? Linear::create_zero(dim, dim) : Linear::create(dim, dim, rng, w_std);
  return a;
}

NodePtr Attention::forward(const NodePtr& q_in, const NodePtr& kv_in, const Tensor* rope_cos,
                           const Tensor* rope_sin, const Tensor* mask) const {
  require_that(q_in->val.rank() == 3 && kv_in->val.rank() == 3,
               "Attention: inputs must be (G,N,D)");
  const int64_t G = q_in->val.dim(0), Nq = q_in->val.dim(1), D = q_in->val.dim(2);
  const int64_t Nk = kv_in->val.dim(1);
  require_that(kv_in->val.dim(0) == G && kv_in->val.dim(2) == D, "Attention: group/dim mismatch");
  const int64_t H = heads, hd = D / heads;

  auto split_heads = [&](const NodePtr& x, int64_t n) {
    // (G,N,D) -> (G*H, N, hd)
    NodePtr r4 = reshape(x, {G, n, H, hd});
    NodePtr p = permute(r4, {0, 2, 1, 3});
    return reshape(p, {G * H, n, hd});
  };

  NodePtr q = split_heads(wq.forward(q_in), Nq);
  NodePtr k = split_heads(wk.forward(kv_in), Nk);
  NodePtr v = split_heads(wv.forward(kv_in), Nk);

  if (rope_cos != nullptr) {
    q = rope_rotate(q, *rope_cos, *rope_sin);
    k = rope_rotate(k, *rope_cos, *rope_sin);
  }

  NodePtr scores = scale(bmm(q, k, /*trans_b=*/true), 1.0 / std::sqrt(static_cast<double>(hd)));
  if (mask != nullptr) {
    require_that(mask->shape == std::vector<int64_t>({Nq, Nk}), "Attention: mask must be (Nq,Nk)");
    Tensor tiled({G * H, Nq, Nk});
    for (int64_t g = 0; g < G * H; ++g)
      std::copy(mask->data.begin(), mask->data.end(), tiled.data.begin() + g * Nq * Nk);
    scores = add(scores, constant(std::move(tiled)));
  }
  NodePtr probs = softmax_lastdim(scores);
  NodePtr ctx = bmm(probs, v);  // (G*H, Nq, hd)

  NodePtr merged = reshape(permute(reshape(ctx, {G, H, Nq, hd}), {0, 2, 1, 3}), {G, Nq, D});
  return wo.forward(merged);
}

void Attention::reg(ParamRegistry& r, const std::string& prefix) const {
  wq.reg(r, prefix + "/wq");
  wk.reg(r, prefix + "/wk");
  wv.reg(r, prefix + "/wv");
  wo.reg(r, prefix + "/wo");
}

void make_rope_tables(int64_t n, int64_t head_dim, double base, Tensor& cos_t, Tensor& sin_t) {
  require_that(head_dim % 2 == 0, "rope tables: head_dim must be even");
  const int64_t half = head_dim / 2;
  cos_t = Tensor({n, half});
  sin_t = Tensor({n, half});
  for (int64_t p = 0; p < n; ++p)
    for (int64_t i = 0; i < half; ++i) {
      double freq = std::pow(base, -2.0 * static_cast<double>(i) / static_cast<double>(head_dim));
      double ang = static_cast<double>(p) * freq;
      cos_t.at({p, i}) = std::cos(ang);
      sin_t.at({p, i}) = std::sin(ang);
    }
}

Tensor sinusoidal_embedding(double t, int64_t dim, double max_period) {
  Tensor e({dim});
  const int64_t half = dim / 2;
  for (int64_t i = 0; i < half; ++i) {
    double freq = std::exp(-std::log(max_period) * static_cast<double>(i) /
                           static_cast<double>(half));
    e[i] = std::cos(t * freq);
    e[half + i] = std::sin(t * freq);
  }
  if (dim % 2 == 1) e[dim - 1] = 0.0;
  return e;
}

NodePtr dropout(const NodePtr& x, double p, bool train, Rng& rng) {
  if (!train || p <= 0.0) return x;
  Tensor mask(x->val.shape);
  const double keep = 1.0 - p;
  for (double& m : mask.data) m = rng.uniform() < keep ? 1.0 / keep : 0.0;
  return mul(x, constant(std::move(mask)));
}

}  // namespace arlon::nn
