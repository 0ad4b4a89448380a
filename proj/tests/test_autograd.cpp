#include <doctest.h>

#include <cmath>
#include <functional>

#include "arlon/autograd.hpp"
#include "arlon/nn.hpp"
#include "arlon/rng.hpp"

using namespace arlon;
using namespace arlon::ag;

namespace {

// Central-difference check of d(sum(w * f(inputs)))/d(inputs) against the
// recorded gradients. Returns the worst relative error over every entry of
// every input.
double fd_check(const std::function<NodePtr(const std::vector<NodePtr>&)>& f,
                std::vector<Tensor> inputs, uint64_t wseed = 7, double h = 1e-5) {
  // Weighted sum makes the scalar loss sensitive to every output entry.
  auto build_loss = [&](const std::vector<NodePtr>& leaves) {
    NodePtr out = f(leaves);
    Rng wr(wseed);
    Tensor w = Tensor::rand_uniform(out->val.shape, wr, -1.0, 1.0);
    return sum_all(mul(out, constant(w)));
  };

  std::vector<NodePtr> leaves;
  for (const auto& t : inputs) leaves.push_back(leaf(t, true));
  NodePtr loss = build_loss(leaves);
  backward(loss);

  auto eval_at = [&](const std::vector<Tensor>& ts) {
    NoGradGuard ng;
    std::vector<NodePtr> ls;
    for (const auto& t : ts) ls.push_back(leaf(t, true));
    return build_loss(ls)->val[0];
  };

  double worst = 0.0;
  for (size_t i = 0; i < inputs.size(); ++i) {
    for (size_t j = 0; j < inputs[i].data.size(); ++j) {
      std::vector<Tensor> lo = inputs, hi = inputs;
      lo[i].data[j] -= h;
      hi[i].data[j] += h;
      double g_fd = (eval_at(hi) - eval_at(lo)) / (2.0 * h);
      double g_an = leaves[i]->grad.data.empty() ? 0.0 : leaves[i]->grad.data[j];
      double rel = std::abs(g_an - g_fd) / std::max({std::abs(g_an), std::abs(g_fd), 1e-6});
      worst = std::max(worst, rel);
    }
  }
  return worst;
}

Tensor randt(std::vector<int64_t> shape, uint64_t seed, double lo = -1.0, double hi = 1.0) {
  Rng r(seed);
  return Tensor::rand_uniform(std::move(shape), r, lo, hi);
}

}  // namespace

TEST_CASE("elementwise ops match finite differences") {
  Tensor a = randt({3, 4}, 1), b = randt({3, 4}, 2);
  CHECK(fd_check([](const std::vector<NodePtr>& v) { return add(v[0], v[1]); }, {a, b}) < 1e-6);
  CHECK(fd_check([](const std::vector<NodePtr>& v) { return sub(v[0], v[1]); }, {a, b}) < 1e-6);
  CHECK(fd_check([](const std::vector<NodePtr>& v) { return mul(v[0], v[1]); }, {a, b}) < 1e-6);
  CHECK(fd_check([](const std::vector<NodePtr>& v) { return scale(v[0], -2.5); }, {a}) < 1e-6);
  CHECK(fd_check([](const std::vector<NodePtr>& v) { return add_scalar(v[0], 0.7); }, {a}) < 1e-6);
  CHECK(fd_check([](const std::vector<NodePtr>& v) { return exp_op(v[0]); }, {a}) < 1e-6);
  CHECK(fd_check([](const std::vector<NodePtr>& v) { return square(v[0]); }, {a}) < 1e-6);
  CHECK(fd_check([](const std::vector<NodePtr>& v) { return sigmoid(v[0]); }, {a}) < 1e-6);
  CHECK(fd_check([](const std::vector<NodePtr>& v) { return silu(v[0]); }, {a}) < 1e-6);
  CHECK(fd_check([](const std::vector<NodePtr>& v) { return gelu(v[0]); }, {a}) < 1e-6);
  CHECK(fd_check([](const std::vector<NodePtr>& v) { return tanh_op(v[0]); }, {a}) < 1e-6);

  Tensor pos = randt({3, 4}, 3, 0.5, 2.0);
  CHECK(fd_check([](const std::vector<NodePtr>& v) { return log_op(v[0]); }, {pos}) < 1e-6);
  CHECK(fd_check([](const std::vector<NodePtr>& v) { return sqrt_op(v[0]); }, {pos}) < 1e-6);
  CHECK(fd_check([](const std::vector<NodePtr>& v) { return reciprocal(v[0]); }, {pos}) < 1e-6);

  // Keep relu inputs away from the kink.
  Tensor away = randt({3, 4}, 4);
  for (double& x : away.data) x += (x >= 0 ? 0.2 : -0.2);
  CHECK(fd_check([](const std::vector<NodePtr>& v) { return relu(v[0]); }, {away}) < 1e-6);
}

TEST_CASE("broadcast and reduction ops match finite differences") {
  Tensor a = randt({5, 3}, 10), v = randt({3}, 11);
  CHECK(fd_check([](const std::vector<NodePtr>& t) { return add_row(t[0], t[1]); }, {a, v}) < 1e-6);
  CHECK(fd_check([](const std::vector<NodePtr>& t) { return mul_row(t[0], t[1]); }, {a, v}) < 1e-6);
  CHECK(fd_check([](const std::vector<NodePtr>& t) { return sum_rows(t[0]); }, {a}) < 1e-6);
  CHECK(fd_check([](const std::vector<NodePtr>& t) { return mean_rows(t[0]); }, {a}) < 1e-6);
  CHECK(fd_check([](const std::vector<NodePtr>& t) { return sum_all(t[0]); }, {a}) < 1e-6);
  CHECK(fd_check([](const std::vector<NodePtr>& t) { return mean_all(t[0]); }, {a}) < 1e-6);
}

TEST_CASE("matmul ops match finite differences and a naive oracle") {
  Tensor a = randt({4, 3}, 20), b = randt({3, 5}, 21);
  CHECK(fd_check([](const std::vector<NodePtr>& t) { return mm(t[0], t[1]); }, {a, b}) < 1e-6);

  NodePtr c = mm(constant(a), constant(b));
  for (int64_t i = 0; i < 4; ++i)
    for (int64_t j = 0; j < 5; ++j) {
      double s = 0.0;
      for (int64_t k = 0; k < 3; ++k) s += a.at({i, k}) * b.at({k, j});
      CHECK(c->val.at({i, j}) == doctest::Approx(s).epsilon(1e-12));
    }

  Tensor ba = randt({2, 4, 3}, 22), bb = randt({2, 3, 5}, 23), bbt = randt({2, 5, 3}, 24);
  CHECK(fd_check([](const std::vector<NodePtr>& t) { return bmm(t[0], t[1]); }, {ba, bb}) < 1e-6);
  CHECK(fd_check([](const std::vector<NodePtr>& t) { return bmm(t[0], t[1], true); }, {ba, bbt}) <
        1e-6);
}

TEST_CASE("softmax, layernorm, cross-entropy match finite differences") {
  Tensor a = randt({4, 6}, 30, -2.0, 2.0);
  CHECK(fd_check([](const std::vector<NodePtr>& t) { return softmax_lastdim(t[0]); }, {a}) < 1e-6);
  CHECK(fd_check([](const std::vector<NodePtr>& t) { return layernorm_lastdim(t[0]); }, {a}) <
        1e-5);

  NodePtr sm = softmax_lastdim(constant(a));
  for (int64_t r = 0; r < 4; ++r) {
    double s = 0.0;
    for (int64_t c = 0; c < 6; ++c) s += sm->val.at({r, c});
    CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
  }

  // Cross-entropy gradient (the loss is already scalar; check directly).
  std::vector<int64_t> tgt{2, -1, 0, 5};
  NodePtr logits = leaf(a, true);
  NodePtr loss = cross_entropy_rows(logits, tgt);
  backward(loss);
  double h = 1e-6;
  for (int64_t r = 0; r < 4; ++r)
    for (int64_t c = 0; c < 6; ++c) {
      Tensor lo = a, hi = a;
      lo.at({r, c}) -= h;
      hi.at({r, c}) += h;
      NoGradGuard ng;
      double flo = cross_entropy_rows(leaf(lo, true), tgt)->val[0];
      double fhi = cross_entropy_rows(leaf(hi, true), tgt)->val[0];
      double g_fd = (fhi - flo) / (2 * h);
      CHECK(logits->grad.at({r, c}) == doctest::Approx(g_fd).epsilon(1e-5));
    }
}

TEST_CASE("cross-entropy of uniform logits over a 4-symbol support is ln 4") {
  // Equal logits on 4 columns, the rest effectively impossible.
  Tensor logits({3, 7});
  for (double& x : logits.data) x = -1e30;
  for (int64_t r = 0; r < 3; ++r)
    for (int64_t c = 0; c < 4; ++c) logits.at({r, c}) = 1.25;
  NodePtr loss = cross_entropy_rows(constant(logits), {0, 3, 2});
  CHECK(loss->val[0] == doctest::Approx(std::log(4.0)).epsilon(1e-12));
}

TEST_CASE("layernorm known-value oracle") {
  Tensor x = Tensor::from({1, 3}, {1.0, 2.0, 3.0});
  NodePtr y = layernorm_lastdim(constant(x), 0.0);
  const double s = std::sqrt(2.0 / 3.0);
  CHECK(y->val[0] == doctest::Approx(-1.0 / s).epsilon(1e-12));
  CHECK(y->val[1] == doctest::Approx(0.0).epsilon(1e-12));
  CHECK(y->val[2] == doctest::Approx(1.0 / s).epsilon(1e-12));
}

TEST_CASE("shape ops: permute bijectivity sweep, slice/concat, reshape, patchify") {
  for (uint64_t seed : {40ull, 41ull, 42ull}) {
    Rng r(seed);
    std::vector<int64_t> shape{1 + r.randint(1, 4), 1 + r.randint(1, 4), 1 + r.randint(1, 4)};
    Tensor t = Tensor::randn(shape, r);
    std::vector<int> perm{0, 1, 2};
    r.shuffle(perm);
    std::vector<int> inv(3);
    for (int i = 0; i < 3; ++i) inv[static_cast<size_t>(perm[static_cast<size_t>(i)])] = i;
    NodePtr round = permute(permute(constant(t), perm), inv);
    CHECK(tensor_bit_equal(round->val, t));
  }

  Tensor a = randt({6, 2, 3}, 43);
  CHECK(fd_check([](const std::vector<NodePtr>& t) { return permute(t[0], {2, 0, 1}); }, {a}) <
        1e-6);
  CHECK(fd_check([](const std::vector<NodePtr>& t) { return slice0(t[0], 1, 3); }, {a}) < 1e-6);
  CHECK(fd_check([](const std::vector<NodePtr>& t) { return reshape(t[0], {3, 12}); }, {a}) < 1e-6);
  Tensor b = randt({2, 2, 3}, 44);
  CHECK(fd_check([](const std::vector<NodePtr>& t) { return concat0({t[0], t[1]}); }, {a, b}) <
        1e-6);

  // patchify/unpatchify are inverse index bijections
  Tensor vol = randt({4, 4, 6, 3}, 45);
  NodePtr tok = patchify3d(constant(vol), {1, 2, 2});
  CHECK(tok->val.shape == std::vector<int64_t>({4 * 2 * 3, 12}));
  NodePtr back = unpatchify3d(tok, {4, 4, 6, 3}, {1, 2, 2});
  CHECK(tensor_bit_equal(back->val, vol));
  CHECK(fd_check([](const std::vector<NodePtr>& t) { return patchify3d(t[0], {2, 2, 2}); }, {vol}) <
        1e-6);
  CHECK(fd_check(
            [](const std::vector<NodePtr>& t) {
              return unpatchify3d(reshape(t[0], {12, 24}), {4, 4, 6, 3}, {2, 2, 3});
            },
            {randt({288}, 46)}) < 1e-6);
}

TEST_CASE("embedding rows: lookup matches table and gradients scatter") {
  Tensor table = randt({5, 3}, 50);
  std::vector<int64_t> ids{3, 0, 3};
  NodePtr e = embed_rows(constant(table), ids);
  for (int64_t d = 0; d < 3; ++d) {
    CHECK(e->val.at({0, d}) == table.at({3, d}));
    CHECK(e->val.at({1, d}) == table.at({0, d}));
  }
  CHECK(fd_check([&](const std::vector<NodePtr>& t) { return embed_rows(t[0], ids); }, {table}) <
        1e-6);
}

TEST_CASE("rope: rotation preserves norms, relative phase only, gradient ok") {
  Tensor cos_t, sin_t;
  nn::make_rope_tables(16, 8, 10000.0, cos_t, sin_t);

  Rng r(60);
  Tensor q = Tensor::randn({1, 16, 8}, r), k = Tensor::randn({1, 16, 8}, r);
  NodePtr qr = rope_rotate(constant(q), cos_t, sin_t);
  NodePtr kr = rope_rotate(constant(k), cos_t, sin_t);

  // Norm preservation per position.
  for (int64_t n = 0; n < 16; ++n) {
    double n0 = 0, n1 = 0;
    for (int64_t d = 0; d < 8; ++d) {
      n0 += q.at({0, n, d}) * q.at({0, n, d});
      n1 += qr->val.at({0, n, d}) * qr->val.at({0, n, d});
    }
    CHECK(n0 == doctest::Approx(n1).epsilon(1e-12));
  }

  // Inner product of rotated q at i with rotated k at j depends only on i - j:
  // compare (i, j) = (2, 6) against (7, 11).
  auto dot_at = [&](int64_t i, int64_t j) {
    // place the same raw vectors at different positions
    Tensor qq({1, 16, 8}), kk({1, 16, 8});
    for (int64_t d = 0; d < 8; ++d) {
      qq.at({0, i, d}) = q.at({0, 0, d});
      kk.at({0, j, d}) = k.at({0, 0, d});
    }
    NodePtr qqr = rope_rotate(constant(qq), cos_t, sin_t);
    NodePtr kkr = rope_rotate(constant(kk), cos_t, sin_t);
    double s = 0;
    for (int64_t d = 0; d < 8; ++d) s += qqr->val.at({0, i, d}) * kkr->val.at({0, j, d});
    return s;
  };
  CHECK(dot_at(2, 6) == doctest::Approx(dot_at(7, 11)).epsilon(1e-10));

  Tensor a = randt({2, 16, 8}, 61);
  CHECK(fd_check([&](const std::vector<NodePtr>& t) { return rope_rotate(t[0], cos_t, sin_t); },
                 {a}) < 1e-6);
}

namespace {
// Direct (non-im2col) conv3d used as an independent oracle.
Tensor conv3d_naive(const Tensor& x, const Tensor& w, const Tensor& b, std::array<int, 3> st,
                    std::array<int, 3> pd) {
  const int64_t T = x.dim(0), H = x.dim(1), W = x.dim(2), Ci = x.dim(3);
  const int64_t kt = w.dim(0), kh = w.dim(1), kw = w.dim(2), Co = w.dim(4);
  const int64_t To = (T + 2 * pd[0] - kt) / st[0] + 1;
  const int64_t Ho = (H + 2 * pd[1] - kh) / st[1] + 1;
  const int64_t Wo = (W + 2 * pd[2] - kw) / st[2] + 1;
  Tensor out({To, Ho, Wo, Co});
  for (int64_t to = 0; to < To; ++to)
    for (int64_t ho = 0; ho < Ho; ++ho)
      for (int64_t wo = 0; wo < Wo; ++wo)
        for (int64_t co = 0; co < Co; ++co) {
          double s = b[co];
          for (int64_t dt = 0; dt < kt; ++dt)
            for (int64_t dh = 0; dh < kh; ++dh)
              for (int64_t dw = 0; dw < kw; ++dw)
                for (int64_t ci = 0; ci < Ci; ++ci) {
                  int64_t t = to * st[0] + dt - pd[0];
                  t = std::min(std::max<int64_t>(t, 0), T - 1);  // temporal replicate
                  int64_t h = ho * st[1] + dh - pd[1];
                  int64_t ww = wo * st[2] + dw - pd[2];
                  if (h < 0 || h >= H || ww < 0 || ww >= W) continue;  // spatial zeros
                  s += x.at({t, h, ww, ci}) * w.at({dt, dh, dw, ci, co});
                }
          out.at({to, ho, wo, co}) = s;
        }
  return out;
}
}  // namespace

TEST_CASE("conv3d matches a naive oracle and finite differences") {
  struct Case {
    std::array<int, 3> k, s, p;
  };
  for (const Case& c : {Case{{3, 3, 3}, {1, 2, 2}, {1, 1, 1}}, Case{{3, 3, 3}, {2, 2, 2}, {1, 1, 1}},
                        Case{{1, 1, 1}, {1, 1, 1}, {0, 0, 0}}, Case{{2, 3, 3}, {1, 1, 1}, {0, 1, 1}}}) {
    Rng r(70);
    Tensor x = Tensor::randn({4, 6, 6, 2}, r);
    Tensor w = Tensor::randn({c.k[0], c.k[1], c.k[2], 2, 3}, r);
    Tensor b = Tensor::randn({3}, r);
    NodePtr y = conv3d(constant(x), constant(w), constant(b), c.s, c.p);
    Tensor oracle = conv3d_naive(x, w, b, c.s, c.p);
    CHECK(tensor_max_abs_diff(y->val, oracle) < 1e-12);

    CHECK(fd_check(
              [&](const std::vector<NodePtr>& t) { return conv3d(t[0], t[1], t[2], c.s, c.p); },
              {x, w, b}) < 1e-5);
  }
}

TEST_CASE("temporal replicate padding keeps a time-constant input time-constant") {
  Rng r(71);
  Tensor frame = Tensor::randn({1, 5, 5, 2}, r);
  Tensor x({4, 5, 5, 2});
  for (int64_t t = 0; t < 4; ++t)
    std::copy(frame.data.begin(), frame.data.end(), x.data.begin() + t * 50);
  Tensor w = Tensor::randn({3, 3, 3, 2, 3}, r);
  Tensor b = Tensor::randn({3}, r);
  NodePtr y = conv3d(constant(x), constant(w), constant(b), {1, 1, 1}, {1, 1, 1});
  for (int64_t t = 1; t < 4; ++t)
    for (int64_t i = 0; i < 75; ++i)
      CHECK(y->val.data[static_cast<size_t>(t * 75 + i)] ==
            y->val.data[static_cast<size_t>(i)]);
}

TEST_CASE("upsample3d nearest matches finite differences and replicates values") {
  Tensor x = randt({2, 3, 3, 2}, 80);
  NodePtr y = upsample3d_nearest(constant(x), {2, 2, 2});
  CHECK(y->val.shape == std::vector<int64_t>({4, 6, 6, 2}));
  CHECK(y->val.at({3, 5, 4, 1}) == x.at({1, 2, 2, 1}));
  CHECK(fd_check([](const std::vector<NodePtr>& t) { return upsample3d_nearest(t[0], {2, 2, 2}); },
                 {x}) < 1e-6);
}

TEST_CASE("composite graph: two-layer net gradient against finite differences") {
  Tensor x = randt({4, 5}, 90), w1 = randt({5, 7}, 91), b1 = randt({7}, 92),
         w2 = randt({7, 3}, 93), b2 = randt({3}, 94);
  auto net = [](const std::vector<NodePtr>& t) {
    NodePtr h = gelu(add_row(mm(t[0], t[1]), t[2]));
    NodePtr o = add_row(mm(h, t[3]), t[4]);
    return layernorm_lastdim(o);
  };
  CHECK(fd_check(net, {x, w1, b1, w2, b2}) < 1e-5);
}

TEST_CASE("gradient accumulation: reused node receives both contributions") {
  Tensor a = randt({2, 2}, 95);
  NodePtr x = leaf(a, true);
  NodePtr y = add(mul(x, x), scale(x, 3.0));  // x^2 + 3x, d/dx = 2x + 3
  backward(sum_all(y));
  for (int64_t i = 0; i < 4; ++i)
    CHECK(x->grad[i] == doctest::Approx(2 * a[i] + 3).epsilon(1e-12));
}

TEST_CASE("detach blocks gradients") {
  Tensor a = randt({3}, 96);
  NodePtr x = leaf(a, true);
  NodePtr y = mul(detach(x), x);  // gradient should be x (treat first factor const)
  backward(sum_all(y));
  for (int64_t i = 0; i < 3; ++i) CHECK(x->grad[i] == doctest::Approx(a[i]).epsilon(1e-12));
}

TEST_CASE("NoGradGuard records nothing") {
  NoGradGuard ng;
  NodePtr x = leaf(randt({3}, 97), true);
  NodePtr y = mul(x, x);
  CHECK_FALSE(y->requires_grad);
  CHECK(y->parents.empty());
}

TEST_CASE("attention layer: masked future positions have exactly zero influence") {
  Rng r(100);
  nn::Attention attn = nn::Attention::create(16, 4, r, 0.05);
  const int64_t N = 6;
  Tensor mask({N, N});
  for (int64_t i = 0; i < N; ++i)
    for (int64_t j = 0; j < N; ++j)
      mask.at({i, j}) = j <= i ? 0.0 : -std::numeric_limits<double>::infinity();

  Tensor x = Tensor::randn({1, N, 16}, r);
  Tensor x2 = x;
  // Perturb the last position; outputs at earlier positions must not move a bit.
  for (int64_t d = 0; d < 16; ++d) x2.at({0, N - 1, d}) += 1.75;

  NoGradGuard ng;
  NodePtr y1 = attn.forward(constant(x), constant(x), nullptr, nullptr, &mask);
  NodePtr y2 = attn.forward(constant(x2), constant(x2), nullptr, nullptr, &mask);
  for (int64_t n = 0; n < N - 1; ++n)
    for (int64_t d = 0; d < 16; ++d)
      CHECK(y1->val.at({0, n, d}) == y2->val.at({0, n, d}));
}

TEST_CASE("attention layer gradient against finite differences") {
  Rng r(101);
  nn::Attention attn = nn::Attention::create(8, 2, r, 0.2);
  Tensor x = Tensor::randn({2, 3, 8}, r);
  // Check gradients wrt input and wrt the four projection weights.
  std::vector<Tensor> inputs{x, attn.wq.w->val, attn.wk.w->val, attn.wv.w->val, attn.wo.w->val};
  auto f = [&](const std::vector<NodePtr>& t) {
    nn::Attention a2 = attn;  // share biases; swap in leaf weights under test
    a2.wq.w = t[1];
    a2.wk.w = t[2];
    a2.wv.w = t[3];
    a2.wo.w = t[4];
    return a2.forward(t[0], t[0]);
  };
  CHECK(fd_check(f, inputs) < 1e-5);
}
