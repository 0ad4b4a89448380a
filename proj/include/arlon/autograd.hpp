#pragma once
#include <array>
#include <functional>
#include <memory>
#include <vector>

#include "arlon/tensor.hpp"

namespace arlon::ag {

// Define-by-run reverse-mode autodiff over Tensor. Every op returns a fresh
// Node; backward() walks the recorded graph once. Parameters are long-lived
// leaf nodes owned by the models; intermediates die with the loss node.
struct Node {
  Tensor val;
  Tensor grad;  // allocated lazily, same shape as val
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;  // keeps closure-captured inputs alive
  std::function<void()> backprop;

  Tensor& g() {
    if (grad.data.empty()) grad = Tensor::zeros(val.shape);
    return grad;
  }
};

using NodePtr = std::shared_ptr<Node>;

NodePtr leaf(Tensor v, bool requires_grad);
NodePtr constant(Tensor v);
NodePtr scalar_const(double v);

// While a guard is alive, ops record nothing; forwards become plain math.
// Used by sampling/eval loops.
bool grad_enabled();
struct NoGradGuard {
  NoGradGuard();
  ~NoGradGuard();

 private:
  bool prev_;
};

// Runs reverse-mode accumulation from a scalar root.
void backward(const NodePtr& root);
void zero_grad(const std::vector<NodePtr>& params);

// ---- elementwise ----
NodePtr add(const NodePtr& a, const NodePtr& b);
NodePtr sub(const NodePtr& a, const NodePtr& b);
NodePtr mul(const NodePtr& a, const NodePtr& b);
NodePtr scale(const NodePtr& a, double c);
NodePtr add_scalar(const NodePtr& a, double c);
NodePtr neg(const NodePtr& a);
NodePtr exp_op(const NodePtr& a);
NodePtr log_op(const NodePtr& a);
NodePtr sqrt_op(const NodePtr& a);
NodePtr square(const NodePtr& a);
NodePtr reciprocal(const NodePtr& a);
NodePtr sigmoid(const NodePtr& a);
NodePtr silu(const NodePtr& a);
NodePtr gelu(const NodePtr& a);
NodePtr tanh_op(const NodePtr& a);
NodePtr relu(const NodePtr& a);

// ---- broadcast over rows (tensor viewed as rows x last_dim, vec of last_dim) ----
NodePtr add_row(const NodePtr& a, const NodePtr& vec);
NodePtr mul_row(const NodePtr& a, const NodePtr& vec);

// ---- reductions ----
NodePtr sum_all(const NodePtr& a);
NodePtr mean_all(const NodePtr& a);
NodePtr sum_rows(const NodePtr& a);   // (R,C) view -> (C)
NodePtr mean_rows(const NodePtr& a);  // (R,C) view -> (C)

// ---- linear algebra ----
NodePtr mm(const NodePtr& a, const NodePtr& b);  // (M,K) x (K,N)
// (B,M,K) x (B,K,N) -> (B,M,N); with trans_b, b is (B,N,K) and out = a b^T.
NodePtr bmm(const NodePtr& a, const NodePtr& b, bool trans_b = false);

// ---- shape ----
NodePtr reshape(const NodePtr& a, std::vector<int64_t> shape);
NodePtr permute(const NodePtr& a, std::vector<int> perm);
NodePtr slice0(const NodePtr& a, int64_t start, int64_t len);
NodePtr concat0(const std::vector<NodePtr>& parts);

// ---- normalization / attention pieces ----
NodePtr softmax_lastdim(const NodePtr& a);
NodePtr layernorm_lastdim(const NodePtr& a, double eps = 1e-6);
// Rotary position encoding on (B,N,D): pairs are (x[i], x[i+D/2]).
// cos/sin have shape (N, D/2) and are treated as constants.
NodePtr rope_rotate(const NodePtr& a, const Tensor& cos_t, const Tensor& sin_t);

// ---- indexing ----
NodePtr embed_rows(const NodePtr& table, const std::vector<int64_t>& ids);

// Mean cross-entropy of row-wise logits vs integer targets; target < 0 means
// "ignore this row". Errors if every row is ignored.
NodePtr cross_entropy_rows(const NodePtr& logits, const std::vector<int64_t>& targets);

// ---- conv / resampling ----
// x: (T,H,W,Cin), w: (kt,kh,kw,Cin,Cout), b: (Cout).
// Temporal padding replicates edge frames so a time-constant input stays
// time-constant; spatial padding is zeros.
NodePtr conv3d(const NodePtr& x, const NodePtr& w, const NodePtr& b,
               std::array<int, 3> stride, std::array<int, 3> pad);
NodePtr upsample3d_nearest(const NodePtr& x, std::array<int, 3> factor);

// ---- patch embedding plumbing (pure index bijections) ----
// x: (T,H,W,C) -> tokens (T/pt * H/ph * W/pw, pt*ph*pw*C), token order t-major
// then row-major spatial, patch interior order (dt,dh,dw,c).
NodePtr patchify3d(const NodePtr& x, std::array<int, 3> patch);
NodePtr unpatchify3d(const NodePtr& tokens, std::vector<int64_t> vol_shape,
                     std::array<int, 3> patch);

NodePtr detach(const NodePtr& a);

inline const Tensor& value_of(const NodePtr& n) { return n->val; }

}  // namespace arlon::ag
