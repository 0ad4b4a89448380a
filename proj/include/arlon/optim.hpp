#pragma once
#include <vector>

#include "arlon/autograd.hpp"

namespace arlon::nn {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Plain Adam with bias correction. Only parameters handed to the constructor
// are ever touched, which is how stage freezing works: frozen modules simply
// stay out of the optimizer.
class Adam {
 public:
  Adam(std::vector<ag::NodePtr> params, AdamConfig cfg);

  void step();
  void zero_grad();
  void set_lr(double lr) { cfg_.lr = lr; }
  double lr() const { return cfg_.lr; }
  int64_t steps_taken() const { return t_; }

 private:
  std::vector<ag::NodePtr> params_;
  std::vector<Tensor> m_, v_;
  AdamConfig cfg_;
  int64_t t_ = 0;
};

}  // namespace arlon::nn
