#include "arlon/optim.hpp"

#include <cmath>

namespace arlon::nn {

Adam::Adam(std::vector<ag::NodePtr> params, AdamConfig cfg)
    : params_(std::move(params)), cfg_(cfg) {
  m_.reserve(params_.size());
  v_.reserve(params_.size());
  for (const auto& p : params_) {
    m_.push_back(Tensor::zeros(p->val.shape));
    v_.push_back(Tensor::zeros(p->val.shape));
  }
}

void Adam::step() {
  ++t_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  for (size_t i = 0; i < params_.size(); ++i) {
    ag::Node& p = *params_[i];
    if (p.grad.data.empty()) continue;  // parameter never touched this step
    Tensor& m = m_[i];
    Tensor& v = v_[i];
    for (size_t j = 0; j < p.val.data.size(); ++j) {
      const double g = p.grad.data[j];
      m.data[j] = cfg_.beta1 * m.data[j] + (1.0 - cfg_.beta1) * g;
      v.data[j] = cfg_.beta2 * v.data[j] + (1.0 - cfg_.beta2) * g * g;
      const double mhat = m.data[j] / bc1;
      const double vhat = v.data[j] / bc2;
      p.val.data[j] -= cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps);
    }
  }
}

void Adam::zero_grad() { ag::zero_grad(params_); }

}  // namespace arlon::nn
