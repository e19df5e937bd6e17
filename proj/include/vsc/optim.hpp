#pragma once
#include <cmath>

#include "vsc/common.hpp"

namespace vsc {

// Adam with bias correction. Deterministic given the gradient sequence.
class Adam {
 public:
  Adam(int dim, double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : lr_(lr), b1_(beta1), b2_(beta2), eps_(eps),
        m_(Vec::Zero(dim)), v_(Vec::Zero(dim)) {}

  void step(Vec& params, const Vec& grad) {
    require(params.size() == m_.size() && grad.size() == m_.size(),
            "Adam::step: dimension mismatch");
    ++t_;
    m_ = b1_ * m_ + (1.0 - b1_) * grad;
    v_ = b2_ * v_ + (1.0 - b2_) * grad.cwiseProduct(grad);
    const double c1 = 1.0 - std::pow(b1_, t_);
    const double c2 = 1.0 - std::pow(b2_, t_);
    params -= (lr_ / c1) * m_.cwiseQuotient(((v_ / c2).cwiseSqrt().array() + eps_).matrix());
  }

  void set_lr(double lr) { lr_ = lr; }
  double lr() const { return lr_; }
  long long steps() const { return t_; }

 private:
  double lr_, b1_, b2_, eps_;
  long long t_ = 0;
  Vec m_, v_;
};

}  // namespace vsc
