#pragma once

#include <cmath>
#include <stdexcept>
#include <vector>

#include "r2r/autograd.hpp"

namespace r2r {

// Plain Adam over a fixed parameter list. Update order is the list order, so
// runs are deterministic.
template <typename T>
class AdamOptimizer {
public:
    explicit AdamOptimizer(std::vector<VarT<T>> params, double lr, double beta1 = 0.9,
                           double beta2 = 0.999, double eps = 1e-8)
        : params_(std::move(params)), lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
        if (!(lr > 0.0)) throw std::invalid_argument("adam: learning rate must be positive");
        for (const auto& p : params_) {
            m_.emplace_back(p->value.shape);
            v_.emplace_back(p->value.shape);
        }
    }

    void zero_grad() {
        for (auto& p : params_) p->zero_grad();
    }

    void step() {
        ++t_;
        double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
        double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
        for (size_t pi = 0; pi < params_.size(); ++pi) {
            auto& p = params_[pi];
            if (p->grad.numel() != p->value.numel()) continue;  // untouched this step
            auto& m = m_[pi];
            auto& v = v_[pi];
            for (int64_t i = 0; i < p->value.numel(); ++i) {
                double g = static_cast<double>(p->grad[i]);
                double mi = beta1_ * static_cast<double>(m[i]) + (1.0 - beta1_) * g;
                double vi = beta2_ * static_cast<double>(v[i]) + (1.0 - beta2_) * g * g;
                m[i] = static_cast<T>(mi);
                v[i] = static_cast<T>(vi);
                double update = lr_ * (mi / bc1) / (std::sqrt(vi / bc2) + eps_);
                p->value[i] = static_cast<T>(static_cast<double>(p->value[i]) - update);
            }
        }
    }

    int64_t step_count() const { return t_; }

private:
    std::vector<VarT<T>> params_;
    std::vector<TensorT<T>> m_, v_;
    double lr_, beta1_, beta2_, eps_;
    int64_t t_ = 0;
};

}  // namespace r2r
