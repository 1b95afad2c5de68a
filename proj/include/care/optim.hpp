#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "care/tensor.hpp"

namespace care {

struct AdamWConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;
};

// AdamW with decoupled weight decay: the decay term is applied directly to the
// parameter and never enters the moment estimates.
template <typename S>
class AdamW {
public:
    AdamW() = default;

    AdamW(std::vector<TensorT<S>> params, AdamWConfig cfg) : cfg_(cfg), params_(std::move(params)) {
        m_.resize(params_.size());
        v_.resize(params_.size());
        for (std::size_t i = 0; i < params_.size(); ++i) {
            m_[i].assign(params_[i].numel(), S(0));
            v_[i].assign(params_[i].numel(), S(0));
        }
    }

    // Rejects the whole step (no state mutated) if any gradient is non-finite.
    void step() {
        for (std::size_t i = 0; i < params_.size(); ++i)
            for (S g : params_[i].grad())
                if (!std::isfinite(static_cast<double>(g)))
                    throw NonFiniteError("adamw: non-finite gradient in parameter " +
                                         std::to_string(i) + ", step rejected");
        ++t_;
        const S lr = static_cast<S>(cfg_.lr);
        const S b1 = static_cast<S>(cfg_.beta1);
        const S b2 = static_cast<S>(cfg_.beta2);
        const S eps = static_cast<S>(cfg_.eps);
        const S wd = static_cast<S>(cfg_.weight_decay);
        const S bc1 = S(1) - static_cast<S>(std::pow(cfg_.beta1, static_cast<double>(t_)));
        const S bc2 = S(1) - static_cast<S>(std::pow(cfg_.beta2, static_cast<double>(t_)));
        for (std::size_t i = 0; i < params_.size(); ++i) {
            auto& theta = params_[i].data();
            const auto& g = params_[i].grad();
            auto& m = m_[i];
            auto& v = v_[i];
            for (std::size_t j = 0; j < theta.size(); ++j) {
                m[j] = b1 * m[j] + (S(1) - b1) * g[j];
                v[j] = b2 * v[j] + (S(1) - b2) * g[j] * g[j];
                const S mhat = m[j] / bc1;
                const S vhat = v[j] / bc2;
                theta[j] -= lr * (mhat / (std::sqrt(vhat) + eps) + wd * theta[j]);
            }
        }
    }

    void zero_grad() {
        for (auto& p : params_) p.zero_grad();
    }

    std::int64_t step_count() const { return t_; }
    void set_step_count(std::int64_t t) { t_ = t; }

    const AdamWConfig& config() const { return cfg_; }
    std::size_t size() const { return params_.size(); }
    std::vector<S>& moment1(std::size_t i) { return m_[i]; }
    std::vector<S>& moment2(std::size_t i) { return v_[i]; }
    const TensorT<S>& param(std::size_t i) const { return params_[i]; }

private:
    AdamWConfig cfg_{};
    std::vector<TensorT<S>> params_;
    std::vector<std::vector<S>> m_, v_;
    std::int64_t t_ = 0;
};

}  // namespace care
