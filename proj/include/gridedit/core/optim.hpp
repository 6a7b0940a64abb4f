#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "gridedit/core/nn.hpp"

namespace gridedit::optim {

struct AdamWConfig {
    double lr           = 1e-4;
    double beta1        = 0.9;
    double beta2        = 0.999;
    double eps          = 1e-8;
    double weight_decay = 0.0;
};

// Adam with decoupled weight decay. Moment buffers are kept in parameter
// registration order so they serialize alongside the parameters.
template <class S>
class AdamW {
public:
    AdamW() = default;
    AdamW(const nn::ParamStore<S>& ps, AdamWConfig cfg) : cfg_(cfg) {
        for (const auto& [name, p] : ps.items()) {
            m_.emplace_back(p.size(), S(0));
            v_.emplace_back(p.size(), S(0));
        }
    }

    void step(nn::ParamStore<S>& ps, double lr) {
        ++t_;
        const double bc1 = 1.0 - std::pow(cfg_.beta1, double(t_));
        const double bc2 = 1.0 - std::pow(cfg_.beta2, double(t_));
        std::size_t idx  = 0;
        for (auto& [name, p] : ps.items()) {
            auto& val        = p.mutable_value();
            const auto& grad = p.grad();
            auto& m          = m_[idx];
            auto& v          = v_[idx];
            ++idx;
            for (std::size_t i = 0; i < val.size(); ++i) {
                const S g = grad.empty() ? S(0) : grad[i];
                m[i]      = S(cfg_.beta1) * m[i] + S(1 - cfg_.beta1) * g;
                v[i]      = S(cfg_.beta2) * v[i] + S(1 - cfg_.beta2) * g * g;
                const S mh = m[i] / S(bc1);
                const S vh = v[i] / S(bc2);
                val[i] -= S(lr) * (mh / (std::sqrt(vh) + S(cfg_.eps)) + S(cfg_.weight_decay) * val[i]);
            }
        }
    }

    long long steps() const { return t_; }
    void set_steps(long long t) { t_ = t; }
    std::vector<std::vector<S>>& first_moments() { return m_; }
    std::vector<std::vector<S>>& second_moments() { return v_; }
    const AdamWConfig& config() const { return cfg_; }

private:
    AdamWConfig cfg_;
    std::vector<std::vector<S>> m_, v_;
    long long t_ = 0;
};

// Scales all gradients so their global L2 norm is at most max_norm; returns the
// pre-clipping norm.
template <class S>
double clip_grad_norm(nn::ParamStore<S>& ps, double max_norm) {
    double sq = 0.0;
    for (auto& [name, p] : ps.items())
        for (S g : p.grad()) sq += double(g) * double(g);
    const double norm = std::sqrt(sq);
    if (max_norm > 0.0 && norm > max_norm) {
        const S s = S(max_norm / (norm + 1e-12));
        for (auto& [name, p] : ps.items())
            for (S& g : p.grad()) g *= s;
    }
    return norm;
}

// Exponential moving average of parameter values.
template <class S>
class Ema {
public:
    Ema() = default;
    Ema(const nn::ParamStore<S>& ps, double decay) : decay_(decay) {
        for (const auto& [name, p] : ps.items()) shadow_.emplace_back(p.value().begin(), p.value().end());
    }

    // Effective decay min(decay, (1+n)/(10+n)) after n prior updates, so early
    // averages are not dominated by the initialization.
    void update(const nn::ParamStore<S>& ps) {
        const double d = std::min(decay_, (1.0 + double(updates_)) / (10.0 + double(updates_)));
        ++updates_;
        std::size_t idx = 0;
        for (const auto& [name, p] : ps.items()) {
            auto& sh = shadow_[idx++];
            for (std::size_t i = 0; i < sh.size(); ++i) sh[i] = S(d) * sh[i] + S(1 - d) * p.value()[i];
        }
    }

    long long updates() const { return updates_; }
    void set_updates(long long n) { updates_ = n; }

    void copy_to(nn::ParamStore<S>& ps) const {
        std::size_t idx = 0;
        for (auto& [name, p] : ps.items()) {
            const auto& sh = shadow_[idx++];
            p.mutable_value().assign(sh.begin(), sh.end());
        }
    }

    double decay() const { return decay_; }
    std::vector<std::vector<S>>& shadow() { return shadow_; }
    const std::vector<std::vector<S>>& shadow() const { return shadow_; }

private:
    double decay_       = 0.999;
    long long updates_  = 0;
    std::vector<std::vector<S>> shadow_;
};

}  // namespace gridedit::optim
