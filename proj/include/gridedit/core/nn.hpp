#pragma once

#include <cmath>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "gridedit/core/autograd.hpp"
#include "gridedit/core/rng.hpp"

namespace gridedit::nn {

using ag::Var;

// Ordered, named collection of trainable tensors. Order of registration is the
// serialization order and is stable for a given configuration.
template <class S>
class ParamStore {
public:
    Var<S> add(const std::string& name, ag::Shape shape, ag::Buffer<S> init) {
        if (index_.count(name)) throw ConfigError("duplicate parameter name " + name);
        index_[name] = params_.size();
        params_.emplace_back(name, Var<S>::parameter(std::move(init), std::move(shape)));
        return params_.back().second;
    }

    Var<S> normal(const std::string& name, ag::Shape shape, double stddev, Rng& rng) {
        ag::Buffer<S> v(ag::numel(shape));
        std::normal_distribution<double> dist(0.0, stddev);
        for (auto& x : v) x = static_cast<S>(dist(rng));
        return add(name, std::move(shape), std::move(v));
    }

    Var<S> constant(const std::string& name, ag::Shape shape, S value) {
        return add(name, shape, ag::Buffer<S>(ag::numel(shape), value));
    }

    const std::vector<std::pair<std::string, Var<S>>>& items() const { return params_; }
    std::vector<std::pair<std::string, Var<S>>>& items() { return params_; }

    bool contains(const std::string& name) const { return index_.count(name) != 0; }

    Var<S>& at(const std::string& name) {
        auto it = index_.find(name);
        if (it == index_.end()) throw ConfigError("unknown parameter " + name);
        return params_[it->second].second;
    }

    std::size_t count() const {
        std::size_t n = 0;
        for (const auto& [name, p] : params_) n += p.size();
        return n;
    }

    void zero_grad() {
        for (auto& [name, p] : params_) p.zero_grad();
    }

    // Parameters whose names start with `prefix`.
    std::vector<Var<S>> with_prefix(const std::string& prefix) const {
        std::vector<Var<S>> out;
        for (const auto& [name, p] : params_)
            if (name.rfind(prefix, 0) == 0) out.push_back(p);
        return out;
    }

private:
    std::vector<std::pair<std::string, Var<S>>> params_;
    std::map<std::string, std::size_t> index_;
};

template <class S>
struct Linear {
    Var<S> weight, bias;
    int in = 0, out = 0;

    Linear() = default;
    Linear(ParamStore<S>& ps, const std::string& name, int in_dim, int out_dim, Rng& rng, bool zero_init = false,
           bool with_bias = true)
        : in(in_dim), out(out_dim) {
        const double std = zero_init ? 0.0 : 1.0 / std::sqrt(double(in_dim));
        weight           = ps.normal(name + ".weight", {out_dim, in_dim}, std, rng);
        if (with_bias) bias = ps.constant(name + ".bias", {out_dim}, S(0));
    }

    Var<S> operator()(const Var<S>& x) const { return ag::linear(x, weight, bias.defined() ? &bias : nullptr); }
};

template <class S>
struct Conv2d {
    Var<S> weight, bias;
    int kernel = 3, stride = 1, pad = 1;

    Conv2d() = default;
    Conv2d(ParamStore<S>& ps, const std::string& name, int cin, int cout, int k, int stride_, Rng& rng,
           bool zero_init = false)
        : kernel(k), stride(stride_), pad(k / 2) {
        const double std = zero_init ? 0.0 : 1.0 / std::sqrt(double(cin * k * k));
        weight           = ps.normal(name + ".weight", {cout, cin * k * k}, std, rng);
        bias             = ps.constant(name + ".bias", {cout}, S(0));
    }

    Var<S> operator()(const Var<S>& x) const { return ag::conv2d(x, weight, &bias, kernel, stride, pad); }
};

template <class S>
struct GroupNorm {
    Var<S> gamma, beta;
    int groups = 8;

    GroupNorm() = default;
    GroupNorm(ParamStore<S>& ps, const std::string& name, int channels, int groups_) : groups(groups_) {
        while (channels % groups != 0) --groups;
        gamma = ps.constant(name + ".gamma", {channels}, S(1));
        beta  = ps.constant(name + ".beta", {channels}, S(0));
    }

    Var<S> operator()(const Var<S>& x) const { return ag::group_norm(x, gamma, beta, groups); }
};

template <class S>
struct LayerNorm {
    Var<S> gamma, beta;

    LayerNorm() = default;
    LayerNorm(ParamStore<S>& ps, const std::string& name, int dim) {
        gamma = ps.constant(name + ".gamma", {dim}, S(1));
        beta  = ps.constant(name + ".beta", {dim}, S(0));
    }

    Var<S> operator()(const Var<S>& x) const { return ag::layer_norm(x, gamma, beta); }
};

// Pre-norm transformer encoder layer with full (bidirectional) attention.
template <class S>
struct TransformerLayer {
    LayerNorm<S> norm1, norm2;
    Linear<S> q, k, v, proj, fc1, fc2;
    int heads = 4;

    TransformerLayer() = default;
    TransformerLayer(ParamStore<S>& ps, const std::string& name, int dim, int heads_, int mlp_ratio, Rng& rng)
        : heads(heads_) {
        norm1 = LayerNorm<S>(ps, name + ".norm1", dim);
        q     = Linear<S>(ps, name + ".q", dim, dim, rng);
        k     = Linear<S>(ps, name + ".k", dim, dim, rng);
        v     = Linear<S>(ps, name + ".v", dim, dim, rng);
        proj  = Linear<S>(ps, name + ".proj", dim, dim, rng);
        norm2 = LayerNorm<S>(ps, name + ".norm2", dim);
        fc1   = Linear<S>(ps, name + ".fc1", dim, dim * mlp_ratio, rng);
        fc2   = Linear<S>(ps, name + ".fc2", dim * mlp_ratio, dim, rng);
    }

    Var<S> operator()(const Var<S>& x) const {
        auto n = norm1(x);
        auto h = ag::add(x, proj(ag::attention(q(n), k(n), v(n), heads)));
        return ag::add(h, fc2(ag::gelu(fc1(norm2(h)))));
    }
};

// Sinusoidal embedding of a scalar position (diffusion step).
template <class S>
ag::Buffer<S> sinusoidal_embedding(double position, int dim) {
    ag::Buffer<S> out(static_cast<std::size_t>(dim));
    const int half = dim / 2;
    for (int i = 0; i < half; ++i) {
        const double freq = std::exp(-std::log(10000.0) * double(i) / double(half));
        out[i]            = static_cast<S>(std::sin(position * freq));
        out[half + i]     = static_cast<S>(std::cos(position * freq));
    }
    return out;
}

// Fixed 2-D sinusoidal positional code for an H x W token grid, [H*W, dim].
template <class S>
ag::Buffer<S> positional_grid(int h, int w, int dim) {
    ag::Buffer<S> out(static_cast<std::size_t>(h) * w * dim);
    const int quarter = dim / 4;
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            S* row = out.data() + (static_cast<std::size_t>(y) * w + x) * dim;
            for (int i = 0; i < quarter; ++i) {
                const double freq       = std::pow(2.0, i) * M_PI / 64.0;
                row[i]                  = static_cast<S>(std::sin(y * freq));
                row[quarter + i]        = static_cast<S>(std::cos(y * freq));
                row[2 * quarter + i]    = static_cast<S>(std::sin(x * freq));
                row[3 * quarter + i]    = static_cast<S>(std::cos(x * freq));
            }
        }
    return out;
}

}  // namespace gridedit::nn
