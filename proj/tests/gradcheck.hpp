#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <functional>
#include <random>
#include <vector>

#include "gridedit/core/autograd.hpp"

namespace gradcheck {

using gridedit::ag::Buffer;
using gridedit::ag::Shape;
using gridedit::ag::Var;

inline Buffer<double> randn(std::size_t n, std::mt19937_64& rng, double scale = 1.0) {
    std::normal_distribution<double> nd(0.0, scale);
    Buffer<double> v(n);
    for (auto& x : v) x = nd(rng);
    return v;
}

struct Result {
    double max_rel  = 0.0;
    std::size_t checked = 0;
};

// Compares d<probe, f(inputs)>/d input against fourth-order central differences, where
// probe is a fixed random tensor. Relative error |a-n| / max(|a|+|n|, floor).
inline Result check(const std::function<Var<double>(const std::vector<Var<double>>&)>& f,
                    std::vector<Var<double>> inputs, std::uint64_t seed = 7, double h = 1e-6,
                    double floor = 1e-7, std::size_t max_per_input = 64) {
    std::mt19937_64 rng(seed);
    Var<double> out = f(inputs);
    const Buffer<double> probe = randn(out.size(), rng);
    for (auto& in : inputs) in.zero_grad();
    gridedit::ag::backward(gridedit::ag::dot_const(f(inputs), probe));
    auto loss_at = [&] {
        gridedit::ag::NoGradGuard ng;
        const Var<double> y = f(inputs);
        double acc = 0;
        for (std::size_t i = 0; i < y.size(); ++i) acc += y.value()[i] * probe[i];
        return acc;
    };
    Result r;
    for (auto& in : inputs) {
        if (!in.requires_grad()) continue;
        const std::size_t n    = in.size();
        const std::size_t step = std::max<std::size_t>(1, n / max_per_input);
        for (std::size_t i = 0; i < n; i += step) {
            double& x       = in.mutable_value()[i];
            const double x0 = x;
            auto at         = [&](double dx) {
                x              = x0 + dx;
                const double l = loss_at();
                x              = x0;
                return l;
            };
            const double num = (8.0 * (at(h) - at(-h)) - (at(2 * h) - at(-2 * h))) / (12.0 * h);
            const double ana = in.grad()[i];
            const double rel = std::abs(ana - num) / std::max(std::abs(ana) + std::abs(num), floor);
            if (std::getenv("GRADCHECK_VERBOSE") && rel > 1e-5) std::fprintf(stderr, "idx %zu ana %.3e num %.3e rel %.3e\n", i, ana, num, rel);
            r.max_rel        = std::max(r.max_rel, rel);
            ++r.checked;
        }
    }
    return r;
}

inline Var<double> param(const Shape& s, std::mt19937_64& rng, double scale = 1.0) {
    return Var<double>::parameter(randn(gridedit::ag::numel(s), rng, scale), s);
}

}  // namespace gradcheck
