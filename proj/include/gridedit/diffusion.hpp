#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "gridedit/core/error.hpp"
#include "gridedit/core/image.hpp"
#include "gridedit/core/rng.hpp"
#include "gridedit/gridspace.hpp"

namespace gridedit {

enum class ScheduleKind { cosine, linear };

inline ScheduleKind schedule_kind_from_string(const std::string& s) {
    if (s == "cosine") return ScheduleKind::cosine;
    if (s == "linear") return ScheduleKind::linear;
    throw ConfigError("unknown noise schedule '" + s + "' (expected cosine|linear)");
}

inline std::string to_string(ScheduleKind k) { return k == ScheduleKind::cosine ? "cosine" : "linear"; }

// Cumulative signal levels: alpha(t) multiplies x0 in the forward process,
// alpha(0) = 1 and alpha(1) >= ... >= alpha(T) > 0.
class NoiseSchedule {
public:
    NoiseSchedule() = default;
    NoiseSchedule(ScheduleKind kind, std::vector<double> alpha_bar) : kind_(kind), alpha_(std::move(alpha_bar)) {}

    int steps() const { return static_cast<int>(alpha_.size()); }
    ScheduleKind kind() const { return kind_; }

    double alpha(int t) const {
        if (t == 0) return 1.0;
        if (t < 0 || t > steps()) throw ConfigError("timestep " + std::to_string(t) + " outside [0, T]");
        return alpha_[static_cast<std::size_t>(t - 1)];
    }
    double sqrt_alpha(int t) const { return std::sqrt(alpha(t)); }
    double sqrt_one_minus_alpha(int t) const { return std::sqrt(1.0 - alpha(t)); }
    const std::vector<double>& alphas() const { return alpha_; }

private:
    ScheduleKind kind_ = ScheduleKind::cosine;
    std::vector<double> alpha_;
};

inline NoiseSchedule make_schedule(int steps, ScheduleKind kind) {
    if (steps < 2) throw ConfigError("noise schedule needs T >= 2, got " + std::to_string(steps));
    constexpr double kMaxBeta = 0.999;
    std::vector<double> betas(static_cast<std::size_t>(steps));
    switch (kind) {
        case ScheduleKind::cosine: {
            constexpr double s = 0.008;
            auto f             = [&](double t) {
                const double c = std::cos((t / steps + s) / (1.0 + s) * M_PI / 2.0);
                return c * c;
            };
            for (int t = 1; t <= steps; ++t) betas[t - 1] = std::min(1.0 - f(t) / f(t - 1), kMaxBeta);
            break;
        }
        case ScheduleKind::linear: {
            // Endpoints scaled so the total noise matches the classic 1000-step range.
            const double scale = 1000.0 / steps;
            const double lo = 1e-4 * scale, hi = 0.02 * scale;
            for (int t = 1; t <= steps; ++t) {
                const double frac = steps == 1 ? 0.0 : double(t - 1) / double(steps - 1);
                betas[t - 1]      = std::min(lo + (hi - lo) * frac, kMaxBeta);
            }
            break;
        }
        default:
            throw ConfigError("unknown noise schedule kind");
    }
    std::vector<double> alpha(betas.size());
    double acc = 1.0;
    for (std::size_t i = 0; i < betas.size(); ++i) alpha[i] = acc *= (1.0 - betas[i]);
    return NoiseSchedule(kind, std::move(alpha));
}

// x_t = sqrt(alpha_t) x0 + sqrt(1 - alpha_t) eps
template <class T>
std::vector<T> forward_diffuse(std::span<const T> x0, int t, std::span<const T> eps, const NoiseSchedule& schedule) {
    if (x0.size() != eps.size()) {
        throw ShapeError("forward_diffuse: x0 has " + std::to_string(x0.size()) + " elements, eps " +
                         std::to_string(eps.size()));
    }
    if (t < 1 || t > schedule.steps()) throw ConfigError("forward_diffuse: t outside [1, T]");
    const T a = static_cast<T>(schedule.sqrt_alpha(t)), b = static_cast<T>(schedule.sqrt_one_minus_alpha(t));
    std::vector<T> out(x0.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a * x0[i] + b * eps[i];
    return out;
}

template <class T>
std::vector<T> forward_diffuse(const std::vector<T>& x0, int t, const std::vector<T>& eps,
                               const NoiseSchedule& schedule) {
    return forward_diffuse(std::span<const T>(x0), t, std::span<const T>(eps), schedule);
}

template <class T>
double simple_loss(std::span<const T> pred, std::span<const T> truth) {
    if (pred.size() != truth.size()) throw ShapeError("simple_loss: shape mismatch");
    if (pred.empty()) return 0.0;
    double acc = 0.0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        const double d = double(pred[i]) - double(truth[i]);
        acc += d * d;
    }
    return acc / double(pred.size());
}

template <class T>
double simple_loss(const std::vector<T>& pred, const std::vector<T>& truth) {
    return simple_loss(std::span<const T>(pred), std::span<const T>(truth));
}

struct GuidanceParams {
    double scale = 7.5;
};

// eps_uncond + w (eps_cond - eps_uncond), evaluated as (1-w) u + w c so that
// w = 0 and w = 1 reproduce the branches exactly.
template <class T>
std::vector<T> cfg_combine(const std::vector<T>& eps_uncond, const std::vector<T>& eps_cond, double w) {
    if (eps_uncond.size() != eps_cond.size()) throw ShapeError("cfg_combine: shape mismatch");
    const T a = static_cast<T>(1.0 - w), b = static_cast<T>(w);
    std::vector<T> out(eps_uncond.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a * eps_uncond[i] + b * eps_cond[i];
    return out;
}

// ---------------------------------------------------------------------------
// Model space: channel-major [C,H,W] arrays in [-1,1].

template <class T = float>
std::vector<T> to_model_space(const Image& img) {
    std::vector<T> out(img.size());
    const std::size_t hw = static_cast<std::size_t>(img.height) * img.width;
    for (std::size_t p = 0; p < hw; ++p)
        for (int c = 0; c < img.channels; ++c)
            out[c * hw + p] = static_cast<T>(img.pixels[p * img.channels + c]) * T(2) - T(1);
    return out;
}

template <class T = float>
Image from_model_space(std::span<const T> x, int h, int w, int channels = 3) {
    Image img(h, w, channels);
    const std::size_t hw = static_cast<std::size_t>(h) * w;
    if (x.size() != hw * channels) throw ShapeError("from_model_space: size mismatch");
    for (std::size_t p = 0; p < hw; ++p)
        for (int c = 0; c < channels; ++c) {
            const double v                 = std::clamp(double(x[c * hw + p]), -1.0, 1.0);
            img.pixels[p * channels + c] = static_cast<float>((v + 1.0) * 0.5);
        }
    return img;
}

template <class T = float>
Image from_model_space(const std::vector<T>& x, int h, int w, int channels = 3) {
    return from_model_space(std::span<const T>(x), h, w, channels);
}

// Channel-major version of target_mask.
inline std::vector<float> target_mask_chw(int grid_h, int grid_w, int channels, int n_examples) {
    const int rows = grid_rows(n_examples);
    const int ph = grid_h / rows, pw = grid_w / 2;
    std::vector<float> m(static_cast<std::size_t>(channels) * grid_h * grid_w, 0.0f);
    for (int c = 0; c < channels; ++c)
        for (int y = grid_h - ph; y < grid_h; ++y)
            for (int x = pw; x < grid_w; ++x) m[(static_cast<std::size_t>(c) * grid_h + y) * grid_w + x] = 1.0f;
    return m;
}

// ---------------------------------------------------------------------------
// Inpainting sampler

enum class SamplerKind { ancestral, deterministic };

inline SamplerKind sampler_kind_from_string(const std::string& s) {
    if (s == "ancestral") return SamplerKind::ancestral;
    if (s == "deterministic" || s == "ddim") return SamplerKind::deterministic;
    throw ConfigError("unknown sampler '" + s + "' (expected ancestral|deterministic)");
}

inline std::string to_string(SamplerKind k) { return k == SamplerKind::ancestral ? "ancestral" : "deterministic"; }

struct SamplerOptions {
    SamplerKind kind   = SamplerKind::deterministic;
    int steps          = 25;
    std::uint64_t seed = 0;
    bool clip_x0       = true;
};

// Predicts the noise in a model-space grid at step t, using the prompt context
// when `conditional` is true and the null context otherwise.
using NoisePredictor = std::function<std::vector<float>(const std::vector<float>& x, int t, bool conditional)>;

// Called after every reverse step with the new level, the working grid and the
// fresh noise used to re-impose the known panels at that level.
using SamplerObserver =
    std::function<void(int t_next, const std::vector<float>& x, const std::vector<float>& known_noise)>;

struct SampleResult {
    Image target;                      // decoded bottom-right panel, [0,1]
    Image grid;                        // full decoded grid
    std::vector<float> initial_noise;  // model-space noise that seeded x_T
};

// Evenly strided descending timesteps T = t_0 > t_1 > ... > t_{S-1} >= 1.
inline std::vector<int> sampler_timesteps(int total, int steps) {
    if (steps < 1 || steps > total) {
        throw ConfigError("sampler steps must be in [1, T=" + std::to_string(total) + "], got " +
                          std::to_string(steps));
    }
    std::vector<int> ts;
    for (int i = 0; i < steps; ++i) ts.push_back(total - static_cast<int>((static_cast<long long>(i) * total) / steps));
    return ts;
}

// Reverse process over the whole grid. After every step the known panels are
// replaced by a fresh forward-diffused copy at the new noise level; the target
// panel evolves freely.
inline SampleResult sample_inpaint(const Image& known_grid, int n_examples, const NoisePredictor& predict,
                                   const NoiseSchedule& schedule, GuidanceParams guidance,
                                   const SamplerOptions& opts, bool has_condition,
                                   const SamplerObserver& observer = {}) {
    if (guidance.scale < 0.0) throw ConfigError("guidance scale must be >= 0");
    const auto ts  = sampler_timesteps(schedule.steps(), opts.steps);
    const int h = known_grid.height, w = known_grid.width, c = known_grid.channels;
    panel_size(known_grid, n_examples);
    const auto known = to_model_space<float>(known_grid);
    const auto mask  = target_mask_chw(h, w, c, n_examples);
    const std::size_t n = known.size();

    Rng rng = make_rng(opts.seed, Stream::sampler);
    SampleResult result;
    result.initial_noise.resize(n);
    fill_normal(rng, result.initial_noise);

    std::vector<float> x = forward_diffuse(known, ts.front(), result.initial_noise, schedule);
    for (std::size_t i = 0; i < n; ++i)
        if (mask[i] != 0.0f) x[i] = result.initial_noise[i];

    const bool use_cond = has_condition && guidance.scale != 0.0;
    std::vector<float> noise(n), known_noise(n);
    for (std::size_t k = 0; k < ts.size(); ++k) {
        const int t     = ts[k];
        const int t_next = k + 1 < ts.size() ? ts[k + 1] : 0;

        std::vector<float> eps;
        if (use_cond) {
            auto eps_u = predict(x, t, false);
            auto eps_c = predict(x, t, true);
            eps        = cfg_combine(eps_u, eps_c, guidance.scale);
        } else {
            eps = predict(x, t, false);
        }
        if (eps.size() != n) throw ShapeError("denoiser returned " + std::to_string(eps.size()) + " values");

        const double a_t = schedule.alpha(t), a_n = schedule.alpha(t_next);
        const double sa_t = std::sqrt(a_t), s1_t = std::sqrt(1.0 - a_t);
        const double sa_n = std::sqrt(a_n), s1_n = std::sqrt(1.0 - a_n);
        std::vector<float> next(n);
        if (opts.kind == SamplerKind::deterministic) {
            for (std::size_t i = 0; i < n; ++i) {
                double x0 = (double(x[i]) - s1_t * double(eps[i])) / sa_t;
                if (opts.clip_x0) x0 = std::clamp(x0, -1.0, 1.0);
                next[i] = static_cast<float>(sa_n * x0 + s1_n * double(eps[i]));
            }
        } else {
            const double beta = 1.0 - a_t / a_n;
            const double c0   = sa_n * beta / (1.0 - a_t);
            const double ct   = std::sqrt(a_t / a_n) * (1.0 - a_n) / (1.0 - a_t);
            const double sig  = t_next > 0 ? std::sqrt(beta * (1.0 - a_n) / (1.0 - a_t)) : 0.0;
            if (t_next > 0) fill_normal(rng, noise);
            for (std::size_t i = 0; i < n; ++i) {
                double x0 = (double(x[i]) - s1_t * double(eps[i])) / sa_t;
                if (opts.clip_x0) x0 = std::clamp(x0, -1.0, 1.0);
                const double mean = c0 * x0 + ct * double(x[i]);
                next[i]           = static_cast<float>(t_next > 0 ? mean + sig * double(noise[i]) : mean);
            }
        }

        if (t_next > 0) {
            fill_normal(rng, known_noise);
            const auto diffused = forward_diffuse(known, t_next, known_noise, schedule);
            for (std::size_t i = 0; i < n; ++i)
                if (mask[i] == 0.0f) next[i] = diffused[i];
        } else {
            std::fill(known_noise.begin(), known_noise.end(), 0.0f);
            for (std::size_t i = 0; i < n; ++i)
                if (mask[i] == 0.0f) next[i] = known[i];
        }
        x = std::move(next);
        if (observer) observer(t_next, x, known_noise);
    }
    result.grid   = from_model_space(x, h, w, c);
    result.target = extract_target(result.grid, n_examples);
    return result;
}

}  // namespace gridedit
