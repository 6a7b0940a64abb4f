#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "gridedit/config.hpp"
#include "gridedit/denoiser.hpp"
#include "gridedit/diffusion.hpp"
#include "gridedit/edit.hpp"
#include "gridedit/prompt.hpp"

namespace gridedit {

enum class ModelMode { diffusion, regression };

inline std::string to_string(ModelMode m) { return m == ModelMode::diffusion ? "diffusion" : "regression"; }

inline ModelMode model_mode_from_string(const std::string& s) {
    if (s == "diffusion") return ModelMode::diffusion;
    if (s == "regression") return ModelMode::regression;
    throw ConfigError("unknown model mode '" + s + "' (expected diffusion|regression)");
}

struct ModelConfig {
    PromptConfig prompt;
    DenoiserConfig unet   = DenoiserConfig::cpu();
    int timesteps         = 200;
    ScheduleKind schedule = ScheduleKind::cosine;
    ModelMode mode        = ModelMode::diffusion;

    static ModelConfig preset(const std::string& name) {
        ModelConfig c;
        if (name == "cpu") return c;
        if (name == "desk") {
            c.unet = DenoiserConfig{};
            return c;
        }
        if (name == "tiny") {
            c.prompt.width = 16, c.prompt.heads = 2, c.prompt.image_layers = 1, c.prompt.prompt_layers = 1;
            c.unet.base_channels = 8, c.unet.channel_mult = {1, 2}, c.unet.attention_levels = {1};
            c.unet.middle_blocks = 1, c.unet.context_dim = 16, c.unet.time_embed_dim = 16;
            c.unet.heads = 2, c.unet.groups = 2, c.unet.pos_dim = 8, c.unet.input_patch = 1;
            c.timesteps  = 20;
            return c;
        }
        throw ConfigError("unknown model preset '" + name + "' (expected cpu|desk|tiny)");
    }

    void validate() const {
        prompt.validate();
        unet.validate();
        if (unet.context_dim != prompt.width)
            throw ConfigError("unet.context_dim (" + std::to_string(unet.context_dim) + ") must equal prompt.width (" +
                              std::to_string(prompt.width) + ")");
        if (timesteps < 2) throw ConfigError("diffusion.timesteps must be >= 2");
    }

    KvMap to_kv() const {
        return {
            {"model.mode", to_string(mode)},
            {"diffusion.timesteps", std::to_string(timesteps)},
            {"diffusion.schedule", to_string(schedule)},
            {"prompt.panel_size", std::to_string(prompt.panel_size)},
            {"prompt.patch", std::to_string(prompt.patch)},
            {"prompt.width", std::to_string(prompt.width)},
            {"prompt.heads", std::to_string(prompt.heads)},
            {"prompt.image_layers", std::to_string(prompt.image_layers)},
            {"prompt.prompt_layers", std::to_string(prompt.prompt_layers)},
            {"prompt.mlp_ratio", std::to_string(prompt.mlp_ratio)},
            {"prompt.fourier_freqs", std::to_string(prompt.fourier_freqs)},
            {"unet.input_patch", std::to_string(unet.input_patch)},
            {"unet.base_channels", std::to_string(unet.base_channels)},
            {"unet.channel_mult", int_list(unet.channel_mult)},
            {"unet.attention_levels", int_list(unet.attention_levels)},
            {"unet.middle_blocks", std::to_string(unet.middle_blocks)},
            {"unet.cross_attention", unet.middle_cross_attention ? "true" : "false"},
            {"unet.context_dim", std::to_string(unet.context_dim)},
            {"unet.time_embed_dim", std::to_string(unet.time_embed_dim)},
            {"unet.heads", std::to_string(unet.heads)},
            {"unet.groups", std::to_string(unet.groups)},
            {"unet.pos_dim", std::to_string(unet.pos_dim)},
        };
    }

    // Returns false when `key` is not a model key.
    bool apply(const std::string& key, const std::string& v) {
        if (key == "model.mode") mode = model_mode_from_string(v);
        else if (key == "diffusion.timesteps") timesteps = kv_int(key, v);
        else if (key == "diffusion.schedule") schedule = schedule_kind_from_string(v);
        else if (key == "prompt.panel_size") prompt.panel_size = kv_int(key, v);
        else if (key == "prompt.patch") prompt.patch = kv_int(key, v);
        else if (key == "prompt.width") prompt.width = kv_int(key, v);
        else if (key == "prompt.heads") prompt.heads = kv_int(key, v);
        else if (key == "prompt.image_layers") prompt.image_layers = kv_int(key, v);
        else if (key == "prompt.prompt_layers") prompt.prompt_layers = kv_int(key, v);
        else if (key == "prompt.mlp_ratio") prompt.mlp_ratio = kv_int(key, v);
        else if (key == "prompt.fourier_freqs") prompt.fourier_freqs = kv_int(key, v);
        else if (key == "unet.input_patch") unet.input_patch = kv_int(key, v);
        else if (key == "unet.base_channels") unet.base_channels = kv_int(key, v);
        else if (key == "unet.channel_mult") unet.channel_mult = kv_int_list(key, v);
        else if (key == "unet.attention_levels") unet.attention_levels = kv_int_list(key, v);
        else if (key == "unet.middle_blocks") unet.middle_blocks = kv_int(key, v);
        else if (key == "unet.cross_attention") unet.middle_cross_attention = kv_bool(key, v);
        else if (key == "unet.context_dim") unet.context_dim = kv_int(key, v);
        else if (key == "unet.time_embed_dim") unet.time_embed_dim = kv_int(key, v);
        else if (key == "unet.heads") unet.heads = kv_int(key, v);
        else if (key == "unet.groups") unet.groups = kv_int(key, v);
        else if (key == "unet.pos_dim") unet.pos_dim = kv_int(key, v);
        else return false;
        return true;
    }

    static ModelConfig from_kv(const KvMap& kv) {
        ModelConfig c;
        for (const auto& [k, v] : kv)
            if (!c.apply(k, v)) throw ConfigError("unknown model key '" + k + "'");
        c.validate();
        return c;
    }

    std::uint64_t hash() const { return fnv1a(dump_kv(to_kv())); }
};

struct InferenceOptions {
    GuidanceParams guidance;
    SamplerOptions sampler;
    bool use_boxes = true;
};

// Prompt encoder, denoiser and noise schedule under one parameter store.
template <class S>
class GridModel {
public:
    GridModel(const ModelConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
        cfg_.validate();
        Rng rng  = make_rng(seed, Stream::init);
        prompt_  = PromptEncoder<S>(params_, cfg_.prompt, rng);
        unet_    = Denoiser<S>(params_, cfg_.unet, rng);
        schedule_ = make_schedule(cfg_.timesteps, cfg_.schedule);
    }

    GridModel(const GridModel&)            = delete;
    GridModel& operator=(const GridModel&) = delete;
    GridModel(GridModel&&)                 = default;
    GridModel& operator=(GridModel&&)      = default;

    const ModelConfig& config() const { return cfg_; }
    nn::ParamStore<S>& params() { return params_; }
    const nn::ParamStore<S>& params() const { return params_; }
    const PromptEncoder<S>& prompt_encoder() const { return prompt_; }
    const Denoiser<S>& denoiser() const { return unet_; }
    const NoiseSchedule& schedule() const { return schedule_; }

    // Whether the denoiser reads a prompt context at all.
    bool uses_context() const { return cfg_.unet.middle_cross_attention; }

    PromptContext<S> encode(const VisualPrompt& prompt, const std::vector<bool>& drop_boxes = {}) const {
        return prompt_.fuse_context(prompt, drop_boxes);
    }

    ag::Var<S> predict(const ag::Var<S>& x, double t, const PromptContext<S>* ctx) const {
        return unet_.denoise_step(x, t, ctx);
    }

    // Generates the target panel for `req`.
    Image edit(const EditRequest& req, const InferenceOptions& opts) const {
        req.validate();
        ag::NoGradGuard no_grad;
        const int n      = req.n_examples();
        const Image grid = req.grid();
        std::optional<PromptContext<S>> ctx;
        if (uses_context()) {
            VisualPrompt p = req.prompt();
            if (!opts.use_boxes) p.boxes.clear();
            ctx = encode(p);
        }
        const ag::Shape shape{grid.channels, grid.height, grid.width};
        if (cfg_.mode == ModelMode::regression) {
            auto x   = ag::Var<S>::constant(to_model_space<S>(grid), shape);
            auto out = predict(x, 0.0, ctx ? &*ctx : nullptr);
            return extract_target(from_model_space<S>(out.value(), grid.height, grid.width, grid.channels), n);
        }
        const NoisePredictor fn = [&](const std::vector<float>& xs, int t, bool conditional) {
            auto x   = ag::Var<S>::constant(std::vector<S>(xs.begin(), xs.end()), shape);
            auto out = predict(x, double(t), conditional && ctx ? &*ctx : nullptr);
            return std::vector<float>(out.value().begin(), out.value().end());
        };
        SamplerOptions so = opts.sampler;
        so.seed           = req.seed;
        return sample_inpaint(grid, n, fn, schedule_, opts.guidance, so, ctx.has_value()).target;
    }

    EditModel as_edit_model(const InferenceOptions& opts) const {
        return [this, opts](const EditRequest& r) { return edit(r, opts); };
    }

private:
    ModelConfig cfg_;
    nn::ParamStore<S> params_;
    PromptEncoder<S> prompt_;
    Denoiser<S> unet_;
    NoiseSchedule schedule_;
};

}  // namespace gridedit
