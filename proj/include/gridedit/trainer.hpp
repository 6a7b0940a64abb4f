#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "gridedit/config.hpp"
#include "gridedit/core/optim.hpp"
#include "gridedit/dataset.hpp"
#include "gridedit/model.hpp"

namespace gridedit {

struct Ablation {
    bool no_cross_attention  = false;
    bool no_interest_region  = false;
    bool regression_baseline = false;
    bool masked_panel_loss   = false;

    std::string to_string() const {
        std::string out;
        auto add = [&](bool on, const char* name) {
            if (on) out += (out.empty() ? "" : ",") + std::string(name);
        };
        add(no_cross_attention, "no_cross_attention");
        add(no_interest_region, "no_interest_region");
        add(regression_baseline, "regression_baseline");
        add(masked_panel_loss, "masked_panel_loss");
        return out.empty() ? "none" : out;
    }

    static Ablation parse(const std::string& text) {
        Ablation a;
        std::stringstream ss(text);
        std::string item;
        while (std::getline(ss, item, ',')) {
            item = detail::trim(item);
            if (item.empty() || item == "none" || item == "full") continue;
            if (item == "no_cross_attention") a.no_cross_attention = true;
            else if (item == "no_interest_region") a.no_interest_region = true;
            else if (item == "regression_baseline") a.regression_baseline = true;
            else if (item == "masked_panel_loss") a.masked_panel_loss = true;
            else throw ConfigError("unknown ablation flag '" + item + "'");
        }
        return a;
    }
};

struct TrainConfig {
    int steps                  = 10000;
    int batch_size             = 32;
    double learning_rate       = 1e-4;
    double weight_decay        = 0.0;
    double grad_clip           = 1.0;
    int warmup_steps           = 100;
    double guidance_scale_eval = 7.5;
    double cond_dropout        = 0.05;
    double box_dropout         = 0.3;
    double ema_decay           = 0.999;
    std::uint64_t seed         = 0;
    Ablation ablation;
    std::string task_mix = "all";  // procedural training data
    int n_examples       = 1;
    int log_every        = 10;

    void validate() const {
        if (steps < 0) throw ConfigError("steps must be >= 0");
        if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
        if (!(learning_rate > 0.0)) throw ConfigError("learning_rate must be positive");
        if (weight_decay < 0.0 || grad_clip < 0.0 || warmup_steps < 0) throw ConfigError("negative optimizer setting");
        if (!(cond_dropout >= 0.0 && cond_dropout <= 1.0)) throw ConfigError("cond_dropout must be in [0,1]");
        if (!(box_dropout >= 0.0 && box_dropout <= 1.0)) throw ConfigError("box_dropout must be in [0,1]");
        if (!(ema_decay >= 0.0 && ema_decay < 1.0)) throw ConfigError("ema_decay must be in [0,1)");
        if (guidance_scale_eval < 0.0) throw ConfigError("guidance_scale_eval must be >= 0");
        if (ablation.regression_baseline && ablation.masked_panel_loss)
            throw ConfigError("regression_baseline already trains on the hidden panel only; drop masked_panel_loss");
        if (log_every < 1) throw ConfigError("log_every must be >= 1");
        validate_example_count(n_examples);
        TaskMix::parse(task_mix);
    }

    // Model configuration with the ablation applied.
    ModelConfig model_config(ModelConfig base) const {
        if (ablation.no_cross_attention) base.unet.middle_cross_attention = false;
        if (ablation.regression_baseline) base.mode = ModelMode::regression;
        base.validate();
        return base;
    }

    KvMap to_kv() const {
        return {
            {"train.steps", std::to_string(steps)},
            {"train.batch_size", std::to_string(batch_size)},
            {"train.learning_rate", fmt_double(learning_rate)},
            {"train.weight_decay", fmt_double(weight_decay)},
            {"train.grad_clip", fmt_double(grad_clip)},
            {"train.warmup_steps", std::to_string(warmup_steps)},
            {"train.guidance_scale_eval", fmt_double(guidance_scale_eval)},
            {"train.cond_dropout", fmt_double(cond_dropout)},
            {"train.box_dropout", fmt_double(box_dropout)},
            {"train.ema_decay", fmt_double(ema_decay)},
            {"train.seed", std::to_string(seed)},
            {"train.ablation", ablation.to_string()},
            {"train.task_mix", task_mix},
            {"train.n_examples", std::to_string(n_examples)},
            {"train.log_every", std::to_string(log_every)},
        };
    }

    bool apply(const std::string& key, const std::string& v) {
        if (key == "train.steps") steps = kv_int(key, v);
        else if (key == "train.batch_size") batch_size = kv_int(key, v);
        else if (key == "train.learning_rate") learning_rate = kv_double(key, v);
        else if (key == "train.weight_decay") weight_decay = kv_double(key, v);
        else if (key == "train.grad_clip") grad_clip = kv_double(key, v);
        else if (key == "train.warmup_steps") warmup_steps = kv_int(key, v);
        else if (key == "train.guidance_scale_eval") guidance_scale_eval = kv_double(key, v);
        else if (key == "train.cond_dropout") cond_dropout = kv_double(key, v);
        else if (key == "train.box_dropout") box_dropout = kv_double(key, v);
        else if (key == "train.ema_decay") ema_decay = kv_double(key, v);
        else if (key == "train.seed") seed = kv_u64(key, v);
        else if (key == "train.ablation") ablation = Ablation::parse(v);
        else if (key == "train.task_mix") task_mix = v;
        else if (key == "train.n_examples") n_examples = kv_int(key, v);
        else if (key == "train.log_every") log_every = kv_int(key, v);
        else return false;
        return true;
    }
};

struct StepStats {
    long step        = 0;
    double loss      = 0.0;
    double lr        = 0.0;
    double grad_norm = 0.0;
    int cond_drops = 0, cond_draws = 0, box_drops = 0, box_draws = 0;
};

// Batch `step` of size `batch`; must be a pure function of its arguments.
using BatchSource = std::function<std::vector<Sample>(long step, int batch)>;

inline BatchSource procedural_batches(std::uint64_t root, const TaskMix& mix, int n_examples,
                                      int panel = kDefaultPanelSize) {
    return [=](long step, int batch) {
        std::vector<Sample> out;
        for (int j = 0; j < batch; ++j)
            out.push_back(procedural_sample(root, std::uint64_t(step) * std::uint64_t(batch) + std::uint64_t(j), mix,
                                            n_examples, panel));
        return out;
    };
}

// Samples drawn with replacement from a fixed pool, indexed by a hash of (seed, step, slot).
inline BatchSource pool_batches(std::shared_ptr<const std::vector<Sample>> pool, std::uint64_t seed) {
    if (!pool || pool->empty()) throw ValidationError("training pool is empty");
    return [pool, seed](long step, int batch) {
        std::vector<Sample> out;
        for (int j = 0; j < batch; ++j) {
            const std::uint64_t h = splitmix64(splitmix64(seed ^ std::uint64_t(step)) + std::uint64_t(j));
            out.push_back((*pool)[h % pool->size()]);
        }
        return out;
    };
}

// Root seeds for the training and held-out procedural streams.
inline std::uint64_t train_data_root(std::uint64_t seed) { return splitmix64(seed ^ 0x7a11ULL); }
inline std::uint64_t heldout_data_root(std::uint64_t seed) { return splitmix64(seed ^ 0xe7a1ULL); }

class Trainer {
public:
    Trainer(const ModelConfig& base, const TrainConfig& cfg)
        : cfg_(cfg), model_((cfg.validate(), cfg.model_config(base)), cfg.seed) {
        opt_        = optim::AdamW<float>(model_.params(), {cfg_.learning_rate, 0.9, 0.999, 1e-8, cfg_.weight_decay});
        ema_        = optim::Ema<float>(model_.params(), cfg_.ema_decay);
        noise_rng_  = make_rng(cfg_.seed, Stream::noise);
        dropout_rng_ = make_rng(cfg_.seed, Stream::dropout);
    }

    const TrainConfig& config() const { return cfg_; }
    GridModel<float>& model() { return model_; }
    const GridModel<float>& model() const { return model_; }
    optim::AdamW<float>& optimizer() { return opt_; }
    optim::Ema<float>& ema() { return ema_; }
    long step() const { return step_; }
    void set_step(long s) { step_ = s; }
    void set_step_budget(long steps) {
        if (steps < 1) throw ConfigError("train.steps must be positive");
        cfg_.steps = static_cast<int>(steps);
    }
    void set_log_every(int n) {
        if (n < 1) throw ConfigError("train.log_every must be positive");
        cfg_.log_every = n;
    }
    Rng& noise_rng() { return noise_rng_; }
    Rng& dropout_rng() { return dropout_rng_; }

    double learning_rate_at(long step) const {
        if (cfg_.warmup_steps > 0 && step < cfg_.warmup_steps)
            return cfg_.learning_rate * double(step + 1) / double(cfg_.warmup_steps);
        return cfg_.learning_rate;
    }

    // One denoising-objective update over `batch`.
    StepStats train_step(const std::vector<Sample>& batch) {
        if (cfg_.ablation.regression_baseline)
            throw ConfigError("train_step: model is configured as the regression baseline");
        return update(batch, [&](const Sample& s, StepStats& st) { return diffusion_loss(s, st); });
    }

    // One-shot regression of the hidden panel from the masked grid.
    StepStats regress_baseline_step(const std::vector<Sample>& batch) {
        if (!cfg_.ablation.regression_baseline)
            throw ConfigError("regress_baseline_step requires the regression_baseline ablation flag");
        return update(batch, [&](const Sample& s, StepStats& st) { return regression_loss(s, st); });
    }

    StepStats step_once(const BatchSource& source) {
        const auto batch = source(step_, cfg_.batch_size);
        return cfg_.ablation.regression_baseline ? regress_baseline_step(batch) : train_step(batch);
    }

    // Runs until `until` steps have been taken, reporting every step.
    void run(const BatchSource& source, long until, const std::function<void(const StepStats&)>& on_step = {}) {
        while (step_ < until) {
            const StepStats st = step_once(source);
            if (on_step) on_step(st);
        }
    }

    // Fresh model holding the EMA weights.
    std::unique_ptr<GridModel<float>> ema_model() const {
        auto m = std::make_unique<GridModel<float>>(model_.config(), cfg_.seed);
        ema_.copy_to(m->params());
        return m;
    }

    InferenceOptions inference_options(int sampler_steps = 25) const {
        InferenceOptions o;
        o.guidance.scale  = cfg_.guidance_scale_eval;
        o.sampler.steps   = std::min(sampler_steps, model_.config().timesteps);
        o.use_boxes       = !cfg_.ablation.no_interest_region;
        return o;
    }

    // Box drop flags for one sample; every box is dropped when interest regions are ablated.
    std::vector<bool> draw_box_drops(int n_examples, StepStats& st) {
        const int n_boxes = 2 * n_examples;
        if (cfg_.ablation.no_interest_region) return std::vector<bool>(static_cast<std::size_t>(n_boxes), true);
        auto drops = sample_box_drops(n_boxes, cfg_.box_dropout, dropout_rng_);
        st.box_draws += n_boxes;
        for (bool d : drops) st.box_drops += d;
        return drops;
    }

private:
    using LossFn = std::function<ag::Var<float>(const Sample&, StepStats&)>;

    StepStats update(const std::vector<Sample>& batch, const LossFn& loss_of) {
        if (batch.empty()) throw ValidationError("empty training batch");
        StepStats st;
        st.step = step_;
        st.lr   = learning_rate_at(step_);
        model_.params().zero_grad();
        const float inv_b = 1.0f / float(batch.size());
        double total      = 0.0;
        for (const auto& s : batch) {
            auto loss = loss_of(s, st);
            total += double(loss.item());
            ag::backward(ag::scale(loss, inv_b));
        }
        st.loss      = total / double(batch.size());
        st.grad_norm = optim::clip_grad_norm(model_.params(), cfg_.grad_clip);
        if (!std::isfinite(st.loss) || !std::isfinite(st.grad_norm)) {
            throw NumericalError("non-finite training state at step " + std::to_string(step_) +
                                 ": loss=" + fmt_double(st.loss) + " grad_norm=" + fmt_double(st.grad_norm) +
                                 " lr=" + fmt_double(st.lr) + " batch_ids=" + batch_ids(batch));
        }
        opt_.step(model_.params(), st.lr);
        ema_.update(model_.params());
        ++step_;
        return st;
    }

    static std::string batch_ids(const std::vector<Sample>& batch) {
        std::string out;
        for (const auto& s : batch) out += (out.empty() ? "" : ",") + std::to_string(s.id);
        return out;
    }

    ag::Var<float> diffusion_loss(const Sample& s, StepStats& st) {
        const Image grid = s.grid();
        const auto x0    = to_model_space<float>(grid);
        const int t      = uniform_int(noise_rng_, 1, model_.schedule().steps());
        std::vector<float> eps(x0.size());
        fill_normal(noise_rng_, eps);
        const auto xt = forward_diffuse(x0, t, eps, model_.schedule());

        std::optional<PromptContext<float>> ctx;
        if (model_.uses_context()) {
            const auto drops   = draw_box_drops(s.n_examples, st);
            const bool dropped = bernoulli(dropout_rng_, cfg_.cond_dropout);
            st.cond_draws += 1;
            st.cond_drops += dropped;
            if (!dropped) ctx = model_.encode(s.prompt(), drops);
        }
        const ag::Shape shape{grid.channels, grid.height, grid.width};
        auto pred = model_.predict(ag::Var<float>::constant(xt, shape), double(t), ctx ? &*ctx : nullptr);
        std::vector<float> weight;
        if (cfg_.ablation.masked_panel_loss) weight = target_mask_chw(grid.height, grid.width, grid.channels, s.n_examples);
        return ag::mse(pred, ag::Var<float>::constant(eps, shape), weight);
    }

    ag::Var<float> regression_loss(const Sample& s, StepStats& st) {
        const Image grid   = s.grid();
        const auto masked  = mask_target(grid, s.n_examples);
        std::optional<PromptContext<float>> ctx;
        if (model_.uses_context()) ctx = model_.encode(s.prompt(), draw_box_drops(s.n_examples, st));
        const ag::Shape shape{grid.channels, grid.height, grid.width};
        auto pred = model_.predict(ag::Var<float>::constant(to_model_space<float>(masked.grid), shape), 0.0,
                                   ctx ? &*ctx : nullptr);
        const auto weight = target_mask_chw(grid.height, grid.width, grid.channels, s.n_examples);
        // ((p+1)/2 - y)^2 = (p - (2y-1))^2 / 4: the [0,1]-space error of the hidden panel.
        return ag::scale(ag::mse(pred, ag::Var<float>::constant(to_model_space<float>(grid), shape), weight), 0.25f);
    }

    TrainConfig cfg_;
    GridModel<float> model_;
    optim::AdamW<float> opt_;
    optim::Ema<float> ema_;
    Rng noise_rng_, dropout_rng_;
    long step_ = 0;
};

}  // namespace gridedit
