#pragma once

#include <algorithm>
#include <optional>
#include <string>
#include <vector>

#include "gridedit/core/autograd.hpp"
#include "gridedit/core/nn.hpp"
#include "gridedit/prompt.hpp"

namespace gridedit {

struct DenoiserConfig {
    int in_channels                 = 3;
    int input_patch                 = 1;   // space-to-depth factor applied before the stem
    int base_channels               = 64;
    std::vector<int> channel_mult   = {1, 2, 2};
    std::vector<int> attention_levels = {1, 2};
    int middle_blocks               = 2;
    bool middle_cross_attention     = true;
    int context_dim                 = 64;
    int time_embed_dim              = 128;
    int heads                       = 4;
    int groups                      = 8;
    int pos_dim                     = 16;

    // Cheaper layout for single-core CPU runs: 2x2 space-to-depth input, 32 base channels.
    static DenoiserConfig cpu() {
        DenoiserConfig c;
        c.input_patch   = 2;
        c.base_channels = 32;
        return c;
    }

    int levels() const { return static_cast<int>(channel_mult.size()); }
    int channels(int level) const { return base_channels * channel_mult[static_cast<std::size_t>(level)]; }
    bool attends(int level) const {
        return std::find(attention_levels.begin(), attention_levels.end(), level) != attention_levels.end();
    }

    void validate() const {
        if (input_patch < 1) throw ConfigError("denoiser: input_patch must be >= 1");
        if (base_channels <= 0 || channel_mult.empty()) throw ConfigError("denoiser: empty channel configuration");
        for (int m : channel_mult)
            if (m <= 0) throw ConfigError("denoiser: channel multipliers must be positive");
        for (int l : attention_levels)
            if (l < 0 || l >= levels()) throw ConfigError("denoiser: attention level out of range");
        if (middle_cross_attention && middle_blocks < 1)
            throw ConfigError("denoiser: cross-attention needs at least one middle block");
        if (middle_blocks < 0 || context_dim <= 0 || time_embed_dim <= 0 || heads <= 0 || pos_dim % 4 != 0)
            throw ConfigError("denoiser: invalid block settings");
        for (int l = 0; l < levels(); ++l)
            if (channels(l) % heads != 0) throw ConfigError("denoiser: channels must be divisible by heads");
        if (context_dim % heads != 0) throw ConfigError("denoiser: context_dim must be divisible by heads");
    }
};

// Branch outputs of one block, recorded on request.
template <class S>
struct BlockTrace {
    ag::Var<S> input, conv, self_attn, cross_attn, output;
};

// One U-Net block. Every block applies the residual convolution stage; blocks
// flagged for attention add residual self-attention, and middle blocks with
// injection enabled add residual cross-attention over the prompt context.
template <class S>
class UNetBlock {
public:
    UNetBlock() = default;
    UNetBlock(nn::ParamStore<S>& ps, const std::string& name, int cin, int cout, const DenoiserConfig& cfg,
              bool self_attn, bool cross_attn, Rng& rng)
        : cout_(cout), heads_(cfg.heads), self_attn_(self_attn), cross_attn_(cross_attn) {
        norm1_     = nn::GroupNorm<S>(ps, name + ".norm1", cin, cfg.groups);
        conv1_     = nn::Conv2d<S>(ps, name + ".conv1", cin, cout, 3, 1, rng);
        temb_proj_ = nn::Linear<S>(ps, name + ".temb", cfg.time_embed_dim, cout, rng);
        norm2_     = nn::GroupNorm<S>(ps, name + ".norm2", cout, cfg.groups);
        conv2_     = nn::Conv2d<S>(ps, name + ".conv2", cout, cout, 3, 1, rng);
        if (cin != cout) skip_ = nn::Conv2d<S>(ps, name + ".skip", cin, cout, 1, 1, rng);
        if (self_attn_) {
            sa_norm_ = nn::GroupNorm<S>(ps, name + ".sa.norm", cout, cfg.groups);
            sa_pe_   = nn::Linear<S>(ps, name + ".sa.pe", cfg.pos_dim, cout, rng, false, false);
            sa_q_    = nn::Linear<S>(ps, name + ".sa.q", cout, cout, rng);
            sa_k_    = nn::Linear<S>(ps, name + ".sa.k", cout, cout, rng);
            sa_v_    = nn::Linear<S>(ps, name + ".sa.v", cout, cout, rng);
            sa_out_  = nn::Linear<S>(ps, name + ".sa.out", cout, cout, rng);
            pos_dim_ = cfg.pos_dim;
        }
        if (cross_attn_) {
            ca_norm_ = nn::GroupNorm<S>(ps, name + ".ca.norm", cout, cfg.groups);
            ca_q_    = nn::Linear<S>(ps, name + ".ca.q", cout, cfg.context_dim, rng);
            ca_k_    = nn::Linear<S>(ps, name + ".ca.k", cfg.context_dim, cfg.context_dim, rng);
            ca_v_    = nn::Linear<S>(ps, name + ".ca.v", cfg.context_dim, cfg.context_dim, rng);
            ca_out_  = nn::Linear<S>(ps, name + ".ca.out", cfg.context_dim, cout, rng, /*zero_init=*/true);
        }
    }

    bool has_self_attention() const { return self_attn_; }
    bool has_cross_attention() const { return cross_attn_; }

    // phi: [C,H,W]; temb: [1, time_embed_dim] (already activated); context: [L, context_dim].
    ag::Var<S> forward(const ag::Var<S>& phi, const ag::Var<S>& temb, const ag::Var<S>* context,
                       BlockTrace<S>* trace = nullptr) const {
        using namespace ag;
        const int h = phi.dim(1), w = phi.dim(2);
        auto r    = conv1_(silu(norm1_(phi)));
        r         = add_channel(r, temb_proj_(temb));
        r         = conv2_(silu(norm2_(r)));
        auto base = skip_.weight.defined() ? skip_(phi) : phi;
        auto x    = add(base, r);
        if (trace) {
            trace->input = phi;
            trace->conv  = r;
        }
        if (self_attn_) {
            auto tokens = to_tokens(sa_norm_(x));
            auto pe     = Var<S>::constant(nn::positional_grid<S>(h, w, pos_dim_), {h * w, pos_dim_});
            auto qk_in  = add(tokens, sa_pe_(pe));
            auto o      = sa_out_(attention(sa_q_(qk_in), sa_k_(qk_in), sa_v_(tokens), heads_));
            auto branch = from_tokens(o, h, w);
            x           = add(x, branch);
            if (trace) trace->self_attn = branch;
        }
        if (cross_attn_ && context) {
            auto q      = ca_q_(to_tokens(ca_norm_(x)));
            auto o      = ca_out_(attention(q, ca_k_(*context), ca_v_(*context), heads_));
            auto branch = from_tokens(o, h, w);
            x           = add(x, branch);
            if (trace) trace->cross_attn = branch;
        }
        if (trace) trace->output = x;
        return x;
    }

    // Parameters touched by the self-attention stage (exposed for tests).
    const nn::GroupNorm<S>& self_attn_norm() const { return sa_norm_; }
    const nn::Linear<S>& self_attn_value() const { return sa_v_; }
    const nn::Linear<S>& self_attn_out() const { return sa_out_; }
    const nn::Linear<S>& cross_attn_out() const { return ca_out_; }

private:
    int cout_ = 0, heads_ = 1, pos_dim_ = 16;
    bool self_attn_ = false, cross_attn_ = false;
    nn::GroupNorm<S> norm1_, norm2_, sa_norm_, ca_norm_;
    nn::Conv2d<S> conv1_, conv2_, skip_;
    nn::Linear<S> temb_proj_, sa_pe_, sa_q_, sa_k_, sa_v_, sa_out_, ca_q_, ca_k_, ca_v_, ca_out_;
};

// U-shaped noise predictor over composed grids.
template <class S>
class Denoiser {
public:
    Denoiser() = default;
    Denoiser(nn::ParamStore<S>& ps, const DenoiserConfig& cfg, Rng& rng) : cfg_(cfg) {
        cfg_.validate();
        const int base = cfg_.base_channels, levels = cfg_.levels();
        time1_ = nn::Linear<S>(ps, "unet.time.fc1", base, cfg_.time_embed_dim, rng);
        time2_ = nn::Linear<S>(ps, "unet.time.fc2", cfg_.time_embed_dim, cfg_.time_embed_dim, rng);
        const int io_ch = cfg_.in_channels * cfg_.input_patch * cfg_.input_patch;
        stem_  = nn::Conv2d<S>(ps, "unet.stem", io_ch, base, 3, 1, rng);
        int ch = base;
        for (int l = 0; l < levels; ++l) {
            const int out = cfg_.channels(l);
            down_.emplace_back(ps, "unet.down" + std::to_string(l), ch, out, cfg_, cfg_.attends(l), false, rng);
            ch = out;
            if (l + 1 < levels)
                downsample_.emplace_back(ps, "unet.downsample" + std::to_string(l), ch, ch, 3, 2, rng);
        }
        for (int m = 0; m < cfg_.middle_blocks; ++m)
            middle_.emplace_back(ps, "unet.mid" + std::to_string(m), ch, ch, cfg_, true, cfg_.middle_cross_attention,
                                 rng);
        up_.resize(static_cast<std::size_t>(levels));
        upsample_.resize(static_cast<std::size_t>(levels));
        for (int l = levels - 1; l >= 0; --l) {
            const int out = cfg_.channels(l);
            up_[static_cast<std::size_t>(l)] =
                UNetBlock<S>(ps, "unet.up" + std::to_string(l), ch + out, out, cfg_, cfg_.attends(l), false, rng);
            ch = out;
            if (l > 0) {
                const int next = cfg_.channels(l - 1);
                upsample_[static_cast<std::size_t>(l)] =
                    nn::Conv2d<S>(ps, "unet.upsample" + std::to_string(l), ch, next, 3, 1, rng);
                ch = next;
            }
        }
        out_norm_ = nn::GroupNorm<S>(ps, "unet.out.norm", ch, cfg_.groups);
        out_conv_ = nn::Conv2d<S>(ps, "unet.out.conv", ch, io_ch, 3, 1, rng, /*zero_init=*/true);
        if (cfg_.middle_cross_attention)
            null_context_ = ps.normal("unet.null_context", {1, cfg_.context_dim}, 1.0, rng);
    }

    const DenoiserConfig& config() const { return cfg_; }
    const ag::Var<S>& null_context() const { return null_context_; }
    const std::vector<UNetBlock<S>>& middle_blocks() const { return middle_; }

    int downsample_factor() const { return cfg_.input_patch << (cfg_.levels() - 1); }

    ag::Var<S> time_embedding(double t) const {
        auto e = ag::Var<S>::constant(nn::sinusoidal_embedding<S>(t, cfg_.base_channels), {1, cfg_.base_channels});
        return ag::silu(time2_(ag::silu(time1_(e))));
    }

    // Predicts eps for x_t [C,H,W] at step t. A null context reads the learned
    // null token; context is ignored when cross-attention is disabled.
    ag::Var<S> denoise_step(const ag::Var<S>& x, double t, const PromptContext<S>* context,
                            std::vector<BlockTrace<S>>* middle_trace = nullptr) const {
        if (x.shape().size() != 3 || x.dim(0) != cfg_.in_channels)
            throw ShapeError("denoise_step: expected [" + std::to_string(cfg_.in_channels) + ",H,W], got " +
                             ag::shape_str(x.shape()));
        const int f = downsample_factor();
        if (x.dim(1) % f != 0 || x.dim(2) % f != 0)
            throw ShapeError("denoise_step: spatial size must be divisible by " + std::to_string(f));
        const ag::Var<S>* ctx = nullptr;
        if (cfg_.middle_cross_attention) {
            if (context) {
                if (context->width() != cfg_.context_dim)
                    throw ConfigError("context token width " + std::to_string(context->width()) +
                                      " does not match context_dim " + std::to_string(cfg_.context_dim));
                ctx = &context->tokens;
            } else {
                ctx = &null_context_;
            }
        }
        auto temb = time_embedding(t);
        auto h    = stem_(cfg_.input_patch > 1 ? ag::pixel_unshuffle(x, cfg_.input_patch) : x);
        std::vector<ag::Var<S>> skips;
        for (int l = 0; l < cfg_.levels(); ++l) {
            h = down_[static_cast<std::size_t>(l)].forward(h, temb, nullptr);
            skips.push_back(h);
            if (l + 1 < cfg_.levels()) h = downsample_[static_cast<std::size_t>(l)](h);
        }
        if (middle_trace) middle_trace->clear();
        for (const auto& block : middle_) {
            BlockTrace<S> tr;
            h = block.forward(h, temb, ctx, middle_trace ? &tr : nullptr);
            if (middle_trace) middle_trace->push_back(tr);
        }
        for (int l = cfg_.levels() - 1; l >= 0; --l) {
            h = up_[static_cast<std::size_t>(l)].forward(ag::concat0<S>({h, skips[static_cast<std::size_t>(l)]}),
                                                         temb, nullptr);
            if (l > 0) h = upsample_[static_cast<std::size_t>(l)](ag::upsample2x(h));
        }
        auto out = out_conv_(ag::silu(out_norm_(h)));
        return cfg_.input_patch > 1 ? ag::pixel_shuffle(out, cfg_.input_patch) : out;
    }

private:
    DenoiserConfig cfg_;
    nn::Linear<S> time1_, time2_;
    nn::Conv2d<S> stem_;
    std::vector<UNetBlock<S>> down_, middle_, up_;
    std::vector<nn::Conv2d<S>> downsample_, upsample_;
    nn::GroupNorm<S> out_norm_;
    nn::Conv2d<S> out_conv_;
    ag::Var<S> null_context_;
};

}  // namespace gridedit
