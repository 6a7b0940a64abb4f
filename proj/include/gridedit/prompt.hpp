#pragma once

#include <cmath>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "gridedit/core/autograd.hpp"
#include "gridedit/core/nn.hpp"
#include "gridedit/gridspace.hpp"

namespace gridedit {

struct PromptConfig {
    int panel_size    = kDefaultPanelSize;
    int patch         = 8;
    int width         = 64;   // token width D; the denoiser's context_dim must match
    int heads         = 4;
    int image_layers  = 2;    // depth of the per-image tokenizer stack
    int prompt_layers = 5;    // depth of the bidirectional prompt encoder
    int mlp_ratio     = 2;
    int fourier_freqs = 8;

    int tokens_per_image() const { return (panel_size / patch) * (panel_size / patch); }

    // Context length for n example pairs: (2n+1) images plus one box token per example image.
    int context_length(int n_examples) const { return (2 * n_examples + 1) * tokens_per_image() + 2 * n_examples; }

    void validate() const {
        if (panel_size <= 0 || patch <= 0 || panel_size % patch != 0)
            throw ConfigError("prompt: panel_size must be a positive multiple of patch");
        if (width <= 0 || heads <= 0 || width % heads != 0)
            throw ConfigError("prompt: width must be a positive multiple of heads");
        if (image_layers < 0 || prompt_layers < 0 || mlp_ratio < 1 || fourier_freqs < 1)
            throw ConfigError("prompt: invalid depth/ratio/frequency settings");
    }
};

// Normalized region of interest; (alpha, beta) = (x, y), origin top-left.
struct BoundingBox {
    double alpha_min = 0.0, beta_min = 0.0, alpha_max = 1.0, beta_max = 1.0;

    static BoundingBox full() { return {}; }

    void validate() const {
        for (double v : {alpha_min, beta_min, alpha_max, beta_max})
            if (!(v >= 0.0 && v <= 1.0)) throw ValidationError("bounding box coordinate outside [0,1]");
        if (alpha_min > alpha_max || beta_min > beta_max)
            throw ValidationError("bounding box min corner exceeds max corner");
    }

    friend bool operator==(const BoundingBox&, const BoundingBox&) = default;
};

// Images are E_1, E'_1, ..., E_n, E'_n, I. `boxes`, when non-empty, holds one
// optional box per example image (2n entries); the query carries none.
struct VisualPrompt {
    std::vector<Panel> images;
    std::vector<std::optional<BoundingBox>> boxes;

    int n_examples() const { return static_cast<int>(images.size() / 2); }

    void validate() const {
        if (images.size() < 3 || images.size() % 2 == 0)
            throw ValidationError("visual prompt needs an odd image count >= 3, got " +
                                  std::to_string(images.size()));
        validate_example_count(n_examples());
        if (!boxes.empty() && boxes.size() != images.size() - 1)
            throw ValidationError("visual prompt has " + std::to_string(boxes.size()) + " boxes for " +
                                  std::to_string(images.size() - 1) + " example images");
        for (const auto& b : boxes)
            if (b) b->validate();
    }
};

template <class S>
struct PromptContext {
    ag::Var<S> tokens;  // [L_c, D]

    int length() const { return tokens.dim(0); }
    int width() const { return tokens.dim(1); }
};

// [sin(2^k pi p), cos(2^k pi p)] for every coordinate p and k = 0..K-1, grouped per coordinate.
inline std::vector<double> fourier_features(std::span<const double> coords, int freqs) {
    std::vector<double> out;
    out.reserve(coords.size() * 2 * freqs);
    for (double p : coords) {
        for (int k = 0; k < freqs; ++k) out.push_back(std::sin(std::ldexp(M_PI, k) * p));
        for (int k = 0; k < freqs; ++k) out.push_back(std::cos(std::ldexp(M_PI, k) * p));
    }
    return out;
}

enum class Slot { before = 0, after = 1, query = 2 };

// Visual prompt encoder: a shared patch tokenizer for every prompt image, a
// Fourier-feature MLP for boxes, and a bidirectional transformer over the
// concatenated sequence.
template <class S>
class PromptEncoder {
public:
    PromptEncoder() = default;
    PromptEncoder(nn::ParamStore<S>& ps, const PromptConfig& cfg, Rng& rng) : cfg_(cfg) {
        cfg_.validate();
        const int d = cfg_.width, l = cfg_.tokens_per_image();
        const int patch_dim = cfg_.patch * cfg_.patch * 3;
        patch_embed_        = nn::Linear<S>(ps, "prompt.image.patch", patch_dim, d, rng);
        pos_embed_          = ps.normal("prompt.image.pos", {l, d}, 0.02, rng);
        for (int i = 0; i < cfg_.image_layers; ++i)
            image_layers_.emplace_back(ps, "prompt.image.layer" + std::to_string(i), d, cfg_.heads, cfg_.mlp_ratio,
                                       rng);
        image_norm_  = nn::LayerNorm<S>(ps, "prompt.image.norm", d);
        box_fc1_     = nn::Linear<S>(ps, "prompt.box.fc1", 8 * cfg_.fourier_freqs, d, rng);
        box_fc2_     = nn::Linear<S>(ps, "prompt.box.fc2", d, d, rng);
        slot_embed_  = ps.normal("prompt.slot", {3, d}, 0.02, rng);
        box_type_    = ps.normal("prompt.box_type", {1, d}, 0.02, rng);
        for (int i = 0; i < cfg_.prompt_layers; ++i)
            prompt_layers_.emplace_back(ps, "prompt.encoder.layer" + std::to_string(i), d, cfg_.heads,
                                        cfg_.mlp_ratio, rng);
        out_norm_ = nn::LayerNorm<S>(ps, "prompt.encoder.norm", d);
    }

    const PromptConfig& config() const { return cfg_; }

    // Non-overlapping patches, row-major, each flattened as (py, px, channel) in [-1,1].
    std::vector<S> patchify(const Image& img) const {
        if (img.height != cfg_.panel_size || img.width != cfg_.panel_size || img.channels != 3) {
            throw ShapeError("tokenize_image: expected " + std::to_string(cfg_.panel_size) + "x" +
                             std::to_string(cfg_.panel_size) + "x3 panel, got " + img.shape_string());
        }
        const int p = cfg_.patch, n = cfg_.panel_size / p;
        std::vector<S> out;
        out.reserve(img.size());
        for (int gy = 0; gy < n; ++gy)
            for (int gx = 0; gx < n; ++gx)
                for (int y = 0; y < p; ++y)
                    for (int x = 0; x < p; ++x)
                        for (int c = 0; c < 3; ++c) out.push_back(S(img.at(gy * p + y, gx * p + x, c)) * S(2) - S(1));
        return out;
    }

    // [L, D] token features of one panel.
    ag::Var<S> tokenize_image(const Image& img) const {
        const int l = cfg_.tokens_per_image();
        auto patches = ag::Var<S>::constant(patchify(img), {l, cfg_.patch * cfg_.patch * 3});
        auto h       = ag::add(patch_embed_(patches), pos_embed_);
        for (const auto& layer : image_layers_) h = layer(h);
        return image_norm_(h);
    }

    // [1, D] token for one box.
    ag::Var<S> encode_box(const BoundingBox& box) const {
        box.validate();
        const double coords[4] = {box.alpha_min, box.beta_min, box.alpha_max, box.beta_max};
        const auto feats       = fourier_features(coords, cfg_.fourier_freqs);
        auto f = ag::Var<S>::constant(std::vector<S>(feats.begin(), feats.end()), {1, static_cast<int>(feats.size())});
        return box_fc2_(ag::silu(box_fc1_(f)));
    }

    // f_c for a prompt. `drop_boxes[i]` replaces the i-th example box by the
    // full-image default; missing boxes are also the default.
    PromptContext<S> fuse_context(const VisualPrompt& prompt, const std::vector<bool>& drop_boxes = {}) const {
        prompt.validate();
        const int n_ex = static_cast<int>(prompt.images.size()) - 1;
        if (!drop_boxes.empty() && static_cast<int>(drop_boxes.size()) != n_ex)
            throw ValidationError("fuse_context: drop flags for " + std::to_string(drop_boxes.size()) +
                                  " boxes, prompt has " + std::to_string(n_ex) + " example images");
        std::vector<ag::Var<S>> seq;
        for (std::size_t i = 0; i < prompt.images.size(); ++i) {
            const Slot slot = slot_of(i, prompt.images.size());
            seq.push_back(ag::add_channel(tokenize_image(prompt.images[i].pixels), slot_row(slot)));
        }
        for (int i = 0; i < n_ex; ++i) {
            BoundingBox box = BoundingBox::full();
            const bool dropped = !drop_boxes.empty() && drop_boxes[static_cast<std::size_t>(i)];
            if (!prompt.boxes.empty() && prompt.boxes[static_cast<std::size_t>(i)] && !dropped)
                box = *prompt.boxes[static_cast<std::size_t>(i)];
            auto tok = ag::add(encode_box(box), box_type_);
            seq.push_back(ag::add_channel(tok, slot_row(slot_of(static_cast<std::size_t>(i), prompt.images.size()))));
        }
        auto h = ag::concat0(seq);
        for (const auto& layer : prompt_layers_) h = layer(h);
        return PromptContext<S>{out_norm_(h)};
    }

private:
    static Slot slot_of(std::size_t index, std::size_t count) {
        if (index + 1 == count) return Slot::query;
        return index % 2 == 0 ? Slot::before : Slot::after;
    }

    ag::Var<S> slot_row(Slot s) const {
        const int r = static_cast<int>(s);
        return ag::slice_rows(slot_embed_, r, r + 1);
    }

    PromptConfig cfg_;
    nn::Linear<S> patch_embed_;
    ag::Var<S> pos_embed_;
    std::vector<nn::TransformerLayer<S>> image_layers_;
    nn::LayerNorm<S> image_norm_;
    nn::Linear<S> box_fc1_, box_fc2_;
    ag::Var<S> slot_embed_, box_type_;
    std::vector<nn::TransformerLayer<S>> prompt_layers_;
    nn::LayerNorm<S> out_norm_;
};

// Whole-condition dropout: returns no context with probability p_drop.
template <class S>
std::optional<PromptContext<S>> drop_condition(const PromptContext<S>& ctx, double p_drop, Rng& rng) {
    if (!(p_drop >= 0.0 && p_drop <= 1.0)) throw ConfigError("condition dropout must be in [0,1]");
    if (bernoulli(rng, p_drop)) return std::nullopt;
    return ctx;
}

// Independent per-box drop flags for 2n example images.
inline std::vector<bool> sample_box_drops(int n_boxes, double rate, Rng& rng) {
    if (!(rate >= 0.0 && rate <= 1.0)) throw ConfigError("box dropout must be in [0,1]");
    std::vector<bool> out(static_cast<std::size_t>(n_boxes));
    for (int i = 0; i < n_boxes; ++i) out[static_cast<std::size_t>(i)] = bernoulli(rng, rate);
    return out;
}

}  // namespace gridedit
