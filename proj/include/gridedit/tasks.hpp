#pragma once

// Procedural editing tasks on synthetic scenes.
//
// Every scene carries one saturated "key" shape drawn on top of a desaturated,
// lightly textured background and up to two distractor shapes. Shape-local
// tasks find the key shape by color, so the transform needs only the panel.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "gridedit/core/error.hpp"
#include "gridedit/core/image.hpp"
#include "gridedit/core/rng.hpp"
#include "gridedit/gridspace.hpp"
#include "gridedit/prompt.hpp"

namespace gridedit {

enum class TaskKind {
    invert_color,
    hue_rotate,
    grayscale,
    brightness_shift,
    hflip,
    recolor_shape,
    translate_shape,
    add_border,
    binarize,
};

inline constexpr std::array<TaskKind, 9> kAllTasks = {
    TaskKind::invert_color, TaskKind::hue_rotate,      TaskKind::grayscale,
    TaskKind::brightness_shift, TaskKind::hflip,       TaskKind::recolor_shape,
    TaskKind::translate_shape,  TaskKind::add_border,  TaskKind::binarize,
};

inline std::string to_string(TaskKind k) {
    switch (k) {
        case TaskKind::invert_color: return "invert_color";
        case TaskKind::hue_rotate: return "hue_rotate";
        case TaskKind::grayscale: return "grayscale";
        case TaskKind::brightness_shift: return "brightness_shift";
        case TaskKind::hflip: return "hflip";
        case TaskKind::recolor_shape: return "recolor_shape";
        case TaskKind::translate_shape: return "translate_shape";
        case TaskKind::add_border: return "add_border";
        case TaskKind::binarize: return "binarize";
    }
    throw ConfigError("unknown task kind " + std::to_string(static_cast<int>(k)));
}

inline TaskKind task_kind_from_string(std::string_view s) {
    for (TaskKind k : kAllTasks)
        if (to_string(k) == s) return k;
    throw ConfigError("unknown task kind '" + std::string(s) + "'");
}

inline bool is_shape_local(TaskKind k) { return k == TaskKind::recolor_shape || k == TaskKind::translate_shape; }

using Rgb = std::array<float, 3>;

inline constexpr Rgb kKeyColor = {0.9f, 0.1f, 0.1f};

// Distractor and target colors; all far from the key color in every blend with the background.
inline constexpr std::array<Rgb, 7> kPalette = {{
    {0.15f, 0.35f, 0.90f},
    {0.20f, 0.70f, 0.30f},
    {0.95f, 0.85f, 0.20f},
    {0.55f, 0.25f, 0.80f},
    {0.20f, 0.80f, 0.85f},
    {0.97f, 0.97f, 0.97f},
    {0.95f, 0.60f, 0.15f},
}};

// Parameter ranges drawn by random_task():
//   hue_rotate        amount = degrees in [30, 330]
//   brightness_shift  amount = +-[0.1, 0.3]
//   binarize          amount = luma threshold in [0.35, 0.65]
//   translate_shape   dx, dy in [-6, 6], |dx| + |dy| >= 3
//   add_border        width in [2, 4], color from the palette
//   recolor_shape     color from the palette
struct TaskSpec {
    TaskKind kind = TaskKind::invert_color;
    double amount = 0.0;
    int dx = 0, dy = 0;
    int width = 0;
    Rgb color{};
    std::uint64_t seed = 0;

    void validate() const {
        auto bad = [&](const std::string& what) { return ValidationError(to_string(kind) + ": " + what); };
        switch (kind) {
            case TaskKind::invert_color:
            case TaskKind::grayscale:
            case TaskKind::hflip: break;
            case TaskKind::hue_rotate:
                if (!(amount >= 0.0 && amount <= 360.0)) throw bad("hue angle outside [0,360]");
                break;
            case TaskKind::brightness_shift:
                if (!(amount >= -1.0 && amount <= 1.0)) throw bad("shift outside [-1,1]");
                break;
            case TaskKind::binarize:
                if (!(amount > 0.0 && amount < 1.0)) throw bad("threshold outside (0,1)");
                break;
            case TaskKind::translate_shape:
                if (std::abs(dx) > 16 || std::abs(dy) > 16) throw bad("offset exceeds 16 pixels");
                break;
            case TaskKind::add_border:
                if (width < 1 || width > 16) throw bad("border width outside [1,16]");
                [[fallthrough]];
            case TaskKind::recolor_shape:
                for (float c : color)
                    if (!(c >= 0.0f && c <= 1.0f)) throw bad("color outside [0,1]");
                break;
            default: throw ConfigError("unknown task kind " + std::to_string(static_cast<int>(kind)));
        }
    }

    friend bool operator==(const TaskSpec&, const TaskSpec&) = default;
};

inline TaskSpec random_task(TaskKind kind, Rng& rng) {
    TaskSpec s;
    s.kind = kind;
    s.seed = rng();
    switch (kind) {
        case TaskKind::hue_rotate: s.amount = uniform(rng, 30.0, 330.0); break;
        case TaskKind::brightness_shift: {
            const double mag = uniform(rng, 0.1, 0.3);
            s.amount         = bernoulli(rng, 0.5) ? mag : -mag;
            break;
        }
        case TaskKind::binarize: s.amount = uniform(rng, 0.35, 0.65); break;
        case TaskKind::translate_shape:
            do {
                s.dx = uniform_int(rng, -6, 6);
                s.dy = uniform_int(rng, -6, 6);
            } while (std::abs(s.dx) + std::abs(s.dy) < 3);
            break;
        case TaskKind::add_border:
            s.width = uniform_int(rng, 2, 4);
            s.color = kPalette[static_cast<std::size_t>(uniform_int(rng, 0, int(kPalette.size()) - 1))];
            break;
        case TaskKind::recolor_shape:
            s.color = kPalette[static_cast<std::size_t>(uniform_int(rng, 0, int(kPalette.size()) - 1))];
            break;
        default: break;
    }
    s.validate();
    return s;
}

// Spec undoing `s`, when one exists within the task family.
inline std::optional<TaskSpec> inverse_task(const TaskSpec& s) {
    TaskSpec inv = s;
    switch (s.kind) {
        case TaskKind::invert_color:
        case TaskKind::hflip: return inv;
        case TaskKind::hue_rotate: inv.amount = 360.0 - s.amount; return inv;
        case TaskKind::brightness_shift: inv.amount = -s.amount; return inv;
        case TaskKind::translate_shape:
            inv.dx = -s.dx;
            inv.dy = -s.dy;
            return inv;
        default: return std::nullopt;
    }
}

// Inclusive pixel rectangle.
struct PixelRect {
    int x0 = 0, y0 = 0, x1 = -1, y1 = -1;

    bool empty() const { return x1 < x0 || y1 < y0; }
    long area() const { return empty() ? 0 : long(x1 - x0 + 1) * (y1 - y0 + 1); }
    bool contains(int x, int y) const { return x >= x0 && x <= x1 && y >= y0 && y <= y1; }

    void include(int x, int y) {
        if (empty()) {
            *this = {x, y, x, y};
            return;
        }
        x0 = std::min(x0, x);
        y0 = std::min(y0, y);
        x1 = std::max(x1, x);
        y1 = std::max(y1, y);
    }

    static PixelRect unite(const PixelRect& a, const PixelRect& b) {
        if (a.empty()) return b;
        if (b.empty()) return a;
        return {std::min(a.x0, b.x0), std::min(a.y0, b.y0), std::max(a.x1, b.x1), std::max(a.y1, b.y1)};
    }

    BoundingBox normalized(int width, int height) const {
        return {double(x0) / width, double(y0) / height, double(x1 + 1) / width, double(y1 + 1) / height};
    }

    friend bool operator==(const PixelRect&, const PixelRect&) = default;
};

inline double iou(const PixelRect& a, const PixelRect& b) {
    if (a.empty() && b.empty()) return 1.0;
    const PixelRect inter{std::max(a.x0, b.x0), std::max(a.y0, b.y0), std::min(a.x1, b.x1), std::min(a.y1, b.y1)};
    const double i = double(inter.area());
    return i / double(a.area() + b.area() - inter.area());
}

// Rectangle of pixels that differ between two panels.
inline PixelRect changed_rect(const Image& a, const Image& b, float tol = 0.0f) {
    require_same_shape(a, b, "changed_rect");
    PixelRect r;
    for (int y = 0; y < a.height; ++y)
        for (int x = 0; x < a.width; ++x)
            for (int c = 0; c < a.channels; ++c)
                if (std::abs(a.at(y, x, c) - b.at(y, x, c)) > tol) {
                    r.include(x, y);
                    break;
                }
    return r;
}

// Soft membership of each pixel in the key shape: 1 near the key color, 0 beyond 0.25 (L-inf).
inline std::vector<float> key_weights(const Image& img) {
    std::vector<float> w(static_cast<std::size_t>(img.height) * img.width, 0.0f);
    if (img.channels != 3) return w;
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x) {
            float d = 0.0f;
            for (int c = 0; c < 3; ++c) d = std::max(d, std::abs(img.at(y, x, c) - kKeyColor[c]));
            w[static_cast<std::size_t>(y) * img.width + x] = std::clamp((0.25f - d) / 0.15f, 0.0f, 1.0f);
        }
    return w;
}

inline PixelRect key_rect(const Image& img) {
    const auto w = key_weights(img);
    PixelRect r;
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x)
            if (w[static_cast<std::size_t>(y) * img.width + x] > 0.0f) r.include(x, y);
    return r;
}

namespace detail {

inline float luma(const Image& img, int y, int x) {
    return 0.299f * img.at(y, x, 0) + 0.587f * img.at(y, x, 1) + 0.114f * img.at(y, x, 2);
}

inline void rotate_hue(float& r, float& g, float& b, float degrees) {
    const float mx = std::max({r, g, b}), mn = std::min({r, g, b}), d = mx - mn;
    if (d <= 0.0f) return;
    float h;
    if (mx == r)
        h = std::fmod((g - b) / d, 6.0f);
    else if (mx == g)
        h = (b - r) / d + 2.0f;
    else
        h = (r - g) / d + 4.0f;
    h = std::fmod(h + degrees / 60.0f, 6.0f);
    if (h < 0.0f) h += 6.0f;
    const float v = mx, s = d / mx;
    const int i   = std::min(static_cast<int>(h), 5);
    const float f = h - float(i);
    const float p = v * (1.0f - s), q = v * (1.0f - s * f), t = v * (1.0f - s * (1.0f - f));
    switch (i) {
        case 0: r = v, g = t, b = p; break;
        case 1: r = q, g = v, b = p; break;
        case 2: r = p, g = v, b = t; break;
        case 3: r = p, g = q, b = v; break;
        case 4: r = t, g = p, b = v; break;
        default: r = v, g = p, b = q; break;
    }
}

// Harmonic fill of the masked pixels from their unmasked surroundings (fixed Jacobi sweeps).
inline void harmonic_fill(Image& img, const std::vector<char>& hole, int sweeps = 80) {
    const int h = img.height, w = img.width, ch = img.channels;
    auto idx = [w](int y, int x) { return static_cast<std::size_t>(y) * w + x; };
    std::array<double, 4> ring{};
    long ring_n = 0;
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            if (hole[idx(y, x)]) continue;
            const bool edge = (y > 0 && hole[idx(y - 1, x)]) || (y + 1 < h && hole[idx(y + 1, x)]) ||
                              (x > 0 && hole[idx(y, x - 1)]) || (x + 1 < w && hole[idx(y, x + 1)]);
            if (!edge) continue;
            for (int c = 0; c < ch; ++c) ring[c] += img.at(y, x, c);
            ++ring_n;
        }
    if (ring_n == 0) return;
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            if (hole[idx(y, x)])
                for (int c = 0; c < ch; ++c) img.at(y, x, c) = float(ring[c] / double(ring_n));
    Image next = img;
    for (int it = 0; it < sweeps; ++it) {
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) {
                if (!hole[idx(y, x)]) continue;
                for (int c = 0; c < ch; ++c) {
                    float acc = 0.0f;
                    int n     = 0;
                    if (y > 0) acc += img.at(y - 1, x, c), ++n;
                    if (y + 1 < h) acc += img.at(y + 1, x, c), ++n;
                    if (x > 0) acc += img.at(y, x - 1, c), ++n;
                    if (x + 1 < w) acc += img.at(y, x + 1, c), ++n;
                    next.at(y, x, c) = acc / float(n);
                }
            }
        std::swap(img.pixels, next.pixels);
        next.pixels = img.pixels;
    }
}

}  // namespace detail

inline Image apply_transform(const TaskSpec& spec, const Image& in) {
    spec.validate();
    if (in.channels != 3) throw ShapeError("apply_transform: expected 3 channels, got " + in.shape_string());
    Image out = in;
    const int h = in.height, w = in.width;
    switch (spec.kind) {
        case TaskKind::invert_color:
            for (auto& v : out.pixels) v = 1.0f - v;
            break;
        case TaskKind::hue_rotate:
            for (int y = 0; y < h; ++y)
                for (int x = 0; x < w; ++x)
                    detail::rotate_hue(out.at(y, x, 0), out.at(y, x, 1), out.at(y, x, 2), float(spec.amount));
            break;
        case TaskKind::grayscale:
            for (int y = 0; y < h; ++y)
                for (int x = 0; x < w; ++x) {
                    const float l = detail::luma(in, y, x);
                    for (int c = 0; c < 3; ++c) out.at(y, x, c) = l;
                }
            break;
        case TaskKind::brightness_shift:
            for (auto& v : out.pixels) v += float(spec.amount);
            break;
        case TaskKind::hflip:
            for (int y = 0; y < h; ++y)
                for (int x = 0; x < w; ++x)
                    for (int c = 0; c < 3; ++c) out.at(y, x, c) = in.at(y, w - 1 - x, c);
            break;
        case TaskKind::recolor_shape: {
            const auto kw = key_weights(in);
            for (int y = 0; y < h; ++y)
                for (int x = 0; x < w; ++x) {
                    const float a = kw[static_cast<std::size_t>(y) * w + x];
                    if (a <= 0.0f) continue;
                    for (int c = 0; c < 3; ++c) out.at(y, x, c) += a * (spec.color[c] - kKeyColor[c]);
                }
            break;
        }
        case TaskKind::translate_shape: {
            const auto kw = key_weights(in);
            std::vector<char> hole(kw.size());
            for (std::size_t i = 0; i < kw.size(); ++i) hole[i] = kw[i] > 0.0f;
            detail::harmonic_fill(out, hole);
            for (int y = 0; y < h; ++y)
                for (int x = 0; x < w; ++x) {
                    const float a = kw[static_cast<std::size_t>(y) * w + x];
                    const int ty = y + spec.dy, tx = x + spec.dx;
                    if (a <= 0.0f || ty < 0 || ty >= h || tx < 0 || tx >= w) continue;
                    for (int c = 0; c < 3; ++c)
                        out.at(ty, tx, c) = (1.0f - a) * out.at(ty, tx, c) + a * in.at(y, x, c);
                }
            break;
        }
        case TaskKind::add_border:
            for (int y = 0; y < h; ++y)
                for (int x = 0; x < w; ++x)
                    if (y < spec.width || x < spec.width || y >= h - spec.width || x >= w - spec.width)
                        for (int c = 0; c < 3; ++c) out.at(y, x, c) = spec.color[c];
            break;
        case TaskKind::binarize:
            for (int y = 0; y < h; ++y)
                for (int x = 0; x < w; ++x) {
                    const float v = detail::luma(in, y, x) > float(spec.amount) ? 1.0f : 0.0f;
                    for (int c = 0; c < 3; ++c) out.at(y, x, c) = v;
                }
            break;
    }
    clip01(out);
    return out;
}

inline Panel apply_transform(const TaskSpec& spec, const Panel& panel) {
    return Panel{apply_transform(spec, panel.pixels), panel.role};
}

// Region a shape-local task edits: the key shape, plus its destination for translations.
inline std::optional<PixelRect> task_region(const TaskSpec& spec, const Image& in) {
    if (!is_shape_local(spec.kind)) return std::nullopt;
    const PixelRect src = key_rect(in);
    if (spec.kind == TaskKind::recolor_shape || src.empty()) return src;
    const PixelRect moved{std::clamp(src.x0 + spec.dx, 0, in.width - 1), std::clamp(src.y0 + spec.dy, 0, in.height - 1),
                          std::clamp(src.x1 + spec.dx, 0, in.width - 1),
                          std::clamp(src.y1 + spec.dy, 0, in.height - 1)};
    return PixelRect::unite(src, moved);
}

// ---------------------------------------------------------------------------
// Scenes

enum class ShapeKind { circle, rectangle, triangle };

struct Shape {
    ShapeKind kind = ShapeKind::circle;
    std::array<float, 6> geom{};  // circle: cx, cy, r; rectangle: x0, y0, x1, y1; triangle: 3 vertices
    Rgb color{};
    bool key = false;

    bool inside(float x, float y) const {
        switch (kind) {
            case ShapeKind::circle: {
                const float dx = x - geom[0], dy = y - geom[1];
                return dx * dx + dy * dy <= geom[2] * geom[2];
            }
            case ShapeKind::rectangle: return x >= geom[0] && x <= geom[2] && y >= geom[1] && y <= geom[3];
            case ShapeKind::triangle: {
                auto edge = [&](int a, int b) {
                    return (geom[2 * b] - geom[2 * a]) * (y - geom[2 * a + 1]) -
                           (geom[2 * b + 1] - geom[2 * a + 1]) * (x - geom[2 * a]);
                };
                const float e0 = edge(0, 1), e1 = edge(1, 2), e2 = edge(2, 0);
                return (e0 >= 0 && e1 >= 0 && e2 >= 0) || (e0 <= 0 && e1 <= 0 && e2 <= 0);
            }
        }
        return false;
    }

    // Analytic extent in pixel units, clipped to the panel.
    PixelRect bounds(int width, int height) const {
        float lx, ly, hx, hy;
        switch (kind) {
            case ShapeKind::circle:
                lx = geom[0] - geom[2], hx = geom[0] + geom[2], ly = geom[1] - geom[2], hy = geom[1] + geom[2];
                break;
            case ShapeKind::rectangle: lx = geom[0], ly = geom[1], hx = geom[2], hy = geom[3]; break;
            default:
                lx = std::min({geom[0], geom[2], geom[4]}), hx = std::max({geom[0], geom[2], geom[4]});
                ly = std::min({geom[1], geom[3], geom[5]}), hy = std::max({geom[1], geom[3], geom[5]});
        }
        return {std::clamp(int(std::floor(lx)), 0, width - 1), std::clamp(int(std::floor(ly)), 0, height - 1),
                std::clamp(int(std::ceil(hx)) - 1, 0, width - 1), std::clamp(int(std::ceil(hy)) - 1, 0, height - 1)};
    }
};

inline constexpr int kSupersample = 4;

// Fraction of each pixel covered by the shape (kSupersample^2 samples per pixel).
inline std::vector<float> coverage(const Shape& s, int height, int width) {
    std::vector<float> cov(static_cast<std::size_t>(height) * width, 0.0f);
    const float step = 1.0f / kSupersample;
    for (int y = 0; y < height; ++y)
        for (int x = 0; x < width; ++x) {
            int hits = 0;
            for (int sy = 0; sy < kSupersample; ++sy)
                for (int sx = 0; sx < kSupersample; ++sx)
                    hits += s.inside(float(x) + (float(sx) + 0.5f) * step, float(y) + (float(sy) + 0.5f) * step);
            cov[static_cast<std::size_t>(y) * width + x] = float(hits) / float(kSupersample * kSupersample);
        }
    return cov;
}

struct Scene {
    Panel panel;
    std::vector<Shape> shapes;  // drawing order; the key shape is last
    std::vector<PixelRect> boxes;
};

namespace detail {

inline Shape random_shape(Rng& rng, int size) {
    Shape s;
    s.kind         = static_cast<ShapeKind>(uniform_int(rng, 0, 2));
    const float sz = float(size);
    switch (s.kind) {
        case ShapeKind::circle: {
            const float r = float(uniform(rng, 0.12, 0.25)) * sz;
            s.geom        = {float(uniform(rng, r, sz - r)), float(uniform(rng, r, sz - r)), r, 0, 0, 0};
            break;
        }
        case ShapeKind::rectangle: {
            const float w = float(uniform(rng, 0.25, 0.45)) * sz, h = float(uniform(rng, 0.25, 0.45)) * sz;
            const float x = float(uniform(rng, 1.0, sz - w - 1.0)), y = float(uniform(rng, 1.0, sz - h - 1.0));
            s.geom        = {x, y, x + w, y + h, 0, 0};
            break;
        }
        case ShapeKind::triangle: {
            const float e  = float(uniform(rng, 0.3, 0.5)) * sz;
            const float x  = float(uniform(rng, 1.0, sz - e - 1.0)), y = float(uniform(rng, 1.0, sz - e - 1.0));
            s.geom         = {x + float(uniform(rng, 0.0, e)), y, x, y + e, x + e, y + float(uniform(rng, 0.5 * e, e))};
            break;
        }
    }
    return s;
}

}  // namespace detail

// One synthetic panel: gradient-plus-ripple background, 0-2 distractors, and the key shape.
inline Scene generate_scene(std::uint64_t seed, int size = kDefaultPanelSize) {
    if (size < 8) throw ConfigError("scene size must be at least 8");
    Rng rng = make_rng(seed, Stream::data, 0x5ce9e);
    Scene scene;
    Image img(size, size, 3);

    std::array<Rgb, 2> bg{};
    for (auto& col : bg) {
        const float gray = float(uniform(rng, 0.55, 0.8));
        for (auto& c : col) c = gray + float(uniform(rng, -0.08, 0.08));
    }
    const double angle = uniform(rng, 0.0, 2.0 * M_PI);
    const float ca = float(std::cos(angle)), sa = float(std::sin(angle));
    const float fx = float(uniform(rng, 0.3, 0.9)), fy = float(uniform(rng, 0.3, 0.9));
    const float phase = float(uniform(rng, 0.0, 2.0 * M_PI));
    const float half  = 0.5f * float(size);
    for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x) {
            const float t = std::clamp(((float(x) - half) * ca + (float(y) - half) * sa) / float(size) + 0.5f, 0.0f, 1.0f);
            const float ripple = 0.03f * std::sin(fx * float(x) + fy * float(y) + phase);
            for (int c = 0; c < 3; ++c) img.at(y, x, c) = (1.0f - t) * bg[0][c] + t * bg[1][c] + ripple;
        }

    const int distractors = uniform_int(rng, 0, 2);
    for (int i = 0; i <= distractors; ++i) {
        Shape s = detail::random_shape(rng, size);
        if (i == distractors) {
            s.key   = true;
            s.color = kKeyColor;
        } else {
            s.color = kPalette[static_cast<std::size_t>(uniform_int(rng, 0, int(kPalette.size()) - 1))];
        }
        const auto cov = coverage(s, size, size);
        for (int y = 0; y < size; ++y)
            for (int x = 0; x < size; ++x) {
                const float a = cov[static_cast<std::size_t>(y) * size + x];
                for (int c = 0; c < 3; ++c) img.at(y, x, c) = (1.0f - a) * img.at(y, x, c) + a * s.color[c];
            }
        scene.boxes.push_back(s.bounds(size, size));
        scene.shapes.push_back(s);
    }
    clip01(img);
    scene.panel = Panel{std::move(img), PanelRole::example};
    return scene;
}

// ---------------------------------------------------------------------------
// Samples

struct Sample {
    std::uint64_t id   = 0;
    std::uint64_t seed = 0;
    TaskSpec task;
    int n_examples = 1;
    std::vector<Panel> panels;                      // E_1, E'_1, ..., E_n, E'_n, I, I'
    std::vector<std::optional<BoundingBox>> boxes;  // one per example image, or empty

    const Image& query() const { return panels[panels.size() - 2].pixels; }
    const Image& target() const { return panels.back().pixels; }
    Image grid() const { return compose(panels, n_examples); }

    VisualPrompt prompt() const {
        VisualPrompt p;
        p.images.assign(panels.begin(), panels.end() - 1);
        p.boxes = boxes;
        return p;
    }
};

inline Sample make_sample(TaskKind kind, std::uint64_t seed, int n_examples, int panel = kDefaultPanelSize,
                          std::uint64_t id = 0) {
    validate_example_count(n_examples);
    Rng rng = make_rng(seed, Stream::data, 1);
    Sample s;
    s.id         = id;
    s.seed       = seed;
    s.n_examples = n_examples;
    s.task       = random_task(kind, rng);
    for (int i = 0; i <= n_examples; ++i) {
        Panel before = generate_scene(rng(), panel).panel;
        Panel after  = apply_transform(s.task, before);
        const bool query = i == n_examples;
        before.role      = query ? PanelRole::query : PanelRole::example;
        after.role       = query ? PanelRole::target : PanelRole::transformed_example;
        if (!query && is_shape_local(kind)) {
            const BoundingBox box = task_region(s.task, before.pixels)->normalized(panel, panel);
            s.boxes.push_back(box);
            s.boxes.push_back(box);
        }
        s.panels.push_back(std::move(before));
        s.panels.push_back(std::move(after));
    }
    return s;
}

}  // namespace gridedit
