#pragma once

// Instruction grids: example pairs stacked as rows above the query row,
//
//     E_1   E'_1
//     ...   ...
//     E_n   E'_n
//     I     I' (or blank)
//
// with every panel the same H x W x C.

#include <string>
#include <utility>
#include <vector>

#include "gridedit/core/error.hpp"
#include "gridedit/core/image.hpp"

namespace gridedit {

inline constexpr int kMaxExamples     = 8;
inline constexpr float kBlankFill     = 0.5f;
inline constexpr int kDefaultPanelSize = 32;

enum class PanelRole { example, transformed_example, query, target, blank };

struct Panel {
    Image pixels;
    PanelRole role = PanelRole::blank;
};

inline Panel blank_panel(int h, int w, int c = 3, float fill = kBlankFill) {
    return Panel{Image(h, w, c, fill), PanelRole::blank};
}

inline void validate_example_count(int n_examples) {
    if (n_examples < 1 || n_examples > kMaxExamples) {
        throw ConfigError("n_examples must be in [1, " + std::to_string(kMaxExamples) + "], got " +
                          std::to_string(n_examples));
    }
}

inline int grid_rows(int n_examples) { return n_examples + 1; }

// Composes 2*(n_examples+1) panels (row-major order) into one image.
inline Image compose(const std::vector<Panel>& panels, int n_examples) {
    validate_example_count(n_examples);
    const std::size_t expected = 2 * static_cast<std::size_t>(n_examples + 1);
    if (panels.size() != expected) {
        throw ValidationError("compose: expected " + std::to_string(expected) + " panels for n_examples=" +
                              std::to_string(n_examples) + ", got " + std::to_string(panels.size()));
    }
    const Image& ref = panels.front().pixels;
    for (const auto& p : panels) require_same_shape(ref, p.pixels, "compose");
    const int h = ref.height, w = ref.width, c = ref.channels;
    Image grid(grid_rows(n_examples) * h, 2 * w, c);
    for (std::size_t i = 0; i < panels.size(); ++i) {
        const int oy = static_cast<int>(i / 2) * h, ox = static_cast<int>(i % 2) * w;
        const Image& src = panels[i].pixels;
        for (int y = 0; y < h; ++y)
            std::copy_n(src.pixels.begin() + static_cast<std::ptrdiff_t>(y) * w * c, w * c,
                        grid.pixels.begin() + (static_cast<std::ptrdiff_t>(oy + y) * grid.width + ox) * c);
    }
    return grid;
}

inline std::pair<int, int> panel_size(const Image& grid, int n_examples) {
    validate_example_count(n_examples);
    const int rows = grid_rows(n_examples);
    if (grid.height % rows != 0 || grid.width % 2 != 0) {
        throw ShapeError("grid " + grid.shape_string() + " does not divide into " + std::to_string(rows) +
                         "x2 panels");
    }
    const int h = grid.height / rows, w = grid.width / 2;
    if (h != w) {
        throw ShapeError("grid " + grid.shape_string() + " yields non-square " + std::to_string(h) + "x" +
                         std::to_string(w) + " panels");
    }
    return {h, w};
}

inline PanelRole role_at(std::size_t index, std::size_t count) {
    if (index + 2 == count) return PanelRole::query;
    if (index + 1 == count) return PanelRole::target;
    return index % 2 == 0 ? PanelRole::example : PanelRole::transformed_example;
}

inline std::vector<Panel> decompose(const Image& grid, int n_examples) {
    const auto [h, w]       = panel_size(grid, n_examples);
    const int c             = grid.channels;
    const std::size_t count = 2 * static_cast<std::size_t>(n_examples + 1);
    std::vector<Panel> panels;
    panels.reserve(count);
    for (std::size_t i = 0; i < count; ++i) {
        const int oy = static_cast<int>(i / 2) * h, ox = static_cast<int>(i % 2) * w;
        Panel p{Image(h, w, c), role_at(i, count)};
        for (int y = 0; y < h; ++y)
            std::copy_n(grid.pixels.begin() + (static_cast<std::ptrdiff_t>(oy + y) * grid.width + ox) * c, w * c,
                        p.pixels.pixels.begin() + static_cast<std::ptrdiff_t>(y) * w * c);
        panels.push_back(std::move(p));
    }
    return panels;
}

// 1 on the bottom-right (target) panel, 0 elsewhere; same layout as the grid.
inline std::vector<float> target_mask(const Image& grid, int n_examples) {
    const auto [h, w] = panel_size(grid, n_examples);
    std::vector<float> mask(grid.size(), 0.0f);
    for (int y = grid.height - h; y < grid.height; ++y)
        for (int x = w; x < grid.width; ++x)
            for (int c = 0; c < grid.channels; ++c)
                mask[(static_cast<std::size_t>(y) * grid.width + x) * grid.channels + c] = 1.0f;
    return mask;
}

struct MaskedGrid {
    Image grid;
    std::vector<float> mask;
};

inline MaskedGrid mask_target(const Image& grid, int n_examples, float fill = kBlankFill) {
    MaskedGrid out{grid, target_mask(grid, n_examples)};
    for (std::size_t i = 0; i < out.mask.size(); ++i)
        if (out.mask[i] != 0.0f) out.grid.pixels[i] = fill;
    return out;
}

inline Image extract_target(const Image& grid, int n_examples) { return decompose(grid, n_examples).back().pixels; }

}  // namespace gridedit
