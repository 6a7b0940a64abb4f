#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <vector>

#include "gridedit/gridspace.hpp"
#include "gridedit/prompt.hpp"
#include "gridedit/tasks.hpp"

namespace gridedit {

// One editing invocation: example pairs, a query, optional example boxes.
struct EditRequest {
    std::vector<Panel> examples;                    // E_1, E'_1, ..., E_n, E'_n
    Panel query;
    std::vector<std::optional<BoundingBox>> boxes;  // empty, or one per example image
    std::optional<TaskSpec> truth;                  // read only by reference models
    std::uint64_t seed = 0;
    std::uint64_t id   = 0;

    int n_examples() const { return static_cast<int>(examples.size() / 2); }

    VisualPrompt prompt() const {
        VisualPrompt p;
        p.images = examples;
        p.images.push_back(query);
        p.boxes = boxes;
        return p;
    }

    // Examples, query and a blank target, composed.
    Image grid(float fill = kBlankFill) const {
        std::vector<Panel> panels = examples;
        panels.push_back(query);
        panels.push_back(blank_panel(query.pixels.height, query.pixels.width, query.pixels.channels, fill));
        return compose(panels, n_examples());
    }

    void validate() const { prompt().validate(); }
};

using EditModel = std::function<Image(const EditRequest&)>;

inline EditRequest request_from_sample(const Sample& s, std::uint64_t seed) {
    EditRequest r;
    r.examples.assign(s.panels.begin(), s.panels.end() - 2);
    r.query = s.panels[s.panels.size() - 2];
    r.boxes = s.boxes;
    r.truth = s.task;
    r.seed  = seed;
    r.id    = s.id;
    return r;
}

// Applies the ground-truth transform; identity when none is known.
inline EditModel oracle_model() {
    return [](const EditRequest& r) { return r.truth ? apply_transform(*r.truth, r.query.pixels) : r.query.pixels; };
}

inline EditModel identity_model() {
    return [](const EditRequest& r) { return r.query.pixels; };
}

}  // namespace gridedit
