// Builds one editing prompt, writes its grid and the filled-in answer, and
// prints how the reference models score on a small evaluation set.

#include <iostream>

#include "gridedit/core/image_io.hpp"
#include "gridedit/dataset.hpp"
#include "gridedit/edit.hpp"
#include "gridedit/metrics.hpp"

using namespace gridedit;

int main() {
    const Sample s = make_sample(TaskKind::recolor_shape, 7, 2);
    write_png("prompt_grid.png", mask_target(s.grid(), s.n_examples).grid);
    write_png("answer_grid.png", s.grid());
    std::cout << "task " << to_string(s.task.kind) << ", grid " << s.grid().shape_string() << ", boxes";
    for (const auto& b : s.boxes)
        std::cout << " [" << b->alpha_min << "," << b->beta_min << "," << b->alpha_max << "," << b->beta_max << "]";
    std::cout << "\n";

    std::vector<Sample> set;
    for (int i = 0; i < 32; ++i) set.push_back(procedural_sample(1, i, TaskMix::all(), 1));
    const FeatureExtractor fx;
    for (const auto& [name, model] : {std::pair{"oracle", oracle_model()}, std::pair{"identity", identity_model()}}) {
        const FidelityReport r = evaluate_model(model, set, fx);
        std::cout << name << ": mean MAE " << r.mean_mae << ", delta_prompt " << r.delta_prompt << ", delta_image "
                  << r.delta_image << "\n";
    }
}
