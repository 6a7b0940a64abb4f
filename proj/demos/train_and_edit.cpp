// Trains the tiny preset on color inversion for a few hundred steps, then
// fills in the hidden panel of a held-out prompt.

#include <iostream>

#include "gridedit/checkpoint.hpp"
#include "gridedit/core/image_io.hpp"

using namespace gridedit;

int main(int argc, char** argv) {
    const int steps = argc > 1 ? std::stoi(argv[1]) : 300;
    TrainConfig tc;
    tc.batch_size    = 4;
    tc.learning_rate = 1e-3;
    tc.task_mix      = "invert_color=1";
    Trainer tr(ModelConfig::preset("tiny"), tc);
    const auto source = procedural_batches(train_data_root(tc.seed), TaskMix::parse(tc.task_mix), 1);
    tr.run(source, steps, [&](const StepStats& st) {
        if ((st.step + 1) % 50 == 0) std::cout << "step " << st.step + 1 << " loss " << st.loss << "\n";
    });
    save_checkpoint("tiny.ckpt", tr);

    const Sample s   = procedural_sample(heldout_data_root(tc.seed), 0, TaskMix::parse(tc.task_mix), 1);
    const auto model = tr.ema_model();
    const Image out  = model->edit(request_from_sample(s, 1), tr.inference_options(20));
    std::vector<Panel> panels = s.panels;
    panels.back().pixels      = out;
    write_png("edited_grid.png", compose(panels, 1));
    std::cout << "held-out MAE " << mean_abs_diff(out, s.target()) << "\n";
}
