#pragma once

#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "gridedit/checkpoint.hpp"
#include "gridedit/metrics.hpp"
#include "gridedit/trainer.hpp"

namespace gridedit {

struct AblationLeg {
    std::string name;
    Ablation flags;
};

inline std::vector<AblationLeg> ablation_legs() {
    Ablation none, no_ir, no_ca, regr;
    no_ir.no_interest_region = true;
    no_ca.no_cross_attention = true;
    regr.regression_baseline = true;
    return {{"full", none}, {"no_interest_region", no_ir}, {"no_cross_attention", no_ca}, {"regression_baseline", regr}};
}

struct AblationSpec {
    ModelConfig base;
    TrainConfig train;                 // shared budget and seeds; its ablation field is ignored
    BatchSource source;                // identical data order for every leg
    std::vector<Sample> eval_set;
    int sampler_steps             = 25;
    std::uint64_t extractor_seed  = 0;
    std::uint64_t eval_seed       = 0;
    std::filesystem::path out;         // per-leg checkpoints when non-empty
};

struct LegResult {
    std::string name;
    bool ok = false;
    std::string error;
    double final_loss = 0.0;  // mean over the last 100 steps
    FidelityReport report;
    std::filesystem::path checkpoint;
};

struct LegProgress {
    std::string leg;
    StepStats stats;
};

// Trains and evaluates every leg under the same seeds and budget. A failing
// leg is recorded and the remaining legs still run.
inline std::vector<LegResult> run_ablation_matrix(const AblationSpec& spec,
                                                  const std::function<void(const LegProgress&)>& progress = {}) {
    if (spec.eval_set.empty()) throw ValidationError("ablation needs a non-empty evaluation set");
    std::vector<LegResult> results;
    const FeatureExtractor fx(ExtractorKind::fixed_random_conv, spec.extractor_seed);
    for (const auto& leg : ablation_legs()) {
        LegResult r;
        r.name = leg.name;
        try {
            TrainConfig tc = spec.train;
            tc.ablation    = leg.flags;
            Trainer tr(spec.base, tc);
            std::vector<double> tail;
            tr.run(spec.source, tc.steps, [&](const StepStats& st) {
                tail.push_back(st.loss);
                if (tail.size() > 100) tail.erase(tail.begin());
                if (progress) progress({leg.name, st});
            });
            for (double l : tail) r.final_loss += l / double(tail.size());
            if (!spec.out.empty()) {
                r.checkpoint = spec.out / leg.name / "checkpoint.ckpt";
                save_checkpoint(r.checkpoint, tr);
            }
            const auto model = tr.ema_model();
            r.report = evaluate_model(model->as_edit_model(tr.inference_options(spec.sampler_steps)), spec.eval_set, fx,
                                      spec.eval_seed);
            r.ok = true;
        } catch (const std::exception& e) {
            r.ok    = false;
            r.error = e.what();
        }
        results.push_back(std::move(r));
    }
    return results;
}

}  // namespace gridedit
