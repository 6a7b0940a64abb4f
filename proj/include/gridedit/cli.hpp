#pragma once

// Command-line front end. Verbs:
//
//   generate-data  procedural dataset on disk
//   train          train a model (procedural stream or dataset train split)
//   sample         edit one prompt directory
//   evaluate       fidelity report on a dataset's validation split
//   ablate         train and evaluate the four ablation legs
//   rerun          replay a run manifest and verify its artifacts
//
// Every artifact-producing verb writes run_manifest.json into its output
// directory. Exit codes: 0 ok, 1 usage, 2 validation/config/shape, 3 I/O,
// 4 numerical, 5 version mismatch.

#include <CLI11.hpp>

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "gridedit/ablation.hpp"
#include "gridedit/checkpoint.hpp"
#include "gridedit/config.hpp"
#include "gridedit/core/image_io.hpp"
#include "gridedit/dataset.hpp"
#include "gridedit/metrics.hpp"
#include "gridedit/trainer.hpp"

namespace gridedit::cli {

namespace fs = std::filesystem;

inline constexpr int kManifestVersion = 1;
inline constexpr int kReportVersion   = 1;

struct RunManifest {
    std::string command;
    std::vector<std::string> argv;  // canonical, absolute paths
    KvMap resolved_config;
    std::map<std::string, std::uint64_t> seeds;
    std::string dataset_hash;
    std::string checkpoint_hash;
    std::map<std::string, std::string> artifacts;  // path relative to the output dir -> content hash
    double wall_clock_seconds = 0.0;

    json to_json() const {
        return {{"format", "gridedit-run"},
                {"version", kManifestVersion},
                {"command", command},
                {"argv", argv},
                {"resolved_config", resolved_config},
                {"seeds", seeds},
                {"dataset_hash", dataset_hash},
                {"checkpoint_hash", checkpoint_hash},
                {"artifacts", artifacts},
                {"wall_clock_seconds", wall_clock_seconds}};
    }

    static RunManifest from_json(const json& j) {
        if (j.value("format", "") != "gridedit-run") throw ValidationError("not a gridedit run manifest");
        if (j.value("version", 0) != kManifestVersion)
            throw VersionError("run manifest version " + std::to_string(j.value("version", 0)) + " unsupported");
        RunManifest m;
        m.command         = j.at("command").get<std::string>();
        m.argv            = j.at("argv").get<std::vector<std::string>>();
        m.resolved_config = j.at("resolved_config").get<KvMap>();
        m.seeds           = j.at("seeds").get<std::map<std::string, std::uint64_t>>();
        m.dataset_hash    = j.at("dataset_hash").get<std::string>();
        m.checkpoint_hash = j.at("checkpoint_hash").get<std::string>();
        m.artifacts       = j.at("artifacts").get<std::map<std::string, std::string>>();
        m.wall_clock_seconds = j.at("wall_clock_seconds").get<double>();
        return m;
    }
};

inline std::string abs_path(const std::string& p) { return fs::absolute(fs::path(p)).lexically_normal().string(); }

inline void ensure_dir(const fs::path& p) {
    std::error_code ec;
    fs::create_directories(p, ec);
    if (ec) throw IoError("cannot create " + p.string() + ": " + ec.message());
}

// Hashes every regular file under `dir` except the manifest itself.
inline std::map<std::string, std::string> hash_artifacts(const fs::path& dir) {
    std::map<std::string, std::string> out;
    for (const auto& e : fs::recursive_directory_iterator(dir)) {
        if (!e.is_regular_file()) continue;
        const auto rel = fs::relative(e.path(), dir).generic_string();
        if (rel == "run_manifest.json" || rel.ends_with("/run_manifest.json")) continue;
        out[rel] = hex64(file_hash(e.path()));
    }
    return out;
}

inline void write_manifest(const fs::path& out_dir, RunManifest m,
                           std::chrono::steady_clock::time_point start) {
    m.artifacts          = hash_artifacts(out_dir);
    m.wall_clock_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    write_text(out_dir / "run_manifest.json", m.to_json().dump(2) + "\n");
}

// Resolved settings: defaults < config file < explicit flags.
inline KvMap layer_config(KvMap defaults, const std::string& config_path, const KvMap& explicit_flags) {
    if (!config_path.empty())
        for (const auto& [k, v] : load_kv_file(config_path)) defaults[k] = v;
    for (const auto& [k, v] : explicit_flags) defaults[k] = v;
    return defaults;
}

inline void apply_kv(const KvMap& kv, ModelConfig& model, TrainConfig& train) {
    for (const auto& [k, v] : kv)
        if (!train.apply(k, v) && !model.apply(k, v)) throw ConfigError("unknown configuration key '" + k + "'");
    model.validate();
    train.validate();
}

inline KvMap merged_kv(const ModelConfig& m, const TrainConfig& t) {
    KvMap kv = m.to_kv();
    for (const auto& [k, v] : t.to_kv()) kv[k] = v;
    return kv;
}

// ---------------------------------------------------------------------------
// Verbs

struct Context {
    std::ostream& out;
    std::ostream& err;
};

struct GenerateOptions {
    std::string out, mix = "all";
    int count = 1000, n_examples = 1, panel_size = kDefaultPanelSize;
    std::uint64_t seed = 0;
    double val_fraction = 0.1;
};

inline int cmd_generate(const GenerateOptions& o, Context& cx) {
    const auto start = std::chrono::steady_clock::now();
    const fs::path out(o.out);
    ensure_dir(out);
    const auto mix = TaskMix::parse(o.mix);
    const auto m   = make_dataset(o.count, mix, o.n_examples, out, o.seed, o.val_fraction, o.panel_size);
    RunManifest rm;
    rm.command = "generate-data";
    rm.argv    = {"generate-data", "--out", abs_path(o.out), "--count", std::to_string(o.count), "--mix", mix.to_string(),
                  "--seed", std::to_string(o.seed), "--n-examples", std::to_string(o.n_examples), "--val-fraction",
                  fmt_double(o.val_fraction), "--panel-size", std::to_string(o.panel_size)};
    rm.resolved_config = {{"count", std::to_string(o.count)},        {"task_mix", mix.to_string()},
                          {"seed", std::to_string(o.seed)},          {"n_examples", std::to_string(o.n_examples)},
                          {"val_fraction", fmt_double(o.val_fraction)}, {"panel_size", std::to_string(o.panel_size)}};
    rm.seeds        = {{"data", o.seed}};
    rm.dataset_hash = hex64(dataset_hash(out));
    write_manifest(out, rm, start);
    cx.out << "wrote " << m.records.size() << " samples (" << m.split(true).size() << " val) to " << out.string()
           << "\n";
    return kExitOk;
}

struct TrainOptions {
    std::string out, data, config, preset = "cpu", resume;
    KvMap flags;  // explicitly given settings
    int checkpoint_every = 0;
};

inline BatchSource training_source(const TrainConfig& tc, const ModelConfig& mc, const std::string& data,
                                   std::string* data_hash) {
    if (data.empty()) return procedural_batches(train_data_root(tc.seed), TaskMix::parse(tc.task_mix), tc.n_examples,
                                                mc.prompt.panel_size);
    const auto manifest = load_manifest(data);
    if (manifest.panel_size != mc.prompt.panel_size)
        throw ConfigError("dataset panel size " + std::to_string(manifest.panel_size) + " differs from model " +
                          std::to_string(mc.prompt.panel_size));
    auto pool = std::make_shared<std::vector<Sample>>(load_split(data, manifest, false));
    if (pool->empty()) throw ValidationError("dataset " + data + " has no training samples");
    if (data_hash) *data_hash = hex64(dataset_hash(data));
    return pool_batches(pool, splitmix64(tc.seed ^ 0xda7aULL));
}

inline json step_record(const StepStats& st) {
    return {{"step", st.step},           {"loss", st.loss},           {"lr", st.lr},
            {"grad_norm", st.grad_norm}, {"cond_drops", st.cond_drops}, {"cond_draws", st.cond_draws},
            {"box_drops", st.box_drops}, {"box_draws", st.box_draws}};
}

inline int cmd_train(const TrainOptions& o, Context& cx) {
    const auto start = std::chrono::steady_clock::now();
    const fs::path out(o.out);
    ensure_dir(out);
    std::unique_ptr<Trainer> tr;
    ModelConfig mc;
    TrainConfig tc;
    if (!o.resume.empty()) {
        tr = load_checkpoint(o.resume);
        for (const auto& [k, v] : o.flags) {
            if (k == "train.steps")
                tr->set_step_budget(kv_int(k, v));
            else if (k == "train.log_every")
                tr->set_log_every(kv_int(k, v));
            else
                throw ConfigError("only train.steps and train.log_every may change on resume, got " + k);
        }
        mc = tr->model().config();
        tc = tr->config();
    } else {
        mc                = ModelConfig::preset(o.preset);
        const KvMap kv    = layer_config(merged_kv(mc, tc), o.config, o.flags);
        apply_kv(kv, mc, tc);
        tr = std::make_unique<Trainer>(mc, tc);
    }
    std::string data_hash;
    const BatchSource src = training_source(tc, tr->model().config(), o.data, &data_hash);

    const bool append = !o.resume.empty() && fs::exists(out / "train_log.jsonl");
    std::ofstream log(out / "train_log.jsonl", append ? std::ios::app : std::ios::trunc);
    if (!log) throw IoError("cannot open " + (out / "train_log.jsonl").string());
    StepStats window;
    int in_window = 0;
    double loss_acc = 0.0, gn_acc = 0.0;
    try {
        while (tr->step() < tc.steps) {
            const StepStats st = tr->step_once(src);
            loss_acc += st.loss, gn_acc += st.grad_norm, ++in_window;
            window.cond_drops += st.cond_drops, window.cond_draws += st.cond_draws;
            window.box_drops += st.box_drops, window.box_draws += st.box_draws;
            if (tr->step() % tc.log_every == 0 || tr->step() == tc.steps) {
                window.step      = tr->step();
                window.loss      = loss_acc / in_window;
                window.grad_norm = gn_acc / in_window;
                window.lr        = st.lr;
                log << step_record(window).dump() << "\n";
                log.flush();
                window   = {};
                in_window = 0, loss_acc = 0.0, gn_acc = 0.0;
            }
            if (o.checkpoint_every > 0 && tr->step() % o.checkpoint_every == 0 && tr->step() < tc.steps)
                save_checkpoint(out / ("checkpoint_" + std::to_string(tr->step()) + ".ckpt"), *tr);
        }
    } catch (const NumericalError& e) {
        json dump{{"error", e.what()}, {"step", tr->step()}, {"config", merged_kv(tr->model().config(), tc)}};
        write_text(out / "diagnostic.json", dump.dump(2) + "\n");
        throw;
    }
    log.close();
    save_checkpoint(out / "checkpoint.ckpt", *tr);
    write_text(out / "resolved_config.txt", dump_kv(merged_kv(tr->model().config(), tc)));

    RunManifest rm;
    rm.command = "train";
    rm.argv    = {"train", "--out", abs_path(o.out)};
    if (!o.data.empty()) rm.argv.insert(rm.argv.end(), {"--data", abs_path(o.data)});
    if (!o.resume.empty()) {
        rm.argv.insert(rm.argv.end(), {"--resume", abs_path(o.resume)});
        for (const auto& [k, v] : o.flags) rm.argv.insert(rm.argv.end(), {"--set", k + "=" + v});
    } else {
        // Fully resolved settings, so the replay does not depend on the config file.
        for (const auto& [k, v] : merged_kv(mc, tc)) rm.argv.insert(rm.argv.end(), {"--set", k + "=" + v});
    }
    if (o.checkpoint_every > 0) rm.argv.insert(rm.argv.end(), {"--checkpoint-every", std::to_string(o.checkpoint_every)});
    rm.resolved_config = merged_kv(tr->model().config(), tc);
    rm.seeds           = {{"root", tc.seed}};
    rm.dataset_hash    = data_hash;
    rm.checkpoint_hash = hex64(file_hash(out / "checkpoint.ckpt"));
    write_manifest(out, rm, start);
    cx.out << "trained to step " << tr->step() << "; checkpoint " << (out / "checkpoint.ckpt").string() << "\n";
    return kExitOk;
}

// Reference models usable wherever a checkpoint path is expected.
inline bool is_pseudo_checkpoint(const std::string& c) { return c == "oracle" || c == "identity"; }

struct LoadedModel {
    std::unique_ptr<GridModel<float>> model;
    InferenceOptions options;
    std::string hash;
    EditModel edit;
};

inline LoadedModel load_model(const std::string& checkpoint, bool use_ema, std::optional<double> guidance,
                              int sampler_steps, const std::string& sampler) {
    LoadedModel lm;
    if (checkpoint == "oracle") {
        lm.edit = oracle_model();
        lm.hash = "oracle";
        return lm;
    }
    if (checkpoint == "identity") {
        lm.edit = identity_model();
        lm.hash = "identity";
        return lm;
    }
    auto tr = load_checkpoint(checkpoint);
    lm.model = use_ema ? tr->ema_model() : std::make_unique<GridModel<float>>(tr->model().config(), tr->config().seed);
    if (!use_ema) {
        auto& dst = lm.model->params().items();
        for (std::size_t i = 0; i < dst.size(); ++i)
            dst[i].second.mutable_value() = tr->model().params().items()[i].second.value();
    }
    lm.options              = tr->inference_options(sampler_steps);
    lm.options.sampler.kind = sampler_kind_from_string(sampler);
    if (guidance) lm.options.guidance.scale = *guidance;
    lm.hash           = hex64(file_hash(checkpoint));
    const auto* model = lm.model.get();
    const auto opts   = lm.options;
    lm.edit           = [model, opts](const EditRequest& r) { return model->edit(r, opts); };
    return lm;
}

struct SampleOptions {
    std::string checkpoint, prompt, out, sampler = "deterministic";
    std::optional<double> guidance;
    int steps          = 25;
    std::uint64_t seed = 0;
    bool no_ema        = false;
};

// Reads e0.png, e0_edit.png, ..., query.png and optional boxes.json and task.json
// (the latter is read only by the oracle).
inline EditRequest read_prompt_dir(const fs::path& dir) {
    if (!fs::is_directory(dir)) throw ValidationError("prompt directory " + dir.string() + " does not exist");
    EditRequest r;
    int n = 0;
    while (fs::exists(dir / example_file(n, false)) || fs::exists(dir / example_file(n, true))) ++n;
    std::vector<std::string> missing;
    if (n == 0) missing.push_back(example_file(0, false)), missing.push_back(example_file(0, true));
    for (int i = 0; i < n; ++i)
        for (bool edited : {false, true})
            if (!fs::exists(dir / example_file(i, edited))) missing.push_back(example_file(i, edited));
    if (!fs::exists(dir / "query.png")) missing.push_back("query.png");
    if (!missing.empty()) {
        std::string list;
        for (const auto& m : missing) list += (list.empty() ? "" : ", ") + m;
        throw ValidationError("prompt directory " + dir.string() + " is missing " + list +
                              " (expected e<i>.png, e<i>_edit.png for i = 0..n-1, and query.png)");
    }
    validate_example_count(n);
    for (int i = 0; i < n; ++i) {
        r.examples.push_back({read_png(dir / example_file(i, false)), PanelRole::example});
        r.examples.push_back({read_png(dir / example_file(i, true)), PanelRole::transformed_example});
    }
    r.query = {read_png(dir / "query.png"), PanelRole::query};
    if (fs::exists(dir / "boxes.json")) {
        try {
            r.boxes = boxes_from_json(json::parse(read_text(dir / "boxes.json")));
        } catch (const json::exception& e) {
            throw ValidationError("malformed boxes.json: " + std::string(e.what()));
        }
        if (!r.boxes.empty() && r.boxes.size() != r.examples.size())
            throw ValidationError("boxes.json has " + std::to_string(r.boxes.size()) + " entries, expected " +
                                  std::to_string(r.examples.size()));
    }
    if (fs::exists(dir / "task.json")) {
        try {
            r.truth = task_from_json(json::parse(read_text(dir / "task.json")));
        } catch (const json::exception& e) {
            throw ValidationError("malformed task.json: " + std::string(e.what()));
        }
    }
    r.validate();
    return r;
}

// Two grids side by side with a dark gutter.
inline Image side_by_side(const Image& a, const Image& b, int gutter = 2) {
    Image out(std::max(a.height, b.height), a.width + gutter + b.width, 3, 0.1f);
    for (int y = 0; y < a.height; ++y)
        for (int x = 0; x < a.width; ++x)
            for (int c = 0; c < 3; ++c) out.at(y, x, c) = a.at(y, x, c);
    for (int y = 0; y < b.height; ++y)
        for (int x = 0; x < b.width; ++x)
            for (int c = 0; c < 3; ++c) out.at(y, a.width + gutter + x, c) = b.at(y, x, c);
    return out;
}

inline int cmd_sample(const SampleOptions& o, Context& cx) {
    const auto start = std::chrono::steady_clock::now();
    EditRequest req  = read_prompt_dir(o.prompt);
    req.seed         = o.seed;
    auto lm          = load_model(o.checkpoint, !o.no_ema, o.guidance, o.steps, o.sampler);
    const fs::path out(o.out);
    ensure_dir(out);
    const Image result = lm.edit(req);
    const Image input  = req.grid();
    std::vector<Panel> panels = req.examples;
    panels.push_back(req.query);
    panels.push_back({result, PanelRole::target});
    const Image filled = compose(panels, req.n_examples());
    write_png(out / "input_grid.png", input);
    write_png(out / "output.png", result);
    write_png(out / "contact_sheet.png", side_by_side(input, filled));

    RunManifest rm;
    rm.command = "sample";
    rm.argv    = {"sample", "--checkpoint", is_pseudo_checkpoint(o.checkpoint) ? o.checkpoint : abs_path(o.checkpoint),
                  "--prompt", abs_path(o.prompt), "--out", abs_path(o.out), "--steps", std::to_string(o.steps),
                  "--seed", std::to_string(o.seed), "--sampler", o.sampler};
    if (o.guidance) rm.argv.insert(rm.argv.end(), {"--guidance", fmt_double(*o.guidance)});
    if (o.no_ema) rm.argv.push_back("--no-ema");
    rm.resolved_config = {{"guidance", fmt_double(lm.options.guidance.scale)},
                          {"steps", std::to_string(lm.options.sampler.steps)},
                          {"sampler", to_string(lm.options.sampler.kind)},
                          {"n_examples", std::to_string(req.n_examples())}};
    rm.seeds           = {{"sampler", o.seed}};
    rm.checkpoint_hash = lm.hash;
    write_manifest(out, rm, start);
    cx.out << "wrote " << (out / "output.png").string() << "\n";
    return kExitOk;
}

struct EvaluateOptions {
    std::string checkpoint, data, out, extractor = "fixed_random_conv", sampler = "deterministic";
    std::optional<double> guidance;
    int steps = 25, count = 256;
    std::uint64_t extractor_seed = 0, seed = 0;
    bool no_ema = false;
};

inline json report_json(const FidelityReport& r) {
    return {{"delta_prompt", r.delta_prompt},
            {"delta_image", r.delta_image},
            {"per_task_mae", r.per_task_mae},
            {"per_task_count", r.per_task_count},
            {"mean_mae", r.mean_mae},
            {"direction_similarity", r.direction_similarity},
            {"direction_excluded", r.direction_excluded},
            {"samples", r.samples},
            {"extractor", r.extractor},
            {"extractor_seed", r.extractor_seed}};
}

inline std::string report_table(const FidelityReport& r) {
    std::ostringstream os;
    os << std::fixed << std::setprecision(6);
    os << "samples               " << r.samples << "\n"
       << "extractor             " << r.extractor << " (seed " << r.extractor_seed << ")\n"
       << "delta_prompt          " << r.delta_prompt << "\n"
       << "delta_image           " << r.delta_image << "\n"
       << "direction_similarity  " << r.direction_similarity << " (" << r.direction_excluded << " excluded)\n"
       << "mean_mae              " << r.mean_mae << "\n";
    for (const auto& [k, v] : r.per_task_mae)
        os << "  mae " << std::left << std::setw(18) << k << v << "  (n=" << r.per_task_count.at(k) << ")\n";
    return os.str();
}

inline int cmd_evaluate(const EvaluateOptions& o, Context& cx) {
    const auto start = std::chrono::steady_clock::now();
    if (o.count < 1) throw ConfigError("--count must be positive");
    const auto manifest = load_manifest(o.data);
    auto records        = manifest.split(true);
    if (records.empty()) throw ValidationError("dataset " + o.data + " has no validation samples");
    if (static_cast<int>(records.size()) > o.count) records.resize(static_cast<std::size_t>(o.count));
    std::vector<Sample> set;
    for (const auto* r : records) set.push_back(load_sample(o.data, manifest, *r));
    auto lm = load_model(o.checkpoint, !o.no_ema, o.guidance, o.steps, o.sampler);
    if (lm.model && lm.model->config().prompt.panel_size != manifest.panel_size)
        throw VersionError("checkpoint panel size does not match dataset panel size");
    const FeatureExtractor fx(extractor_kind_from_string(o.extractor), o.extractor_seed);
    const FidelityReport rep = evaluate_model(lm.edit, set, fx, o.seed);

    const fs::path out(o.out);
    ensure_dir(out);
    json j = report_json(rep);
    j["format"]          = "gridedit-report";
    j["version"]         = kReportVersion;
    j["checkpoint"]      = o.checkpoint;
    j["checkpoint_hash"] = lm.hash;
    j["guidance"]        = lm.options.guidance.scale;
    j["sampler_steps"]   = lm.options.sampler.steps;
    write_text(out / "report.json", j.dump(2) + "\n");
    write_text(out / "report.txt", report_table(rep));

    RunManifest rm;
    rm.command = "evaluate";
    rm.argv    = {"evaluate", "--checkpoint", is_pseudo_checkpoint(o.checkpoint) ? o.checkpoint : abs_path(o.checkpoint),
                  "--data", abs_path(o.data), "--out", abs_path(o.out), "--count", std::to_string(o.count),
                  "--steps", std::to_string(o.steps), "--extractor", o.extractor, "--extractor-seed",
                  std::to_string(o.extractor_seed), "--seed", std::to_string(o.seed), "--sampler", o.sampler};
    if (o.guidance) rm.argv.insert(rm.argv.end(), {"--guidance", fmt_double(*o.guidance)});
    if (o.no_ema) rm.argv.push_back("--no-ema");
    rm.resolved_config = {{"samples", std::to_string(rep.samples)}, {"extractor", o.extractor},
                          {"guidance", fmt_double(lm.options.guidance.scale)}};
    rm.seeds           = {{"extractor", o.extractor_seed}, {"eval", o.seed}};
    rm.dataset_hash    = hex64(dataset_hash(o.data));
    rm.checkpoint_hash = lm.hash;
    write_manifest(out, rm, start);
    cx.out << report_table(rep);
    return kExitOk;
}

struct AblateOptions {
    std::string out, data, config, preset = "cpu";
    KvMap flags;
    int eval_count = 64, sampler_steps = 25;
    std::uint64_t extractor_seed = 0;
};

inline int cmd_ablate(const AblateOptions& o, Context& cx) {
    const auto start = std::chrono::steady_clock::now();
    const fs::path out(o.out);
    ensure_dir(out);
    ModelConfig mc = ModelConfig::preset(o.preset);
    TrainConfig tc;
    apply_kv(layer_config(merged_kv(mc, tc), o.config, o.flags), mc, tc);
    if (o.eval_count < 1) throw ConfigError("--eval-count must be positive");

    AblationSpec spec;
    spec.base           = mc;
    spec.train          = tc;
    spec.sampler_steps  = o.sampler_steps;
    spec.extractor_seed = o.extractor_seed;
    spec.eval_seed      = tc.seed;
    spec.out            = out;
    std::string data_hash;
    spec.source = training_source(tc, mc, o.data, &data_hash);
    if (o.data.empty()) {
        const auto mix = TaskMix::parse(tc.task_mix);
        for (int i = 0; i < o.eval_count; ++i)
            spec.eval_set.push_back(procedural_sample(heldout_data_root(tc.seed), std::uint64_t(i), mix, tc.n_examples,
                                                      mc.prompt.panel_size));
    } else {
        const auto manifest = load_manifest(o.data);
        auto records        = manifest.split(true);
        if (records.empty()) throw ValidationError("dataset " + o.data + " has no validation samples");
        if (static_cast<int>(records.size()) > o.eval_count) records.resize(static_cast<std::size_t>(o.eval_count));
        for (const auto* r : records) spec.eval_set.push_back(load_sample(o.data, manifest, *r));
    }
    std::ofstream log(out / "ablation_log.jsonl");
    const auto results = run_ablation_matrix(spec, [&](const LegProgress& p) {
        if ((p.stats.step + 1) % tc.log_every == 0) {
            json rec   = step_record(p.stats);
            rec["leg"] = p.leg;
            log << rec.dump() << "\n";
        }
    });
    log.close();

    json legs = json::array();
    std::ostringstream table;
    table << std::fixed << std::setprecision(6);
    table << std::left << std::setw(22) << "leg" << std::setw(14) << "delta_prompt" << std::setw(14) << "delta_image"
          << std::setw(12) << "mean_mae" << "final_loss\n";
    for (const auto& r : results) {
        json l{{"name", r.name}, {"ok", r.ok}};
        if (r.ok) {
            l["report"]     = report_json(r.report);
            l["final_loss"] = r.final_loss;
            table << std::setw(22) << r.name << std::setw(14) << r.report.delta_prompt << std::setw(14)
                  << r.report.delta_image << std::setw(12) << r.report.mean_mae << r.final_loss << "\n";
        } else {
            l["error"] = r.error;
            table << std::setw(22) << r.name << "FAILED: " << r.error << "\n";
        }
        legs.push_back(l);
    }
    write_text(out / "ablation_report.json",
               json{{"format", "gridedit-ablation"}, {"version", kReportVersion}, {"legs", legs}}.dump(2) + "\n");
    write_text(out / "ablation_report.txt", table.str());

    RunManifest rm;
    rm.command = "ablate";
    rm.argv    = {"ablate", "--out", abs_path(o.out), "--preset", o.preset, "--eval-count", std::to_string(o.eval_count),
                  "--sampler-steps", std::to_string(o.sampler_steps), "--extractor-seed",
                  std::to_string(o.extractor_seed)};
    if (!o.data.empty()) rm.argv.insert(rm.argv.end(), {"--data", abs_path(o.data)});
    for (const auto& [k, v] : merged_kv(mc, tc)) rm.argv.insert(rm.argv.end(), {"--set", k + "=" + v});
    rm.resolved_config = merged_kv(mc, tc);
    rm.seeds           = {{"root", tc.seed}, {"extractor", o.extractor_seed}};
    rm.dataset_hash    = data_hash;
    write_manifest(out, rm, start);
    cx.out << table.str();
    return kExitOk;
}

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

struct RerunOptions {
    std::string manifest, out;
};

// Replays the recorded command (optionally into another directory) and
// compares every recorded artifact hash.
inline int cmd_rerun(const RerunOptions& o, Context& cx) {
    json j;
    try {
        j = json::parse(read_text(o.manifest));
    } catch (const json::exception& e) {
        throw ValidationError("malformed run manifest: " + std::string(e.what()));
    }
    const RunManifest m = RunManifest::from_json(j);
    std::vector<std::string> argv = m.argv;
    fs::path out_dir;
    for (std::size_t i = 0; i + 1 < argv.size(); ++i)
        if (argv[i] == "--out") {
            if (!o.out.empty()) argv[i + 1] = abs_path(o.out);
            out_dir = argv[i + 1];
        }
    if (out_dir.empty()) throw ValidationError("run manifest has no output directory");
    const int code = run(argv, cx.out, cx.err);
    if (code != kExitOk) return code;
    const auto now = hash_artifacts(out_dir);
    int mismatched = 0;
    for (const auto& [rel, h] : m.artifacts) {
        auto it = now.find(rel);
        if (it == now.end() || it->second != h) {
            cx.err << "artifact differs: " << rel << "\n";
            ++mismatched;
        }
    }
    if (mismatched) throw ValidationError(std::to_string(mismatched) + " artifact(s) not reproduced");
    cx.out << "reproduced " << m.artifacts.size() << " artifacts bit-exactly\n";
    return kExitOk;
}

// ---------------------------------------------------------------------------

inline void parse_set(const std::vector<std::string>& sets, KvMap& flags) {
    for (const auto& s : sets) {
        const auto eq = s.find('=');
        if (eq == std::string::npos || eq == 0) throw ConfigError("--set expects key=value, got '" + s + "'");
        flags[detail::trim(s.substr(0, eq))] = detail::trim(s.substr(eq + 1));
    }
}

inline int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"gridedit: exemplar-driven image editing by grid inpainting"};
    app.require_subcommand(1);
    app.set_help_all_flag("--help-all");
    Context cx{out, err};

    GenerateOptions gen;
    auto* g = app.add_subcommand("generate-data", "Write a procedural dataset");
    g->add_option("--out", gen.out, "Output directory")->required();
    g->add_option("--count", gen.count, "Number of samples");
    g->add_option("--mix", gen.mix, "Task mix: 'all' or kind=weight,... (weights sum to 1)");
    g->add_option("--seed", gen.seed, "Root seed");
    g->add_option("--n-examples", gen.n_examples, "Example pairs per grid (1-8)");
    g->add_option("--val-fraction", gen.val_fraction, "Validation share");
    g->add_option("--panel-size", gen.panel_size, "Panel edge in pixels");

    TrainOptions tr;
    std::vector<std::string> tr_sets;
    int tr_steps = 0, tr_batch = 0, tr_n = 0;
    double tr_lr = 0, tr_cond = 0, tr_box = 0, tr_w = 0;
    std::uint64_t tr_seed = 0;
    std::string tr_ablation, tr_mix;
    auto* t = app.add_subcommand("train", "Train a model");
    t->add_option("--out", tr.out, "Output directory")->required();
    t->add_option("--data", tr.data, "Dataset directory (procedural stream when omitted)");
    t->add_option("--config", tr.config, "key = value configuration file");
    t->add_option("--preset", tr.preset, "Model preset: cpu|desk|tiny");
    t->add_option("--resume", tr.resume, "Checkpoint to resume");
    t->add_option("--checkpoint-every", tr.checkpoint_every, "Intermediate checkpoint period");
    auto* o_steps = t->add_option("--steps", tr_steps, "Total optimization steps");
    auto* o_batch = t->add_option("--batch-size", tr_batch, "Samples per step");
    auto* o_lr    = t->add_option("--lr", tr_lr, "Learning rate");
    auto* o_seed  = t->add_option("--seed", tr_seed, "Root seed");
    auto* o_abl   = t->add_option("--ablation", tr_ablation, "Comma-separated ablation flags");
    auto* o_mix   = t->add_option("--mix", tr_mix, "Task mix for procedural data");
    auto* o_n     = t->add_option("--n-examples", tr_n, "Example pairs per grid");
    auto* o_cond  = t->add_option("--cond-dropout", tr_cond, "Condition dropout rate");
    auto* o_box   = t->add_option("--box-dropout", tr_box, "Box dropout rate");
    auto* o_w     = t->add_option("--guidance", tr_w, "Evaluation guidance scale");
    t->add_option("--set", tr_sets, "Override any key (key=value), repeatable");

    SampleOptions sm;
    auto* s = app.add_subcommand("sample", "Edit one prompt directory");
    s->add_option("--checkpoint", sm.checkpoint, "Checkpoint path, or oracle|identity")->required();
    s->add_option("--prompt", sm.prompt, "Directory with e0.png, e0_edit.png, ..., query.png")->required();
    s->add_option("--out", sm.out, "Output directory")->required();
    auto* o_sg = s->add_option("--guidance", sm.guidance, "Guidance scale");
    (void)o_sg;
    s->add_option("--steps", sm.steps, "Sampler steps");
    s->add_option("--seed", sm.seed, "Sampler seed");
    s->add_option("--sampler", sm.sampler, "deterministic|ancestral");
    s->add_flag("--no-ema", sm.no_ema, "Use raw rather than averaged weights");

    EvaluateOptions ev;
    auto* e = app.add_subcommand("evaluate", "Fidelity report on a dataset's validation split");
    e->add_option("--checkpoint", ev.checkpoint, "Checkpoint path, or oracle|identity")->required();
    e->add_option("--data", ev.data, "Dataset directory")->required();
    e->add_option("--out", ev.out, "Report directory")->required();
    e->add_option("--count", ev.count, "Maximum validation samples");
    e->add_option("--guidance", ev.guidance, "Guidance scale");
    e->add_option("--steps", ev.steps, "Sampler steps");
    e->add_option("--extractor", ev.extractor, "fixed_random_conv|flat_pixels");
    e->add_option("--extractor-seed", ev.extractor_seed, "Feature extractor seed");
    e->add_option("--seed", ev.seed, "Sampler seed root");
    e->add_option("--sampler", ev.sampler, "deterministic|ancestral");
    e->add_flag("--no-ema", ev.no_ema, "Use raw rather than averaged weights");

    AblateOptions ab;
    std::vector<std::string> ab_sets;
    auto* a = app.add_subcommand("ablate", "Train and evaluate the ablation legs");
    a->add_option("--out", ab.out, "Output directory")->required();
    a->add_option("--data", ab.data, "Dataset directory (procedural stream when omitted)");
    a->add_option("--config", ab.config, "key = value configuration file");
    a->add_option("--preset", ab.preset, "Model preset: cpu|desk|tiny");
    a->add_option("--eval-count", ab.eval_count, "Evaluation samples per leg");
    a->add_option("--sampler-steps", ab.sampler_steps, "Sampler steps at evaluation");
    a->add_option("--extractor-seed", ab.extractor_seed, "Feature extractor seed");
    a->add_option("--set", ab_sets, "Override any key (key=value), repeatable");

    RerunOptions rr;
    auto* r = app.add_subcommand("rerun", "Replay a run manifest and verify its artifacts");
    r->add_option("--manifest", rr.manifest, "run_manifest.json")->required();
    r->add_option("--out", rr.out, "Alternative output directory");

    std::vector<std::string> rev(args.rbegin(), args.rend());
    try {
        app.parse(rev);
    } catch (const CLI::CallForHelp& ex) {
        out << app.help();
        return kExitOk;
    } catch (const CLI::CallForAllHelp& ex) {
        out << app.help("", CLI::AppFormatMode::All);
        return kExitOk;
    } catch (const CLI::ParseError& ex) {
        err << "error: " << ex.what() << "\n" << "run with --help for usage\n";
        return kExitUsage;
    }

    try {
        if (g->parsed()) return cmd_generate(gen, cx);
        if (t->parsed()) {
            auto put = [&](CLI::Option* opt, const std::string& key, const std::string& v) {
                if (opt->count()) tr.flags[key] = v;
            };
            put(o_steps, "train.steps", std::to_string(tr_steps));
            put(o_batch, "train.batch_size", std::to_string(tr_batch));
            put(o_lr, "train.learning_rate", fmt_double(tr_lr));
            put(o_seed, "train.seed", std::to_string(tr_seed));
            put(o_abl, "train.ablation", tr_ablation);
            put(o_mix, "train.task_mix", tr_mix);
            put(o_n, "train.n_examples", std::to_string(tr_n));
            put(o_cond, "train.cond_dropout", fmt_double(tr_cond));
            put(o_box, "train.box_dropout", fmt_double(tr_box));
            put(o_w, "train.guidance_scale_eval", fmt_double(tr_w));
            parse_set(tr_sets, tr.flags);
            return cmd_train(tr, cx);
        }
        if (s->parsed()) return cmd_sample(sm, cx);
        if (e->parsed()) return cmd_evaluate(ev, cx);
        if (a->parsed()) {
            parse_set(ab_sets, ab.flags);
            return cmd_ablate(ab, cx);
        }
        if (r->parsed()) return cmd_rerun(rr, cx);
    } catch (const std::exception& ex) {
        err << "error: " << ex.what() << "\n";
        return exit_code(ex);
    }
    return kExitUsage;
}

}  // namespace gridedit::cli
