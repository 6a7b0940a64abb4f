#pragma once

// On-disk datasets:
//
//   <root>/manifest.jsonl           header line, then one record per sample
//   <root>/samples/NNNNNN/e<i>.png       E_i
//   <root>/samples/NNNNNN/e<i>_edit.png  E'_i
//   <root>/samples/NNNNNN/query.png      I
//   <root>/samples/NNNNNN/target.png     I'
//   <root>/samples/NNNNNN/boxes.json     per-example-image boxes (null where absent)
//   <root>/samples/NNNNNN/task.json      task parameters, read only by the oracle

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <nlohmann/json.hpp>
#include <sstream>
#include <string>
#include <vector>

#include "gridedit/core/image_io.hpp"
#include "gridedit/tasks.hpp"

namespace gridedit {

inline constexpr int kDatasetVersion = 1;
inline constexpr const char* kDatasetFormat = "gridedit-dataset";

using json = nlohmann::json;

// Normalized task weights; parsed from "all" or "kind=w,kind=w,...".
struct TaskMix {
    std::vector<std::pair<TaskKind, double>> weights;

    static TaskMix all() {
        TaskMix m;
        for (TaskKind k : kAllTasks) m.weights.emplace_back(k, 1.0 / double(kAllTasks.size()));
        return m;
    }

    static TaskMix single(TaskKind k) { return TaskMix{{{k, 1.0}}}; }

    static TaskMix parse(const std::string& text) {
        if (text == "all") return all();
        TaskMix m;
        std::stringstream ss(text);
        std::string item;
        while (std::getline(ss, item, ',')) {
            if (item.empty()) continue;
            const auto eq = item.find('=');
            const TaskKind k = task_kind_from_string(item.substr(0, eq));
            double w = 1.0;
            if (eq != std::string::npos) {
                try {
                    w = std::stod(item.substr(eq + 1));
                } catch (const std::exception&) {
                    throw ConfigError("bad task weight in '" + item + "'");
                }
            }
            m.weights.emplace_back(k, w);
        }
        m.validate();
        return m;
    }

    void validate() const {
        if (weights.empty()) throw ValidationError("task mix is empty");
        double sum = 0.0;
        for (const auto& [k, w] : weights) {
            if (!(w >= 0.0)) throw ValidationError("negative task weight for " + gridedit::to_string(k));
            sum += w;
        }
        if (std::abs(sum - 1.0) > 1e-6)
            throw ValidationError("task weights sum to " + std::to_string(sum) + ", expected 1");
    }

    TaskKind pick(double u) const {
        double acc = 0.0;
        for (const auto& [k, w] : weights) {
            acc += w;
            if (u < acc) return k;
        }
        for (auto it = weights.rbegin(); it != weights.rend(); ++it)
            if (it->second > 0.0) return it->first;
        return weights.back().first;
    }

    std::string to_string() const {
        std::string out;
        for (const auto& [k, w] : weights) {
            if (!out.empty()) out += ',';
            std::ostringstream os;
            os.precision(17);
            os << w;
            out += gridedit::to_string(k) + "=" + os.str();
        }
        return out;
    }
};

inline std::uint64_t sample_seed(std::uint64_t root, std::uint64_t index) {
    return splitmix64(splitmix64(root) + index);
}

inline bool is_validation(std::uint64_t seed, double val_fraction) {
    return double(splitmix64(seed ^ 0x5e1ec7ULL) % 1000000ULL) < val_fraction * 1e6;
}

// Procedural sample `index` of the stream rooted at `root`.
inline Sample procedural_sample(std::uint64_t root, std::uint64_t index, const TaskMix& mix, int n_examples,
                                int panel = kDefaultPanelSize) {
    Rng pick = make_rng(root, Stream::data, index);
    return make_sample(mix.pick(uniform01(pick)), sample_seed(root, index), n_examples, panel, index);
}

struct DatasetRecord {
    std::uint64_t id   = 0;
    std::uint64_t seed = 0;
    TaskSpec task;
    bool validation = false;
    std::string dir;
};

struct DatasetManifest {
    int version        = kDatasetVersion;
    std::uint64_t seed = 0;
    int count          = 0;
    int n_examples     = 1;
    int panel_size     = kDefaultPanelSize;
    double val_fraction = 0.1;
    TaskMix mix;
    std::vector<DatasetRecord> records;

    std::vector<const DatasetRecord*> split(bool validation) const {
        std::vector<const DatasetRecord*> out;
        for (const auto& r : records)
            if (r.validation == validation) out.push_back(&r);
        return out;
    }
};

inline json task_to_json(const TaskSpec& s) {
    json j{{"kind", to_string(s.kind)}, {"seed", s.seed}};
    switch (s.kind) {
        case TaskKind::hue_rotate:
        case TaskKind::brightness_shift:
        case TaskKind::binarize: j["amount"] = s.amount; break;
        case TaskKind::translate_shape: j["dx"] = s.dx, j["dy"] = s.dy; break;
        case TaskKind::add_border: j["width"] = s.width; [[fallthrough]];
        case TaskKind::recolor_shape: j["color"] = s.color; break;
        default: break;
    }
    return j;
}

inline TaskSpec task_from_json(const json& j) {
    TaskSpec s;
    s.kind   = task_kind_from_string(j.at("kind").get<std::string>());
    s.seed   = j.value("seed", std::uint64_t{0});
    s.amount = j.value("amount", 0.0);
    s.dx     = j.value("dx", 0);
    s.dy     = j.value("dy", 0);
    s.width  = j.value("width", 0);
    if (j.contains("color")) s.color = j.at("color").get<Rgb>();
    s.validate();
    return s;
}

inline json boxes_to_json(const std::vector<std::optional<BoundingBox>>& boxes) {
    json arr = json::array();
    for (const auto& b : boxes) {
        if (b)
            arr.push_back({b->alpha_min, b->beta_min, b->alpha_max, b->beta_max});
        else
            arr.push_back(nullptr);
    }
    return arr;
}

inline std::vector<std::optional<BoundingBox>> boxes_from_json(const json& arr) {
    std::vector<std::optional<BoundingBox>> out;
    for (const auto& b : arr) {
        if (b.is_null()) {
            out.emplace_back();
            continue;
        }
        if (!b.is_array() || b.size() != 4) throw ValidationError("box entries must be [a_min, b_min, a_max, b_max]");
        BoundingBox box{b[0].get<double>(), b[1].get<double>(), b[2].get<double>(), b[3].get<double>()};
        box.validate();
        out.push_back(box);
    }
    return out;
}

inline std::string example_file(int i, bool edited) {
    return "e" + std::to_string(i) + (edited ? "_edit.png" : ".png");
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open " + path.string() + " for writing");
    os << text;
    if (!os) throw IoError("failed writing " + path.string());
}

inline std::string read_text(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open " + path.string());
    std::ostringstream ss;
    ss << is.rdbuf();
    return ss.str();
}

inline void write_sample_dir(const std::filesystem::path& dir, const Sample& s) {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
    for (int i = 0; i < s.n_examples; ++i) {
        write_png(dir / example_file(i, false), s.panels[2 * i].pixels);
        write_png(dir / example_file(i, true), s.panels[2 * i + 1].pixels);
    }
    write_png(dir / "query.png", s.query());
    write_png(dir / "target.png", s.target());
    write_text(dir / "boxes.json", boxes_to_json(s.boxes).dump() + "\n");
    write_text(dir / "task.json", task_to_json(s.task).dump() + "\n");
}

inline json manifest_header(const DatasetManifest& m) {
    return {{"format", kDatasetFormat}, {"version", m.version},   {"seed", m.seed},
            {"count", m.count},         {"n_examples", m.n_examples}, {"panel_size", m.panel_size},
            {"val_fraction", m.val_fraction}, {"task_mix", m.mix.to_string()}};
}

inline DatasetManifest make_dataset(int count, const TaskMix& mix, int n_examples, const std::filesystem::path& out,
                                    std::uint64_t seed, double val_fraction = 0.1, int panel = kDefaultPanelSize) {
    if (count < 1) throw ConfigError("dataset count must be positive");
    if (!(val_fraction >= 0.0 && val_fraction <= 1.0)) throw ConfigError("val_fraction must be in [0,1]");
    mix.validate();
    validate_example_count(n_examples);
    DatasetManifest m;
    m.seed = seed, m.count = count, m.n_examples = n_examples, m.panel_size = panel, m.val_fraction = val_fraction;
    m.mix  = mix;
    std::error_code ec;
    std::filesystem::create_directories(out / "samples", ec);
    if (ec) throw IoError("cannot create " + (out / "samples").string() + ": " + ec.message());
    std::string lines = manifest_header(m).dump() + "\n";
    for (int i = 0; i < count; ++i) {
        const Sample s = procedural_sample(seed, std::uint64_t(i), mix, n_examples, panel);
        char name[32];
        std::snprintf(name, sizeof name, "samples/%06d", i);
        write_sample_dir(out / name, s);
        DatasetRecord r{s.id, s.seed, s.task, is_validation(s.seed, val_fraction), name};
        m.records.push_back(r);
        lines += json{{"id", r.id},
                      {"seed", r.seed},
                      {"task", task_to_json(r.task)},
                      {"split", r.validation ? "val" : "train"},
                      {"dir", r.dir}}
                     .dump() +
                 "\n";
    }
    write_text(out / "manifest.jsonl", lines);
    return m;
}

inline DatasetManifest load_manifest(const std::filesystem::path& root) {
    std::istringstream is(read_text(root / "manifest.jsonl"));
    std::string line;
    DatasetManifest m;
    if (!std::getline(is, line)) throw ValidationError("empty manifest in " + root.string());
    try {
        const json h = json::parse(line);
        if (h.value("format", "") != kDatasetFormat) throw ValidationError("not a gridedit dataset: " + root.string());
        m.version = h.at("version").get<int>();
        if (m.version != kDatasetVersion)
            throw VersionError("dataset version " + std::to_string(m.version) + " unsupported (expected " +
                               std::to_string(kDatasetVersion) + ")");
        m.seed         = h.at("seed").get<std::uint64_t>();
        m.count        = h.at("count").get<int>();
        m.n_examples   = h.at("n_examples").get<int>();
        m.panel_size   = h.at("panel_size").get<int>();
        m.val_fraction = h.at("val_fraction").get<double>();
        m.mix          = TaskMix::parse(h.at("task_mix").get<std::string>());
        while (std::getline(is, line)) {
            if (line.empty()) continue;
            const json r = json::parse(line);
            m.records.push_back({r.at("id").get<std::uint64_t>(), r.at("seed").get<std::uint64_t>(),
                                 task_from_json(r.at("task")), r.at("split").get<std::string>() == "val",
                                 r.at("dir").get<std::string>()});
        }
    } catch (const json::exception& e) {
        throw ValidationError("malformed manifest in " + root.string() + ": " + e.what());
    }
    return m;
}

inline Sample load_sample(const std::filesystem::path& root, const DatasetManifest& m, const DatasetRecord& r) {
    const auto dir = root / r.dir;
    Sample s;
    s.id = r.id, s.seed = r.seed, s.task = r.task, s.n_examples = m.n_examples;
    for (int i = 0; i < m.n_examples; ++i) {
        s.panels.push_back({read_png(dir / example_file(i, false)), PanelRole::example});
        s.panels.push_back({read_png(dir / example_file(i, true)), PanelRole::transformed_example});
    }
    s.panels.push_back({read_png(dir / "query.png"), PanelRole::query});
    s.panels.push_back({read_png(dir / "target.png"), PanelRole::target});
    try {
        s.boxes = boxes_from_json(json::parse(read_text(dir / "boxes.json")));
    } catch (const json::exception& e) {
        throw ValidationError("malformed boxes in " + dir.string() + ": " + e.what());
    }
    return s;
}

inline std::vector<Sample> load_split(const std::filesystem::path& root, const DatasetManifest& m, bool validation) {
    std::vector<Sample> out;
    for (const auto* r : m.split(validation)) out.push_back(load_sample(root, m, *r));
    return out;
}

// Content hash over the manifest and every sample file.
inline std::uint64_t dataset_hash(const std::filesystem::path& root) {
    const DatasetManifest m = load_manifest(root);
    std::uint64_t h = fnv1a(read_text(root / "manifest.jsonl"));
    for (const auto& r : m.records) {
        std::vector<std::filesystem::path> files;
        for (const auto& f : std::filesystem::directory_iterator(root / r.dir)) files.push_back(f.path());
        std::sort(files.begin(), files.end());
        for (const auto& f : files) h = fnv1a(read_text(f), h);
    }
    return h;
}

}  // namespace gridedit
