#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <set>

#include "gridedit/core/image_io.hpp"
#include "gridedit/dataset.hpp"

using namespace gridedit;
namespace fs = std::filesystem;

namespace {

Image constant(float v) { return Image(kDefaultPanelSize, kDefaultPanelSize, 3, v); }

fs::path scratch(const std::string& name) {
    const fs::path p = fs::temp_directory_path() / ("gridedit_test_tasks_" + name);
    fs::remove_all(p);
    return p;
}

TaskSpec spec_of(TaskKind k) {
    Rng rng = make_rng(3, Stream::data);
    return random_task(k, rng);
}

}  // namespace

TEST(Tasks, InvertIsElementwiseComplement) {
    const Image p = generate_scene(4).panel.pixels;
    const Image q = apply_transform(spec_of(TaskKind::invert_color), p);
    for (std::size_t i = 0; i < p.pixels.size(); ++i) EXPECT_EQ(q.pixels[i], 1.0f - p.pixels[i]);
}

TEST(Tasks, FlipTwiceIsIdentity) {
    const Image p     = generate_scene(5).panel.pixels;
    const TaskSpec fl = spec_of(TaskKind::hflip);
    EXPECT_EQ(apply_transform(fl, apply_transform(fl, p)).pixels, p.pixels);
    EXPECT_NE(apply_transform(fl, p).pixels, p.pixels);
}

TEST(Tasks, BrightnessClips) {
    TaskSpec s{TaskKind::brightness_shift};
    s.amount      = 0.2;
    const Image o = apply_transform(s, constant(0.9f));
    for (float v : o.pixels) EXPECT_EQ(v, 1.0f);
}

TEST(Tasks, InversesUndoTransforms) {
    for (TaskKind k : {TaskKind::invert_color, TaskKind::hflip, TaskKind::brightness_shift, TaskKind::hue_rotate}) {
        const TaskSpec s = spec_of(k);
        const auto inv   = inverse_task(s);
        ASSERT_TRUE(inv.has_value()) << to_string(k);
        Image p = constant(0.5f);
        for (int y = 0; y < p.height; ++y) p.at(y, 0, 0) = 0.3f, p.at(y, 1, 2) = 0.65f;
        const Image back = apply_transform(*inv, apply_transform(s, p));
        EXPECT_LT(mean_abs_diff(back, p), 1e-5) << to_string(k);
    }
    EXPECT_FALSE(inverse_task(spec_of(TaskKind::binarize)).has_value());
}

TEST(Tasks, SpecValidation) {
    TaskSpec s{TaskKind::binarize};
    s.amount = 1.5;
    EXPECT_THROW(apply_transform(s, constant(0.5f)), ValidationError);
    EXPECT_THROW(apply_transform(spec_of(TaskKind::invert_color), Image(32, 32, 1)), ShapeError);
    EXPECT_THROW(task_kind_from_string("sharpen"), ConfigError);
    for (TaskKind k : kAllTasks) EXPECT_EQ(task_kind_from_string(to_string(k)), k);
}

TEST(Scenes, DeterministicPerSeed) {
    EXPECT_EQ(generate_scene(42).panel.pixels.pixels, generate_scene(42).panel.pixels.pixels);
}

TEST(Scenes, DistinctAcrossSeeds) {
    std::set<std::vector<float>> seen;
    for (std::uint64_t s = 0; s < 200; ++s) seen.insert(generate_scene(s).panel.pixels.pixels);
    EXPECT_EQ(seen.size(), 200u);
}

TEST(Scenes, BoxesContainRenderedShapes) {
    for (std::uint64_t seed = 0; seed < 200; ++seed) {
        const Scene sc = generate_scene(seed);
        ASSERT_EQ(sc.boxes.size(), sc.shapes.size());
        ASSERT_GE(sc.shapes.size(), 1u);
        ASSERT_LE(sc.shapes.size(), 3u);
        EXPECT_TRUE(sc.shapes.back().key);
        for (std::size_t i = 0; i < sc.shapes.size(); ++i) {
            const auto cov = coverage(sc.shapes[i], kDefaultPanelSize, kDefaultPanelSize);
            long covered = 0;
            for (int y = 0; y < kDefaultPanelSize; ++y)
                for (int x = 0; x < kDefaultPanelSize; ++x)
                    if (cov[std::size_t(y) * kDefaultPanelSize + x] > 0.0f) {
                        ++covered;
                        ASSERT_TRUE(sc.boxes[i].contains(x, y)) << "seed " << seed << " shape " << i;
                    }
            EXPECT_GT(covered, 0);
        }
    }
}

TEST(Samples, ExamplePairsAreConsistent) {
    for (TaskKind k : kAllTasks)
        for (std::uint64_t seed = 0; seed < 10; ++seed) {
            const Sample s = make_sample(k, seed, 2);
            ASSERT_EQ(s.panels.size(), 6u);
            for (std::size_t i = 0; i < s.panels.size(); i += 2)
                EXPECT_EQ(apply_transform(s.task, s.panels[i].pixels).pixels, s.panels[i + 1].pixels.pixels);
            EXPECT_EQ(s.boxes.empty(), !is_shape_local(k));
        }
}

TEST(Samples, BoxesTightlyContainEdits) {
    for (TaskKind k : {TaskKind::recolor_shape, TaskKind::translate_shape})
        for (std::uint64_t seed = 0; seed < 100; ++seed) {
            const Sample s = make_sample(k, seed, 1);
            ASSERT_EQ(s.boxes.size(), 2u);
            const Image& before = s.panels[0].pixels;
            const PixelRect changed = changed_rect(before, s.panels[1].pixels);
            const PixelRect region  = *task_region(s.task, before);
            EXPECT_GE(iou(changed, region), 0.9) << to_string(k) << " seed " << seed;
            const BoundingBox b = region.normalized(before.width, before.height);
            EXPECT_EQ(s.boxes[0]->alpha_min, b.alpha_min);
            EXPECT_EQ(s.boxes[0]->beta_max, b.beta_max);
        }
}

TEST(Dataset, TaskMixParsing) {
    EXPECT_NO_THROW(TaskMix::parse("invert_color=0.5,hflip=0.5"));
    EXPECT_THROW(TaskMix::parse("invert_color=0.5,hflip=0.4"), ValidationError);
    EXPECT_THROW(TaskMix::parse("invert_color=x"), ConfigError);
    EXPECT_EQ(TaskMix::parse("all").weights.size(), 9u);
    const TaskMix m = TaskMix::parse("hflip=1");
    for (int i = 0; i < 20; ++i) EXPECT_EQ(procedural_sample(9, i, m, 1).task.kind, TaskKind::hflip);
}

TEST(Dataset, ByteIdenticalRegenerationAndDisjointSplits) {
    const fs::path a = scratch("a"), b = scratch("b");
    const auto ma    = make_dataset(1000, TaskMix::all(), 1, a, 77);
    make_dataset(1000, TaskMix::all(), 1, b, 77);
    EXPECT_EQ(read_text(a / "manifest.jsonl"), read_text(b / "manifest.jsonl"));
    EXPECT_EQ(dataset_hash(a), dataset_hash(b));

    const auto loaded = load_manifest(a);
    ASSERT_EQ(loaded.records.size(), 1000u);
    std::set<std::uint64_t> train, val;
    for (const auto* r : loaded.split(false)) train.insert(r->id);
    for (const auto* r : loaded.split(true)) val.insert(r->id);
    EXPECT_EQ(train.size() + val.size(), 1000u);
    for (auto id : val) EXPECT_EQ(train.count(id), 0u);
    EXPECT_GT(val.size(), 50u);
    EXPECT_LT(val.size(), 150u);

    for (std::size_t i = 0; i < loaded.records.size(); i += 37) {
        const auto& r  = loaded.records[i];
        const Sample d = load_sample(a, loaded, r);
        const Sample g = make_sample(r.task.kind, r.seed, loaded.n_examples, loaded.panel_size, r.id);
        EXPECT_EQ(g.task, r.task);
        ASSERT_EQ(d.panels.size(), g.panels.size());
        for (std::size_t p = 0; p < d.panels.size(); ++p)
            EXPECT_EQ(d.panels[p].pixels.pixels, quantize(g.panels[p].pixels).pixels);
        ASSERT_EQ(d.boxes.size(), g.boxes.size());
        for (std::size_t j = 0; j < d.boxes.size(); ++j) EXPECT_EQ(d.boxes[j]->alpha_max, g.boxes[j]->alpha_max);
    }
    fs::remove_all(a);
    fs::remove_all(b);
}

TEST(Dataset, UnwritablePathIsIoError) {
    const fs::path f = scratch("file");
    std::ofstream(f) << "x";
    EXPECT_THROW(make_dataset(2, TaskMix::all(), 1, f / "sub", 1), IoError);
    fs::remove_all(f);
}
