#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "gridedit/prompt.hpp"

using namespace gridedit;

namespace {

struct Encoder {
    nn::ParamStore<float> ps;
    PromptEncoder<float> enc;
    explicit Encoder(PromptConfig cfg = {}) {
        Rng rng = make_rng(11, Stream::init);
        enc     = PromptEncoder<float>(ps, cfg, rng);
    }
};

Image noise_image(int size, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<float> u(0.0f, 1.0f);
    Image img(size, size, 3);
    for (auto& v : img.pixels) v = u(rng);
    return img;
}

VisualPrompt make_prompt(int n, std::uint64_t seed) {
    VisualPrompt p;
    for (int i = 0; i < 2 * n + 1; ++i) p.images.push_back({noise_image(32, seed + i), PanelRole::example});
    return p;
}

double max_abs_diff(const std::vector<float>& a, const std::vector<float>& b) {
    double m = 0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(double(a[i]) - double(b[i])));
    return m;
}

template <class Buf>
std::vector<float> vec(const Buf& b) {
    return {b.begin(), b.end()};
}

}  // namespace

TEST(Prompt, TokenizeShapesAndDeterminism) {
    Encoder e;
    const Image img = noise_image(32, 1);
    const auto a    = e.enc.tokenize_image(img);
    EXPECT_EQ(a.shape(), (ag::Shape{16, 64}));
    EXPECT_EQ(a.value(), e.enc.tokenize_image(img).value());
    const auto zeros = e.enc.tokenize_image(Image(32, 32, 3, 0.0f));
    const auto ones  = e.enc.tokenize_image(Image(32, 32, 3, 1.0f));
    EXPECT_GT(max_abs_diff(vec(zeros.value()), vec(ones.value())), 0.0);
    EXPECT_THROW(e.enc.tokenize_image(Image(16, 16, 3)), ShapeError);
}

TEST(Prompt, FourierFeatures) {
    const std::vector<double> zero{0.0};
    const auto f0 = fourier_features(zero, 8);
    ASSERT_EQ(f0.size(), 16u);
    for (int k = 0; k < 8; ++k) {
        EXPECT_EQ(f0[k], 0.0);
        EXPECT_EQ(f0[8 + k], 1.0);
    }
    for (int freqs : {1, 8}) {
        for (double p : {0.13, 0.5, 0.77}) {
            const std::vector<double> a{p}, b{p + 2.0};
            const auto fa = fourier_features(a, freqs), fb = fourier_features(b, freqs);
            for (std::size_t i = 0; i < fa.size(); ++i) EXPECT_NEAR(fa[i], fb[i], 1e-12);
        }
    }
    const std::vector<double> four{0.1, 0.2, 0.3, 0.4};
    EXPECT_EQ(fourier_features(four, 8).size(), 64u);
}

TEST(Prompt, DefaultBoxCoversImage) {
    const BoundingBox b = BoundingBox::full();
    EXPECT_EQ(b.alpha_min, 0.0);
    EXPECT_EQ(b.beta_min, 0.0);
    EXPECT_EQ(b.alpha_max, 1.0);
    EXPECT_EQ(b.beta_max, 1.0);
}

TEST(Prompt, BoxValidation) {
    Encoder e;
    EXPECT_THROW(e.enc.encode_box({-0.1, 0, 1, 1}), ValidationError);
    EXPECT_THROW(e.enc.encode_box({0, 0, 1.2, 1}), ValidationError);
    EXPECT_THROW(e.enc.encode_box({0.6, 0, 0.5, 1}), ValidationError);
    EXPECT_THROW(e.enc.encode_box({0, 0, 1, std::nan("")}), ValidationError);
    EXPECT_EQ(e.enc.encode_box(BoundingBox::full()).shape(), (ag::Shape{1, 64}));
}

TEST(Prompt, BoxEncodingFiniteOverSweep) {
    Encoder e;
    ag::NoGradGuard ng;
    for (int i = 0; i < 100; ++i)
        for (int j = 0; j < 100; ++j) {
            const double a = i / 99.0, b = j / 99.0;
            const auto tok = e.enc.encode_box({a * 0.5, b * 0.5, 0.5 + a * 0.5, 0.5 + b * 0.5});
            for (float v : tok.value()) ASSERT_TRUE(std::isfinite(v));
        }
}

TEST(Prompt, ContextLength) {
    Encoder e;
    EXPECT_EQ(e.enc.config().context_length(1), 3 * 16 + 2);
    const auto c1 = e.enc.fuse_context(make_prompt(1, 5));
    EXPECT_EQ(c1.length(), 50);
    EXPECT_EQ(c1.width(), 64);
    const auto c2 = e.enc.fuse_context(make_prompt(2, 5));
    EXPECT_EQ(c2.length(), 5 * 16 + 4);
    EXPECT_EQ(c2.length(), e.enc.config().context_length(2));
}

TEST(Prompt, DroppedBoxesEqualFullBoxes) {
    Encoder e;
    VisualPrompt p = make_prompt(1, 7);
    p.boxes        = {BoundingBox{0.1, 0.2, 0.5, 0.6}, BoundingBox{0.3, 0.3, 0.9, 0.8}};
    VisualPrompt full = p;
    full.boxes        = {BoundingBox::full(), BoundingBox::full()};
    VisualPrompt none = p;
    none.boxes.clear();
    const auto dropped = e.enc.fuse_context(p, {true, true});
    EXPECT_EQ(dropped.tokens.value(), e.enc.fuse_context(full).tokens.value());
    EXPECT_EQ(dropped.tokens.value(), e.enc.fuse_context(none).tokens.value());
    const auto kept = e.enc.fuse_context(p, {false, false});
    EXPECT_GT(max_abs_diff(vec(kept.tokens.value()), vec(dropped.tokens.value())), 0.0);
    EXPECT_EQ(kept.tokens.value(), e.enc.fuse_context(p).tokens.value());
}

TEST(Prompt, Validation) {
    Encoder e;
    VisualPrompt p = make_prompt(1, 9);
    p.boxes        = {BoundingBox::full()};
    EXPECT_THROW(e.enc.fuse_context(p), ValidationError);
    VisualPrompt even = make_prompt(1, 9);
    even.images.pop_back();
    EXPECT_THROW(e.enc.fuse_context(even), ValidationError);
    EXPECT_THROW(e.enc.fuse_context(make_prompt(1, 9), {true}), ValidationError);
}

TEST(Prompt, ConditionDropoutRates) {
    Encoder e;
    const auto ctx = e.enc.fuse_context(make_prompt(1, 3));
    Rng rng        = make_rng(5, Stream::dropout);
    for (int i = 0; i < 100; ++i) {
        EXPECT_TRUE(drop_condition(ctx, 0.0, rng).has_value());
        EXPECT_FALSE(drop_condition(ctx, 1.0, rng).has_value());
    }
    const int n = 10000;
    const double p = 0.05;
    int dropped    = 0;
    for (int i = 0; i < n; ++i) dropped += !drop_condition(ctx, p, rng).has_value();
    const double sigma = std::sqrt(n * p * (1 - p));
    EXPECT_LE(std::abs(dropped - n * p), 3 * sigma);
    EXPECT_THROW(drop_condition(ctx, 1.5, rng), ConfigError);
}

TEST(Prompt, BoxDropoutRate) {
    Rng rng           = make_rng(6, Stream::dropout);
    const double rate = 0.3;
    int dropped = 0, total = 0;
    for (int i = 0; i < 5000; ++i) {
        for (bool d : sample_box_drops(2, rate, rng)) dropped += d;
        total += 2;
    }
    const double sigma = std::sqrt(total * rate * (1 - rate));
    EXPECT_LE(std::abs(dropped - total * rate), 3 * sigma);
    EXPECT_THROW(sample_box_drops(2, -0.1, rng), ConfigError);
}
