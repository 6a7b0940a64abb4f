#include <gtest/gtest.h>

#include <random>

#include "gradcheck.hpp"
#include "gridedit/denoiser.hpp"

using namespace gridedit;
using V = ag::Var<double>;

namespace {

DenoiserConfig tiny_config() {
    DenoiserConfig c;
    c.base_channels    = 8;
    c.channel_mult     = {1, 2};
    c.attention_levels = {1};
    c.middle_blocks    = 1;
    c.context_dim      = 8;
    c.time_embed_dim   = 8;
    c.heads            = 2;
    c.groups           = 2;
    c.pos_dim          = 4;
    return c;
}

template <class S>
struct Net {
    nn::ParamStore<S> ps;
    Denoiser<S> unet;
    explicit Net(const DenoiserConfig& cfg, std::uint64_t seed = 1) {
        Rng rng = make_rng(seed, Stream::init);
        unet    = Denoiser<S>(ps, cfg, rng);
    }
    // Replaces every parameter, including zero-initialized ones, with N(0, scale^2).
    void randomize(double scale, std::uint64_t seed = 2) {
        std::mt19937_64 rng(seed);
        std::normal_distribution<double> nd(0.0, scale);
        for (auto& [name, p] : ps.items())
            for (auto& v : p.mutable_value()) v = static_cast<S>(nd(rng));
    }
};

template <class S>
ag::Var<S> random_input(int c, int h, int w, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> nd;
    ag::Buffer<S> v(static_cast<std::size_t>(c) * h * w);
    for (auto& x : v) x = static_cast<S>(nd(rng));
    return ag::Var<S>::constant(std::move(v), {c, h, w});
}

template <class S>
PromptContext<S> random_context(int len, int width, std::uint64_t seed) {
    return {random_input<S>(1, len, width, seed).value().empty() ? ag::Var<S>{}
                                                                  : ag::Var<S>::constant(random_input<S>(1, len, width, seed).value(), {len, width})};
}

double max_abs_diff(const V& a, const V& b) {
    double m = 0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a.value()[i] - b.value()[i]));
    return m;
}

}  // namespace

TEST(Denoiser, OutputShapeMatchesInput) {
    Net<float> net(DenoiserConfig::cpu());
    const auto x = random_input<float>(3, 64, 64, 3);
    ag::NoGradGuard ng;
    const auto y = net.unet.denoise_step(x, 10, nullptr);
    EXPECT_EQ(y.shape(), (ag::Shape{3, 64, 64}));
}

TEST(Denoiser, ZeroOutputAtInitialization) {
    Net<double> net(tiny_config());
    const auto y = net.unet.denoise_step(random_input<double>(3, 8, 8, 4), 5, nullptr);
    for (double v : y.value()) EXPECT_EQ(v, 0.0);
}

TEST(Denoiser, ParameterCountIsStable) {
    Net<float> a(DenoiserConfig::cpu(), 1), b(DenoiserConfig::cpu(), 99);
    EXPECT_EQ(a.ps.count(), b.ps.count());
    EXPECT_EQ(a.ps.count(), 894860u);
    Net<float> tiny(tiny_config());
    EXPECT_EQ(tiny.ps.count(), 26019u);
}

TEST(Denoiser, ContextChangesOutputOfRandomNet) {
    Net<double> net(tiny_config());
    net.randomize(0.3);
    const auto x   = random_input<double>(3, 8, 8, 5);
    const auto ctx = random_context<double>(6, 8, 6);
    const auto yn  = net.unet.denoise_step(x, 7, nullptr);
    const auto yc  = net.unet.denoise_step(x, 7, &ctx);
    EXPECT_GT(max_abs_diff(yn, yc), 0.0);
}

TEST(Denoiser, NullContextEqualsLearnedNullToken) {
    Net<double> net(tiny_config());
    net.randomize(0.3);
    const auto x = random_input<double>(3, 8, 8, 7);
    const PromptContext<double> null_ctx{net.unet.null_context()};
    const auto a = net.unet.denoise_step(x, 3, nullptr);
    const auto b = net.unet.denoise_step(x, 3, &null_ctx);
    EXPECT_EQ(a.value(), b.value());
}

TEST(Denoiser, ContextIgnoredWithoutCrossAttention) {
    auto cfg                   = tiny_config();
    cfg.middle_cross_attention = false;
    Net<double> net(cfg);
    net.randomize(0.3);
    EXPECT_FALSE(net.unet.null_context().defined());
    const auto x   = random_input<double>(3, 8, 8, 8);
    const auto ctx = random_context<double>(5, 8, 9);
    EXPECT_EQ(net.unet.denoise_step(x, 2, nullptr).value(), net.unet.denoise_step(x, 2, &ctx).value());
    EXPECT_FALSE(net.unet.middle_blocks().front().has_cross_attention());
}

TEST(Denoiser, ContextWidthMismatchIsConfigError) {
    Net<double> net(tiny_config());
    const auto ctx = random_context<double>(4, 6, 1);
    EXPECT_THROW(net.unet.denoise_step(random_input<double>(3, 8, 8, 1), 1, &ctx), ConfigError);
    EXPECT_THROW(net.unet.denoise_step(random_input<double>(3, 7, 8, 1), 1, nullptr), ShapeError);
    auto bad        = tiny_config();
    bad.context_dim = 7;
    EXPECT_THROW(bad.validate(), ConfigError);
}

TEST(Denoiser, MiddleBlockIdentityWithContextAtInit) {
    Net<double> net(tiny_config());
    const auto x   = random_input<double>(3, 8, 8, 10);
    const auto ctx = random_context<double>(6, 8, 11);
    std::vector<BlockTrace<double>> tn, tc;
    net.unet.denoise_step(x, 4, nullptr, &tn);
    net.unet.denoise_step(x, 4, &ctx, &tc);
    ASSERT_EQ(tn.size(), 1u);
    EXPECT_EQ(tn[0].output.value(), tc[0].output.value());
    for (double v : tc[0].cross_attn.value()) EXPECT_EQ(v, 0.0);
}

TEST(Denoiser, MiddleBlockIsSumOfResidualBranches) {
    Net<double> net(tiny_config());
    net.randomize(0.3);
    const auto x   = random_input<double>(3, 8, 8, 12);
    const auto ctx = random_context<double>(6, 8, 13);
    std::vector<BlockTrace<double>> tr;
    net.unet.denoise_step(x, 4, &ctx, &tr);
    const auto& t = tr.front();
    double cross  = 0;
    for (std::size_t i = 0; i < t.output.size(); ++i) {
        const double sum = t.input.value()[i] + t.conv.value()[i] + t.self_attn.value()[i] + t.cross_attn.value()[i];
        EXPECT_NEAR(t.output.value()[i] - t.input.value()[i], sum - t.input.value()[i], 1e-12);
        cross = std::max(cross, std::abs(t.cross_attn.value()[i]));
    }
    EXPECT_GT(cross, 0.0);
}

TEST(Denoiser, SingleTokenSelfAttentionIsValuePath) {
    auto cfg = tiny_config();
    nn::ParamStore<double> ps;
    Rng rng = make_rng(3, Stream::init);
    UNetBlock<double> block(ps, "b", 4, 4, cfg, true, false, rng);
    std::mt19937_64 r(4);
    std::normal_distribution<double> nd(0.0, 0.5);
    for (auto& [name, p] : ps.items())
        for (auto& v : p.mutable_value()) v = nd(r);
    const auto phi  = random_input<double>(4, 1, 1, 14);
    const auto temb = ag::Var<double>::constant(random_input<double>(1, 1, 8, 15).value(), {1, 8});
    BlockTrace<double> tr;
    block.forward(phi, temb, nullptr, &tr);
    const auto after_conv = ag::add(tr.input, tr.conv);
    const auto normed     = block.self_attn_norm()(after_conv);
    const auto expected   = block.self_attn_out()(block.self_attn_value()(ag::to_tokens(normed)));
    ASSERT_EQ(expected.size(), tr.self_attn.size());
    for (std::size_t i = 0; i < expected.size(); ++i) EXPECT_NEAR(tr.self_attn.value()[i], expected.value()[i], 1e-12);
}

TEST(Denoiser, GradientsMatchFiniteDifferences) {
    Net<double> net(tiny_config());
    net.randomize(0.2);
    const auto x   = random_input<double>(3, 8, 8, 16);
    const auto eps = random_input<double>(3, 8, 8, 17);
    const auto ctx = random_context<double>(6, 8, 18);
    std::vector<V> params;
    for (auto& [name, p] : net.ps.items()) params.push_back(p);
    const auto r = gradcheck::check(
        [&](const std::vector<V>&) {
            return ag::scale(ag::mse(net.unet.denoise_step(x, 9, &ctx), eps), double(x.size()));
        },
        params, 21, 1e-4, 1e-5, 4);
    EXPECT_GE(r.checked, 100u);
    EXPECT_LT(r.max_rel, 1e-4);
}
