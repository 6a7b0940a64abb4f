#include <gtest/gtest.h>

#include "gradcheck.hpp"
#include "gridedit/core/autograd.hpp"

namespace ag = gridedit::ag;
using gradcheck::param;
using V    = ag::Var<double>;
using Args = std::vector<V>;

namespace {

constexpr double kTol = 1e-5;

std::mt19937_64& rng() {
    static std::mt19937_64 r(1234);
    return r;
}

void expect_grad(const std::function<V(const Args&)>& f, Args in, double tol = kTol) {
    const auto r = gradcheck::check(f, std::move(in));
    EXPECT_GT(r.checked, 0u);
    EXPECT_LT(r.max_rel, tol);
}

}  // namespace

TEST(Autograd, AddSubScale) {
    expect_grad([](const Args& a) { return ag::add(a[0], a[1]); }, {param({3, 4}, rng()), param({3, 4}, rng())});
    expect_grad([](const Args& a) { return ag::sub(a[0], a[1]); }, {param({3, 4}, rng()), param({3, 4}, rng())});
    expect_grad([](const Args& a) { return ag::scale(a[0], 2.5); }, {param({5}, rng())});
}

TEST(Autograd, Activations) {
    expect_grad([](const Args& a) { return ag::silu(a[0]); }, {param({20}, rng(), 2.0)});
    expect_grad([](const Args& a) { return ag::gelu(a[0]); }, {param({20}, rng(), 2.0)});
}

TEST(Autograd, AddChannel) {
    expect_grad([](const Args& a) { return ag::add_channel(a[0], a[1]); }, {param({3, 2, 2}, rng()), param({3}, rng())});
    expect_grad([](const Args& a) { return ag::add_channel(a[0], a[1]); }, {param({4, 3}, rng()), param({3}, rng())});
}

TEST(Autograd, Linear) {
    expect_grad([](const Args& a) { return ag::linear(a[0], a[1], &a[2]); },
                {param({5, 4}, rng()), param({3, 4}, rng()), param({3}, rng())});
    expect_grad([](const Args& a) { return ag::linear(a[0], a[1]); }, {param({2, 6}, rng()), param({4, 6}, rng())});
}

TEST(Autograd, Conv2d) {
    expect_grad([](const Args& a) { return ag::conv2d(a[0], a[1], &a[2], 3, 1, 1); },
                {param({2, 5, 5}, rng()), param({3, 2 * 9}, rng()), param({3}, rng())});
    expect_grad([](const Args& a) { return ag::conv2d(a[0], a[1], &a[2], 3, 2, 1); },
                {param({2, 6, 6}, rng()), param({4, 2 * 9}, rng()), param({4}, rng())});
    expect_grad([](const Args& a) { return ag::conv2d(a[0], a[1], &a[2], 1, 1, 0); },
                {param({3, 4, 4}, rng()), param({2, 3}, rng()), param({2}, rng())});
}

TEST(Autograd, Conv2dMatchesDirectSum) {
    std::mt19937_64 r(5);
    V x = param({2, 4, 5}, r), w = param({3, 18}, r), b = param({3}, r);
    V y = ag::conv2d(x, w, &b, 3, 1, 1);
    ASSERT_EQ(y.shape(), (ag::Shape{3, 4, 5}));
    for (int o = 0; o < 3; ++o)
        for (int yy = 0; yy < 4; ++yy)
            for (int xx = 0; xx < 5; ++xx) {
                double acc = b.value()[o];
                for (int c = 0; c < 2; ++c)
                    for (int ky = 0; ky < 3; ++ky)
                        for (int kx = 0; kx < 3; ++kx) {
                            const int sy = yy + ky - 1, sx = xx + kx - 1;
                            if (sy < 0 || sy >= 4 || sx < 0 || sx >= 5) continue;
                            acc += w.value()[o * 18 + c * 9 + ky * 3 + kx] * x.value()[(c * 4 + sy) * 5 + sx];
                        }
                EXPECT_NEAR(y.value()[(o * 4 + yy) * 5 + xx], acc, 1e-12);
            }
}

TEST(Autograd, Norms) {
    expect_grad([](const Args& a) { return ag::group_norm(a[0], a[1], a[2], 2); },
                {param({4, 3, 3}, rng()), param({4}, rng()), param({4}, rng())});
    expect_grad([](const Args& a) { return ag::layer_norm(a[0], a[1], a[2]); },
                {param({3, 6}, rng()), param({6}, rng()), param({6}, rng())});
}

TEST(Autograd, GroupNormStatistics) {
    std::mt19937_64 r(9);
    V x     = param({4, 5, 5}, r, 3.0);
    V gamma = V::constant(ag::Buffer<double>(4, 1.0), {4});
    V beta  = V::constant(ag::Buffer<double>(4, 0.0), {4});
    V y     = ag::group_norm(x, gamma, beta, 2, 0.0);
    for (int g = 0; g < 2; ++g) {
        double m = 0, v = 0;
        for (int i = 0; i < 50; ++i) m += y.value()[g * 50 + i] / 50;
        for (int i = 0; i < 50; ++i) v += (y.value()[g * 50 + i] - m) * (y.value()[g * 50 + i] - m) / 50;
        EXPECT_NEAR(m, 0.0, 1e-12);
        EXPECT_NEAR(v, 1.0, 1e-9);
    }
}

TEST(Autograd, Attention) {
    expect_grad([](const Args& a) { return ag::attention(a[0], a[1], a[2], 2); },
                {param({3, 4}, rng()), param({5, 4}, rng()), param({5, 4}, rng())});
    expect_grad([](const Args& a) { return ag::attention(a[0], a[0], a[0], 1); }, {param({4, 6}, rng())});
}

TEST(Autograd, AttentionRowsAreConvexCombinations) {
    std::mt19937_64 r(3);
    V q = param({2, 2}, r), k = param({3, 2}, r);
    V v = V::constant(ag::Buffer<double>{1, 10, 2, 20, 3, 30}, {3, 2});
    V o = ag::attention(q, k, v, 1);
    for (int i = 0; i < 2; ++i) {
        EXPECT_GE(o.value()[i * 2], 1.0);
        EXPECT_LE(o.value()[i * 2], 3.0);
        EXPECT_NEAR(o.value()[i * 2 + 1], 10.0 * o.value()[i * 2], 1e-9);
    }
}

TEST(Autograd, Layout) {
    expect_grad([](const Args& a) { return ag::to_tokens(a[0]); }, {param({3, 2, 4}, rng())});
    expect_grad([](const Args& a) { return ag::from_tokens(a[0], 2, 3); }, {param({6, 4}, rng())});
    expect_grad([](const Args& a) { return ag::concat0<double>({a[0], a[1]}); },
                {param({2, 3}, rng()), param({4, 3}, rng())});
    expect_grad([](const Args& a) { return ag::slice_rows(a[0], 1, 3); }, {param({4, 3}, rng())});
    expect_grad([](const Args& a) { return ag::upsample2x(a[0]); }, {param({2, 3, 2}, rng())});
    expect_grad([](const Args& a) { return ag::pixel_unshuffle(a[0], 2); }, {param({2, 4, 6}, rng())});
    expect_grad([](const Args& a) { return ag::pixel_shuffle(a[0], 2); }, {param({8, 2, 3}, rng())});
}

TEST(Autograd, PixelShuffleInvertsUnshuffle) {
    std::mt19937_64 r(4);
    V x = param({3, 4, 6}, r);
    V y = ag::pixel_shuffle(ag::pixel_unshuffle(x, 2), 2);
    EXPECT_EQ(y.shape(), x.shape());
    EXPECT_EQ(y.value(), x.value());
}

TEST(Autograd, Reductions) {
    expect_grad([](const Args& a) { return ag::mse(a[0], a[1]); }, {param({7}, rng()), param({7}, rng())});
    expect_grad(
        [](const Args& a) { return ag::mse(a[0], a[1], std::vector<double>{0, 1, 1, 0, 2, 0, 1}); },
        {param({7}, rng()), param({7}, rng())});
    expect_grad([](const Args& a) { return ag::sum_all(a[0]); }, {param({3, 3}, rng())});
}

TEST(Autograd, MseValue) {
    V a = V::constant(std::vector<double>{1, 2, 3, 4}, {4});
    V b = V::constant(std::vector<double>{1, 0, 3, 0}, {4});
    EXPECT_DOUBLE_EQ(ag::mse(a, b).item(), (4.0 + 16.0) / 4.0);
    EXPECT_DOUBLE_EQ(ag::mse(a, b, std::vector<double>{0, 1, 0, 0}).item(), 4.0);
    EXPECT_THROW(ag::mse(a, b, std::vector<double>{0, 0, 0, 0}), gridedit::ShapeError);
}

TEST(Autograd, SharedSubgraphAccumulates) {
    V x = V::parameter(ag::Buffer<double>{3.0}, {1});
    V y = ag::add(ag::scale(x, 2.0), ag::scale(x, 5.0));
    ag::backward(ag::sum_all(y));
    EXPECT_DOUBLE_EQ(x.grad()[0], 7.0);
}

TEST(Autograd, NoGradGuardRecordsNothing) {
    V x = V::parameter(ag::Buffer<double>{1.0, 2.0}, {2});
    ag::NoGradGuard g;
    V y = ag::scale(x, 3.0);
    EXPECT_FALSE(y.requires_grad());
}

TEST(Autograd, ShapeErrors) {
    std::mt19937_64 r(1);
    EXPECT_THROW(ag::add(param({2, 3}, r), param({3, 2}, r)), gridedit::ShapeError);
    EXPECT_THROW(ag::linear(param({2, 3}, r), param({4, 5}, r)), gridedit::ShapeError);
    EXPECT_THROW(ag::conv2d<double>(param({2, 4, 4}, r), param({3, 9}, r), nullptr, 3, 1, 1), gridedit::ShapeError);
    EXPECT_THROW(ag::group_norm(param({3, 2, 2}, r), param({3}, r), param({3}, r), 2), gridedit::ShapeError);
    EXPECT_THROW(ag::pixel_unshuffle(param({1, 3, 4}, r), 2), gridedit::ShapeError);
    EXPECT_THROW(ag::backward(param({2}, r)), gridedit::ShapeError);
    EXPECT_THROW(V::constant(ag::Buffer<double>(3), {2, 2}), gridedit::ShapeError);
}
