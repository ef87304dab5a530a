#include <doctest.h>

#include <cmath>
#include <vector>

#include "lmfnet/tensor.hpp"

using namespace lmfnet;

#include "test_util.hpp"

using lmfnet_test::make_param;
using lmfnet_test::probe;

namespace {

// independent dense loop-nest oracle for the depthwise-over-channels conv3d
std::vector<double> conv3d_grouped_oracle(const std::vector<double>& x, const std::vector<double>& k,
                                          const std::vector<double>& bias, std::int64_t B, std::int64_t C,
                                          std::int64_t D, std::int64_t H, std::int64_t W, std::int64_t kd,
                                          std::int64_t kh, std::int64_t kw) {
    const std::int64_t pd = (kd - 1) / 2, ph = (kh - 1) / 2, pw = (kw - 1) / 2;
    std::vector<double> out(static_cast<std::size_t>(B * C * D * H * W), 0.0);
    for (std::int64_t b = 0; b < B; ++b)
        for (std::int64_t c = 0; c < C; ++c)
            for (std::int64_t od = 0; od < D; ++od)
                for (std::int64_t oh = 0; oh < H; ++oh)
                    for (std::int64_t ow = 0; ow < W; ++ow) {
                        double acc = bias[static_cast<std::size_t>(c)];
                        for (std::int64_t rd = 0; rd < kd; ++rd)
                            for (std::int64_t rh = 0; rh < kh; ++rh)
                                for (std::int64_t rw = 0; rw < kw; ++rw) {
                                    const std::int64_t id = od - pd + rd;
                                    const std::int64_t ih = oh - ph + rh;
                                    const std::int64_t iw = ow - pw + rw;
                                    if (id < 0 || id >= D || ih < 0 || ih >= H || iw < 0 || iw >= W)
                                        continue;
                                    acc += x[static_cast<std::size_t>((((b * C + c) * D + id) * H + ih) * W + iw)] *
                                           k[static_cast<std::size_t>(((c * kd + rd) * kh + rh) * kw + rw)];
                                }
                        out[static_cast<std::size_t>((((b * C + c) * D + od) * H + oh) * W + ow)] = acc;
                    }
    return out;
}

// reference align-corners=false bilinear interpolation
double bilinear_oracle(const std::vector<double>& img, std::int64_t h, std::int64_t w, std::int64_t oh,
                       std::int64_t ow, std::int64_t i, std::int64_t j) {
    auto sample = [&](double y, double x) {
        auto clamp = [](std::int64_t v, std::int64_t hi) { return std::max<std::int64_t>(0, std::min(v, hi)); };
        const std::int64_t y0 = clamp(static_cast<std::int64_t>(std::floor(y)), h - 1);
        const std::int64_t x0 = clamp(static_cast<std::int64_t>(std::floor(x)), w - 1);
        const std::int64_t y1 = clamp(y0 + 1, h - 1);
        const std::int64_t x1 = clamp(x0 + 1, w - 1);
        const double fy = std::max(0.0, y - static_cast<double>(y0));
        const double fx = std::max(0.0, x - static_cast<double>(x0));
        const double top = img[static_cast<std::size_t>(y0 * w + x0)] * (1 - fx) +
                           img[static_cast<std::size_t>(y0 * w + x1)] * fx;
        const double bot = img[static_cast<std::size_t>(y1 * w + x0)] * (1 - fx) +
                           img[static_cast<std::size_t>(y1 * w + x1)] * fx;
        return top * (1 - fy) + bot * fy;
    };
    const double sy = static_cast<double>(h) / static_cast<double>(oh);
    const double sx = static_cast<double>(w) / static_cast<double>(ow);
    double y = (static_cast<double>(i) + 0.5) * sy - 0.5;
    double x = (static_cast<double>(j) + 0.5) * sx - 0.5;
    if (y < 0) y = 0;
    if (x < 0) x = 0;
    return sample(y, x);
}

}  // namespace

TEST_SUITE("tensor") {

TEST_CASE("linear identity and sum-plus-bias") {
    auto x = Tensor::from_values({1, 2}, {1, 2}, Dtype::F64);
    auto w = Tensor::from_values({2, 2}, {1, 0, 0, 1}, Dtype::F64);
    auto b = Tensor::from_values({2}, {0, 0}, Dtype::F64);
    auto y = linear(x, w, b);
    CHECK(y.value_at(0) == doctest::Approx(1.0));
    CHECK(y.value_at(1) == doctest::Approx(2.0));

    auto x2 = Tensor::from_values({1, 2}, {1, 1}, Dtype::F64);
    auto w2 = Tensor::from_values({2, 1}, {1, 1}, Dtype::F64);
    auto b2 = Tensor::from_values({1}, {1}, Dtype::F64);
    CHECK(linear(x2, w2, b2).value_at(0) == doctest::Approx(3.0));
}

TEST_CASE("linear shape mismatch names both shapes") {
    auto x = Tensor::zeros({2, 3}, Dtype::F64);
    auto w = Tensor::zeros({4, 2}, Dtype::F64);
    CHECK_THROWS_WITH_AS(linear(x, w, Tensor()), doctest::Contains("(2,3)"), ShapeError);
}

TEST_CASE("linear gradient vs central differences") {
    Rng rng(7);
    auto x = Tensor::randn({3, 4}, Dtype::F64, rng);
    auto w = Tensor::randn({4, 5}, Dtype::F64, rng);
    auto b = Tensor::randn({5}, Dtype::F64, rng);
    std::vector<Parameter> params = {make_param("x", x), make_param("w", w), make_param("b", b)};
    auto f = [&]() { return probe(linear(x, w, b)); };
    CHECK(grad_check(f, params, 1e-5) < 1e-6);
}

TEST_CASE("layer_norm maps constant slice to shift and keeps normalized data") {
    auto x = Tensor::from_values({1, 3}, {5, 5, 5}, Dtype::F64);
    auto g = Tensor::from_values({3}, {1, 1, 1}, Dtype::F64);
    auto s = Tensor::from_values({3}, {0, 0, 0}, Dtype::F64);
    auto y = layer_norm(x, g, s, 1e-5);
    for (int i = 0; i < 3; ++i) CHECK(y.value_at(i) == doctest::Approx(0.0));

    auto x2 = Tensor::from_values({1, 2}, {-1, 1}, Dtype::F64);
    auto g2 = Tensor::from_values({2}, {1, 1}, Dtype::F64);
    auto s2 = Tensor::from_values({2}, {0, 0}, Dtype::F64);
    auto y2 = layer_norm(x2, g2, s2, 1e-12);
    CHECK(y2.value_at(0) == doctest::Approx(-1.0).epsilon(1e-5));
    CHECK(y2.value_at(1) == doctest::Approx(1.0).epsilon(1e-5));
}

TEST_CASE("layer_norm statistics on random slice") {
    Rng rng(3);
    auto x = Tensor::randn({4, 16}, Dtype::F64, rng, 2.0, 5.0);
    auto g = Tensor::full({16}, 1.0, Dtype::F64);
    auto s = Tensor::zeros({16}, Dtype::F64);
    auto y = layer_norm(x, g, s, 1e-5);
    for (int slice = 0; slice < 4; ++slice) {
        double mean = 0.0, var = 0.0;
        for (int i = 0; i < 16; ++i) mean += y.value_at(slice * 16 + i);
        mean /= 16;
        for (int i = 0; i < 16; ++i) {
            double c = y.value_at(slice * 16 + i) - mean;
            var += c * c;
        }
        var /= 16;
        CHECK(std::abs(mean) < 1e-6);
        CHECK(std::abs(var - 1.0) < 1e-3);
    }
}

TEST_CASE("layer_norm gradient") {
    Rng rng(11);
    auto x = Tensor::randn({2, 6}, Dtype::F64, rng);
    auto g = Tensor::randn({6}, Dtype::F64, rng);
    auto s = Tensor::randn({6}, Dtype::F64, rng);
    std::vector<Parameter> params = {make_param("x", x), make_param("g", g), make_param("s", s)};
    auto f = [&]() { return probe(layer_norm(x, g, s, 1e-5)); };
    CHECK(grad_check(f, params, 1e-5) < 1e-4);
}

TEST_CASE("softmax symmetry, stabilization, closed form") {
    auto a = softmax(Tensor::from_values({2}, {0, 0}, Dtype::F64), 0);
    CHECK(a.value_at(0) == doctest::Approx(0.5));
    auto b = softmax(Tensor::from_values({2}, {1000, 1000}, Dtype::F64), 0);
    CHECK(b.value_at(0) == doctest::Approx(0.5));
    CHECK(std::isfinite(b.value_at(1)));
    auto c = softmax(Tensor::from_values({2}, {0.0, std::log(3.0)}, Dtype::F64), 0);
    CHECK(c.value_at(0) == doctest::Approx(0.25));
    CHECK(c.value_at(1) == doctest::Approx(0.75));
}

TEST_CASE("softmax over a middle axis sums to one") {
    Rng rng(5);
    auto x = Tensor::randn({2, 3, 4}, Dtype::F64, rng);
    auto y = softmax(x, 1);
    for (int b = 0; b < 2; ++b) {
        for (int i = 0; i < 4; ++i) {
            double sum = 0.0;
            for (int k = 0; k < 3; ++k) sum += y.value_at((b * 3 + k) * 4 + i);
            CHECK(sum == doctest::Approx(1.0));
        }
    }
}

TEST_CASE("conv2d identity, ones kernel, and stride-m area reduction") {
    Rng rng(2);
    auto x = Tensor::randn({1, 1, 3, 3}, Dtype::F64, rng);
    auto k1 = Tensor::from_values({1, 1, 1, 1}, {1}, Dtype::F64);
    auto y1 = conv2d(x, k1, 1, 0);
    for (int i = 0; i < 9; ++i) CHECK(y1.value_at(i) == doctest::Approx(x.value_at(i)));

    auto ones = Tensor::full({1, 1, 4, 4}, 1.0, Dtype::F64);
    auto k2 = Tensor::full({1, 1, 2, 2}, 1.0, Dtype::F64);
    auto y2 = conv2d(ones, k2, 2, 0);
    CHECK(y2.shape() == ShapeVec{1, 1, 2, 2});
    for (int i = 0; i < 4; ++i) CHECK(y2.value_at(i) == doctest::Approx(4.0));

    const int m = 4;
    auto x3 = Tensor::randn({1, 2, 16, 16}, Dtype::F64, rng);
    auto k3 = Tensor::randn({2, 2, m, m}, Dtype::F64, rng);
    auto y3 = conv2d(x3, k3, m, 0);
    CHECK(y3.shape() == ShapeVec{1, 2, 4, 4});
    CHECK(y3.dim(2) * y3.dim(3) * m * m == 16 * 16);
}

TEST_CASE("conv2d rejects kernels larger than the padded input") {
    auto x = Tensor::zeros({1, 1, 4, 4}, Dtype::F64);
    auto k = Tensor::zeros({1, 1, 7, 7}, Dtype::F64);
    CHECK_THROWS_AS(conv2d(x, k, 1, 1), ShapeError);
}

TEST_CASE("conv2d gradient, with padding, stride and groups") {
    Rng rng(13);
    auto x = Tensor::randn({2, 4, 6, 5}, Dtype::F64, rng);
    auto k = Tensor::randn({4, 2, 3, 3}, Dtype::F64, rng);
    auto b = Tensor::randn({4}, Dtype::F64, rng);
    std::vector<Parameter> params = {make_param("x", x), make_param("k", k), make_param("b", b)};
    auto f = [&]() { return probe(conv2d(x, k, b, 2, 1, 2)); };
    CHECK(grad_check(f, params, 1e-5) < 1e-4);
}

TEST_CASE("grouped_conv3d identity kernel and channel isolation") {
    Rng rng(17);
    auto x = Tensor::randn({1, 3, 2, 4, 4}, Dtype::F64, rng);
    std::vector<double> delta(3 * 27, 0.0);
    for (int c = 0; c < 3; ++c) delta[c * 27 + 13] = 1.0;  // center of a 3x3x3 kernel
    auto k = Tensor::from_values({3, 1, 3, 3, 3}, delta, Dtype::F64);
    auto b = Tensor::zeros({3}, Dtype::F64);
    auto y = grouped_conv3d(x, k, b, {1, 1, 1}, 3);
    for (std::int64_t i = 0; i < x.numel(); ++i) CHECK(y.value_at(i) == doctest::Approx(x.value_at(i)));

    // perturbing channel 0 leaves other channels bit-identical
    auto k2 = Tensor::randn({3, 1, 3, 3, 3}, Dtype::F64, rng);
    auto y1 = grouped_conv3d(x, k2, b, {1, 1, 1}, 3);
    auto xp = x.clone();
    const std::int64_t plane = 2 * 4 * 4;
    for (std::int64_t i = 0; i < plane; ++i) xp.mutable_data<double>()[static_cast<std::size_t>(i)] += 3.5;
    auto y2 = grouped_conv3d(xp, k2, b, {1, 1, 1}, 3);
    for (std::int64_t i = plane; i < 3 * plane; ++i) CHECK(y1.value_at(i) == y2.value_at(i));
}

TEST_CASE("grouped_conv3d matches the loop-nest oracle exactly at float64") {
    Rng rng(19);
    auto x = Tensor::randn({2, 3, 3, 4, 5}, Dtype::F64, rng);
    auto k = Tensor::randn({3, 1, 3, 3, 3}, Dtype::F64, rng);
    auto b = Tensor::randn({3}, Dtype::F64, rng);
    auto y = grouped_conv3d(x, k, b, {1, 1, 1}, 3);
    auto expect = conv3d_grouped_oracle(x.to_vector(), k.to_vector(), b.to_vector(), 2, 3, 3, 4, 5, 3, 3, 3);
    for (std::int64_t i = 0; i < y.numel(); ++i) {
        CHECK(y.value_at(i) == doctest::Approx(expect[static_cast<std::size_t>(i)]).epsilon(1e-12));
    }
}

TEST_CASE("grouped_conv3d configuration errors") {
    auto x = Tensor::zeros({1, 3, 2, 4, 4}, Dtype::F64);
    auto k = Tensor::zeros({3, 1, 3, 3, 3}, Dtype::F64);
    CHECK_THROWS_AS(grouped_conv3d(x, k, Tensor(), {1, 1, 1}, 2), ConfigError);
    CHECK_THROWS_AS(grouped_conv3d(x, k, Tensor(), {0, 1, 1}, 3), ConfigError);
}

TEST_CASE("grouped_conv3d gradient") {
    Rng rng(23);
    auto x = Tensor::randn({1, 2, 2, 3, 3}, Dtype::F64, rng);
    auto k = Tensor::randn({2, 1, 3, 3, 3}, Dtype::F64, rng);
    auto b = Tensor::randn({2}, Dtype::F64, rng);
    std::vector<Parameter> params = {make_param("x", x), make_param("k", k), make_param("b", b)};
    auto f = [&]() { return probe(grouped_conv3d(x, k, b, {1, 1, 1}, 2)); };
    CHECK(grad_check(f, params, 1e-5) < 1e-4);
}

TEST_CASE("resize_bilinear constants, no-op, and 2x2 oracle") {
    auto c = Tensor::full({1, 1, 2, 2}, 3.25, Dtype::F64);
    auto up = resize_bilinear(c, 7, 5);
    for (std::int64_t i = 0; i < up.numel(); ++i) CHECK(up.value_at(i) == doctest::Approx(3.25));

    Rng rng(29);
    auto x = Tensor::randn({1, 2, 4, 4}, Dtype::F64, rng);
    auto same = resize_bilinear(x, 4, 4);
    for (std::int64_t i = 0; i < x.numel(); ++i) CHECK(same.value_at(i) == x.value_at(i));

    std::vector<double> quad = {0, 1, 2, 3};
    auto q = Tensor::from_values({1, 1, 2, 2}, quad, Dtype::F64);
    auto y = resize_bilinear(q, 4, 4);
    for (std::int64_t i = 0; i < 4; ++i) {
        for (std::int64_t j = 0; j < 4; ++j) {
            CHECK(y.value_at(i * 4 + j) ==
                  doctest::Approx(bilinear_oracle(quad, 2, 2, 4, 4, i, j)).epsilon(1e-12));
        }
    }
}

TEST_CASE("resize_bilinear gradient") {
    Rng rng(31);
    auto x = Tensor::randn({1, 2, 3, 3}, Dtype::F64, rng);
    std::vector<Parameter> params = {make_param("x", x)};
    auto f = [&]() { return probe(resize_bilinear(x, 5, 4)); };
    CHECK(grad_check(f, params, 1e-5) < 1e-4);
}

TEST_CASE("permute, reshape, concat, index, stack gradients") {
    Rng rng(37);
    auto x = Tensor::randn({2, 3, 4}, Dtype::F64, rng);
    auto y = Tensor::randn({2, 3, 4}, Dtype::F64, rng);
    std::vector<Parameter> params = {make_param("x", x), make_param("y", y)};
    auto f = [&]() {
        auto p = permute(x, {2, 0, 1});
        auto r = reshape(p, {4, 6});
        auto c = concat({r, reshape(permute(y, {2, 0, 1}), {4, 6})}, 1);
        auto s = stack_last({index_axis(c, 1, 0), index_axis(c, 1, 5)});
        return probe(s);
    };
    CHECK(grad_check(f, params, 1e-5) < 1e-6);
}

TEST_CASE("permute round trip is exact") {
    Rng rng(41);
    auto x = Tensor::randn({2, 3, 4, 5}, Dtype::F64, rng);
    auto y = permute(permute(x, {3, 1, 0, 2}), {2, 1, 3, 0});
    REQUIRE(y.shape() == x.shape());
    for (std::int64_t i = 0; i < x.numel(); ++i) CHECK(y.value_at(i) == x.value_at(i));
}

TEST_CASE("matmul gradient") {
    Rng rng(43);
    auto a = Tensor::randn({2, 3, 4}, Dtype::F64, rng);
    auto b = Tensor::randn({2, 4, 5}, Dtype::F64, rng);
    std::vector<Parameter> params = {make_param("a", a), make_param("b", b)};
    auto f = [&]() { return probe(matmul(a, b)); };
    CHECK(grad_check(f, params, 1e-5) < 1e-4);
}

TEST_CASE("reduce max routes gradient to the argmax only, preserving mass") {
    auto x = Tensor::from_values({2, 2}, {-1, 2, 3, 0}, Dtype::F64);
    x.set_requires_grad(true);
    auto y = reduce_max_last(x);
    CHECK(y.value_at(0) == doctest::Approx(2.0));
    CHECK(y.value_at(1) == doctest::Approx(3.0));
    sum_all(y).backward();
    CHECK(x.grad_at(0) == 0.0);
    CHECK(x.grad_at(1) == 1.0);
    CHECK(x.grad_at(2) == 1.0);
    CHECK(x.grad_at(3) == 0.0);
}

TEST_CASE("weighted merge with unit weights equals mean bit-exactly") {
    Rng rng(47);
    auto x = Tensor::randn({3, 4, 5}, Dtype::F32, rng);
    auto w = Tensor::full({5}, 1.0, Dtype::F32);
    auto b = Tensor::zeros({1}, Dtype::F32);
    auto lin = weighted_merge_last(x, w, b);
    auto mean = reduce_mean_last(x);
    for (std::int64_t i = 0; i < lin.numel(); ++i) CHECK(lin.value_at(i) == mean.value_at(i));
}

TEST_CASE("reduction and merge gradients") {
    Rng rng(53);
    auto x = Tensor::randn({2, 3, 4}, Dtype::F64, rng);
    auto w = Tensor::randn({4}, Dtype::F64, rng);
    auto b = Tensor::randn({1}, Dtype::F64, rng);
    std::vector<Parameter> params = {make_param("x", x), make_param("w", w), make_param("b", b)};
    auto f = [&]() {
        auto m = weighted_merge_last(x, w, b);
        return add(probe(m), probe(reduce_mean_last(x)));
    };
    CHECK(grad_check(f, params, 1e-5) < 1e-4);
}

TEST_CASE("dropout is identity in eval mode and rescales in train mode") {
    Rng rng(59);
    auto x = Tensor::randn({64, 64}, Dtype::F64, rng);
    auto eval_out = dropout(x, 0.5, 1234, false);
    for (std::int64_t i = 0; i < x.numel(); ++i) CHECK(eval_out.value_at(i) == x.value_at(i));

    auto t1 = dropout(x, 0.5, 1234, true);
    auto t2 = dropout(x, 0.5, 1234, true);
    std::int64_t zeros = 0;
    for (std::int64_t i = 0; i < x.numel(); ++i) {
        CHECK(t1.value_at(i) == t2.value_at(i));  // same seed, same mask
        if (t1.value_at(i) == 0.0) {
            ++zeros;
        } else {
            CHECK(t1.value_at(i) == doctest::Approx(2.0 * x.value_at(i)));
        }
    }
    CHECK(zeros > 1500);
    CHECK(zeros < 2600);
}

TEST_CASE("gelu and softmax gradients") {
    Rng rng(71);
    auto x = Tensor::randn({3, 7}, Dtype::F64, rng);
    std::vector<Parameter> params = {make_param("x", x)};
    auto fg = [&]() { return probe(gelu(x)); };
    CHECK(grad_check(fg, params, 1e-5) < 1e-6);
    auto fs = [&]() { return probe(softmax(x, 1)); };
    CHECK(grad_check(fs, params, 1e-5) < 1e-6);
    auto fd = [&]() { return probe(dropout(x, 0.5, 99, false)); };  // eval mode: identity
    CHECK(grad_check(fd, params, 1e-5) < 1e-6);
}

TEST_CASE("grad_check on sum of squares") {
    Rng rng(61);
    auto theta = Tensor::randn({5}, Dtype::F64, rng);
    std::vector<Parameter> params = {make_param("theta", theta)};
    auto f = [&]() { return sum_all(mul(theta, theta)); };
    CHECK(grad_check(f, params, 1e-5) < 1e-8);
}

TEST_CASE("gradients accumulate across separate backward passes") {
    auto x = Tensor::from_values({2}, {1, 2}, Dtype::F64);
    x.set_requires_grad(true);
    sum_all(mul(x, x)).backward();
    sum_all(mul(x, x)).backward();
    CHECK(x.grad_at(0) == doctest::Approx(4.0));
    CHECK(x.grad_at(1) == doctest::Approx(8.0));
    x.zero_grad();
    CHECK(x.grad_at(0) == 0.0);
}

TEST_CASE("forward ops are pure: same inputs give bit-identical outputs") {
    Rng rng(67);
    auto x = Tensor::randn({2, 8}, Dtype::F32, rng);
    auto w = Tensor::randn({8, 8}, Dtype::F32, rng);
    auto g = Tensor::full({8}, 1.0, Dtype::F32);
    auto s = Tensor::zeros({8}, Dtype::F32);
    auto run = [&]() { return softmax(layer_norm(linear(x, w, Tensor()), g, s, 1e-5), 1); };
    auto a = run();
    auto b = run();
    for (std::int64_t i = 0; i < a.numel(); ++i) CHECK(a.value_at(i) == b.value_at(i));
}

TEST_CASE("no implicit broadcasting: trailing-axis mismatch fails loudly") {
    auto a = Tensor::zeros({2, 3, 4, 4, 2}, Dtype::F32);
    auto b = Tensor::zeros({2, 3, 4, 4, 3}, Dtype::F32);
    CHECK_THROWS_AS(add(a, b), ShapeError);
    CHECK_THROWS_AS(mul(a, b), ShapeError);
}

TEST_CASE("no-grad guard suppresses graph construction") {
    auto x = Tensor::zeros({2}, Dtype::F64, true);
    Tensor y;
    {
        NoGradGuard guard;
        y = mul(x, x);
    }
    CHECK_FALSE(y.requires_grad());
}

}  // TEST_SUITE
