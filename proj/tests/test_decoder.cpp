#include <doctest.h>

#include <cmath>

#include "lmfnet/decoder.hpp"
#include "lmfnet/model.hpp"
#include "test_util.hpp"

using namespace lmfnet;
using lmfnet_test::probe;

namespace {

std::array<Tensor, 4> random_pyramid(Rng& rng, std::int64_t b, const std::array<int, 4>& chans,
                                     std::int64_t top, Dtype dt) {
    std::array<Tensor, 4> levels;
    for (int i = 0; i < 4; ++i) {
        levels[static_cast<std::size_t>(i)] =
            Tensor::randn({b, chans[static_cast<std::size_t>(i)], top >> i, top >> i}, dt, rng);
    }
    return levels;
}

}  // namespace

TEST_SUITE("decoder") {

TEST_CASE("decode_pyramid lands on (H/4, W/4)") {
    ParamStore ps;
    Rng rng(0);
    DecoderConfig cfg{32, 5};
    std::array<int, 4> chans = {8, 16, 24, 32};
    MlpDecoder dec(cfg, chans, ps, "decoder", rng, Dtype::F32);
    Rng data_rng(1);
    auto levels = random_pyramid(data_rng, 2, chans, 16, Dtype::F32);  // 64x64 input
    auto decoded = dec.decode_pyramid(levels);
    CHECK(decoded.shape() == ShapeVec{2, 32, 16, 16});
}

TEST_CASE("pyramid scale law is enforced") {
    ParamStore ps;
    Rng rng(0);
    std::array<int, 4> chans = {8, 16, 24, 32};
    MlpDecoder dec(DecoderConfig{32, 5}, chans, ps, "decoder", rng, Dtype::F32);
    Rng data_rng(2);
    auto levels = random_pyramid(data_rng, 1, chans, 16, Dtype::F32);
    levels[2] = Tensor::zeros({1, 24, 5, 5}, Dtype::F32);
    CHECK_THROWS_AS(dec.decode_pyramid(levels), ShapeError);
}

TEST_CASE("zero inputs with zero biases decode to zero") {
    ParamStore ps;
    Rng rng(0);
    std::array<int, 4> chans = {8, 16, 24, 32};
    MlpDecoder dec(DecoderConfig{32, 5}, chans, ps, "decoder", rng, Dtype::F32);
    std::array<Tensor, 4> levels;
    for (int i = 0; i < 4; ++i) {
        levels[static_cast<std::size_t>(i)] = Tensor::zeros({1, chans[static_cast<std::size_t>(i)], 16 >> i, 16 >> i}, Dtype::F32);
    }
    auto decoded = dec.decode_pyramid(levels);
    for (std::int64_t i = 0; i < decoded.numel(); ++i) CHECK(decoded.value_at(i) == 0.0);
}

TEST_CASE("classify emits logits at full resolution with the class axis") {
    ParamStore ps;
    Rng rng(0);
    std::array<int, 4> chans = {8, 16, 24, 32};
    MlpDecoder dec(DecoderConfig{32, 7}, chans, ps, "decoder", rng, Dtype::F32);
    Rng data_rng(3);
    auto decoded = Tensor::randn({2, 32, 16, 16}, Dtype::F32, data_rng);
    auto logits = dec.classify(decoded);
    CHECK(logits.shape() == ShapeVec{2, 7, 64, 64});

    // argmax map stays within the class range
    const std::int64_t plane = 64 * 64;
    for (std::int64_t b = 0; b < 2; ++b) {
        for (std::int64_t px = 0; px < plane; px += 97) {
            int best = 0;
            for (int c = 1; c < 7; ++c) {
                if (logits.value_at((b * 7 + c) * plane + px) >
                    logits.value_at((b * 7 + best) * plane + px)) {
                    best = c;
                }
            }
            CHECK(best >= 0);
            CHECK(best < 7);
        }
    }
}

TEST_CASE("constant decoded input produces spatially constant logits") {
    ParamStore ps;
    Rng rng(0);
    std::array<int, 4> chans = {8, 16, 24, 32};
    MlpDecoder dec(DecoderConfig{32, 5}, chans, ps, "decoder", rng, Dtype::F32);
    auto decoded = Tensor::full({1, 32, 8, 8}, 0.37, Dtype::F32);
    auto logits = dec.classify(decoded);
    const std::int64_t plane = 32 * 32;
    for (int c = 0; c < 5; ++c) {
        const double ref = logits.value_at(c * plane);
        for (std::int64_t px = 1; px < plane; ++px) {
            CHECK(logits.value_at(c * plane + px) == doctest::Approx(ref).epsilon(1e-6));
        }
    }
}

TEST_CASE("decoder gradient at tiny config") {
    ParamStore ps;
    Rng rng(0);
    std::array<int, 4> chans = {4, 6, 8, 10};
    MlpDecoder dec(DecoderConfig{8, 3}, chans, ps, "decoder", rng, Dtype::F64);
    Rng data_rng(5);
    auto levels = random_pyramid(data_rng, 1, chans, 8, Dtype::F64);
    std::vector<Parameter> params(ps.items().begin(), ps.items().end());
    for (int i = 0; i < 4; ++i) {
        levels[static_cast<std::size_t>(i)].set_requires_grad(true);
        params.push_back(Parameter{"level" + std::to_string(i), ParamKind::Weight,
                                   levels[static_cast<std::size_t>(i)]});
    }
    auto f = [&]() { return probe(dec.forward(levels)); };
    CHECK(grad_check(f, params, 1e-5) < 1e-4);
}

TEST_CASE("end-to-end shape law and logit finiteness") {
    auto cfg = ModelConfig::tiny(2);
    LmfNet model(cfg, 0);
    Rng rng(7);
    for (std::int64_t hw : {32, 64}) {
        auto a = Tensor::randn({1, 3, hw, hw}, Dtype::F32, rng);
        auto b = Tensor::randn({1, 3, hw, hw}, Dtype::F32, rng);
        auto logits = model.forward({a, b}, ForwardCtx::eval());
        CHECK(logits.shape() == ShapeVec{1, 5, hw, hw});
    }
    // rectangular input
    auto a = Tensor::randn({1, 3, 32, 64}, Dtype::F32, rng);
    auto b = Tensor::randn({1, 3, 32, 64}, Dtype::F32, rng);
    auto logits = model.forward({a, b}, ForwardCtx::eval());
    CHECK(logits.shape() == ShapeVec{1, 5, 32, 64});

    for (int trial = 0; trial < 100; ++trial) {
        auto m0 = Tensor::randn({1, 3, 32, 32}, Dtype::F32, rng);
        auto m1 = Tensor::randn({1, 3, 32, 32}, Dtype::F32, rng);
        auto out = model.forward({m0, m1}, ForwardCtx::eval());
        for (std::int64_t i = 0; i < out.numel(); i += 11) {
            CHECK(std::isfinite(out.value_at(i)));
        }
    }
}

}  // TEST_SUITE
