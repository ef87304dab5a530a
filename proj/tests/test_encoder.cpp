#include <doctest.h>

#include "lmfnet/encoder.hpp"
#include "test_util.hpp"

using namespace lmfnet;
using lmfnet_test::probe;

namespace {

bool bit_identical(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) return false;
    for (std::int64_t i = 0; i < a.numel(); ++i) {
        if (a.value_at(i) != b.value_at(i)) return false;
    }
    return true;
}

MixVisionEncoder make_tiny(ParamStore& ps, Dtype dt = Dtype::F32) {
    Rng rng(0);
    return MixVisionEncoder(EncoderConfig::tiny(), ps, "encoder", rng, dt);
}

}  // namespace

TEST_SUITE("encoder") {

TEST_CASE("pyramid scale law: 64x64 input gives 16,8,4,2 squares") {
    ParamStore ps;
    auto enc = make_tiny(ps);
    Rng rng(1);
    auto x = Tensor::randn({1, 3, 64, 64}, Dtype::F32, rng);
    auto pyr = enc.forward(x);
    const auto dims = EncoderConfig::tiny().embed_dims;
    for (int i = 0; i < 4; ++i) {
        const std::int64_t expect = 64 / (4LL << i);
        CHECK(pyr[static_cast<std::size_t>(i)].shape() == ShapeVec{1, dims[i], expect, expect});
    }
}

TEST_CASE("input geometry must be divisible by 32") {
    ParamStore ps;
    auto enc = make_tiny(ps);
    auto bad = Tensor::zeros({1, 3, 48, 64}, Dtype::F32);
    CHECK_THROWS_AS(enc.forward(bad), ShapeError);
}

TEST_CASE("batch axis passes through untouched") {
    ParamStore ps;
    auto enc = make_tiny(ps);
    Rng rng(2);
    auto one = Tensor::randn({1, 3, 32, 32}, Dtype::F32, rng);
    auto two = concat({one, one}, 0);
    auto p1 = enc.forward(one);
    auto p2 = enc.forward(two);
    for (int level = 0; level < 4; ++level) {
        const auto& a = p1[static_cast<std::size_t>(level)];
        const auto& b = p2[static_cast<std::size_t>(level)];
        REQUIRE(b.dim(0) == 2);
        const std::int64_t n = a.numel();
        for (std::int64_t i = 0; i < n; ++i) {
            CHECK(b.value_at(i) == a.value_at(i));
            CHECK(b.value_at(n + i) == a.value_at(i));
        }
    }
}

TEST_CASE("constant input yields spatially constant patch embedding in the interior") {
    ParamStore ps;
    auto enc = make_tiny(ps);
    auto x = Tensor::full({1, 3, 64, 64}, 0.7, Dtype::F32);
    std::int64_t h = 0, w = 0;
    auto tokens = enc.patch_tokens(0, x, h, w);
    REQUIRE(h == 16);
    // token (1,1) as reference; all interior tokens must match it exactly
    const std::int64_t C = tokens.dim(2);
    for (std::int64_t r = 1; r < h - 1; ++r) {
        for (std::int64_t c = 1; c < w - 1; ++c) {
            for (std::int64_t d = 0; d < C; ++d) {
                CHECK(tokens.value_at((r * w + c) * C + d) ==
                      doctest::Approx(tokens.value_at((w + 1) * C + d)).epsilon(1e-6));
            }
        }
    }
}

TEST_CASE("zero-depth stage is identity after reshape") {
    EncoderConfig cfg = EncoderConfig::tiny();
    cfg.depths = {0, 0, 0, 0};
    ParamStore ps;
    Rng rng(0);
    MixVisionEncoder enc(cfg, ps, "encoder", rng, Dtype::F32);
    Rng data_rng(5);
    auto x = Tensor::randn({1, 3, 32, 32}, Dtype::F32, data_rng);
    std::int64_t h = 0, w = 0;
    auto tokens = enc.patch_tokens(0, x, h, w);
    auto out = enc.stage_map(0, tokens, h, w);
    CHECK(bit_identical(out, tokens_to_map(tokens, h, w)));
}

TEST_CASE("weight sharing: identical modality inputs produce bit-identical pyramids") {
    ParamStore ps;
    auto enc = make_tiny(ps);
    Rng rng(7);
    auto x = Tensor::randn({1, 3, 32, 32}, Dtype::F32, rng);
    auto pyramids = enc.forward_modalities({x, x.clone()});
    for (int level = 0; level < 4; ++level) {
        CHECK(bit_identical(pyramids[0][static_cast<std::size_t>(level)],
                            pyramids[1][static_cast<std::size_t>(level)]));
    }
}

TEST_CASE("parameter count is independent of the modality count") {
    // a single parameter set serves any branch count; forwarding more
    // modalities allocates nothing new in the store
    ParamStore ps;
    auto enc = make_tiny(ps);
    const auto before = ps.total_count();
    Rng rng(8);
    auto x = Tensor::randn({1, 3, 32, 32}, Dtype::F32, rng);
    (void)enc.forward_modalities({x, x, x});
    CHECK(ps.total_count() == before);
}

TEST_CASE("eval-mode determinism") {
    ParamStore ps;
    auto enc = make_tiny(ps);
    Rng rng(9);
    auto x = Tensor::randn({1, 3, 32, 32}, Dtype::F32, rng);
    auto a = enc.forward(x);
    auto b = enc.forward(x);
    for (int level = 0; level < 4; ++level) {
        CHECK(bit_identical(a[static_cast<std::size_t>(level)], b[static_cast<std::size_t>(level)]));
    }
}

TEST_CASE("encoder block gradient at dims=8, heads=1") {
    ParamStore ps;
    Rng rng(0);
    EncoderBlock block(ps, "block", 8, 1, 2, 2, rng, Dtype::F64, 1e-5);
    Rng data_rng(11);
    auto tokens = Tensor::randn({1, 16, 8}, Dtype::F64, data_rng, 0.0, 0.5);
    tokens.set_requires_grad(true);
    std::vector<Parameter> params(ps.items().begin(), ps.items().end());
    params.push_back(Parameter{"tokens", ParamKind::Weight, tokens});
    auto f = [&]() { return probe(block.forward(tokens, 4, 4)); };
    CHECK(grad_check(f, params, 1e-5) < 1e-4);
}

}  // TEST_SUITE
