#include <doctest.h>

#include <cstdio>
#include <filesystem>

#include "lmfnet/checkpoint.hpp"
#include "lmfnet/model.hpp"

using namespace lmfnet;

namespace {

bool bit_identical(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) return false;
    for (std::int64_t i = 0; i < a.numel(); ++i) {
        if (a.value_at(i) != b.value_at(i)) return false;
    }
    return true;
}

}  // namespace

TEST_SUITE("model") {

TEST_CASE("parameter counts of the default configuration are frozen") {
    // the B0-style encoder and 256-wide decoder pin these integers; a change
    // here means the architecture changed
    ModelConfig cfg;
    cfg.num_modalities = 2;
    LmfNet two(cfg, 0);
    auto c2 = two.count_parameters();
    CHECK(c2.encoder == 3319392);
    CHECK(c2.decoder == 395781);
    CHECK(c2.total == 4054773);

    cfg.num_modalities = 3;
    LmfNet three(cfg, 0);
    auto c3 = three.count_parameters();
    CHECK(c3.total == 4054817);
    // the 2->3 delta sits entirely in the fusion reprojection
    CHECK(c3.total - c2.total == c3.fusion - c2.fusion);
    CHECK(c3.encoder == c2.encoder);
    CHECK(c3.decoder == c2.decoder);
}

TEST_CASE("cat_only widens the decoder by the modality count") {
    auto cfg = ModelConfig::tiny(3);
    cfg.mode = AblationMode::CatOnly;
    LmfNet model(cfg, 0);
    CHECK_FALSE(model.has_fusion());
    CHECK(model.count_parameters().fusion == 0);
    Rng rng(1);
    std::vector<Tensor> mods;
    for (int i = 0; i < 3; ++i) mods.push_back(Tensor::randn({1, 3, 32, 32}, Dtype::F32, rng));
    auto logits = model.forward(mods, ForwardCtx::eval());
    CHECK(logits.shape() == ShapeVec{1, 5, 32, 32});

    // per-level projection weights consume N*C inputs
    const auto& w0 = model.params().by_name("decoder.proj0.weight").tensor;
    CHECK(w0.dim(0) == 3 * EncoderConfig::tiny().embed_dims[0]);
}

TEST_CASE("ablation wiring for mffr_only and mfsaf_only") {
    for (auto mode : {AblationMode::MffrOnly, AblationMode::MfsafOnly}) {
        auto cfg = ModelConfig::tiny(2);
        cfg.mode = mode;
        LmfNet model(cfg, 0);
        bool has_mffr = false, has_mfsaf = false;
        for (const auto& p : model.params().items()) {
            if (p.name.find(".mffr") != std::string::npos) has_mffr = true;
            if (p.name.find(".mfsaf") != std::string::npos) has_mfsaf = true;
        }
        CHECK(has_mffr == (mode == AblationMode::MffrOnly));
        CHECK(has_mfsaf == (mode == AblationMode::MfsafOnly));
        Rng rng(2);
        auto a = Tensor::randn({1, 3, 32, 32}, Dtype::F32, rng);
        auto b = Tensor::randn({1, 3, 32, 32}, Dtype::F32, rng);
        CHECK(model.forward({a, b}, ForwardCtx::eval()).shape() == ShapeVec{1, 5, 32, 32});
    }
}

TEST_CASE("checkpoint round trip restores every value bit-exactly") {
    auto cfg = ModelConfig::tiny(2);
    LmfNet model(cfg, 42);
    const auto path = (std::filesystem::temp_directory_path() / "lmfnet_test.ckpt").string();
    save_checkpoint(model.params(), path);

    LmfNet other(cfg, 7);  // different init
    bool differs = false;
    for (std::size_t i = 0; i < model.params().items().size(); ++i) {
        if (!bit_identical(model.params().items()[i].tensor, other.params().items()[i].tensor)) {
            differs = true;
        }
    }
    CHECK(differs);
    load_checkpoint(other.params(), path);
    for (std::size_t i = 0; i < model.params().items().size(); ++i) {
        CHECK(bit_identical(model.params().items()[i].tensor, other.params().items()[i].tensor));
    }
    std::filesystem::remove(path);
}

TEST_CASE("checkpoint loading rejects a mismatched model") {
    auto cfg = ModelConfig::tiny(2);
    LmfNet model(cfg, 0);
    const auto path = (std::filesystem::temp_directory_path() / "lmfnet_test2.ckpt").string();
    save_checkpoint(model.params(), path);
    auto cfg3 = ModelConfig::tiny(3);
    LmfNet wrong(cfg3, 0);
    CHECK_THROWS_AS(load_checkpoint(wrong.params(), path), DataError);
    std::filesystem::remove(path);
}

TEST_CASE("export_features: stage shapes, weight sharing, determinism") {
    auto cfg = ModelConfig::tiny(2);
    LmfNet model(cfg, 3);
    Rng rng(5);
    auto x = Tensor::randn({1, 3, 32, 32}, Dtype::F32, rng);
    std::vector<Tensor> mods = {x, x.clone()};
    std::vector<std::string> names = {"rgb", "nirrg"};

    auto pre = model.export_features(mods, FeatureStage::PreFusion, names);
    REQUIRE(pre.size() == 8);  // 4 levels x 2 modalities
    CHECK(pre[0].label == "rgb");
    CHECK(pre[1].label == "nirrg");
    // identical inputs through shared weights give identical blocks
    for (int level = 0; level < 4; ++level) {
        CHECK(bit_identical(pre[static_cast<std::size_t>(2 * level)].values,
                            pre[static_cast<std::size_t>(2 * level + 1)].values));
    }

    auto hidden = model.export_features(mods, FeatureStage::PostReproject, names);
    const auto counts = cfg.fusion.hidden_counts();
    std::size_t expected = 0;
    for (int level = 0; level < 4; ++level) expected += static_cast<std::size_t>(counts[static_cast<std::size_t>(level)]);
    CHECK(hidden.size() == expected);
    CHECK(hidden[0].label == "hidden0");
    CHECK(hidden[0].values.shape() == ShapeVec{1, 8, 8, 8});

    auto merged = model.export_features(mods, FeatureStage::PostMerge, names);
    REQUIRE(merged.size() == 4);
    for (int level = 0; level < 4; ++level) {
        const auto& b = merged[static_cast<std::size_t>(level)];
        CHECK(b.label == "fused");
        CHECK(b.values.shape() == ShapeVec{1, EncoderConfig::tiny().embed_dims[static_cast<std::size_t>(level)],
                                           8 >> level, 8 >> level});
    }

    auto again = model.export_features(mods, FeatureStage::PostMerge, names);
    for (std::size_t i = 0; i < merged.size(); ++i) {
        CHECK(bit_identical(merged[i].values, again[i].values));
    }
}

TEST_CASE("feature dump file round trip") {
    auto cfg = ModelConfig::tiny(1);
    LmfNet model(cfg, 0);
    Rng rng(6);
    auto x = Tensor::randn({1, 3, 32, 32}, Dtype::F32, rng);
    auto blocks = model.export_features({x}, FeatureStage::PostMerge, {"dsm"});
    const auto path = (std::filesystem::temp_directory_path() / "lmfnet_feats.bin").string();
    save_feature_dump(blocks, FeatureStage::PostMerge, path);
    CHECK(std::filesystem::file_size(path) > 0);
    std::filesystem::remove(path);
}

TEST_CASE("modality count mismatch fails loudly") {
    auto cfg = ModelConfig::tiny(2);
    LmfNet model(cfg, 0);
    Rng rng(8);
    auto x = Tensor::randn({1, 3, 32, 32}, Dtype::F32, rng);
    CHECK_THROWS_AS(model.forward({x}, ForwardCtx::eval()), ShapeError);
}

}  // TEST_SUITE
