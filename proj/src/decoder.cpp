#include "lmfnet/decoder.hpp"

namespace lmfnet {

MlpDecoder::MlpDecoder(const DecoderConfig& cfg, const std::array<int, 4>& level_channels,
                       ParamStore& ps, const std::string& prefix, Rng& rng, Dtype dt)
    : cfg_(cfg) {
    cfg_.validate();
    for (int i = 0; i < 4; ++i) {
        proj_w_[i] = init::linear_weight(ps, prefix + ".proj" + std::to_string(i) + ".weight",
                                         level_channels[static_cast<std::size_t>(i)], cfg_.embed_dim, rng, dt);
        proj_b_[i] = init::zeros_bias(ps, prefix + ".proj" + std::to_string(i) + ".bias", cfg_.embed_dim, dt);
    }
    fuse_w_ = init::linear_weight(ps, prefix + ".fuse.weight", 4 * cfg_.embed_dim, cfg_.embed_dim, rng, dt);
    fuse_b_ = init::zeros_bias(ps, prefix + ".fuse.bias", cfg_.embed_dim, dt);
    cls_w_ = init::linear_weight(ps, prefix + ".classifier.weight", cfg_.embed_dim, cfg_.num_classes, rng, dt);
    cls_b_ = init::zeros_bias(ps, prefix + ".classifier.bias", cfg_.num_classes, dt);
}

Tensor MlpDecoder::decode_pyramid(const std::array<Tensor, 4>& fused) const {
    const std::int64_t target_h = fused[0].dim(2);
    const std::int64_t target_w = fused[0].dim(3);
    for (int i = 1; i < 4; ++i) {
        if (fused[static_cast<std::size_t>(i)].dim(2) * (1 << i) != target_h ||
            fused[static_cast<std::size_t>(i)].dim(3) * (1 << i) != target_w) {
            throw ShapeError("decoder: level " + std::to_string(i) + " shape " +
                             shape_to_string(fused[static_cast<std::size_t>(i)].shape()) +
                             " breaks the pyramid scale law against level 0 " +
                             shape_to_string(fused[0].shape()));
        }
    }
    std::vector<Tensor> resized;
    resized.reserve(4);
    for (int i = 0; i < 4; ++i) {
        const auto& level = fused[static_cast<std::size_t>(i)];
        auto projected = tokens_to_map(linear(map_to_tokens(level), proj_w_[i], proj_b_[i]),
                                       level.dim(2), level.dim(3));
        resized.push_back(i == 0 ? projected : resize_bilinear(projected, target_h, target_w));
    }
    auto stacked = concat(resized, 1);  // (B, 4*embed, H/4, W/4)
    return tokens_to_map(linear(map_to_tokens(stacked), fuse_w_, fuse_b_), target_h, target_w);
}

Tensor MlpDecoder::classify(const Tensor& decoded) const {
    auto logits = tokens_to_map(linear(map_to_tokens(decoded), cls_w_, cls_b_), decoded.dim(2),
                                decoded.dim(3));
    return resize_bilinear(logits, decoded.dim(2) * 4, decoded.dim(3) * 4);
}

}  // namespace lmfnet
