#pragma once

#include <array>
#include <string>
#include <vector>

#include "lmfnet/nn.hpp"

namespace lmfnet {

struct DecoderConfig {
    int embed_dim = 256;
    int num_classes = 5;

    void validate() const {
        if (embed_dim < 1) throw ConfigError("decoder: embed_dim must be >= 1");
        if (num_classes < 2) throw ConfigError("decoder: num_classes must be >= 2");
    }
};

// All-MLP head: per-level channel projection, bilinear resize to (H/4,W/4),
// concatenation, linear fuse, 1x1 classification, x4 logit upsample.
class MlpDecoder {
public:
    MlpDecoder() = default;
    MlpDecoder(const DecoderConfig& cfg, const std::array<int, 4>& level_channels, ParamStore& ps,
               const std::string& prefix, Rng& rng, Dtype dt);

    // four level maps (B,C_i,h_i,w_i) obeying the pyramid scale law
    Tensor decode_pyramid(const std::array<Tensor, 4>& fused) const;
    // decoded (B,embed,H/4,W/4) -> logits (B,num_classes,H,W)
    Tensor classify(const Tensor& decoded) const;
    Tensor forward(const std::array<Tensor, 4>& fused) const { return classify(decode_pyramid(fused)); }

private:
    std::array<Tensor, 4> proj_w_, proj_b_;
    Tensor fuse_w_, fuse_b_;
    Tensor cls_w_, cls_b_;
    DecoderConfig cfg_;
};

}  // namespace lmfnet
