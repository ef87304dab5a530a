#pragma once

#include <string>

#include "lmfnet/tensor.hpp"

namespace lmfnet {

// Per-forward state threaded through every module: the train/eval switch and
// the seed stream for dropout draws. Op order inside one forward pass is
// fixed, so (seed, op_counter) replays exactly.
struct ForwardCtx {
    bool training = false;
    std::uint64_t seed = 0;
    mutable std::uint64_t op_counter = 0;

    std::uint64_t next_seed() const { return splitmix64(seed + 0x51ed2700dULL * (++op_counter)); }

    static ForwardCtx eval() { return ForwardCtx{false, 0, 0}; }
    static ForwardCtx train(std::uint64_t seed) { return ForwardCtx{true, seed, 0}; }
};

namespace init {

// Kaiming-normal fan-in init; shape[0] is the output-channel axis.
Tensor conv_weight(ParamStore& ps, const std::string& name, ShapeVec shape, Rng& rng, Dtype dt);
// truncated normal, std 0.02
Tensor linear_weight(ParamStore& ps, const std::string& name, std::int64_t d_in, std::int64_t d_out,
                     Rng& rng, Dtype dt);
Tensor zeros_bias(ParamStore& ps, const std::string& name, std::int64_t n, Dtype dt);
Tensor norm_scale(ParamStore& ps, const std::string& name, std::int64_t n, Dtype dt);
Tensor norm_shift(ParamStore& ps, const std::string& name, std::int64_t n, Dtype dt);

}  // namespace init

// (B,C,h,w) feature map <-> (B,h*w,C) token rows
Tensor map_to_tokens(const Tensor& x);
Tensor tokens_to_map(const Tensor& tokens, std::int64_t h, std::int64_t w);

}  // namespace lmfnet
