#pragma once

#include <string>
#include <vector>

#include "lmfnet/tensor.hpp"

namespace lmfnet_test {

inline lmfnet::Parameter make_param(const std::string& name, lmfnet::Tensor t) {
    t.set_requires_grad(true);
    return lmfnet::Parameter{name, lmfnet::ParamKind::Weight, t};
}

// Scalar readout for gradient checks: sum(y + y^2/2 + y^3/3). Its derivative
// 1 + y + y^2 is bounded below by 3/4, so no output element produces a
// near-zero gradient that would amplify finite-difference noise.
inline lmfnet::Tensor probe(const lmfnet::Tensor& y) {
    using namespace lmfnet;
    auto y2 = mul(y, y);
    auto y3 = mul(y2, y);
    return sum_all(add(y, add(scale(y2, 0.5), scale(y3, 1.0 / 3.0))));
}

}  // namespace lmfnet_test
