#pragma once

#include <string>
#include <vector>

#include "lmfnet/model.hpp"

namespace lmfnet {

// Single-file container: text manifest (name, kind, dtype, shape per
// parameter), an "end" line, then row-major little-endian value blocks in
// manifest order.
void save_checkpoint(const ParamStore& params, const std::string& path);
// strict: names, order, kinds, dtypes and shapes must match the store
void load_checkpoint(ParamStore& params, const std::string& path);

// Same container layout for exported feature blocks (always float32 data).
void save_feature_dump(const std::vector<FeatureBlock>& blocks, FeatureStage stage,
                       const std::string& path);

// AdamW moment vectors, serialized alongside a checkpoint for exact resume.
struct OptimizerSnapshot {
    std::vector<std::string> names;
    std::vector<std::vector<double>> m;
    std::vector<std::vector<double>> v;
};
void save_optimizer_state(const OptimizerSnapshot& snap, const std::string& path);
OptimizerSnapshot load_optimizer_state(const std::string& path);

}  // namespace lmfnet
