#include "lmfnet/checkpoint.hpp"

#include <bit>
#include <fstream>
#include <sstream>

namespace lmfnet {

static_assert(std::endian::native == std::endian::little,
              "checkpoint blocks are written as raw little-endian values");

namespace {

constexpr const char* kMagic = "LMFNET-CKPT 1";
constexpr const char* kFeatureMagic = "LMFNET-FEATURES 1";
constexpr const char* kOptMagic = "LMFNET-OPTSTATE 1";

void write_block(std::ofstream& out, const Tensor& t) {
    if (t.dtype() == Dtype::F32) {
        auto s = t.data<float>();
        out.write(reinterpret_cast<const char*>(s.data()), static_cast<std::streamsize>(s.size() * 4));
    } else {
        auto s = t.data<double>();
        out.write(reinterpret_cast<const char*>(s.data()), static_cast<std::streamsize>(s.size() * 8));
    }
}

void read_block(std::ifstream& in, Tensor& t) {
    if (t.dtype() == Dtype::F32) {
        auto s = t.mutable_data<float>();
        in.read(reinterpret_cast<char*>(s.data()), static_cast<std::streamsize>(s.size() * 4));
    } else {
        auto s = t.mutable_data<double>();
        in.read(reinterpret_cast<char*>(s.data()), static_cast<std::streamsize>(s.size() * 8));
    }
    if (!in) throw DataError("checkpoint: truncated value block");
}

}  // namespace

void save_checkpoint(const ParamStore& params, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("checkpoint: cannot write " + path);
    out << kMagic << "\n";
    for (const auto& p : params.items()) {
        out << "param " << p.name << " " << param_kind_name(p.kind) << " " << dtype_name(p.tensor.dtype())
            << " " << p.tensor.ndim();
        for (auto d : p.tensor.shape()) out << " " << d;
        out << "\n";
    }
    out << "end\n";
    for (const auto& p : params.items()) write_block(out, p.tensor);
    if (!out) throw DataError("checkpoint: write failed for " + path);
}

void load_checkpoint(ParamStore& params, const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("checkpoint: cannot open " + path);
    std::string line;
    if (!std::getline(in, line) || line != kMagic) {
        throw DataError("checkpoint: bad header in " + path);
    }
    std::size_t idx = 0;
    auto& items = params.items();
    while (std::getline(in, line)) {
        if (line == "end") break;
        std::istringstream is(line);
        std::string tag, name, kind, dt;
        int ndim = 0;
        is >> tag >> name >> kind >> dt >> ndim;
        if (tag != "param" || !is) throw DataError("checkpoint: malformed manifest line: " + line);
        ShapeVec shape(static_cast<std::size_t>(ndim));
        for (auto& d : shape) is >> d;
        if (idx >= items.size()) throw DataError("checkpoint: more parameters than the model defines");
        auto& p = items[idx];
        if (p.name != name) {
            throw DataError("checkpoint: parameter order mismatch, expected '" + p.name + "', found '" +
                            name + "'");
        }
        if (p.tensor.shape() != shape || dtype_name(p.tensor.dtype()) != dt ||
            param_kind_name(p.kind) != kind) {
            throw DataError("checkpoint: definition mismatch for '" + name + "'");
        }
        ++idx;
    }
    if (idx != items.size()) throw DataError("checkpoint: missing parameters in " + path);
    for (auto& p : items) read_block(in, p.tensor);
}

void save_feature_dump(const std::vector<FeatureBlock>& blocks, FeatureStage stage,
                       const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("features: cannot write " + path);
    out << kFeatureMagic << "\n";
    out << "stage " << feature_stage_name(stage) << "\n";
    std::vector<Tensor> converted;
    converted.reserve(blocks.size());
    for (const auto& b : blocks) {
        auto values = b.values.astype(Dtype::F32);
        out << "block level" << b.level << " " << b.label << " float32 " << values.ndim();
        for (auto d : values.shape()) out << " " << d;
        out << "\n";
        converted.push_back(values);
    }
    out << "end\n";
    for (const auto& t : converted) write_block(out, t);
    if (!out) throw DataError("features: write failed for " + path);
}

void save_optimizer_state(const OptimizerSnapshot& snap, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("optimizer state: cannot write " + path);
    out << kOptMagic << "\n";
    for (std::size_t i = 0; i < snap.names.size(); ++i) {
        out << "moments " << snap.names[i] << " " << snap.m[i].size() << "\n";
    }
    out << "end\n";
    for (std::size_t i = 0; i < snap.names.size(); ++i) {
        out.write(reinterpret_cast<const char*>(snap.m[i].data()),
                  static_cast<std::streamsize>(snap.m[i].size() * 8));
        out.write(reinterpret_cast<const char*>(snap.v[i].data()),
                  static_cast<std::streamsize>(snap.v[i].size() * 8));
    }
    if (!out) throw DataError("optimizer state: write failed for " + path);
}

OptimizerSnapshot load_optimizer_state(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("optimizer state: cannot open " + path);
    std::string line;
    if (!std::getline(in, line) || line != kOptMagic) {
        throw DataError("optimizer state: bad header in " + path);
    }
    OptimizerSnapshot snap;
    std::vector<std::size_t> sizes;
    while (std::getline(in, line)) {
        if (line == "end") break;
        std::istringstream is(line);
        std::string tag, name;
        std::size_t n = 0;
        is >> tag >> name >> n;
        if (tag != "moments" || !is) throw DataError("optimizer state: malformed line: " + line);
        snap.names.push_back(name);
        sizes.push_back(n);
    }
    for (std::size_t n : sizes) {
        std::vector<double> m(n), v(n);
        in.read(reinterpret_cast<char*>(m.data()), static_cast<std::streamsize>(n * 8));
        in.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(n * 8));
        if (!in) throw DataError("optimizer state: truncated block");
        snap.m.push_back(std::move(m));
        snap.v.push_back(std::move(v));
    }
    return snap;
}

}  // namespace lmfnet
