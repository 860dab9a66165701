#pragma once

#include <map>
#include <string>

#include "lbt/detector.hpp"
#include "lbt/tensor.hpp"

namespace lbt {

// Single-file archive: magic + version, a JSON manifest (arch config, scalar
// metadata, tensor index) and a contiguous little-endian float64 blob. Used
// both for bare detector parameters and for full training checkpoints (which
// add prefixed tensor groups and scalar metadata).
struct TensorArchive {
    ArchConfig arch;
    std::map<std::string, std::string> meta;
    std::map<std::string, Tensor> tensors;
};

void save_archive(const std::string& path, const TensorArchive& archive);
TensorArchive load_archive(const std::string& path);

void save_params(const std::string& path, const DetectorParams& params);
DetectorParams load_params(const std::string& path);

}  // namespace lbt
