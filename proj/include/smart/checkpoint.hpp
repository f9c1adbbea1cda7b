#pragma once

#include <json.hpp>
#include <string>
#include <utility>
#include <vector>

#include "smart/masking.hpp"

namespace smart {

// Named-tensor archive: magic "SMRTCKPT", uint32 format version, uint32
// manifest length, JSON manifest, then a packed little-endian float64 data
// section. The manifest records config/meta JSON, each tensor's name, shape
// and byte offset into the data section, and the data section's CRC32.
struct CheckpointData {
    nlohmann::json meta;  // free-form (config dump, step counters, ...)
    std::vector<std::pair<std::string, Mat>> tensors;

    const Mat& tensor(const std::string& name) const;
    bool has_tensor(const std::string& name) const;
};

void write_checkpoint(const std::string& path, const CheckpointData& data);
CheckpointData read_checkpoint(const std::string& path);

}  // namespace smart
