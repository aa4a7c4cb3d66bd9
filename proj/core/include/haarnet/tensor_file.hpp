#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "haarnet/tensor.hpp"

namespace haarnet {

// Rank-generic float32 payload for file exchange; the in-memory Tensor is
// always rank 4 but files may carry any rank up to 8.
struct RawTensor {
    std::vector<uint64_t> extents;
    std::vector<float> data;

    uint64_t numel() const {
        uint64_t n = 1;
        for (uint64_t e : extents) n *= e;
        return n;
    }
};

// Layout (little-endian): magic "MTEN" | version u32 = 1 | dtype u8 (0 = f32)
// | rank u8 | extents u64 each | raw row-major payload. A rank byte of 0xFF
// marks the named-entry container used for checkpoints.
void save_raw(const std::string& path, const RawTensor& t);
RawTensor load_raw(const std::string& path);

void save_tensor(const std::string& path, const Tensor& t);
Tensor load_tensor(const std::string& path);  // requires a rank-4 file

// Conversions for rank < 4 payloads (missing leading extents become 1).
Tensor raw_to_tensor(const RawTensor& raw);
RawTensor tensor_to_raw(const Tensor& t, int rank = 4);

using NamedTensors = std::vector<std::pair<std::string, RawTensor>>;

void save_checkpoint(const std::string& path, const NamedTensors& entries);
NamedTensors load_checkpoint(const std::string& path);

const RawTensor* find_entry(const NamedTensors& entries, const std::string& name);

}  // namespace haarnet
