#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "haarnet/tensor.hpp"

namespace haarnet {

// Binary PGM (P5) or PPM (P6) with maxval 255 -> floats in [0,1], shaped
// (1,1,H,W) or (1,3,H,W). ASCII variants and other maxvals are rejected.
Tensor load_pnm(const std::string& path);
Tensor decode_pnm(const std::vector<uint8_t>& bytes, const std::string& origin);

// Writers for the transform command; values are clamped to [0,255].
void save_pgm(const std::string& path, const std::vector<uint8_t>& gray, int64_t h, int64_t w);
void save_ppm(const std::string& path, const std::vector<uint8_t>& rgb, int64_t h, int64_t w);

}  // namespace haarnet
