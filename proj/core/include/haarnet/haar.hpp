#pragma once

#include <utility>

#include "haarnet/linear.hpp"
#include "haarnet/morpho.hpp"
#include "haarnet/tensor.hpp"

namespace haarnet {

// One decomposition level: the max-pooled approximation plus three linear
// detail maps (vertical, horizontal, diagonal) interleaved per source channel.
struct HaarSubbands {
    Tensor approx;   // (N, C, H/2, W/2)
    Tensor details;  // (N, 3C, H/2, W/2), channel 3c+0 = v, 3c+1 = h, 3c+2 = d
};

// Morphological Haar decomposition at stride 2. The approximation is a flat
// 2x2 dilation (identical to 2x2 max pooling); the details are stride-2
// cross-correlations with the fixed kernels
//   v = [[-1,-1],[1,1]]   h = [[-1,1],[-1,1]]   d = [[1,-1],[-1,1]].
// Odd extents are replicate-padded right/bottom to even first.
HaarSubbands haar_forward(const Tensor& f);

// Multi-modal fusion block: gates each modality's approximation subband with
// a sigmoid of a two-layer 1x1-conv network over the concatenated detail
// subbands of both modalities.
class MhwBlock {
  public:
    MhwBlock(int c_rgb, int c_d, Rng& rng);

    std::pair<Tensor, Tensor> forward(const Tensor& f_rgb, const Tensor& f_d) const;

    void collect(const std::string& prefix, ParamList& out);

    int hidden_width() const { return hidden_; }

    friend std::pair<Tensor, Tensor> mhw_fuse(const Tensor& f_rgb, const Tensor& f_d, const MhwBlock& block);

  private:
    Tensor gate(const Tensor& joint_details, bool rgb) const;

    int c_rgb_;
    int c_d_;
    int hidden_;
    Conv2d rgb_reduce_, rgb_expand_;
    Conv2d d_reduce_, d_expand_;
    MorphActivation rgb_act_, d_act_;
};

std::pair<Tensor, Tensor> mhw_fuse(const Tensor& f_rgb, const Tensor& f_d, const MhwBlock& block);

}  // namespace haarnet
