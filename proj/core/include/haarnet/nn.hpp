#pragma once

#include <array>
#include <memory>
#include <optional>
#include <utility>
#include <vector>

#include "haarnet/haar.hpp"
#include "haarnet/linear.hpp"
#include "haarnet/morpho.hpp"
#include "haarnet/params.hpp"
#include "haarnet/rng.hpp"

namespace haarnet {

// Channel attention applied separately per modality: global average pool,
// bottleneck with reduction 4 and a morphological activation, sigmoid gate.
class SqueezeExciteGate {
  public:
    SqueezeExciteGate(int c_rgb, int c_d, Rng& rng);

    std::pair<Tensor, Tensor> forward(const Tensor& f_rgb, const Tensor& f_d) const;

    void collect(const std::string& prefix, ParamList& out);

    friend std::pair<Tensor, Tensor> se_gate(const Tensor& f_rgb, const Tensor& f_d,
                                             const SqueezeExciteGate& params);

  private:
    Tensor gate_one(const Tensor& f, bool rgb) const;

    Conv2d rgb_reduce_, rgb_expand_;
    Conv2d d_reduce_, d_expand_;
    MorphActivation rgb_act_, d_act_;
};

std::pair<Tensor, Tensor> se_gate(const Tensor& f_rgb, const Tensor& f_d, const SqueezeExciteGate& params);

// Multi-scale context head: 1x1 branch, 3x3 branches at dilation 2 and 4, and
// a pooled branch, each with batchnorm + morphological activation, then a 1x1
// projection back to the configured width.
class Aspp {
  public:
    Aspp(int c_in, int c_out, Rng& rng);

    Tensor forward(const Tensor& x, Mode mode);

    void collect(const std::string& prefix, ParamList& out);
    void collect_buffers(const std::string& prefix, ParamList& out);

    int branch_width() const { return branch_; }

  private:
    int branch_;
    Conv2d conv1x1_, conv_d2_, conv_d4_, conv_pool_, project_;
    BatchNorm2d bn1_, bn2_, bn3_, bn4_;
    MorphActivation act1_, act2_, act3_, act4_;
};

Tensor aspp(const Tensor& x, Aspp& params, Mode mode);

struct HaarNetConfig {
    int num_classes = 5;
    std::array<int, 3> widths{16, 32, 64};
    int bottleneck = 128;
    bool use_mup = true;
    bool use_mrelu = true;
    bool use_mhw = true;
    uint64_t seed = 0;
};

// Dual-stream encoder/decoder for RGB-D segmentation. Down-sampling between
// encoder stages runs through the MHW fusion block (or a plain stride-2 flat
// dilation per modality), the bottleneck fuses modalities into an ASPP head,
// and the decoder up-samples morphologically (or nearest-neighbour) with
// SE-gated skip connections fused by addition.
class HaarNet {
  public:
    explicit HaarNet(const HaarNetConfig& config);

    // rgb (N,3,H,W), depth (N,1,H,W), H and W divisible by 8.
    Tensor forward(const Tensor& rgb, const Tensor& depth, Mode mode);

    ParamList named_params();
    ParamList named_buffers();
    int64_t param_count();

    const HaarNetConfig& config() const { return config_; }

  private:
    struct ConvBlock {
        Conv2d conv;
        BatchNorm2d bn;
        std::optional<MorphActivation> act;  // empty = plain ReLU

        ConvBlock(int c_in, int c_out, int k, int pad, bool morph, Rng& rng);
        Tensor forward(const Tensor& x, Mode mode);
        void collect(const std::string& prefix, ParamList& out);
        void collect_buffers(const std::string& prefix, ParamList& out);
    };

    struct Stage {
        ConvBlock b0;
        ConvBlock b1;
        Tensor forward(const Tensor& x, Mode mode) { return b1.forward(b0.forward(x, mode), mode); }
    };

    HaarNetConfig config_;
    Conv2d stem_rgb_, stem_d_;
    std::vector<Stage> enc_rgb_, enc_d_;
    std::vector<MhwBlock> downs_;  // only when use_mhw
    Conv2d fuse_;
    Aspp aspp_;
    std::vector<StructuringElement> up_se_;  // only when use_mup
    std::vector<SqueezeExciteGate> skip_gates_;
    std::vector<ConvBlock> dec_;
    Conv2d head_;
};

}  // namespace haarnet
