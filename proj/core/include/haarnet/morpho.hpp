#pragma once

#include "haarnet/tensor.hpp"

namespace haarnet {

// Per-channel additive k x k kernel over the max-plus semi-ring; the anchor
// is the top-left entry and offsets range over {0..k-1}^2. -inf entries are
// neutral (only allowed on fixed kernels such as the delta function).
class StructuringElement {
  public:
    static StructuringElement flat(int ksize, int channels, bool learnable = false);
    static StructuringElement delta(int ksize, int channels);
    static StructuringElement from_tensor(Tensor values, bool learnable);

    int ksize() const { return ksize_; }
    int channels() const { return channels_; }
    bool learnable() const { return learnable_; }
    Tensor& values() { return values_; }
    const Tensor& values() const { return values_; }

    bool finite() const;

  private:
    StructuringElement(Tensor values, bool learnable, int ksize, int channels)
        : values_(std::move(values)), learnable_(learnable), ksize_(ksize), channels_(channels) {}

    Tensor values_;  // (1, C, k, k)
    bool learnable_ = false;
    int ksize_ = 0;
    int channels_ = 0;
};

struct Pad2d {
    int top = 0;
    int left = 0;
    int bottom = 0;
    int right = 0;

    static Pad2d sym(int p) { return {p, p, p, p}; }
    // Leading pad of k-1 makes a stride-1 dilation size preserving; trailing
    // pad of k-1 does the same for erosion. Together they form the exact
    // adjoint pair used by closing and the adjunction property.
    static Pad2d leading(int k) { return {k - 1, k - 1, 0, 0}; }
    static Pad2d trailing(int k) { return {0, 0, k - 1, k - 1}; }
};

// g(x) = max_z f(stride*x + z - pad) + h(z), out-of-range reads are -inf.
// Output extent: floor((H + pad_total - k)/stride) + 1 per axis. Backward
// routes the full gradient to the first maximizer in row-major scan order,
// and to the matching kernel entry when the kernel is learnable.
Tensor dilate2d(const Tensor& f, const StructuringElement& se, int stride, int padding);
Tensor dilate2d(const Tensor& f, const StructuringElement& se, int stride, Pad2d pad);

// g(x) = min_z f(stride*x + z - pad) - h(z), out-of-range reads are +inf.
Tensor erode2d(const Tensor& f, const StructuringElement& se, int stride, int padding);
Tensor erode2d(const Tensor& f, const StructuringElement& se, int stride, Pad2d pad);

// max(h0_c, f dilated by se); with se = delta(1) and h0 = 0 this is exactly
// ReLU. h0 is one learnable scalar per channel.
class MorphActivation {
  public:
    // kernel_size 1 keeps the fixed delta kernel (pure FReLU); kernel_size 3
    // adds a learnable flat-initialized 3x3 kernel variant.
    explicit MorphActivation(int channels, int kernel_size = 1);

    Tensor forward(const Tensor& f) const;

    Tensor& h0() { return h0_; }
    const Tensor& h0() const { return h0_; }
    StructuringElement& se() { return se_; }
    const StructuringElement& se() const { return se_; }
    int channels() const { return channels_; }

  private:
    Tensor h0_;  // (1, C, 1, 1)
    StructuringElement se_;
    int channels_;
};

Tensor morph_activation(const Tensor& f, const MorphActivation& params);

// Equidistant up-sampling: place f(x) at factor*x in a -inf canvas of
// factor*H x factor*W, then dilate at stride 1 with leading pad k-1. The
// kernel must be finite and at least factor wide so every output is covered.
Tensor morph_upsample(const Tensor& f, const StructuringElement& se, int factor);

// Closing: erosion after dilation with the same kernel, size preserving and
// exactly adjoint, hence extensive, increasing and idempotent.
Tensor closing(const Tensor& f, const StructuringElement& se);

}  // namespace haarnet
