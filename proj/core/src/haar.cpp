#include "haarnet/haar.hpp"

#include <cmath>

#include "haarnet/ops.hpp"

namespace haarnet {

namespace {

using detail::TensorImpl;

// Fused stride-2 correlation with the three fixed detail kernels. Each output
// window reads a 2x2 patch (a b / c d); sums run in double so the rounded
// float32 result is exact for any term order.
Tensor haar_details(const Tensor& f) {
    const Shape& s = f.shape();
    Shape out{s.n, 3 * s.c, s.h / 2, s.w / 2};
    std::vector<float> data(static_cast<size_t>(out.numel()));
    const float* fp = f.data();
    const int64_t in_plane = s.h * s.w;
    const int64_t out_plane = out.h * out.w;
    for (int64_t n = 0; n < s.n; ++n) {
        for (int64_t c = 0; c < s.c; ++c) {
            const float* p = fp + (n * s.c + c) * in_plane;
            float* ov = data.data() + (n * out.c + 3 * c + 0) * out_plane;
            float* oh = data.data() + (n * out.c + 3 * c + 1) * out_plane;
            float* od = data.data() + (n * out.c + 3 * c + 2) * out_plane;
            for (int64_t y = 0; y < out.h; ++y) {
                for (int64_t x = 0; x < out.w; ++x) {
                    const double a = p[(2 * y) * s.w + 2 * x];
                    const double b = p[(2 * y) * s.w + 2 * x + 1];
                    const double cc = p[(2 * y + 1) * s.w + 2 * x];
                    const double d = p[(2 * y + 1) * s.w + 2 * x + 1];
                    ov[y * out.w + x] = static_cast<float>(-a - b + cc + d);
                    oh[y * out.w + x] = static_cast<float>(-a + b - cc + d);
                    od[y * out.w + x] = static_cast<float>(a - b - cc + d);
                }
            }
        }
    }
    auto backprop = [](TensorImpl& self) {
        TensorImpl& in = *self.parents[0];
        if (!in.requires_grad) return;
        in.ensure_grad();
        const Shape& si = in.shape;
        const Shape& so = self.shape;
        const int64_t in_plane = si.h * si.w;
        const int64_t out_plane = so.h * so.w;
        for (int64_t n = 0; n < si.n; ++n) {
            for (int64_t c = 0; c < si.c; ++c) {
                float* xg = in.grad.data() + (n * si.c + c) * in_plane;
                const float* gv = self.grad.data() + (n * so.c + 3 * c + 0) * out_plane;
                const float* gh = self.grad.data() + (n * so.c + 3 * c + 1) * out_plane;
                const float* gd = self.grad.data() + (n * so.c + 3 * c + 2) * out_plane;
                for (int64_t y = 0; y < so.h; ++y) {
                    for (int64_t x = 0; x < so.w; ++x) {
                        const float v = gv[y * so.w + x];
                        const float h = gh[y * so.w + x];
                        const float d = gd[y * so.w + x];
                        xg[(2 * y) * si.w + 2 * x] += -v - h + d;
                        xg[(2 * y) * si.w + 2 * x + 1] += -v + h - d;
                        xg[(2 * y + 1) * si.w + 2 * x] += v - h - d;
                        xg[(2 * y + 1) * si.w + 2 * x + 1] += v + h + d;
                    }
                }
            }
        }
    };
    return detail::make_op(out, std::move(data), {f}, std::move(backprop));
}

}  // namespace

HaarSubbands haar_forward(const Tensor& f) {
    Tensor even = f;
    const Shape& s = f.shape();
    if (s.h % 2 != 0 || s.w % 2 != 0) {
        even = replicate_pad_edge(f, static_cast<int>(s.h % 2), static_cast<int>(s.w % 2));
    }
    StructuringElement flat2 = StructuringElement::flat(2, static_cast<int>(s.c));
    HaarSubbands bands;
    bands.approx = dilate2d(even, flat2, 2, 0);
    bands.details = haar_details(even);
    return bands;
}

MhwBlock::MhwBlock(int c_rgb, int c_d, Rng& rng)
    : c_rgb_(c_rgb),
      c_d_(c_d),
      hidden_(static_cast<int>((3 * static_cast<int64_t>(c_rgb) + 3 * c_d + 3) / 4)),
      rgb_reduce_(3 * c_rgb + 3 * c_d, hidden_, 1, {}, rng),
      rgb_expand_(hidden_, c_rgb, 1, {}, rng),
      d_reduce_(3 * c_rgb + 3 * c_d, hidden_, 1, {}, rng),
      d_expand_(hidden_, c_d, 1, {}, rng),
      rgb_act_(hidden_),
      d_act_(hidden_) {
    if (c_rgb < 1 || c_d < 1) throw ConfigError("mhw: channel widths must be >= 1");
    // Reduce layers keep a +-1/sqrt(fan_in) draw; expand layers start at zero
    // so the initial gates are exactly sigmoid(0) = 0.5.
    auto reinit = [&rng](Conv2d& conv, int fan_in) {
        const float bound = 1.0f / std::sqrt(static_cast<float>(fan_in));
        for (int64_t i = 0; i < conv.weight().numel(); ++i) conv.weight().data()[i] = rng.uniform(-bound, bound);
    };
    reinit(rgb_reduce_, 3 * c_rgb + 3 * c_d);
    reinit(d_reduce_, 3 * c_rgb + 3 * c_d);
    for (int64_t i = 0; i < rgb_expand_.weight().numel(); ++i) rgb_expand_.weight().data()[i] = 0.0f;
    for (int64_t i = 0; i < d_expand_.weight().numel(); ++i) d_expand_.weight().data()[i] = 0.0f;
}

Tensor MhwBlock::gate(const Tensor& joint_details, bool rgb) const {
    const Conv2d& reduce = rgb ? rgb_reduce_ : d_reduce_;
    const Conv2d& expand = rgb ? rgb_expand_ : d_expand_;
    const MorphActivation& act = rgb ? rgb_act_ : d_act_;
    return sigmoid(expand.forward(act.forward(reduce.forward(joint_details))));
}

std::pair<Tensor, Tensor> MhwBlock::forward(const Tensor& f_rgb, const Tensor& f_d) const {
    return mhw_fuse(f_rgb, f_d, *this);
}

std::pair<Tensor, Tensor> mhw_fuse(const Tensor& f_rgb, const Tensor& f_d, const MhwBlock& block) {
    const Shape& sr = f_rgb.shape();
    const Shape& sd = f_d.shape();
    if (sr.n != sd.n || sr.h != sd.h || sr.w != sd.w) {
        throw ShapeError("mhw_fuse: modality extents differ, " + sr.str() + " vs " + sd.str());
    }
    HaarSubbands rgb = haar_forward(f_rgb);
    HaarSubbands depth = haar_forward(f_d);
    Tensor joint = concat_channels({rgb.details, depth.details});
    Tensor out_rgb = mul(rgb.approx, block.gate(joint, true));
    Tensor out_d = mul(depth.approx, block.gate(joint, false));
    return {out_rgb, out_d};
}

void MhwBlock::collect(const std::string& prefix, ParamList& out) {
    rgb_reduce_.collect(prefix + ".gate_rgb.c1", out);
    out.push_back({prefix + ".gate_rgb.act.h0", rgb_act_.h0()});
    rgb_expand_.collect(prefix + ".gate_rgb.c2", out);
    d_reduce_.collect(prefix + ".gate_d.c1", out);
    out.push_back({prefix + ".gate_d.act.h0", d_act_.h0()});
    d_expand_.collect(prefix + ".gate_d.c2", out);
}

}  // namespace haarnet
