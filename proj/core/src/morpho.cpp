#include "haarnet/morpho.hpp"

#include <cmath>
#include <string>
#include <vector>

#include "haarnet/ops.hpp"

namespace haarnet {

namespace {

using detail::TensorImpl;

}  // namespace

StructuringElement StructuringElement::flat(int ksize, int channels, bool learnable) {
    if (ksize < 1 || channels < 1) throw ConfigError("structuring element: ksize and channels must be >= 1");
    Tensor v = Tensor::zeros({1, channels, ksize, ksize}, learnable);
    return StructuringElement(std::move(v), learnable, ksize, channels);
}

StructuringElement StructuringElement::delta(int ksize, int channels) {
    if (ksize < 1 || channels < 1) throw ConfigError("structuring element: ksize and channels must be >= 1");
    Tensor v = Tensor::full({1, channels, ksize, ksize}, kNegInf);
    for (int c = 0; c < channels; ++c) v.at(0, c, 0, 0) = 0.0f;
    return StructuringElement(std::move(v), false, ksize, channels);
}

StructuringElement StructuringElement::from_tensor(Tensor values, bool learnable) {
    const Shape& s = values.shape();
    if (s.n != 1 || s.h != s.w || s.h < 1) {
        throw ConfigError("structuring element: values must be shaped (1,C,k,k), got " + s.str());
    }
    const int ksize = static_cast<int>(s.h);
    const int channels = static_cast<int>(s.c);
    if (learnable) {
        for (int64_t i = 0; i < values.numel(); ++i) {
            if (!std::isfinite(values.data()[i])) {
                throw ConfigError("structuring element: learnable kernels must be finite");
            }
        }
        values.set_requires_grad(true);
    }
    return StructuringElement(std::move(values), learnable, ksize, channels);
}

bool StructuringElement::finite() const {
    for (int64_t i = 0; i < values_.numel(); ++i) {
        if (!std::isfinite(values_.data()[i])) return false;
    }
    return true;
}

namespace {

enum class MorphKind { Dilate, Erode };

Tensor morph2d(const Tensor& f, const StructuringElement& se, int stride, Pad2d pad, MorphKind kind) {
    if (stride < 1) throw ContractError("morphology: stride must be >= 1");
    if (pad.top < 0 || pad.left < 0 || pad.bottom < 0 || pad.right < 0) {
        throw ContractError("morphology: negative padding");
    }
    const Shape& s = f.shape();
    if (se.channels() != s.c) {
        throw ShapeError("morphology: structuring element has " + std::to_string(se.channels()) +
                         " channels, input has " + std::to_string(s.c));
    }
    const int k = se.ksize();
    const int64_t oh = (s.h + pad.top + pad.bottom - k) / stride + 1;
    const int64_t ow = (s.w + pad.left + pad.right - k) / stride + 1;
    if (s.h + pad.top + pad.bottom < k || s.w + pad.left + pad.right < k) {
        throw ShapeError("morphology: kernel of size " + std::to_string(k) +
                         " larger than padded input " + s.str());
    }

    Shape out{s.n, s.c, oh, ow};
    std::vector<float> data(static_cast<size_t>(out.numel()));
    const Tensor& hv = se.values();
    const bool record = grad_enabled() && (f.requires_grad() || hv.requires_grad());
    std::vector<int32_t> arg_in;
    std::vector<int32_t> arg_k;
    if (record) {
        arg_in.assign(data.size(), -1);
        arg_k.assign(data.size(), -1);
    }

    const bool dilating = kind == MorphKind::Dilate;
    const float* fp = f.data();
    const float* hp = hv.data();
    int64_t oi = 0;
    for (int64_t n = 0; n < s.n; ++n) {
        for (int64_t c = 0; c < s.c; ++c) {
            const float* plane = fp + (n * s.c + c) * s.h * s.w;
            const float* kernel = hp + c * k * k;
            for (int64_t oy = 0; oy < oh; ++oy) {
                for (int64_t ox = 0; ox < ow; ++ox, ++oi) {
                    float best = dilating ? kNegInf : kPosInf;
                    int32_t best_in = -1;
                    int32_t best_k = -1;
                    for (int ky = 0; ky < k; ++ky) {
                        const int64_t iy = oy * stride + ky - pad.top;
                        if (iy < 0 || iy >= s.h) continue;
                        for (int kx = 0; kx < k; ++kx) {
                            const int64_t ix = ox * stride + kx - pad.left;
                            if (ix < 0 || ix >= s.w) continue;
                            const float h = kernel[ky * k + kx];
                            if (!dilating && h == kNegInf) continue;  // outside support
                            const float v = plane[iy * s.w + ix];
                            const float cand = dilating ? v + h : v - h;
                            if (dilating ? cand > best : cand < best) {
                                best = cand;
                                best_in = static_cast<int32_t>(iy * s.w + ix);
                                best_k = static_cast<int32_t>(ky * k + kx);
                            }
                        }
                    }
                    data[static_cast<size_t>(oi)] = best;
                    if (record && best_in >= 0) {
                        arg_in[static_cast<size_t>(oi)] = best_in;
                        arg_k[static_cast<size_t>(oi)] = best_k;
                    }
                }
            }
        }
    }

    auto backprop = [arg_in = std::move(arg_in), arg_k = std::move(arg_k), k, dilating](TensorImpl& self) {
        TensorImpl& fin = *self.parents[0];
        TensorImpl& hin = *self.parents[1];
        const bool gf = fin.requires_grad;
        const bool gh = hin.requires_grad;
        if (gf) fin.ensure_grad();
        if (gh) hin.ensure_grad();
        const Shape& so = self.shape;
        const int64_t plane_out = so.h * so.w;
        const int64_t plane_in = fin.shape.h * fin.shape.w;
        int64_t oi = 0;
        for (int64_t n = 0; n < so.n; ++n) {
            for (int64_t c = 0; c < so.c; ++c) {
                const int64_t in_base = (n * so.c + c) * plane_in;
                const int64_t k_base = c * k * k;
                for (int64_t p = 0; p < plane_out; ++p, ++oi) {
                    const int32_t bi = arg_in[static_cast<size_t>(oi)];
                    if (bi < 0) continue;  // empty window, gradient stays zero
                    const float g = self.grad[static_cast<size_t>(oi)];
                    if (gf) fin.grad[static_cast<size_t>(in_base + bi)] += g;
                    if (gh) {
                        const size_t ki = static_cast<size_t>(k_base + arg_k[static_cast<size_t>(oi)]);
                        if (dilating) {
                            hin.grad[ki] += g;
                        } else {
                            hin.grad[ki] -= g;
                        }
                    }
                }
            }
        }
    };
    return detail::make_op(out, std::move(data), {f, hv}, std::move(backprop));
}

}  // namespace

Tensor dilate2d(const Tensor& f, const StructuringElement& se, int stride, int padding) {
    return morph2d(f, se, stride, Pad2d::sym(padding), MorphKind::Dilate);
}

Tensor dilate2d(const Tensor& f, const StructuringElement& se, int stride, Pad2d pad) {
    return morph2d(f, se, stride, pad, MorphKind::Dilate);
}

Tensor erode2d(const Tensor& f, const StructuringElement& se, int stride, int padding) {
    return morph2d(f, se, stride, Pad2d::sym(padding), MorphKind::Erode);
}

Tensor erode2d(const Tensor& f, const StructuringElement& se, int stride, Pad2d pad) {
    return morph2d(f, se, stride, pad, MorphKind::Erode);
}

MorphActivation::MorphActivation(int channels, int kernel_size)
    : h0_(Tensor::zeros({1, channels, 1, 1}, true)),
      se_(kernel_size == 1 ? StructuringElement::delta(1, channels)
                           : StructuringElement::flat(kernel_size, channels, true)),
      channels_(channels) {
    if (channels < 1) throw ConfigError("morph_activation: channels must be >= 1");
    if (kernel_size != 1 && (kernel_size < 1 || kernel_size % 2 == 0)) {
        throw ConfigError("morph_activation: kernel size must be odd");
    }
}

Tensor MorphActivation::forward(const Tensor& f) const { return morph_activation(f, *this); }

Tensor morph_activation(const Tensor& f, const MorphActivation& params) {
    if (f.shape().c != params.channels()) {
        throw ShapeError("morph_activation: input has " + std::to_string(f.shape().c) +
                         " channels, parameters have " + std::to_string(params.channels()));
    }
    for (int64_t i = 0; i < params.h0().numel(); ++i) {
        if (!std::isfinite(params.h0().data()[i])) {
            throw ContractError("morph_activation: h0 must be finite");
        }
    }
    const int k = params.se().ksize();
    if (k == 1 && !params.se().learnable()) {
        // Delta kernel: the dilation is the identity.
        return emax(params.h0(), f);
    }
    return emax(params.h0(), dilate2d(f, params.se(), 1, (k - 1) / 2));
}

Tensor morph_upsample(const Tensor& f, const StructuringElement& se, int factor) {
    if (factor < 2) throw ContractError("morph_upsample: factor must be >= 2");
    if (!se.finite()) throw ConfigError("morph_upsample: structuring element must be finite");
    if (se.ksize() < factor) {
        throw ConfigError("morph_upsample: kernel size " + std::to_string(se.ksize()) +
                          " cannot cover up-sampling factor " + std::to_string(factor));
    }
    const Shape& s = f.shape();
    Shape placed_shape{s.n, s.c, s.h * factor, s.w * factor};
    std::vector<float> placed(static_cast<size_t>(placed_shape.numel()), kNegInf);
    const float* p = f.data();
    for (int64_t nc = 0; nc < s.n * s.c; ++nc) {
        const float* src = p + nc * s.h * s.w;
        float* dst = placed.data() + nc * placed_shape.h * placed_shape.w;
        for (int64_t y = 0; y < s.h; ++y) {
            for (int64_t x = 0; x < s.w; ++x) {
                dst[(y * factor) * placed_shape.w + x * factor] = src[y * s.w + x];
            }
        }
    }
    auto backprop = [factor](TensorImpl& self) {
        TensorImpl& in = *self.parents[0];
        if (!in.requires_grad) return;
        in.ensure_grad();
        const Shape& so = self.shape;
        const Shape& si = in.shape;
        for (int64_t nc = 0; nc < si.n * si.c; ++nc) {
            const float* g = self.grad.data() + nc * so.h * so.w;
            float* dst = in.grad.data() + nc * si.h * si.w;
            for (int64_t y = 0; y < si.h; ++y) {
                for (int64_t x = 0; x < si.w; ++x) {
                    dst[y * si.w + x] += g[(y * factor) * so.w + x * factor];
                }
            }
        }
    };
    Tensor grid = detail::make_op(placed_shape, std::move(placed), {f}, std::move(backprop));
    return dilate2d(grid, se, 1, Pad2d::leading(se.ksize()));
}

Tensor closing(const Tensor& f, const StructuringElement& se) {
    if (!se.finite()) throw ContractError("closing: structuring element must be finite");
    const int k = se.ksize();
    Tensor dilated = dilate2d(f, se, 1, Pad2d::leading(k));
    return erode2d(dilated, se, 1, Pad2d::trailing(k));
}

}  // namespace haarnet
