#include "haarnet/linear.hpp"

#include <cmath>
#include <cstring>

#include "haarnet/ops.hpp"

namespace haarnet {

namespace {

using detail::TensorImpl;

int64_t conv_extent(int64_t in, int k, int stride, int padding, int dilation) {
    const int64_t span = static_cast<int64_t>(dilation) * (k - 1) + 1;
    return (in + 2 * static_cast<int64_t>(padding) - span) / stride + 1;
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, int stride, int padding,
              int dilation) {
    const Shape& s = x.shape();
    const Shape& ws = weight.shape();
    if (ws.c != s.c) {
        throw ShapeError("conv2d: weight expects " + std::to_string(ws.c) + " input channels, got " +
                         std::to_string(s.c));
    }
    if (ws.h != ws.w) throw ShapeError("conv2d: only square kernels supported");
    if (!(bias.shape() == Shape{1, ws.n, 1, 1})) {
        throw ShapeError("conv2d: bias must be (1,C_out,1,1), got " + bias.shape().str());
    }
    if (stride < 1 || dilation < 1 || padding < 0) throw ContractError("conv2d: bad stride/padding/dilation");
    const int k = static_cast<int>(ws.h);
    const int64_t oh = conv_extent(s.h, k, stride, padding, dilation);
    const int64_t ow = conv_extent(s.w, k, stride, padding, dilation);
    if (oh < 1 || ow < 1) throw ShapeError("conv2d: kernel does not fit padded input " + s.str());

    const int64_t c_out = ws.n;
    Shape out{s.n, c_out, oh, ow};
    std::vector<float> data(static_cast<size_t>(out.numel()));
    const float* xp = x.data();
    const float* wp = weight.data();
    const float* bp = bias.data();

    const int64_t in_plane = s.h * s.w;
    const int64_t out_plane = oh * ow;
    for (int64_t n = 0; n < s.n; ++n) {
        for (int64_t co = 0; co < c_out; ++co) {
            float* op = data.data() + (n * c_out + co) * out_plane;
            const float bv = bp[co];
            for (int64_t i = 0; i < out_plane; ++i) op[i] = bv;
            for (int64_t ci = 0; ci < s.c; ++ci) {
                const float* ip = xp + (n * s.c + ci) * in_plane;
                const float* wrow = wp + (co * s.c + ci) * k * k;
                for (int ky = 0; ky < k; ++ky) {
                    for (int kx = 0; kx < k; ++kx) {
                        const float wv = wrow[ky * k + kx];
                        const int64_t dx = static_cast<int64_t>(kx) * dilation - padding;
                        for (int64_t oy = 0; oy < oh; ++oy) {
                            const int64_t iy = oy * stride + static_cast<int64_t>(ky) * dilation - padding;
                            if (iy < 0 || iy >= s.h) continue;
                            const float* irow = ip + iy * s.w;
                            float* orow = op + oy * ow;
                            if (stride == 1) {
                                int64_t ox0 = dx < 0 ? -dx : 0;
                                int64_t ox1 = s.w - dx;
                                if (ox1 > ow) ox1 = ow;
                                for (int64_t ox = ox0; ox < ox1; ++ox) orow[ox] += wv * irow[ox + dx];
                            } else {
                                for (int64_t ox = 0; ox < ow; ++ox) {
                                    const int64_t ix = ox * stride + dx;
                                    if (ix < 0 || ix >= s.w) continue;
                                    orow[ox] += wv * irow[ix];
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    auto backprop = [stride, padding, dilation, k](TensorImpl& self) {
        TensorImpl& xin = *self.parents[0];
        TensorImpl& win = *self.parents[1];
        TensorImpl& bin = *self.parents[2];
        const Shape& si = xin.shape;
        const Shape& so = self.shape;
        const int64_t in_plane = si.h * si.w;
        const int64_t out_plane = so.h * so.w;
        const int64_t c_out = so.c;

        if (bin.requires_grad) {
            bin.ensure_grad();
            for (int64_t n = 0; n < so.n; ++n) {
                for (int64_t co = 0; co < c_out; ++co) {
                    const float* g = self.grad.data() + (n * c_out + co) * out_plane;
                    double acc = 0.0;
                    for (int64_t i = 0; i < out_plane; ++i) acc += static_cast<double>(g[i]);
                    bin.grad[static_cast<size_t>(co)] += static_cast<float>(acc);
                }
            }
        }
        if (win.requires_grad) {
            win.ensure_grad();
            for (int64_t co = 0; co < c_out; ++co) {
                for (int64_t ci = 0; ci < si.c; ++ci) {
                    float* wg = win.grad.data() + (co * si.c + ci) * k * k;
                    for (int ky = 0; ky < k; ++ky) {
                        for (int kx = 0; kx < k; ++kx) {
                            const int64_t dx = static_cast<int64_t>(kx) * dilation - padding;
                            // Fixed 8-lane accumulation: a deterministic
                            // order that still keeps the reduction off the
                            // serial FP dependency chain.
                            float lane[8] = {0, 0, 0, 0, 0, 0, 0, 0};
                            double tail_acc = 0.0;
                            for (int64_t n = 0; n < so.n; ++n) {
                                const float* ip = xin.data.data() + (n * si.c + ci) * in_plane;
                                const float* g = self.grad.data() + (n * c_out + co) * out_plane;
                                for (int64_t oy = 0; oy < so.h; ++oy) {
                                    const int64_t iy = oy * stride + static_cast<int64_t>(ky) * dilation - padding;
                                    if (iy < 0 || iy >= si.h) continue;
                                    const float* irow = ip + iy * si.w;
                                    const float* grow = g + oy * so.w;
                                    if (stride == 1) {
                                        int64_t ox0 = dx < 0 ? -dx : 0;
                                        int64_t ox1 = si.w - dx;
                                        if (ox1 > so.w) ox1 = so.w;
                                        int64_t ox = ox0;
                                        for (; ox + 8 <= ox1; ox += 8) {
                                            for (int l = 0; l < 8; ++l) {
                                                lane[l] += irow[ox + l + dx] * grow[ox + l];
                                            }
                                        }
                                        for (; ox < ox1; ++ox) {
                                            tail_acc += static_cast<double>(irow[ox + dx]) * grow[ox];
                                        }
                                    } else {
                                        for (int64_t ox = 0; ox < so.w; ++ox) {
                                            const int64_t ix = ox * stride + dx;
                                            if (ix < 0 || ix >= si.w) continue;
                                            tail_acc += static_cast<double>(irow[ix]) * grow[ox];
                                        }
                                    }
                                }
                            }
                            double acc = tail_acc;
                            for (int l = 0; l < 8; ++l) acc += static_cast<double>(lane[l]);
                            wg[ky * k + kx] += static_cast<float>(acc);
                        }
                    }
                }
            }
        }
        if (xin.requires_grad) {
            xin.ensure_grad();
            for (int64_t n = 0; n < so.n; ++n) {
                for (int64_t co = 0; co < c_out; ++co) {
                    const float* g = self.grad.data() + (n * c_out + co) * out_plane;
                    for (int64_t ci = 0; ci < si.c; ++ci) {
                        float* xg = xin.grad.data() + (n * si.c + ci) * in_plane;
                        const float* wrow = win.data.data() + (co * si.c + ci) * k * k;
                        for (int ky = 0; ky < k; ++ky) {
                            for (int kx = 0; kx < k; ++kx) {
                                const float wv = wrow[ky * k + kx];
                                if (wv == 0.0f) continue;
                                const int64_t dx = static_cast<int64_t>(kx) * dilation - padding;
                                for (int64_t oy = 0; oy < so.h; ++oy) {
                                    const int64_t iy = oy * stride + static_cast<int64_t>(ky) * dilation - padding;
                                    if (iy < 0 || iy >= si.h) continue;
                                    float* xrow = xg + iy * si.w;
                                    const float* grow = g + oy * so.w;
                                    if (stride == 1) {
                                        int64_t ox0 = dx < 0 ? -dx : 0;
                                        int64_t ox1 = si.w - dx;
                                        if (ox1 > so.w) ox1 = so.w;
                                        for (int64_t ox = ox0; ox < ox1; ++ox) {
                                            xrow[ox + dx] += wv * grow[ox];
                                        }
                                    } else {
                                        for (int64_t ox = 0; ox < so.w; ++ox) {
                                            const int64_t ix = ox * stride + dx;
                                            if (ix < 0 || ix >= si.w) continue;
                                            xrow[ix] += wv * grow[ox];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    };
    return detail::make_op(out, std::move(data), {x, weight, bias}, std::move(backprop));
}

Conv2d::Conv2d(int c_in, int c_out, int ksize, Opts opts, Rng& rng) {
    if (c_in < 1 || c_out < 1 || ksize < 1) throw ConfigError("conv2d: bad layer extents");
    const int64_t fan_in = static_cast<int64_t>(c_in) * ksize * ksize;
    const float bound = std::sqrt(6.0f / static_cast<float>(fan_in));
    std::vector<float> w(static_cast<size_t>(c_out) * c_in * ksize * ksize);
    for (float& v : w) v = rng.uniform(-bound, bound);
    weight_ = Tensor::from_vector({c_out, c_in, ksize, ksize}, std::move(w), true);
    bias_ = Tensor::zeros({1, c_out, 1, 1}, true);
    opts_ = opts;
}

Conv2d Conv2d::with_weights(Tensor weight, Tensor bias, Opts opts) {
    Conv2d layer;
    weight.set_requires_grad(true);
    bias.set_requires_grad(true);
    layer.weight_ = std::move(weight);
    layer.bias_ = std::move(bias);
    layer.opts_ = opts;
    return layer;
}

void Conv2d::collect(const std::string& prefix, ParamList& out) {
    out.push_back({prefix + ".w", weight_});
    out.push_back({prefix + ".b", bias_});
}

BatchNorm2d::BatchNorm2d(int channels, float momentum, float eps)
    : gamma_(Tensor::full({1, channels, 1, 1}, 1.0f, true)),
      beta_(Tensor::zeros({1, channels, 1, 1}, true)),
      running_mean_(Tensor::zeros({1, channels, 1, 1})),
      running_var_(Tensor::full({1, channels, 1, 1}, 1.0f)),
      momentum_(momentum),
      eps_(eps) {}

void BatchNorm2d::collect(const std::string& prefix, ParamList& out) {
    out.push_back({prefix + ".gamma", gamma_});
    out.push_back({prefix + ".beta", beta_});
}

void BatchNorm2d::collect_buffers(const std::string& prefix, ParamList& out) {
    out.push_back({prefix + ".rmean", running_mean_});
    out.push_back({prefix + ".rvar", running_var_});
}

Tensor batchnorm2d(const Tensor& x, const Tensor& gamma, const Tensor& beta, Tensor& running_mean,
                   Tensor& running_var, Mode mode, float momentum, float eps) {
    const Shape& s = x.shape();
    if (gamma.shape().c != s.c || beta.shape().c != s.c) {
        throw ShapeError("batchnorm2d: parameter channels do not match input " + s.str());
    }
    const int64_t m = s.n * s.h * s.w;
    const int64_t plane = s.h * s.w;
    std::vector<float> data(static_cast<size_t>(s.numel()));
    const float* xp = x.data();

    if (mode == Mode::Train) {
        if (s.n < 2) throw ContractError("batchnorm2d: train mode needs batch size >= 2");
        std::vector<float> mean_c(static_cast<size_t>(s.c));
        std::vector<float> inv_c(static_cast<size_t>(s.c));
        for (int64_t c = 0; c < s.c; ++c) {
            double acc = 0.0;
            for (int64_t n = 0; n < s.n; ++n) {
                const float* p = xp + (n * s.c + c) * plane;
                for (int64_t i = 0; i < plane; ++i) acc += static_cast<double>(p[i]);
            }
            const double mean = acc / static_cast<double>(m);
            double var_acc = 0.0;
            for (int64_t n = 0; n < s.n; ++n) {
                const float* p = xp + (n * s.c + c) * plane;
                for (int64_t i = 0; i < plane; ++i) {
                    const double d = static_cast<double>(p[i]) - mean;
                    var_acc += d * d;
                }
            }
            const double var = var_acc / static_cast<double>(m);
            mean_c[static_cast<size_t>(c)] = static_cast<float>(mean);
            inv_c[static_cast<size_t>(c)] = static_cast<float>(1.0 / std::sqrt(var + static_cast<double>(eps)));

            running_mean.data()[c] = (1.0f - momentum) * running_mean.data()[c] + momentum * static_cast<float>(mean);
            running_var.data()[c] = (1.0f - momentum) * running_var.data()[c] + momentum * static_cast<float>(var);
        }
        const float* gp = gamma.data();
        const float* bp = beta.data();
        for (int64_t n = 0; n < s.n; ++n) {
            for (int64_t c = 0; c < s.c; ++c) {
                const float* p = xp + (n * s.c + c) * plane;
                float* o = data.data() + (n * s.c + c) * plane;
                const float mc = mean_c[static_cast<size_t>(c)];
                const float ic = inv_c[static_cast<size_t>(c)];
                const float g = gp[c];
                const float b = bp[c];
                for (int64_t i = 0; i < plane; ++i) o[i] = (p[i] - mc) * ic * g + b;
            }
        }

        auto backprop = [mean_c = std::move(mean_c), inv_c = std::move(inv_c), m, plane](TensorImpl& self) {
            TensorImpl& xin = *self.parents[0];
            TensorImpl& gin = *self.parents[1];
            TensorImpl& bin = *self.parents[2];
            const Shape& si = xin.shape;
            for (int64_t c = 0; c < si.c; ++c) {
                const float mc = mean_c[static_cast<size_t>(c)];
                const float ic = inv_c[static_cast<size_t>(c)];
                double sum_g = 0.0;
                double sum_gx = 0.0;
                for (int64_t n = 0; n < si.n; ++n) {
                    const float* g = self.grad.data() + (n * si.c + c) * plane;
                    const float* p = xin.data.data() + (n * si.c + c) * plane;
                    for (int64_t i = 0; i < plane; ++i) {
                        sum_g += static_cast<double>(g[i]);
                        sum_gx += static_cast<double>(g[i]) * ((p[i] - mc) * ic);
                    }
                }
                if (bin.requires_grad) {
                    bin.ensure_grad();
                    bin.grad[static_cast<size_t>(c)] += static_cast<float>(sum_g);
                }
                if (gin.requires_grad) {
                    gin.ensure_grad();
                    gin.grad[static_cast<size_t>(c)] += static_cast<float>(sum_gx);
                }
                if (xin.requires_grad) {
                    xin.ensure_grad();
                    const float gamma_v = gin.data[static_cast<size_t>(c)];
                    const float mean_g = static_cast<float>(sum_g / static_cast<double>(m));
                    const float mean_gx = static_cast<float>(sum_gx / static_cast<double>(m));
                    for (int64_t n = 0; n < si.n; ++n) {
                        const float* g = self.grad.data() + (n * si.c + c) * plane;
                        const float* p = xin.data.data() + (n * si.c + c) * plane;
                        float* xg = xin.grad.data() + (n * si.c + c) * plane;
                        for (int64_t i = 0; i < plane; ++i) {
                            const float xhat = (p[i] - mc) * ic;
                            xg[i] += gamma_v * ic * (g[i] - mean_g - xhat * mean_gx);
                        }
                    }
                }
            }
        };
        return detail::make_op(s, std::move(data), {x, gamma, beta}, std::move(backprop));
    }

    // Eval: affine transform by the running statistics.
    std::vector<float> scale_c(static_cast<size_t>(s.c));
    std::vector<float> mean_rc(static_cast<size_t>(s.c));
    for (int64_t c = 0; c < s.c; ++c) {
        scale_c[static_cast<size_t>(c)] =
            static_cast<float>(1.0 / std::sqrt(static_cast<double>(running_var.data()[c]) + static_cast<double>(eps)));
        mean_rc[static_cast<size_t>(c)] = running_mean.data()[c];
    }
    const float* gp = gamma.data();
    const float* bp = beta.data();
    for (int64_t n = 0; n < s.n; ++n) {
        for (int64_t c = 0; c < s.c; ++c) {
            const float* p = xp + (n * s.c + c) * plane;
            float* o = data.data() + (n * s.c + c) * plane;
            const float mc = mean_rc[static_cast<size_t>(c)];
            const float ic = scale_c[static_cast<size_t>(c)];
            const float g = gp[c];
            const float b = bp[c];
            for (int64_t i = 0; i < plane; ++i) o[i] = (p[i] - mc) * ic * g + b;
        }
    }
    auto backprop = [scale_c = std::move(scale_c), mean_rc = std::move(mean_rc), plane](TensorImpl& self) {
        TensorImpl& xin = *self.parents[0];
        TensorImpl& gin = *self.parents[1];
        TensorImpl& bin = *self.parents[2];
        const Shape& si = xin.shape;
        for (int64_t c = 0; c < si.c; ++c) {
            const float ic = scale_c[static_cast<size_t>(c)];
            const float mc = mean_rc[static_cast<size_t>(c)];
            double sum_g = 0.0;
            double sum_gx = 0.0;
            for (int64_t n = 0; n < si.n; ++n) {
                const float* g = self.grad.data() + (n * si.c + c) * plane;
                const float* p = xin.data.data() + (n * si.c + c) * plane;
                for (int64_t i = 0; i < plane; ++i) {
                    sum_g += static_cast<double>(g[i]);
                    sum_gx += static_cast<double>(g[i]) * ((p[i] - mc) * ic);
                }
            }
            if (bin.requires_grad) {
                bin.ensure_grad();
                bin.grad[static_cast<size_t>(c)] += static_cast<float>(sum_g);
            }
            if (gin.requires_grad) {
                gin.ensure_grad();
                gin.grad[static_cast<size_t>(c)] += static_cast<float>(sum_gx);
            }
            if (xin.requires_grad) {
                xin.ensure_grad();
                const float k = gin.data[static_cast<size_t>(c)] * ic;
                for (int64_t n = 0; n < si.n; ++n) {
                    const float* g = self.grad.data() + (n * si.c + c) * plane;
                    float* xg = xin.grad.data() + (n * si.c + c) * plane;
                    for (int64_t i = 0; i < plane; ++i) xg[i] += k * g[i];
                }
            }
        }
    };
    return detail::make_op(s, std::move(data), {x, gamma, beta}, std::move(backprop));
}

}  // namespace haarnet
