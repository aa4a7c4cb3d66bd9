#include "haarnet/ops.hpp"

#include <cmath>
#include <cstring>

namespace haarnet {

namespace {

using detail::TensorImpl;

enum class BinKind { Add, Sub, Mul, Max };

// Broadcast layout for binary ops: full-shape operand plus one that may
// collapse batch and/or spatial axes.
struct Bcast {
    Shape out;
    bool a_is_full = true;
    bool same = true;
};

bool channel_vector_like(const Shape& s, const Shape& full) {
    return s.c == full.c && s.h == 1 && s.w == 1 && (s.n == full.n || s.n == 1);
}

Bcast resolve_broadcast(const Tensor& a, const Tensor& b, const char* op) {
    Bcast r;
    if (a.shape() == b.shape()) {
        r.out = a.shape();
        return r;
    }
    r.same = false;
    if (channel_vector_like(b.shape(), a.shape())) {
        r.out = a.shape();
        r.a_is_full = true;
        return r;
    }
    if (channel_vector_like(a.shape(), b.shape())) {
        r.out = b.shape();
        r.a_is_full = false;
        return r;
    }
    throw ShapeError(std::string(op) + ": shapes " + a.shape().str() + " and " + b.shape().str() +
                     " neither match nor broadcast as (1,C,1,1)/(N,C,1,1)");
}

// Flat index into the collapsed operand for a full-shape coordinate.
inline int64_t small_index(const Shape& small, int64_t n, int64_t c) {
    return (small.n == 1 ? 0 : n) * small.c + c;
}

template <typename Fwd>
std::vector<float> binary_forward(const Tensor& a, const Tensor& b, const Bcast& bc, Fwd fwd) {
    const Shape& out = bc.out;
    std::vector<float> res(static_cast<size_t>(out.numel()));
    const float* pa = a.data();
    const float* pb = b.data();
    if (bc.same) {
        for (int64_t i = 0; i < out.numel(); ++i) res[static_cast<size_t>(i)] = fwd(pa[i], pb[i]);
        return res;
    }
    const Tensor& small = bc.a_is_full ? b : a;
    const int64_t hw = out.h * out.w;
    int64_t i = 0;
    for (int64_t n = 0; n < out.n; ++n) {
        for (int64_t c = 0; c < out.c; ++c) {
            const float sv = small.data()[small_index(small.shape(), n, c)];
            for (int64_t k = 0; k < hw; ++k, ++i) {
                const float fv = (bc.a_is_full ? pa : pb)[i];
                res[static_cast<size_t>(i)] = bc.a_is_full ? fwd(fv, sv) : fwd(sv, fv);
            }
        }
    }
    return res;
}

Tensor binary_op(BinKind kind, const Tensor& a, const Tensor& b, const char* name) {
    const Bcast bc = resolve_broadcast(a, b, name);
    std::vector<float> data;
    switch (kind) {
        case BinKind::Add: data = binary_forward(a, b, bc, [](float x, float y) { return x + y; }); break;
        case BinKind::Sub: data = binary_forward(a, b, bc, [](float x, float y) { return x - y; }); break;
        case BinKind::Mul: data = binary_forward(a, b, bc, [](float x, float y) { return x * y; }); break;
        case BinKind::Max: data = binary_forward(a, b, bc, [](float x, float y) { return x >= y ? x : y; }); break;
    }

    auto backprop = [kind, bc](TensorImpl& self) {
        TensorImpl& ia = *self.parents[0];
        TensorImpl& ib = *self.parents[1];
        const bool ga = ia.requires_grad;
        const bool gb = ib.requires_grad;
        if (ga) ia.ensure_grad();
        if (gb) ib.ensure_grad();
        const Shape& out = self.shape;
        const float* g = self.grad.data();
        const int64_t total = out.numel();

        if (bc.same) {
            const float* pa = ia.data.data();
            const float* pb = ib.data.data();
            switch (kind) {
                case BinKind::Add:
                    if (ga) for (int64_t i = 0; i < total; ++i) ia.grad[static_cast<size_t>(i)] += g[i];
                    if (gb) for (int64_t i = 0; i < total; ++i) ib.grad[static_cast<size_t>(i)] += g[i];
                    break;
                case BinKind::Sub:
                    if (ga) for (int64_t i = 0; i < total; ++i) ia.grad[static_cast<size_t>(i)] += g[i];
                    if (gb) for (int64_t i = 0; i < total; ++i) ib.grad[static_cast<size_t>(i)] -= g[i];
                    break;
                case BinKind::Mul:
                    if (ga) for (int64_t i = 0; i < total; ++i) ia.grad[static_cast<size_t>(i)] += pb[i] * g[i];
                    if (gb) for (int64_t i = 0; i < total; ++i) ib.grad[static_cast<size_t>(i)] += pa[i] * g[i];
                    break;
                case BinKind::Max:
                    for (int64_t i = 0; i < total; ++i) {
                        if (pa[i] >= pb[i]) {
                            if (ga) ia.grad[static_cast<size_t>(i)] += g[i];
                        } else if (gb) {
                            ib.grad[static_cast<size_t>(i)] += g[i];
                        }
                    }
                    break;
            }
            return;
        }

        TensorImpl& full = bc.a_is_full ? ia : ib;
        TensorImpl& small = bc.a_is_full ? ib : ia;
        const bool gfull = full.requires_grad;
        const bool gsmall = small.requires_grad;
        const int64_t hw = out.h * out.w;
        for (int64_t n = 0; n < out.n; ++n) {
            for (int64_t c = 0; c < out.c; ++c) {
                const int64_t si = small_index(small.shape, n, c);
                const float sv = small.data[static_cast<size_t>(si)];
                const float* gi = g + (n * out.c + c) * hw;
                const float* fi = full.data.data() + (n * out.c + c) * hw;
                float* gf = gfull ? full.grad.data() + (n * out.c + c) * hw : nullptr;
                double s_acc = 0.0;
                switch (kind) {
                    case BinKind::Add:
                        if (gfull) for (int64_t i = 0; i < hw; ++i) gf[i] += gi[i];
                        if (gsmall) for (int64_t i = 0; i < hw; ++i) s_acc += static_cast<double>(gi[i]);
                        break;
                    case BinKind::Sub:
                        if (gfull) {
                            for (int64_t i = 0; i < hw; ++i) gf[i] += bc.a_is_full ? gi[i] : -gi[i];
                        }
                        if (gsmall) {
                            for (int64_t i = 0; i < hw; ++i) s_acc += static_cast<double>(gi[i]);
                            if (bc.a_is_full) s_acc = -s_acc;
                        }
                        break;
                    case BinKind::Mul:
                        if (gfull) for (int64_t i = 0; i < hw; ++i) gf[i] += sv * gi[i];
                        if (gsmall) {
                            for (int64_t i = 0; i < hw; ++i) s_acc += static_cast<double>(fi[i]) * gi[i];
                        }
                        break;
                    case BinKind::Max:
                        // a wins ties; a is the full operand iff a_is_full
                        for (int64_t i = 0; i < hw; ++i) {
                            const float fv = fi[i];
                            const bool full_wins = bc.a_is_full ? fv >= sv : sv < fv;
                            if (full_wins) {
                                if (gfull) gf[i] += gi[i];
                            } else if (gsmall) {
                                s_acc += static_cast<double>(gi[i]);
                            }
                        }
                        break;
                }
                if (gsmall && s_acc != 0.0) small.grad[static_cast<size_t>(si)] += static_cast<float>(s_acc);
            }
        }
    };
    return detail::make_op(bc.out, std::move(data), {a, b}, std::move(backprop));
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) { return binary_op(BinKind::Add, a, b, "add"); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary_op(BinKind::Sub, a, b, "sub"); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary_op(BinKind::Mul, a, b, "mul"); }
Tensor emax(const Tensor& a, const Tensor& b) { return binary_op(BinKind::Max, a, b, "max"); }

Tensor sigmoid(const Tensor& x) {
    std::vector<float> data(static_cast<size_t>(x.numel()));
    const float* p = x.data();
    for (int64_t i = 0; i < x.numel(); ++i) {
        const float v = p[i];
        data[static_cast<size_t>(i)] =
            v >= 0.0f ? 1.0f / (1.0f + std::exp(-v)) : std::exp(v) / (1.0f + std::exp(v));
    }
    auto backprop = [](TensorImpl& self) {
        TensorImpl& in = *self.parents[0];
        if (!in.requires_grad) return;
        in.ensure_grad();
        for (size_t i = 0; i < self.data.size(); ++i) {
            const float s = self.data[i];
            in.grad[i] += s * (1.0f - s) * self.grad[i];
        }
    };
    return detail::make_op(x.shape(), std::move(data), {x}, std::move(backprop));
}

Tensor relu(const Tensor& x) {
    std::vector<float> data(static_cast<size_t>(x.numel()));
    const float* p = x.data();
    for (int64_t i = 0; i < x.numel(); ++i) data[static_cast<size_t>(i)] = p[i] > 0.0f ? p[i] : 0.0f;
    auto backprop = [](TensorImpl& self) {
        TensorImpl& in = *self.parents[0];
        if (!in.requires_grad) return;
        in.ensure_grad();
        for (size_t i = 0; i < self.data.size(); ++i) {
            if (in.data[i] > 0.0f) in.grad[i] += self.grad[i];
        }
    };
    return detail::make_op(x.shape(), std::move(data), {x}, std::move(backprop));
}

Tensor scale(const Tensor& x, float factor) {
    std::vector<float> data(static_cast<size_t>(x.numel()));
    const float* p = x.data();
    for (int64_t i = 0; i < x.numel(); ++i) data[static_cast<size_t>(i)] = p[i] * factor;
    auto backprop = [factor](TensorImpl& self) {
        TensorImpl& in = *self.parents[0];
        if (!in.requires_grad) return;
        in.ensure_grad();
        for (size_t i = 0; i < self.data.size(); ++i) in.grad[i] += factor * self.grad[i];
    };
    return detail::make_op(x.shape(), std::move(data), {x}, std::move(backprop));
}

Tensor offset(const Tensor& x, float shift) {
    std::vector<float> data(static_cast<size_t>(x.numel()));
    const float* p = x.data();
    for (int64_t i = 0; i < x.numel(); ++i) data[static_cast<size_t>(i)] = p[i] + shift;
    auto backprop = [](TensorImpl& self) {
        TensorImpl& in = *self.parents[0];
        if (!in.requires_grad) return;
        in.ensure_grad();
        for (size_t i = 0; i < self.data.size(); ++i) in.grad[i] += self.grad[i];
    };
    return detail::make_op(x.shape(), std::move(data), {x}, std::move(backprop));
}

Tensor sum(const Tensor& x) {
    double acc = 0.0;
    const float* p = x.data();
    for (int64_t i = 0; i < x.numel(); ++i) acc += static_cast<double>(p[i]);
    auto backprop = [](TensorImpl& self) {
        TensorImpl& in = *self.parents[0];
        if (!in.requires_grad) return;
        in.ensure_grad();
        const float g = self.grad[0];
        for (size_t i = 0; i < in.data.size(); ++i) in.grad[i] += g;
    };
    return detail::make_op({1, 1, 1, 1}, {static_cast<float>(acc)}, {x}, std::move(backprop));
}

Tensor reduce_max(const Tensor& x) {
    const float* p = x.data();
    int64_t best = 0;
    for (int64_t i = 1; i < x.numel(); ++i) {
        if (p[i] > p[best]) best = i;
    }
    auto backprop = [best](TensorImpl& self) {
        TensorImpl& in = *self.parents[0];
        if (!in.requires_grad) return;
        in.ensure_grad();
        in.grad[static_cast<size_t>(best)] += self.grad[0];
    };
    return detail::make_op({1, 1, 1, 1}, {p[best]}, {x}, std::move(backprop));
}

double sum_value(const Tensor& x) {
    double acc = 0.0;
    const float* p = x.data();
    for (int64_t i = 0; i < x.numel(); ++i) acc += static_cast<double>(p[i]);
    return acc;
}

Tensor concat_channels(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw ContractError("concat_channels: no inputs");
    const Shape& first = parts.front().shape();
    int64_t total_c = 0;
    for (const Tensor& t : parts) {
        const Shape& s = t.shape();
        if (s.n != first.n || s.h != first.h || s.w != first.w) {
            throw ShapeError("concat_channels: mismatched extents " + s.str() + " vs " + first.str());
        }
        total_c += s.c;
    }
    Shape out{first.n, total_c, first.h, first.w};
    std::vector<float> data(static_cast<size_t>(out.numel()));
    const int64_t hw = first.h * first.w;
    for (int64_t n = 0; n < out.n; ++n) {
        int64_t c_off = 0;
        for (const Tensor& t : parts) {
            const int64_t tc = t.shape().c;
            std::memcpy(data.data() + (n * total_c + c_off) * hw,
                        t.data() + n * tc * hw,
                        static_cast<size_t>(tc * hw) * sizeof(float));
            c_off += tc;
        }
    }
    auto backprop = [hw, total_c](TensorImpl& self) {
        const int64_t n_total = self.shape.n;
        int64_t c_off = 0;
        for (auto& parent : self.parents) {
            TensorImpl& in = *parent;
            const int64_t tc = in.shape.c;
            if (in.requires_grad) {
                in.ensure_grad();
                for (int64_t n = 0; n < n_total; ++n) {
                    const float* src = self.grad.data() + (n * total_c + c_off) * hw;
                    float* dst = in.grad.data() + n * tc * hw;
                    for (int64_t i = 0; i < tc * hw; ++i) dst[i] += src[i];
                }
            }
            c_off += tc;
        }
    };
    return detail::make_op(out, std::move(data), parts, std::move(backprop));
}

Tensor global_avg_pool(const Tensor& x) {
    const Shape& s = x.shape();
    Shape out{s.n, s.c, 1, 1};
    std::vector<float> data(static_cast<size_t>(out.numel()));
    const int64_t hw = s.h * s.w;
    const float* p = x.data();
    for (int64_t nc = 0; nc < s.n * s.c; ++nc) {
        double acc = 0.0;
        for (int64_t k = 0; k < hw; ++k) acc += static_cast<double>(p[nc * hw + k]);
        data[static_cast<size_t>(nc)] = static_cast<float>(acc / static_cast<double>(hw));
    }
    auto backprop = [hw](TensorImpl& self) {
        TensorImpl& in = *self.parents[0];
        if (!in.requires_grad) return;
        in.ensure_grad();
        const float inv = 1.0f / static_cast<float>(hw);
        for (int64_t nc = 0; nc < self.shape.n * self.shape.c; ++nc) {
            const float g = self.grad[static_cast<size_t>(nc)] * inv;
            float* dst = in.grad.data() + nc * hw;
            for (int64_t k = 0; k < hw; ++k) dst[k] += g;
        }
    };
    return detail::make_op(out, std::move(data), {x}, std::move(backprop));
}

Tensor broadcast_spatial(const Tensor& x, int64_t h, int64_t w) {
    const Shape& s = x.shape();
    if (s.h != 1 || s.w != 1) throw ShapeError("broadcast_spatial: input must be (N,C,1,1), got " + s.str());
    Shape out{s.n, s.c, h, w};
    std::vector<float> data(static_cast<size_t>(out.numel()));
    const int64_t hw = h * w;
    const float* p = x.data();
    for (int64_t nc = 0; nc < s.n * s.c; ++nc) {
        float* dst = data.data() + nc * hw;
        for (int64_t k = 0; k < hw; ++k) dst[k] = p[nc];
    }
    auto backprop = [hw](TensorImpl& self) {
        TensorImpl& in = *self.parents[0];
        if (!in.requires_grad) return;
        in.ensure_grad();
        for (int64_t nc = 0; nc < self.shape.n * self.shape.c; ++nc) {
            double acc = 0.0;
            const float* src = self.grad.data() + nc * hw;
            for (int64_t k = 0; k < hw; ++k) acc += static_cast<double>(src[k]);
            in.grad[static_cast<size_t>(nc)] += static_cast<float>(acc);
        }
    };
    return detail::make_op(out, std::move(data), {x}, std::move(backprop));
}

Tensor nearest_upsample(const Tensor& x, int factor) {
    if (factor < 1) throw ContractError("nearest_upsample: factor must be >= 1");
    const Shape& s = x.shape();
    Shape out{s.n, s.c, s.h * factor, s.w * factor};
    std::vector<float> data(static_cast<size_t>(out.numel()));
    const float* p = x.data();
    for (int64_t nc = 0; nc < s.n * s.c; ++nc) {
        const float* src = p + nc * s.h * s.w;
        float* dst = data.data() + nc * out.h * out.w;
        for (int64_t y = 0; y < out.h; ++y) {
            for (int64_t xx = 0; xx < out.w; ++xx) {
                dst[y * out.w + xx] = src[(y / factor) * s.w + (xx / factor)];
            }
        }
    }
    auto backprop = [factor](TensorImpl& self) {
        TensorImpl& in = *self.parents[0];
        if (!in.requires_grad) return;
        in.ensure_grad();
        const Shape& so = self.shape;
        const Shape& si = in.shape;
        for (int64_t nc = 0; nc < so.n * so.c; ++nc) {
            const float* g = self.grad.data() + nc * so.h * so.w;
            float* dst = in.grad.data() + nc * si.h * si.w;
            for (int64_t y = 0; y < so.h; ++y) {
                for (int64_t x = 0; x < so.w; ++x) {
                    dst[(y / factor) * si.w + (x / factor)] += g[y * so.w + x];
                }
            }
        }
    };
    return detail::make_op(out, std::move(data), {x}, std::move(backprop));
}

Tensor replicate_pad_edge(const Tensor& x, int pad_bottom, int pad_right) {
    if (pad_bottom < 0 || pad_right < 0) throw ContractError("replicate_pad_edge: negative padding");
    const Shape& s = x.shape();
    Shape out{s.n, s.c, s.h + pad_bottom, s.w + pad_right};
    std::vector<float> data(static_cast<size_t>(out.numel()));
    const float* p = x.data();
    for (int64_t nc = 0; nc < s.n * s.c; ++nc) {
        const float* src = p + nc * s.h * s.w;
        float* dst = data.data() + nc * out.h * out.w;
        for (int64_t y = 0; y < out.h; ++y) {
            const int64_t sy = y < s.h ? y : s.h - 1;
            for (int64_t xx = 0; xx < out.w; ++xx) {
                const int64_t sx = xx < s.w ? xx : s.w - 1;
                dst[y * out.w + xx] = src[sy * s.w + sx];
            }
        }
    }
    auto backprop = [](TensorImpl& self) {
        TensorImpl& in = *self.parents[0];
        if (!in.requires_grad) return;
        in.ensure_grad();
        const Shape& so = self.shape;
        const Shape& si = in.shape;
        for (int64_t nc = 0; nc < so.n * so.c; ++nc) {
            const float* g = self.grad.data() + nc * so.h * so.w;
            float* dst = in.grad.data() + nc * si.h * si.w;
            for (int64_t y = 0; y < so.h; ++y) {
                const int64_t sy = y < si.h ? y : si.h - 1;
                for (int64_t x = 0; x < so.w; ++x) {
                    const int64_t sx = x < si.w ? x : si.w - 1;
                    dst[sy * si.w + sx] += g[y * so.w + x];
                }
            }
        }
    };
    return detail::make_op(out, std::move(data), {x}, std::move(backprop));
}

Tensor argmax_channel(const Tensor& x) {
    const Shape& s = x.shape();
    Shape out{s.n, 1, s.h, s.w};
    std::vector<float> data(static_cast<size_t>(out.numel()));
    const int64_t hw = s.h * s.w;
    const float* p = x.data();
    for (int64_t n = 0; n < s.n; ++n) {
        for (int64_t k = 0; k < hw; ++k) {
            int64_t best = 0;
            float best_v = p[(n * s.c) * hw + k];
            for (int64_t c = 1; c < s.c; ++c) {
                const float v = p[(n * s.c + c) * hw + k];
                if (v > best_v) {
                    best_v = v;
                    best = c;
                }
            }
            data[static_cast<size_t>(n * hw + k)] = static_cast<float>(best);
        }
    }
    return Tensor::from_vector(out, std::move(data));
}

Tensor stack_batch(const std::vector<Tensor>& samples) {
    if (samples.empty()) throw ContractError("stack_batch: no samples");
    const Shape& s = samples.front().shape();
    for (const Tensor& t : samples) {
        if (!(t.shape() == s)) throw ShapeError("stack_batch: mismatched sample shapes");
        if (t.shape().n != 1) throw ShapeError("stack_batch: samples must have batch extent 1");
    }
    Shape out{static_cast<int64_t>(samples.size()), s.c, s.h, s.w};
    std::vector<float> data(static_cast<size_t>(out.numel()));
    const int64_t per = s.numel();
    for (size_t i = 0; i < samples.size(); ++i) {
        std::memcpy(data.data() + static_cast<int64_t>(i) * per, samples[i].data(),
                    static_cast<size_t>(per) * sizeof(float));
    }
    return Tensor::from_vector(out, std::move(data));
}

bool all_finite(const Tensor& x) {
    const float* p = x.data();
    for (int64_t i = 0; i < x.numel(); ++i) {
        if (!std::isfinite(p[i])) return false;
    }
    return true;
}

}  // namespace haarnet
