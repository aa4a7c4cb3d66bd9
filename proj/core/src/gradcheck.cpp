#include "haarnet/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "haarnet/haar.hpp"
#include "haarnet/morpho.hpp"
#include "haarnet/nn.hpp"
#include "haarnet/ops.hpp"
#include "haarnet/rng.hpp"
#include "haarnet/train.hpp"

namespace haarnet {

namespace {

struct CheckInput {
    std::string name;
    Tensor tensor;                 // leaf with requires_grad set
    std::vector<int64_t> coords;   // empty = every coordinate
};

// forward() rebuilds the recorded scalar loss for the analytic pass; value()
// evaluates the same function in double without the final float32 rounding,
// which keeps central differences out of the quantization noise floor.
struct CheckCase {
    std::vector<CheckInput> inputs;
    std::function<Tensor()> forward;
    std::function<double()> value;
    double eps = 1e-2;
};

// Shuffled multiples of `step` plus a uniform jitter; pairwise value gaps are
// at least step - jitter_hi, keeping max/min windows clear of ties at +-eps.
Tensor lattice_tensor(Shape s, Rng& rng, float step, float jitter_lo, float jitter_hi,
                      bool requires_grad = true) {
    const int64_t n = s.numel();
    std::vector<float> base(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) base[static_cast<size_t>(i)] = static_cast<float>(i) * step;
    rng.shuffle(base);
    for (float& v : base) v += rng.uniform(jitter_lo, jitter_hi);
    return Tensor::from_vector(s, std::move(base), requires_grad);
}

Tensor uniform_tensor(Shape s, Rng& rng, float lo, float hi, bool requires_grad = true) {
    std::vector<float> v(static_cast<size_t>(s.numel()));
    for (float& x : v) x = rng.uniform(lo, hi);
    return Tensor::from_vector(s, std::move(v), requires_grad);
}

Tensor loss_weights(Shape s, Rng& rng) {
    std::vector<float> v(static_cast<size_t>(s.numel()));
    for (float& x : v) {
        x = rng.uniform(0.5f, 1.5f) * (rng.canonical() < 0.5f ? -1.0f : 1.0f);
    }
    return Tensor::from_vector(s, std::move(v));
}

// +-1 weights make the true gradients of piecewise-linear ops exact integers
// and leave untouched coordinates with an exactly-zero numeric difference.
Tensor sign_weights(Shape s, Rng& rng) {
    std::vector<float> v(static_cast<size_t>(s.numel()));
    for (float& x : v) x = rng.canonical() < 0.5f ? -1.0f : 1.0f;
    return Tensor::from_vector(s, std::move(v));
}

double weighted_value(const Tensor& t, const Tensor& w) {
    double acc = 0.0;
    const float* tp = t.data();
    const float* wp = w.data();
    for (int64_t i = 0; i < t.numel(); ++i) {
        acc += static_cast<double>(tp[i]) * static_cast<double>(wp[i]);
    }
    return acc;
}

std::vector<int64_t> sample_coords(int64_t numel, int limit, Rng& rng) {
    if (numel <= limit) return {};
    std::vector<int64_t> all(static_cast<size_t>(numel));
    std::iota(all.begin(), all.end(), 0);
    rng.shuffle(all);
    all.resize(static_cast<size_t>(limit));
    std::sort(all.begin(), all.end());
    return all;
}

// ---- double-precision mirror -------------------------------------------
//
// Deep composites (mhw_fuse, aspp) couple every output to every input through
// batch statistics, so a float32 re-evaluation buries central differences in
// sqrt(N)*ulp noise. The numeric side therefore evaluates the same
// composition in double; the float32 analytic gradients match its slopes to
// well below the tolerance.

struct DT {
    Shape s;
    std::vector<double> v;
};

DT d_from(const Tensor& t) {
    DT d;
    d.s = t.shape();
    d.v.assign(t.data(), t.data() + t.numel());
    return d;
}

DT d_conv(const DT& x, const Tensor& weight, const Tensor& bias, int stride, int pad, int dil) {
    const Shape& si = x.s;
    const Shape& ws = weight.shape();
    const int k = static_cast<int>(ws.h);
    const int64_t span = static_cast<int64_t>(dil) * (k - 1) + 1;
    DT o;
    o.s = {si.n, ws.n, (si.h + 2 * pad - span) / stride + 1, (si.w + 2 * pad - span) / stride + 1};
    o.v.assign(static_cast<size_t>(o.s.numel()), 0.0);
    for (int64_t n = 0; n < si.n; ++n) {
        for (int64_t co = 0; co < ws.n; ++co) {
            for (int64_t oy = 0; oy < o.s.h; ++oy) {
                for (int64_t ox = 0; ox < o.s.w; ++ox) {
                    double acc = static_cast<double>(bias.data()[co]);
                    for (int64_t ci = 0; ci < si.c; ++ci) {
                        for (int ky = 0; ky < k; ++ky) {
                            const int64_t iy = oy * stride + static_cast<int64_t>(ky) * dil - pad;
                            if (iy < 0 || iy >= si.h) continue;
                            for (int kx = 0; kx < k; ++kx) {
                                const int64_t ix = ox * stride + static_cast<int64_t>(kx) * dil - pad;
                                if (ix < 0 || ix >= si.w) continue;
                                acc += static_cast<double>(
                                           weight.data()[((co * si.c + ci) * k + ky) * k + kx]) *
                                       x.v[static_cast<size_t>(((n * si.c + ci) * si.h + iy) * si.w + ix)];
                            }
                        }
                    }
                    o.v[static_cast<size_t>(((n * ws.n + co) * o.s.h + oy) * o.s.w + ox)] = acc;
                }
            }
        }
    }
    return o;
}

DT d_bn_train(const DT& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5) {
    DT o;
    o.s = x.s;
    o.v.resize(x.v.size());
    const int64_t plane = x.s.h * x.s.w;
    const int64_t m = x.s.n * plane;
    for (int64_t c = 0; c < x.s.c; ++c) {
        double sum = 0.0, sq = 0.0;
        for (int64_t n = 0; n < x.s.n; ++n) {
            for (int64_t i = 0; i < plane; ++i) sum += x.v[static_cast<size_t>((n * x.s.c + c) * plane + i)];
        }
        const double mean = sum / static_cast<double>(m);
        for (int64_t n = 0; n < x.s.n; ++n) {
            for (int64_t i = 0; i < plane; ++i) {
                const double d = x.v[static_cast<size_t>((n * x.s.c + c) * plane + i)] - mean;
                sq += d * d;
            }
        }
        const double inv = 1.0 / std::sqrt(sq / static_cast<double>(m) + eps);
        const double g = static_cast<double>(gamma.data()[c]);
        const double b = static_cast<double>(beta.data()[c]);
        for (int64_t n = 0; n < x.s.n; ++n) {
            for (int64_t i = 0; i < plane; ++i) {
                const size_t idx = static_cast<size_t>((n * x.s.c + c) * plane + i);
                o.v[idx] = (x.v[idx] - mean) * inv * g + b;
            }
        }
    }
    return o;
}

DT d_emax_bcast(const Tensor& h0, const DT& x) {
    DT o;
    o.s = x.s;
    o.v.resize(x.v.size());
    const int64_t plane = x.s.h * x.s.w;
    for (int64_t n = 0; n < x.s.n; ++n) {
        for (int64_t c = 0; c < x.s.c; ++c) {
            const double h = static_cast<double>(h0.data()[c]);
            for (int64_t i = 0; i < plane; ++i) {
                const size_t idx = static_cast<size_t>((n * x.s.c + c) * plane + i);
                o.v[idx] = std::max(h, x.v[idx]);
            }
        }
    }
    return o;
}

DT d_sigmoid(const DT& x) {
    DT o;
    o.s = x.s;
    o.v.resize(x.v.size());
    for (size_t i = 0; i < x.v.size(); ++i) o.v[i] = 1.0 / (1.0 + std::exp(-x.v[i]));
    return o;
}

DT d_mul(const DT& a, const DT& b) {
    DT o;
    o.s = a.s;
    o.v.resize(a.v.size());
    for (size_t i = 0; i < a.v.size(); ++i) o.v[i] = a.v[i] * b.v[i];
    return o;
}

DT d_gap(const DT& x) {
    DT o;
    o.s = {x.s.n, x.s.c, 1, 1};
    o.v.resize(static_cast<size_t>(x.s.n * x.s.c));
    const int64_t plane = x.s.h * x.s.w;
    for (int64_t nc = 0; nc < x.s.n * x.s.c; ++nc) {
        double acc = 0.0;
        for (int64_t i = 0; i < plane; ++i) acc += x.v[static_cast<size_t>(nc * plane + i)];
        o.v[static_cast<size_t>(nc)] = acc / static_cast<double>(plane);
    }
    return o;
}

DT d_broadcast(const DT& x, int64_t h, int64_t w) {
    DT o;
    o.s = {x.s.n, x.s.c, h, w};
    o.v.resize(static_cast<size_t>(o.s.numel()));
    for (int64_t nc = 0; nc < x.s.n * x.s.c; ++nc) {
        for (int64_t i = 0; i < h * w; ++i) o.v[static_cast<size_t>(nc * h * w + i)] = x.v[static_cast<size_t>(nc)];
    }
    return o;
}

DT d_concat(const std::vector<DT>& parts) {
    DT o;
    o.s = parts.front().s;
    o.s.c = 0;
    for (const DT& p : parts) o.s.c += p.s.c;
    o.v.resize(static_cast<size_t>(o.s.numel()));
    const int64_t plane = o.s.h * o.s.w;
    for (int64_t n = 0; n < o.s.n; ++n) {
        int64_t off = 0;
        for (const DT& p : parts) {
            for (int64_t c = 0; c < p.s.c; ++c) {
                for (int64_t i = 0; i < plane; ++i) {
                    o.v[static_cast<size_t>(((n * o.s.c + off + c) * plane) + i)] =
                        p.v[static_cast<size_t>(((n * p.s.c + c) * plane) + i)];
                }
            }
            off += p.s.c;
        }
    }
    return o;
}

DT d_maxpool2(const DT& x) {  // flat 2x2 dilation at stride 2
    DT o;
    o.s = {x.s.n, x.s.c, x.s.h / 2, x.s.w / 2};
    o.v.resize(static_cast<size_t>(o.s.numel()));
    for (int64_t nc = 0; nc < x.s.n * x.s.c; ++nc) {
        const double* p = x.v.data() + nc * x.s.h * x.s.w;
        double* q = o.v.data() + nc * o.s.h * o.s.w;
        for (int64_t y = 0; y < o.s.h; ++y) {
            for (int64_t xx = 0; xx < o.s.w; ++xx) {
                const double a = p[(2 * y) * x.s.w + 2 * xx];
                const double b = p[(2 * y) * x.s.w + 2 * xx + 1];
                const double c = p[(2 * y + 1) * x.s.w + 2 * xx];
                const double d = p[(2 * y + 1) * x.s.w + 2 * xx + 1];
                q[y * o.s.w + xx] = std::max(std::max(a, b), std::max(c, d));
            }
        }
    }
    return o;
}

DT d_haar_details(const DT& x) {
    DT o;
    o.s = {x.s.n, 3 * x.s.c, x.s.h / 2, x.s.w / 2};
    o.v.resize(static_cast<size_t>(o.s.numel()));
    const int64_t plane_o = o.s.h * o.s.w;
    for (int64_t n = 0; n < x.s.n; ++n) {
        for (int64_t c = 0; c < x.s.c; ++c) {
            const double* p = x.v.data() + (n * x.s.c + c) * x.s.h * x.s.w;
            double* ov = o.v.data() + (n * o.s.c + 3 * c + 0) * plane_o;
            double* oh = o.v.data() + (n * o.s.c + 3 * c + 1) * plane_o;
            double* od = o.v.data() + (n * o.s.c + 3 * c + 2) * plane_o;
            for (int64_t y = 0; y < o.s.h; ++y) {
                for (int64_t xx = 0; xx < o.s.w; ++xx) {
                    const double a = p[(2 * y) * x.s.w + 2 * xx];
                    const double b = p[(2 * y) * x.s.w + 2 * xx + 1];
                    const double cc = p[(2 * y + 1) * x.s.w + 2 * xx];
                    const double d = p[(2 * y + 1) * x.s.w + 2 * xx + 1];
                    ov[y * o.s.w + xx] = -a - b + cc + d;
                    oh[y * o.s.w + xx] = -a + b - cc + d;
                    od[y * o.s.w + xx] = a - b - cc + d;
                }
            }
        }
    }
    return o;
}

double d_weighted(const DT& t, const Tensor& w) {
    double acc = 0.0;
    for (int64_t i = 0; i < t.s.numel(); ++i) {
        acc += t.v[static_cast<size_t>(i)] * static_cast<double>(w.data()[i]);
    }
    return acc;
}

const Tensor& named(const ParamList& params, const std::string& suffix) {
    for (const NamedParam& p : params) {
        if (p.name.size() >= suffix.size() &&
            p.name.compare(p.name.size() - suffix.size(), suffix.size(), suffix) == 0) {
            return p.tensor;
        }
    }
    throw StateError("gradcheck: no parameter ends with '" + suffix + "'");
}

// ---- per-op case builders ----------------------------------------------

CheckCase case_elementwise(Rng& rng) {
    CheckCase c;
    Shape s{1, 3, 4, 4};
    Tensor a = lattice_tensor(s, rng, 0.1f, 0.0f, 0.01f);
    Tensor b = lattice_tensor(s, rng, 0.1f, 0.03f, 0.04f);
    Tensor h = lattice_tensor({1, 3, 1, 1}, rng, 0.1f, 0.05f, 0.055f);
    Tensor w1 = loss_weights(s, rng);
    Tensor w2 = loss_weights(s, rng);
    c.inputs = {{"a", a, {}}, {"b", b, {}}, {"h", h, {}}};
    auto outputs = [=]() {
        Tensor m = emax(h, sub(a, b));  // broadcast max
        Tensor smooth = sigmoid(mul(scale(a, 0.4f), b));
        Tensor rectified = relu(sub(mul(a, b), offset(a, 0.5f)));
        return std::make_pair(add(m, smooth), rectified);
    };
    c.forward = [=]() {
        auto [p, q] = outputs();
        return add(sum(mul(p, w1)), sum(mul(q, w2)));
    };
    c.value = [=]() {
        NoGradGuard ng;
        auto [p, q] = outputs();
        return weighted_value(p, w1) + weighted_value(q, w2);
    };
    c.eps = 5e-3;
    return c;
}

CheckCase case_dilate(Rng& rng, bool erode) {
    CheckCase c;
    Shape s{1, 2, 6, 6};
    const int k = 2 + static_cast<int>(rng.next_u32() % 2);
    const int stride = 1 + static_cast<int>(rng.next_u32() % 2);
    const int pad = static_cast<int>(rng.next_u32() % 2);
    Tensor f = lattice_tensor(s, rng, 0.1f, 0.0f, 0.01f);
    Tensor h = lattice_tensor({1, 2, k, k}, rng, 0.002f, 0.0f, 0.0005f);
    StructuringElement se = StructuringElement::from_tensor(h, true);
    const int64_t oh = (s.h + 2 * pad - k) / stride + 1;
    const int64_t ow = (s.w + 2 * pad - k) / stride + 1;
    Tensor w = sign_weights({1, 2, oh, ow}, rng);
    c.inputs = {{"f", f, {}}, {"se", se.values(), {}}};
    auto out = [=]() { return erode ? erode2d(f, se, stride, pad) : dilate2d(f, se, stride, pad); };
    c.forward = [=]() { return sum(mul(out(), w)); };
    c.value = [=]() {
        NoGradGuard ng;
        return weighted_value(out(), w);
    };
    c.eps = 1e-2;
    return c;
}

CheckCase case_morph_activation(Rng& rng, int case_index) {
    CheckCase c;
    Shape s{1, 3, 5, 5};
    Tensor f = lattice_tensor(s, rng, 0.1f, 0.0f, 0.01f);
    const bool learned_kernel = case_index % 2 == 1;
    auto params = std::make_shared<MorphActivation>(3, learned_kernel ? 3 : 1);
    for (int64_t i = 0; i < params->h0().numel(); ++i) {
        params->h0().data()[i] = 0.1f * static_cast<float>(rng.uniform_int(0, 24)) + rng.uniform(0.05f, 0.055f);
    }
    if (learned_kernel) {
        Tensor& hv = params->se().values();
        for (int64_t i = 0; i < hv.numel(); ++i) hv.data()[i] = 0.002f * static_cast<float>(i % 9);
    }
    Tensor w = sign_weights(s, rng);
    c.inputs = {{"f", f, {}}, {"h0", params->h0(), {}}};
    if (learned_kernel) c.inputs.push_back({"se", params->se().values(), {}});
    c.forward = [=]() { return sum(mul(morph_activation(f, *params), w)); };
    c.value = [=]() {
        NoGradGuard ng;
        return weighted_value(morph_activation(f, *params), w);
    };
    c.eps = 5e-3;
    return c;
}

CheckCase case_morph_upsample(Rng& rng, int case_index) {
    CheckCase c;
    Shape s{1, 2, 4, 4};
    const int k = case_index % 2 == 0 ? 2 : 3;
    Tensor f = lattice_tensor(s, rng, 0.1f, 0.0f, 0.01f);
    Tensor h = lattice_tensor({1, 2, k, k}, rng, 0.002f, 0.0f, 0.0005f);
    StructuringElement se = StructuringElement::from_tensor(h, true);
    Tensor w = sign_weights({1, 2, 8, 8}, rng);
    c.inputs = {{"f", f, {}}, {"se", se.values(), {}}};
    c.forward = [=]() { return sum(mul(morph_upsample(f, se, 2), w)); };
    c.value = [=]() {
        NoGradGuard ng;
        return weighted_value(morph_upsample(f, se, 2), w);
    };
    c.eps = 1e-2;
    return c;
}

CheckCase case_haar(Rng& rng, int case_index) {
    CheckCase c;
    const bool odd = case_index % 3 == 2;
    Shape s{1, 2, odd ? 7 : 6, odd ? 7 : 6};
    Tensor f = lattice_tensor(s, rng, 0.1f, 0.0f, 0.01f);
    const int64_t oh = (s.h + s.h % 2) / 2;
    const int64_t ow = (s.w + s.w % 2) / 2;
    Tensor wa = sign_weights({1, 2, oh, ow}, rng);
    Tensor wd = sign_weights({1, 6, oh, ow}, rng);
    c.inputs = {{"f", f, {}}};
    c.forward = [=]() {
        HaarSubbands bands = haar_forward(f);
        return add(sum(mul(bands.approx, wa)), sum(mul(bands.details, wd)));
    };
    c.value = [=]() {
        NoGradGuard ng;
        HaarSubbands bands = haar_forward(f);
        return weighted_value(bands.approx, wa) + weighted_value(bands.details, wd);
    };
    c.eps = 5e-3;
    return c;
}

CheckCase case_mhw(Rng& rng, int max_param_coords) {
    CheckCase c;
    Tensor f_rgb = lattice_tensor({2, 2, 8, 8}, rng, 0.05f, 0.0f, 0.005f);
    Tensor f_d = lattice_tensor({2, 1, 8, 8}, rng, 0.05f, 0.02f, 0.025f);
    auto block = std::make_shared<MhwBlock>(2, 1, rng);
    ParamList params;
    block->collect("mhw", params);
    // The zero-initialized expand layers would hide the reduce layers from a
    // single backward pass; give every gate parameter a generic value.
    for (NamedParam& p : params) {
        for (int64_t i = 0; i < p.tensor.numel(); ++i) p.tensor.data()[i] = rng.normal(0.0f, 0.4f);
    }
    Tensor w_rgb = loss_weights({2, 2, 4, 4}, rng);
    Tensor w_d = loss_weights({2, 1, 4, 4}, rng);
    c.inputs = {{"f_rgb", f_rgb, {}}, {"f_d", f_d, {}}};
    for (NamedParam& p : params) {
        c.inputs.push_back({p.name, p.tensor, sample_coords(p.tensor.numel(), max_param_coords, rng)});
    }
    c.forward = [=]() {
        auto [out_rgb, out_d] = mhw_fuse(f_rgb, f_d, *block);
        return add(sum(mul(out_rgb, w_rgb)), sum(mul(out_d, w_d)));
    };
    c.value = [=, params = params]() {
        DT r = d_from(f_rgb);
        DT d = d_from(f_d);
        DT joint = d_concat({d_haar_details(r), d_haar_details(d)});
        auto gate = [&](const char* which) {
            const std::string p = std::string("gate_") + which;
            DT hidden = d_emax_bcast(named(params, p + ".act.h0"),
                                     d_conv(joint, named(params, p + ".c1.w"), named(params, p + ".c1.b"), 1, 0, 1));
            return d_sigmoid(d_conv(hidden, named(params, p + ".c2.w"), named(params, p + ".c2.b"), 1, 0, 1));
        };
        return d_weighted(d_mul(d_maxpool2(r), gate("rgb")), w_rgb) +
               d_weighted(d_mul(d_maxpool2(d), gate("d")), w_d);
    };
    c.eps = 1e-2;
    return c;
}

CheckCase case_conv(Rng& rng, int case_index) {
    CheckCase c;
    const bool dilated = case_index % 2 == 1;
    Shape s{2, 3, 6, 6};
    Tensor x = uniform_tensor(s, rng, -1.0f, 1.0f);
    Tensor w = uniform_tensor({4, 3, 3, 3}, rng, -0.5f, 0.5f);
    Tensor b = uniform_tensor({1, 4, 1, 1}, rng, -0.3f, 0.3f);
    const int dilation = dilated ? 2 : 1;
    const int pad = dilated ? 2 : 1;
    const int64_t oh = (s.h + 2 * pad - (dilation * 2 + 1)) + 1;
    Tensor lw = loss_weights({2, 4, oh, oh}, rng);
    c.inputs = {{"x", x, {}}, {"w", w, {}}, {"b", b, {}}};
    c.forward = [=]() { return sum(mul(conv2d(x, w, b, 1, pad, dilation), lw)); };
    c.value = [=]() {
        NoGradGuard ng;
        return weighted_value(conv2d(x, w, b, 1, pad, dilation), lw);
    };
    c.eps = 1e-2;
    return c;
}

CheckCase case_batchnorm(Rng& rng, int case_index) {
    CheckCase c;
    Shape s{3, 4, 5, 5};
    Tensor x = uniform_tensor(s, rng, -1.5f, 1.5f);
    Tensor gamma = uniform_tensor({1, 4, 1, 1}, rng, 0.5f, 1.5f);
    Tensor beta = uniform_tensor({1, 4, 1, 1}, rng, -0.5f, 0.5f);
    auto rmean = std::make_shared<Tensor>(uniform_tensor({1, 4, 1, 1}, rng, -0.2f, 0.2f, false));
    auto rvar = std::make_shared<Tensor>(uniform_tensor({1, 4, 1, 1}, rng, 0.5f, 1.5f, false));
    const Mode mode = case_index % 4 == 3 ? Mode::Eval : Mode::Train;
    Tensor lw = loss_weights(s, rng);
    c.inputs = {{"x", x, {}}, {"gamma", gamma, {}}, {"beta", beta, {}}};
    c.forward = [=]() { return sum(mul(batchnorm2d(x, gamma, beta, *rmean, *rvar, mode), lw)); };
    c.value = [=]() {
        NoGradGuard ng;
        return weighted_value(batchnorm2d(x, gamma, beta, *rmean, *rvar, mode), lw);
    };
    c.eps = 2e-2;
    return c;
}

CheckCase case_aspp(Rng& rng, int max_param_coords) {
    CheckCase c;
    auto head = std::make_shared<Aspp>(6, 8, rng);
    Tensor x = uniform_tensor({2, 6, 6, 6}, rng, -1.0f, 1.0f);
    // Separate the two batch samples so the pool-branch batch statistics stay
    // well conditioned (they normalize only two values per channel).
    for (int64_t i = 0; i < x.numel() / 2; ++i) x.data()[i] -= 0.4f;
    for (int64_t i = x.numel() / 2; i < x.numel(); ++i) x.data()[i] += 0.4f;
    ParamList params;
    head->collect("aspp", params);
    for (NamedParam& p : params) {
        if (p.name.find(".act.h0") != std::string::npos) {
            for (int64_t i = 0; i < p.tensor.numel(); ++i) p.tensor.data()[i] = rng.uniform(-0.6f, 0.6f);
        }
    }
    Tensor lw = loss_weights({2, 8, 6, 6}, rng);
    c.inputs = {{"x", x, {}}};
    for (NamedParam& p : params) {
        c.inputs.push_back({p.name, p.tensor, sample_coords(p.tensor.numel(), max_param_coords, rng)});
    }
    c.forward = [=]() { return sum(mul(head->forward(x, Mode::Train), lw)); };
    c.value = [=, params = params]() {
        DT in = d_from(x);
        auto branch = [&](const char* name, int k, int pad, int dil, const DT& src) {
            const std::string p = name;
            DT y = d_conv(src, named(params, p + ".conv.w"), named(params, p + ".conv.b"), 1, pad, dil);
            y = d_bn_train(y, named(params, p + ".bn.gamma"), named(params, p + ".bn.beta"));
            (void)k;
            return d_emax_bcast(named(params, p + ".act.h0"), y);
        };
        DT b0 = branch("aspp.b0", 1, 0, 1, in);
        DT b1 = branch("aspp.b1", 3, 2, 2, in);
        DT b2 = branch("aspp.b2", 3, 4, 4, in);
        DT b3 = d_broadcast(branch("aspp.b3", 1, 0, 1, d_gap(in)), in.s.h, in.s.w);
        DT cat = d_concat({b0, b1, b2, b3});
        DT out = d_conv(cat, named(params, "aspp.project.w"), named(params, "aspp.project.b"), 1, 0, 1);
        return d_weighted(out, lw);
    };
    c.eps = 1e-2;
    return c;
}

CheckCase case_cross_entropy(Rng& rng) {
    CheckCase c;
    Shape s{2, 4, 5, 5};
    Tensor logits = uniform_tensor(s, rng, -2.0f, 2.0f);
    std::vector<float> lab(static_cast<size_t>(2 * 5 * 5));
    for (float& v : lab) {
        const int draw = rng.uniform_int(0, 9);
        v = draw == 9 ? -1.0f : static_cast<float>(draw % 4);  // ~10% ignored
    }
    Tensor labels = Tensor::from_vector({2, 1, 5, 5}, std::move(lab));
    c.inputs = {{"logits", logits, {}}};
    c.forward = [=]() { return scale(cross_entropy(logits, labels, -1), 8.0f); };
    c.value = [=]() {
        // Independent double path over the raw logits.
        const Shape& ls = logits.shape();
        const int64_t plane = ls.h * ls.w;
        const float* lp = logits.data();
        const float* yp = labels.data();
        double acc = 0.0;
        int64_t counted = 0;
        for (int64_t n = 0; n < ls.n; ++n) {
            for (int64_t i = 0; i < plane; ++i) {
                const int target = static_cast<int>(std::lround(yp[n * plane + i]));
                if (target < 0) continue;
                double mx = -1e300;
                for (int64_t cc = 0; cc < ls.c; ++cc) {
                    mx = std::max(mx, static_cast<double>(lp[(n * ls.c + cc) * plane + i]));
                }
                double denom = 0.0;
                for (int64_t cc = 0; cc < ls.c; ++cc) {
                    denom += std::exp(static_cast<double>(lp[(n * ls.c + cc) * plane + i]) - mx);
                }
                acc += std::log(denom) - (static_cast<double>(lp[(n * ls.c + target) * plane + i]) - mx);
                ++counted;
            }
        }
        return 8.0 * acc / static_cast<double>(counted);
    };
    c.eps = 1e-2;
    return c;
}

CheckCase build_case(const std::string& op, int case_index, uint64_t seed, int max_param_coords) {
    Rng rng(Rng::mix(seed, std::hash<std::string>{}(op) ^ static_cast<uint64_t>(case_index)));
    if (op == "elementwise") return case_elementwise(rng);
    if (op == "dilate2d") return case_dilate(rng, false);
    if (op == "erode2d") return case_dilate(rng, true);
    if (op == "morph_activation") return case_morph_activation(rng, case_index);
    if (op == "morph_upsample") return case_morph_upsample(rng, case_index);
    if (op == "haar_forward") return case_haar(rng, case_index);
    if (op == "mhw_fuse") return case_mhw(rng, max_param_coords);
    if (op == "conv2d") return case_conv(rng, case_index);
    if (op == "batchnorm2d") return case_batchnorm(rng, case_index);
    if (op == "aspp") return case_aspp(rng, max_param_coords);
    if (op == "cross_entropy") return case_cross_entropy(rng);
    throw ContractError("gradcheck: unknown op '" + op + "'");
}

// ---- comparison machinery ----------------------------------------------

std::vector<std::vector<float>> analytic_gradients(CheckCase& c) {
    for (CheckInput& in : c.inputs) in.tensor.zero_grad();
    Tensor loss = c.forward();
    backward(loss);
    std::vector<std::vector<float>> grads;
    grads.reserve(c.inputs.size());
    for (CheckInput& in : c.inputs) {
        if (in.tensor.has_grad()) {
            auto g = in.tensor.grad();
            grads.emplace_back(g.begin(), g.end());
        } else {
            grads.emplace_back(static_cast<size_t>(in.tensor.numel()), 0.0f);
        }
        in.tensor.zero_grad();
    }
    return grads;
}

double analytic_at(CheckCase& c, size_t input_index, int64_t coord, float value) {
    Tensor t = c.inputs[input_index].tensor;
    const float orig = t.data()[coord];
    t.data()[coord] = value;
    for (CheckInput& in : c.inputs) in.tensor.zero_grad();
    Tensor loss = c.forward();
    backward(loss);
    double g = 0.0;
    if (t.has_grad()) g = static_cast<double>(t.grad()[static_cast<size_t>(coord)]);
    for (CheckInput& in : c.inputs) in.tensor.zero_grad();
    t.data()[coord] = orig;
    return g;
}

// The +-eps interval straddles a subgradient kink when the analytic gradient
// differs between its two ends; such coordinates are not tie-free points. The
// jump must be large enough to account for the observed mismatch, otherwise
// the mismatch is a genuine violation.
bool interval_has_kink(CheckCase& c, size_t input_index, int64_t coord, double eps, double mismatch) {
    Tensor t = c.inputs[input_index].tensor;
    const float orig = t.data()[coord];
    const float hi = static_cast<float>(static_cast<double>(orig) + eps);
    const float lo = static_cast<float>(static_cast<double>(orig) - eps);
    const double g_hi = analytic_at(c, input_index, coord, hi);
    const double g_lo = analytic_at(c, input_index, coord, lo);
    return std::abs(g_hi - g_lo) >= 0.4 * mismatch;
}

}  // namespace

const std::vector<std::string>& gradcheck_all_ops() {
    static const std::vector<std::string> ops = {
        "elementwise", "dilate2d",  "erode2d", "morph_activation", "morph_upsample", "haar_forward",
        "mhw_fuse",    "conv2d",    "batchnorm2d", "aspp",         "cross_entropy"};
    return ops;
}

std::vector<GradViolation> run_gradcheck(const GradCheckOptions& opts) {
    const std::vector<std::string>& ops = opts.ops.empty() ? gradcheck_all_ops() : opts.ops;
    std::vector<GradViolation> violations;

    for (const std::string& op : ops) {
        bool known = false;
        for (const std::string& k : gradcheck_all_ops()) known = known || k == op;
        if (!known) throw ContractError("gradcheck: unknown op '" + op + "'");

        for (int ci = 0; ci < opts.cases_per_op; ++ci) {
            CheckCase c = build_case(op, ci, opts.seed, opts.max_param_coords);
            const std::vector<std::vector<float>> analytic = analytic_gradients(c);

            for (size_t ii = 0; ii < c.inputs.size(); ++ii) {
                CheckInput& in = c.inputs[ii];
                std::vector<int64_t> coords = in.coords;
                if (coords.empty()) {
                    coords.resize(static_cast<size_t>(in.tensor.numel()));
                    std::iota(coords.begin(), coords.end(), 0);
                }
                float* data = in.tensor.data();
                auto slope_at = [&](int64_t coord, double eps) {
                    const float orig = data[coord];
                    const float hi = static_cast<float>(static_cast<double>(orig) + eps);
                    const float lo = static_cast<float>(static_cast<double>(orig) - eps);
                    NoGradGuard ng;
                    data[coord] = hi;
                    const double f_hi = c.value();
                    data[coord] = lo;
                    const double f_lo = c.value();
                    data[coord] = orig;
                    return (f_hi - f_lo) / (static_cast<double>(hi) - static_cast<double>(lo));
                };
                for (int64_t coord : coords) {
                    // Central differences trade curvature truncation (grows
                    // with eps^2) against float32 evaluation noise (grows with
                    // 1/eps), so no single step suits every coordinate. Check
                    // a wide step, a narrow one and their Richardson
                    // combination; agreement with any of them passes.
                    const double s_wide = slope_at(coord, c.eps);
                    const double s_narrow = slope_at(coord, c.eps / 4.0);
                    const double s_rich = (16.0 * s_narrow - s_wide) / 15.0;
                    const double a = static_cast<double>(analytic[ii][static_cast<size_t>(coord)]);

                    bool ok = false;
                    double mismatch = 1e300;
                    for (double numeric : {s_wide, s_narrow, s_rich}) {
                        const double mag = std::max(std::abs(a), std::abs(numeric));
                        mismatch = std::min(mismatch, std::abs(a - numeric));
                        if (std::abs(a - numeric) <= std::max(opts.tol * mag, 1.5e-4)) {
                            ok = true;
                            break;
                        }
                    }
                    if (ok) continue;
                    if (interval_has_kink(c, ii, coord, c.eps, mismatch)) continue;

                    GradViolation v;
                    v.op = op;
                    v.case_index = ci;
                    v.coordinate = in.name + "[" + std::to_string(coord) + "]";
                    v.analytic = a;
                    v.numeric = s_rich;
                    v.error = std::abs(a - s_rich) / std::max({std::abs(a), std::abs(s_rich), 0.15});
                    violations.push_back(std::move(v));
                }
            }
        }
    }
    return violations;
}

}  // namespace haarnet
