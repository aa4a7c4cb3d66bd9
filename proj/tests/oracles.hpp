#pragma once

// Brute-force reference implementations used as independent oracles. They are
// written straight from the operator definitions with plain nested loops and
// stay independent of the library's execution paths.

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#include "haarnet/morpho.hpp"
#include "haarnet/rng.hpp"
#include "haarnet/tensor.hpp"

namespace oracle {

using haarnet::kNegInf;
using haarnet::kPosInf;
using haarnet::Pad2d;
using haarnet::Rng;
using haarnet::Shape;
using haarnet::Tensor;

// Random tensor with values on the dyadic grid step * [lo_cell, hi_cell].
// Sums and differences of such values are exact in float32, which the
// bit-exact algebra properties rely on.
inline Tensor dyadic_tensor(Shape s, Rng& rng, int lo_cell = -32, int hi_cell = 32,
                            float step = 0.125f) {
    std::vector<float> v(static_cast<size_t>(s.numel()));
    for (float& x : v) x = step * static_cast<float>(rng.uniform_int(lo_cell, hi_cell));
    return Tensor::from_vector(s, std::move(v));
}

inline Tensor uniform_tensor(Shape s, Rng& rng, float lo, float hi) {
    std::vector<float> v(static_cast<size_t>(s.numel()));
    for (float& x : v) x = rng.uniform(lo, hi);
    return Tensor::from_vector(s, std::move(v));
}

// g(x) = max_z f(stride*x + z - pad) + h(z) straight from the definition.
inline Tensor naive_dilate(const Tensor& f, const Tensor& se_values, int stride, Pad2d pad) {
    const Shape& s = f.shape();
    const int k = static_cast<int>(se_values.shape().h);
    const int64_t oh = (s.h + pad.top + pad.bottom - k) / stride + 1;
    const int64_t ow = (s.w + pad.left + pad.right - k) / stride + 1;
    Tensor out = Tensor::zeros({s.n, s.c, oh, ow});
    for (int64_t n = 0; n < s.n; ++n) {
        for (int64_t c = 0; c < s.c; ++c) {
            for (int64_t oy = 0; oy < oh; ++oy) {
                for (int64_t ox = 0; ox < ow; ++ox) {
                    float best = kNegInf;
                    for (int ky = 0; ky < k; ++ky) {
                        for (int kx = 0; kx < k; ++kx) {
                            const int64_t iy = oy * stride + ky - pad.top;
                            const int64_t ix = ox * stride + kx - pad.left;
                            if (iy < 0 || iy >= s.h || ix < 0 || ix >= s.w) continue;
                            best = std::max(best, f.at(n, c, iy, ix) + se_values.at(0, c, ky, kx));
                        }
                    }
                    out.at(n, c, oy, ox) = best;
                }
            }
        }
    }
    return out;
}

inline Tensor naive_erode(const Tensor& f, const Tensor& se_values, int stride, Pad2d pad) {
    const Shape& s = f.shape();
    const int k = static_cast<int>(se_values.shape().h);
    const int64_t oh = (s.h + pad.top + pad.bottom - k) / stride + 1;
    const int64_t ow = (s.w + pad.left + pad.right - k) / stride + 1;
    Tensor out = Tensor::zeros({s.n, s.c, oh, ow});
    for (int64_t n = 0; n < s.n; ++n) {
        for (int64_t c = 0; c < s.c; ++c) {
            for (int64_t oy = 0; oy < oh; ++oy) {
                for (int64_t ox = 0; ox < ow; ++ox) {
                    float best = kPosInf;
                    for (int ky = 0; ky < k; ++ky) {
                        for (int kx = 0; kx < k; ++kx) {
                            const float h = se_values.at(0, c, ky, kx);
                            if (h == kNegInf) continue;
                            const int64_t iy = oy * stride + ky - pad.top;
                            const int64_t ix = ox * stride + kx - pad.left;
                            if (iy < 0 || iy >= s.h || ix < 0 || ix >= s.w) continue;
                            best = std::min(best, f.at(n, c, iy, ix) - h);
                        }
                    }
                    out.at(n, c, oy, ox) = best;
                }
            }
        }
    }
    return out;
}

inline Tensor naive_maxpool2(const Tensor& f) {
    const Shape& s = f.shape();
    Tensor out = Tensor::zeros({s.n, s.c, s.h / 2, s.w / 2});
    for (int64_t n = 0; n < s.n; ++n) {
        for (int64_t c = 0; c < s.c; ++c) {
            for (int64_t y = 0; y < s.h / 2; ++y) {
                for (int64_t x = 0; x < s.w / 2; ++x) {
                    out.at(n, c, y, x) = std::max(std::max(f.at(n, c, 2 * y, 2 * x), f.at(n, c, 2 * y, 2 * x + 1)),
                                                  std::max(f.at(n, c, 2 * y + 1, 2 * x), f.at(n, c, 2 * y + 1, 2 * x + 1)));
                }
            }
        }
    }
    return out;
}

// Stride-2 windowed sums with the three fixed detail kernels, double
// accumulated exactly as the definition states.
inline Tensor naive_haar_details(const Tensor& f) {
    const Shape& s = f.shape();
    static const double kKernels[3][4] = {
        {-1, -1, 1, 1},  // vertical
        {-1, 1, -1, 1},  // horizontal
        {1, -1, -1, 1},  // diagonal
    };
    Tensor out = Tensor::zeros({s.n, 3 * s.c, s.h / 2, s.w / 2});
    for (int64_t n = 0; n < s.n; ++n) {
        for (int64_t c = 0; c < s.c; ++c) {
            for (int band = 0; band < 3; ++band) {
                for (int64_t y = 0; y < s.h / 2; ++y) {
                    for (int64_t x = 0; x < s.w / 2; ++x) {
                        double acc = 0.0;
                        for (int a = 0; a < 2; ++a) {
                            for (int b = 0; b < 2; ++b) {
                                acc += kKernels[band][a * 2 + b] *
                                       static_cast<double>(f.at(n, c, 2 * y + a, 2 * x + b));
                            }
                        }
                        out.at(n, 3 * c + band, y, x) = static_cast<float>(acc);
                    }
                }
            }
        }
    }
    return out;
}

inline Tensor naive_conv(const Tensor& x, const Tensor& w, const Tensor& b, int stride, int pad,
                         int dilation) {
    const Shape& s = x.shape();
    const Shape& ws = w.shape();
    const int k = static_cast<int>(ws.h);
    const int64_t span = static_cast<int64_t>(dilation) * (k - 1) + 1;
    const int64_t oh = (s.h + 2 * pad - span) / stride + 1;
    const int64_t ow = (s.w + 2 * pad - span) / stride + 1;
    Tensor out = Tensor::zeros({s.n, ws.n, oh, ow});
    for (int64_t n = 0; n < s.n; ++n) {
        for (int64_t co = 0; co < ws.n; ++co) {
            for (int64_t oy = 0; oy < oh; ++oy) {
                for (int64_t ox = 0; ox < ow; ++ox) {
                    double acc = static_cast<double>(b.at(0, co, 0, 0));
                    for (int64_t ci = 0; ci < s.c; ++ci) {
                        for (int ky = 0; ky < k; ++ky) {
                            for (int kx = 0; kx < k; ++kx) {
                                const int64_t iy = oy * stride + static_cast<int64_t>(ky) * dilation - pad;
                                const int64_t ix = ox * stride + static_cast<int64_t>(kx) * dilation - pad;
                                if (iy < 0 || iy >= s.h || ix < 0 || ix >= s.w) continue;
                                acc += static_cast<double>(w.at(co, ci, ky, kx)) * x.at(n, ci, iy, ix);
                            }
                        }
                    }
                    out.at(n, co, oy, ox) = static_cast<float>(acc);
                }
            }
        }
    }
    return out;
}

struct MeanVar {
    double mean;
    double var;
};

inline MeanVar naive_channel_stats(const Tensor& x, int64_t c) {
    const Shape& s = x.shape();
    double sum = 0.0;
    int64_t m = 0;
    for (int64_t n = 0; n < s.n; ++n) {
        for (int64_t y = 0; y < s.h; ++y) {
            for (int64_t xx = 0; xx < s.w; ++xx) {
                sum += static_cast<double>(x.at(n, c, y, xx));
                ++m;
            }
        }
    }
    const double mean = sum / static_cast<double>(m);
    double var = 0.0;
    for (int64_t n = 0; n < s.n; ++n) {
        for (int64_t y = 0; y < s.h; ++y) {
            for (int64_t xx = 0; xx < s.w; ++xx) {
                const double d = static_cast<double>(x.at(n, c, y, xx)) - mean;
                var += d * d;
            }
        }
    }
    return {mean, var / static_cast<double>(m)};
}

inline double naive_cross_entropy(const Tensor& logits, const Tensor& labels, int ignore_index) {
    const Shape& s = logits.shape();
    double total = 0.0;
    int64_t counted = 0;
    for (int64_t n = 0; n < s.n; ++n) {
        for (int64_t y = 0; y < s.h; ++y) {
            for (int64_t x = 0; x < s.w; ++x) {
                const int target = static_cast<int>(std::lround(labels.at(n, 0, y, x)));
                if (target == ignore_index) continue;
                double denom = 0.0;
                for (int64_t c = 0; c < s.c; ++c) denom += std::exp(static_cast<double>(logits.at(n, c, y, x)));
                total += std::log(denom) - static_cast<double>(logits.at(n, target, y, x));
                ++counted;
            }
        }
    }
    return total / static_cast<double>(counted);
}

// Metrics oracle over one label image pair; O(pixels^2) boundary matching.
struct NaiveMetrics {
    double miou;
    double accuracy;
    double boundary_f1;
};

inline NaiveMetrics naive_metrics(const std::vector<int>& pred, const std::vector<int>& gt, int64_t h,
                                  int64_t w, int num_classes, int tol) {
    std::vector<int64_t> confusion(static_cast<size_t>(num_classes) * num_classes, 0);
    for (int64_t i = 0; i < h * w; ++i) {
        ++confusion[static_cast<size_t>(gt[static_cast<size_t>(i)] * num_classes + pred[static_cast<size_t>(i)])];
    }
    int64_t correct = 0;
    for (int c = 0; c < num_classes; ++c) correct += confusion[static_cast<size_t>(c * num_classes + c)];
    const double accuracy = static_cast<double>(correct) / static_cast<double>(h * w);

    double iou_sum = 0.0;
    int iou_classes = 0;
    for (int c = 0; c < num_classes; ++c) {
        int64_t row = 0, col = 0;
        for (int k = 0; k < num_classes; ++k) {
            row += confusion[static_cast<size_t>(c * num_classes + k)];
            col += confusion[static_cast<size_t>(k * num_classes + c)];
        }
        const int64_t inter = confusion[static_cast<size_t>(c * num_classes + c)];
        const int64_t uni = row + col - inter;
        if (uni > 0) {
            iou_sum += static_cast<double>(inter) / static_cast<double>(uni);
            ++iou_classes;
        }
    }

    auto boundary = [&](const std::vector<int>& img) {
        std::vector<uint8_t> mask(static_cast<size_t>(h * w), 0);
        for (int64_t y = 0; y < h; ++y) {
            for (int64_t x = 0; x < w; ++x) {
                const int v = img[static_cast<size_t>(y * w + x)];
                const bool edge = (y > 0 && img[static_cast<size_t>((y - 1) * w + x)] != v) ||
                                  (y + 1 < h && img[static_cast<size_t>((y + 1) * w + x)] != v) ||
                                  (x > 0 && img[static_cast<size_t>(y * w + x - 1)] != v) ||
                                  (x + 1 < w && img[static_cast<size_t>(y * w + x + 1)] != v);
                mask[static_cast<size_t>(y * w + x)] = edge ? 1 : 0;
            }
        }
        return mask;
    };
    const std::vector<uint8_t> pb = boundary(pred);
    const std::vector<uint8_t> gb = boundary(gt);

    double f1_sum = 0.0;
    int f1_classes = 0;
    for (int c = 0; c < num_classes; ++c) {
        bool present = false;
        for (int64_t i = 0; i < h * w; ++i) present = present || gt[static_cast<size_t>(i)] == c;
        if (!present) continue;
        ++f1_classes;
        std::vector<std::pair<int64_t, int64_t>> pc, gc;
        for (int64_t y = 0; y < h; ++y) {
            for (int64_t x = 0; x < w; ++x) {
                if (pb[static_cast<size_t>(y * w + x)] && pred[static_cast<size_t>(y * w + x)] == c) pc.emplace_back(y, x);
                if (gb[static_cast<size_t>(y * w + x)] && gt[static_cast<size_t>(y * w + x)] == c) gc.emplace_back(y, x);
            }
        }
        if (pc.empty() && gc.empty()) {
            f1_sum += 1.0;
            continue;
        }
        auto matched = [&](const std::vector<std::pair<int64_t, int64_t>>& from,
                           const std::vector<std::pair<int64_t, int64_t>>& to) {
            int64_t m = 0;
            for (const auto& [y, x] : from) {
                bool hit = false;
                for (const auto& [ty, tx] : to) {
                    const int64_t dy = y - ty;
                    const int64_t dx = x - tx;
                    if (dy * dy + dx * dx <= static_cast<int64_t>(tol) * tol) {
                        hit = true;
                        break;
                    }
                }
                if (hit) ++m;
            }
            return m;
        };
        const double precision = pc.empty() ? 0.0 : static_cast<double>(matched(pc, gc)) / static_cast<double>(pc.size());
        const double recall = gc.empty() ? 0.0 : static_cast<double>(matched(gc, pc)) / static_cast<double>(gc.size());
        if (precision + recall > 0.0) f1_sum += 2.0 * precision * recall / (precision + recall);
    }

    NaiveMetrics r;
    r.accuracy = accuracy;
    r.miou = iou_classes > 0 ? iou_sum / iou_classes : 0.0;
    r.boundary_f1 = f1_classes > 0 ? f1_sum / f1_classes : 0.0;
    return r;
}

inline bool all_close(const Tensor& a, const Tensor& b, float tol) {
    if (!(a.shape() == b.shape())) return false;
    for (int64_t i = 0; i < a.numel(); ++i) {
        if (std::abs(a.data()[i] - b.data()[i]) > tol) return false;
    }
    return true;
}

inline bool bit_equal(const Tensor& a, const Tensor& b) {
    if (!(a.shape() == b.shape())) return false;
    for (int64_t i = 0; i < a.numel(); ++i) {
        if (a.data()[i] != b.data()[i]) return false;
    }
    return true;
}

}  // namespace oracle
