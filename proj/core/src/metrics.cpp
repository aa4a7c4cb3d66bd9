#include "haarnet/metrics.hpp"

#include <cmath>

namespace haarnet {

int default_boundary_tol(int64_t h, int64_t w) {
    const double diag = std::sqrt(static_cast<double>(h) * h + static_cast<double>(w) * w);
    const int tol = static_cast<int>(std::ceil(0.0075 * diag));
    return tol < 1 ? 1 : tol;
}

namespace {

std::vector<int> to_labels(const Tensor& t, int num_classes, const char* which) {
    const Shape& s = t.shape();
    if (s.c != 1) throw ShapeError(std::string(which) + ": label tensor must have one channel");
    std::vector<int> out(static_cast<size_t>(t.numel()));
    const float* p = t.data();
    for (int64_t i = 0; i < t.numel(); ++i) {
        const int v = static_cast<int>(std::lround(p[i]));
        if (v < 0 || v >= num_classes) {
            throw ContractError(std::string(which) + ": label " + std::to_string(v) + " outside [0," +
                                std::to_string(num_classes) + ")");
        }
        out[static_cast<size_t>(i)] = v;
    }
    return out;
}

// Boundary mask: a pixel whose 4-neighbourhood (inside the image) contains a
// different label.
std::vector<uint8_t> boundary_mask(const std::vector<int>& labels, int64_t h, int64_t w) {
    std::vector<uint8_t> mask(labels.size(), 0);
    for (int64_t y = 0; y < h; ++y) {
        for (int64_t x = 0; x < w; ++x) {
            const int v = labels[static_cast<size_t>(y * w + x)];
            bool edge = false;
            if (y > 0 && labels[static_cast<size_t>((y - 1) * w + x)] != v) edge = true;
            if (!edge && y + 1 < h && labels[static_cast<size_t>((y + 1) * w + x)] != v) edge = true;
            if (!edge && x > 0 && labels[static_cast<size_t>(y * w + x - 1)] != v) edge = true;
            if (!edge && x + 1 < w && labels[static_cast<size_t>(y * w + x + 1)] != v) edge = true;
            mask[static_cast<size_t>(y * w + x)] = edge ? 1 : 0;
        }
    }
    return mask;
}

// Cells within Euclidean distance tol of any marked source cell.
std::vector<uint8_t> dilate_mask(const std::vector<uint8_t>& src, int64_t h, int64_t w, int tol,
                                 const std::vector<std::pair<int, int>>& disk) {
    std::vector<uint8_t> out(src.size(), 0);
    (void)tol;
    for (int64_t y = 0; y < h; ++y) {
        for (int64_t x = 0; x < w; ++x) {
            if (!src[static_cast<size_t>(y * w + x)]) continue;
            for (const auto& [dy, dx] : disk) {
                const int64_t ny = y + dy;
                const int64_t nx = x + dx;
                if (ny < 0 || ny >= h || nx < 0 || nx >= w) continue;
                out[static_cast<size_t>(ny * w + nx)] = 1;
            }
        }
    }
    return out;
}

std::vector<std::pair<int, int>> disk_offsets(int tol) {
    std::vector<std::pair<int, int>> disk;
    for (int dy = -tol; dy <= tol; ++dy) {
        for (int dx = -tol; dx <= tol; ++dx) {
            if (dy * dy + dx * dx <= tol * tol) disk.emplace_back(dy, dx);
        }
    }
    return disk;
}

}  // namespace

MetricAccumulator::MetricAccumulator(int num_classes, int boundary_tol)
    : num_classes_(num_classes),
      tol_(boundary_tol),
      confusion_(static_cast<size_t>(num_classes) * num_classes, 0),
      pred_boundary_(static_cast<size_t>(num_classes), 0),
      pred_matched_(static_cast<size_t>(num_classes), 0),
      gt_boundary_(static_cast<size_t>(num_classes), 0),
      gt_matched_(static_cast<size_t>(num_classes), 0),
      gt_present_(static_cast<size_t>(num_classes), false) {
    if (num_classes < 2) throw ContractError("metrics: need at least 2 classes");
    if (boundary_tol < 1) throw ContractError("metrics: boundary tolerance must be >= 1 pixel");
}

void MetricAccumulator::add(const Tensor& pred_labels, const Tensor& gt_labels) {
    if (!(pred_labels.shape() == gt_labels.shape())) {
        throw ShapeError("metrics: prediction shape " + pred_labels.shape().str() +
                         " differs from ground truth " + gt_labels.shape().str());
    }
    const Shape& s = pred_labels.shape();
    const std::vector<int> pred = to_labels(pred_labels, num_classes_, "pred");
    const std::vector<int> gt = to_labels(gt_labels, num_classes_, "gt");
    const int64_t plane = s.h * s.w;
    const auto disk = disk_offsets(tol_);

    for (int64_t n = 0; n < s.n; ++n) {
        std::vector<int> pimg(pred.begin() + n * plane, pred.begin() + (n + 1) * plane);
        std::vector<int> gimg(gt.begin() + n * plane, gt.begin() + (n + 1) * plane);

        for (int64_t i = 0; i < plane; ++i) {
            ++confusion_[static_cast<size_t>(gimg[static_cast<size_t>(i)] * num_classes_ +
                                             pimg[static_cast<size_t>(i)])];
            gt_present_[static_cast<size_t>(gimg[static_cast<size_t>(i)])] = true;
        }

        const std::vector<uint8_t> pb = boundary_mask(pimg, s.h, s.w);
        const std::vector<uint8_t> gb = boundary_mask(gimg, s.h, s.w);
        for (int c = 0; c < num_classes_; ++c) {
            std::vector<uint8_t> pmask(static_cast<size_t>(plane), 0);
            std::vector<uint8_t> gmask(static_cast<size_t>(plane), 0);
            bool any = false;
            for (int64_t i = 0; i < plane; ++i) {
                if (pb[static_cast<size_t>(i)] && pimg[static_cast<size_t>(i)] == c) {
                    pmask[static_cast<size_t>(i)] = 1;
                    any = true;
                }
                if (gb[static_cast<size_t>(i)] && gimg[static_cast<size_t>(i)] == c) {
                    gmask[static_cast<size_t>(i)] = 1;
                    any = true;
                }
            }
            if (!any) continue;
            const std::vector<uint8_t> near_g = dilate_mask(gmask, s.h, s.w, tol_, disk);
            const std::vector<uint8_t> near_p = dilate_mask(pmask, s.h, s.w, tol_, disk);
            for (int64_t i = 0; i < plane; ++i) {
                if (pmask[static_cast<size_t>(i)]) {
                    ++pred_boundary_[static_cast<size_t>(c)];
                    if (near_g[static_cast<size_t>(i)]) ++pred_matched_[static_cast<size_t>(c)];
                }
                if (gmask[static_cast<size_t>(i)]) {
                    ++gt_boundary_[static_cast<size_t>(c)];
                    if (near_p[static_cast<size_t>(i)]) ++gt_matched_[static_cast<size_t>(c)];
                }
            }
        }
    }
}

MetricReport MetricAccumulator::report() const {
    MetricReport r;
    r.num_classes = num_classes_;
    r.confusion = confusion_;
    r.per_class_iou.assign(static_cast<size_t>(num_classes_), 0.0);

    int64_t total = 0;
    int64_t correct = 0;
    for (int g = 0; g < num_classes_; ++g) {
        for (int p = 0; p < num_classes_; ++p) {
            const int64_t v = confusion_[static_cast<size_t>(g * num_classes_ + p)];
            total += v;
            if (g == p) correct += v;
        }
    }
    r.pixel_accuracy = total > 0 ? static_cast<double>(correct) / static_cast<double>(total) : 0.0;

    int iou_classes = 0;
    double iou_sum = 0.0;
    for (int c = 0; c < num_classes_; ++c) {
        int64_t row = 0;
        int64_t col = 0;
        for (int k = 0; k < num_classes_; ++k) {
            row += confusion_[static_cast<size_t>(c * num_classes_ + k)];
            col += confusion_[static_cast<size_t>(k * num_classes_ + c)];
        }
        const int64_t inter = confusion_[static_cast<size_t>(c * num_classes_ + c)];
        const int64_t uni = row + col - inter;
        if (uni > 0) {
            r.per_class_iou[static_cast<size_t>(c)] = static_cast<double>(inter) / static_cast<double>(uni);
            iou_sum += r.per_class_iou[static_cast<size_t>(c)];
            ++iou_classes;
        }
    }
    r.miou = iou_classes > 0 ? iou_sum / iou_classes : 0.0;

    int f1_classes = 0;
    double f1_sum = 0.0;
    for (int c = 0; c < num_classes_; ++c) {
        if (!gt_present_[static_cast<size_t>(c)]) continue;
        ++f1_classes;
        const int64_t tp = pred_boundary_[static_cast<size_t>(c)];
        const int64_t tg = gt_boundary_[static_cast<size_t>(c)];
        if (tp == 0 && tg == 0) {
            f1_sum += 1.0;  // no boundary anywhere and none predicted
            continue;
        }
        const double precision = tp > 0 ? static_cast<double>(pred_matched_[static_cast<size_t>(c)]) /
                                              static_cast<double>(tp)
                                        : 0.0;
        const double recall = tg > 0 ? static_cast<double>(gt_matched_[static_cast<size_t>(c)]) /
                                           static_cast<double>(tg)
                                     : 0.0;
        if (precision + recall > 0.0) f1_sum += 2.0 * precision * recall / (precision + recall);
    }
    r.boundary_f1 = f1_classes > 0 ? f1_sum / f1_classes : 0.0;
    return r;
}

MetricReport metrics(const Tensor& pred_labels, const Tensor& gt_labels, int num_classes, int boundary_tol) {
    MetricAccumulator acc(num_classes, boundary_tol);
    acc.add(pred_labels, gt_labels);
    return acc.report();
}

}  // namespace haarnet
