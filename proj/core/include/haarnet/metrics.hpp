#pragma once

#include <cstdint>
#include <vector>

#include "haarnet/tensor.hpp"

namespace haarnet {

struct MetricReport {
    double miou = 0.0;
    double pixel_accuracy = 0.0;
    double boundary_f1 = 0.0;
    std::vector<double> per_class_iou;    // NaN-free: classes with empty union report 0 and are
                                          // excluded from the mean
    std::vector<int64_t> confusion;       // K*K row-major, [gt*K + pred]
    int num_classes = 0;
};

// ceil(0.0075 * image diagonal), at least 1 pixel.
int default_boundary_tol(int64_t h, int64_t w);

// Streaming evaluation over batches of (N,1,H,W) integral label tensors.
// Boundary pixels are those with an in-image 4-neighbour of a different
// label; a predicted boundary pixel counts as matched when a ground-truth
// boundary pixel of the same class lies within Euclidean distance tol.
class MetricAccumulator {
  public:
    MetricAccumulator(int num_classes, int boundary_tol);

    void add(const Tensor& pred_labels, const Tensor& gt_labels);
    MetricReport report() const;

  private:
    int num_classes_;
    int tol_;
    std::vector<int64_t> confusion_;
    std::vector<int64_t> pred_boundary_, pred_matched_;
    std::vector<int64_t> gt_boundary_, gt_matched_;
    std::vector<bool> gt_present_;
};

MetricReport metrics(const Tensor& pred_labels, const Tensor& gt_labels, int num_classes, int boundary_tol);

}  // namespace haarnet
