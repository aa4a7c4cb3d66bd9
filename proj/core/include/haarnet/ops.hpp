#pragma once

#include <vector>

#include "haarnet/tensor.hpp"

namespace haarnet {

// Binary elementwise operators accept identical shapes or one operand shaped
// (1,C,1,1) / (N,C,1,1) that broadcasts over the other. Backward rules:
//   mul routes a*dL to b and b*dL to a; max routes dL to the larger operand
//   (ties to the first); sigmoid routes s*(1-s)*dL; relu passes where x > 0.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor emax(const Tensor& a, const Tensor& b);

Tensor sigmoid(const Tensor& x);
Tensor relu(const Tensor& x);

Tensor scale(const Tensor& x, float factor);
Tensor offset(const Tensor& x, float shift);

// Global reductions to a (1,1,1,1) tensor.
Tensor sum(const Tensor& x);
Tensor reduce_max(const Tensor& x);

// Double-precision sum of the stored values; never records.
double sum_value(const Tensor& x);

Tensor concat_channels(const std::vector<Tensor>& parts);

Tensor global_avg_pool(const Tensor& x);                       // (N,C,H,W) -> (N,C,1,1)
Tensor broadcast_spatial(const Tensor& x, int64_t h, int64_t w);  // (N,C,1,1) -> (N,C,h,w)

Tensor nearest_upsample(const Tensor& x, int factor);

// Replicate the last row/column; used to make odd extents even.
Tensor replicate_pad_edge(const Tensor& x, int pad_bottom, int pad_right);

// Per-pixel argmax over channels as float labels; not differentiable.
Tensor argmax_channel(const Tensor& x);

// Concatenate (1,C,H,W) samples along the batch axis into a detached leaf.
Tensor stack_batch(const std::vector<Tensor>& samples);

bool all_finite(const Tensor& x);

}  // namespace haarnet
