#pragma once

#include "haarnet/params.hpp"
#include "haarnet/rng.hpp"
#include "haarnet/tensor.hpp"

namespace haarnet {

enum class Mode { Train, Eval };

// Cross-correlation with bias, differentiable in input, weights and bias.
Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, int stride, int padding,
              int dilation = 1);

class Conv2d {
  public:
    struct Opts {
        int stride = 1;
        int padding = 0;
        int dilation = 1;
    };

    // Kaiming-uniform weights (bound sqrt(6/fan_in)), zero bias.
    Conv2d(int c_in, int c_out, int ksize, Opts opts, Rng& rng);
    static Conv2d with_weights(Tensor weight, Tensor bias, Opts opts);

    Tensor forward(const Tensor& x) const { return conv2d(x, weight_, bias_, opts_.stride, opts_.padding, opts_.dilation); }

    Tensor& weight() { return weight_; }
    const Tensor& weight() const { return weight_; }
    Tensor& bias() { return bias_; }
    const Tensor& bias() const { return bias_; }

    void collect(const std::string& prefix, ParamList& out);

  private:
    Conv2d() = default;
    Tensor weight_;  // (C_out, C_in, k, k)
    Tensor bias_;    // (1, C_out, 1, 1)
    Opts opts_;
};

// Per-channel standardization with learnable scale/shift. Train mode uses
// batch statistics (batch >= 2 required) and folds them into the running
// estimates with momentum 0.1; eval mode applies the running estimates.
Tensor batchnorm2d(const Tensor& x, const Tensor& gamma, const Tensor& beta, Tensor& running_mean,
                   Tensor& running_var, Mode mode, float momentum = 0.1f, float eps = 1e-5f);

class BatchNorm2d {
  public:
    explicit BatchNorm2d(int channels, float momentum = 0.1f, float eps = 1e-5f);

    Tensor forward(const Tensor& x, Mode mode) {
        return batchnorm2d(x, gamma_, beta_, running_mean_, running_var_, mode, momentum_, eps_);
    }

    Tensor& gamma() { return gamma_; }
    Tensor& beta() { return beta_; }
    Tensor& running_mean() { return running_mean_; }
    Tensor& running_var() { return running_var_; }

    void collect(const std::string& prefix, ParamList& out);
    void collect_buffers(const std::string& prefix, ParamList& out);

  private:
    Tensor gamma_, beta_;
    Tensor running_mean_, running_var_;
    float momentum_;
    float eps_;
};

}  // namespace haarnet
