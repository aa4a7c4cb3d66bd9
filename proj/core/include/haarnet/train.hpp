#pragma once

#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "haarnet/data.hpp"
#include "haarnet/metrics.hpp"
#include "haarnet/nn.hpp"
#include "haarnet/params.hpp"
#include "haarnet/tensor_file.hpp"

namespace haarnet {

struct TrainConfig {
    double lr0 = 5e-3;          // initial learning rate
    int epochs = 300;
    float momentum = 0.9f;
    double poly_exponent = 0.9;
    int batch = 8;
    uint64_t seed = 0;
    int save_every = 0;         // checkpoint every N epochs; 0 = final only
    bool use_mup = true;
    bool use_mrelu = true;
    bool use_mhw = true;

    void validate() const;
    HaarNetConfig net(int num_classes) const;
};

// lr0 * (1 - epoch/E)^p; exact lr0 at epoch 0 and exact 0 at epoch E.
double poly_lr(int epoch, const TrainConfig& cfg);

// Mean over non-ignored pixels of -log softmax at the true class,
// max-stabilized. logits (N,K,H,W), labels (N,1,H,W) integral.
Tensor cross_entropy(const Tensor& logits, const Tensor& labels, int ignore_index = -1);

// v <- momentum*v + g;  p <- p - lr*(g + momentum*v).
void sgd_nesterov_step(std::span<float> param, std::span<const float> grad, std::span<float> velocity,
                       float lr, float momentum);

class SgdNesterov {
  public:
    explicit SgdNesterov(float momentum) : momentum_(momentum) {}

    void attach(const ParamList& params);
    // Parameters without a gradient buffer this step are skipped entirely.
    void step(const ParamList& params, double lr);

    float momentum() const { return momentum_; }
    std::vector<Tensor>& velocities() { return velocities_; }
    const std::vector<Tensor>& velocities() const { return velocities_; }

  private:
    float momentum_;
    std::vector<Tensor> velocities_;
};

struct EpochStats {
    int epoch = 0;
    double lr = 0.0;
    double loss = 0.0;
    MetricReport metrics;
};

struct TrainHooks {
    // Called after each epoch; return false to stop early.
    std::function<bool(const EpochStats&)> on_epoch;
};

struct TrainResult {
    int optimizer_steps = 0;
    int epochs_run = 0;
    std::vector<EpochStats> log;
};

inline constexpr const char* kCsvHeader = "epoch,lr,loss,miou,pixel_acc,boundary_f1";

// One training run (optionally resumed at start_epoch). Emits one CSV row per
// epoch with metrics accumulated from the training-pass predictions, and
// checkpoints per save_every plus a final checkpoint.
TrainResult train_loop(HaarNet& model, const std::vector<Scene>& scenes, const TrainConfig& cfg,
                       SgdNesterov& opt, const ChannelStats& stats, int start_epoch = 0,
                       const std::string& csv_path = "", const std::string& checkpoint_path = "",
                       const TrainHooks& hooks = {});

// Checkpoint container: param/<name>, buffer/<name>, opt/<name> plus meta and
// normalization stats. Entry names are stable across versions.
NamedTensors make_checkpoint(HaarNet& model, const SgdNesterov& opt, const ChannelStats& stats, int epoch);
void save_model_checkpoint(const std::string& path, HaarNet& model, const SgdNesterov& opt,
                           const ChannelStats& stats, int epoch);

struct RestoredTraining {
    std::unique_ptr<HaarNet> model;
    std::unique_ptr<SgdNesterov> opt;
    ChannelStats stats;
    int epoch = 0;
    TrainConfig train;  // switches recovered from the checkpoint; schedule fields left default
};

RestoredTraining load_model_checkpoint(const std::string& path);

// Evaluation over a dataset with eval-mode statistics; returns the report.
MetricReport evaluate(HaarNet& model, const std::vector<Scene>& scenes, const ChannelStats& stats,
                      int batch, int boundary_tol = 0);

}  // namespace haarnet
