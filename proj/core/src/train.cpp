#include "haarnet/train.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>

#include "haarnet/ops.hpp"
#include "haarnet/rng.hpp"

namespace haarnet {

namespace {

using detail::TensorImpl;

}  // namespace

void TrainConfig::validate() const {
    if (!(lr0 > 0.0)) throw ContractError("train config: lr0 must be positive");
    if (momentum < 0.0f || momentum >= 1.0f) throw ContractError("train config: momentum must be in [0,1)");
    if (epochs < 1) throw ContractError("train config: epochs must be >= 1");
    if (batch < 2) throw ContractError("train config: batch must be >= 2 (batchnorm needs it)");
    if (save_every < 0) throw ContractError("train config: save_every must be >= 0");
}

HaarNetConfig TrainConfig::net(int num_classes) const {
    HaarNetConfig c;
    c.num_classes = num_classes;
    c.use_mup = use_mup;
    c.use_mrelu = use_mrelu;
    c.use_mhw = use_mhw;
    c.seed = seed;
    return c;
}

double poly_lr(int epoch, const TrainConfig& cfg) {
    if (epoch < 0 || epoch > cfg.epochs) {
        throw ContractError("poly_lr: epoch " + std::to_string(epoch) + " outside [0," +
                            std::to_string(cfg.epochs) + "]");
    }
    const double frac = 1.0 - static_cast<double>(epoch) / static_cast<double>(cfg.epochs);
    return cfg.lr0 * std::pow(frac, cfg.poly_exponent);
}

Tensor cross_entropy(const Tensor& logits, const Tensor& labels, int ignore_index) {
    const Shape& s = logits.shape();
    const Shape& ls = labels.shape();
    if (ls.n != s.n || ls.c != 1 || ls.h != s.h || ls.w != s.w) {
        throw ShapeError("cross_entropy: labels " + ls.str() + " do not match logits " + s.str());
    }
    const int64_t klass = s.c;
    const int64_t plane = s.h * s.w;
    const float* lp = logits.data();
    const float* yp = labels.data();

    // Per-pixel softmax probabilities are kept for the backward rule.
    std::vector<float> probs(static_cast<size_t>(s.numel()));
    std::vector<int32_t> targets(static_cast<size_t>(s.n * plane));
    double loss_acc = 0.0;
    int64_t counted = 0;
    for (int64_t n = 0; n < s.n; ++n) {
        for (int64_t i = 0; i < plane; ++i) {
            const int target = static_cast<int>(std::lround(yp[n * plane + i]));
            if (target == ignore_index) {
                targets[static_cast<size_t>(n * plane + i)] = -1;
                continue;
            }
            if (target < 0 || target >= klass) {
                throw ContractError("cross_entropy: label " + std::to_string(target) + " outside [0," +
                                    std::to_string(klass) + ")");
            }
            targets[static_cast<size_t>(n * plane + i)] = target;
            float max_logit = kNegInf;
            for (int64_t c = 0; c < klass; ++c) {
                max_logit = std::max(max_logit, lp[(n * klass + c) * plane + i]);
            }
            double denom = 0.0;
            for (int64_t c = 0; c < klass; ++c) {
                denom += std::exp(static_cast<double>(lp[(n * klass + c) * plane + i]) - max_logit);
            }
            for (int64_t c = 0; c < klass; ++c) {
                probs[static_cast<size_t>((n * klass + c) * plane + i)] = static_cast<float>(
                    std::exp(static_cast<double>(lp[(n * klass + c) * plane + i]) - max_logit) / denom);
            }
            loss_acc += std::log(denom) -
                        (static_cast<double>(lp[(n * klass + target) * plane + i]) - max_logit);
            ++counted;
        }
    }
    if (counted == 0) throw ContractError("cross_entropy: every pixel carries the ignore index");
    const float loss = static_cast<float>(loss_acc / static_cast<double>(counted));

    auto backprop = [probs = std::move(probs), targets = std::move(targets), klass, plane,
                     counted](TensorImpl& self) {
        TensorImpl& lin = *self.parents[0];
        if (!lin.requires_grad) return;
        lin.ensure_grad();
        const float g = self.grad[0] / static_cast<float>(counted);
        const int64_t batch = lin.shape.n;
        for (int64_t n = 0; n < batch; ++n) {
            for (int64_t i = 0; i < plane; ++i) {
                const int32_t target = targets[static_cast<size_t>(n * plane + i)];
                if (target < 0) continue;
                for (int64_t c = 0; c < klass; ++c) {
                    const size_t idx = static_cast<size_t>((n * klass + c) * plane + i);
                    const float p = probs[idx];
                    lin.grad[idx] += g * (p - (c == target ? 1.0f : 0.0f));
                }
            }
        }
    };
    return detail::make_op({1, 1, 1, 1}, {loss}, {logits, labels}, std::move(backprop));
}

void sgd_nesterov_step(std::span<float> param, std::span<const float> grad, std::span<float> velocity,
                       float lr, float momentum) {
    if (param.size() != grad.size() || param.size() != velocity.size()) {
        throw ShapeError("sgd_nesterov_step: param/grad/state lengths differ");
    }
    for (size_t i = 0; i < param.size(); ++i) {
        const float v = momentum * velocity[i] + grad[i];
        velocity[i] = v;
        param[i] -= lr * (grad[i] + momentum * v);
    }
}

void SgdNesterov::attach(const ParamList& params) {
    velocities_.clear();
    velocities_.reserve(params.size());
    for (const NamedParam& p : params) velocities_.push_back(Tensor::zeros(p.tensor.shape()));
}

void SgdNesterov::step(const ParamList& params, double lr) {
    if (velocities_.size() != params.size()) {
        throw StateError("sgd: optimizer not attached to this parameter list");
    }
    const float lrf = static_cast<float>(lr);
    for (size_t i = 0; i < params.size(); ++i) {
        Tensor t = params[i].tensor;
        if (!t.has_grad()) continue;
        sgd_nesterov_step(t.values(), t.grad(), velocities_[i].values(), lrf, momentum_);
    }
}

namespace {

void append_csv_row(std::ofstream& out, const EpochStats& row) {
    char buf[256];
    std::snprintf(buf, sizeof(buf), "%d,%.9g,%.9g,%.9g,%.9g,%.9g", row.epoch, row.lr, row.loss,
                  row.metrics.miou, row.metrics.pixel_accuracy, row.metrics.boundary_f1);
    out << buf << "\n";
    out.flush();
}

}  // namespace

TrainResult train_loop(HaarNet& model, const std::vector<Scene>& scenes, const TrainConfig& cfg,
                       SgdNesterov& opt, const ChannelStats& stats, int start_epoch,
                       const std::string& csv_path, const std::string& checkpoint_path,
                       const TrainHooks& hooks) {
    cfg.validate();
    if (scenes.empty()) throw ContractError("train_loop: dataset is empty");
    if (start_epoch < 0 || start_epoch >= cfg.epochs) {
        throw ContractError("train_loop: start epoch outside schedule");
    }

    ParamList params = model.named_params();
    if (opt.velocities().empty()) opt.attach(params);

    const Shape& ss = scenes.front().rgb.shape();
    const int tol = default_boundary_tol(ss.h, ss.w);
    const int num_classes = model.config().num_classes;

    std::vector<Tensor> norm_rgb;
    norm_rgb.reserve(scenes.size());
    for (const Scene& s : scenes) norm_rgb.push_back(normalize_rgb(s.rgb, stats));

    std::ofstream csv;
    if (!csv_path.empty()) {
        csv.open(csv_path, start_epoch == 0 ? std::ios::trunc : std::ios::app);
        if (!csv) throw IoError(csv_path + ": cannot open for writing");
        if (start_epoch == 0) csv << kCsvHeader << "\n";
    }

    TrainResult result;
    for (int epoch = start_epoch; epoch < cfg.epochs; ++epoch) {
        const double lr = poly_lr(epoch, cfg);

        std::vector<size_t> order(scenes.size());
        std::iota(order.begin(), order.end(), 0u);
        Rng shuffle_rng(Rng::mix(cfg.seed, 0xE90C0000ull + static_cast<uint64_t>(epoch)));
        shuffle_rng.shuffle(order);

        MetricAccumulator acc(num_classes, tol);
        double loss_sum = 0.0;
        int step_in_epoch = 0;
        for (size_t pos = 0; pos < order.size(); pos += static_cast<size_t>(cfg.batch)) {
            const size_t end = std::min(order.size(), pos + static_cast<size_t>(cfg.batch));
            std::vector<Tensor> rgbs, depths, labels;
            for (size_t i = pos; i < end; ++i) {
                rgbs.push_back(norm_rgb[order[i]]);
                depths.push_back(scenes[order[i]].depth);
                labels.push_back(scenes[order[i]].labels);
            }
            Tensor x_rgb = stack_batch(rgbs);
            Tensor x_d = stack_batch(depths);
            Tensor y = stack_batch(labels);

            Tensor logits = model.forward(x_rgb, x_d, Mode::Train);
            Tensor loss = cross_entropy(logits, y, -1);
            if (!std::isfinite(loss.item())) {
                throw StateError("train_loop: non-finite loss at epoch " + std::to_string(epoch) +
                                 ", step " + std::to_string(step_in_epoch));
            }
            acc.add(argmax_channel(logits), y);
            loss_sum += static_cast<double>(loss.item()) * static_cast<double>(end - pos);

            backward(loss);
            opt.step(params, lr);
            for (NamedParam& p : params) p.tensor.zero_grad();
            ++result.optimizer_steps;
            ++step_in_epoch;
        }

        EpochStats row;
        row.epoch = epoch;
        row.lr = lr;
        row.loss = loss_sum / static_cast<double>(scenes.size());
        row.metrics = acc.report();
        if (csv.is_open()) append_csv_row(csv, row);
        result.log.push_back(row);
        result.epochs_run = epoch + 1;

        if (!checkpoint_path.empty() && cfg.save_every > 0 && (epoch + 1) % cfg.save_every == 0) {
            save_model_checkpoint(checkpoint_path, model, opt, stats, epoch + 1);
        }
        if (hooks.on_epoch && !hooks.on_epoch(row)) break;
    }

    if (!checkpoint_path.empty()) {
        save_model_checkpoint(checkpoint_path, model, opt, stats, result.epochs_run);
    }
    return result;
}

namespace {

RawTensor raw_scalar(float v) {
    RawTensor t;
    t.extents = {1};
    t.data = {v};
    return t;
}

RawTensor raw_from_values(std::vector<float> values) {
    RawTensor t;
    t.extents = {static_cast<uint64_t>(values.size())};
    t.data = std::move(values);
    return t;
}

// Seeds do not fit a float exactly; store four 16-bit chunks.
RawTensor raw_seed(uint64_t seed) {
    std::vector<float> chunks(4);
    for (int i = 0; i < 4; ++i) chunks[static_cast<size_t>(i)] = static_cast<float>((seed >> (16 * i)) & 0xFFFF);
    return raw_from_values(std::move(chunks));
}

uint64_t seed_from_raw(const RawTensor& t) {
    uint64_t seed = 0;
    for (int i = 0; i < 4 && i < static_cast<int>(t.data.size()); ++i) {
        seed |= static_cast<uint64_t>(static_cast<uint32_t>(std::lround(t.data[static_cast<size_t>(i)])))
                << (16 * i);
    }
    return seed;
}

}  // namespace

NamedTensors make_checkpoint(HaarNet& model, const SgdNesterov& opt, const ChannelStats& stats, int epoch) {
    NamedTensors entries;
    const HaarNetConfig& c = model.config();
    entries.emplace_back("meta/format", raw_scalar(1.0f));
    entries.emplace_back("meta/config",
                         raw_from_values({static_cast<float>(c.num_classes), static_cast<float>(c.widths[0]),
                                          static_cast<float>(c.widths[1]), static_cast<float>(c.widths[2]),
                                          static_cast<float>(c.bottleneck), c.use_mup ? 1.0f : 0.0f,
                                          c.use_mrelu ? 1.0f : 0.0f, c.use_mhw ? 1.0f : 0.0f}));
    entries.emplace_back("meta/seed", raw_seed(c.seed));
    entries.emplace_back("meta/epoch", raw_scalar(static_cast<float>(epoch)));
    entries.emplace_back("meta/momentum", raw_scalar(opt.momentum()));
    entries.emplace_back("stats/mean", raw_from_values({stats.mean[0], stats.mean[1], stats.mean[2]}));
    entries.emplace_back("stats/std", raw_from_values({stats.stdev[0], stats.stdev[1], stats.stdev[2]}));

    ParamList params = model.named_params();
    for (const NamedParam& p : params) {
        entries.emplace_back("param/" + p.name, tensor_to_raw(p.tensor, 4));
    }
    for (const NamedParam& b : model.named_buffers()) {
        entries.emplace_back("buffer/" + b.name, tensor_to_raw(b.tensor, 4));
    }
    const auto& vel = opt.velocities();
    if (vel.size() == params.size()) {
        for (size_t i = 0; i < params.size(); ++i) {
            entries.emplace_back("opt/" + params[i].name, tensor_to_raw(vel[i], 4));
        }
    }
    return entries;
}

void save_model_checkpoint(const std::string& path, HaarNet& model, const SgdNesterov& opt,
                           const ChannelStats& stats, int epoch) {
    save_checkpoint(path, make_checkpoint(model, opt, stats, epoch));
}

RestoredTraining load_model_checkpoint(const std::string& path) {
    NamedTensors entries = load_checkpoint(path);
    const RawTensor* config = find_entry(entries, "meta/config");
    const RawTensor* seed = find_entry(entries, "meta/seed");
    const RawTensor* epoch = find_entry(entries, "meta/epoch");
    if (!config || config->data.size() < 8 || !seed || !epoch) {
        throw FormatError(path + ": missing checkpoint metadata");
    }

    HaarNetConfig c;
    c.num_classes = static_cast<int>(std::lround(config->data[0]));
    c.widths = {static_cast<int>(std::lround(config->data[1])), static_cast<int>(std::lround(config->data[2])),
                static_cast<int>(std::lround(config->data[3]))};
    c.bottleneck = static_cast<int>(std::lround(config->data[4]));
    c.use_mup = config->data[5] != 0.0f;
    c.use_mrelu = config->data[6] != 0.0f;
    c.use_mhw = config->data[7] != 0.0f;
    c.seed = seed_from_raw(*seed);

    RestoredTraining restored;
    restored.model = std::make_unique<HaarNet>(c);
    restored.epoch = static_cast<int>(std::lround(epoch->data[0]));
    restored.train.seed = c.seed;
    restored.train.use_mup = c.use_mup;
    restored.train.use_mrelu = c.use_mrelu;
    restored.train.use_mhw = c.use_mhw;

    const RawTensor* mean = find_entry(entries, "stats/mean");
    const RawTensor* stdev = find_entry(entries, "stats/std");
    if (mean && mean->data.size() == 3 && stdev && stdev->data.size() == 3) {
        for (int i = 0; i < 3; ++i) {
            restored.stats.mean[static_cast<size_t>(i)] = mean->data[static_cast<size_t>(i)];
            restored.stats.stdev[static_cast<size_t>(i)] = stdev->data[static_cast<size_t>(i)];
        }
    }

    auto copy_into = [&](const std::string& key, Tensor& dst) {
        const RawTensor* src = find_entry(entries, key);
        if (!src) throw FormatError(path + ": checkpoint is missing entry " + key);
        if (src->data.size() != static_cast<size_t>(dst.numel())) {
            throw FormatError(path + ": entry " + key + " has " + std::to_string(src->data.size()) +
                              " values, expected " + std::to_string(dst.numel()));
        }
        std::copy(src->data.begin(), src->data.end(), dst.data());
    };

    ParamList params = restored.model->named_params();
    for (NamedParam& p : params) copy_into("param/" + p.name, p.tensor);
    for (NamedParam& b : restored.model->named_buffers()) copy_into("buffer/" + b.name, b.tensor);

    const RawTensor* momentum = find_entry(entries, "meta/momentum");
    restored.opt = std::make_unique<SgdNesterov>(momentum ? momentum->data[0] : 0.9f);
    restored.train.momentum = momentum ? momentum->data[0] : 0.9f;
    restored.opt->attach(params);
    if (find_entry(entries, "opt/" + params.front().name)) {
        for (size_t i = 0; i < params.size(); ++i) {
            copy_into("opt/" + params[i].name, restored.opt->velocities()[i]);
        }
    }
    return restored;
}

MetricReport evaluate(HaarNet& model, const std::vector<Scene>& scenes, const ChannelStats& stats,
                      int batch, int boundary_tol) {
    if (scenes.empty()) throw ContractError("evaluate: dataset is empty");
    if (batch < 1) throw ContractError("evaluate: batch must be >= 1");
    const Shape& ss = scenes.front().rgb.shape();
    const int tol = boundary_tol > 0 ? boundary_tol : default_boundary_tol(ss.h, ss.w);
    MetricAccumulator acc(model.config().num_classes, tol);
    NoGradGuard ng;
    for (size_t pos = 0; pos < scenes.size(); pos += static_cast<size_t>(batch)) {
        const size_t end = std::min(scenes.size(), pos + static_cast<size_t>(batch));
        std::vector<Tensor> rgbs, depths, labels;
        for (size_t i = pos; i < end; ++i) {
            rgbs.push_back(normalize_rgb(scenes[i].rgb, stats));
            depths.push_back(scenes[i].depth);
            labels.push_back(scenes[i].labels);
        }
        Tensor logits = model.forward(stack_batch(rgbs), stack_batch(depths), Mode::Eval);
        acc.add(argmax_channel(logits), stack_batch(labels));
    }
    return acc.report();
}

}  // namespace haarnet
