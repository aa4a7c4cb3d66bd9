#include "haarnet/nn.hpp"

#include <string>

#include "haarnet/ops.hpp"

namespace haarnet {

namespace {

int bottleneck_width(int channels) { return channels >= 4 ? (channels + 3) / 4 : 1; }

}  // namespace

SqueezeExciteGate::SqueezeExciteGate(int c_rgb, int c_d, Rng& rng)
    : rgb_reduce_(c_rgb, bottleneck_width(c_rgb), 1, {}, rng),
      rgb_expand_(bottleneck_width(c_rgb), c_rgb, 1, {}, rng),
      d_reduce_(c_d, bottleneck_width(c_d), 1, {}, rng),
      d_expand_(bottleneck_width(c_d), c_d, 1, {}, rng),
      rgb_act_(bottleneck_width(c_rgb)),
      d_act_(bottleneck_width(c_d)) {}

Tensor SqueezeExciteGate::gate_one(const Tensor& f, bool rgb) const {
    const Conv2d& reduce = rgb ? rgb_reduce_ : d_reduce_;
    const Conv2d& expand = rgb ? rgb_expand_ : d_expand_;
    const MorphActivation& act = rgb ? rgb_act_ : d_act_;
    Tensor pooled = global_avg_pool(f);
    Tensor g = sigmoid(expand.forward(act.forward(reduce.forward(pooled))));
    return mul(f, g);
}

std::pair<Tensor, Tensor> SqueezeExciteGate::forward(const Tensor& f_rgb, const Tensor& f_d) const {
    return se_gate(f_rgb, f_d, *this);
}

std::pair<Tensor, Tensor> se_gate(const Tensor& f_rgb, const Tensor& f_d, const SqueezeExciteGate& params) {
    const Shape& sr = f_rgb.shape();
    const Shape& sd = f_d.shape();
    if (sr.n != sd.n || sr.h != sd.h || sr.w != sd.w) {
        throw ShapeError("se_gate: modality extents differ, " + sr.str() + " vs " + sd.str());
    }
    return {params.gate_one(f_rgb, true), params.gate_one(f_d, false)};
}

void SqueezeExciteGate::collect(const std::string& prefix, ParamList& out) {
    rgb_reduce_.collect(prefix + ".rgb.c1", out);
    out.push_back({prefix + ".rgb.act.h0", rgb_act_.h0()});
    rgb_expand_.collect(prefix + ".rgb.c2", out);
    d_reduce_.collect(prefix + ".d.c1", out);
    out.push_back({prefix + ".d.act.h0", d_act_.h0()});
    d_expand_.collect(prefix + ".d.c2", out);
}

Aspp::Aspp(int c_in, int c_out, Rng& rng)
    : branch_(c_out >= 4 ? c_out / 4 : 1),
      conv1x1_(c_in, branch_, 1, {}, rng),
      conv_d2_(c_in, branch_, 3, {.stride = 1, .padding = 2, .dilation = 2}, rng),
      conv_d4_(c_in, branch_, 3, {.stride = 1, .padding = 4, .dilation = 4}, rng),
      conv_pool_(c_in, branch_, 1, {}, rng),
      project_(4 * branch_, c_out, 1, {}, rng),
      bn1_(branch_),
      bn2_(branch_),
      bn3_(branch_),
      bn4_(branch_),
      act1_(branch_),
      act2_(branch_),
      act3_(branch_),
      act4_(branch_) {}

Tensor Aspp::forward(const Tensor& x, Mode mode) {
    const Shape& s = x.shape();
    // Dilation-4 3x3 taps reach 4 pixels out; anything smaller would see only
    // padding in that branch.
    if (s.h < 5 || s.w < 5) {
        throw ConfigError("aspp: spatial extent " + s.str() + " smaller than dilated kernel reach (5)");
    }
    Tensor b1 = act1_.forward(bn1_.forward(conv1x1_.forward(x), mode));
    Tensor b2 = act2_.forward(bn2_.forward(conv_d2_.forward(x), mode));
    Tensor b3 = act3_.forward(bn3_.forward(conv_d4_.forward(x), mode));
    Tensor pooled = act4_.forward(bn4_.forward(conv_pool_.forward(global_avg_pool(x)), mode));
    Tensor b4 = broadcast_spatial(pooled, s.h, s.w);
    return project_.forward(concat_channels({b1, b2, b3, b4}));
}

Tensor aspp(const Tensor& x, Aspp& params, Mode mode) { return params.forward(x, mode); }

void Aspp::collect(const std::string& prefix, ParamList& out) {
    conv1x1_.collect(prefix + ".b0.conv", out);
    bn1_.collect(prefix + ".b0.bn", out);
    out.push_back({prefix + ".b0.act.h0", act1_.h0()});
    conv_d2_.collect(prefix + ".b1.conv", out);
    bn2_.collect(prefix + ".b1.bn", out);
    out.push_back({prefix + ".b1.act.h0", act2_.h0()});
    conv_d4_.collect(prefix + ".b2.conv", out);
    bn3_.collect(prefix + ".b2.bn", out);
    out.push_back({prefix + ".b2.act.h0", act3_.h0()});
    conv_pool_.collect(prefix + ".b3.conv", out);
    bn4_.collect(prefix + ".b3.bn", out);
    out.push_back({prefix + ".b3.act.h0", act4_.h0()});
    project_.collect(prefix + ".project", out);
}

void Aspp::collect_buffers(const std::string& prefix, ParamList& out) {
    bn1_.collect_buffers(prefix + ".b0.bn", out);
    bn2_.collect_buffers(prefix + ".b1.bn", out);
    bn3_.collect_buffers(prefix + ".b2.bn", out);
    bn4_.collect_buffers(prefix + ".b3.bn", out);
}

HaarNet::ConvBlock::ConvBlock(int c_in, int c_out, int k, int pad, bool morph, Rng& rng)
    : conv(c_in, c_out, k, {.stride = 1, .padding = pad, .dilation = 1}, rng), bn(c_out) {
    if (morph) act.emplace(c_out);
}

Tensor HaarNet::ConvBlock::forward(const Tensor& x, Mode mode) {
    Tensor y = bn.forward(conv.forward(x), mode);
    return act ? act->forward(y) : relu(y);
}

void HaarNet::ConvBlock::collect(const std::string& prefix, ParamList& out) {
    conv.collect(prefix + ".conv", out);
    bn.collect(prefix + ".bn", out);
    if (act) out.push_back({prefix + ".act.h0", act->h0()});
}

void HaarNet::ConvBlock::collect_buffers(const std::string& prefix, ParamList& out) {
    bn.collect_buffers(prefix + ".bn", out);
}

HaarNet::HaarNet(const HaarNetConfig& config)
    : config_(config),
      stem_rgb_([&] {
          Rng rng(Rng::mix(config.seed, 0x5731));
          return Conv2d(3, config.widths[0], 3, {.stride = 1, .padding = 1, .dilation = 1}, rng);
      }()),
      stem_d_([&] {
          Rng rng(Rng::mix(config.seed, 0x5732));
          return Conv2d(1, config.widths[0], 3, {.stride = 1, .padding = 1, .dilation = 1}, rng);
      }()),
      fuse_([&] {
          Rng rng(Rng::mix(config.seed, 0x5733));
          return Conv2d(2 * config.widths[2], config.bottleneck, 1, {}, rng);
      }()),
      aspp_([&] {
          Rng rng(Rng::mix(config.seed, 0x5734));
          return Aspp(config.bottleneck, config.bottleneck, rng);
      }()),
      head_([&] {
          Rng rng(Rng::mix(config.seed, 0x5735));
          return Conv2d(config.widths[0], config.num_classes, 1, {}, rng);
      }()) {
    if (config.num_classes < 2) throw ConfigError("haarnet: need at least 2 classes");
    for (int w : config.widths) {
        if (w < 1) throw ConfigError("haarnet: stage widths must be positive");
    }
    if (config.bottleneck < 1) throw ConfigError("haarnet: bottleneck width must be positive");

    Rng rng(Rng::mix(config.seed, 0x5736));
    int prev = config.widths[0];
    for (int i = 0; i < 3; ++i) {
        const int width = config.widths[static_cast<size_t>(i)];
        enc_rgb_.push_back({ConvBlock(prev, width, 3, 1, config.use_mrelu, rng),
                            ConvBlock(width, width, 3, 1, config.use_mrelu, rng)});
        enc_d_.push_back({ConvBlock(prev, width, 3, 1, config.use_mrelu, rng),
                          ConvBlock(width, width, 3, 1, config.use_mrelu, rng)});
        if (config.use_mhw) downs_.emplace_back(width, width, rng);
        prev = width;
    }

    const int dec_in[3] = {config.bottleneck, config.widths[2], config.widths[1]};
    const int skip_c[3] = {config.widths[2], config.widths[1], config.widths[0]};
    for (int i = 0; i < 3; ++i) {
        if (config.use_mup) up_se_.push_back(StructuringElement::flat(2, dec_in[i], true));
        skip_gates_.emplace_back(skip_c[i], skip_c[i], rng);
        dec_.push_back(ConvBlock(dec_in[i] + skip_c[i], skip_c[i], 1, 0, config.use_mrelu, rng));
    }
}

Tensor HaarNet::forward(const Tensor& rgb, const Tensor& depth, Mode mode) {
    const Shape& sr = rgb.shape();
    const Shape& sd = depth.shape();
    if (sr.c != 3 || sd.c != 1) {
        throw ShapeError("haarnet: expected rgb (N,3,H,W) and depth (N,1,H,W), got " + sr.str() + " / " +
                         sd.str());
    }
    if (sr.n != sd.n || sr.h != sd.h || sr.w != sd.w) {
        throw ShapeError("haarnet: modality extents differ, " + sr.str() + " vs " + sd.str());
    }
    if (sr.h % 8 != 0 || sr.w % 8 != 0) {
        throw ShapeError("haarnet: spatial extents must be divisible by 8, got " + sr.str());
    }

    Tensor r = stem_rgb_.forward(rgb);
    Tensor d = stem_d_.forward(depth);

    std::vector<Tensor> skip_r, skip_d;
    for (int i = 0; i < 3; ++i) {
        r = enc_rgb_[static_cast<size_t>(i)].forward(r, mode);
        d = enc_d_[static_cast<size_t>(i)].forward(d, mode);
        skip_r.push_back(r);
        skip_d.push_back(d);
        if (config_.use_mhw) {
            auto [nr, nd] = downs_[static_cast<size_t>(i)].forward(r, d);
            r = nr;
            d = nd;
        } else {
            StructuringElement flat_r = StructuringElement::flat(2, static_cast<int>(r.shape().c));
            StructuringElement flat_d = StructuringElement::flat(2, static_cast<int>(d.shape().c));
            r = dilate2d(r, flat_r, 2, 0);
            d = dilate2d(d, flat_d, 2, 0);
        }
    }

    Tensor x = aspp_.forward(fuse_.forward(concat_channels({r, d})), mode);

    for (int i = 0; i < 3; ++i) {
        x = config_.use_mup ? morph_upsample(x, up_se_[static_cast<size_t>(i)], 2) : nearest_upsample(x, 2);
        auto [gr, gd] = skip_gates_[static_cast<size_t>(i)].forward(skip_r[static_cast<size_t>(2 - i)],
                                                                    skip_d[static_cast<size_t>(2 - i)]);
        Tensor skip = add(gr, gd);
        x = dec_[static_cast<size_t>(i)].forward(concat_channels({x, skip}), mode);
    }
    return head_.forward(x);
}

ParamList HaarNet::named_params() {
    ParamList out;
    stem_rgb_.collect("stem.rgb", out);
    stem_d_.collect("stem.d", out);
    for (int i = 0; i < 3; ++i) {
        const std::string p = "enc" + std::to_string(i);
        enc_rgb_[static_cast<size_t>(i)].b0.collect(p + ".rgb.b0", out);
        enc_rgb_[static_cast<size_t>(i)].b1.collect(p + ".rgb.b1", out);
        enc_d_[static_cast<size_t>(i)].b0.collect(p + ".d.b0", out);
        enc_d_[static_cast<size_t>(i)].b1.collect(p + ".d.b1", out);
        if (config_.use_mhw) downs_[static_cast<size_t>(i)].collect("down" + std::to_string(i), out);
    }
    fuse_.collect("bottleneck", out);
    aspp_.collect("aspp", out);
    for (int i = 0; i < 3; ++i) {
        const std::string p = "dec" + std::to_string(i);
        if (config_.use_mup) out.push_back({p + ".up.se", up_se_[static_cast<size_t>(i)].values()});
        skip_gates_[static_cast<size_t>(i)].collect(p + ".se", out);
        dec_[static_cast<size_t>(i)].collect(p, out);
    }
    head_.collect("head", out);
    return out;
}

ParamList HaarNet::named_buffers() {
    ParamList out;
    for (int i = 0; i < 3; ++i) {
        const std::string p = "enc" + std::to_string(i);
        enc_rgb_[static_cast<size_t>(i)].b0.collect_buffers(p + ".rgb.b0", out);
        enc_rgb_[static_cast<size_t>(i)].b1.collect_buffers(p + ".rgb.b1", out);
        enc_d_[static_cast<size_t>(i)].b0.collect_buffers(p + ".d.b0", out);
        enc_d_[static_cast<size_t>(i)].b1.collect_buffers(p + ".d.b1", out);
    }
    aspp_.collect_buffers("aspp", out);
    for (int i = 0; i < 3; ++i) {
        dec_[static_cast<size_t>(i)].collect_buffers("dec" + std::to_string(i), out);
    }
    return out;
}

int64_t HaarNet::param_count() { return total_numel(named_params()); }

}  // namespace haarnet
