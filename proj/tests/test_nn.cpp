#include <doctest.h>

#include <cmath>
#include <map>

#include "haarnet/nn.hpp"
#include "haarnet/ops.hpp"
#include "haarnet/rng.hpp"
#include "haarnet/train.hpp"
#include "oracles.hpp"

using namespace haarnet;

namespace {

int64_t ceil_div(int64_t a, int64_t b) { return (a + b - 1) / b; }

// Closed-form parameter count mirroring the published architecture.
int64_t expected_params(const HaarNetConfig& c) {
    const int64_t w0 = c.widths[0], w1 = c.widths[1], w2 = c.widths[2], B = c.bottleneck;
    auto conv = [](int64_t ci, int64_t co, int64_t k) { return co * ci * k * k + co; };
    auto block = [&](int64_t ci, int64_t co) {
        return conv(ci, co, 3) + 2 * co + (c.use_mrelu ? co : 0);
    };
    auto gate_net = [&](int64_t width) {
        const int64_t in = 6 * width;
        const int64_t hidden = ceil_div(in, 4);
        return 2 * (conv(in, hidden, 1) + hidden + conv(hidden, width, 1));
    };
    auto se_pair = [&](int64_t width) {
        const int64_t hidden = ceil_div(width, 4);
        return 2 * (conv(width, hidden, 1) + hidden + conv(hidden, width, 1));
    };

    int64_t total = conv(3, w0, 3) + conv(1, w0, 3);            // stems
    total += 2 * (block(w0, w0) + block(w0, w0));               // stage 1, both modalities
    total += 2 * (block(w0, w1) + block(w1, w1));               // stage 2
    total += 2 * (block(w1, w2) + block(w2, w2));               // stage 3
    if (c.use_mhw) total += gate_net(w0) + gate_net(w1) + gate_net(w2);
    total += conv(2 * w2, B, 1);                                // bottleneck fuse
    const int64_t bw = B / 4;                                   // aspp
    total += conv(B, bw, 1) + 2 * conv(B, bw, 3) + conv(B, bw, 1);
    total += 4 * (2 * bw + bw);                                 // branch bn + h0
    total += conv(4 * bw, B, 1);                                // projection
    const int64_t dec_in[3] = {B, w2, w1};
    const int64_t skip[3] = {w2, w1, w0};
    for (int i = 0; i < 3; ++i) {
        if (c.use_mup) total += dec_in[i] * 4;                  // learnable 2x2 kernels
        total += se_pair(skip[i]);
        const int64_t out = skip[i];
        total += conv(dec_in[i] + skip[i], out, 1) + 2 * out + (c.use_mrelu ? out : 0);
    }
    total += conv(w0, c.num_classes, 1);                        // head
    return total;
}

}  // namespace

TEST_SUITE("nn") {

TEST_CASE("convolution worked examples and oracle") {
    Rng rng(60);
    // 1x1 identity kernel.
    Tensor eye = Tensor::zeros({3, 3, 1, 1});
    for (int64_t c = 0; c < 3; ++c) eye.at(c, c, 0, 0) = 1.0f;
    Tensor x = oracle::uniform_tensor({1, 3, 4, 4}, rng, -1.0f, 1.0f);
    Tensor same = conv2d(x, eye, Tensor::zeros({1, 3, 1, 1}), 1, 0, 1);
    CHECK(oracle::bit_equal(same, x));

    // Window-sum kernel.
    Tensor f = Tensor::from_vector({1, 1, 2, 2}, {1, 2, 3, 4});
    Tensor ones = Tensor::full({1, 1, 2, 2}, 1.0f);
    CHECK(conv2d(f, ones, Tensor::zeros({1, 1, 1, 1}), 2, 0, 1).item() == 10.0f);

    // Seeded cases against the brute-force oracle, including dilation.
    for (int trial = 0; trial < 10; ++trial) {
        Tensor in = oracle::uniform_tensor({2, 3, 7, 6}, rng, -1.0f, 1.0f);
        Tensor w = oracle::uniform_tensor({4, 3, 3, 3}, rng, -0.5f, 0.5f);
        Tensor b = oracle::uniform_tensor({1, 4, 1, 1}, rng, -0.3f, 0.3f);
        const int dil = trial % 2 == 0 ? 1 : 2;
        Tensor got = conv2d(in, w, b, 1, dil, dil);
        CHECK(oracle::all_close(got, oracle::naive_conv(in, w, b, 1, dil, dil), 1e-5f));
    }

    CHECK_THROWS_AS(conv2d(x, Tensor::zeros({4, 2, 3, 3}), Tensor::zeros({1, 4, 1, 1}), 1, 1, 1),
                    ShapeError);
}

TEST_CASE("batchnorm standardizes in train mode") {
    Rng rng(61);
    BatchNorm2d bn(3);
    Tensor x = oracle::uniform_tensor({4, 3, 5, 5}, rng, -2.0f, 5.0f);
    Tensor y = bn.forward(x, Mode::Train);
    for (int64_t c = 0; c < 3; ++c) {
        oracle::MeanVar mv = oracle::naive_channel_stats(y, c);
        CHECK(std::abs(mv.mean) <= 1e-4);
        CHECK(std::abs(mv.var - 1.0) <= 1e-3);
    }
    // Running statistics track the batch moments.
    oracle::MeanVar mv0 = oracle::naive_channel_stats(x, 0);
    CHECK(bn.running_mean().data()[0] == doctest::Approx(0.1 * mv0.mean).epsilon(1e-4));
    CHECK(bn.running_var().data()[0] == doctest::Approx(0.9 + 0.1 * mv0.var).epsilon(1e-4));
}

TEST_CASE("batchnorm eval applies running statistics") {
    BatchNorm2d bn(2);
    Tensor x = Tensor::from_vector({1, 2, 1, 2}, {1.0f, -1.0f, 0.5f, 0.25f});
    Tensor y = bn.forward(x, Mode::Eval);  // running mean 0, var 1
    for (int64_t i = 0; i < x.numel(); ++i) {
        CHECK(y.data()[i] == doctest::Approx(x.data()[i]).epsilon(1e-4));
    }
    CHECK_THROWS_AS(bn.forward(Tensor::zeros({1, 2, 3, 3}), Mode::Train), ContractError);
}

TEST_CASE("squeeze-excite gates both modalities") {
    Rng rng(62);
    SqueezeExciteGate gate(4, 4, rng);
    ParamList params;
    gate.collect("se", params);

    SUBCASE("zero parameters halve the features") {
        for (NamedParam& p : params) {
            for (int64_t i = 0; i < p.tensor.numel(); ++i) p.tensor.data()[i] = 0.0f;
        }
        Tensor fr = oracle::uniform_tensor({2, 4, 4, 4}, rng, -1.0f, 1.0f);
        Tensor fd = oracle::uniform_tensor({2, 4, 4, 4}, rng, -1.0f, 1.0f);
        auto [gr, gd] = se_gate(fr, fd, gate);
        CHECK(oracle::all_close(gr, scale(fr, 0.5f), 1e-7f));
        CHECK(oracle::all_close(gd, scale(fd, 0.5f), 1e-7f));
    }

    SUBCASE("gating is uniform across space") {
        Tensor fr = Tensor::zeros({1, 4, 3, 3});
        for (int64_t c = 0; c < 4; ++c) {
            for (int64_t i = 0; i < 9; ++i) fr.at(0, c, i / 3, i % 3) = 0.3f * static_cast<float>(c + 1);
        }
        auto [gr, gd] = se_gate(fr, fr, gate);
        for (int64_t c = 0; c < 4; ++c) {
            const float ratio = gr.at(0, c, 0, 0) / fr.at(0, c, 0, 0);
            for (int64_t i = 0; i < 9; ++i) {
                CHECK(gr.at(0, c, i / 3, i % 3) / fr.at(0, c, i / 3, i % 3) == doctest::Approx(ratio));
            }
        }
        (void)gd;
    }

    SUBCASE("matches the pooled-bottleneck composition") {
        for (NamedParam& p : params) {
            for (int64_t i = 0; i < p.tensor.numel(); ++i) p.tensor.data()[i] = rng.normal(0.0f, 0.5f);
        }
        auto by_name = [&](const std::string& suffix) -> Tensor& {
            for (NamedParam& p : params) {
                if (p.name.ends_with(suffix)) return p.tensor;
            }
            throw std::runtime_error("missing " + suffix);
        };
        Tensor fr = oracle::uniform_tensor({2, 4, 4, 4}, rng, -1.0f, 1.0f);
        Tensor fd = oracle::uniform_tensor({2, 4, 4, 4}, rng, -1.0f, 1.0f);
        auto [gr, gd] = se_gate(fr, fd, gate);
        auto expect = [&](const Tensor& f, const char* mod) {
            const std::string p = mod;
            Tensor pooled = global_avg_pool(f);
            Tensor hidden = emax(by_name(p + ".act.h0").clone(),
                                 oracle::naive_conv(pooled, by_name(p + ".c1.w"), by_name(p + ".c1.b"), 1, 0, 1));
            Tensor g = sigmoid(oracle::naive_conv(hidden, by_name(p + ".c2.w"), by_name(p + ".c2.b"), 1, 0, 1));
            return mul(f, g);
        };
        CHECK(oracle::all_close(gr, expect(fr, "rgb"), 1e-5f));
        CHECK(oracle::all_close(gd, expect(fd, "d"), 1e-5f));
    }
}

TEST_CASE("aspp keeps constants constant and honors its shape contract") {
    Rng rng(63);
    Aspp head(8, 8, rng);
    Tensor c = Tensor::full({2, 8, 6, 6}, 0.4f);
    Tensor out = head.forward(c, Mode::Train);
    CHECK(out.shape() == Shape{2, 8, 6, 6});
    for (int64_t ch = 0; ch < 8; ++ch) {
        const float v = out.at(0, ch, 0, 0);
        for (int64_t i = 0; i < 36; ++i) CHECK(out.at(0, ch, i / 6, i % 6) == doctest::Approx(v));
    }
    CHECK_THROWS_AS(head.forward(Tensor::zeros({2, 8, 4, 4}), Mode::Train), ConfigError);
}

TEST_CASE("aspp matches a branch-by-branch oracle") {
    Rng rng(64);
    Aspp head(6, 8, rng);
    ParamList params;
    head.collect("aspp", params);
    auto by_name = [&](const std::string& suffix) -> Tensor& {
        for (NamedParam& p : params) {
            if (p.name.ends_with(suffix)) return p.tensor;
        }
        throw std::runtime_error("missing " + suffix);
    };
    for (NamedParam& p : params) {
        if (p.name.ends_with(".act.h0")) {
            for (int64_t i = 0; i < p.tensor.numel(); ++i) p.tensor.data()[i] = rng.uniform(-0.4f, 0.4f);
        }
    }
    Tensor x = oracle::uniform_tensor({2, 6, 6, 6}, rng, -1.0f, 1.0f);
    Tensor got = head.forward(x, Mode::Train);

    auto naive_bn_train = [](const Tensor& in, const Tensor& gamma, const Tensor& beta) {
        Tensor out = Tensor::zeros(in.shape());
        for (int64_t c = 0; c < in.shape().c; ++c) {
            oracle::MeanVar mv = oracle::naive_channel_stats(in, c);
            const double inv = 1.0 / std::sqrt(mv.var + 1e-5);
            for (int64_t n = 0; n < in.shape().n; ++n) {
                for (int64_t y = 0; y < in.shape().h; ++y) {
                    for (int64_t xx = 0; xx < in.shape().w; ++xx) {
                        out.at(n, c, y, xx) = static_cast<float>(
                            (in.at(n, c, y, xx) - mv.mean) * inv * gamma.at(0, c, 0, 0) + beta.at(0, c, 0, 0));
                    }
                }
            }
        }
        return out;
    };
    auto branch = [&](const char* name, int pad, int dil, const Tensor& src) {
        const std::string p = name;
        Tensor y = oracle::naive_conv(src, by_name(p + ".conv.w"), by_name(p + ".conv.b"), 1, pad, dil);
        y = naive_bn_train(y, by_name(p + ".bn.gamma"), by_name(p + ".bn.beta"));
        return emax(by_name(p + ".act.h0").clone(), y);
    };
    Tensor b0 = branch("aspp.b0", 0, 1, x);
    Tensor b1 = branch("aspp.b1", 2, 2, x);
    Tensor b2 = branch("aspp.b2", 4, 4, x);
    Tensor b3 = broadcast_spatial(branch("aspp.b3", 0, 1, global_avg_pool(x)), 6, 6);
    Tensor expect = oracle::naive_conv(concat_channels({b0, b1, b2, b3}), by_name("aspp.project.w"),
                                       by_name("aspp.project.b"), 1, 0, 1);
    CHECK(oracle::all_close(got, expect, 2e-4f));
}

TEST_CASE("network output shape and input contracts") {
    HaarNetConfig cfg;
    cfg.num_classes = 5;
    cfg.seed = 9;
    HaarNet net(cfg);
    Tensor rgb = Tensor::zeros({2, 3, 48, 40});
    Tensor depth = Tensor::zeros({2, 1, 48, 40});
    NoGradGuard ng;
    CHECK(net.forward(rgb, depth, Mode::Eval).shape() == Shape{2, 5, 48, 40});
    CHECK_THROWS_AS(net.forward(Tensor::zeros({2, 3, 44, 40}), Tensor::zeros({2, 1, 44, 40}), Mode::Eval),
                    ShapeError);
    CHECK_THROWS_AS(net.forward(rgb, Tensor::zeros({2, 1, 40, 48}), Mode::Eval), ShapeError);
    CHECK_THROWS_AS(net.forward(depth, depth, Mode::Eval), ShapeError);
}

TEST_CASE("parameter counts match the closed forms for every switch setting") {
    for (int mask = 0; mask < 8; ++mask) {
        HaarNetConfig cfg;
        cfg.num_classes = 5;
        cfg.seed = 100 + static_cast<uint64_t>(mask);
        cfg.use_mup = mask & 1;
        cfg.use_mrelu = mask & 2;
        cfg.use_mhw = mask & 4;
        HaarNet net(cfg);
        CHECK(net.param_count() == expected_params(cfg));
    }

    // Switch deltas are exactly the closed-form additions.
    HaarNetConfig all_on;
    all_on.num_classes = 5;
    HaarNetConfig no_mhw = all_on;
    no_mhw.use_mhw = false;
    HaarNetConfig no_mup = all_on;
    no_mup.use_mup = false;
    HaarNetConfig no_mrelu = all_on;
    no_mrelu.use_mrelu = false;

    auto gate_net = [](int64_t width) {
        const int64_t in = 6 * width;
        const int64_t hidden = ceil_div(in, 4);
        return 2 * ((hidden * in + hidden) + hidden + (width * hidden + width));
    };
    const int64_t mhw_delta = gate_net(16) + gate_net(32) + gate_net(64);
    const int64_t mup_delta = 4 * (128 + 64 + 32);
    // Two encoder blocks per stage per modality plus one per decoder step.
    const int64_t mrelu_delta = 2 * ((16 + 16) + (32 + 32) + (64 + 64)) + (64 + 32 + 16);

    CHECK(expected_params(all_on) - expected_params(no_mhw) == mhw_delta);
    CHECK(expected_params(all_on) - expected_params(no_mup) == mup_delta);
    CHECK(expected_params(all_on) - expected_params(no_mrelu) == mrelu_delta);
}

TEST_CASE("fixed seeds give bit-identical logits") {
    HaarNetConfig cfg;
    cfg.num_classes = 4;
    cfg.seed = 77;
    HaarNet a(cfg);
    HaarNet b(cfg);
    Rng rng(78);
    Tensor rgb = oracle::uniform_tensor({1, 3, 24, 24}, rng, 0.0f, 1.0f);
    Tensor depth = oracle::uniform_tensor({1, 1, 24, 24}, rng, 0.0f, 1.0f);
    NoGradGuard ng;
    CHECK(oracle::bit_equal(a.forward(rgb, depth, Mode::Eval), b.forward(rgb, depth, Mode::Eval)));
}

TEST_CASE("gradient reaches every learnable parameter within a few steps") {
    HaarNetConfig cfg;
    cfg.num_classes = 4;
    cfg.seed = 5;
    HaarNet net(cfg);
    ParamList params = net.named_params();
    SgdNesterov opt(0.9f);
    opt.attach(params);

    Rng rng(6);
    Tensor rgb = oracle::uniform_tensor({2, 3, 24, 24}, rng, 0.0f, 1.0f);
    Tensor depth = oracle::uniform_tensor({2, 1, 24, 24}, rng, 0.0f, 1.0f);
    std::vector<float> labels(2 * 24 * 24);
    for (float& v : labels) v = static_cast<float>(rng.uniform_int(0, 3));
    Tensor y = Tensor::from_vector({2, 1, 24, 24}, std::move(labels));

    std::map<std::string, double> reach;
    for (const NamedParam& p : params) reach[p.name] = 0.0;
    for (int step = 0; step < 3; ++step) {
        Tensor loss = cross_entropy(net.forward(rgb, depth, Mode::Train), y, -1);
        backward(loss);
        for (const NamedParam& p : params) {
            if (!p.tensor.has_grad()) continue;
            for (float g : p.tensor.grad()) reach[p.name] += std::abs(g);
        }
        opt.step(params, 0.01);
        for (NamedParam& p : params) p.tensor.zero_grad();
    }
    for (const auto& [name, total] : reach) {
        INFO("parameter ", name);
        CHECK(total > 0.0);
    }
}

TEST_CASE("every switch combination trains on one synthetic batch") {
    std::vector<Scene> scenes;
    for (int i = 0; i < 2; ++i) scenes.push_back(synth_scene(700 + i, 40, 40, 4));
    ChannelStats stats = compute_stats(scenes);
    std::vector<Tensor> rgbs, depths, labels;
    for (const Scene& s : scenes) {
        rgbs.push_back(normalize_rgb(s.rgb, stats));
        depths.push_back(s.depth);
        labels.push_back(s.labels);
    }
    Tensor xr = stack_batch(rgbs);
    Tensor xd = stack_batch(depths);
    Tensor y = stack_batch(labels);

    for (int mask = 0; mask < 8; ++mask) {
        HaarNetConfig cfg;
        cfg.num_classes = 4;
        cfg.seed = 40 + static_cast<uint64_t>(mask);
        cfg.use_mup = mask & 1;
        cfg.use_mrelu = mask & 2;
        cfg.use_mhw = mask & 4;
        HaarNet net(cfg);
        ParamList params = net.named_params();
        SgdNesterov opt(0.9f);
        opt.attach(params);

        double first = 0.0, last = 0.0;
        for (int step = 0; step < 20; ++step) {
            Tensor loss = cross_entropy(net.forward(xr, xd, Mode::Train), y, -1);
            if (step == 0) first = loss.item();
            last = loss.item();
            backward(loss);
            opt.step(params, 0.01);
            for (NamedParam& p : params) p.tensor.zero_grad();
        }
        INFO("switch mask ", mask, " first ", first, " last ", last);
        CHECK(last < first);
    }
}

TEST_CASE("parameter names are stable identifiers") {
    HaarNetConfig cfg;
    cfg.num_classes = 3;
    HaarNet net(cfg);
    ParamList params = net.named_params();
    auto has = [&](const char* name) {
        for (const NamedParam& p : params) {
            if (p.name == name) return true;
        }
        return false;
    };
    CHECK(has("stem.rgb.w"));
    CHECK(has("enc0.rgb.b0.conv.w"));
    CHECK(has("enc2.d.b1.bn.gamma"));
    CHECK(has("down1.gate_rgb.c1.w"));
    CHECK(has("aspp.b2.conv.w"));
    CHECK(has("dec0.up.se"));
    CHECK(has("dec2.se.d.c2.b"));
    CHECK(has("head.w"));
}

}  // TEST_SUITE
