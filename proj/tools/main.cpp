#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "haarnet/data.hpp"
#include "haarnet/gradcheck.hpp"
#include "haarnet/haar.hpp"
#include "haarnet/metrics.hpp"
#include "haarnet/nn.hpp"
#include "haarnet/ops.hpp"
#include "haarnet/pnm.hpp"
#include "haarnet/tensor_file.hpp"
#include "haarnet/train.hpp"

namespace fs = std::filesystem;
using namespace haarnet;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitCheckFailure = 1;
constexpr int kExitUsage = 2;

// Plain key=value config file; # starts a comment. Values are injected as
// flags ahead of the user's own flags so the command line always wins.
std::vector<std::string> read_config_pairs(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError(path + ": cannot open config file");
    std::vector<std::string> pairs;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const size_t hash = line.find('#');
        if (hash != std::string::npos) line.erase(hash);
        size_t begin = line.find_first_not_of(" \t\r");
        if (begin == std::string::npos) continue;
        size_t end = line.find_last_not_of(" \t\r");
        line = line.substr(begin, end - begin + 1);
        const size_t eq = line.find('=');
        if (eq == std::string::npos || eq == 0) {
            throw ContractError(path + ":" + std::to_string(lineno) + ": expected key=value");
        }
        std::string key = line.substr(0, eq);
        std::string value = line.substr(eq + 1);
        auto strip = [](std::string& s) {
            const size_t b = s.find_first_not_of(" \t");
            const size_t e = s.find_last_not_of(" \t");
            s = b == std::string::npos ? "" : s.substr(b, e - b + 1);
        };
        strip(key);
        strip(value);
        pairs.push_back(key);
        pairs.push_back(value);
    }
    return pairs;
}

bool parse_switch(const std::string& v) { return v == "on"; }

uint8_t to_byte(float v) {
    const long r = std::lround(static_cast<double>(v));
    return static_cast<uint8_t>(std::clamp(r, 0L, 255L));
}

void export_raster(const std::string& stem, const Tensor& t, bool rescale_signed) {
    const Shape& s = t.shape();
    std::vector<uint8_t> bytes(static_cast<size_t>(s.c * s.h * s.w));
    float m = 0.0f;
    if (rescale_signed) {
        for (int64_t i = 0; i < t.numel(); ++i) m = std::max(m, std::abs(t.data()[i]));
    }
    const int64_t plane = s.h * s.w;
    for (int64_t y = 0; y < s.h; ++y) {
        for (int64_t x = 0; x < s.w; ++x) {
            for (int64_t c = 0; c < s.c; ++c) {
                const float v = t.data()[c * plane + y * s.w + x];
                float scaled;
                if (rescale_signed) {
                    // [-m, +m] -> [0,255] with 0 at mid-gray 128.
                    scaled = m > 0.0f ? (v + m) / (2.0f * m) * 255.0f : 128.0f;
                } else {
                    scaled = v * 255.0f;
                }
                bytes[static_cast<size_t>((y * s.w + x) * s.c + c)] = to_byte(scaled);
            }
        }
    }
    if (s.c == 1) {
        save_pgm(stem + ".pgm", bytes, s.h, s.w);
    } else {
        save_ppm(stem + ".ppm", bytes, s.h, s.w);
    }
}

Tensor slice_details(const Tensor& details, int band) {
    // details (1, 3C, H, W) -> (1, C, H, W) picking channel band of each triple
    const Shape& s = details.shape();
    const int64_t c_src = s.c / 3;
    std::vector<float> out(static_cast<size_t>(c_src * s.h * s.w));
    const int64_t plane = s.h * s.w;
    for (int64_t c = 0; c < c_src; ++c) {
        const float* src = details.data() + (3 * c + band) * plane;
        std::copy(src, src + plane, out.data() + c * plane);
    }
    return Tensor::from_vector({1, c_src, s.h, s.w}, std::move(out));
}

int cmd_generate(const std::string& out_dir, int count, int h, int w, int classes, uint64_t seed) {
    for (int i = 0; i < count; ++i) {
        Scene scene = synth_scene(seed + static_cast<uint64_t>(i), h, w, classes);
        save_scene(out_dir, scene);
    }
    std::cout << "wrote " << count << " scenes under " << (fs::path(out_dir) / "scenes").string() << "\n";
    return kExitOk;
}

int cmd_transform(const std::string& input, const std::string& out_dir, int levels) {
    Tensor image = load_pnm(input);
    std::error_code ec;
    fs::create_directories(out_dir, ec);
    if (ec) throw IoError(out_dir + ": cannot create directory (" + ec.message() + ")");

    NoGradGuard ng;
    Tensor current = image;
    static const char* kBands[3] = {"v", "h", "d"};
    for (int level = 1; level <= levels; ++level) {
        HaarSubbands bands = haar_forward(current);
        const std::string tag = "_L" + std::to_string(level);
        const fs::path base = fs::path(out_dir);
        save_raw((base / ("approx" + tag + ".mten")).string(), tensor_to_raw(bands.approx, 3));
        export_raster((base / ("approx" + tag)).string(), bands.approx, false);
        for (int b = 0; b < 3; ++b) {
            Tensor band = slice_details(bands.details, b);
            save_raw((base / (std::string("detail_") + kBands[b] + tag + ".mten")).string(),
                     tensor_to_raw(band, 3));
            export_raster((base / (std::string("detail_") + kBands[b] + tag)).string(), band, true);
        }
        current = bands.approx;
    }
    std::cout << "decomposed " << levels << " level(s) into " << out_dir << "\n";
    return kExitOk;
}

struct TrainFlags {
    std::string data_dir;
    std::string checkpoint = "checkpoint.mten";
    std::string log = "train_log.csv";
    std::string resume;
    int classes = 5;
    TrainConfig cfg;
    std::string mup = "on", mrelu = "on", mhw = "on";
};

int cmd_train(TrainFlags& f) {
    f.cfg.use_mup = parse_switch(f.mup);
    f.cfg.use_mrelu = parse_switch(f.mrelu);
    f.cfg.use_mhw = parse_switch(f.mhw);
    f.cfg.validate();

    std::vector<Scene> scenes = load_dataset(f.data_dir);
    if (scenes.empty()) throw IoError(f.data_dir + ": dataset holds no scenes");

    std::unique_ptr<HaarNet> model;
    std::unique_ptr<SgdNesterov> opt;
    ChannelStats stats;
    int start_epoch = 0;
    if (!f.resume.empty()) {
        RestoredTraining restored = load_model_checkpoint(f.resume);
        model = std::move(restored.model);
        opt = std::move(restored.opt);
        stats = restored.stats;
        start_epoch = restored.epoch;
        f.cfg.use_mup = model->config().use_mup;
        f.cfg.use_mrelu = model->config().use_mrelu;
        f.cfg.use_mhw = model->config().use_mhw;
        f.cfg.seed = model->config().seed;
    } else {
        model = std::make_unique<HaarNet>(f.cfg.net(f.classes));
        opt = std::make_unique<SgdNesterov>(f.cfg.momentum);
        stats = compute_stats(scenes);
    }

    std::cout << "parameters: " << model->param_count() << "\n";
    TrainResult result = train_loop(*model, scenes, f.cfg, *opt, stats, start_epoch, f.log, f.checkpoint);
    const EpochStats& last = result.log.empty() ? EpochStats{} : result.log.back();
    std::cout << "trained " << result.epochs_run << " epochs (" << result.optimizer_steps
              << " steps), final loss " << last.loss << ", miou " << last.metrics.miou << "\n";
    std::cout << "checkpoint: " << f.checkpoint << "\n";
    return kExitOk;
}

int cmd_eval(const std::string& data_dir, const std::string& checkpoint, int batch) {
    std::vector<Scene> scenes = load_dataset(data_dir);
    if (scenes.empty()) throw IoError(data_dir + ": dataset holds no scenes");
    RestoredTraining restored = load_model_checkpoint(checkpoint);
    MetricReport report = evaluate(*restored.model, scenes, restored.stats, batch);
    std::printf("%.6f,%.6f,%.6f\n", report.miou, report.pixel_accuracy, report.boundary_f1);
    return kExitOk;
}

int cmd_gradcheck(uint64_t seed, int cases, const std::vector<std::string>& ops) {
    GradCheckOptions opts;
    opts.seed = seed;
    opts.cases_per_op = cases;
    opts.ops = ops;
    std::vector<GradViolation> violations = run_gradcheck(opts);
    if (violations.empty()) {
        std::cout << "gradcheck passed (" << cases << " cases per op)\n";
        return kExitOk;
    }
    for (const GradViolation& v : violations) {
        std::printf("VIOLATION %s case %d at %s: analytic %.8g vs numeric %.8g (rel %.3g)\n", v.op.c_str(),
                    v.case_index, v.coordinate.c_str(), v.analytic, v.numeric, v.error);
    }
    std::cout << violations.size() << " gradient check violation(s)\n";
    return kExitCheckFailure;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Linear-morphological RGB-D segmentation toolkit"};
    app.require_subcommand(1);
    app.option_defaults()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);

    std::string config_path;

    auto* gen = app.add_subcommand("generate", "Render synthetic RGB-D scenes into a dataset directory");
    std::string gen_out = "dataset";
    int gen_count = 8;
    std::vector<int> gen_size = {64, 64};
    int gen_classes = 5;
    uint64_t gen_seed = 1;
    gen->add_option("--config", config_path, "key=value config file");
    gen->add_option("--out", gen_out, "output dataset directory")->capture_default_str();
    gen->add_option("--count", gen_count, "number of scenes")->capture_default_str();
    gen->add_option("--size", gen_size, "scene height and width")->expected(2)->capture_default_str();
    gen->add_option("--classes", gen_classes, "number of classes incl. background")->capture_default_str();
    gen->add_option("--seed", gen_seed, "seed of the first scene")->capture_default_str();

    auto* tra = app.add_subcommand("transform", "Decompose an image into Haar subbands");
    std::string tra_in;
    std::string tra_out = "subbands";
    int tra_levels = 1;
    tra->add_option("--config", config_path, "key=value config file");
    tra->add_option("--in", tra_in, "input PGM (P5) or PPM (P6) image")->required();
    tra->add_option("--out", tra_out, "output directory")->capture_default_str();
    tra->add_option("--levels", tra_levels, "decomposition levels")->capture_default_str();

    auto* trn = app.add_subcommand("train", "Train the segmentation network on a dataset");
    TrainFlags tf;
    trn->add_option("--config", config_path, "key=value config file");
    trn->add_option("--data", tf.data_dir, "dataset directory")->required();
    trn->add_option("--classes", tf.classes, "number of classes")->capture_default_str();
    trn->add_option("--epochs", tf.cfg.epochs, "epoch budget")->capture_default_str();
    trn->add_option("--lr", tf.cfg.lr0, "initial learning rate")->capture_default_str();
    trn->add_option("--momentum", tf.cfg.momentum, "Nesterov momentum")->capture_default_str();
    trn->add_option("--poly-exp", tf.cfg.poly_exponent, "polynomial schedule exponent")->capture_default_str();
    trn->add_option("--batch", tf.cfg.batch, "batch size")->capture_default_str();
    trn->add_option("--seed", tf.cfg.seed, "training seed")->capture_default_str();
    trn->add_option("--save-every", tf.cfg.save_every, "checkpoint every N epochs (0 = final only)")
        ->capture_default_str();
    trn->add_option("--checkpoint", tf.checkpoint, "checkpoint output path")->capture_default_str();
    trn->add_option("--log", tf.log, "CSV metric log path")->capture_default_str();
    trn->add_option("--resume", tf.resume, "resume from checkpoint");
    trn->add_option("--mup", tf.mup, "morphological up-sampling")->check(CLI::IsMember({"on", "off"}))
        ->capture_default_str();
    trn->add_option("--mrelu", tf.mrelu, "morphological activations")->check(CLI::IsMember({"on", "off"}))
        ->capture_default_str();
    trn->add_option("--mhw", tf.mhw, "morphological Haar wavelet fusion")->check(CLI::IsMember({"on", "off"}))
        ->capture_default_str();

    auto* evl = app.add_subcommand("eval", "Evaluate a checkpoint on a dataset, prints miou,pixel_acc,boundary_f1");
    std::string evl_data, evl_checkpoint;
    int evl_batch = 8;
    evl->add_option("--config", config_path, "key=value config file");
    evl->add_option("--data", evl_data, "dataset directory")->required();
    evl->add_option("--checkpoint", evl_checkpoint, "checkpoint path")->required();
    evl->add_option("--batch", evl_batch, "evaluation batch size")->capture_default_str();

    auto* grd = app.add_subcommand("gradcheck", "Compare reverse-mode gradients against central differences");
    uint64_t grd_seed = 1234;
    int grd_cases = 6;
    std::vector<std::string> grd_ops;
    grd->add_option("--config", config_path, "key=value config file");
    grd->add_option("--seed", grd_seed, "case seed")->capture_default_str();
    grd->add_option("--cases", grd_cases, "cases per operation")->capture_default_str();
    grd->add_option("--op", grd_ops, "restrict to named ops (repeatable)")
        ->multi_option_policy(CLI::MultiOptionPolicy::TakeAll);

    try {
        // Two-pass parse: locate --config first, then re-parse with config
        // pairs injected ahead of the explicit flags.
        std::vector<std::string> args(argv + 1, argv + argc);
        std::string sub;
        std::string cfg_file;
        for (size_t i = 0; i < args.size(); ++i) {
            if (sub.empty() && !args[i].starts_with("-")) sub = args[i];
            if (args[i] == "--config" && i + 1 < args.size()) cfg_file = args[i + 1];
        }
        if (!cfg_file.empty() && !sub.empty()) {
            CLI::App* subapp = app.get_subcommand_ptr(sub).get();
            std::vector<std::string> pairs = read_config_pairs(cfg_file);
            std::vector<std::string> injected;
            for (size_t i = 0; i + 1 < pairs.size(); i += 2) {
                const std::string flag = "--" + pairs[i];
                if (!subapp->get_option_no_throw(flag)) {
                    throw ContractError(cfg_file + ": unknown config key '" + pairs[i] + "'");
                }
                injected.push_back(flag);
                injected.push_back(pairs[i + 1]);
            }
            std::vector<std::string> merged;
            merged.push_back(sub);
            merged.insert(merged.end(), injected.begin(), injected.end());
            bool seen_sub = false;
            for (const std::string& a : args) {
                if (!seen_sub && a == sub) {
                    seen_sub = true;
                    continue;
                }
                merged.push_back(a);
            }
            std::vector<const char*> cargv;
            cargv.push_back(argv[0]);
            for (const std::string& a : merged) cargv.push_back(a.c_str());
            app.parse(static_cast<int>(cargv.size()), cargv.data());
        } else {
            app.parse(argc, argv);
        }
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return kExitUsage;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitUsage;
    }

    try {
        if (gen->parsed()) return cmd_generate(gen_out, gen_count, gen_size[0], gen_size[1], gen_classes, gen_seed);
        if (tra->parsed()) return cmd_transform(tra_in, tra_out, tra_levels);
        if (trn->parsed()) return cmd_train(tf);
        if (evl->parsed()) return cmd_eval(evl_data, evl_checkpoint, evl_batch);
        if (grd->parsed()) return cmd_gradcheck(grd_seed, grd_cases, grd_ops);
    } catch (const StateError& e) {
        std::cerr << "check failure: " << e.what() << "\n";
        return kExitCheckFailure;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitUsage;
    }
    return kExitUsage;
}
