#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "haarnet/data.hpp"
#include "haarnet/nn.hpp"
#include "haarnet/pnm.hpp"
#include "haarnet/tensor_file.hpp"
#include "haarnet/train.hpp"
#include "oracles.hpp"

using namespace haarnet;
namespace fs = std::filesystem;

namespace {

std::string cli_path() {
    const char* env = std::getenv("HAARNET_CLI");
    REQUIRE_MESSAGE(env != nullptr, "HAARNET_CLI must point at the command line binary");
    return env;
}

struct RunResult {
    int exit_code;
    std::string output;
};

RunResult run_cli(const std::string& args) {
    const fs::path out = fs::temp_directory_path() / "haarnet_cli_out.txt";
    const std::string cmd = cli_path() + " " + args + " > " + out.string() + " 2>&1";
    const int status = std::system(cmd.c_str());
    std::ifstream in(out);
    std::stringstream buf;
    buf << in.rdbuf();
    return {WEXITSTATUS(status), buf.str()};
}

fs::path temp_dir(const char* tag) {
    fs::path p = fs::temp_directory_path() / (std::string("haarnet_cli_") + tag);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

std::string slurp_file(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream buf;
    buf << in.rdbuf();
    return buf.str();
}

}  // namespace

TEST_SUITE("cli") {

TEST_CASE("help succeeds and shows defaults") {
    RunResult r = run_cli("--help");
    CHECK(r.exit_code == 0);
    RunResult gen = run_cli("generate --help");
    CHECK(gen.exit_code == 0);
    CHECK(gen.output.find("--count") != std::string::npos);
    CHECK(gen.output.find("8") != std::string::npos);  // printed default
}

TEST_CASE("generate writes the dataset layout deterministically") {
    fs::path a = temp_dir("gen_a");
    fs::path b = temp_dir("gen_b");
    const std::string flags = " --count 4 --size 32 32 --classes 5 --seed 11";
    CHECK(run_cli("generate --out " + a.string() + flags).exit_code == 0);
    CHECK(run_cli("generate --out " + b.string() + flags).exit_code == 0);

    int dirs = 0;
    for (const auto& e : fs::directory_iterator(a / "scenes")) {
        (void)e;
        ++dirs;
    }
    CHECK(dirs == 4);
    CHECK(slurp_file(a / "scenes" / "11" / "rgb.mten") == slurp_file(b / "scenes" / "11" / "rgb.mten"));
    CHECK(slurp_file(a / "scenes" / "14" / "labels.mten") ==
          slurp_file(b / "scenes" / "14" / "labels.mten"));
}

TEST_CASE("generate rejects an impossible class count") {
    fs::path dir = temp_dir("gen_bad");
    RunResult r = run_cli("generate --out " + dir.string() + " --count 1 --size 32 32 --classes 100");
    CHECK(r.exit_code == 2);
    CHECK(r.output.find("palette") != std::string::npos);
}

TEST_CASE("transform decomposes an image across levels") {
    fs::path dir = temp_dir("transform");
    const fs::path img = dir / "in.pgm";

    SUBCASE("constant image yields mid-gray detail rasters") {
        std::vector<uint8_t> gray(16 * 16, 77);
        save_pgm(img.string(), gray, 16, 16);
        CHECK(run_cli("transform --in " + img.string() + " --out " + dir.string() + " --levels 1").exit_code == 0);
        Tensor detail = load_pnm((dir / "detail_v_L1.pgm").string());
        for (int64_t i = 0; i < detail.numel(); ++i) {
            CHECK(detail.data()[i] == doctest::Approx(128.0f / 255.0f));
        }
        Tensor approx = load_pnm((dir / "approx_L1.pgm").string());
        CHECK(approx.shape() == Shape{1, 1, 8, 8});
        for (int64_t i = 0; i < approx.numel(); ++i) {
            CHECK(approx.data()[i] == doctest::Approx(77.0f / 255.0f));
        }
    }

    SUBCASE("levels halve the resolution and the raw approx matches max pooling") {
        Rng rng(31);
        std::vector<uint8_t> gray(16 * 16);
        for (auto& b : gray) b = static_cast<uint8_t>(rng.next_u32() % 256);
        save_pgm(img.string(), gray, 16, 16);
        CHECK(run_cli("transform --in " + img.string() + " --out " + dir.string() + " --levels 2").exit_code == 0);

        RawTensor l1 = load_raw((dir / "approx_L1.mten").string());
        RawTensor l2 = load_raw((dir / "approx_L2.mten").string());
        CHECK(l1.extents == std::vector<uint64_t>{1, 8, 8});
        CHECK(l2.extents == std::vector<uint64_t>{1, 4, 4});

        Tensor input = load_pnm(img.string());
        Tensor expect = oracle::naive_maxpool2(input);
        Tensor got = raw_to_tensor(l1);
        CHECK(oracle::bit_equal(got, expect));
        CHECK(oracle::bit_equal(raw_to_tensor(l2), oracle::naive_maxpool2(expect)));
    }

    SUBCASE("unsupported formats exit with a usage error") {
        std::ofstream out(img, std::ios::binary);
        out << "P2\n2 2\n255\n0 1 2 3\n";
        out.close();
        RunResult r = run_cli("transform --in " + img.string() + " --out " + dir.string());
        CHECK(r.exit_code == 2);
    }

    SUBCASE("missing input exits with a usage error") {
        RunResult r = run_cli("transform --in " + (dir / "nope.pgm").string() + " --out " + dir.string());
        CHECK(r.exit_code == 2);
    }
}

TEST_CASE("gradcheck command passes on default seeds") {
    RunResult r = run_cli("gradcheck --cases 2");
    CHECK(r.exit_code == 0);
    CHECK(r.output.find("passed") != std::string::npos);
}

TEST_CASE("gradcheck rejects unknown operations") {
    RunResult r = run_cli("gradcheck --op no_such_op");
    CHECK(r.exit_code == 2);
}

TEST_CASE("eval reports perfect metrics on a perfect-prediction fixture") {
    fs::path dir = temp_dir("eval");
    // A dataset whose labels are all background, and a head biased so hard
    // toward class 0 that the network must predict it everywhere.
    Scene s = synth_scene(77, 32, 32, 4);
    for (int64_t i = 0; i < s.labels.numel(); ++i) s.labels.data()[i] = 0.0f;
    save_scene(dir.string(), s);

    HaarNetConfig cfg;
    cfg.num_classes = 4;
    cfg.seed = 1;
    HaarNet model(cfg);
    for (NamedParam& p : model.named_params()) {
        if (p.name == "head.b") p.tensor.data()[0] = 1000.0f;
    }
    SgdNesterov opt(0.9f);
    opt.attach(model.named_params());
    ChannelStats stats = compute_stats({s});
    const fs::path ck = dir / "model.mten";
    save_model_checkpoint(ck.string(), model, opt, stats, 0);

    RunResult r = run_cli("eval --data " + dir.string() + " --checkpoint " + ck.string() + " --batch 1");
    CHECK(r.exit_code == 0);
    double miou = -1, acc = -1, bf1 = -1;
    CHECK(std::sscanf(r.output.c_str(), "%lf,%lf,%lf", &miou, &acc, &bf1) == 3);
    CHECK(miou == 1.0);
    CHECK(acc == 1.0);
    CHECK(bf1 == 1.0);
}

TEST_CASE("eval with a missing checkpoint is a usage error") {
    fs::path dir = temp_dir("eval_bad");
    Scene s = synth_scene(78, 32, 32, 4);
    save_scene(dir.string(), s);
    RunResult r = run_cli("eval --data " + dir.string() + " --checkpoint " + (dir / "none.mten").string());
    CHECK(r.exit_code == 2);
}

TEST_CASE("config files feed defaults that flags override") {
    fs::path dir = temp_dir("config");
    const fs::path cfg = dir / "gen.cfg";
    {
        std::ofstream out(cfg);
        out << "# fixture config\n";
        out << "count = 2\n";
        out << "size = 32 32\n";
        out << "classes = 4\n";
        out << "seed = 5\n";
        out << "out = " << (dir / "from_config").string() << "\n";
    }
    CHECK(run_cli("generate --config " + cfg.string()).exit_code == 0);
    CHECK(fs::exists(dir / "from_config" / "scenes" / "5"));
    CHECK(fs::exists(dir / "from_config" / "scenes" / "6"));
    CHECK_FALSE(fs::exists(dir / "from_config" / "scenes" / "7"));

    // The explicit flag wins over the config value.
    CHECK(run_cli("generate --config " + cfg.string() + " --out " + (dir / "flag_wins").string())
              .exit_code == 0);
    CHECK(fs::exists(dir / "flag_wins" / "scenes" / "5"));

    {
        std::ofstream out(cfg, std::ios::app);
        out << "bogus_key = 1\n";
    }
    RunResult r = run_cli("generate --config " + cfg.string());
    CHECK(r.exit_code == 2);
    CHECK(r.output.find("bogus_key") != std::string::npos);
}

TEST_CASE("train then eval round trips through the dataset and checkpoint") {
    fs::path dir = temp_dir("train");
    CHECK(run_cli("generate --out " + dir.string() + " --count 4 --size 40 40 --classes 4 --seed 21")
              .exit_code == 0);
    const std::string ck = (dir / "model.mten").string();
    const std::string log = (dir / "log.csv").string();
    RunResult r = run_cli("train --data " + dir.string() + " --classes 4 --epochs 2 --batch 2 --lr 0.01" +
                          " --seed 7 --checkpoint " + ck + " --log " + log);
    CHECK(r.exit_code == 0);
    CHECK(r.output.find("parameters:") != std::string::npos);
    CHECK(fs::exists(ck));

    std::ifstream csv(log);
    std::string header;
    REQUIRE(std::getline(csv, header));
    CHECK(header == kCsvHeader);
    int rows = 0;
    for (std::string line; std::getline(csv, line);) ++rows;
    CHECK(rows == 2);

    RunResult ev = run_cli("eval --data " + dir.string() + " --checkpoint " + ck + " --batch 2");
    CHECK(ev.exit_code == 0);
    double miou = -1, acc = -1, bf1 = -1;
    CHECK(std::sscanf(ev.output.c_str(), "%lf,%lf,%lf", &miou, &acc, &bf1) == 3);
    CHECK(miou >= 0.0);
    CHECK(acc >= 0.0);
    CHECK(bf1 >= 0.0);
}

TEST_CASE("switch flags change the reported parameter count by the closed-form deltas") {
    fs::path dir = temp_dir("switches");
    CHECK(run_cli("generate --out " + dir.string() + " --count 2 --size 40 40 --classes 4 --seed 31")
              .exit_code == 0);
    auto param_count = [&](const std::string& switches) {
        RunResult r = run_cli("train --data " + dir.string() + " --classes 4 --epochs 1 --batch 2 " +
                              switches + " --checkpoint " + (dir / "m.mten").string() + " --log " +
                              (dir / "l.csv").string());
        REQUIRE(r.exit_code == 0);
        const size_t at = r.output.find("parameters: ");
        REQUIRE(at != std::string::npos);
        return std::stoll(r.output.substr(at + 12));
    };
    const long long all_on = param_count("--mup on --mrelu on --mhw on");
    const long long all_off = param_count("--mup off --mrelu off --mhw off");
    const long long no_mhw = param_count("--mup on --mrelu on --mhw off");
    const long long no_mup = param_count("--mup off --mrelu on --mhw on");
    const long long no_mrelu = param_count("--mup on --mrelu off --mhw on");

    auto gate_net = [](long long width) {
        const long long in = 6 * width;
        const long long hidden = (in + 3) / 4;
        return 2 * ((hidden * in + hidden) + hidden + (width * hidden + width));
    };
    const long long mhw_delta = gate_net(16) + gate_net(32) + gate_net(64);
    const long long mup_delta = 4 * (128 + 64 + 32);
    const long long mrelu_delta = 2 * ((16 + 16) + (32 + 32) + (64 + 64)) + (64 + 32 + 16);
    CHECK(all_on - no_mhw == mhw_delta);
    CHECK(all_on - no_mup == mup_delta);
    CHECK(all_on - no_mrelu == mrelu_delta);
    CHECK(all_on - all_off == mhw_delta + mup_delta + mrelu_delta);
}

}  // TEST_SUITE
