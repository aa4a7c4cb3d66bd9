#include "haarnet/data.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <iostream>

#include "haarnet/rng.hpp"
#include "haarnet/tensor_file.hpp"

namespace haarnet {

namespace {

namespace fs = std::filesystem;

// Eight distinguishable class colour means. Classes 1 and 4 are deliberately
// close in colour so depth carries discriminative signal.
constexpr float kPalette[kPaletteSize][3] = {
    {0.20f, 0.20f, 0.22f},  // 0 background
    {0.85f, 0.25f, 0.20f},  // 1
    {0.20f, 0.65f, 0.30f},  // 2
    {0.25f, 0.35f, 0.80f},  // 3
    {0.80f, 0.30f, 0.25f},  // 4 (near class 1)
    {0.85f, 0.75f, 0.25f},  // 5
    {0.55f, 0.30f, 0.70f},  // 6
    {0.30f, 0.70f, 0.70f},  // 7
};

float tri_sign(float px, float py, float ax, float ay, float bx, float by) {
    return (px - bx) * (ay - by) - (ax - bx) * (py - by);
}

struct Candidate {
    std::vector<SceneShape> shapes;
    bool has_gradient = false;
    float gx = 0.0f;
    float gy = 0.0f;
};

Candidate draw_candidate(Rng& rng, int h, int w, int num_classes) {
    Candidate cand;
    const int count = rng.uniform_int(3, 7);
    const float dim = static_cast<float>(std::min(h, w));
    for (int i = 0; i < count; ++i) {
        SceneShape s;
        s.kind = rng.uniform_int(0, 2);
        s.cls = rng.uniform_int(1, num_classes - 1);
        // Class-banded depth keeps depth informative about the class.
        s.depth = (static_cast<float>(s.cls) + rng.uniform(0.15f, 0.85f)) / static_cast<float>(num_classes);
        switch (s.kind) {
            case SceneShape::Rect: {
                const float sw = rng.uniform(0.15f, 0.45f) * static_cast<float>(w);
                const float sh = rng.uniform(0.15f, 0.45f) * static_cast<float>(h);
                const float x0 = rng.uniform(0.0f, static_cast<float>(w) - sw);
                const float y0 = rng.uniform(0.0f, static_cast<float>(h) - sh);
                s.p = {x0, y0, x0 + sw, y0 + sh, 0.0f, 0.0f};
                break;
            }
            case SceneShape::Disk: {
                const float r = rng.uniform(0.10f, 0.24f) * dim;
                const float cx = rng.uniform(r, static_cast<float>(w) - r);
                const float cy = rng.uniform(r, static_cast<float>(h) - r);
                s.p = {cx, cy, r, 0.0f, 0.0f, 0.0f};
                break;
            }
            case SceneShape::Triangle: {
                const float r = rng.uniform(0.12f, 0.28f) * dim;
                const float cx = rng.uniform(r, static_cast<float>(w) - r);
                const float cy = rng.uniform(r, static_cast<float>(h) - r);
                float base = rng.uniform(0.0f, 6.2831853f);
                for (int v = 0; v < 3; ++v) {
                    const float a = base + static_cast<float>(v) * 2.0943951f + rng.uniform(-0.3f, 0.3f);
                    const float rr = r * rng.uniform(0.7f, 1.0f);
                    s.p[static_cast<size_t>(2 * v)] = cx + rr * std::cos(a);
                    s.p[static_cast<size_t>(2 * v + 1)] = cy + rr * std::sin(a);
                }
                break;
            }
        }
        // Keep depth planes pairwise distinct so the nearest shape is unique.
        for (const SceneShape& other : cand.shapes) {
            if (std::abs(other.depth - s.depth) < 1e-4f) {
                s.depth = std::nextafter(s.depth + 2e-4f, 1.0f);
            }
        }
        cand.shapes.push_back(s);
    }
    cand.has_gradient = rng.canonical() < 0.5f;
    if (cand.has_gradient) {
        cand.gx = rng.uniform(-0.05f, 0.05f);
        cand.gy = rng.uniform(-0.05f, 0.05f);
    }
    return cand;
}

}  // namespace

bool SceneShape::covers(float x, float y) const {
    switch (kind) {
        case Rect:
            return x >= p[0] && x < p[2] && y >= p[1] && y < p[3];
        case Disk: {
            const float dx = x - p[0];
            const float dy = y - p[1];
            return dx * dx + dy * dy <= p[2] * p[2];
        }
        case Triangle: {
            const float d1 = tri_sign(x, y, p[0], p[1], p[2], p[3]);
            const float d2 = tri_sign(x, y, p[2], p[3], p[4], p[5]);
            const float d3 = tri_sign(x, y, p[4], p[5], p[0], p[1]);
            const bool has_neg = (d1 < 0) || (d2 < 0) || (d3 < 0);
            const bool has_pos = (d1 > 0) || (d2 > 0) || (d3 > 0);
            return !(has_neg && has_pos);
        }
    }
    return false;
}

Scene synth_scene(uint64_t seed, int h, int w, int num_classes) {
    if (num_classes < 2) throw ContractError("synth_scene: need at least 2 classes");
    if (num_classes > kPaletteSize) {
        throw ConfigError("synth_scene: " + std::to_string(num_classes) + " classes exceed the palette of " +
                          std::to_string(kPaletteSize));
    }
    if (h < 32 || w < 32) throw ContractError("synth_scene: extents must be >= 32");

    for (uint64_t attempt = 0;; ++attempt) {
        if (attempt > 256) throw StateError("synth_scene: could not satisfy scene constraints");
        Rng rng(Rng::mix(seed, attempt));
        Candidate cand = draw_candidate(rng, h, w, num_classes);

        std::vector<int> labels(static_cast<size_t>(h) * w, 0);
        std::vector<float> depth(static_cast<size_t>(h) * w, 1.0f);
        for (int y = 0; y < h; ++y) {
            for (int x = 0; x < w; ++x) {
                const float fx = static_cast<float>(x) + 0.5f;
                const float fy = static_cast<float>(y) + 0.5f;
                float best = 2.0f;
                int cls = 0;
                for (const SceneShape& s : cand.shapes) {
                    if (s.depth < best && s.covers(fx, fy)) {
                        best = s.depth;
                        cls = s.cls;
                    }
                }
                const size_t i = static_cast<size_t>(y) * w + x;
                labels[i] = cls;
                if (cls != 0) depth[i] = best;
            }
        }

        std::array<int, kPaletteSize> histogram{};
        for (int v : labels) ++histogram[static_cast<size_t>(v)];
        bool ok = false;
        for (int c = 1; c < num_classes; ++c) {
            if (histogram[static_cast<size_t>(c)] > 0) ok = true;
            if (histogram[static_cast<size_t>(c)] > 0 && histogram[static_cast<size_t>(c)] < 16) {
                ok = false;
                break;
            }
        }
        if (!ok) continue;

        if (cand.has_gradient) {
            for (int y = 0; y < h; ++y) {
                for (int x = 0; x < w; ++x) {
                    const size_t i = static_cast<size_t>(y) * w + x;
                    const float plane = cand.gx * static_cast<float>(x) / static_cast<float>(w - 1) +
                                        cand.gy * static_cast<float>(y) / static_cast<float>(h - 1);
                    depth[i] = std::clamp(depth[i] + plane, 0.0f, 1.0f);
                }
            }
        }

        std::vector<float> rgb(3 * static_cast<size_t>(h) * w);
        std::vector<float> depth_f(depth.begin(), depth.end());
        std::vector<float> labels_f(labels.size());
        for (int y = 0; y < h; ++y) {
            for (int x = 0; x < w; ++x) {
                const size_t i = static_cast<size_t>(y) * w + x;
                const int cls = labels[i];
                for (int c = 0; c < 3; ++c) {
                    const float v = kPalette[cls][c] + rng.normal(0.0f, 0.05f);
                    rgb[static_cast<size_t>(c) * h * w + i] = std::clamp(v, 0.0f, 1.0f);
                }
                labels_f[i] = static_cast<float>(cls);
            }
        }

        Scene scene;
        scene.rgb = Tensor::from_vector({1, 3, h, w}, std::move(rgb));
        scene.depth = Tensor::from_vector({1, 1, h, w}, std::move(depth_f));
        scene.labels = Tensor::from_vector({1, 1, h, w}, std::move(labels_f));
        scene.shapes = std::move(cand.shapes);
        scene.seed = seed;
        return scene;
    }
}

void save_scene(const std::string& root, const Scene& scene) {
    const fs::path dir = fs::path(root) / "scenes" / std::to_string(scene.seed);
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw IoError(dir.string() + ": cannot create directory (" + ec.message() + ")");
    save_raw((dir / "rgb.mten").string(), tensor_to_raw(scene.rgb, 3));
    save_raw((dir / "depth.mten").string(), tensor_to_raw(scene.depth, 3));
    save_raw((dir / "labels.mten").string(), tensor_to_raw(scene.labels, 2));
}

Scene load_scene(const std::string& root, uint64_t seed) {
    const fs::path dir = fs::path(root) / "scenes" / std::to_string(seed);
    Scene scene;
    scene.rgb = raw_to_tensor(load_raw((dir / "rgb.mten").string()));
    scene.depth = raw_to_tensor(load_raw((dir / "depth.mten").string()));
    scene.labels = raw_to_tensor(load_raw((dir / "labels.mten").string()));
    scene.seed = seed;
    return scene;
}

std::vector<uint64_t> list_scene_seeds(const std::string& root) {
    const fs::path dir = fs::path(root) / "scenes";
    if (!fs::is_directory(dir)) throw IoError(dir.string() + ": not a dataset directory");
    std::vector<uint64_t> seeds;
    for (const auto& entry : fs::directory_iterator(dir)) {
        if (!entry.is_directory()) continue;
        const std::string name = entry.path().filename().string();
        try {
            seeds.push_back(std::stoull(name));
        } catch (const std::exception&) {
            // ignore non-numeric directories
        }
    }
    std::sort(seeds.begin(), seeds.end());
    return seeds;
}

std::vector<Scene> load_dataset(const std::string& root) {
    std::vector<Scene> scenes;
    for (uint64_t seed : list_scene_seeds(root)) scenes.push_back(load_scene(root, seed));
    return scenes;
}

ChannelStats compute_stats(const std::vector<Scene>& scenes) {
    if (scenes.empty()) throw ContractError("compute_stats: empty split");
    double sum[3] = {0, 0, 0};
    double sq[3] = {0, 0, 0};
    int64_t count = 0;
    for (const Scene& s : scenes) {
        const Shape& sh = s.rgb.shape();
        const int64_t plane = sh.h * sh.w;
        for (int c = 0; c < 3; ++c) {
            const float* p = s.rgb.data() + c * plane;
            for (int64_t i = 0; i < plane; ++i) {
                sum[c] += static_cast<double>(p[i]);
                sq[c] += static_cast<double>(p[i]) * p[i];
            }
        }
        count += plane;
    }
    ChannelStats stats;
    for (int c = 0; c < 3; ++c) {
        const double mean = sum[c] / static_cast<double>(count);
        const double var = std::max(0.0, sq[c] / static_cast<double>(count) - mean * mean);
        stats.mean[static_cast<size_t>(c)] = static_cast<float>(mean);
        stats.stdev[static_cast<size_t>(c)] = static_cast<float>(std::sqrt(var));
    }
    return stats;
}

Tensor normalize_rgb(const Tensor& rgb, const ChannelStats& stats) {
    const Shape& s = rgb.shape();
    if (s.c != 3) throw ShapeError("normalize_rgb: expected 3 channels, got " + s.str());
    std::vector<float> out(static_cast<size_t>(s.numel()));
    const int64_t plane = s.h * s.w;
    for (int64_t n = 0; n < s.n; ++n) {
        for (int c = 0; c < 3; ++c) {
            float sd = stats.stdev[static_cast<size_t>(c)];
            if (sd < 1e-6f) {
                std::cerr << "normalize_rgb: channel " << c << " has near-zero variance, flooring std to 1e-6\n";
                sd = 1e-6f;
            }
            const float mean = stats.mean[static_cast<size_t>(c)];
            const float* p = rgb.data() + (n * 3 + c) * plane;
            float* o = out.data() + (n * 3 + c) * plane;
            for (int64_t i = 0; i < plane; ++i) o[i] = (p[i] - mean) / sd;
        }
    }
    return Tensor::from_vector(s, std::move(out));
}

}  // namespace haarnet
