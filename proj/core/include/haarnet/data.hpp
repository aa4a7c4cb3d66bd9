#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "haarnet/tensor.hpp"

namespace haarnet {

// Geometry record kept alongside the rendered scene so occlusion can be
// re-derived independently in tests.
struct SceneShape {
    enum Kind { Rect = 0, Disk = 1, Triangle = 2 };
    int kind = Rect;
    int cls = 1;
    float depth = 0.5f;            // nominal plane, smaller = nearer
    std::array<float, 6> p{};      // rect: x0,y0,x1,y1; disk: cx,cy,r; tri: 3 vertices

    bool covers(float x, float y) const;
};

struct Scene {
    Tensor rgb;     // (1,3,H,W) in [0,1]
    Tensor depth;   // (1,1,H,W) in [0,1]
    Tensor labels;  // (1,1,H,W) integral class ids
    std::vector<SceneShape> shapes;
    uint64_t seed = 0;
};

inline constexpr int kPaletteSize = 8;

// Deterministic scene: 3-7 shapes with class-banded depth planes, per-class
// colour distributions with Gaussian noise (sigma 0.05), labels from the
// nearest covering shape, background class 0.
Scene synth_scene(uint64_t seed, int h, int w, int num_classes);

// Directory layout: <root>/scenes/<seed>/{rgb.mten,depth.mten,labels.mten}.
void save_scene(const std::string& root, const Scene& scene);
Scene load_scene(const std::string& root, uint64_t seed);
std::vector<uint64_t> list_scene_seeds(const std::string& root);
std::vector<Scene> load_dataset(const std::string& root);

struct ChannelStats {
    std::array<float, 3> mean{};
    std::array<float, 3> stdev{};
};

// Per-channel moments over a training split's RGB data.
ChannelStats compute_stats(const std::vector<Scene>& scenes);

// (x - mean) / std per channel; std is floored at 1e-6 with a warning on
// stderr. Depth tensors pass through untouched (already in [0,1]).
Tensor normalize_rgb(const Tensor& rgb, const ChannelStats& stats);

}  // namespace haarnet
