#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "volseg/backbone2d.hpp"
#include "volseg/backbone3d.hpp"
#include "volseg/config.hpp"
#include "volseg/flops.hpp"
#include "volseg/hlgm.hpp"

namespace volseg {

struct ModelSettings {
    int64_t in_channels = 1;
    int64_t num_classes = 3;
    Backbone2dConfig b2d;
    Backbone3dConfig b3d;
    HlgmConfig fusion;
    /// When set, the 3D branch treats the 2D predictions as constants:
    /// no gradient flows from the 3D losses back into the 2D backbone.
    bool detach_2d = false;
};

/// Multi-scale logits of one forward pass. `p2d[i]` and `p3d[i]` are the
/// per-branch pyramids ([K,D,H,W] at i=0); `p3d_res[i]` adds the
/// full-resolution 2D prediction (resized to level i) to the 3D logits, so
/// the 3D branch only has to learn a residual correction.
template <typename T>
struct PredictionPyramid {
    std::vector<Tensor<T>> p2d, p3d, p3d_res;
};

template <typename T>
class HybridModel {
  public:
    explicit HybridModel(const ModelSettings& settings, uint64_t seed) : cfg_(settings) {
        cfg_.b2d.in_channels = cfg_.in_channels;
        cfg_.b2d.num_classes = cfg_.num_classes;
        cfg_.b3d.num_classes = cfg_.num_classes;
        Rng rng(seed);
        b2d_ = Backbone2d<T>(ps_, "b2d", cfg_.b2d, rng);
        fusion_ = Hlgm<T>(ps_, "fusion", cfg_.num_classes, cfg_.in_channels, cfg_.fusion,
                          cfg_.b3d.stages[0].channels, rng);
        b3d_ = Backbone3d<T>(ps_, "b3d", cfg_.b3d, rng);
    }

    HybridModel(const HybridModel&) = delete;
    HybridModel& operator=(const HybridModel&) = delete;

    /// vol: [in, D, H, W]
    PredictionPyramid<T> forward(const Tensor<T>& vol) const {
        check(vol.rank() == 4 && vol.dim(0) == cfg_.in_channels,
              "HybridModel: expected volume [" + std::to_string(cfg_.in_channels) + ",D,H,W]");
        PredictionPyramid<T> pyr;
        pyr.p2d = b2d_.predict_volume(vol);
        Tensor<T> p0 = cfg_.detach_2d ? pyr.p2d[0].detach() : pyr.p2d[0];
        Tensor<T> fused = fusion_(p0, vol);
        pyr.p3d = b3d_(fused, {vol.dim(1), vol.dim(2), vol.dim(3)});
        pyr.p3d_res.reserve(pyr.p3d.size());
        for (const auto& p : pyr.p3d)
            pyr.p3d_res.push_back(add(interpolate_linear(p0, {p.dim(1), p.dim(2), p.dim(3)}), p));
        return pyr;
    }

    /// Hard labels from the finest hybrid output: argmax over classes with
    /// ties broken toward the lowest class index.
    std::vector<uint8_t> infer(const Tensor<T>& vol) const {
        NoGradGuard ng;
        PredictionPyramid<T> pyr = forward(vol);
        return argmax_labels(pyr.p3d_res[0]);
    }

    /// Hard labels from the 2D branch alone (same weights, no 3D refinement).
    std::vector<uint8_t> infer_2d(const Tensor<T>& vol) const {
        NoGradGuard ng;
        return argmax_labels(b2d_.predict_volume(vol)[0]);
    }

    /// [K, D, H, W] logits -> per-voxel argmax labels.
    static std::vector<uint8_t> argmax_labels(const Tensor<T>& logits) {
        check(logits.rank() == 4, "argmax_labels: expected [K,D,H,W]");
        const int64_t k = logits.dim(0);
        const int64_t v = logits.numel() / k;
        const auto& d = logits.data();
        std::vector<uint8_t> out(static_cast<size_t>(v));
        for (int64_t i = 0; i < v; ++i) {
            int64_t best = 0;
            T best_val = d[static_cast<size_t>(i)];
            for (int64_t c = 1; c < k; ++c) {
                const T val = d[static_cast<size_t>(c * v + i)];
                if (val > best_val) { // strict: ties keep the lowest class
                    best = c;
                    best_val = val;
                }
            }
            out[static_cast<size_t>(i)] = static_cast<uint8_t>(best);
        }
        return out;
    }

    int64_t count_params() const { return ps_.total_elements(); }

    /// Forward-pass FLOPs for a given input shape (counted, not estimated).
    int64_t count_flops(std::array<int64_t, 4> in_shape) const {
        NoGradGuard ng;
        flops::Counter counter;
        flops::Scope scope(counter);
        forward(Tensor<T>::zeros({in_shape[0], in_shape[1], in_shape[2], in_shape[3]}));
        return counter.total();
    }

    ParamStore<T>& params() { return ps_; }
    const ParamStore<T>& params() const { return ps_; }
    const ModelSettings& settings() const { return cfg_; }
    Backbone2d<T>& backbone2d() { return b2d_; }
    Backbone3d<T>& backbone3d() { return b3d_; }
    Hlgm<T>& fusion() { return fusion_; }

  private:
    ModelSettings cfg_;
    ParamStore<T> ps_;
    Backbone2d<T> b2d_;
    Hlgm<T> fusion_;
    Backbone3d<T> b3d_;
};

namespace detail {

inline std::vector<int64_t> sized_list(const Config& cfg, const std::string& key,
                                       std::vector<int64_t> def, size_t want) {
    std::vector<int64_t> v = cfg.get_int_list(key, std::move(def));
    check<ConfigError>(v.size() == want, "config: key '" + key + "' needs exactly " +
                                             std::to_string(want) + " comma-separated values");
    return v;
}

} // namespace detail

/// Reads model hyper-parameters from a flat config (all keys optional; the
/// defaults are the desk-scale model).
inline ModelSettings model_settings_from_config(const Config& cfg) {
    ModelSettings s;
    s.in_channels = cfg.get_int("in_channels", 1);
    s.num_classes = cfg.get_int("num_classes", 3);
    const int64_t expansion = cfg.get_int("expansion", 2);
    s.detach_2d = cfg.get_bool("detach_2d", false);

    auto c2 = detail::sized_list(cfg, "channels_2d", {16, 32, 64, 128}, 4);
    auto d2 = detail::sized_list(cfg, "depths_2d", {1, 1, 2, 1}, 4);
    auto h2 = detail::sized_list(cfg, "heads_2d", {1, 2, 4, 8}, 4);
    auto r2 = detail::sized_list(cfg, "reductions_2d", {8, 4, 2, 1}, 4);
    s.b2d.expansion = expansion;
    for (size_t i = 0; i < 4; ++i) s.b2d.stages[i] = {d2[i], c2[i], h2[i], r2[i]};

    auto c3 = detail::sized_list(cfg, "channels_3d", {16, 32, 64, 128}, 4);
    auto d3 = detail::sized_list(cfg, "depths_3d", {2, 2, 2, 2}, 4);
    auto h3 = detail::sized_list(cfg, "heads_3d", {1, 2, 4, 8}, 4);
    auto win = detail::sized_list(cfg, "window", {2, 4, 4}, 3);
    s.b3d.expansion = expansion;
    s.b3d.window = {win[0], win[1], win[2]};
    for (size_t i = 0; i < 4; ++i) s.b3d.stages[i] = {d3[i], c3[i], h3[i]};

    s.fusion.dim = cfg.get_int("fusion_dim", 32);
    s.fusion.blocks = cfg.get_int("fusion_blocks", 2);
    auto reg = detail::sized_list(cfg, "fusion_region", {2, 4, 4}, 3);
    s.fusion.region = {reg[0], reg[1], reg[2]};
    s.fusion.reduction = cfg.get_int("fusion_reduction", 2);
    s.fusion.heads = cfg.get_int("fusion_heads", 2);
    s.fusion.expansion = expansion;
    return s;
}

} // namespace volseg
