#pragma once

#include <array>
#include <string>
#include <vector>

#include "volseg/attention.hpp"

namespace volseg {

/// One encoder stage of the 3D branch. `depth` must be even: blocks
/// alternate unshifted / shifted window attention.
struct Stage3d {
    int64_t depth = 2;
    int64_t channels = 16;
    int64_t heads = 1;
};

struct Backbone3dConfig {
    int64_t num_classes = 3;
    int64_t expansion = 2;
    std::array<int64_t, 3> window{2, 4, 4};  ///< (D,H,W) window extents
    std::array<Stage3d, 4> stages{{{2, 16, 1}, {2, 32, 2}, {2, 64, 4}, {2, 128, 8}}};
};

/// Channel-wise LayerNorm over a [C,D,H,W] volume.
template <typename T>
Tensor<T> norm_vol(const LayerNorm<T>& ln, const Tensor<T>& x) {
    return tokens_to_vol(ln(vol_to_tokens(x)), x.dim(1), x.dim(2), x.dim(3));
}

/// Apply a [N,C,...] 3D conv to an unbatched [C,D,H,W] volume.
template <typename T>
Tensor<T> conv_vol(const Conv3d<T>& conv, const Tensor<T>& x) {
    Tensor<T> y = conv(reshape(x, {1, x.dim(0), x.dim(1), x.dim(2), x.dim(3)}));
    return reshape(y, {y.dim(1), y.dim(2), y.dim(3), y.dim(4)});
}

/// Pre-norm 3D window-attention block (optionally shifted) with feed-forward.
template <typename T>
class WindowBlock3d {
  public:
    WindowBlock3d() = default;
    WindowBlock3d(ParamStore<T>& ps, const std::string& prefix, int64_t dim, int64_t heads,
                std::array<int64_t, 3> window, std::array<int64_t, 3> shift, int64_t expansion,
                Rng& rng)
        : norm1_(ps, prefix + ".norm1", dim),
          attn_(ps, prefix + ".attn", dim, heads, window, shift, rng),
          norm2_(ps, prefix + ".norm2", dim),
          ff_(ps, prefix + ".ff", dim, expansion, rng) {}

    Tensor<T> operator()(const Tensor<T>& f) const {
        Tensor<T> fa = add(attn_(norm_vol(norm1_, f)), f);
        return add(ff_(norm_vol(norm2_, fa)), fa);
    }

    WindowMsa3d<T>& attention() { return attn_; }
    LayerNorm<T>& norm1() { return norm1_; }
    LayerNorm<T>& norm2() { return norm2_; }
    Cpff3d<T>& feed_forward() { return ff_; }

  private:
    LayerNorm<T> norm1_, norm2_;
    WindowMsa3d<T> attn_;
    Cpff3d<T> ff_;
};

/// 3D encoder-decoder over a fused feature volume. The input sits at
/// (D/2, H/4, W/4) of the original volume; the decoder emits four logit
/// volumes, the finest upsampled to the full original resolution.
template <typename T>
class Backbone3d {
  public:
    Backbone3d() = default;
    Backbone3d(ParamStore<T>& ps, const std::string& prefix, const Backbone3dConfig& cfg, Rng& rng)
        : cfg_(cfg) {
        check<ValueError>(cfg.num_classes >= 2, "Backbone3d: need at least 2 classes");
        std::array<int64_t, 3> half{};
        for (int a = 0; a < 3; ++a) {
            check<ValueError>(cfg.window[static_cast<size_t>(a)] >= 1,
                              "Backbone3d: window extents must be positive");
            half[static_cast<size_t>(a)] = cfg.window[static_cast<size_t>(a)] / 2;
        }
        for (int i = 0; i < 4; ++i) {
            const auto& st = cfg.stages[static_cast<size_t>(i)];
            check<ValueError>(st.depth >= 0 && st.depth % 2 == 0,
                              "Backbone3d: stage depth must be even (plain/shifted pairs)");
            check<ValueError>(st.channels >= 1 && st.heads >= 1,
                              "Backbone3d: invalid stage config");
            for (int64_t b = 0; b < st.depth; ++b)
                blocks_[static_cast<size_t>(i)].emplace_back(
                    ps, prefix + ".stage" + std::to_string(i) + ".block" + std::to_string(b),
                    st.channels, st.heads, cfg.window,
                    b % 2 == 0 ? std::array<int64_t, 3>{0, 0, 0} : half, cfg.expansion, rng);
            if (i < 3)
                down_[static_cast<size_t>(i)] =
                    Conv3d<T>(ps, prefix + ".down" + std::to_string(i), st.channels,
                              cfg.stages[static_cast<size_t>(i + 1)].channels, {3, 3, 3},
                              {2, 2, 2}, {1, 1, 1}, rng);
        }
        for (int lvl = 0; lvl < 3; ++lvl) {
            const int64_t c_skip = cfg.stages[static_cast<size_t>(lvl)].channels;
            const int64_t c_up = cfg.stages[static_cast<size_t>(lvl + 1)].channels;
            fuse_[static_cast<size_t>(lvl)] =
                Conv3d<T>(ps, prefix + ".fuse" + std::to_string(lvl), c_skip + c_up, c_skip,
                          {1, 1, 1}, {1, 1, 1}, {0, 0, 0}, rng);
            fuse_ln_[static_cast<size_t>(lvl)] =
                LayerNorm<T>(ps, prefix + ".fuse" + std::to_string(lvl) + ".ln", c_skip);
        }
        for (int lvl = 0; lvl < 4; ++lvl)
            head_[static_cast<size_t>(lvl)] =
                Conv3d<T>(ps, prefix + ".head" + std::to_string(lvl),
                          cfg.stages[static_cast<size_t>(lvl)].channels, cfg.num_classes,
                          {1, 1, 1}, {1, 1, 1}, {0, 0, 0}, rng);
    }

    /// f0: [C1,D',H',W'] fused features; full: original (D,H,W).
    /// Returns 4 logit volumes; element 0 is [K,D,H,W], element i>0 sits at
    /// the stage-i feature resolution.
    std::vector<Tensor<T>> operator()(const Tensor<T>& f0,
                                      std::array<int64_t, 3> full) const {
        check(f0.rank() == 4 && f0.dim(0) == cfg_.stages[0].channels,
              "Backbone3d: fused input must be [C1,D',H',W']");
        Tensor<T> f = f0;
        std::array<Tensor<T>, 4> feats;
        for (size_t i = 0; i < 4; ++i) {
            for (const auto& b : blocks_[i]) f = b(f);
            feats[i] = f;
            if (i < 3) f = conv_vol(down_[i], f);
        }

        std::array<Tensor<T>, 4> heads;
        Tensor<T> d = feats[3];
        heads[3] = conv_vol(head_[3], d);
        for (int lvl = 2; lvl >= 0; --lvl) {
            const auto& skip = feats[static_cast<size_t>(lvl)];
            Tensor<T> up = interpolate_linear(d, {skip.dim(1), skip.dim(2), skip.dim(3)});
            d = gelu(norm_vol(fuse_ln_[static_cast<size_t>(lvl)],
                              conv_vol(fuse_[static_cast<size_t>(lvl)],
                                       concat<T>({up, skip}, 0))));
            heads[static_cast<size_t>(lvl)] = conv_vol(head_[static_cast<size_t>(lvl)], d);
        }

        return {interpolate_linear(heads[0], {full[0], full[1], full[2]}), heads[1], heads[2],
                heads[3]};
    }

    const Backbone3dConfig& config() const { return cfg_; }
    std::vector<WindowBlock3d<T>>& stage_blocks(size_t i) { return blocks_[i]; }

  private:
    Backbone3dConfig cfg_;
    std::array<std::vector<WindowBlock3d<T>>, 4> blocks_;
    std::array<Conv3d<T>, 3> down_;
    std::array<Conv3d<T>, 3> fuse_;
    std::array<LayerNorm<T>, 3> fuse_ln_;
    std::array<Conv3d<T>, 4> head_;
};

}  // namespace volseg
