#pragma once

#include <array>
#include <vector>

#include "volseg/attention.hpp"

namespace volseg {

/// One encoder stage of the 2D branch.
struct Stage2d {
    int64_t depth = 1;      ///< number of transformer blocks
    int64_t channels = 16;  ///< feature width C_i
    int64_t heads = 1;
    int64_t reduction = 1;  ///< key/value spatial reduction ratio r_i
};

struct Backbone2dConfig {
    int64_t in_channels = 1;
    int64_t num_classes = 3;
    int64_t expansion = 2;  ///< feed-forward expansion ratio
    std::array<Stage2d, 4> stages{{{1, 16, 1, 8}, {1, 32, 2, 4}, {2, 64, 4, 2}, {1, 128, 8, 1}}};
};

/// Channel-wise LayerNorm over a [N,C,H,W] map.
template <typename T>
Tensor<T> norm_map(const LayerNorm<T>& ln, const Tensor<T>& x) {
    return tokens_to_map(ln(map_to_tokens(x)), x.dim(2), x.dim(3));
}

/// Overlapping convolutional embedding: two (conv k3 s2 -> LayerNorm -> GELU)
/// stages for a x4 spatial reduction, then a pointwise projection.
template <typename T>
class ConvPatchEmbed2d {
  public:
    ConvPatchEmbed2d() = default;
    ConvPatchEmbed2d(ParamStore<T>& ps, const std::string& prefix, int64_t in_ch, int64_t out_ch,
                     Rng& rng) {
        const int64_t mid = std::max<int64_t>(out_ch / 2, 1);
        conv1_ = Conv2d<T>(ps, prefix + ".conv1", in_ch, mid, {3, 3}, {2, 2}, {1, 1}, rng);
        ln1_ = LayerNorm<T>(ps, prefix + ".ln1", mid);
        conv2_ = Conv2d<T>(ps, prefix + ".conv2", mid, out_ch, {3, 3}, {2, 2}, {1, 1}, rng);
        ln2_ = LayerNorm<T>(ps, prefix + ".ln2", out_ch);
        proj_ = Conv2d<T>(ps, prefix + ".proj", out_ch, out_ch, {1, 1}, {1, 1}, {0, 0}, rng);
    }

    /// [N,in,H,W] (H,W divisible by 4) -> [N,out,H/4,W/4]
    Tensor<T> operator()(const Tensor<T>& x) const {
        Tensor<T> a = gelu(norm_map(ln1_, conv1_(x)));
        Tensor<T> b = gelu(norm_map(ln2_, conv2_(a)));
        return proj_(b);
    }

  private:
    Conv2d<T> conv1_, conv2_, proj_;
    LayerNorm<T> ln1_, ln2_;
};

/// Pre-norm transformer block: reduced-key attention plus feed-forward,
/// each behind a residual.
template <typename T>
class GrBlock2d {
  public:
    GrBlock2d() = default;
    GrBlock2d(ParamStore<T>& ps, const std::string& prefix, int64_t dim, int64_t heads, int64_t r,
              int64_t expansion, Rng& rng)
        : norm1_(ps, prefix + ".norm1", dim),
          attn_(ps, prefix + ".attn", dim, heads, r, rng),
          norm2_(ps, prefix + ".norm2", dim),
          ff_(ps, prefix + ".ff", dim, expansion, rng) {}

    Tensor<T> operator()(const Tensor<T>& f) const {
        Tensor<T> fgr = add(attn_(norm_map(norm1_, f)), f);
        return add(ff_(norm_map(norm2_, fgr)), fgr);
    }

    GrMsa2d<T>& attention() { return attn_; }

  private:
    LayerNorm<T> norm1_, norm2_;
    GrMsa2d<T> attn_;
    Cpff2d<T> ff_;
};

/// Per-slice multi-scale logits. `logits[0]` is at the input resolution
/// (the finest head linearly upsampled x4); logits[1..3] sit at 1/8, 1/16,
/// 1/32 of the (padded) input. `finest` keeps the raw 1/4-resolution head.
template <typename T>
struct SlicePrediction {
    std::vector<Tensor<T>> logits;
    Tensor<T> finest;
};

/// 2D encoder-decoder over batches of slices. The batch dimension is kept
/// strictly independent so a volume can be processed as N=D slices with no
/// cross-slice leakage.
template <typename T>
class Backbone2d {
  public:
    Backbone2d() = default;
    Backbone2d(ParamStore<T>& ps, const std::string& prefix, const Backbone2dConfig& cfg, Rng& rng)
        : cfg_(cfg) {
        check<ValueError>(cfg.num_classes >= 2, "Backbone2d: need at least 2 classes");
        for (int i = 0; i < 4; ++i) {
            const auto& st = cfg.stages[static_cast<size_t>(i)];
            check<ValueError>(st.depth >= 0 && st.channels >= 1 && st.heads >= 1 &&
                                  st.reduction >= 1,
                              "Backbone2d: invalid stage config");
            if (i > 0)
                check<ValueError>(cfg.stages[static_cast<size_t>(i - 1)].channels <= st.channels,
                                  "Backbone2d: channels must be non-decreasing");
        }
        embed_ = ConvPatchEmbed2d<T>(ps, prefix + ".embed", cfg.in_channels,
                                     cfg.stages[0].channels, rng);
        for (int i = 0; i < 4; ++i) {
            const auto& st = cfg.stages[static_cast<size_t>(i)];
            for (int64_t b = 0; b < st.depth; ++b)
                blocks_[static_cast<size_t>(i)].emplace_back(
                    ps, prefix + ".stage" + std::to_string(i) + ".block" + std::to_string(b),
                    st.channels, st.heads, st.reduction, cfg.expansion, rng);
            if (i < 3)
                down_[static_cast<size_t>(i)] =
                    Conv2d<T>(ps, prefix + ".down" + std::to_string(i), st.channels,
                              cfg.stages[static_cast<size_t>(i + 1)].channels, {3, 3}, {2, 2},
                              {1, 1}, rng);
        }
        for (int lvl = 0; lvl < 3; ++lvl) {
            const int64_t c_skip = cfg.stages[static_cast<size_t>(lvl)].channels;
            const int64_t c_up = cfg.stages[static_cast<size_t>(lvl + 1)].channels;
            fuse_[static_cast<size_t>(lvl)] =
                Conv2d<T>(ps, prefix + ".fuse" + std::to_string(lvl), c_skip + c_up, c_skip,
                          {1, 1}, {1, 1}, {0, 0}, rng);
            fuse_ln_[static_cast<size_t>(lvl)] =
                LayerNorm<T>(ps, prefix + ".fuse" + std::to_string(lvl) + ".ln", c_skip);
        }
        for (int lvl = 0; lvl < 4; ++lvl)
            head_[static_cast<size_t>(lvl)] =
                Conv2d<T>(ps, prefix + ".head" + std::to_string(lvl),
                          cfg.stages[static_cast<size_t>(lvl)].channels, cfg.num_classes, {1, 1},
                          {1, 1}, {0, 0}, rng);
    }

    /// x: [N,in,H,W] -> predictions at 4 scales (input padded right to a
    /// multiple of 4 internally; outputs are cropped back).
    SlicePrediction<T> operator()(const Tensor<T>& x) const {
        check(x.rank() == 4 && x.dim(1) == cfg_.in_channels,
              "Backbone2d: expected [N," + std::to_string(cfg_.in_channels) + ",H,W]");
        const int64_t n = x.dim(0), h = x.dim(2), w = x.dim(3);
        const int64_t ph = (4 - h % 4) % 4, pw = (4 - w % 4) % 4;
        Tensor<T> f = embed_(pad_right(x, {0, 0, ph, pw}));

        std::array<Tensor<T>, 4> feats;
        for (size_t i = 0; i < 4; ++i) {
            for (const auto& b : blocks_[i]) f = b(f);
            feats[i] = f;
            if (i < 3) f = down_[i](f);
        }

        std::array<Tensor<T>, 4> heads;
        Tensor<T> d = feats[3];
        heads[3] = head_[3](d);
        for (int lvl = 2; lvl >= 0; --lvl) {
            const auto& skip = feats[static_cast<size_t>(lvl)];
            Tensor<T> up = interpolate_linear(d, {skip.dim(2), skip.dim(3)});
            d = gelu(norm_map(fuse_ln_[static_cast<size_t>(lvl)],
                              fuse_[static_cast<size_t>(lvl)](concat<T>({up, skip}, 1))));
            heads[static_cast<size_t>(lvl)] = head_[static_cast<size_t>(lvl)](d);
        }

        SlicePrediction<T> out;
        out.finest = heads[0];
        Tensor<T> full = interpolate_linear(heads[0], {h + ph, w + pw});
        if (ph != 0 || pw != 0) full = crop_to(full, {n, cfg_.num_classes, h, w});
        out.logits = {full, heads[1], heads[2], heads[3]};
        return out;
    }

    /// vol: [in,D,H,W] -> 4 logit volumes [K,D,h_i,w_i], slices processed as
    /// an independent batch along D; element 0 is at full input resolution.
    std::vector<Tensor<T>> predict_volume(const Tensor<T>& vol) const {
        check(vol.rank() == 4 && vol.dim(0) == cfg_.in_channels,
              "Backbone2d: expected volume [in,D,H,W]");
        check<ValueError>(vol.dim(1) >= 1, "Backbone2d: volume has no slices");
        SlicePrediction<T> sp = (*this)(permute(vol, {1, 0, 2, 3}));
        std::vector<Tensor<T>> out;
        out.reserve(sp.logits.size());
        for (const auto& p : sp.logits) out.push_back(permute(p, {1, 0, 2, 3}));
        return out;
    }

    const Backbone2dConfig& config() const { return cfg_; }
    std::vector<GrBlock2d<T>>& stage_blocks(size_t i) { return blocks_[i]; }
    ConvPatchEmbed2d<T>& embed() { return embed_; }

  private:
    Backbone2dConfig cfg_;
    ConvPatchEmbed2d<T> embed_;
    std::array<std::vector<GrBlock2d<T>>, 4> blocks_;
    std::array<Conv2d<T>, 3> down_;
    std::array<Conv2d<T>, 3> fuse_;
    std::array<LayerNorm<T>, 3> fuse_ln_;
    std::array<Conv2d<T>, 4> head_;
};

}  // namespace volseg
