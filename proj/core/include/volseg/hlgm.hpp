#pragma once

#include <array>
#include <string>
#include <utility>
#include <vector>

#include "volseg/backbone3d.hpp"

namespace volseg {

struct HlgmConfig {
    int64_t dim = 32;                     ///< shared embedding width of both streams
    int64_t blocks = 2;                   ///< number of fusion blocks
    std::array<int64_t, 3> region{2, 4, 4};  ///< (D,H,W) region for local fusion
    int64_t reduction = 2;                ///< spatial reduction ratio of global fusion
    int64_t heads = 2;
    int64_t expansion = 2;
};

/// Embeds one input stream into the fused feature space: two
/// (3D conv k3 -> LayerNorm -> GELU) stages with strides (1,2,2) then
/// (2,2,2), i.e. x4 reduction in H,W and x2 in D.
template <typename T>
class StreamEmbed3d {
  public:
    StreamEmbed3d() = default;
    StreamEmbed3d(ParamStore<T>& ps, const std::string& prefix, int64_t in_ch, int64_t dim,
                  Rng& rng) {
        conv1_ = Conv3d<T>(ps, prefix + ".conv1", in_ch, dim, {3, 3, 3}, {1, 2, 2}, {1, 1, 1},
                           rng);
        ln1_ = LayerNorm<T>(ps, prefix + ".ln1", dim);
        conv2_ = Conv3d<T>(ps, prefix + ".conv2", dim, dim, {3, 3, 3}, {2, 2, 2}, {1, 1, 1}, rng);
        ln2_ = LayerNorm<T>(ps, prefix + ".ln2", dim);
    }

    /// [in,D,H,W] -> [dim, ceil(D/2), ceil(H/4), ceil(W/4)]
    Tensor<T> operator()(const Tensor<T>& x) const {
        Tensor<T> a = gelu(norm_vol(ln1_, conv_vol(conv1_, x)));
        return gelu(norm_vol(ln2_, conv_vol(conv2_, a)));
    }

  private:
    Conv3d<T> conv1_, conv2_;
    LayerNorm<T> ln1_, ln2_;
};

/// One mutual-fusion block. Each stream is updated from the *previous*
/// iterates of both streams:
///   hat_p = LMF(F_p,F_v) + GMF(F_p,F_v) + F_p     (and symmetrically for v)
///   F_p'  = CPFF(hat_p) + hat_p
/// so the two updates are order-independent. All weights are per-stream.
template <typename T>
class HlgmBlock {
  public:
    HlgmBlock() = default;
    HlgmBlock(ParamStore<T>& ps, const std::string& prefix, const HlgmConfig& cfg, Rng& rng) {
        lmf_p_ = Lmf<T>(ps, prefix + ".p.lmf", cfg.dim, cfg.heads, cfg.region, rng);
        gmf_p_ = Gmf<T>(ps, prefix + ".p.gmf", cfg.dim, cfg.heads, cfg.reduction, rng);
        ff_p_ = Cpff3d<T>(ps, prefix + ".p.ff", cfg.dim, cfg.expansion, rng);
        lmf_v_ = Lmf<T>(ps, prefix + ".v.lmf", cfg.dim, cfg.heads, cfg.region, rng);
        gmf_v_ = Gmf<T>(ps, prefix + ".v.gmf", cfg.dim, cfg.heads, cfg.reduction, rng);
        ff_v_ = Cpff3d<T>(ps, prefix + ".v.ff", cfg.dim, cfg.expansion, rng);
    }

    std::pair<Tensor<T>, Tensor<T>> operator()(const Tensor<T>& fp, const Tensor<T>& fv) const {
        Tensor<T> hat_p = add(add(lmf_p_(fp, fv), gmf_p_(fp, fv)), fp);
        Tensor<T> hat_v = add(add(lmf_v_(fv, fp), gmf_v_(fv, fp)), fv);
        return {add(ff_p_(hat_p), hat_p), add(ff_v_(hat_v), hat_v)};
    }

  private:
    Lmf<T> lmf_p_, lmf_v_;
    Gmf<T> gmf_p_, gmf_v_;
    Cpff3d<T> ff_p_, ff_v_;
};

/// Fusion front-end of the 3D branch: embeds the stacked 2D prediction and
/// the raw volume, runs the mutual-fusion blocks, then merges the two
/// streams (channel concat + pointwise conv) to the 3D encoder width.
template <typename T>
class Hlgm {
  public:
    Hlgm() = default;
    Hlgm(ParamStore<T>& ps, const std::string& prefix, int64_t p_channels, int64_t v_channels,
         const HlgmConfig& cfg, int64_t out_channels, Rng& rng)
        : cfg_(cfg) {
        check<ValueError>(cfg.dim >= 1 && cfg.blocks >= 0 && cfg.reduction >= 1,
                          "Hlgm: invalid config");
        embed_p_ = StreamEmbed3d<T>(ps, prefix + ".embed_p", p_channels, cfg.dim, rng);
        embed_v_ = StreamEmbed3d<T>(ps, prefix + ".embed_v", v_channels, cfg.dim, rng);
        for (int64_t b = 0; b < cfg.blocks; ++b)
            blocks_.emplace_back(ps, prefix + ".block" + std::to_string(b), cfg, rng);
        merge_ = Conv3d<T>(ps, prefix + ".merge", 2 * cfg.dim, out_channels, {1, 1, 1}, {1, 1, 1},
                           {0, 0, 0}, rng);
    }

    /// p2d: [K,D,H,W] logits; vol: [in,D,H,W] -> fused [out, D/2, H/4, W/4]
    Tensor<T> operator()(const Tensor<T>& p2d, const Tensor<T>& vol) const {
        check(p2d.rank() == 4 && vol.rank() == 4 && p2d.dim(1) == vol.dim(1) &&
                  p2d.dim(2) == vol.dim(2) && p2d.dim(3) == vol.dim(3),
              "Hlgm: streams must share spatial extents");
        Tensor<T> fp = embed_p_(p2d);
        Tensor<T> fv = embed_v_(vol);
        for (const auto& b : blocks_) {
            auto next = b(fp, fv);
            fp = next.first;
            fv = next.second;
        }
        return conv_vol(merge_, concat<T>({fp, fv}, 0));
    }

    const HlgmConfig& config() const { return cfg_; }
    std::vector<HlgmBlock<T>>& fusion_blocks() { return blocks_; }

  private:
    HlgmConfig cfg_;
    StreamEmbed3d<T> embed_p_, embed_v_;
    std::vector<HlgmBlock<T>> blocks_;
    Conv3d<T> merge_;
};

}  // namespace volseg
