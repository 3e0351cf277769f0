#pragma once

#include <array>
#include <cmath>

#include "volseg/nn.hpp"

namespace volseg {

struct MsaConfig {
    int64_t dim = 0;
    int64_t heads = 1;
    bool qkv_bias = true;
};

/// Optional capture of the post-softmax attention weights
/// (shape [B*heads, L_q, L_kv]) for inspection in tests.
template <typename T>
struct AttnProbe {
    Tensor<T> probs;
};

// ---------------------------------------------------------------------------
// layout helpers
// ---------------------------------------------------------------------------

/// [N,C,H,W] -> [N, H*W, C]
template <typename T>
Tensor<T> map_to_tokens(const Tensor<T>& x) {
    check(x.rank() == 4, "map_to_tokens: expected [N,C,H,W]");
    return reshape(permute(x, {0, 2, 3, 1}), {x.dim(0), x.dim(2) * x.dim(3), x.dim(1)});
}

/// [N, H*W, C] -> [N,C,H,W]
template <typename T>
Tensor<T> tokens_to_map(const Tensor<T>& t, int64_t h, int64_t w) {
    check(t.rank() == 3 && t.dim(1) == h * w, "tokens_to_map: bad token count");
    return permute(reshape(t, {t.dim(0), h, w, t.dim(2)}), {0, 3, 1, 2});
}

/// [C,D,H,W] -> [1, D*H*W, C]
template <typename T>
Tensor<T> vol_to_tokens(const Tensor<T>& x) {
    check(x.rank() == 4, "vol_to_tokens: expected [C,D,H,W]");
    return reshape(permute(x, {1, 2, 3, 0}), {1, x.dim(1) * x.dim(2) * x.dim(3), x.dim(0)});
}

/// [1, D*H*W, C] -> [C,D,H,W]
template <typename T>
Tensor<T> tokens_to_vol(const Tensor<T>& t, int64_t d, int64_t h, int64_t w) {
    check(t.rank() == 3 && t.dim(0) == 1 && t.dim(1) == d * h * w,
          "tokens_to_vol: bad token count");
    return permute(reshape(t, {d, h, w, t.dim(2)}), {3, 0, 1, 2});
}

// ---------------------------------------------------------------------------
// scaled dot-product attention core
// ---------------------------------------------------------------------------

/// Multi-head scaled dot-product attention on projected tensors.
/// q: [B,L_q,C], k/v: [B,L_kv,C]. `mask` (optional, [M,L_q,L_kv], M dividing B)
/// is added to the scores before softmax; batch b uses mask row b % M.
/// Returns merged heads [B,L_q,C] (callers apply the output projection).
template <typename T>
Tensor<T> attention_core(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                         int64_t heads, const Tensor<T>* mask = nullptr,
                         AttnProbe<T>* probe = nullptr) {
    check(q.rank() == 3 && k.rank() == 3 && v.rank() == 3, "attention: inputs must be [B,L,C]");
    const int64_t b = q.dim(0), lq = q.dim(1), c = q.dim(2), lkv = k.dim(1);
    check(k.dim(0) == b && v.dim(0) == b, "attention: batch mismatch");
    check(k.dim(2) == c && v.dim(2) == c, "attention: channel mismatch");
    check(v.dim(1) == lkv, "attention: key/value length mismatch");
    check(heads >= 1 && c % heads == 0, "attention: channels not divisible by heads");
    const int64_t dh = c / heads;

    auto split = [&](const Tensor<T>& t, int64_t l) {
        return reshape(permute(reshape(t, {b, l, heads, dh}), {0, 2, 1, 3}), {b * heads, l, dh});
    };
    Tensor<T> qh = split(q, lq), kh = split(k, lkv), vh = split(v, lkv);

    Tensor<T> scores;
    {
        flops::Tag tg("attn_qk");
        scores = bmm_nt(qh, kh);
    }
    scores = mul_scalar(scores, static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh))));

    if (mask != nullptr && mask->defined()) {
        check(mask->rank() == 3 && mask->dim(1) == lq && mask->dim(2) == lkv &&
                  b % mask->dim(0) == 0,
              "attention: mask shape " + shape_str(mask->shape()) + " incompatible with scores");
        const int64_t m = mask->dim(0);
        std::vector<T> expanded(static_cast<size_t>(b * heads * lq * lkv));
        const auto& md = mask->data();
        for (int64_t i = 0; i < b * heads; ++i) {
            const int64_t row = (i / heads) % m;
            std::copy(md.begin() + row * lq * lkv, md.begin() + (row + 1) * lq * lkv,
                      expanded.begin() + i * lq * lkv);
        }
        scores = add(scores, Tensor<T>::from_data(std::move(expanded), {b * heads, lq, lkv}));
    }

    Tensor<T> attn = softmax_lastdim(scores);
    if (probe != nullptr) probe->probs = attn;

    Tensor<T> ctx;
    {
        flops::Tag tg("attn_av");
        ctx = bmm(attn, vh);
    }
    return reshape(permute(reshape(ctx, {b, heads, lq, dh}), {0, 2, 1, 3}), {b, lq, c});
}

/// Multi-head attention module with Q/K/V/output projections.
/// Self-attention when q_src == kv_src, cross-attention otherwise.
template <typename T>
class Msa {
  public:
    Msa() = default;
    Msa(ParamStore<T>& ps, const std::string& prefix, MsaConfig cfg, Rng& rng) : cfg_(cfg) {
        check(cfg.dim >= 1 && cfg.heads >= 1 && cfg.dim % cfg.heads == 0,
              "Msa: dim must divide heads");
        wq_ = Linear<T>(ps, prefix + ".wq", cfg.dim, cfg.dim, rng, cfg.qkv_bias);
        wk_ = Linear<T>(ps, prefix + ".wk", cfg.dim, cfg.dim, rng, cfg.qkv_bias);
        wv_ = Linear<T>(ps, prefix + ".wv", cfg.dim, cfg.dim, rng, cfg.qkv_bias);
        wo_ = Linear<T>(ps, prefix + ".wo", cfg.dim, cfg.dim, rng, true);
    }

    /// q_src: [B,L_q,C] or [L_q,C]; kv_src likewise.
    Tensor<T> operator()(const Tensor<T>& q_src, const Tensor<T>& kv_src,
                         const Tensor<T>* mask = nullptr, AttnProbe<T>* probe = nullptr) const {
        const bool flat = q_src.rank() == 2;
        check(q_src.rank() == kv_src.rank(), "Msa: query/kv rank mismatch");
        Tensor<T> q = flat ? reshape(q_src, {1, q_src.dim(0), q_src.dim(1)}) : q_src;
        Tensor<T> kv = flat ? reshape(kv_src, {1, kv_src.dim(0), kv_src.dim(1)}) : kv_src;
        check(q.dim(2) == cfg_.dim && kv.dim(2) == cfg_.dim, "Msa: channel mismatch with config");
        Tensor<T> out =
            wo_(attention_core(wq_(q), wk_(kv), wv_(kv), cfg_.heads, mask, probe));
        return flat ? reshape(out, {out.dim(1), out.dim(2)}) : out;
    }

    const MsaConfig& config() const { return cfg_; }
    Linear<T>& proj_q() { return wq_; }
    Linear<T>& proj_k() { return wk_; }
    Linear<T>& proj_v() { return wv_; }
    Linear<T>& proj_out() { return wo_; }

  private:
    MsaConfig cfg_;
    Linear<T> wq_, wk_, wv_, wo_;
};

// ---------------------------------------------------------------------------
// 3D window partitioning
// ---------------------------------------------------------------------------

/// [D,H,W,C] with extents divisible by `win` -> [num_windows, w0*w1*w2, C].
/// Windows are ordered row-major over (D,H,W) blocks; tokens row-major
/// within a window.
template <typename T>
Tensor<T> window_partition3d(const Tensor<T>& x, std::array<int64_t, 3> win) {
    check(x.rank() == 4, "window_partition3d: expected [D,H,W,C]");
    const int64_t d = x.dim(0), h = x.dim(1), w = x.dim(2), c = x.dim(3);
    check(win[0] >= 1 && win[1] >= 1 && win[2] >= 1 && d % win[0] == 0 && h % win[1] == 0 &&
              w % win[2] == 0,
          "window_partition3d: extents " + shape_str({d, h, w}) + " not divisible by window");
    const int64_t nd = d / win[0], nh = h / win[1], nw = w / win[2];
    auto t = reshape(x, {nd, win[0], nh, win[1], nw, win[2], c});
    t = permute(t, {0, 2, 4, 1, 3, 5, 6});
    return reshape(t, {nd * nh * nw, win[0] * win[1] * win[2], c});
}

/// Inverse of window_partition3d.
template <typename T>
Tensor<T> window_reverse3d(const Tensor<T>& wins, std::array<int64_t, 3> win,
                           std::array<int64_t, 3> spatial) {
    const int64_t d = spatial[0], h = spatial[1], w = spatial[2];
    const int64_t nd = d / win[0], nh = h / win[1], nw = w / win[2];
    check(wins.rank() == 3 && wins.dim(0) == nd * nh * nw &&
              wins.dim(1) == win[0] * win[1] * win[2],
          "window_reverse3d: window tensor inconsistent with target shape");
    auto t = reshape(wins, {nd, nh, nw, win[0], win[1], win[2], wins.dim(2)});
    t = permute(t, {0, 3, 1, 4, 2, 5, 6});
    return reshape(t, {d, h, w, wins.dim(2)});
}

namespace detail {

/// Per-axis segment code of a rolled coordinate. After rolling by -s the
/// position i holds the token originally at q = (i+s) mod np. Codes 0/1/2
/// split the rolled axis at np-w and np-s: segment 0 ends on a window
/// boundary, so only the last window mixes segments 1 (tokens carried over
/// the roll without wrapping) and 2 (tokens wrapped from the start of the
/// axis). Code 3 marks right-padding (q >= n_orig). Tokens may attend only
/// within equal combined codes, which blocks exactly the pairs straddling
/// the cyclic wrap and hides padded keys from real queries.
inline int window_axis_code(int64_t i, int64_t np, int64_t n_orig, int64_t w, int64_t s) {
    const int64_t q = (i + s) % np;
    if (q >= n_orig) return 3;
    if (s == 0) return 0;
    if (i < np - w) return 0;
    if (i < np - s) return 1;
    return 2;
}

}  // namespace detail

/// Additive attention mask for shifted/padded 3D windows:
/// [num_windows, L, L] with 0 for allowed pairs and -1e30 for blocked ones.
/// Returns an undefined tensor when no mask is needed (no shift, no pad),
/// so the unmasked code path stays bit-identical.
template <typename T>
Tensor<T> make_window_mask(std::array<int64_t, 3> padded, std::array<int64_t, 3> orig,
                           std::array<int64_t, 3> win, std::array<int64_t, 3> shift) {
    bool trivial = true;
    for (int a = 0; a < 3; ++a) {
        check(shift[a] >= 0 && shift[a] < win[a], "make_window_mask: shift must be in [0, win)");
        check(padded[a] % win[a] == 0 && padded[a] >= orig[a],
              "make_window_mask: padded extent must be a window multiple >= original");
        if (shift[a] != 0 || padded[a] != orig[a]) trivial = false;
    }
    if (trivial) return Tensor<T>();

    const int64_t nd = padded[0] / win[0], nh = padded[1] / win[1], nw = padded[2] / win[2];
    const int64_t n_win = nd * nh * nw;
    const int64_t l = win[0] * win[1] * win[2];

    // combined segment id per position, gathered per window in token order
    std::vector<int> ids(static_cast<size_t>(n_win * l));
    std::vector<int> code_d(static_cast<size_t>(padded[0])), code_h(static_cast<size_t>(padded[1])),
        code_w(static_cast<size_t>(padded[2]));
    for (int64_t i = 0; i < padded[0]; ++i)
        code_d[static_cast<size_t>(i)] =
            detail::window_axis_code(i, padded[0], orig[0], win[0], shift[0]);
    for (int64_t i = 0; i < padded[1]; ++i)
        code_h[static_cast<size_t>(i)] =
            detail::window_axis_code(i, padded[1], orig[1], win[1], shift[1]);
    for (int64_t i = 0; i < padded[2]; ++i)
        code_w[static_cast<size_t>(i)] =
            detail::window_axis_code(i, padded[2], orig[2], win[2], shift[2]);
    for (int64_t d = 0; d < padded[0]; ++d)
        for (int64_t h = 0; h < padded[1]; ++h)
            for (int64_t w = 0; w < padded[2]; ++w) {
                const int64_t widx = ((d / win[0]) * nh + h / win[1]) * nw + w / win[2];
                const int64_t tidx =
                    ((d % win[0]) * win[1] + h % win[1]) * win[2] + w % win[2];
                ids[static_cast<size_t>(widx * l + tidx)] =
                    (code_d[static_cast<size_t>(d)] * 4 + code_h[static_cast<size_t>(h)]) * 4 +
                    code_w[static_cast<size_t>(w)];
            }

    std::vector<T> mask(static_cast<size_t>(n_win * l * l), T(0));
    for (int64_t wi = 0; wi < n_win; ++wi) {
        const int* wid = ids.data() + wi * l;
        T* m = mask.data() + wi * l * l;
        for (int64_t i = 0; i < l; ++i)
            for (int64_t j = 0; j < l; ++j)
                if (wid[i] != wid[j]) m[i * l + j] = T(-1e30);
    }
    return Tensor<T>::from_data(std::move(mask), {n_win, l, l});
}

// ---------------------------------------------------------------------------
// attention variants
// ---------------------------------------------------------------------------

/// Global-reduction attention over 2D feature maps: queries keep full
/// resolution, keys/values come from an r-times strided-conv reduction.
/// A depthwise 3x3 convolution branch runs in parallel and is summed into
/// the attention output (after the output projection, before the caller's
/// residual). Input/output: [N,C,H,W].
template <typename T>
class GrMsa2d {
  public:
    GrMsa2d() = default;
    GrMsa2d(ParamStore<T>& ps, const std::string& prefix, int64_t dim, int64_t heads, int64_t r,
            Rng& rng)
        : r_(r) {
        check(r >= 1, "GrMsa2d: reduction ratio must be >= 1");
        reduce_ = Conv2d<T>(ps, prefix + ".reduce", dim, dim, {r, r}, {r, r}, {0, 0}, rng);
        dw_ = Conv2d<T>(ps, prefix + ".dw", dim, dim, {3, 3}, {1, 1}, {1, 1}, rng, dim);
        attn_ = Msa<T>(ps, prefix + ".attn", MsaConfig{dim, heads, true}, rng);
    }

    Tensor<T> operator()(const Tensor<T>& f, AttnProbe<T>* probe = nullptr) const {
        check(f.rank() == 4, "GrMsa2d: expected [N,C,H,W]");
        const int64_t h = f.dim(2), w = f.dim(3);
        const int64_t ph = (r_ - h % r_) % r_, pw = (r_ - w % r_) % r_;
        Tensor<T> fp = pad_right(f, {0, 0, ph, pw});
        Tensor<T> kv = map_to_tokens(reduce_(fp));
        Tensor<T> at = attn_(map_to_tokens(f), kv, nullptr, probe);
        Tensor<T> out = add(at, map_to_tokens(dw_(f)));
        return tokens_to_map(out, h, w);
    }

    Msa<T>& attention() { return attn_; }
    Conv2d<T>& reduction() { return reduce_; }
    Conv2d<T>& depthwise() { return dw_; }
    int64_t ratio() const { return r_; }

  private:
    int64_t r_ = 1;
    Conv2d<T> reduce_, dw_;
    Msa<T> attn_;
};

/// Local 3D window attention with optional cyclic shift and a
/// parallel depthwise 3x3x3 convolution branch. Input/output: [C,D,H,W].
template <typename T>
class WindowMsa3d {
  public:
    WindowMsa3d() = default;
    WindowMsa3d(ParamStore<T>& ps, const std::string& prefix, int64_t dim, int64_t heads,
                std::array<int64_t, 3> window, std::array<int64_t, 3> shift, Rng& rng)
        : window_(window), shift_(shift) {
        for (int a = 0; a < 3; ++a)
            check(window[a] >= 1 && shift[a] >= 0 && shift[a] < window[a],
                  "WindowMsa3d: need 0 <= shift < window");
        attn_ = Msa<T>(ps, prefix + ".attn", MsaConfig{dim, heads, true}, rng);
        dw_ = Conv3d<T>(ps, prefix + ".dw", dim, dim, {3, 3, 3}, {1, 1, 1}, {1, 1, 1}, rng, dim);
    }

    Tensor<T> operator()(const Tensor<T>& f, AttnProbe<T>* probe = nullptr) const {
        check(f.rank() == 4, "WindowMsa3d: expected [C,D,H,W]");
        const std::array<int64_t, 3> orig{f.dim(1), f.dim(2), f.dim(3)};
        std::array<int64_t, 3> padded{}, eff_shift{};
        for (int a = 0; a < 3; ++a) {
            padded[a] = (orig[a] + window_[a] - 1) / window_[a] * window_[a];
            // a single window along an axis leaves nothing to shift across
            eff_shift[a] = padded[a] > window_[a] ? shift_[a] : 0;
        }

        Tensor<T> x = permute(f, {1, 2, 3, 0});  // [D,H,W,C]
        x = pad_right(x, {padded[0] - orig[0], padded[1] - orig[1], padded[2] - orig[2], 0});
        x = roll(x, {-eff_shift[0], -eff_shift[1], -eff_shift[2], 0});
        Tensor<T> wins = window_partition3d(x, window_);
        Tensor<T> mask = make_window_mask<T>(padded, orig, window_, eff_shift);
        Tensor<T> at = attn_(wins, wins, mask.defined() ? &mask : nullptr, probe);
        Tensor<T> y = window_reverse3d(at, window_, padded);
        y = roll(y, {eff_shift[0], eff_shift[1], eff_shift[2], 0});
        y = crop_to(y, {orig[0], orig[1], orig[2], f.dim(0)});
        y = permute(y, {3, 0, 1, 2});

        Tensor<T> dwb = reshape(f, {1, f.dim(0), orig[0], orig[1], orig[2]});
        dwb = reshape(dw_(dwb), f.shape());
        return add(y, dwb);
    }

    Msa<T>& attention() { return attn_; }
    Conv3d<T>& depthwise() { return dw_; }
    const std::array<int64_t, 3>& window() const { return window_; }
    const std::array<int64_t, 3>& shift() const { return shift_; }

  private:
    std::array<int64_t, 3> window_{1, 1, 1}, shift_{0, 0, 0};
    Msa<T> attn_;
    Conv3d<T> dw_;
};

/// Region-confined two-stream cross-attention: both streams are cut into
/// regions; within each region, cross-attention with queries from q_stream
/// and keys/values from kv_stream. Input/output: [C,D,H,W].
template <typename T>
class Lmf {
  public:
    Lmf() = default;
    Lmf(ParamStore<T>& ps, const std::string& prefix, int64_t dim, int64_t heads,
        std::array<int64_t, 3> region, Rng& rng)
        : region_(region) {
        for (int a = 0; a < 3; ++a) check(region[a] >= 1, "Lmf: region extents must be positive");
        attn_ = Msa<T>(ps, prefix + ".attn", MsaConfig{dim, heads, true}, rng);
    }

    Tensor<T> operator()(const Tensor<T>& q_stream, const Tensor<T>& kv_stream,
                         AttnProbe<T>* probe = nullptr) const {
        check(q_stream.rank() == 4 && q_stream.shape() == kv_stream.shape(),
              "Lmf: streams must share shape [C,D,H,W]");
        const std::array<int64_t, 3> orig{q_stream.dim(1), q_stream.dim(2), q_stream.dim(3)};
        std::array<int64_t, 3> padded{};
        for (int a = 0; a < 3; ++a)
            padded[a] = (orig[a] + region_[a] - 1) / region_[a] * region_[a];
        const std::vector<int64_t> pad{padded[0] - orig[0], padded[1] - orig[1],
                                       padded[2] - orig[2], 0};

        Tensor<T> q = pad_right(permute(q_stream, {1, 2, 3, 0}), pad);
        Tensor<T> kv = pad_right(permute(kv_stream, {1, 2, 3, 0}), pad);
        Tensor<T> qw = window_partition3d(q, region_);
        Tensor<T> kvw = window_partition3d(kv, region_);
        Tensor<T> mask = make_window_mask<T>(padded, orig, region_, {0, 0, 0});
        Tensor<T> at = attn_(qw, kvw, mask.defined() ? &mask : nullptr, probe);
        Tensor<T> y = window_reverse3d(at, region_, padded);
        y = crop_to(y, {orig[0], orig[1], orig[2], q_stream.dim(0)});
        return permute(y, {3, 0, 1, 2});
    }

    Msa<T>& attention() { return attn_; }
    const std::array<int64_t, 3>& region() const { return region_; }

  private:
    std::array<int64_t, 3> region_{1, 1, 1};
    Msa<T> attn_;
};

/// Reduced global cross-attention: keys/values come from an
/// r^3 strided-conv spatial reduction of kv_stream. Input/output: [C,D,H,W].
template <typename T>
class Gmf {
  public:
    Gmf() = default;
    Gmf(ParamStore<T>& ps, const std::string& prefix, int64_t dim, int64_t heads, int64_t r,
        Rng& rng)
        : r_(r) {
        check(r >= 1, "Gmf: reduction ratio must be >= 1");
        sr_ = Conv3d<T>(ps, prefix + ".sr", dim, dim, {r, r, r}, {r, r, r}, {0, 0, 0}, rng);
        attn_ = Msa<T>(ps, prefix + ".attn", MsaConfig{dim, heads, true}, rng);
    }

    Tensor<T> operator()(const Tensor<T>& q_stream, const Tensor<T>& kv_stream,
                         AttnProbe<T>* probe = nullptr) const {
        check(q_stream.rank() == 4 && q_stream.shape() == kv_stream.shape(),
              "Gmf: streams must share shape [C,D,H,W]");
        const int64_t c = q_stream.dim(0), d = q_stream.dim(1), h = q_stream.dim(2),
                      w = q_stream.dim(3);
        const int64_t pd = (r_ - d % r_) % r_, ph = (r_ - h % r_) % r_, pw = (r_ - w % r_) % r_;
        Tensor<T> kv = reshape(pad_right(kv_stream, {0, pd, ph, pw}),
                               {1, c, d + pd, h + ph, w + pw});
        kv = sr_(kv);
        Tensor<T> kv_t =
            reshape(permute(kv, {0, 2, 3, 4, 1}), {1, kv.dim(2) * kv.dim(3) * kv.dim(4), c});
        Tensor<T> at = attn_(vol_to_tokens(q_stream), kv_t, nullptr, probe);
        return tokens_to_vol(at, d, h, w);
    }

    Msa<T>& attention() { return attn_; }
    Conv3d<T>& reduction() { return sr_; }
    int64_t ratio() const { return r_; }

  private:
    int64_t r_ = 1;
    Conv3d<T> sr_;
    Msa<T> attn_;
};

// ---------------------------------------------------------------------------
// Cross Position Feed Forward
// ---------------------------------------------------------------------------

/// CPFF over 2D maps [N,C,H,W]:
///   F'  = MLP1(F)                  (C -> E)
///   F'' = MLP2(gelu(F' + CP1(F'))) (E -> C)
///   out = gelu(F'' + CP2(F''))
/// CP1/CP2 are depthwise 3x3 convolutions on E and C channels respectively.
template <typename T>
class Cpff2d {
  public:
    Cpff2d() = default;
    Cpff2d(ParamStore<T>& ps, const std::string& prefix, int64_t dim, int64_t expansion, Rng& rng) {
        check(expansion >= 1, "Cpff2d: expansion must be >= 1");
        const int64_t e = dim * expansion;
        mlp1_ = Linear<T>(ps, prefix + ".mlp1", dim, e, rng);
        cp1_ = Conv2d<T>(ps, prefix + ".cp1", e, e, {3, 3}, {1, 1}, {1, 1}, rng, e);
        mlp2_ = Linear<T>(ps, prefix + ".mlp2", e, dim, rng);
        cp2_ = Conv2d<T>(ps, prefix + ".cp2", dim, dim, {3, 3}, {1, 1}, {1, 1}, rng, dim);
    }

    Tensor<T> operator()(const Tensor<T>& f) const {
        check(f.rank() == 4, "Cpff2d: expected [N,C,H,W]");
        const int64_t h = f.dim(2), w = f.dim(3);
        Tensor<T> f1 = tokens_to_map(mlp1_(map_to_tokens(f)), h, w);
        Tensor<T> a = gelu(add(f1, cp1_(f1)));
        Tensor<T> f2 = tokens_to_map(mlp2_(map_to_tokens(a)), h, w);
        return gelu(add(f2, cp2_(f2)));
    }

  private:
    Linear<T> mlp1_, mlp2_;
    Conv2d<T> cp1_, cp2_;
};

/// CPFF over 3D volumes [C,D,H,W]; CP1/CP2 are depthwise 3x3x3 convolutions.
template <typename T>
class Cpff3d {
  public:
    Cpff3d() = default;
    Cpff3d(ParamStore<T>& ps, const std::string& prefix, int64_t dim, int64_t expansion, Rng& rng) {
        check(expansion >= 1, "Cpff3d: expansion must be >= 1");
        const int64_t e = dim * expansion;
        mlp1_ = Linear<T>(ps, prefix + ".mlp1", dim, e, rng);
        cp1_ = Conv3d<T>(ps, prefix + ".cp1", e, e, {3, 3, 3}, {1, 1, 1}, {1, 1, 1}, rng, e);
        mlp2_ = Linear<T>(ps, prefix + ".mlp2", e, dim, rng);
        cp2_ = Conv3d<T>(ps, prefix + ".cp2", dim, dim, {3, 3, 3}, {1, 1, 1}, {1, 1, 1}, rng, dim);
    }

    Tensor<T> operator()(const Tensor<T>& f) const {
        check(f.rank() == 4, "Cpff3d: expected [C,D,H,W]");
        const int64_t d = f.dim(1), h = f.dim(2), w = f.dim(3);
        auto conv = [&](const Conv3d<T>& cp, const Tensor<T>& t) {
            return reshape(cp(reshape(t, {1, t.dim(0), d, h, w})), t.shape());
        };
        Tensor<T> f1 = tokens_to_vol(mlp1_(vol_to_tokens(f)), d, h, w);
        Tensor<T> a = gelu(add(f1, conv(cp1_, f1)));
        Tensor<T> f2 = tokens_to_vol(mlp2_(vol_to_tokens(a)), d, h, w);
        return gelu(add(f2, conv(cp2_, f2)));
    }

  private:
    Linear<T> mlp1_, mlp2_;
    Conv3d<T> cp1_, cp2_;
};

}  // namespace volseg
