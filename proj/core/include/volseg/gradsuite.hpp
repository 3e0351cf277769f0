#pragma once

#include <string>
#include <vector>

#include "volseg/gradcheck.hpp"
#include "volseg/loss.hpp"
#include "volseg/model.hpp"

namespace volseg {

// Finite-difference validation of every differentiable building block, in
// double precision. Each entry checks d(scalar probe loss)/d(inputs and
// parameters) against central differences.

struct BlockCheck {
    std::string name;
    double max_rel_err = 0.0;
    double tol = 1e-4;
    bool passed = false;
};

namespace detail {

/// Bundles a module's parameters (plus the primary inputs) for gradcheck.
inline std::vector<std::pair<std::string, Tensor<double>>> named_inputs(
    ParamStore<double>& ps, std::vector<std::pair<std::string, Tensor<double>>> extra) {
    for (auto& [name, t] : ps) extra.emplace_back(name, t);
    return extra;
}

} // namespace detail

/// Runs the suite with module weights and probe data drawn from `seed`.
/// The end-to-end block uses the looser 1e-3 tolerance; every isolated block
/// must meet 1e-4.
inline std::vector<BlockCheck> run_gradient_suite(uint64_t seed) {
    std::vector<BlockCheck> out;
    auto record = [&](const std::string& name, const GradcheckReport& rep, double tol) {
        out.push_back({name, rep.max_rel_err, tol, rep.max_rel_err <= tol});
    };

    // --- overlapping convolutional patch embedding --------------------------
    {
        Rng rng = Rng::stream(seed, 1);
        ParamStore<double> ps;
        ConvPatchEmbed2d<double> embed(ps, "embed", 1, 2, rng);
        Tensor<double> x = Tensor<double>::randn(rng, {1, 1, 8, 8});
        Tensor<double> probe = Tensor<double>::randn(rng, {1, 2, 2, 2});
        auto fn = [&](std::vector<Tensor<double>>& in) { return sum_all(mul(embed(in[0]), probe)); };
        record("conv_patch_embed", gradcheck(fn, detail::named_inputs(ps, {{"input", x}})), 1e-4);
    }

    // --- reduced-key attention block (2D) ------------------------------------
    {
        Rng rng = Rng::stream(seed, 2);
        ParamStore<double> ps;
        GrBlock2d<double> block(ps, "blk", 2, 1, 2, 2, rng);
        Tensor<double> x = Tensor<double>::randn(rng, {1, 2, 5, 7}); // odd: exercises kv padding
        Tensor<double> probe = Tensor<double>::randn(rng, {1, 2, 5, 7});
        auto fn = [&](std::vector<Tensor<double>>& in) { return sum_all(mul(block(in[0]), probe)); };
        record("gr_block", gradcheck(fn, detail::named_inputs(ps, {{"input", x}})), 1e-4);
    }

    // --- plain + shifted 3D window attention pair ----------------------------
    {
        Rng rng = Rng::stream(seed, 3);
        ParamStore<double> ps;
        WindowBlock3d<double> plain(ps, "b0", 2, 1, {1, 2, 2}, {0, 0, 0}, 2, rng);
        WindowBlock3d<double> shifted(ps, "b1", 2, 1, {1, 2, 2}, {0, 1, 1}, 2, rng);
        Tensor<double> x = Tensor<double>::randn(rng, {2, 2, 3, 3}); // odd: pad + boundary masks
        Tensor<double> probe = Tensor<double>::randn(rng, {2, 2, 3, 3});
        auto fn = [&](std::vector<Tensor<double>>& in) {
            return sum_all(mul(shifted(plain(in[0])), probe));
        };
        record("window_pair", gradcheck(fn, detail::named_inputs(ps, {{"input", x}})), 1e-4);
    }

    // --- region-local cross-attention fusion ---------------------------------
    {
        Rng rng = Rng::stream(seed, 4);
        ParamStore<double> ps;
        Lmf<double> lmf(ps, "lmf", 2, 1, {1, 2, 2}, rng);
        Tensor<double> q = Tensor<double>::randn(rng, {2, 2, 3, 3});
        Tensor<double> kv = Tensor<double>::randn(rng, {2, 2, 3, 3});
        Tensor<double> probe = Tensor<double>::randn(rng, {2, 2, 3, 3});
        auto fn = [&](std::vector<Tensor<double>>& in) {
            return sum_all(mul(lmf(in[0], in[1]), probe));
        };
        record("local_fusion",
               gradcheck(fn, detail::named_inputs(ps, {{"q", q}, {"kv", kv}})), 1e-4);
    }

    // --- reduced global cross-attention fusion -------------------------------
    {
        Rng rng = Rng::stream(seed, 5);
        ParamStore<double> ps;
        Gmf<double> gmf(ps, "gmf", 2, 1, 2, rng);
        Tensor<double> q = Tensor<double>::randn(rng, {2, 2, 3, 3});
        Tensor<double> kv = Tensor<double>::randn(rng, {2, 2, 3, 3});
        Tensor<double> probe = Tensor<double>::randn(rng, {2, 2, 3, 3});
        auto fn = [&](std::vector<Tensor<double>>& in) {
            return sum_all(mul(gmf(in[0], in[1]), probe));
        };
        record("global_fusion",
               gradcheck(fn, detail::named_inputs(ps, {{"q", q}, {"kv", kv}})), 1e-4);
    }

    // --- convolution-augmented feed-forward ----------------------------------
    {
        Rng rng = Rng::stream(seed, 6);
        ParamStore<double> ps;
        Cpff3d<double> ff(ps, "ff", 2, 2, rng);
        Tensor<double> x = Tensor<double>::randn(rng, {2, 2, 3, 3});
        Tensor<double> probe = Tensor<double>::randn(rng, {2, 2, 3, 3});
        auto fn = [&](std::vector<Tensor<double>>& in) { return sum_all(mul(ff(in[0]), probe)); };
        record("channel_ff", gradcheck(fn, detail::named_inputs(ps, {{"input", x}})), 1e-4);
    }

    // --- mutual fusion block --------------------------------------------------
    {
        Rng rng = Rng::stream(seed, 7);
        HlgmConfig cfg;
        cfg.dim = 2;
        cfg.region = {1, 2, 2};
        cfg.reduction = 2;
        cfg.heads = 1;
        cfg.expansion = 2;
        ParamStore<double> ps;
        HlgmBlock<double> block(ps, "blk", cfg, rng);
        Tensor<double> fp = Tensor<double>::randn(rng, {2, 1, 2, 2});
        Tensor<double> fv = Tensor<double>::randn(rng, {2, 1, 2, 2});
        Tensor<double> pp = Tensor<double>::randn(rng, {2, 1, 2, 2});
        Tensor<double> pv = Tensor<double>::randn(rng, {2, 1, 2, 2});
        auto fn = [&](std::vector<Tensor<double>>& in) {
            auto [op, ov] = block(in[0], in[1]);
            return add(sum_all(mul(op, pp)), sum_all(mul(ov, pv)));
        };
        record("fusion_block",
               gradcheck(fn, detail::named_inputs(ps, {{"fp", fp}, {"fv", fv}})), 1e-4);
    }

    // --- segmentation losses ---------------------------------------------------
    {
        Rng rng = Rng::stream(seed, 8);
        Tensor<double> logits = Tensor<double>::randn(rng, {3, 2, 2, 2});
        std::vector<uint8_t> labels;
        for (int i = 0; i < 8; ++i) labels.push_back(static_cast<uint8_t>(rng.next_int(0, 2)));
        auto fn = [&](std::vector<Tensor<double>>& in) {
            return add(ce_loss(in[0], labels), dice_loss(in[0], labels));
        };
        record("losses", gradcheck(fn, {{"logits", logits}}), 1e-4);
    }

    // --- end-to-end: training loss through the whole hybrid model -------------
    {
        Rng rng = Rng::stream(seed, 9);
        ModelSettings s;
        s.in_channels = 1;
        s.num_classes = 2;
        s.b2d.expansion = 2;
        s.b2d.stages = {{{1, 2, 1, 2}, {0, 2, 1, 1}, {0, 2, 1, 1}, {0, 2, 1, 1}}};
        s.b3d.expansion = 2;
        s.b3d.window = {1, 2, 2};
        s.b3d.stages = {{{2, 2, 1}, {0, 2, 1}, {0, 2, 1}, {0, 2, 1}}};
        s.fusion.dim = 2;
        s.fusion.blocks = 1;
        s.fusion.region = {1, 2, 2};
        s.fusion.reduction = 2;
        s.fusion.heads = 1;
        s.fusion.expansion = 2;
        HybridModel<double> model(s, seed ^ 0xe2eull);
        Tensor<double> vol = Tensor<double>::randn(rng, {1, 2, 8, 8});
        std::vector<uint8_t> labels;
        for (int i = 0; i < 2 * 8 * 8; ++i)
            labels.push_back(static_cast<uint8_t>(rng.next_int(0, 1)));
        auto fn = [&](std::vector<Tensor<double>>& in) {
            PredictionPyramid<double> pyr = model.forward(in[0]);
            return deep_supervised_loss(pyr.p2d, pyr.p3d_res, labels, {2, 8, 8}).total;
        };
        record("end_to_end",
               gradcheck(fn, {{"volume", vol},
                              {"2d_weight", model.params().get("b2d.stage0.block0.attn.attn.wq.weight")},
                              {"fusion_weight", model.params().get("fusion.block0.p.lmf.attn.wq.weight")},
                              {"3d_weight", model.params().get("b3d.stage0.block1.attn.attn.wv.weight")}}),
               1e-3);
    }

    return out;
}

} // namespace volseg
