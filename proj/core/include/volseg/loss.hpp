#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "volseg/ops.hpp"

namespace volseg {

// Segmentation losses and metrics.
//
// Logits are laid out class-first: [K, spatial...] (e.g. [K, D, H, W] for a
// volume, [K, H, W] for a slice).  Labels are one uint8 class index per voxel,
// row-major over the spatial axes in the same order.

namespace detail {

/// [K, spatial...] -> [V, K] token matrix (V = product of spatial extents).
template <typename T>
Tensor<T> class_tokens(const Tensor<T>& logits) {
    check(logits.rank() >= 2, "loss: logits must be [K, spatial...]");
    std::vector<size_t> perm(logits.rank());
    for (size_t i = 0; i + 1 < perm.size(); ++i) perm[i] = i + 1;
    perm.back() = 0;
    Tensor<T> moved = permute(logits, perm);
    return reshape(moved, {logits.numel() / logits.dim(0), logits.dim(0)});
}

/// One-hot [V, K] constant built from integer labels.
template <typename T>
Tensor<T> one_hot(const std::vector<uint8_t>& labels, int64_t k) {
    std::vector<T> data(labels.size() * static_cast<size_t>(k), T(0));
    for (size_t v = 0; v < labels.size(); ++v) {
        check<ValueError>(labels[v] < k, "loss: label " + std::to_string(int(labels[v])) +
                                             " out of range for " + std::to_string(k) + " classes");
        data[v * static_cast<size_t>(k) + labels[v]] = T(1);
    }
    return Tensor<T>::from_data(std::move(data), {static_cast<int64_t>(labels.size()), k});
}

} // namespace detail

/// Mean cross-entropy over all voxels: -1/V * sum_v log softmax(logits_v)[label_v].
template <typename T>
Tensor<T> ce_loss(const Tensor<T>& logits, const std::vector<uint8_t>& labels) {
    Tensor<T> tok = detail::class_tokens(logits);
    const int64_t v = tok.dim(0), k = tok.dim(1);
    check<ValueError>(static_cast<int64_t>(labels.size()) == v,
                      "ce_loss: expected " + std::to_string(v) + " labels, got " +
                          std::to_string(labels.size()));
    Tensor<T> logp = log_softmax_lastdim(tok);
    Tensor<T> oh = detail::one_hot<T>(labels, k);
    return mul_scalar(sum_all(mul(logp, oh)), static_cast<T>(-1.0 / static_cast<double>(v)));
}

/// Soft Dice loss over softmax probabilities, averaged over foreground
/// classes only (class 0 is background):
///   1 - mean_{c>=1} (2*sum p_c*g_c + eps) / (sum p_c + sum g_c + eps).
template <typename T>
Tensor<T> dice_loss(const Tensor<T>& logits, const std::vector<uint8_t>& labels,
                    T eps = static_cast<T>(1e-5)) {
    Tensor<T> tok = detail::class_tokens(logits);
    const int64_t v = tok.dim(0), k = tok.dim(1);
    check<ValueError>(k >= 2, "dice_loss: need at least one foreground class");
    check<ValueError>(static_cast<int64_t>(labels.size()) == v,
                      "dice_loss: expected " + std::to_string(v) + " labels, got " +
                          std::to_string(labels.size()));
    Tensor<T> p = softmax_lastdim(tok);
    Tensor<T> oh = detail::one_hot<T>(labels, k);
    Tensor<T> inter = sum_axis(mul(p, oh), 0); // [K]
    Tensor<T> psum = sum_axis(p, 0);           // [K]
    Tensor<T> gsum = sum_axis(oh, 0);          // [K]
    Tensor<T> num = add_scalar(mul_scalar(inter, T(2)), eps);
    Tensor<T> den = add_scalar(add(psum, gsum), eps);
    Tensor<T> frac = div(num, den); // [K] per-class soft Dice
    std::vector<T> fgw(static_cast<size_t>(k), T(1) / static_cast<T>(k - 1));
    fgw[0] = T(0);
    Tensor<T> w = Tensor<T>::from_data(std::move(fgw), {k});
    return add_scalar(neg(sum_all(mul(frac, w))), T(1));
}

/// Nearest-neighbour downsampling of a label grid (same index rule as
/// interpolate_nearest: src = (dst * in) / out, floor).
inline std::vector<uint8_t> downsample_labels_nearest(const std::vector<uint8_t>& labels,
                                                      std::array<int64_t, 3> from,
                                                      std::array<int64_t, 3> to) {
    check<ValueError>(static_cast<int64_t>(labels.size()) == from[0] * from[1] * from[2],
                      "downsample_labels_nearest: size mismatch");
    for (int a = 0; a < 3; ++a)
        check<ValueError>(from[a] > 0 && to[a] > 0, "downsample_labels_nearest: empty extent");
    if (to == from) return labels;
    std::vector<uint8_t> out(static_cast<size_t>(to[0] * to[1] * to[2]));
    size_t idx = 0;
    for (int64_t d = 0; d < to[0]; ++d) {
        int64_t sd = d * from[0] / to[0];
        for (int64_t h = 0; h < to[1]; ++h) {
            int64_t sh = h * from[1] / to[1];
            for (int64_t w = 0; w < to[2]; ++w) {
                int64_t sw = w * from[2] / to[2];
                out[idx++] = labels[static_cast<size_t>((sd * from[1] + sh) * from[2] + sw)];
            }
        }
    }
    return out;
}

/// Per-output breakdown inside a deep-supervised loss.
struct LossComponent {
    std::string id;
    double weight = 0.0;
    double ce = 0.0;
    double dice = 0.0;
};

template <typename T>
struct LossReport {
    Tensor<T> total; // scalar, differentiable
    std::vector<LossComponent> components;
};

/// total = sum_i w_i * (CE_i + Dice_i); labels are nearest-downsampled from
/// the full grid to each output's spatial size.  Weights are used exactly as
/// given, so the total is linear in the weight vector.
template <typename T>
LossReport<T> weighted_ce_dice(const std::vector<std::pair<std::string, Tensor<T>>>& outputs,
                               const std::vector<uint8_t>& labels, std::array<int64_t, 3> full,
                               const std::vector<double>& weights) {
    check<ValueError>(!outputs.empty(), "weighted_ce_dice: no outputs");
    check<ValueError>(outputs.size() == weights.size(),
                      "weighted_ce_dice: weight count must match output count");
    LossReport<T> rep;
    for (size_t i = 0; i < outputs.size(); ++i) {
        const Tensor<T>& logit = outputs[i].second;
        check<ValueError>(logit.rank() == 4, "weighted_ce_dice: outputs must be [K, D, H, W]");
        std::vector<uint8_t> lbl = downsample_labels_nearest(
            labels, full, {logit.dim(1), logit.dim(2), logit.dim(3)});
        Tensor<T> ce = ce_loss(logit, lbl);
        Tensor<T> di = dice_loss(logit, lbl);
        Tensor<T> term = mul_scalar(add(ce, di), static_cast<T>(weights[i]));
        rep.total = rep.total.defined() ? add(rep.total, term) : term;
        rep.components.push_back({outputs[i].first, weights[i], static_cast<double>(ce.item()),
                                  static_cast<double>(di.item())});
    }
    return rep;
}

/// Deep-supervised loss over the two prediction pyramids.  Each branch gets
/// depth weights (1, 1/2, 1/4, ...) normalised to sum to one within the
/// branch; the two branch losses are added.
template <typename T>
LossReport<T> deep_supervised_loss(const std::vector<Tensor<T>>& p2d,
                                   const std::vector<Tensor<T>>& p3d_res,
                                   const std::vector<uint8_t>& labels, std::array<int64_t, 3> full,
                                   std::vector<double> branch_weights = {1.0, 0.5, 0.25, 0.125}) {
    check<ValueError>(p2d.size() == branch_weights.size() && p3d_res.size() == branch_weights.size(),
                      "deep_supervised_loss: expected one weight per pyramid level");
    double s = 0.0;
    for (double w : branch_weights) s += w;
    check<ValueError>(s > 0.0, "deep_supervised_loss: weights must not sum to zero");
    std::vector<std::pair<std::string, Tensor<T>>> outputs;
    std::vector<double> weights;
    for (size_t i = 0; i < p2d.size(); ++i) {
        outputs.emplace_back("p2d_" + std::to_string(i), p2d[i]);
        weights.push_back(branch_weights[i] / s);
    }
    for (size_t i = 0; i < p3d_res.size(); ++i) {
        outputs.emplace_back("p3d_res_" + std::to_string(i), p3d_res[i]);
        weights.push_back(branch_weights[i] / s);
    }
    return weighted_ce_dice(outputs, labels, full, weights);
}

/// Hard-label Dice similarity per class.
struct DscResult {
    std::vector<double> per_class; // size K; index 0 is background (not in mean)
    double mean_fg = 0.0;
};

/// 2|P∩G| / (|P|+|G|) per class on discrete label maps; a class absent from
/// both maps scores 1.0.  mean_fg averages classes 1..K-1.
inline DscResult dsc_metric(const std::vector<uint8_t>& pred, const std::vector<uint8_t>& truth,
                            int64_t num_classes) {
    check<ValueError>(pred.size() == truth.size(), "dsc_metric: size mismatch");
    check<ValueError>(num_classes >= 2, "dsc_metric: need at least one foreground class");
    std::vector<int64_t> np(static_cast<size_t>(num_classes), 0),
        ng(static_cast<size_t>(num_classes), 0), ni(static_cast<size_t>(num_classes), 0);
    for (size_t v = 0; v < pred.size(); ++v) {
        check<ValueError>(pred[v] < num_classes && truth[v] < num_classes,
                          "dsc_metric: label out of range");
        ++np[pred[v]];
        ++ng[truth[v]];
        if (pred[v] == truth[v]) ++ni[pred[v]];
    }
    DscResult r;
    r.per_class.resize(static_cast<size_t>(num_classes));
    double sum = 0.0;
    for (int64_t c = 0; c < num_classes; ++c) {
        int64_t denom = np[c] + ng[c];
        r.per_class[c] = denom == 0 ? 1.0 : 2.0 * static_cast<double>(ni[c]) / static_cast<double>(denom);
        if (c >= 1) sum += r.per_class[c];
    }
    r.mean_fg = sum / static_cast<double>(num_classes - 1);
    return r;
}

} // namespace volseg
