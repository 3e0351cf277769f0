#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <string>
#include <vector>

#include "volseg/checkpoint.hpp"
#include "volseg/loss.hpp"
#include "volseg/model.hpp"
#include "volseg/phantom.hpp"

namespace volseg {

struct TrainSettings {
    int64_t epochs = 40;
    double base_lr = 0.01;
    double momentum = 0.9;
    double poly_power = 0.9;
    uint64_t seed = 0;
    std::vector<double> ds_weights{1.0, 0.5, 0.25, 0.125};
    bool augment = true;
    double aug_noise_sigma = 0.02;
};

inline TrainSettings train_settings_from_config(const Config& cfg) {
    TrainSettings ts;
    ts.epochs = cfg.get_int("epochs", ts.epochs);
    ts.base_lr = cfg.get_double("base_lr", ts.base_lr);
    ts.momentum = cfg.get_double("momentum", ts.momentum);
    ts.poly_power = cfg.get_double("poly_power", ts.poly_power);
    ts.seed = static_cast<uint64_t>(cfg.get_int("seed", 0));
    ts.ds_weights = cfg.get_double_list("ds_weights", ts.ds_weights);
    check<ConfigError>(ts.ds_weights.size() == 4,
                       "config: key 'ds_weights' needs exactly 4 comma-separated values");
    ts.augment = cfg.get_bool("augment", ts.augment);
    ts.aug_noise_sigma = cfg.get_double("aug_noise_sigma", ts.aug_noise_sigma);
    check<ConfigError>(ts.epochs >= 1, "config: 'epochs' must be at least 1");
    check<ConfigError>(ts.base_lr > 0.0, "config: 'base_lr' must be positive");
    return ts;
}

// ---------------------------------------------------------------------------
// datasets
// ---------------------------------------------------------------------------

struct DatasetCase {
    std::string case_id;
    LabeledVolume vol;
};

using Dataset = std::vector<DatasetCase>;

/// Loads every manifest entry of one split; relative paths are resolved
/// against `base_dir` (typically the manifest's directory).
inline Dataset load_dataset(const std::vector<ManifestEntry>& entries, const std::string& split,
                            const std::string& base_dir) {
    Dataset ds;
    for (const auto& e : entries) {
        if (e.split != split) continue;
        std::filesystem::path p(e.path);
        if (p.is_relative()) p = std::filesystem::path(base_dir) / p;
        ds.push_back({e.case_id, load_hvol(p.string())});
    }
    return ds;
}

/// Normalised [1, D, H, W] input tensor for one volume.
inline Tensor<float> volume_tensor(const LabeledVolume& vol) {
    std::vector<float> data = vol.intensity;
    normalize_volume(data);
    return Tensor<float>::from_data(std::move(data), {1, vol.d, vol.h, vol.w});
}

// ---------------------------------------------------------------------------
// evaluation
// ---------------------------------------------------------------------------

struct CaseScore {
    std::string case_id;
    DscResult dsc;
};

struct EvalSummary {
    std::vector<CaseScore> cases;
    double mean_fg = 0.0; // mean over cases of the per-case foreground mean
};

/// Scores hard predictions against ground truth for every case.  With
/// `two_d_only` the 2D branch's full-resolution output is used instead of
/// the hybrid output (same trained weights, no 3D refinement).
inline EvalSummary evaluate_cases(const HybridModel<float>& model, const Dataset& ds,
                                  bool two_d_only = false) {
    EvalSummary summary;
    for (const auto& c : ds) {
        Tensor<float> x = volume_tensor(c.vol);
        std::vector<uint8_t> pred = two_d_only ? model.infer_2d(x) : model.infer(x);
        summary.cases.push_back({c.case_id, dsc_metric(pred, c.vol.labels, c.vol.num_classes)});
        summary.mean_fg += summary.cases.back().dsc.mean_fg;
    }
    if (!summary.cases.empty()) summary.mean_fg /= static_cast<double>(summary.cases.size());
    return summary;
}

/// Writes an evaluation as CSV: one row per case with per-foreground-class
/// and mean scores, plus a trailing mean row over cases.
inline void save_eval_csv(const std::string& path, const EvalSummary& summary,
                          int64_t num_classes) {
    std::ofstream os(path);
    check<FormatError>(static_cast<bool>(os), "save_eval_csv: cannot open " + path);
    os << "case_id";
    for (int64_t c = 1; c < num_classes; ++c) os << ",dsc_class_" << c;
    os << ",mean_dsc\n";
    char buf[64];
    std::vector<double> col_sum(static_cast<size_t>(num_classes), 0.0);
    for (const auto& cs : summary.cases) {
        os << cs.case_id;
        for (int64_t c = 1; c < num_classes; ++c) {
            std::snprintf(buf, sizeof(buf), ",%.6f", cs.dsc.per_class[static_cast<size_t>(c)]);
            os << buf;
            col_sum[static_cast<size_t>(c)] += cs.dsc.per_class[static_cast<size_t>(c)];
        }
        std::snprintf(buf, sizeof(buf), ",%.6f\n", cs.dsc.mean_fg);
        os << buf;
    }
    if (!summary.cases.empty()) {
        os << "mean";
        const double n = static_cast<double>(summary.cases.size());
        for (int64_t c = 1; c < num_classes; ++c) {
            std::snprintf(buf, sizeof(buf), ",%.6f", col_sum[static_cast<size_t>(c)] / n);
            os << buf;
        }
        std::snprintf(buf, sizeof(buf), ",%.6f\n", summary.mean_fg);
        os << buf;
    }
    check<FormatError>(static_cast<bool>(os), "save_eval_csv: write failed");
}

// ---------------------------------------------------------------------------
// training loop
// ---------------------------------------------------------------------------

struct EpochRow {
    int64_t epoch = 0;
    double lr = 0.0;
    double train_loss = 0.0;
    double val_mean_dsc = 0.0;
};

/// Deterministic full-volume training driver.
///
/// Reproducibility contract: all per-epoch randomness (shuffling,
/// augmentation) comes from streams derived statelessly from
/// (seed, epoch, case), so two runs with identical inputs produce
/// byte-identical metrics and checkpoints, and a resumed run continues
/// exactly where the interrupted one would have been — the checkpoint only
/// needs parameters, momentum, the next epoch index, and the best score.
class Trainer {
  public:
    Trainer(HybridModel<float>& model, const TrainSettings& ts)
        : model_(&model), ts_(ts), opt_(model.params(), ts.momentum) {}

    /// Runs (or resumes) training, writing `metrics.csv`, `ckpt_last.hrfm`,
    /// and `ckpt_best.hrfm` into `out_dir`.  Returns the rows produced by
    /// this invocation.  `stop_after` (when >= 0) interrupts the run once
    /// that many epochs of the schedule are complete — the LR schedule still
    /// targets the full horizon, so a later resume continues seamlessly.
    /// `on_epoch` (when set) is invoked after every completed epoch.
    std::vector<EpochRow> fit(const Dataset& train, const Dataset& val,
                              const std::string& out_dir, bool resume = false,
                              int64_t stop_after = -1,
                              const std::function<void(const EpochRow&)>& on_epoch = {}) {
        check<ValueError>(!train.empty(), "Trainer: empty training set");
        namespace fs = std::filesystem;
        fs::create_directories(out_dir);
        const std::string metrics_path = (fs::path(out_dir) / "metrics.csv").string();
        const std::string last_path = (fs::path(out_dir) / "ckpt_last.hrfm").string();
        const std::string best_path = (fs::path(out_dir) / "ckpt_best.hrfm").string();

        TrainProgress prog;
        std::ofstream metrics;
        if (resume) {
            load_checkpoint(last_path, model_->params(), &opt_, &prog);
            check<ValueError>(fs::exists(metrics_path),
                              "Trainer: resume requested but no metrics.csv in " + out_dir);
            metrics.open(metrics_path, std::ios::app);
        } else {
            metrics.open(metrics_path, std::ios::trunc);
            metrics << "epoch,lr,train_loss,val_mean_dsc\n";
        }
        check<FormatError>(static_cast<bool>(metrics), "Trainer: cannot write " + metrics_path);

        std::vector<EpochRow> rows;
        const int64_t stop = stop_after < 0 ? ts_.epochs : std::min(stop_after, ts_.epochs);
        for (int64_t epoch = prog.next_epoch; epoch < stop; ++epoch) {
            const double lr = poly_lr(ts_.base_lr, epoch, ts_.epochs, ts_.poly_power);
            std::vector<size_t> order = epoch_order(train.size(), epoch);
            double loss_sum = 0.0;
            for (size_t b = 0; b < order.size(); ++b) {
                const size_t idx = order[b];
                LabeledVolume ex = train[idx].vol;
                if (ts_.augment) {
                    Rng arng = Rng::stream(ts_.seed, 0x200000000ull + static_cast<uint64_t>(epoch),
                                           static_cast<uint64_t>(idx));
                    augment_volume(ex, arng, ts_.aug_noise_sigma);
                }
                Tensor<float> x = volume_tensor(ex);
                PredictionPyramid<float> pyr = model_->forward(x);
                LossReport<float> rep = deep_supervised_loss(
                    pyr.p2d, pyr.p3d_res, ex.labels, {ex.d, ex.h, ex.w}, ts_.ds_weights);
                const double loss = static_cast<double>(rep.total.item());
                check<ValueError>(std::isfinite(loss),
                                  "training diverged: non-finite loss at epoch " +
                                      std::to_string(epoch) + ", batch " + std::to_string(b) +
                                      " (lr " + std::to_string(lr) + ")");
                model_->params().zero_grad();
                backward(rep.total);
                opt_.step(lr);
                loss_sum += loss;
            }
            EpochRow row;
            row.epoch = epoch;
            row.lr = lr;
            row.train_loss = loss_sum / static_cast<double>(order.size());
            row.val_mean_dsc = val.empty() ? 0.0 : evaluate_cases(*model_, val).mean_fg;
            rows.push_back(row);

            char buf[160];
            std::snprintf(buf, sizeof(buf), "%lld,%.12g,%.12g,%.12g\n",
                          static_cast<long long>(row.epoch), row.lr, row.train_loss,
                          row.val_mean_dsc);
            metrics << buf;
            metrics.flush();

            prog.next_epoch = static_cast<uint32_t>(epoch + 1);
            if (row.val_mean_dsc > prog.best_val) {
                prog.best_val = row.val_mean_dsc;
                save_checkpoint(best_path, model_->params(), &opt_, prog);
            }
            save_checkpoint(last_path, model_->params(), &opt_, prog);
            if (on_epoch) on_epoch(row);
        }
        return rows;
    }

    Sgd<float>& optimizer() { return opt_; }

  private:
    std::vector<size_t> epoch_order(size_t n, int64_t epoch) const {
        std::vector<size_t> order(n);
        for (size_t i = 0; i < n; ++i) order[i] = i;
        Rng rng = Rng::stream(ts_.seed, 0x100000000ull + static_cast<uint64_t>(epoch));
        for (size_t i = n; i > 1; --i) {
            const size_t j = static_cast<size_t>(rng.next_int(0, static_cast<int64_t>(i) - 1));
            std::swap(order[i - 1], order[j]);
        }
        return order;
    }

    HybridModel<float>* model_;
    TrainSettings ts_;
    Sgd<float> opt_;
};

} // namespace volseg
