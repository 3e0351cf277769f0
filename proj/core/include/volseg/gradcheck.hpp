#pragma once

#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "volseg/tensor.hpp"

namespace volseg {

struct GradcheckReport {
    double max_rel_err = 0.0;
    std::string worst_input;
    int64_t worst_index = -1;
    double worst_analytic = 0.0;
    double worst_numeric = 0.0;
    int64_t checked = 0;

    bool pass(double tol) const { return max_rel_err <= tol; }
};

inline double grad_rel_err(double analytic, double numeric) {
    double denom = std::max({1.0, std::fabs(analytic), std::fabs(numeric)});
    return std::fabs(analytic - numeric) / denom;
}

/// Central-difference check of reverse-mode gradients.
///
/// `fn` maps the named inputs to a scalar loss and must be deterministic.
/// Every listed input is treated as a trainable leaf; gradients from one
/// backward sweep are compared element-by-element against
/// (f(x+h) - f(x-h)) / 2h. Relative error uses max(1, |a|, |n|) in the
/// denominator so tiny gradients are compared absolutely.
inline GradcheckReport gradcheck(
    const std::function<Tensor<double>(std::vector<Tensor<double>>&)>& fn,
    std::vector<std::pair<std::string, Tensor<double>>> inputs, double h = 1e-5) {
    std::vector<Tensor<double>> ts;
    ts.reserve(inputs.size());
    for (auto& [name, t] : inputs) {
        t.raw()->requires_grad = true;
        t.zero_grad();
        ts.push_back(t);
    }

    Tensor<double> loss = fn(ts);
    check(loss.numel() == 1, "gradcheck: fn must return a scalar");
    backward(loss);

    std::vector<std::vector<double>> analytic(inputs.size());
    for (size_t i = 0; i < inputs.size(); ++i) {
        check(inputs[i].second.has_grad(),
              "gradcheck: input '" + inputs[i].first + "' received no gradient");
        analytic[i] = inputs[i].second.grad();
    }

    GradcheckReport rep;
    NoGradGuard ng;
    for (size_t i = 0; i < inputs.size(); ++i) {
        auto& t = inputs[i].second;
        auto& data = t.mutable_data();
        for (size_t j = 0; j < data.size(); ++j) {
            const double orig = data[j];
            data[j] = orig + h;
            double fp = fn(ts).item();
            data[j] = orig - h;
            double fm = fn(ts).item();
            data[j] = orig;
            double numeric = (fp - fm) / (2.0 * h);
            double a = analytic[i][j];
            double err = grad_rel_err(a, numeric);
            ++rep.checked;
            if (err > rep.max_rel_err) {
                rep.max_rel_err = err;
                rep.worst_input = inputs[i].first;
                rep.worst_index = static_cast<int64_t>(j);
                rep.worst_analytic = a;
                rep.worst_numeric = numeric;
            }
        }
    }
    return rep;
}

}  // namespace volseg
