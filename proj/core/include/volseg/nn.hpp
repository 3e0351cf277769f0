#pragma once

#include <map>
#include <string>
#include <utility>
#include <vector>

#include "volseg/ops.hpp"
#include "volseg/rng.hpp"
#include "volseg/tensor.hpp"

namespace volseg {

/// Ordered collection of named trainable leaves. Registration order is the
/// canonical parameter order used by the optimizer and the checkpoint format.
template <typename T>
class ParamStore {
  public:
    Tensor<T>& add(const std::string& name, Tensor<T> t) {
        check<ValueError>(index_.find(name) == index_.end(), "ParamStore: duplicate parameter '" + name + "'");
        t.raw()->requires_grad = true;
        index_[name] = params_.size();
        params_.emplace_back(name, std::move(t));
        return params_.back().second;
    }

    bool has(const std::string& name) const { return index_.count(name) > 0; }

    Tensor<T>& get(const std::string& name) {
        auto it = index_.find(name);
        check<ValueError>(it != index_.end(), "ParamStore: unknown parameter '" + name + "'");
        return params_[it->second].second;
    }

    const Tensor<T>& get(const std::string& name) const {
        auto it = index_.find(name);
        check<ValueError>(it != index_.end(), "ParamStore: unknown parameter '" + name + "'");
        return params_[it->second].second;
    }

    size_t size() const { return params_.size(); }
    const std::pair<std::string, Tensor<T>>& at(size_t i) const { return params_[i]; }
    std::pair<std::string, Tensor<T>>& at(size_t i) { return params_[i]; }

    int64_t total_elements() const {
        int64_t n = 0;
        for (const auto& [name, t] : params_) n += t.numel();
        return n;
    }

    void zero_grad() {
        for (auto& [name, t] : params_) t.zero_grad();
    }

    auto begin() { return params_.begin(); }
    auto end() { return params_.end(); }
    auto begin() const { return params_.begin(); }
    auto end() const { return params_.end(); }

  private:
    std::vector<std::pair<std::string, Tensor<T>>> params_;
    std::map<std::string, size_t> index_;
};

namespace init {

/// Truncated-normal weight init (sigma 0.02, clipped at two sigma).
template <typename T>
Tensor<T> weight(const Shape& shape, Rng& rng) {
    return Tensor<T>::trunc_normal(rng, shape, 0.02);
}

template <typename T>
Tensor<T> zeros(const Shape& shape) {
    return Tensor<T>::zeros(shape);
}

template <typename T>
Tensor<T> ones(const Shape& shape) {
    return Tensor<T>::ones(shape);
}

}  // namespace init

/// y = x W + b over the last axis; x: [..., in], W: [in, out], b: [out].
template <typename T>
class Linear {
  public:
    Linear() = default;
    Linear(ParamStore<T>& ps, const std::string& prefix, int64_t in, int64_t out, Rng& rng,
           bool with_bias = true)
        : in_(in), out_(out), with_bias_(with_bias) {
        w_ = ps.add(prefix + ".weight", init::weight<T>({in, out}, rng));
        if (with_bias) b_ = ps.add(prefix + ".bias", init::zeros<T>({out}));
    }

    Tensor<T> operator()(const Tensor<T>& x) const {
        check(x.rank() >= 1 && x.shape().back() == in_,
              "Linear: expected trailing extent " + std::to_string(in_) + ", got " +
                  shape_str(x.shape()));
        Shape lead(x.shape().begin(), x.shape().end() - 1);
        int64_t rows = x.numel() / in_;
        Tensor<T> y = matmul(reshape(x, {rows, in_}), w_);
        if (with_bias_) y = add_rowvec(y, b_);
        lead.push_back(out_);
        return reshape(y, lead);
    }

    const Tensor<T>& weight() const { return w_; }
    const Tensor<T>& bias() const { return b_; }
    int64_t in_features() const { return in_; }
    int64_t out_features() const { return out_; }

  private:
    int64_t in_ = 0, out_ = 0;
    bool with_bias_ = true;
    Tensor<T> w_, b_;
};

/// LayerNorm over the trailing channel axis with learnable affine.
template <typename T>
class LayerNorm {
  public:
    LayerNorm() = default;
    LayerNorm(ParamStore<T>& ps, const std::string& prefix, int64_t c, T eps = T(1e-5))
        : c_(c), eps_(eps) {
        gamma_ = ps.add(prefix + ".gamma", init::ones<T>({c}));
        beta_ = ps.add(prefix + ".beta", init::zeros<T>({c}));
    }

    Tensor<T> operator()(const Tensor<T>& x) const {
        return layer_norm_lastdim(x, gamma_, beta_, eps_);
    }

    int64_t channels() const { return c_; }

  private:
    int64_t c_ = 0;
    T eps_ = T(1e-5);
    Tensor<T> gamma_, beta_;
};

/// 2-D convolution module; x: [N,C,H,W].
template <typename T>
class Conv2d {
  public:
    Conv2d() = default;
    Conv2d(ParamStore<T>& ps, const std::string& prefix, int64_t in_ch, int64_t out_ch,
           std::array<int64_t, 2> kernel, std::array<int64_t, 2> stride, std::array<int64_t, 2> pad,
           Rng& rng, int64_t groups = 1, bool with_bias = true)
        : stride_(stride), pad_(pad), groups_(groups), with_bias_(with_bias) {
        check(in_ch % groups == 0 && out_ch % groups == 0,
              "Conv2d: channels must divide groups");
        w_ = ps.add(prefix + ".weight",
                    init::weight<T>({out_ch, in_ch / groups, kernel[0], kernel[1]}, rng));
        if (with_bias) b_ = ps.add(prefix + ".bias", init::zeros<T>({out_ch}));
    }

    Tensor<T> operator()(const Tensor<T>& x) const {
        return conv2d(x, w_, with_bias_ ? b_ : Tensor<T>(), stride_, pad_, groups_);
    }

    const Tensor<T>& weight() const { return w_; }
    const Tensor<T>& bias() const { return b_; }

  private:
    std::array<int64_t, 2> stride_{1, 1}, pad_{0, 0};
    int64_t groups_ = 1;
    bool with_bias_ = true;
    Tensor<T> w_, b_;
};

/// 3-D convolution module; x: [N,C,D,H,W].
template <typename T>
class Conv3d {
  public:
    Conv3d() = default;
    Conv3d(ParamStore<T>& ps, const std::string& prefix, int64_t in_ch, int64_t out_ch,
           std::array<int64_t, 3> kernel, std::array<int64_t, 3> stride, std::array<int64_t, 3> pad,
           Rng& rng, int64_t groups = 1, bool with_bias = true)
        : stride_(stride), pad_(pad), groups_(groups), with_bias_(with_bias) {
        check(in_ch % groups == 0 && out_ch % groups == 0,
              "Conv3d: channels must divide groups");
        w_ = ps.add(prefix + ".weight",
                    init::weight<T>({out_ch, in_ch / groups, kernel[0], kernel[1], kernel[2]}, rng));
        if (with_bias) b_ = ps.add(prefix + ".bias", init::zeros<T>({out_ch}));
    }

    Tensor<T> operator()(const Tensor<T>& x) const {
        return conv3d(x, w_, with_bias_ ? b_ : Tensor<T>(), stride_, pad_, groups_);
    }

    const Tensor<T>& weight() const { return w_; }
    const Tensor<T>& bias() const { return b_; }

  private:
    std::array<int64_t, 3> stride_{1, 1, 1}, pad_{0, 0, 0};
    int64_t groups_ = 1;
    bool with_bias_ = true;
    Tensor<T> w_, b_;
};

/// Polynomial learning-rate decay: base * (1 - epoch/max_epochs)^power.
inline double poly_lr(double base_lr, int64_t epoch, int64_t max_epochs, double power = 0.9) {
    check<ValueError>(max_epochs > 0, "poly_lr: max_epochs must be positive");
    check<ValueError>(epoch >= 0 && epoch < max_epochs,
          "poly_lr: epoch " + std::to_string(epoch) + " outside [0, " +
              std::to_string(max_epochs) + ")");
    double frac = 1.0 - static_cast<double>(epoch) / static_cast<double>(max_epochs);
    return base_lr * std::pow(frac, power);
}

/// SGD with classical momentum: v <- mu*v + g; p <- p - lr*v.
/// Stepping a parameter whose gradient was never produced is an error.
template <typename T>
class Sgd {
  public:
    explicit Sgd(ParamStore<T>& params, double momentum = 0.9)
        : params_(&params), momentum_(momentum) {
        velocity_.resize(params.size());
        for (size_t i = 0; i < params.size(); ++i)
            velocity_[i].assign(static_cast<size_t>(params.at(i).second.numel()), T(0));
    }

    void step(double lr) {
        check<ValueError>(params_->size() == velocity_.size(), "Sgd: parameter set changed after creation");
        for (size_t i = 0; i < params_->size(); ++i) {
            auto& [name, p] = params_->at(i);
            check<ValueError>(p.has_grad(), "Sgd: parameter '" + name +
                                    "' has no gradient; missing from the loss graph?");
            auto& v = velocity_[i];
            const auto& g = p.raw()->grad;
            auto& d = p.raw()->data;
            const T mu = static_cast<T>(momentum_);
            const T step_size = static_cast<T>(lr);
            for (size_t j = 0; j < v.size(); ++j) {
                v[j] = mu * v[j] + g[j];
                d[j] -= step_size * v[j];
            }
        }
    }

    void zero_grad() { params_->zero_grad(); }

    std::vector<std::vector<T>>& velocity() { return velocity_; }
    const std::vector<std::vector<T>>& velocity() const { return velocity_; }
    double momentum() const { return momentum_; }

  private:
    ParamStore<T>* params_;
    double momentum_;
    std::vector<std::vector<T>> velocity_;
};

}  // namespace volseg
