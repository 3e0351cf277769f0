#pragma once

#include <array>
#include <cmath>
#include <cstring>

#include "volseg/flops.hpp"
#include "volseg/tensor.hpp"

namespace volseg {

// ---------------------------------------------------------------------------
// elementwise
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    check(a.shape() == b.shape(),
          "add: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    std::vector<T> out(a.data());
    const auto& bd = b.data();
    for (size_t i = 0; i < out.size(); ++i) out[i] += bd[i];
    return detail::make_op_node<T>(
        a.shape(), std::move(out), {a, b}, [a, b](detail::TensorImpl<T>& self) {
            if (a.raw()->requires_grad) a.raw()->accumulate(self.grad);
            if (b.raw()->requires_grad) b.raw()->accumulate(self.grad);
        });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
    check(a.shape() == b.shape(),
          "sub: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    std::vector<T> out(a.data());
    const auto& bd = b.data();
    for (size_t i = 0; i < out.size(); ++i) out[i] -= bd[i];
    return detail::make_op_node<T>(
        a.shape(), std::move(out), {a, b}, [a, b](detail::TensorImpl<T>& self) {
            if (a.raw()->requires_grad) a.raw()->accumulate(self.grad);
            if (b.raw()->requires_grad) {
                auto* bi = b.raw();
                bi->ensure_grad();
                for (size_t i = 0; i < self.grad.size(); ++i) bi->grad[i] -= self.grad[i];
            }
        });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    check(a.shape() == b.shape(),
          "mul: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    std::vector<T> out(a.data());
    const auto& bd = b.data();
    for (size_t i = 0; i < out.size(); ++i) out[i] *= bd[i];
    return detail::make_op_node<T>(
        a.shape(), std::move(out), {a, b}, [a, b](detail::TensorImpl<T>& self) {
            if (a.raw()->requires_grad) {
                auto* ai = a.raw();
                ai->ensure_grad();
                const auto& bd2 = b.raw()->data;
                for (size_t i = 0; i < self.grad.size(); ++i) ai->grad[i] += self.grad[i] * bd2[i];
            }
            if (b.raw()->requires_grad) {
                auto* bi = b.raw();
                bi->ensure_grad();
                const auto& ad2 = a.raw()->data;
                for (size_t i = 0; i < self.grad.size(); ++i) bi->grad[i] += self.grad[i] * ad2[i];
            }
        });
}

template <typename T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) {
    check(a.shape() == b.shape(),
          "div: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    std::vector<T> out(a.data());
    const auto& bd = b.data();
    for (size_t i = 0; i < out.size(); ++i) out[i] /= bd[i];
    return detail::make_op_node<T>(
        a.shape(), std::move(out), {a, b}, [a, b](detail::TensorImpl<T>& self) {
            const auto& ad = a.raw()->data;
            const auto& bd2 = b.raw()->data;
            if (a.raw()->requires_grad) {
                auto* ai = a.raw();
                ai->ensure_grad();
                for (size_t i = 0; i < self.grad.size(); ++i) ai->grad[i] += self.grad[i] / bd2[i];
            }
            if (b.raw()->requires_grad) {
                auto* bi = b.raw();
                bi->ensure_grad();
                for (size_t i = 0; i < self.grad.size(); ++i)
                    bi->grad[i] -= self.grad[i] * ad[i] / (bd2[i] * bd2[i]);
            }
        });
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& a, T s) {
    std::vector<T> out(a.data());
    for (auto& v : out) v += s;
    return detail::make_op_node<T>(a.shape(), std::move(out), {a},
                                   [a](detail::TensorImpl<T>& self) {
                                       if (a.raw()->requires_grad) a.raw()->accumulate(self.grad);
                                   });
}

template <typename T>
Tensor<T> mul_scalar(const Tensor<T>& a, T s) {
    std::vector<T> out(a.data());
    for (auto& v : out) v *= s;
    return detail::make_op_node<T>(
        a.shape(), std::move(out), {a}, [a, s](detail::TensorImpl<T>& self) {
            if (a.raw()->requires_grad) {
                auto* ai = a.raw();
                ai->ensure_grad();
                for (size_t i = 0; i < self.grad.size(); ++i) ai->grad[i] += self.grad[i] * s;
            }
        });
}

template <typename T>
Tensor<T> neg(const Tensor<T>& a) {
    return mul_scalar(a, T(-1));
}

/// x[..., C] + v[C], broadcast over leading dims (bias add).
template <typename T>
Tensor<T> add_rowvec(const Tensor<T>& x, const Tensor<T>& v) {
    check(!x.shape().empty() && v.rank() == 1 && x.shape().back() == v.dim(0),
          "add_rowvec: incompatible shapes " + shape_str(x.shape()) + " + " +
              shape_str(v.shape()));
    const int64_t c = v.dim(0);
    const int64_t rows = x.numel() / c;
    std::vector<T> out(x.data());
    const auto& vd = v.data();
    for (int64_t r = 0; r < rows; ++r) {
        T* row = out.data() + r * c;
        for (int64_t j = 0; j < c; ++j) row[j] += vd[j];
    }
    return detail::make_op_node<T>(
        x.shape(), std::move(out), {x, v}, [x, v, rows, c](detail::TensorImpl<T>& self) {
            if (x.raw()->requires_grad) x.raw()->accumulate(self.grad);
            if (v.raw()->requires_grad) {
                auto* vi = v.raw();
                vi->ensure_grad();
                for (int64_t r = 0; r < rows; ++r) {
                    const T* row = self.grad.data() + r * c;
                    for (int64_t j = 0; j < c; ++j) vi->grad[j] += row[j];
                }
            }
        });
}

/// Tanh-approximation GELU, elementwise.
template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
    constexpr double kC = 0.7978845608028654;  // sqrt(2/pi)
    constexpr double kA = 0.044715;
    std::vector<T> out(x.data().size());
    const auto& xd = x.data();
    for (size_t i = 0; i < out.size(); ++i) {
        double v = static_cast<double>(xd[i]);
        out[i] = static_cast<T>(0.5 * v * (1.0 + std::tanh(kC * (v + kA * v * v * v))));
    }
    return detail::make_op_node<T>(
        x.shape(), std::move(out), {x}, [x](detail::TensorImpl<T>& self) {
            if (!x.raw()->requires_grad) return;
            auto* xi = x.raw();
            xi->ensure_grad();
            for (size_t i = 0; i < self.grad.size(); ++i) {
                double v = static_cast<double>(xi->data[i]);
                double u = kC * (v + kA * v * v * v);
                double t = std::tanh(u);
                double s = 1.0 - t * t;
                double d = 0.5 * (1.0 + t) + 0.5 * v * s * kC * (1.0 + 3.0 * kA * v * v);
                xi->grad[i] += self.grad[i] * static_cast<T>(d);
            }
        });
}

// ---------------------------------------------------------------------------
// shape ops
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
    check(numel_of(shape) == x.numel(),
          "reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
    std::vector<T> out(x.data());
    return detail::make_op_node<T>(std::move(shape), std::move(out), {x},
                                   [x](detail::TensorImpl<T>& self) {
                                       if (x.raw()->requires_grad) x.raw()->accumulate(self.grad);
                                   });
}

namespace detail {

/// Flat index mapping out -> in for a permutation of axes.
inline std::vector<int64_t> permute_index_map(const Shape& in_shape,
                                              const std::vector<size_t>& perm) {
    Shape out_shape(perm.size());
    for (size_t i = 0; i < perm.size(); ++i) out_shape[i] = in_shape[perm[i]];
    auto in_strides = row_major_strides(in_shape);
    auto out_strides = row_major_strides(out_shape);
    int64_t n = numel_of(out_shape);
    std::vector<int64_t> map(static_cast<size_t>(n));
    std::vector<int64_t> idx(perm.size(), 0);
    for (int64_t flat = 0; flat < n; ++flat) {
        int64_t src = 0;
        int64_t rem = flat;
        for (size_t d = 0; d < perm.size(); ++d) {
            int64_t coord = rem / out_strides[d];
            rem -= coord * out_strides[d];
            src += coord * in_strides[perm[d]];
        }
        map[static_cast<size_t>(flat)] = src;
    }
    return map;
}

}  // namespace detail

template <typename T>
Tensor<T> permute(const Tensor<T>& x, const std::vector<size_t>& perm) {
    check(perm.size() == x.rank(), "permute: axis list must cover every axis");
    Shape out_shape(perm.size());
    for (size_t i = 0; i < perm.size(); ++i) out_shape[i] = x.shape()[perm[i]];
    auto map = detail::permute_index_map(x.shape(), perm);
    std::vector<T> out(map.size());
    const auto& xd = x.data();
    for (size_t i = 0; i < map.size(); ++i) out[i] = xd[static_cast<size_t>(map[i])];
    auto map_ptr = std::make_shared<std::vector<int64_t>>(std::move(map));
    return detail::make_op_node<T>(
        std::move(out_shape), std::move(out), {x}, [x, map_ptr](detail::TensorImpl<T>& self) {
            if (!x.raw()->requires_grad) return;
            auto* xi = x.raw();
            xi->ensure_grad();
            const auto& m = *map_ptr;
            for (size_t i = 0; i < m.size(); ++i)
                xi->grad[static_cast<size_t>(m[i])] += self.grad[i];
        });
}

/// Zero-pads each axis on the high side by pad[axis].
template <typename T>
Tensor<T> pad_right(const Tensor<T>& x, const std::vector<int64_t>& pad) {
    check(pad.size() == x.rank(), "pad_right: need one pad per axis");
    Shape out_shape = x.shape();
    bool any = false;
    for (size_t i = 0; i < pad.size(); ++i) {
        check(pad[i] >= 0, "pad_right: negative pad");
        out_shape[i] += pad[i];
        any = any || pad[i] > 0;
    }
    if (!any) return x;

    auto in_shape = x.shape();
    auto in_strides = row_major_strides(in_shape);
    auto out_strides = row_major_strides(out_shape);
    std::vector<T> out(static_cast<size_t>(numel_of(out_shape)), T(0));
    const auto& xd = x.data();
    // copy row-by-row along the last axis
    int64_t rows = x.numel() / in_shape.back();
    std::vector<int64_t> idx(in_shape.size(), 0);
    for (int64_t r = 0; r < rows; ++r) {
        int64_t src = 0, dst = 0;
        int64_t rem = r;
        for (size_t d = 0; d + 1 < in_shape.size(); ++d) {
            int64_t stride_rows = in_strides[d] / in_shape.back();
            int64_t coord = rem / stride_rows;
            rem -= coord * stride_rows;
            src += coord * in_strides[d];
            dst += coord * out_strides[d];
        }
        std::memcpy(out.data() + dst, xd.data() + src,
                    static_cast<size_t>(in_shape.back()) * sizeof(T));
    }
    auto saved_in = std::make_shared<Shape>(in_shape);
    return detail::make_op_node<T>(
        std::move(out_shape), std::move(out), {x}, [x, saved_in](detail::TensorImpl<T>& self) {
            if (!x.raw()->requires_grad) return;
            auto* xi = x.raw();
            xi->ensure_grad();
            const auto& in_sh = *saved_in;
            auto in_st = row_major_strides(in_sh);
            auto out_st = row_major_strides(self.shape);
            int64_t rows2 = numel_of(in_sh) / in_sh.back();
            for (int64_t r = 0; r < rows2; ++r) {
                int64_t src = 0, dst = 0;
                int64_t rem = r;
                for (size_t d = 0; d + 1 < in_sh.size(); ++d) {
                    int64_t stride_rows = in_st[d] / in_sh.back();
                    int64_t coord = rem / stride_rows;
                    rem -= coord * stride_rows;
                    src += coord * in_st[d];
                    dst += coord * out_st[d];
                }
                for (int64_t j = 0; j < in_sh.back(); ++j) xi->grad[src + j] += self.grad[dst + j];
            }
        });
}

/// Keeps the leading sizes[axis] entries of each axis (crop from the origin).
template <typename T>
Tensor<T> crop_to(const Tensor<T>& x, const Shape& sizes) {
    check(sizes.size() == x.rank(), "crop_to: need one size per axis");
    bool same = true;
    for (size_t i = 0; i < sizes.size(); ++i) {
        check(sizes[i] >= 1 && sizes[i] <= x.shape()[i], "crop_to: size out of range");
        same = same && sizes[i] == x.shape()[i];
    }
    if (same) return x;
    auto in_shape = x.shape();
    auto in_strides = row_major_strides(in_shape);
    auto out_strides = row_major_strides(sizes);
    std::vector<T> out(static_cast<size_t>(numel_of(sizes)));
    const auto& xd = x.data();
    int64_t rows = numel_of(sizes) / sizes.back();
    for (int64_t r = 0; r < rows; ++r) {
        int64_t src = 0, dst = 0;
        int64_t rem = r;
        for (size_t d = 0; d + 1 < sizes.size(); ++d) {
            int64_t stride_rows = out_strides[d] / sizes.back();
            int64_t coord = rem / stride_rows;
            rem -= coord * stride_rows;
            src += coord * in_strides[d];
            dst += coord * out_strides[d];
        }
        std::memcpy(out.data() + dst, xd.data() + src,
                    static_cast<size_t>(sizes.back()) * sizeof(T));
    }
    auto saved_sizes = std::make_shared<Shape>(sizes);
    auto saved_in = std::make_shared<Shape>(in_shape);
    return detail::make_op_node<T>(
        sizes, std::move(out), {x}, [x, saved_sizes, saved_in](detail::TensorImpl<T>& self) {
            if (!x.raw()->requires_grad) return;
            auto* xi = x.raw();
            xi->ensure_grad();
            const auto& sz = *saved_sizes;
            auto in_st = row_major_strides(*saved_in);
            auto out_st = row_major_strides(sz);
            int64_t rows2 = numel_of(sz) / sz.back();
            for (int64_t r = 0; r < rows2; ++r) {
                int64_t src = 0, dst = 0;
                int64_t rem = r;
                for (size_t d = 0; d + 1 < sz.size(); ++d) {
                    int64_t stride_rows = out_st[d] / sz.back();
                    int64_t coord = rem / stride_rows;
                    rem -= coord * stride_rows;
                    src += coord * in_st[d];
                    dst += coord * out_st[d];
                }
                for (int64_t j = 0; j < sz.back(); ++j) xi->grad[src + j] += self.grad[dst + j];
            }
        });
}

/// Cyclic shift: out[i] = in[(i - shift) mod n] along each axis.
template <typename T>
Tensor<T> roll(const Tensor<T>& x, const std::vector<int64_t>& shifts) {
    check(shifts.size() == x.rank(), "roll: need one shift per axis");
    bool all_zero = true;
    for (size_t d = 0; d < shifts.size(); ++d) {
        int64_t n = x.shape()[d];
        if (((shifts[d] % n) + n) % n != 0) all_zero = false;
    }
    if (all_zero) return x;
    const auto& sh = x.shape();
    auto strides = row_major_strides(sh);
    int64_t n = x.numel();
    std::vector<T> out(static_cast<size_t>(n));
    const auto& xd = x.data();
    std::vector<int64_t> norm(shifts.size());
    for (size_t d = 0; d < shifts.size(); ++d) norm[d] = ((shifts[d] % sh[d]) + sh[d]) % sh[d];
    for (int64_t flat = 0; flat < n; ++flat) {
        int64_t rem = flat, src = 0;
        for (size_t d = 0; d < sh.size(); ++d) {
            int64_t coord = rem / strides[d];
            rem -= coord * strides[d];
            int64_t s = coord - norm[d];
            if (s < 0) s += sh[d];
            src += s * strides[d];
        }
        out[static_cast<size_t>(flat)] = xd[static_cast<size_t>(src)];
    }
    auto saved = std::make_shared<std::vector<int64_t>>(norm);
    return detail::make_op_node<T>(
        sh, std::move(out), {x}, [x, saved](detail::TensorImpl<T>& self) {
            if (!x.raw()->requires_grad) return;
            auto* xi = x.raw();
            xi->ensure_grad();
            const auto& sh2 = self.shape;
            auto st = row_major_strides(sh2);
            const auto& nm = *saved;
            int64_t total = numel_of(sh2);
            for (int64_t flat = 0; flat < total; ++flat) {
                int64_t rem = flat, src = 0;
                for (size_t d = 0; d < sh2.size(); ++d) {
                    int64_t coord = rem / st[d];
                    rem -= coord * st[d];
                    int64_t s = coord - nm[d];
                    if (s < 0) s += sh2[d];
                    src += s * st[d];
                }
                xi->grad[static_cast<size_t>(src)] += self.grad[static_cast<size_t>(flat)];
            }
        });
}

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& xs, size_t axis) {
    check(!xs.empty(), "concat: empty input list");
    const Shape& first = xs[0].shape();
    check(axis < first.size(), "concat: axis out of range");
    Shape out_shape = first;
    int64_t total_axis = 0;
    for (const auto& t : xs) {
        check(t.rank() == first.size(), "concat: rank mismatch");
        for (size_t d = 0; d < first.size(); ++d)
            if (d != axis)
                check(t.shape()[d] == first[d], "concat: non-axis extent mismatch");
        total_axis += t.shape()[axis];
    }
    out_shape[axis] = total_axis;

    int64_t outer = 1, inner = 1;
    for (size_t d = 0; d < axis; ++d) outer *= first[d];
    for (size_t d = axis + 1; d < first.size(); ++d) inner *= first[d];

    std::vector<T> out(static_cast<size_t>(numel_of(out_shape)));
    int64_t offset = 0;
    for (const auto& t : xs) {
        int64_t a = t.shape()[axis];
        const auto& td = t.data();
        for (int64_t o = 0; o < outer; ++o)
            std::memcpy(out.data() + (o * total_axis + offset) * inner, td.data() + o * a * inner,
                        static_cast<size_t>(a * inner) * sizeof(T));
        offset += a;
    }
    auto sizes = std::make_shared<std::vector<int64_t>>();
    for (const auto& t : xs) sizes->push_back(t.shape()[axis]);
    return detail::make_op_node<T>(
        std::move(out_shape), std::move(out), xs,
        [xs, sizes, outer, inner, total_axis](detail::TensorImpl<T>& self) {
            int64_t offset2 = 0;
            for (size_t k = 0; k < xs.size(); ++k) {
                int64_t a = (*sizes)[k];
                if (xs[k].raw()->requires_grad) {
                    auto* xi = xs[k].raw();
                    xi->ensure_grad();
                    for (int64_t o = 0; o < outer; ++o) {
                        const T* g = self.grad.data() + (o * total_axis + offset2) * inner;
                        T* dst = xi->grad.data() + o * a * inner;
                        for (int64_t j = 0; j < a * inner; ++j) dst[j] += g[j];
                    }
                }
                offset2 += a;
            }
        });
}

// ---------------------------------------------------------------------------
// reductions
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> sum_all(const Tensor<T>& x) {
    T s = 0;
    for (T v : x.data()) s += v;
    return detail::make_op_node<T>(
        Shape{1}, {s}, {x}, [x](detail::TensorImpl<T>& self) {
            if (!x.raw()->requires_grad) return;
            auto* xi = x.raw();
            xi->ensure_grad();
            T g = self.grad[0];
            for (auto& v : xi->grad) v += g;
        });
}

template <typename T>
Tensor<T> mean_all(const Tensor<T>& x) {
    return mul_scalar(sum_all(x), T(1) / static_cast<T>(x.numel()));
}

/// Sums out one axis.
template <typename T>
Tensor<T> sum_axis(const Tensor<T>& x, size_t axis) {
    check(axis < x.rank(), "sum_axis: axis out of range");
    const Shape& sh = x.shape();
    Shape out_shape;
    for (size_t d = 0; d < sh.size(); ++d)
        if (d != axis) out_shape.push_back(sh[d]);
    if (out_shape.empty()) out_shape = {1};
    int64_t outer = 1, inner = 1, a = sh[axis];
    for (size_t d = 0; d < axis; ++d) outer *= sh[d];
    for (size_t d = axis + 1; d < sh.size(); ++d) inner *= sh[d];
    std::vector<T> out(static_cast<size_t>(outer * inner), T(0));
    const auto& xd = x.data();
    for (int64_t o = 0; o < outer; ++o)
        for (int64_t k = 0; k < a; ++k) {
            const T* src = xd.data() + (o * a + k) * inner;
            T* dst = out.data() + o * inner;
            for (int64_t j = 0; j < inner; ++j) dst[j] += src[j];
        }
    return detail::make_op_node<T>(
        std::move(out_shape), std::move(out), {x},
        [x, outer, inner, a](detail::TensorImpl<T>& self) {
            if (!x.raw()->requires_grad) return;
            auto* xi = x.raw();
            xi->ensure_grad();
            for (int64_t o = 0; o < outer; ++o)
                for (int64_t k = 0; k < a; ++k) {
                    T* dst = xi->grad.data() + (o * a + k) * inner;
                    const T* g = self.grad.data() + o * inner;
                    for (int64_t j = 0; j < inner; ++j) dst[j] += g[j];
                }
        });
}

// ---------------------------------------------------------------------------
// matrix products
// ---------------------------------------------------------------------------

namespace detail {

// C[m,n] += A[m,k] * B[k,n]
template <typename T>
void gemm_acc(const T* a, const T* b, T* c, int64_t m, int64_t k, int64_t n) {
    for (int64_t i = 0; i < m; ++i) {
        const T* arow = a + i * k;
        T* crow = c + i * n;
        for (int64_t p = 0; p < k; ++p) {
            T av = arow[p];
            const T* brow = b + p * n;
            for (int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

// C[m,n] += A[m,k] * B[n,k]^T
template <typename T>
void gemm_nt_acc(const T* a, const T* b, T* c, int64_t m, int64_t k, int64_t n) {
    for (int64_t i = 0; i < m; ++i) {
        const T* arow = a + i * k;
        T* crow = c + i * n;
        for (int64_t j = 0; j < n; ++j) {
            const T* brow = b + j * k;
            T s = 0;
            for (int64_t p = 0; p < k; ++p) s += arow[p] * brow[p];
            crow[j] += s;
        }
    }
}

// C[m,n] += A[k,m]^T * B[k,n]
template <typename T>
void gemm_tn_acc(const T* a, const T* b, T* c, int64_t m, int64_t k, int64_t n) {
    for (int64_t p = 0; p < k; ++p) {
        const T* arow = a + p * m;
        const T* brow = b + p * n;
        for (int64_t i = 0; i < m; ++i) {
            T av = arow[i];
            T* crow = c + i * n;
            for (int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

}  // namespace detail

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
    check(a.rank() == 2 && b.rank() == 2 && a.dim(1) == b.dim(0),
          "matmul: incompatible shapes " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    int64_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    std::vector<T> out(static_cast<size_t>(m * n), T(0));
    detail::gemm_acc(a.data().data(), b.data().data(), out.data(), m, k, n);
    flops::add("matmul", 2 * m * k * n);
    return detail::make_op_node<T>(
        Shape{m, n}, std::move(out), {a, b}, [a, b, m, k, n](detail::TensorImpl<T>& self) {
            if (a.raw()->requires_grad) {
                auto* ai = a.raw();
                ai->ensure_grad();
                detail::gemm_nt_acc(self.grad.data(), b.raw()->data.data(), ai->grad.data(), m, n,
                                    k);
            }
            if (b.raw()->requires_grad) {
                auto* bi = b.raw();
                bi->ensure_grad();
                detail::gemm_tn_acc(a.raw()->data.data(), self.grad.data(), bi->grad.data(), k, m,
                                    n);
            }
        });
}

/// Batched matmul: [B,m,k] x [B,k,n] -> [B,m,n].
template <typename T>
Tensor<T> bmm(const Tensor<T>& a, const Tensor<T>& b) {
    check(a.rank() == 3 && b.rank() == 3 && a.dim(0) == b.dim(0) && a.dim(2) == b.dim(1),
          "bmm: incompatible shapes " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    int64_t bs = a.dim(0), m = a.dim(1), k = a.dim(2), n = b.dim(2);
    std::vector<T> out(static_cast<size_t>(bs * m * n), T(0));
    for (int64_t q = 0; q < bs; ++q)
        detail::gemm_acc(a.data().data() + q * m * k, b.data().data() + q * k * n,
                         out.data() + q * m * n, m, k, n);
    flops::add("matmul", 2 * bs * m * k * n);
    return detail::make_op_node<T>(
        Shape{bs, m, n}, std::move(out), {a, b}, [a, b, bs, m, k, n](detail::TensorImpl<T>& self) {
            if (a.raw()->requires_grad) {
                auto* ai = a.raw();
                ai->ensure_grad();
                for (int64_t q = 0; q < bs; ++q)
                    detail::gemm_nt_acc(self.grad.data() + q * m * n,
                                        b.raw()->data.data() + q * k * n,
                                        ai->grad.data() + q * m * k, m, n, k);
            }
            if (b.raw()->requires_grad) {
                auto* bi = b.raw();
                bi->ensure_grad();
                for (int64_t q = 0; q < bs; ++q)
                    detail::gemm_tn_acc(a.raw()->data.data() + q * m * k,
                                        self.grad.data() + q * m * n,
                                        bi->grad.data() + q * k * n, k, m, n);
            }
        });
}

/// Batched A * B^T: [B,m,k] x [B,n,k] -> [B,m,n].
template <typename T>
Tensor<T> bmm_nt(const Tensor<T>& a, const Tensor<T>& b) {
    check(a.rank() == 3 && b.rank() == 3 && a.dim(0) == b.dim(0) && a.dim(2) == b.dim(2),
          "bmm_nt: incompatible shapes " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    int64_t bs = a.dim(0), m = a.dim(1), k = a.dim(2), n = b.dim(1);
    std::vector<T> out(static_cast<size_t>(bs * m * n), T(0));
    for (int64_t q = 0; q < bs; ++q)
        detail::gemm_nt_acc(a.data().data() + q * m * k, b.data().data() + q * n * k,
                            out.data() + q * m * n, m, k, n);
    flops::add("matmul", 2 * bs * m * k * n);
    return detail::make_op_node<T>(
        Shape{bs, m, n}, std::move(out), {a, b}, [a, b, bs, m, k, n](detail::TensorImpl<T>& self) {
            if (a.raw()->requires_grad) {
                // dA = dC * B
                auto* ai = a.raw();
                ai->ensure_grad();
                for (int64_t q = 0; q < bs; ++q)
                    detail::gemm_acc(self.grad.data() + q * m * n, b.raw()->data.data() + q * n * k,
                                     ai->grad.data() + q * m * k, m, n, k);
            }
            if (b.raw()->requires_grad) {
                // dB = dC^T * A
                auto* bi = b.raw();
                bi->ensure_grad();
                for (int64_t q = 0; q < bs; ++q)
                    detail::gemm_tn_acc(self.grad.data() + q * m * n,
                                        a.raw()->data.data() + q * m * k,
                                        bi->grad.data() + q * n * k, n, m, k);
            }
        });
}

// ---------------------------------------------------------------------------
// softmax / layer norm
// ---------------------------------------------------------------------------

/// Numerically stable softmax over the last axis.
template <typename T>
Tensor<T> softmax_lastdim(const Tensor<T>& x) {
    check(x.rank() >= 1, "softmax: rank-0 input");
    int64_t c = x.shape().back();
    int64_t rows = x.numel() / c;
    std::vector<T> out(x.data().size());
    const auto& xd = x.data();
    for (int64_t r = 0; r < rows; ++r) {
        const T* src = xd.data() + r * c;
        T* dst = out.data() + r * c;
        T mx = src[0];
        for (int64_t j = 1; j < c; ++j) mx = std::max(mx, src[j]);
        T sum = 0;
        for (int64_t j = 0; j < c; ++j) {
            T e = std::exp(src[j] - mx);
            dst[j] = e;
            sum += e;
        }
        T inv = T(1) / sum;
        for (int64_t j = 0; j < c; ++j) dst[j] *= inv;
    }
    return detail::make_op_node<T>(
        x.shape(), std::move(out), {x}, [x, rows, c](detail::TensorImpl<T>& self) {
            if (!x.raw()->requires_grad) return;
            auto* xi = x.raw();
            xi->ensure_grad();
            for (int64_t r = 0; r < rows; ++r) {
                const T* y = self.data.data() + r * c;
                const T* dy = self.grad.data() + r * c;
                T dot = 0;
                for (int64_t j = 0; j < c; ++j) dot += y[j] * dy[j];
                T* dx = xi->grad.data() + r * c;
                for (int64_t j = 0; j < c; ++j) dx[j] += y[j] * (dy[j] - dot);
            }
        });
}

/// log(softmax(x)) over the last axis, computed stably.
template <typename T>
Tensor<T> log_softmax_lastdim(const Tensor<T>& x) {
    check(x.rank() >= 1, "log_softmax: rank-0 input");
    int64_t c = x.shape().back();
    int64_t rows = x.numel() / c;
    std::vector<T> out(x.data().size());
    const auto& xd = x.data();
    for (int64_t r = 0; r < rows; ++r) {
        const T* src = xd.data() + r * c;
        T* dst = out.data() + r * c;
        T mx = src[0];
        for (int64_t j = 1; j < c; ++j) mx = std::max(mx, src[j]);
        T sum = 0;
        for (int64_t j = 0; j < c; ++j) sum += std::exp(src[j] - mx);
        T lse = mx + std::log(sum);
        for (int64_t j = 0; j < c; ++j) dst[j] = src[j] - lse;
    }
    return detail::make_op_node<T>(
        x.shape(), std::move(out), {x}, [x, rows, c](detail::TensorImpl<T>& self) {
            if (!x.raw()->requires_grad) return;
            auto* xi = x.raw();
            xi->ensure_grad();
            for (int64_t r = 0; r < rows; ++r) {
                const T* y = self.data.data() + r * c;
                const T* dy = self.grad.data() + r * c;
                T s = 0;
                for (int64_t j = 0; j < c; ++j) s += dy[j];
                T* dx = xi->grad.data() + r * c;
                for (int64_t j = 0; j < c; ++j) dx[j] += dy[j] - std::exp(y[j]) * s;
            }
        });
}

/// LayerNorm over the last axis with affine (gamma, beta).
template <typename T>
Tensor<T> layer_norm_lastdim(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                             T eps = T(1e-5)) {
    check(x.rank() >= 1 && x.shape().back() > 0, "layer_norm: empty normalized axis");
    int64_t c = x.shape().back();
    check(gamma.rank() == 1 && gamma.dim(0) == c && beta.rank() == 1 && beta.dim(0) == c,
          "layer_norm: gamma/beta must have shape [C]");
    int64_t rows = x.numel() / c;
    std::vector<T> out(x.data().size());
    std::vector<T> xhat(x.data().size());
    std::vector<T> inv_std(static_cast<size_t>(rows));
    const auto& xd = x.data();
    const auto& gd = gamma.data();
    const auto& bd = beta.data();
    for (int64_t r = 0; r < rows; ++r) {
        const T* src = xd.data() + r * c;
        T mean = 0;
        for (int64_t j = 0; j < c; ++j) mean += src[j];
        mean /= static_cast<T>(c);
        T var = 0;
        for (int64_t j = 0; j < c; ++j) {
            T d = src[j] - mean;
            var += d * d;
        }
        var /= static_cast<T>(c);
        T inv = T(1) / std::sqrt(var + eps);
        inv_std[static_cast<size_t>(r)] = inv;
        T* xh = xhat.data() + r * c;
        T* dst = out.data() + r * c;
        for (int64_t j = 0; j < c; ++j) {
            xh[j] = (src[j] - mean) * inv;
            dst[j] = xh[j] * gd[j] + bd[j];
        }
    }
    auto saved_xhat = std::make_shared<std::vector<T>>(std::move(xhat));
    auto saved_inv = std::make_shared<std::vector<T>>(std::move(inv_std));
    return detail::make_op_node<T>(
        x.shape(), std::move(out), {x, gamma, beta},
        [x, gamma, beta, saved_xhat, saved_inv, rows, c](detail::TensorImpl<T>& self) {
            const auto& xh = *saved_xhat;
            const auto& inv = *saved_inv;
            const auto& gd2 = gamma.raw()->data;
            if (gamma.raw()->requires_grad) {
                auto* gi = gamma.raw();
                gi->ensure_grad();
                for (int64_t r = 0; r < rows; ++r) {
                    const T* dy = self.grad.data() + r * c;
                    const T* h = xh.data() + r * c;
                    for (int64_t j = 0; j < c; ++j) gi->grad[j] += dy[j] * h[j];
                }
            }
            if (beta.raw()->requires_grad) {
                auto* bi = beta.raw();
                bi->ensure_grad();
                for (int64_t r = 0; r < rows; ++r) {
                    const T* dy = self.grad.data() + r * c;
                    for (int64_t j = 0; j < c; ++j) bi->grad[j] += dy[j];
                }
            }
            if (x.raw()->requires_grad) {
                auto* xi = x.raw();
                xi->ensure_grad();
                for (int64_t r = 0; r < rows; ++r) {
                    const T* dy = self.grad.data() + r * c;
                    const T* h = xh.data() + r * c;
                    T m1 = 0, m2 = 0;
                    for (int64_t j = 0; j < c; ++j) {
                        T dg = dy[j] * gd2[j];
                        m1 += dg;
                        m2 += dg * h[j];
                    }
                    m1 /= static_cast<T>(c);
                    m2 /= static_cast<T>(c);
                    T* dx = xi->grad.data() + r * c;
                    T is = inv[static_cast<size_t>(r)];
                    for (int64_t j = 0; j < c; ++j)
                        dx[j] += is * (dy[j] * gd2[j] - m1 - h[j] * m2);
                }
            }
        });
}

// ---------------------------------------------------------------------------
// convolution
// ---------------------------------------------------------------------------

namespace detail {

inline int64_t conv_out_extent(int64_t in, int64_t k, int64_t stride, int64_t pad) {
    int64_t out = (in + 2 * pad - k) / stride + 1;
    check(out >= 1, "conv: kernel larger than padded input (extent " + std::to_string(in) +
                        ", kernel " + std::to_string(k) + ", pad " + std::to_string(pad) + ")");
    return out;
}

// Valid output-coordinate range [lo, hi) for which in = out*stride - pad + koff
// lies inside [0, in_extent).
inline void conv_valid_range(int64_t out_extent, int64_t in_extent, int64_t stride, int64_t pad,
                             int64_t koff, int64_t& lo, int64_t& hi) {
    // out*stride >= pad - koff
    int64_t num = pad - koff;
    lo = num <= 0 ? 0 : (num + stride - 1) / stride;
    // out*stride <= in_extent - 1 + pad - koff
    int64_t top = in_extent - 1 + pad - koff;
    hi = top < 0 ? 0 : top / stride + 1;
    lo = std::min(lo, out_extent);
    hi = std::min(hi, out_extent);
    if (hi < lo) hi = lo;
}

}  // namespace detail

/// 2-D cross-correlation with stride, zero padding and channel groups.
/// x: [N,C,H,W], w: [O,C/g,kh,kw], bias: [O] (optional, pass undefined Tensor).
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias,
                 std::array<int64_t, 2> stride, std::array<int64_t, 2> pad, int64_t groups = 1) {
    check(x.rank() == 4, "conv2d: input must be [N,C,H,W], got " + shape_str(x.shape()));
    check(w.rank() == 4, "conv2d: weight must be [O,C/g,kh,kw], got " + shape_str(w.shape()));
    const int64_t n = x.dim(0), c = x.dim(1), h = x.dim(2), wd = x.dim(3);
    const int64_t oc = w.dim(0), icg = w.dim(1), kh = w.dim(2), kw = w.dim(3);
    check(groups >= 1 && c % groups == 0 && oc % groups == 0,
          "conv2d: channels not divisible by groups");
    check(icg == c / groups, "conv2d: weight in-channels " + std::to_string(icg) +
                                 " != C/groups = " + std::to_string(c / groups));
    if (bias.defined())
        check(bias.rank() == 1 && bias.dim(0) == oc, "conv2d: bias must be [O]");
    const int64_t sh = stride[0], sw = stride[1], ph = pad[0], pw = pad[1];
    const int64_t oh = detail::conv_out_extent(h, kh, sh, ph);
    const int64_t ow = detail::conv_out_extent(wd, kw, sw, pw);
    const int64_t ocg = oc / groups;

    std::vector<T> out(static_cast<size_t>(n * oc * oh * ow), T(0));
    const auto& xd = x.data();
    const auto& wdt = w.data();
    if (bias.defined()) {
        const auto& bd = bias.data();
        for (int64_t in = 0; in < n; ++in)
            for (int64_t o = 0; o < oc; ++o) {
                T* dst = out.data() + ((in * oc + o) * oh) * ow;
                T bv = bd[o];
                for (int64_t j = 0; j < oh * ow; ++j) dst[j] = bv;
            }
    }
    for (int64_t in = 0; in < n; ++in)
        for (int64_t g = 0; g < groups; ++g)
            for (int64_t og = 0; og < ocg; ++og) {
                const int64_t o = g * ocg + og;
                T* ybase = out.data() + ((in * oc + o) * oh) * ow;
                for (int64_t ig = 0; ig < icg; ++ig) {
                    const int64_t ci = g * icg + ig;
                    const T* xbase = xd.data() + ((in * c + ci) * h) * wd;
                    const T* wbase = wdt.data() + ((o * icg + ig) * kh) * kw;
                    for (int64_t fy = 0; fy < kh; ++fy)
                        for (int64_t fx = 0; fx < kw; ++fx) {
                            T wv = wbase[fy * kw + fx];
                            if (wv == T(0) && !w.requires_grad()) continue;
                            int64_t ylo, yhi, xlo, xhi;
                            detail::conv_valid_range(oh, h, sh, ph, fy, ylo, yhi);
                            detail::conv_valid_range(ow, wd, sw, pw, fx, xlo, xhi);
                            for (int64_t oy = ylo; oy < yhi; ++oy) {
                                const int64_t iy = oy * sh - ph + fy;
                                const T* xrow = xbase + iy * wd - pw + fx;
                                T* yrow = ybase + oy * ow;
                                if (sw == 1) {
                                    for (int64_t ox = xlo; ox < xhi; ++ox)
                                        yrow[ox] += wv * xrow[ox];
                                } else {
                                    for (int64_t ox = xlo; ox < xhi; ++ox)
                                        yrow[ox] += wv * xrow[ox * sw];
                                }
                            }
                        }
                }
            }
    flops::add("conv", 2 * n * oc * oh * ow * icg * kh * kw + (bias.defined() ? n * oc * oh * ow : 0));

    std::vector<Tensor<T>> inputs = {x, w};
    if (bias.defined()) inputs.push_back(bias);
    return detail::make_op_node<T>(
        Shape{n, oc, oh, ow}, std::move(out), inputs,
        [x, w, bias, n, c, h, wd, oc, icg, ocg, kh, kw, sh, sw, ph, pw, oh, ow,
         groups](detail::TensorImpl<T>& self) {
            const auto& dy = self.grad;
            if (bias.defined() && bias.raw()->requires_grad) {
                auto* bi = bias.raw();
                bi->ensure_grad();
                for (int64_t in = 0; in < n; ++in)
                    for (int64_t o = 0; o < oc; ++o) {
                        const T* g = dy.data() + ((in * oc + o) * oh) * ow;
                        T s = 0;
                        for (int64_t j = 0; j < oh * ow; ++j) s += g[j];
                        bi->grad[o] += s;
                    }
            }
            const bool need_dx = x.raw()->requires_grad;
            const bool need_dw = w.raw()->requires_grad;
            if (!need_dx && !need_dw) return;
            if (need_dx) x.raw()->ensure_grad();
            if (need_dw) w.raw()->ensure_grad();
            const auto& xd = x.raw()->data;
            const auto& wdt = w.raw()->data;
            for (int64_t in = 0; in < n; ++in)
                for (int64_t g = 0; g < groups; ++g)
                    for (int64_t og = 0; og < ocg; ++og) {
                        const int64_t o = g * ocg + og;
                        const T* gybase = dy.data() + ((in * oc + o) * oh) * ow;
                        for (int64_t ig = 0; ig < icg; ++ig) {
                            const int64_t ci = g * icg + ig;
                            const T* xbase = xd.data() + ((in * c + ci) * h) * wd;
                            T* dxbase =
                                need_dx ? x.raw()->grad.data() + ((in * c + ci) * h) * wd : nullptr;
                            const T* wbase = wdt.data() + ((o * icg + ig) * kh) * kw;
                            T* dwbase =
                                need_dw ? w.raw()->grad.data() + ((o * icg + ig) * kh) * kw
                                        : nullptr;
                            for (int64_t fy = 0; fy < kh; ++fy)
                                for (int64_t fx = 0; fx < kw; ++fx) {
                                    int64_t ylo, yhi, xlo, xhi;
                                    detail::conv_valid_range(oh, h, sh, ph, fy, ylo, yhi);
                                    detail::conv_valid_range(ow, wd, sw, pw, fx, xlo, xhi);
                                    T wv = wbase[fy * kw + fx];
                                    T dwacc = 0;
                                    for (int64_t oy = ylo; oy < yhi; ++oy) {
                                        const int64_t iy = oy * sh - ph + fy;
                                        const T* grow = gybase + oy * ow;
                                        const T* xrow = xbase + iy * wd - pw + fx;
                                        T* dxrow =
                                            need_dx ? dxbase + iy * wd - pw + fx : nullptr;
                                        for (int64_t ox = xlo; ox < xhi; ++ox) {
                                            const int64_t ix = ox * sw;
                                            T g2 = grow[ox];
                                            if (need_dw) dwacc += g2 * xrow[ix];
                                            if (need_dx) dxrow[ix] += g2 * wv;
                                        }
                                    }
                                    if (need_dw) dwbase[fy * kw + fx] += dwacc;
                                }
                        }
                    }
        });
}

/// 3-D cross-correlation; x: [N,C,D,H,W], w: [O,C/g,kd,kh,kw].
template <typename T>
Tensor<T> conv3d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias,
                 std::array<int64_t, 3> stride, std::array<int64_t, 3> pad, int64_t groups = 1) {
    check(x.rank() == 5, "conv3d: input must be [N,C,D,H,W], got " + shape_str(x.shape()));
    check(w.rank() == 5, "conv3d: weight must be [O,C/g,kd,kh,kw], got " + shape_str(w.shape()));
    const int64_t n = x.dim(0), c = x.dim(1), d = x.dim(2), h = x.dim(3), wd = x.dim(4);
    const int64_t oc = w.dim(0), icg = w.dim(1), kd = w.dim(2), kh = w.dim(3), kw = w.dim(4);
    check(groups >= 1 && c % groups == 0 && oc % groups == 0,
          "conv3d: channels not divisible by groups");
    check(icg == c / groups, "conv3d: weight in-channels mismatch");
    if (bias.defined())
        check(bias.rank() == 1 && bias.dim(0) == oc, "conv3d: bias must be [O]");
    const int64_t sd = stride[0], sh = stride[1], sw = stride[2];
    const int64_t pd = pad[0], ph = pad[1], pw = pad[2];
    const int64_t od = detail::conv_out_extent(d, kd, sd, pd);
    const int64_t oh = detail::conv_out_extent(h, kh, sh, ph);
    const int64_t ow = detail::conv_out_extent(wd, kw, sw, pw);
    const int64_t ocg = oc / groups;

    std::vector<T> out(static_cast<size_t>(n * oc * od * oh * ow), T(0));
    const auto& xd = x.data();
    const auto& wdt = w.data();
    if (bias.defined()) {
        const auto& bd = bias.data();
        for (int64_t in = 0; in < n; ++in)
            for (int64_t o = 0; o < oc; ++o) {
                T* dst = out.data() + ((in * oc + o) * od * oh) * ow;
                T bv = bd[o];
                for (int64_t j = 0; j < od * oh * ow; ++j) dst[j] = bv;
            }
    }
    for (int64_t in = 0; in < n; ++in)
        for (int64_t g = 0; g < groups; ++g)
            for (int64_t og = 0; og < ocg; ++og) {
                const int64_t o = g * ocg + og;
                T* ybase = out.data() + (in * oc + o) * od * oh * ow;
                for (int64_t ig = 0; ig < icg; ++ig) {
                    const int64_t ci = g * icg + ig;
                    const T* xbase = xd.data() + (in * c + ci) * d * h * wd;
                    const T* wbase = wdt.data() + (o * icg + ig) * kd * kh * kw;
                    for (int64_t fz = 0; fz < kd; ++fz)
                        for (int64_t fy = 0; fy < kh; ++fy)
                            for (int64_t fx = 0; fx < kw; ++fx) {
                                T wv = wbase[(fz * kh + fy) * kw + fx];
                                int64_t zlo, zhi, ylo, yhi, xlo, xhi;
                                detail::conv_valid_range(od, d, sd, pd, fz, zlo, zhi);
                                detail::conv_valid_range(oh, h, sh, ph, fy, ylo, yhi);
                                detail::conv_valid_range(ow, wd, sw, pw, fx, xlo, xhi);
                                for (int64_t oz = zlo; oz < zhi; ++oz) {
                                    const int64_t iz = oz * sd - pd + fz;
                                    for (int64_t oy = ylo; oy < yhi; ++oy) {
                                        const int64_t iy = oy * sh - ph + fy;
                                        const T* xrow =
                                            xbase + (iz * h + iy) * wd - pw + fx;
                                        T* yrow = ybase + (oz * oh + oy) * ow;
                                        if (sw == 1) {
                                            for (int64_t ox = xlo; ox < xhi; ++ox)
                                                yrow[ox] += wv * xrow[ox];
                                        } else {
                                            for (int64_t ox = xlo; ox < xhi; ++ox)
                                                yrow[ox] += wv * xrow[ox * sw];
                                        }
                                    }
                                }
                            }
                }
            }
    flops::add("conv",
               2 * n * oc * od * oh * ow * icg * kd * kh * kw +
                   (bias.defined() ? n * oc * od * oh * ow : 0));

    std::vector<Tensor<T>> inputs = {x, w};
    if (bias.defined()) inputs.push_back(bias);
    return detail::make_op_node<T>(
        Shape{n, oc, od, oh, ow}, std::move(out), inputs,
        [x, w, bias, n, c, d, h, wd, oc, icg, ocg, kd, kh, kw, sd, sh, sw, pd, ph, pw, od, oh, ow,
         groups](detail::TensorImpl<T>& self) {
            const auto& dy = self.grad;
            if (bias.defined() && bias.raw()->requires_grad) {
                auto* bi = bias.raw();
                bi->ensure_grad();
                for (int64_t in = 0; in < n; ++in)
                    for (int64_t o = 0; o < oc; ++o) {
                        const T* g = dy.data() + (in * oc + o) * od * oh * ow;
                        T s = 0;
                        for (int64_t j = 0; j < od * oh * ow; ++j) s += g[j];
                        bi->grad[o] += s;
                    }
            }
            const bool need_dx = x.raw()->requires_grad;
            const bool need_dw = w.raw()->requires_grad;
            if (!need_dx && !need_dw) return;
            if (need_dx) x.raw()->ensure_grad();
            if (need_dw) w.raw()->ensure_grad();
            const auto& xd2 = x.raw()->data;
            const auto& wdt2 = w.raw()->data;
            for (int64_t in = 0; in < n; ++in)
                for (int64_t g = 0; g < groups; ++g)
                    for (int64_t og = 0; og < ocg; ++og) {
                        const int64_t o = g * ocg + og;
                        const T* gybase = dy.data() + (in * oc + o) * od * oh * ow;
                        for (int64_t ig = 0; ig < icg; ++ig) {
                            const int64_t ci = g * icg + ig;
                            const T* xbase = xd2.data() + (in * c + ci) * d * h * wd;
                            T* dxbase = need_dx
                                            ? x.raw()->grad.data() + (in * c + ci) * d * h * wd
                                            : nullptr;
                            const T* wbase = wdt2.data() + (o * icg + ig) * kd * kh * kw;
                            T* dwbase = need_dw
                                            ? w.raw()->grad.data() + (o * icg + ig) * kd * kh * kw
                                            : nullptr;
                            for (int64_t fz = 0; fz < kd; ++fz)
                                for (int64_t fy = 0; fy < kh; ++fy)
                                    for (int64_t fx = 0; fx < kw; ++fx) {
                                        int64_t zlo, zhi, ylo, yhi, xlo, xhi;
                                        detail::conv_valid_range(od, d, sd, pd, fz, zlo, zhi);
                                        detail::conv_valid_range(oh, h, sh, ph, fy, ylo, yhi);
                                        detail::conv_valid_range(ow, wd, sw, pw, fx, xlo, xhi);
                                        T wv = wbase[(fz * kh + fy) * kw + fx];
                                        T dwacc = 0;
                                        for (int64_t oz = zlo; oz < zhi; ++oz) {
                                            const int64_t iz = oz * sd - pd + fz;
                                            for (int64_t oy = ylo; oy < yhi; ++oy) {
                                                const int64_t iy = oy * sh - ph + fy;
                                                const T* grow = gybase + (oz * oh + oy) * ow;
                                                const T* xrow =
                                                    xbase + (iz * h + iy) * wd - pw + fx;
                                                T* dxrow = need_dx ? dxbase + (iz * h + iy) * wd -
                                                                         pw + fx
                                                                   : nullptr;
                                                for (int64_t ox = xlo; ox < xhi; ++ox) {
                                                    const int64_t ix = ox * sw;
                                                    T g2 = grow[ox];
                                                    if (need_dw) dwacc += g2 * xrow[ix];
                                                    if (need_dx) dxrow[ix] += g2 * wv;
                                                }
                                            }
                                        }
                                        if (need_dw) dwbase[(fz * kh + fy) * kw + fx] += dwacc;
                                    }
                        }
                    }
        });
}

// ---------------------------------------------------------------------------
// interpolation
// ---------------------------------------------------------------------------

namespace detail {

struct LinearTap {
    int64_t i0, i1;
    double w0, w1;
};

inline std::vector<LinearTap> linear_taps(int64_t in, int64_t out) {
    // align_corners = false: src = (dst + 0.5) * in/out - 0.5, clamped.
    std::vector<LinearTap> taps(static_cast<size_t>(out));
    const double scale = static_cast<double>(in) / static_cast<double>(out);
    for (int64_t o = 0; o < out; ++o) {
        double src = (static_cast<double>(o) + 0.5) * scale - 0.5;
        if (src < 0) src = 0;
        if (src > static_cast<double>(in - 1)) src = static_cast<double>(in - 1);
        int64_t i0 = static_cast<int64_t>(std::floor(src));
        if (i0 > in - 1) i0 = in - 1;
        int64_t i1 = std::min<int64_t>(i0 + 1, in - 1);
        double f = src - static_cast<double>(i0);
        taps[static_cast<size_t>(o)] = {i0, i1, 1.0 - f, f};
    }
    return taps;
}

inline std::vector<int64_t> nearest_taps(int64_t in, int64_t out) {
    std::vector<int64_t> taps(static_cast<size_t>(out));
    for (int64_t o = 0; o < out; ++o) taps[static_cast<size_t>(o)] = (o * in) / out;
    return taps;
}

}  // namespace detail

/// Nearest-neighbour resize of the trailing spatial axes. The number of
/// spatial axes is target.size(); all leading axes are carried through.
template <typename T>
Tensor<T> interpolate_nearest(const Tensor<T>& x, const Shape& target) {
    const size_t sr = target.size();
    check(sr >= 1 && sr <= 3 && x.rank() >= sr, "interpolate: 1-3 spatial axes required");
    for (int64_t t : target) check(t >= 1, "interpolate: zero target extent");
    Shape in_sp(x.shape().end() - sr, x.shape().end());
    Shape out_shape(x.shape().begin(), x.shape().end() - sr);
    int64_t lead = 1;
    for (int64_t v : out_shape) lead *= v;
    for (int64_t v : target) out_shape.push_back(v);
    if (in_sp == target) return x;

    std::vector<std::vector<int64_t>> taps(sr);
    for (size_t a = 0; a < sr; ++a) taps[a] = detail::nearest_taps(in_sp[a], target[a]);
    int64_t in_vol = numel_of(in_sp), out_vol = numel_of(target);
    // flat src offset for every output spatial position
    std::vector<int64_t> map(static_cast<size_t>(out_vol));
    Shape in_strides = row_major_strides(in_sp);
    Shape out_strides = row_major_strides(target);
    for (int64_t flat = 0; flat < out_vol; ++flat) {
        int64_t rem = flat, src = 0;
        for (size_t a = 0; a < sr; ++a) {
            int64_t coord = rem / out_strides[a];
            rem -= coord * out_strides[a];
            src += taps[a][static_cast<size_t>(coord)] * in_strides[a];
        }
        map[static_cast<size_t>(flat)] = src;
    }
    std::vector<T> out(static_cast<size_t>(lead * out_vol));
    const auto& xd = x.data();
    for (int64_t l = 0; l < lead; ++l) {
        const T* src = xd.data() + l * in_vol;
        T* dst = out.data() + l * out_vol;
        for (int64_t j = 0; j < out_vol; ++j) dst[j] = src[map[static_cast<size_t>(j)]];
    }
    auto map_ptr = std::make_shared<std::vector<int64_t>>(std::move(map));
    return detail::make_op_node<T>(
        std::move(out_shape), std::move(out), {x},
        [x, map_ptr, lead, in_vol, out_vol](detail::TensorImpl<T>& self) {
            if (!x.raw()->requires_grad) return;
            auto* xi = x.raw();
            xi->ensure_grad();
            const auto& m = *map_ptr;
            for (int64_t l = 0; l < lead; ++l) {
                T* dst = xi->grad.data() + l * in_vol;
                const T* g = self.grad.data() + l * out_vol;
                for (int64_t j = 0; j < out_vol; ++j) dst[m[static_cast<size_t>(j)]] += g[j];
            }
        });
}

/// Separable multi-linear resize (bilinear/trilinear), align_corners = false.
template <typename T>
Tensor<T> interpolate_linear(const Tensor<T>& x, const Shape& target) {
    const size_t sr = target.size();
    check(sr >= 1 && sr <= 3 && x.rank() >= sr, "interpolate: 1-3 spatial axes required");
    for (int64_t t : target) check(t >= 1, "interpolate: zero target extent");
    Shape in_sp(x.shape().end() - sr, x.shape().end());
    Shape out_shape(x.shape().begin(), x.shape().end() - sr);
    int64_t lead = 1;
    for (int64_t v : out_shape) lead *= v;
    for (int64_t v : target) out_shape.push_back(v);
    if (in_sp == target) return x;

    std::vector<std::vector<detail::LinearTap>> taps(sr);
    for (size_t a = 0; a < sr; ++a) taps[a] = detail::linear_taps(in_sp[a], target[a]);
    int64_t in_vol = numel_of(in_sp), out_vol = numel_of(target);
    // corner offsets + weights per output spatial position (2^sr taps)
    const int corners = 1 << sr;
    std::vector<int64_t> idx(static_cast<size_t>(out_vol * corners));
    std::vector<T> wgt(static_cast<size_t>(out_vol * corners));
    Shape in_strides = row_major_strides(in_sp);
    Shape out_strides = row_major_strides(target);
    for (int64_t flat = 0; flat < out_vol; ++flat) {
        int64_t rem = flat;
        std::array<detail::LinearTap, 3> t{};
        for (size_t a = 0; a < sr; ++a) {
            int64_t coord = rem / out_strides[a];
            rem -= coord * out_strides[a];
            t[a] = taps[a][static_cast<size_t>(coord)];
        }
        for (int cr = 0; cr < corners; ++cr) {
            int64_t src = 0;
            double wv = 1.0;
            for (size_t a = 0; a < sr; ++a) {
                bool hi = (cr >> a) & 1;
                src += (hi ? t[a].i1 : t[a].i0) * in_strides[a];
                wv *= hi ? t[a].w1 : t[a].w0;
            }
            idx[static_cast<size_t>(flat * corners + cr)] = src;
            wgt[static_cast<size_t>(flat * corners + cr)] = static_cast<T>(wv);
        }
    }
    std::vector<T> out(static_cast<size_t>(lead * out_vol), T(0));
    const auto& xd = x.data();
    for (int64_t l = 0; l < lead; ++l) {
        const T* src = xd.data() + l * in_vol;
        T* dst = out.data() + l * out_vol;
        for (int64_t j = 0; j < out_vol; ++j) {
            T acc = 0;
            for (int cr = 0; cr < corners; ++cr)
                acc += wgt[static_cast<size_t>(j * corners + cr)] *
                       src[idx[static_cast<size_t>(j * corners + cr)]];
            dst[j] = acc;
        }
    }
    auto idx_ptr = std::make_shared<std::vector<int64_t>>(std::move(idx));
    auto wgt_ptr = std::make_shared<std::vector<T>>(std::move(wgt));
    return detail::make_op_node<T>(
        std::move(out_shape), std::move(out), {x},
        [x, idx_ptr, wgt_ptr, lead, in_vol, out_vol, corners](detail::TensorImpl<T>& self) {
            if (!x.raw()->requires_grad) return;
            auto* xi = x.raw();
            xi->ensure_grad();
            const auto& id = *idx_ptr;
            const auto& wg = *wgt_ptr;
            for (int64_t l = 0; l < lead; ++l) {
                T* dst = xi->grad.data() + l * in_vol;
                const T* g = self.grad.data() + l * out_vol;
                for (int64_t j = 0; j < out_vol; ++j)
                    for (int cr = 0; cr < corners; ++cr)
                        dst[id[static_cast<size_t>(j * corners + cr)]] +=
                            wg[static_cast<size_t>(j * corners + cr)] * g[j];
            }
        });
}

enum class InterpMode { kNearest, kLinear };

template <typename T>
Tensor<T> interpolate(const Tensor<T>& x, const Shape& target, InterpMode mode) {
    return mode == InterpMode::kNearest ? interpolate_nearest(x, target)
                                        : interpolate_linear(x, target);
}

}  // namespace volseg
