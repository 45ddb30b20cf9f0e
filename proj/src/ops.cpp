#include "caal/ops.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstring>

namespace caal::ops {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapM = Eigen::Map<RowMat>;
using CMapM = Eigen::Map<const RowMat>;

int64_t numel(const std::vector<int>& s) {
    int64_t n = 1;
    for (int d : s) n *= d;
    return n;
}

void require4(const Tensor& t, const char* op) {
    if (t.dim() != 4) throw ShapeError(std::string(op) + ": expected 4-D tensor, got " + t.shape_str());
}

}  // namespace

Tensor ew_binary(const Tensor& a, const Tensor& b, double (*f)(double, double), const char* op) {
    check_same_shape(a, b, op);
    Tensor out = Tensor::zeros(a.shape());
    const double* pa = a.data();
    const double* pb = b.data();
    double* po = out.data();
    int64_t n = a.size();
    for (int64_t i = 0; i < n; ++i) po[i] = f(pa[i], pb[i]);
    return out;
}

Tensor ew_unary(const Tensor& a, double (*f)(double)) {
    Tensor out = Tensor::zeros(a.shape());
    const double* pa = a.data();
    double* po = out.data();
    int64_t n = a.size();
    for (int64_t i = 0; i < n; ++i) po[i] = f(pa[i]);
    return out;
}

// ---------------------------------------------------------------- elementwise

Var add(const Var& a, const Var& b) {
    Tensor out = ew_binary(a.val(), b.val(), [](double x, double y) { return x + y; }, "add");
    return ag::make_op(std::move(out), {a, b},
                       [](const Var& g) { return std::vector<Var>{g, g}; }, "add");
}

Var sub(const Var& a, const Var& b) {
    Tensor out = ew_binary(a.val(), b.val(), [](double x, double y) { return x - y; }, "sub");
    return ag::make_op(std::move(out), {a, b},
                       [](const Var& g) { return std::vector<Var>{g, neg(g)}; }, "sub");
}

Var mul(const Var& a, const Var& b) {
    Tensor out = ew_binary(a.val(), b.val(), [](double x, double y) { return x * y; }, "mul");
    return ag::make_op(std::move(out), {a, b},
                       [a, b](const Var& g) { return std::vector<Var>{mul(g, b), mul(g, a)}; },
                       "mul");
}

Var div(const Var& a, const Var& b) {
    Tensor out = ew_binary(a.val(), b.val(), [](double x, double y) { return x / y; }, "div");
    return ag::make_op(
        std::move(out), {a, b},
        [a, b](const Var& g) {
            Var da = div(g, b);
            Var db = neg(div(mul(g, a), mul(b, b)));
            return std::vector<Var>{da, db};
        },
        "div");
}

Var adds(const Var& a, double s) {
    Tensor out = a.val().clone();
    double* p = out.data();
    for (int64_t i = 0; i < out.size(); ++i) p[i] += s;
    return ag::make_op(std::move(out), {a}, [](const Var& g) { return std::vector<Var>{g}; },
                       "adds");
}

Var muls(const Var& a, double s) {
    Tensor out = a.val().clone();
    double* p = out.data();
    for (int64_t i = 0; i < out.size(); ++i) p[i] *= s;
    return ag::make_op(std::move(out), {a},
                       [s](const Var& g) { return std::vector<Var>{muls(g, s)}; }, "muls");
}

Var neg(const Var& a) { return muls(a, -1.0); }

Var exp(const Var& a) {
    Tensor out = ew_unary(a.val(), [](double x) { return std::exp(x); });
    return ag::make_op(std::move(out), {a},
                       [a](const Var& g) { return std::vector<Var>{mul(g, exp(a))}; }, "exp");
}

Var log(const Var& a) {
    Tensor out = ew_unary(a.val(), [](double x) { return std::log(x); });
    return ag::make_op(std::move(out), {a},
                       [a](const Var& g) { return std::vector<Var>{div(g, a)}; }, "log");
}

Var sqrt(const Var& a) {
    Tensor out = ew_unary(a.val(), [](double x) { return std::sqrt(x); });
    return ag::make_op(
        std::move(out), {a},
        [a](const Var& g) { return std::vector<Var>{muls(div(g, sqrt(a)), 0.5)}; }, "sqrt");
}

Var leaky_relu(const Var& a, double slope) {
    const Tensor& x = a.val();
    Tensor out = Tensor::zeros(x.shape());
    Tensor mask = Tensor::zeros(x.shape());
    for (int64_t i = 0; i < x.size(); ++i) {
        double m = x[i] > 0.0 ? 1.0 : slope;
        mask[i] = m;
        out[i] = m * x[i];
    }
    return ag::make_op(std::move(out), {a},
                       [mask](const Var& g) { return std::vector<Var>{mul_const(g, mask)}; },
                       "leaky_relu");
}

Var relu(const Var& a) { return leaky_relu(a, 0.0); }

Var mul_const(const Var& a, const Tensor& c) {
    Tensor out = ew_binary(a.val(), c, [](double x, double y) { return x * y; }, "mul_const");
    return ag::make_op(std::move(out), {a},
                       [c](const Var& g) { return std::vector<Var>{mul_const(g, c)}; },
                       "mul_const");
}

// ---------------------------------------------------------------- shape ops

Var reshape(const Var& a, std::vector<int> shape) {
    std::vector<int> old_shape = a.val().shape();
    Tensor out = a.val().reshaped(std::move(shape));
    return ag::make_op(std::move(out), {a},
                       [old_shape](const Var& g) {
                           return std::vector<Var>{reshape(g, old_shape)};
                       },
                       "reshape");
}

Var broadcast_to(const Var& a, const std::vector<int>& shape) {
    const Tensor& x = a.val();
    if (x.dim() != static_cast<int>(shape.size()))
        throw ShapeError("broadcast_to: rank mismatch " + x.shape_str());
    std::vector<int> bcast_axes;
    for (int i = 0; i < x.dim(); ++i) {
        if (x.shape(i) == shape[static_cast<size_t>(i)]) continue;
        if (x.shape(i) != 1)
            throw ShapeError("broadcast_to: axis " + std::to_string(i) + " not expandable");
        bcast_axes.push_back(i);
    }
    if (bcast_axes.empty()) return a;

    Tensor out = Tensor::zeros(shape);
    int d = x.dim();
    std::vector<int64_t> xstr(static_cast<size_t>(d)), ostr(static_cast<size_t>(d));
    int64_t sx = 1, so = 1;
    for (int i = d - 1; i >= 0; --i) {
        xstr[static_cast<size_t>(i)] = sx;
        ostr[static_cast<size_t>(i)] = so;
        sx *= x.shape(i);
        so *= shape[static_cast<size_t>(i)];
    }
    const double* px = x.data();
    double* po = out.data();
    int64_t total = out.size();
    std::vector<int> idx(static_cast<size_t>(d), 0);
    for (int64_t o = 0; o < total; ++o) {
        int64_t xi = 0;
        int64_t rem = o;
        for (int i = 0; i < d; ++i) {
            int64_t ii = rem / ostr[static_cast<size_t>(i)];
            rem %= ostr[static_cast<size_t>(i)];
            xi += (x.shape(i) == 1 ? 0 : ii) * xstr[static_cast<size_t>(i)];
        }
        po[o] = px[xi];
    }
    return ag::make_op(std::move(out), {a},
                       [bcast_axes](const Var& g) {
                           return std::vector<Var>{reduce_sum(g, bcast_axes, true)};
                       },
                       "broadcast_to");
}

Var reduce_sum(const Var& a, std::vector<int> axes, bool keepdims) {
    const Tensor& x = a.val();
    std::sort(axes.begin(), axes.end());
    std::vector<bool> reduced(static_cast<size_t>(x.dim()), false);
    for (int ax : axes) {
        if (ax < 0 || ax >= x.dim()) throw ShapeError("reduce_sum: bad axis");
        reduced[static_cast<size_t>(ax)] = true;
    }
    std::vector<int> out_shape_keep(x.shape());
    for (int ax : axes) out_shape_keep[static_cast<size_t>(ax)] = 1;
    std::vector<int> out_shape;
    if (keepdims) {
        out_shape = out_shape_keep;
    } else {
        for (int i = 0; i < x.dim(); ++i)
            if (!reduced[static_cast<size_t>(i)]) out_shape.push_back(x.shape(i));
        if (out_shape.empty()) out_shape.push_back(1);
    }

    Tensor out = Tensor::zeros(out_shape_keep);
    int d = x.dim();
    std::vector<int64_t> xstr(static_cast<size_t>(d)), ostr(static_cast<size_t>(d));
    int64_t sx = 1, so = 1;
    for (int i = d - 1; i >= 0; --i) {
        xstr[static_cast<size_t>(i)] = sx;
        ostr[static_cast<size_t>(i)] = so;
        sx *= x.shape(i);
        so *= out_shape_keep[static_cast<size_t>(i)];
    }
    const double* px = x.data();
    double* po = out.data();
    int64_t total = x.size();
    for (int64_t xi = 0; xi < total; ++xi) {
        int64_t oi = 0;
        int64_t rem = xi;
        for (int i = 0; i < d; ++i) {
            int64_t ii = rem / xstr[static_cast<size_t>(i)];
            rem %= xstr[static_cast<size_t>(i)];
            oi += (reduced[static_cast<size_t>(i)] ? 0 : ii) * ostr[static_cast<size_t>(i)];
        }
        po[oi] += px[xi];
    }
    Tensor shaped = out.reshaped(out_shape);
    std::vector<int> in_shape = x.shape();
    return ag::make_op(std::move(shaped), {a},
                       [in_shape, out_shape_keep](const Var& g) {
                           Var gk = reshape(g, out_shape_keep);
                           return std::vector<Var>{broadcast_to(gk, in_shape)};
                       },
                       "reduce_sum");
}

Var transpose(const Var& a) {
    const Tensor& x = a.val();
    if (x.dim() != 2) throw ShapeError("transpose: expected 2-D");
    int m = x.shape(0), n = x.shape(1);
    Tensor out = Tensor::zeros({n, m});
    CMapM mx(x.data(), m, n);
    MapM mo(out.data(), n, m);
    mo = mx.transpose();
    return ag::make_op(std::move(out), {a},
                       [](const Var& g) { return std::vector<Var>{transpose(g)}; }, "transpose");
}

Var concat_ch(const std::vector<Var>& parts) {
    if (parts.empty()) throw ShapeError("concat_ch: empty");
    const Tensor& first = parts[0].val();
    require4(first, "concat_ch");
    int n = first.shape(0), h = first.shape(2), w = first.shape(3);
    int total_c = 0;
    for (const auto& p : parts) {
        require4(p.val(), "concat_ch");
        if (p.val().shape(0) != n || p.val().shape(2) != h || p.val().shape(3) != w)
            throw ShapeError("concat_ch: non-channel dims differ");
        total_c += p.val().shape(1);
    }
    Tensor out = Tensor::zeros({n, total_c, h, w});
    int64_t plane = static_cast<int64_t>(h) * w;
    int c_off = 0;
    std::vector<int> offsets;
    for (const auto& p : parts) {
        offsets.push_back(c_off);
        int pc = p.val().shape(1);
        for (int b = 0; b < n; ++b)
            std::memcpy(out.data() + ((static_cast<int64_t>(b) * total_c + c_off) * plane),
                        p.val().data() + (static_cast<int64_t>(b) * pc * plane),
                        static_cast<size_t>(pc * plane) * sizeof(double));
        c_off += pc;
    }
    std::vector<int> widths;
    for (const auto& p : parts) widths.push_back(p.val().shape(1));
    return ag::make_op(std::move(out), parts,
                       [offsets, widths](const Var& g) {
                           std::vector<Var> gs;
                           for (size_t i = 0; i < offsets.size(); ++i)
                               gs.push_back(slice_ch(g, offsets[i], widths[i]));
                           return gs;
                       },
                       "concat_ch");
}

Var slice_ch(const Var& a, int c0, int len) {
    const Tensor& x = a.val();
    require4(x, "slice_ch");
    int n = x.shape(0), c = x.shape(1), h = x.shape(2), w = x.shape(3);
    if (c0 < 0 || c0 + len > c) throw ShapeError("slice_ch: range out of bounds");
    Tensor out = Tensor::zeros({n, len, h, w});
    int64_t plane = static_cast<int64_t>(h) * w;
    for (int b = 0; b < n; ++b)
        std::memcpy(out.data() + static_cast<int64_t>(b) * len * plane,
                    x.data() + ((static_cast<int64_t>(b) * c + c0) * plane),
                    static_cast<size_t>(len * plane) * sizeof(double));
    return ag::make_op(std::move(out), {a},
                       [c0, c](const Var& g) { return std::vector<Var>{embed_ch(g, c0, c)}; },
                       "slice_ch");
}

Var embed_ch(const Var& a, int c0, int total_ch) {
    const Tensor& x = a.val();
    require4(x, "embed_ch");
    int n = x.shape(0), c = x.shape(1), h = x.shape(2), w = x.shape(3);
    if (c0 < 0 || c0 + c > total_ch) throw ShapeError("embed_ch: range out of bounds");
    Tensor out = Tensor::zeros({n, total_ch, h, w});
    int64_t plane = static_cast<int64_t>(h) * w;
    for (int b = 0; b < n; ++b)
        std::memcpy(out.data() + ((static_cast<int64_t>(b) * total_ch + c0) * plane),
                    x.data() + static_cast<int64_t>(b) * c * plane,
                    static_cast<size_t>(c * plane) * sizeof(double));
    return ag::make_op(std::move(out), {a},
                       [c0, c](const Var& g) { return std::vector<Var>{slice_ch(g, c0, c)}; },
                       "embed_ch");
}

// ---------------------------------------------------------------- matmul

Var matmul(const Var& a, const Var& b) {
    const Tensor& x = a.val();
    const Tensor& y = b.val();
    if (x.dim() != 2 || y.dim() != 2 || x.shape(1) != y.shape(0))
        throw ShapeError("matmul: incompatible " + x.shape_str() + " x " + y.shape_str());
    int m = x.shape(0), k = x.shape(1), n = y.shape(1);
    Tensor out = Tensor::zeros({m, n});
    CMapM mx(x.data(), m, k), my(y.data(), k, n);
    MapM mo(out.data(), m, n);
    mo.noalias() = mx * my;
    return ag::make_op(std::move(out), {a, b},
                       [a, b](const Var& g) {
                           Var da = matmul(g, transpose(b));
                           Var db = matmul(transpose(a), g);
                           return std::vector<Var>{da, db};
                       },
                       "matmul");
}

// ---------------------------------------------------------------- conv family

namespace {

struct ConvDims {
    int n, c, h, w, o, kh, kw, ho, wo, stride, pad;
};

ConvDims conv_dims(const Tensor& x, const Tensor& wt, int stride, int pad, const char* op) {
    require4(x, op);
    require4(wt, op);
    ConvDims d;
    d.n = x.shape(0);
    d.c = x.shape(1);
    d.h = x.shape(2);
    d.w = x.shape(3);
    d.o = wt.shape(0);
    d.kh = wt.shape(2);
    d.kw = wt.shape(3);
    d.stride = stride;
    d.pad = pad;
    if (wt.shape(1) != d.c)
        throw ShapeError(std::string(op) + ": weight in-channels " + wt.shape_str() +
                         " vs input " + x.shape_str());
    d.ho = (d.h + 2 * pad - d.kh) / stride + 1;
    d.wo = (d.w + 2 * pad - d.kw) / stride + 1;
    if (d.ho <= 0 || d.wo <= 0) throw ShapeError(std::string(op) + ": empty output");
    return d;
}

// scatter input patches into a (C*kh*kw, Ho*Wo) matrix
void im2col(const double* x, const ConvDims& d, double* cols) {
    int64_t q_count = static_cast<int64_t>(d.ho) * d.wo;
    for (int c = 0; c < d.c; ++c) {
        for (int ki = 0; ki < d.kh; ++ki) {
            for (int kj = 0; kj < d.kw; ++kj) {
                double* row = cols + ((static_cast<int64_t>(c) * d.kh + ki) * d.kw + kj) * q_count;
                for (int oh = 0; oh < d.ho; ++oh) {
                    int ih = oh * d.stride - d.pad + ki;
                    double* rp = row + static_cast<int64_t>(oh) * d.wo;
                    if (ih < 0 || ih >= d.h) {
                        std::fill(rp, rp + d.wo, 0.0);
                        continue;
                    }
                    const double* xrow = x + (static_cast<int64_t>(c) * d.h + ih) * d.w;
                    for (int ow = 0; ow < d.wo; ++ow) {
                        int iw = ow * d.stride - d.pad + kj;
                        rp[ow] = (iw >= 0 && iw < d.w) ? xrow[iw] : 0.0;
                    }
                }
            }
        }
    }
}

void col2im(const double* cols, const ConvDims& d, double* x) {
    int64_t q_count = static_cast<int64_t>(d.ho) * d.wo;
    for (int c = 0; c < d.c; ++c) {
        for (int ki = 0; ki < d.kh; ++ki) {
            for (int kj = 0; kj < d.kw; ++kj) {
                const double* row =
                    cols + ((static_cast<int64_t>(c) * d.kh + ki) * d.kw + kj) * q_count;
                for (int oh = 0; oh < d.ho; ++oh) {
                    int ih = oh * d.stride - d.pad + ki;
                    if (ih < 0 || ih >= d.h) continue;
                    double* xrow = x + (static_cast<int64_t>(c) * d.h + ih) * d.w;
                    const double* rp = row + static_cast<int64_t>(oh) * d.wo;
                    for (int ow = 0; ow < d.wo; ++ow) {
                        int iw = ow * d.stride - d.pad + kj;
                        if (iw >= 0 && iw < d.w) xrow[iw] += rp[ow];
                    }
                }
            }
        }
    }
}

}  // namespace

Var conv2d(const Var& x, const Var& w, int stride, int pad) {
    ConvDims d = conv_dims(x.val(), w.val(), stride, pad, "conv2d");
    Tensor out = Tensor::zeros({d.n, d.o, d.ho, d.wo});
    int64_t ckk = static_cast<int64_t>(d.c) * d.kh * d.kw;
    int64_t q = static_cast<int64_t>(d.ho) * d.wo;
    std::vector<double> cols(static_cast<size_t>(ckk * q));
    CMapM mw(w.val().data(), d.o, ckk);
    for (int b = 0; b < d.n; ++b) {
        im2col(x.val().data() + static_cast<int64_t>(b) * d.c * d.h * d.w, d, cols.data());
        CMapM mc(cols.data(), ckk, q);
        MapM mo(out.data() + static_cast<int64_t>(b) * d.o * q, d.o, q);
        mo.noalias() = mw * mc;
    }
    int in_h = d.h, in_w = d.w, kh = d.kh, kw = d.kw;
    return ag::make_op(std::move(out), {x, w},
                       [x, w, stride, pad, in_h, in_w, kh, kw](const Var& g) {
                           Var dx = conv2d_input_grad(g, w, stride, pad, in_h, in_w);
                           Var dw = conv2d_weight_grad(x, g, stride, pad, kh, kw);
                           return std::vector<Var>{dx, dw};
                       },
                       "conv2d");
}

Var conv2d_input_grad(const Var& g, const Var& w, int stride, int pad, int in_h, int in_w) {
    const Tensor& gt = g.val();
    const Tensor& wt = w.val();
    require4(gt, "conv2d_input_grad");
    require4(wt, "conv2d_input_grad");
    ConvDims d;
    d.n = gt.shape(0);
    d.o = gt.shape(1);
    d.ho = gt.shape(2);
    d.wo = gt.shape(3);
    d.c = wt.shape(1);
    d.kh = wt.shape(2);
    d.kw = wt.shape(3);
    d.h = in_h;
    d.w = in_w;
    d.stride = stride;
    d.pad = pad;
    if (wt.shape(0) != d.o) throw ShapeError("conv2d_input_grad: channel mismatch");
    if ((d.h + 2 * pad - d.kh) / stride + 1 != d.ho || (d.w + 2 * pad - d.kw) / stride + 1 != d.wo)
        throw ShapeError("conv2d_input_grad: geometry mismatch");

    Tensor out = Tensor::zeros({d.n, d.c, d.h, d.w});
    int64_t ckk = static_cast<int64_t>(d.c) * d.kh * d.kw;
    int64_t q = static_cast<int64_t>(d.ho) * d.wo;
    std::vector<double> cols(static_cast<size_t>(ckk * q));
    CMapM mw(wt.data(), d.o, ckk);
    for (int b = 0; b < d.n; ++b) {
        CMapM mg(gt.data() + static_cast<int64_t>(b) * d.o * q, d.o, q);
        MapM mc(cols.data(), ckk, q);
        mc.noalias() = mw.transpose() * mg;
        col2im(cols.data(), d, out.data() + static_cast<int64_t>(b) * d.c * d.h * d.w);
    }
    return ag::make_op(std::move(out), {g, w},
                       [g, w, stride, pad](const Var& gu) {
                           const auto& ws = w.val();
                           Var dg = conv2d(gu, w, stride, pad);
                           Var dw = conv2d_weight_grad(gu, g, stride, pad, ws.shape(2), ws.shape(3));
                           return std::vector<Var>{dg, dw};
                       },
                       "conv2d_input_grad");
}

Var conv2d_weight_grad(const Var& x, const Var& g, int stride, int pad, int kh, int kw) {
    const Tensor& xt = x.val();
    const Tensor& gt = g.val();
    require4(xt, "conv2d_weight_grad");
    require4(gt, "conv2d_weight_grad");
    ConvDims d;
    d.n = xt.shape(0);
    d.c = xt.shape(1);
    d.h = xt.shape(2);
    d.w = xt.shape(3);
    d.o = gt.shape(1);
    d.ho = gt.shape(2);
    d.wo = gt.shape(3);
    d.kh = kh;
    d.kw = kw;
    d.stride = stride;
    d.pad = pad;
    if (gt.shape(0) != d.n) throw ShapeError("conv2d_weight_grad: batch mismatch");
    if ((d.h + 2 * pad - kh) / stride + 1 != d.ho || (d.w + 2 * pad - kw) / stride + 1 != d.wo)
        throw ShapeError("conv2d_weight_grad: geometry mismatch");

    Tensor out = Tensor::zeros({d.o, d.c, kh, kw});
    int64_t ckk = static_cast<int64_t>(d.c) * kh * kw;
    int64_t q = static_cast<int64_t>(d.ho) * d.wo;
    std::vector<double> cols(static_cast<size_t>(ckk * q));
    MapM mo(out.data(), d.o, ckk);
    for (int b = 0; b < d.n; ++b) {
        im2col(xt.data() + static_cast<int64_t>(b) * d.c * d.h * d.w, d, cols.data());
        CMapM mc(cols.data(), ckk, q);
        CMapM mg(gt.data() + static_cast<int64_t>(b) * d.o * q, d.o, q);
        mo.noalias() += mg * mc.transpose();
    }
    int in_h = d.h, in_w = d.w;
    return ag::make_op(std::move(out), {x, g},
                       [x, g, stride, pad, in_h, in_w](const Var& gw) {
                           Var dx = conv2d_input_grad(g, gw, stride, pad, in_h, in_w);
                           Var dg = conv2d(x, gw, stride, pad);
                           return std::vector<Var>{dx, dg};
                       },
                       "conv2d_weight_grad");
}

// ---------------------------------------------------------------- resampling

Var avg_pool2(const Var& a) {
    const Tensor& x = a.val();
    require4(x, "avg_pool2");
    int n = x.shape(0), c = x.shape(1), h = x.shape(2), w = x.shape(3);
    if (h % 2 || w % 2) throw ShapeError("avg_pool2: odd spatial size");
    Tensor out = Tensor::zeros({n, c, h / 2, w / 2});
    const double* px = x.data();
    double* po = out.data();
    int ho = h / 2, wo = w / 2;
    for (int64_t nc = 0; nc < static_cast<int64_t>(n) * c; ++nc) {
        const double* xp = px + nc * h * w;
        double* op = po + nc * ho * wo;
        for (int i = 0; i < ho; ++i)
            for (int j = 0; j < wo; ++j)
                op[i * wo + j] = 0.25 * (xp[(2 * i) * w + 2 * j] + xp[(2 * i) * w + 2 * j + 1] +
                                         xp[(2 * i + 1) * w + 2 * j] +
                                         xp[(2 * i + 1) * w + 2 * j + 1]);
    }
    return ag::make_op(std::move(out), {a},
                       [](const Var& g) { return std::vector<Var>{muls(upsample2(g), 0.25)}; },
                       "avg_pool2");
}

Var upsample2(const Var& a) {
    const Tensor& x = a.val();
    require4(x, "upsample2");
    int n = x.shape(0), c = x.shape(1), h = x.shape(2), w = x.shape(3);
    Tensor out = Tensor::zeros({n, c, h * 2, w * 2});
    const double* px = x.data();
    double* po = out.data();
    for (int64_t nc = 0; nc < static_cast<int64_t>(n) * c; ++nc) {
        const double* xp = px + nc * h * w;
        double* op = po + nc * 4 * h * w;
        for (int i = 0; i < h; ++i)
            for (int j = 0; j < w; ++j) {
                double v = xp[i * w + j];
                int64_t base = (2 * i) * (2 * w) + 2 * j;
                op[base] = v;
                op[base + 1] = v;
                op[base + 2 * w] = v;
                op[base + 2 * w + 1] = v;
            }
    }
    return ag::make_op(std::move(out), {a},
                       [](const Var& g) { return std::vector<Var>{muls(avg_pool2(g), 4.0)}; },
                       "upsample2");
}

// ---------------------------------------------------------------- composites

Var square(const Var& a) { return mul(a, a); }

Var abs(const Var& a) {
    Tensor sign = ew_unary(a.val(), [](double x) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); });
    return mul_const(a, sign);
}

Var softplus(const Var& a) {
    // relu(x) + log(1 + exp(-|x|)), numerically stable in both tails
    Var t = exp(neg(abs(a)));
    return add(relu(a), log(adds(t, 1.0)));
}

Var sigmoid(const Var& a) {
    // exp(-softplus(-x)) avoids overflow for large |x|
    return exp(neg(softplus(neg(a))));
}

Var sum_all(const Var& a) {
    std::vector<int> axes(static_cast<size_t>(a.val().dim()));
    for (int i = 0; i < a.val().dim(); ++i) axes[static_cast<size_t>(i)] = i;
    return reduce_sum(a, axes, false);
}

Var mean_all(const Var& a) { return muls(sum_all(a), 1.0 / static_cast<double>(a.val().size())); }

namespace {
// constant per-row max, detached; exact for softmax/logsumexp by shift invariance
Tensor row_max(const Tensor& x) {
    int n = x.shape(0), c = x.shape(1);
    Tensor m = Tensor::zeros({n, 1});
    for (int i = 0; i < n; ++i) {
        double mx = x[static_cast<int64_t>(i) * c];
        for (int j = 1; j < c; ++j) mx = std::max(mx, x[static_cast<int64_t>(i) * c + j]);
        m[i] = mx;
    }
    return m;
}
}  // namespace

Var logsumexp_rows(const Var& logits) {
    const Tensor& x = logits.val();
    if (x.dim() != 2) throw ShapeError("logsumexp_rows: expected (N,C)");
    int n = x.shape(0), c = x.shape(1);
    Var m = Var::leaf(row_max(x));
    Var shifted = sub(logits, broadcast_to(m, {n, c}));
    Var s = reduce_sum(exp(shifted), {1}, true);
    return add(log(s), m);
}

Var softmax_rows(const Var& logits) {
    const Tensor& x = logits.val();
    if (x.dim() != 2) throw ShapeError("softmax_rows: expected (N,C)");
    int n = x.shape(0), c = x.shape(1);
    Var m = Var::leaf(row_max(x));
    Var e = exp(sub(logits, broadcast_to(m, {n, c})));
    Var s = reduce_sum(e, {1}, true);
    return div(e, broadcast_to(s, {n, c}));
}

Var l2_norm_rows(const Var& a) {
    const Tensor& x = a.val();
    int n = x.shape(0);
    int64_t rest = x.size() / n;
    Var flat = reshape(a, {n, static_cast<int>(rest)});
    Var ss = reduce_sum(square(flat), {1}, false);
    return sqrt(adds(ss, 1e-24));
}

Var mse_loss(const Var& a, const Var& b) { return mean_all(square(sub(a, b))); }

Var ce_with_logits(const Var& logits, const Tensor& onehot, const Tensor* class_weights) {
    const Tensor& x = logits.val();
    if (x.dim() != 2) throw ShapeError("ce_with_logits: expected (N,C)");
    check_same_shape(x, onehot, "ce_with_logits");
    int n = x.shape(0), c = x.shape(1);
    Var lse = logsumexp_rows(logits);                                        // (N,1)
    Var sel = reduce_sum(mul_const(logits, onehot), {1}, true);              // (N,1)
    Var per_sample = sub(lse, sel);                                          // (N,1)
    if (class_weights) {
        if (class_weights->size() != c) throw ShapeError("ce_with_logits: weight length != C");
        Tensor wv = Tensor::zeros({n, 1});
        for (int i = 0; i < n; ++i) {
            double acc = 0.0;
            for (int j = 0; j < c; ++j)
                acc += onehot[static_cast<int64_t>(i) * c + j] * (*class_weights)[j];
            wv[i] = acc;
        }
        per_sample = mul_const(per_sample, wv);
    }
    return mean_all(per_sample);
}

Var bce_with_logits(const Var& logits, const Tensor& targets, const Tensor* class_weights) {
    const Tensor& x = logits.val();
    check_same_shape(x, targets, "bce_with_logits");
    // softplus(x) - x*y, elementwise
    Var per = sub(softplus(logits), mul_const(logits, targets));
    if (class_weights) {
        if (x.dim() != 2 || class_weights->size() != x.shape(1))
            throw ShapeError("bce_with_logits: weight length != C");
        int n = x.shape(0), c = x.shape(1);
        Tensor wm = Tensor::zeros({n, c});
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < c; ++j) {
                // weight positives by the class weight, negatives by 1
                double y = targets[static_cast<int64_t>(i) * c + j];
                wm[static_cast<int64_t>(i) * c + j] = y * (*class_weights)[j] + (1.0 - y);
            }
        per = mul_const(per, wm);
    }
    return mean_all(per);
}

}  // namespace caal::ops
