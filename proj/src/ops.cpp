#include "bpim/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <type_traits>
#include <vector>

namespace bpim::ops {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using CMapMat = Eigen::Map<const RowMat>;

// Gradient buffer of input i, or nullptr if that input takes no gradient.
Tensor* input_grad(Node& self, std::size_t i) {
    if (i >= self.inputs.size()) return nullptr;
    Node* in = self.inputs[i].get();
    if (!in || !in->requires_grad) return nullptr;
    return &in->grad_buffer();
}

void require_same(const Var& a, const Var& b, const char* op) {
    require(a.shape() == b.shape(),
            std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

void require_rank(const Var& x, int r, const char* op) {
    require(x.value().rank() == r,
            std::string(op) + ": expected rank " + std::to_string(r) + ", got " + shape_str(x.shape()));
}

template <class F, class D>
Var unary(const Var& x, F f, D dfdx) {
    Tensor out(x.shape());
    const auto in = x.value().data();
    auto o = out.data();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] = f(in[i]);
    return make_result(std::move(out), {x}, [dfdx](Node& self) {
        Tensor* gx = input_grad(self, 0);
        if (!gx) return;
        const auto xin = self.inputs[0]->value.data();
        const auto y = self.value.data();
        const auto g = self.grad.data();
        auto d = gx->data();
        for (std::size_t i = 0; i < d.size(); ++i) d[i] += g[i] * dfdx(xin[i], y[i]);
    });
}

double sigmoid_scalar(double v) {
    if (v >= 0) return 1.0 / (1.0 + std::exp(-v));
    const double e = std::exp(v);
    return e / (1.0 + e);
}

}  // namespace

Var add(const Var& a, const Var& b) {
    require_same(a, b, "add");
    Tensor out = a.value();
    out += b.value();
    return make_result(std::move(out), {a, b}, [](Node& self) {
        for (std::size_t i = 0; i < 2; ++i)
            if (Tensor* g = input_grad(self, i)) *g += self.grad;
    });
}

Var sub(const Var& a, const Var& b) {
    require_same(a, b, "sub");
    Tensor out = a.value();
    const auto bv = b.value().data();
    auto o = out.data();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] -= bv[i];
    return make_result(std::move(out), {a, b}, [](Node& self) {
        if (Tensor* g = input_grad(self, 0)) *g += self.grad;
        if (Tensor* g = input_grad(self, 1)) {
            auto d = g->data();
            const auto s = self.grad.data();
            for (std::size_t i = 0; i < d.size(); ++i) d[i] -= s[i];
        }
    });
}

Var mul(const Var& a, const Var& b) {
    require_same(a, b, "mul");
    Tensor out(a.shape());
    const auto av = a.value().data();
    const auto bv = b.value().data();
    auto o = out.data();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] = av[i] * bv[i];
    return make_result(std::move(out), {a, b}, [](Node& self) {
        const auto s = self.grad.data();
        const auto av = self.inputs[0]->value.data();
        const auto bv = self.inputs[1]->value.data();
        if (Tensor* g = input_grad(self, 0)) {
            auto d = g->data();
            for (std::size_t i = 0; i < d.size(); ++i) d[i] += s[i] * bv[i];
        }
        if (Tensor* g = input_grad(self, 1)) {
            auto d = g->data();
            for (std::size_t i = 0; i < d.size(); ++i) d[i] += s[i] * av[i];
        }
    });
}

Var div(const Var& a, const Var& b) {
    require_same(a, b, "div");
    Tensor out(a.shape());
    const auto av = a.value().data();
    const auto bv = b.value().data();
    auto o = out.data();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] = av[i] / bv[i];
    return make_result(std::move(out), {a, b}, [](Node& self) {
        const auto s = self.grad.data();
        const auto bv = self.inputs[1]->value.data();
        const auto y = self.value.data();
        if (Tensor* g = input_grad(self, 0)) {
            auto d = g->data();
            for (std::size_t i = 0; i < d.size(); ++i) d[i] += s[i] / bv[i];
        }
        if (Tensor* g = input_grad(self, 1)) {
            auto d = g->data();
            for (std::size_t i = 0; i < d.size(); ++i) d[i] -= s[i] * y[i] / bv[i];
        }
    });
}

Var scale(const Var& x, double s) {
    Tensor out = x.value();
    out *= s;
    return make_result(std::move(out), {x}, [s](Node& self) {
        if (Tensor* g = input_grad(self, 0)) {
            auto d = g->data();
            const auto src = self.grad.data();
            for (std::size_t i = 0; i < d.size(); ++i) d[i] += s * src[i];
        }
    });
}

Var mul_channel_broadcast(const Var& x, const Var& w) {
    const auto& xs = x.shape();
    const auto& ws = w.shape();
    require(xs.size() >= 2 && ws.size() == xs.size() && ws[0] == xs[0] && ws[1] == 1,
            "mul_channel_broadcast: incompatible shapes " + shape_str(xs) + " and " + shape_str(ws));
    for (std::size_t d = 2; d < xs.size(); ++d) require(xs[d] == ws[d], "mul_channel_broadcast: spatial mismatch");
    const std::int64_t n = xs[0], c = xs[1], inner = x.value().numel() / (n * c);
    Tensor out(xs);
    const double* xv = x.value().ptr();
    const double* wv = w.value().ptr();
    double* o = out.ptr();
    for (std::int64_t b = 0; b < n; ++b)
        for (std::int64_t ch = 0; ch < c; ++ch)
            for (std::int64_t i = 0; i < inner; ++i)
                o[(b * c + ch) * inner + i] = xv[(b * c + ch) * inner + i] * wv[b * inner + i];
    return make_result(std::move(out), {x, w}, [n, c, inner](Node& self) {
        const double* s = self.grad.ptr();
        const double* xv = self.inputs[0]->value.ptr();
        const double* wv = self.inputs[1]->value.ptr();
        Tensor* gx = input_grad(self, 0);
        Tensor* gw = input_grad(self, 1);
        for (std::int64_t b = 0; b < n; ++b)
            for (std::int64_t ch = 0; ch < c; ++ch)
                for (std::int64_t i = 0; i < inner; ++i) {
                    const std::int64_t k = (b * c + ch) * inner + i;
                    if (gx) gx->ptr()[k] += s[k] * wv[b * inner + i];
                    if (gw) gw->ptr()[b * inner + i] += s[k] * xv[k];
                }
    });
}

Var add_batch_broadcast(const Var& x, const Var& e) {
    const auto& xs = x.shape();
    const auto& es = e.shape();
    require(xs.size() == es.size() && es[0] == 1, "add_batch_broadcast: bad shapes");
    for (std::size_t d = 1; d < xs.size(); ++d) require(xs[d] == es[d], "add_batch_broadcast: shape mismatch");
    const std::int64_t n = xs[0], inner = e.value().numel();
    Tensor out = x.value();
    for (std::int64_t b = 0; b < n; ++b)
        for (std::int64_t i = 0; i < inner; ++i) out.ptr()[b * inner + i] += e.value().ptr()[i];
    return make_result(std::move(out), {x, e}, [n, inner](Node& self) {
        if (Tensor* g = input_grad(self, 0)) *g += self.grad;
        if (Tensor* g = input_grad(self, 1))
            for (std::int64_t b = 0; b < n; ++b)
                for (std::int64_t i = 0; i < inner; ++i) g->ptr()[i] += self.grad.ptr()[b * inner + i];
    });
}

Var sum(const Var& x) {
    Tensor out({1}, x.value().sum());
    return make_result(std::move(out), {x}, [](Node& self) {
        if (Tensor* g = input_grad(self, 0)) {
            const double s = self.grad[0];
            for (auto& v : g->data()) v += s;
        }
    });
}

Var silu(const Var& x) {
    return unary(
        x, [](double v) { return v * sigmoid_scalar(v); },
        [](double v, double) {
            const double s = sigmoid_scalar(v);
            return s * (1.0 + v * (1.0 - s));
        });
}

Var sigmoid(const Var& x) {
    return unary(x, sigmoid_scalar, [](double, double y) { return y * (1.0 - y); });
}

Var gelu(const Var& x) {
    return unary(
        x, [](double v) { return 0.5 * v * (1.0 + std::erf(v / std::numbers::sqrt2)); },
        [](double v, double) {
            const double cdf = 0.5 * (1.0 + std::erf(v / std::numbers::sqrt2));
            const double pdf = std::exp(-0.5 * v * v) / std::sqrt(2.0 * std::numbers::pi);
            return cdf + v * pdf;
        });
}

Var exp(const Var& x) {
    return unary(x, [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

Var abs(const Var& x) {
    return unary(
        x, [](double v) { return std::abs(v); }, [](double v, double) { return v > 0 ? 1.0 : (v < 0 ? -1.0 : 0.0); });
}

Var clamp_min(const Var& x, double lo) {
    return unary(
        x, [lo](double v) { return std::max(v, lo); }, [lo](double v, double) { return v > lo ? 1.0 : 0.0; });
}

Var reshape(const Var& x, Shape shape) {
    Tensor out = x.value().reshaped(std::move(shape));
    return make_result(std::move(out), {x}, [](Node& self) {
        if (Tensor* g = input_grad(self, 0)) {
            auto d = g->data();
            const auto s = self.grad.data();
            for (std::size_t i = 0; i < d.size(); ++i) d[i] += s[i];
        }
    });
}

Var concat(const std::vector<Var>& xs) {
    require(!xs.empty(), "concat: no inputs");
    const Shape& first = xs.front().shape();
    require(first.size() >= 2, "concat: rank must be >= 2");
    const std::int64_t n = first[0];
    std::int64_t inner = 1;
    for (std::size_t d = 2; d < first.size(); ++d) inner *= first[d];
    std::int64_t total_c = 0;
    std::vector<std::int64_t> chans;
    for (const auto& v : xs) {
        const Shape& s = v.shape();
        require(s.size() == first.size() && s[0] == n, "concat: batch/rank mismatch " + shape_str(s));
        for (std::size_t d = 2; d < s.size(); ++d)
            require(s[d] == first[d], "concat: trailing shape mismatch " + shape_str(s) + " vs " + shape_str(first));
        chans.push_back(s[1]);
        total_c += s[1];
    }
    Shape os = first;
    os[1] = total_c;
    Tensor out(os);
    std::int64_t c0 = 0;
    for (std::size_t k = 0; k < xs.size(); ++k) {
        const double* src = xs[k].value().ptr();
        for (std::int64_t b = 0; b < n; ++b)
            std::copy_n(src + b * chans[k] * inner, chans[k] * inner, out.ptr() + (b * total_c + c0) * inner);
        c0 += chans[k];
    }
    return make_result(std::move(out), xs, [chans, n, inner, total_c](Node& self) {
        std::int64_t c0 = 0;
        for (std::size_t k = 0; k < chans.size(); ++k) {
            if (Tensor* g = input_grad(self, k)) {
                for (std::int64_t b = 0; b < n; ++b) {
                    const double* src = self.grad.ptr() + (b * total_c + c0) * inner;
                    double* dst = g->ptr() + b * chans[k] * inner;
                    for (std::int64_t i = 0; i < chans[k] * inner; ++i) dst[i] += src[i];
                }
            }
            c0 += chans[k];
        }
    });
}

Var channel_shuffle(const Var& x) {
    const Shape& s = x.shape();
    require(s.size() >= 2 && s[1] % 2 == 0, "channel_shuffle: channel count must be even");
    const std::int64_t n = s[0], c = s[1], inner = x.value().numel() / (n * c);
    // Output channel k reads input channel src[k].
    std::vector<std::int64_t> src(static_cast<std::size_t>(c));
    for (std::int64_t k = 0; k < c / 2; ++k) {
        src[static_cast<std::size_t>(k)] = 2 * k;
        src[static_cast<std::size_t>(c / 2 + k)] = 2 * k + 1;
    }
    Tensor out(s);
    for (std::int64_t b = 0; b < n; ++b)
        for (std::int64_t k = 0; k < c; ++k)
            std::copy_n(x.value().ptr() + (b * c + src[static_cast<std::size_t>(k)]) * inner, inner,
                        out.ptr() + (b * c + k) * inner);
    return make_result(std::move(out), {x}, [src, n, c, inner](Node& self) {
        Tensor* g = input_grad(self, 0);
        if (!g) return;
        for (std::int64_t b = 0; b < n; ++b)
            for (std::int64_t k = 0; k < c; ++k) {
                const double* from = self.grad.ptr() + (b * c + k) * inner;
                double* to = g->ptr() + (b * c + src[static_cast<std::size_t>(k)]) * inner;
                for (std::int64_t i = 0; i < inner; ++i) to[i] += from[i];
            }
    });
}

namespace {

struct ConvGeom {
    std::int64_t n, c, h, w, o, kh, kw, oh, ow;
    int stride, pad, groups;
    std::int64_t cg() const { return c / groups; }
    std::int64_t og() const { return o / groups; }
    std::int64_t k() const { return cg() * kh * kw; }
    std::int64_t cols() const { return oh * ow; }
    // 1x1 stride-1 unpadded: the input plane block already is the column matrix.
    bool pointwise() const { return kh == 1 && kw == 1 && stride == 1 && pad == 0; }
};

// col[(ci*kh + ki)*kw + kj, y*ow + x] for one image and the channels of group grp.
void im2col(const double* x, const ConvGeom& g, int grp, double* col) {
    const std::int64_t ncols = g.cols();
    for (std::int64_t ci = 0; ci < g.cg(); ++ci) {
        const double* plane = x + (grp * g.cg() + ci) * g.h * g.w;
        for (std::int64_t ki = 0; ki < g.kh; ++ki)
            for (std::int64_t kj = 0; kj < g.kw; ++kj) {
                double* row = col + ((ci * g.kh + ki) * g.kw + kj) * ncols;
                for (std::int64_t y = 0; y < g.oh; ++y) {
                    const std::int64_t iy = y * g.stride - g.pad + ki;
                    double* dst = row + y * g.ow;
                    if (iy < 0 || iy >= g.h) {
                        std::fill_n(dst, g.ow, 0.0);
                        continue;
                    }
                    const double* src = plane + iy * g.w;
                    for (std::int64_t xo = 0; xo < g.ow; ++xo) {
                        const std::int64_t ix = xo * g.stride - g.pad + kj;
                        dst[xo] = (ix >= 0 && ix < g.w) ? src[ix] : 0.0;
                    }
                }
            }
    }
}

void col2im(const double* col, const ConvGeom& g, int grp, double* dx) {
    const std::int64_t ncols = g.cols();
    for (std::int64_t ci = 0; ci < g.cg(); ++ci) {
        double* plane = dx + (grp * g.cg() + ci) * g.h * g.w;
        for (std::int64_t ki = 0; ki < g.kh; ++ki)
            for (std::int64_t kj = 0; kj < g.kw; ++kj) {
                const double* row = col + ((ci * g.kh + ki) * g.kw + kj) * ncols;
                for (std::int64_t y = 0; y < g.oh; ++y) {
                    const std::int64_t iy = y * g.stride - g.pad + ki;
                    if (iy < 0 || iy >= g.h) continue;
                    const double* src = row + y * g.ow;
                    double* dst = plane + iy * g.w;
                    for (std::int64_t xo = 0; xo < g.ow; ++xo) {
                        const std::int64_t ix = xo * g.stride - g.pad + kj;
                        if (ix >= 0 && ix < g.w) dst[ix] += src[xo];
                    }
                }
            }
    }
}

}  // namespace

Var conv2d(const Var& x, const Var& w, const Var& bias, const Conv2dOptions& opt) {
    require_rank(x, 4, "conv2d input");
    require_rank(w, 4, "conv2d weight");
    ConvGeom g{};
    g.n = x.dim(0);
    g.c = x.dim(1);
    g.h = x.dim(2);
    g.w = x.dim(3);
    g.o = w.dim(0);
    g.kh = w.dim(2);
    g.kw = w.dim(3);
    g.stride = opt.stride;
    g.pad = opt.padding;
    g.groups = opt.groups;
    require(g.stride >= 1 && g.pad >= 0 && g.groups >= 1, "conv2d: invalid options");
    require(g.c % g.groups == 0 && g.o % g.groups == 0, "conv2d: channels not divisible by groups");
    require(w.dim(1) == g.cg(), "conv2d: weight expects " + std::to_string(w.dim(1) * g.groups) +
                                    " input channels, got " + std::to_string(g.c));
    g.oh = (g.h + 2 * g.pad - g.kh) / g.stride + 1;
    g.ow = (g.w + 2 * g.pad - g.kw) / g.stride + 1;
    require(g.oh > 0 && g.ow > 0, "conv2d: kernel larger than padded input");
    if (bias.defined()) require(bias.value().numel() == g.o, "conv2d: bias size mismatch");

    const std::int64_t ncols = g.cols(), in_plane = g.c * g.h * g.w, out_plane = g.o * ncols;
    FlopCounter::add(static_cast<double>(g.o) * g.k() * ncols * g.n);

    // Columns are rebuilt per image in backward instead of being kept alive.
    Tensor out({g.n, g.o, g.oh, g.ow});
    std::vector<double> col(g.pointwise() ? 0 : static_cast<std::size_t>(g.k() * ncols));
    for (std::int64_t b = 0; b < g.n; ++b)
        for (int grp = 0; grp < g.groups; ++grp) {
            const double* xb = x.value().ptr() + b * in_plane;
            const double* cp = xb + grp * g.cg() * g.h * g.w;
            if (!g.pointwise()) {
                im2col(xb, g, grp, col.data());
                cp = col.data();
            }
            MapMat om(out.ptr() + b * out_plane + grp * g.og() * ncols, g.og(), ncols);
            om.noalias() = CMapMat(w.value().ptr() + grp * g.og() * g.k(), g.og(), g.k()) * CMapMat(cp, g.k(), ncols);
            if (bias.defined())
                for (std::int64_t oc = 0; oc < g.og(); ++oc) om.row(oc).array() += bias.value()[grp * g.og() + oc];
        }

    return make_result(std::move(out), {x, w, bias}, [g](Node& self) {
        const std::int64_t ncols = g.cols(), in_plane = g.c * g.h * g.w, out_plane = g.o * ncols;
        Tensor* gx = input_grad(self, 0);
        Tensor* gw = input_grad(self, 1);
        Tensor* gb = input_grad(self, 2);
        const double* xv = self.inputs[0]->value.ptr();
        const double* wv = self.inputs[1]->value.ptr();
        if (gb)
            for (std::int64_t b = 0; b < g.n; ++b)
                for (std::int64_t ch = 0; ch < g.o; ++ch) {
                    const double* src = self.grad.ptr() + b * out_plane + ch * ncols;
                    double s = 0.0;
                    for (std::int64_t i = 0; i < ncols; ++i) s += src[i];
                    (*gb)[ch] += s;
                }
        if (!gw && !gx) return;
        std::vector<double> col(g.pointwise() ? 0 : static_cast<std::size_t>(g.k() * ncols));
        std::vector<double> dcol(g.pointwise() || !gx ? 0 : static_cast<std::size_t>(g.k() * ncols));
        for (std::int64_t b = 0; b < g.n; ++b)
            for (int grp = 0; grp < g.groups; ++grp) {
                CMapMat dm(self.grad.ptr() + b * out_plane + grp * g.og() * ncols, g.og(), ncols);
                CMapMat wm(wv + grp * g.og() * g.k(), g.og(), g.k());
                if (gw) {
                    const double* cp = xv + b * in_plane + grp * g.cg() * g.h * g.w;
                    if (!g.pointwise()) {
                        im2col(xv + b * in_plane, g, grp, col.data());
                        cp = col.data();
                    }
                    MapMat(gw->ptr() + grp * g.og() * g.k(), g.og(), g.k()).noalias() +=
                        dm * CMapMat(cp, g.k(), ncols).transpose();
                }
                if (gx) {
                    double* gxb = gx->ptr() + b * in_plane;
                    if (g.pointwise()) {
                        MapMat(gxb + grp * g.cg() * g.h * g.w, g.k(), ncols).noalias() += wm.transpose() * dm;
                    } else {
                        MapMat(dcol.data(), g.k(), ncols).noalias() = wm.transpose() * dm;
                        col2im(dcol.data(), g, grp, gxb);
                    }
                }
            }
    });
}

namespace {

struct Conv3dGeom {
    std::int64_t c, d, h, w, kd, kh, kw, od, oh, ow;
    int pd, ph, pw;
    std::int64_t k() const { return c * kd * kh * kw; }
    std::int64_t vol() const { return od * oh * ow; }
};

// Per-image columns: row (((ci*kd + kz)*kh + ki)*kw + kj), column (z*oh + y)*ow + x.
template <bool Scatter>
void im2col3d(std::conditional_t<Scatter, double*, const double*> x, const Conv3dGeom& g,
              std::conditional_t<Scatter, const double*, double*> col) {
    const std::int64_t vol = g.vol();
    std::int64_t r = 0;
    for (std::int64_t ci = 0; ci < g.c; ++ci)
        for (std::int64_t kz = 0; kz < g.kd; ++kz)
            for (std::int64_t ki = 0; ki < g.kh; ++ki)
                for (std::int64_t kj = 0; kj < g.kw; ++kj, ++r)
                    for (std::int64_t z = 0; z < g.od; ++z) {
                        const std::int64_t iz = z - g.pd + kz;
                        for (std::int64_t y = 0; y < g.oh; ++y) {
                            const std::int64_t iy = y - g.ph + ki;
                            const std::int64_t base = r * vol + (z * g.oh + y) * g.ow;
                            const bool row_ok = iz >= 0 && iz < g.d && iy >= 0 && iy < g.h;
                            for (std::int64_t xo = 0; xo < g.ow; ++xo) {
                                const std::int64_t ix = xo - g.pw + kj;
                                const bool ok = row_ok && ix >= 0 && ix < g.w;
                                if constexpr (Scatter) {
                                    if (ok) x[((ci * g.d + iz) * g.h + iy) * g.w + ix] += col[base + xo];
                                } else {
                                    col[base + xo] = ok ? x[((ci * g.d + iz) * g.h + iy) * g.w + ix] : 0.0;
                                }
                            }
                        }
                    }
}

}  // namespace

Var conv3d(const Var& x, const Var& w, const Var& bias, int pad_d, int pad_h, int pad_w) {
    require_rank(x, 5, "conv3d input");
    require_rank(w, 5, "conv3d weight");
    const std::int64_t n = x.dim(0), o = w.dim(0);
    Conv3dGeom g{x.dim(1), x.dim(2), x.dim(3), x.dim(4), w.dim(2), w.dim(3), w.dim(4), 0, 0, 0, pad_d, pad_h, pad_w};
    require(w.dim(1) == g.c, "conv3d: weight/input channel mismatch");
    if (bias.defined()) require(bias.value().numel() == o, "conv3d: bias size mismatch");
    g.od = g.d + 2 * pad_d - g.kd + 1;
    g.oh = g.h + 2 * pad_h - g.kh + 1;
    g.ow = g.w + 2 * pad_w - g.kw + 1;
    require(g.od > 0 && g.oh > 0 && g.ow > 0, "conv3d: kernel larger than padded input");
    const std::int64_t k = g.k(), vol = g.vol(), in_vol = g.c * g.d * g.h * g.w;
    FlopCounter::add(static_cast<double>(o) * k * vol * n);

    Tensor out({n, o, g.od, g.oh, g.ow});
    std::vector<double> col(static_cast<std::size_t>(k * vol));
    for (std::int64_t b = 0; b < n; ++b) {
        im2col3d<false>(x.value().ptr() + b * in_vol, g, col.data());
        MapMat om(out.ptr() + b * o * vol, o, vol);
        om.noalias() = CMapMat(w.value().ptr(), o, k) * CMapMat(col.data(), k, vol);
        if (bias.defined())
            for (std::int64_t oc = 0; oc < o; ++oc) om.row(oc).array() += bias.value()[oc];
    }
    return make_result(std::move(out), {x, w, bias}, [g, n, o](Node& self) {
        const std::int64_t k = g.k(), vol = g.vol(), in_vol = g.c * g.d * g.h * g.w;
        Tensor* gx = input_grad(self, 0);
        Tensor* gw = input_grad(self, 1);
        Tensor* gb = input_grad(self, 2);
        std::vector<double> col(static_cast<std::size_t>(k * vol));
        for (std::int64_t b = 0; b < n; ++b) {
            CMapMat dm(self.grad.ptr() + b * o * vol, o, vol);
            if (gb)
                for (std::int64_t oc = 0; oc < o; ++oc) (*gb)[oc] += dm.row(oc).sum();
            if (gw) {
                im2col3d<false>(self.inputs[0]->value.ptr() + b * in_vol, g, col.data());
                MapMat(gw->ptr(), o, k).noalias() += dm * CMapMat(col.data(), k, vol).transpose();
            }
            if (gx) {
                MapMat(col.data(), k, vol).noalias() = CMapMat(self.inputs[1]->value.ptr(), o, k).transpose() * dm;
                im2col3d<true>(gx->ptr() + b * in_vol, g, col.data());
            }
        }
    });
}

Var batch_norm(const Var& x, const Var& gamma, const Var& beta, RunningStats& stats, bool training,
               double momentum, double eps) {
    const Shape& s = x.shape();
    require(s.size() >= 2, "batch_norm: rank must be >= 2");
    const std::int64_t n = s[0], c = s[1], inner = x.value().numel() / (n * c), m = n * inner;
    require(gamma.value().numel() == c && beta.value().numel() == c, "batch_norm: affine size mismatch");
    if (stats.mean.empty()) {
        stats.mean = Tensor::zeros({c});
        stats.var = Tensor::ones({c});
    }
    Tensor mean({c}), invstd({c});
    const double* xv = x.value().ptr();
    for (std::int64_t ch = 0; ch < c; ++ch) {
        if (training) {
            double mu = 0.0;
            for (std::int64_t b = 0; b < n; ++b)
                for (std::int64_t i = 0; i < inner; ++i) mu += xv[(b * c + ch) * inner + i];
            mu /= static_cast<double>(m);
            double var = 0.0;
            for (std::int64_t b = 0; b < n; ++b)
                for (std::int64_t i = 0; i < inner; ++i) {
                    const double dv = xv[(b * c + ch) * inner + i] - mu;
                    var += dv * dv;
                }
            var /= static_cast<double>(m);
            mean[ch] = mu;
            invstd[ch] = 1.0 / std::sqrt(var + eps);
            const double unbiased = m > 1 ? var * static_cast<double>(m) / static_cast<double>(m - 1) : var;
            stats.mean[ch] = (1.0 - momentum) * stats.mean[ch] + momentum * mu;
            stats.var[ch] = (1.0 - momentum) * stats.var[ch] + momentum * unbiased;
        } else {
            mean[ch] = stats.mean[ch];
            invstd[ch] = 1.0 / std::sqrt(stats.var[ch] + eps);
        }
    }
    Tensor xhat(s), out(s);
    for (std::int64_t b = 0; b < n; ++b)
        for (std::int64_t ch = 0; ch < c; ++ch)
            for (std::int64_t i = 0; i < inner; ++i) {
                const std::int64_t k = (b * c + ch) * inner + i;
                xhat[k] = (xv[k] - mean[ch]) * invstd[ch];
                out[k] = gamma.value()[ch] * xhat[k] + beta.value()[ch];
            }
    return make_result(std::move(out), {x, gamma, beta},
                       [=, xhat = std::move(xhat), invstd = std::move(invstd)](Node& self) {
                           Tensor* gx = input_grad(self, 0);
                           Tensor* gg = input_grad(self, 1);
                           Tensor* gbt = input_grad(self, 2);
                           const double* dy = self.grad.ptr();
                           const double* gam = self.inputs[1]->value.ptr();
                           for (std::int64_t ch = 0; ch < c; ++ch) {
                               double sdy = 0.0, sdyx = 0.0;
                               for (std::int64_t b = 0; b < n; ++b)
                                   for (std::int64_t i = 0; i < inner; ++i) {
                                       const std::int64_t k = (b * c + ch) * inner + i;
                                       sdy += dy[k];
                                       sdyx += dy[k] * xhat[k];
                                   }
                               if (gg) (*gg)[ch] += sdyx;
                               if (gbt) (*gbt)[ch] += sdy;
                               if (!gx) continue;
                               const double scale = gam[ch] * invstd[ch];
                               for (std::int64_t b = 0; b < n; ++b)
                                   for (std::int64_t i = 0; i < inner; ++i) {
                                       const std::int64_t k = (b * c + ch) * inner + i;
                                       if (training)
                                           gx->ptr()[k] += scale * (dy[k] - sdy / static_cast<double>(m) -
                                                                    xhat[k] * sdyx / static_cast<double>(m));
                                       else
                                           gx->ptr()[k] += scale * dy[k];
                                   }
                           }
                       });
}

Var group_norm(const Var& x, int groups, const Var& gamma, const Var& beta, double eps) {
    const Shape& s = x.shape();
    require(s.size() >= 2, "group_norm: rank must be >= 2");
    const std::int64_t n = s[0], c = s[1], inner = x.value().numel() / (n * c);
    require(groups >= 1 && c % groups == 0, "group_norm: channels not divisible by groups");
    require(gamma.value().numel() == c && beta.value().numel() == c, "group_norm: affine size mismatch");
    const std::int64_t cpg = c / groups, m = cpg * inner;
    Tensor xhat(s), out(s), invstd({n, static_cast<std::int64_t>(groups)});
    const double* xv = x.value().ptr();
    for (std::int64_t b = 0; b < n; ++b)
        for (std::int64_t g = 0; g < groups; ++g) {
            const std::int64_t base = (b * c + g * cpg) * inner;
            double mu = 0.0;
            for (std::int64_t j = 0; j < m; ++j) mu += xv[base + j];
            mu /= static_cast<double>(m);
            double var = 0.0;
            for (std::int64_t j = 0; j < m; ++j) var += (xv[base + j] - mu) * (xv[base + j] - mu);
            var /= static_cast<double>(m);
            const double is = 1.0 / std::sqrt(var + eps);
            invstd[b * groups + g] = is;
            for (std::int64_t j = 0; j < m; ++j) {
                const std::int64_t ch = g * cpg + j / inner;
                xhat[base + j] = (xv[base + j] - mu) * is;
                out[base + j] = gamma.value()[ch] * xhat[base + j] + beta.value()[ch];
            }
        }
    return make_result(std::move(out), {x, gamma, beta},
                       [=, xhat = std::move(xhat), invstd = std::move(invstd)](Node& self) {
                           Tensor* gx = input_grad(self, 0);
                           Tensor* gg = input_grad(self, 1);
                           Tensor* gbt = input_grad(self, 2);
                           const double* dy = self.grad.ptr();
                           const double* gam = self.inputs[1]->value.ptr();
                           for (std::int64_t b = 0; b < n; ++b)
                               for (std::int64_t g = 0; g < groups; ++g) {
                                   const std::int64_t base = (b * c + g * cpg) * inner;
                                   double sd = 0.0, sdx = 0.0;
                                   for (std::int64_t j = 0; j < m; ++j) {
                                       const std::int64_t ch = g * cpg + j / inner;
                                       const double dxh = dy[base + j] * gam[ch];
                                       sd += dxh;
                                       sdx += dxh * xhat[base + j];
                                       if (gg) (*gg)[ch] += dy[base + j] * xhat[base + j];
                                       if (gbt) (*gbt)[ch] += dy[base + j];
                                   }
                                   if (!gx) continue;
                                   const double is = invstd[b * groups + g];
                                   for (std::int64_t j = 0; j < m; ++j) {
                                       const std::int64_t ch = g * cpg + j / inner;
                                       const double dxh = dy[base + j] * gam[ch];
                                       gx->ptr()[base + j] += is * (dxh - sd / static_cast<double>(m) -
                                                                    xhat[base + j] * sdx / static_cast<double>(m));
                                   }
                               }
                       });
}

Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps) {
    const Shape& s = x.shape();
    require(!s.empty(), "layer_norm: scalar input");
    const std::int64_t d = s.back(), rows = x.value().numel() / d;
    require(gamma.value().numel() == d && beta.value().numel() == d, "layer_norm: affine size mismatch");
    Tensor xhat(s), out(s), invstd({rows});
    const double* xv = x.value().ptr();
    for (std::int64_t r = 0; r < rows; ++r) {
        const double* row = xv + r * d;
        double mu = 0.0;
        for (std::int64_t j = 0; j < d; ++j) mu += row[j];
        mu /= static_cast<double>(d);
        double var = 0.0;
        for (std::int64_t j = 0; j < d; ++j) var += (row[j] - mu) * (row[j] - mu);
        var /= static_cast<double>(d);
        const double is = 1.0 / std::sqrt(var + eps);
        invstd[r] = is;
        for (std::int64_t j = 0; j < d; ++j) {
            xhat[r * d + j] = (row[j] - mu) * is;
            out[r * d + j] = gamma.value()[j] * xhat[r * d + j] + beta.value()[j];
        }
    }
    return make_result(std::move(out), {x, gamma, beta},
                       [=, xhat = std::move(xhat), invstd = std::move(invstd)](Node& self) {
                           Tensor* gx = input_grad(self, 0);
                           Tensor* gg = input_grad(self, 1);
                           Tensor* gbt = input_grad(self, 2);
                           const double* dy = self.grad.ptr();
                           const double* gam = self.inputs[1]->value.ptr();
                           for (std::int64_t r = 0; r < rows; ++r) {
                               double sd = 0.0, sdx = 0.0;
                               for (std::int64_t j = 0; j < d; ++j) {
                                   const double dxh = dy[r * d + j] * gam[j];
                                   sd += dxh;
                                   sdx += dxh * xhat[r * d + j];
                                   if (gg) (*gg)[j] += dy[r * d + j] * xhat[r * d + j];
                                   if (gbt) (*gbt)[j] += dy[r * d + j];
                               }
                               if (!gx) continue;
                               for (std::int64_t j = 0; j < d; ++j) {
                                   const double dxh = dy[r * d + j] * gam[j];
                                   gx->ptr()[r * d + j] += invstd[r] * (dxh - sd / static_cast<double>(d) -
                                                                        xhat[r * d + j] * sdx / static_cast<double>(d));
                               }
                           }
                       });
}

Var max_pool2d(const Var& x, int kernel, int stride, int padding) {
    require_rank(x, 4, "max_pool2d");
    const std::int64_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    const std::int64_t oh = (h + 2 * padding - kernel) / stride + 1, ow = (w + 2 * padding - kernel) / stride + 1;
    require(oh > 0 && ow > 0, "max_pool2d: window larger than input");
    Tensor out({n, c, oh, ow});
    std::vector<std::int64_t> arg(static_cast<std::size_t>(out.numel()));
    const double* xv = x.value().ptr();
    for (std::int64_t p = 0; p < n * c; ++p)
        for (std::int64_t y = 0; y < oh; ++y)
            for (std::int64_t xo = 0; xo < ow; ++xo) {
                double best = -std::numeric_limits<double>::infinity();
                std::int64_t bi = -1;
                for (int ki = 0; ki < kernel; ++ki) {
                    const std::int64_t iy = y * stride - padding + ki;
                    if (iy < 0 || iy >= h) continue;
                    for (int kj = 0; kj < kernel; ++kj) {
                        const std::int64_t ix = xo * stride - padding + kj;
                        if (ix < 0 || ix >= w) continue;
                        const std::int64_t idx = (p * h + iy) * w + ix;
                        if (bi < 0 || xv[idx] > best) {
                            best = xv[idx];
                            bi = idx;
                        }
                    }
                }
                const std::int64_t o = (p * oh + y) * ow + xo;
                out[o] = best;
                arg[static_cast<std::size_t>(o)] = bi;
            }
    return make_result(std::move(out), {x}, [arg = std::move(arg)](Node& self) {
        if (Tensor* g = input_grad(self, 0))
            for (std::size_t o = 0; o < arg.size(); ++o) g->ptr()[arg[o]] += self.grad.ptr()[o];
    });
}

Var avg_pool2d(const Var& x, int kernel, int stride) {
    require_rank(x, 4, "avg_pool2d");
    const std::int64_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    const std::int64_t oh = (h - kernel) / stride + 1, ow = (w - kernel) / stride + 1;
    require(oh > 0 && ow > 0, "avg_pool2d: window larger than input");
    const double inv = 1.0 / (kernel * kernel);
    Tensor out({n, c, oh, ow});
    const double* xv = x.value().ptr();
    for (std::int64_t p = 0; p < n * c; ++p)
        for (std::int64_t y = 0; y < oh; ++y)
            for (std::int64_t xo = 0; xo < ow; ++xo) {
                double s = 0.0;
                for (int ki = 0; ki < kernel; ++ki)
                    for (int kj = 0; kj < kernel; ++kj) s += xv[(p * h + y * stride + ki) * w + xo * stride + kj];
                out[(p * oh + y) * ow + xo] = s * inv;
            }
    return make_result(std::move(out), {x}, [=](Node& self) {
        Tensor* g = input_grad(self, 0);
        if (!g) return;
        for (std::int64_t p = 0; p < n * c; ++p)
            for (std::int64_t y = 0; y < oh; ++y)
                for (std::int64_t xo = 0; xo < ow; ++xo) {
                    const double gv = self.grad[(p * oh + y) * ow + xo] * inv;
                    for (int ki = 0; ki < kernel; ++ki)
                        for (int kj = 0; kj < kernel; ++kj) g->ptr()[(p * h + y * stride + ki) * w + xo * stride + kj] += gv;
                }
    });
}

Var upsample_nearest(const Var& x, int factor) {
    require_rank(x, 4, "upsample_nearest");
    require(factor >= 1, "upsample_nearest: factor must be >= 1");
    if (factor == 1) return x;
    const std::int64_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3), oh = h * factor, ow = w * factor;
    Tensor out({n, c, oh, ow});
    const double* xv = x.value().ptr();
    for (std::int64_t p = 0; p < n * c; ++p)
        for (std::int64_t y = 0; y < oh; ++y)
            for (std::int64_t xo = 0; xo < ow; ++xo) out[(p * oh + y) * ow + xo] = xv[(p * h + y / factor) * w + xo / factor];
    return make_result(std::move(out), {x}, [=](Node& self) {
        Tensor* g = input_grad(self, 0);
        if (!g) return;
        for (std::int64_t p = 0; p < n * c; ++p)
            for (std::int64_t y = 0; y < oh; ++y)
                for (std::int64_t xo = 0; xo < ow; ++xo)
                    g->ptr()[(p * h + y / factor) * w + xo / factor] += self.grad[(p * oh + y) * ow + xo];
    });
}

Var resize_nearest(const Var& x, std::int64_t oh, std::int64_t ow) {
    require_rank(x, 4, "resize_nearest");
    require(oh > 0 && ow > 0, "resize_nearest: target size must be positive");
    const std::int64_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    if (oh == h && ow == w) return x;
    // Source index floor(dst * in / out), the usual nearest-neighbour convention.
    std::vector<std::int64_t> sy(static_cast<std::size_t>(oh)), sx(static_cast<std::size_t>(ow));
    for (std::int64_t y = 0; y < oh; ++y) sy[static_cast<std::size_t>(y)] = y * h / oh;
    for (std::int64_t xo = 0; xo < ow; ++xo) sx[static_cast<std::size_t>(xo)] = xo * w / ow;
    Tensor out({n, c, oh, ow});
    const double* xv = x.value().ptr();
    for (std::int64_t p = 0; p < n * c; ++p)
        for (std::int64_t y = 0; y < oh; ++y)
            for (std::int64_t xo = 0; xo < ow; ++xo)
                out[(p * oh + y) * ow + xo] = xv[(p * h + sy[static_cast<std::size_t>(y)]) * w + sx[static_cast<std::size_t>(xo)]];
    return make_result(std::move(out), {x}, [=](Node& self) {
        Tensor* g = input_grad(self, 0);
        if (!g) return;
        for (std::int64_t p = 0; p < n * c; ++p)
            for (std::int64_t y = 0; y < oh; ++y)
                for (std::int64_t xo = 0; xo < ow; ++xo)
                    g->ptr()[(p * h + sy[static_cast<std::size_t>(y)]) * w + sx[static_cast<std::size_t>(xo)]] +=
                        self.grad[(p * oh + y) * ow + xo];
    });
}

Var stack_depth(const std::vector<Var>& xs) {
    require(!xs.empty(), "stack_depth: no inputs");
    const Shape& s0 = xs.front().shape();
    require(s0.size() == 4, "stack_depth: inputs must be rank 4");
    for (const auto& v : xs) require(v.shape() == s0, "stack_depth: input shapes differ");
    const std::int64_t n = s0[0], c = s0[1], hw = s0[2] * s0[3], depth = static_cast<std::int64_t>(xs.size());
    Tensor out({n, c, depth, s0[2], s0[3]});
    for (std::int64_t k = 0; k < depth; ++k)
        for (std::int64_t p = 0; p < n * c; ++p)
            std::copy_n(xs[static_cast<std::size_t>(k)].value().ptr() + p * hw, hw, out.ptr() + (p * depth + k) * hw);
    return make_result(std::move(out), xs, [=](Node& self) {
        for (std::int64_t k = 0; k < depth; ++k)
            if (Tensor* g = input_grad(self, static_cast<std::size_t>(k)))
                for (std::int64_t p = 0; p < n * c; ++p)
                    for (std::int64_t i = 0; i < hw; ++i) g->ptr()[p * hw + i] += self.grad[(p * depth + k) * hw + i];
    });
}

Var max_over_depth(const Var& x) {
    require_rank(x, 5, "max_over_depth");
    const std::int64_t n = x.dim(0), c = x.dim(1), depth = x.dim(2), hw = x.dim(3) * x.dim(4);
    Tensor out({n, c, x.dim(3), x.dim(4)});
    std::vector<std::int64_t> arg(static_cast<std::size_t>(out.numel()));
    const double* xv = x.value().ptr();
    for (std::int64_t p = 0; p < n * c; ++p)
        for (std::int64_t i = 0; i < hw; ++i) {
            std::int64_t bi = p * depth * hw + i;
            for (std::int64_t k = 1; k < depth; ++k) {
                const std::int64_t idx = (p * depth + k) * hw + i;
                if (xv[idx] > xv[bi]) bi = idx;
            }
            out[p * hw + i] = xv[bi];
            arg[static_cast<std::size_t>(p * hw + i)] = bi;
        }
    return make_result(std::move(out), {x}, [arg = std::move(arg)](Node& self) {
        if (Tensor* g = input_grad(self, 0))
            for (std::size_t o = 0; o < arg.size(); ++o) g->ptr()[arg[o]] += self.grad.ptr()[o];
    });
}

Var flatten_tokens(const Var& x) {
    require_rank(x, 4, "flatten_tokens");
    const std::int64_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
    Tensor out({n, hw, c});
    for (std::int64_t b = 0; b < n; ++b)
        for (std::int64_t ch = 0; ch < c; ++ch)
            for (std::int64_t t = 0; t < hw; ++t) out[(b * hw + t) * c + ch] = x.value()[(b * c + ch) * hw + t];
    return make_result(std::move(out), {x}, [=](Node& self) {
        if (Tensor* g = input_grad(self, 0))
            for (std::int64_t b = 0; b < n; ++b)
                for (std::int64_t ch = 0; ch < c; ++ch)
                    for (std::int64_t t = 0; t < hw; ++t) g->ptr()[(b * c + ch) * hw + t] += self.grad[(b * hw + t) * c + ch];
    });
}

Var unflatten_tokens(const Var& t, std::int64_t h, std::int64_t w) {
    require_rank(t, 3, "unflatten_tokens");
    const std::int64_t n = t.dim(0), hw = t.dim(1), c = t.dim(2);
    require(hw == h * w, "unflatten_tokens: token count does not match h*w");
    Tensor out({n, c, h, w});
    for (std::int64_t b = 0; b < n; ++b)
        for (std::int64_t ch = 0; ch < c; ++ch)
            for (std::int64_t k = 0; k < hw; ++k) out[(b * c + ch) * hw + k] = t.value()[(b * hw + k) * c + ch];
    return make_result(std::move(out), {t}, [=](Node& self) {
        if (Tensor* g = input_grad(self, 0))
            for (std::int64_t b = 0; b < n; ++b)
                for (std::int64_t ch = 0; ch < c; ++ch)
                    for (std::int64_t k = 0; k < hw; ++k) g->ptr()[(b * hw + k) * c + ch] += self.grad[(b * c + ch) * hw + k];
    });
}

Var linear(const Var& x, const Var& w, const Var& bias) {
    require_rank(w, 2, "linear weight");
    const std::int64_t in = w.dim(1), outd = w.dim(0);
    require(x.shape().back() == in, "linear: input feature size mismatch " + shape_str(x.shape()));
    if (bias.defined()) require(bias.value().numel() == outd, "linear: bias size mismatch");
    const std::int64_t rows = x.value().numel() / in;
    FlopCounter::add(static_cast<double>(rows) * in * outd);
    Shape os = x.shape();
    os.back() = outd;
    Tensor out(os);
    MapMat om(out.ptr(), rows, outd);
    om.noalias() = CMapMat(x.value().ptr(), rows, in) * CMapMat(w.value().ptr(), outd, in).transpose();
    if (bias.defined())
        for (std::int64_t r = 0; r < rows; ++r)
            for (std::int64_t j = 0; j < outd; ++j) out[r * outd + j] += bias.value()[j];
    return make_result(std::move(out), {x, w, bias}, [=](Node& self) {
        CMapMat dy(self.grad.ptr(), rows, outd);
        if (Tensor* g = input_grad(self, 0))
            MapMat(g->ptr(), rows, in).noalias() += dy * CMapMat(self.inputs[1]->value.ptr(), outd, in);
        if (Tensor* g = input_grad(self, 1))
            MapMat(g->ptr(), outd, in).noalias() += dy.transpose() * CMapMat(self.inputs[0]->value.ptr(), rows, in);
        if (Tensor* g = input_grad(self, 2))
            for (std::int64_t r = 0; r < rows; ++r)
                for (std::int64_t j = 0; j < outd; ++j) (*g)[j] += self.grad[r * outd + j];
    });
}

Var matmul(const Var& a, const Var& b) {
    require_rank(a, 3, "matmul lhs");
    require_rank(b, 3, "matmul rhs");
    const std::int64_t batch = a.dim(0), m = a.dim(1), k = a.dim(2), nn = b.dim(2);
    require(b.dim(0) == batch && b.dim(1) == k, "matmul: shape mismatch " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    FlopCounter::add(static_cast<double>(batch) * m * k * nn);
    Tensor out({batch, m, nn});
    for (std::int64_t i = 0; i < batch; ++i)
        MapMat(out.ptr() + i * m * nn, m, nn).noalias() =
            CMapMat(a.value().ptr() + i * m * k, m, k) * CMapMat(b.value().ptr() + i * k * nn, k, nn);
    return make_result(std::move(out), {a, b}, [=](Node& self) {
        Tensor* ga = input_grad(self, 0);
        Tensor* gb = input_grad(self, 1);
        for (std::int64_t i = 0; i < batch; ++i) {
            CMapMat dy(self.grad.ptr() + i * m * nn, m, nn);
            if (ga)
                MapMat(ga->ptr() + i * m * k, m, k).noalias() +=
                    dy * CMapMat(self.inputs[1]->value.ptr() + i * k * nn, k, nn).transpose();
            if (gb)
                MapMat(gb->ptr() + i * k * nn, k, nn).noalias() +=
                    CMapMat(self.inputs[0]->value.ptr() + i * m * k, m, k).transpose() * dy;
        }
    });
}

Var transpose_last2(const Var& x) {
    require_rank(x, 3, "transpose_last2");
    const std::int64_t batch = x.dim(0), m = x.dim(1), nn = x.dim(2);
    Tensor out({batch, nn, m});
    for (std::int64_t i = 0; i < batch; ++i)
        MapMat(out.ptr() + i * m * nn, nn, m) = CMapMat(x.value().ptr() + i * m * nn, m, nn).transpose();
    return make_result(std::move(out), {x}, [=](Node& self) {
        if (Tensor* g = input_grad(self, 0))
            for (std::int64_t i = 0; i < batch; ++i)
                MapMat(g->ptr() + i * m * nn, m, nn) += CMapMat(self.grad.ptr() + i * m * nn, nn, m).transpose();
    });
}

Var softmax_last(const Var& x) {
    const std::int64_t d = x.shape().back(), rows = x.value().numel() / d;
    Tensor out(x.shape());
    for (std::int64_t r = 0; r < rows; ++r) {
        const double* in = x.value().ptr() + r * d;
        double* o = out.ptr() + r * d;
        const double mx = *std::max_element(in, in + d);
        double s = 0.0;
        for (std::int64_t j = 0; j < d; ++j) s += (o[j] = std::exp(in[j] - mx));
        for (std::int64_t j = 0; j < d; ++j) o[j] /= s;
    }
    return make_result(std::move(out), {x}, [=](Node& self) {
        Tensor* g = input_grad(self, 0);
        if (!g) return;
        for (std::int64_t r = 0; r < rows; ++r) {
            const double* y = self.value.ptr() + r * d;
            const double* dy = self.grad.ptr() + r * d;
            double dot = 0.0;
            for (std::int64_t j = 0; j < d; ++j) dot += dy[j] * y[j];
            for (std::int64_t j = 0; j < d; ++j) g->ptr()[r * d + j] += y[j] * (dy[j] - dot);
        }
    });
}

Var split_heads(const Var& x, int heads) {
    require_rank(x, 3, "split_heads");
    const std::int64_t n = x.dim(0), t = x.dim(1), c = x.dim(2);
    require(heads >= 1 && c % heads == 0, "split_heads: model dim not divisible by head count");
    const std::int64_t d = c / heads;
    Tensor out({n * heads, t, d});
    for (std::int64_t b = 0; b < n; ++b)
        for (std::int64_t hh = 0; hh < heads; ++hh)
            for (std::int64_t k = 0; k < t; ++k)
                std::copy_n(x.value().ptr() + (b * t + k) * c + hh * d, d, out.ptr() + ((b * heads + hh) * t + k) * d);
    return make_result(std::move(out), {x}, [=](Node& self) {
        if (Tensor* g = input_grad(self, 0))
            for (std::int64_t b = 0; b < n; ++b)
                for (std::int64_t hh = 0; hh < heads; ++hh)
                    for (std::int64_t k = 0; k < t; ++k)
                        for (std::int64_t j = 0; j < d; ++j)
                            g->ptr()[(b * t + k) * c + hh * d + j] += self.grad[((b * heads + hh) * t + k) * d + j];
    });
}

Var merge_heads(const Var& x, int heads) {
    require_rank(x, 3, "merge_heads");
    require(heads >= 1 && x.dim(0) % heads == 0, "merge_heads: batch not divisible by head count");
    const std::int64_t n = x.dim(0) / heads, t = x.dim(1), d = x.dim(2), c = d * heads;
    Tensor out({n, t, c});
    for (std::int64_t b = 0; b < n; ++b)
        for (std::int64_t hh = 0; hh < heads; ++hh)
            for (std::int64_t k = 0; k < t; ++k)
                std::copy_n(x.value().ptr() + ((b * heads + hh) * t + k) * d, d, out.ptr() + (b * t + k) * c + hh * d);
    return make_result(std::move(out), {x}, [=](Node& self) {
        if (Tensor* g = input_grad(self, 0))
            for (std::int64_t b = 0; b < n; ++b)
                for (std::int64_t hh = 0; hh < heads; ++hh)
                    for (std::int64_t k = 0; k < t; ++k)
                        for (std::int64_t j = 0; j < d; ++j)
                            g->ptr()[((b * heads + hh) * t + k) * d + j] += self.grad[(b * t + k) * c + hh * d + j];
    });
}

}  // namespace bpim::ops
