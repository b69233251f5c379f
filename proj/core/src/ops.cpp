#include "rdarts/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <string>

namespace rdarts::ops {

namespace {

// Maps every flat index of `out` to the flat index of a broadcast operand.
struct Broadcast {
    bool same = false;
    bool scalar = false;
    std::vector<std::size_t> index;
};

Broadcast make_broadcast(const Shape& out, const Shape& b)
{
    Broadcast bc;
    if (out == b) {
        bc.same = true;
        return bc;
    }
    if (shape_numel(b) == 1) {
        bc.scalar = true;
        return bc;
    }
    if (b.size() > out.size())
        throw ShapeError("cannot broadcast " + shape_str(b) + " against " + shape_str(out));
    const std::size_t off = out.size() - b.size();
    std::vector<std::size_t> bstride(out.size(), 0);
    std::size_t s = 1;
    for (std::size_t i = b.size(); i-- > 0;) {
        const std::size_t ax = i + off;
        if (b[i] == out[ax]) {
            bstride[ax] = s;
        } else if (b[i] != 1) {
            throw ShapeError("cannot broadcast " + shape_str(b) + " against " + shape_str(out));
        }
        s *= b[i];
    }
    const std::size_t n = shape_numel(out);
    bc.index.resize(n);
    std::vector<std::size_t> idx(out.size(), 0);
    std::size_t bi = 0;
    for (std::size_t k = 0; k < n; ++k) {
        bc.index[k] = bi;
        for (std::size_t ax = out.size(); ax-- > 0;) {
            ++idx[ax];
            bi += bstride[ax];
            if (idx[ax] < out[ax]) break;
            bi -= bstride[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    return bc;
}

inline std::size_t bidx(const Broadcast& bc, std::size_t k)
{
    return bc.same ? k : (bc.scalar ? 0 : bc.index[k]);
}

void accumulate(Tensor* dst, const Tensor& src)
{
    if (!dst) return;
    auto d = dst->data();
    auto s = src.data();
    for (std::size_t i = 0; i < d.size(); ++i) d[i] += s[i];
}

struct Dims4 {
    std::size_t b, c, h, w;
};

Dims4 dims4(const Shape& s, const char* what)
{
    if (s.size() == 4) return {s[0], s[1], s[2], s[3]};
    if (s.size() == 3) return {1, s[0], s[1], s[2]};
    throw ShapeError(std::string(what) + " expects a [B x C x H x W] or [C x H x W] input, got " +
                     shape_str(s));
}

template <class Fwd, class Bwd>
Var unary(Var a, Fwd fwd, Bwd dfdx_from_xy)
{
    Tensor out(a.shape());
    auto x = a.value().data();
    auto y = out.data();
    for (std::size_t i = 0; i < x.size(); ++i) y[i] = fwd(x[i]);
    return a.tape().record(std::move(out), {a}, [dfdx_from_xy](const BackwardArgs& args) {
        if (!args.in_grads[0]) return;
        auto g = args.out_grad.data();
        auto x = args.in_values[0]->data();
        auto y = args.out_value.data();
        auto dx = args.in_grads[0]->data();
        for (std::size_t i = 0; i < g.size(); ++i) dx[i] += g[i] * dfdx_from_xy(x[i], y[i]);
    });
}

} // namespace

Var elementwise(ElementwiseKind kind, Var a, Var b)
{
    // the larger operand defines the output shape for commutative ops
    if (kind != ElementwiseKind::sub && b.size() > a.size()) std::swap(a, b);

    auto bc = std::make_shared<Broadcast>(make_broadcast(a.shape(), b.shape()));
    const auto x = a.value().data();
    const auto y = b.value().data();
    Tensor out(a.shape());
    auto o = out.data();
    switch (kind) {
    case ElementwiseKind::add:
        for (std::size_t k = 0; k < o.size(); ++k) o[k] = x[k] + y[bidx(*bc, k)];
        break;
    case ElementwiseKind::sub:
        for (std::size_t k = 0; k < o.size(); ++k) o[k] = x[k] - y[bidx(*bc, k)];
        break;
    case ElementwiseKind::mul:
        for (std::size_t k = 0; k < o.size(); ++k) o[k] = x[k] * y[bidx(*bc, k)];
        break;
    }
    return a.tape().record(std::move(out), {a, b}, [kind, bc](const BackwardArgs& args) {
        auto g = args.out_grad.data();
        auto x = args.in_values[0]->data();
        auto y = args.in_values[1]->data();
        if (auto* da = args.in_grads[0]) {
            auto d = da->data();
            if (kind == ElementwiseKind::mul)
                for (std::size_t k = 0; k < g.size(); ++k) d[k] += g[k] * y[bidx(*bc, k)];
            else
                for (std::size_t k = 0; k < g.size(); ++k) d[k] += g[k];
        }
        if (auto* db = args.in_grads[1]) {
            auto d = db->data();
            const double sign = kind == ElementwiseKind::sub ? -1.0 : 1.0;
            if (kind == ElementwiseKind::mul)
                for (std::size_t k = 0; k < g.size(); ++k) d[bidx(*bc, k)] += g[k] * x[k];
            else
                for (std::size_t k = 0; k < g.size(); ++k) d[bidx(*bc, k)] += sign * g[k];
        }
    });
}

Var add(Var a, Var b) { return elementwise(ElementwiseKind::add, a, b); }
Var sub(Var a, Var b) { return elementwise(ElementwiseKind::sub, a, b); }
Var mul(Var a, Var b) { return elementwise(ElementwiseKind::mul, a, b); }

Var neg(Var a) { return scale(a, -1.0); }

Var scale(Var a, double c)
{
    return unary(a, [c](double x) { return c * x; }, [c](double, double) { return c; });
}

Var add_scalar(Var a, double c)
{
    return unary(a, [c](double x) { return x + c; }, [](double, double) { return 1.0; });
}

Var square(Var a)
{
    return unary(a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

Var log(Var a)
{
    for (double v : a.value().data())
        if (!(v > 0.0)) throw std::domain_error("log of a nonpositive value");
    return unary(a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

Var exp(Var a)
{
    return unary(a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Var activation(ActivationKind kind, Var x)
{
    switch (kind) {
    case ActivationKind::relu:
        return unary(
            x, [](double v) { return v > 0.0 ? v : 0.0; },
            [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
    case ActivationKind::tanh:
        return unary(
            x, [](double v) { return std::tanh(v); }, [](double, double y) { return 1.0 - y * y; });
    case ActivationKind::sigmoid:
        return unary(
            x, [](double v) { return 1.0 / (1.0 + std::exp(-v)); },
            [](double, double y) { return y * (1.0 - y); });
    }
    throw std::invalid_argument("unknown activation");
}

Var sum(Var a)
{
    double s = 0.0;
    for (double v : a.value().data()) s += v;
    return a.tape().record(Tensor::scalar(s), {a}, [](const BackwardArgs& args) {
        if (!args.in_grads[0]) return;
        const double g = args.out_grad[0];
        for (auto& d : args.in_grads[0]->data()) d += g;
    });
}

Var mean(Var a)
{
    return scale(sum(a), 1.0 / static_cast<double>(a.size()));
}

Var row_sum(Var a)
{
    const std::size_t rows = a.shape()[0];
    const std::size_t cols = a.size() / rows;
    Tensor out(Shape{rows});
    auto x = a.value().data();
    for (std::size_t r = 0; r < rows; ++r) {
        double s = 0.0;
        for (std::size_t c = 0; c < cols; ++c) s += x[r * cols + c];
        out[r] = s;
    }
    return a.tape().record(std::move(out), {a}, [rows, cols](const BackwardArgs& args) {
        if (!args.in_grads[0]) return;
        auto d = args.in_grads[0]->data();
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < cols; ++c) d[r * cols + c] += args.out_grad[r];
    });
}

Var reshape(Var a, Shape shape)
{
    Tensor out = a.value().reshaped(std::move(shape));
    return a.tape().record(std::move(out), {a}, [](const BackwardArgs& args) {
        accumulate(args.in_grads[0], args.out_grad);
    });
}

Var matmul(Var a, Var b)
{
    const Shape& as = a.shape();
    const Shape& bs = b.shape();
    if (as.size() != 2 || bs.size() != 2 || as[1] != bs[0])
        throw ShapeError("matmul dimension mismatch: " + shape_str(as) + " * " + shape_str(bs));
    const std::size_t m = as[0], k = as[1], n = bs[1];
    Tensor out(Shape{m, n});
    const double* A = a.value().ptr();
    const double* B = b.value().ptr();
    double* C = out.ptr();
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
            const double av = A[i * k + p];
            for (std::size_t j = 0; j < n; ++j) C[i * n + j] += av * B[p * n + j];
        }
    return a.tape().record(std::move(out), {a, b}, [m, k, n](const BackwardArgs& args) {
        const double* G = args.out_grad.ptr();
        const double* A = args.in_values[0]->ptr();
        const double* B = args.in_values[1]->ptr();
        if (auto* da = args.in_grads[0]) { // G * B^T
            double* dA = da->ptr();
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t p = 0; p < k; ++p) {
                    double s = 0.0;
                    for (std::size_t j = 0; j < n; ++j) s += G[i * n + j] * B[p * n + j];
                    dA[i * k + p] += s;
                }
        }
        if (auto* db = args.in_grads[1]) { // A^T * G
            double* dB = db->ptr();
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t p = 0; p < k; ++p) {
                    const double av = A[i * k + p];
                    for (std::size_t j = 0; j < n; ++j) dB[p * n + j] += av * G[i * n + j];
                }
        }
    });
}

Var add_bias(Var a, Var bias)
{
    if (a.shape().size() != 2 || bias.size() != a.shape()[1])
        throw ShapeError("add_bias: bias " + shape_str(bias.shape()) + " does not fit " +
                         shape_str(a.shape()));
    return add(a, reshape(bias, Shape{bias.size()}));
}

Var softmax(Var logits)
{
    const std::size_t n = logits.shape().back();
    const std::size_t rows = logits.size() / n;
    Tensor out(logits.shape());
    auto x = logits.value().data();
    auto y = out.data();
    for (std::size_t r = 0; r < rows; ++r) {
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < n; ++j) mx = std::max(mx, x[r * n + j]);
        double z = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
            y[r * n + j] = std::exp(x[r * n + j] - mx);
            z += y[r * n + j];
        }
        for (std::size_t j = 0; j < n; ++j) y[r * n + j] /= z;
    }
    return logits.tape().record(std::move(out), {logits}, [rows, n](const BackwardArgs& args) {
        if (!args.in_grads[0]) return;
        auto g = args.out_grad.data();
        auto y = args.out_value.data();
        auto d = args.in_grads[0]->data();
        for (std::size_t r = 0; r < rows; ++r) {
            double gy = 0.0;
            for (std::size_t j = 0; j < n; ++j) gy += g[r * n + j] * y[r * n + j];
            for (std::size_t j = 0; j < n; ++j) d[r * n + j] += y[r * n + j] * (g[r * n + j] - gy);
        }
    });
}

Var row(Var a, std::size_t i)
{
    if (a.shape().size() != 2 || i >= a.shape()[0])
        throw ShapeError("row index out of range for " + shape_str(a.shape()));
    const std::size_t n = a.shape()[1];
    auto x = a.value().data();
    Tensor out(Shape{n}, std::vector<double>(x.begin() + i * n, x.begin() + (i + 1) * n));
    return a.tape().record(std::move(out), {a}, [i, n](const BackwardArgs& args) {
        if (!args.in_grads[0]) return;
        auto d = args.in_grads[0]->data();
        for (std::size_t j = 0; j < n; ++j) d[i * n + j] += args.out_grad[j];
    });
}

Var weighted_sum(Var w, std::span<const Var> xs)
{
    if (w.size() != xs.size()) throw ShapeError("weighted_sum: weight count does not match operand count");
    std::vector<std::size_t> which(xs.size());
    for (std::size_t r = 0; r < which.size(); ++r) which[r] = r;
    return weighted_sum(w, xs, which);
}

Var weighted_sum(Var w, std::span<const Var> xs, std::span<const std::size_t> which_in)
{
    if (xs.empty() || which_in.size() != xs.size())
        throw ShapeError("weighted_sum: operand list does not match index list");
    for (auto r : which_in)
        if (r >= w.size()) throw ShapeError("weighted_sum: weight index out of range");
    const Shape& shape = xs[0].shape();
    for (const auto& x : xs)
        if (x.shape() != shape)
            throw ShapeError("weighted_sum operands disagree: " + shape_str(shape) + " vs " +
                             shape_str(x.shape()));
    std::vector<std::size_t> which(which_in.begin(), which_in.end());
    Tensor out(shape, 0.0);
    auto o = out.data();
    for (std::size_t r = 0; r < xs.size(); ++r) {
        const double wr = w.value()[which[r]];
        auto x = xs[r].value().data();
        for (std::size_t k = 0; k < o.size(); ++k) o[k] += wr * x[k];
    }
    std::vector<Var> inputs{w};
    inputs.insert(inputs.end(), xs.begin(), xs.end());
    return w.tape().record(std::move(out), std::move(inputs), [which](const BackwardArgs& args) {
        auto g = args.out_grad.data();
        const auto& wv = *args.in_values[0];
        for (std::size_t r = 0; r < which.size(); ++r) {
            if (auto* dw = args.in_grads[0]) (*dw)[which[r]] += dot(g, args.in_values[r + 1]->data());
            if (auto* dx = args.in_grads[r + 1]) {
                auto d = dx->data();
                const double wr = wv[which[r]];
                for (std::size_t k = 0; k < g.size(); ++k) d[k] += wr * g[k];
            }
        }
    });
}

std::size_t conv_out_extent(std::size_t in, std::size_t k, const ConvGeometry& g)
{
    if (g.stride == 0 || g.dilation == 0 || k == 0)
        throw GeometryError("stride, dilation and kernel size must be positive");
    const long span = static_cast<long>(g.dilation * (k - 1) + 1);
    const long avail = static_cast<long>(in + 2 * g.padding) - span;
    if (avail < 0)
        throw GeometryError("kernel extent " + std::to_string(span) + " exceeds padded input " +
                            std::to_string(in + 2 * g.padding));
    return static_cast<std::size_t>(avail) / g.stride + 1;
}

namespace {

// Output positions o in [lo, hi) whose input tap o*stride - pad + off lies
// inside [0, in).
inline void valid_range(std::size_t out, std::size_t in, std::size_t stride, long shift,
                        std::size_t& lo, std::size_t& hi)
{
    // shift = off - pad
    long l = 0;
    if (shift < 0) l = (-shift + static_cast<long>(stride) - 1) / static_cast<long>(stride);
    long h = (static_cast<long>(in) - 1 - shift);
    h = h < 0 ? -1 : h / static_cast<long>(stride);
    lo = static_cast<std::size_t>(std::max(0L, l));
    hi = static_cast<std::size_t>(std::clamp(h + 1, 0L, static_cast<long>(out)));
    if (lo > hi) lo = hi;
}

} // namespace

Var conv2d(Var x, Var w, const ConvGeometry& geo)
{
    const Dims4 in = dims4(x.shape(), "conv2d");
    const Shape& ws = w.shape();
    if (ws.size() != 4 || ws[2] != ws[3]) throw ShapeError("conv2d weight must be [Cout x Cin/g x k x k]");
    if (geo.groups == 0 || in.c % geo.groups != 0 || ws[0] % geo.groups != 0)
        throw GeometryError("channel counts must be divisible by groups");
    const std::size_t cin_g = in.c / geo.groups;
    if (ws[1] != cin_g)
        throw ShapeError("conv2d weight " + shape_str(ws) + " does not match " + std::to_string(in.c) +
                         " input channels in " + std::to_string(geo.groups) + " groups");
    const std::size_t cout = ws[0], cout_g = cout / geo.groups, k = ws[2];
    const std::size_t ho = conv_out_extent(in.h, k, geo);
    const std::size_t wo = conv_out_extent(in.w, k, geo);

    Shape out_shape = x.shape().size() == 4 ? Shape{in.b, cout, ho, wo} : Shape{cout, ho, wo};
    Tensor out(out_shape, 0.0);

    // Visits every (input, weight, output) triple once.
    auto visit = [=](auto&& body) {
        for (std::size_t b = 0; b < in.b; ++b)
            for (std::size_t oc = 0; oc < cout; ++oc) {
                const std::size_t g = oc / cout_g;
                const std::size_t opl = (b * cout + oc) * ho * wo;
                for (std::size_t icg = 0; icg < cin_g; ++icg) {
                    const std::size_t ic = g * cin_g + icg;
                    const std::size_t ipl = (b * in.c + ic) * in.h * in.w;
                    const std::size_t wpl = (oc * cin_g + icg) * k * k;
                    for (std::size_t kh = 0; kh < k; ++kh) {
                        const long sh = static_cast<long>(kh * geo.dilation) - static_cast<long>(geo.padding);
                        std::size_t oh0, oh1;
                        valid_range(ho, in.h, geo.stride, sh, oh0, oh1);
                        for (std::size_t kw = 0; kw < k; ++kw) {
                            const long sw = static_cast<long>(kw * geo.dilation) - static_cast<long>(geo.padding);
                            std::size_t ow0, ow1;
                            valid_range(wo, in.w, geo.stride, sw, ow0, ow1);
                            const std::size_t wi = wpl + kh * k + kw;
                            for (std::size_t oh = oh0; oh < oh1; ++oh) {
                                const std::size_t ih = static_cast<std::size_t>(static_cast<long>(oh * geo.stride) + sh);
                                const std::size_t orow = opl + oh * wo;
                                const std::size_t irow = ipl + ih * in.w;
                                for (std::size_t ow = ow0; ow < ow1; ++ow) {
                                    const std::size_t iw = static_cast<std::size_t>(static_cast<long>(ow * geo.stride) + sw);
                                    body(irow + iw, wi, orow + ow);
                                }
                            }
                        }
                    }
                }
            }
    };

    {
        const double* X = x.value().ptr();
        const double* W = w.value().ptr();
        double* O = out.ptr();
        visit([&](std::size_t xi, std::size_t wi, std::size_t oi) { O[oi] += W[wi] * X[xi]; });
    }
    return x.tape().record(std::move(out), {x, w}, [visit](const BackwardArgs& args) {
        const double* G = args.out_grad.ptr();
        const double* X = args.in_values[0]->ptr();
        const double* W = args.in_values[1]->ptr();
        double* dX = args.in_grads[0] ? args.in_grads[0]->ptr() : nullptr;
        double* dW = args.in_grads[1] ? args.in_grads[1]->ptr() : nullptr;
        if (dX && dW)
            visit([&](std::size_t xi, std::size_t wi, std::size_t oi) {
                dX[xi] += W[wi] * G[oi];
                dW[wi] += X[xi] * G[oi];
            });
        else if (dX)
            visit([&](std::size_t xi, std::size_t wi, std::size_t oi) { dX[xi] += W[wi] * G[oi]; });
        else if (dW)
            visit([&](std::size_t xi, std::size_t wi, std::size_t oi) { dW[wi] += X[xi] * G[oi]; });
    });
}

Var pool2d(PoolKind kind, Var x, std::size_t k, std::size_t stride, std::size_t padding)
{
    const Dims4 in = dims4(x.shape(), "pool2d");
    const ConvGeometry geo{stride, 1, padding, 1};
    const std::size_t ho = conv_out_extent(in.h, k, geo);
    const std::size_t wo = conv_out_extent(in.w, k, geo);
    Shape out_shape = x.shape().size() == 4 ? Shape{in.b, in.c, ho, wo} : Shape{in.c, ho, wo};
    Tensor out(out_shape, 0.0);
    const double* X = x.value().ptr();
    double* O = out.ptr();
    const double inv = 1.0 / static_cast<double>(k * k);

    if (kind == PoolKind::max) {
        auto argmax = std::make_shared<std::vector<std::size_t>>(out.size());
        for (std::size_t p = 0; p < in.b * in.c; ++p)
            for (std::size_t oh = 0; oh < ho; ++oh)
                for (std::size_t ow = 0; ow < wo; ++ow) {
                    double best = -std::numeric_limits<double>::infinity();
                    std::size_t arg = 0;
                    bool any = false;
                    for (std::size_t kh = 0; kh < k; ++kh) {
                        const long ih = static_cast<long>(oh * stride + kh) - static_cast<long>(padding);
                        if (ih < 0 || ih >= static_cast<long>(in.h)) continue;
                        for (std::size_t kw = 0; kw < k; ++kw) {
                            const long iw = static_cast<long>(ow * stride + kw) - static_cast<long>(padding);
                            if (iw < 0 || iw >= static_cast<long>(in.w)) continue;
                            const std::size_t xi = (p * in.h + static_cast<std::size_t>(ih)) * in.w +
                                                   static_cast<std::size_t>(iw);
                            if (!any || X[xi] > best) {
                                best = X[xi];
                                arg = xi;
                                any = true;
                            }
                        }
                    }
                    if (!any) throw GeometryError("pooling window lies entirely in padding");
                    const std::size_t oi = (p * ho + oh) * wo + ow;
                    O[oi] = best;
                    (*argmax)[oi] = arg;
                }
        return x.tape().record(std::move(out), {x}, [argmax](const BackwardArgs& args) {
            if (!args.in_grads[0]) return;
            double* dX = args.in_grads[0]->ptr();
            for (std::size_t oi = 0; oi < argmax->size(); ++oi) dX[(*argmax)[oi]] += args.out_grad[oi];
        });
    }

    auto visit = [=](auto&& body) {
        for (std::size_t p = 0; p < in.b * in.c; ++p)
            for (std::size_t oh = 0; oh < ho; ++oh)
                for (std::size_t ow = 0; ow < wo; ++ow)
                    for (std::size_t kh = 0; kh < k; ++kh) {
                        const long ih = static_cast<long>(oh * stride + kh) - static_cast<long>(padding);
                        if (ih < 0 || ih >= static_cast<long>(in.h)) continue;
                        for (std::size_t kw = 0; kw < k; ++kw) {
                            const long iw = static_cast<long>(ow * stride + kw) - static_cast<long>(padding);
                            if (iw < 0 || iw >= static_cast<long>(in.w)) continue;
                            body((p * in.h + static_cast<std::size_t>(ih)) * in.w + static_cast<std::size_t>(iw),
                                 (p * ho + oh) * wo + ow);
                        }
                    }
    };
    visit([&](std::size_t xi, std::size_t oi) { O[oi] += inv * X[xi]; });
    return x.tape().record(std::move(out), {x}, [visit, inv](const BackwardArgs& args) {
        if (!args.in_grads[0]) return;
        double* dX = args.in_grads[0]->ptr();
        const double* G = args.out_grad.ptr();
        visit([&](std::size_t xi, std::size_t oi) { dX[xi] += inv * G[oi]; });
    });
}

Var spatial_mean(Var x)
{
    const Shape& s = x.shape();
    if (s.size() != 4) throw ShapeError("spatial_mean expects [B x C x H x W], got " + shape_str(s));
    const std::size_t planes = s[0] * s[1], hw = s[2] * s[3];
    Tensor out(Shape{s[0], s[1]});
    auto xv = x.value().data();
    for (std::size_t p = 0; p < planes; ++p) {
        double acc = 0.0;
        for (std::size_t i = 0; i < hw; ++i) acc += xv[p * hw + i];
        out[p] = acc / static_cast<double>(hw);
    }
    return x.tape().record(std::move(out), {x}, [planes, hw](const BackwardArgs& args) {
        if (!args.in_grads[0]) return;
        auto d = args.in_grads[0]->data();
        const double inv = 1.0 / static_cast<double>(hw);
        for (std::size_t p = 0; p < planes; ++p)
            for (std::size_t i = 0; i < hw; ++i) d[p * hw + i] += inv * args.out_grad[p];
    });
}

Var concat_channels(std::span<const Var> xs)
{
    if (xs.empty()) throw ShapeError("concat of nothing");
    const Shape& s0 = xs[0].shape();
    if (s0.size() != 4) throw ShapeError("concat_channels expects [B x C x H x W]");
    std::size_t ctot = 0;
    std::vector<std::size_t> cs;
    for (const auto& x : xs) {
        const Shape& s = x.shape();
        if (s.size() != 4 || s[0] != s0[0] || s[2] != s0[2] || s[3] != s0[3])
            throw ShapeError("concat operands disagree: " + shape_str(s0) + " vs " + shape_str(s));
        cs.push_back(s[1]);
        ctot += s[1];
    }
    const std::size_t B = s0[0], hw = s0[2] * s0[3];
    Tensor out(Shape{B, ctot, s0[2], s0[3]});
    auto o = out.data();
    std::size_t c_off = 0;
    for (std::size_t i = 0; i < xs.size(); ++i) {
        auto xv = xs[i].value().data();
        for (std::size_t b = 0; b < B; ++b)
            std::copy_n(xv.begin() + b * cs[i] * hw, cs[i] * hw, o.begin() + (b * ctot + c_off) * hw);
        c_off += cs[i];
    }
    std::vector<Var> inputs(xs.begin(), xs.end());
    return xs[0].tape().record(std::move(out), std::move(inputs), [cs, B, ctot, hw](const BackwardArgs& args) {
        auto g = args.out_grad.data();
        std::size_t c_off = 0;
        for (std::size_t i = 0; i < cs.size(); ++i) {
            if (auto* dx = args.in_grads[i]) {
                auto d = dx->data();
                for (std::size_t b = 0; b < B; ++b)
                    for (std::size_t j = 0; j < cs[i] * hw; ++j) d[b * cs[i] * hw + j] += g[(b * ctot + c_off) * hw + j];
            }
            c_off += cs[i];
        }
    });
}

Var crop(Var x, std::size_t top, std::size_t left, std::size_t h, std::size_t w)
{
    const Shape& s = x.shape();
    if (s.size() != 4 || top + h > s[2] || left + w > s[3] || h == 0 || w == 0)
        throw GeometryError("crop window outside input " + shape_str(s));
    const std::size_t planes = s[0] * s[1], H = s[2], W = s[3];
    Tensor out(Shape{s[0], s[1], h, w});
    auto xv = x.value().data();
    auto o = out.data();
    for (std::size_t p = 0; p < planes; ++p)
        for (std::size_t i = 0; i < h; ++i)
            for (std::size_t j = 0; j < w; ++j) o[(p * h + i) * w + j] = xv[(p * H + top + i) * W + left + j];
    return x.tape().record(std::move(out), {x}, [=](const BackwardArgs& args) {
        if (!args.in_grads[0]) return;
        auto d = args.in_grads[0]->data();
        for (std::size_t p = 0; p < planes; ++p)
            for (std::size_t i = 0; i < h; ++i)
                for (std::size_t j = 0; j < w; ++j)
                    d[(p * H + top + i) * W + left + j] += args.out_grad[(p * h + i) * w + j];
    });
}

Tensor one_hot(std::span<const int> labels, std::size_t classes)
{
    Tensor t(Shape{labels.size(), classes}, 0.0);
    for (std::size_t i = 0; i < labels.size(); ++i) {
        if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= classes)
            throw std::out_of_range("label " + std::to_string(labels[i]) + " outside [0," +
                                    std::to_string(classes) + ")");
        t[i * classes + static_cast<std::size_t>(labels[i])] = 1.0;
    }
    return t;
}

Var cross_entropy_rows(Var logits, const Tensor& onehot)
{
    const Shape& s = logits.shape();
    if (s.size() != 2 || s[1] < 2) throw ShapeError("cross-entropy expects [B x C] logits with C >= 2");
    if (onehot.shape() != s) throw ShapeError("label matrix shape does not match logits");
    const std::size_t B = s[0], C = s[1];
    for (std::size_t i = 0; i < B; ++i) {
        int ones = 0;
        for (std::size_t c = 0; c < C; ++c) {
            const double v = onehot[i * C + c];
            if (v == 1.0) ++ones;
            else if (v != 0.0) ones = 2;
        }
        if (ones != 1) throw std::invalid_argument("label row " + std::to_string(i) + " is not one-hot");
    }
    auto probs = std::make_shared<Tensor>(Shape{B, C});
    Tensor out(Shape{B});
    auto z = logits.value().data();
    for (std::size_t i = 0; i < B; ++i) {
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t c = 0; c < C; ++c) mx = std::max(mx, z[i * C + c]);
        double se = 0.0;
        for (std::size_t c = 0; c < C; ++c) se += std::exp(z[i * C + c] - mx);
        const double lse = mx + std::log(se);
        double zy = 0.0;
        for (std::size_t c = 0; c < C; ++c) {
            (*probs)[i * C + c] = std::exp(z[i * C + c] - lse);
            zy += onehot[i * C + c] * z[i * C + c];
        }
        out[i] = lse - zy;
    }
    auto y = std::make_shared<Tensor>(onehot);
    return logits.tape().record(std::move(out), {logits}, [probs, y, B, C](const BackwardArgs& args) {
        if (!args.in_grads[0]) return;
        auto d = args.in_grads[0]->data();
        for (std::size_t i = 0; i < B; ++i)
            for (std::size_t c = 0; c < C; ++c)
                d[i * C + c] += args.out_grad[i] * ((*probs)[i * C + c] - (*y)[i * C + c]);
    });
}

Var softmax_cross_entropy(Var logits, const Tensor& onehot)
{
    return mean(cross_entropy_rows(logits, onehot));
}

Var batch_norm(Var x, Var gamma, Var beta, BatchNormState& st, bool train, bool update_stats)
{
    const Shape& s = x.shape();
    if (s.size() != 4 && s.size() != 2) throw ShapeError("batch_norm expects [B x C x H x W] or [B x C]");
    const std::size_t B = s[0], C = s[1], hw = s.size() == 4 ? s[2] * s[3] : 1;
    if (st.running_mean.size() != C) throw ShapeError("batch_norm channel mismatch");
    if (gamma.valid() && gamma.size() != C) throw ShapeError("batch_norm gamma channel mismatch");
    if (beta.valid() && beta.size() != C) throw ShapeError("batch_norm beta channel mismatch");
    const double n = static_cast<double>(B * hw);
    auto xv = x.value().data();

    auto mean = std::make_shared<std::vector<double>>(C, 0.0);
    auto invstd = std::make_shared<std::vector<double>>(C, 0.0);
    if (train) {
        for (std::size_t c = 0; c < C; ++c) {
            double m = 0.0;
            for (std::size_t b = 0; b < B; ++b)
                for (std::size_t i = 0; i < hw; ++i) m += xv[(b * C + c) * hw + i];
            m /= n;
            double v = 0.0;
            for (std::size_t b = 0; b < B; ++b)
                for (std::size_t i = 0; i < hw; ++i) {
                    const double d = xv[(b * C + c) * hw + i] - m;
                    v += d * d;
                }
            v /= n;
            (*mean)[c] = m;
            (*invstd)[c] = 1.0 / std::sqrt(v + st.eps);
            if (update_stats) {
                const double unbiased = n > 1 ? v * n / (n - 1) : v;
                st.running_mean[c] = (1 - st.momentum) * st.running_mean[c] + st.momentum * m;
                st.running_var[c] = (1 - st.momentum) * st.running_var[c] + st.momentum * unbiased;
            }
        }
    } else {
        for (std::size_t c = 0; c < C; ++c) {
            (*mean)[c] = st.running_mean[c];
            (*invstd)[c] = 1.0 / std::sqrt(st.running_var[c] + st.eps);
        }
    }

    auto xhat = std::make_shared<Tensor>(s);
    Tensor out(s);
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t c = 0; c < C; ++c) {
            const double g = gamma.valid() ? gamma.value()[c] : 1.0;
            const double sh = beta.valid() ? beta.value()[c] : 0.0;
            for (std::size_t i = 0; i < hw; ++i) {
                const std::size_t k = (b * C + c) * hw + i;
                (*xhat)[k] = (xv[k] - (*mean)[c]) * (*invstd)[c];
                out[k] = (*xhat)[k] * g + sh;
            }
        }

    std::vector<Var> inputs{x};
    const bool has_gamma = gamma.valid(), has_beta = beta.valid();
    if (has_gamma) inputs.push_back(gamma);
    if (has_beta) inputs.push_back(beta);
    return x.tape().record(std::move(out), std::move(inputs),
                           [=](const BackwardArgs& args) {
                               auto g = args.out_grad.data();
                               const Tensor* gv = has_gamma ? args.in_values[1] : nullptr;
                               Tensor* dgamma = has_gamma ? args.in_grads[1] : nullptr;
                               Tensor* dbeta = has_beta ? args.in_grads[has_gamma ? 2 : 1] : nullptr;
                               Tensor* dx = args.in_grads[0];
                               for (std::size_t c = 0; c < C; ++c) {
                                   const double gam = gv ? (*gv)[c] : 1.0;
                                   double sg = 0.0, sgx = 0.0;
                                   for (std::size_t b = 0; b < B; ++b)
                                       for (std::size_t i = 0; i < hw; ++i) {
                                           const std::size_t k = (b * C + c) * hw + i;
                                           sg += g[k];
                                           sgx += g[k] * (*xhat)[k];
                                       }
                                   if (dgamma) (*dgamma)[c] += sgx;
                                   if (dbeta) (*dbeta)[c] += sg;
                                   if (!dx) continue;
                                   const double is = (*invstd)[c];
                                   for (std::size_t b = 0; b < B; ++b)
                                       for (std::size_t i = 0; i < hw; ++i) {
                                           const std::size_t k = (b * C + c) * hw + i;
                                           if (train)
                                               (*dx)[k] += gam * is * (g[k] - sg / n - (*xhat)[k] * sgx / n);
                                           else
                                               (*dx)[k] += gam * is * g[k];
                                       }
                               }
                           });
}

} // namespace rdarts::ops
