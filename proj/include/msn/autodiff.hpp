#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <memory>
#include <stdexcept>
#include <vector>

#include "msn/tensor.hpp"

namespace msn {

// Reverse-mode tape. One tape per forward pass; call backward() once on a
// scalar node, then read grads of any leaf created with param().
//
// All activations live in [C,H,W] layout; vectors are rank-1.
template <typename T>
class Tape {
public:
    struct Var {
        int id = -1;
        bool valid() const { return id >= 0; }
    };

    // Constant leaf: no gradient is accumulated.
    Var leaf(Tensor<T> value) { return push(std::move(value), false); }

    // Differentiable leaf.
    Var param(Tensor<T> value) { return push(std::move(value), true); }

    const Tensor<T>& value(Var v) const { return nodes_[check(v)].value; }
    const Tensor<T>& grad(Var v) const { return nodes_[check(v)].grad; }

    std::size_t num_nodes() const { return nodes_.size(); }

    // --- ops ---------------------------------------------------------------

    // Same-padding stride-1 convolution. x:[Cin,H,W] w:[Cout,Cin,K,K] bias:[Cout] (optional).
    Var conv2d(Var xv, Var wv, Var bv = Var{}) {
        const Tensor<T>& x = value(xv);
        const Tensor<T>& w = value(wv);
        require(x.rank() == 3, "conv2d: input must be rank 3");
        require(w.rank() == 4, "conv2d: weight must be rank 4");
        require(w.dim(1) == x.dim(0), "conv2d: channel mismatch " + shape_str(x.shape()) +
                                          " vs " + shape_str(w.shape()));
        require(w.dim(2) == w.dim(3) && w.dim(2) % 2 == 1, "conv2d: kernel must be odd square");
        const int cin = x.dim(0), h = x.dim(1), wd = x.dim(2);
        const int cout = w.dim(0), k = w.dim(2), p = k / 2;

        Tensor<T> out({cout, h, wd});
        if (bv.valid()) {
            const Tensor<T>& b = value(bv);
            require(b.rank() == 1 && b.dim(0) == cout, "conv2d: bias shape");
            for (int co = 0; co < cout; ++co)
                std::fill(&out.at(co, 0, 0), &out.at(co, 0, 0) + h * wd, b[static_cast<std::size_t>(co)]);
        }
        conv_accumulate(x, w, out, cin, cout, h, wd, k, p);

        Var ov = push(std::move(out), needs_grad(xv) || needs_grad(wv) || (bv.valid() && needs_grad(bv)));
        if (!nodes_[ov.id].requires_grad) return ov;
        add_backward(ov, [this, xv, wv, bv, ov, cin, cout, h, wd, k, p]() {
            const Tensor<T>& g = nodes_[ov.id].grad;
            const Tensor<T>& x = value(xv);
            const Tensor<T>& w = value(wv);
            if (needs_grad(xv)) {
                Tensor<T>& gx = grad_buf(xv);
                // dx[ci,y,x] += sum_co,kh,kw w[co,ci,kh,kw] * g[co,y+p-kh... ] (full correlation transpose)
                for (int co = 0; co < cout; ++co)
                    for (int ci = 0; ci < cin; ++ci)
                        for (int kh = 0; kh < k; ++kh)
                            for (int kw = 0; kw < k; ++kw) {
                                const T wv_ = w[((static_cast<std::size_t>(co) * cin + ci) * k + kh) * k + kw];
                                if (wv_ == T(0)) continue;
                                for (int y = 0; y < h; ++y) {
                                    const int sy = y + kh - p;
                                    if (sy < 0 || sy >= h) continue;
                                    const T* grow = &g.at(co, y, 0);
                                    T* xrow = &gx.at(ci, sy, 0);
                                    const int x0 = std::max(0, p - kw), x1 = std::min(wd, wd + p - kw);
                                    for (int xx = x0; xx < x1; ++xx) xrow[xx + kw - p] += wv_ * grow[xx];
                                }
                            }
            }
            if (needs_grad(wv)) {
                Tensor<T>& gw = grad_buf(wv);
                for (int co = 0; co < cout; ++co)
                    for (int ci = 0; ci < cin; ++ci)
                        for (int kh = 0; kh < k; ++kh)
                            for (int kw = 0; kw < k; ++kw) {
                                T acc = T(0);
                                for (int y = 0; y < h; ++y) {
                                    const int sy = y + kh - p;
                                    if (sy < 0 || sy >= h) continue;
                                    const T* grow = &g.at(co, y, 0);
                                    const T* xrow = &x.at(ci, sy, 0);
                                    const int x0 = std::max(0, p - kw), x1 = std::min(wd, wd + p - kw);
                                    for (int xx = x0; xx < x1; ++xx) acc += grow[xx] * xrow[xx + kw - p];
                                }
                                gw[((static_cast<std::size_t>(co) * cin + ci) * k + kh) * k + kw] += acc;
                            }
            }
            if (bv.valid() && needs_grad(bv)) {
                Tensor<T>& gb = grad_buf(bv);
                for (int co = 0; co < cout; ++co) {
                    T acc = T(0);
                    const T* gp = &g.at(co, 0, 0);
                    for (int i = 0; i < h * wd; ++i) acc += gp[i];
                    gb[static_cast<std::size_t>(co)] += acc;
                }
            }
        });
        return ov;
    }

    Var relu(Var xv) {
        Tensor<T> out = value(xv);
        for (auto& v : out.vec()) v = std::max(v, T(0));
        Var ov = push(std::move(out), needs_grad(xv));
        if (nodes_[ov.id].requires_grad)
            add_backward(ov, [this, xv, ov]() {
                const Tensor<T>& g = nodes_[ov.id].grad;
                const Tensor<T>& y = nodes_[ov.id].value;
                Tensor<T>& gx = grad_buf(xv);
                for (std::size_t i = 0; i < g.size(); ++i)
                    if (y[i] > T(0)) gx[i] += g[i];
            });
        return ov;
    }

    // 2x average-pool downsample; H and W must be even.
    Var avgpool2(Var xv) {
        const Tensor<T>& x = value(xv);
        require(x.rank() == 3, "avgpool2: rank 3 expected");
        require(x.dim(1) % 2 == 0 && x.dim(2) % 2 == 0, "avgpool2: odd spatial size");
        const int c = x.dim(0), h = x.dim(1) / 2, w = x.dim(2) / 2;
        Tensor<T> out({c, h, w});
        for (int ci = 0; ci < c; ++ci)
            for (int y = 0; y < h; ++y)
                for (int xx = 0; xx < w; ++xx)
                    out.at(ci, y, xx) = (x.at(ci, 2 * y, 2 * xx) + x.at(ci, 2 * y, 2 * xx + 1) +
                                         x.at(ci, 2 * y + 1, 2 * xx) + x.at(ci, 2 * y + 1, 2 * xx + 1)) /
                                        T(4);
        Var ov = push(std::move(out), needs_grad(xv));
        if (nodes_[ov.id].requires_grad)
            add_backward(ov, [this, xv, ov, c, h, w]() {
                const Tensor<T>& g = nodes_[ov.id].grad;
                Tensor<T>& gx = grad_buf(xv);
                for (int ci = 0; ci < c; ++ci)
                    for (int y = 0; y < h; ++y)
                        for (int xx = 0; xx < w; ++xx) {
                            const T q = g.at(ci, y, xx) / T(4);
                            gx.at(ci, 2 * y, 2 * xx) += q;
                            gx.at(ci, 2 * y, 2 * xx + 1) += q;
                            gx.at(ci, 2 * y + 1, 2 * xx) += q;
                            gx.at(ci, 2 * y + 1, 2 * xx + 1) += q;
                        }
            });
        return ov;
    }

    // Bilinear resize to (oh, ow), half-pixel centers, edge clamped.
    Var resize_bilinear(Var xv, int oh, int ow) {
        const Tensor<T>& x = value(xv);
        require(x.rank() == 3, "resize_bilinear: rank 3 expected");
        const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
        struct Samp {
            int i0, i1;
            T f;
        };
        auto make_axis = [](int in, int out) {
            std::vector<Samp> s(static_cast<std::size_t>(out));
            const double scale = static_cast<double>(in) / out;
            for (int o = 0; o < out; ++o) {
                double src = (o + 0.5) * scale - 0.5;
                src = std::max(0.0, std::min(src, static_cast<double>(in - 1)));
                int i0 = static_cast<int>(std::floor(src));
                int i1 = std::min(i0 + 1, in - 1);
                s[static_cast<std::size_t>(o)] = {i0, i1, static_cast<T>(src - i0)};
            }
            return s;
        };
        auto ys = make_axis(h, oh), xs = make_axis(w, ow);
        Tensor<T> out({c, oh, ow});
        for (int ci = 0; ci < c; ++ci)
            for (int y = 0; y < oh; ++y) {
                const auto& sy = ys[static_cast<std::size_t>(y)];
                for (int xx = 0; xx < ow; ++xx) {
                    const auto& sx = xs[static_cast<std::size_t>(xx)];
                    const T a = x.at(ci, sy.i0, sx.i0), b = x.at(ci, sy.i0, sx.i1);
                    const T d = x.at(ci, sy.i1, sx.i0), e = x.at(ci, sy.i1, sx.i1);
                    const T top = a + (b - a) * sx.f, bot = d + (e - d) * sx.f;
                    out.at(ci, y, xx) = top + (bot - top) * sy.f;
                }
            }
        Var ov = push(std::move(out), needs_grad(xv));
        if (nodes_[ov.id].requires_grad)
            add_backward(ov, [this, xv, ov, c, oh, ow, ys, xs]() {
                const Tensor<T>& g = nodes_[ov.id].grad;
                Tensor<T>& gx = grad_buf(xv);
                for (int ci = 0; ci < c; ++ci)
                    for (int y = 0; y < oh; ++y) {
                        const auto& sy = ys[static_cast<std::size_t>(y)];
                        for (int xx = 0; xx < ow; ++xx) {
                            const auto& sx = xs[static_cast<std::size_t>(xx)];
                            const T gv = g.at(ci, y, xx);
                            gx.at(ci, sy.i0, sx.i0) += gv * (T(1) - sy.f) * (T(1) - sx.f);
                            gx.at(ci, sy.i0, sx.i1) += gv * (T(1) - sy.f) * sx.f;
                            gx.at(ci, sy.i1, sx.i0) += gv * sy.f * (T(1) - sx.f);
                            gx.at(ci, sy.i1, sx.i1) += gv * sy.f * sx.f;
                        }
                    }
            });
        return ov;
    }

    // Centered spatial crop to (ch, cw).
    Var crop_center(Var xv, int ch, int cw) {
        const Tensor<T>& x = value(xv);
        require(x.rank() == 3, "crop_center: rank 3 expected");
        require(ch >= 1 && cw >= 1 && ch <= x.dim(1) && cw <= x.dim(2), "crop_center: bad crop size");
        const int c = x.dim(0), oy = (x.dim(1) - ch) / 2, ox = (x.dim(2) - cw) / 2;
        Tensor<T> out({c, ch, cw});
        for (int ci = 0; ci < c; ++ci)
            for (int y = 0; y < ch; ++y)
                for (int xx = 0; xx < cw; ++xx) out.at(ci, y, xx) = x.at(ci, y + oy, xx + ox);
        Var ov = push(std::move(out), needs_grad(xv));
        if (nodes_[ov.id].requires_grad)
            add_backward(ov, [this, xv, ov, c, ch, cw, oy, ox]() {
                const Tensor<T>& g = nodes_[ov.id].grad;
                Tensor<T>& gx = grad_buf(xv);
                for (int ci = 0; ci < c; ++ci)
                    for (int y = 0; y < ch; ++y)
                        for (int xx = 0; xx < cw; ++xx) gx.at(ci, y + oy, xx + ox) += g.at(ci, y, xx);
            });
        return ov;
    }

    // Channel concatenation of two rank-3 tensors with equal spatial size.
    Var concat_c(Var av, Var bv) {
        const Tensor<T>& a = value(av);
        const Tensor<T>& b = value(bv);
        require(a.rank() == 3 && b.rank() == 3 && a.dim(1) == b.dim(1) && a.dim(2) == b.dim(2),
                "concat_c: spatial mismatch");
        const int ca = a.dim(0), cb = b.dim(0), h = a.dim(1), w = a.dim(2);
        Tensor<T> out({ca + cb, h, w});
        std::copy(a.data(), a.data() + a.size(), out.data());
        std::copy(b.data(), b.data() + b.size(), out.data() + a.size());
        Var ov = push(std::move(out), needs_grad(av) || needs_grad(bv));
        if (nodes_[ov.id].requires_grad)
            add_backward(ov, [this, av, bv, ov]() {
                const Tensor<T>& g = nodes_[ov.id].grad;
                const std::size_t na = value(av).size();
                if (needs_grad(av)) {
                    Tensor<T>& ga = grad_buf(av);
                    for (std::size_t i = 0; i < na; ++i) ga[i] += g[i];
                }
                if (needs_grad(bv)) {
                    Tensor<T>& gb = grad_buf(bv);
                    for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += g[na + i];
                }
            });
        return ov;
    }

    // Fully connected: x:[in] W:[out,in] b:[out].
    Var linear(Var xv, Var wv, Var bv) {
        const Tensor<T>& x = value(xv);
        const Tensor<T>& w = value(wv);
        const Tensor<T>& b = value(bv);
        require(x.rank() == 1 && w.rank() == 2 && b.rank() == 1, "linear: rank");
        require(w.dim(1) == x.dim(0) && w.dim(0) == b.dim(0), "linear: shape mismatch");
        const int n_out = w.dim(0), n_in = w.dim(1);
        Tensor<T> out({n_out});
        for (int o = 0; o < n_out; ++o) {
            T acc = b[static_cast<std::size_t>(o)];
            const T* wr = w.data() + static_cast<std::size_t>(o) * n_in;
            for (int i = 0; i < n_in; ++i) acc += wr[i] * x[static_cast<std::size_t>(i)];
            out[static_cast<std::size_t>(o)] = acc;
        }
        Var ov = push(std::move(out), needs_grad(xv) || needs_grad(wv) || needs_grad(bv));
        if (nodes_[ov.id].requires_grad)
            add_backward(ov, [this, xv, wv, bv, ov, n_out, n_in]() {
                const Tensor<T>& g = nodes_[ov.id].grad;
                const Tensor<T>& x = value(xv);
                const Tensor<T>& w = value(wv);
                if (needs_grad(xv)) {
                    Tensor<T>& gx = grad_buf(xv);
                    for (int o = 0; o < n_out; ++o) {
                        const T go = g[static_cast<std::size_t>(o)];
                        const T* wr = w.data() + static_cast<std::size_t>(o) * n_in;
                        for (int i = 0; i < n_in; ++i) gx[static_cast<std::size_t>(i)] += go * wr[i];
                    }
                }
                if (needs_grad(wv)) {
                    Tensor<T>& gw = grad_buf(wv);
                    for (int o = 0; o < n_out; ++o) {
                        const T go = g[static_cast<std::size_t>(o)];
                        T* gr = gw.data() + static_cast<std::size_t>(o) * n_in;
                        for (int i = 0; i < n_in; ++i) gr[i] += go * x[static_cast<std::size_t>(i)];
                    }
                }
                if (needs_grad(bv)) {
                    Tensor<T>& gb = grad_buf(bv);
                    for (int o = 0; o < n_out; ++o) gb[static_cast<std::size_t>(o)] += g[static_cast<std::size_t>(o)];
                }
            });
        return ov;
    }

    // Flat slice [offset, offset+len) reshaped to `shape`.
    Var slice_reshape(Var xv, std::size_t offset, std::vector<int> shape) {
        const Tensor<T>& x = value(xv);
        const std::size_t len = Tensor<T>::count(shape);
        require(offset + len <= x.size(), "slice_reshape: out of range");
        Tensor<T> out(shape);
        std::copy(x.data() + offset, x.data() + offset + len, out.data());
        Var ov = push(std::move(out), needs_grad(xv));
        if (nodes_[ov.id].requires_grad)
            add_backward(ov, [this, xv, ov, offset, len]() {
                const Tensor<T>& g = nodes_[ov.id].grad;
                Tensor<T>& gx = grad_buf(xv);
                for (std::size_t i = 0; i < len; ++i) gx[offset + i] += g[i];
            });
        return ov;
    }

    // Channelwise softmax over a rank-3 logits tensor.
    Var softmax_c(Var xv) {
        const Tensor<T>& x = value(xv);
        require(x.rank() == 3, "softmax_c: rank 3 expected");
        const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
        Tensor<T> out(x.shape());
        for (int y = 0; y < h; ++y)
            for (int xx = 0; xx < w; ++xx) {
                T mx = x.at(0, y, xx);
                for (int ci = 1; ci < c; ++ci) mx = std::max(mx, x.at(ci, y, xx));
                T sum = T(0);
                for (int ci = 0; ci < c; ++ci) {
                    const T e = std::exp(x.at(ci, y, xx) - mx);
                    out.at(ci, y, xx) = e;
                    sum += e;
                }
                for (int ci = 0; ci < c; ++ci) out.at(ci, y, xx) /= sum;
            }
        Var ov = push(std::move(out), needs_grad(xv));
        if (nodes_[ov.id].requires_grad)
            add_backward(ov, [this, xv, ov, c, h, w]() {
                const Tensor<T>& g = nodes_[ov.id].grad;
                const Tensor<T>& s = nodes_[ov.id].value;
                Tensor<T>& gx = grad_buf(xv);
                for (int y = 0; y < h; ++y)
                    for (int xx = 0; xx < w; ++xx) {
                        T dot = T(0);
                        for (int ci = 0; ci < c; ++ci) dot += g.at(ci, y, xx) * s.at(ci, y, xx);
                        for (int ci = 0; ci < c; ++ci)
                            gx.at(ci, y, xx) += s.at(ci, y, xx) * (g.at(ci, y, xx) - dot);
                    }
            });
        return ov;
    }

    // Softmax cross entropy against an integer label map, mean over pixels
    // whose label != ignore_label. Pixels with no valid labels give loss 0.
    Var softmax_cross_entropy(Var logits_v, const LabelMap& labels, int ignore_label) {
        const Tensor<T>& logits = value(logits_v);
        require(logits.rank() == 3, "softmax_cross_entropy: logits rank 3 expected");
        require(labels.rank() == 2 && labels.dim(0) == logits.dim(1) && labels.dim(1) == logits.dim(2),
                "softmax_cross_entropy: label shape mismatch");
        const int c = logits.dim(0), h = logits.dim(1), w = logits.dim(2);
        Tensor<T> probs(logits.shape());
        double loss = 0.0;
        long n_valid = 0;
        for (int y = 0; y < h; ++y)
            for (int xx = 0; xx < w; ++xx) {
                const int lbl = labels.at2(y, xx);
                T mx = logits.at(0, y, xx);
                for (int ci = 1; ci < c; ++ci) mx = std::max(mx, logits.at(ci, y, xx));
                T sum = T(0);
                for (int ci = 0; ci < c; ++ci) {
                    const T e = std::exp(logits.at(ci, y, xx) - mx);
                    probs.at(ci, y, xx) = e;
                    sum += e;
                }
                for (int ci = 0; ci < c; ++ci) probs.at(ci, y, xx) /= sum;
                if (lbl == ignore_label) continue;
                if (lbl < 0 || lbl >= c)
                    throw std::invalid_argument("softmax_cross_entropy: label " + std::to_string(lbl) +
                                                " out of range for " + std::to_string(c) + " classes");
                loss -= std::log(std::max(static_cast<double>(probs.at(lbl, y, xx)), 1e-300));
                ++n_valid;
            }
        if (n_valid > 0) loss /= static_cast<double>(n_valid);
        Tensor<T> out({1});
        out[0] = static_cast<T>(loss);
        Var ov = push(std::move(out), needs_grad(logits_v));
        if (nodes_[ov.id].requires_grad) {
            auto probs_ptr = std::make_shared<Tensor<T>>(std::move(probs));
            LabelMap lbls = labels;
            add_backward(ov, [this, logits_v, ov, probs_ptr, lbls, ignore_label, c, h, w, n_valid]() {
                if (n_valid == 0) return;
                const T gscale = nodes_[ov.id].grad[0] / static_cast<T>(n_valid);
                Tensor<T>& gx = grad_buf(logits_v);
                for (int y = 0; y < h; ++y)
                    for (int xx = 0; xx < w; ++xx) {
                        const int lbl = lbls.at2(y, xx);
                        if (lbl == ignore_label) continue;
                        for (int ci = 0; ci < c; ++ci) {
                            T d = probs_ptr->at(ci, y, xx);
                            if (ci == lbl) d -= T(1);
                            gx.at(ci, y, xx) += gscale * d;
                        }
                    }
            });
        }
        return ov;
    }

    // Elementwise sum of equal-shaped vars.
    Var add(Var av, Var bv) {
        const Tensor<T>& a = value(av);
        const Tensor<T>& b = value(bv);
        require(a.same_shape(b), "add: shape mismatch");
        Tensor<T> out = a;
        for (std::size_t i = 0; i < out.size(); ++i) out[i] += b[i];
        Var ov = push(std::move(out), needs_grad(av) || needs_grad(bv));
        if (nodes_[ov.id].requires_grad)
            add_backward(ov, [this, av, bv, ov]() {
                const Tensor<T>& g = nodes_[ov.id].grad;
                if (needs_grad(av)) {
                    Tensor<T>& ga = grad_buf(av);
                    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
                }
                if (needs_grad(bv)) {
                    Tensor<T>& gb = grad_buf(bv);
                    for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
                }
            });
        return ov;
    }

    // Scalar reduction: sum_i coeffs[i] * x[i]. coeffs must match x's element count.
    Var weighted_sum(Var xv, const Tensor<T>& coeffs) {
        const Tensor<T>& x = value(xv);
        require(coeffs.size() == x.size(), "weighted_sum: coefficient count mismatch");
        Tensor<T> out({1});
        for (std::size_t i = 0; i < x.size(); ++i) out[0] += coeffs[i] * x[i];
        Var ov = push(std::move(out), needs_grad(xv));
        if (nodes_[ov.id].requires_grad) {
            auto cp = std::make_shared<Tensor<T>>(coeffs);
            add_backward(ov, [this, xv, ov, cp]() {
                const T g = nodes_[ov.id].grad[0];
                Tensor<T>& gx = grad_buf(xv);
                for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g * (*cp)[i];
            });
        }
        return ov;
    }

    Var scale(Var xv, T factor) {
        Tensor<T> out = value(xv);
        for (auto& v : out.vec()) v *= factor;
        Var ov = push(std::move(out), needs_grad(xv));
        if (nodes_[ov.id].requires_grad)
            add_backward(ov, [this, xv, ov, factor]() {
                const Tensor<T>& g = nodes_[ov.id].grad;
                Tensor<T>& gx = grad_buf(xv);
                for (std::size_t i = 0; i < g.size(); ++i) gx[i] += factor * g[i];
            });
        return ov;
    }

    // --- backward ----------------------------------------------------------

    void backward(Var loss) {
        const Tensor<T>& lv = value(loss);
        require(lv.size() == 1, "backward: loss must be scalar");
        if (!std::isfinite(static_cast<double>(lv[0])))
            throw std::runtime_error("backward: non-finite loss");
        grad_buf(loss)[0] = T(1);
        for (int i = loss.id; i >= 0; --i) {
            auto& n = nodes_[static_cast<std::size_t>(i)];
            if (n.backward && !n.grad.empty()) n.backward();
        }
    }

private:
    struct Node {
        Tensor<T> value;
        Tensor<T> grad;  // allocated lazily
        bool requires_grad = false;
        std::function<void()> backward;
    };

    std::vector<Node> nodes_;

    Var push(Tensor<T> value, bool requires_grad) {
        Node n;
        n.value = std::move(value);
        n.requires_grad = requires_grad;
        nodes_.push_back(std::move(n));
        return Var{static_cast<int>(nodes_.size()) - 1};
    }

    int check(Var v) const {
        if (!v.valid() || v.id >= static_cast<int>(nodes_.size()))
            throw std::logic_error("Tape: invalid var");
        return v.id;
    }

    bool needs_grad(Var v) const { return nodes_[check(v)].requires_grad; }

    Tensor<T>& grad_buf(Var v) {
        Node& n = nodes_[check(v)];
        if (n.grad.empty()) n.grad = Tensor<T>(n.value.shape());
        return n.grad;
    }

    void add_backward(Var v, std::function<void()> fn) {
        grad_buf(v);  // ensure output grad exists so upstream can accumulate
        nodes_[check(v)].backward = std::move(fn);
    }

    static void require(bool cond, const std::string& msg) {
        if (!cond) throw std::invalid_argument(msg);
    }

    static void conv_accumulate(const Tensor<T>& x, const Tensor<T>& w, Tensor<T>& out, int cin,
                                int cout, int h, int wd, int k, int p) {
        for (int co = 0; co < cout; ++co)
            for (int ci = 0; ci < cin; ++ci)
                for (int kh = 0; kh < k; ++kh)
                    for (int kw = 0; kw < k; ++kw) {
                        const T wv = w[((static_cast<std::size_t>(co) * cin + ci) * k + kh) * k + kw];
                        if (wv == T(0)) continue;
                        for (int y = 0; y < h; ++y) {
                            const int sy = y + kh - p;
                            if (sy < 0 || sy >= h) continue;
                            T* orow = &out.at(co, y, 0);
                            const T* xrow = &x.at(ci, sy, 0);
                            const int x0 = std::max(0, p - kw), x1 = std::min(wd, wd + p - kw);
                            for (int xx = x0; xx < x1; ++xx) orow[xx] += wv * xrow[xx + kw - p];
                        }
                    }
    }
};

template <typename T>
using Var = typename Tape<T>::Var;

}  // namespace msn
