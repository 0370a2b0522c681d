#pragma once

#include <cmath>
#include <functional>
#include <utility>
#include <vector>

#include "lanekeep/tensor.hpp"

namespace lanekeep {

// ---- raw matmul kernels (accumulating) ------------------------------------
// Inner loops run over contiguous memory so the compiler can vectorize them.

// C(M,N) += A(M,K) * B(K,N)
inline void mm_nn_acc(const double* __restrict a, const double* __restrict b, double* __restrict c,
                      int m, int k, int n) {
    for (int i = 0; i < m; i++) {
        double* ci = c + static_cast<long>(i) * n;
        const double* ai = a + static_cast<long>(i) * k;
        for (int l = 0; l < k; l++) {
            double av = ai[l];
            const double* bl = b + static_cast<long>(l) * n;
            for (int j = 0; j < n; j++) ci[j] += av * bl[j];
        }
    }
}

// C(M,N) += A(K,M)^T * B(K,N)
inline void mm_tn_acc(const double* __restrict a, const double* __restrict b, double* __restrict c,
                      int m, int k, int n) {
    for (int l = 0; l < k; l++) {
        const double* al = a + static_cast<long>(l) * m;
        const double* bl = b + static_cast<long>(l) * n;
        for (int i = 0; i < m; i++) {
            double av = al[i];
            double* ci = c + static_cast<long>(i) * n;
            for (int j = 0; j < n; j++) ci[j] += av * bl[j];
        }
    }
}

// C(M,N) += A(M,K) * B(N,K)^T
inline void mm_nt_acc(const double* __restrict a, const double* __restrict b, double* __restrict c,
                      int m, int k, int n) {
    for (int i = 0; i < m; i++) {
        const double* ai = a + static_cast<long>(i) * k;
        double* ci = c + static_cast<long>(i) * n;
        for (int j = 0; j < n; j++) {
            const double* bj = b + static_cast<long>(j) * k;
            double acc = 0.0;
            for (int l = 0; l < k; l++) acc += ai[l] * bj[l];
            ci[j] += acc;
        }
    }
}

// out(C, R) = in(R, C)^T
inline void transpose_to(const double* __restrict in, double* __restrict out, int r, int c) {
    for (int i = 0; i < r; i++)
        for (int j = 0; j < c; j++) out[static_cast<long>(j) * r + i] = in[static_cast<long>(i) * c + j];
}

// ---- im2col / col2im -------------------------------------------------------
// Two layouts, picked per matmul so that the accumulating inner loop always
// runs over contiguous memory (the reductions cannot be vectorized otherwise,
// since IEEE semantics forbid reassociation). K indexes (channel, ky, kx) in
// that order; P indexes window positions row-major.

// col(P, K)
inline void im2col_pk(const double* __restrict img, int c, int h, int w, int kh, int kw,
                      int stride, int pad, int ph, int pw, double* __restrict col) {
    const int kdim = c * kh * kw;
    for (int oy = 0; oy < ph; oy++) {
        for (int ox = 0; ox < pw; ox++) {
            double* row = col + (static_cast<long>(oy) * pw + ox) * kdim;
            for (int ch = 0; ch < c; ch++) {
                const double* plane = img + static_cast<long>(ch) * h * w;
                for (int i = 0; i < kh; i++) {
                    int iy = oy * stride - pad + i;
                    double* dst = row + (static_cast<long>(ch) * kh + i) * kw;
                    if (iy < 0 || iy >= h) {
                        for (int j = 0; j < kw; j++) dst[j] = 0.0;
                        continue;
                    }
                    const double* line = plane + static_cast<long>(iy) * w;
                    for (int j = 0; j < kw; j++) {
                        int ix = ox * stride - pad + j;
                        dst[j] = (ix >= 0 && ix < w) ? line[ix] : 0.0;
                    }
                }
            }
        }
    }
}

// col(K, P)
inline void im2col_kp(const double* __restrict img, int c, int h, int w, int kh, int kw,
                      int stride, int pad, int ph, int pw, double* __restrict col) {
    const long positions = static_cast<long>(ph) * pw;
    for (int ch = 0; ch < c; ch++) {
        const double* plane = img + static_cast<long>(ch) * h * w;
        for (int i = 0; i < kh; i++) {
            for (int j = 0; j < kw; j++) {
                double* row = col + (static_cast<long>(ch) * kh * kw + i * kw + j) * positions;
                long p = 0;
                for (int oy = 0; oy < ph; oy++) {
                    int iy = oy * stride - pad + i;
                    if (iy < 0 || iy >= h) {
                        for (int ox = 0; ox < pw; ox++) row[p++] = 0.0;
                        continue;
                    }
                    const double* line = plane + static_cast<long>(iy) * w;
                    for (int ox = 0; ox < pw; ox++) {
                        int ix = ox * stride - pad + j;
                        row[p++] = (ix >= 0 && ix < w) ? line[ix] : 0.0;
                    }
                }
            }
        }
    }
}

// scatter-add from col(P, K) back onto the image
inline void col2im_pk_acc(const double* __restrict col, int c, int h, int w, int kh, int kw,
                          int stride, int pad, int ph, int pw, double* __restrict img) {
    const int kdim = c * kh * kw;
    for (int oy = 0; oy < ph; oy++) {
        for (int ox = 0; ox < pw; ox++) {
            const double* row = col + (static_cast<long>(oy) * pw + ox) * kdim;
            for (int ch = 0; ch < c; ch++) {
                double* plane = img + static_cast<long>(ch) * h * w;
                for (int i = 0; i < kh; i++) {
                    int iy = oy * stride - pad + i;
                    if (iy < 0 || iy >= h) continue;
                    double* line = plane + static_cast<long>(iy) * w;
                    const double* src = row + (static_cast<long>(ch) * kh + i) * kw;
                    for (int j = 0; j < kw; j++) {
                        int ix = ox * stride - pad + j;
                        if (ix >= 0 && ix < w) line[ix] += src[j];
                    }
                }
            }
        }
    }
}

// scatter-add from col(K, P) back onto the image
inline void col2im_kp_acc(const double* __restrict col, int c, int h, int w, int kh, int kw,
                          int stride, int pad, int ph, int pw, double* __restrict img) {
    const long positions = static_cast<long>(ph) * pw;
    for (int ch = 0; ch < c; ch++) {
        double* plane = img + static_cast<long>(ch) * h * w;
        for (int i = 0; i < kh; i++) {
            for (int j = 0; j < kw; j++) {
                const double* row =
                    col + (static_cast<long>(ch) * kh * kw + i * kw + j) * positions;
                long p = 0;
                for (int oy = 0; oy < ph; oy++) {
                    int iy = oy * stride - pad + i;
                    if (iy < 0 || iy >= h) {
                        p += pw;
                        continue;
                    }
                    double* line = plane + static_cast<long>(iy) * w;
                    for (int ox = 0; ox < pw; ox++) {
                        int ix = ox * stride - pad + j;
                        if (ix >= 0 && ix < w) line[ix] += row[p];
                        p++;
                    }
                }
            }
        }
    }
}

// ---- reverse-mode tape -----------------------------------------------------
//
// Define-by-run: every operation appends a node holding its forward value and
// an adjoint closure. Nodes are created in topological order, so the backward
// pass is a single reverse sweep that visits each node exactly once.
// Operations never mutate their inputs.
class Tape {
public:
    // record=false builds values only (no adjoint closures); used for inference.
    explicit Tape(bool record = true) : record_(record) {}

    int leaf(Tensor v) { return push(std::move(v), {}); }

    // Non-owning leaf: avoids copying large parameter tensors into the graph.
    // The caller keeps the tensor alive for the tape's lifetime.
    int leaf_view(const Tensor* v) {
        Node n;
        n.view = v;
        nodes_.push_back(std::move(n));
        return static_cast<int>(nodes_.size()) - 1;
    }

    const Tensor& value(int id) const {
        const Node& n = nodes_[id];
        return n.view ? *n.view : n.value;
    }
    const Tensor& grad(int id) const { return nodes_[id].grad; }
    std::size_t node_count() const { return nodes_.size(); }

    // -- elementwise ----------------------------------------------------------

    // add: identical shapes, or b broadcast across the rows of 2-d a
    int add(int a, int b) {
        const Tensor& ta = value(a);
        const Tensor& tb = value(b);
        if (ta.same_shape(tb)) {
            Tensor out = ta;
            for (long i = 0; i < out.size(); i++) out[i] += tb[i];
            return push(std::move(out), [a, b](Tape& t, int self) {
                const Tensor& g = t.nodes_[self].grad;
                Tensor& ga = t.nodes_[a].grad;
                Tensor& gb = t.nodes_[b].grad;
                for (long i = 0; i < g.size(); i++) {
                    ga[i] += g[i];
                    gb[i] += g[i];
                }
            });
        }
        if (ta.rank() == 2 && tb.rank() == 1 && ta.shape[1] == tb.shape[0]) {
            Tensor out = ta;
            int rows = ta.shape[0], cols = ta.shape[1];
            for (int i = 0; i < rows; i++)
                for (int j = 0; j < cols; j++) out.at(i, j) += tb[j];
            return push(std::move(out), [a, b, rows, cols](Tape& t, int self) {
                const Tensor& g = t.nodes_[self].grad;
                Tensor& ga = t.nodes_[a].grad;
                Tensor& gb = t.nodes_[b].grad;
                for (int i = 0; i < rows; i++)
                    for (int j = 0; j < cols; j++) {
                        double gv = g[static_cast<long>(i) * cols + j];
                        ga[static_cast<long>(i) * cols + j] += gv;
                        gb[j] += gv;
                    }
            });
        }
        throw ShapeError("add: shape mismatch " + shape_str(ta.shape) + " vs " +
                         shape_str(tb.shape));
    }

    int mul(int a, int b) {
        const Tensor& ta = value(a);
        const Tensor& tb = value(b);
        require_same_shape(ta, tb, "mul");
        Tensor out = ta;
        for (long i = 0; i < out.size(); i++) out[i] *= tb[i];
        return push(std::move(out), [a, b](Tape& t, int self) {
            const Tensor& g = t.nodes_[self].grad;
            const Tensor& va = t.value(a);
            const Tensor& vb = t.value(b);
            Tensor& ga = t.nodes_[a].grad;
            Tensor& gb = t.nodes_[b].grad;
            for (long i = 0; i < g.size(); i++) {
                ga[i] += g[i] * vb[i];
                gb[i] += g[i] * va[i];
            }
        });
    }

    int scale(int a, double c) {
        Tensor out = value(a);
        for (double& x : out.data) x *= c;
        return push(std::move(out), [a, c](Tape& t, int self) {
            const Tensor& g = t.nodes_[self].grad;
            Tensor& ga = t.nodes_[a].grad;
            for (long i = 0; i < g.size(); i++) ga[i] += c * g[i];
        });
    }

    int add_const(int a, double c) {
        Tensor out = value(a);
        for (double& x : out.data) x += c;
        return push(std::move(out), [a](Tape& t, int self) {
            const Tensor& g = t.nodes_[self].grad;
            Tensor& ga = t.nodes_[a].grad;
            for (long i = 0; i < g.size(); i++) ga[i] += g[i];
        });
    }

    int relu(int a) {
        Tensor out = value(a);
        for (double& x : out.data) x = x > 0.0 ? x : 0.0;
        return push(std::move(out), [a](Tape& t, int self) {
            const Tensor& g = t.nodes_[self].grad;
            const Tensor& v = t.value(a);
            Tensor& ga = t.nodes_[a].grad;
            for (long i = 0; i < g.size(); i++)
                if (v[i] > 0.0) ga[i] += g[i];
        });
    }

    int tanh(int a) {
        Tensor out = value(a);
        for (double& x : out.data) x = std::tanh(x);
        return push(std::move(out), [a](Tape& t, int self) {
            const Tensor& g = t.nodes_[self].grad;
            const Tensor& y = t.value(self);
            Tensor& ga = t.nodes_[a].grad;
            for (long i = 0; i < g.size(); i++) ga[i] += g[i] * (1.0 - y[i] * y[i]);
        });
    }

    int sigmoid(int a) {
        Tensor out = value(a);
        for (double& x : out.data) x = 1.0 / (1.0 + std::exp(-x));
        return push(std::move(out), [a](Tape& t, int self) {
            const Tensor& g = t.nodes_[self].grad;
            const Tensor& y = t.value(self);
            Tensor& ga = t.nodes_[a].grad;
            for (long i = 0; i < g.size(); i++) ga[i] += g[i] * y[i] * (1.0 - y[i]);
        });
    }

    int exp(int a) {
        Tensor out = value(a);
        for (double& x : out.data) x = std::exp(x);
        return push(std::move(out), [a](Tape& t, int self) {
            const Tensor& g = t.nodes_[self].grad;
            const Tensor& y = t.value(self);
            Tensor& ga = t.nodes_[a].grad;
            for (long i = 0; i < g.size(); i++) ga[i] += g[i] * y[i];
        });
    }

    int log(int a) {
        Tensor out = value(a);
        for (double& x : out.data) x = std::log(x);
        return push(std::move(out), [a](Tape& t, int self) {
            const Tensor& g = t.nodes_[self].grad;
            const Tensor& v = t.value(a);
            Tensor& ga = t.nodes_[a].grad;
            for (long i = 0; i < g.size(); i++) ga[i] += g[i] / v[i];
        });
    }

    // clamp with pass-through adjoint strictly inside (lo, hi)
    int clamp(int a, double lo, double hi) {
        Tensor out = value(a);
        for (double& x : out.data) x = x < lo ? lo : (x > hi ? hi : x);
        return push(std::move(out), [a, lo, hi](Tape& t, int self) {
            const Tensor& g = t.nodes_[self].grad;
            const Tensor& v = t.value(a);
            Tensor& ga = t.nodes_[a].grad;
            for (long i = 0; i < g.size(); i++)
                if (v[i] > lo && v[i] < hi) ga[i] += g[i];
        });
    }

    // -- reductions / structure -------------------------------------------------

    int sum(int a) {
        double s = 0.0;
        for (double x : value(a).data) s += x;
        return push(Tensor::scalar(s), [a](Tape& t, int self) {
            double g = t.nodes_[self].grad[0];
            Tensor& ga = t.nodes_[a].grad;
            for (long i = 0; i < ga.size(); i++) ga[i] += g;
        });
    }

    int mean(int a) {
        long n = value(a).size();
        double s = 0.0;
        for (double x : value(a).data) s += x;
        return push(Tensor::scalar(s / static_cast<double>(n)), [a, n](Tape& t, int self) {
            double g = t.nodes_[self].grad[0] / static_cast<double>(n);
            Tensor& ga = t.nodes_[a].grad;
            for (long i = 0; i < ga.size(); i++) ga[i] += g;
        });
    }

    int reshape(int a, std::vector<int> shape) {
        const Tensor& ta = value(a);
        if (shape_numel(shape) != ta.size())
            throw ShapeError("reshape: cannot view " + shape_str(ta.shape) + " as " +
                             shape_str(shape));
        Tensor out(std::move(shape), ta.data);
        return push(std::move(out), [a](Tape& t, int self) {
            const Tensor& g = t.nodes_[self].grad;
            Tensor& ga = t.nodes_[a].grad;
            for (long i = 0; i < g.size(); i++) ga[i] += g[i];
        });
    }

    // slice along the last axis: out[..., j] = a[..., start + j]
    int slice(int a, int start, int len) {
        const Tensor& ta = value(a);
        int last = ta.shape.back();
        if (start < 0 || len <= 0 || start + len > last)
            throw ShapeError("slice: [" + std::to_string(start) + ", " +
                             std::to_string(start + len) + ") out of range for " +
                             shape_str(ta.shape));
        long rows = ta.size() / last;
        std::vector<int> oshape = ta.shape;
        oshape.back() = len;
        Tensor out = Tensor::zeros(oshape);
        for (long r = 0; r < rows; r++)
            for (int j = 0; j < len; j++) out[r * len + j] = ta[r * last + start + j];
        return push(std::move(out), [a, start, len, last, rows](Tape& t, int self) {
            const Tensor& g = t.nodes_[self].grad;
            Tensor& ga = t.nodes_[a].grad;
            for (long r = 0; r < rows; r++)
                for (int j = 0; j < len; j++) ga[r * last + start + j] += g[r * len + j];
        });
    }

    // concat along the last axis
    int concat(int a, int b) {
        const Tensor& ta = value(a);
        const Tensor& tb = value(b);
        if (ta.rank() != tb.rank())
            throw ShapeError("concat: rank mismatch " + shape_str(ta.shape) + " vs " +
                             shape_str(tb.shape));
        for (int i = 0; i + 1 < ta.rank(); i++)
            if (ta.shape[i] != tb.shape[i])
                throw ShapeError("concat: shape mismatch " + shape_str(ta.shape) + " vs " +
                                 shape_str(tb.shape));
        int la = ta.shape.back(), lb = tb.shape.back();
        long rows = ta.size() / la;
        std::vector<int> oshape = ta.shape;
        oshape.back() = la + lb;
        Tensor out = Tensor::zeros(oshape);
        for (long r = 0; r < rows; r++) {
            for (int j = 0; j < la; j++) out[r * (la + lb) + j] = ta[r * la + j];
            for (int j = 0; j < lb; j++) out[r * (la + lb) + la + j] = tb[r * lb + j];
        }
        return push(std::move(out), [a, b, la, lb, rows](Tape& t, int self) {
            const Tensor& g = t.nodes_[self].grad;
            Tensor& ga = t.nodes_[a].grad;
            Tensor& gb = t.nodes_[b].grad;
            for (long r = 0; r < rows; r++) {
                for (int j = 0; j < la; j++) ga[r * la + j] += g[r * (la + lb) + j];
                for (int j = 0; j < lb; j++) gb[r * lb + j] += g[r * (la + lb) + la + j];
            }
        });
    }

    // -- linear algebra -----------------------------------------------------------

    int matmul(int a, int b) {
        const Tensor& ta = value(a);
        const Tensor& tb = value(b);
        if (ta.rank() != 2 || tb.rank() != 2 || ta.shape[1] != tb.shape[0])
            throw ShapeError("matmul: incompatible " + shape_str(ta.shape) + " vs " +
                             shape_str(tb.shape));
        int m = ta.shape[0], k = ta.shape[1], n = tb.shape[1];
        Tensor out = Tensor::zeros({m, n});
        mm_nn_acc(ta.data.data(), tb.data.data(), out.data.data(), m, k, n);
        return push(std::move(out), [a, b, m, k, n](Tape& t, int self) {
            const Tensor& g = t.nodes_[self].grad;
            const Tensor& va = t.value(a);
            const Tensor& vb = t.value(b);
            // dA += dC * B^T ; dB += A^T * dC
            mm_nt_acc(g.data.data(), vb.data.data(), t.nodes_[a].grad.data.data(), m, n, k);
            mm_tn_acc(va.data.data(), g.data.data(), t.nodes_[b].grad.data.data(), k, m, n);
        });
    }

    // x: (C, H, W), w: (C, kh, kw, F), bias: (F) node or -1.
    // The weight's leading axes match the im2col K order, so no large
    // transpose is ever materialized.
    int conv2d(int x, int w, int bias, int stride, int pad) {
        const Tensor& tx = value(x);
        const Tensor& tw = value(w);
        if (tx.rank() != 3 || tw.rank() != 4 || tw.shape[0] != tx.shape[0])
            throw ShapeError("conv2d: incompatible " + shape_str(tx.shape) + " vs " +
                             shape_str(tw.shape));
        int c = tx.shape[0], h = tx.shape[1], wd = tx.shape[2];
        int kh = tw.shape[1], kw = tw.shape[2], f = tw.shape[3];
        int ho = (h + 2 * pad - kh) / stride + 1;
        int wo = (wd + 2 * pad - kw) / stride + 1;
        if (ho <= 0 || wo <= 0)
            throw ShapeError("conv2d: kernel " + shape_str(tw.shape) + " too large for input " +
                             shape_str(tx.shape));
        if (bias >= 0 && value(bias).size() != f)
            throw ShapeError("conv2d: bias shape " + shape_str(value(bias).shape) +
                             " vs filters " + std::to_string(f));
        const int kdim = c * kh * kw;
        const int pos = ho * wo;
        std::vector<double> col(static_cast<std::size_t>(kdim) * pos);
        im2col_pk(tx.data.data(), c, h, wd, kh, kw, stride, pad, ho, wo, col.data());
        // out^T(P, F) = col(P, K) * W(K, F), transposed into (F, P)
        std::vector<double> out_t(static_cast<std::size_t>(pos) * f, 0.0);
        mm_nn_acc(col.data(), tw.data.data(), out_t.data(), pos, kdim, f);
        Tensor out = Tensor::zeros({f, ho, wo});
        transpose_to(out_t.data(), out.data.data(), pos, f);
        if (bias >= 0) {
            const Tensor& tb = value(bias);
            for (int fi = 0; fi < f; fi++) {
                double bv = tb[fi];
                double* plane = out.data.data() + static_cast<long>(fi) * pos;
                for (int p = 0; p < pos; p++) plane[p] += bv;
            }
        }
        return push(std::move(out),
                    [x, w, bias, stride, pad, c, h, wd, f, kh, kw, ho, wo](Tape& t, int self) {
                        const Tensor& g = t.nodes_[self].grad;
                        const Tensor& vx = t.value(x);
                        const Tensor& vw = t.value(w);
                        const int kdim = c * kh * kw;
                        const int pos = ho * wo;
                        std::vector<double> col(static_cast<std::size_t>(kdim) * pos);
                        im2col_pk(vx.data.data(), c, h, wd, kh, kw, stride, pad, ho, wo,
                                  col.data());
                        std::vector<double> g_t(static_cast<std::size_t>(pos) * f);
                        transpose_to(g.data.data(), g_t.data(), f, pos);
                        // dW(K, F) += col(P, K)^T * g^T(P, F)
                        mm_tn_acc(col.data(), g_t.data(), t.nodes_[w].grad.data.data(), kdim, pos,
                                  f);
                        // dcol(K, P) = W(K, F) * g(F, P), scattered back onto dX
                        std::vector<double> dcol(static_cast<std::size_t>(kdim) * pos, 0.0);
                        mm_nn_acc(vw.data.data(), g.data.data(), dcol.data(), kdim, f, pos);
                        col2im_kp_acc(dcol.data(), c, h, wd, kh, kw, stride, pad, ho, wo,
                                      t.nodes_[x].grad.data.data());
                        if (bias >= 0) {
                            Tensor& gb = t.nodes_[bias].grad;
                            for (int fi = 0; fi < f; fi++) {
                                const double* plane = g.data.data() + static_cast<long>(fi) * pos;
                                double s = 0.0;
                                for (int p = 0; p < pos; p++) s += plane[p];
                                gb[fi] += s;
                            }
                        }
                    });
    }

    // x: (C, H, W), w: (C, F, kh, kw), bias: (F) node or -1
    // out: (F, (H-1)*stride - 2*pad + kh, (W-1)*stride - 2*pad + kw)
    int conv2d_transpose(int x, int w, int bias, int stride, int pad) {
        const Tensor& tx = value(x);
        const Tensor& tw = value(w);
        if (tx.rank() != 3 || tw.rank() != 4 || tw.shape[0] != tx.shape[0])
            throw ShapeError("conv2d_transpose: incompatible " + shape_str(tx.shape) + " vs " +
                             shape_str(tw.shape));
        int c = tx.shape[0], hi = tx.shape[1], wi = tx.shape[2];
        int f = tw.shape[1], kh = tw.shape[2], kw = tw.shape[3];
        int ho = (hi - 1) * stride - 2 * pad + kh;
        int wo = (wi - 1) * stride - 2 * pad + kw;
        if (ho <= 0 || wo <= 0)
            throw ShapeError("conv2d_transpose: degenerate output for input " +
                             shape_str(tx.shape));
        if (bias >= 0 && value(bias).size() != f)
            throw ShapeError("conv2d_transpose: bias shape " +
                             shape_str(value(bias).shape) + " vs filters " +
                             std::to_string(f));
        const int kdim = f * kh * kw;
        const long pin = static_cast<long>(hi) * wi;
        // col(Pin, K) = x(C, Pin)^T * W(C, K), scattered into the output image
        std::vector<double> col(static_cast<std::size_t>(kdim) * pin, 0.0);
        mm_tn_acc(tx.data.data(), tw.data.data(), col.data(), static_cast<int>(pin), c, kdim);
        Tensor out = Tensor::zeros({f, ho, wo});
        col2im_pk_acc(col.data(), f, ho, wo, kh, kw, stride, pad, hi, wi, out.data.data());
        if (bias >= 0) {
            const Tensor& tb = value(bias);
            const long po = static_cast<long>(ho) * wo;
            for (int fi = 0; fi < f; fi++) {
                double bv = tb[fi];
                double* plane = out.data.data() + fi * po;
                for (long p = 0; p < po; p++) plane[p] += bv;
            }
        }
        return push(std::move(out),
                    [x, w, bias, stride, pad, c, hi, wi, f, kh, kw, ho, wo](Tape& t, int self) {
                        const Tensor& g = t.nodes_[self].grad;
                        const Tensor& vx = t.value(x);
                        const Tensor& vw = t.value(w);
                        const int kdim = f * kh * kw;
                        const int pin = hi * wi;
                        // dX(C, Pin) += W(C, K) * gcol(K, Pin)
                        std::vector<double> gcol_kp(static_cast<std::size_t>(kdim) * pin);
                        im2col_kp(g.data.data(), f, ho, wo, kh, kw, stride, pad, hi, wi,
                                  gcol_kp.data());
                        mm_nn_acc(vw.data.data(), gcol_kp.data(), t.nodes_[x].grad.data.data(), c,
                                  kdim, pin);
                        // dW(C, K) += x(C, Pin) * gcol(Pin, K)
                        std::vector<double> gcol_pk(static_cast<std::size_t>(kdim) * pin);
                        im2col_pk(g.data.data(), f, ho, wo, kh, kw, stride, pad, hi, wi,
                                  gcol_pk.data());
                        mm_nn_acc(vx.data.data(), gcol_pk.data(), t.nodes_[w].grad.data.data(), c,
                                  pin, kdim);
                        if (bias >= 0) {
                            Tensor& gb = t.nodes_[bias].grad;
                            const long po = static_cast<long>(ho) * wo;
                            for (int fi = 0; fi < f; fi++) {
                                const double* plane = g.data.data() + fi * po;
                                double s = 0.0;
                                for (long p = 0; p < po; p++) s += plane[p];
                                gb[fi] += s;
                            }
                        }
                    });
    }

    // -- derived conveniences -------------------------------------------------

    int neg(int a) { return scale(a, -1.0); }
    int sub(int a, int b) { return add(a, scale(b, -1.0)); }
    int square(int a) { return mul(a, a); }

    // -- backward ----------------------------------------------------------------

    // Accumulates d(loss)/d(node) for every node up to and including `loss`.
    void backward(int loss) {
        if (!record_) throw ContractError("backward: tape was built with record=false");
        if (value(loss).size() != 1)
            throw ContractError("backward: loss must be scalar, got shape " +
                                shape_str(value(loss).shape));
        for (auto& n : nodes_) n.grad = Tensor::zeros(n.view ? n.view->shape : n.value.shape);
        nodes_[loss].grad[0] = 1.0;
        for (int i = loss; i >= 0; i--)
            if (nodes_[i].back) nodes_[i].back(*this, i);
    }

private:
    struct Node {
        Tensor value;
        const Tensor* view = nullptr;  // set for non-owning leaves
        Tensor grad;
        std::function<void(Tape&, int)> back;
    };

    int push(Tensor value, std::function<void(Tape&, int)> back) {
        Node n;
        n.value = std::move(value);
        if (record_) n.back = std::move(back);
        nodes_.push_back(std::move(n));
        return static_cast<int>(nodes_.size()) - 1;
    }

    bool record_;
    std::vector<Node> nodes_;
};

}  // namespace lanekeep
