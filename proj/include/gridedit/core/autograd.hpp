#pragma once

// Minimal reverse-mode automatic differentiation over dense row-major tensors.
//
// A Var is a handle to a graph node. Operations record a backward closure only
// while gradient recording is enabled and at least one input requires a
// gradient; otherwise results are plain values and intermediates are released
// as soon as their handles go out of scope.

#include <Eigen/Dense>

#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <string>
#include <unordered_set>
#include <vector>

#include "gridedit/core/error.hpp"

namespace gridedit::ag {

template <class S>
using RowMat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class S>
using MatMap = Eigen::Map<RowMat<S>>;
template <class S>
using CMatMap = Eigen::Map<const RowMat<S>>;
template <class S>
using StridedMap = Eigen::Map<RowMat<S>, 0, Eigen::OuterStride<>>;
template <class S>
using CStridedMap = Eigen::Map<const RowMat<S>, 0, Eigen::OuterStride<>>;

// 64-byte aligned storage keeps Eigen's vectorized kernels independent of heap layout.
template <class S>
using Buffer = std::vector<S, Eigen::aligned_allocator<S>>;

using Shape = std::vector<int>;

inline std::size_t numel(const Shape& s) {
    return std::accumulate(s.begin(), s.end(), std::size_t{1},
                           [](std::size_t a, int b) { return a * static_cast<std::size_t>(b); });
}

inline std::string shape_str(const Shape& s) {
    std::string r = "[";
    for (std::size_t i = 0; i < s.size(); ++i) r += (i ? "," : "") + std::to_string(s[i]);
    return r + "]";
}

inline thread_local bool t_grad_enabled = true;

class NoGradGuard {
public:
    NoGradGuard() : prev_(t_grad_enabled) { t_grad_enabled = false; }
    ~NoGradGuard() { t_grad_enabled = prev_; }
    NoGradGuard(const NoGradGuard&)            = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool prev_;
};

template <class S>
struct Node {
    Buffer<S> value;
    Buffer<S> grad;
    Shape shape;
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward;

    S* grad_data() {
        if (grad.size() != value.size()) grad.assign(value.size(), S(0));
        return grad.data();
    }
};

template <class S>
class Var {
public:
    Var() = default;
    explicit Var(std::shared_ptr<Node<S>> n) : node_(std::move(n)) {}

    static Var constant(Buffer<S> v, Shape shape) {
        if (v.size() != numel(shape)) throw ShapeError("constant: value size does not match " + shape_str(shape));
        auto n   = std::make_shared<Node<S>>();
        n->value = std::move(v);
        n->shape = std::move(shape);
        return Var(std::move(n));
    }

    static Var constant(const std::vector<S>& v, Shape shape) {
        return constant(Buffer<S>(v.begin(), v.end()), std::move(shape));
    }

    static Var parameter(Buffer<S> v, Shape shape) {
        Var p               = constant(std::move(v), std::move(shape));
        p.node_->requires_grad = true;
        return p;
    }

    bool defined() const { return static_cast<bool>(node_); }
    const Shape& shape() const { return node_->shape; }
    int dim(int i) const { return node_->shape[static_cast<std::size_t>(i)]; }
    std::size_t size() const { return node_->value.size(); }
    const Buffer<S>& value() const { return node_->value; }
    Buffer<S>& mutable_value() { return node_->value; }
    const S* data() const { return node_->value.data(); }
    bool requires_grad() const { return node_->requires_grad; }
    Buffer<S>& grad() { return node_->grad; }
    const Buffer<S>& grad() const { return node_->grad; }
    Node<S>* node() const { return node_.get(); }
    const std::shared_ptr<Node<S>>& ptr() const { return node_; }

    void zero_grad() { node_->grad.assign(node_->value.size(), S(0)); }

    S item() const {
        if (size() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
        return node_->value[0];
    }

private:
    std::shared_ptr<Node<S>> node_;
};

// Creates the result node of an operation. `bw` receives the finished node and
// must accumulate into the parents' gradients.
template <class S>
Var<S> make_result(Buffer<S> value, Shape shape, std::vector<std::shared_ptr<Node<S>>> parents,
                   std::function<void(Node<S>&)> bw) {
    auto n   = std::make_shared<Node<S>>();
    n->value = std::move(value);
    n->shape = std::move(shape);
    bool any = false;
    for (const auto& p : parents) any = any || p->requires_grad;
    if (t_grad_enabled && any) {
        n->requires_grad = true;
        n->parents       = std::move(parents);
        n->backward      = std::move(bw);
    }
    return Var<S>(std::move(n));
}

// Runs reverse accumulation from a scalar root. Leaf gradients accumulate so a
// batch can be processed as several graphs before an optimizer step.
template <class S>
void backward(const Var<S>& root) {
    if (root.size() != 1) throw ShapeError("backward() requires a scalar root");
    if (!root.requires_grad()) return;
    std::vector<Node<S>*> order;
    std::unordered_set<Node<S>*> seen;
    std::vector<std::pair<Node<S>*, std::size_t>> stack{{root.node(), 0}};
    seen.insert(root.node());
    while (!stack.empty()) {
        auto& [n, i] = stack.back();
        if (i < n->parents.size()) {
            Node<S>* p = n->parents[i++].get();
            if (p->requires_grad && !seen.count(p)) {
                seen.insert(p);
                stack.emplace_back(p, 0);
            }
        } else {
            order.push_back(n);
            stack.pop_back();
        }
    }
    for (Node<S>* n : order) {
        if (n->backward) n->grad.assign(n->value.size(), S(0));
    }
    root.node()->grad_data()[0] += S(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node<S>* n = *it;
        if (n->backward) {
            n->backward(*n);
            n->grad.clear();
            n->grad.shrink_to_fit();
        }
    }
}

namespace detail {

template <class S>
void require_shape(const Var<S>& a, const Var<S>& b, const char* op) {
    if (a.shape() != b.shape()) {
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
    }
}

template <class S>
void require_rank(const Var<S>& a, std::size_t rank, const char* op) {
    if (a.shape().size() != rank) {
        throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                         shape_str(a.shape()));
    }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise

template <class S>
Var<S> add(const Var<S>& a, const Var<S>& b) {
    detail::require_shape(a, b, "add");
    Buffer<S> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] + b.value()[i];
    auto pa = a.ptr(), pb = b.ptr();
    return make_result<S>(std::move(out), a.shape(), {pa, pb}, [pa, pb](Node<S>& self) {
        for (auto* p : {pa.get(), pb.get()}) {
            if (!p->requires_grad) continue;
            S* g = p->grad_data();
            for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
        }
    });
}

template <class S>
Var<S> sub(const Var<S>& a, const Var<S>& b) {
    detail::require_shape(a, b, "sub");
    Buffer<S> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] - b.value()[i];
    auto pa = a.ptr(), pb = b.ptr();
    return make_result<S>(std::move(out), a.shape(), {pa, pb}, [pa, pb](Node<S>& self) {
        if (pa->requires_grad) {
            S* g = pa->grad_data();
            for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
        }
        if (pb->requires_grad) {
            S* g = pb->grad_data();
            for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] -= self.grad[i];
        }
    });
}

template <class S>
Var<S> scale(const Var<S>& a, S s) {
    Buffer<S> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] * s;
    auto pa = a.ptr();
    return make_result<S>(std::move(out), a.shape(), {pa}, [pa, s](Node<S>& self) {
        S* g = pa->grad_data();
        for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * s;
    });
}

template <class S>
Var<S> silu(const Var<S>& a) {
    Buffer<S> out(a.size());
    const auto& x = a.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] / (S(1) + std::exp(-x[i]));
    auto pa = a.ptr();
    return make_result<S>(std::move(out), a.shape(), {pa}, [pa](Node<S>& self) {
        S* g           = pa->grad_data();
        const auto& xv = pa->value;
        for (std::size_t i = 0; i < self.grad.size(); ++i) {
            const S sig = S(1) / (S(1) + std::exp(-xv[i]));
            g[i] += self.grad[i] * sig * (S(1) + xv[i] * (S(1) - sig));
        }
    });
}

// tanh approximation of GELU
template <class S>
Var<S> gelu(const Var<S>& a) {
    constexpr double kC = 0.7978845608028654;  // sqrt(2/pi)
    Buffer<S> out(a.size());
    const auto& x = a.value();
    for (std::size_t i = 0; i < out.size(); ++i) {
        const S u = S(kC) * (x[i] + S(0.044715) * x[i] * x[i] * x[i]);
        out[i]    = S(0.5) * x[i] * (S(1) + std::tanh(u));
    }
    auto pa = a.ptr();
    return make_result<S>(std::move(out), a.shape(), {pa}, [pa](Node<S>& self) {
        S* g           = pa->grad_data();
        const auto& xv = pa->value;
        for (std::size_t i = 0; i < self.grad.size(); ++i) {
            const S xi = xv[i];
            const S u  = S(kC) * (xi + S(0.044715) * xi * xi * xi);
            const S th = std::tanh(u);
            const S du = S(kC) * (S(1) + S(3 * 0.044715) * xi * xi);
            g[i] += self.grad[i] * (S(0.5) * (S(1) + th) + S(0.5) * xi * (S(1) - th * th) * du);
        }
    });
}

// x[C,H,W] + v[C] broadcast over space, or x[L,D] + v[D] broadcast over rows.
template <class S>
Var<S> add_channel(const Var<S>& x, const Var<S>& v) {
    const bool spatial = x.shape().size() == 3;
    const int channels = spatial ? x.dim(0) : x.dim(1);
    if (static_cast<int>(v.size()) != channels) {
        throw ShapeError("add_channel: vector of size " + std::to_string(v.size()) + " for tensor " +
                         shape_str(x.shape()));
    }
    const std::size_t inner = spatial ? static_cast<std::size_t>(x.dim(1)) * x.dim(2) : 1;
    const std::size_t rows  = spatial ? 1 : static_cast<std::size_t>(x.dim(0));
    Buffer<S> out(x.value());
    for (std::size_t r = 0; r < rows; ++r)
        for (int c = 0; c < channels; ++c)
            for (std::size_t i = 0; i < inner; ++i) out[(r * channels + c) * inner + i] += v.value()[c];
    auto px = x.ptr(), pv = v.ptr();
    return make_result<S>(std::move(out), x.shape(), {px, pv},
                          [px, pv, channels, inner, rows](Node<S>& self) {
                              if (px->requires_grad) {
                                  S* g = px->grad_data();
                                  for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
                              }
                              if (pv->requires_grad) {
                                  S* g = pv->grad_data();
                                  for (std::size_t r = 0; r < rows; ++r)
                                      for (int c = 0; c < channels; ++c) {
                                          S acc = 0;
                                          for (std::size_t i = 0; i < inner; ++i)
                                              acc += self.grad[(r * channels + c) * inner + i];
                                          g[c] += acc;
                                      }
                              }
                          });
}

// ---------------------------------------------------------------------------
// Linear algebra

// y[L,Dout] = x[L,Din] * W[Dout,Din]^T (+ b[Dout])
template <class S>
Var<S> linear(const Var<S>& x, const Var<S>& w, const Var<S>* b = nullptr) {
    detail::require_rank(x, 2, "linear");
    const int rows = x.dim(0), din = x.dim(1), dout = w.dim(0);
    if (w.dim(1) != din) {
        throw ShapeError("linear: input width " + std::to_string(din) + " vs weight " + shape_str(w.shape()));
    }
    Buffer<S> out(static_cast<std::size_t>(rows) * dout);
    MatMap<S> y(out.data(), rows, dout);
    CMatMap<S> xm(x.data(), rows, din), wm(w.data(), dout, din);
    y.noalias() = xm * wm.transpose();
    if (b) {
        for (int r = 0; r < rows; ++r)
            for (int o = 0; o < dout; ++o) y(r, o) += b->value()[o];
    }
    auto px = x.ptr(), pw = w.ptr();
    std::shared_ptr<Node<S>> pb = b ? b->ptr() : nullptr;
    std::vector<std::shared_ptr<Node<S>>> parents{px, pw};
    if (pb) parents.push_back(pb);
    return make_result<S>(std::move(out), {rows, dout}, std::move(parents),
                          [px, pw, pb, rows, din, dout](Node<S>& self) {
                              CMatMap<S> gy(self.grad.data(), rows, dout);
                              if (px->requires_grad) {
                                  MatMap<S> gx(px->grad_data(), rows, din);
                                  gx.noalias() += gy * CMatMap<S>(pw->value.data(), dout, din);
                              }
                              if (pw->requires_grad) {
                                  MatMap<S> gw(pw->grad_data(), dout, din);
                                  gw.noalias() += gy.transpose() * CMatMap<S>(px->value.data(), rows, din);
                              }
                              if (pb && pb->requires_grad) {
                                  S* g = pb->grad_data();
                                  for (int r = 0; r < rows; ++r)
                                      for (int o = 0; o < dout; ++o) g[o] += gy(r, o);
                              }
                          });
}

// 2-D convolution of x[Cin,H,W] with w[Cout, Cin*k*k], zero padding, via im2col.
template <class S>
Var<S> conv2d(const Var<S>& x, const Var<S>& w, const Var<S>* b, int k, int stride, int pad) {
    detail::require_rank(x, 3, "conv2d");
    const int cin = x.dim(0), h = x.dim(1), wd = x.dim(2), cout = w.dim(0);
    const int kk = cin * k * k;
    if (w.dim(1) != kk) {
        throw ShapeError("conv2d: input channels " + std::to_string(cin) + " vs weight " + shape_str(w.shape()));
    }
    const int ho = (h + 2 * pad - k) / stride + 1, wo = (wd + 2 * pad - k) / stride + 1;
    if (ho <= 0 || wo <= 0) throw ShapeError("conv2d: empty output for input " + shape_str(x.shape()));
    const int npix    = ho * wo;
    const bool direct = k == 1 && stride == 1 && pad == 0;

    Buffer<S> cols;
    if (!direct) {
        cols.assign(static_cast<std::size_t>(kk) * npix, S(0));
        const S* xv = x.data();
        for (int c = 0; c < cin; ++c)
            for (int ky = 0; ky < k; ++ky)
                for (int kx = 0; kx < k; ++kx) {
                    S* row = cols.data() + static_cast<std::size_t>((c * k + ky) * k + kx) * npix;
                    for (int oy = 0; oy < ho; ++oy) {
                        const int iy = oy * stride - pad + ky;
                        if (iy < 0 || iy >= h) continue;
                        const S* src = xv + (static_cast<std::size_t>(c) * h + iy) * wd;
                        S* dst       = row + static_cast<std::size_t>(oy) * wo;
                        for (int ox = 0; ox < wo; ++ox) {
                            const int ix = ox * stride - pad + kx;
                            if (ix >= 0 && ix < wd) dst[ox] = src[ix];
                        }
                    }
                }
    }
    const S* cdata = direct ? x.data() : cols.data();
    Buffer<S> out(static_cast<std::size_t>(cout) * npix);
    MatMap<S> y(out.data(), cout, npix);
    y.noalias() = CMatMap<S>(w.data(), cout, kk) * CMatMap<S>(cdata, kk, npix);
    if (b) {
        for (int o = 0; o < cout; ++o) y.row(o).array() += b->value()[o];
    }
    auto px = x.ptr(), pw = w.ptr();
    std::shared_ptr<Node<S>> pb = b ? b->ptr() : nullptr;
    std::vector<std::shared_ptr<Node<S>>> parents{px, pw};
    if (pb) parents.push_back(pb);
    const bool keep_cols = t_grad_enabled && (pw->requires_grad || px->requires_grad);
    auto saved = std::make_shared<Buffer<S>>(keep_cols && !direct ? std::move(cols) : Buffer<S>{});
    return make_result<S>(
        std::move(out), {cout, ho, wo}, std::move(parents),
        [px, pw, pb, saved, cin, h, wd, cout, k, stride, pad, ho, wo, npix, kk, direct](Node<S>& self) {
            CMatMap<S> gy(self.grad.data(), cout, npix);
            if (pw->requires_grad) {
                const S* cdata = direct ? px->value.data() : saved->data();
                MatMap<S> gw(pw->grad_data(), cout, kk);
                gw.noalias() += gy * CMatMap<S>(cdata, kk, npix).transpose();
            }
            if (pb && pb->requires_grad) {
                S* g = pb->grad_data();
                for (int o = 0; o < cout; ++o) g[o] += gy.row(o).sum();
            }
            if (px->requires_grad) {
                if (direct) {
                    MatMap<S> gx(px->grad_data(), kk, npix);
                    gx.noalias() += CMatMap<S>(pw->value.data(), cout, kk).transpose() * gy;
                } else {
                    RowMat<S> gcols = CMatMap<S>(pw->value.data(), cout, kk).transpose() * gy;
                    S* gx           = px->grad_data();
                    for (int c = 0; c < cin; ++c)
                        for (int ky = 0; ky < k; ++ky)
                            for (int kx = 0; kx < k; ++kx) {
                                const S* row = gcols.data() + static_cast<std::size_t>((c * k + ky) * k + kx) * npix;
                                for (int oy = 0; oy < ho; ++oy) {
                                    const int iy = oy * stride - pad + ky;
                                    if (iy < 0 || iy >= h) continue;
                                    S* dst       = gx + (static_cast<std::size_t>(c) * h + iy) * wd;
                                    const S* src = row + static_cast<std::size_t>(oy) * wo;
                                    for (int ox = 0; ox < wo; ++ox) {
                                        const int ix = ox * stride - pad + kx;
                                        if (ix >= 0 && ix < wd) dst[ix] += src[ox];
                                    }
                                }
                            }
                }
            }
        });
}

// ---------------------------------------------------------------------------
// Normalization

// GroupNorm over x[C,H,W] with per-channel affine parameters.
template <class S>
Var<S> group_norm(const Var<S>& x, const Var<S>& gamma, const Var<S>& beta, int groups, S eps = S(1e-5)) {
    detail::require_rank(x, 3, "group_norm");
    const int c = x.dim(0);
    if (c % groups != 0) throw ShapeError("group_norm: channels not divisible by groups");
    const std::size_t hw = static_cast<std::size_t>(x.dim(1)) * x.dim(2);
    const int cpg        = c / groups;
    const std::size_t n  = hw * cpg;
    auto xhat            = std::make_shared<Buffer<S>>(x.size());
    auto inv_std         = std::make_shared<Buffer<S>>(groups);
    Buffer<S> out(x.size());
    const S* xv = x.data();
    for (int g = 0; g < groups; ++g) {
        const std::size_t off = static_cast<std::size_t>(g) * n;
        double mean = 0, var = 0;
        for (std::size_t i = 0; i < n; ++i) mean += xv[off + i];
        mean /= double(n);
        for (std::size_t i = 0; i < n; ++i) {
            const double d = xv[off + i] - mean;
            var += d * d;
        }
        var /= double(n);
        const S is    = S(1.0 / std::sqrt(var + double(eps)));
        const S m     = S(mean);
        (*inv_std)[g] = is;
        for (int cc = 0; cc < cpg; ++cc) {
            const int ch         = g * cpg + cc;
            const S ga           = gamma.value()[ch], be = beta.value()[ch];
            const std::size_t o2 = off + static_cast<std::size_t>(cc) * hw;
            S* xh                = xhat->data() + o2;
            S* y                 = out.data() + o2;
            for (std::size_t i = 0; i < hw; ++i) {
                xh[i] = (xv[o2 + i] - m) * is;
                y[i]  = xh[i] * ga + be;
            }
        }
    }
    auto px = x.ptr(), pg = gamma.ptr(), pb = beta.ptr();
    return make_result<S>(std::move(out), x.shape(), {px, pg, pb},
                          [px, pg, pb, xhat, inv_std, groups, cpg, hw, n](Node<S>& self) {
                              const S* gy = self.grad.data();
                              const S* xh = xhat->data();
                              if (pg->requires_grad || pb->requires_grad) {
                                  S* gg = pg->grad_data();
                                  S* gb = pb->grad_data();
                                  for (int ch = 0; ch < groups * cpg; ++ch) {
                                      S sg = 0, sb = 0;
                                      const std::size_t o = static_cast<std::size_t>(ch) * hw;
                                      for (std::size_t i = 0; i < hw; ++i) {
                                          sg += gy[o + i] * xh[o + i];
                                          sb += gy[o + i];
                                      }
                                      gg[ch] += sg;
                                      gb[ch] += sb;
                                  }
                              }
                              if (!px->requires_grad) return;
                              S* gx = px->grad_data();
                              for (int g = 0; g < groups; ++g) {
                                  S m1 = 0, m2 = 0;
                                  for (int cc = 0; cc < cpg; ++cc) {
                                      const int ch        = g * cpg + cc;
                                      const S ga          = pg->value[ch];
                                      const std::size_t o = static_cast<std::size_t>(ch) * hw;
                                      S a1 = 0, a2 = 0;
                                      for (std::size_t i = 0; i < hw; ++i) {
                                          a1 += gy[o + i];
                                          a2 += gy[o + i] * xh[o + i];
                                      }
                                      m1 += a1 * ga;
                                      m2 += a2 * ga;
                                  }
                                  m1 /= S(n);
                                  m2 /= S(n);
                                  const S is = (*inv_std)[g];
                                  for (int cc = 0; cc < cpg; ++cc) {
                                      const int ch        = g * cpg + cc;
                                      const S ga          = pg->value[ch];
                                      const std::size_t o = static_cast<std::size_t>(ch) * hw;
                                      for (std::size_t i = 0; i < hw; ++i)
                                          gx[o + i] += is * (gy[o + i] * ga - m1 - xh[o + i] * m2);
                                  }
                              }
                          });
}

// LayerNorm over the rows of x[L,D].
template <class S>
Var<S> layer_norm(const Var<S>& x, const Var<S>& gamma, const Var<S>& beta, S eps = S(1e-5)) {
    detail::require_rank(x, 2, "layer_norm");
    const int rows = x.dim(0), d = x.dim(1);
    auto xhat      = std::make_shared<Buffer<S>>(x.size());
    auto inv_std   = std::make_shared<Buffer<S>>(rows);
    Buffer<S> out(x.size());
    for (int r = 0; r < rows; ++r) {
        const S* xr = x.data() + static_cast<std::size_t>(r) * d;
        double mean = 0, var = 0;
        for (int i = 0; i < d; ++i) mean += xr[i];
        mean /= d;
        for (int i = 0; i < d; ++i) var += (xr[i] - mean) * (xr[i] - mean);
        var /= d;
        const S is    = S(1.0 / std::sqrt(var + double(eps)));
        (*inv_std)[r] = is;
        for (int i = 0; i < d; ++i) {
            const std::size_t idx = static_cast<std::size_t>(r) * d + i;
            (*xhat)[idx]          = (xr[i] - S(mean)) * is;
            out[idx]              = (*xhat)[idx] * gamma.value()[i] + beta.value()[i];
        }
    }
    auto px = x.ptr(), pg = gamma.ptr(), pb = beta.ptr();
    return make_result<S>(std::move(out), x.shape(), {px, pg, pb}, [px, pg, pb, xhat, inv_std, rows, d](Node<S>& self) {
        const auto& gy = self.grad;
        if (pg->requires_grad || pb->requires_grad) {
            S* gg = pg->grad_data();
            S* gb = pb->grad_data();
            for (int r = 0; r < rows; ++r)
                for (int i = 0; i < d; ++i) {
                    const std::size_t idx = static_cast<std::size_t>(r) * d + i;
                    gg[i] += gy[idx] * (*xhat)[idx];
                    gb[i] += gy[idx];
                }
        }
        if (!px->requires_grad) return;
        S* gx = px->grad_data();
        for (int r = 0; r < rows; ++r) {
            S m1 = 0, m2 = 0;
            for (int i = 0; i < d; ++i) {
                const std::size_t idx = static_cast<std::size_t>(r) * d + i;
                const S dxh           = gy[idx] * pg->value[i];
                m1 += dxh;
                m2 += dxh * (*xhat)[idx];
            }
            m1 /= S(d);
            m2 /= S(d);
            for (int i = 0; i < d; ++i) {
                const std::size_t idx = static_cast<std::size_t>(r) * d + i;
                const S dxh           = gy[idx] * pg->value[i];
                gx[idx] += (*inv_std)[r] * (dxh - m1 - (*xhat)[idx] * m2);
            }
        }
    });
}

// ---------------------------------------------------------------------------
// Attention

// Multi-head scaled dot-product attention. q[Lq,D], k[Lk,D], v[Lk,D] -> [Lq,D];
// heads split D into contiguous slices.
template <class S>
Var<S> attention(const Var<S>& q, const Var<S>& k, const Var<S>& v, int heads) {
    detail::require_rank(q, 2, "attention");
    const int lq = q.dim(0), lk = k.dim(0), d = q.dim(1);
    if (k.dim(1) != d || v.dim(1) != d || v.dim(0) != lk) {
        throw ShapeError("attention: incompatible q/k/v " + shape_str(q.shape()) + " " + shape_str(k.shape()) +
                         " " + shape_str(v.shape()));
    }
    if (d % heads != 0) throw ShapeError("attention: width not divisible by heads");
    const int dh     = d / heads;
    const S inv_sqrt = S(1.0 / std::sqrt(double(dh)));
    auto probs       = std::make_shared<Buffer<S>>(static_cast<std::size_t>(heads) * lq * lk);
    Buffer<S> out(static_cast<std::size_t>(lq) * d);
    for (int h = 0; h < heads; ++h) {
        CStridedMap<S> qh(q.data() + h * dh, lq, dh, Eigen::OuterStride<>(d));
        CStridedMap<S> kh(k.data() + h * dh, lk, dh, Eigen::OuterStride<>(d));
        CStridedMap<S> vh(v.data() + h * dh, lk, dh, Eigen::OuterStride<>(d));
        MatMap<S> p(probs->data() + static_cast<std::size_t>(h) * lq * lk, lq, lk);
        p.noalias() = (qh * kh.transpose()) * inv_sqrt;
        for (int r = 0; r < lq; ++r) {
            const S mx = p.row(r).maxCoeff();
            p.row(r)   = (p.row(r).array() - mx).exp();
            p.row(r) /= p.row(r).sum();
        }
        StridedMap<S> oh(out.data() + h * dh, lq, dh, Eigen::OuterStride<>(d));
        oh.noalias() = p * vh;
    }
    auto pq = q.ptr(), pk = k.ptr(), pv = v.ptr();
    return make_result<S>(std::move(out), {lq, d}, {pq, pk, pv},
                          [pq, pk, pv, probs, heads, lq, lk, d, dh, inv_sqrt](Node<S>& self) {
                              RowMat<S> dp(lq, lk);
                              for (int h = 0; h < heads; ++h) {
                                  CMatMap<S> p(probs->data() + static_cast<std::size_t>(h) * lq * lk, lq, lk);
                                  CStridedMap<S> go(self.grad.data() + h * dh, lq, dh, Eigen::OuterStride<>(d));
                                  CStridedMap<S> qh(pq->value.data() + h * dh, lq, dh, Eigen::OuterStride<>(d));
                                  CStridedMap<S> kh(pk->value.data() + h * dh, lk, dh, Eigen::OuterStride<>(d));
                                  CStridedMap<S> vh(pv->value.data() + h * dh, lk, dh, Eigen::OuterStride<>(d));
                                  if (pv->requires_grad) {
                                      StridedMap<S> gv(pv->grad_data() + h * dh, lk, dh, Eigen::OuterStride<>(d));
                                      gv.noalias() += p.transpose() * go;
                                  }
                                  if (!pq->requires_grad && !pk->requires_grad) continue;
                                  dp.noalias() = go * vh.transpose();
                                  for (int r = 0; r < lq; ++r) {
                                      const S dot = p.row(r).dot(dp.row(r));
                                      dp.row(r)   = p.row(r).cwiseProduct((dp.row(r).array() - dot).matrix());
                                  }
                                  dp *= inv_sqrt;
                                  if (pq->requires_grad) {
                                      StridedMap<S> gq(pq->grad_data() + h * dh, lq, dh, Eigen::OuterStride<>(d));
                                      gq.noalias() += dp * kh;
                                  }
                                  if (pk->requires_grad) {
                                      StridedMap<S> gk(pk->grad_data() + h * dh, lk, dh, Eigen::OuterStride<>(d));
                                      gk.noalias() += dp.transpose() * qh;
                                  }
                              }
                          });
}

// ---------------------------------------------------------------------------
// Layout

// [C,H,W] -> [H*W, C]
template <class S>
Var<S> to_tokens(const Var<S>& x) {
    detail::require_rank(x, 3, "to_tokens");
    const int c = x.dim(0), hw = x.dim(1) * x.dim(2);
    Buffer<S> out(x.size());
    MatMap<S>(out.data(), hw, c) = CMatMap<S>(x.data(), c, hw).transpose();
    auto px = x.ptr();
    return make_result<S>(std::move(out), {hw, c}, {px}, [px, c, hw](Node<S>& self) {
        MatMap<S>(px->grad_data(), c, hw) += CMatMap<S>(self.grad.data(), hw, c).transpose();
    });
}

// [H*W, C] -> [C,H,W]
template <class S>
Var<S> from_tokens(const Var<S>& t, int h, int w) {
    detail::require_rank(t, 2, "from_tokens");
    const int hw = t.dim(0), c = t.dim(1);
    if (hw != h * w) throw ShapeError("from_tokens: token count does not match spatial size");
    Buffer<S> out(t.size());
    MatMap<S>(out.data(), c, hw) = CMatMap<S>(t.data(), hw, c).transpose();
    auto pt = t.ptr();
    return make_result<S>(std::move(out), {c, h, w}, {pt}, [pt, c, hw](Node<S>& self) {
        MatMap<S>(pt->grad_data(), hw, c) += CMatMap<S>(self.grad.data(), c, hw).transpose();
    });
}

// Concatenates along the leading axis (channels for [C,H,W], rows for [L,D]).
template <class S>
Var<S> concat0(const std::vector<Var<S>>& parts) {
    if (parts.empty()) throw ShapeError("concat0: no inputs");
    Shape shape = parts[0].shape();
    shape[0]    = 0;
    std::size_t total = 0;
    for (const auto& p : parts) {
        if (p.shape().size() != shape.size() ||
            !std::equal(p.shape().begin() + 1, p.shape().end(), shape.begin() + 1)) {
            throw ShapeError("concat0: trailing shape mismatch " + shape_str(p.shape()));
        }
        shape[0] += p.dim(0);
        total += p.size();
    }
    Buffer<S> out;
    out.reserve(total);
    std::vector<std::shared_ptr<Node<S>>> parents;
    for (const auto& p : parts) {
        out.insert(out.end(), p.value().begin(), p.value().end());
        parents.push_back(p.ptr());
    }
    auto ps = parents;
    return make_result<S>(std::move(out), shape, std::move(parents), [ps](Node<S>& self) {
        std::size_t off = 0;
        for (const auto& p : ps) {
            if (p->requires_grad) {
                S* g = p->grad_data();
                for (std::size_t i = 0; i < p->value.size(); ++i) g[i] += self.grad[off + i];
            }
            off += p->value.size();
        }
    });
}

// Rows [begin, end) of x[L,D].
template <class S>
Var<S> slice_rows(const Var<S>& x, int begin, int end) {
    detail::require_rank(x, 2, "slice_rows");
    if (begin < 0 || end > x.dim(0) || begin >= end) throw ShapeError("slice_rows: bad range");
    const int d = x.dim(1);
    Buffer<S> out(x.value().begin() + static_cast<std::ptrdiff_t>(begin) * d,
                       x.value().begin() + static_cast<std::ptrdiff_t>(end) * d);
    auto px = x.ptr();
    return make_result<S>(std::move(out), {end - begin, d}, {px}, [px, begin, d](Node<S>& self) {
        S* g = px->grad_data() + static_cast<std::size_t>(begin) * d;
        for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
    });
}

// Nearest-neighbour 2x upsampling of x[C,H,W].
template <class S>
Var<S> upsample2x(const Var<S>& x) {
    detail::require_rank(x, 3, "upsample2x");
    const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
    Buffer<S> out(static_cast<std::size_t>(c) * 4 * h * w);
    for (int ch = 0; ch < c; ++ch)
        for (int y = 0; y < 2 * h; ++y)
            for (int xx = 0; xx < 2 * w; ++xx)
                out[(static_cast<std::size_t>(ch) * 2 * h + y) * 2 * w + xx] =
                    x.value()[(static_cast<std::size_t>(ch) * h + y / 2) * w + xx / 2];
    auto px = x.ptr();
    return make_result<S>(std::move(out), {c, 2 * h, 2 * w}, {px}, [px, c, h, w](Node<S>& self) {
        S* g = px->grad_data();
        for (int ch = 0; ch < c; ++ch)
            for (int y = 0; y < 2 * h; ++y)
                for (int xx = 0; xx < 2 * w; ++xx)
                    g[(static_cast<std::size_t>(ch) * h + y / 2) * w + xx / 2] +=
                        self.grad[(static_cast<std::size_t>(ch) * 2 * h + y) * 2 * w + xx];
    });
}

// Space-to-depth: [C,H,W] -> [C*r*r, H/r, W/r]; channel index c*r*r + dy*r + dx.
template <class S>
Var<S> pixel_unshuffle(const Var<S>& x, int r) {
    detail::require_rank(x, 3, "pixel_unshuffle");
    const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
    if (h % r != 0 || w % r != 0) throw ShapeError("pixel_unshuffle: size not divisible by factor");
    const int ho = h / r, wo = w / r;
    std::vector<std::size_t> src(x.size());
    std::size_t o = 0;
    for (int ch = 0; ch < c; ++ch)
        for (int dy = 0; dy < r; ++dy)
            for (int dx = 0; dx < r; ++dx)
                for (int y = 0; y < ho; ++y)
                    for (int xx = 0; xx < wo; ++xx)
                        src[o++] = (static_cast<std::size_t>(ch) * h + y * r + dy) * w + xx * r + dx;
    Buffer<S> out(x.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.value()[src[i]];
    auto px = x.ptr();
    auto idx = std::make_shared<std::vector<std::size_t>>(std::move(src));
    return make_result<S>(std::move(out), {c * r * r, ho, wo}, {px}, [px, idx](Node<S>& self) {
        S* g = px->grad_data();
        for (std::size_t i = 0; i < self.grad.size(); ++i) g[(*idx)[i]] += self.grad[i];
    });
}

// Depth-to-space, inverse of pixel_unshuffle.
template <class S>
Var<S> pixel_shuffle(const Var<S>& x, int r) {
    detail::require_rank(x, 3, "pixel_shuffle");
    const int cr = x.dim(0), h = x.dim(1), w = x.dim(2);
    if (cr % (r * r) != 0) throw ShapeError("pixel_shuffle: channels not divisible by factor^2");
    const int c = cr / (r * r), ho = h * r, wo = w * r;
    std::vector<std::size_t> src(x.size());
    for (int ch = 0; ch < c; ++ch)
        for (int dy = 0; dy < r; ++dy)
            for (int dx = 0; dx < r; ++dx)
                for (int y = 0; y < h; ++y)
                    for (int xx = 0; xx < w; ++xx) {
                        const std::size_t in  = ((static_cast<std::size_t>(ch) * r * r + dy * r + dx) * h + y) * w + xx;
                        const std::size_t out = (static_cast<std::size_t>(ch) * ho + y * r + dy) * wo + xx * r + dx;
                        src[out]              = in;
                    }
    Buffer<S> out(x.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.value()[src[i]];
    auto px = x.ptr();
    auto idx = std::make_shared<std::vector<std::size_t>>(std::move(src));
    return make_result<S>(std::move(out), {c, ho, wo}, {px}, [px, idx](Node<S>& self) {
        S* g = px->grad_data();
        for (std::size_t i = 0; i < self.grad.size(); ++i) g[(*idx)[i]] += self.grad[i];
    });
}

// ---------------------------------------------------------------------------
// Losses

// Weighted mean squared error sum(w*(a-b)^2)/sum(w); unweighted when `weight` is empty.
template <class S>
Var<S> mse(const Var<S>& pred, const Var<S>& target, const std::vector<S>& weight = {}) {
    detail::require_shape(pred, target, "mse");
    if (!weight.empty() && weight.size() != pred.size()) throw ShapeError("mse: weight size mismatch");
    S denom = weight.empty() ? S(pred.size()) : std::accumulate(weight.begin(), weight.end(), S(0));
    if (denom <= S(0)) throw ShapeError("mse: empty weight");
    S acc = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        const S d  = pred.value()[i] - target.value()[i];
        const S wi = weight.empty() ? S(1) : weight[i];
        acc += wi * d * d;
    }
    auto pp = pred.ptr(), pt = target.ptr();
    return make_result<S>({acc / denom}, {1}, {pp, pt}, [pp, pt, weight, denom](Node<S>& self) {
        const S g0 = self.grad[0] * S(2) / denom;
        for (std::size_t i = 0; i < pp->value.size(); ++i) {
            const S d  = pp->value[i] - pt->value[i];
            const S wi = weight.empty() ? S(1) : weight[i];
            if (pp->requires_grad) pp->grad_data()[i] += g0 * wi * d;
            if (pt->requires_grad) pt->grad_data()[i] -= g0 * wi * d;
        }
    });
}

template <class S>
Var<S> sum_all(const Var<S>& x) {
    S acc = 0;
    for (S v : x.value()) acc += v;
    auto px = x.ptr();
    return make_result<S>({acc}, {1}, {px}, [px](Node<S>& self) {
        S* g = px->grad_data();
        for (std::size_t i = 0; i < px->value.size(); ++i) g[i] += self.grad[0];
    });
}

// sum(x * c) for a constant c; used to build random scalar probes in gradient checks.
template <class S>
Var<S> dot_const(const Var<S>& x, const Buffer<S>& c) {
    if (c.size() != x.size()) throw ShapeError("dot_const: size mismatch");
    S acc = 0;
    for (std::size_t i = 0; i < c.size(); ++i) acc += x.value()[i] * c[i];
    auto px = x.ptr();
    return make_result<S>({acc}, {1}, {px}, [px, c](Node<S>& self) {
        S* g = px->grad_data();
        for (std::size_t i = 0; i < c.size(); ++i) g[i] += self.grad[0] * c[i];
    });
}

}  // namespace gridedit::ag
