#pragma once

#include <functional>
#include <memory>
#include <unordered_set>
#include <utility>

#include "cellcount/tensor.hpp"

#if defined(CELLCOUNT_HAVE_CBLAS)
#include <cblas.h>
extern "C" void openblas_set_num_threads(int);
#endif

namespace cellcount {

// ---------------------------------------------------------------------------
// small GEMM wrapper: C = alpha * op(A) * op(B) + beta * C, row-major
// ---------------------------------------------------------------------------

inline void sgemm(bool trans_a, bool trans_b, int64_t m, int64_t n, int64_t k,
                  float alpha, const float* a, int64_t lda, const float* b, int64_t ldb,
                  float beta, float* c, int64_t ldc) {
#if defined(CELLCOUNT_HAVE_CBLAS)
    // single BLAS thread: results stay bit-identical across machines with
    // different core counts
    [[maybe_unused]] static const bool pinned = [] {
        openblas_set_num_threads(1);
        return true;
    }();
    cblas_sgemm(CblasRowMajor, trans_a ? CblasTrans : CblasNoTrans,
                trans_b ? CblasTrans : CblasNoTrans,
                static_cast<int>(m), static_cast<int>(n), static_cast<int>(k), alpha,
                a, static_cast<int>(lda), b, static_cast<int>(ldb), beta,
                c, static_cast<int>(ldc));
#else
    // portable fallback, correct but slow
    for (int64_t i = 0; i < m; ++i) {
        for (int64_t j = 0; j < n; ++j) {
            double acc = 0.0;
            for (int64_t p = 0; p < k; ++p) {
                float av = trans_a ? a[p * lda + i] : a[i * lda + p];
                float bv = trans_b ? b[j * ldb + p] : b[p * ldb + j];
                acc += static_cast<double>(av) * bv;
            }
            c[i * ldc + j] = alpha * static_cast<float>(acc) +
                             (beta == 0.0f ? 0.0f : beta * c[i * ldc + j]);
        }
    }
#endif
}

// ---------------------------------------------------------------------------
// autograd graph
// ---------------------------------------------------------------------------

struct Node {
    Tensor4 value;
    Tensor4 grad; // empty until first needed; leaf grads persist across backward calls
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backprop; // null for leaves

    bool is_leaf() const { return !backprop; }
    bool needs_grad() const { return requires_grad || !is_leaf(); }

    Tensor4& ensure_grad() {
        if (grad.numel() != value.numel()) grad = Tensor4(value.shape());
        return grad;
    }
};

// Handle to a node in the autograd graph. Ops build fresh nodes each call;
// parameters and inputs are leaves that persist across iterations.
class Var {
public:
    Var() = default;

    static Var leaf(Tensor4 value, bool requires_grad = false) {
        Var v;
        v.node_ = std::make_shared<Node>();
        v.node_->value = std::move(value);
        v.node_->requires_grad = requires_grad;
        return v;
    }

    static Var op(Tensor4 value, std::vector<std::shared_ptr<Node>> parents,
                  std::function<void(Node&)> backprop) {
        Var v;
        v.node_ = std::make_shared<Node>();
        v.node_->value = std::move(value);
        v.node_->parents = std::move(parents);
        v.node_->backprop = std::move(backprop);
        return v;
    }

    bool valid() const { return node_ != nullptr; }
    const Tensor4& value() const { return node_->value; }
    Tensor4& value() { return node_->value; }
    const Shape4& shape() const { return node_->value.shape(); }
    Tensor4& grad() { return node_->ensure_grad(); }
    bool has_grad() const { return node_->grad.numel() == node_->value.numel(); }
    void zero_grad() {
        if (has_grad()) node_->grad.fill(0.0f);
    }
    const std::shared_ptr<Node>& node() const { return node_; }

    float scalar() const {
        if (node_->value.numel() != 1)
            throw UsageError("Var::scalar: tensor has " +
                             std::to_string(node_->value.numel()) + " elements");
        return node_->value[0];
    }

private:
    std::shared_ptr<Node> node_;
};

// Reverse-mode sweep from a scalar loss. Gradients of leaves accumulate across
// calls; interior node gradients are reset at the start of each sweep.
inline void backward(const Var& loss) {
    if (!loss.valid() || loss.node()->is_leaf())
        throw UsageError("backward: value is detached from the graph");
    if (loss.node()->value.numel() != 1)
        throw UsageError("backward: loss must be a scalar, got shape " +
                         loss.node()->value.shape().str());

    // iterative post-order DFS for the topological order
    std::vector<Node*> topo;
    std::unordered_set<Node*> visited;
    std::vector<std::pair<Node*, size_t>> stack;
    stack.emplace_back(loss.node().get(), 0);
    visited.insert(loss.node().get());
    while (!stack.empty()) {
        auto& [n, next] = stack.back();
        if (next < n->parents.size()) {
            Node* p = n->parents[next++].get();
            if (!visited.count(p)) {
                visited.insert(p);
                stack.emplace_back(p, 0);
            }
        } else {
            topo.push_back(n);
            stack.pop_back();
        }
    }

    for (Node* n : topo)
        if (!n->is_leaf()) n->ensure_grad().fill(0.0f);

    loss.node()->ensure_grad()[0] = 1.0f;
    for (auto it = topo.rbegin(); it != topo.rend(); ++it)
        if (!(*it)->is_leaf()) (*it)->backprop(**it);
}

// ---------------------------------------------------------------------------
// im2col / col2im, per sample
// ---------------------------------------------------------------------------

namespace detail {

// col is (C_in*k*k) x (H*W); "same" zero padding of (k-1)/2
inline void im2col(const float* x, int64_t c_in, int64_t h, int64_t w, int64_t k,
                   float* col) {
    const int64_t pad = (k - 1) / 2;
    const int64_t plane = h * w;
    for (int64_t ci = 0; ci < c_in; ++ci) {
        const float* src = x + ci * plane;
        for (int64_t di = 0; di < k; ++di) {
            for (int64_t dj = 0; dj < k; ++dj) {
                float* dst = col + ((ci * k + di) * k + dj) * plane;
                const int64_t shift = dj - pad;
                const int64_t x0 = std::max<int64_t>(0, -shift);
                const int64_t x1 = std::min<int64_t>(w, w - shift);
                for (int64_t y = 0; y < h; ++y) {
                    float* row = dst + y * w;
                    const int64_t iy = y + di - pad;
                    if (iy < 0 || iy >= h || x0 >= x1) {
                        std::fill(row, row + w, 0.0f);
                        continue;
                    }
                    std::fill(row, row + x0, 0.0f);
                    std::copy(src + iy * w + x0 + shift, src + iy * w + x1 + shift, row + x0);
                    std::fill(row + x1, row + w, 0.0f);
                }
            }
        }
    }
}

inline void col2im_add(const float* col, int64_t c_in, int64_t h, int64_t w, int64_t k,
                       float* x) {
    const int64_t pad = (k - 1) / 2;
    const int64_t plane = h * w;
    for (int64_t ci = 0; ci < c_in; ++ci) {
        float* dst = x + ci * plane;
        for (int64_t di = 0; di < k; ++di) {
            for (int64_t dj = 0; dj < k; ++dj) {
                const float* src = col + ((ci * k + di) * k + dj) * plane;
                const int64_t shift = dj - pad;
                const int64_t x0 = std::max<int64_t>(0, -shift);
                const int64_t x1 = std::min<int64_t>(w, w - shift);
                for (int64_t y = 0; y < h; ++y) {
                    const int64_t iy = y + di - pad;
                    if (iy < 0 || iy >= h || x0 >= x1) continue;
                    const float* s = src + y * w;
                    float* d = dst + iy * w + shift;
                    for (int64_t x2 = x0; x2 < x1; ++x2) d[x2] += s[x2];
                }
            }
        }
    }
}

} // namespace detail

// ---------------------------------------------------------------------------
// differentiable ops
// ---------------------------------------------------------------------------

// 2-D convolution with "same" zero padding. kernels (C_out, C_in, k, k), odd k;
// bias (1, C_out, 1, 1). Output (B, C_out, H, W).
inline Var conv2d_same(const Var& input, const Var& kernels, const Var& bias) {
    const Shape4 xs = input.shape();
    const Shape4 ws = kernels.shape();
    const int64_t k = ws.h;
    if (ws.h != ws.w || k % 2 == 0)
        throw ShapeError("conv2d_same: kernel must be square with odd size, got " + ws.str());
    if (ws.c != xs.c)
        throw ShapeError("conv2d_same: input has " + std::to_string(xs.c) +
                         " channels, kernels expect " + std::to_string(ws.c));
    if (bias.shape().c != ws.b || bias.shape().numel() != ws.b)
        throw ShapeError("conv2d_same: bias shape " + bias.shape().str() +
                         " does not match " + std::to_string(ws.b) + " output channels");

    const int64_t B = xs.b, c_in = xs.c, h = xs.h, w = xs.w, c_out = ws.b;
    const int64_t plane = h * w, kk = c_in * k * k;
    Tensor4 out({B, c_out, h, w});

    std::vector<float> col(static_cast<size_t>(kk * plane));
    for (int64_t b = 0; b < B; ++b) {
        const float* xb = input.value().data() + b * c_in * plane;
        float* yb = out.data() + b * c_out * plane;
        const float* colp = col.data();
        if (k == 1) {
            colp = xb; // 1x1 kernel: col matrix is the input itself
        } else {
            detail::im2col(xb, c_in, h, w, k, col.data());
        }
        sgemm(false, false, c_out, plane, kk, 1.0f, kernels.value().data(), kk,
              colp, plane, 0.0f, yb, plane);
        for (int64_t co = 0; co < c_out; ++co) {
            const float bv = bias.value()[static_cast<size_t>(co)];
            if (bv != 0.0f) {
                float* row = yb + co * plane;
                for (int64_t i = 0; i < plane; ++i) row[i] += bv;
            }
        }
    }

    auto xn = input.node(), wn = kernels.node(), bn = bias.node();
    return Var::op(std::move(out), {xn, wn, bn}, [xn, wn, bn, B, c_in, h, w, k, c_out](Node& self) {
        const int64_t plane = h * w, kk = c_in * k * k;
        const bool want_dx = xn->needs_grad();
        const bool want_dw = wn->needs_grad();
        const bool want_db = bn->needs_grad();
        if (want_dw) wn->ensure_grad();
        if (want_dx) xn->ensure_grad();
        if (want_db) bn->ensure_grad();

        std::vector<float> col;
        if (want_dw && k != 1) col.resize(static_cast<size_t>(kk * plane));
        std::vector<float> dcol;
        if (want_dx) dcol.resize(static_cast<size_t>(kk * plane));

        for (int64_t b = 0; b < B; ++b) {
            const float* dyb = self.grad.data() + b * c_out * plane;
            const float* xb = xn->value.data() + b * c_in * plane;
            if (want_dw) {
                const float* colp = col.data();
                if (k == 1) {
                    colp = xb;
                } else {
                    detail::im2col(xb, c_in, h, w, k, col.data());
                }
                // dW += dY * col^T
                sgemm(false, true, c_out, kk, plane, 1.0f, dyb, plane, colp, plane,
                      1.0f, wn->grad.data(), kk);
            }
            if (want_db) {
                for (int64_t co = 0; co < c_out; ++co) {
                    double acc = 0.0;
                    const float* row = dyb + co * plane;
                    for (int64_t i = 0; i < plane; ++i) acc += row[i];
                    bn->grad[static_cast<size_t>(co)] += static_cast<float>(acc);
                }
            }
            if (want_dx) {
                float* dxb = xn->grad.data() + b * c_in * plane;
                if (k == 1) {
                    // dX += W^T * dY directly
                    sgemm(true, false, kk, plane, c_out, 1.0f, wn->value.data(), kk,
                          dyb, plane, 1.0f, dxb, plane);
                } else {
                    sgemm(true, false, kk, plane, c_out, 1.0f, wn->value.data(), kk,
                          dyb, plane, 0.0f, dcol.data(), plane);
                    detail::col2im_add(dcol.data(), c_in, h, w, k, dxb);
                }
            }
        }
    });
}

// Elementwise max(0, x); subgradient at 0 is 0.
inline Var relu(const Var& input) {
    Tensor4 out(input.shape());
    const auto& v = input.value().values();
    for (size_t i = 0; i < v.size(); ++i) out[i] = v[i] > 0.0f ? v[i] : 0.0f;
    auto xn = input.node();
    return Var::op(std::move(out), {xn}, [xn](Node& self) {
        if (!xn->needs_grad()) return;
        auto& dx = xn->ensure_grad();
        const auto& x = xn->value;
        for (int64_t i = 0; i < x.numel(); ++i)
            if (x[static_cast<size_t>(i)] > 0.0f)
                dx[static_cast<size_t>(i)] += self.grad[static_cast<size_t>(i)];
    });
}

// 2x2 max pooling, stride 2. Gradient routes to the window argmax; ties go to
// the first element in scan order.
inline Var maxpool2(const Var& input) {
    const Shape4 s = input.shape();
    if (s.h % 2 != 0 || s.w % 2 != 0)
        throw ShapeError("maxpool2: spatial dims must be even, got " + s.str());
    const int64_t oh = s.h / 2, ow = s.w / 2;
    Tensor4 out({s.b, s.c, oh, ow});
    auto argmax = std::make_shared<std::vector<int64_t>>(
        static_cast<size_t>(out.numel()));

    const float* x = input.value().data();
    int64_t oi = 0;
    for (int64_t bc = 0; bc < s.b * s.c; ++bc) {
        const float* pl = x + bc * s.h * s.w;
        for (int64_t y = 0; y < oh; ++y) {
            for (int64_t z = 0; z < ow; ++z) {
                const int64_t i00 = (2 * y) * s.w + 2 * z;
                const int64_t idx[4] = {i00, i00 + 1, i00 + s.w, i00 + s.w + 1};
                int64_t best = idx[0];
                for (int t = 1; t < 4; ++t)
                    if (pl[idx[t]] > pl[best]) best = idx[t];
                out[static_cast<size_t>(oi)] = pl[best];
                (*argmax)[static_cast<size_t>(oi)] = bc * s.h * s.w + best;
                ++oi;
            }
        }
    }

    auto xn = input.node();
    return Var::op(std::move(out), {xn}, [xn, argmax](Node& self) {
        if (!xn->needs_grad()) return;
        auto& dx = xn->ensure_grad();
        for (int64_t i = 0; i < self.value.numel(); ++i)
            dx[static_cast<size_t>((*argmax)[static_cast<size_t>(i)])] +=
                self.grad[static_cast<size_t>(i)];
    });
}

namespace detail {

struct LerpAxis {
    std::vector<int64_t> i0, i1;
    std::vector<float> t;
};

// half-pixel-centers source coordinates for a 2x upsample
inline LerpAxis bilinear2_axis(int64_t in_size) {
    LerpAxis ax;
    const int64_t out = 2 * in_size;
    ax.i0.resize(static_cast<size_t>(out));
    ax.i1.resize(static_cast<size_t>(out));
    ax.t.resize(static_cast<size_t>(out));
    for (int64_t i = 0; i < out; ++i) {
        const double src = (i + 0.5) * 0.5 - 0.5;
        const double f = std::floor(src);
        const double t = src - f;
        ax.i0[static_cast<size_t>(i)] = std::clamp<int64_t>(static_cast<int64_t>(f), 0, in_size - 1);
        ax.i1[static_cast<size_t>(i)] = std::clamp<int64_t>(static_cast<int64_t>(f) + 1, 0, in_size - 1);
        ax.t[static_cast<size_t>(i)] = static_cast<float>(t);
    }
    return ax;
}

} // namespace detail

// Bilinear 2x upsampling with the half-pixel-centers convention. Linear map,
// so the backward pass is its exact transpose.
inline Var upsample_bilinear2(const Var& input) {
    const Shape4 s = input.shape();
    const auto ay = detail::bilinear2_axis(s.h);
    const auto axx = detail::bilinear2_axis(s.w);
    Tensor4 out({s.b, s.c, 2 * s.h, 2 * s.w});

    const float* x = input.value().data();
    float* o = out.data();
    const int64_t iplane = s.h * s.w, oplane = 4 * iplane;
    for (int64_t bc = 0; bc < s.b * s.c; ++bc) {
        const float* src = x + bc * iplane;
        float* dst = o + bc * oplane;
        for (int64_t y = 0; y < 2 * s.h; ++y) {
            const float ty = ay.t[static_cast<size_t>(y)];
            const float* r0 = src + ay.i0[static_cast<size_t>(y)] * s.w;
            const float* r1 = src + ay.i1[static_cast<size_t>(y)] * s.w;
            float* orow = dst + y * 2 * s.w;
            for (int64_t z = 0; z < 2 * s.w; ++z) {
                const float tx = axx.t[static_cast<size_t>(z)];
                const int64_t x0 = axx.i0[static_cast<size_t>(z)], x1 = axx.i1[static_cast<size_t>(z)];
                const float top = (1.0f - tx) * r0[x0] + tx * r0[x1];
                const float bot = (1.0f - tx) * r1[x0] + tx * r1[x1];
                orow[z] = (1.0f - ty) * top + ty * bot;
            }
        }
    }

    auto xn = input.node();
    return Var::op(std::move(out), {xn}, [xn, ay, axx, s](Node& self) {
        if (!xn->needs_grad()) return;
        auto& dx = xn->ensure_grad();
        const int64_t iplane = s.h * s.w, oplane = 4 * iplane;
        for (int64_t bc = 0; bc < s.b * s.c; ++bc) {
            const float* g = self.grad.data() + bc * oplane;
            float* d = dx.data() + bc * iplane;
            for (int64_t y = 0; y < 2 * s.h; ++y) {
                const float ty = ay.t[static_cast<size_t>(y)];
                const int64_t y0 = ay.i0[static_cast<size_t>(y)], y1 = ay.i1[static_cast<size_t>(y)];
                const float* grow = g + y * 2 * s.w;
                for (int64_t z = 0; z < 2 * s.w; ++z) {
                    const float tx = axx.t[static_cast<size_t>(z)];
                    const int64_t x0 = axx.i0[static_cast<size_t>(z)], x1 = axx.i1[static_cast<size_t>(z)];
                    const float gv = grow[z];
                    d[y0 * s.w + x0] += (1.0f - ty) * (1.0f - tx) * gv;
                    d[y0 * s.w + x1] += (1.0f - ty) * tx * gv;
                    d[y1 * s.w + x0] += ty * (1.0f - tx) * gv;
                    d[y1 * s.w + x1] += ty * tx * gv;
                }
            }
        }
    });
}

// Channel concatenation, a's channels first. Batch and spatial dims must agree.
inline Var concat_channels(const Var& a, const Var& b) {
    const Shape4 sa = a.shape(), sb = b.shape();
    if (sa.b != sb.b || sa.h != sb.h || sa.w != sb.w)
        throw ShapeError("concat_channels: incompatible shapes " + sa.str() + " and " + sb.str());
    Tensor4 out({sa.b, sa.c + sb.c, sa.h, sa.w});
    const int64_t plane = sa.h * sa.w;
    for (int64_t bi = 0; bi < sa.b; ++bi) {
        float* dst = out.data() + bi * (sa.c + sb.c) * plane;
        std::copy_n(a.value().data() + bi * sa.c * plane, sa.c * plane, dst);
        std::copy_n(b.value().data() + bi * sb.c * plane, sb.c * plane, dst + sa.c * plane);
    }
    auto an = a.node(), bn = b.node();
    return Var::op(std::move(out), {an, bn}, [an, bn, sa, sb, plane](Node& self) {
        for (int64_t bi = 0; bi < sa.b; ++bi) {
            const float* g = self.grad.data() + bi * (sa.c + sb.c) * plane;
            if (an->needs_grad()) {
                float* da = an->ensure_grad().data() + bi * sa.c * plane;
                for (int64_t i = 0; i < sa.c * plane; ++i) da[i] += g[i];
            }
            if (bn->needs_grad()) {
                float* db = bn->ensure_grad().data() + bi * sb.c * plane;
                for (int64_t i = 0; i < sb.c * plane; ++i) db[i] += g[sa.c * plane + i];
            }
        }
    });
}

// (1/B) * sum_b ||pred_b - target_b||^2; the per-sample norm is the plain sum
// of squared elementwise differences. Targets are constants.
inline Var mse_loss(const Var& pred, const Tensor4& target) {
    require_same_shape(pred.value(), target, "mse_loss");
    const int64_t B = pred.shape().b;
    double acc = 0.0;
    const auto& p = pred.value().values();
    const auto& t = target.values();
    for (size_t i = 0; i < p.size(); ++i) {
        const double d = static_cast<double>(p[i]) - t[i];
        acc += d * d;
    }
    Tensor4 out = Tensor4::scalar(static_cast<float>(acc / B));
    auto pn = pred.node();
    auto tgt = std::make_shared<Tensor4>(target);
    return Var::op(std::move(out), {pn}, [pn, tgt, B](Node& self) {
        if (!pn->needs_grad()) return;
        auto& dp = pn->ensure_grad();
        const float up = self.grad[0] * 2.0f / static_cast<float>(B);
        const auto& p = pn->value.values();
        const auto& t = tgt->values();
        for (size_t i = 0; i < p.size(); ++i) dp[i] += up * (p[i] - t[i]);
    });
}

// elementwise helpers used to assemble the combined loss

inline Var add(const Var& a, const Var& b) {
    require_same_shape(a.value(), b.value(), "add");
    Tensor4 out(a.shape());
    for (int64_t i = 0; i < out.numel(); ++i)
        out[static_cast<size_t>(i)] = a.value()[static_cast<size_t>(i)] + b.value()[static_cast<size_t>(i)];
    auto an = a.node(), bn = b.node();
    return Var::op(std::move(out), {an, bn}, [an, bn](Node& self) {
        for (auto* n : {an.get(), bn.get()}) {
            if (!n->needs_grad()) continue;
            auto& d = n->ensure_grad();
            for (int64_t i = 0; i < self.value.numel(); ++i)
                d[static_cast<size_t>(i)] += self.grad[static_cast<size_t>(i)];
        }
    });
}

inline Var scale(const Var& a, float factor) {
    Tensor4 out(a.shape());
    for (int64_t i = 0; i < out.numel(); ++i)
        out[static_cast<size_t>(i)] = factor * a.value()[static_cast<size_t>(i)];
    auto an = a.node();
    return Var::op(std::move(out), {an}, [an, factor](Node& self) {
        if (!an->needs_grad()) return;
        auto& d = an->ensure_grad();
        for (int64_t i = 0; i < self.value.numel(); ++i)
            d[static_cast<size_t>(i)] += factor * self.grad[static_cast<size_t>(i)];
    });
}

inline Var add_const(const Var& a, float c) {
    Tensor4 out(a.shape());
    for (int64_t i = 0; i < out.numel(); ++i)
        out[static_cast<size_t>(i)] = a.value()[static_cast<size_t>(i)] + c;
    auto an = a.node();
    return Var::op(std::move(out), {an}, [an](Node& self) {
        if (!an->needs_grad()) return;
        auto& d = an->ensure_grad();
        for (int64_t i = 0; i < self.value.numel(); ++i)
            d[static_cast<size_t>(i)] += self.grad[static_cast<size_t>(i)];
    });
}

// ---------------------------------------------------------------------------
// orthogonal initialization (QR of a standard-normal matrix)
// ---------------------------------------------------------------------------

namespace detail {

// Householder QR of a tall matrix (rows >= cols), in place; returns the thin Q.
// All arithmetic in double; the caller rounds to float once at the end.
inline std::vector<double> thin_q(std::vector<double> a, int64_t rows, int64_t cols) {
    std::vector<std::vector<double>> vs;
    std::vector<double> rdiag(static_cast<size_t>(cols));
    for (int64_t j = 0; j < cols; ++j) {
        double norm = 0.0;
        for (int64_t i = j; i < rows; ++i) norm += a[i * cols + j] * a[i * cols + j];
        norm = std::sqrt(norm);
        const double ajj = a[j * cols + j];
        const double alpha = ajj >= 0.0 ? -norm : norm;
        std::vector<double> v(static_cast<size_t>(rows), 0.0);
        for (int64_t i = j; i < rows; ++i) v[static_cast<size_t>(i)] = a[i * cols + j];
        v[static_cast<size_t>(j)] -= alpha;
        double vnorm2 = 0.0;
        for (int64_t i = j; i < rows; ++i) vnorm2 += v[static_cast<size_t>(i)] * v[static_cast<size_t>(i)];
        if (vnorm2 > 1e-300) {
            for (int64_t c = j; c < cols; ++c) {
                double dot = 0.0;
                for (int64_t i = j; i < rows; ++i) dot += v[static_cast<size_t>(i)] * a[i * cols + c];
                const double f = 2.0 * dot / vnorm2;
                for (int64_t i = j; i < rows; ++i) a[i * cols + c] -= f * v[static_cast<size_t>(i)];
            }
        }
        rdiag[static_cast<size_t>(j)] = a[j * cols + j];
        vs.push_back(std::move(v));
    }
    // accumulate Q = H_0 ... H_{cols-1} applied to the thin identity
    std::vector<double> q(static_cast<size_t>(rows * cols), 0.0);
    for (int64_t j = 0; j < cols; ++j) q[j * cols + j] = 1.0;
    for (int64_t j = cols - 1; j >= 0; --j) {
        const auto& v = vs[static_cast<size_t>(j)];
        double vnorm2 = 0.0;
        for (int64_t i = j; i < rows; ++i) vnorm2 += v[static_cast<size_t>(i)] * v[static_cast<size_t>(i)];
        if (vnorm2 <= 1e-300) continue;
        for (int64_t c = 0; c < cols; ++c) {
            double dot = 0.0;
            for (int64_t i = j; i < rows; ++i) dot += v[static_cast<size_t>(i)] * q[i * cols + c];
            const double f = 2.0 * dot / vnorm2;
            for (int64_t i = j; i < rows; ++i) q[i * cols + c] -= f * v[static_cast<size_t>(i)];
        }
    }
    // fix signs so the factorization is unique (R diagonal positive)
    for (int64_t j = 0; j < cols; ++j) {
        if (rdiag[static_cast<size_t>(j)] < 0.0)
            for (int64_t i = 0; i < rows; ++i) q[i * cols + j] = -q[i * cols + j];
    }
    return q;
}

} // namespace detail

// Kernel tensor with orthonormal rows of the flattened (C_out x C_in*k*k)
// matrix, or orthonormal columns when C_out exceeds the flattened width.
inline Tensor4 orthogonal_init(Shape4 shape, Rng& rng) {
    const int64_t m = shape.b;
    const int64_t n = shape.c * shape.h * shape.w;
    if (m <= 0 || n <= 0)
        throw ShapeError("orthogonal_init: degenerate shape " + shape.str());

    std::vector<double> g(static_cast<size_t>(m * n));
    for (auto& x : g) x = rng.normal();

    Tensor4 out(shape);
    if (m <= n) {
        // QR of the transpose; rows of the result are orthonormal
        std::vector<double> at(static_cast<size_t>(n * m));
        for (int64_t i = 0; i < m; ++i)
            for (int64_t j = 0; j < n; ++j) at[j * m + i] = g[i * n + j];
        auto q = detail::thin_q(std::move(at), n, m); // n x m, orthonormal columns
        for (int64_t i = 0; i < m; ++i)
            for (int64_t j = 0; j < n; ++j)
                out[static_cast<size_t>(i * n + j)] = static_cast<float>(q[j * m + i]);
    } else {
        auto q = detail::thin_q(std::move(g), m, n); // m x n, orthonormal columns
        for (int64_t i = 0; i < m * n; ++i)
            out[static_cast<size_t>(i)] = static_cast<float>(q[static_cast<size_t>(i)]);
    }
    return out;
}

// ---------------------------------------------------------------------------
// parameters and the momentum-SGD update
// ---------------------------------------------------------------------------

struct ParamTensor {
    std::string id;
    Var value;        // leaf, requires_grad
    Tensor4 momentum; // same shape, starts at zero

    ParamTensor() = default;
    ParamTensor(std::string name, Tensor4 init)
        : id(std::move(name)), value(Var::leaf(std::move(init), true)),
          momentum(value.shape()) {}
};

enum class UpdateRule {
    Descent,      // momentum <- beta*m + (1-beta)*lr*g; value <- value - momentum
    PaperLiteral, // momentum <- beta*m - (1-beta)*lr*g; value <- value - momentum
};

// One momentum-SGD step over a group of parameters. The l2 penalty enters here
// as the analytic 2*lambda*value term of the total gradient; accumulated grads
// are cleared afterwards.
inline void sgd_momentum_step(std::vector<ParamTensor*>& params, float lr, float beta,
                              float lambda, UpdateRule rule = UpdateRule::Descent) {
    if (beta < 0.0f || beta >= 1.0f)
        throw UsageError("sgd_momentum_step: beta must be in [0,1), got " + std::to_string(beta));
    for (ParamTensor* p : params) {
        auto& val = p->value.value();
        const bool has_grad = p->value.has_grad();
        if (has_grad && !p->value.node()->grad.all_finite())
            throw NumericError("sgd_momentum_step: non-finite gradient in parameter '" + p->id + "'");
        const float sign = rule == UpdateRule::Descent ? 1.0f : -1.0f;
        for (int64_t i = 0; i < val.numel(); ++i) {
            const size_t ui = static_cast<size_t>(i);
            const float g = (has_grad ? p->value.node()->grad[ui] : 0.0f) + 2.0f * lambda * val[ui];
            p->momentum[ui] = beta * p->momentum[ui] + sign * (1.0f - beta) * lr * g;
            val[ui] -= p->momentum[ui];
        }
        p->value.zero_grad();
    }
}

} // namespace cellcount
