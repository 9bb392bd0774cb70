#include "sb/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include "kernels.hpp"

namespace sb {

namespace {

template <class S>
std::shared_ptr<std::vector<S>> alloc(int64_t n, S fill = S(0)) {
    return std::make_shared<std::vector<S>>(size_t(n), fill);
}

struct AxisSplit {
    int64_t outer = 1, axis = 1, inner = 1;
};

inline AxisSplit split_at(const Shape& shape, int axis) {
    AxisSplit s;
    for (int i = 0; i < axis; ++i) s.outer *= shape[size_t(i)];
    s.axis = shape[size_t(axis)];
    for (size_t i = size_t(axis) + 1; i < shape.size(); ++i) s.inner *= shape[i];
    return s;
}

inline int spatial_rank(const Shape& s) {
    check_shape(s.size() >= 3 && s.size() <= 5, "expected (B,C,spatial...) tensor, got " + shape_str(s));
    return int(s.size()) - 2;
}

template <class S>
bool has_nan(const std::vector<S>& v) {
    for (S x : v)
        if (std::isnan(double(x))) return true;
    return false;
}

}  // namespace

// ---------------------------------------------------------------------------
// Tape plumbing
// ---------------------------------------------------------------------------

template <class S>
int GraphT<S>::add_node(int64_t size, bool leaf,
                        std::function<void(GraphT&, std::vector<std::vector<S>>&, const std::vector<S>&)> fn) {
    nodes_.push_back(Node{size, leaf, std::move(fn)});
    return int(nodes_.size()) - 1;
}

template <class S>
std::vector<S>& GraphT<S>::grad_buf(std::vector<std::vector<S>>& grads, int node) {
    auto& g = grads[size_t(node)];
    if (g.empty()) g.assign(size_t(nodes_[size_t(node)].size), S(0));
    return g;
}

template <class S>
void GraphT<S>::axpy(std::vector<S>& dst, const std::vector<S>& src) {
    for (size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

template <class S>
TensorT<S> GraphT<S>::leaf(const Shape& shape, std::shared_ptr<std::vector<S>> data, bool requires_grad) {
    check_shape(int64_t(data->size()) == numel(shape), "leaf: data length does not match shape");
    for (int64_t d : shape) check_shape(d > 0, "leaf: zero extent in " + shape_str(shape));
    int node = -1;
    if (requires_grad && grad_enabled_) node = add_node(int64_t(data->size()), true, nullptr);
    return TensorT<S>(shape, std::move(data), node);
}

template <class S>
std::vector<std::vector<S>> GraphT<S>::backward(const TensorT<S>& loss) {
    check_shape(loss.size() == 1, "backward: loss must be scalar, got " + shape_str(loss.shape));
    if (loss.node < 0) throw DimensionError("backward: loss is not recorded on this graph");
    std::vector<std::vector<S>> grads(nodes_.size());
    grads[size_t(loss.node)].assign(1, S(1));
    for (int i = loss.node; i >= 0; --i) {
        auto& g = grads[size_t(i)];
        if (g.empty()) continue;
        const Node& n = nodes_[size_t(i)];
        if (n.backprop) {
            n.backprop(*this, grads, g);
            g.clear();
            g.shrink_to_fit();
        }
    }
    return grads;
}

// ---------------------------------------------------------------------------
// Elementwise
// ---------------------------------------------------------------------------

template <class S>
TensorT<S> GraphT<S>::add(const TensorT<S>& a, const TensorT<S>& b) {
    const bool bcast = a.shape != b.shape;
    if (bcast) {
        check_shape(a.shape.size() == b.shape.size() && b.shape[0] == 1 &&
                        std::equal(a.shape.begin() + 1, a.shape.end(), b.shape.begin() + 1),
                    "add: incompatible shapes " + shape_str(a.shape) + " vs " + shape_str(b.shape));
    }
    auto out = alloc<S>(a.size());
    const int64_t bn = b.size();
    for (int64_t i = 0; i < a.size(); ++i) (*out)[size_t(i)] = (*a.data)[size_t(i)] + (*b.data)[size_t(i % bn)];
    TensorT<S> y(a.shape, out);
    if (tracked(a) || tracked(b)) {
        const int an = a.node, bnode = b.node;
        y.node = add_node(a.size(), false, [an, bnode, bn](GraphT& g, auto& grads, const std::vector<S>& go) {
            if (an >= 0) axpy(g.grad_buf(grads, an), go);
            if (bnode >= 0) {
                auto& gb = g.grad_buf(grads, bnode);
                for (size_t i = 0; i < go.size(); ++i) gb[i % size_t(bn)] += go[i];
            }
        });
    }
    return y;
}

template <class S>
TensorT<S> GraphT<S>::sub(const TensorT<S>& a, const TensorT<S>& b) {
    check_shape(a.shape == b.shape, "sub: shape mismatch");
    auto out = alloc<S>(a.size());
    for (int64_t i = 0; i < a.size(); ++i) (*out)[size_t(i)] = (*a.data)[size_t(i)] - (*b.data)[size_t(i)];
    TensorT<S> y(a.shape, out);
    if (tracked(a) || tracked(b)) {
        const int an = a.node, bnode = b.node;
        y.node = add_node(a.size(), false, [an, bnode](GraphT& g, auto& grads, const std::vector<S>& go) {
            if (an >= 0) axpy(g.grad_buf(grads, an), go);
            if (bnode >= 0) {
                auto& gb = g.grad_buf(grads, bnode);
                for (size_t i = 0; i < go.size(); ++i) gb[i] -= go[i];
            }
        });
    }
    return y;
}

template <class S>
TensorT<S> GraphT<S>::mul(const TensorT<S>& a, const TensorT<S>& b) {
    check_shape(a.shape == b.shape, "mul: shape mismatch");
    auto out = alloc<S>(a.size());
    for (int64_t i = 0; i < a.size(); ++i) (*out)[size_t(i)] = (*a.data)[size_t(i)] * (*b.data)[size_t(i)];
    TensorT<S> y(a.shape, out);
    if (tracked(a) || tracked(b)) {
        const int an = a.node, bnode = b.node;
        y.node = add_node(a.size(), false,
                          [an, bnode, ad = a.data, bd = b.data](GraphT& g, auto& grads, const std::vector<S>& go) {
                              if (an >= 0) {
                                  auto& ga = g.grad_buf(grads, an);
                                  for (size_t i = 0; i < go.size(); ++i) ga[i] += go[i] * (*bd)[i];
                              }
                              if (bnode >= 0) {
                                  auto& gb = g.grad_buf(grads, bnode);
                                  for (size_t i = 0; i < go.size(); ++i) gb[i] += go[i] * (*ad)[i];
                              }
                          });
    }
    return y;
}

template <class S>
TensorT<S> GraphT<S>::div(const TensorT<S>& a, const TensorT<S>& b) {
    check_shape(a.shape == b.shape, "div: shape mismatch");
    auto out = alloc<S>(a.size());
    for (int64_t i = 0; i < a.size(); ++i) (*out)[size_t(i)] = (*a.data)[size_t(i)] / (*b.data)[size_t(i)];
    TensorT<S> y(a.shape, out);
    if (tracked(a) || tracked(b)) {
        const int an = a.node, bnode = b.node;
        y.node = add_node(a.size(), false,
                          [an, bnode, ad = a.data, bd = b.data](GraphT& g, auto& grads, const std::vector<S>& go) {
                              if (an >= 0) {
                                  auto& ga = g.grad_buf(grads, an);
                                  for (size_t i = 0; i < go.size(); ++i) ga[i] += go[i] / (*bd)[i];
                              }
                              if (bnode >= 0) {
                                  auto& gb = g.grad_buf(grads, bnode);
                                  for (size_t i = 0; i < go.size(); ++i)
                                      gb[i] -= go[i] * (*ad)[i] / ((*bd)[i] * (*bd)[i]);
                              }
                          });
    }
    return y;
}

template <class S>
TensorT<S> GraphT<S>::affine(const TensorT<S>& x, S alpha, S beta) {
    auto out = alloc<S>(x.size());
    for (int64_t i = 0; i < x.size(); ++i) (*out)[size_t(i)] = alpha * (*x.data)[size_t(i)] + beta;
    TensorT<S> y(x.shape, out);
    if (tracked(x)) {
        const int xn = x.node;
        y.node = add_node(x.size(), false, [xn, alpha](GraphT& g, auto& grads, const std::vector<S>& go) {
            auto& gx = g.grad_buf(grads, xn);
            for (size_t i = 0; i < go.size(); ++i) gx[i] += alpha * go[i];
        });
    }
    return y;
}

template <class S>
TensorT<S> GraphT<S>::log(const TensorT<S>& x) {
    auto out = alloc<S>(x.size());
    for (int64_t i = 0; i < x.size(); ++i) (*out)[size_t(i)] = std::log((*x.data)[size_t(i)]);
    TensorT<S> y(x.shape, out);
    if (tracked(x)) {
        const int xn = x.node;
        y.node = add_node(x.size(), false, [xn, xd = x.data](GraphT& g, auto& grads, const std::vector<S>& go) {
            auto& gx = g.grad_buf(grads, xn);
            for (size_t i = 0; i < go.size(); ++i) gx[i] += go[i] / (*xd)[i];
        });
    }
    return y;
}

template <class S>
TensorT<S> GraphT<S>::clamp(const TensorT<S>& x, S lo, S hi) {
    auto out = alloc<S>(x.size());
    for (int64_t i = 0; i < x.size(); ++i) (*out)[size_t(i)] = std::min(hi, std::max(lo, (*x.data)[size_t(i)]));
    TensorT<S> y(x.shape, out);
    if (tracked(x)) {
        const int xn = x.node;
        y.node = add_node(x.size(), false, [xn, xd = x.data, lo, hi](GraphT& g, auto& grads, const std::vector<S>& go) {
            auto& gx = g.grad_buf(grads, xn);
            for (size_t i = 0; i < go.size(); ++i)
                if ((*xd)[i] >= lo && (*xd)[i] <= hi) gx[i] += go[i];
        });
    }
    return y;
}

template <class S>
TensorT<S> GraphT<S>::relu(const TensorT<S>& x) {
    auto out = alloc<S>(x.size());
    for (int64_t i = 0; i < x.size(); ++i) {
        const S v = (*x.data)[size_t(i)];
        (*out)[size_t(i)] = v > S(0) ? v : S(0);
    }
    TensorT<S> y(x.shape, out);
    if (tracked(x)) {
        const int xn = x.node;
        y.node = add_node(x.size(), false, [xn, xd = x.data](GraphT& g, auto& grads, const std::vector<S>& go) {
            auto& gx = g.grad_buf(grads, xn);
            for (size_t i = 0; i < go.size(); ++i)
                if ((*xd)[i] > S(0)) gx[i] += go[i];
        });
    }
    return y;
}

template <class S>
TensorT<S> GraphT<S>::sigmoid(const TensorT<S>& x) {
    auto out = alloc<S>(x.size());
    for (int64_t i = 0; i < x.size(); ++i) {
        const S v = (*x.data)[size_t(i)];
        (*out)[size_t(i)] = v >= S(0) ? S(1) / (S(1) + std::exp(-v)) : std::exp(v) / (S(1) + std::exp(v));
    }
    TensorT<S> y(x.shape, out);
    if (tracked(x)) {
        const int xn = x.node;
        y.node = add_node(x.size(), false, [xn, yd = out](GraphT& g, auto& grads, const std::vector<S>& go) {
            auto& gx = g.grad_buf(grads, xn);
            for (size_t i = 0; i < go.size(); ++i) gx[i] += go[i] * (*yd)[i] * (S(1) - (*yd)[i]);
        });
    }
    return y;
}

template <class S>
TensorT<S> GraphT<S>::dropout(const TensorT<S>& x, double p, uint64_t seed) {
    check_shape(p >= 0.0 && p < 1.0, "dropout: p must be in [0,1)");
    if (!training_ || p == 0.0) return x;
    Rng rng(seed);
    auto keep = std::make_shared<std::vector<uint8_t>>(size_t(x.size()));
    const S scale = S(1.0 / (1.0 - p));
    auto out = alloc<S>(x.size());
    for (int64_t i = 0; i < x.size(); ++i) {
        const bool k = rng.uniform() >= p;
        (*keep)[size_t(i)] = k;
        (*out)[size_t(i)] = k ? (*x.data)[size_t(i)] * scale : S(0);
    }
    TensorT<S> y(x.shape, out);
    if (tracked(x)) {
        const int xn = x.node;
        y.node = add_node(x.size(), false, [xn, keep, scale](GraphT& g, auto& grads, const std::vector<S>& go) {
            auto& gx = g.grad_buf(grads, xn);
            for (size_t i = 0; i < go.size(); ++i)
                if ((*keep)[i]) gx[i] += go[i] * scale;
        });
    }
    return y;
}

template <class S>
TensorT<S> GraphT<S>::sum_all(const TensorT<S>& x) {
    S acc = 0;
    for (int64_t i = 0; i < x.size(); ++i) acc += (*x.data)[size_t(i)];
    auto out = std::make_shared<std::vector<S>>(1, acc);
    TensorT<S> y(Shape{1}, out);
    if (tracked(x)) {
        const int xn = x.node;
        const int64_t n = x.size();
        y.node = add_node(1, false, [xn, n](GraphT& g, auto& grads, const std::vector<S>& go) {
            auto& gx = g.grad_buf(grads, xn);
            for (int64_t i = 0; i < n; ++i) gx[size_t(i)] += go[0];
        });
    }
    return y;
}

// ---------------------------------------------------------------------------
// Structure
// ---------------------------------------------------------------------------

template <class S>
TensorT<S> GraphT<S>::reshape(const TensorT<S>& x, Shape shape) {
    check_shape(numel(shape) == x.size(), "reshape: element count mismatch " + shape_str(x.shape) +
                                              " -> " + shape_str(shape));
    return TensorT<S>(std::move(shape), x.data, x.node);  // alias: grads are flat per node
}

template <class S>
TensorT<S> GraphT<S>::transpose_last2(const TensorT<S>& x) {
    check_shape(x.shape.size() >= 2, "transpose_last2: rank < 2");
    const int64_t n = x.shape.back();
    const int64_t m = x.shape[x.shape.size() - 2];
    const int64_t outer = x.size() / (m * n);
    Shape yshape = x.shape;
    std::swap(yshape[yshape.size() - 2], yshape[yshape.size() - 1]);
    auto out = alloc<S>(x.size());
    for (int64_t o = 0; o < outer; ++o) {
        const S* xp = x.ptr() + o * m * n;
        S* yp = out->data() + o * m * n;
        for (int64_t i = 0; i < m; ++i)
            for (int64_t j = 0; j < n; ++j) yp[j * m + i] = xp[i * n + j];
    }
    TensorT<S> y(yshape, out);
    if (tracked(x)) {
        const int xn = x.node;
        y.node = add_node(x.size(), false, [xn, outer, m, n](GraphT& g, auto& grads, const std::vector<S>& go) {
            auto& gx = g.grad_buf(grads, xn);
            for (int64_t o = 0; o < outer; ++o) {
                const S* gp = go.data() + o * m * n;
                S* xp = gx.data() + o * m * n;
                for (int64_t j = 0; j < n; ++j)
                    for (int64_t i = 0; i < m; ++i) xp[i * n + j] += gp[j * m + i];
            }
        });
    }
    return y;
}

template <class S>
TensorT<S> GraphT<S>::concat(const std::vector<TensorT<S>>& parts, int axis) {
    check_shape(!parts.empty(), "concat: no inputs");
    const Shape& s0 = parts[0].shape;
    check_shape(axis >= 0 && axis < int(s0.size()), "concat: bad axis");
    Shape yshape = s0;
    int64_t total = s0[size_t(axis)];
    for (size_t p = 1; p < parts.size(); ++p) {
        const Shape& sp = parts[p].shape;
        check_shape(sp.size() == s0.size(), "concat: rank mismatch");
        for (size_t i = 0; i < sp.size(); ++i)
            if (int(i) != axis)
                check_shape(sp[i] == s0[i], "concat: extent mismatch at axis " + std::to_string(i));
        if (p) total += sp[size_t(axis)];
    }
    yshape[size_t(axis)] = total;

    const AxisSplit sp = split_at(yshape, axis);
    auto out = alloc<S>(numel(yshape));
    std::vector<int64_t> off(parts.size());
    {
        int64_t cur = 0;
        for (size_t p = 0; p < parts.size(); ++p) {
            off[p] = cur;
            cur += parts[p].shape[size_t(axis)];
        }
    }
    for (size_t p = 0; p < parts.size(); ++p) {
        const int64_t ax = parts[p].shape[size_t(axis)];
        for (int64_t o = 0; o < sp.outer; ++o)
            std::memcpy(out->data() + (o * total + off[p]) * sp.inner,
                        parts[p].ptr() + o * ax * sp.inner, size_t(ax * sp.inner) * sizeof(S));
    }
    TensorT<S> y(yshape, out);
    bool any = false;
    for (const auto& p : parts) any = any || tracked(p);
    if (any) {
        std::vector<int> ids(parts.size());
        std::vector<int64_t> axlen(parts.size());
        for (size_t p = 0; p < parts.size(); ++p) {
            ids[p] = parts[p].node;
            axlen[p] = parts[p].shape[size_t(axis)];
        }
        y.node = add_node(numel(yshape), false,
                          [ids, axlen, off, sp, total](GraphT& g, auto& grads, const std::vector<S>& go) {
                              for (size_t p = 0; p < ids.size(); ++p) {
                                  if (ids[p] < 0) continue;
                                  auto& gp = g.grad_buf(grads, ids[p]);
                                  for (int64_t o = 0; o < sp.outer; ++o) {
                                      const S* src = go.data() + (o * total + off[p]) * sp.inner;
                                      S* dst = gp.data() + o * axlen[p] * sp.inner;
                                      for (int64_t i = 0; i < axlen[p] * sp.inner; ++i) dst[i] += src[i];
                                  }
                              }
                          });
    }
    return y;
}

namespace {
// Copies x (B,C,in...) into a zero canvas (B,C,out...) at `at`, or the reverse
// when gather=true (then dst is the smaller tensor and src the canvas).
template <class S>
void copy_window(int rank, int64_t planes, const int64_t* small_ext, const int64_t* big_ext,
                 const int64_t* at, const S* small_in, S* big_out, const S* big_in, S* small_out,
                 bool scatter, bool add) {
    int64_t ssz = 1, bsz = 1;
    for (int r = 0; r < rank; ++r) { ssz *= small_ext[r]; bsz *= big_ext[r]; }
    for (int64_t pl = 0; pl < planes; ++pl) {
        int64_t c[3] = {0, 0, 0};
        for (int64_t p = 0; p < ssz; ++p) {
            int64_t rem = p;
            for (int r = rank; r-- > 0;) { c[r] = rem % small_ext[r]; rem /= small_ext[r]; }
            int64_t boff = 0;
            for (int r = 0; r < rank; ++r) boff = boff * big_ext[r] + (c[r] + at[r]);
            if (scatter) {
                if (add)
                    big_out[pl * bsz + boff] += small_in[pl * ssz + p];
                else
                    big_out[pl * bsz + boff] = small_in[pl * ssz + p];
            } else {
                if (add)
                    small_out[pl * ssz + p] += big_in[pl * bsz + boff];
                else
                    small_out[pl * ssz + p] = big_in[pl * bsz + boff];
            }
        }
    }
}
}  // namespace

template <class S>
TensorT<S> GraphT<S>::pad_spatial(const TensorT<S>& x, const std::vector<int64_t>& before,
                                  const std::vector<int64_t>& after) {
    const int rank = spatial_rank(x.shape);
    check_shape(int(before.size()) == rank && int(after.size()) == rank, "pad: rank mismatch");
    Shape yshape = x.shape;
    int64_t sext[3] = {1, 1, 1}, bext[3] = {1, 1, 1}, at[3] = {0, 0, 0};
    for (int r = 0; r < rank; ++r) {
        sext[r] = x.shape[size_t(2 + r)];
        bext[r] = sext[r] + before[size_t(r)] + after[size_t(r)];
        at[r] = before[size_t(r)];
        yshape[size_t(2 + r)] = bext[r];
    }
    const int64_t planes = x.shape[0] * x.shape[1];
    auto out = alloc<S>(numel(yshape));
    copy_window<S>(rank, planes, sext, bext, at, x.ptr(), out->data(), nullptr, nullptr, true, false);
    TensorT<S> y(yshape, out);
    if (tracked(x)) {
        const int xn = x.node;
        std::vector<int64_t> se(sext, sext + 3), be(bext, bext + 3), a(at, at + 3);
        y.node = add_node(numel(yshape), false,
                          [xn, rank, planes, se, be, a](GraphT& g, auto& grads, const std::vector<S>& go) {
                              auto& gx = g.grad_buf(grads, xn);
                              copy_window<S>(rank, planes, se.data(), be.data(), a.data(), nullptr,
                                             nullptr, go.data(), gx.data(), false, true);
                          });
    }
    return y;
}

template <class S>
TensorT<S> GraphT<S>::crop_spatial(const TensorT<S>& x, const std::vector<int64_t>& offset,
                                   const std::vector<int64_t>& extents) {
    const int rank = spatial_rank(x.shape);
    check_shape(int(offset.size()) == rank && int(extents.size()) == rank, "crop: rank mismatch");
    Shape yshape = x.shape;
    int64_t sext[3] = {1, 1, 1}, bext[3] = {1, 1, 1}, at[3] = {0, 0, 0};
    for (int r = 0; r < rank; ++r) {
        bext[r] = x.shape[size_t(2 + r)];
        sext[r] = extents[size_t(r)];
        at[r] = offset[size_t(r)];
        check_shape(at[r] >= 0 && at[r] + sext[r] <= bext[r], "crop: window out of range");
        yshape[size_t(2 + r)] = sext[r];
    }
    const int64_t planes = x.shape[0] * x.shape[1];
    auto out = alloc<S>(numel(yshape));
    copy_window<S>(rank, planes, sext, bext, at, nullptr, nullptr, x.ptr(), out->data(), false, false);
    TensorT<S> y(yshape, out);
    if (tracked(x)) {
        const int xn = x.node;
        std::vector<int64_t> se(sext, sext + 3), be(bext, bext + 3), a(at, at + 3);
        y.node = add_node(numel(yshape), false,
                          [xn, rank, planes, se, be, a](GraphT& g, auto& grads, const std::vector<S>& go) {
                              auto& gx = g.grad_buf(grads, xn);
                              copy_window<S>(rank, planes, se.data(), be.data(), a.data(), go.data(),
                                             gx.data(), nullptr, nullptr, true, true);
                          });
    }
    return y;
}

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------

template <class S>
TensorT<S> GraphT<S>::matmul(const TensorT<S>& a, const TensorT<S>& b, bool trans_b) {
    const size_t ra = a.shape.size(), rb = b.shape.size();
    check_shape((ra == 2 || ra == 3) && (rb == 2 || rb == 3) && !(ra == 2 && rb == 3),
                "matmul: unsupported ranks " + shape_str(a.shape) + " x " + shape_str(b.shape));
    const int64_t batch = ra == 3 ? a.shape[0] : 1;
    const int64_t m = a.shape[ra - 2], k = a.shape[ra - 1];
    const int64_t bk = trans_b ? b.shape[rb - 1] : b.shape[rb - 2];
    const int64_t n = trans_b ? b.shape[rb - 2] : b.shape[rb - 1];
    check_shape(bk == k, "matmul: inner extent mismatch " + shape_str(a.shape) + " x " +
                             shape_str(b.shape) + (trans_b ? " (b transposed)" : ""));
    const bool b_batched = rb == 3;
    if (b_batched) check_shape(b.shape[0] == batch, "matmul: batch extent mismatch");

    Shape yshape = ra == 3 ? Shape{batch, m, n} : Shape{m, n};
    auto out = alloc<S>(numel(yshape));
    const int64_t bstride = b_batched ? (trans_b ? n * k : k * n) : 0;
    for (int64_t bi = 0; bi < batch; ++bi) {
        const S* ap = a.ptr() + bi * m * k;
        const S* bp = b.ptr() + bi * bstride;
        S* cp = out->data() + bi * m * n;
        if (trans_b)
            kernels::gemm_nt(m, n, k, ap, k, bp, k, cp, n, false);
        else
            kernels::gemm_nn(m, n, k, ap, k, bp, n, cp, n, false);
    }
    TensorT<S> y(yshape, out);
    if (tracked(a) || tracked(b)) {
        const int an = a.node, bnode = b.node;
        y.node = add_node(numel(yshape), false,
                          [an, bnode, ad = a.data, bd = b.data, batch, m, n, k, trans_b, b_batched,
                           bstride](GraphT& g, auto& grads, const std::vector<S>& go) {
                              if (an >= 0) {
                                  auto& ga = g.grad_buf(grads, an);
                                  for (int64_t bi = 0; bi < batch; ++bi) {
                                      const S* gp = go.data() + bi * m * n;
                                      const S* bp = bd->data() + bi * bstride;
                                      S* gap = ga.data() + bi * m * k;
                                      if (trans_b)  // b stored (n,k): ga = g * b
                                          kernels::gemm_nn(m, k, n, gp, n, bp, k, gap, k, true);
                                      else  // b stored (k,n): ga = g * b^T
                                          kernels::gemm_nt(m, k, n, gp, n, bp, n, gap, k, true);
                                  }
                              }
                              if (bnode >= 0) {
                                  auto& gb = g.grad_buf(grads, bnode);
                                  for (int64_t bi = 0; bi < batch; ++bi) {
                                      const S* gp = go.data() + bi * m * n;
                                      const S* ap = ad->data() + bi * m * k;
                                      S* gbp = gb.data() + (b_batched ? bi * bstride : 0);
                                      if (trans_b)  // gb (n,k) = g^T * a
                                          kernels::gemm_tn(m, k, n, gp, n, ap, k, gbp, k, true);
                                      else  // gb (k,n) = a^T * g
                                          kernels::gemm_tn(m, n, k, ap, k, gp, n, gbp, n, true);
                                  }
                              }
                          });
    }
    return y;
}

template <class S>
TensorT<S> GraphT<S>::softmax(const TensorT<S>& x, int axis) {
    check_shape(axis >= 0 && axis < int(x.shape.size()), "softmax: bad axis");
    if (has_nan(*x.data)) throw NumericError("softmax: NaN input");
    const AxisSplit sp = split_at(x.shape, axis);
    auto out = alloc<S>(x.size());
    kernels::softmax_fwd(sp.outer, sp.axis, sp.inner, x.ptr(), out->data());
    TensorT<S> y(x.shape, out);
    if (tracked(x)) {
        const int xn = x.node;
        y.node = add_node(x.size(), false, [xn, yd = out, sp](GraphT& g, auto& grads, const std::vector<S>& go) {
            auto& gx = g.grad_buf(grads, xn);
            kernels::softmax_bwd(sp.outer, sp.axis, sp.inner, yd->data(), go.data(), gx.data());
        });
    }
    return y;
}

template <class S>
TensorT<S> GraphT<S>::add_lastdim_bias(const TensorT<S>& x, const TensorT<S>& bias) {
    const int64_t t = x.shape.back();
    check_shape(bias.shape == Shape{t}, "add_lastdim_bias: bias extent mismatch");
    auto out = alloc<S>(x.size());
    const int64_t rows = x.size() / t;
    for (int64_t r = 0; r < rows; ++r)
        for (int64_t j = 0; j < t; ++j)
            (*out)[size_t(r * t + j)] = (*x.data)[size_t(r * t + j)] + (*bias.data)[size_t(j)];
    TensorT<S> y(x.shape, out);
    if (tracked(x) || tracked(bias)) {
        const int xn = x.node, bn = bias.node;
        y.node = add_node(x.size(), false, [xn, bn, rows, t](GraphT& g, auto& grads, const std::vector<S>& go) {
            if (xn >= 0) axpy(g.grad_buf(grads, xn), go);
            if (bn >= 0) {
                auto& gb = g.grad_buf(grads, bn);
                for (int64_t r = 0; r < rows; ++r)
                    for (int64_t j = 0; j < t; ++j) gb[size_t(j)] += go[size_t(r * t + j)];
            }
        });
    }
    return y;
}

// ---------------------------------------------------------------------------
// Convolution family
// ---------------------------------------------------------------------------

namespace {

template <class S>
kernels::ConvGeom conv_geometry(const TensorT<S>& x, const Shape& kext,
                                const std::vector<int64_t>& stride, const std::vector<int64_t>& pad) {
    kernels::ConvGeom g;
    g.rank = spatial_rank(x.shape);
    check_shape(int(stride.size()) == g.rank && int(pad.size()) == g.rank,
                "conv: stride/pad rank mismatch");
    g.cin = x.shape[1];
    for (int r = 0; r < g.rank; ++r) {
        g.in[r] = x.shape[size_t(2 + r)];
        g.k[r] = kext[size_t(r)];
        g.stride[r] = stride[size_t(r)];
        g.pad[r] = pad[size_t(r)];
        check_shape(g.stride[r] >= 1, "conv: stride must be >= 1");
        check_shape(g.k[r] <= g.in[r] + 2 * g.pad[r], "conv: kernel larger than padded input");
        g.out[r] = (g.in[r] + 2 * g.pad[r] - g.k[r]) / g.stride[r] + 1;
        check_shape(g.out[r] >= 1, "conv: empty output extent");
    }
    return g;
}

inline int64_t chunk_cols(int64_t col_rows, int64_t total) {
    const int64_t target = 4 * 1024 * 1024;  // elements per im2col buffer
    int64_t c = std::max<int64_t>(64, target / std::max<int64_t>(1, col_rows));
    return std::min(c, total);
}

}  // namespace

template <class S>
TensorT<S> GraphT<S>::conv(const TensorT<S>& x, const TensorT<S>& w, const TensorT<S>& bias,
                           const std::vector<int64_t>& stride, const std::vector<int64_t>& pad) {
    const int rank = spatial_rank(x.shape);
    check_shape(int(w.shape.size()) == rank + 2, "conv: weight rank mismatch");
    check_shape(w.shape[1] == x.shape[1], "conv: input channels " + std::to_string(x.shape[1]) +
                                              " do not match kernel channels " + std::to_string(w.shape[1]));
    const int64_t cout = w.shape[0];
    if (bias.defined()) check_shape(bias.shape == Shape{cout}, "conv: bias extent mismatch");
    Shape kext(w.shape.begin() + 2, w.shape.end());
    kernels::ConvGeom geom = conv_geometry(x, kext, stride, pad);
    const int64_t batch = x.shape[0];
    const int64_t osz = geom.out_size(), isz = geom.in_size(), K = geom.col_rows();

    Shape yshape{batch, cout};
    for (int r = 0; r < rank; ++r) yshape.push_back(geom.out[r]);
    auto out = alloc<S>(numel(yshape));

    const int64_t pc = chunk_cols(K, osz);
    std::vector<S> col(size_t(K * pc));
    for (int64_t b = 0; b < batch; ++b) {
        const S* xp = x.ptr() + b * geom.cin * isz;
        S* yp = out->data() + b * cout * osz;
        for (int64_t p0 = 0; p0 < osz; p0 += pc) {
            const int64_t p1 = std::min(osz, p0 + pc);
            kernels::im2col(geom, xp, p0, p1, col.data());
            // write into the chunk columns of y (row stride osz)
            kernels::gemm_nn(cout, p1 - p0, K, w.ptr(), K, col.data(), p1 - p0, yp + p0, osz, false);
        }
        if (bias.defined())
            for (int64_t c = 0; c < cout; ++c) {
                const S bv = (*bias.data)[size_t(c)];
                S* row = yp + c * osz;
                for (int64_t p = 0; p < osz; ++p) row[p] += bv;
            }
    }
    TensorT<S> y(yshape, out);
    if (tracked(x) || tracked(w) || tracked(bias)) {
        const int xn = x.node, wn = w.node, bn = bias.defined() ? bias.node : -1;
        y.node = add_node(numel(yshape), false,
                          [xn, wn, bn, xd = x.data, wd = w.data, geom, batch, cout, osz, isz,
                           K](GraphT& g, auto& grads, const std::vector<S>& go) {
                              const int64_t pc = chunk_cols(K, osz);
                              std::vector<S> col(size_t(K * pc));
                              if (bn >= 0) {
                                  auto& gb = g.grad_buf(grads, bn);
                                  for (int64_t b = 0; b < batch; ++b)
                                      for (int64_t c = 0; c < cout; ++c) {
                                          const S* row = go.data() + (b * cout + c) * osz;
                                          S acc = 0;
                                          for (int64_t p = 0; p < osz; ++p) acc += row[p];
                                          gb[size_t(c)] += acc;
                                      }
                              }
                              if (wn >= 0) {
                                  auto& gw = g.grad_buf(grads, wn);
                                  for (int64_t b = 0; b < batch; ++b) {
                                      const S* xp = xd->data() + b * geom.cin * isz;
                                      const S* gp = go.data() + b * cout * osz;
                                      for (int64_t p0 = 0; p0 < osz; p0 += pc) {
                                          const int64_t p1 = std::min(osz, p0 + pc);
                                          kernels::im2col(geom, xp, p0, p1, col.data());
                                          kernels::gemm_nt(cout, K, p1 - p0, gp + p0, osz, col.data(),
                                                           p1 - p0, gw.data(), K, true);
                                      }
                                  }
                              }
                              if (xn >= 0) {
                                  auto& gx = g.grad_buf(grads, xn);
                                  std::vector<S> gcol(size_t(K * pc));
                                  for (int64_t b = 0; b < batch; ++b) {
                                      const S* gp = go.data() + b * cout * osz;
                                      S* gxp = gx.data() + b * geom.cin * isz;
                                      for (int64_t p0 = 0; p0 < osz; p0 += pc) {
                                          const int64_t p1 = std::min(osz, p0 + pc);
                                          kernels::gemm_tn(cout, p1 - p0, K, wd->data(), K, gp + p0, osz,
                                                           gcol.data(), p1 - p0, false);
                                          kernels::col2im_add(geom, gcol.data(), p0, p1, gxp);
                                      }
                                  }
                              }
                          });
    }
    return y;
}

template <class S>
TensorT<S> GraphT<S>::conv_transpose(const TensorT<S>& x, const TensorT<S>& w, const TensorT<S>& bias,
                                     const std::vector<int64_t>& stride) {
    const int rank = spatial_rank(x.shape);
    check_shape(int(w.shape.size()) == rank + 2, "conv_transpose: weight rank mismatch");
    check_shape(w.shape[0] == x.shape[1], "conv_transpose: input channels mismatch");
    const int64_t cin = x.shape[1], cout = w.shape[1];
    if (bias.defined()) check_shape(bias.shape == Shape{cout}, "conv_transpose: bias extent mismatch");

    // Geometry of the equivalent forward conv: "input" is the (bigger) output.
    kernels::ConvGeom geom;
    geom.rank = rank;
    geom.cin = cout;
    Shape yshape{x.shape[0], cout};
    for (int r = 0; r < rank; ++r) {
        const int64_t sin = x.shape[size_t(2 + r)];
        geom.k[r] = w.shape[size_t(2 + r)];
        geom.stride[r] = stride[size_t(r)];
        geom.pad[r] = 0;
        geom.out[r] = sin;                                       // position grid
        geom.in[r] = (sin - 1) * geom.stride[r] + geom.k[r];     // produced extent
        yshape.push_back(geom.in[r]);
    }
    const int64_t batch = x.shape[0];
    const int64_t pin = geom.out_size();   // number of input positions
    const int64_t ysz = geom.in_size();    // output spatial size
    const int64_t K = geom.col_rows();     // cout * prod(k)

    auto out = alloc<S>(numel(yshape));
    const int64_t pc = chunk_cols(K, pin);
    std::vector<S> col(size_t(K * pc));
    for (int64_t b = 0; b < batch; ++b) {
        const S* xp = x.ptr() + b * cin * pin;
        S* yp = out->data() + b * cout * ysz;
        for (int64_t p0 = 0; p0 < pin; p0 += pc) {
            const int64_t p1 = std::min(pin, p0 + pc);
            // col (K x chunk) = W^T (K x cin) * x chunk (cin x chunk)
            kernels::gemm_tn(cin, p1 - p0, K, w.ptr(), K, xp + p0, pin, col.data(), p1 - p0, false);
            kernels::col2im_add(geom, col.data(), p0, p1, yp);
        }
        if (bias.defined())
            for (int64_t c = 0; c < cout; ++c) {
                const S bv = (*bias.data)[size_t(c)];
                S* row = yp + c * ysz;
                for (int64_t p = 0; p < ysz; ++p) row[p] += bv;
            }
    }
    TensorT<S> y(yshape, out);
    if (tracked(x) || tracked(w) || tracked(bias)) {
        const int xn = x.node, wn = w.node, bn = bias.defined() ? bias.node : -1;
        y.node = add_node(numel(yshape), false,
                          [xn, wn, bn, xd = x.data, wd = w.data, geom, batch, cin, cout, pin, ysz,
                           K](GraphT& g, auto& grads, const std::vector<S>& go) {
                              const int64_t pc = chunk_cols(K, pin);
                              std::vector<S> col(size_t(K * pc));
                              if (bn >= 0) {
                                  auto& gb = g.grad_buf(grads, bn);
                                  for (int64_t b = 0; b < batch; ++b)
                                      for (int64_t c = 0; c < cout; ++c) {
                                          const S* row = go.data() + (b * cout + c) * ysz;
                                          S acc = 0;
                                          for (int64_t p = 0; p < ysz; ++p) acc += row[p];
                                          gb[size_t(c)] += acc;
                                      }
                              }
                              for (int64_t b = 0; b < batch; ++b) {
                                  const S* gp = go.data() + b * cout * ysz;
                                  for (int64_t p0 = 0; p0 < pin; p0 += pc) {
                                      const int64_t p1 = std::min(pin, p0 + pc);
                                      kernels::im2col(geom, gp, p0, p1, col.data());
                                      if (xn >= 0) {
                                          auto& gx = g.grad_buf(grads, xn);
                                          // gx chunk (cin x chunk) = W (cin x K) * col
                                          kernels::gemm_nn(cin, p1 - p0, K, wd->data(), K, col.data(),
                                                           p1 - p0, gx.data() + b * cin * pin + p0, pin,
                                                           true);
                                      }
                                      if (wn >= 0) {
                                          auto& gw = g.grad_buf(grads, wn);
                                          // gw (cin x K) += x chunk (cin x chunk) * col^T
                                          kernels::gemm_nt(cin, K, p1 - p0, xd->data() + b * cin * pin + p0,
                                                           pin, col.data(), p1 - p0, gw.data(), K, true);
                                      }
                                  }
                              }
                          });
    }
    return y;
}

namespace {
template <class S>
kernels::ConvGeom pool_geometry(const TensorT<S>& x, const std::vector<int64_t>& window,
                                const std::vector<int64_t>& stride) {
    kernels::ConvGeom g;
    g.rank = spatial_rank(x.shape);
    check_shape(int(window.size()) == g.rank && int(stride.size()) == g.rank,
                "pool: window/stride rank mismatch");
    g.cin = x.shape[1];
    for (int r = 0; r < g.rank; ++r) {
        g.in[r] = x.shape[size_t(2 + r)];
        g.k[r] = window[size_t(r)];
        g.stride[r] = stride[size_t(r)];
        check_shape(g.k[r] >= 1 && g.stride[r] >= 1, "pool: bad window/stride");
        check_shape(g.k[r] <= g.in[r], "pool: window larger than input");
        g.out[r] = (g.in[r] - g.k[r]) / g.stride[r] + 1;
    }
    return g;
}
}  // namespace

template <class S>
TensorT<S> GraphT<S>::max_pool(const TensorT<S>& x, const std::vector<int64_t>& window,
                               const std::vector<int64_t>& stride) {
    kernels::ConvGeom geom = pool_geometry(x, window, stride);
    const int64_t batch = x.shape[0];
    Shape yshape{batch, geom.cin};
    for (int r = 0; r < geom.rank; ++r) yshape.push_back(geom.out[r]);
    auto out = alloc<S>(numel(yshape));
    auto argmax = std::make_shared<std::vector<int64_t>>(size_t(numel(yshape)));
    kernels::max_pool_fwd(geom, batch, x.ptr(), out->data(), argmax->data());
    TensorT<S> y(yshape, out);
    if (tracked(x)) {
        const int xn = x.node;
        y.node = add_node(numel(yshape), false,
                          [xn, argmax, geom, batch](GraphT& g, auto& grads, const std::vector<S>& go) {
                              auto& gx = g.grad_buf(grads, xn);
                              kernels::max_pool_bwd(geom, batch, go.data(), argmax->data(), gx.data());
                          });
    }
    return y;
}

template <class S>
TensorT<S> GraphT<S>::avg_pool(const TensorT<S>& x, const std::vector<int64_t>& window,
                               const std::vector<int64_t>& stride) {
    kernels::ConvGeom geom = pool_geometry(x, window, stride);
    const int64_t batch = x.shape[0];
    Shape yshape{batch, geom.cin};
    for (int r = 0; r < geom.rank; ++r) yshape.push_back(geom.out[r]);
    auto out = alloc<S>(numel(yshape));
    kernels::avg_pool_fwd(geom, batch, x.ptr(), out->data());
    TensorT<S> y(yshape, out);
    if (tracked(x)) {
        const int xn = x.node;
        y.node = add_node(numel(yshape), false,
                          [xn, geom, batch](GraphT& g, auto& grads, const std::vector<S>& go) {
                              auto& gx = g.grad_buf(grads, xn);
                              kernels::avg_pool_bwd(geom, batch, go.data(), gx.data());
                          });
    }
    return y;
}

template <class S>
TensorT<S> GraphT<S>::resize(const TensorT<S>& x, const std::vector<int64_t>& target, ResizeMode mode) {
    const int rank = spatial_rank(x.shape);
    check_shape(int(target.size()) == rank, "resize: target rank mismatch");
    int64_t in[3] = {1, 1, 1}, ot[3] = {1, 1, 1};
    Shape yshape = x.shape;
    for (int r = 0; r < rank; ++r) {
        in[r] = x.shape[size_t(2 + r)];
        ot[r] = target[size_t(r)];
        check_shape(ot[r] >= 1, "resize: target extent must be positive");
        yshape[size_t(2 + r)] = ot[r];
    }
    const int64_t planes = x.shape[0] * x.shape[1];
    auto out = alloc<S>(numel(yshape));
    if (mode == ResizeMode::nearest)
        kernels::resize_nearest_fwd(rank, planes, in, ot, x.ptr(), out->data());
    else
        kernels::resize_linear_fwd(rank, planes, in, ot, x.ptr(), out->data());
    TensorT<S> y(yshape, out);
    if (tracked(x)) {
        const int xn = x.node;
        std::vector<int64_t> iv(in, in + 3), ov(ot, ot + 3);
        y.node = add_node(numel(yshape), false,
                          [xn, rank, planes, iv, ov, mode](GraphT& g, auto& grads, const std::vector<S>& go) {
                              auto& gx = g.grad_buf(grads, xn);
                              if (mode == ResizeMode::nearest)
                                  kernels::resize_nearest_bwd(rank, planes, iv.data(), ov.data(), go.data(),
                                                              gx.data());
                              else
                                  kernels::resize_linear_bwd(rank, planes, iv.data(), ov.data(), go.data(),
                                                             gx.data());
                          });
    }
    return y;
}

// ---------------------------------------------------------------------------
// Normalization
// ---------------------------------------------------------------------------

template <class S>
TensorT<S> GraphT<S>::batch_norm(const TensorT<S>& x, const TensorT<S>& gamma, const TensorT<S>& beta,
                                 std::vector<S>& running_mean, std::vector<S>& running_var,
                                 double momentum, double eps) {
    const int64_t C = x.shape[1];
    check_shape(gamma.shape == Shape{C} && beta.shape == Shape{C}, "batch_norm: affine extent mismatch");
    check_shape(int64_t(running_mean.size()) == C && int64_t(running_var.size()) == C,
                "batch_norm: running stat extent mismatch");
    const int64_t B = x.shape[0];
    int64_t sp = 1;
    for (size_t i = 2; i < x.shape.size(); ++i) sp *= x.shape[i];
    const int64_t N = B * sp;

    auto mean = std::make_shared<std::vector<S>>(size_t(C));
    auto invstd = std::make_shared<std::vector<S>>(size_t(C));
    if (training_) {
        for (int64_t c = 0; c < C; ++c) {
            S m = 0;
            for (int64_t b = 0; b < B; ++b) {
                const S* p = x.ptr() + (b * C + c) * sp;
                for (int64_t s = 0; s < sp; ++s) m += p[s];
            }
            m /= S(N);
            S v = 0;
            for (int64_t b = 0; b < B; ++b) {
                const S* p = x.ptr() + (b * C + c) * sp;
                for (int64_t s = 0; s < sp; ++s) v += (p[s] - m) * (p[s] - m);
            }
            v /= S(N);
            (*mean)[size_t(c)] = m;
            (*invstd)[size_t(c)] = S(1) / std::sqrt(v + S(eps));
            const S unbiased = N > 1 ? v * S(N) / S(N - 1) : v;
            running_mean[size_t(c)] = S(1 - momentum) * running_mean[size_t(c)] + S(momentum) * m;
            running_var[size_t(c)] = S(1 - momentum) * running_var[size_t(c)] + S(momentum) * unbiased;
        }
    } else {
        for (int64_t c = 0; c < C; ++c) {
            (*mean)[size_t(c)] = running_mean[size_t(c)];
            (*invstd)[size_t(c)] = S(1) / std::sqrt(running_var[size_t(c)] + S(eps));
        }
    }

    auto out = alloc<S>(x.size());
    for (int64_t b = 0; b < B; ++b)
        for (int64_t c = 0; c < C; ++c) {
            const S m = (*mean)[size_t(c)], is = (*invstd)[size_t(c)];
            const S gm = (*gamma.data)[size_t(c)], bt = (*beta.data)[size_t(c)];
            const S* xp = x.ptr() + (b * C + c) * sp;
            S* yp = out->data() + (b * C + c) * sp;
            for (int64_t s = 0; s < sp; ++s) yp[s] = gm * (xp[s] - m) * is + bt;
        }
    TensorT<S> y(x.shape, out);
    if (tracked(x) || tracked(gamma) || tracked(beta)) {
        const int xn = x.node, gn = gamma.node, bn = beta.node;
        const bool train_stats = training_;
        y.node = add_node(
            x.size(), false,
            [xn, gn, bn, xd = x.data, gd = gamma.data, mean, invstd, B, C, sp, N,
             train_stats](GraphT& g, auto& grads, const std::vector<S>& go) {
                for (int64_t c = 0; c < C; ++c) {
                    const S m = (*mean)[size_t(c)], is = (*invstd)[size_t(c)];
                    const S gm = (*gd)[size_t(c)];
                    // channel reductions
                    S sum_g = 0, sum_gx = 0;
                    for (int64_t b = 0; b < B; ++b) {
                        const S* gp = go.data() + size_t((b * C + c) * sp);
                        const S* xp = xd->data() + size_t((b * C + c) * sp);
                        for (int64_t s = 0; s < sp; ++s) {
                            sum_g += gp[s];
                            sum_gx += gp[s] * (xp[s] - m) * is;
                        }
                    }
                    if (gn >= 0) g.grad_buf(grads, gn)[size_t(c)] += sum_gx;
                    if (bn >= 0) g.grad_buf(grads, bn)[size_t(c)] += sum_g;
                    if (xn >= 0) {
                        auto& gx = g.grad_buf(grads, xn);
                        if (train_stats) {
                            const S a = sum_g / S(N), bterm = sum_gx / S(N);
                            for (int64_t b = 0; b < B; ++b) {
                                const S* gp = go.data() + size_t((b * C + c) * sp);
                                const S* xp = xd->data() + size_t((b * C + c) * sp);
                                S* xg = gx.data() + size_t((b * C + c) * sp);
                                for (int64_t s = 0; s < sp; ++s) {
                                    const S xhat = (xp[s] - m) * is;
                                    xg[s] += gm * is * (gp[s] - a - xhat * bterm);
                                }
                            }
                        } else {
                            for (int64_t b = 0; b < B; ++b) {
                                const S* gp = go.data() + size_t((b * C + c) * sp);
                                S* xg = gx.data() + size_t((b * C + c) * sp);
                                for (int64_t s = 0; s < sp; ++s) xg[s] += gm * is * gp[s];
                            }
                        }
                    }
                }
            });
    }
    return y;
}

template <class S>
TensorT<S> GraphT<S>::layer_norm(const TensorT<S>& x, const TensorT<S>& gamma, const TensorT<S>& beta,
                                 double eps) {
    const int64_t t = x.shape.back();
    check_shape(gamma.shape == Shape{t} && beta.shape == Shape{t}, "layer_norm: affine extent mismatch");
    const int64_t rows = x.size() / t;
    auto mean = std::make_shared<std::vector<S>>(size_t(rows));
    auto invstd = std::make_shared<std::vector<S>>(size_t(rows));
    auto out = alloc<S>(x.size());
    for (int64_t r = 0; r < rows; ++r) {
        const S* xp = x.ptr() + r * t;
        S m = 0;
        for (int64_t j = 0; j < t; ++j) m += xp[j];
        m /= S(t);
        S v = 0;
        for (int64_t j = 0; j < t; ++j) v += (xp[j] - m) * (xp[j] - m);
        v /= S(t);
        const S is = S(1) / std::sqrt(v + S(eps));
        (*mean)[size_t(r)] = m;
        (*invstd)[size_t(r)] = is;
        S* yp = out->data() + r * t;
        for (int64_t j = 0; j < t; ++j)
            yp[j] = (*gamma.data)[size_t(j)] * (xp[j] - m) * is + (*beta.data)[size_t(j)];
    }
    TensorT<S> y(x.shape, out);
    if (tracked(x) || tracked(gamma) || tracked(beta)) {
        const int xn = x.node, gn = gamma.node, bn = beta.node;
        y.node = add_node(x.size(), false,
                          [xn, gn, bn, xd = x.data, gd = gamma.data, mean, invstd, rows,
                           t](GraphT& g, auto& grads, const std::vector<S>& go) {
                              for (int64_t r = 0; r < rows; ++r) {
                                  const S m = (*mean)[size_t(r)], is = (*invstd)[size_t(r)];
                                  const S* gp = go.data() + size_t(r * t);
                                  const S* xp = xd->data() + size_t(r * t);
                                  S sum_g = 0, sum_gx = 0;
                                  for (int64_t j = 0; j < t; ++j) {
                                      const S xhat = (xp[j] - m) * is;
                                      sum_g += gp[j] * (*gd)[size_t(j)];
                                      sum_gx += gp[j] * (*gd)[size_t(j)] * xhat;
                                  }
                                  if (gn >= 0) {
                                      auto& gg = g.grad_buf(grads, gn);
                                      for (int64_t j = 0; j < t; ++j)
                                          gg[size_t(j)] += gp[j] * (xp[j] - m) * is;
                                  }
                                  if (bn >= 0) {
                                      auto& gb = g.grad_buf(grads, bn);
                                      for (int64_t j = 0; j < t; ++j) gb[size_t(j)] += gp[j];
                                  }
                                  if (xn >= 0) {
                                      auto& gx = g.grad_buf(grads, xn);
                                      S* xg = gx.data() + size_t(r * t);
                                      for (int64_t j = 0; j < t; ++j) {
                                          const S xhat = (xp[j] - m) * is;
                                          xg[j] += is * (gp[j] * (*gd)[size_t(j)] - sum_g / S(t) -
                                                         xhat * sum_gx / S(t));
                                      }
                                  }
                              }
                          });
    }
    return y;
}

// ---------------------------------------------------------------------------
// Fused helpers
// ---------------------------------------------------------------------------

template <class S>
TensorT<S> GraphT<S>::mul_channelmap(const TensorT<S>& x, const TensorT<S>& m) {
    check_shape(m.shape.size() == x.shape.size() && m.shape[0] == x.shape[0] && m.shape[1] == 1 &&
                    std::equal(x.shape.begin() + 2, x.shape.end(), m.shape.begin() + 2),
                "mul_channelmap: map shape " + shape_str(m.shape) + " incompatible with " +
                    shape_str(x.shape));
    const int64_t B = x.shape[0], C = x.shape[1];
    int64_t sp = 1;
    for (size_t i = 2; i < x.shape.size(); ++i) sp *= x.shape[i];
    auto out = alloc<S>(x.size());
    for (int64_t b = 0; b < B; ++b)
        for (int64_t c = 0; c < C; ++c) {
            const S* xp = x.ptr() + (b * C + c) * sp;
            const S* mp = m.ptr() + b * sp;
            S* yp = out->data() + (b * C + c) * sp;
            for (int64_t s = 0; s < sp; ++s) yp[s] = xp[s] * mp[s];
        }
    TensorT<S> y(x.shape, out);
    if (tracked(x) || tracked(m)) {
        const int xn = x.node, mn = m.node;
        y.node = add_node(x.size(), false,
                          [xn, mn, xd = x.data, md = m.data, B, C, sp](GraphT& g, auto& grads,
                                                                       const std::vector<S>& go) {
                              if (xn >= 0) {
                                  auto& gx = g.grad_buf(grads, xn);
                                  for (int64_t b = 0; b < B; ++b)
                                      for (int64_t c = 0; c < C; ++c) {
                                          const S* gp = go.data() + size_t((b * C + c) * sp);
                                          const S* mp = md->data() + size_t(b * sp);
                                          S* xg = gx.data() + size_t((b * C + c) * sp);
                                          for (int64_t s = 0; s < sp; ++s) xg[s] += gp[s] * mp[s];
                                      }
                              }
                              if (mn >= 0) {
                                  auto& gm = g.grad_buf(grads, mn);
                                  for (int64_t b = 0; b < B; ++b)
                                      for (int64_t c = 0; c < C; ++c) {
                                          const S* gp = go.data() + size_t((b * C + c) * sp);
                                          const S* xp = xd->data() + size_t((b * C + c) * sp);
                                          S* mg = gm.data() + size_t(b * sp);
                                          for (int64_t s = 0; s < sp; ++s) mg[s] += gp[s] * xp[s];
                                      }
                              }
                          });
    }
    return y;
}

template <class S>
TensorT<S> GraphT<S>::saa_fuse(const TensorT<S>& base, const TensorT<S>& tsa, const TensorT<S>& gsa,
                               const TensorT<S>& p1, const TensorT<S>& p2) {
    check_shape(base.shape == tsa.shape && base.shape == gsa.shape, "saa_fuse: shape mismatch");
    check_shape(p1.size() == 1 && p2.size() == 1, "saa_fuse: scale parameters must be scalars");
    const S a1 = (*p1.data)[0], a2 = (*p2.data)[0];
    auto out = alloc<S>(base.size());
    for (int64_t i = 0; i < base.size(); ++i)
        (*out)[size_t(i)] =
            (*base.data)[size_t(i)] + a1 * (*tsa.data)[size_t(i)] + a2 * (*gsa.data)[size_t(i)];
    TensorT<S> y(base.shape, out);
    if (tracked(base) || tracked(tsa) || tracked(gsa) || tracked(p1) || tracked(p2)) {
        const int bn = base.node, tn = tsa.node, gn2 = gsa.node, n1 = p1.node, n2 = p2.node;
        y.node = add_node(base.size(), false,
                          [bn, tn, gn2, n1, n2, a1, a2, td = tsa.data,
                           gd = gsa.data](GraphT& g, auto& grads, const std::vector<S>& go) {
                              if (bn >= 0) axpy(g.grad_buf(grads, bn), go);
                              if (tn >= 0) {
                                  auto& gt = g.grad_buf(grads, tn);
                                  for (size_t i = 0; i < go.size(); ++i) gt[i] += a1 * go[i];
                              }
                              if (gn2 >= 0) {
                                  auto& gg = g.grad_buf(grads, gn2);
                                  for (size_t i = 0; i < go.size(); ++i) gg[i] += a2 * go[i];
                              }
                              if (n1 >= 0) {
                                  S acc = 0;
                                  for (size_t i = 0; i < go.size(); ++i) acc += go[i] * (*td)[i];
                                  g.grad_buf(grads, n1)[0] += acc;
                              }
                              if (n2 >= 0) {
                                  S acc = 0;
                                  for (size_t i = 0; i < go.size(); ++i) acc += go[i] * (*gd)[i];
                                  g.grad_buf(grads, n2)[0] += acc;
                              }
                          });
    }
    return y;
}

template struct TensorT<float>;
template struct TensorT<double>;
template class GraphT<float>;
template class GraphT<double>;

}  // namespace sb
