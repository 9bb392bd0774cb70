#ifndef SB_TENSOR_HPP
#define SB_TENSOR_HPP

#include <functional>
#include <memory>
#include <optional>

#include "sb/common.hpp"

namespace sb {

// ---------------------------------------------------------------------------
// TensorT: dense N-d real array, row-major, dims ordered (batch, channels,
// spatial...). A tensor optionally points at a node of the graph that
// produced it; tensors are treated as immutable once recorded.
//
// GraphT: append-only tape of recorded operations. One training step owns one
// graph; backward() sweeps the tape once in reverse index order, so gradient
// accumulation over fan-out happens in a fixed order and repeated backward
// calls are bit-identical.
// ---------------------------------------------------------------------------

template <class S>
struct TensorT {
    Shape shape;
    std::shared_ptr<std::vector<S>> data;
    int node = -1;  // tape index, -1 when untracked

    TensorT() = default;
    TensorT(Shape sh, std::shared_ptr<std::vector<S>> d, int n = -1)
        : shape(std::move(sh)), data(std::move(d)), node(n) {}

    int64_t size() const { return data ? int64_t(data->size()) : 0; }
    bool defined() const { return bool(data); }
    S* ptr() { return data->data(); }
    const S* ptr() const { return data->data(); }
    S& operator[](int64_t i) { return (*data)[i]; }
    const S& operator[](int64_t i) const { return (*data)[i]; }
    S item() const {
        check_shape(size() == 1, "item() on non-scalar tensor " + shape_str(shape));
        return (*data)[0];
    }
};

template <class S>
TensorT<S> make_tensor(Shape shape, S fill = S(0)) {
    auto d = std::make_shared<std::vector<S>>(size_t(numel(shape)), fill);
    return TensorT<S>(std::move(shape), std::move(d));
}

template <class S>
TensorT<S> make_tensor(Shape shape, std::vector<S> values) {
    check_shape(int64_t(values.size()) == numel(shape), "value count does not match shape");
    return TensorT<S>(std::move(shape), std::make_shared<std::vector<S>>(std::move(values)));
}

enum class ResizeMode { nearest, linear };

/// Per-op attention probe: blocks fill this (when given) with the raw
/// attention weight matrices so tests can assert row-stochasticity.
template <class S>
struct AttnTrace {
    std::vector<TensorT<S>> maps;  // each (..., rows, cols), rows sum to 1
};

template <class S>
class GraphT {
public:
    /// `training` gates dropout and batch-norm statistics; `grad` enables
    /// recording. Evaluation uses GraphT(seed, false, false): nothing is
    /// recorded and no activations are retained.
    explicit GraphT(uint64_t seed = 0, bool training = false, bool grad = true)
        : rng_(seed), training_(training), grad_enabled_(grad) {}

    GraphT(const GraphT&) = delete;
    GraphT& operator=(const GraphT&) = delete;

    bool training() const { return training_; }
    bool grad_enabled() const { return grad_enabled_; }
    Rng& rng() { return rng_; }
    int64_t node_count() const { return int64_t(nodes_.size()); }

    // -- leaves ------------------------------------------------------------
    TensorT<S> leaf(const Shape& shape, std::shared_ptr<std::vector<S>> data, bool requires_grad);
    TensorT<S> leaf(const TensorT<S>& t, bool requires_grad) { return leaf(t.shape, t.data, requires_grad); }
    TensorT<S> constant(const TensorT<S>& t) { return TensorT<S>(t.shape, t.data, -1); }

    // -- elementwise / scalar ----------------------------------------------
    TensorT<S> add(const TensorT<S>& a, const TensorT<S>& b);  // same shape, or b with batch extent 1
    TensorT<S> sub(const TensorT<S>& a, const TensorT<S>& b);
    TensorT<S> mul(const TensorT<S>& a, const TensorT<S>& b);
    TensorT<S> div(const TensorT<S>& a, const TensorT<S>& b);
    TensorT<S> affine(const TensorT<S>& x, S alpha, S beta);  // alpha*x + beta
    TensorT<S> log(const TensorT<S>& x);
    TensorT<S> clamp(const TensorT<S>& x, S lo, S hi);
    TensorT<S> relu(const TensorT<S>& x);
    TensorT<S> sigmoid(const TensorT<S>& x);
    TensorT<S> dropout(const TensorT<S>& x, double p, uint64_t seed);
    TensorT<S> sum_all(const TensorT<S>& x);  // -> shape {1}

    // -- structure -----------------------------------------------------------
    TensorT<S> reshape(const TensorT<S>& x, Shape shape);
    TensorT<S> transpose_last2(const TensorT<S>& x);
    TensorT<S> concat(const std::vector<TensorT<S>>& parts, int axis);
    TensorT<S> pad_spatial(const TensorT<S>& x, const std::vector<int64_t>& before,
                           const std::vector<int64_t>& after);
    TensorT<S> crop_spatial(const TensorT<S>& x, const std::vector<int64_t>& offset,
                            const std::vector<int64_t>& extents);

    // -- linear algebra -----------------------------------------------------
    /// (m,k)x(k,n), (B,m,k)x(B,k,n) or (B,m,k)x(k,n). trans_b swaps b's last
    /// two extents logically (b stays row-major in memory).
    TensorT<S> matmul(const TensorT<S>& a, const TensorT<S>& b, bool trans_b = false);
    TensorT<S> softmax(const TensorT<S>& x, int axis);
    /// x (..., t) + bias (t), gradient for bias sums the leading dims.
    TensorT<S> add_lastdim_bias(const TensorT<S>& x, const TensorT<S>& bias);

    // -- convolution / pooling / resampling ---------------------------------
    /// x (B,Cin,S...), w (Cout,Cin,K...), bias (Cout) optional (undefined ok).
    TensorT<S> conv(const TensorT<S>& x, const TensorT<S>& w, const TensorT<S>& bias,
                    const std::vector<int64_t>& stride, const std::vector<int64_t>& pad);
    /// x (B,Cin,S...), w (Cin,Cout,K...); out extent = (S-1)*stride + K.
    TensorT<S> conv_transpose(const TensorT<S>& x, const TensorT<S>& w, const TensorT<S>& bias,
                              const std::vector<int64_t>& stride);
    TensorT<S> max_pool(const TensorT<S>& x, const std::vector<int64_t>& window,
                        const std::vector<int64_t>& stride);
    TensorT<S> avg_pool(const TensorT<S>& x, const std::vector<int64_t>& window,
                        const std::vector<int64_t>& stride);
    /// align-corners=false resize of the spatial dims to `target`.
    TensorT<S> resize(const TensorT<S>& x, const std::vector<int64_t>& target, ResizeMode mode);

    // -- normalization -------------------------------------------------------
    /// Batch norm over (batch, spatial) per channel. Running stats are plain
    /// buffers owned by the caller and are updated only in training mode.
    TensorT<S> batch_norm(const TensorT<S>& x, const TensorT<S>& gamma, const TensorT<S>& beta,
                          std::vector<S>& running_mean, std::vector<S>& running_var,
                          double momentum = 0.1, double eps = 1e-5);
    /// Layer norm over the last extent.
    TensorT<S> layer_norm(const TensorT<S>& x, const TensorT<S>& gamma, const TensorT<S>& beta,
                          double eps = 1e-5);

    // -- fused ---------------------------------------------------------------
    /// x (B,C,S...) * m (B,1,S...) broadcast over channels.
    TensorT<S> mul_channelmap(const TensorT<S>& x, const TensorT<S>& m);
    /// base + p1*tsa + p2*gsa with scalar tensors p1, p2 (shape {1}).
    TensorT<S> saa_fuse(const TensorT<S>& base, const TensorT<S>& tsa, const TensorT<S>& gsa,
                        const TensorT<S>& p1, const TensorT<S>& p2);

    // -- backward ------------------------------------------------------------
    /// Reverse sweep from a scalar loss. Returns per-node gradients; entries
    /// for interior nodes are released as soon as they have been consumed, so
    /// only leaf gradients survive in the returned map.
    std::vector<std::vector<S>> backward(const TensorT<S>& loss);

    bool is_leaf(int node) const { return nodes_[size_t(node)].leaf; }

private:
    struct Node {
        int64_t size = 0;
        bool leaf = false;
        // Accumulates input gradients given this node's output gradient.
        std::function<void(GraphT&, std::vector<std::vector<S>>&, const std::vector<S>&)> backprop;
    };

    Rng rng_;
    bool training_;
    bool grad_enabled_;
    std::vector<Node> nodes_;

    bool tracked(const TensorT<S>& t) const { return grad_enabled_ && t.node >= 0; }
    int add_node(int64_t size, bool leaf,
                 std::function<void(GraphT&, std::vector<std::vector<S>>&, const std::vector<S>&)> fn);
    std::vector<S>& grad_buf(std::vector<std::vector<S>>& grads, int node);
    static void axpy(std::vector<S>& dst, const std::vector<S>& src);
};

using Tensor = TensorT<float>;
using Graph = GraphT<float>;

extern template struct TensorT<float>;
extern template struct TensorT<double>;
extern template class GraphT<float>;
extern template class GraphT<double>;

}  // namespace sb

#endif  // SB_TENSOR_HPP
