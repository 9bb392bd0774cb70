#ifndef SB_BLOCKS_HPP
#define SB_BLOCKS_HPP

#include <cmath>
#include <string>

#include "sb/tensor.hpp"

// Reusable network blocks. A block owns its parameters and binds them to the
// active graph on every forward, so blocks are pure functions of
// (input, parameters) and can serve concurrent eval calls.

namespace sb {

template <class S>
struct ParamT {
    std::string name;
    TensorT<S> value;
    bool learnable = true;
    int node = -1;  // tape binding from the most recent recorded forward

    TensorT<S> bind(GraphT<S>& g) {
        if (g.grad_enabled() && learnable) {
            auto t = g.leaf(value.shape, value.data, true);
            node = t.node;
            return t;
        }
        node = -1;
        return TensorT<S>(value.shape, value.data, -1);
    }
};

template <class S>
using ParamRefs = std::vector<ParamT<S>*>;

// -- initializers ------------------------------------------------------------

template <class S>
ParamT<S> he_uniform(const std::string& name, Shape shape, int64_t fan_in, Rng& rng) {
    const double bound = std::sqrt(6.0 / double(fan_in));
    std::vector<S> v(size_t(numel(shape)));
    for (auto& x : v) x = S(rng.uniform(-bound, bound));
    return ParamT<S>{name, make_tensor<S>(std::move(shape), std::move(v)), true, -1};
}

template <class S>
ParamT<S> const_param(const std::string& name, Shape shape, S fill, bool learnable = true) {
    return ParamT<S>{name, make_tensor<S>(std::move(shape), fill), learnable, -1};
}

// -- single conv layer (conv + optional batch norm + optional relu) ----------

template <class S>
struct ConvLayerT {
    ParamT<S> w, b, gamma, beta, rmean, rvar;
    int64_t k = 3;
    bool norm = true;
    bool act = true;

    void init(const std::string& prefix, int rank, int64_t cin, int64_t cout, int64_t kernel,
              bool use_norm, bool use_act, Rng& rng) {
        k = kernel;
        norm = use_norm;
        act = use_act;
        Shape ws{cout, cin};
        int64_t fan = cin;
        for (int r = 0; r < rank; ++r) {
            ws.push_back(kernel);
            fan *= kernel;
        }
        w = he_uniform<S>(prefix + ".w", ws, fan, rng);
        b = const_param<S>(prefix + ".b", {cout}, S(0));
        if (norm) {
            gamma = const_param<S>(prefix + ".gamma", {cout}, S(1));
            beta = const_param<S>(prefix + ".beta", {cout}, S(0));
            rmean = const_param<S>(prefix + ".running_mean", {cout}, S(0), false);
            rvar = const_param<S>(prefix + ".running_var", {cout}, S(1), false);
        }
    }

    TensorT<S> forward(GraphT<S>& g, const TensorT<S>& x) {
        const int rank = int(x.shape.size()) - 2;
        std::vector<int64_t> stride(size_t(rank), 1), pad(size_t(rank), (k - 1) / 2);
        auto y = g.conv(x, w.bind(g), b.bind(g), stride, pad);
        if (norm) y = g.batch_norm(y, gamma.bind(g), beta.bind(g), *rmean.value.data, *rvar.value.data);
        return act ? g.relu(y) : y;
    }

    void collect(ParamRefs<S>& out) {
        out.push_back(&w);
        out.push_back(&b);
        if (norm) {
            out.push_back(&gamma);
            out.push_back(&beta);
            out.push_back(&rmean);
            out.push_back(&rvar);
        }
    }
};

// -- conv block: two 3^d conv layers ------------------------------------------

template <class S>
struct ConvBlockT {
    ConvLayerT<S> l1, l2;

    void init(const std::string& prefix, int rank, int64_t cin, int64_t cout, bool norm, Rng& rng) {
        l1.init(prefix + ".conv1", rank, cin, cout, 3, norm, true, rng);
        l2.init(prefix + ".conv2", rank, cout, cout, 3, norm, true, rng);
    }

    TensorT<S> forward(GraphT<S>& g, const TensorT<S>& x) { return l2.forward(g, l1.forward(g, x)); }

    void collect(ParamRefs<S>& out) {
        l1.collect(out);
        l2.collect(out);
    }
};

// -- residual block: main path + (projected) shortcut, relu after the sum -----

template <class S>
struct ResidualBlockT {
    ConvLayerT<S> l1, l2;
    ConvLayerT<S> shortcut;  // 1x1, only when cin != cout
    bool projected = false;

    void init(const std::string& prefix, int rank, int64_t cin, int64_t cout, bool norm, Rng& rng) {
        l1.init(prefix + ".conv1", rank, cin, cout, 3, norm, true, rng);
        l2.init(prefix + ".conv2", rank, cout, cout, 3, norm, false, rng);
        projected = cin != cout;
        if (projected) shortcut.init(prefix + ".shortcut", rank, cin, cout, 1, false, false, rng);
    }

    TensorT<S> forward(GraphT<S>& g, const TensorT<S>& x) {
        auto main = l2.forward(g, l1.forward(g, x));
        auto skip = projected ? shortcut.forward(g, x) : x;
        return g.relu(g.add(main, skip));
    }

    void collect(ParamRefs<S>& out) {
        l1.collect(out);
        l2.collect(out);
        if (projected) shortcut.collect(out);
    }
};

// -- attention gate ------------------------------------------------------------

// Gate features come from one level deeper (half spatial extents) and are
// resized up internally; the sigmoid coefficient map multiplies the skip.
template <class S>
struct AttentionGateT {
    ConvLayerT<S> wg, wx, psi;  // 1x1 convs, no norm/act (combined manually)

    void init(const std::string& prefix, int rank, int64_t skip_c, int64_t gate_c, Rng& rng) {
        const int64_t inter = std::max<int64_t>(1, skip_c / 2);
        wg.init(prefix + ".gate_proj", rank, gate_c, inter, 1, false, false, rng);
        wx.init(prefix + ".skip_proj", rank, skip_c, inter, 1, false, false, rng);
        psi.init(prefix + ".psi", rank, inter, 1, 1, false, false, rng);
    }

    TensorT<S> forward(GraphT<S>& g, const TensorT<S>& skip, const TensorT<S>& gate,
                       TensorT<S>* coeff_out = nullptr) {
        std::vector<int64_t> target(skip.shape.begin() + 2, skip.shape.end());
        auto gate_up = g.resize(gate, target, ResizeMode::linear);
        auto mixed = g.relu(g.add(wg.forward(g, gate_up), wx.forward(g, skip)));
        auto coeff = g.sigmoid(psi.forward(g, mixed));  // (B,1,sp)
        if (coeff_out) *coeff_out = coeff;
        return g.mul_channelmap(skip, coeff);
    }

    void collect(ParamRefs<S>& out) {
        wg.collect(out);
        wx.collect(out);
        psi.collect(out);
    }
};

// -- positional encoding --------------------------------------------------------

/// Fixed sinusoidal encoding, shape (1, n, t).
template <class S>
TensorT<S> sinusoidal_positions(int64_t n, int64_t t) {
    std::vector<S> pe(size_t(n * t));
    for (int64_t pos = 0; pos < n; ++pos)
        for (int64_t i = 0; i < t; ++i) {
            const double angle = double(pos) / std::pow(10000.0, double(2 * (i / 2)) / double(t));
            pe[size_t(pos * t + i)] = S(i % 2 == 0 ? std::sin(angle) : std::cos(angle));
        }
    return make_tensor<S>({1, n, t}, std::move(pe));
}

namespace detail {

template <class S>
TensorT<S> to_sequence(GraphT<S>& g, const TensorT<S>& x) {  // (B,t,sp..) -> (B,n,t)
    const int64_t B = x.shape[0], t = x.shape[1];
    const int64_t n = x.size() / (B * t);
    return g.transpose_last2(g.reshape(x, {B, t, n}));
}

template <class S>
TensorT<S> from_sequence(GraphT<S>& g, const TensorT<S>& seq, const Shape& like) {  // inverse
    const int64_t B = like[0];
    Shape shape = like;
    return g.reshape(g.transpose_last2(seq), std::move(shape));
}

template <class S>
TensorT<S> split_heads(GraphT<S>& g, const TensorT<S>& x, int64_t H) {  // (B,n,d) -> (B*H,n,d/H)
    const int64_t B = x.shape[0], n = x.shape[1], d = x.shape[2];
    check_shape(d % H == 0, "attention: embedding " + std::to_string(d) +
                                " not divisible by head count " + std::to_string(H));
    auto tr = g.transpose_last2(x);
    return g.transpose_last2(g.reshape(tr, {B * H, d / H, n}));
}

template <class S>
TensorT<S> merge_heads(GraphT<S>& g, const TensorT<S>& x, int64_t B, int64_t H) {
    const int64_t n = x.shape[1], dh = x.shape[2];
    auto tr = g.transpose_last2(x);
    return g.transpose_last2(g.reshape(tr, {B, H * dh, n}));
}

/// Scaled dot-product attention with H heads over (B,n,d) sequences.
template <class S>
TensorT<S> multihead_attention(GraphT<S>& g, const TensorT<S>& Q, const TensorT<S>& K,
                               const TensorT<S>& V, int64_t H, AttnTrace<S>* trace) {
    const int64_t B = Q.shape[0];
    auto Qh = split_heads(g, Q, H);
    auto Kh = split_heads(g, K, H);
    auto Vh = split_heads(g, V, H);
    const int64_t dh = Qh.shape[2];
    auto scores = g.affine(g.matmul(Qh, Kh, /*trans_b=*/true), S(1.0 / std::sqrt(double(dh))), S(0));
    auto attn = g.softmax(scores, 2);  // rows sum to 1
    if (trace) trace->maps.push_back(attn);
    return merge_heads(g, g.matmul(attn, Vh), B, H);
}

}  // namespace detail

// -- transformer self-attention (TSA) -------------------------------------------

// Q/K projected to dk (default t/8), V kept at full width; softmax(QK^T/sqrt(dk))V
// over the flattened positions with sinusoidal positions added before projection.
template <class S>
struct TsaT {
    ParamT<S> wq, bq, wk, bk, wv, bv;
    int64_t dk = 0;

    void init(const std::string& prefix, int64_t t, int64_t dk_, Rng& rng) {
        dk = dk_;
        wq = he_uniform<S>(prefix + ".wq", {t, dk}, t, rng);
        bq = const_param<S>(prefix + ".bq", {dk}, S(0));
        wk = he_uniform<S>(prefix + ".wk", {t, dk}, t, rng);
        bk = const_param<S>(prefix + ".bk", {dk}, S(0));
        wv = he_uniform<S>(prefix + ".wv", {t, t}, t, rng);
        bv = const_param<S>(prefix + ".bv", {t}, S(0));
    }

    TensorT<S> forward(GraphT<S>& g, const TensorT<S>& x, AttnTrace<S>* trace = nullptr) {
        auto seq = detail::to_sequence(g, x);
        const int64_t n = seq.shape[1], t = seq.shape[2];
        seq = g.add(seq, g.constant(sinusoidal_positions<S>(n, t)));
        auto Q = g.add_lastdim_bias(g.matmul(seq, wq.bind(g)), bq.bind(g));
        auto K = g.add_lastdim_bias(g.matmul(seq, wk.bind(g)), bk.bind(g));
        auto V = g.add_lastdim_bias(g.matmul(seq, wv.bind(g)), bv.bind(g));
        auto out = detail::multihead_attention(g, Q, K, V, 1, trace);
        return detail::from_sequence(g, out, x.shape);
    }

    void collect(ParamRefs<S>& out) {
        for (auto* p : {&wq, &bq, &wk, &bk, &wv, &bv}) out.push_back(p);
    }
};

// -- global spatial attention (GSA) ----------------------------------------------

// Position-affinity attention: A[i,j] = softmax_i(key_i . query_j), the value
// map aggregated over positions. Key/query projected to t' = t/reduction.
template <class S>
struct GsaT {
    ConvLayerT<S> key, query, value;  // 1x1 convs

    void init(const std::string& prefix, int rank, int64_t t, int64_t t_reduced, Rng& rng) {
        key.init(prefix + ".key", rank, t, t_reduced, 1, false, false, rng);
        query.init(prefix + ".query", rank, t, t_reduced, 1, false, false, rng);
        value.init(prefix + ".value", rank, t, t, 1, false, false, rng);
    }

    TensorT<S> forward(GraphT<S>& g, const TensorT<S>& x, AttnTrace<S>* trace = nullptr) {
        const int64_t B = x.shape[0], t = x.shape[1];
        const int64_t n = x.size() / (B * t);
        auto k = g.reshape(key.forward(g, x), {B, key.w.value.shape[0], n});
        auto q = g.reshape(query.forward(g, x), {B, query.w.value.shape[0], n});
        auto v = g.reshape(value.forward(g, x), {B, t, n});
        auto energy = g.matmul(g.transpose_last2(k), q);  // (B,n,n), E[i,j] = k_i . q_j
        auto attn = g.softmax(energy, 1);                 // columns are distributions over i
        if (trace) trace->maps.push_back(g.transpose_last2(attn));  // expose row-stochastic view
        auto out = g.matmul(v, attn);                     // out_j = sum_i v_i A[i,j]
        return g.reshape(out, x.shape);
    }

    void collect(ParamRefs<S>& out) {
        key.collect(out);
        query.collect(out);
        value.collect(out);
    }
};

// -- self-aware attention fusion (SAA) --------------------------------------------

// psi1 * TSA + psi2 * GSA + base, with psi1 = psi2 = 0 at initialization so the
// fused output starts bit-equal to the base features.
template <class S>
struct SaaT {
    TsaT<S> tsa;
    GsaT<S> gsa;
    ParamT<S> psi1, psi2;

    void init(const std::string& prefix, int rank, int64_t t, int64_t reduction, Rng& rng) {
        const int64_t tr = std::max<int64_t>(1, t / reduction);
        tsa.init(prefix + ".tsa", t, tr, rng);
        gsa.init(prefix + ".gsa", rank, t, tr, rng);
        psi1 = const_param<S>(prefix + ".psi1", {1}, S(0));
        psi2 = const_param<S>(prefix + ".psi2", {1}, S(0));
    }

    TensorT<S> forward(GraphT<S>& g, const TensorT<S>& base, AttnTrace<S>* trace = nullptr) {
        auto f_tsa = tsa.forward(g, base, trace);
        auto f_gsa = gsa.forward(g, base, trace);
        return g.saa_fuse(base, f_tsa, f_gsa, psi1.bind(g), psi2.bind(g));
    }

    void collect(ParamRefs<S>& out) {
        tsa.collect(out);
        gsa.collect(out);
        out.push_back(&psi1);
        out.push_back(&psi2);
    }
};

// -- multi-head self-attention (MHSA) ----------------------------------------------

template <class S>
struct MhsaT {
    ParamT<S> wq, bq, wk, bk, wv, bv, wo, bo;
    int64_t heads = 4;

    void init(const std::string& prefix, int64_t t, int64_t H, Rng& rng) {
        heads = H;
        wq = he_uniform<S>(prefix + ".wq", {t, t}, t, rng);
        bq = const_param<S>(prefix + ".bq", {t}, S(0));
        wk = he_uniform<S>(prefix + ".wk", {t, t}, t, rng);
        bk = const_param<S>(prefix + ".bk", {t}, S(0));
        wv = he_uniform<S>(prefix + ".wv", {t, t}, t, rng);
        bv = const_param<S>(prefix + ".bv", {t}, S(0));
        wo = he_uniform<S>(prefix + ".wo", {t, t}, t, rng);
        bo = const_param<S>(prefix + ".bo", {t}, S(0));
    }

    /// Identity output projection; with H=1 and Q/K/V weights copied from a
    /// TsaT this reduces exactly to tsa_forward.
    void set_identity_out_proj() {
        const int64_t t = wo.value.shape[0];
        std::fill(wo.value.data->begin(), wo.value.data->end(), S(0));
        for (int64_t i = 0; i < t; ++i) (*wo.value.data)[size_t(i * t + i)] = S(1);
    }

    TensorT<S> forward(GraphT<S>& g, const TensorT<S>& x, AttnTrace<S>* trace = nullptr) {
        auto seq = detail::to_sequence(g, x);
        const int64_t n = seq.shape[1], t = seq.shape[2];
        seq = g.add(seq, g.constant(sinusoidal_positions<S>(n, t)));
        auto Q = g.add_lastdim_bias(g.matmul(seq, wq.bind(g)), bq.bind(g));
        auto K = g.add_lastdim_bias(g.matmul(seq, wk.bind(g)), bk.bind(g));
        auto V = g.add_lastdim_bias(g.matmul(seq, wv.bind(g)), bv.bind(g));
        auto out = detail::multihead_attention(g, Q, K, V, heads, trace);
        out = g.add_lastdim_bias(g.matmul(out, wo.bind(g)), bo.bind(g));
        return detail::from_sequence(g, out, x.shape);
    }

    void collect(ParamRefs<S>& out) {
        for (auto* p : {&wq, &bq, &wk, &bk, &wv, &bv, &wo, &bo}) out.push_back(p);
    }
};

// -- position-wise feed-forward + transformer encoder layer -------------------------

template <class S>
struct FeedForwardT {
    ParamT<S> w1, b1, w2, b2;

    void init(const std::string& prefix, int64_t t, int64_t hidden, Rng& rng) {
        w1 = he_uniform<S>(prefix + ".w1", {t, hidden}, t, rng);
        b1 = const_param<S>(prefix + ".b1", {hidden}, S(0));
        w2 = he_uniform<S>(prefix + ".w2", {hidden, t}, hidden, rng);
        b2 = const_param<S>(prefix + ".b2", {t}, S(0));
    }

    TensorT<S> forward(GraphT<S>& g, const TensorT<S>& seq) {
        auto h = g.relu(g.add_lastdim_bias(g.matmul(seq, w1.bind(g)), b1.bind(g)));
        return g.add_lastdim_bias(g.matmul(h, w2.bind(g)), b2.bind(g));
    }

    void collect(ParamRefs<S>& out) {
        for (auto* p : {&w1, &b1, &w2, &b2}) out.push_back(p);
    }
};

template <class S>
struct TransformerLayerT {
    MhsaT<S> attn;
    FeedForwardT<S> ffn;
    ParamT<S> ln1_g, ln1_b, ln2_g, ln2_b;

    void init(const std::string& prefix, int64_t t, int64_t heads, Rng& rng) {
        attn.init(prefix + ".mhsa", t, heads, rng);
        ffn.init(prefix + ".ffn", t, 4 * t, rng);
        ln1_g = const_param<S>(prefix + ".ln1.gamma", {t}, S(1));
        ln1_b = const_param<S>(prefix + ".ln1.beta", {t}, S(0));
        ln2_g = const_param<S>(prefix + ".ln2.gamma", {t}, S(1));
        ln2_b = const_param<S>(prefix + ".ln2.beta", {t}, S(0));
    }

    TensorT<S> forward(GraphT<S>& g, const TensorT<S>& x, AttnTrace<S>* trace = nullptr) {
        auto att = attn.forward(g, x, trace);
        auto seq = detail::to_sequence(g, g.add(x, att));
        seq = g.layer_norm(seq, ln1_g.bind(g), ln1_b.bind(g));
        auto h = g.layer_norm(g.add(seq, ffn.forward(g, seq)), ln2_g.bind(g), ln2_b.bind(g));
        return detail::from_sequence(g, h, x.shape);
    }

    void collect(ParamRefs<S>& out) {
        attn.collect(out);
        ffn.collect(out);
        for (auto* p : {&ln1_g, &ln1_b, &ln2_g, &ln2_b}) out.push_back(p);
    }
};

// -- multi-head cross-attention (MHCA) -----------------------------------------------

// Queries from the (upsampled) decoder stream, keys/values from the skip;
// the attended skip features are concatenated with the decoder features.
// Above max_positions both streams are average-pooled to a coarse grid and
// the attended map is resized back, bounding the score matrices; below the
// bound the op is exact cross-attention.
template <class S>
struct MhcaT {
    ParamT<S> wq, bq, wk, bk, wv, bv, wo, bo;
    int64_t heads = 4;
    int64_t max_positions = 1024;

    void init(const std::string& prefix, int64_t skip_c, int64_t dec_c, int64_t H, int64_t max_pos,
              Rng& rng) {
        heads = H;
        max_positions = max_pos;
        wq = he_uniform<S>(prefix + ".wq", {dec_c, skip_c}, dec_c, rng);
        bq = const_param<S>(prefix + ".bq", {skip_c}, S(0));
        wk = he_uniform<S>(prefix + ".wk", {skip_c, skip_c}, skip_c, rng);
        bk = const_param<S>(prefix + ".bk", {skip_c}, S(0));
        wv = he_uniform<S>(prefix + ".wv", {skip_c, skip_c}, skip_c, rng);
        bv = const_param<S>(prefix + ".bv", {skip_c}, S(0));
        wo = he_uniform<S>(prefix + ".wo", {skip_c, skip_c}, skip_c, rng);
        bo = const_param<S>(prefix + ".bo", {skip_c}, S(0));
    }

    void set_identity_projections() {
        for (auto* p : {&wq, &wk, &wv, &wo}) {
            const int64_t t = p->value.shape[0];
            check_shape(p->value.shape[1] == t, "identity projection needs square weights");
            std::fill(p->value.data->begin(), p->value.data->end(), S(0));
            for (int64_t i = 0; i < t; ++i) (*p->value.data)[size_t(i * t + i)] = S(1);
        }
    }

    TensorT<S> forward(GraphT<S>& g, const TensorT<S>& skip, const TensorT<S>& decoder,
                       AttnTrace<S>* trace = nullptr) {
        check_shape(skip.shape[0] == decoder.shape[0], "mhca: batch mismatch");
        std::vector<int64_t> sext(skip.shape.begin() + 2, skip.shape.end());
        auto dec = decoder;
        if (!std::equal(sext.begin(), sext.end(), decoder.shape.begin() + 2))
            dec = g.resize(decoder, sext, ResizeMode::linear);

        // bounded attention grid
        int64_t n = 1;
        for (int64_t e : sext) n *= e;
        int64_t f = 1;
        auto positions = [&](int64_t fac) {
            int64_t p = 1;
            for (int64_t e : sext) p *= std::max<int64_t>(1, e / fac);
            return p;
        };
        while (positions(f) > max_positions) f *= 2;
        TensorT<S> q_src = dec, kv_src = skip;
        if (f > 1) {
            std::vector<int64_t> win;
            for (int64_t e : sext) win.push_back(std::min(f, e));
            q_src = g.avg_pool(dec, win, win);
            kv_src = g.avg_pool(skip, win, win);
        }

        auto q_seq = detail::to_sequence(g, q_src);
        auto kv_seq = detail::to_sequence(g, kv_src);
        const int64_t np = q_seq.shape[1];
        auto pe_q = g.constant(sinusoidal_positions<S>(np, q_seq.shape[2]));
        auto pe_kv = g.constant(sinusoidal_positions<S>(np, kv_seq.shape[2]));
        q_seq = g.add(q_seq, pe_q);
        kv_seq = g.add(kv_seq, pe_kv);
        auto Q = g.add_lastdim_bias(g.matmul(q_seq, wq.bind(g)), bq.bind(g));
        auto K = g.add_lastdim_bias(g.matmul(kv_seq, wk.bind(g)), bk.bind(g));
        auto V = g.add_lastdim_bias(g.matmul(kv_seq, wv.bind(g)), bv.bind(g));
        auto out = detail::multihead_attention(g, Q, K, V, heads, trace);
        out = g.add_lastdim_bias(g.matmul(out, wo.bind(g)), bo.bind(g));

        Shape attended_shape = skip.shape;
        if (f > 1) {
            Shape coarse = kv_src.shape;
            auto att = detail::from_sequence(g, out, coarse);
            auto up = g.resize(att, sext, ResizeMode::linear);
            return g.concat({up, dec}, 1);
        }
        auto att = detail::from_sequence(g, out, attended_shape);
        return g.concat({att, dec}, 1);
    }

    void collect(ParamRefs<S>& out) {
        for (auto* p : {&wq, &bq, &wk, &bk, &wv, &bv, &wo, &bo}) out.push_back(p);
    }
};

}  // namespace sb

#endif  // SB_BLOCKS_HPP
