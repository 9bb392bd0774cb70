#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstring>

#include "sb/blocks.hpp"
#include "test_support.hpp"

using namespace sb;
using sbt::param_grad_check;
using sbt::random_tensor;

using D = double;

TEST_CASE("conv_block: zero input gives zero output, shape contract holds") {
    Rng rng(1);
    ConvBlockT<D> blk;
    blk.init("blk", 2, 3, 8, true, rng);
    GraphT<D> g(0, true, false);
    auto zero = make_tensor<D>({2, 3, 6, 6}, 0.0);
    auto y = blk.forward(g, zero);
    REQUIRE(y.shape == Shape{2, 8, 6, 6});
    for (int64_t i = 0; i < y.size(); ++i) CHECK(y[i] == 0.0);

    ConvBlockT<float> wide;
    Rng rng2(2);
    wide.init("wide", 2, 64, 128, true, rng2);
    GraphT<float> gf(0, false, false);
    auto x = random_tensor<float>({1, 64, 96, 96}, 3);
    auto yw = wide.forward(gf, x);
    CHECK(yw.shape == Shape{1, 128, 96, 96});
}

TEST_CASE("conv_block rejects channel mismatch") {
    Rng rng(1);
    ConvBlockT<D> blk;
    blk.init("blk", 2, 3, 8, true, rng);
    GraphT<D> g;
    CHECK_THROWS_AS(blk.forward(g, make_tensor<D>({1, 4, 6, 6})), DimensionError);
}

TEST_CASE("conv_block gradient check") {
    for (int s = 0; s < 3; ++s) {
        Rng rng(uint64_t(10 + s));
        ConvBlockT<D> blk;
        blk.init("blk", 2, 2, 3, true, rng);
        ParamRefs<D> params;
        blk.collect(params);
        auto x = random_tensor<D>({1, 2, 6, 6}, uint64_t(50 + s));
        auto f = [&](GraphT<D>& g, const TensorT<D>& in) {
            auto y = blk.forward(g, in);
            return g.sum_all(g.mul(y, y));
        };
        CHECK(param_grad_check<D>(f, params, x) < 1e-4);
    }
}

TEST_CASE("residual_block: zero main path reduces to relu(x) with identity shortcut") {
    Rng rng(3);
    ResidualBlockT<D> blk;
    blk.init("res", 2, 4, 4, true, rng);
    REQUIRE_FALSE(blk.projected);
    std::fill(blk.l1.w.value.data->begin(), blk.l1.w.value.data->end(), 0.0);
    std::fill(blk.l2.w.value.data->begin(), blk.l2.w.value.data->end(), 0.0);
    GraphT<D> g(0, true, false);
    auto x = random_tensor<D>({1, 4, 5, 5}, 4, -2, 2);
    auto y = blk.forward(g, x);
    REQUIRE(y.shape == x.shape);
    for (int64_t i = 0; i < x.size(); ++i) CHECK(y[i] == std::max(0.0, x[i]));
}

TEST_CASE("residual_block shape contract and gradient") {
    Rng rng(5);
    ResidualBlockT<D> blk;
    blk.init("res", 2, 2, 5, true, rng);
    REQUIRE(blk.projected);
    GraphT<D> g(0, true, false);
    auto x = random_tensor<D>({2, 2, 6, 6}, 6);
    CHECK(blk.forward(g, x).shape == Shape{2, 5, 6, 6});

    ParamRefs<D> params;
    blk.collect(params);
    auto f = [&](GraphT<D>& gg, const TensorT<D>& in) {
        auto y = blk.forward(gg, in);
        return gg.sum_all(gg.mul(y, y));
    };
    for (int s = 0; s < 3; ++s)
        CHECK(param_grad_check<D>(f, params, random_tensor<D>({1, 2, 4, 4}, uint64_t(70 + s))) < 1e-4);
}

TEST_CASE("attention_gate: saturation, coefficient range, gradient") {
    Rng rng(7);
    AttentionGateT<D> ag;
    ag.init("ag", 2, 4, 8, rng);
    auto skip = random_tensor<D>({1, 4, 6, 6}, 8, -2, 2);
    auto gate = random_tensor<D>({1, 8, 3, 3}, 9, -2, 2);

    GraphT<D> g(0, false, false);
    TensorT<D> coeff;
    auto gated = ag.forward(g, skip, gate, &coeff);
    REQUIRE(gated.shape == skip.shape);
    for (int64_t i = 0; i < coeff.size(); ++i) {
        CHECK(coeff[i] > 0.0);
        CHECK(coeff[i] < 1.0);
    }
    for (int64_t c = 0; c < 4; ++c)
        for (int64_t s = 0; s < 36; ++s)
            CHECK(std::abs(gated[c * 36 + s]) <= std::abs(skip[c * 36 + s]));

    // large combiner bias saturates the sigmoid: coefficients -> 1, output -> skip
    (*ag.psi.b.value.data)[0] = 30.0;
    auto saturated = ag.forward(g, skip, gate);
    for (int64_t i = 0; i < skip.size(); ++i) CHECK(std::abs(saturated[i] - skip[i]) < 1e-3);
    (*ag.psi.b.value.data)[0] = 0.0;

    ParamRefs<D> params;
    ag.collect(params);
    auto gate_fixed = random_tensor<D>({1, 8, 2, 2}, 99);
    auto f = [&](GraphT<D>& gg, const TensorT<D>& in) {
        auto img = gg.reshape(in, {1, 4, 4, 4});
        auto y = ag.forward(gg, img, gg.constant(gate_fixed));
        return gg.sum_all(gg.mul(y, y));
    };
    for (int s = 0; s < 3; ++s)
        CHECK(param_grad_check<D>(f, params, random_tensor<D>({64}, uint64_t(100 + s))) < 1e-4);
}

TEST_CASE("gsa: single position degenerates to the value projection") {
    Rng rng(11);
    GsaT<D> gsa;
    gsa.init("gsa", 2, 6, 2, rng);
    auto x = random_tensor<D>({2, 6, 1, 1}, 12);
    GraphT<D> g(0, false, false);
    AttnTrace<D> trace;
    auto y = gsa.forward(g, x, &trace);
    auto vref = gsa.value.forward(g, x);
    REQUIRE(y.shape == x.shape);
    for (int64_t i = 0; i < y.size(); ++i) CHECK(y[i] == doctest::Approx(vref[i]).epsilon(1e-12));
    REQUIRE(trace.maps.size() == 1);
    CHECK(trace.maps[0].size() == 2);  // (B,1,1)
    CHECK(trace.maps[0][0] == doctest::Approx(1.0));
}

TEST_CASE("gsa: two-position toy case matches dense softmax(M N) W evaluation") {
    Rng rng(13);
    GsaT<D> gsa;
    gsa.init("gsa", 2, 2, 1, rng);
    *gsa.key.w.value.data = {0.5, -1.0};
    *gsa.key.b.value.data = {0.1};
    *gsa.query.w.value.data = {1.5, 0.25};
    *gsa.query.b.value.data = {-0.2};
    *gsa.value.w.value.data = {1.0, 2.0, -0.5, 0.75};
    *gsa.value.b.value.data = {0.05, -0.1};

    auto x = make_tensor<D>({1, 2, 1, 2}, {0.3, -0.7, 1.2, 0.4});  // t=2, n=2
    GraphT<D> g(0, false, false);
    auto y = gsa.forward(g, x);

    double key[2], query[2], value[2][2];
    for (int j = 0; j < 2; ++j) {
        const double x0 = x[j], x1 = x[2 + j];
        key[j] = 0.5 * x0 + -1.0 * x1 + 0.1;
        query[j] = 1.5 * x0 + 0.25 * x1 + -0.2;
        value[0][j] = 1.0 * x0 + 2.0 * x1 + 0.05;
        value[1][j] = -0.5 * x0 + 0.75 * x1 + -0.1;
    }
    for (int j = 0; j < 2; ++j) {  // column j: A[i,j] = softmax_i(key_i * query_j)
        const double e0 = std::exp(key[0] * query[j]), e1 = std::exp(key[1] * query[j]);
        const double a0 = e0 / (e0 + e1), a1 = e1 / (e0 + e1);
        for (int t = 0; t < 2; ++t) {
            const double ref = value[t][0] * a0 + value[t][1] * a1;
            CHECK(y[t * 2 + j] == doctest::Approx(ref).epsilon(1e-10));
        }
    }
}

TEST_CASE("gsa: attention columns normalize and gradient check") {
    Rng rng(17);
    GsaT<D> gsa;
    gsa.init("gsa", 2, 4, 1, rng);
    auto x = random_tensor<D>({1, 4, 3, 2}, 18);
    GraphT<D> g(0, false, false);
    AttnTrace<D> trace;
    gsa.forward(g, x, &trace);
    REQUIRE(trace.maps.size() == 1);
    const auto& rows = trace.maps[0];  // row-stochastic view
    REQUIRE(rows.shape == Shape{1, 6, 6});
    for (int64_t r = 0; r < 6; ++r) {
        double s = 0;
        for (int64_t c = 0; c < 6; ++c) {
            const double v = rows[r * 6 + c];
            CHECK(v >= 0.0);
            CHECK(v <= 1.0);
            s += v;
        }
        CHECK(std::abs(s - 1.0) < 1e-6);
    }

    ParamRefs<D> params;
    gsa.collect(params);
    auto f = [&](GraphT<D>& gg, const TensorT<D>& in) {
        auto img = gg.reshape(in, {1, 4, 2, 2});
        auto y = gsa.forward(gg, img);
        return gg.sum_all(gg.mul(y, y));
    };
    for (int s = 0; s < 3; ++s)
        CHECK(param_grad_check<D>(f, params, random_tensor<D>({16}, uint64_t(200 + s))) < 1e-4);
}

TEST_CASE("tsa: single token returns its value projection") {
    Rng rng(19);
    TsaT<D> tsa;
    tsa.init("tsa", 3, 2, rng);
    auto x = make_tensor<D>({1, 3, 1, 1}, {0.4, -1.1, 0.7});
    GraphT<D> g(0, false, false);
    auto y = tsa.forward(g, x);
    // position 0 encoding: even dims sin(0)=0, odd dims cos(0)=1
    const double seq[3] = {0.4 + 0.0, -1.1 + 1.0, 0.7 + 0.0};
    for (int64_t t = 0; t < 3; ++t) {
        double ref = (*tsa.bv.value.data)[size_t(t)];
        for (int64_t i = 0; i < 3; ++i) ref += seq[i] * (*tsa.wv.value.data)[size_t(i * 3 + t)];
        CHECK(y[t] == doctest::Approx(ref).epsilon(1e-12));
    }
}

TEST_CASE("tsa: identical keys give uniform attention") {
    Rng rng(23);
    TsaT<D> tsa;
    tsa.init("tsa", 4, 2, rng);
    std::fill(tsa.wk.value.data->begin(), tsa.wk.value.data->end(), 0.0);
    (*tsa.bk.value.data)[0] = 0.8;
    (*tsa.bk.value.data)[1] = -0.3;
    auto x = random_tensor<D>({1, 4, 2, 3}, 24);
    GraphT<D> g(0, false, false);
    AttnTrace<D> trace;
    tsa.forward(g, x, &trace);
    REQUIRE(trace.maps.size() == 1);
    for (int64_t i = 0; i < trace.maps[0].size(); ++i)
        CHECK(trace.maps[0][i] == doctest::Approx(1.0 / 6).epsilon(1e-9));
}

TEST_CASE("tsa: three-token toy case matches the dense formula") {
    Rng rng(29);
    const int64_t t = 2, n = 3;
    TsaT<D> tsa;
    tsa.init("tsa", t, 2, rng);
    auto x = random_tensor<D>({1, t, 3, 1}, 30);
    GraphT<D> g(0, false, false);
    auto y = tsa.forward(g, x);

    auto pe = sinusoidal_positions<D>(n, t);
    double seq[3][2];
    for (int64_t p = 0; p < n; ++p)
        for (int64_t c = 0; c < t; ++c) seq[p][c] = x[c * n + p] + pe[p * t + c];
    double Q[3][2], K[3][2], V[3][2];
    for (int64_t p = 0; p < n; ++p)
        for (int64_t j = 0; j < 2; ++j) {
            Q[p][j] = (*tsa.bq.value.data)[size_t(j)];
            K[p][j] = (*tsa.bk.value.data)[size_t(j)];
            V[p][j] = (*tsa.bv.value.data)[size_t(j)];
            for (int64_t i = 0; i < t; ++i) {
                Q[p][j] += seq[p][i] * (*tsa.wq.value.data)[size_t(i * 2 + j)];
                K[p][j] += seq[p][i] * (*tsa.wk.value.data)[size_t(i * 2 + j)];
                V[p][j] += seq[p][i] * (*tsa.wv.value.data)[size_t(i * 2 + j)];
            }
        }
    for (int64_t p = 0; p < n; ++p) {
        double e[3], mx = -1e300;
        for (int64_t q = 0; q < n; ++q) {
            e[q] = (Q[p][0] * K[q][0] + Q[p][1] * K[q][1]) / std::sqrt(2.0);
            mx = std::max(mx, e[q]);
        }
        double z = 0;
        for (int64_t q = 0; q < n; ++q) z += std::exp(e[q] - mx);
        for (int64_t c = 0; c < t; ++c) {
            double ref = 0;
            for (int64_t q = 0; q < n; ++q) ref += std::exp(e[q] - mx) / z * V[q][c];
            CHECK(y[c * n + p] == doctest::Approx(ref).epsilon(1e-10));
        }
    }
}

TEST_CASE("saa_fuse op: null weights, pure terms, elementwise oracle, linearity") {
    GraphT<D> g;
    auto base = random_tensor<D>({2, 3, 2, 2}, 31, -2, 2);
    auto tsa = random_tensor<D>({2, 3, 2, 2}, 32, -2, 2);
    auto gsa = random_tensor<D>({2, 3, 2, 2}, 33, -2, 2);
    auto zero = make_tensor<D>({1}, {0.0});
    auto one = make_tensor<D>({1}, {1.0});

    auto fused0 = g.saa_fuse(base, tsa, gsa, zero, zero);
    for (int64_t i = 0; i < base.size(); ++i)
        CHECK(std::memcmp(&fused0[i], &base[i], sizeof(D)) == 0);  // bit-equal at null weights

    auto zbase = make_tensor<D>(base.shape, 0.0);
    auto pure_tsa = g.saa_fuse(zbase, tsa, gsa, one, zero);
    for (int64_t i = 0; i < base.size(); ++i) CHECK(pure_tsa[i] == tsa[i]);

    auto half = make_tensor<D>({1}, {0.5});
    auto quarter = make_tensor<D>({1}, {0.25});
    auto mixed = g.saa_fuse(base, tsa, gsa, half, quarter);
    for (int64_t i = 0; i < base.size(); ++i)
        CHECK(mixed[i] == doctest::Approx(base[i] + 0.5 * tsa[i] + 0.25 * gsa[i]).epsilon(1e-14));

    const double alpha = 1.7;
    auto sb2 = make_tensor<D>(base.shape);
    auto st = make_tensor<D>(base.shape);
    auto sg = make_tensor<D>(base.shape);
    for (int64_t i = 0; i < base.size(); ++i) {
        sb2[i] = alpha * base[i];
        st[i] = alpha * tsa[i];
        sg[i] = alpha * gsa[i];
    }
    auto scaled = g.saa_fuse(sb2, st, sg, half, quarter);
    for (int64_t i = 0; i < base.size(); ++i)
        CHECK(scaled[i] == doctest::Approx(alpha * mixed[i]).epsilon(1e-12));
}

TEST_CASE("saa block starts bit-equal to base features") {
    Rng rng(37);
    SaaT<D> saa;
    saa.init("saa", 2, 4, 8, rng);
    auto x = random_tensor<D>({1, 4, 3, 3}, 38, 0.0, 2.0);  // post-relu-like features
    GraphT<D> g(0, false, false);
    auto y = saa.forward(g, x);
    for (int64_t i = 0; i < x.size(); ++i) CHECK(std::memcmp(&y[i], &x[i], sizeof(D)) == 0);
}

TEST_CASE("mhsa: single head with shared projections reduces to tsa") {
    Rng rng(41);
    const int64_t t = 4;
    TsaT<D> tsa;
    tsa.init("tsa", t, t, rng);  // dk = t so shapes line up with square mhsa weights
    MhsaT<D> mhsa;
    Rng rng2(42);
    mhsa.init("mhsa", t, 1, rng2);
    *mhsa.wq.value.data = *tsa.wq.value.data;
    *mhsa.bq.value.data = *tsa.bq.value.data;
    *mhsa.wk.value.data = *tsa.wk.value.data;
    *mhsa.bk.value.data = *tsa.bk.value.data;
    *mhsa.wv.value.data = *tsa.wv.value.data;
    *mhsa.bv.value.data = *tsa.bv.value.data;
    mhsa.set_identity_out_proj();
    std::fill(mhsa.bo.value.data->begin(), mhsa.bo.value.data->end(), 0.0);

    auto x = random_tensor<D>({2, t, 3, 2}, 43);
    GraphT<D> g(0, false, false);
    auto a = tsa.forward(g, x);
    auto b = mhsa.forward(g, x);
    for (int64_t i = 0; i < a.size(); ++i) CHECK(b[i] == doctest::Approx(a[i]).epsilon(1e-12));
}

TEST_CASE("mhsa: per-head attention rows sum to one; gradient check") {
    Rng rng(47);
    MhsaT<D> mhsa;
    mhsa.init("mhsa", 8, 4, rng);
    auto x = random_tensor<D>({2, 8, 2, 3}, 48);
    GraphT<D> g(0, false, false);
    AttnTrace<D> trace;
    mhsa.forward(g, x, &trace);
    REQUIRE(trace.maps.size() == 1);
    REQUIRE(trace.maps[0].shape == Shape{2 * 4, 6, 6});
    for (int64_t r = 0; r < 8 * 6; ++r) {
        double s = 0;
        for (int64_t c = 0; c < 6; ++c) s += trace.maps[0][r * 6 + c];
        CHECK(std::abs(s - 1.0) < 1e-6);
    }

    ParamRefs<D> params;
    mhsa.collect(params);
    auto f = [&](GraphT<D>& gg, const TensorT<D>& in) {
        auto img = gg.reshape(in, {1, 8, 2, 2});
        auto y = mhsa.forward(gg, img);
        return gg.sum_all(gg.mul(y, y));
    };
    for (int s = 0; s < 3; ++s)
        CHECK(param_grad_check<D>(f, params, random_tensor<D>({32}, uint64_t(300 + s))) < 1e-4);
}

TEST_CASE("mhsa rejects embeddings not divisible by the head count") {
    Rng rng(49);
    MhsaT<D> mhsa;
    mhsa.init("mhsa", 6, 4, rng);
    GraphT<D> g;
    CHECK_THROWS_AS(mhsa.forward(g, make_tensor<D>({1, 6, 2, 2})), DimensionError);
}

TEST_CASE("mhca: degenerate self case equals mhsa; channel contract; gradient") {
    Rng rng(53);
    const int64_t c = 4;
    MhcaT<D> mhca;
    mhca.init("mhca", c, c, 2, 1024, rng);
    mhca.set_identity_projections();
    for (auto* b : {&mhca.bq, &mhca.bk, &mhca.bv, &mhca.bo})
        std::fill(b->value.data->begin(), b->value.data->end(), 0.0);

    MhsaT<D> mhsa;
    Rng rng2(54);
    mhsa.init("mhsa", c, 2, rng2);
    for (auto* p : {&mhsa.wq, &mhsa.wk, &mhsa.wv}) {
        std::fill(p->value.data->begin(), p->value.data->end(), 0.0);
        for (int64_t i = 0; i < c; ++i) (*p->value.data)[size_t(i * c + i)] = 1.0;
    }
    mhsa.set_identity_out_proj();
    for (auto* b : {&mhsa.bq, &mhsa.bk, &mhsa.bv, &mhsa.bo})
        std::fill(b->value.data->begin(), b->value.data->end(), 0.0);

    auto x = random_tensor<D>({1, c, 3, 3}, 55);
    GraphT<D> g(0, false, false);
    auto self_att = mhsa.forward(g, x);
    auto cross = mhca.forward(g, x, x);
    REQUIRE(cross.shape == Shape{1, 2 * c, 3, 3});
    for (int64_t i = 0; i < self_att.size(); ++i)
        CHECK(cross[i] == doctest::Approx(self_att[i]).epsilon(1e-12));  // attended half
    for (int64_t i = 0; i < x.size(); ++i) CHECK(cross[self_att.size() + i] == x[i]);

    // distinct channel counts: output = skip channels + decoder channels
    MhcaT<D> wide;
    Rng rng3(56);
    wide.init("wide", 6, 4, 2, 1024, rng3);
    auto skip = random_tensor<D>({1, 6, 4, 4}, 57);
    auto dec = random_tensor<D>({1, 4, 2, 2}, 58);
    auto out = wide.forward(g, skip, dec);
    CHECK(out.shape == Shape{1, 10, 4, 4});

    ParamRefs<D> params;
    wide.collect(params);
    auto dec_fixed = random_tensor<D>({1, 4, 1, 1}, 909);
    auto f = [&](GraphT<D>& gg, const TensorT<D>& in) {
        auto img = gg.reshape(in, {1, 6, 2, 2});
        auto y = wide.forward(gg, img, gg.constant(dec_fixed));
        return gg.sum_all(gg.mul(y, y));
    };
    for (int s = 0; s < 3; ++s)
        CHECK(param_grad_check<D>(f, params, random_tensor<D>({24}, uint64_t(400 + s))) < 1e-4);
}

TEST_CASE("mhca bounds the attention grid above max_positions") {
    Rng rng(59);
    MhcaT<D> mhca;
    mhca.init("mhca", 2, 2, 1, 16, rng);  // force pooling for an 8x8 input
    auto skip = random_tensor<D>({1, 2, 8, 8}, 60);
    auto dec = random_tensor<D>({1, 2, 4, 4}, 61);
    GraphT<D> g(0, false, false);
    AttnTrace<D> trace;
    auto y = mhca.forward(g, skip, dec, &trace);
    CHECK(y.shape == Shape{1, 4, 8, 8});
    REQUIRE(trace.maps.size() == 1);
    CHECK(trace.maps[0].shape == Shape{1, 16, 16});  // pooled to 4x4 = 16 positions
}

TEST_CASE("transformer layer preserves shape and differentiates") {
    Rng rng(61);
    TransformerLayerT<D> layer;
    layer.init("xf", 4, 2, rng);
    auto x = random_tensor<D>({2, 4, 2, 3}, 62);
    GraphT<D> g(0, false, false);
    CHECK(layer.forward(g, x).shape == x.shape);

    ParamRefs<D> params;
    layer.collect(params);
    auto f = [&](GraphT<D>& gg, const TensorT<D>& in) {
        auto img = gg.reshape(in, {1, 4, 2, 2});
        auto y = layer.forward(gg, img);
        return gg.sum_all(gg.mul(y, y));
    };
    CHECK(param_grad_check<D>(f, params, random_tensor<D>({16}, 500)) < 1e-4);
}

TEST_CASE("blocks preserve batch extent over random shapes") {
    Rng shapes(71);
    for (int trial = 0; trial < 10; ++trial) {
        const int64_t B = 1 + shapes.below(3);
        const int64_t C = 1 + shapes.below(4);
        const int64_t H = 2 + shapes.below(5);
        const int64_t W = 2 + shapes.below(5);
        Rng rng(uint64_t(80 + trial));
        ConvBlockT<D> blk;
        blk.init("b", 2, C, C + 1, true, rng);
        GraphT<D> g(0, true, false);
        auto y = blk.forward(g, random_tensor<D>({B, C, H, W}, uint64_t(90 + trial)));
        CHECK(y.shape == Shape{B, C + 1, H, W});

        GsaT<D> gsa;
        gsa.init("g", 2, C, 1, rng);
        auto ya = gsa.forward(g, random_tensor<D>({B, C, H, W}, uint64_t(95 + trial)));
        CHECK(ya.shape == Shape{B, C, H, W});
    }
}
