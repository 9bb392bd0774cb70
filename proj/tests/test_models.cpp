#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "sb/model.hpp"
#include "test_support.hpp"

using namespace sb;
using sbt::random_tensor;

namespace {

ModelSpec spec_of(Variant v, int ws = 1) {
    ModelSpec s;
    s.variant = v;
    s.width_scale = ws;
    return s;
}

}  // namespace

TEST_CASE("parameter counts match the published sizes within 10 percent") {
    const struct {
        Variant v;
        double target;
    } cases[] = {
        {Variant::unet2d, 31e6},  {Variant::resunet2d, 32e6}, {Variant::attnunet2d, 34e6},
        {Variant::transattn2d, 25e6}, {Variant::unettransformer2d, 11e6},
        {Variant::unet3d, 1.40e6},    {Variant::resunet3d, 1.42e6},
        {Variant::attnunet3d, 1.61e6},
    };
    for (const auto& c : cases) {
        auto m = build_model<float>(spec_of(c.v), 1);
        const double count = double(m->parameter_count());
        INFO(variant_name(c.v) << ": " << count << " vs target " << c.target);
        CHECK(count >= 0.9 * c.target);
        CHECK(count <= 1.1 * c.target);
    }
}

TEST_CASE("width_scale=2 shrinks conv parameters roughly 4x") {
    const double full = double(build_model<float>(spec_of(Variant::unet2d, 1), 1)->parameter_count());
    const double half = double(build_model<float>(spec_of(Variant::unet2d, 2), 1)->parameter_count());
    const double ratio = full / half;
    CHECK(ratio > 4.0 * 0.85);
    CHECK(ratio < 4.0 * 1.15);
}

TEST_CASE("same seed rebuilds bit-identical parameter stores") {
    auto a = build_model<float>(spec_of(Variant::transattn2d, 8), 42);
    auto b = build_model<float>(spec_of(Variant::transattn2d, 8), 42);
    REQUIRE(a->params.size() == b->params.size());
    for (size_t i = 0; i < a->params.size(); ++i) {
        CHECK(a->params[i]->name == b->params[i]->name);
        CHECK(*a->params[i]->value.data == *b->params[i]->value.data);
    }
    auto c = build_model<float>(spec_of(Variant::transattn2d, 8), 43);
    CHECK(*a->params[0]->value.data != *c->params[0]->value.data);
}

TEST_CASE("parameter names are unique") {
    for (Variant v : all_variants()) {
        auto m = build_model<float>(spec_of(v, 8), 3);
        std::set<std::string> names;
        for (const auto* p : m->params) CHECK(names.insert(p->name).second);
    }
}

TEST_CASE("2D shape contracts at the protocol extents (all five variants)") {
    for (Variant v : {Variant::unet2d, Variant::resunet2d, Variant::attnunet2d,
                      Variant::transattn2d, Variant::unettransformer2d}) {
        auto m = build_model<float>(spec_of(v, 8), 5);
        GraphT<float> g(7, false, false);
        auto x = random_tensor<float>({2, 1, 192, 192}, 8);
        auto y = m->forward(g, x);
        INFO(variant_name(v));
        REQUIRE(y.shape == Shape{2, 1, 192, 192});
        for (int64_t i = 0; i < y.size(); ++i) {
            CHECK(y[i] > 0.0f);
            CHECK(y[i] < 1.0f);
        }
    }
}

TEST_CASE("3D shape contracts at the protocol extents") {
    for (Variant v : {Variant::unet3d, Variant::resunet3d, Variant::attnunet3d}) {
        auto m = build_model<float>(spec_of(v, 4), 5);
        GraphT<float> g(7, false, false);
        const auto ext = m->spec.canonical_extents();
        Shape in{1, 1};
        for (int64_t e : ext) in.push_back(e);
        auto x = random_tensor<float>(in, 9);
        auto y = m->forward(g, x);
        INFO(variant_name(v));
        REQUIRE(y.shape == in);
        for (int64_t i = 0; i < y.size(); i += 97) {
            CHECK(y[i] > 0.0f);
            CHECK(y[i] < 1.0f);
        }
    }
}

TEST_CASE("odd extents survive the pad/crop plumbing (172 is not divisible by 8)") {
    auto m = build_model<float>(spec_of(Variant::unet3d, 8), 5);
    GraphT<float> g(7, false, false);
    auto x = random_tensor<float>({1, 1, 36, 43, 32}, 10);
    auto y = m->forward(g, x);
    CHECK(y.shape == Shape{1, 1, 36, 43, 32});
}

TEST_CASE("forward input validation") {
    auto m = build_model<float>(spec_of(Variant::unet2d, 8), 5);
    GraphT<float> g;
    CHECK_THROWS_AS(m->forward(g, make_tensor<float>({1, 2, 64, 64})), DimensionError);
    CHECK_THROWS_AS(m->forward(g, make_tensor<float>({1, 1, 8, 64})), DimensionError);   // < 2^4
    CHECK_THROWS_AS(m->forward(g, make_tensor<float>({1, 1, 64, 64, 64})), DimensionError);  // 3D into 2D
}

TEST_CASE("rebuilding from spec+seed reproduces forward outputs bit-exactly") {
    for (Variant v : {Variant::unet2d, Variant::unettransformer2d, Variant::unet3d}) {
        auto a = build_model<float>(spec_of(v, 8), 77);
        auto b = build_model<float>(spec_of(v, 8), 77);
        const bool is3d = variant_is_3d(v);
        auto x = random_tensor<float>(is3d ? Shape{1, 1, 16, 16, 16} : Shape{1, 1, 32, 32}, 11);
        GraphT<float> g1(3, false, false), g2(3, false, false);
        auto y1 = a->forward(g1, x);
        auto y2 = b->forward(g2, x);
        INFO(variant_name(v));
        CHECK(*y1.data == *y2.data);
    }
}

TEST_CASE("every learnable parameter receives a finite gradient at initialization") {
    for (Variant v : all_variants()) {
        const bool is3d = variant_is_3d(v);
        ModelSpec s = spec_of(v, is3d ? 4 : 16);
        s.dropout = 0.0;  // keep every path alive for the liveness check
        auto m = build_model<float>(s, 21);
        GraphT<float> g(5, true, true);
        auto x = random_tensor<float>(is3d ? Shape{1, 1, 16, 16, 16} : Shape{2, 1, 32, 32}, 13);
        auto y = m->forward(g, x);
        auto loss = g.sum_all(g.mul(y, y));
        auto grads = g.backward(loss);
        INFO(variant_name(v));
        int64_t checked = 0;
        for (const auto* p : m->params) {
            if (!p->learnable) continue;
            REQUIRE(p->node >= 0);
            const auto& gp = grads[size_t(p->node)];
            REQUIRE_MESSAGE(!gp.empty(), p->name << " got no gradient");
            for (float gv : gp) REQUIRE_MESSAGE(std::isfinite(gv), p->name << " has non-finite grad");
            ++checked;
        }
        CHECK(checked > 10);
    }
}

TEST_CASE("checkpoints round-trip bit-exactly with extra optimizer blobs") {
    auto dir = sbt::scratch_dir("ckpt");
    auto m = build_model<float>(spec_of(Variant::attnunet2d, 16), 9);
    // scramble so the file is not just the deterministic init
    Rng rng(1);
    for (auto* p : m->params)
        for (auto& v : *p->value.data) v += float(rng.uniform(-0.01, 0.01));

    CheckpointExtra extra;
    extra.meta = {{"epoch", 7}, {"lr", 1e-4}};
    extra.blobs.emplace_back("opt.m", std::vector<float>{1.f, 2.f, 3.f});
    extra.blobs.emplace_back("opt.v", std::vector<float>{4.f, 5.f});
    const auto path = (dir / "m.ckpt").string();
    save_checkpoint(*m, path, &extra);

    CheckpointExtra back;
    auto r = load_checkpoint<float>(path, &back);
    REQUIRE(r->params.size() == m->params.size());
    for (size_t i = 0; i < m->params.size(); ++i)
        CHECK(*r->params[i]->value.data == *m->params[i]->value.data);
    CHECK(back.meta.at("epoch").get<int>() == 7);
    REQUIRE(back.blobs.size() == 2);
    CHECK(back.blobs[0].first == "opt.m");
    CHECK(back.blobs[0].second == std::vector<float>{1.f, 2.f, 3.f});

    // saving the loaded model reproduces identical bytes
    save_checkpoint(*r, (dir / "m2.ckpt").string(), &back);
    std::ifstream fa(dir / "m.ckpt", std::ios::binary), fb(dir / "m2.ckpt", std::ios::binary);
    std::string sa((std::istreambuf_iterator<char>(fa)), std::istreambuf_iterator<char>());
    std::string sb2((std::istreambuf_iterator<char>(fb)), std::istreambuf_iterator<char>());
    CHECK(sa == sb2);

    CHECK_THROWS_AS(load_checkpoint<float>((dir / "nope.ckpt").string()), IoError);
}

TEST_CASE("training mode is stochastic via dropout, eval mode is not") {
    ModelSpec s = spec_of(Variant::unet2d, 16);
    s.dropout = 0.2;
    auto m = build_model<float>(s, 31);
    auto x = random_tensor<float>({1, 1, 32, 32}, 14);
    GraphT<float> t1(100, true, false), t2(200, true, false);
    auto y1 = m->forward(t1, x);
    auto y2 = m->forward(t2, x);
    CHECK(*y1.data != *y2.data);  // different dropout streams

    GraphT<float> e1(100, false, false), e2(200, false, false);
    auto z1 = m->forward(e1, x);
    auto z2 = m->forward(e2, x);
    CHECK(*z1.data == *z2.data);  // dropout inert outside training
}
