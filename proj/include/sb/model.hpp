#ifndef SB_MODEL_HPP
#define SB_MODEL_HPP

#include <fstream>
#include <memory>
#include <optional>

#include <json.hpp>

#include "sb/blocks.hpp"

namespace sb {

// ---------------------------------------------------------------------------
// The eight benchmark architectures behind one build/forward interface.
// ---------------------------------------------------------------------------

enum class Variant {
    unet2d,
    resunet2d,
    attnunet2d,
    transattn2d,
    unettransformer2d,
    unet3d,
    resunet3d,
    attnunet3d,
};

inline const char* variant_name(Variant v) {
    switch (v) {
        case Variant::unet2d: return "unet2d";
        case Variant::resunet2d: return "resunet2d";
        case Variant::attnunet2d: return "attnunet2d";
        case Variant::transattn2d: return "transattn2d";
        case Variant::unettransformer2d: return "unettransformer2d";
        case Variant::unet3d: return "unet3d";
        case Variant::resunet3d: return "resunet3d";
        default: return "attnunet3d";
    }
}

inline const std::vector<Variant>& all_variants() {
    static const std::vector<Variant> v{Variant::unet2d,      Variant::resunet2d,
                                        Variant::attnunet2d,  Variant::transattn2d,
                                        Variant::unettransformer2d, Variant::unet3d,
                                        Variant::resunet3d,   Variant::attnunet3d};
    return v;
}

inline std::optional<Variant> variant_from(const std::string& name) {
    for (Variant v : all_variants())
        if (name == variant_name(v)) return v;
    return std::nullopt;
}

inline bool variant_is_3d(Variant v) {
    return v == Variant::unet3d || v == Variant::resunet3d || v == Variant::attnunet3d;
}

struct ModelSpec {
    Variant variant = Variant::unet2d;
    int width_scale = 1;
    double dropout = 0.2;
    bool batch_norm = true;
    int heads = 4;
    int gsa_reduction = 8;        // t' = t / gsa_reduction for GSA/TSA projections
    int64_t attn_max_positions = 1024;

    int rank() const { return variant_is_3d(variant) ? 3 : 2; }

    int levels() const {
        if (variant == Variant::unettransformer2d) return 3;
        return variant_is_3d(variant) ? 3 : 4;
    }

    /// Encoder widths, shallow to base, divided by width_scale (floor, min 1).
    std::vector<int64_t> channels() const {
        std::vector<int64_t> base;
        if (variant_is_3d(variant))
            base = {16, 32, 64, 128};
        else if (variant == Variant::unettransformer2d)
            base = {64, 128, 256, 512};
        else
            base = {64, 128, 256, 512, 1024};
        for (auto& c : base) c = std::max<int64_t>(1, c / width_scale);
        return base;
    }

    /// The benchmark protocol's input extents for this variant.
    std::vector<int64_t> canonical_extents() const {
        if (variant == Variant::attnunet3d) return {144, 176, 128};
        if (variant_is_3d(variant)) return {144, 172, 128};
        return {192, 192};
    }

    void validate() const {
        check_shape(width_scale >= 1, "spec: width_scale must be >= 1");
        check_shape(dropout >= 0.0 && dropout < 1.0, "spec: dropout must be in [0,1)");
        check_shape(heads >= 1, "spec: head count must be >= 1");
        check_shape(gsa_reduction >= 1, "spec: gsa_reduction must be >= 1");
    }

    nlohmann::json to_json() const {
        return nlohmann::json{{"variant", variant_name(variant)},
                              {"width_scale", width_scale},
                              {"dropout", dropout},
                              {"batch_norm", batch_norm},
                              {"heads", heads},
                              {"gsa_reduction", gsa_reduction},
                              {"attn_max_positions", attn_max_positions}};
    }

    static ModelSpec from_json(const nlohmann::json& j) {
        ModelSpec s;
        auto v = variant_from(j.at("variant").get<std::string>());
        if (!v) throw IoError(IoError::Kind::generic, "checkpoint: unknown variant");
        s.variant = *v;
        s.width_scale = j.at("width_scale").get<int>();
        s.dropout = j.at("dropout").get<double>();
        s.batch_norm = j.at("batch_norm").get<bool>();
        s.heads = j.at("heads").get<int>();
        s.gsa_reduction = j.at("gsa_reduction").get<int>();
        s.attn_max_positions = j.at("attn_max_positions").get<int64_t>();
        return s;
    }
};

// The parameter registry holds pointers into block members, so a built model
// stays put on the heap and is neither copyable nor movable.
template <class S>
struct ModelT {
    ModelT() = default;
    ModelT(const ModelT&) = delete;
    ModelT& operator=(const ModelT&) = delete;

    ModelSpec spec;
    uint64_t seed = 0;

    // encoder + base (one of the two vectors is populated)
    std::vector<ConvBlockT<S>> enc_conv;
    std::vector<ResidualBlockT<S>> enc_res;
    // decoder paths
    std::vector<ParamT<S>> up_w, up_b;           // transposed k=2 upsampling
    std::vector<ConvLayerT<S>> up_conv;          // nearest-resize + conv upsampling
    std::vector<AttentionGateT<S>> gates;        // attnunet*
    std::vector<ConvLayerT<S>> fuse1, fuse3;     // transattn decoder
    std::vector<ConvBlockT<S>> dec_conv;
    std::vector<ResidualBlockT<S>> dec_res;
    std::vector<MhcaT<S>> mhca;                  // unettransformer2d
    SaaT<S> saa;                                 // transattn2d
    bool has_saa = false;
    TransformerLayerT<S> base_xf;                // unettransformer2d
    bool has_xf = false;
    ConvLayerT<S> head;

    ParamRefs<S> params;  // stable registration order

    bool residual() const {
        return spec.variant == Variant::resunet2d || spec.variant == Variant::resunet3d;
    }
    bool gated() const {
        return spec.variant == Variant::attnunet2d || spec.variant == Variant::attnunet3d;
    }

    int64_t parameter_count() const {
        int64_t n = 0;
        for (const auto* p : params)
            if (p->learnable) n += p->value.size();
        return n;
    }

    const ParamT<S>* find(const std::string& name) const {
        for (const auto* p : params)
            if (p->name == name) return p;
        return nullptr;
    }

    TensorT<S> forward(GraphT<S>& g, const TensorT<S>& x);
};

// ---------------------------------------------------------------------------
// Builder
// ---------------------------------------------------------------------------

template <class S>
std::unique_ptr<ModelT<S>> build_model(const ModelSpec& spec, uint64_t seed) {
    spec.validate();
    auto model = std::make_unique<ModelT<S>>();
    ModelT<S>& m = *model;
    m.spec = spec;
    m.seed = seed;
    Rng rng(derive_seed(seed, 0x90de1));

    const int rank = spec.rank();
    const int L = spec.levels();
    const auto w = spec.channels();
    const bool norm = spec.batch_norm;

    auto enc_name = [](int i) { return "enc" + std::to_string(i); };
    auto dec_name = [](int i) { return "dec" + std::to_string(i); };

    // encoder + base blocks
    for (int i = 0; i <= L; ++i) {
        const int64_t cin = i == 0 ? 1 : w[size_t(i - 1)];
        if (m.residual()) {
            m.enc_res.emplace_back();
            m.enc_res.back().init(enc_name(i), rank, cin, w[size_t(i)], norm, rng);
        } else {
            m.enc_conv.emplace_back();
            m.enc_conv.back().init(enc_name(i), rank, cin, w[size_t(i)], norm, rng);
        }
    }

    if (spec.variant == Variant::transattn2d) {
        m.has_saa = true;
        m.saa.init("base.saa", rank, w[size_t(L)], spec.gsa_reduction, rng);
    }
    if (spec.variant == Variant::unettransformer2d) {
        m.has_xf = true;
        m.base_xf.init("base.transformer", w[size_t(L)], spec.heads, rng);
    }

    // decoder, deep to shallow
    for (int i = L - 1; i >= 0; --i) {
        const int64_t cs = w[size_t(i)], cd = w[size_t(i + 1)];
        const std::string dn = dec_name(i);
        switch (spec.variant) {
            case Variant::unet2d:
            case Variant::resunet2d:
            case Variant::unet3d:
            case Variant::resunet3d:
            case Variant::unettransformer2d: {
                Shape ws{cd, cs};
                for (int r = 0; r < rank; ++r) ws.push_back(2);
                int64_t fan = cd;
                for (int r = 0; r < rank; ++r) fan *= 2;
                m.up_w.push_back(he_uniform<S>(dn + ".up.w", ws, fan, rng));
                m.up_b.push_back(const_param<S>(dn + ".up.b", {cs}, S(0)));
                break;
            }
            case Variant::attnunet2d:
            case Variant::attnunet3d: {
                m.up_conv.emplace_back();
                m.up_conv.back().init(dn + ".up", rank, cd, cs, 3, norm, true, rng);
                m.gates.emplace_back();
                m.gates.back().init(dn + ".ag", rank, cs, cd, rng);
                break;
            }
            case Variant::transattn2d: {
                m.fuse1.emplace_back();
                m.fuse1.back().init(dn + ".fuse1", rank, cs + cd, cs, 1, norm, true, rng);
                m.fuse3.emplace_back();
                m.fuse3.back().init(dn + ".conv", rank, cs, cs, 3, norm, true, rng);
                break;
            }
        }
        if (spec.variant == Variant::unettransformer2d) {
            m.mhca.emplace_back();
            m.mhca.back().init(dn + ".mhca", cs, cs, spec.heads, spec.attn_max_positions, rng);
        }
        if (spec.variant != Variant::transattn2d) {
            if (m.residual()) {
                m.dec_res.emplace_back();
                m.dec_res.back().init(dn, rank, 2 * cs, cs, norm, rng);
            } else {
                m.dec_conv.emplace_back();
                m.dec_conv.back().init(dn, rank, 2 * cs, cs, norm, rng);
            }
        }
    }

    m.head.init("head", rank, w[0], 1, 1, false, false, rng);

    // registry in creation order
    for (auto& b : m.enc_conv) b.collect(m.params);
    for (auto& b : m.enc_res) b.collect(m.params);
    if (m.has_saa) m.saa.collect(m.params);
    if (m.has_xf) m.base_xf.collect(m.params);
    for (auto& p : m.up_w) m.params.push_back(&p);
    for (auto& p : m.up_b) m.params.push_back(&p);
    for (auto& b : m.up_conv) b.collect(m.params);
    for (auto& b : m.gates) b.collect(m.params);
    for (auto& b : m.fuse1) b.collect(m.params);
    for (auto& b : m.fuse3) b.collect(m.params);
    for (auto& b : m.dec_conv) b.collect(m.params);
    for (auto& b : m.dec_res) b.collect(m.params);
    for (auto& b : m.mhca) b.collect(m.params);
    m.head.collect(m.params);
    return model;
}

// ---------------------------------------------------------------------------
// Forward
// ---------------------------------------------------------------------------

template <class S>
TensorT<S> ModelT<S>::forward(GraphT<S>& g, const TensorT<S>& x) {
    const int rank = spec.rank();
    check_shape(int(x.shape.size()) == rank + 2,
                std::string("forward: expected a (B,1,") + (rank == 2 ? "H,W" : "D,H,W") +
                    ") input for " + variant_name(spec.variant) + ", got " + shape_str(x.shape));
    check_shape(x.shape[1] == 1, "forward: single-channel input required");
    const int L = spec.levels();
    const int64_t min_extent = int64_t(1) << L;
    for (int r = 0; r < rank; ++r)
        check_shape(x.shape[size_t(2 + r)] >= min_extent,
                    "forward: spatial extents too small for " + std::to_string(L) +
                        " pooling levels: " + shape_str(x.shape));

    auto block_fwd = [&](int i, const TensorT<S>& in) {
        return residual() ? enc_res[size_t(i)].forward(g, in) : enc_conv[size_t(i)].forward(g, in);
    };
    auto dec_fwd = [&](int j, const TensorT<S>& in) {
        return residual() ? dec_res[size_t(j)].forward(g, in) : dec_conv[size_t(j)].forward(g, in);
    };
    auto spatial = [](const TensorT<S>& t) {
        return std::vector<int64_t>(t.shape.begin() + 2, t.shape.end());
    };

    std::vector<int64_t> window(size_t(rank), 2);
    std::vector<TensorT<S>> skips;
    TensorT<S> cur = x;
    for (int i = 0; i < L; ++i) {
        auto feat = block_fwd(i, cur);
        if (spec.dropout > 0) feat = g.dropout(feat, spec.dropout, g.rng().next_u64());
        skips.push_back(feat);
        // pad odd extents so 2x pooling halves exactly
        std::vector<int64_t> after(size_t(rank), 0);
        bool needs_pad = false;
        for (int r = 0; r < rank; ++r)
            if (feat.shape[size_t(2 + r)] % 2) {
                after[size_t(r)] = 1;
                needs_pad = true;
            }
        if (needs_pad) feat = g.pad_spatial(feat, std::vector<int64_t>(size_t(rank), 0), after);
        cur = g.max_pool(feat, window, window);
    }

    cur = block_fwd(L, cur);
    if (spec.dropout > 0) cur = g.dropout(cur, spec.dropout, g.rng().next_u64());
    if (has_saa) cur = saa.forward(g, cur);
    if (has_xf) cur = base_xf.forward(g, cur);

    for (int i = L - 1; i >= 0; --i) {
        const int j = L - 1 - i;  // decoder storage index (deep first)
        const auto& skip = skips[size_t(i)];
        const auto target = spatial(skip);
        auto crop_to_skip = [&](TensorT<S> t) {
            if (spatial(t) == target) return t;
            return g.crop_spatial(t, std::vector<int64_t>(size_t(rank), 0), target);
        };

        switch (spec.variant) {
            case Variant::unet2d:
            case Variant::resunet2d:
            case Variant::unet3d:
            case Variant::resunet3d: {
                auto up = g.conv_transpose(cur, up_w[size_t(j)].bind(g), up_b[size_t(j)].bind(g), window);
                up = crop_to_skip(up);
                cur = dec_fwd(j, g.concat({skip, up}, 1));
                break;
            }
            case Variant::attnunet2d:
            case Variant::attnunet3d: {
                auto gated_skip = gates[size_t(j)].forward(g, skip, cur);
                std::vector<int64_t> doubled;
                for (int64_t e : spatial(cur)) doubled.push_back(2 * e);
                auto up = up_conv[size_t(j)].forward(g, g.resize(cur, doubled, ResizeMode::nearest));
                up = crop_to_skip(up);
                cur = dec_fwd(j, g.concat({gated_skip, up}, 1));
                break;
            }
            case Variant::transattn2d: {
                auto up = crop_to_skip(g.resize(cur, target, ResizeMode::linear));
                auto merged = g.concat({skip, up}, 1);
                cur = fuse3[size_t(j)].forward(g, fuse1[size_t(j)].forward(g, merged));
                break;
            }
            case Variant::unettransformer2d: {
                auto up = g.conv_transpose(cur, up_w[size_t(j)].bind(g), up_b[size_t(j)].bind(g), window);
                up = crop_to_skip(up);
                cur = dec_fwd(j, mhca[size_t(j)].forward(g, skip, up));
                break;
            }
        }
    }
    return g.sigmoid(head.forward(g, cur));
}

// ---------------------------------------------------------------------------
// Checkpoints: JSON manifest + named float32 blobs, bit-exact for float models.
// A double-precision model narrows to float32 on save (the on-disk format is
// always float32).
// ---------------------------------------------------------------------------

struct CheckpointExtra {
    nlohmann::json meta;
    std::vector<std::pair<std::string, std::vector<float>>> blobs;
};

namespace detail {

inline void write_u32(std::ofstream& f, uint32_t v) {
    f.write(reinterpret_cast<const char*>(&v), 4);
}
inline uint32_t read_u32(std::ifstream& f) {
    uint32_t v = 0;
    f.read(reinterpret_cast<char*>(&v), 4);
    return v;
}
inline void write_blob(std::ofstream& f, const std::string& name, const std::vector<float>& data) {
    write_u32(f, uint32_t(name.size()));
    f.write(name.data(), std::streamsize(name.size()));
    write_u32(f, uint32_t(data.size()));
    f.write(reinterpret_cast<const char*>(data.data()), std::streamsize(data.size() * 4));
}

}  // namespace detail

template <class S>
void save_checkpoint(const ModelT<S>& m, const std::string& path, const CheckpointExtra* extra = nullptr) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError(IoError::Kind::generic, "cannot write checkpoint " + path);
    nlohmann::json manifest;
    manifest["spec"] = m.spec.to_json();
    manifest["seed"] = m.seed;
    nlohmann::json plist = nlohmann::json::array();
    for (const auto* p : m.params)
        plist.push_back({{"name", p->name}, {"shape", p->value.shape}, {"learnable", p->learnable}});
    manifest["params"] = plist;
    manifest["extra"] = extra ? extra->meta : nlohmann::json::object();
    manifest["extra_blobs"] = nlohmann::json::array();
    if (extra)
        for (const auto& [name, blob] : extra->blobs) manifest["extra_blobs"].push_back(name);

    const std::string mtext = manifest.dump();
    f << "SBCK 1\n";
    detail::write_u32(f, uint32_t(mtext.size()));
    f.write(mtext.data(), std::streamsize(mtext.size()));
    for (const auto* p : m.params) {
        std::vector<float> data(p->value.data->begin(), p->value.data->end());
        detail::write_blob(f, p->name, data);
    }
    if (extra)
        for (const auto& [name, blob] : extra->blobs) detail::write_blob(f, name, blob);
    if (!f) throw IoError(IoError::Kind::generic, "short write to checkpoint " + path);
}

template <class S>
std::unique_ptr<ModelT<S>> load_checkpoint(const std::string& path, CheckpointExtra* extra = nullptr) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError(IoError::Kind::missing, "cannot open checkpoint " + path);
    std::string magic;
    std::getline(f, magic);
    if (magic != "SBCK 1") throw IoError(IoError::Kind::bad_magic, path + ": not a checkpoint");
    const uint32_t mlen = detail::read_u32(f);
    std::string mtext(mlen, '\0');
    f.read(mtext.data(), mlen);
    if (!f) throw IoError(IoError::Kind::truncated, path + ": truncated manifest");
    auto manifest = nlohmann::json::parse(mtext);

    auto model = build_model<S>(ModelSpec::from_json(manifest.at("spec")),
                                manifest.at("seed").get<uint64_t>());
    ModelT<S>& m = *model;
    std::vector<std::string> extra_names =
        manifest.at("extra_blobs").get<std::vector<std::string>>();
    if (extra) extra->meta = manifest.at("extra");

    const size_t total = m.params.size() + extra_names.size();
    for (size_t i = 0; i < total; ++i) {
        const uint32_t nlen = detail::read_u32(f);
        std::string name(nlen, '\0');
        f.read(name.data(), nlen);
        const uint32_t count = detail::read_u32(f);
        std::vector<float> data(count);
        f.read(reinterpret_cast<char*>(data.data()), std::streamsize(size_t(count) * 4));
        if (!f) throw IoError(IoError::Kind::truncated, path + ": truncated blob " + name);
        if (i < m.params.size()) {
            auto* p = m.params[i];
            if (p->name != name)
                throw IoError(IoError::Kind::generic, path + ": parameter order mismatch at " + name);
            check_shape(int64_t(count) == p->value.size(), "checkpoint: blob size mismatch " + name);
            for (uint32_t k = 0; k < count; ++k) (*p->value.data)[k] = S(data[k]);
        } else if (extra) {
            extra->blobs.emplace_back(name, std::move(data));
        }
    }
    return model;
}

}  // namespace sb

#endif  // SB_MODEL_HPP
