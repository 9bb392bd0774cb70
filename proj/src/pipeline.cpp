#include "sb/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include <json.hpp>

#include "kernels.hpp"

namespace fs = std::filesystem;

namespace sb {

Volume zscore_normalize(const Volume& v, bool* constant_flag) {
    check_shape(!v.intensity.empty(), "zscore: empty volume");
    double mean = 0;
    for (double x : v.intensity) mean += x;
    mean /= double(v.intensity.size());
    double var = 0;
    for (double x : v.intensity) var += (x - mean) * (x - mean);
    var /= double(v.intensity.size());

    Volume out = v;
    if (constant_flag) *constant_flag = false;
    if (var == 0.0) {
        if (constant_flag) *constant_flag = true;
        std::fill(out.intensity.begin(), out.intensity.end(), 0.0);
        return out;
    }
    const double inv = 1.0 / std::sqrt(var);
    for (auto& x : out.intensity) x = (x - mean) * inv;
    return out;
}

// ---------------------------------------------------------------------------
// Crop + resize
// ---------------------------------------------------------------------------

namespace {

Grid2D pad_to(const Grid2D& g, int64_t rows, int64_t cols) {
    if (g.rows >= rows && g.cols >= cols) return g;
    Grid2D out;
    out.rows = std::max(g.rows, rows);
    out.cols = std::max(g.cols, cols);
    out.v.assign(size_t(out.rows * out.cols), 0.0);
    for (int64_t r = 0; r < g.rows; ++r)
        for (int64_t c = 0; c < g.cols; ++c) out.v[size_t(r * out.cols + c)] = g.v[size_t(r * g.cols + c)];
    return out;
}

struct Tap {
    int64_t i0, i1;
    double w1;
};

Tap linear_tap(int64_t o, int64_t in, int64_t out) {
    double s = (double(o) + 0.5) * double(in) / double(out) - 0.5;
    if (s < 0) s = 0;
    if (s > double(in - 1)) s = double(in - 1);
    Tap t;
    t.i0 = int64_t(s);
    if (t.i0 > in - 1) t.i0 = in - 1;
    t.i1 = std::min(t.i0 + 1, in - 1);
    t.w1 = s - double(t.i0);
    return t;
}

int64_t nearest_tap(int64_t o, int64_t in, int64_t out) {
    int64_t i = int64_t(std::floor((double(o) + 0.5) * double(in) / double(out)));
    return std::clamp<int64_t>(i, 0, in - 1);
}

}  // namespace

Grid2D crop_resize_image(const Grid2D& slice) {
    const Grid2D padded = pad_to(slice, kCropRow1, kCropCol1);
    const int64_t ch = kCropRow1 - kCropRow0, cw = kCropCol1 - kCropCol0;
    Grid2D out;
    out.rows = out.cols = kSliceSize;
    out.v.resize(size_t(kSliceSize * kSliceSize));
    for (int64_t oy = 0; oy < kSliceSize; ++oy) {
        const Tap ty = linear_tap(oy, ch, kSliceSize);
        for (int64_t ox = 0; ox < kSliceSize; ++ox) {
            const Tap tx = linear_tap(ox, cw, kSliceSize);
            auto src = [&](int64_t y, int64_t x) {
                return padded.v[size_t((y + kCropRow0) * padded.cols + (x + kCropCol0))];
            };
            out.v[size_t(oy * kSliceSize + ox)] =
                (1 - ty.w1) * ((1 - tx.w1) * src(ty.i0, tx.i0) + tx.w1 * src(ty.i0, tx.i1)) +
                ty.w1 * ((1 - tx.w1) * src(ty.i1, tx.i0) + tx.w1 * src(ty.i1, tx.i1));
        }
    }
    return out;
}

std::vector<uint8_t> crop_resize_mask(int64_t rows, int64_t cols, const std::vector<uint8_t>& mask) {
    check_shape(int64_t(mask.size()) == rows * cols, "crop_resize_mask: size mismatch");
    auto src = [&](int64_t y, int64_t x) -> uint8_t {
        return (y < rows && x < cols) ? mask[size_t(y * cols + x)] : 0;  // implicit zero padding
    };
    const int64_t ch = kCropRow1 - kCropRow0, cw = kCropCol1 - kCropCol0;
    std::vector<uint8_t> out(size_t(kSliceSize * kSliceSize));
    for (int64_t oy = 0; oy < kSliceSize; ++oy) {
        const int64_t sy = nearest_tap(oy, ch, kSliceSize) + kCropRow0;
        for (int64_t ox = 0; ox < kSliceSize; ++ox) {
            const int64_t sx = nearest_tap(ox, cw, kSliceSize) + kCropCol0;
            out[size_t(oy * kSliceSize + ox)] = src(sy, sx);
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Axial slicing with the lesion-fraction rejection rule
// ---------------------------------------------------------------------------

std::vector<SliceSample> slice_axial(const Volume& v, Purpose purpose, double threshold) {
    check_shape(v.has_mask(), "slice_axial: volume has no mask");
    std::vector<SliceSample> out;
    const int64_t plane = v.plane();
    for (int64_t z = 0; z < v.extents[0]; ++z) {
        SliceSample s;
        s.subject_id = v.subject_id;
        s.slice_index = z;
        s.rows = v.extents[1];
        s.cols = v.extents[2];
        s.image.assign(v.intensity.begin() + z * plane, v.intensity.begin() + (z + 1) * plane);
        s.mask.assign(v.mask.begin() + z * plane, v.mask.begin() + (z + 1) * plane);
        int64_t ones = 0;
        for (uint8_t m : s.mask) ones += m;
        s.lesion_fraction = double(ones) / double(plane);
        const bool keep = purpose == Purpose::test ? s.lesion_fraction > 0.0
                                                   : s.lesion_fraction >= threshold;
        if (keep) out.push_back(std::move(s));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Subject split
// ---------------------------------------------------------------------------

SplitManifest split_subjects(std::vector<std::string> ids, uint64_t seed) {
    if (ids.size() < 5) throw UsageError("split_subjects: need at least 5 subjects");
    Rng rng(derive_seed(seed, 0x5117));
    rng.shuffle(ids);

    SplitManifest m;
    m.seed = seed;
    const int n = int(ids.size());
    const int ratios[3] = {60, 20, 20};
    int counts[3];
    int assigned = 0;
    double fracs[3];
    for (int i = 0; i < 3; ++i) {
        const double exact = double(ratios[i]) * n / 100.0;
        counts[i] = int(exact);
        fracs[i] = exact - counts[i];
        assigned += counts[i];
    }
    while (assigned < n) {  // largest remainder, ties to the earlier split
        int best = 0;
        for (int i = 1; i < 3; ++i)
            if (fracs[i] > fracs[best]) best = i;
        ++counts[best];
        fracs[best] = -1;
        ++assigned;
    }
    auto it = ids.begin();
    m.train.assign(it, it + counts[0]);
    it += counts[0];
    m.val.assign(it, it + counts[1]);
    it += counts[1];
    m.test.assign(it, ids.end());
    return m;
}

std::string SplitManifest::to_json() const {
    nlohmann::json j;
    j["seed"] = seed;
    j["ratio"] = ratio;
    j["train"] = train;
    j["validation"] = val;
    j["test"] = test;
    return j.dump(2) + "\n";
}

SplitManifest SplitManifest::from_json(const std::string& text) {
    SplitManifest m;
    auto j = nlohmann::json::parse(text);
    m.seed = j.at("seed").get<uint64_t>();
    auto r = j.at("ratio");
    for (int i = 0; i < 3; ++i) m.ratio[size_t(i)] = r.at(size_t(i)).get<int>();
    m.train = j.at("train").get<std::vector<std::string>>();
    m.val = j.at("validation").get<std::vector<std::string>>();
    m.test = j.at("test").get<std::vector<std::string>>();
    return m;
}

// ---------------------------------------------------------------------------
// Resampling
// ---------------------------------------------------------------------------

Volume resample_3d(const Volume& v, const std::array<int64_t, 3>& target) {
    for (int64_t t : target) check_shape(t > 0, "resample_3d: target extents must be positive");
    Volume out;
    out.subject_id = v.subject_id;
    out.extents = target;
    for (int i = 0; i < 3; ++i)
        out.spacing[size_t(i)] = v.spacing[size_t(i)] * double(v.extents[size_t(i)]) / double(target[size_t(i)]);
    out.intensity.resize(size_t(out.voxels()));
    kernels::resize_linear_fwd<double>(3, 1, v.extents.data(), target.data(), v.intensity.data(),
                                       out.intensity.data());
    if (v.has_mask()) {
        std::vector<double> m(v.mask.begin(), v.mask.end());
        std::vector<double> mo(size_t(out.voxels()));
        kernels::resize_nearest_fwd<double>(3, 1, v.extents.data(), target.data(), m.data(), mo.data());
        out.mask.resize(mo.size());
        for (size_t i = 0; i < mo.size(); ++i) out.mask[i] = uint8_t(mo[i]);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Phantom generator
// ---------------------------------------------------------------------------

Volume generate_phantom(const PhantomConfig& cfg) {
    check_shape(cfg.min_lesions >= 1 && cfg.max_lesions >= cfg.min_lesions, "phantom: bad lesion counts");
    check_shape(cfg.min_radius_mm > 0 && cfg.max_radius_mm >= cfg.min_radius_mm, "phantom: bad radii");
    Rng rng(derive_seed(cfg.seed, 0xbadd));

    Volume v;
    v.extents = cfg.extents;
    v.spacing = cfg.spacing;
    v.intensity.assign(size_t(v.voxels()), 0.0);
    v.mask.assign(size_t(v.voxels()), 0);

    double center[3], semi[3];
    for (int a = 0; a < 3; ++a) {
        center[a] = double(cfg.extents[size_t(a)] - 1) / 2.0;
        semi[a] = 0.45 * double(cfg.extents[size_t(a)]);
    }

    struct Lesion {
        double c[3], r[3];  // center (voxels), per-axis radii (voxels)
    };
    // Centers are drawn inside the normalized ball where the smallest lesion
    // still fits; per-axis radii are then capped by the remaining budget, so
    // lesions are ellipsoids held strictly inside the brain.
    double min_semi_mm = 1e300;
    for (int a = 0; a < 3; ++a) min_semi_mm = std::min(min_semi_mm, cfg.spacing[size_t(a)] * semi[a]);
    const double rho_cap = std::min(0.7, 0.95 - cfg.min_radius_mm / min_semi_mm);

    std::vector<Lesion> lesions;
    const int count = cfg.min_lesions + int(rng.below(cfg.max_lesions - cfg.min_lesions + 1));
    for (int li = 0; li < count; ++li) {
        bool placed = false;
        for (int attempt = 0; attempt < 100 && !placed; ++attempt) {
            if (rho_cap <= 0) break;
            Lesion L;
            double rho2 = 0;
            for (int a = 0; a < 3; ++a) {
                const double u = rng.uniform(-rho_cap, rho_cap);
                L.c[a] = center[a] + u * semi[a];
                rho2 += u * u;
            }
            if (rho2 > rho_cap * rho_cap) continue;  // keep the center inside the ball
            const double budget = 0.95 - std::sqrt(rho2);
            for (int a = 0; a < 3; ++a) {
                const double cap_mm = budget * cfg.spacing[size_t(a)] * semi[a];
                const double r_mm = rng.uniform(cfg.min_radius_mm, std::min(cfg.max_radius_mm, cap_mm));
                L.r[a] = r_mm / cfg.spacing[size_t(a)];
            }
            lesions.push_back(L);
            placed = true;
        }
        if (!placed)
            throw NumericError("phantom: infeasible lesion placement (radius too large for the brain)");
    }

    const int64_t Z = cfg.extents[0], R = cfg.extents[1], C = cfg.extents[2];
    int64_t idx = 0;
    for (int64_t z = 0; z < Z; ++z)
        for (int64_t r = 0; r < R; ++r)
            for (int64_t c = 0; c < C; ++c, ++idx) {
                const double dz = (double(z) - center[0]) / semi[0];
                const double dr = (double(r) - center[1]) / semi[1];
                const double dc = (double(c) - center[2]) / semi[2];
                const double rho2 = dz * dz + dr * dr + dc * dc;
                if (rho2 > 1.0) continue;  // outside the brain: exact zero
                double val = 1.0 - 0.45 * rho2;
                for (const auto& L : lesions) {
                    const double lz = (double(z) - L.c[0]) / L.r[0];
                    const double lr = (double(r) - L.c[1]) / L.r[1];
                    const double lc = (double(c) - L.c[2]) / L.r[2];
                    if (lz * lz + lr * lr + lc * lc <= 1.0) {
                        val *= 1.0 - cfg.lesion_contrast;
                        v.mask[size_t(idx)] = 1;
                        break;
                    }
                }
                val += cfg.noise * rng.normal();
                v.intensity[size_t(idx)] = double(float(val));  // float32 lattice
            }
    return v;
}

// ---------------------------------------------------------------------------
// Dataset layout
// ---------------------------------------------------------------------------

std::vector<std::string> make_subject_ids(int n) {
    std::vector<std::string> ids;
    char buf[32];
    for (int i = 1; i <= n; ++i) {
        std::snprintf(buf, sizeof buf, "sub-%04d", i);
        ids.emplace_back(buf);
    }
    return ids;
}

void save_subject(const std::string& root, const Volume& v) {
    check_shape(!v.subject_id.empty(), "save_subject: empty subject id");
    const fs::path dir = fs::path(root) / v.subject_id;
    fs::create_directories(dir);
    write_volume(v, (dir / "t1.vol").string(), VolDType::float32);
    write_mask(v, (dir / "mask.vol").string());
}

Volume load_subject(const std::string& root, const std::string& subject_id) {
    const fs::path dir = fs::path(root) / subject_id;
    Volume v = read_volume((dir / "t1.vol").string());
    v.subject_id = subject_id;
    v.mask = read_mask((dir / "mask.vol").string(), v.extents);
    return v;
}

void write_manifest(const std::string& path, const SplitManifest& m) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError(IoError::Kind::generic, "cannot write " + path);
    f << m.to_json();
}

SplitManifest read_manifest(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError(IoError::Kind::missing, "cannot open manifest " + path);
    std::string text((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    return SplitManifest::from_json(text);
}

}  // namespace sb
