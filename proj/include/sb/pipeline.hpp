#ifndef SB_PIPELINE_HPP
#define SB_PIPELINE_HPP

#include <optional>

#include "sb/volume.hpp"

namespace sb {

// ---------------------------------------------------------------------------
// Preprocessing, slicing, splitting and the synthetic phantom generator.
// ---------------------------------------------------------------------------

/// (x - mean) / std over all voxels (population std). A constant volume maps
/// to all zeros; `constant_flag`, when given, is set in that case.
Volume zscore_normalize(const Volume& v, bool* constant_flag = nullptr);

struct Grid2D {
    int64_t rows = 0, cols = 0;
    std::vector<double> v;
};

/// Crop rows [10,190) x cols [40,220) (zero-padding smaller inputs first),
/// then bilinear resize to 192x192 (align-corners=false).
Grid2D crop_resize_image(const Grid2D& slice);
/// Same geometry with nearest-neighbour sampling so masks stay binary.
std::vector<uint8_t> crop_resize_mask(int64_t rows, int64_t cols, const std::vector<uint8_t>& mask);

constexpr int64_t kCropRow0 = 10, kCropRow1 = 190;
constexpr int64_t kCropCol0 = 40, kCropCol1 = 220;
constexpr int64_t kSliceSize = 192;

struct SliceSample {
    std::string subject_id;
    int64_t slice_index = 0;
    int64_t rows = 0, cols = 0;
    std::vector<double> image;
    std::vector<uint8_t> mask;
    double lesion_fraction = 0;
};

enum class Purpose { train, val, test };

/// One sample per axial plane, then filtered: train/val keep slices with
/// lesion_fraction >= threshold (default 0.1%), test keeps any lesioned slice.
std::vector<SliceSample> slice_axial(const Volume& v, Purpose purpose, double threshold = 0.001);

struct SplitManifest {
    uint64_t seed = 0;
    std::array<int, 3> ratio{60, 20, 20};
    std::vector<std::string> train, val, test;

    const std::vector<std::string>& split(Purpose p) const {
        return p == Purpose::train ? train : (p == Purpose::val ? val : test);
    }
    std::string to_json() const;
    static SplitManifest from_json(const std::string& text);
};

/// Deterministic shuffle by seed, then a largest-remainder 60/20/20 partition.
/// Requires at least 5 subjects.
SplitManifest split_subjects(std::vector<std::string> ids, uint64_t seed);

/// Trilinear resampling of intensities (nearest for the mask); spacing is
/// rescaled so physical size is preserved.
Volume resample_3d(const Volume& v, const std::array<int64_t, 3>& target);

struct PhantomConfig {
    uint64_t seed = 0;
    std::array<int64_t, 3> extents{24, 197, 233};  // (slices, rows, cols)
    std::array<double, 3> spacing{1, 1, 1};
    int min_lesions = 1, max_lesions = 3;
    double min_radius_mm = 4.0, max_radius_mm = 18.0;
    double noise = 0.03;
    double lesion_contrast = 0.45;
};

/// Ellipsoidal brain with a smooth intensity profile plus seeded Gaussian
/// noise; 1-3 hypo-intense ellipsoidal lesions strictly inside the brain;
/// mask marks exactly the lesion voxels. Intensities land on the float32
/// lattice so written datasets round-trip bit-exactly. Deterministic per
/// (config, seed); throws NumericError if a lesion cannot be placed.
Volume generate_phantom(const PhantomConfig& cfg);

// -- dataset directory layout: <root>/<subject_id>/{t1.vol, mask.vol} --------

std::vector<std::string> make_subject_ids(int n);
void save_subject(const std::string& root, const Volume& v);
Volume load_subject(const std::string& root, const std::string& subject_id);
void write_manifest(const std::string& path, const SplitManifest& m);
SplitManifest read_manifest(const std::string& path);

}  // namespace sb

#endif  // SB_PIPELINE_HPP
