#ifndef SB_DATASET_HPP
#define SB_DATASET_HPP

#include "sb/pipeline.hpp"

namespace sb {

/// A training/evaluation sample: one 192x192 slice (2D) or one resampled
/// volume (3D). Images are stored as float32; training casts to the active
/// scalar type at batch assembly.
struct Sample {
    std::string id;
    std::vector<int64_t> extents;  // spatial only
    std::vector<float> image;
    std::vector<uint8_t> mask;
    std::array<double, 3> spacing{1, 1, 1};
};

struct Dataset {
    int rank = 2;
    std::vector<Sample> samples;
    int64_t size() const { return int64_t(samples.size()); }
};

/// 2D pipeline: load -> z-score -> axial slices (rejection rule by purpose)
/// -> crop/resize to 192x192 (bilinear image, nearest mask).
Dataset build_slice_dataset(const std::string& root, const SplitManifest& manifest, Purpose purpose,
                            double rejection_threshold = 0.001);

/// 3D pipeline: load -> z-score -> trilinear resample to `target`.
Dataset build_volume_dataset(const std::string& root, const SplitManifest& manifest, Purpose purpose,
                             const std::array<int64_t, 3>& target);

}  // namespace sb

#endif  // SB_DATASET_HPP
