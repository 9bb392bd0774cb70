#ifndef SB_VOLUME_HPP
#define SB_VOLUME_HPP

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "sb/common.hpp"

namespace sb {

/// A 3D scalar grid stored as a stack of axial planes: extents are
/// {slices (z), rows, cols}, flat row-major. Intensities are carried as
/// float64 in memory regardless of the on-disk dtype.
struct Volume {
    std::string subject_id;
    std::array<int64_t, 3> extents{0, 0, 0};
    std::array<double, 3> spacing{1, 1, 1};  // mm, same axis order
    std::vector<double> intensity;
    std::vector<uint8_t> mask;  // empty, or one value per voxel

    int64_t voxels() const { return extents[0] * extents[1] * extents[2]; }
    bool has_mask() const { return !mask.empty(); }
    int64_t plane() const { return extents[1] * extents[2]; }

    double& at(int64_t z, int64_t r, int64_t c) {
        return intensity[size_t((z * extents[1] + r) * extents[2] + c)];
    }
    double at(int64_t z, int64_t r, int64_t c) const {
        return intensity[size_t((z * extents[1] + r) * extents[2] + c)];
    }
};

enum class VolDType { uint8, float32, float64 };

/// Reads a single-grid file. ".nii" files go through the minimal NIfTI-1
/// reader (magic "n+1", dtypes uint8/int16/float32, single-file, uncompressed,
/// little-endian); anything else is parsed as the native format. A uint8
/// native grid is loaded into both intensity (as 0/1 reals) and mask.
Volume read_volume(const std::string& path);

/// Writes the intensity grid in the native format:
///   "svol 1\nextents: z r c\nspacing: a b c\ndtype: <dtype>\ndata:\n" + LE blob.
/// float64 round-trips any volume bit-exactly; float32/uint8 require the
/// values to be representable.
void write_volume(const Volume& v, const std::string& path, VolDType dtype = VolDType::float32);

/// Mask helpers over the same container (uint8 native grid).
void write_mask(const Volume& v, const std::string& path);
std::vector<uint8_t> read_mask(const std::string& path, const std::array<int64_t, 3>& expect_extents);

}  // namespace sb

#endif  // SB_VOLUME_HPP
