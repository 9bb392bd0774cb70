#include "sb/volume.hpp"

#include <cstring>
#include <fstream>
#include <sstream>

namespace sb {

namespace {

const char* dtype_name(VolDType d) {
    switch (d) {
        case VolDType::uint8: return "uint8";
        case VolDType::float32: return "float32";
        default: return "float64";
    }
}

VolDType dtype_from(const std::string& s) {
    if (s == "uint8") return VolDType::uint8;
    if (s == "float32") return VolDType::float32;
    if (s == "float64") return VolDType::float64;
    throw IoError(IoError::Kind::unsupported_dtype, "native volume: unsupported dtype '" + s + "'");
}

template <class T>
T read_le(const unsigned char* p) {
    T v;
    std::memcpy(&v, p, sizeof(T));
    return v;  // host is little-endian on all supported targets
}

Volume read_native(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError(IoError::Kind::missing, "cannot open " + path);
    std::string magic_line;
    std::getline(f, magic_line);
    if (magic_line != "svol 1")
        throw IoError(IoError::Kind::bad_magic, path + ": not a native volume (bad magic)");
    Volume v;
    VolDType dtype = VolDType::float32;
    std::string line;
    while (std::getline(f, line)) {
        if (line == "data:") break;
        std::istringstream ls(line);
        std::string key;
        ls >> key;
        if (key == "extents:")
            ls >> v.extents[0] >> v.extents[1] >> v.extents[2];
        else if (key == "spacing:")
            ls >> v.spacing[0] >> v.spacing[1] >> v.spacing[2];
        else if (key == "dtype:") {
            std::string d;
            ls >> d;
            dtype = dtype_from(d);
        } else {
            throw IoError(IoError::Kind::generic, path + ": unknown header field '" + key + "'");
        }
        if (!ls) throw IoError(IoError::Kind::generic, path + ": malformed header line");
    }
    if (v.extents[0] <= 0 || v.extents[1] <= 0 || v.extents[2] <= 0)
        throw IoError(IoError::Kind::generic, path + ": missing or bad extents");
    const int64_t n = v.voxels();
    const size_t elem = dtype == VolDType::uint8 ? 1 : (dtype == VolDType::float32 ? 4 : 8);
    std::vector<unsigned char> raw(size_t(n) * elem);
    f.read(reinterpret_cast<char*>(raw.data()), std::streamsize(raw.size()));
    if (size_t(f.gcount()) != raw.size())
        throw IoError(IoError::Kind::truncated, path + ": truncated payload");
    v.intensity.resize(size_t(n));
    if (dtype == VolDType::uint8) {
        v.mask.resize(size_t(n));
        for (int64_t i = 0; i < n; ++i) {
            v.mask[size_t(i)] = raw[size_t(i)];
            v.intensity[size_t(i)] = double(raw[size_t(i)]);
        }
    } else if (dtype == VolDType::float32) {
        for (int64_t i = 0; i < n; ++i)
            v.intensity[size_t(i)] = double(read_le<float>(raw.data() + size_t(i) * 4));
    } else {
        for (int64_t i = 0; i < n; ++i)
            v.intensity[size_t(i)] = read_le<double>(raw.data() + size_t(i) * 8);
    }
    return v;
}

Volume read_nifti(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError(IoError::Kind::missing, "cannot open " + path);
    std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(f)),
                                     std::istreambuf_iterator<char>());
    if (bytes.size() < 348) throw IoError(IoError::Kind::truncated, path + ": header shorter than 348 bytes");
    if (std::memcmp(bytes.data() + 344, "n+1", 3) != 0)
        throw IoError(IoError::Kind::bad_magic, path + ": bad NIfTI magic (only single-file n+1 supported)");

    const int16_t ndim = read_le<int16_t>(bytes.data() + 40);
    if (ndim < 1 || ndim > 7)
        throw IoError(IoError::Kind::generic, path + ": implausible dim[0] (big-endian files unsupported)");
    const int64_t nx = read_le<int16_t>(bytes.data() + 42);
    const int64_t ny = ndim >= 2 ? read_le<int16_t>(bytes.data() + 44) : 1;
    const int64_t nz = ndim >= 3 ? read_le<int16_t>(bytes.data() + 46) : 1;
    const int16_t datatype = read_le<int16_t>(bytes.data() + 70);
    const float px = read_le<float>(bytes.data() + 80);  // pixdim[1..3]
    const float py = read_le<float>(bytes.data() + 84);
    const float pz = read_le<float>(bytes.data() + 88);
    const float vox_offset = read_le<float>(bytes.data() + 108);
    const float scl_slope = read_le<float>(bytes.data() + 112);
    const float scl_inter = read_le<float>(bytes.data() + 116);

    size_t elem;
    switch (datatype) {
        case 2: elem = 1; break;   // uint8
        case 4: elem = 2; break;   // int16
        case 16: elem = 4; break;  // float32
        default:
            throw IoError(IoError::Kind::unsupported_dtype,
                          path + ": unsupported NIfTI datatype " + std::to_string(datatype));
    }
    const size_t offset = size_t(vox_offset);
    const size_t need = offset + size_t(nx * ny * nz) * elem;
    if (bytes.size() < need) throw IoError(IoError::Kind::truncated, path + ": truncated voxel payload");

    Volume v;
    v.extents = {nz, nx, ny};  // axial stack: (z, rows=x, cols=y)
    v.spacing = {double(pz > 0 ? pz : 1), double(px > 0 ? px : 1), double(py > 0 ? py : 1)};
    v.intensity.resize(size_t(nx * ny * nz));
    const bool scaled = scl_slope != 0.0f;
    auto store = [&](int64_t i, int64_t j, int64_t k, double raw) {
        const double val = scaled ? raw * double(scl_slope) + double(scl_inter) : raw;
        v.intensity[size_t((k * nx + i) * ny + j)] = val;
    };
    const unsigned char* data = bytes.data() + offset;
    int64_t idx = 0;
    for (int64_t k = 0; k < nz; ++k)
        for (int64_t j = 0; j < ny; ++j)
            for (int64_t i = 0; i < nx; ++i, ++idx) {
                double raw;
                if (datatype == 2)
                    raw = double(data[size_t(idx)]);
                else if (datatype == 4)
                    raw = double(read_le<int16_t>(data + size_t(idx) * 2));
                else
                    raw = double(read_le<float>(data + size_t(idx) * 4));
                store(i, j, k, raw);
            }
    return v;
}

}  // namespace

Volume read_volume(const std::string& path) {
    if (path.size() >= 4 && path.compare(path.size() - 4, 4, ".nii") == 0) return read_nifti(path);
    return read_native(path);
}

void write_volume(const Volume& v, const std::string& path, VolDType dtype) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError(IoError::Kind::generic, "cannot write " + path);
    char head[256];
    std::snprintf(head, sizeof head, "svol 1\nextents: %lld %lld %lld\nspacing: %.17g %.17g %.17g\ndtype: %s\ndata:\n",
                  (long long)v.extents[0], (long long)v.extents[1], (long long)v.extents[2],
                  v.spacing[0], v.spacing[1], v.spacing[2], dtype_name(dtype));
    f << head;
    const int64_t n = v.voxels();
    check_shape(int64_t(v.intensity.size()) == n, "write_volume: intensity length mismatch");
    if (dtype == VolDType::uint8) {
        std::vector<unsigned char> raw(size_t(n), 0);
        for (int64_t i = 0; i < n; ++i) raw[size_t(i)] = (unsigned char)(v.intensity[size_t(i)]);
        f.write(reinterpret_cast<const char*>(raw.data()), std::streamsize(raw.size()));
    } else if (dtype == VolDType::float32) {
        std::vector<float> raw(size_t(n), 0.0f);
        for (int64_t i = 0; i < n; ++i) raw[size_t(i)] = float(v.intensity[size_t(i)]);
        f.write(reinterpret_cast<const char*>(raw.data()), std::streamsize(raw.size() * 4));
    } else {
        f.write(reinterpret_cast<const char*>(v.intensity.data()), std::streamsize(size_t(n) * 8));
    }
    if (!f) throw IoError(IoError::Kind::generic, "short write to " + path);
}

void write_mask(const Volume& v, const std::string& path) {
    check_shape(v.has_mask(), "write_mask: volume has no mask");
    Volume m;
    m.extents = v.extents;
    m.spacing = v.spacing;
    m.intensity.resize(size_t(v.voxels()));
    for (size_t i = 0; i < v.mask.size(); ++i) m.intensity[i] = double(v.mask[i]);
    write_volume(m, path, VolDType::uint8);
}

std::vector<uint8_t> read_mask(const std::string& path, const std::array<int64_t, 3>& expect_extents) {
    Volume m = read_volume(path);
    if (m.extents != expect_extents)
        throw DimensionError("mask extents do not match intensity extents for " + path);
    if (!m.has_mask()) {  // mask stored in a float dtype
        m.mask.resize(size_t(m.voxels()));
        for (size_t i = 0; i < m.mask.size(); ++i) m.mask[i] = m.intensity[i] != 0.0 ? 1 : 0;
    }
    return std::move(m.mask);
}

}  // namespace sb
