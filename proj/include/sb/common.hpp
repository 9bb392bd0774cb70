#ifndef SB_COMMON_HPP
#define SB_COMMON_HPP

#include <cmath>
#include <cstdint>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace sb {

// ---------------------------------------------------------------------------
// Error taxonomy. The CLI maps these to distinct exit codes.
// ---------------------------------------------------------------------------

struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Shape/contract violations (mismatched extents, non-scalar loss, ...).
struct DimensionError : Error {
    using Error::Error;
};

/// NaN propagation, undefined statistics, diverged training.
struct NumericError : Error {
    using Error::Error;
};

/// Filesystem and format failures.
struct IoError : Error {
    enum class Kind { generic, bad_magic, unsupported_dtype, truncated, missing };
    Kind kind = Kind::generic;
    IoError(Kind k, const std::string& msg) : Error(msg), kind(k) {}
    explicit IoError(const std::string& msg) : Error(msg) {}
};

/// Bad command-line / config usage.
struct UsageError : Error {
    using Error::Error;
};

// ---------------------------------------------------------------------------
// Shapes. Layout is row-major; dims are ordered (batch, channels, spatial...).
// ---------------------------------------------------------------------------

using Shape = std::vector<int64_t>;

inline int64_t numel(const Shape& s) {
    int64_t n = 1;
    for (int64_t d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::string r = "(";
    for (size_t i = 0; i < s.size(); ++i) r += (i ? "," : "") + std::to_string(s[i]);
    return r + ")";
}

inline void check_shape(bool ok, const std::string& msg) {
    if (!ok) throw DimensionError(msg);
}

/// Flat row-major offset of a coordinate tuple.
inline int64_t flat_index(const Shape& shape, const std::vector<int64_t>& coord) {
    int64_t idx = 0;
    for (size_t i = 0; i < shape.size(); ++i) idx = idx * shape[i] + coord[i];
    return idx;
}

/// Inverse of flat_index (mixed-radix expansion).
inline std::vector<int64_t> unflat_index(const Shape& shape, int64_t idx) {
    std::vector<int64_t> c(shape.size());
    for (size_t i = shape.size(); i-- > 0;) {
        c[i] = idx % shape[i];
        idx /= shape[i];
    }
    return c;
}

// ---------------------------------------------------------------------------
// Deterministic RNG. We avoid std distributions (their output is
// implementation-defined); everything below is reproducible from the seed
// alone on any platform.
// ---------------------------------------------------------------------------

/// splitmix64: used to derive independent stream seeds from (seed, salt...).
inline uint64_t mix_seed(uint64_t x) {
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
}

inline uint64_t derive_seed(uint64_t seed, uint64_t salt) {
    return mix_seed(seed ^ mix_seed(salt));
}

/// xoshiro-free minimal engine: splitmix64 stream. Period is ample for our use.
class Rng {
public:
    explicit Rng(uint64_t seed = 0) : state_(seed) {}

    uint64_t next_u64() {
        state_ += 0x9e3779b97f4a7c15ull;
        uint64_t z = state_;
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
        return z ^ (z >> 31);
    }

    /// Uniform in [0,1) with 53-bit resolution.
    double uniform() { return double(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    /// Box-Muller; deterministic, no cached spare.
    double normal() {
        double u1 = uniform(), u2 = uniform();
        while (u1 <= 1e-300) u1 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925 * u2);
    }

    int64_t below(int64_t n) { return int64_t(next_u64() % uint64_t(n)); }

    /// Deterministic Fisher-Yates shuffle.
    template <class T>
    void shuffle(std::vector<T>& v) {
        for (int64_t i = int64_t(v.size()) - 1; i > 0; --i) std::swap(v[i], v[below(i + 1)]);
    }

private:
    uint64_t state_;
};

}  // namespace sb

#endif  // SB_COMMON_HPP
