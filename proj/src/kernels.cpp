#include "kernels.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace sb::kernels {

namespace {
constexpr int64_t kNBlock = 512;  // gemm column block
constexpr int64_t kKBlock = 256;  // gemm inner block
}  // namespace

template <class S>
void gemm_nn(int64_t M, int64_t N, int64_t K, const S* A, int64_t lda, const S* B, int64_t ldb,
             S* C, int64_t ldc, bool accumulate) {
    const int64_t nblocks = (N + kNBlock - 1) / kNBlock;
#pragma omp parallel for schedule(static)
    for (int64_t nb = 0; nb < nblocks; ++nb) {
        const int64_t n0 = nb * kNBlock;
        const int64_t n1 = std::min(N, n0 + kNBlock);
        if (!accumulate) {
            for (int64_t m = 0; m < M; ++m) std::fill(C + m * ldc + n0, C + m * ldc + n1, S(0));
        }
        for (int64_t k0 = 0; k0 < K; k0 += kKBlock) {
            const int64_t k1 = std::min(K, k0 + kKBlock);
            for (int64_t m = 0; m < M; ++m) {
                S* c = C + m * ldc;
                const S* a = A + m * lda;
                for (int64_t k = k0; k < k1; ++k) {
                    const S av = a[k];
                    if (av == S(0)) continue;
                    const S* b = B + k * ldb;
                    for (int64_t n = n0; n < n1; ++n) c[n] += av * b[n];
                }
            }
        }
    }
}

template <class S>
void gemm_nt(int64_t M, int64_t N, int64_t K, const S* A, int64_t lda, const S* B, int64_t ldb,
             S* C, int64_t ldc, bool accumulate) {
#pragma omp parallel for schedule(static)
    for (int64_t m = 0; m < M; ++m) {
        const S* a = A + m * lda;
        for (int64_t n = 0; n < N; ++n) {
            const S* b = B + n * ldb;
            S acc = 0;
            for (int64_t k = 0; k < K; ++k) acc += a[k] * b[k];
            if (accumulate)
                C[m * ldc + n] += acc;
            else
                C[m * ldc + n] = acc;
        }
    }
}

template <class S>
void gemm_tn(int64_t M, int64_t N, int64_t K, const S* A, int64_t lda, const S* B, int64_t ldb,
             S* C, int64_t ldc, bool accumulate) {
    const int64_t nblocks = (N + kNBlock - 1) / kNBlock;
#pragma omp parallel for schedule(static)
    for (int64_t nb = 0; nb < nblocks; ++nb) {
        const int64_t n0 = nb * kNBlock;
        const int64_t n1 = std::min(N, n0 + kNBlock);
        if (!accumulate) {
            for (int64_t k = 0; k < K; ++k) std::fill(C + k * ldc + n0, C + k * ldc + n1, S(0));
        }
        for (int64_t m = 0; m < M; ++m) {
            const S* b = B + m * ldb;
            for (int64_t k = 0; k < K; ++k) {
                const S av = A[m * lda + k];
                if (av == S(0)) continue;
                S* c = C + k * ldc;
                for (int64_t n = n0; n < n1; ++n) c[n] += av * b[n];
            }
        }
    }
}

// ---------------------------------------------------------------------------
// im2col / col2im
// ---------------------------------------------------------------------------

template <class S>
void im2col(const ConvGeom& g, const S* x, int64_t p0, int64_t p1, S* col) {
    const int64_t cols = p1 - p0;
    if (g.rank == 2) {
        const int64_t ih = g.in[0], iw = g.in[1], kh = g.k[0], kw = g.k[1];
        const int64_t ow = g.out[1];
#pragma omp parallel for schedule(static)
        for (int64_t c = 0; c < g.cin; ++c) {
            const S* xc = x + c * ih * iw;
            S* colc = col + c * kh * kw * cols;
            for (int64_t ky = 0; ky < kh; ++ky)
                for (int64_t kx = 0; kx < kw; ++kx) {
                    S* row = colc + (ky * kw + kx) * cols;
                    for (int64_t p = p0; p < p1; ++p) {
                        const int64_t oy = p / ow, ox = p % ow;
                        const int64_t sy = oy * g.stride[0] - g.pad[0] + ky;
                        const int64_t sx = ox * g.stride[1] - g.pad[1] + kx;
                        row[p - p0] = (sy >= 0 && sy < ih && sx >= 0 && sx < iw) ? xc[sy * iw + sx] : S(0);
                    }
                }
        }
    } else {
        const int64_t id = g.in[0], ih = g.in[1], iw = g.in[2];
        const int64_t kd = g.k[0], kh = g.k[1], kw = g.k[2];
        const int64_t oh = g.out[1], ow = g.out[2];
#pragma omp parallel for schedule(static)
        for (int64_t c = 0; c < g.cin; ++c) {
            const S* xc = x + c * id * ih * iw;
            S* colc = col + c * kd * kh * kw * cols;
            for (int64_t kz = 0; kz < kd; ++kz)
                for (int64_t ky = 0; ky < kh; ++ky)
                    for (int64_t kx = 0; kx < kw; ++kx) {
                        S* row = colc + ((kz * kh + ky) * kw + kx) * cols;
                        for (int64_t p = p0; p < p1; ++p) {
                            int64_t rem = p;
                            const int64_t oz = rem / (oh * ow);
                            rem -= oz * oh * ow;
                            const int64_t oy = rem / ow, ox = rem % ow;
                            const int64_t sz = oz * g.stride[0] - g.pad[0] + kz;
                            const int64_t sy = oy * g.stride[1] - g.pad[1] + ky;
                            const int64_t sx = ox * g.stride[2] - g.pad[2] + kx;
                            row[p - p0] = (sz >= 0 && sz < id && sy >= 0 && sy < ih && sx >= 0 && sx < iw)
                                              ? xc[(sz * ih + sy) * iw + sx]
                                              : S(0);
                        }
                    }
        }
    }
}

template <class S>
void col2im_add(const ConvGeom& g, const S* col, int64_t p0, int64_t p1, S* x) {
    const int64_t cols = p1 - p0;
    if (g.rank == 2) {
        const int64_t ih = g.in[0], iw = g.in[1], kh = g.k[0], kw = g.k[1];
        const int64_t ow = g.out[1];
#pragma omp parallel for schedule(static)
        for (int64_t c = 0; c < g.cin; ++c) {
            S* xc = x + c * ih * iw;
            const S* colc = col + c * kh * kw * cols;
            for (int64_t ky = 0; ky < kh; ++ky)
                for (int64_t kx = 0; kx < kw; ++kx) {
                    const S* row = colc + (ky * kw + kx) * cols;
                    for (int64_t p = p0; p < p1; ++p) {
                        const int64_t oy = p / ow, ox = p % ow;
                        const int64_t sy = oy * g.stride[0] - g.pad[0] + ky;
                        const int64_t sx = ox * g.stride[1] - g.pad[1] + kx;
                        if (sy >= 0 && sy < ih && sx >= 0 && sx < iw) xc[sy * iw + sx] += row[p - p0];
                    }
                }
        }
    } else {
        const int64_t id = g.in[0], ih = g.in[1], iw = g.in[2];
        const int64_t kd = g.k[0], kh = g.k[1], kw = g.k[2];
        const int64_t oh = g.out[1], ow = g.out[2];
#pragma omp parallel for schedule(static)
        for (int64_t c = 0; c < g.cin; ++c) {
            S* xc = x + c * id * ih * iw;
            const S* colc = col + c * kd * kh * kw * cols;
            for (int64_t kz = 0; kz < kd; ++kz)
                for (int64_t ky = 0; ky < kh; ++ky)
                    for (int64_t kx = 0; kx < kw; ++kx) {
                        const S* row = colc + ((kz * kh + ky) * kw + kx) * cols;
                        for (int64_t p = p0; p < p1; ++p) {
                            int64_t rem = p;
                            const int64_t oz = rem / (oh * ow);
                            rem -= oz * oh * ow;
                            const int64_t oy = rem / ow, ox = rem % ow;
                            const int64_t sz = oz * g.stride[0] - g.pad[0] + kz;
                            const int64_t sy = oy * g.stride[1] - g.pad[1] + ky;
                            const int64_t sx = ox * g.stride[2] - g.pad[2] + kx;
                            if (sz >= 0 && sz < id && sy >= 0 && sy < ih && sx >= 0 && sx < iw)
                                xc[(sz * ih + sy) * iw + sx] += row[p - p0];
                        }
                    }
        }
    }
}

// ---------------------------------------------------------------------------
// Pooling
// ---------------------------------------------------------------------------

namespace {
inline void pos_to_coord(int rank, const int64_t* ext, int64_t p, int64_t* c) {
    for (int i = rank; i-- > 0;) {
        c[i] = p % ext[i];
        p /= ext[i];
    }
}
}  // namespace

template <class S>
void max_pool_fwd(const ConvGeom& g, int64_t batch, const S* x, S* out, int64_t* argmax) {
    const int64_t planes = batch * g.cin;
    const int64_t isz = g.in_size(), osz = g.out_size();
#pragma omp parallel for schedule(static)
    for (int64_t pl = 0; pl < planes; ++pl) {
        const S* xp = x + pl * isz;
        S* op = out + pl * osz;
        int64_t* ap = argmax + pl * osz;
        int64_t oc[3], kc[3];
        for (int64_t p = 0; p < osz; ++p) {
            pos_to_coord(g.rank, g.out, p, oc);
            S best = -std::numeric_limits<S>::infinity();
            int64_t besti = -1;
            const int64_t kn = g.k_size();
            for (int64_t kk = 0; kk < kn; ++kk) {
                pos_to_coord(g.rank, g.k, kk, kc);
                int64_t off = 0;
                bool ok = true;
                for (int r = 0; r < g.rank; ++r) {
                    const int64_t s = oc[r] * g.stride[r] + kc[r];
                    if (s >= g.in[r]) { ok = false; break; }
                    off = off * g.in[r] + s;
                }
                if (!ok) continue;
                if (xp[off] > best) {  // strict: first occurrence wins ties
                    best = xp[off];
                    besti = off;
                }
            }
            op[p] = best;
            ap[p] = besti;
        }
    }
}

template <class S>
void max_pool_bwd(const ConvGeom& g, int64_t batch, const S* gout, const int64_t* argmax, S* gx) {
    const int64_t planes = batch * g.cin;
    const int64_t isz = g.in_size(), osz = g.out_size();
#pragma omp parallel for schedule(static)
    for (int64_t pl = 0; pl < planes; ++pl) {
        const S* gp = gout + pl * osz;
        const int64_t* ap = argmax + pl * osz;
        S* xp = gx + pl * isz;
        for (int64_t p = 0; p < osz; ++p)
            if (ap[p] >= 0) xp[ap[p]] += gp[p];
    }
}

template <class S>
void avg_pool_fwd(const ConvGeom& g, int64_t batch, const S* x, S* out) {
    const int64_t planes = batch * g.cin;
    const int64_t isz = g.in_size(), osz = g.out_size();
    const S inv = S(1) / S(g.k_size());
#pragma omp parallel for schedule(static)
    for (int64_t pl = 0; pl < planes; ++pl) {
        const S* xp = x + pl * isz;
        S* op = out + pl * osz;
        int64_t oc[3], kc[3];
        for (int64_t p = 0; p < osz; ++p) {
            pos_to_coord(g.rank, g.out, p, oc);
            S acc = 0;
            const int64_t kn = g.k_size();
            for (int64_t kk = 0; kk < kn; ++kk) {
                pos_to_coord(g.rank, g.k, kk, kc);
                int64_t off = 0;
                for (int r = 0; r < g.rank; ++r) off = off * g.in[r] + (oc[r] * g.stride[r] + kc[r]);
                acc += xp[off];
            }
            op[p] = acc * inv;
        }
    }
}

template <class S>
void avg_pool_bwd(const ConvGeom& g, int64_t batch, const S* gout, S* gx) {
    const int64_t planes = batch * g.cin;
    const int64_t isz = g.in_size(), osz = g.out_size();
    const S inv = S(1) / S(g.k_size());
#pragma omp parallel for schedule(static)
    for (int64_t pl = 0; pl < planes; ++pl) {
        const S* gp = gout + pl * osz;
        S* xp = gx + pl * isz;
        int64_t oc[3], kc[3];
        for (int64_t p = 0; p < osz; ++p) {
            pos_to_coord(g.rank, g.out, p, oc);
            const S v = gp[p] * inv;
            const int64_t kn = g.k_size();
            for (int64_t kk = 0; kk < kn; ++kk) {
                pos_to_coord(g.rank, g.k, kk, kc);
                int64_t off = 0;
                for (int r = 0; r < g.rank; ++r) off = off * g.in[r] + (oc[r] * g.stride[r] + kc[r]);
                xp[off] += v;
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Resize (align-corners = false)
// ---------------------------------------------------------------------------

namespace {
struct LinTap {
    int64_t i0, i1;
    double w1;  // weight of i1; weight of i0 is 1-w1
};

inline LinTap linear_tap(int64_t o, int64_t in_ext, int64_t out_ext) {
    const double src = (double(o) + 0.5) * double(in_ext) / double(out_ext) - 0.5;
    double s = src;
    if (s < 0) s = 0;
    const double hi = double(in_ext - 1);
    if (s > hi) s = hi;
    LinTap t;
    t.i0 = int64_t(s);
    if (t.i0 > in_ext - 1) t.i0 = in_ext - 1;
    t.i1 = std::min(t.i0 + 1, in_ext - 1);
    t.w1 = s - double(t.i0);
    return t;
}

inline int64_t nearest_tap(int64_t o, int64_t in_ext, int64_t out_ext) {
    int64_t i = int64_t(std::floor((double(o) + 0.5) * double(in_ext) / double(out_ext)));
    if (i < 0) i = 0;
    if (i > in_ext - 1) i = in_ext - 1;
    return i;
}
}  // namespace

template <class S>
void resize_nearest_fwd(int rank, int64_t planes, const int64_t* in, const int64_t* out,
                        const S* x, S* y) {
    int64_t isz = 1, osz = 1;
    for (int r = 0; r < rank; ++r) { isz *= in[r]; osz *= out[r]; }
    std::vector<std::vector<int64_t>> taps(static_cast<size_t>(rank));
    for (int r = 0; r < rank; ++r) {
        taps[size_t(r)].resize(size_t(out[r]));
        for (int64_t o = 0; o < out[r]; ++o) taps[size_t(r)][size_t(o)] = nearest_tap(o, in[r], out[r]);
    }
#pragma omp parallel for schedule(static)
    for (int64_t pl = 0; pl < planes; ++pl) {
        const S* xp = x + pl * isz;
        S* yp = y + pl * osz;
        int64_t oc[3];
        for (int64_t p = 0; p < osz; ++p) {
            pos_to_coord(rank, out, p, oc);
            int64_t off = 0;
            for (int r = 0; r < rank; ++r) off = off * in[r] + taps[size_t(r)][size_t(oc[r])];
            yp[p] = xp[off];
        }
    }
}

template <class S>
void resize_nearest_bwd(int rank, int64_t planes, const int64_t* in, const int64_t* out,
                        const S* gy, S* gx) {
    int64_t isz = 1, osz = 1;
    for (int r = 0; r < rank; ++r) { isz *= in[r]; osz *= out[r]; }
#pragma omp parallel for schedule(static)
    for (int64_t pl = 0; pl < planes; ++pl) {
        const S* gp = gy + pl * osz;
        S* xp = gx + pl * isz;
        int64_t oc[3];
        for (int64_t p = 0; p < osz; ++p) {
            pos_to_coord(rank, out, p, oc);
            int64_t off = 0;
            for (int r = 0; r < rank; ++r) off = off * in[r] + nearest_tap(oc[r], in[r], out[r]);
            xp[off] += gp[p];
        }
    }
}

template <class S>
void resize_linear_fwd(int rank, int64_t planes, const int64_t* in, const int64_t* out,
                       const S* x, S* y) {
    int64_t isz = 1, osz = 1;
    for (int r = 0; r < rank; ++r) { isz *= in[r]; osz *= out[r]; }
    std::vector<std::vector<LinTap>> taps(static_cast<size_t>(rank));
    for (int r = 0; r < rank; ++r) {
        taps[size_t(r)].resize(size_t(out[r]));
        for (int64_t o = 0; o < out[r]; ++o) taps[size_t(r)][size_t(o)] = linear_tap(o, in[r], out[r]);
    }
#pragma omp parallel for schedule(static)
    for (int64_t pl = 0; pl < planes; ++pl) {
        const S* xp = x + pl * isz;
        S* yp = y + pl * osz;
        int64_t oc[3];
        for (int64_t p = 0; p < osz; ++p) {
            pos_to_coord(rank, out, p, oc);
            double acc = 0;
            const int corners = 1 << rank;
            for (int m = 0; m < corners; ++m) {
                double w = 1;
                int64_t off = 0;
                for (int r = 0; r < rank; ++r) {
                    const LinTap& t = taps[size_t(r)][size_t(oc[r])];
                    const bool hi = (m >> r) & 1;
                    w *= hi ? t.w1 : 1.0 - t.w1;
                    off = off * in[r] + (hi ? t.i1 : t.i0);
                }
                acc += w * double(xp[off]);
            }
            yp[p] = S(acc);
        }
    }
}

template <class S>
void resize_linear_bwd(int rank, int64_t planes, const int64_t* in, const int64_t* out,
                       const S* gy, S* gx) {
    int64_t isz = 1, osz = 1;
    for (int r = 0; r < rank; ++r) { isz *= in[r]; osz *= out[r]; }
    std::vector<std::vector<LinTap>> taps(static_cast<size_t>(rank));
    for (int r = 0; r < rank; ++r) {
        taps[size_t(r)].resize(size_t(out[r]));
        for (int64_t o = 0; o < out[r]; ++o) taps[size_t(r)][size_t(o)] = linear_tap(o, in[r], out[r]);
    }
#pragma omp parallel for schedule(static)
    for (int64_t pl = 0; pl < planes; ++pl) {
        const S* gp = gy + pl * osz;
        S* xp = gx + pl * isz;
        int64_t oc[3];
        for (int64_t p = 0; p < osz; ++p) {
            pos_to_coord(rank, out, p, oc);
            const double gv = double(gp[p]);
            const int corners = 1 << rank;
            for (int m = 0; m < corners; ++m) {
                double w = 1;
                int64_t off = 0;
                for (int r = 0; r < rank; ++r) {
                    const LinTap& t = taps[size_t(r)][size_t(oc[r])];
                    const bool hi = (m >> r) & 1;
                    w *= hi ? t.w1 : 1.0 - t.w1;
                    off = off * in[r] + (hi ? t.i1 : t.i0);
                }
                xp[off] += S(w * gv);
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Softmax
// ---------------------------------------------------------------------------

template <class S>
void softmax_fwd(int64_t outer, int64_t axis_len, int64_t inner, const S* x, S* y) {
#pragma omp parallel for schedule(static) collapse(2)
    for (int64_t o = 0; o < outer; ++o)
        for (int64_t i = 0; i < inner; ++i) {
            const S* xp = x + o * axis_len * inner + i;
            S* yp = y + o * axis_len * inner + i;
            S mx = xp[0];
            for (int64_t a = 1; a < axis_len; ++a) mx = std::max(mx, xp[a * inner]);
            S sum = 0;
            for (int64_t a = 0; a < axis_len; ++a) {
                const S e = std::exp(xp[a * inner] - mx);
                yp[a * inner] = e;
                sum += e;
            }
            const S inv = S(1) / sum;
            for (int64_t a = 0; a < axis_len; ++a) yp[a * inner] *= inv;
        }
}

template <class S>
void softmax_bwd(int64_t outer, int64_t axis_len, int64_t inner, const S* y, const S* gy, S* gx) {
#pragma omp parallel for schedule(static) collapse(2)
    for (int64_t o = 0; o < outer; ++o)
        for (int64_t i = 0; i < inner; ++i) {
            const int64_t base = o * axis_len * inner + i;
            S dot = 0;
            for (int64_t a = 0; a < axis_len; ++a) dot += gy[base + a * inner] * y[base + a * inner];
            for (int64_t a = 0; a < axis_len; ++a)
                gx[base + a * inner] += (gy[base + a * inner] - dot) * y[base + a * inner];
        }
}

// Explicit instantiations.
#define SB_INST(S)                                                                              \
    template void gemm_nn<S>(int64_t, int64_t, int64_t, const S*, int64_t, const S*, int64_t,   \
                             S*, int64_t, bool);                                                \
    template void gemm_nt<S>(int64_t, int64_t, int64_t, const S*, int64_t, const S*, int64_t,   \
                             S*, int64_t, bool);                                                \
    template void gemm_tn<S>(int64_t, int64_t, int64_t, const S*, int64_t, const S*, int64_t,   \
                             S*, int64_t, bool);                                                \
    template void im2col<S>(const ConvGeom&, const S*, int64_t, int64_t, S*);                   \
    template void col2im_add<S>(const ConvGeom&, const S*, int64_t, int64_t, S*);               \
    template void max_pool_fwd<S>(const ConvGeom&, int64_t, const S*, S*, int64_t*);            \
    template void max_pool_bwd<S>(const ConvGeom&, int64_t, const S*, const int64_t*, S*);      \
    template void avg_pool_fwd<S>(const ConvGeom&, int64_t, const S*, S*);                      \
    template void avg_pool_bwd<S>(const ConvGeom&, int64_t, const S*, S*);                      \
    template void resize_nearest_fwd<S>(int, int64_t, const int64_t*, const int64_t*, const S*, \
                                        S*);                                                    \
    template void resize_nearest_bwd<S>(int, int64_t, const int64_t*, const int64_t*, const S*, \
                                        S*);                                                    \
    template void resize_linear_fwd<S>(int, int64_t, const int64_t*, const int64_t*, const S*,  \
                                       S*);                                                     \
    template void resize_linear_bwd<S>(int, int64_t, const int64_t*, const int64_t*, const S*,  \
                                       S*);                                                     \
    template void softmax_fwd<S>(int64_t, int64_t, int64_t, const S*, S*);                      \
    template void softmax_bwd<S>(int64_t, int64_t, int64_t, const S*, const S*, S*);

SB_INST(float)
SB_INST(double)
#undef SB_INST

}  // namespace sb::kernels
