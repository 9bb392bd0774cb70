#ifndef SB_KERNELS_HPP
#define SB_KERNELS_HPP

#include <cstdint>
#include <vector>

// Raw numeric kernels behind the graph ops. All loops have a fixed reduction
// order per output element; OpenMP only ever splits disjoint output ranges,
// so results are bit-stable for a given build regardless of thread count.

namespace sb::kernels {

// C[M,N] (+)= A[M,K] * B[K,N]; row-major with leading dimensions.
template <class S>
void gemm_nn(int64_t M, int64_t N, int64_t K, const S* A, int64_t lda, const S* B, int64_t ldb,
             S* C, int64_t ldc, bool accumulate);

// C[M,N] (+)= A[M,K] * B[N,K]^T (dot products of contiguous rows).
template <class S>
void gemm_nt(int64_t M, int64_t N, int64_t K, const S* A, int64_t lda, const S* B, int64_t ldb,
             S* C, int64_t ldc, bool accumulate);

// C[K,N] (+)= A[M,K]^T * B[M,N].
template <class S>
void gemm_tn(int64_t M, int64_t N, int64_t K, const S* A, int64_t lda, const S* B, int64_t ldb,
             S* C, int64_t ldc, bool accumulate);

struct ConvGeom {
    int rank = 2;                     // spatial rank (2 or 3)
    int64_t cin = 0;
    int64_t in[3] = {1, 1, 1};        // input spatial extents
    int64_t k[3] = {1, 1, 1};         // kernel extents
    int64_t stride[3] = {1, 1, 1};
    int64_t pad[3] = {0, 0, 0};
    int64_t out[3] = {1, 1, 1};       // output spatial extents

    int64_t in_size() const { return in[0] * in[1] * in[2]; }
    int64_t out_size() const { return out[0] * out[1] * out[2]; }
    int64_t k_size() const { return k[0] * k[1] * k[2]; }
    int64_t col_rows() const { return cin * k_size(); }
};

// col (col_rows x (p1-p0)) <- patches of x (cin, in...) for output positions [p0,p1).
template <class S>
void im2col(const ConvGeom& g, const S* x, int64_t p0, int64_t p1, S* col);

// x (cin, in...) += scatter of col over output positions [p0,p1).
template <class S>
void col2im_add(const ConvGeom& g, const S* col, int64_t p0, int64_t p1, S* x);

// out (B,C,out...) <- max over windows; argmax stores flat input-spatial index
// of the first maximum in row-major window order.
template <class S>
void max_pool_fwd(const ConvGeom& g, int64_t batch, const S* x, S* out, int64_t* argmax);
template <class S>
void max_pool_bwd(const ConvGeom& g, int64_t batch, const S* gout, const int64_t* argmax, S* gx);

template <class S>
void avg_pool_fwd(const ConvGeom& g, int64_t batch, const S* x, S* out);
template <class S>
void avg_pool_bwd(const ConvGeom& g, int64_t batch, const S* gout, S* gx);

// align-corners=false resize over `rank` trailing spatial dims; `planes` is
// the product of the leading (batch*channel) extents.
template <class S>
void resize_nearest_fwd(int rank, int64_t planes, const int64_t* in, const int64_t* out,
                        const S* x, S* y);
template <class S>
void resize_nearest_bwd(int rank, int64_t planes, const int64_t* in, const int64_t* out,
                        const S* gy, S* gx);
template <class S>
void resize_linear_fwd(int rank, int64_t planes, const int64_t* in, const int64_t* out,
                       const S* x, S* y);
template <class S>
void resize_linear_bwd(int rank, int64_t planes, const int64_t* in, const int64_t* out,
                       const S* gy, S* gx);

// Softmax with max subtraction over the `axis_len` stride-`inner` lanes.
template <class S>
void softmax_fwd(int64_t outer, int64_t axis_len, int64_t inner, const S* x, S* y);
template <class S>
void softmax_bwd(int64_t outer, int64_t axis_len, int64_t inner, const S* y, const S* gy, S* gx);

}  // namespace sb::kernels

#endif  // SB_KERNELS_HPP
