#pragma once

// Dense kernels shared by the graph ops. Row-major, no aliasing between
// inputs and output. `accumulate` adds into C instead of overwriting it.

#include <algorithm>
#include <cstddef>

namespace revcal::kernels {

// C[M,N] (+)= A[M,K] * B[K,N]
inline void gemm_nn(std::size_t M, std::size_t N, std::size_t K, const double* A, const double* B, double* C,
                    bool accumulate) {
  if (!accumulate) std::fill(C, C + M * N, 0.0);
  for (std::size_t i = 0; i < M; ++i) {
    double* c = C + i * N;
    const double* a = A + i * K;
    for (std::size_t k = 0; k < K; ++k) {
      const double av = a[k];
      if (av == 0.0) continue;
      const double* b = B + k * N;
      for (std::size_t j = 0; j < N; ++j) c[j] += av * b[j];
    }
  }
}

// C[M,N] (+)= A[M,K] * B[N,K]^T
inline void gemm_nt(std::size_t M, std::size_t N, std::size_t K, const double* A, const double* B, double* C,
                    bool accumulate) {
  for (std::size_t i = 0; i < M; ++i) {
    const double* a = A + i * K;
    for (std::size_t j = 0; j < N; ++j) {
      const double* b = B + j * K;
      double s = 0.0;
      for (std::size_t k = 0; k < K; ++k) s += a[k] * b[k];
      C[i * N + j] = accumulate ? C[i * N + j] + s : s;
    }
  }
}

// C[M,N] (+)= A[K,M]^T * B[K,N]
inline void gemm_tn(std::size_t M, std::size_t N, std::size_t K, const double* A, const double* B, double* C,
                    bool accumulate) {
  if (!accumulate) std::fill(C, C + M * N, 0.0);
  for (std::size_t k = 0; k < K; ++k) {
    const double* a = A + k * M;
    const double* b = B + k * N;
    for (std::size_t i = 0; i < M; ++i) {
      const double av = a[i];
      if (av == 0.0) continue;
      double* c = C + i * N;
      for (std::size_t j = 0; j < N; ++j) c[j] += av * b[j];
    }
  }
}

struct ConvGeometry {
  std::size_t channels, height, width;  // image side
  std::size_t kh, kw, stride, pad;
  std::size_t out_h, out_w;             // column side
};

// image [C,H,W] -> col [C*kh*kw, out_h*out_w]
inline void im2col(const ConvGeometry& g, const double* img, double* col) {
  const std::size_t P = g.out_h * g.out_w;
  for (std::size_t c = 0; c < g.channels; ++c)
    for (std::size_t ki = 0; ki < g.kh; ++ki)
      for (std::size_t kj = 0; kj < g.kw; ++kj) {
        double* row = col + ((c * g.kh + ki) * g.kw + kj) * P;
        for (std::size_t oy = 0; oy < g.out_h; ++oy) {
          const long iy = static_cast<long>(oy * g.stride + ki) - static_cast<long>(g.pad);
          double* r = row + oy * g.out_w;
          if (iy < 0 || iy >= static_cast<long>(g.height)) {
            std::fill(r, r + g.out_w, 0.0);
            continue;
          }
          const double* src = img + (c * g.height + static_cast<std::size_t>(iy)) * g.width;
          for (std::size_t ox = 0; ox < g.out_w; ++ox) {
            const long ix = static_cast<long>(ox * g.stride + kj) - static_cast<long>(g.pad);
            r[ox] = (ix < 0 || ix >= static_cast<long>(g.width)) ? 0.0 : src[ix];
          }
        }
      }
}

// col [C*kh*kw, out_h*out_w] -> image [C,H,W], accumulating.
inline void col2im(const ConvGeometry& g, const double* col, double* img) {
  const std::size_t P = g.out_h * g.out_w;
  for (std::size_t c = 0; c < g.channels; ++c)
    for (std::size_t ki = 0; ki < g.kh; ++ki)
      for (std::size_t kj = 0; kj < g.kw; ++kj) {
        const double* row = col + ((c * g.kh + ki) * g.kw + kj) * P;
        for (std::size_t oy = 0; oy < g.out_h; ++oy) {
          const long iy = static_cast<long>(oy * g.stride + ki) - static_cast<long>(g.pad);
          if (iy < 0 || iy >= static_cast<long>(g.height)) continue;
          double* dst = img + (c * g.height + static_cast<std::size_t>(iy)) * g.width;
          const double* r = row + oy * g.out_w;
          for (std::size_t ox = 0; ox < g.out_w; ++ox) {
            const long ix = static_cast<long>(ox * g.stride + kj) - static_cast<long>(g.pad);
            if (ix >= 0 && ix < static_cast<long>(g.width)) dst[ix] += r[ox];
          }
        }
      }
}

}  // namespace revcal::kernels
