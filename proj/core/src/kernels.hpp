#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

// Raw compute kernels, templated on the scalar type so the same code path
// serves the f32 forward pass and the f64 replay behind the derivative
// oracles. Only the GEMM kernels bump the multiply-accumulate counter;
// pointwise multiplies go to a separate counter that backs the secondary
// flops column of the cost reports.

namespace caselab::kernels {

struct MacCounter {
  uint64_t macs = 0;
  uint64_t pointwise = 0;
};

MacCounter& mac_counter();
void mac_reset();

// C[m,n] += A[m,k] * B[k,n]
template <typename T>
void gemm_nn(T* c, const T* a, const T* b, int m, int n, int k) {
  mac_counter().macs += static_cast<uint64_t>(m) * static_cast<uint64_t>(n) *
                        static_cast<uint64_t>(k);
  for (int i = 0; i < m; ++i) {
    const T* arow = a + static_cast<int64_t>(i) * k;
    T* crow = c + static_cast<int64_t>(i) * n;
    for (int p = 0; p < k; ++p) {
      T av = arow[p];
      const T* brow = b + static_cast<int64_t>(p) * n;
      for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// C[m,n] += A[m,k] * B[n,k]^T
template <typename T>
void gemm_nt(T* c, const T* a, const T* b, int m, int n, int k) {
  mac_counter().macs += static_cast<uint64_t>(m) * static_cast<uint64_t>(n) *
                        static_cast<uint64_t>(k);
  for (int i = 0; i < m; ++i) {
    const T* arow = a + static_cast<int64_t>(i) * k;
    T* crow = c + static_cast<int64_t>(i) * n;
    for (int j = 0; j < n; ++j) {
      const T* brow = b + static_cast<int64_t>(j) * k;
      T acc = 0;
      for (int p = 0; p < k; ++p) acc += arow[p] * brow[p];
      crow[j] += acc;
    }
  }
}

// C[m,n] += A[k,m]^T * B[k,n]
template <typename T>
void gemm_tn(T* c, const T* a, const T* b, int m, int n, int k) {
  mac_counter().macs += static_cast<uint64_t>(m) * static_cast<uint64_t>(n) *
                        static_cast<uint64_t>(k);
  for (int p = 0; p < k; ++p) {
    const T* arow = a + static_cast<int64_t>(p) * m;
    const T* brow = b + static_cast<int64_t>(p) * n;
    for (int i = 0; i < m; ++i) {
      T av = arow[i];
      T* crow = c + static_cast<int64_t>(i) * n;
      for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

inline int conv_out_dim(int in, int kernel, int stride, int padding) {
  return (in + 2 * padding - kernel) / stride + 1;
}

// x: [n, c, h, w] -> cols: [c*kh*kw, n*oh*ow], zero padding.
template <typename T>
void im2col(const T* x, T* cols, int n, int c, int h, int w, int kernel,
            int stride, int padding) {
  int oh = conv_out_dim(h, kernel, stride, padding);
  int ow = conv_out_dim(w, kernel, stride, padding);
  int64_t col_w = static_cast<int64_t>(n) * oh * ow;
  for (int ci = 0; ci < c; ++ci) {
    for (int ki = 0; ki < kernel; ++ki) {
      for (int kj = 0; kj < kernel; ++kj) {
        int64_t row = (static_cast<int64_t>(ci) * kernel + ki) * kernel + kj;
        T* dst = cols + row * col_w;
        for (int ni = 0; ni < n; ++ni) {
          const T* src = x + ((static_cast<int64_t>(ni) * c + ci) * h) * w;
          for (int oi = 0; oi < oh; ++oi) {
            int ii = oi * stride - padding + ki;
            for (int oj = 0; oj < ow; ++oj) {
              int jj = oj * stride - padding + kj;
              T v = 0;
              if (ii >= 0 && ii < h && jj >= 0 && jj < w)
                v = src[static_cast<int64_t>(ii) * w + jj];
              *dst++ = v;
            }
          }
        }
      }
    }
  }
}

// Scatter-add transpose of im2col.
template <typename T>
void col2im(const T* cols, T* x, int n, int c, int h, int w, int kernel,
            int stride, int padding) {
  int oh = conv_out_dim(h, kernel, stride, padding);
  int ow = conv_out_dim(w, kernel, stride, padding);
  int64_t col_w = static_cast<int64_t>(n) * oh * ow;
  for (int ci = 0; ci < c; ++ci) {
    for (int ki = 0; ki < kernel; ++ki) {
      for (int kj = 0; kj < kernel; ++kj) {
        int64_t row = (static_cast<int64_t>(ci) * kernel + ki) * kernel + kj;
        const T* src = cols + row * col_w;
        for (int ni = 0; ni < n; ++ni) {
          T* dst = x + ((static_cast<int64_t>(ni) * c + ci) * h) * w;
          for (int oi = 0; oi < oh; ++oi) {
            int ii = oi * stride - padding + ki;
            for (int oj = 0; oj < ow; ++oj) {
              int jj = oj * stride - padding + kj;
              T v = *src++;
              if (ii >= 0 && ii < h && jj >= 0 && jj < w)
                dst[static_cast<int64_t>(ii) * w + jj] += v;
            }
          }
        }
      }
    }
  }
}

template <typename T>
T sigmoid_val(T x) {
  if (x >= 0) {
    T e = std::exp(-x);
    return T(1) / (T(1) + e);
  }
  T e = std::exp(x);
  return e / (T(1) + e);
}

template <typename T>
T silu_val(T x) {
  return x * sigmoid_val(x);
}

}  // namespace caselab::kernels
