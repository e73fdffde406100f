#pragma once

// Dense kernels behind the differentiable ops.
//
// `serial` holds the reference loops. `parallel` distributes the same loops
// over OpenMP threads, partitioned by output element so that every output is
// accumulated by exactly one thread in exactly the serial order; the two
// variants therefore agree bit for bit at any thread count. Accumulation is
// 64-bit regardless of the storage type.
//
// Backward kernels accumulate (+=) into their destination buffers.

#include <cstddef>
#include <span>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace affkit::numkit::kernels {

using Acc = double;

struct ConvDims {
  std::size_t batch = 0;
  std::size_t in_channels = 0;
  std::size_t out_channels = 0;
  std::size_t height = 0;
  std::size_t width = 0;
};

inline bool openmp_enabled() {
#ifdef _OPENMP
  return true;
#else
  return false;
#endif
}

inline int max_threads() {
#ifdef _OPENMP
  return omp_get_max_threads();
#else
  return 1;
#endif
}

inline void set_threads(int n) {
#ifdef _OPENMP
  if (n > 0) omp_set_num_threads(n);
#else
  (void)n;
#endif
}

namespace serial {

// c[m,n] = a[m,k] * b[k,n]
template <class T>
void matmul(std::span<const T> a, std::span<const T> b, std::span<T> c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      Acc acc = 0;
      for (std::size_t p = 0; p < k; ++p) acc += Acc(a[i * k + p]) * Acc(b[p * n + j]);
      c[i * n + j] = T(acc);
    }
  }
}

// c[m,n] += a[m,k] * b[n,k]^T
template <class T>
void matmul_nt_acc(std::span<const T> a, std::span<const T> b, std::span<T> c, std::size_t m, std::size_t k,
                   std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      Acc acc = 0;
      for (std::size_t p = 0; p < k; ++p) acc += Acc(a[i * k + p]) * Acc(b[j * k + p]);
      c[i * n + j] += T(acc);
    }
  }
}

// c[m,n] += a[k,m]^T * b[k,n]
template <class T>
void matmul_tn_acc(std::span<const T> a, std::span<const T> b, std::span<T> c, std::size_t m, std::size_t k,
                   std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      Acc acc = 0;
      for (std::size_t p = 0; p < k; ++p) acc += Acc(a[p * m + i]) * Acc(b[p * n + j]);
      c[i * n + j] += T(acc);
    }
  }
}

// 3x3, stride 1, zero padding 1.
template <class T>
void conv3x3_forward(const ConvDims& d, std::span<const T> input, std::span<const T> kernels, std::span<const T> bias,
                     std::span<T> out) {
  const std::size_t H = d.height, W = d.width, C = d.in_channels, F = d.out_channels;
  for (std::size_t n = 0; n < d.batch; ++n) {
    for (std::size_t f = 0; f < F; ++f) {
      for (std::size_t y = 0; y < H; ++y) {
        for (std::size_t x = 0; x < W; ++x) {
          Acc acc = Acc(bias[f]);
          for (std::size_t c = 0; c < C; ++c) {
            const T* plane = input.data() + (n * C + c) * H * W;
            const T* k = kernels.data() + (f * C + c) * 9;
            for (std::size_t ky = 0; ky < 3; ++ky) {
              const std::ptrdiff_t iy = std::ptrdiff_t(y + ky) - 1;
              if (iy < 0 || iy >= std::ptrdiff_t(H)) continue;
              for (std::size_t kx = 0; kx < 3; ++kx) {
                const std::ptrdiff_t ix = std::ptrdiff_t(x + kx) - 1;
                if (ix < 0 || ix >= std::ptrdiff_t(W)) continue;
                acc += Acc(plane[iy * W + ix]) * Acc(k[ky * 3 + kx]);
              }
            }
          }
          out[((n * F + f) * H + y) * W + x] = T(acc);
        }
      }
    }
  }
}

template <class T>
void conv3x3_backward_input(const ConvDims& d, std::span<const T> grad_out, std::span<const T> kernels,
                            std::span<T> grad_in) {
  const std::size_t H = d.height, W = d.width, C = d.in_channels, F = d.out_channels;
  for (std::size_t n = 0; n < d.batch; ++n) {
    for (std::size_t c = 0; c < C; ++c) {
      for (std::size_t y = 0; y < H; ++y) {
        for (std::size_t x = 0; x < W; ++x) {
          Acc acc = 0;
          for (std::size_t f = 0; f < F; ++f) {
            const T* g = grad_out.data() + (n * F + f) * H * W;
            const T* k = kernels.data() + (f * C + c) * 9;
            for (std::size_t ky = 0; ky < 3; ++ky) {
              const std::ptrdiff_t oy = std::ptrdiff_t(y) - std::ptrdiff_t(ky) + 1;
              if (oy < 0 || oy >= std::ptrdiff_t(H)) continue;
              for (std::size_t kx = 0; kx < 3; ++kx) {
                const std::ptrdiff_t ox = std::ptrdiff_t(x) - std::ptrdiff_t(kx) + 1;
                if (ox < 0 || ox >= std::ptrdiff_t(W)) continue;
                acc += Acc(g[oy * W + ox]) * Acc(k[ky * 3 + kx]);
              }
            }
          }
          grad_in[((n * C + c) * H + y) * W + x] += T(acc);
        }
      }
    }
  }
}

template <class T>
void conv3x3_backward_params(const ConvDims& d, std::span<const T> input, std::span<const T> grad_out,
                             std::span<T> grad_kernels, std::span<T> grad_bias) {
  const std::size_t H = d.height, W = d.width, C = d.in_channels, F = d.out_channels;
  for (std::size_t f = 0; f < F; ++f) {
    if (!grad_kernels.empty()) {
      for (std::size_t c = 0; c < C; ++c) {
        for (std::size_t ky = 0; ky < 3; ++ky) {
          for (std::size_t kx = 0; kx < 3; ++kx) {
            Acc acc = 0;
            for (std::size_t n = 0; n < d.batch; ++n) {
              const T* g = grad_out.data() + (n * F + f) * H * W;
              const T* plane = input.data() + (n * C + c) * H * W;
              for (std::size_t y = 0; y < H; ++y) {
                const std::ptrdiff_t iy = std::ptrdiff_t(y + ky) - 1;
                if (iy < 0 || iy >= std::ptrdiff_t(H)) continue;
                for (std::size_t x = 0; x < W; ++x) {
                  const std::ptrdiff_t ix = std::ptrdiff_t(x + kx) - 1;
                  if (ix < 0 || ix >= std::ptrdiff_t(W)) continue;
                  acc += Acc(g[y * W + x]) * Acc(plane[iy * W + ix]);
                }
              }
            }
            grad_kernels[(f * C + c) * 9 + ky * 3 + kx] += T(acc);
          }
        }
      }
    }
    if (!grad_bias.empty()) {
      Acc acc = 0;
      for (std::size_t n = 0; n < d.batch; ++n) {
        const T* g = grad_out.data() + (n * F + f) * H * W;
        for (std::size_t i = 0; i < H * W; ++i) acc += Acc(g[i]);
      }
      grad_bias[f] += T(acc);
    }
  }
}

}  // namespace serial

namespace parallel {

template <class T>
void matmul(std::span<const T> a, std::span<const T> b, std::span<T> c, std::size_t m, std::size_t k, std::size_t n) {
  const std::ptrdiff_t rows = std::ptrdiff_t(m);
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t ii = 0; ii < rows; ++ii) {
    const std::size_t i = std::size_t(ii);
    const T* arow = a.data() + i * k;
    for (std::size_t j = 0; j < n; ++j) {
      Acc acc = 0;
      for (std::size_t p = 0; p < k; ++p) acc += Acc(arow[p]) * Acc(b[p * n + j]);
      c[i * n + j] = T(acc);
    }
  }
}

template <class T>
void matmul_nt_acc(std::span<const T> a, std::span<const T> b, std::span<T> c, std::size_t m, std::size_t k,
                   std::size_t n) {
  const std::ptrdiff_t rows = std::ptrdiff_t(m);
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t ii = 0; ii < rows; ++ii) {
    const std::size_t i = std::size_t(ii);
    const T* arow = a.data() + i * k;
    for (std::size_t j = 0; j < n; ++j) {
      const T* brow = b.data() + j * k;
      Acc acc = 0;
      for (std::size_t p = 0; p < k; ++p) acc += Acc(arow[p]) * Acc(brow[p]);
      c[i * n + j] += T(acc);
    }
  }
}

template <class T>
void matmul_tn_acc(std::span<const T> a, std::span<const T> b, std::span<T> c, std::size_t m, std::size_t k,
                   std::size_t n) {
  const std::ptrdiff_t rows = std::ptrdiff_t(m);
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t ii = 0; ii < rows; ++ii) {
    const std::size_t i = std::size_t(ii);
    for (std::size_t j = 0; j < n; ++j) {
      Acc acc = 0;
      for (std::size_t p = 0; p < k; ++p) acc += Acc(a[p * m + i]) * Acc(b[p * n + j]);
      c[i * n + j] += T(acc);
    }
  }
}

template <class T>
void conv3x3_forward(const ConvDims& d, std::span<const T> input, std::span<const T> kernels, std::span<const T> bias,
                     std::span<T> out) {
  const std::size_t H = d.height, W = d.width, C = d.in_channels, F = d.out_channels;
  const std::ptrdiff_t planes = std::ptrdiff_t(d.batch * F);
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t nf = 0; nf < planes; ++nf) {
    const std::size_t n = std::size_t(nf) / F, f = std::size_t(nf) % F;
    T* dst = out.data() + (n * F + f) * H * W;
    for (std::size_t y = 0; y < H; ++y) {
      for (std::size_t x = 0; x < W; ++x) {
        Acc acc = Acc(bias[f]);
        for (std::size_t c = 0; c < C; ++c) {
          const T* plane = input.data() + (n * C + c) * H * W;
          const T* k = kernels.data() + (f * C + c) * 9;
          for (std::size_t ky = 0; ky < 3; ++ky) {
            const std::ptrdiff_t iy = std::ptrdiff_t(y + ky) - 1;
            if (iy < 0 || iy >= std::ptrdiff_t(H)) continue;
            for (std::size_t kx = 0; kx < 3; ++kx) {
              const std::ptrdiff_t ix = std::ptrdiff_t(x + kx) - 1;
              if (ix < 0 || ix >= std::ptrdiff_t(W)) continue;
              acc += Acc(plane[iy * W + ix]) * Acc(k[ky * 3 + kx]);
            }
          }
        }
        dst[y * W + x] = T(acc);
      }
    }
  }
}

template <class T>
void conv3x3_backward_input(const ConvDims& d, std::span<const T> grad_out, std::span<const T> kernels,
                            std::span<T> grad_in) {
  const std::size_t H = d.height, W = d.width, C = d.in_channels, F = d.out_channels;
  const std::ptrdiff_t planes = std::ptrdiff_t(d.batch * C);
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t nc = 0; nc < planes; ++nc) {
    const std::size_t n = std::size_t(nc) / C, c = std::size_t(nc) % C;
    T* dst = grad_in.data() + (n * C + c) * H * W;
    for (std::size_t y = 0; y < H; ++y) {
      for (std::size_t x = 0; x < W; ++x) {
        Acc acc = 0;
        for (std::size_t f = 0; f < F; ++f) {
          const T* g = grad_out.data() + (n * F + f) * H * W;
          const T* k = kernels.data() + (f * C + c) * 9;
          for (std::size_t ky = 0; ky < 3; ++ky) {
            const std::ptrdiff_t oy = std::ptrdiff_t(y) - std::ptrdiff_t(ky) + 1;
            if (oy < 0 || oy >= std::ptrdiff_t(H)) continue;
            for (std::size_t kx = 0; kx < 3; ++kx) {
              const std::ptrdiff_t ox = std::ptrdiff_t(x) - std::ptrdiff_t(kx) + 1;
              if (ox < 0 || ox >= std::ptrdiff_t(W)) continue;
              acc += Acc(g[oy * W + ox]) * Acc(k[ky * 3 + kx]);
            }
          }
        }
        dst[y * W + x] += T(acc);
      }
    }
  }
}

template <class T>
void conv3x3_backward_params(const ConvDims& d, std::span<const T> input, std::span<const T> grad_out,
                             std::span<T> grad_kernels, std::span<T> grad_bias) {
  const std::size_t H = d.height, W = d.width, C = d.in_channels, F = d.out_channels;
  const std::ptrdiff_t filters = std::ptrdiff_t(F);
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t ff = 0; ff < filters; ++ff) {
    const std::size_t f = std::size_t(ff);
    if (!grad_kernels.empty()) {
      for (std::size_t c = 0; c < C; ++c) {
        for (std::size_t ky = 0; ky < 3; ++ky) {
          for (std::size_t kx = 0; kx < 3; ++kx) {
            Acc acc = 0;
            for (std::size_t n = 0; n < d.batch; ++n) {
              const T* g = grad_out.data() + (n * F + f) * H * W;
              const T* plane = input.data() + (n * C + c) * H * W;
              for (std::size_t y = 0; y < H; ++y) {
                const std::ptrdiff_t iy = std::ptrdiff_t(y + ky) - 1;
                if (iy < 0 || iy >= std::ptrdiff_t(H)) continue;
                for (std::size_t x = 0; x < W; ++x) {
                  const std::ptrdiff_t ix = std::ptrdiff_t(x + kx) - 1;
                  if (ix < 0 || ix >= std::ptrdiff_t(W)) continue;
                  acc += Acc(g[y * W + x]) * Acc(plane[iy * W + ix]);
                }
              }
            }
            grad_kernels[(f * C + c) * 9 + ky * 3 + kx] += T(acc);
          }
        }
      }
    }
    if (!grad_bias.empty()) {
      Acc acc = 0;
      for (std::size_t n = 0; n < d.batch; ++n) {
        const T* g = grad_out.data() + (n * F + f) * H * W;
        for (std::size_t i = 0; i < H * W; ++i) acc += Acc(g[i]);
      }
      grad_bias[f] += T(acc);
    }
  }
}

}  // namespace parallel

// Below this many multiply-adds the thread fork costs more than it saves.
inline constexpr std::size_t kParallelThreshold = 1 << 14;

template <class T>
void matmul(std::span<const T> a, std::span<const T> b, std::span<T> c, std::size_t m, std::size_t k, std::size_t n) {
  if (m * k * n >= kParallelThreshold && max_threads() > 1) return parallel::matmul(a, b, c, m, k, n);
  serial::matmul(a, b, c, m, k, n);
}

template <class T>
void matmul_nt_acc(std::span<const T> a, std::span<const T> b, std::span<T> c, std::size_t m, std::size_t k,
                   std::size_t n) {
  if (m * k * n >= kParallelThreshold && max_threads() > 1) return parallel::matmul_nt_acc(a, b, c, m, k, n);
  serial::matmul_nt_acc(a, b, c, m, k, n);
}

template <class T>
void matmul_tn_acc(std::span<const T> a, std::span<const T> b, std::span<T> c, std::size_t m, std::size_t k,
                   std::size_t n) {
  if (m * k * n >= kParallelThreshold && max_threads() > 1) return parallel::matmul_tn_acc(a, b, c, m, k, n);
  serial::matmul_tn_acc(a, b, c, m, k, n);
}

inline std::size_t conv_work(const ConvDims& d) {
  return d.batch * d.in_channels * d.out_channels * d.height * d.width * 9;
}

template <class T>
void conv3x3_forward(const ConvDims& d, std::span<const T> input, std::span<const T> kernels, std::span<const T> bias,
                     std::span<T> out) {
  if (conv_work(d) >= kParallelThreshold && max_threads() > 1)
    return parallel::conv3x3_forward(d, input, kernels, bias, out);
  serial::conv3x3_forward(d, input, kernels, bias, out);
}

template <class T>
void conv3x3_backward_input(const ConvDims& d, std::span<const T> grad_out, std::span<const T> kernels,
                            std::span<T> grad_in) {
  if (conv_work(d) >= kParallelThreshold && max_threads() > 1)
    return parallel::conv3x3_backward_input(d, grad_out, kernels, grad_in);
  serial::conv3x3_backward_input(d, grad_out, kernels, grad_in);
}

template <class T>
void conv3x3_backward_params(const ConvDims& d, std::span<const T> input, std::span<const T> grad_out,
                             std::span<T> grad_kernels, std::span<T> grad_bias) {
  if (conv_work(d) >= kParallelThreshold && max_threads() > 1)
    return parallel::conv3x3_backward_params(d, input, grad_out, grad_kernels, grad_bias);
  serial::conv3x3_backward_params(d, input, grad_out, grad_kernels, grad_bias);
}

}  // namespace affkit::numkit::kernels
