#pragma once

// Differentiable operations. Every op takes the tape it records onto; when
// none of its inputs is tracked the result is a plain constant and nothing is
// recorded, so the same code path serves training and inference.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "affkit/numkit/kernels.hpp"
#include "affkit/numkit/tape.hpp"
#include "affkit/numkit/tensor.hpp"

namespace affkit::numkit {

using kernels::Acc;

enum class Elementwise { add, sub, mul, div, neg, scale };
enum class Activation { relu, tanh, sigmoid, softmax_rows };
enum class Reduction { sum, mean, mean_columns };
enum class Pool { none, avg2 };

namespace detail {

inline void require(bool ok, const std::string& message) {
  if (!ok) throw ValidationError(message);
}

template <class T>
void require_rank(const Tensor<T>& t, std::size_t rank, const char* op) {
  require(t.rank() == rank, std::string(op) + ": expected rank " + std::to_string(rank) + ", got shape " +
                                to_string(t.shape()));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise

/// `b` must have a's shape or hold a single value (scalar broadcast only).
/// Division records x/0 as-is; non-finite values surface downstream.
template <class T>
Tensor<T> elementwise(Tape<T>& tape, Elementwise kind, const Tensor<T>& a, const Tensor<T>& b) {
  if (kind == Elementwise::neg) {
    std::vector<T> out(a.size());
    auto av = a.values();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = -av[i];
    return tape.record(a.shape(), std::move(out), {a}, [](std::span<const T> g, auto& gin) {
      if (gin[0].empty()) return;
      for (std::size_t i = 0; i < g.size(); ++i) gin[0][i] -= g[i];
    });
  }
  const bool broadcast = a.shape() != b.shape();
  if (broadcast && b.size() != 1) {
    throw ValidationError("elementwise shape mismatch: " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  }
  auto av = a.values();
  auto bv = b.values();
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const T x = av[i];
    const T y = broadcast ? bv[0] : bv[i];
    switch (kind) {
      case Elementwise::add: out[i] = x + y; break;
      case Elementwise::sub: out[i] = x - y; break;
      case Elementwise::mul:
      case Elementwise::scale: out[i] = x * y; break;
      case Elementwise::div: out[i] = x / y; break;
      case Elementwise::neg: break;
    }
  }
  return tape.record(a.shape(), std::move(out), {a, b}, [a, b, kind, broadcast](std::span<const T> g, auto& gin) {
    auto av = a.values();
    auto bv = b.values();
    auto& ga = gin[0];
    auto& gb = gin[1];
    Acc gb_sum = 0;
    for (std::size_t i = 0; i < g.size(); ++i) {
      const T x = av[i];
      const T y = broadcast ? bv[0] : bv[i];
      T da = 0, db = 0;
      switch (kind) {
        case Elementwise::add: da = g[i]; db = g[i]; break;
        case Elementwise::sub: da = g[i]; db = -g[i]; break;
        case Elementwise::mul:
        case Elementwise::scale: da = g[i] * y; db = g[i] * x; break;
        case Elementwise::div: da = g[i] / y; db = -g[i] * x / (y * y); break;
        case Elementwise::neg: break;
      }
      if (!ga.empty()) ga[i] += da;
      if (!gb.empty()) {
        if (broadcast) gb_sum += Acc(db);
        else gb[i] += db;
      }
    }
    if (broadcast && !gb.empty()) gb[0] += T(gb_sum);
  });
}

template <class T>
Tensor<T> elementwise(Tape<T>& tape, Elementwise kind, const Tensor<T>& a, T b) {
  return elementwise(tape, kind, a, Tensor<T>::scalar(b));
}

template <class T> Tensor<T> add(Tape<T>& t, const Tensor<T>& a, const Tensor<T>& b) { return elementwise(t, Elementwise::add, a, b); }
template <class T> Tensor<T> sub(Tape<T>& t, const Tensor<T>& a, const Tensor<T>& b) { return elementwise(t, Elementwise::sub, a, b); }
template <class T> Tensor<T> mul(Tape<T>& t, const Tensor<T>& a, const Tensor<T>& b) { return elementwise(t, Elementwise::mul, a, b); }
template <class T> Tensor<T> div(Tape<T>& t, const Tensor<T>& a, const Tensor<T>& b) { return elementwise(t, Elementwise::div, a, b); }
template <class T> Tensor<T> neg(Tape<T>& t, const Tensor<T>& a) { return elementwise(t, Elementwise::neg, a, a); }
template <class T> Tensor<T> scale(Tape<T>& t, const Tensor<T>& a, T c) { return elementwise(t, Elementwise::scale, a, c); }
template <class T> Tensor<T> add_scalar(Tape<T>& t, const Tensor<T>& a, T c) { return elementwise(t, Elementwise::add, a, c); }

// ---------------------------------------------------------------------------
// Linear algebra

template <class T>
Tensor<T> matmul(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_rank(a, 2, "matmul");
  detail::require_rank(b, 2, "matmul");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw ValidationError("matmul inner dimension mismatch: " + to_string(a.shape()) + " x " + to_string(b.shape()));
  }
  std::vector<T> out(m * n);
  kernels::matmul<T>(a.values(), b.values(), out, m, k, n);
  return tape.record({m, n}, std::move(out), {a, b}, [a, b, m, k, n](std::span<const T> g, auto& gin) {
    if (!gin[0].empty()) kernels::matmul_nt_acc<T>(g, b.values(), gin[0], m, n, k);
    if (!gin[1].empty()) kernels::matmul_tn_acc<T>(a.values(), g, gin[1], k, m, n);
  });
}

/// x[N,in] * w[in,out] + bias[out], the bias added to every row.
template <class T>
Tensor<T> linear(Tape<T>& tape, const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias) {
  detail::require_rank(x, 2, "linear");
  detail::require_rank(w, 2, "linear");
  detail::require_rank(bias, 1, "linear");
  const std::size_t rows = x.dim(0), in = x.dim(1), out_dim = w.dim(1);
  detail::require(w.dim(0) == in && bias.dim(0) == out_dim,
                  "linear shape mismatch: x " + to_string(x.shape()) + ", w " + to_string(w.shape()) + ", bias " +
                      to_string(bias.shape()));
  std::vector<T> out(rows * out_dim);
  kernels::matmul<T>(x.values(), w.values(), out, rows, in, out_dim);
  auto bv = bias.values();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < out_dim; ++j) out[r * out_dim + j] += bv[j];
  return tape.record({rows, out_dim}, std::move(out), {x, w, bias},
                     [x, w, rows, in, out_dim](std::span<const T> g, auto& gin) {
                       if (!gin[0].empty()) kernels::matmul_nt_acc<T>(g, w.values(), gin[0], rows, out_dim, in);
                       if (!gin[1].empty()) kernels::matmul_tn_acc<T>(x.values(), g, gin[1], in, rows, out_dim);
                       if (!gin[2].empty()) {
                         for (std::size_t j = 0; j < out_dim; ++j) {
                           Acc acc = 0;
                           for (std::size_t r = 0; r < rows; ++r) acc += Acc(g[r * out_dim + j]);
                           gin[2][j] += T(acc);
                         }
                       }
                     });
}

// ---------------------------------------------------------------------------
// Convolution and pooling

/// 3x3 kernels, stride 1, zero padding 1: spatial size is preserved.
template <class T>
Tensor<T> conv2d(Tape<T>& tape, const Tensor<T>& input, const Tensor<T>& kernels_t, const Tensor<T>& bias) {
  detail::require_rank(input, 4, "conv2d");
  detail::require_rank(kernels_t, 4, "conv2d");
  detail::require_rank(bias, 1, "conv2d");
  kernels::ConvDims d{input.dim(0), input.dim(1), kernels_t.dim(0), input.dim(2), input.dim(3)};
  detail::require(kernels_t.dim(1) == d.in_channels && kernels_t.dim(2) == 3 && kernels_t.dim(3) == 3,
                  "conv2d kernels must be [F," + std::to_string(d.in_channels) + ",3,3], got " +
                      to_string(kernels_t.shape()));
  detail::require(bias.dim(0) == d.out_channels, "conv2d bias must be [F], got " + to_string(bias.shape()));
  detail::require(d.height >= 3 && d.width >= 3, "conv2d needs H,W >= 3, got " + to_string(input.shape()));
  std::vector<T> out(d.batch * d.out_channels * d.height * d.width);
  kernels::conv3x3_forward<T>(d, input.values(), kernels_t.values(), bias.values(), out);
  return tape.record({d.batch, d.out_channels, d.height, d.width}, std::move(out), {input, kernels_t, bias},
                     [input, kernels_t, d](std::span<const T> g, auto& gin) {
                       if (!gin[0].empty()) kernels::conv3x3_backward_input<T>(d, g, kernels_t.values(), gin[0]);
                       if (!gin[1].empty() || !gin[2].empty())
                         kernels::conv3x3_backward_params<T>(d, input.values(), g, gin[1], gin[2]);
                     });
}

/// 2x2 average pooling; H and W must be even.
template <class T>
Tensor<T> avg_pool2(Tape<T>& tape, const Tensor<T>& input) {
  detail::require_rank(input, 4, "avg_pool2");
  const std::size_t N = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
  detail::require(H % 2 == 0 && W % 2 == 0, "avg_pool2 needs even H and W, got " + to_string(input.shape()));
  const std::size_t Ho = H / 2, Wo = W / 2;
  std::vector<T> out(N * C * Ho * Wo);
  auto in = input.values();
  for (std::size_t p = 0; p < N * C; ++p) {
    const T* src = in.data() + p * H * W;
    T* dst = out.data() + p * Ho * Wo;
    for (std::size_t y = 0; y < Ho; ++y)
      for (std::size_t x = 0; x < Wo; ++x) {
        const Acc s = Acc(src[2 * y * W + 2 * x]) + Acc(src[2 * y * W + 2 * x + 1]) +
                      Acc(src[(2 * y + 1) * W + 2 * x]) + Acc(src[(2 * y + 1) * W + 2 * x + 1]);
        dst[y * Wo + x] = T(0.25 * s);
      }
  }
  return tape.record({N, C, Ho, Wo}, std::move(out), {input}, [N, C, H, W](std::span<const T> g, auto& gin) {
    if (gin[0].empty()) return;
    const std::size_t Ho = H / 2, Wo = W / 2;
    for (std::size_t p = 0; p < N * C; ++p)
      for (std::size_t y = 0; y < H; ++y)
        for (std::size_t x = 0; x < W; ++x)
          gin[0][p * H * W + y * W + x] += T(0.25) * g[p * Ho * Wo + (y / 2) * Wo + x / 2];
  });
}

template <class T>
Tensor<T> conv2d_pool(Tape<T>& tape, const Tensor<T>& input, const Tensor<T>& kernels_t, const Tensor<T>& bias,
                      Pool pool) {
  if (pool == Pool::avg2) {
    detail::require(input.rank() == 4 && input.dim(2) % 2 == 0 && input.dim(3) % 2 == 0,
                    "conv2d_pool with avg2 needs even H and W, got " + to_string(input.shape()));
  }
  auto out = conv2d(tape, input, kernels_t, bias);
  return pool == Pool::avg2 ? avg_pool2(tape, out) : out;
}

// ---------------------------------------------------------------------------
// Activations

/// Saturated sigmoid/tanh outputs are held one rounding step inside the open
/// interval, so (0,1) and (-1,1) hold for any finite input.
template <class T>
Tensor<T> activation(Tape<T>& tape, Activation kind, const Tensor<T>& x) {
  auto xv = x.values();
  std::vector<T> out(x.size());
  constexpr T upper = T(1) - std::numeric_limits<T>::epsilon() / 2;
  constexpr T lower = std::numeric_limits<T>::min();
  switch (kind) {
    case Activation::relu:
      for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[i] > T(0) ? xv[i] : T(0);
      break;
    case Activation::tanh:
      for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::clamp(T(std::tanh(xv[i])), -upper, upper);
      break;
    case Activation::sigmoid:
      for (std::size_t i = 0; i < out.size(); ++i) {
        const Acc v = Acc(xv[i]);
        const Acc s = v >= 0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
        out[i] = std::clamp(T(s), lower, upper);
      }
      break;
    case Activation::softmax_rows: {
      detail::require_rank(x, 2, "softmax_rows");
      const std::size_t rows = x.dim(0), cols = x.dim(1);
      for (std::size_t r = 0; r < rows; ++r) {
        const T* src = xv.data() + r * cols;
        const T mx = *std::max_element(src, src + cols);
        Acc total = 0;
        std::vector<Acc> e(cols);
        for (std::size_t c = 0; c < cols; ++c) {
          e[c] = std::exp(Acc(src[c]) - Acc(mx));
          total += e[c];
        }
        for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] = T(e[c] / total);
      }
      break;
    }
  }
  Tensor<T> y_holder(x.shape(), out);
  return tape.record(x.shape(), std::move(out), {x}, [x, y_holder, kind](std::span<const T> g, auto& gin) {
    if (gin[0].empty()) return;
    auto xv = x.values();
    auto yv = y_holder.values();
    auto& gx = gin[0];
    switch (kind) {
      case Activation::relu:
        for (std::size_t i = 0; i < g.size(); ++i)
          if (xv[i] > T(0)) gx[i] += g[i];
        break;
      case Activation::tanh:
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * (T(1) - yv[i] * yv[i]);
        break;
      case Activation::sigmoid:
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * yv[i] * (T(1) - yv[i]);
        break;
      case Activation::softmax_rows: {
        const std::size_t rows = x.dim(0), cols = x.dim(1);
        for (std::size_t r = 0; r < rows; ++r) {
          Acc dot = 0;
          for (std::size_t c = 0; c < cols; ++c) dot += Acc(g[r * cols + c]) * Acc(yv[r * cols + c]);
          for (std::size_t c = 0; c < cols; ++c)
            gx[r * cols + c] += T(Acc(yv[r * cols + c]) * (Acc(g[r * cols + c]) - dot));
        }
        break;
      }
    }
  });
}

template <class T> Tensor<T> relu(Tape<T>& t, const Tensor<T>& x) { return activation(t, Activation::relu, x); }
template <class T> Tensor<T> tanh(Tape<T>& t, const Tensor<T>& x) { return activation(t, Activation::tanh, x); }
template <class T> Tensor<T> sigmoid(Tape<T>& t, const Tensor<T>& x) { return activation(t, Activation::sigmoid, x); }
template <class T> Tensor<T> softmax_rows(Tape<T>& t, const Tensor<T>& x) { return activation(t, Activation::softmax_rows, x); }

// ---------------------------------------------------------------------------
// Reductions (64-bit accumulation)

template <class T>
Tensor<T> reduce(Tape<T>& tape, Reduction kind, const Tensor<T>& x) {
  detail::require(x.size() > 0, "reduction of empty tensor " + to_string(x.shape()));
  auto xv = x.values();
  if (kind == Reduction::mean_columns) {
    detail::require_rank(x, 2, "mean_columns");
    const std::size_t rows = x.dim(0), cols = x.dim(1);
    std::vector<T> out(cols);
    for (std::size_t c = 0; c < cols; ++c) {
      Acc acc = 0;
      for (std::size_t r = 0; r < rows; ++r) acc += Acc(xv[r * cols + c]);
      out[c] = T(acc / Acc(rows));
    }
    return tape.record({cols}, std::move(out), {x}, [rows, cols](std::span<const T> g, auto& gin) {
      if (gin[0].empty()) return;
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c) gin[0][r * cols + c] += T(Acc(g[c]) / Acc(rows));
    });
  }
  Acc acc = 0;
  for (T v : xv) acc += Acc(v);
  const std::size_t n = x.size();
  const bool is_mean = kind == Reduction::mean;
  if (is_mean) acc /= Acc(n);
  return tape.record({}, {T(acc)}, {x}, [n, is_mean](std::span<const T> g, auto& gin) {
    if (gin[0].empty()) return;
    const T d = is_mean ? T(Acc(g[0]) / Acc(n)) : g[0];
    for (std::size_t i = 0; i < n; ++i) gin[0][i] += d;
  });
}

template <class T> Tensor<T> sum(Tape<T>& t, const Tensor<T>& x) { return reduce(t, Reduction::sum, x); }
template <class T> Tensor<T> mean(Tape<T>& t, const Tensor<T>& x) { return reduce(t, Reduction::mean, x); }
template <class T> Tensor<T> mean_columns(Tape<T>& t, const Tensor<T>& x) { return reduce(t, Reduction::mean_columns, x); }

// ---------------------------------------------------------------------------
// Shape and selection

/// log(max(x, floor)); the gradient is zero where the floor is active.
template <class T>
Tensor<T> log_clamped(Tape<T>& tape, const Tensor<T>& x, double floor) {
  auto xv = x.values();
  std::vector<T> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = T(std::log(std::max(Acc(xv[i]), floor)));
  return tape.record(x.shape(), std::move(out), {x}, [x, floor](std::span<const T> g, auto& gin) {
    if (gin[0].empty()) return;
    auto xv = x.values();
    for (std::size_t i = 0; i < g.size(); ++i)
      if (Acc(xv[i]) > floor) gin[0][i] += g[i] / xv[i];
  });
}

template <class T>
Tensor<T> reshape(Tape<T>& tape, const Tensor<T>& x, Shape shape) {
  detail::require(numel(shape) == x.size(),
                  "reshape " + to_string(x.shape()) + " -> " + to_string(shape) + " changes the element count");
  auto xv = x.values();
  return tape.record(std::move(shape), std::vector<T>(xv.begin(), xv.end()), {x},
                     [](std::span<const T> g, auto& gin) {
                       if (gin[0].empty()) return;
                       for (std::size_t i = 0; i < g.size(); ++i) gin[0][i] += g[i];
                     });
}

/// Rows of x (along axis 0) in the order given; repeats are allowed.
template <class T>
Tensor<T> gather_rows(Tape<T>& tape, const Tensor<T>& x, std::span<const std::size_t> rows) {
  detail::require(x.rank() >= 1, "gather_rows needs rank >= 1");
  const std::size_t n = x.dim(0);
  const std::size_t row = n == 0 ? 0 : x.size() / n;
  for (std::size_t r : rows) detail::require(r < n, "gather_rows index " + std::to_string(r) + " out of range");
  Shape shape = x.shape();
  shape[0] = rows.size();
  auto xv = x.values();
  std::vector<T> out(rows.size() * row);
  for (std::size_t i = 0; i < rows.size(); ++i)
    std::copy_n(xv.data() + rows[i] * row, row, out.data() + i * row);
  std::vector<std::size_t> idx(rows.begin(), rows.end());
  return tape.record(std::move(shape), std::move(out), {x}, [idx, row](std::span<const T> g, auto& gin) {
    if (gin[0].empty()) return;
    for (std::size_t i = 0; i < idx.size(); ++i)
      for (std::size_t k = 0; k < row; ++k) gin[0][idx[i] * row + k] += g[i * row + k];
  });
}

/// Column j of a rank-2 tensor, as a rank-1 tensor.
template <class T>
Tensor<T> select_column(Tape<T>& tape, const Tensor<T>& x, std::size_t column) {
  detail::require_rank(x, 2, "select_column");
  const std::size_t rows = x.dim(0), cols = x.dim(1);
  detail::require(column < cols, "select_column index out of range");
  auto xv = x.values();
  std::vector<T> out(rows);
  for (std::size_t r = 0; r < rows; ++r) out[r] = xv[r * cols + column];
  return tape.record({rows}, std::move(out), {x}, [rows, cols, column](std::span<const T> g, auto& gin) {
    if (gin[0].empty()) return;
    for (std::size_t r = 0; r < rows; ++r) gin[0][r * cols + column] += g[r];
  });
}

/// Row-wise argmax, lowest index on ties.
template <class T>
std::vector<int> argmax_rows(const Tensor<T>& x) {
  detail::require_rank(x, 2, "argmax_rows");
  const std::size_t rows = x.dim(0), cols = x.dim(1);
  std::vector<int> out(rows, 0);
  auto xv = x.values();
  for (std::size_t r = 0; r < rows; ++r) {
    std::size_t best = 0;
    for (std::size_t c = 1; c < cols; ++c)
      if (xv[r * cols + c] > xv[r * cols + best]) best = c;
    out[r] = int(best);
  }
  return out;
}

}  // namespace affkit::numkit
