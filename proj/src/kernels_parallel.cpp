#include <omp.h>

#include <algorithm>
#include <cstdint>
#include <vector>

#include "dcal/kernels.hpp"

namespace dcal::kernels {

namespace {

// acc[MR][NR] register tile over a K-long panel.
template <int MR, int NR, bool Accumulate>
inline void gemm_tile(std::size_t k, const double* __restrict a, std::size_t lda, const double* __restrict b,
                      std::size_t ldb, double* __restrict c, std::size_t ldc) {
  double acc[MR][NR] = {};
  for (std::size_t p = 0; p < k; ++p) {
    const double* brow = b + p * ldb;
    for (int r = 0; r < MR; ++r) {
      const double av = a[r * lda + p];
#pragma omp simd
      for (int j = 0; j < NR; ++j) acc[r][j] += av * brow[j];
    }
  }
  for (int r = 0; r < MR; ++r) {
    double* crow = c + r * ldc;
    for (int j = 0; j < NR; ++j) {
      if constexpr (Accumulate) {
        crow[j] += acc[r][j];
      } else {
        crow[j] = acc[r][j];
      }
    }
  }
}

template <int MR, bool Accumulate>
void gemm_rows(std::size_t k, std::size_t n, const double* a, const double* b, double* c) {
  std::size_t j = 0;
  for (; j + 32 <= n; j += 32) gemm_tile<MR, 32, Accumulate>(k, a, k, b + j, n, c + j, n);
  for (; j + 16 <= n; j += 16) gemm_tile<MR, 16, Accumulate>(k, a, k, b + j, n, c + j, n);
  for (; j + 8 <= n; j += 8) gemm_tile<MR, 8, Accumulate>(k, a, k, b + j, n, c + j, n);
  for (; j < n; ++j) gemm_tile<MR, 1, Accumulate>(k, a, k, b + j, n, c + j, n);
}

template <bool Accumulate>
void gemm_impl(std::size_t m, std::size_t k, std::size_t n, const double* a, const double* b, double* c) {
  std::size_t i = 0;
  for (; i + 4 <= m; i += 4) gemm_rows<4, Accumulate>(k, n, a + i * k, b, c + i * n);
  for (; i < m; ++i) gemm_rows<1, Accumulate>(k, n, a + i * k, b, c + i * n);
}

// A 3x3 "same" convolution reads x[c, i+di-1, j+dj-1]. On a zero-bordered
// plane of row pitch PW = W+2 that is pad[c, (i*PW + j) + di*PW + dj], so each
// (c, di, dj) contributes a contiguous row shifted by a fixed offset. Results
// are produced on an extended H x PW grid; the last two columns of each row
// are discarded.
struct PaddedPlanes {
  std::size_t channels = 0, height = 0, width = 0, pitch = 0, plane = 0;
  std::vector<double> data;         // channels * plane, plus 2 of slack read by discarded columns
  std::vector<const double*> rows;  // (c*9 + di*3 + dj) -> pad[c] + di*pitch + dj

  PaddedPlanes(std::size_t C, std::size_t H, std::size_t W)
      : channels(C), height(H), width(W), pitch(W + 2), plane((H + 2) * (W + 2)), data(C * plane + 2, 0.0),
        rows(C * 9) {
    for (std::size_t c = 0; c < C; ++c) {
      for (std::size_t t = 0; t < 9; ++t) rows[c * 9 + t] = data.data() + c * plane + (t / 3) * pitch + t % 3;
    }
  }
  std::size_t extended() const { return height * pitch; }
  // Borders stay zero: only interior cells are ever written. `scale`, if
  // given, multiplies channel c.
  void load(const double* x, const double* scale = nullptr) {
    for (std::size_t c = 0; c < channels; ++c) {
      for (std::size_t i = 0; i < height; ++i) {
        const double* src = x + (c * height + i) * width;
        double* dst = data.data() + c * plane + (i + 1) * pitch + 1;
        if (scale) {
          const double sc = scale[c];
          for (std::size_t j = 0; j < width; ++j) dst[j] = src[j] * sc;
        } else {
          std::copy_n(src, width, dst);
        }
      }
    }
  }
};

// c[r, j] (+)= sum_p a[r, p] * brows[p][j], j in [0, NR)
template <int MR, int NR>
inline void shifted_tile(std::size_t k, const double* __restrict a, std::size_t lda,
                         const double* const* __restrict brows, std::size_t col, double* __restrict c,
                         std::size_t ldc) {
  double acc[MR][NR] = {};
  for (std::size_t p = 0; p < k; ++p) {
    const double* brow = brows[p] + col;
    for (int r = 0; r < MR; ++r) {
      const double av = a[r * lda + p];
#pragma omp simd
      for (int j = 0; j < NR; ++j) acc[r][j] += av * brow[j];
    }
  }
  for (int r = 0; r < MR; ++r) {
    for (int j = 0; j < NR; ++j) c[r * ldc + j] = acc[r][j];
  }
}

template <int MR>
void shifted_rows(std::size_t k, std::size_t n, const double* a, const double* const* brows, double* c) {
  std::size_t j = 0;
  for (; j + 16 <= n; j += 16) shifted_tile<MR, 16>(k, a, k, brows, j, c + j, n);
  for (; j + 8 <= n; j += 8) shifted_tile<MR, 8>(k, a, k, brows, j, c + j, n);
  for (; j < n; ++j) shifted_tile<MR, 1>(k, a, k, brows, j, c + j, n);
}

// Per-example view of ConvScaling.
struct RowScaling {
  const double* out_scale = nullptr;
  const double* bias = nullptr;
  bool relu = false;
  double* pre = nullptr;
  std::uint8_t* active = nullptr;
};

// y[o, i, j] = sum_{c,t} k[o, c*9 + t] x[c, i+di-1, j+dj-1] for one example,
// then the output affine map and ReLU of `post`.
void conv_one(const PaddedPlanes& in, std::size_t out_channels, const double* k, double* ext, double* y,
              const RowScaling& post = {}) {
  const std::size_t K = in.channels * 9, N = in.extended();
  std::size_t o = 0;
  for (; o + 8 <= out_channels; o += 8) shifted_rows<8>(K, N, k + o * K, in.rows.data(), ext + o * N);
  for (; o + 4 <= out_channels; o += 4) shifted_rows<4>(K, N, k + o * K, in.rows.data(), ext + o * N);
  for (; o < out_channels; ++o) shifted_rows<1>(K, N, k + o * K, in.rows.data(), ext + o * N);
  const std::size_t H = in.height, W = in.width;
  for (std::size_t q = 0; q < out_channels; ++q) {
    const double rs = post.out_scale ? post.out_scale[q] : 1.0;
    const double b = post.bias ? post.bias[q] : 0.0;
    for (std::size_t i = 0; i < H; ++i) {
      const double* src = ext + q * N + i * in.pitch;
      const std::size_t at = (q * H + i) * W;
      if (post.pre) std::copy_n(src, W, post.pre + at);
      double* dst = y + at;
      if (post.out_scale) {
        for (std::size_t j = 0; j < W; ++j) dst[j] = src[j] * rs;
      } else {
        std::copy_n(src, W, dst);
      }
      if (post.bias) {
        for (std::size_t j = 0; j < W; ++j) dst[j] += b;
      }
      if (post.relu) {
        for (std::size_t j = 0; j < W; ++j) {
          if (post.active) post.active[at + j] = dst[j] > 0.0;
          dst[j] = dst[j] > 0.0 ? dst[j] : 0.0;
        }
      }
    }
  }
}

// c[r, j] += sum_p arows[r][p] * b[p, j]
template <int MR, int NR>
inline void rowptr_tile(std::size_t k, const double* const* __restrict arows, const double* __restrict b,
                        std::size_t ldb, double* __restrict c, std::size_t ldc) {
  double acc[MR][NR] = {};
  for (std::size_t p = 0; p < k; ++p) {
    const double* brow = b + p * ldb;
    for (int r = 0; r < MR; ++r) {
      const double av = arows[r][p];
#pragma omp simd
      for (int j = 0; j < NR; ++j) acc[r][j] += av * brow[j];
    }
  }
  for (int r = 0; r < MR; ++r) {
    for (int j = 0; j < NR; ++j) c[r * ldc + j] += acc[r][j];
  }
}

template <int MR>
void rowptr_rows(std::size_t k, std::size_t n, const double* const* arows, const double* b, double* c) {
  std::size_t j = 0;
  for (; j + 16 <= n; j += 16) rowptr_tile<MR, 16>(k, arows, b + j, n, c + j, n);
  for (; j + 8 <= n; j += 8) rowptr_tile<MR, 8>(k, arows, b + j, n, c + j, n);
  for (; j < n; ++j) rowptr_tile<MR, 1>(k, arows, b + j, n, c + j, n);
}

void transpose_into(const double* a, std::size_t rows, std::size_t cols, double* t) {
  for (std::size_t i = 0; i < rows; ++i) {
    for (std::size_t j = 0; j < cols; ++j) t[j * rows + i] = a[i * cols + j];
  }
}

std::vector<double> transpose(const double* a, std::size_t rows, std::size_t cols) {
  std::vector<double> t(rows * cols);
  for (std::size_t i = 0; i < rows; ++i) {
    for (std::size_t j = 0; j < cols; ++j) t[j * rows + i] = a[i * cols + j];
  }
  return t;
}

}  // namespace

void gemm(std::size_t m, std::size_t k, std::size_t n, const double* a, const double* b, double* c,
          bool accumulate) {
  if (k == 0) {
    if (!accumulate) std::fill(c, c + m * n, 0.0);
    return;
  }
  if (accumulate) {
    gemm_impl<true>(m, k, n, a, b, c);
  } else {
    gemm_impl<false>(m, k, n, a, b, c);
  }
}

int max_threads() { return omp_get_max_threads(); }

int set_threads(int threads) {
  if (threads < 1) threads = omp_get_num_procs();
  omp_set_num_threads(threads);
  return threads;
}

namespace parallel {

void conv3x3_forward_scaled(const ConvShape& s, std::span<const double> x, std::span<const double> k,
                            const ConvScaling& scaling, std::span<double> y, double* pre, std::uint8_t* active) {
  const std::size_t HW = s.height * s.width, C = s.in_channels, O = s.out_channels;
  const std::ptrdiff_t batch = static_cast<std::ptrdiff_t>(s.batch);
#pragma omp parallel
  {
    PaddedPlanes pad(C, s.height, s.width);
    std::vector<double> ext(O * pad.extended());
#pragma omp for schedule(static)
    for (std::ptrdiff_t n = 0; n < batch; ++n) {
      const auto un = static_cast<std::size_t>(n);
      pad.load(x.data() + un * C * HW, scaling.in_scale ? scaling.in_scale + un * C : nullptr);
      RowScaling post;
      post.out_scale = scaling.out_scale ? scaling.out_scale + un * O : nullptr;
      post.bias = scaling.bias ? scaling.bias + un * O : nullptr;
      post.relu = scaling.relu;
      post.pre = pre ? pre + un * O * HW : nullptr;
      post.active = active ? active + un * O * HW : nullptr;
      conv_one(pad, O, k.data(), ext.data(), y.data() + un * O * HW, post);
    }
  }
}

void conv3x3_forward(const ConvShape& s, std::span<const double> x, std::span<const double> k,
                     std::span<double> y) {
  conv3x3_forward_scaled(s, x, k, {}, y, nullptr, nullptr);
}

// The input gradient is a forward convolution of dy with the kernel flipped in
// space and transposed in channels: kf[c, o*9 + t] = k[o, c*9 + 8 - t].
void conv3x3_backward_input(const ConvShape& s, std::span<const double> dy, std::span<const double> k,
                            std::span<double> dx) {
  const std::size_t HW = s.height * s.width, C = s.in_channels, O = s.out_channels;
  std::vector<double> kf(k.size());
  for (std::size_t o = 0; o < O; ++o) {
    for (std::size_t c = 0; c < C; ++c) {
      for (std::size_t t = 0; t < 9; ++t) kf[c * O * 9 + o * 9 + t] = k[o * C * 9 + c * 9 + 8 - t];
    }
  }
  const std::ptrdiff_t batch = static_cast<std::ptrdiff_t>(s.batch);
#pragma omp parallel
  {
    PaddedPlanes pad(O, s.height, s.width);
    std::vector<double> ext(C * pad.extended());
#pragma omp for schedule(static)
    for (std::ptrdiff_t n = 0; n < batch; ++n) {
      pad.load(dy.data() + n * O * HW);
      conv_one(pad, C, kf.data(), ext.data(), dx.data() + n * C * HW);
    }
  }
}

void conv3x3_backward_kernel(const ConvShape& s, std::span<const double> x, std::span<const double> dy,
                             std::span<double> dk) {
  conv3x3_backward_kernel_scaled(s, x, nullptr, dy, dk);
}

void conv3x3_backward_kernel_scaled(const ConvShape& s, std::span<const double> x, const double* in_scale,
                                    std::span<const double> dy, std::span<double> dk) {
  const std::size_t HW = s.height * s.width, C = s.in_channels, O = s.out_channels, CK = C * 9;
  const std::size_t ksize = O * CK;
  const int threads = omp_get_max_threads();
  std::vector<std::vector<double>> partial(static_cast<std::size_t>(threads));
  const std::ptrdiff_t batch = static_cast<std::ptrdiff_t>(s.batch);
#pragma omp parallel num_threads(threads)
  {
    // dk^T [CK, O] += sum_p pad-row(c, t)[p] * dy_ext^T[p, o]
    auto& mine = partial[static_cast<std::size_t>(omp_get_thread_num())];
    mine.assign(ksize, 0.0);
    PaddedPlanes pad(C, s.height, s.width);
    const std::size_t N = pad.extended();
    std::vector<double> dyt(N * O, 0.0);  // discarded columns stay zero
#pragma omp for schedule(static)
    for (std::ptrdiff_t n = 0; n < batch; ++n) {
      pad.load(x.data() + n * C * HW, in_scale ? in_scale + n * C : nullptr);
      const double* g = dy.data() + n * O * HW;
      for (std::size_t o = 0; o < O; ++o) {
        for (std::size_t i = 0; i < s.height; ++i) {
          for (std::size_t j = 0; j < s.width; ++j) dyt[(i * pad.pitch + j) * O + o] = g[o * HW + i * s.width + j];
        }
      }
      std::size_t r = 0;
      for (; r + 8 <= CK; r += 8) rowptr_rows<8>(N, O, pad.rows.data() + r, dyt.data(), mine.data() + r * O);
      for (; r + 4 <= CK; r += 4) rowptr_rows<4>(N, O, pad.rows.data() + r, dyt.data(), mine.data() + r * O);
      for (; r < CK; ++r) rowptr_rows<1>(N, O, pad.rows.data() + r, dyt.data(), mine.data() + r * O);
    }
  }
  // fixed-order reduction keeps results independent of scheduling
  std::vector<double> dkt(ksize, 0.0);
  for (const auto& p : partial) {
    if (p.empty()) continue;
    for (std::size_t i = 0; i < ksize; ++i) dkt[i] += p[i];
  }
  transpose_into(dkt.data(), CK, O, dk.data());
}

void dense_forward(const DenseShape& s, std::span<const double> x, std::span<const double> w,
                   std::span<double> y) {
  const std::vector<double> wt = transpose(w.data(), s.out, s.in);
  const std::ptrdiff_t blocks = static_cast<std::ptrdiff_t>((s.rows + 63) / 64);
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t bi = 0; bi < blocks; ++bi) {
    const std::size_t r0 = static_cast<std::size_t>(bi) * 64;
    const std::size_t r1 = std::min(s.rows, r0 + 64);
    gemm(r1 - r0, s.in, s.out, x.data() + r0 * s.in, wt.data(), y.data() + r0 * s.out, false);
  }
}

void dense_backward_input(const DenseShape& s, std::span<const double> dy, std::span<const double> w,
                          std::span<double> dx) {
  const std::ptrdiff_t blocks = static_cast<std::ptrdiff_t>((s.rows + 63) / 64);
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t bi = 0; bi < blocks; ++bi) {
    const std::size_t r0 = static_cast<std::size_t>(bi) * 64;
    const std::size_t r1 = std::min(s.rows, r0 + 64);
    gemm(r1 - r0, s.out, s.in, dy.data() + r0 * s.out, w.data(), dx.data() + r0 * s.in, false);
  }
}

void dense_backward_weight(const DenseShape& s, std::span<const double> x, std::span<const double> dy,
                           std::span<double> dw) {
  const std::vector<double> dyt = transpose(dy.data(), s.rows, s.out);
  gemm(s.out, s.rows, s.in, dyt.data(), x.data(), dw.data(), false);
}

void matmul(std::size_t m, std::size_t k, std::size_t n, std::span<const double> a,
            std::span<const double> b, std::span<double> c) {
  const std::ptrdiff_t blocks = static_cast<std::ptrdiff_t>((m + 15) / 16);
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t bi = 0; bi < blocks; ++bi) {
    const std::size_t r0 = static_cast<std::size_t>(bi) * 16;
    const std::size_t r1 = std::min(m, r0 + 16);
    gemm(r1 - r0, k, n, a.data() + r0 * k, b.data(), c.data() + r0 * n, false);
  }
}

}  // namespace parallel

}  // namespace dcal::kernels
