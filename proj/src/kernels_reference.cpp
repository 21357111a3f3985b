#include "dcal/kernels.hpp"

#include <vector>

namespace dcal::kernels::reference {

void conv3x3_forward(const ConvShape& s, std::span<const double> x, std::span<const double> k,
                     std::span<double> y) {
  const std::size_t H = s.height, W = s.width, C = s.in_channels, O = s.out_channels;
  for (std::size_t n = 0; n < s.batch; ++n) {
    for (std::size_t o = 0; o < O; ++o) {
      for (std::size_t i = 0; i < H; ++i) {
        for (std::size_t j = 0; j < W; ++j) {
          double acc = 0.0;
          for (std::size_t c = 0; c < C; ++c) {
            for (std::size_t di = 0; di < 3; ++di) {
              for (std::size_t dj = 0; dj < 3; ++dj) {
                const std::ptrdiff_t yi = static_cast<std::ptrdiff_t>(i + di) - 1;
                const std::ptrdiff_t xj = static_cast<std::ptrdiff_t>(j + dj) - 1;
                if (yi < 0 || xj < 0 || yi >= static_cast<std::ptrdiff_t>(H) ||
                    xj >= static_cast<std::ptrdiff_t>(W)) {
                  continue;
                }
                acc += k[((o * C + c) * 3 + di) * 3 + dj] * x[((n * C + c) * H + yi) * W + xj];
              }
            }
          }
          y[((n * O + o) * H + i) * W + j] = acc;
        }
      }
    }
  }
}

void conv3x3_backward_input(const ConvShape& s, std::span<const double> dy, std::span<const double> k,
                            std::span<double> dx) {
  const std::size_t H = s.height, W = s.width, C = s.in_channels, O = s.out_channels;
  for (auto& v : dx) v = 0.0;
  for (std::size_t n = 0; n < s.batch; ++n) {
    for (std::size_t o = 0; o < O; ++o) {
      for (std::size_t i = 0; i < H; ++i) {
        for (std::size_t j = 0; j < W; ++j) {
          const double g = dy[((n * O + o) * H + i) * W + j];
          for (std::size_t c = 0; c < C; ++c) {
            for (std::size_t di = 0; di < 3; ++di) {
              for (std::size_t dj = 0; dj < 3; ++dj) {
                const std::ptrdiff_t yi = static_cast<std::ptrdiff_t>(i + di) - 1;
                const std::ptrdiff_t xj = static_cast<std::ptrdiff_t>(j + dj) - 1;
                if (yi < 0 || xj < 0 || yi >= static_cast<std::ptrdiff_t>(H) ||
                    xj >= static_cast<std::ptrdiff_t>(W)) {
                  continue;
                }
                dx[((n * C + c) * H + yi) * W + xj] += g * k[((o * C + c) * 3 + di) * 3 + dj];
              }
            }
          }
        }
      }
    }
  }
}

void conv3x3_backward_kernel(const ConvShape& s, std::span<const double> x, std::span<const double> dy,
                             std::span<double> dk) {
  const std::size_t H = s.height, W = s.width, C = s.in_channels, O = s.out_channels;
  for (auto& v : dk) v = 0.0;
  for (std::size_t n = 0; n < s.batch; ++n) {
    for (std::size_t o = 0; o < O; ++o) {
      for (std::size_t i = 0; i < H; ++i) {
        for (std::size_t j = 0; j < W; ++j) {
          const double g = dy[((n * O + o) * H + i) * W + j];
          for (std::size_t c = 0; c < C; ++c) {
            for (std::size_t di = 0; di < 3; ++di) {
              for (std::size_t dj = 0; dj < 3; ++dj) {
                const std::ptrdiff_t yi = static_cast<std::ptrdiff_t>(i + di) - 1;
                const std::ptrdiff_t xj = static_cast<std::ptrdiff_t>(j + dj) - 1;
                if (yi < 0 || xj < 0 || yi >= static_cast<std::ptrdiff_t>(H) ||
                    xj >= static_cast<std::ptrdiff_t>(W)) {
                  continue;
                }
                dk[((o * C + c) * 3 + di) * 3 + dj] += g * x[((n * C + c) * H + yi) * W + xj];
              }
            }
          }
        }
      }
    }
  }
}

namespace {

std::vector<double> scale_input(const ConvShape& s, std::span<const double> x, const double* in_scale) {
  std::vector<double> xs(x.begin(), x.end());
  if (!in_scale) return xs;
  const std::size_t plane = s.height * s.width;
  for (std::size_t nc = 0; nc < s.batch * s.in_channels; ++nc) {
    for (std::size_t p = 0; p < plane; ++p) xs[nc * plane + p] *= in_scale[nc];
  }
  return xs;
}

}  // namespace

void conv3x3_forward_scaled(const ConvShape& s, std::span<const double> x, std::span<const double> k,
                            const ConvScaling& scaling, std::span<double> y, double* pre, std::uint8_t* active) {
  const std::vector<double> xs = scale_input(s, x, scaling.in_scale);
  conv3x3_forward(s, xs, k, y);
  const std::size_t plane = s.height * s.width;
  for (std::size_t no = 0; no < s.batch * s.out_channels; ++no) {
    for (std::size_t p = 0; p < plane; ++p) {
      const std::size_t at = no * plane + p;
      double v = y[at];
      if (pre) pre[at] = v;
      if (scaling.out_scale) v *= scaling.out_scale[no];
      if (scaling.bias) v += scaling.bias[no];
      if (scaling.relu) {
        if (active) active[at] = v > 0.0;
        v = v > 0.0 ? v : 0.0;
      }
      y[at] = v;
    }
  }
}

void conv3x3_backward_kernel_scaled(const ConvShape& s, std::span<const double> x, const double* in_scale,
                                    std::span<const double> dy, std::span<double> dk) {
  conv3x3_backward_kernel(s, scale_input(s, x, in_scale), dy, dk);
}

void dense_forward(const DenseShape& s, std::span<const double> x, std::span<const double> w,
                   std::span<double> y) {
  for (std::size_t n = 0; n < s.rows; ++n) {
    for (std::size_t o = 0; o < s.out; ++o) {
      double acc = 0.0;
      for (std::size_t j = 0; j < s.in; ++j) acc += w[o * s.in + j] * x[n * s.in + j];
      y[n * s.out + o] = acc;
    }
  }
}

void dense_backward_input(const DenseShape& s, std::span<const double> dy, std::span<const double> w,
                          std::span<double> dx) {
  for (std::size_t n = 0; n < s.rows; ++n) {
    for (std::size_t j = 0; j < s.in; ++j) {
      double acc = 0.0;
      for (std::size_t o = 0; o < s.out; ++o) acc += dy[n * s.out + o] * w[o * s.in + j];
      dx[n * s.in + j] = acc;
    }
  }
}

void dense_backward_weight(const DenseShape& s, std::span<const double> x, std::span<const double> dy,
                           std::span<double> dw) {
  for (std::size_t o = 0; o < s.out; ++o) {
    for (std::size_t j = 0; j < s.in; ++j) {
      double acc = 0.0;
      for (std::size_t n = 0; n < s.rows; ++n) acc += dy[n * s.out + o] * x[n * s.in + j];
      dw[o * s.in + j] = acc;
    }
  }
}

void matmul(std::size_t m, std::size_t k, std::size_t n, std::span<const double> a,
            std::span<const double> b, std::span<double> c) {
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      double acc = 0.0;
      for (std::size_t p = 0; p < k; ++p) acc += a[i * k + p] * b[p * n + j];
      c[i * n + j] = acc;
    }
  }
}

}  // namespace dcal::kernels::reference
