#pragma once

#include <cstddef>
#include <cstdint>
#include <span>

// Numeric kernels behind the autodiff ops.
//
// `reference` holds direct serial loops that mirror the defining sums; they
// exist for testing and benchmarking. `parallel` holds the OpenMP kernels the
// library actually runs (register-blocked GEMM over shifted rows of a
// zero-bordered copy of the input, no im2col buffer).
// Both namespaces expose identical signatures. Output buffers are
// overwritten, never accumulated into, unless the name says otherwise.
namespace dcal::kernels {

// 3x3 convolution, zero padding 1, stride 1, NCHW layout.
struct ConvShape {
  std::size_t batch = 0;
  std::size_t in_channels = 0;
  std::size_t out_channels = 0;
  std::size_t height = 0;
  std::size_t width = 0;

  std::size_t input_size() const { return batch * in_channels * height * width; }
  std::size_t output_size() const { return batch * out_channels * height * width; }
  std::size_t kernel_size() const { return out_channels * in_channels * 9; }
};

// Per-example affine maps around a convolution: the input is multiplied by
// in_scale[n*C + c], the convolution output by out_scale[n*O + o], then
// bias[n*O + o] is added and an optional ReLU applied. Null pointers skip the
// step, so a plain convolution is the all-null case.
struct ConvScaling {
  const double* in_scale = nullptr;
  const double* out_scale = nullptr;
  const double* bias = nullptr;
  bool relu = false;
};

// Fully connected: y[rows,out] = x[rows,in] * w[out,in]^T.
struct DenseShape {
  std::size_t rows = 0;
  std::size_t in = 0;
  std::size_t out = 0;
};

namespace reference {

void conv3x3_forward(const ConvShape& s, std::span<const double> x, std::span<const double> k,
                     std::span<double> y);
void conv3x3_backward_input(const ConvShape& s, std::span<const double> dy, std::span<const double> k,
                            std::span<double> dx);
void conv3x3_backward_kernel(const ConvShape& s, std::span<const double> x, std::span<const double> dy,
                             std::span<double> dk);
// y per `scaling`. If non-null, `pre` receives the convolution output before
// out_scale/bias/ReLU and `active` the ReLU mask (1 where the output is kept).
void conv3x3_forward_scaled(const ConvShape& s, std::span<const double> x, std::span<const double> k,
                            const ConvScaling& scaling, std::span<double> y, double* pre, std::uint8_t* active);
// Kernel gradient of conv(x o in_scale).
void conv3x3_backward_kernel_scaled(const ConvShape& s, std::span<const double> x, const double* in_scale,
                                    std::span<const double> dy, std::span<double> dk);

void dense_forward(const DenseShape& s, std::span<const double> x, std::span<const double> w,
                   std::span<double> y);
void dense_backward_input(const DenseShape& s, std::span<const double> dy, std::span<const double> w,
                          std::span<double> dx);
void dense_backward_weight(const DenseShape& s, std::span<const double> x, std::span<const double> dy,
                           std::span<double> dw);

// c[m,n] = a[m,k] * b[k,n]
void matmul(std::size_t m, std::size_t k, std::size_t n, std::span<const double> a,
            std::span<const double> b, std::span<double> c);

}  // namespace reference

namespace parallel {

void conv3x3_forward(const ConvShape& s, std::span<const double> x, std::span<const double> k,
                     std::span<double> y);
void conv3x3_backward_input(const ConvShape& s, std::span<const double> dy, std::span<const double> k,
                            std::span<double> dx);
void conv3x3_backward_kernel(const ConvShape& s, std::span<const double> x, std::span<const double> dy,
                             std::span<double> dk);
// y per `scaling`. If non-null, `pre` receives the convolution output before
// out_scale/bias/ReLU and `active` the ReLU mask (1 where the output is kept).
void conv3x3_forward_scaled(const ConvShape& s, std::span<const double> x, std::span<const double> k,
                            const ConvScaling& scaling, std::span<double> y, double* pre, std::uint8_t* active);
// Kernel gradient of conv(x o in_scale).
void conv3x3_backward_kernel_scaled(const ConvShape& s, std::span<const double> x, const double* in_scale,
                                    std::span<const double> dy, std::span<double> dk);

void dense_forward(const DenseShape& s, std::span<const double> x, std::span<const double> w,
                   std::span<double> y);
void dense_backward_input(const DenseShape& s, std::span<const double> dy, std::span<const double> w,
                          std::span<double> dx);
void dense_backward_weight(const DenseShape& s, std::span<const double> x, std::span<const double> dy,
                           std::span<double> dw);

void matmul(std::size_t m, std::size_t k, std::size_t n, std::span<const double> a,
            std::span<const double> b, std::span<double> c);

}  // namespace parallel

// Serial row-major GEMM: c = a*b, or c += a*b when `accumulate`.
// Leading dimensions equal the logical widths.
void gemm(std::size_t m, std::size_t k, std::size_t n, const double* a, const double* b, double* c,
          bool accumulate);

// Number of OpenMP threads the parallel kernels will use.
int max_threads();
// Sets the OpenMP thread count; values < 1 select all available processors.
int set_threads(int threads);

}  // namespace dcal::kernels
