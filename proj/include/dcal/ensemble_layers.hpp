#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "dcal/autodiff.hpp"
#include "dcal/rng.hpp"

namespace dcal {

/// Rank-1 adapted dense layer: member i uses W o (r_i s_i^T) plus bias b_i.
///
/// In single-model mode `r` and `s` are empty and `bias` has one row.
struct EnsembleLinear {
  Tensor weight;  // [out,in], shared
  Tensor r;       // [K,out]
  Tensor s;       // [K,in]
  Tensor bias;    // [K,out]

  bool adapted() const noexcept { return !r.empty(); }
  std::size_t members() const { return bias.dim(0); }
};

/// Channelwise rank-1 adapted 3x3 convolution: kernel[o,c,:,:] * r_i[o] * s_i[c].
struct EnsembleConv {
  Tensor kernel;  // [O,C,3,3], shared
  Tensor r;       // [K,O]
  Tensor s;       // [K,C]
  Tensor bias;    // [K,O]

  bool adapted() const noexcept { return !r.empty(); }
  std::size_t members() const { return bias.dim(0); }
};

struct AdapterPair {
  Tensor r;  // [K,out]
  Tensor s;  // [K,in]
};

/// Draws r then s, every element i.i.d. Normal(1, 0.5^2).
AdapterPair init_ensemble_params(std::size_t members, std::size_t out_dim, std::size_t in_dim, Rng& rng);

// Layer parameters bound to a tape.
struct LinearVars {
  Var weight, r, s, bias;
  bool adapted = false;
};
struct ConvVars {
  Var kernel, r, s, bias;
  bool adapted = false;
};

/// Row n with member i: r_i o (W (x_n o s_i)) + b_i.
Var be_dense_forward(Var x, const LinearVars& layer, std::span<const int> members);
/// Input channels scaled by s_i, shared convolution, output channels scaled by r_i, plus b_i,
/// then ReLU if `relu`.
Var be_conv_forward(Var x, const ConvVars& layer, std::span<const int> members, bool relu = false);

/// Member index of each row of a K-replicated batch: copy k occupies rows [kB, (k+1)B).
std::vector<int> replicated_members(std::size_t batch, std::size_t members);

/// Keep/drop decision per (row, residual block) with the row's drop probability.
struct DepthMask {
  std::size_t rows = 0;
  std::size_t blocks = 0;
  std::vector<std::uint8_t> keep;   // rows x blocks, row-major
  std::vector<double> drop_prob;    // per row

  bool kept(std::size_t row, std::size_t block) const { return keep[row * blocks + block] != 0; }
  /// Residual-branch multiplier: 0 when dropped, 1/(1-p) when kept.
  double factor(std::size_t row, std::size_t block) const;
  bool all_kept() const;
};

/// Each entry dropped independently with probability `drop_prob`.
DepthMask sample_depth_mask(double drop_prob, std::size_t blocks, std::size_t rows, Rng& rng);
/// Row-wise concatenation.
DepthMask concat_masks(std::span<const DepthMask> parts);

}  // namespace dcal
