#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "dcal/autodiff.hpp"
#include "dcal/ensemble_layers.hpp"
#include "dcal/rng.hpp"

namespace dcal {

struct ModelSpec {
  std::size_t in_channels = 3;
  std::size_t image_size = 16;
  std::size_t width = 16;
  std::size_t blocks = 4;
  std::size_t classes = 10;
  std::size_t members = 4;  // K; forced to 1 when !ensemble
  bool ensemble = true;     // false: plain layers, no rank-1 adapters
  bool stem_pool = true;    // 2x2 average pool closing the stem

  std::size_t ensemble_size() const { return ensemble ? members : 1; }
};

enum class ParamKind { shared, adapter, bias };

struct ResidualBlock {
  EnsembleConv first;
  EnsembleConv second;
};

struct ForwardOptions {
  bool train = false;
  const DepthMask* depth = nullptr;  // consulted only when train
  bool params_require_grad = false;
};

struct ForwardResult {
  Var logits;               // [rows, classes]
  std::vector<Var> params;  // aligned with ResidualClassifier::parameters()
};

/// Desk-scale residual classifier built from BatchEnsemble layers.
///
/// stem: conv3x3 (in -> width), ReLU, optional 2x2 average pool
/// blocks: x + conv(ReLU(conv(x))), the branch dropped/rescaled by the depth mask
/// head: global average pool, ensemble dense (width -> classes)
class ResidualClassifier {
 public:
  struct ParamRef {
    std::string name;
    Tensor* tensor;
    ParamKind kind;
  };
  struct ConstParamRef {
    std::string name;
    const Tensor* tensor;
    ParamKind kind;
  };

  ResidualClassifier() = default;
  ResidualClassifier(const ModelSpec& spec, Rng& init_rng);

  const ModelSpec& spec() const noexcept { return spec_; }
  std::size_t members() const noexcept { return spec_.ensemble_size(); }

  /// Rows carry member indices; in train mode with a depth mask, each
  /// residual branch is scaled by mask.factor(row, block).
  ForwardResult forward(Tape& tape, Var input, std::span<const int> members,
                        const ForwardOptions& options = {}) const;

  /// Eval-mode logits without gradient bookkeeping.
  Tensor logits(const Tensor& input, std::span<const int> members) const;

  std::vector<ParamRef> parameters();
  std::vector<ConstParamRef> parameters() const;
  std::size_t parameter_count() const;

  void set_adapters_to_ones();

  EnsembleConv stem;
  std::vector<ResidualBlock> blocks;
  EnsembleLinear head;

 private:
  friend ResidualClassifier make_model_shell(const ModelSpec& spec);

  ModelSpec spec_;
};

/// Builds an uninitialised (zero) model with the right tensor shapes.
ResidualClassifier make_model_shell(const ModelSpec& spec);

}  // namespace dcal
