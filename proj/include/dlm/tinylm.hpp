// SPDX-License-Identifier: Apache-2.0
//
// A small pre-norm transformer used both as the autoregressive base model and
// as the diffusion denoiser. There is no timestep input anywhere: forward()
// sees only tokens and an attention mask, so the noise level can only be
// inferred from how many MASK tokens the input holds.
//
// Gradients are hand-derived (no autograd). The model is templated on its
// element type: float for training and sampling, double for the
// finite-difference checks.

#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "dlm/diffusion_core.hpp"
#include "dlm/tensor.hpp"

namespace dlm {

enum class AttentionMode { causal, annealed, full };

std::string_view to_string(AttentionMode mode);
AttentionMode attention_mode_from_string(std::string_view name);

struct ModelConfig {
  std::size_t n_layers = 2;
  std::size_t d_model = 64;
  std::size_t n_heads = 4;
  std::size_t d_ff = 256;
  std::size_t max_seq_len = 64;
  std::size_t vocab_size = 32;
  /// How the model is meant to be run; the mask itself is always explicit.
  AttentionMode mode = AttentionMode::causal;
  double anneal_ratio = 0.0;

  /// Throws ConfigError when d_model % n_heads != 0, vocab_size < 4, or a
  /// dimension is zero.
  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

/// n x n boolean matrix; allowed(i, j) means query i may attend to key j.
class AttentionMask {
 public:
  AttentionMask() = default;
  explicit AttentionMask(std::size_t n) : n_(n), allowed_(n * n, 0) {}

  static AttentionMask causal(std::size_t n);
  static AttentionMask full(std::size_t n);

  std::size_t size() const { return n_; }
  bool allowed(std::size_t i, std::size_t j) const { return allowed_[i * n_ + j] != 0; }
  void set(std::size_t i, std::size_t j, bool value) { allowed_[i * n_ + j] = value ? 1 : 0; }
  std::size_t permitted_count() const;

  bool operator==(const AttentionMask&) const = default;

 private:
  std::size_t n_ = 0;
  std::vector<std::uint8_t> allowed_;
};

/// How the per-row right-context fraction r is drawn.
enum class WidthDraw {
  uniform,  ///< r ~ Uniform[0, anneal_ratio]
  max,      ///< r = anneal_ratio
};

struct AttentionMaskSpec {
  /// 0 reproduces the causal mask, 1 the full mask.
  double anneal_ratio = 0.0;
  std::uint64_t seed = 0;
  WidthDraw draw = WidthDraw::uniform;
};

/// Row i always sees columns 0..i, plus w_i = round(r_i * (n-1-i)) columns to
/// its right. For a fixed seed each row's uniform draw is shared across
/// ratios, so the permitted count is non-decreasing in anneal_ratio.
AttentionMask build_attention_mask(std::size_t n, const AttentionMaskSpec& spec);

/// Mask a model is evaluated with: causal, full, or the annealed mask at its
/// recorded ratio with maximal widths.
AttentionMask inference_mask(const ModelConfig& config, std::size_t n);

/// Index of each tensor inside a block's parameter group.
enum class BlockTensor : std::size_t {
  ln1_gain,
  ln1_bias,
  qkv_weight,
  qkv_bias,
  proj_weight,
  proj_bias,
  ln2_gain,
  ln2_bias,
  fc_weight,
  fc_bias,
  out_weight,
  out_bias,
};
inline constexpr std::size_t kTensorsPerBlock = 12;

template <class Real>
struct ModelParams {
  ModelConfig config;
  std::vector<Tensor<Real>> tensors;

  Tensor<Real>& token_embedding() { return tensors[0]; }
  const Tensor<Real>& token_embedding() const { return tensors[0]; }
  Tensor<Real>& position_embedding() { return tensors[1]; }
  const Tensor<Real>& position_embedding() const { return tensors[1]; }
  Tensor<Real>& block(std::size_t layer, BlockTensor which) {
    return tensors[2 + layer * kTensorsPerBlock + static_cast<std::size_t>(which)];
  }
  const Tensor<Real>& block(std::size_t layer, BlockTensor which) const {
    return tensors[2 + layer * kTensorsPerBlock + static_cast<std::size_t>(which)];
  }
  Tensor<Real>& final_gain() { return tensors[tensors.size() - 4]; }
  const Tensor<Real>& final_gain() const { return tensors[tensors.size() - 4]; }
  Tensor<Real>& final_bias() { return tensors[tensors.size() - 3]; }
  const Tensor<Real>& final_bias() const { return tensors[tensors.size() - 3]; }
  Tensor<Real>& head_weight() { return tensors[tensors.size() - 2]; }
  const Tensor<Real>& head_weight() const { return tensors[tensors.size() - 2]; }
  Tensor<Real>& head_bias() { return tensors[tensors.size() - 1]; }
  const Tensor<Real>& head_bias() const { return tensors[tensors.size() - 1]; }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& t : tensors) n += t.data.size();
    return n;
  }
};

/// Tensor layout (names and shapes) implied by a config, values zeroed.
template <class Real>
ModelParams<Real> zero_params(const ModelConfig& config);

/// Gaussian init (std 0.02, residual projections scaled by 1/sqrt(2L)),
/// unit LayerNorm gains, zero biases. Deterministic given seed.
ModelParams<float> init_params(const ModelConfig& config, std::uint64_t seed);

template <class To, class From>
ModelParams<To> convert_params(const ModelParams<From>& params) {
  ModelParams<To> out;
  out.config = params.config;
  out.tensors.reserve(params.tensors.size());
  for (const auto& t : params.tensors) {
    Tensor<To> c{t.name, t.shape, {}};
    c.data.assign(t.data.begin(), t.data.end());
    out.tensors.push_back(std::move(c));
  }
  return out;
}

/// Throws ConfigError when tensor names/shapes disagree with the config or a
/// value is non-finite.
template <class Real>
void validate_params(const ModelParams<Real>& params);

/// Logits for one sequence: tokens.size() rows x vocab_size columns.
/// Throws DimensionError if the sequence is longer than max_seq_len, the
/// mask size differs, or an id is outside the vocabulary.
template <class Real>
Matrix<Real> forward(const ModelParams<Real>& params, std::span<const TokenId> tokens,
                     const AttentionMask& mask);

/// Equal-length sequences run together; row b*n + i holds sequence b, slot i.
template <class Real>
Matrix<Real> forward_batch(const ModelParams<Real>& params, const std::vector<TokenSeq>& batch,
                           const AttentionMask& mask);

/// Output slot n (n >= 1) holds input slot n-1. Slot 0 is a NaN sentinel
/// that no loss may read. Throws InvalidInput for fewer than 2 rows.
template <class Real>
Matrix<Real> shift_logits(const Matrix<Real>& logits);

template <class Real>
struct LossAndGrad {
  double loss = 0.0;
  ModelParams<Real> grads;
};

/// One cross-entropy term: softmax(logits[row]) scored against target.
struct RowTarget {
  std::size_t row = 0;
  TokenId target = 0;
  double weight = 1.0;
};

/// sum_r weight_r * CE(logits[row_r], target_r) and its exact gradient.
template <class Real>
LossAndGrad<Real> weighted_ce_loss_and_grad(const ModelParams<Real>& params,
                                            const std::vector<TokenSeq>& batch,
                                            const AttentionMask& mask,
                                            const std::vector<RowTarget>& targets);

enum class Objective { diffusion, ar };

/// Whether output slot n-1 (shifted) or slot n (unshifted, ablation only)
/// scores label n.
enum class LogitAlignment { shifted, unshifted };

/// Observer called with "forward", "shift", "loss", "backward" as the
/// diffusion objective runs; used to audit step ordering.
using StageObserver = std::function<void(std::string_view)>;

struct DiffusionLossOptions {
  NoiseSchedule schedule;
  LogitAlignment alignment = LogitAlignment::shifted;
  StageObserver observer;
};

/// Mean next-token cross-entropy per predicted token on clean inputs under
/// the causal mask: (1 / (B (n-1))) sum_b sum_{n>=1} -log p(x_n | x_<n).
template <class Real>
LossAndGrad<Real> loss_and_grad_ar(const ModelParams<Real>& params,
                                   const std::vector<TokenSeq>& batch);

/// (1 / (B (n-1))) sum_b diffusion_loss(shift(f(noisy_b)), item_b): forward on
/// the noisy inputs with `mask`, shift, weighted masked CE, exact gradient.
/// Throws NumericError with diagnostics when the loss is non-finite.
template <class Real>
LossAndGrad<Real> loss_and_grad_diffusion(const ModelParams<Real>& params,
                                          const CorruptedBatch& batch, const AttentionMask& mask,
                                          const DiffusionLossOptions& options);

/// Loss value only (no backward pass) for the same objective.
template <class Real>
double diffusion_objective(const ModelParams<Real>& params, const CorruptedBatch& batch,
                           const AttentionMask& mask, const DiffusionLossOptions& options);

template <class Real>
double ar_objective(const ModelParams<Real>& params, const std::vector<TokenSeq>& batch);

}  // namespace dlm
