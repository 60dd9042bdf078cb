// SPDX-License-Identifier: Apache-2.0
//
// Training loops: AR pretraining, diffusion adaptation of an AR model, and
// diffusion training from random init, sharing one AdamW optimizer and one
// warmup + cosine learning-rate schedule.

#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <string>
#include <string_view>
#include <vector>

#include "dlm/data_pipeline.hpp"
#include "dlm/kernels.hpp"
#include "dlm/tinylm.hpp"

namespace dlm {

struct TrainConfig {
  std::size_t steps = 1000;
  std::size_t batch_size = 8;
  double lr = 3e-3;
  std::size_t warmup_steps = 100;
  std::size_t anneal_steps = 500;
  double t_eps = 1e-3;
  std::uint64_t seed = 0;
  Objective objective = Objective::diffusion;
  /// "random" or a checkpoint path (resolved by the CLI).
  std::string init = "random";

  double weight_decay = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  /// Global gradient-norm clip; 0 disables.
  double grad_clip = 1.0;
  /// Cosine decays lr to lr * min_lr_ratio at the final step.
  double min_lr_ratio = 0.1;
  std::size_t grad_accum = 1;
  std::size_t log_interval = 1;
  /// Ablation switch: score label n with output slot n instead of n-1.
  LogitAlignment alignment = LogitAlignment::shifted;

  /// Throws ConfigError on anneal_steps > steps, t_eps outside (0, 0.1],
  /// lr < 0, batch_size == 0, or grad_accum == 0.
  void validate() const;
};

struct RunRecord {
  std::size_t step = 0;
  double loss = 0.0;
  double anneal_ratio = 0.0;
  std::size_t tokens_seen = 0;
  double wall_seconds = 0.0;
  double lr = 0.0;
};

struct RunLog {
  std::vector<RunRecord> records;
  std::size_t skipped_steps = 0;

  double final_loss(std::size_t window = 1) const;
  /// One JSON object per line: {"step":..,"loss":..,"anneal_ratio":..,...}.
  void write_jsonl(std::ostream& out) const;
};

struct TrainResult {
  ModelParams<float> params;
  RunLog log;
};

/// Thrown when the loss becomes non-finite or the mean of the last 50 losses
/// exceeds 10x the mean of the first 50.
class TrainingDiverged : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// 0 at step 0, 1 from anneal_steps on, linear in between. anneal_steps == 0
/// means full attention from the first step.
double anneal_ratio(std::size_t step, std::size_t anneal_steps);

/// Linear warmup to lr over warmup_steps, then cosine decay to
/// lr * min_lr_ratio at the last step.
double learning_rate(const TrainConfig& config, std::size_t step);

/// Decoupled-weight-decay Adam. Weight decay applies to rank-2 tensors only.
class AdamW {
 public:
  AdamW(double beta1, double beta2, double eps, double weight_decay);

  /// Applies one update. Returns false (and leaves params and state
  /// untouched) when any gradient is non-finite.
  bool step(std::vector<Tensor<float>>& params, const std::vector<Tensor<float>>& grads, double lr);

  std::size_t step_count() const { return step_count_; }
  std::size_t skipped() const { return skipped_; }
  const std::vector<std::vector<float>>& first_moment() const { return m_; }
  const std::vector<std::vector<float>>& second_moment() const { return v_; }

 private:
  double beta1_;
  double beta2_;
  double eps_;
  double weight_decay_;
  std::size_t step_count_ = 0;
  std::size_t skipped_ = 0;
  std::vector<std::vector<float>> m_;
  std::vector<std::vector<float>> v_;
};

/// Scales grads in place so their global L2 norm is at most max_norm.
/// Returns the norm before clipping.
double clip_grad_norm(std::vector<Tensor<float>>& grads, double max_norm);

struct TrainHooks {
  /// Receives "sample_t", "corrupt", "mask", "forward", "shift", "loss",
  /// "backward", "update" in execution order.
  std::function<void(std::string_view)> on_stage;
  std::function<void(const RunRecord&)> on_record;
};

/// Causal-mask next-token training on clean blocks from a fresh init.
TrainResult pretrain_ar(const PackedBatchSet& corpus, const ModelConfig& model,
                        const TrainConfig& config, const TrainHooks& hooks = {});

/// Adaptation loop: per step draw blocks, t ~ U(t_eps, 1) per item, corrupt,
/// build the annealed mask, forward, shift, weighted masked CE, update.
/// Throws ConfigError if the base does not fit the corpus.
TrainResult adapt(const ModelParams<float>& base, const PackedBatchSet& corpus,
                  const TrainConfig& config, const TrainHooks& hooks = {});

/// Same loop as adapt() from a fresh random init.
TrainResult train_scratch(const PackedBatchSet& corpus, const ModelConfig& model,
                          const TrainConfig& config, const TrainHooks& hooks = {});

/// AR seen as a diffusion process that masks right-to-left one token at a
/// time. Step k masks the last k tokens and scores only the token the
/// reverse step reveals, with unit weight. Summed over all steps.
template <class Real>
double sequential_masking_loss(const ModelParams<Real>& params, const TokenSeq& seq,
                               const AttentionMask& mask);

/// Sum (not mean) of next-token cross-entropies of seq under the causal mask.
template <class Real>
double ar_sequence_loss(const ModelParams<Real>& params, const TokenSeq& seq);

}  // namespace dlm
