// SPDX-License-Identifier: Apache-2.0

#include "dlm/trainer.hpp"

#include <chrono>
#include <cmath>
#include <numbers>
#include <ostream>

#include "dlm/errors.hpp"
#include "dlm/rng.hpp"
#include "json.hpp"

namespace dlm {

void TrainConfig::validate() const {
  if (anneal_steps > steps) throw ConfigError("anneal_steps must not exceed steps");
  if (!(t_eps > 0.0 && t_eps <= 0.1)) throw ConfigError("t_eps must lie in (0, 0.1]");
  if (!(lr >= 0.0) || !std::isfinite(lr)) throw ConfigError("lr must be a finite value >= 0");
  if (batch_size == 0) throw ConfigError("batch_size must be positive");
  if (grad_accum == 0) throw ConfigError("grad_accum must be positive");
  if (log_interval == 0) throw ConfigError("log_interval must be positive");
  if (!(min_lr_ratio >= 0.0 && min_lr_ratio <= 1.0)) {
    throw ConfigError("min_lr_ratio must lie in [0, 1]");
  }
}

double RunLog::final_loss(std::size_t window) const {
  if (records.empty()) return std::numeric_limits<double>::quiet_NaN();
  window = std::max<std::size_t>(1, std::min(window, records.size()));
  double sum = 0.0;
  for (std::size_t i = records.size() - window; i < records.size(); ++i) sum += records[i].loss;
  return sum / static_cast<double>(window);
}

void RunLog::write_jsonl(std::ostream& out) const {
  for (const RunRecord& r : records) {
    nlohmann::json j{{"step", r.step},           {"loss", r.loss},
                     {"anneal_ratio", r.anneal_ratio}, {"tokens_seen", r.tokens_seen},
                     {"wall_seconds", r.wall_seconds}, {"lr", r.lr}};
    out << j.dump() << '\n';
  }
}

double anneal_ratio(std::size_t step, std::size_t anneal_steps) {
  if (anneal_steps == 0 || step >= anneal_steps) return 1.0;
  return static_cast<double>(step) / static_cast<double>(anneal_steps);
}

double learning_rate(const TrainConfig& c, std::size_t step) {
  if (step < c.warmup_steps) {
    return c.lr * static_cast<double>(step + 1) / static_cast<double>(c.warmup_steps);
  }
  const std::size_t decay_steps = c.steps > c.warmup_steps + 1 ? c.steps - c.warmup_steps - 1 : 1;
  const double progress =
      std::min(1.0, static_cast<double>(step - c.warmup_steps) / static_cast<double>(decay_steps));
  const double cosine = 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
  return c.lr * (c.min_lr_ratio + (1.0 - c.min_lr_ratio) * cosine);
}

AdamW::AdamW(double beta1, double beta2, double eps, double weight_decay)
    : beta1_(beta1), beta2_(beta2), eps_(eps), weight_decay_(weight_decay) {}

bool AdamW::step(std::vector<Tensor<float>>& params, const std::vector<Tensor<float>>& grads,
                 double lr) {
  if (params.size() != grads.size()) throw DimensionError("params/grads tensor count mismatch");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i].data.size() != grads[i].data.size()) {
      throw DimensionError("gradient shape mismatch for " + params[i].name);
    }
    for (float g : grads[i].data) {
      if (!std::isfinite(g)) {
        ++skipped_;
        return false;
      }
    }
  }
  if (m_.empty()) {
    for (const auto& p : params) {
      m_.emplace_back(p.data.size(), 0.0f);
      v_.emplace_back(p.data.size(), 0.0f);
    }
  }
  ++step_count_;
  kernels::AdamWStep s;
  s.lr = static_cast<float>(lr);
  s.beta1 = static_cast<float>(beta1_);
  s.beta2 = static_cast<float>(beta2_);
  s.eps = static_cast<float>(eps_);
  s.bias_correction1 = static_cast<float>(1.0 - std::pow(beta1_, static_cast<double>(step_count_)));
  s.bias_correction2 = static_cast<float>(1.0 - std::pow(beta2_, static_cast<double>(step_count_)));
  for (std::size_t i = 0; i < params.size(); ++i) {
    s.weight_decay = params[i].shape.size() >= 2 ? static_cast<float>(weight_decay_) : 0.0f;
    kernels::adamw(params[i].data.size(), s, params[i].data.data(), grads[i].data.data(),
                   m_[i].data(), v_[i].data());
  }
  return true;
}

double clip_grad_norm(std::vector<Tensor<float>>& grads, double max_norm) {
  double sq = 0.0;
  for (const auto& g : grads) {
    for (float v : g.data) sq += static_cast<double>(v) * v;
  }
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm && std::isfinite(norm)) {
    const float scale = static_cast<float>(max_norm / norm);
    for (auto& g : grads) {
      for (float& v : g.data) v *= scale;
    }
  }
  return norm;
}

namespace {

constexpr std::size_t kDivergenceWindow = 50;

void check_corpus(const PackedBatchSet& corpus, const ModelConfig& model) {
  if (corpus.blocks.empty()) throw ConfigError("training corpus has no blocks");
  if (corpus.block_len < 2) throw ConfigError("block length must be at least 2");
  if (corpus.block_len > model.max_seq_len) {
    throw ConfigError("block length " + std::to_string(corpus.block_len) +
                      " exceeds model max_seq_len " + std::to_string(model.max_seq_len));
  }
  for (const auto& block : corpus.blocks) {
    for (TokenId id : block) {
      if (id < 0 || static_cast<std::size_t>(id) >= model.vocab_size) {
        throw ConfigError("corpus token id " + std::to_string(id) +
                          " does not fit the model vocabulary");
      }
    }
  }
}

void stage(const TrainHooks& hooks, std::string_view name) {
  if (hooks.on_stage) hooks.on_stage(name);
}

void add_into(ModelParams<float>& acc, const ModelParams<float>& g) {
  for (std::size_t i = 0; i < acc.tensors.size(); ++i) {
    kernels::axpy(acc.tensors[i].data.size(), 1.0f, g.tensors[i].data.data(),
                  acc.tensors[i].data.data());
  }
}

TrainResult run_loop(ModelParams<float> params, const PackedBatchSet& corpus,
                     const TrainConfig& cfg, const TrainHooks& hooks) {
  cfg.validate();
  if (cfg.steps > 0) check_corpus(corpus, params.config);
  const std::size_t n = corpus.block_len;
  const NoiseSchedule schedule{ScheduleKind::linear, cfg.t_eps};
  AdamW opt(cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.weight_decay);
  Rng data_rng(derive_seed(cfg.seed, 1));
  Rng noise_rng(derive_seed(cfg.seed, 2));
  const std::uint64_t mask_base = derive_seed(cfg.seed, 3);

  TrainResult result;
  const auto start = std::chrono::steady_clock::now();
  std::vector<double> losses;
  losses.reserve(cfg.steps);

  for (std::size_t step = 0; step < cfg.steps; ++step) {
    const double ratio = cfg.objective == Objective::ar ? 0.0 : anneal_ratio(step, cfg.anneal_steps);
    const double lr = learning_rate(cfg, step);
    ModelParams<float> grads;
    double loss = 0.0;
    for (std::size_t micro = 0; micro < cfg.grad_accum; ++micro) {
      std::vector<TokenSeq> blocks;
      blocks.reserve(cfg.batch_size);
      for (std::size_t b = 0; b < cfg.batch_size; ++b) {
        blocks.push_back(corpus.blocks[data_rng.below(corpus.blocks.size())]);
      }
      LossAndGrad<float> lg;
      try {
        if (cfg.objective == Objective::ar) {
          stage(hooks, "forward");
          lg = loss_and_grad_ar(params, blocks);
          stage(hooks, "loss");
          stage(hooks, "backward");
        } else {
          stage(hooks, "sample_t");
          std::vector<double> ts(blocks.size());
          for (double& t : ts) t = noise_rng.uniform(cfg.t_eps, 1.0);
          stage(hooks, "corrupt");
          CorruptedBatch items;
          items.reserve(blocks.size());
          for (std::size_t b = 0; b < blocks.size(); ++b) {
            items.push_back(corrupt_sequence(schedule, blocks[b], ts[b], noise_rng, 1));
          }
          stage(hooks, "mask");
          const AttentionMaskSpec spec{ratio, derive_seed(mask_base, step * cfg.grad_accum + micro),
                                       WidthDraw::uniform};
          const AttentionMask mask = build_attention_mask(n, spec);
          DiffusionLossOptions opt_loss{schedule, cfg.alignment, hooks.on_stage};
          lg = loss_and_grad_diffusion(params, items, mask, opt_loss);
        }
      } catch (const NumericError& e) {
        throw TrainingDiverged("step " + std::to_string(step) + ": " + e.what());
      }
      loss += lg.loss;
      if (micro == 0) {
        grads = std::move(lg.grads);
      } else {
        add_into(grads, lg.grads);
      }
    }
    if (cfg.grad_accum > 1) {
      const float inv = 1.0f / static_cast<float>(cfg.grad_accum);
      for (auto& t : grads.tensors) {
        for (float& v : t.data) v *= inv;
      }
      loss /= static_cast<double>(cfg.grad_accum);
    }
    clip_grad_norm(grads.tensors, cfg.grad_clip);
    stage(hooks, "update");
    opt.step(params.tensors, grads.tensors, lr);

    losses.push_back(loss);
    if (losses.size() >= 2 * kDivergenceWindow) {
      double head = 0.0;
      double tail = 0.0;
      for (std::size_t i = 0; i < kDivergenceWindow; ++i) {
        head += losses[i];
        tail += losses[losses.size() - 1 - i];
      }
      if (tail > 10.0 * head) {
        throw TrainingDiverged("step " + std::to_string(step) + ": mean loss of last " +
                               std::to_string(kDivergenceWindow) + " steps (" +
                               std::to_string(tail / kDivergenceWindow) +
                               ") exceeds 10x the initial mean (" +
                               std::to_string(head / kDivergenceWindow) + ")");
      }
    }

    if (step % cfg.log_interval == 0 || step + 1 == cfg.steps) {
      RunRecord rec;
      rec.step = step;
      rec.loss = loss;
      rec.anneal_ratio = ratio;
      rec.tokens_seen = (step + 1) * cfg.batch_size * cfg.grad_accum * n;
      rec.wall_seconds =
          std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
      rec.lr = lr;
      result.log.records.push_back(rec);
      if (hooks.on_record) hooks.on_record(rec);
    }
  }
  result.log.skipped_steps = opt.skipped();
  result.params = std::move(params);
  return result;
}

}  // namespace

TrainResult pretrain_ar(const PackedBatchSet& corpus, const ModelConfig& model,
                        const TrainConfig& config, const TrainHooks& hooks) {
  TrainConfig cfg = config;
  cfg.objective = Objective::ar;
  ModelConfig mc = model;
  mc.mode = AttentionMode::causal;
  mc.anneal_ratio = 0.0;
  return run_loop(init_params(mc, derive_seed(cfg.seed, 0)), corpus, cfg, hooks);
}

TrainResult adapt(const ModelParams<float>& base, const PackedBatchSet& corpus,
                  const TrainConfig& config, const TrainHooks& hooks) {
  validate_params(base);
  TrainConfig cfg = config;
  cfg.objective = Objective::diffusion;
  ModelParams<float> start = base;
  start.config.mode = cfg.anneal_steps > 0 ? AttentionMode::annealed : AttentionMode::full;
  TrainResult r = run_loop(std::move(start), corpus, cfg, hooks);
  const double final_ratio = cfg.steps == 0 ? 0.0 : anneal_ratio(cfg.steps - 1, cfg.anneal_steps);
  if (cfg.steps == 0) {
    r.params.config = base.config;
  } else {
    r.params.config.mode = final_ratio >= 1.0 ? AttentionMode::full : AttentionMode::annealed;
    r.params.config.anneal_ratio = final_ratio;
  }
  return r;
}

TrainResult train_scratch(const PackedBatchSet& corpus, const ModelConfig& model,
                          const TrainConfig& config, const TrainHooks& hooks) {
  ModelConfig mc = model;
  mc.mode = AttentionMode::full;
  mc.anneal_ratio = 1.0;
  return adapt(init_params(mc, derive_seed(config.seed, 0)), corpus, config, hooks);
}

template <class Real>
double sequential_masking_loss(const ModelParams<Real>& params, const TokenSeq& seq,
                               const AttentionMask& mask) {
  if (seq.size() < 2) throw DimensionError("sequence needs BOS plus at least one token");
  const std::size_t n = seq.size();
  double total = 0.0;
  for (std::size_t k = 1; k < n; ++k) {
    TokenSeq state = seq;
    for (std::size_t i = n - k; i < n; ++i) state[i] = kMaskId;
    const std::size_t revealed = n - k;
    const Matrix<Real> shifted = shift_logits(forward(params, state, mask));
    total += cross_entropy(shifted.row(revealed), shifted.cols, seq[revealed]);
  }
  return total;
}

template <class Real>
double ar_sequence_loss(const ModelParams<Real>& params, const TokenSeq& seq) {
  if (seq.size() < 2) throw DimensionError("sequence needs BOS plus at least one token");
  const Matrix<Real> logits = forward(params, seq, AttentionMask::causal(seq.size()));
  double total = 0.0;
  for (std::size_t i = 1; i < seq.size(); ++i) {
    total += cross_entropy(logits.row(i - 1), logits.cols, seq[i]);
  }
  return total;
}

template double sequential_masking_loss<float>(const ModelParams<float>&, const TokenSeq&,
                                               const AttentionMask&);
template double sequential_masking_loss<double>(const ModelParams<double>&, const TokenSeq&,
                                                const AttentionMask&);
template double ar_sequence_loss<float>(const ModelParams<float>&, const TokenSeq&);
template double ar_sequence_loss<double>(const ModelParams<double>&, const TokenSeq&);

}  // namespace dlm
