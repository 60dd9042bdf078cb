// SPDX-License-Identifier: Apache-2.0

#include "dlm/tinylm.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <sstream>

#include "dlm/errors.hpp"
#include "dlm/kernels.hpp"
#include "dlm/rng.hpp"

namespace dlm {

using kernels::Trans;

std::string_view to_string(AttentionMode mode) {
  switch (mode) {
    case AttentionMode::causal:
      return "causal";
    case AttentionMode::annealed:
      return "annealed";
    case AttentionMode::full:
      return "full";
  }
  return "causal";
}

AttentionMode attention_mode_from_string(std::string_view name) {
  if (name == "causal") return AttentionMode::causal;
  if (name == "annealed") return AttentionMode::annealed;
  if (name == "full") return AttentionMode::full;
  throw ConfigError("unknown attention mode: " + std::string(name));
}

void ModelConfig::validate() const {
  if (n_layers == 0 || d_model == 0 || n_heads == 0 || d_ff == 0 || max_seq_len == 0) {
    throw ConfigError("model dimensions must be positive");
  }
  if (d_model % n_heads != 0) throw ConfigError("d_model must be divisible by n_heads");
  if (vocab_size < 4) throw ConfigError("vocab_size must be at least 4");
  if (!(anneal_ratio >= 0.0 && anneal_ratio <= 1.0)) {
    throw ConfigError("anneal_ratio must lie in [0, 1]");
  }
}

AttentionMask AttentionMask::causal(std::size_t n) {
  AttentionMask m(n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j <= i; ++j) m.set(i, j, true);
  }
  return m;
}

AttentionMask AttentionMask::full(std::size_t n) {
  AttentionMask m(n);
  std::fill(m.allowed_.begin(), m.allowed_.end(), std::uint8_t{1});
  return m;
}

std::size_t AttentionMask::permitted_count() const {
  return static_cast<std::size_t>(std::count(allowed_.begin(), allowed_.end(), std::uint8_t{1}));
}

AttentionMask build_attention_mask(std::size_t n, const AttentionMaskSpec& spec) {
  const double ratio = std::clamp(spec.anneal_ratio, 0.0, 1.0);
  if (ratio >= 1.0) return AttentionMask::full(n);
  AttentionMask m = AttentionMask::causal(n);
  if (ratio <= 0.0) return m;
  Rng rng(spec.seed);
  for (std::size_t i = 0; i < n; ++i) {
    const double u = rng.uniform();
    const double r = spec.draw == WidthDraw::max ? ratio : u * ratio;
    const auto right = static_cast<double>(n - 1 - i);
    const auto width = static_cast<std::size_t>(std::llround(r * right));
    for (std::size_t j = i + 1; j <= i + width && j < n; ++j) m.set(i, j, true);
  }
  return m;
}

AttentionMask inference_mask(const ModelConfig& config, std::size_t n) {
  switch (config.mode) {
    case AttentionMode::causal:
      return AttentionMask::causal(n);
    case AttentionMode::full:
      return AttentionMask::full(n);
    case AttentionMode::annealed:
      break;
  }
  return build_attention_mask(n, {config.anneal_ratio, 0, WidthDraw::max});
}

// ---------------------------------------------------------------------------
// Parameters

namespace {

std::string block_name(std::size_t layer, BlockTensor which) {
  static constexpr const char* kNames[kTensorsPerBlock] = {
      "ln1.gain", "ln1.bias", "attn.qkv.weight", "attn.qkv.bias", "attn.proj.weight",
      "attn.proj.bias", "ln2.gain", "ln2.bias", "mlp.fc.weight", "mlp.fc.bias",
      "mlp.out.weight", "mlp.out.bias"};
  return "blocks." + std::to_string(layer) + "." + kNames[static_cast<std::size_t>(which)];
}

template <class Real>
Tensor<Real> make_tensor(std::string name, std::vector<std::size_t> shape) {
  Tensor<Real> t{std::move(name), std::move(shape), {}};
  t.data.assign(t.numel(), Real(0));
  return t;
}

}  // namespace

template <class Real>
ModelParams<Real> zero_params(const ModelConfig& c) {
  c.validate();
  ModelParams<Real> p;
  p.config = c;
  const std::size_t d = c.d_model;
  p.tensors.push_back(make_tensor<Real>("tok_emb", {c.vocab_size, d}));
  p.tensors.push_back(make_tensor<Real>("pos_emb", {c.max_seq_len, d}));
  for (std::size_t l = 0; l < c.n_layers; ++l) {
    auto add = [&](BlockTensor which, std::vector<std::size_t> shape) {
      p.tensors.push_back(make_tensor<Real>(block_name(l, which), std::move(shape)));
    };
    add(BlockTensor::ln1_gain, {d});
    add(BlockTensor::ln1_bias, {d});
    add(BlockTensor::qkv_weight, {d, 3 * d});
    add(BlockTensor::qkv_bias, {3 * d});
    add(BlockTensor::proj_weight, {d, d});
    add(BlockTensor::proj_bias, {d});
    add(BlockTensor::ln2_gain, {d});
    add(BlockTensor::ln2_bias, {d});
    add(BlockTensor::fc_weight, {d, c.d_ff});
    add(BlockTensor::fc_bias, {c.d_ff});
    add(BlockTensor::out_weight, {c.d_ff, d});
    add(BlockTensor::out_bias, {d});
  }
  p.tensors.push_back(make_tensor<Real>("ln_f.gain", {d}));
  p.tensors.push_back(make_tensor<Real>("ln_f.bias", {d}));
  p.tensors.push_back(make_tensor<Real>("head.weight", {d, c.vocab_size}));
  p.tensors.push_back(make_tensor<Real>("head.bias", {c.vocab_size}));
  return p;
}

ModelParams<float> init_params(const ModelConfig& config, std::uint64_t seed) {
  ModelParams<float> p = zero_params<float>(config);
  Rng rng(seed);
  const double std_base = 0.02;
  const double std_resid = std_base / std::sqrt(2.0 * static_cast<double>(config.n_layers));
  auto fill_normal = [&](Tensor<float>& t, double sd) {
    for (auto& v : t.data) v = static_cast<float>(sd * rng.normal());
  };
  fill_normal(p.token_embedding(), std_base);
  fill_normal(p.position_embedding(), std_base);
  for (std::size_t l = 0; l < config.n_layers; ++l) {
    auto& g1 = p.block(l, BlockTensor::ln1_gain).data;
    std::fill(g1.begin(), g1.end(), 1.0f);
    auto& g2 = p.block(l, BlockTensor::ln2_gain).data;
    std::fill(g2.begin(), g2.end(), 1.0f);
    fill_normal(p.block(l, BlockTensor::qkv_weight), std_base);
    fill_normal(p.block(l, BlockTensor::proj_weight), std_resid);
    fill_normal(p.block(l, BlockTensor::fc_weight), std_base);
    fill_normal(p.block(l, BlockTensor::out_weight), std_resid);
  }
  std::fill(p.final_gain().data.begin(), p.final_gain().data.end(), 1.0f);
  fill_normal(p.head_weight(), std_base);
  return p;
}

template <class Real>
void validate_params(const ModelParams<Real>& params) {
  const ModelParams<Real> expected = zero_params<Real>(params.config);
  if (expected.tensors.size() != params.tensors.size()) {
    throw ConfigError("tensor count does not match the model config");
  }
  for (std::size_t i = 0; i < expected.tensors.size(); ++i) {
    const auto& e = expected.tensors[i];
    const auto& t = params.tensors[i];
    if (e.name != t.name || e.shape != t.shape || t.data.size() != e.data.size()) {
      throw ConfigError("tensor '" + t.name + "' does not match expected '" + e.name + "'");
    }
    for (Real v : t.data) {
      if (!std::isfinite(static_cast<double>(v))) {
        throw ConfigError("tensor '" + t.name + "' holds a non-finite value");
      }
    }
  }
}

// ---------------------------------------------------------------------------
// Forward / backward

namespace {

constexpr double kLayerNormEps = 1e-5;

template <class Real>
struct LayerNormCache {
  std::vector<Real> xhat;  // R x d
  std::vector<Real> rstd;  // R
};

template <class Real>
struct BlockCache {
  std::vector<Real> x_in;  // R x d
  LayerNormCache<Real> ln1;
  std::vector<Real> h1;    // R x d
  std::vector<Real> qkv;   // R x 3d
  std::vector<Real> probs; // B x H x n x n
  std::vector<Real> att;   // R x d
  std::vector<Real> x_mid; // R x d
  LayerNormCache<Real> ln2;
  std::vector<Real> h2;    // R x d
  std::vector<Real> pre;   // R x d_ff
  std::vector<Real> act;   // R x d_ff
};

template <class Real>
struct ForwardCache {
  std::size_t batch = 0;
  std::size_t n = 0;
  std::vector<TokenId> tokens;
  std::vector<BlockCache<Real>> blocks;
  std::vector<Real> x_final;
  LayerNormCache<Real> ln_f;
  std::vector<Real> hf;
  Matrix<Real> logits;
};

template <class Real>
void layer_norm(const std::vector<Real>& x, std::size_t rows, std::size_t d, const Real* gain,
                const Real* bias, std::vector<Real>& y, LayerNormCache<Real>* cache) {
  y.resize(rows * d);
  if (cache) {
    cache->xhat.resize(rows * d);
    cache->rstd.resize(rows);
  }
  for (std::size_t r = 0; r < rows; ++r) {
    const Real* xr = x.data() + r * d;
    double mean = 0.0;
    for (std::size_t j = 0; j < d; ++j) mean += xr[j];
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      const double c = xr[j] - mean;
      var += c * c;
    }
    var /= static_cast<double>(d);
    const Real rstd = static_cast<Real>(1.0 / std::sqrt(var + kLayerNormEps));
    Real* yr = y.data() + r * d;
    for (std::size_t j = 0; j < d; ++j) {
      const Real xh = static_cast<Real>(xr[j] - mean) * rstd;
      if (cache) cache->xhat[r * d + j] = xh;
      yr[j] = gain[j] * xh + bias[j];
    }
    if (cache) cache->rstd[r] = rstd;
  }
}

/// dx += LayerNorm backward of dy; accumulates gain/bias gradients.
template <class Real>
void layer_norm_backward(const std::vector<Real>& dy, std::size_t rows, std::size_t d,
                         const Real* gain, const LayerNormCache<Real>& cache, Real* dgain,
                         Real* dbias, std::vector<Real>& dx) {
  std::vector<Real> dxhat(d);
  for (std::size_t r = 0; r < rows; ++r) {
    const Real* dyr = dy.data() + r * d;
    const Real* xh = cache.xhat.data() + r * d;
    double mean_dxhat = 0.0;
    double mean_dxhat_xhat = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      dgain[j] += dyr[j] * xh[j];
      dbias[j] += dyr[j];
      dxhat[j] = dyr[j] * gain[j];
      mean_dxhat += dxhat[j];
      mean_dxhat_xhat += static_cast<double>(dxhat[j]) * xh[j];
    }
    mean_dxhat /= static_cast<double>(d);
    mean_dxhat_xhat /= static_cast<double>(d);
    const Real rstd = cache.rstd[r];
    Real* dxr = dx.data() + r * d;
    for (std::size_t j = 0; j < d; ++j) {
      dxr[j] += rstd * static_cast<Real>(dxhat[j] - mean_dxhat - xh[j] * mean_dxhat_xhat);
    }
  }
}

/// y = x W + b with x: rows x in, W: in x out.
template <class Real>
void linear(const std::vector<Real>& x, std::size_t rows, std::size_t in, const Tensor<Real>& w,
            const Tensor<Real>& b, std::vector<Real>& y) {
  const std::size_t out = b.data.size();
  y.resize(rows * out);
  kernels::gemm(Trans::no, Trans::no, rows, out, in, Real(1), x.data(), in, w.data.data(), out,
                Real(0), y.data(), out);
  for (std::size_t r = 0; r < rows; ++r) kernels::axpy(out, Real(1), b.data.data(), y.data() + r * out);
}

/// Accumulates dW, db and writes dx (overwrite) for y = x W + b.
template <class Real>
void linear_backward(const std::vector<Real>& x, const std::vector<Real>& dy, std::size_t rows,
                     std::size_t in, const Tensor<Real>& w, Tensor<Real>& dw, Tensor<Real>& db,
                     std::vector<Real>& dx) {
  const std::size_t out = db.data.size();
  kernels::gemm(Trans::yes, Trans::no, in, out, rows, Real(1), x.data(), in, dy.data(), out,
                Real(1), dw.data.data(), out);
  for (std::size_t r = 0; r < rows; ++r) {
    kernels::axpy(out, Real(1), dy.data() + r * out, db.data.data());
  }
  dx.resize(rows * in);
  kernels::gemm(Trans::no, Trans::yes, rows, in, out, Real(1), dy.data(), out, w.data.data(), out,
                Real(0), dx.data(), in);
}

template <class Real>
void check_batch(const ModelParams<Real>& params, const std::vector<TokenSeq>& batch,
                 const AttentionMask& mask) {
  if (batch.empty()) throw DimensionError("empty batch");
  const std::size_t n = batch.front().size();
  if (n == 0) throw DimensionError("empty sequence");
  if (n > params.config.max_seq_len) {
    throw DimensionError("sequence length " + std::to_string(n) + " exceeds max_seq_len " +
                         std::to_string(params.config.max_seq_len));
  }
  if (mask.size() != n) throw DimensionError("attention mask size does not match sequence length");
  for (const auto& seq : batch) {
    if (seq.size() != n) throw DimensionError("batch sequences must share one length");
    for (TokenId id : seq) {
      if (id < 0 || static_cast<std::size_t>(id) >= params.config.vocab_size) {
        throw DimensionError("token id " + std::to_string(id) + " outside vocabulary");
      }
    }
  }
}

template <class Real>
void run_forward(const ModelParams<Real>& params, const std::vector<TokenSeq>& batch,
                 const AttentionMask& mask, ForwardCache<Real>& cache) {
  check_batch(params, batch, mask);
  const ModelConfig& c = params.config;
  const std::size_t B = batch.size();
  const std::size_t n = batch.front().size();
  const std::size_t R = B * n;
  const std::size_t d = c.d_model;
  const std::size_t H = c.n_heads;
  const std::size_t hd = d / H;
  const std::size_t K = c.vocab_size;
  const Real scale = static_cast<Real>(1.0 / std::sqrt(static_cast<double>(hd)));

  cache.batch = B;
  cache.n = n;
  cache.tokens.clear();
  for (const auto& seq : batch) cache.tokens.insert(cache.tokens.end(), seq.begin(), seq.end());
  cache.blocks.resize(c.n_layers);

  std::vector<Real> x(R * d);
  const auto& tok = params.token_embedding().data;
  const auto& pos = params.position_embedding().data;
  for (std::size_t r = 0; r < R; ++r) {
    const std::size_t id = static_cast<std::size_t>(cache.tokens[r]);
    const std::size_t p = r % n;
    for (std::size_t j = 0; j < d; ++j) x[r * d + j] = tok[id * d + j] + pos[p * d + j];
  }

  std::vector<Real> tmp;
  for (std::size_t l = 0; l < c.n_layers; ++l) {
    BlockCache<Real>& bc = cache.blocks[l];
    bc.x_in = x;
    layer_norm(x, R, d, params.block(l, BlockTensor::ln1_gain).data.data(),
               params.block(l, BlockTensor::ln1_bias).data.data(), bc.h1, &bc.ln1);
    linear(bc.h1, R, d, params.block(l, BlockTensor::qkv_weight),
           params.block(l, BlockTensor::qkv_bias), bc.qkv);

    bc.probs.assign(B * H * n * n, Real(0));
    bc.att.assign(R * d, Real(0));
    for (std::size_t b = 0; b < B; ++b) {
      for (std::size_t h = 0; h < H; ++h) {
        const Real* q = bc.qkv.data() + b * n * 3 * d + h * hd;
        const Real* k = q + d;
        const Real* v = q + 2 * d;
        Real* s = bc.probs.data() + (b * H + h) * n * n;
        kernels::gemm(Trans::no, Trans::yes, n, n, hd, scale, q, 3 * d, k, 3 * d, Real(0), s, n);
        for (std::size_t i = 0; i < n; ++i) {
          Real* row = s + i * n;
          Real mx = -std::numeric_limits<Real>::infinity();
          for (std::size_t j = 0; j < n; ++j) {
            if (mask.allowed(i, j)) mx = std::max(mx, row[j]);
          }
          Real z = 0;
          for (std::size_t j = 0; j < n; ++j) {
            if (mask.allowed(i, j)) {
              row[j] = std::exp(row[j] - mx);
              z += row[j];
            } else {
              row[j] = Real(0);
            }
          }
          const Real inv = Real(1) / z;
          for (std::size_t j = 0; j < n; ++j) row[j] *= inv;
        }
        Real* o = bc.att.data() + b * n * d + h * hd;
        kernels::gemm(Trans::no, Trans::no, n, hd, n, Real(1), s, n, v, 3 * d, Real(0), o, d);
      }
    }
    linear(bc.att, R, d, params.block(l, BlockTensor::proj_weight),
           params.block(l, BlockTensor::proj_bias), tmp);
    for (std::size_t i = 0; i < R * d; ++i) x[i] += tmp[i];
    bc.x_mid = x;

    layer_norm(x, R, d, params.block(l, BlockTensor::ln2_gain).data.data(),
               params.block(l, BlockTensor::ln2_bias).data.data(), bc.h2, &bc.ln2);
    linear(bc.h2, R, d, params.block(l, BlockTensor::fc_weight),
           params.block(l, BlockTensor::fc_bias), bc.pre);
    bc.act.resize(bc.pre.size());
    kernels::gelu(bc.pre.size(), bc.pre.data(), bc.act.data());
    linear(bc.act, R, c.d_ff, params.block(l, BlockTensor::out_weight),
           params.block(l, BlockTensor::out_bias), tmp);
    for (std::size_t i = 0; i < R * d; ++i) x[i] += tmp[i];
  }
  cache.x_final = x;
  layer_norm(x, R, d, params.final_gain().data.data(), params.final_bias().data.data(), cache.hf,
             &cache.ln_f);
  cache.logits = Matrix<Real>(R, K);
  linear(cache.hf, R, d, params.head_weight(), params.head_bias(), cache.logits.data);
}

template <class Real>
ModelParams<Real> run_backward(const ModelParams<Real>& params, const ForwardCache<Real>& cache,
                               const Matrix<Real>& dlogits) {
  const ModelConfig& c = params.config;
  const std::size_t B = cache.batch;
  const std::size_t n = cache.n;
  const std::size_t R = B * n;
  const std::size_t d = c.d_model;
  const std::size_t H = c.n_heads;
  const std::size_t hd = d / H;
  const Real scale = static_cast<Real>(1.0 / std::sqrt(static_cast<double>(hd)));

  ModelParams<Real> g = zero_params<Real>(c);

  std::vector<Real> dhf;
  linear_backward(cache.hf, dlogits.data, R, d, params.head_weight(), g.head_weight(),
                  g.head_bias(), dhf);
  std::vector<Real> dx(R * d, Real(0));
  layer_norm_backward(dhf, R, d, params.final_gain().data.data(), cache.ln_f,
                      g.final_gain().data.data(), g.final_bias().data.data(), dx);

  std::vector<Real> dact, dpre, dh, datt, dqkv, dtmp;
  std::vector<Real> dprob(n * n);
  for (std::size_t li = c.n_layers; li-- > 0;) {
    const BlockCache<Real>& bc = cache.blocks[li];

    // MLP branch: x_out = x_mid + (gelu(LN2(x_mid) Wfc + bfc) Wout + bout)
    linear_backward(bc.act, dx, R, c.d_ff, params.block(li, BlockTensor::out_weight),
                    g.block(li, BlockTensor::out_weight), g.block(li, BlockTensor::out_bias),
                    dact);
    dpre.resize(dact.size());
    kernels::gelu_backward(dact.size(), bc.pre.data(), dact.data(), dpre.data());
    linear_backward(bc.h2, dpre, R, d, params.block(li, BlockTensor::fc_weight),
                    g.block(li, BlockTensor::fc_weight), g.block(li, BlockTensor::fc_bias), dh);
    layer_norm_backward(dh, R, d, params.block(li, BlockTensor::ln2_gain).data.data(), bc.ln2,
                        g.block(li, BlockTensor::ln2_gain).data.data(),
                        g.block(li, BlockTensor::ln2_bias).data.data(), dx);

    // Attention branch: x_mid = x_in + (attn(LN1(x_in) Wqkv + bqkv) Wp + bp)
    linear_backward(bc.att, dx, R, d, params.block(li, BlockTensor::proj_weight),
                    g.block(li, BlockTensor::proj_weight), g.block(li, BlockTensor::proj_bias),
                    datt);
    dqkv.assign(R * 3 * d, Real(0));
    for (std::size_t b = 0; b < B; ++b) {
      for (std::size_t h = 0; h < H; ++h) {
        const Real* q = bc.qkv.data() + b * n * 3 * d + h * hd;
        const Real* k = q + d;
        const Real* v = q + 2 * d;
        Real* dq = dqkv.data() + b * n * 3 * d + h * hd;
        Real* dk = dq + d;
        Real* dv = dq + 2 * d;
        const Real* p = bc.probs.data() + (b * H + h) * n * n;
        const Real* dout = datt.data() + b * n * d + h * hd;
        kernels::gemm(Trans::no, Trans::yes, n, n, hd, Real(1), dout, d, v, 3 * d, Real(0),
                      dprob.data(), n);
        kernels::gemm(Trans::yes, Trans::no, n, hd, n, Real(1), p, n, dout, d, Real(0), dv, 3 * d);
        for (std::size_t i = 0; i < n; ++i) {
          const Real* pr = p + i * n;
          Real* dpr = dprob.data() + i * n;
          const Real inner = kernels::dot(pr, dpr, n);
          for (std::size_t j = 0; j < n; ++j) dpr[j] = pr[j] * (dpr[j] - inner);
        }
        kernels::gemm(Trans::no, Trans::no, n, hd, n, scale, dprob.data(), n, k, 3 * d, Real(0),
                      dq, 3 * d);
        kernels::gemm(Trans::yes, Trans::no, n, hd, n, scale, dprob.data(), n, q, 3 * d, Real(0),
                      dk, 3 * d);
      }
    }
    linear_backward(bc.h1, dqkv, R, d, params.block(li, BlockTensor::qkv_weight),
                    g.block(li, BlockTensor::qkv_weight), g.block(li, BlockTensor::qkv_bias), dh);
    layer_norm_backward(dh, R, d, params.block(li, BlockTensor::ln1_gain).data.data(), bc.ln1,
                        g.block(li, BlockTensor::ln1_gain).data.data(),
                        g.block(li, BlockTensor::ln1_bias).data.data(), dx);
  }

  auto& dtok = g.token_embedding().data;
  auto& dpos = g.position_embedding().data;
  for (std::size_t r = 0; r < R; ++r) {
    const std::size_t id = static_cast<std::size_t>(cache.tokens[r]);
    const std::size_t pidx = r % n;
    kernels::axpy(d, Real(1), dx.data() + r * d, dtok.data() + id * d);
    kernels::axpy(d, Real(1), dx.data() + r * d, dpos.data() + pidx * d);
  }
  return g;
}

template <class Real>
Matrix<Real> item_logits(const Matrix<Real>& logits, std::size_t b, std::size_t n) {
  Matrix<Real> out(n, logits.cols);
  std::copy(logits.row(b * n), logits.row(b * n) + n * logits.cols, out.data.begin());
  return out;
}

template <class Real>
std::vector<TokenSeq> noisy_inputs(const CorruptedBatch& batch) {
  std::vector<TokenSeq> inputs;
  inputs.reserve(batch.size());
  for (const auto& item : batch) inputs.push_back(item.noisy);
  return inputs;
}

template <class Real>
void require_finite(double loss, const CorruptedBatch* batch) {
  if (std::isfinite(loss)) return;
  std::ostringstream msg;
  msg << "non-finite loss " << loss;
  if (batch) {
    for (std::size_t b = 0; b < batch->size(); ++b) {
      msg << "; item " << b << " t=" << (*batch)[b].t << " masked=" << (*batch)[b].masked_count();
    }
  }
  throw NumericError(msg.str());
}

/// Loss (and, when grad != nullptr, d loss / d logits) for the diffusion
/// objective given batch logits.
template <class Real>
double diffusion_from_logits(const Matrix<Real>& logits, const CorruptedBatch& batch,
                             std::size_t n, const DiffusionLossOptions& opt, Matrix<Real>* grad) {
  const double norm = 1.0 / (static_cast<double>(batch.size()) * static_cast<double>(n - 1));
  double total = 0.0;
  if (opt.observer) opt.observer("shift");
  std::vector<Matrix<Real>> aligned;
  aligned.reserve(batch.size());
  for (std::size_t b = 0; b < batch.size(); ++b) {
    Matrix<Real> own = item_logits(logits, b, n);
    aligned.push_back(opt.alignment == LogitAlignment::shifted ? shift_logits(own) : std::move(own));
  }
  if (opt.observer) opt.observer("loss");
  for (std::size_t b = 0; b < batch.size(); ++b) {
    const CorruptedItem& item = batch[b];
    if (!grad) {
      total += diffusion_loss(aligned[b], item, opt.schedule);
      continue;
    }
    Matrix<Real> g_aligned(n, logits.cols);
    total += diffusion_loss_backward(aligned[b], item, opt.schedule, norm, g_aligned);
    // Route the aligned-slot gradient back to the producing output slot.
    for (std::size_t slot = 1; slot < n; ++slot) {
      const std::size_t src = opt.alignment == LogitAlignment::shifted ? slot - 1 : slot;
      Real* dst = grad->row(b * n + src);
      const Real* from = g_aligned.row(slot);
      for (std::size_t j = 0; j < logits.cols; ++j) dst[j] += from[j];
    }
  }
  return total * norm;
}

template <class Real>
void check_items(const CorruptedBatch& batch) {
  if (batch.empty()) throw DimensionError("empty batch");
  for (const auto& item : batch) {
    validate(item);
    if (item.labels.size() < 2) throw DimensionError("diffusion objective needs length >= 2");
  }
}

}  // namespace

template <class Real>
Matrix<Real> forward(const ModelParams<Real>& params, std::span<const TokenId> tokens,
                     const AttentionMask& mask) {
  return forward_batch(params, std::vector<TokenSeq>{TokenSeq(tokens.begin(), tokens.end())}, mask);
}

template <class Real>
Matrix<Real> forward_batch(const ModelParams<Real>& params, const std::vector<TokenSeq>& batch,
                           const AttentionMask& mask) {
  ForwardCache<Real> cache;
  run_forward(params, batch, mask, cache);
  return std::move(cache.logits);
}

template <class Real>
Matrix<Real> shift_logits(const Matrix<Real>& logits) {
  if (logits.rows < 2) throw InvalidInput("shift needs at least two positions");
  Matrix<Real> out(logits.rows, logits.cols, std::numeric_limits<Real>::quiet_NaN());
  std::copy(logits.data.begin(), logits.data.end() - static_cast<std::ptrdiff_t>(logits.cols),
            out.data.begin() + static_cast<std::ptrdiff_t>(logits.cols));
  return out;
}

template <class Real>
LossAndGrad<Real> weighted_ce_loss_and_grad(const ModelParams<Real>& params,
                                            const std::vector<TokenSeq>& batch,
                                            const AttentionMask& mask,
                                            const std::vector<RowTarget>& targets) {
  ForwardCache<Real> cache;
  run_forward(params, batch, mask, cache);
  const Matrix<Real>& logits = cache.logits;
  Matrix<Real> dlogits(logits.rows, logits.cols);
  double loss = 0.0;
  std::vector<double> p(logits.cols);
  for (const RowTarget& t : targets) {
    if (t.row >= logits.rows || t.target < 0 || static_cast<std::size_t>(t.target) >= logits.cols) {
      throw DimensionError("row target outside the logits");
    }
    const Real* row = logits.row(t.row);
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < logits.cols; ++j) mx = std::max(mx, static_cast<double>(row[j]));
    double z = 0.0;
    for (std::size_t j = 0; j < logits.cols; ++j) {
      p[j] = std::exp(static_cast<double>(row[j]) - mx);
      z += p[j];
    }
    loss += t.weight * (std::log(z) + mx - static_cast<double>(row[t.target]));
    Real* g = dlogits.row(t.row);
    for (std::size_t j = 0; j < logits.cols; ++j) {
      const double onehot = static_cast<TokenId>(j) == t.target ? 1.0 : 0.0;
      g[j] += static_cast<Real>(t.weight * (p[j] / z - onehot));
    }
  }
  require_finite<Real>(loss, nullptr);
  return {loss, run_backward(params, cache, dlogits)};
}

template <class Real>
LossAndGrad<Real> loss_and_grad_ar(const ModelParams<Real>& params,
                                   const std::vector<TokenSeq>& batch) {
  if (batch.empty() || batch.front().size() < 2) {
    throw DimensionError("AR objective needs a non-empty batch of length >= 2");
  }
  const std::size_t n = batch.front().size();
  const double w = 1.0 / (static_cast<double>(batch.size()) * static_cast<double>(n - 1));
  std::vector<RowTarget> targets;
  targets.reserve(batch.size() * (n - 1));
  for (std::size_t b = 0; b < batch.size(); ++b) {
    if (batch[b].size() != n) throw DimensionError("batch sequences must share one length");
    for (std::size_t i = 1; i < n; ++i) targets.push_back({b * n + i - 1, batch[b][i], w});
  }
  return weighted_ce_loss_and_grad(params, batch, AttentionMask::causal(n), targets);
}

template <class Real>
double ar_objective(const ModelParams<Real>& params, const std::vector<TokenSeq>& batch) {
  if (batch.empty() || batch.front().size() < 2) {
    throw DimensionError("AR objective needs a non-empty batch of length >= 2");
  }
  const std::size_t n = batch.front().size();
  const Matrix<Real> logits = forward_batch(params, batch, AttentionMask::causal(n));
  double loss = 0.0;
  for (std::size_t b = 0; b < batch.size(); ++b) {
    for (std::size_t i = 1; i < n; ++i) {
      loss += cross_entropy(logits.row(b * n + i - 1), logits.cols, batch[b][i]);
    }
  }
  return loss / (static_cast<double>(batch.size()) * static_cast<double>(n - 1));
}

template <class Real>
LossAndGrad<Real> loss_and_grad_diffusion(const ModelParams<Real>& params,
                                          const CorruptedBatch& batch, const AttentionMask& mask,
                                          const DiffusionLossOptions& options) {
  check_items<Real>(batch);
  const std::size_t n = batch.front().labels.size();
  if (options.observer) options.observer("forward");
  ForwardCache<Real> cache;
  run_forward(params, noisy_inputs<Real>(batch), mask, cache);
  Matrix<Real> dlogits(cache.logits.rows, cache.logits.cols);
  const double loss = diffusion_from_logits(cache.logits, batch, n, options, &dlogits);
  require_finite<Real>(loss, &batch);
  if (options.observer) options.observer("backward");
  return {loss, run_backward(params, cache, dlogits)};
}

template <class Real>
double diffusion_objective(const ModelParams<Real>& params, const CorruptedBatch& batch,
                           const AttentionMask& mask, const DiffusionLossOptions& options) {
  check_items<Real>(batch);
  const std::size_t n = batch.front().labels.size();
  if (options.observer) options.observer("forward");
  const Matrix<Real> logits = forward_batch(params, noisy_inputs<Real>(batch), mask);
  return diffusion_from_logits<Real>(logits, batch, n, options, nullptr);
}

#define DLM_INSTANTIATE(Real)                                                                    \
  template ModelParams<Real> zero_params<Real>(const ModelConfig&);                              \
  template void validate_params<Real>(const ModelParams<Real>&);                                 \
  template Matrix<Real> forward<Real>(const ModelParams<Real>&, std::span<const TokenId>,         \
                                      const AttentionMask&);                                     \
  template Matrix<Real> forward_batch<Real>(const ModelParams<Real>&,                            \
                                            const std::vector<TokenSeq>&, const AttentionMask&); \
  template Matrix<Real> shift_logits<Real>(const Matrix<Real>&);                                 \
  template LossAndGrad<Real> weighted_ce_loss_and_grad<Real>(                                    \
      const ModelParams<Real>&, const std::vector<TokenSeq>&, const AttentionMask&,              \
      const std::vector<RowTarget>&);                                                            \
  template LossAndGrad<Real> loss_and_grad_ar<Real>(const ModelParams<Real>&,                    \
                                                    const std::vector<TokenSeq>&);               \
  template double ar_objective<Real>(const ModelParams<Real>&, const std::vector<TokenSeq>&);    \
  template LossAndGrad<Real> loss_and_grad_diffusion<Real>(                                      \
      const ModelParams<Real>&, const CorruptedBatch&, const AttentionMask&,                     \
      const DiffusionLossOptions&);                                                              \
  template double diffusion_objective<Real>(const ModelParams<Real>&, const CorruptedBatch&,     \
                                            const AttentionMask&, const DiffusionLossOptions&);

DLM_INSTANTIATE(float)
DLM_INSTANTIATE(double)

#undef DLM_INSTANTIATE

}  // namespace dlm
