#pragma once

// Toy SOFT transformer layer with a hand-written reverse pass.
//
//   u = LN1(x);  Q = K = u W_q;  V = u W_v
//   y = x + concat_h SOFT_h(Q, V)
//   z = y + GELU(LN2(y) W_1 + b_1) W_2 + b_2
//
// The classifier used for training adds learned position embeddings before
// the block, mean-pools the block output and applies a linear head.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <memory>
#include <numeric>
#include <optional>
#include <ostream>
#include <string>
#include <utility>
#include <vector>

#include "soft/dense_attention.hpp"
#include "soft/errors.hpp"
#include "soft/matrix.hpp"
#include "soft/nystrom_soft.hpp"
#include "soft/random.hpp"

namespace soft {

// A value with its reverse-mode adjoint. Adjoints accumulate across every
// use of the value until zero_grad().
struct Dual {
  Matrix value;
  Matrix adjoint;

  Dual() = default;
  explicit Dual(Matrix v) : value(std::move(v)), adjoint(value.rows(), value.cols()) {}

  void zero_grad() { adjoint.fill(0.0); }
  void accumulate(const Matrix& g) { adjoint += g; }
};

namespace nn {

inline constexpr double kLayerNormEps = 1e-5;

struct LayerNormCache {
  Matrix xhat;
  std::vector<double> inv_std;
};

// Per-token standardization with a learnable scale and shift (1×d each).
inline Matrix layer_norm(const Matrix& x, const Matrix& gain, const Matrix& bias, LayerNormCache& cache) {
  const std::size_t n = x.rows(), d = x.cols();
  cache.xhat = Matrix(n, d);
  cache.inv_std.assign(n, 0.0);
  Matrix out(n, d);
  for (std::size_t i = 0; i < n; ++i) {
    auto r = x.row(i);
    const double mean = std::accumulate(r.begin(), r.end(), 0.0) / static_cast<double>(d);
    double var = 0.0;
    for (double v : r) var += (v - mean) * (v - mean);
    var /= static_cast<double>(d);
    const double inv = 1.0 / std::sqrt(var + kLayerNormEps);
    cache.inv_std[i] = inv;
    for (std::size_t k = 0; k < d; ++k) {
      const double h = (r[k] - mean) * inv;
      cache.xhat(i, k) = h;
      out(i, k) = h * gain(0, k) + bias(0, k);
    }
  }
  return out;
}

inline Matrix layer_norm_backward(const Matrix& grad_out, const Matrix& gain, const LayerNormCache& cache,
                                  Matrix& grad_gain, Matrix& grad_bias) {
  const std::size_t n = grad_out.rows(), d = grad_out.cols();
  Matrix dx(n, d);
  for (std::size_t i = 0; i < n; ++i) {
    double mean_g = 0.0, mean_gx = 0.0;
    for (std::size_t k = 0; k < d; ++k) {
      const double g = grad_out(i, k);
      grad_gain(0, k) += g * cache.xhat(i, k);
      grad_bias(0, k) += g;
      const double gh = g * gain(0, k);
      mean_g += gh;
      mean_gx += gh * cache.xhat(i, k);
    }
    mean_g /= static_cast<double>(d);
    mean_gx /= static_cast<double>(d);
    for (std::size_t k = 0; k < d; ++k) {
      const double gh = grad_out(i, k) * gain(0, k);
      dx(i, k) = cache.inv_std[i] * (gh - mean_g - cache.xhat(i, k) * mean_gx);
    }
  }
  return dx;
}

inline constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)

// tanh approximation of GELU
inline double gelu(double x) {
  return 0.5 * x * (1.0 + std::tanh(kGeluC * (x + 0.044715 * x * x * x)));
}

inline double gelu_grad(double x) {
  const double u = kGeluC * (x + 0.044715 * x * x * x);
  const double t = std::tanh(u);
  return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * kGeluC * (1.0 + 3.0 * 0.044715 * x * x);
}

inline Matrix add_row_vector(Matrix a, const Matrix& row) {
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t k = 0; k < a.cols(); ++k) a(i, k) += row(0, k);
  return a;
}

inline Matrix column_sums(const Matrix& a) {
  Matrix s(1, a.cols());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t k = 0; k < a.cols(); ++k) s(0, k) += a(i, k);
  return s;
}

inline Matrix fan_in_uniform(std::size_t rows, std::size_t cols, std::size_t fan_in, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  return uniform_matrix(rows, cols, rng, -bound, bound);
}

}  // namespace nn

enum class AttentionMode { soft, exact };

struct BlockConfig {
  std::size_t d = 16;
  std::size_t heads = 2;
  Grid grid{8, 8};
  SamplingKind sampling = SamplingKind::convolution;
  std::size_t kernel = 2;  // window for conv / pool
  std::size_t m = 16;      // bottleneck length for random / biased
  std::uint64_t sampling_seed = 17;
  PinvConfig pinv{};
  bool normalized = true;
  std::size_t ffn_expansion = 4;
  InverseGradient inverse_gradient = InverseGradient::closed_form;
  AttentionMode attention = AttentionMode::soft;

  SamplingMethod sampling_method() const {
    switch (sampling) {
      case SamplingKind::convolution: return SamplingMethod::conv(kernel);
      case SamplingKind::average_pool: return SamplingMethod::pool(kernel);
      case SamplingKind::random: return SamplingMethod::random(m, sampling_seed);
      case SamplingKind::biased_first_m: return SamplingMethod::biased(m);
    }
    return {};
  }

  AttentionConfig attention_config() const {
    AttentionConfig cfg;
    cfg.d_e = d;
    cfg.heads = heads;
    cfg.sampling = sampling_method();
    cfg.m = cfg.sampling.output_count(grid);
    cfg.pinv = pinv;
    cfg.normalized = normalized;
    return cfg;
  }
};

// Forward intermediates kept for the reverse pass.
struct BlockTape {
  Matrix x;
  nn::LayerNormCache ln1, ln2;
  Matrix u, q, v, q_tilde;
  std::vector<SoftHeadCache> heads;
  std::vector<Matrix> exact_grams;  // exact attention mode only
  Matrix y, w, h_pre, h_act;
};

class SoftBlock {
 public:
  SoftBlock(const BlockConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
    cfg_.attention_config().validate(cfg_.grid);
    const std::size_t d = cfg_.d, e = cfg_.ffn_expansion * d;
    Rng rng(seed);
    ln1_gain = Dual(Matrix(1, d, 1.0));
    ln1_bias = Dual(Matrix(1, d));
    wq = Dual(nn::fan_in_uniform(d, d, d, rng));
    wv = Dual(nn::fan_in_uniform(d, d, d, rng));
    if (cfg_.sampling == SamplingKind::convolution) {
      const std::size_t taps = cfg_.kernel * cfg_.kernel;
      conv_w = Dual(nn::fan_in_uniform(taps * d, d, taps * d, rng));
      conv_b = Dual(Matrix(1, d));
    }
    ln2_gain = Dual(Matrix(1, d, 1.0));
    ln2_bias = Dual(Matrix(1, d));
    w1 = Dual(nn::fan_in_uniform(d, e, d, rng));
    b1 = Dual(Matrix(1, e));
    w2 = Dual(nn::fan_in_uniform(e, d, e, rng));
    b2 = Dual(Matrix(1, d));
  }

  const BlockConfig& config() const noexcept { return cfg_; }

  // Named learnable tensors. W_q doubles as W_k.
  std::vector<std::pair<std::string, Dual*>> parameters() {
    std::vector<std::pair<std::string, Dual*>> p{{"ln1_gain", &ln1_gain}, {"ln1_bias", &ln1_bias},
                                                 {"w_qk", &wq},           {"w_v", &wv}};
    if (cfg_.sampling == SamplingKind::convolution) {
      p.emplace_back("conv_w", &conv_w);
      p.emplace_back("conv_b", &conv_b);
    }
    p.insert(p.end(), {{"ln2_gain", &ln2_gain}, {"ln2_bias", &ln2_bias}, {"ffn_w1", &w1},
                       {"ffn_b1", &b1}, {"ffn_w2", &w2}, {"ffn_b2", &b2}});
    return p;
  }

  std::size_t parameter_count() {
    std::size_t c = 0;
    for (auto& entry : parameters()) c += entry.second->value.size();
    return c;
  }

  ProjectionSet projection() const { return ProjectionSet(wq.value, wv.value); }

  Matrix forward(const TokenMatrix& x, BlockTape* tape = nullptr) const {
    if (x.rows() != cfg_.grid.tokens() || x.cols() != cfg_.d)
      throw ShapeError("SoftBlock::forward: expected " + std::to_string(cfg_.grid.tokens()) + "x" +
                       std::to_string(cfg_.d) + " tokens, got " + shape_str(x));
    BlockTape local;
    BlockTape& t = tape ? *tape : local;
    const std::size_t d = cfg_.d, dh = d / cfg_.heads;
    t.x = x;
    t.u = nn::layer_norm(x, ln1_gain.value, ln1_bias.value, t.ln1);
    t.q = matmul(t.u, wq.value);
    t.v = matmul(t.u, wv.value);
    Matrix attn(x.rows(), d);
    t.heads.clear();
    t.exact_grams.clear();
    if (cfg_.attention == AttentionMode::soft) {
      ConvSamplerWeights conv = conv_weights();
      t.q_tilde = sample_bottleneck(t.q, cfg_.grid, cfg_.sampling_method(), &conv);
      t.heads.resize(cfg_.heads);
      for (std::size_t h = 0; h < cfg_.heads; ++h) {
        Matrix out = soft_head(slice_cols(t.q, h * dh, dh), slice_cols(t.q_tilde, h * dh, dh),
                               slice_cols(t.v, h * dh, dh), cfg_.pinv, cfg_.normalized, &t.heads[h]);
        set_cols(attn, h * dh, out);
      }
    } else {
      for (std::size_t h = 0; h < cfg_.heads; ++h) {
        Matrix qh = slice_cols(t.q, h * dh, dh);
        t.exact_grams.push_back(gaussian_gram(qh, dh).values);
        set_cols(attn, h * dh, matmul(t.exact_grams.back(), slice_cols(t.v, h * dh, dh)));
      }
    }
    t.y = x + attn;
    t.w = nn::layer_norm(t.y, ln2_gain.value, ln2_bias.value, t.ln2);
    t.h_pre = nn::add_row_vector(matmul(t.w, w1.value), b1.value);
    t.h_act = t.h_pre;
    for (double& a : t.h_act.flat()) a = nn::gelu(a);
    Matrix z = t.y + nn::add_row_vector(matmul(t.h_act, w2.value), b2.value);
    if (!all_finite(z)) throw DivergenceError("SoftBlock::forward: non-finite output", last_trace(t));
    return z;
  }

  // Accumulates parameter adjoints and returns dL/dx.
  Matrix backward(const BlockTape* tape, const Matrix& grad_z) {
    if (!tape || tape->y.empty()) throw UsageError("SoftBlock::backward: no forward tape recorded");
    const BlockTape& t = *tape;
    require_same_shape(t.y, grad_z, "SoftBlock::backward");
    const std::size_t d = cfg_.d, dh = d / cfg_.heads;

    // feed-forward branch
    w2.accumulate(matmul_tn(t.h_act, grad_z));
    b2.accumulate(nn::column_sums(grad_z));
    Matrix grad_h = matmul_nt(grad_z, w2.value);
    for (std::size_t i = 0; i < grad_h.size(); ++i) grad_h.data()[i] *= nn::gelu_grad(t.h_pre.data()[i]);
    w1.accumulate(matmul_tn(t.w, grad_h));
    b1.accumulate(nn::column_sums(grad_h));
    Matrix grad_w = matmul_nt(grad_h, w1.value);
    Matrix grad_y = grad_z;
    grad_y += nn::layer_norm_backward(grad_w, ln2_gain.value, t.ln2, ln2_gain.adjoint, ln2_bias.adjoint);

    // attention branch
    Matrix grad_q(t.q.rows(), d), grad_v(t.v.rows(), d);
    if (cfg_.attention == AttentionMode::soft) {
      Matrix grad_qt(t.q_tilde.rows(), d);
      for (std::size_t h = 0; h < cfg_.heads; ++h) {
        auto g = soft_head_backward(slice_cols(t.q, h * dh, dh), slice_cols(t.q_tilde, h * dh, dh),
                                    slice_cols(t.v, h * dh, dh), t.heads[h], slice_cols(grad_y, h * dh, dh),
                                    cfg_.pinv, cfg_.inverse_gradient);
        add_cols(grad_q, h * dh, g.grad_q);
        add_cols(grad_qt, h * dh, g.grad_q_tilde);
        set_cols(grad_v, h * dh, g.grad_v);
      }
      ConvSamplerWeights conv = conv_weights();
      auto gs = sample_bottleneck_backward(t.q, cfg_.grid, cfg_.sampling_method(), &conv, grad_qt);
      grad_q += gs.grad_q;
      if (cfg_.sampling == SamplingKind::convolution) {
        conv_w.accumulate(gs.grad_conv_weight);
        conv_b.accumulate(gs.grad_conv_bias);
      }
    } else {
      for (std::size_t h = 0; h < cfg_.heads; ++h) {
        const Matrix& s = t.exact_grams[h];
        Matrix go = slice_cols(grad_y, h * dh, dh);
        Matrix qh = slice_cols(t.q, h * dh, dh);
        set_cols(grad_v, h * dh, matmul_tn(s, go));
        Matrix grad_s = matmul_nt(go, slice_cols(t.v, h * dh, dh));
        Matrix gq(qh.rows(), dh);
        gaussian_gram_backward(qh, qh, s, grad_s, dh, gq, gq);
        add_cols(grad_q, h * dh, gq);
      }
    }
    wq.accumulate(matmul_tn(t.u, grad_q));
    wv.accumulate(matmul_tn(t.u, grad_v));
    Matrix grad_u = matmul_nt(grad_q, wq.value);
    grad_u += matmul_nt(grad_v, wv.value);
    Matrix grad_x = grad_y;
    grad_x += nn::layer_norm_backward(grad_u, ln1_gain.value, t.ln1, ln1_gain.adjoint, ln1_bias.adjoint);
    return grad_x;
  }

  Dual ln1_gain, ln1_bias, wq, wv, conv_w, conv_b, ln2_gain, ln2_bias, w1, b1, w2, b2;

 private:
  ConvSamplerWeights conv_weights() const {
    if (cfg_.sampling != SamplingKind::convolution) return {};
    return {conv_w.value, conv_b.value};
  }

  static std::vector<double> last_trace(const BlockTape& t) {
    return t.heads.empty() ? std::vector<double>{} : t.heads.back().pinv.trace;
  }

  BlockConfig cfg_;
};


struct ClassifierConfig {
  BlockConfig block{};
  std::size_t classes = 4;
  double position_std = 0.1;
};

struct ClassifierTape {
  BlockTape block;
  Matrix pooled;               // 1×d
  std::vector<double> probs;   // softmax of the logits
};

// position embedding -> SOFT block -> mean pool -> linear head
class ToyClassifier {
 public:
  ToyClassifier(const ClassifierConfig& cfg, std::uint64_t seed)
      : cfg_(cfg), block_(cfg.block, derive_seed(seed, 1)) {
    if (cfg_.classes < 2) throw ConfigError("ToyClassifier: need at least 2 classes");
    Rng rng(derive_seed(seed, 2));
    const std::size_t n = cfg_.block.grid.tokens(), d = cfg_.block.d;
    pos_emb = Dual(gaussian_matrix(n, d, rng, cfg_.position_std));
    head_w = Dual(nn::fan_in_uniform(d, cfg_.classes, d, rng));
    head_b = Dual(Matrix(1, cfg_.classes));
  }

  const ClassifierConfig& config() const noexcept { return cfg_; }
  SoftBlock& block() noexcept { return block_; }
  const SoftBlock& block() const noexcept { return block_; }

  std::vector<std::pair<std::string, Dual*>> parameters() {
    std::vector<std::pair<std::string, Dual*>> p{{"pos_emb", &pos_emb}};
    for (auto& [name, ptr] : block_.parameters()) p.emplace_back("block." + name, ptr);
    p.emplace_back("head_w", &head_w);
    p.emplace_back("head_b", &head_b);
    return p;
  }

  void zero_grad() {
    for (auto& entry : parameters()) entry.second->zero_grad();
  }

  std::size_t parameter_count() {
    std::size_t c = 0;
    for (auto& entry : parameters()) c += entry.second->value.size();
    return c;
  }

  Matrix logits(const TokenMatrix& x, ClassifierTape* tape = nullptr) const {
    ClassifierTape local;
    ClassifierTape& t = tape ? *tape : local;
    require_same_shape(x, pos_emb.value, "ToyClassifier::logits");
    Matrix z = block_.forward(x + pos_emb.value, &t.block);
    t.pooled = nn::column_sums(z) * (1.0 / static_cast<double>(z.rows()));
    return matmul(t.pooled, head_w.value) + head_b.value;
  }

  // Cross-entropy of one sample; fills the tape for backward().
  double loss(const TokenMatrix& x, std::size_t label, ClassifierTape* tape = nullptr) const {
    if (label >= cfg_.classes) throw ConfigError("ToyClassifier::loss: label out of range");
    ClassifierTape local;
    ClassifierTape& t = tape ? *tape : local;
    Matrix lg = logits(x, &t);
    const double mx = *std::max_element(lg.flat().begin(), lg.flat().end());
    double z = 0.0;
    t.probs.assign(cfg_.classes, 0.0);
    for (std::size_t c = 0; c < cfg_.classes; ++c) z += (t.probs[c] = std::exp(lg(0, c) - mx));
    for (double& p : t.probs) p /= z;
    return -(lg(0, label) - mx - std::log(z));
  }

  std::size_t predict(const TokenMatrix& x) const {
    Matrix lg = logits(x);
    return static_cast<std::size_t>(std::max_element(lg.flat().begin(), lg.flat().end()) - lg.flat().begin());
  }

  // Adds scale * dLoss/dθ to every adjoint. Returns dLoss/dx.
  Matrix backward(const ClassifierTape* tape, std::size_t label, double scale = 1.0) {
    if (!tape || tape->probs.empty()) throw UsageError("ToyClassifier::backward: no forward tape recorded");
    const ClassifierTape& t = *tape;
    Matrix grad_logits(1, cfg_.classes);
    for (std::size_t c = 0; c < cfg_.classes; ++c)
      grad_logits(0, c) = scale * (t.probs[c] - (c == label ? 1.0 : 0.0));
    head_w.accumulate(matmul_tn(t.pooled, grad_logits));
    head_b.accumulate(grad_logits);
    Matrix grad_pooled = matmul_nt(grad_logits, head_w.value);
    const std::size_t n = t.block.y.rows();
    Matrix grad_z(n, cfg_.block.d);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t k = 0; k < cfg_.block.d; ++k) grad_z(i, k) = grad_pooled(0, k) / static_cast<double>(n);
    Matrix grad_x = block_.backward(&t.block, grad_z);
    pos_emb.accumulate(grad_x);
    return grad_x;
  }

  // Largest final pinv residual over the heads of the last forward.
  static double pinv_residual(const ClassifierTape& t) {
    double r = 0.0;
    for (const auto& h : t.block.heads) r = std::max(r, h.pinv.final_residual());
    return r;
  }

  Dual pos_emb, head_w, head_b;

 private:
  ClassifierConfig cfg_;
  SoftBlock block_;
};

// Marker-in-quadrant task: every token is Gaussian noise, and one token inside
// the class's quadrant gets a fixed marker vector added. The mean of the
// tokens carries almost no class information, so a linear probe on it fails.
struct ToyTaskConfig {
  Grid grid{8, 8};
  std::size_t d = 16;
  std::size_t classes = 4;
  std::size_t samples = 256;
  double noise_std = 1.0;
  double marker_norm = 5.0;
  double max_probe_accuracy = 0.7;
  std::uint64_t seed = 1;
};

struct ToyTask {
  ToyTaskConfig cfg;
  std::vector<Matrix> inputs;
  std::vector<std::size_t> labels;
  Matrix marker;
  double probe_accuracy = 0.0;
};

// Multinomial logistic regression on mean-pooled tokens, fitted by full-batch
// gradient descent. Returns its training accuracy.
inline double mean_pool_probe_accuracy(const std::vector<Matrix>& inputs, const std::vector<std::size_t>& labels,
                                       std::size_t classes, int steps = 500, double lr = 0.5) {
  if (inputs.empty()) return 0.0;
  const std::size_t d = inputs.front().cols(), s = inputs.size();
  std::vector<Matrix> feats;
  for (const auto& x : inputs) feats.push_back(nn::column_sums(x) * (1.0 / static_cast<double>(x.rows())));
  Matrix w(d, classes), b(1, classes);
  auto probs_of = [&](const Matrix& f) {
    Matrix lg = matmul(f, w) + b;
    const double mx = *std::max_element(lg.flat().begin(), lg.flat().end());
    double z = 0.0;
    for (double& v : lg.flat()) z += (v = std::exp(v - mx));
    return lg * (1.0 / z);
  };
  for (int it = 0; it < steps; ++it) {
    Matrix gw(d, classes), gb(1, classes);
    for (std::size_t i = 0; i < s; ++i) {
      Matrix g = probs_of(feats[i]);
      g(0, labels[i]) -= 1.0;
      gw += matmul_tn(feats[i], g);
      gb += g;
    }
    w -= gw * (lr / static_cast<double>(s));
    b -= gb * (lr / static_cast<double>(s));
  }
  std::size_t correct = 0;
  for (std::size_t i = 0; i < s; ++i) {
    Matrix p = probs_of(feats[i]);
    auto best = std::max_element(p.flat().begin(), p.flat().end()) - p.flat().begin();
    correct += static_cast<std::size_t>(best) == labels[i];
  }
  return static_cast<double>(correct) / static_cast<double>(s);
}

inline ToyTask make_toy_task(const ToyTaskConfig& cfg) {
  if (cfg.classes != 4) throw ConfigError("make_toy_task: the quadrant task has exactly 4 classes");
  if (cfg.grid.h < 2 || cfg.grid.w < 2 || cfg.grid.h % 2 || cfg.grid.w % 2)
    throw ConfigError("make_toy_task: grid sides must be even");
  if (cfg.samples < cfg.classes || cfg.d == 0) throw ConfigError("make_toy_task: too few samples");
  ToyTask task;
  task.cfg = cfg;
  Rng rng(cfg.seed);
  task.marker = gaussian_matrix(1, cfg.d, rng);
  task.marker *= cfg.marker_norm / frobenius(task.marker);
  const std::size_t hh = cfg.grid.h / 2, hw = cfg.grid.w / 2;
  std::uniform_int_distribution<std::size_t> row_pick(0, hh - 1), col_pick(0, hw - 1);
  for (std::size_t s = 0; s < cfg.samples; ++s) {
    const std::size_t label = s % cfg.classes;
    Matrix x = gaussian_matrix(cfg.grid.tokens(), cfg.d, rng, cfg.noise_std);
    const std::size_t r = row_pick(rng) + (label / 2) * hh, c = col_pick(rng) + (label % 2) * hw;
    const std::size_t tok = r * cfg.grid.w + c;
    for (std::size_t k = 0; k < cfg.d; ++k) x(tok, k) += task.marker(0, k);
    task.inputs.push_back(std::move(x));
    task.labels.push_back(label);
  }
  task.probe_accuracy = mean_pool_probe_accuracy(task.inputs, task.labels, cfg.classes);
  if (task.probe_accuracy >= cfg.max_probe_accuracy)
    throw ConfigError("make_toy_task: mean-pool probe reaches " + std::to_string(task.probe_accuracy) +
                      ", task is too easy");
  return task;
}

enum class OptimizerKind { adamw, sgd };

struct TrainConfig {
  std::size_t epochs = 50;
  std::size_t batch_size = 16;
  double lr = 3e-3;
  double weight_decay = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  OptimizerKind optimizer = OptimizerKind::adamw;
  std::uint64_t seed = 0;  // minibatch order
};

// AdamW with decoupled weight decay, or plain SGD.
class Optimizer {
 public:
  Optimizer(std::vector<std::pair<std::string, Dual*>> params, const TrainConfig& cfg)
      : params_(std::move(params)), cfg_(cfg) {
    for (auto& [name, p] : params_) {
      m_.emplace_back(p->value.rows(), p->value.cols());
      v_.emplace_back(p->value.rows(), p->value.cols());
    }
  }

  void step() {
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
      Dual& p = *params_[i].second;
      double* w = p.value.data();
      const double* g = p.adjoint.data();
      if (cfg_.optimizer == OptimizerKind::sgd) {
        for (std::size_t k = 0; k < p.value.size(); ++k) w[k] -= cfg_.lr * g[k];
        continue;
      }
      double* m = m_[i].data();
      double* v = v_[i].data();
      for (std::size_t k = 0; k < p.value.size(); ++k) {
        m[k] = cfg_.beta1 * m[k] + (1.0 - cfg_.beta1) * g[k];
        v[k] = cfg_.beta2 * v[k] + (1.0 - cfg_.beta2) * g[k] * g[k];
        w[k] -= cfg_.lr * ((m[k] / bc1) / (std::sqrt(v[k] / bc2) + cfg_.eps) + cfg_.weight_decay * w[k]);
      }
    }
  }

 private:
  std::vector<std::pair<std::string, Dual*>> params_;
  TrainConfig cfg_;
  std::vector<Matrix> m_, v_;
  long t_ = 0;
};

struct EpochRecord {
  std::size_t epoch = 0;
  double loss = 0.0;                // mean training loss (epoch 0: before any update)
  double accuracy = 0.0;            // accuracy after the epoch's updates
  double mean_pinv_residual = 0.0;  // over the epoch's forward passes
};

struct TrainHistory {
  std::vector<EpochRecord> epochs;

  static std::string csv_header() { return "epoch,loss,accuracy,mean_pinv_residual"; }
  void write_csv(std::ostream& os) const {
    os << csv_header() << '\n';
    os.precision(17);
    for (const auto& e : epochs)
      os << e.epoch << ',' << e.loss << ',' << e.accuracy << ',' << e.mean_pinv_residual << '\n';
  }
};

struct Evaluation {
  double loss = 0.0, accuracy = 0.0, mean_pinv_residual = 0.0;
};

inline Evaluation evaluate(const ToyClassifier& model, const ToyTask& task) {
  Evaluation ev;
  std::size_t correct = 0;
  for (std::size_t i = 0; i < task.inputs.size(); ++i) {
    ClassifierTape t;
    ev.loss += model.loss(task.inputs[i], task.labels[i], &t);
    ev.mean_pinv_residual += ToyClassifier::pinv_residual(t);
    auto best = std::max_element(t.probs.begin(), t.probs.end()) - t.probs.begin();
    correct += static_cast<std::size_t>(best) == task.labels[i];
  }
  const double s = static_cast<double>(task.inputs.size());
  ev.loss /= s;
  ev.mean_pinv_residual /= s;
  ev.accuracy = static_cast<double>(correct) / s;
  return ev;
}

// Deterministic minibatch training. Epoch 0 of the history is the untrained model.
inline TrainHistory train_toy(ToyClassifier& model, const ToyTask& task, const TrainConfig& cfg) {
  if (cfg.batch_size == 0) throw ConfigError("train_toy: batch_size must be >= 1");
  if (!(cfg.lr >= 0.0) || !std::isfinite(cfg.lr)) throw ConfigError("train_toy: lr must be finite and >= 0");
  if (task.inputs.empty()) throw ConfigError("train_toy: empty task");
  TrainHistory hist;
  Evaluation ev = evaluate(model, task);
  hist.epochs.push_back({0, ev.loss, ev.accuracy, ev.mean_pinv_residual});
  Optimizer opt(model.parameters(), cfg);
  Rng rng(cfg.seed);
  std::vector<std::size_t> order(task.inputs.size());
  std::iota(order.begin(), order.end(), 0);
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0.0, resid_sum = 0.0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      const double scale = 1.0 / static_cast<double>(end - start);
      model.zero_grad();
      for (std::size_t b = start; b < end; ++b) {
        const std::size_t i = order[b];
        ClassifierTape t;
        const double l = model.loss(task.inputs[i], task.labels[i], &t);
        if (!std::isfinite(l)) {
          const auto& heads = t.block.heads;
          throw DivergenceError("train_toy: non-finite loss at epoch " + std::to_string(epoch),
                                heads.empty() ? std::vector<double>{} : heads.back().pinv.trace);
        }
        loss_sum += l;
        resid_sum += ToyClassifier::pinv_residual(t);
        model.backward(&t, task.labels[i], scale);
      }
      opt.step();
    }
    const double s = static_cast<double>(order.size());
    ev = evaluate(model, task);
    hist.epochs.push_back({epoch, loss_sum / s, ev.accuracy, resid_sum / s});
  }
  return hist;
}

}  // namespace soft
