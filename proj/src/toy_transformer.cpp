// Copyright 2026 The looptrap Authors
// SPDX-License-Identifier: Apache-2.0

#include "looptrap/toy_transformer.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <random>

#include "looptrap/errors.hpp"

namespace looptrap {

namespace {

using Eigen::MatrixXd;
using Eigen::VectorXd;

constexpr double kLayerNormEps = 1e-5;
constexpr double kNegInf = -std::numeric_limits<double>::infinity();

struct LayerNormCache {
  MatrixXd xhat;
  VectorXd inv_std;
};

MatrixXd layer_norm(const MatrixXd& x, const VectorXd& gain, const VectorXd& bias, bool enabled,
                    LayerNormCache* cache) {
  if (!enabled) {
    if (cache) cache->xhat = x;
    return x;
  }
  const auto n = static_cast<double>(x.cols());
  MatrixXd xhat(x.rows(), x.cols());
  VectorXd inv_std(x.rows());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const double mean = x.row(r).sum() / n;
    const auto centered = x.row(r).array() - mean;
    const double var = centered.square().sum() / n;
    inv_std(r) = 1.0 / std::sqrt(var + kLayerNormEps);
    xhat.row(r) = centered * inv_std(r);
  }
  MatrixXd y = (xhat.array().rowwise() * gain.transpose().array()).rowwise() + bias.transpose().array();
  if (cache) {
    cache->xhat = std::move(xhat);
    cache->inv_std = std::move(inv_std);
  }
  return y;
}

MatrixXd layer_norm_backward(const MatrixXd& dy, const VectorXd& gain, bool enabled,
                             const LayerNormCache& cache) {
  if (!enabled) return dy;
  const auto n = static_cast<double>(dy.cols());
  MatrixXd dx(dy.rows(), dy.cols());
  for (Eigen::Index r = 0; r < dy.rows(); ++r) {
    const Eigen::RowVectorXd dxhat = dy.row(r).array() * gain.transpose().array();
    const double mean_d = dxhat.sum() / n;
    const double mean_dx = (dxhat.array() * cache.xhat.row(r).array()).sum() / n;
    dx.row(r) = cache.inv_std(r) *
                (dxhat.array() - mean_d - cache.xhat.row(r).array() * mean_dx);
  }
  return dx;
}

constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)

double gelu(double x) { return 0.5 * x * (1.0 + std::tanh(kGeluC * (x + 0.044715 * x * x * x))); }

double gelu_grad(double x) {
  const double t = std::tanh(kGeluC * (x + 0.044715 * x * x * x));
  return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * kGeluC * (1.0 + 3.0 * 0.044715 * x * x);
}

// Row-wise causal softmax of `scores` where row i is query position
// `first_query + i` over keys [0, scores.cols()).
MatrixXd causal_softmax(MatrixXd scores, std::size_t first_query) {
  for (Eigen::Index r = 0; r < scores.rows(); ++r) {
    const auto last_key = static_cast<Eigen::Index>(first_query) + r;
    for (Eigen::Index c = last_key + 1; c < scores.cols(); ++c) scores(r, c) = kNegInf;
    const double mx = scores.row(r).head(last_key + 1).maxCoeff();
    double sum = 0.0;
    for (Eigen::Index c = 0; c <= last_key; ++c) {
      scores(r, c) = std::exp(scores(r, c) - mx);
      sum += scores(r, c);
    }
    for (Eigen::Index c = 0; c <= last_key; ++c) scores(r, c) /= sum;
    for (Eigen::Index c = last_key + 1; c < scores.cols(); ++c) scores(r, c) = 0.0;
  }
  return scores;
}

struct BlockCache {
  LayerNormCache ln1;
  MatrixXd a;
  MatrixXd q, k, v;
  std::vector<MatrixXd> probs;
  MatrixXd x_mid;
  LayerNormCache ln2;
  MatrixXd m;
  MatrixXd h_pre;
};

std::vector<double> row_to_vector(const MatrixXd& m, Eigen::Index r) {
  std::vector<double> out(static_cast<std::size_t>(m.cols()));
  for (Eigen::Index c = 0; c < m.cols(); ++c) out[static_cast<std::size_t>(c)] = m(r, c);
  return out;
}

}  // namespace

struct ToyTransformer::Forward {
  std::vector<BlockCache> blocks;
  LayerNormCache ln_f;
  MatrixXd logits;
};

ToyWeights ToyWeights::zeros(const ToyTransformerConfig& cfg) {
  const auto V = static_cast<Eigen::Index>(cfg.vocab_size);
  const auto d = static_cast<Eigen::Index>(cfg.width);
  const auto h = static_cast<Eigen::Index>(cfg.mlp_hidden);
  ToyWeights w;
  w.token_embedding = MatrixXd::Zero(V, d);
  w.position_embedding = MatrixXd::Zero(static_cast<Eigen::Index>(cfg.context), d);
  for (std::size_t b = 0; b < cfg.blocks; ++b) {
    ToyBlockWeights blk;
    blk.ln1_gain = VectorXd::Ones(d);
    blk.ln1_bias = VectorXd::Zero(d);
    blk.ln2_gain = VectorXd::Ones(d);
    blk.ln2_bias = VectorXd::Zero(d);
    blk.wq = blk.wk = blk.wv = blk.wo = MatrixXd::Zero(d, d);
    blk.w_in = MatrixXd::Zero(d, h);
    blk.b_in = VectorXd::Zero(h);
    blk.w_out = MatrixXd::Zero(h, d);
    blk.b_out = VectorXd::Zero(d);
    w.blocks.push_back(std::move(blk));
  }
  w.final_gain = VectorXd::Ones(d);
  w.final_bias = VectorXd::Zero(d);
  w.unembed = MatrixXd::Zero(d, V);
  w.unembed_bias = VectorXd::Zero(V);
  return w;
}

ToyWeights ToyWeights::random(const ToyTransformerConfig& cfg) {
  ToyWeights w = zeros(cfg);
  std::mt19937_64 rng(cfg.seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  const double d = static_cast<double>(cfg.width);
  auto fill = [&](auto& m, double scale) {
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = scale * normal(rng);
  };
  fill(w.token_embedding, 1.0);
  for (Eigen::Index p = 0; p < w.position_embedding.rows(); ++p) {
    for (Eigen::Index i = 0; i < w.position_embedding.cols(); ++i) {
      const double freq = std::pow(10000.0, -2.0 * static_cast<double>(i / 2) / d);
      const double angle = static_cast<double>(p) * freq;
      w.position_embedding(p, i) = 0.5 * ((i % 2 == 0) ? std::sin(angle) : std::cos(angle));
    }
  }
  const double attn_scale = 1.0 / std::sqrt(d);
  for (auto& blk : w.blocks) {
    fill(blk.wq, attn_scale);
    fill(blk.wk, attn_scale);
    fill(blk.wv, attn_scale);
    fill(blk.wo, attn_scale);
    fill(blk.w_in, attn_scale);
    fill(blk.b_in, 0.1);
    if (cfg.mlp_hidden > 0) fill(blk.w_out, 1.0 / std::sqrt(static_cast<double>(cfg.mlp_hidden)));
    fill(blk.b_out, 0.1);
    fill(blk.ln1_bias, 0.05);
    fill(blk.ln2_bias, 0.05);
  }
  fill(w.unembed, attn_scale);
  fill(w.unembed_bias, 0.5);
  return w;
}

std::shared_ptr<const PieceTokenizer> make_toy_tokenizer(std::size_t vocab_size) {
  std::set<TokenId> specials;
  for (TokenId id : ToyVocabulary::special_ids()) {
    if (static_cast<std::size_t>(id) < vocab_size) specials.insert(id);
  }
  return std::make_shared<const PieceTokenizer>(ToyVocabulary::pieces(vocab_size), specials);
}

ChatTemplate toy_chat_template() {
  return {"<|system|>be helpful.<|end|>", "<|user|>", "<|end|>", "<|assistant|>"};
}

ToyTransformer::ToyTransformer(ToyTransformerConfig cfg, std::string id)
    : ToyTransformer(cfg, ToyWeights::random(cfg), std::move(id)) {}

ToyTransformer::ToyTransformer(ToyTransformerConfig cfg, ToyWeights weights, std::string id)
    : ToyTransformer(cfg, std::move(weights), std::move(id), make_toy_tokenizer(cfg.vocab_size),
                     toy_chat_template()) {}

ToyTransformer::ToyTransformer(ToyTransformerConfig cfg, ToyWeights weights, std::string id,
                               std::shared_ptr<const Tokenizer> tokenizer, ChatTemplate tmpl)
    : cfg_(cfg),
      weights_(std::move(weights)),
      id_(std::move(id)),
      tokenizer_(std::move(tokenizer)),
      template_(std::move(tmpl)) {
  if (cfg_.heads == 0 || cfg_.width % cfg_.heads != 0) {
    throw InvalidArgumentError("toy transformer width must be divisible by heads");
  }
  if (tokenizer_->vocab_size() != cfg_.vocab_size) {
    throw InvalidArgumentError("tokenizer vocabulary does not match model vocabulary");
  }
  if (weights_.blocks.size() != cfg_.blocks ||
      weights_.token_embedding.rows() != static_cast<Eigen::Index>(cfg_.vocab_size) ||
      weights_.token_embedding.cols() != static_cast<Eigen::Index>(cfg_.width) ||
      weights_.position_embedding.rows() != static_cast<Eigen::Index>(cfg_.context)) {
    throw InvalidArgumentError("toy transformer weights do not match config");
  }
}

std::optional<TokenId> ToyTransformer::eos_id() const {
  if (cfg_.vocab_size > static_cast<std::size_t>(ToyVocabulary::kEos)) return ToyVocabulary::kEos;
  return std::nullopt;
}

void ToyTransformer::check_tokens(const TokenSequence& tokens) const {
  for (TokenId t : tokens) {
    if (t < 0 || static_cast<std::size_t>(t) >= cfg_.vocab_size) {
      throw OutOfRangeError("token id " + std::to_string(t) + " outside vocabulary");
    }
  }
  if (tokens.size() > cfg_.context) {
    throw ContextOverflowError("sequence of " + std::to_string(tokens.size()) +
                               " tokens exceeds context " + std::to_string(cfg_.context));
  }
}

MatrixXd ToyTransformer::embed(const TokenSequence& tokens) const {
  MatrixXd x(static_cast<Eigen::Index>(tokens.size()), static_cast<Eigen::Index>(cfg_.width));
  for (std::size_t p = 0; p < tokens.size(); ++p) {
    const auto r = static_cast<Eigen::Index>(p);
    x.row(r) = weights_.token_embedding.row(tokens[p]) + weights_.position_embedding.row(r);
  }
  return x;
}

ToyTransformer::Forward ToyTransformer::run_forward(const MatrixXd& inputs, bool) const {
  const auto hd = static_cast<Eigen::Index>(cfg_.width / cfg_.heads);
  const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
  Forward fwd;
  MatrixXd x = inputs;
  for (const auto& w : weights_.blocks) {
    BlockCache c;
    c.a = layer_norm(x, w.ln1_gain, w.ln1_bias, cfg_.layer_norm, &c.ln1);
    c.q = c.a * w.wq;
    c.k = c.a * w.wk;
    c.v = c.a * w.wv;
    MatrixXd ctx(x.rows(), x.cols());
    for (std::size_t h = 0; h < cfg_.heads; ++h) {
      const auto off = static_cast<Eigen::Index>(h) * hd;
      MatrixXd p = causal_softmax(scale * c.q.middleCols(off, hd) * c.k.middleCols(off, hd).transpose(), 0);
      ctx.middleCols(off, hd) = p * c.v.middleCols(off, hd);
      c.probs.push_back(std::move(p));
    }
    c.x_mid = x + ctx * w.wo;
    x = c.x_mid;
    if (cfg_.mlp_hidden > 0) {
      c.m = layer_norm(c.x_mid, w.ln2_gain, w.ln2_bias, cfg_.layer_norm, &c.ln2);
      c.h_pre = (c.m * w.w_in).rowwise() + w.b_in.transpose();
      const MatrixXd act = c.h_pre.unaryExpr([](double v) { return gelu(v); });
      x = (c.x_mid + act * w.w_out).rowwise() + w.b_out.transpose();
    }
    fwd.blocks.push_back(std::move(c));
  }
  const MatrixXd f = layer_norm(x, weights_.final_gain, weights_.final_bias, cfg_.layer_norm, &fwd.ln_f);
  fwd.logits = (f * weights_.unembed).rowwise() + weights_.unembed_bias.transpose();
  return fwd;
}

MatrixXd ToyTransformer::backward_to_inputs(const Forward& fwd, const MatrixXd& dlogits) const {
  const auto hd = static_cast<Eigen::Index>(cfg_.width / cfg_.heads);
  const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
  MatrixXd dx = layer_norm_backward(dlogits * weights_.unembed.transpose(), weights_.final_gain,
                                    cfg_.layer_norm, fwd.ln_f);
  for (std::size_t b = cfg_.blocks; b-- > 0;) {
    const auto& w = weights_.blocks[b];
    const auto& c = fwd.blocks[b];
    MatrixXd dx_mid = dx;
    if (cfg_.mlp_hidden > 0) {
      MatrixXd dh = dx * w.w_out.transpose();
      dh.array() *= c.h_pre.unaryExpr([](double v) { return gelu_grad(v); }).array();
      dx_mid += layer_norm_backward(dh * w.w_in.transpose(), w.ln2_gain, cfg_.layer_norm, c.ln2);
    }
    const MatrixXd dctx = dx_mid * w.wo.transpose();
    MatrixXd dq(dctx.rows(), dctx.cols()), dk(dctx.rows(), dctx.cols()), dv(dctx.rows(), dctx.cols());
    for (std::size_t h = 0; h < cfg_.heads; ++h) {
      const auto off = static_cast<Eigen::Index>(h) * hd;
      const MatrixXd& p = c.probs[h];
      const auto dctx_h = dctx.middleCols(off, hd);
      const MatrixXd dp = dctx_h * c.v.middleCols(off, hd).transpose();
      dv.middleCols(off, hd) = p.transpose() * dctx_h;
      const Eigen::VectorXd row_dot = (dp.array() * p.array()).rowwise().sum();
      const MatrixXd ds = p.array() * (dp.colwise() - row_dot).array();
      dq.middleCols(off, hd) = scale * ds * c.k.middleCols(off, hd);
      dk.middleCols(off, hd) = scale * ds.transpose() * c.q.middleCols(off, hd);
    }
    const MatrixXd da = dq * w.wq.transpose() + dk * w.wk.transpose() + dv * w.wv.transpose();
    dx = dx_mid + layer_norm_backward(da, w.ln1_gain, cfg_.layer_norm, c.ln1);
  }
  return dx;
}

MatrixXd ToyTransformer::logits(const TokenSequence& tokens) const {
  check_tokens(tokens);
  if (tokens.empty()) return MatrixXd(0, static_cast<Eigen::Index>(cfg_.vocab_size));
  return run_forward(embed(tokens), false).logits;
}

namespace {

TokenSequence teacher_forced_input(const TokenSequence& prompt, const TokenSequence& continuation) {
  TokenSequence seq = prompt;
  if (!continuation.empty()) seq.insert(seq.end(), continuation.begin(), continuation.end() - 1);
  return seq;
}

}  // namespace

std::vector<StepDistribution> ToyTransformer::next_distributions(const TokenSequence& prompt,
                                                                 const TokenSequence& continuation) const {
  if (prompt.empty()) throw InvalidArgumentError("prompt must be non-empty");
  check_tokens(continuation);
  if (prompt.size() + continuation.size() > cfg_.context) {
    throw ContextOverflowError("prompt + continuation exceeds context " + std::to_string(cfg_.context));
  }
  if (continuation.empty()) return {};
  const MatrixXd z = logits(teacher_forced_input(prompt, continuation));
  std::vector<StepDistribution> out;
  out.reserve(continuation.size());
  for (std::size_t i = 0; i < continuation.size(); ++i) {
    const auto row = static_cast<Eigen::Index>(prompt.size() - 1 + i);
    out.push_back({softmax(row_to_vector(z, row)), i + 1});
  }
  return out;
}

namespace {

// d(loss)/d(logits) for the rows carrying the output distributions.
MatrixXd logits_gradient(const std::vector<StepDistribution>& dists,
                         const std::vector<std::vector<double>>& dprobs, Eigen::Index rows,
                         Eigen::Index first_row, Eigen::Index vocab) {
  MatrixXd dz = MatrixXd::Zero(rows, vocab);
  for (std::size_t i = 0; i < dists.size(); ++i) {
    const auto& p = dists[i].probs;
    const auto& g = dprobs[i];
    double dot = 0.0;
    for (std::size_t t = 0; t < p.size(); ++t) dot += p[t] * g[t];
    for (std::size_t t = 0; t < p.size(); ++t) {
      dz(first_row + static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(t)) = p[t] * (g[t] - dot);
    }
  }
  return dz;
}

}  // namespace

GradientTable ToyTransformer::one_hot_gradient(const TokenSequence& prompt, IndexRange suffix_span,
                                               const TokenSequence& continuation,
                                               const DistributionLoss& loss) const {
  if (prompt.empty() || continuation.empty()) {
    throw InvalidArgumentError("gradient needs a non-empty prompt and continuation");
  }
  if (suffix_span.begin > suffix_span.end || suffix_span.end > prompt.size()) {
    throw OutOfRangeError("suffix span outside prompt");
  }
  check_tokens(continuation);
  if (prompt.size() + continuation.size() > cfg_.context) {
    throw ContextOverflowError("prompt + continuation exceeds context " + std::to_string(cfg_.context));
  }
  const TokenSequence seq = teacher_forced_input(prompt, continuation);
  check_tokens(seq);
  const Forward fwd = run_forward(embed(seq), true);
  const auto first_row = static_cast<Eigen::Index>(prompt.size() - 1);
  std::vector<StepDistribution> dists;
  for (std::size_t i = 0; i < continuation.size(); ++i) {
    dists.push_back({softmax(row_to_vector(fwd.logits, first_row + static_cast<Eigen::Index>(i))), i + 1});
  }
  std::vector<std::vector<double>> dprobs;
  GradientTable table;
  table.loss_at_point = loss.evaluate(dists, &dprobs);
  const MatrixXd dz = logits_gradient(dists, dprobs, fwd.logits.rows(), first_row, fwd.logits.cols());
  const MatrixXd dx = backward_to_inputs(fwd, dz);
  table.values = dx.middleRows(static_cast<Eigen::Index>(suffix_span.begin),
                               static_cast<Eigen::Index>(suffix_span.size())) *
                 weights_.token_embedding.transpose();
  return table;
}

double ToyTransformer::soft_input_loss(const MatrixXd& soft_inputs, std::size_t prompt_length,
                                       std::size_t continuation_length,
                                       const DistributionLoss& loss) const {
  if (prompt_length == 0 || continuation_length == 0 ||
      soft_inputs.rows() != static_cast<Eigen::Index>(prompt_length + continuation_length - 1) ||
      soft_inputs.cols() != static_cast<Eigen::Index>(cfg_.vocab_size)) {
    throw InvalidArgumentError("soft input shape does not match prompt/continuation lengths");
  }
  if (static_cast<std::size_t>(soft_inputs.rows()) > cfg_.context) {
    throw ContextOverflowError("soft input exceeds context");
  }
  const MatrixXd x = soft_inputs * weights_.token_embedding +
                     weights_.position_embedding.topRows(soft_inputs.rows());
  const Forward fwd = run_forward(x, false);
  std::vector<StepDistribution> dists;
  for (std::size_t i = 0; i < continuation_length; ++i) {
    dists.push_back({softmax(row_to_vector(fwd.logits, static_cast<Eigen::Index>(prompt_length - 1 + i))), i + 1});
  }
  return loss.evaluate(dists, nullptr);
}

AttentionTensor ToyTransformer::attention_matrix(const TokenSequence& prompt,
                                                 const TokenSequence& continuation) const {
  TokenSequence seq = prompt;
  seq.insert(seq.end(), continuation.begin(), continuation.end());
  if (seq.empty()) throw InvalidArgumentError("attention needs a non-empty sequence");
  check_tokens(seq);
  const Forward fwd = run_forward(embed(seq), true);
  AttentionTensor out;
  out.layers = cfg_.blocks;
  out.heads = cfg_.heads;
  out.queries = out.keys = seq.size();
  out.weights.assign(out.layers * out.heads * out.queries * out.keys, 0.0);
  for (std::size_t l = 0; l < cfg_.blocks; ++l) {
    for (std::size_t h = 0; h < cfg_.heads; ++h) {
      const MatrixXd& p = fwd.blocks[l].probs[h];
      for (std::size_t q = 0; q < out.queries; ++q) {
        for (std::size_t k = 0; k < out.keys; ++k) {
          out.at(l, h, q, k) = p(static_cast<Eigen::Index>(q), static_cast<Eigen::Index>(k));
        }
      }
    }
  }
  return out;
}

// KV-cached incremental decoding.
class ToySession final : public DecodeSession {
 public:
  explicit ToySession(const ToyTransformer& model) : model_(&model) {
    const auto& cfg = model.cfg_;
    const auto ctx = static_cast<Eigen::Index>(cfg.context);
    const auto d = static_cast<Eigen::Index>(cfg.width);
    keys_.assign(cfg.blocks, MatrixXd::Zero(ctx, d));
    values_.assign(cfg.blocks, MatrixXd::Zero(ctx, d));
  }

  std::vector<double> feed(std::span<const TokenId> tokens) override {
    const auto& cfg = model_->cfg_;
    const auto& W = model_->weights_;
    if (tokens.empty()) throw InvalidArgumentError("feed needs at least one token");
    if (length_ + tokens.size() > cfg.context) {
      throw ContextOverflowError("decode session exceeds context " + std::to_string(cfg.context));
    }
    const auto n = static_cast<Eigen::Index>(tokens.size());
    const auto start = static_cast<Eigen::Index>(length_);
    const auto hd = static_cast<Eigen::Index>(cfg.width / cfg.heads);
    const double scale = 1.0 / std::sqrt(static_cast<double>(hd));

    MatrixXd x(n, static_cast<Eigen::Index>(cfg.width));
    for (Eigen::Index i = 0; i < n; ++i) {
      const TokenId t = tokens[static_cast<std::size_t>(i)];
      if (t < 0 || static_cast<std::size_t>(t) >= cfg.vocab_size) {
        throw OutOfRangeError("token id " + std::to_string(t) + " outside vocabulary");
      }
      x.row(i) = W.token_embedding.row(t) + W.position_embedding.row(start + i);
    }
    for (std::size_t b = 0; b < cfg.blocks; ++b) {
      const auto& w = W.blocks[b];
      const MatrixXd a = layer_norm(x, w.ln1_gain, w.ln1_bias, cfg.layer_norm, nullptr);
      const MatrixXd q = a * w.wq;
      keys_[b].middleRows(start, n) = a * w.wk;
      values_[b].middleRows(start, n) = a * w.wv;
      const auto total = start + n;
      MatrixXd ctx(n, x.cols());
      for (std::size_t h = 0; h < cfg.heads; ++h) {
        const auto off = static_cast<Eigen::Index>(h) * hd;
        const MatrixXd p = causal_softmax(
            scale * q.middleCols(off, hd) * keys_[b].block(0, off, total, hd).transpose(),
            static_cast<std::size_t>(start));
        ctx.middleCols(off, hd) = p * values_[b].block(0, off, total, hd);
      }
      x += ctx * w.wo;
      if (cfg.mlp_hidden > 0) {
        const MatrixXd m = layer_norm(x, w.ln2_gain, w.ln2_bias, cfg.layer_norm, nullptr);
        const MatrixXd act = ((m * w.w_in).rowwise() + w.b_in.transpose()).unaryExpr([](double v) {
          return gelu(v);
        });
        x = (x + act * w.w_out).rowwise() + w.b_out.transpose();
      }
    }
    length_ += tokens.size();
    const MatrixXd f = layer_norm(x.bottomRows(1), W.final_gain, W.final_bias, cfg.layer_norm, nullptr);
    const Eigen::RowVectorXd z = f * W.unembed + W.unembed_bias.transpose();
    return std::vector<double>(z.data(), z.data() + z.size());
  }

  std::unique_ptr<DecodeSession> clone() const override { return std::make_unique<ToySession>(*this); }
  std::size_t length() const override { return length_; }

 private:
  const ToyTransformer* model_;
  std::vector<MatrixXd> keys_;
  std::vector<MatrixXd> values_;
  std::size_t length_ = 0;
};

std::unique_ptr<DecodeSession> ToyTransformer::start_session() const {
  return std::make_unique<ToySession>(*this);
}

TrialOutcome ToyTransformer::generate(const TokenSequence& prompt, const DecodingPolicy& policy,
                                      std::size_t max_new, bool eos_enabled,
                                      const StepObserver& observer) const {
  check_tokens(prompt);
  if (prompt.size() + max_new > cfg_.context) {
    throw ContextOverflowError("prompt of " + std::to_string(prompt.size()) + " tokens plus " +
                               std::to_string(max_new) + " new tokens exceeds context " +
                               std::to_string(cfg_.context));
  }
  ToySession session(*this);
  return decode_with_policy(session, prompt, policy, max_new, eos_id(), eos_enabled, observer);
}

std::shared_ptr<ToyTransformer> make_toy_model(std::uint64_t seed, std::string id) {
  ToyTransformerConfig cfg;
  cfg.seed = seed;
  return std::make_shared<ToyTransformer>(cfg, std::move(id));
}

std::shared_ptr<ToyTransformer> make_uniform_attention_model(ToyTransformerConfig cfg, std::string id) {
  ToyWeights w = ToyWeights::random(cfg);
  for (auto& blk : w.blocks) {
    blk.wq.setZero();
    blk.wk.setZero();
  }
  return std::make_shared<ToyTransformer>(cfg, std::move(w), std::move(id));
}

std::shared_ptr<ToyTransformer> make_constant_logits_model(const std::vector<double>& logits,
                                                           std::size_t context, std::string id) {
  ToyTransformerConfig cfg;
  cfg.vocab_size = logits.size();
  cfg.width = 2;
  cfg.heads = 1;
  cfg.blocks = 1;
  cfg.context = context;
  cfg.mlp_hidden = 0;
  ToyWeights w = ToyWeights::zeros(cfg);
  for (std::size_t i = 0; i < logits.size(); ++i) w.unembed_bias(static_cast<Eigen::Index>(i)) = logits[i];
  return std::make_shared<ToyTransformer>(cfg, std::move(w), std::move(id));
}

std::shared_ptr<ToyTransformer> make_loop_prone_model(const LoopProneOptions& o, std::string id) {
  const std::size_t V = o.vocab_size;
  if (V <= ToyVocabulary::kSpecialCount) throw InvalidArgumentError("loop-prone model needs a character vocabulary");
  // Residual layout: current token | previous token | copied token | flags.
  const std::size_t cur = 0, prev = V, copy = 2 * V, flag = 3 * V, one = 3 * V + 1, pos = 3 * V + 2;
  std::size_t width = 3 * V + 4;
  if (width % 2) ++width;
  ToyTransformerConfig cfg;
  cfg.vocab_size = V;
  cfg.width = width;
  cfg.heads = 2;
  cfg.blocks = 2;
  cfg.context = o.context;
  cfg.mlp_hidden = 0;
  cfg.layer_norm = false;
  ToyWeights w = ToyWeights::zeros(cfg);
  const auto I = [](std::size_t v) { return static_cast<Eigen::Index>(v); };
  const auto hd = I(width / 2);
  const double unscale = std::sqrt(static_cast<double>(hd));

  for (std::size_t t = 0; t < V; ++t) {
    w.token_embedding(I(t), I(cur + t)) = 1.0;
    w.token_embedding(I(t), I(one)) = 1.0;
  }
  // Two-dimensional rotary-style positions; omega keeps the whole context
  // inside a quarter turn so the previous-token peak is unique.
  const double omega = std::numbers::pi / (2.0 * static_cast<double>(o.context));
  const double sharpness = 25.0 / (1.0 - std::cos(omega));
  for (std::size_t p = 0; p < o.context; ++p) {
    w.position_embedding(I(p), I(pos)) = std::cos(omega * static_cast<double>(p));
    w.position_embedding(I(p), I(pos + 1)) = std::sin(omega * static_cast<double>(p));
  }

  // Block 0, head 0: attend to the previous position, write its token into
  // the previous-token slot.
  auto& b0 = w.blocks[0];
  b0.wq(I(pos), 0) = sharpness * unscale * std::cos(omega);
  b0.wq(I(pos + 1), 0) = sharpness * unscale * std::sin(omega);
  b0.wq(I(pos), 1) = -sharpness * unscale * std::sin(omega);
  b0.wq(I(pos + 1), 1) = sharpness * unscale * std::cos(omega);
  b0.wk(I(pos), 0) = 1.0;
  b0.wk(I(pos + 1), 1) = 1.0;
  for (std::size_t t = 0; t < V; ++t) {
    b0.wv(I(cur + t), I(t)) = 1.0;
    b0.wo(I(t), I(prev + t)) = 1.0;
  }
  // Block 0, head 1: output-region flag, set once the assistant marker is in
  // the causal prefix.
  const double marker_score = 40.0;
  b0.wq(I(one), hd) = marker_score * unscale;
  b0.wk(I(cur + ToyVocabulary::kAssistant), hd) = 1.0;
  b0.wv(I(cur + ToyVocabulary::kAssistant), hd) = 1.0;
  b0.wo(hd, I(flag)) = 1.0;

  // Block 1, head 0: induction. Query = current token, key = previous token
  // plus the output-region bonus; the value copies the key's own token.
  auto& b1 = w.blocks[1];
  for (std::size_t t = 0; t < V; ++t) {
    b1.wq(I(cur + t), I(t)) = o.match_score * unscale;
    b1.wk(I(prev + t), I(t)) = 1.0;
    b1.wv(I(cur + t), I(t)) = 1.0;
    b1.wo(I(t), I(copy + t)) = 1.0;
  }
  b1.wq(I(one), I(V)) = o.region_score * unscale;
  b1.wk(I(flag), I(V)) = 1.0;
  // Block 1, head 1: uniform attention, i.e. context token frequencies.
  for (std::size_t t = 0; t < V; ++t) {
    b1.wv(I(cur + t), hd + I(t)) = 1.0;
    b1.wo(hd + I(t), I(copy + t)) = o.frequency_gain / o.copy_gain;
  }

  for (std::size_t t = 0; t < V; ++t) {
    const bool special = ToyVocabulary::special_ids().contains(static_cast<TokenId>(t));
    if (!special) w.unembed(I(copy + t), I(t)) = o.copy_gain;
    w.unembed_bias(I(t)) = special ? -30.0 : 0.0;
  }
  w.unembed_bias(ToyVocabulary::kEos) = o.eos_bias;
  return std::make_shared<ToyTransformer>(cfg, std::move(w), std::move(id));
}

}  // namespace looptrap
