#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "nlip/data_synth.hpp"
#include "nlip/layers.hpp"
#include "nlip/param_store.hpp"
#include "nlip/random.hpp"

namespace nlip {

struct EncoderConfig {
  int d_img = 16;
  int patch_count = 16;
  int vocab_size = 0;
  int width = 32;  // shared model width of the image tower, text tower and caption decoder
  int d_embed = 32;
  int blocks = 2;
  double mask_ratio = 0.5;
  bool use_positional = true;
  int mae_depth = 1;
  int d_dec = 16;

  void validate() const {
    if (d_embed <= 0 || width <= 0 || d_dec <= 0) throw RangeError("encoder dimensions must be positive");
    if (!(mask_ratio >= 0.0 && mask_ratio < 1.0)) throw RangeError("mask_ratio must lie in [0, 1)");
    if (blocks < 0 || mae_depth < 0) throw RangeError("block counts must be non-negative");
    if (patch_count < 1 || d_img < 1) throw RangeError("patch grid must be non-empty");
  }
};

/// Partition of patch indices into visible and masked sets (both ascending).
struct MaskPlan {
  std::vector<int> visible;
  std::vector<int> masked;
  double ratio = 0.0;
  std::uint64_t seed = 0;

  bool operator==(const MaskPlan&) const = default;
};

inline MaskPlan make_mask_plan(int patch_count, double ratio, std::uint64_t seed) {
  if (!(ratio >= 0.0 && ratio < 1.0)) throw RangeError("mask ratio must lie in [0, 1)");
  const auto n_masked = static_cast<int>(std::lround(ratio * patch_count));
  std::vector<int> idx(patch_count);
  for (int i = 0; i < patch_count; ++i) idx[i] = i;
  Rng rng = make_rng(seed, "mask.patches");
  for (int i = 0; i < n_masked; ++i) {
    auto j = i + static_cast<int>(uniform_index(rng, static_cast<std::uint64_t>(patch_count - i)));
    std::swap(idx[i], idx[j]);
  }
  MaskPlan plan;
  plan.ratio = ratio;
  plan.seed = seed;
  plan.masked.assign(idx.begin(), idx.begin() + n_masked);
  plan.visible.assign(idx.begin() + n_masked, idx.end());
  std::sort(plan.masked.begin(), plan.masked.end());
  std::sort(plan.visible.begin(), plan.visible.end());
  return plan;
}

inline Matrix gather_rows(const Matrix& m, const std::vector<int>& rows) {
  Matrix out(static_cast<Eigen::Index>(rows.size()), m.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = m.row(rows[i]);
  return out;
}

/// Uniformly random masking of round(ratio * P) patches.
inline std::pair<Matrix, MaskPlan> mask_patches(const Matrix& patch_grid, double ratio, std::uint64_t seed) {
  MaskPlan plan = make_mask_plan(static_cast<int>(patch_grid.rows()), ratio, seed);
  return {gather_rows(patch_grid, plan.visible), std::move(plan)};
}

/// Replaces tokens [start, start + length) with a single MASK token.
inline TokenSeq mask_span_at(const TokenSeq& caption, std::size_t start, std::size_t length) {
  if (length == 0) return caption;
  if (start + length > caption.size()) throw RangeError("span exceeds caption");
  TokenSeq out(caption.begin(), caption.begin() + static_cast<std::ptrdiff_t>(start));
  out.push_back(TokenVocab::kMask);
  out.insert(out.end(), caption.begin() + static_cast<std::ptrdiff_t>(start + length), caption.end());
  return out;
}

/// One Poisson(lambda) span, clamped to the caption length, at a uniform start.
inline TokenSeq span_mask_text(const TokenSeq& caption, double poisson_lambda, std::uint64_t seed) {
  if (caption.empty() || poisson_lambda <= 0.0) return caption;
  Rng rng = make_rng(seed, "mask.span");
  std::poisson_distribution<int> poisson(poisson_lambda);
  const auto length = std::min<std::size_t>(static_cast<std::size_t>(poisson(rng)), caption.size());
  const auto start = uniform_index(rng, caption.size() - length + 1);
  return mask_span_at(caption, start, length);
}

struct EmbeddingPair {
  RowVector global;      // unit norm
  Matrix token_states;   // one row per input token (visible patch / text token)
};

namespace detail {

inline RowVector normalize_checked(const RowVector& v) {
  const double n = v.norm();
  if (!(n > 0.0) || !std::isfinite(n)) throw NumericalError("cannot normalize a zero or non-finite embedding");
  return v / n;
}

/// d(v/||v||) applied to dy.
inline RowVector normalize_backward(const RowVector& v, const RowVector& dy) {
  const double n = v.norm();
  RowVector u = v / n;
  return (dy - u * u.dot(dy)) / n;
}

}  // namespace detail

/// Transformer stack shared by the image and text towers: prepended [CLS]
/// row, optional positional rows, pre-norm blocks, final norm, projection.
/// With zero blocks the tower degenerates to a linear bag (mean pooling, no
/// final norm).
struct Tower {
  ParamId cls;
  ParamId positions;
  std::vector<EncoderBlock> blocks;
  LayerNorm final_norm;
  Linear projection;
  bool use_positional = true;

  struct Cache {
    std::vector<int> pos_rows;
    std::vector<EncoderBlock::Cache> blocks;
    LayerNorm::Cache norm;
    RowVector pooled;
    RowVector projected;
    Eigen::Index tokens = 0;
  };

  static Tower create(ParamStore& store, const std::string& name, int width, int d_embed, int n_blocks,
                      int max_positions, bool positional, std::uint64_t seed) {
    Tower t;
    t.cls = store.add_uniform(name + ".cls", 1, width, width, seed, false);
    t.positions = store.add_uniform(name + ".pos", max_positions + 1, width, width, seed, false);
    for (int b = 0; b < n_blocks; ++b)
      t.blocks.push_back(EncoderBlock::create(store, name + ".block" + std::to_string(b), width, seed));
    t.final_norm = LayerNorm::create(store, name + ".norm", width);
    t.projection = Linear::create(store, name + ".proj", width, d_embed, seed, false);
    t.use_positional = positional;
    return t;
  }

  /// `tokens` holds the embedded inputs; `pos_rows[i]` is the positional row
  /// of token i (the [CLS] row always uses row 0).
  EmbeddingPair forward(const ParamStore& store, const Matrix& tokens, const std::vector<int>& pos_rows,
                        Cache& c) const {
    const Eigen::Index n = tokens.rows();
    const Eigen::Index width = tokens.cols();
    c.pos_rows = pos_rows;
    c.tokens = n;
    EmbeddingPair out;
    if (blocks.empty()) {
      if (n == 0) throw ShapeError("a block-free tower needs at least one input token");
      Matrix x = tokens;
      if (use_positional)
        for (Eigen::Index i = 0; i < n; ++i) x.row(i) += store[positions].row(pos_rows[i] + 1);
      c.pooled = x.colwise().mean();
      out.token_states = std::move(x);
    } else {
      Matrix x(n + 1, width);
      x.row(0) = store[cls].row(0);
      x.bottomRows(n) = tokens;
      if (use_positional) {
        x.row(0) += store[positions].row(0);
        for (Eigen::Index i = 0; i < n; ++i) x.row(i + 1) += store[positions].row(pos_rows[i] + 1);
      }
      c.blocks.resize(blocks.size());
      for (std::size_t b = 0; b < blocks.size(); ++b) x = blocks[b].forward(store, x, false, c.blocks[b]);
      Matrix z = final_norm.forward(store, x, c.norm);
      c.pooled = z.row(0);
      out.token_states = z.bottomRows(n);
    }
    c.projected = projection.forward(store, c.pooled);
    out.global = detail::normalize_checked(c.projected);
    return out;
  }

  /// Returns the gradient with respect to the embedded input tokens.
  Matrix backward(const ParamStore& store, Gradients& grads, const Cache& c, const RowVector& d_global,
                  const Matrix& d_states) const {
    const Eigen::Index n = c.tokens;
    RowVector d_projected = detail::normalize_backward(c.projected, d_global);
    RowVector d_pooled = projection.backward(store, grads, c.pooled, d_projected);
    if (blocks.empty()) {
      Matrix dx = d_pooled.replicate(n, 1) / static_cast<double>(n);
      if (d_states.size() > 0) dx += d_states;
      if (use_positional)
        for (Eigen::Index i = 0; i < n; ++i) grads[positions].row(c.pos_rows[i] + 1) += dx.row(i);
      return dx;
    }
    Matrix dz = Matrix::Zero(n + 1, d_pooled.cols());
    dz.row(0) = d_pooled;
    if (d_states.size() > 0) dz.bottomRows(n) = d_states;
    Matrix dx = final_norm.backward(store, grads, c.norm, dz);
    for (std::size_t b = blocks.size(); b-- > 0;) dx = blocks[b].backward(store, grads, c.blocks[b], dx);
    grads[cls].row(0) += dx.row(0);
    if (use_positional) {
      grads[positions].row(0) += dx.row(0);
      for (Eigen::Index i = 0; i < n; ++i) grads[positions].row(c.pos_rows[i] + 1) += dx.row(i + 1);
    }
    return dx.bottomRows(n);
  }
};

/// Masked image encoder V_e: linear patch embedding into a Tower. Only
/// visible patches are ever embedded.
struct ImageEncoder {
  Linear patch_embed;
  Tower tower;

  struct Cache {
    Matrix visible;
    Tower::Cache tower;
  };

  static ImageEncoder create(ParamStore& store, const EncoderConfig& cfg, std::uint64_t seed) {
    return {Linear::create(store, "image.patch_embed", cfg.d_img, cfg.width, seed),
            Tower::create(store, "image", cfg.width, cfg.d_embed, cfg.blocks, cfg.patch_count, cfg.use_positional,
                          seed)};
  }

  EmbeddingPair forward(const ParamStore& store, const Matrix& visible, const MaskPlan& plan, Cache& c) const {
    if (visible.rows() != static_cast<Eigen::Index>(plan.visible.size()))
      throw ShapeError("visible patch count does not match the mask plan");
    if (visible.cols() != store[patch_embed.weight].cols())
      throw ShapeError("patch dimension does not match the image encoder");
    c.visible = visible;
    return tower.forward(store, patch_embed.forward(store, visible), plan.visible, c.tower);
  }

  void backward(const ParamStore& store, Gradients& grads, const Cache& c, const RowVector& d_global,
                const Matrix& d_states) const {
    Matrix d_tokens = tower.backward(store, grads, c.tower, d_global, d_states);
    patch_embed.backward(store, grads, c.visible, d_tokens);
  }

  /// Patch-token block evaluations a forward pass performs under `plan`
  /// ([CLS] excluded).
  std::uint64_t block_evaluations(const MaskPlan& plan) const {
    return static_cast<std::uint64_t>(plan.visible.size()) * tower.blocks.size();
  }
};

inline EmbeddingPair encode_image(const ParamStore& store, const ImageEncoder& encoder, const Matrix& visible,
                                  const MaskPlan& plan) {
  ImageEncoder::Cache cache;
  return encoder.forward(store, visible, plan, cache);
}

/// MAE decoder V_d: embeds visible states, fills masked slots with a learned
/// mask token, adds positions, runs `mae_depth` blocks and regresses patches.
struct MaeDecoder {
  Linear embed;
  ParamId mask_token;
  ParamId positions;
  std::vector<EncoderBlock> blocks;
  LayerNorm norm;
  Linear head;

  struct Cache {
    std::vector<int> visible, masked;
    Matrix states;
    std::vector<EncoderBlock::Cache> blocks;
    LayerNorm::Cache norm;
    Matrix normed;
  };

  static MaeDecoder create(ParamStore& store, const EncoderConfig& cfg, std::uint64_t seed) {
    MaeDecoder d;
    d.embed = Linear::create(store, "mae.embed", cfg.width, cfg.d_dec, seed);
    d.mask_token = store.add_uniform("mae.mask_token", 1, cfg.d_dec, cfg.d_dec, seed, false);
    d.positions = store.add_uniform("mae.pos", cfg.patch_count, cfg.d_dec, cfg.d_dec, seed, false);
    for (int b = 0; b < cfg.mae_depth; ++b)
      d.blocks.push_back(EncoderBlock::create(store, "mae.block" + std::to_string(b), cfg.d_dec, seed));
    d.norm = LayerNorm::create(store, "mae.norm", cfg.d_dec);
    d.head = Linear::create(store, "mae.head", cfg.d_dec, cfg.d_img, seed);
    return d;
  }

  /// Predictions for the masked positions, in `plan.masked` order.
  Matrix forward(const ParamStore& store, const Matrix& visible_states, const MaskPlan& plan, Cache& c) const {
    const auto p = static_cast<Eigen::Index>(plan.visible.size() + plan.masked.size());
    c.visible = plan.visible;
    c.masked = plan.masked;
    c.states = visible_states;
    Matrix embedded = embed.forward(store, visible_states);
    Matrix x(p, embedded.cols());
    for (std::size_t i = 0; i < plan.visible.size(); ++i) x.row(plan.visible[i]) = embedded.row(static_cast<Eigen::Index>(i));
    for (int m : plan.masked) x.row(m) = store[mask_token].row(0);
    x += store[positions];
    c.blocks.resize(blocks.size());
    for (std::size_t b = 0; b < blocks.size(); ++b) x = blocks[b].forward(store, x, false, c.blocks[b]);
    c.normed = norm.forward(store, x, c.norm);
    return head.forward(store, gather_rows(c.normed, plan.masked));
  }

  /// Returns the gradient with respect to the visible encoder states.
  Matrix backward(const ParamStore& store, Gradients& grads, const Cache& c, const Matrix& d_pred) const {
    Matrix d_sel = head.backward(store, grads, gather_rows(c.normed, c.masked), d_pred);
    Matrix dnormed = Matrix::Zero(c.normed.rows(), c.normed.cols());
    for (std::size_t i = 0; i < c.masked.size(); ++i) dnormed.row(c.masked[i]) = d_sel.row(static_cast<Eigen::Index>(i));
    Matrix dx = norm.backward(store, grads, c.norm, dnormed);
    for (std::size_t b = blocks.size(); b-- > 0;) dx = blocks[b].backward(store, grads, c.blocks[b], dx);
    grads[positions] += dx;
    for (int m : c.masked) grads[mask_token].row(0) += dx.row(m);
    Matrix d_embedded(static_cast<Eigen::Index>(c.visible.size()), dx.cols());
    for (std::size_t i = 0; i < c.visible.size(); ++i) d_embedded.row(static_cast<Eigen::Index>(i)) = dx.row(c.visible[i]);
    return embed.backward(store, grads, c.states, d_embedded);
  }
};

struct IrLoss {
  double loss = 0.0;
  Matrix d_pred;
};

/// Sum over masked patches of || pred/||pred|| - x/||x|| ||^2 with guarded norms.
inline IrLoss ir_loss(const Matrix& pred, const Matrix& target) {
  if (pred.rows() != target.rows() || pred.cols() != target.cols())
    throw ShapeError("reconstruction prediction and target shapes differ");
  IrLoss out;
  out.d_pred = Matrix::Zero(pred.rows(), pred.cols());
  for (Eigen::Index i = 0; i < pred.rows(); ++i) {
    RowVector diff = guarded_normalize(pred.row(i)) - guarded_normalize(target.row(i));
    out.loss += diff.squaredNorm();
    out.d_pred.row(i) = guarded_normalize_backward(pred.row(i), 2.0 * diff);
  }
  return out;
}

struct IrResult {
  double loss = 0.0;
  Matrix d_states;  // gradient with respect to the visible encoder states
};

/// Decoder forward, reconstruction loss and (optionally)
/// gradient accumulation in one call. An empty masked set costs nothing.
inline IrResult reconstruct_and_ir_loss(const ParamStore& store, Gradients* grads, const MaeDecoder& decoder,
                                        const Matrix& visible_states, const MaskPlan& plan, const Matrix& patch_grid) {
  IrResult r;
  if (plan.masked.empty()) {
    r.d_states = Matrix::Zero(visible_states.rows(), visible_states.cols());
    return r;
  }
  MaeDecoder::Cache cache;
  Matrix pred = decoder.forward(store, visible_states, plan, cache);
  IrLoss l = ir_loss(pred, gather_rows(patch_grid, plan.masked));
  r.loss = l.loss;
  if (grads) r.d_states = decoder.backward(store, *grads, cache, l.d_pred);
  return r;
}

/// Text encoder T_e: token embedding into a Tower; at most 77 tokens.
struct TextEncoder {
  ParamId token_embed;
  Tower tower;

  struct Cache {
    TokenSeq tokens;
    Tower::Cache tower;
  };

  static TextEncoder create(ParamStore& store, const EncoderConfig& cfg, std::uint64_t seed) {
    return {store.add_uniform("text.token_embed", cfg.vocab_size, cfg.width, cfg.width, seed, false),
            Tower::create(store, "text", cfg.width, cfg.d_embed, cfg.blocks, static_cast<int>(kMaxTextLength), true,
                          seed)};
  }

  EmbeddingPair forward(const ParamStore& store, const TokenSeq& tokens, Cache& c) const {
    if (tokens.size() > kMaxTextLength)
      throw RangeError("text of " + std::to_string(tokens.size()) + " tokens exceeds the maximum context length of " +
                       std::to_string(kMaxTextLength));
    const Matrix& table = store[token_embed];
    Matrix x(static_cast<Eigen::Index>(tokens.size()), table.cols());
    std::vector<int> pos(tokens.size());
    for (std::size_t i = 0; i < tokens.size(); ++i) {
      if (tokens[i] < 0 || tokens[i] >= table.rows()) throw ContractError("token id outside the vocabulary");
      x.row(static_cast<Eigen::Index>(i)) = table.row(tokens[i]);
      pos[i] = static_cast<int>(i);
    }
    c.tokens = tokens;
    return tower.forward(store, x, pos, c.tower);
  }

  void backward(const ParamStore& store, Gradients& grads, const Cache& c, const RowVector& d_global,
                const Matrix& d_states) const {
    Matrix d_tokens = tower.backward(store, grads, c.tower, d_global, d_states);
    for (std::size_t i = 0; i < c.tokens.size(); ++i)
      grads[token_embed].row(c.tokens[i]) += d_tokens.row(static_cast<Eigen::Index>(i));
  }
};

inline EmbeddingPair encode_text(const ParamStore& store, const TextEncoder& encoder, const TokenSeq& tokens) {
  TextEncoder::Cache cache;
  return encoder.forward(store, tokens, cache);
}

}  // namespace nlip
