#pragma once

#include <algorithm>
#include <cstdint>
#include <functional>
#include <span>
#include <thread>
#include <vector>

#include "nlip/alignment.hpp"
#include "nlip/captioner.hpp"
#include "nlip/model.hpp"

namespace nlip {

/// Which terms of the pre-training objective a batch evaluates, and how.
struct ObjectiveOptions {
  double alpha = 1.0;  // language-model weight
  double beta = 1.0;   // contrastive weight
  double mask_ratio = 0.5;
  double span_lambda = 3.0;
  bool image_reconstruction = true;
  bool language_model = true;
  bool contrastive = true;
  /// Smoothed-target contrastive loss with each sample's w; plain ITC otherwise.
  bool noise_adaptive = false;
  /// Append the span-masked caption to the language-model encoder input.
  /// Off for captioner fine-tuning, where the encoder sees prompt + concepts only.
  bool lm_sees_caption = true;
  std::uint64_t seed = 0;
  int epoch = 0;
  int threads = 1;
};

struct BatchSample {
  const TrainPair* pair = nullptr;
  double w = 0.0;
  const std::vector<int>* concepts = nullptr;  // LM conditioning; null means none
};

struct BatchStats {
  double ir = 0.0;
  double lm = 0.0;
  double contrastive = 0.0;
  double total = 0.0;
  Vector itc_combined;  // per-sample plain ITC loss, the noise-model input
  std::uint64_t block_evals = 0;
};

/// Samples per gradient buffer. Buffers are reduced by a fixed pairwise tree,
/// so results are bitwise identical for any thread count.
inline constexpr std::size_t kGradientChunk = 8;

inline void parallel_for(std::size_t n, int threads, const std::function<void(std::size_t)>& fn) {
  const auto workers = static_cast<std::size_t>(std::max(1, threads));
  if (workers == 1 || n <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(workers);
  for (std::size_t t = 0; t < workers; ++t) {
    pool.emplace_back([&, t] {
      try {
        for (std::size_t i = t; i < n; i += workers) fn(i);
      } catch (...) {
        errors[t] = std::current_exception();
      }
    });
  }
  for (auto& th : pool) th.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

inline std::uint64_t mask_seed(const ObjectiveOptions& o, std::int64_t pair_id) {
  return derive_seed(o.seed, "train.mask.epoch" + std::to_string(o.epoch), static_cast<std::uint64_t>(pair_id));
}

inline std::uint64_t span_seed(const ObjectiveOptions& o, std::int64_t pair_id) {
  return derive_seed(o.seed, "train.span.epoch" + std::to_string(o.epoch), static_cast<std::uint64_t>(pair_id));
}

/// Evaluates the objective on one batch. With `grads` non-null the gradient of
/// `total` is written there (overwriting it).
inline BatchStats batch_objective(const ParamStore& store, const NlipModel& model, std::span<const BatchSample> batch,
                                  const ObjectiveOptions& opt, Gradients* grads) {
  const auto b = batch.size();
  if (b == 0) throw RangeError("empty batch");
  const double inv_b = 1.0 / static_cast<double>(b);

  struct SampleState {
    MaskPlan plan;
    ImageEncoder::Cache img_cache;
    EmbeddingPair img;
    Matrix d_img_states;
    TextEncoder::Cache txt_cache;
    EmbeddingPair txt;
    double ir = 0.0;
    double lm = 0.0;
  };
  std::vector<SampleState> states(b);
  const std::size_t n_chunks = (b + kGradientChunk - 1) / kGradientChunk;
  std::vector<Gradients> parts;
  if (grads) {
    parts.reserve(n_chunks);
    for (std::size_t c = 0; c < n_chunks; ++c) parts.push_back(store.make_gradients());
  }

  // Phase 1: per-sample forward; reconstruction and language-model heads are
  // back-propagated immediately since they do not couple samples.
  parallel_for(n_chunks, opt.threads, [&](std::size_t chunk) {
    Gradients* g = grads ? &parts[chunk] : nullptr;
    for (std::size_t i = chunk * kGradientChunk; i < std::min(b, (chunk + 1) * kGradientChunk); ++i) {
      const TrainPair& pair = *batch[i].pair;
      SampleState& s = states[i];
      s.plan = make_mask_plan(static_cast<int>(pair.patches.rows()), opt.mask_ratio, mask_seed(opt, pair.pair_id));
      s.img = model.image.forward(store, gather_rows(pair.patches, s.plan.visible), s.plan, s.img_cache);
      s.d_img_states = Matrix::Zero(s.img.token_states.rows(), s.img.token_states.cols());

      if (opt.image_reconstruction && !s.plan.masked.empty()) {
        MaeDecoder::Cache mc;
        Matrix pred = model.mae.forward(store, s.img.token_states, s.plan, mc);
        IrLoss l = ir_loss(pred, gather_rows(pair.patches, s.plan.masked));
        s.ir = l.loss;
        if (g) s.d_img_states += model.mae.backward(store, *g, mc, l.d_pred * inv_b);
      }

      const bool need_masked_text = opt.contrastive || (opt.language_model && opt.lm_sees_caption);
      const TokenSeq masked =
          need_masked_text ? span_mask_text(pair.caption, opt.span_lambda, span_seed(opt, pair.pair_id)) : TokenSeq{};
      if (opt.contrastive) s.txt = model.text.forward(store, masked, s.txt_cache);

      if (opt.language_model) {
        static const std::vector<int> kNoConcepts;
        const auto& concepts = batch[i].concepts ? *batch[i].concepts : kNoConcepts;
        TextEncoder::Cache lm_cache;
        EmbeddingPair cond = model.text.forward(
            store, concept_conditioned_input(model.vocab, concepts, opt.lm_sees_caption ? masked : TokenSeq{}),
            lm_cache);
        const Matrix memory = stack_rows(s.img.token_states, cond.token_states);
        TokenSeq inputs(pair.caption.begin(), pair.caption.end() - 1);
        TokenSeq labels(pair.caption.begin() + 1, pair.caption.end());
        CaptionDecoder::Cache dc;
        Matrix logits = model.decoder.forward(store, inputs, memory, dc);
        CrossEntropy ce = sequence_cross_entropy(logits, labels);
        s.lm = ce.loss;
        if (g) {
          Matrix d_memory = model.decoder.backward(store, *g, dc, ce.d_logits * (opt.alpha * inv_b), memory.rows());
          s.d_img_states += d_memory.topRows(s.img.token_states.rows());
          model.text.backward(store, *g, lm_cache, RowVector::Zero(cond.global.size()),
                              d_memory.bottomRows(cond.token_states.rows()));
        }
      }
    }
  });

  BatchStats stats;
  for (const auto& s : states) {
    stats.ir += s.ir * inv_b;
    stats.lm += s.lm * inv_b;
    stats.block_evals += model.image.block_evaluations(s.plan);
  }

  // Phase 2: the in-batch contrastive coupling.
  Matrix d_img_global = Matrix::Zero(static_cast<Eigen::Index>(b), model.config.d_embed);
  Matrix d_txt_global = d_img_global;
  double d_log_tau = 0.0;
  if (opt.contrastive) {
    Matrix img(static_cast<Eigen::Index>(b), model.config.d_embed), txt(img.rows(), img.cols());
    Vector w = Vector::Zero(static_cast<Eigen::Index>(b));
    std::vector<std::int64_t> ids(b);
    for (std::size_t i = 0; i < b; ++i) {
      img.row(static_cast<Eigen::Index>(i)) = states[i].img.global;
      txt.row(static_cast<Eigen::Index>(i)) = states[i].txt.global;
      w(static_cast<Eigen::Index>(i)) = batch[i].w;
      ids[i] = batch[i].pair->pair_id;
    }
    const double tau = model.tau(store);
    SimilarityBlock block = similarity_block(img, txt, tau, std::move(ids));
    ContrastiveResult itc = itc_loss(block);
    stats.itc_combined = itc.per_sample.combined;
    ContrastiveResult used = opt.noise_adaptive ? nitc_loss(block, w) : std::move(itc);
    stats.contrastive = used.loss;
    if (grads) {
      SimilarityGrads sg = similarity_backward(img, txt, block, used.d_s * opt.beta);
      d_img_global = std::move(sg.d_img);
      d_txt_global = std::move(sg.d_txt);
      d_log_tau = sg.d_tau * tau;
    }
  }
  stats.total = total_loss(stats.ir, stats.lm, stats.contrastive, opt.alpha, opt.beta);
  if (!grads) return stats;

  // Phase 3: encoder backward passes.
  parallel_for(n_chunks, opt.threads, [&](std::size_t chunk) {
    Gradients& g = parts[chunk];
    for (std::size_t i = chunk * kGradientChunk; i < std::min(b, (chunk + 1) * kGradientChunk); ++i) {
      SampleState& s = states[i];
      model.image.backward(store, g, s.img_cache, d_img_global.row(static_cast<Eigen::Index>(i)), s.d_img_states);
      if (opt.contrastive)
        model.text.backward(store, g, s.txt_cache, d_txt_global.row(static_cast<Eigen::Index>(i)), Matrix());
    }
  });
  *grads = tree_reduce(std::move(parts));
  (*grads)[model.log_tau](0, 0) += d_log_tau;
  return stats;
}

}  // namespace nlip
