#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "nlip/data_synth.hpp"
#include "nlip/encoders.hpp"
#include "nlip/layers.hpp"
#include "nlip/noise_model.hpp"

namespace nlip {

/// Concept-conditioned cross-modal decoder C_d: causal self-attention over the
/// caption prefix plus cross-attention over [image states ; text states].
struct CaptionDecoder {
  ParamId token_embed;
  ParamId positions;
  std::vector<DecoderBlock> blocks;
  LayerNorm norm;
  Linear out;

  struct Cache {
    TokenSeq inputs;
    std::vector<DecoderBlock::Cache> blocks;
    LayerNorm::Cache norm;
    Matrix normed;
  };

  static CaptionDecoder create(ParamStore& store, int vocab_size, int width, int n_blocks, std::uint64_t seed) {
    CaptionDecoder d;
    d.token_embed = store.add_uniform("decoder.token_embed", vocab_size, width, width, seed, false);
    d.positions = store.add_uniform("decoder.pos", static_cast<Eigen::Index>(kMaxTextLength), width, width, seed, false);
    for (int b = 0; b < n_blocks; ++b)
      d.blocks.push_back(DecoderBlock::create(store, "decoder.block" + std::to_string(b), width, seed));
    d.norm = LayerNorm::create(store, "decoder.norm", width);
    d.out = Linear::create(store, "decoder.out", width, vocab_size, seed);
    return d;
  }

  /// Next-token logits for every input position (row t predicts token t+1).
  Matrix forward(const ParamStore& store, const TokenSeq& inputs, const Matrix& memory, Cache& c) const {
    if (inputs.empty() || inputs.size() > kMaxTextLength) throw RangeError("decoder input length outside [1, 77]");
    if (memory.rows() == 0) throw ShapeError("decoder needs a non-empty conditioning memory");
    const Matrix& table = store[token_embed];
    Matrix x(static_cast<Eigen::Index>(inputs.size()), table.cols());
    for (std::size_t t = 0; t < inputs.size(); ++t) {
      if (inputs[t] < 0 || inputs[t] >= table.rows()) throw ContractError("decoder input token outside the vocabulary");
      x.row(static_cast<Eigen::Index>(t)) = table.row(inputs[t]) + store[positions].row(static_cast<Eigen::Index>(t));
    }
    c.inputs = inputs;
    c.blocks.resize(blocks.size());
    for (std::size_t b = 0; b < blocks.size(); ++b) x = blocks[b].forward(store, x, memory, c.blocks[b]);
    c.normed = norm.forward(store, x, c.norm);
    return out.forward(store, c.normed);
  }

  /// Returns d memory.
  Matrix backward(const ParamStore& store, Gradients& grads, const Cache& c, const Matrix& d_logits,
                  Eigen::Index memory_rows) const {
    Matrix dx = norm.backward(store, grads, c.norm, out.backward(store, grads, c.normed, d_logits));
    Matrix d_memory = Matrix::Zero(memory_rows, dx.cols());
    for (std::size_t b = blocks.size(); b-- > 0;) {
      auto [d_in, d_mem] = blocks[b].backward(store, grads, c.blocks[b], dx);
      dx = std::move(d_in);
      d_memory += d_mem;
    }
    for (std::size_t t = 0; t < c.inputs.size(); ++t) {
      grads[token_embed].row(c.inputs[t]) += dx.row(static_cast<Eigen::Index>(t));
      grads[positions].row(static_cast<Eigen::Index>(t)) += dx.row(static_cast<Eigen::Index>(t));
    }
    return d_memory;
  }
};

struct CrossEntropy {
  double loss = 0.0;
  Matrix d_logits;
};

/// Mean token cross-entropy of `logits` rows against `targets`.
inline CrossEntropy sequence_cross_entropy(const Matrix& logits, const TokenSeq& targets) {
  if (logits.rows() != static_cast<Eigen::Index>(targets.size()) || targets.empty())
    throw ShapeError("logit rows must match a non-empty target sequence");
  CrossEntropy ce;
  ce.d_logits.resize(logits.rows(), logits.cols());
  const double n = static_cast<double>(targets.size());
  for (Eigen::Index t = 0; t < logits.rows(); ++t) {
    const TokenId y = targets[static_cast<std::size_t>(t)];
    if (y < 0 || y >= logits.cols()) throw ContractError("target token outside the vocabulary");
    const double m = logits.row(t).maxCoeff();
    RowVector e = (logits.row(t).array() - m).exp().matrix();
    const double z = e.sum();
    ce.loss += -(logits(t, y) - m - std::log(z));
    ce.d_logits.row(t) = e / z;
    ce.d_logits(t, y) -= 1.0;
  }
  ce.loss /= n;
  ce.d_logits /= n;
  return ce;
}

inline Matrix stack_rows(const Matrix& top, const Matrix& bottom) {
  const Eigen::Index cols = top.rows() > 0 ? top.cols() : bottom.cols();
  Matrix m(top.rows() + bottom.rows(), cols);
  if (top.rows() > 0) m.topRows(top.rows()) = top;
  if (bottom.rows() > 0) m.bottomRows(bottom.rows()) = bottom;
  return m;
}

struct LmResult {
  double loss = 0.0;
  Matrix d_image_states;
  Matrix d_text_states;
};

/// Teacher-forced autoregressive loss of `target` (BOS ... EOS) conditioned
/// on image token states and concept-conditioned text states.
inline LmResult lm_loss(const ParamStore& store, Gradients* grads, const CaptionDecoder& decoder,
                        const Matrix& image_states, const Matrix& text_states, const TokenSeq& target) {
  if (target.size() < 2) throw ContractError("language-model target needs BOS plus at least one token");
  const Matrix memory = stack_rows(image_states, text_states);
  TokenSeq inputs(target.begin(), target.end() - 1);
  TokenSeq labels(target.begin() + 1, target.end());
  CaptionDecoder::Cache cache;
  Matrix logits = decoder.forward(store, inputs, memory, cache);
  CrossEntropy ce = sequence_cross_entropy(logits, labels);
  LmResult r;
  r.loss = ce.loss;
  if (grads) {
    Matrix d_memory = decoder.backward(store, *grads, cache, ce.d_logits, memory.rows());
    r.d_image_states = d_memory.topRows(image_states.rows());
    r.d_text_states = d_memory.bottomRows(text_states.rows());
  }
  return r;
}

/// Text-encoder input for the language-model path: prompt prefix, concept
/// tokens, then (optionally) the masked caption.
inline TokenSeq concept_conditioned_input(const TokenVocab& vocab, const std::vector<int>& concepts,
                                          const TokenSeq& masked_caption = {}) {
  TokenSeq in = vocab.concept_prefix();
  for (int c : concepts) in.push_back(vocab.concept_token(c));
  in.insert(in.end(), masked_caption.begin(), masked_caption.end());
  return in;
}

enum class DecodeStrategy { greedy, sampled };

struct SyntheticCaption {
  TokenSeq tokens;
  std::int64_t source_pair_id = 0;
  DecodeStrategy strategy = DecodeStrategy::greedy;
  std::uint64_t seed = 0;

  bool operator==(const SyntheticCaption&) const = default;
};

/// The three towers a captioner needs, borrowed from a model.
struct CaptionerView {
  const ImageEncoder& image;
  const TextEncoder& text;
  const CaptionDecoder& decoder;
  const TokenVocab& vocab;
};

/// Autoregressive decode from BOS until EOS or `max_len` tokens. The image is
/// encoded with no masking; the text encoder sees only the prompt prefix and
/// the concepts.
inline SyntheticCaption generate_caption(const ParamStore& store, const CaptionerView& m, const Matrix& patch_grid,
                                         const std::vector<int>& concepts, DecodeStrategy strategy, std::size_t max_len,
                                         std::int64_t pair_id = 0, std::uint64_t seed = 0) {
  if (max_len < 1 || max_len > kMaxTextLength) throw RangeError("max_len must lie in [1, 77]");
  const MaskPlan plan = make_mask_plan(static_cast<int>(patch_grid.rows()), 0.0, 0);
  const EmbeddingPair img = encode_image(store, m.image, patch_grid, plan);
  const EmbeddingPair txt = encode_text(store, m.text, concept_conditioned_input(m.vocab, concepts));
  const Matrix memory = stack_rows(img.token_states, txt.token_states);

  SyntheticCaption out;
  out.source_pair_id = pair_id;
  out.strategy = strategy;
  out.seed = seed;
  out.tokens = {TokenVocab::kBos};
  Rng rng = make_rng(seed, "caption.sample", static_cast<std::uint64_t>(pair_id));
  while (out.tokens.size() < max_len) {
    CaptionDecoder::Cache cache;
    Matrix logits = m.decoder.forward(store, out.tokens, memory, cache);
    RowVector last = logits.row(logits.rows() - 1);
    TokenId next = 0;
    if (strategy == DecodeStrategy::greedy) {
      Eigen::Index arg = 0;
      last.maxCoeff(&arg);
      next = static_cast<TokenId>(arg);
    } else {
      RowVector p = (last.array() - last.maxCoeff()).exp().matrix();
      p /= p.sum();
      double u = uniform01(rng), acc = 0.0;
      next = static_cast<TokenId>(p.size() - 1);
      for (Eigen::Index j = 0; j < p.size(); ++j) {
        acc += p(j);
        if (u < acc) {
          next = static_cast<TokenId>(j);
          break;
        }
      }
    }
    out.tokens.push_back(next);
    if (next == TokenVocab::kEos) break;
  }
  return out;
}

using CaptionMap = std::map<std::int64_t, SyntheticCaption>;

/// Replaces each record's caption by its synthetic caption with probability
/// eps_i, decided once per record from a pair-derived stream. Everything else
/// about a record is untouched.
template <typename Record>
std::vector<Record> complete_corpus(std::vector<Record> corpus, const NoiseEstimates& estimates,
                                    const CaptionMap& captions, std::uint64_t seed,
                                    std::vector<bool>* replaced = nullptr) {
  if (replaced) replaced->assign(corpus.size(), false);
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    Record& r = corpus[i];
    const auto idx = estimates.find(r.pair_id);
    if (idx < 0) throw ContractError("no noise estimate for pair " + std::to_string(r.pair_id));
    const double eps = estimates.epsilon(idx);
    if (eps <= 0.0) continue;
    auto it = captions.find(r.pair_id);
    if (it == captions.end()) throw ContractError("no synthetic caption for pair " + std::to_string(r.pair_id));
    Rng rng = make_rng(seed, "complete.replace", static_cast<std::uint64_t>(r.pair_id));
    if (uniform01(rng) < eps) {
      r.caption = it->second.tokens;
      if (replaced) (*replaced)[i] = true;
    }
  }
  return corpus;
}

inline void save_captions(const std::string& path, const CaptionMap& captions, const TokenVocab& vocab) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open caption sidecar for writing: " + path);
  for (const auto& [id, c] : captions) {
    nlohmann::json j = {{"pair_id", id},
                        {"tokens", vocab.decode(c.tokens)},
                        {"strategy", c.strategy == DecodeStrategy::greedy ? "greedy" : "sampled"},
                        {"seed", c.seed}};
    out << j.dump() << '\n';
  }
}

inline CaptionMap load_captions(const std::string& path, const TokenVocab& vocab) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open caption sidecar: " + path);
  CaptionMap out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    try {
      auto j = nlohmann::json::parse(line);
      SyntheticCaption c;
      c.source_pair_id = j.at("pair_id").get<std::int64_t>();
      c.tokens = vocab.encode(j.at("tokens").get<std::vector<std::string>>());
      const auto strategy = j.at("strategy").get<std::string>();
      if (strategy != "greedy" && strategy != "sampled") throw ParseError(line_no, "unknown strategy " + strategy);
      c.strategy = strategy == "greedy" ? DecodeStrategy::greedy : DecodeStrategy::sampled;
      c.seed = j.value("seed", std::uint64_t{0});
      out[c.source_pair_id] = std::move(c);
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(line_no, std::string("malformed caption line: ") + e.what());
    } catch (const ContractError& e) {
      throw ParseError(line_no, e.what());
    }
  }
  return out;
}

}  // namespace nlip
