#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>

#include "nlip/alignment.hpp"
#include "nlip/captioner.hpp"
#include "nlip/encoders.hpp"

namespace nlip {

/// All towers of the pre-training architecture over one ParamStore:
/// image encoder, MAE decoder, text encoder, caption decoder and temperature.
struct NlipModel {
  EncoderConfig config;
  TokenVocab vocab;
  ImageEncoder image;
  MaeDecoder mae;
  TextEncoder text;
  CaptionDecoder decoder;
  ParamId log_tau;
  int decoder_blocks = 2;

  static NlipModel build(ParamStore& store, EncoderConfig config, const TokenVocab& vocab, int decoder_blocks,
                         std::uint64_t seed) {
    config.vocab_size = static_cast<int>(vocab.size());
    config.validate();
    NlipModel m;
    m.config = config;
    m.vocab = vocab;
    m.decoder_blocks = decoder_blocks;
    m.image = ImageEncoder::create(store, config, seed);
    m.mae = MaeDecoder::create(store, config, seed);
    m.text = TextEncoder::create(store, config, seed);
    m.decoder = CaptionDecoder::create(store, config.vocab_size, config.width, decoder_blocks, seed);
    m.log_tau = store.add_constant("log_tau", 1, 1, std::log(kTauInit), false);
    return m;
  }

  double tau(const ParamStore& store) const { return std::exp(store[log_tau](0, 0)); }

  void clamp_tau(ParamStore& store) const {
    double& v = store[log_tau](0, 0);
    const double clamped = std::clamp(v, std::log(kTauMin), std::log(kTauMax));
    if (clamped != v) {
      v = clamped;
      store.touch();
    }
  }

  CaptionerView captioner() const { return {image, text, decoder, vocab}; }

  /// Downstream-mode image embedding: every patch visible.
  EmbeddingPair embed_image(const ParamStore& store, const Matrix& patch_grid) const {
    return encode_image(store, image, patch_grid, make_mask_plan(static_cast<int>(patch_grid.rows()), 0.0, 0));
  }
};

/// The text embedding the alignment losses consume. Its only input is the
/// caption token sequence, so no image state can reach it.
inline EmbeddingPair alignment_text_embedding(const ParamStore& store, const TextEncoder& encoder,
                                              const TokenSeq& caption) {
  return encode_text(store, encoder, caption);
}

}  // namespace nlip
