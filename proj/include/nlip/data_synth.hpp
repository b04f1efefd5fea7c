#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "nlip/errors.hpp"
#include "nlip/param_store.hpp"
#include "nlip/random.hpp"

namespace nlip {

inline constexpr std::size_t kMaxTextLength = 77;

using TokenId = std::int32_t;
using TokenSeq = std::vector<TokenId>;

/// Ordered token list. Layout: specials, template words, prompt-prefix words,
/// then one token per concept (contiguous, starting at `first_concept`).
class TokenVocab {
 public:
  static constexpr TokenId kPad = 0;
  static constexpr TokenId kBos = 1;
  static constexpr TokenId kEos = 2;
  static constexpr TokenId kMask = 3;

  TokenVocab() = default;

  static TokenVocab with_concepts(const std::vector<std::string>& concept_names) {
    std::vector<std::string> tokens = {"<pad>", "<bos>", "<eos>", "<mask>", "a",        "photo",   "of",
                                       "and",   "This",  "may",   "describe", "these", "objects:"};
    const auto first = static_cast<TokenId>(tokens.size());
    tokens.insert(tokens.end(), concept_names.begin(), concept_names.end());
    return TokenVocab(std::move(tokens), first);
  }

  TokenVocab(std::vector<std::string> tokens, TokenId first_concept)
      : tokens_(std::move(tokens)), first_concept_(first_concept) {
    for (std::size_t i = 0; i < tokens_.size(); ++i) {
      if (!index_.emplace(tokens_[i], static_cast<TokenId>(i)).second)
        throw ContractError("duplicate token '" + tokens_[i] + "' in vocabulary");
    }
  }

  std::size_t size() const { return tokens_.size(); }
  const std::vector<std::string>& tokens() const { return tokens_; }
  const std::string& token(TokenId id) const { return tokens_.at(static_cast<std::size_t>(id)); }
  TokenId first_concept() const { return first_concept_; }
  std::size_t num_concepts() const { return tokens_.size() - static_cast<std::size_t>(first_concept_); }

  TokenId id(const std::string& token) const {
    auto it = index_.find(token);
    if (it == index_.end()) throw ContractError("token '" + token + "' not in vocabulary");
    return it->second;
  }

  bool contains(const std::string& token) const { return index_.count(token) != 0; }
  bool is_concept(TokenId id) const { return id >= first_concept_ && static_cast<std::size_t>(id) < tokens_.size(); }
  int concept_of(TokenId id) const { return is_concept(id) ? id - first_concept_ : -1; }
  TokenId concept_token(int concept_index) const { return first_concept_ + concept_index; }

  TokenSeq encode(const std::vector<std::string>& words) const {
    TokenSeq out;
    out.reserve(words.size());
    for (const auto& w : words) out.push_back(id(w));
    return out;
  }

  std::vector<std::string> decode(const TokenSeq& ids) const {
    std::vector<std::string> out;
    out.reserve(ids.size());
    for (TokenId t : ids) out.push_back(token(t));
    return out;
  }

  /// "a photo of <c1> and <c2> ..." wrapped in BOS/EOS.
  TokenSeq caption(const std::vector<int>& concepts) const {
    TokenSeq out = {kBos, id("a"), id("photo"), id("of")};
    for (std::size_t i = 0; i < concepts.size(); ++i) {
      if (i > 0) out.push_back(id("and"));
      out.push_back(concept_token(concepts[i]));
    }
    out.push_back(kEos);
    return out;
  }

  /// "This photo may describe these objects:" as token ids.
  TokenSeq concept_prefix() const { return encode({"This", "photo", "may", "describe", "these", "objects:"}); }

  bool operator==(const TokenVocab& other) const {
    return tokens_ == other.tokens_ && first_concept_ == other.first_concept_;
  }

 private:
  std::vector<std::string> tokens_;
  TokenId first_concept_ = 0;
  std::unordered_map<std::string, TokenId> index_;
};

struct ConceptWorld {
  int num_concepts = 0;
  int d_img = 0;
  std::vector<std::string> concept_names;
  Matrix signatures;  // num_concepts x d_img, unit rows
  TokenVocab vocab;
  std::uint64_t seed = 0;
};

enum class NoiseFlag { clean, mismatched, incomplete };

inline const char* to_string(NoiseFlag flag) {
  switch (flag) {
    case NoiseFlag::clean: return "clean";
    case NoiseFlag::mismatched: return "mismatched";
    case NoiseFlag::incomplete: return "incomplete";
  }
  return "clean";
}

inline NoiseFlag noise_flag_from_string(const std::string& s) {
  if (s == "clean") return NoiseFlag::clean;
  if (s == "mismatched") return NoiseFlag::mismatched;
  if (s == "incomplete") return NoiseFlag::incomplete;
  throw ContractError("unknown noise flag '" + s + "'");
}

/// One image-text pair with hidden ground truth. Only evaluation code may read
/// `noise_flag` and `true_concepts`; training consumes TrainPair.
struct PairRecord {
  std::int64_t pair_id = 0;
  Matrix patches;  // patch_count x d_img
  TokenSeq caption;
  std::vector<int> true_concepts;  // sorted concept indices of the image
  NoiseFlag noise_flag = NoiseFlag::clean;
  std::optional<double> epsilon;
  std::optional<double> smoothing;

  bool operator==(const PairRecord& o) const {
    return pair_id == o.pair_id && patches.rows() == o.patches.rows() && patches.cols() == o.patches.cols() &&
           patches == o.patches && caption == o.caption && true_concepts == o.true_concepts &&
           noise_flag == o.noise_flag && epsilon == o.epsilon && smoothing == o.smoothing;
  }
};

/// The training-path view of a record: no ground-truth fields exist here.
struct TrainPair {
  std::int64_t pair_id = 0;
  Matrix patches;
  TokenSeq caption;
};

inline std::vector<TrainPair> strip_labels(const std::vector<PairRecord>& records) {
  std::vector<TrainPair> out;
  out.reserve(records.size());
  for (const auto& r : records) out.push_back({r.pair_id, r.patches, r.caption});
  return out;
}

struct NoiseSpec {
  double mismatch_rate = 0.0;
  double incomplete_rate = 0.0;
  double drop_fraction = 0.5;
  std::uint64_t seed = 0;
};

inline const std::vector<std::string>& default_concept_names() {
  static const std::vector<std::string> names = {
      "cat",   "dog",   "car",   "tree",  "boat",  "bird",  "house", "horse", "chair", "cup",   "bike",  "plane",
      "train", "clock", "apple", "bread", "shoe",  "lamp",  "book",  "phone", "table", "bench", "kite",  "sheep",
      "cow",   "bear",  "fish",  "rose",  "door",  "bus",   "vase",  "pizza", "sofa",  "truck", "bowl",  "hat"};
  return names;
}

inline ConceptWorld generate_world(int num_concepts, int d_img, std::uint64_t seed) {
  if (num_concepts < 2) throw RangeError("a concept world needs at least 2 concepts");
  if (d_img < 4) throw RangeError("a concept world needs d_img >= 4");
  ConceptWorld w;
  w.num_concepts = num_concepts;
  w.d_img = d_img;
  w.seed = seed;
  const auto& names = default_concept_names();
  for (int c = 0; c < num_concepts; ++c)
    w.concept_names.push_back(c < static_cast<int>(names.size()) ? names[c] : "concept" + std::to_string(c));

  Rng rng = make_rng(seed, "world.signatures");
  std::normal_distribution<double> normal(0.0, 1.0);
  w.signatures.resize(num_concepts, d_img);
  for (int c = 0; c < num_concepts; ++c) {
    while (true) {
      RowVector v(d_img);
      for (int j = 0; j < d_img; ++j) v(j) = normal(rng);
      if (v.norm() < 1e-6) continue;
      v.normalize();
      bool distinct = true;
      for (int p = 0; p < c; ++p)
        if (w.signatures.row(p).dot(v) > 1.0 - 1e-9) distinct = false;
      if (!distinct) continue;
      w.signatures.row(c) = v;
      break;
    }
  }
  w.vocab = TokenVocab::with_concepts(w.concept_names);
  return w;
}

/// Weight of a patch's dominant concept; the rest is shared by the image's
/// other concepts.
inline constexpr double kDominantWeight = 0.75;

inline PairRecord generate_pair(const ConceptWorld& world, int concepts_per_image, int patch_count, double noise_std,
                                 std::int64_t pair_id) {
  if (concepts_per_image < 1 || concepts_per_image > world.num_concepts)
    throw RangeError("concepts_per_image must lie in [1, num_concepts]");
  if (patch_count < 1) throw RangeError("patch_count must be positive");
  Rng rng = make_rng(world.seed, "world.pair", static_cast<std::uint64_t>(pair_id));

  std::vector<int> pool(world.num_concepts);
  for (int c = 0; c < world.num_concepts; ++c) pool[c] = c;
  for (int i = 0; i < concepts_per_image; ++i) {
    auto j = i + static_cast<int>(uniform_index(rng, static_cast<std::uint64_t>(world.num_concepts - i)));
    std::swap(pool[i], pool[j]);
  }
  std::vector<int> chosen(pool.begin(), pool.begin() + concepts_per_image);

  PairRecord r;
  r.pair_id = pair_id;
  r.patches.resize(patch_count, world.d_img);
  std::normal_distribution<double> normal(0.0, 1.0);
  const int k = concepts_per_image;
  for (int p = 0; p < patch_count; ++p) {
    const int dominant = p % k;
    RowVector x = RowVector::Zero(world.d_img);
    for (int i = 0; i < k; ++i) {
      double weight = k == 1 ? 1.0 : (i == dominant ? kDominantWeight : (1.0 - kDominantWeight) / (k - 1));
      x += weight * world.signatures.row(chosen[i]);
    }
    if (noise_std > 0.0)
      for (int j = 0; j < world.d_img; ++j) x(j) += noise_std * normal(rng);
    r.patches.row(p) = x;
  }
  r.caption = world.vocab.caption(chosen);
  r.true_concepts = chosen;
  std::sort(r.true_concepts.begin(), r.true_concepts.end());
  return r;
}

struct CorpusSpec {
  int n = 0;
  int concepts_per_image = 3;
  int patch_count = 16;
  double noise_std = 0.1;
  std::int64_t first_pair_id = 0;
};

inline std::vector<PairRecord> generate_corpus(const ConceptWorld& world, const CorpusSpec& spec) {
  std::vector<PairRecord> out;
  out.reserve(static_cast<std::size_t>(std::max(spec.n, 0)));
  for (int i = 0; i < spec.n; ++i)
    out.push_back(generate_pair(world, spec.concepts_per_image, spec.patch_count, spec.noise_std,
                                spec.first_pair_id + i));
  return out;
}

/// Concept indices mentioned by a caption, in order of appearance.
inline std::vector<int> mentioned_concepts(const TokenVocab& vocab, const TokenSeq& caption) {
  std::vector<int> out;
  for (TokenId t : caption)
    if (vocab.is_concept(t)) out.push_back(vocab.concept_of(t));
  return out;
}

/// Corrupts a corpus in place semantics (returns a copy). Mismatched records
/// receive captions permuted by a single-cycle derangement; incomplete records
/// lose ceil(drop_fraction * k) concept mentions. The two sets are disjoint.
inline std::vector<PairRecord> inject_noise(std::vector<PairRecord> corpus, const NoiseSpec& spec,
                                            const TokenVocab& vocab) {
  if (spec.mismatch_rate < 0.0 || spec.mismatch_rate > 1.0 || spec.incomplete_rate < 0.0 ||
      spec.incomplete_rate > 1.0)
    throw RangeError("noise rates must lie in [0, 1]");
  if (spec.mismatch_rate + spec.incomplete_rate > 1.0 + 1e-12)
    throw RangeError("mismatch_rate + incomplete_rate must not exceed 1");
  if (!(spec.drop_fraction > 0.0 && spec.drop_fraction <= 1.0)) throw RangeError("drop_fraction must lie in (0, 1]");

  const std::size_t n = corpus.size();
  const auto n_mismatch = static_cast<std::size_t>(std::floor(spec.mismatch_rate * static_cast<double>(n)));
  const auto n_incomplete = static_cast<std::size_t>(std::floor(spec.incomplete_rate * static_cast<double>(n)));
  if (n_mismatch == 1) throw RangeError("mismatch noise needs at least 2 selected records to derange");
  if (n_mismatch + n_incomplete > n) throw RangeError("noise rates select more records than the corpus holds");

  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  Rng rng = make_rng(spec.seed, "noise.selection");
  for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[uniform_index(rng, i)]);

  std::vector<std::size_t> mismatched(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_mismatch));
  std::sort(mismatched.begin(), mismatched.end());
  if (n_mismatch >= 2) {
    // Sattolo's algorithm: a uniformly random cyclic permutation, hence no fixed points.
    std::vector<std::size_t> perm(n_mismatch);
    for (std::size_t i = 0; i < n_mismatch; ++i) perm[i] = i;
    Rng prng = make_rng(spec.seed, "noise.derangement");
    for (std::size_t i = n_mismatch - 1; i > 0; --i) std::swap(perm[i], perm[uniform_index(prng, i)]);
    std::vector<TokenSeq> original;
    original.reserve(n_mismatch);
    for (std::size_t idx : mismatched) original.push_back(corpus[idx].caption);
    for (std::size_t i = 0; i < n_mismatch; ++i) {
      corpus[mismatched[i]].caption = original[perm[i]];
      corpus[mismatched[i]].noise_flag = NoiseFlag::mismatched;
    }
  }

  for (std::size_t s = n_mismatch; s < n_mismatch + n_incomplete; ++s) {
    PairRecord& r = corpus[order[s]];
    std::vector<int> mentions = mentioned_concepts(vocab, r.caption);
    const auto k = mentions.size();
    const auto drop = static_cast<std::size_t>(std::ceil(spec.drop_fraction * static_cast<double>(k) - 1e-12));
    Rng drng = make_rng(spec.seed, "noise.drop", static_cast<std::uint64_t>(r.pair_id));
    for (std::size_t i = 0; i < drop && !mentions.empty(); ++i)
      mentions.erase(mentions.begin() + static_cast<std::ptrdiff_t>(uniform_index(drng, mentions.size())));
    r.caption = vocab.caption(mentions);
    r.noise_flag = NoiseFlag::incomplete;
  }
  return corpus;
}

}  // namespace nlip
