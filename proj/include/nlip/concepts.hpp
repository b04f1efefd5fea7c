#pragma once

#include <algorithm>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "nlip/model.hpp"

namespace nlip {

/// Visual concept vocabulary Q: concept tokens with corpus frequencies,
/// ordered by (-frequency, token).
struct ConceptVocabulary {
  std::vector<std::pair<std::string, int>> entries;
  int min_frequency = 5;

  std::size_t size() const { return entries.size(); }
  bool operator==(const ConceptVocabulary&) const = default;
};

/// Counts lexicon tokens over all captions (every occurrence counts) and keeps
/// those seen at least `min_frequency` times.
inline ConceptVocabulary build_vocabulary(const std::vector<std::vector<std::string>>& captions,
                                          const std::set<std::string>& lexicon, int min_frequency = 5) {
  std::map<std::string, int> counts;
  for (const auto& caption : captions)
    for (const auto& tok : caption)
      if (lexicon.count(tok)) ++counts[tok];
  ConceptVocabulary v;
  v.min_frequency = min_frequency;
  for (const auto& [tok, n] : counts)
    if (n >= min_frequency) v.entries.emplace_back(tok, n);
  std::sort(v.entries.begin(), v.entries.end(), [](const auto& a, const auto& b) {
    return a.second != b.second ? a.second > b.second : a.first < b.first;
  });
  return v;
}

inline std::set<std::string> concept_lexicon(const TokenVocab& vocab) {
  std::set<std::string> out;
  for (std::size_t i = static_cast<std::size_t>(vocab.first_concept()); i < vocab.size(); ++i)
    out.insert(vocab.tokens()[i]);
  return out;
}

inline void save_vocabulary(const ConceptVocabulary& v, const std::string& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open vocabulary for writing: " + path);
  for (const auto& [tok, n] : v.entries) out << tok << '\t' << n << '\n';
}

inline ConceptVocabulary load_vocabulary(const std::string& path, int min_frequency = 5) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open vocabulary: " + path);
  ConceptVocabulary v;
  v.min_frequency = min_frequency;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const auto tab = line.find('\t');
    if (tab == std::string::npos) throw ParseError(line_no, "expected token<TAB>frequency");
    try {
      v.entries.emplace_back(line.substr(0, tab), std::stoi(line.substr(tab + 1)));
    } catch (const std::exception&) {
      throw ParseError(line_no, "bad frequency");
    }
  }
  return v;
}

/// Prompt template with a single "{}" slot, and the number of concepts wanted.
struct ConceptQuery {
  std::vector<std::string> prompt = {"a", "photo", "of", "a", "{}"};
  int k = 5;
};

/// BOS + prompt with the slot filled + EOS.
inline TokenSeq prompt_tokens(const TokenVocab& vocab, const std::vector<std::string>& prompt,
                              const std::string& filler) {
  TokenSeq out = {TokenVocab::kBos};
  for (const auto& w : prompt) out.push_back(vocab.id(w == "{}" ? filler : w));
  out.push_back(TokenVocab::kEos);
  return out;
}

/// Prompt embeddings of every vocabulary entry, rebuilt whenever the
/// parameter version changes.
class ConceptIndex {
 public:
  const Matrix& embeddings(const ParamStore& store, const NlipModel& model, const ConceptVocabulary& vocab,
                           const ConceptQuery& query) {
    if (!valid_ || version_ != store.version() || rows_ != vocab.size() || prompt_ != query.prompt) {
      table_.resize(static_cast<Eigen::Index>(vocab.size()), model.config.d_embed);
      for (std::size_t i = 0; i < vocab.size(); ++i)
        table_.row(static_cast<Eigen::Index>(i)) =
            encode_text(store, model.text, prompt_tokens(model.vocab, query.prompt, vocab.entries[i].first)).global;
      version_ = store.version();
      rows_ = vocab.size();
      prompt_ = query.prompt;
      valid_ = true;
    }
    return table_;
  }

  void invalidate() { valid_ = false; }

 private:
  Matrix table_;
  std::uint64_t version_ = 0;
  std::size_t rows_ = 0;
  std::vector<std::string> prompt_;
  bool valid_ = false;
};

struct RetrievedConcept {
  std::string token;
  double score = 0.0;
};

/// Top-k concepts for an already-embedded image. Scores are temperature-scaled
/// cosine similarities; ties keep vocabulary order.
inline std::vector<RetrievedConcept> top_k_concepts(const RowVector& image_embedding, const Matrix& prompt_embeddings,
                                                    const ConceptVocabulary& vocab, int k, double tau) {
  if (k < 1 || static_cast<std::size_t>(k) > vocab.size())
    throw RangeError("k = " + std::to_string(k) + " outside [1, |Q| = " + std::to_string(vocab.size()) + "]");
  Vector scores = (prompt_embeddings * image_embedding.transpose()) / tau;
  std::vector<std::size_t> order(vocab.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return scores(static_cast<Eigen::Index>(a)) > scores(static_cast<Eigen::Index>(b));
  });
  std::vector<RetrievedConcept> out;
  for (int i = 0; i < k; ++i) out.push_back({vocab.entries[order[i]].first, scores(static_cast<Eigen::Index>(order[i]))});
  return out;
}

inline std::vector<RetrievedConcept> retrieve_concepts(const ParamStore& store, const NlipModel& model,
                                                       ConceptIndex& index, const ConceptVocabulary& vocab,
                                                       const ConceptQuery& query, const Matrix& patch_grid) {
  if (query.k < 1 || static_cast<std::size_t>(query.k) > vocab.size())
    throw RangeError("k = " + std::to_string(query.k) + " outside [1, |Q| = " + std::to_string(vocab.size()) + "]");
  const Matrix& table = index.embeddings(store, model, vocab, query);
  return top_k_concepts(model.embed_image(store, patch_grid).global, table, vocab, query.k, model.tau(store));
}

/// Concept indices (in the token vocabulary's concept numbering) of a result.
inline std::vector<int> concept_ids(const TokenVocab& vocab, const std::vector<RetrievedConcept>& found) {
  std::vector<int> out;
  out.reserve(found.size());
  for (const auto& c : found) out.push_back(vocab.concept_of(vocab.id(c.token)));
  return out;
}

}  // namespace nlip
