#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "nlip/concepts.hpp"
#include "nlip/model.hpp"

namespace nlip {

/// Named metrics with run tags.
struct MetricReport {
  std::map<std::string, double> metrics;
  std::map<std::string, std::string> tags;

  nlohmann::json to_json() const {
    nlohmann::json j;
    for (const auto& [k, v] : tags) j[k] = v;
    for (const auto& [k, v] : metrics) j[k] = v;
    return j;
  }
};

struct RecallAtK {
  std::map<int, double> image_to_text;  // percent
  std::map<int, double> text_to_image;

  double mean(int k) const { return 0.5 * (image_to_text.at(k) + text_to_image.at(k)); }
};

/// 1-based rank of the true match (index `query`) in `scores`; a candidate
/// outranks it when strictly better or equal with a lower index.
inline int true_match_rank(const RowVector& scores, Eigen::Index query) {
  const double target = scores(query);
  int rank = 1;
  for (Eigen::Index j = 0; j < scores.size(); ++j)
    if (scores(j) > target || (scores(j) == target && j < query)) ++rank;
  return rank;
}

/// R@K in both directions from an N x N image-by-text score matrix whose
/// diagonal holds the true matches.
inline RecallAtK retrieval_recall(const Matrix& similarity, const std::vector<int>& ks) {
  const Eigen::Index n = similarity.rows();
  if (n == 0 || similarity.cols() != n) throw RangeError("retrieval recall needs a non-empty square score matrix");
  RecallAtK out;
  std::vector<int> i2t(static_cast<std::size_t>(n)), t2i(static_cast<std::size_t>(n));
  for (Eigen::Index i = 0; i < n; ++i) {
    i2t[static_cast<std::size_t>(i)] = true_match_rank(similarity.row(i), i);
    t2i[static_cast<std::size_t>(i)] = true_match_rank(similarity.col(i).transpose(), i);
  }
  for (int k : ks) {
    const auto pct = [&](const std::vector<int>& ranks) {
      return 100.0 * static_cast<double>(std::count_if(ranks.begin(), ranks.end(), [k](int r) { return r <= k; })) /
             static_cast<double>(n);
    };
    out.image_to_text[k] = pct(i2t);
    out.text_to_image[k] = pct(t2i);
  }
  return out;
}

inline RecallAtK retrieval_recall(const Matrix& img_embs, const Matrix& txt_embs, const std::vector<int>& ks) {
  if (img_embs.rows() != txt_embs.rows()) throw ShapeError("image and text embedding counts differ");
  return retrieval_recall(Matrix(img_embs * txt_embs.transpose()), ks);
}

/// ROC-AUC of `scores` for the positive (noisy) class via the rank-sum
/// statistic with midranks for ties.
inline double noise_auc(const std::vector<double>& scores, const std::vector<bool>& positive) {
  if (scores.size() != positive.size()) throw ShapeError("score and label counts differ");
  const std::size_t n = scores.size();
  std::size_t n_pos = 0;
  for (bool p : positive) n_pos += p ? 1 : 0;
  const std::size_t n_neg = n - n_pos;
  if (n_pos == 0 || n_neg == 0) throw ContractError("AUC is undefined unless both classes are present");
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  std::vector<double> rank(n);
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j + 1 < n && scores[order[j + 1]] == scores[order[i]]) ++j;
    const double mid = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t t = i; t <= j; ++t) rank[order[t]] = mid;
    i = j + 1;
  }
  double rank_sum = 0.0;
  for (std::size_t i = 0; i < n; ++i)
    if (positive[i]) rank_sum += rank[i];
  const double np = static_cast<double>(n_pos), nn = static_cast<double>(n_neg);
  return (rank_sum - np * (np + 1.0) / 2.0) / (np * nn);
}

struct ConceptRecall {
  double recall = 0.0;
  std::size_t counted = 0;
  std::size_t skipped = 0;  // records with no true concepts
};

/// Mean over records of |mentioned ∩ true| / |true|.
inline ConceptRecall concept_recall(const std::vector<TokenSeq>& captions,
                                    const std::vector<std::vector<int>>& true_concepts, const TokenVocab& vocab) {
  if (captions.size() != true_concepts.size()) throw ShapeError("caption and ground-truth counts differ");
  if (captions.empty()) throw RangeError("concept recall needs at least one record");
  ConceptRecall r;
  double sum = 0.0;
  for (std::size_t i = 0; i < captions.size(); ++i) {
    const std::set<int> truth(true_concepts[i].begin(), true_concepts[i].end());
    if (truth.empty()) {
      ++r.skipped;
      continue;
    }
    std::set<int> mentioned;
    for (int c : mentioned_concepts(vocab, captions[i]))
      if (truth.count(c)) mentioned.insert(c);
    sum += static_cast<double>(mentioned.size()) / static_cast<double>(truth.size());
    ++r.counted;
  }
  r.recall = r.counted ? sum / static_cast<double>(r.counted) : 0.0;
  return r;
}

/// Single-prompt zero-shot classification; ties go to the lowest index.
inline int zero_shot_classify(const RowVector& image_embedding, const Matrix& class_embeddings) {
  if (class_embeddings.rows() < 1) throw RangeError("zero-shot classification needs at least one class");
  int best = 0;
  double best_score = class_embeddings.row(0).dot(image_embedding);
  for (Eigen::Index c = 1; c < class_embeddings.rows(); ++c) {
    const double s = class_embeddings.row(c).dot(image_embedding);
    if (s > best_score) {
      best_score = s;
      best = static_cast<int>(c);
    }
  }
  return best;
}

inline Matrix class_prompt_embeddings(const ParamStore& store, const NlipModel& model,
                                      const std::vector<std::string>& class_names, const ConceptQuery& query = {}) {
  Matrix out(static_cast<Eigen::Index>(class_names.size()), model.config.d_embed);
  for (std::size_t i = 0; i < class_names.size(); ++i)
    out.row(static_cast<Eigen::Index>(i)) =
        encode_text(store, model.text, prompt_tokens(model.vocab, query.prompt, class_names[i])).global;
  return out;
}

inline int zero_shot_classify(const ParamStore& store, const NlipModel& model, const Matrix& patch_grid,
                              const std::vector<std::string>& class_names) {
  return zero_shot_classify(model.embed_image(store, patch_grid).global,
                            class_prompt_embeddings(store, model, class_names));
}

/// Unmasked image and caption embeddings for a set of pairs.
template <typename Record>
std::pair<Matrix, Matrix> embed_pairs(const ParamStore& store, const NlipModel& model,
                                      const std::vector<Record>& records) {
  Matrix img(static_cast<Eigen::Index>(records.size()), model.config.d_embed);
  Matrix txt(static_cast<Eigen::Index>(records.size()), model.config.d_embed);
  for (std::size_t i = 0; i < records.size(); ++i) {
    img.row(static_cast<Eigen::Index>(i)) = model.embed_image(store, records[i].patches).global;
    txt.row(static_cast<Eigen::Index>(i)) = alignment_text_embedding(store, model.text, records[i].caption).global;
  }
  return {std::move(img), std::move(txt)};
}

inline std::string format_fixed(double v, int decimals) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.*f", decimals, v);
  return buf;
}

}  // namespace nlip
