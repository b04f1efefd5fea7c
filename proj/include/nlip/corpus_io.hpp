#pragma once

#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "nlip/data_synth.hpp"

namespace nlip {

/// Corpus-level metadata carried in the first line of a corpus file. The
/// `world_*` fields let consumers regenerate the concept world (for clean
/// held-out splits) without shipping signatures.
struct CorpusHeader {
  int d_img = 0;
  int patch_count = 0;
  TokenVocab vocab;
  int num_concepts = 0;
  std::uint64_t world_seed = 0;
  int concepts_per_image = 0;
  double noise_std = 0.0;

  bool operator==(const CorpusHeader& o) const {
    return d_img == o.d_img && patch_count == o.patch_count && vocab == o.vocab && num_concepts == o.num_concepts &&
           world_seed == o.world_seed && concepts_per_image == o.concepts_per_image && noise_std == o.noise_std;
  }
};

struct Corpus {
  CorpusHeader header;
  std::vector<PairRecord> records;

  bool operator==(const Corpus& o) const { return header == o.header && records == o.records; }
};

inline CorpusHeader header_for(const ConceptWorld& world, const CorpusSpec& spec) {
  return {world.d_img, spec.patch_count, world.vocab, world.num_concepts, world.seed, spec.concepts_per_image,
          spec.noise_std};
}

inline nlohmann::json record_to_json(const PairRecord& r, const TokenVocab& vocab) {
  nlohmann::json patches = nlohmann::json::array();
  for (Eigen::Index i = 0; i < r.patches.rows(); ++i)
    for (Eigen::Index j = 0; j < r.patches.cols(); ++j) patches.push_back(r.patches(i, j));
  nlohmann::json j = {{"pair_id", r.pair_id},
                      {"patches", std::move(patches)},
                      {"caption", vocab.decode(r.caption)},
                      {"true_concepts", r.true_concepts},
                      {"noise_flag", to_string(r.noise_flag)}};
  if (r.epsilon) j["epsilon"] = *r.epsilon;
  if (r.smoothing) j["w"] = *r.smoothing;
  return j;
}

inline void save_corpus(const Corpus& corpus, const std::string& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open corpus for writing: " + path);
  const auto& h = corpus.header;
  nlohmann::json header = {{"format", "nlip-corpus"},
                           {"version", 1},
                           {"d_img", h.d_img},
                           {"patch_count", h.patch_count},
                           {"vocab", h.vocab.tokens()},
                           {"first_concept", h.vocab.first_concept()},
                           {"num_concepts", h.num_concepts},
                           {"world_seed", h.world_seed},
                           {"concepts_per_image", h.concepts_per_image},
                           {"noise_std", h.noise_std}};
  out << header.dump() << '\n';
  for (const auto& r : corpus.records) out << record_to_json(r, h.vocab).dump() << '\n';
  if (!out) throw IoError("failed writing corpus: " + path);
}

inline Corpus load_corpus(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open corpus: " + path);
  Corpus corpus;
  std::string line;
  std::size_t line_no = 0;
  const auto fail = [&](const std::string& why) -> ParseError {
    return ParseError(line_no, why + " (last good line " + std::to_string(line_no - 1) + ")");
  };

  if (!std::getline(in, line)) throw ParseError(1, "missing header line (last good line 0)");
  line_no = 1;
  try {
    auto h = nlohmann::json::parse(line);
    if (h.at("format").get<std::string>() != "nlip-corpus") throw fail("not an nlip-corpus file");
    if (h.at("version").get<int>() != 1) throw fail("unsupported corpus version");
    auto& hd = corpus.header;
    hd.d_img = h.at("d_img").get<int>();
    hd.patch_count = h.at("patch_count").get<int>();
    hd.vocab = TokenVocab(h.at("vocab").get<std::vector<std::string>>(), h.at("first_concept").get<TokenId>());
    hd.num_concepts = h.value("num_concepts", static_cast<int>(hd.vocab.num_concepts()));
    hd.world_seed = h.value("world_seed", std::uint64_t{0});
    hd.concepts_per_image = h.value("concepts_per_image", 0);
    hd.noise_std = h.value("noise_std", 0.0);
  } catch (const nlohmann::json::exception& e) {
    throw fail(std::string("malformed header: ") + e.what());
  } catch (const ContractError& e) {
    throw fail(e.what());
  }

  const auto& vocab = corpus.header.vocab;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) throw fail("empty record line");
    try {
      auto j = nlohmann::json::parse(line);
      PairRecord r;
      r.pair_id = j.at("pair_id").get<std::int64_t>();
      const auto flat = j.at("patches").get<std::vector<double>>();
      const int rows = corpus.header.patch_count;
      const int cols = corpus.header.d_img;
      if (flat.size() != static_cast<std::size_t>(rows) * static_cast<std::size_t>(cols))
        throw fail("patch array has " + std::to_string(flat.size()) + " values, expected " +
                   std::to_string(rows * cols));
      r.patches.resize(rows, cols);
      for (int a = 0; a < rows; ++a)
        for (int b = 0; b < cols; ++b) r.patches(a, b) = flat[static_cast<std::size_t>(a) * cols + b];
      r.caption = vocab.encode(j.at("caption").get<std::vector<std::string>>());
      r.true_concepts = j.at("true_concepts").get<std::vector<int>>();
      r.noise_flag = noise_flag_from_string(j.at("noise_flag").get<std::string>());
      if (j.contains("epsilon")) r.epsilon = j.at("epsilon").get<double>();
      if (j.contains("w")) r.smoothing = j.at("w").get<double>();
      corpus.records.push_back(std::move(r));
    } catch (const nlohmann::json::exception& e) {
      throw fail(std::string("malformed record: ") + e.what());
    } catch (const ContractError& e) {
      throw fail(e.what());
    }
  }
  return corpus;
}

}  // namespace nlip
