#pragma once

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "nlip/checkpoint.hpp"
#include "nlip/concepts.hpp"
#include "nlip/config.hpp"
#include "nlip/corpus_io.hpp"
#include "nlip/eval.hpp"
#include "nlip/noise_model.hpp"
#include "nlip/optimizer.hpp"
#include "nlip/schedule.hpp"
#include "nlip/trainer.hpp"

namespace nlip {

/// First pair ids of the generated held-out splits, far above any corpus id.
inline constexpr std::int64_t kEvalFirstPairId = 1'000'000;
inline constexpr std::int64_t kCleanFirstPairId = 2'000'000;

inline std::uint64_t fnv1a(const void* data, std::size_t n, std::uint64_t h = 0xCBF29CE484222325ULL) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001B3ULL;
  }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

inline std::uint64_t corpus_fingerprint(const std::vector<TrainPair>& pairs) {
  std::uint64_t h = 0xCBF29CE484222325ULL;
  for (const auto& p : pairs) {
    h = fnv1a(&p.pair_id, sizeof(p.pair_id), h);
    h = fnv1a(p.patches.data(), sizeof(double) * static_cast<std::size_t>(p.patches.size()), h);
    h = fnv1a(p.caption.data(), sizeof(TokenId) * p.caption.size(), h);
  }
  return h;
}

/// Generates the training corpus described by the data keys of a config.
inline Corpus generate_config_corpus(const PipelineConfig& cfg) {
  const ConceptWorld world = generate_world(cfg.num_concepts, cfg.d_img, cfg.seed);
  CorpusSpec spec{cfg.n, cfg.concepts_per_image, cfg.patch_count, cfg.noise_std, 0};
  Corpus c;
  c.header = header_for(world, spec);
  c.records = inject_noise(generate_corpus(world, spec),
                           NoiseSpec{cfg.mismatch_rate, cfg.incomplete_rate, cfg.drop_fraction, cfg.seed},
                           world.vocab);
  return c;
}

/// A noise-free split drawn from the same concept world as a corpus.
inline std::vector<PairRecord> held_out_split(const CorpusHeader& header, int n, std::int64_t first_pair_id) {
  const ConceptWorld world = generate_world(header.num_concepts, header.d_img, header.world_seed);
  if (!(world.vocab == header.vocab)) throw ConfigError("corpus vocabulary does not match its concept world");
  return generate_corpus(world,
                         CorpusSpec{n, header.concepts_per_image, header.patch_count, header.noise_std, first_pair_id});
}

/// Model towers for a config and corpus, parameters added to `store`.
inline NlipModel build_model(ParamStore& store, const PipelineConfig& cfg, const CorpusHeader& header) {
  EncoderConfig ec;
  ec.d_img = header.d_img;
  ec.patch_count = header.patch_count;
  ec.width = cfg.width;
  ec.d_embed = cfg.d_embed;
  ec.blocks = cfg.blocks;
  ec.mask_ratio = cfg.mask_ratio;
  ec.use_positional = cfg.use_positional;
  ec.mae_depth = cfg.mae_depth;
  ec.d_dec = cfg.d_dec;
  return NlipModel::build(store, ec, header.vocab, cfg.decoder_blocks, derive_seed(cfg.seed, "model"));
}

using ConceptTable = std::map<std::int64_t, std::vector<int>>;

struct MetricRow {
  int epoch = 0;
  int stage = 0;
  double ir = 0.0;
  double lm = 0.0;
  double contrastive = 0.0;
  double mean_epsilon = 0.0;
  double retrieval_r1 = 0.0;
  std::optional<double> noise_auc;
};

inline std::string metrics_header() {
  return "epoch,stage,L_IR,L_LM,L_ITC_or_NITC,mean_epsilon,retrieval_R1,noise_auc";
}

inline std::string metrics_line(const MetricRow& r) {
  return std::to_string(r.epoch) + "," + std::to_string(r.stage) + "," + format_fixed(r.ir, 6) + "," +
         format_fixed(r.lm, 6) + "," + format_fixed(r.contrastive, 6) + "," + format_fixed(r.mean_epsilon, 6) + "," +
         format_fixed(r.retrieval_r1, 2) + "," + (r.noise_auc ? format_fixed(*r.noise_auc, 6) : "");
}

struct EpochStats {
  double ir = 0.0;
  double lm = 0.0;
  double contrastive = 0.0;
  std::uint64_t block_evals = 0;
  double seconds = 0.0;
};

/// Warmup over the E_e epochs, cosine decay to the end of E_t.
inline LrSchedule stage1_schedule(const PipelineConfig& cfg, std::int64_t spe) {
  const std::int64_t warm = cfg.E_e * spe;
  return {cfg.base_lr, warm, std::max(warm + 1, (cfg.E_e + cfg.E_t) * spe), cfg.min_lr};
}

/// Scaled-down base rate; warmup is min(cap, 10% of the stage).
inline LrSchedule stage3_schedule(const PipelineConfig& cfg, std::int64_t spe) {
  const std::int64_t total = cfg.E_f * spe;
  const std::int64_t warm = std::min<std::int64_t>(cfg.stage3_warmup_cap, total / 10);
  return {cfg.base_lr * cfg.stage3_lr_scale, warm, std::max(warm + 1, total), cfg.min_lr};
}

/// Deterministic epoch order.
inline std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, int epoch) {
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  Rng rng = make_rng(seed, "train.order", static_cast<std::uint64_t>(epoch));
  for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[uniform_index(rng, i)]);
  return order;
}

inline std::int64_t steps_per_epoch(std::size_t n, int batch_size) {
  return static_cast<std::int64_t>((n + static_cast<std::size_t>(batch_size) - 1) / static_cast<std::size_t>(batch_size));
}

/// One optimizer epoch. `w_of` supplies smoothing rates (used only when
/// opt.noise_adaptive); per-sample ITC losses land in `ledger` when given.
/// The learning rate is read from `schedule` at (store.step - stage_start).
inline EpochStats train_epoch(ParamStore& store, AdamState& adam, const NlipModel& model,
                              const std::vector<TrainPair>& data, const std::function<double(std::int64_t)>& w_of,
                              const ConceptTable* concepts, const ObjectiveOptions& opt, const LrSchedule& schedule,
                              std::uint64_t stage_start, const AdamConfig& adam_config, int batch_size,
                              LossLedger* ledger) {
  if (data.empty()) throw ConfigError("cannot train on an empty corpus");
  const auto start = std::chrono::steady_clock::now();
  const auto order = epoch_order(data.size(), opt.seed, opt.epoch);
  static const std::vector<int> kNone;
  EpochStats stats;
  double batches = 0.0;
  for (std::size_t begin = 0; begin < order.size(); begin += static_cast<std::size_t>(batch_size)) {
    const std::size_t end = std::min(order.size(), begin + static_cast<std::size_t>(batch_size));
    std::vector<BatchSample> batch;
    for (std::size_t i = begin; i < end; ++i) {
      const TrainPair& p = data[order[i]];
      BatchSample s{&p, 0.0, nullptr};
      // smoothing over a single-sample batch is undefined; it degrades to ITC
      if (opt.noise_adaptive && w_of && end - begin > 1) s.w = w_of(p.pair_id);
      if (concepts) {
        auto it = concepts->find(p.pair_id);
        s.concepts = it == concepts->end() ? &kNone : &it->second;
      }
      batch.push_back(s);
    }
    BatchStats b = batch_objective(store, model, batch, opt, &store.grads());
    if (ledger && opt.contrastive)
      for (std::size_t i = 0; i < batch.size(); ++i)
        ledger->record(batch[i].pair->pair_id, b.itc_combined(static_cast<Eigen::Index>(i)));
    const double rate = lr_at(schedule, static_cast<std::int64_t>(store.step - stage_start));
    adam_step(store, adam, rate, adam_config);
    model.clamp_tau(store);
    stats.ir += b.ir;
    stats.lm += b.lm;
    stats.contrastive += b.contrastive;
    stats.block_evals += b.block_evals;
    batches += 1.0;
  }
  stats.ir /= batches;
  stats.lm /= batches;
  stats.contrastive /= batches;
  stats.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return stats;
}

/// Retrieves top-k concepts for every pair with the current weights.
inline ConceptTable retrieve_all(const ParamStore& store, const NlipModel& model, const ConceptVocabulary& vocab,
                                 const ConceptQuery& query, const std::vector<TrainPair>& pairs) {
  ConceptTable out;
  if (vocab.size() == 0) {
    for (const auto& p : pairs) out[p.pair_id] = {};
    return out;
  }
  ConceptQuery q = query;
  q.k = std::min<int>(q.k, static_cast<int>(vocab.size()));
  ConceptIndex index;
  for (const auto& p : pairs)
    out[p.pair_id] = concept_ids(model.vocab, retrieve_concepts(store, model, index, vocab, q, p.patches));
  return out;
}

/// Per-sample ITC losses of a fixed model, batched in corpus order.
inline LossLedger evaluate_ledger(const ParamStore& store, const NlipModel& model, const std::vector<TrainPair>& pairs,
                                  ObjectiveOptions opt, int batch_size) {
  opt.image_reconstruction = false;
  opt.language_model = false;
  opt.contrastive = true;
  opt.noise_adaptive = false;
  LossLedger ledger;
  for (std::size_t begin = 0; begin < pairs.size(); begin += static_cast<std::size_t>(batch_size)) {
    const std::size_t end = std::min(pairs.size(), begin + static_cast<std::size_t>(batch_size));
    std::vector<BatchSample> batch;
    for (std::size_t i = begin; i < end; ++i) batch.push_back({&pairs[i], 0.0, nullptr});
    const BatchStats b = batch_objective(store, model, batch, opt, nullptr);
    for (std::size_t i = 0; i < batch.size(); ++i)
      ledger.record(batch[i].pair->pair_id, b.itc_combined(static_cast<Eigen::Index>(i)));
  }
  return ledger;
}

inline double mean_r1(const ParamStore& store, const NlipModel& model, const std::vector<PairRecord>& eval_split) {
  auto [img, txt] = embed_pairs(store, model, eval_split);
  return retrieval_recall(img, txt, {1}).mean(1);
}

inline ConceptVocabulary vocabulary_from(const std::vector<TrainPair>& pairs, const TokenVocab& vocab,
                                         int min_frequency) {
  std::vector<std::vector<std::string>> captions;
  captions.reserve(pairs.size());
  for (const auto& p : pairs) captions.push_back(vocab.decode(p.caption));
  return build_vocabulary(captions, concept_lexicon(vocab), min_frequency);
}

/// Evaluation-side callbacks. The training path hands estimates out; it never
/// receives ground truth back except as a number for the metrics file.
struct RunHooks {
  std::function<std::optional<double>(const NoiseEstimates&)> noise_auc;
  std::function<void(const std::string&)> progress;
};

struct RunOptions {
  std::string out_dir;  // empty: nothing is written
  int last_stage = 3;   // stop after this stage
};

struct RunResult {
  ParamStore store;
  ParamStore captioner_store;
  ParamStore retrieval_store;  // frozen at the end of warmup
  NlipModel model;
  LossLedger ledger;
  NoiseEstimates warmup_estimates;  // first fit, right after the warmup epochs
  NoiseEstimates estimates;         // what stage 1 hands on
  ConceptVocabulary concept_vocab;
  ConceptTable concepts;
  CaptionMap captions;
  std::vector<TrainPair> completed;
  std::vector<bool> replaced;
  std::vector<MetricRow> metrics;
  std::vector<EpochStats> epochs;  // stage-1 then stage-3 epochs
  std::vector<double> caption_losses;
  double final_r1 = 0.0;
  nlohmann::json manifest;
};

namespace detail {

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
}

}  // namespace detail

/// The three-stage run: noisy-aware pre-training, captioning, and
/// conception-enhanced pre-training.
inline RunResult run_pipeline(const PipelineConfig& cfg, const CorpusHeader& header,
                              const std::vector<TrainPair>& train, const RunHooks& hooks = {},
                              const RunOptions& run = {}) {
  cfg.validate();
  if (train.empty()) throw ConfigError("training corpus is empty");
  if (cfg.E_e < 1) throw ConfigError("E_e must be >= 1: the noise model needs a warmup loss ledger");
  const auto say = [&](const std::string& s) {
    if (hooks.progress) hooks.progress(s);
  };
  namespace fs = std::filesystem;
  const bool write = !run.out_dir.empty();
  const fs::path dir(run.out_dir);
  const std::string config_text = config_to_text(cfg);

  RunResult R;
  R.manifest = {{"config_hash", hex64(fnv1a(config_text.data(), config_text.size()))},
                {"corpus_fingerprint", hex64(corpus_fingerprint(train))},
                {"seed", cfg.seed},
                {"config", "config.txt"},
                {"metrics", "metrics.csv"},
                {"status", "running"},
                {"last_good_checkpoint", nullptr},
                {"checkpoints", nlohmann::json::object()},
                {"stage_boundaries", nlohmann::json::object()}};
  std::ofstream metrics_out;
  const auto flush_manifest = [&] {
    if (write) detail::write_text(dir / "manifest.json", R.manifest.dump(2) + "\n");
  };
  if (write) {
    fs::create_directories(dir);
    detail::write_text(dir / "config.txt", config_text);
    metrics_out.open(dir / "metrics.csv", std::ios::binary | std::ios::trunc);
    if (!metrics_out) throw IoError("cannot write metrics.csv in " + run.out_dir);
    metrics_out << metrics_header() << '\n';
    flush_manifest();
  }
  const auto emit = [&](const MetricRow& row) {
    R.metrics.push_back(row);
    if (write) metrics_out << metrics_line(row) << '\n' << std::flush;
  };
  const auto checkpoint = [&](const std::string& key, const ParamStore& store, const AdamState* adam) {
    if (!write) return;
    const std::string name = key + ".ckpt";
    save_checkpoint((dir / name).string(), store, adam);
    R.manifest["checkpoints"][key] = name;
    R.manifest["last_good_checkpoint"] = name;
    flush_manifest();
  };

  try {
    R.model = build_model(R.store, cfg, header);
    const NlipModel& model = R.model;

    const auto eval_split = held_out_split(header, cfg.eval_size, kEvalFirstPairId);
    const int n_clean = std::max(2, static_cast<int>(std::lround(cfg.clean_fraction * static_cast<double>(train.size()))));
    const auto clean_split = strip_labels(held_out_split(header, n_clean, kCleanFirstPairId));

    R.concept_vocab = vocabulary_from(train, header.vocab, cfg.min_frequency);
    if (write) save_vocabulary(R.concept_vocab, (dir / "concepts.tsv").string());
    const ConceptQuery query{ConceptQuery{}.prompt, cfg.top_k};

    const AdamConfig adam_config{cfg.adam_beta1, cfg.adam_beta2, 1e-8, cfg.weight_decay};
    const std::int64_t spe = steps_per_epoch(train.size(), cfg.batch_size);
    ObjectiveOptions opt;
    opt.alpha = cfg.alpha;
    opt.beta = cfg.beta;
    opt.mask_ratio = cfg.mask_ratio;
    opt.span_lambda = cfg.span_lambda;
    opt.seed = cfg.seed;
    opt.threads = cfg.threads;
    int global_epoch = 0;

    // Stage 1: E_e warmup epochs of ITC, then E_t epochs of NITC with the
    // mixture refit from the previous epoch's ledger.
    say("stage 1: " + std::to_string(cfg.E_e) + " warmup + " + std::to_string(cfg.E_t) + " noise-adaptive epochs");
    const std::uint64_t stage1_start = R.store.step;
    const LrSchedule sched1 = stage1_schedule(cfg, spe);
    AdamState adam = AdamState::for_store(R.store);
    std::vector<std::int64_t> ids;
    for (const auto& p : train) ids.push_back(p.pair_id);
    NoiseEstimates current = NoiseEstimates::zeros(ids, cfg.lambda);
    bool fitted = false;
    const GmmOptions gmm{cfg.gmm_max_iters, cfg.gmm_tol};
    const auto w_of = [&](std::int64_t id) { return cfg.noise_adaptive ? current.w_of(id) : 0.0; };
    for (int e = 0; e < cfg.E_e + cfg.E_t; ++e) {
      const bool nitc = e >= cfg.E_e;
      opt.epoch = global_epoch;
      opt.noise_adaptive = nitc;
      LossLedger ledger;
      ledger.epoch = global_epoch;
      const EpochStats st = train_epoch(R.store, adam, model, train, w_of, nitc ? &R.concepts : nullptr, opt,
                                        sched1, stage1_start, adam_config, cfg.batch_size, &ledger);
      R.epochs.push_back(st);
      R.ledger = std::move(ledger);
      if (e == cfg.E_e - 1) {
        // every retrieval in the run uses this snapshot
        R.retrieval_store = R.store;
        R.concepts = retrieve_all(R.retrieval_store, model, R.concept_vocab, query, train);
        checkpoint("retrieval", R.retrieval_store, nullptr);
      }
      if (e >= cfg.E_e - 1) {
        current = refresh_epoch(R.ledger, cfg.lambda, gmm);
        if (!fitted) R.warmup_estimates = current;
        fitted = true;
      }
      MetricRow row{global_epoch + 1, 1, st.ir, st.lm, st.contrastive,
                    fitted ? current.epsilon.mean() : 0.0, mean_r1(R.store, model, eval_split), std::nullopt};
      if (fitted && hooks.noise_auc) row.noise_auc = hooks.noise_auc(current);
      emit(row);
      say("  epoch " + std::to_string(global_epoch + 1) + (nitc ? " nitc" : " itc") +
          " loss=" + format_fixed(st.contrastive, 4) + " R@1=" + format_fixed(row.retrieval_r1, 2) +
          (row.noise_auc ? " auc=" + format_fixed(*row.noise_auc, 4) : "") + " (" + format_fixed(st.seconds, 2) + "s)");
      ++global_epoch;
    }
    R.estimates = current;
    if (cfg.E_t == 0) R.estimates.w.setZero();  // no noise-adaptive epoch ran
    R.manifest["stage_boundaries"]["stage1_end_step"] = R.store.step;
    if (write) {
      LossLedger dump = R.ledger;
      write_noise_csv((dir / "noise.csv").string(), dump, R.estimates);
    }
    checkpoint("stage1", R.store, &adam);
    R.final_r1 = R.metrics.back().retrieval_r1;
    if (run.last_stage < 2) {
      R.manifest["status"] = "complete";
      flush_manifest();
      return R;
    }

    // Stage 2: fine-tune a copy as captioner on the clean split, then caption
    // every training pair.
    say("stage 2: captioner fine-tune on " + std::to_string(clean_split.size()) + " clean pairs");
    R.captioner_store = R.store;
    ConceptTable clean_concepts, train_concepts;
    if (cfg.concept_conditioning) {
      clean_concepts = retrieve_all(R.retrieval_store, model, R.concept_vocab, query, clean_split);
      train_concepts = R.concepts;
    }
    if (cfg.caption_epochs > 0) {
      const std::int64_t cspe = steps_per_epoch(clean_split.size(), cfg.batch_size);
      const LrSchedule csched{cfg.caption_lr, 0, cfg.caption_epochs * cspe, cfg.min_lr};
      AdamState cadam = AdamState::for_store(R.captioner_store);
      ObjectiveOptions copt = opt;
      copt.image_reconstruction = false;
      copt.contrastive = false;
      copt.language_model = true;
      copt.lm_sees_caption = false;
      copt.noise_adaptive = false;
      copt.mask_ratio = 0.0;
      copt.alpha = 1.0;
      const std::uint64_t cstart = R.captioner_store.step;
      for (int e = 0; e < cfg.caption_epochs; ++e) {
        copt.epoch = 100000 + e;
        const EpochStats st = train_epoch(R.captioner_store, cadam, model, clean_split, nullptr, &clean_concepts, copt,
                                          csched, cstart, adam_config, cfg.batch_size, nullptr);
        R.caption_losses.push_back(st.lm);
        say("  caption epoch " + std::to_string(e + 1) + " L_LM=" + format_fixed(st.lm, 4));
      }
    }
    checkpoint("captioner", R.captioner_store, nullptr);
    static const std::vector<int> kNone;
    for (const auto& p : train) {
      auto it = train_concepts.find(p.pair_id);
      R.captions[p.pair_id] =
          generate_caption(R.captioner_store, model.captioner(), p.patches, it == train_concepts.end() ? kNone : it->second,
                           DecodeStrategy::greedy, static_cast<std::size_t>(cfg.max_caption_len), p.pair_id, cfg.seed);
    }
    if (write) save_captions((dir / "captions.jsonl").string(), R.captions, header.vocab);
    if (run.last_stage < 3) {
      R.manifest["status"] = "complete";
      flush_manifest();
      return R;
    }

    // Stage 3: caption completion, then E_f epochs of the stage-1 objective
    // with plain ITC, a 10x smaller base rate and fresh optimizer moments.
    R.completed = cfg.completion
                      ? complete_corpus(train, R.estimates, R.captions, derive_seed(cfg.seed, "stage3"), &R.replaced)
                      : train;
    if (!cfg.completion) R.replaced.assign(train.size(), false);
    const std::uint64_t stage3_start = R.store.step;
    R.manifest["stage_boundaries"]["stage3_start_step"] = stage3_start;
    say("stage 3: " + std::to_string(cfg.E_f) + " epochs on the completed corpus");
    if (cfg.E_f > 0) {
      const LrSchedule sched3 = stage3_schedule(cfg, spe);
      AdamState adam3 = AdamState::for_store(R.store);
      opt.noise_adaptive = false;
      for (int e = 0; e < cfg.E_f; ++e) {
        opt.epoch = global_epoch;
        const EpochStats st = train_epoch(R.store, adam3, model, R.completed, nullptr, &R.concepts, opt, sched3,
                                          stage3_start, adam_config, cfg.batch_size, nullptr);
        R.epochs.push_back(st);
        MetricRow row{global_epoch + 1, 3, st.ir, st.lm, st.contrastive, R.estimates.epsilon.mean(),
                      mean_r1(R.store, model, eval_split), std::nullopt};
        emit(row);
        say("  epoch " + std::to_string(global_epoch + 1) + " itc loss=" + format_fixed(st.contrastive, 4) +
            " R@1=" + format_fixed(row.retrieval_r1, 2));
        ++global_epoch;
      }
      adam = std::move(adam3);
    }
    R.manifest["stage_boundaries"]["stage3_end_step"] = R.store.step;
    R.final_r1 = mean_r1(R.store, model, eval_split);
    checkpoint("final", R.store, &adam);
    R.manifest["final_retrieval_R1"] = format_fixed(R.final_r1, 2);
    R.manifest["status"] = "complete";
    flush_manifest();
    return R;
  } catch (...) {
    R.manifest["status"] = "failed";
    try {
      flush_manifest();
    } catch (...) {
    }
    throw;
  }
}

}  // namespace nlip
