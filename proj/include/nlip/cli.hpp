#pragma once

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "nlip/pipeline.hpp"

namespace nlip::cli {

enum ExitCode : int { kOk = 0, kUsage = 1, kDataError = 2, kRuntimeError = 3 };

inline int exit_code_for(const Error& e) {
  switch (e.kind()) {
    case Error::Kind::numerical:
    case Error::Kind::shape:
    case Error::Kind::contract: return kRuntimeError;
    default: return kDataError;
  }
}

namespace detail {

namespace fs = std::filesystem;

/// Ground-truth hook for metrics: reads flags from the labelled corpus. Only
/// the CLI wires this in; the pipeline sees a number.
inline RunHooks labelled_hooks(const std::vector<PairRecord>& records, std::ostream& err) {
  RunHooks h;
  h.progress = [&err](const std::string& s) { err << s << '\n'; };
  h.noise_auc = [&records](const NoiseEstimates& e) -> std::optional<double> {
    std::vector<double> scores;
    std::vector<bool> noisy;
    bool any_clean = false, any_noisy = false;
    for (const auto& r : records) {
      scores.push_back(e.epsilon_of(r.pair_id));
      noisy.push_back(r.noise_flag != NoiseFlag::clean);
      (noisy.back() ? any_noisy : any_clean) = true;
    }
    if (!any_clean || !any_noisy) return std::nullopt;
    return noise_auc(scores, noisy);
  };
  return h;
}

inline Corpus corpus_for(const PipelineConfig& cfg) {
  return cfg.corpus.empty() ? generate_config_corpus(cfg) : load_corpus(cfg.corpus);
}

struct LoadedRun {
  PipelineConfig cfg;
  Corpus corpus;
  ParamStore store;
  NlipModel model;
};

inline LoadedRun load_run(const std::string& run_dir, const std::string& checkpoint, const std::string& corpus_path) {
  LoadedRun r;
  r.cfg = load_config((fs::path(run_dir) / "config.txt").string());
  if (!corpus_path.empty()) r.cfg.corpus = corpus_path;
  r.corpus = corpus_for(r.cfg);
  r.model = build_model(r.store, r.cfg, r.corpus.header);
  load_checkpoint(checkpoint, r.store, nullptr);
  return r;
}

inline std::string pick(const std::string& given, const std::string& run_dir, const std::string& file) {
  return given.empty() ? (fs::path(run_dir) / file).string() : given;
}

inline std::vector<std::vector<std::string>> read_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path);
  std::vector<std::vector<std::string>> rows;
  std::string line;
  while (std::getline(in, line)) {
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    if (!line.empty() && line.back() == ',') cells.emplace_back();
    rows.push_back(std::move(cells));
  }
  return rows;
}

inline void write_file(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path);
  out << text;
}

}  // namespace detail

/// Entry point shared by the executable and the tests. Machine output goes to
/// files (or `out` where a subcommand says so); progress and diagnostics to `err`.
inline int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  namespace fs = std::filesystem;
  CLI::App app{"Noise-robust language-image pre-training lab", "nlip"};
  app.require_subcommand(1, 1);

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "generate a synthetic noisy corpus");
  PipelineConfig gcfg;
  std::string gen_out;
  gen->add_option("--n", gcfg.n, "number of pairs")->required();
  gen->add_option("--mismatch", gcfg.mismatch_rate, "fraction of mismatched captions");
  gen->add_option("--incomplete", gcfg.incomplete_rate, "fraction of incomplete captions");
  gen->add_option("--drop", gcfg.drop_fraction, "fraction of mentions dropped from an incomplete caption");
  gen->add_option("--concepts", gcfg.num_concepts, "number of concepts");
  gen->add_option("--d-img", gcfg.d_img, "patch feature dimension");
  gen->add_option("--patches", gcfg.patch_count, "patches per image");
  gen->add_option("--per-image", gcfg.concepts_per_image, "concepts per image");
  gen->add_option("--noise-std", gcfg.noise_std, "patch feature noise");
  auto* gen_seed = gen->add_option("--seed", gcfg.seed, "root seed");
  gen->add_option("--out", gen_out, "output corpus (JSONL)")->required();

  // train
  auto* train = app.add_subcommand("train", "run the three-stage pipeline");
  std::string config_path, train_out;
  std::map<std::string, std::string> overrides;
  std::map<std::string, CLI::Option*> override_opts;
  train->add_option("--config", config_path, "key = value config file");
  train->add_option("--out", train_out, "run directory")->required();
  for (const auto& key : config_keys()) override_opts[key] = train->add_option("--" + key, overrides[key], "config key");

  // diagnose-noise
  auto* diag = app.add_subcommand("diagnose-noise", "noise estimates of a checkpoint against ground truth");
  std::string diag_run, diag_ckpt, diag_corpus, diag_out;
  diag->add_option("--run", diag_run, "run directory")->required();
  diag->add_option("--checkpoint", diag_ckpt, "checkpoint (default: <run>/stage1.ckpt)");
  diag->add_option("--corpus", diag_corpus, "labelled corpus (default: the run's)");
  diag->add_option("--out", diag_out, "output CSV (default: <run>/noise_diagnosis.csv)");

  // caption
  auto* cap = app.add_subcommand("caption", "write the synthetic-caption sidecar for a corpus");
  std::string cap_run, cap_corpus, cap_out;
  cap->add_option("--run", cap_run, "run directory")->required();
  cap->add_option("--corpus", cap_corpus, "corpus to caption (default: the run's)");
  cap->add_option("--out", cap_out, "sidecar path (default: <run>/captions.cli.jsonl)");

  // evaluate
  auto* ev = app.add_subcommand("evaluate", "metric suite for a checkpoint");
  std::string ev_run, ev_ckpt, ev_corpus, ev_out;
  bool ev_json = false;
  ev->add_option("--run", ev_run, "run directory")->required();
  ev->add_option("--checkpoint", ev_ckpt, "checkpoint (default: <run>/final.ckpt)");
  ev->add_option("--corpus", ev_corpus, "labelled corpus (default: the run's)");
  ev->add_option("--out", ev_out, "metric CSV (default: <run>/eval.csv)");
  ev->add_flag("--json", ev_json, "print one JSON metrics object on stdout");

  // report
  auto* rep = app.add_subcommand("report", "compare runs side by side");
  std::vector<std::string> rep_runs;
  std::string rep_out;
  rep->add_option("--run", rep_runs, "label=run_dir, repeatable")->required();
  rep->add_option("--out", rep_out, "output CSV (default: stdout)");

  std::vector<std::string> argv_rev(args.rbegin(), args.rend());
  try {
    app.parse(argv_rev);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << '\n' << app.help();
    return kUsage;
  }

  try {
    if (*gen) {
      if (!*gen_seed)
        if (const char* env = std::getenv("NLIP_SEED")) set_config_value(gcfg, "seed", env);
      gcfg.corpus.clear();
      const Corpus c = generate_config_corpus(gcfg);
      save_corpus(c, gen_out);
      std::size_t counts[3] = {0, 0, 0};
      for (const auto& r : c.records) ++counts[static_cast<int>(r.noise_flag)];
      err << "wrote " << c.records.size() << " pairs (" << counts[1] << " mismatched, " << counts[2]
          << " incomplete) to " << gen_out << '\n';
      return kOk;
    }

    if (*train) {
      PipelineConfig cfg = config_path.empty() ? PipelineConfig{} : load_config(config_path);
      if (const char* env = std::getenv("NLIP_SEED")) set_config_value(cfg, "seed", env);
      for (const auto& [key, opt] : override_opts)
        if (opt->count()) set_config_value(cfg, key, overrides[key]);
      if (!cfg.corpus.empty()) cfg.corpus = fs::absolute(cfg.corpus).lexically_normal().string();
      cfg.validate();
      const Corpus corpus = detail::corpus_for(cfg);
      const RunHooks hooks = detail::labelled_hooks(corpus.records, err);
      const RunResult r = run_pipeline(cfg, corpus.header, strip_labels(corpus.records), hooks, {train_out, 3});
      err << "final retrieval R@1 " << format_fixed(r.final_r1, 2) << "; run written to " << train_out << '\n';
      return kOk;
    }

    if (*diag) {
      auto run = detail::load_run(diag_run, detail::pick(diag_ckpt, diag_run, "stage1.ckpt"), diag_corpus);
      const auto pairs = strip_labels(run.corpus.records);
      ObjectiveOptions opt;
      opt.mask_ratio = run.cfg.mask_ratio;
      opt.span_lambda = run.cfg.span_lambda;
      opt.seed = run.cfg.seed;
      opt.threads = run.cfg.threads;
      const LossLedger ledger = evaluate_ledger(run.store, run.model, pairs, opt, run.cfg.batch_size);
      const NoiseEstimates est = refresh_epoch(ledger, run.cfg.lambda, {run.cfg.gmm_max_iters, run.cfg.gmm_tol});
      std::unordered_map<std::int64_t, std::string> flags;
      for (const auto& r : run.corpus.records) flags[r.pair_id] = to_string(r.noise_flag);
      const std::string path = detail::pick(diag_out, diag_run, "noise_diagnosis.csv");
      write_noise_csv(path, ledger, est, &flags);
      const auto auc = detail::labelled_hooks(run.corpus.records, err).noise_auc(est);
      nlohmann::json summary = {{"csv", path}, {"mean_epsilon", est.epsilon.mean()}, {"unimodal", est.fit.unimodal}};
      summary["noise_auc"] = auc ? nlohmann::json(*auc) : nlohmann::json(nullptr);
      out << summary.dump() << '\n';
      return kOk;
    }

    if (*cap) {
      auto run = detail::load_run(cap_run, (fs::path(cap_run) / "stage1.ckpt").string(), cap_corpus);
      ParamStore captioner = run.store;
      load_checkpoint((fs::path(cap_run) / "captioner.ckpt").string(), captioner, nullptr);
      const auto pairs = strip_labels(run.corpus.records);
      ConceptTable concepts;
      if (run.cfg.concept_conditioning) {
        const ConceptVocabulary vocab = load_vocabulary((fs::path(cap_run) / "concepts.tsv").string(),
                                                        run.cfg.min_frequency);
        ParamStore snapshot = run.store;
        load_checkpoint((fs::path(cap_run) / "retrieval.ckpt").string(), snapshot, nullptr);
        concepts = retrieve_all(snapshot, run.model, vocab, ConceptQuery{ConceptQuery{}.prompt, run.cfg.top_k}, pairs);
      }
      CaptionMap captions;
      for (const auto& p : pairs)
        captions[p.pair_id] = generate_caption(captioner, run.model.captioner(), p.patches, concepts[p.pair_id],
                                               DecodeStrategy::greedy, static_cast<std::size_t>(run.cfg.max_caption_len),
                                               p.pair_id, run.cfg.seed);
      const std::string path = detail::pick(cap_out, cap_run, "captions.cli.jsonl");
      save_captions(path, captions, run.corpus.header.vocab);
      err << "wrote " << captions.size() << " captions to " << path << '\n';
      return kOk;
    }

    if (*ev) {
      auto run = detail::load_run(ev_run, detail::pick(ev_ckpt, ev_run, "final.ckpt"), ev_corpus);
      const auto& header = run.corpus.header;
      MetricReport report;
      report.tags["run"] = ev_run;
      report.tags["checkpoint"] = detail::pick(ev_ckpt, ev_run, "final.ckpt");

      const auto eval_split = held_out_split(header, run.cfg.eval_size, kEvalFirstPairId);
      auto [img, txt] = embed_pairs(run.store, run.model, eval_split);
      const RecallAtK rk = retrieval_recall(img, txt, {1, 5, 10});
      for (int k : {1, 5, 10}) {
        report.metrics["i2t_R" + std::to_string(k)] = rk.image_to_text.at(k);
        report.metrics["t2i_R" + std::to_string(k)] = rk.text_to_image.at(k);
      }
      report.metrics["retrieval_R1"] = rk.mean(1);

      // single-concept images, one class per concept
      CorpusHeader single = header;
      single.concepts_per_image = 1;
      const auto zs = held_out_split(single, run.cfg.eval_size, 3'000'000);
      std::vector<std::string> classes(header.vocab.tokens().begin() + header.vocab.first_concept(),
                                       header.vocab.tokens().end());
      const Matrix class_embs = class_prompt_embeddings(run.store, run.model, classes);
      int correct = 0;
      for (const auto& r : zs)
        if (zero_shot_classify(run.model.embed_image(run.store, r.patches).global, class_embs) == r.true_concepts[0])
          ++correct;
      report.metrics["zero_shot_accuracy"] = static_cast<double>(correct) / static_cast<double>(zs.size());

      std::map<std::int64_t, const PairRecord*> by_id;
      for (const auto& r : run.corpus.records) by_id[r.pair_id] = &r;
      if (fs::exists(fs::path(ev_run) / "noise.csv")) {
        const auto rows = detail::read_csv((fs::path(ev_run) / "noise.csv").string());
        std::vector<double> eps;
        std::vector<bool> noisy;
        bool seen[2] = {false, false};
        for (std::size_t i = 1; i < rows.size(); ++i) {
          auto it = by_id.find(std::stoll(rows[i].at(0)));
          if (it == by_id.end()) continue;
          // strtod, not stod: tiny posteriors come back as subnormals
          eps.push_back(std::strtod(rows[i].at(2).c_str(), nullptr));
          noisy.push_back(it->second->noise_flag != NoiseFlag::clean);
          seen[noisy.back() ? 1 : 0] = true;
        }
        if (seen[0] && seen[1]) report.metrics["noise_auc"] = noise_auc(eps, noisy);
      }
      if (fs::exists(fs::path(ev_run) / "captions.jsonl")) {
        const CaptionMap caps = load_captions((fs::path(ev_run) / "captions.jsonl").string(), header.vocab);
        std::vector<TokenSeq> generated, original;
        std::vector<std::vector<int>> truth;
        for (const auto& r : run.corpus.records) {
          auto it = caps.find(r.pair_id);
          if (it == caps.end()) continue;
          generated.push_back(it->second.tokens);
          original.push_back(r.caption);
          truth.push_back(r.true_concepts);
        }
        if (!generated.empty()) {
          report.metrics["caption_concept_recall"] = concept_recall(generated, truth, header.vocab).recall;
          report.metrics["original_concept_recall"] = concept_recall(original, truth, header.vocab).recall;
        }
      }

      std::string csv = "metric,value\n";
      for (const auto& [k, v] : report.metrics) csv += k + "," + format_fixed(v, 6) + "\n";
      detail::write_file(detail::pick(ev_out, ev_run, "eval.csv"), csv);
      if (ev_json) out << report.to_json().dump() << '\n';
      err << "retrieval R@1 " << format_fixed(report.metrics["retrieval_R1"], 2) << ", zero-shot accuracy "
          << format_fixed(report.metrics["zero_shot_accuracy"], 4) << '\n';
      return kOk;
    }

    if (*rep) {
      std::string table = "label,epochs,final_stage,retrieval_R1,mean_epsilon,noise_auc\n";
      for (const auto& spec : rep_runs) {
        const auto eq = spec.find('=');
        if (eq == std::string::npos || eq == 0) throw ConfigError("--run expects label=run_dir, got '" + spec + "'");
        const auto rows = detail::read_csv((fs::path(spec.substr(eq + 1)) / "metrics.csv").string());
        if (rows.size() < 2) throw ConfigError("no epochs in " + spec.substr(eq + 1));
        const auto& last = rows.back();
        std::string auc;
        for (std::size_t i = 1; i < rows.size(); ++i)
          if (rows[i].size() > 7 && !rows[i][7].empty()) auc = rows[i][7];
        table += spec.substr(0, eq) + "," + last.at(0) + "," + last.at(1) + "," + last.at(6) + "," + last.at(5) +
                 "," + auc + "\n";
      }
      if (rep_out.empty()) out << table;
      else detail::write_file(rep_out, table);
      return kOk;
    }
  } catch (const Error& e) {
    err << "error: " << e.what() << '\n';
    return exit_code_for(e);
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kRuntimeError;
  }
  return kUsage;
}

inline int run_cli(int argc, char** argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return run_cli(args, out, err);
}

}  // namespace nlip::cli
