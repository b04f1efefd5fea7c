#include "support.hpp"

#include <cstdlib>
#include <sstream>

#include "nlip/cli.hpp"

using namespace nlip;

namespace {

struct Result {
  int code;
  std::string out;
  std::string err;
};

Result invoke(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = nlip::cli::run_cli(args, out, err);
  return {code, out.str(), err.str()};
}

const char* kTinyConfig =
    "# small enough for a unit test\n"
    "n = 48\n"
    "patch_count = 8\n"
    "d_img = 8\n"
    "width = 12\n"
    "d_embed = 12\n"
    "d_dec = 8\n"
    "blocks = 1\n"
    "batch_size = 16\n"
    "eval_size = 16\n"
    "E_e = 1\nE_t = 1\nE_f = 1\n"
    "caption_epochs = 1\n"
    "min_frequency = 1\n"
    "clean_fraction = 0.1\n"
    "max_caption_len = 10\n";

struct SeedEnv {
  explicit SeedEnv(const char* v) { ::setenv("NLIP_SEED", v, 1); }
  ~SeedEnv() { ::unsetenv("NLIP_SEED"); }
};

}  // namespace

TEST(Cli, GenDataWritesTheRequestedNoise) {
  nlip::test::TempDir dir("gen");
  const auto r = invoke({"gen-data", "--n", "2000", "--mismatch", "0.4", "--incomplete", "0.0", "--seed", "1", "--out",
                      dir.file("c.jsonl")});
  ASSERT_EQ(r.code, 0) << r.err;
  const Corpus c = load_corpus(dir.file("c.jsonl"));
  ASSERT_EQ(c.records.size(), 2000u);
  std::size_t mismatched = 0;
  for (const auto& rec : c.records) mismatched += rec.noise_flag == NoiseFlag::mismatched ? 1 : 0;
  EXPECT_EQ(mismatched, 800u);
  EXPECT_TRUE(r.out.empty());
}

TEST(Cli, UsageErrorsExitOne) {
  auto r = invoke({"gen-data", "--n", "10", "--out", "x.jsonl", "--bogus"});
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("Usage"), std::string::npos);
  EXPECT_EQ(invoke({}).code, 1);
  EXPECT_EQ(invoke({"frobnicate"}).code, 1);
  EXPECT_EQ(invoke({"train"}).code, 1);  // --out is required
  EXPECT_EQ(invoke({"--help"}).code, 0);
}

TEST(Cli, DataAndConfigErrorsExitTwo) {
  nlip::test::TempDir dir("bad");
  std::ofstream(dir.file("bad.cfg")) << "n = 10\nnot a pair\n";
  auto r = invoke({"train", "--config", dir.file("bad.cfg"), "--out", dir.file("run")});
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("line 2"), std::string::npos) << r.err;
  EXPECT_EQ(std::count(r.err.begin(), r.err.end(), '\n'), 1);

  std::ofstream(dir.file("unknown.cfg")) << "no_such_key = 1\n";
  EXPECT_EQ(invoke({"train", "--config", dir.file("unknown.cfg"), "--out", dir.file("run")}).code, 2);
  EXPECT_EQ(invoke({"train", "--config", dir.file("missing.cfg"), "--out", dir.file("run")}).code, 2);
  EXPECT_EQ(invoke({"train", "--E_e", "0", "--n", "8", "--out", dir.file("run")}).code, 2);
  EXPECT_EQ(invoke({"gen-data", "--n", "10", "--mismatch", "0.8", "--incomplete", "0.5", "--out", dir.file("c")}).code, 2);
}

TEST(Cli, TrainTwiceIsByteIdenticalAndDownstreamCommandsWork) {
  nlip::test::TempDir dir("train");
  std::ofstream(dir.file("tiny.cfg")) << kTinyConfig;
  auto a = invoke({"train", "--config", dir.file("tiny.cfg"), "--out", dir.file("a")});
  ASSERT_EQ(a.code, 0) << a.err;
  auto b = invoke({"train", "--config", dir.file("tiny.cfg"), "--out", dir.file("b")});
  ASSERT_EQ(b.code, 0) << b.err;
  for (const char* f : {"metrics.csv", "retrieval.ckpt", "stage1.ckpt", "captioner.ckpt", "final.ckpt", "noise.csv",
                        "captions.jsonl", "config.txt", "manifest.json"})
    EXPECT_EQ(nlip::test::read_file(dir.file(std::string("a/") + f)),
              nlip::test::read_file(dir.file(std::string("b/") + f)))
        << f;
  EXPECT_TRUE(a.out.empty());

  auto d = invoke({"diagnose-noise", "--run", dir.file("a")});
  ASSERT_EQ(d.code, 0) << d.err;
  const auto summary = nlohmann::json::parse(d.out);
  EXPECT_TRUE(summary["noise_auc"].is_number());
  const std::string diag = nlip::test::read_file(dir.file("a/noise_diagnosis.csv"));
  EXPECT_NE(diag.find("mismatched"), std::string::npos);

  auto c = invoke({"caption", "--run", dir.file("a")});
  ASSERT_EQ(c.code, 0) << c.err;
  // the CLI regenerates the same sidecar the run wrote
  EXPECT_EQ(nlip::test::read_file(dir.file("a/captions.cli.jsonl")), nlip::test::read_file(dir.file("a/captions.jsonl")));

  auto e = invoke({"evaluate", "--run", dir.file("a"), "--json"});
  ASSERT_EQ(e.code, 0) << e.err;
  const auto metrics = nlohmann::json::parse(e.out);
  for (const char* k : {"retrieval_R1", "i2t_R10", "t2i_R5", "zero_shot_accuracy", "noise_auc", "caption_concept_recall"})
    EXPECT_TRUE(metrics.contains(k)) << k;
  EXPECT_GE(metrics["retrieval_R1"].get<double>(), 0.0);
  EXPECT_LE(metrics["retrieval_R1"].get<double>(), 100.0);
  EXPECT_GE(metrics["noise_auc"].get<double>(), 0.0);
  EXPECT_LE(metrics["noise_auc"].get<double>(), 1.0);

  auto rep = invoke({"report", "--run", "itc=" + dir.file("a"), "--run", "nitc=" + dir.file("b")});
  ASSERT_EQ(rep.code, 0) << rep.err;
  EXPECT_EQ(rep.out.substr(0, rep.out.find('\n')), "label,epochs,final_stage,retrieval_R1,mean_epsilon,noise_auc");
  EXPECT_EQ(std::count(rep.out.begin(), rep.out.end(), '\n'), 3);
  EXPECT_EQ(invoke({"report", "--run", "no-label"}).code, 2);
  EXPECT_EQ(invoke({"report", "--run", "x=" + dir.file("missing")}).code, 2);
}

TEST(Cli, FlagsOverrideTheConfigFile) {
  nlip::test::TempDir dir("override");
  std::ofstream(dir.file("tiny.cfg")) << kTinyConfig;
  auto r = invoke({"train", "--config", dir.file("tiny.cfg"), "--E_f", "2", "--out", dir.file("run")});
  ASSERT_EQ(r.code, 0) << r.err;
  const PipelineConfig written = load_config(dir.file("run/config.txt"));
  EXPECT_EQ(written.E_f, 2);
  EXPECT_EQ(written.n, 48);
  EXPECT_EQ(load_config(dir.file("run/config.txt")).seed, 1u);
}

TEST(Cli, SeedPrecedenceIsConfigThenEnvironmentThenFlag) {
  nlip::test::TempDir dir("seed");
  std::ofstream(dir.file("tiny.cfg")) << kTinyConfig << "seed = 5\n";
  const auto seed_of = [&](const std::string& run) { return load_config(dir.file(run + "/config.txt")).seed; };
  ASSERT_EQ(invoke({"train", "--config", dir.file("tiny.cfg"), "--E_f", "0", "--out", dir.file("cfg")}).code, 0);
  EXPECT_EQ(seed_of("cfg"), 5u);
  {
    SeedEnv env("7");
    ASSERT_EQ(invoke({"train", "--config", dir.file("tiny.cfg"), "--E_f", "0", "--out", dir.file("env")}).code, 0);
    ASSERT_EQ(
        invoke({"train", "--config", dir.file("tiny.cfg"), "--E_f", "0", "--seed", "9", "--out", dir.file("flag")}).code,
        0);
    ASSERT_EQ(invoke({"gen-data", "--n", "20", "--out", dir.file("g_env.jsonl")}).code, 0);
    ASSERT_EQ(invoke({"gen-data", "--n", "20", "--seed", "3", "--out", dir.file("g_flag.jsonl")}).code, 0);
  }
  EXPECT_EQ(seed_of("env"), 7u);
  EXPECT_EQ(seed_of("flag"), 9u);
  EXPECT_EQ(load_corpus(dir.file("g_env.jsonl")).header.world_seed, 7u);
  EXPECT_EQ(load_corpus(dir.file("g_flag.jsonl")).header.world_seed, 3u);
  {
    SeedEnv env("not-a-number");
    EXPECT_EQ(invoke({"train", "--config", dir.file("tiny.cfg"), "--out", dir.file("bad")}).code, 2);
  }
}

TEST(Cli, TrainsFromAGeneratedCorpusFile) {
  nlip::test::TempDir dir("corpus");
  ASSERT_EQ(invoke({"gen-data", "--n", "40", "--d-img", "8", "--patches", "8", "--seed", "4", "--out",
                 dir.file("c.jsonl")})
                .code,
            0);
  std::ofstream(dir.file("tiny.cfg")) << kTinyConfig << "corpus = " << dir.file("c.jsonl") << "\n";
  auto r = invoke({"train", "--config", dir.file("tiny.cfg"), "--out", dir.file("run")});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto manifest = nlohmann::json::parse(nlip::test::read_file(dir.file("run/manifest.json")));
  EXPECT_EQ(manifest["status"], "complete");
  std::ofstream(dir.file("broken.jsonl")) << "{\"not\": \"a corpus\"}\n";
  std::ofstream(dir.file("broken.cfg")) << kTinyConfig << "corpus = " << dir.file("broken.jsonl") << "\n";
  EXPECT_EQ(invoke({"train", "--config", dir.file("broken.cfg"), "--out", dir.file("run2")}).code, 2);
}
