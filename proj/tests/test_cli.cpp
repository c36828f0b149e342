#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "bridge/checkpoint.hpp"
#include "bridge/dataset.hpp"
#include "bridge/eval.hpp"
#include "bridge/runconfig.hpp"

namespace fs = std::filesystem;
using namespace bridge;

namespace {

const std::string kSmall =
    " --set synth_users=30 synth_items=40 synth_bundles=15 synth_categories=3"
    " d_model=8 embedding_dim=8 heads=1 max_len=16 batch_size=8";

struct Invocation {
  int code = -1;
  std::string out, err;
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

class Cli : public ::testing::Test {
 protected:
  fs::path dir;

  void SetUp() override {
    dir = fs::temp_directory_path() /
          (std::string("bridge_cli_") + ::testing::UnitTest::GetInstance()->current_test_info()->name());
    fs::remove_all(dir);
    fs::create_directories(dir);
  }
  void TearDown() override { fs::remove_all(dir); }

  Invocation run(const std::string& args) const {
    const std::string cmd = std::string("cd '") + dir.string() + "' && '" + BRIDGE_CLI_PATH + "' " + args +
                            " > stdout.txt 2> stderr.txt";
    const int status = std::system(cmd.c_str());
    return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, slurp(dir / "stdout.txt"), slurp(dir / "stderr.txt")};
  }

  // Small synthetic dataset in <dir>/data.
  void synth() const { ASSERT_EQ(run("synth --out data" + kSmall).code, 0); }

  RunConfig small_config(const std::string& extra = "") const {
    RunConfig rc;
    KeyValues kvs;
    std::istringstream in(kSmall.substr(kSmall.find("--set") + 5) + " " + extra);
    std::string kv;
    while (in >> kv) kvs.push_back(split_assignment(kv));
    rc.apply(kvs);
    return rc;
  }
};

}  // namespace

TEST_F(Cli, SynthIsByteIdenticalForAFixedSeed) {
  ASSERT_EQ(run("synth --out a" + kSmall).code, 0);
  ASSERT_EQ(run("synth --out b" + kSmall).code, 0);
  ASSERT_EQ(run("synth --seed 8 --out c" + kSmall).code, 0);
  for (const char* f : {"user_bundle.txt", "bundle_item.txt", "user_item.txt", "data_size.txt", "stats.json"})
    EXPECT_EQ(slurp(dir / "a" / f), slurp(dir / "b" / f)) << f;
  EXPECT_NE(slurp(dir / "a" / "user_bundle.txt"), slurp(dir / "c" / "user_bundle.txt"));
}

TEST_F(Cli, SynthStatsMatchStatsCommand) {
  synth();
  const Invocation r = run("stats --data data");
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(r.out, slurp(dir / "data" / "stats.json"));
  EXPECT_NE(r.out.find("\"num_items\": 40"), std::string::npos);
}

TEST_F(Cli, UnknownConfigKeyIsNamed) {
  Invocation r = run("synth --out x --set nonsense_key=3");
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("nonsense_key"), std::string::npos) << r.err;
  std::ofstream(dir / "bad.cfg") << "# comment\nepochs = 3\nlearning_rat = 0.1\n";
  r = run("synth --out x --config bad.cfg");
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("learning_rat"), std::string::npos) << r.err;
  std::ofstream(dir / "malformed.cfg") << "epochs 3\n";
  r = run("synth --out x --config malformed.cfg");
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find(":1:"), std::string::npos) << r.err;
  EXPECT_EQ(run("synth --out x --set alpha=2").code, 2);
}

TEST_F(Cli, UsageErrorsExitTwo) {
  EXPECT_EQ(run("").code, 2);
  EXPECT_EQ(run("frobnicate").code, 2);
  EXPECT_EQ(run("train --data missing --out r").code, 2);
  EXPECT_EQ(run("train --out r").code, 2);
  EXPECT_EQ(run("--help").code, 0);
}

TEST_F(Cli, ZeroEpochsWritesTheInitialState) {
  synth();
  ASSERT_EQ(run("train --data data --out r --seed 3 --set epochs=0" + kSmall).code, 0);
  const auto ds = load_dir(dir / "data");
  RunConfig rc = small_config("epochs=0 seed=3");
  const TrainState want = init_state(split(ds, rc.ratios(), 3), rc.train);
  EXPECT_EQ(slurp(dir / "r" / "checkpoint.bin"), serialize_checkpoint(want));
  EXPECT_EQ(slurp(dir / "r" / "loss.csv"), "epoch,L_C,L_G,L_R,total\n");
}

TEST_F(Cli, ConfigFileIsOverriddenBySetAndFlags) {
  synth();
  std::ofstream(dir / "run.cfg") << "epochs = 9\nseed = 1\nout_dir = elsewhere\n";
  ASSERT_EQ(run("train --config run.cfg --data data --out r --seed 3 --set epochs=0" + kSmall).code, 0);
  const std::string cfg = slurp(dir / "r" / "config.txt");
  EXPECT_NE(cfg.find("epochs=0\n"), std::string::npos);
  EXPECT_NE(cfg.find("seed=3\n"), std::string::npos);
  EXPECT_NE(cfg.find("out_dir=r\n"), std::string::npos);
  EXPECT_FALSE(fs::exists(dir / "elsewhere"));
}

TEST_F(Cli, TrainingIsDeterministicAndResumable) {
  synth();
  ASSERT_EQ(run("train --data data --out full --set epochs=4" + kSmall).code, 0);
  ASSERT_EQ(run("train --data data --out again --set epochs=4" + kSmall).code, 0);
  EXPECT_EQ(slurp(dir / "full" / "checkpoint.bin"), slurp(dir / "again" / "checkpoint.bin"));
  ASSERT_EQ(run("train --data data --out part --set epochs=2" + kSmall).code, 0);
  const Invocation r = run("train --data data --out part --resume --set epochs=4" + kSmall);
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(slurp(dir / "full" / "checkpoint.bin"), slurp(dir / "part" / "checkpoint.bin"));
  EXPECT_EQ(slurp(dir / "full" / "loss.csv"), slurp(dir / "part" / "loss.csv"));
}

TEST_F(Cli, EvaluateReproducesInProcessMetrics) {
  synth();
  ASSERT_EQ(run("train --data data --out r --seed 2 --set epochs=2" + kSmall).code, 0);
  ASSERT_EQ(run("train --data data --out r5 --seed 5 --set epochs=2" + kSmall).code, 0);
  const Invocation r = run("evaluate --data data --checkpoint r/checkpoint.bin --checkpoint r5/checkpoint.bin --out e");
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.out.find("R@1"), std::string::npos);

  const auto ds = load_dir(dir / "data");
  std::vector<std::uint64_t> seeds;
  std::vector<EvalResult> results;
  for (const char* sub : {"r", "r5"}) {
    const TrainState s = load_checkpoint(dir / sub / "checkpoint.bin");
    results.push_back(evaluate_test(best_model(s), split(ds, {}, s.cfg.seed), EvalOptions{}));
    seeds.push_back(s.cfg.seed);
  }
  std::ostringstream csv;
  write_csv(aggregate(seeds, results), csv);
  EXPECT_EQ(slurp(dir / "e" / "report.csv"), csv.str());
  EXPECT_EQ(csv.str().substr(0, csv.str().find('\n')), "seed,users,R@1,R@2,N@1,N@2");
}

TEST_F(Cli, CorruptCheckpointFailsCleanly) {
  synth();
  ASSERT_EQ(run("train --data data --out r --set epochs=0" + kSmall).code, 0);
  const std::string bytes = slurp(dir / "r" / "checkpoint.bin");
  std::ofstream(dir / "cut.bin", std::ios::binary) << bytes.substr(0, bytes.size() / 3);
  Invocation r = run("evaluate --data data --checkpoint cut.bin --out e");
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("truncated"), std::string::npos) << r.err;
  std::ofstream(dir / "junk.bin", std::ios::binary) << "not a checkpoint at all";
  r = run("evaluate --data data --checkpoint junk.bin --out e");
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("magic"), std::string::npos) << r.err;
  EXPECT_FALSE(fs::exists(dir / "e" / "report.csv"));
}

TEST_F(Cli, RecommendOutputParsesBackAndIsDeterministic) {
  synth();
  ASSERT_EQ(run("train --data data --out r --set epochs=2" + kSmall).code, 0);
  const Invocation a = run("recommend --data data --checkpoint r/checkpoint.bin --users 0,4,7 --top-k 4 --out rec");
  ASSERT_EQ(a.code, 0) << a.err;
  const Invocation b = run("recommend --data data --checkpoint r/checkpoint.bin --users 0,4,7 --top-k 4 --out rec");
  EXPECT_EQ(a.out, b.out);
  EXPECT_EQ(a.out, slurp(dir / "rec" / "recommendations.txt"));

  const auto ds = load_dir(dir / "data");
  const TrainState s = load_checkpoint(dir / "r" / "checkpoint.bin");
  const auto sp = split(ds, {}, s.cfg.seed);
  const BridgeModel m = best_model(s);
  const BundleCatalog catalog(sp.train.Y, m.index().r_hat());
  std::istringstream lines(a.out);
  std::string line;
  std::size_t n = 0;
  while (std::getline(lines, line)) {
    std::istringstream in(line);
    Id u = 0;
    in >> u;
    const IdSet h = user_history(sp.train, u);
    const auto want = rank_topk(make_query(generate(m.generator(), h).items, m.index().r_hat(), h), catalog,
                                s.cfg.alpha, 4, sp.train.X.row(u));
    std::string tok;
    std::size_t r = 0;
    while (in >> tok) {
      const auto colon = tok.find(':');
      ASSERT_NE(colon, std::string::npos);
      ASSERT_LT(r, want.size());
      EXPECT_EQ(static_cast<Id>(std::stoul(tok.substr(0, colon))), want[r].bundle);
      EXPECT_NEAR(std::stod(tok.substr(colon + 1)), want[r].score, 5e-7);
      ++r;
    }
    EXPECT_EQ(r, want.size());
    ++n;
  }
  EXPECT_EQ(n, 3u);

  const Invocation bad = run("recommend --data data --checkpoint r/checkpoint.bin --users 0,999 --out rec");
  EXPECT_EQ(bad.code, 2);
  EXPECT_NE(bad.err.find("999"), std::string::npos) << bad.err;
}

TEST_F(Cli, ExportedEmbeddingsAreUnitRowsAndReimportExactly) {
  synth();
  ASSERT_EQ(run("train --data data --out r --set epochs=1" + kSmall).code, 0);
  ASSERT_EQ(run("export-embeddings --checkpoint r/checkpoint.bin --out x").code, 0);
  const BridgeModel m = best_model(load_checkpoint(dir / "r" / "checkpoint.bin"));
  const Matrix& want = m.index().r_hat();
  std::ifstream in(dir / "x" / "embeddings.txt");
  std::string line;
  std::size_t rows = 0;
  while (std::getline(in, line)) {
    std::istringstream ls(line);
    std::size_t item = 0;
    ls >> item;
    ASSERT_EQ(item, rows);
    double norm = 0.0, v = 0.0;
    std::size_t c = 0;
    while (ls >> v) {
      ASSERT_LT(c, want.cols);
      EXPECT_EQ(v, want(item, c));
      norm += v * v;
      ++c;
    }
    EXPECT_EQ(c, want.cols);
    EXPECT_NEAR(std::sqrt(norm), 1.0, 1e-9);
    ++rows;
  }
  EXPECT_EQ(rows, 40u);
}

TEST_F(Cli, SplitCommandFeedsTraining) {
  synth();
  ASSERT_EQ(run("split --data data --out s --seed 4").code, 0);
  const auto ds = load_dir(dir / "data");
  const auto loaded = load_split(ds, dir / "s");
  const auto direct = split(ds, {}, 4);
  EXPECT_EQ(loaded.train.X, direct.train.X);
  EXPECT_EQ(loaded.test, direct.test);
  EXPECT_EQ(run("train --data data --split s --out r --set epochs=1" + kSmall).code, 0);
  EXPECT_EQ(run("train --data data --split nowhere --out r --set epochs=1" + kSmall).code, 2);
}
