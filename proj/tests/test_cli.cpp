#include <doctest.h>

#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "condigsum/cli.hpp"
#include "condigsum/corpus.hpp"
#include "helpers.hpp"

using namespace condigsum;

namespace {

struct Run {
  int code;
  std::string out;
  std::string err;
};

Run cli(std::vector<std::string> args) {
  args.insert(args.begin(), "condigsum");
  std::ostringstream out, err;
  const int code = run_cli(args, out, err);
  return {code, out.str(), err.str()};
}

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

// Tiny model so CLI runs finish quickly.
void write_small_config(const std::string& path) {
  std::ofstream(path) << R"({"epochs": 1, "max_tokens_per_batch": 400,
    "model_config": {"d_model": 8, "n_heads": 2, "ffn_dim": 12,
                     "n_encoder_layers": 1, "n_decoder_layers": 1}})";
}

}  // namespace

TEST_CASE("usage and argument errors") {
  const auto none = cli({});
  CHECK(none.code == 2);
  CHECK((none.out + none.err).find("synth-data") != std::string::npos);
  CHECK(cli({"bogus"}).code != 0);
  CHECK(cli({"train", "--corpus"}).code != 0);
  CHECK(cli({"train", "--nope"}).code != 0);
  CHECK(cli({"--help"}).code == 0);
}

TEST_CASE("pipeline") {
  testutil::TempDir dir;
  const std::string corpus = dir / "corpus.jsonl";
  const std::string cfg = dir / "cfg.json";
  write_small_config(cfg);

  REQUIRE(cli({"synth-data", "--out", corpus, "--n", "10", "--seed", "3"}).code == 0);
  const auto loaded = load_corpus(corpus);
  CHECK(loaded.size() == 10);
  REQUIRE(cli({"synth-data", "--out", dir / "again.jsonl", "--n", "10", "--seed", "3"}).code == 0);
  CHECK(slurp(corpus) == slurp(dir / "again.jsonl"));

  SUBCASE("prepare-pairs") {
    REQUIRE(cli({"prepare-pairs", "--config", cfg, "--corpus", corpus, "--out", dir / "pairs.jsonl"}).code == 0);
    std::ifstream in(dir / "pairs.jsonl");
    std::string line;
    std::size_t co = 0, su = 0;
    while (std::getline(in, line)) {
      const auto j = nlohmann::json::parse(line);
      (j["kind"] == "coherence" ? co : su) += 1;
    }
    CHECK(co > 0);
    CHECK(su > 0);
  }

  SUBCASE("train, evaluate, diagnose") {
    const std::string out = dir / "run";
    const auto r = cli({"train", "--config", cfg, "--corpus", corpus, "--valid", corpus, "--out", out, "--seed", "4"});
    INFO(r.err);
    REQUIRE(r.code == 0);
    CHECK(std::filesystem::exists(out + "/model.bin"));
    CHECK(std::filesystem::exists(out + "/checkpoint-epoch001.bin"));
    CHECK(nlohmann::json::parse(slurp(out + "/config.json"))["seed"] == 4);

    REQUIRE(cli({"evaluate", "--checkpoint", out + "/model.bin", "--corpus", corpus, "--out", dir / "eval.json",
                 "--beam", "2", "--max-len", "6"}).code == 0);
    const auto report = nlohmann::json::parse(slurp(dir / "eval.json"));
    CHECK(report["rouge"]["count"] == 10);
    CHECK(report.contains("groups"));

    REQUIRE(cli({"diagnose", "--checkpoint", out + "/model.bin", "--corpus", corpus, "--out", dir / "diag",
                 "--examples", "5"}).code == 0);
    const auto diag = nlohmann::json::parse(slurp(dir / "diag/diagnostics.json"));
    CHECK(diag["substitution"]["examples"].size() == 5);

    const auto bad = cli({"evaluate", "--checkpoint", corpus, "--corpus", corpus, "--out", dir / "x.json"});
    CHECK(bad.code == 1);
    CHECK(bad.err.find("error:") != std::string::npos);
  }

  SUBCASE("malformed config") {
    std::ofstream(dir / "bad.json") << "{\"k\": ";
    const auto r = cli({"train", "--config", dir / "bad.json", "--corpus", corpus, "--out", dir / "o"});
    CHECK(r.code == 1);
    std::ofstream(dir / "unknown.json") << "{\"kk\": 3}";
    CHECK(cli({"train", "--config", dir / "unknown.json", "--corpus", corpus, "--out", dir / "o"}).code == 1);
  }

  SUBCASE("sweep writes one row per value and strategy") {
    const auto r = cli({"sweep", "--config", cfg, "--corpus", corpus, "--valid", corpus, "--out", dir / "sweep",
                        "--coefficient", "w_su", "--values", "0.01,0.05,0.1", "--strategies", "alternating"});
    INFO(r.err);
    REQUIRE(r.code == 0);
    std::istringstream csv(slurp(dir / "sweep/sweep.csv"));
    std::string line;
    std::getline(csv, line);
    CHECK(line == "coefficient,value,strategy,seed,final_train_main,final_valid_main,best_valid_main");
    std::size_t rows = 0;
    while (std::getline(csv, line)) {
      CHECK(line.rfind("w_su,", 0) == 0);
      ++rows;
    }
    CHECK(rows == 3);
  }
}
