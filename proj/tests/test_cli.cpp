#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <sys/wait.h>
#include <unistd.h>

#include <array>
#include <cstdio>
#include <filesystem>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "protosteer/io.hpp"
#include "protosteer/pipeline.hpp"

using namespace ps;
namespace fs = std::filesystem;
namespace pl = ps::pipeline;

namespace {

struct temp_dir {
  fs::path path;
  temp_dir() {
    path = fs::temp_directory_path() / ("protosteer_cli_" + std::to_string(::getpid()) + "_" +
                                        std::to_string(counter()++));
    fs::create_directories(path);
  }
  ~temp_dir() { fs::remove_all(path); }
  std::string file(const std::string& name) const { return (path / name).string(); }
  static int& counter() {
    static int c = 0;
    return c;
  }
};

struct CmdResult {
  int code = -1;
  std::string output;  // stdout and stderr interleaved
};

CmdResult run_cli(const std::string& args) {
  const std::string cmd = std::string(PROTOSTEER_CLI_PATH) + " " + args + " 2>&1";
  FILE* pipe = ::popen(cmd.c_str(), "r");
  REQUIRE(pipe != nullptr);
  CmdResult r;
  std::array<char, 4096> buf{};
  size_t got = 0;
  while ((got = ::fread(buf.data(), 1, buf.size(), pipe)) > 0) r.output.append(buf.data(), got);
  const int status = ::pclose(pipe);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

// Same scaled-down experiment the pipeline suite uses; stored as a config
// file so the cli resolves it the way a user would.
pl::ExperimentConfig tiny_experiment(const std::string& out_dir) {
  pl::ExperimentConfig cfg;
  cfg.seed = 1;
  cfg.out_dir = out_dir;
  cfg.corpus.num_classes = 3;
  cfg.corpus.content_tokens = 24;
  cfg.corpus.marker_block = 4;
  cfg.corpus.corpus_size = 120;
  cfg.corpus.prompt_len_min = 3;
  cfg.corpus.prompt_len_max = 5;
  cfg.corpus.response_len_min = 6;
  cfg.corpus.response_len_max = 10;
  cfg.lm_dim = 16;
  cfg.lm_layers = 2;
  cfg.lm_heads = 2;
  cfg.lm_head_dim = 8;
  cfg.lm_context = 32;
  cfg.hook_layer = 1;
  cfg.lm_train.epochs = 1;
  cfg.lm_train.batch = 8;
  cfg.lm_train.val_batch = 16;
  cfg.sae.latent = 12;
  cfg.sae.epochs = 2;
  cfg.sae.batch = 32;
  cfg.sae.max_vectors = 512;
  cfg.sae.lr = 1e-3;
  cfg.steer.max_iters = 50;
  cfg.eval.support_per_class = 5;
  cfg.eval.prompts_per_cell = 4;
  cfg.eval.max_new = 16;
  return cfg;
}

std::string write_config(const temp_dir& tmp, const pl::ExperimentConfig& cfg) {
  const std::string path = tmp.file("config.json");
  io::save_json(path, pl::config_to_json(cfg));
  return path;
}

// Staged-vs-run-all comparison dirs, built once through the cli binary.
struct cli_fixture {
  temp_dir tmp;
  std::string staged_dir, runall_dir, config_path;
  bool ok = false;

  cli_fixture() {
    staged_dir = tmp.file("staged");
    runall_dir = tmp.file("runall");
    config_path = write_config(tmp, tiny_experiment("placeholder"));

    ok = true;
    for (const std::string stage : {"gen-data", "train-lm", "dump-acts", "train-sae",
                                    "build-protos", "eval-fewshot", "eval-steer", "baselines"}) {
      const auto r = run_cli(stage + " --config " + config_path + " --out " + staged_dir);
      if (r.code != 0) {
        MESSAGE("stage " << stage << " failed:\n" << r.output);
        ok = false;
        break;
      }
    }
    if (ok) {
      const auto r = run_cli("run-all --config " + config_path + " --out " + runall_dir);
      if (r.code != 0) {
        MESSAGE("run-all failed:\n" << r.output);
        ok = false;
      }
    }
  }
};

const cli_fixture& staged() {
  static cli_fixture f;
  return f;
}

}  // namespace

// ---------------------------------------------------------------------------
// argument handling
// ---------------------------------------------------------------------------

TEST_CASE("help lists the subcommands and exits cleanly") {
  const auto r = run_cli("--help");
  CHECK(r.code == 0);
  for (const std::string name : {"gen-data", "train-lm", "run-all", "sweep", "steer"}) {
    CHECK_MESSAGE(r.output.find(name) != std::string::npos, name);
  }
}

TEST_CASE("a subcommand is required and unknown ones are rejected") {
  CHECK(run_cli("").code != 0);
  CHECK(run_cli("frobnicate").code != 0);
}

TEST_CASE("unknown config keys in --set fail with a clear error") {
  temp_dir tmp;
  const auto r = run_cli("gen-data --out " + tmp.file("run") + " --set corpus.bogus=3");
  CHECK(r.code == 1);
  CHECK(r.output.find("error: config: unknown key 'corpus.bogus'") != std::string::npos);
}

TEST_CASE("running a stage before its inputs exist fails with the producer name") {
  temp_dir tmp;
  const auto r = run_cli("train-lm --out " + tmp.file("empty"));
  CHECK(r.code == 1);
  CHECK(r.output.find("missing artifact") != std::string::npos);
  CHECK(r.output.find("run gen-data first") != std::string::npos);
}

TEST_CASE("common flags land in the resolved config echo") {
  temp_dir tmp;
  const std::string dir = tmp.file("flags");
  const std::string cfg_path = write_config(tmp, tiny_experiment("placeholder"));
  const auto r = run_cli("gen-data --config " + cfg_path + " --out " + dir +
                         " --seed 5 --mode online --set corpus.mix_rho=0.6");
  REQUIRE_MESSAGE(r.code == 0, r.output);
  const io::json echo = io::load_json(dir + "/config.json");
  CHECK(echo.at("out_dir").get<std::string>() == dir);
  CHECK(echo.at("seed").get<std::uint64_t>() == 5);
  CHECK(echo.at("mode").get<std::string>() == "online");
  CHECK(echo.at("corpus").at("mix_rho").get<double>() == doctest::Approx(0.6));
  CHECK(r.output.find("[gen-data]") != std::string::npos);
}

// ---------------------------------------------------------------------------
// staged runs equal the single-shot run
// ---------------------------------------------------------------------------

TEST_CASE("staged subcommands reproduce the run-all artifacts bitwise") {
  const auto& f = staged();
  REQUIRE(f.ok);
  const pl::Paths a = pl::Paths::at(f.staged_dir);
  const pl::Paths b = pl::Paths::at(f.runall_dir);
  const std::vector<std::pair<std::string, std::string>> pairs = {
      {a.specs, b.specs},       {a.train, b.train},
      {a.valid, b.valid},       {a.test, b.test},
      {a.lm_ckpt, b.lm_ckpt},   {a.lm_curve, b.lm_curve},
      {a.dump, b.dump},         {a.sae_ckpt, b.sae_ckpt},
      {a.sae_curve, b.sae_curve}, {a.sparsity, b.sparsity},
      {a.protos, b.protos},     {a.protos_raw, b.protos_raw},
      {a.fewshot, b.fewshot},   {a.fewshot_confusion, b.fewshot_confusion},
      {a.steer_report, b.steer_report}, {a.steer_traces, b.steer_traces},
      {a.report_raw, b.report_raw},     {a.report_direct, b.report_direct},
      {a.compare, b.compare},   {a.manifest, b.manifest},
  };
  for (const auto& [left, right] : pairs) {
    REQUIRE_MESSAGE(fs::exists(left), left);
    REQUIRE_MESSAGE(fs::exists(right), right);
    CHECK_MESSAGE(io::read_text(left) == io::read_text(right), left);
  }
}

// ---------------------------------------------------------------------------
// single-prompt steering
// ---------------------------------------------------------------------------

TEST_CASE("steer generates, judges, and writes tokens for one prompt") {
  const auto& f = staged();
  REQUIRE(f.ok);
  temp_dir tmp;
  const std::string prompt_path = tmp.file("prompt.txt");
  io::write_text(prompt_path, "1 2 3\n");
  const std::string tokens_path = tmp.file("tokens.txt");

  const auto r = run_cli("steer --config " + f.config_path + " --out " + f.runall_dir +
                         " --prompt-file " + prompt_path + " --target 1 --out-file " + tokens_path);
  REQUIRE_MESSAGE(r.code == 0, r.output);
  CHECK(r.output.find("[steer] target=1") != std::string::npos);
  CHECK(r.output.find("judged=") != std::string::npos);

  REQUIRE(fs::exists(tokens_path));
  std::istringstream in(io::read_text(tokens_path));
  std::vector<int> tokens;
  int t = 0;
  while (in >> t) tokens.push_back(t);
  CHECK_FALSE(tokens.empty());
  CHECK(tokens.size() <= 16);

  // byte-identical on a rerun: the whole path is deterministic
  const std::string again_path = tmp.file("tokens_again.txt");
  const auto r2 = run_cli("steer --config " + f.config_path + " --out " + f.runall_dir +
                          " --prompt-file " + prompt_path + " --target 1 --out-file " + again_path);
  REQUIRE(r2.code == 0);
  CHECK(io::read_text(tokens_path) == io::read_text(again_path));
  CHECK(r.output == r2.output);
}

TEST_CASE("steer resolves class names and rejects unknown ones") {
  const auto& f = staged();
  REQUIRE(f.ok);
  temp_dir tmp;
  const std::string prompt_path = tmp.file("prompt.txt");
  io::write_text(prompt_path, "4 5\n");

  const auto by_name = run_cli("steer --config " + f.config_path + " --out " + f.runall_dir +
                               " --prompt-file " + prompt_path + " --target understand");
  REQUIRE_MESSAGE(by_name.code == 0, by_name.output);
  CHECK(by_name.output.find("[steer] target=1") != std::string::npos);

  const auto bad = run_cli("steer --config " + f.config_path + " --out " + f.runall_dir +
                           " --prompt-file " + prompt_path + " --target bogus");
  CHECK(bad.code == 1);
  CHECK(bad.output.find("unknown target class 'bogus'") != std::string::npos);
}

TEST_CASE("steer with the raw source and direct method also runs") {
  const auto& f = staged();
  REQUIRE(f.ok);
  temp_dir tmp;
  const std::string prompt_path = tmp.file("prompt.txt");
  io::write_text(prompt_path, "2 3 4\n");
  const auto r = run_cli("steer --config " + f.config_path + " --out " + f.runall_dir +
                         " --prompt-file " + prompt_path +
                         " --target 2 --source raw-query --method direct --max-new 8");
  REQUIRE_MESSAGE(r.code == 0, r.output);
  CHECK(r.output.find("method=direct") != std::string::npos);
}

TEST_CASE("steer requires its prompt file flag") {
  const auto& f = staged();
  REQUIRE(f.ok);
  const auto r = run_cli("steer --config " + f.config_path + " --out " + f.runall_dir + " --target 1");
  CHECK(r.code != 0);
}

TEST_CASE("an empty prompt file is rejected") {
  const auto& f = staged();
  REQUIRE(f.ok);
  temp_dir tmp;
  const std::string prompt_path = tmp.file("empty.txt");
  io::write_text(prompt_path, "");
  const auto r = run_cli("steer --config " + f.config_path + " --out " + f.runall_dir +
                         " --prompt-file " + prompt_path + " --target 1");
  CHECK(r.code == 1);
  CHECK(r.output.find("contains no tokens") != std::string::npos);
}
