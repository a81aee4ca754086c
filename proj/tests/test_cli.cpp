#include <cstdlib>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "json.hpp"
#include "support/test_helpers.hpp"

using emib::testsupport::TempDir;
using nlohmann::json;

namespace {

std::string cli_path() {
  const char* p = std::getenv("EMIB_CLI");
  REQUIRE_MESSAGE(p != nullptr, "EMIB_CLI must point at the emib binary");
  return p;
}

struct RunResult {
  int exit_code;
  std::string out;
};

RunResult run_cli(const std::string& args) {
  static int counter = 0;
  const auto capture = std::filesystem::temp_directory_path() /
                       ("emib_cli_out_" + std::to_string(getpid()) + "_" +
                        std::to_string(++counter) + ".txt");
  const std::string cmd = cli_path() + " " + args + " > " + capture.string() + " 2>&1";
  const int status = std::system(cmd.c_str());
  RunResult r;
  r.exit_code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  std::ifstream in(capture);
  std::stringstream ss;
  ss << in.rdbuf();
  r.out = ss.str();
  std::filesystem::remove(capture);
  return r;
}

std::vector<char> slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

// one shared tiny dataset + checkpoint for the whole suite
struct CliFixture {
  TempDir root{"cli"};
  std::filesystem::path data_dir, ckpt_dir;

  CliFixture() {
    data_dir = root.path() / "data";
    auto r = run_cli("synth --count 60 --subjects 6 --seed 3 --out " + data_dir.string());
    REQUIRE(r.exit_code == 0);
    auto t = run_cli("pretrain --data " + data_dir.string() +
                     " --mode mae --steps 4 --batch 2 --seed 1 --out " +
                     (root.path() / "run").string());
    REQUIRE_MESSAGE(t.exit_code == 0, t.out);
    ckpt_dir = root.path() / "run" / "checkpoint";
  }
};

CliFixture& fixture() {
  static CliFixture f;
  return f;
}

}  // namespace

TEST_SUITE_BEGIN("cli");

TEST_CASE("help exits zero, bad flags exit 2") {
  CHECK(run_cli("--help").exit_code == 0);
  CHECK(run_cli("synth --help").exit_code == 0);
  CHECK(run_cli("--definitely-not-a-flag").exit_code == 2);
  CHECK(run_cli("pretrain").exit_code == 2);          // missing --data
  CHECK(run_cli("synth --count notanum").exit_code == 2);
  CHECK(run_cli("probe --ckpt x").exit_code == 2);    // missing --data
}

TEST_CASE("synth writes a loadable dataset and is byte-reproducible") {
  CliFixture& f = fixture();
  CHECK(std::filesystem::exists(f.data_dir / "manifest.json"));
  CHECK(std::filesystem::exists(f.data_dir / "images.f32"));
  CHECK(std::filesystem::exists(f.data_dir / "resolved_config.json"));

  TempDir again("cli_synth2");
  auto r = run_cli("synth --count 60 --subjects 6 --seed 3 --out " +
                   again.path().string());
  REQUIRE(r.exit_code == 0);
  for (const char* name : {"manifest.json", "images.f32", "gaze.f32"})
    CHECK(slurp(f.data_dir / name) == slurp(again.path() / name));
}

TEST_CASE("synth with count 1 fails: the split needs multiple subjects") {
  TempDir out("cli_synth_one");
  const auto r = run_cli("synth --count 1 --out " + out.path().string());
  CHECK(r.exit_code == 2);
}

TEST_CASE("missing dataset directory is an i/o failure") {
  const auto r = run_cli("pretrain --data /nonexistent/nowhere --steps 1 --out /tmp/x_emib");
  CHECK(r.exit_code == 3);
}

TEST_CASE("pretrain wrote a checkpoint, a log and the resolved config") {
  CliFixture& f = fixture();
  CHECK(std::filesystem::exists(f.ckpt_dir / "manifest.json"));
  CHECK(std::filesystem::exists(f.root.path() / "run" / "train_log.jsonl"));
  std::ifstream log(f.root.path() / "run" / "train_log.jsonl");
  std::string line;
  int lines = 0;
  while (std::getline(log, line)) {
    const json j = json::parse(line);
    CHECK(j.contains("step"));
    CHECK(j.contains("l_rec"));
    CHECK(j.contains("lr"));
    ++lines;
  }
  CHECK(lines >= 1);
  const json cfg =
      json::parse(std::ifstream(f.root.path() / "run" / "resolved_config.json"));
  CHECK(cfg.at("mode") == "mae");
  CHECK(cfg.at("lambda_contr") == 0.0);  // baselines default to no contrastive term
}

TEST_CASE("ae mode logs mask ratio 1.0") {
  CliFixture& f = fixture();
  TempDir out("cli_ae");
  const auto r = run_cli("pretrain --data " + f.data_dir.string() +
                         " --mode ae --steps 2 --batch 2 --out " + out.path().string());
  REQUIRE_MESSAGE(r.exit_code == 0, r.out);
  const json cfg = json::parse(std::ifstream(out.path() / "resolved_config.json"));
  CHECK(cfg.at("mask_ratio") == 1.0);
}

TEST_CASE("probe reports are deterministic and carry the protocol metadata") {
  CliFixture& f = fixture();
  TempDir out("cli_probe");
  const std::string report_path = (out.path() / "report.json").string();
  const std::string base = "probe --ckpt " + f.ckpt_dir.string() + " --data " +
                           f.data_dir.string();
  auto r = run_cli(base + " --shots all --out " + report_path);
  REQUIRE_MESSAGE(r.exit_code == 0, r.out);
  const json rep = json::parse(std::ifstream(report_path));
  CHECK(rep.at("k").get<int>() == 40);  // whole train split
  CHECK(rep.contains("mean_deg"));

  auto r2 = run_cli(base + " --shots all --out " + report_path + ".again");
  REQUIRE(r2.exit_code == 0);
  CHECK(slurp(report_path) == slurp(report_path + ".again"));

  auto r3 = run_cli(base + " --shots 10 --repeats 3 --out " + report_path + ".few");
  REQUIRE_MESSAGE(r3.exit_code == 0, r3.out);
  const json rep3 = json::parse(std::ifstream(report_path + ".few"));
  CHECK(rep3.at("per_repeat_deg").size() == 3);

  auto r4 = run_cli(base + " --shots 10 --head-pose --out " + report_path + ".head");
  REQUIRE(r4.exit_code == 0);
  const json rep4 = json::parse(std::ifstream(report_path + ".head"));
  CHECK(rep4.at("feature_dim").get<int>() == 18);
  CHECK(rep4.at("probe_params").get<int>() == 38);

  auto r5 = run_cli(base + " --shots 100000");
  CHECK(r5.exit_code == 2);  // K exceeds the train split
}

TEST_CASE("audit on a fresh checkpoint exits zero") {
  CliFixture& f = fixture();
  const auto r = run_cli("audit --ckpt " + f.ckpt_dir.string() + " --data " +
                         f.data_dir.string() + " --batch 2 --mode mae");
  REQUIRE_MESSAGE(r.exit_code == 0, r.out);
  const json j = json::parse(r.out);
  CHECK(j.at("max_rel_deviation").get<double>() <= 1e-3);
}

TEST_CASE("redirect writes panels; zero delta equals the reconstruction panel") {
  CliFixture& f = fixture();
  TempDir out("cli_redirect");
  const std::string probe_path = (out.path() / "probe.json").string();
  auto fit = run_cli("probe --ckpt " + f.ckpt_dir.string() + " --data " +
                     f.data_dir.string() + " --shots 20 --save-probe " + probe_path);
  REQUIRE_MESSAGE(fit.exit_code == 0, fit.out);

  const std::string base = "redirect --ckpt " + f.ckpt_dir.string() + " --probe " +
                           probe_path + " --data " + f.data_dir.string() +
                           " --image-idx 0 ";
  auto r = run_cli(base + "--delta-pitch 0 --delta-yaw 0 --out " +
                   (out.path() / "zero").string());
  REQUIRE_MESSAGE(r.exit_code == 0, r.out);
  CHECK(std::filesystem::exists(out.path() / "zero" / "panel.png"));

  auto r2 = run_cli(base + "--delta-pitch 0 --delta-yaw 0 --out " +
                    (out.path() / "zero2").string());
  REQUIRE(r2.exit_code == 0);
  CHECK(slurp(out.path() / "zero" / "redirected.png") ==
        slurp(out.path() / "zero2" / "redirected.png"));
}

TEST_CASE("distill rejects a mismatched student z_dim") {
  CliFixture& f = fixture();
  TempDir out("cli_distill");
  const std::string cfg_path = (out.path() / "student.json").string();
  {
    std::ofstream cfg(cfg_path);
    cfg << R"({"stage_widths":[8,16],"blocks_per_stage":[1,1],"groups":4,"z_dim":8})";
  }
  const auto r = run_cli("distill --teacher " + f.ckpt_dir.string() + " --data " +
                         f.data_dir.string() + " --student-cfg " + cfg_path +
                         " --steps 2 --batch 2 --out " + (out.path() / "d").string());
  CHECK(r.exit_code == 2);
}

TEST_SUITE_END();
