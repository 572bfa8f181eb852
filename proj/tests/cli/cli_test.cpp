#include <gtest/gtest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include <json.hpp>

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Result {
  int code = -1;
  std::string output;
};

// Runs the CLI with stdout and stderr merged.
Result cli(const std::string& args) {
  const std::string cmd = std::string(STARK_CLI_PATH) + " " + args + " 2>&1";
  Result r;
  FILE* p = popen(cmd.c_str(), "r");
  if (p == nullptr) return r;
  char buf[4096];
  while (std::size_t n = fread(buf, 1, sizeof buf, p)) r.output.append(buf, n);
  const int status = pclose(p);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / "stark_cli" / name;
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// A config small enough for a full pipeline in a few seconds.
fs::path tiny_config() {
  const fs::path dir = fs::temp_directory_path() / "stark_cli";
  fs::create_directories(dir);
  const fs::path path = dir / "tiny.json";
  const json c = {{"seed", 7},
                  {"task", {{"synthetic", {{"train_size", 200}, {"dev_size", 60}}}}},
                  {"model", {{"d_model", 16}, {"heads", 2}, {"head_dim", 8}, {"ffn_dim", 32}, {"layers", 2}}},
                  {"teacher", {{"max_epochs", 2}}},
                  {"distill", {{"train", {{"max_epochs", 1}}}, {"student_init", {{"keep_layers", 1}}}}},
                  {"pilot", {{"trials", 2}}}};
  std::ofstream(path) << c.dump(2);
  return path;
}

}  // namespace

TEST(Cli, UnknownSubcommandPrintsUsage) {
  const Result r = cli("frobnicate");
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.output.find("Usage"), std::string::npos) << r.output;
}

TEST(Cli, HelpSucceeds) {
  const Result r = cli("--help");
  EXPECT_EQ(r.code, 0);
  for (const char* sub : {"finetune", "trial", "score", "sparsify", "distill", "stark", "auto", "pilot", "report"}) {
    EXPECT_NE(r.output.find(sub), std::string::npos) << sub;
  }
}

TEST(Cli, MissingConfigIsInputError) {
  const fs::path out = scratch("missing_config");
  const Result r = cli("finetune -c /nonexistent/cfg.json -o " + out.string());
  EXPECT_EQ(r.code, 3) << r.output;
  const json err = json::parse(slurp(out / "error.json"));
  EXPECT_EQ(err["exit_code"], 3);
  EXPECT_EQ(err["command"], "finetune");
  EXPECT_FALSE(err["message"].get<std::string>().empty());
}

TEST(Cli, MissingTeacherIsInputError) {
  const fs::path out = scratch("missing_teacher");
  const Result r = cli("trial -c " + tiny_config().string() + " --teacher /nonexistent/t.strk -o " + out.string());
  EXPECT_EQ(r.code, 3) << r.output;
}

TEST(Cli, BadOverridesAreConfigErrors) {
  const fs::path out = scratch("bad_override");
  const std::string base = "finetune -c " + tiny_config().string() + " -o " + out.string();
  EXPECT_EQ(cli(base + " --set distill.nope=1").code, 2);
  EXPECT_EQ(cli(base + " --set seed").code, 2);
  EXPECT_EQ(cli(base + " --tau -1").code, 2);
  EXPECT_EQ(cli(base + " --sparsity 1.5").code, 2);
  EXPECT_TRUE(fs::exists(out / "error.json"));
}

TEST(Cli, StagesChainThroughFiles) {
  const fs::path out = scratch("stages");
  const std::string cfg = " -c " + tiny_config().string() + " -o " + out.string();
  ASSERT_EQ(cli("finetune" + cfg).code, 0);
  ASSERT_TRUE(fs::exists(out / "teacher.strk"));
  const std::string teacher = " --teacher " + (out / "teacher.strk").string();
  ASSERT_EQ(cli("trial" + cfg + teacher).code, 0);
  const std::string student = " --student " + (out / "trial_student.strk").string();
  ASSERT_EQ(cli("score" + cfg + teacher + student).code, 0);
  ASSERT_EQ(cli("sparsify" + cfg + " --sparsity 0.5 --scores " + (out / "scores.jsonl").string()).code, 0);
  ASSERT_TRUE(fs::exists(out / "mask_0.500.json"));
  const Result d = cli("distill" + cfg + teacher + " --init " + (out / "trial_init.strk").string() + " --mask " +
                       (out / "mask_0.500.json").string());
  ASSERT_EQ(d.code, 0) << d.output;
  EXPECT_TRUE(fs::exists(out / "distill_report.jsonl"));
  const json manifest = json::parse(slurp(out / "manifest.json"));
  EXPECT_EQ(manifest["command"], "distill");
  EXPECT_EQ(manifest["config_digest"].get<std::string>().size(), 16u);

  // Distilling through the empty mask repeats the trial exactly.
  std::ofstream(out / "empty.json") << R"({"kind":"structured","sparsity":0,"removed":[]})";
  ASSERT_EQ(cli("distill" + cfg + teacher + " --init " + (out / "trial_init.strk").string() + " --mask " +
                (out / "empty.json").string())
                .code,
            0);
  EXPECT_EQ(slurp(out / "distill_report.jsonl"), slurp(out / "trial_report.jsonl"));

  const Result p = cli("pilot" + cfg + teacher);
  ASSERT_EQ(p.code, 0) << p.output;
  EXPECT_EQ(json::parse(slurp(out / "pilot.json")).size(), 4u);
}

TEST(Cli, StarkRunManifestAndDeterminism) {
  const fs::path a = scratch("stark_a"), b = scratch("stark_b");
  const std::string cfg = " -c " + tiny_config().string();
  const Result ra = cli("stark" + cfg + " -o " + a.string());
  ASSERT_EQ(ra.code, 0) << ra.output;
  ASSERT_EQ(cli("stark" + cfg + " -o " + b.string()).code, 0);
  EXPECT_EQ(slurp(a / "pipeline_report.json"), slurp(b / "pipeline_report.json"));

  const json manifest = json::parse(slurp(a / "manifest.json"));
  int trial = 0, actual = 0;
  for (const auto& art : manifest["artifacts"]) {
    const std::string name = fs::path(art.get<std::string>()).filename().string();
    trial += name == "trial_report.jsonl";
    actual += name.starts_with("actual_") && name.ends_with(".jsonl");
  }
  EXPECT_EQ(trial, 1);
  EXPECT_EQ(actual, 9);
  EXPECT_EQ(json::parse(slurp(a / "pipeline_report.json"))["actual_runs"], 9);

  const Result rep = cli("report " + (a / "pipeline_report.json").string());
  EXPECT_EQ(rep.code, 0);
  EXPECT_NE(rep.output.find("StarK"), std::string::npos);
}

TEST(Cli, AutoRunsOneDistillation) {
  const fs::path out = scratch("auto");
  const std::string cfg = " -c " + tiny_config().string() + " -o " + out.string();
  ASSERT_EQ(cli("finetune" + cfg).code, 0);
  const Result r = cli("auto" + cfg + " --teacher " + (out / "teacher.strk").string());
  ASSERT_EQ(r.code, 0) << r.output;
  const json rep = json::parse(slurp(out / "pipeline_report.json"));
  EXPECT_EQ(rep["mode"], "auto");
  EXPECT_EQ(rep["actual_runs"], rep["auto"]["fallback"].get<bool>() ? 9 : 1);
}
