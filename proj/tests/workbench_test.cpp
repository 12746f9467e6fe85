// Copyright 2026 The looptrap Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <fstream>
#include <random>
#include <sstream>

#include "looptrap/digest.hpp"
#include "looptrap/errors.hpp"
#include "looptrap/toy_transformer.hpp"
#include "looptrap/workbench.hpp"

namespace looptrap {
namespace {

namespace fs = std::filesystem;

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

class WorkbenchTest : public ::testing::Test {
 protected:
  fs::path dir_;

  void SetUp() override {
    std::random_device rd;
    dir_ = fs::temp_directory_path() / ("looptrap-wb-" + std::to_string(rd()));
    fs::create_directories(dir_);
    std::ofstream(dir_ / "prompts.txt") << "tell me a story\n\nwhy is the sky blue?\n";
  }
  void TearDown() override { fs::remove_all(dir_); }

  RunConfig parse(const std::string& text) const { return parse_config(text, dir_); }

  std::string expect_config_error(const std::string& text) const {
    try {
      parse(text);
    } catch (const ConfigError& e) {
      return e.key();
    }
    ADD_FAILURE() << "accepted: " << text;
    return "";
  }

  std::string small_attack(const std::string& command, const std::string& out) const {
    return R"({"command": ")" + command + R"(", "models": ["toy:seed=1"], "dataset": "prompts.txt",
      "output_dir": ")" + out + R"(", "seed": 5,
      "attack": {"L": 6, "K": 4, "B": 8, "max_steps": 3, "trials": 4, "probe_max_len": 16},
      "eval": {"max_len": 16, "methods": ["normal", "loopllm"]}})";
  }
};

nlohmann::json strip_volatile(nlohmann::json j) {
  j.erase("run_id");
  j.erase("timestamp");
  j.erase("config_digest");
  return j;
}

TEST_F(WorkbenchTest, Defaults) {
  const RunConfig cfg = parse(R"({"command": "attack", "models": ["toy"], "dataset": "prompts.txt"})");
  EXPECT_EQ(cfg.command, Command::kAttack);
  EXPECT_EQ(cfg.attack.suffix_length, 30u);
  EXPECT_EQ(cfg.attack.top_k, 64u);
  EXPECT_EQ(cfg.attack.batch, 128u);
  EXPECT_EQ(cfg.attack.max_steps, 20u);
  EXPECT_EQ(cfg.attack.trials, 16u);
  EXPECT_DOUBLE_EQ(cfg.attack.success_fraction, 0.125);
  EXPECT_EQ(cfg.segment_text, "*");
  EXPECT_EQ(cfg.dataset, dir_ / "prompts.txt");
  EXPECT_EQ(cfg.eval.methods, (std::vector<std::string>{"loopllm"}));
  EXPECT_EQ(cfg.workers, 1u);
  EXPECT_EQ(cfg.digest.size(), 64u);
}

TEST_F(WorkbenchTest, ErrorsNameTheKey) {
  EXPECT_EQ(expect_config_error(
                R"({"command": "attack", "models": ["toy"], "dataset": "prompts.txt", "attack": {"L": 2, "K": 3, "B": 7}})"),
            "attack.B");
  EXPECT_EQ(expect_config_error(
                R"({"command": "attack", "models": ["toy"], "dataset": "prompts.txt", "attack": {"bogus": 1}})"),
            "attack.bogus");
  EXPECT_EQ(expect_config_error(R"({"command": "fly", "models": ["toy"]})"), "command");
  EXPECT_EQ(expect_config_error(R"({"command": "attack", "models": ["toy"], "dataset": "missing.txt"})"), "dataset");
  EXPECT_EQ(expect_config_error(
                R"({"command": "attack", "models": ["toy:bogus=1"], "dataset": "prompts.txt"})").substr(0, 6),
            "models");
  EXPECT_EQ(expect_config_error(
                R"({"command": "defend", "models": ["toy"], "dataset": "prompts.txt"})").substr(0, 7),
            "defense");
  EXPECT_THROW(parse("{not json"), ConfigError);
}

TEST_F(WorkbenchTest, DigestIsCanonical) {
  const RunConfig a = parse(R"({"command": "eval", "models": ["toy"], "dataset": "prompts.txt", "seed": 3})");
  const RunConfig b = parse("{\"seed\":3,\n  \"dataset\":\"prompts.txt\",\"models\":[\"toy\"],\"command\":\"eval\"}");
  const RunConfig c = parse(R"({"command": "eval", "models": ["toy"], "dataset": "prompts.txt", "seed": 4})");
  EXPECT_EQ(a.digest, b.digest);
  EXPECT_NE(a.digest, c.digest);
  EXPECT_EQ(a.digest, sha256_hex(a.canonical));
  RunConfig d = a;
  apply_overrides(d, {std::nullopt, 4, std::nullopt});
  EXPECT_EQ(d.digest, c.digest);
}

TEST_F(WorkbenchTest, OutputDirUsesDigestPrefix) {
  const RunConfig a = parse(R"({"command": "eval", "models": ["toy"], "dataset": "prompts.txt"})");
  EXPECT_EQ(resolve_output_dir(a).filename().string(), "eval-" + a.digest.substr(0, 12));
}

TEST_F(WorkbenchTest, RegistryGrammar) {
  ModelRegistry reg;
  EXPECT_EQ(reg.resolve("toy:seed=3,width=16")->vocab().size, 64u);
  EXPECT_EQ(reg.resolve("toy-loop:eos_bias=2")->vocab().size, 64u);
  EXPECT_THROW(reg.resolve("toy:seed"), ConfigError);
  EXPECT_THROW(reg.resolve("gpt-unknown"), ConfigError);
  reg.add("mine", [](const std::string&) { return ModelHandle(make_toy_model(9, "mine")); });
  EXPECT_EQ(reg.resolve("mine")->id(), "mine");
}

TEST_F(WorkbenchTest, AttackRunIsMonotoneAndDeterministic) {
  const RunConfig a = parse(small_attack("attack", "out-a"));
  const RunRecord ra = execute_run(a);
  ASSERT_EQ(ra.inputs.size(), 4u);
  EXPECT_EQ(ra.error_count(), 0u);
  for (const auto& r : ra.inputs) {
    if (r.method != "loopllm") continue;
    ASSERT_FALSE(r.loss_history.empty());
    for (std::size_t i = 1; i < r.loss_history.size(); ++i) EXPECT_LE(r.loss_history[i], r.loss_history[i - 1]);
    EXPECT_EQ(r.suffix_tokens.size(), 6u);
    EXPECT_EQ(r.trials.size(), 4u);
  }
  const RunRecord rb = execute_run(parse(small_attack("attack", "out-b")));
  ASSERT_EQ(ra.inputs.size(), rb.inputs.size());
  for (std::size_t i = 0; i < ra.inputs.size(); ++i) {
    EXPECT_EQ(strip_volatile(to_json(ra.inputs[i])), strip_volatile(to_json(rb.inputs[i])));
  }

  const fs::path out = dir_ / "out-a";
  for (const char* f : {"config.json", "config.source.json", "results.jsonl", "summary.csv", "digest.txt"}) {
    EXPECT_TRUE(fs::exists(out / f)) << f;
  }
  EXPECT_EQ(sha256_hex(slurp(out / "config.json")), a.digest);
  EXPECT_EQ(slurp(out / "config.source.json"), small_attack("attack", "out-a"));

  const std::string csv = slurp(out / "summary.csv");
  EXPECT_EQ(csv.substr(0, csv.find('\n')),
            "model,method,defense,inputs,errors,avg_len,asr,mean_entropy,mean_prompt_ppl");
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 3);
}

TEST_F(WorkbenchTest, ResultsRoundTripAndStableReport) {
  const RunRecord run = execute_run(parse(small_attack("eval", "out")));
  const auto back = read_results(dir_ / "out" / "results.jsonl");
  ASSERT_EQ(back.size(), 1u);
  EXPECT_EQ(back[0].run_id, run.run_id);
  EXPECT_EQ(back[0].config_digest, run.config_digest);
  ASSERT_EQ(back[0].inputs.size(), run.inputs.size());
  for (std::size_t i = 0; i < run.inputs.size(); ++i) EXPECT_EQ(to_json(back[0].inputs[i]), to_json(run.inputs[i]));

  emit_report(back, dir_ / "r1");
  emit_report(back, dir_ / "r2");
  for (const char* f : {"summary.csv", "digest.txt"}) EXPECT_EQ(slurp(dir_ / "r1" / f), slurp(dir_ / "r2" / f));
  EXPECT_EQ(slurp(dir_ / "r1" / "summary.csv"), slurp(dir_ / "out" / "summary.csv"));
}

TEST_F(WorkbenchTest, SummaryRowsAggregate) {
  RunRecord run;
  for (int i = 0; i < 3; ++i) {
    InputRecord r;
    r.model = "m";
    r.method = "normal";
    r.avg_len = 10.0 * (i + 1);
    r.success = i == 2;
    r.trials.resize(4);
    if (i == 1) {
      r.error_type = "ContextOverflowError";
      r.error = "too long";
    }
    run.inputs.push_back(r);
  }
  const auto rows = summary_rows(std::span<const RunRecord>(&run, 1));
  ASSERT_EQ(rows.size(), 1u);
  EXPECT_EQ(rows[0].inputs, 2u);
  EXPECT_EQ(rows[0].errors, 1u);
  EXPECT_DOUBLE_EQ(rows[0].avg_len, 20.0);
  EXPECT_DOUBLE_EQ(rows[0].asr, 0.5);
}

TEST_F(WorkbenchTest, TransferRecordsAlignmentFailure) {
  const std::string text = R"({"command": "transfer", "models": ["toy:seed=1"],
    "surrogates": ["toy:seed=2", "toy:seed=3,vocab=40"], "dataset": "prompts.txt", "output_dir": "t",
    "attack": {"L": 4, "K": 4, "B": 4, "max_steps": 1, "trials": 2, "probe_max_len": 8},
    "eval": {"max_len": 8}})";
  const RunRecord run = execute_run(parse(text));
  std::size_t aligned_errors = 0;
  for (const auto& r : run.inputs) {
    if (r.method == "loopllm-t") {
      EXPECT_EQ(r.error_type, "AlignmentError");
      ++aligned_errors;
    }
  }
  EXPECT_EQ(aligned_errors, 2u);
}

TEST_F(WorkbenchTest, TransferSuffixIsEvaluatedOnTarget) {
  const std::string text = R"({"command": "transfer", "models": ["toy:seed=1", "toy-loop"],
    "surrogates": ["toy:seed=2", "toy-loop:eos_bias=3"], "dataset": "prompts.txt", "output_dir": "t",
    "attack": {"L": 4, "K": 4, "B": 4, "max_steps": 1, "trials": 2, "probe_max_len": 8},
    "eval": {"max_len": 8, "methods": ["normal", "loopllm-t"]}})";
  const RunRecord run = execute_run(parse(text));
  EXPECT_EQ(run.error_count(), 0u);
  std::map<std::size_t, std::string> suffix_by_prompt;
  for (const auto& r : run.inputs) {
    if (r.method != "loopllm-t") continue;
    EXPECT_EQ(r.user_text, r.prompt + r.suffix_text);
    auto [it, fresh] = suffix_by_prompt.emplace(r.prompt_id, r.suffix_text);
    if (!fresh) {
      EXPECT_EQ(it->second, r.suffix_text);
    }
  }
  EXPECT_EQ(suffix_by_prompt.size(), 2u);
}

TEST_F(WorkbenchTest, ReadPromptsSkipsBlankLines) {
  EXPECT_EQ(read_prompts(dir_ / "prompts.txt"), (std::vector<std::string>{"tell me a story", "why is the sky blue?"}));
  EXPECT_THROW(read_prompts(dir_ / "nope.txt"), IoError);
}

}  // namespace
}  // namespace looptrap
