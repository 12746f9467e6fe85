// Copyright 2026 The looptrap Authors
// SPDX-License-Identifier: Apache-2.0
//
// Run configuration, pipeline orchestration, results log and reports.

#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <json.hpp>
#include <map>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "looptrap/defense.hpp"
#include "looptrap/gateway.hpp"
#include "looptrap/loop_optimizer.hpp"
#include "looptrap/profiler.hpp"

namespace looptrap {

enum class Command { kAttack, kEval, kTransfer, kDefend, kProfile, kMotivate, kReport };

std::string to_string(Command command);
// Throws ConfigError("command") for unknown names.
Command parse_command(std::string_view name);

struct EvalSettings {
  std::size_t max_len = 128;
  // Subset of normal, special, loopllm (loopllm-t for transfer). Empty means
  // the command's default set.
  std::vector<std::string> methods;
  bool prompt_ppl = true;
};

struct ProfileSettings {
  std::vector<std::size_t> lengths;  // default 32, 64, ..., 512
  std::size_t repeats = 8;
  std::vector<CostAxis> axes{CostAxis::kInput, CostAxis::kOutput};
  std::optional<double> power_watts;  // synthetic constant-power sampler
  double power_interval = 0.01;       // seconds
};

struct MotivateSettings {
  std::string prompt;  // empty: first dataset line
  std::string segment = "once ";
  std::vector<std::size_t> reps{0, 1, 3, 5, 7};
  std::size_t samples = 8;
  std::size_t generation_length = 50;
  double temperature = 1.0;
};

struct RunConfig {
  Command command = Command::kAttack;
  std::vector<std::string> models;
  std::vector<std::string> surrogates;
  std::filesystem::path dataset;
  AttackConfig attack;
  // Cyclic segment as text (tokenized per model), or a random segment of
  // `segment_length` tokens when set.
  std::string segment_text = "*";
  std::optional<std::size_t> segment_length;
  DefenseConfig defense;
  EvalSettings eval;
  ProfileSettings profile;
  MotivateSettings motivate;
  std::vector<std::filesystem::path> report_inputs;
  std::filesystem::path output_dir;
  std::uint64_t seed = 0;
  std::size_t workers = 1;

  // Verbatim source document, canonical effective document, and SHA-256 of
  // the canonical form.
  std::string source_text;
  std::string canonical;
  std::string digest;
};

// Relative paths resolve against `base_dir`. Throws ConfigError naming the
// offending key path.
RunConfig parse_config(std::string_view text, const std::filesystem::path& base_dir);
RunConfig load_config(const std::filesystem::path& path);

struct ConfigOverrides {
  std::optional<std::filesystem::path> output_dir;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> workers;
};

// Applies CLI overrides and refreshes canonical text and digest.
void apply_overrides(RunConfig& cfg, const ConfigOverrides& overrides);

// Effective output directory: the configured one, else
// $LOOPTRAP_OUTPUT_ROOT (or ./runs) / <command>-<digest prefix>.
std::filesystem::path resolve_output_dir(const RunConfig& cfg);

// Model identifiers:
//   toy[:seed=N,width=W,heads=H,blocks=B,context=C,mlp=M,vocab=V]
//   toy-loop[:match=..,region=..,copy=..,frequency=..,eos_bias=..,context=..]
//   http://host:port  (RemoteModel)
class ModelRegistry {
 public:
  using Factory = std::function<ModelHandle(const std::string& identifier)>;

  ModelRegistry();
  // Exact-name factory consulted before the built-in grammar.
  void add(std::string name, Factory factory);
  // Throws ConfigError for malformed identifiers; remote errors propagate.
  ModelHandle resolve(const std::string& identifier) const;
  // Syntax check only, no model construction or network access.
  void check(const std::string& identifier, const std::string& key) const;

 private:
  std::map<std::string, Factory> named_;
};

struct TrialRecord {
  std::size_t length = 0;
  bool reached_max = false;
  bool halted = false;
  std::uint64_t seed = 0;
  double mean_entropy = 0.0;
  std::string halt_reason = "none";
};

struct InputRecord {
  std::string run_id;
  std::string config_digest;
  std::string command;
  std::string model;
  std::string method;
  std::string defense = "off";
  std::size_t prompt_id = 0;
  std::string prompt;
  std::string user_text;
  std::string suffix_text;
  TokenSequence suffix_tokens;
  std::vector<double> loss_history;
  std::string attack_status;
  std::size_t attack_steps = 0;
  std::size_t max_len = 0;
  double success_fraction = 0.0;
  std::vector<TrialRecord> trials;
  double avg_len = 0.0;
  double reached_fraction = 0.0;
  bool success = false;
  double mean_entropy = 0.0;
  std::optional<double> prompt_ppl;
  std::optional<std::string> gate;
  std::optional<std::string> error_type;
  std::optional<std::string> error;
  std::string timestamp;
};

struct CurveRecord {
  std::string run_id;
  std::string config_digest;
  std::string command;
  std::string model;
  std::string name;
  std::string csv;
  std::string timestamp;
};

struct RunRecord {
  std::string run_id;
  std::string config_digest;
  std::string command;
  std::string started;
  std::string finished;
  std::vector<InputRecord> inputs;
  std::vector<CurveRecord> curves;

  std::size_t error_count() const;
};

nlohmann::json to_json(const InputRecord& record);
nlohmann::json to_json(const CurveRecord& record);
InputRecord input_record_from_json(const nlohmann::json& j);
CurveRecord curve_record_from_json(const nlohmann::json& j);

// Thread-safe JSON Lines writer; every append is flushed.
class ResultsLog {
 public:
  explicit ResultsLog(const std::filesystem::path& path);
  void append(const nlohmann::json& line);

 private:
  std::mutex mu_;
  std::ofstream out_;
};

// Groups results-log lines by run_id, preserving first-seen order.
std::vector<RunRecord> read_results(const std::filesystem::path& path);

std::vector<std::string> read_prompts(const std::filesystem::path& path);

// Writes config.json (canonical), config.source.json (verbatim),
// results.jsonl and the report bundle into the output directory.
RunRecord execute_run(const RunConfig& cfg, const ModelRegistry& registry = ModelRegistry());

struct SummaryRow {
  std::string model;
  std::string method;
  std::string defense;
  std::size_t inputs = 0;
  std::size_t errors = 0;
  double avg_len = 0.0;
  double asr = 0.0;
  double mean_entropy = 0.0;
  std::optional<double> mean_prompt_ppl;
};

// One row per (model, method, defense) in first-seen order; error records
// are counted but excluded from the metrics.
std::vector<SummaryRow> summary_rows(std::span<const RunRecord> records);

// summary.csv, digest.txt and curves/<model>__<name>.csv.
void emit_report(std::span<const RunRecord> records, const std::filesystem::path& out_dir);

}  // namespace looptrap
