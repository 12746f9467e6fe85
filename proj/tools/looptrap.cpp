// Copyright 2026 The looptrap Authors
// SPDX-License-Identifier: Apache-2.0
//
// looptrap <command> --config <path> [--out <dir>] [--seed <n>] [--workers <n>]
//
// Exit status: 0 success, 1 configuration error, 2 per-input failures or a
// fatal runtime error.

#include <CLI11.hpp>
#include <cstdint>
#include <iostream>
#include <string>

#include "looptrap/errors.hpp"
#include "looptrap/workbench.hpp"

namespace {

constexpr int kOk = 0;
constexpr int kConfigError = 1;
constexpr int kFailures = 2;

int run(looptrap::Command command, const std::string& config, const looptrap::ConfigOverrides& overrides) {
  looptrap::RunConfig cfg;
  try {
    cfg = looptrap::load_config(config);
    if (cfg.command != command) {
      throw looptrap::ConfigError("command", "config is for '" + looptrap::to_string(cfg.command) +
                                                 "' but the CLI command is '" + looptrap::to_string(command) + "'");
    }
    looptrap::apply_overrides(cfg, overrides);
  } catch (const looptrap::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfigError;
  }

  const auto out_dir = looptrap::resolve_output_dir(cfg);
  std::cerr << "looptrap " << looptrap::to_string(cfg.command) << ": config " << cfg.digest.substr(0, 12) << ", output "
            << out_dir.string() << "\n";
  try {
    const looptrap::RunRecord run = looptrap::execute_run(cfg);
    std::cerr << "run " << run.run_id << ": " << run.inputs.size() << " input records, " << run.curves.size()
              << " curves, " << run.error_count() << " errors\n";
    std::cout << out_dir.string() << "\n";
    return run.error_count() == 0 ? kOk : kFailures;
  } catch (const looptrap::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfigError;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kFailures;
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"looptrap: loop-inducing adversarial suffix workbench"};
  app.require_subcommand(1);

  std::string config;
  std::string out;
  std::uint64_t seed = 0;
  std::size_t workers = 0;
  struct Entry {
    looptrap::Command command;
    const char* help;
  };
  const Entry entries[] = {
      {looptrap::Command::kAttack, "optimize a loop suffix per prompt and evaluate it"},
      {looptrap::Command::kEval, "evaluate baseline inputs"},
      {looptrap::Command::kTransfer, "optimize on surrogate models, evaluate on targets"},
      {looptrap::Command::kDefend, "evaluate with guards disabled and enabled"},
      {looptrap::Command::kProfile, "measure latency and energy against sequence length"},
      {looptrap::Command::kMotivate, "entropy, probability and attention curves under repetition"},
      {looptrap::Command::kReport, "summarize existing results logs"},
  };
  std::vector<std::pair<CLI::App*, looptrap::Command>> subs;
  for (const Entry& e : entries) {
    CLI::App* sub = app.add_subcommand(looptrap::to_string(e.command), e.help);
    sub->add_option("--config", config, "JSON run configuration")->required()->check(CLI::ExistingFile);
    sub->add_option("--out", out, "output directory (overrides output_dir)");
    sub->add_option("--seed", seed, "master seed (overrides seed)");
    sub->add_option("--workers", workers, "concurrent inputs (overrides workers)")->check(CLI::PositiveNumber);
    subs.emplace_back(sub, e.command);
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kConfigError;
  }

  for (const auto& [sub, command] : subs) {
    if (!sub->parsed()) continue;
    looptrap::ConfigOverrides overrides;
    if (sub->count("--out")) overrides.output_dir = out;
    if (sub->count("--seed")) overrides.seed = seed;
    if (sub->count("--workers")) overrides.workers = workers;
    return run(command, config, overrides);
  }
  return kConfigError;
}
