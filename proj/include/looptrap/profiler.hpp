// Copyright 2026 The looptrap Authors
// SPDX-License-Identifier: Apache-2.0
//
// Mechanism analyses (attention mass, probability traces, entropy under
// repetition) and latency / energy profiling against sequence length.

#pragma once

#include <chrono>
#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "looptrap/gateway.hpp"
#include "looptrap/suffix.hpp"

namespace looptrap {

struct AttentionProfile {
  // Mean attention mass each prompt position receives from output queries.
  std::vector<double> per_input_token_score;
};

// score[k] = mean over layers, heads and continuation query positions of the
// attention weight on prompt position k.
AttentionProfile attention_profile(const TokenSequence& prompt, const TokenSequence& continuation,
                                   const LanguageModel& model);

struct TracePoint {
  double max_prob = 0.0;
  double cyclic_mass = 0.0;
};

std::vector<TracePoint> probability_trace(const TokenSequence& prompt, const TokenSequence& continuation,
                                          const CyclicSegment& segment, const LanguageModel& model);

enum class Placement { kInputRegion, kOutputRegion };

std::string to_string(Placement placement);

struct RepetitionExperiment {
  std::string base_prompt;
  std::string segment_text;
  std::vector<std::size_t> reps;
  Placement placement = Placement::kInputRegion;
  std::size_t samples = 8;
  std::size_t generation_length = 50;
  DecodingPolicy policy = DecodingPolicy::sampled(1.0, 0);
};

struct EntropyCurvePoint {
  std::size_t reps = 0;
  double mean_entropy = 0.0;
  // Entropy at each generation step averaged over samples.
  std::vector<double> per_step_entropy;
};

// Input placement appends the repeated segment to the user turn; output
// placement prefills it into the assistant turn. EOS is disabled so every
// sample has generation_length steps.
std::vector<EntropyCurvePoint> entropy_vs_repetition(const RepetitionExperiment& experiment,
                                                     const LanguageModel& model);

struct PowerSample {
  double t_seconds = 0.0;  // since sampler start
  double watts = 0.0;
};

// Left Riemann sum: each sample's power holds until the next timestamp, the
// last one until `end_seconds`.
double integrate_energy(std::span<const PowerSample> samples, double end_seconds);

class PowerSampler {
 public:
  virtual ~PowerSampler() = default;
  virtual void start() = 0;
  // Samples since start(); the second member is the elapsed time.
  virtual std::pair<std::vector<PowerSample>, double> stop() = 0;
};

// Constant draw sampled at a fixed interval.
class ConstantPowerSampler final : public PowerSampler {
 public:
  ConstantPowerSampler(double watts, double interval_seconds);
  void start() override;
  std::pair<std::vector<PowerSample>, double> stop() override;
  // Samples for an explicit duration, without touching the clock.
  std::vector<PowerSample> samples_for(double duration_seconds) const;

 private:
  double watts_;
  double interval_;
  std::chrono::steady_clock::time_point started_{};
};

enum class CostAxis { kInput, kOutput };

struct CostSample {
  std::size_t in_len = 0;
  std::size_t out_len = 0;
  double wall_time = 0.0;  // seconds, mean over repeats
  std::optional<double> energy;  // joules, mean over repeats
  std::size_t repeats = 1;
};

// Output axis: one-token prompt, EOS disabled, `length` generated tokens.
// Input axis: `length`-token prompt, one generated token. Runs serially.
std::vector<CostSample> profile_cost(const LanguageModel& model, std::span<const std::size_t> lengths,
                                     CostAxis axis, std::size_t repeats, PowerSampler* sampler = nullptr);

struct CostModel {
  double slope_out = 0.0;  // s / token
  double slope_in = 0.0;   // s / token
  double intercept = 0.0;  // s, output axis
  double intercept_in = 0.0;
  double r2_out = 0.0;
};

struct LineFit {
  double slope = 0.0;
  double intercept = 0.0;
  double r2 = 0.0;
};

LineFit fit_line(std::span<const double> x, std::span<const double> y);

CostModel fit_cost_model(std::span<const CostSample> samples_in, std::span<const CostSample> samples_out);

// CSV renderings (header line first) of the analysis outputs.
std::string entropy_curve_csv(std::span<const EntropyCurvePoint> curve, Placement placement);
std::string probability_trace_csv(std::span<const TracePoint> trace);
std::string attention_profile_csv(const AttentionProfile& profile);
std::string cost_samples_csv(std::span<const CostSample> samples, CostAxis axis);

}  // namespace looptrap
