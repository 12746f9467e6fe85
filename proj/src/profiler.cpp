// Copyright 2026 The looptrap Authors
// SPDX-License-Identifier: Apache-2.0

#include "looptrap/profiler.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <numeric>
#include <sstream>

#include "looptrap/errors.hpp"
#include "looptrap/eval.hpp"

namespace looptrap {

AttentionProfile attention_profile(const TokenSequence& prompt, const TokenSequence& continuation,
                                   const LanguageModel& model) {
  if (!model.capabilities().attention) throw CapabilityError(model.id() + ": adapter does not expose attention");
  if (prompt.empty() || continuation.empty()) {
    throw InvalidArgumentError("attention profile needs a prompt and at least one output token");
  }
  const AttentionTensor att = model.attention_matrix(prompt, continuation);
  AttentionProfile out;
  out.per_input_token_score.assign(prompt.size(), 0.0);
  const double count = static_cast<double>(att.layers * att.heads * continuation.size());
  for (std::size_t l = 0; l < att.layers; ++l) {
    for (std::size_t h = 0; h < att.heads; ++h) {
      for (std::size_t q = prompt.size(); q < prompt.size() + continuation.size(); ++q) {
        for (std::size_t k = 0; k < prompt.size(); ++k) out.per_input_token_score[k] += att.at(l, h, q, k);
      }
    }
  }
  for (double& s : out.per_input_token_score) s /= count;
  return out;
}

std::vector<TracePoint> probability_trace(const TokenSequence& prompt, const TokenSequence& continuation,
                                          const CyclicSegment& segment, const LanguageModel& model) {
  const std::vector<TokenId> distinct = segment.distinct();
  std::vector<TracePoint> out;
  for (const auto& dist : model.next_distributions(prompt, continuation)) {
    TracePoint p;
    p.max_prob = *std::max_element(dist.probs.begin(), dist.probs.end());
    for (TokenId t : distinct) p.cyclic_mass += dist.probs.at(static_cast<std::size_t>(t));
    p.cyclic_mass = std::min(p.cyclic_mass, 1.0);
    out.push_back(p);
  }
  return out;
}

std::string to_string(Placement placement) {
  return placement == Placement::kInputRegion ? "input_region" : "output_region";
}

std::vector<EntropyCurvePoint> entropy_vs_repetition(const RepetitionExperiment& ex, const LanguageModel& model) {
  if (ex.reps.empty()) throw InvalidArgumentError("repetition experiment needs at least one rep count");
  if (ex.samples == 0) throw InvalidArgumentError("repetition experiment needs samples >= 1");
  std::vector<EntropyCurvePoint> curve;
  for (std::size_t reps : ex.reps) {
    std::string repeated;
    for (std::size_t r = 0; r < reps; ++r) repeated += ex.segment_text;
    RenderedPrompt prompt;
    if (ex.placement == Placement::kInputRegion) {
      std::string user = ex.base_prompt;
      if (reps > 0) user += " " + repeated;
      prompt = render_chat(model.chat_template(), user, model.tokenizer());
    } else {
      prompt = render_chat_with_prefill(model.chat_template(), ex.base_prompt, repeated, model.tokenizer());
    }
    TrialOptions options;
    options.eos_enabled = false;
    const auto outcomes = run_trials(model, prompt.tokens, ex.policy, ex.samples, ex.generation_length, options);
    EntropyCurvePoint point;
    point.reps = reps;
    point.per_step_entropy.assign(ex.generation_length, 0.0);
    for (const auto& o : outcomes) {
      point.mean_entropy += mean_output_entropy(o);
      for (std::size_t i = 0; i < o.step_entropies.size(); ++i) point.per_step_entropy[i] += o.step_entropies[i];
    }
    point.mean_entropy /= static_cast<double>(outcomes.size());
    for (double& v : point.per_step_entropy) v /= static_cast<double>(outcomes.size());
    curve.push_back(std::move(point));
  }
  return curve;
}

double integrate_energy(std::span<const PowerSample> samples, double end_seconds) {
  double energy = 0.0;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const double until = i + 1 < samples.size() ? samples[i + 1].t_seconds : end_seconds;
    energy += samples[i].watts * std::max(0.0, until - samples[i].t_seconds);
  }
  return energy;
}

ConstantPowerSampler::ConstantPowerSampler(double watts, double interval_seconds)
    : watts_(watts), interval_(interval_seconds) {
  if (!(interval_seconds > 0.0)) throw InvalidArgumentError("sampling interval must be positive");
}

void ConstantPowerSampler::start() { started_ = std::chrono::steady_clock::now(); }

std::pair<std::vector<PowerSample>, double> ConstantPowerSampler::stop() {
  const double elapsed = std::chrono::duration<double>(std::chrono::steady_clock::now() - started_).count();
  return {samples_for(elapsed), elapsed};
}

std::vector<PowerSample> ConstantPowerSampler::samples_for(double duration_seconds) const {
  std::vector<PowerSample> out;
  for (std::size_t k = 0;; ++k) {
    const double t = static_cast<double>(k) * interval_;
    if (k > 0 && t >= duration_seconds) break;
    out.push_back({t, watts_});
  }
  return out;
}

std::vector<CostSample> profile_cost(const LanguageModel& model, std::span<const std::size_t> lengths,
                                     CostAxis axis, std::size_t repeats, PowerSampler* sampler) {
  if (repeats == 0) throw InvalidArgumentError("repeats must be >= 1");
  if (!std::is_sorted(lengths.begin(), lengths.end())) throw InvalidArgumentError("lengths must be ascending");
  const std::vector<bool> pool = substitution_pool_mask(model.tokenizer());
  TokenSequence fill;
  for (std::size_t t = 0; t < pool.size(); ++t) {
    if (pool[t]) fill.push_back(static_cast<TokenId>(t));
  }
  if (fill.empty()) throw EmptyPoolError("no ordinary tokens to build profiling prompts");

  std::vector<CostSample> out;
  for (std::size_t n : lengths) {
    if (n == 0) throw InvalidArgumentError("profiled lengths must be >= 1");
    CostSample s;
    s.repeats = repeats;
    TokenSequence prompt;
    std::size_t max_new = 1;
    if (axis == CostAxis::kOutput) {
      prompt = {fill.front()};
      max_new = n;
    } else {
      for (std::size_t i = 0; i < n; ++i) prompt.push_back(fill[i % fill.size()]);
    }
    s.in_len = prompt.size();
    double time_sum = 0.0;
    double energy_sum = 0.0;
    for (std::size_t r = 0; r < repeats; ++r) {
      if (sampler) sampler->start();
      const auto t0 = std::chrono::steady_clock::now();
      const TrialOutcome o = model.generate(prompt, DecodingPolicy::greedy(), max_new, false);
      const auto t1 = std::chrono::steady_clock::now();
      time_sum += std::chrono::duration<double>(t1 - t0).count();
      s.out_len = o.length;
      if (sampler) {
        auto [samples, elapsed] = sampler->stop();
        energy_sum += integrate_energy(samples, elapsed);
      }
    }
    s.wall_time = time_sum / static_cast<double>(repeats);
    if (sampler) s.energy = energy_sum / static_cast<double>(repeats);
    out.push_back(s);
  }
  return out;
}

LineFit fit_line(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size()) throw InvalidArgumentError("fit_line needs paired samples");
  if (x.size() < 3) throw InvalidArgumentError("least-squares fit needs at least 3 samples");
  const double n = static_cast<double>(x.size());
  const double mx = std::accumulate(x.begin(), x.end(), 0.0) / n;
  const double my = std::accumulate(y.begin(), y.end(), 0.0) / n;
  double sxx = 0.0, sxy = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxx += (x[i] - mx) * (x[i] - mx);
    sxy += (x[i] - mx) * (y[i] - my);
    syy += (y[i] - my) * (y[i] - my);
  }
  if (sxx == 0.0) throw InvalidArgumentError("degenerate fit: all lengths are equal");
  LineFit f;
  f.slope = sxy / sxx;
  f.intercept = my - f.slope * mx;
  double ss_res = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double e = y[i] - (f.slope * x[i] + f.intercept);
    ss_res += e * e;
  }
  f.r2 = syy == 0.0 ? 1.0 : std::clamp(1.0 - ss_res / syy, 0.0, 1.0);
  return f;
}

CostModel fit_cost_model(std::span<const CostSample> samples_in, std::span<const CostSample> samples_out) {
  auto fit = [](std::span<const CostSample> samples, bool output_axis) {
    std::vector<double> x, y;
    for (const auto& s : samples) {
      x.push_back(static_cast<double>(output_axis ? s.out_len : s.in_len));
      y.push_back(s.wall_time);
    }
    return fit_line(x, y);
  };
  const LineFit in = fit(samples_in, false);
  const LineFit out = fit(samples_out, true);
  return {out.slope, in.slope, out.intercept, in.intercept, out.r2};
}

namespace {

std::ostringstream csv_stream() {
  std::ostringstream os;
  os << std::setprecision(10);
  return os;
}

}  // namespace

std::string entropy_curve_csv(std::span<const EntropyCurvePoint> curve, Placement placement) {
  auto os = csv_stream();
  os << "placement,reps,mean_entropy\n";
  for (const auto& p : curve) os << to_string(placement) << ',' << p.reps << ',' << p.mean_entropy << '\n';
  return os.str();
}

std::string probability_trace_csv(std::span<const TracePoint> trace) {
  auto os = csv_stream();
  os << "position,max_prob,cyclic_mass\n";
  for (std::size_t i = 0; i < trace.size(); ++i) {
    os << i + 1 << ',' << trace[i].max_prob << ',' << trace[i].cyclic_mass << '\n';
  }
  return os.str();
}

std::string attention_profile_csv(const AttentionProfile& profile) {
  auto os = csv_stream();
  os << "input_position,score\n";
  for (std::size_t i = 0; i < profile.per_input_token_score.size(); ++i) {
    os << i << ',' << profile.per_input_token_score[i] << '\n';
  }
  return os.str();
}

std::string cost_samples_csv(std::span<const CostSample> samples, CostAxis axis) {
  auto os = csv_stream();
  os << "axis,in_len,out_len,wall_time_s,energy_j,repeats\n";
  for (const auto& s : samples) {
    os << (axis == CostAxis::kInput ? "input" : "output") << ',' << s.in_len << ',' << s.out_len << ','
       << s.wall_time << ',';
    if (s.energy) os << *s.energy;
    os << ',' << s.repeats << '\n';
  }
  return os.str();
}

}  // namespace looptrap
