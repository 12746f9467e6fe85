// Copyright 2026 The looptrap Authors
// SPDX-License-Identifier: Apache-2.0

#include "looptrap/loop_optimizer.hpp"

#include <algorithm>
#include <cmath>
#include <iterator>
#include <limits>
#include <numeric>
#include <sstream>

#include "looptrap/errors.hpp"

namespace looptrap {

void AttackConfig::validate() const {
  if (segment.tokens.empty()) throw ConfigError("attack.segment", "cyclic segment must be non-empty");
  if (suffix_length == 0) throw ConfigError("attack.L", "suffix length must be >= 1");
  if (segment.length() > suffix_length) {
    throw ConfigError("attack.segment", "segment length exceeds suffix length L");
  }
  if (top_k == 0) throw ConfigError("attack.K", "K must be >= 1");
  if (batch == 0) throw ConfigError("attack.B", "B must be >= 1");
  if (batch > top_k * suffix_length) throw ConfigError("attack.B", "B must not exceed K * L");
  if (teacher_horizon == 0) throw ConfigError("attack.N_opt", "teacher horizon must be >= 1");
  if (trials == 0) throw ConfigError("attack.trials", "trials must be >= 1");
  if (!(success_fraction > 0.0 && success_fraction < 1.0)) {
    throw ConfigError("attack.p", "success fraction must lie in (0, 1)");
  }
  if (probe_max_len == 0) throw ConfigError("attack.probe_max_len", "probe length must be >= 1");
  if (!(entropy_stop_threshold >= 0.0)) throw ConfigError("attack.tau", "entropy threshold must be >= 0");
  if (entropy_stop_patience == 0) throw ConfigError("attack.patience", "patience must be >= 1");
  try {
    decoding.validate();
  } catch (const InvalidArgumentError& e) {
    throw ConfigError("attack.decoding", e.what());
  }
}

std::string to_string(AttackStatus status) {
  switch (status) {
    case AttackStatus::kRunning:
      return "running";
    case AttackStatus::kSuccess:
      return "success";
    case AttackStatus::kStepBudgetExhausted:
      return "step_budget_exhausted";
    case AttackStatus::kEntropyConverged:
      return "entropy_converged";
  }
  return "unknown";
}

TokenSequence teacher_target(const CyclicSegment& segment, std::size_t length) {
  if (segment.tokens.empty()) throw InvalidArgumentError("cyclic segment must be non-empty");
  TokenSequence out(length);
  for (std::size_t k = 0; k < length; ++k) out[k] = segment.tokens[k % segment.length()];
  return out;
}

OptimizationContext build_context(std::string_view raw_input, const AdversarialSuffix& suffix,
                                  const AttackConfig& cfg, const LanguageModel& model) {
  if (!roundtrip_stable(suffix, model)) {
    throw RoundTripError("suffix does not survive decode -> encode under " + model.id());
  }
  const Tokenizer& tok = model.tokenizer();
  const ChatTemplate& tmpl = model.chat_template();
  std::string user_text(raw_input);
  user_text += tok.decode(suffix.tokens);

  OptimizationContext ctx;
  ctx.rendered_prompt = render_chat(tmpl, user_text, tok).tokens;
  std::size_t offset = 0;
  for (std::string_view piece : {std::string_view(tmpl.system_text), std::string_view(tmpl.user_prefix), raw_input}) {
    if (!piece.empty()) offset += tok.encode(piece).size();
  }
  ctx.suffix_span = {offset, offset + suffix.tokens.size()};
  if (ctx.suffix_span.end > ctx.rendered_prompt.size() ||
      !std::equal(suffix.tokens.begin(), suffix.tokens.end(),
                  ctx.rendered_prompt.begin() + static_cast<std::ptrdiff_t>(offset))) {
    throw RoundTripError("suffix tokens merge with the surrounding prompt under " + model.id());
  }
  ctx.teacher_target = teacher_target(suffix.segment, cfg.teacher_horizon);
  ctx.segment = suffix.segment;
  if (ctx.rendered_prompt.size() + ctx.teacher_target.size() > model.context_length()) {
    throw ContextOverflowError("optimization context of " +
                               std::to_string(ctx.rendered_prompt.size() + ctx.teacher_target.size()) +
                               " tokens exceeds " + model.id() + " context");
  }
  return ctx;
}

CycleLoss::CycleLoss(const CyclicSegment& segment) : tokens_(segment.distinct()) {
  if (tokens_.empty()) throw InvalidArgumentError("cycle loss needs a non-empty segment");
}

double CycleLoss::evaluate(std::span<const StepDistribution> probs,
                           std::vector<std::vector<double>>* grad) const {
  if (probs.empty()) throw InvalidArgumentError("cycle loss over zero output positions");
  const double n = static_cast<double>(probs.size());
  double total = 0.0;
  if (grad) grad->assign(probs.size(), {});
  for (std::size_t i = 0; i < probs.size(); ++i) {
    const auto& p = probs[i].probs;
    double mass = 0.0;
    for (TokenId t : tokens_) {
      if (static_cast<std::size_t>(t) >= p.size()) throw OutOfRangeError("segment token outside distribution");
      mass += p[static_cast<std::size_t>(t)];
    }
    total -= std::log(std::max(mass, kFloor));
    if (grad) {
      auto& g = (*grad)[i];
      g.assign(p.size(), 0.0);
      if (mass > kFloor) {
        for (TokenId t : tokens_) g[static_cast<std::size_t>(t)] = -1.0 / (n * mass);
      }
    }
  }
  return total / n;
}

std::string CycleLoss::wire_descriptor() const {
  std::ostringstream os;
  os << R"({"kind":"cycle","floor":)" << kFloor << R"(,"tokens":[)";
  for (std::size_t i = 0; i < tokens_.size(); ++i) os << (i ? "," : "") << tokens_[i];
  os << "]}";
  return os.str();
}

double cycle_loss(const OptimizationContext& ctx, const LanguageModel& model) {
  const auto dists = model.next_distributions(ctx.rendered_prompt, ctx.teacher_target);
  return CycleLoss(ctx.segment).evaluate(dists, nullptr);
}

std::vector<Substitution> propose_candidates(const GradientTable& grad, const AttackConfig& cfg,
                                             const std::vector<bool>& pool_mask, std::mt19937_64& rng) {
  if (grad.rows() != cfg.suffix_length) {
    throw InvalidArgumentError("gradient rows " + std::to_string(grad.rows()) + " != suffix length " +
                               std::to_string(cfg.suffix_length));
  }
  if (pool_mask.size() != grad.cols()) throw InvalidArgumentError("pool mask does not match vocabulary");
  std::vector<Substitution> pool;
  std::vector<TokenId> order;
  for (std::size_t pos = 0; pos < grad.rows(); ++pos) {
    order.clear();
    for (std::size_t t = 0; t < grad.cols(); ++t) {
      if (pool_mask[t]) order.push_back(static_cast<TokenId>(t));
    }
    const std::size_t keep = std::min(cfg.top_k, order.size());
    const auto row = static_cast<Eigen::Index>(pos);
    std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(keep), order.end(),
                      [&](TokenId a, TokenId b) {
                        const double ga = grad.values(row, a);
                        const double gb = grad.values(row, b);
                        return ga != gb ? ga < gb : a < b;
                      });
    for (std::size_t i = 0; i < keep; ++i) pool.push_back({pos, order[i]});
  }
  if (pool.empty()) throw EmptyPoolError("no substitution candidates survive filtering");
  if (cfg.batch >= pool.size()) return pool;
  std::vector<Substitution> sampled;
  sampled.reserve(cfg.batch);
  std::sample(pool.begin(), pool.end(), std::back_inserter(sampled), cfg.batch, rng);
  return sampled;
}

namespace {

struct Scored {
  double loss;
  std::ptrdiff_t index;  // -1 = incumbent
};

bool better(const Scored& a, const Scored& b) {
  return a.loss != b.loss ? a.loss < b.loss : a.index < b.index;
}

AdversarialState adopt(const AdversarialState& state, std::span<const Substitution> candidates,
                       const Scored& best, const VocabSpec& vocab) {
  AdversarialState next = state;
  if (best.index >= 0) {
    next.suffix = apply_substitution(state.suffix, candidates[static_cast<std::size_t>(best.index)], vocab);
  }
  next.loss_history.push_back(best.loss);
  next.trajectory.push_back(next.suffix.tokens);
  ++next.step;
  return next;
}

}  // namespace

AdversarialState select_candidate(const AdversarialState& state, std::span<const Substitution> candidates,
                                  const CandidateEvaluator& evaluator, const VocabSpec& vocab) {
  if (candidates.empty()) throw InvalidArgumentError("select_candidate needs at least one candidate");
  Scored best{evaluator.loss(state.suffix), -1};
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    const AdversarialSuffix cand = apply_substitution(state.suffix, candidates[i], vocab);
    if (evaluator.admissible && !evaluator.admissible(cand)) continue;
    const Scored s{evaluator.loss(cand), static_cast<std::ptrdiff_t>(i)};
    if (better(s, best)) best = s;
  }
  return adopt(state, candidates, best, vocab);
}

AdversarialState ensemble_select(const AdversarialState& state, std::span<const Substitution> candidates,
                                 std::span<const CandidateEvaluator> members, const VocabSpec& vocab) {
  if (candidates.empty()) throw InvalidArgumentError("ensemble_select needs at least one candidate");
  if (members.empty()) throw InvalidArgumentError("ensemble_select needs at least one member");
  auto total = [&](const AdversarialSuffix& s) {
    double sum = 0.0;
    for (const auto& m : members) sum += m.loss(s);
    return sum;
  };
  auto admissible = [&](const AdversarialSuffix& s) {
    return std::all_of(members.begin(), members.end(),
                       [&](const CandidateEvaluator& m) { return !m.admissible || m.admissible(s); });
  };
  Scored best{total(state.suffix), -1};
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    const AdversarialSuffix cand = apply_substitution(state.suffix, candidates[i], vocab);
    if (!admissible(cand)) continue;
    const Scored s{total(cand), static_cast<std::ptrdiff_t>(i)};
    if (better(s, best)) best = s;
  }
  return adopt(state, candidates, best, vocab);
}

namespace {

RenderedPrompt attack_prompt(const std::string& raw_input, const AdversarialSuffix& suffix,
                             const LanguageModel& model) {
  return model.render_chat(raw_input + model.decode(suffix.tokens));
}

ProbeResult probe_models(const AdversarialState& state, const AttackConfig& cfg,
                         std::span<const ModelHandle> models) {
  ProbeResult r;
  double len_sum = 0.0;
  for (const auto& model : models) {
    const auto prompt = attack_prompt(state.raw_input, state.suffix, *model);
    const auto outcomes = run_trials(*model, prompt.tokens, cfg.decoding, cfg.trials, cfg.probe_max_len);
    for (const auto& o : outcomes) {
      r.reached += o.reached_max ? 1 : 0;
      len_sum += static_cast<double>(o.length);
    }
    r.trials += outcomes.size();
  }
  r.mean_length = r.trials ? len_sum / static_cast<double>(r.trials) : 0.0;
  r.success = exceeds_success_fraction(r.reached, r.trials, cfg.success_fraction);
  return r;
}

double rollout_entropy(const AdversarialState& state, const AttackConfig& cfg,
                       std::span<const ModelHandle> models) {
  double sum = 0.0;
  for (const auto& model : models) {
    const auto prompt = attack_prompt(state.raw_input, state.suffix, *model);
    const TrialOutcome o = model->generate(prompt.tokens, DecodingPolicy::greedy(), cfg.probe_max_len, true);
    // An empty rollout carries no evidence of a loop.
    sum += o.step_entropies.empty() ? std::numeric_limits<double>::infinity() : mean_output_entropy(o);
  }
  return sum / static_cast<double>(models.size());
}

// Shared loop skeleton; `gradient` and `select` carry the single-model or
// ensemble specifics.
template <typename GradientFn, typename SelectFn>
AdversarialState run_attack(std::string_view raw_input, const AttackConfig& cfg,
                            std::span<const ModelHandle> models, GradientFn gradient, SelectFn select,
                            double initial_loss) {
  const LanguageModel& lead = *models.front();
  AdversarialState state;
  state.raw_input = std::string(raw_input);
  state.suffix = init_suffix(cfg.segment, cfg.suffix_length, lead.vocab());
  state.loss_history.push_back(initial_loss);
  state.trajectory.push_back(state.suffix.tokens);
  if (cfg.max_steps == 0) {
    state.status = AttackStatus::kStepBudgetExhausted;
    return state;
  }
  state.last_probe = probe_models(state, cfg, models);
  if (state.last_probe.success) {
    state.status = AttackStatus::kSuccess;
    return state;
  }
  const std::vector<bool> pool_mask = substitution_pool_mask(lead.tokenizer());
  std::mt19937_64 rng(cfg.seed);
  std::size_t low_entropy_streak = 0;
  while (state.step < cfg.max_steps) {
    const GradientTable grad = gradient(state.suffix);
    const std::vector<Substitution> candidates = propose_candidates(grad, cfg, pool_mask, rng);
    state = select(state, candidates);
    state.last_probe = probe_models(state, cfg, models);
    if (state.last_probe.success) {
      state.status = AttackStatus::kSuccess;
      return state;
    }
    if (rollout_entropy(state, cfg, models) < cfg.entropy_stop_threshold) {
      if (++low_entropy_streak >= cfg.entropy_stop_patience) {
        state.status = AttackStatus::kEntropyConverged;
        return state;
      }
    } else {
      low_entropy_streak = 0;
    }
  }
  state.status = AttackStatus::kStepBudgetExhausted;
  return state;
}

CandidateEvaluator evaluator_for(std::string_view raw_input, const AttackConfig& cfg,
                                 const LanguageModel& model) {
  CandidateEvaluator ev;
  ev.admissible = [&model](const AdversarialSuffix& s) { return roundtrip_stable(s, model); };
  ev.loss = [raw = std::string(raw_input), &cfg, &model](const AdversarialSuffix& s) {
    return cycle_loss(build_context(raw, s, cfg, model), model);
  };
  return ev;
}

}  // namespace

ProbeResult success_probe(const AdversarialState& state, const AttackConfig& cfg,
                          const LanguageModel& model) {
  // Non-owning handle; the probe does not outlive `model`.
  const ModelHandle handle(std::shared_ptr<const LanguageModel>{}, &model);
  return probe_models(state, cfg, std::span<const ModelHandle>(&handle, 1));
}

AdversarialState optimize(std::string_view raw_input, const AttackConfig& cfg, const LanguageModel& model) {
  cfg.validate();
  if (!model.capabilities().differentiable) {
    throw CapabilityError(model.id() + ": white-box optimization needs a differentiable adapter");
  }
  const ModelHandle handle(std::shared_ptr<const LanguageModel>{}, &model);
  const CandidateEvaluator ev = evaluator_for(raw_input, cfg, model);
  const CycleLoss loss(cfg.segment);
  auto gradient = [&](const AdversarialSuffix& s) {
    const OptimizationContext ctx = build_context(raw_input, s, cfg, model);
    return model.one_hot_gradient(ctx.rendered_prompt, ctx.suffix_span, ctx.teacher_target, loss);
  };
  auto select = [&](const AdversarialState& st, std::span<const Substitution> cands) {
    return select_candidate(st, cands, ev, model.vocab());
  };
  const double initial = ev.loss(init_suffix(cfg.segment, cfg.suffix_length, model.vocab()));
  return run_attack(raw_input, cfg, std::span<const ModelHandle>(&handle, 1), gradient, select, initial);
}

EnsembleHandle check_token_alignment(std::vector<ModelHandle> members) {
  if (members.empty()) throw InvalidArgumentError("ensemble needs at least one member");
  const VocabSpec& ref = members.front()->vocab();
  for (std::size_t j = 1; j < members.size(); ++j) {
    const VocabSpec& v = members[j]->vocab();
    if (v.size != ref.size || v.fingerprint != ref.fingerprint) {
      throw AlignmentError("ensemble members 0 (" + members.front()->id() + ") and " + std::to_string(j) +
                           " (" + members[j]->id() + ") do not share a token-to-index mapping");
    }
  }
  EnsembleHandle handle;
  handle.shared_vocab = ref;
  handle.members = std::move(members);
  return handle;
}

GradientTable ensemble_gradient(std::span<const OptimizationContext> contexts, const EnsembleHandle& ensemble) {
  if (contexts.size() != ensemble.members.size()) {
    throw InvalidArgumentError("one optimization context per ensemble member is required");
  }
  GradientTable sum;
  for (std::size_t j = 0; j < contexts.size(); ++j) {
    const auto& ctx = contexts[j];
    const LanguageModel& m = *ensemble.members[j];
    GradientTable g = m.one_hot_gradient(ctx.rendered_prompt, ctx.suffix_span, ctx.teacher_target,
                                         CycleLoss(ctx.segment));
    if (j == 0) {
      sum = std::move(g);
      continue;
    }
    if (g.values.rows() != sum.values.rows() || g.values.cols() != sum.values.cols()) {
      throw InvalidArgumentError("ensemble gradient shape mismatch at member " + std::to_string(j));
    }
    sum.values += g.values;
    sum.loss_at_point += g.loss_at_point;
  }
  return sum;
}

AdversarialState optimize_ensemble(std::string_view raw_input, const AttackConfig& cfg,
                                   const EnsembleHandle& ensemble) {
  cfg.validate();
  if (ensemble.members.empty()) throw InvalidArgumentError("ensemble needs at least one member");
  for (const auto& m : ensemble.members) {
    if (!m->capabilities().differentiable) {
      throw CapabilityError(m->id() + ": ensemble members must be differentiable");
    }
  }
  std::vector<CandidateEvaluator> evaluators;
  for (const auto& m : ensemble.members) evaluators.push_back(evaluator_for(raw_input, cfg, *m));
  auto gradient = [&](const AdversarialSuffix& s) {
    std::vector<OptimizationContext> contexts;
    for (const auto& m : ensemble.members) contexts.push_back(build_context(raw_input, s, cfg, *m));
    return ensemble_gradient(contexts, ensemble);
  };
  auto select = [&](const AdversarialState& st, std::span<const Substitution> cands) {
    return ensemble_select(st, cands, evaluators, ensemble.shared_vocab);
  };
  const AdversarialSuffix initial_suffix = init_suffix(cfg.segment, cfg.suffix_length, ensemble.shared_vocab);
  double initial = 0.0;
  for (const auto& ev : evaluators) initial += ev.loss(initial_suffix);
  return run_attack(raw_input, cfg, ensemble.members, gradient, select, initial);
}

}  // namespace looptrap
