// Copyright 2026 The looptrap Authors
// SPDX-License-Identifier: Apache-2.0

#include "looptrap/workbench.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <ctime>
#include <iomanip>
#include <random>
#include <set>
#include <sstream>
#include <thread>

#include "looptrap/digest.hpp"
#include "looptrap/errors.hpp"
#include "looptrap/eval.hpp"
#include "looptrap/remote.hpp"
#include "looptrap/suffix.hpp"
#include "looptrap/toy_transformer.hpp"

namespace looptrap {

using nlohmann::json;
namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Commands

namespace {

constexpr std::pair<Command, std::string_view> kCommands[] = {
    {Command::kAttack, "attack"},   {Command::kEval, "eval"},         {Command::kTransfer, "transfer"},
    {Command::kDefend, "defend"},   {Command::kProfile, "profile"},   {Command::kMotivate, "motivate"},
    {Command::kReport, "report"},
};

}  // namespace

std::string to_string(Command command) {
  for (const auto& [c, name] : kCommands) {
    if (c == command) return std::string(name);
  }
  return "unknown";
}

Command parse_command(std::string_view name) {
  for (const auto& [c, n] : kCommands) {
    if (n == name) return c;
  }
  throw ConfigError("command", "unknown command '" + std::string(name) + "'");
}

// ---------------------------------------------------------------------------
// Config parsing

namespace {

std::string join_key(const std::string& path, const std::string& key) { return path.empty() ? key : path + "." + key; }

// Object view that rejects unknown keys and reports typed lookups by path.
class Section {
 public:
  Section(const json& j, std::string path, std::set<std::string> allowed) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(path_, "expected an object");
    for (const auto& [key, _] : j_.items()) {
      if (!allowed.contains(key)) throw ConfigError(join_key(path_, key), "unknown key");
    }
  }

  bool has(const std::string& key) const { return j_.contains(key) && !j_.at(key).is_null(); }
  std::string key(const std::string& k) const { return join_key(path_, k); }
  const json& raw(const std::string& k) const { return j_.at(k); }

  std::optional<std::string> string(const std::string& k) const {
    if (!has(k)) return std::nullopt;
    if (!j_.at(k).is_string()) throw ConfigError(key(k), "expected a string");
    return j_.at(k).get<std::string>();
  }
  std::optional<bool> boolean(const std::string& k) const {
    if (!has(k)) return std::nullopt;
    if (!j_.at(k).is_boolean()) throw ConfigError(key(k), "expected true or false");
    return j_.at(k).get<bool>();
  }
  std::optional<double> number(const std::string& k) const {
    if (!has(k)) return std::nullopt;
    if (!j_.at(k).is_number()) throw ConfigError(key(k), "expected a number");
    return j_.at(k).get<double>();
  }
  std::optional<std::uint64_t> count(const std::string& k) const {
    if (!has(k)) return std::nullopt;
    return as_count(j_.at(k), key(k));
  }
  std::optional<std::vector<std::string>> strings(const std::string& k) const {
    if (!has(k)) return std::nullopt;
    const json& a = j_.at(k);
    if (!a.is_array()) throw ConfigError(key(k), "expected a list of strings");
    std::vector<std::string> out;
    for (std::size_t i = 0; i < a.size(); ++i) {
      if (!a[i].is_string()) throw ConfigError(key(k) + "[" + std::to_string(i) + "]", "expected a string");
      out.push_back(a[i].get<std::string>());
    }
    return out;
  }
  std::optional<std::vector<std::size_t>> counts(const std::string& k) const {
    if (!has(k)) return std::nullopt;
    const json& a = j_.at(k);
    if (!a.is_array()) throw ConfigError(key(k), "expected a list of integers");
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < a.size(); ++i) out.push_back(as_count(a[i], key(k) + "[" + std::to_string(i) + "]"));
    return out;
  }

  static std::uint64_t as_count(const json& v, const std::string& key) {
    if (v.is_number_unsigned()) return v.get<std::uint64_t>();
    if (v.is_number_integer() && v.get<std::int64_t>() >= 0) return static_cast<std::uint64_t>(v.get<std::int64_t>());
    throw ConfigError(key, "expected a non-negative integer");
  }

 private:
  const json& j_;
  std::string path_;
};

DecodingPolicy parse_policy(const json& j, const std::string& path) {
  Section s(j, path, {"kind", "temperature", "beam_width"});
  const std::string kind = s.string("kind").value_or("temperature");
  DecodingPolicy p;
  if (kind == "greedy") {
    p = DecodingPolicy::greedy();
  } else if (kind == "beam") {
    p = DecodingPolicy::beam(s.count("beam_width").value_or(4));
  } else if (kind == "temperature") {
    p = DecodingPolicy::sampled(s.number("temperature").value_or(0.6), 0);
  } else {
    throw ConfigError(s.key("kind"), "expected greedy, beam or temperature");
  }
  try {
    p.validate();
  } catch (const InvalidArgumentError& e) {
    throw ConfigError(path, e.what());
  }
  return p;
}

json policy_json(const DecodingPolicy& p) {
  switch (p.kind) {
    case DecodingPolicy::Kind::kGreedy:
      return {{"kind", "greedy"}};
    case DecodingPolicy::Kind::kBeam:
      return {{"kind", "beam"}, {"beam_width", p.beam_width}};
    case DecodingPolicy::Kind::kTemperature:
      return {{"kind", "temperature"}, {"temperature", p.temperature}};
  }
  return {};
}

fs::path resolve_path(const std::string& p, const fs::path& base) {
  fs::path path(p);
  if (path.is_relative()) path = base / path;
  return path.lexically_normal();
}

const std::set<std::string>& methods_for(Command c) {
  static const std::set<std::string> standard{"normal", "special", "loopllm"};
  static const std::set<std::string> transfer{"normal", "special", "loopllm-t"};
  return c == Command::kTransfer ? transfer : standard;
}

std::vector<std::string> default_methods(Command c) {
  switch (c) {
    case Command::kAttack:
      return {"loopllm"};
    case Command::kEval:
      return {"normal", "special"};
    case Command::kTransfer:
      return {"loopllm-t"};
    case Command::kDefend:
      return {"normal", "loopllm"};
    default:
      return {};
  }
}

bool needs_dataset(Command c) {
  return c == Command::kAttack || c == Command::kEval || c == Command::kTransfer || c == Command::kDefend;
}

json canonical_json(const RunConfig& c) {
  json j;
  j["command"] = to_string(c.command);
  j["models"] = c.models;
  j["surrogates"] = c.surrogates;
  j["dataset"] = c.dataset.empty() ? json(nullptr) : json(c.dataset.string());
  j["output_dir"] = c.output_dir.empty() ? json(nullptr) : json(c.output_dir.string());
  j["seed"] = c.seed;
  j["workers"] = c.workers;
  const AttackConfig& a = c.attack;
  j["attack"] = {{"L", a.suffix_length},
                 {"K", a.top_k},
                 {"B", a.batch},
                 {"max_steps", a.max_steps},
                 {"N_opt", a.teacher_horizon},
                 {"trials", a.trials},
                 {"p", a.success_fraction},
                 {"probe_max_len", a.probe_max_len},
                 {"tau", a.entropy_stop_threshold},
                 {"patience", a.entropy_stop_patience},
                 {"decoding", policy_json(a.decoding)},
                 {"segment", c.segment_text},
                 {"segment_length", c.segment_length ? json(*c.segment_length) : json(nullptr)}};
  const DefenseConfig& d = c.defense;
  j["defense"] = {{"repeat", {{"r", d.repeat_r ? json(*d.repeat_r) : json(nullptr)}}},
                  {"entropy",
                   {{"w", d.entropy_window ? json(*d.entropy_window) : json(nullptr)}, {"tau", d.entropy_tau}}},
                  {"ppl", {{"threshold", d.ppl_threshold ? json(*d.ppl_threshold) : json(nullptr)}}}};
  j["eval"] = {{"max_len", c.eval.max_len}, {"methods", c.eval.methods}, {"prompt_ppl", c.eval.prompt_ppl}};
  std::vector<std::string> axes;
  for (CostAxis ax : c.profile.axes) axes.push_back(ax == CostAxis::kInput ? "input" : "output");
  j["profile"] = {{"lengths", c.profile.lengths},
                  {"repeats", c.profile.repeats},
                  {"axes", axes},
                  {"power_watts", c.profile.power_watts ? json(*c.profile.power_watts) : json(nullptr)},
                  {"power_interval", c.profile.power_interval}};
  j["motivate"] = {{"prompt", c.motivate.prompt},
                   {"segment", c.motivate.segment},
                   {"reps", c.motivate.reps},
                   {"samples", c.motivate.samples},
                   {"generation_length", c.motivate.generation_length},
                   {"temperature", c.motivate.temperature}};
  std::vector<std::string> inputs;
  for (const auto& p : c.report_inputs) inputs.push_back(p.string());
  j["report"] = {{"inputs", inputs}};
  return j;
}

void refresh_digest(RunConfig& c) {
  c.canonical = canonical_json(c).dump(2) + "\n";
  c.digest = sha256_hex(c.canonical);
}

}  // namespace

RunConfig parse_config(std::string_view text, const fs::path& base_dir) {
  json root;
  try {
    root = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError("", std::string("config is not valid JSON: ") + e.what());
  }
  Section top(root, "",
              {"command", "models", "surrogates", "dataset", "output_dir", "seed", "workers", "attack", "defense",
               "eval", "profile", "motivate", "report"});
  RunConfig c;
  c.source_text = std::string(text);
  const auto command = top.string("command");
  if (!command) throw ConfigError("command", "required");
  c.command = parse_command(*command);
  c.models = top.strings("models").value_or(std::vector<std::string>{});
  c.surrogates = top.strings("surrogates").value_or(std::vector<std::string>{});
  if (auto d = top.string("dataset")) c.dataset = resolve_path(*d, base_dir);
  if (auto o = top.string("output_dir")) c.output_dir = resolve_path(*o, base_dir);
  c.seed = top.count("seed").value_or(0);
  c.workers = top.count("workers").value_or(1);
  if (c.workers == 0) throw ConfigError("workers", "must be >= 1");

  AttackConfig& a = c.attack;
  if (top.has("attack")) {
    Section s(top.raw("attack"), "attack",
              {"L", "K", "B", "max_steps", "N_opt", "trials", "p", "probe_max_len", "tau", "patience", "decoding",
               "segment", "segment_length"});
    a.suffix_length = s.count("L").value_or(a.suffix_length);
    a.top_k = s.count("K").value_or(a.top_k);
    a.batch = s.count("B").value_or(a.batch);
    a.max_steps = s.count("max_steps").value_or(a.max_steps);
    a.teacher_horizon = s.count("N_opt").value_or(a.teacher_horizon);
    a.trials = s.count("trials").value_or(a.trials);
    a.success_fraction = s.number("p").value_or(a.success_fraction);
    a.probe_max_len = s.count("probe_max_len").value_or(a.probe_max_len);
    a.entropy_stop_threshold = s.number("tau").value_or(a.entropy_stop_threshold);
    a.entropy_stop_patience = s.count("patience").value_or(a.entropy_stop_patience);
    if (s.has("decoding")) a.decoding = parse_policy(s.raw("decoding"), "attack.decoding");
    c.segment_text = s.string("segment").value_or(c.segment_text);
    if (auto n = s.count("segment_length")) c.segment_length = *n;
  }
  if (c.segment_text.empty() && !c.segment_length) throw ConfigError("attack.segment", "must be non-empty");
  if (c.segment_length && (*c.segment_length == 0 || *c.segment_length > a.suffix_length)) {
    throw ConfigError("attack.segment_length", "must lie in [1, L]");
  }
  {
    // The segment is tokenized per model at run time; validate the rest now.
    AttackConfig probe = a;
    probe.segment.tokens = {0};
    probe.validate();
  }

  DefenseConfig& d = c.defense;
  if (top.has("defense")) {
    Section s(top.raw("defense"), "defense", {"repeat", "entropy", "ppl"});
    if (s.has("repeat")) {
      Section r(s.raw("repeat"), "defense.repeat", {"r"});
      if (auto v = r.count("r")) d.repeat_r = *v;
    }
    if (s.has("entropy")) {
      Section e(s.raw("entropy"), "defense.entropy", {"w", "tau"});
      if (auto v = e.count("w")) d.entropy_window = *v;
      d.entropy_tau = e.number("tau").value_or(d.entropy_tau);
    }
    if (s.has("ppl")) {
      Section p(s.raw("ppl"), "defense.ppl", {"threshold"});
      if (auto v = p.number("threshold")) d.ppl_threshold = *v;
    }
  }
  d.validate();

  if (top.has("eval")) {
    Section s(top.raw("eval"), "eval", {"max_len", "methods", "prompt_ppl"});
    c.eval.max_len = s.count("max_len").value_or(c.eval.max_len);
    c.eval.methods = s.strings("methods").value_or(std::vector<std::string>{});
    c.eval.prompt_ppl = s.boolean("prompt_ppl").value_or(c.eval.prompt_ppl);
  }
  if (c.eval.max_len == 0) throw ConfigError("eval.max_len", "must be >= 1");
  if (c.eval.methods.empty()) c.eval.methods = default_methods(c.command);
  for (std::size_t i = 0; i < c.eval.methods.size(); ++i) {
    if (!methods_for(c.command).contains(c.eval.methods[i])) {
      throw ConfigError("eval.methods[" + std::to_string(i) + "]",
                        "method '" + c.eval.methods[i] + "' is not available for " + to_string(c.command));
    }
  }

  if (top.has("profile")) {
    Section s(top.raw("profile"), "profile", {"lengths", "repeats", "axes", "power_watts", "power_interval"});
    c.profile.lengths = s.counts("lengths").value_or(std::vector<std::size_t>{});
    c.profile.repeats = s.count("repeats").value_or(c.profile.repeats);
    if (auto axes = s.strings("axes")) {
      c.profile.axes.clear();
      for (std::size_t i = 0; i < axes->size(); ++i) {
        const std::string& ax = (*axes)[i];
        if (ax == "input") {
          c.profile.axes.push_back(CostAxis::kInput);
        } else if (ax == "output") {
          c.profile.axes.push_back(CostAxis::kOutput);
        } else {
          throw ConfigError("profile.axes[" + std::to_string(i) + "]", "expected input or output");
        }
      }
    }
    c.profile.power_watts = s.number("power_watts");
    c.profile.power_interval = s.number("power_interval").value_or(c.profile.power_interval);
  }
  if (c.profile.lengths.empty()) {
    for (std::size_t n = 32; n <= 512; n += 32) c.profile.lengths.push_back(n);
  }
  if (!std::is_sorted(c.profile.lengths.begin(), c.profile.lengths.end()) ||
      std::find(c.profile.lengths.begin(), c.profile.lengths.end(), 0) != c.profile.lengths.end()) {
    throw ConfigError("profile.lengths", "must be ascending positive integers");
  }
  if (c.profile.repeats == 0) throw ConfigError("profile.repeats", "must be >= 1");
  if (c.profile.power_watts && !(*c.profile.power_watts >= 0.0)) throw ConfigError("profile.power_watts", "must be >= 0");
  if (!(c.profile.power_interval > 0.0)) throw ConfigError("profile.power_interval", "must be > 0");

  if (top.has("motivate")) {
    Section s(top.raw("motivate"), "motivate",
              {"prompt", "segment", "reps", "samples", "generation_length", "temperature"});
    c.motivate.prompt = s.string("prompt").value_or("");
    c.motivate.segment = s.string("segment").value_or(c.motivate.segment);
    c.motivate.reps = s.counts("reps").value_or(c.motivate.reps);
    c.motivate.samples = s.count("samples").value_or(c.motivate.samples);
    c.motivate.generation_length = s.count("generation_length").value_or(c.motivate.generation_length);
    c.motivate.temperature = s.number("temperature").value_or(c.motivate.temperature);
  }
  if (c.motivate.segment.empty()) throw ConfigError("motivate.segment", "must be non-empty");
  if (c.motivate.reps.empty()) throw ConfigError("motivate.reps", "must be non-empty");
  if (c.motivate.samples == 0) throw ConfigError("motivate.samples", "must be >= 1");
  if (c.motivate.generation_length == 0) throw ConfigError("motivate.generation_length", "must be >= 1");
  if (!(c.motivate.temperature > 0.0)) throw ConfigError("motivate.temperature", "must be > 0");

  if (top.has("report")) {
    Section s(top.raw("report"), "report", {"inputs"});
    for (const auto& p : s.strings("inputs").value_or(std::vector<std::string>{})) {
      c.report_inputs.push_back(resolve_path(p, base_dir));
    }
  }

  // Cross-field requirements and referenced paths.
  const ModelRegistry registry;
  if (c.command != Command::kReport && c.models.empty()) throw ConfigError("models", "at least one model is required");
  for (std::size_t i = 0; i < c.models.size(); ++i) registry.check(c.models[i], "models[" + std::to_string(i) + "]");
  for (std::size_t i = 0; i < c.surrogates.size(); ++i) {
    registry.check(c.surrogates[i], "surrogates[" + std::to_string(i) + "]");
  }
  if (c.command == Command::kTransfer && c.surrogates.empty()) {
    throw ConfigError("surrogates", "transfer needs at least one surrogate model");
  }
  if (needs_dataset(c.command) || (c.command == Command::kMotivate && c.motivate.prompt.empty())) {
    if (c.dataset.empty()) throw ConfigError("dataset", "required for " + to_string(c.command));
  }
  if (!c.dataset.empty() && !fs::is_regular_file(c.dataset)) {
    throw ConfigError("dataset", "file not found: " + c.dataset.string());
  }
  if (c.command == Command::kDefend && !c.defense.any_streaming() && !c.defense.ppl_threshold) {
    throw ConfigError("defense", "defend needs at least one of defense.repeat.r, defense.entropy.w, defense.ppl.threshold");
  }
  if (c.command == Command::kReport) {
    if (c.report_inputs.empty()) throw ConfigError("report.inputs", "at least one results file is required");
    for (std::size_t i = 0; i < c.report_inputs.size(); ++i) {
      if (!fs::is_regular_file(c.report_inputs[i])) {
        throw ConfigError("report.inputs[" + std::to_string(i) + "]", "file not found: " + c.report_inputs[i].string());
      }
    }
  }
  refresh_digest(c);
  return c;
}

RunConfig load_config(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("", "cannot open config file " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_config(buf.str(), fs::absolute(path).parent_path());
}

void apply_overrides(RunConfig& cfg, const ConfigOverrides& o) {
  if (o.output_dir) cfg.output_dir = fs::absolute(*o.output_dir).lexically_normal();
  if (o.seed) cfg.seed = *o.seed;
  if (o.workers) {
    if (*o.workers == 0) throw ConfigError("workers", "must be >= 1");
    cfg.workers = *o.workers;
  }
  refresh_digest(cfg);
}

fs::path resolve_output_dir(const RunConfig& cfg) {
  if (!cfg.output_dir.empty()) return cfg.output_dir;
  const char* root = std::getenv("LOOPTRAP_OUTPUT_ROOT");
  const fs::path base = (root && *root) ? fs::path(root) : fs::path("runs");
  return fs::absolute(base / (to_string(cfg.command) + "-" + cfg.digest.substr(0, 12))).lexically_normal();
}

// ---------------------------------------------------------------------------
// Model registry

namespace {

struct ModelSpec {
  std::string family;
  std::map<std::string, std::string> params;
};

ModelSpec parse_model_spec(const std::string& id, const std::string& key) {
  ModelSpec spec;
  const auto colon = id.find(':');
  spec.family = id.substr(0, colon);
  if (colon == std::string::npos) return spec;
  std::stringstream rest(id.substr(colon + 1));
  std::string item;
  while (std::getline(rest, item, ',')) {
    const auto eq = item.find('=');
    if (eq == std::string::npos || eq == 0 || eq + 1 == item.size()) {
      throw ConfigError(key, "malformed model parameter '" + item + "' in '" + id + "'");
    }
    spec.params[item.substr(0, eq)] = item.substr(eq + 1);
  }
  return spec;
}

double param_number(const ModelSpec& spec, const std::string& name, double fallback, const std::string& key) {
  const auto it = spec.params.find(name);
  if (it == spec.params.end()) return fallback;
  try {
    std::size_t used = 0;
    const double v = std::stod(it->second, &used);
    if (used != it->second.size() || !std::isfinite(v)) throw std::invalid_argument("trailing");
    return v;
  } catch (const std::exception&) {
    throw ConfigError(key, "model parameter " + name + " is not a number: '" + it->second + "'");
  }
}

std::size_t param_count(const ModelSpec& spec, const std::string& name, std::size_t fallback, const std::string& key) {
  const double v = param_number(spec, name, static_cast<double>(fallback), key);
  if (v < 0 || v != std::floor(v)) throw ConfigError(key, "model parameter " + name + " must be a non-negative integer");
  return static_cast<std::size_t>(v);
}

const std::set<std::string> kToyParams{"seed", "width", "heads", "blocks", "context", "mlp", "vocab"};
const std::set<std::string> kLoopParams{"match", "region", "copy", "frequency", "eos_bias", "context", "vocab"};

bool is_http(const std::string& id) { return id.rfind("http://", 0) == 0 || id.rfind("https://", 0) == 0; }

}  // namespace

ModelRegistry::ModelRegistry() = default;

void ModelRegistry::add(std::string name, Factory factory) { named_[std::move(name)] = std::move(factory); }

void ModelRegistry::check(const std::string& id, const std::string& key) const {
  if (named_.contains(id) || is_http(id)) return;
  const ModelSpec spec = parse_model_spec(id, key);
  const std::set<std::string>* allowed = nullptr;
  if (spec.family == "toy") allowed = &kToyParams;
  if (spec.family == "toy-loop") allowed = &kLoopParams;
  if (!allowed) throw ConfigError(key, "unknown model '" + id + "' (expected toy, toy-loop or http://host:port)");
  for (const auto& [name, _] : spec.params) {
    if (!allowed->contains(name)) throw ConfigError(key, "unknown parameter '" + name + "' for " + spec.family);
  }
  if (spec.family == "toy") {
    const std::size_t width = param_count(spec, "width", 32, key);
    const std::size_t heads = param_count(spec, "heads", 2, key);
    if (heads == 0 || width == 0 || width % heads) throw ConfigError(key, "width must be a positive multiple of heads");
    if (param_count(spec, "blocks", 2, key) == 0) throw ConfigError(key, "blocks must be >= 1");
    if (param_count(spec, "context", 256, key) < 2) throw ConfigError(key, "context must be >= 2");
    param_count(spec, "mlp", 128, key);
    param_count(spec, "seed", 0, key);
    const std::size_t vocab = param_count(spec, "vocab", 64, key);
    if (vocab <= ToyVocabulary::kSpecialCount || vocab > ToyVocabulary::max_size()) {
      throw ConfigError(key, "vocab must lie in (" + std::to_string(ToyVocabulary::kSpecialCount) + ", " +
                                 std::to_string(ToyVocabulary::max_size()) + "]");
    }
  } else {
    for (const char* name : {"match", "region", "copy", "frequency", "eos_bias"}) param_number(spec, name, 0.0, key);
    if (param_count(spec, "context", 512, key) < 2) throw ConfigError(key, "context must be >= 2");
    const std::size_t vocab = param_count(spec, "vocab", 64, key);
    if (vocab <= ToyVocabulary::kSpecialCount || vocab > ToyVocabulary::max_size()) {
      throw ConfigError(key, "vocab out of range");
    }
  }
}

ModelHandle ModelRegistry::resolve(const std::string& id) const {
  if (const auto it = named_.find(id); it != named_.end()) return it->second(id);
  if (is_http(id)) return std::make_shared<RemoteModel>(id);
  check(id, "model");
  const ModelSpec spec = parse_model_spec(id, "model");
  if (spec.family == "toy") {
    ToyTransformerConfig cfg;
    cfg.seed = param_count(spec, "seed", cfg.seed, "model");
    cfg.width = param_count(spec, "width", cfg.width, "model");
    cfg.heads = param_count(spec, "heads", cfg.heads, "model");
    cfg.blocks = param_count(spec, "blocks", cfg.blocks, "model");
    cfg.context = param_count(spec, "context", cfg.context, "model");
    cfg.mlp_hidden = param_count(spec, "mlp", cfg.mlp_hidden, "model");
    cfg.vocab_size = param_count(spec, "vocab", cfg.vocab_size, "model");
    return std::make_shared<ToyTransformer>(cfg, id);
  }
  LoopProneOptions o;
  o.match_score = param_number(spec, "match", o.match_score, "model");
  o.region_score = param_number(spec, "region", o.region_score, "model");
  o.copy_gain = param_number(spec, "copy", o.copy_gain, "model");
  o.frequency_gain = param_number(spec, "frequency", o.frequency_gain, "model");
  o.eos_bias = param_number(spec, "eos_bias", o.eos_bias, "model");
  o.context = param_count(spec, "context", o.context, "model");
  o.vocab_size = param_count(spec, "vocab", o.vocab_size, "model");
  return make_loop_prone_model(o, id);
}

// ---------------------------------------------------------------------------
// Records

std::size_t RunRecord::error_count() const {
  return static_cast<std::size_t>(
      std::count_if(inputs.begin(), inputs.end(), [](const InputRecord& r) { return r.error.has_value(); }));
}

namespace {

template <class T>
json optional_json(const std::optional<T>& v) {
  return v ? json(*v) : json(nullptr);
}

template <class T>
std::optional<T> optional_from(const json& j, const char* key) {
  if (!j.contains(key) || j.at(key).is_null()) return std::nullopt;
  return j.at(key).get<T>();
}

}  // namespace

json to_json(const InputRecord& r) {
  json trials = json::array();
  for (const auto& t : r.trials) {
    trials.push_back({{"length", t.length},
                      {"reached_max", t.reached_max},
                      {"halted", t.halted},
                      {"seed", t.seed},
                      {"mean_entropy", t.mean_entropy},
                      {"halt_reason", t.halt_reason}});
  }
  json error = nullptr;
  if (r.error) error = {{"type", r.error_type.value_or("Error")}, {"message", *r.error}};
  return {{"kind", "input"},
          {"run_id", r.run_id},
          {"config_digest", r.config_digest},
          {"command", r.command},
          {"model", r.model},
          {"method", r.method},
          {"defense", r.defense},
          {"prompt_id", r.prompt_id},
          {"prompt", r.prompt},
          {"user_text", r.user_text},
          {"suffix_text", r.suffix_text},
          {"suffix_tokens", r.suffix_tokens},
          {"loss_history", r.loss_history},
          {"attack_status", r.attack_status},
          {"attack_steps", r.attack_steps},
          {"max_len", r.max_len},
          {"success_fraction", r.success_fraction},
          {"trials", trials},
          {"avg_len", r.avg_len},
          {"reached_fraction", r.reached_fraction},
          {"success", r.success},
          {"mean_entropy", r.mean_entropy},
          {"prompt_ppl", optional_json(r.prompt_ppl)},
          {"gate", optional_json(r.gate)},
          {"error", error},
          {"timestamp", r.timestamp}};
}

json to_json(const CurveRecord& r) {
  return {{"kind", "curve"},          {"run_id", r.run_id}, {"config_digest", r.config_digest},
          {"command", r.command},     {"model", r.model},   {"name", r.name},
          {"csv", r.csv},             {"timestamp", r.timestamp}};
}

InputRecord input_record_from_json(const json& j) {
  InputRecord r;
  r.run_id = j.at("run_id").get<std::string>();
  r.config_digest = j.at("config_digest").get<std::string>();
  r.command = j.at("command").get<std::string>();
  r.model = j.at("model").get<std::string>();
  r.method = j.at("method").get<std::string>();
  r.defense = j.at("defense").get<std::string>();
  r.prompt_id = j.at("prompt_id").get<std::size_t>();
  r.prompt = j.at("prompt").get<std::string>();
  r.user_text = j.at("user_text").get<std::string>();
  r.suffix_text = j.at("suffix_text").get<std::string>();
  r.suffix_tokens = j.at("suffix_tokens").get<TokenSequence>();
  r.loss_history = j.at("loss_history").get<std::vector<double>>();
  r.attack_status = j.at("attack_status").get<std::string>();
  r.attack_steps = j.at("attack_steps").get<std::size_t>();
  r.max_len = j.at("max_len").get<std::size_t>();
  r.success_fraction = j.at("success_fraction").get<double>();
  for (const auto& t : j.at("trials")) {
    r.trials.push_back({t.at("length").get<std::size_t>(), t.at("reached_max").get<bool>(), t.at("halted").get<bool>(),
                        t.at("seed").get<std::uint64_t>(), t.at("mean_entropy").get<double>(),
                        t.at("halt_reason").get<std::string>()});
  }
  r.avg_len = j.at("avg_len").get<double>();
  r.reached_fraction = j.at("reached_fraction").get<double>();
  r.success = j.at("success").get<bool>();
  r.mean_entropy = j.at("mean_entropy").get<double>();
  r.prompt_ppl = optional_from<double>(j, "prompt_ppl");
  r.gate = optional_from<std::string>(j, "gate");
  if (j.contains("error") && !j.at("error").is_null()) {
    r.error_type = j.at("error").at("type").get<std::string>();
    r.error = j.at("error").at("message").get<std::string>();
  }
  r.timestamp = j.at("timestamp").get<std::string>();
  return r;
}

CurveRecord curve_record_from_json(const json& j) {
  return {j.at("run_id").get<std::string>(), j.at("config_digest").get<std::string>(),
          j.at("command").get<std::string>(), j.at("model").get<std::string>(),
          j.at("name").get<std::string>(),    j.at("csv").get<std::string>(),
          j.at("timestamp").get<std::string>()};
}

ResultsLog::ResultsLog(const fs::path& path) : out_(path, std::ios::app | std::ios::binary) {
  if (!out_) throw IoError("cannot open results log " + path.string());
}

void ResultsLog::append(const json& line) {
  const std::string text = line.dump() + "\n";
  std::lock_guard lock(mu_);
  out_ << text;
  out_.flush();
  if (!out_) throw IoError("failed writing results log");
}

std::vector<RunRecord> read_results(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open results log " + path.string());
  std::vector<RunRecord> runs;
  std::map<std::string, std::size_t> index;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::parse_error& e) {
      throw IoError(path.string() + ":" + std::to_string(line_no) + ": " + e.what());
    }
    const std::string run_id = j.at("run_id").get<std::string>();
    auto [it, inserted] = index.emplace(run_id, runs.size());
    if (inserted) {
      RunRecord r;
      r.run_id = run_id;
      r.config_digest = j.at("config_digest").get<std::string>();
      r.command = j.at("command").get<std::string>();
      runs.push_back(std::move(r));
    }
    RunRecord& run = runs[it->second];
    const std::string kind = j.at("kind").get<std::string>();
    const std::string ts = j.at("timestamp").get<std::string>();
    if (run.started.empty() || ts < run.started) run.started = ts;
    if (ts > run.finished) run.finished = ts;
    if (kind == "input") {
      run.inputs.push_back(input_record_from_json(j));
    } else if (kind == "curve") {
      run.curves.push_back(curve_record_from_json(j));
    } else {
      throw IoError(path.string() + ":" + std::to_string(line_no) + ": unknown record kind '" + kind + "'");
    }
  }
  return runs;
}

std::vector<std::string> read_prompts(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open dataset " + path.string());
  std::vector<std::string> out;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.find_first_not_of(" \t") == std::string::npos) continue;
    out.push_back(line);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Execution

namespace {

std::string now_iso8601() {
  const auto now = std::chrono::system_clock::now();
  const std::time_t t = std::chrono::system_clock::to_time_t(now);
  const auto ms = std::chrono::duration_cast<std::chrono::milliseconds>(now.time_since_epoch()).count() % 1000;
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%S", &tm);
  char out[48];
  std::snprintf(out, sizeof out, "%s.%03dZ", buf, static_cast<int>(ms));
  return out;
}

std::string make_run_id(const std::string& digest) {
  const auto now = std::chrono::system_clock::now();
  const std::time_t t = std::chrono::system_clock::to_time_t(now);
  std::tm tm{};
  gmtime_r(&t, &tm);
  char stamp[20];
  std::strftime(stamp, sizeof stamp, "%Y%m%dT%H%M%S", &tm);
  std::random_device rd;
  char tail[9];
  std::snprintf(tail, sizeof tail, "%08x", rd());
  return digest.substr(0, 12) + "-" + stamp + "-" + tail;
}

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

std::string error_type(const std::exception& e) {
  if (dynamic_cast<const ContextOverflowError*>(&e)) return "ContextOverflowError";
  if (dynamic_cast<const CapabilityError*>(&e)) return "CapabilityError";
  if (dynamic_cast<const UnknownCharacterError*>(&e)) return "UnknownCharacterError";
  if (dynamic_cast<const OutOfRangeError*>(&e)) return "OutOfRangeError";
  if (dynamic_cast<const RoundTripError*>(&e)) return "RoundTripError";
  if (dynamic_cast<const AlignmentError*>(&e)) return "AlignmentError";
  if (dynamic_cast<const EmptyPoolError*>(&e)) return "EmptyPoolError";
  if (dynamic_cast<const ConfigError*>(&e)) return "ConfigError";
  if (dynamic_cast<const InvalidArgumentError*>(&e)) return "InvalidArgumentError";
  if (dynamic_cast<const IoError*>(&e)) return "IoError";
  return "Error";
}

struct Keyed {
  std::size_t task = 0;
  std::size_t seq = 0;
  InputRecord record;
};

class Runner {
 public:
  Runner(const RunConfig& cfg, const ModelRegistry& registry, const fs::path& out_dir)
      : cfg_(cfg), registry_(registry), log_(out_dir / "results.jsonl") {
    run_.run_id = make_run_id(cfg.digest);
    run_.config_digest = cfg.digest;
    run_.command = to_string(cfg.command);
    run_.started = now_iso8601();
  }

  RunRecord run() {
    switch (cfg_.command) {
      case Command::kAttack:
      case Command::kEval:
      case Command::kDefend:
        run_per_model();
        break;
      case Command::kTransfer:
        run_transfer();
        break;
      case Command::kProfile:
        run_profile();
        break;
      case Command::kMotivate:
        run_motivate();
        break;
      case Command::kReport:
        break;
    }
    std::sort(keyed_.begin(), keyed_.end(),
              [](const Keyed& a, const Keyed& b) { return std::tie(a.task, a.seq) < std::tie(b.task, b.seq); });
    for (auto& k : keyed_) run_.inputs.push_back(std::move(k.record));
    run_.finished = now_iso8601();
    return std::move(run_);
  }

 private:
  InputRecord base_record(const std::string& model, const std::string& method, std::size_t prompt_id,
                          const std::string& prompt) const {
    InputRecord r;
    r.run_id = run_.run_id;
    r.config_digest = run_.config_digest;
    r.command = run_.command;
    r.model = model;
    r.method = method;
    r.prompt_id = prompt_id;
    r.prompt = prompt;
    r.max_len = cfg_.eval.max_len;
    r.success_fraction = cfg_.attack.success_fraction;
    return r;
  }

  void emit(std::size_t task, std::size_t seq, InputRecord r) {
    r.timestamp = now_iso8601();
    log_.append(to_json(r));
    std::lock_guard lock(mu_);
    keyed_.push_back({task, seq, std::move(r)});
  }

  void emit_curve(const std::string& model, const std::string& name, std::string csv) {
    CurveRecord c{run_.run_id, run_.config_digest, run_.command, model, name, std::move(csv), now_iso8601()};
    log_.append(to_json(c));
    std::lock_guard lock(mu_);
    run_.curves.push_back(std::move(c));
  }

  void record_error(InputRecord& r, const std::exception& e) const {
    r.error_type = error_type(e);
    r.error = e.what();
  }

  AttackConfig attack_for(const LanguageModel& model, std::uint64_t input_seed) const {
    AttackConfig a = cfg_.attack;
    a.seed = input_seed;
    a.decoding = a.decoding.with_seed(input_seed);
    if (cfg_.segment_length) {
      std::mt19937_64 rng(splitmix64(input_seed ^ 0x5E6D'0000ULL));
      a.segment = random_segment(*cfg_.segment_length, model.tokenizer(), rng);
    } else {
      a.segment = segment_from_text(cfg_.segment_text, model.tokenizer());
    }
    a.validate();
    return a;
  }

  std::uint64_t input_seed(std::size_t prompt_id) const { return splitmix64(cfg_.seed + 0x100000001B3ULL * (prompt_id + 1)); }

  // Runs the trials for a rendered prompt and fills the metric fields.
  void evaluate(InputRecord& r, const LanguageModel& model, const TokenSequence& rendered, std::uint64_t seed,
                bool guarded) const {
    const DecodingPolicy policy = cfg_.attack.decoding.with_seed(splitmix64(seed));
    std::vector<TrialOutcome> outcomes;
    std::vector<GuardVerdict> verdicts;
    if (guarded) {
      GuardedTrials g =
          run_guarded_trials(model, rendered, policy, cfg_.attack.trials, cfg_.eval.max_len, cfg_.defense, true);
      outcomes = std::move(g.outcomes);
      verdicts = std::move(g.verdicts);
      if (g.gate) r.gate = g.gate->halted ? "reject" : "pass";
    } else {
      outcomes = run_trials(model, rendered, policy, cfg_.attack.trials, cfg_.eval.max_len);
    }
    for (std::size_t k = 0; k < outcomes.size(); ++k) {
      const TrialOutcome& o = outcomes[k];
      TrialRecord t;
      t.length = o.length;
      t.reached_max = o.reached_max;
      t.halted = o.halted;
      t.seed = o.seed;
      t.mean_entropy = o.step_entropies.empty() ? 0.0 : mean_output_entropy(o);
      if (k < verdicts.size() && verdicts[k].halted) t.halt_reason = to_string(verdicts[k].reason);
      r.trials.push_back(t);
    }
    const EvalReport rep = summarize({outcomes}, cfg_.attack.success_fraction, cfg_.eval.max_len);
    r.avg_len = rep.per_input[0].avg_len;
    r.reached_fraction = rep.per_input[0].reached_fraction;
    r.success = rep.per_input[0].success;
    r.mean_entropy = rep.per_input[0].mean_entropy;
    if (cfg_.eval.prompt_ppl && model.capabilities().logits) {
      const TokenSequence user = model.encode(r.user_text);
      if (user.size() >= 2) r.prompt_ppl = prompt_perplexity(user, model);
    }
  }

  void fill_attack(InputRecord& r, const AdversarialState& state, const std::string& suffix_text) const {
    r.suffix_text = suffix_text;
    r.suffix_tokens = state.suffix.tokens;
    r.loss_history = state.loss_history;
    r.attack_status = to_string(state.status);
    r.attack_steps = state.step;
  }

  template <class Fn>
  void parallel_for(std::size_t n, Fn&& fn) {
    std::atomic<std::size_t> next{0};
    const std::size_t workers = std::max<std::size_t>(1, std::min(cfg_.workers, n));
    std::vector<std::thread> pool;
    auto body = [&] {
      for (std::size_t i = next++; i < n; i = next++) fn(i);
    };
    for (std::size_t w = 1; w < workers; ++w) pool.emplace_back(body);
    body();
    for (auto& t : pool) t.join();
  }

  void run_per_model() {
    const auto prompts = read_prompts(cfg_.dataset);
    const bool defend = cfg_.command == Command::kDefend;
    for (std::size_t m = 0; m < cfg_.models.size(); ++m) {
      const std::string& id = cfg_.models[m];
      ModelHandle model;
      std::optional<std::pair<std::string, std::string>> load_error;
      try {
        model = registry_.resolve(id);
      } catch (const std::exception& e) {
        load_error = {error_type(e), e.what()};
      }
      parallel_for(prompts.size(), [&](std::size_t pid) {
        const std::size_t task = m * prompts.size() + pid;
        std::size_t seq = 0;
        const std::uint64_t seed = input_seed(pid);
        std::optional<AdversarialState> state;
        std::optional<std::string> attack_error_type, attack_error;
        for (const std::string& method : cfg_.eval.methods) {
          for (bool guarded : defend ? std::vector<bool>{false, true} : std::vector<bool>{false}) {
            InputRecord r = base_record(id, method, pid, prompts[pid]);
            r.defense = guarded ? "on" : "off";
            if (load_error) {
              r.error_type = load_error->first;
              r.error = load_error->second;
              emit(task, seq++, std::move(r));
              continue;
            }
            try {
              TokenSequence rendered;
              if (method == "loopllm") {
                if (!state && !attack_error) {
                  try {
                    state = optimize(prompts[pid], attack_for(*model, seed), *model);
                  } catch (const std::exception& e) {
                    attack_error_type = error_type(e);
                    attack_error = e.what();
                  }
                }
                if (attack_error) {
                  r.error_type = attack_error_type;
                  r.error = attack_error;
                  emit(task, seq++, std::move(r));
                  continue;
                }
                const std::string suffix_text = model->decode(state->suffix.tokens);
                fill_attack(r, *state, suffix_text);
                r.user_text = prompts[pid] + suffix_text;
                rendered = build_context(prompts[pid], state->suffix, attack_for(*model, seed), *model).rendered_prompt;
              } else {
                r.user_text = method == "special" ? special_input(prompts[pid]) : prompts[pid];
                rendered = model->render_chat(r.user_text).tokens;
              }
              evaluate(r, *model, rendered, seed, guarded);
            } catch (const std::exception& e) {
              record_error(r, e);
            }
            emit(task, seq++, std::move(r));
          }
        }
      });
    }
  }

  void run_transfer() {
    const auto prompts = read_prompts(cfg_.dataset);
    std::vector<ModelHandle> targets(cfg_.models.size());
    std::vector<std::optional<std::pair<std::string, std::string>>> target_errors(cfg_.models.size());
    for (std::size_t m = 0; m < cfg_.models.size(); ++m) {
      try {
        targets[m] = registry_.resolve(cfg_.models[m]);
      } catch (const std::exception& e) {
        target_errors[m] = {error_type(e), e.what()};
      }
    }
    std::optional<EnsembleHandle> ensemble;
    std::optional<std::pair<std::string, std::string>> ensemble_error;
    try {
      std::vector<ModelHandle> members;
      for (const auto& s : cfg_.surrogates) members.push_back(registry_.resolve(s));
      ensemble = check_token_alignment(std::move(members));
    } catch (const std::exception& e) {
      ensemble_error = {error_type(e), e.what()};
    }

    parallel_for(prompts.size(), [&](std::size_t pid) {
      const std::uint64_t seed = input_seed(pid);
      std::optional<AdversarialState> state;
      std::string suffix_text;
      std::optional<std::pair<std::string, std::string>> attack_error = ensemble_error;
      const bool wants_attack =
          std::find(cfg_.eval.methods.begin(), cfg_.eval.methods.end(), "loopllm-t") != cfg_.eval.methods.end();
      if (wants_attack && !attack_error) {
        try {
          const LanguageModel& lead = *ensemble->members.front();
          state = optimize_ensemble(prompts[pid], attack_for(lead, seed), *ensemble);
          suffix_text = lead.decode(state->suffix.tokens);
        } catch (const std::exception& e) {
          attack_error = {error_type(e), e.what()};
        }
      }
      std::size_t seq = 0;
      for (std::size_t m = 0; m < cfg_.models.size(); ++m) {
        for (const std::string& method : cfg_.eval.methods) {
          InputRecord r = base_record(cfg_.models[m], method, pid, prompts[pid]);
          const auto& failure = target_errors[m] ? target_errors[m] : (method == "loopllm-t" ? attack_error : std::nullopt);
          if (failure) {
            r.error_type = failure->first;
            r.error = failure->second;
            emit(pid, seq++, std::move(r));
            continue;
          }
          try {
            if (method == "loopllm-t") {
              fill_attack(r, *state, suffix_text);
              r.user_text = prompts[pid] + suffix_text;
            } else {
              r.user_text = method == "special" ? special_input(prompts[pid]) : prompts[pid];
            }
            evaluate(r, *targets[m], targets[m]->render_chat(r.user_text).tokens, seed, false);
          } catch (const std::exception& e) {
            record_error(r, e);
          }
          emit(pid, seq++, std::move(r));
        }
      }
    });
  }

  void run_profile() {
    for (std::size_t m = 0; m < cfg_.models.size(); ++m) {
      const std::string& id = cfg_.models[m];
      InputRecord status = base_record(id, "profile", 0, "");
      try {
        const ModelHandle model = registry_.resolve(id);
        std::optional<ConstantPowerSampler> sampler;
        if (cfg_.profile.power_watts) sampler.emplace(*cfg_.profile.power_watts, cfg_.profile.power_interval);
        std::vector<CostSample> in, out;
        for (CostAxis axis : cfg_.profile.axes) {
          auto samples = profile_cost(*model, cfg_.profile.lengths, axis, cfg_.profile.repeats,
                                      sampler ? &*sampler : nullptr);
          emit_curve(id, axis == CostAxis::kInput ? "cost_input" : "cost_output", cost_samples_csv(samples, axis));
          (axis == CostAxis::kInput ? in : out) = std::move(samples);
        }
        if (!in.empty() && !out.empty()) {
          const CostModel fit = fit_cost_model(in, out);
          std::ostringstream os;
          os << std::setprecision(10) << "slope_out_s_per_token,slope_in_s_per_token,intercept_s,intercept_in_s,r2_out\n"
             << fit.slope_out << ',' << fit.slope_in << ',' << fit.intercept << ',' << fit.intercept_in << ','
             << fit.r2_out << '\n';
          emit_curve(id, "cost_fit", os.str());
        }
        continue;
      } catch (const std::exception& e) {
        record_error(status, e);
      }
      emit(m, 0, std::move(status));
    }
  }

  void run_motivate() {
    std::string base = cfg_.motivate.prompt;
    if (base.empty()) {
      const auto prompts = read_prompts(cfg_.dataset);
      if (prompts.empty()) throw ConfigError("dataset", "dataset has no prompts");
      base = prompts.front();
    }
    const MotivateSettings& ms = cfg_.motivate;
    for (std::size_t m = 0; m < cfg_.models.size(); ++m) {
      const std::string& id = cfg_.models[m];
      InputRecord status = base_record(id, "motivate", 0, base);
      try {
        const ModelHandle model = registry_.resolve(id);
        for (Placement pl : {Placement::kInputRegion, Placement::kOutputRegion}) {
          RepetitionExperiment ex;
          ex.base_prompt = base;
          ex.segment_text = ms.segment;
          ex.reps = ms.reps;
          ex.placement = pl;
          ex.samples = ms.samples;
          ex.generation_length = ms.generation_length;
          ex.policy = DecodingPolicy::sampled(ms.temperature, splitmix64(cfg_.seed));
          const auto curve = entropy_vs_repetition(ex, *model);
          emit_curve(id, "entropy_" + to_string(pl), entropy_curve_csv(curve, pl));
          std::ostringstream steps;
          steps << std::setprecision(10) << "placement,reps,step,entropy\n";
          for (const auto& p : curve) {
            for (std::size_t i = 0; i < p.per_step_entropy.size(); ++i) {
              steps << to_string(pl) << ',' << p.reps << ',' << i + 1 << ',' << p.per_step_entropy[i] << '\n';
            }
          }
          emit_curve(id, "entropy_steps_" + to_string(pl), steps.str());
        }
        std::string repeated;
        const std::size_t max_rep = *std::max_element(ms.reps.begin(), ms.reps.end());
        for (std::size_t k = 0; k < max_rep; ++k) repeated += ms.segment;
        const RenderedPrompt prompt =
            render_chat_with_prefill(model->chat_template(), base, repeated, model->tokenizer());
        const TrialOutcome cont =
            model->generate(prompt.tokens, DecodingPolicy::greedy(), ms.generation_length, false);
        const CyclicSegment seg = segment_from_text(ms.segment, model->tokenizer());
        emit_curve(id, "probability_trace", probability_trace_csv(probability_trace(prompt.tokens, cont.output, seg, *model)));
        if (model->capabilities().attention) {
          emit_curve(id, "attention_profile", attention_profile_csv(attention_profile(prompt.tokens, cont.output, *model)));
        }
        continue;
      } catch (const std::exception& e) {
        record_error(status, e);
      }
      emit(m, 0, std::move(status));
    }
  }

  const RunConfig& cfg_;
  const ModelRegistry& registry_;
  ResultsLog log_;
  RunRecord run_;
  std::mutex mu_;
  std::vector<Keyed> keyed_;
};

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
  if (!out) throw IoError("failed writing " + path.string());
}

}  // namespace

RunRecord execute_run(const RunConfig& cfg, const ModelRegistry& registry) {
  const fs::path out_dir = resolve_output_dir(cfg);
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec) throw IoError("cannot create output directory " + out_dir.string() + ": " + ec.message());
  write_text(out_dir / "config.json", cfg.canonical);
  write_text(out_dir / "config.source.json", cfg.source_text);

  if (cfg.command == Command::kReport) {
    std::vector<RunRecord> records;
    for (const auto& p : cfg.report_inputs) {
      for (auto& r : read_results(p)) records.push_back(std::move(r));
    }
    emit_report(records, out_dir);
    RunRecord merged;
    merged.run_id = make_run_id(cfg.digest);
    merged.config_digest = cfg.digest;
    merged.command = to_string(cfg.command);
    merged.started = merged.finished = now_iso8601();
    for (auto& r : records) {
      for (auto& i : r.inputs) merged.inputs.push_back(std::move(i));
      for (auto& c : r.curves) merged.curves.push_back(std::move(c));
    }
    return merged;
  }

  Runner runner(cfg, registry, out_dir);
  RunRecord run = runner.run();
  emit_report(std::span<const RunRecord>(&run, 1), out_dir);
  return run;
}

// ---------------------------------------------------------------------------
// Reports

std::vector<SummaryRow> summary_rows(std::span<const RunRecord> records) {
  std::vector<SummaryRow> rows;
  std::map<std::tuple<std::string, std::string, std::string>, std::size_t> index;
  std::vector<std::size_t> ppl_counts;
  for (const auto& run : records) {
    for (const auto& r : run.inputs) {
      if (r.method == "profile" || r.method == "motivate") continue;
      const auto key = std::make_tuple(r.model, r.method, r.defense);
      auto [it, inserted] = index.emplace(key, rows.size());
      if (inserted) {
        SummaryRow row;
        row.model = r.model;
        row.method = r.method;
        row.defense = r.defense;
        rows.push_back(std::move(row));
        ppl_counts.push_back(0);
      }
      SummaryRow& row = rows[it->second];
      if (r.error) {
        ++row.errors;
        continue;
      }
      ++row.inputs;
      row.avg_len += r.avg_len;
      row.asr += r.success ? 1.0 : 0.0;
      row.mean_entropy += r.mean_entropy;
      if (r.prompt_ppl) {
        row.mean_prompt_ppl = row.mean_prompt_ppl.value_or(0.0) + *r.prompt_ppl;
        ++ppl_counts[it->second];
      }
    }
  }
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i].inputs == 0) continue;
    const double n = static_cast<double>(rows[i].inputs);
    rows[i].avg_len /= n;
    rows[i].asr /= n;
    rows[i].mean_entropy /= n;
    if (rows[i].mean_prompt_ppl) *rows[i].mean_prompt_ppl /= static_cast<double>(ppl_counts[i]);
  }
  return rows;
}

namespace {

std::string sanitize(std::string s) {
  for (char& ch : s) {
    if (!std::isalnum(static_cast<unsigned char>(ch)) && ch != '-' && ch != '_' && ch != '.') ch = '_';
  }
  return s;
}

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char ch : s) out += ch == '"' ? std::string("\"\"") : std::string(1, ch);
  return out + "\"";
}

std::string fixed(double v, int digits) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

}  // namespace

void emit_report(std::span<const RunRecord> records, const fs::path& out_dir) {
  if (records.empty()) throw InvalidArgumentError("emit_report needs at least one run record");
  std::error_code ec;
  fs::create_directories(out_dir / "curves", ec);
  if (ec) throw IoError("cannot create report directory " + out_dir.string() + ": " + ec.message());

  const auto rows = summary_rows(records);
  std::ostringstream csv;
  csv << "model,method,defense,inputs,errors,avg_len,asr,mean_entropy,mean_prompt_ppl\n";
  for (const auto& r : rows) {
    csv << csv_field(r.model) << ',' << r.method << ',' << r.defense << ',' << r.inputs << ',' << r.errors << ','
        << fixed(r.avg_len, 4) << ',' << fixed(r.asr, 4) << ',' << fixed(r.mean_entropy, 6) << ','
        << (r.mean_prompt_ppl ? fixed(*r.mean_prompt_ppl, 4) : std::string()) << '\n';
  }
  write_text(out_dir / "summary.csv", csv.str());

  std::ostringstream txt;
  txt << "looptrap report\n\n";
  for (const auto& run : records) {
    txt << "run " << run.run_id << "  command " << run.command << "  config " << run.config_digest << "\n";
    txt << "  started " << run.started << "  finished " << run.finished << "  inputs " << run.inputs.size()
        << "  errors " << run.error_count() << "  curves " << run.curves.size() << "\n";
  }
  txt << "\n";
  if (!rows.empty()) {
    char line[256];
    std::snprintf(line, sizeof line, "%-40s %-10s %-7s %6s %6s %9s %7s %9s %10s\n", "model", "method", "defense",
                  "inputs", "errors", "avg_len", "asr", "entropy", "ppl");
    txt << line;
    for (const auto& r : rows) {
      std::snprintf(line, sizeof line, "%-40s %-10s %-7s %6zu %6zu %9.2f %7.3f %9.4f %10s\n", r.model.c_str(),
                    r.method.c_str(), r.defense.c_str(), r.inputs, r.errors, r.avg_len, r.asr, r.mean_entropy,
                    r.mean_prompt_ppl ? fixed(*r.mean_prompt_ppl, 2).c_str() : "-");
      txt << line;
    }
  }
  std::vector<std::string> failures;
  for (const auto& run : records) {
    for (const auto& r : run.inputs) {
      if (r.error) {
        failures.push_back(r.model + " / " + r.method + " / prompt " + std::to_string(r.prompt_id) + ": " +
                           r.error_type.value_or("Error") + ": " + *r.error);
      }
    }
  }
  if (!failures.empty()) {
    txt << "\nfailures\n";
    for (const auto& f : failures) txt << "  " << f << "\n";
  }
  std::set<std::string> written;
  for (const auto& run : records) {
    for (const auto& c : run.curves) {
      std::string name = sanitize(c.model) + "__" + sanitize(c.name);
      if (!written.insert(name).second) name = sanitize(run.run_id) + "__" + name;
      written.insert(name);
      write_text(out_dir / "curves" / (name + ".csv"), c.csv);
    }
  }
  if (!written.empty()) {
    txt << "\ncurves\n";
    for (const auto& n : written) txt << "  curves/" << n << ".csv\n";
  }
  write_text(out_dir / "digest.txt", txt.str());
}

}  // namespace looptrap
