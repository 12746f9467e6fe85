// Copyright 2026 The looptrap Authors
// SPDX-License-Identifier: Apache-2.0

#include "looptrap/remote.hpp"

#include <httplib.h>

#include <chrono>
#include <json.hpp>
#include <mutex>

#include "looptrap/errors.hpp"
#include "looptrap/loop_optimizer.hpp"

namespace looptrap {

using nlohmann::json;

namespace {

json policy_to_json(const DecodingPolicy& p) {
  json j;
  switch (p.kind) {
    case DecodingPolicy::Kind::kGreedy:
      j["kind"] = "greedy";
      break;
    case DecodingPolicy::Kind::kBeam:
      j["kind"] = "beam";
      j["beam_width"] = p.beam_width;
      break;
    case DecodingPolicy::Kind::kTemperature:
      j["kind"] = "temperature";
      j["temperature"] = p.temperature;
      break;
  }
  j["seed"] = p.seed;
  return j;
}

DecodingPolicy policy_from_json(const json& j) {
  DecodingPolicy p;
  const std::string kind = j.at("kind").get<std::string>();
  if (kind == "greedy") {
    p = DecodingPolicy::greedy();
  } else if (kind == "beam") {
    p = DecodingPolicy::beam(j.at("beam_width").get<std::size_t>());
  } else if (kind == "temperature") {
    p = DecodingPolicy::sampled(j.at("temperature").get<double>(), 0);
  } else {
    throw InvalidArgumentError("unknown decoding policy kind '" + kind + "'");
  }
  p.seed = j.value("seed", std::uint64_t{0});
  return p;
}

[[noreturn]] void rethrow_remote(int status, const std::string& body) {
  std::string kind = "error";
  std::string message = body;
  try {
    const json j = json::parse(body);
    kind = j.value("error", kind);
    message = j.value("message", message);
  } catch (const json::exception&) {
  }
  message = "gateway returned " + std::to_string(status) + " (" + kind + "): " + message;
  if (kind == "capability") throw CapabilityError(message);
  if (kind == "context_overflow") throw ContextOverflowError(message);
  if (kind == "out_of_range") throw OutOfRangeError(message);
  if (kind == "unknown_character") throw UnknownCharacterError(message);
  if (kind == "invalid_argument") throw InvalidArgumentError(message);
  throw IoError(message);
}

std::pair<int, std::string> classify(const std::exception& e) {
  if (dynamic_cast<const CapabilityError*>(&e)) return {501, "capability"};
  if (dynamic_cast<const ContextOverflowError*>(&e)) return {400, "context_overflow"};
  if (dynamic_cast<const OutOfRangeError*>(&e)) return {400, "out_of_range"};
  if (dynamic_cast<const UnknownCharacterError*>(&e)) return {400, "unknown_character"};
  if (dynamic_cast<const InvalidArgumentError*>(&e)) return {400, "invalid_argument"};
  if (dynamic_cast<const json::exception*>(&e)) return {400, "invalid_argument"};
  return {500, "internal"};
}

// Only losses with a wire form can cross the gateway.
std::unique_ptr<DistributionLoss> loss_from_descriptor(const json& j) {
  const std::string kind = j.at("kind").get<std::string>();
  if (kind == "cycle") {
    CyclicSegment seg;
    seg.tokens = j.at("tokens").get<TokenSequence>();
    return std::make_unique<CycleLoss>(seg);
  }
  throw InvalidArgumentError("unsupported loss kind '" + kind + "'");
}

// Tokenizer whose vocabulary comes from /info and whose encode/decode are
// delegated to the server.
class RemoteTokenizer final : public Tokenizer {
 public:
  RemoteTokenizer(RemoteModel::Impl* owner, std::vector<std::string> pieces, std::set<TokenId> specials)
      : owner_(owner), pieces_(std::move(pieces)) {
    vocab_.size = pieces_.size();
    vocab_.special_ids = std::move(specials);
    vocab_.fingerprint = vocab_fingerprint(pieces_);
  }

  TokenSequence encode(std::string_view text) const override;
  std::string decode(std::span<const TokenId> tokens) const override;
  const VocabSpec& vocab() const override { return vocab_; }
  std::string token_text(TokenId id) const override {
    if (id < 0 || static_cast<std::size_t>(id) >= pieces_.size()) {
      throw OutOfRangeError("token id " + std::to_string(id) + " outside vocabulary");
    }
    return pieces_[static_cast<std::size_t>(id)];
  }

 private:
  RemoteModel::Impl* owner_;
  std::vector<std::string> pieces_;
  VocabSpec vocab_;
};

}  // namespace

struct RemoteModel::Impl {
  std::string endpoint;
  mutable std::mutex mu;
  std::unique_ptr<httplib::Client> client;
  std::string id;
  std::unique_ptr<RemoteTokenizer> tokenizer;
  ChatTemplate tmpl;
  Capabilities caps;
  std::size_t context = 0;
  std::optional<TokenId> eos;

  json call(const std::string& path, const json* body) const {
    std::lock_guard lock(mu);
    httplib::Result res = body ? client->Post(path, body->dump(), "application/json") : client->Get(path);
    if (!res) {
      throw IoError("gateway " + endpoint + path + " unreachable: " + httplib::to_string(res.error()));
    }
    if (res->status != 200) rethrow_remote(res->status, res->body);
    try {
      return json::parse(res->body);
    } catch (const json::exception& e) {
      throw IoError("gateway " + endpoint + path + " sent malformed JSON: " + e.what());
    }
  }
  json post(const std::string& path, const json& body) const { return call(path, &body); }
};

namespace {

TokenSequence RemoteTokenizer::encode(std::string_view text) const {
  return owner_->post("/encode", json{{"text", std::string(text)}}).at("tokens").get<TokenSequence>();
}

std::string RemoteTokenizer::decode(std::span<const TokenId> tokens) const {
  return owner_->post("/decode", json{{"tokens", TokenSequence(tokens.begin(), tokens.end())}})
      .at("text")
      .get<std::string>();
}

}  // namespace

RemoteModel::RemoteModel(std::string endpoint, double timeout_seconds) : impl_(std::make_unique<Impl>()) {
  impl_->endpoint = endpoint;
  impl_->client = std::make_unique<httplib::Client>(endpoint);
  if (!impl_->client->is_valid()) throw InvalidArgumentError("invalid gateway endpoint '" + endpoint + "'");
  const auto timeout = std::chrono::duration<double>(timeout_seconds);
  impl_->client->set_read_timeout(std::chrono::duration_cast<std::chrono::microseconds>(timeout));
  impl_->client->set_write_timeout(std::chrono::duration_cast<std::chrono::microseconds>(timeout));
  impl_->client->set_keep_alive(true);

  const json info = impl_->call("/info", nullptr);
  impl_->id = info.at("id").get<std::string>();
  const auto specials = info.at("special_ids").get<std::set<TokenId>>();
  impl_->tokenizer =
      std::make_unique<RemoteTokenizer>(impl_.get(), info.at("pieces").get<std::vector<std::string>>(), specials);
  const json& t = info.at("chat_template");
  impl_->tmpl = {t.at("system_text").get<std::string>(), t.at("user_prefix").get<std::string>(),
                 t.at("user_suffix").get<std::string>(), t.at("assistant_prefix").get<std::string>()};
  const json& c = info.at("capabilities");
  impl_->caps = {c.value("differentiable", false), c.value("attention", false), c.value("logits", false)};
  impl_->context = info.at("context_length").get<std::size_t>();
  if (info.contains("eos_id") && !info.at("eos_id").is_null()) impl_->eos = info.at("eos_id").get<TokenId>();
}

RemoteModel::~RemoteModel() = default;

std::string RemoteModel::id() const { return impl_->id; }
const Tokenizer& RemoteModel::tokenizer() const { return *impl_->tokenizer; }
const ChatTemplate& RemoteModel::chat_template() const { return impl_->tmpl; }
Capabilities RemoteModel::capabilities() const { return impl_->caps; }
std::size_t RemoteModel::context_length() const { return impl_->context; }
std::optional<TokenId> RemoteModel::eos_id() const { return impl_->eos; }

std::vector<StepDistribution> RemoteModel::next_distributions(const TokenSequence& prompt,
                                                              const TokenSequence& continuation) const {
  if (!impl_->caps.logits) throw CapabilityError(id() + ": adapter does not expose next-token distributions");
  const json res = impl_->post("/next_distributions", json{{"prompt", prompt}, {"continuation", continuation}});
  std::vector<StepDistribution> out;
  for (const auto& row : res.at("probs")) {
    out.push_back({row.get<std::vector<double>>(), out.size() + 1});
  }
  return out;
}

GradientTable RemoteModel::one_hot_gradient(const TokenSequence& prompt, IndexRange span,
                                            const TokenSequence& continuation, const DistributionLoss& loss) const {
  if (!impl_->caps.differentiable) throw CapabilityError(id() + ": adapter is not differentiable");
  const std::string descriptor = loss.wire_descriptor();
  if (descriptor.empty()) throw CapabilityError("loss has no wire form; cannot differentiate remotely");
  const json res = impl_->post("/one_hot_gradient", json{{"prompt", prompt},
                                                         {"span", {span.begin, span.end}},
                                                         {"continuation", continuation},
                                                         {"loss", json::parse(descriptor)}});
  const auto rows = res.at("values").get<std::vector<std::vector<double>>>();
  GradientTable g;
  g.loss_at_point = res.at("loss").get<double>();
  const std::size_t cols = rows.empty() ? 0 : rows.front().size();
  g.values.resize(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(cols));
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (rows[r].size() != cols) throw IoError("gateway gradient rows have unequal length");
    for (std::size_t c = 0; c < cols; ++c) g.values(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = rows[r][c];
  }
  return g;
}

TrialOutcome RemoteModel::generate(const TokenSequence& prompt, const DecodingPolicy& policy, std::size_t max_new,
                                   bool eos_enabled, const StepObserver& observer) const {
  policy.validate();
  if (max_new == 0) throw InvalidArgumentError("max_new must be >= 1");
  const json res = impl_->post("/generate", json{{"prompt", prompt},
                                                 {"policy", policy_to_json(policy)},
                                                 {"max_new", max_new},
                                                 {"eos_enabled", eos_enabled}});
  TrialOutcome out;
  out.output = res.at("output").get<TokenSequence>();
  out.step_entropies = res.at("step_entropies").get<std::vector<double>>();
  if (out.step_entropies.size() != out.output.size()) throw IoError("gateway entropies do not match output length");
  if (observer) {
    for (std::size_t i = 0; i < out.output.size(); ++i) {
      if (!observer(i, out.output[i], out.step_entropies[i])) {
        out.output.resize(i + 1);
        out.step_entropies.resize(i + 1);
        out.halted = true;
        break;
      }
    }
  }
  out.length = out.output.size();
  out.reached_max = out.length == max_new;
  out.policy = policy;
  out.seed = policy.seed;
  return out;
}

AttentionTensor RemoteModel::attention_matrix(const TokenSequence& prompt, const TokenSequence& continuation) const {
  if (!impl_->caps.attention) throw CapabilityError(id() + ": adapter does not expose attention");
  const json res = impl_->post(
      "/attention", json{{"prompt", prompt}, {"continuation", continuation}, {"query_start", prompt.size()}});
  AttentionTensor a;
  a.layers = res.at("layers").get<std::size_t>();
  a.heads = res.at("heads").get<std::size_t>();
  a.queries = res.at("queries").get<std::size_t>();
  a.keys = res.at("keys").get<std::size_t>();
  a.query_offset = res.value("query_offset", std::size_t{0});
  a.weights = res.at("weights").get<std::vector<double>>();
  if (a.weights.size() != a.layers * a.heads * a.queries * a.keys) throw IoError("gateway attention tensor has wrong size");
  return a;
}

struct GatewayServer::Impl {
  ModelHandle model;
  httplib::Server server;
  std::mutex mu;

  explicit Impl(ModelHandle m) : model(std::move(m)) { install(); }

  void handle(const httplib::Request& req, httplib::Response& res, const std::function<json(const json&)>& fn) {
    try {
      const json body = req.body.empty() ? json::object() : json::parse(req.body);
      json out;
      {
        std::lock_guard lock(mu);
        out = fn(body);
      }
      res.set_content(out.dump(), "application/json");
    } catch (const std::exception& e) {
      const auto [status, kind] = classify(e);
      res.status = status;
      res.set_content(json{{"error", kind}, {"message", e.what()}}.dump(), "application/json");
    }
  }

  void route(const std::string& path, std::function<json(const json&)> fn) {
    server.Post(path, [this, fn](const httplib::Request& req, httplib::Response& res) { handle(req, res, fn); });
  }

  void install() {
    server.Get("/info", [this](const httplib::Request& req, httplib::Response& res) {
      handle(req, res, [this](const json&) {
        const Tokenizer& tok = model->tokenizer();
        std::vector<std::string> pieces;
        for (std::size_t t = 0; t < tok.vocab_size(); ++t) pieces.push_back(tok.token_text(static_cast<TokenId>(t)));
        const ChatTemplate& t = model->chat_template();
        const Capabilities c = model->capabilities();
        json info{{"id", model->id()},
                  {"pieces", pieces},
                  {"special_ids", tok.vocab().special_ids},
                  {"context_length", model->context_length()},
                  {"chat_template",
                   {{"system_text", t.system_text},
                    {"user_prefix", t.user_prefix},
                    {"user_suffix", t.user_suffix},
                    {"assistant_prefix", t.assistant_prefix}}},
                  {"capabilities", {{"differentiable", c.differentiable}, {"attention", c.attention}, {"logits", c.logits}}}};
        info["eos_id"] = model->eos_id() ? json(*model->eos_id()) : json(nullptr);
        return info;
      });
    });
    route("/encode", [this](const json& b) {
      return json{{"tokens", model->tokenizer().encode(b.at("text").get<std::string>())}};
    });
    route("/decode", [this](const json& b) {
      return json{{"text", model->tokenizer().decode(b.at("tokens").get<TokenSequence>())}};
    });
    route("/next_distributions", [this](const json& b) {
      json rows = json::array();
      for (const auto& d :
           model->next_distributions(b.at("prompt").get<TokenSequence>(), b.at("continuation").get<TokenSequence>())) {
        rows.push_back(d.probs);
      }
      return json{{"probs", rows}};
    });
    route("/one_hot_gradient", [this](const json& b) {
      const auto span = b.at("span").get<std::vector<std::size_t>>();
      if (span.size() != 2) throw InvalidArgumentError("span must be [begin, end]");
      const auto loss = loss_from_descriptor(b.at("loss"));
      const GradientTable g = model->one_hot_gradient(b.at("prompt").get<TokenSequence>(), {span[0], span[1]},
                                                      b.at("continuation").get<TokenSequence>(), *loss);
      json rows = json::array();
      for (Eigen::Index r = 0; r < g.values.rows(); ++r) {
        rows.push_back(std::vector<double>(g.values.row(r).begin(), g.values.row(r).end()));
      }
      return json{{"values", rows}, {"loss", g.loss_at_point}};
    });
    route("/generate", [this](const json& b) {
      const TrialOutcome o = model->generate(b.at("prompt").get<TokenSequence>(), policy_from_json(b.at("policy")),
                                             b.at("max_new").get<std::size_t>(), b.value("eos_enabled", true));
      return json{{"output", o.output}, {"step_entropies", o.step_entropies}};
    });
    route("/attention", [this](const json& b) {
      const AttentionTensor a =
          model->attention_matrix(b.at("prompt").get<TokenSequence>(), b.at("continuation").get<TokenSequence>());
      const std::size_t start = std::max(b.value("query_start", a.query_offset), a.query_offset);
      const std::size_t end = a.query_offset + a.queries;
      if (start > end) throw InvalidArgumentError("query_start beyond the sequence");
      std::vector<double> rows;
      rows.reserve(a.layers * a.heads * (end - start) * a.keys);
      for (std::size_t l = 0; l < a.layers; ++l) {
        for (std::size_t h = 0; h < a.heads; ++h) {
          for (std::size_t q = start; q < end; ++q) {
            for (std::size_t k = 0; k < a.keys; ++k) rows.push_back(a.at(l, h, q, k));
          }
        }
      }
      return json{{"layers", a.layers}, {"heads", a.heads}, {"queries", end - start},
                  {"keys", a.keys},     {"query_offset", start}, {"weights", rows}};
    });
  }
};

GatewayServer::GatewayServer(ModelHandle model, std::string host, int port)
    : impl_(std::make_unique<Impl>(std::move(model))), host_(std::move(host)) {
  if (port == 0) {
    port_ = impl_->server.bind_to_any_port(host_);
  } else if (impl_->server.bind_to_port(host_, port)) {
    port_ = port;
  } else {
    port_ = -1;
  }
  if (port_ <= 0) throw IoError("cannot bind gateway server on " + host_ + ":" + std::to_string(port));
  thread_ = std::thread([this] { impl_->server.listen_after_bind(); });
  impl_->server.wait_until_ready();
}

GatewayServer::~GatewayServer() { stop(); }

std::string GatewayServer::endpoint() const { return "http://" + host_ + ":" + std::to_string(port_); }

void GatewayServer::stop() {
  impl_->server.stop();
  if (thread_.joinable()) thread_.join();
}

void GatewayServer::serve_forever(ModelHandle model, const std::string& host, int port) {
  Impl impl(std::move(model));
  if (!impl.server.listen(host, port)) throw IoError("cannot listen on " + host + ":" + std::to_string(port));
}

}  // namespace looptrap
