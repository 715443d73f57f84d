#pragma once

// HTTP clients for chat-completion style generators and single-score reward
// services.
//
// Generator:  POST {base_url}{path}
//   request   {"model", "messages": [{"role", "content"}], "temperature", "top_p",
//              "max_tokens", "n", "seed"}
//   response  {"choices": [{"index", "message": {"role", "content"}}]}
//
// Scorer:     POST {base_url}{path}
//   request   {"query", "response"}    (plus "model" when configured)
//   response  {"score": number}

#include <algorithm>
#include <string>
#include <vector>

#include <httplib.h>
#include <nlohmann/json.hpp>

#include "refinery/backends.hpp"
#include "refinery/io/config.hpp"

namespace refinery::io {

namespace detail {

inline httplib::Result post_json(const BackendSpec& spec, const nlohmann::json& body) {
  httplib::Client cli(spec.base_url);
  cli.set_connection_timeout(spec.timeout_seconds, 0);
  cli.set_read_timeout(spec.timeout_seconds, 0);
  cli.set_write_timeout(spec.timeout_seconds, 0);
  if (!spec.api_key.empty()) cli.set_bearer_token_auth(spec.api_key);
  return cli.Post(spec.path, body.dump(), "application/json");
}

inline nlohmann::json checked_body(const httplib::Result& res, const BackendSpec& spec) {
  const std::string where = spec.base_url + spec.path;
  if (!res) throw TransportError(where + ": " + httplib::to_string(res.error()));
  if (res->status >= 500 || res->status == 429)
    throw TransportError(where + ": HTTP " + std::to_string(res->status));
  if (res->status != 200)
    throw ProtocolError(where + ": HTTP " + std::to_string(res->status) + ": " +
                        res->body.substr(0, 200));
  try {
    return nlohmann::json::parse(res->body);
  } catch (const nlohmann::json::exception&) {
    throw ProtocolError(where + ": response is not valid JSON");
  }
}

}  // namespace detail

class HttpGenerator final : public GeneratorBackend {
 public:
  HttpGenerator(BackendSpec spec, std::uint64_t seed) : spec_(std::move(spec)), seed_(seed) {}

  std::vector<std::string> generate(const Conversation& conversation, const SamplingParams& params,
                                    std::size_t first_sample = 0) override {
    check_generate_preconditions(conversation, params);
    nlohmann::json messages = nlohmann::json::array();
    for (const auto& m : conversation)
      messages.push_back({{"role", std::string(to_string(m.role))}, {"content", m.content}});
    nlohmann::json body = {{"messages", messages},
                           {"temperature", params.temperature},
                           {"top_p", params.top_p},
                           {"max_tokens", params.max_tokens},
                           {"n", params.n},
                           {"seed", seed_ + first_sample}};
    if (!spec_.model.empty()) body["model"] = spec_.model;

    auto reply = detail::checked_body(detail::post_json(spec_, body), spec_);
    const auto choices = reply.find("choices");
    if (choices == reply.end() || !choices->is_array())
      throw ProtocolError("response has no choices array");
    if (choices->size() != params.n)
      throw ProtocolError("expected " + std::to_string(params.n) + " choices, got " +
                          std::to_string(choices->size()));

    std::vector<std::pair<std::size_t, std::string>> indexed;
    std::size_t position = 0;
    for (const auto& c : *choices) {
      const auto msg = c.find("message");
      if (msg == c.end() || !msg->is_object()) throw ProtocolError("choice has no message");
      const auto content = msg->find("content");
      if (content == msg->end() || !content->is_string())
        throw ProtocolError("choice message has no string content");
      std::size_t index = position++;
      if (auto i = c.find("index"); i != c.end() && i->is_number_unsigned())
        index = i->get<std::size_t>();
      indexed.emplace_back(index, content->get<std::string>());
    }
    std::stable_sort(indexed.begin(), indexed.end(),
                     [](const auto& a, const auto& b) { return a.first < b.first; });
    std::vector<std::string> out;
    out.reserve(indexed.size());
    for (auto& [_, text] : indexed) out.push_back(std::move(text));
    return out;
  }

  std::string id() const override { return "http:" + spec_.base_url + spec_.path; }

 private:
  BackendSpec spec_;
  std::uint64_t seed_;
};

class HttpScorer final : public ScorerBackend {
 public:
  explicit HttpScorer(BackendSpec spec) : spec_(std::move(spec)) {}

  RewardScore score(const std::string& query, const std::string& response) override {
    if (query.empty() || response.empty())
      throw std::invalid_argument("score requires non-empty query and response");
    nlohmann::json body = {{"query", query}, {"response", response}};
    if (!spec_.model.empty()) body["model"] = spec_.model;
    auto reply = detail::checked_body(detail::post_json(spec_, body), spec_);
    const auto s = reply.find("score");
    if (s == reply.end() || !s->is_number()) throw ProtocolError("score payload is not numeric");
    const double v = s->get<double>();
    if (!std::isfinite(v)) throw ProtocolError("score is not finite");
    return {v, id()};
  }

  std::string id() const override {
    return "http:" + spec_.base_url + spec_.path + (spec_.model.empty() ? "" : "#" + spec_.model);
  }

 private:
  BackendSpec spec_;
};

}  // namespace refinery::io
