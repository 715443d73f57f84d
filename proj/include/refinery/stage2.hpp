#pragma once

// Multi-step refinement: greedy search for recursive-thinking trajectories
// and length-control preference pairs over sampled long-CoT outputs.

#include <optional>
#include <string>
#include <vector>

#include "refinery/backends.hpp"
#include "refinery/core.hpp"
#include "refinery/cot_format.hpp"
#include "refinery/prompts.hpp"

namespace refinery {

struct Stage2Error : std::runtime_error {
  Stage2Error(const std::string& what, bool transport)
      : std::runtime_error(what), transport_failure(transport) {}
  bool transport_failure;
};

struct TrajectoryBuild {
  RecursiveTrajectory trajectory;
  std::vector<std::string> log;
};

/// Greedy search: each round criticizes the current best response x ways,
/// improves each criticism y ways and keeps the top-scoring improvement only
/// if it beats both the current best and the initial response. Stops at the
/// first rejected round or after cfg.max_rounds accepted rounds. A backend
/// failure inside a round discards that round and marks the trajectory
/// truncated.
inline TrajectoryBuild synthesize_trajectory(const std::string& query, const PipelineConfig& cfg,
                                             GeneratorBackend& gen, ScorerBackend& scorer,
                                             const CotTemplate& tpl = {}) {
  if (query.empty()) throw std::invalid_argument("query must be non-empty");
  cfg.validate();
  const auto params = SamplingParams::from(cfg);

  TrajectoryBuild out;
  auto& t = out.trajectory;
  t.prompt = query;
  try {
    t.initial_response = trim(gen.generate({ChatMessage::user(query)}, params, 0).at(0));
    if (!embeddable(t.initial_response, tpl))
      throw Stage2Error("initial response is blank or not embeddable", false);
    t.initial_reward = scorer.score(query, t.initial_response);
  } catch (const BackendError& e) {
    throw Stage2Error(std::string("initial response failed: ") + e.what(), e.retryable());
  }

  const std::size_t x = cfg.num_criticisms_x;
  const std::size_t y = cfg.num_improvements_y;
  std::string current = t.initial_response;
  RewardScore current_reward = *t.initial_reward;

  struct Candidate {
    std::size_t criticism;
    std::string text;
    RewardScore reward;
  };

  auto first_failure = [](const auto& outcomes) -> std::optional<std::string> {
    for (const auto& o : outcomes) {
      if (o.ok()) continue;
      try {
        o.rethrow();
      } catch (const BackendError& e) {
        return std::string(e.what());
      }
    }
    return std::nullopt;
  };

  for (std::size_t round = 1; round <= cfg.max_rounds; ++round) {
    const std::string tag = "round " + std::to_string(round) + ": ";
    auto crits = fan_out(x, [&](std::size_t i) {
      return trim(gen.generate(prompts::criticism_context(query, current), params, i).at(0));
    });
    if (auto err = first_failure(crits)) {
      out.log.push_back(tag + "criticism failed: " + *err);
      t.truncated = true;
      break;
    }
    auto imps = fan_out(x * y, [&](std::size_t k) -> std::optional<Candidate> {
      const auto& crit = *crits[k / y].value;
      if (!embeddable(crit, tpl)) return std::nullopt;
      auto text = trim(
          gen.generate(prompts::improvement_context(query, current, crit), params, k % y).at(0));
      if (!embeddable(text, tpl)) return std::nullopt;
      auto r = scorer.score(query, text);
      return Candidate{k / y, std::move(text), std::move(r)};
    });
    if (auto err = first_failure(imps)) {
      out.log.push_back(tag + "improvement failed: " + *err);
      t.truncated = true;
      break;
    }

    const Candidate* best = nullptr;
    for (const auto& o : imps) {
      if (!o.value->has_value()) continue;
      const auto& c = **o.value;
      if (!best || c.reward.value > best->reward.value) best = &c;
    }
    if (!best) {
      out.log.push_back(tag + "no usable candidate");
      t.truncated = true;
      break;
    }
    if (!accept_refinement(best->reward, current_reward, *t.initial_reward)) {
      t.closing_criticism = *crits[best->criticism].value;
      break;
    }
    TrajectoryRound r;
    r.round_index = round;
    r.criticism = *crits[best->criticism].value;
    r.improvement = best->text;
    r.improvement_reward = best->reward;
    r.accepted = true;
    current = r.improvement;
    current_reward = best->reward;
    t.rounds.push_back(std::move(r));
  }
  t.final_answer = current;
  return out;
}

/// The final answer carried by a sampled completion: the text after the final
/// marker when it parses as a long CoT, else the whole (trimmed) completion.
inline std::string final_answer_of(std::string_view completion, const CotTemplate& tpl = {}) {
  try {
    return parse_trajectory(completion, tpl).final_answer;
  } catch (const CotParseError&) {
    return trim(completion);
  }
}

/// Samples k completions for the query, scores each final answer, and pairs
/// the best against the worst when the best is strictly better and strictly
/// shorter. Ties on reward go to the lowest sample index.
inline std::optional<PreferencePair> build_length_control_pairs(
    const std::string& query, const PipelineConfig& cfg, GeneratorBackend& gen,
    ScorerBackend& scorer, const std::string& id_prefix = "", const CotTemplate& tpl = {}) {
  if (query.empty()) throw std::invalid_argument("query must be non-empty");
  cfg.validate();
  const std::size_t k = cfg.length_control_samples_k;
  if (k < 2) throw ConfigError("length control needs at least 2 samples per prompt");

  SamplingParams params{cfg.temperature, cfg.top_p, cfg.cot_max_tokens, k};
  const auto samples = gen.generate({ChatMessage::user(query)}, params, 0);

  struct Scored {
    std::size_t index;
    std::string text;
    std::size_t length;
    RewardScore reward;
  };
  std::vector<Scored> scored;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    auto text = trim(samples[i]);
    if (text.empty()) continue;
    auto answer = final_answer_of(text, tpl);
    if (answer.empty()) continue;
    auto r = scorer.score(query, answer);
    scored.push_back({i, std::move(text), char_length(answer), std::move(r)});
  }
  if (scored.size() < 2) return std::nullopt;

  const Scored* hi = &scored.front();
  const Scored* lo = &scored.front();
  for (const auto& s : scored) {
    if (s.reward.value > hi->reward.value) hi = &s;
    if (s.reward.value < lo->reward.value) lo = &s;
  }
  if (!(hi->reward.value > lo->reward.value) || !(hi->length < lo->length)) return std::nullopt;

  PreferencePair p;
  p.pair_id = id_prefix + "length_control:" + std::to_string(hi->index) + ">" +
              std::to_string(lo->index);
  p.kind = PairKind::length_control;
  p.context = {ChatMessage::user(query)};
  p.chosen = hi->text;
  p.rejected = lo->text;
  p.chosen_reward = hi->reward;
  p.rejected_reward = lo->reward;
  p.chosen_length = hi->length;
  p.rejected_length = lo->length;
  return p;
}

}  // namespace refinery
