#pragma once

#include <cmath>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "refinery/backends.hpp"
#include "refinery/core.hpp"
#include "refinery/prompts.hpp"

namespace refinery {

/// Sum over rounds t (0-based) of gamma^t * (r(round t) - r(previous state)),
/// the previous state of round 0 being the initial response.
inline double discounted_return(const RecursiveTrajectory& t, double gamma) {
  if (!(gamma > 0.0 && gamma <= 1.0)) throw std::invalid_argument("gamma must lie in (0, 1]");
  if (!t.initial_reward) throw UnscoredNode("trajectory has no initial reward");
  double total = 0.0;
  double discount = 1.0;
  const RewardScore* prev = &*t.initial_reward;
  for (const auto& r : t.rounds) {
    if (!r.improvement_reward)
      throw UnscoredNode("round " + std::to_string(r.round_index) + " has no reward");
    total += discount * edge_reward(*r.improvement_reward, *prev);
    prev = &*r.improvement_reward;
    discount *= gamma;
  }
  return total;
}

/// Per-round statistics. Index 0 of the per-round series is the initial
/// response; index r >= 1 is accepted round r.
struct IterationReport {
  std::vector<std::optional<double>> per_round_mean_reward;
  std::vector<double> per_round_mean_length_chars;
  std::vector<std::size_t> per_round_count;
  std::map<std::size_t, std::size_t> best_round_histogram;  // last accepted round -> count
  std::size_t num_trajectories = 0;
};

inline IterationReport iteration_stats(const std::vector<RecursiveTrajectory>& trajs) {
  if (trajs.empty()) throw std::invalid_argument("iteration_stats needs at least one trajectory");
  std::size_t depth = 0;
  for (const auto& t : trajs) depth = std::max(depth, t.rounds.size());

  std::vector<double> reward_sum(depth + 1, 0.0), length_sum(depth + 1, 0.0);
  std::vector<std::size_t> reward_n(depth + 1, 0), reach(depth + 1, 0);

  IterationReport rep;
  rep.num_trajectories = trajs.size();
  for (const auto& t : trajs) {
    reach[0] += 1;
    length_sum[0] += static_cast<double>(char_length(t.initial_response));
    if (t.initial_reward) {
      reward_sum[0] += t.initial_reward->value;
      reward_n[0] += 1;
    }
    for (std::size_t i = 0; i < t.rounds.size(); ++i) {
      const auto& r = t.rounds[i];
      reach[i + 1] += 1;
      length_sum[i + 1] += static_cast<double>(char_length(r.improvement));
      if (r.improvement_reward) {
        reward_sum[i + 1] += r.improvement_reward->value;
        reward_n[i + 1] += 1;
      }
    }
    rep.best_round_histogram[t.rounds.size()] += 1;
  }
  for (std::size_t r = 0; r <= depth; ++r) {
    rep.per_round_count.push_back(reach[r]);
    rep.per_round_mean_length_chars.push_back(length_sum[r] / static_cast<double>(reach[r]));
    if (reward_n[r] > 0)
      rep.per_round_mean_reward.push_back(reward_sum[r] / static_cast<double>(reward_n[r]));
    else
      rep.per_round_mean_reward.push_back(std::nullopt);
  }
  return rep;
}

struct PairwiseItem {
  std::string prompt;
  std::string response_a;
  std::string response_b;
};

struct WinRateReport {
  std::size_t wins = 0;
  std::size_t losses = 0;
  std::size_t ties = 0;
  double win_rate = 0.0;
  double mean_length_a = 0.0;
  double mean_length_b = 0.0;
  std::size_t unparseable = 0;  // judgements with no verdict after all attempts
  std::vector<std::string> log;
};

struct JudgeOptions {
  SamplingParams params{0.0, 1.0, 1024, 1};
  int max_attempts = 3;  // re-asks when the verdict tag is missing
};

/// Judges each item twice with the candidates in both positions. A counts as
/// winning only if preferred in both orders, losing only if B is preferred in
/// both orders; anything else is a tie.
inline WinRateReport pairwise_win_rate(const std::vector<PairwiseItem>& items,
                                       GeneratorBackend& judge, const JudgeOptions& opts = {}) {
  if (items.empty()) throw std::invalid_argument("pairwise_win_rate needs at least one item");

  struct Judged {
    std::optional<prompts::Verdict> verdict;
    std::string note;
  };
  auto ask = [&](const std::string& q, const std::string& first, const std::string& second) {
    const Conversation conv{ChatMessage::user(prompts::render_pairwise(q, first, second))};
    SamplingParams p = opts.params;
    p.n = 1;
    for (int attempt = 0; attempt < opts.max_attempts; ++attempt) {
      auto reply = judge.generate(conv, p, static_cast<std::size_t>(attempt)).at(0);
      if (auto v = prompts::parse_verdict(reply)) return Judged{v, {}};
    }
    return Judged{std::nullopt, "no verdict after " + std::to_string(opts.max_attempts) + " attempts"};
  };

  enum class Outcome3 { win, loss, tie };
  struct ItemResult {
    Outcome3 outcome;
    std::size_t unparseable;
    std::vector<std::string> notes;
  };
  auto results = fan_out(items.size(), [&](std::size_t i) {
    const auto& it = items[i];
    auto forward = ask(it.prompt, it.response_a, it.response_b);
    auto swapped = ask(it.prompt, it.response_b, it.response_a);
    ItemResult r{Outcome3::tie, 0, {}};
    for (const auto* j : {&forward, &swapped})
      if (!j->verdict) {
        ++r.unparseable;
        r.notes.push_back("item " + std::to_string(i) + ": " + j->note);
      }
    using prompts::Verdict;
    if (forward.verdict == Verdict::a && swapped.verdict == Verdict::b) r.outcome = Outcome3::win;
    if (forward.verdict == Verdict::b && swapped.verdict == Verdict::a) r.outcome = Outcome3::loss;
    return r;
  });

  WinRateReport rep;
  double len_a = 0.0, len_b = 0.0;
  for (std::size_t i = 0; i < items.size(); ++i) {
    results[i].rethrow();
    const auto& r = *results[i].value;
    switch (r.outcome) {
      case Outcome3::win: ++rep.wins; break;
      case Outcome3::loss: ++rep.losses; break;
      case Outcome3::tie: ++rep.ties; break;
    }
    rep.unparseable += r.unparseable;
    rep.log.insert(rep.log.end(), r.notes.begin(), r.notes.end());
    len_a += static_cast<double>(char_length(items[i].response_a));
    len_b += static_cast<double>(char_length(items[i].response_b));
  }
  const auto n = static_cast<double>(items.size());
  rep.win_rate = static_cast<double>(rep.wins) / n;
  rep.mean_length_a = len_a / n;
  rep.mean_length_b = len_b / n;
  return rep;
}

}  // namespace refinery
