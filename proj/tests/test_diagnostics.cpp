#include <gtest/gtest.h>

#include "refinery/diagnostics.hpp"
#include "support/scripted.hpp"

using namespace refinery;
using refinery::testing::rs;

namespace {

RecursiveTrajectory with_rewards(double initial, std::vector<double> rewards,
                                 std::vector<std::string> texts = {}) {
  RecursiveTrajectory t;
  t.initial_response = "init";
  t.initial_reward = rs(initial);
  for (std::size_t i = 0; i < rewards.size(); ++i) {
    auto text = i < texts.size() ? texts[i] : "step " + std::to_string(i + 1);
    t.rounds.push_back({i + 1, "crit", text, rs(rewards[i]), true});
  }
  t.final_answer = t.rounds.empty() ? t.initial_response : t.rounds.back().improvement;
  return t;
}

// Judge scripted from the rendered prompt text.
MockGenerator judge_by(std::function<std::string(const std::string& a, const std::string& b)> f) {
  return MockGenerator(0, [f](const Conversation& c, std::size_t) -> std::optional<std::string> {
    const auto& text = c.back().content;
    auto grab = [&](const std::string& open, const std::string& close) {
      auto b = text.find(open) + open.size() + 1;
      return text.substr(b, text.find(close) - b - 1);
    };
    return f(grab("[The Start of Assistant A's Answer]", "[The End of Assistant A's Answer]"),
             grab("[The Start of Assistant B's Answer]", "[The End of Assistant B's Answer]"));
  });
}

}  // namespace

TEST(DiscountedReturn, Examples) {
  auto t = with_rewards(0.5, {0.7, 0.8});
  EXPECT_NEAR(discounted_return(t, 1.0), 0.3, 1e-12);
  EXPECT_NEAR(discounted_return(t, 0.5), 0.25, 1e-12);
  EXPECT_DOUBLE_EQ(discounted_return(with_rewards(0.5, {}), 0.9), 0.0);
}

TEST(DiscountedReturn, RejectsUnscoredRoundsAndBadGamma) {
  auto t = with_rewards(0.5, {0.7});
  EXPECT_THROW(discounted_return(t, 0.0), std::invalid_argument);
  EXPECT_THROW(discounted_return(t, 1.5), std::invalid_argument);
  t.rounds[0].improvement_reward.reset();
  EXPECT_THROW(discounted_return(t, 1.0), UnscoredNode);
}

TEST(IterationStats, HistogramCountsLastAcceptedRound) {
  auto rep = iteration_stats({with_rewards(0.1, {0.2}), with_rewards(0.1, {0.2, 0.3})});
  EXPECT_EQ(rep.best_round_histogram, (std::map<std::size_t, std::size_t>{{1, 1}, {2, 1}}));
  EXPECT_EQ(rep.num_trajectories, 2u);
  EXPECT_EQ(rep.per_round_count, (std::vector<std::size_t>{2, 2, 1}));

  auto none = iteration_stats({with_rewards(0.1, {}), with_rewards(0.2, {}), with_rewards(0.3, {})});
  EXPECT_EQ(none.best_round_histogram, (std::map<std::size_t, std::size_t>{{0, 3}}));
  EXPECT_THROW(iteration_stats({}), std::invalid_argument);
}

TEST(IterationStats, MeansAreOverTrajectoriesReachingTheRound) {
  auto rep = iteration_stats({with_rewards(0.2, {0.4, 0.6}, {"aaaa", "aaaaaaaa"}),
                              with_rewards(0.4, {0.8}, {"bbbbbb"})});
  ASSERT_EQ(rep.per_round_mean_reward.size(), 3u);
  EXPECT_NEAR(*rep.per_round_mean_reward[0], 0.3, 1e-12);
  EXPECT_NEAR(*rep.per_round_mean_reward[1], 0.6, 1e-12);
  EXPECT_NEAR(*rep.per_round_mean_reward[2], 0.6, 1e-12);
  // "init" = 4 chars; round 1: (4 + 6) / 2; round 2: 8
  EXPECT_EQ(rep.per_round_mean_length_chars, (std::vector<double>{4.0, 5.0, 8.0}));
  for (std::size_t i = 1; i < rep.per_round_mean_length_chars.size(); ++i)
    EXPECT_GT(rep.per_round_mean_length_chars[i], rep.per_round_mean_length_chars[i - 1]);
}

TEST(IterationStats, UnscoredRoundsHaveNoMeanReward) {
  RecursiveTrajectory t;
  t.initial_response = "x";
  t.final_answer = "x";
  auto rep = iteration_stats({t});
  EXPECT_FALSE(rep.per_round_mean_reward[0]);
}

TEST(WinRate, JudgeAlwaysPreferringCandidateA) {
  auto judge = judge_by([](const std::string& a, const std::string&) {
    return a.starts_with("ours") ? "Better. [[A]]" : "Better. [[B]]";
  });
  std::vector<PairwiseItem> items = {{"q1", "ours 1", "theirs 1"}, {"q2", "ours 2", "theirs"}};
  auto rep = pairwise_win_rate(items, judge);
  EXPECT_EQ(rep.wins, 2u);
  EXPECT_DOUBLE_EQ(rep.win_rate, 1.0);
  EXPECT_DOUBLE_EQ(rep.mean_length_a, 6.0);
  EXPECT_DOUBLE_EQ(rep.mean_length_b, 7.0);
}

TEST(WinRate, PositionalJudgeYieldsOnlyTies) {
  auto judge = judge_by([](const std::string&, const std::string&) { return "[[A]]"; });
  std::vector<PairwiseItem> items = {{"q", "x", "y"}, {"q", "long answer", "s"}};
  auto rep = pairwise_win_rate(items, judge);
  EXPECT_EQ(rep.ties, 2u);
  EXPECT_EQ(rep.wins + rep.losses, 0u);
}

TEST(WinRate, CountsWinsLossesAndTies) {
  // Prefers the shorter text; equal lengths tie.
  auto judge = judge_by([](const std::string& a, const std::string& b) {
    if (a.size() == b.size()) return std::string("[[C]]");
    return std::string(a.size() < b.size() ? "[[A]]" : "[[B]]");
  });
  std::vector<PairwiseItem> items = {
      {"q", "a", "bb"}, {"q", "a", "bbb"}, {"q", "a", "bbbb"}, {"q", "aaaaa", "b"}};
  auto rep = pairwise_win_rate(items, judge);
  EXPECT_EQ(rep.wins, 3u);
  EXPECT_EQ(rep.losses, 1u);
  EXPECT_EQ(rep.ties, 0u);
  EXPECT_DOUBLE_EQ(rep.win_rate, 0.75);
}

TEST(WinRate, SwappingSidesSwapsWinsAndLosses) {
  auto judge = judge_by([](const std::string& a, const std::string& b) {
    if (a.size() == b.size()) return std::string("[[C]]");
    return std::string(a.size() > b.size() ? "[[A]]" : "[[B]]");
  });
  std::vector<PairwiseItem> items = {
      {"q", "aaa", "b"}, {"q", "a", "bbb"}, {"q", "aa", "bb"}, {"q", "aaaa", "b"}};
  std::vector<PairwiseItem> swapped;
  for (const auto& it : items) swapped.push_back({it.prompt, it.response_b, it.response_a});
  auto fwd = pairwise_win_rate(items, judge);
  auto rev = pairwise_win_rate(swapped, judge);
  EXPECT_EQ(fwd.wins, rev.losses);
  EXPECT_EQ(fwd.losses, rev.wins);
  EXPECT_EQ(fwd.ties, rev.ties);
}

TEST(WinRate, UnparseableVerdictBecomesTieAfterRetries) {
  std::atomic<int> calls{0};
  MockGenerator judge(0, [&](const Conversation&, std::size_t) -> std::optional<std::string> {
    ++calls;
    return "I cannot decide.";
  });
  auto rep = pairwise_win_rate({{"q", "a", "b"}}, judge);
  EXPECT_EQ(rep.ties, 1u);
  EXPECT_EQ(rep.unparseable, 2u);
  EXPECT_EQ(calls.load(), 6);
  EXPECT_EQ(rep.log.size(), 2u);
}

TEST(WinRate, RetriedVerdictIsUsed) {
  MockGenerator judge(0, [](const Conversation& c, std::size_t attempt) -> std::optional<std::string> {
    if (attempt == 0) return "thinking...";
    return c.back().content.find("[The Start of Assistant A's Answer]\nmine") != std::string::npos
               ? "[[A]]"
               : "[[B]]";
  });
  auto rep = pairwise_win_rate({{"q", "mine", "other"}}, judge);
  EXPECT_EQ(rep.wins, 1u);
  EXPECT_EQ(rep.unparseable, 0u);
}

TEST(Prompts, VerdictAndRatingExtraction) {
  EXPECT_EQ(prompts::parse_verdict("A is fine [[A]] but actually [[B]]"), prompts::Verdict::b);
  EXPECT_EQ(prompts::parse_verdict("tie [[C]]"), prompts::Verdict::tie);
  EXPECT_FALSE(prompts::parse_verdict("no tag"));
  EXPECT_EQ(prompts::parse_rating("Rating: [[8]] ... Rating: [[7]]"), 7.0);
  EXPECT_EQ(prompts::parse_rating("**Rating: [[8.5]]**"), 8.5);
  EXPECT_FALSE(prompts::parse_rating("[[8]]"));
}

TEST(Prompts, PairwiseRenderingSubstitutesAllSlots) {
  auto text = prompts::render_pairwise("Q?", "first", "second");
  EXPECT_NE(text.find("[User Question]\nQ?\n"), std::string::npos);
  EXPECT_NE(text.find("[The Start of Assistant A's Answer]\nfirst\n"), std::string::npos);
  EXPECT_NE(text.find("[The Start of Assistant B's Answer]\nsecond\n"), std::string::npos);
  EXPECT_EQ(text.find('{'), std::string::npos);
}
