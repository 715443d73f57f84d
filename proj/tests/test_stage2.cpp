#include <gtest/gtest.h>

#include "refinery/stage2.hpp"
#include "support/scripted.hpp"

using namespace refinery;
using namespace refinery::testing;

namespace {

PipelineConfig cfg_rounds(std::size_t max_rounds) {
  PipelineConfig c;
  c.max_rounds = max_rounds;
  return c;
}

// Sets the four candidates of one round: improvements of criticism i, sample j.
void set_round(Script& s, const std::string& current, std::array<double, 4> r) {
  for (std::size_t i = 0; i < 2; ++i)
    for (std::size_t j = 0; j < 2; ++j) s.rewards[impr_text(crit_text(current, i), j)] = r[i * 2 + j];
}

}  // namespace

TEST(Trajectory, StopsAtFirstRejectedRound) {
  Script s;
  s.rewards["R"] = 0.4;
  set_round(s, "R", {0.1, 0.2, 0.7, 0.3});
  set_round(s, "R|c1|i0", {0.6, 0.5, 0.2, 0.1});
  ScriptedBackends b(s);
  auto t = synthesize_trajectory("q", cfg_rounds(4), b.gen, b.scorer).trajectory;
  ASSERT_EQ(t.rounds.size(), 1u);
  EXPECT_EQ(t.rounds[0].criticism, "R|c1");
  EXPECT_EQ(t.rounds[0].improvement, "R|c1|i0");
  EXPECT_DOUBLE_EQ(t.rounds[0].improvement_reward->value, 0.7);
  EXPECT_EQ(t.closing_criticism, "R|c1|i0|c0");
  EXPECT_EQ(t.final_answer, "R|c1|i0");
  EXPECT_EQ(t.prompt, "q");
  EXPECT_FALSE(t.truncated);
  EXPECT_FALSE(check_trajectory(t));
}

TEST(Trajectory, ImmediateStopKeepsInitialResponse) {
  Script s;
  s.rewards["R"] = 0.4;
  set_round(s, "R", {0.1, 0.4, 0.3, 0.2});
  ScriptedBackends b(s);
  auto t = synthesize_trajectory("q", cfg_rounds(4), b.gen, b.scorer).trajectory;
  EXPECT_TRUE(t.rounds.empty());
  EXPECT_EQ(t.final_answer, "R");
  EXPECT_EQ(t.closing_criticism, "R|c0");
}

TEST(Trajectory, MaxRoundsCapsTheSearch) {
  Script s;
  s.rewards["R"] = 0.4;
  set_round(s, "R", {0.6, 0.1, 0.1, 0.1});
  set_round(s, "R|c0|i0", {0.1, 0.8, 0.1, 0.1});
  set_round(s, "R|c0|i0|c0|i1", {0.1, 0.1, 0.1, 0.9});
  ScriptedBackends b(s);
  auto t = synthesize_trajectory("q", cfg_rounds(2), b.gen, b.scorer).trajectory;
  ASSERT_EQ(t.rounds.size(), 2u);
  EXPECT_EQ(t.final_answer, "R|c0|i0|c0|i1");
  EXPECT_FALSE(t.closing_criticism);
  EXPECT_EQ(t.rounds[1].round_index, 2u);

  ScriptedBackends c(s);
  auto longer = synthesize_trajectory("q", cfg_rounds(3), c.gen, c.scorer).trajectory;
  ASSERT_EQ(longer.rounds.size(), 3u);
  EXPECT_EQ(longer.final_answer, "R|c0|i0|c0|i1|c1|i1");
}

TEST(Trajectory, MustBeatPreviousBestNotJustInitial) {
  Script s;
  s.rewards["R"] = 0.4;
  set_round(s, "R", {0.8, 0.1, 0.1, 0.1});
  set_round(s, "R|c0|i0", {0.5, 0.7, 0.6, 0.45});
  ScriptedBackends b(s);
  auto t = synthesize_trajectory("q", cfg_rounds(4), b.gen, b.scorer).trajectory;
  ASSERT_EQ(t.rounds.size(), 1u);
  EXPECT_EQ(t.closing_criticism, "R|c0|i0|c0");
}

TEST(Trajectory, BackendFailureTruncatesAtLastCompleteRound) {
  Script s;
  s.rewards["R"] = 0.4;
  set_round(s, "R", {0.6, 0.1, 0.1, 0.1});
  s.failing = {impr_text(crit_text("R|c0|i0", 1), 0)};
  ScriptedBackends b(s);
  auto built = synthesize_trajectory("q", cfg_rounds(4), b.gen, b.scorer);
  const auto& t = built.trajectory;
  EXPECT_TRUE(t.truncated);
  ASSERT_EQ(t.rounds.size(), 1u);
  EXPECT_EQ(t.final_answer, "R|c0|i0");
  EXPECT_FALSE(t.closing_criticism);
  EXPECT_FALSE(built.log.empty());
  EXPECT_FALSE(check_trajectory(t));
}

TEST(Trajectory, InitialFailureIsAnError) {
  Script s;
  s.failing = {"R"};
  ScriptedBackends b(s);
  try {
    synthesize_trajectory("q", cfg_rounds(4), b.gen, b.scorer);
    FAIL();
  } catch (const Stage2Error& e) {
    EXPECT_TRUE(e.transport_failure);
  }
}

TEST(Trajectory, HashedBackendsAlwaysGiveMonotoneSerializableTraces) {
  for (std::uint64_t seed = 0; seed < 40; ++seed) {
    MockGenerator gen(seed);
    MockScorer::Options o;
    o.hashed = true;
    o.seed = seed;
    MockScorer scorer(o);
    auto t = synthesize_trajectory("prompt " + std::to_string(seed), cfg_rounds(4), gen, scorer)
                 .trajectory;
    EXPECT_FALSE(check_trajectory(t)) << seed;
    auto text = serialize_trajectory(t);
    auto back = parse_trajectory(text);
    EXPECT_EQ(back.final_answer, t.final_answer);
    EXPECT_EQ(back.rounds.size(), t.rounds.size());
  }
}

namespace {

// k=5 samples of the query, scored by final answer text.
struct LengthScript {
  std::vector<std::string> samples;
  std::map<std::string, double> rewards;
};

std::optional<PreferencePair> length_pair(const LengthScript& ls, std::size_t k = 5) {
  MockGenerator gen(0, [&](const Conversation&, std::size_t i) -> std::optional<std::string> {
    return ls.samples.at(i);
  });
  MockScorer scorer(MockScorer::Options{}, [&](const std::string&, const std::string& r) {
    return std::optional<double>(ls.rewards.at(r));
  });
  PipelineConfig cfg;
  cfg.length_control_samples_k = k;
  return build_length_control_pairs("q", cfg, gen, scorer);
}

std::string cot_with_final(const std::string& final_answer) {
  RecursiveTrajectory t;
  t.initial_response = "draft";
  t.final_answer = final_answer;
  t.rounds.push_back({1, "needs work", final_answer, std::nullopt, true});
  return serialize_trajectory(t);
}

}  // namespace

TEST(LengthControl, ShortBestAgainstLongWorstIsEmitted) {
  const std::string best(120, 'b'), worst(300, 'w');
  LengthScript ls;
  ls.samples = {cot_with_final("m1"), cot_with_final(best), cot_with_final("m2"),
                cot_with_final(worst), cot_with_final("m3")};
  ls.rewards = {{best, 0.9}, {worst, 0.2}, {"m1", 0.5}, {"m2", 0.4}, {"m3", 0.6}};
  auto p = length_pair(ls);
  ASSERT_TRUE(p);
  EXPECT_EQ(p->kind, PairKind::length_control);
  EXPECT_EQ(p->pair_id, "length_control:1>3");
  EXPECT_EQ(p->chosen, ls.samples[1]);
  EXPECT_EQ(p->rejected, ls.samples[3]);
  EXPECT_EQ(p->chosen_length, 120u);
  EXPECT_EQ(p->rejected_length, 300u);
  EXPECT_DOUBLE_EQ(p->chosen_reward.value, 0.9);
  EXPECT_FALSE(check_pair(*p));
}

TEST(LengthControl, BestAlsoLongestGivesNothing) {
  LengthScript ls;
  ls.samples = {"aaaaaaaaaa", "bb", "ccc", "dddd", "eeeee"};
  ls.rewards = {{"aaaaaaaaaa", 0.9}, {"bb", 0.1}, {"ccc", 0.3}, {"dddd", 0.4}, {"eeeee", 0.5}};
  EXPECT_FALSE(length_pair(ls));
}

TEST(LengthControl, EqualRewardsGiveNothing) {
  LengthScript ls;
  ls.samples = {"short", "a much longer answer"};
  ls.rewards = {{"short", 0.5}, {"a much longer answer", 0.5}};
  EXPECT_FALSE(length_pair(ls, 2));
}

TEST(LengthControl, PlainCompletionsAreMeasuredWhole) {
  LengthScript ls;
  ls.samples = {"tiny", "medium one", "a very long rambling answer", "mid", "okay"};
  ls.rewards = {{"tiny", 0.8}, {"medium one", 0.3}, {"a very long rambling answer", 0.1},
                {"mid", 0.5}, {"okay", 0.2}};
  auto p = length_pair(ls);
  ASSERT_TRUE(p);
  EXPECT_EQ(p->chosen, "tiny");
  EXPECT_EQ(p->rejected, "a very long rambling answer");
}

TEST(LengthControl, NeedsAtLeastTwoSamples) {
  LengthScript ls;
  ls.samples = {"a"};
  ls.rewards = {{"a", 0.1}};
  EXPECT_THROW(length_pair(ls, 1), ConfigError);
}

TEST(LengthControl, RequestsCotTokenBudgetInOneCall) {
  std::size_t seen_n = 0, seen_tokens = 0;
  class Probe final : public GeneratorBackend {
   public:
    Probe(std::size_t& n, std::size_t& t) : n_(n), t_(t) {}
    std::vector<std::string> generate(const Conversation&, const SamplingParams& p,
                                      std::size_t) override {
      n_ = p.n;
      t_ = p.max_tokens;
      return std::vector<std::string>(p.n, "same");
    }
    std::string id() const override { return "probe"; }

   private:
    std::size_t& n_;
    std::size_t& t_;
  } probe(seen_n, seen_tokens);
  MockScorer scorer;
  PipelineConfig cfg;
  EXPECT_FALSE(build_length_control_pairs("q", cfg, probe, scorer));
  EXPECT_EQ(seen_n, 5u);
  EXPECT_EQ(seen_tokens, cfg.cot_max_tokens);
}

TEST(FinalAnswerOf, FallsBackToWholeText) {
  EXPECT_EQ(final_answer_of(cot_with_final("done")), "done");
  EXPECT_EQ(final_answer_of("  just text \n"), "just text");
}
