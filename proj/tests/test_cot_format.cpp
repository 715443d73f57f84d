#include <random>

#include <gtest/gtest.h>

#include "refinery/cot_format.hpp"
#include "support/cot_skeleton.hpp"

using namespace refinery;

namespace {

RecursiveTrajectory two_rounds(bool closing) {
  RecursiveTrajectory t;
  t.initial_response = "first answer";
  t.rounds.push_back({1, "too short", "second answer", std::nullopt, true});
  t.rounds.push_back({2, "missing units", "third answer\n\nwith a paragraph", std::nullopt, true});
  if (closing) t.closing_criticism = "good enough";
  t.final_answer = t.rounds.back().improvement;
  return t;
}

std::size_t count(std::string_view hay, std::string_view needle) {
  std::size_t n = 0;
  for (auto p = hay.find(needle); p != std::string_view::npos; p = hay.find(needle, p + 1)) ++n;
  return n;
}

}  // namespace

TEST(CotTemplate, MarkersAreDistinctAndNonEmpty) {
  CotTemplate tpl;
  EXPECT_TRUE(tpl.valid());
  EXPECT_EQ(tpl.done_header, "## Okay, now it’s almost done.");
  tpl.final_marker = tpl.end_token;
  EXPECT_FALSE(tpl.valid());
}

TEST(Serialize, ZeroRoundLayoutIsExact) {
  RecursiveTrajectory t;
  t.initial_response = "Paris.";
  t.final_answer = "Paris.";
  EXPECT_EQ(serialize_trajectory(t),
            "<|Start of recursive criticism and improvement|>\n"
            "## Let's answer the question first:\n"
            "\n"
            "Paris.\n"
            "\n"
            "## Okay, now it’s almost done.\n"
            "<|End of recursive criticism and improvement|>\n"
            "\n"
            "Final answer:\n"
            "Paris.");
}

TEST(Serialize, OneRoundWithClosingCriticismLayoutIsExact) {
  RecursiveTrajectory t;
  t.initial_response = "A";
  t.rounds.push_back({1, "C1", "B", std::nullopt, true});
  t.closing_criticism = "C2";
  t.final_answer = "B";
  EXPECT_EQ(serialize_trajectory(t),
            "<|Start of recursive criticism and improvement|>\n"
            "## Let's answer the question first:\n\nA\n\n"
            "## Now, let's try to criticize this answer:\n\nC1\n\n"
            "## Okey, let's improve the above answer based on the criticism:\n\nB\n\n"
            "## Now, let's try to criticize this answer:\n\nC2\n\n"
            "## Okay, now it’s almost done.\n"
            "<|End of recursive criticism and improvement|>\n\n"
            "Final answer:\nB");
}

TEST(Serialize, TwoRoundsGiveTwoBlockPairs) {
  CotTemplate tpl;
  auto text = serialize_trajectory(two_rounds(false));
  EXPECT_EQ(count(text, tpl.criticize_header), 2u);
  EXPECT_EQ(count(text, tpl.improve_header), 2u);
  auto closing = serialize_trajectory(two_rounds(true));
  EXPECT_EQ(count(closing, tpl.criticize_header), 3u);
  EXPECT_EQ(count(closing, tpl.improve_header), 2u);
  EXPECT_EQ(closing.find('\r'), std::string::npos);
  EXPECT_EQ(closing.find(" \n"), std::string::npos);
}

TEST(Serialize, RefusesTextsThatWouldNotRoundTrip) {
  auto t = two_rounds(false);
  t.rounds[0].criticism = " padded";
  EXPECT_THROW(serialize_trajectory(t), std::invalid_argument);
  t = two_rounds(false);
  t.rounds[0].improvement = "x\n## Now, let's try to criticize this answer:\ny";
  EXPECT_THROW(serialize_trajectory(t), std::invalid_argument);
  t = two_rounds(false);
  t.initial_response = "<|End of recursive criticism and improvement|>";
  EXPECT_THROW(serialize_trajectory(t), std::invalid_argument);
}

TEST(Parse, RoundTripsTexts) {
  for (bool closing : {false, true}) {
    auto t = two_rounds(closing);
    auto back = parse_trajectory(serialize_trajectory(t));
    EXPECT_EQ(back, t);
  }
}

TEST(Parse, AcceptsCrlfAndExtraBlankLines) {
  std::string text =
      "<|Start of recursive criticism and improvement|>\r\n"
      "## Let's answer the question first:\r\n\r\n\r\n"
      "A\r\n\r\n"
      "## Okay, now it’s almost done.\r\n"
      "<|End of recursive criticism and improvement|>\r\n\r\n"
      "Final answer:\r\nA\r\n";
  auto t = parse_trajectory(text);
  EXPECT_EQ(t.initial_response, "A");
  EXPECT_EQ(t.final_answer, "A");
  EXPECT_TRUE(t.rounds.empty());
}

TEST(Parse, MissingEndTokenNamesTheMarker) {
  auto text = serialize_trajectory(two_rounds(false));
  CotTemplate tpl;
  text.erase(text.find(tpl.end_token), tpl.end_token.size());
  try {
    parse_trajectory(text);
    FAIL();
  } catch (const CotParseError& e) {
    EXPECT_EQ(e.marker, tpl.end_token);
    EXPECT_EQ(e.offset, text.size());
  }
}

TEST(Parse, ReportsFirstOffendingMarker) {
  CotTemplate tpl;
  auto good = serialize_trajectory(two_rounds(false));

  auto no_start = good.substr(tpl.start_token.size());
  try {
    parse_trajectory(no_start);
    FAIL();
  } catch (const CotParseError& e) {
    EXPECT_EQ(e.marker, tpl.start_token);
  }

  auto dup_start = good + "\n" + tpl.start_token;
  try {
    parse_trajectory(dup_start);
    FAIL();
  } catch (const CotParseError& e) {
    EXPECT_EQ(e.marker, tpl.start_token);
    EXPECT_EQ(e.offset, good.size() + 1);
  }

  auto no_final = good.substr(0, good.find(tpl.final_marker));
  try {
    parse_trajectory(no_final);
    FAIL();
  } catch (const CotParseError& e) {
    EXPECT_EQ(e.marker, tpl.final_marker);
  }

  auto no_done = good;
  no_done.erase(no_done.find(tpl.done_header), tpl.done_header.size());
  try {
    parse_trajectory(no_done);
    FAIL();
  } catch (const CotParseError& e) {
    EXPECT_EQ(e.marker, tpl.done_header);
  }

  auto two_improves = good;
  auto pos = two_improves.find(tpl.criticize_header);
  two_improves.replace(pos, tpl.criticize_header.size(), tpl.improve_header);
  try {
    parse_trajectory(two_improves);
    FAIL();
  } catch (const CotParseError& e) {
    EXPECT_EQ(e.marker, tpl.improve_header);
    EXPECT_EQ(e.offset, pos);
  }
}

TEST(Parse, EmptyBlockIsAnError) {
  std::string text =
      "<|Start of recursive criticism and improvement|>\n"
      "## Let's answer the question first:\n\nA\n\n"
      "## Now, let's try to criticize this answer:\n\n\n"
      "## Okay, now it’s almost done.\n"
      "<|End of recursive criticism and improvement|>\n\nFinal answer:\nA";
  EXPECT_THROW(parse_trajectory(text), CotParseError);
}

TEST(Parse, PlanetsSkeletonHasTwoCriticismsAndOneImprovement) {
  auto t = parse_trajectory(refinery::testing::planets_cot);
  ASSERT_EQ(t.rounds.size(), 1u);
  ASSERT_TRUE(t.closing_criticism);
  EXPECT_TRUE(t.initial_response.starts_with("Planets in our solar system:"));
  EXPECT_TRUE(t.rounds[0].criticism.starts_with("**Rating: [[8]]**"));
  EXPECT_TRUE(t.rounds[0].improvement.starts_with("Planets in our solar system, with a note"));
  EXPECT_TRUE(t.closing_criticism->starts_with("**Rating: [[8]]**\nWell organized."));
  EXPECT_EQ(t.final_answer, t.rounds[0].improvement);
}

TEST(Parse, SerializingTheSkeletonReproducesIt) {
  auto t = parse_trajectory(refinery::testing::planets_cot);
  EXPECT_EQ(serialize_trajectory(t), refinery::testing::planets_cot);
}

TEST(Serialize, IsInjectiveOnSmallTrajectories) {
  std::mt19937_64 rng(9);
  const std::vector<std::string> words = {"a", "b", "a b", "b\na", "c"};
  std::map<std::string, RecursiveTrajectory> seen;
  for (int i = 0; i < 2000; ++i) {
    RecursiveTrajectory t;
    t.initial_response = words[rng() % words.size()];
    const auto n = rng() % 3;
    for (std::size_t r = 0; r < n; ++r)
      t.rounds.push_back({r + 1, words[rng() % words.size()], words[rng() % words.size()],
                          std::nullopt, true});
    if (rng() % 2) t.closing_criticism = words[rng() % words.size()];
    t.final_answer = t.rounds.empty() ? t.initial_response : t.rounds.back().improvement;
    auto text = serialize_trajectory(t);
    auto [it, inserted] = seen.emplace(text, t);
    if (!inserted) {
      EXPECT_EQ(it->second, t);
    }
  }
}
