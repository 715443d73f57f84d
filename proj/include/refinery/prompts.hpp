#pragma once

// Prompt texts used to elicit criticisms and improvements, plus the pairwise
// judging prompt and verdict extraction.

#include <optional>
#include <regex>
#include <string>
#include <string_view>

#include "refinery/core.hpp"

namespace refinery::prompts {

inline constexpr std::string_view judge =
    "Please act as an impartial judge and evaluate the quality of the response provided by an "
    "AI assistant to the user question displayed above. Your evaluation should consider factors "
    "such as the helpfulness, relevance, accuracy, depth, creativity, and level of detail of the "
    "response. Your evaluation should focus on the assistant's answer to the last user question. "
    "Begin your evaluation by providing a short explanation. Be as objective as possible. After "
    "providing your explanation, you must rate the response at the end of your answer on a scale "
    "of 1 to 10 by strictly following this format: \"[[rating]]\", for example: \"Rating: "
    "[[5]]\".";

inline constexpr std::string_view revise =
    "Please revise the AI assistant's response based on the evaluation provided above, "
    "addressing any shortcomings mentioned in the review. Your revision should focus solely on "
    "improving the assistant's answer to the last user question. Provide the revised response "
    "directly, without any additional commentary.";

// Two-candidate variant of the judge prompt. Candidates are substituted for
// {question}, {answer_a} and {answer_b}.
inline constexpr std::string_view pairwise_judge =
    "Please act as an impartial judge and evaluate the quality of the responses provided by two "
    "AI assistants to the user question displayed below. Your evaluation should consider factors "
    "such as the helpfulness, relevance, accuracy, depth, creativity, and level of detail of the "
    "responses. Avoid any position biases and ensure that the order in which the responses were "
    "presented does not influence your decision. Do not allow the length of the responses to "
    "influence your evaluation. Begin your evaluation by comparing the two responses and provide "
    "a short explanation. Be as objective as possible. After providing your explanation, output "
    "your final verdict by strictly following this format: \"[[A]]\" if assistant A is better, "
    "\"[[B]]\" if assistant B is better, and \"[[C]]\" for a tie.\n"
    "\n"
    "[User Question]\n"
    "{question}\n"
    "\n"
    "[The Start of Assistant A's Answer]\n"
    "{answer_a}\n"
    "[The End of Assistant A's Answer]\n"
    "\n"
    "[The Start of Assistant B's Answer]\n"
    "{answer_b}\n"
    "[The End of Assistant B's Answer]";

/// [user(query), assistant(response), user(judge)]
inline Conversation criticism_context(const std::string& query, const std::string& response) {
  return {ChatMessage::user(query), ChatMessage::assistant(response),
          ChatMessage::user(std::string(judge))};
}

/// criticism_context + [assistant(criticism), user(revise)]
inline Conversation improvement_context(const std::string& query, const std::string& response,
                                        const std::string& criticism) {
  auto c = criticism_context(query, response);
  c.push_back(ChatMessage::assistant(criticism));
  c.push_back(ChatMessage::user(std::string(revise)));
  return c;
}

inline std::string render_pairwise(std::string_view question, std::string_view a,
                                   std::string_view b) {
  std::string out;
  std::string_view tpl = pairwise_judge;
  auto emit = [&](std::string_view key, std::string_view value) {
    auto pos = tpl.find(key);
    out.append(tpl.substr(0, pos));
    out.append(value);
    tpl.remove_prefix(pos + key.size());
  };
  emit("{question}", question);
  emit("{answer_a}", a);
  emit("{answer_b}", b);
  out.append(tpl);
  return out;
}

enum class Verdict { a, b, tie };

/// Last "[[A]]" / "[[B]]" / "[[C]]" tag in a judge reply.
inline std::optional<Verdict> parse_verdict(std::string_view reply) {
  std::optional<Verdict> v;
  std::size_t best = std::string_view::npos;
  auto probe = [&](std::string_view tag, Verdict value) {
    auto pos = reply.rfind(tag);
    if (pos != std::string_view::npos && (best == std::string_view::npos || pos > best)) {
      best = pos;
      v = value;
    }
  };
  probe("[[A]]", Verdict::a);
  probe("[[B]]", Verdict::b);
  probe("[[C]]", Verdict::tie);
  return v;
}

/// Extracts n from the last "Rating: [[n]]" in a single-response judgement.
inline std::optional<double> parse_rating(const std::string& reply) {
  static const std::regex re(R"(Rating:\s*\[\[\s*(\d+(?:\.\d+)?)\s*\]\])");
  std::optional<double> out;
  for (auto it = std::sregex_iterator(reply.begin(), reply.end(), re); it != std::sregex_iterator();
       ++it)
    out = std::stod((*it)[1].str());
  return out;
}

}  // namespace refinery::prompts
