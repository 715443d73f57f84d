#pragma once

// Long-form recursive chain-of-thought text: a single assistant message that
// interleaves answer, criticism and improvement blocks between two special
// tokens and ends with the final answer.
//
//   <|Start of recursive criticism and improvement|>
//   ## Let's answer the question first:
//
//   {initial response}
//
//   ## Now, let's try to criticize this answer:
//
//   {criticism}
//
//   ## Okey, let's improve the above answer based on the criticism:
//
//   {improvement}
//   ...
//   ## Okay, now it’s almost done.
//   <|End of recursive criticism and improvement|>
//
//   Final answer:
//   {final answer}

#include <array>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "refinery/backends.hpp"
#include "refinery/core.hpp"

namespace refinery {

struct CotTemplate {
  std::string start_token = "<|Start of recursive criticism and improvement|>";
  std::string end_token = "<|End of recursive criticism and improvement|>";
  std::string answer_header = "## Let's answer the question first:";
  std::string criticize_header = "## Now, let's try to criticize this answer:";
  std::string improve_header = "## Okey, let's improve the above answer based on the criticism:";
  // The apostrophe is U+2019, as in the reference transcripts.
  std::string done_header = "## Okay, now it’s almost done.";
  std::string final_marker = "Final answer:";

  std::array<std::string_view, 7> markers() const {
    return {start_token,    end_token,   answer_header, criticize_header,
            improve_header, done_header, final_marker};
  }

  bool valid() const {
    auto m = markers();
    for (std::size_t i = 0; i < m.size(); ++i) {
      if (m[i].empty()) return false;
      for (std::size_t j = i + 1; j < m.size(); ++j)
        if (m[i] == m[j]) return false;
    }
    return true;
  }
};

struct CotParseError : std::runtime_error {
  CotParseError(std::string marker_, std::size_t offset_, const std::string& what)
      : std::runtime_error(what + " (marker '" + marker_ + "' at byte " + std::to_string(offset_) +
                           ")"),
        marker(std::move(marker_)),
        offset(offset_) {}
  std::string marker;
  std::size_t offset;
};

namespace detail {

inline bool is_header_line(std::string_view line, const CotTemplate& tpl) {
  auto t = trim(line);
  return t == tpl.answer_header || t == tpl.criticize_header || t == tpl.improve_header ||
         t == tpl.done_header;
}

/// Texts embedded in the CoT must be trimmed, non-empty, free of the special
/// tokens and must not contain a line that reads as a header.
inline std::optional<std::string> check_cot_text(std::string_view text, const CotTemplate& tpl) {
  if (text.empty()) return "empty text";
  if (trim(text) != text) return "text has leading or trailing whitespace";
  if (text.find(tpl.start_token) != std::string_view::npos ||
      text.find(tpl.end_token) != std::string_view::npos)
    return "text contains a special token";
  std::size_t pos = 0;
  while (pos <= text.size()) {
    auto nl = text.find('\n', pos);
    auto line = text.substr(pos, nl == std::string_view::npos ? std::string_view::npos : nl - pos);
    if (is_header_line(line, tpl)) return "text contains a control header line";
    if (nl == std::string_view::npos) break;
    pos = nl + 1;
  }
  return std::nullopt;
}

}  // namespace detail

/// True when `text` can be embedded in a serialized trajectory and recovered
/// byte-for-byte.
inline bool embeddable(std::string_view text, const CotTemplate& tpl = {}) {
  return !detail::check_cot_text(text, tpl);
}

inline std::optional<std::string> check_serializable(const RecursiveTrajectory& t,
                                                     const CotTemplate& tpl = {}) {
  auto check = [&](std::string_view what, std::string_view text) -> std::optional<std::string> {
    if (auto e = detail::check_cot_text(text, tpl)) return std::string(what) + ": " + *e;
    return std::nullopt;
  };
  if (auto e = check("initial response", t.initial_response)) return e;
  for (const auto& r : t.rounds) {
    if (auto e = check("criticism", r.criticism)) return e;
    if (auto e = check("improvement", r.improvement)) return e;
  }
  if (t.closing_criticism)
    if (auto e = check("closing criticism", *t.closing_criticism)) return e;
  if (auto e = check("final answer", t.final_answer)) return e;
  return std::nullopt;
}

inline std::string serialize_trajectory(const RecursiveTrajectory& t, const CotTemplate& tpl = {}) {
  if (auto e = check_serializable(t, tpl)) throw std::invalid_argument("cannot serialize: " + *e);
  std::string out;
  auto block = [&](const std::string& header, const std::string& body) {
    out += header;
    out += "\n\n";
    out += body;
    out += "\n\n";
  };
  out += tpl.start_token;
  out += '\n';
  block(tpl.answer_header, t.initial_response);
  for (const auto& r : t.rounds) {
    block(tpl.criticize_header, r.criticism);
    block(tpl.improve_header, r.improvement);
  }
  if (t.closing_criticism) block(tpl.criticize_header, *t.closing_criticism);
  out += tpl.done_header;
  out += '\n';
  out += tpl.end_token;
  out += "\n\n";
  out += tpl.final_marker;
  out += '\n';
  out += t.final_answer;
  return out;
}

/// Inverse of serialize_trajectory. Tolerates extra whitespace around blocks.
/// The prompt is left empty and rewards are absent.
inline RecursiveTrajectory parse_trajectory(std::string_view text, const CotTemplate& tpl = {}) {
  auto fail = [](const std::string& marker, std::size_t offset, const std::string& what) {
    throw CotParseError(marker, offset, what);
  };
  constexpr auto npos = std::string_view::npos;

  const auto start = text.find(tpl.start_token);
  if (start == npos) fail(tpl.start_token, 0, "missing start token");
  if (auto dup = text.find(tpl.start_token, start + 1); dup != npos)
    fail(tpl.start_token, dup, "duplicated start token");

  const auto body_begin = start + tpl.start_token.size();
  const auto end = text.find(tpl.end_token, body_begin);
  if (end == npos) fail(tpl.end_token, text.size(), "missing end token");
  if (auto dup = text.find(tpl.end_token, end + 1); dup != npos)
    fail(tpl.end_token, dup, "duplicated end token");

  const auto after_end = end + tpl.end_token.size();
  const auto fm = text.find(tpl.final_marker, after_end);
  if (fm == npos) fail(tpl.final_marker, after_end, "missing final answer marker");
  if (!trim(text.substr(after_end, fm - after_end)).empty())
    fail(tpl.final_marker, after_end, "unexpected text between end token and final answer");

  // Split the body into (header, content) blocks on header lines.
  struct Block {
    std::string_view header;
    std::size_t offset;
    std::size_t content_begin;
    std::size_t content_end;
  };
  std::vector<Block> blocks;
  std::size_t pos = body_begin;
  while (pos < end) {
    auto nl = text.find('\n', pos);
    if (nl == npos || nl > end) nl = end;
    const auto line = trim(text.substr(pos, nl - pos));
    std::string_view header;
    for (const std::string* h :
         {&tpl.answer_header, &tpl.criticize_header, &tpl.improve_header, &tpl.done_header})
      if (line == *h) header = *h;
    if (!header.empty()) {
      if (!blocks.empty()) blocks.back().content_end = pos;
      blocks.push_back({header, pos, nl, end});
    } else if (blocks.empty() && !line.empty()) {
      fail(tpl.answer_header, pos, "text before the answer header");
    }
    pos = nl + 1;
  }

  if (blocks.empty() || blocks.front().header != tpl.answer_header)
    fail(tpl.answer_header, body_begin, "missing answer header");
  if (blocks.back().header != tpl.done_header) fail(tpl.done_header, end, "missing done header");
  if (!trim(text.substr(blocks.back().content_begin, end - blocks.back().content_begin)).empty())
    fail(tpl.end_token, blocks.back().content_begin, "text between done header and end token");

  auto content = [&](const Block& b) {
    auto c = trim(text.substr(b.content_begin, b.content_end - b.content_begin));
    if (c.empty()) fail(std::string(b.header), b.offset, "empty block");
    return c;
  };

  RecursiveTrajectory t;
  t.initial_response = content(blocks.front());
  // Remaining blocks before done: (criticize improve)* [criticize]
  std::size_t i = 1;
  const std::size_t done = blocks.size() - 1;
  for (std::size_t k = 1; k < done; ++k)
    if (blocks[k].header == tpl.answer_header || blocks[k].header == tpl.done_header)
      fail(std::string(blocks[k].header), blocks[k].offset, "duplicated header");
  while (i < done) {
    if (blocks[i].header != tpl.criticize_header)
      fail(std::string(blocks[i].header), blocks[i].offset, "expected a criticism block");
    auto crit = content(blocks[i]);
    if (i + 1 < done) {
      if (blocks[i + 1].header != tpl.improve_header)
        fail(std::string(blocks[i + 1].header), blocks[i + 1].offset,
             "expected an improvement block");
      TrajectoryRound r;
      r.round_index = t.rounds.size() + 1;
      r.criticism = std::move(crit);
      r.improvement = content(blocks[i + 1]);
      r.accepted = true;
      t.rounds.push_back(std::move(r));
      i += 2;
    } else {
      t.closing_criticism = std::move(crit);
      i += 1;
    }
  }

  t.final_answer = trim(text.substr(fm + tpl.final_marker.size()));
  if (t.final_answer.empty()) fail(tpl.final_marker, fm, "empty final answer");
  return t;
}

}  // namespace refinery
