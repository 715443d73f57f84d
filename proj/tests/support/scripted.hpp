#pragma once

// Scripted backends shared by the unit and acceptance tests. Completions are
// derived from the shape of the conversation so a reward table keyed by text
// describes a whole tree or greedy search.
//
//   [user q]                               -> initial response text
//   [..., user(judge)]  with sample i      -> "<current>|c<i>"
//   [..., user(revise)] with sample j      -> "<criticism>|i<j>"

#include <functional>
#include <map>
#include <set>
#include <string>

#include "refinery/backends.hpp"
#include "refinery/prompts.hpp"

namespace refinery::testing {

struct Script {
  std::string initial = "R";
  std::map<std::string, double> rewards;  // response text -> reward
  std::set<std::string> failing;          // texts whose generation throws
  double default_reward = 0.0;
};

inline std::string crit_text(const std::string& current, std::size_t i) {
  return current + "|c" + std::to_string(i);
}
inline std::string impr_text(const std::string& crit, std::size_t j) {
  return crit + "|i" + std::to_string(j);
}

inline CompletionRule script_rule(std::shared_ptr<const Script> s) {
  return [s](const Conversation& c, std::size_t index) -> std::optional<std::string> {
    std::string out;
    if (c.size() == 1) {
      out = s->initial;
    } else if (c.back().content == prompts::judge) {
      out = crit_text(c[c.size() - 2].content, index);
    } else if (c.back().content == prompts::revise) {
      out = impr_text(c[c.size() - 2].content, index);
    } else {
      return std::nullopt;
    }
    if (s->failing.count(out)) throw TransportError("scripted failure for '" + out + "'");
    return out;
  };
}

struct ScriptedBackends {
  std::shared_ptr<Script> script;
  MockGenerator gen;
  MockScorer scorer;

  explicit ScriptedBackends(Script s)
      : script(std::make_shared<Script>(std::move(s))),
        gen(0, script_rule(script)),
        scorer(MockScorer::Options{script->default_reward},
               [sp = script](const std::string&, const std::string& r) -> std::optional<double> {
                 if (auto it = sp->rewards.find(r); it != sp->rewards.end()) return it->second;
                 return std::nullopt;
               }) {}
};

inline RewardScore rs(double v) { return {v, "mock-scorer"}; }

}  // namespace refinery::testing
