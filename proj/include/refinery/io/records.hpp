#pragma once

// JSONL record codecs for every artifact the pipeline reads or writes, plus
// structural + invariant checks used by `refinery validate`.
//
//   prompts       {"id", "prompt"}
//   pairs         {"pair_id", "kind", "context": [{"role", "content"}], "chosen",
//                  "rejected", "chosen_reward", "rejected_reward"}
//   sft           {"messages": [{"role", "content"}]}
//   trees         {"id", "query", "root_response_id", "usable", "dropped",
//                  "rejected_count", "nodes": [...]}
//   trajectories  {"id", "prompt", "initial_response", "initial_reward", "rounds",
//                  "closing_criticism", "final_answer", "truncated", "serialized_cot"}
//   responses     {"id", "prompt", "response"}

#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "refinery/core.hpp"
#include "refinery/cot_format.hpp"
#include "refinery/stage2.hpp"

namespace refinery::io {

using json = nlohmann::ordered_json;

struct RecordError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Encoding
// ---------------------------------------------------------------------------

inline json to_json(const ChatMessage& m) {
  return {{"role", std::string(to_string(m.role))}, {"content", m.content}};
}

inline json to_json(const Conversation& c) {
  json arr = json::array();
  for (const auto& m : c) arr.push_back(to_json(m));
  return arr;
}

inline json to_json(const RewardScore& r) { return {{"value", r.value}, {"scorer_id", r.scorer_id}}; }

inline json to_json(const std::optional<RewardScore>& r) { return r ? to_json(*r) : json(nullptr); }

inline json pair_record(const PreferencePair& p) {
  return {{"pair_id", p.pair_id},
          {"kind", std::string(to_string(p.kind))},
          {"context", to_json(p.context)},
          {"chosen", p.chosen},
          {"rejected", p.rejected},
          {"chosen_reward", p.chosen_reward.value},
          {"rejected_reward", p.rejected_reward.value}};
}

inline json sft_record(const Conversation& messages) { return {{"messages", to_json(messages)}}; }

inline json tree_record(const std::string& id, const RefinementTree& t, std::size_t dropped,
                        std::size_t rejected_count) {
  json nodes = json::array();
  for (const auto& n : t.nodes()) {
    nodes.push_back({{"node_id", n.node_id},
                     {"kind", std::string(to_string(n.kind))},
                     {"text", n.text},
                     {"parent_id", n.parent_id ? json(*n.parent_id) : json(nullptr)},
                     {"children", n.children},
                     {"reward", to_json(n.reward)}});
  }
  return {{"id", id},
          {"query", t.query()},
          {"root_response_id", t.root_response_id() ? json(*t.root_response_id()) : json(nullptr)},
          {"usable", t.usable()},
          {"dropped", dropped},
          {"rejected_count", rejected_count},
          {"nodes", std::move(nodes)}};
}

inline json trajectory_record(const std::string& id, const RecursiveTrajectory& t,
                              const CotTemplate& tpl = {}) {
  json rounds = json::array();
  for (const auto& r : t.rounds) {
    rounds.push_back({{"round_index", r.round_index},
                      {"criticism", r.criticism},
                      {"improvement", r.improvement},
                      {"improvement_reward", to_json(r.improvement_reward)},
                      {"accepted", r.accepted}});
  }
  return {{"id", id},
          {"prompt", t.prompt},
          {"initial_response", t.initial_response},
          {"initial_reward", to_json(t.initial_reward)},
          {"rounds", std::move(rounds)},
          {"closing_criticism", t.closing_criticism ? json(*t.closing_criticism) : json(nullptr)},
          {"final_answer", t.final_answer},
          {"truncated", t.truncated},
          {"serialized_cot", serialize_trajectory(t, tpl)}};
}

// ---------------------------------------------------------------------------
// Decoding
// ---------------------------------------------------------------------------

namespace detail {

inline const json& field(const json& j, const char* key) {
  if (!j.is_object()) throw RecordError("record is not a JSON object");
  auto it = j.find(key);
  if (it == j.end()) throw RecordError(std::string("missing field '") + key + "'");
  return *it;
}

inline std::string str(const json& j, const char* key) {
  const auto& v = field(j, key);
  if (!v.is_string()) throw RecordError(std::string("field '") + key + "' must be a string");
  return v.get<std::string>();
}

inline double num(const json& j, const char* key) {
  const auto& v = field(j, key);
  if (!v.is_number()) throw RecordError(std::string("field '") + key + "' must be a number");
  return v.get<double>();
}

inline std::size_t count(const json& j, const char* key) {
  const auto& v = field(j, key);
  if (!v.is_number_unsigned() && !(v.is_number_integer() && v.get<long long>() >= 0))
    throw RecordError(std::string("field '") + key + "' must be a non-negative integer");
  return v.get<std::size_t>();
}

inline bool boolean(const json& j, const char* key) {
  const auto& v = field(j, key);
  if (!v.is_boolean()) throw RecordError(std::string("field '") + key + "' must be a boolean");
  return v.get<bool>();
}

inline void only_keys(const json& j, std::initializer_list<const char*> keys) {
  for (auto it = j.begin(); it != j.end(); ++it) {
    bool known = false;
    for (const char* k : keys) known = known || it.key() == k;
    if (!known) throw RecordError("unexpected field '" + it.key() + "'");
  }
}

inline std::optional<RewardScore> reward(const json& v, const char* what) {
  if (v.is_null()) return std::nullopt;
  if (!v.is_object()) throw RecordError(std::string(what) + " must be an object or null");
  only_keys(v, {"value", "scorer_id"});
  try {
    return RewardScore(num(v, "value"), str(v, "scorer_id"));
  } catch (const std::invalid_argument& e) {
    throw RecordError(std::string(what) + ": " + e.what());
  }
}

}  // namespace detail

inline ChatMessage message_from_json(const json& j) {
  detail::only_keys(j, {"role", "content"});
  auto role = role_from_string(detail::str(j, "role"));
  if (!role) throw RecordError("unknown role '" + detail::str(j, "role") + "'");
  try {
    return ChatMessage(*role, detail::str(j, "content"));
  } catch (const std::invalid_argument& e) {
    throw RecordError(e.what());
  }
}

inline Conversation conversation_from_json(const json& j, const char* what) {
  if (!j.is_array()) throw RecordError(std::string(what) + " must be an array");
  Conversation c;
  for (const auto& m : j) c.push_back(message_from_json(m));
  return c;
}

struct PromptRecord {
  std::string id;
  std::string prompt;
};

inline PromptRecord prompt_from_json(const json& j) {
  detail::only_keys(j, {"id", "prompt"});
  const auto& id = detail::field(j, "id");
  PromptRecord p;
  if (id.is_string())
    p.id = id.get<std::string>();
  else if (id.is_number_integer())
    p.id = std::to_string(id.get<long long>());
  else
    throw RecordError("field 'id' must be a string or integer");
  if (p.id.empty()) throw RecordError("field 'id' must be non-empty");
  p.prompt = detail::str(j, "prompt");
  if (p.prompt.empty()) throw RecordError("field 'prompt' must be non-empty");
  return p;
}

/// Pair record -> PreferencePair. Rewards carry an empty scorer id since the
/// record stores bare values.
inline PreferencePair pair_from_json(const json& j, const CotTemplate& tpl = {}) {
  detail::only_keys(j, {"pair_id", "kind", "context", "chosen", "rejected", "chosen_reward",
                        "rejected_reward"});
  PreferencePair p;
  p.pair_id = detail::str(j, "pair_id");
  auto kind = pair_kind_from_string(detail::str(j, "kind"));
  if (!kind) throw RecordError("unknown pair kind '" + detail::str(j, "kind") + "'");
  p.kind = *kind;
  p.context = conversation_from_json(detail::field(j, "context"), "context");
  if (p.context.empty()) throw RecordError("context must be non-empty");
  p.chosen = detail::str(j, "chosen");
  p.rejected = detail::str(j, "rejected");
  try {
    p.chosen_reward = RewardScore(detail::num(j, "chosen_reward"), "");
    p.rejected_reward = RewardScore(detail::num(j, "rejected_reward"), "");
  } catch (const std::invalid_argument& e) {
    throw RecordError(e.what());
  }
  if (p.kind == PairKind::length_control) {
    p.chosen_length = char_length(final_answer_of(p.chosen, tpl));
    p.rejected_length = char_length(final_answer_of(p.rejected, tpl));
  }
  return p;
}

inline Conversation sft_from_json(const json& j) {
  detail::only_keys(j, {"messages"});
  auto c = conversation_from_json(detail::field(j, "messages"), "messages");
  if (c.size() < 2) throw RecordError("messages must hold at least two turns");
  return c;
}

struct TreeRecord {
  std::string id;
  RefinementTree tree;
  bool usable = false;
  std::size_t dropped = 0;
  std::size_t rejected_count = 0;
};

inline TreeRecord tree_from_json(const json& j) {
  detail::only_keys(j, {"id", "query", "root_response_id", "usable", "dropped", "rejected_count",
                        "nodes"});
  TreeRecord r;
  r.id = detail::str(j, "id");
  const auto& arr = detail::field(j, "nodes");
  if (!arr.is_array()) throw RecordError("nodes must be an array");
  std::vector<RefinementNode> nodes;
  for (const auto& n : arr) {
    detail::only_keys(n, {"node_id", "kind", "text", "parent_id", "children", "reward"});
    RefinementNode node;
    node.node_id = detail::count(n, "node_id");
    auto kind = node_kind_from_string(detail::str(n, "kind"));
    if (!kind) throw RecordError("unknown node kind");
    node.kind = *kind;
    node.text = detail::str(n, "text");
    const auto& parent = detail::field(n, "parent_id");
    if (!parent.is_null()) node.parent_id = detail::count(n, "parent_id");
    const auto& children = detail::field(n, "children");
    if (!children.is_array()) throw RecordError("children must be an array");
    for (const auto& c : children) {
      if (!c.is_number_unsigned()) throw RecordError("child ids must be non-negative integers");
      node.children.push_back(c.get<std::size_t>());
    }
    node.reward = detail::reward(detail::field(n, "reward"), "reward");
    nodes.push_back(std::move(node));
  }
  try {
    r.tree = RefinementTree::from_nodes(std::move(nodes));
  } catch (const TreeError& e) {
    throw RecordError(std::string("invalid tree: ") + e.what());
  }
  if (r.tree.query() != detail::str(j, "query")) throw RecordError("query does not match root node");
  const auto& rid = detail::field(j, "root_response_id");
  if (rid.is_null() || rid.get<std::size_t>() != *r.tree.root_response_id())
    throw RecordError("root_response_id does not match the tree");
  for (const auto& n : r.tree.nodes())
    if (is_scoreable(n.kind) && !n.reward)
      throw RecordError("node " + std::to_string(n.node_id) + " is unscored");
  r.usable = detail::boolean(j, "usable");
  if (r.usable != r.tree.usable()) throw RecordError("usable flag disagrees with the tree");
  r.dropped = detail::count(j, "dropped");
  r.rejected_count = detail::count(j, "rejected_count");
  return r;
}

struct TrajectoryRecord {
  std::string id;
  RecursiveTrajectory trajectory;
  std::string serialized_cot;
};

inline TrajectoryRecord trajectory_from_json(const json& j) {
  detail::only_keys(j, {"id", "prompt", "initial_response", "initial_reward", "rounds",
                        "closing_criticism", "final_answer", "truncated", "serialized_cot"});
  TrajectoryRecord r;
  r.id = detail::str(j, "id");
  auto& t = r.trajectory;
  t.prompt = detail::str(j, "prompt");
  t.initial_response = detail::str(j, "initial_response");
  t.initial_reward = detail::reward(detail::field(j, "initial_reward"), "initial_reward");
  const auto& rounds = detail::field(j, "rounds");
  if (!rounds.is_array()) throw RecordError("rounds must be an array");
  for (const auto& rj : rounds) {
    detail::only_keys(rj, {"round_index", "criticism", "improvement", "improvement_reward",
                           "accepted"});
    TrajectoryRound round;
    round.round_index = detail::count(rj, "round_index");
    round.criticism = detail::str(rj, "criticism");
    round.improvement = detail::str(rj, "improvement");
    round.improvement_reward =
        detail::reward(detail::field(rj, "improvement_reward"), "improvement_reward");
    round.accepted = detail::boolean(rj, "accepted");
    t.rounds.push_back(std::move(round));
  }
  const auto& closing = detail::field(j, "closing_criticism");
  if (!closing.is_null()) t.closing_criticism = detail::str(j, "closing_criticism");
  t.final_answer = detail::str(j, "final_answer");
  t.truncated = detail::boolean(j, "truncated");
  r.serialized_cot = detail::str(j, "serialized_cot");
  if (auto e = check_trajectory(t)) throw RecordError("invalid trajectory: " + *e);
  return r;
}

struct ResponseRecord {
  std::string id;
  std::string prompt;
  std::string response;
};

inline ResponseRecord response_from_json(const json& j) {
  detail::only_keys(j, {"id", "prompt", "response"});
  ResponseRecord r;
  const auto& id = detail::field(j, "id");
  if (id.is_string())
    r.id = id.get<std::string>();
  else if (id.is_number_integer())
    r.id = std::to_string(id.get<long long>());
  else
    throw RecordError("field 'id' must be a string or integer");
  r.prompt = detail::str(j, "prompt");
  r.response = detail::str(j, "response");
  return r;
}

// ---------------------------------------------------------------------------
// JSONL files
// ---------------------------------------------------------------------------

/// Parses every non-blank line of a JSONL file. Errors name the path and line.
template <class F>
void for_each_jsonl(const std::filesystem::path& path, F&& fn) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw RecordError("cannot open '" + path.string() + "'");
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.find_first_not_of(" \t") == std::string::npos) continue;
    try {
      fn(json::parse(line), lineno);
    } catch (const json::exception& e) {
      throw RecordError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    } catch (const RecordError& e) {
      throw RecordError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
}

inline std::vector<PromptRecord> read_prompts(const std::filesystem::path& path) {
  std::vector<PromptRecord> out;
  for_each_jsonl(path, [&](const json& j, std::size_t) { out.push_back(prompt_from_json(j)); });
  return out;
}

enum class RecordKind { prompts, pairs, sft, trees, trajectories, responses };

inline std::optional<RecordKind> record_kind_from_string(std::string_view s) {
  if (s == "prompts") return RecordKind::prompts;
  if (s == "pairs") return RecordKind::pairs;
  if (s == "sft") return RecordKind::sft;
  if (s == "trees") return RecordKind::trees;
  if (s == "trajectories") return RecordKind::trajectories;
  if (s == "responses") return RecordKind::responses;
  return std::nullopt;
}

/// Guesses the record kind from the keys of a record.
inline std::optional<RecordKind> detect_kind(const json& j) {
  if (!j.is_object()) return std::nullopt;
  if (j.contains("pair_id")) return RecordKind::pairs;
  if (j.contains("messages")) return RecordKind::sft;
  if (j.contains("nodes")) return RecordKind::trees;
  if (j.contains("serialized_cot")) return RecordKind::trajectories;
  if (j.contains("response")) return RecordKind::responses;
  if (j.contains("prompt")) return RecordKind::prompts;
  return std::nullopt;
}

/// Decodes one record of the given kind and checks its invariants. Throws
/// RecordError on the first problem.
inline void validate_record(const json& j, RecordKind kind, const CotTemplate& tpl = {}) {
  switch (kind) {
    case RecordKind::prompts: prompt_from_json(j); break;
    case RecordKind::responses: response_from_json(j); break;
    case RecordKind::sft: {
      auto c = sft_from_json(j);
      std::size_t first = c.front().role == Role::system ? 1 : 0;
      for (std::size_t i = first; i < c.size(); ++i) {
        const Role expected = (i - first) % 2 == 0 ? Role::user : Role::assistant;
        if (c[i].role != expected) throw RecordError("messages must alternate user/assistant");
      }
      if (c.back().role != Role::assistant) throw RecordError("last message must be assistant");
      break;
    }
    case RecordKind::pairs: {
      auto p = pair_from_json(j, tpl);
      if (auto e = check_pair(p)) throw RecordError(*e);
      break;
    }
    case RecordKind::trees: tree_from_json(j); break;
    case RecordKind::trajectories: {
      auto r = trajectory_from_json(j);
      if (r.serialized_cot != serialize_trajectory(r.trajectory, tpl))
        throw RecordError("serialized_cot does not match the trajectory");
      break;
    }
  }
}

}  // namespace refinery::io
