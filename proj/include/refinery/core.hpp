#pragma once

// Domain model shared by every stage: chat messages, reward scores,
// refinement trees, recursive trajectories, preference pairs and the
// pipeline configuration.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace refinery {

// ---------------------------------------------------------------------------
// Errors
// ---------------------------------------------------------------------------

struct IncomparableRewards : std::invalid_argument {
  IncomparableRewards(const std::string& a, const std::string& b)
      : std::invalid_argument("rewards from different scorers are not comparable: '" + a +
                              "' vs '" + b + "'") {}
};

struct ConfigError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

struct UnscoredNode : std::logic_error {
  using std::logic_error::logic_error;
};

// ---------------------------------------------------------------------------
// Chat messages
// ---------------------------------------------------------------------------

enum class Role { system, user, assistant };

inline std::string_view to_string(Role r) {
  switch (r) {
    case Role::system: return "system";
    case Role::user: return "user";
    case Role::assistant: return "assistant";
  }
  return "?";
}

inline std::optional<Role> role_from_string(std::string_view s) {
  if (s == "system") return Role::system;
  if (s == "user") return Role::user;
  if (s == "assistant") return Role::assistant;
  return std::nullopt;
}

struct ChatMessage {
  Role role;
  std::string content;

  ChatMessage(Role r, std::string c) : role(r), content(std::move(c)) {
    if (role != Role::system && content.empty())
      throw std::invalid_argument("chat message content must be non-empty for role " +
                                  std::string(to_string(role)));
  }

  static ChatMessage user(std::string c) { return {Role::user, std::move(c)}; }
  static ChatMessage assistant(std::string c) { return {Role::assistant, std::move(c)}; }
  static ChatMessage system(std::string c) { return {Role::system, std::move(c)}; }

  friend bool operator==(const ChatMessage&, const ChatMessage&) = default;
};

using Conversation = std::vector<ChatMessage>;

// ---------------------------------------------------------------------------
// Rewards
// ---------------------------------------------------------------------------

/// Scalar Bradley-Terry reward for a (query, response) pair. Values are only
/// comparable between scores produced by the same scorer.
struct RewardScore {
  double value = 0.0;
  std::string scorer_id;

  RewardScore() = default;
  RewardScore(double v, std::string id) : value(v), scorer_id(std::move(id)) {
    if (!std::isfinite(value)) throw std::invalid_argument("reward value must be finite");
  }

  friend bool operator==(const RewardScore&, const RewardScore&) = default;
};

inline void require_same_scorer(const RewardScore& a, const RewardScore& b) {
  if (a.scorer_id != b.scorer_id) throw IncomparableRewards(a.scorer_id, b.scorer_id);
}

/// Refinement-aware reward of moving from `parent` to `child`: r(child) - r(parent).
inline double edge_reward(const RewardScore& child, const RewardScore& parent) {
  require_same_scorer(child, parent);
  return child.value - parent.value;
}

/// A refinement is kept only when it beats both its predecessor and the
/// initial response. Equality is never an improvement.
inline bool accept_refinement(const RewardScore& child, const RewardScore& parent,
                              const RewardScore& root) {
  require_same_scorer(child, parent);
  require_same_scorer(child, root);
  return child.value > parent.value && child.value > root.value;
}

// ---------------------------------------------------------------------------
// Refinement tree
// ---------------------------------------------------------------------------

using NodeId = std::size_t;

enum class NodeKind { query, response, criticism, improvement };

inline std::string_view to_string(NodeKind k) {
  switch (k) {
    case NodeKind::query: return "query";
    case NodeKind::response: return "response";
    case NodeKind::criticism: return "criticism";
    case NodeKind::improvement: return "improvement";
  }
  return "?";
}

inline std::optional<NodeKind> node_kind_from_string(std::string_view s) {
  if (s == "query") return NodeKind::query;
  if (s == "response") return NodeKind::response;
  if (s == "criticism") return NodeKind::criticism;
  if (s == "improvement") return NodeKind::improvement;
  return std::nullopt;
}

inline bool is_scoreable(NodeKind k) {
  return k == NodeKind::response || k == NodeKind::improvement;
}

struct RefinementNode {
  NodeId node_id = 0;
  NodeKind kind = NodeKind::query;
  std::string text;
  std::optional<NodeId> parent_id;
  std::vector<NodeId> children;
  std::optional<RewardScore> reward;
};

struct TreeError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

/// Rooted tree of query/response/criticism/improvement nodes. Nodes live in a
/// vector indexed by node id, so ids are contiguous by construction.
class RefinementTree {
 public:
  RefinementTree() = default;

  explicit RefinementTree(std::string query) {
    RefinementNode root;
    root.node_id = 0;
    root.kind = NodeKind::query;
    root.text = std::move(query);
    nodes_.push_back(std::move(root));
  }

  const std::string& query() const { return nodes_.at(0).text; }
  const std::vector<RefinementNode>& nodes() const { return nodes_; }
  const RefinementNode& node(NodeId id) const { return nodes_.at(id); }
  std::size_t size() const { return nodes_.size(); }
  bool empty() const { return nodes_.empty(); }

  std::optional<NodeId> root_response_id() const {
    if (nodes_.empty() || nodes_[0].children.empty()) return std::nullopt;
    return nodes_[0].children.front();
  }

  const RefinementNode& root_response() const {
    auto id = root_response_id();
    if (!id) throw TreeError("tree has no response node");
    return nodes_[*id];
  }

  /// Appends a child and returns its id. Rejects any edge that breaks the
  /// query -> response -> (criticism -> improvement)* grammar.
  NodeId add_child(NodeId parent, NodeKind kind, std::string text,
                   std::optional<RewardScore> reward = std::nullopt) {
    if (parent >= nodes_.size()) throw TreeError("unknown parent node " + std::to_string(parent));
    const NodeKind pk = nodes_[parent].kind;
    bool ok = false;
    switch (kind) {
      case NodeKind::query: ok = false; break;
      case NodeKind::response: ok = pk == NodeKind::query && nodes_[parent].children.empty(); break;
      case NodeKind::criticism: ok = pk == NodeKind::response || pk == NodeKind::improvement; break;
      case NodeKind::improvement: ok = pk == NodeKind::criticism; break;
    }
    if (!ok)
      throw TreeError("illegal edge " + std::string(to_string(pk)) + " -> " +
                      std::string(to_string(kind)));
    if (reward && !is_scoreable(kind))
      throw TreeError(std::string(to_string(kind)) + " nodes do not carry rewards");

    RefinementNode n;
    n.node_id = nodes_.size();
    n.kind = kind;
    n.text = std::move(text);
    n.parent_id = parent;
    n.reward = std::move(reward);
    nodes_[parent].children.push_back(n.node_id);
    nodes_.push_back(std::move(n));
    return nodes_.back().node_id;
  }

  void set_reward(NodeId id, RewardScore r) {
    auto& n = nodes_.at(id);
    if (!is_scoreable(n.kind))
      throw TreeError(std::string(to_string(n.kind)) + " nodes do not carry rewards");
    n.reward = std::move(r);
  }

  /// Path from the query root down to `id`, inclusive.
  std::vector<NodeId> path_to(NodeId id) const {
    std::vector<NodeId> path;
    std::optional<NodeId> cur = id;
    while (cur) {
      path.push_back(*cur);
      cur = nodes_.at(*cur).parent_id;
    }
    return {path.rbegin(), path.rend()};
  }

  std::vector<NodeId> nodes_of_kind(NodeKind k) const {
    std::vector<NodeId> out;
    for (const auto& n : nodes_)
      if (n.kind == k) out.push_back(n.node_id);
    return out;
  }

  /// True when at least one improvement carries a reward.
  bool usable() const {
    for (const auto& n : nodes_)
      if (n.kind == NodeKind::improvement && n.reward) return true;
    return false;
  }

  /// Rebuilds a tree from raw nodes (e.g. a deserialized record) and checks
  /// every structural invariant.
  static RefinementTree from_nodes(std::vector<RefinementNode> nodes) {
    RefinementTree t;
    t.nodes_ = std::move(nodes);
    t.validate();
    return t;
  }

  /// Throws TreeError on the first violated invariant.
  void validate() const {
    if (nodes_.empty()) throw TreeError("empty tree");
    if (nodes_[0].kind != NodeKind::query || nodes_[0].parent_id)
      throw TreeError("node 0 must be the query root");
    if (nodes_[0].children.size() != 1)
      throw TreeError("query root must have exactly one response child");
    for (std::size_t i = 0; i < nodes_.size(); ++i) {
      const auto& n = nodes_[i];
      if (n.node_id != i) throw TreeError("node ids must be contiguous from 0");
      if (i > 0) {
        if (!n.parent_id || *n.parent_id >= i)
          throw TreeError("node " + std::to_string(i) + " has no earlier parent");
        const auto& p = nodes_[*n.parent_id];
        if (n.kind == NodeKind::query) throw TreeError("only the root may be a query node");
        bool ok = (n.kind == NodeKind::response && p.kind == NodeKind::query) ||
                  (n.kind == NodeKind::criticism &&
                   (p.kind == NodeKind::response || p.kind == NodeKind::improvement)) ||
                  (n.kind == NodeKind::improvement && p.kind == NodeKind::criticism);
        if (!ok) throw TreeError("node " + std::to_string(i) + " breaks the path grammar");
        int seen = 0;
        for (auto c : p.children) seen += c == i;
        if (seen != 1) throw TreeError("parent/child links disagree at node " + std::to_string(i));
      }
      for (auto c : n.children) {
        if (c >= nodes_.size() || nodes_[c].parent_id != i)
          throw TreeError("child link " + std::to_string(c) + " of node " + std::to_string(i) +
                          " is not reciprocated");
      }
      if (n.reward && !is_scoreable(n.kind))
        throw TreeError("node " + std::to_string(i) + " should not carry a reward");
    }
  }

 private:
  std::vector<RefinementNode> nodes_;
};

// ---------------------------------------------------------------------------
// Recursive trajectories
// ---------------------------------------------------------------------------

struct TrajectoryRound {
  std::size_t round_index = 1;
  std::string criticism;
  std::string improvement;
  std::optional<RewardScore> improvement_reward;  // absent when parsed from text
  bool accepted = true;

  friend bool operator==(const TrajectoryRound&, const TrajectoryRound&) = default;
};

/// Greedy refinement trace for one prompt. `rounds` holds only accepted
/// rounds; the criticism of the round that stopped the search, if any, is kept
/// in `closing_criticism`.
struct RecursiveTrajectory {
  std::string prompt;
  std::string initial_response;
  std::optional<RewardScore> initial_reward;
  std::vector<TrajectoryRound> rounds;
  std::optional<std::string> closing_criticism;
  std::string final_answer;
  bool truncated = false;  // a backend failure cut the search short

  friend bool operator==(const RecursiveTrajectory&, const RecursiveTrajectory&) = default;
};

/// Checks the round numbering, final-answer and monotonicity invariants.
/// Returns an error description, or nullopt when the trajectory is valid.
inline std::optional<std::string> check_trajectory(const RecursiveTrajectory& t) {
  for (std::size_t i = 0; i < t.rounds.size(); ++i) {
    if (t.rounds[i].round_index != i + 1) return "round indices must be 1..T contiguous";
    if (!t.rounds[i].accepted) return "rounds must all be accepted";
  }
  const std::string& expected =
      t.rounds.empty() ? t.initial_response : t.rounds.back().improvement;
  if (t.final_answer != expected) return "final answer does not match the last accepted state";
  if (t.initial_reward) {
    double prev = t.initial_reward->value;
    for (const auto& r : t.rounds) {
      if (!r.improvement_reward) continue;
      if (r.improvement_reward->scorer_id != t.initial_reward->scorer_id)
        return "rounds scored by a different scorer";
      if (!(r.improvement_reward->value > prev) ||
          !(r.improvement_reward->value > t.initial_reward->value))
        return "accepted rewards must strictly increase above the initial reward";
      prev = r.improvement_reward->value;
    }
  }
  return std::nullopt;
}

// ---------------------------------------------------------------------------
// Preference pairs
// ---------------------------------------------------------------------------

enum class PairKind { generation, criticism, improvement, length_control };

inline std::string_view to_string(PairKind k) {
  switch (k) {
    case PairKind::generation: return "generation";
    case PairKind::criticism: return "criticism";
    case PairKind::improvement: return "improvement";
    case PairKind::length_control: return "length_control";
  }
  return "?";
}

inline std::optional<PairKind> pair_kind_from_string(std::string_view s) {
  if (s == "generation") return PairKind::generation;
  if (s == "criticism") return PairKind::criticism;
  if (s == "improvement") return PairKind::improvement;
  if (s == "length_control") return PairKind::length_control;
  return std::nullopt;
}

/// Number of Unicode code points in a UTF-8 string.
inline std::size_t char_length(std::string_view s) {
  std::size_t n = 0;
  for (unsigned char c : s) n += (c & 0xC0) != 0x80;
  return n;
}

struct PreferencePair {
  std::string pair_id;
  PairKind kind = PairKind::generation;
  Conversation context;
  std::string chosen;
  std::string rejected;
  RewardScore chosen_reward;
  RewardScore rejected_reward;
  // Lengths compared by the length-control filter. For long-CoT samples these
  // are the lengths of the final answers, not of the whole text.
  std::optional<std::size_t> chosen_length;
  std::optional<std::size_t> rejected_length;
};

inline std::optional<std::string> check_pair(const PreferencePair& p) {
  if (p.chosen_reward.scorer_id != p.rejected_reward.scorer_id)
    return "chosen and rejected rewards come from different scorers";
  if (!(p.chosen_reward.value > p.rejected_reward.value))
    return "chosen reward must be strictly greater than rejected reward";
  if (p.kind == PairKind::length_control) {
    auto lc = p.chosen_length.value_or(char_length(p.chosen));
    auto lr = p.rejected_length.value_or(char_length(p.rejected));
    if (!(lc < lr)) return "length-control pair must have a strictly shorter chosen response";
  }
  return std::nullopt;
}

// ---------------------------------------------------------------------------
// Pipeline configuration
// ---------------------------------------------------------------------------

struct PipelineConfig {
  std::size_t num_criticisms_x = 2;
  std::size_t num_improvements_y = 2;
  std::size_t max_rounds = 4;
  std::size_t length_control_samples_k = 5;
  double gamma = 1.0;
  double temperature = 0.7;
  double top_p = 0.8;
  std::size_t max_tokens = 2048;
  std::size_t cot_max_tokens = 8192;
  std::size_t max_concurrency = 8;
  std::uint64_t seed = 0;

  void validate() const {
    if (num_criticisms_x == 0) throw ConfigError("num_criticisms must be positive");
    if (num_improvements_y == 0) throw ConfigError("num_improvements must be positive");
    if (max_rounds == 0) throw ConfigError("max_rounds must be positive");
    if (length_control_samples_k == 0) throw ConfigError("length_control_samples must be positive");
    if (!(gamma > 0.0 && gamma <= 1.0)) throw ConfigError("gamma must lie in (0, 1]");
    if (!(temperature >= 0.0) || !std::isfinite(temperature))
      throw ConfigError("temperature must be non-negative");
    if (!(top_p > 0.0 && top_p <= 1.0)) throw ConfigError("top_p must lie in (0, 1]");
    if (max_tokens == 0 || cot_max_tokens == 0) throw ConfigError("max_tokens must be positive");
    if (max_concurrency == 0) throw ConfigError("max_concurrency must be positive");
  }
};

}  // namespace refinery
