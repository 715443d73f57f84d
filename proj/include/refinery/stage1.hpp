#pragma once

// Single-step refinement: build a one-layer criticism/improvement tree over an
// initial response, keep the improvements that pass the acceptance rule, and
// derive RSFT dialogues and generation / criticism / improvement pairs.

#include <algorithm>
#include <optional>
#include <string>
#include <vector>

#include "refinery/backends.hpp"
#include "refinery/core.hpp"
#include "refinery/prompts.hpp"

namespace refinery {

/// Thrown when the initial response cannot be produced or scored. Carries
/// whatever part of the tree was built.
class PartialTreeError : public std::runtime_error {
 public:
  PartialTreeError(const std::string& what, RefinementTree tree, bool transport)
      : std::runtime_error(what), tree_(std::move(tree)), transport_(transport) {}
  const RefinementTree& tree() const { return tree_; }
  bool transport_failure() const { return transport_; }

 private:
  RefinementTree tree_;
  bool transport_;
};

struct TreeBuild {
  RefinementTree tree;
  std::size_t dropped = 0;  // samples lost to backend failures or blank output
  std::vector<std::string> log;
};

namespace detail {

inline void require_scored(const RefinementNode& n) {
  if (is_scoreable(n.kind) && !n.reward)
    throw UnscoredNode("node " + std::to_string(n.node_id) + " (" + std::string(to_string(n.kind)) +
                       ") has no reward");
}

/// Nearest response/improvement strictly above `id`.
inline std::optional<NodeId> scored_predecessor(const RefinementTree& tree, NodeId id) {
  auto p = tree.node(id).parent_id;
  while (p && !is_scoreable(tree.node(*p).kind)) p = tree.node(*p).parent_id;
  return p;
}

}  // namespace detail

/// Generates the initial response, x criticisms of it and y improvements per
/// criticism, and scores the response and every improvement. Failed or blank
/// samples are dropped; a criticism left without improvements is dropped too,
/// so every leaf is an improvement. Node ids follow level order.
inline TreeBuild build_refinement_tree(const std::string& query, const PipelineConfig& cfg,
                                       GeneratorBackend& gen, ScorerBackend& scorer) {
  if (query.empty()) throw std::invalid_argument("query must be non-empty");
  cfg.validate();
  const auto params = SamplingParams::from(cfg);

  TreeBuild out{RefinementTree(query), 0, {}};

  std::string response;
  std::optional<RewardScore> response_reward;
  try {
    response = trim(gen.generate({ChatMessage::user(query)}, params, 0).at(0));
    if (response.empty()) throw PartialTreeError("initial response was blank", out.tree, false);
    response_reward = scorer.score(query, response);
  } catch (const BackendError& e) {
    throw PartialTreeError(std::string("initial response failed: ") + e.what(), out.tree,
                           e.retryable());
  }

  const std::size_t x = cfg.num_criticisms_x;
  const std::size_t y = cfg.num_improvements_y;

  auto criticisms = fan_out(x, [&](std::size_t i) {
    return trim(gen.generate(prompts::criticism_context(query, response), params, i).at(0));
  });

  struct Candidate {
    std::string text;
    RewardScore reward;
  };
  std::vector<std::size_t> live;  // indices of usable criticisms
  for (std::size_t i = 0; i < x; ++i) {
    if (!criticisms[i].ok()) {
      try {
        criticisms[i].rethrow();
      } catch (const BackendError& e) {
        out.log.push_back("criticism " + std::to_string(i) + " failed: " + e.what());
      }
      ++out.dropped;
    } else if (criticisms[i].value->empty()) {
      out.log.push_back("criticism " + std::to_string(i) + " was blank");
      ++out.dropped;
    } else {
      live.push_back(i);
    }
  }

  auto improvements = fan_out(live.size() * y, [&](std::size_t k) -> std::optional<Candidate> {
    const auto& crit = *criticisms[live[k / y]].value;
    auto text = trim(gen.generate(prompts::improvement_context(query, response, crit), params,
                                  k % y)
                         .at(0));
    if (text.empty()) return std::nullopt;
    auto r = scorer.score(query, text);
    return Candidate{std::move(text), std::move(r)};
  });

  const NodeId resp_id = out.tree.add_child(0, NodeKind::response, response, response_reward);
  std::vector<std::optional<NodeId>> crit_ids(live.size());
  for (std::size_t c = 0; c < live.size(); ++c) {
    bool any = false;
    for (std::size_t j = 0; j < y; ++j) {
      const auto& o = improvements[c * y + j];
      any = any || (o.ok() && o.value->has_value());
    }
    if (!any) {
      out.log.push_back("criticism " + std::to_string(live[c]) + " has no usable improvement");
      ++out.dropped;
      continue;
    }
    crit_ids[c] = out.tree.add_child(resp_id, NodeKind::criticism, *criticisms[live[c]].value);
  }
  for (std::size_t c = 0; c < live.size(); ++c) {
    for (std::size_t j = 0; j < y; ++j) {
      const auto& o = improvements[c * y + j];
      if (!o.ok()) {
        try {
          o.rethrow();
        } catch (const BackendError& e) {
          out.log.push_back("improvement " + std::to_string(live[c]) + "." + std::to_string(j) +
                            " failed: " + e.what());
        }
        ++out.dropped;
        continue;
      }
      if (!o.value->has_value()) {
        out.log.push_back("improvement " + std::to_string(live[c]) + "." + std::to_string(j) +
                          " was blank");
        ++out.dropped;
        continue;
      }
      const auto& cand = **o.value;
      out.tree.add_child(*crit_ids[c], NodeKind::improvement, cand.text, cand.reward);
    }
  }
  return out;
}

/// Conversation that precedes generation of node `id`: the dialogue along the
/// path, ending with the judge prompt (criticisms) or revise prompt
/// (improvements). For a response it is just the user query.
inline Conversation context_for(const RefinementTree& tree, NodeId id) {
  Conversation conv{ChatMessage::user(tree.query())};
  const auto path = tree.path_to(id);
  for (std::size_t i = 1; i < path.size(); ++i) {
    const auto& n = tree.node(path[i]);
    if (n.kind == NodeKind::criticism) conv.push_back(ChatMessage::user(std::string(prompts::judge)));
    if (n.kind == NodeKind::improvement)
      conv.push_back(ChatMessage::user(std::string(prompts::revise)));
    if (i + 1 < path.size()) conv.push_back(ChatMessage::assistant(n.text));
  }
  return conv;
}

/// Improvements whose whole chain of refinements passes the acceptance rule.
inline std::vector<NodeId> accepted_improvements(const RefinementTree& tree) {
  for (const auto& n : tree.nodes()) detail::require_scored(n);
  std::vector<NodeId> out;
  if (!tree.root_response_id()) return out;
  const auto& root = *tree.root_response().reward;
  std::vector<bool> ok(tree.size(), false);
  ok[*tree.root_response_id()] = true;
  for (const auto& n : tree.nodes()) {  // parents precede children
    if (n.kind != NodeKind::improvement) continue;
    auto pred = detail::scored_predecessor(tree, n.node_id);
    if (!pred || !ok[*pred]) continue;
    if (accept_refinement(*n.reward, *tree.node(*pred).reward, root)) {
      ok[n.node_id] = true;
      out.push_back(n.node_id);
    }
  }
  return out;
}

/// Path query -> ... -> improvement ending at the highest-reward accepted
/// improvement; ties go to the lowest node id.
inline std::optional<std::vector<NodeId>> select_best_trajectory(const RefinementTree& tree) {
  std::optional<NodeId> best;
  for (NodeId id : accepted_improvements(tree))
    if (!best || tree.node(id).reward->value > tree.node(*best).reward->value) best = id;
  if (!best) return std::nullopt;
  return tree.path_to(*best);
}

/// Multi-turn dialogue following the best trajectory, one per accepted tree.
inline std::vector<Conversation> emit_rsft_dialogues(const RefinementTree& tree) {
  auto path = select_best_trajectory(tree);
  if (!path) return {};
  auto conv = context_for(tree, path->back());
  conv.push_back(ChatMessage::assistant(tree.node(path->back()).text));
  return {std::move(conv)};
}

inline std::string make_pair_id(const std::string& prefix, PairKind kind, NodeId chosen,
                                NodeId rejected) {
  return prefix + std::string(to_string(kind)) + ":" + std::to_string(chosen) + ">" +
         std::to_string(rejected);
}

/// Best accepted improvement vs the initial response, with [user(query)] as context.
inline std::optional<PreferencePair> build_generation_pairs(const RefinementTree& tree,
                                                            const std::string& id_prefix = "") {
  auto path = select_best_trajectory(tree);
  if (!path) return std::nullopt;
  const auto& best = tree.node(path->back());
  const auto& resp = tree.root_response();
  PreferencePair p;
  p.pair_id = make_pair_id(id_prefix, PairKind::generation, best.node_id, resp.node_id);
  p.kind = PairKind::generation;
  p.context = {ChatMessage::user(tree.query())};
  p.chosen = best.text;
  p.rejected = resp.text;
  p.chosen_reward = *best.reward;
  p.rejected_reward = *resp.reward;
  return p;
}

/// A criticism is worth the best reward among its improvements. Emits the
/// (highest, lowest) pair of criticisms of the initial response when their
/// worth differs.
inline std::vector<PreferencePair> build_criticism_pairs(const RefinementTree& tree,
                                                         const std::string& id_prefix = "") {
  for (const auto& n : tree.nodes()) detail::require_scored(n);
  if (!tree.root_response_id()) return {};
  const auto& resp = tree.root_response();

  struct Scored {
    NodeId id;
    RewardScore worth;
  };
  std::vector<Scored> crits;
  for (NodeId c : resp.children) {
    std::optional<RewardScore> worth;
    for (NodeId i : tree.node(c).children) {
      const auto& r = *tree.node(i).reward;
      if (!worth || r.value > worth->value) worth = r;
    }
    if (worth) crits.push_back({c, *worth});
  }
  if (crits.size() < 2) return {};

  auto hi = crits.front(), lo = crits.front();
  for (const auto& s : crits) {
    if (s.worth.value > hi.worth.value) hi = s;
    if (s.worth.value < lo.worth.value) lo = s;
  }
  if (!(hi.worth.value > lo.worth.value)) return {};

  PreferencePair p;
  p.pair_id = make_pair_id(id_prefix, PairKind::criticism, hi.id, lo.id);
  p.kind = PairKind::criticism;
  p.context = context_for(tree, hi.id);
  p.chosen = tree.node(hi.id).text;
  p.rejected = tree.node(lo.id).text;
  p.chosen_reward = hi.worth;
  p.rejected_reward = lo.worth;
  return {std::move(p)};
}

/// Per criticism node, the (max, min) reward pair of its improvements when
/// the rewards differ.
inline std::vector<PreferencePair> build_improvement_pairs(const RefinementTree& tree,
                                                           const std::string& id_prefix = "") {
  for (const auto& n : tree.nodes()) detail::require_scored(n);
  std::vector<PreferencePair> out;
  for (const auto& c : tree.nodes()) {
    if (c.kind != NodeKind::criticism || c.children.size() < 2) continue;
    NodeId hi = c.children.front(), lo = c.children.front();
    for (NodeId i : c.children) {
      if (tree.node(i).reward->value > tree.node(hi).reward->value) hi = i;
      if (tree.node(i).reward->value < tree.node(lo).reward->value) lo = i;
    }
    const auto& h = tree.node(hi);
    const auto& l = tree.node(lo);
    if (!(h.reward->value > l.reward->value)) continue;
    PreferencePair p;
    p.pair_id = make_pair_id(id_prefix, PairKind::improvement, hi, lo);
    p.kind = PairKind::improvement;
    p.context = context_for(tree, hi);
    p.chosen = h.text;
    p.rejected = l.text;
    p.chosen_reward = *h.reward;
    p.rejected_reward = *l.reward;
    out.push_back(std::move(p));
  }
  return out;
}

struct Stage1Output {
  RefinementTree tree;
  std::vector<Conversation> rsft_dialogues;
  std::vector<PreferencePair> pairs;
  std::size_t rejected_count = 0;  // scored improvements failing the acceptance rule
  std::size_t dropped = 0;
  std::vector<std::string> log;
};

/// Builds the tree for one query and derives every Stage-1 dataset record.
inline Stage1Output synthesize_stage1(const std::string& query, const PipelineConfig& cfg,
                                      GeneratorBackend& gen, ScorerBackend& scorer,
                                      const std::string& id_prefix = "") {
  auto built = build_refinement_tree(query, cfg, gen, scorer);
  Stage1Output out;
  out.tree = std::move(built.tree);
  out.dropped = built.dropped;
  out.log = std::move(built.log);
  out.rsft_dialogues = emit_rsft_dialogues(out.tree);
  if (auto g = build_generation_pairs(out.tree, id_prefix)) out.pairs.push_back(std::move(*g));
  for (auto& p : build_criticism_pairs(out.tree, id_prefix)) out.pairs.push_back(std::move(p));
  for (auto& p : build_improvement_pairs(out.tree, id_prefix)) out.pairs.push_back(std::move(p));
  out.rejected_count =
      out.tree.nodes_of_kind(NodeKind::improvement).size() - accepted_improvements(out.tree).size();
  return out;
}

}  // namespace refinery
