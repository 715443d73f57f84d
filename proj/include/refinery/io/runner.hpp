#pragma once

// File-level drivers for each pipeline stage: read prompts, fan work out to a
// bounded worker pool, write JSONL artifacts through temp files, then write
// the run manifest last as the completion marker.

#include <atomic>
#include <chrono>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <memory>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "refinery/backends.hpp"
#include "refinery/cot_format.hpp"
#include "refinery/diagnostics.hpp"
#include "refinery/io/config.hpp"
#include "refinery/io/http_backends.hpp"
#include "refinery/io/records.hpp"
#include "refinery/stage1.hpp"
#include "refinery/stage2.hpp"

namespace refinery::io {

namespace fs = std::filesystem;

enum ExitCode : int { ok = 0, usage_error = 1, majority_failure = 2, backend_unreachable = 3 };

/// Usage, configuration and input-file problems (exit code 1).
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Backends from configuration
// ---------------------------------------------------------------------------

inline std::unique_ptr<MockGenerator> load_mock_generator(const BackendSpec& spec,
                                                          std::uint64_t seed) {
  auto gen = std::make_unique<MockGenerator>(spec.seed.value_or(seed));
  if (!spec.script) return gen;
  std::ifstream in(*spec.script);
  if (!in) throw UsageError("cannot open mock script '" + spec.script->string() + "'");
  try {
    const auto doc = json::parse(in);
    for (const auto& entry : doc.value("completions", json::array())) {
      const auto text = entry.at("text").get<std::string>();
      if (entry.contains("fingerprint")) {
        gen->add_completion(std::stoull(entry.at("fingerprint").get<std::string>(), nullptr, 16),
                            text);
      } else {
        gen->add_completion(conversation_from_json(entry.at("conversation"), "conversation"),
                            entry.value("index", std::size_t{0}), text);
      }
    }
  } catch (const std::exception& e) {
    throw UsageError("mock script '" + spec.script->string() + "': " + e.what());
  }
  return gen;
}

inline std::unique_ptr<MockScorer> load_mock_scorer(const BackendSpec& spec, std::uint64_t seed) {
  MockScorer::Options opts;
  opts.default_reward = spec.default_reward;
  opts.hashed = spec.hashed;
  opts.length_bias = spec.length_bias;
  opts.seed = spec.seed.value_or(seed);
  auto scorer = std::make_unique<MockScorer>(opts);
  if (!spec.script) return scorer;
  std::ifstream in(*spec.script);
  if (!in) throw UsageError("cannot open mock script '" + spec.script->string() + "'");
  try {
    const auto doc = json::parse(in);
    for (const auto& entry : doc.value("rewards", json::array()))
      scorer->set(entry.at("query").get<std::string>(), entry.at("response").get<std::string>(),
                  entry.at("reward").get<double>());
  } catch (const std::exception& e) {
    throw UsageError("mock script '" + spec.script->string() + "': " + e.what());
  }
  return scorer;
}

/// Owns the configured backends and wraps them with the retry policy and one
/// global concurrency limit.
class BackendSet {
 public:
  explicit BackendSet(const RunConfig& cfg) : limiter_(cfg.pipeline.max_concurrency) {
    const auto seed = cfg.pipeline.seed;
    gen_ = make_generator(cfg.generator, seed);
    judge_ = make_generator(cfg.judge, seed);
    if (cfg.scorer.kind == BackendKind::http)
      scorer_ = std::make_unique<HttpScorer>(cfg.scorer);
    else
      scorer_ = load_mock_scorer(cfg.scorer, seed);
    managed_gen_ = std::make_unique<ManagedGenerator>(*gen_, cfg.retry, &limiter_);
    managed_judge_ = std::make_unique<ManagedGenerator>(*judge_, cfg.retry, &limiter_);
    managed_scorer_ = std::make_unique<ManagedScorer>(*scorer_, cfg.retry, &limiter_);
  }

  GeneratorBackend& generator() { return *managed_gen_; }
  GeneratorBackend& judge() { return *managed_judge_; }
  ScorerBackend& scorer() { return *managed_scorer_; }

 private:
  static std::unique_ptr<GeneratorBackend> make_generator(const BackendSpec& spec,
                                                          std::uint64_t seed) {
    if (spec.kind == BackendKind::http) return std::make_unique<HttpGenerator>(spec, seed);
    return load_mock_generator(spec, seed);
  }

  ConcurrencyLimiter limiter_;
  std::unique_ptr<GeneratorBackend> gen_, judge_;
  std::unique_ptr<ScorerBackend> scorer_;
  std::unique_ptr<ManagedGenerator> managed_gen_, managed_judge_;
  std::unique_ptr<ManagedScorer> managed_scorer_;
};

// ---------------------------------------------------------------------------
// Output plumbing
// ---------------------------------------------------------------------------

/// Collects file contents in memory and publishes them with temp-file +
/// rename. Files are renamed in insertion order.
class OutputSet {
 public:
  explicit OutputSet(fs::path dir) : dir_(std::move(dir)) {}

  void add(const std::string& name, std::string content) {
    files_.emplace_back(name, std::move(content));
  }

  void add_jsonl(const std::string& name, const std::vector<json>& records) {
    std::string s;
    for (const auto& r : records) {
      s += r.dump();
      s += '\n';
    }
    counts_[name] = records.size();
    add(name, std::move(s));
  }

  const std::map<std::string, std::size_t>& counts() const { return counts_; }

  void commit() {
    fs::create_directories(dir_);
    std::vector<std::pair<fs::path, fs::path>> staged;
    for (const auto& [name, content] : files_) {
      auto final_path = dir_ / name;
      auto tmp = final_path;
      tmp += ".tmp";
      std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
      out << content;
      out.close();
      if (!out) throw std::runtime_error("failed to write '" + tmp.string() + "'");
      staged.emplace_back(tmp, final_path);
    }
    for (const auto& [tmp, final_path] : staged) fs::rename(tmp, final_path);
  }

 private:
  fs::path dir_;
  std::vector<std::pair<std::string, std::string>> files_;
  std::map<std::string, std::size_t> counts_;
};

/// RFC 3339 UTC timestamp. Honors SOURCE_DATE_EPOCH for reproducible runs.
inline std::string utc_timestamp() {
  std::time_t t;
  if (const char* sde = std::getenv("SOURCE_DATE_EPOCH"))
    t = static_cast<std::time_t>(std::stoll(sde));
  else
    t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  std::ostringstream os;
  os << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return os.str();
}

inline json config_snapshot(const PipelineConfig& c) {
  return {{"num_criticisms", c.num_criticisms_x},
          {"num_improvements", c.num_improvements_y},
          {"max_rounds", c.max_rounds},
          {"length_control_samples", c.length_control_samples_k},
          {"gamma", c.gamma},
          {"temperature", c.temperature},
          {"top_p", c.top_p},
          {"max_tokens", c.max_tokens},
          {"cot_max_tokens", c.cot_max_tokens},
          {"max_concurrency", c.max_concurrency},
          {"seed", c.seed}};
}

/// Endpoint info with credentials reduced to a presence flag.
inline json redacted(const BackendSpec& s) {
  if (s.kind == BackendKind::mock) {
    json j = {{"kind", "mock"}, {"hashed", s.hashed}, {"default_reward", s.default_reward}};
    if (s.script) j["script"] = s.script->filename().string();
    if (s.seed) j["seed"] = *s.seed;
    if (s.length_bias != 0.0) j["length_bias"] = s.length_bias;
    return j;
  }
  return {{"kind", "http"},
          {"base_url", s.base_url},
          {"path", s.path},
          {"model", s.model},
          {"api_key_set", !s.api_key.empty()}};
}

inline std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw UsageError("cannot open '" + p.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline std::string make_run_id(const std::string& stage, const std::string& inputs,
                               const json& cfg) {
  auto h = refinery::detail::fnv1a(stage);
  h = refinery::detail::fnv1a(inputs, h);
  h = refinery::detail::fnv1a(cfg.dump(), h);
  std::ostringstream os;
  os << stage << '-' << std::hex << std::setw(16) << std::setfill('0') << h;
  return os.str();
}

/// Runs fn(i) for i in [0, n) on at most `workers` threads.
template <class F>
void parallel_for(std::size_t n, std::size_t workers, F&& fn) {
  workers = std::max<std::size_t>(1, std::min(workers, n));
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < n; i = next++) fn(i);
  };
  if (workers == 1) {
    worker();
    return;
  }
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(worker);
  for (auto& t : pool) t.join();
}

// ---------------------------------------------------------------------------
// Runs
// ---------------------------------------------------------------------------

struct RunOptions {
  fs::path prompts;
  fs::path out_dir = ".";
  RunConfig config;
  std::set<std::string> skip_ids;
  std::optional<fs::path> rsft_mixin;  // stage1: extra SFT records appended to rsft.jsonl
};

struct PromptFailure {
  std::string id;
  std::string error;
  bool transport = false;
};

struct RunSummary {
  int exit_code = ExitCode::ok;
  std::size_t prompts = 0;
  std::vector<PromptFailure> failures;
  std::map<std::string, std::size_t> counts;
  fs::path manifest;
};

namespace detail {

inline std::vector<PromptRecord> load_prompts(const RunOptions& opts) {
  if (!fs::exists(opts.prompts)) throw UsageError("prompts file not found: " + opts.prompts.string());
  std::vector<PromptRecord> prompts;
  try {
    prompts = read_prompts(opts.prompts);
  } catch (const RecordError& e) {
    throw UsageError(e.what());
  }
  if (prompts.empty()) throw UsageError("prompts file is empty: " + opts.prompts.string());
  std::set<std::string> seen;
  for (const auto& p : prompts)
    if (!seen.insert(p.id).second) throw UsageError("duplicate prompt id '" + p.id + "'");
  return prompts;
}

inline int exit_code_for(std::size_t attempted, const std::vector<PromptFailure>& failures) {
  if (attempted == 0 || failures.size() * 2 <= attempted) return ExitCode::ok;
  bool all_transport = std::all_of(failures.begin(), failures.end(),
                                   [](const auto& f) { return f.transport; });
  return all_transport && failures.size() == attempted ? ExitCode::backend_unreachable
                                                       : ExitCode::majority_failure;
}

/// Per-prompt work result: either records keyed by output file, or a failure.
struct PromptResult {
  std::map<std::string, std::vector<json>> records;
  std::map<std::string, std::size_t> tallies;
  std::optional<PromptFailure> failure;
  bool skipped = false;
};

template <class Work>
RunSummary run_prompts(const std::string& stage, const RunOptions& opts,
                       const std::vector<std::string>& files, Work&& work,
                       std::map<std::string, std::vector<json>> appended = {}) {
  const auto started = utc_timestamp();
  auto prompts = load_prompts(opts);
  const auto& cfg = opts.config;
  cfg.pipeline.validate();
  BackendSet backends(cfg);

  std::vector<PromptResult> results(prompts.size());
  parallel_for(prompts.size(), cfg.pipeline.max_concurrency, [&](std::size_t i) {
    auto& r = results[i];
    if (opts.skip_ids.count(prompts[i].id)) {
      r.skipped = true;
      return;
    }
    try {
      work(prompts[i], backends, r);
    } catch (const PartialTreeError& e) {
      r.failure = PromptFailure{prompts[i].id, e.what(), e.transport_failure()};
    } catch (const Stage2Error& e) {
      r.failure = PromptFailure{prompts[i].id, e.what(), e.transport_failure};
    } catch (const BackendError& e) {
      r.failure = PromptFailure{prompts[i].id, e.what(), e.retryable()};
    }
  });

  RunSummary summary;
  summary.prompts = prompts.size();
  OutputSet out(opts.out_dir);
  std::map<std::string, std::vector<json>> merged;
  std::map<std::string, std::size_t> tallies;
  json skipped = json::array();
  std::size_t attempted = 0;
  for (std::size_t i = 0; i < prompts.size(); ++i) {
    auto& r = results[i];
    if (r.skipped) {
      skipped.push_back(prompts[i].id);
      continue;
    }
    ++attempted;
    if (r.failure) {
      summary.failures.push_back(*r.failure);
      continue;
    }
    for (auto& [file, recs] : r.records)
      for (auto& rec : recs) merged[file].push_back(std::move(rec));
    for (const auto& [k, v] : r.tallies) tallies[k] += v;
  }
  for (auto& [file, recs] : appended) {
    if (recs.empty()) continue;
    tallies[file + "_appended"] += recs.size();
    for (auto& rec : recs) merged[file].push_back(std::move(rec));
  }
  for (const auto& f : files) out.add_jsonl(f, merged[f]);

  json failures = json::array();
  for (const auto& f : summary.failures)
    failures.push_back({{"id", f.id}, {"error", f.error}, {"transport", f.transport}});

  const auto snapshot = config_snapshot(cfg.pipeline);
  json manifest = {
      {"run_id", make_run_id(stage, read_file(opts.prompts), snapshot)},
      {"stage", stage},
      {"config", snapshot},
      {"backends",
       {{"generator", redacted(cfg.generator)},
        {"scorer", redacted(cfg.scorer)},
        {"judge", redacted(cfg.judge)}}},
      {"prompts", prompts.size()},
      {"counts", out.counts()},
      {"tallies", tallies},
      {"failures", failures},
      {"skipped", skipped},
      {"started", started},
      {"finished", utc_timestamp()}};
  const std::string manifest_name = stage + "_manifest.json";
  out.add(manifest_name, manifest.dump(2) + "\n");
  out.commit();

  summary.counts = out.counts();
  summary.manifest = opts.out_dir / manifest_name;
  summary.exit_code = exit_code_for(attempted, summary.failures);
  return summary;
}

}  // namespace detail

/// Stage 1: trees.jsonl, rsft.jsonl, pairs.jsonl, stage1_manifest.json.
inline RunSummary run_stage1(const RunOptions& opts) {
  std::vector<json> mixin;
  if (opts.rsft_mixin) {
    if (!fs::exists(*opts.rsft_mixin))
      throw UsageError("mix-in file not found: " + opts.rsft_mixin->string());
    try {
      for_each_jsonl(*opts.rsft_mixin, [&](const json& j, std::size_t) {
        validate_record(j, RecordKind::sft);
        mixin.push_back(j);
      });
    } catch (const RecordError& e) {
      throw UsageError(e.what());
    }
  }
  return detail::run_prompts(
      "stage1", opts, {"trees.jsonl", "rsft.jsonl", "pairs.jsonl"},
      [&](const PromptRecord& p, BackendSet& b, detail::PromptResult& r) {
        auto s1 = synthesize_stage1(p.prompt, opts.config.pipeline, b.generator(), b.scorer(),
                                    p.id + "/");
        r.records["trees.jsonl"].push_back(tree_record(p.id, s1.tree, s1.dropped, s1.rejected_count));
        for (const auto& d : s1.rsft_dialogues) r.records["rsft.jsonl"].push_back(sft_record(d));
        for (const auto& pair : s1.pairs) {
          r.records["pairs.jsonl"].push_back(pair_record(pair));
          r.tallies[std::string("pairs_") + std::string(to_string(pair.kind))] += 1;
        }
        r.tallies["rejected_improvements"] += s1.rejected_count;
        r.tallies["dropped_samples"] += s1.dropped;
        if (!s1.tree.usable()) r.tallies["unusable_trees"] += 1;
      },
      {{"rsft.jsonl", std::move(mixin)}});
}

/// Stage 2: trajectories.jsonl, sft.jsonl, stage2_manifest.json.
inline RunSummary run_stage2(const RunOptions& opts) {
  return detail::run_prompts(
      "stage2", opts, {"trajectories.jsonl", "sft.jsonl"},
      [&](const PromptRecord& p, BackendSet& b, detail::PromptResult& r) {
        auto built = synthesize_trajectory(p.prompt, opts.config.pipeline, b.generator(), b.scorer());
        const auto& t = built.trajectory;
        r.records["trajectories.jsonl"].push_back(trajectory_record(p.id, t));
        r.records["sft.jsonl"].push_back(sft_record(
            {ChatMessage::user(p.prompt), ChatMessage::assistant(serialize_trajectory(t))}));
        r.tallies[std::string("rounds_") + std::to_string(t.rounds.size())] += 1;
        if (t.truncated) r.tallies["truncated"] += 1;
      });
}

/// Length control: length_control_pairs.jsonl, length_control_manifest.json.
inline RunSummary run_length_control(const RunOptions& opts) {
  if (opts.config.pipeline.length_control_samples_k < 2)
    throw ConfigError("length_control_samples must be at least 2");
  return detail::run_prompts(
      "length_control", opts, {"length_control_pairs.jsonl"},
      [&](const PromptRecord& p, BackendSet& b, detail::PromptResult& r) {
        auto pair = build_length_control_pairs(p.prompt, opts.config.pipeline, b.generator(),
                                               b.scorer(), p.id + "/");
        if (pair)
          r.records["length_control_pairs.jsonl"].push_back(pair_record(*pair));
        else
          r.tallies["no_pair"] += 1;
      });
}

struct DiagnoseOptions {
  std::optional<fs::path> trajectories;
  std::optional<fs::path> responses_a;
  std::optional<fs::path> responses_b;
  fs::path out_dir = ".";
  RunConfig config;
};

inline json iteration_report_json(const IterationReport& rep, std::optional<double> mean_return) {
  json rewards = json::array();
  for (const auto& v : rep.per_round_mean_reward) rewards.push_back(v ? json(*v) : json(nullptr));
  json hist = json::object();
  for (const auto& [round, n] : rep.best_round_histogram) hist[std::to_string(round)] = n;
  return {{"num_trajectories", rep.num_trajectories},
          {"per_round_count", rep.per_round_count},
          {"per_round_mean_reward", rewards},
          {"per_round_mean_length_chars", rep.per_round_mean_length_chars},
          {"best_round_histogram", hist},
          {"mean_discounted_return", mean_return ? json(*mean_return) : json(nullptr)}};
}

inline std::string iteration_csv(const IterationReport& rep) {
  std::ostringstream os;
  os << "round,count,mean_reward,mean_length_chars\n";
  os << std::setprecision(17);
  for (std::size_t r = 0; r < rep.per_round_count.size(); ++r) {
    os << r << ',' << rep.per_round_count[r] << ',';
    if (rep.per_round_mean_reward[r]) os << *rep.per_round_mean_reward[r];
    os << ',' << rep.per_round_mean_length_chars[r] << '\n';
  }
  return os.str();
}

inline json win_rate_json(const WinRateReport& rep) {
  return {{"wins", rep.wins},
          {"losses", rep.losses},
          {"ties", rep.ties},
          {"win_rate", rep.win_rate},
          {"mean_length_a", rep.mean_length_a},
          {"mean_length_b", rep.mean_length_b},
          {"unparseable_judgements", rep.unparseable}};
}

/// Writes iteration_report.json + iteration_rounds.csv for a trajectories
/// file and/or win_rate.json for two response files joined on id.
inline RunSummary run_diagnostics(const DiagnoseOptions& opts) {
  if (!opts.trajectories && !(opts.responses_a && opts.responses_b))
    throw UsageError("diagnose needs --trajectories or both --responses-a and --responses-b");
  if (opts.responses_a.has_value() != opts.responses_b.has_value())
    throw UsageError("--responses-a and --responses-b must be given together");
  for (const auto* p : {&opts.trajectories, &opts.responses_a, &opts.responses_b})
    if (*p && !fs::exists(**p)) throw UsageError("input file not found: " + (*p)->string());

  OutputSet out(opts.out_dir);
  RunSummary summary;
  try {
    if (opts.trajectories) {
      std::vector<RecursiveTrajectory> trajs;
      for_each_jsonl(*opts.trajectories, [&](const json& j, std::size_t) {
        trajs.push_back(trajectory_from_json(j).trajectory);
      });
      if (trajs.empty()) throw UsageError("no trajectories in " + opts.trajectories->string());
      const auto rep = iteration_stats(trajs);
      std::optional<double> mean_return;
      double sum = 0.0;
      std::size_t n = 0;
      for (const auto& t : trajs) {
        try {
          sum += discounted_return(t, opts.config.pipeline.gamma);
          ++n;
        } catch (const UnscoredNode&) {
        }
      }
      if (n > 0) mean_return = sum / static_cast<double>(n);
      out.add("iteration_report.json", iteration_report_json(rep, mean_return).dump(2) + "\n");
      out.add("iteration_rounds.csv", iteration_csv(rep));
      summary.counts["trajectories"] = trajs.size();
    }
    if (opts.responses_a) {
      std::map<std::string, ResponseRecord> b_by_id;
      for_each_jsonl(*opts.responses_b, [&](const json& j, std::size_t) {
        auto r = response_from_json(j);
        b_by_id[r.id] = std::move(r);
      });
      std::vector<PairwiseItem> items;
      for_each_jsonl(*opts.responses_a, [&](const json& j, std::size_t) {
        auto a = response_from_json(j);
        auto it = b_by_id.find(a.id);
        if (it == b_by_id.end()) return;
        items.push_back({a.prompt, a.response, it->second.response});
      });
      if (items.empty()) throw UsageError("response files share no ids");
      BackendSet backends(opts.config);
      const auto rep = pairwise_win_rate(items, backends.judge());
      out.add("win_rate.json", win_rate_json(rep).dump(2) + "\n");
      summary.counts["judged_pairs"] = items.size();
    }
  } catch (const RecordError& e) {
    throw UsageError(e.what());
  }
  out.commit();
  return summary;
}

}  // namespace refinery::io
