#pragma once

// Generator and scorer interfaces, the deterministic scripted mocks used by
// tests and offline runs, and the retry / concurrency decorators the engine
// wraps around any backend.

#include <atomic>
#include <chrono>
#include <cstdint>
#include <exception>
#include <functional>
#include <future>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <semaphore>
#include <string>
#include <string_view>
#include <thread>
#include <unordered_map>
#include <utility>
#include <vector>

#include "refinery/core.hpp"

namespace refinery {

// ---------------------------------------------------------------------------
// Errors
// ---------------------------------------------------------------------------

class BackendError : public std::runtime_error {
 public:
  BackendError(const std::string& what, bool retryable, int attempts = 1)
      : std::runtime_error(what), retryable_(retryable), attempts_(attempts) {}
  bool retryable() const { return retryable_; }
  int attempts() const { return attempts_; }

 private:
  bool retryable_;
  int attempts_;
};

/// Connection failures, timeouts and 5xx responses.
struct TransportError : BackendError {
  explicit TransportError(const std::string& what, int attempts = 1)
      : BackendError(what, true, attempts) {}
};

/// Malformed or semantically invalid service responses. Never retried.
struct ProtocolError : BackendError {
  explicit ProtocolError(const std::string& what) : BackendError(what, false) {}
};

// ---------------------------------------------------------------------------
// Interfaces
// ---------------------------------------------------------------------------

struct SamplingParams {
  double temperature = 0.7;
  double top_p = 0.8;
  std::size_t max_tokens = 2048;
  std::size_t n = 1;

  void validate() const {
    if (!(temperature >= 0.0)) throw std::invalid_argument("temperature must be non-negative");
    if (!(top_p > 0.0 && top_p <= 1.0)) throw std::invalid_argument("top_p must lie in (0, 1]");
    if (max_tokens == 0) throw std::invalid_argument("max_tokens must be positive");
    if (n == 0) throw std::invalid_argument("n must be positive");
  }

  static SamplingParams from(const PipelineConfig& cfg, std::size_t n = 1) {
    return {cfg.temperature, cfg.top_p, cfg.max_tokens, n};
  }
};

class GeneratorBackend {
 public:
  virtual ~GeneratorBackend() = default;

  /// Returns exactly `params.n` completions for a conversation ending in a
  /// user turn, or throws. Completion i corresponds to sample index
  /// `first_sample + i`, which lets callers request distinct samples of the
  /// same conversation across separate calls.
  virtual std::vector<std::string> generate(const Conversation& conversation,
                                            const SamplingParams& params,
                                            std::size_t first_sample = 0) = 0;

  virtual std::string id() const = 0;
};

class ScorerBackend {
 public:
  virtual ~ScorerBackend() = default;
  virtual RewardScore score(const std::string& query, const std::string& response) = 0;
  virtual std::string id() const = 0;
};

inline void check_generate_preconditions(const Conversation& conversation,
                                         const SamplingParams& params) {
  if (conversation.empty() || conversation.back().role != Role::user)
    throw std::invalid_argument("conversation must end with a user message");
  params.validate();
}

// ---------------------------------------------------------------------------
// Fingerprints
// ---------------------------------------------------------------------------

namespace detail {

inline constexpr std::uint64_t fnv_offset = 0xcbf29ce484222325ULL;
inline constexpr std::uint64_t fnv_prime = 0x100000001b3ULL;

inline std::uint64_t fnv1a(std::string_view bytes, std::uint64_t h = fnv_offset) {
  for (unsigned char c : bytes) {
    h ^= c;
    h *= fnv_prime;
  }
  return h;
}

inline std::uint64_t fnv1a_u64(std::uint64_t v, std::uint64_t h) {
  for (int i = 0; i < 8; ++i) {
    h ^= (v >> (8 * i)) & 0xFF;
    h *= fnv_prime;
  }
  return h;
}

inline std::uint64_t splitmix64(std::uint64_t& state) {
  std::uint64_t z = (state += 0x9E3779B97F4A7C15ULL);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

}  // namespace detail

/// Stable 64-bit FNV-1a hash of the full conversation text, sample index and seed.
inline std::uint64_t fingerprint(const Conversation& conversation, std::size_t sample_index,
                                 std::uint64_t seed) {
  std::uint64_t h = detail::fnv_offset;
  for (const auto& m : conversation) {
    h = detail::fnv1a(to_string(m.role), h);
    h = detail::fnv1a(std::string_view("\x1f", 1), h);
    h = detail::fnv1a(m.content, h);
    h = detail::fnv1a(std::string_view("\x1e", 1), h);
  }
  h = detail::fnv1a_u64(sample_index, h);
  return detail::fnv1a_u64(seed, h);
}

// ---------------------------------------------------------------------------
// Scripted mocks
// ---------------------------------------------------------------------------

/// Rule consulted for conversations without a scripted entry. Returning
/// nullopt falls through to synthesized text. Throwing simulates a failure.
using CompletionRule =
    std::function<std::optional<std::string>(const Conversation&, std::size_t sample_index)>;

/// Deterministic generator: completions are a pure function of
/// (conversation, sample index, seed).
class MockGenerator final : public GeneratorBackend {
 public:
  explicit MockGenerator(std::uint64_t seed = 0, CompletionRule rule = {})
      : seed_(seed), rule_(std::move(rule)) {}

  void add_completion(std::uint64_t fp, std::string text) {
    std::lock_guard lock(mu_);
    table_[fp] = std::move(text);
  }
  void add_completion(const Conversation& c, std::size_t index, std::string text) {
    add_completion(fingerprint(c, index, seed_), std::move(text));
  }

  std::vector<std::string> generate(const Conversation& conversation, const SamplingParams& params,
                                    std::size_t first_sample = 0) override {
    check_generate_preconditions(conversation, params);
    calls_.fetch_add(1, std::memory_order_relaxed);
    std::vector<std::string> out;
    out.reserve(params.n);
    for (std::size_t i = 0; i < params.n; ++i) out.push_back(complete(conversation, first_sample + i));
    return out;
  }

  std::string id() const override { return "mock-generator:" + std::to_string(seed_); }
  std::uint64_t seed() const { return seed_; }
  std::size_t calls() const { return calls_.load(); }

 private:
  std::string complete(const Conversation& c, std::size_t index) const {
    const auto fp = fingerprint(c, index, seed_);
    {
      std::lock_guard lock(mu_);
      if (auto it = table_.find(fp); it != table_.end()) return it->second;
    }
    if (rule_)
      if (auto text = rule_(c, index)) return *text;
    return synthesize(fp);
  }

  static std::string synthesize(std::uint64_t fp) {
    static constexpr std::string_view words[] = {
        "the",      "answer",  "considers", "several", "points",   "clearly", "detail",
        "example",  "because", "however",   "planet",  "system",   "result",  "response",
        "improves", "context", "accuracy",  "concise", "relevant", "depth",   "user",
        "question", "further", "step",      "method",  "summary",  "source",  "evidence",
        "therefore", "overall", "explains", "list",    "order",    "value",   "quality"};
    std::uint64_t state = fp;
    const std::size_t n_words = 6 + detail::splitmix64(state) % 43;
    std::string out;
    bool sentence_start = true;
    for (std::size_t i = 0; i < n_words; ++i) {
      std::string w(words[detail::splitmix64(state) % std::size(words)]);
      if (sentence_start) w[0] = static_cast<char>(w[0] - 'a' + 'A');
      if (!out.empty()) out += ' ';
      out += w;
      sentence_start = detail::splitmix64(state) % 7 == 0 || i + 1 == n_words;
      if (sentence_start) out += '.';
    }
    return out;
  }

  std::uint64_t seed_;
  CompletionRule rule_;
  mutable std::mutex mu_;
  std::unordered_map<std::uint64_t, std::string> table_;
  std::atomic<std::size_t> calls_{0};
};

using RewardRule =
    std::function<std::optional<double>(const std::string& query, const std::string& response)>;

/// Deterministic scorer backed by a (query, response) table. Unknown pairs go
/// to the rule, then to a hashed reward when enabled, else to the default.
class MockScorer final : public ScorerBackend {
 public:
  struct Options {
    double default_reward = 0.0;
    bool hashed = false;       // reward = uniform[-1, 1) from hash(query, response, seed)
    double length_bias = 0.0;  // added per 1000 characters of response when hashed
    std::uint64_t seed = 0;
    std::string scorer_id = "mock-scorer";
  };

  MockScorer() : MockScorer(Options{}) {}
  explicit MockScorer(Options opts, RewardRule rule = {})
      : opts_(std::move(opts)), rule_(std::move(rule)) {}

  void set(const std::string& query, const std::string& response, double reward) {
    std::lock_guard lock(mu_);
    table_[{query, response}] = reward;
  }

  RewardScore score(const std::string& query, const std::string& response) override {
    if (query.empty() || response.empty())
      throw std::invalid_argument("score requires non-empty query and response");
    calls_.fetch_add(1, std::memory_order_relaxed);
    {
      std::lock_guard lock(mu_);
      if (auto it = table_.find({query, response}); it != table_.end())
        return {it->second, opts_.scorer_id};
    }
    if (rule_)
      if (auto v = rule_(query, response)) return {*v, opts_.scorer_id};
    if (opts_.hashed) {
      std::uint64_t h = detail::fnv1a(query);
      h = detail::fnv1a(std::string_view("\0", 1), h);
      h = detail::fnv1a(response, h);
      h = detail::fnv1a_u64(opts_.seed, h);
      std::uint64_t state = h;
      const double u = static_cast<double>(detail::splitmix64(state) >> 11) * 0x1.0p-53;
      return {2.0 * u - 1.0 + opts_.length_bias * static_cast<double>(char_length(response)) / 1000.0,
              opts_.scorer_id};
    }
    return {opts_.default_reward, opts_.scorer_id};
  }

  std::string id() const override { return opts_.scorer_id; }
  std::size_t calls() const { return calls_.load(); }

 private:
  Options opts_;
  RewardRule rule_;
  mutable std::mutex mu_;
  std::map<std::pair<std::string, std::string>, double> table_;
  std::atomic<std::size_t> calls_{0};
};

// ---------------------------------------------------------------------------
// Retry and concurrency decorators
// ---------------------------------------------------------------------------

struct RetryPolicy {
  int max_attempts = 3;
  std::chrono::milliseconds initial_backoff{500};
};

/// Caps the number of in-flight backend calls across every wrapped backend.
class ConcurrencyLimiter {
 public:
  explicit ConcurrencyLimiter(std::size_t limit)
      : sem_(static_cast<std::ptrdiff_t>(limit == 0 ? 1 : limit)) {}

  template <class F>
  auto run(F&& fn) {
    sem_.acquire();
    struct Release {
      std::counting_semaphore<>& s;
      ~Release() { s.release(); }
    } release{sem_};
    return fn();
  }

 private:
  std::counting_semaphore<> sem_;
};

namespace detail {

template <class F>
auto with_retry(const RetryPolicy& policy, ConcurrencyLimiter* limiter, F&& fn) {
  auto backoff = policy.initial_backoff;
  for (int attempt = 1;; ++attempt) {
    try {
      if (limiter) return limiter->run(fn);
      return fn();
    } catch (const BackendError& e) {
      if (!e.retryable()) throw;
      if (attempt >= policy.max_attempts)
        throw TransportError(std::string(e.what()) + " (after " + std::to_string(attempt) +
                                 " attempts)",
                             attempt);
    }
    if (backoff.count() > 0) std::this_thread::sleep_for(backoff);
    backoff *= 2;
  }
}

}  // namespace detail

/// Applies the retry policy and the global concurrency cap to a generator.
class ManagedGenerator final : public GeneratorBackend {
 public:
  ManagedGenerator(GeneratorBackend& inner, RetryPolicy policy = {},
                   ConcurrencyLimiter* limiter = nullptr)
      : inner_(inner), policy_(policy), limiter_(limiter) {}

  std::vector<std::string> generate(const Conversation& conversation, const SamplingParams& params,
                                    std::size_t first_sample = 0) override {
    check_generate_preconditions(conversation, params);
    auto out = detail::with_retry(policy_, limiter_, [&] {
      return inner_.generate(conversation, params, first_sample);
    });
    if (out.size() != params.n)
      throw ProtocolError("backend returned " + std::to_string(out.size()) +
                          " completions, expected " + std::to_string(params.n));
    return out;
  }

  std::string id() const override { return inner_.id(); }

 private:
  GeneratorBackend& inner_;
  RetryPolicy policy_;
  ConcurrencyLimiter* limiter_;
};

class ManagedScorer final : public ScorerBackend {
 public:
  ManagedScorer(ScorerBackend& inner, RetryPolicy policy = {},
                ConcurrencyLimiter* limiter = nullptr)
      : inner_(inner), policy_(policy), limiter_(limiter) {}

  RewardScore score(const std::string& query, const std::string& response) override {
    return detail::with_retry(policy_, limiter_, [&] { return inner_.score(query, response); });
  }

  std::string id() const override { return inner_.id(); }

 private:
  ScorerBackend& inner_;
  RetryPolicy policy_;
  ConcurrencyLimiter* limiter_;
};

// ---------------------------------------------------------------------------
// Fan-out
// ---------------------------------------------------------------------------

template <class T>
struct Outcome {
  std::optional<T> value;
  std::exception_ptr error;

  bool ok() const { return value.has_value(); }
  void rethrow() const {
    if (error) std::rethrow_exception(error);
  }
};

/// Runs fn(0..n-1) concurrently and returns outcomes in index order, so the
/// completion order of the tasks never leaks into results.
template <class F>
auto fan_out(std::size_t n, F&& fn) {
  using T = std::decay_t<decltype(fn(std::size_t{0}))>;
  std::vector<Outcome<T>> out(n);
  auto run_one = [&](std::size_t i) {
    try {
      out[i].value.emplace(fn(i));
    } catch (...) {
      out[i].error = std::current_exception();
    }
  };
  if (n <= 1) {
    for (std::size_t i = 0; i < n; ++i) run_one(i);
    return out;
  }
  std::vector<std::future<void>> futures;
  futures.reserve(n);
  for (std::size_t i = 0; i < n; ++i)
    futures.push_back(std::async(std::launch::async, run_one, i));
  for (auto& f : futures) f.get();
  return out;
}

/// Strips leading and trailing whitespace from a completion.
inline std::string trim(std::string_view s) {
  constexpr std::string_view ws = " \t\r\n\f\v";
  const auto b = s.find_first_not_of(ws);
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(ws);
  return std::string(s.substr(b, e - b + 1));
}

}  // namespace refinery
