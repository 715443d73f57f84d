// refinery: command-line driver for the refinement data pipeline.
//
//   refinery [--config FILE] [--seed N] [--max-concurrency N] [--out-dir DIR] <verb> ...
//
//   stage1          --prompts FILE [--rsft-mixin FILE] [--skip-ids FILE]
//   stage2          --prompts FILE [--skip-ids FILE]
//   length-control  --prompts FILE [--skip-ids FILE]
//   diagnose        [--trajectories FILE] [--responses-a FILE --responses-b FILE]
//   validate        FILE [--kind prompts|pairs|sft|trees|trajectories|responses]
//
// Exit codes: 0 success, 1 usage/config, 2 majority of prompts failed,
// 3 backend unreachable.

#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "refinery/io/config.hpp"
#include "refinery/io/records.hpp"
#include "refinery/io/runner.hpp"

namespace fs = std::filesystem;
using namespace refinery;

namespace {

struct GlobalFlags {
  std::optional<fs::path> config;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> max_concurrency;
  fs::path out_dir = ".";
};

io::RunConfig resolve_config(const GlobalFlags& g) {
  io::RunConfig cfg = g.config ? io::load_config(*g.config) : io::RunConfig{};
  if (g.seed) cfg.pipeline.seed = *g.seed;
  if (g.max_concurrency) cfg.pipeline.max_concurrency = *g.max_concurrency;
  cfg.pipeline.validate();
  return cfg;
}

std::set<std::string> read_skip_ids(const std::optional<fs::path>& path) {
  std::set<std::string> ids;
  if (!path) return ids;
  std::ifstream in(*path);
  if (!in) throw io::UsageError("cannot open skip list '" + path->string() + "'");
  for (std::string line; std::getline(in, line);) {
    auto id = trim(line);
    if (!id.empty()) ids.insert(id);
  }
  return ids;
}

void report(const std::string& verb, const io::RunSummary& s) {
  std::cerr << verb << ": " << s.prompts << " prompts, " << s.failures.size() << " failed\n";
  for (const auto& [file, n] : s.counts) std::cerr << "  " << file << ": " << n << " records\n";
  for (const auto& f : s.failures) std::cerr << "  failed " << f.id << ": " << f.error << "\n";
  if (!s.manifest.empty()) std::cerr << "  manifest: " << s.manifest.string() << "\n";
}

int validate_file(const fs::path& path, const std::optional<std::string>& kind_name) {
  std::optional<io::RecordKind> kind;
  if (kind_name) {
    kind = io::record_kind_from_string(*kind_name);
    if (!kind) throw io::UsageError("unknown record kind '" + *kind_name + "'");
  }
  if (!fs::exists(path)) throw io::UsageError("file not found: " + path.string());
  std::size_t n = 0;
  try {
    io::for_each_jsonl(path, [&](const io::json& j, std::size_t lineno) {
      if (!kind) {
        kind = io::detect_kind(j);
        if (!kind) throw io::RecordError("cannot infer record kind at line " + std::to_string(lineno));
      }
      io::validate_record(j, *kind);
      ++n;
    });
  } catch (const io::RecordError& e) {
    std::cerr << "invalid: " << e.what() << "\n";
    return io::ExitCode::usage_error;
  }
  std::cout << path.string() << ": " << n << " valid records\n";
  return io::ExitCode::ok;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Refinement-tree and recursive-CoT dataset synthesis"};
  app.require_subcommand(1);

  GlobalFlags g;
  app.add_option("--config", g.config, "INI config with [pipeline], [generator], [scorer], [judge]");
  app.add_option("--seed", g.seed, "Override the pipeline seed");
  app.add_option("--max-concurrency", g.max_concurrency, "Override the in-flight call limit")
      ->check(CLI::PositiveNumber);
  app.add_option("--out-dir", g.out_dir, "Output directory");

  fs::path prompts;
  std::optional<fs::path> skip_ids, mixin;

  auto* stage1 = app.add_subcommand("stage1", "Refinement trees, RSFT dialogues and preference pairs");
  stage1->add_option("--prompts", prompts, "Prompts JSONL {id, prompt}")->required();
  stage1->add_option("--rsft-mixin", mixin, "SFT JSONL appended to rsft.jsonl");
  stage1->add_option("--skip-ids", skip_ids, "File of prompt ids to skip, one per line");

  auto* stage2 = app.add_subcommand("stage2", "Greedy recursive-CoT trajectories and SFT records");
  stage2->add_option("--prompts", prompts, "Prompts JSONL {id, prompt}")->required();
  stage2->add_option("--skip-ids", skip_ids, "File of prompt ids to skip, one per line");

  auto* lc = app.add_subcommand("length-control", "Length-control preference pairs");
  lc->add_option("--prompts", prompts, "Prompts JSONL {id, prompt}")->required();
  lc->add_option("--skip-ids", skip_ids, "File of prompt ids to skip, one per line");

  std::optional<fs::path> trajectories, responses_a, responses_b;
  auto* diagnose = app.add_subcommand("diagnose", "Iteration statistics and pairwise win rate");
  diagnose->add_option("--trajectories", trajectories, "Stage-2 trajectories JSONL");
  diagnose->add_option("--responses-a", responses_a, "Responses JSONL {id, prompt, response}");
  diagnose->add_option("--responses-b", responses_b, "Baseline responses JSONL");

  fs::path validate_path;
  std::optional<std::string> kind;
  auto* validate = app.add_subcommand("validate", "Schema-check an artifact file");
  validate->add_option("file", validate_path, "JSONL file")->required();
  validate->add_option("--kind", kind, "prompts|pairs|sft|trees|trajectories|responses");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? io::ExitCode::ok : io::ExitCode::usage_error;
  }

  try {
    if (validate->parsed()) return validate_file(validate_path, kind);

    const auto cfg = resolve_config(g);
    if (diagnose->parsed()) {
      io::DiagnoseOptions opts{trajectories, responses_a, responses_b, g.out_dir, cfg};
      auto s = io::run_diagnostics(opts);
      for (const auto& [what, n] : s.counts) std::cerr << "diagnose: " << what << ": " << n << "\n";
      return io::ExitCode::ok;
    }

    io::RunOptions opts;
    opts.prompts = prompts;
    opts.out_dir = g.out_dir;
    opts.config = cfg;
    opts.skip_ids = read_skip_ids(skip_ids);
    opts.rsft_mixin = mixin;

    io::RunSummary s;
    std::string verb;
    if (stage1->parsed()) {
      verb = "stage1";
      s = io::run_stage1(opts);
    } else if (stage2->parsed()) {
      verb = "stage2";
      s = io::run_stage2(opts);
    } else {
      verb = "length-control";
      s = io::run_length_control(opts);
    }
    report(verb, s);
    return s.exit_code;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return io::ExitCode::usage_error;
  } catch (const io::UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return io::ExitCode::usage_error;
  } catch (const BackendError& e) {
    std::cerr << "backend error: " << e.what() << "\n";
    return e.retryable() ? io::ExitCode::backend_unreachable : io::ExitCode::majority_failure;
  }
}
