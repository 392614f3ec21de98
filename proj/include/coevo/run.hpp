#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "coevo/backend.hpp"
#include "coevo/config.hpp"
#include "coevo/engine.hpp"
#include "coevo/env.hpp"

namespace coevo {

namespace fs = std::filesystem;

/// Layout of a run directory:
///
///     config.json              validated configuration (seed included)
///     run.json                 environment name, fixed on the first run
///     events.jsonl             append-only event log, one record per line
///     reports.jsonl            one IterationReport per completed iteration
///     snapshots/snap-NNNNN.json  full graph state after iteration NNNNN
///     evals.jsonl              one record per frozen evaluation
struct RunPaths {
    fs::path dir;

    fs::path config() const { return dir / "config.json"; }
    fs::path meta() const { return dir / "run.json"; }
    fs::path events() const { return dir / "events.jsonl"; }
    fs::path reports() const { return dir / "reports.jsonl"; }
    fs::path snapshots() const { return dir / "snapshots"; }
    fs::path snapshot(std::int64_t iter) const;
    fs::path evals() const { return dir / "evals.jsonl"; }
};

struct BackendSet {
    std::shared_ptr<ModelBackend> guidance;
    std::shared_ptr<ModelBackend> execution;
    std::shared_ptr<ModelBackend> judge;  ///< may be null: the guidance backend judges
    std::shared_ptr<Embedder> embedder;
};

/// Simulated backends, or HTTP endpoints from COEVO_GUIDANCE_*, COEVO_EXECUTION_*,
/// COEVO_JUDGE_* and COEVO_EMBEDDER_* (URL, TOKEN, MODEL). COEVO_BACKEND
/// overrides the config's `backend`. Without an embedder endpoint the hashing
/// embedder is used.
BackendSet make_backends(const EngineConfig& config, const SyntheticEnv& env);

EngineConfig load_config(const fs::path& path);

/// Creates the run directory with a config copy and an empty event log.
/// An explicit seed overrides the config's.
RunPaths cmd_init(const fs::path& run_dir, const EngineConfig& config);

struct RunOptions {
    std::string env = "static_qa";
    std::optional<std::int64_t> iterations;  ///< total; defaults to the config value
    bool resume = false;
    /// Stop after this iteration completes, as if interrupted (tests).
    std::optional<std::int64_t> stop_after;
    EngineHooks hooks;
    /// Replaces make_backends (tests).
    std::function<BackendSet(const EngineConfig&, const SyntheticEnv&)> backends;
};

struct RunRecord {
    EngineConfig config;
    std::string env;
    std::vector<IterationReport> reports;
    fs::path events;
    std::vector<fs::path> snapshots;
};

/// Runs (or, with `resume`, continues) the loop. Resuming truncates the event
/// log and reports back to the last snapshot and rebuilds the graph by replay.
RunRecord cmd_run(const fs::path& run_dir, const RunOptions& options);

struct EvalOptions {
    bool retrieval = true;
    std::string pool = "heldout";  ///< "heldout" or "train"
    std::function<BackendSet(const EngineConfig&, const SyntheticEnv&)> backends;
};

struct EvalRecord {
    EvalResult result;
    std::string graph_hash_before;
    std::string graph_hash_after;
    bool retrieval = true;

    nlohmann::json to_json() const;
};

/// Frozen evaluation of the latest state. Nothing is written to the graph or
/// the event log; the result is appended to evals.jsonl.
EvalRecord cmd_eval(const fs::path& run_dir, const EvalOptions& options = {});

struct AuditCheck {
    std::string name;
    bool passed = true;
    std::string detail;
    std::optional<std::uint64_t> seq;  ///< offending event, when there is one
};

struct AuditReport {
    std::vector<AuditCheck> checks;
    bool passed() const;
    nlohmann::json to_json() const;
    std::string to_text() const;
};

/// Checks over a recorded run: (a) protected monotonicity, (b) reselection
/// gaps, (c) ratchet bounds, (d) rollbacks keep protected nodes, (e) no
/// guidance calls at inference, (f) replay reproduces the last snapshot.
/// Throws IntegrityError on an unreadable log or broken sequence numbering.
AuditReport cmd_audit(const fs::path& run_dir);

/// Tab-separated growth table, header included.
std::string cmd_stats(const fs::path& run_dir);

/// Reads events.jsonl. Throws IntegrityError naming the first bad record.
std::vector<Event> read_events(const fs::path& path);
std::vector<IterationReport> read_reports(const fs::path& path);
std::vector<EvalRecord> read_evals(const fs::path& path);

/// Hex digest of the canonical graph dump.
std::string graph_hash(const KnowledgeGraph& g);

}  // namespace coevo
