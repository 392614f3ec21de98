#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "coevo/backend.hpp"
#include "coevo/config.hpp"
#include "coevo/env.hpp"
#include "coevo/errors.hpp"
#include "coevo/graph.hpp"
#include "coevo/memory_index.hpp"

namespace coevo {

// ---------------------------------------------------------------------------
// Delta-guard
// ---------------------------------------------------------------------------

enum class RollbackKind { none, delta, catastrophic };

std::string_view to_string(RollbackKind k) noexcept;
RollbackKind parse_rollback_kind(std::string_view s);

struct GuardDecision {
    bool rolled_back = false;
    RollbackKind kind = RollbackKind::none;
    double drop = 0.0;
};

/// Pure rule: a drop larger than `delta` rolls back; a drop larger than
/// `catastrophic` is additionally flagged. Both accuracies must lie in [0,1].
GuardDecision delta_guard_rule(double acc_prev, double acc_new, double delta, double catastrophic);

/// Applies the rule and, on rollback, restores the snapshot's mutable slots.
GuardDecision delta_guard(KnowledgeGraph& g, double acc_prev, double acc_new, SnapshotId snapshot,
                          const EngineConfig& config);

// ---------------------------------------------------------------------------
// Critic
// ---------------------------------------------------------------------------

struct AnswerRecord {
    std::string question;
    std::string predicted;
    std::string gold;
    std::string task_type;  ///< judge calls are batched per task type
    std::string skill;      ///< skill the question was attempted with
};

struct CriticResult {
    std::vector<int> rewards;   ///< 0/1 per answer, in input order
    std::vector<bool> flagged;  ///< judge failed on this answer; scored 0
    /// Whole-pool success rate per skill. Skills with no attempts are absent.
    std::map<std::string, double> success_rate;
    std::map<std::string, std::pair<std::size_t, std::size_t>> correct_attempted;
};

/// Scores answers with one judge call per task type (Critic role, guidance
/// tier). A failed or malformed judge reply scores that batch 0 and flags it.
CriticResult critic_evaluate(std::span<const AnswerRecord> answers, Roster& roster, double temperature = 0.0);

/// Local exact-match scoring, used where no guidance call is allowed.
CriticResult exact_match_evaluate(std::span<const AnswerRecord> answers);

// ---------------------------------------------------------------------------
// Iteration report
// ---------------------------------------------------------------------------

struct QuestionOutcome {
    std::string question_id;
    std::string task_type;
    std::string skill;
    std::string routing_arm;
    std::string search_arm;
    std::size_t bundle_size = 0;
    int reward = 0;
    bool flagged = false;
};

struct MasteryChange {
    std::string skill;
    double prev = 0.0;
    double evidence = 0.0;
    double value = 0.0;
};

struct IterationReport {
    std::int64_t iter = 0;
    std::string phase = "train";  ///< "train" or "infer"
    std::vector<std::string> selected_frontier;
    /// Task stats the selector saw (before k_last was updated).
    std::vector<TaskStat> selector_input;
    std::vector<std::string> selected_task_types;
    std::string evolve_action;
    std::vector<QuestionOutcome> questions;
    double accuracy = 0.0;
    std::optional<double> prev_accuracy;
    std::map<std::string, std::vector<NodeId>> appended;  ///< by outcome name
    std::vector<NodeId> pruned;
    std::vector<MasteryChange> mastery;
    RollbackKind rollback = RollbackKind::none;
    double drop = 0.0;
    std::optional<SnapshotId> snapshot_id;
    CallCounts calls;
    std::vector<std::string> errors;
    bool explored = false;

    // Growth columns.
    std::size_t skills = 0;
    std::uint64_t failure_memories = 0;
    std::uint64_t success_memories = 0;
    std::size_t observed_types = 0;
    std::size_t covered_types = 0;  ///< observed types selected by EVOLVE at least once
    ProtectedCounts protected_counts;

    double coverage() const {
        return observed_types == 0 ? 0.0 : static_cast<double>(covered_types) / static_cast<double>(observed_types);
    }

    nlohmann::json to_json() const;
    static IterationReport from_json(const nlohmann::json& j);
};

struct CallAudit {
    double guidance_fraction_train = 0.0;
    double guidance_fraction_infer = 0.0;
    CallCounts train;
    CallCounts infer;

    nlohmann::json to_json() const;
};

/// Fractions over all model calls (retries included, embedder excluded).
/// Throws ValidationError on an empty report list.
CallAudit call_audit(std::span<const IterationReport> reports);

// ---------------------------------------------------------------------------
// Engine
// ---------------------------------------------------------------------------

/// The EVOLVE rotation, indexed by iteration mod 4.
enum class EvolveAction { principle_extraction, prompt_refinement, tool_authoring, skill_splitting };

EvolveAction evolve_action_for(std::int64_t iter) noexcept;
std::string_view to_string(EvolveAction a) noexcept;

/// A wrong answer handed to EVOLVE.
struct ErrorRecord {
    std::string question;
    std::string wrong_answer;
    std::string correct_answer;
};

/// Backend failure in the middle of an iteration. Carries what was recorded
/// up to that point; the graph keeps every write made before the failure.
class IterationError : public BackendError {
public:
    IterationError(const std::string& what, IterationReport partial)
        : BackendError(what), partial_(std::move(partial)) {}
    const IterationReport& partial() const noexcept { return partial_; }

private:
    IterationReport partial_;
};

struct EvalResult {
    double accuracy = 0.0;
    std::size_t correct = 0;
    std::size_t total = 0;
    CallCounts calls;
    std::map<std::string, std::pair<std::size_t, std::size_t>> by_task_type;

    nlohmann::json to_json() const;
};

struct EngineHooks {
    /// Replaces the measured accuracy before the delta-guard (fault injection).
    std::function<double(std::int64_t iter, double measured)> accuracy_override;
};

/// Drives the evolution loop over one graph. The graph, roster and
/// environment are borrowed and must outlive the engine.
class Engine {
public:
    Engine(EngineConfig config, const SyntheticEnv& env, KnowledgeGraph& graph, Roster& roster,
           std::shared_ptr<Embedder> embedder);

    const EngineConfig& config() const noexcept { return config_; }
    KnowledgeGraph& graph() noexcept { return graph_; }
    const MemoryIndex& memory() const noexcept { return memory_; }

    /// Phase 0: asks SkillDiscovery for the ontology and installs the skills,
    /// prerequisite edges and task types. No-op when the graph has skills.
    void bootstrap();

    /// PLAN, EXPLORE, EVALUATE, UPDATE, EVOLVE, then the delta-guard.
    IterationReport run_iteration(std::int64_t k);

    /// EVOLVE for the selected task types: failure-memory authoring for each
    /// type with errors, plus the rotation action for iteration k. Returns
    /// appended node ids; a skill-cap hit is recorded in `report.errors`.
    std::vector<NodeId> evolve_step(std::int64_t k, const std::vector<std::string>& selected,
                                    const std::map<std::string, std::vector<ErrorRecord>>& errors,
                                    IterationReport& report);

    /// Frozen inference over a pool: no graph or bandit writes, no guidance
    /// calls, exact-match scoring. Freezes the graph.
    EvalResult evaluate_frozen(std::span<const Question> pool, bool retrieval = true);

    /// The learner request for a question as the engine would issue it.
    ChatRequest answer_request(const Question& q, const std::string& routing_arm, const std::string& search_arm,
                               double temperature, std::uint64_t seed, bool retrieval = true,
                               std::size_t* bundle_size = nullptr);
    MemoryBundle bundle_for(const Question& q);

    /// Accuracy of the last accepted iteration (the delta-guard baseline).
    std::optional<double> prev_accuracy() const noexcept { return prev_accuracy_; }
    void set_prev_accuracy(std::optional<double> acc) { prev_accuracy_ = acc; }

    void set_hooks(EngineHooks hooks) { hooks_ = std::move(hooks); }

    /// Re-embeds every memory. Runs on construction and every refresh gap.
    void refresh_memory();

private:
    NodeId task_type_id(const std::string& name) const;
    NodeId resolver_of(NodeId task_type) const;
    void ensure_bandits(NodeId skill, NodeId task_type);
    std::vector<std::string> plan(std::int64_t k, IterationReport& report);
    void explore(std::int64_t k, const std::vector<std::string>& frontier, IterationReport& report);
    nlohmann::json guidance_call(Agent agent, const std::string& task, const nlohmann::json& input);
    void note_append(IterationReport& report, NodeId id);
    void fill_growth(IterationReport& report) const;

    EngineConfig config_;
    const SyntheticEnv& env_;
    KnowledgeGraph& graph_;
    Roster& roster_;
    std::shared_ptr<Embedder> embedder_;
    CountingEmbedder counting_;
    MemoryIndex memory_;
    std::set<std::string> harvested_questions_;
    std::optional<double> prev_accuracy_;
    EngineHooks hooks_;
};

/// Seed for a bandit context, stable across runs and replays.
std::uint64_t bandit_seed(std::uint64_t run_seed, BanditScope scope, NodeId context);

/// Arm choice while other choices from the same iteration are still pending:
/// warm-up quotas count pending pulls, Thompson draws use committed counts.
const std::string& select_arm_pending(const BanditState& state, const std::map<std::string, std::uint64_t>& pending,
                                      std::uint64_t salt);

}  // namespace coevo
