#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <shared_mutex>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include <nlohmann/json.hpp>

#include "coevo/bandit.hpp"

namespace coevo {

using NodeId = std::uint64_t;
using SnapshotId = std::uint64_t;

// ---------------------------------------------------------------------------
// Node types
// ---------------------------------------------------------------------------

enum class Outcome { principle, failure_memory, success_memory, retrieval_recipe, abstracted_pattern };
enum class FailureKind { specific, type_strategy };
enum class EnvClass { entity, relation, observation, task_context };

std::string_view to_string(Outcome o) noexcept;
std::string_view to_string(FailureKind k) noexcept;
std::string_view to_string(EnvClass c) noexcept;
Outcome parse_outcome(std::string_view s);
FailureKind parse_failure_kind(std::string_view s);
EnvClass parse_env_class(std::string_view s);

/// Principle, failure-memory and success-memory nodes are never removed or
/// mutated once appended.
constexpr bool is_protected(Outcome o) noexcept {
    return o == Outcome::principle || o == Outcome::failure_memory || o == Outcome::success_memory;
}

struct SkillNode {
    NodeId id = 0;
    std::string name;
    double mastery = 0.0;
    std::string prompt_template;
    std::string strategy;
    std::vector<NodeId> principle_ids;

    bool operator==(const SkillNode&) const = default;
};

struct TaskTypeNode {
    NodeId id = 0;
    std::string name;
    std::uint64_t n_fail = 0;
    std::int64_t k_last = -1;
    std::optional<NodeId> resolver_skill_id;
    bool observed = false;

    bool operator==(const TaskTypeNode&) const = default;
};

struct PrinciplePayload {
    std::string text;
    bool operator==(const PrinciplePayload&) const = default;
};

struct FailurePayload {
    std::string question;
    std::string wrong_answer;
    std::string corrective_reasoning;
    std::string correct_answer;
    FailureKind kind = FailureKind::specific;
    bool operator==(const FailurePayload&) const = default;
};

struct SuccessPayload {
    std::string question;
    std::string reasoning_trace;
    std::string answer;
    /// (skill_name, step_output) pairs; empty for single-step questions.
    std::vector<std::pair<std::string, std::string>> decomposition;
    bool operator==(const SuccessPayload&) const = default;
};

/// Retrieval recipes cover both action recipes (trailing actions before an
/// achievement) and authored tool descriptions.
struct RecipePayload {
    std::string name;
    std::string description;
    std::vector<std::string> actions;
    bool operator==(const RecipePayload&) const = default;
};

struct PatternPayload {
    std::string summary;
    bool operator==(const PatternPayload&) const = default;
};

using ExperiencePayload =
    std::variant<PrinciplePayload, FailurePayload, SuccessPayload, RecipePayload, PatternPayload>;

struct ExperienceNode {
    NodeId id = 0;
    Outcome outcome = Outcome::principle;
    std::optional<NodeId> task_type_id;
    std::optional<NodeId> skill_id;
    double confidence = 1.0;
    ExperiencePayload payload;
    std::int64_t created_iter = 0;

    bool operator==(const ExperienceNode&) const = default;

    /// Set only for failure memories.
    std::optional<FailureKind> kind() const;
};

struct EnvNode {
    NodeId id = 0;
    EnvClass cls = EnvClass::observation;
    std::string payload;
    bool operator==(const EnvNode&) const = default;
};

struct ProtectedCounts {
    std::uint64_t principle = 0;
    std::uint64_t failure_memory = 0;
    std::uint64_t success_memory = 0;

    bool operator==(const ProtectedCounts&) const = default;
    /// True when every class count is >= the other's.
    bool dominates(const ProtectedCounts& o) const noexcept {
        return principle >= o.principle && failure_memory >= o.failure_memory && success_memory >= o.success_memory;
    }
};

// ---------------------------------------------------------------------------
// Snapshots of mutable slots
// ---------------------------------------------------------------------------

struct SkillSlots {
    double mastery = 0.0;
    std::string prompt_template;
    std::string strategy;
    bool operator==(const SkillSlots&) const = default;
};

enum class BanditScope { routing, search };

/// Everything the delta-guard may roll back.
struct MutableState {
    std::map<NodeId, SkillSlots> skills;
    std::map<NodeId, BanditState> routing_bandits;
    std::map<NodeId, BanditState> search_bandits;
    bool operator==(const MutableState&) const = default;
};

struct Snapshot {
    SnapshotId snapshot_id = 0;
    std::int64_t iteration = 0;
    MutableState mutable_state;
    ProtectedCounts protected_watermark;
};

// ---------------------------------------------------------------------------
// Event log
// ---------------------------------------------------------------------------

/// One line of the append-only log: {seq, iter, op, payload}.
struct Event {
    std::uint64_t seq = 0;
    std::int64_t iter = 0;
    std::string op;
    nlohmann::json payload;

    nlohmann::json to_json() const;
    static Event from_json(const nlohmann::json& j);
    /// Serialized single-line form, without the trailing newline.
    std::string line() const;
};

struct GraphLimits {
    std::size_t principle_cap = 12;
    std::size_t skill_cap = 30;
    std::size_t snapshot_limit = 64;
};

// ---------------------------------------------------------------------------
// KnowledgeGraph
// ---------------------------------------------------------------------------

/// The four typed subgraphs (capability, task, experience, environment) plus
/// the bandit states that ride along as mutable slots.
///
/// Every mutation is validated, applied and appended to the event log as one
/// record; replaying the log into an empty graph reproduces the state exactly,
/// ids included. Writers are serialized; readers take a shared lock and get
/// copies, so they never observe a half-applied mutation.
class KnowledgeGraph {
public:
    using EventSink = std::function<void(const Event&)>;

    explicit KnowledgeGraph(GraphLimits limits = {});

    KnowledgeGraph(const KnowledgeGraph&) = delete;
    KnowledgeGraph& operator=(const KnowledgeGraph&) = delete;

    const GraphLimits& limits() const noexcept { return limits_; }

    // -- iteration context ---------------------------------------------------
    void set_iteration(std::int64_t iter);
    std::int64_t iteration() const;

    /// After freeze() any mutation throws InvariantBreach.
    void freeze();
    bool frozen() const;

    // -- capability subgraph -------------------------------------------------
    NodeId add_skill(const std::string& name, double mastery = 0.0, const std::string& prompt_template = {},
                     const std::string& strategy = {});
    /// `from` becomes a prerequisite of `to`. Throws CycleError (graph
    /// unchanged) if the edge would close a cycle.
    void add_prerequisite(NodeId from, NodeId to);
    void set_mastery(NodeId skill, double mastery);
    void set_prompt_template(NodeId skill, const std::string& text);
    void set_strategy(NodeId skill, const std::string& text);
    /// Links a principle node to a skill. At the cap the oldest reference is
    /// dropped from the skill's list; the principle node itself stays.
    /// Returns the evicted reference, if any.
    std::optional<NodeId> attach_principle(NodeId skill, NodeId principle);

    // -- task subgraph -------------------------------------------------------
    NodeId add_task_type(const std::string& name, std::optional<NodeId> resolver_skill = std::nullopt);
    void set_resolver(NodeId task_type, NodeId skill);
    void mark_observed(NodeId task_type);
    void add_failures(NodeId task_type, std::uint64_t count);
    /// Records that EVOLVE selected the task type at iteration `k`.
    void mark_selected(NodeId task_type, std::int64_t k);

    // -- experience subgraph -------------------------------------------------
    /// Validates, assigns an id and stores the node. The incoming id is ignored.
    NodeId append_experience(ExperienceNode node);
    /// Removes abstracted_pattern nodes with confidence < threshold.
    std::vector<NodeId> prune_low_confidence(double threshold);

    // -- environment subgraph ------------------------------------------------
    NodeId add_env(EnvClass cls, const std::string& payload);

    // -- bandits -------------------------------------------------------------
    /// Installs `initial` unless the context already has a bandit.
    void ensure_bandit(BanditScope scope, NodeId context, const BanditState& initial);
    void update_bandit(BanditScope scope, NodeId context, const std::string& arm, int reward);
    std::optional<BanditState> bandit(BanditScope scope, NodeId context) const;

    // -- snapshots -----------------------------------------------------------
    SnapshotId snapshot();
    void rollback_mutable(SnapshotId id);
    std::optional<Snapshot> find_snapshot(SnapshotId id) const;
    MutableState mutable_state() const;

    // -- read views ----------------------------------------------------------
    ProtectedCounts protected_counts() const;
    SkillNode skill(NodeId id) const;
    std::optional<SkillNode> find_skill_by_name(const std::string& name) const;
    std::vector<SkillNode> skills() const;
    std::size_t skill_count() const;
    std::vector<std::pair<NodeId, NodeId>> prerequisites() const;
    /// Direct prerequisites of `skill`, ascending id.
    std::vector<NodeId> prerequisites_of(NodeId skill) const;
    /// Skills in topological order (prerequisites first, ties by id).
    std::vector<NodeId> topological_order() const;

    TaskTypeNode task_type(NodeId id) const;
    std::optional<TaskTypeNode> find_task_type_by_name(const std::string& name) const;
    std::vector<TaskTypeNode> task_types() const;

    bool has_experience(NodeId id) const;
    ExperienceNode experience(NodeId id) const;
    std::vector<ExperienceNode> experience_nodes() const;
    std::vector<ExperienceNode> experience_by_outcome(Outcome o) const;
    std::vector<EnvNode> env_nodes() const;

    // -- persistence ---------------------------------------------------------
    /// Full state as canonical JSON (used for snapshot files and replay checks).
    nlohmann::json to_json() const;
    std::string dump() const;

    const std::vector<Event>& events() const noexcept { return log_; }
    /// Called after every appended record.
    void set_event_sink(EventSink sink);
    /// Number the next record will carry; resumed runs continue the sequence.
    std::uint64_t next_seq() const;

    /// Rebuilds a graph from a log. Throws IntegrityError naming the offending
    /// record on gaps, unknown ops or records that fail validation.
    static void replay_into(KnowledgeGraph& g, const std::vector<Event>& events);
    /// Appends an event recorded elsewhere (used by replay_into).
    void apply_recorded(const Event& e);

private:
    void require_writable() const;
    void commit(std::string op, nlohmann::json payload);
    void apply(const std::string& op, const nlohmann::json& payload);
    bool reaches(NodeId from, NodeId to) const;
    MutableState mutable_state_unlocked() const;
    ProtectedCounts protected_counts_unlocked() const;
    std::map<NodeId, BanditState>& bandits(BanditScope scope);
    const std::map<NodeId, BanditState>& bandits(BanditScope scope) const;
    SkillNode& skill_ref(NodeId id);
    TaskTypeNode& task_ref(NodeId id);
    std::vector<NodeId> topological_order_unlocked() const;

    GraphLimits limits_;
    mutable std::shared_mutex mu_;

    NodeId next_id_ = 1;
    std::int64_t iteration_ = 0;
    bool frozen_ = false;

    std::map<NodeId, SkillNode> skills_;
    std::vector<std::pair<NodeId, NodeId>> prereq_edges_;
    std::map<NodeId, TaskTypeNode> task_types_;
    std::map<NodeId, ExperienceNode> experience_;
    std::map<NodeId, EnvNode> env_;
    std::map<NodeId, BanditState> routing_bandits_;
    std::map<NodeId, BanditState> search_bandits_;

    std::map<SnapshotId, Snapshot> snapshots_;
    SnapshotId next_snapshot_id_ = 1;

    std::vector<Event> log_;
    EventSink sink_;
};

void to_json(nlohmann::json& j, const ExperienceNode& n);
ExperienceNode experience_from_json(const nlohmann::json& j);
void to_json(nlohmann::json& j, const MutableState& s);
MutableState mutable_state_from_json(const nlohmann::json& j);
void to_json(nlohmann::json& j, const ProtectedCounts& c);

}  // namespace coevo
