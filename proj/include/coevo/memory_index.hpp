#pragma once

#include <functional>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "coevo/embedding.hpp"
#include "coevo/graph.hpp"

namespace coevo {

struct MemoryParams {
    std::size_t top_k = 3;
    std::size_t long_context_threshold = 500;  ///< characters
    double type_strategy_min_similarity = 0.55;
    std::size_t trace_char_cap = 4000;
    std::size_t lattice_depth_cap = 8;
    std::size_t recipe_window = 3;
};

struct Allocation {
    std::size_t n_success = 0;
    std::size_t n_failure = 0;
    bool operator==(const Allocation&) const = default;
};

/// Short contexts get a success-heavy split, long ones a failure-heavy split.
/// For K = 3 that is (2,1) below the threshold and (1,2) at or above it.
Allocation allocate(std::size_t context_length, std::size_t k, std::size_t long_context_threshold);

struct RetrievedMemory {
    double similarity = 0.0;
    ExperienceNode node;
    std::string task_type_name;
    std::string skill_name;
};

struct MemoryBundle {
    std::vector<RetrievedMemory> success;
    std::vector<RetrievedMemory> failure;
    Allocation allocation;  ///< before backfill

    std::size_t size() const noexcept { return success.size() + failure.size(); }
    bool empty() const noexcept { return size() == 0; }
    std::vector<NodeId> ids() const;
};

struct SuccessHarvest {
    std::string question;
    std::string trace;
    std::string answer;
    std::vector<std::pair<std::string, std::string>> decomposition;
    NodeId task_type = 0;
    std::optional<NodeId> skill;
    std::int64_t iter = 0;
};

/// Two parallel cosine stores over the experience subgraph: one for
/// harvested success memories, one for authored failure memories.
class MemoryIndex {
public:
    MemoryIndex(std::size_t dimension, MemoryParams params = {});

    const MemoryParams& params() const noexcept { return params_; }
    const EmbeddingIndex& success_store() const noexcept { return success_; }
    const EmbeddingIndex& failure_store() const noexcept { return failure_; }

    /// Routes a success or failure memory to its store. Other outcomes are
    /// rejected: principles, recipes and patterns are not exemplars.
    void index_memory(const KnowledgeGraph& g, NodeId node, NodeId task_type, const Vector& v);

    /// Task-filtered top-K bundle with the format-conditional split.
    /// Type-strategy failures below the similarity floor are never admitted;
    /// a store that cannot fill its share cedes the slots to the other store.
    MemoryBundle retrieve_bundle(const KnowledgeGraph& g, const Vector& query, NodeId task_type,
                                 std::size_t context_length, std::size_t k) const;

    /// Appends a protected success memory (trace truncated to the cap) and
    /// indexes it under its task type.
    NodeId harvest_success(KnowledgeGraph& g, Embedder& embedder, const SuccessHarvest& h);

    /// Indexes a failure memory that was already appended to the graph.
    void index_failure(const KnowledgeGraph& g, Embedder& embedder, NodeId node);

    /// Re-embeds every success and failure memory in the graph. Called on load
    /// and on the periodic refresh.
    void rebuild(const KnowledgeGraph& g, Embedder& embedder);

    /// The text a memory is embedded under.
    static std::string embedding_text(const ExperienceNode& n);

private:
    MemoryParams params_;
    EmbeddingIndex success_;
    EmbeddingIndex failure_;
};

/// Truncates to at most `cap` bytes without splitting a UTF-8 sequence.
std::string truncate_chars(std::string_view s, std::size_t cap);

// -- prompt rendering ----------------------------------------------------------

/// Renders the bundle followed by the question:
///
///     [SUCCESS 1] Q: <question>
///     Reasoning: <trace>
///     A: <answer>
///     <blank line>
///     [CORRECTION 1] conditions: task_type=<t>, skill=<s>, kind=<kind>
///     correction: <corrective reasoning>
///     <blank line>
///     [SKILL LATTICE]            (only when `lattice` is non-empty)
///     <lattice lines>
///     <blank line>
///     [QUESTION]
///     <question>
///     Context: <context>         (only when `context` is non-empty)
///
/// Every line ends with '\n'. Success blocks always precede corrections.
std::string format_bundle(const MemoryBundle& bundle, std::string_view question, std::string_view context,
                          std::string_view lattice = {});

// -- cascade retrieval ---------------------------------------------------------

/// Principles referenced by the skill and all its transitive prerequisites,
/// prerequisites first, each principle once.
std::vector<ExperienceNode> cascade_principles(const KnowledgeGraph& g, NodeId skill);

/// Stores the last `recipe_window` actions before a successful achievement.
NodeId record_action_recipe(KnowledgeGraph& g, NodeId skill, std::span<const std::string> trailing_actions,
                            std::size_t window = 3);

/// Most recent action recipe for the skill; empty when none exists.
std::vector<std::string> action_recipe_for(const KnowledgeGraph& g, NodeId skill);

/// Resolver skill of the task type plus its prerequisite DAG, one line per
/// skill, prerequisites first, indented by depth. Empty if unresolved.
std::string render_skill_lattice(const KnowledgeGraph& g, NodeId task_type, std::size_t depth_cap = 8);

/// When the requested skill is already mastered, redirects to the frontier
/// skill with the lowest mastery (ties by id).
NodeId curriculum_override(const KnowledgeGraph& g, NodeId requested, double theta);

// -- retrieval error -----------------------------------------------------------

/// Accuracy model for one query. Either `set_accuracy` (brute force over all
/// K-subsets) or a class model for the exact closed form:
///
///  - `matches` + `by_match_count`: accuracy depends only on how many chosen
///    memories match the query;
///  - `class_of` + `by_class_counts`: accuracy depends only on how many chosen
///    memories fall in each of `classes` classes.
///
/// In both cases accuracy must be non-decreasing in every count except
/// class 0, which is reserved for memories that do not help.
struct AccuracyOracle {
    std::function<double(std::span<const NodeId>)> set_accuracy;
    std::function<bool(NodeId)> matches;
    std::function<double(std::size_t)> by_match_count;
    std::size_t classes = 0;
    std::function<std::size_t(NodeId)> class_of;
    std::function<double(std::span<const std::size_t>)> by_class_counts;
};

struct ErrorQuery {
    Vector vector;
    NodeId task_type = 0;
    std::size_t context_length = 0;
    AccuracyOracle oracle;
};

struct RetrievalError {
    double max = 0.0;
    double mean = 0.0;
    std::vector<double> per_query;
};

enum class OracleRoute { automatic, brute_force, closed_form };

/// Total variation between uniform distributions over two id sets.
double uniform_tv(std::span<const NodeId> a, std::span<const NodeId> b);

/// For each query: the oracle-optimal K-subset of task-matched memories
/// (closest to the retriever's when several are optimal) against the
/// embedding retriever's bundle, as total variation of uniform selections.
RetrievalError measure_retrieval_error(const MemoryIndex& index, const KnowledgeGraph& g,
                                       std::span<const ErrorQuery> queries, std::size_t k,
                                       OracleRoute route = OracleRoute::automatic);

}  // namespace coevo
