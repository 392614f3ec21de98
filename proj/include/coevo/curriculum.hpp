#pragma once

#include <cstdint>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "coevo/graph.hpp"

namespace coevo {

struct SelectorParams {
    double lambda = 0.3;  ///< recency weight, > 0
    std::size_t max_targets = 3;  ///< M, >= 1

    void validate() const;
};

struct RatchetParams {
    double alpha = 0.6;  ///< increase rate
    double gamma = 0.1;  ///< decay rate, 0 < gamma < alpha < 1
    double theta = 0.5;  ///< mastery threshold

    void validate() const;
};

/// One candidate for EVOLVE targeting. `k_last` is -1 for never-selected types.
struct TaskStat {
    std::string task_type_id;
    std::uint64_t n_fail = 0;
    std::int64_t k_last = -1;
};

/// s(t) = n_fail(t) + lambda * (k - k_last(t)).
double round_robin_score(const TaskStat& t, std::int64_t k, double lambda) noexcept;

/// Top-M task types by round-robin score. Ties go to the larger recency gap,
/// then to the lexicographically smaller id. The caller records k_last = k for
/// the returned types.
std::vector<std::string> round_robin_select(std::span<const TaskStat> task_stats, std::int64_t k,
                                            const SelectorParams& params);

/// ceil(n_max / lambda + N / M): the longest an observed task type can wait
/// between selections.
std::int64_t coverage_gap_bound(std::size_t observed_types, std::uint64_t n_max, const SelectorParams& params);

/// Asymmetric EMA: fast rise towards evidence at or above the current
/// mastery, slow decay towards evidence below it.
double mastery_update(double m_prev, double evidence, const RatchetParams& params);

/// Mastery value plus prerequisite list for one skill.
struct SkillView {
    NodeId id = 0;
    double mastery = 0.0;
    std::vector<NodeId> prerequisites;
};

/// Skills below threshold whose prerequisites are all at or above it.
/// Throws CycleError on cyclic input.
std::set<NodeId> learnable_frontier(std::span<const SkillView> skills, double theta);
std::set<NodeId> learnable_frontier(const KnowledgeGraph& g, double theta);

// -- structural checks over recorded traces ------------------------------------

/// Per-step bounds of the ratchet: m_k >= (1-gamma) m_{k-1} and
/// m_k <= m_{k-1} + alpha (1 - m_{k-1}). Returns the first violating index.
std::optional<std::size_t> check_ratchet_steps(std::span<const double> trace, const RatchetParams& params,
                                               double tol = 1e-12);

/// Decay bound against every earlier value: m_k >= (1-gamma)^(k-k') m_{k'}.
std::optional<std::size_t> check_ratchet_decay_from_peaks(std::span<const double> trace, const RatchetParams& params,
                                                          double tol = 1e-12);

/// The window form m_k >= (1-gamma)^j max_{k' <= k-j} m_{k'} taken literally,
/// for every k and j. Stronger than what the ratchet guarantees; kept so the
/// acceptance suite can report how often it fails.
std::optional<std::pair<std::size_t, std::size_t>> check_ratchet_window_literal(std::span<const double> trace,
                                                                                const RatchetParams& params,
                                                                                double tol = 1e-12);

}  // namespace coevo
