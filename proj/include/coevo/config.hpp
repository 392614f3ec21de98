#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "coevo/curriculum.hpp"
#include "coevo/graph.hpp"
#include "coevo/memory_index.hpp"

namespace coevo {

/// Run configuration. The on-disk form is one flat JSON object whose keys are
/// the snake_case names below; unknown keys are rejected.
struct EngineConfig {
    double alpha = 0.6;                            // mastery EMA increase rate
    double gamma = 0.1;                            // mastery decay rate
    double theta = 0.5;                            // mastery threshold
    double lambda = 0.3;                           // round-robin recency weight
    std::size_t max_evolve_targets_per_iter = 3;   // M
    std::size_t memory_retrieval_top_k = 3;        // K
    std::size_t long_context_threshold = 500;      // chars
    double type_strategy_min_similarity = 0.55;
    std::int64_t memory_refresh_gap = 5;           // iterations
    std::size_t principles_per_skill_cap = 12;
    std::size_t skill_growth_cap = 30;
    std::uint32_t search_bandit_warmup_pulls_per_arm = 20;
    double per_iter_delta_guard = 0.03;
    double catastrophic_rollback_threshold = 0.05;
    double eval_temperature = 0.0;
    double train_temperature = 0.3;
    std::size_t evaluation_pool_per_iteration = 200;
    std::int64_t number_of_iterations = 20;

    double prune_threshold = 0.3;
    std::size_t trace_char_cap = 4000;
    std::size_t lattice_depth_cap = 8;
    std::size_t snapshot_limit = 64;
    std::size_t embedding_dimension = 64;
    std::vector<std::string> routing_arms{"direct", "chain", "decompose"};
    std::vector<std::string> search_arms{"base", "cascade"};
    /// "simulated" or "http".
    std::string backend = "simulated";
    std::uint64_t seed = 42;

    /// Throws ValidationError naming the offending key.
    void validate() const;

    SelectorParams selector() const { return {lambda, max_evolve_targets_per_iter}; }
    RatchetParams ratchet() const { return {alpha, gamma, theta}; }
    MemoryParams memory() const;
    GraphLimits limits() const { return {principles_per_skill_cap, skill_growth_cap, snapshot_limit}; }

    nlohmann::json to_json() const;
    /// Missing keys keep their defaults (a missing seed means 42).
    static EngineConfig from_json(const nlohmann::json& j);
};

}  // namespace coevo
