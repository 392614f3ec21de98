#include "coevo/config.hpp"

#include <set>

#include "coevo/errors.hpp"

namespace coevo {

using nlohmann::json;

namespace {

void require(bool ok, const std::string& msg) {
    if (!ok) throw ValidationError("config: " + msg);
}

void check_arms(const std::vector<std::string>& arms, const char* key) {
    require(!arms.empty(), std::string(key) + " must name at least one arm");
    std::set<std::string> seen;
    for (const auto& a : arms) {
        require(!a.empty(), std::string(key) + " contains an empty arm name");
        require(seen.insert(a).second, std::string(key) + " repeats arm '" + a + "'");
    }
}

}  // namespace

void EngineConfig::validate() const {
    require(alpha > 0.0 && alpha < 1.0, "alpha must lie in (0,1)");
    require(gamma > 0.0 && gamma < 1.0, "gamma must lie in (0,1)");
    require(gamma < alpha, "alpha > gamma violated (alpha=" + std::to_string(alpha) +
                               ", gamma=" + std::to_string(gamma) + ")");
    require(theta >= 0.0 && theta <= 1.0, "theta must lie in [0,1]");
    require(lambda > 0.0, "lambda must be positive");
    require(max_evolve_targets_per_iter >= 1, "max_evolve_targets_per_iter must be >= 1");
    require(memory_retrieval_top_k >= 1, "memory_retrieval_top_k must be >= 1");
    require(type_strategy_min_similarity >= -1.0 && type_strategy_min_similarity <= 1.0,
            "type_strategy_min_similarity must lie in [-1,1]");
    require(memory_refresh_gap >= 1, "memory_refresh_gap must be >= 1");
    require(principles_per_skill_cap >= 1, "principles_per_skill_cap must be >= 1");
    require(skill_growth_cap >= 1, "skill_growth_cap must be >= 1");
    require(per_iter_delta_guard >= 0.0 && per_iter_delta_guard <= 1.0, "per_iter_delta_guard must lie in [0,1]");
    require(catastrophic_rollback_threshold >= per_iter_delta_guard && catastrophic_rollback_threshold <= 1.0,
            "catastrophic_rollback_threshold must lie in [per_iter_delta_guard, 1]");
    require(eval_temperature >= 0.0 && train_temperature >= 0.0, "temperatures must be non-negative");
    require(evaluation_pool_per_iteration >= 1, "evaluation_pool_per_iteration must be >= 1");
    require(number_of_iterations >= 0, "number_of_iterations must be >= 0");
    require(prune_threshold >= 0.0 && prune_threshold <= 1.0, "prune_threshold must lie in [0,1]");
    require(trace_char_cap >= 1, "trace_char_cap must be >= 1");
    require(lattice_depth_cap >= 1, "lattice_depth_cap must be >= 1");
    require(snapshot_limit >= 1, "snapshot_limit must be >= 1");
    require(embedding_dimension >= 1, "embedding_dimension must be >= 1");
    check_arms(routing_arms, "routing_arms");
    check_arms(search_arms, "search_arms");
    require(backend == "simulated" || backend == "http", "backend must be 'simulated' or 'http'");
}

MemoryParams EngineConfig::memory() const {
    MemoryParams p;
    p.top_k = memory_retrieval_top_k;
    p.long_context_threshold = long_context_threshold;
    p.type_strategy_min_similarity = type_strategy_min_similarity;
    p.trace_char_cap = trace_char_cap;
    p.lattice_depth_cap = lattice_depth_cap;
    return p;
}

#define COEVO_CONFIG_FIELDS(X)              \
    X(alpha)                                \
    X(gamma)                                \
    X(theta)                                \
    X(lambda)                               \
    X(max_evolve_targets_per_iter)          \
    X(memory_retrieval_top_k)               \
    X(long_context_threshold)               \
    X(type_strategy_min_similarity)         \
    X(memory_refresh_gap)                   \
    X(principles_per_skill_cap)             \
    X(skill_growth_cap)                     \
    X(search_bandit_warmup_pulls_per_arm)   \
    X(per_iter_delta_guard)                 \
    X(catastrophic_rollback_threshold)      \
    X(eval_temperature)                     \
    X(train_temperature)                    \
    X(evaluation_pool_per_iteration)        \
    X(number_of_iterations)                 \
    X(prune_threshold)                      \
    X(trace_char_cap)                       \
    X(lattice_depth_cap)                    \
    X(snapshot_limit)                       \
    X(embedding_dimension)                  \
    X(routing_arms)                         \
    X(search_arms)                          \
    X(backend)                              \
    X(seed)

json EngineConfig::to_json() const {
    json j = json::object();
#define X(name) j[#name] = name;
    COEVO_CONFIG_FIELDS(X)
#undef X
    return j;
}

EngineConfig EngineConfig::from_json(const json& j) {
    if (!j.is_object()) throw ValidationError("config: expected a JSON object");
    static const std::set<std::string> known{
#define X(name) #name,
        COEVO_CONFIG_FIELDS(X)
#undef X
    };
    for (const auto& [key, _] : j.items())
        if (!known.count(key)) throw ValidationError("config: unknown key '" + key + "'");

    EngineConfig c;
    try {
#define X(name) \
    if (j.contains(#name)) j.at(#name).get_to(c.name);
        COEVO_CONFIG_FIELDS(X)
#undef X
    } catch (const json::exception& e) {
        throw ValidationError(std::string("config: ") + e.what());
    }
    c.validate();
    return c;
}

#undef COEVO_CONFIG_FIELDS

}  // namespace coevo
