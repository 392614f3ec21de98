#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

namespace coevo {

struct ArmStats {
    std::string arm_id;
    std::uint64_t successes = 0;
    std::uint64_t failures = 0;
    std::uint64_t pulls = 0;

    bool operator==(const ArmStats&) const = default;
};

/// Beta-Bernoulli Thompson sampling state for one context (a skill or a task
/// type). Arms keep configuration order; that order is the warm-up order.
struct BanditState {
    std::string context_id;
    std::vector<ArmStats> arms;
    std::uint32_t warmup_per_arm = 20;
    std::uint64_t rng_seed = 0;

    bool operator==(const BanditState&) const = default;

    std::uint64_t total_pulls() const noexcept;
};

BanditState make_bandit(std::string context_id, const std::vector<std::string>& arm_names,
                        std::uint32_t warmup_per_arm, std::uint64_t rng_seed);

/// Picks an arm. While any arm is below its warm-up quota the least-pulled one
/// wins (ties to the lower index); afterwards each arm draws
/// theta ~ Beta(1 + successes, 1 + failures) and the argmax wins.
///
/// Draws are a pure function of (rng_seed, total pulls, salt). Callers that
/// select several times before updating pass distinct salts.
const std::string& select_arm(const BanditState& state, std::uint64_t salt = 0);

/// Reward must be 0 or 1.
void update_arm(BanditState& state, const std::string& arm_id, int reward);

bool in_warmup(const BanditState& state) noexcept;

void to_json(nlohmann::json& j, const ArmStats& a);
void from_json(const nlohmann::json& j, ArmStats& a);
void to_json(nlohmann::json& j, const BanditState& b);
void from_json(const nlohmann::json& j, BanditState& b);

}  // namespace coevo
