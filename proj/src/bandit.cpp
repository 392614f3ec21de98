#include "coevo/bandit.hpp"

#include <algorithm>
#include <random>

#include <nlohmann/json.hpp>

#include "coevo/errors.hpp"
#include "coevo/hash.hpp"

namespace coevo {

namespace {

double sample_beta(double a, double b, std::mt19937_64& rng) {
    std::gamma_distribution<double> ga(a, 1.0);
    std::gamma_distribution<double> gb(b, 1.0);
    const double x = ga(rng);
    const double y = gb(rng);
    return x / (x + y);
}

}  // namespace

std::uint64_t BanditState::total_pulls() const noexcept {
    std::uint64_t n = 0;
    for (const auto& a : arms) n += a.pulls;
    return n;
}

BanditState make_bandit(std::string context_id, const std::vector<std::string>& arm_names,
                        std::uint32_t warmup_per_arm, std::uint64_t rng_seed) {
    BanditState s;
    s.context_id = std::move(context_id);
    s.warmup_per_arm = warmup_per_arm;
    s.rng_seed = rng_seed;
    for (const auto& n : arm_names) s.arms.push_back(ArmStats{n, 0, 0, 0});
    return s;
}

bool in_warmup(const BanditState& state) noexcept {
    return std::any_of(state.arms.begin(), state.arms.end(),
                       [&](const ArmStats& a) { return a.pulls < state.warmup_per_arm; });
}

const std::string& select_arm(const BanditState& state, std::uint64_t salt) {
    if (state.arms.empty()) throw ValidationError("select_arm: bandit '" + state.context_id + "' has no arms");

    if (in_warmup(state)) {
        std::size_t best = 0;
        for (std::size_t i = 1; i < state.arms.size(); ++i)
            if (state.arms[i].pulls < state.arms[best].pulls) best = i;
        return state.arms[best].arm_id;
    }

    std::mt19937_64 rng(mix_seed({state.rng_seed, state.total_pulls(), salt}));
    std::size_t best = 0;
    double best_theta = -1.0;
    for (std::size_t i = 0; i < state.arms.size(); ++i) {
        const auto& a = state.arms[i];
        const double theta = sample_beta(1.0 + static_cast<double>(a.successes),
                                         1.0 + static_cast<double>(a.failures), rng);
        if (theta > best_theta) {
            best_theta = theta;
            best = i;
        }
    }
    return state.arms[best].arm_id;
}

void update_arm(BanditState& state, const std::string& arm_id, int reward) {
    if (reward != 0 && reward != 1)
        throw ValidationError("update_arm: reward must be 0 or 1, got " + std::to_string(reward));
    auto it = std::find_if(state.arms.begin(), state.arms.end(),
                           [&](const ArmStats& a) { return a.arm_id == arm_id; });
    if (it == state.arms.end())
        throw NotFoundError("update_arm: unknown arm '" + arm_id + "' in bandit '" + state.context_id + "'");
    if (reward == 1)
        ++it->successes;
    else
        ++it->failures;
    ++it->pulls;
}

void to_json(nlohmann::json& j, const ArmStats& a) {
    j = {{"arm", a.arm_id}, {"successes", a.successes}, {"failures", a.failures}, {"pulls", a.pulls}};
}

void from_json(const nlohmann::json& j, ArmStats& a) {
    j.at("arm").get_to(a.arm_id);
    j.at("successes").get_to(a.successes);
    j.at("failures").get_to(a.failures);
    j.at("pulls").get_to(a.pulls);
}

void to_json(nlohmann::json& j, const BanditState& b) {
    j = {{"context", b.context_id}, {"arms", b.arms}, {"warmup_per_arm", b.warmup_per_arm}, {"rng_seed", b.rng_seed}};
}

void from_json(const nlohmann::json& j, BanditState& b) {
    j.at("context").get_to(b.context_id);
    j.at("arms").get_to(b.arms);
    j.at("warmup_per_arm").get_to(b.warmup_per_arm);
    j.at("rng_seed").get_to(b.rng_seed);
}

}  // namespace coevo
