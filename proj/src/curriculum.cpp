#include "coevo/curriculum.hpp"

#include <algorithm>
#include <cmath>
#include <map>

#include "coevo/errors.hpp"

namespace coevo {

namespace {

// Scores are sums of an integer and lambda multiples; anything closer than
// this is a tie.
constexpr double kScoreTieTol = 1e-9;

}  // namespace

void SelectorParams::validate() const {
    if (!(lambda > 0.0) || !std::isfinite(lambda)) throw ValidationError("selector lambda must be > 0");
    if (max_targets < 1) throw ValidationError("selector M must be >= 1");
}

void RatchetParams::validate() const {
    if (!(alpha > 0.0 && alpha < 1.0)) throw ValidationError("ratchet alpha must lie in (0,1)");
    if (!(gamma > 0.0 && gamma < 1.0)) throw ValidationError("ratchet gamma must lie in (0,1)");
    if (!(gamma < alpha)) throw ValidationError("ratchet requires alpha > gamma (asymmetric EMA constraint)");
    if (!(theta >= 0.0 && theta <= 1.0)) throw ValidationError("mastery threshold theta must lie in [0,1]");
}

double round_robin_score(const TaskStat& t, std::int64_t k, double lambda) noexcept {
    return static_cast<double>(t.n_fail) + lambda * static_cast<double>(k - t.k_last);
}

std::vector<std::string> round_robin_select(std::span<const TaskStat> task_stats, std::int64_t k,
                                            const SelectorParams& params) {
    params.validate();
    for (const auto& t : task_stats)
        if (t.k_last > k)
            throw ValidationError("round_robin_select: k_last of '" + t.task_type_id + "' exceeds iteration");

    std::vector<const TaskStat*> order;
    order.reserve(task_stats.size());
    for (const auto& t : task_stats) order.push_back(&t);

    std::sort(order.begin(), order.end(), [&](const TaskStat* a, const TaskStat* b) {
        const double sa = round_robin_score(*a, k, params.lambda);
        const double sb = round_robin_score(*b, k, params.lambda);
        if (std::abs(sa - sb) > kScoreTieTol) return sa > sb;
        if (a->k_last != b->k_last) return a->k_last < b->k_last;
        return a->task_type_id < b->task_type_id;
    });

    std::vector<std::string> out;
    for (std::size_t i = 0; i < order.size() && i < params.max_targets; ++i) out.push_back(order[i]->task_type_id);
    return out;
}

std::int64_t coverage_gap_bound(std::size_t observed_types, std::uint64_t n_max, const SelectorParams& params) {
    params.validate();
    if (observed_types < 1) throw ValidationError("coverage_gap_bound: need at least one observed task type");
    const double x = static_cast<double>(n_max) / params.lambda +
                     static_cast<double>(observed_types) / static_cast<double>(params.max_targets);
    // 3 / 0.3 evaluates to 10.000000000000002; do not let that round up.
    return static_cast<std::int64_t>(std::ceil(x - 1e-9));
}

double mastery_update(double m_prev, double evidence, const RatchetParams& params) {
    if (!(m_prev >= 0.0 && m_prev <= 1.0)) throw ValidationError("mastery_update: previous mastery outside [0,1]");
    if (!(evidence >= 0.0 && evidence <= 1.0)) throw ValidationError("mastery_update: evidence outside [0,1]");
    double m = evidence >= m_prev ? params.alpha * evidence + (1.0 - params.alpha) * m_prev
                                  : m_prev - params.gamma * (m_prev - evidence);
    return std::clamp(m, 0.0, 1.0);
}

std::set<NodeId> learnable_frontier(std::span<const SkillView> skills, double theta) {
    std::map<NodeId, const SkillView*> by_id;
    for (const auto& s : skills) by_id[s.id] = &s;

    // Kahn pass only to reject cyclic input.
    std::map<NodeId, int> indeg;
    for (const auto& s : skills) indeg.try_emplace(s.id, 0);
    for (const auto& s : skills)
        for (NodeId p : s.prerequisites) {
            if (!by_id.count(p)) throw NotFoundError("learnable_frontier: unknown prerequisite " + std::to_string(p));
            ++indeg[s.id];
        }
    std::vector<NodeId> ready;
    for (const auto& [id, d] : indeg)
        if (d == 0) ready.push_back(id);
    std::size_t seen = 0;
    while (!ready.empty()) {
        const NodeId cur = ready.back();
        ready.pop_back();
        ++seen;
        for (const auto& s : skills)
            for (NodeId p : s.prerequisites)
                if (p == cur && --indeg[s.id] == 0) ready.push_back(s.id);
    }
    if (seen != indeg.size()) throw CycleError("learnable_frontier: skill graph contains a cycle");

    std::set<NodeId> frontier;
    for (const auto& s : skills) {
        if (s.mastery >= theta) continue;
        const bool ready_to_learn = std::all_of(s.prerequisites.begin(), s.prerequisites.end(),
                                                [&](NodeId p) { return by_id.at(p)->mastery >= theta; });
        if (ready_to_learn) frontier.insert(s.id);
    }
    return frontier;
}

std::set<NodeId> learnable_frontier(const KnowledgeGraph& g, double theta) {
    std::vector<SkillView> views;
    for (const auto& s : g.skills()) views.push_back(SkillView{s.id, s.mastery, {}});
    for (const auto& [from, to] : g.prerequisites())
        for (auto& v : views)
            if (v.id == to) v.prerequisites.push_back(from);
    return learnable_frontier(views, theta);
}

std::optional<std::size_t> check_ratchet_steps(std::span<const double> trace, const RatchetParams& params,
                                               double tol) {
    for (std::size_t k = 1; k < trace.size(); ++k) {
        const double prev = trace[k - 1];
        const double cur = trace[k];
        if (cur < (1.0 - params.gamma) * prev - tol) return k;
        if (cur > prev + params.alpha * (1.0 - prev) + tol) return k;
    }
    return std::nullopt;
}

std::optional<std::size_t> check_ratchet_decay_from_peaks(std::span<const double> trace, const RatchetParams& params,
                                                          double tol) {
    // m_k >= (1-g)^(k-k') m_k' for all k' <= k  <=>  m_k >= max_k' (1-g)^(k-k') m_k'.
    // The right-hand side obeys best_k = max(m_k, (1-g) best_{k-1}).
    double best = 0.0;
    for (std::size_t k = 0; k < trace.size(); ++k) {
        const double decayed = (1.0 - params.gamma) * best;
        if (k > 0 && trace[k] < decayed - tol) return k;
        best = std::max(trace[k], decayed);
    }
    return std::nullopt;
}

std::optional<std::pair<std::size_t, std::size_t>> check_ratchet_window_literal(std::span<const double> trace,
                                                                                const RatchetParams& params,
                                                                                double tol) {
    // (1-g)^j max_{k' <= k-j} m_k' is non-increasing in j, so j = 1 is the
    // binding window for every k.
    double prefix_max = trace.empty() ? 0.0 : trace[0];
    for (std::size_t k = 1; k < trace.size(); ++k) {
        if (trace[k] < (1.0 - params.gamma) * prefix_max - tol) return std::pair<std::size_t, std::size_t>{k, 1};
        prefix_max = std::max(prefix_max, trace[k]);
    }
    return std::nullopt;
}

}  // namespace coevo
