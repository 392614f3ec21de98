#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <random>

#include "coevo/curriculum.hpp"
#include "coevo/errors.hpp"

using namespace coevo;

TEST_CASE("round_robin_select") {
    const SelectorParams p{0.3, 1};
    SUBCASE("single task type") {
        const std::vector<TaskStat> ts{{"only", 4, 2}};
        CHECK(round_robin_select(ts, 5, p) == std::vector<std::string>{"only"});
    }
    SUBCASE("recency beats a larger failure count") {
        const std::int64_t k = 30;
        const std::vector<TaskStat> ts{{"A", 5, k}, {"B", 0, k - 20}};
        CHECK(round_robin_score(ts[0], k, 0.3) == doctest::Approx(5.0));
        CHECK(round_robin_score(ts[1], k, 0.3) == doctest::Approx(6.0));
        CHECK(round_robin_select(ts, k, p) == std::vector<std::string>{"B"});
    }
    SUBCASE("defaults return at most three") {
        std::vector<TaskStat> ts;
        for (int i = 0; i < 7; ++i) ts.push_back({"t" + std::to_string(i), static_cast<std::uint64_t>(i), -1});
        const auto sel = round_robin_select(ts, 0, SelectorParams{});
        CHECK(sel.size() == 3);
        CHECK(sel == std::vector<std::string>{"t6", "t5", "t4"});
    }
    SUBCASE("empty input") {
        CHECK(round_robin_select({}, 0, p).empty());
    }
    SUBCASE("equal scores go to the longer wait, then the smaller id") {
        // s(a) = 3 + 0.5*2 = 4, s(b) = 2 + 0.5*4 = 4, s(c) = 2 + 0.5*4 = 4
        const std::vector<TaskStat> ts{{"a", 3, 8}, {"c", 2, 6}, {"b", 2, 6}};
        CHECK(round_robin_select(ts, 10, SelectorParams{0.5, 3}) == std::vector<std::string>{"b", "c", "a"});
    }
    SUBCASE("never-selected types get recency k+1") {
        CHECK(round_robin_score(TaskStat{"x", 0, -1}, 9, 1.0) == doctest::Approx(10.0));
    }
    SUBCASE("deterministic") {
        const std::vector<TaskStat> ts{{"x", 3, 1}, {"y", 3, 1}, {"z", 1, -1}};
        CHECK(round_robin_select(ts, 4, SelectorParams{0.3, 2}) == round_robin_select(ts, 4, SelectorParams{0.3, 2}));
    }
}

TEST_CASE("selector parameter validation") {
    CHECK_THROWS_AS((SelectorParams{0.0, 3}.validate()), ValidationError);
    CHECK_THROWS_AS((SelectorParams{0.3, 0}.validate()), ValidationError);
    CHECK_NOTHROW(SelectorParams{}.validate());
    CHECK_THROWS_AS((RatchetParams{0.1, 0.6, 0.5}.validate()), ValidationError);
    CHECK_NOTHROW(RatchetParams{}.validate());
}

TEST_CASE("coverage_gap_bound") {
    CHECK(coverage_gap_bound(1, 0, SelectorParams{0.3, 1}) == 1);
    CHECK(coverage_gap_bound(1, 0, SelectorParams{1.0, 1}) == 1);
    CHECK(coverage_gap_bound(27, 3, SelectorParams{0.3, 3}) == 19);
    // ceil(7/0.1 + 8/3) = ceil(72.67) = 73
    CHECK(coverage_gap_bound(8, 7, SelectorParams{0.1, 3}) == 73);
}

TEST_CASE("mastery_update") {
    const RatchetParams p{0.6, 0.1, 0.5};
    CHECK(mastery_update(0.5, 0.5, p) == 0.5);
    CHECK(std::abs(mastery_update(0.5, 1.0, p) - 0.8) <= 1e-15);
    CHECK(std::abs(mastery_update(0.8, 0.0, p) - 0.72) <= 1e-15);
    CHECK_THROWS_AS(mastery_update(1.2, 0.5, p), ValidationError);
    CHECK_THROWS_AS(mastery_update(0.5, -0.1, p), ValidationError);
    CHECK_THROWS_AS(mastery_update(std::nan(""), 0.5, p), ValidationError);
}

TEST_CASE("learnable_frontier") {
    SUBCASE("isolated skill") {
        const std::vector<SkillView> s{{1, 0.0, {}}};
        CHECK(learnable_frontier(s, 0.5) == std::set<NodeId>{1});
    }
    SUBCASE("mastered skill is excluded") {
        const std::vector<SkillView> s{{1, 0.9, {}}, {2, 0.9, {1}}};
        CHECK(learnable_frontier(s, 0.5).empty());
    }
    SUBCASE("four-node DAG") {
        // A=1 (0.6) -> B=2 (0.2); A -> C=3; D=4 (0.3) -> C.
        const std::vector<SkillView> s{{1, 0.6, {}}, {2, 0.2, {1}}, {3, 0.1, {1, 4}}, {4, 0.3, {}}};
        const auto f = learnable_frontier(s, 0.5);
        CHECK(f.count(2) == 1);
        CHECK(f.count(3) == 0);
        CHECK(f == std::set<NodeId>{2, 4});
    }
    SUBCASE("cyclic input") {
        const std::vector<SkillView> s{{1, 0.0, {2}}, {2, 0.0, {1}}};
        CHECK_THROWS_AS(learnable_frontier(s, 0.5), CycleError);
    }
    SUBCASE("from a graph") {
        KnowledgeGraph g;
        const auto a = g.add_skill("a", 0.7), b = g.add_skill("b", 0.1), c = g.add_skill("c", 0.1);
        g.add_prerequisite(a, b);
        g.add_prerequisite(b, c);
        CHECK(learnable_frontier(g, 0.5) == std::set<NodeId>{b});
    }
}

TEST_CASE("learnable_frontier matches the definition on random DAGs") {
    std::mt19937_64 rng(99);
    std::uniform_real_distribution<> u(0, 1);
    for (int trial = 0; trial < 300; ++trial) {
        const int n = 1 + static_cast<int>(rng() % 9);
        std::vector<SkillView> s;
        for (int i = 0; i < n; ++i) {
            SkillView v{static_cast<NodeId>(i + 1), u(rng), {}};
            for (int j = 0; j < i; ++j)
                if (rng() % 3 == 0) v.prerequisites.push_back(static_cast<NodeId>(j + 1));
            s.push_back(v);
        }
        std::set<NodeId> expected;
        for (const auto& v : s) {
            bool ok = v.mastery < 0.5;
            for (auto p : v.prerequisites) ok = ok && s[p - 1].mastery >= 0.5;
            if (ok) expected.insert(v.id);
        }
        CHECK(learnable_frontier(s, 0.5) == expected);
    }
}

TEST_CASE("ratchet trace checks") {
    const RatchetParams p{0.6, 0.1, 0.5};
    std::vector<double> trace{0.0};
    std::mt19937_64 rng(5);
    std::uniform_real_distribution<> u(0, 1);
    for (int i = 0; i < 300; ++i) trace.push_back(mastery_update(trace.back(), u(rng), p));
    CHECK_FALSE(check_ratchet_steps(trace, p).has_value());
    CHECK_FALSE(check_ratchet_decay_from_peaks(trace, p).has_value());

    SUBCASE("a drop faster than gamma is caught") {
        const std::vector<double> bad{0.8, 0.5};
        CHECK(check_ratchet_steps(bad, p) == std::optional<std::size_t>{1});
    }
    SUBCASE("a jump faster than alpha is caught") {
        const std::vector<double> bad{0.0, 0.7};
        CHECK(check_ratchet_steps(bad, p) == std::optional<std::size_t>{1});
    }
    SUBCASE("the literal window form fails on steady decay") {
        std::vector<double> decay{1.0};
        for (int i = 0; i < 10; ++i) decay.push_back(mastery_update(decay.back(), 0.0, p));
        CHECK_FALSE(check_ratchet_decay_from_peaks(decay, p).has_value());
        CHECK(check_ratchet_window_literal(decay, p).has_value());
    }
}
