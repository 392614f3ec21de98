#include <doctest.h>

#include <random>

#include <nlohmann/json.hpp>

#include "coevo/bandit.hpp"
#include "coevo/errors.hpp"

using namespace coevo;

namespace {

BanditState with_counts(std::vector<std::pair<std::uint64_t, std::uint64_t>> sf, std::uint32_t warmup, std::uint64_t seed) {
    BanditState b;
    b.context_id = "ctx";
    b.warmup_per_arm = warmup;
    b.rng_seed = seed;
    for (std::size_t i = 0; i < sf.size(); ++i)
        b.arms.push_back({"arm" + std::to_string(i + 1), sf[i].first, sf[i].second, sf[i].first + sf[i].second});
    return b;
}

}  // namespace

TEST_CASE("select_arm during warm-up") {
    SUBCASE("least-pulled arm below quota") {
        const auto b = with_counts({{10, 10}, {2, 3}}, 20, 1);
        CHECK(select_arm(b) == "arm2");
    }
    SUBCASE("single arm") {
        const auto b = make_bandit("c", {"only"}, 20, 3);
        CHECK(select_arm(b) == "only");
        const auto post = with_counts({{40, 2}}, 20, 3);
        CHECK(select_arm(post) == "arm1");
    }
    SUBCASE("ties go to the lower index") {
        const auto b = make_bandit("c", {"x", "y", "z"}, 20, 3);
        CHECK(select_arm(b) == "x");
    }
    SUBCASE("no arms") {
        BanditState b;
        CHECK_THROWS_AS(select_arm(b), ValidationError);
    }
}

TEST_CASE("warm-up is strict round robin and complete") {
    std::mt19937_64 rng(11);
    auto b = make_bandit("c", {"a", "b", "c"}, 20, 77);
    for (int i = 0; i < 60; ++i) {
        CHECK(in_warmup(b));
        const std::string arm = select_arm(b, static_cast<std::uint64_t>(i));
        CHECK(arm == std::string(1, static_cast<char>('a' + i % 3)));
        update_arm(b, arm, static_cast<int>(rng() % 2));
    }
    CHECK_FALSE(in_warmup(b));
    for (const auto& a : b.arms) CHECK(a.pulls == 20);
}

TEST_CASE("Thompson draws favour the dominant arm") {
    auto b = with_counts({{100, 1}, {1, 100}}, 20, 0);
    int first = 0;
    for (std::uint64_t seed = 0; seed < 10000; ++seed) {
        b.rng_seed = seed;
        if (select_arm(b) == "arm1") ++first;
    }
    CHECK(first >= 9900);
}

TEST_CASE("select_arm is a pure function of state and salt") {
    const auto b = with_counts({{30, 20}, {25, 25}, {20, 30}}, 20, 5);
    for (std::uint64_t salt = 0; salt < 50; ++salt) CHECK(select_arm(b, salt) == select_arm(b, salt));
}

TEST_CASE("update_arm") {
    SUBCASE("fresh arm, reward 1") {
        auto b = make_bandit("c", {"a"}, 20, 0);
        update_arm(b, "a", 1);
        CHECK(b.arms[0] == ArmStats{"a", 1, 0, 1});
    }
    SUBCASE("reward 0 adds a failure") {
        auto b = with_counts({{3, 2}}, 20, 0);
        update_arm(b, "arm1", 0);
        CHECK(b.arms[0].successes == 3);
        CHECK(b.arms[0].failures == 3);
        CHECK(b.arms[0].pulls == 6);
    }
    SUBCASE("invalid rewards and arms") {
        auto b = with_counts({{3, 2}}, 20, 0);
        CHECK_THROWS_AS(update_arm(b, "arm1", 2), ValidationError);
        CHECK_THROWS_AS(update_arm(b, "arm1", -1), ValidationError);
        CHECK_THROWS_AS(update_arm(b, "nope", 1), NotFoundError);
        CHECK(b.arms[0].pulls == 5);
    }
}

TEST_CASE("bandit state serializes losslessly") {
    auto b = with_counts({{3, 2}, {0, 7}}, 20, 0xdeadbeefcafeULL);
    nlohmann::json j = b;
    CHECK(j.get<BanditState>() == b);
}

TEST_CASE("best-arm share on a 3-arm Bernoulli problem") {
    for (std::uint64_t seed = 1; seed <= 3; ++seed) {
        auto b = make_bandit("c", {"good", "mid", "bad"}, 20, seed);
        std::mt19937_64 env(seed * 31);
        std::bernoulli_distribution good(0.8), mid(0.5), bad(0.2);
        std::size_t best = 0, counted = 0;
        for (int t = 0; t < 2000; ++t) {
            const std::string arm = select_arm(b);
            const int r = arm == "good" ? good(env) : arm == "mid" ? mid(env) : bad(env);
            update_arm(b, arm, r);
            if (t >= 60) {
                ++counted;
                best += arm == "good";
            }
        }
        CHECK(static_cast<double>(best) / static_cast<double>(counted) > 0.7);
    }
}
