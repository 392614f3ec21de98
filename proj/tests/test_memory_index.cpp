#include <doctest.h>

#include <cmath>
#include <map>
#include <random>

#include "coevo/embedding.hpp"
#include "coevo/errors.hpp"
#include "coevo/memory_index.hpp"

using namespace coevo;

namespace {

Vector vec(std::initializer_list<double> xs) {
    Vector v(static_cast<Eigen::Index>(xs.size()));
    Eigen::Index i = 0;
    for (double x : xs) v[i++] = x;
    return v;
}

/// Unit vector at `sim` cosine from e1, in the (e1, e2) plane.
Vector at_similarity(double sim, std::size_t dim = 4) {
    Vector v = Vector::Zero(static_cast<Eigen::Index>(dim));
    v[0] = sim;
    v[1] = std::sqrt(1.0 - sim * sim);
    return v;
}

struct Fixture {
    KnowledgeGraph g;
    NodeId skill = g.add_skill("arith");
    NodeId tt_a = g.add_task_type("A", skill);
    NodeId tt_b = g.add_task_type("B", skill);
    MemoryIndex index{4};

    NodeId success(NodeId tt, const std::string& q, const Vector& v) {
        ExperienceNode n;
        n.outcome = Outcome::success_memory;
        n.task_type_id = tt;
        n.skill_id = skill;
        n.payload = SuccessPayload{q, "because " + q, "42", {}};
        const auto id = g.append_experience(n);
        index.index_memory(g, id, tt, v);
        return id;
    }
    NodeId failure(NodeId tt, const std::string& q, const Vector& v, FailureKind kind = FailureKind::specific) {
        ExperienceNode n;
        n.outcome = Outcome::failure_memory;
        n.task_type_id = tt;
        n.skill_id = skill;
        n.payload = FailurePayload{q, "41", "carry the one in " + q, "42", kind};
        const auto id = g.append_experience(n);
        index.index_memory(g, id, tt, v);
        return id;
    }
};

}  // namespace

TEST_CASE("allocate") {
    CHECK(allocate(400, 3, 500) == Allocation{2, 1});
    CHECK(allocate(499, 3, 500) == Allocation{2, 1});
    CHECK(allocate(500, 3, 500) == Allocation{1, 2});
    CHECK(allocate(600, 3, 500) == Allocation{1, 2});
    CHECK(allocate(0, 1, 500) == Allocation{1, 0});
    CHECK(allocate(0, 4, 500) == Allocation{3, 1});
}

TEST_CASE("embedding index search") {
    EmbeddingIndex idx(2);
    SUBCASE("self retrieval") {
        idx.add(7, 1, vec({0.3, 0.4}));
        const auto hits = idx.search(vec({0.3, 0.4}), 1);
        REQUIRE(hits.size() == 1);
        CHECK(hits[0].node == 7);
        CHECK(hits[0].similarity == doctest::Approx(1.0).epsilon(1e-12));
    }
    SUBCASE("task filter") {
        idx.add(7, 1, vec({1, 0}));
        CHECK(idx.search(vec({1, 0}), 2).empty());
    }
    SUBCASE("orthogonal entries") {
        idx.add(1, 1, vec({1, 0}));
        idx.add(2, 1, vec({0, 1}));
        const auto hits = idx.search(vec({1, 0}), 1);
        REQUIRE(hits.size() == 2);
        CHECK(hits[0] == SearchHit{1, 1.0});
        CHECK(hits[1].node == 2);
        CHECK(hits[1].similarity == doctest::Approx(0.0));
    }
    SUBCASE("ties by ascending id") {
        idx.add(9, 1, vec({1, 0}));
        idx.add(3, 1, vec({2, 0}));
        const auto hits = idx.search(vec({1, 0}), 1);
        CHECK(hits[0].node == 3);
        CHECK(hits[1].node == 9);
    }
    SUBCASE("dimension mismatch") {
        CHECK_THROWS_AS(idx.add(1, 1, vec({1, 0, 0})), ValidationError);
    }
    SUBCASE("vectors are stored normalized") {
        idx.add(1, 1, vec({3, 4}));
        CHECK(idx.entries()[0].vector.norm() == doctest::Approx(1.0));
    }
}

TEST_CASE("index_memory routes by outcome and rejects non-exemplars") {
    Fixture f;
    const auto s = f.success(f.tt_a, "q1", at_similarity(1.0));
    const auto fl = f.failure(f.tt_a, "q2", at_similarity(0.9));
    CHECK(f.index.success_store().size() == 1);
    CHECK(f.index.failure_store().size() == 1);
    CHECK(f.index.success_store().entries()[0].node == s);
    CHECK(f.index.failure_store().entries()[0].node == fl);

    ExperienceNode p;
    p.outcome = Outcome::abstracted_pattern;
    p.payload = PatternPayload{"x"};
    const auto pid = f.g.append_experience(p);
    CHECK_THROWS_AS(f.index.index_memory(f.g, pid, f.tt_a, at_similarity(1.0)), ValidationError);
    CHECK_THROWS_AS(f.index.index_memory(f.g, s, f.tt_a, Vector::Zero(3)), ValidationError);
}

TEST_CASE("retrieve_bundle") {
    Fixture f;
    const Vector q = at_similarity(1.0);
    SUBCASE("empty stores") {
        const auto b = f.index.retrieve_bundle(f.g, q, f.tt_a, 100, 3);
        CHECK(b.empty());
    }
    SUBCASE("format-conditional split") {
        const auto s1 = f.success(f.tt_a, "s1", at_similarity(0.99));
        const auto s2 = f.success(f.tt_a, "s2", at_similarity(0.95));
        f.success(f.tt_a, "s3", at_similarity(0.90));
        const auto f1 = f.failure(f.tt_a, "f1", at_similarity(0.97));
        const auto f2 = f.failure(f.tt_a, "f2", at_similarity(0.93));
        f.failure(f.tt_a, "f3", at_similarity(0.80));

        const auto short_ctx = f.index.retrieve_bundle(f.g, q, f.tt_a, 400, 3);
        CHECK(short_ctx.allocation == Allocation{2, 1});
        CHECK(short_ctx.ids() == std::vector<NodeId>{s1, s2, f1});

        const auto long_ctx = f.index.retrieve_bundle(f.g, q, f.tt_a, 600, 3);
        CHECK(long_ctx.allocation == Allocation{1, 2});
        CHECK(long_ctx.ids() == std::vector<NodeId>{s1, f1, f2});
    }
    SUBCASE("task-type filter") {
        f.success(f.tt_b, "other", at_similarity(1.0));
        CHECK(f.index.retrieve_bundle(f.g, q, f.tt_a, 10, 3).empty());
    }
    SUBCASE("type-strategy similarity floor") {
        const auto low = f.failure(f.tt_a, "low", at_similarity(0.50), FailureKind::type_strategy);
        auto b = f.index.retrieve_bundle(f.g, q, f.tt_a, 600, 3);
        CHECK(b.empty());
        const auto high = f.failure(f.tt_a, "high", at_similarity(0.60), FailureKind::type_strategy);
        b = f.index.retrieve_bundle(f.g, q, f.tt_a, 600, 3);
        CHECK(b.ids() == std::vector<NodeId>{high});
        // A specific failure at low similarity is still admitted.
        const auto spec = f.failure(f.tt_a, "spec", at_similarity(0.10));
        b = f.index.retrieve_bundle(f.g, q, f.tt_a, 600, 3);
        CHECK(b.ids() == std::vector<NodeId>{high, spec});
        (void)low;
    }
    SUBCASE("backfill from the other store") {
        const auto s1 = f.success(f.tt_a, "s1", at_similarity(0.9));
        const auto s2 = f.success(f.tt_a, "s2", at_similarity(0.8));
        const auto s3 = f.success(f.tt_a, "s3", at_similarity(0.7));
        const auto b = f.index.retrieve_bundle(f.g, q, f.tt_a, 600, 3);
        CHECK(b.allocation == Allocation{1, 2});
        CHECK(b.ids() == std::vector<NodeId>{s1, s2, s3});
    }
    SUBCASE("K must be positive") {
        CHECK_THROWS_AS(f.index.retrieve_bundle(f.g, q, f.tt_a, 0, 0), ValidationError);
    }
}

TEST_CASE("allocation and filter laws on random stores") {
    std::mt19937_64 rng(2024);
    std::uniform_real_distribution<> u(-1, 1);
    for (int trial = 0; trial < 200; ++trial) {
        Fixture f;
        const int n = static_cast<int>(rng() % 12);
        for (int i = 0; i < n; ++i) {
            const Vector v = vec({u(rng), u(rng), u(rng), u(rng)});
            const NodeId tt = rng() % 2 ? f.tt_a : f.tt_b;
            switch (rng() % 3) {
                case 0: f.success(tt, "s", v); break;
                case 1: f.failure(tt, "f", v); break;
                default: f.failure(tt, "t", v, FailureKind::type_strategy); break;
            }
        }
        const Vector q = vec({u(rng), u(rng), u(rng), u(rng)});
        const std::size_t ctx = rng() % 1000;
        const auto b = f.index.retrieve_bundle(f.g, q, f.tt_a, ctx, 3);
        CHECK(b.allocation == (ctx < 500 ? Allocation{2, 1} : Allocation{1, 2}));
        CHECK(b.size() <= 3);
        for (const auto& m : b.success) CHECK(m.node.task_type_id == f.tt_a);
        for (const auto& m : b.failure) {
            CHECK(m.node.task_type_id == f.tt_a);
            if (m.node.kind() == FailureKind::type_strategy) CHECK(m.similarity >= 0.55);
        }
        for (std::size_t i = 1; i < b.success.size(); ++i) CHECK(b.success[i - 1].similarity >= b.success[i].similarity);
        for (std::size_t i = 1; i < b.failure.size(); ++i) CHECK(b.failure[i - 1].similarity >= b.failure[i].similarity);
        CHECK(f.index.retrieve_bundle(f.g, q, f.tt_a, ctx, 3).ids() == b.ids());
    }
}

TEST_CASE("format_bundle") {
    Fixture f;
    const Vector q = at_similarity(1.0);
    SUBCASE("empty bundle is the bare prompt") {
        CHECK(format_bundle(MemoryBundle{}, "What is 2+2?", "") == "[QUESTION]\nWhat is 2+2?\n");
        CHECK(format_bundle(MemoryBundle{}, "Q", "ctx") == "[QUESTION]\nQ\nContext: ctx\n");
    }
    SUBCASE("success block precedes correction block") {
        f.success(f.tt_a, "s1", at_similarity(0.9));
        f.failure(f.tt_a, "f1", at_similarity(0.9));
        const auto b = f.index.retrieve_bundle(f.g, q, f.tt_a, 100, 2);
        const auto text = format_bundle(b, "Q", "");
        CHECK(text ==
              "[SUCCESS 1] Q: s1\nReasoning: because s1\nA: 42\n\n"
              "[CORRECTION 1] conditions: task_type=A, skill=arith, kind=specific\ncorrection: carry the one in f1\n\n"
              "[QUESTION]\nQ\n");
    }
    SUBCASE("lattice block sits between corrections and the question") {
        const auto text = format_bundle(MemoryBundle{}, "Q", "", "- arith (mastery 0.00)");
        CHECK(text == "[SKILL LATTICE]\n- arith (mastery 0.00)\n\n[QUESTION]\nQ\n");
    }
}

TEST_CASE("harvest_success") {
    Fixture f;
    HashEmbedder emb(4);
    SUBCASE("first harvest is counted and retrievable") {
        const auto id = f.index.harvest_success(f.g, emb, {"what is 6*7", "six sevens", "42", {}, f.tt_a, f.skill, 0});
        CHECK(f.g.protected_counts().success_memory == 1);
        const auto b = f.index.retrieve_bundle(f.g, emb.embed("what is 6*7"), f.tt_a, 0, 3);
        CHECK(b.ids() == std::vector<NodeId>{id});
    }
    SUBCASE("trace truncated to the cap") {
        MemoryIndex idx(4, MemoryParams{3, 500, 0.55, 50});
        const std::string trace(150, 'x');
        const auto id = idx.harvest_success(f.g, emb, {"q", trace, "a", {}, f.tt_a, f.skill, 0});
        CHECK(std::get<SuccessPayload>(f.g.experience(id).payload).reasoning_trace.size() == 50);
    }
    SUBCASE("decomposition kept verbatim") {
        const std::vector<std::pair<std::string, std::string>> steps{{"parse", "a=3, b=4"}, {"arith", "3*4=12"}};
        const auto id = f.index.harvest_success(f.g, emb, {"q", "t", "12", steps, f.tt_a, f.skill, 2});
        CHECK(std::get<SuccessPayload>(f.g.experience(id).payload).decomposition == steps);
        CHECK(f.g.experience(id).created_iter == 2);
    }
}

TEST_CASE("truncate_chars keeps UTF-8 sequences whole") {
    CHECK(truncate_chars("abcdef", 3) == "abc");
    CHECK(truncate_chars("ab", 3) == "ab");
    CHECK(truncate_chars("a\xc3\xa9z", 2) == "a");
}

TEST_CASE("uniform_tv") {
    const std::vector<NodeId> a{1, 2, 3}, b{4, 5, 6}, c{1, 2, 4};
    CHECK(uniform_tv(a, a) == 0.0);
    CHECK(uniform_tv(a, b) == 1.0);
    CHECK(uniform_tv(a, c) == doctest::Approx(1.0 / 3.0));
}

namespace {

/// Exhaustive TV oracle written independently: enumerate all K-subsets of the
/// candidates, keep the accuracy-optimal ones, take the smallest TV.
double reference_tv(const std::vector<NodeId>& cand, const std::vector<NodeId>& retrieved, std::size_t k,
                    const std::function<double(const std::vector<NodeId>&)>& acc) {
    const std::size_t n = cand.size(), s = std::min(k, n);
    double best = -1, tv = 1;
    for (std::uint32_t mask = 0; mask < (1u << n); ++mask) {
        if (static_cast<std::size_t>(__builtin_popcount(mask)) != s) continue;
        std::vector<NodeId> sub;
        for (std::size_t i = 0; i < n; ++i)
            if (mask & (1u << i)) sub.push_back(cand[i]);
        const double a = acc(sub);
        const double t = uniform_tv(sub, retrieved);
        if (a > best + 1e-12) {
            best = a;
            tv = t;
        } else if (std::abs(a - best) <= 1e-12) {
            tv = std::min(tv, t);
        }
    }
    return tv;
}

}  // namespace

TEST_CASE("measure_retrieval_error") {
    Fixture f;
    const Vector q = at_similarity(1.0);
    SUBCASE("empty query list") {
        CHECK_THROWS_AS(measure_retrieval_error(f.index, f.g, {}, 3), ValidationError);
    }
    SUBCASE("retriever equal to oracle") {
        const auto a = f.success(f.tt_a, "a", at_similarity(0.9));
        const auto b = f.success(f.tt_a, "b", at_similarity(0.8));
        f.success(f.tt_a, "c", at_similarity(0.1));
        ErrorQuery eq{q, f.tt_a, 0, {}};
        eq.oracle.matches = [&](NodeId id) { return id == a || id == b; };
        eq.oracle.by_match_count = [](std::size_t m) { return 0.2 + 0.1 * static_cast<double>(m); };
        const std::vector<ErrorQuery> qs{eq};
        CHECK(measure_retrieval_error(f.index, f.g, qs, 2).max == 0.0);
    }
    SUBCASE("disjoint sets give 1") {
        std::vector<NodeId> far;
        for (int i = 0; i < 3; ++i) f.success(f.tt_a, "near", at_similarity(0.9 - 0.01 * i));
        for (int i = 0; i < 3; ++i) far.push_back(f.success(f.tt_a, "far", at_similarity(0.1 - 0.01 * i)));
        ErrorQuery eq{q, f.tt_a, 0, {}};
        eq.oracle.set_accuracy = [&](std::span<const NodeId> s) {
            double hits = 0;
            for (auto id : s) hits += std::count(far.begin(), far.end(), id);
            return hits;
        };
        const std::vector<ErrorQuery> qs{eq};
        const auto err = measure_retrieval_error(f.index, f.g, qs, 3, OracleRoute::brute_force);
        CHECK(err.max == 1.0);
        CHECK(err.mean == 1.0);
    }
    SUBCASE("all routes agree with an exhaustive oracle on small instances") {
        std::mt19937_64 rng(17);
        std::uniform_real_distribution<> u(-1, 1);
        for (int trial = 0; trial < 60; ++trial) {
            Fixture g;
            std::vector<NodeId> ids;
            std::map<NodeId, std::size_t> cls;
            const int n = 4 + static_cast<int>(rng() % 7);  // <= 10 memories
            for (int i = 0; i < n; ++i) {
                const Vector v = vec({u(rng), u(rng), u(rng), u(rng)});
                const bool succ = rng() % 2;
                const NodeId id = succ ? g.success(g.tt_a, "s", v) : g.failure(g.tt_a, "f", v);
                ids.push_back(id);
                cls[id] = rng() % 3 == 0 ? 0 : (succ ? 1 : 2);
            }
            std::sort(ids.begin(), ids.end());
            auto by_counts = [](std::span<const std::size_t> c) {
                return 0.12 * static_cast<double>(std::min<std::size_t>(c[1], 2)) +
                       0.20 * static_cast<double>(std::min<std::size_t>(c[2], 2));
            };
            auto set_acc = [&](std::span<const NodeId> s) {
                std::size_t c[3] = {0, 0, 0};
                for (auto id : s) ++c[cls.at(id)];
                return by_counts(c);
            };
            ErrorQuery eq{vec({u(rng), u(rng), u(rng), u(rng)}), g.tt_a, rng() % 1000, {}};
            eq.oracle.set_accuracy = set_acc;
            eq.oracle.classes = 3;
            eq.oracle.class_of = [&](NodeId id) { return cls.at(id); };
            eq.oracle.by_class_counts = by_counts;
            const std::vector<ErrorQuery> qs{eq};

            const auto retrieved = g.index.retrieve_bundle(g.g, eq.vector, g.tt_a, eq.context_length, 3).ids();
            const double expected = reference_tv(ids, retrieved, 3, [&](const std::vector<NodeId>& s) {
                return set_acc(std::span<const NodeId>(s));
            });
            CHECK(measure_retrieval_error(g.index, g.g, qs, 3, OracleRoute::brute_force).max ==
                  doctest::Approx(expected).epsilon(1e-12));
            CHECK(measure_retrieval_error(g.index, g.g, qs, 3, OracleRoute::closed_form).max ==
                  doctest::Approx(expected).epsilon(1e-12));

            // Two-class form: match = any helpful class, accuracy by match count.
            ErrorQuery two{eq.vector, g.tt_a, eq.context_length, {}};
            two.oracle.matches = [&](NodeId id) { return cls.at(id) != 0; };
            two.oracle.by_match_count = [](std::size_t m) { return 0.15 * static_cast<double>(m); };
            const std::vector<ErrorQuery> qs2{two};
            const double expected2 = reference_tv(ids, retrieved, 3, [&](const std::vector<NodeId>& s) {
                double m = 0;
                for (auto id : s) m += cls.at(id) != 0;
                return 0.15 * m;
            });
            CHECK(measure_retrieval_error(g.index, g.g, qs2, 3).max == doctest::Approx(expected2).epsilon(1e-12));
        }
    }
}

TEST_CASE("cascade_principles") {
    KnowledgeGraph g;
    auto principle = [&](const std::string& text, NodeId skill) {
        ExperienceNode n;
        n.outcome = Outcome::principle;
        n.payload = PrinciplePayload{text};
        const auto id = g.append_experience(n);
        g.attach_principle(skill, id);
        return id;
    };
    SUBCASE("isolated skill") {
        const auto s = g.add_skill("s");
        const auto p = principle("own", s);
        const auto out = cascade_principles(g, s);
        REQUIRE(out.size() == 1);
        CHECK(out[0].id == p);
    }
    SUBCASE("chain") {
        const auto a = g.add_skill("a"), b = g.add_skill("b"), c = g.add_skill("c");
        g.add_prerequisite(a, b);
        g.add_prerequisite(b, c);
        const auto pc = principle("pc", c);
        const auto pa = principle("pa", a);
        const auto pb = principle("pb", b);
        std::vector<NodeId> ids;
        for (const auto& n : cascade_principles(g, c)) ids.push_back(n.id);
        CHECK(ids == std::vector<NodeId>{pa, pb, pc});
    }
    SUBCASE("diamond deduplicates") {
        const auto a = g.add_skill("a"), b = g.add_skill("b"), c = g.add_skill("c"), d = g.add_skill("d");
        g.add_prerequisite(a, b);
        g.add_prerequisite(a, c);
        g.add_prerequisite(b, d);
        g.add_prerequisite(c, d);
        const auto pa = principle("pa", a);
        const auto out = cascade_principles(g, d);
        CHECK(std::count_if(out.begin(), out.end(), [&](const ExperienceNode& n) { return n.id == pa; }) == 1);
    }
    SUBCASE("unknown skill") {
        CHECK_THROWS_AS(cascade_principles(g, 404), NotFoundError);
    }
}

TEST_CASE("action recipes") {
    KnowledgeGraph g;
    const auto s = g.add_skill("s"), t = g.add_skill("t");
    const std::vector<std::string> three{"move", "craft", "place"};
    record_action_recipe(g, s, three);
    CHECK(action_recipe_for(g, s) == three);

    const std::vector<std::string> five{"a", "b", "c", "d", "e"};
    record_action_recipe(g, s, five);
    CHECK(action_recipe_for(g, s) == std::vector<std::string>{"c", "d", "e"});

    CHECK(action_recipe_for(g, t).empty());
    CHECK_THROWS_AS(record_action_recipe(g, t, std::vector<std::string>{}), ValidationError);
}

TEST_CASE("render_skill_lattice") {
    KnowledgeGraph g;
    SUBCASE("resolver without prerequisites") {
        const auto s = g.add_skill("solo");
        const auto t = g.add_task_type("t", s);
        CHECK(render_skill_lattice(g, t) == "- solo (mastery 0.00)\n");
    }
    SUBCASE("chain of three prerequisites") {
        const auto a = g.add_skill("a", 0.9), b = g.add_skill("b", 0.6), c = g.add_skill("c", 0.3), d = g.add_skill("d");
        g.add_prerequisite(a, b);
        g.add_prerequisite(b, c);
        g.add_prerequisite(c, d);
        const auto t = g.add_task_type("t", d);
        const auto text = render_skill_lattice(g, t);
        CHECK(text ==
              "- a (mastery 0.90)\n"
              "  - b (mastery 0.60) <- a\n"
              "    - c (mastery 0.30) <- b\n"
              "      - d (mastery 0.00) <- c\n");
        CHECK(render_skill_lattice(g, t) == text);
    }
    SUBCASE("unresolved task type degrades to empty") {
        const auto t = g.add_task_type("t");
        CHECK(render_skill_lattice(g, t).empty());
    }
    SUBCASE("depth cap") {
        NodeId prev = g.add_skill("s0");
        for (int i = 1; i < 12; ++i) {
            const auto s = g.add_skill("s" + std::to_string(i));
            g.add_prerequisite(prev, s);
            prev = s;
        }
        const auto t = g.add_task_type("t", prev);
        const auto text = render_skill_lattice(g, t, 8);
        CHECK(std::count(text.begin(), text.end(), '\n') == 8);
    }
}

TEST_CASE("curriculum_override") {
    KnowledgeGraph g;
    SUBCASE("requested below threshold") {
        const auto r = g.add_skill("r", 0.2);
        CHECK(curriculum_override(g, r, 0.5) == r);
    }
    SUBCASE("mastered request goes to the weakest frontier skill") {
        const auto r = g.add_skill("r", 0.9);
        const auto b = g.add_skill("b", 0.1);
        const auto c = g.add_skill("c", 0.3);
        g.add_prerequisite(r, b);
        g.add_prerequisite(r, c);
        CHECK(curriculum_override(g, r, 0.5) == b);
    }
    SUBCASE("empty frontier") {
        const auto r = g.add_skill("r", 0.9);
        CHECK(curriculum_override(g, r, 0.5) == r);
    }
}

TEST_CASE("hash embedder is deterministic and separates vocabularies") {
    HashEmbedder e(64);
    CHECK(e.embed("add with carrying") == e.embed("add with carrying"));
    CHECK(e.embed("Add, with CARRYING!") == e.embed("add with carrying"));
    const Vector a = normalized(e.embed("multiply factor by factor 12 7"));
    const Vector b = normalized(e.embed("multiply factor by factor 30 2"));
    const Vector c = normalized(e.embed("sum the two highlighted cells of the ledger table"));
    CHECK(a.dot(b) > a.dot(c));
    CHECK(normalized(Vector::Zero(4)).norm() == 0.0);
}
