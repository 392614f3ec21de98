#include "coevo/memory_index.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <functional>
#include <map>
#include <set>
#include <sstream>

#include "coevo/curriculum.hpp"
#include "coevo/errors.hpp"

namespace coevo {

Allocation allocate(std::size_t context_length, std::size_t k, std::size_t long_context_threshold) {
    const std::size_t heavy = (2 * k + 2) / 3;  // ceil(2K/3)
    const std::size_t light = k - heavy;
    if (context_length < long_context_threshold) return {heavy, light};
    return {light, heavy};
}

std::vector<NodeId> MemoryBundle::ids() const {
    std::vector<NodeId> out;
    for (const auto& m : success) out.push_back(m.node.id);
    for (const auto& m : failure) out.push_back(m.node.id);
    return out;
}

std::string truncate_chars(std::string_view s, std::size_t cap) {
    if (s.size() <= cap) return std::string(s);
    std::size_t cut = cap;
    while (cut > 0 && (static_cast<unsigned char>(s[cut]) & 0xC0) == 0x80) --cut;
    return std::string(s.substr(0, cut));
}

MemoryIndex::MemoryIndex(std::size_t dimension, MemoryParams params)
    : params_(params), success_(dimension), failure_(dimension) {}

std::string MemoryIndex::embedding_text(const ExperienceNode& n) {
    if (const auto* s = std::get_if<SuccessPayload>(&n.payload)) return s->question;
    if (const auto* f = std::get_if<FailurePayload>(&n.payload)) return f->question;
    throw ValidationError("only success and failure memories are embedded");
}

void MemoryIndex::index_memory(const KnowledgeGraph& g, NodeId node, NodeId task_type, const Vector& v) {
    const ExperienceNode n = g.experience(node);
    if (n.task_type_id && *n.task_type_id != task_type)
        throw ValidationError("index_memory: node " + std::to_string(node) + " is tagged with a different task type");
    switch (n.outcome) {
        case Outcome::success_memory: success_.add(node, task_type, v); break;
        case Outcome::failure_memory: failure_.add(node, task_type, v); break;
        default:
            throw ValidationError("index_memory: outcome '" + std::string(to_string(n.outcome)) +
                                  "' is not exemplar-retrievable");
    }
}

MemoryBundle MemoryIndex::retrieve_bundle(const KnowledgeGraph& g, const Vector& query, NodeId task_type,
                                          std::size_t context_length, std::size_t k) const {
    if (k < 1) throw ValidationError("retrieve_bundle: K must be >= 1");
    MemoryBundle bundle;
    bundle.allocation = allocate(context_length, k, params_.long_context_threshold);

    const auto succ = success_.search(query, task_type);
    const auto fail = failure_.search(query, task_type, [&](NodeId id, double sim) {
        const auto kind = g.experience(id).kind();
        return kind != FailureKind::type_strategy || sim >= params_.type_strategy_min_similarity;
    });

    std::size_t take_s = std::min(bundle.allocation.n_success, succ.size());
    std::size_t take_f = std::min(bundle.allocation.n_failure, fail.size());
    std::size_t spare = k - take_s - take_f;
    if (take_s < bundle.allocation.n_success) {
        const std::size_t extra = std::min(spare, fail.size() - take_f);
        take_f += extra;
        spare -= extra;
    }
    if (take_f < bundle.allocation.n_failure) take_s += std::min(spare, succ.size() - take_s);

    std::map<NodeId, std::string> names;
    auto name_of = [&](const std::optional<NodeId>& id, bool skill) -> std::string {
        if (!id) return "none";
        auto it = names.find(*id);
        if (it != names.end()) return it->second;
        std::string n = skill ? g.skill(*id).name : g.task_type(*id).name;
        names[*id] = n;
        return n;
    };
    auto materialize = [&](const SearchHit& h) {
        RetrievedMemory m;
        m.similarity = h.similarity;
        m.node = g.experience(h.node);
        m.task_type_name = name_of(m.node.task_type_id, false);
        m.skill_name = name_of(m.node.skill_id, true);
        return m;
    };
    for (std::size_t i = 0; i < take_s; ++i) bundle.success.push_back(materialize(succ[i]));
    for (std::size_t i = 0; i < take_f; ++i) bundle.failure.push_back(materialize(fail[i]));
    return bundle;
}

NodeId MemoryIndex::harvest_success(KnowledgeGraph& g, Embedder& embedder, const SuccessHarvest& h) {
    ExperienceNode n;
    n.outcome = Outcome::success_memory;
    n.task_type_id = h.task_type;
    n.skill_id = h.skill;
    n.confidence = 1.0;
    n.created_iter = h.iter;
    n.payload = SuccessPayload{h.question, truncate_chars(h.trace, params_.trace_char_cap), h.answer, h.decomposition};
    const NodeId id = g.append_experience(std::move(n));
    success_.add(id, h.task_type, embedder.embed(h.question));
    return id;
}

void MemoryIndex::index_failure(const KnowledgeGraph& g, Embedder& embedder, NodeId node) {
    const ExperienceNode n = g.experience(node);
    if (n.outcome != Outcome::failure_memory || !n.task_type_id)
        throw ValidationError("index_failure: node " + std::to_string(node) + " is not a task-tagged failure memory");
    failure_.add(node, *n.task_type_id, embedder.embed(embedding_text(n)));
}

void MemoryIndex::rebuild(const KnowledgeGraph& g, Embedder& embedder) {
    success_.clear();
    failure_.clear();
    for (const auto& n : g.experience_nodes()) {
        if (!n.task_type_id) continue;
        if (n.outcome == Outcome::success_memory)
            success_.add(n.id, *n.task_type_id, embedder.embed(embedding_text(n)));
        else if (n.outcome == Outcome::failure_memory)
            failure_.add(n.id, *n.task_type_id, embedder.embed(embedding_text(n)));
    }
}

// ---------------------------------------------------------------------------

std::string format_bundle(const MemoryBundle& bundle, std::string_view question, std::string_view context,
                          std::string_view lattice) {
    std::string out;
    std::size_t i = 1;
    for (const auto& m : bundle.success) {
        const auto& s = std::get<SuccessPayload>(m.node.payload);
        out += "[SUCCESS " + std::to_string(i++) + "] Q: " + s.question + "\n";
        out += "Reasoning: " + s.reasoning_trace + "\n";
        out += "A: " + s.answer + "\n\n";
    }
    i = 1;
    for (const auto& m : bundle.failure) {
        const auto& f = std::get<FailurePayload>(m.node.payload);
        out += "[CORRECTION " + std::to_string(i++) + "] conditions: task_type=" + m.task_type_name +
               ", skill=" + m.skill_name + ", kind=" + std::string(to_string(f.kind)) + "\n";
        out += "correction: " + f.corrective_reasoning + "\n\n";
    }
    if (!lattice.empty()) {
        out += "[SKILL LATTICE]\n";
        out += lattice;
        if (lattice.back() != '\n') out += '\n';
        out += '\n';
    }
    out += "[QUESTION]\n";
    out += question;
    out += '\n';
    if (!context.empty()) {
        out += "Context: ";
        out += context;
        out += '\n';
    }
    return out;
}

// ---------------------------------------------------------------------------

namespace {

/// Ancestors of `skill` (inclusive) with their distance from it, capped.
std::map<NodeId, std::size_t> ancestors(const KnowledgeGraph& g, NodeId skill, std::size_t depth_cap) {
    const auto edges = g.prerequisites();
    std::map<NodeId, std::size_t> dist{{skill, 0}};
    std::vector<NodeId> frontier{skill};
    while (!frontier.empty()) {
        std::vector<NodeId> next;
        for (NodeId cur : frontier) {
            const std::size_t d = dist.at(cur);
            if (d + 1 >= depth_cap) continue;
            for (const auto& [from, to] : edges)
                if (to == cur && !dist.count(from)) {
                    dist[from] = d + 1;
                    next.push_back(from);
                }
        }
        frontier = std::move(next);
    }
    return dist;
}

}  // namespace

std::vector<ExperienceNode> cascade_principles(const KnowledgeGraph& g, NodeId skill) {
    g.skill(skill);  // not-found check
    const auto closure = ancestors(g, skill, static_cast<std::size_t>(-1));
    std::vector<ExperienceNode> out;
    std::set<NodeId> seen;
    for (NodeId s : g.topological_order()) {
        if (!closure.count(s)) continue;
        for (NodeId p : g.skill(s).principle_ids)
            if (seen.insert(p).second) out.push_back(g.experience(p));
    }
    return out;
}

NodeId record_action_recipe(KnowledgeGraph& g, NodeId skill, std::span<const std::string> trailing_actions,
                            std::size_t window) {
    if (trailing_actions.empty()) throw ValidationError("record_action_recipe: no actions supplied");
    const auto& sk = g.skill(skill);
    const std::size_t n = std::min(window, trailing_actions.size());
    std::vector<std::string> kept(trailing_actions.end() - static_cast<std::ptrdiff_t>(n), trailing_actions.end());
    ExperienceNode node;
    node.outcome = Outcome::retrieval_recipe;
    node.skill_id = skill;
    node.confidence = 1.0;
    node.created_iter = g.iteration();
    node.payload = RecipePayload{"action_recipe", "actions preceding success on " + sk.name, std::move(kept)};
    return g.append_experience(std::move(node));
}

std::vector<std::string> action_recipe_for(const KnowledgeGraph& g, NodeId skill) {
    std::vector<std::string> latest;
    for (const auto& n : g.experience_by_outcome(Outcome::retrieval_recipe)) {
        if (n.skill_id != skill) continue;
        const auto& r = std::get<RecipePayload>(n.payload);
        if (r.name == "action_recipe") latest = r.actions;
    }
    return latest;
}

std::string render_skill_lattice(const KnowledgeGraph& g, NodeId task_type, std::size_t depth_cap) {
    const auto tt = g.task_type(task_type);
    if (!tt.resolver_skill_id) return {};
    const auto included = ancestors(g, *tt.resolver_skill_id, depth_cap);

    // Level = longest prerequisite chain inside the included set.
    std::map<NodeId, std::size_t> level;
    std::ostringstream out;
    char buf[32];
    for (NodeId s : g.topological_order()) {
        if (!included.count(s)) continue;
        std::size_t lv = 0;
        std::vector<std::string> prereq_names;
        for (NodeId p : g.prerequisites_of(s)) {
            if (!included.count(p)) continue;
            lv = std::max(lv, level.at(p) + 1);
            prereq_names.push_back(g.skill(p).name);
        }
        level[s] = lv;
        const auto sk = g.skill(s);
        std::snprintf(buf, sizeof buf, "%.2f", sk.mastery);
        out << std::string(2 * lv, ' ') << "- " << sk.name << " (mastery " << buf << ")";
        if (!prereq_names.empty()) {
            out << " <- ";
            for (std::size_t i = 0; i < prereq_names.size(); ++i) out << (i ? ", " : "") << prereq_names[i];
        }
        out << '\n';
    }
    return out.str();
}

NodeId curriculum_override(const KnowledgeGraph& g, NodeId requested, double theta) {
    const auto req = g.skill(requested);
    if (req.mastery < theta) return requested;
    const auto frontier = learnable_frontier(g, theta);
    std::optional<SkillNode> best;
    for (NodeId id : frontier) {
        auto s = g.skill(id);
        if (!best || s.mastery < best->mastery) best = std::move(s);  // set order gives id ties
    }
    return best ? best->id : requested;
}

// ---------------------------------------------------------------------------

double uniform_tv(std::span<const NodeId> a, std::span<const NodeId> b) {
    if (a.empty() && b.empty()) return 0.0;
    if (a.empty() || b.empty()) return 1.0;
    const std::set<NodeId> sa(a.begin(), a.end());
    const std::set<NodeId> sb(b.begin(), b.end());
    std::size_t common = 0;
    for (NodeId x : sa) common += sb.count(x);
    // Each shared element carries min(1/|A|, 1/|B|) of overlapping mass.
    return 1.0 - static_cast<double>(common) / static_cast<double>(std::max(sa.size(), sb.size()));
}

namespace {

constexpr double kAccTieTol = 1e-12;

double brute_force_tv(std::span<const NodeId> candidates, std::span<const NodeId> retrieved, std::size_t k,
                      const AccuracyOracle& oracle) {
    const std::size_t n = candidates.size();
    const std::size_t s = std::min(k, n);
    if (s == 0) return retrieved.empty() ? 0.0 : 1.0;
    std::vector<std::size_t> idx(s);
    for (std::size_t i = 0; i < s; ++i) idx[i] = i;
    std::vector<NodeId> subset(s);
    double best_acc = -1.0;
    double best_tv = 1.0;
    while (true) {
        for (std::size_t i = 0; i < s; ++i) subset[i] = candidates[idx[i]];
        const double acc = oracle.set_accuracy(subset);
        const double tv = uniform_tv(subset, retrieved);
        if (acc > best_acc + kAccTieTol) {
            best_acc = acc;
            best_tv = tv;
        } else if (std::abs(acc - best_acc) <= kAccTieTol) {
            best_tv = std::min(best_tv, tv);
        }
        // next combination
        std::size_t i = s;
        while (i > 0 && idx[i - 1] == n - s + (i - 1)) --i;
        if (i == 0) break;
        ++idx[i - 1];
        for (std::size_t j = i; j < s; ++j) idx[j] = idx[j - 1] + 1;
    }
    return best_tv;
}

/// Optimal class-count vectors are enumerated directly; among optimal ones
/// the oracle keeps as many retrieved items as possible, which minimizes TV.
double closed_form_tv(std::span<const NodeId> candidates, std::span<const NodeId> retrieved, std::size_t k,
                      std::size_t classes, const std::function<std::size_t(NodeId)>& class_of,
                      const std::function<double(std::span<const std::size_t>)>& by_counts) {
    const std::size_t s = std::min(k, candidates.size());
    if (s == 0) return retrieved.empty() ? 0.0 : 1.0;
    std::vector<std::size_t> avail(classes, 0);
    for (NodeId c : candidates) ++avail.at(class_of(c));

    const std::set<NodeId> cand(candidates.begin(), candidates.end());
    const std::set<NodeId> ret(retrieved.begin(), retrieved.end());
    std::vector<std::size_t> in_ret(classes, 0);
    for (NodeId r : ret)
        if (cand.count(r)) ++in_ret.at(class_of(r));

    double best_acc = -1.0;
    std::size_t best_overlap = 0;
    std::vector<std::size_t> counts(classes, 0);
    // Depth-first over count vectors summing to s.
    std::function<void(std::size_t, std::size_t)> visit = [&](std::size_t cls, std::size_t left) {
        if (cls + 1 == classes) {
            if (left > avail[cls]) return;
            counts[cls] = left;
            const double acc = by_counts(counts);
            std::size_t overlap = 0;
            for (std::size_t i = 0; i < classes; ++i) overlap += std::min(counts[i], in_ret[i]);
            if (acc > best_acc + kAccTieTol) {
                best_acc = acc;
                best_overlap = overlap;
            } else if (std::abs(acc - best_acc) <= kAccTieTol) {
                best_overlap = std::max(best_overlap, overlap);
            }
            return;
        }
        for (std::size_t c = 0; c <= std::min(left, avail[cls]); ++c) {
            counts[cls] = c;
            visit(cls + 1, left - c);
        }
    };
    visit(0, s);
    const std::size_t denom = std::max(s, ret.size());
    return 1.0 - static_cast<double>(best_overlap) / static_cast<double>(denom);
}

}  // namespace

RetrievalError measure_retrieval_error(const MemoryIndex& index, const KnowledgeGraph& g,
                                       std::span<const ErrorQuery> queries, std::size_t k, OracleRoute route) {
    if (queries.empty()) throw ValidationError("measure_retrieval_error: empty query list");
    RetrievalError out;
    for (const auto& q : queries) {
        std::vector<NodeId> candidates;
        for (const auto* store : {&index.success_store(), &index.failure_store()})
            for (const auto& e : store->entries())
                if (e.task_type == q.task_type) candidates.push_back(e.node);
        std::sort(candidates.begin(), candidates.end());

        const auto bundle = index.retrieve_bundle(g, q.vector, q.task_type, q.context_length, k);
        const auto retrieved = bundle.ids();

        const bool by_class = q.oracle.classes > 0 && q.oracle.class_of && q.oracle.by_class_counts;
        const bool closed_ok = by_class || (q.oracle.matches && q.oracle.by_match_count);
        OracleRoute r = route;
        if (r == OracleRoute::automatic) r = closed_ok ? OracleRoute::closed_form : OracleRoute::brute_force;
        if (r == OracleRoute::closed_form && !closed_ok)
            throw ValidationError("measure_retrieval_error: closed form needs a match-count oracle");
        if (r == OracleRoute::brute_force && !q.oracle.set_accuracy)
            throw ValidationError("measure_retrieval_error: brute force needs a set accuracy oracle");

        double tv = 0.0;
        if (r == OracleRoute::brute_force) {
            tv = brute_force_tv(candidates, retrieved, k, q.oracle);
        } else if (by_class) {
            tv = closed_form_tv(candidates, retrieved, k, q.oracle.classes, q.oracle.class_of,
                                q.oracle.by_class_counts);
        } else {
            const auto& m = q.oracle.matches;
            const auto& f = q.oracle.by_match_count;
            tv = closed_form_tv(
                candidates, retrieved, k, 2, [&](NodeId id) -> std::size_t { return m(id) ? 1 : 0; },
                [&](std::span<const std::size_t> c) { return f(c[1]); });
        }
        out.per_query.push_back(tv);
        out.max = std::max(out.max, tv);
        out.mean += tv;
    }
    out.mean /= static_cast<double>(queries.size());
    return out;
}

}  // namespace coevo
