#include "coevo/graph.hpp"

#include <algorithm>
#include <mutex>
#include <queue>
#include <set>

#include "coevo/errors.hpp"

namespace coevo {

using nlohmann::json;

// ---------------------------------------------------------------------------
// enum names
// ---------------------------------------------------------------------------

std::string_view to_string(Outcome o) noexcept {
    switch (o) {
        case Outcome::principle: return "principle";
        case Outcome::failure_memory: return "failure_memory";
        case Outcome::success_memory: return "success_memory";
        case Outcome::retrieval_recipe: return "retrieval_recipe";
        case Outcome::abstracted_pattern: return "abstracted_pattern";
    }
    return "?";
}

std::string_view to_string(FailureKind k) noexcept {
    return k == FailureKind::specific ? "specific" : "type_strategy";
}

std::string_view to_string(EnvClass c) noexcept {
    switch (c) {
        case EnvClass::entity: return "entity";
        case EnvClass::relation: return "relation";
        case EnvClass::observation: return "observation";
        case EnvClass::task_context: return "task_context";
    }
    return "?";
}

Outcome parse_outcome(std::string_view s) {
    for (auto o : {Outcome::principle, Outcome::failure_memory, Outcome::success_memory, Outcome::retrieval_recipe,
                   Outcome::abstracted_pattern})
        if (to_string(o) == s) return o;
    throw ValidationError("unknown outcome '" + std::string(s) + "'");
}

FailureKind parse_failure_kind(std::string_view s) {
    if (s == "specific") return FailureKind::specific;
    if (s == "type_strategy") return FailureKind::type_strategy;
    throw ValidationError("unknown failure kind '" + std::string(s) + "'");
}

EnvClass parse_env_class(std::string_view s) {
    for (auto c : {EnvClass::entity, EnvClass::relation, EnvClass::observation, EnvClass::task_context})
        if (to_string(c) == s) return c;
    throw ValidationError("unknown env class '" + std::string(s) + "'");
}

std::optional<FailureKind> ExperienceNode::kind() const {
    if (const auto* f = std::get_if<FailurePayload>(&payload)) return f->kind;
    return std::nullopt;
}

// ---------------------------------------------------------------------------
// JSON
// ---------------------------------------------------------------------------

namespace {

json opt_id(const std::optional<NodeId>& v) { return v ? json(*v) : json(nullptr); }

std::optional<NodeId> opt_id_from(const json& j, const char* key) {
    auto it = j.find(key);
    if (it == j.end() || it->is_null()) return std::nullopt;
    return it->get<NodeId>();
}

json payload_to_json(const ExperiencePayload& p) {
    return std::visit(
        [](const auto& v) -> json {
            using T = std::decay_t<decltype(v)>;
            if constexpr (std::is_same_v<T, PrinciplePayload>) {
                return {{"text", v.text}};
            } else if constexpr (std::is_same_v<T, FailurePayload>) {
                return {{"question", v.question},
                        {"wrong_answer", v.wrong_answer},
                        {"corrective_reasoning", v.corrective_reasoning},
                        {"correct_answer", v.correct_answer},
                        {"kind", to_string(v.kind)}};
            } else if constexpr (std::is_same_v<T, SuccessPayload>) {
                json steps = json::array();
                for (const auto& [skill, out] : v.decomposition) steps.push_back({skill, out});
                return {{"question", v.question},
                        {"reasoning_trace", v.reasoning_trace},
                        {"answer", v.answer},
                        {"decomposition", steps}};
            } else if constexpr (std::is_same_v<T, RecipePayload>) {
                return {{"name", v.name}, {"description", v.description}, {"actions", v.actions}};
            } else {
                return {{"summary", v.summary}};
            }
        },
        p);
}

ExperiencePayload payload_from_json(Outcome o, const json& j) {
    switch (o) {
        case Outcome::principle: return PrinciplePayload{j.at("text").get<std::string>()};
        case Outcome::failure_memory:
            return FailurePayload{j.at("question").get<std::string>(), j.at("wrong_answer").get<std::string>(),
                                  j.at("corrective_reasoning").get<std::string>(),
                                  j.at("correct_answer").get<std::string>(),
                                  parse_failure_kind(j.at("kind").get<std::string>())};
        case Outcome::success_memory: {
            SuccessPayload s{j.at("question").get<std::string>(), j.at("reasoning_trace").get<std::string>(),
                             j.at("answer").get<std::string>(),
                             {}};
            for (const auto& step : j.at("decomposition"))
                s.decomposition.emplace_back(step.at(0).get<std::string>(), step.at(1).get<std::string>());
            return s;
        }
        case Outcome::retrieval_recipe:
            return RecipePayload{j.at("name").get<std::string>(), j.at("description").get<std::string>(),
                                 j.at("actions").get<std::vector<std::string>>()};
        case Outcome::abstracted_pattern: return PatternPayload{j.at("summary").get<std::string>()};
    }
    throw ValidationError("bad outcome");
}

json skill_to_json(const SkillNode& s) {
    return {{"id", s.id},
            {"name", s.name},
            {"mastery", s.mastery},
            {"prompt_template", s.prompt_template},
            {"strategy", s.strategy},
            {"principle_ids", s.principle_ids}};
}

json task_to_json(const TaskTypeNode& t) {
    return {{"id", t.id},       {"name", t.name},           {"n_fail", t.n_fail},
            {"k_last", t.k_last}, {"resolver", opt_id(t.resolver_skill_id)}, {"observed", t.observed}};
}

const char* scope_name(BanditScope s) { return s == BanditScope::routing ? "routing" : "search"; }

BanditScope parse_scope(const std::string& s) {
    if (s == "routing") return BanditScope::routing;
    if (s == "search") return BanditScope::search;
    throw ValidationError("unknown bandit scope '" + s + "'");
}

json bandit_map_to_json(const std::map<NodeId, BanditState>& m) {
    json arr = json::array();
    for (const auto& [ctx, st] : m) arr.push_back({{"context_node", ctx}, {"state", st}});
    return arr;
}

std::map<NodeId, BanditState> bandit_map_from_json(const json& arr) {
    std::map<NodeId, BanditState> m;
    for (const auto& e : arr) m[e.at("context_node").get<NodeId>()] = e.at("state").get<BanditState>();
    return m;
}

}  // namespace

void to_json(json& j, const ExperienceNode& n) {
    j = {{"id", n.id},
         {"outcome", to_string(n.outcome)},
         {"task_type", opt_id(n.task_type_id)},
         {"skill", opt_id(n.skill_id)},
         {"confidence", n.confidence},
         {"payload", payload_to_json(n.payload)},
         {"created_iter", n.created_iter}};
}

ExperienceNode experience_from_json(const json& j) {
    if (!j.contains("outcome") || !j.at("outcome").is_string())
        throw ValidationError("experience node is missing its outcome");
    ExperienceNode n;
    n.id = j.value("id", NodeId{0});
    n.outcome = parse_outcome(j.at("outcome").get<std::string>());
    n.task_type_id = opt_id_from(j, "task_type");
    n.skill_id = opt_id_from(j, "skill");
    n.confidence = j.value("confidence", 1.0);
    n.payload = payload_from_json(n.outcome, j.at("payload"));
    n.created_iter = j.value("created_iter", std::int64_t{0});
    return n;
}

void to_json(json& j, const MutableState& s) {
    json skills = json::array();
    for (const auto& [id, slots] : s.skills)
        skills.push_back({{"skill", id},
                          {"mastery", slots.mastery},
                          {"prompt_template", slots.prompt_template},
                          {"strategy", slots.strategy}});
    j = {{"skills", skills},
         {"routing_bandits", bandit_map_to_json(s.routing_bandits)},
         {"search_bandits", bandit_map_to_json(s.search_bandits)}};
}

MutableState mutable_state_from_json(const json& j) {
    MutableState s;
    for (const auto& e : j.at("skills"))
        s.skills[e.at("skill").get<NodeId>()] = SkillSlots{e.at("mastery").get<double>(),
                                                           e.at("prompt_template").get<std::string>(),
                                                           e.at("strategy").get<std::string>()};
    s.routing_bandits = bandit_map_from_json(j.at("routing_bandits"));
    s.search_bandits = bandit_map_from_json(j.at("search_bandits"));
    return s;
}

void to_json(json& j, const ProtectedCounts& c) {
    j = {{"principle", c.principle}, {"failure_memory", c.failure_memory}, {"success_memory", c.success_memory}};
}

json Event::to_json() const { return {{"seq", seq}, {"iter", iter}, {"op", op}, {"payload", payload}}; }

Event Event::from_json(const json& j) {
    Event e;
    e.seq = j.at("seq").get<std::uint64_t>();
    e.iter = j.at("iter").get<std::int64_t>();
    e.op = j.at("op").get<std::string>();
    e.payload = j.at("payload");
    return e;
}

std::string Event::line() const { return to_json().dump(); }

// ---------------------------------------------------------------------------
// KnowledgeGraph
// ---------------------------------------------------------------------------

KnowledgeGraph::KnowledgeGraph(GraphLimits limits) : limits_(limits) {}

void KnowledgeGraph::set_iteration(std::int64_t iter) {
    std::unique_lock lock(mu_);
    iteration_ = iter;
}

std::int64_t KnowledgeGraph::iteration() const {
    std::shared_lock lock(mu_);
    return iteration_;
}

void KnowledgeGraph::freeze() {
    std::unique_lock lock(mu_);
    frozen_ = true;
}

bool KnowledgeGraph::frozen() const {
    std::shared_lock lock(mu_);
    return frozen_;
}

void KnowledgeGraph::require_writable() const {
    if (frozen_) throw InvariantBreach("write attempted on a frozen knowledge graph");
}

void KnowledgeGraph::set_event_sink(EventSink sink) {
    std::unique_lock lock(mu_);
    sink_ = std::move(sink);
}

std::uint64_t KnowledgeGraph::next_seq() const {
    std::shared_lock lock(mu_);
    return log_.size() + 1;
}

void KnowledgeGraph::commit(std::string op, json payload) {
    apply(op, payload);
    Event e{log_.size() + 1, iteration_, std::move(op), std::move(payload)};
    log_.push_back(std::move(e));
    if (sink_) sink_(log_.back());
}

SkillNode& KnowledgeGraph::skill_ref(NodeId id) {
    auto it = skills_.find(id);
    if (it == skills_.end()) throw NotFoundError("unknown skill " + std::to_string(id));
    return it->second;
}

TaskTypeNode& KnowledgeGraph::task_ref(NodeId id) {
    auto it = task_types_.find(id);
    if (it == task_types_.end()) throw NotFoundError("unknown task type " + std::to_string(id));
    return it->second;
}

std::map<NodeId, BanditState>& KnowledgeGraph::bandits(BanditScope scope) {
    return scope == BanditScope::routing ? routing_bandits_ : search_bandits_;
}

const std::map<NodeId, BanditState>& KnowledgeGraph::bandits(BanditScope scope) const {
    return scope == BanditScope::routing ? routing_bandits_ : search_bandits_;
}

namespace {

void check_unit(double v, const char* what) {
    if (!(v >= 0.0 && v <= 1.0)) throw ValidationError(std::string(what) + " must lie in [0,1]");
}

void check_new_id(NodeId id, NodeId expected) {
    if (id != expected)
        throw ValidationError("node id " + std::to_string(id) + " does not match next id " + std::to_string(expected));
}

}  // namespace

// Single place where state changes. Live mutators validate first and then
// call commit(); replay calls this directly and relies on the checks here.
void KnowledgeGraph::apply(const std::string& op, const json& p) {
    if (op == "add_skill") {
        const NodeId id = p.at("id").get<NodeId>();
        check_new_id(id, next_id_);
        if (skills_.size() >= limits_.skill_cap) throw CapError("skill cap reached");
        const double m = p.at("mastery").get<double>();
        check_unit(m, "mastery");
        skills_[id] = SkillNode{id, p.at("name").get<std::string>(), m, p.at("prompt_template").get<std::string>(),
                                p.at("strategy").get<std::string>(), {}};
        next_id_ = id + 1;
    } else if (op == "add_prerequisite") {
        const NodeId from = p.at("from").get<NodeId>();
        const NodeId to = p.at("to").get<NodeId>();
        skill_ref(from);
        skill_ref(to);
        if (from == to || reaches(to, from)) throw CycleError("prerequisite edge would create a cycle");
        prereq_edges_.emplace_back(from, to);
    } else if (op == "set_mastery") {
        const double v = p.at("value").get<double>();
        check_unit(v, "mastery");
        skill_ref(p.at("skill").get<NodeId>()).mastery = v;
    } else if (op == "set_prompt_template") {
        skill_ref(p.at("skill").get<NodeId>()).prompt_template = p.at("text").get<std::string>();
    } else if (op == "set_strategy") {
        skill_ref(p.at("skill").get<NodeId>()).strategy = p.at("text").get<std::string>();
    } else if (op == "attach_principle") {
        auto& s = skill_ref(p.at("skill").get<NodeId>());
        const NodeId pr = p.at("principle").get<NodeId>();
        auto it = experience_.find(pr);
        if (it == experience_.end() || it->second.outcome != Outcome::principle)
            throw ValidationError("attach_principle: node " + std::to_string(pr) + " is not a principle");
        if (!p.at("evicted").is_null()) {
            const NodeId ev = p.at("evicted").get<NodeId>();
            if (s.principle_ids.empty() || s.principle_ids.front() != ev)
                throw ValidationError("attach_principle: evicted reference mismatch");
            s.principle_ids.erase(s.principle_ids.begin());
        }
        if (s.principle_ids.size() >= limits_.principle_cap) throw CapError("principle cap exceeded");
        s.principle_ids.push_back(pr);
    } else if (op == "add_task_type") {
        const NodeId id = p.at("id").get<NodeId>();
        check_new_id(id, next_id_);
        auto resolver = opt_id_from(p, "resolver");
        if (resolver) skill_ref(*resolver);
        task_types_[id] = TaskTypeNode{id, p.at("name").get<std::string>(), 0, -1, resolver, false};
        next_id_ = id + 1;
    } else if (op == "set_resolver") {
        const NodeId skill = p.at("skill").get<NodeId>();
        skill_ref(skill);
        task_ref(p.at("task_type").get<NodeId>()).resolver_skill_id = skill;
    } else if (op == "mark_observed") {
        task_ref(p.at("task_type").get<NodeId>()).observed = true;
    } else if (op == "add_failures") {
        task_ref(p.at("task_type").get<NodeId>()).n_fail += p.at("count").get<std::uint64_t>();
    } else if (op == "mark_selected") {
        auto& t = task_ref(p.at("task_type").get<NodeId>());
        const auto k = p.at("k").get<std::int64_t>();
        if (k < t.k_last) throw ValidationError("mark_selected: k_last may not move backwards");
        t.k_last = k;
    } else if (op == "append_experience") {
        ExperienceNode n = experience_from_json(p.at("node"));
        check_new_id(n.id, next_id_);
        next_id_ = n.id + 1;
        experience_[n.id] = std::move(n);
    } else if (op == "prune") {
        for (const auto& idj : p.at("removed")) {
            const NodeId id = idj.get<NodeId>();
            auto it = experience_.find(id);
            if (it == experience_.end()) throw NotFoundError("prune: unknown node " + std::to_string(id));
            if (it->second.outcome != Outcome::abstracted_pattern)
                throw InvariantBreach("prune: node " + std::to_string(id) + " is not an abstracted pattern");
        }
        for (const auto& idj : p.at("removed")) experience_.erase(idj.get<NodeId>());
    } else if (op == "add_env") {
        const NodeId id = p.at("id").get<NodeId>();
        check_new_id(id, next_id_);
        env_[id] = EnvNode{id, parse_env_class(p.at("class").get<std::string>()), p.at("payload").get<std::string>()};
        next_id_ = id + 1;
    } else if (op == "ensure_bandit") {
        auto& m = bandits(parse_scope(p.at("scope").get<std::string>()));
        const NodeId ctx = p.at("context_node").get<NodeId>();
        if (m.count(ctx)) throw ValidationError("bandit already exists");
        m[ctx] = p.at("state").get<BanditState>();
    } else if (op == "update_bandit") {
        auto& m = bandits(parse_scope(p.at("scope").get<std::string>()));
        auto it = m.find(p.at("context_node").get<NodeId>());
        if (it == m.end()) throw NotFoundError("update_bandit: unknown context");
        update_arm(it->second, p.at("arm").get<std::string>(), p.at("reward").get<int>());
    } else if (op == "snapshot") {
        // Logged so that replayed and resumed graphs number snapshots identically.
        const auto id = p.at("snapshot_id").get<SnapshotId>();
        if (id != next_snapshot_id_)
            throw ValidationError("snapshot id " + std::to_string(id) + " does not match next id " +
                                  std::to_string(next_snapshot_id_));
        ++next_snapshot_id_;
        snapshots_[id] = Snapshot{id, iteration_, mutable_state_unlocked(), protected_counts_unlocked()};
        while (snapshots_.size() > limits_.snapshot_limit) snapshots_.erase(snapshots_.begin());
    } else if (op == "rollback") {
        const MutableState st = mutable_state_from_json(p.at("state"));
        for (const auto& [id, slots] : st.skills) {
            auto& s = skill_ref(id);
            s.mastery = slots.mastery;
            s.prompt_template = slots.prompt_template;
            s.strategy = slots.strategy;
        }
        // Bandits created after the snapshot go back to their pristine state.
        for (auto* m : {&routing_bandits_, &search_bandits_}) {
            const auto& saved = (m == &routing_bandits_) ? st.routing_bandits : st.search_bandits;
            for (auto& [ctx, b] : *m) {
                auto it = saved.find(ctx);
                if (it != saved.end()) {
                    b = it->second;
                } else {
                    for (auto& a : b.arms) a.successes = a.failures = a.pulls = 0;
                }
            }
        }
    } else {
        throw ValidationError("unknown event op '" + op + "'");
    }
}

// -- capability ---------------------------------------------------------------

NodeId KnowledgeGraph::add_skill(const std::string& name, double mastery, const std::string& prompt_template,
                                 const std::string& strategy) {
    std::unique_lock lock(mu_);
    require_writable();
    check_unit(mastery, "mastery");
    if (skills_.size() >= limits_.skill_cap)
        throw CapError("skill growth cap of " + std::to_string(limits_.skill_cap) + " reached");
    for (const auto& [_, s] : skills_)
        if (s.name == name) throw ValidationError("duplicate skill name '" + name + "'");
    const NodeId id = next_id_;
    commit("add_skill", {{"id", id},
                         {"name", name},
                         {"mastery", mastery},
                         {"prompt_template", prompt_template},
                         {"strategy", strategy}});
    return id;
}

bool KnowledgeGraph::reaches(NodeId from, NodeId to) const {
    std::set<NodeId> seen;
    std::vector<NodeId> stack{from};
    while (!stack.empty()) {
        const NodeId cur = stack.back();
        stack.pop_back();
        if (cur == to) return true;
        if (!seen.insert(cur).second) continue;
        for (const auto& [a, b] : prereq_edges_)
            if (a == cur) stack.push_back(b);
    }
    return false;
}

void KnowledgeGraph::add_prerequisite(NodeId from, NodeId to) {
    std::unique_lock lock(mu_);
    require_writable();
    skill_ref(from);
    skill_ref(to);
    if (std::find(prereq_edges_.begin(), prereq_edges_.end(), std::pair{from, to}) != prereq_edges_.end()) return;
    if (from == to || reaches(to, from))
        throw CycleError("prerequisite " + std::to_string(from) + " -> " + std::to_string(to) + " would create a cycle");
    commit("add_prerequisite", {{"from", from}, {"to", to}});
}

void KnowledgeGraph::set_mastery(NodeId skill, double mastery) {
    std::unique_lock lock(mu_);
    require_writable();
    check_unit(mastery, "mastery");
    const double prev = skill_ref(skill).mastery;
    commit("set_mastery", {{"skill", skill}, {"prev", prev}, {"value", mastery}});
}

void KnowledgeGraph::set_prompt_template(NodeId skill, const std::string& text) {
    std::unique_lock lock(mu_);
    require_writable();
    skill_ref(skill);
    commit("set_prompt_template", {{"skill", skill}, {"text", text}});
}

void KnowledgeGraph::set_strategy(NodeId skill, const std::string& text) {
    std::unique_lock lock(mu_);
    require_writable();
    skill_ref(skill);
    commit("set_strategy", {{"skill", skill}, {"text", text}});
}

std::optional<NodeId> KnowledgeGraph::attach_principle(NodeId skill, NodeId principle) {
    std::unique_lock lock(mu_);
    require_writable();
    const auto& s = skill_ref(skill);
    auto it = experience_.find(principle);
    if (it == experience_.end() || it->second.outcome != Outcome::principle)
        throw ValidationError("attach_principle: node " + std::to_string(principle) + " is not a principle");
    std::optional<NodeId> evicted;
    if (s.principle_ids.size() >= limits_.principle_cap) evicted = s.principle_ids.front();
    commit("attach_principle", {{"skill", skill}, {"principle", principle}, {"evicted", opt_id(evicted)}});
    return evicted;
}

// -- task -----------------------------------------------------------------------

NodeId KnowledgeGraph::add_task_type(const std::string& name, std::optional<NodeId> resolver_skill) {
    std::unique_lock lock(mu_);
    require_writable();
    if (resolver_skill) skill_ref(*resolver_skill);
    for (const auto& [_, t] : task_types_)
        if (t.name == name) throw ValidationError("duplicate task type '" + name + "'");
    const NodeId id = next_id_;
    commit("add_task_type", {{"id", id}, {"name", name}, {"resolver", opt_id(resolver_skill)}});
    return id;
}

void KnowledgeGraph::set_resolver(NodeId task_type, NodeId skill) {
    std::unique_lock lock(mu_);
    require_writable();
    task_ref(task_type);
    skill_ref(skill);
    commit("set_resolver", {{"task_type", task_type}, {"skill", skill}});
}

void KnowledgeGraph::mark_observed(NodeId task_type) {
    std::unique_lock lock(mu_);
    require_writable();
    if (task_ref(task_type).observed) return;
    commit("mark_observed", {{"task_type", task_type}});
}

void KnowledgeGraph::add_failures(NodeId task_type, std::uint64_t count) {
    std::unique_lock lock(mu_);
    require_writable();
    task_ref(task_type);
    if (count == 0) return;
    commit("add_failures", {{"task_type", task_type}, {"count", count}});
}

void KnowledgeGraph::mark_selected(NodeId task_type, std::int64_t k) {
    std::unique_lock lock(mu_);
    require_writable();
    const auto& t = task_ref(task_type);
    if (k < t.k_last) throw ValidationError("mark_selected: k_last may not move backwards");
    if (k > iteration_) throw ValidationError("mark_selected: k_last may not exceed the current iteration");
    commit("mark_selected", {{"task_type", task_type}, {"k", k}});
}

// -- experience -----------------------------------------------------------------

NodeId KnowledgeGraph::append_experience(ExperienceNode node) {
    std::unique_lock lock(mu_);
    require_writable();
    check_unit(node.confidence, "confidence");
    const auto expected_index = static_cast<std::size_t>(node.outcome);
    if (node.payload.index() != expected_index)
        throw ValidationError("experience payload does not match outcome '" + std::string(to_string(node.outcome)) +
                              "'");
    if (node.task_type_id) task_ref(*node.task_type_id);
    if (node.skill_id) skill_ref(*node.skill_id);
    node.id = next_id_;
    json nj = node;
    commit("append_experience", {{"node", nj}});
    return node.id;
}

std::vector<NodeId> KnowledgeGraph::prune_low_confidence(double threshold) {
    std::unique_lock lock(mu_);
    require_writable();
    check_unit(threshold, "prune threshold");
    std::vector<NodeId> removed;
    for (const auto& [id, n] : experience_)
        if (n.outcome == Outcome::abstracted_pattern && n.confidence < threshold) removed.push_back(id);
    if (!removed.empty()) commit("prune", {{"threshold", threshold}, {"removed", removed}});
    return removed;
}

// -- env ------------------------------------------------------------------------

NodeId KnowledgeGraph::add_env(EnvClass cls, const std::string& payload) {
    std::unique_lock lock(mu_);
    require_writable();
    const NodeId id = next_id_;
    commit("add_env", {{"id", id}, {"class", to_string(cls)}, {"payload", payload}});
    return id;
}

// -- bandits --------------------------------------------------------------------

void KnowledgeGraph::ensure_bandit(BanditScope scope, NodeId context, const BanditState& initial) {
    std::unique_lock lock(mu_);
    if (bandits(scope).count(context)) return;
    require_writable();
    json st = initial;
    commit("ensure_bandit", {{"scope", scope_name(scope)}, {"context_node", context}, {"state", st}});
}

void KnowledgeGraph::update_bandit(BanditScope scope, NodeId context, const std::string& arm, int reward) {
    std::unique_lock lock(mu_);
    require_writable();
    auto it = bandits(scope).find(context);
    if (it == bandits(scope).end()) throw NotFoundError("no bandit for context " + std::to_string(context));
    BanditState probe = it->second;
    update_arm(probe, arm, reward);  // validates arm and reward
    commit("update_bandit", {{"scope", scope_name(scope)}, {"context_node", context}, {"arm", arm}, {"reward", reward}});
}

std::optional<BanditState> KnowledgeGraph::bandit(BanditScope scope, NodeId context) const {
    std::shared_lock lock(mu_);
    auto it = bandits(scope).find(context);
    if (it == bandits(scope).end()) return std::nullopt;
    return it->second;
}

// -- snapshots ------------------------------------------------------------------

MutableState KnowledgeGraph::mutable_state_unlocked() const {
    MutableState s;
    for (const auto& [id, sk] : skills_) s.skills[id] = SkillSlots{sk.mastery, sk.prompt_template, sk.strategy};
    s.routing_bandits = routing_bandits_;
    s.search_bandits = search_bandits_;
    return s;
}

MutableState KnowledgeGraph::mutable_state() const {
    std::shared_lock lock(mu_);
    return mutable_state_unlocked();
}

SnapshotId KnowledgeGraph::snapshot() {
    std::unique_lock lock(mu_);
    require_writable();
    const SnapshotId id = next_snapshot_id_;
    commit("snapshot", {{"snapshot_id", id}});
    return id;
}

std::optional<Snapshot> KnowledgeGraph::find_snapshot(SnapshotId id) const {
    std::shared_lock lock(mu_);
    auto it = snapshots_.find(id);
    if (it == snapshots_.end()) return std::nullopt;
    return it->second;
}

void KnowledgeGraph::rollback_mutable(SnapshotId id) {
    std::unique_lock lock(mu_);
    require_writable();
    auto it = snapshots_.find(id);
    if (it == snapshots_.end()) throw NotFoundError("unknown snapshot " + std::to_string(id));
    json st = it->second.mutable_state;
    commit("rollback", {{"snapshot_id", id}, {"snapshot_iter", it->second.iteration}, {"state", st}});
}

// -- reads ------------------------------------------------------------------------

ProtectedCounts KnowledgeGraph::protected_counts_unlocked() const {
    ProtectedCounts c;
    for (const auto& [_, n] : experience_) {
        switch (n.outcome) {
            case Outcome::principle: ++c.principle; break;
            case Outcome::failure_memory: ++c.failure_memory; break;
            case Outcome::success_memory: ++c.success_memory; break;
            default: break;
        }
    }
    return c;
}

ProtectedCounts KnowledgeGraph::protected_counts() const {
    std::shared_lock lock(mu_);
    return protected_counts_unlocked();
}

SkillNode KnowledgeGraph::skill(NodeId id) const {
    std::shared_lock lock(mu_);
    auto it = skills_.find(id);
    if (it == skills_.end()) throw NotFoundError("unknown skill " + std::to_string(id));
    return it->second;
}

std::optional<SkillNode> KnowledgeGraph::find_skill_by_name(const std::string& name) const {
    std::shared_lock lock(mu_);
    for (const auto& [_, s] : skills_)
        if (s.name == name) return s;
    return std::nullopt;
}

std::vector<SkillNode> KnowledgeGraph::skills() const {
    std::shared_lock lock(mu_);
    std::vector<SkillNode> out;
    for (const auto& [_, s] : skills_) out.push_back(s);
    return out;
}

std::size_t KnowledgeGraph::skill_count() const {
    std::shared_lock lock(mu_);
    return skills_.size();
}

std::vector<std::pair<NodeId, NodeId>> KnowledgeGraph::prerequisites() const {
    std::shared_lock lock(mu_);
    return prereq_edges_;
}

std::vector<NodeId> KnowledgeGraph::prerequisites_of(NodeId skill) const {
    std::shared_lock lock(mu_);
    std::vector<NodeId> out;
    for (const auto& [a, b] : prereq_edges_)
        if (b == skill) out.push_back(a);
    std::sort(out.begin(), out.end());
    return out;
}

std::vector<NodeId> KnowledgeGraph::topological_order_unlocked() const {
    std::map<NodeId, int> indeg;
    for (const auto& [id, _] : skills_) indeg[id] = 0;
    for (const auto& [a, b] : prereq_edges_) ++indeg[b];
    std::priority_queue<NodeId, std::vector<NodeId>, std::greater<>> ready;
    for (const auto& [id, d] : indeg)
        if (d == 0) ready.push(id);
    std::vector<NodeId> order;
    while (!ready.empty()) {
        const NodeId cur = ready.top();
        ready.pop();
        order.push_back(cur);
        for (const auto& [a, b] : prereq_edges_)
            if (a == cur && --indeg[b] == 0) ready.push(b);
    }
    if (order.size() != skills_.size()) throw CycleError("skill graph contains a cycle");
    return order;
}

std::vector<NodeId> KnowledgeGraph::topological_order() const {
    std::shared_lock lock(mu_);
    return topological_order_unlocked();
}

TaskTypeNode KnowledgeGraph::task_type(NodeId id) const {
    std::shared_lock lock(mu_);
    auto it = task_types_.find(id);
    if (it == task_types_.end()) throw NotFoundError("unknown task type " + std::to_string(id));
    return it->second;
}

std::optional<TaskTypeNode> KnowledgeGraph::find_task_type_by_name(const std::string& name) const {
    std::shared_lock lock(mu_);
    for (const auto& [_, t] : task_types_)
        if (t.name == name) return t;
    return std::nullopt;
}

std::vector<TaskTypeNode> KnowledgeGraph::task_types() const {
    std::shared_lock lock(mu_);
    std::vector<TaskTypeNode> out;
    for (const auto& [_, t] : task_types_) out.push_back(t);
    return out;
}

bool KnowledgeGraph::has_experience(NodeId id) const {
    std::shared_lock lock(mu_);
    return experience_.count(id) != 0;
}

ExperienceNode KnowledgeGraph::experience(NodeId id) const {
    std::shared_lock lock(mu_);
    auto it = experience_.find(id);
    if (it == experience_.end()) throw NotFoundError("unknown experience node " + std::to_string(id));
    return it->second;
}

std::vector<ExperienceNode> KnowledgeGraph::experience_nodes() const {
    std::shared_lock lock(mu_);
    std::vector<ExperienceNode> out;
    for (const auto& [_, n] : experience_) out.push_back(n);
    return out;
}

std::vector<ExperienceNode> KnowledgeGraph::experience_by_outcome(Outcome o) const {
    std::shared_lock lock(mu_);
    std::vector<ExperienceNode> out;
    for (const auto& [_, n] : experience_)
        if (n.outcome == o) out.push_back(n);
    return out;
}

std::vector<EnvNode> KnowledgeGraph::env_nodes() const {
    std::shared_lock lock(mu_);
    std::vector<EnvNode> out;
    for (const auto& [_, n] : env_) out.push_back(n);
    return out;
}

// -- persistence ------------------------------------------------------------------

json KnowledgeGraph::to_json() const {
    std::shared_lock lock(mu_);
    json skills = json::array();
    for (const auto& [_, s] : skills_) skills.push_back(skill_to_json(s));
    json edges = json::array();
    for (const auto& [a, b] : prereq_edges_) edges.push_back({a, b});
    json tasks = json::array();
    for (const auto& [_, t] : task_types_) tasks.push_back(task_to_json(t));
    json exp = json::array();
    for (const auto& [_, n] : experience_) exp.push_back(n);
    json env = json::array();
    for (const auto& [_, e] : env_) env.push_back({{"id", e.id}, {"class", to_string(e.cls)}, {"payload", e.payload}});
    return {{"next_id", next_id_},
            {"skills", skills},
            {"prerequisites", edges},
            {"task_types", tasks},
            {"experience", exp},
            {"environment", env},
            {"routing_bandits", bandit_map_to_json(routing_bandits_)},
            {"search_bandits", bandit_map_to_json(search_bandits_)},
            {"protected_counts", protected_counts_unlocked()}};
}

std::string KnowledgeGraph::dump() const { return to_json().dump(); }

void KnowledgeGraph::apply_recorded(const Event& e) {
    std::unique_lock lock(mu_);
    require_writable();
    if (e.seq != log_.size() + 1) throw IntegrityError(e.seq, "expected seq " + std::to_string(log_.size() + 1));
    const auto saved_iter = iteration_;
    iteration_ = e.iter;
    try {
        apply(e.op, e.payload);
    } catch (const IntegrityError&) {
        throw;
    } catch (const std::exception& ex) {
        iteration_ = saved_iter;
        throw IntegrityError(e.seq, std::string(e.op) + ": " + ex.what());
    }
    log_.push_back(e);
    if (sink_) sink_(log_.back());
}

void KnowledgeGraph::replay_into(KnowledgeGraph& g, const std::vector<Event>& events) {
    for (const auto& e : events) g.apply_recorded(e);
}

}  // namespace coevo
