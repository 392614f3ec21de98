#include "coevo/engine.hpp"

#include <algorithm>
#include <cmath>

#include "coevo/curriculum.hpp"
#include "coevo/hash.hpp"

namespace coevo {

using nlohmann::json;

namespace {

constexpr double kGuardTol = 1e-12;
constexpr std::size_t kMaxErrorsPerCall = 8;

std::string trim(std::string_view s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string_view::npos) return {};
    const auto e = s.find_last_not_of(" \t\r\n");
    return std::string(s.substr(b, e - b + 1));
}

std::string scope_tag(BanditScope s) { return s == BanditScope::routing ? "routing" : "search"; }

ChatRequest make_request(const std::string& system, std::string user, double temperature,
                         std::optional<std::uint64_t> seed = std::nullopt) {
    ChatRequest r;
    r.messages = {{"system", system}, {"user", std::move(user)}};
    r.temperature = temperature;
    r.seed = seed;
    return r;
}

struct ParsedAnswer {
    std::string answer;
    std::string reasoning;
    std::vector<std::pair<std::string, std::string>> decomposition;
};

/// Accepts {"answer", "reasoning", "decomposition"} JSON; otherwise the text
/// after the last "A:" (or the whole reply) is the answer.
ParsedAnswer parse_answer(const std::string& text) {
    ParsedAnswer out;
    try {
        const json j = json::parse(text);
        if (j.is_object() && j.contains("answer")) {
            out.answer = trim(j.at("answer").is_string() ? j.at("answer").get<std::string>() : j.at("answer").dump());
            out.reasoning = j.value("reasoning", std::string());
            if (j.contains("decomposition") && j.at("decomposition").is_array())
                for (const auto& step : j.at("decomposition"))
                    if (step.is_array() && step.size() == 2 && step[0].is_string() && step[1].is_string())
                        out.decomposition.emplace_back(step[0].get<std::string>(), step[1].get<std::string>());
            return out;
        }
    } catch (const json::exception&) {
    }
    out.reasoning = text;
    const auto at = text.rfind("A:");
    out.answer = trim(at == std::string::npos ? std::string_view(text) : std::string_view(text).substr(at + 2));
    return out;
}

json errors_to_json(const std::vector<ErrorRecord>& errs) {
    json out = json::array();
    for (std::size_t i = 0; i < errs.size() && i < kMaxErrorsPerCall; ++i)
        out.push_back({{"question", errs[i].question},
                       {"wrong_answer", errs[i].wrong_answer},
                       {"correct_answer", errs[i].correct_answer}});
    return out;
}

}  // namespace

// ---------------------------------------------------------------------------
// Delta-guard
// ---------------------------------------------------------------------------

std::string_view to_string(RollbackKind k) noexcept {
    switch (k) {
        case RollbackKind::none: return "none";
        case RollbackKind::delta: return "delta";
        case RollbackKind::catastrophic: return "catastrophic";
    }
    return "none";
}

RollbackKind parse_rollback_kind(std::string_view s) {
    if (s == "none") return RollbackKind::none;
    if (s == "delta") return RollbackKind::delta;
    if (s == "catastrophic") return RollbackKind::catastrophic;
    throw ValidationError("unknown rollback kind '" + std::string(s) + "'");
}

GuardDecision delta_guard_rule(double acc_prev, double acc_new, double delta, double catastrophic) {
    if (!(acc_prev >= 0.0 && acc_prev <= 1.0) || !(acc_new >= 0.0 && acc_new <= 1.0))
        throw ValidationError("delta_guard: accuracies must lie in [0,1]");
    GuardDecision d;
    d.drop = acc_prev - acc_new;
    // A drop equal to delta (up to rounding in the subtraction) is kept.
    if (d.drop > delta + kGuardTol) {
        d.rolled_back = true;
        d.kind = d.drop > catastrophic + kGuardTol ? RollbackKind::catastrophic : RollbackKind::delta;
    }
    return d;
}

GuardDecision delta_guard(KnowledgeGraph& g, double acc_prev, double acc_new, SnapshotId snapshot,
                          const EngineConfig& config) {
    const GuardDecision d =
        delta_guard_rule(acc_prev, acc_new, config.per_iter_delta_guard, config.catastrophic_rollback_threshold);
    if (d.rolled_back) g.rollback_mutable(snapshot);
    return d;
}

// ---------------------------------------------------------------------------
// Critic
// ---------------------------------------------------------------------------

namespace {

void tally(CriticResult& r, std::span<const AnswerRecord> answers) {
    for (std::size_t i = 0; i < answers.size(); ++i) {
        auto& [correct, attempted] = r.correct_attempted[answers[i].skill];
        ++attempted;
        correct += static_cast<std::size_t>(r.rewards[i]);
    }
    for (const auto& [skill, ca] : r.correct_attempted)
        r.success_rate[skill] = static_cast<double>(ca.first) / static_cast<double>(ca.second);
}

}  // namespace

CriticResult critic_evaluate(std::span<const AnswerRecord> answers, Roster& roster, double temperature) {
    CriticResult r;
    r.rewards.assign(answers.size(), 0);
    r.flagged.assign(answers.size(), false);

    std::map<std::string, std::vector<std::size_t>> batches;
    for (std::size_t i = 0; i < answers.size(); ++i) batches[answers[i].task_type].push_back(i);

    for (const auto& [task_type, idx] : batches) {
        json items = json::array();
        for (std::size_t i : idx)
            items.push_back(
                {{"question", answers[i].question}, {"predicted", answers[i].predicted}, {"gold", answers[i].gold}});
        bool ok = false;
        try {
            const auto resp = roster.call(
                Agent::critic, make_request("task: judge\ntask_type: " + task_type + "\n",
                                            json{{"task_type", task_type}, {"items", items}}.dump(), temperature));
            const json j = json::parse(resp.text);
            const auto& scores = j.at("scores");
            if (scores.is_array() && scores.size() == idx.size()) {
                for (std::size_t n = 0; n < idx.size(); ++n) r.rewards[idx[n]] = scores[n].get<int>() == 1 ? 1 : 0;
                ok = true;
            }
        } catch (const BackendError&) {
        } catch (const json::exception&) {
        }
        if (!ok)
            for (std::size_t i : idx) {
                r.rewards[i] = 0;
                r.flagged[i] = true;
            }
    }
    tally(r, answers);
    return r;
}

CriticResult exact_match_evaluate(std::span<const AnswerRecord> answers) {
    CriticResult r;
    r.flagged.assign(answers.size(), false);
    for (const auto& a : answers) r.rewards.push_back(trim(a.predicted) == trim(a.gold) ? 1 : 0);
    tally(r, answers);
    return r;
}

// ---------------------------------------------------------------------------
// Reports and audit
// ---------------------------------------------------------------------------

json IterationReport::to_json() const {
    json questions_j = json::array();
    for (const auto& q : questions)
        questions_j.push_back({{"id", q.question_id},
                               {"task_type", q.task_type},
                               {"skill", q.skill},
                               {"routing_arm", q.routing_arm},
                               {"search_arm", q.search_arm},
                               {"bundle_size", q.bundle_size},
                               {"reward", q.reward},
                               {"flagged", q.flagged}});
    json selector = json::array();
    for (const auto& t : selector_input)
        selector.push_back({{"task_type", t.task_type_id}, {"n_fail", t.n_fail}, {"k_last", t.k_last}});
    json mastery_j = json::array();
    for (const auto& m : mastery)
        mastery_j.push_back({{"skill", m.skill}, {"prev", m.prev}, {"evidence", m.evidence}, {"value", m.value}});
    json j = {{"iter", iter},
              {"phase", phase},
              {"selected_frontier", selected_frontier},
              {"selector_input", selector},
              {"selected_task_types", selected_task_types},
              {"evolve_action", evolve_action},
              {"questions", questions_j},
              {"accuracy", accuracy},
              {"prev_accuracy", prev_accuracy ? json(*prev_accuracy) : json(nullptr)},
              {"appended", appended},
              {"pruned", pruned},
              {"mastery", mastery_j},
              {"rollback", to_string(rollback)},
              {"drop", drop},
              {"snapshot_id", snapshot_id ? json(*snapshot_id) : json(nullptr)},
              {"calls", calls.to_json()},
              {"errors", errors},
              {"explored", explored},
              {"skills", skills},
              {"failure_memories", failure_memories},
              {"success_memories", success_memories},
              {"observed_types", observed_types},
              {"covered_types", covered_types},
              {"protected_counts", protected_counts}};
    return j;
}

IterationReport IterationReport::from_json(const json& j) {
    IterationReport r;
    try {
        r.iter = j.at("iter").get<std::int64_t>();
        r.phase = j.at("phase").get<std::string>();
        r.selected_frontier = j.at("selected_frontier").get<std::vector<std::string>>();
        for (const auto& t : j.at("selector_input"))
            r.selector_input.push_back(
                {t.at("task_type").get<std::string>(), t.at("n_fail").get<std::uint64_t>(), t.at("k_last").get<std::int64_t>()});
        r.selected_task_types = j.at("selected_task_types").get<std::vector<std::string>>();
        r.evolve_action = j.at("evolve_action").get<std::string>();
        for (const auto& q : j.at("questions"))
            r.questions.push_back({q.at("id"), q.at("task_type"), q.at("skill"), q.at("routing_arm"),
                                   q.at("search_arm"), q.at("bundle_size").get<std::size_t>(), q.at("reward").get<int>(),
                                   q.at("flagged").get<bool>()});
        r.accuracy = j.at("accuracy").get<double>();
        if (!j.at("prev_accuracy").is_null()) r.prev_accuracy = j.at("prev_accuracy").get<double>();
        r.appended = j.at("appended").get<std::map<std::string, std::vector<NodeId>>>();
        r.pruned = j.at("pruned").get<std::vector<NodeId>>();
        for (const auto& m : j.at("mastery"))
            r.mastery.push_back({m.at("skill"), m.at("prev").get<double>(), m.at("evidence").get<double>(),
                                 m.at("value").get<double>()});
        r.rollback = parse_rollback_kind(j.at("rollback").get<std::string>());
        r.drop = j.at("drop").get<double>();
        if (!j.at("snapshot_id").is_null()) r.snapshot_id = j.at("snapshot_id").get<SnapshotId>();
        r.calls = CallCounts::from_json(j.at("calls"));
        r.errors = j.at("errors").get<std::vector<std::string>>();
        r.explored = j.at("explored").get<bool>();
        r.skills = j.at("skills").get<std::size_t>();
        r.failure_memories = j.at("failure_memories").get<std::uint64_t>();
        r.success_memories = j.at("success_memories").get<std::uint64_t>();
        r.observed_types = j.at("observed_types").get<std::size_t>();
        r.covered_types = j.at("covered_types").get<std::size_t>();
        const auto& pc = j.at("protected_counts");
        r.protected_counts = {pc.at("principle").get<std::uint64_t>(), pc.at("failure_memory").get<std::uint64_t>(),
                              pc.at("success_memory").get<std::uint64_t>()};
    } catch (const json::exception& e) {
        throw ValidationError(std::string("malformed iteration report: ") + e.what());
    }
    return r;
}

json CallAudit::to_json() const {
    return {{"guidance_fraction_train", guidance_fraction_train},
            {"guidance_fraction_infer", guidance_fraction_infer},
            {"train", train.to_json()},
            {"infer", infer.to_json()}};
}

CallAudit call_audit(std::span<const IterationReport> reports) {
    if (reports.empty()) throw ValidationError("call_audit: no reports");
    CallAudit a;
    for (const auto& r : reports) (r.phase == "infer" ? a.infer : a.train) += r.calls;
    auto fraction = [](const CallCounts& c) {
        const auto total = c.total();
        return total == 0 ? 0.0
                          : static_cast<double>(c.tier_total(Tier::guidance)) / static_cast<double>(total);
    };
    a.guidance_fraction_train = fraction(a.train);
    a.guidance_fraction_infer = fraction(a.infer);
    return a;
}

json EvalResult::to_json() const {
    json by_type = json::object();
    for (const auto& [t, ca] : by_task_type) by_type[t] = {{"correct", ca.first}, {"total", ca.second}};
    return {{"accuracy", accuracy}, {"correct", correct}, {"total", total}, {"calls", calls.to_json()},
            {"by_task_type", by_type}};
}

// ---------------------------------------------------------------------------
// Bandit helpers
// ---------------------------------------------------------------------------

std::uint64_t bandit_seed(std::uint64_t run_seed, BanditScope scope, NodeId context) {
    return mix_seed({run_seed, fnv1a64(scope_tag(scope)), context});
}

const std::string& select_arm_pending(const BanditState& state, const std::map<std::string, std::uint64_t>& pending,
                                      std::uint64_t salt) {
    if (state.arms.empty()) throw ValidationError("select_arm: bandit '" + state.context_id + "' has no arms");
    auto effective = [&](const ArmStats& a) {
        auto it = pending.find(a.arm_id);
        return a.pulls + (it == pending.end() ? 0 : it->second);
    };
    const bool warm = std::any_of(state.arms.begin(), state.arms.end(),
                                  [&](const ArmStats& a) { return effective(a) < state.warmup_per_arm; });
    if (!warm) return select_arm(state, salt);
    std::size_t best = 0;
    for (std::size_t i = 1; i < state.arms.size(); ++i)
        if (effective(state.arms[i]) < effective(state.arms[best])) best = i;
    return state.arms[best].arm_id;
}

// ---------------------------------------------------------------------------
// Engine
// ---------------------------------------------------------------------------

EvolveAction evolve_action_for(std::int64_t iter) noexcept {
    static constexpr EvolveAction rotation[] = {EvolveAction::principle_extraction, EvolveAction::prompt_refinement,
                                                EvolveAction::tool_authoring, EvolveAction::skill_splitting};
    const auto i = ((iter % 4) + 4) % 4;
    return rotation[i];
}

std::string_view to_string(EvolveAction a) noexcept {
    switch (a) {
        case EvolveAction::principle_extraction: return "principle_extraction";
        case EvolveAction::prompt_refinement: return "prompt_refinement";
        case EvolveAction::tool_authoring: return "tool_authoring";
        case EvolveAction::skill_splitting: return "skill_splitting";
    }
    return "?";
}

Engine::Engine(EngineConfig config, const SyntheticEnv& env, KnowledgeGraph& graph, Roster& roster,
               std::shared_ptr<Embedder> embedder)
    : config_(std::move(config)),
      env_(env),
      graph_(graph),
      roster_(roster),
      embedder_(std::move(embedder)),
      counting_(embedder_, roster_),
      memory_(embedder_->dimension(), config_.memory()) {
    config_.validate();
    refresh_memory();
}

void Engine::refresh_memory() {
    memory_.rebuild(graph_, counting_);
    harvested_questions_.clear();
    for (const auto& n : graph_.experience_by_outcome(Outcome::success_memory))
        harvested_questions_.insert(std::get<SuccessPayload>(n.payload).question);
}

json Engine::guidance_call(Agent agent, const std::string& task, const json& input) {
    const auto resp =
        roster_.call(agent, make_request("task: " + task + "\n", input.dump(), config_.train_temperature));
    try {
        json j = json::parse(resp.text);
        if (!j.is_object()) throw BackendError(task + ": reply is not a JSON object");
        return j;
    } catch (const json::exception& e) {
        throw BackendError(task + ": malformed reply: " + e.what());
    }
}

void Engine::bootstrap() {
    if (graph_.skill_count() > 0) return;
    json skills = json::array();
    for (const auto& s : env_.skills()) skills.push_back({{"name", s.name}, {"prerequisites", s.prerequisites}});
    const json reply = guidance_call(Agent::skill_discovery, "skill_discovery", {{"skills", skills}});

    std::vector<std::pair<std::string, std::vector<std::string>>> induced;
    for (const auto& s : reply.at("skills"))
        induced.emplace_back(s.at("name").get<std::string>(),
                             s.value("prerequisites", std::vector<std::string>{}));
    for (const auto& [name, _] : induced) graph_.add_skill(name);
    for (const auto& [name, prereqs] : induced) {
        const auto to = graph_.find_skill_by_name(name)->id;
        for (const auto& p : prereqs) {
            const auto from = graph_.find_skill_by_name(p);
            if (!from) throw ValidationError("skill discovery: unknown prerequisite '" + p + "'");
            graph_.add_prerequisite(from->id, to);
        }
    }
    for (const auto& tt : env_.task_types()) {
        const auto resolver = graph_.find_skill_by_name(tt.resolver_skill);
        graph_.add_task_type(tt.name, resolver ? std::optional<NodeId>(resolver->id) : std::nullopt);
    }
}

NodeId Engine::task_type_id(const std::string& name) const {
    const auto tt = graph_.find_task_type_by_name(name);
    if (!tt) throw ValidationError("question carries undeclared task type '" + name + "'");
    return tt->id;
}

NodeId Engine::resolver_of(NodeId task_type) const {
    const auto tt = graph_.task_type(task_type);
    if (!tt.resolver_skill_id) throw ValidationError("task type '" + tt.name + "' has no resolver skill");
    return *tt.resolver_skill_id;
}

void Engine::ensure_bandits(NodeId skill, NodeId task_type) {
    if (!graph_.bandit(BanditScope::routing, skill))
        graph_.ensure_bandit(BanditScope::routing, skill,
                             make_bandit(graph_.skill(skill).name, config_.routing_arms,
                                         config_.search_bandit_warmup_pulls_per_arm,
                                         bandit_seed(config_.seed, BanditScope::routing, skill)));
    if (!graph_.bandit(BanditScope::search, task_type))
        graph_.ensure_bandit(BanditScope::search, task_type,
                             make_bandit(graph_.task_type(task_type).name, config_.search_arms,
                                         config_.search_bandit_warmup_pulls_per_arm,
                                         bandit_seed(config_.seed, BanditScope::search, task_type)));
}

void Engine::note_append(IterationReport& report, NodeId id) {
    report.appended[std::string(to_string(graph_.experience(id).outcome))].push_back(id);
}

MemoryBundle Engine::bundle_for(const Question& q) {
    const NodeId tt = task_type_id(q.task_type);
    return memory_.retrieve_bundle(graph_, counting_.embed(q.text), tt, q.context.size(),
                                   config_.memory_retrieval_top_k);
}

ChatRequest Engine::answer_request(const Question& q, const std::string& routing_arm, const std::string& search_arm,
                                   double temperature, std::uint64_t seed, bool retrieval,
                                   std::size_t* bundle_size) {
    const NodeId tt = task_type_id(q.task_type);
    const NodeId skill = resolver_of(tt);
    const SkillNode sk = graph_.skill(skill);
    const bool cascade = search_arm == "cascade";

    std::string system = "task: answer\nskill: " + sk.name + "\nstrategy: " + routing_arm + "\n";
    if (!sk.prompt_template.empty()) system += "instructions: " + sk.prompt_template + "\n";
    if (cascade)
        for (const auto& p : cascade_principles(graph_, skill))
            system += "principle: " + std::get<PrinciplePayload>(p.payload).text + "\n";

    MemoryBundle bundle;
    if (retrieval) bundle = bundle_for(q);
    if (bundle_size) *bundle_size = bundle.size();
    const std::string lattice = cascade ? render_skill_lattice(graph_, tt, config_.lattice_depth_cap) : std::string();
    return make_request(system, format_bundle(bundle, q.text, q.context, lattice), temperature, seed);
}

std::vector<std::string> Engine::plan(std::int64_t k, IterationReport& report) {
    const auto frontier = learnable_frontier(graph_, config_.theta);
    if (frontier.empty()) return {};
    json items = json::array();
    std::map<std::string, NodeId> by_name;
    for (NodeId id : frontier) {
        const auto s = graph_.skill(id);
        items.push_back({{"name", s.name}, {"mastery", s.mastery}});
        by_name[s.name] = id;
    }
    std::vector<std::string> order;
    try {
        const json reply = guidance_call(Agent::navigator, "navigator", {{"iteration", k}, {"frontier", items}});
        // Stage 2 may reorder or drop frontier skills, never add new ones.
        for (const auto& n : reply.at("order")) {
            const auto name = n.get<std::string>();
            if (by_name.count(name) && std::find(order.begin(), order.end(), name) == order.end())
                order.push_back(name);
        }
    } catch (const BackendError& e) {
        report.errors.push_back(std::string("navigator: ") + e.what());
        order.clear();
    } catch (const json::exception& e) {
        report.errors.push_back(std::string("navigator: ") + e.what());
        order.clear();
    }
    if (order.empty())
        for (const auto& item : items) order.push_back(item.at("name"));
    return order;
}

void Engine::explore(std::int64_t k, const std::vector<std::string>& frontier, IterationReport& report) {
    const auto& chain = env_.achievements();
    if (chain.empty()) return;
    const std::string requested_name = frontier.empty() ? chain.back() : frontier.front();
    const auto requested = graph_.find_skill_by_name(requested_name);
    if (!requested) return;
    const SkillNode target = graph_.skill(curriculum_override(graph_, requested->id, config_.theta));
    if (std::find(chain.begin(), chain.end(), target.name) == chain.end()) return;

    std::vector<std::string> mastered;
    for (const auto& s : graph_.skills())
        if (s.mastery >= config_.theta) mastered.push_back(s.name);

    const auto resp = roster_.call(
        Agent::explorer,
        make_request("task: explore\n", json{{"target", target.name}, {"mastered", mastered}, {"iteration", k}}.dump(),
                     config_.train_temperature, mix_seed({config_.seed, static_cast<std::uint64_t>(k), 0xe4ULL})));
    report.explored = true;
    json j;
    try {
        j = json::parse(resp.text);
    } catch (const json::exception& e) {
        report.errors.push_back(std::string("explorer: malformed reply: ") + e.what());
        return;
    }
    graph_.add_env(EnvClass::observation, j.value("observation", std::string()));

    const auto tt = graph_.find_task_type_by_name("achieve_" + target.name);
    ExperienceNode pattern;
    pattern.outcome = Outcome::abstracted_pattern;
    if (tt) pattern.task_type_id = tt->id;
    pattern.skill_id = target.id;
    pattern.confidence = std::clamp(j.value("pattern_confidence", 0.0), 0.0, 1.0);
    pattern.created_iter = k;
    pattern.payload = PatternPayload{j.value("pattern", std::string())};
    note_append(report, graph_.append_experience(std::move(pattern)));

    const auto actions = j.value("actions", std::vector<std::string>{});
    if (j.value("achieved", false) && !actions.empty())
        note_append(report, record_action_recipe(graph_, target.id, actions, config_.memory().recipe_window));
}

std::vector<NodeId> Engine::evolve_step(std::int64_t k, const std::vector<std::string>& selected,
                                        const std::map<std::string, std::vector<ErrorRecord>>& errors,
                                        IterationReport& report) {
    const EvolveAction action = evolve_action_for(k);
    std::vector<NodeId> appended;
    auto append = [&](ExperienceNode n) {
        const NodeId id = graph_.append_experience(std::move(n));
        note_append(report, id);
        appended.push_back(id);
        return id;
    };

    for (const auto& tt_name : selected) {
        auto it = errors.find(tt_name);
        if (it == errors.end() || it->second.empty()) continue;
        const NodeId tt = task_type_id(tt_name);
        const NodeId skill = resolver_of(tt);
        const SkillNode sk = graph_.skill(skill);
        const json input = {{"task_type", tt_name}, {"skill", sk.name}, {"errors", errors_to_json(it->second)}};

        try {
            const json reply = guidance_call(Agent::skill_discovery, "failure_memory", input);
            for (const auto& m : reply.at("memories")) {
                ExperienceNode n;
                n.outcome = Outcome::failure_memory;
                n.task_type_id = tt;
                n.skill_id = skill;
                n.confidence = 1.0;
                n.created_iter = k;
                n.payload = FailurePayload{m.at("question"), m.at("wrong_answer"), m.at("corrective_reasoning"),
                                           m.at("correct_answer"), parse_failure_kind(m.at("kind").get<std::string>())};
                const NodeId id = append(std::move(n));
                memory_.index_failure(graph_, counting_, id);
            }
        } catch (const json::exception& e) {
            report.errors.push_back("failure_memory(" + tt_name + "): " + e.what());
        } catch (const ValidationError& e) {
            report.errors.push_back("failure_memory(" + tt_name + "): " + e.what());
        }

        try {
            switch (action) {
                case EvolveAction::principle_extraction: {
                    const json reply = guidance_call(Agent::skill_discovery, "principle", input);
                    ExperienceNode n;
                    n.outcome = Outcome::principle;
                    n.task_type_id = tt;
                    n.skill_id = skill;
                    n.created_iter = k;
                    n.payload = PrinciplePayload{reply.at("principle").get<std::string>()};
                    graph_.attach_principle(skill, append(std::move(n)));
                    break;
                }
                case EvolveAction::prompt_refinement: {
                    json in = input;
                    in["current"] = sk.prompt_template;
                    const json reply = guidance_call(Agent::curator, "prompt_refinement", in);
                    graph_.set_prompt_template(skill, reply.at("prompt_template").get<std::string>());
                    break;
                }
                case EvolveAction::tool_authoring: {
                    const json reply = guidance_call(Agent::skill_discovery, "tool_authoring", input);
                    ExperienceNode n;
                    n.outcome = Outcome::retrieval_recipe;
                    n.task_type_id = tt;
                    n.skill_id = skill;
                    n.created_iter = k;
                    n.payload = RecipePayload{reply.at("name").get<std::string>(),
                                              reply.at("description").get<std::string>(), {}};
                    append(std::move(n));
                    break;
                }
                case EvolveAction::skill_splitting: {
                    const json reply = guidance_call(Agent::curator, "skill_split", input);
                    if (!reply.contains("name") || !reply.at("name").is_string()) break;
                    const auto name = reply.at("name").get<std::string>();
                    if (name.empty() || graph_.find_skill_by_name(name)) break;
                    const NodeId child = graph_.add_skill(name);
                    graph_.add_prerequisite(skill, child);
                    break;
                }
            }
        } catch (const CapError& e) {
            report.errors.push_back(std::string(to_string(action)) + "(" + tt_name + "): " + e.what());
        } catch (const json::exception& e) {
            report.errors.push_back(std::string(to_string(action)) + "(" + tt_name + "): " + e.what());
        }
    }
    return appended;
}

void Engine::fill_growth(IterationReport& report) const {
    const auto counts = graph_.protected_counts();
    report.protected_counts = counts;
    report.skills = graph_.skill_count();
    report.failure_memories = counts.failure_memory;
    report.success_memories = counts.success_memory;
    report.observed_types = 0;
    report.covered_types = 0;
    for (const auto& t : graph_.task_types()) {
        if (!t.observed) continue;
        ++report.observed_types;
        if (t.k_last >= 0) ++report.covered_types;
    }
}

IterationReport Engine::run_iteration(std::int64_t k) {
    if (graph_.frozen()) throw InvariantBreach("run_iteration on a frozen graph");
    IterationReport report;
    report.iter = k;
    report.prev_accuracy = prev_accuracy_;
    graph_.set_iteration(k);

    try {
        if (k > 0 && k % config_.memory_refresh_gap == 0) refresh_memory();
        const SnapshotId snap = graph_.snapshot();
        report.snapshot_id = snap;

        // PLAN
        report.selected_frontier = plan(k, report);

        // EXPLORE (sequential environments only)
        if (env_.mode() == EnvMode::sequential) explore(k, report.selected_frontier, report);

        // EVALUATE against the graph as it stood after the previous iteration.
        const auto pool = env_.evolution_pool(k, config_.evaluation_pool_per_iteration);
        std::vector<AnswerRecord> answers;
        std::vector<ParsedAnswer> parsed;
        std::map<NodeId, std::map<std::string, std::uint64_t>> pending_routing, pending_search;
        const std::uint64_t learner_seed = mix_seed({config_.seed, static_cast<std::uint64_t>(k), 0x1ea4ULL});
        for (std::size_t i = 0; i < pool.size(); ++i) {
            const Question& q = pool[i];
            const NodeId tt = task_type_id(q.task_type);
            if (!graph_.task_type(tt).observed) graph_.mark_observed(tt);
            const NodeId skill = resolver_of(tt);
            ensure_bandits(skill, tt);
            const auto routing = graph_.bandit(BanditScope::routing, skill);
            const auto search = graph_.bandit(BanditScope::search, tt);
            const std::string r_arm = select_arm_pending(*routing, pending_routing[skill], i);
            const std::string s_arm = select_arm_pending(*search, pending_search[tt], i);
            ++pending_routing[skill][r_arm];
            ++pending_search[tt][s_arm];

            std::size_t bundle_size = 0;
            const ChatRequest req =
                answer_request(q, r_arm, s_arm, config_.train_temperature, learner_seed, true, &bundle_size);
            const auto resp = roster_.call(Agent::learner, req);
            parsed.push_back(parse_answer(resp.text));
            answers.push_back({q.text, parsed.back().answer, q.gold, q.task_type, graph_.skill(skill).name});

            QuestionOutcome qo;
            qo.question_id = q.id;
            qo.task_type = q.task_type;
            qo.skill = answers.back().skill;
            qo.routing_arm = r_arm;
            qo.search_arm = s_arm;
            qo.bundle_size = bundle_size;
            report.questions.push_back(std::move(qo));
        }

        const CriticResult critic = critic_evaluate(answers, roster_);
        std::size_t correct = 0;
        for (std::size_t i = 0; i < answers.size(); ++i) {
            report.questions[i].reward = critic.rewards[i];
            report.questions[i].flagged = critic.flagged[i];
            correct += static_cast<std::size_t>(critic.rewards[i]);
        }
        double accuracy = answers.empty() ? 0.0 : static_cast<double>(correct) / static_cast<double>(answers.size());
        if (hooks_.accuracy_override) accuracy = std::clamp(hooks_.accuracy_override(k, accuracy), 0.0, 1.0);
        report.accuracy = accuracy;

        // UPDATE: one reward stream, applied in question order.
        std::map<std::string, std::vector<ErrorRecord>> errors;
        std::map<NodeId, std::uint64_t> fail_counts;
        for (std::size_t i = 0; i < pool.size(); ++i) {
            const Question& q = pool[i];
            const NodeId tt = task_type_id(q.task_type);
            const NodeId skill = resolver_of(tt);
            const int reward = critic.rewards[i];
            if (reward == 1) {
                if (harvested_questions_.insert(q.text).second) {
                    SuccessHarvest h{q.text, parsed[i].reasoning, parsed[i].answer, parsed[i].decomposition, tt,
                                     skill, k};
                    note_append(report, memory_.harvest_success(graph_, counting_, h));
                }
            } else {
                ++fail_counts[tt];
                errors[q.task_type].push_back({q.text, parsed[i].answer, q.gold});
            }
            graph_.update_bandit(BanditScope::routing, skill, report.questions[i].routing_arm, reward);
            graph_.update_bandit(BanditScope::search, tt, report.questions[i].search_arm, reward);
        }
        for (const auto& [tt, n] : fail_counts) graph_.add_failures(tt, n);

        const RatchetParams ratchet = config_.ratchet();
        for (const auto& [skill_name, e] : critic.success_rate) {
            const auto s = graph_.find_skill_by_name(skill_name);
            if (!s) continue;
            const double m = mastery_update(s->mastery, e, ratchet);
            graph_.set_mastery(s->id, m);
            report.mastery.push_back({skill_name, s->mastery, e, m});
        }

        // EVOLVE
        for (const auto& t : graph_.task_types())
            if (t.observed) report.selector_input.push_back({t.name, t.n_fail, t.k_last});
        report.selected_task_types = round_robin_select(report.selector_input, k, config_.selector());
        for (const auto& name : report.selected_task_types) graph_.mark_selected(task_type_id(name), k);
        report.evolve_action = std::string(to_string(evolve_action_for(k)));
        evolve_step(k, report.selected_task_types, errors, report);
        report.pruned = graph_.prune_low_confidence(config_.prune_threshold);

        // Delta-guard against the last accepted iteration.
        if (prev_accuracy_) {
            const GuardDecision d = delta_guard(graph_, *prev_accuracy_, accuracy, snap, config_);
            report.rollback = d.kind;
            report.drop = d.drop;
            if (!d.rolled_back) prev_accuracy_ = accuracy;
        } else {
            prev_accuracy_ = accuracy;
        }
    } catch (const BackendError& e) {
        report.calls = roster_.take();
        fill_growth(report);
        throw IterationError("iteration " + std::to_string(k) + " failed: " + e.what(), std::move(report));
    }

    report.calls = roster_.take();
    fill_growth(report);
    return report;
}

EvalResult Engine::evaluate_frozen(std::span<const Question> pool, bool retrieval) {
    graph_.freeze();
    roster_.take();
    const bool was_infer = roster_.inference_mode();
    roster_.set_inference_mode(true);
    EvalResult out;
    std::vector<AnswerRecord> answers;
    const std::uint64_t seed = mix_seed({config_.seed, 0xe7a1ULL});
    try {
        for (std::size_t i = 0; i < pool.size(); ++i) {
            const Question& q = pool[i];
            const NodeId tt = task_type_id(q.task_type);
            const NodeId skill = resolver_of(tt);
            const auto routing = graph_.bandit(BanditScope::routing, skill);
            const auto search = graph_.bandit(BanditScope::search, tt);
            const std::string r_arm = routing ? select_arm(*routing, i) : config_.routing_arms.front();
            const std::string s_arm = search ? select_arm(*search, i) : config_.search_arms.front();
            const auto resp =
                roster_.call(Agent::learner, answer_request(q, r_arm, s_arm, config_.eval_temperature, seed, retrieval));
            answers.push_back({q.text, parse_answer(resp.text).answer, q.gold, q.task_type, graph_.skill(skill).name});
        }
    } catch (...) {
        roster_.set_inference_mode(was_infer);
        throw;
    }
    roster_.set_inference_mode(was_infer);

    const CriticResult scored = exact_match_evaluate(answers);
    for (std::size_t i = 0; i < answers.size(); ++i) {
        auto& [c, n] = out.by_task_type[answers[i].task_type];
        ++n;
        c += static_cast<std::size_t>(scored.rewards[i]);
        out.correct += static_cast<std::size_t>(scored.rewards[i]);
    }
    out.total = answers.size();
    out.accuracy = out.total == 0 ? 0.0 : static_cast<double>(out.correct) / static_cast<double>(out.total);
    out.calls = roster_.take();
    return out;
}

}  // namespace coevo
