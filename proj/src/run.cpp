#include "coevo/run.hpp"

#include <algorithm>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "coevo/curriculum.hpp"
#include "coevo/errors.hpp"
#include "coevo/hash.hpp"
#include "coevo/simulated.hpp"

namespace coevo {

using nlohmann::json;

namespace {

json read_json_file(const fs::path& p) {
    std::ifstream in(p);
    if (!in) throw ValidationError("cannot open " + p.string());
    try {
        return json::parse(in);
    } catch (const json::exception& e) {
        throw ValidationError(p.string() + ": " + e.what());
    }
}

void write_file(const fs::path& p, const std::string& text) {
    const fs::path tmp = p.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::trunc);
        if (!out) throw ValidationError("cannot write " + tmp.string());
        out << text;
    }
    fs::rename(tmp, p);
}

void append_line(const fs::path& p, const std::string& line) {
    std::ofstream out(p, std::ios::app);
    if (!out) throw ValidationError("cannot append to " + p.string());
    out << line << '\n';
}

std::vector<std::string> read_lines(const fs::path& p) {
    std::vector<std::string> lines;
    std::ifstream in(p);
    if (!in) return lines;
    std::string line;
    while (std::getline(in, line))
        if (!line.empty()) lines.push_back(line);
    return lines;
}

RunPaths require_run(const fs::path& run_dir) {
    RunPaths paths{run_dir};
    if (!fs::exists(paths.config())) throw ValidationError(run_dir.string() + " is not an initialized run directory");
    return paths;
}

/// Latest snapshot file, by iteration.
std::optional<std::pair<std::int64_t, fs::path>> latest_snapshot(const RunPaths& paths) {
    std::optional<std::pair<std::int64_t, fs::path>> best;
    if (!fs::exists(paths.snapshots())) return best;
    for (const auto& entry : fs::directory_iterator(paths.snapshots())) {
        const auto name = entry.path().filename().string();
        if (name.rfind("snap-", 0) != 0 || entry.path().extension() != ".json") continue;
        const auto iter = std::stoll(name.substr(5, name.size() - 10));
        if (!best || iter > best->first) best = {iter, entry.path()};
    }
    return best;
}

std::vector<fs::path> snapshot_files(const RunPaths& paths) {
    std::vector<fs::path> out;
    if (!fs::exists(paths.snapshots())) return out;
    for (const auto& entry : fs::directory_iterator(paths.snapshots()))
        if (entry.path().filename().string().rfind("snap-", 0) == 0) out.push_back(entry.path());
    std::sort(out.begin(), out.end());
    return out;
}

std::string env_name_of(const RunPaths& paths) {
    if (!fs::exists(paths.meta())) return {};
    return read_json_file(paths.meta()).value("env", std::string());
}

}  // namespace

fs::path RunPaths::snapshot(std::int64_t iter) const {
    char name[32];
    std::snprintf(name, sizeof name, "snap-%05lld.json", static_cast<long long>(iter));
    return snapshots() / name;
}

std::string graph_hash(const KnowledgeGraph& g) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a64(g.dump())));
    return buf;
}

BackendSet make_backends(const EngineConfig& config, const SyntheticEnv& env) {
    std::string kind = config.backend;
    if (const char* b = std::getenv("COEVO_BACKEND"); b && *b) kind = b;

    BackendSet set;
    auto embed_ep = Endpoint::from_env("COEVO_EMBEDDER");
    set.embedder = embed_ep ? std::shared_ptr<Embedder>(std::make_shared<HttpEmbedder>(*embed_ep,
                                                                                       config.embedding_dimension))
                            : std::make_shared<HashEmbedder>(config.embedding_dimension);
    if (kind == "simulated") {
        set.guidance = std::make_shared<SimulatedGuidance>();
        set.execution = std::make_shared<SimulatedExecution>(env);
        return set;
    }
    if (kind != "http") throw ValidationError("unknown backend '" + kind + "'");
    auto g = Endpoint::from_env("COEVO_GUIDANCE");
    auto e = Endpoint::from_env("COEVO_EXECUTION");
    if (!g || !e) throw ValidationError("http backend needs COEVO_GUIDANCE_URL and COEVO_EXECUTION_URL");
    set.guidance = std::make_shared<HttpBackend>(*g);
    set.execution = std::make_shared<HttpBackend>(*e);
    if (auto j = Endpoint::from_env("COEVO_JUDGE")) set.judge = std::make_shared<HttpBackend>(*j);
    return set;
}

EngineConfig load_config(const fs::path& path) { return EngineConfig::from_json(read_json_file(path)); }

RunPaths cmd_init(const fs::path& run_dir, const EngineConfig& config) {
    config.validate();
    RunPaths paths{run_dir};
    if (fs::exists(paths.config())) throw ValidationError(run_dir.string() + " is already initialized");
    fs::create_directories(paths.snapshots());
    write_file(paths.config(), config.to_json().dump(2) + "\n");
    write_file(paths.events(), "");
    write_file(paths.reports(), "");
    return paths;
}

// ---------------------------------------------------------------------------

std::vector<Event> read_events(const fs::path& path) {
    std::vector<Event> events;
    std::ifstream in(path);
    if (!in) throw ValidationError("cannot open " + path.string());
    std::string line;
    std::uint64_t expected = 1;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        Event e;
        try {
            e = Event::from_json(json::parse(line));
        } catch (const std::exception& ex) {
            throw IntegrityError(expected, std::string("unreadable record: ") + ex.what());
        }
        if (e.seq != expected) throw IntegrityError(e.seq, "expected seq " + std::to_string(expected));
        ++expected;
        events.push_back(std::move(e));
    }
    return events;
}

std::vector<IterationReport> read_reports(const fs::path& path) {
    std::vector<IterationReport> out;
    for (const auto& line : read_lines(path)) {
        try {
            out.push_back(IterationReport::from_json(json::parse(line)));
        } catch (const json::exception& e) {
            throw ValidationError(path.string() + ": " + e.what());
        }
    }
    return out;
}

json EvalRecord::to_json() const {
    return {{"result", result.to_json()},
            {"graph_hash_before", graph_hash_before},
            {"graph_hash_after", graph_hash_after},
            {"retrieval", retrieval}};
}

std::vector<EvalRecord> read_evals(const fs::path& path) {
    std::vector<EvalRecord> out;
    for (const auto& line : read_lines(path)) {
        const json j = json::parse(line);
        EvalRecord r;
        r.result.accuracy = j.at("result").at("accuracy").get<double>();
        r.result.correct = j.at("result").at("correct").get<std::size_t>();
        r.result.total = j.at("result").at("total").get<std::size_t>();
        r.result.calls = CallCounts::from_json(j.at("result").at("calls"));
        r.graph_hash_before = j.at("graph_hash_before");
        r.graph_hash_after = j.at("graph_hash_after");
        r.retrieval = j.at("retrieval");
        out.push_back(std::move(r));
    }
    return out;
}

// ---------------------------------------------------------------------------

RunRecord cmd_run(const fs::path& run_dir, const RunOptions& options) {
    const RunPaths paths = require_run(run_dir);
    const EngineConfig config = load_config(paths.config());

    const std::string recorded_env = env_name_of(paths);
    if (!recorded_env.empty() && recorded_env != options.env)
        throw ValidationError("run was started with env '" + recorded_env + "', not '" + options.env + "'");
    const SyntheticEnv env = SyntheticEnv::make(options.env, config.seed);

    auto events = fs::exists(paths.events()) ? read_events(paths.events()) : std::vector<Event>{};
    if (!events.empty() && !options.resume)
        throw ValidationError("run directory already has events; pass --resume to continue it");

    // Decide where to pick up: after the last snapshot, or from scratch.
    std::int64_t start = 0;
    std::optional<double> prev_accuracy;
    std::vector<IterationReport> reports;
    std::uint64_t keep_events = 0;
    if (options.resume) {
        if (auto snap = latest_snapshot(paths)) {
            const json s = read_json_file(snap->second);
            start = snap->first + 1;
            keep_events = s.at("event_seq").get<std::uint64_t>();
            if (!s.at("prev_accuracy").is_null()) prev_accuracy = s.at("prev_accuracy").get<double>();
        }
        for (auto& r : read_reports(paths.reports()))
            if (r.iter < start) reports.push_back(std::move(r));
        if (keep_events > events.size())
            throw IntegrityError(events.size() + 1, "event log is shorter than the last snapshot");
        events.resize(keep_events);
        // Snapshots past the resume point belong to the abandoned attempt.
        for (const auto& p : snapshot_files(paths)) {
            const auto name = p.filename().string();
            if (std::stoll(name.substr(5, name.size() - 10)) >= start) fs::remove(p);
        }
    }
    {
        std::string text;
        for (const auto& e : events) text += e.line() + "\n";
        write_file(paths.events(), text);
        std::string rtext;
        for (const auto& r : reports) rtext += r.to_json().dump() + "\n";
        write_file(paths.reports(), rtext);
    }
    if (recorded_env.empty()) write_file(paths.meta(), json{{"env", options.env}}.dump(2) + "\n");

    KnowledgeGraph graph(config.limits());
    KnowledgeGraph::replay_into(graph, events);
    if (start > 0) {
        const json s = read_json_file(paths.snapshot(start - 1));
        if (graph.to_json() != s.at("graph"))
            throw IntegrityError(keep_events, "replayed graph differs from snapshot " + paths.snapshot(start - 1).string());
    }

    std::ofstream log(paths.events(), std::ios::app);
    graph.set_event_sink([&log](const Event& e) { log << e.line() << '\n'; });

    const BackendSet backends = options.backends ? options.backends(config, env) : make_backends(config, env);
    Roster roster(backends.guidance, backends.execution, backends.judge);
    Engine engine(config, env, graph, roster, backends.embedder);
    // Re-embedding the replayed memories is resume overhead, not part of any
    // iteration, so it stays out of the per-iteration call tallies.
    roster.take();
    engine.set_hooks(options.hooks);
    engine.set_prev_accuracy(prev_accuracy);

    RunRecord record;
    record.config = config;
    record.env = options.env;
    record.events = paths.events();
    record.reports = reports;

    const std::int64_t total = options.iterations.value_or(config.number_of_iterations);
    if (start == 0 && total > 0) engine.bootstrap();
    for (std::int64_t k = start; k < total; ++k) {
        IterationReport report;
        try {
            report = engine.run_iteration(k);
        } catch (...) {
            log.flush();
            throw;
        }
        log.flush();
        append_line(paths.reports(), report.to_json().dump());
        const json snap = {{"iteration", k},
                           {"event_seq", graph.next_seq() - 1},
                           {"prev_accuracy", engine.prev_accuracy() ? json(*engine.prev_accuracy()) : json(nullptr)},
                           {"graph", graph.to_json()}};
        write_file(paths.snapshot(k), snap.dump() + "\n");
        record.reports.push_back(std::move(report));
        if (options.stop_after && k >= *options.stop_after) break;
    }
    record.snapshots = snapshot_files(paths);
    return record;
}

// ---------------------------------------------------------------------------

EvalRecord cmd_eval(const fs::path& run_dir, const EvalOptions& options) {
    const RunPaths paths = require_run(run_dir);
    const EngineConfig config = load_config(paths.config());
    if (!latest_snapshot(paths)) throw ValidationError("eval needs a run with at least one snapshot");
    const std::string env_name = env_name_of(paths);
    const SyntheticEnv env = SyntheticEnv::make(env_name.empty() ? "static_qa" : env_name, config.seed);

    const auto snap = latest_snapshot(paths);
    const json s = read_json_file(snap->second);
    auto events = read_events(paths.events());
    events.resize(std::min<std::size_t>(events.size(), s.at("event_seq").get<std::uint64_t>()));
    KnowledgeGraph graph(config.limits());
    KnowledgeGraph::replay_into(graph, events);

    const BackendSet backends = options.backends ? options.backends(config, env) : make_backends(config, env);
    Roster roster(backends.guidance, backends.execution, backends.judge);
    Engine engine(config, env, graph, roster, backends.embedder);

    std::vector<Question> pool;
    if (options.pool == "heldout")
        pool = env.heldout_pool(std::min(config.evaluation_pool_per_iteration, env.heldout_bank().size()));
    else if (options.pool == "train")
        pool = env.evolution_pool(0, config.evaluation_pool_per_iteration);
    else
        throw ValidationError("unknown eval pool '" + options.pool + "' (expected heldout or train)");

    EvalRecord rec;
    rec.retrieval = options.retrieval;
    rec.graph_hash_before = graph_hash(graph);
    const auto seq_before = graph.next_seq();
    rec.result = engine.evaluate_frozen(pool, options.retrieval);
    rec.graph_hash_after = graph_hash(graph);
    if (graph.next_seq() != seq_before || rec.graph_hash_after != rec.graph_hash_before)
        throw InvariantBreach("frozen evaluation changed the graph");
    append_line(paths.evals(), rec.to_json().dump());
    return rec;
}

// ---------------------------------------------------------------------------
// Audit
// ---------------------------------------------------------------------------

bool AuditReport::passed() const {
    return std::all_of(checks.begin(), checks.end(), [](const AuditCheck& c) { return c.passed; });
}

json AuditReport::to_json() const {
    json arr = json::array();
    for (const auto& c : checks)
        arr.push_back({{"check", c.name},
                       {"passed", c.passed},
                       {"detail", c.detail},
                       {"seq", c.seq ? json(*c.seq) : json(nullptr)}});
    return {{"passed", passed()}, {"checks", arr}};
}

std::string AuditReport::to_text() const {
    std::string out;
    for (const auto& c : checks) {
        out += (c.passed ? "PASS " : "FAIL ") + c.name;
        if (!c.detail.empty()) out += ": " + c.detail;
        out += '\n';
    }
    return out;
}

namespace {

void fail(AuditCheck& c, const std::string& detail, std::optional<std::uint64_t> seq = std::nullopt) {
    if (!c.passed) return;  // keep the first counterexample
    c.passed = false;
    c.detail = detail;
    c.seq = seq;
}

std::string fmt(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

/// Node ids an unrecognized record claims to remove.
std::vector<NodeId> referenced_ids(const json& payload) {
    std::vector<NodeId> ids;
    for (const char* key : {"id", "node", "node_id"})
        if (payload.contains(key) && payload.at(key).is_number_unsigned()) ids.push_back(payload.at(key).get<NodeId>());
    for (const char* key : {"ids", "removed"})
        if (payload.contains(key) && payload.at(key).is_array())
            for (const auto& v : payload.at(key))
                if (v.is_number_unsigned()) ids.push_back(v.get<NodeId>());
    return ids;
}

}  // namespace

AuditReport cmd_audit(const fs::path& run_dir) {
    const RunPaths paths = require_run(run_dir);
    const EngineConfig config = load_config(paths.config());
    const auto events = read_events(paths.events());
    const auto reports = read_reports(paths.reports());
    const auto evals = read_evals(paths.evals());

    auto check = [](const char* name) {
        AuditCheck c;
        c.name = name;
        return c;
    };
    AuditCheck a = check("a:protected-monotonicity"), b = check("b:reselection-gap"), c = check("c:ratchet-bounds"),
               d = check("d:rollback-keeps-protected"), e = check("e:inference-guidance-zero"),
               f = check("f:replay-equals-snapshot");

    // (a) No record may remove a protected node, and per-iteration counts
    // never decrease.
    std::map<NodeId, Outcome> outcome_of;
    for (const auto& ev : events) {
        if (ev.op == "append_experience") {
            try {
                const auto n = experience_from_json(ev.payload.at("node"));
                outcome_of[n.id] = n.outcome;
            } catch (const std::exception&) {
            }
            continue;
        }
        static const std::set<std::string> known{
            "add_skill",      "add_prerequisite", "set_mastery", "set_prompt_template", "set_strategy",
            "attach_principle", "add_task_type",  "set_resolver", "mark_observed",      "add_failures",
            "mark_selected",  "prune",            "add_env",     "ensure_bandit",       "update_bandit",
            "snapshot",       "rollback"};
        if (ev.op == "prune" || !known.count(ev.op)) {
            for (NodeId id : referenced_ids(ev.payload)) {
                auto it = outcome_of.find(id);
                if (it != outcome_of.end() && is_protected(it->second))
                    fail(a, "record '" + ev.op + "' removes protected " + std::string(to_string(it->second)) +
                                " node " + std::to_string(id),
                         ev.seq);
            }
        }
    }
    for (std::size_t i = 1; i < reports.size(); ++i)
        if (!reports[i].protected_counts.dominates(reports[i - 1].protected_counts))
            fail(a, "protected counts decreased at iteration " + std::to_string(reports[i].iter));

    // (b) Every observed type is reselected within ceil(n_max/lambda + N/M).
    {
        std::map<std::string, std::int64_t> first_seen;
        for (const auto& r : reports) {
            if (r.selector_input.empty()) continue;
            std::uint64_t n_max = 0;
            for (const auto& t : r.selector_input) {
                n_max = std::max(n_max, t.n_fail);
                first_seen.emplace(t.task_type_id, r.iter);
            }
            const auto bound = coverage_gap_bound(r.selector_input.size(), n_max, config.selector());
            for (const auto& t : r.selector_input) {
                const std::int64_t since = std::max(t.k_last, first_seen.at(t.task_type_id) - 1);
                if (r.iter - since > bound)
                    fail(b, "task type '" + t.task_type_id + "' waited " + std::to_string(r.iter - since) +
                                " iterations at iteration " + std::to_string(r.iter) + " (bound " +
                                std::to_string(bound) + ")");
            }
        }
    }

    // (c) Ratchet per-step bounds on every update record.
    const RatchetParams ratchet = config.ratchet();
    for (const auto& ev : events) {
        if (ev.op != "set_mastery") continue;
        const double prev = ev.payload.value("prev", 0.0), value = ev.payload.value("value", 0.0);
        const double lo = (1.0 - ratchet.gamma) * prev, hi = prev + ratchet.alpha * (1.0 - prev);
        if (value < lo - 1e-12 || value > hi + 1e-12)
            fail(c, "mastery step " + fmt(prev) + " -> " + fmt(value) + " outside [" + fmt(lo) + ", " + fmt(hi) + "]",
                 ev.seq);
    }

    // Replay once for (c) traces, (d) and (f).
    const auto snap = latest_snapshot(paths);
    const std::uint64_t snap_seq =
        snap ? read_json_file(snap->second).at("event_seq").get<std::uint64_t>() : 0;
    KnowledgeGraph replayed(config.limits());
    std::map<NodeId, std::vector<double>> traces;
    auto sample = [&] {
        for (const auto& s : replayed.skills()) traces[s.id].push_back(s.mastery);
    };
    std::optional<json> at_snapshot;
    bool replay_ok = true;
    std::int64_t cur_iter = events.empty() ? 0 : events.front().iter;
    for (const auto& ev : events) {
        if (ev.iter != cur_iter) {
            sample();
            cur_iter = ev.iter;
        }
        std::set<NodeId> protected_before;
        if (ev.op == "rollback")
            for (const auto& n : replayed.experience_nodes())
                if (is_protected(n.outcome)) protected_before.insert(n.id);
        try {
            replayed.apply_recorded(ev);
        } catch (const IntegrityError& ex) {
            fail(f, ex.what(), ex.seq());
            replay_ok = false;
            break;
        }
        if (ev.op == "rollback") {
            std::set<NodeId> after;
            for (const auto& n : replayed.experience_nodes())
                if (is_protected(n.outcome)) after.insert(n.id);
            for (NodeId id : protected_before)
                if (!after.count(id)) fail(d, "rollback dropped protected node " + std::to_string(id), ev.seq);
        }
        if (ev.seq == snap_seq) at_snapshot = replayed.to_json();
    }
    if (replay_ok) sample();
    for (const auto& [skill, trace] : traces) {
        if (auto bad = check_ratchet_steps(trace, ratchet))
            fail(c, "mastery trace of skill " + std::to_string(skill) + " breaks a per-step bound at position " +
                        std::to_string(*bad));
        else if (auto bad2 = check_ratchet_decay_from_peaks(trace, ratchet))
            fail(c, "mastery trace of skill " + std::to_string(skill) + " decays faster than (1-gamma)^j at position " +
                        std::to_string(*bad2));
    }
    for (std::size_t i = 1; i < reports.size(); ++i)
        if (reports[i].rollback != RollbackKind::none &&
            !reports[i].protected_counts.dominates(reports[i - 1].protected_counts))
            fail(d, "protected counts fell across the rollback at iteration " + std::to_string(reports[i].iter));

    // (e) Inference never calls the guidance tier.
    std::uint64_t infer_guidance = 0;
    for (const auto& r : reports)
        if (r.phase == "infer") infer_guidance += r.calls.tier_total(Tier::guidance);
    for (const auto& ev : evals) infer_guidance += ev.result.calls.tier_total(Tier::guidance);
    if (infer_guidance > 0) fail(e, std::to_string(infer_guidance) + " guidance calls during inference");
    if (e.passed) e.detail = std::to_string(evals.size()) + " frozen evaluation(s) recorded";

    // (f) Replay reproduces the last snapshot bit for bit.
    if (replay_ok && snap) {
        const json expected = read_json_file(snap->second).at("graph");
        if (!at_snapshot && snap_seq == 0) at_snapshot = KnowledgeGraph(config.limits()).to_json();
        if (!at_snapshot)
            fail(f, "event log ends before the snapshot's sequence number " + std::to_string(snap_seq));
        else if (at_snapshot->dump() != expected.dump())
            fail(f, "replayed state differs from " + snap->second.filename().string(), snap_seq);
        else
            f.detail = "replay matches " + snap->second.filename().string();
    } else if (replay_ok) {
        f.detail = "no snapshot yet";
    }

    AuditReport report;
    report.checks = {a, b, c, d, e, f};
    return report;
}

std::string cmd_stats(const fs::path& run_dir) {
    const RunPaths paths = require_run(run_dir);
    std::string out = "iteration\tskills\tfailure_memories\tsuccess_memories\ttask_type_coverage\n";
    char buf[160];
    for (const auto& r : read_reports(paths.reports())) {
        if (r.phase != "train") continue;
        std::snprintf(buf, sizeof buf, "%lld\t%zu\t%llu\t%llu\t%.4f\n", static_cast<long long>(r.iter), r.skills,
                      static_cast<unsigned long long>(r.failure_memories),
                      static_cast<unsigned long long>(r.success_memories), r.coverage());
        out += buf;
    }
    return out;
}

}  // namespace coevo
