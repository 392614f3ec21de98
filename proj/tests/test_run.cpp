#include <doctest.h>

#include <unistd.h>

#include <atomic>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "coevo/errors.hpp"
#include "coevo/run.hpp"

using namespace coevo;
using nlohmann::json;

namespace {

/// A fresh directory under the system temp dir, removed on scope exit.
struct TempDir {
    TempDir() {
        static std::atomic<int> counter{0};
        path = fs::temp_directory_path() /
               ("coevo-test-" + std::to_string(::getpid()) + "-" + std::to_string(counter++));
        fs::remove_all(path);
    }
    ~TempDir() {
        std::error_code ec;
        fs::remove_all(path, ec);
    }
    fs::path path;
};

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

std::vector<std::string> lines_of(const fs::path& p) {
    std::vector<std::string> out;
    std::ifstream in(p);
    for (std::string line; std::getline(in, line);)
        if (!line.empty()) out.push_back(line);
    return out;
}

void write_lines(const fs::path& p, const std::vector<std::string>& lines) {
    std::ofstream out(p, std::ios::binary | std::ios::trunc);
    for (const auto& l : lines) out << l << '\n';
}

RunRecord full_run(const fs::path& dir, std::int64_t iterations, const std::string& env = "static_qa") {
    cmd_init(dir, EngineConfig{});
    RunOptions opt;
    opt.env = env;
    opt.iterations = iterations;
    return cmd_run(dir, opt);
}

/// One shared 20-iteration run; audit fixtures copy it before tampering.
const fs::path& reference_run() {
    static TempDir dir;
    static const bool done = [] {
        full_run(dir.path, 20);
        return true;
    }();
    (void)done;
    return dir.path;
}

fs::path copy_of_reference(const TempDir& tmp) {
    fs::copy(reference_run(), tmp.path, fs::copy_options::recursive);
    return tmp.path;
}

const AuditCheck& find_check(const AuditReport& r, const std::string& prefix) {
    for (const auto& c : r.checks)
        if (c.name.rfind(prefix, 0) == 0) return c;
    throw std::runtime_error("no audit check " + prefix);
}

}  // namespace

TEST_CASE("init writes the default configuration and rejects bad ones") {
    TempDir tmp;
    cmd_init(tmp.path, EngineConfig{});
    const json cfg = json::parse(slurp(tmp.path / "config.json"));
    CHECK(cfg.at("alpha") == 0.6);
    CHECK(cfg.at("gamma") == 0.1);
    CHECK(cfg.at("seed") == 42);
    CHECK(fs::exists(tmp.path / "events.jsonl"));
    CHECK(fs::file_size(tmp.path / "events.jsonl") == 0);
    CHECK_THROWS_AS(cmd_init(tmp.path, EngineConfig{}), ValidationError);

    TempDir bad;
    EngineConfig c;
    c.alpha = 0.6;
    c.gamma = 0.7;
    CHECK_THROWS_AS(cmd_init(bad.path, c), ValidationError);
    CHECK_FALSE(fs::exists(bad.path / "config.json"));
}

TEST_CASE("a 20-iteration run yields 20 reports and 20 snapshots, and audits clean") {
    const fs::path& dir = reference_run();
    CHECK(read_reports(dir / "reports.jsonl").size() == 20);
    std::size_t snaps = 0;
    for (const auto& e : fs::directory_iterator(dir / "snapshots"))
        if (e.path().extension() == ".json") ++snaps;
    CHECK(snaps == 20);

    const AuditReport audit = cmd_audit(dir);
    for (const auto& c : audit.checks) {
        INFO(c.name << ": " << c.detail);
        CHECK(c.passed);
    }
    CHECK(audit.passed());
}

TEST_CASE("identical config and seed give byte-identical logs") {
    TempDir other;
    full_run(other.path, 20);
    CHECK(slurp(other.path / "events.jsonl") == slurp(reference_run() / "events.jsonl"));
    CHECK(slurp(other.path / "reports.jsonl") == slurp(reference_run() / "reports.jsonl"));
}

TEST_CASE("interrupt and resume equals a run to completion") {
    for (std::int64_t stop : {0, 7, 13}) {
        TempDir tmp;
        cmd_init(tmp.path, EngineConfig{});
        RunOptions first;
        first.iterations = 20;
        first.stop_after = stop;
        cmd_run(tmp.path, first);
        CHECK(read_reports(tmp.path / "reports.jsonl").size() == static_cast<std::size_t>(stop + 1));

        RunOptions rest;
        rest.iterations = 20;
        rest.resume = true;
        const RunRecord rec = cmd_run(tmp.path, rest);
        CHECK(rec.reports.size() == 20);
        CHECK(slurp(tmp.path / "events.jsonl") == slurp(reference_run() / "events.jsonl"));
        CHECK(slurp(tmp.path / "reports.jsonl") == slurp(reference_run() / "reports.jsonl"));
    }
}

TEST_CASE("resume truncates a partially written iteration") {
    TempDir tmp;
    copy_of_reference(tmp);
    // Drop the last report and snapshot as if the process died mid-iteration.
    auto reports = lines_of(tmp.path / "reports.jsonl");
    reports.pop_back();
    write_lines(tmp.path / "reports.jsonl", reports);
    fs::remove(tmp.path / "snapshots" / "snap-00019.json");

    RunOptions opt;
    opt.iterations = 20;
    opt.resume = true;
    cmd_run(tmp.path, opt);
    CHECK(slurp(tmp.path / "events.jsonl") == slurp(reference_run() / "events.jsonl"));
}

TEST_CASE("running twice without --resume is rejected") {
    TempDir tmp;
    copy_of_reference(tmp);
    RunOptions opt;
    opt.iterations = 20;
    CHECK_THROWS_AS(cmd_run(tmp.path, opt), ValidationError);
    opt.resume = true;
    opt.env = "sequential";
    CHECK_THROWS_AS(cmd_run(tmp.path, opt), ValidationError);
}

TEST_CASE("audit: an injected protected-node deletion fails check (a) at its seq") {
    TempDir tmp;
    copy_of_reference(tmp);
    auto lines = lines_of(tmp.path / "events.jsonl");
    NodeId victim = 0;
    bool found = false;
    for (const auto& l : lines) {
        const json j = json::parse(l);
        if (j.at("op") == "append_experience" && j.at("payload").at("node").at("outcome") == "success_memory") {
            victim = j.at("payload").at("node").at("id").get<NodeId>();
            found = true;
            break;
        }
    }
    REQUIRE(found);
    // Overwrite a late benign record so numbering stays intact.
    std::uint64_t injected_seq = 0;
    for (auto it = lines.rbegin(); it != lines.rend(); ++it) {
        json j = json::parse(*it);
        if (j.at("op") == "mark_observed" || j.at("op") == "add_failures") {
            injected_seq = j.at("seq").get<std::uint64_t>();
            j["op"] = "delete_node";
            j["payload"] = {{"id", victim}};
            *it = j.dump();
            break;
        }
    }
    REQUIRE(injected_seq > 0);
    write_lines(tmp.path / "events.jsonl", lines);

    const auto audit = cmd_audit(tmp.path);
    const auto& a = find_check(audit, "a:");
    CHECK_FALSE(a.passed);
    REQUIRE(a.seq.has_value());
    CHECK(*a.seq == injected_seq);
    CHECK_FALSE(audit.passed());
}

TEST_CASE("audit: a mastery jump below (1-gamma)m fails check (c)") {
    TempDir tmp;
    copy_of_reference(tmp);
    auto lines = lines_of(tmp.path / "events.jsonl");
    std::uint64_t seq = 0;
    for (auto& l : lines) {
        json j = json::parse(l);
        if (j.at("op") == "set_mastery" && j.at("payload").at("prev").get<double>() > 0.2) {
            j["payload"]["value"] = j.at("payload").at("prev").get<double>() * 0.5;
            seq = j.at("seq").get<std::uint64_t>();
            l = j.dump();
            break;
        }
    }
    REQUIRE(seq > 0);
    write_lines(tmp.path / "events.jsonl", lines);
    const auto& c = find_check(cmd_audit(tmp.path), "c:");
    CHECK_FALSE(c.passed);
    REQUIRE(c.seq.has_value());
    CHECK(*c.seq == seq);
}

TEST_CASE("audit: a stale selection record fails check (b)") {
    TempDir tmp;
    copy_of_reference(tmp);
    auto lines = lines_of(tmp.path / "reports.jsonl");
    json last = json::parse(lines.back());
    REQUIRE_FALSE(last.at("selector_input").empty());
    last["selector_input"][0]["k_last"] = -1;
    last["iter"] = 100000000;  // far beyond any bound the recorded counts allow
    lines.back() = last.dump();
    write_lines(tmp.path / "reports.jsonl", lines);
    CHECK_FALSE(find_check(cmd_audit(tmp.path), "b:").passed);
}

TEST_CASE("audit: protected counts falling across a rollback fail check (d)") {
    TempDir tmp;
    copy_of_reference(tmp);
    auto lines = lines_of(tmp.path / "reports.jsonl");
    json last = json::parse(lines.back());
    last["rollback"] = "delta";
    last["protected_counts"]["success_memory"] = 0;
    lines.back() = last.dump();
    write_lines(tmp.path / "reports.jsonl", lines);
    CHECK_FALSE(find_check(cmd_audit(tmp.path), "d:").passed);
}

TEST_CASE("audit: a guidance call in a frozen evaluation fails check (e)") {
    TempDir tmp;
    copy_of_reference(tmp);
    const EvalRecord rec = cmd_eval(tmp.path);
    CHECK(find_check(cmd_audit(tmp.path), "e:").passed);
    json j = rec.to_json();
    j["result"]["calls"]["by_agent"]["critic"] = 1;
    std::ofstream(tmp.path / "evals.jsonl", std::ios::app) << j.dump() << '\n';
    CHECK_FALSE(find_check(cmd_audit(tmp.path), "e:").passed);
}

TEST_CASE("audit: a tampered snapshot fails check (f)") {
    TempDir tmp;
    copy_of_reference(tmp);
    const fs::path snap = tmp.path / "snapshots" / "snap-00019.json";
    json s = json::parse(slurp(snap));
    s["graph"]["tampered"] = true;
    std::ofstream(snap, std::ios::trunc) << s.dump();
    CHECK_FALSE(find_check(cmd_audit(tmp.path), "f:").passed);
}

TEST_CASE("audit: a corrupt log raises an integrity error with the sequence number") {
    TempDir tmp;
    copy_of_reference(tmp);
    auto lines = lines_of(tmp.path / "events.jsonl");
    lines[10] = "{not json";
    write_lines(tmp.path / "events.jsonl", lines);
    try {
        cmd_audit(tmp.path);
        FAIL("expected an integrity error");
    } catch (const IntegrityError& e) {
        CHECK(e.seq() == 11);  // sequence numbers start at 1
    }

    auto gap = lines_of(reference_run() / "events.jsonl");
    gap.erase(gap.begin() + 5);
    write_lines(tmp.path / "events.jsonl", gap);
    CHECK_THROWS_AS(cmd_audit(tmp.path), IntegrityError);
}

TEST_CASE("stats: header only on an empty run, monotone columns after a run") {
    TempDir tmp;
    cmd_init(tmp.path, EngineConfig{});
    const std::string header = "iteration\tskills\tfailure_memories\tsuccess_memories\ttask_type_coverage\n";
    CHECK(cmd_stats(tmp.path) == header);

    std::istringstream table(cmd_stats(reference_run()));
    std::string line;
    std::getline(table, line);
    CHECK(line + "\n" == header);
    long prev_skills = 0, prev_fail = 0, prev_succ = 0;
    double prev_cov = 0.0;
    int rows = 0;
    for (; std::getline(table, line); ++rows) {
        long it, skills, fails, succs;
        double cov;
        REQUIRE(std::sscanf(line.c_str(), "%ld\t%ld\t%ld\t%ld\t%lf", &it, &skills, &fails, &succs, &cov) == 5);
        CHECK(skills >= prev_skills);
        CHECK(fails >= prev_fail);
        CHECK(succs >= prev_succ);
        CHECK(cov >= prev_cov);
        prev_skills = skills, prev_fail = fails, prev_succ = succs, prev_cov = cov;
    }
    CHECK(rows == 20);
    CHECK(prev_cov == 1.0);
}

TEST_CASE("frozen eval leaves the graph untouched and makes no guidance calls") {
    TempDir tmp;
    copy_of_reference(tmp);
    const std::string events_before = slurp(tmp.path / "events.jsonl");
    const EvalRecord with = cmd_eval(tmp.path);
    CHECK(with.graph_hash_before == with.graph_hash_after);
    CHECK(with.result.calls.tier_total(Tier::guidance) == 0);
    CHECK(with.result.total == 180);

    EvalOptions off;
    off.retrieval = false;
    const EvalRecord without = cmd_eval(tmp.path, off);
    CHECK(with.result.accuracy >= without.result.accuracy);
    CHECK(slurp(tmp.path / "events.jsonl") == events_before);
    CHECK(read_evals(tmp.path / "evals.jsonl").size() == 2);

    TempDir empty;
    cmd_init(empty.path, EngineConfig{});
    CHECK_THROWS_AS(cmd_eval(empty.path), ValidationError);
}

TEST_CASE("a sequential run invokes the explorer every iteration") {
    TempDir tmp;
    const RunRecord rec = full_run(tmp.path, 4, "sequential");
    REQUIRE(rec.reports.size() == 4);
    for (const auto& r : rec.reports) {
        CHECK(r.explored);
        CHECK(r.calls.by_agent.count("explorer") == 1);
    }
    CHECK(cmd_audit(tmp.path).passed());
}
