#include <cstdio>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "coevo/errors.hpp"
#include "coevo/run.hpp"

namespace {

int run_cli(int argc, char** argv) {
    CLI::App app{"coevo: co-evolving knowledge graph loop over synthetic environments"};
    app.require_subcommand(1);

    std::string dir;
    std::string config_path;
    std::optional<std::uint64_t> seed;
    auto* init = app.add_subcommand("init", "create a run directory");
    init->add_option("dir", dir, "run directory")->required();
    init->add_option("--config", config_path, "JSON config file (missing keys keep defaults)");
    init->add_option("--seed", seed, "override the config seed");

    std::string env = "static_qa";
    std::optional<std::int64_t> iterations;
    bool resume = false;
    auto* run = app.add_subcommand("run", "run or resume the evolution loop");
    run->add_option("dir", dir, "run directory")->required();
    run->add_option("--env", env, "static_qa or sequential")->check(CLI::IsMember({"static_qa", "sequential"}));
    run->add_option("--iterations", iterations, "total iterations (default: config)");
    run->add_flag("--resume", resume, "continue from the last snapshot");

    bool frozen = true, no_retrieval = false;
    std::string pool = "heldout";
    auto* eval = app.add_subcommand("eval", "frozen evaluation of the latest state");
    eval->add_option("dir", dir, "run directory")->required();
    eval->add_flag("--frozen", frozen, "freeze graph and bandits (always on)");
    eval->add_flag("--no-retrieval", no_retrieval, "answer without memory bundles");
    eval->add_option("--pool", pool, "heldout or train")->check(CLI::IsMember({"heldout", "train"}));

    auto* audit = app.add_subcommand("audit", "check invariants over a recorded run");
    audit->add_option("dir", dir, "run directory")->required();

    auto* stats = app.add_subcommand("stats", "per-iteration growth table");
    stats->add_option("dir", dir, "run directory")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : 1;
    }

    if (init->parsed()) {
        coevo::EngineConfig cfg = config_path.empty() ? coevo::EngineConfig{} : coevo::load_config(config_path);
        if (seed) cfg.seed = *seed;
        coevo::cmd_init(dir, cfg);
        std::cout << "initialized " << dir << " (seed " << cfg.seed << ")\n";
        return 0;
    }
    if (run->parsed()) {
        coevo::RunOptions opts;
        opts.env = env;
        opts.iterations = iterations;
        opts.resume = resume;
        const auto rec = coevo::cmd_run(dir, opts);
        for (const auto& r : rec.reports) {
            std::printf("iter %lld accuracy %.4f rollback %s skills %zu failure_memories %llu success_memories %llu\n",
                        static_cast<long long>(r.iter), r.accuracy, std::string(coevo::to_string(r.rollback)).c_str(),
                        r.skills, static_cast<unsigned long long>(r.failure_memories),
                        static_cast<unsigned long long>(r.success_memories));
        }
        return 0;
    }
    if (eval->parsed()) {
        coevo::EvalOptions opts;
        opts.retrieval = !no_retrieval;
        opts.pool = pool;
        const auto rec = coevo::cmd_eval(dir, opts);
        std::cout << rec.to_json().dump(2) << '\n';
        return 0;
    }
    if (audit->parsed()) {
        const auto report = coevo::cmd_audit(dir);
        std::cout << report.to_text();
        return report.passed() ? 0 : 2;
    }
    std::cout << coevo::cmd_stats(dir);
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    try {
        return run_cli(argc, argv);
    } catch (const coevo::InvariantBreach& e) {
        std::cerr << "invariant breach: " << e.what() << '\n';
        return 2;
    } catch (const coevo::IntegrityError& e) {
        std::cerr << e.what() << '\n';
        return 2;
    } catch (const coevo::Error& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
}
