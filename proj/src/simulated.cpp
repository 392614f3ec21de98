#include "coevo/simulated.hpp"

#include <algorithm>
#include <map>

#include <nlohmann/json.hpp>

#include "coevo/errors.hpp"
#include "coevo/hash.hpp"

namespace coevo {

using nlohmann::json;

namespace {

const std::string& system_text(const ChatRequest& r) {
    static const std::string empty;
    if (r.messages.empty() || r.messages.front().role != "system") return empty;
    return r.messages.front().content;
}

const std::string& user_text(const ChatRequest& r) {
    for (auto it = r.messages.rbegin(); it != r.messages.rend(); ++it)
        if (it->role == "user") return it->content;
    throw ValidationError("request has no user message");
}

json parse_user(const ChatRequest& r) {
    try {
        return json::parse(user_text(r));
    } catch (const json::exception& e) {
        throw BackendError(std::string("simulated guidance expects a JSON user message: ") + e.what());
    }
}

ChatResponse reply(const json& j) { return ChatResponse{j.dump()}; }

std::string trim(std::string_view s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string_view::npos) return {};
    const auto e = s.find_last_not_of(" \t\r\n");
    return std::string(s.substr(b, e - b + 1));
}

/// Most frequent pattern among the error questions; ties to the smaller name.
std::string dominant_pattern(const json& errors) {
    std::map<std::string, int> freq;
    for (const auto& e : errors) {
        const auto p = pattern_of(e.value("question", ""));
        if (!p.empty()) ++freq[p];
    }
    std::string best;
    int n = 0;
    for (const auto& [p, c] : freq)
        if (c > n) best = p, n = c;
    return best;
}

}  // namespace

std::string request_task(const ChatRequest& request) { return system_field(request, "task"); }

std::string system_field(const ChatRequest& request, std::string_view key) {
    const std::string& sys = system_text(request);
    const std::string prefix = std::string(key) + ":";
    std::size_t pos = 0;
    while (pos <= sys.size()) {
        const auto end = std::min(sys.find('\n', pos), sys.size());
        std::string_view line(sys.data() + pos, end - pos);
        if (line.substr(0, prefix.size()) == prefix) return trim(line.substr(prefix.size()));
        pos = end + 1;
    }
    return {};
}

std::string pattern_of(std::string_view text) {
    const std::string_view tag = "(pattern ";
    const auto b = text.find(tag);
    if (b == std::string_view::npos) return {};
    const auto e = text.find(')', b);
    if (e == std::string_view::npos) return {};
    return std::string(text.substr(b + tag.size(), e - b - tag.size()));
}

double simulated_success_probability(double base, ExemplarMatch matched) noexcept {
    const double p = base + 0.12 * static_cast<double>(std::min<std::size_t>(matched.success, 2)) +
                     0.20 * static_cast<double>(std::min<std::size_t>(matched.correction, 2));
    return std::clamp(p, 0.0, 0.98);
}

// ---------------------------------------------------------------------------
// Guidance
// ---------------------------------------------------------------------------

ChatResponse SimulatedGuidance::complete(const ChatRequest& request) {
    const std::string task = request_task(request);
    const json in = parse_user(request);

    if (task == "skill_discovery") {
        return reply({{"skills", in.at("skills")}});
    }
    if (task == "navigator") {
        // Stage-2 refinement: lowest mastery first, ties by name.
        auto frontier = in.at("frontier").get<std::vector<json>>();
        std::stable_sort(frontier.begin(), frontier.end(), [](const json& a, const json& b) {
            const double ma = a.at("mastery").get<double>(), mb = b.at("mastery").get<double>();
            if (ma != mb) return ma < mb;
            return a.at("name").get<std::string>() < b.at("name").get<std::string>();
        });
        json order = json::array();
        for (const auto& f : frontier) order.push_back(f.at("name"));
        return reply({{"order", order}});
    }
    if (task == "judge") {
        json scores = json::array();
        for (const auto& item : in.at("items"))
            scores.push_back(trim(item.at("predicted").get<std::string>()) == trim(item.at("gold").get<std::string>())
                                 ? 1
                                 : 0);
        return reply({{"scores", scores}});
    }

    const std::string tt = in.value("task_type", "");
    const std::string skill = in.value("skill", "");
    const json errors = in.value("errors", json::array());
    const std::string pattern = dominant_pattern(errors);

    if (task == "failure_memory") {
        json memories = json::array();
        const std::size_t n_specific = std::min<std::size_t>(errors.size(), 2);
        for (std::size_t i = 0; i < n_specific; ++i) {
            const auto& e = errors[i];
            const std::string q = e.at("question");
            memories.push_back({{"question", q},
                                {"wrong_answer", e.at("wrong_answer")},
                                {"corrective_reasoning", "The answer " + e.at("wrong_answer").get<std::string>() +
                                                             " misapplies the operation; recompute step by step "
                                                             "for (pattern " +
                                                             pattern_of(q) + ") and report " +
                                                             e.at("correct_answer").get<std::string>() + "."},
                                {"correct_answer", e.at("correct_answer")},
                                {"kind", "specific"}});
        }
        if (!pattern.empty()) {
            const auto& e = errors[0];
            memories.push_back({{"question", "Questions of type " + tt + " (pattern " + pattern + ")"},
                                {"wrong_answer", e.at("wrong_answer")},
                                {"corrective_reasoning", "For " + tt + " questions with (pattern " + pattern +
                                                             ") identify both operands before applying the "
                                                             "operation named in the question."},
                                {"correct_answer", e.at("correct_answer")},
                                {"kind", "type_strategy"}});
        }
        return reply({{"memories", memories}});
    }
    if (task == "principle") {
        return reply({{"principle", "When solving " + tt + " questions" +
                                        (pattern.empty() ? std::string() : " with (pattern " + pattern + ")") +
                                        ", restate the operands, name the operation and check the result against "
                                        "the question before answering."}});
    }
    if (task == "prompt_refinement") {
        return reply({{"prompt_template", "You apply the skill " + skill + ". Common pitfall: " +
                                              (pattern.empty() ? std::string("none recorded") : pattern) +
                                              ". Show each step, then give only the final value."}});
    }
    if (task == "tool_authoring") {
        const std::string suffix = pattern.empty() ? tt : pattern;
        return reply({{"name", "tool_" + suffix},
                      {"description", "Computes the result for (pattern " + suffix + ") from the two operands."}});
    }
    if (task == "skill_split") {
        if (pattern.empty()) return reply({{"name", nullptr}});
        return reply({{"name", skill + "/" + pattern}});
    }
    throw BackendError("simulated guidance: unsupported task '" + task + "'");
}

// ---------------------------------------------------------------------------
// Execution
// ---------------------------------------------------------------------------

const Question* SimulatedExecution::question_of(std::string_view prompt) const {
    const std::string_view marker = "[QUESTION]\n";
    const auto at = prompt.rfind(marker);
    if (at == std::string_view::npos) return nullptr;
    const auto b = prompt.find("[q:", at);
    if (b == std::string_view::npos) return nullptr;
    const auto e = prompt.find(']', b);
    if (e == std::string_view::npos) return nullptr;
    return env_.find(std::string(prompt.substr(b + 3, e - b - 3)));
}

ExemplarMatch SimulatedExecution::matched_exemplars(std::string_view prompt) const {
    const Question* q = question_of(prompt);
    if (!q) return {};
    const std::string tag = "(pattern " + q->family + ")";
    const auto end = prompt.rfind("[QUESTION]\n");
    ExemplarMatch n;
    std::size_t pos = 0;
    while (pos < end) {
        auto next = prompt.find("\n\n", pos);
        if (next == std::string_view::npos || next > end) next = end;
        const auto block = prompt.substr(pos, next - pos);
        if (block.find(tag) != std::string_view::npos) {
            if (block.rfind("[SUCCESS ", 0) == 0) ++n.success;
            else if (block.rfind("[CORRECTION ", 0) == 0) ++n.correction;
        }
        pos = next + 2;
    }
    return n;
}

double SimulatedExecution::success_probability(std::string_view prompt) const {
    const Question* q = question_of(prompt);
    if (!q) return 0.0;
    return simulated_success_probability(q->base, matched_exemplars(prompt));
}

ChatResponse SimulatedExecution::complete(const ChatRequest& request) {
    const std::string task = request_task(request);
    if (task == "answer") return answer(request);
    if (task == "explore") return explore(request);
    throw BackendError("simulated execution: unsupported task '" + task + "'");
}

ChatResponse SimulatedExecution::answer(const ChatRequest& request) const {
    const std::string& prompt = user_text(request);
    const Question* q = question_of(prompt);
    if (!q) return reply({{"answer", ""}, {"reasoning", "no question found"}});
    const double p = success_probability(prompt);
    const double u = unit_interval(mix_seed({request.seed.value_or(0), fnv1a64(q->id), 0xa11ceULL}));
    const bool correct = u < p;

    std::string predicted = q->gold;
    if (!correct) {
        try {
            predicted = std::to_string(std::stoll(q->gold) + 1);
        } catch (const std::exception&) {
            predicted = "noop";
        }
    }
    const std::string skill = system_field(request, "skill");
    json out = {{"answer", predicted},
                {"reasoning", "Identify the operands in " + q->id + " (pattern " + q->family +
                                  "), apply the operation, answer " + predicted + "."}};
    json steps = json::array();
    if (system_field(request, "strategy") == "decompose") {
        steps.push_back({skill, "operands located for " + q->family});
        steps.push_back({skill, "result " + predicted});
    }
    out["decomposition"] = steps;
    return reply(out);
}

ChatResponse SimulatedExecution::explore(const ChatRequest& request) const {
    const json in = parse_user(request);
    const std::string target = in.at("target");
    const auto mastered = in.value("mastered", std::vector<std::string>{});
    const auto& chain = env_.achievements();
    const auto it = std::find(chain.begin(), chain.end(), target);
    if (it == chain.end()) throw BackendError("simulated explorer: unknown target '" + target + "'");

    json actions = json::array();
    bool prereqs_ok = true;
    for (auto a = chain.begin(); a != it; ++a) {
        actions.push_back(env_.action_for(*a));
        if (std::find(mastered.begin(), mastered.end(), *a) == mastered.end()) prereqs_ok = false;
    }
    actions.push_back(env_.action_for(target));

    const std::uint64_t h = mix_seed({request.seed.value_or(0), fnv1a64(target), 0xe4b1ULL});
    const bool achieved = prereqs_ok || unit_interval(h) < 0.5;
    const double confidence = unit_interval(splitmix64(h));
    return reply({{"actions", actions},
                  {"achieved", achieved},
                  {"observation", "reached " + std::string(achieved ? "" : "towards ") + target + " after " +
                                      std::to_string(actions.size()) + " actions"},
                  {"pattern", "chain " + target + " needs " + std::to_string(actions.size()) + " actions in order"},
                  {"pattern_confidence", confidence}});
}

}  // namespace coevo
