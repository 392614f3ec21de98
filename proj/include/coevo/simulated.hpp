#pragma once

#include <cstddef>
#include <string>
#include <string_view>

#include "coevo/backend.hpp"
#include "coevo/env.hpp"

namespace coevo {

// Wire conventions shared by the engine and every backend: the first message
// is a system message whose first line is "task: <name>". Guidance tasks carry
// a JSON object as the user message and expect a JSON object back. The
// "answer" task carries the rendered bundle prompt.

/// "task: <name>" line of the request's system message; empty if absent.
std::string request_task(const ChatRequest& request);

/// Value of a "key: value" line in the system message; empty if absent.
std::string system_field(const ChatRequest& request, std::string_view key);

/// Deterministic guidance tier: template-fills failure corrections,
/// principles, prompt revisions, tool descriptions and skill splits from the
/// error records it is handed, reorders frontiers by mastery and judges by
/// exact match. Temperatures are ignored.
class SimulatedGuidance final : public ModelBackend {
public:
    ChatResponse complete(const ChatRequest& request) override;
};

struct ExemplarMatch {
    std::size_t success = 0;
    std::size_t correction = 0;

    std::size_t total() const noexcept { return success + correction; }
};

/// Frozen simulated learner and explorer.
///
/// Answer requests succeed with probability
///     p = clamp(base(q) + 0.12 * min(s, 2) + 0.20 * min(c, 2), 0, 0.98)
/// where s and c count the [SUCCESS] and [CORRECTION] blocks in the prompt
/// that carry the question's "(pattern <family>)" tag. Corrections are worth
/// more than successes: a worked mistake on the same pattern is the stronger
/// hint. Whether a given request succeeds is
/// decided by a uniform draw keyed on (request seed, question id), so the
/// same prompt and seed always produce the same answer, and more matching
/// exemplars can only turn a wrong answer into a right one.
class SimulatedExecution final : public ModelBackend {
public:
    explicit SimulatedExecution(const SyntheticEnv& env) : env_(env) {}

    ChatResponse complete(const ChatRequest& request) override;

    /// The question a rendered prompt asks, or nullptr.
    const Question* question_of(std::string_view prompt) const;
    /// Exemplar blocks ([SUCCESS i] / [CORRECTION j]) tagged with the
    /// question's family.
    ExemplarMatch matched_exemplars(std::string_view prompt) const;
    /// Exact success probability for a rendered prompt.
    double success_probability(std::string_view prompt) const;

private:
    ChatResponse answer(const ChatRequest& request) const;
    ChatResponse explore(const ChatRequest& request) const;

    const SyntheticEnv& env_;
};

/// p as a function of base difficulty and matched exemplar counts.
double simulated_success_probability(double base, ExemplarMatch matched) noexcept;

/// "(pattern <family>)" tag inside a text; empty if none.
std::string pattern_of(std::string_view text);

}  // namespace coevo
