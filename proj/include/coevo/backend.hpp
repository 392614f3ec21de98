#pragma once

#include <array>
#include <chrono>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "coevo/embedding.hpp"

namespace coevo {

// ---------------------------------------------------------------------------
// Chat-completion style requests
// ---------------------------------------------------------------------------

struct ChatMessage {
    std::string role;  // "system" | "user" | "assistant"
    std::string content;
};

struct ChatRequest {
    std::string model;
    std::vector<ChatMessage> messages;
    double temperature = 0.0;
    int max_tokens = 1024;
    /// Forwarded to backends that support seeded sampling.
    std::optional<std::uint64_t> seed;

    nlohmann::json to_json() const;
};

struct ChatResponse {
    std::string text;
};

/// A language model endpoint. Execution backends are frozen: the interface
/// has no operation that changes model parameters.
class ModelBackend {
public:
    virtual ~ModelBackend() = default;
    virtual ChatResponse complete(const ChatRequest& request) = 0;
};

// ---------------------------------------------------------------------------
// Agents, tiers and call accounting
// ---------------------------------------------------------------------------

enum class Tier { guidance, execution };
enum class Agent { skill_discovery, navigator, explorer, learner, critic, curator };

inline constexpr std::array<Agent, 6> kAllAgents{Agent::skill_discovery, Agent::navigator, Agent::explorer,
                                                 Agent::learner,         Agent::critic,    Agent::curator};

/// Fixed roster: SkillDiscovery, Navigator, Critic and Curator write through
/// the guidance tier; Explorer and Learner run on the execution tier.
constexpr Tier tier_of(Agent a) noexcept {
    switch (a) {
        case Agent::explorer:
        case Agent::learner: return Tier::execution;
        default: return Tier::guidance;
    }
}

std::string_view to_string(Agent a) noexcept;
std::string_view to_string(Tier t) noexcept;

/// Per-agent attempt counts (every attempt, retries included) plus embedder
/// calls, which are tracked but never part of the tier fractions.
struct CallCounts {
    std::map<std::string, std::uint64_t> by_agent;
    std::uint64_t embedder = 0;

    std::uint64_t tier_total(Tier t) const;
    std::uint64_t total() const { return tier_total(Tier::guidance) + tier_total(Tier::execution); }
    CallCounts& operator+=(const CallCounts& o);
    nlohmann::json to_json() const;
    static CallCounts from_json(const nlohmann::json& j);
};

struct RetryPolicy {
    int max_attempts = 3;
    std::chrono::milliseconds initial_backoff{200};
    double multiplier = 2.0;
};

/// Routes each agent's calls to its tier's backend with retry and exponential
/// backoff, and counts every attempt. In inference mode any guidance-tier call
/// is an invariant breach.
class Roster {
public:
    Roster(std::shared_ptr<ModelBackend> guidance, std::shared_ptr<ModelBackend> execution,
           std::shared_ptr<ModelBackend> judge = nullptr, RetryPolicy retry = {});

    ChatResponse call(Agent agent, const ChatRequest& request);

    void set_inference_mode(bool on);
    bool inference_mode() const;

    void count_embedding();
    CallCounts counts() const;
    /// Returns the counts accumulated since the previous take() and resets.
    CallCounts take();

    /// Replaces the sleep used between retries (tests).
    void set_sleeper(std::function<void(std::chrono::milliseconds)> sleeper);

private:
    std::shared_ptr<ModelBackend> guidance_;
    std::shared_ptr<ModelBackend> execution_;
    std::shared_ptr<ModelBackend> judge_;
    RetryPolicy retry_;
    std::function<void(std::chrono::milliseconds)> sleeper_;
    mutable std::mutex mu_;
    bool inference_ = false;
    CallCounts counts_;
};

/// Embedder that reports each call to a roster.
class CountingEmbedder final : public Embedder {
public:
    CountingEmbedder(std::shared_ptr<Embedder> inner, Roster& roster) : inner_(std::move(inner)), roster_(roster) {}
    std::size_t dimension() const override { return inner_->dimension(); }
    Vector embed(std::string_view text) override {
        roster_.count_embedding();
        return inner_->embed(text);
    }

private:
    std::shared_ptr<Embedder> inner_;
    Roster& roster_;
};

// ---------------------------------------------------------------------------
// HTTP backends
// ---------------------------------------------------------------------------

struct Endpoint {
    std::string url;    ///< e.g. http://127.0.0.1:8000/v1/chat
    std::string token;  ///< sent as "Authorization: Bearer <token>" when set
    std::string model;
    std::chrono::seconds timeout{120};

    /// Reads <PREFIX>_URL, <PREFIX>_TOKEN and <PREFIX>_MODEL.
    static std::optional<Endpoint> from_env(const std::string& prefix);
};

/// POSTs {model, messages, temperature, max_tokens[, seed]} as JSON and
/// expects {"text": ...} back. Non-2xx replies and transport failures throw
/// BackendError; the roster retries them.
class HttpBackend final : public ModelBackend {
public:
    explicit HttpBackend(Endpoint endpoint);
    ChatResponse complete(const ChatRequest& request) override;

private:
    Endpoint endpoint_;
};

/// POSTs {model, input} and expects {"embedding": [...]}.
class HttpEmbedder final : public Embedder {
public:
    HttpEmbedder(Endpoint endpoint, std::size_t dimension);
    std::size_t dimension() const override { return dim_; }
    Vector embed(std::string_view text) override;

private:
    Endpoint endpoint_;
    std::size_t dim_;
};

/// Splits "http://host:port/path" into scheme+authority and path.
std::pair<std::string, std::string> split_url(const std::string& url);

}  // namespace coevo
