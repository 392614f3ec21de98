#include "coevo/backend.hpp"

#include <cstdlib>
#include <thread>

#include <httplib.h>

#include "coevo/errors.hpp"

namespace coevo {

using nlohmann::json;

nlohmann::json ChatRequest::to_json() const {
    json msgs = json::array();
    for (const auto& m : messages) msgs.push_back({{"role", m.role}, {"content", m.content}});
    json j = {{"model", model}, {"messages", msgs}, {"temperature", temperature}, {"max_tokens", max_tokens}};
    if (seed) j["seed"] = *seed;
    return j;
}

std::string_view to_string(Agent a) noexcept {
    switch (a) {
        case Agent::skill_discovery: return "skill_discovery";
        case Agent::navigator: return "navigator";
        case Agent::explorer: return "explorer";
        case Agent::learner: return "learner";
        case Agent::critic: return "critic";
        case Agent::curator: return "curator";
    }
    return "?";
}

std::string_view to_string(Tier t) noexcept { return t == Tier::guidance ? "guidance" : "execution"; }

std::uint64_t CallCounts::tier_total(Tier t) const {
    std::uint64_t n = 0;
    for (Agent a : kAllAgents) {
        if (tier_of(a) != t) continue;
        auto it = by_agent.find(std::string(to_string(a)));
        if (it != by_agent.end()) n += it->second;
    }
    return n;
}

CallCounts& CallCounts::operator+=(const CallCounts& o) {
    for (const auto& [k, v] : o.by_agent) by_agent[k] += v;
    embedder += o.embedder;
    return *this;
}

nlohmann::json CallCounts::to_json() const {
    json agents = json::object();
    for (Agent a : kAllAgents) {
        auto it = by_agent.find(std::string(to_string(a)));
        agents[std::string(to_string(a))] = it == by_agent.end() ? 0 : it->second;
    }
    return {{"by_agent", agents},
            {"guidance", tier_total(Tier::guidance)},
            {"execution", tier_total(Tier::execution)},
            {"embedder", embedder}};
}

CallCounts CallCounts::from_json(const nlohmann::json& j) {
    CallCounts c;
    for (const auto& [k, v] : j.at("by_agent").items())
        if (v.get<std::uint64_t>() > 0) c.by_agent[k] = v.get<std::uint64_t>();
    c.embedder = j.value("embedder", std::uint64_t{0});
    return c;
}

// ---------------------------------------------------------------------------

Roster::Roster(std::shared_ptr<ModelBackend> guidance, std::shared_ptr<ModelBackend> execution,
               std::shared_ptr<ModelBackend> judge, RetryPolicy retry)
    : guidance_(std::move(guidance)),
      execution_(std::move(execution)),
      judge_(judge ? std::move(judge) : guidance_),
      retry_(retry),
      sleeper_([](std::chrono::milliseconds d) { std::this_thread::sleep_for(d); }) {
    if (!guidance_ || !execution_) throw ValidationError("roster needs both a guidance and an execution backend");
}

ChatResponse Roster::call(Agent agent, const ChatRequest& request) {
    const Tier tier = tier_of(agent);
    ModelBackend* backend = nullptr;
    {
        std::lock_guard lock(mu_);
        if (inference_ && tier == Tier::guidance)
            throw InvariantBreach("guidance-tier call by " + std::string(to_string(agent)) + " during inference");
        backend = agent == Agent::critic ? judge_.get() : (tier == Tier::guidance ? guidance_.get() : execution_.get());
    }
    auto backoff = retry_.initial_backoff;
    std::string last_error;
    for (int attempt = 1; attempt <= retry_.max_attempts; ++attempt) {
        {
            std::lock_guard lock(mu_);
            ++counts_.by_agent[std::string(to_string(agent))];
        }
        try {
            return backend->complete(request);
        } catch (const BackendError& e) {
            last_error = e.what();
        }
        if (attempt < retry_.max_attempts) {
            sleeper_(backoff);
            backoff = std::chrono::milliseconds(
                static_cast<std::int64_t>(static_cast<double>(backoff.count()) * retry_.multiplier));
        }
    }
    throw BackendError(std::string(to_string(agent)) + " call failed after " + std::to_string(retry_.max_attempts) +
                       " attempts: " + last_error);
}

void Roster::set_inference_mode(bool on) {
    std::lock_guard lock(mu_);
    inference_ = on;
}

bool Roster::inference_mode() const {
    std::lock_guard lock(mu_);
    return inference_;
}

void Roster::count_embedding() {
    std::lock_guard lock(mu_);
    ++counts_.embedder;
}

CallCounts Roster::counts() const {
    std::lock_guard lock(mu_);
    return counts_;
}

CallCounts Roster::take() {
    std::lock_guard lock(mu_);
    CallCounts out = std::move(counts_);
    counts_ = {};
    return out;
}

void Roster::set_sleeper(std::function<void(std::chrono::milliseconds)> sleeper) {
    std::lock_guard lock(mu_);
    sleeper_ = std::move(sleeper);
}

// ---------------------------------------------------------------------------

std::optional<Endpoint> Endpoint::from_env(const std::string& prefix) {
    const char* url = std::getenv((prefix + "_URL").c_str());
    if (!url || !*url) return std::nullopt;
    Endpoint e;
    e.url = url;
    if (const char* t = std::getenv((prefix + "_TOKEN").c_str())) e.token = t;
    if (const char* m = std::getenv((prefix + "_MODEL").c_str())) e.model = m;
    return e;
}

std::pair<std::string, std::string> split_url(const std::string& url) {
    const auto scheme = url.find("://");
    if (scheme == std::string::npos) throw ValidationError("endpoint url '" + url + "' has no scheme");
    const auto path = url.find('/', scheme + 3);
    if (path == std::string::npos) return {url, "/"};
    return {url.substr(0, path), url.substr(path)};
}

namespace {

json post_json(const Endpoint& ep, const json& body) {
    const auto [base, path] = split_url(ep.url);
    httplib::Client client(base);
    client.set_connection_timeout(ep.timeout);
    client.set_read_timeout(ep.timeout);
    httplib::Headers headers;
    if (!ep.token.empty()) headers.emplace("Authorization", "Bearer " + ep.token);
    auto res = client.Post(path, headers, body.dump(), "application/json");
    if (!res) throw BackendError("POST " + ep.url + " failed: " + httplib::to_string(res.error()));
    if (res->status < 200 || res->status >= 300)
        throw BackendError("POST " + ep.url + " returned HTTP " + std::to_string(res->status));
    try {
        return json::parse(res->body);
    } catch (const json::exception& e) {
        throw BackendError("POST " + ep.url + " returned malformed JSON: " + e.what());
    }
}

}  // namespace

HttpBackend::HttpBackend(Endpoint endpoint) : endpoint_(std::move(endpoint)) { split_url(endpoint_.url); }

ChatResponse HttpBackend::complete(const ChatRequest& request) {
    ChatRequest req = request;
    if (req.model.empty()) req.model = endpoint_.model;
    const json reply = post_json(endpoint_, req.to_json());
    if (!reply.contains("text") || !reply.at("text").is_string())
        throw BackendError("backend reply has no 'text' field");
    return ChatResponse{reply.at("text").get<std::string>()};
}

HttpEmbedder::HttpEmbedder(Endpoint endpoint, std::size_t dimension)
    : endpoint_(std::move(endpoint)), dim_(dimension) {
    split_url(endpoint_.url);
}

Vector HttpEmbedder::embed(std::string_view text) {
    const json reply = post_json(endpoint_, {{"model", endpoint_.model}, {"input", std::string(text)}});
    const auto values = reply.at("embedding").get<std::vector<double>>();
    if (values.size() != dim_)
        throw BackendError("embedder returned dimension " + std::to_string(values.size()) + ", expected " +
                           std::to_string(dim_));
    return Eigen::Map<const Vector>(values.data(), static_cast<Eigen::Index>(values.size()));
}

}  // namespace coevo
