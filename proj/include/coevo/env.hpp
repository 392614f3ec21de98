#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace coevo {

/// One pool question. `text` is a single line that starts with "[q:<id>]" and
/// ends with "(pattern <family>)"; the simulated learner relies on both.
struct Question {
    std::string id;
    std::string task_type;
    std::string family;
    std::string text;
    std::string context;
    std::string gold;
    double base = 0.0;  ///< latent difficulty: base success probability
};

struct SkillSpec {
    std::string name;
    std::vector<std::string> prerequisites;
};

struct TaskTypeSpec {
    std::string name;
    std::string resolver_skill;
    bool long_context = false;
    std::vector<std::string> families;
};

enum class EnvMode { static_qa, sequential };

std::string_view to_string(EnvMode m) noexcept;

/// Desk-scale stand-in for a benchmark: a declared skill DAG, task types with
/// deterministic question banks, and (for the sequential mode) an ordered
/// achievement chain.
class SyntheticEnv {
public:
    /// "static_qa" or "sequential".
    static SyntheticEnv make(const std::string& name, std::uint64_t seed);
    static SyntheticEnv static_qa(std::uint64_t seed);
    static SyntheticEnv sequential(std::uint64_t seed);

    EnvMode mode() const noexcept { return mode_; }
    std::string name() const { return std::string(to_string(mode_)); }
    std::uint64_t seed() const noexcept { return seed_; }
    const std::vector<SkillSpec>& skills() const noexcept { return skills_; }
    const std::vector<TaskTypeSpec>& task_types() const noexcept { return task_types_; }

    /// Questions reserved for training, all task types.
    const std::vector<Question>& training_bank() const noexcept { return train_; }
    /// Questions never drawn into an evolution pool.
    const std::vector<Question>& heldout_bank() const noexcept { return heldout_; }

    /// `size` questions drawn with replacement from the training bank; a pure
    /// function of (seed, iteration).
    std::vector<Question> evolution_pool(std::int64_t iteration, std::size_t size) const;
    /// The first `size` held-out questions, cycling if the bank is smaller.
    std::vector<Question> heldout_pool(std::size_t size) const;

    /// Looks a question up by id in either bank.
    const Question* find(const std::string& id) const;

    // -- sequential mode -------------------------------------------------------
    /// Achievements in unlock order; one skill per achievement.
    const std::vector<std::string>& achievements() const noexcept { return achievements_; }
    /// The action that completes an achievement.
    std::string action_for(const std::string& achievement) const;

private:
    void index();

    EnvMode mode_ = EnvMode::static_qa;
    std::uint64_t seed_ = 0;
    std::vector<SkillSpec> skills_;
    std::vector<TaskTypeSpec> task_types_;
    std::vector<Question> train_;
    std::vector<Question> heldout_;
    std::map<std::string, std::pair<bool, std::size_t>> by_id_;
    std::vector<std::string> achievements_;
};

}  // namespace coevo
