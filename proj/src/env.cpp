#include "coevo/env.hpp"

#include <string_view>

#include "coevo/errors.hpp"
#include "coevo/hash.hpp"

namespace coevo {

namespace {

constexpr std::size_t kTrainPerFamily = 40;
constexpr std::size_t kHeldoutPerFamily = 10;

enum class Op { add, sub, mul, max, mod };

struct FamilyTemplate {
    const char* name;
    const char* words;  // family-specific vocabulary, shared by all its questions
    Op op;
};

struct TypeTemplate {
    const char* name;
    const char* resolver;
    bool long_context;
    FamilyTemplate families[3];
};

// Every family uses its own vocabulary so that the hashing embedder places
// same-family questions close together.
const TypeTemplate kStaticTypes[] = {
    {"extraction", "parse", false,
     {{"extract_quantity", "read the quantity field from invoice line", Op::add},
      {"extract_total", "report the running total printed on receipt", Op::max},
      {"extract_code", "copy the numeric product code from label", Op::mod}}},
    {"arithmetic", "arith", false,
     {{"arith_carry", "add with carrying the two addends", Op::add},
      {"arith_borrow", "subtract with borrowing minuend minus subtrahend", Op::sub},
      {"arith_product", "multiply factor by factor", Op::mul}}},
    {"unit_conversion", "units", false,
     {{"units_length", "convert metres to centimetres scaled length", Op::mul},
      {"units_time", "convert hours and minutes elapsed duration", Op::add},
      {"units_mass", "convert grams difference between parcels weight", Op::sub}}},
    {"word_problem", "multi_step", false,
     {{"word_rate", "a worker finishes jobs per day how many after days", Op::mul},
      {"word_share", "apples shared between friends how many remain", Op::mod},
      {"word_change", "shopper pays note and receives change owed", Op::sub}}},
    {"table_qa", "table_lookup", true,
     {{"table_max", "which column value is largest in the quarterly table", Op::max},
      {"table_sum", "sum the two highlighted cells of the ledger table", Op::add},
      {"table_delta", "difference between first and last rows of the table", Op::sub}}},
    {"document_qa", "long_reading", true,
     {{"doc_count", "count of incidents reported across the memo paragraphs", Op::add},
      {"doc_ratio", "remainder when the budget is split per department in the report", Op::mod},
      {"doc_peak", "highest figure quoted anywhere in the briefing", Op::max}}},
};

std::int64_t apply_op(Op op, std::int64_t a, std::int64_t b) {
    switch (op) {
        case Op::add: return a + b;
        case Op::sub: return a - b;
        case Op::mul: return a * b;
        case Op::max: return a > b ? a : b;
        case Op::mod: return a % b;
    }
    return 0;
}

std::string long_context_for(std::string_view type, std::int64_t a, std::int64_t b) {
    std::string ctx;
    int row = 0;
    while (ctx.size() < 620) {
        ++row;
        ctx += "Row " + std::to_string(row) + " of the " + std::string(type) + " source lists entries " +
               std::to_string(a + row) + " and " + std::to_string(b + 2 * row) + "; ";
    }
    ctx += "highlighted values are " + std::to_string(a) + " and " + std::to_string(b) + ".";
    return ctx;
}

double base_difficulty(std::uint64_t seed, const std::string& id, bool long_context) {
    const double u = unit_interval(mix_seed({seed, fnv1a64(id), 0xba5eULL}));
    return 0.15 + 0.35 * u - (long_context ? 0.05 : 0.0);
}

struct Achievement {
    const char* name;
    const char* action;
};

const Achievement kChain[] = {
    {"collect_wood", "chop_tree"},
    {"place_table", "place_table"},
    {"make_pickaxe", "craft_pickaxe"},
    {"mine_stone", "mine"},
    {"smelt_iron", "smelt"},
};

}  // namespace

std::string_view to_string(EnvMode m) noexcept { return m == EnvMode::static_qa ? "static_qa" : "sequential"; }

SyntheticEnv SyntheticEnv::make(const std::string& name, std::uint64_t seed) {
    if (name == "static_qa") return static_qa(seed);
    if (name == "sequential") return sequential(seed);
    throw ValidationError("unknown environment '" + name + "' (expected static_qa or sequential)");
}

SyntheticEnv SyntheticEnv::static_qa(std::uint64_t seed) {
    SyntheticEnv env;
    env.mode_ = EnvMode::static_qa;
    env.seed_ = seed;
    // Diamond parse -> {arith, units} -> multi_step, then a chain.
    env.skills_ = {
        {"parse", {}},
        {"arith", {"parse"}},
        {"units", {"parse"}},
        {"multi_step", {"arith", "units"}},
        {"table_lookup", {"multi_step"}},
        {"long_reading", {"table_lookup"}},
        {"verify", {"long_reading"}},
        {"plan", {"verify"}},
    };
    for (const auto& tt : kStaticTypes) {
        TaskTypeSpec spec{tt.name, tt.resolver, tt.long_context, {}};
        for (const auto& fam : tt.families) {
            spec.families.emplace_back(fam.name);
            for (std::size_t i = 0; i < kTrainPerFamily + kHeldoutPerFamily; ++i) {
                Question q;
                q.id = std::string(fam.name) + "-" + std::to_string(i);
                q.task_type = tt.name;
                q.family = fam.name;
                const std::uint64_t h = mix_seed({seed, fnv1a64(q.id)});
                const std::int64_t a = 10 + static_cast<std::int64_t>(h % 90);
                const std::int64_t b = 2 + static_cast<std::int64_t>((h >> 20) % 40);
                q.text = "[q:" + q.id + "] " + fam.words + " " + std::to_string(a) + " " + std::to_string(b) +
                         " (pattern " + fam.name + ")";
                q.gold = std::to_string(apply_op(fam.op, a, b));
                if (tt.long_context) q.context = long_context_for(tt.name, a, b);
                q.base = base_difficulty(seed, q.id, tt.long_context);
                (i < kTrainPerFamily ? env.train_ : env.heldout_).push_back(std::move(q));
            }
        }
        env.task_types_.push_back(std::move(spec));
    }
    env.index();
    return env;
}

SyntheticEnv SyntheticEnv::sequential(std::uint64_t seed) {
    SyntheticEnv env;
    env.mode_ = EnvMode::sequential;
    env.seed_ = seed;
    const char* variants[] = {"near", "far", "night"};
    std::string prev;
    for (const auto& ach : kChain) {
        env.achievements_.emplace_back(ach.name);
        env.skills_.push_back({ach.name, prev.empty() ? std::vector<std::string>{} : std::vector<std::string>{prev}});
        prev = ach.name;

        TaskTypeSpec spec{std::string("achieve_") + ach.name, ach.name, false, {}};
        for (const char* v : variants) {
            const std::string fam = std::string(ach.name) + "_" + v;
            spec.families.push_back(fam);
            for (std::size_t i = 0; i < kTrainPerFamily + kHeldoutPerFamily; ++i) {
                Question q;
                q.id = fam + "-" + std::to_string(i);
                q.task_type = spec.name;
                q.family = fam;
                const std::uint64_t h = mix_seed({seed, fnv1a64(q.id)});
                q.text = "[q:" + q.id + "] agent at cell " + std::to_string(h % 64) + " " + v +
                         " the goal which action achieves " + ach.name + " next (pattern " + fam + ")";
                q.gold = ach.action;
                q.base = base_difficulty(seed, q.id, false);
                (i < kTrainPerFamily ? env.train_ : env.heldout_).push_back(std::move(q));
            }
        }
        env.task_types_.push_back(std::move(spec));
    }
    env.index();
    return env;
}

void SyntheticEnv::index() {
    by_id_.clear();
    for (std::size_t i = 0; i < train_.size(); ++i) by_id_[train_[i].id] = {true, i};
    for (std::size_t i = 0; i < heldout_.size(); ++i) by_id_[heldout_[i].id] = {false, i};
}

std::vector<Question> SyntheticEnv::evolution_pool(std::int64_t iteration, std::size_t size) const {
    if (train_.empty()) throw ValidationError("environment has no training questions");
    std::vector<Question> pool;
    pool.reserve(size);
    for (std::size_t slot = 0; slot < size; ++slot) {
        const std::uint64_t h =
            mix_seed({seed_, static_cast<std::uint64_t>(iteration), static_cast<std::uint64_t>(slot), 0x9001ULL});
        pool.push_back(train_[h % train_.size()]);
    }
    return pool;
}

std::vector<Question> SyntheticEnv::heldout_pool(std::size_t size) const {
    if (heldout_.empty()) throw ValidationError("environment has no held-out questions");
    std::vector<Question> pool;
    pool.reserve(size);
    for (std::size_t i = 0; i < size; ++i) pool.push_back(heldout_[i % heldout_.size()]);
    return pool;
}

const Question* SyntheticEnv::find(const std::string& id) const {
    auto it = by_id_.find(id);
    if (it == by_id_.end()) return nullptr;
    return it->second.first ? &train_[it->second.second] : &heldout_[it->second.second];
}

std::string SyntheticEnv::action_for(const std::string& achievement) const {
    for (const auto& a : kChain)
        if (achievement == a.name) return a.action;
    throw NotFoundError("unknown achievement '" + achievement + "'");
}

}  // namespace coevo
