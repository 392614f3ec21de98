#include "coevo/embedding.hpp"

#include <algorithm>
#include <cctype>
#include <string>

#include "coevo/errors.hpp"
#include "coevo/hash.hpp"

namespace coevo {

HashEmbedder::HashEmbedder(std::size_t dimension, std::uint64_t seed, int buckets_per_token)
    : dim_(dimension), seed_(seed), buckets_(buckets_per_token) {
    if (dim_ == 0) throw ValidationError("embedding dimension must be positive");
    if (buckets_ < 1) throw ValidationError("buckets_per_token must be positive");
}

Vector HashEmbedder::embed(std::string_view text) {
    Vector v = Vector::Zero(static_cast<Eigen::Index>(dim_));
    std::string token;
    auto flush = [&] {
        if (token.empty()) return;
        const std::uint64_t h = fnv1a64(token, fnv1a64("coevo", seed_));
        for (int b = 0; b < buckets_; ++b) {
            const std::uint64_t hb = splitmix64(h + static_cast<std::uint64_t>(b));
            const auto slot = static_cast<Eigen::Index>(hb % dim_);
            v[slot] += (hb >> 63) ? 1.0 : -1.0;
        }
        token.clear();
    };
    for (char c : text) {
        const auto uc = static_cast<unsigned char>(c);
        if (std::isalnum(uc) || c == '_')
            token.push_back(static_cast<char>(std::tolower(uc)));
        else
            flush();
    }
    flush();
    return v;
}

Vector normalized(const Vector& v) {
    const double n = v.norm();
    if (n == 0.0) return v;
    return v / n;
}

EmbeddingIndex::EmbeddingIndex(std::size_t dimension) : dim_(dimension) {
    if (dim_ == 0) throw ValidationError("embedding dimension must be positive");
}

void EmbeddingIndex::add(NodeId node, NodeId task_type, const Vector& v) {
    if (static_cast<std::size_t>(v.size()) != dim_)
        throw ValidationError("vector dimension " + std::to_string(v.size()) + " does not match index dimension " +
                              std::to_string(dim_));
    auto it = std::find_if(entries_.begin(), entries_.end(), [&](const IndexEntry& e) { return e.node == node; });
    if (it != entries_.end()) {
        it->task_type = task_type;
        it->vector = normalized(v);
        return;
    }
    entries_.push_back(IndexEntry{node, task_type, normalized(v)});
}

std::vector<SearchHit> EmbeddingIndex::search(const Vector& query, NodeId task_type,
                                              const std::function<bool(NodeId, double)>& keep) const {
    if (static_cast<std::size_t>(query.size()) != dim_)
        throw ValidationError("query dimension does not match index dimension");
    const Vector q = normalized(query);
    std::vector<SearchHit> hits;
    for (const auto& e : entries_) {
        if (e.task_type != task_type) continue;
        const double sim = q.dot(e.vector);
        if (keep && !keep(e.node, sim)) continue;
        hits.push_back(SearchHit{e.node, sim});
    }
    std::sort(hits.begin(), hits.end(), [](const SearchHit& a, const SearchHit& b) {
        if (a.similarity != b.similarity) return a.similarity > b.similarity;
        return a.node < b.node;
    });
    return hits;
}

}  // namespace coevo
