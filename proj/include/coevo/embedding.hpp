#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string_view>
#include <vector>

#include <Eigen/Core>

#include "coevo/graph.hpp"

namespace coevo {

using Vector = Eigen::VectorXd;

/// Text -> fixed-dimension vector. Implementations need not normalize.
class Embedder {
public:
    virtual ~Embedder() = default;
    virtual std::size_t dimension() const = 0;
    virtual Vector embed(std::string_view text) = 0;
};

/// Deterministic feature-hashing embedder: every lower-cased alphanumeric
/// token adds signed unit weight to a few seeded hash buckets.
class HashEmbedder final : public Embedder {
public:
    explicit HashEmbedder(std::size_t dimension = 64, std::uint64_t seed = 0x5eed, int buckets_per_token = 4);

    std::size_t dimension() const override { return dim_; }
    Vector embed(std::string_view text) override;

private:
    std::size_t dim_;
    std::uint64_t seed_;
    int buckets_;
};

/// L2-normalized copy; the zero vector stays zero.
Vector normalized(const Vector& v);

struct IndexEntry {
    NodeId node = 0;
    NodeId task_type = 0;
    Vector vector;  // unit length (or zero)
};

struct SearchHit {
    NodeId node = 0;
    double similarity = 0.0;
    bool operator==(const SearchHit&) const = default;
};

/// Exhaustive cosine index over entries tagged with a task type.
class EmbeddingIndex {
public:
    explicit EmbeddingIndex(std::size_t dimension);

    std::size_t dimension() const noexcept { return dim_; }
    std::size_t size() const noexcept { return entries_.size(); }
    const std::vector<IndexEntry>& entries() const noexcept { return entries_; }

    /// Stores the normalized vector. Throws ValidationError on a dimension
    /// mismatch. Re-adding a node replaces its entry.
    void add(NodeId node, NodeId task_type, const Vector& v);
    void clear() { entries_.clear(); }

    /// Entries of `task_type` that pass `keep`, by descending similarity with
    /// ties broken by ascending node id.
    std::vector<SearchHit> search(const Vector& query, NodeId task_type,
                                  const std::function<bool(NodeId, double)>& keep = {}) const;

private:
    std::size_t dim_;
    std::vector<IndexEntry> entries_;
};

}  // namespace coevo
