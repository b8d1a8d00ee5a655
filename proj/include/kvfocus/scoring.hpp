#pragma once

#include <cstdint>
#include <vector>

#include "json.hpp"
#include "kvfocus/budgets.hpp"
#include "kvfocus/types.hpp"

namespace kvfocus {

// Frame tokens mean-pooled into contiguous groups: [groups x heads x head_dim].
struct GroupPooled {
    std::size_t groups = 0;
    std::size_t heads = 0;
    std::size_t head_dim = 0;
    std::vector<float> data;

    GroupPooled() = default;
    GroupPooled(std::size_t groups, std::size_t heads, std::size_t head_dim)
        : groups(groups),
          heads(heads),
          head_dim(head_dim),
          data(groups * heads * head_dim, 0.0f) {}

    float& at(std::size_t g, std::size_t h, std::size_t d) {
        return data[(g * heads + h) * head_dim + d];
    }
    float at(std::size_t g, std::size_t h, std::size_t d) const {
        return data[(g * heads + h) * head_dim + d];
    }
};

// Scores over historical frames, one slice per (batch, query frame, head).
struct ScoreTensor {
    enum class Kind { attention_raw, attention_std, diversity_std, fused };

    Kind kind = Kind::attention_raw;
    std::size_t batch = 1;
    std::size_t query_frames = 0;
    std::size_t heads = 0;
    std::size_t history = 0;  // F_h candidates
    std::vector<float> values;

    static ScoreTensor make(Kind kind, std::size_t batch,
                            std::size_t query_frames, std::size_t heads,
                            std::size_t history) {
        ScoreTensor t;
        t.kind = kind;
        t.batch = batch;
        t.query_frames = query_frames;
        t.heads = heads;
        t.history = history;
        t.values.assign(batch * query_frames * heads * history, 0.0f);
        return t;
    }

    float& at(std::size_t b, std::size_t q, std::size_t h, std::size_t k) {
        return values[((b * query_frames + q) * heads + h) * history + k];
    }
    float at(std::size_t b, std::size_t q, std::size_t h, std::size_t k) const {
        return values[((b * query_frames + q) * heads + h) * history + k];
    }

    bool same_shape(const ScoreTensor& other) const {
        return batch == other.batch && query_frames == other.query_frames &&
               heads == other.heads && history == other.history;
    }
};

// Mean-pools the frame's tokens into `groups` contiguous groups per head.
// Group g covers tokens [g*N/P, (g+1)*N/P). Throws ConfigError when groups
// is 0 or exceeds the token count.
GroupPooled group_pool(const FrameTensor& frame, std::size_t groups);

// Frame-level attention relevance of each historical frame to each query
// frame: the mean over group pairs of the scaled inner product
//   (1/P^2) sum_{u,v} <Qbar_u, Kbar_v> / sqrt(head_dim).
// One batch element per call.
ScoreTensor attention_score(const std::vector<GroupPooled>& query_frames,
                            const std::vector<GroupPooled>& key_frames,
                            std::size_t head_dim);

// Zero mean, unit variance along the historical-frame axis per
// (batch, query frame, head) slice, using the population deviation with an
// epsilon guard: constant slices map to all zeros.
ScoreTensor standardize(const ScoreTensor& scores, double epsilon);

// Average cosine similarity of each historical key frame to the per-token
// mean key, with epsilon-guarded norms. High = redundant.
std::vector<float> redundancy_scores(const std::vector<FrameTensor>& keys,
                                     double epsilon);  // [heads * F_h]

// Negative redundancy, standardized along the historical-frame axis.
// Returned with query_frames == 1; broadcast before fusing.
ScoreTensor diversity_score(const std::vector<FrameTensor>& keys,
                            double epsilon);

ScoreTensor broadcast_query_frames(const ScoreTensor& scores,
                                   std::size_t query_frames);

// lambda * attention + (1 - lambda) * diversity, elementwise.
ScoreTensor fuse_scores(const ScoreTensor& attention_std,
                        const ScoreTensor& diversity_std, double lambda);

struct SelectionEntry {
    std::vector<std::int64_t> retained;  // ascending frame indices
    std::vector<std::int64_t> reserved;  // subset of retained, ascending
};

// Which historical frames each (batch, query frame, head) keeps for one
// layer. `generated` records the current chunk's reserved frames so cost
// accounting can separate history from self-attention.
struct SelectionMask {
    std::size_t layer = 0;
    std::size_t batch = 1;
    std::size_t query_frames = 0;
    std::size_t heads = 0;
    std::vector<std::int64_t> generated;
    std::vector<SelectionEntry> entries;  // batch-major, then q_f, then head

    SelectionEntry& at(std::size_t b, std::size_t q, std::size_t h) {
        return entries[(b * query_frames + q) * heads + h];
    }
    const SelectionEntry& at(std::size_t b, std::size_t q, std::size_t h) const {
        return entries[(b * query_frames + q) * heads + h];
    }

    nlohmann::json to_json() const;
};

// Budget-constrained Top-K over the fused scores, with anchors and the
// current chunk's generated frames reserved outside the budget. Ties go to
// the more recent frame. The fused history axis must index
// cache.historical_indices(layer) in ascending order.
SelectionMask select_history(const ScoreTensor& fused,
                             const HeadBudgetTable& budgets,
                             const KvCache& cache, std::size_t layer);

}  // namespace kvfocus
