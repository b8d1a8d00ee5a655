#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "kvfocus/scoring.hpp"
#include "kvfocus/types.hpp"

namespace kvfocus {

// Prefix sums with a leading zero: cu[0] = 0, cu[i] = sum of lengths[0..i).
std::vector<std::size_t> build_cu(std::span<const std::size_t> lengths);

struct SegmentMeta {
    std::size_t batch = 0;
    std::size_t layer = 0;
    std::size_t head = 0;
    // One query frame per segment unless coalescing merged consecutive
    // frames that share this head's retained set.
    std::vector<std::size_t> query_frames;
    std::vector<std::int64_t> retained;  // ascending frame indices
};

// Selected QKV rows concatenated along the token dimension, one segment per
// (batch, query frame, head), delimited by the cumulative boundary arrays.
struct PackedBatch {
    std::size_t head_dim = 0;
    std::size_t tokens_per_frame = 0;
    std::size_t query_frame_count = 0;
    std::size_t head_count = 0;
    std::size_t layer = 0;

    std::vector<float> q_pack;  // [cu_q.back() x head_dim]
    std::vector<float> k_pack;  // [cu_k.back() x head_dim]
    std::vector<float> v_pack;
    std::vector<std::size_t> cu_q;
    std::vector<std::size_t> cu_k;
    std::vector<SegmentMeta> segments;

    std::size_t num_segments() const { return segments.size(); }

    // Boundary and length invariants; throws IntegrityError.
    void check_invariants() const;
};

struct PackOptions {
    // Merge consecutive query frames of one head that retain identical frame
    // sets into a single segment sharing the key/value rows. Off by default;
    // scattered output is identical either way.
    bool coalesce = false;
};

// Gathers the query rows of the chunk and the retained key/value rows from
// the cache, segment order batch-major then query frame then head. Requires
// a single-batch mask. Throws IntegrityError on frame indices missing from
// the cache.
PackedBatch pack(const SelectionMask& mask,
                 const std::vector<FrameTensor>& chunk_queries,
                 const KvCache& cache, std::size_t layer,
                 const PackOptions& options = {});

// Segment-wise softmax(Q K^T / sqrt(head_dim)) V with max-subtraction.
// Segments with no keys produce zero rows. Returns rows aligned with q_pack.
std::vector<float> varlen_attention(const PackedBatch& batch,
                                    std::size_t head_dim);

// Attention output back in the chunk layout.
struct ChunkOutput {
    std::size_t batch = 1;
    std::size_t query_frames = 0;
    std::size_t tokens = 0;
    std::size_t heads = 0;
    std::size_t head_dim = 0;
    std::vector<float> data;

    static ChunkOutput zeros(std::size_t batch, std::size_t query_frames,
                             std::size_t tokens, std::size_t heads,
                             std::size_t head_dim) {
        ChunkOutput o;
        o.batch = batch;
        o.query_frames = query_frames;
        o.tokens = tokens;
        o.heads = heads;
        o.head_dim = head_dim;
        o.data.assign(batch * query_frames * tokens * heads * head_dim, 0.0f);
        return o;
    }

    float& at(std::size_t b, std::size_t q, std::size_t t, std::size_t h,
              std::size_t d) {
        return data[(((b * query_frames + q) * tokens + t) * heads + h) *
                        head_dim +
                    d];
    }
    float at(std::size_t b, std::size_t q, std::size_t t, std::size_t h,
             std::size_t d) const {
        return data[(((b * query_frames + q) * tokens + t) * heads + h) *
                        head_dim +
                    d];
    }
};

// Writes each packed output row to its (query frame, token, head) slot.
// Every slot is written exactly once; overlaps raise IntegrityError.
ChunkOutput scatter(std::span<const float> o_pack, const PackedBatch& batch);

// Reference path for equivalence checks: full logits over every cached
// frame, non-retained frames masked to -inf per (query frame, head), stable
// softmax, then the value product. Kept independent of pack/varlen/scatter.
ChunkOutput dense_oracle(const std::vector<FrameTensor>& chunk_queries,
                         const KvCache& cache, const SelectionMask& mask);

// max |a - b| scaled by the largest reference magnitude.
double max_relative_error(const ChunkOutput& a, const ChunkOutput& b);

}  // namespace kvfocus
