#include "kvfocus/packed_attention.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace kvfocus {

std::vector<std::size_t> build_cu(std::span<const std::size_t> lengths) {
    std::vector<std::size_t> cu(lengths.size() + 1, 0);
    for (std::size_t i = 0; i < lengths.size(); ++i) {
        cu[i + 1] = cu[i] + lengths[i];
    }
    return cu;
}

void PackedBatch::check_invariants() const {
    auto fail = [](const std::string& what) { throw IntegrityError("packed batch: " + what); };
    if (cu_q.size() != segments.size() + 1 || cu_k.size() != segments.size() + 1) {
        fail("boundary arrays must have one entry per segment plus one");
    }
    if (cu_q.front() != 0 || cu_k.front() != 0) fail("boundaries must start at 0");
    for (std::size_t i = 0; i + 1 < cu_q.size(); ++i) {
        if (cu_q[i + 1] < cu_q[i] || cu_k[i + 1] < cu_k[i]) {
            fail("boundaries must be non-decreasing");
        }
    }
    if (cu_q.back() * head_dim != q_pack.size()) fail("q_pack size mismatch");
    if (cu_k.back() * head_dim != k_pack.size()) fail("k_pack size mismatch");
    if (cu_k.back() * head_dim != v_pack.size()) fail("v_pack size mismatch");
    for (std::size_t i = 0; i < segments.size(); ++i) {
        const std::size_t q_len = cu_q[i + 1] - cu_q[i];
        const std::size_t k_len = cu_k[i + 1] - cu_k[i];
        if (q_len != segments[i].query_frames.size() * tokens_per_frame) {
            fail("segment query length must be query frames x tokens_per_frame");
        }
        if (k_len != segments[i].retained.size() * tokens_per_frame) {
            fail("segment key length must be retained frames x tokens_per_frame");
        }
    }
}

PackedBatch pack(const SelectionMask& mask,
                 const std::vector<FrameTensor>& chunk_queries,
                 const KvCache& cache, std::size_t layer,
                 const PackOptions& options) {
    if (mask.batch != 1) {
        throw ConfigError("pack: only single-batch masks are supported");
    }
    if (mask.layer != layer) {
        throw IntegrityError("pack: mask belongs to layer " +
                             std::to_string(mask.layer) + ", not " +
                             std::to_string(layer));
    }
    if (chunk_queries.size() != mask.query_frames) {
        throw ShapeError("pack: chunk has " + std::to_string(chunk_queries.size()) +
                         " query frames, mask expects " +
                         std::to_string(mask.query_frames));
    }
    if (chunk_queries.empty()) {
        throw ShapeError("pack: empty chunk");
    }
    const std::size_t tokens = chunk_queries[0].tokens;
    const std::size_t dim = chunk_queries[0].head_dim;
    for (const FrameTensor& f : chunk_queries) {
        if (!f.same_shape(chunk_queries[0]) || f.heads != mask.heads) {
            throw ShapeError("pack: chunk query frames must share the mask shape");
        }
    }

    // Segment plan: (q_f, h) pairs in order, optionally with consecutive
    // query frames of equal retained sets merged per head.
    struct Plan {
        std::vector<std::size_t> query_frames;
        std::size_t head;
        const SelectionEntry* entry;
    };
    std::vector<Plan> plans;
    if (!options.coalesce) {
        for (std::size_t q = 0; q < mask.query_frames; ++q) {
            for (std::size_t h = 0; h < mask.heads; ++h) {
                plans.push_back(Plan{{q}, h, &mask.at(0, q, h)});
            }
        }
    } else {
        std::vector<std::size_t> next_q(mask.heads, 0);
        for (std::size_t q = 0; q < mask.query_frames; ++q) {
            for (std::size_t h = 0; h < mask.heads; ++h) {
                if (next_q[h] > q) continue;  // merged into an earlier segment
                const SelectionEntry& entry = mask.at(0, q, h);
                Plan plan{{q}, h, &entry};
                std::size_t run = q + 1;
                while (run < mask.query_frames &&
                       mask.at(0, run, h).retained == entry.retained) {
                    plan.query_frames.push_back(run);
                    ++run;
                }
                next_q[h] = run;
                plans.push_back(std::move(plan));
            }
        }
    }

    PackedBatch out;
    out.head_dim = dim;
    out.tokens_per_frame = tokens;
    out.query_frame_count = mask.query_frames;
    out.head_count = mask.heads;
    out.layer = layer;

    std::vector<std::size_t> q_lengths, k_lengths;
    q_lengths.reserve(plans.size());
    k_lengths.reserve(plans.size());
    for (const Plan& plan : plans) {
        q_lengths.push_back(plan.query_frames.size() * tokens);
        k_lengths.push_back(plan.entry->retained.size() * tokens);
    }
    out.cu_q = build_cu(q_lengths);
    out.cu_k = build_cu(k_lengths);
    out.q_pack.resize(out.cu_q.back() * dim);
    out.k_pack.resize(out.cu_k.back() * dim);
    out.v_pack.resize(out.cu_k.back() * dim);

    for (std::size_t s = 0; s < plans.size(); ++s) {
        const Plan& plan = plans[s];
        float* q_dst = out.q_pack.data() + out.cu_q[s] * dim;
        for (std::size_t q : plan.query_frames) {
            const FrameTensor& frame = chunk_queries[q];
            for (std::size_t t = 0; t < tokens; ++t) {
                const auto src = frame.vec(t, plan.head);
                std::copy(src.begin(), src.end(), q_dst);
                q_dst += dim;
            }
        }
        float* k_dst = out.k_pack.data() + out.cu_k[s] * dim;
        float* v_dst = out.v_pack.data() + out.cu_k[s] * dim;
        for (std::int64_t frame_idx : plan.entry->retained) {
            if (!cache.has_frame(layer, frame_idx)) {
                throw IntegrityError("pack: retained frame " +
                                     std::to_string(frame_idx) +
                                     " not present in cache layer " +
                                     std::to_string(layer));
            }
            const KvCache::Entry& entry = cache.entry(layer, frame_idx);
            if (entry.key.tokens != tokens || entry.key.head_dim != dim) {
                throw ShapeError("pack: cached frame shape mismatch");
            }
            for (std::size_t t = 0; t < tokens; ++t) {
                const auto ks = entry.key.vec(t, plan.head);
                const auto vs = entry.value.vec(t, plan.head);
                std::copy(ks.begin(), ks.end(), k_dst);
                std::copy(vs.begin(), vs.end(), v_dst);
                k_dst += dim;
                v_dst += dim;
            }
        }
        SegmentMeta meta;
        meta.batch = 0;
        meta.layer = layer;
        meta.head = plan.head;
        meta.query_frames = plan.query_frames;
        meta.retained = plan.entry->retained;
        out.segments.push_back(std::move(meta));
    }
    out.check_invariants();
    return out;
}

std::vector<float> varlen_attention(const PackedBatch& batch,
                                    std::size_t head_dim) {
    if (head_dim != batch.head_dim) {
        throw ShapeError("varlen_attention: head_dim mismatch");
    }
    batch.check_invariants();
    const std::size_t dim = batch.head_dim;
    std::vector<float> out(batch.q_pack.size(), 0.0f);
    const float scale = 1.0f / std::sqrt(static_cast<float>(dim));
    std::vector<float> logits;
    for (std::size_t s = 0; s < batch.num_segments(); ++s) {
        const std::size_t q_begin = batch.cu_q[s], q_end = batch.cu_q[s + 1];
        const std::size_t k_begin = batch.cu_k[s], k_end = batch.cu_k[s + 1];
        const std::size_t k_len = k_end - k_begin;
        if (k_len == 0) continue;  // zero output rows for empty key segments
        logits.resize(k_len);
        for (std::size_t qi = q_begin; qi < q_end; ++qi) {
            const float* qrow = batch.q_pack.data() + qi * dim;
            float max_logit = -std::numeric_limits<float>::infinity();
            for (std::size_t ki = 0; ki < k_len; ++ki) {
                const float* krow = batch.k_pack.data() + (k_begin + ki) * dim;
                float dot = 0.0f;
                for (std::size_t d = 0; d < dim; ++d) dot += qrow[d] * krow[d];
                logits[ki] = dot * scale;
                max_logit = std::max(max_logit, logits[ki]);
            }
            float denom = 0.0f;
            for (std::size_t ki = 0; ki < k_len; ++ki) {
                logits[ki] = std::exp(logits[ki] - max_logit);
                denom += logits[ki];
            }
            float* orow = out.data() + qi * dim;
            const float inv_denom = 1.0f / denom;
            for (std::size_t ki = 0; ki < k_len; ++ki) {
                const float w = logits[ki] * inv_denom;
                const float* vrow = batch.v_pack.data() + (k_begin + ki) * dim;
                for (std::size_t d = 0; d < dim; ++d) orow[d] += w * vrow[d];
            }
        }
    }
    return out;
}

ChunkOutput scatter(std::span<const float> o_pack, const PackedBatch& batch) {
    batch.check_invariants();
    if (o_pack.size() != batch.q_pack.size()) {
        throw ShapeError("scatter: packed output size mismatch");
    }
    ChunkOutput out = ChunkOutput::zeros(1, batch.query_frame_count,
                                         batch.tokens_per_frame,
                                         batch.head_count, batch.head_dim);
    std::vector<bool> written(out.data.size() / batch.head_dim, false);
    for (std::size_t s = 0; s < batch.num_segments(); ++s) {
        const SegmentMeta& meta = batch.segments[s];
        std::size_t row = batch.cu_q[s];
        for (std::size_t q : meta.query_frames) {
            for (std::size_t t = 0; t < batch.tokens_per_frame; ++t, ++row) {
                const std::size_t slot =
                    ((q * batch.tokens_per_frame) + t) * batch.head_count +
                    meta.head;
                if (written[slot]) {
                    throw IntegrityError("scatter: output row written twice");
                }
                written[slot] = true;
                const float* src = o_pack.data() + row * batch.head_dim;
                for (std::size_t d = 0; d < batch.head_dim; ++d) {
                    out.at(0, q, t, meta.head, d) = src[d];
                }
            }
        }
    }
    if (!std::all_of(written.begin(), written.end(), [](bool w) { return w; })) {
        throw IntegrityError("scatter: some output rows were never written");
    }
    return out;
}

ChunkOutput dense_oracle(const std::vector<FrameTensor>& chunk_queries,
                         const KvCache& cache, const SelectionMask& mask) {
    if (mask.batch != 1) {
        throw ConfigError("dense_oracle: only single-batch masks are supported");
    }
    if (chunk_queries.size() != mask.query_frames || chunk_queries.empty()) {
        throw ShapeError("dense_oracle: chunk/mask query frame mismatch");
    }
    const std::size_t tokens = chunk_queries[0].tokens;
    const std::size_t dim = chunk_queries[0].head_dim;
    const std::vector<std::int64_t> stored = cache.stored_indices(mask.layer);
    ChunkOutput out = ChunkOutput::zeros(1, mask.query_frames, tokens,
                                         mask.heads, dim);
    const float neg_inf = -std::numeric_limits<float>::infinity();
    const float scale = 1.0f / std::sqrt(static_cast<float>(dim));
    std::vector<float> logits(stored.size() * tokens);
    for (std::size_t q = 0; q < mask.query_frames; ++q) {
        for (std::size_t h = 0; h < mask.heads; ++h) {
            const SelectionEntry& entry = mask.at(0, q, h);
            const std::set<std::int64_t> retained(entry.retained.begin(),
                                                  entry.retained.end());
            for (std::int64_t f : entry.retained) {
                if (!cache.has_frame(mask.layer, f)) {
                    throw IntegrityError("dense_oracle: retained frame " +
                                         std::to_string(f) + " not in cache");
                }
            }
            if (retained.empty()) continue;  // degenerate: zero output
            for (std::size_t t = 0; t < tokens; ++t) {
                const auto qrow = chunk_queries[q].vec(t, h);
                float max_logit = neg_inf;
                std::size_t col = 0;
                for (std::size_t fi = 0; fi < stored.size(); ++fi) {
                    const bool keep = retained.count(stored[fi]) > 0;
                    const KvCache::Entry& e = cache.entry(mask.layer, stored[fi]);
                    for (std::size_t kt = 0; kt < tokens; ++kt, ++col) {
                        if (!keep) {
                            logits[col] = neg_inf;
                            continue;
                        }
                        const auto krow = e.key.vec(kt, h);
                        float dot = 0.0f;
                        for (std::size_t d = 0; d < dim; ++d) {
                            dot += qrow[d] * krow[d];
                        }
                        logits[col] = dot * scale;
                        max_logit = std::max(max_logit, logits[col]);
                    }
                }
                float denom = 0.0f;
                for (std::size_t c = 0; c < col; ++c) {
                    logits[c] = logits[c] == neg_inf
                                    ? 0.0f
                                    : std::exp(logits[c] - max_logit);
                    denom += logits[c];
                }
                const float inv_denom = 1.0f / denom;
                col = 0;
                for (std::size_t fi = 0; fi < stored.size(); ++fi) {
                    const KvCache::Entry& e = cache.entry(mask.layer, stored[fi]);
                    for (std::size_t kt = 0; kt < tokens; ++kt, ++col) {
                        const float w = logits[col] * inv_denom;
                        if (w == 0.0f) continue;
                        const auto vrow = e.value.vec(kt, h);
                        for (std::size_t d = 0; d < dim; ++d) {
                            out.at(0, q, t, h, d) += w * vrow[d];
                        }
                    }
                }
            }
        }
    }
    return out;
}

double max_relative_error(const ChunkOutput& a, const ChunkOutput& b) {
    if (a.data.size() != b.data.size()) {
        throw ShapeError("max_relative_error: size mismatch");
    }
    double max_abs_diff = 0.0;
    double ref_scale = 0.0;
    for (std::size_t i = 0; i < a.data.size(); ++i) {
        max_abs_diff = std::max(
            max_abs_diff,
            std::abs(static_cast<double>(a.data[i]) - static_cast<double>(b.data[i])));
        ref_scale = std::max(ref_scale, std::abs(static_cast<double>(b.data[i])));
    }
    return max_abs_diff / std::max(ref_scale, 1e-12);
}

}  // namespace kvfocus
