#include <algorithm>
#include <cmath>

#include "doctest.h"
#include "kvfocus/packed_attention.hpp"
#include "support.hpp"

using namespace kvfocus;

namespace {

struct Instance {
    KvCache cache{1, {}};
    std::vector<FrameTensor> queries;
    SelectionMask mask;
};

Instance random_instance(std::mt19937_64& rng, std::size_t fh,
                         std::size_t tokens, std::size_t heads,
                         std::size_t dim, std::size_t qf) {
    Instance inst;
    for (std::size_t f = 0; f < fh; ++f) {
        inst.cache.append(0,
                          kvtest::random_frame(static_cast<std::int64_t>(f),
                                               tokens, heads, dim, rng),
                          kvtest::random_frame(static_cast<std::int64_t>(f),
                                               tokens, heads, dim, rng),
                          false);
    }
    for (std::size_t q = 0; q < qf; ++q) {
        const std::int64_t idx = static_cast<std::int64_t>(fh + q);
        inst.queries.push_back(kvtest::random_frame(idx, tokens, heads, dim, rng));
        inst.cache.append(0, kvtest::random_frame(idx, tokens, heads, dim, rng),
                          kvtest::random_frame(idx, tokens, heads, dim, rng),
                          true);
    }
    inst.mask.layer = 0;
    inst.mask.query_frames = qf;
    inst.mask.heads = heads;
    inst.mask.generated.assign(inst.cache.generated().begin(),
                               inst.cache.generated().end());
    inst.mask.entries.resize(qf * heads);
    for (SelectionEntry& e : inst.mask.entries) {
        for (std::int64_t f : inst.cache.stored_indices(0)) {
            if (rng() & 1u) e.retained.push_back(f);
        }
    }
    return inst;
}

}  // namespace

TEST_SUITE("packed_attention") {

TEST_CASE("cumulative boundaries") {
    CHECK(build_cu(std::vector<std::size_t>{3, 2}) ==
          std::vector<std::size_t>{0, 3, 5});
    CHECK(build_cu(std::vector<std::size_t>{}) == std::vector<std::size_t>{0});
    CHECK(build_cu(std::vector<std::size_t>{0, 4}) ==
          std::vector<std::size_t>{0, 0, 4});
}

TEST_CASE("packing lengths and key ordering follow the mask") {
    auto rng = make_rng(30);
    const std::size_t tokens = 3, heads = 2, dim = 4;
    KvCache cache(1, {});
    for (std::int64_t f = 0; f < 8; ++f) {
        cache.append(0, kvtest::random_frame(f, tokens, heads, dim, rng),
                     kvtest::random_frame(f, tokens, heads, dim, rng), false);
    }
    std::vector<FrameTensor> queries{
        kvtest::random_frame(8, tokens, heads, dim, rng)};

    SelectionMask mask;
    mask.layer = 0;
    mask.query_frames = 1;
    mask.heads = heads;
    mask.entries.resize(heads);
    mask.at(0, 0, 0).retained = {0, 5};        // budget 2
    mask.at(0, 0, 1).retained = {1, 2, 4, 6};  // budget 4

    const PackedBatch batch = pack(mask, queries, cache, 0);
    REQUIRE(batch.num_segments() == 2);
    CHECK(batch.cu_q == std::vector<std::size_t>{0, 3, 6});
    CHECK(batch.cu_k == std::vector<std::size_t>{0, 2 * tokens, 6 * tokens});

    // Head 0's key rows are frame 0's tokens then frame 5's.
    for (std::size_t t = 0; t < tokens; ++t) {
        const auto k0 = cache.entry(0, 0).key.vec(t, 0);
        const auto k5 = cache.entry(0, 5).key.vec(t, 0);
        for (std::size_t d = 0; d < dim; ++d) {
            CHECK(batch.k_pack[t * dim + d] == k0[d]);
            CHECK(batch.k_pack[(tokens + t) * dim + d] == k5[d]);
        }
    }

    // Every retained key/value row appears exactly once per segment, in
    // ascending frame order.
    const SegmentMeta& head1 = batch.segments[1];
    CHECK(head1.retained == std::vector<std::int64_t>{1, 2, 4, 6});
    CHECK(head1.query_frames == std::vector<std::size_t>{0});
    for (std::size_t s = 0; s < batch.num_segments(); ++s) {
        const SegmentMeta& meta = batch.segments[s];
        std::size_t row = batch.cu_k[s];
        for (std::int64_t f : meta.retained) {
            const KvCache::Entry& e = cache.entry(0, f);
            for (std::size_t t = 0; t < tokens; ++t, ++row) {
                const auto key = e.key.vec(t, meta.head);
                const auto value = e.value.vec(t, meta.head);
                for (std::size_t d = 0; d < dim; ++d) {
                    CHECK(batch.k_pack[row * dim + d] == key[d]);
                    CHECK(batch.v_pack[row * dim + d] == value[d]);
                }
            }
        }
        CHECK(row == batch.cu_k[s + 1]);
    }
}

TEST_CASE("a dangling frame index is an integrity error") {
    auto rng = make_rng(31);
    Instance inst = random_instance(rng, 3, 2, 1, 4, 1);
    inst.mask.at(0, 0, 0).retained = {99};
    CHECK_THROWS_AS(pack(inst.mask, inst.queries, inst.cache, 0),
                    IntegrityError);
}

TEST_CASE("one query token against one key returns the value row") {
    auto rng = make_rng(32);
    Instance inst = random_instance(rng, 1, 1, 1, 4, 1);
    inst.mask.at(0, 0, 0).retained = {0};
    const PackedBatch batch = pack(inst.mask, inst.queries, inst.cache, 0);
    const std::vector<float> out = varlen_attention(batch, 4);
    const auto v = inst.cache.entry(0, 0).value.vec(0, 0);
    for (std::size_t d = 0; d < 4; ++d) {
        CHECK(out[d] == doctest::Approx(v[d]).epsilon(1e-6));
    }
}

TEST_CASE("a single all-covering segment equals dense unmasked attention") {
    auto rng = make_rng(33);
    const std::size_t tokens = 4, dim = 4;
    Instance inst = random_instance(rng, 3, tokens, 1, dim, 1);
    const std::vector<std::int64_t> all = inst.cache.stored_indices(0);
    inst.mask.at(0, 0, 0).retained = all;

    const PackedBatch batch = pack(inst.mask, inst.queries, inst.cache, 0);
    const ChunkOutput out = scatter(varlen_attention(batch, dim), batch);

    // Plain dense attention computed directly.
    const float scale = 1.0f / std::sqrt(static_cast<float>(dim));
    for (std::size_t t = 0; t < tokens; ++t) {
        const auto q = inst.queries[0].vec(t, 0);
        std::vector<double> weights;
        double denom = 0.0;
        double max_logit = -1e300;
        std::vector<double> logits;
        for (std::int64_t f : all) {
            for (std::size_t kt = 0; kt < tokens; ++kt) {
                const auto k = inst.cache.entry(0, f).key.vec(kt, 0);
                double dot = 0.0;
                for (std::size_t d = 0; d < dim; ++d) dot += q[d] * k[d];
                logits.push_back(dot * scale);
                max_logit = std::max(max_logit, logits.back());
            }
        }
        for (double l : logits) {
            weights.push_back(std::exp(l - max_logit));
            denom += weights.back();
        }
        std::vector<double> expected(dim, 0.0);
        std::size_t col = 0;
        for (std::int64_t f : all) {
            for (std::size_t kt = 0; kt < tokens; ++kt, ++col) {
                const auto v = inst.cache.entry(0, f).value.vec(kt, 0);
                for (std::size_t d = 0; d < dim; ++d) {
                    expected[d] += weights[col] / denom * v[d];
                }
            }
        }
        for (std::size_t d = 0; d < dim; ++d) {
            CHECK(out.at(0, 0, t, 0, d) ==
                  doctest::Approx(expected[d]).epsilon(1e-5));
        }
    }
}

TEST_CASE("scattered varlen output equals the dense masked oracle") {
    auto rng = make_rng(34);
    double worst = 0.0;
    for (int trial = 0; trial < 300; ++trial) {
        std::uniform_int_distribution<std::size_t> pick_hist(0, 8);
        std::uniform_int_distribution<std::size_t> pick_tokens(1, 8);
        std::uniform_int_distribution<std::size_t> pick_heads(1, 4);
        std::uniform_int_distribution<std::size_t> pick_dim(1, 8);
        std::uniform_int_distribution<std::size_t> pick_qf(1, 3);
        Instance inst =
            random_instance(rng, pick_hist(rng), pick_tokens(rng),
                            pick_heads(rng), pick_dim(rng), pick_qf(rng));
        const std::size_t dim = inst.queries[0].head_dim;
        const PackedBatch batch = pack(inst.mask, inst.queries, inst.cache, 0);
        const ChunkOutput packed = scatter(varlen_attention(batch, dim), batch);
        const ChunkOutput oracle = dense_oracle(inst.queries, inst.cache,
                                                inst.mask);
        worst = std::max(worst, max_relative_error(packed, oracle));
    }
    CHECK(worst <= 1e-5);
}

TEST_CASE("oracle softmax weights sum to one: unit values reproduce one") {
    auto rng = make_rng(35);
    Instance inst = random_instance(rng, 4, 3, 2, 4, 2);
    // Overwrite all cached values with ones; any convex combination is one.
    KvCache unit_cache(1, {});
    for (std::int64_t f : inst.cache.stored_indices(0)) {
        FrameTensor ones(f, 3, 2, 4);
        ones.data.assign(ones.data.size(), 1.0f);
        unit_cache.append(0, inst.cache.entry(0, f).key, std::move(ones),
                          inst.cache.generated().count(f) > 0);
    }
    for (SelectionEntry& e : inst.mask.entries) {
        if (e.retained.empty()) e.retained = {0};
    }
    const ChunkOutput oracle = dense_oracle(inst.queries, unit_cache, inst.mask);
    for (float v : oracle.data) {
        CHECK(v == doctest::Approx(1.0f).epsilon(1e-6));
    }
}

TEST_CASE("outputs stay inside the retained values' envelope") {
    auto rng = make_rng(36);
    for (int trial = 0; trial < 50; ++trial) {
        Instance inst = random_instance(rng, 5, 2, 2, 4, 2);
        const PackedBatch batch = pack(inst.mask, inst.queries, inst.cache, 0);
        const ChunkOutput out = scatter(varlen_attention(batch, 4), batch);
        for (std::size_t q = 0; q < 2; ++q) {
            for (std::size_t h = 0; h < 2; ++h) {
                const auto& retained = inst.mask.at(0, q, h).retained;
                for (std::size_t d = 0; d < 4; ++d) {
                    float lo = 0.0f, hi = 0.0f;
                    if (!retained.empty()) {
                        lo = 1e30f;
                        hi = -1e30f;
                        for (std::int64_t f : retained) {
                            const auto& value = inst.cache.entry(0, f).value;
                            for (std::size_t t = 0; t < 2; ++t) {
                                lo = std::min(lo, value.at(t, h, d));
                                hi = std::max(hi, value.at(t, h, d));
                            }
                        }
                    }
                    for (std::size_t t = 0; t < 2; ++t) {
                        const float v = out.at(0, q, t, h, d);
                        CHECK(v >= lo - 1e-5f);
                        CHECK(v <= hi + 1e-5f);
                    }
                }
            }
        }
    }
}

TEST_CASE("empty retained sets produce zero output rows") {
    auto rng = make_rng(37);
    Instance inst = random_instance(rng, 3, 2, 1, 4, 1);
    inst.mask.at(0, 0, 0).retained.clear();
    const PackedBatch batch = pack(inst.mask, inst.queries, inst.cache, 0);
    const ChunkOutput packed = scatter(varlen_attention(batch, 4), batch);
    const ChunkOutput oracle = dense_oracle(inst.queries, inst.cache, inst.mask);
    for (std::size_t i = 0; i < packed.data.size(); ++i) {
        CHECK(packed.data[i] == 0.0f);
        CHECK(oracle.data[i] == 0.0f);
    }
}

TEST_CASE("scatter round trip and segment-order independence") {
    auto rng = make_rng(38);
    Instance inst = random_instance(rng, 4, 2, 3, 4, 2);
    PackedBatch batch = pack(inst.mask, inst.queries, inst.cache, 0);
    const std::vector<float> o_pack = varlen_attention(batch, 4);
    const ChunkOutput out = scatter(o_pack, batch);

    // Re-packing the scattered output in pack order reproduces o_pack.
    std::vector<float> repacked;
    for (std::size_t s = 0; s < batch.num_segments(); ++s) {
        const SegmentMeta& meta = batch.segments[s];
        for (std::size_t q : meta.query_frames) {
            for (std::size_t t = 0; t < batch.tokens_per_frame; ++t) {
                for (std::size_t d = 0; d < batch.head_dim; ++d) {
                    repacked.push_back(out.at(0, q, t, meta.head, d));
                }
            }
        }
    }
    CHECK(repacked == o_pack);

    // Swapping two whole segments (rows and meta together) scatters the same.
    PackedBatch swapped = batch;
    if (swapped.num_segments() >= 2) {
        // Rebuild with segments 0 and 1 exchanged.
        std::vector<std::size_t> order(swapped.num_segments());
        for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
        std::swap(order[0], order[1]);
        PackedBatch rebuilt;
        rebuilt.head_dim = batch.head_dim;
        rebuilt.tokens_per_frame = batch.tokens_per_frame;
        rebuilt.query_frame_count = batch.query_frame_count;
        rebuilt.head_count = batch.head_count;
        rebuilt.layer = batch.layer;
        std::vector<std::size_t> q_lengths, k_lengths;
        std::vector<float> o_perm;
        for (std::size_t i : order) {
            q_lengths.push_back(batch.cu_q[i + 1] - batch.cu_q[i]);
            k_lengths.push_back(batch.cu_k[i + 1] - batch.cu_k[i]);
        }
        rebuilt.cu_q = build_cu(q_lengths);
        rebuilt.cu_k = build_cu(k_lengths);
        for (std::size_t i : order) {
            rebuilt.segments.push_back(batch.segments[i]);
            for (std::size_t r = batch.cu_q[i]; r < batch.cu_q[i + 1]; ++r) {
                for (std::size_t d = 0; d < batch.head_dim; ++d) {
                    rebuilt.q_pack.push_back(batch.q_pack[r * batch.head_dim + d]);
                    o_perm.push_back(o_pack[r * batch.head_dim + d]);
                }
            }
            for (std::size_t r = batch.cu_k[i]; r < batch.cu_k[i + 1]; ++r) {
                for (std::size_t d = 0; d < batch.head_dim; ++d) {
                    rebuilt.k_pack.push_back(batch.k_pack[r * batch.head_dim + d]);
                    rebuilt.v_pack.push_back(batch.v_pack[r * batch.head_dim + d]);
                }
            }
        }
        const ChunkOutput out2 = scatter(o_perm, rebuilt);
        CHECK(out2.data == out.data);
    }
}

TEST_CASE("overlapping scatter targets are an integrity error") {
    auto rng = make_rng(39);
    Instance inst = random_instance(rng, 2, 1, 1, 2, 1);
    inst.mask.at(0, 0, 0).retained = {0};
    PackedBatch batch = pack(inst.mask, inst.queries, inst.cache, 0);
    // Duplicate the single segment so its rows collide.
    batch.segments.push_back(batch.segments[0]);
    batch.cu_q = {0, 1, 2};
    batch.cu_k = {0, 1, 2};
    batch.q_pack.resize(2 * batch.head_dim);
    batch.k_pack.resize(2 * batch.head_dim);
    batch.v_pack.resize(2 * batch.head_dim);
    const std::vector<float> o_pack(2 * batch.head_dim, 0.0f);
    CHECK_THROWS_AS(scatter(o_pack, batch), IntegrityError);
}

TEST_CASE("coalescing merges equal consecutive masks and is output-identical") {
    auto rng = make_rng(40);
    const std::size_t tokens = 2, heads = 2, dim = 4, qf = 3;
    Instance inst = random_instance(rng, 4, tokens, heads, dim, qf);
    // Make query frames 0 and 1 share head 0's retained set.
    inst.mask.at(0, 1, 0).retained = inst.mask.at(0, 0, 0).retained;

    const PackedBatch plain = pack(inst.mask, inst.queries, inst.cache, 0);
    PackOptions coalesce;
    coalesce.coalesce = true;
    const PackedBatch merged = pack(inst.mask, inst.queries, inst.cache, 0,
                                    coalesce);
    CHECK(merged.num_segments() <= plain.num_segments());
    CHECK(merged.k_pack.size() <= plain.k_pack.size());

    const ChunkOutput a = scatter(varlen_attention(plain, dim), plain);
    const ChunkOutput b = scatter(varlen_attention(merged, dim), merged);
    CHECK(a.data == b.data);
}

TEST_CASE("pack rejects masks from another layer or batch") {
    auto rng = make_rng(41);
    Instance inst = random_instance(rng, 2, 1, 1, 2, 1);
    inst.mask.layer = 1;
    CHECK_THROWS_AS(pack(inst.mask, inst.queries, inst.cache, 0),
                    IntegrityError);
    inst.mask.layer = 0;
    inst.mask.batch = 2;
    CHECK_THROWS_AS(pack(inst.mask, inst.queries, inst.cache, 0), ConfigError);
}

}  // TEST_SUITE
