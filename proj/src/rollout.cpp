#include "kvfocus/rollout.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <ostream>
#include <sstream>

#include "kvfocus/packed_attention.hpp"
#include "kvfocus/rng.hpp"
#include "kvfocus/rope.hpp"

namespace kvfocus {

std::string_view Policy::name() const {
    switch (kind) {
        case Kind::dense_window: return "dense_window";
        case Kind::attention_sink: return "attention_sink";
        case Kind::attention_only: return "attention_only";
        case Kind::diversity_only: return "diversity_only";
        case Kind::focused: return "focused";
    }
    return "unknown";
}

Policy Policy::parse(std::string_view name) {
    for (Kind kind : {Kind::dense_window, Kind::attention_sink,
                      Kind::attention_only, Kind::diversity_only, Kind::focused}) {
        Policy p{kind};
        if (p.name() == name) return p;
    }
    throw ConfigError("unknown policy '" + std::string(name) + "'");
}

void RolloutTrace::write_csv(std::ostream& out) const {
    out << "chunk,policy,frame_cost,cache_frames,mean_budget_utilization,"
           "divergence_vs_dense\n";
    for (const TraceRow& r : rows) {
        std::ostringstream line;
        line.precision(17);
        line << r.chunk << "," << r.policy << "," << r.frame_cost << ","
             << r.cache_frames << "," << r.mean_budget_utilization << ","
             << r.divergence_vs_dense << "\n";
        out << line.str();
    }
}

std::string RolloutTrace::to_csv() const {
    std::ostringstream os;
    write_csv(os);
    return os.str();
}

nlohmann::json ChunkMasks::to_json() const {
    nlohmann::json j;
    j["chunk"] = chunk;
    j["generated"] = generated;
    j["anchors"] = anchors;
    nlohmann::json entries = nlohmann::json::array();
    for (const SelectionMask& mask : layers) {
        const nlohmann::json mask_json = mask.to_json();
        for (const auto& e : mask_json.at("entries")) {
            entries.push_back(e);
        }
    }
    j["entries"] = std::move(entries);
    return j;
}

nlohmann::json masks_to_json(const std::vector<ChunkMasks>& masks) {
    nlohmann::json j = nlohmann::json::array();
    for (const ChunkMasks& m : masks) j.push_back(m.to_json());
    return j;
}

namespace {

// Uniform retained set (window policies): same frames for every
// (query frame, head).
SelectionMask uniform_mask(std::size_t layer, std::size_t query_frames,
                           std::size_t heads,
                           const std::vector<std::int64_t>& retained,
                           const std::vector<std::int64_t>& reserved,
                           const std::set<std::int64_t>& generated) {
    SelectionMask mask;
    mask.layer = layer;
    mask.batch = 1;
    mask.query_frames = query_frames;
    mask.heads = heads;
    mask.generated.assign(generated.begin(), generated.end());
    SelectionEntry entry;
    entry.retained = retained;
    entry.reserved = reserved;
    std::sort(entry.retained.begin(), entry.retained.end());
    std::sort(entry.reserved.begin(), entry.reserved.end());
    mask.entries.assign(query_frames * heads, entry);
    return mask;
}

struct ChunkStats {
    std::uint64_t frame_cost = 0;
    double utilization_sum = 0.0;
    std::size_t utilization_count = 0;
};

}  // namespace

RolloutResult run_rollout(const RunConfig& config, const Policy& policy,
                          std::size_t num_chunks,
                          const RolloutOptions& options) {
    config.validate();
    if (num_chunks < 1) {
        throw ConfigError("run_rollout: num_chunks must be >= 1");
    }
    if (policy.needs_budgets()) {
        if (options.budgets == nullptr) {
            throw ConfigError("run_rollout: policy '" + std::string(policy.name()) +
                              "' requires a budget table");
        }
        if (options.budgets->layers != config.shape.num_layers ||
            options.budgets->heads != config.shape.heads_per_layer) {
            throw ConfigError("run_rollout: budget table shape mismatch");
        }
    }
    if (options.masked_head) {
        if (options.masked_head->layer >= config.shape.num_layers ||
            options.masked_head->head >= config.shape.heads_per_layer) {
            throw ConfigError("run_rollout: masked head out of range");
        }
    }

    // The dense reference for divergence reporting shares model and stream.
    std::vector<FrameTensor> dense_reference;
    if (options.compute_divergence && policy.kind != Policy::Kind::dense_window) {
        RolloutOptions ref = options;
        ref.compute_divergence = false;
        ref.collect_masks = false;
        ref.budgets = nullptr;
        dense_reference =
            run_rollout(config, Policy{Policy::Kind::dense_window}, num_chunks, ref)
                .trajectory;
    }

    const ModelShape& shape = config.shape;
    const std::uint64_t stream_seed =
        options.stream_seed ? *options.stream_seed : config.seed;
    const std::vector<FrameTensor> stream =
        make_synthetic_stream(config, num_chunks, stream_seed);

    SyntheticModel default_model(shape,
                                 derive_seed(config.seed, seed_tag::model_weights));
    const SyntheticModel& model = options.model ? *options.model : default_model;

    const RopeSpec rope = config.rope_spec();
    KvCache cache(shape.num_layers, config.anchors);

    // When scoring on raw activations, keys must be pooled before rotation;
    // the cache only stores the rotated form.
    const bool pool_raw_keys = !config.score_on_rotated && policy.needs_budgets();
    std::vector<std::map<std::int64_t, GroupPooled>> raw_key_pool(
        shape.num_layers);

    double lambda = config.lambda;
    if (policy.kind == Policy::Kind::attention_only) lambda = 1.0;
    if (policy.kind == Policy::Kind::diversity_only) lambda = 0.0;

    RolloutResult result;
    result.trajectory.reserve(num_chunks * shape.chunk_frames);

    for (std::size_t chunk = 0; chunk < num_chunks; ++chunk) {
        std::vector<FrameTensor> latents(
            stream.begin() + static_cast<std::ptrdiff_t>(chunk * shape.chunk_frames),
            stream.begin() +
                static_cast<std::ptrdiff_t>((chunk + 1) * shape.chunk_frames));

        ChunkStats stats;
        ChunkMasks chunk_masks;
        chunk_masks.chunk = chunk;

        for (std::size_t layer = 0; layer < shape.num_layers; ++layer) {
            // Project and rotate; the chunk's K/V join the cache before
            // attention so the chunk can attend to itself.
            std::vector<FrameTensor> queries_rot;
            std::vector<FrameTensor> queries_raw;
            queries_rot.reserve(latents.size());
            for (const FrameTensor& x : latents) {
                FrameTensor q = model.project(layer, SyntheticModel::Proj::query, x);
                if (!config.score_on_rotated) queries_raw.push_back(q);
                apply_rope_frame(q, rope);
                queries_rot.push_back(std::move(q));

                FrameTensor k = model.project(layer, SyntheticModel::Proj::key, x);
                if (pool_raw_keys) {
                    raw_key_pool[layer].emplace(k.frame_index,
                                                group_pool(k, config.groups));
                }
                apply_rope_frame(k, rope);
                FrameTensor v = model.project(layer, SyntheticModel::Proj::value, x);
                cache.append(layer, std::move(k), std::move(v), /*generated=*/true);
            }

            const std::vector<std::int64_t> history = cache.historical_indices(layer);
            const std::vector<std::int64_t> anchors = cache.effective_anchors(layer);
            std::vector<std::int64_t> generated(cache.generated().begin(),
                                                cache.generated().end());

            SelectionMask mask;
            if (policy.kind == Policy::Kind::dense_window ||
                policy.kind == Policy::Kind::attention_sink) {
                const bool sink = policy.kind == Policy::Kind::attention_sink;
                std::vector<std::int64_t> retained = generated;
                std::vector<std::int64_t> reserved = generated;
                const std::size_t window =
                    std::min<std::size_t>(shape.dense_window, history.size());
                retained.insert(retained.end(), history.end() - window,
                                history.end());
                if (sink) {
                    for (std::int64_t a : anchors) {
                        if (!std::count(retained.begin(), retained.end(), a)) {
                            retained.push_back(a);
                        }
                        if (!std::count(reserved.begin(), reserved.end(), a)) {
                            reserved.push_back(a);
                        }
                    }
                }
                mask = uniform_mask(layer, shape.chunk_frames,
                                    shape.heads_per_layer, retained, reserved,
                                    cache.generated());
                // Window policies: fraction of the window allowance filled.
                if (!history.empty()) {
                    stats.utilization_sum +=
                        static_cast<double>(shape.chunk_frames *
                                            shape.heads_per_layer) *
                        (static_cast<double>(window) /
                         static_cast<double>(shape.dense_window));
                    stats.utilization_count +=
                        shape.chunk_frames * shape.heads_per_layer;
                }
            } else {
                if (history.empty()) {
                    mask = uniform_mask(layer, shape.chunk_frames,
                                        shape.heads_per_layer, generated,
                                        generated, cache.generated());
                } else {
                    std::vector<FrameTensor> history_keys;
                    history_keys.reserve(history.size());
                    for (std::int64_t f : history) {
                        history_keys.push_back(cache.entry(layer, f).key);
                    }
                    std::vector<GroupPooled> pooled_q;
                    const auto& score_queries =
                        config.score_on_rotated ? queries_rot : queries_raw;
                    for (const FrameTensor& q : score_queries) {
                        pooled_q.push_back(group_pool(q, config.groups));
                    }
                    std::vector<GroupPooled> pooled_k;
                    for (std::size_t i = 0; i < history.size(); ++i) {
                        pooled_k.push_back(
                            pool_raw_keys
                                ? raw_key_pool[layer].at(history[i])
                                : group_pool(history_keys[i], config.groups));
                    }
                    const ScoreTensor attn =
                        attention_score(pooled_q, pooled_k, shape.head_dim);
                    const ScoreTensor attn_std = standardize(attn, config.epsilon);
                    const ScoreTensor div = broadcast_query_frames(
                        diversity_score(history_keys, config.epsilon),
                        shape.chunk_frames);
                    const ScoreTensor fused = fuse_scores(attn_std, div, lambda);
                    mask = select_history(fused, *options.budgets, cache, layer);

                    for (std::size_t q = 0; q < mask.query_frames; ++q) {
                        for (std::size_t h = 0; h < mask.heads; ++h) {
                            const int budget = options.budgets->at(layer, h);
                            if (budget <= 0) continue;
                            const SelectionEntry& e = mask.at(0, q, h);
                            const std::size_t picked =
                                e.retained.size() - e.reserved.size();
                            stats.utilization_sum += static_cast<double>(picked) /
                                                     static_cast<double>(budget);
                            ++stats.utilization_count;
                        }
                    }
                }
            }

            PackedBatch batch = pack(mask, queries_rot, cache, layer);

            // Historical frame-level units from the packed boundaries.
            const std::set<std::int64_t> generated_set(cache.generated().begin(),
                                                       cache.generated().end());
            for (std::size_t s = 0; s < batch.num_segments(); ++s) {
                const std::size_t k_rows = batch.cu_k[s + 1] - batch.cu_k[s];
                std::size_t generated_frames = 0;
                for (std::int64_t f : batch.segments[s].retained) {
                    if (generated_set.count(f)) ++generated_frames;
                }
                const std::size_t frames = k_rows / batch.tokens_per_frame;
                stats.frame_cost += static_cast<std::uint64_t>(
                    (frames - generated_frames) *
                    batch.segments[s].query_frames.size());
            }

            std::vector<float> o_pack = varlen_attention(batch, shape.head_dim);
            ChunkOutput output = scatter(o_pack, batch);

            if (options.masked_head && options.masked_head->layer == layer) {
                const std::size_t h = options.masked_head->head;
                for (std::size_t q = 0; q < output.query_frames; ++q) {
                    for (std::size_t t = 0; t < output.tokens; ++t) {
                        for (std::size_t d = 0; d < output.head_dim; ++d) {
                            output.at(0, q, t, h, d) = 0.0f;
                        }
                    }
                }
            }

            for (std::size_t q = 0; q < latents.size(); ++q) {
                for (std::size_t t = 0; t < shape.tokens_per_frame; ++t) {
                    for (std::size_t h = 0; h < shape.heads_per_layer; ++h) {
                        for (std::size_t d = 0; d < shape.head_dim; ++d) {
                            latents[q].at(t, h, d) += output.at(0, q, t, h, d);
                        }
                    }
                }
            }

            if (options.collect_masks) {
                if (chunk_masks.anchors.empty()) chunk_masks.anchors = anchors;
                chunk_masks.layers.push_back(std::move(mask));
            }
        }

        // The chunk is finished: promote its frames to history, then let
        // window policies slide.
        chunk_masks.generated.assign(cache.generated().begin(),
                                     cache.generated().end());
        cache.clear_generated();
        if (policy.kind == Policy::Kind::dense_window) {
            cache.evict_history(shape.dense_window, {});
        } else if (policy.kind == Policy::Kind::attention_sink) {
            cache.evict_history(shape.dense_window, cache.configured_anchors());
        }

        double divergence = 0.0;
        if (!dense_reference.empty()) {
            double sum = 0.0;
            std::size_t count = 0;
            for (std::size_t q = 0; q < latents.size(); ++q) {
                const FrameTensor& ref =
                    dense_reference[chunk * shape.chunk_frames + q];
                for (std::size_t i = 0; i < latents[q].data.size(); ++i) {
                    const double d = static_cast<double>(latents[q].data[i]) -
                                     static_cast<double>(ref.data[i]);
                    sum += d * d;
                    ++count;
                }
            }
            divergence = sum / static_cast<double>(count);
        }

        TraceRow row;
        row.chunk = chunk;
        row.policy = std::string(policy.name());
        row.frame_cost = stats.frame_cost;
        row.cache_frames = cache.stored_indices(0).size();
        row.mean_budget_utilization =
            stats.utilization_count == 0
                ? 0.0
                : stats.utilization_sum /
                      static_cast<double>(stats.utilization_count);
        row.divergence_vs_dense = divergence;
        result.trace.rows.push_back(std::move(row));

        if (options.collect_masks) {
            result.masks.push_back(std::move(chunk_masks));
        }
        for (FrameTensor& f : latents) {
            result.trajectory.push_back(std::move(f));
        }
    }
    return result;
}

PolicyComparison compare_policies(const RunConfig& config,
                                  const std::vector<Policy>& policies,
                                  std::size_t num_chunks,
                                  const HeadBudgetTable* budgets) {
    if (policies.size() < 2) {
        throw ConfigError("compare_policies: need at least two policies");
    }
    RolloutOptions dense_opts;
    dense_opts.compute_divergence = false;
    const RolloutResult dense = run_rollout(
        config, Policy{Policy::Kind::dense_window}, num_chunks, dense_opts);

    PolicyComparison cmp;
    for (const Policy& policy : policies) {
        RolloutOptions opts;
        opts.budgets = budgets;
        opts.collect_masks = true;
        opts.compute_divergence = false;
        const RolloutResult run = run_rollout(config, policy, num_chunks, opts);

        PolicyComparisonRow row;
        row.policy = std::string(policy.name());
        std::uint64_t retained_hist = 0;
        std::uint64_t entries = 0;
        for (const TraceRow& t : run.trace.rows) row.total_frame_cost += t.frame_cost;
        for (const ChunkMasks& cm : run.masks) {
            const std::set<std::int64_t> generated(cm.generated.begin(),
                                                   cm.generated.end());
            for (const SelectionMask& mask : cm.layers) {
                for (const SelectionEntry& e : mask.entries) {
                    for (std::int64_t f : e.retained) {
                        if (!generated.count(f)) ++retained_hist;
                    }
                    ++entries;
                }
            }
        }
        row.mean_retained_frames_per_head =
            entries == 0 ? 0.0
                         : static_cast<double>(retained_hist) /
                               static_cast<double>(entries);
        double sum = 0.0;
        std::size_t count = 0;
        for (std::size_t f = 0; f < run.trajectory.size(); ++f) {
            for (std::size_t i = 0; i < run.trajectory[f].data.size(); ++i) {
                const double d =
                    static_cast<double>(run.trajectory[f].data[i]) -
                    static_cast<double>(dense.trajectory[f].data[i]);
                sum += d * d;
                ++count;
            }
        }
        row.divergence_vs_dense = sum / static_cast<double>(count);
        cmp.rows.push_back(std::move(row));
    }
    return cmp;
}

}  // namespace kvfocus
