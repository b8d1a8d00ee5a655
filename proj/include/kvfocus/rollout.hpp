#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "kvfocus/budgets.hpp"
#include "kvfocus/config.hpp"
#include "kvfocus/scoring.hpp"
#include "kvfocus/synthetic.hpp"
#include "kvfocus/types.hpp"

namespace kvfocus {

// History-retention policies the rollout can execute. The window policies
// evict from the cache as they slide; the focused family keeps the full
// cache and selects per query frame and head.
struct Policy {
    enum class Kind {
        dense_window,    // last dense_window historical frames
        attention_sink,  // window plus frame 0
        attention_only,  // focused with lambda = 1
        diversity_only,  // focused with lambda = 0
        focused,         // fused scoring under head budgets
    };

    Kind kind = Kind::dense_window;

    bool needs_budgets() const {
        return kind == Kind::attention_only || kind == Kind::diversity_only ||
               kind == Kind::focused;
    }
    std::string_view name() const;
    static Policy parse(std::string_view name);  // ConfigError on unknown
};

struct TraceRow {
    std::size_t chunk = 0;
    std::string policy;
    std::uint64_t frame_cost = 0;  // historical frame-level units this chunk
    std::size_t cache_frames = 0;  // stored frames after the chunk
    double mean_budget_utilization = 0.0;
    double divergence_vs_dense = 0.0;  // mean squared latent difference
};

struct RolloutTrace {
    std::vector<TraceRow> rows;
    void write_csv(std::ostream& out) const;
    std::string to_csv() const;
};

// Per-layer masks of one chunk, for inspection and cost cross-checks.
struct ChunkMasks {
    std::size_t chunk = 0;
    std::vector<std::int64_t> generated;
    std::vector<std::int64_t> anchors;
    std::vector<SelectionMask> layers;

    nlohmann::json to_json() const;
};

nlohmann::json masks_to_json(const std::vector<ChunkMasks>& masks);

struct RolloutOptions {
    std::optional<HeadRef> masked_head;  // zero this head's attention output
    const HeadBudgetTable* budgets = nullptr;
    const SyntheticModel* model = nullptr;     // override the seeded default
    std::optional<std::uint64_t> stream_seed;  // override config.seed for latents
    bool collect_masks = false;
    bool compute_divergence = true;
};

struct RolloutResult {
    std::vector<FrameTensor> trajectory;  // final latents, one per frame
    RolloutTrace trace;
    std::vector<ChunkMasks> masks;  // filled when collect_masks is set
};

// Chunked causal generation: per chunk project Q/K/V, rotate, score and
// select history per policy, run packed attention, fold the output into the
// latents, append the chunk's K/V to the cache. Deterministic per
// (config, policy, seed).
RolloutResult run_rollout(const RunConfig& config, const Policy& policy,
                          std::size_t num_chunks,
                          const RolloutOptions& options = {});

struct PolicyComparisonRow {
    std::string policy;
    std::uint64_t total_frame_cost = 0;
    double mean_retained_frames_per_head = 0.0;
    double divergence_vs_dense = 0.0;  // over the whole trajectory
};

struct PolicyComparison {
    std::vector<PolicyComparisonRow> rows;
};

PolicyComparison compare_policies(const RunConfig& config,
                                  const std::vector<Policy>& policies,
                                  std::size_t num_chunks,
                                  const HeadBudgetTable* budgets);

}  // namespace kvfocus
