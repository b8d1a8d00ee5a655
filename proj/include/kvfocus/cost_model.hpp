#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "json.hpp"
#include "kvfocus/budgets.hpp"
#include "kvfocus/scoring.hpp"
#include "kvfocus/types.hpp"

namespace kvfocus {

// Frame-level attention cost: one unit per (layer, head, query frame,
// key frame) interaction.
struct FrameCost {
    std::uint64_t c_pack = 0;   // chunk_frames * sum of budgets
    std::uint64_t c_dense = 0;  // layers * heads * chunk_frames * dense_window
    double ratio = 0.0;
    double theoretical_speedup = 0.0;
};

FrameCost frame_cost(const HeadBudgetTable& budgets, const ModelShape& shape);

// Extra bytes occupied by the packed Q/K/V buffers of one attention call.
struct MemoryOverhead {
    std::uint64_t m_q_bytes = 0;
    std::uint64_t m_pack_min_bytes = 0;
    std::uint64_t m_pack_max_bytes = 0;
    double m_pack_avg_bytes = 0.0;  // exact rational mean over layers
    double layer_sum_avg = 0.0;     // exact rational S_avg
    std::uint64_t kv_bytes_per_sum_unit = 0;  // 2 * QF * N * D * s
    std::vector<std::uint64_t> layer_sums;      // S_l = per-layer budget sums
    std::vector<std::uint64_t> layer_pack_bytes;
};

MemoryOverhead memory_overhead(const HeadBudgetTable& budgets,
                               const ModelShape& shape,
                               std::uint64_t bytes_per_element);

struct CostReport {
    FrameCost cost;
    MemoryOverhead memory;
    std::uint64_t bytes_per_element = 0;
    // Token-level multiply count implied by the frame-level units; derived
    // convenience figure, frame units x tokens_per_frame^2 x head_dim.
    std::uint64_t derived_token_flops_pack = 0;
    std::uint64_t derived_token_flops_dense = 0;

    nlohmann::json to_json() const;
};

CostReport cost_report(const HeadBudgetTable& budgets, const ModelShape& shape,
                       std::uint64_t bytes_per_element);

double mib(double bytes);
double mib_2dp(double bytes);

// Reported MiB figure of one packed buffer: the query and key/value
// components are each quoted at two decimals and summed, which is how the
// reference figures are tabulated (the raw byte fields stay exact).
double packed_mib(std::uint64_t m_q_bytes, double kv_bytes);

// Frame-level units actually spent by a set of per-layer selection masks:
// retained historical frames (anchors included, the chunk's own generated
// frames excluded) summed over every (layer, query frame, head).
std::uint64_t frame_cost_from_masks(std::span<const SelectionMask> layer_masks);

// Same recount from one dumped chunk object ({generated, entries: [...]}),
// so saved mask files can be audited against trace CSVs.
std::uint64_t frame_cost_from_masks_json(const nlohmann::json& chunk);

}  // namespace kvfocus
