#include "kvfocus/cost_model.hpp"

#include <algorithm>
#include <set>

namespace kvfocus {

FrameCost frame_cost(const HeadBudgetTable& budgets, const ModelShape& shape) {
    if (budgets.layers != shape.num_layers ||
        budgets.heads != shape.heads_per_layer) {
        throw ShapeError("frame_cost: budget table does not match model shape");
    }
    FrameCost fc;
    fc.c_pack = static_cast<std::uint64_t>(shape.chunk_frames) * budgets.total();
    fc.c_dense = static_cast<std::uint64_t>(shape.num_layers) *
                 shape.heads_per_layer * shape.chunk_frames * shape.dense_window;
    fc.ratio = static_cast<double>(fc.c_pack) / static_cast<double>(fc.c_dense);
    fc.theoretical_speedup = 1.0 / fc.ratio;
    return fc;
}

MemoryOverhead memory_overhead(const HeadBudgetTable& budgets,
                               const ModelShape& shape,
                               std::uint64_t bytes_per_element) {
    if (bytes_per_element < 1) {
        throw ConfigError("memory_overhead: bytes_per_element must be >= 1");
    }
    if (budgets.layers != shape.num_layers ||
        budgets.heads != shape.heads_per_layer) {
        throw ShapeError("memory_overhead: budget table does not match model shape");
    }
    const std::uint64_t frame_head_bytes =
        static_cast<std::uint64_t>(shape.tokens_per_frame) * shape.head_dim *
        bytes_per_element;

    MemoryOverhead mem;
    mem.m_q_bytes = static_cast<std::uint64_t>(shape.chunk_frames) *
                    shape.heads_per_layer * frame_head_bytes;
    mem.kv_bytes_per_sum_unit = 2ULL * shape.chunk_frames * frame_head_bytes;
    mem.layer_sums.resize(shape.num_layers);
    mem.layer_pack_bytes.resize(shape.num_layers);
    std::uint64_t total_pack = 0;
    std::uint64_t total_sum = 0;
    for (std::size_t l = 0; l < shape.num_layers; ++l) {
        mem.layer_sums[l] = budgets.layer_sum(l);
        total_sum += mem.layer_sums[l];
        const std::uint64_t kv_bytes =
            mem.kv_bytes_per_sum_unit * mem.layer_sums[l];
        mem.layer_pack_bytes[l] = mem.m_q_bytes + kv_bytes;
        total_pack += mem.layer_pack_bytes[l];
    }
    mem.m_pack_min_bytes =
        *std::min_element(mem.layer_pack_bytes.begin(), mem.layer_pack_bytes.end());
    mem.m_pack_max_bytes =
        *std::max_element(mem.layer_pack_bytes.begin(), mem.layer_pack_bytes.end());
    mem.m_pack_avg_bytes =
        static_cast<double>(total_pack) / static_cast<double>(shape.num_layers);
    mem.layer_sum_avg =
        static_cast<double>(total_sum) / static_cast<double>(shape.num_layers);
    return mem;
}

double mib(double bytes) {
    return bytes / 1048576.0;
}

double mib_2dp(double bytes) {
    return std::round(mib(bytes) * 100.0) / 100.0;
}

double packed_mib(std::uint64_t m_q_bytes, double kv_bytes) {
    return mib_2dp(static_cast<double>(m_q_bytes)) + mib_2dp(kv_bytes);
}

CostReport cost_report(const HeadBudgetTable& budgets, const ModelShape& shape,
                       std::uint64_t bytes_per_element) {
    CostReport report;
    report.cost = frame_cost(budgets, shape);
    report.memory = memory_overhead(budgets, shape, bytes_per_element);
    report.bytes_per_element = bytes_per_element;
    const std::uint64_t per_unit =
        static_cast<std::uint64_t>(shape.tokens_per_frame) *
        shape.tokens_per_frame * shape.head_dim;
    report.derived_token_flops_pack = report.cost.c_pack * per_unit;
    report.derived_token_flops_dense = report.cost.c_dense * per_unit;
    return report;
}

nlohmann::json CostReport::to_json() const {
    nlohmann::json j;
    j["c_pack"] = cost.c_pack;
    j["c_dense"] = cost.c_dense;
    j["ratio"] = cost.ratio;
    j["theoretical_speedup"] = cost.theoretical_speedup;
    j["bytes_per_element"] = bytes_per_element;
    j["m_q_bytes"] = memory.m_q_bytes;
    j["m_q_mib"] = mib_2dp(static_cast<double>(memory.m_q_bytes));
    j["m_pack_min_bytes"] = memory.m_pack_min_bytes;
    j["m_pack_min_mib"] = packed_mib(
        memory.m_q_bytes,
        static_cast<double>(memory.m_pack_min_bytes - memory.m_q_bytes));
    j["m_pack_avg_bytes"] = memory.m_pack_avg_bytes;
    // The quoted average goes through the reported (2 d.p.) layer-sum
    // average, matching how the reference tabulates it.
    j["layer_sum_avg"] = memory.layer_sum_avg;
    const double avg_sum_2dp = std::round(memory.layer_sum_avg * 100.0) / 100.0;
    j["m_pack_avg_mib"] = packed_mib(
        memory.m_q_bytes,
        static_cast<double>(memory.kv_bytes_per_sum_unit) * avg_sum_2dp);
    j["m_pack_max_bytes"] = memory.m_pack_max_bytes;
    j["m_pack_max_mib"] = packed_mib(
        memory.m_q_bytes,
        static_cast<double>(memory.m_pack_max_bytes - memory.m_q_bytes));
    j["layer_sums"] = memory.layer_sums;
    j["derived_token_flops_pack"] = derived_token_flops_pack;
    j["derived_token_flops_dense"] = derived_token_flops_dense;
    return j;
}

std::uint64_t frame_cost_from_masks_json(const nlohmann::json& chunk) {
    if (!chunk.is_object() || !chunk.contains("entries") ||
        !chunk.contains("generated")) {
        throw ValidationError(
            "mask chunk must be an object with 'generated' and 'entries'");
    }
    const std::set<std::int64_t> generated(
        chunk.at("generated").begin(), chunk.at("generated").end());
    std::uint64_t units = 0;
    for (const auto& entry : chunk.at("entries")) {
        for (const auto& f : entry.at("retained")) {
            if (!generated.count(f.get<std::int64_t>())) ++units;
        }
    }
    return units;
}

std::uint64_t frame_cost_from_masks(std::span<const SelectionMask> layer_masks) {
    std::uint64_t units = 0;
    for (const SelectionMask& mask : layer_masks) {
        const std::set<std::int64_t> generated(mask.generated.begin(),
                                               mask.generated.end());
        for (const SelectionEntry& entry : mask.entries) {
            for (std::int64_t f : entry.retained) {
                if (!generated.count(f)) ++units;
            }
        }
    }
    return units;
}

}  // namespace kvfocus
