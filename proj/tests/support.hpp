#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "kvfocus/budgets.hpp"
#include "kvfocus/config.hpp"
#include "kvfocus/rng.hpp"
#include "kvfocus/types.hpp"

namespace kvtest {

// Budget table with the reference constants: 30 layers x 12 heads,
// budgets in [4, 12], total 1958, layer sums spanning [61, 72].
inline kvfocus::HeadBudgetTable reference_budget_table() {
    const std::size_t layers = 30, heads = 12;
    std::vector<int> layer_sums = {61, 72};
    for (int i = 0; i < 23; ++i) layer_sums.push_back(65);
    for (int i = 0; i < 5; ++i) layer_sums.push_back(66);

    kvfocus::HeadBudgetTable t;
    t.layers = layers;
    t.heads = heads;
    t.b_min = 4;
    t.b_max = 12;
    t.gamma = 2.0;
    t.budgets.reserve(layers * heads);
    for (int sum : layer_sums) {
        // `sixes` heads get budget 6, the rest 5: 12 * 5 + sixes == sum.
        const int sixes = sum - 60;
        for (std::size_t h = 0; h < heads; ++h) {
            t.budgets.push_back(static_cast<int>(h) < sixes ? 6 : 5);
        }
    }
    t.normalized.reserve(layers * heads);
    for (int b : t.budgets) {
        t.normalized.push_back(std::sqrt((b - 4) / 8.0));
    }
    t.importance = t.normalized;
    t.validate();
    return t;
}

inline kvfocus::FrameTensor random_frame(std::int64_t index, std::size_t tokens,
                                         std::size_t heads, std::size_t dim,
                                         std::mt19937_64& rng) {
    kvfocus::FrameTensor f(index, tokens, heads, dim);
    kvfocus::fill_normal(std::span<float>(f.data), rng);
    return f;
}

// Small config most rollout tests share.
inline kvfocus::RunConfig small_config() {
    kvfocus::RunConfig cfg;
    cfg.shape.num_layers = 2;
    cfg.shape.heads_per_layer = 2;
    cfg.shape.head_dim = 4;
    cfg.shape.tokens_per_frame = 4;
    cfg.shape.chunk_frames = 3;
    cfg.shape.dense_window = 21;
    cfg.lambda = 0.5;
    cfg.groups = 2;
    cfg.budget = {2, 5, 2.0};
    cfg.epsilon = 1e-6;
    cfg.seed = 7;
    return cfg;
}

}  // namespace kvtest
