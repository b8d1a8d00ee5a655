#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "json.hpp"
#include "kvfocus/errors.hpp"

namespace kvfocus {

// Per-(layer, head) degradation scores from masked rollouts.
// Higher score = masking that head hurt more.
struct ImportanceTable {
    std::size_t layers = 0;
    std::size_t heads = 0;
    std::vector<double> scores;  // [layers * heads], non-negative

    std::vector<std::int64_t> prompts;
    std::vector<std::uint64_t> seeds;  // per-prompt rollout seeds
    std::size_t windows_per_rollout = 0;

    double& at(std::size_t layer, std::size_t head) {
        return scores[layer * heads + head];
    }
    double at(std::size_t layer, std::size_t head) const {
        return scores[layer * heads + head];
    }
};

// Frozen per-head KV budgets plus the scores and mapping parameters that
// produced them. Computed offline; rollouts only ever read it.
struct HeadBudgetTable {
    std::size_t layers = 0;
    std::size_t heads = 0;
    int b_min = 0;
    int b_max = 0;
    double gamma = 1.0;

    std::vector<int> budgets;        // [layers * heads], each in [b_min, b_max]
    std::vector<double> normalized;  // the scores the budgets were mapped from
    std::vector<double> importance;  // raw scores, kept for reporting
    std::vector<std::int64_t> prompts;
    std::vector<std::uint64_t> seeds;

    int at(std::size_t layer, std::size_t head) const {
        return budgets[layer * heads + head];
    }

    std::uint64_t total() const;
    // Sum of budgets within one layer (the S_l of the memory model).
    std::uint64_t layer_sum(std::size_t layer) const;

    // All heads share one budget; normalized scores are set consistently.
    static HeadBudgetTable uniform(std::size_t layers, std::size_t heads,
                                   int budget);

    // Checks dimensions, ranges and that budgets equal the gamma-curve
    // mapping of the stored normalized scores. Throws ValidationError.
    void validate() const;

    nlohmann::json to_json() const;
    static HeadBudgetTable from_json(const nlohmann::json& j);
    void save(const std::string& path) const;
    static HeadBudgetTable load(const std::string& path);
};

// The gamma-curved budget curve before rounding:
//   b_min + normalized^gamma * (b_max - b_min)
double budget_value(double normalized, int b_min, int b_max, double gamma);

// Rounds the curve half away from zero to an integer budget.
int budget_rounded(double normalized, int b_min, int b_max, double gamma);

}  // namespace kvfocus
