#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "kvfocus/rope.hpp"
#include "kvfocus/types.hpp"

namespace kvfocus {

struct BudgetParams {
    int b_min = 4;
    int b_max = 12;
    double gamma = 2.0;
};

struct StreamParams {
    enum class Redundancy { iid, duplicate, static_region };
    Redundancy redundancy = Redundancy::iid;
};

struct ScoreModelSpec {
    enum class Kind { linear, identity };
    Kind kind = Kind::linear;
    double perturbation = 0.1;  // drift scale of the linear model's fake score
};

// Parameters for the head-importance estimation harness.
struct ImportanceParams {
    std::size_t window_length = 2;  // frames per scored window
    std::size_t num_windows = 2;
    std::size_t num_chunks = 3;   // rollout length in chunks
    std::size_t num_prompts = 2;
    double cfg_scale = 1.0;
    double grad_epsilon = 1e-6;
    bool normalize_gradient = true;
    std::vector<double> timesteps = {0.25, 0.5, 0.75};  // noise scales
};

// Everything a run needs; loaded from JSON, unknown keys rejected.
struct RunConfig {
    ModelShape shape;
    double lambda = 0.5;      // attention weight in the fused score
    std::size_t groups = 1;   // token groups per frame for pooled scoring
    BudgetParams budget;
    double epsilon = 1e-6;
    std::uint64_t seed = 0;
    ScoreModelSpec score_model;
    StreamParams stream;
    std::vector<std::int64_t> anchors = {0};
    std::optional<std::vector<std::size_t>> rope_temporal_blocks;
    double rope_base = 10000.0;
    bool score_on_rotated = true;
    ImportanceParams importance;

    RopeSpec rope_spec() const;

    void validate() const;

    nlohmann::json to_json() const;
    static RunConfig from_json(const nlohmann::json& j);
    static RunConfig load(const std::string& path);
    void save(const std::string& path) const;
};

}  // namespace kvfocus
