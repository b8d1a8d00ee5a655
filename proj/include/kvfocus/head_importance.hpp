#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <memory>
#include <optional>
#include <span>
#include <vector>

#include "kvfocus/budgets.hpp"
#include "kvfocus/config.hpp"
#include "kvfocus/types.hpp"

namespace kvfocus {

// Controls the distribution-matching degradation probe.
struct DmLossConfig {
    std::function<double(double)> timestep_weight;  // w(t), defaults to 1
    std::function<double(double)> signal_scale;     // alpha(t), defaults to 1
    double cfg_scale = 1.0;
    std::size_t window_length = 1;  // frames per window
    std::size_t num_windows = 1;
    double grad_epsilon = 1e-6;
    bool normalize_gradient = true;
    std::vector<double> timesteps = {0.5};  // additive noise scales

    static DmLossConfig from_params(const ImportanceParams& params);
};

// cond + scale * (cond - uncond), elementwise.
LatentWindow cfg_combine(const LatentWindow& cond, const LatentWindow& uncond,
                         double cfg_scale);

// Half squared norm of the (optionally normalized) fake-vs-real gradient:
//   g = w(t) a(t) (fake - cfg(real)),  g /= mean|W - cfg(real)| + eps,
//   loss = 0.5 ||g||^2.
// Zero exactly when the fake prediction matches the guided real prediction.
double dm_loss(const LatentWindow& window, const LatentWindow& fake_pred,
               const LatentWindow& real_cond, const LatentWindow& real_uncond,
               const DmLossConfig& config, double timestep = 0.0);

// Predicted clean windows from the generated-distribution and
// target-distribution scorers. Implementations must be deterministic given
// their inputs and construction seed.
class ScoreModel {
public:
    virtual ~ScoreModel() = default;
    virtual LatentWindow fake_score(const LatentWindow& noised,
                                    std::int64_t prompt, double timestep) const = 0;
    // No prompt = unconditional prediction.
    virtual LatentWindow real_score(const LatentWindow& noised,
                                    std::optional<std::int64_t> prompt,
                                    double timestep) const = 0;
};

// Both predictions echo the input, so the probe reads zero everywhere.
class IdentityScoreModel final : public ScoreModel {
public:
    LatentWindow fake_score(const LatentWindow& noised, std::int64_t prompt,
                            double timestep) const override;
    LatentWindow real_score(const LatentWindow& noised,
                            std::optional<std::int64_t> prompt,
                            double timestep) const override;
};

// Real prediction is a fixed seeded banded linear map of the input plus a
// per-prompt offset; the fake prediction adds a content-dependent drift.
class LinearScoreModel final : public ScoreModel {
public:
    LinearScoreModel(std::uint64_t seed, double perturbation);

    LatentWindow fake_score(const LatentWindow& noised, std::int64_t prompt,
                            double timestep) const override;
    LatentWindow real_score(const LatentWindow& noised,
                            std::optional<std::int64_t> prompt,
                            double timestep) const override;

private:
    std::uint64_t seed_;
    double perturbation_;
};

std::shared_ptr<const ScoreModel> make_score_model(const ScoreModelSpec& spec,
                                                   std::uint64_t seed);

// Dense-window rollout with one head's attention output zeroed throughout.
// No mask reproduces the baseline exactly.
std::vector<FrameTensor> masked_rollout(const RunConfig& config,
                                        std::size_t num_chunks,
                                        std::optional<HeadRef> masked_head,
                                        std::uint64_t stream_seed);

// Forward declaration; the rollout module owns the type.
class SyntheticModel;

struct ImportanceConfig {
    RunConfig run;
    DmLossConfig dm;
    std::size_t num_chunks = 1;
    std::shared_ptr<const ScoreModel> model;
    // Overrides the seeded default backbone (test constructions).
    const SyntheticModel* rollout_model = nullptr;
};

// For every (layer, head): mask it, roll out per prompt, split the
// trajectory into windows, noise them, probe with dm_loss, average over
// windows then prompts. Throws ConfigError when the trajectory is shorter
// than num_windows * window_length.
ImportanceTable estimate_importance(const std::vector<std::int64_t>& prompts,
                                    const ImportanceConfig& config);

// (I - I_min) / (I_max - I_min + epsilon); all-equal tables map to zeros.
std::vector<double> normalize_importance(const ImportanceTable& table,
                                         double epsilon);

// Rounds the gamma curve of each normalized score into [b_min, b_max].
HeadBudgetTable map_budgets(std::span<const double> normalized,
                            std::size_t layers, std::size_t heads, int b_min,
                            int b_max, double gamma);

// normalize + map, carrying the table's metadata along.
HeadBudgetTable allocate_budgets(const ImportanceTable& table, int b_min,
                                 int b_max, double gamma, double epsilon);

// Splits the trajectory's leading num_windows * window_length frames into
// flattened windows.
std::vector<LatentWindow> split_windows(const std::vector<FrameTensor>& trajectory,
                                        std::size_t window_length,
                                        std::size_t num_windows,
                                        std::int64_t prompt_id);

// Frequency table of importance scores. Counts always sum to the score
// count; the right edge falls into the last bin. All-equal scores land in
// bin zero with a unit-width span.
struct HistogramBin {
    double low = 0.0;
    double high = 0.0;
    std::size_t count = 0;
};

struct ImportanceHistogram {
    std::vector<HistogramBin> bins;
    double min = 0.0;
    double median = 0.0;
    double max = 0.0;

    void write_csv(std::ostream& out) const;
};

ImportanceHistogram importance_histogram(std::span<const double> scores,
                                         std::size_t bins);

}  // namespace kvfocus
