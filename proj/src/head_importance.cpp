#include "kvfocus/head_importance.hpp"

#include <algorithm>
#include <cmath>
#include <ostream>

#include "kvfocus/rng.hpp"
#include "kvfocus/rollout.hpp"

namespace kvfocus {

DmLossConfig DmLossConfig::from_params(const ImportanceParams& params) {
    DmLossConfig dm;
    dm.cfg_scale = params.cfg_scale;
    dm.window_length = params.window_length;
    dm.num_windows = params.num_windows;
    dm.grad_epsilon = params.grad_epsilon;
    dm.normalize_gradient = params.normalize_gradient;
    dm.timesteps = params.timesteps;
    return dm;
}

LatentWindow cfg_combine(const LatentWindow& cond, const LatentWindow& uncond,
                         double cfg_scale) {
    if (!cond.same_shape(uncond)) {
        throw ShapeError("cfg_combine: prediction shapes must match");
    }
    LatentWindow out = cond;
    for (std::size_t i = 0; i < out.values.size(); ++i) {
        out.values[i] = cond.values[i] +
                        cfg_scale * (cond.values[i] - uncond.values[i]);
    }
    return out;
}

double dm_loss(const LatentWindow& window, const LatentWindow& fake_pred,
               const LatentWindow& real_cond, const LatentWindow& real_uncond,
               const DmLossConfig& config, double timestep) {
    if (!window.same_shape(fake_pred) || !window.same_shape(real_cond) ||
        !window.same_shape(real_uncond)) {
        throw ShapeError("dm_loss: window and prediction shapes must match");
    }
    const LatentWindow real_pred =
        cfg_combine(real_cond, real_uncond, config.cfg_scale);
    const double w = config.timestep_weight ? config.timestep_weight(timestep) : 1.0;
    const double a = config.signal_scale ? config.signal_scale(timestep) : 1.0;

    const std::size_t n = window.values.size();
    std::vector<double> grad(n);
    for (std::size_t i = 0; i < n; ++i) {
        grad[i] = w * a * (fake_pred.values[i] - real_pred.values[i]);
    }
    if (config.normalize_gradient) {
        double mean_abs = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            mean_abs += std::abs(window.values[i] - real_pred.values[i]);
        }
        mean_abs /= static_cast<double>(n);
        const double inv = 1.0 / (mean_abs + config.grad_epsilon);
        for (double& g : grad) g *= inv;
    }
    // 0.5 ||W - sg(W - g)||^2 collapses to 0.5 ||g||^2.
    double sum = 0.0;
    for (double g : grad) sum += g * g;
    return 0.5 * sum;
}

LatentWindow IdentityScoreModel::fake_score(const LatentWindow& noised,
                                            std::int64_t, double) const {
    return noised;
}

LatentWindow IdentityScoreModel::real_score(const LatentWindow& noised,
                                            std::optional<std::int64_t>,
                                            double) const {
    return noised;
}

LinearScoreModel::LinearScoreModel(std::uint64_t seed, double perturbation)
    : seed_(seed), perturbation_(perturbation) {}

namespace {

// Banded linear map y_i = a_i x_i + b_i x_{i+1 mod n}, coefficients seeded
// by (model seed, tag). Cheap and deterministic.
void banded_map(const LatentWindow& in, LatentWindow& out, std::uint64_t seed,
                std::uint64_t tag) {
    const std::size_t n = in.values.size();
    auto rng = make_rng(derive_seed(seed, seed_tag::score_model, tag));
    std::vector<double> coeff(2 * n);
    fill_normal(std::span<double>(coeff), rng, 0.0, 0.5);
    for (std::size_t i = 0; i < n; ++i) {
        out.values[i] =
            coeff[2 * i] * in.values[i] + coeff[2 * i + 1] * in.values[(i + 1) % n];
    }
}

std::vector<double> prompt_offset(std::size_t n, std::uint64_t seed,
                                  std::int64_t prompt) {
    std::vector<double> offset(n, 0.0);
    auto rng = make_rng(derive_seed(seed, seed_tag::score_model, 0x0ffu,
                                    static_cast<std::uint64_t>(prompt)));
    fill_normal(std::span<double>(offset), rng, 0.0, 0.2);
    return offset;
}

}  // namespace

LatentWindow LinearScoreModel::real_score(const LatentWindow& noised,
                                          std::optional<std::int64_t> prompt,
                                          double) const {
    LatentWindow out = noised;
    banded_map(noised, out, seed_, 0x1);
    if (prompt) {
        const std::vector<double> offset =
            prompt_offset(out.values.size(), seed_, *prompt);
        for (std::size_t i = 0; i < out.values.size(); ++i) {
            out.values[i] += offset[i];
        }
    }
    return out;
}

LatentWindow LinearScoreModel::fake_score(const LatentWindow& noised,
                                          std::int64_t prompt,
                                          double timestep) const {
    LatentWindow out = real_score(noised, prompt, timestep);
    LatentWindow drift = noised;
    banded_map(noised, drift, seed_, 0x2);
    for (std::size_t i = 0; i < out.values.size(); ++i) {
        out.values[i] += perturbation_ * drift.values[i];
    }
    return out;
}

std::shared_ptr<const ScoreModel> make_score_model(const ScoreModelSpec& spec,
                                                   std::uint64_t seed) {
    if (spec.kind == ScoreModelSpec::Kind::identity) {
        return std::make_shared<IdentityScoreModel>();
    }
    return std::make_shared<LinearScoreModel>(
        derive_seed(seed, seed_tag::score_model), spec.perturbation);
}

namespace {

std::vector<FrameTensor> masked_rollout_impl(const RunConfig& config,
                                             std::size_t num_chunks,
                                             std::optional<HeadRef> masked_head,
                                             std::uint64_t stream_seed,
                                             const SyntheticModel* model) {
    RolloutOptions options;
    options.masked_head = masked_head;
    options.stream_seed = stream_seed;
    options.compute_divergence = false;
    options.model = model;
    return run_rollout(config, Policy{Policy::Kind::dense_window}, num_chunks,
                       options)
        .trajectory;
}

}  // namespace

std::vector<FrameTensor> masked_rollout(const RunConfig& config,
                                        std::size_t num_chunks,
                                        std::optional<HeadRef> masked_head,
                                        std::uint64_t stream_seed) {
    return masked_rollout_impl(config, num_chunks, masked_head, stream_seed,
                               nullptr);
}

std::vector<LatentWindow> split_windows(const std::vector<FrameTensor>& trajectory,
                                        std::size_t window_length,
                                        std::size_t num_windows,
                                        std::int64_t prompt_id) {
    if (trajectory.size() < window_length * num_windows) {
        throw ConfigError("trajectory has " + std::to_string(trajectory.size()) +
                          " frames, need " +
                          std::to_string(window_length * num_windows) +
                          " for the requested windows");
    }
    const std::size_t latent_dim = trajectory.empty() ? 0 : trajectory[0].data.size();
    std::vector<LatentWindow> windows;
    windows.reserve(num_windows);
    for (std::size_t r = 0; r < num_windows; ++r) {
        LatentWindow w(prompt_id, r, window_length, latent_dim);
        for (std::size_t f = 0; f < window_length; ++f) {
            const FrameTensor& frame = trajectory[r * window_length + f];
            for (std::size_t i = 0; i < latent_dim; ++i) {
                w.at(f, i) = static_cast<double>(frame.data[i]);
            }
        }
        windows.push_back(std::move(w));
    }
    return windows;
}

ImportanceTable estimate_importance(const std::vector<std::int64_t>& prompts,
                                    const ImportanceConfig& config) {
    if (prompts.empty()) {
        throw ConfigError("estimate_importance: need at least one prompt");
    }
    if (!config.model) {
        throw ConfigError("estimate_importance: score model required");
    }
    const ModelShape& shape = config.run.shape;
    const DmLossConfig& dm = config.dm;

    ImportanceTable table;
    table.layers = shape.num_layers;
    table.heads = shape.heads_per_layer;
    table.scores.assign(table.layers * table.heads, 0.0);
    table.prompts = prompts;
    table.windows_per_rollout = dm.num_windows;

    for (std::int64_t prompt : prompts) {
        const std::uint64_t prompt_seed =
            derive_seed(config.run.seed, seed_tag::prompt,
                        static_cast<std::uint64_t>(prompt));
        table.seeds.push_back(prompt_seed);

        // Noise and timestep draws are per (prompt, window), shared across
        // masked heads so their losses are comparable.
        std::vector<double> window_timesteps(dm.num_windows);
        std::vector<std::vector<double>> window_noise(dm.num_windows);
        for (std::size_t r = 0; r < dm.num_windows; ++r) {
            auto ts_rng =
                make_rng(derive_seed(prompt_seed, seed_tag::window_timestep, r));
            std::uniform_int_distribution<std::size_t> pick(
                0, dm.timesteps.size() - 1);
            window_timesteps[r] = dm.timesteps[pick(ts_rng)];
        }

        for (std::size_t layer = 0; layer < shape.num_layers; ++layer) {
            for (std::size_t head = 0; head < shape.heads_per_layer; ++head) {
                const std::vector<FrameTensor> trajectory = masked_rollout_impl(
                    config.run, config.num_chunks, HeadRef{layer, head},
                    prompt_seed, config.rollout_model);
                std::vector<LatentWindow> windows = split_windows(
                    trajectory, dm.window_length, dm.num_windows, prompt);

                double dm_sum = 0.0;
                for (std::size_t r = 0; r < dm.num_windows; ++r) {
                    const LatentWindow& clean = windows[r];
                    if (window_noise[r].empty()) {
                        window_noise[r].resize(clean.values.size());
                        auto rng = make_rng(
                            derive_seed(prompt_seed, seed_tag::window_noise, r));
                        fill_normal(std::span<double>(window_noise[r]), rng);
                    }
                    const double t = window_timesteps[r];
                    LatentWindow noised = clean;
                    for (std::size_t i = 0; i < noised.values.size(); ++i) {
                        noised.values[i] += t * window_noise[r][i];
                    }
                    const LatentWindow fake =
                        config.model->fake_score(noised, prompt, t);
                    const LatentWindow real_cond =
                        config.model->real_score(noised, prompt, t);
                    const LatentWindow real_uncond =
                        config.model->real_score(noised, std::nullopt, t);
                    dm_sum += dm_loss(clean, fake, real_cond, real_uncond, dm, t);
                }
                table.at(layer, head) +=
                    dm_sum / static_cast<double>(dm.num_windows);
            }
        }
    }

    const double inv_prompts = 1.0 / static_cast<double>(prompts.size());
    for (double& s : table.scores) s *= inv_prompts;
    return table;
}

std::vector<double> normalize_importance(const ImportanceTable& table,
                                         double epsilon) {
    if (table.scores.empty()) {
        throw ConfigError("normalize_importance: empty table");
    }
    const auto [lo, hi] =
        std::minmax_element(table.scores.begin(), table.scores.end());
    const double denom = *hi - *lo + epsilon;
    std::vector<double> out(table.scores.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = (table.scores[i] - *lo) / denom;
    }
    return out;
}

HeadBudgetTable map_budgets(std::span<const double> normalized,
                            std::size_t layers, std::size_t heads, int b_min,
                            int b_max, double gamma) {
    if (normalized.size() != layers * heads) {
        throw ShapeError("map_budgets: normalized scores must cover layers x heads");
    }
    if (b_min > b_max) throw ConfigError("map_budgets: b_min must be <= b_max");
    if (gamma <= 0.0) throw ConfigError("map_budgets: gamma must be > 0");
    HeadBudgetTable t;
    t.layers = layers;
    t.heads = heads;
    t.b_min = b_min;
    t.b_max = b_max;
    t.gamma = gamma;
    t.normalized.assign(normalized.begin(), normalized.end());
    t.importance.assign(normalized.size(), 0.0);
    t.budgets.resize(normalized.size());
    for (std::size_t i = 0; i < normalized.size(); ++i) {
        t.budgets[i] = budget_rounded(normalized[i], b_min, b_max, gamma);
    }
    return t;
}

ImportanceHistogram importance_histogram(std::span<const double> scores,
                                         std::size_t bins) {
    if (scores.empty() || bins == 0) {
        throw ConfigError("importance_histogram: need scores and at least one bin");
    }
    std::vector<double> sorted(scores.begin(), scores.end());
    std::sort(sorted.begin(), sorted.end());

    ImportanceHistogram hist;
    hist.min = sorted.front();
    hist.max = sorted.back();
    hist.median = sorted.size() % 2 == 1
                      ? sorted[sorted.size() / 2]
                      : 0.5 * (sorted[sorted.size() / 2 - 1] +
                               sorted[sorted.size() / 2]);
    const double width = hist.max - hist.min <= 0.0 ? 1.0 : hist.max - hist.min;

    hist.bins.resize(bins);
    for (std::size_t b = 0; b < bins; ++b) {
        hist.bins[b].low =
            hist.min + width * static_cast<double>(b) / static_cast<double>(bins);
        hist.bins[b].high = hist.min + width * static_cast<double>(b + 1) /
                                           static_cast<double>(bins);
    }
    for (double s : sorted) {
        std::size_t b = static_cast<std::size_t>(
            (s - hist.min) / width * static_cast<double>(bins));
        if (b >= bins) b = bins - 1;
        ++hist.bins[b].count;
    }
    return hist;
}

void ImportanceHistogram::write_csv(std::ostream& out) const {
    out.precision(12);
    out << "bin_low,bin_high,count\n";
    for (const HistogramBin& b : bins) {
        out << b.low << "," << b.high << "," << b.count << "\n";
    }
    out << "# min," << min << "\n";
    out << "# median," << median << "\n";
    out << "# max," << max << "\n";
}

HeadBudgetTable allocate_budgets(const ImportanceTable& table, int b_min,
                                 int b_max, double gamma, double epsilon) {
    const std::vector<double> normalized = normalize_importance(table, epsilon);
    HeadBudgetTable budgets =
        map_budgets(normalized, table.layers, table.heads, b_min, b_max, gamma);
    budgets.importance = table.scores;
    budgets.prompts = table.prompts;
    budgets.seeds = table.seeds;
    return budgets;
}

}  // namespace kvfocus
