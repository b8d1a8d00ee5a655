#include <algorithm>
#include <cmath>
#include <sstream>

#include "doctest.h"
#include "kvfocus/head_importance.hpp"
#include "kvfocus/rollout.hpp"
#include "support.hpp"

using namespace kvfocus;

namespace {

LatentWindow window_of(const std::vector<double>& values) {
    LatentWindow w(0, 0, 1, values.size());
    w.values = values;
    return w;
}

// Probe scorer: the real prediction is zero, the fake echoes the input, so
// the unnormalized loss is half the noised window's squared norm.
class EnergyScoreModel final : public ScoreModel {
public:
    LatentWindow fake_score(const LatentWindow& noised, std::int64_t,
                            double) const override {
        return noised;
    }
    LatentWindow real_score(const LatentWindow& noised,
                            std::optional<std::int64_t>, double) const override {
        LatentWindow zero = noised;
        std::fill(zero.values.begin(), zero.values.end(), 0.0);
        return zero;
    }
};

// Constant-gap scorer: fake minus real is a fixed vector of 0.2 entries.
class ConstantGapScoreModel final : public ScoreModel {
public:
    LatentWindow fake_score(const LatentWindow& noised, std::int64_t,
                            double) const override {
        LatentWindow out = noised;
        for (double& v : out.values) v += 0.2;
        return out;
    }
    LatentWindow real_score(const LatentWindow& noised,
                            std::optional<std::int64_t>, double) const override {
        return noised;
    }
};

RunConfig importance_config() {
    RunConfig cfg = kvtest::small_config();
    cfg.shape.chunk_frames = 2;
    cfg.importance.window_length = 2;
    cfg.importance.num_windows = 2;
    cfg.importance.num_chunks = 2;
    cfg.importance.timesteps = {0.0};
    return cfg;
}

}  // namespace

TEST_SUITE("head_importance") {

TEST_CASE("matching predictions give zero loss") {
    DmLossConfig dm;
    dm.cfg_scale = 0.0;
    const LatentWindow w = window_of({1.0, 2.0, -1.0});
    const LatentWindow pred = window_of({0.5, 0.5, 0.5});
    CHECK(dm_loss(w, pred, pred, pred, dm) == 0.0);
}

TEST_CASE("worked value for a normalized gradient of (0.2, -0.2)") {
    DmLossConfig dm;
    dm.cfg_scale = 0.0;
    dm.grad_epsilon = 1e-12;
    // real = 0, window has mean absolute deviation 1, so the raw gradient
    // passes through normalization unchanged.
    const LatentWindow w = window_of({1.0, -1.0});
    const LatentWindow real = window_of({0.0, 0.0});
    const LatentWindow fake = window_of({0.2, -0.2});
    CHECK(dm_loss(w, fake, real, real, dm) == doctest::Approx(0.04).epsilon(1e-9));
}

TEST_CASE("guidance extrapolates cond + s(cond - uncond)") {
    const LatentWindow cond = window_of({1.0, 2.0});
    const LatentWindow uncond = window_of({0.5, -1.0});
    const LatentWindow combined = cfg_combine(cond, uncond, 1.0);
    CHECK(combined.values[0] == doctest::Approx(1.5));
    CHECK(combined.values[1] == doctest::Approx(5.0));

    // Guided equality: fake matching 2c - u zeroes the loss.
    DmLossConfig dm;
    dm.cfg_scale = 1.0;
    const LatentWindow w = window_of({0.0, 0.0});
    CHECK(dm_loss(w, combined, cond, uncond, dm) == 0.0);
}

TEST_CASE("loss is non-negative and zero only at guided equality") {
    auto rng = make_rng(50);
    DmLossConfig dm;
    dm.cfg_scale = 0.7;
    for (int i = 0; i < 50; ++i) {
        std::vector<double> vals(6);
        fill_normal(std::span<double>(vals), rng);
        const LatentWindow w = window_of(vals);
        fill_normal(std::span<double>(vals), rng);
        const LatentWindow fake = window_of(vals);
        fill_normal(std::span<double>(vals), rng);
        const LatentWindow cond = window_of(vals);
        fill_normal(std::span<double>(vals), rng);
        const LatentWindow uncond = window_of(vals);
        const double loss = dm_loss(w, fake, cond, uncond, dm);
        CHECK(loss >= 0.0);
        const bool guided_equal =
            fake.values == cfg_combine(cond, uncond, dm.cfg_scale).values;
        if (loss == 0.0) CHECK(guided_equal);
    }
}

TEST_CASE("no mask reproduces the baseline trajectory bitwise") {
    const RunConfig cfg = importance_config();
    const auto baseline = masked_rollout(cfg, 2, std::nullopt, cfg.seed);
    const auto again = masked_rollout(cfg, 2, std::nullopt, cfg.seed);
    REQUIRE(baseline.size() == again.size());
    for (std::size_t i = 0; i < baseline.size(); ++i) {
        CHECK(baseline[i].data == again[i].data);
    }
}

TEST_CASE("masking a dead head changes nothing") {
    const RunConfig cfg = importance_config();
    SyntheticModel model = SyntheticModel::single_live_head(
        cfg.shape, derive_seed(cfg.seed, seed_tag::model_weights),
        HeadRef{0, 0});

    RolloutOptions base_opts;
    base_opts.model = &model;
    base_opts.compute_divergence = false;
    const auto baseline =
        run_rollout(cfg, Policy{Policy::Kind::dense_window}, 2, base_opts)
            .trajectory;

    RolloutOptions masked_opts = base_opts;
    masked_opts.masked_head = HeadRef{1, 1};  // dead head
    const auto masked =
        run_rollout(cfg, Policy{Policy::Kind::dense_window}, 2, masked_opts)
            .trajectory;
    for (std::size_t i = 0; i < baseline.size(); ++i) {
        CHECK(baseline[i].data == masked[i].data);
    }

    masked_opts.masked_head = HeadRef{0, 0};  // the live head
    const auto live_masked =
        run_rollout(cfg, Policy{Policy::Kind::dense_window}, 2, masked_opts)
            .trajectory;
    bool any_difference = false;
    for (std::size_t i = 0; i < baseline.size(); ++i) {
        any_difference = any_difference || baseline[i].data != live_masked[i].data;
    }
    CHECK(any_difference);
}

TEST_CASE("the single live head ranks strictly first") {
    RunConfig cfg = importance_config();
    const HeadRef live{0, 1};
    SyntheticModel model = SyntheticModel::single_live_head(
        cfg.shape, derive_seed(cfg.seed, seed_tag::model_weights), live);

    // estimate_importance drives the default seeded model, so point the
    // rollout at the constructed one by swapping the machinery: run the
    // masked rollouts through run_rollout with the custom model.
    ImportanceConfig icfg;
    icfg.run = cfg;
    icfg.dm = DmLossConfig::from_params(cfg.importance);
    icfg.dm.normalize_gradient = false;
    icfg.num_chunks = cfg.importance.num_chunks;
    icfg.model = std::make_shared<EnergyScoreModel>();
    icfg.rollout_model = &model;

    const ImportanceTable table = estimate_importance({0, 1}, icfg);
    double live_score = table.at(live.layer, live.head);
    for (std::size_t l = 0; l < table.layers; ++l) {
        for (std::size_t h = 0; h < table.heads; ++h) {
            if (l == live.layer && h == live.head) continue;
            CHECK(live_score > table.at(l, h));
        }
    }

    const HeadBudgetTable budgets = allocate_budgets(table, 4, 12, 2.0, 1e-6);
    const int live_budget = budgets.at(live.layer, live.head);
    for (std::size_t l = 0; l < budgets.layers; ++l) {
        for (std::size_t h = 0; h < budgets.heads; ++h) {
            if (l == live.layer && h == live.head) continue;
            CHECK(live_budget > budgets.at(l, h));
            // Dead heads all score the baseline loss, the table minimum.
            CHECK(budgets.at(l, h) == 4);
        }
    }
}

TEST_CASE("histogram counts sum to the head count") {
    auto rng = make_rng(52);
    std::vector<double> scores(5 * 7);
    for (double& s : scores) {
        std::uniform_real_distribution<double> pick(0.0, 2.0);
        s = pick(rng);
    }
    const ImportanceHistogram hist = importance_histogram(scores, 10);
    std::size_t total = 0;
    for (const HistogramBin& b : hist.bins) total += b.count;
    CHECK(total == scores.size());
    CHECK(hist.bins.front().low == doctest::Approx(hist.min));
    CHECK(hist.bins.back().high == doctest::Approx(hist.max));
    CHECK(hist.min <= hist.median);
    CHECK(hist.median <= hist.max);

    // Degenerate all-equal table: everything lands in the first bin.
    const std::vector<double> flat(12, 0.25);
    const ImportanceHistogram fh = importance_histogram(flat, 4);
    CHECK(fh.bins[0].count == 12);
    CHECK(fh.min == fh.max);

    std::ostringstream os;
    fh.write_csv(os);
    CHECK(os.str().rfind("bin_low,bin_high,count\n", 0) == 0);
    CHECK(os.str().find("# median,") != std::string::npos);
}

TEST_CASE("identity scorer sees no degradation anywhere") {
    RunConfig cfg = importance_config();
    ImportanceConfig icfg;
    icfg.run = cfg;
    icfg.dm = DmLossConfig::from_params(cfg.importance);
    icfg.num_chunks = cfg.importance.num_chunks;
    icfg.model = std::make_shared<IdentityScoreModel>();
    const ImportanceTable table = estimate_importance({0}, icfg);
    for (double s : table.scores) CHECK(s == 0.0);
}

TEST_CASE("equal per-prompt losses average to themselves") {
    RunConfig cfg = importance_config();
    ImportanceConfig icfg;
    icfg.run = cfg;
    icfg.dm = DmLossConfig::from_params(cfg.importance);
    icfg.dm.normalize_gradient = false;
    icfg.num_chunks = cfg.importance.num_chunks;
    icfg.model = std::make_shared<ConstantGapScoreModel>();
    // Constant gap of 0.2 over window_length * latent_dim entries.
    const double latent =
        static_cast<double>(cfg.shape.tokens_per_frame *
                            cfg.shape.heads_per_layer * cfg.shape.head_dim);
    const double expected =
        0.5 * 0.2 * 0.2 * latent * static_cast<double>(cfg.importance.window_length);
    const ImportanceTable table = estimate_importance({0, 1}, icfg);
    for (double s : table.scores) {
        CHECK(s == doctest::Approx(expected).epsilon(1e-9));
    }
}

TEST_CASE("importance is invariant to prompt order") {
    RunConfig cfg = importance_config();
    ImportanceConfig icfg;
    icfg.run = cfg;
    icfg.dm = DmLossConfig::from_params(cfg.importance);
    icfg.num_chunks = cfg.importance.num_chunks;
    icfg.model = make_score_model(cfg.score_model, cfg.seed);
    const ImportanceTable fwd = estimate_importance({0, 1}, icfg);
    const ImportanceTable rev = estimate_importance({1, 0}, icfg);
    for (std::size_t i = 0; i < fwd.scores.size(); ++i) {
        CHECK(fwd.scores[i] == doctest::Approx(rev.scores[i]).epsilon(1e-12));
    }
}

TEST_CASE("a trajectory shorter than the window plan is rejected") {
    RunConfig cfg = importance_config();
    cfg.importance.num_windows = 50;
    ImportanceConfig icfg;
    icfg.run = cfg;
    icfg.dm = DmLossConfig::from_params(cfg.importance);
    icfg.num_chunks = 1;
    icfg.model = std::make_shared<IdentityScoreModel>();
    CHECK_THROWS_AS(estimate_importance({0}, icfg), ConfigError);
}

TEST_CASE("normalization endpoints and worked values") {
    ImportanceTable table;
    table.layers = 1;
    table.heads = 3;
    table.scores = {1.0, 3.0, 5.0};
    const std::vector<double> norm = normalize_importance(table, 1e-6);
    CHECK(norm[0] == doctest::Approx(0.0));
    CHECK(norm[1] == doctest::Approx(0.5).epsilon(1e-5));
    CHECK(norm[2] == doctest::Approx(1.0).epsilon(1e-5));
    CHECK(norm[2] < 1.0);  // epsilon keeps the top strictly below one

    table.scores = {2.0, 2.0, 2.0};
    for (double v : normalize_importance(table, 1e-6)) CHECK(v == 0.0);
}

TEST_CASE("budget mapping endpoints, worked value and curvature") {
    CHECK(budget_rounded(0.0, 4, 12, 2.0) == 4);
    CHECK(budget_rounded(1.0, 4, 12, 2.0) == 12);
    CHECK(budget_rounded(0.5, 4, 12, 2.0) == 6);  // round(4 + 0.25 * 8)

    auto rng = make_rng(51);
    std::uniform_real_distribution<double> pick(0.0, 1.0);
    for (int i = 0; i < 200; ++i) {
        const double x = pick(rng);
        // gamma above one pulls mid-range budgets down.
        CHECK(budget_value(x, 4, 12, 2.0) <= budget_value(x, 4, 12, 1.0));
        const double lo = pick(rng), hi = pick(rng);
        const double a = std::min(lo, hi), b = std::max(lo, hi);
        CHECK(budget_rounded(a, 4, 12, 2.0) <= budget_rounded(b, 4, 12, 2.0));
    }
}

TEST_CASE("budget table json round trip and validation") {
    const HeadBudgetTable table = kvtest::reference_budget_table();
    const nlohmann::json j = table.to_json();
    const HeadBudgetTable back = HeadBudgetTable::from_json(j);
    CHECK(back.budgets == table.budgets);
    CHECK(back.total() == 1958);

    nlohmann::json bad = j;
    bad["mystery"] = true;
    CHECK_THROWS_AS(HeadBudgetTable::from_json(bad), ValidationError);

    bad = j;
    bad["budgets"][0][0] = 99;  // outside [b_min, b_max]
    CHECK_THROWS_AS(HeadBudgetTable::from_json(bad), ValidationError);

    bad = j;
    bad["normalized"][0][0] = 0.9;  // no longer maps to the stored budget
    CHECK_THROWS_AS(HeadBudgetTable::from_json(bad), ValidationError);

    bad = j;
    bad.erase("gamma");
    CHECK_THROWS_AS(HeadBudgetTable::from_json(bad), ValidationError);
}

}  // TEST_SUITE
