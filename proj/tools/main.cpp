// kvfocus command-line front end: head-importance estimation, rollouts,
// cost reports, verification suites and probes, all driven by one JSON
// config (see README for schemas).

#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "kvfocus/config.hpp"
#include "kvfocus/cost_model.hpp"
#include "kvfocus/head_importance.hpp"
#include "kvfocus/rollout.hpp"
#include "kvfocus/rope.hpp"
#include "kvfocus/verify.hpp"

namespace {

constexpr int kExitOk = 0;
constexpr int kExitFailure = 1;
constexpr int kExitUsage = 2;
constexpr int kExitValidation = 3;
constexpr int kExitIo = 4;
constexpr int kExitConfig = 5;

constexpr const char* kConfigEnvVar = "KVFOCUS_CONFIG";

std::string resolve_config_path(const std::string& flag_value) {
    if (!flag_value.empty()) return flag_value;
    if (const char* env = std::getenv(kConfigEnvVar)) return env;
    throw kvfocus::ConfigError(
        "no config given: pass --config or set " + std::string(kConfigEnvVar));
}

kvfocus::RunConfig load_config(const std::string& flag_value,
                               std::optional<std::uint64_t> seed_override) {
    kvfocus::RunConfig cfg = kvfocus::RunConfig::load(resolve_config_path(flag_value));
    if (seed_override) cfg.seed = *seed_override;
    return cfg;
}

nlohmann::json parse_json_arg(const std::string& arg, const char* what) {
    // Inline JSON (starts with '{') or a path to a JSON file.
    if (!arg.empty() && arg.front() == '{') {
        try {
            return nlohmann::json::parse(arg);
        } catch (const nlohmann::json::exception& e) {
            throw kvfocus::ValidationError(std::string(what) + ": " + e.what());
        }
    }
    std::ifstream in(arg);
    if (!in) throw kvfocus::IoError(std::string("cannot open ") + what + " '" + arg + "'");
    try {
        nlohmann::json j;
        in >> j;
        return j;
    } catch (const nlohmann::json::exception& e) {
        throw kvfocus::ValidationError(std::string(what) + " '" + arg + "': " + e.what());
    }
}

kvfocus::ModelShape shape_from_json(const nlohmann::json& j) {
    for (const auto& [key, value] : j.items()) {
        (void)value;
        if (key != "num_layers" && key != "heads_per_layer" && key != "head_dim" &&
            key != "tokens_per_frame" && key != "chunk_frames" &&
            key != "dense_window") {
            throw kvfocus::ValidationError("shape: unknown key '" + key + "'");
        }
    }
    kvfocus::ModelShape shape;
    shape.num_layers = j.at("num_layers").get<std::size_t>();
    shape.heads_per_layer = j.at("heads_per_layer").get<std::size_t>();
    shape.head_dim = j.at("head_dim").get<std::size_t>();
    shape.tokens_per_frame = j.at("tokens_per_frame").get<std::size_t>();
    shape.chunk_frames = j.at("chunk_frames").get<std::size_t>();
    shape.dense_window = j.at("dense_window").get<std::size_t>();
    shape.validate();
    return shape;
}

void write_text_file(const std::string& path, const std::string& content) {
    std::ofstream out(path);
    if (!out) throw kvfocus::IoError("cannot open '" + path + "' for writing");
    out << content;
    if (!out) throw kvfocus::IoError("failed writing '" + path + "'");
}

int cmd_estimate_heads(const std::string& config_path,
                       std::optional<std::uint64_t> seed,
                       const std::string& out_path) {
    const kvfocus::RunConfig cfg = load_config(config_path, seed);
    kvfocus::ImportanceConfig icfg;
    icfg.run = cfg;
    icfg.dm = kvfocus::DmLossConfig::from_params(cfg.importance);
    icfg.num_chunks = cfg.importance.num_chunks;
    icfg.model = kvfocus::make_score_model(cfg.score_model, cfg.seed);

    std::vector<std::int64_t> prompts(cfg.importance.num_prompts);
    for (std::size_t i = 0; i < prompts.size(); ++i) {
        prompts[i] = static_cast<std::int64_t>(i);
    }
    const kvfocus::ImportanceTable table =
        kvfocus::estimate_importance(prompts, icfg);
    const kvfocus::HeadBudgetTable budgets = kvfocus::allocate_budgets(
        table, cfg.budget.b_min, cfg.budget.b_max, cfg.budget.gamma, cfg.epsilon);
    budgets.save(out_path);

    const auto [lo, hi] =
        std::minmax_element(table.scores.begin(), table.scores.end());
    std::cout << "estimated " << table.layers << "x" << table.heads
              << " head importances over " << prompts.size()
              << " prompts; importance range [" << *lo << ", " << *hi
              << "], budget total " << budgets.total() << "\n"
              << "wrote " << out_path << "\n";
    return kExitOk;
}

int cmd_rollout(const std::string& config_path, std::optional<std::uint64_t> seed,
                const std::string& policy_name, const std::string& budgets_path,
                std::size_t chunks, const std::string& trace_path,
                const std::string& masks_path) {
    const kvfocus::RunConfig cfg = load_config(config_path, seed);
    const kvfocus::Policy policy = kvfocus::Policy::parse(policy_name);
    kvfocus::HeadBudgetTable budgets;
    kvfocus::RolloutOptions options;
    if (policy.needs_budgets()) {
        if (budgets_path.empty()) {
            throw kvfocus::ConfigError("policy '" + policy_name +
                                       "' requires --budgets");
        }
        budgets = kvfocus::HeadBudgetTable::load(budgets_path);
        options.budgets = &budgets;
    }
    options.collect_masks = !masks_path.empty();
    const kvfocus::RolloutResult result =
        kvfocus::run_rollout(cfg, policy, chunks, options);

    if (!trace_path.empty()) {
        write_text_file(trace_path, result.trace.to_csv());
    }
    if (!masks_path.empty()) {
        write_text_file(masks_path, kvfocus::masks_to_json(result.masks).dump(2) + "\n");
    }
    result.trace.write_csv(std::cout);
    return kExitOk;
}

int cmd_cost(const std::string& budgets_path, const std::string& shape_arg,
             std::uint64_t bytes_per_element) {
    const kvfocus::HeadBudgetTable budgets =
        kvfocus::HeadBudgetTable::load(budgets_path);
    const kvfocus::ModelShape shape = shape_from_json(
        parse_json_arg(shape_arg, "shape"));
    const kvfocus::CostReport report =
        kvfocus::cost_report(budgets, shape, bytes_per_element);
    std::cout << report.to_json().dump(2) << "\n";

    std::ostringstream table;
    table << std::fixed;
    table << "frame-level cost: c_pack=" << report.cost.c_pack
          << " c_dense=" << report.cost.c_dense << " ratio="
          << std::setprecision(3) << report.cost.ratio << " speedup="
          << std::setprecision(2) << report.cost.theoretical_speedup << "x\n";
    const nlohmann::json jr = report.to_json();
    table << "packed memory:    M_Q=" << std::setprecision(2)
          << jr.at("m_q_mib").get<double>() << " MiB, M_pack min/avg/max = "
          << jr.at("m_pack_min_mib").get<double>() << " / "
          << jr.at("m_pack_avg_mib").get<double>() << " / "
          << jr.at("m_pack_max_mib").get<double>() << " MiB\n";
    std::cout << table.str();
    return kExitOk;
}

int cmd_rope_probe(std::size_t head_dim, const std::vector<std::size_t>& blocks,
                   double base, std::int64_t max_dt, std::uint64_t seed,
                   const std::string& out_path) {
    const kvfocus::RopeSpec spec =
        blocks.empty() ? kvfocus::RopeSpec::default_for(head_dim)
                       : kvfocus::RopeSpec::standard(head_dim, blocks, base);
    if (out_path.empty()) {
        kvfocus::rope_probe_csv(spec, seed, max_dt, std::cout);
    } else {
        std::ostringstream os;
        kvfocus::rope_probe_csv(spec, seed, max_dt, os);
        write_text_file(out_path, os.str());
        std::cout << "wrote " << out_path << "\n";
    }
    return kExitOk;
}

int cmd_report_hist(const std::string& budgets_path, std::size_t bins,
                    const std::string& out_path) {
    const kvfocus::HeadBudgetTable budgets =
        kvfocus::HeadBudgetTable::load(budgets_path);
    const kvfocus::ImportanceHistogram hist =
        kvfocus::importance_histogram(budgets.importance, bins);
    std::ostringstream os;
    hist.write_csv(os);
    if (out_path.empty()) {
        std::cout << os.str();
    } else {
        write_text_file(out_path, os.str());
        std::cout << "wrote " << out_path << "\n";
    }
    return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"KV-cache compression engine for chunked autoregressive "
                 "attention"};
    app.require_subcommand(1);

    std::string config_path;
    std::optional<std::uint64_t> seed_override;
    app.add_option("--config", config_path,
                   "run config JSON (default: $" + std::string(kConfigEnvVar) + ")");
    app.add_option("--seed", seed_override, "override the config seed");

    auto* estimate = app.add_subcommand(
        "estimate-heads", "estimate head importance and freeze a budget table");
    std::string estimate_out = "budgets.json";
    estimate->add_option("--out", estimate_out, "output budget table path");

    auto* rollout = app.add_subcommand("rollout", "run a chunked rollout");
    std::string rollout_policy = "focused";
    std::string rollout_budgets;
    std::size_t rollout_chunks = 3;
    std::string rollout_trace;
    std::string rollout_masks;
    rollout->add_option("--policy", rollout_policy,
                        "dense_window|attention_sink|attention_only|"
                        "diversity_only|focused");
    rollout->add_option("--budgets", rollout_budgets, "budget table JSON");
    rollout->add_option("--chunks", rollout_chunks, "number of chunks");
    rollout->add_option("--trace", rollout_trace, "trace CSV output path");
    rollout->add_option("--dump-masks", rollout_masks,
                        "selection mask JSON output path");

    auto* verify = app.add_subcommand(
        "verify", "run the randomized equivalence and property suites");
    std::size_t verify_instances = 1000;
    std::uint64_t verify_seed = 1;
    verify->add_option("--instances", verify_instances, "cases per suite");
    verify->add_option("--seed", verify_seed, "suite RNG seed");

    auto* cost = app.add_subcommand("cost", "analytical cost and memory report");
    std::string cost_budgets;
    std::string cost_shape;
    std::uint64_t cost_bytes = 2;
    cost->add_option("--budgets", cost_budgets, "budget table JSON")->required();
    cost->add_option("--shape", cost_shape, "model shape JSON (inline or path)")
        ->required();
    cost->add_option("--bytes-per-element", cost_bytes,
                     "cache element width in bytes");

    auto* probe = app.add_subcommand("rope-probe",
                                     "emit (delta_t, temporal logit) CSV");
    std::size_t probe_dim = 8;
    std::vector<std::size_t> probe_blocks;
    double probe_base = 10000.0;
    std::int64_t probe_max_dt = 32;
    std::uint64_t probe_seed = 0;
    std::string probe_out;
    probe->add_option("--head-dim", probe_dim, "head dimension (even)");
    probe->add_option("--temporal-blocks", probe_blocks,
                      "temporal block indices (default: first half)");
    probe->add_option("--base", probe_base, "frequency schedule base");
    probe->add_option("--max-dt", probe_max_dt, "largest distance probed");
    probe->add_option("--seed", probe_seed, "probe RNG seed");
    probe->add_option("--out", probe_out, "CSV output path (default stdout)");

    auto* report = app.add_subcommand("report", "reports over saved artifacts");
    std::string report_hist;
    std::size_t report_bins = 20;
    std::string report_out;
    report->add_option("--hist", report_hist,
                       "budget table JSON to histogram by importance")
        ->required();
    report->add_option("--bins", report_bins, "histogram bin count");
    report->add_option("--out", report_out, "CSV output path (default stdout)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return e.get_exit_code() == 0 ? kExitOk : kExitUsage;
    }

    try {
        if (app.got_subcommand(estimate)) {
            return cmd_estimate_heads(config_path, seed_override, estimate_out);
        }
        if (app.got_subcommand(rollout)) {
            return cmd_rollout(config_path, seed_override, rollout_policy,
                               rollout_budgets, rollout_chunks, rollout_trace,
                               rollout_masks);
        }
        if (app.got_subcommand(verify)) {
            const int failures =
                kvfocus::run_verify(verify_instances, verify_seed, std::cout);
            return failures == 0 ? kExitOk : kExitFailure;
        }
        if (app.got_subcommand(cost)) {
            return cmd_cost(cost_budgets, cost_shape, cost_bytes);
        }
        if (app.got_subcommand(probe)) {
            return cmd_rope_probe(probe_dim, probe_blocks, probe_base,
                                  probe_max_dt, probe_seed, probe_out);
        }
        if (app.got_subcommand(report)) {
            return cmd_report_hist(report_hist, report_bins, report_out);
        }
        std::cerr << "error: no command\n";
        return kExitUsage;
    } catch (const kvfocus::ValidationError& e) {
        std::cerr << "validation error: " << e.what() << "\n";
        return kExitValidation;
    } catch (const kvfocus::IoError& e) {
        std::cerr << "io error: " << e.what() << "\n";
        return kExitIo;
    } catch (const kvfocus::ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitFailure;
    }
}
