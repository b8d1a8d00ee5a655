#include "kvfocus/config.hpp"

#include <cmath>
#include <fstream>
#include <initializer_list>

namespace kvfocus {

namespace {

void check_keys(const nlohmann::json& j,
                std::initializer_list<const char*> allowed,
                const char* context) {
    if (!j.is_object()) {
        throw ValidationError(std::string("config: ") + context +
                              " must be an object");
    }
    for (const auto& [key, value] : j.items()) {
        (void)value;
        bool ok = false;
        for (const char* k : allowed) ok = ok || key == k;
        if (!ok) {
            throw ValidationError(std::string("config: unknown key '") + key +
                                  "' in " + context);
        }
    }
}

template <typename T>
T get_or(const nlohmann::json& j, const char* key, T fallback) {
    if (!j.contains(key)) return fallback;
    try {
        return j.at(key).get<T>();
    } catch (const nlohmann::json::exception& e) {
        throw ValidationError(std::string("config: bad value for '") + key +
                              "': " + e.what());
    }
}

template <typename T>
T get_required(const nlohmann::json& j, const char* key, const char* context) {
    if (!j.contains(key)) {
        throw ValidationError(std::string("config: missing key '") + key +
                              "' in " + context);
    }
    return get_or<T>(j, key, T{});
}

}  // namespace

RopeSpec RunConfig::rope_spec() const {
    if (rope_temporal_blocks) {
        return RopeSpec::standard(shape.head_dim, *rope_temporal_blocks,
                                  rope_base);
    }
    RopeSpec spec = RopeSpec::default_for(shape.head_dim);
    if (rope_base != 10000.0) {
        spec = RopeSpec::standard(shape.head_dim, spec.temporal_blocks, rope_base);
    }
    return spec;
}

void RunConfig::validate() const {
    shape.validate();
    if (lambda < 0.0 || lambda > 1.0) {
        throw ConfigError("config: lambda must be in [0, 1]");
    }
    if (groups < 1 || groups > shape.tokens_per_frame) {
        throw ConfigError("config: groups must be in [1, tokens_per_frame]");
    }
    if (budget.b_min > budget.b_max) {
        throw ConfigError("config: b_min must be <= b_max");
    }
    if (budget.b_min < 0) {
        throw ConfigError("config: b_min must be >= 0");
    }
    if (budget.gamma <= 0.0) {
        throw ConfigError("config: gamma must be > 0");
    }
    if (!(epsilon > 0.0)) {
        throw ConfigError("config: epsilon must be > 0");
    }
    if (score_model.perturbation < 0.0) {
        throw ConfigError("config: score_model perturbation must be >= 0");
    }
    if (importance.window_length < 1 || importance.num_windows < 1 ||
        importance.num_chunks < 1 || importance.num_prompts < 1) {
        throw ConfigError("config: importance counts must be >= 1");
    }
    if (importance.cfg_scale < 0.0) {
        throw ConfigError("config: cfg_scale must be >= 0");
    }
    if (importance.timesteps.empty()) {
        throw ConfigError("config: importance timesteps must be non-empty");
    }
    for (double t : importance.timesteps) {
        if (!std::isfinite(t) || t < 0.0) {
            throw ConfigError("config: timesteps must be finite and >= 0");
        }
    }
    rope_spec().validate();
}

nlohmann::json RunConfig::to_json() const {
    nlohmann::json j;
    j["shape"] = {{"num_layers", shape.num_layers},
                  {"heads_per_layer", shape.heads_per_layer},
                  {"head_dim", shape.head_dim},
                  {"tokens_per_frame", shape.tokens_per_frame},
                  {"chunk_frames", shape.chunk_frames},
                  {"dense_window", shape.dense_window}};
    j["lambda"] = lambda;
    j["groups"] = groups;
    j["budget"] = {{"b_min", budget.b_min},
                   {"b_max", budget.b_max},
                   {"gamma", budget.gamma}};
    j["epsilon"] = epsilon;
    j["seed"] = seed;
    const char* kind =
        score_model.kind == ScoreModelSpec::Kind::linear ? "linear" : "identity";
    j["score_model"] = {{"kind", kind},
                        {"perturbation", score_model.perturbation}};
    const char* redundancy = "iid";
    if (stream.redundancy == StreamParams::Redundancy::duplicate) {
        redundancy = "duplicate";
    } else if (stream.redundancy == StreamParams::Redundancy::static_region) {
        redundancy = "static-region";
    }
    j["stream"] = {{"redundancy", redundancy}};
    j["anchors"] = anchors;
    nlohmann::json rope;
    if (rope_temporal_blocks) rope["temporal_blocks"] = *rope_temporal_blocks;
    rope["base"] = rope_base;
    j["rope"] = std::move(rope);
    j["score_on_rotated"] = score_on_rotated;
    j["importance"] = {{"window_length", importance.window_length},
                       {"num_windows", importance.num_windows},
                       {"num_chunks", importance.num_chunks},
                       {"num_prompts", importance.num_prompts},
                       {"cfg_scale", importance.cfg_scale},
                       {"grad_epsilon", importance.grad_epsilon},
                       {"normalize_gradient", importance.normalize_gradient},
                       {"timesteps", importance.timesteps}};
    return j;
}

RunConfig RunConfig::from_json(const nlohmann::json& j) {
    check_keys(j,
               {"shape", "lambda", "groups", "budget", "epsilon", "seed",
                "score_model", "stream", "anchors", "rope", "score_on_rotated",
                "importance"},
               "top level");
    RunConfig cfg;

    const nlohmann::json& shape =
        j.contains("shape") ? j.at("shape") : nlohmann::json::object();
    check_keys(shape,
               {"num_layers", "heads_per_layer", "head_dim", "tokens_per_frame",
                "chunk_frames", "dense_window"},
               "shape");
    cfg.shape.num_layers = get_required<std::size_t>(shape, "num_layers", "shape");
    cfg.shape.heads_per_layer =
        get_required<std::size_t>(shape, "heads_per_layer", "shape");
    cfg.shape.head_dim = get_required<std::size_t>(shape, "head_dim", "shape");
    cfg.shape.tokens_per_frame =
        get_required<std::size_t>(shape, "tokens_per_frame", "shape");
    cfg.shape.chunk_frames =
        get_required<std::size_t>(shape, "chunk_frames", "shape");
    cfg.shape.dense_window =
        get_required<std::size_t>(shape, "dense_window", "shape");

    cfg.lambda = get_or<double>(j, "lambda", cfg.lambda);
    cfg.groups = get_or<std::size_t>(j, "groups", cfg.groups);
    if (j.contains("budget")) {
        const auto& b = j.at("budget");
        check_keys(b, {"b_min", "b_max", "gamma"}, "budget");
        cfg.budget.b_min = get_or<int>(b, "b_min", cfg.budget.b_min);
        cfg.budget.b_max = get_or<int>(b, "b_max", cfg.budget.b_max);
        cfg.budget.gamma = get_or<double>(b, "gamma", cfg.budget.gamma);
    }
    cfg.epsilon = get_or<double>(j, "epsilon", cfg.epsilon);
    cfg.seed = get_or<std::uint64_t>(j, "seed", cfg.seed);

    if (j.contains("score_model")) {
        const auto& sm = j.at("score_model");
        check_keys(sm, {"kind", "perturbation"}, "score_model");
        const std::string kind = get_or<std::string>(sm, "kind", "linear");
        if (kind == "linear") {
            cfg.score_model.kind = ScoreModelSpec::Kind::linear;
        } else if (kind == "identity") {
            cfg.score_model.kind = ScoreModelSpec::Kind::identity;
        } else {
            throw ValidationError("config: score_model kind must be 'linear' or "
                                  "'identity', got '" + kind + "'");
        }
        cfg.score_model.perturbation =
            get_or<double>(sm, "perturbation", cfg.score_model.perturbation);
    }

    if (j.contains("stream")) {
        const auto& st = j.at("stream");
        check_keys(st, {"redundancy"}, "stream");
        const std::string mode = get_or<std::string>(st, "redundancy", "iid");
        if (mode == "iid") {
            cfg.stream.redundancy = StreamParams::Redundancy::iid;
        } else if (mode == "duplicate") {
            cfg.stream.redundancy = StreamParams::Redundancy::duplicate;
        } else if (mode == "static-region") {
            cfg.stream.redundancy = StreamParams::Redundancy::static_region;
        } else {
            throw ValidationError("config: stream redundancy must be one of "
                                  "'iid', 'duplicate', 'static-region'");
        }
    }

    cfg.anchors = get_or<std::vector<std::int64_t>>(j, "anchors", cfg.anchors);

    if (j.contains("rope")) {
        const auto& r = j.at("rope");
        check_keys(r, {"temporal_blocks", "base"}, "rope");
        if (r.contains("temporal_blocks")) {
            cfg.rope_temporal_blocks =
                r.at("temporal_blocks").get<std::vector<std::size_t>>();
        }
        cfg.rope_base = get_or<double>(r, "base", cfg.rope_base);
    }
    cfg.score_on_rotated = get_or<bool>(j, "score_on_rotated", true);

    if (j.contains("importance")) {
        const auto& imp = j.at("importance");
        check_keys(imp,
                   {"window_length", "num_windows", "num_chunks", "num_prompts",
                    "cfg_scale", "grad_epsilon", "normalize_gradient", "timesteps"},
                   "importance");
        auto& p = cfg.importance;
        p.window_length = get_or<std::size_t>(imp, "window_length", p.window_length);
        p.num_windows = get_or<std::size_t>(imp, "num_windows", p.num_windows);
        p.num_chunks = get_or<std::size_t>(imp, "num_chunks", p.num_chunks);
        p.num_prompts = get_or<std::size_t>(imp, "num_prompts", p.num_prompts);
        p.cfg_scale = get_or<double>(imp, "cfg_scale", p.cfg_scale);
        p.grad_epsilon = get_or<double>(imp, "grad_epsilon", p.grad_epsilon);
        p.normalize_gradient =
            get_or<bool>(imp, "normalize_gradient", p.normalize_gradient);
        p.timesteps = get_or<std::vector<double>>(imp, "timesteps", p.timesteps);
    }

    try {
        cfg.validate();
    } catch (const ConfigError& e) {
        // Bad values in a config *file* are a validation failure.
        throw ValidationError(e.what());
    }
    return cfg;
}

RunConfig RunConfig::load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open config '" + path + "'");
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw ValidationError("config: invalid JSON in '" + path + "': " +
                              e.what());
    }
    return from_json(j);
}

void RunConfig::save(const std::string& path) const {
    std::ofstream out(path);
    if (!out) throw IoError("cannot open '" + path + "' for writing");
    out << to_json().dump(2) << "\n";
    if (!out) throw IoError("failed writing '" + path + "'");
}

}  // namespace kvfocus
