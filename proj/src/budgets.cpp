#include "kvfocus/budgets.hpp"

#include <cmath>
#include <fstream>

namespace kvfocus {

namespace {

void require(bool ok, const std::string& what) {
    if (!ok) throw ValidationError("budget table: " + what);
}

template <typename T>
nlohmann::json rows_to_json(const std::vector<T>& flat, std::size_t layers,
                            std::size_t heads) {
    nlohmann::json rows = nlohmann::json::array();
    for (std::size_t l = 0; l < layers; ++l) {
        nlohmann::json row = nlohmann::json::array();
        for (std::size_t h = 0; h < heads; ++h) {
            row.push_back(flat[l * heads + h]);
        }
        rows.push_back(std::move(row));
    }
    return rows;
}

template <typename T>
std::vector<T> rows_from_json(const nlohmann::json& j, std::size_t layers,
                              std::size_t heads, const char* name) {
    require(j.is_array() && j.size() == layers,
            std::string(name) + " must have one row per layer");
    std::vector<T> flat;
    flat.reserve(layers * heads);
    for (const auto& row : j) {
        require(row.is_array() && row.size() == heads,
                std::string(name) + " row must have one value per head");
        for (const auto& v : row) {
            require(v.is_number(), std::string(name) + " entries must be numbers");
            flat.push_back(v.get<T>());
        }
    }
    return flat;
}

}  // namespace

double budget_value(double normalized, int b_min, int b_max, double gamma) {
    return static_cast<double>(b_min) +
           std::pow(normalized, gamma) * static_cast<double>(b_max - b_min);
}

int budget_rounded(double normalized, int b_min, int b_max, double gamma) {
    return static_cast<int>(
        std::llround(budget_value(normalized, b_min, b_max, gamma)));
}

std::uint64_t HeadBudgetTable::total() const {
    std::uint64_t sum = 0;
    for (int b : budgets) sum += static_cast<std::uint64_t>(b);
    return sum;
}

std::uint64_t HeadBudgetTable::layer_sum(std::size_t layer) const {
    std::uint64_t sum = 0;
    for (std::size_t h = 0; h < heads; ++h) {
        sum += static_cast<std::uint64_t>(at(layer, h));
    }
    return sum;
}

HeadBudgetTable HeadBudgetTable::uniform(std::size_t layers, std::size_t heads,
                                         int budget) {
    HeadBudgetTable t;
    t.layers = layers;
    t.heads = heads;
    t.b_min = budget;
    t.b_max = budget;
    t.gamma = 1.0;
    t.budgets.assign(layers * heads, budget);
    t.normalized.assign(layers * heads, 0.0);
    t.importance.assign(layers * heads, 0.0);
    return t;
}

void HeadBudgetTable::validate() const {
    require(layers >= 1 && heads >= 1, "layers and heads must be >= 1");
    require(b_min <= b_max, "b_min must be <= b_max");
    require(b_min >= 0, "b_min must be >= 0");
    require(gamma > 0.0, "gamma must be > 0");
    const std::size_t n = layers * heads;
    require(budgets.size() == n, "budgets size mismatch");
    require(normalized.size() == n, "normalized size mismatch");
    require(importance.size() == n, "importance size mismatch");
    for (std::size_t i = 0; i < n; ++i) {
        require(budgets[i] >= b_min && budgets[i] <= b_max,
                "budget out of [b_min, b_max]");
        require(std::isfinite(normalized[i]) && normalized[i] >= 0.0 &&
                    normalized[i] <= 1.0,
                "normalized score out of [0, 1]");
        require(std::isfinite(importance[i]) && importance[i] >= 0.0,
                "importance must be finite and non-negative");
        require(budgets[i] == budget_rounded(normalized[i], b_min, b_max, gamma),
                "budget does not equal the mapping of its normalized score");
    }
}

nlohmann::json HeadBudgetTable::to_json() const {
    nlohmann::json j;
    j["layers"] = layers;
    j["heads"] = heads;
    j["b_min"] = b_min;
    j["b_max"] = b_max;
    j["gamma"] = gamma;
    j["importance"] = rows_to_json(importance, layers, heads);
    j["normalized"] = rows_to_json(normalized, layers, heads);
    j["budgets"] = rows_to_json(budgets, layers, heads);
    j["seeds"] = seeds;
    j["prompts"] = prompts;
    return j;
}

HeadBudgetTable HeadBudgetTable::from_json(const nlohmann::json& j) {
    require(j.is_object(), "top level must be an object");
    static const char* const known[] = {"layers",     "heads",   "b_min",
                                        "b_max",      "gamma",   "importance",
                                        "normalized", "budgets", "seeds",
                                        "prompts"};
    for (const auto& [key, value] : j.items()) {
        (void)value;
        bool ok = false;
        for (const char* k : known) ok = ok || key == k;
        require(ok, "unknown key '" + key + "'");
    }
    for (const char* k : {"layers", "heads", "b_min", "b_max", "gamma",
                          "importance", "normalized", "budgets"}) {
        require(j.contains(k), std::string("missing key '") + k + "'");
    }
    HeadBudgetTable t;
    t.layers = j.at("layers").get<std::size_t>();
    t.heads = j.at("heads").get<std::size_t>();
    t.b_min = j.at("b_min").get<int>();
    t.b_max = j.at("b_max").get<int>();
    t.gamma = j.at("gamma").get<double>();
    t.importance = rows_from_json<double>(j.at("importance"), t.layers, t.heads,
                                          "importance");
    t.normalized = rows_from_json<double>(j.at("normalized"), t.layers, t.heads,
                                          "normalized");
    t.budgets = rows_from_json<int>(j.at("budgets"), t.layers, t.heads,
                                    "budgets");
    if (j.contains("seeds")) {
        t.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
    }
    if (j.contains("prompts")) {
        t.prompts = j.at("prompts").get<std::vector<std::int64_t>>();
    }
    t.validate();
    return t;
}

void HeadBudgetTable::save(const std::string& path) const {
    std::ofstream out(path);
    if (!out) throw IoError("cannot open '" + path + "' for writing");
    out << to_json().dump(2) << "\n";
    if (!out) throw IoError("failed writing '" + path + "'");
}

HeadBudgetTable HeadBudgetTable::load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open '" + path + "'");
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw ValidationError("budget table: invalid JSON in '" + path +
                              "': " + e.what());
    }
    return from_json(j);
}

}  // namespace kvfocus
