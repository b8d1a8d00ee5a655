#include <cmath>

#include "doctest.h"
#include "kvfocus/cost_model.hpp"
#include "support.hpp"

using namespace kvfocus;

namespace {

ModelShape reference_shape() {
    ModelShape shape;
    shape.num_layers = 30;
    shape.heads_per_layer = 12;
    shape.head_dim = 128;
    shape.tokens_per_frame = 1560;
    shape.chunk_frames = 3;
    shape.dense_window = 21;
    return shape;
}

double round_to(double v, int digits) {
    const double p = std::pow(10.0, digits);
    return std::round(v * p) / p;
}

}  // namespace

TEST_SUITE("cost_model") {

TEST_CASE("reference frame-level cost constants") {
    const HeadBudgetTable table = kvtest::reference_budget_table();
    REQUIRE(table.total() == 1958);
    const FrameCost fc = frame_cost(table, reference_shape());
    CHECK(fc.c_pack == 5874);
    CHECK(fc.c_dense == 22680);
    CHECK(round_to(fc.ratio, 3) == doctest::Approx(0.259));
    CHECK(round_to(fc.theoretical_speedup, 2) == doctest::Approx(3.86));
    CHECK(round_to(1.0 - fc.ratio, 3) == doctest::Approx(0.741));
}

TEST_CASE("reference memory constants") {
    const HeadBudgetTable table = kvtest::reference_budget_table();
    const ModelShape shape = reference_shape();
    const MemoryOverhead mem = memory_overhead(table, shape, 2);

    CHECK(mem.m_q_bytes == 14376960);
    CHECK(round_to(mib(static_cast<double>(mem.m_q_bytes)), 2) ==
          doctest::Approx(13.71));

    // One frame in one head.
    const std::uint64_t block = 1560ULL * 128ULL * 2ULL;
    CHECK(block == 399360);
    CHECK(round_to(mib(static_cast<double>(block)), 3) == doctest::Approx(0.381));

    // The reference memory figures quote the query and key/value components
    // at two decimals each (the average through the 2 d.p. layer-sum
    // average); the byte totals stay exact.
    const CostReport report = cost_report(table, shape, 2);
    const nlohmann::json j = report.to_json();
    CHECK(j.at("m_pack_min_mib").get<double>() == doctest::Approx(153.10));
    CHECK(j.at("m_pack_avg_mib").get<double>() == doctest::Approx(162.86));
    CHECK(j.at("m_pack_max_mib").get<double>() == doctest::Approx(178.24));
    CHECK(mem.m_pack_min_bytes == 160542720);
    CHECK(mem.m_pack_max_bytes == 186900480);
    CHECK(round_to(mem.layer_sum_avg, 2) == doctest::Approx(65.27));

    // Layer sums carry the endpoints and the exact rational average.
    std::uint64_t lo = mem.layer_sums[0], hi = mem.layer_sums[0], sum = 0;
    for (std::uint64_t s : mem.layer_sums) {
        lo = std::min(lo, s);
        hi = std::max(hi, s);
        sum += s;
    }
    CHECK(lo == 61);
    CHECK(hi == 72);
    CHECK(round_to(static_cast<double>(sum) / 30.0, 2) == doctest::Approx(65.27));
}

TEST_CASE("uniform budgets at the dense window give ratio one") {
    ModelShape shape = reference_shape();
    const HeadBudgetTable table = HeadBudgetTable::uniform(
        shape.num_layers, shape.heads_per_layer,
        static_cast<int>(shape.dense_window));
    const FrameCost fc = frame_cost(table, shape);
    CHECK(fc.c_pack == fc.c_dense);
    CHECK(fc.ratio == doctest::Approx(1.0));
}

TEST_CASE("packed cost undercuts dense exactly when the mean budget does") {
    ModelShape shape;
    shape.num_layers = 3;
    shape.heads_per_layer = 2;
    shape.head_dim = 4;
    shape.tokens_per_frame = 4;
    shape.chunk_frames = 2;
    shape.dense_window = 6;
    auto rng = make_rng(53);
    std::uniform_int_distribution<int> pick(0, 12);
    for (int trial = 0; trial < 100; ++trial) {
        HeadBudgetTable table = HeadBudgetTable::uniform(3, 2, 0);
        table.b_max = 12;
        double sum = 0.0;
        for (int& b : table.budgets) {
            b = pick(rng);
            sum += b;
        }
        const double mean = sum / static_cast<double>(table.budgets.size());
        const FrameCost fc = frame_cost(table, shape);
        CHECK((fc.c_pack <= fc.c_dense) ==
              (mean <= static_cast<double>(shape.dense_window)));
    }
}

TEST_CASE("memory terms scale linearly in N, D, s and QF") {
    const HeadBudgetTable table = kvtest::reference_budget_table();
    const ModelShape base = reference_shape();
    const MemoryOverhead m0 = memory_overhead(table, base, 2);

    ModelShape doubled = base;
    doubled.tokens_per_frame *= 2;
    CHECK(memory_overhead(table, doubled, 2).m_q_bytes == 2 * m0.m_q_bytes);

    doubled = base;
    doubled.head_dim *= 2;
    CHECK(memory_overhead(table, doubled, 2).m_q_bytes == 2 * m0.m_q_bytes);

    CHECK(memory_overhead(table, base, 4).m_q_bytes == 2 * m0.m_q_bytes);

    doubled = base;
    doubled.chunk_frames *= 2;
    const MemoryOverhead m2 = memory_overhead(table, doubled, 2);
    CHECK(m2.m_q_bytes == 2 * m0.m_q_bytes);
    CHECK(m2.m_pack_max_bytes == 2 * m0.m_pack_max_bytes);
}

TEST_CASE("mask-based frame units count retained history only") {
    SelectionMask mask;
    mask.layer = 0;
    mask.query_frames = 2;
    mask.heads = 1;
    mask.generated = {10, 11};
    mask.entries.resize(2);
    mask.at(0, 0, 0).retained = {0, 3, 10, 11};  // 2 historical
    mask.at(0, 1, 0).retained = {3, 11};         // 1 historical
    const std::vector<SelectionMask> layers{mask};
    CHECK(frame_cost_from_masks(layers) == 3);
}

TEST_CASE("report json carries the derived token-flop figures") {
    const HeadBudgetTable table = kvtest::reference_budget_table();
    const ModelShape shape = reference_shape();
    const CostReport report = cost_report(table, shape, 2);
    const nlohmann::json j = report.to_json();
    CHECK(j.at("c_pack") == 5874);
    CHECK(j.at("derived_token_flops_pack") ==
          5874ULL * 1560ULL * 1560ULL * 128ULL);
    CHECK(j.at("layer_sums").size() == 30);
}

TEST_CASE("shape mismatches are rejected") {
    const HeadBudgetTable table = kvtest::reference_budget_table();
    ModelShape wrong = reference_shape();
    wrong.num_layers = 8;
    CHECK_THROWS_AS(frame_cost(table, wrong), ShapeError);
    CHECK_THROWS_AS(memory_overhead(table, wrong, 2), ShapeError);
    CHECK_THROWS_AS(memory_overhead(table, reference_shape(), 0), ConfigError);
}

}  // TEST_SUITE
