#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

namespace kvfocus {

struct SuiteResult {
    std::string name;
    std::string metric;   // e.g. "max relative error"
    bool pass = false;
    double worst = 0.0;   // worst-case error observed
    double bound = 0.0;   // tolerance the suite enforces, 0 = none
    std::size_t cases = 0;
    std::string detail;   // extra failure context, empty on pass
};

// Scattered variable-length attention against the dense masked oracle over
// randomized small instances (history <= 8 frames, <= 8 tokens, <= 4 heads,
// head_dim <= 8; random masks, half of them produced by the scoring +
// selection pipeline under random budgets). Bound: 1e-5 relative.
SuiteResult equivalence_suite(std::size_t instances, std::uint64_t seed);

// Rotate-then-dot against the closed-form relative-distance logit over
// random (q, k, t_q, t_k, spec), plus the degenerate identities (zero
// distance, zero temporal components, periodic phase alignment) and the
// non-degeneracy sampling check. Bound: 1e-6 absolute, double precision.
SuiteResult rope_suite(std::size_t instances, std::uint64_t seed);

// Standardized score slices have |mean| <= 1e-4 and variance within 1e-3 of
// one whenever the raw slice is non-constant.
SuiteResult standardization_suite(std::size_t instances, std::uint64_t seed);

// Budget mapping endpoints, monotonicity and range over random
// (b_min, b_max, gamma).
SuiteResult budget_mapping_suite(std::size_t instances, std::uint64_t seed);

// Runs all suites, printing one line each; returns the number of failures.
int run_verify(std::size_t instances, std::uint64_t seed, std::ostream& out);

}  // namespace kvfocus
