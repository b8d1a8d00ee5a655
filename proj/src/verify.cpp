#include "kvfocus/verify.hpp"

#include <algorithm>
#include <cmath>
#include <ostream>
#include <sstream>

#include "kvfocus/budgets.hpp"
#include "kvfocus/head_importance.hpp"
#include "kvfocus/packed_attention.hpp"
#include "kvfocus/rng.hpp"
#include "kvfocus/rope.hpp"
#include "kvfocus/scoring.hpp"
#include "kvfocus/types.hpp"

namespace kvfocus {

namespace {

FrameTensor random_frame(std::int64_t index, std::size_t tokens,
                         std::size_t heads, std::size_t dim,
                         std::mt19937_64& rng) {
    FrameTensor f(index, tokens, heads, dim);
    fill_normal(std::span<float>(f.data), rng);
    return f;
}

}  // namespace

SuiteResult equivalence_suite(std::size_t instances, std::uint64_t seed) {
    SuiteResult result{"packed/dense equivalence", "max relative error", true,
                       0.0, 1e-5, instances, ""};
    auto rng = make_rng(derive_seed(seed, 0xE0));
    for (std::size_t i = 0; i < instances; ++i) {
        std::uniform_int_distribution<std::size_t> pick_hist(0, 8);
        std::uniform_int_distribution<std::size_t> pick_tokens(1, 8);
        std::uniform_int_distribution<std::size_t> pick_heads(1, 4);
        std::uniform_int_distribution<std::size_t> pick_dim(1, 8);
        std::uniform_int_distribution<std::size_t> pick_qf(1, 3);
        const std::size_t fh = pick_hist(rng);
        const std::size_t tokens = pick_tokens(rng);
        const std::size_t heads = pick_heads(rng);
        const std::size_t dim = pick_dim(rng);
        const std::size_t qf = pick_qf(rng);

        KvCache cache(1, {});
        for (std::size_t f = 0; f < fh; ++f) {
            cache.append(0,
                         random_frame(static_cast<std::int64_t>(f), tokens, heads,
                                      dim, rng),
                         random_frame(static_cast<std::int64_t>(f), tokens, heads,
                                      dim, rng),
                         false);
        }
        // The chunk's own frames join the cache, flagged generated.
        std::vector<FrameTensor> queries;
        for (std::size_t q = 0; q < qf; ++q) {
            const std::int64_t idx = static_cast<std::int64_t>(fh + q);
            queries.push_back(random_frame(idx, tokens, heads, dim, rng));
            cache.append(0, random_frame(idx, tokens, heads, dim, rng),
                         random_frame(idx, tokens, heads, dim, rng), true);
        }

        SelectionMask mask;
        const bool via_selection = fh > 0 && (rng() & 1u);
        if (via_selection) {
            // Random budgets through the real scoring + selection pipeline.
            std::uniform_int_distribution<int> pick_budget(
                0, static_cast<int>(fh));
            HeadBudgetTable budgets =
                HeadBudgetTable::uniform(1, heads, pick_budget(rng));
            std::vector<FrameTensor> keys;
            for (std::int64_t f : cache.historical_indices(0)) {
                keys.push_back(cache.entry(0, f).key);
            }
            std::vector<GroupPooled> pq, pk;
            for (const auto& q : queries) pq.push_back(group_pool(q, 1));
            for (const auto& k : keys) pk.push_back(group_pool(k, 1));
            const ScoreTensor attn = standardize(attention_score(pq, pk, dim), 1e-6);
            const ScoreTensor div =
                broadcast_query_frames(diversity_score(keys, 1e-6), qf);
            mask = select_history(fuse_scores(attn, div, 0.5), budgets, cache, 0);
        } else {
            // Direct random retained subsets, empty ones included.
            mask.layer = 0;
            mask.batch = 1;
            mask.query_frames = qf;
            mask.heads = heads;
            mask.generated.assign(cache.generated().begin(),
                                  cache.generated().end());
            mask.entries.resize(qf * heads);
            const std::vector<std::int64_t> stored = cache.stored_indices(0);
            for (SelectionEntry& e : mask.entries) {
                for (std::int64_t f : stored) {
                    if (rng() & 1u) e.retained.push_back(f);
                }
            }
        }

        PackOptions options;
        options.coalesce = (rng() % 4u) == 0;
        const PackedBatch batch = pack(mask, queries, cache, 0, options);
        const std::vector<float> o_pack = varlen_attention(batch, dim);
        const ChunkOutput packed_out = scatter(o_pack, batch);
        const ChunkOutput oracle_out = dense_oracle(queries, cache, mask);
        const double err = max_relative_error(packed_out, oracle_out);
        if (err > result.worst) result.worst = err;
        if (err > result.bound) {
            result.pass = false;
            std::ostringstream os;
            os << "instance " << i << " (fh=" << fh << " tokens=" << tokens
               << " heads=" << heads << " dim=" << dim << ") error " << err;
            result.detail = os.str();
            return result;
        }
    }
    return result;
}

SuiteResult rope_suite(std::size_t instances, std::uint64_t seed) {
    SuiteResult result{"rope closed form", "max absolute error", true,
                       0.0, 1e-6, instances, ""};
    auto rng = make_rng(derive_seed(seed, 0xE1));
    auto fail = [&](const std::string& what) {
        result.pass = false;
        result.detail = what;
    };
    for (std::size_t i = 0; i < instances && result.pass; ++i) {
        std::uniform_int_distribution<std::size_t> pick_blocks(1, 4);
        const std::size_t m = pick_blocks(rng);
        const std::size_t dim = 2 * m;
        std::vector<std::size_t> temporal;
        for (std::size_t j = 0; j < m; ++j) {
            if (rng() & 1u) temporal.push_back(j);
        }
        if (temporal.empty()) temporal.push_back(rng() % m);
        const RopeSpec spec = RopeSpec::standard(dim, temporal);

        std::vector<double> q(dim), k(dim);
        fill_normal(std::span<double>(q), rng);
        fill_normal(std::span<double>(k), rng);
        std::uniform_int_distribution<std::int64_t> pick_t(-64, 64);
        const std::int64_t t_q = pick_t(rng), t_k = pick_t(rng);

        const double numeric = temporal_logit_numeric(q, k, t_q, t_k, spec);
        const double closed = temporal_logit_closed_form(q, k, t_k - t_q, spec);
        const double err = std::abs(numeric - closed);
        result.worst = std::max(result.worst, err);
        if (err > result.bound) {
            fail("numeric vs closed form error " + std::to_string(err));
            break;
        }

        // Zero distance leaves the inner product untouched.
        double plain = 0.0;
        for (std::size_t j : spec.temporal_blocks) {
            plain += q[2 * j] * k[2 * j] + q[2 * j + 1] * k[2 * j + 1];
        }
        plain /= std::sqrt(static_cast<double>(dim));
        if (std::abs(temporal_logit_closed_form(q, k, 0, spec) - plain) > 1e-12) {
            fail("zero-distance identity violated");
            break;
        }

        // Zero temporal components null the logit.
        std::vector<double> qz = q;
        for (std::size_t j : spec.temporal_blocks) {
            qz[2 * j] = 0.0;
            qz[2 * j + 1] = 0.0;
        }
        if (std::abs(temporal_logit_closed_form(qz, k, t_k - t_q, spec)) != 0.0) {
            fail("zero temporal component identity violated");
            break;
        }
    }
    if (result.pass) {
        // Periodic phase alignment: all frequencies 2*pi/8, distances 8 apart.
        auto rng2 = make_rng(derive_seed(seed, 0xE2));
        RopeSpec periodic;
        periodic.head_dim = 4;
        periodic.temporal_blocks = {0, 1};
        const double w = 2.0 * std::acos(-1.0) / 8.0;
        periodic.frequencies = {w, w};
        std::vector<double> q(4), k(4);
        fill_normal(std::span<double>(q), rng2);
        fill_normal(std::span<double>(k), rng2);
        for (std::int64_t dt = -8; dt <= 8; ++dt) {
            const double a = temporal_logit_closed_form(q, k, dt, periodic);
            const double b = temporal_logit_closed_form(q, k, dt + 8, periodic);
            if (std::abs(a - b) > 1e-9) {
                fail("periodic alignment violated at dt=" + std::to_string(dt));
                break;
            }
        }
        // Non-degeneracy: a block with nonzero q and k varies over a period.
        double lo = 1e300, hi = -1e300;
        for (std::int64_t dt = 0; dt < 8; ++dt) {
            const double v = temporal_logit_closed_form(q, k, dt, periodic);
            lo = std::min(lo, v);
            hi = std::max(hi, v);
        }
        if (!(hi - lo > 0.0)) fail("logit constant over a period");
    }
    return result;
}

SuiteResult standardization_suite(std::size_t instances, std::uint64_t seed) {
    SuiteResult result{"score standardization", "worst deviation", true,
                       0.0, 1e-3, instances, ""};
    auto rng = make_rng(derive_seed(seed, 0xE3));
    for (std::size_t i = 0; i < instances; ++i) {
        std::uniform_int_distribution<std::size_t> pick_hist(2, 12);
        std::uniform_int_distribution<std::size_t> pick_n(1, 3);
        const std::size_t fh = pick_hist(rng);
        ScoreTensor raw = ScoreTensor::make(ScoreTensor::Kind::attention_raw,
                                            pick_n(rng), pick_n(rng), pick_n(rng),
                                            fh);
        fill_normal(std::span<float>(raw.values), rng, 0.0f, 3.0f);
        const ScoreTensor std_scores = standardize(raw, 1e-6);
        for (std::size_t b = 0; b < raw.batch; ++b) {
            for (std::size_t q = 0; q < raw.query_frames; ++q) {
                for (std::size_t h = 0; h < raw.heads; ++h) {
                    double mean = 0.0, var = 0.0;
                    for (std::size_t k = 0; k < fh; ++k) {
                        mean += std_scores.at(b, q, h, k);
                    }
                    mean /= static_cast<double>(fh);
                    for (std::size_t k = 0; k < fh; ++k) {
                        const double d = std_scores.at(b, q, h, k) - mean;
                        var += d * d;
                    }
                    var /= static_cast<double>(fh);
                    const double err =
                        std::max(std::abs(mean) * 10.0, std::abs(var - 1.0));
                    result.worst = std::max(result.worst, err);
                    if (std::abs(mean) > 1e-4 || std::abs(var - 1.0) > 1e-3) {
                        result.pass = false;
                        result.detail = "slice mean/variance out of tolerance";
                        return result;
                    }
                }
            }
        }
    }
    return result;
}

SuiteResult budget_mapping_suite(std::size_t instances, std::uint64_t seed) {
    SuiteResult result{"budget mapping", "", true, 0.0, 0.0, instances, ""};
    auto rng = make_rng(derive_seed(seed, 0xE4));
    for (std::size_t i = 0; i < instances; ++i) {
        std::uniform_int_distribution<int> pick_min(0, 10);
        std::uniform_int_distribution<int> pick_span(0, 20);
        std::uniform_real_distribution<double> pick_gamma(0.1, 4.0);
        const int b_min = pick_min(rng);
        const int b_max = b_min + pick_span(rng);
        const double gamma = pick_gamma(rng);

        std::uniform_real_distribution<double> pick_score(0.0, 1.0);
        std::vector<double> normalized(8);
        for (double& v : normalized) v = pick_score(rng);
        normalized[0] = 0.0;
        normalized[1] = 1.0;
        std::sort(normalized.begin(), normalized.end());

        const HeadBudgetTable table =
            map_budgets(normalized, 1, normalized.size(), b_min, b_max, gamma);
        if (table.budgets.front() != b_min || table.budgets.back() != b_max) {
            result.pass = false;
            result.detail = "endpoint mapping violated";
            return result;
        }
        for (std::size_t k = 0; k < normalized.size(); ++k) {
            if (table.budgets[k] < b_min || table.budgets[k] > b_max) {
                result.pass = false;
                result.detail = "budget out of range";
                return result;
            }
            if (k > 0 && table.budgets[k] < table.budgets[k - 1]) {
                result.pass = false;
                result.detail = "monotonicity violated";
                return result;
            }
        }
    }
    return result;
}

int run_verify(std::size_t instances, std::uint64_t seed, std::ostream& out) {
    const SuiteResult suites[] = {
        equivalence_suite(instances, seed),
        rope_suite(instances, seed),
        standardization_suite(std::max<std::size_t>(1, instances / 4), seed),
        budget_mapping_suite(std::max<std::size_t>(1, instances / 4), seed),
    };
    int failures = 0;
    for (const SuiteResult& s : suites) {
        out << (s.pass ? "PASS" : "FAIL") << "  " << s.name << ": ";
        if (s.bound > 0.0) {
            out << s.metric << (s.pass ? " <= " : " > ") << s.bound << " (worst "
                << s.worst << " over " << s.cases << " cases)";
        } else {
            out << s.cases << " cases";
        }
        if (!s.detail.empty()) out << " [" << s.detail << "]";
        out << "\n";
        if (!s.pass) ++failures;
    }
    return failures;
}

}  // namespace kvfocus
