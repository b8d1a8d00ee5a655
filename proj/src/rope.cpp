#include "kvfocus/rope.hpp"

#include <algorithm>
#include <cmath>
#include <ostream>

#include "kvfocus/rng.hpp"

namespace kvfocus {

namespace {

void check_length(std::size_t got, std::size_t want) {
    if (got != want) {
        throw ShapeError("vector length " + std::to_string(got) +
                         " does not match head_dim " + std::to_string(want));
    }
}

}  // namespace

RopeSpec RopeSpec::standard(std::size_t head_dim,
                            std::vector<std::size_t> temporal_blocks,
                            double base) {
    RopeSpec spec;
    spec.head_dim = head_dim;
    std::sort(temporal_blocks.begin(), temporal_blocks.end());
    spec.temporal_blocks = std::move(temporal_blocks);
    const double dim_t = 2.0 * static_cast<double>(spec.temporal_blocks.size());
    spec.frequencies.resize(spec.temporal_blocks.size());
    for (std::size_t i = 0; i < spec.temporal_blocks.size(); ++i) {
        spec.frequencies[i] = std::pow(base, -2.0 * static_cast<double>(i) / dim_t);
    }
    spec.validate();
    return spec;
}

RopeSpec RopeSpec::default_for(std::size_t head_dim) {
    const std::size_t blocks = head_dim / 2;
    const std::size_t temporal = std::max<std::size_t>(1, (blocks + 1) / 2);
    std::vector<std::size_t> idx(temporal);
    for (std::size_t i = 0; i < temporal; ++i) idx[i] = i;
    return standard(head_dim, std::move(idx));
}

void RopeSpec::validate() const {
    if (head_dim == 0 || head_dim % 2 != 0) {
        throw ConfigError("rope: head_dim must be a positive even number");
    }
    if (temporal_blocks.size() != frequencies.size()) {
        throw ConfigError("rope: one frequency per temporal block required");
    }
    const std::size_t blocks = head_dim / 2;
    std::size_t prev = blocks;  // sentinel
    for (std::size_t j : temporal_blocks) {
        if (j >= blocks) {
            throw ConfigError("rope: temporal block index out of range");
        }
        if (prev != blocks && j <= prev) {
            throw ConfigError("rope: temporal blocks must be sorted and unique");
        }
        prev = j;
    }
    for (double w : frequencies) {
        if (!std::isfinite(w)) throw ConfigError("rope: frequency not finite");
    }
}

std::vector<double> apply_rope(std::span<const double> v, std::int64_t frame,
                               const RopeSpec& spec) {
    check_length(v.size(), spec.head_dim);
    std::vector<double> out(v.begin(), v.end());
    for (std::size_t i = 0; i < spec.temporal_blocks.size(); ++i) {
        const std::size_t j = spec.temporal_blocks[i];
        const double theta = spec.frequencies[i] * static_cast<double>(frame);
        const double c = std::cos(theta);
        const double s = std::sin(theta);
        const double x = v[2 * j];
        const double y = v[2 * j + 1];
        out[2 * j] = c * x - s * y;
        out[2 * j + 1] = s * x + c * y;
    }
    return out;
}

void apply_rope_inplace(std::span<float> v, std::int64_t frame,
                        const RopeSpec& spec) {
    check_length(v.size(), spec.head_dim);
    for (std::size_t i = 0; i < spec.temporal_blocks.size(); ++i) {
        const std::size_t j = spec.temporal_blocks[i];
        const double theta = spec.frequencies[i] * static_cast<double>(frame);
        const float c = static_cast<float>(std::cos(theta));
        const float s = static_cast<float>(std::sin(theta));
        const float x = v[2 * j];
        const float y = v[2 * j + 1];
        v[2 * j] = c * x - s * y;
        v[2 * j + 1] = s * x + c * y;
    }
}

void apply_rope_frame(FrameTensor& frame, const RopeSpec& spec) {
    for (std::size_t t = 0; t < frame.tokens; ++t) {
        for (std::size_t h = 0; h < frame.heads; ++h) {
            apply_rope_inplace(frame.vec(t, h), frame.frame_index, spec);
        }
    }
}

TemporalCoefficients temporal_coefficients(std::span<const double> q,
                                           std::span<const double> k,
                                           std::size_t block,
                                           const RopeSpec& spec) {
    check_length(q.size(), spec.head_dim);
    check_length(k.size(), spec.head_dim);
    const double q0 = q[2 * block], q1 = q[2 * block + 1];
    const double k0 = k[2 * block], k1 = k[2 * block + 1];
    return TemporalCoefficients{q0 * k0 + q1 * k1, q1 * k0 - q0 * k1};
}

double temporal_logit_closed_form(std::span<const double> q,
                                  std::span<const double> k,
                                  std::int64_t delta_t, const RopeSpec& spec) {
    check_length(q.size(), spec.head_dim);
    check_length(k.size(), spec.head_dim);
    double sum = 0.0;
    for (std::size_t i = 0; i < spec.temporal_blocks.size(); ++i) {
        const std::size_t j = spec.temporal_blocks[i];
        const auto [a, b] = temporal_coefficients(q, k, j, spec);
        const double phase = spec.frequencies[i] * static_cast<double>(delta_t);
        sum += a * std::cos(phase) + b * std::sin(phase);
    }
    return sum / std::sqrt(static_cast<double>(spec.head_dim));
}

double temporal_logit_numeric(std::span<const double> q,
                              std::span<const double> k, std::int64_t t_q,
                              std::int64_t t_k, const RopeSpec& spec) {
    const std::vector<double> qr = apply_rope(q, t_q, spec);
    const std::vector<double> kr = apply_rope(k, t_k, spec);
    double sum = 0.0;
    for (std::size_t j : spec.temporal_blocks) {
        sum += qr[2 * j] * kr[2 * j] + qr[2 * j + 1] * kr[2 * j + 1];
    }
    return sum / std::sqrt(static_cast<double>(spec.head_dim));
}

void rope_probe_csv(const RopeSpec& spec, std::uint64_t seed,
                    std::int64_t max_dt, std::ostream& out) {
    spec.validate();
    auto rng = make_rng(derive_seed(seed, seed_tag::probe));
    std::vector<double> q(spec.head_dim), k(spec.head_dim);
    fill_normal(std::span<double>(q), rng);
    fill_normal(std::span<double>(k), rng);
    out << "delta_t,logit\n";
    for (std::int64_t dt = 0; dt <= max_dt; ++dt) {
        out << dt << "," << temporal_logit_closed_form(q, k, dt, spec) << "\n";
    }
}

}  // namespace kvfocus
