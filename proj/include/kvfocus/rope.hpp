#pragma once

#include <cstdint>
#include <iosfwd>
#include <span>
#include <vector>

#include "kvfocus/types.hpp"

namespace kvfocus {

// Temporal rotary embedding over a head vector of even dimension d = 2m.
// Blocks are the m consecutive (even, odd) coordinate pairs; only the blocks
// listed in temporal_blocks rotate with the frame index, the rest are left
// untouched (they stand in for spatial axes, which are out of scope here).
struct RopeSpec {
    std::size_t head_dim = 2;
    std::vector<std::size_t> temporal_blocks;  // 0-based, sorted, < head_dim/2
    std::vector<double> frequencies;           // radians per frame, per block

    // Frequency schedule base^(-2i/d_T) over the chosen blocks, where d_T is
    // twice the number of temporal blocks and i is the block's position in
    // the sorted set.
    static RopeSpec standard(std::size_t head_dim,
                             std::vector<std::size_t> temporal_blocks,
                             double base = 10000.0);

    // First half of the blocks (at least one) are temporal.
    static RopeSpec default_for(std::size_t head_dim);

    void validate() const;
};

// Rotates each temporal block of `v` by its frequency times the frame index.
// Norm-preserving. Throws ShapeError on length mismatch.
std::vector<double> apply_rope(std::span<const double> v, std::int64_t frame,
                               const RopeSpec& spec);

// In-place single-precision variant for tensor data paths.
void apply_rope_inplace(std::span<float> v, std::int64_t frame,
                        const RopeSpec& spec);

// Rotates every (token, head) vector of the frame at its own frame_index.
void apply_rope_frame(FrameTensor& frame, const RopeSpec& spec);

// Temporal contribution to the attention logit as an explicit function of
// the relative frame distance delta_t = t_k - t_q:
//   (1/sqrt(d)) * sum_j [ A_j cos(w_j dt) + B_j sin(w_j dt) ]
// with A_j = q0*k0 + q1*k1 and B_j = q1*k0 - q0*k1 per temporal block.
double temporal_logit_closed_form(std::span<const double> q,
                                  std::span<const double> k,
                                  std::int64_t delta_t, const RopeSpec& spec);

// Same quantity computed the way attention does: rotate q at t_q and k at
// t_k, then take the scaled inner product over the temporal blocks. Agrees
// with the closed form to 1e-6 absolute in double precision.
double temporal_logit_numeric(std::span<const double> q,
                              std::span<const double> k, std::int64_t t_q,
                              std::int64_t t_k, const RopeSpec& spec);

// Per-block coefficients of the closed form; A*A + B*B equals the product of
// the block norms squared.
struct TemporalCoefficients {
    double a = 0.0;
    double b = 0.0;
};
TemporalCoefficients temporal_coefficients(std::span<const double> q,
                                           std::span<const double> k,
                                           std::size_t block,
                                           const RopeSpec& spec);

// Emits "delta_t,logit" CSV rows for seeded random q, k over
// delta_t = 0..max_dt. Lets multi-frequency cancellation be inspected.
void rope_probe_csv(const RopeSpec& spec, std::uint64_t seed,
                    std::int64_t max_dt, std::ostream& out);

}  // namespace kvfocus
