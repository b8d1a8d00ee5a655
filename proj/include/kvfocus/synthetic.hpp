#pragma once

#include <cstdint>
#include <vector>

#include "kvfocus/config.hpp"
#include "kvfocus/types.hpp"

namespace kvfocus {

// Deterministic stand-in latents: seeded standard normal per element, with
// optional structured redundancy so diversity scoring has signal. Frame
// contents depend only on (seed, frame index, redundancy mode), so a longer
// run extends a shorter one. An explicit seed overrides config.seed.
std::vector<FrameTensor> make_synthetic_stream(const RunConfig& config,
                                               std::size_t num_chunks);
std::vector<FrameTensor> make_synthetic_stream(const RunConfig& config,
                                               std::size_t num_chunks,
                                               std::uint64_t seed);

// Fixed seeded per-(layer, head) linear maps producing Q/K/V from the layer
// input. There is no MLP; the rollout is attention plus residual only.
class SyntheticModel {
public:
    enum class Proj { query, key, value };

    SyntheticModel(const ModelShape& shape, std::uint64_t seed);

    const ModelShape& shape() const { return shape_; }

    // Applies the head-wise map to every (token, head) slice of the frame.
    FrameTensor project(std::size_t layer, Proj proj,
                        const FrameTensor& input) const;

    // Turns a head dead: zero value map, so its attention output vanishes.
    void zero_value_weights(std::size_t layer, std::size_t head);

    // Replaces a head's value map with -scale * identity.
    void set_value_identity(std::size_t layer, std::size_t head, float scale);

    // All heads dead except `live`, whose value map is -0.5 * identity.
    static SyntheticModel single_live_head(const ModelShape& shape,
                                           std::uint64_t seed, HeadRef live);

private:
    std::span<const float> weights(std::size_t layer, Proj proj,
                                   std::size_t head) const;
    std::span<float> weights_mut(std::size_t layer, Proj proj, std::size_t head);

    ModelShape shape_;
    std::vector<float> data_;  // [layer][proj][head][dim x dim]
};

}  // namespace kvfocus
