#include "kvfocus/synthetic.hpp"

#include <cmath>

#include "kvfocus/rng.hpp"

namespace kvfocus {

std::vector<FrameTensor> make_synthetic_stream(const RunConfig& config,
                                               std::size_t num_chunks) {
    return make_synthetic_stream(config, num_chunks, config.seed);
}

std::vector<FrameTensor> make_synthetic_stream(const RunConfig& config,
                                               std::size_t num_chunks,
                                               std::uint64_t seed) {
    config.validate();
    if (num_chunks < 1) {
        throw ConfigError("make_synthetic_stream: num_chunks must be >= 1");
    }
    const ModelShape& shape = config.shape;
    const std::size_t total = num_chunks * shape.chunk_frames;

    std::vector<FrameTensor> frames;
    frames.reserve(total);
    for (std::size_t f = 0; f < total; ++f) {
        FrameTensor frame(static_cast<std::int64_t>(f), shape.tokens_per_frame,
                          shape.heads_per_layer, shape.head_dim);
        auto rng = make_rng(derive_seed(seed, seed_tag::stream_frame, f));
        fill_normal(std::span<float>(frame.data), rng);
        frames.push_back(std::move(frame));
    }

    switch (config.stream.redundancy) {
        case StreamParams::Redundancy::iid:
            break;
        case StreamParams::Redundancy::duplicate:
            // Frame 1 repeats frame 0 so the history carries one exact copy.
            if (total > 1) {
                frames[1].data = frames[0].data;
            }
            break;
        case StreamParams::Redundancy::static_region: {
            // The first half of every frame's tokens share a fixed pattern.
            const std::size_t static_tokens = shape.tokens_per_frame / 2;
            if (static_tokens > 0) {
                auto rng = make_rng(derive_seed(seed, seed_tag::stream_frame,
                                                0x5747u, 0x1u));
                std::vector<float> pattern(static_tokens * shape.heads_per_layer *
                                           shape.head_dim);
                fill_normal(std::span<float>(pattern), rng);
                for (FrameTensor& frame : frames) {
                    std::copy(pattern.begin(), pattern.end(), frame.data.begin());
                }
            }
            break;
        }
    }
    return frames;
}

SyntheticModel::SyntheticModel(const ModelShape& shape, std::uint64_t seed)
    : shape_(shape) {
    shape_.validate();
    const std::size_t d = shape_.head_dim;
    data_.resize(shape_.num_layers * 3 * shape_.heads_per_layer * d * d);
    // N(0, 1/sqrt(d)) entries keep projected activations near unit scale.
    const float scale = 1.0f / std::sqrt(static_cast<float>(d));
    auto rng = make_rng(derive_seed(seed, seed_tag::model_weights));
    fill_normal(std::span<float>(data_), rng, 0.0f, scale);
}

std::span<const float> SyntheticModel::weights(std::size_t layer, Proj proj,
                                               std::size_t head) const {
    const std::size_t d = shape_.head_dim;
    const std::size_t block = d * d;
    const std::size_t idx =
        (layer * 3 + static_cast<std::size_t>(proj)) * shape_.heads_per_layer +
        head;
    return std::span<const float>(data_).subspan(idx * block, block);
}

std::span<float> SyntheticModel::weights_mut(std::size_t layer, Proj proj,
                                             std::size_t head) {
    const std::size_t d = shape_.head_dim;
    const std::size_t block = d * d;
    const std::size_t idx =
        (layer * 3 + static_cast<std::size_t>(proj)) * shape_.heads_per_layer +
        head;
    return std::span<float>(data_).subspan(idx * block, block);
}

FrameTensor SyntheticModel::project(std::size_t layer, Proj proj,
                                    const FrameTensor& input) const {
    if (layer >= shape_.num_layers) {
        throw IntegrityError("project: layer out of range");
    }
    input.check_shape(shape_);
    const std::size_t d = shape_.head_dim;
    FrameTensor out(input.frame_index, input.tokens, input.heads, d);
    for (std::size_t h = 0; h < input.heads; ++h) {
        const auto w = weights(layer, proj, h);
        for (std::size_t t = 0; t < input.tokens; ++t) {
            const auto x = input.vec(t, h);
            const auto y = out.vec(t, h);
            for (std::size_t r = 0; r < d; ++r) {
                float sum = 0.0f;
                for (std::size_t c = 0; c < d; ++c) {
                    sum += w[r * d + c] * x[c];
                }
                y[r] = sum;
            }
        }
    }
    return out;
}

void SyntheticModel::zero_value_weights(std::size_t layer, std::size_t head) {
    auto w = weights_mut(layer, Proj::value, head);
    std::fill(w.begin(), w.end(), 0.0f);
}

void SyntheticModel::set_value_identity(std::size_t layer, std::size_t head,
                                        float scale) {
    auto w = weights_mut(layer, Proj::value, head);
    std::fill(w.begin(), w.end(), 0.0f);
    const std::size_t d = shape_.head_dim;
    for (std::size_t i = 0; i < d; ++i) {
        w[i * d + i] = scale;
    }
}

SyntheticModel SyntheticModel::single_live_head(const ModelShape& shape,
                                                std::uint64_t seed,
                                                HeadRef live) {
    SyntheticModel model(shape, seed);
    for (std::size_t l = 0; l < shape.num_layers; ++l) {
        for (std::size_t h = 0; h < shape.heads_per_layer; ++h) {
            if (l == live.layer && h == live.head) continue;
            model.zero_value_weights(l, h);
        }
    }
    // Negative feedback: the live head's output pulls the residual toward
    // zero, so masking it leaves a larger-norm trajectory.
    model.set_value_identity(live.layer, live.head, -0.5f);
    return model;
}

}  // namespace kvfocus
