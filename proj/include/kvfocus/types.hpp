#pragma once

#include <cstddef>
#include <cstdint>
#include <set>
#include <span>
#include <vector>

#include "kvfocus/errors.hpp"

namespace kvfocus {

// Static dimensions of the attention stack the cache serves.
struct ModelShape {
    std::size_t num_layers = 1;
    std::size_t heads_per_layer = 1;
    std::size_t head_dim = 2;         // must be even (2-D rotary blocks)
    std::size_t tokens_per_frame = 1;
    std::size_t chunk_frames = 1;     // query frames generated per chunk
    std::size_t dense_window = 1;     // historical frames a dense baseline attends to

    void validate() const;
};

struct HeadRef {
    std::size_t layer = 0;
    std::size_t head = 0;

    bool operator==(const HeadRef&) const = default;
};

// One frame's activations: [tokens_per_frame x heads x head_dim], row-major.
struct FrameTensor {
    std::int64_t frame_index = 0;
    std::size_t tokens = 0;
    std::size_t heads = 0;
    std::size_t head_dim = 0;
    std::vector<float> data;

    FrameTensor() = default;
    FrameTensor(std::int64_t frame, std::size_t tokens, std::size_t heads,
                std::size_t head_dim)
        : frame_index(frame),
          tokens(tokens),
          heads(heads),
          head_dim(head_dim),
          data(tokens * heads * head_dim, 0.0f) {}

    float& at(std::size_t token, std::size_t head, std::size_t dim) {
        return data[(token * heads + head) * head_dim + dim];
    }
    float at(std::size_t token, std::size_t head, std::size_t dim) const {
        return data[(token * heads + head) * head_dim + dim];
    }

    // The head_dim-long slice for one (token, head).
    std::span<float> vec(std::size_t token, std::size_t head) {
        return std::span<float>(data).subspan((token * heads + head) * head_dim,
                                              head_dim);
    }
    std::span<const float> vec(std::size_t token, std::size_t head) const {
        return std::span<const float>(data).subspan(
            (token * heads + head) * head_dim, head_dim);
    }

    bool same_shape(const FrameTensor& other) const {
        return tokens == other.tokens && heads == other.heads &&
               head_dim == other.head_dim;
    }

    bool all_finite() const;

    void check_shape(const ModelShape& shape) const;
};

// Per-layer ordered key/value history plus anchor bookkeeping.
//
// Frames belonging to the chunk currently being generated are appended with
// the `generated` flag; they take part in attention (the chunk attends to
// itself) but are not scoring candidates until clear_generated() promotes
// them to plain history. Single writer, concurrent readers only between
// mutations.
class KvCache {
public:
    struct Entry {
        FrameTensor key;
        FrameTensor value;
    };

    KvCache() = default;
    KvCache(std::size_t num_layers, std::vector<std::int64_t> anchor_frames);

    std::size_t num_layers() const { return layers_.size(); }

    // Frame indices must be appended in strictly increasing order per layer.
    void append(std::size_t layer, FrameTensor key, FrameTensor value,
                bool generated);

    // Promotes the current chunk's frames to history.
    void clear_generated();

    // Drops historical frames except the most recent `keep_last` and any in
    // `keep`. Rolling-window policies use this; the focused policy never
    // evicts.
    void evict_history(std::size_t keep_last, const std::set<std::int64_t>& keep);

    bool has_frame(std::size_t layer, std::int64_t frame) const;
    const Entry& entry(std::size_t layer, std::int64_t frame) const;

    std::vector<std::int64_t> stored_indices(std::size_t layer) const;
    // Stored frames minus the generated set, ascending. These are the F_h
    // scoring candidates.
    std::vector<std::int64_t> historical_indices(std::size_t layer) const;
    std::size_t history_size(std::size_t layer) const;

    const std::set<std::int64_t>& generated() const { return generated_; }
    const std::set<std::int64_t>& configured_anchors() const {
        return configured_anchors_;
    }
    // Configured anchors that are actually stored in the given layer.
    std::vector<std::int64_t> effective_anchors(std::size_t layer) const;

private:
    std::size_t layer_checked(std::size_t layer) const;

    std::vector<std::vector<Entry>> layers_;
    std::set<std::int64_t> configured_anchors_;
    std::set<std::int64_t> generated_;
};

// A contiguous trajectory slice flattened for score-model consumption:
// [frame_count x latent_dim] in double precision.
struct LatentWindow {
    std::int64_t prompt_id = 0;
    std::size_t window_index = 0;
    std::size_t frame_count = 0;
    std::size_t latent_dim = 0;
    std::vector<double> values;

    LatentWindow() = default;
    LatentWindow(std::int64_t prompt, std::size_t index, std::size_t frames,
                 std::size_t dim)
        : prompt_id(prompt),
          window_index(index),
          frame_count(frames),
          latent_dim(dim),
          values(frames * dim, 0.0) {}

    double& at(std::size_t frame, std::size_t i) {
        return values[frame * latent_dim + i];
    }
    double at(std::size_t frame, std::size_t i) const {
        return values[frame * latent_dim + i];
    }

    bool same_shape(const LatentWindow& other) const {
        return frame_count == other.frame_count && latent_dim == other.latent_dim;
    }
};

}  // namespace kvfocus
