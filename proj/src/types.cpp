#include "kvfocus/types.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace kvfocus {

void ModelShape::validate() const {
    auto require = [](bool ok, const char* what) {
        if (!ok) throw ConfigError(std::string("model shape: ") + what);
    };
    require(num_layers >= 1, "num_layers must be >= 1");
    require(heads_per_layer >= 1, "heads_per_layer must be >= 1");
    require(head_dim >= 1, "head_dim must be >= 1");
    require(head_dim % 2 == 0, "head_dim must be even");
    require(tokens_per_frame >= 1, "tokens_per_frame must be >= 1");
    require(chunk_frames >= 1, "chunk_frames must be >= 1");
    require(dense_window >= 1, "dense_window must be >= 1");
}

bool FrameTensor::all_finite() const {
    return std::all_of(data.begin(), data.end(),
                       [](float v) { return std::isfinite(v); });
}

void FrameTensor::check_shape(const ModelShape& shape) const {
    if (tokens != shape.tokens_per_frame || heads != shape.heads_per_layer ||
        head_dim != shape.head_dim || data.size() != tokens * heads * head_dim) {
        std::ostringstream os;
        os << "frame " << frame_index << ": shape [" << tokens << " x " << heads
           << " x " << head_dim << "] does not match model ["
           << shape.tokens_per_frame << " x " << shape.heads_per_layer << " x "
           << shape.head_dim << "]";
        throw ShapeError(os.str());
    }
}

KvCache::KvCache(std::size_t num_layers, std::vector<std::int64_t> anchor_frames)
    : layers_(num_layers),
      configured_anchors_(anchor_frames.begin(), anchor_frames.end()) {}

std::size_t KvCache::layer_checked(std::size_t layer) const {
    if (layer >= layers_.size()) {
        throw IntegrityError("cache layer index " + std::to_string(layer) +
                             " out of range (" + std::to_string(layers_.size()) +
                             " layers)");
    }
    return layer;
}

void KvCache::append(std::size_t layer, FrameTensor key, FrameTensor value,
                     bool generated) {
    auto& entries = layers_[layer_checked(layer)];
    if (key.frame_index != value.frame_index) {
        throw IntegrityError("key/value frame index mismatch on append");
    }
    if (!key.same_shape(value)) {
        throw ShapeError("key/value shape mismatch on append");
    }
    if (!entries.empty() && entries.back().key.frame_index >= key.frame_index) {
        throw IntegrityError("cache frame indices must be strictly increasing");
    }
    if (generated) {
        generated_.insert(key.frame_index);
    }
    entries.push_back(Entry{std::move(key), std::move(value)});
}

void KvCache::clear_generated() {
    generated_.clear();
}

void KvCache::evict_history(std::size_t keep_last,
                            const std::set<std::int64_t>& keep) {
    for (auto& entries : layers_) {
        std::vector<std::int64_t> hist;
        for (const auto& e : entries) {
            if (!generated_.count(e.key.frame_index)) {
                hist.push_back(e.key.frame_index);
            }
        }
        if (hist.size() <= keep_last) continue;
        std::set<std::int64_t> survivors(keep.begin(), keep.end());
        survivors.insert(hist.end() - static_cast<std::ptrdiff_t>(keep_last),
                         hist.end());
        std::erase_if(entries, [&](const Entry& e) {
            std::int64_t f = e.key.frame_index;
            return !generated_.count(f) && !survivors.count(f);
        });
    }
}

bool KvCache::has_frame(std::size_t layer, std::int64_t frame) const {
    const auto& entries = layers_[layer_checked(layer)];
    return std::any_of(entries.begin(), entries.end(), [&](const Entry& e) {
        return e.key.frame_index == frame;
    });
}

const KvCache::Entry& KvCache::entry(std::size_t layer,
                                     std::int64_t frame) const {
    const auto& entries = layers_[layer_checked(layer)];
    auto it = std::find_if(entries.begin(), entries.end(), [&](const Entry& e) {
        return e.key.frame_index == frame;
    });
    if (it == entries.end()) {
        throw IntegrityError("frame " + std::to_string(frame) +
                             " not present in cache layer " +
                             std::to_string(layer));
    }
    return *it;
}

std::vector<std::int64_t> KvCache::stored_indices(std::size_t layer) const {
    const auto& entries = layers_[layer_checked(layer)];
    std::vector<std::int64_t> out;
    out.reserve(entries.size());
    for (const auto& e : entries) out.push_back(e.key.frame_index);
    return out;
}

std::vector<std::int64_t> KvCache::historical_indices(std::size_t layer) const {
    std::vector<std::int64_t> out;
    for (std::int64_t f : stored_indices(layer)) {
        if (!generated_.count(f)) out.push_back(f);
    }
    return out;
}

std::size_t KvCache::history_size(std::size_t layer) const {
    return historical_indices(layer).size();
}

std::vector<std::int64_t> KvCache::effective_anchors(std::size_t layer) const {
    std::vector<std::int64_t> out;
    for (std::int64_t f : configured_anchors_) {
        if (has_frame(layer, f)) out.push_back(f);
    }
    return out;
}

}  // namespace kvfocus
