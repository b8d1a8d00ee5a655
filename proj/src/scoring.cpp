#include "kvfocus/scoring.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace kvfocus {

GroupPooled group_pool(const FrameTensor& frame, std::size_t groups) {
    if (groups == 0 || groups > frame.tokens) {
        throw ConfigError("group_pool: groups must be in [1, tokens_per_frame], got " +
                          std::to_string(groups) + " for " +
                          std::to_string(frame.tokens) + " tokens");
    }
    GroupPooled pooled(groups, frame.heads, frame.head_dim);
    for (std::size_t g = 0; g < groups; ++g) {
        const std::size_t begin = g * frame.tokens / groups;
        const std::size_t end = (g + 1) * frame.tokens / groups;
        const float inv = 1.0f / static_cast<float>(end - begin);
        for (std::size_t h = 0; h < frame.heads; ++h) {
            for (std::size_t d = 0; d < frame.head_dim; ++d) {
                float sum = 0.0f;
                for (std::size_t t = begin; t < end; ++t) {
                    sum += frame.at(t, h, d);
                }
                pooled.at(g, h, d) = sum * inv;
            }
        }
    }
    return pooled;
}

ScoreTensor attention_score(const std::vector<GroupPooled>& query_frames,
                            const std::vector<GroupPooled>& key_frames,
                            std::size_t head_dim) {
    const std::size_t qf = query_frames.size();
    const std::size_t fh = key_frames.size();
    std::size_t groups = 0, heads = 0;
    for (const auto* side : {&query_frames, &key_frames}) {
        for (const GroupPooled& p : *side) {
            if (groups == 0) {
                groups = p.groups;
                heads = p.heads;
            }
            if (p.groups != groups || p.heads != heads || p.head_dim != head_dim) {
                throw ShapeError("attention_score: pooled frames must share "
                                 "groups, heads and head_dim");
            }
        }
    }
    ScoreTensor out = ScoreTensor::make(ScoreTensor::Kind::attention_raw, 1, qf,
                                        heads, fh);
    if (qf == 0 || fh == 0) return out;
    const float scale = 1.0f / std::sqrt(static_cast<float>(head_dim));
    // The mean over group pairs of <Qbar_u, Kbar_v> equals the inner product
    // of the group means, so pooling once per frame replaces the P^2 loop.
    const float inv_groups = 1.0f / static_cast<float>(groups);
    std::vector<float> q_mean(heads * head_dim);
    std::vector<float> k_mean(heads * head_dim);
    for (std::size_t q = 0; q < qf; ++q) {
        std::fill(q_mean.begin(), q_mean.end(), 0.0f);
        for (std::size_t h = 0; h < heads; ++h) {
            for (std::size_t d = 0; d < head_dim; ++d) {
                float sum = 0.0f;
                for (std::size_t g = 0; g < groups; ++g) {
                    sum += query_frames[q].at(g, h, d);
                }
                q_mean[h * head_dim + d] = sum * inv_groups;
            }
        }
        for (std::size_t k = 0; k < fh; ++k) {
            for (std::size_t h = 0; h < heads; ++h) {
                for (std::size_t d = 0; d < head_dim; ++d) {
                    float sum = 0.0f;
                    for (std::size_t g = 0; g < groups; ++g) {
                        sum += key_frames[k].at(g, h, d);
                    }
                    k_mean[h * head_dim + d] = sum * inv_groups;
                }
                float dot = 0.0f;
                for (std::size_t d = 0; d < head_dim; ++d) {
                    dot += q_mean[h * head_dim + d] * k_mean[h * head_dim + d];
                }
                out.at(0, q, h, k) = dot * scale;
            }
        }
    }
    return out;
}

ScoreTensor standardize(const ScoreTensor& scores, double epsilon) {
    ScoreTensor out = scores;
    if (scores.kind == ScoreTensor::Kind::attention_raw) {
        out.kind = ScoreTensor::Kind::attention_std;
    }
    if (scores.history == 0) return out;
    const double inv_n = 1.0 / static_cast<double>(scores.history);
    for (std::size_t b = 0; b < scores.batch; ++b) {
        for (std::size_t q = 0; q < scores.query_frames; ++q) {
            for (std::size_t h = 0; h < scores.heads; ++h) {
                double mean = 0.0;
                for (std::size_t k = 0; k < scores.history; ++k) {
                    mean += scores.at(b, q, h, k);
                }
                mean *= inv_n;
                double var = 0.0;
                for (std::size_t k = 0; k < scores.history; ++k) {
                    const double d = scores.at(b, q, h, k) - mean;
                    var += d * d;
                }
                const double sigma = std::sqrt(var * inv_n);
                const double inv_sigma = 1.0 / (sigma + epsilon);
                for (std::size_t k = 0; k < scores.history; ++k) {
                    out.at(b, q, h, k) = static_cast<float>(
                        (scores.at(b, q, h, k) - mean) * inv_sigma);
                }
            }
        }
    }
    return out;
}

std::vector<float> redundancy_scores(const std::vector<FrameTensor>& keys,
                                     double epsilon) {
    const std::size_t fh = keys.size();
    if (fh == 0) return {};
    const std::size_t tokens = keys[0].tokens;
    const std::size_t heads = keys[0].heads;
    const std::size_t dim = keys[0].head_dim;
    for (const FrameTensor& f : keys) {
        if (!f.same_shape(keys[0])) {
            throw ShapeError("redundancy_scores: key frames must share a shape");
        }
    }
    // Mean key per (token, head) over historical frames.
    std::vector<double> mean(tokens * heads * dim, 0.0);
    const double inv_fh = 1.0 / static_cast<double>(fh);
    for (const FrameTensor& f : keys) {
        for (std::size_t i = 0; i < mean.size(); ++i) {
            mean[i] += static_cast<double>(f.data[i]);
        }
    }
    for (double& m : mean) m *= inv_fh;

    std::vector<float> out(heads * fh, 0.0f);
    const double inv_tokens = 1.0 / static_cast<double>(tokens);
    for (std::size_t k = 0; k < fh; ++k) {
        for (std::size_t h = 0; h < heads; ++h) {
            double acc = 0.0;
            for (std::size_t t = 0; t < tokens; ++t) {
                const std::size_t base = (t * heads + h) * dim;
                double dot = 0.0, nk = 0.0, nm = 0.0;
                for (std::size_t d = 0; d < dim; ++d) {
                    const double kv = keys[k].data[base + d];
                    const double mv = mean[base + d];
                    dot += kv * mv;
                    nk += kv * kv;
                    nm += mv * mv;
                }
                acc += dot / ((std::sqrt(nk) + epsilon) * (std::sqrt(nm) + epsilon));
            }
            out[h * fh + k] = static_cast<float>(acc * inv_tokens);
        }
    }
    return out;
}

ScoreTensor diversity_score(const std::vector<FrameTensor>& keys,
                            double epsilon) {
    const std::size_t fh = keys.size();
    const std::size_t heads = fh == 0 ? 0 : keys[0].heads;
    ScoreTensor raw = ScoreTensor::make(ScoreTensor::Kind::diversity_std, 1, 1,
                                        heads, fh);
    if (fh == 0) return raw;
    const std::vector<float> redundancy = redundancy_scores(keys, epsilon);
    for (std::size_t h = 0; h < heads; ++h) {
        for (std::size_t k = 0; k < fh; ++k) {
            raw.at(0, 0, h, k) = -redundancy[h * fh + k];
        }
    }
    return standardize(raw, epsilon);
}

ScoreTensor broadcast_query_frames(const ScoreTensor& scores,
                                   std::size_t query_frames) {
    if (scores.query_frames == query_frames) return scores;
    if (scores.query_frames != 1) {
        throw ShapeError("broadcast_query_frames: source must have one query frame");
    }
    ScoreTensor out = ScoreTensor::make(scores.kind, scores.batch, query_frames,
                                        scores.heads, scores.history);
    for (std::size_t b = 0; b < scores.batch; ++b) {
        for (std::size_t q = 0; q < query_frames; ++q) {
            for (std::size_t h = 0; h < scores.heads; ++h) {
                for (std::size_t k = 0; k < scores.history; ++k) {
                    out.at(b, q, h, k) = scores.at(b, 0, h, k);
                }
            }
        }
    }
    return out;
}

ScoreTensor fuse_scores(const ScoreTensor& attention_std,
                        const ScoreTensor& diversity_std, double lambda) {
    if (!attention_std.same_shape(diversity_std)) {
        throw ShapeError("fuse_scores: score shapes must match");
    }
    if (lambda < 0.0 || lambda > 1.0) {
        throw ConfigError("fuse_scores: lambda must be in [0, 1]");
    }
    ScoreTensor out = attention_std;
    out.kind = ScoreTensor::Kind::fused;
    const float w = static_cast<float>(lambda);
    const float wd = static_cast<float>(1.0 - lambda);
    for (std::size_t i = 0; i < out.values.size(); ++i) {
        out.values[i] = w * attention_std.values[i] + wd * diversity_std.values[i];
    }
    return out;
}

nlohmann::json SelectionMask::to_json() const {
    nlohmann::json j;
    j["layer"] = layer;
    j["generated"] = generated;
    nlohmann::json ents = nlohmann::json::array();
    for (std::size_t b = 0; b < batch; ++b) {
        for (std::size_t q = 0; q < query_frames; ++q) {
            for (std::size_t h = 0; h < heads; ++h) {
                const SelectionEntry& e = at(b, q, h);
                nlohmann::json je;
                je["layer"] = layer;
                je["head"] = h;
                je["query_frame"] = q;
                je["retained"] = e.retained;
                je["reserved"] = e.reserved;
                ents.push_back(std::move(je));
            }
        }
    }
    j["entries"] = std::move(ents);
    return j;
}

SelectionMask select_history(const ScoreTensor& fused,
                             const HeadBudgetTable& budgets,
                             const KvCache& cache, std::size_t layer) {
    if (layer >= budgets.layers) {
        throw ConfigError("select_history: budget table has no layer " +
                          std::to_string(layer));
    }
    if (fused.heads != budgets.heads) {
        throw ShapeError("select_history: head count mismatch with budget table");
    }
    const std::vector<std::int64_t> candidates = cache.historical_indices(layer);
    if (fused.history != candidates.size()) {
        throw ShapeError("select_history: score history axis (" +
                         std::to_string(fused.history) +
                         ") does not match cached history (" +
                         std::to_string(candidates.size()) + ")");
    }

    // Reserved frames sit outside the budget: anchors plus the chunk itself.
    std::vector<std::int64_t> reserved = cache.effective_anchors(layer);
    for (std::int64_t f : cache.generated()) reserved.push_back(f);
    std::sort(reserved.begin(), reserved.end());
    reserved.erase(std::unique(reserved.begin(), reserved.end()), reserved.end());
    const std::set<std::int64_t> reserved_set(reserved.begin(), reserved.end());

    SelectionMask mask;
    mask.layer = layer;
    mask.batch = fused.batch;
    mask.query_frames = fused.query_frames;
    mask.heads = fused.heads;
    mask.generated.assign(cache.generated().begin(), cache.generated().end());
    mask.entries.resize(fused.batch * fused.query_frames * fused.heads);

    std::vector<std::size_t> order(candidates.size());
    for (std::size_t b = 0; b < fused.batch; ++b) {
        for (std::size_t q = 0; q < fused.query_frames; ++q) {
            for (std::size_t h = 0; h < fused.heads; ++h) {
                const std::size_t budget =
                    static_cast<std::size_t>(std::max(0, budgets.at(layer, h)));
                order.clear();
                for (std::size_t k = 0; k < candidates.size(); ++k) {
                    if (!reserved_set.count(candidates[k])) order.push_back(k);
                }
                if (order.size() > budget) {
                    // Descending score; ties prefer the more recent frame.
                    std::sort(order.begin(), order.end(),
                              [&](std::size_t a, std::size_t b2) {
                                  const float sa = fused.at(b, q, h, a);
                                  const float sb = fused.at(b, q, h, b2);
                                  if (sa != sb) return sa > sb;
                                  return candidates[a] > candidates[b2];
                              });
                    order.resize(budget);
                }
                SelectionEntry& entry = mask.at(b, q, h);
                entry.reserved = reserved;
                entry.retained = reserved;
                for (std::size_t k : order) entry.retained.push_back(candidates[k]);
                std::sort(entry.retained.begin(), entry.retained.end());
            }
        }
    }
    return mask;
}

}  // namespace kvfocus
