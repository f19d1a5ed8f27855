#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "r2r/tensor.hpp"

namespace r2r {

// One self-attention site in the backbone. feature_size is the spatial side
// length of the feature map at the model's nominal latent size.
struct AttentionLayerInfo {
    std::string layer_id;
    int depth_level = 0;  // 0 = shallowest resolution
    int feature_size = 0;
};

enum class AttentionMode { passthrough, record, inject };

// Decides which (step, layer) coordinates receive injected q/k.
using InjectionSelector = std::function<bool(int step_index, const AttentionLayerInfo&)>;

// Captured self-attention queries/keys from a recording run, keyed by
// (step index, layer id). Append-only while recording; immutable afterwards.
template <typename T>
struct AttentionTraceT {
    struct Entry {
        TensorT<T> q;  // [heads, tokens, dim]
        TensorT<T> k;
    };

    using Key = std::pair<int, std::string>;
    std::map<Key, Entry> entries;

    bool has(int step, const std::string& layer_id) const {
        return entries.count({step, layer_id}) > 0;
    }

    void put(int step, const std::string& layer_id, TensorT<T> q, TensorT<T> k) {
        check_same_shape(q, k, "attention trace entry");
        auto key = Key{step, layer_id};
        if (entries.count(key))
            throw std::runtime_error("attention trace collision at step " + std::to_string(step) +
                                     " layer " + layer_id + " (trace object reused?)");
        entries.emplace(std::move(key), Entry{std::move(q), std::move(k)});
    }

    const Entry& get(int step, const std::string& layer_id) const {
        auto it = entries.find({step, layer_id});
        if (it == entries.end())
            throw std::runtime_error("missing attention trace entry at step " + std::to_string(step) +
                                     " layer " + layer_id);
        return it->second;
    }

    size_t size() const { return entries.size(); }
    bool empty() const { return entries.empty(); }

    uint64_t checksum() const {
        uint64_t h = 0xcbf29ce484222325ULL;
        for (const auto& [key, e] : entries) {
            h = fnv1a64(&key.first, sizeof(key.first), h);
            h = fnv1a64(key.second.data(), key.second.size(), h);
            h ^= content_hash(e.q);
            h = fnv1a64(&h, sizeof(h));
            h ^= content_hash(e.k);
            h = fnv1a64(&h, sizeof(h));
        }
        return h;
    }
};

using AttentionTrace = AttentionTraceT<float>;

}  // namespace r2r
