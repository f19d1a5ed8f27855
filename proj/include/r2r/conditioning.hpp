#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

#include "r2r/rng.hpp"
#include "r2r/tensor.hpp"

namespace r2r {

enum class EmbeddingKind { null, negative_domain, caption };

inline const char* to_string(EmbeddingKind k) {
    switch (k) {
        case EmbeddingKind::null: return "null";
        case EmbeddingKind::negative_domain: return "negative_domain";
        case EmbeddingKind::caption: return "caption";
    }
    return "?";
}

inline EmbeddingKind embedding_kind_from_string(const std::string& s) {
    if (s == "null") return EmbeddingKind::null;
    if (s == "negative_domain") return EmbeddingKind::negative_domain;
    if (s == "caption") return EmbeddingKind::caption;
    throw std::invalid_argument("unknown embedding kind: " + s);
}

// A token-embedding matrix used as model conditioning.
template <typename T>
struct ConditioningEmbeddingT {
    TensorT<T> tokens;  // [L, d]
    EmbeddingKind kind = EmbeddingKind::caption;

    int64_t token_count() const { return tokens.dim(0); }
    int64_t dim() const { return tokens.dim(1); }

    void validate() const {
        if (tokens.ndim() != 2 || tokens.dim(0) < 1)
            throw std::invalid_argument("conditioning embedding must be [L>=1, d]");
        if (!tokens.all_finite())
            throw std::invalid_argument("conditioning embedding has non-finite entries");
    }
};

using ConditioningEmbedding = ConditioningEmbeddingT<float>;

struct EmbeddingTrainingMeta {
    std::string source_dataset;
    std::string base_model_fingerprint;  // content hash of the backbone it was trained on
    int64_t optimizer_steps = 0;
};

// The learnable rendered-domain embedding: exactly 75 token rows.
template <typename T>
struct NegativeDomainEmbeddingT {
    static constexpr int64_t kTokenRows = 75;

    TensorT<T> tokens;  // [75, d]
    EmbeddingTrainingMeta training_meta;

    void validate() const {
        if (tokens.ndim() != 2 || tokens.dim(0) != kTokenRows)
            throw std::invalid_argument("negative domain embedding must have exactly 75 rows, got " +
                                        (tokens.ndim() == 2 ? std::to_string(tokens.dim(0)) : tokens.shape_str()));
        if (!tokens.all_finite())
            throw std::invalid_argument("negative domain embedding has non-finite entries");
    }

    ConditioningEmbeddingT<T> as_conditioning() const {
        return {tokens, EmbeddingKind::negative_domain};
    }
};

using NegativeDomainEmbedding = NegativeDomainEmbeddingT<float>;

// Deterministic stand-in for caption embeddings: rows are seeded from a hash
// of (caption text, row index). Decouples the artifact from any text encoder.
template <typename T>
TensorT<T> caption_pseudo_embedding(const std::string& caption, int64_t token_rows, int64_t dim) {
    if (token_rows < 1 || dim < 1)
        throw std::invalid_argument("caption_pseudo_embedding: bad shape");
    TensorT<T> out({token_rows, dim});
    uint64_t base = fnv1a64(caption.data(), caption.size());
    for (int64_t r = 0; r < token_rows; ++r) {
        Rng rng(mix_seed(base, static_cast<uint64_t>(r)));
        for (int64_t c = 0; c < dim; ++c)
            out.at2(r, c) = static_cast<T>(rng.normal());
    }
    return out;
}

}  // namespace r2r
