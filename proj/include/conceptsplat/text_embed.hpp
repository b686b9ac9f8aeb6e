#pragma once

// Deterministic hash-based text embedder. Each token string maps to a fixed
// pseudo-random vector; prompts become L×d_text matrices. Stands in for a
// real text encoder so downstream math stays exactly reproducible.

#include <cctype>
#include <string>
#include <string_view>
#include <vector>

#include "conceptsplat/common.hpp"

namespace csplat {

using PromptEmbedding = MatX; // L x d_text, one row per token

inline constexpr const char* kBosToken = "<bos>";
inline constexpr const char* kEosToken = "<eos>";

class TextEmbedder {
public:
    explicit TextEmbedder(int d_text = 32, int max_tokens = 16)
        : d_text_(d_text), max_tokens_(max_tokens)
    {
        if (d_text_ < 1 || max_tokens_ < 2)
            throw ValidationError("text embedder: need d_text >= 1 and L >= 2");
    }

    int d_text() const { return d_text_; }
    int max_tokens() const { return max_tokens_; }

    // [<bos>] + whitespace-split words + [<eos>], padded with <eos> to length
    // L. Words past L-2 are dropped so one <eos> always survives.
    std::vector<std::string> tokenize(std::string_view text) const
    {
        std::vector<std::string> toks;
        toks.emplace_back(kBosToken);
        size_t i = 0;
        while (i < text.size() && static_cast<int>(toks.size()) < max_tokens_ - 1) {
            while (i < text.size() && std::isspace(static_cast<unsigned char>(text[i]))) ++i;
            size_t j = i;
            while (j < text.size() && !std::isspace(static_cast<unsigned char>(text[j]))) ++j;
            if (j > i) toks.emplace_back(text.substr(i, j - i));
            i = j;
        }
        while (static_cast<int>(toks.size()) < max_tokens_) toks.emplace_back(kEosToken);
        return toks;
    }

    VecX token_vector(std::string_view token) const
    {
        Rng rng = Rng::stream(fnv1a64(token), 0x7e87a2c1d5b3f641ull);
        VecX v(d_text_);
        for (int i = 0; i < d_text_; ++i) v[i] = rng.uniform(-1.0, 1.0);
        return v;
    }

    PromptEmbedding embed(std::string_view text) const
    {
        const auto toks = tokenize(text);
        PromptEmbedding e(max_tokens_, d_text_);
        for (int r = 0; r < max_tokens_; ++r) e.row(r) = token_vector(toks[r]).transpose();
        return e;
    }

private:
    int d_text_;
    int max_tokens_;
};

// Embedding of the empty token sequence [<bos>, <eos> x (L-1)], used as the
// unconditional prompt.
inline PromptEmbedding null_prompt_embedding(const TextEmbedder& embedder)
{
    PromptEmbedding e(embedder.max_tokens(), embedder.d_text());
    const VecX bos = embedder.token_vector(kBosToken);
    const VecX eos = embedder.token_vector(kEosToken);
    e.row(0) = bos.transpose();
    for (int r = 1; r < embedder.max_tokens(); ++r) e.row(r) = eos.transpose();
    return e;
}

} // namespace csplat
