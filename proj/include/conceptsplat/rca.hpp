#pragma once

// Regional concept attention: one cross-attention layer whose queries are
// region-masked image features and whose keys/values come from per-concept
// prompt embeddings, optionally shifted by low-rank concept adapters. The
// per-concept attention maps are aggregated row-by-row under the binary
// region masks; the background region attends to the background prompt with
// no adapter. Rows are gated, not blended, so a row inside region i is
// computed from concept i's branch alone.

#include <cmath>
#include <cstdint>
#include <cstring>
#include <string>
#include <utility>
#include <vector>

#include "conceptsplat/common.hpp"
#include "conceptsplat/image.hpp"
#include "conceptsplat/text_embed.hpp"

namespace csplat {

// (h_a*w_a) x d feature rows in row-major spatial order.
struct FeatureMap {
    MatX f;
    int ha = 0;
    int wa = 0;
};

// Low-rank adapter pair for one concept: psi = a * b with a: d_text x r and
// b: r x d. Fresh adapters have b = 0 and act as no-ops.
struct ConceptLoRA {
    MatX a_k, b_k;
    MatX a_v, b_v;

    MatX psi_k() const { return a_k * b_k; }
    MatX psi_v() const { return a_v * b_v; }
    int rank() const { return static_cast<int>(a_k.cols()); }
};

inline ConceptLoRA init_concept_lora(int d_text, int d, int r, std::uint64_t seed)
{
    if (d_text <= 0 || d <= 0 || r <= 0) throw ValidationError("adapter dims must be positive");
    Rng rng = Rng::stream(seed, 0x10aau);
    ConceptLoRA lora;
    auto gaussian = [&](int rows, int cols) {
        MatX m(rows, cols);
        for (int i = 0; i < rows; ++i)
            for (int j = 0; j < cols; ++j) m(i, j) = 0.02 * rng.normal();
        return m;
    };
    lora.a_k = gaussian(d_text, r);
    lora.a_v = gaussian(d_text, r);
    lora.b_k = MatX::Zero(r, d);
    lora.b_v = MatX::Zero(r, d);
    return lora;
}

struct AttentionWeights {
    MatX w_q; // d x d
    MatX w_k; // d_text x d
    MatX w_v; // d_text x d
    double lora_scale = 1.0;
};

inline AttentionWeights init_attention_weights(int d, int d_text, std::uint64_t seed,
                                               double lora_scale = 1.0)
{
    Rng rng = Rng::stream(seed, 0xa77eu);
    auto gaussian = [&](int rows, int cols, double std) {
        MatX m(rows, cols);
        for (int i = 0; i < rows; ++i)
            for (int j = 0; j < cols; ++j) m(i, j) = std * rng.normal();
        return m;
    };
    AttentionWeights w;
    w.w_q = gaussian(d, d, 1.0 / std::sqrt(static_cast<double>(d)));
    w.w_k = gaussian(d_text, d, 1.0 / std::sqrt(static_cast<double>(d_text)));
    w.w_v = gaussian(d_text, d, 1.0 / std::sqrt(static_cast<double>(d_text)));
    w.lora_scale = lora_scale;
    return w;
}

// Per-concept prompt embeddings and adapters plus the shared projections.
struct ConceptSet {
    std::vector<PromptEmbedding> prompts; // k entries, each L x d_text
    PromptEmbedding bg_prompt;
    std::vector<ConceptLoRA> adapters; // k entries
    AttentionWeights weights;

    int k() const { return static_cast<int>(prompts.size()); }
};

// Block max-pool of each concept plane to feature resolution; the background
// plane is recomputed as the complement of the pooled union rather than
// pooled itself (pooling can make overlapping planes where the input had
// none, and the background must stay the exact complement).
inline MaskStack downsample_masks(const MaskStack& masks, int ha, int wa)
{
    if (ha <= 0 || wa <= 0 || ha > masks.h || wa > masks.w || masks.h % ha != 0 ||
        masks.w % wa != 0)
        throw ValidationError("downsample_masks: target resolution must divide the mask size");
    const int by = masks.h / ha, bx = masks.w / wa;
    MaskStack out(masks.k, ha, wa);
    for (int i = 0; i < masks.k; ++i)
        for (int y = 0; y < ha; ++y)
            for (int x = 0; x < wa; ++x) {
                std::uint8_t any = 0;
                for (int yy = y * by; yy < (y + 1) * by && !any; ++yy)
                    for (int xx = x * bx; xx < (x + 1) * bx && !any; ++xx)
                        any = masks.at(i, yy, xx);
                out.at(i, y, x) = any;
            }
    out.recompute_background();
    return out;
}

// Region-masked queries: rows of F outside the region are zeroed, then
// projected. Returns k concept query matrices followed by the background one.
inline std::vector<MatX> concept_queries(const FeatureMap& feat, const MaskStack& masks,
                                         const MatX& w_q)
{
    const int n = feat.ha * feat.wa;
    if (feat.f.rows() != n) throw ValidationError("feature map rows disagree with spatial dims");
    if (masks.h != feat.ha || masks.w != feat.wa)
        throw ValidationError("masks are not at feature resolution");
    if (feat.f.cols() != w_q.rows()) throw ValidationError("query projection dimension mismatch");
    std::vector<MatX> queries;
    queries.reserve(static_cast<size_t>(masks.k) + 1);
    auto masked_query = [&](auto&& bit) {
        MatX masked = feat.f;
        for (int y = 0; y < masks.h; ++y)
            for (int x = 0; x < masks.w; ++x)
                if (!bit(y, x)) masked.row(y * masks.w + x).setZero();
        return MatX(masked * w_q);
    };
    for (int i = 0; i < masks.k; ++i)
        queries.push_back(masked_query([&](int y, int x) { return masks.at(i, y, x); }));
    queries.push_back(masked_query([&](int y, int x) { return masks.bg_at(y, x); }));
    return queries;
}

// K_i = p_i (W_k + lambda psi_k), V_i = p_i (W_v + lambda psi_v).
inline std::pair<MatX, MatX> concept_keys_values(const PromptEmbedding& p, const ConceptLoRA& lora,
                                                 const AttentionWeights& w)
{
    if (p.cols() != w.w_k.rows()) throw ValidationError("prompt embedding width mismatch");
    if (lora.a_k.rows() != w.w_k.rows() || lora.b_k.cols() != w.w_k.cols())
        throw ValidationError("adapter shape mismatch");
    const MatX k = p * (w.w_k + w.lora_scale * lora.psi_k());
    const MatX v = p * (w.w_v + w.lora_scale * lora.psi_v());
    return {k, v};
}

// Background path: shared projections only, no adapter.
inline std::pair<MatX, MatX> background_keys_values(const PromptEmbedding& p,
                                                    const AttentionWeights& w)
{
    if (p.cols() != w.w_k.rows()) throw ValidationError("prompt embedding width mismatch");
    return {p * w.w_k, p * w.w_v};
}

// Row-wise softmax(Q K^T / sqrt(d)).
inline MatX attention_weights(const MatX& q, const MatX& k)
{
    if (q.cols() != k.cols()) throw ValidationError("attention inner dimension mismatch");
    MatX logits = q * k.transpose() / std::sqrt(static_cast<double>(q.cols()));
    for (Eigen::Index r = 0; r < logits.rows(); ++r) {
        const double m = logits.row(r).maxCoeff();
        logits.row(r) = (logits.row(r).array() - m).exp();
        logits.row(r) /= logits.row(r).sum();
    }
    return logits;
}

inline MatX attention(const MatX& q, const MatX& k, const MatX& v)
{
    if (k.rows() != v.rows()) throw ValidationError("key/value token count mismatch");
    return attention_weights(q, k) * v;
}

// Full layer: per-concept attention plus background attention, rows gated by
// the binary region masks (a row picks up only the branches whose mask bit is
// set; background is set exactly where no concept is).
inline MatX rca_forward(const FeatureMap& feat, const MaskStack& masks, const ConceptSet& set)
{
    if (masks.k != set.k()) throw ValidationError("mask count disagrees with concept set");
    if (static_cast<int>(set.adapters.size()) != set.k())
        throw ValidationError("adapter count disagrees with concept set");
    const std::vector<MatX> queries = concept_queries(feat, masks, set.weights.w_q);

    const int n = feat.ha * feat.wa;
    const int d = static_cast<int>(set.weights.w_q.cols());
    MatX out = MatX::Zero(n, d);

    for (int i = 0; i < set.k(); ++i) {
        const auto [k_i, v_i] = concept_keys_values(set.prompts[static_cast<size_t>(i)],
                                                    set.adapters[static_cast<size_t>(i)],
                                                    set.weights);
        const MatX a_i = attention(queries[static_cast<size_t>(i)], k_i, v_i);
        for (int y = 0; y < masks.h; ++y)
            for (int x = 0; x < masks.w; ++x)
                if (masks.at(i, y, x)) out.row(y * masks.w + x) += a_i.row(y * masks.w + x);
    }
    const auto [k_bg, v_bg] = background_keys_values(set.bg_prompt, set.weights);
    const MatX a_bg = attention(queries.back(), k_bg, v_bg);
    for (int y = 0; y < masks.h; ++y)
        for (int x = 0; x < masks.w; ++x)
            if (masks.bg_at(y, x)) out.row(y * masks.w + x) += a_bg.row(y * masks.w + x);
    return out;
}

// --- adapter persistence -----------------------------------------------

inline constexpr char kAdapterMagic[8] = {'C', 'S', 'P', 'L', 'O', 'R', 'A', '1'};

namespace detail {

inline void put_u32(std::string* out, std::uint32_t v)
{
    for (int i = 0; i < 4; ++i) out->push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline std::uint32_t get_u32(const std::string& buf, size_t* pos)
{
    if (*pos + 4 > buf.size()) throw ParseError("adapter blob truncated");
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i)
        v |= static_cast<std::uint32_t>(static_cast<unsigned char>(buf[*pos + i])) << (8 * i);
    *pos += 4;
    return v;
}

inline void put_matrix(std::string* out, const MatX& m)
{
    for (Eigen::Index r = 0; r < m.rows(); ++r)
        for (Eigen::Index c = 0; c < m.cols(); ++c) {
            double v = m(r, c);
            char bytes[8];
            std::memcpy(bytes, &v, 8);
            out->append(bytes, 8);
        }
}

inline MatX get_matrix(const std::string& buf, size_t* pos, int rows, int cols)
{
    MatX m(rows, cols);
    for (int r = 0; r < rows; ++r)
        for (int c = 0; c < cols; ++c) {
            if (*pos + 8 > buf.size()) throw ParseError("adapter blob truncated");
            double v;
            std::memcpy(&v, buf.data() + *pos, 8);
            *pos += 8;
            m(r, c) = v;
        }
    return m;
}

} // namespace detail

// Binary container: magic, (d_text, d, r) header, then the four factor
// matrices row-major as little-endian doubles.
inline std::string save_concept_lora(const ConceptLoRA& lora)
{
    const int d_text = static_cast<int>(lora.a_k.rows());
    const int d = static_cast<int>(lora.b_k.cols());
    const int r = lora.rank();
    std::string out(kAdapterMagic, sizeof(kAdapterMagic));
    detail::put_u32(&out, static_cast<std::uint32_t>(d_text));
    detail::put_u32(&out, static_cast<std::uint32_t>(d));
    detail::put_u32(&out, static_cast<std::uint32_t>(r));
    detail::put_matrix(&out, lora.a_k);
    detail::put_matrix(&out, lora.b_k);
    detail::put_matrix(&out, lora.a_v);
    detail::put_matrix(&out, lora.b_v);
    return out;
}

inline ConceptLoRA load_concept_lora(const std::string& blob)
{
    if (blob.size() < sizeof(kAdapterMagic) ||
        std::memcmp(blob.data(), kAdapterMagic, sizeof(kAdapterMagic)) != 0)
        throw ParseError("adapter blob has a bad magic header");
    size_t pos = sizeof(kAdapterMagic);
    const int d_text = static_cast<int>(detail::get_u32(blob, &pos));
    const int d = static_cast<int>(detail::get_u32(blob, &pos));
    const int r = static_cast<int>(detail::get_u32(blob, &pos));
    if (d_text <= 0 || d <= 0 || r <= 0) throw ParseError("adapter blob has bad dimensions");
    ConceptLoRA lora;
    lora.a_k = detail::get_matrix(blob, &pos, d_text, r);
    lora.b_k = detail::get_matrix(blob, &pos, r, d);
    lora.a_v = detail::get_matrix(blob, &pos, d_text, r);
    lora.b_v = detail::get_matrix(blob, &pos, r, d);
    if (pos != blob.size()) throw ParseError("adapter blob has trailing bytes");
    return lora;
}

} // namespace csplat
