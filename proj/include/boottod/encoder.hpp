#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "boottod/common.hpp"
#include "boottod/rng.hpp"
#include "boottod/tensor.hpp"
#include "boottod/vocab.hpp"

namespace boottod {

struct EncoderConfig {
    int num_layers = 2;    // L
    int hidden_dim = 64;   // d
    int num_heads = 4;
    int ffn_dim = 128;
    int max_len = 128;
    double dropout_p = 0.2;
    int vocab_size = 0;
    double ln_eps = 1e-5;

    void validate() const {
        if (num_layers < 1) throw ConfigError("encoder: num_layers must be >= 1");
        if (hidden_dim < 1 || num_heads < 1 || hidden_dim % num_heads != 0)
            throw ConfigError("encoder: num_heads must divide hidden_dim");
        if (ffn_dim < 1) throw ConfigError("encoder: ffn_dim must be >= 1");
        if (max_len < 8) throw ConfigError("encoder: max_len must be >= 8");
        if (dropout_p < 0.0 || dropout_p >= 1.0) throw ConfigError("encoder: dropout_p in [0, 1)");
        if (vocab_size < Vocab::kNumReserved)
            throw ConfigError("encoder: vocab_size must cover the reserved tokens");
    }

    int head_dim() const { return hidden_dim / num_heads; }
};

/// Parameter values are kept representable in 32-bit floats (init and every
/// optimizer update round through float), so checkpoints stored as f32
/// arrays reload bit-exactly.
inline void quantize_storage_f32(Tensor& t) {
    for (auto& v : t.mutable_data()) v = static_cast<double>(static_cast<float>(v));
}

struct EncoderWeights {
    struct Layer {
        Tensor wq, bq, wk, bk, wv, bv, wo, bo;
        Tensor ln1_gain, ln1_bias;  // after the attention residual
        Tensor w1, b1, w2, b2;
        Tensor ln2_gain, ln2_bias;  // after the FFN residual
    };

    EncoderConfig config;
    Tensor tok_emb;  // [V, d]
    Tensor pos_emb;  // [max_len, d]
    Tensor emb_ln_gain, emb_ln_bias;
    std::vector<Layer> layers;

    static EncoderWeights init(const EncoderConfig& cfg, std::uint64_t seed) {
        cfg.validate();
        Rng rng(seed);
        const auto d = static_cast<std::size_t>(cfg.hidden_dim);
        const auto f = static_cast<std::size_t>(cfg.ffn_dim);
        const double sigma = 0.02;

        EncoderWeights w;
        w.config = cfg;
        w.tok_emb = Tensor::randn({static_cast<std::size_t>(cfg.vocab_size), d}, rng, sigma, true);
        w.pos_emb = Tensor::randn({static_cast<std::size_t>(cfg.max_len), d}, rng, sigma, true);
        w.emb_ln_gain = Tensor::full({d}, 1.0, true);
        w.emb_ln_bias = Tensor::zeros({d}, true);
        for (int l = 0; l < cfg.num_layers; ++l) {
            Layer ly;
            ly.wq = Tensor::randn({d, d}, rng, sigma, true);
            ly.bq = Tensor::zeros({d}, true);
            ly.wk = Tensor::randn({d, d}, rng, sigma, true);
            ly.bk = Tensor::zeros({d}, true);
            ly.wv = Tensor::randn({d, d}, rng, sigma, true);
            ly.bv = Tensor::zeros({d}, true);
            ly.wo = Tensor::randn({d, d}, rng, sigma, true);
            ly.bo = Tensor::zeros({d}, true);
            ly.ln1_gain = Tensor::full({d}, 1.0, true);
            ly.ln1_bias = Tensor::zeros({d}, true);
            ly.w1 = Tensor::randn({d, f}, rng, sigma, true);
            ly.b1 = Tensor::zeros({f}, true);
            ly.w2 = Tensor::randn({f, d}, rng, sigma, true);
            ly.b2 = Tensor::zeros({d}, true);
            ly.ln2_gain = Tensor::full({d}, 1.0, true);
            ly.ln2_bias = Tensor::zeros({d}, true);
            w.layers.push_back(std::move(ly));
        }
        for (auto& [name, t] : w.named_params()) quantize_storage_f32(t);
        return w;
    }

    std::vector<std::pair<std::string, Tensor>> named_params() const {
        std::vector<std::pair<std::string, Tensor>> out;
        out.emplace_back("tok_emb", tok_emb);
        out.emplace_back("pos_emb", pos_emb);
        out.emplace_back("emb_ln_gain", emb_ln_gain);
        out.emplace_back("emb_ln_bias", emb_ln_bias);
        for (std::size_t l = 0; l < layers.size(); ++l) {
            const auto& ly = layers[l];
            const std::string p = "layer" + std::to_string(l) + ".";
            out.emplace_back(p + "wq", ly.wq);
            out.emplace_back(p + "bq", ly.bq);
            out.emplace_back(p + "wk", ly.wk);
            out.emplace_back(p + "bk", ly.bk);
            out.emplace_back(p + "wv", ly.wv);
            out.emplace_back(p + "bv", ly.bv);
            out.emplace_back(p + "wo", ly.wo);
            out.emplace_back(p + "bo", ly.bo);
            out.emplace_back(p + "ln1_gain", ly.ln1_gain);
            out.emplace_back(p + "ln1_bias", ly.ln1_bias);
            out.emplace_back(p + "w1", ly.w1);
            out.emplace_back(p + "b1", ly.b1);
            out.emplace_back(p + "w2", ly.w2);
            out.emplace_back(p + "b2", ly.b2);
            out.emplace_back(p + "ln2_gain", ly.ln2_gain);
            out.emplace_back(p + "ln2_bias", ly.ln2_bias);
        }
        return out;
    }

    EncoderWeights clone() const {
        EncoderWeights w;
        w.config = config;
        w.tok_emb = tok_emb.clone();
        w.pos_emb = pos_emb.clone();
        w.emb_ln_gain = emb_ln_gain.clone();
        w.emb_ln_bias = emb_ln_bias.clone();
        for (const auto& ly : layers) {
            Layer c;
            c.wq = ly.wq.clone();
            c.bq = ly.bq.clone();
            c.wk = ly.wk.clone();
            c.bk = ly.bk.clone();
            c.wv = ly.wv.clone();
            c.bv = ly.bv.clone();
            c.wo = ly.wo.clone();
            c.bo = ly.bo.clone();
            c.ln1_gain = ly.ln1_gain.clone();
            c.ln1_bias = ly.ln1_bias.clone();
            c.w1 = ly.w1.clone();
            c.b1 = ly.b1.clone();
            c.w2 = ly.w2.clone();
            c.b2 = ly.b2.clone();
            c.ln2_gain = ly.ln2_gain.clone();
            c.ln2_bias = ly.ln2_bias.clone();
            w.layers.push_back(std::move(c));
        }
        return w;
    }
};

/// All layer outputs for one forward pass: states[0] is the embedding
/// output, states[1..L] the transformer block outputs, each [B x S x d].
/// Padded positions hold well-defined values but are never read by losses.
struct LayerStates {
    std::vector<Tensor> states;
    std::size_t batch = 0;
    std::size_t seq = 0;

    const Tensor& top() const { return states.back(); }
    std::size_t num_layers() const { return states.size() - 1; }

    std::size_t flat_index(std::size_t example, std::size_t position) const {
        return example * seq + position;
    }
};

/// Post-norm transformer encoder: each residual sum passes through a layer
/// norm, so every exposed state has bounded per-position scale (the
/// alignment losses depend on this). Returns every layer's output; dropout
/// is active only in train_mode (rng required then).
inline LayerStates encode(const EncoderWeights& w, const std::vector<std::vector<int>>& ids,
                          const std::vector<std::vector<std::uint8_t>>& attn_mask, bool train_mode,
                          Rng* rng = nullptr) {
    const EncoderConfig& cfg = w.config;
    const std::size_t batch = ids.size();
    if (batch == 0) throw DataError("encode: empty batch");
    const std::size_t seq = ids[0].size();
    if (seq == 0) throw DataError("encode: empty sequence");
    if (seq > static_cast<std::size_t>(cfg.max_len))
        throw DataError("encode: sequence length " + std::to_string(seq) + " exceeds max_len " +
                        std::to_string(cfg.max_len));
    if (attn_mask.size() != batch) throw ShapeError("encode: attention mask batch mismatch");
    if (train_mode && cfg.dropout_p > 0.0 && rng == nullptr)
        throw ConfigError("encode: train_mode dropout requires an rng");

    std::vector<std::size_t> flat_tok(batch * seq), flat_pos(batch * seq);
    for (std::size_t b = 0; b < batch; ++b) {
        if (ids[b].size() != seq || attn_mask[b].size() != seq)
            throw ShapeError("encode: ragged batch rows");
        for (std::size_t s = 0; s < seq; ++s) {
            const int id = ids[b][s];
            if (id < 0 || id >= cfg.vocab_size)
                throw DataError("encode: token id " + std::to_string(id) +
                                " out of range [0, " + std::to_string(cfg.vocab_size) + ")");
            flat_tok[b * seq + s] = static_cast<std::size_t>(id);
            flat_pos[b * seq + s] = s;
        }
    }

    const auto d = static_cast<std::size_t>(cfg.hidden_dim);
    const auto heads = static_cast<std::size_t>(cfg.num_heads);
    const auto dh = static_cast<std::size_t>(cfg.head_dim());
    const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));
    auto drop = [&](const Tensor& t) { return dropout(t, cfg.dropout_p, train_mode, *rng); };
    const bool use_drop = train_mode && cfg.dropout_p > 0.0;

    LayerStates out;
    out.batch = batch;
    out.seq = seq;

    Tensor x = add(gather_rows(w.tok_emb, flat_tok), gather_rows(w.pos_emb, flat_pos));
    x = layer_norm(x, w.emb_ln_gain, w.emb_ln_bias, cfg.ln_eps);
    if (use_drop) x = drop(x);
    x = reshape(x, {batch, seq, d});
    out.states.push_back(x);

    for (const auto& ly : w.layers) {
        // self-attention sublayer
        Tensor q = add_bias(matmul(x, ly.wq), ly.bq);
        Tensor k = add_bias(matmul(x, ly.wk), ly.bk);
        Tensor v = add_bias(matmul(x, ly.wv), ly.bv);
        std::vector<Tensor> per_example;
        per_example.reserve(batch);
        for (std::size_t b = 0; b < batch; ++b) {
            Tensor qb = slice_rows(q, b * seq, (b + 1) * seq);
            Tensor kb = slice_rows(k, b * seq, (b + 1) * seq);
            Tensor vb = slice_rows(v, b * seq, (b + 1) * seq);
            std::vector<Tensor> head_out;
            head_out.reserve(heads);
            for (std::size_t h = 0; h < heads; ++h) {
                Tensor qh = slice_cols(qb, h * dh, (h + 1) * dh);
                Tensor kh = slice_cols(kb, h * dh, (h + 1) * dh);
                Tensor vh = slice_cols(vb, h * dh, (h + 1) * dh);
                Tensor scores = scale(matmul(qh, transpose(kh)), inv_sqrt_dh);
                Tensor probs = softmax_rows_masked(scores, attn_mask[b]);
                head_out.push_back(matmul(probs, vh));
            }
            per_example.push_back(concat_cols(head_out));
        }
        Tensor attn = add_bias(matmul(concat_rows(per_example), ly.wo), ly.bo);
        if (use_drop) attn = drop(attn);
        x = layer_norm(add(x, reshape(attn, {batch, seq, d})), ly.ln1_gain, ly.ln1_bias,
                       cfg.ln_eps);

        // feed-forward sublayer
        Tensor ffn = add_bias(matmul(relu(add_bias(matmul(x, ly.w1), ly.b1)), ly.w2), ly.b2);
        if (use_drop) ffn = drop(ffn);
        x = layer_norm(add(x, ffn), ly.ln2_gain, ly.ln2_bias, cfg.ln_eps);
        out.states.push_back(x);
    }
    return out;
}

/// Position-0 rows of the top layer: one [CLS] embedding per example, the
/// model's whole-dialogue representation.
inline Tensor cls_embeddings(const LayerStates& st) {
    std::vector<std::size_t> idx(st.batch);
    for (std::size_t b = 0; b < st.batch; ++b) idx[b] = st.flat_index(b, 0);
    return gather_rows(st.top(), idx);
}

}  // namespace boottod
