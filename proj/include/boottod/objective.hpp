#pragma once

#include <algorithm>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "boottod/adam.hpp"
#include "boottod/common.hpp"
#include "boottod/encoder.hpp"
#include "boottod/sampler.hpp"
#include "boottod/tensor.hpp"

namespace boottod {

/// Two affine layers with a ReLU between them; output dimension equals the
/// encoder hidden dim so alignment differences are well-formed.
struct PredictorWeights {
    Tensor w1, b1;  // d -> bottleneck
    Tensor w2, b2;  // bottleneck -> d

    static int bottleneck_dim(int d) { return std::max(8, (2 * d) / 3); }

    static PredictorWeights init(int d, std::uint64_t seed) {
        Rng rng(seed);
        const auto dd = static_cast<std::size_t>(d);
        const auto h = static_cast<std::size_t>(bottleneck_dim(d));
        PredictorWeights p;
        p.w1 = Tensor::randn({dd, h}, rng, 0.02, true);
        p.b1 = Tensor::zeros({h}, true);
        p.w2 = Tensor::randn({h, dd}, rng, 0.02, true);
        p.b2 = Tensor::zeros({dd}, true);
        for (auto& [name, t] : p.named_params()) quantize_storage_f32(t);
        return p;
    }

    std::vector<std::pair<std::string, Tensor>> named_params() const {
        return {{"predictor.w1", w1},
                {"predictor.b1", b1},
                {"predictor.w2", w2},
                {"predictor.b2", b2}};
    }

    PredictorWeights clone() const {
        PredictorWeights p;
        p.w1 = w1.clone();
        p.b1 = b1.clone();
        p.w2 = w2.clone();
        p.b2 = b2.clone();
        return p;
    }
};

inline Tensor predictor_forward(const Tensor& x, const PredictorWeights& w) {
    if (x.cols() != w.w1.shape()[0])
        throw ShapeError("predictor_forward: input " + shape_str(x.shape()) +
                         " does not match " + shape_str(w.w1.shape()));
    return add_bias(matmul(relu(add_bias(matmul(x, w.w1), w.b1)), w.w2), w.b2);
}

enum class DistanceKind { Euclidean, Squared };
enum class LossReduction { MeanOverBatch, SumPerSample };

struct AlignmentConfig {
    int alignment_layers = 2;  // K: topmost transformer layers in the sums
    bool use_stop_gradient = true;
    bool use_cls_align = true;
    bool use_mask_align = true;
    bool use_mlm = true;
    bool use_predictor = true;
    DistanceKind distance = DistanceKind::Euclidean;
    LossReduction reduction = LossReduction::MeanOverBatch;
    bool target_branch_dropout = true;  // dropout on the full-stream encode

    // Returns a warning when the configuration is known to be fragile.
    std::string validate(int encoder_layers) const {
        if (!use_cls_align && !use_mask_align && !use_mlm)
            throw ConfigError("alignment: at least one loss term must be enabled");
        if (alignment_layers < 1 || alignment_layers > encoder_layers)
            throw ConfigError("alignment: K must be in 1..L (L=" + std::to_string(encoder_layers) +
                              ")");
        if (!use_mlm)
            return "warning: MLM disabled; training is expected to fail to converge";
        return "";
    }
};

/// The three loss terms and their unweighted sum for one batch. l_mlm is
/// absent (has_mlm == false) when the batch has no masked tokens.
struct LossBreakdown {
    double l_cls = 0.0;
    double l_mask = 0.0;
    double l_mlm = 0.0;
    bool has_mlm = false;
    double total = 0.0;
    std::size_t mask_count = 0;
    int layer_count = 0;
};

namespace detail {

inline Tensor branch_distance(const Tensor& online, const Tensor& target,
                              const AlignmentConfig& cfg) {
    Tensor per_row = rowwise_distance(online, target, cfg.distance == DistanceKind::Squared);
    if (cfg.reduction == LossReduction::MeanOverBatch) return mean_all(per_row);
    return sum_all(per_row);
}

inline std::vector<std::size_t> topmost_layer_indices(const LayerStates& st, int k) {
    // states[0] is the embedding output and is excluded from alignment
    const int l = static_cast<int>(st.num_layers());
    std::vector<std::size_t> idx;
    for (int i = l - k + 1; i <= l; ++i) idx.push_back(static_cast<std::size_t>(i));
    return idx;
}

}  // namespace detail

/// Dialogue-level alignment: sum over the topmost K layers of the distance
/// between the predicted context [CLS] state and the (detached) full-stream
/// [CLS] state, averaged over the batch.
inline Tensor loss_cls(const LayerStates& ctx, const LayerStates& full, const PredictorWeights& pred,
                       const AlignmentConfig& cfg) {
    if (ctx.num_layers() != full.num_layers())
        throw ShapeError("loss_cls: layer-count mismatch between streams");
    if (ctx.batch != full.batch) throw ShapeError("loss_cls: batch mismatch between streams");
    std::vector<std::size_t> ctx_idx(ctx.batch), full_idx(full.batch);
    for (std::size_t b = 0; b < ctx.batch; ++b) {
        ctx_idx[b] = ctx.flat_index(b, 0);
        full_idx[b] = full.flat_index(b, 0);
    }
    Tensor acc = Tensor::scalar(0.0);
    for (std::size_t l : detail::topmost_layer_indices(ctx, cfg.alignment_layers)) {
        Tensor c = gather_rows(ctx.states[l], ctx_idx);
        Tensor r = gather_rows(full.states[l], full_idx);
        if (cfg.use_stop_gradient) r = stop_gradient(r);
        Tensor online = cfg.use_predictor ? predictor_forward(c, pred) : c;
        acc = add(acc, detail::branch_distance(online, r, cfg));
    }
    return acc;
}

/// Token-level alignment at the masked context positions; the target is the
/// full stream's state at the same absolute position, where the token is
/// unmasked.
inline Tensor loss_mask(const LayerStates& ctx, const LayerStates& full,
                        const std::vector<std::pair<std::size_t, std::size_t>>& mask_positions,
                        const PredictorWeights& pred, const AlignmentConfig& cfg) {
    if (ctx.num_layers() != full.num_layers())
        throw ShapeError("loss_mask: layer-count mismatch between streams");
    if (mask_positions.empty()) return Tensor::scalar(0.0);
    std::vector<std::size_t> ctx_idx, full_idx;
    ctx_idx.reserve(mask_positions.size());
    full_idx.reserve(mask_positions.size());
    for (auto [ex, pos] : mask_positions) {
        if (ex >= ctx.batch || pos >= ctx.seq || pos >= full.seq)
            throw ShapeError("loss_mask: mask position (" + std::to_string(ex) + ", " +
                             std::to_string(pos) + ") out of range");
        ctx_idx.push_back(ctx.flat_index(ex, pos));
        full_idx.push_back(full.flat_index(ex, pos));
    }
    Tensor acc = Tensor::scalar(0.0);
    for (std::size_t l : detail::topmost_layer_indices(ctx, cfg.alignment_layers)) {
        Tensor c = gather_rows(ctx.states[l], ctx_idx);
        Tensor r = gather_rows(full.states[l], full_idx);
        if (cfg.use_stop_gradient) r = stop_gradient(r);
        Tensor online = cfg.use_predictor ? predictor_forward(c, pred) : c;
        acc = add(acc, detail::branch_distance(online, r, cfg));
    }
    return acc;
}

/// MLM on the masked context positions; vocab logits come from the
/// weight-tied token embedding plus a trained output bias.
inline Tensor loss_mlm(const LayerStates& ctx,
                       const std::vector<std::pair<std::size_t, std::size_t>>& mask_positions,
                       const std::vector<int>& mlm_labels, const EncoderWeights& enc,
                       const Tensor& mlm_bias, LossReduction reduction) {
    if (mask_positions.empty()) throw DataError("loss_mlm: batch has no masked tokens (M = 0)");
    if (mask_positions.size() != mlm_labels.size())
        throw ShapeError("loss_mlm: labels do not align with mask positions");
    std::vector<std::size_t> idx, targets;
    for (auto [ex, pos] : mask_positions) idx.push_back(ctx.flat_index(ex, pos));
    for (int label : mlm_labels) {
        if (label < 0 || label >= enc.config.vocab_size)
            throw DataError("loss_mlm: label id " + std::to_string(label) + " out of vocab range");
        targets.push_back(static_cast<std::size_t>(label));
    }
    Tensor hidden = gather_rows(ctx.top(), idx);
    Tensor logits = add_bias(matmul(hidden, transpose(enc.tok_emb)), mlm_bias);
    Tensor ce = softmax_cross_entropy(logits, targets);
    if (reduction == LossReduction::SumPerSample)
        ce = scale(ce, static_cast<double>(mask_positions.size()));
    return ce;
}

/// Unweighted sum of the enabled terms.
inline LossBreakdown total_loss(const Tensor& cls_term, const Tensor& mask_term,
                                const Tensor* mlm_term, const AlignmentConfig& cfg,
                                std::size_t mask_count) {
    LossBreakdown out;
    out.layer_count = cfg.alignment_layers;
    out.mask_count = mask_count;
    double total = 0.0;
    if (cfg.use_cls_align) {
        out.l_cls = cls_term.item();
        total += out.l_cls;
    }
    if (cfg.use_mask_align) {
        out.l_mask = mask_term.item();
        total += out.l_mask;
    }
    if (cfg.use_mlm && mlm_term != nullptr) {
        out.l_mlm = mlm_term->item();
        out.has_mlm = true;
        total += out.l_mlm;
    }
    out.total = total;
    return out;
}

// --------------------------------------------------------------------------
// full pre-training model
// --------------------------------------------------------------------------

struct Model {
    EncoderWeights encoder;
    PredictorWeights predictor;
    Tensor mlm_bias;  // [V]; the projection itself is tied to tok_emb

    static Model init(const EncoderConfig& cfg, std::uint64_t seed) {
        Model m;
        m.encoder = EncoderWeights::init(cfg, seed);
        m.predictor = PredictorWeights::init(cfg.hidden_dim, seed ^ 0x9E3779B97F4A7C15ULL);
        m.mlm_bias = Tensor::zeros({static_cast<std::size_t>(cfg.vocab_size)}, true);
        return m;
    }

    std::vector<std::pair<std::string, Tensor>> named_params() const {
        auto out = encoder.named_params();
        for (auto& p : predictor.named_params()) out.push_back(p);
        out.emplace_back("mlm_bias", mlm_bias);
        return out;
    }

    Model clone() const {
        Model m;
        m.encoder = encoder.clone();
        m.predictor = predictor.clone();
        m.mlm_bias = mlm_bias.clone();
        return m;
    }
};

struct StepResult {
    LossBreakdown losses;
    Tensor total;  // scalar graph output (for backward)
};

/// Both encoder passes plus the three loss terms. detach_full_stream runs
/// the target branch entirely outside the tape (used by the stop-gradient
/// verification); cfg.use_stop_gradient is the in-graph switch.
inline StepResult compute_losses(const Model& model, const MaskedBatch& batch,
                                 const AlignmentConfig& cfg, bool train_mode, Rng* rng,
                                 bool detach_full_stream = false) {
    cfg.validate(model.encoder.config.num_layers);

    LayerStates ctx = encode(model.encoder, batch.ctx_ids, batch.ctx_attn_mask(), train_mode, rng);
    LayerStates full = [&] {
        const bool target_train = train_mode && cfg.target_branch_dropout;
        if (detach_full_stream) {
            NoGradGuard no_grad;
            return encode(model.encoder, batch.full_ids, batch.full_attn_mask(), target_train, rng);
        }
        return encode(model.encoder, batch.full_ids, batch.full_attn_mask(), target_train, rng);
    }();

    Tensor cls_term = cfg.use_cls_align ? loss_cls(ctx, full, model.predictor, cfg)
                                        : Tensor::scalar(0.0);
    Tensor mask_term = cfg.use_mask_align
                           ? loss_mask(ctx, full, batch.mask_positions, model.predictor, cfg)
                           : Tensor::scalar(0.0);

    Tensor mlm_term;
    const bool mlm_defined = cfg.use_mlm && !batch.mask_positions.empty();
    if (mlm_defined)
        mlm_term = loss_mlm(ctx, batch.mask_positions, batch.mlm_labels, model.encoder,
                            model.mlm_bias, cfg.reduction);

    StepResult res;
    res.losses = total_loss(cls_term, mask_term, mlm_defined ? &mlm_term : nullptr, cfg,
                            batch.mask_positions.size());

    Tensor total = Tensor::scalar(0.0);
    if (cfg.use_cls_align) total = add(total, cls_term);
    if (cfg.use_mask_align) total = add(total, mask_term);
    if (mlm_defined) total = add(total, mlm_term);
    res.total = total;
    return res;
}

/// One pre-training step: both forwards, the summed objective, one backward
/// pass, one optimizer update over encoder + predictor + output projection.
inline LossBreakdown pretrain_step(Model& model, const MaskedBatch& batch,
                                   const AlignmentConfig& cfg, Adam& optimizer, Rng& rng) {
    Tape tape;
    StepResult res = compute_losses(model, batch, cfg, /*train_mode=*/true, &rng);
    tape.backward(res.total);
    optimizer.step(model.named_params());
    return res.losses;
}

}  // namespace boottod
