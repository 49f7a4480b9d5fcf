#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <limits>
#include <ostream>
#include <string>
#include <vector>

#include <json.hpp>

#include "boottod/adam.hpp"
#include "boottod/checkpoint.hpp"
#include "boottod/dialogue.hpp"
#include "boottod/objective.hpp"
#include "boottod/sampler.hpp"

namespace boottod {

struct TrainConfig {
    double lr = 3e-4;
    int batch_size = 16;
    int max_steps = 500;
    int eval_every = 50;
    int patience = 3;
    double mask_ratio = 0.15;
    std::uint64_t seed = 1;
    AlignmentConfig alignment;
    SamplerConfig sampler;

    void validate() const {
        if (lr <= 0.0) throw ConfigError("train: lr must be > 0");
        if (batch_size < 1) throw ConfigError("train: batch_size must be >= 1");
        if (max_steps < 1) throw ConfigError("train: max_steps must be >= 1");
        if (eval_every < 1) throw ConfigError("train: eval_every must be >= 1");
        if (patience < 1) throw ConfigError("train: patience must be >= 1");
        if (mask_ratio <= 0.0 || mask_ratio >= 1.0)
            throw ConfigError("train: mask_ratio must be in (0, 1)");
        sampler.validate();
    }
};

struct TrainResult {
    Model best;                       // minimum-dev-perplexity weights
    Model final_weights;              // weights at the stopping step
    std::vector<nlohmann::json> log;  // step records and eval records
    int stop_step = 0;
    int best_eval_step = 0;
    double best_ppl = 0.0;
    std::string warning;              // e.g. the no-MLM convergence note
};

/// Dev MLM perplexity: exp of the mean dev-batch l_mlm, computed in eval
/// mode on splits and masks frozen at construction so evals are comparable.
class DevPerplexityEval {
public:
    DevPerplexityEval(const std::vector<Dialogue>& dev, const Vocab& vocab, const TrainConfig& cfg,
                      std::size_t max_len) {
        Rng rng(cfg.seed ^ 0xD0D0D0D0ULL);
        std::vector<SplitSample> samples;
        for (const auto& d : dev) {
            samples.push_back(split_and_sample(d, cfg.sampler, vocab, rng));
            if (samples.size() == static_cast<std::size_t>(cfg.batch_size)) {
                batches_.push_back(make_pretrain_batch(samples, cfg.mask_ratio, max_len, rng));
                samples.clear();
            }
        }
        if (!samples.empty())
            batches_.push_back(make_pretrain_batch(samples, cfg.mask_ratio, max_len, rng));
        if (batches_.empty()) throw DataError("dev split is empty; cannot compute perplexity");
    }

    double perplexity(const Model& model, const AlignmentConfig& acfg) const {
        NoGradGuard no_grad;
        double sum = 0.0;
        std::size_t n = 0;
        for (const auto& b : batches_) {
            if (b.mask_positions.empty()) continue;
            LayerStates ctx = encode(model.encoder, b.ctx_ids, b.ctx_attn_mask(), false);
            Tensor mlm = loss_mlm(ctx, b.mask_positions, b.mlm_labels, model.encoder,
                                  model.mlm_bias, acfg.reduction);
            sum += mlm.item();
            ++n;
        }
        if (n == 0) throw DataError("dev split has no maskable tokens");
        return std::exp(sum / static_cast<double>(n));
    }

    const std::vector<MaskedBatch>& batches() const { return batches_; }

private:
    std::vector<MaskedBatch> batches_;
};

/// Best-so-far tracking with patience: stops after `patience` consecutive
/// non-improving evaluations. Improvement means strictly smaller.
class EarlyStopTracker {
public:
    explicit EarlyStopTracker(int patience) : patience_(patience) {
        if (patience < 1) throw ConfigError("early stop: patience must be >= 1");
    }

    /// Returns true when this evaluation improved on the best so far.
    bool update(double value) {
        ++evals_;
        if (value < best_) {
            best_ = value;
            best_eval_ = evals_;
            bad_ = 0;
            return true;
        }
        ++bad_;
        return false;
    }

    bool should_stop() const { return bad_ >= patience_; }
    double best() const { return best_; }
    int best_eval() const { return best_eval_; }
    int evals() const { return evals_; }

private:
    int patience_;
    double best_ = std::numeric_limits<double>::infinity();
    int best_eval_ = 0;
    int bad_ = 0;
    int evals_ = 0;
};

/// One epoch's worth of training data: a fresh shuffle of the corpus and a
/// fresh SplitSample per dialogue (t and the response target are re-drawn
/// every epoch).
inline std::vector<SplitSample> make_epoch_plan(const std::vector<Dialogue>& corpus,
                                                const SamplerConfig& sampler, const Vocab& vocab,
                                                Rng& rng) {
    std::vector<std::size_t> order(corpus.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    rng.shuffle(order);
    std::vector<SplitSample> samples;
    samples.reserve(order.size());
    for (std::size_t idx : order) samples.push_back(split_and_sample(corpus[idx], sampler, vocab, rng));
    return samples;
}

/// Pre-training loop: epoch-wise re-shuffling and re-sampling of splits and
/// response targets, perplexity early stop, best-checkpoint tracking.
/// Single-threaded and a pure function of (corpus, config).
inline TrainResult train(const std::vector<Dialogue>& train_corpus,
                         const std::vector<Dialogue>& dev_corpus, const Vocab& vocab,
                         const EncoderConfig& enc_cfg, const TrainConfig& cfg,
                         std::ostream* log_stream = nullptr) {
    cfg.validate();
    enc_cfg.validate();
    if (train_corpus.empty()) throw DataError("train: empty training corpus");

    TrainResult res;
    res.warning = cfg.alignment.validate(enc_cfg.num_layers);

    Model model = Model::init(enc_cfg, cfg.seed);
    AdamConfig ocfg;
    ocfg.lr = cfg.lr;
    Adam optimizer(ocfg);

    DevPerplexityEval dev_eval(dev_corpus, vocab, cfg, static_cast<std::size_t>(enc_cfg.max_len));

    Rng data_rng(cfg.seed ^ 0xDA7A5EEDULL);
    Rng step_rng(cfg.seed ^ 0x57E95EEDULL);

    auto emit = [&](const nlohmann::json& j) {
        res.log.push_back(j);
        if (log_stream) (*log_stream) << j.dump() << "\n";
    };

    const std::size_t max_len = static_cast<std::size_t>(enc_cfg.max_len);
    int step = 0;
    EarlyStopTracker tracker(cfg.patience);
    bool stop = false;

    while (!stop && step < cfg.max_steps) {
        std::vector<SplitSample> epoch = make_epoch_plan(train_corpus, cfg.sampler, vocab,
                                                         data_rng);
        for (std::size_t start = 0; start < epoch.size() && !stop;
             start += static_cast<std::size_t>(cfg.batch_size)) {
            const std::size_t end =
                std::min(epoch.size(), start + static_cast<std::size_t>(cfg.batch_size));
            std::vector<SplitSample> pending(epoch.begin() + static_cast<long>(start),
                                             epoch.begin() + static_cast<long>(end));
            MaskedBatch batch =
                make_pretrain_batch(std::move(pending), cfg.mask_ratio, max_len, data_rng);
            LossBreakdown lb = pretrain_step(model, batch, cfg.alignment, optimizer, step_rng);
            ++step;
            emit({{"step", step},
                  {"l_cls", lb.l_cls},
                  {"l_mask", lb.l_mask},
                  {"l_mlm", lb.has_mlm ? nlohmann::json(lb.l_mlm) : nlohmann::json(nullptr)},
                  {"total", lb.total}});

            if (step % cfg.eval_every == 0) {
                const double ppl = dev_eval.perplexity(model, cfg.alignment);
                emit({{"step", step}, {"dev_ppl", ppl}});
                if (tracker.update(ppl)) {
                    res.best = model.clone();
                    res.best_eval_step = step;
                }
                if (tracker.should_stop()) stop = true;
            }
            if (step >= cfg.max_steps) stop = true;
        }
    }

    if (!res.best.mlm_bias.defined()) {
        // no eval ever ran (max_steps < eval_every): fall back to the final weights
        res.best = model.clone();
        res.best_eval_step = step;
        res.best_ppl = dev_eval.perplexity(model, cfg.alignment);
    } else {
        res.best_ppl = tracker.best();
    }
    res.final_weights = std::move(model);
    res.stop_step = step;
    return res;
}

}  // namespace boottod
