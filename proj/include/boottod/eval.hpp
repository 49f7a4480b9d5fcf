#pragma once

#include <algorithm>
#include <map>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "boottod/adam.hpp"
#include "boottod/dialogue.hpp"
#include "boottod/metrics.hpp"
#include "boottod/objective.hpp"

namespace boottod {

struct FinetuneConfig {
    int steps = 200;
    int batch_size = 16;
    double lr = 3e-3;
    std::uint64_t seed = 0;
    bool include_ood_in_train = false;  // OOS convention: off by default
    void validate() const {
        if (steps < 0) throw ConfigError("finetune: steps must be >= 0");
        if (batch_size < 1) throw ConfigError("finetune: batch_size must be >= 1");
        if (lr <= 0.0) throw ConfigError("finetune: lr must be > 0");
    }
};

namespace detail {

inline std::vector<int> clip_to_max_len(std::vector<int> ids, int max_len) {
    if (ids.size() > static_cast<std::size_t>(max_len)) {
        ids.resize(static_cast<std::size_t>(max_len) - 1);
        ids.push_back(Vocab::kSep);
    }
    return ids;
}

// Eval-mode [CLS] embeddings for a list of token sequences, batched.
inline std::vector<std::vector<double>> embed_sequences(const Model& model,
                                                        const std::vector<std::vector<int>>& seqs,
                                                        std::size_t batch_size = 32) {
    NoGradGuard no_grad;
    std::vector<std::vector<double>> out;
    out.reserve(seqs.size());
    for (std::size_t start = 0; start < seqs.size(); start += batch_size) {
        const std::size_t end = std::min(seqs.size(), start + batch_size);
        std::size_t width = 0;
        for (std::size_t i = start; i < end; ++i) width = std::max(width, seqs[i].size());
        std::vector<std::vector<int>> ids;
        std::vector<std::vector<std::uint8_t>> mask;
        for (std::size_t i = start; i < end; ++i) {
            std::vector<int> row = seqs[i];
            std::vector<std::uint8_t> m(width, 0);
            for (std::size_t k = 0; k < row.size(); ++k) m[k] = 1;
            row.resize(width, Vocab::kPad);
            ids.push_back(std::move(row));
            mask.push_back(std::move(m));
        }
        LayerStates st = encode(model.encoder, ids, mask, false);
        Tensor cls = cls_embeddings(st);
        const std::size_t d = cls.cols();
        for (std::size_t r = 0; r < cls.rows(); ++r) {
            auto row = cls.data().subspan(r * d, d);
            out.emplace_back(row.begin(), row.end());
        }
    }
    return out;
}

// Encode a mini-batch in train mode and return the [CLS] tensor (on tape).
inline Tensor cls_batch(const Model& model, const std::vector<std::vector<int>>& seqs,
                        bool train_mode, Rng* rng) {
    std::size_t width = 0;
    for (const auto& s : seqs) width = std::max(width, s.size());
    std::vector<std::vector<int>> ids;
    std::vector<std::vector<std::uint8_t>> mask;
    for (const auto& s : seqs) {
        std::vector<int> row = s;
        std::vector<std::uint8_t> m(width, 0);
        for (std::size_t k = 0; k < row.size(); ++k) m[k] = 1;
        row.resize(width, Vocab::kPad);
        ids.push_back(std::move(row));
        mask.push_back(std::move(m));
    }
    return cls_embeddings(encode(model.encoder, ids, mask, train_mode, rng));
}

inline double dot(const std::vector<double>& a, const std::vector<double>& b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

}  // namespace detail

// --------------------------------------------------------------------------
// intent recognition (OOS-style)
// --------------------------------------------------------------------------

/// Metric kernel for the OOS-style protocol, on label indices with the
/// "out" class given explicitly:
///   acc_all    — exact-match accuracy over every example;
///   acc_in     — exact-match accuracy over in-domain examples;
///   acc_out    — accuracy of the binary in/out decision over all examples;
///   recall_out — fraction of out-of-domain examples predicted "out".
/// acc_out and recall_out are absent when the set has no OOD examples.
inline MetricsReport intent_metrics(const std::vector<std::size_t>& predictions,
                                    const std::vector<std::size_t>& truths,
                                    std::size_t out_class) {
    if (predictions.size() != truths.size())
        throw DataError("intent_metrics: prediction/label count mismatch");
    long long correct_all = 0, in_total = 0, in_correct = 0;
    long long ood_total = 0, ood_caught = 0, binary_correct = 0;
    for (std::size_t i = 0; i < predictions.size(); ++i) {
        const std::size_t pred = predictions[i], truth = truths[i];
        if (pred == truth) ++correct_all;
        if (truth == out_class) {
            ++ood_total;
            if (pred == out_class) ++ood_caught;
        } else {
            ++in_total;
            if (pred == truth) ++in_correct;
        }
        if ((pred == out_class) == (truth == out_class)) ++binary_correct;
    }
    MetricsReport report;
    report.task = "intent";
    const auto n = static_cast<double>(predictions.size());
    report.add("acc_all", predictions.empty() ? 0.0 : static_cast<double>(correct_all) / n);
    if (in_total > 0)
        report.add("acc_in", static_cast<double>(in_correct) / static_cast<double>(in_total));
    if (ood_total > 0) {
        report.add("acc_out", static_cast<double>(binary_correct) / n);
        report.add("recall_out", static_cast<double>(ood_caught) / static_cast<double>(ood_total));
    }
    return report;
}

/// Fine-tunes a [CLS] -> softmax head (encoder included) on in-domain
/// intents; out-of-domain eval examples map to one extra "out" class.
inline MetricsReport finetune_intent(const Model& pretrained, const Vocab& vocab,
                                     const std::vector<Dialogue>& train_corpus,
                                     const std::vector<DialogueLabels>& train_labels,
                                     const std::vector<Dialogue>& test_corpus,
                                     const std::vector<DialogueLabels>& test_labels,
                                     const std::vector<std::string>& ood_intents,
                                     const FinetuneConfig& cfg) {
    cfg.validate();
    Model model = pretrained.clone();
    const int max_len = model.encoder.config.max_len;
    const std::set<std::string> ood(ood_intents.begin(), ood_intents.end());

    std::set<std::string> in_domain;
    for (const auto& l : train_labels)
        if (!ood.count(l.intent)) in_domain.insert(l.intent);
    std::vector<std::string> classes(in_domain.begin(), in_domain.end());
    classes.push_back("out");
    const std::size_t out_class = classes.size() - 1;
    std::map<std::string, std::size_t> class_id;
    for (std::size_t i = 0; i < classes.size(); ++i) class_id[classes[i]] = i;

    auto label_of = [&](const std::string& intent) -> std::size_t {
        if (ood.count(intent)) return out_class;
        auto it = class_id.find(intent);
        if (it == class_id.end())
            throw DataError("intent '" + intent + "' outside the declared label space");
        return it->second;
    };

    // training set: in-domain only unless configured otherwise
    std::vector<std::vector<int>> train_seqs;
    std::vector<std::size_t> train_targets;
    for (std::size_t i = 0; i < train_corpus.size(); ++i) {
        const bool is_ood = ood.count(train_labels[i].intent) > 0;
        if (is_ood && !cfg.include_ood_in_train) continue;
        train_seqs.push_back(
            detail::clip_to_max_len(serialize(train_corpus[i], kSerializeAll, vocab), max_len));
        train_targets.push_back(label_of(train_labels[i].intent));
    }
    if (train_seqs.empty()) throw DataError("finetune_intent: no training examples");

    Rng rng(cfg.seed ^ 0x147E47ULL);
    const auto d = static_cast<std::size_t>(model.encoder.config.hidden_dim);
    Tensor head_w = Tensor::randn({d, classes.size()}, rng, 0.02, true);
    Tensor head_b = Tensor::zeros({classes.size()}, true);

    AdamConfig ocfg;
    ocfg.lr = cfg.lr;
    Adam opt(ocfg);
    auto params = model.named_params();
    params.emplace_back("intent_head.w", head_w);
    params.emplace_back("intent_head.b", head_b);

    std::vector<std::size_t> order(train_seqs.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::size_t cursor = order.size();
    for (int step = 0; step < cfg.steps; ++step) {
        std::vector<std::vector<int>> seqs;
        std::vector<std::size_t> targets;
        for (int b = 0; b < cfg.batch_size; ++b) {
            if (cursor == order.size()) {
                rng.shuffle(order);
                cursor = 0;
            }
            seqs.push_back(train_seqs[order[cursor]]);
            targets.push_back(train_targets[order[cursor]]);
            ++cursor;
        }
        Tape tape;
        Tensor cls = detail::cls_batch(model, seqs, true, &rng);
        Tensor logits = add_bias(matmul(cls, head_w), head_b);
        Tensor loss = softmax_cross_entropy(logits, targets);
        tape.backward(loss);
        opt.step(params);
    }

    // evaluation
    std::vector<std::vector<int>> eval_seqs;
    std::vector<std::size_t> eval_targets;
    for (std::size_t i = 0; i < test_corpus.size(); ++i) {
        eval_seqs.push_back(
            detail::clip_to_max_len(serialize(test_corpus[i], kSerializeAll, vocab), max_len));
        eval_targets.push_back(label_of(test_labels[i].intent));
    }
    auto embs = detail::embed_sequences(model, eval_seqs);
    std::vector<std::size_t> predictions;
    {
        NoGradGuard no_grad;
        for (std::size_t i = 0; i < embs.size(); ++i) {
            Tensor e = Tensor::from({1, d}, std::vector<double>(embs[i]));
            Tensor logits = add_bias(matmul(e, head_w), head_b);
            std::size_t argmax = 0;
            for (std::size_t c = 1; c < classes.size(); ++c)
                if (logits.data()[c] > logits.data()[argmax]) argmax = c;
            predictions.push_back(argmax);
        }
    }

    MetricsReport report = intent_metrics(predictions, eval_targets, out_class);
    report.metadata["num_classes"] = classes.size();
    report.metadata["eval_examples"] = eval_seqs.size();
    report.metadata["seed"] = cfg.seed;
    return report;
}

// --------------------------------------------------------------------------
// dialogue act prediction (multi-label)
// --------------------------------------------------------------------------

/// Multi-label head on the history [CLS]; an act is predicted when its
/// sigmoid exceeds 0.5. Reports micro-F1 and macro-F1.
inline MetricsReport finetune_dialogue_act(const Model& pretrained, const Vocab& vocab,
                                           const std::vector<Dialogue>& train_corpus,
                                           const std::vector<DialogueLabels>& train_labels,
                                           const std::vector<Dialogue>& test_corpus,
                                           const std::vector<DialogueLabels>& test_labels,
                                           const std::vector<std::string>& act_vocabulary,
                                           const FinetuneConfig& cfg) {
    cfg.validate();
    Model model = pretrained.clone();
    const int max_len = model.encoder.config.max_len;
    std::map<std::string, std::size_t> act_id;
    for (std::size_t i = 0; i < act_vocabulary.size(); ++i) act_id[act_vocabulary[i]] = i;
    const std::size_t num_acts = act_vocabulary.size();
    if (num_acts == 0) throw DataError("finetune_dialogue_act: empty act vocabulary");

    struct Example {
        std::vector<int> seq;
        std::vector<double> targets;
    };
    auto build = [&](const std::vector<Dialogue>& corpus,
                     const std::vector<DialogueLabels>& labels) {
        std::vector<Example> out;
        for (std::size_t i = 0; i < corpus.size(); ++i) {
            const auto& d = corpus[i];
            const auto& l = labels[i];
            if (l.acts.size() != d.num_pairs())
                throw DataError("dialogue '" + d.id + "': acts per system turn mismatch");
            for (std::size_t p = 0; p < d.num_pairs(); ++p) {
                Example ex;
                ex.seq = detail::clip_to_max_len(
                    serialize(d, static_cast<int>(p) + 1, vocab), max_len);
                ex.targets.assign(num_acts, 0.0);
                for (const auto& act : l.acts[p]) {
                    auto it = act_id.find(act);
                    if (it == act_id.end()) throw DataError("unknown act id '" + act + "'");
                    ex.targets[it->second] = 1.0;
                }
                out.push_back(std::move(ex));
            }
        }
        return out;
    };
    auto train_examples = build(train_corpus, train_labels);
    auto test_examples = build(test_corpus, test_labels);
    if (train_examples.empty()) throw DataError("finetune_dialogue_act: no training examples");

    Rng rng(cfg.seed ^ 0xAC7AC7ULL);
    const auto d = static_cast<std::size_t>(model.encoder.config.hidden_dim);
    Tensor head_w = Tensor::randn({d, num_acts}, rng, 0.02, true);
    Tensor head_b = Tensor::zeros({num_acts}, true);

    AdamConfig ocfg;
    ocfg.lr = cfg.lr;
    Adam opt(ocfg);
    auto params = model.named_params();
    params.emplace_back("act_head.w", head_w);
    params.emplace_back("act_head.b", head_b);

    std::vector<std::size_t> order(train_examples.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::size_t cursor = order.size();
    for (int step = 0; step < cfg.steps; ++step) {
        std::vector<std::vector<int>> seqs;
        std::vector<double> targets;
        for (int b = 0; b < cfg.batch_size; ++b) {
            if (cursor == order.size()) {
                rng.shuffle(order);
                cursor = 0;
            }
            const auto& ex = train_examples[order[cursor]];
            seqs.push_back(ex.seq);
            targets.insert(targets.end(), ex.targets.begin(), ex.targets.end());
            ++cursor;
        }
        Tape tape;
        Tensor cls = detail::cls_batch(model, seqs, true, &rng);
        Tensor logits = add_bias(matmul(cls, head_w), head_b);
        Tensor target_t =
            Tensor::from({seqs.size(), num_acts}, std::vector<double>(targets));
        Tensor loss = bce_with_logits(logits, target_t);
        tape.backward(loss);
        opt.step(params);
    }

    // evaluation: sigmoid > 0.5 means logit > 0
    std::vector<std::vector<int>> eval_seqs;
    for (const auto& ex : test_examples) eval_seqs.push_back(ex.seq);
    auto embs = detail::embed_sequences(model, eval_seqs);
    std::vector<F1Counts> counts(num_acts);
    {
        NoGradGuard no_grad;
        for (std::size_t i = 0; i < embs.size(); ++i) {
            Tensor e = Tensor::from({1, d}, std::vector<double>(embs[i]));
            Tensor logits = add_bias(matmul(e, head_w), head_b);
            for (std::size_t a = 0; a < num_acts; ++a) {
                const bool predicted = logits.data()[a] > 0.0;
                const bool actual = test_examples[i].targets[a] > 0.5;
                if (predicted && actual) ++counts[a].tp;
                else if (predicted && !actual) ++counts[a].fp;
                else if (!predicted && actual) ++counts[a].fn;
            }
        }
    }
    F1Result f1 = f1_metrics(counts);

    MetricsReport report;
    report.task = "dialogue_act";
    report.metadata["num_acts"] = num_acts;
    report.metadata["eval_examples"] = test_examples.size();
    report.metadata["seed"] = cfg.seed;
    report.add("micro_f1", f1.micro_f1);
    report.add("macro_f1", f1.macro_f1);
    return report;
}

// --------------------------------------------------------------------------
// response selection (dual encoder, k-to-100)
// --------------------------------------------------------------------------

/// In-batch softmax fine-tuning of the dual encoder: each history's positive
/// response competes against the other responses in the batch.
inline Model finetune_response_selection(const Model& pretrained, const Vocab& vocab,
                                         const std::vector<Dialogue>& train_corpus,
                                         const FinetuneConfig& cfg) {
    cfg.validate();
    Model model = pretrained.clone();
    const int max_len = model.encoder.config.max_len;

    struct Pair {
        std::vector<int> history, response;
    };
    std::vector<Pair> pairs;
    for (const auto& d : train_corpus) {
        for (std::size_t p = 0; p < d.num_pairs(); ++p) {
            Pair pr;
            pr.history = detail::clip_to_max_len(serialize(d, static_cast<int>(p) + 1, vocab),
                                                 max_len);
            pr.response = detail::clip_to_max_len(
                serialize_utterance(d.turns[2 * p + 1], vocab), max_len);
            pairs.push_back(std::move(pr));
        }
    }
    if (pairs.size() < 2) throw DataError("finetune_response_selection: need at least two pairs");

    Rng rng(cfg.seed ^ 0x5E1EC7ULL);
    AdamConfig ocfg;
    ocfg.lr = cfg.lr;
    Adam opt(ocfg);
    auto params = model.named_params();

    std::vector<std::size_t> order(pairs.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::size_t cursor = order.size();
    for (int step = 0; step < cfg.steps; ++step) {
        std::vector<std::vector<int>> hist, resp;
        for (int b = 0; b < cfg.batch_size; ++b) {
            if (cursor == order.size()) {
                rng.shuffle(order);
                cursor = 0;
            }
            hist.push_back(pairs[order[cursor]].history);
            resp.push_back(pairs[order[cursor]].response);
            ++cursor;
        }
        Tape tape;
        Tensor h = detail::cls_batch(model, hist, true, &rng);
        Tensor r = detail::cls_batch(model, resp, true, &rng);
        Tensor logits = matmul(h, transpose(r));  // [B x B], positives on the diagonal
        std::vector<std::size_t> targets(hist.size());
        for (std::size_t i = 0; i < targets.size(); ++i) targets[i] = i;
        Tensor loss = softmax_cross_entropy(logits, targets);
        tape.backward(loss);
        opt.step(params);
    }
    return model;
}

/// k-to-100: the ground-truth response ranked against 99 seeded distractor
/// system responses by [CLS] dot product; ties break by candidate index.
inline MetricsReport response_selection_eval(const Model& model, const Vocab& vocab,
                                             const std::vector<Dialogue>& eval_corpus,
                                             std::size_t pool_size, const std::vector<int>& ks,
                                             std::uint64_t seed) {
    const int max_len = model.encoder.config.max_len;

    // candidate pool: every system utterance in the eval corpus
    std::vector<std::string> pool_texts;
    std::vector<std::vector<int>> pool_seqs;
    struct Trial {
        std::vector<int> history;
        std::size_t truth_pool_index;
    };
    std::vector<Trial> trials;
    for (const auto& d : eval_corpus) {
        for (std::size_t p = 0; p < d.num_pairs(); ++p) {
            const auto& sys = d.turns[2 * p + 1];
            pool_texts.push_back(sys.text);
            pool_seqs.push_back(
                detail::clip_to_max_len(serialize_utterance(sys, vocab), max_len));
            Trial t;
            t.history = detail::clip_to_max_len(serialize(d, static_cast<int>(p) + 1, vocab),
                                                max_len);
            t.truth_pool_index = pool_texts.size() - 1;
            trials.push_back(std::move(t));
        }
    }
    if (pool_texts.size() < pool_size)
        throw DataError("response_selection_eval: pool of " + std::to_string(pool_texts.size()) +
                        " system responses is smaller than " + std::to_string(pool_size));

    auto pool_embs = detail::embed_sequences(model, pool_seqs);
    std::vector<std::vector<int>> hist_seqs;
    for (const auto& t : trials) hist_seqs.push_back(t.history);
    auto hist_embs = detail::embed_sequences(model, hist_seqs);

    Rng rng(seed ^ 0xCA9D1DA7E5ULL);
    std::map<int, long long> hits;
    for (int k : ks) hits[k] = 0;
    for (std::size_t i = 0; i < trials.size(); ++i) {
        const std::size_t truth = trials[i].truth_pool_index;
        // distractors: distinct pool indices, excluding any candidate whose
        // text equals the ground truth
        std::vector<std::size_t> candidates;
        std::set<std::size_t> chosen;
        while (candidates.size() < pool_size - 1) {
            const std::size_t j = rng.index(pool_texts.size());
            if (j == truth || chosen.count(j) || pool_texts[j] == pool_texts[truth]) continue;
            chosen.insert(j);
            candidates.push_back(j);
        }
        const std::size_t truth_slot = rng.index(pool_size);
        candidates.insert(candidates.begin() + static_cast<long>(truth_slot), truth);

        std::vector<double> scores(pool_size);
        for (std::size_t c = 0; c < pool_size; ++c)
            scores[c] = detail::dot(hist_embs[i], pool_embs[candidates[c]]);
        const std::size_t rank = rank_of_truth(scores, truth_slot);
        for (int k : ks)
            if (rank <= static_cast<std::size_t>(k)) ++hits[k];
    }

    MetricsReport report;
    report.task = "response_selection";
    report.metadata["trials"] = trials.size();
    report.metadata["pool_size"] = pool_size;
    report.metadata["seed"] = seed;
    for (int k : ks)
        report.add(std::to_string(k) + "_to_" + std::to_string(pool_size),
                   trials.empty() ? 0.0
                                  : static_cast<double>(hits[k]) /
                                        static_cast<double>(trials.size()));
    return report;
}

}  // namespace boottod
