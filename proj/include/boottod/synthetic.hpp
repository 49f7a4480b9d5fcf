#pragma once

#include <cstdio>
#include <iterator>
#include <set>
#include <string>
#include <vector>

#include "boottod/common.hpp"
#include "boottod/dialogue.hpp"
#include "boottod/rng.hpp"

namespace boottod {

/// Desk-scale synthetic TOD corpus: each dialogue carries one latent intent;
/// user turns instantiate that intent's user templates (optionally with slot
/// noise), system turns one or two system templates whose ids become the
/// turn's dialogue-act labels.
struct GeneratorConfig {
    int num_intents = 8;
    // system template j is the canonical reply to user template j, so the
    // next response is predictable from the history (the property response
    // selection and the alignment objective rely on); templates_per_intent
    // counts both sides
    int user_templates_per_intent = 8;
    int system_templates_per_intent = 8;
    int num_dialogues = 500;
    int min_pairs = 2;
    int max_pairs = 5;
    double slot_noise_prob = 0.3;   // chance a user turn carries a slot value
    double second_act_prob = 0.3;   // chance a system turn stacks two templates
    int num_ood_intents = 2;        // trailing intents flagged out-of-domain
    double dev_fraction = 0.1;
    double test_fraction = 0.2;
    std::uint64_t seed = 1;

    void validate() const {
        if (num_intents < 2) throw ConfigError("generator: num_intents must be >= 2");
        if (user_templates_per_intent < 1 || system_templates_per_intent < 1)
            throw ConfigError("generator: need at least one template per intent and role");
        if (num_dialogues < 1) throw ConfigError("generator: num_dialogues must be >= 1");
        if (min_pairs < 1 || max_pairs < min_pairs)
            throw ConfigError("generator: bad turn-pair range");
        if (slot_noise_prob < 0 || slot_noise_prob > 1 || second_act_prob < 0 ||
            second_act_prob > 1)
            throw ConfigError("generator: probabilities must be in [0, 1]");
        if (num_ood_intents < 0 || num_ood_intents >= num_intents)
            throw ConfigError("generator: num_ood_intents must leave at least one in-domain intent");
        if (dev_fraction < 0 || test_fraction < 0 || dev_fraction + test_fraction >= 1.0)
            throw ConfigError("generator: bad split fractions");
    }
};

struct SyntheticCorpus {
    std::vector<Dialogue> train, dev, test;
    std::vector<DialogueLabels> train_labels, dev_labels, test_labels;
    std::vector<std::string> intent_names;                    // index = intent
    std::vector<std::string> ood_intents;                     // flagged subset
    std::vector<std::string> act_names;                       // all act labels
    std::vector<std::vector<std::string>> user_templates;     // per intent
    std::vector<std::vector<std::string>> system_templates;   // per intent
};

namespace detail {

inline std::string pseudo_word(Rng& rng) {
    static const char* syllables[] = {"ba", "ro", "ti", "ka", "lem", "su", "no", "vi", "da",
                                      "pol", "mi", "ze", "ra", "ku", "fen", "ta", "lo", "gi",
                                      "nu", "sha", "bel", "or", "tem", "wi"};
    const int count = 2 + static_cast<int>(rng.index(2));  // 2-3 syllables
    std::string w;
    for (int i = 0; i < count; ++i) w += syllables[rng.index(std::size(syllables))];
    return w;
}

inline std::vector<std::string> distinct_words(Rng& rng, std::size_t count,
                                               std::set<std::string>& used) {
    std::vector<std::string> out;
    while (out.size() < count) {
        std::string w = pseudo_word(rng);
        if (used.insert(w).second) out.push_back(std::move(w));
    }
    return out;
}

// A template is a short mix of shared function words and intent-specific
// domain words; "{}" marks the optional slot position.
inline std::string make_template(Rng& rng, const std::vector<std::string>& domain,
                                 const std::vector<std::string>& function_words, bool with_slot) {
    const int len = 4 + static_cast<int>(rng.index(4));
    std::vector<std::string> words;
    int domain_used = 0;
    for (int i = 0; i < len; ++i) {
        if (rng.uniform() < 0.45) {
            words.push_back(domain[rng.index(domain.size())]);
            ++domain_used;
        } else {
            words.push_back(function_words[rng.index(function_words.size())]);
        }
    }
    while (domain_used < 2) {  // keep intents separable
        words[rng.index(words.size())] = domain[rng.index(domain.size())];
        ++domain_used;
    }
    if (with_slot) words.insert(words.begin() + static_cast<long>(rng.index(words.size() + 1)), "{}");
    std::string out;
    for (std::size_t i = 0; i < words.size(); ++i) {
        if (i) out += " ";
        out += words[i];
    }
    return out;
}

inline std::string fill_slot(const std::string& tmpl, const std::string& value) {
    const auto pos = tmpl.find("{}");
    if (pos == std::string::npos) return tmpl;
    std::string out = tmpl;
    out.replace(pos, 2, value);
    return out;
}

inline std::string strip_slot(const std::string& tmpl) {
    auto pos = tmpl.find(" {}");
    if (pos != std::string::npos) {
        std::string out = tmpl;
        out.erase(pos, 3);
        return out;
    }
    pos = tmpl.find("{} ");
    if (pos != std::string::npos) {
        std::string out = tmpl;
        out.erase(pos, 3);
        return out;
    }
    return tmpl;
}

}  // namespace detail

inline SyntheticCorpus generate_synthetic_corpus(const GeneratorConfig& cfg) {
    cfg.validate();
    Rng rng(cfg.seed);

    static const std::vector<std::string> function_words = {
        "i",   "want", "to",  "please", "can",  "you",  "the", "a",    "is",  "for", "me",
        "my",  "need", "would", "like", "what", "yes",  "okay", "sure", "your", "now", "have"};

    SyntheticCorpus corpus;
    std::set<std::string> used_words(function_words.begin(), function_words.end());

    // shared slot-value pool, reused so values clear min_freq at vocab build
    const std::vector<std::string> slot_pool = detail::distinct_words(rng, 60, used_words);

    std::vector<std::vector<std::string>> domain(static_cast<std::size_t>(cfg.num_intents));
    for (int i = 0; i < cfg.num_intents; ++i) {
        domain[static_cast<std::size_t>(i)] = detail::distinct_words(rng, 32, used_words);
        corpus.intent_names.push_back("intent_" + domain[static_cast<std::size_t>(i)][0]);
    }
    for (int i = cfg.num_intents - cfg.num_ood_intents; i < cfg.num_intents; ++i)
        corpus.ood_intents.push_back(corpus.intent_names[static_cast<std::size_t>(i)]);

    corpus.user_templates.resize(static_cast<std::size_t>(cfg.num_intents));
    corpus.system_templates.resize(static_cast<std::size_t>(cfg.num_intents));
    for (int i = 0; i < cfg.num_intents; ++i) {
        auto& dom = domain[static_cast<std::size_t>(i)];
        for (int j = 0; j < cfg.user_templates_per_intent; ++j) {
            const bool with_slot = cfg.slot_noise_prob > 0.0 && rng.uniform() < 0.5;
            corpus.user_templates[static_cast<std::size_t>(i)].push_back(
                detail::make_template(rng, dom, function_words, with_slot));
        }
        for (int j = 0; j < cfg.system_templates_per_intent; ++j) {
            corpus.system_templates[static_cast<std::size_t>(i)].push_back(
                detail::make_template(rng, dom, function_words, false));
            corpus.act_names.push_back(corpus.intent_names[static_cast<std::size_t>(i)] + "/sys" +
                                       std::to_string(j));
        }
    }

    struct Labeled {
        Dialogue d;
        DialogueLabels l;
    };
    std::vector<Labeled> all;
    for (int k = 0; k < cfg.num_dialogues; ++k) {
        const int intent = static_cast<int>(rng.index(static_cast<std::size_t>(cfg.num_intents)));
        const int pairs =
            cfg.min_pairs + static_cast<int>(rng.index(
                                static_cast<std::size_t>(cfg.max_pairs - cfg.min_pairs + 1)));
        Labeled item;
        char idbuf[24];
        std::snprintf(idbuf, sizeof(idbuf), "dlg-%05d", k);
        item.d.id = idbuf;
        item.l.id = item.d.id;
        item.l.intent = corpus.intent_names[static_cast<std::size_t>(intent)];
        const auto& utmpl = corpus.user_templates[static_cast<std::size_t>(intent)];
        const auto& stmpl = corpus.system_templates[static_cast<std::size_t>(intent)];
        for (int p = 0; p < pairs; ++p) {
            const std::size_t ut = rng.index(utmpl.size());
            std::string user = utmpl[ut];
            if (rng.uniform() < cfg.slot_noise_prob)
                user = detail::fill_slot(user, slot_pool[rng.index(slot_pool.size())]);
            else
                user = detail::strip_slot(user);
            item.d.turns.push_back({Role::User, user});

            // canonical reply to the user template just uttered
            const std::size_t a0 = ut % stmpl.size();
            std::string sys = stmpl[a0];
            std::vector<std::string> acts = {item.l.intent + "/sys" + std::to_string(a0)};
            if (rng.uniform() < cfg.second_act_prob && stmpl.size() > 1) {
                std::size_t a1 = rng.index(stmpl.size());
                while (a1 == a0) a1 = rng.index(stmpl.size());
                sys += " . " + stmpl[a1];
                acts.push_back(item.l.intent + "/sys" + std::to_string(a1));
            }
            item.d.turns.push_back({Role::System, sys});
            item.l.acts.push_back(std::move(acts));
        }
        item.d.validate();
        all.push_back(std::move(item));
    }

    rng.shuffle(all);
    const std::size_t n = all.size();
    const std::size_t n_dev = static_cast<std::size_t>(cfg.dev_fraction * static_cast<double>(n));
    const std::size_t n_test = static_cast<std::size_t>(cfg.test_fraction * static_cast<double>(n));
    for (std::size_t i = 0; i < n; ++i) {
        auto& item = all[i];
        if (i < n_dev) {
            corpus.dev.push_back(std::move(item.d));
            corpus.dev_labels.push_back(std::move(item.l));
        } else if (i < n_dev + n_test) {
            corpus.test.push_back(std::move(item.d));
            corpus.test_labels.push_back(std::move(item.l));
        } else {
            corpus.train.push_back(std::move(item.d));
            corpus.train_labels.push_back(std::move(item.l));
        }
    }
    return corpus;
}

}  // namespace boottod
