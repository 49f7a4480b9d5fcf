#pragma once

#include <fstream>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "boottod/common.hpp"
#include "boottod/vocab.hpp"

namespace boottod {

enum class Role { User, System };

struct Turn {
    Role role;
    std::string text;
};

/// Multi-turn dialogue. Roles strictly alternate starting with a user turn
/// and ending with a system turn, so turns.size() == 2n for n >= 1 pairs.
struct Dialogue {
    std::string id;
    std::vector<Turn> turns;

    std::size_t num_pairs() const { return turns.size() / 2; }

    void validate() const {
        if (turns.empty() || turns.size() % 2 != 0)
            throw DataError("dialogue '" + id + "': needs n >= 1 user/system turn pairs, got " +
                            std::to_string(turns.size()) + " turns");
        for (std::size_t i = 0; i < turns.size(); ++i) {
            const Role expect = (i % 2 == 0) ? Role::User : Role::System;
            if (turns[i].role != expect)
                throw DataError("dialogue '" + id + "': roles must alternate user-first (turn " +
                                std::to_string(i) + ")");
        }
    }
};

inline const char* role_name(Role r) { return r == Role::User ? "user" : "system"; }

// --------------------------------------------------------------------------
// corpus JSONL
// --------------------------------------------------------------------------
// One dialogue per line:
//   {"id": "...", "turns": [{"role": "user"|"system", "text": "..."}, ...]}

inline std::vector<Dialogue> load_corpus(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot read corpus file: " + path);
    std::vector<Dialogue> out;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::exception& e) {
            throw DataError(path + ":" + std::to_string(lineno) + ": malformed JSON: " + e.what());
        }
        Dialogue d;
        try {
            d.id = j.at("id").get<std::string>();
            for (const auto& t : j.at("turns")) {
                const std::string role = t.at("role").get<std::string>();
                if (role != "user" && role != "system")
                    throw DataError("unknown role '" + role + "'");
                d.turns.push_back({role == "user" ? Role::User : Role::System,
                                   t.at("text").get<std::string>()});
            }
        } catch (const nlohmann::json::exception& e) {
            throw DataError(path + ":" + std::to_string(lineno) + ": bad dialogue record: " +
                            e.what());
        }
        d.validate();
        out.push_back(std::move(d));
    }
    if (out.empty()) std::cerr << "warning: corpus file " << path << " contains no dialogues\n";
    return out;
}

inline void write_corpus(const std::string& path, const std::vector<Dialogue>& dialogues) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write corpus file: " + path);
    for (const auto& d : dialogues) {
        nlohmann::json turns = nlohmann::json::array();
        for (const auto& t : d.turns)
            turns.push_back({{"role", role_name(t.role)}, {"text", t.text}});
        nlohmann::json j = {{"id", d.id}, {"turns", turns}};
        out << j.dump() << "\n";
    }
}

// --------------------------------------------------------------------------
// downstream labels JSONL
// --------------------------------------------------------------------------
//   {"id": "...", "intent": "...", "acts": [["act", ...] per system turn]}

struct DialogueLabels {
    std::string id;
    std::string intent;
    std::vector<std::vector<std::string>> acts;  // one set per system turn
};

inline std::vector<DialogueLabels> load_labels(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot read labels file: " + path);
    std::vector<DialogueLabels> out;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        try {
            nlohmann::json j = nlohmann::json::parse(line);
            DialogueLabels l;
            l.id = j.at("id").get<std::string>();
            l.intent = j.at("intent").get<std::string>();
            for (const auto& turn_acts : j.at("acts"))
                l.acts.push_back(turn_acts.get<std::vector<std::string>>());
            out.push_back(std::move(l));
        } catch (const nlohmann::json::exception& e) {
            throw DataError(path + ":" + std::to_string(lineno) + ": bad label record: " + e.what());
        }
    }
    return out;
}

inline void write_labels(const std::string& path, const std::vector<DialogueLabels>& labels) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write labels file: " + path);
    for (const auto& l : labels) {
        nlohmann::json j = {{"id", l.id}, {"intent", l.intent}, {"acts", l.acts}};
        out << j.dump() << "\n";
    }
}

// --------------------------------------------------------------------------
// serialization to token ids
// --------------------------------------------------------------------------

/// [CLS] then the first num_utterances turns, each prefixed with its role
/// token, then [SEP].
inline std::vector<int> serialize_prefix(const Dialogue& d, std::size_t num_utterances,
                                         const Vocab& vocab) {
    if (num_utterances > d.turns.size())
        throw DataError("dialogue '" + d.id + "': prefix of " + std::to_string(num_utterances) +
                        " utterances exceeds " + std::to_string(d.turns.size()));
    std::vector<int> ids;
    ids.push_back(Vocab::kCls);
    for (std::size_t i = 0; i < num_utterances; ++i) {
        ids.push_back(d.turns[i].role == Role::User ? Vocab::kUsr : Vocab::kSys);
        for (int t : vocab.encode(d.turns[i].text)) ids.push_back(t);
    }
    ids.push_back(Vocab::kSep);
    return ids;
}

/// One utterance on its own: [CLS] [role] tokens [SEP] (candidate responses
/// in the dual-encoder protocols).
inline std::vector<int> serialize_utterance(const Turn& turn, const Vocab& vocab) {
    std::vector<int> ids = {Vocab::kCls, turn.role == Role::User ? Vocab::kUsr : Vocab::kSys};
    for (int t : vocab.encode(turn.text)) ids.push_back(t);
    ids.push_back(Vocab::kSep);
    return ids;
}

inline constexpr int kSerializeAll = -1;

/// upto_turn_pair == kSerializeAll: the whole dialogue.
/// upto_turn_pair == t (1-based): the split-t context, i.e. full pairs
/// 1..t-1 followed by the user utterance U_t alone.
inline std::vector<int> serialize(const Dialogue& d, int upto_turn_pair, const Vocab& vocab) {
    d.validate();
    if (upto_turn_pair == kSerializeAll) return serialize_prefix(d, d.turns.size(), vocab);
    const std::size_t n = d.num_pairs();
    if (upto_turn_pair < 1 || static_cast<std::size_t>(upto_turn_pair) > n)
        throw DataError("dialogue '" + d.id + "': split turn " + std::to_string(upto_turn_pair) +
                        " out of range 1.." + std::to_string(n));
    const std::size_t utts = 2 * (static_cast<std::size_t>(upto_turn_pair) - 1) + 1;
    return serialize_prefix(d, utts, vocab);
}

/// Token frequency vocabulary over a corpus. Reserved tokens always present;
/// content tokens require frequency >= min_freq.
inline Vocab build_vocab(const std::vector<Dialogue>& corpus, int min_freq) {
    if (corpus.empty()) throw DataError("build_vocab: empty corpus");
    std::map<std::string, std::size_t> freq;  // ordered map gives the lexicographic tie-break
    for (const auto& d : corpus)
        for (const auto& t : d.turns)
            for (const auto& w : split_words(t.text)) ++freq[w];

    std::vector<std::pair<std::string, std::size_t>> items(freq.begin(), freq.end());
    std::stable_sort(items.begin(), items.end(),
                     [](const auto& a, const auto& b) { return a.second > b.second; });

    Vocab v;
    v.min_freq = min_freq;
    for (const auto& [token, count] : items) {
        if (count >= static_cast<std::size_t>(min_freq)) v.add_token(token);
    }
    return v;
}

}  // namespace boottod
