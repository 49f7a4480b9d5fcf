#pragma once

#include <algorithm>
#include <array>
#include <cctype>
#include <fstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "boottod/common.hpp"

namespace boottod {

// Word-level tokenization: lowercase, split on whitespace, each ASCII
// punctuation character is its own token. Bytes >= 0x80 are treated as word
// characters so UTF-8 text passes through unsplit.
inline std::vector<std::string> split_words(const std::string& text) {
    std::vector<std::string> out;
    std::string cur;
    auto flush = [&] {
        if (!cur.empty()) {
            out.push_back(cur);
            cur.clear();
        }
    };
    for (char ch : text) {
        const unsigned char u = static_cast<unsigned char>(ch);
        if (u < 0x80 && std::isspace(u)) {
            flush();
        } else if (u < 0x80 && std::ispunct(u)) {
            flush();
            out.emplace_back(1, ch);
        } else {
            cur.push_back(u < 0x80 ? static_cast<char>(std::tolower(u)) : ch);
        }
    }
    flush();
    return out;
}

/// Token table with fixed reserved ids. The map is a bijection; id order for
/// non-reserved tokens is frequency descending, ties broken lexicographically.
class Vocab {
public:
    static constexpr int kPad = 0;
    static constexpr int kUnk = 1;
    static constexpr int kCls = 2;
    static constexpr int kSep = 3;
    static constexpr int kMask = 4;
    static constexpr int kUsr = 5;
    static constexpr int kSys = 6;
    static constexpr int kNumReserved = 7;

    static const std::array<std::string, kNumReserved>& reserved_tokens() {
        static const std::array<std::string, kNumReserved> names = {
            "[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]", "[USR]", "[SYS]"};
        return names;
    }

    Vocab() {
        for (int i = 0; i < kNumReserved; ++i) add_token(reserved_tokens()[i]);
    }

    int size() const { return static_cast<int>(id_to_token_.size()); }

    int id_of(const std::string& token) const {
        auto it = token_to_id_.find(token);
        return it == token_to_id_.end() ? kUnk : it->second;
    }

    bool contains(const std::string& token) const { return token_to_id_.count(token) > 0; }

    const std::string& token_of(int id) const {
        if (id < 0 || id >= size()) throw DataError("token id " + std::to_string(id) + " out of range");
        return id_to_token_[static_cast<std::size_t>(id)];
    }

    int add_token(const std::string& token) {
        auto it = token_to_id_.find(token);
        if (it != token_to_id_.end()) return it->second;
        const int id = size();
        token_to_id_.emplace(token, id);
        id_to_token_.push_back(token);
        return id;
    }

    /// True for ids that carry structure rather than content; these are
    /// never masked and never count as maskable positions.
    static bool is_structural(int id) {
        return id == kPad || id == kCls || id == kSep || id == kUsr || id == kSys;
    }

    std::vector<int> encode(const std::string& text) const {
        std::vector<int> ids;
        for (const auto& w : split_words(text)) ids.push_back(id_of(w));
        return ids;
    }

    int min_freq = 1;

    // One token per line, line number = id.
    void save(const std::string& path) const {
        std::ofstream out(path, std::ios::binary);
        if (!out) throw DataError("cannot write vocab file: " + path);
        for (const auto& t : id_to_token_) out << t << "\n";
    }

    static Vocab load(const std::string& path) {
        std::ifstream in(path, std::ios::binary);
        if (!in) throw DataError("cannot read vocab file: " + path);
        Vocab v;
        std::string line;
        int id = 0;
        while (std::getline(in, line)) {
            if (id < kNumReserved) {
                if (line != reserved_tokens()[static_cast<std::size_t>(id)])
                    throw DataError("vocab file " + path + ": reserved token mismatch at line " +
                                    std::to_string(id + 1));
            } else {
                v.add_token(line);
            }
            ++id;
        }
        if (id < kNumReserved) throw DataError("vocab file " + path + ": missing reserved tokens");
        return v;
    }

private:
    std::unordered_map<std::string, int> token_to_id_;
    std::vector<std::string> id_to_token_;
};

}  // namespace boottod
