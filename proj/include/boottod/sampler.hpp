#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "boottod/common.hpp"
#include "boottod/dialogue.hpp"
#include "boottod/rng.hpp"
#include "boottod/vocab.hpp"

namespace boottod {

/// Response-target length policy. Candidate targets are the odd-length
/// prefixes of the future utterances {S_t, U_{t+1}, S_{t+1}, ...}; every
/// candidate ends with a system utterance.
///   Zero    — no response appended (context-only alignment)
///   Cap(k)  — uniform over candidates of length <= k
///   All     — uniform over all candidates
///   Fix     — always the full remainder
enum class PMode { Zero, Cap, All, Fix };

inline const char* pmode_name(PMode m) {
    switch (m) {
        case PMode::Zero: return "zero";
        case PMode::Cap: return "cap";
        case PMode::All: return "all";
        case PMode::Fix: return "fix";
    }
    return "?";
}

struct SamplerConfig {
    PMode mode = PMode::All;
    int cap = 3;  // only used by Cap

    void validate() const {
        if (mode == PMode::Cap && cap < 1) throw ConfigError("sampler: Cap(k) requires k >= 1");
    }
};

/// One pre-training instance. context_ids ends [USR] tok(U_t) [SEP];
/// full_ids is context_ids with the trailing [SEP] replaced by the sampled
/// response utterances and a new [SEP], so the two streams share every
/// position up to the context's terminator (and are identical in mode Zero).
struct SplitSample {
    std::vector<int> context_ids;
    std::vector<int> full_ids;
    int split_turn = 1;          // t, 1-based
    int response_len_utts = 0;   // odd, or 0 in mode Zero
    PMode mode = PMode::All;
    bool truncated = false;

    // Token counts per serialized utterance (role token included); kept so
    // truncation can drop whole utterances.
    std::vector<int> ctx_utt_sizes;
    std::vector<int> resp_utt_sizes;
};

/// Number of utterances to append given `future` available ones (odd count
/// starting at S_t). Exposed separately so the distribution laws can be
/// checked without tokenizing.
inline int sample_response_length(std::size_t future, const SamplerConfig& cfg, Rng& rng) {
    cfg.validate();
    switch (cfg.mode) {
        case PMode::Zero:
            return 0;
        case PMode::Cap:
        case PMode::All: {
            std::size_t max_len = future;
            if (cfg.mode == PMode::Cap)
                max_len = std::min<std::size_t>(future, static_cast<std::size_t>(cfg.cap));
            // odd lengths 1, 3, ..., <= max_len
            const std::size_t num_candidates = (max_len + 1) / 2;
            return static_cast<int>(2 * rng.index(num_candidates) + 1);
        }
        case PMode::Fix:
            return static_cast<int>(future);
    }
    return 0;
}

inline SplitSample split_and_sample(const Dialogue& d, const SamplerConfig& cfg, const Vocab& vocab,
                                    Rng& rng) {
    d.validate();
    const std::size_t n = d.num_pairs();
    const int t = 1 + static_cast<int>(rng.index(n));
    const std::size_t ctx_utts = 2 * (static_cast<std::size_t>(t) - 1) + 1;
    const std::size_t future = d.turns.size() - ctx_utts;  // |{S_t, ..., S_n}|, odd

    SplitSample s;
    s.split_turn = t;
    s.response_len_utts = sample_response_length(future, cfg, rng);
    s.mode = cfg.mode;
    s.context_ids = serialize_prefix(d, ctx_utts, vocab);
    s.full_ids =
        serialize_prefix(d, ctx_utts + static_cast<std::size_t>(s.response_len_utts), vocab);
    for (std::size_t i = 0; i < ctx_utts + static_cast<std::size_t>(s.response_len_utts); ++i) {
        const int sz = 1 + static_cast<int>(vocab.encode(d.turns[i].text).size());
        if (i < ctx_utts) s.ctx_utt_sizes.push_back(sz);
        else s.resp_utt_sizes.push_back(sz);
    }
    return s;
}

/// Length control: drop whole utterances from the oldest end of the context
/// (keeping [CLS] and at least the final context utterance), then trim the
/// response tail (two utterances at a time so it still ends with a system
/// one), then hard-truncate tokens as a last resort.
inline void truncate_sample(SplitSample& s, std::size_t max_len) {
    if (max_len < 8) throw ConfigError("truncate_sample: max_len must be >= 8");
    auto full_len = [&] { return s.full_ids.size(); };
    auto drop_front_utt = [&] {
        const int sz = s.ctx_utt_sizes.front();
        s.ctx_utt_sizes.erase(s.ctx_utt_sizes.begin());
        s.context_ids.erase(s.context_ids.begin() + 1, s.context_ids.begin() + 1 + sz);
        s.full_ids.erase(s.full_ids.begin() + 1, s.full_ids.begin() + 1 + sz);
        s.truncated = true;
    };
    while (full_len() > max_len && s.ctx_utt_sizes.size() > 1) drop_front_utt();
    while (full_len() > max_len && !s.resp_utt_sizes.empty()) {
        const std::size_t drop = s.resp_utt_sizes.size() >= 3 ? 2 : s.resp_utt_sizes.size();
        for (std::size_t k = 0; k < drop; ++k) {
            const int sz = s.resp_utt_sizes.back();
            s.resp_utt_sizes.pop_back();
            // erase the utterance just before the final [SEP]
            s.full_ids.erase(s.full_ids.end() - 1 - sz, s.full_ids.end() - 1);
        }
        s.response_len_utts = static_cast<int>(s.resp_utt_sizes.size());
        s.truncated = true;
    }
    if (full_len() > max_len) {
        // single oversized utterance: cut tokens ahead of the terminator
        const std::size_t excess = full_len() - max_len;
        s.full_ids.erase(s.full_ids.end() - 1 - excess, s.full_ids.end() - 1);
        if (s.context_ids.size() > max_len) {
            const std::size_t cexcess = s.context_ids.size() - max_len;
            s.context_ids.erase(s.context_ids.end() - 1 - cexcess, s.context_ids.end() - 1);
        }
        s.ctx_utt_sizes.back() -= static_cast<int>(excess);
        s.truncated = true;
    }
    // With no response the streams must stay identical.
    if (s.resp_utt_sizes.empty() && s.full_ids != s.context_ids) s.context_ids = s.full_ids;
}

// --------------------------------------------------------------------------
// masking
// --------------------------------------------------------------------------

struct MaskedExample {
    std::vector<int> masked_ids;
    std::vector<std::size_t> mask_positions;  // ascending
    std::vector<int> mlm_labels;              // originals, aligned 1:1
    bool no_maskable = false;
};

/// Replaces round(ratio * #maskable) content tokens with [MASK] (minimum 1
/// when any maskable token exists). Structural tokens are never touched.
inline MaskedExample apply_masking(const std::vector<int>& context_ids, double ratio, Rng& rng) {
    if (ratio <= 0.0 || ratio >= 1.0) throw ConfigError("mask ratio must be in (0, 1)");
    MaskedExample out;
    out.masked_ids = context_ids;
    std::vector<std::size_t> maskable;
    for (std::size_t i = 0; i < context_ids.size(); ++i)
        if (!Vocab::is_structural(context_ids[i])) maskable.push_back(i);
    if (maskable.empty()) {
        out.no_maskable = true;
        return out;
    }
    std::size_t count = static_cast<std::size_t>(
        std::floor(ratio * static_cast<double>(maskable.size()) + 0.5));
    if (count == 0) count = 1;
    if (count > maskable.size()) count = maskable.size();
    for (std::size_t pick : rng.sample_without_replacement(maskable.size(), count)) {
        const std::size_t pos = maskable[pick];
        out.mask_positions.push_back(pos);
        out.mlm_labels.push_back(context_ids[pos]);
        out.masked_ids[pos] = Vocab::kMask;
    }
    return out;
}

// --------------------------------------------------------------------------
// batch assembly
// --------------------------------------------------------------------------

/// Two padded input streams plus the mask bookkeeping for one batch. Masks
/// are applied to the context stream only; the full stream keeps original
/// tokens everywhere.
struct MaskedBatch {
    std::vector<std::vector<int>> ctx_ids;   // masked + padded to ctx_max
    std::vector<std::vector<int>> full_ids;  // padded to full_max
    std::vector<std::size_t> ctx_len;
    std::vector<std::size_t> full_len;
    std::size_t ctx_max = 0;
    std::size_t full_max = 0;
    std::vector<std::pair<std::size_t, std::size_t>> mask_positions;  // (example, position)
    std::vector<int> mlm_labels;
    bool any_empty_mask = false;

    std::size_t batch_size() const { return ctx_ids.size(); }

    std::vector<std::vector<std::uint8_t>> ctx_attn_mask() const { return attn(ctx_len, ctx_max); }
    std::vector<std::vector<std::uint8_t>> full_attn_mask() const {
        return attn(full_len, full_max);
    }

private:
    static std::vector<std::vector<std::uint8_t>> attn(const std::vector<std::size_t>& lens,
                                                       std::size_t width) {
        std::vector<std::vector<std::uint8_t>> m;
        m.reserve(lens.size());
        for (auto len : lens) {
            std::vector<std::uint8_t> row(width, 0);
            for (std::size_t i = 0; i < len; ++i) row[i] = 1;
            m.push_back(std::move(row));
        }
        return m;
    }
};

inline MaskedBatch make_pretrain_batch(std::vector<SplitSample> samples, double mask_ratio,
                                       std::size_t max_len, Rng& rng) {
    if (samples.empty()) throw DataError("make_pretrain_batch: empty batch");
    MaskedBatch b;
    for (auto& s : samples) {
        truncate_sample(s, max_len);
        MaskedExample m = apply_masking(s.context_ids, mask_ratio, rng);
        if (m.no_maskable) b.any_empty_mask = true;
        const std::size_t ex = b.ctx_ids.size();
        for (std::size_t i = 0; i < m.mask_positions.size(); ++i) {
            b.mask_positions.emplace_back(ex, m.mask_positions[i]);
            b.mlm_labels.push_back(m.mlm_labels[i]);
        }
        b.ctx_len.push_back(m.masked_ids.size());
        b.full_len.push_back(s.full_ids.size());
        b.ctx_ids.push_back(std::move(m.masked_ids));
        b.full_ids.push_back(std::move(s.full_ids));
    }
    b.ctx_max = *std::max_element(b.ctx_len.begin(), b.ctx_len.end());
    b.full_max = *std::max_element(b.full_len.begin(), b.full_len.end());
    for (auto& row : b.ctx_ids) row.resize(b.ctx_max, Vocab::kPad);
    for (auto& row : b.full_ids) row.resize(b.full_max, Vocab::kPad);
    return b;
}

}  // namespace boottod
