#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "boottod/encoder.hpp"

using namespace boottod;

namespace {

EncoderConfig tiny_config(int layers = 2, int d = 32, int heads = 4, int vocab = 24) {
    EncoderConfig cfg;
    cfg.num_layers = layers;
    cfg.hidden_dim = d;
    cfg.num_heads = heads;
    cfg.ffn_dim = 2 * d;
    cfg.max_len = 16;
    cfg.dropout_p = 0.0;
    cfg.vocab_size = vocab;
    return cfg;
}

std::vector<std::vector<std::uint8_t>> full_mask(std::size_t batch, std::size_t seq) {
    return std::vector<std::vector<std::uint8_t>>(batch,
                                                  std::vector<std::uint8_t>(seq, 1));
}

}  // namespace

TEST_CASE("encode returns L+1 states with the right shapes") {
    auto cfg = tiny_config(2, 32, 4);
    auto w = EncoderWeights::init(cfg, 1);
    std::vector<std::vector<int>> ids(2, std::vector<int>(10, 7));
    auto st = encode(w, ids, full_mask(2, 10), false);
    REQUIRE(st.states.size() == 3);
    for (const auto& s : st.states) {
        REQUIRE(s.shape() == Shape{2, 10, 32});
    }
}

TEST_CASE("encode is deterministic in eval mode") {
    auto cfg = tiny_config();
    auto w = EncoderWeights::init(cfg, 3);
    std::vector<std::vector<int>> ids = {{2, 5, 7, 8, 3}, {2, 5, 9, 10, 3}};
    auto a = encode(w, ids, full_mask(2, 5), false);
    auto b = encode(w, ids, full_mask(2, 5), false);
    for (std::size_t l = 0; l < a.states.size(); ++l)
        for (std::size_t i = 0; i < a.states[l].numel(); ++i)
            REQUIRE(a.states[l].data()[i] == b.states[l].data()[i]);
}

TEST_CASE("encode validates ids and lengths") {
    auto cfg = tiny_config();
    auto w = EncoderWeights::init(cfg, 3);
    std::vector<std::vector<int>> bad_id = {{2, 99, 3}};
    CHECK_THROWS_AS(encode(w, bad_id, full_mask(1, 3), false), DataError);
    std::vector<std::vector<int>> too_long(1, std::vector<int>(cfg.max_len + 1, 7));
    CHECK_THROWS_AS(encode(w, too_long, full_mask(1, cfg.max_len + 1), false), DataError);
    std::vector<std::vector<int>> ragged = {{2, 5, 3}, {2, 3}};
    CHECK_THROWS_AS(encode(w, ragged, full_mask(2, 3), false), ShapeError);
}

TEST_CASE("padding invariance: masked-out [PAD] positions do not perturb outputs") {
    auto cfg = tiny_config();
    auto w = EncoderWeights::init(cfg, 11);
    std::vector<int> base = {2, 7, 8, 9, 10, 3};
    std::vector<std::vector<int>> unpadded = {base};
    auto st_unpadded = encode(w, unpadded, full_mask(1, 6), false);

    std::vector<int> padded = base;
    padded.resize(10, 0);  // [PAD]
    std::vector<std::uint8_t> mask(10, 0);
    for (std::size_t i = 0; i < 6; ++i) mask[i] = 1;
    auto st_padded = encode(w, {padded}, {mask}, false);

    for (std::size_t l = 0; l < st_unpadded.states.size(); ++l) {
        for (std::size_t s = 0; s < 6; ++s) {
            for (std::size_t c = 0; c < 32; ++c) {
                const double a = st_unpadded.states[l].at(s, c);
                const double b = st_padded.states[l].at(s, c);
                REQUIRE(std::abs(a - b) < 1e-10);
            }
        }
    }
}

TEST_CASE("permuting batch order permutes outputs identically") {
    auto cfg = tiny_config();
    auto w = EncoderWeights::init(cfg, 5);
    std::vector<std::vector<int>> ids = {{2, 7, 8, 3}, {2, 9, 10, 3}, {2, 11, 12, 3}};
    auto st = encode(w, ids, full_mask(3, 4), false);
    std::vector<std::vector<int>> perm = {ids[2], ids[0], ids[1]};
    auto stp = encode(w, perm, full_mask(3, 4), false);
    const std::size_t row = 4 * 32;
    for (std::size_t l = 0; l < st.states.size(); ++l) {
        auto orig = st.states[l].data();
        auto permuted = stp.states[l].data();
        for (std::size_t i = 0; i < row; ++i) {
            REQUIRE(permuted[0 * row + i] == orig[2 * row + i]);
            REQUIRE(permuted[1 * row + i] == orig[0 * row + i]);
            REQUIRE(permuted[2 * row + i] == orig[1 * row + i]);
        }
    }
}

TEST_CASE("dropout draws only in train mode and changes activations") {
    auto cfg = tiny_config();
    cfg.dropout_p = 0.2;
    auto w = EncoderWeights::init(cfg, 5);
    std::vector<std::vector<int>> ids = {{2, 7, 8, 3}};
    Rng rng(1);
    auto train_st = encode(w, ids, full_mask(1, 4), true, &rng);
    auto eval_st = encode(w, ids, full_mask(1, 4), false);
    double diff = 0.0;
    for (std::size_t i = 0; i < train_st.top().numel(); ++i)
        diff += std::abs(train_st.top().data()[i] - eval_st.top().data()[i]);
    CHECK(diff > 1e-6);
    CHECK_THROWS_AS(encode(w, ids, full_mask(1, 4), true, nullptr), ConfigError);
}

TEST_CASE("encode is differentiable end-to-end (1-layer, d=8)") {
    auto cfg = tiny_config(1, 8, 2, 16);
    auto w = EncoderWeights::init(cfg, 7);
    std::vector<std::vector<int>> ids = {{2, 7, 9, 3}};
    auto mask = full_mask(1, 4);

    // probe multiplies the output so the check exercises the whole stack
    Rng rng(3);
    Tensor probe = Tensor::randn({1, 4, 8}, rng, 0.5);

    // substitute the candidate tensor for one parameter handle at a time
    auto check_param = [&](Tensor& slot) {
        Tensor original = slot;
        auto f = [&](const Tensor& t) {
            slot = t;
            Tensor out = mean_all(mul(encode(w, ids, mask, false).top(), probe));
            slot = original;
            return out;
        };
        const double err = grad_check(f, original, 1e-5);
        CHECK(err < 1e-4);
    };
    check_param(w.tok_emb);
    check_param(w.pos_emb);
    check_param(w.layers[0].wq);
    check_param(w.layers[0].wk);
    check_param(w.layers[0].wv);
    check_param(w.layers[0].wo);
    check_param(w.layers[0].w1);
    check_param(w.layers[0].w2);
    check_param(w.layers[0].ln1_gain);
    check_param(w.layers[0].ln2_bias);
}

TEST_CASE("cls_embeddings picks position-0 rows of the top state") {
    auto cfg = tiny_config();
    auto w = EncoderWeights::init(cfg, 9);
    std::vector<std::vector<int>> ids = {{2, 7, 8, 3}, {2, 9, 10, 3}};
    auto st = encode(w, ids, full_mask(2, 4), false);
    Tensor cls = cls_embeddings(st);
    REQUIRE(cls.shape() == Shape{2, 32});
    std::vector<std::size_t> idx = {0, 4};
    Tensor manual = gather_rows(st.top(), idx);
    for (std::size_t i = 0; i < cls.numel(); ++i) REQUIRE(cls.data()[i] == manual.data()[i]);
}
