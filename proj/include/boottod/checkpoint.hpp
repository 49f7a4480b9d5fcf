#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "boottod/common.hpp"
#include "boottod/objective.hpp"
#include "boottod/sha256.hpp"
#include "boottod/vocab.hpp"

namespace boottod {

// Checkpoint directory layout:
//   manifest.json  — format version, config snapshot, step, metrics,
//                    parameter table, SHA-256 of params.bin
//   params.bin     — all parameters as little-endian float32, in
//                    named_params() order
//   vocab.txt      — the tokenizer table, so a checkpoint is self-contained

inline constexpr int kCheckpointFormatVersion = 1;

namespace detail {

inline void append_f32_le(std::string& out, float v) {
    std::uint32_t bits;
    std::memcpy(&bits, &v, 4);
    out.push_back(static_cast<char>(bits & 0xFF));
    out.push_back(static_cast<char>((bits >> 8) & 0xFF));
    out.push_back(static_cast<char>((bits >> 16) & 0xFF));
    out.push_back(static_cast<char>((bits >> 24) & 0xFF));
}

inline float read_f32_le(const std::string& buf, std::size_t off) {
    std::uint32_t bits = (static_cast<std::uint32_t>(static_cast<unsigned char>(buf[off]))) |
                         (static_cast<std::uint32_t>(static_cast<unsigned char>(buf[off + 1])) << 8) |
                         (static_cast<std::uint32_t>(static_cast<unsigned char>(buf[off + 2])) << 16) |
                         (static_cast<std::uint32_t>(static_cast<unsigned char>(buf[off + 3])) << 24);
    float v;
    std::memcpy(&v, &bits, 4);
    return v;
}

inline nlohmann::json encoder_config_json(const EncoderConfig& c) {
    return {{"num_layers", c.num_layers}, {"hidden_dim", c.hidden_dim},
            {"num_heads", c.num_heads},   {"ffn_dim", c.ffn_dim},
            {"max_len", c.max_len},       {"dropout_p", c.dropout_p},
            {"vocab_size", c.vocab_size}, {"ln_eps", c.ln_eps}};
}

inline EncoderConfig encoder_config_from_json(const nlohmann::json& j) {
    EncoderConfig c;
    c.num_layers = j.at("num_layers").get<int>();
    c.hidden_dim = j.at("hidden_dim").get<int>();
    c.num_heads = j.at("num_heads").get<int>();
    c.ffn_dim = j.at("ffn_dim").get<int>();
    c.max_len = j.at("max_len").get<int>();
    c.dropout_p = j.at("dropout_p").get<double>();
    c.vocab_size = j.at("vocab_size").get<int>();
    c.ln_eps = j.at("ln_eps").get<double>();
    return c;
}

}  // namespace detail

inline void save_checkpoint(const Model& model, const Vocab& vocab, std::int64_t step,
                            const std::map<std::string, double>& metrics,
                            const std::string& dir) {
    namespace fs = std::filesystem;
    fs::create_directories(dir);

    std::string blob;
    nlohmann::json param_table = nlohmann::json::array();
    for (const auto& [name, t] : model.named_params()) {
        param_table.push_back({{"name", name}, {"shape", t.shape()}});
        for (double v : t.data()) detail::append_f32_le(blob, static_cast<float>(v));
    }
    {
        std::ofstream out(fs::path(dir) / "params.bin", std::ios::binary);
        if (!out) throw DataError("cannot write checkpoint params: " + dir);
        out.write(blob.data(), static_cast<std::streamsize>(blob.size()));
    }
    vocab.save((fs::path(dir) / "vocab.txt").string());

    nlohmann::json manifest = {
        {"format_version", kCheckpointFormatVersion},
        {"kind", "boottod-checkpoint"},
        {"tool_version", kVersion},
        {"step", step},
        {"metrics", metrics},
        {"encoder_config", detail::encoder_config_json(model.encoder.config)},
        {"params", param_table},
        {"params_sha256", Sha256::hex_of(blob)},
        {"vocab_file", "vocab.txt"},
    };
    std::ofstream out(fs::path(dir) / "manifest.json");
    if (!out) throw DataError("cannot write checkpoint manifest: " + dir);
    out << manifest.dump(2) << "\n";
}

struct LoadedCheckpoint {
    Model model;
    Vocab vocab;
    nlohmann::json manifest;
};

inline LoadedCheckpoint load_checkpoint(const std::string& dir) {
    namespace fs = std::filesystem;
    std::ifstream min(fs::path(dir) / "manifest.json");
    if (!min) throw DataError("cannot read checkpoint manifest in " + dir);
    nlohmann::json manifest;
    try {
        min >> manifest;
    } catch (const nlohmann::json::exception& e) {
        throw DataError("corrupt checkpoint manifest in " + dir + ": " + e.what());
    }
    const int version = manifest.value("format_version", -1);
    if (version != kCheckpointFormatVersion)
        throw DataError("checkpoint format_version " + std::to_string(version) +
                        " not supported (expected " + std::to_string(kCheckpointFormatVersion) +
                        ")");

    std::string blob;
    {
        std::ifstream in(fs::path(dir) / "params.bin", std::ios::binary);
        if (!in) throw DataError("cannot read checkpoint params in " + dir);
        std::ostringstream ss;
        ss << in.rdbuf();
        blob = ss.str();
    }
    const std::string expect_sha = manifest.at("params_sha256").get<std::string>();
    const std::string got_sha = Sha256::hex_of(blob);
    if (got_sha != expect_sha)
        throw DataError("checkpoint checksum mismatch in " + dir + " (file truncated or corrupt)");

    LoadedCheckpoint out;
    out.manifest = manifest;
    out.vocab = Vocab::load(
        (fs::path(dir) / manifest.value("vocab_file", std::string("vocab.txt"))).string());

    EncoderConfig cfg = detail::encoder_config_from_json(manifest.at("encoder_config"));
    out.model = Model::init(cfg, 0);

    std::size_t off = 0;
    auto params = out.model.named_params();
    const auto& table = manifest.at("params");
    if (table.size() != params.size())
        throw DataError("checkpoint parameter table does not match this model layout");
    for (std::size_t i = 0; i < params.size(); ++i) {
        auto& [name, t] = params[i];
        if (table[i].at("name").get<std::string>() != name)
            throw DataError("checkpoint parameter order mismatch at '" + name + "'");
        auto data = t.mutable_data();
        if (off + 4 * data.size() > blob.size())
            throw DataError("checkpoint params.bin too short (truncated?)");
        for (std::size_t k = 0; k < data.size(); ++k) {
            data[k] = static_cast<double>(detail::read_f32_le(blob, off));
            off += 4;
        }
    }
    if (off != blob.size()) throw DataError("checkpoint params.bin has trailing bytes");
    return out;
}

}  // namespace boottod
