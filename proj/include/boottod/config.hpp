#pragma once

#include <cstdlib>
#include <fstream>
#include <set>
#include <string>

#include <json.hpp>

#include "boottod/common.hpp"
#include "boottod/encoder.hpp"
#include "boottod/eval.hpp"
#include "boottod/objective.hpp"
#include "boottod/sampler.hpp"
#include "boottod/synthetic.hpp"
#include "boottod/trainer.hpp"

namespace boottod {

/// Resolved run configuration: file values, then environment overrides
/// (BOOTTOD_DATA_DIR, BOOTTOD_OUT_DIR, BOOTTOD_SEED), then flags. The CLI
/// applies flags after from_file/from_env, so flags win. Unknown keys in a
/// config file are rejected.
struct RunConfig {
    std::uint64_t seed = 1;
    std::string data_dir = "data";
    std::string out_dir = "runs/out";

    EncoderConfig encoder;        // vocab_size filled at run time
    SamplerConfig sampler;
    AlignmentConfig alignment;
    TrainConfig train;            // alignment/sampler injected by resolve()
    FinetuneConfig finetune;
    GeneratorConfig generator;
    int vocab_min_freq = 1;
    int eval_pool_size = 100;

    /// Copies the shared sections into the nested configs.
    void resolve() {
        train.alignment = alignment;
        train.sampler = sampler;
        train.seed = seed;
        if (finetune.seed == 0) finetune.seed = seed;
        generator.seed = seed;
    }

    nlohmann::json to_json() const {
        return {
            {"tool_version", kVersion},
            {"seed", seed},
            {"paths", {{"data_dir", data_dir}, {"out_dir", out_dir}}},
            {"encoder",
             {{"num_layers", encoder.num_layers},
              {"hidden_dim", encoder.hidden_dim},
              {"num_heads", encoder.num_heads},
              {"ffn_dim", encoder.ffn_dim},
              {"max_len", encoder.max_len},
              {"dropout_p", encoder.dropout_p}}},
            {"sampler", {{"p_mode", pmode_name(sampler.mode)}, {"p_cap", sampler.cap}}},
            {"alignment",
             {{"k", alignment.alignment_layers},
              {"stop_gradient", alignment.use_stop_gradient},
              {"cls_align", alignment.use_cls_align},
              {"mask_align", alignment.use_mask_align},
              {"mlm", alignment.use_mlm},
              {"predictor", alignment.use_predictor},
              {"distance", alignment.distance == DistanceKind::Squared ? "squared" : "euclidean"},
              {"reduction",
               alignment.reduction == LossReduction::SumPerSample ? "sum" : "mean"},
              {"target_branch_dropout", alignment.target_branch_dropout}}},
            {"train",
             {{"lr", train.lr},
              {"batch_size", train.batch_size},
              {"max_steps", train.max_steps},
              {"eval_every", train.eval_every},
              {"patience", train.patience},
              {"mask_ratio", train.mask_ratio}}},
            {"generator",
             {{"num_intents", generator.num_intents},
              {"user_templates_per_intent", generator.user_templates_per_intent},
              {"system_templates_per_intent", generator.system_templates_per_intent},
              {"num_dialogues", generator.num_dialogues},
              {"min_pairs", generator.min_pairs},
              {"max_pairs", generator.max_pairs},
              {"slot_noise_prob", generator.slot_noise_prob},
              {"second_act_prob", generator.second_act_prob},
              {"num_ood_intents", generator.num_ood_intents},
              {"dev_fraction", generator.dev_fraction},
              {"test_fraction", generator.test_fraction}}},
            {"eval",
             {{"finetune_steps", finetune.steps},
              {"finetune_batch_size", finetune.batch_size},
              {"finetune_lr", finetune.lr},
              {"pool_size", eval_pool_size}}},
            {"vocab_min_freq", vocab_min_freq},
        };
    }

    static PMode parse_pmode(const std::string& s) {
        if (s == "zero" || s == "0") return PMode::Zero;
        if (s == "cap") return PMode::Cap;
        if (s == "all") return PMode::All;
        if (s == "fix") return PMode::Fix;
        throw ConfigError("unknown p-mode '" + s + "' (expected zero|cap|all|fix)");
    }

    void apply_env() {
        if (const char* v = std::getenv("BOOTTOD_DATA_DIR")) data_dir = v;
        if (const char* v = std::getenv("BOOTTOD_OUT_DIR")) out_dir = v;
        if (const char* v = std::getenv("BOOTTOD_SEED")) seed = std::strtoull(v, nullptr, 10);
    }

    void load_file(const std::string& path) {
        std::ifstream in(path);
        if (!in) throw ConfigError("cannot read config file: " + path);
        nlohmann::json j;
        try {
            in >> j;
        } catch (const nlohmann::json::exception& e) {
            throw ConfigError("config file " + path + ": " + e.what());
        }
        apply_json(j, path);
    }

    void apply_json(const nlohmann::json& j, const std::string& origin) {
        auto check_keys = [&](const nlohmann::json& obj, const std::set<std::string>& allowed,
                              const std::string& where) {
            for (auto it = obj.begin(); it != obj.end(); ++it) {
                if (!allowed.count(it.key()))
                    throw ConfigError(origin + ": unknown key '" + it.key() + "' in " + where);
            }
        };
        check_keys(j,
                   {"tool_version", "seed", "paths", "encoder", "sampler", "alignment", "train",
                    "generator", "eval", "vocab_min_freq"},
                   "top level");
        if (j.contains("seed")) seed = j["seed"].get<std::uint64_t>();
        if (j.contains("vocab_min_freq")) vocab_min_freq = j["vocab_min_freq"].get<int>();
        if (j.contains("paths")) {
            check_keys(j["paths"], {"data_dir", "out_dir"}, "paths");
            if (j["paths"].contains("data_dir")) data_dir = j["paths"]["data_dir"];
            if (j["paths"].contains("out_dir")) out_dir = j["paths"]["out_dir"];
        }
        if (j.contains("encoder")) {
            const auto& e = j["encoder"];
            check_keys(e, {"num_layers", "hidden_dim", "num_heads", "ffn_dim", "max_len",
                           "dropout_p"},
                       "encoder");
            if (e.contains("num_layers")) encoder.num_layers = e["num_layers"];
            if (e.contains("hidden_dim")) encoder.hidden_dim = e["hidden_dim"];
            if (e.contains("num_heads")) encoder.num_heads = e["num_heads"];
            if (e.contains("ffn_dim")) encoder.ffn_dim = e["ffn_dim"];
            if (e.contains("max_len")) encoder.max_len = e["max_len"];
            if (e.contains("dropout_p")) encoder.dropout_p = e["dropout_p"];
        }
        if (j.contains("sampler")) {
            const auto& s = j["sampler"];
            check_keys(s, {"p_mode", "p_cap"}, "sampler");
            if (s.contains("p_mode")) sampler.mode = parse_pmode(s["p_mode"]);
            if (s.contains("p_cap")) sampler.cap = s["p_cap"];
        }
        if (j.contains("alignment")) {
            const auto& a = j["alignment"];
            check_keys(a,
                       {"k", "stop_gradient", "cls_align", "mask_align", "mlm", "predictor",
                        "distance", "reduction", "target_branch_dropout"},
                       "alignment");
            if (a.contains("k")) alignment.alignment_layers = a["k"];
            if (a.contains("stop_gradient")) alignment.use_stop_gradient = a["stop_gradient"];
            if (a.contains("cls_align")) alignment.use_cls_align = a["cls_align"];
            if (a.contains("mask_align")) alignment.use_mask_align = a["mask_align"];
            if (a.contains("mlm")) alignment.use_mlm = a["mlm"];
            if (a.contains("predictor")) alignment.use_predictor = a["predictor"];
            if (a.contains("distance")) {
                const std::string dstr = a["distance"];
                if (dstr == "euclidean") alignment.distance = DistanceKind::Euclidean;
                else if (dstr == "squared") alignment.distance = DistanceKind::Squared;
                else throw ConfigError(origin + ": unknown distance '" + dstr + "'");
            }
            if (a.contains("reduction")) {
                const std::string rstr = a["reduction"];
                if (rstr == "mean") alignment.reduction = LossReduction::MeanOverBatch;
                else if (rstr == "sum") alignment.reduction = LossReduction::SumPerSample;
                else throw ConfigError(origin + ": unknown reduction '" + rstr + "'");
            }
            if (a.contains("target_branch_dropout"))
                alignment.target_branch_dropout = a["target_branch_dropout"];
        }
        if (j.contains("train")) {
            const auto& t = j["train"];
            check_keys(t, {"lr", "batch_size", "max_steps", "eval_every", "patience",
                           "mask_ratio"},
                       "train");
            if (t.contains("lr")) train.lr = t["lr"];
            if (t.contains("batch_size")) train.batch_size = t["batch_size"];
            if (t.contains("max_steps")) train.max_steps = t["max_steps"];
            if (t.contains("eval_every")) train.eval_every = t["eval_every"];
            if (t.contains("patience")) train.patience = t["patience"];
            if (t.contains("mask_ratio")) train.mask_ratio = t["mask_ratio"];
        }
        if (j.contains("generator")) {
            const auto& g = j["generator"];
            check_keys(g,
                       {"num_intents", "user_templates_per_intent", "system_templates_per_intent",
                        "num_dialogues", "min_pairs", "max_pairs", "slot_noise_prob",
                        "second_act_prob", "num_ood_intents", "dev_fraction", "test_fraction"},
                       "generator");
            if (g.contains("num_intents")) generator.num_intents = g["num_intents"];
            if (g.contains("user_templates_per_intent"))
                generator.user_templates_per_intent = g["user_templates_per_intent"];
            if (g.contains("system_templates_per_intent"))
                generator.system_templates_per_intent = g["system_templates_per_intent"];
            if (g.contains("num_dialogues")) generator.num_dialogues = g["num_dialogues"];
            if (g.contains("min_pairs")) generator.min_pairs = g["min_pairs"];
            if (g.contains("max_pairs")) generator.max_pairs = g["max_pairs"];
            if (g.contains("slot_noise_prob")) generator.slot_noise_prob = g["slot_noise_prob"];
            if (g.contains("second_act_prob")) generator.second_act_prob = g["second_act_prob"];
            if (g.contains("num_ood_intents")) generator.num_ood_intents = g["num_ood_intents"];
            if (g.contains("dev_fraction")) generator.dev_fraction = g["dev_fraction"];
            if (g.contains("test_fraction")) generator.test_fraction = g["test_fraction"];
        }
        if (j.contains("eval")) {
            const auto& e = j["eval"];
            check_keys(e, {"finetune_steps", "finetune_batch_size", "finetune_lr", "pool_size"},
                       "eval");
            if (e.contains("finetune_steps")) finetune.steps = e["finetune_steps"];
            if (e.contains("finetune_batch_size")) finetune.batch_size = e["finetune_batch_size"];
            if (e.contains("finetune_lr")) finetune.lr = e["finetune_lr"];
            if (e.contains("pool_size")) eval_pool_size = e["pool_size"];
        }
    }

    /// Writes the resolved snapshot (with the tool-version stamp) next to a
    /// command's outputs.
    void write_snapshot(const std::string& dir) const {
        namespace fs = std::filesystem;
        fs::create_directories(dir);
        std::ofstream out(fs::path(dir) / "resolved_config.json");
        if (!out) throw DataError("cannot write resolved config into " + dir);
        out << to_json().dump(2) << "\n";
    }
};

}  // namespace boottod
