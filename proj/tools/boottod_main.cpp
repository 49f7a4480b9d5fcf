// boottod — self-bootstrapping dialogue-representation pre-training at desk
// scale: corpus generation, pre-training, fine-tuning, evaluation, and the
// ablation/sweep harness. One command per process; all runs are pure
// functions of (data, config, seed).

#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "boottod/checkpoint.hpp"
#include "boottod/config.hpp"
#include "boottod/eval.hpp"
#include "boottod/sha256.hpp"
#include "boottod/synthetic.hpp"
#include "boottod/trainer.hpp"

namespace fs = std::filesystem;
using namespace boottod;

namespace {

// Exit codes are a stable scripting contract:
//   0 success, 1 usage/config error, 2 data error, 3 numerical failure.
constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitData = 2;
constexpr int kExitNumeric = 3;

std::string file_sha256(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot read " + path.string());
    Sha256 h;
    char buf[65536];
    while (in.read(buf, sizeof(buf)) || in.gcount() > 0)
        h.update(buf, static_cast<std::size_t>(in.gcount()));
    return h.hex_digest();
}

struct CorpusOnDisk {
    std::vector<Dialogue> train, dev, test;
    std::vector<DialogueLabels> train_labels, dev_labels, test_labels;
    std::vector<std::string> intents, ood_intents, acts;
};

CorpusOnDisk load_data_dir(const std::string& dir) {
    CorpusOnDisk c;
    c.train = load_corpus((fs::path(dir) / "train.jsonl").string());
    c.dev = load_corpus((fs::path(dir) / "dev.jsonl").string());
    c.test = load_corpus((fs::path(dir) / "test.jsonl").string());
    c.train_labels = load_labels((fs::path(dir) / "train_labels.jsonl").string());
    c.dev_labels = load_labels((fs::path(dir) / "dev_labels.jsonl").string());
    c.test_labels = load_labels((fs::path(dir) / "test_labels.jsonl").string());
    std::ifstream meta(fs::path(dir) / "corpus_meta.json");
    if (meta) {
        nlohmann::json j;
        meta >> j;
        c.intents = j.value("intents", std::vector<std::string>{});
        c.ood_intents = j.value("ood_intents", std::vector<std::string>{});
        c.acts = j.value("acts", std::vector<std::string>{});
    }
    return c;
}

// --------------------------------------------------------------------------
// gen-corpus
// --------------------------------------------------------------------------

int cmd_gen_corpus(const RunConfig& cfg) {
    auto corpus = generate_synthetic_corpus(cfg.generator);
    fs::create_directories(cfg.out_dir);
    const fs::path out(cfg.out_dir);

    write_corpus((out / "train.jsonl").string(), corpus.train);
    write_corpus((out / "dev.jsonl").string(), corpus.dev);
    write_corpus((out / "test.jsonl").string(), corpus.test);
    write_labels((out / "train_labels.jsonl").string(), corpus.train_labels);
    write_labels((out / "dev_labels.jsonl").string(), corpus.dev_labels);
    write_labels((out / "test_labels.jsonl").string(), corpus.test_labels);

    nlohmann::json meta = {{"intents", corpus.intent_names},
                           {"ood_intents", corpus.ood_intents},
                           {"acts", corpus.act_names}};
    {
        std::ofstream m(out / "corpus_meta.json");
        m << meta.dump(2) << "\n";
    }

    nlohmann::json manifest = {{"tool_version", kVersion}, {"files", nlohmann::json::object()}};
    for (const char* name : {"train.jsonl", "dev.jsonl", "test.jsonl", "train_labels.jsonl",
                             "dev_labels.jsonl", "test_labels.jsonl", "corpus_meta.json"})
        manifest["files"][name] = file_sha256(out / name);
    {
        std::ofstream m(out / "manifest.json");
        m << manifest.dump(2) << "\n";
    }
    cfg.write_snapshot(cfg.out_dir);
    std::cout << "wrote corpus (" << corpus.train.size() << " train / " << corpus.dev.size()
              << " dev / " << corpus.test.size() << " test) to " << cfg.out_dir << "\n";
    return kExitOk;
}

// --------------------------------------------------------------------------
// pretrain
// --------------------------------------------------------------------------

int cmd_pretrain(RunConfig cfg) {
    auto data = load_data_dir(cfg.data_dir);
    if (data.train.empty()) throw DataError("pretrain: empty training corpus");
    Vocab vocab = build_vocab(data.train, cfg.vocab_min_freq);
    cfg.encoder.vocab_size = vocab.size();

    fs::create_directories(cfg.out_dir);
    cfg.write_snapshot(cfg.out_dir);

    std::ofstream log_stream(fs::path(cfg.out_dir) / "log.jsonl");
    if (!log_stream) throw DataError("cannot write training log in " + cfg.out_dir);

    TrainResult res = train(data.train, data.dev, vocab, cfg.encoder, cfg.train, &log_stream);
    if (!res.warning.empty()) std::cerr << res.warning << "\n";

    const std::string ckpt_dir = (fs::path(cfg.out_dir) / "checkpoint").string();
    save_checkpoint(res.best, vocab, res.best_eval_step, {{"dev_ppl", res.best_ppl}}, ckpt_dir);
    std::cout << "pretrained " << res.stop_step << " steps; best dev perplexity " << res.best_ppl
              << " at step " << res.best_eval_step << "; checkpoint in " << ckpt_dir << "\n";
    return kExitOk;
}

// --------------------------------------------------------------------------
// finetune / eval
// --------------------------------------------------------------------------

struct TaskRun {
    MetricsReport report;
    std::optional<Model> finetuned;  // present for tasks that produce one
};

TaskRun run_task(const std::string& task, const Model& model, const Vocab& vocab,
                 const CorpusOnDisk& data, const RunConfig& cfg) {
    TaskRun out;
    if (task == "intent") {
        out.report = finetune_intent(model, vocab, data.train, data.train_labels, data.test,
                                     data.test_labels, data.ood_intents, cfg.finetune);
    } else if (task == "act") {
        std::vector<std::string> acts = data.acts;
        if (acts.empty()) {
            std::set<std::string> seen;
            for (const auto* ls : {&data.train_labels, &data.dev_labels, &data.test_labels})
                for (const auto& l : *ls)
                    for (const auto& turn : l.acts)
                        for (const auto& a : turn) seen.insert(a);
            acts.assign(seen.begin(), seen.end());
        }
        out.report = finetune_dialogue_act(model, vocab, data.train, data.train_labels, data.test,
                                           data.test_labels, acts, cfg.finetune);
    } else if (task == "response-selection") {
        Model tuned = finetune_response_selection(model, vocab, data.train, cfg.finetune);
        out.report = response_selection_eval(tuned, vocab, data.test,
                                             static_cast<std::size_t>(cfg.eval_pool_size), {1, 3},
                                             cfg.finetune.seed);
        out.finetuned = std::move(tuned);
    } else {
        throw ConfigError("unknown task '" + task + "' (expected intent|act|response-selection)");
    }
    return out;
}

int cmd_finetune_eval(RunConfig cfg, const std::string& task, const std::string& checkpoint,
                      bool random_init, bool save_finetuned) {
    auto data = load_data_dir(cfg.data_dir);

    Model model;
    Vocab vocab;
    if (random_init) {
        vocab = build_vocab(data.train, cfg.vocab_min_freq);
        cfg.encoder.vocab_size = vocab.size();
        model = Model::init(cfg.encoder, cfg.seed);
    } else {
        if (checkpoint.empty())
            throw ConfigError("either --checkpoint or --random-init is required");
        auto loaded = load_checkpoint(checkpoint);
        model = std::move(loaded.model);
        vocab = std::move(loaded.vocab);
        cfg.encoder = model.encoder.config;
    }

    TaskRun run = run_task(task, model, vocab, data, cfg);
    run.report.metadata["checkpoint"] = random_init ? std::string("random-init") : checkpoint;

    fs::create_directories(cfg.out_dir);
    cfg.write_snapshot(cfg.out_dir);
    const std::string base = (fs::path(cfg.out_dir) / ("report_" + task)).string();
    run.report.save(base);
    if (save_finetuned && run.finetuned) {
        save_checkpoint(*run.finetuned, vocab, 0, {}, (fs::path(cfg.out_dir) / "finetuned").string());
    }
    std::cout << run.report.to_csv();
    return kExitOk;
}

// --------------------------------------------------------------------------
// ablate
// --------------------------------------------------------------------------

struct AblationCell {
    std::string name;
    RunConfig cfg;
};

std::vector<AblationCell> build_cells(const std::string& axis, const std::string& values,
                                      const RunConfig& base) {
    std::vector<AblationCell> cells;
    auto push = [&](const std::string& name, auto mutate) {
        AblationCell c{name, base};
        mutate(c.cfg);
        cells.push_back(std::move(c));
    };
    if (axis == "components") {
        push("full", [](RunConfig&) {});
        push("w/o-mask-align", [](RunConfig& c) { c.alignment.use_mask_align = false; });
        push("w/o-cls-align", [](RunConfig& c) { c.alignment.use_cls_align = false; });
        push("w/o-stop-gradient", [](RunConfig& c) { c.alignment.use_stop_gradient = false; });
        push("w/o-mlp-head", [](RunConfig& c) { c.alignment.use_predictor = false; });
        if (!values.empty()) throw ConfigError("--values is not used with --axis components");
        return cells;
    }
    std::vector<std::string> items;
    {
        std::string v = values;
        while (!v.empty()) {
            auto pos = v.find(',');
            items.push_back(v.substr(0, pos));
            if (pos == std::string::npos) break;
            v = v.substr(pos + 1);
        }
    }
    if (axis == "p") {
        if (items.empty()) items = {"0", "3", "all", "fix"};
        for (const auto& item : items) {
            push("p=" + item, [&](RunConfig& c) {
                if (item == "0" || item == "zero") {
                    c.sampler.mode = PMode::Zero;
                } else if (item == "all") {
                    c.sampler.mode = PMode::All;
                } else if (item == "fix") {
                    c.sampler.mode = PMode::Fix;
                } else {
                    c.sampler.mode = PMode::Cap;
                    c.sampler.cap = std::stoi(item);
                }
            });
        }
        return cells;
    }
    if (axis == "k") {
        if (items.empty())
            for (int k = 1; k <= base.encoder.num_layers; ++k) items.push_back(std::to_string(k));
        for (const auto& item : items)
            push("k=" + item,
                 [&](RunConfig& c) { c.alignment.alignment_layers = std::stoi(item); });
        return cells;
    }
    throw ConfigError("unknown ablation axis '" + axis + "' (expected components|p|k)");
}

int cmd_ablate(RunConfig base, const std::string& axis, const std::string& values) {
    auto data = load_data_dir(base.data_dir);
    Vocab vocab = build_vocab(data.train, base.vocab_min_freq);

    fs::create_directories(base.out_dir);
    base.write_snapshot(base.out_dir);
    auto cells = build_cells(axis, values, base);

    const fs::path csv_path = fs::path(base.out_dir) / ("ablate_" + axis + ".csv");
    std::ofstream csv(csv_path);
    if (!csv) throw DataError("cannot write " + csv_path.string());
    csv << "config,act_micro_f1,act_macro_f1,rs_1_to_100,rs_3_to_100\n";
    csv.flush();

    for (auto& cell : cells) {
        RunConfig cfg = cell.cfg;
        cfg.encoder.vocab_size = vocab.size();
        cfg.resolve();
        TrainResult res = train(data.train, data.dev, vocab, cfg.encoder, cfg.train);
        if (!res.warning.empty()) std::cerr << cell.name << ": " << res.warning << "\n";

        TaskRun act = run_task("act", res.best, vocab, data, cfg);
        TaskRun rs = run_task("response-selection", res.best, vocab, data, cfg);

        csv << cell.name << "," << nlohmann::json(act.report.get("micro_f1")).dump() << ","
            << nlohmann::json(act.report.get("macro_f1")).dump() << ","
            << nlohmann::json(rs.report.get("1_to_100")).dump() << ","
            << nlohmann::json(rs.report.get("3_to_100")).dump() << "\n";
        csv.flush();  // partial results survive an interrupted sweep
        std::cout << "completed cell " << cell.name << "\n";
    }
    std::cout << "ablation table: " << csv_path.string() << "\n";
    return kExitOk;
}

// --------------------------------------------------------------------------
// inspect-checkpoint
// --------------------------------------------------------------------------

int cmd_inspect(const std::string& checkpoint) {
    auto loaded = load_checkpoint(checkpoint);
    nlohmann::json& m = loaded.manifest;
    std::cout << "kind:           " << m.value("kind", std::string("?")) << "\n";
    std::cout << "format_version: " << m.value("format_version", -1) << "\n";
    std::cout << "tool_version:   " << m.value("tool_version", std::string("?")) << "\n";
    std::cout << "step:           " << m.value("step", -1) << "\n";
    if (m.contains("metrics"))
        for (auto it = m["metrics"].begin(); it != m["metrics"].end(); ++it)
            std::cout << "metric " << it.key() << " = " << it.value() << "\n";
    std::cout << "vocab size:     " << loaded.vocab.size() << "\n";
    std::size_t total = 0;
    for (const auto& [name, t] : loaded.model.named_params()) {
        double norm = 0.0;
        for (double v : t.data()) norm += v * v;
        std::cout << "param " << name << " " << shape_str(t.shape()) << " l2="
                  << std::sqrt(norm) << "\n";
        total += t.numel();
    }
    std::cout << "total parameters: " << total << "\n";
    return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"boottod: bootstrap-style dialogue representation pre-training"};
    app.set_version_flag("--version", std::string(kVersion));
    app.require_subcommand(1);

    RunConfig cfg;
    cfg.apply_env();

    std::string config_file;
    app.add_option("--config", config_file, "JSON config file (flags override it)");

    // shared flags, registered per subcommand
    auto add_common = [&](CLI::App* sub) {
        sub->add_option("--seed", cfg.seed, "master RNG seed");
        sub->add_option("--data", cfg.data_dir, "data directory");
        sub->add_option("--out", cfg.out_dir, "output directory");
    };
    auto add_encoder_flags = [&](CLI::App* sub) {
        sub->add_option("--layers", cfg.encoder.num_layers, "encoder layers L");
        sub->add_option("--dim", cfg.encoder.hidden_dim, "hidden dim d");
        sub->add_option("--heads", cfg.encoder.num_heads, "attention heads");
        sub->add_option("--ffn-dim", cfg.encoder.ffn_dim, "FFN width");
        sub->add_option("--max-len", cfg.encoder.max_len, "max sequence length");
        sub->add_option("--dropout", cfg.encoder.dropout_p, "dropout probability");
        sub->add_option("--min-freq", cfg.vocab_min_freq, "vocab min frequency");
    };

    // gen-corpus
    auto* gen = app.add_subcommand("gen-corpus", "generate a synthetic TOD corpus");
    add_common(gen);
    gen->add_option("--intents", cfg.generator.num_intents, "number of intents");
    gen->add_option("--dialogues", cfg.generator.num_dialogues, "number of dialogues");
    gen->add_option("--min-pairs", cfg.generator.min_pairs, "min turn pairs");
    gen->add_option("--max-pairs", cfg.generator.max_pairs, "max turn pairs");
    gen->add_option("--ood-intents", cfg.generator.num_ood_intents, "held-out OOD intents");
    gen->add_option("--noise", cfg.generator.slot_noise_prob, "slot noise probability");

    // pretrain
    auto* pre = app.add_subcommand("pretrain", "run BootTOD pre-training");
    add_common(pre);
    add_encoder_flags(pre);
    std::string p_mode;
    bool p_cap_given = false;
    int p_cap = 3;
    pre->add_option("--steps", cfg.train.max_steps, "max training steps");
    pre->add_option("--batch-size", cfg.train.batch_size, "batch size");
    pre->add_option("--lr", cfg.train.lr, "learning rate");
    pre->add_option("--eval-every", cfg.train.eval_every, "steps between dev evals");
    pre->add_option("--patience", cfg.train.patience, "early-stop patience");
    pre->add_option("--mask-ratio", cfg.train.mask_ratio, "mask ratio");
    pre->add_option("--k", cfg.alignment.alignment_layers, "alignment layers K");
    pre->add_option("--p-mode", p_mode, "response length mode: zero|cap|all|fix");
    pre->add_option("--p-cap", p_cap, "cap k for --p-mode cap")->each([&](const std::string&) {
        p_cap_given = true;
    });
    bool no_mlm = false, no_cls = false, no_mask = false, no_sg = false, no_pred = false;
    bool squared = false, literal_sum = false, freeze_target_dropout = false;
    pre->add_flag("--no-mlm", no_mlm, "disable the MLM term (expect non-convergence)");
    pre->add_flag("--no-cls-align", no_cls, "disable dialogue-level alignment");
    pre->add_flag("--no-mask-align", no_mask, "disable token-level alignment");
    pre->add_flag("--no-stop-gradient", no_sg, "let gradients flow into the target branch");
    pre->add_flag("--no-predictor", no_pred, "use the identity instead of the MLP head");
    pre->add_flag("--squared-distance", squared, "use squared L2 in the alignment losses");
    pre->add_flag("--literal-sum", literal_sum, "sum (not average) over batch and masks");
    pre->add_flag("--freeze-target-dropout", freeze_target_dropout,
                  "no dropout on the full-stream branch");

    // finetune / eval
    std::string task, checkpoint;
    bool random_init = false;
    auto add_task_flags = [&](CLI::App* sub) {
        add_common(sub);
        add_encoder_flags(sub);
        sub->add_option("--task", task, "intent|act|response-selection")->required();
        sub->add_option("--checkpoint", checkpoint, "checkpoint directory");
        sub->add_flag("--random-init", random_init, "untrained baseline of the same config");
        sub->add_option("--finetune-steps", cfg.finetune.steps, "fine-tuning steps");
        sub->add_option("--finetune-lr", cfg.finetune.lr, "fine-tuning learning rate");
        sub->add_option("--finetune-batch-size", cfg.finetune.batch_size, "fine-tune batch size");
        sub->add_option("--pool-size", cfg.eval_pool_size, "response selection pool size");
    };
    auto* fin = app.add_subcommand("finetune", "fine-tune on a downstream task and report");
    add_task_flags(fin);
    auto* ev = app.add_subcommand("eval", "fine-tune + evaluate a checkpoint on a task");
    add_task_flags(ev);

    // ablate
    auto* abl = app.add_subcommand("ablate", "run the ablation/sweep matrix");
    add_common(abl);
    add_encoder_flags(abl);
    std::string axis, values;
    abl->add_option("--axis", axis, "components|p|k")->required();
    abl->add_option("--values", values, "comma-separated sweep values (p or k axis)");
    abl->add_option("--steps", cfg.train.max_steps, "pretrain steps per cell");
    abl->add_option("--batch-size", cfg.train.batch_size, "batch size");
    abl->add_option("--lr", cfg.train.lr, "learning rate");
    abl->add_option("--eval-every", cfg.train.eval_every, "steps between dev evals");
    abl->add_option("--patience", cfg.train.patience, "early-stop patience");
    abl->add_option("--finetune-steps", cfg.finetune.steps, "fine-tuning steps per cell");
    abl->add_option("--finetune-lr", cfg.finetune.lr, "fine-tuning learning rate");
    abl->add_option("--pool-size", cfg.eval_pool_size, "response selection pool size");

    // inspect-checkpoint
    auto* ins = app.add_subcommand("inspect-checkpoint", "print a checkpoint's manifest");
    std::string inspect_path;
    ins->add_option("--checkpoint", inspect_path, "checkpoint directory")->required();

    // two-pass parse so --config loads before flags override it
    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? kExitOk : kExitUsage;
    }

    try {
        if (!config_file.empty()) {
            RunConfig file_cfg;
            file_cfg.apply_env();
            file_cfg.load_file(config_file);
            // re-parse so explicit flags win over file values
            std::swap(cfg, file_cfg);
            try {
                app.clear();
                app.parse(argc, argv);
            } catch (const CLI::ParseError& e) {
                const int rc = app.exit(e);
                return rc == 0 ? kExitOk : kExitUsage;
            }
        }

        if (pre->parsed()) {
            if (!p_mode.empty()) cfg.sampler.mode = RunConfig::parse_pmode(p_mode);
            if (p_cap_given && cfg.sampler.mode != PMode::Cap)
                throw ConfigError("--p-cap requires --p-mode cap");
            if (p_cap_given) cfg.sampler.cap = p_cap;
            if (no_mlm) cfg.alignment.use_mlm = false;
            if (no_cls) cfg.alignment.use_cls_align = false;
            if (no_mask) cfg.alignment.use_mask_align = false;
            if (no_sg) cfg.alignment.use_stop_gradient = false;
            if (no_pred) cfg.alignment.use_predictor = false;
            if (squared) cfg.alignment.distance = DistanceKind::Squared;
            if (literal_sum) cfg.alignment.reduction = LossReduction::SumPerSample;
            if (freeze_target_dropout) cfg.alignment.target_branch_dropout = false;
        }
        cfg.resolve();

        if (gen->parsed()) return cmd_gen_corpus(cfg);
        if (pre->parsed()) return cmd_pretrain(cfg);
        if (fin->parsed()) return cmd_finetune_eval(cfg, task, checkpoint, random_init, true);
        if (ev->parsed()) return cmd_finetune_eval(cfg, task, checkpoint, random_init, false);
        if (abl->parsed()) return cmd_ablate(cfg, axis, values);
        if (ins->parsed()) return cmd_inspect(inspect_path);
        throw ConfigError("no subcommand given");
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kExitUsage;
    } catch (const DataError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return kExitData;
    } catch (const ShapeError& e) {
        std::cerr << "shape error: " << e.what() << "\n";
        return kExitData;
    } catch (const NumericError& e) {
        std::cerr << "numerical failure: " << e.what() << "\n";
        return kExitNumeric;
    } catch (const std::exception& e) {
        std::cerr << "internal error: " << e.what() << "\n";
        return kExitNumeric;
    }
}
