#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "modmoe/config.hpp"
#include "modmoe/corpus.hpp"
#include "modmoe/distill.hpp"
#include "modmoe/experiments.hpp"
#include "modmoe/io.hpp"
#include "modmoe/model.hpp"
#include "modmoe/moe.hpp"
#include "modmoe/router.hpp"
#include "modmoe/tokenizer.hpp"

namespace fs = std::filesystem;
using namespace modmoe;

namespace {

fs::path require_artifact(const fs::path& p, const std::string& what) {
    if (!fs::exists(p)) throw std::runtime_error("missing artifact: " + what + " (expected " + p.string() + ")");
    return p;
}

std::string rel_to(const fs::path& p, const fs::path& root) {
    const auto rel = p.lexically_relative(root);
    if (rel.empty() || *rel.begin() == "..") return p.generic_string();
    return rel.generic_string();
}

// every regular file under the stage dir except the run manifest itself,
// sorted, relative to the output root
std::vector<std::string> list_outputs(const fs::path& stage_dir, const fs::path& out_root) {
    std::vector<std::string> files;
    for (const auto& e : fs::recursive_directory_iterator(stage_dir)) {
        if (!e.is_regular_file()) continue;
        if (e.path().filename() == "run_manifest.json") continue;
        files.push_back(rel_to(e.path(), out_root));
    }
    std::sort(files.begin(), files.end());
    return files;
}

void finish_stage(const std::string& stage, const fs::path& stage_dir, const fs::path& out_root,
                  const RunConfig& cfg, uint64_t seed, std::vector<std::string> inputs) {
    RunManifest m;
    m.stage = stage;
    m.seed = seed;
    m.config_hash = config_hash(cfg);
    m.tool_version = kToolVersion;
    m.inputs = std::move(inputs);
    m.outputs = list_outputs(stage_dir, out_root);
    write_manifest(stage_dir / "run_manifest.json", m);
    std::cout << stage << ": wrote " << m.outputs.size() << " files under " << stage_dir.generic_string() << "\n";
}

fs::path bundled_path(const RunConfig& cfg, Lang l) {
    return fs::path(cfg.corpus_dir) / ("corpus_" + std::string(lang_name(l)) + ".jsonl");
}

std::vector<Document> load_bundled(const RunConfig& cfg, int max_docs_per_lang, std::vector<std::string>* inputs) {
    std::vector<Document> all;
    for (int l = 0; l < kNumLangs; ++l) {
        const fs::path p = bundled_path(cfg, static_cast<Lang>(l));
        require_artifact(p, std::string("bundled corpus for ") + lang_name(static_cast<Lang>(l)));
        auto docs = load_corpus(p);
        if (max_docs_per_lang > 0 && static_cast<int>(docs.size()) > max_docs_per_lang)
            docs.resize(static_cast<size_t>(max_docs_per_lang));
        all.insert(all.end(), docs.begin(), docs.end());
        if (inputs) inputs->push_back(p.generic_string());
    }
    return all;
}

void write_jsonl(const fs::path& path, const std::vector<Document>& docs) {
    std::string out;
    for (const auto& d : docs) {
        nlohmann::json j;
        j["text"] = d.text;
        j["lang"] = lang_name(d.lang);
        out += j.dump();
        out += '\n';
    }
    write_file(path, out);
}

Tokenizer load_tokenizer_artifact(const fs::path& out_root, std::vector<std::string>* inputs) {
    const fs::path p = require_artifact(out_root / "tokenizer" / "tokenizer.json", "tokenizer model");
    if (inputs) inputs->push_back(rel_to(p, out_root));
    return Tokenizer::load(p);
}

std::vector<Document> load_split(const fs::path& out_root, const char* name, std::vector<std::string>* inputs) {
    const fs::path p =
        require_artifact(out_root / "corpus" / (std::string(name) + ".jsonl"), std::string("prepared corpus ") + name + " split");
    if (inputs) inputs->push_back(rel_to(p, out_root));
    return load_corpus(p);
}

TransformerLM load_teacher_artifact(const fs::path& out_root, std::vector<std::string>* inputs) {
    const fs::path stem = out_root / "teacher" / "teacher";
    require_artifact(fs::path(stem.string() + ".json"), "teacher checkpoint");
    require_artifact(fs::path(stem.string() + ".bin"), "teacher checkpoint");
    if (inputs) {
        inputs->push_back(rel_to(fs::path(stem.string() + ".json"), out_root));
        inputs->push_back(rel_to(fs::path(stem.string() + ".bin"), out_root));
    }
    return TransformerLM::load(stem);
}

Router load_router_artifact(const fs::path& out_root, std::vector<std::string>* inputs) {
    const fs::path p = require_artifact(out_root / "router" / "router.json", "router model");
    if (inputs) inputs->push_back(rel_to(p, out_root));
    return load_router(p);
}

std::vector<Document> cap_per_lang(const std::vector<Document>& docs, int max_per_lang) {
    if (max_per_lang <= 0) return docs;
    std::array<int, kNumLangs> seen{};
    std::vector<Document> out;
    for (const auto& d : docs) {
        auto& n = seen[static_cast<size_t>(d.lang)];
        if (n < max_per_lang) {
            out.push_back(d);
            ++n;
        }
    }
    return out;
}

nlohmann::json num_or_null(double v) {
    if (std::isnan(v) || std::isinf(v)) return nullptr;
    return v;
}

void write_eval_report(const fs::path& path, const EvalReport& r) {
    nlohmann::json j;
    for (int l = 0; l < kNumLangs; ++l) {
        const auto* name = lang_name(static_cast<Lang>(l));
        j["ce"][name] = num_or_null(r.ce[static_cast<size_t>(l)]);
        j["ppl"][name] = num_or_null(r.ppl[static_cast<size_t>(l)]);
    }
    j["overall_ce"] = num_or_null(r.overall_ce);
    j["overall_ppl"] = num_or_null(r.overall_ppl);
    j["seed"] = r.seed;
    j["steps"] = r.steps;
    j["config_hash"] = r.config_hash;
    write_file(path, j.dump(1) + "\n");
}

void write_train_log_csv(const fs::path& path, const TrainLog& log) {
    std::vector<std::vector<std::string>> rows;
    rows.reserve(log.steps.size());
    for (const auto& r : log.steps)
        rows.push_back({std::to_string(r.step), fmt_float(r.loss), fmt_float(r.lr)});
    write_csv(path, {"step", "loss", "lr"}, rows);
}

void write_val_log_csv(const fs::path& path, const TrainLog& log) {
    std::vector<std::vector<std::string>> rows;
    rows.reserve(log.val.size());
    for (const auto& r : log.val)
        rows.push_back({std::to_string(r.step), lang_name(r.lang), fmt_float(r.ce)});
    write_csv(path, {"step", "lang", "ce"}, rows);
}

// ---- stages ----

void stage_prepare(const RunConfig& cfg, const fs::path& out, uint64_t seed) {
    std::vector<std::string> inputs;
    const Tokenizer tok = load_tokenizer_artifact(out, &inputs);
    const auto raw = load_bundled(cfg, cfg.corpus_max_docs_per_lang, &inputs);
    const auto balanced = balance_corpus(raw, tok, seed);
    const auto split = split_validation(balanced, cfg.corpus_val_fraction, seed);
    const fs::path dir = out / "corpus";
    fs::create_directories(dir);
    write_jsonl(dir / "train.jsonl", split.train);
    write_jsonl(dir / "val.jsonl", split.val);
    const auto stats = corpus_stats(balanced, tok);
    write_stats_csv(dir / "corpus_stats.csv", stats);
    for (int l = 0; l < kNumLangs; ++l)
        std::cout << lang_name(static_cast<Lang>(l)) << ": " << stats.documents[static_cast<size_t>(l)]
                  << " docs, " << stats.tokens[static_cast<size_t>(l)] << " tokens\n";
    finish_stage("prepare", dir, out, cfg, seed, std::move(inputs));
}

void stage_tokenizer(const RunConfig& cfg, const fs::path& out, uint64_t seed) {
    std::vector<std::string> inputs;
    const auto docs = load_bundled(cfg, cfg.tokenizer_max_docs_per_lang, &inputs);
    std::vector<std::string> texts;
    texts.reserve(docs.size());
    for (const auto& d : docs) texts.push_back(d.text);
    const Tokenizer tok = Tokenizer::train(texts, cfg.tokenizer_vocab_size, seed);
    const fs::path dir = out / "tokenizer";
    fs::create_directories(dir);
    tok.save(dir / "tokenizer.json");
    std::cout << "tokenizer: vocab " << tok.vocab_size() << "\n";
    finish_stage("tokenizer", dir, out, cfg, seed, std::move(inputs));
}

void stage_teacher(const RunConfig& cfg, const fs::path& out, uint64_t seed) {
    std::vector<std::string> inputs;
    const Tokenizer tok = load_tokenizer_artifact(out, &inputs);
    const auto train_docs = load_split(out, "train", &inputs);
    const auto val_docs = load_split(out, "val", &inputs);
    const auto mcfg = cfg.teacher_config(tok.vocab_size());
    auto result = train_teacher(mcfg, train_docs, val_docs, tok, cfg.teacher_hyper(), seed);
    const fs::path dir = out / "teacher";
    fs::create_directories(dir);
    result.model.save(dir / "teacher", seed, cfg.teacher_steps);
    write_train_log_csv(dir / "teacher_log.csv", result.log);
    if (!result.log.val.empty()) write_val_log_csv(dir / "teacher_val.csv", result.log);
    const auto report = perplexity(result.model, val_docs, tok, {}, {seed, cfg.teacher_steps});
    write_eval_report(dir / "eval.json", report);
    std::cout << "teacher: val ppl " << fmt_float(report.overall_ppl) << " after " << cfg.teacher_steps
              << " steps\n";
    finish_stage("teacher", dir, out, cfg, seed, std::move(inputs));
}

void stage_distill(const RunConfig& cfg, const fs::path& out, uint64_t seed) {
    std::vector<std::string> inputs;
    const Tokenizer tok = load_tokenizer_artifact(out, &inputs);
    const TransformerLM teacher = load_teacher_artifact(out, &inputs);
    const auto train_docs = load_split(out, "train", &inputs);
    const auto val_docs = load_split(out, "val", &inputs);
    const auto dcfg = cfg.distill_config();
    const auto scfg = cfg.student_config(tok.vocab_size());
    auto result = distill(teacher, scfg, train_docs, tok, dcfg, seed, dcfg.eval_every > 0 ? &val_docs : nullptr);
    const fs::path dir = out / "distill";
    fs::create_directories(dir);
    result.student.save(dir / "student", seed, dcfg.steps);
    write_distill_csv(dir / "distill_log.csv", result.log);
    if (!result.log.evals.empty()) write_eval_curve_csv(dir / "eval_curve.csv", result.log);
    const auto report = perplexity(result.student, val_docs, tok, {}, {seed, dcfg.steps});
    write_eval_report(dir / "eval.json", report);
    std::cout << "distill: val ppl " << fmt_float(report.overall_ppl) << " after " << dcfg.steps << " steps\n";
    finish_stage("distill", dir, out, cfg, seed, std::move(inputs));
}

void stage_router(const RunConfig& cfg, const fs::path& out, uint64_t seed) {
    std::vector<std::string> inputs;
    const auto docs = load_bundled(cfg, cfg.corpus_max_docs_per_lang, &inputs);
    const auto split = split_validation(docs, cfg.router_heldout_fraction, seed);
    const auto trainer = parse_trainer(cfg.router_trainer);
    const Router router = train_router(split.train, trainer, cfg.router_reg_lambda, cfg.router_epochs, seed);
    const auto metrics = evaluate_router(router.clf, router.tfidf, split.val);
    const fs::path dir = out / "router";
    fs::create_directories(dir);
    save_router(dir / "router.json", router);
    write_router_metrics_csv(dir / "router_metrics.csv", metrics);
    write_confusion_csv(dir / "confusion.csv", metrics);
    std::cout << "router: " << split.val.size() << " held-out docs, accuracy " << fmt_float(metrics.accuracy)
              << ", macro f1 " << fmt_float(metrics.f1) << "\n";
    finish_stage("router", dir, out, cfg, seed, std::move(inputs));
}

std::vector<Document> lang_slice(const std::vector<Document>& docs, Lang l) {
    std::vector<Document> out;
    for (const auto& d : docs)
        if (d.lang == l) out.push_back(d);
    return out;
}

void stage_moe_train(const RunConfig& cfg, const fs::path& out, uint64_t seed) {
    std::vector<std::string> inputs;
    const Tokenizer tok = load_tokenizer_artifact(out, &inputs);
    const TransformerLM teacher = load_teacher_artifact(out, &inputs);
    const auto train_docs = load_split(out, "train", &inputs);
    Router router = load_router_artifact(out, &inputs);
    const auto setup = parse_setup(cfg.moe_setup);
    auto dcfg = cfg.distill_config();
    dcfg.steps = cfg.moe_steps;
    dcfg.eval_every = 0;
    const auto scfg = cfg.student_config(tok.vocab_size());
    const fs::path dir = out / "moe" / setup_name(setup);
    fs::create_directories(dir);
    Rng rng(seed);
    if (setup == MoESetup::PLE) {
        std::array<TransformerLM, kNumLangs> experts;
        for (int l = 0; l < kNumLangs; ++l) {
            const auto lang = static_cast<Lang>(l);
            auto r = distill(teacher, scfg, lang_slice(train_docs, lang), tok, dcfg,
                             rng.fork(std::string("expert-") + lang_name(lang)).next_u64());
            write_distill_csv(dir / (std::string("distill_log_") + lang_name(lang) + ".csv"), r.log);
            experts[static_cast<size_t>(l)] = std::move(r.student);
        }
        const MoESystem sys = build_ple(std::move(experts), std::move(router), tok);
        save_moe(dir, sys, seed);
    } else {
        const auto result = setup == MoESetup::JEET
                                ? train_jeet(teacher, scfg, train_docs, tok, dcfg, seed, std::move(router))
                                : train_moe_ce(teacher, scfg, train_docs, tok, dcfg, seed, std::move(router));
        write_distill_csv(dir / "moe_train_log.csv", result.log);
        save_moe(dir, result.system, seed);
    }
    std::cout << "moe-train: " << setup_name(setup) << " system, " << cfg.moe_steps << " rounds per expert\n";
    finish_stage("moe-train", dir, out, cfg, seed, std::move(inputs));
}

void stage_moe_eval(const RunConfig& cfg, const fs::path& out, uint64_t seed, const std::string& grid_mode) {
    std::vector<std::string> inputs;
    const auto setup = parse_setup(cfg.moe_setup);
    const fs::path bundle = out / "moe" / setup_name(setup);
    require_artifact(bundle / "manifest.json", std::string("MoE bundle for ") + setup_name(setup));
    inputs.push_back(rel_to(bundle / "manifest.json", out));
    MoESystem sys = load_moe(bundle);
    std::vector<Document> eval_docs = cap_per_lang(load_split(out, "val", &inputs), cfg.eval_max_docs_per_lang);
    const fs::path dir = bundle / "eval";
    fs::create_directories(dir);
    const bool has_common = sys.common.has_value();
    if (grid_mode == "full") {
        const auto rows = evaluate_settings_grid(sys, eval_docs, standard_grid(has_common));
        write_grid_csv(dir / "grid.csv", rows);
        std::cout << "moe-eval: " << rows.size() << " grid rows on " << eval_docs.size() << " docs\n";
    } else {
        sys.settings.routable = parse_routable(cfg.moe_routable);
        if (cfg.moe_use_common && !has_common)
            throw std::runtime_error(std::string("the ") + setup_name(setup) + " bundle has no common expert");
        sys.settings.use_common = cfg.moe_use_common && has_common;
        InferenceSettings s;
        s.routable = sys.settings.routable;
        s.use_common = sys.settings.use_common;
        const auto rows = evaluate_settings_grid(sys, eval_docs, {s});
        write_grid_csv(dir / "grid.csv", rows);
        const auto report = perplexity(sys, eval_docs, {}, {seed, cfg.moe_steps});
        write_eval_report(dir / "eval.json", report);
        std::cout << "moe-eval: overall ppl " << fmt_float(rows[0].ppl_all) << " with routable "
                  << routable_label(rows[0].routable) << "\n";
    }
    finish_stage("moe-eval", dir, out, cfg, seed, std::move(inputs));
}

void write_study_curves(const fs::path& dir, const StudyReport& report) {
    for (const auto& [setting, log] : report.curves) {
        std::string name = setting;
        for (auto& c : name)
            if (c == '.') c = 'p';
        write_distill_csv(dir / ("loss_" + name + ".csv"), log);
        if (!log.evals.empty()) write_eval_curve_csv(dir / ("curve_" + name + ".csv"), log);
    }
}

void write_notes(const fs::path& path, const std::vector<std::string>& notes) {
    std::string text;
    for (const auto& n : notes) {
        text += n;
        text += '\n';
    }
    write_file(path, text);
}

void stage_study(const RunConfig& cfg, const fs::path& out, uint64_t seed, const std::string& which) {
    std::vector<std::string> inputs;
    const Tokenizer tok = load_tokenizer_artifact(out, &inputs);
    const TransformerLM teacher = load_teacher_artifact(out, &inputs);
    const auto train_docs = load_split(out, "train", &inputs);
    const auto val_docs = cap_per_lang(load_split(out, "val", &inputs), cfg.eval_max_docs_per_lang);
    const auto scfg = cfg.student_config(tok.vocab_size());
    auto dcfg = cfg.distill_config();
    dcfg.eval_every = cfg.study_eval_every;
    const fs::path dir = out / "study" / which;
    fs::create_directories(dir);
    if (which == "alpha") {
        dcfg.steps = cfg.study_steps;
        const auto report =
            run_alpha_study(teacher, scfg, train_docs, val_docs, tok, dcfg, default_alpha_settings(), seed);
        write_study_csv(dir / "alpha_study.csv", report);
        write_study_curves(dir, report);
        write_notes(dir / "notes.txt", report.notes);
    } else if (which == "loss-mode") {
        dcfg.steps = cfg.study_steps;
        const auto report = run_loss_mode_study(teacher, scfg, train_docs, val_docs, tok, dcfg, seed);
        write_study_csv(dir / "loss_mode.csv", report);
        write_study_curves(dir, report);
        write_notes(dir / "notes.txt", report.notes);
    } else if (which == "forgetting") {
        Router router = load_router_artifact(out, &inputs);
        ForgettingStudyConfig fcfg;
        fcfg.student_cfg = scfg;
        fcfg.distill_cfg = dcfg;
        fcfg.distill_cfg.steps = cfg.study_forgetting_steps;
        const auto result =
            run_forgetting_study(teacher, train_docs, val_docs, tok, fcfg, router, seed, dir / "snapshots");
        write_fk_csv(dir / "fk_table.csv", result.records);
        write_distill_csv(dir / "loss_sequential.csv", result.log_a);
        write_eval_curve_csv(dir / "curve_sequential.csv", result.log_a);
        write_distill_csv(dir / "loss_single_session.csv", result.log_b);
        write_eval_curve_csv(dir / "curve_single_session.csv", result.log_b);
        for (int l = 0; l < kNumLangs; ++l) {
            const auto* name = lang_name(static_cast<Lang>(l));
            write_distill_csv(dir / (std::string("loss_expert_") + name + ".csv"),
                              result.log_c[static_cast<size_t>(l)]);
        }
        for (const auto& rec : result.records) {
            std::cout << experiment_name(rec.experiment) << ":";
            for (int l = 0; l < kNumLangs; ++l) {
                const auto& e = rec.languages[static_cast<size_t>(l)];
                std::cout << " " << lang_name(static_cast<Lang>(l)) << "="
                          << (e.applicable ? fmt_float(e.forgotten_abs) : "NA");
            }
            std::cout << "\n";
        }
    } else {
        throw std::runtime_error("unknown study '" + which + "' (expected alpha, loss-mode, or forgetting)");
    }
    write_file(dir / "references.json", full_scale_references_json());
    finish_stage("study", dir, out, cfg, seed, std::move(inputs));
}

void check_thread_env() {
    const char* v = std::getenv("MODMOE_NUM_THREADS");
    if (!v) return;
    char* end = nullptr;
    const long n = std::strtol(v, &end, 10);
    if (end == v || *end != '\0' || n < 1)
        throw std::runtime_error("MODMOE_NUM_THREADS must be a positive integer");
    // all numeric kernels are single-threaded; any cap >= 1 is honored as-is
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"modmoe: a desk-scale modular language model laboratory"};
    app.require_subcommand(1);

    std::string config_path;
    std::string out_dir = "runs";
    uint64_t seed = 0;
    std::string opt_vocab, opt_steps, opt_alpha_mode, opt_loss_mode, opt_setup, opt_routable, opt_use_common;
    std::string grid_mode = "single";
    std::string study_name;

    const auto add_common = [&](CLI::App* sub, bool training) {
        sub->add_option("--config", config_path, "flat JSON config file with dotted keys");
        sub->add_option("--out", out_dir, "output root directory (default runs)");
        auto* s = sub->add_option("--seed", seed, "run seed");
        if (training) s->required();
        return sub;
    };

    auto* prepare = add_common(app.add_subcommand("prepare", "balance the corpus and write train/val splits"), false);
    auto* tokenizer =
        add_common(app.add_subcommand("tokenizer", "train the byte-level BPE tokenizer on the bundled corpora"), false);
    tokenizer->add_option("--vocab-size", opt_vocab, "tokenizer vocabulary size");
    auto* teacher = add_common(app.add_subcommand("teacher", "train the teacher language model"), true);
    teacher->add_option("--steps", opt_steps, "optimizer steps");
    auto* distill_cmd = add_common(app.add_subcommand("distill", "distill the teacher into a student"), true);
    distill_cmd->add_option("--steps", opt_steps, "optimizer steps");
    distill_cmd->add_option("--alpha-mode", opt_alpha_mode, "adaptive, fixed, or fixed_<value>");
    distill_cmd->add_option("--loss-mode", opt_loss_mode, "combined or alternating");
    auto* router_cmd = add_common(app.add_subcommand("router", "train and score the sequence router"), true);
    auto* moe_train = add_common(app.add_subcommand("moe-train", "train a modular expert system"), true);
    moe_train->add_option("--steps", opt_steps, "training rounds per expert");
    moe_train->add_option("--setup", opt_setup, "ple, jeet, or moe-ce");
    auto* moe_eval = add_common(app.add_subcommand("moe-eval", "evaluate a trained expert system"), false);
    moe_eval->add_option("--setup", opt_setup, "which bundle to evaluate");
    moe_eval->add_option("--settings-grid", grid_mode, "single or full")
        ->check(CLI::IsMember({"single", "full"}));
    moe_eval->add_option("--routable", opt_routable, "comma-separated routable language subset");
    moe_eval->add_option("--use-common", opt_use_common, "serve with the common expert (true/false)");
    auto* study = add_common(app.add_subcommand("study", "run a research study"), true);
    study->add_option("name", study_name, "alpha, loss-mode, or forgetting")->required();
    study->add_option("--steps", opt_steps, "per-arm or per-phase step budget");
    study->add_option("--alpha-mode", opt_alpha_mode, "base alpha mode for non-alpha studies");
    study->add_option("--loss-mode", opt_loss_mode, "base loss mode");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e);
    }

    try {
        check_thread_env();
        RunConfig cfg;
        if (!config_path.empty()) cfg = load_config(config_path);
        if (!opt_vocab.empty()) apply_config_entry(cfg, "tokenizer.vocab_size", opt_vocab);
        if (!opt_alpha_mode.empty()) apply_config_entry(cfg, "distill.alpha_mode", opt_alpha_mode);
        if (!opt_loss_mode.empty()) apply_config_entry(cfg, "distill.loss_mode", opt_loss_mode);
        if (!opt_setup.empty()) apply_config_entry(cfg, "moe.setup", opt_setup);
        if (!opt_routable.empty()) apply_config_entry(cfg, "moe.routable", opt_routable);
        if (!opt_use_common.empty()) apply_config_entry(cfg, "moe.use_common", opt_use_common);
        if (!opt_steps.empty()) {
            if (teacher->parsed()) apply_config_entry(cfg, "teacher.steps", opt_steps);
            if (distill_cmd->parsed()) apply_config_entry(cfg, "distill.steps", opt_steps);
            if (moe_train->parsed()) apply_config_entry(cfg, "moe.steps", opt_steps);
            if (study->parsed())
                apply_config_entry(cfg, study_name == "forgetting" ? "study.forgetting_steps" : "study.steps",
                                   opt_steps);
        }
        const fs::path out(out_dir);
        fs::create_directories(out);
        if (prepare->parsed()) stage_prepare(cfg, out, seed);
        if (tokenizer->parsed()) stage_tokenizer(cfg, out, seed);
        if (teacher->parsed()) stage_teacher(cfg, out, seed);
        if (distill_cmd->parsed()) stage_distill(cfg, out, seed);
        if (router_cmd->parsed()) stage_router(cfg, out, seed);
        if (moe_train->parsed()) stage_moe_train(cfg, out, seed);
        if (moe_eval->parsed()) stage_moe_eval(cfg, out, seed, grid_mode);
        if (study->parsed()) stage_study(cfg, out, seed, study_name);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
