#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include <json.hpp>

#include "modmoe/experiments.hpp"
#include "modmoe/io.hpp"
#include "testutil.hpp"

using namespace modmoe;

namespace {

std::vector<Document> tiny_docs() {
    std::vector<Document> docs;
    const char* stems[kNumLangs] = {"water river stone sky ", "eau riviere pierre ciel ", "wasser fluss stein ",
                                    "x = f(y)\nreturn x\n"};
    for (const Lang l : kAllLangs)
        for (int i = 0; i < 24; ++i) {
            std::string t;
            for (int r = 0; r < 4; ++r) t += stems[static_cast<size_t>(l)];
            t += std::to_string(i);
            docs.push_back({t, l});
        }
    return docs;
}

std::vector<Document> lang_subset(const std::vector<Document>& docs, Lang l) {
    std::vector<Document> out;
    for (const auto& d : docs)
        if (d.lang == l) out.push_back(d);
    return out;
}

DistillConfig tiny_distill(int steps) {
    DistillConfig cfg;
    cfg.steps = steps;
    cfg.micro_batch = 2;
    cfg.warmup_steps = 2;
    return cfg;
}

struct World {
    std::vector<Document> docs;
    Tokenizer tok;
    TransformerLM teacher;
    ModelConfig student_cfg;
    Router router;
    MoESystem ple;
};

const World& world() {
    static const World fixture = [] {
        auto docs = tiny_docs();
        auto tok = Tokenizer::train({docs[0].text, docs[24].text, docs[48].text, docs[72].text}, 300);
        ModelConfig tcfg;
        tcfg.n_layers = 2;
        tcfg.n_heads = 2;
        tcfg.d_model = 16;
        tcfg.d_ff = 32;
        tcfg.context_len = 16;
        tcfg.vocab_size = tok.vocab_size();
        TeacherHyper hyper;
        hyper.micro_batch = 4;
        hyper.virtual_batch = 8;
        hyper.steps = 60;
        hyper.warmup_steps = 5;
        auto teacher = train_teacher(tcfg, docs, {}, tok, hyper, 77).model;
        ModelConfig scfg = tcfg;
        scfg.n_layers = 1;
        auto router = train_router(docs, RouterTrainer::logreg_batch, 1e-4, 400, 7);
        std::array<TransformerLM, kNumLangs> students;
        for (const Lang l : kAllLangs)
            students[static_cast<size_t>(l)] =
                distill(teacher, scfg, lang_subset(docs, l), tok, tiny_distill(6), 100 + static_cast<int>(l)).student;
        auto ple = build_ple(std::move(students), router, tok);
        return World{std::move(docs), std::move(tok), std::move(teacher), scfg, std::move(router), std::move(ple)};
    }();
    return fixture;
}

std::filesystem::path fresh_dir(const std::string& leaf) {
    const auto dir = std::filesystem::temp_directory_path() / leaf;
    std::filesystem::remove_all(dir);
    std::filesystem::create_directories(dir);
    return dir;
}

}  // namespace

TEST_CASE("forgotten knowledge reproduces the reference rows") {
    const auto en = forgotten_knowledge(4.158, 4.657);
    CHECK(en.abs == doctest::Approx(0.499).epsilon(1e-9));
    CHECK(en.pct == doctest::Approx(12.0).epsilon(1e-3));
    const auto de = forgotten_knowledge(3.424, 4.725);
    CHECK(de.abs == doctest::Approx(1.301).epsilon(1e-9));
    CHECK(de.pct == doctest::Approx(38.0).epsilon(1e-3));
    const auto none = forgotten_knowledge(2.5, 2.5);
    CHECK(none.abs == 0.0);
    CHECK(none.pct == 0.0);
    const auto improved = forgotten_knowledge(3.0, 2.4);
    CHECK(improved.abs == doctest::Approx(-0.6));
    CHECK(improved.pct == doctest::Approx(-20.0));
    CHECK_THROWS_WITH(forgotten_knowledge(0.0, 1.0), doctest::Contains("positive"));
}

TEST_CASE("forgotten knowledge arithmetic is internally consistent") {
    Rng rng(5);
    for (int i = 0; i < 50; ++i) {
        const double end = 0.5 + rng.uniform() * 5.0;
        const double fin = 0.5 + rng.uniform() * 5.0;
        const auto fk = forgotten_knowledge(end, fin);
        CHECK(std::fabs(fk.pct * end / 100.0 - fk.abs) < 1e-9);
    }
}

TEST_CASE("evaluation reports couple perplexity to cross-entropy exactly") {
    const auto& w = world();
    const auto rep = perplexity(w.teacher, w.docs, w.tok, {}, {123, 60});
    const auto by_lang = eval_ce_by_lang(w.teacher, w.docs, w.tok);
    for (size_t i = 0; i < kNumLangs; ++i) {
        CHECK(rep.ce[i] == by_lang[i]);
        CHECK(rep.ppl[i] == std::exp(rep.ce[i]));
        CHECK(rep.ppl[i] > 1.0);
    }
    CHECK(rep.overall_ce == eval_cross_entropy(w.teacher, w.docs, w.tok));
    CHECK(rep.overall_ppl == std::exp(rep.overall_ce));
    CHECK(rep.seed == 123);
    CHECK(rep.steps == 60);
    CHECK_FALSE(rep.config_hash.empty());

    CHECK_THROWS_WITH(perplexity(w.teacher, {}, w.tok), doctest::Contains("empty"));
    const auto en_only = lang_subset(w.docs, Lang::en);
    CHECK_THROWS_WITH(perplexity(w.teacher, en_only, w.tok, {Lang::fr}),
                      doctest::Contains("no evaluation documents for language fr"));
    const auto partial = perplexity(w.teacher, en_only, w.tok);
    CHECK(std::isnan(partial.ce[static_cast<size_t>(Lang::fr)]));
}

TEST_CASE("config hashes identify the architecture") {
    const auto& w = world();
    CHECK(model_config_hash(w.student_cfg) == model_config_hash(w.student_cfg));
    auto other = w.student_cfg;
    other.d_model *= 2;
    CHECK(model_config_hash(w.student_cfg) != model_config_hash(other));
}

TEST_CASE("system evaluation report passes through to the experts") {
    const auto& w = world();
    const auto rep = perplexity(w.ple, w.docs);
    for (const Lang l : kAllLangs) {
        const auto standalone = eval_nll(w.ple.experts[static_cast<size_t>(l)].model, lang_subset(w.docs, l), w.tok);
        CHECK(rep.ce[static_cast<size_t>(l)] == standalone.mean());
        CHECK(rep.ppl[static_cast<size_t>(l)] == std::exp(standalone.mean()));
    }
}

TEST_CASE("oracle routing makes pass-through equality router-independent") {
    const auto& w = world();
    const auto by_lang = evaluate_by_lang(w.ple, w.docs, true);
    for (const Lang l : kAllLangs) {
        const auto standalone = eval_nll(w.ple.experts[static_cast<size_t>(l)].model, lang_subset(w.docs, l), w.tok);
        CHECK(by_lang[static_cast<size_t>(l)].sum == standalone.sum);
        CHECK(by_lang[static_cast<size_t>(l)].count == standalone.count);
    }
}

TEST_CASE("mid-training evaluation points land on the configured interval") {
    const auto& w = world();
    auto cfg = tiny_distill(5);
    cfg.eval_every = 2;
    const auto res = distill(w.teacher, w.student_cfg, w.docs, w.tok, cfg, 31, &w.docs);
    REQUIRE(res.log.evals.size() == 3);
    CHECK(res.log.evals[0].step == 1);
    CHECK(res.log.evals[1].step == 3);
    CHECK(res.log.evals[2].step == 4);
    for (const auto& e : res.log.evals)
        for (const Lang l : kAllLangs) CHECK(std::isfinite(e.ce[static_cast<size_t>(l)]));
}

TEST_CASE("the alpha study runs one controlled arm per setting") {
    const auto& w = world();
    auto base = tiny_distill(4);
    base.eval_every = 2;
    const auto settings = default_alpha_settings();
    const auto rep = run_alpha_study(w.teacher, w.student_cfg, w.docs, w.docs, w.tok, base, settings, 91);
    REQUIRE(rep.rows.size() == 6);
    REQUIRE(rep.curves.size() == 6);
    CHECK(rep.study == "alpha");
    for (size_t i = 0; i < settings.size(); ++i) {
        CHECK(rep.rows[i].setting == settings[i]);
        CHECK(std::isfinite(rep.rows[i].final_eval_ce));
        CHECK(rep.rows[i].final_eval_ppl == std::exp(rep.rows[i].final_eval_ce));
        CHECK(rep.curves[i].first == settings[i]);
        CHECK(rep.curves[i].second.steps.size() == 4);
        CHECK_FALSE(rep.curves[i].second.evals.empty());
    }
    CHECK_FALSE(rep.notes.empty());

    const auto again = run_alpha_study(w.teacher, w.student_cfg, w.docs, w.docs, w.tok, base, settings, 91);
    for (size_t i = 0; i < rep.rows.size(); ++i) CHECK(rep.rows[i].final_eval_ce == again.rows[i].final_eval_ce);

    auto solo = base;
    solo.alpha_mode = AlphaMode::fixed;
    solo.alpha_fixed = 0.5;
    const auto standalone = distill(w.teacher, w.student_cfg, w.docs, w.tok, solo, 91);
    CHECK(rep.rows[3].setting == "fixed_0.5");
    CHECK(rep.rows[3].final_eval_ce == eval_cross_entropy(standalone.student, w.docs, w.tok));

    CHECK_THROWS_WITH(run_alpha_study(w.teacher, w.student_cfg, w.docs, w.docs, w.tok, base, {"adaptive"}, 91),
                      doctest::Contains("must include"));
}

TEST_CASE("the loss-mode study audits the combined blend identity") {
    const auto& w = world();
    const auto rep = run_loss_mode_study(w.teacher, w.student_cfg, w.docs, w.docs, w.tok, tiny_distill(4), 92);
    REQUIRE(rep.rows.size() == 2);
    CHECK(rep.rows[0].setting == "combined");
    CHECK(rep.rows[1].setting == "alternating");
    for (const auto& r : rep.rows) CHECK(std::isfinite(r.final_eval_ce));
    CHECK(combined_identity_holds(rep.curves[0].second));
    CHECK_FALSE(combined_identity_holds(rep.curves[1].second));
    bool mentions_reference = false;
    for (const auto& n : rep.notes)
        if (n.find("4.305") != std::string::npos && n.find("4.322") != std::string::npos) mentions_reference = true;
    CHECK(mentions_reference);
}

TEST_CASE("the forgetting study produces consistent records for all three setups") {
    const auto& w = world();
    ForgettingStudyConfig cfg;
    cfg.student_cfg = w.student_cfg;
    cfg.distill_cfg = tiny_distill(4);
    cfg.distill_cfg.eval_every = 2;
    const auto dir = fresh_dir("modmoe_test_forgetting");
    const auto out = run_forgetting_study(w.teacher, w.docs, w.docs, w.tok, cfg, w.router, 93, dir);

    const auto& a = out.records[0];
    CHECK(a.experiment == ForgettingExperiment::A_sequential);
    for (const Lang l : {Lang::en, Lang::fr, Lang::de}) {
        const auto& e = a.languages[static_cast<size_t>(l)];
        CHECK(e.applicable);
        CHECK(e.forgotten_abs == e.loss_final - e.loss_at_phase_end);
        CHECK(std::fabs(e.forgotten_pct * e.loss_at_phase_end / 100.0 - e.forgotten_abs) < 1e-9);
    }
    CHECK_FALSE(a.languages[static_cast<size_t>(Lang::py)].applicable);

    const auto& b = out.records[1];
    CHECK(b.experiment == ForgettingExperiment::B_single_session);
    for (const Lang l : kAllLangs) {
        CHECK(b.languages[static_cast<size_t>(l)].applicable);
        CHECK(b.languages[static_cast<size_t>(l)].forgotten_abs == 0.0);
        CHECK(b.languages[static_cast<size_t>(l)].forgotten_pct == 0.0);
    }

    const auto& c = out.records[2];
    CHECK(c.experiment == ForgettingExperiment::C_moe);
    for (const Lang l : kAllLangs) {
        CHECK(c.languages[static_cast<size_t>(l)].applicable);
        CHECK(c.languages[static_cast<size_t>(l)].forgotten_abs == 0.0);
        CHECK(c.languages[static_cast<size_t>(l)].forgotten_pct == 0.0);
    }

    CHECK(out.log_a.steps.size() == 16);
    CHECK(out.log_a.steps.back().step == 15);
    REQUIRE_FALSE(out.log_a.evals.empty());
    CHECK(out.log_a.evals.back().step == 15);
    CHECK(out.log_b.steps.size() == 16);
    CHECK(out.log_b.evals.back().step == 15);
    for (const Lang l : kAllLangs) CHECK(out.log_c[static_cast<size_t>(l)].steps.size() == 4);
    CHECK(std::isfinite(eval_cross_entropy(out.student_b, w.docs, w.tok)));

    write_fk_csv(dir / "fk.csv", out.records);
    std::ifstream in(dir / "fk.csv");
    std::string header;
    std::getline(in, header);
    CHECK(header == "experiment,language,loss_at_phase_end,loss_final,forgotten_abs,forgotten_pct");
    int lines = 0;
    bool py_na = false;
    for (std::string line; std::getline(in, line);) {
        ++lines;
        if (line.rfind("A_sequential,py,", 0) == 0 && line.find("NA,NA") != std::string::npos) py_na = true;
    }
    CHECK(lines == 12);
    CHECK(py_na);
}

TEST_CASE("study reports use the documented CSV columns") {
    StudyReport rep;
    rep.study = "alpha";
    rep.rows = {{"adaptive", 1.25, std::exp(1.25)}, {"fixed_0.5", 1.5, std::exp(1.5)}};
    const auto dir = fresh_dir("modmoe_test_study_csv");
    write_study_csv(dir / "study.csv", rep);
    std::ifstream in(dir / "study.csv");
    std::string header, row;
    std::getline(in, header);
    std::getline(in, row);
    CHECK(header == "setting,final_eval_ce,final_eval_ppl");
    CHECK(row.rfind("adaptive,1.25,", 0) == 0);
}

TEST_CASE("full-scale reference annotations parse as JSON") {
    const auto j = nlohmann::json::parse(full_scale_references_json());
    CHECK(j.at("per_language_perplexity").at("ple").at("en").get<double>() == 74.09);
    CHECK(j.at("inference_settings").at("overall_gap").get<double>() == 5.69);
    CHECK(j.at("forgotten_knowledge").at("sequential").at("py").is_null());
    CHECK(j.at("loss_mode").at("combined_eval_loss").get<double>() == 4.305);
    CHECK(j.at("router_metrics").at("logistic_regression").at("f1").get<double>() == 0.9995);
}
