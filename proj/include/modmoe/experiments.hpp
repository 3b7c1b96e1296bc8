#pragma once

#include <array>
#include <filesystem>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "modmoe/distill.hpp"
#include "modmoe/moe.hpp"

namespace modmoe {

struct RunMeta {
    uint64_t seed = 0;
    int64_t steps = 0;
};

// evaluation summary in nats/token; perplexity = exp(ce) throughout
struct EvalReport {
    std::array<double, kNumLangs> ce{};
    std::array<double, kNumLangs> ppl{};
    double overall_ce = 0.0;   // token-weighted over all documents
    double overall_ppl = 0.0;
    uint64_t seed = 0;
    int64_t steps = 0;
    std::string config_hash;
};

std::string model_config_hash(const ModelConfig& cfg);

// langs empty: report whichever languages appear in docs (absent ones NaN);
// explicit langs: every requested language must have documents
EvalReport perplexity(const TransformerLM& model, const std::vector<Document>& docs, const Tokenizer& tok,
                      const std::vector<Lang>& langs = {}, const RunMeta& meta = {});
EvalReport perplexity(const MoESystem& sys, const std::vector<Document>& docs, const std::vector<Lang>& langs = {},
                      const RunMeta& meta = {});

struct ForgottenKnowledge {
    double abs = 0.0;  // nats; negative means the language improved
    double pct = 0.0;  // percent of the phase-end loss
};
ForgottenKnowledge forgotten_knowledge(double loss_at_phase_end, double loss_final);

enum class ForgettingExperiment { A_sequential, B_single_session, C_moe };
const char* experiment_name(ForgettingExperiment e);

struct ForgettingEntry {
    bool applicable = true;  // false when no training followed the phase
    double loss_at_phase_end = 0.0;
    double loss_final = 0.0;
    double forgotten_abs = 0.0;
    double forgotten_pct = 0.0;
};
struct ForgettingRecord {
    ForgettingExperiment experiment = ForgettingExperiment::A_sequential;
    std::array<ForgettingEntry, kNumLangs> languages{};
};

struct ForgettingStudyConfig {
    ModelConfig student_cfg;
    DistillConfig distill_cfg;  // steps is the per-phase budget
    std::array<Lang, kNumLangs> order{Lang::en, Lang::fr, Lang::de, Lang::py};
};
struct ForgettingStudyResult {
    std::array<ForgettingRecord, 3> records;  // sequential, single-session, MoE
    DistillLog log_a;
    DistillLog log_b;
    std::array<DistillLog, kNumLangs> log_c;
    TransformerLM student_a;
    TransformerLM student_b;
    MoESystem system_c;
};
// A: one student through the languages in order. B: the same total budget in
// one session over balanced batches. C: independent experts assembled behind
// the router; its final per-language losses are measured with oracle routing
// so the record reflects the experts, not classifier mistakes.
ForgettingStudyResult run_forgetting_study(const TransformerLM& teacher, const std::vector<Document>& train_docs,
                                           const std::vector<Document>& eval_docs, const Tokenizer& tok,
                                           const ForgettingStudyConfig& cfg, const Router& router, uint64_t seed,
                                           const std::filesystem::path& work_dir);
void write_fk_csv(const std::filesystem::path& path, std::span<const ForgettingRecord> records);

struct StudyRow {
    std::string setting;
    double final_eval_ce = 0.0;
    double final_eval_ppl = 0.0;
};
struct StudyReport {
    std::string study;
    std::vector<StudyRow> rows;
    std::vector<std::pair<std::string, DistillLog>> curves;  // one per arm, in row order
    std::vector<std::string> notes;                          // full-scale reference annotations
};

std::vector<std::string> default_alpha_settings();

// Controlled comparisons: every arm runs from the same seed, so student
// initialization and batch order are identical across arms.
StudyReport run_alpha_study(const TransformerLM& teacher, const ModelConfig& student_cfg,
                            const std::vector<Document>& train_docs, const std::vector<Document>& eval_docs,
                            const Tokenizer& tok, const DistillConfig& base_cfg,
                            const std::vector<std::string>& settings, uint64_t seed);
StudyReport run_loss_mode_study(const TransformerLM& teacher, const ModelConfig& student_cfg,
                                const std::vector<Document>& train_docs, const std::vector<Document>& eval_docs,
                                const Tokenizer& tok, const DistillConfig& base_cfg, uint64_t seed);

// audit for combined-mode logs: every logged total re-derives from lm, kd,
// and alpha through the shared blend function, bit for bit
bool combined_identity_holds(const DistillLog& log);

void write_study_csv(const std::filesystem::path& path, const StudyReport& report);

// reference numbers from the original full-scale training run, serialized as
// JSON for report annotation
std::string full_scale_references_json();

}  // namespace modmoe
