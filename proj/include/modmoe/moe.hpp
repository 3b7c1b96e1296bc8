#pragma once

#include <array>
#include <filesystem>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "modmoe/distill.hpp"
#include "modmoe/model.hpp"
#include "modmoe/optim.hpp"
#include "modmoe/router.hpp"

namespace modmoe {

enum class MoESetup { PLE, JEET, MoE_CE };
const char* setup_name(MoESetup s);
MoESetup parse_setup(const std::string& name);

enum class EmbeddingSource { owned, shared };

struct ExpertSlot {
    Lang lang = Lang::en;
    TransformerLM model;
    bool frozen = false;
    EmbeddingSource embedding_source = EmbeddingSource::owned;
};

struct InferenceSettings {
    std::set<Lang> routable{Lang::en, Lang::fr, Lang::de, Lang::py};
    bool use_common = false;
};

struct MoESystem {
    MoESetup setup = MoESetup::PLE;
    std::array<ExpertSlot, kNumLangs> experts;  // class order
    std::optional<ExpertSlot> common;
    TensorF shared_embedding;  // defined for JEET and MoE-CE
    Router router;
    Tokenizer tok;
    InferenceSettings settings;
};

// elementwise mean of two logit tensors
TensorF combine_logits(const TensorF& a, const TensorF& b);

// assembles frozen, independently trained experts (class order)
MoESystem build_ple(std::array<TransformerLM, kNumLangs> students, Router router, Tokenizer tok);

// Drives one shared-embedding system batch by batch. Each language batch
// distills into that language's expert and the shared embedding; under
// MoE-CE the common expert learns from every batch through the same
// backward pass. Exposed so tests can observe single-step isolation.
class MoETrainer {
  public:
    MoETrainer(MoESystem& sys, const TransformerLM& teacher, const DistillConfig& cfg);
    DistillStepRecord step(Lang lang, const Batch& batch, int round);

  private:
    MoESystem& sys_;
    const TransformerLM& teacher_;
    DistillConfig cfg_;
    std::array<std::unique_ptr<AdamWF>, kNumLangs> expert_opt_;
    std::unique_ptr<AdamWF> common_opt_;
    std::unique_ptr<AdamWF> emb_opt_;
    int batches_seen_ = 0;
};

struct MoETrainResult {
    MoESystem system;
    DistillLog log;
};

// cfg.steps rounds, one batch per language per round in class order
MoETrainResult train_jeet(const TransformerLM& teacher, const ModelConfig& student_cfg,
                          const std::vector<Document>& train_docs, const Tokenizer& tok, const DistillConfig& cfg,
                          uint64_t seed, Router router);
MoETrainResult train_moe_ce(const TransformerLM& teacher, const ModelConfig& student_cfg,
                            const std::vector<Document>& train_docs, const Tokenizer& tok, const DistillConfig& cfg,
                            uint64_t seed, Router router);

// per-sequence logits for the first context_len tokens of each text, routed
// and (when a routed expert and the common expert both apply) combined
std::vector<TensorF> moe_infer(const MoESystem& sys, const std::vector<std::string>& texts);

struct GridRow {
    std::set<Lang> routable;
    bool use_common = false;
    std::array<double, kNumLangs> ppl{};
    double ppl_all = 0.0;
};
std::string routable_label(const std::set<Lang>& routable);
std::set<Lang> parse_routable(const std::string& label);

// the full inference-settings sweep: every subset used in the reference
// grid, each with and without the common expert where one exists
std::vector<InferenceSettings> standard_grid(bool has_common);

// Per-true-language NLL totals under the system's own settings. With
// oracle_routing each document is dispatched by its label instead of the
// classifier, which makes pass-through comparisons router-independent.
std::array<NllSum, kNumLangs> evaluate_by_lang(const MoESystem& sys, const std::vector<Document>& docs,
                                               bool oracle_routing = false);

std::vector<GridRow> evaluate_settings_grid(const MoESystem& sys, const std::vector<Document>& eval_docs,
                                            const std::vector<InferenceSettings>& grid);
void write_grid_csv(const std::filesystem::path& path, const std::vector<GridRow>& rows);

void save_moe(const std::filesystem::path& dir, const MoESystem& sys, uint64_t seed);
MoESystem load_moe(const std::filesystem::path& dir);

}  // namespace modmoe
