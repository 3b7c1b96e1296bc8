#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "modmoe/distill.hpp"
#include "modmoe/model.hpp"

namespace modmoe {

// Flat run configuration. Every field maps to one dotted key in the JSON
// config file; unknown keys are rejected by name.
struct RunConfig {
    std::string corpus_dir = "data";
    int corpus_max_docs_per_lang = 0;  // 0 = all
    double corpus_val_fraction = 0.05;

    int tokenizer_vocab_size = 2048;
    int tokenizer_max_docs_per_lang = 2000;  // BPE training subsample, 0 = all

    int teacher_layers = 4;
    int teacher_heads = 4;
    int teacher_d_model = 128;
    int teacher_d_ff = 512;
    int teacher_context_len = 64;
    int teacher_steps = 300;
    int teacher_micro_batch = 8;
    int teacher_virtual_batch = 16;
    double teacher_lr = 3e-4;
    int teacher_warmup_steps = 20;
    double teacher_clip = 1.0;
    double teacher_weight_decay = 0.1;
    int teacher_val_every = 50;

    int student_layers = 2;
    int student_heads = 2;
    int student_d_model = 64;
    int student_d_ff = 256;

    int distill_steps = 300;
    int distill_micro_batch = 8;
    double distill_lr = 3e-4;
    int distill_warmup_steps = 10;
    std::string distill_alpha_mode = "adaptive";  // adaptive | fixed | fixed_<v>
    double distill_alpha_fixed = 0.5;
    double distill_alpha_start = 0.2;
    double distill_alpha_end = 0.8;
    std::string distill_loss_mode = "combined";  // combined | alternating
    int distill_alternation_period = 1;
    double distill_clip = 1.0;
    double distill_weight_decay = 0.1;
    int distill_eval_every = 0;

    std::string router_trainer = "logreg_batch";
    double router_reg_lambda = 1e-4;
    int router_epochs = 300;
    double router_heldout_fraction = 0.2;

    std::string moe_setup = "moe-ce";
    int moe_steps = 300;  // training rounds, one batch per language per round
    std::string moe_routable = "en,fr,de,py";
    bool moe_use_common = true;

    int study_steps = 150;           // per arm, alpha and loss-mode studies
    int study_forgetting_steps = 300;  // per phase
    int study_eval_every = 25;

    int eval_max_docs_per_lang = 0;  // cap on held-out docs at eval time, 0 = all

    ModelConfig teacher_config(int vocab_size) const;
    ModelConfig student_config(int vocab_size) const;
    TeacherHyper teacher_hyper() const;
    DistillConfig distill_config() const;
};

// Parses a flat JSON object of dotted keys. Unknown key -> error naming the
// key; wrong value type -> error naming the key.
RunConfig load_config(const std::filesystem::path& path);
void apply_config_entry(RunConfig& cfg, const std::string& key, const std::string& value);

// canonical key=value listing of every field, sorted by key
std::map<std::string, std::string> config_entries(const RunConfig& cfg);
std::string config_hash(const RunConfig& cfg);

struct RunManifest {
    std::string stage;
    uint64_t seed = 0;
    std::string config_hash;
    std::string tool_version;
    std::vector<std::string> inputs;
    std::vector<std::string> outputs;
};

extern const char* kToolVersion;

void write_manifest(const std::filesystem::path& path, const RunManifest& m);

}  // namespace modmoe
