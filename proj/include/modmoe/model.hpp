#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "modmoe/corpus.hpp"
#include "modmoe/ops.hpp"
#include "modmoe/rng.hpp"
#include "modmoe/tensor.hpp"
#include "modmoe/tokenizer.hpp"

namespace modmoe {

struct ModelConfig {
    int n_layers = 4;
    int n_heads = 4;
    int d_model = 128;
    int d_ff = 512;
    int context_len = 64;
    int vocab_size = 2048;
    bool tie_embeddings = true;

    void validate() const;
    bool operator==(const ModelConfig&) const = default;
};

// desk-scale student used by the distillation experiments
ModelConfig student_config(int vocab_size, int context_len);

int64_t param_count(const ModelConfig& cfg);

// Pre-norm decoder-only transformer: learned positions, GELU MLP, weight-tied
// output head by default.
class TransformerLM {
public:
    TransformerLM() = default;
    TransformerLM(ModelConfig cfg, Rng& rng);
    // shares the given token embedding tensor instead of creating one
    TransformerLM(ModelConfig cfg, TensorF shared_tok_emb, Rng& rng);

    // ids laid out row-major as [batch, time]; returns logits [batch*time, vocab]
    TensorF forward(std::span<const int32_t> ids, int batch, int time) const;

    const ModelConfig& config() const { return cfg_; }
    const std::vector<TensorF>& params() const { return params_; }
    TensorF tok_emb() const { return params_[0]; }
    int64_t param_count() const;

    void save(const std::filesystem::path& stem, uint64_t seed, int64_t step, bool include_tok_emb = true) const;
    static TransformerLM load(const std::filesystem::path& stem, TensorF shared_tok_emb = {});

private:
    void build(Rng& rng, TensorF shared_tok_emb);

    ModelConfig cfg_;
    std::vector<TensorF> params_;
};

// mean cross-entropy over live positions plus the live-position count,
// accumulated in double in row order
struct NllSum {
    double sum = 0.0;
    int64_t count = 0;
    double mean() const { return sum / static_cast<double>(count); }
};
NllSum nll_sum(const TensorF& logits, std::span<const int32_t> targets, int32_t ignore_index = kIgnoreIndex);

// training loss: mean next-token cross-entropy over unmasked positions
TensorF lm_loss(const TensorF& logits, std::span<const int32_t> targets, std::span<const uint8_t> target_mask);

// next-token view of a packed batch: inputs are columns [0, T-1), targets and
// their mask are shifted one to the right
struct LmRows {
    std::vector<int32_t> inputs, targets;
    std::vector<uint8_t> target_mask;
    int rows = 0;
    int time = 0;
};
LmRows shift_for_lm(const Batch& batch);

// Deterministic held-out evaluation: per document, windows of context_len+1
// tokens at stride context_len over [<s>] + encode(text), accumulated in
// document order. Documents shorter than two tokens are skipped.
using ForwardFn = std::function<TensorF(std::span<const int32_t> ids, int rows, int time)>;
NllSum eval_doc_nll(const ForwardFn& fwd, int context_len, const Document& doc, const Tokenizer& tok);
NllSum eval_nll(const TransformerLM& model, const std::vector<Document>& docs, const Tokenizer& tok);
double eval_cross_entropy(const TransformerLM& model, const std::vector<Document>& docs, const Tokenizer& tok);
std::array<double, kNumLangs> eval_ce_by_lang(const TransformerLM& model, const std::vector<Document>& docs,
                                              const Tokenizer& tok);

struct TeacherHyper {
    int micro_batch = 8;
    int virtual_batch = 16;  // micro_batch * accumulation factor
    int steps = 300;
    double lr = 3e-4;
    int warmup_steps = 20;
    double clip = 1.0;
    double weight_decay = 0.1;
    double beta1 = 0.9;
    double beta2 = 0.95;
    int val_every = 0;  // 0 disables periodic validation records
};

struct TrainStepRecord {
    int64_t step;
    double loss;
    double lr;
};
struct ValRecord {
    int64_t step;
    Lang lang;
    double ce;
};
struct TrainLog {
    std::vector<TrainStepRecord> steps;
    std::vector<ValRecord> val;
};

struct TeacherResult {
    TransformerLM model;
    TrainLog log;
};

// language-mixed training with gradient accumulation and norm clipping
TeacherResult train_teacher(const ModelConfig& cfg, const std::vector<Document>& train_docs,
                            const std::vector<Document>& val_docs, const Tokenizer& tok, const TeacherHyper& hyper,
                            uint64_t seed);

}  // namespace modmoe
