#pragma once

#include <array>
#include <filesystem>
#include <string>
#include <vector>

#include "modmoe/corpus.hpp"
#include "modmoe/model.hpp"
#include "modmoe/ops.hpp"
#include "modmoe/tokenizer.hpp"

namespace modmoe {

enum class AlphaMode { fixed, adaptive };
enum class LossMode { combined, alternating };

struct DistillConfig {
    AlphaMode alpha_mode = AlphaMode::fixed;
    double alpha_fixed = 0.5;
    double alpha_start = 0.2;  // adaptive ramp: KD-heavy early, LM-heavy late
    double alpha_end = 0.8;
    LossMode loss_mode = LossMode::combined;
    int alternation_period = 1;
    int steps = 300;
    int micro_batch = 8;
    double lr = 3e-4;
    int warmup_steps = 10;
    double clip = 1.0;
    double weight_decay = 0.1;
    double beta1 = 0.9;
    double beta2 = 0.95;
    int eval_every = 0;  // >0: record held-out CE every this many steps

    void validate() const;
};

// Single definition shared by the training graph and any standalone
// recomputation, so both produce the same float bits.
float total_loss_value(float lm, float kd, float alpha);

double alpha_at(const DistillConfig& cfg, int step, int total_steps);

// Mean over unmasked rows of KL(q_student || p_teacher), both taken as
// softmax over the last dimension. The teacher side is treated as data:
// no gradient is attached to it. Accumulation runs in double.
template <typename T>
Tensor<T> rkl_loss(const Tensor<T>& student_logits, const Tensor<T>& teacher_logits,
                   std::span<const uint8_t> pad_mask = {}) {
    if (student_logits.shape() != teacher_logits.shape())
        throw std::runtime_error(std::string("rkl_loss: shape mismatch ") + shape_str(student_logits.shape()) +
                                 " vs " + shape_str(teacher_logits.shape()));
    if (student_logits.ndim() != 2)
        throw std::runtime_error("rkl_loss: logits must be 2-D, got " + shape_str(student_logits.shape()));
    const int n = student_logits.dim(0), v = student_logits.dim(1);
    if (!pad_mask.empty() && static_cast<int>(pad_mask.size()) != n)
        throw std::runtime_error("rkl_loss: mask of size " + std::to_string(pad_mask.size()) + " for " +
                                 std::to_string(n) + " rows");

    auto q = std::make_shared<std::vector<double>>(static_cast<size_t>(n) * v);
    auto diff = std::make_shared<std::vector<double>>(static_cast<size_t>(n) * v);
    auto row_kl = std::make_shared<std::vector<double>>(static_cast<size_t>(n));
    std::vector<uint8_t> live(static_cast<size_t>(n), 1);
    if (!pad_mask.empty()) live.assign(pad_mask.begin(), pad_mask.end());

    const T* sv = student_logits.value().data();
    const T* tv = teacher_logits.value().data();
    double total = 0.0;
    int64_t count = 0;
    std::vector<double> ls(static_cast<size_t>(v)), lt(static_cast<size_t>(v));
    for (int r = 0; r < n; ++r) {
        if (!live[static_cast<size_t>(r)]) continue;
        const T* srow = sv + static_cast<size_t>(r) * v;
        const T* trow = tv + static_cast<size_t>(r) * v;
        double smx = srow[0], tmx = trow[0];
        for (int j = 1; j < v; ++j) {
            smx = std::max(smx, static_cast<double>(srow[j]));
            tmx = std::max(tmx, static_cast<double>(trow[j]));
        }
        double sden = 0.0, tden = 0.0;
        for (int j = 0; j < v; ++j) {
            ls[static_cast<size_t>(j)] = static_cast<double>(srow[j]) - smx;
            lt[static_cast<size_t>(j)] = static_cast<double>(trow[j]) - tmx;
            sden += std::exp(ls[static_cast<size_t>(j)]);
            tden += std::exp(lt[static_cast<size_t>(j)]);
        }
        const double slog = std::log(sden), tlog = std::log(tden);
        double kl = 0.0;
        double* qrow = q->data() + static_cast<size_t>(r) * v;
        double* drow = diff->data() + static_cast<size_t>(r) * v;
        for (int j = 0; j < v; ++j) {
            const double lsj = ls[static_cast<size_t>(j)] - slog;
            const double ltj = lt[static_cast<size_t>(j)] - tlog;
            qrow[j] = std::exp(lsj);
            drow[j] = lsj - ltj;
            kl += qrow[j] * drow[j];
        }
        (*row_kl)[static_cast<size_t>(r)] = kl;
        total += kl;
        ++count;
    }
    if (count == 0) throw std::runtime_error("rkl_loss: all positions masked");

    auto out = Tensor<T>::scalar(static_cast<T>(total / static_cast<double>(count)));
    auto sn = student_logits.node();
    detail::attach(out, {student_logits}, [sn, q, diff, row_kl, live = std::move(live), n, v, count](Node<T>& self) {
        sn->ensure_grad();
        const double g = static_cast<double>(self.grad[0]) / static_cast<double>(count);
        T* ds = sn->grad.data();
        for (int r = 0; r < n; ++r) {
            if (!live[static_cast<size_t>(r)]) continue;
            const double* qrow = q->data() + static_cast<size_t>(r) * v;
            const double* drow = diff->data() + static_cast<size_t>(r) * v;
            const double kl = (*row_kl)[static_cast<size_t>(r)];
            T* grow = ds + static_cast<size_t>(r) * v;
            for (int j = 0; j < v; ++j) grow[j] += static_cast<T>(g * qrow[j] * (drow[j] - kl));
        }
    });
    return out;
}

// alpha * lm + (1 - alpha) * kd
template <typename T>
Tensor<T> total_loss(const Tensor<T>& lm, const Tensor<T>& kd, double alpha) {
    if (lm.numel() != 1 || kd.numel() != 1)
        throw std::runtime_error(std::string("total_loss: inputs must be scalars, got ") + shape_str(lm.shape()) +
                                 " and " + shape_str(kd.shape()));
    T value;
    if constexpr (std::is_same_v<T, float>) {
        value = total_loss_value(lm.item(), kd.item(), static_cast<float>(alpha));
    } else {
        value = static_cast<T>(alpha) * lm.item() + static_cast<T>(1.0 - alpha) * kd.item();
    }
    auto out = Tensor<T>::scalar(value);
    auto ln = lm.node();
    auto kn = kd.node();
    detail::attach(out, {lm, kd}, [ln, kn, alpha](Node<T>& self) {
        const T g = self.grad[0];
        if (ln->requires_grad) {
            ln->ensure_grad();
            ln->grad[0] += g * static_cast<T>(alpha);
        }
        if (kn->requires_grad) {
            kn->ensure_grad();
            kn->grad[0] += g * static_cast<T>(1.0 - alpha);
        }
    });
    return out;
}

// combined mode blends via total_loss; alternating mode picks kd on even
// step blocks of alternation_period and lm on odd ones
TensorF step_objective(const DistillConfig& cfg, int step, const TensorF& lm, const TensorF& kd);

struct DistillStepRecord {
    int step;
    double loss_lm;
    double loss_kd;
    double loss_total;
    double alpha;
    std::string phase_lang;
};
struct EvalCurvePoint {
    int step = 0;
    std::array<double, kNumLangs> ce{};
};
struct DistillLog {
    std::vector<DistillStepRecord> steps;
    std::vector<EvalCurvePoint> evals;  // populated when eval_every > 0 and eval docs are supplied
};
void write_distill_csv(const std::filesystem::path& path, const DistillLog& log);
void write_eval_curve_csv(const std::filesystem::path& path, const DistillLog& log);

// objective graph plus scalar logging values for one batch
struct StepLosses {
    TensorF objective;
    double lm;
    double kd;
    double alpha;
};
StepLosses distill_losses(const TransformerLM& teacher, const TransformerLM& student, const Batch& batch,
                          const DistillConfig& cfg, int step);

// runs cfg.steps distillation steps on an existing student, with a fresh
// optimizer; phase_label tags the log rows (derived from docs when empty)
DistillLog distill_into(const TransformerLM& teacher, TransformerLM& student, const std::vector<Document>& docs,
                        const Tokenizer& tok, const DistillConfig& cfg, uint64_t seed,
                        const std::string& phase_label = "", const std::vector<Document>* eval_docs = nullptr);

struct DistillResult {
    TransformerLM student;
    DistillLog log;
};
DistillResult distill(const TransformerLM& teacher, const ModelConfig& student_cfg,
                      const std::vector<Document>& docs, const Tokenizer& tok, const DistillConfig& cfg,
                      uint64_t seed, const std::vector<Document>* eval_docs = nullptr);

struct PhaseSnapshot {
    Lang phase_lang;
    std::array<double, kNumLangs> eval_ce;
    std::string ckpt_stem;
};
struct SequentialResult {
    TransformerLM student;
    DistillLog log;
    std::vector<PhaseSnapshot> phases;
};
// one student distilled through the languages in order, cfg.steps per phase,
// with a checkpoint and per-language eval snapshot at each phase boundary
SequentialResult sequential_distill(const TransformerLM& teacher, const ModelConfig& student_cfg,
                                    const std::array<Lang, kNumLangs>& language_order,
                                    const std::vector<Document>& train_docs,
                                    const std::vector<Document>& eval_docs, const Tokenizer& tok,
                                    const DistillConfig& cfg, uint64_t seed, const std::filesystem::path& out_dir);

}  // namespace modmoe
