#include "modmoe/distill.hpp"

#include <cmath>

#include "modmoe/io.hpp"
#include "modmoe/optim.hpp"

namespace modmoe {

void DistillConfig::validate() const {
    const auto in_unit = [](double v) { return v >= 0.0 && v <= 1.0; };
    if (!in_unit(alpha_fixed)) throw std::runtime_error("alpha_fixed " + fmt_float(alpha_fixed) + " must be in [0,1]");
    if (!in_unit(alpha_start) || !in_unit(alpha_end))
        throw std::runtime_error("adaptive alpha range [" + fmt_float(alpha_start) + ", " + fmt_float(alpha_end) +
                                 "] must lie in [0,1]");
    if (alternation_period < 1)
        throw std::runtime_error("alternation period must be positive, got " + std::to_string(alternation_period));
    if (steps < 1) throw std::runtime_error("distillation needs at least one step, got " + std::to_string(steps));
    if (micro_batch < 1) throw std::runtime_error("micro batch must be positive, got " + std::to_string(micro_batch));
    if (eval_every < 0) throw std::runtime_error("eval interval must be nonnegative, got " + std::to_string(eval_every));
}

float total_loss_value(float lm, float kd, float alpha) { return alpha * lm + (1.0f - alpha) * kd; }

double alpha_at(const DistillConfig& cfg, int step, int total_steps) {
    if (cfg.alpha_mode == AlphaMode::fixed) return cfg.alpha_fixed;
    if (total_steps <= 0) return cfg.alpha_start;
    const double frac = static_cast<double>(step) / static_cast<double>(total_steps);
    return cfg.alpha_start + (cfg.alpha_end - cfg.alpha_start) * frac;
}

TensorF step_objective(const DistillConfig& cfg, int step, const TensorF& lm, const TensorF& kd) {
    if (cfg.loss_mode == LossMode::combined) return total_loss(lm, kd, alpha_at(cfg, step, cfg.steps));
    return (step / cfg.alternation_period) % 2 == 0 ? kd : lm;
}

void write_distill_csv(const std::filesystem::path& path, const DistillLog& log) {
    std::vector<std::vector<std::string>> rows;
    rows.reserve(log.steps.size());
    for (const auto& s : log.steps)
        rows.push_back({std::to_string(s.step), fmt_float(s.loss_lm), fmt_float(s.loss_kd), fmt_float(s.loss_total),
                        fmt_float(s.alpha), s.phase_lang});
    write_csv(path, {"step", "loss_lm", "loss_kd", "loss_total", "alpha", "phase_lang"}, rows);
}

void write_eval_curve_csv(const std::filesystem::path& path, const DistillLog& log) {
    std::vector<std::vector<std::string>> rows;
    rows.reserve(log.evals.size());
    for (const auto& e : log.evals) {
        std::vector<std::string> row{std::to_string(e.step)};
        for (const Lang l : kAllLangs) row.push_back(fmt_float(e.ce[static_cast<size_t>(l)]));
        rows.push_back(std::move(row));
    }
    write_csv(path, {"step", "ce_en", "ce_fr", "ce_de", "ce_py"}, rows);
}

StepLosses distill_losses(const TransformerLM& teacher, const TransformerLM& student, const Batch& batch,
                          const DistillConfig& cfg, int step) {
    const auto rows = shift_for_lm(batch);
    TensorF teacher_logits;
    {
        NoGradGuard guard;
        teacher_logits = teacher.forward(rows.inputs, rows.rows, rows.time);
    }
    auto student_logits = student.forward(rows.inputs, rows.rows, rows.time);
    auto lm = lm_loss(student_logits, rows.targets, rows.target_mask);
    auto kd = rkl_loss(student_logits, teacher_logits, rows.target_mask);
    auto objective = step_objective(cfg, step, lm, kd);
    return {objective, static_cast<double>(lm.item()), static_cast<double>(kd.item()),
            alpha_at(cfg, step, cfg.steps)};
}

namespace {

std::string derive_phase_label(const std::vector<Document>& docs) {
    if (docs.empty()) return "all";
    const Lang first = docs.front().lang;
    for (const auto& d : docs)
        if (d.lang != first) return "all";
    return lang_name(first);
}

}  // namespace

DistillLog distill_into(const TransformerLM& teacher, TransformerLM& student, const std::vector<Document>& docs,
                        const Tokenizer& tok, const DistillConfig& cfg, uint64_t seed,
                        const std::string& phase_label, const std::vector<Document>* eval_docs) {
    cfg.validate();
    if (teacher.config().vocab_size != student.config().vocab_size)
        throw std::runtime_error("student vocab " + std::to_string(student.config().vocab_size) +
                                 " does not match teacher vocab " + std::to_string(teacher.config().vocab_size));
    const std::string label = phase_label.empty() ? derive_phase_label(docs) : phase_label;

    Rng rng(seed);
    BatchStream stream(docs, tok, student.config().context_len, cfg.micro_batch, BatchMode::mixed,
                       rng.fork("distill-batches").next_u64());

    AdamW<float>::Options opt;
    opt.lr = cfg.lr;
    opt.beta1 = cfg.beta1;
    opt.beta2 = cfg.beta2;
    opt.weight_decay = cfg.weight_decay;
    AdamW<float> optim(student.params(), opt);

    DistillLog log;
    for (int step = 0; step < cfg.steps; ++step) {
        const double warm = cfg.warmup_steps > 0
                                ? std::min(1.0, static_cast<double>(step + 1) / static_cast<double>(cfg.warmup_steps))
                                : 1.0;
        optim.set_lr(cfg.lr * warm);
        optim.zero_grad();
        auto losses = distill_losses(teacher, student, stream.next(), cfg, step);
        const double total = static_cast<double>(losses.objective.item());
        if (!std::isfinite(total)) throw std::runtime_error("training diverged at step " + std::to_string(step));
        backward(losses.objective);
        clip_grad_norm(student.params(), cfg.clip);
        optim.step();
        log.steps.push_back({step, losses.lm, losses.kd, total, losses.alpha, label});
        if (eval_docs && cfg.eval_every > 0 && ((step + 1) % cfg.eval_every == 0 || step + 1 == cfg.steps))
            log.evals.push_back({step, eval_ce_by_lang(student, *eval_docs, tok)});
    }
    return log;
}

DistillResult distill(const TransformerLM& teacher, const ModelConfig& student_cfg,
                      const std::vector<Document>& docs, const Tokenizer& tok, const DistillConfig& cfg,
                      uint64_t seed, const std::vector<Document>* eval_docs) {
    student_cfg.validate();
    Rng rng(seed);
    auto init_rng = rng.fork("student-init");
    TransformerLM student(student_cfg, init_rng);
    auto log = distill_into(teacher, student, docs, tok, cfg, seed, "", eval_docs);
    return {std::move(student), std::move(log)};
}

SequentialResult sequential_distill(const TransformerLM& teacher, const ModelConfig& student_cfg,
                                    const std::array<Lang, kNumLangs>& language_order,
                                    const std::vector<Document>& train_docs,
                                    const std::vector<Document>& eval_docs, const Tokenizer& tok,
                                    const DistillConfig& cfg, uint64_t seed, const std::filesystem::path& out_dir) {
    std::array<int, kNumLangs> seen{};
    for (const Lang l : language_order) ++seen[static_cast<size_t>(l)];
    for (const int c : seen)
        if (c != 1) throw std::runtime_error("language order must be a permutation of the four classes");

    student_cfg.validate();
    Rng rng(seed);
    auto init_rng = rng.fork("student-init");
    SequentialResult result{TransformerLM(student_cfg, init_rng), {}, {}};

    std::filesystem::create_directories(out_dir);
    for (size_t phase = 0; phase < language_order.size(); ++phase) {
        const Lang lang = language_order[phase];
        std::vector<Document> subset;
        for (const auto& d : train_docs)
            if (d.lang == lang) subset.push_back(d);
        if (subset.empty())
            throw std::runtime_error(std::string("no training documents for language ") + lang_name(lang));

        const uint64_t phase_seed = rng.fork(std::string("phase-") + lang_name(lang)).next_u64();
        auto phase_log = distill_into(teacher, result.student, subset, tok, cfg, phase_seed, lang_name(lang), &eval_docs);
        const int base = static_cast<int>(phase) * cfg.steps;
        for (auto& s : phase_log.steps) {
            s.step += base;
            result.log.steps.push_back(std::move(s));
        }
        for (auto& e : phase_log.evals) {
            e.step += base;
            result.log.evals.push_back(e);
        }

        const auto stem = out_dir / ("phase_" + std::to_string(phase) + "_" + lang_name(lang));
        result.student.save(stem, seed, base + cfg.steps);
        result.phases.push_back({lang, eval_ce_by_lang(result.student, eval_docs, tok), stem.string()});
    }
    return result;
}

}  // namespace modmoe
