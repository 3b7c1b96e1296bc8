#include "modmoe/config.hpp"

#include <charconv>
#include <functional>
#include <stdexcept>

#include <json.hpp>

#include "modmoe/io.hpp"

namespace modmoe {

const char* kToolVersion = "modmoe 1.0.0";

namespace {

enum class Kind { integer, real, text, boolean };

struct Entry {
    Kind kind;
    std::function<void(RunConfig&, const std::string&)> set;
    std::function<std::string(const RunConfig&)> get;
};

long long parse_int(const std::string& key, const std::string& value) {
    long long out = 0;
    const auto* end = value.data() + value.size();
    auto [ptr, ec] = std::from_chars(value.data(), end, out);
    if (ec != std::errc() || ptr != end)
        throw std::runtime_error("invalid value for config key " + key + ": '" + value + "'");
    return out;
}

double parse_real(const std::string& key, const std::string& value) {
    try {
        size_t used = 0;
        const double out = std::stod(value, &used);
        if (used != value.size()) throw std::invalid_argument(value);
        return out;
    } catch (const std::exception&) {
        throw std::runtime_error("invalid value for config key " + key + ": '" + value + "'");
    }
}

Entry entry(int RunConfig::*field) {
    return {Kind::integer,
            [field](RunConfig& c, const std::string& v) { c.*field = static_cast<int>(parse_int("", v)); },
            [field](const RunConfig& c) { return std::to_string(c.*field); }};
}

Entry entry(double RunConfig::*field) {
    return {Kind::real, [field](RunConfig& c, const std::string& v) { c.*field = parse_real("", v); },
            [field](const RunConfig& c) { return fmt_float(c.*field); }};
}

Entry entry(std::string RunConfig::*field) {
    return {Kind::text, [field](RunConfig& c, const std::string& v) { c.*field = v; },
            [field](const RunConfig& c) { return c.*field; }};
}

Entry entry(bool RunConfig::*field) {
    return {Kind::boolean,
            [field](RunConfig& c, const std::string& v) {
                if (v == "true")
                    c.*field = true;
                else if (v == "false")
                    c.*field = false;
                else
                    throw std::invalid_argument(v);
            },
            [field](const RunConfig& c) { return c.*field ? "true" : "false"; }};
}

const std::map<std::string, Entry>& key_table() {
    static const std::map<std::string, Entry> table = {
        {"corpus.dir", entry(&RunConfig::corpus_dir)},
        {"corpus.max_docs_per_lang", entry(&RunConfig::corpus_max_docs_per_lang)},
        {"corpus.val_fraction", entry(&RunConfig::corpus_val_fraction)},
        {"tokenizer.vocab_size", entry(&RunConfig::tokenizer_vocab_size)},
        {"tokenizer.max_docs_per_lang", entry(&RunConfig::tokenizer_max_docs_per_lang)},
        {"teacher.layers", entry(&RunConfig::teacher_layers)},
        {"teacher.heads", entry(&RunConfig::teacher_heads)},
        {"teacher.d_model", entry(&RunConfig::teacher_d_model)},
        {"teacher.d_ff", entry(&RunConfig::teacher_d_ff)},
        {"teacher.context_len", entry(&RunConfig::teacher_context_len)},
        {"teacher.steps", entry(&RunConfig::teacher_steps)},
        {"teacher.micro_batch", entry(&RunConfig::teacher_micro_batch)},
        {"teacher.virtual_batch", entry(&RunConfig::teacher_virtual_batch)},
        {"teacher.lr", entry(&RunConfig::teacher_lr)},
        {"teacher.warmup_steps", entry(&RunConfig::teacher_warmup_steps)},
        {"teacher.clip", entry(&RunConfig::teacher_clip)},
        {"teacher.weight_decay", entry(&RunConfig::teacher_weight_decay)},
        {"teacher.val_every", entry(&RunConfig::teacher_val_every)},
        {"student.layers", entry(&RunConfig::student_layers)},
        {"student.heads", entry(&RunConfig::student_heads)},
        {"student.d_model", entry(&RunConfig::student_d_model)},
        {"student.d_ff", entry(&RunConfig::student_d_ff)},
        {"distill.steps", entry(&RunConfig::distill_steps)},
        {"distill.micro_batch", entry(&RunConfig::distill_micro_batch)},
        {"distill.lr", entry(&RunConfig::distill_lr)},
        {"distill.warmup_steps", entry(&RunConfig::distill_warmup_steps)},
        {"distill.alpha_mode", entry(&RunConfig::distill_alpha_mode)},
        {"distill.alpha_fixed", entry(&RunConfig::distill_alpha_fixed)},
        {"distill.alpha_start", entry(&RunConfig::distill_alpha_start)},
        {"distill.alpha_end", entry(&RunConfig::distill_alpha_end)},
        {"distill.loss_mode", entry(&RunConfig::distill_loss_mode)},
        {"distill.alternation_period", entry(&RunConfig::distill_alternation_period)},
        {"distill.clip", entry(&RunConfig::distill_clip)},
        {"distill.weight_decay", entry(&RunConfig::distill_weight_decay)},
        {"distill.eval_every", entry(&RunConfig::distill_eval_every)},
        {"router.trainer", entry(&RunConfig::router_trainer)},
        {"router.reg_lambda", entry(&RunConfig::router_reg_lambda)},
        {"router.epochs", entry(&RunConfig::router_epochs)},
        {"router.heldout_fraction", entry(&RunConfig::router_heldout_fraction)},
        {"moe.setup", entry(&RunConfig::moe_setup)},
        {"moe.steps", entry(&RunConfig::moe_steps)},
        {"moe.routable", entry(&RunConfig::moe_routable)},
        {"moe.use_common", entry(&RunConfig::moe_use_common)},
        {"study.steps", entry(&RunConfig::study_steps)},
        {"study.forgetting_steps", entry(&RunConfig::study_forgetting_steps)},
        {"study.eval_every", entry(&RunConfig::study_eval_every)},
        {"eval.max_docs_per_lang", entry(&RunConfig::eval_max_docs_per_lang)},
    };
    return table;
}

}  // namespace

void apply_config_entry(RunConfig& cfg, const std::string& key, const std::string& value) {
    const auto& table = key_table();
    const auto it = table.find(key);
    if (it == table.end()) throw std::runtime_error("invalid config key: " + key);
    try {
        it->second.set(cfg, value);
    } catch (const std::exception&) {
        throw std::runtime_error("invalid value for config key " + key + ": '" + value + "'");
    }
}

RunConfig load_config(const std::filesystem::path& path) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(read_file(path));
    } catch (const nlohmann::json::exception& e) {
        throw std::runtime_error("config " + path.string() + ": " + e.what());
    }
    if (!j.is_object()) throw std::runtime_error("config " + path.string() + ": expected a flat JSON object");
    RunConfig cfg;
    for (const auto& [key, value] : j.items()) {
        std::string text;
        if (value.is_string())
            text = value.get<std::string>();
        else if (value.is_boolean())
            text = value.get<bool>() ? "true" : "false";
        else if (value.is_number_integer())
            text = std::to_string(value.get<long long>());
        else if (value.is_number())
            text = fmt_float(value.get<double>());
        else
            throw std::runtime_error("invalid value for config key " + key + ": expected a scalar");
        apply_config_entry(cfg, key, text);
    }
    return cfg;
}

std::map<std::string, std::string> config_entries(const RunConfig& cfg) {
    std::map<std::string, std::string> out;
    for (const auto& [key, e] : key_table()) out.emplace(key, e.get(cfg));
    return out;
}

std::string config_hash(const RunConfig& cfg) {
    std::string canon;
    for (const auto& [key, value] : config_entries(cfg)) {
        canon += key;
        canon += '=';
        canon += value;
        canon += '\n';
    }
    return hex64(fnv1a(canon));
}

ModelConfig RunConfig::teacher_config(int vocab_size) const {
    ModelConfig m;
    m.n_layers = teacher_layers;
    m.n_heads = teacher_heads;
    m.d_model = teacher_d_model;
    m.d_ff = teacher_d_ff;
    m.context_len = teacher_context_len;
    m.vocab_size = vocab_size;
    return m;
}

ModelConfig RunConfig::student_config(int vocab_size) const {
    ModelConfig m;
    m.n_layers = student_layers;
    m.n_heads = student_heads;
    m.d_model = student_d_model;
    m.d_ff = student_d_ff;
    m.context_len = teacher_context_len;
    m.vocab_size = vocab_size;
    return m;
}

TeacherHyper RunConfig::teacher_hyper() const {
    TeacherHyper h;
    h.micro_batch = teacher_micro_batch;
    h.virtual_batch = teacher_virtual_batch;
    h.steps = teacher_steps;
    h.lr = teacher_lr;
    h.warmup_steps = teacher_warmup_steps;
    h.clip = teacher_clip;
    h.weight_decay = teacher_weight_decay;
    h.val_every = teacher_val_every;
    return h;
}

DistillConfig RunConfig::distill_config() const {
    DistillConfig d;
    if (distill_alpha_mode == "adaptive") {
        d.alpha_mode = AlphaMode::adaptive;
    } else if (distill_alpha_mode == "fixed") {
        d.alpha_mode = AlphaMode::fixed;
    } else if (distill_alpha_mode.rfind("fixed_", 0) == 0) {
        d.alpha_mode = AlphaMode::fixed;
        d.alpha_fixed = parse_real("distill.alpha_mode", distill_alpha_mode.substr(6));
    } else {
        throw std::runtime_error("unknown alpha mode '" + distill_alpha_mode + "'");
    }
    if (distill_alpha_mode == "adaptive" || distill_alpha_mode == "fixed") d.alpha_fixed = distill_alpha_fixed;
    if (distill_loss_mode == "combined")
        d.loss_mode = LossMode::combined;
    else if (distill_loss_mode == "alternating")
        d.loss_mode = LossMode::alternating;
    else
        throw std::runtime_error("unknown loss mode '" + distill_loss_mode + "'");
    d.alpha_start = distill_alpha_start;
    d.alpha_end = distill_alpha_end;
    d.alternation_period = distill_alternation_period;
    d.steps = distill_steps;
    d.micro_batch = distill_micro_batch;
    d.lr = distill_lr;
    d.warmup_steps = distill_warmup_steps;
    d.clip = distill_clip;
    d.weight_decay = distill_weight_decay;
    d.eval_every = distill_eval_every;
    return d;
}

void write_manifest(const std::filesystem::path& path, const RunManifest& m) {
    nlohmann::json j;
    j["stage"] = m.stage;
    j["seed"] = m.seed;
    j["config_hash"] = m.config_hash;
    j["tool_version"] = m.tool_version;
    j["inputs"] = m.inputs;
    j["outputs"] = m.outputs;
    write_file(path, j.dump(1) + "\n");
}

}  // namespace modmoe
