#include "modmoe/model.hpp"

#include <json.hpp>

#include <cmath>
#include <cstring>
#include <stdexcept>

#include "modmoe/io.hpp"
#include "modmoe/optim.hpp"

namespace modmoe {

void ModelConfig::validate() const {
    const auto positive = [](int v, const char* name) {
        if (v <= 0) throw std::runtime_error(std::string("model config: ") + name + " must be positive");
    };
    positive(n_layers, "n_layers");
    positive(n_heads, "n_heads");
    positive(d_model, "d_model");
    positive(d_ff, "d_ff");
    positive(vocab_size, "vocab_size");
    if (context_len < 2) throw std::runtime_error("model config: context_len must be at least 2");
    if (d_model % n_heads != 0)
        throw std::runtime_error("model config: d_model " + std::to_string(d_model) + " not divisible by n_heads " +
                                 std::to_string(n_heads));
}

ModelConfig student_config(int vocab_size, int context_len) {
    ModelConfig cfg;
    cfg.n_layers = 2;
    cfg.n_heads = 2;
    cfg.d_model = 64;
    cfg.d_ff = 256;
    cfg.context_len = context_len;
    cfg.vocab_size = vocab_size;
    return cfg;
}

int64_t param_count(const ModelConfig& cfg) {
    const int64_t d = cfg.d_model, ff = cfg.d_ff, v = cfg.vocab_size, ctx = cfg.context_len;
    int64_t per_layer = 2 * d            // ln1
                        + 4 * d * d + 4 * d  // q,k,v,o + biases
                        + 2 * d              // ln2
                        + d * ff + ff + ff * d + d;
    int64_t total = v * d + ctx * d + cfg.n_layers * per_layer + 2 * d;
    if (!cfg.tie_embeddings) total += d * v;
    return total;
}

namespace {

TensorF init_param(Shape shape, Rng& rng, float stddev, const std::string& name) {
    auto t = TensorF::randn(std::move(shape), rng, stddev, true);
    t.set_name(name);
    return t;
}

TensorF zeros_param(Shape shape, const std::string& name) {
    auto t = TensorF::zeros(std::move(shape), true);
    t.set_name(name);
    return t;
}

TensorF ones_param(Shape shape, const std::string& name) {
    auto t = TensorF::filled(std::move(shape), 1.0f, true);
    t.set_name(name);
    return t;
}

}  // namespace

TransformerLM::TransformerLM(ModelConfig cfg, Rng& rng) : cfg_(cfg) {
    cfg_.validate();
    build(rng, {});
}

TransformerLM::TransformerLM(ModelConfig cfg, TensorF shared_tok_emb, Rng& rng) : cfg_(cfg) {
    cfg_.validate();
    if (!shared_tok_emb.defined() || shared_tok_emb.shape() != Shape{cfg_.vocab_size, cfg_.d_model})
        throw std::runtime_error("shared token embedding must be [vocab, d_model]");
    build(rng, std::move(shared_tok_emb));
}

void TransformerLM::build(Rng& rng, TensorF shared_tok_emb) {
    const int d = cfg_.d_model, ff = cfg_.d_ff;
    constexpr float kStd = 0.02f;
    // residual projections start smaller, scaled down with depth
    const float res_std = kStd / std::sqrt(2.0f * static_cast<float>(cfg_.n_layers));
    auto init = rng.fork("model-init");

    params_.clear();
    if (shared_tok_emb.defined()) {
        params_.push_back(shared_tok_emb.set_name("tok_emb"));
        // keep the init stream aligned with the unshared layout
        TensorF::randn({cfg_.vocab_size, d}, init, kStd, false);
    } else {
        params_.push_back(init_param({cfg_.vocab_size, d}, init, kStd, "tok_emb"));
    }
    params_.push_back(init_param({cfg_.context_len, d}, init, kStd, "pos_emb"));
    for (int l = 0; l < cfg_.n_layers; ++l) {
        const std::string p = "layers." + std::to_string(l) + ".";
        params_.push_back(ones_param({d}, p + "ln1.g"));
        params_.push_back(zeros_param({d}, p + "ln1.b"));
        params_.push_back(init_param({d, d}, init, kStd, p + "attn.wq"));
        params_.push_back(zeros_param({1, d}, p + "attn.bq"));
        params_.push_back(init_param({d, d}, init, kStd, p + "attn.wk"));
        params_.push_back(zeros_param({1, d}, p + "attn.bk"));
        params_.push_back(init_param({d, d}, init, kStd, p + "attn.wv"));
        params_.push_back(zeros_param({1, d}, p + "attn.bv"));
        params_.push_back(init_param({d, d}, init, res_std, p + "attn.wo"));
        params_.push_back(zeros_param({1, d}, p + "attn.bo"));
        params_.push_back(ones_param({d}, p + "ln2.g"));
        params_.push_back(zeros_param({d}, p + "ln2.b"));
        params_.push_back(init_param({d, ff}, init, kStd, p + "mlp.w1"));
        params_.push_back(zeros_param({1, ff}, p + "mlp.b1"));
        params_.push_back(init_param({ff, d}, init, res_std, p + "mlp.w2"));
        params_.push_back(zeros_param({1, d}, p + "mlp.b2"));
    }
    params_.push_back(ones_param({d}, "lnf.g"));
    params_.push_back(zeros_param({d}, "lnf.b"));
    if (!cfg_.tie_embeddings) params_.push_back(init_param({d, cfg_.vocab_size}, init, kStd, "head"));
}

TensorF TransformerLM::forward(std::span<const int32_t> ids, int batch, int time) const {
    if (time > cfg_.context_len)
        throw std::runtime_error("forward: sequence length " + std::to_string(time) + " exceeds context length " +
                                 std::to_string(cfg_.context_len));
    if (batch < 1 || time < 1 || static_cast<size_t>(batch) * static_cast<size_t>(time) != ids.size())
        throw std::runtime_error("forward: ids size " + std::to_string(ids.size()) + " does not match batch " +
                                 std::to_string(batch) + " x time " + std::to_string(time));

    size_t pi = 0;
    const auto next = [&]() -> const TensorF& { return params_[pi++]; };
    const TensorF& tok = next();
    const TensorF& pos = next();

    auto x = embedding_lookup(tok, ids);
    x = add_rows(x, slice_rows(pos, 0, time));
    for (int l = 0; l < cfg_.n_layers; ++l) {
        const TensorF& ln1g = next();
        const TensorF& ln1b = next();
        const TensorF& wq = next();
        const TensorF& bq = next();
        const TensorF& wk = next();
        const TensorF& bk = next();
        const TensorF& wv = next();
        const TensorF& bv = next();
        const TensorF& wo = next();
        const TensorF& bo = next();
        const TensorF& ln2g = next();
        const TensorF& ln2b = next();
        const TensorF& w1 = next();
        const TensorF& b1 = next();
        const TensorF& w2 = next();
        const TensorF& b2 = next();

        auto a = layer_norm(x, ln1g, ln1b);
        auto q = add_rows(matmul(a, wq), bq);
        auto k = add_rows(matmul(a, wk), bk);
        auto v = add_rows(matmul(a, wv), bv);
        auto probs = softmax(causal_attention_scores(q, k, batch, time, cfg_.n_heads));
        auto att = attention_apply(probs, v, batch, time, cfg_.n_heads);
        x = add(x, add_rows(matmul(att, wo), bo));

        auto m = layer_norm(x, ln2g, ln2b);
        auto h = gelu(add_rows(matmul(m, w1), b1));
        x = add(x, add_rows(matmul(h, w2), b2));
    }
    const TensorF& lnfg = next();
    const TensorF& lnfb = next();
    x = layer_norm(x, lnfg, lnfb);
    if (cfg_.tie_embeddings) return matmul_nt(x, tok);
    return matmul(x, params_[pi]);
}

int64_t TransformerLM::param_count() const {
    int64_t n = 0;
    for (const auto& p : params_) n += p.numel();
    return n;
}

NllSum nll_sum(const TensorF& logits, std::span<const int32_t> targets, int32_t ignore_index) {
    const int n = logits.dim(0), v = logits.dim(1);
    if (static_cast<int>(targets.size()) != n)
        throw std::runtime_error("nll_sum: " + std::to_string(targets.size()) + " targets for " + std::to_string(n) + " rows");
    const float* lv = logits.value().data();
    NllSum out;
    for (int r = 0; r < n; ++r) {
        if (targets[r] == ignore_index) continue;
        if (targets[r] < 0 || targets[r] >= v)
            throw std::runtime_error("nll_sum: target id " + std::to_string(targets[r]) + " out of range");
        const float* row = lv + static_cast<size_t>(r) * v;
        float mx = row[0];
        for (int j = 1; j < v; ++j) mx = std::max(mx, row[j]);
        double denom = 0.0;
        for (int j = 0; j < v; ++j) denom += std::exp(static_cast<double>(row[j]) - static_cast<double>(mx));
        out.sum += std::log(denom) + static_cast<double>(mx) - static_cast<double>(row[targets[r]]);
        out.count += 1;
    }
    return out;
}

TensorF lm_loss(const TensorF& logits, std::span<const int32_t> targets, std::span<const uint8_t> target_mask) {
    if (!target_mask.empty() && target_mask.size() != targets.size())
        throw std::runtime_error("lm_loss: mask size does not match targets");
    if (target_mask.empty()) return cross_entropy(logits, targets);
    std::vector<int32_t> masked(targets.begin(), targets.end());
    for (size_t i = 0; i < masked.size(); ++i)
        if (!target_mask[i]) masked[i] = kIgnoreIndex;
    return cross_entropy(logits, masked);
}

NllSum eval_doc_nll(const ForwardFn& fwd, int context_len, const Document& doc, const Tokenizer& tok) {
    NoGradGuard guard;
    NllSum total;
    std::vector<int32_t> ids{Tokenizer::kBos};
    const auto enc = tok.encode(doc.text);
    ids.insert(ids.end(), enc.begin(), enc.end());
    if (ids.size() < 2) return total;
    const size_t n = ids.size();
    std::vector<int32_t> inputs, targets;
    size_t start = 0;
    while (start + 1 < n) {
        const size_t len = std::min(static_cast<size_t>(context_len) + 1, n - start);
        if (len < 2) break;
        const int t = static_cast<int>(len) - 1;
        inputs.assign(ids.begin() + static_cast<int64_t>(start), ids.begin() + static_cast<int64_t>(start + len - 1));
        targets.assign(ids.begin() + static_cast<int64_t>(start + 1), ids.begin() + static_cast<int64_t>(start + len));
        auto logits = fwd(inputs, 1, t);
        const auto part = nll_sum(logits, targets);
        total.sum += part.sum;
        total.count += part.count;
        start += static_cast<size_t>(context_len);
    }
    return total;
}

NllSum eval_nll(const TransformerLM& model, const std::vector<Document>& docs, const Tokenizer& tok) {
    NoGradGuard guard;
    const ForwardFn fwd = [&model](std::span<const int32_t> ids, int rows, int time) {
        return model.forward(ids, rows, time);
    };
    NllSum total;
    for (const auto& doc : docs) {
        const auto part = eval_doc_nll(fwd, model.config().context_len, doc, tok);
        total.sum += part.sum;
        total.count += part.count;
    }
    if (total.count == 0) throw std::runtime_error("evaluation corpus has no scorable tokens");
    return total;
}

double eval_cross_entropy(const TransformerLM& model, const std::vector<Document>& docs, const Tokenizer& tok) {
    return eval_nll(model, docs, tok).mean();
}

std::array<double, kNumLangs> eval_ce_by_lang(const TransformerLM& model, const std::vector<Document>& docs,
                                              const Tokenizer& tok) {
    std::array<double, kNumLangs> out{};
    for (const Lang l : kAllLangs) {
        std::vector<Document> subset;
        for (const auto& d : docs)
            if (d.lang == l) subset.push_back(d);
        out[static_cast<size_t>(l)] = subset.empty() ? std::numeric_limits<double>::quiet_NaN()
                                                     : eval_cross_entropy(model, subset, tok);
    }
    return out;
}

LmRows shift_for_lm(const Batch& batch) {
    LmRows out;
    out.rows = batch.rows;
    out.time = batch.context_len - 1;
    const size_t n = static_cast<size_t>(batch.rows) * out.time;
    out.inputs.reserve(n);
    out.targets.reserve(n);
    out.target_mask.reserve(n);
    for (int r = 0; r < batch.rows; ++r) {
        const auto* row = batch.tokens.data() + static_cast<size_t>(r) * batch.context_len;
        const auto* mrow = batch.mask.data() + static_cast<size_t>(r) * batch.context_len;
        out.inputs.insert(out.inputs.end(), row, row + out.time);
        out.targets.insert(out.targets.end(), row + 1, row + batch.context_len);
        out.target_mask.insert(out.target_mask.end(), mrow + 1, mrow + batch.context_len);
    }
    return out;
}

TeacherResult train_teacher(const ModelConfig& cfg, const std::vector<Document>& train_docs,
                            const std::vector<Document>& val_docs, const Tokenizer& tok, const TeacherHyper& hyper,
                            uint64_t seed) {
    cfg.validate();
    if (hyper.virtual_batch % hyper.micro_batch != 0)
        throw std::runtime_error("virtual batch " + std::to_string(hyper.virtual_batch) + " not a multiple of micro batch " +
                                 std::to_string(hyper.micro_batch));
    const int accum = hyper.virtual_batch / hyper.micro_batch;

    Rng rng(seed);
    auto init_rng = rng.fork("teacher");
    TransformerLM model(cfg, init_rng);
    AdamW<float>::Options opt;
    opt.lr = hyper.lr;
    opt.beta1 = hyper.beta1;
    opt.beta2 = hyper.beta2;
    opt.weight_decay = hyper.weight_decay;
    AdamW<float> optim(model.params(), opt);

    BatchStream stream(train_docs, tok, cfg.context_len, hyper.micro_batch, BatchMode::mixed,
                       rng.fork("teacher-batches").next_u64());

    TrainLog log;
    for (int step = 0; step < hyper.steps; ++step) {
        const double warm = hyper.warmup_steps > 0
                                ? std::min(1.0, static_cast<double>(step + 1) / static_cast<double>(hyper.warmup_steps))
                                : 1.0;
        optim.set_lr(hyper.lr * warm);
        optim.zero_grad();
        double loss_acc = 0.0;
        for (int a = 0; a < accum; ++a) {
            const auto rows = shift_for_lm(stream.next());
            auto logits = model.forward(rows.inputs, rows.rows, rows.time);
            auto loss = lm_loss(logits, rows.targets, rows.target_mask);
            loss_acc += static_cast<double>(loss.item());
            backward(scale(loss, 1.0f / static_cast<float>(accum)));
        }
        const double step_loss = loss_acc / accum;
        if (!std::isfinite(step_loss)) throw std::runtime_error("training diverged at step " + std::to_string(step));
        clip_grad_norm(model.params(), hyper.clip);
        optim.step();
        log.steps.push_back({step, step_loss, optim.lr()});

        if (hyper.val_every > 0 && !val_docs.empty() && ((step + 1) % hyper.val_every == 0 || step + 1 == hyper.steps)) {
            const auto by_lang = eval_ce_by_lang(model, val_docs, tok);
            for (const Lang l : kAllLangs)
                if (std::isfinite(by_lang[static_cast<size_t>(l)]))
                    log.val.push_back({step, l, by_lang[static_cast<size_t>(l)]});
        }
    }
    return {std::move(model), std::move(log)};
}

void TransformerLM::save(const std::filesystem::path& stem, uint64_t seed, int64_t step, bool include_tok_emb) const {
    nlohmann::json manifest;
    manifest["config"] = {{"n_layers", cfg_.n_layers},     {"n_heads", cfg_.n_heads},
                          {"d_model", cfg_.d_model},       {"d_ff", cfg_.d_ff},
                          {"context_len", cfg_.context_len}, {"vocab_size", cfg_.vocab_size},
                          {"tie_embeddings", cfg_.tie_embeddings}};
    manifest["seed"] = seed;
    manifest["step"] = step;
    auto& tensors = manifest["tensors"] = nlohmann::json::array();
    std::string blob;
    int64_t offset = 0;
    for (const auto& p : params_) {
        if (!include_tok_emb && p.name() == "tok_emb") continue;
        nlohmann::json t;
        t["name"] = p.name();
        t["shape"] = p.shape();
        t["offset"] = offset;
        t["numel"] = p.numel();
        tensors.push_back(std::move(t));
        const size_t bytes = static_cast<size_t>(p.numel()) * sizeof(float);
        blob.append(reinterpret_cast<const char*>(p.value().data()), bytes);
        offset += static_cast<int64_t>(bytes);
    }
    write_file(stem.string() + ".json", manifest.dump(1) + "\n");
    write_file(stem.string() + ".bin", blob);
}

TransformerLM TransformerLM::load(const std::filesystem::path& stem, TensorF shared_tok_emb) {
    const auto manifest_path = stem.string() + ".json";
    nlohmann::json manifest;
    try {
        manifest = nlohmann::json::parse(read_file(manifest_path));
    } catch (const nlohmann::json::exception& e) {
        throw std::runtime_error("checkpoint " + manifest_path + ": " + e.what());
    }
    const auto& jc = manifest.at("config");
    ModelConfig cfg;
    cfg.n_layers = jc.at("n_layers").get<int>();
    cfg.n_heads = jc.at("n_heads").get<int>();
    cfg.d_model = jc.at("d_model").get<int>();
    cfg.d_ff = jc.at("d_ff").get<int>();
    cfg.context_len = jc.at("context_len").get<int>();
    cfg.vocab_size = jc.at("vocab_size").get<int>();
    cfg.tie_embeddings = jc.at("tie_embeddings").get<bool>();

    Rng scratch(0);
    const bool shared = shared_tok_emb.defined();
    TransformerLM model = shared ? TransformerLM(cfg, std::move(shared_tok_emb), scratch) : TransformerLM(cfg, scratch);

    const std::string blob = read_file(stem.string() + ".bin");
    std::vector<uint8_t> filled(model.params_.size(), 0);
    for (const auto& t : manifest.at("tensors")) {
        const std::string name = t.at("name").get<std::string>();
        const Shape shape = t.at("shape").get<Shape>();
        const int64_t offset = t.at("offset").get<int64_t>();
        size_t idx = model.params_.size();
        for (size_t i = 0; i < model.params_.size(); ++i)
            if (model.params_[i].name() == name) {
                idx = i;
                break;
            }
        if (idx == model.params_.size()) throw std::runtime_error("checkpoint tensor " + name + " not part of this model");
        auto& p = model.params_[idx];
        if (p.shape() != shape)
            throw std::runtime_error("checkpoint tensor " + name + ": shape " + shape_str(shape) +
                                     " does not match model " + shape_str(p.shape()));
        const size_t bytes = static_cast<size_t>(p.numel()) * sizeof(float);
        if (offset < 0 || static_cast<size_t>(offset) + bytes > blob.size())
            throw std::runtime_error("checkpoint tensor " + name + ": blob range out of bounds");
        std::memcpy(p.value().data(), blob.data() + offset, bytes);
        filled[idx] = 1;
    }
    for (size_t i = 0; i < model.params_.size(); ++i) {
        if (filled[i]) continue;
        if (model.params_[i].name() == "tok_emb" && shared) continue;  // supplied by the caller
        throw std::runtime_error("checkpoint missing tensor " + model.params_[i].name());
    }
    return model;
}

}  // namespace modmoe
