#include "modmoe/moe.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <map>

#include <json.hpp>

#include "modmoe/io.hpp"
#include "modmoe/optim.hpp"

namespace modmoe {

namespace {

std::vector<TensorF> without_tok_emb(const std::vector<TensorF>& params) {
    std::vector<TensorF> out;
    out.reserve(params.size());
    for (const auto& p : params)
        if (p.name() != "tok_emb") out.push_back(p);
    return out;
}

std::vector<Document> docs_of_lang(const std::vector<Document>& docs, Lang lang) {
    std::vector<Document> out;
    for (const auto& d : docs)
        if (d.lang == lang) out.push_back(d);
    if (out.empty()) throw std::runtime_error(std::string("no training documents for language ") + lang_name(lang));
    return out;
}

void check_vocab(const TransformerLM& teacher, const ModelConfig& student_cfg) {
    if (teacher.config().vocab_size != student_cfg.vocab_size)
        throw std::runtime_error("student vocab " + std::to_string(student_cfg.vocab_size) +
                                 " does not match teacher vocab " + std::to_string(teacher.config().vocab_size));
}

MoETrainResult train_shared(const TransformerLM& teacher, const ModelConfig& student_cfg,
                            const std::vector<Document>& train_docs, const Tokenizer& tok, const DistillConfig& cfg,
                            uint64_t seed, Router router, bool with_common) {
    cfg.validate();
    student_cfg.validate();
    check_vocab(teacher, student_cfg);

    Rng rng(seed);
    auto emb_rng = rng.fork("shared-embedding");
    auto shared = TensorF::randn({student_cfg.vocab_size, student_cfg.d_model}, emb_rng, 0.02f, true);

    MoETrainResult result;
    auto& sys = result.system;
    sys.setup = with_common ? MoESetup::MoE_CE : MoESetup::JEET;
    sys.shared_embedding = shared;
    sys.router = std::move(router);
    sys.tok = tok;
    sys.settings.use_common = with_common;

    for (const Lang l : kAllLangs) {
        auto init = rng.fork(std::string("expert-") + lang_name(l) + "-init");
        sys.experts[static_cast<size_t>(l)] =
            ExpertSlot{l, TransformerLM(student_cfg, shared, init), false, EmbeddingSource::shared};
    }
    if (with_common) {
        auto init = rng.fork("expert-common-init");
        sys.common = ExpertSlot{Lang::en, TransformerLM(student_cfg, shared, init), false, EmbeddingSource::shared};
    }

    std::array<std::unique_ptr<BatchStream>, kNumLangs> streams;
    for (const Lang l : kAllLangs) {
        const auto subset = docs_of_lang(train_docs, l);
        streams[static_cast<size_t>(l)] = std::make_unique<BatchStream>(
            subset, tok, student_cfg.context_len, cfg.micro_batch, BatchMode::mixed,
            rng.fork(std::string("moe-batches-") + lang_name(l)).next_u64());
    }

    MoETrainer trainer(sys, teacher, cfg);
    for (int round = 0; round < cfg.steps; ++round)
        for (const Lang l : kAllLangs)
            result.log.steps.push_back(trainer.step(l, streams[static_cast<size_t>(l)]->next(), round));
    return result;
}

}  // namespace

const char* setup_name(MoESetup s) {
    switch (s) {
        case MoESetup::PLE: return "ple";
        case MoESetup::JEET: return "jeet";
        case MoESetup::MoE_CE: return "moe-ce";
    }
    return "ple";
}

MoESetup parse_setup(const std::string& name) {
    if (name == "ple") return MoESetup::PLE;
    if (name == "jeet") return MoESetup::JEET;
    if (name == "moe-ce") return MoESetup::MoE_CE;
    throw std::runtime_error("unknown MoE setup '" + name + "'");
}

TensorF combine_logits(const TensorF& a, const TensorF& b) {
    if (a.shape() != b.shape())
        throw std::runtime_error("combine_logits: incompatible shapes " + shape_str(a.shape()) + " and " +
                                 shape_str(b.shape()));
    auto out = TensorF::zeros(a.shape());
    const float* av = a.value().data();
    const float* bv = b.value().data();
    float* ov = out.value().data();
    for (size_t i = 0; i < out.value().size(); ++i) ov[i] = (av[i] + bv[i]) * 0.5f;
    return out;
}

MoESystem build_ple(std::array<TransformerLM, kNumLangs> students, Router router, Tokenizer tok) {
    for (const Lang l : kAllLangs) {
        const auto& cfg = students[static_cast<size_t>(l)].config();
        if (cfg.vocab_size != students[0].config().vocab_size)
            throw std::runtime_error("experts disagree on vocab size");
        if (cfg.context_len != students[0].config().context_len)
            throw std::runtime_error("experts disagree on context length");
    }
    MoESystem sys;
    sys.setup = MoESetup::PLE;
    for (const Lang l : kAllLangs)
        sys.experts[static_cast<size_t>(l)] =
            ExpertSlot{l, std::move(students[static_cast<size_t>(l)]), true, EmbeddingSource::owned};
    sys.router = std::move(router);
    sys.tok = std::move(tok);
    sys.settings.use_common = false;
    return sys;
}

MoETrainer::MoETrainer(MoESystem& sys, const TransformerLM& teacher, const DistillConfig& cfg)
    : sys_(sys), teacher_(teacher), cfg_(cfg) {
    if (!sys.shared_embedding.defined())
        throw std::runtime_error("joint training requires a shared-embedding system");
    check_vocab(teacher, sys.experts[0].model.config());
    AdamW<float>::Options opt;
    opt.lr = cfg.lr;
    opt.beta1 = cfg.beta1;
    opt.beta2 = cfg.beta2;
    opt.weight_decay = cfg.weight_decay;
    for (const Lang l : kAllLangs)
        expert_opt_[static_cast<size_t>(l)] =
            std::make_unique<AdamWF>(without_tok_emb(sys.experts[static_cast<size_t>(l)].model.params()), opt);
    emb_opt_ = std::make_unique<AdamWF>(std::vector<TensorF>{sys.shared_embedding}, opt);
    if (sys.common) common_opt_ = std::make_unique<AdamWF>(without_tok_emb(sys.common->model.params()), opt);
}

DistillStepRecord MoETrainer::step(Lang lang, const Batch& batch, int round) {
    const double warm = cfg_.warmup_steps > 0
                            ? std::min(1.0, static_cast<double>(round + 1) / static_cast<double>(cfg_.warmup_steps))
                            : 1.0;
    auto& expert = sys_.experts[static_cast<size_t>(lang)];
    auto& eopt = *expert_opt_[static_cast<size_t>(lang)];
    eopt.set_lr(cfg_.lr * warm);
    emb_opt_->set_lr(cfg_.lr * warm);
    eopt.zero_grad();
    emb_opt_->zero_grad();
    if (common_opt_) {
        common_opt_->set_lr(cfg_.lr * warm);
        common_opt_->zero_grad();
    }

    auto el = distill_losses(teacher_, expert.model, batch, cfg_, round);
    TensorF objective = el.objective;
    if (sys_.common) {
        auto cl = distill_losses(teacher_, sys_.common->model, batch, cfg_, round);
        objective = add(el.objective, cl.objective);
    }
    const double total = static_cast<double>(objective.item());
    if (!std::isfinite(total)) throw std::runtime_error("training diverged at step " + std::to_string(batches_seen_));
    backward(objective);

    std::vector<TensorF> clip_set = expert.model.params();  // shared embedding included once
    if (sys_.common)
        for (const auto& p : without_tok_emb(sys_.common->model.params())) clip_set.push_back(p);
    clip_grad_norm(clip_set, cfg_.clip);

    eopt.step();
    emb_opt_->step();
    if (common_opt_) common_opt_->step();

    DistillStepRecord rec{batches_seen_, el.lm, el.kd, total, el.alpha, lang_name(lang)};
    ++batches_seen_;
    return rec;
}

MoETrainResult train_jeet(const TransformerLM& teacher, const ModelConfig& student_cfg,
                          const std::vector<Document>& train_docs, const Tokenizer& tok, const DistillConfig& cfg,
                          uint64_t seed, Router router) {
    return train_shared(teacher, student_cfg, train_docs, tok, cfg, seed, std::move(router), false);
}

MoETrainResult train_moe_ce(const TransformerLM& teacher, const ModelConfig& student_cfg,
                            const std::vector<Document>& train_docs, const Tokenizer& tok, const DistillConfig& cfg,
                            uint64_t seed, Router router) {
    return train_shared(teacher, student_cfg, train_docs, tok, cfg, seed, std::move(router), true);
}

std::vector<TensorF> moe_infer(const MoESystem& sys, const std::vector<std::string>& texts) {
    const bool common_present = sys.settings.use_common && sys.common.has_value();
    if (sys.settings.routable.empty() && !common_present)
        throw std::runtime_error("no experts available to route to");
    NoGradGuard guard;
    const int ctx = sys.experts[0].model.config().context_len;
    std::vector<TensorF> out;
    out.reserve(texts.size());
    for (const auto& text : texts) {
        const auto decision = route(sys.router.clf, sys.router.tfidf, text, sys.settings.routable, common_present);
        std::vector<int32_t> ids{Tokenizer::kBos};
        const auto enc = sys.tok.encode(text);
        ids.insert(ids.end(), enc.begin(), enc.end());
        if (static_cast<int>(ids.size()) > ctx) ids.resize(static_cast<size_t>(ctx));
        const int t = static_cast<int>(ids.size());
        if (decision.use_common) {
            out.push_back(sys.common->model.forward(ids, 1, t));
            continue;
        }
        auto logits = sys.experts[static_cast<size_t>(decision.expert)].model.forward(ids, 1, t);
        if (common_present) logits = combine_logits(logits, sys.common->model.forward(ids, 1, t));
        out.push_back(std::move(logits));
    }
    return out;
}

std::string routable_label(const std::set<Lang>& routable) {
    if (routable.empty()) return "none";
    std::string out;
    for (const Lang l : kAllLangs)
        if (routable.count(l)) {
            if (!out.empty()) out += '+';
            out += lang_name(l);
        }
    return out;
}

std::set<Lang> parse_routable(const std::string& label) {
    if (label.empty() || label == "none") return {};
    if (label == "full" || label == "all") return {Lang::en, Lang::fr, Lang::de, Lang::py};
    std::set<Lang> out;
    std::string token;
    for (const char c : label + ",") {
        if (c == ',' || c == '+') {
            if (!token.empty()) {
                const auto l = parse_lang(token);
                if (!l) throw std::runtime_error("unknown language '" + token + "' in routable set");
                out.insert(*l);
            }
            token.clear();
        } else {
            token.push_back(c);
        }
    }
    return out;
}

std::vector<InferenceSettings> standard_grid(bool has_common) {
    const std::vector<std::set<Lang>> subsets = {
        {Lang::en, Lang::fr, Lang::de, Lang::py},
        {Lang::en, Lang::py},
        {Lang::fr, Lang::py},
        {Lang::de, Lang::py},
        {Lang::en},
        {Lang::fr},
        {Lang::de},
        {Lang::py},
    };
    std::vector<InferenceSettings> grid;
    for (const auto& s : subsets) {
        if (has_common) grid.push_back({s, true});
        grid.push_back({s, false});
    }
    if (has_common) grid.push_back({{}, true});
    return grid;
}

std::array<NllSum, kNumLangs> evaluate_by_lang(const MoESystem& sys, const std::vector<Document>& docs,
                                               bool oracle_routing) {
    const bool common_present = sys.settings.use_common && sys.common.has_value();
    if (sys.settings.routable.empty() && !common_present)
        throw std::runtime_error("no experts available to route to");
    NoGradGuard guard;
    const int ctx = sys.experts[0].model.config().context_len;
    std::array<NllSum, kNumLangs> by_lang{};
    for (const auto& doc : docs) {
        RouteDecision d;
        if (oracle_routing) {
            std::array<double, kNumLangs> probs{};
            probs[static_cast<size_t>(doc.lang)] = 1.0;
            d = route_from_probs(doc.lang, probs, sys.settings.routable, common_present);
        } else {
            d = route(sys.router.clf, sys.router.tfidf, doc.text, sys.settings.routable, common_present);
        }
        ForwardFn fwd;
        if (d.use_common) {
            fwd = [&](std::span<const int32_t> ids, int rows, int time) {
                return sys.common->model.forward(ids, rows, time);
            };
        } else {
            const auto& model = sys.experts[static_cast<size_t>(d.expert)].model;
            if (common_present)
                fwd = [&](std::span<const int32_t> ids, int rows, int time) {
                    return combine_logits(model.forward(ids, rows, time), sys.common->model.forward(ids, rows, time));
                };
            else
                fwd = [&model](std::span<const int32_t> ids, int rows, int time) {
                    return model.forward(ids, rows, time);
                };
        }
        const auto part = eval_doc_nll(fwd, ctx, doc, sys.tok);
        auto& acc = by_lang[static_cast<size_t>(doc.lang)];
        acc.sum += part.sum;
        acc.count += part.count;
    }
    return by_lang;
}

std::vector<GridRow> evaluate_settings_grid(const MoESystem& sys, const std::vector<Document>& eval_docs,
                                            const std::vector<InferenceSettings>& grid) {
    NoGradGuard guard;
    const int ctx = sys.experts[0].model.config().context_len;

    // routing inputs are settings-independent; compute them once per document
    std::vector<std::pair<Lang, std::array<double, kNumLangs>>> routed;
    routed.reserve(eval_docs.size());
    for (const auto& d : eval_docs) routed.push_back(predict(sys.router.clf, sys.router.tfidf, d.text));

    // serving keys: 0..3 expert alone, 4 common alone, 5..8 expert+common
    constexpr size_t kCommonKey = kNumLangs;
    std::vector<std::array<std::optional<NllSum>, 2 * kNumLangs + 1>> memo(eval_docs.size());
    const auto doc_nll = [&](size_t doc_idx, size_t key) -> const NllSum& {
        auto& slot = memo[doc_idx][key];
        if (!slot) {
            const auto& doc = eval_docs[doc_idx];
            ForwardFn fwd;
            if (key == kCommonKey) {
                fwd = [&](std::span<const int32_t> ids, int rows, int time) {
                    return sys.common->model.forward(ids, rows, time);
                };
            } else if (key < kNumLangs) {
                const auto& model = sys.experts[key].model;
                fwd = [&model](std::span<const int32_t> ids, int rows, int time) {
                    return model.forward(ids, rows, time);
                };
            } else {
                const auto& model = sys.experts[key - kNumLangs - 1].model;
                fwd = [&](std::span<const int32_t> ids, int rows, int time) {
                    return combine_logits(model.forward(ids, rows, time), sys.common->model.forward(ids, rows, time));
                };
            }
            slot = eval_doc_nll(fwd, ctx, doc, sys.tok);
        }
        return *slot;
    };

    std::vector<GridRow> rows;
    rows.reserve(grid.size());
    for (const auto& settings : grid) {
        const bool common_present = settings.use_common && sys.common.has_value();
        if (settings.use_common && !sys.common.has_value())
            throw std::runtime_error("system has no common expert");
        GridRow row;
        row.routable = settings.routable;
        row.use_common = settings.use_common;
        std::array<NllSum, kNumLangs> by_lang{};
        for (size_t i = 0; i < eval_docs.size(); ++i) {
            const auto d = route_from_probs(routed[i].first, routed[i].second, settings.routable, common_present);
            size_t key;
            if (d.use_common)
                key = kCommonKey;
            else if (common_present)
                key = kNumLangs + 1 + static_cast<size_t>(d.expert);
            else
                key = static_cast<size_t>(d.expert);
            const auto& part = doc_nll(i, key);
            auto& acc = by_lang[static_cast<size_t>(eval_docs[i].lang)];
            acc.sum += part.sum;
            acc.count += part.count;
        }
        double ppl_sum = 0.0;
        for (const Lang l : kAllLangs) {
            const auto& acc = by_lang[static_cast<size_t>(l)];
            const double ppl =
                acc.count > 0 ? std::exp(acc.mean()) : std::numeric_limits<double>::quiet_NaN();
            row.ppl[static_cast<size_t>(l)] = ppl;
            ppl_sum += ppl;
        }
        row.ppl_all = ppl_sum / static_cast<double>(kNumLangs);
        rows.push_back(std::move(row));
    }
    return rows;
}

void write_grid_csv(const std::filesystem::path& path, const std::vector<GridRow>& rows) {
    std::vector<std::vector<std::string>> out;
    out.reserve(rows.size());
    for (const auto& r : rows) {
        std::vector<std::string> row{routable_label(r.routable), r.use_common ? "true" : "false"};
        for (const Lang l : kAllLangs) row.push_back(fmt_float(r.ppl[static_cast<size_t>(l)]));
        row.push_back(fmt_float(r.ppl_all));
        out.push_back(std::move(row));
    }
    write_csv(path, {"routable", "use_common", "ppl_en", "ppl_fr", "ppl_de", "ppl_py", "ppl_all"}, out);
}

void save_moe(const std::filesystem::path& dir, const MoESystem& sys, uint64_t seed) {
    std::filesystem::create_directories(dir);
    sys.tok.save(dir / "tokenizer.json");
    save_router(dir / "router.json", sys.router);

    nlohmann::json manifest;
    manifest["version"] = 1;
    manifest["setup"] = setup_name(sys.setup);
    manifest["classes"] = {"en", "fr", "de", "py"};
    manifest["tokenizer"] = "tokenizer.json";
    manifest["router"] = "router.json";
    manifest["seed"] = seed;

    auto& experts = manifest["experts"] = nlohmann::json::object();
    for (const Lang l : kAllLangs) {
        const auto& slot = sys.experts[static_cast<size_t>(l)];
        const std::string stem = std::string("expert_") + lang_name(l);
        slot.model.save(dir / stem, seed, 0, slot.embedding_source == EmbeddingSource::owned);
        experts[lang_name(l)] = stem;
    }
    if (sys.common) {
        sys.common->model.save(dir / "expert_common", seed, 0, false);
        manifest["common"] = "expert_common";
    }
    if (sys.shared_embedding.defined()) {
        const auto& v = sys.shared_embedding.value();
        std::string blob(reinterpret_cast<const char*>(v.data()), v.size() * sizeof(float));
        write_file(dir / "shared_embedding.bin", blob);
        manifest["shared_embedding"] = {{"file", "shared_embedding.bin"},
                                        {"vocab_size", sys.shared_embedding.dim(0)},
                                        {"d_model", sys.shared_embedding.dim(1)}};
    }
    write_file(dir / "manifest.json", manifest.dump(1) + "\n");
}

MoESystem load_moe(const std::filesystem::path& dir) {
    const auto manifest_path = dir / "manifest.json";
    nlohmann::json manifest;
    try {
        manifest = nlohmann::json::parse(read_file(manifest_path));
    } catch (const nlohmann::json::exception& e) {
        throw std::runtime_error("manifest " + manifest_path.string() + ": " + e.what());
    }
    MoESystem sys;
    sys.setup = parse_setup(manifest.at("setup").get<std::string>());
    sys.tok = Tokenizer::load(dir / manifest.at("tokenizer").get<std::string>());
    sys.router = load_router(dir / manifest.at("router").get<std::string>());

    if (manifest.contains("shared_embedding")) {
        const auto& je = manifest.at("shared_embedding");
        const int v = je.at("vocab_size").get<int>(), d = je.at("d_model").get<int>();
        const auto blob = read_file(dir / je.at("file").get<std::string>());
        if (blob.size() != static_cast<size_t>(v) * static_cast<size_t>(d) * sizeof(float))
            throw std::runtime_error("shared embedding blob size mismatch");
        std::vector<float> data(static_cast<size_t>(v) * static_cast<size_t>(d));
        std::memcpy(data.data(), blob.data(), blob.size());
        sys.shared_embedding = TensorF::from({v, d}, std::move(data), true);
        sys.shared_embedding.set_name("tok_emb");
    }

    const bool shared = sys.shared_embedding.defined();
    for (const Lang l : kAllLangs) {
        const auto stem = dir / manifest.at("experts").at(lang_name(l)).get<std::string>();
        sys.experts[static_cast<size_t>(l)] =
            ExpertSlot{l, shared ? TransformerLM::load(stem, sys.shared_embedding) : TransformerLM::load(stem),
                       sys.setup == MoESetup::PLE, shared ? EmbeddingSource::shared : EmbeddingSource::owned};
    }
    if (manifest.contains("common")) {
        const auto stem = dir / manifest.at("common").get<std::string>();
        sys.common = ExpertSlot{Lang::en, TransformerLM::load(stem, sys.shared_embedding), false,
                                EmbeddingSource::shared};
    }
    sys.settings.use_common = sys.common.has_value();
    return sys;
}

}  // namespace modmoe
