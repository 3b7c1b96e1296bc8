#include "modmoe/router.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <map>
#include <stdexcept>

#include <json.hpp>

#include "modmoe/io.hpp"
#include "modmoe/rng.hpp"

namespace modmoe {

namespace {

bool word_byte(unsigned char c) { return std::isalnum(c) || c == '_' || c >= 0x80; }

void softmax4(const std::array<double, kNumLangs>& scores, std::array<double, kNumLangs>& probs) {
    double mx = scores[0];
    for (const double s : scores) mx = std::max(mx, s);
    double den = 0.0;
    for (size_t c = 0; c < kNumLangs; ++c) {
        probs[c] = std::exp(scores[c] - mx);
        den += probs[c];
    }
    for (auto& p : probs) p /= den;
}

std::array<double, kNumLangs> scores_of(const LinearClassifier& clf, const SparseVec& x) {
    std::array<double, kNumLangs> scores = clf.bias;
    for (size_t c = 0; c < kNumLangs; ++c) {
        const double* w = clf.weights.data() + c * static_cast<size_t>(clf.features);
        for (const auto& [f, v] : x) scores[c] += w[f] * v;
    }
    return scores;
}

Lang argmax4(const std::array<double, kNumLangs>& probs) {
    size_t best = 0;
    for (size_t c = 1; c < kNumLangs; ++c)
        if (probs[c] > probs[best]) best = c;
    return static_cast<Lang>(best);
}

}  // namespace

std::vector<std::string> router_tokenize(const std::string& text) {
    std::vector<std::string> out;
    std::string word;
    const auto flush = [&] {
        if (!word.empty()) {
            out.push_back(word);
            word.clear();
        }
    };
    for (const char ch : text) {
        const auto c = static_cast<unsigned char>(ch);
        if (word_byte(c)) {
            word.push_back(static_cast<char>(std::tolower(c)));
        } else {
            flush();
            if (!std::isspace(c)) out.push_back(std::string(1, ch));
        }
    }
    flush();
    return out;
}

double smooth_idf(int64_t n_docs, int64_t df) {
    return std::log(static_cast<double>(1 + n_docs) / static_cast<double>(1 + df)) + 1.0;
}

TfIdfModel fit_tfidf(const std::vector<Document>& docs) {
    if (docs.empty()) throw std::runtime_error("cannot fit TF-IDF on an empty corpus");
    std::map<std::string, int64_t> df;
    for (const auto& d : docs) {
        std::set<std::string> seen;
        for (auto& t : router_tokenize(d.text)) seen.insert(std::move(t));
        for (const auto& t : seen) ++df[t];
    }
    TfIdfModel model;
    for (const auto& [term, count] : df) {
        if (count < 2) continue;
        model.vocab.emplace(term, static_cast<int>(model.terms.size()));
        model.terms.push_back(term);
        model.idf.push_back(smooth_idf(static_cast<int64_t>(docs.size()), count));
    }
    return model;
}

SparseVec vectorize(const TfIdfModel& model, const std::string& text) {
    std::map<int, double> tf;
    for (const auto& t : router_tokenize(text)) {
        const auto it = model.vocab.find(t);
        if (it != model.vocab.end()) tf[it->second] += 1.0;
    }
    SparseVec vec;
    vec.reserve(tf.size());
    double sq = 0.0;
    for (const auto& [f, count] : tf) {
        const double v = count * model.idf[static_cast<size_t>(f)];
        vec.emplace_back(f, v);
        sq += v * v;
    }
    if (sq > 0.0) {
        const double inv = 1.0 / std::sqrt(sq);
        for (auto& [f, v] : vec) v *= inv;
    }
    return vec;
}

const char* trainer_name(RouterTrainer t) { return t == RouterTrainer::logreg_batch ? "logreg_batch" : "logreg_sgd"; }

RouterTrainer parse_trainer(const std::string& name) {
    if (name == "logreg_batch") return RouterTrainer::logreg_batch;
    if (name == "logreg_sgd") return RouterTrainer::logreg_sgd;
    throw std::runtime_error("unknown router trainer '" + name + "'");
}

double router_objective(const std::vector<SparseVec>& xs, const std::vector<Lang>& ys,
                        const std::vector<double>& weights, const std::array<double, kNumLangs>& bias,
                        double reg_lambda) {
    const int f = static_cast<int>(weights.size() / kNumLangs);
    double ce = 0.0;
    for (size_t i = 0; i < xs.size(); ++i) {
        std::array<double, kNumLangs> scores = bias;
        for (size_t c = 0; c < kNumLangs; ++c) {
            const double* w = weights.data() + c * static_cast<size_t>(f);
            for (const auto& [idx, v] : xs[i]) scores[c] += w[idx] * v;
        }
        double mx = scores[0];
        for (const double s : scores) mx = std::max(mx, s);
        double den = 0.0;
        for (const double s : scores) den += std::exp(s - mx);
        ce += std::log(den) + mx - scores[static_cast<size_t>(ys[i])];
    }
    ce /= static_cast<double>(xs.size());
    double sq = 0.0;
    for (const double w : weights) sq += w * w;
    return ce + 0.5 * reg_lambda * sq;
}

void router_gradient(const std::vector<SparseVec>& xs, const std::vector<Lang>& ys,
                     const std::vector<double>& weights, const std::array<double, kNumLangs>& bias, double reg_lambda,
                     std::vector<double>& grad_w, std::array<double, kNumLangs>& grad_b) {
    const int f = static_cast<int>(weights.size() / kNumLangs);
    grad_w.assign(weights.size(), 0.0);
    grad_b.fill(0.0);
    const double inv_n = 1.0 / static_cast<double>(xs.size());
    for (size_t i = 0; i < xs.size(); ++i) {
        std::array<double, kNumLangs> scores = bias;
        for (size_t c = 0; c < kNumLangs; ++c) {
            const double* w = weights.data() + c * static_cast<size_t>(f);
            for (const auto& [idx, v] : xs[i]) scores[c] += w[idx] * v;
        }
        std::array<double, kNumLangs> probs{};
        softmax4(scores, probs);
        for (size_t c = 0; c < kNumLangs; ++c) {
            const double err = (probs[c] - (ys[i] == static_cast<Lang>(c) ? 1.0 : 0.0)) * inv_n;
            grad_b[c] += err;
            double* gw = grad_w.data() + c * static_cast<size_t>(f);
            for (const auto& [idx, v] : xs[i]) gw[idx] += err * v;
        }
    }
    for (size_t j = 0; j < weights.size(); ++j) grad_w[j] += reg_lambda * weights[j];
}

LinearClassifier train_classifier(const std::vector<SparseVec>& xs, const std::vector<Lang>& ys,
                                  RouterTrainer trainer, double reg_lambda, int epochs, uint64_t seed) {
    if (xs.size() != ys.size()) throw std::runtime_error("router training: feature/label count mismatch");
    if (xs.empty()) throw std::runtime_error("router training: empty training set");
    std::set<Lang> classes(ys.begin(), ys.end());
    if (classes.size() < 2) throw std::runtime_error("router training needs at least two classes");
    int features = 0;
    for (const auto& x : xs)
        for (const auto& [idx, v] : x) features = std::max(features, idx + 1);

    LinearClassifier clf;
    clf.trainer = trainer;
    clf.features = features;
    clf.weights.assign(kNumLangs * static_cast<size_t>(features), 0.0);

    if (trainer == RouterTrainer::logreg_batch) {
        const double lr = 2.0;
        std::vector<double> gw;
        std::array<double, kNumLangs> gb{};
        double prev = router_objective(xs, ys, clf.weights, clf.bias, reg_lambda);
        for (int epoch = 0; epoch < epochs; ++epoch) {
            router_gradient(xs, ys, clf.weights, clf.bias, reg_lambda, gw, gb);
            for (size_t j = 0; j < clf.weights.size(); ++j) clf.weights[j] -= lr * gw[j];
            for (size_t c = 0; c < kNumLangs; ++c) clf.bias[c] -= lr * gb[c];
            const double obj = router_objective(xs, ys, clf.weights, clf.bias, reg_lambda);
            if (std::fabs(prev - obj) < 1e-6) break;
            prev = obj;
        }
        return clf;
    }

    // per-sample updates; L2 decay applied through a running scale so each
    // update touches only the sample's features
    const double lr = 0.5;
    double wscale = 1.0;
    Rng rng(seed);
    std::vector<size_t> order(xs.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;
    for (int epoch = 0; epoch < epochs; ++epoch) {
        rng.shuffle(order);
        for (const size_t i : order) {
            std::array<double, kNumLangs> scores = clf.bias;
            for (size_t c = 0; c < kNumLangs; ++c) {
                const double* w = clf.weights.data() + c * static_cast<size_t>(features);
                double dot = 0.0;
                for (const auto& [idx, v] : xs[i]) dot += w[idx] * v;
                scores[c] += wscale * dot;
            }
            std::array<double, kNumLangs> probs{};
            softmax4(scores, probs);
            wscale *= 1.0 - lr * reg_lambda;
            for (size_t c = 0; c < kNumLangs; ++c) {
                const double err = probs[c] - (ys[i] == static_cast<Lang>(c) ? 1.0 : 0.0);
                clf.bias[c] -= lr * err;
                double* w = clf.weights.data() + c * static_cast<size_t>(features);
                for (const auto& [idx, v] : xs[i]) w[idx] -= lr * err * v / wscale;
            }
            if (wscale < 1e-6) {
                for (auto& w : clf.weights) w *= wscale;
                wscale = 1.0;
            }
        }
    }
    for (auto& w : clf.weights) w *= wscale;
    return clf;
}

std::pair<Lang, std::array<double, kNumLangs>> predict(const LinearClassifier& clf, const TfIdfModel& tfidf,
                                                       const std::string& text) {
    const auto x = vectorize(tfidf, text);
    std::array<double, kNumLangs> probs{};
    softmax4(scores_of(clf, x), probs);
    return {argmax4(probs), probs};
}

RouterMetrics evaluate_router(const LinearClassifier& clf, const TfIdfModel& tfidf,
                              const std::vector<Document>& docs) {
    if (docs.empty()) throw std::runtime_error("cannot evaluate router on an empty set");
    RouterMetrics m;
    for (const auto& d : docs) {
        const auto [pred, probs] = predict(clf, tfidf, d.text);
        ++m.confusion[static_cast<size_t>(d.lang)][static_cast<size_t>(pred)];
    }
    int64_t correct = 0, total = 0;
    double psum = 0.0, rsum = 0.0, fsum = 0.0;
    for (size_t c = 0; c < kNumLangs; ++c) {
        const int64_t tp = m.confusion[c][c];
        int64_t support = 0, predicted = 0;
        for (size_t j = 0; j < kNumLangs; ++j) {
            support += m.confusion[c][j];
            predicted += m.confusion[j][c];
            total += m.confusion[c][j];
        }
        correct += tp;
        const double prec = predicted > 0 ? static_cast<double>(tp) / static_cast<double>(predicted) : 0.0;
        const double rec = support > 0 ? static_cast<double>(tp) / static_cast<double>(support) : 0.0;
        psum += prec;
        rsum += rec;
        fsum += (prec + rec) > 0.0 ? 2.0 * prec * rec / (prec + rec) : 0.0;
    }
    m.accuracy = static_cast<double>(correct) / static_cast<double>(total);
    m.precision = psum / kNumLangs;
    m.recall = rsum / kNumLangs;
    m.f1 = fsum / kNumLangs;
    return m;
}

void write_router_metrics_csv(const std::filesystem::path& path, const RouterMetrics& m) {
    write_csv(path, {"metric", "value"},
              {{"accuracy", fmt_float(m.accuracy)},
               {"macro_precision", fmt_float(m.precision)},
               {"macro_recall", fmt_float(m.recall)},
               {"macro_f1", fmt_float(m.f1)}});
}

void write_confusion_csv(const std::filesystem::path& path, const RouterMetrics& m) {
    std::vector<std::string> header{"class"};
    for (const Lang l : kAllLangs) header.push_back(lang_name(l));
    std::vector<std::vector<std::string>> rows;
    for (const Lang l : kAllLangs) {
        std::vector<std::string> row{lang_name(l)};
        for (size_t j = 0; j < kNumLangs; ++j)
            row.push_back(std::to_string(m.confusion[static_cast<size_t>(l)][j]));
        rows.push_back(std::move(row));
    }
    write_csv(path, header, rows);
}

RouteDecision route_from_probs(Lang predicted, const std::array<double, kNumLangs>& probs,
                               const std::set<Lang>& available, bool common_present) {
    if (available.empty() && !common_present) throw std::runtime_error("no experts available to route to");
    RouteDecision d{};
    d.predicted = predicted;
    d.probs = probs;
    if (available.count(predicted)) {
        d.expert = predicted;
        return d;
    }
    if (common_present) {
        d.use_common = true;
        return d;
    }
    double best = -1.0;
    for (const Lang l : kAllLangs)
        if (available.count(l) && probs[static_cast<size_t>(l)] > best) {
            best = probs[static_cast<size_t>(l)];
            d.expert = l;
        }
    return d;
}

RouteDecision route(const LinearClassifier& clf, const TfIdfModel& tfidf, const std::string& text,
                    const std::set<Lang>& available, bool common_present) {
    const auto [pred, probs] = predict(clf, tfidf, text);
    return route_from_probs(pred, probs, available, common_present);
}

Router train_router(const std::vector<Document>& docs, RouterTrainer trainer, double reg_lambda, int epochs,
                    uint64_t seed) {
    Router r;
    r.tfidf = fit_tfidf(docs);
    std::vector<SparseVec> xs;
    std::vector<Lang> ys;
    xs.reserve(docs.size());
    ys.reserve(docs.size());
    for (const auto& d : docs) {
        xs.push_back(vectorize(r.tfidf, d.text));
        ys.push_back(d.lang);
    }
    r.clf = train_classifier(xs, ys, trainer, reg_lambda, epochs, seed);
    // vectors never reference features beyond the vocabulary, but a term can
    // be absent from every vector; size the classifier to the full vocabulary
    if (r.clf.features < r.tfidf.features()) {
        std::vector<double> widened(kNumLangs * static_cast<size_t>(r.tfidf.features()), 0.0);
        for (size_t c = 0; c < kNumLangs; ++c)
            std::copy_n(r.clf.weights.data() + c * static_cast<size_t>(r.clf.features), r.clf.features,
                        widened.data() + c * static_cast<size_t>(r.tfidf.features()));
        r.clf.weights = std::move(widened);
        r.clf.features = r.tfidf.features();
    }
    return r;
}

void save_router(const std::filesystem::path& path, const Router& router) {
    nlohmann::json j;
    j["version"] = 1;
    j["classes"] = {"en", "fr", "de", "py"};
    j["trainer"] = trainer_name(router.clf.trainer);
    j["terms"] = router.tfidf.terms;
    j["idf"] = router.tfidf.idf;
    auto& w = j["weights"] = nlohmann::json::array();
    for (size_t c = 0; c < kNumLangs; ++c)
        w.push_back(std::vector<double>(router.clf.weights.begin() + c * static_cast<size_t>(router.clf.features),
                                        router.clf.weights.begin() + (c + 1) * static_cast<size_t>(router.clf.features)));
    j["bias"] = router.clf.bias;
    write_file(path, j.dump(1) + "\n");
}

Router load_router(const std::filesystem::path& path) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(read_file(path));
    } catch (const nlohmann::json::exception& e) {
        throw std::runtime_error("router file " + path.string() + ": " + e.what());
    }
    Router r;
    r.tfidf.terms = j.at("terms").get<std::vector<std::string>>();
    r.tfidf.idf = j.at("idf").get<std::vector<double>>();
    if (r.tfidf.terms.size() != r.tfidf.idf.size())
        throw std::runtime_error("router file " + path.string() + ": terms and idf lengths differ");
    for (size_t i = 0; i < r.tfidf.terms.size(); ++i) r.tfidf.vocab.emplace(r.tfidf.terms[i], static_cast<int>(i));
    r.clf.trainer = parse_trainer(j.at("trainer").get<std::string>());
    r.clf.features = r.tfidf.features();
    const auto rows = j.at("weights").get<std::vector<std::vector<double>>>();
    if (rows.size() != kNumLangs) throw std::runtime_error("router file " + path.string() + ": need 4 weight rows");
    for (const auto& row : rows) {
        if (row.size() != r.tfidf.terms.size())
            throw std::runtime_error("router file " + path.string() + ": weight row width mismatch");
        r.clf.weights.insert(r.clf.weights.end(), row.begin(), row.end());
    }
    const auto bias = j.at("bias").get<std::vector<double>>();
    if (bias.size() != kNumLangs) throw std::runtime_error("router file " + path.string() + ": need 4 bias values");
    std::copy(bias.begin(), bias.end(), r.clf.bias.begin());
    return r;
}

}  // namespace modmoe
