#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <set>
#include <string>
#include <unordered_map>
#include <vector>

#include "modmoe/corpus.hpp"

namespace modmoe {

// lowercased word tokens (letters, digits, underscore, and any non-ASCII
// bytes) plus single-character tokens for code punctuation
std::vector<std::string> router_tokenize(const std::string& text);

double smooth_idf(int64_t n_docs, int64_t df);

struct TfIdfModel {
    std::vector<std::string> terms;  // index -> term, lexicographic
    std::unordered_map<std::string, int> vocab;
    std::vector<double> idf;
    int features() const { return static_cast<int>(idf.size()); }
};

// vocabulary keeps terms appearing in at least two documents
TfIdfModel fit_tfidf(const std::vector<Document>& docs);

// (feature index, value) pairs sorted by index, L2-normalized
using SparseVec = std::vector<std::pair<int, double>>;
SparseVec vectorize(const TfIdfModel& model, const std::string& text);

enum class RouterTrainer { logreg_batch, logreg_sgd };
const char* trainer_name(RouterTrainer t);
RouterTrainer parse_trainer(const std::string& name);

struct LinearClassifier {
    std::vector<double> weights;  // [kNumLangs x F], row-major by class
    std::array<double, kNumLangs> bias{};
    RouterTrainer trainer = RouterTrainer::logreg_batch;
    int features = 0;
};

// mean softmax cross-entropy plus (lambda/2)*||W||^2; bias unregularized
double router_objective(const std::vector<SparseVec>& xs, const std::vector<Lang>& ys,
                        const std::vector<double>& weights, const std::array<double, kNumLangs>& bias,
                        double reg_lambda);
void router_gradient(const std::vector<SparseVec>& xs, const std::vector<Lang>& ys,
                     const std::vector<double>& weights, const std::array<double, kNumLangs>& bias, double reg_lambda,
                     std::vector<double>& grad_w, std::array<double, kNumLangs>& grad_b);

LinearClassifier train_classifier(const std::vector<SparseVec>& xs, const std::vector<Lang>& ys,
                                  RouterTrainer trainer, double reg_lambda, int epochs, uint64_t seed);

std::pair<Lang, std::array<double, kNumLangs>> predict(const LinearClassifier& clf, const TfIdfModel& tfidf,
                                                       const std::string& text);

struct RouterMetrics {
    double accuracy = 0.0;
    double precision = 0.0;  // macro
    double recall = 0.0;     // macro
    double f1 = 0.0;         // macro
    std::array<std::array<int64_t, kNumLangs>, kNumLangs> confusion{};  // [true][predicted]
};
RouterMetrics evaluate_router(const LinearClassifier& clf, const TfIdfModel& tfidf,
                              const std::vector<Document>& docs);
void write_router_metrics_csv(const std::filesystem::path& path, const RouterMetrics& m);
void write_confusion_csv(const std::filesystem::path& path, const RouterMetrics& m);

struct RouteDecision {
    Lang predicted;
    bool use_common = false;
    Lang expert;  // meaningful when use_common is false
    std::array<double, kNumLangs> probs{};
};
// predicted class if routable, else the common expert if present, else the
// available class with the highest router probability
RouteDecision route_from_probs(Lang predicted, const std::array<double, kNumLangs>& probs,
                               const std::set<Lang>& available, bool common_present);
RouteDecision route(const LinearClassifier& clf, const TfIdfModel& tfidf, const std::string& text,
                    const std::set<Lang>& available, bool common_present);

struct Router {
    TfIdfModel tfidf;
    LinearClassifier clf;
};
Router train_router(const std::vector<Document>& docs, RouterTrainer trainer, double reg_lambda, int epochs,
                    uint64_t seed);
void save_router(const std::filesystem::path& path, const Router& router);
Router load_router(const std::filesystem::path& path);

}  // namespace modmoe
