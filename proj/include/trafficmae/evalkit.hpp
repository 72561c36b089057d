#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <memory>
#include <numeric>
#include <set>
#include <string>
#include <vector>

#include "trafficmae/dataio.hpp"
#include "trafficmae/layers.hpp"
#include "trafficmae/tensor.hpp"

namespace tmae {

// ---------------------------------------------------------------------------
// Fold planning
// ---------------------------------------------------------------------------

struct FoldPlan {
    int k = 5;
    std::map<std::string, int> assignments;  // sample_id -> fold
    std::string grouping_key;                // "session_id" or "sample_id"
    std::vector<std::string> warnings;

    int fold_of(const std::string& sample_id) const {
        auto it = assignments.find(sample_id);
        if (it == assignments.end())
            throw ArgumentError("fold plan has no entry for sample '" + sample_id + "'");
        return it->second;
    }
};

/**
 * Sessions are assigned whole to folds; within each class, sessions go
 * greedily to the currently lightest fold so per-class session counts stay
 * balanced. Records without a session id group by their own sample id.
 */
inline FoldPlan stratified_session_kfold(const Dataset& d, int k = 5,
                                         std::uint64_t seed = 1) {
    if (k < 2) throw ArgumentError("stratified_session_kfold: k must be >= 2");
    if (d.records.empty()) throw DataError("stratified_session_kfold: empty dataset");

    FoldPlan plan;
    plan.k = k;
    bool any_session = false;
    for (const auto& r : d.records)
        if (r.session_id) any_session = true;
    plan.grouping_key = any_session ? "session_id" : "sample_id";

    // session -> (class label, member sample ids)
    struct Group {
        std::string label;
        std::vector<std::string> members;
    };
    std::map<std::string, Group> groups;
    for (const auto& r : d.records) {
        if (!r.label)
            throw DataError("record '" + r.sample_id + "' has no label");
        const std::string key = r.session_id ? *r.session_id : r.sample_id;
        auto& g = groups[key];
        if (g.members.empty()) g.label = *r.label;
        g.members.push_back(r.sample_id);
    }

    // class -> session keys, visited in seeded shuffled order
    std::map<std::string, std::vector<std::string>> by_class;
    for (const auto& [key, g] : groups) by_class[g.label].push_back(key);

    Rng rng(seed);
    for (auto& [label, keys] : by_class) {
        if (static_cast<int>(keys.size()) < k)
            plan.warnings.push_back("class '" + label + "' has only " +
                                    std::to_string(keys.size()) + " " +
                                    plan.grouping_key + " groups for " +
                                    std::to_string(k) + " folds");
        std::shuffle(keys.begin(), keys.end(), rng);
        std::vector<std::size_t> class_count(k, 0), sample_count(k, 0);
        for (const auto& key : keys) {
            int best = 0;
            for (int f = 1; f < k; ++f)
                if (class_count[f] < class_count[best] ||
                    (class_count[f] == class_count[best] &&
                     sample_count[f] < sample_count[best]))
                    best = f;
            class_count[best] += 1;
            sample_count[best] += groups[key].members.size();
            for (const auto& id : groups[key].members) plan.assignments[id] = best;
        }
    }
    return plan;
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

struct ClassifierReport {
    std::vector<std::string> classes;  // union of truth/prediction labels, sorted
    std::map<std::string, double> precision, recall, f1;
    std::map<std::string, std::size_t> support;
    double macro_f1 = 0.0;
    double weighted_f1 = 0.0;
    std::vector<std::vector<std::size_t>> confusion;  // truth x prediction
    std::size_t trainables = 0;
};

/// Confusion-matrix precision/recall/F1. Classes absent from both truth and
/// predictions never enter the report, hence never dilute the macro mean.
inline ClassifierReport f1_scores(const std::vector<std::string>& predictions,
                                  const std::vector<std::string>& truth) {
    if (predictions.size() != truth.size())
        throw ArgumentError("f1_scores: prediction/truth length mismatch");
    if (truth.empty()) throw ArgumentError("f1_scores: empty input");

    ClassifierReport rep;
    std::set<std::string> labels(truth.begin(), truth.end());
    labels.insert(predictions.begin(), predictions.end());
    rep.classes.assign(labels.begin(), labels.end());

    std::map<std::string, std::size_t> index;
    for (std::size_t i = 0; i < rep.classes.size(); ++i) index[rep.classes[i]] = i;
    const std::size_t C = rep.classes.size();
    rep.confusion.assign(C, std::vector<std::size_t>(C, 0));
    for (std::size_t i = 0; i < truth.size(); ++i)
        ++rep.confusion[index[truth[i]]][index[predictions[i]]];

    double weighted = 0.0;
    std::size_t total_support = 0;
    for (std::size_t c = 0; c < C; ++c) {
        std::size_t tp = rep.confusion[c][c], fn = 0, fp = 0;
        for (std::size_t j = 0; j < C; ++j) {
            if (j == c) continue;
            fn += rep.confusion[c][j];
            fp += rep.confusion[j][c];
        }
        const std::string& cls = rep.classes[c];
        rep.support[cls] = tp + fn;
        rep.precision[cls] = tp + fp ? static_cast<double>(tp) / (tp + fp) : 0.0;
        rep.recall[cls] = tp + fn ? static_cast<double>(tp) / (tp + fn) : 0.0;
        const double denom = 2.0 * tp + fp + fn;
        rep.f1[cls] = denom > 0 ? 2.0 * tp / denom : 0.0;
        rep.macro_f1 += rep.f1[cls];
        weighted += rep.f1[cls] * static_cast<double>(rep.support[cls]);
        total_support += rep.support[cls];
    }
    rep.macro_f1 /= static_cast<double>(C);
    rep.weighted_f1 = total_support ? weighted / static_cast<double>(total_support) : 0.0;
    return rep;
}

// ---------------------------------------------------------------------------
// Downstream MLP
// ---------------------------------------------------------------------------

struct MLPConfig {
    std::size_t hidden1 = 512;
    std::size_t hidden2 = 256;
    double dropout = 0.3;
    int epochs = 100;
    std::size_t batch_size = 64;
    double lr = 1e-3;
    std::uint64_t seed = 1;
};

/// Inverse-frequency class weights scaled so their mean is 1 (the vector sums
/// to the class count; uniform data gives all ones).
inline std::vector<double> class_weights(const std::vector<int>& y, std::size_t n_classes) {
    std::vector<double> counts(n_classes, 0.0);
    for (int c : y) counts[static_cast<std::size_t>(c)] += 1.0;
    std::vector<double> w(n_classes, 0.0);
    double inv_sum = 0.0;
    for (std::size_t c = 0; c < n_classes; ++c) {
        w[c] = counts[c] > 0 ? 1.0 / counts[c] : 0.0;
        inv_sum += w[c];
    }
    if (inv_sum <= 0.0) throw ArgumentError("class_weights: no samples");
    for (auto& x : w) x *= static_cast<double>(n_classes) / inv_sum;
    return w;
}

class MlpClassifier {
public:
    MlpClassifier() = default;
    MlpClassifier(std::size_t input_dim, std::vector<std::string> classes,
                  const MLPConfig& cfg, Rng& rng)
        : cfg_(cfg),
          classes_(std::move(classes)),
          d1_(input_dim, cfg.hidden1, Activation::ReLU, rng),
          d2_(cfg.hidden1, cfg.hidden2, Activation::ReLU, rng),
          out_(cfg.hidden2, classes_.size(), Activation::Softmax, rng) {}

    Tensor forward(const Tensor& x, bool training, Rng& rng) const {
        Tensor h1 = dropout(d1_.forward(x), cfg_.dropout, training, rng);
        Tensor h2 = dropout(d2_.forward(h1), cfg_.dropout, training, rng);
        return out_.forward(h2);
    }

    /// Class probabilities for a [S x D] matrix, no dropout.
    Tensor predict_proba(const Tensor& x) const {
        Rng unused(0);
        return forward(x, false, unused);
    }

    std::vector<std::string> predict(const Tensor& x) const {
        Tensor p = predict_proba(x);
        const std::size_t C = classes_.size(), S = p.dim(0);
        std::vector<std::string> out;
        out.reserve(S);
        for (std::size_t i = 0; i < S; ++i) {
            const double* row = p.value().data() + i * C;
            std::size_t best = 0;
            for (std::size_t c = 1; c < C; ++c)
                if (row[c] > row[best]) best = c;
            out.push_back(classes_[best]);
        }
        return out;
    }

    const std::vector<std::string>& classes() const { return classes_; }
    const MLPConfig& config() const { return cfg_; }

    ParamList params() const {
        ParamList out;
        d1_.collect("mlp.dense1", out);
        d2_.collect("mlp.dense2", out);
        out_.collect("mlp.out", out);
        return out;
    }

private:
    MLPConfig cfg_;
    std::vector<std::string> classes_;
    DenseLayer d1_, d2_, out_;
};

inline std::size_t count_trainables(const MlpClassifier& m) {
    return count_scalars(m.params());
}
inline std::size_t count_trainables(const ParamList& p) { return count_scalars(p); }

namespace detail {

inline Tensor rows_tensor(const std::vector<std::vector<double>>& X) {
    if (X.empty()) throw ArgumentError("empty feature matrix");
    const std::size_t D = X[0].size();
    std::vector<double> flat;
    flat.reserve(X.size() * D);
    for (const auto& r : X) {
        if (r.size() != D) throw ShapeError("ragged feature matrix");
        flat.insert(flat.end(), r.begin(), r.end());
    }
    return Tensor::from(std::move(flat), {X.size(), D});
}

inline std::vector<std::string> sorted_classes(const std::vector<std::string>& y) {
    std::set<std::string> s(y.begin(), y.end());
    return {s.begin(), s.end()};
}

}  // namespace detail

/// Class-weighted categorical cross-entropy with Adam; deterministic per seed.
inline MlpClassifier train_mlp_classifier(const std::vector<std::vector<double>>& X,
                                          const std::vector<std::string>& y,
                                          const MLPConfig& cfg = {}) {
    if (X.size() != y.size())
        throw ArgumentError("train_mlp_classifier: feature/label count mismatch");
    auto classes = detail::sorted_classes(y);
    if (classes.size() < 2)
        throw ArgumentError("train_mlp_classifier: need at least 2 classes");

    std::map<std::string, int> index;
    for (std::size_t i = 0; i < classes.size(); ++i)
        index[classes[i]] = static_cast<int>(i);
    std::vector<int> labels;
    labels.reserve(y.size());
    for (const auto& l : y) labels.push_back(index[l]);
    const auto weights = class_weights(labels, classes.size());

    Rng rng(cfg.seed);
    MlpClassifier clf(X[0].size(), classes, cfg, rng);
    auto params = param_tensors(clf.params());
    AdamState adam;
    adam.lr = cfg.lr;

    const std::size_t N = X.size();
    std::vector<std::size_t> order(N);
    std::iota(order.begin(), order.end(), 0);
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        std::shuffle(order.begin(), order.end(), rng);
        for (std::size_t start = 0; start < N; start += cfg.batch_size) {
            const std::size_t end = std::min(N, start + cfg.batch_size);
            std::vector<std::vector<double>> bx;
            std::vector<int> by;
            bx.reserve(end - start);
            for (std::size_t i = start; i < end; ++i) {
                bx.push_back(X[order[i]]);
                by.push_back(labels[order[i]]);
            }
            Tensor probs = clf.forward(detail::rows_tensor(bx), true, rng);
            Tensor loss = loss_categorical_ce(probs, by, weights);
            zero_grads(params);
            backprop(loss);
            adam_step(params, adam);
        }
    }
    return clf;
}

// ---------------------------------------------------------------------------
// Neighborhood purity
// ---------------------------------------------------------------------------

struct PurityCurve {
    std::vector<std::size_t> ks;
    std::vector<double> macro_p;  // aligned with ks
    std::string metric = "cosine";
};

namespace detail {

inline double cosine_distance(const double* a, const double* b, std::size_t d) {
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (std::size_t i = 0; i < d; ++i) {
        dot += a[i] * b[i];
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    return 1.0 - dot / (std::sqrt(na) * std::sqrt(nb));
}

}  // namespace detail

/**
 * Macro-averaged K-neighborhood purity: per sample, the fraction of its K
 * cosine-nearest neighbors (self excluded) sharing its class; averaged per
 * class first, then across classes. Zero-norm rows are excluded with a
 * warning.
 */
inline double knn_class_probability(const std::vector<std::vector<double>>& X,
                                    const std::vector<std::string>& y, std::size_t K,
                                    std::vector<std::string>* warnings = nullptr) {
    if (X.size() != y.size())
        throw ArgumentError("knn_class_probability: feature/label count mismatch");
    if (K >= X.size())
        throw ArgumentError("knn_class_probability: K=" + std::to_string(K) +
                            " must be below the sample count " +
                            std::to_string(X.size()));
    if (K < 1) throw ArgumentError("knn_class_probability: K must be >= 1");

    std::vector<std::size_t> keep;
    for (std::size_t i = 0; i < X.size(); ++i) {
        double norm = 0.0;
        for (double v : X[i]) norm += v * v;
        if (norm > 0.0) {
            keep.push_back(i);
        } else if (warnings) {
            warnings->push_back("sample " + std::to_string(i) +
                                " has a zero-norm embedding and was excluded");
        }
    }
    if (keep.size() <= K)
        throw ArgumentError("knn_class_probability: not enough nonzero samples for K");

    const std::size_t D = X[0].size();
    std::map<std::string, std::pair<double, std::size_t>> per_class;  // sum, count
    std::vector<std::pair<double, std::size_t>> dist;
    for (std::size_t ii = 0; ii < keep.size(); ++ii) {
        const std::size_t i = keep[ii];
        dist.clear();
        for (std::size_t jj = 0; jj < keep.size(); ++jj) {
            if (jj == ii) continue;
            const std::size_t j = keep[jj];
            dist.emplace_back(detail::cosine_distance(X[i].data(), X[j].data(), D), j);
        }
        std::partial_sort(dist.begin(), dist.begin() + K, dist.end());
        std::size_t same = 0;
        for (std::size_t k = 0; k < K; ++k)
            if (y[dist[k].second] == y[i]) ++same;
        auto& [sum, count] = per_class[y[i]];
        sum += static_cast<double>(same) / static_cast<double>(K);
        count += 1;
    }
    double macro = 0.0;
    for (const auto& [cls, sc] : per_class)
        macro += sc.first / static_cast<double>(sc.second);
    return macro / static_cast<double>(per_class.size());
}

inline PurityCurve purity_curve(const std::vector<std::vector<double>>& X,
                                const std::vector<std::string>& y,
                                const std::vector<std::size_t>& ks) {
    PurityCurve c;
    c.ks = ks;
    for (auto k : ks) c.macro_p.push_back(knn_class_probability(X, y, k));
    return c;
}

// ---------------------------------------------------------------------------
// Random forest (Gini CART)
// ---------------------------------------------------------------------------

struct RFConfig {
    std::size_t n_trees = 100;
    std::size_t max_features = 0;  // 0 -> ceil(sqrt(D))
    std::size_t min_samples_leaf = 1;
    std::uint64_t seed = 1;
};

inline double gini_impurity(const std::vector<std::size_t>& counts) {
    std::size_t total = 0;
    for (auto c : counts) total += c;
    if (total == 0) return 0.0;
    double g = 1.0;
    for (auto c : counts) {
        const double p = static_cast<double>(c) / static_cast<double>(total);
        g -= p * p;
    }
    return g;
}

class RandomForest {
public:
    struct Node {
        int feature = -1;        // -1 marks a leaf
        double threshold = 0.0;  // go left when x[feature] <= threshold
        int left = -1, right = -1;
        int label = 0;           // leaf prediction (class index)
    };
    struct Tree {
        std::vector<Node> nodes;
    };

    std::vector<std::string> classes;
    std::vector<Tree> trees;

    std::string predict_one(const std::vector<double>& x) const {
        std::vector<std::size_t> votes(classes.size(), 0);
        for (const auto& t : trees) {
            int n = 0;
            while (t.nodes[n].feature >= 0)
                n = x[t.nodes[n].feature] <= t.nodes[n].threshold ? t.nodes[n].left
                                                                  : t.nodes[n].right;
            ++votes[t.nodes[n].label];
        }
        std::size_t best = 0;
        for (std::size_t c = 1; c < votes.size(); ++c)
            if (votes[c] > votes[best]) best = c;  // tie -> lexically first class
        return classes[best];
    }

    std::vector<std::string> predict(const std::vector<std::vector<double>>& X) const {
        std::vector<std::string> out;
        out.reserve(X.size());
        for (const auto& x : X) out.push_back(predict_one(x));
        return out;
    }
};

namespace detail {

struct TreeBuilder {
    const std::vector<std::vector<double>>& X;
    const std::vector<int>& y;
    std::size_t n_classes;
    std::size_t max_features;
    std::size_t min_samples_leaf;
    Rng& rng;
    RandomForest::Tree& tree;

    int build(std::vector<std::size_t> idx) {
        std::vector<std::size_t> counts(n_classes, 0);
        for (auto i : idx) ++counts[static_cast<std::size_t>(y[i])];
        const int node_id = static_cast<int>(tree.nodes.size());
        tree.nodes.emplace_back();
        int majority = 0;
        for (std::size_t c = 1; c < n_classes; ++c)
            if (counts[c] > counts[static_cast<std::size_t>(majority)])
                majority = static_cast<int>(c);
        tree.nodes[node_id].label = majority;
        if (gini_impurity(counts) == 0.0 || idx.size() < 2 * min_samples_leaf)
            return node_id;

        // sample candidate features without replacement
        const std::size_t D = X[0].size();
        std::vector<std::size_t> features(D);
        std::iota(features.begin(), features.end(), 0);
        std::shuffle(features.begin(), features.end(), rng);
        features.resize(std::min(max_features, D));

        double best_gain = 0.0;
        int best_feature = -1;
        double best_threshold = 0.0;
        const double parent = gini_impurity(counts);
        const double total = static_cast<double>(idx.size());
        for (auto f : features) {
            std::vector<std::pair<double, int>> vals;
            vals.reserve(idx.size());
            for (auto i : idx) vals.emplace_back(X[i][f], y[i]);
            std::sort(vals.begin(), vals.end());
            std::vector<std::size_t> left(n_classes, 0), right = counts;
            for (std::size_t s = 0; s + 1 < vals.size(); ++s) {
                ++left[static_cast<std::size_t>(vals[s].second)];
                --right[static_cast<std::size_t>(vals[s].second)];
                if (vals[s].first == vals[s + 1].first) continue;
                const double nl = static_cast<double>(s + 1), nr = total - nl;
                if (nl < min_samples_leaf || nr < min_samples_leaf) continue;
                const double gain = parent - (nl / total) * gini_impurity(left) -
                                    (nr / total) * gini_impurity(right);
                if (gain > best_gain + 1e-15) {
                    best_gain = gain;
                    best_feature = static_cast<int>(f);
                    best_threshold = 0.5 * (vals[s].first + vals[s + 1].first);
                }
            }
        }
        if (best_feature < 0) return node_id;

        std::vector<std::size_t> li, ri;
        for (auto i : idx)
            (X[i][static_cast<std::size_t>(best_feature)] <= best_threshold ? li : ri)
                .push_back(i);
        if (li.empty() || ri.empty()) return node_id;
        tree.nodes[node_id].feature = best_feature;
        tree.nodes[node_id].threshold = best_threshold;
        const int l = build(std::move(li));
        tree.nodes[node_id].left = l;
        const int r = build(std::move(ri));
        tree.nodes[node_id].right = r;
        return node_id;
    }
};

}  // namespace detail

inline RandomForest train_random_forest(const std::vector<std::vector<double>>& X,
                                        const std::vector<std::string>& y,
                                        const RFConfig& cfg = {}) {
    if (X.empty() || X.size() != y.size())
        throw ArgumentError("train_random_forest: bad feature/label input");
    RandomForest rf;
    rf.classes = detail::sorted_classes(y);
    std::map<std::string, int> index;
    for (std::size_t i = 0; i < rf.classes.size(); ++i)
        index[rf.classes[i]] = static_cast<int>(i);
    std::vector<int> labels;
    labels.reserve(y.size());
    for (const auto& l : y) labels.push_back(index[l]);

    const std::size_t D = X[0].size();
    const std::size_t mf = cfg.max_features
                               ? cfg.max_features
                               : static_cast<std::size_t>(
                                     std::ceil(std::sqrt(static_cast<double>(D))));
    Rng rng(cfg.seed);
    std::uniform_int_distribution<std::size_t> pick(0, X.size() - 1);
    rf.trees.resize(cfg.n_trees);
    for (auto& tree : rf.trees) {
        std::vector<std::size_t> boot(X.size());
        for (auto& b : boot) b = pick(rng);
        detail::TreeBuilder builder{X,  labels, rf.classes.size(), mf,
                                    cfg.min_samples_leaf, rng, tree};
        builder.build(std::move(boot));
    }
    return rf;
}

// ---------------------------------------------------------------------------
// k-NN classifier
// ---------------------------------------------------------------------------

/// Cosine-distance K-NN with majority vote; ties go to the class of the
/// nearest neighbor among the tied classes.
inline std::vector<std::string> knn_classify(
    const std::vector<std::vector<double>>& X_train,
    const std::vector<std::string>& y_train,
    const std::vector<std::vector<double>>& X_test, std::size_t K = 7) {
    if (X_train.empty()) throw ArgumentError("knn_classify: empty training set");
    if (X_train.size() != y_train.size())
        throw ArgumentError("knn_classify: feature/label count mismatch");
    if (K < 1 || K > X_train.size())
        throw ArgumentError("knn_classify: K must lie in [1, |train|]");

    const std::size_t D = X_train[0].size();
    std::vector<std::string> out;
    out.reserve(X_test.size());
    std::vector<std::pair<double, std::size_t>> dist;
    for (const auto& q : X_test) {
        dist.clear();
        for (std::size_t j = 0; j < X_train.size(); ++j)
            dist.emplace_back(detail::cosine_distance(q.data(), X_train[j].data(), D), j);
        std::partial_sort(dist.begin(), dist.begin() + K, dist.end());
        std::map<std::string, std::size_t> votes;
        for (std::size_t k = 0; k < K; ++k) ++votes[y_train[dist[k].second]];
        std::size_t top = 0;
        for (const auto& [cls, n] : votes) top = std::max(top, n);
        // nearest neighbor whose class is among the top-voted wins
        for (std::size_t k = 0; k < K; ++k) {
            const std::string& cls = y_train[dist[k].second];
            if (votes[cls] == top) {
                out.push_back(cls);
                break;
            }
        }
    }
    return out;
}

}  // namespace tmae
