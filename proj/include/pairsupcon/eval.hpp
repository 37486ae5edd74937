#pragma once

// Embedding-quality evaluation: K-Means + Hungarian clustering accuracy, Spearman correlation of
// cosine similarities against gold scores, and logistic-regression probes on frozen embeddings.

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "pairsupcon/data.hpp"
#include "pairsupcon/encoder.hpp"
#include "pairsupcon/error.hpp"
#include "pairsupcon/matrix.hpp"
#include "pairsupcon/random.hpp"

namespace pairsupcon {

struct EvalReport {
    std::string metric;
    std::vector<double> values;
    double mean = 0.0;
    double std = 0.0;  // population standard deviation of values
    nlohmann::ordered_json params = nlohmann::ordered_json::object();

    static EvalReport from_values(std::string metric, std::vector<double> values,
                                  nlohmann::ordered_json params = nlohmann::ordered_json::object()) {
        EvalReport r;
        r.metric = std::move(metric);
        r.values = std::move(values);
        r.params = std::move(params);
        if (!r.values.empty()) {
            double s = 0.0;
            for (double v : r.values) s += v;
            r.mean = s / static_cast<double>(r.values.size());
            double ss = 0.0;
            for (double v : r.values) ss += (v - r.mean) * (v - r.mean);
            r.std = std::sqrt(ss / static_cast<double>(r.values.size()));
        }
        return r;
    }

    nlohmann::ordered_json to_json() const {
        nlohmann::ordered_json j;
        j["metric"] = metric;
        j["values"] = values;
        j["mean"] = mean;
        j["std"] = std;
        j["params"] = params;
        return j;
    }

    static EvalReport from_json(const nlohmann::json& j) {
        EvalReport r;
        r.metric = j.at("metric").get<std::string>();
        r.values = j.at("values").get<std::vector<double>>();
        r.mean = j.at("mean").get<double>();
        r.std = j.at("std").get<double>();
        r.params = nlohmann::ordered_json::parse(j.at("params").dump());
        return r;
    }
};

// ---- K-Means ---------------------------------------------------------------------------------

struct KMeansResult {
    std::vector<std::size_t> assignment;
    Matrix centroids;
    double inertia = 0.0;
    std::vector<double> inertia_history;  // after every assignment step
    std::size_t iterations = 0;
};

inline constexpr std::size_t kKMeansMaxIterations = 300;

namespace kmeans_detail {

inline double sq_dist(std::span<const double> a, std::span<const double> b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double d = a[i] - b[i];
        s += d * d;
    }
    return s;
}

// D^2-weighted seeding
inline Matrix plus_plus_init(const Matrix& x, std::size_t k, Rng& rng) {
    const std::size_t n = x.rows();
    Matrix c(k, x.cols());
    std::size_t first = rng.index(n);
    std::copy(x.row(first).begin(), x.row(first).end(), c.row(0).begin());
    std::vector<double> d2(n);
    for (std::size_t i = 0; i < n; ++i) d2[i] = sq_dist(x.row(i), c.row(0));
    for (std::size_t j = 1; j < k; ++j) {
        double total = 0.0;
        for (double v : d2) total += v;
        std::size_t pick = 0;
        if (total > 0.0) {
            const double target = rng.uniform() * total;
            double acc = 0.0;
            pick = n - 1;
            for (std::size_t i = 0; i < n; ++i) {
                acc += d2[i];
                if (acc > target && d2[i] > 0.0) {
                    pick = i;
                    break;
                }
            }
            while (d2[pick] == 0.0 && pick > 0) --pick;
        } else {
            pick = rng.index(n);
        }
        std::copy(x.row(pick).begin(), x.row(pick).end(), c.row(j).begin());
        for (std::size_t i = 0; i < n; ++i) d2[i] = std::min(d2[i], sq_dist(x.row(i), c.row(j)));
    }
    return c;
}

} // namespace kmeans_detail

// k-means++ seeding then Lloyd iterations until the assignment stops changing (or 300 rounds).
// A cluster that loses all its points is moved onto the point farthest from its centroid.
inline KMeansResult kmeans(const Matrix& x, std::size_t k, std::uint64_t seed,
                           std::size_t max_iterations = kKMeansMaxIterations) {
    const std::size_t n = x.rows();
    detail::require(k >= 1, "kmeans: need at least one cluster");
    detail::require(k <= n, "kmeans: " + std::to_string(k) + " clusters for " + std::to_string(n) + " points");
    detail::require(x.all_finite(), "kmeans: non-finite input");
    Rng rng(seed);
    KMeansResult res;
    res.centroids = kmeans_detail::plus_plus_init(x, k, rng);
    res.assignment.assign(n, k);  // k = unassigned
    std::vector<double> dist(n);

    for (std::size_t it = 0; it < max_iterations; ++it) {
        bool changed = false;
        double inertia = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            std::size_t best = 0;
            double bd = std::numeric_limits<double>::infinity();
            for (std::size_t j = 0; j < k; ++j) {
                const double d = kmeans_detail::sq_dist(x.row(i), res.centroids.row(j));
                if (d < bd) {
                    bd = d;
                    best = j;
                }
            }
            changed = changed || best != res.assignment[i];
            res.assignment[i] = best;
            dist[i] = bd;
            inertia += bd;
        }
        // empty clusters take the currently worst-served point
        std::vector<std::size_t> counts(k, 0);
        for (std::size_t a : res.assignment) ++counts[a];
        for (std::size_t j = 0; j < k; ++j) {
            if (counts[j] > 0) continue;
            std::size_t far = 0;
            for (std::size_t i = 1; i < n; ++i)
                if (dist[i] > dist[far]) far = i;
            inertia -= dist[far];
            --counts[res.assignment[far]];
            res.assignment[far] = j;
            ++counts[j];
            dist[far] = 0.0;
            std::copy(x.row(far).begin(), x.row(far).end(), res.centroids.row(j).begin());
            changed = true;
        }
        res.inertia_history.push_back(inertia);
        res.inertia = inertia;
        res.iterations = it + 1;
        if (!changed) break;
        // update step
        Matrix sums(k, x.cols());
        for (std::size_t i = 0; i < n; ++i) {
            auto dst = sums.row(res.assignment[i]);
            auto src = x.row(i);
            for (std::size_t c = 0; c < dst.size(); ++c) dst[c] += src[c];
        }
        for (std::size_t j = 0; j < k; ++j)
            for (std::size_t c = 0; c < x.cols(); ++c)
                res.centroids(j, c) = sums(j, c) / static_cast<double>(counts[j]);
    }
    return res;
}

inline double inertia(const Matrix& x, std::span<const std::size_t> assignment, const Matrix& centroids) {
    double s = 0.0;
    for (std::size_t i = 0; i < x.rows(); ++i) s += kmeans_detail::sq_dist(x.row(i), centroids.row(assignment[i]));
    return s;
}

// ---- Hungarian matching --------------------------------------------------------------------------

// Minimum-cost perfect assignment on a square cost matrix (shortest augmenting paths with
// potentials, O(n^3)). Returns the column assigned to each row.
inline std::vector<std::size_t> hungarian_min_cost(const Matrix& cost) {
    detail::require(cost.rows() == cost.cols(), "hungarian: cost matrix must be square");
    const std::size_t n = cost.rows();
    const double inf = std::numeric_limits<double>::infinity();
    // 1-based arrays; index 0 is the virtual source column
    std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0);
    std::vector<std::size_t> p(n + 1, 0), way(n + 1, 0);
    for (std::size_t i = 1; i <= n; ++i) {
        p[0] = i;
        std::size_t j0 = 0;
        std::vector<double> minv(n + 1, inf);
        std::vector<char> used(n + 1, 0);
        do {
            used[j0] = 1;
            const std::size_t i0 = p[j0];
            double delta = inf;
            std::size_t j1 = 0;
            for (std::size_t j = 1; j <= n; ++j) {
                if (used[j]) continue;
                const double cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
                if (cur < minv[j]) {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if (minv[j] < delta) {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for (std::size_t j = 0; j <= n; ++j) {
                if (used[j]) {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
        } while (p[j0] != 0);
        do {
            const std::size_t j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
        } while (j0 != 0);
    }
    std::vector<std::size_t> row_to_col(n);
    for (std::size_t j = 1; j <= n; ++j) row_to_col[p[j] - 1] = j - 1;
    return row_to_col;
}

// Pred-cluster x true-class contingency counts, zero-padded to a square.
inline Matrix contingency(std::span<const std::size_t> pred, std::span<const std::size_t> truth) {
    detail::require(pred.size() == truth.size(), "hungarian_accuracy: length mismatch " + std::to_string(pred.size()) +
                                                     " vs " + std::to_string(truth.size()));
    detail::require(!pred.empty(), "hungarian_accuracy: empty labels");
    const std::size_t np = *std::max_element(pred.begin(), pred.end()) + 1;
    const std::size_t nt = *std::max_element(truth.begin(), truth.end()) + 1;
    const std::size_t n = std::max(np, nt);
    Matrix w(n, n);
    for (std::size_t i = 0; i < pred.size(); ++i) w(pred[i], truth[i]) += 1.0;
    return w;
}

// Fraction of points correctly labeled under the best one-to-one cluster -> class mapping.
inline double hungarian_accuracy(std::span<const std::size_t> pred, std::span<const std::size_t> truth) {
    const Matrix w = contingency(pred, truth);
    double hi = 0.0;
    for (double v : w.values()) hi = std::max(hi, v);
    Matrix cost(w.rows(), w.cols());
    for (std::size_t i = 0; i < w.size(); ++i) cost[i] = hi - w[i];
    const auto match = hungarian_min_cost(cost);
    double hit = 0.0;
    for (std::size_t r = 0; r < match.size(); ++r) hit += w(r, match[r]);
    return hit / static_cast<double>(pred.size());
}

inline std::size_t distinct_labels(std::span<const std::size_t> labels) {
    std::vector<std::size_t> v(labels.begin(), labels.end());
    std::sort(v.begin(), v.end());
    return static_cast<std::size_t>(std::unique(v.begin(), v.end()) - v.begin());
}

inline constexpr std::size_t kClusterRuns = 10;

// n_runs K-Means runs with seeds derived from base_seed; one accuracy per run.
inline EvalReport clustering_eval(const Matrix& x, std::span<const std::size_t> truth, std::size_t k,
                                  std::size_t n_runs = kClusterRuns, std::uint64_t base_seed = 0) {
    detail::require(truth.size() == x.rows(), "clustering_eval: " + std::to_string(truth.size()) + " labels for " +
                                                  std::to_string(x.rows()) + " rows");
    detail::require(n_runs >= 1, "clustering_eval: need at least one run");
    std::vector<double> acc;
    for (std::size_t r = 0; r < n_runs; ++r) {
        const KMeansResult km = kmeans(x, k, derive_seed(base_seed, r));
        acc.push_back(hungarian_accuracy(km.assignment, truth));
    }
    nlohmann::ordered_json params;
    params["k"] = k;
    params["runs"] = n_runs;
    params["seed"] = base_seed;
    params["points"] = x.rows();
    return EvalReport::from_values("clustering_accuracy", std::move(acc), std::move(params));
}

// ---- Spearman --------------------------------------------------------------------------------

// 1-based ranks, ties share the average rank
inline std::vector<double> average_ranks(std::span<const double> x) {
    std::vector<std::size_t> order(x.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return x[a] < x[b]; });
    std::vector<double> ranks(x.size());
    for (std::size_t i = 0; i < order.size();) {
        std::size_t j = i;
        while (j + 1 < order.size() && x[order[j + 1]] == x[order[i]]) ++j;
        const double r = 0.5 * static_cast<double>(i + j) + 1.0;
        for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = r;
        i = j + 1;
    }
    return ranks;
}

inline double pearson(std::span<const double> a, std::span<const double> b) {
    detail::require(a.size() == b.size(), "pearson: length mismatch");
    const double n = static_cast<double>(a.size());
    double ma = 0.0, mb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        ma += a[i];
        mb += b[i];
    }
    ma /= n;
    mb /= n;
    double sab = 0.0, saa = 0.0, sbb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        sab += (a[i] - ma) * (b[i] - mb);
        saa += (a[i] - ma) * (a[i] - ma);
        sbb += (b[i] - mb) * (b[i] - mb);
    }
    detail::require(saa > 0.0 && sbb > 0.0, "undefined correlation: constant input");
    return std::clamp(sab / std::sqrt(saa * sbb), -1.0, 1.0);
}

inline double spearman(std::span<const double> x, std::span<const double> y) {
    detail::require(x.size() == y.size(), "spearman: length mismatch " + std::to_string(x.size()) + " vs " +
                                              std::to_string(y.size()));
    detail::require(x.size() >= 2, "spearman: need at least two observations");
    auto constant = [](std::span<const double> v) {
        return std::all_of(v.begin(), v.end(), [&](double e) { return e == v.front(); });
    };
    detail::require(!constant(x) && !constant(y), "undefined correlation: constant input");
    const auto rx = average_ranks(x);
    const auto ry = average_ranks(y);
    return pearson(rx, ry);
}

inline double cosine(std::span<const double> a, std::span<const double> b) {
    double ab = 0.0, aa = 0.0, bb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        ab += a[i] * b[i];
        aa += a[i] * a[i];
        bb += b[i] * b[i];
    }
    detail::require(aa > 0.0 && bb > 0.0, "cosine: zero vector");
    return ab / std::sqrt(aa * bb);
}

// Cosine of mean-pooled representations vs gold, one Spearman over the whole set.
inline EvalReport sts_eval(const ModelParams& params, const Vocabulary& vocab, std::span<const ScoredPair> pairs) {
    detail::require(pairs.size() >= 2, "sts_eval: need at least two scored pairs");
    std::vector<std::string> a, b;
    std::vector<double> gold;
    for (const auto& p : pairs) {
        a.push_back(p.first);
        b.push_back(p.second);
        gold.push_back(p.score);
    }
    const Matrix ua = embed_texts(a, vocab, params);
    const Matrix ub = embed_texts(b, vocab, params);
    std::vector<double> sims;
    for (std::size_t i = 0; i < pairs.size(); ++i) sims.push_back(cosine(ua.row(i), ub.row(i)));
    nlohmann::ordered_json prm;
    prm["pairs"] = pairs.size();
    prm["embedding"] = "mean_pooled";
    return EvalReport::from_values("spearman", {spearman(sims, gold)}, std::move(prm));
}

// ---- logistic probes -----------------------------------------------------------------------------

struct ProbeOptions {
    double inverse_l2 = 1.0;  // C: objective = sum_i CE_i + ||W||^2 / (2C); intercept unpenalized
    std::size_t iterations = 500;
};

// Multinomial logistic regression by full-batch gradient descent on standardized features.
class LogisticProbe {
public:
    void fit(const Matrix& x, std::span<const std::size_t> y, std::size_t classes, const ProbeOptions& opt = {}) {
        detail::require(x.rows() == y.size() && x.rows() > 0, "probe: empty or mismatched training set");
        detail::require(x.all_finite(), "probe: non-finite features");
        classes_ = classes;
        const std::size_t n = x.rows(), d = x.cols();
        mean_.assign(d, 0.0);
        scale_.assign(d, 1.0);
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t c = 0; c < d; ++c) mean_[c] += x(i, c) / static_cast<double>(n);
        for (std::size_t c = 0; c < d; ++c) {
            double ss = 0.0;
            for (std::size_t i = 0; i < n; ++i) ss += (x(i, c) - mean_[c]) * (x(i, c) - mean_[c]);
            const double sd = std::sqrt(ss / static_cast<double>(n));
            scale_[c] = sd > 1e-12 ? 1.0 / sd : 0.0;
        }
        const Matrix xs = standardize(x);
        double mean_sq = 0.0;
        for (double v : xs.values()) mean_sq += v * v / static_cast<double>(n);
        const double reg = 1.0 / (opt.inverse_l2 * static_cast<double>(n));  // per-sample scaling
        // Lipschitz bound of the mean softmax loss: 0.5 * trace(X^T X) / n, +1 for the intercept
        const double step = 1.0 / (0.5 * (mean_sq + 1.0) + reg);

        w_ = Matrix(d, classes);
        b_ = std::vector<double>(classes, 0.0);
        Matrix probs;
        for (std::size_t it = 0; it < opt.iterations; ++it) {
            probs = softmax(xs);
            for (std::size_t i = 0; i < n; ++i) probs(i, y[i]) -= 1.0;
            Matrix gw = kernels::matmul_tn(xs, probs);
            for (std::size_t k = 0; k < gw.size(); ++k) w_[k] -= step * (gw[k] / static_cast<double>(n) + reg * w_[k]);
            for (std::size_t c = 0; c < classes; ++c) {
                double gb = 0.0;
                for (std::size_t i = 0; i < n; ++i) gb += probs(i, c);
                b_[c] -= step * gb / static_cast<double>(n);
            }
        }
    }

    std::vector<std::size_t> predict(const Matrix& x) const {
        const Matrix p = softmax(standardize(x));
        std::vector<std::size_t> out;
        for (std::size_t i = 0; i < p.rows(); ++i) {
            auto r = p.row(i);
            out.push_back(static_cast<std::size_t>(std::max_element(r.begin(), r.end()) - r.begin()));
        }
        return out;
    }

private:
    Matrix standardize(const Matrix& x) const {
        detail::require(x.cols() == mean_.size(), "probe: feature width mismatch");
        Matrix out(x.rows(), x.cols());
        for (std::size_t i = 0; i < x.rows(); ++i)
            for (std::size_t c = 0; c < x.cols(); ++c) out(i, c) = (x(i, c) - mean_[c]) * scale_[c];
        return out;
    }

    Matrix softmax(const Matrix& xs) const {
        Matrix logits = kernels::matmul(xs, w_);
        for (std::size_t i = 0; i < logits.rows(); ++i) {
            auto r = logits.row(i);
            double hi = -std::numeric_limits<double>::infinity();
            for (std::size_t c = 0; c < r.size(); ++c) {
                r[c] += b_[c];
                hi = std::max(hi, r[c]);
            }
            double s = 0.0;
            for (double& v : r) {
                v = std::exp(v - hi);
                s += v;
            }
            for (double& v : r) v /= s;
        }
        return logits;
    }

    std::size_t classes_ = 0;
    std::vector<double> mean_, scale_;
    Matrix w_;
    std::vector<double> b_;
};

inline double accuracy(std::span<const std::size_t> pred, std::span<const std::size_t> truth) {
    detail::require(pred.size() == truth.size() && !pred.empty(), "accuracy: length mismatch");
    std::size_t hit = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) hit += pred[i] == truth[i];
    return static_cast<double>(hit) / static_cast<double>(pred.size());
}

inline Matrix select_rows(const Matrix& x, std::span<const std::size_t> rows) {
    Matrix out(rows.size(), x.cols());
    for (std::size_t k = 0; k < rows.size(); ++k) std::copy(x.row(rows[k]).begin(), x.row(rows[k]).end(), out.row(k).begin());
    return out;
}

// Train on one set, report test accuracy.
inline double logistic_probe(const Matrix& train_x, std::span<const std::size_t> train_y, const Matrix& test_x,
                             std::span<const std::size_t> test_y, const ProbeOptions& opt = {}) {
    detail::require(test_x.rows() == test_y.size() && !test_y.empty(), "logistic_probe: empty or mismatched test set");
    std::size_t classes = 0;
    for (std::size_t v : train_y) classes = std::max(classes, v + 1);
    for (std::size_t v : test_y) classes = std::max(classes, v + 1);
    LogisticProbe probe;
    probe.fit(train_x, train_y, classes, opt);
    return accuracy(probe.predict(test_x), test_y);
}

inline constexpr std::size_t kFewShotShots = 16;
inline constexpr std::size_t kFewShotSets = 5;

// `sets` independent draws of `shots` examples per class for training; the rest is the test set.
inline EvalReport fewshot_probe(const Matrix& x, std::span<const std::size_t> labels, std::size_t shots = kFewShotShots,
                                std::size_t sets = kFewShotSets, std::uint64_t seed = 0,
                                const ProbeOptions& opt = {}) {
    detail::require(x.rows() == labels.size(), "fewshot_probe: label count mismatch");
    detail::require(shots >= 1 && sets >= 1, "fewshot_probe: shots and sets must be >= 1");
    std::map<std::size_t, std::vector<std::size_t>> by_class;
    for (std::size_t i = 0; i < labels.size(); ++i) by_class[labels[i]].push_back(i);
    for (const auto& [c, idx] : by_class)
        detail::require(idx.size() >= shots + 1, "fewshot_probe: class " + std::to_string(c) + " has " +
                                                     std::to_string(idx.size()) + " examples, need " +
                                                     std::to_string(shots + 1));
    std::vector<double> acc;
    for (std::size_t s = 0; s < sets; ++s) {
        Rng rng(derive_seed(seed, s));
        std::vector<std::size_t> train, test;
        for (auto [c, idx] : by_class) {
            rng.shuffle(std::span(idx));
            train.insert(train.end(), idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(shots));
            test.insert(test.end(), idx.begin() + static_cast<std::ptrdiff_t>(shots), idx.end());
        }
        std::sort(train.begin(), train.end());
        std::sort(test.begin(), test.end());
        std::vector<std::size_t> ytr, yte;
        for (std::size_t i : train) ytr.push_back(labels[i]);
        for (std::size_t i : test) yte.push_back(labels[i]);
        acc.push_back(logistic_probe(select_rows(x, train), ytr, select_rows(x, test), yte, opt));
    }
    nlohmann::ordered_json prm;
    prm["shots"] = shots;
    prm["sets"] = sets;
    prm["seed"] = seed;
    prm["inverse_l2"] = opt.inverse_l2;
    prm["iterations"] = opt.iterations;
    return EvalReport::from_values("fewshot_accuracy", std::move(acc), std::move(prm));
}

} // namespace pairsupcon
