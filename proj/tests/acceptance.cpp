// End-to-end acceptance checks. One PASS/FAIL line per criterion; exit status 1 if any fails.
#include <chrono>
#include <cstdio>
#include <functional>
#include <iostream>
#include <map>
#include <numeric>
#include <sstream>

#include "pairsupcon/commands.hpp"
#include "oracles.hpp"

using namespace pairsupcon;
using diff::Graph;
using diff::Var;
namespace fs = std::filesystem;

namespace {

struct Outcome {
    bool pass = false;
    std::string detail;
};

double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string fmt(const char* f, auto... v) {
    char buf[512];
    std::snprintf(buf, sizeof buf, f, v...);
    return buf;
}

Matrix random_z(Rng& rng, std::size_t rows, std::size_t cols = 6) {
    Matrix z(rows, cols);
    for (double& v : z.values()) v = rng.uniform(-1, 1);
    return z;
}

std::vector<int> random_labels(Rng& rng, std::size_t m) {
    std::vector<int> y(m);
    for (int& v : y) v = rng.bernoulli(0.5) ? 1 : -1;
    y[rng.index(m)] = 1;
    return y;
}

struct Batch {
    ModelParams params;
    std::vector<TokenIds> rows;
    std::vector<int> y;
};

Batch random_batch(Rng& rng, std::size_t m, std::size_t d = 6, std::size_t v = 12) {
    Batch b;
    b.params = ModelParams::init(v, d, rng.next());
    for (double& e : b.params.embedding.values()) e *= 3.0;
    for (std::size_t r = 0; r < 2 * m; ++r) {
        TokenIds s(1 + rng.index(4));
        for (auto& id : s) id = 2 + rng.index(v - 2);
        b.rows.push_back(s);
    }
    b.y = random_labels(rng, m);
    return b;
}

LossBreakdown full_loss(const Batch& b, const LossOptions& o) {
    Graph g;
    ModelVars mv = ModelVars::bind(g, b.params);
    Var u = encode(mv, b.rows);
    return pairsupcon_batch(mv, u, project(mv, u), BatchLabels(b.y), o);
}

double rel(double a, double b) { return std::abs(a - b) / std::max(1.0, std::abs(b)); }

constexpr double kTaus[] = {0.05, 0.5, 1.0};

// ---- 1 ---------------------------------------------------------------------------------------

Outcome gradient_suite() {
    const auto t0 = std::chrono::steady_clock::now();
    const GradSuiteReport r = run_gradient_suite(20, 1e-4, 0);
    const double secs = seconds_since(t0);
    return {r.pass && secs < 60.0, fmt("%zu trials, worst rel err %.2e (tol 1e-4), %.1f s (limit 60 s)",
                                       r.trials.size(), r.worst, secs)};
}

// ---- 2 ---------------------------------------------------------------------------------------

Outcome scalar_oracles() {
    const auto t0 = std::chrono::steady_clock::now();
    Rng rng(202);
    double worst[5] = {0, 0, 0, 0, 0};
    for (int t = 0; t < 100; ++t) {
        const std::size_t m = 2 + rng.index(4);
        const double tau = kTaus[t % 3];
        const Batch b = random_batch(rng, m);
        const Matrix u = oracle::encode(b.rows, b.params);
        const Matrix z = oracle::project(u, b.params);
        Graph g;
        const Var zv = g.constant(z);
        for (std::size_t i = 0; i < 2 * m; ++i) {
            const std::size_t ip = partner_of(i);
            worst[0] = std::max(worst[0], rel(instance_disc_anchor(zv, i, ip, tau).scalar(), oracle::id_anchor(z, i, ip, tau)));
            worst[2] = std::max(worst[2], rel(weighted_instance_disc_anchor(zv, i, ip, tau).scalar(),
                                              oracle::wid_anchor(z, i, ip, tau)));
            const auto a = importance_weights(z, i, ip, tau);
            const auto ref = oracle::alpha(z, i, ip, tau);
            for (std::size_t k = 0; k < a.size(); ++k) worst[4] = std::max(worst[4], rel(a[k], ref[k]));
        }
        worst[1] = std::max(worst[1], rel(instance_disc_batch(zv, BatchLabels(b.y), tau).scalar(),
                                          oracle::id_batch(z, b.y, tau)));
        ModelVars mv = ModelVars::bind(g, b.params);
        worst[3] = std::max(worst[3], rel(pair_classification(mv, g.constant(u), BatchLabels(b.y)).scalar(),
                                          oracle::classification(u, b.y, b.params)));
    }
    const double secs = seconds_since(t0);
    const double w = *std::max_element(std::begin(worst), std::end(worst));
    return {w <= 1e-10 && secs < 30.0,
            fmt("100 batches; max diff ID-anchor %.1e, ID-batch %.1e, weighted %.1e, classification %.1e, alpha %.1e "
                "(tol 1e-10), %.2f s",
                worst[0], worst[1], worst[2], worst[3], worst[4], secs)};
}

// ---- 3 ---------------------------------------------------------------------------------------

Outcome closed_forms() {
    Graph g;
    // M = 2, all four embeddings identical: three equal candidates, one of them the partner
    const Matrix same(4, 3, 0.5);
    double id_err = 0.0;
    for (std::size_t i = 0; i < 4; ++i)
        id_err = std::max(id_err, std::abs(instance_disc_anchor(g.constant(same), i, partner_of(i), 0.5).scalar() - std::log(3.0)));
    // equal logits for both classes
    Batch b;
    b.params = ModelParams::init(5, 3, 1);
    b.params.cls_w.fill(0.0);
    b.params.cls_b.fill(0.25);
    b.rows = {{2}, {3}, {4}, {2, 3}};
    b.y = {1, -1};
    ModelVars mv = ModelVars::bind(g, b.params);
    const double cls_err = std::abs(pair_classification(mv, encode(mv, b.rows), BatchLabels(b.y)).scalar() - std::log(2.0));
    // two negatives with similarities 1 and 0 at tau = 1
    const Matrix z{{1, 0, 0}, {0, 0, 1}, {1, 0, 0}, {0, 1, 0}};
    const auto a = importance_weights(z, 0, 1, 1.0);
    const double e = std::exp(1.0);
    const double a_err = std::max(std::abs(a[0] - 2 * e / (e + 1)), std::abs(a[1] - 2 / (e + 1)));
    return {id_err <= 1e-10 && cls_err <= 1e-12 && a_err <= 1e-10,
            fmt("log 3 err %.1e (tol 1e-10), log 2 err %.1e (tol 1e-12), alpha {%.6f, %.6f} err %.1e (tol 1e-10)", id_err,
                cls_err, a[0], a[1], a_err)};
}

// ---- 4 ---------------------------------------------------------------------------------------

Outcome invariants() {
    Rng rng(404);
    constexpr int n = 200;
    double alpha_mean = 0, reduction = 0, swap = 0, perm = 0, min_loss = 1e300;
    for (int t = 0; t < n; ++t) {
        const std::size_t m = 2 + rng.index(4);
        const double tau = kTaus[t % 3];
        const Matrix z = random_z(rng, 2 * m);
        const auto y = random_labels(rng, m);
        Graph g;
        const Var zv = g.constant(z);

        const std::size_t i = rng.index(2 * m);
        const auto a = importance_weights(z, i, partner_of(i), tau);
        alpha_mean = std::max(alpha_mean, std::abs(std::accumulate(a.begin(), a.end(), 0.0) / static_cast<double>(a.size()) - 1.0));

        LossOptions unit;
        unit.tau = tau;
        unit.fixed_alpha = loss_detail::negative_mask(2 * m);
        const Matrix weighted = instance_rows(zv, unit).value();
        LossOptions hard;
        hard.tau = tau;
        const Matrix hard_rows = instance_rows(zv, hard).value();
        for (std::size_t r = 0; r < 2 * m; ++r) {
            const double plain = instance_disc_anchor(zv, r, partner_of(r), tau).scalar();
            reduction = std::max(reduction, std::abs(weighted(r, 0) - plain));
            min_loss = std::min({min_loss, plain, hard_rows(r, 0)});
        }

        Matrix swapped(z.rows(), z.cols());
        for (std::size_t r = 0; r < z.rows(); ++r)
            for (std::size_t c = 0; c < z.cols(); ++c) swapped(r, c) = z(partner_of(r), c);
        swap = std::max(swap, std::abs(instance_disc_batch(zv, BatchLabels(y), tau).scalar() -
                                       instance_disc_batch(g.constant(swapped), BatchLabels(y), tau).scalar()));

        const Batch b = random_batch(rng, m);
        std::vector<std::size_t> order(m);
        std::iota(order.begin(), order.end(), 0);
        rng.shuffle(std::span(order));
        Batch p = b;
        for (std::size_t j = 0; j < m; ++j) {
            p.rows[2 * j] = b.rows[2 * order[j]];
            p.rows[2 * j + 1] = b.rows[2 * order[j] + 1];
            p.y[j] = b.y[order[j]];
        }
        LossOptions o;
        o.tau = tau;
        o.hard_negatives = t % 2 == 0;
        perm = std::max(perm, std::abs(full_loss(b, o).total_value - full_loss(p, o).total_value));
    }
    const bool pass = alpha_mean <= 1e-12 && reduction <= 1e-10 && swap <= 1e-12 && min_loss >= 0.0 && perm <= 1e-12;
    return {pass, fmt("%d instances each; |mean alpha - 1| %.1e, unit-alpha reduction %.1e, swap %.1e, "
                      "min ID loss %.3g, permutation %.1e",
                      n, alpha_mean, reduction, swap, min_loss, perm)};
}

// ---- 5 ---------------------------------------------------------------------------------------

Outcome eval_oracles() {
    const auto t0 = std::chrono::steady_clock::now();
    // every (prediction, truth) pair of length <= 8 over <= 3 labels; truth taken up to renaming of its labels,
    // which leaves the accuracy unchanged, prediction fully enumerated
    std::size_t pairs = 0, hungarian_bad = 0;
    for (std::size_t n = 1; n <= 8; ++n) {
        std::size_t total = 1;
        for (std::size_t k = 0; k < n; ++k) total *= 3;
        std::vector<std::vector<std::size_t>> all(total, std::vector<std::size_t>(n));
        for (std::size_t code = 0; code < total; ++code)
            for (std::size_t k = 0, c = code; k < n; ++k, c /= 3) all[code][k] = c % 3;
        for (const auto& truth : all) {
            std::size_t next = 0;
            bool canonical = true;  // first occurrences of labels appear in order 0, 1, 2
            for (std::size_t v : truth) {
                if (v > next) canonical = false;
                if (v == next) ++next;
            }
            if (!canonical) continue;
            for (const auto& pred : all) {
                ++pairs;
                hungarian_bad += hungarian_accuracy(pred, truth) != oracle::brute_force_accuracy(pred, truth);
            }
        }
    }
    Rng rng(505);
    double spear = 0.0;
    for (int t = 0; t < 50; ++t) {
        const std::size_t n = 5 + rng.index(20);
        std::vector<double> x(n), y(n);
        for (auto& v : x) v = static_cast<double>(rng.index(4));
        for (auto& v : y) v = static_cast<double>(rng.index(3)) * 0.5;
        x[0] = 0, x[1] = 3, y[0] = 0, y[1] = 1;
        spear = std::max(spear, std::abs(spearman(x, y) - oracle::spearman(x, y)));
    }
    std::size_t km_bad = 0;
    for (std::uint64_t s = 0; s < 100; ++s) {
        Rng r(derive_seed(s, 5));
        Matrix x(60, 4);
        for (double& v : x.values()) v = r.uniform(-1, 1) + static_cast<double>(r.index(3));
        const KMeansResult km = kmeans(x, 2 + s % 5, s);
        for (std::size_t k = 1; k < km.inertia_history.size(); ++k)
            km_bad += km.inertia_history[k] > km.inertia_history[k - 1] * (1 + 1e-12);
    }
    const double secs = seconds_since(t0);
    return {hungarian_bad == 0 && spear <= 1e-12 && km_bad == 0,
            fmt("hungarian vs brute force: %zu mismatches in %zu pairs; spearman vs oracle max %.1e over 50 tied vectors "
                "(tol 1e-12); kmeans inertia increases: %zu over 100 runs; %.1f s",
                hungarian_bad, pairs, spear, km_bad, secs)};
}

// ---- 6-8: training experiments ------------------------------------------------------------------

constexpr std::size_t kSeeds = 5;
constexpr std::size_t kTopics = 8;
constexpr double kOverlapCorpus = 0.5;

struct Run {
    Objective objective = Objective::pairsupcon;
    double beta = 1.0;
    bool hard = true;
    double overlap = 0.0;
    std::uint64_t seed = 0;

    auto key() const { return std::tuple(static_cast<int>(objective), beta, hard, overlap, seed); }
    bool operator<(const Run& o) const { return key() < o.key(); }
};

std::map<Run, double>& run_cache() {
    static std::map<Run, double> cache;
    return cache;
}

// desk profile on the synthetic topic corpus; clustering accuracy of mean-pooled held-out texts
double clustering_after_training(const Run& r) {
    auto& cache = run_cache();
    if (auto it = cache.find(r); it != cache.end()) return it->second;
    SynthConfig sc;
    sc.classes = kTopics;
    sc.per_class = 500;
    sc.cross_rate = 0.5;
    sc.sibling_overlap = r.overlap;
    sc.seed = r.seed;
    const SynthCorpus corpus = synth_generate(sc);
    const Vocabulary vocab = build_vocabulary(corpus.pairs);
    TrainConfig cfg = TrainConfig::desk();
    cfg.seed = r.seed;
    cfg.objective = r.objective;
    cfg.beta = r.beta;
    cfg.hard_negatives = r.hard;
    const TrainResult res = train(cfg, corpus.pairs, vocab, initial_params(cfg, vocab));
    const LabeledCorpus lc = corpus.labeled_corpus();
    const double acc = clustering_eval(embed_texts(lc.texts, vocab, res.params), lc.labels, kTopics, kClusterRuns, 7).mean;
    std::cout << fmt("    run %-14s beta=%-3g hard=%d overlap=%.2f seed=%llu  acc=%.4f\n", objective_name(r.objective),
                     r.beta, r.hard ? 1 : 0, r.overlap, static_cast<unsigned long long>(r.seed), acc)
              << std::flush;
    return cache[r] = acc;
}

double mean_over_seeds(Run r) {
    double s = 0.0;
    for (std::uint64_t seed = 0; seed < kSeeds; ++seed) {
        r.seed = seed;
        s += clustering_after_training(r);
    }
    return s / kSeeds;
}

Outcome objective_direction() {
    const auto t0 = std::chrono::steady_clock::now();
    const double cls = mean_over_seeds({Objective::classification, 0.0});
    const double inst = mean_over_seeds({Objective::instance});
    const double joint = mean_over_seeds({Objective::pairsupcon, 1.0});
    const double secs = seconds_since(t0);
    return {inst >= cls + 0.05 && joint >= cls + 0.05 && secs <= 600.0,
            fmt("mean clustering acc: classification %.2f, instance %.2f, pairsupcon(beta=1) %.2f points; "
                "need both >= classification + 5; %.0f s (limit 600 s)",
                100 * cls, 100 * inst, 100 * joint, secs)};
}

Outcome weighting_direction() {
    std::size_t strict = 0;
    double w = 0.0, u = 0.0;
    for (std::uint64_t seed = 0; seed < kSeeds; ++seed) {
        const double a = clustering_after_training({Objective::pairsupcon, 1.0, true, kOverlapCorpus, seed});
        const double b = clustering_after_training({Objective::pairsupcon, 1.0, false, kOverlapCorpus, seed});
        strict += a > b;
        w += a / kSeeds;
        u += b / kSeeds;
    }
    return {w >= u - 0.005,
            fmt("overlap %.2f corpus: weighted %.2f vs uniform %.2f points (tie band 0.5); strict wins %zu/5 "
                "(expected >= 3%s)",
                kOverlapCorpus, 100 * w, 100 * u, strict, strict >= 3 ? "" : ", NOT met")};
}

Outcome beta_direction() {
    const double betas[] = {0.5, 1.0, 4.0};
    double acc[3];
    for (int k = 0; k < 3; ++k) acc[k] = mean_over_seeds({Objective::pairsupcon, betas[k]});
    const bool pass = acc[1] >= acc[0] - 0.01 && acc[2] >= acc[1] - 0.01;
    return {pass, fmt("mean clustering acc beta 0.5/1/4: %.2f / %.2f / %.2f points (non-decreasing within 1)",
                      100 * acc[0], 100 * acc[1], 100 * acc[2])};
}

// ---- 9 ---------------------------------------------------------------------------------------

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), {}};
}

int invoke(const std::vector<std::string>& args, std::string* out) {
    std::vector<const char*> argv = {"pairsupcon"};
    for (const auto& a : args) argv.push_back(a.c_str());
    std::ostringstream o, e;
    const int code = cli::run(static_cast<int>(argv.size()), argv.data(), o, e);
    if (out) *out = o.str();
    return code;
}

Outcome reproducibility() {
    const fs::path root = fs::temp_directory_path() / "pairsupcon_acceptance";
    fs::remove_all(root);
    const std::string data = (root / "data").string();
    if (invoke({"synth", "--out", data, "--classes", "4", "--per-class", "100", "--eval-per-class", "30",
                "--scored-pairs", "60", "--seed", "9"}, nullptr) != 0)
        return {false, "synth failed"};
    std::vector<std::string> stdout_runs[2];
    for (int rep = 0; rep < 2; ++rep) {
        const fs::path d = root / ("rep" + std::to_string(rep));
        const std::string ck = (d / "model" / "checkpoint.bin").string();
        const std::vector<std::vector<std::string>> commands = {
            {"train", "--data", data + "/nli.jsonl", "--out", (d / "model").string(), "--epochs", "3", "--batch", "16",
             "--dim", "16", "--seed", "5"},
            {"eval-cluster", "--checkpoint", ck, "--data", data + "/labeled.jsonl", "--out", (d / "cluster.json").string(), "--seed", "2"},
            {"eval-sts", "--checkpoint", ck, "--data", data + "/sts.tsv", "--out", (d / "sts.json").string()},
            {"eval-fewshot", "--checkpoint", ck, "--data", data + "/labeled.jsonl", "--out", (d / "fewshot.json").string(), "--seed", "2"},
        };
        for (const auto& c : commands) {
            std::string out;
            if (invoke(c, &out) != 0) return {false, c.front() + " failed"};
            stdout_runs[rep].push_back(out);
        }
    }
    const char* files[] = {"model/checkpoint.bin", "model/trace.csv", "model/vocab.txt", "cluster.json", "sts.json", "fewshot.json"};
    std::size_t same = 0;
    std::string diff_names;
    for (const char* f : files) {
        const bool eq = slurp(root / "rep0" / f) == slurp(root / "rep1" / f) && !slurp(root / "rep0" / f).empty();
        same += eq;
        if (!eq) diff_names += std::string(" ") + f;
    }
    const bool stdout_same = stdout_runs[0] == stdout_runs[1];
    fs::remove_all(root);
    return {same == std::size(files) && stdout_same,
            fmt("%zu/%zu output files byte-identical across repeats, stdout %s%s%s", same, std::size(files),
                stdout_same ? "identical" : "DIFFERS", diff_names.empty() ? "" : "; differing:", diff_names.c_str())};
}

} // namespace

int main() {
    const std::pair<const char*, std::function<Outcome()>> criteria[] = {
        {"gradient suite", gradient_suite},
        {"scalar-oracle equivalence", scalar_oracles},
        {"closed-form spot values", closed_forms},
        {"invariant suite", invariants},
        {"evaluation oracles", eval_oracles},
        {"classification vs instance discrimination", objective_direction},
        {"importance-weighted negatives", weighting_direction},
        {"beta direction", beta_direction},
        {"reproducibility", reproducibility},
    };
    std::vector<std::string> lines;
    bool all = true;
    int k = 0;
    for (const auto& [name, fn] : criteria) {
        ++k;
        Outcome o;
        try {
            o = fn();
        } catch (const std::exception& e) {
            o = {false, std::string("threw: ") + e.what()};
        }
        all = all && o.pass;
        lines.push_back(fmt("%s %d %s: %s", o.pass ? "PASS" : "FAIL", k, name, o.detail.c_str()));
        std::cout << lines.back() << "\n" << std::flush;
    }
    std::cout << "\nsummary\n";
    for (const auto& l : lines) std::cout << l << "\n";
    return all ? 0 : 1;
}
