#pragma once

// Finite-difference check of the full training objective (classification + beta * instance term)
// against the analytic gradient, for every parameter matrix, over small random configurations.

#include <algorithm>
#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "pairsupcon/diff.hpp"
#include "pairsupcon/encoder.hpp"
#include "pairsupcon/losses.hpp"
#include "pairsupcon/random.hpp"

namespace pairsupcon {

struct GradTrial {
    std::size_t pairs = 2;
    std::size_t dim = 2;
    std::size_t vocab = 8;
    double tau = 0.5;
    double beta = 1.0;
    bool hard_negatives = true;
    bool alpha_grad = false;
    ModelParams params;
    std::vector<TokenIds> rows;
    BatchLabels labels;

    // With alpha stopped, the differentiated function treats alpha as a constant of the point.
    LossOptions loss_options() const {
        LossOptions o;
        o.tau = tau;
        o.beta = beta;
        o.hard_negatives = hard_negatives;
        o.alpha_grad = alpha_grad;
        if (hard_negatives && !alpha_grad) o.fixed_alpha = importance_weight_matrix(project(encode(rows, params), params), tau);
        return o;
    }
};

struct GradTrialResult {
    GradTrial trial;
    std::vector<std::pair<std::string, double>> rel_err;  // per parameter matrix
    double worst = 0.0;
    bool pass = false;
};

struct GradSuiteReport {
    std::vector<GradTrialResult> trials;
    double worst = 0.0;
    double tolerance = 0.0;
    bool pass = true;
};

inline constexpr double kGradAbsFloor = 1e-4;
inline constexpr std::array<double, 3> kGradTaus = {0.05, 0.5, 1.0};

inline GradTrial random_grad_trial(std::uint64_t seed) {
    Rng rng(seed);
    GradTrial t;
    t.pairs = 2 + rng.index(3);  // M in [2, 4]
    t.dim = 2 + rng.index(7);    // d in [2, 8]
    t.vocab = 4 + rng.index(6);
    t.tau = kGradTaus[rng.index(kGradTaus.size())];
    t.beta = std::array<double, 3>{0.5, 1.0, 2.0}[rng.index(3)];
    t.hard_negatives = rng.bernoulli(0.75);
    t.alpha_grad = rng.bernoulli(0.5);
    t.params = ModelParams::init(t.vocab, t.dim, rng.next());
    // Larger-than-init embeddings keep the projections away from degenerate near-zero rows.
    for (double& v : t.params.embedding.values()) v *= 2.0;
    std::vector<int> y(t.pairs);
    for (int& v : y) v = rng.bernoulli(0.5) ? 1 : -1;
    y[rng.index(t.pairs)] = 1;  // at least one positive pair
    t.labels = BatchLabels(y);
    for (std::size_t r = 0; r < 2 * t.pairs; ++r) {
        TokenIds s(1 + rng.index(4));
        for (auto& id : s) id = 1 + rng.index(t.vocab - 1);  // unk allowed, pad never
        t.rows.push_back(std::move(s));
    }
    return t;
}

// Total loss as a function of one parameter matrix; all others are graph constants.
inline diff::ScalarBuilder total_loss_of(const GradTrial& t, const std::string& name) {
    const LossOptions opt = t.loss_options();
    return [&t, name, opt](diff::Graph& g, const diff::Var& x) {
        ModelVars v = ModelVars::bind(g, t.params, false);
        if (name == "embedding") v.embedding = x;
        else if (name == "proj_w1") v.proj_w1 = x;
        else if (name == "proj_b1") v.proj_b1 = x;
        else if (name == "proj_w2") v.proj_w2 = x;
        else if (name == "proj_b2") v.proj_b2 = x;
        else if (name == "cls_w") v.cls_w = x;
        else if (name == "cls_b") v.cls_b = x;
        else detail::fail("unknown parameter " + name);
        diff::Var u = encode(v, t.rows);
        return pairsupcon_batch(v, u, project(v, u), t.labels, opt).total;
    };
}

inline GradTrialResult check_grad_trial(const GradTrial& t, double tolerance) {
    GradTrialResult r;
    r.trial = t;
    t.params.for_each([&](const char* name, const Matrix& m) {
        // Central differences at eps=1e-5 carry ~1e-9 roundoff and, at tau=0.05, up to ~1e-6
        // truncation error; coordinates below 1e-4 in magnitude are therefore judged on absolute error.
        const diff::GradCheckReport rep = diff::grad_check(total_loss_of(t, name), m, 1e-5, kGradAbsFloor);
        r.rel_err.emplace_back(name, rep.max_rel_err);
        r.worst = std::max(r.worst, rep.max_rel_err);
    });
    r.pass = r.worst <= tolerance;
    return r;
}

inline GradSuiteReport run_gradient_suite(std::size_t trials = 20, double tolerance = 1e-4, std::uint64_t seed = 0) {
    detail::require(trials >= 1, "gradcheck: trials must be >= 1");
    detail::require(tolerance > 0.0, "gradcheck: tolerance must be > 0");
    GradSuiteReport rep;
    rep.tolerance = tolerance;
    for (std::size_t k = 0; k < trials; ++k) {
        rep.trials.push_back(check_grad_trial(random_grad_trial(derive_seed(seed, k)), tolerance));
        rep.worst = std::max(rep.worst, rep.trials.back().worst);
        rep.pass = rep.pass && rep.trials.back().pass;
    }
    return rep;
}

} // namespace pairsupcon
