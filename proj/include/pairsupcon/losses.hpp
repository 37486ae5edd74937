#pragma once

// PairSupCon objective.
//
// A batch of M pairs is laid out as 2M rows: row 2j is the premise of pair j, row 2j+1 its
// hypothesis, so the partner of row i is i ^ 1. Entailment pairs (y = +1) are positives for
// instance discrimination in both directions; every other row of the batch, including rows of
// contradiction pairs, is a negative. Every pair contributes to the classification term.

#include <cmath>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "pairsupcon/diff.hpp"
#include "pairsupcon/encoder.hpp"
#include "pairsupcon/error.hpp"

namespace pairsupcon {

inline constexpr std::size_t partner_of(std::size_t row) noexcept { return row ^ 1U; }

struct BatchLabels {
    std::vector<int> y;  // +1 entailment, -1 contradiction, one per pair

    BatchLabels() = default;
    explicit BatchLabels(std::vector<int> labels) : y(std::move(labels)) {
        for (std::size_t j = 0; j < y.size(); ++j)
            detail::require(y[j] == 1 || y[j] == -1,
                            "BatchLabels: label " + std::to_string(y[j]) + " of pair " + std::to_string(j) +
                                " is not +1/-1");
    }

    std::size_t pairs() const noexcept { return y.size(); }
    std::size_t positives() const noexcept {
        std::size_t n = 0;
        for (int v : y) n += v == 1;
        return n;
    }
    // class index for the pair classifier: 1 = entailment, 0 = contradiction
    std::vector<std::size_t> class_targets() const {
        std::vector<std::size_t> t;
        for (int v : y) t.push_back(v == 1 ? 1 : 0);
        return t;
    }
};

namespace loss_detail {

inline void check_tau(double tau) { detail::require(tau > 0.0, "temperature must be > 0, got " + std::to_string(tau)); }

inline std::size_t batch_pairs(const diff::Var& z) {
    detail::require(z.rows() >= 2 && z.rows() % 2 == 0,
                    "instance discrimination needs 2M rows with M >= 1, got " + std::to_string(z.rows()));
    return z.rows() / 2;
}

inline void check_anchor(std::size_t rows, std::size_t i, std::size_t ip) {
    detail::require(i < rows && ip < rows, "anchor index out of range");
    detail::require(i != ip, "anchor and partner must differ");
}

// all entries except the diagonal
inline Matrix off_diagonal_mask(std::size_t n) {
    Matrix m(n, n, 1.0);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = 0.0;
    return m;
}

// entries (i, j) with j != i and j != partner(i)
inline Matrix negative_mask(std::size_t n) {
    Matrix m = off_diagonal_mask(n);
    for (std::size_t i = 0; i < n; ++i) m(i, partner_of(i)) = 0.0;
    return m;
}

inline Matrix partner_mask(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, partner_of(i)) = 1.0;
    return m;
}

inline std::vector<std::size_t> partners(std::size_t n) {
    std::vector<std::size_t> p(n);
    for (std::size_t i = 0; i < n; ++i) p[i] = partner_of(i);
    return p;
}

// per-row -log softmax over j != i of logits, evaluated at the partner column -> n x 1
inline diff::Var per_row_partner_loss(const diff::Var& logits) {
    const std::size_t n = logits.rows();
    const auto p = partners(n);
    return diff::sub(diff::logsumexp_rows(logits, off_diagonal_mask(n)), diff::pick(logits, p));
}

// weights 1/P_M on both rows of every positive pair
inline Matrix positive_row_weights(const BatchLabels& labels) {
    const std::size_t pm = labels.positives();
    Matrix w(1, 2 * labels.pairs());
    for (std::size_t j = 0; j < labels.pairs(); ++j)
        if (labels.y[j] == 1) {
            w(0, 2 * j) = 1.0 / static_cast<double>(pm);
            w(0, 2 * j + 1) = 1.0 / static_cast<double>(pm);
        }
    return w;
}

// alpha as a 2M x 2M matrix: entry (i, j) for negatives j of anchor i, zero elsewhere.
// (2M - 2) * softmax over the anchor's negatives of s / tau.
inline diff::Var importance_weight_matrix(const diff::Var& logits) {
    const std::size_t n = logits.rows();
    detail::require(n >= 4, "importance weights need M >= 2 (at least one negative)");
    diff::Graph& g = logits.graph();
    const Matrix neg = negative_mask(n);
    diff::Var lse = diff::logsumexp_rows(logits, neg);
    diff::Var mask = g.constant(neg);
    diff::Var shifted = diff::mul(diff::sub(logits, lse), mask);
    return diff::scale(diff::mul(diff::exp(shifted), mask), static_cast<double>(n - 2));
}

} // namespace loss_detail

// l_ID for anchor row i with positive partner row ip: a (2M-1)-way softmax over all other rows.
inline diff::Var instance_disc_anchor(const diff::Var& z, std::size_t i, std::size_t ip, double tau) {
    loss_detail::check_tau(tau);
    loss_detail::batch_pairs(z);
    loss_detail::check_anchor(z.rows(), i, ip);
    diff::Var logits = diff::scale(diff::cosine_similarity_matrix(z), 1.0 / tau);
    const std::size_t rows[] = {i};
    const std::size_t cols[] = {ip};
    diff::Var row = diff::gather_rows(logits, rows);
    Matrix mask(1, z.rows(), 1.0);
    mask(0, i) = 0.0;
    return diff::sub(diff::logsumexp_rows(row, mask), diff::pick(row, cols));
}

// L_ID: (1/P_M) * sum over positive pairs of l^i + l^i'.
inline diff::Var instance_disc_batch(const diff::Var& z, const BatchLabels& labels, double tau) {
    loss_detail::check_tau(tau);
    const std::size_t m = loss_detail::batch_pairs(z);
    detail::require(labels.pairs() == m, "instance_disc_batch: " + std::to_string(labels.pairs()) +
                                             " labels for " + std::to_string(m) + " pairs");
    detail::require(labels.positives() >= 1, "instance_disc_batch: no positive pairs in batch");
    diff::Var logits = diff::scale(diff::cosine_similarity_matrix(z), 1.0 / tau);
    diff::Var per_row = loss_detail::per_row_partner_loss(logits);
    return diff::matmul(z.graph().constant(loss_detail::positive_row_weights(labels)), per_row);
}

// alpha_j for every negative j of anchor i (ascending j, skipping i and ip); length 2M - 2.
inline std::vector<double> importance_weights(const Matrix& z, std::size_t i, std::size_t ip, double tau) {
    loss_detail::check_tau(tau);
    diff::Graph g;
    diff::Var zv = g.constant(z);
    const std::size_t m = loss_detail::batch_pairs(zv);
    detail::require(m >= 2, "importance_weights: need M >= 2 (at least one negative)");
    loss_detail::check_anchor(z.rows(), i, ip);
    const Matrix s = diff::cosine_similarity_matrix(zv).value();
    double hi = -INFINITY;
    for (std::size_t j = 0; j < z.rows(); ++j)
        if (j != i && j != ip) hi = std::max(hi, s(i, j) / tau);
    double denom = 0.0;
    for (std::size_t j = 0; j < z.rows(); ++j)
        if (j != i && j != ip) denom += std::exp(s(i, j) / tau - hi);
    const double n_neg = static_cast<double>(z.rows() - 2);
    std::vector<double> alpha;
    for (std::size_t j = 0; j < z.rows(); ++j)
        if (j != i && j != ip) alpha.push_back(n_neg * std::exp(s(i, j) / tau - hi) / denom);
    return alpha;
}

// l_wID = log(1 + sum_j exp[(alpha_j s_ij - s_ii') / tau]) for anchor i within the batch.
// alpha is gradient-stopped unless alpha_grad is set.
inline diff::Var weighted_instance_disc_anchor(const diff::Var& z, std::size_t i, std::size_t ip, double tau,
                                               bool alpha_grad = false) {
    loss_detail::check_tau(tau);
    const std::size_t m = loss_detail::batch_pairs(z);
    detail::require(m >= 2, "weighted_instance_disc_anchor: need M >= 2 (at least one negative)");
    loss_detail::check_anchor(z.rows(), i, ip);
    detail::require(ip == partner_of(i), "weighted_instance_disc_anchor: partner must be row i ^ 1 in batch layout");
    diff::Graph& g = z.graph();
    diff::Var logits = diff::scale(diff::cosine_similarity_matrix(z), 1.0 / tau);
    diff::Var alpha = loss_detail::importance_weight_matrix(logits);
    if (!alpha_grad) alpha = diff::stop_gradient(alpha);
    diff::Var weighted =
        diff::mul(diff::add(alpha, g.constant(loss_detail::partner_mask(z.rows()))), logits);
    const std::size_t rows[] = {i};
    const std::size_t cols[] = {ip};
    diff::Var row = diff::gather_rows(weighted, rows);
    Matrix mask(1, z.rows(), 1.0);
    mask(0, i) = 0.0;
    return diff::sub(diff::logsumexp_rows(row, mask), diff::pick(row, cols));
}

// Mean over all M pairs of the cross-entropy of f(u, u', |u - u'|).
inline diff::Var pair_classification(const ModelVars& model, const diff::Var& u, const BatchLabels& labels) {
    detail::require(labels.pairs() >= 1, "pair_classification: empty batch");
    detail::require(u.rows() == 2 * labels.pairs(), "pair_classification: " + std::to_string(u.rows()) +
                                                        " rows for " + std::to_string(labels.pairs()) + " pairs");
    const auto targets = labels.class_targets();
    return diff::softmax_cross_entropy(classify_batch_pairs(model, u), targets);
}

struct LossOptions {
    double tau = 1.0;
    double beta = 1.0;
    bool hard_negatives = true;         // importance-weighted l_wID; false = uniform l_ID
    bool alpha_grad = false;            // let gradients flow through alpha
    bool include_classification = true; // false = instance discrimination only
    // When set (2M x 2M, layout of importance_weight_matrix), replaces the computed alpha.
    std::optional<Matrix> fixed_alpha;
};

struct LossBreakdown {
    diff::Var total;
    double total_value = 0.0;
    double classification = 0.0;
    double instance = 0.0;
    std::vector<double> per_anchor;  // weighted per-row instance losses (0 for non-positive rows)
    double tau = 0.0;
    double beta = 0.0;
    bool no_positive_pairs = false;  // instance term forced to 0 although beta > 0
};

// M x M importance weights in the 2M x 2M layout, computed on values only.
inline Matrix importance_weight_matrix(const Matrix& z, double tau) {
    loss_detail::check_tau(tau);
    diff::Graph g;
    diff::Var logits = diff::scale(diff::cosine_similarity_matrix(g.constant(z)), 1.0 / tau);
    return loss_detail::importance_weight_matrix(logits).value();
}

// Per-row instance losses of the whole batch (uniform or importance-weighted) -> 2M x 1.
inline diff::Var instance_rows(const diff::Var& z, const LossOptions& opt) {
    diff::Graph& g = z.graph();
    const std::size_t n = z.rows();
    diff::Var logits = diff::scale(diff::cosine_similarity_matrix(z), 1.0 / opt.tau);
    if (!opt.hard_negatives || n < 4) return loss_detail::per_row_partner_loss(logits);
    diff::Var alpha;
    if (opt.fixed_alpha) {
        detail::require(opt.fixed_alpha->rows() == n && opt.fixed_alpha->cols() == n,
                        "fixed_alpha: expected " + std::to_string(n) + "x" + std::to_string(n));
        alpha = g.constant(*opt.fixed_alpha);
    } else {
        alpha = loss_detail::importance_weight_matrix(logits);
        if (!opt.alpha_grad) alpha = diff::stop_gradient(alpha);
    }
    diff::Var weighted = diff::mul(diff::add(alpha, g.constant(loss_detail::partner_mask(n))), logits);
    return loss_detail::per_row_partner_loss(weighted);
}

// total = classification + beta * (1/P_M) sum_{y=+1} (l_wID^i + l_wID^i').
// beta == 0 skips the instance term entirely.
inline LossBreakdown pairsupcon_batch(const ModelVars& model, const diff::Var& u, const diff::Var& z,
                                      const BatchLabels& labels, const LossOptions& opt) {
    loss_detail::check_tau(opt.tau);
    detail::require(opt.beta >= 0.0, "beta must be >= 0, got " + std::to_string(opt.beta));
    detail::require(labels.pairs() >= 1, "pairsupcon_batch: empty batch");
    detail::require(z.rows() == 2 * labels.pairs() && u.rows() == z.rows(),
                    "pairsupcon_batch: batch rows do not match " + std::to_string(labels.pairs()) + " pairs");
    diff::Graph& g = z.graph();
    LossBreakdown out;
    out.tau = opt.tau;
    out.beta = opt.beta;
    out.per_anchor.assign(z.rows(), 0.0);

    std::optional<diff::Var> cls;
    if (opt.include_classification) {
        cls = pair_classification(model, u, labels);
        out.classification = cls->scalar();
    }

    std::optional<diff::Var> inst;
    if (opt.beta > 0.0) {
        if (labels.positives() == 0) {
            out.no_positive_pairs = true;
        } else {
            diff::Var rows = instance_rows(z, opt);
            const Matrix w = loss_detail::positive_row_weights(labels);
            for (std::size_t i = 0; i < z.rows(); ++i)
                if (w(0, i) > 0.0) out.per_anchor[i] = rows.value()(i, 0);
            inst = diff::matmul(g.constant(w), rows);
            out.instance = inst->scalar();
        }
    }

    if (cls && inst)
        out.total = diff::add(*cls, diff::scale(*inst, opt.beta));
    else if (cls)
        out.total = *cls;
    else if (inst)
        out.total = diff::scale(*inst, opt.beta);
    else
        out.total = g.constant(Matrix(1, 1));
    out.total_value = out.total.scalar();
    return out;
}

} // namespace pairsupcon
