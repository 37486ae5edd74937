#include <gtest/gtest.h>

#include <cmath>
#include <functional>

#include "pairsupcon/diff.hpp"
#include "pairsupcon/random.hpp"
#include "oracles.hpp"

using namespace pairsupcon;
using diff::Graph;
using diff::Var;

namespace {

Matrix random_matrix(Rng& rng, std::size_t r, std::size_t c, double lo = -1.0, double hi = 1.0) {
    Matrix m(r, c);
    for (double& v : m.values()) v = rng.uniform(lo, hi);
    return m;
}

// keeps entries at least `gap` away from zero (kinks of abs / relu)
Matrix away_from_zero(Rng& rng, std::size_t r, std::size_t c, double gap = 0.05) {
    Matrix m(r, c);
    for (double& v : m.values()) {
        const double mag = rng.uniform(gap, 1.0);
        v = rng.bernoulli(0.5) ? mag : -mag;
    }
    return m;
}

// scalar readout <W, f(x)> with a fixed random W, so every output entry matters
Var readout(Graph& g, const Var& y, std::uint64_t seed) {
    Rng rng(seed);
    return diff::sum(diff::mul(y, g.constant(random_matrix(rng, y.rows(), y.cols()))));
}

} // namespace

TEST(Primitives, AddExample) {
    Graph g;
    Var s = diff::add(g.constant({{1, 2}}), g.constant({{3, 4}}));
    EXPECT_EQ(s.value(), (Matrix{{4, 6}}));
}

TEST(Primitives, NormalizeRowsExample) {
    Graph g;
    Var n = diff::normalize_rows(g.constant({{3, 4}}));
    EXPECT_NEAR(n.value()(0, 0), 0.6, 1e-15);
    EXPECT_NEAR(n.value()(0, 1), 0.8, 1e-15);
}

TEST(Primitives, MatmulMatchesTripleLoop) {
    Rng rng(11);
    const Matrix a = random_matrix(rng, 2, 3), b = random_matrix(rng, 3, 2);
    Graph g;
    const Matrix c = diff::matmul(g.constant(a), g.constant(b)).value();
    for (std::size_t i = 0; i < 2; ++i)
        for (std::size_t j = 0; j < 2; ++j) {
            double s = 0.0;
            for (std::size_t k = 0; k < 3; ++k) s += a(i, k) * b(k, j);
            EXPECT_NEAR(c(i, j), s, 1e-12);
        }
}

TEST(Primitives, ApplyPrimitiveDispatches) {
    Graph g;
    Var a = g.constant({{1, 2}}), b = g.constant({{3, 4}});
    const Var ab[] = {a, b};
    EXPECT_EQ(diff::apply_primitive(g, diff::Primitive::add, ab).value(), (Matrix{{4, 6}}));
    const Var one[] = {a};
    const double k[] = {3.0};
    EXPECT_EQ(diff::apply_primitive(g, diff::Primitive::scale, one, k).value(), (Matrix{{3, 6}}));
    EXPECT_THROW(diff::apply_primitive(g, diff::Primitive::exp, ab), ValidationError);
}

TEST(Primitives, ShapeMismatchReportsBothShapes) {
    Graph g;
    try {
        diff::add(g.constant(Matrix(2, 3)), g.constant(Matrix(3, 2)));
        FAIL() << "expected rejection";
    } catch (const ValidationError& e) {
        const std::string msg = e.what();
        EXPECT_NE(msg.find("2x3"), std::string::npos) << msg;
        EXPECT_NE(msg.find("3x2"), std::string::npos) << msg;
    }
    EXPECT_THROW(diff::matmul(g.constant(Matrix(2, 3)), g.constant(Matrix(2, 3))), ValidationError);
}

TEST(Primitives, LogRejectsNonPositive) {
    Graph g;
    EXPECT_THROW(diff::log(g.constant({{1.0, 0.0}})), ValidationError);
    EXPECT_THROW(diff::log(g.constant({{-2.0}})), ValidationError);
}

TEST(Cosine, IdenticalRowsGiveOnes) {
    Graph g;
    const Matrix s = diff::cosine_similarity_matrix(g.constant({{1, 2, 3}, {1, 2, 3}, {1, 2, 3}})).value();
    for (double v : s.values()) EXPECT_NEAR(v, 1.0, 1e-15);
}

TEST(Cosine, OrthogonalRows) {
    Graph g;
    const Matrix s = diff::cosine_similarity_matrix(g.constant({{1, 0}, {0, 1}})).value();
    EXPECT_EQ(s(0, 1), 0.0);
    EXPECT_EQ(s(1, 0), 0.0);
}

TEST(Cosine, MatchesScalarOracle) {
    Rng rng(5);
    const Matrix z = random_matrix(rng, 3, 4);
    Graph g;
    const Matrix s = diff::cosine_similarity_matrix(g.constant(z)).value();
    for (std::size_t i = 0; i < 3; ++i)
        for (std::size_t j = 0; j < 3; ++j) EXPECT_NEAR(s(i, j), oracle::cos_sim(z, i, j), 1e-12);
}

TEST(Cosine, ZeroRowNamed) {
    Graph g;
    try {
        diff::cosine_similarity_matrix(g.constant({{1, 1}, {0, 0}}));
        FAIL();
    } catch (const ValidationError& e) {
        EXPECT_NE(std::string(e.what()).find("row 1"), std::string::npos) << e.what();
    }
}

TEST(Cosine, BoundedAndExactlySymmetric) {
    Rng rng(8);
    for (int t = 0; t < 100; ++t) {
        Graph g;
        const Matrix s = diff::cosine_similarity_matrix(g.constant(random_matrix(rng, 6, 5))).value();
        for (std::size_t i = 0; i < 6; ++i)
            for (std::size_t j = 0; j < 6; ++j) {
                EXPECT_EQ(s(i, j), s(j, i));
                EXPECT_LE(std::abs(s(i, j)), 1.0 + 1e-12);
            }
    }
}

TEST(SoftmaxCE, UniformLogitsGiveLog2) {
    Graph g;
    const std::size_t t[] = {0};
    EXPECT_NEAR(diff::softmax_cross_entropy(g.constant({{0, 0}}), t).scalar(), std::log(2.0), 1e-15);
}

TEST(SoftmaxCE, SaturatedLogitsStayFinite) {
    Graph g;
    const std::size_t t[] = {0};
    const double v = diff::softmax_cross_entropy(g.constant({{1000, -1000}}), t).scalar();
    EXPECT_TRUE(std::isfinite(v));
    EXPECT_NEAR(v, 0.0, 1e-12);
}

TEST(SoftmaxCE, MatchesScalarOracle) {
    Rng rng(9);
    const Matrix l = random_matrix(rng, 4, 2, -3, 3);
    const std::size_t t[] = {0, 1, 1, 0};
    Graph g;
    double expect = 0.0;
    for (std::size_t r = 0; r < 4; ++r) expect += oracle::cross_entropy({l(r, 0), l(r, 1)}, t[r]) / 4.0;
    EXPECT_NEAR(diff::softmax_cross_entropy(g.constant(l), t).scalar(), expect, 1e-12);
}

TEST(SoftmaxCE, NonNegativeAndLogCForEqualLogits) {
    Rng rng(10);
    for (std::size_t c = 2; c <= 6; ++c) {
        Graph g;
        std::vector<std::size_t> t(3, c - 1);
        Matrix same(3, c, 0.37);
        EXPECT_NEAR(diff::softmax_cross_entropy(g.constant(same), t).scalar(), std::log(static_cast<double>(c)), 1e-14);
        EXPECT_GE(diff::softmax_cross_entropy(g.constant(random_matrix(rng, 3, c, -5, 5)), t).scalar(), 0.0);
    }
}

TEST(SoftmaxCE, TargetOutOfRange) {
    Graph g;
    const std::size_t t[] = {2};
    EXPECT_THROW(diff::softmax_cross_entropy(g.constant({{0, 0}}), t), ValidationError);
}

TEST(Backward, SumGivesOnes) {
    Graph g;
    Var x = g.leaf({{1, -2, 3}});
    g.backward(diff::sum(x));
    EXPECT_EQ(x.grad(), (Matrix{{1, 1, 1}}));
}

TEST(Backward, SquareAtThree) {
    Graph g;
    Var x = g.leaf({{3}});
    g.backward(diff::sum(diff::mul(x, x)));
    EXPECT_EQ(x.grad()(0, 0), 6.0);
}

TEST(Backward, NonScalarLossRejected) {
    Graph g;
    Var x = g.leaf(Matrix(2, 2, 1.0));
    EXPECT_THROW(g.backward(x), ValidationError);
}

TEST(Backward, StopGradientBlocks) {
    Rng rng(3);
    for (int t = 0; t < 20; ++t) {
        Graph g;
        Var x = g.leaf(random_matrix(rng, 2, 3));
        g.backward(diff::sum(diff::exp(diff::stop_gradient(x))));
        for (double v : x.grad().values()) EXPECT_EQ(v, 0.0);
    }
}

TEST(Backward, NodesAreTopologicallyOrdered) {
    Graph g;
    Var x = g.leaf({{1, 2}});
    Var y = diff::sum(diff::exp(diff::scale(x, 2.0)));
    for (diff::NodeId id = 0; id <= y.id(); ++id)
        for (diff::NodeId p : g.parents(id)) EXPECT_LT(p, id);
}

TEST(Backward, NormalizeCosineLogPipelineMatchesFiniteDifferences) {
    Rng rng(21);
    const Matrix z = random_matrix(rng, 4, 3);
    auto fn = [](Graph& g, const Var& x) {
        Var s = diff::cosine_similarity_matrix(x);
        return diff::sum(diff::log(diff::add(s, g.constant(Matrix(1, 1, 2.0)))));
    };
    EXPECT_LT(diff::grad_check(fn, z).max_rel_err, 1e-5);
}

TEST(GradCheck, SumIsExact) {
    Rng rng(1);
    auto fn = [](Graph&, const Var& x) { return diff::sum(x); };
    EXPECT_LT(diff::grad_check(fn, random_matrix(rng, 3, 3)).max_abs_err, 1e-9);
}

TEST(GradCheck, InstanceLossOnRandomZ) {
    Rng rng(2);
    auto fn = [](Graph&, const Var& z) {
        Var logits = diff::scale(diff::cosine_similarity_matrix(z), 1.0 / 0.5);
        Matrix mask(4, 4, 1.0);
        for (std::size_t i = 0; i < 4; ++i) mask(i, i) = 0.0;
        const std::size_t partners[] = {1, 0, 3, 2};
        return diff::mean(diff::sub(diff::logsumexp_rows(logits, mask), diff::pick(logits, partners)));
    };
    EXPECT_LT(diff::grad_check(fn, random_matrix(rng, 4, 8)).max_rel_err, 1e-4);
}

TEST(GradCheck, DetectsCorruptedBackwardRule) {
    Rng rng(4);
    // square with a backward that forgets the factor 2
    auto fn = [](Graph& g, const Var& x) {
        Matrix v = x.value();
        for (double& e : v.values()) e *= e;
        const Var in[] = {x};
        Var sq = g.custom(in, v, [](const diff::BackwardContext& c) {
            if (!c.input_grads[0]) return;
            for (std::size_t i = 0; i < c.value.size(); ++i) (*c.input_grads[0])[i] += c.grad[i] * (*c.inputs[0])[i];
        });
        return diff::sum(sq);
    };
    EXPECT_GT(diff::grad_check(fn, random_matrix(rng, 3, 2, 0.5, 1.0)).max_rel_err, 1e-2);
}

TEST(GradCheck, NonFiniteForwardRejected) {
    auto fn = [](Graph&, const Var& x) { return diff::sum(diff::exp(diff::scale(x, 1e6))); };
    EXPECT_THROW(diff::grad_check(fn, Matrix(1, 1, 1.0)), NumericalError);
}

// ---- every primitive against central differences at 100 random points ------------------------

struct PrimitiveCase {
    const char* name;
    std::function<Matrix(Rng&)> point;
    diff::ScalarBuilder fn;
};

class PrimitiveGradients : public ::testing::TestWithParam<PrimitiveCase> {};

TEST_P(PrimitiveGradients, MatchFiniteDifferences) {
    const PrimitiveCase& pc = GetParam();
    Rng rng(derive_seed(77, std::hash<std::string>{}(pc.name) & 0xffff));
    double worst = 0.0;
    for (int t = 0; t < 100; ++t) worst = std::max(worst, diff::grad_check(pc.fn, pc.point(rng), 1e-5).max_rel_err);
    EXPECT_LE(worst, 1e-4) << pc.name;
}

namespace {

auto dense(std::size_t r, std::size_t c) {
    return [r, c](Rng& rng) { return random_matrix(rng, r, c); };
}
auto positive(std::size_t r, std::size_t c) {
    return [r, c](Rng& rng) { return random_matrix(rng, r, c, 0.2, 2.0); };
}
auto kinkless(std::size_t r, std::size_t c) {
    return [r, c](Rng& rng) { return away_from_zero(rng, r, c); };
}
Matrix fixed(std::uint64_t seed, std::size_t r, std::size_t c) {
    Rng rng(seed);
    return random_matrix(rng, r, c);
}

const PrimitiveCase kCases[] = {
    {"matmul_left", dense(3, 4), [](Graph& g, const Var& x) { return readout(g, diff::matmul(x, g.constant(fixed(1, 4, 2))), 9); }},
    {"matmul_right", dense(4, 2), [](Graph& g, const Var& x) { return readout(g, diff::matmul(g.constant(fixed(1, 3, 4)), x), 9); }},
    {"add", dense(3, 4), [](Graph& g, const Var& x) { return readout(g, diff::add(x, x), 9); }},
    {"add_row_broadcast", dense(1, 4), [](Graph& g, const Var& x) { return readout(g, diff::add(g.constant(fixed(2, 3, 4)), x), 9); }},
    {"add_col_broadcast", dense(3, 1), [](Graph& g, const Var& x) { return readout(g, diff::add(g.constant(fixed(2, 3, 4)), x), 9); }},
    {"sub", dense(3, 4), [](Graph& g, const Var& x) { return readout(g, diff::sub(g.constant(fixed(3, 3, 4)), x), 9); }},
    {"sub_scalar_broadcast", dense(1, 1), [](Graph& g, const Var& x) { return readout(g, diff::sub(g.constant(fixed(3, 3, 4)), x), 9); }},
    {"mul", dense(3, 4), [](Graph& g, const Var& x) { return readout(g, diff::mul(x, x), 9); }},
    {"mul_row_broadcast", dense(1, 4), [](Graph& g, const Var& x) { return readout(g, diff::mul(g.constant(fixed(4, 3, 4)), x), 9); }},
    {"scale", dense(3, 4), [](Graph& g, const Var& x) { return readout(g, diff::scale(x, -2.5), 9); }},
    {"exp", dense(3, 4), [](Graph& g, const Var& x) { return readout(g, diff::exp(x), 9); }},
    {"log", positive(3, 4), [](Graph& g, const Var& x) { return readout(g, diff::log(x), 9); }},
    {"abs", kinkless(3, 4), [](Graph& g, const Var& x) { return readout(g, diff::abs(x), 9); }},
    {"relu", kinkless(3, 4), [](Graph& g, const Var& x) { return readout(g, diff::relu(x), 9); }},
    {"sum", dense(3, 4), [](Graph& g, const Var& x) { return readout(g, diff::sum(x), 9); }},
    {"mean", dense(3, 4), [](Graph& g, const Var& x) { return readout(g, diff::mean(x), 9); }},
    {"concat_cols", dense(3, 2), [](Graph& g, const Var& x) { return readout(g, diff::concat_cols({x, g.constant(fixed(5, 3, 1)), diff::scale(x, 3.0)}), 9); }},
    {"transpose", dense(3, 4), [](Graph& g, const Var& x) { return readout(g, diff::transpose(x), 9); }},
    {"normalize_rows", dense(3, 4), [](Graph& g, const Var& x) { return readout(g, diff::normalize_rows(x), 9); }},
    {"gram", dense(3, 4), [](Graph& g, const Var& x) { return readout(g, diff::gram(x), 9); }},
    {"logsumexp_rows", dense(3, 4), [](Graph& g, const Var& x) { return readout(g, diff::logsumexp_rows(x), 9); }},
    {"logsumexp_rows_masked", dense(3, 4), [](Graph& g, const Var& x) {
         return readout(g, diff::logsumexp_rows(x, Matrix{{1, 0, 1, 1}, {0, 1, 1, 0}, {1, 1, 1, 1}}), 9);
     }},
    {"pick", dense(3, 4), [](Graph& g, const Var& x) {
         const std::size_t cols[] = {2, 0, 3};
         return readout(g, diff::pick(x, cols), 9);
     }},
    {"gather_rows", dense(3, 4), [](Graph& g, const Var& x) {
         const std::size_t rows[] = {2, 0, 2, 1};
         return readout(g, diff::gather_rows(x, rows), 9);
     }},
    {"pool_rows", dense(4, 3), [](Graph& g, const Var& x) {
         std::vector<diff::PoolGroup> groups = {{{1, 0.5}, {3, 0.5}}, {{0, 1.0}}, {{1, 1.0 / 3}, {2, 2.0 / 3}}};
         return readout(g, diff::pool_rows(x, groups), 9);
     }},
    {"cosine_similarity_matrix", dense(4, 5), [](Graph& g, const Var& x) { return readout(g, diff::cosine_similarity_matrix(x), 9); }},
    {"softmax_cross_entropy", dense(4, 3), [](Graph&, const Var& x) {
         const std::size_t t[] = {0, 2, 1, 1};
         return diff::softmax_cross_entropy(x, t);
     }},
};

} // namespace

INSTANTIATE_TEST_SUITE_P(All, PrimitiveGradients, ::testing::ValuesIn(kCases),
                         [](const ::testing::TestParamInfo<PrimitiveCase>& i) { return std::string(i.param.name); });
