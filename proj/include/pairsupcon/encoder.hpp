#pragma once

// Toy sentence encoder: embedding lookup + mean pooling (psi), the two-layer projection head (h)
// feeding the contrastive loss, and the linear pair classifier (f) over (u, u', |u - u'|).

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "pairsupcon/diff.hpp"
#include "pairsupcon/error.hpp"
#include "pairsupcon/matrix.hpp"
#include "pairsupcon/random.hpp"

namespace pairsupcon {

inline constexpr std::size_t kProjectionWidth = 128;
inline constexpr std::size_t kNumPairClasses = 2;

using TokenIds = std::vector<std::size_t>;

// Lowercased words; whitespace and ASCII punctuation both separate and are dropped.
inline std::vector<std::string> split_words(std::string_view text) {
    std::vector<std::string> words;
    std::string cur;
    for (char ch : text) {
        const auto c = static_cast<unsigned char>(ch);
        if (std::isspace(c) || (c < 0x80 && std::ispunct(c))) {
            if (!cur.empty()) words.push_back(std::move(cur));
            cur.clear();
        } else {
            cur.push_back(static_cast<char>(c < 0x80 ? std::tolower(c) : c));
        }
    }
    if (!cur.empty()) words.push_back(std::move(cur));
    return words;
}

class Vocabulary {
public:
    static constexpr std::size_t pad = 0;
    static constexpr std::size_t unk = 1;

    Vocabulary() : tokens_{"<pad>", "<unk>"} {}

    // Tokens listed in first-seen order after the two reserved ids.
    explicit Vocabulary(std::span<const std::string> tokens) : Vocabulary() {
        for (const auto& t : tokens) add(t);
    }

    // Sorted set of every word in the corpus (min-count 1).
    static Vocabulary build(std::span<const std::string> texts) {
        std::vector<std::string> all;
        for (const auto& text : texts)
            for (auto& w : split_words(text)) all.push_back(std::move(w));
        std::sort(all.begin(), all.end());
        all.erase(std::unique(all.begin(), all.end()), all.end());
        return Vocabulary(all);
    }

    std::size_t add(const std::string& token) {
        detail::require(!token.empty(), "Vocabulary: empty token");
        if (auto it = index_.find(token); it != index_.end()) return it->second;
        const std::size_t id = tokens_.size();
        tokens_.push_back(token);
        index_.emplace(token, id);
        return id;
    }

    std::size_t id(const std::string& token) const {
        auto it = index_.find(token);
        return it == index_.end() ? unk : it->second;
    }

    bool contains(const std::string& token) const { return index_.contains(token); }
    const std::string& token(std::size_t id) const { return tokens_.at(id); }
    std::size_t size() const noexcept { return tokens_.size(); }

    // Non-reserved tokens in id order.
    std::span<const std::string> words() const { return std::span(tokens_).subspan(2); }

    void save(std::ostream& out) const {
        for (const auto& t : words()) out << t << '\n';
    }

    void save(const std::string& path) const {
        std::ofstream out(path, std::ios::binary);
        detail::require(bool(out), "cannot write vocabulary " + path);
        save(out);
    }

    static Vocabulary load(const std::string& path) {
        std::ifstream in(path, std::ios::binary);
        detail::require(bool(in), "cannot read vocabulary " + path);
        Vocabulary v;
        std::string line;
        std::size_t lineno = 0;
        while (std::getline(in, line)) {
            ++lineno;
            if (!line.empty() && line.back() == '\r') line.pop_back();
            detail::require(!line.empty(), path + ":" + std::to_string(lineno) + ": empty token");
            detail::require(!v.contains(line), path + ":" + std::to_string(lineno) + ": duplicate token " + line);
            v.add(line);
        }
        return v;
    }

    friend bool operator==(const Vocabulary& a, const Vocabulary& b) { return a.tokens_ == b.tokens_; }

private:
    std::vector<std::string> tokens_;
    std::unordered_map<std::string, std::size_t> index_;
};

// Unknown words map to unk; text without any word becomes a single unk.
inline TokenIds tokenize(std::string_view text, const Vocabulary& vocab) {
    TokenIds ids;
    for (const auto& w : split_words(text)) ids.push_back(vocab.id(w));
    if (ids.empty()) ids.push_back(Vocabulary::unk);
    return ids;
}

enum class Activation { relu, identity };

inline const char* activation_name(Activation a) { return a == Activation::relu ? "relu" : "identity"; }

inline Activation parse_activation(const std::string& s) {
    if (s == "relu") return Activation::relu;
    if (s == "identity") return Activation::identity;
    detail::fail("unknown activation '" + s + "' (expected relu|identity)");
}

struct ModelParams {
    Matrix embedding;  // V x d
    Matrix proj_w1;    // d x d
    Matrix proj_b1;    // 1 x d
    Matrix proj_w2;    // d x 128
    Matrix proj_b2;    // 1 x 128
    Matrix cls_w;      // 3d x 2
    Matrix cls_b;      // 1 x 2
    Activation activation = Activation::relu;

    std::size_t dim() const noexcept { return embedding.cols(); }
    std::size_t vocab_size() const noexcept { return embedding.rows(); }

    // Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)); the embedding table uses fan_in = d.
    static ModelParams init(std::size_t vocab_size, std::size_t dim, std::uint64_t seed,
                            Activation activation = Activation::relu) {
        detail::require(vocab_size > Vocabulary::unk, "ModelParams::init: vocabulary must include pad and unk");
        detail::require(dim >= 1, "ModelParams::init: dim must be >= 1");
        Rng rng(seed);
        auto uniform = [&rng](std::size_t r, std::size_t c, std::size_t fan_in) {
            const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
            Matrix m(r, c);
            for (double& v : m.values()) v = rng.uniform(-bound, bound);
            return m;
        };
        ModelParams p;
        p.embedding = uniform(vocab_size, dim, dim);
        p.proj_w1 = uniform(dim, dim, dim);
        p.proj_b1 = uniform(1, dim, dim);
        p.proj_w2 = uniform(dim, kProjectionWidth, dim);
        p.proj_b2 = uniform(1, kProjectionWidth, dim);
        p.cls_w = uniform(3 * dim, kNumPairClasses, 3 * dim);
        p.cls_b = uniform(1, kNumPairClasses, 3 * dim);
        p.activation = activation;
        return p;
    }

    template <typename Self, typename F>
    static void visit(Self& self, F&& f) {
        f("embedding", self.embedding);
        f("proj_w1", self.proj_w1);
        f("proj_b1", self.proj_b1);
        f("proj_w2", self.proj_w2);
        f("proj_b2", self.proj_b2);
        f("cls_w", self.cls_w);
        f("cls_b", self.cls_b);
    }
    template <typename F> void for_each(F&& f) { visit(*this, std::forward<F>(f)); }
    template <typename F> void for_each(F&& f) const { visit(*this, std::forward<F>(f)); }

    void validate() const {
        const std::size_t d = dim();
        auto expect = [](const char* name, const Matrix& m, std::size_t r, std::size_t c) {
            detail::require(m.rows() == r && m.cols() == c, std::string("ModelParams: ") + name + " is " +
                                                                m.shape_string() + ", expected " + std::to_string(r) +
                                                                "x" + std::to_string(c));
        };
        detail::require(d >= 1 && vocab_size() >= 2, "ModelParams: empty embedding table");
        expect("proj_w1", proj_w1, d, d);
        expect("proj_b1", proj_b1, 1, d);
        expect("proj_w2", proj_w2, d, kProjectionWidth);
        expect("proj_b2", proj_b2, 1, kProjectionWidth);
        expect("cls_w", cls_w, 3 * d, kNumPairClasses);
        expect("cls_b", cls_b, 1, kNumPairClasses);
        for_each([](const char* name, const Matrix& m) {
            detail::require(m.all_finite(), std::string("ModelParams: non-finite entry in ") + name);
        });
    }

    friend bool operator==(const ModelParams&, const ModelParams&) = default;
};

// Parameters bound into one graph as leaves.
struct ModelVars {
    diff::Var embedding, proj_w1, proj_b1, proj_w2, proj_b2, cls_w, cls_b;
    Activation activation = Activation::relu;
    std::size_t dim = 0;

    static ModelVars bind(diff::Graph& g, const ModelParams& p, bool requires_grad = true) {
        p.validate();
        ModelVars v;
        v.embedding = g.leaf(p.embedding, requires_grad);
        v.proj_w1 = g.leaf(p.proj_w1, requires_grad);
        v.proj_b1 = g.leaf(p.proj_b1, requires_grad);
        v.proj_w2 = g.leaf(p.proj_w2, requires_grad);
        v.proj_b2 = g.leaf(p.proj_b2, requires_grad);
        v.cls_w = g.leaf(p.cls_w, requires_grad);
        v.cls_b = g.leaf(p.cls_b, requires_grad);
        v.activation = p.activation;
        v.dim = p.dim();
        return v;
    }

    // Gradients after backward(), in ModelParams layout.
    ModelParams gradients() const {
        ModelParams g;
        g.embedding = embedding.grad();
        g.proj_w1 = proj_w1.grad();
        g.proj_b1 = proj_b1.grad();
        g.proj_w2 = proj_w2.grad();
        g.proj_b2 = proj_b2.grad();
        g.cls_w = cls_w.grad();
        g.cls_b = cls_b.grad();
        g.activation = activation;
        return g;
    }
};

// Mean-pooling weights for one sentence: 1/len per non-pad token, merged per id in id order.
inline diff::PoolGroup mean_pool_group(std::span<const std::size_t> ids, std::size_t vocab_size) {
    std::map<std::size_t, std::size_t> counts;
    std::size_t n = 0;
    for (std::size_t id : ids) {
        detail::require(id < vocab_size, "encode: token id " + std::to_string(id) + " >= vocabulary size " +
                                             std::to_string(vocab_size));
        if (id == Vocabulary::pad) continue;
        ++counts[id];
        ++n;
    }
    detail::require(n > 0, "encode: sentence has no non-pad tokens");
    diff::PoolGroup group;
    for (auto [id, c] : counts) group.push_back({id, static_cast<double>(c) / static_cast<double>(n)});
    return group;
}

// U = mean token embedding per sentence, n x d.
inline diff::Var encode(const ModelVars& m, std::span<const TokenIds> sentences) {
    std::vector<diff::PoolGroup> groups;
    groups.reserve(sentences.size());
    const std::size_t v = m.embedding.rows();
    for (const auto& s : sentences) groups.push_back(mean_pool_group(s, v));
    return diff::pool_rows(m.embedding, std::move(groups));
}

// Z = row-normalize(act(U W1 + b1) W2 + b2), n x 128.
inline diff::Var project(const ModelVars& m, const diff::Var& u) {
    detail::require(u.rows() >= 1, "project: empty batch");
    detail::require(u.cols() == m.dim, "project: representation width " + std::to_string(u.cols()) +
                                           " does not match model dim " + std::to_string(m.dim));
    diff::Var hidden = diff::add(diff::matmul(u, m.proj_w1), m.proj_b1);
    if (m.activation == Activation::relu) hidden = diff::relu(hidden);
    return diff::normalize_rows(diff::add(diff::matmul(hidden, m.proj_w2), m.proj_b2));
}

// Pair logits f(u, u', |u - u'|) for aligned rows of left/right, n x 2.
inline diff::Var classify_pairs(const ModelVars& m, const diff::Var& left, const diff::Var& right) {
    detail::require(left.rows() == right.rows() && left.cols() == right.cols(),
                    "classify_pair: shape mismatch " + left.value().shape_string() + " vs " +
                        right.value().shape_string());
    detail::require(left.cols() == m.dim, "classify_pair: vector length " + std::to_string(left.cols()) +
                                              " does not match model dim " + std::to_string(m.dim));
    diff::Var features = diff::concat_cols({left, right, diff::abs(diff::sub(left, right))});
    return diff::add(diff::matmul(features, m.cls_w), m.cls_b);
}

// Rows 2j / 2j+1 of u are the premise / hypothesis of pair j.
inline diff::Var classify_batch_pairs(const ModelVars& m, const diff::Var& u) {
    detail::require(u.rows() % 2 == 0 && u.rows() >= 2, "classify_batch_pairs: need an even number of rows");
    std::vector<std::size_t> prem, hyp;
    for (std::size_t j = 0; j < u.rows() / 2; ++j) {
        prem.push_back(2 * j);
        hyp.push_back(2 * j + 1);
    }
    return classify_pairs(m, diff::gather_rows(u, prem), diff::gather_rows(u, hyp));
}

// ---- value-level conveniences (no gradients) -------------------------------------------------

inline Matrix encode(std::span<const TokenIds> sentences, const ModelParams& p) {
    diff::Graph g;
    diff::Var table = g.constant(p.embedding);
    std::vector<diff::PoolGroup> groups;
    for (const auto& s : sentences) groups.push_back(mean_pool_group(s, p.vocab_size()));
    return diff::pool_rows(table, std::move(groups)).value();
}

inline Matrix project(const Matrix& u, const ModelParams& p) {
    diff::Graph g;
    ModelVars m = ModelVars::bind(g, p, false);
    return project(m, g.constant(u)).value();
}

inline Matrix classify_pair(std::span<const double> u, std::span<const double> u_prime, const ModelParams& p) {
    detail::require(u.size() == u_prime.size(), "classify_pair: length mismatch " + std::to_string(u.size()) +
                                                    " vs " + std::to_string(u_prime.size()));
    diff::Graph g;
    ModelVars m = ModelVars::bind(g, p, false);
    return classify_pairs(m, g.constant(Matrix::row_vector(u)), g.constant(Matrix::row_vector(u_prime))).value();
}

// Sentence representations for raw texts.
inline Matrix embed_texts(std::span<const std::string> texts, const Vocabulary& vocab, const ModelParams& p) {
    std::vector<TokenIds> toks;
    toks.reserve(texts.size());
    for (const auto& t : texts) toks.push_back(tokenize(t, vocab));
    return encode(toks, p);
}

} // namespace pairsupcon
