#pragma once

// Joint training loop (Adam, two learning-rate groups), loss trace and binary checkpoints.

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "pairsupcon/data.hpp"
#include "pairsupcon/diff.hpp"
#include "pairsupcon/encoder.hpp"
#include "pairsupcon/error.hpp"
#include "pairsupcon/losses.hpp"
#include "pairsupcon/random.hpp"

namespace pairsupcon {

enum class Objective { pairsupcon, classification, instance };

inline const char* objective_name(Objective o) {
    switch (o) {
        case Objective::pairsupcon: return "pairsupcon";
        case Objective::classification: return "classification";
        case Objective::instance: return "instance";
    }
    return "?";
}

inline Objective parse_objective(const std::string& s) {
    if (s == "pairsupcon") return Objective::pairsupcon;
    if (s == "classification") return Objective::classification;
    if (s == "instance") return Objective::instance;
    detail::fail("unknown objective '" + s + "' (expected pairsupcon|classification|instance)");
}

struct TrainConfig {
    // tau = 1: with alpha stopped, the weighted loss diverges at small temperatures (see README)
    double tau = 1.0;
    double beta = 1.0;
    std::size_t batch_size = 128;
    std::size_t epochs = 20;
    double head_lr = 1e-3;
    double backbone_lr = 1e-4;
    std::uint64_t seed = 0;
    std::size_t dim = 64;
    Activation activation = Activation::relu;
    bool alpha_grad = false;
    bool hard_negatives = true;
    Objective objective = Objective::pairsupcon;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_eps = 1e-8;
    std::string profile = "desk";

    static TrainConfig desk() { return {}; }

    static TrainConfig paper() {
        TrainConfig c;
        c.batch_size = 1024;
        c.head_lr = 5e-4;
        c.backbone_lr = 5e-6;
        c.epochs = 3;
        c.profile = "paper";
        return c;
    }

    static TrainConfig profile_named(const std::string& name) {
        if (name == "desk") return desk();
        if (name == "paper") return paper();
        detail::fail("unknown profile '" + name + "' (expected desk|paper)");
    }

    void validate() const {
        detail::require(tau > 0.0, "config: tau must be > 0");
        detail::require(beta >= 0.0, "config: beta must be >= 0");
        detail::require(batch_size >= 2, "config: batch size must be >= 2");
        detail::require(epochs >= 1, "config: epochs must be >= 1");
        detail::require(head_lr > 0.0 && backbone_lr >= 0.0, "config: learning rates must be positive");
        detail::require(dim >= 1, "config: dim must be >= 1");
        detail::require(adam_beta1 >= 0.0 && adam_beta1 < 1.0 && adam_beta2 >= 0.0 && adam_beta2 < 1.0 && adam_eps > 0.0,
                        "config: invalid Adam constants");
    }

    LossOptions loss_options() const {
        LossOptions o;
        o.tau = tau;
        o.beta = objective == Objective::classification ? 0.0 : (objective == Objective::instance ? 1.0 : beta);
        o.hard_negatives = hard_negatives;
        o.alpha_grad = alpha_grad;
        o.include_classification = objective != Objective::instance;
        return o;
    }

    nlohmann::ordered_json to_json() const {
        nlohmann::ordered_json j;
        j["profile"] = profile;
        j["objective"] = objective_name(objective);
        j["tau"] = tau;
        j["beta"] = beta;
        j["batch_size"] = batch_size;
        j["epochs"] = epochs;
        j["head_lr"] = head_lr;
        j["backbone_lr"] = backbone_lr;
        j["seed"] = seed;
        j["dim"] = dim;
        j["activation"] = activation_name(activation);
        j["hard_negatives"] = hard_negatives;
        j["alpha_grad"] = alpha_grad;
        j["adam_beta1"] = adam_beta1;
        j["adam_beta2"] = adam_beta2;
        j["adam_eps"] = adam_eps;
        return j;
    }

    // Fields present in j override this config; unknown keys are rejected.
    void merge_json(const nlohmann::json& j) {
        detail::require(j.is_object(), "config: expected a JSON object");
        for (auto it = j.begin(); it != j.end(); ++it) {
            const std::string& k = it.key();
            const auto& v = it.value();
            try {
                if (k == "profile") profile = v.get<std::string>();
                else if (k == "objective") objective = parse_objective(v.get<std::string>());
                else if (k == "tau") tau = v.get<double>();
                else if (k == "beta") beta = v.get<double>();
                else if (k == "batch_size") batch_size = v.get<std::size_t>();
                else if (k == "epochs") epochs = v.get<std::size_t>();
                else if (k == "head_lr") head_lr = v.get<double>();
                else if (k == "backbone_lr") backbone_lr = v.get<double>();
                else if (k == "seed") seed = v.get<std::uint64_t>();
                else if (k == "dim") dim = v.get<std::size_t>();
                else if (k == "activation") activation = parse_activation(v.get<std::string>());
                else if (k == "hard_negatives") hard_negatives = v.get<bool>();
                else if (k == "alpha_grad") alpha_grad = v.get<bool>();
                else if (k == "adam_beta1") adam_beta1 = v.get<double>();
                else if (k == "adam_beta2") adam_beta2 = v.get<double>();
                else if (k == "adam_eps") adam_eps = v.get<double>();
                else detail::fail("config: unknown key '" + k + "'");
            } catch (const nlohmann::json::exception& e) {
                detail::fail("config: bad value for '" + k + "': " + e.what());
            }
        }
    }

    static TrainConfig from_json(const nlohmann::json& j) {
        TrainConfig c;
        c.merge_json(j);
        return c;
    }

    friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

// ---- Adam --------------------------------------------------------------------------------------

struct AdamState {
    std::map<std::string, Matrix> first;
    std::map<std::string, Matrix> second;
    std::uint64_t step = 0;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

struct LearningRates {
    double head = 1e-3;
    double backbone = 1e-4;  // embedding table

    double for_param(const std::string& name) const { return name == "embedding" ? backbone : head; }
};

// One bias-corrected Adam update of every parameter.
inline void adam_step(ModelParams& params, const ModelParams& grads, AdamState& state, const LearningRates& lr) {
    grads.for_each([&](const char* name, const Matrix& g) {
        if (!g.all_finite()) throw NumericalError(std::string("adam_step: non-finite gradient for ") + name);
    });
    ++state.step;
    const double t = static_cast<double>(state.step);
    const double c1 = 1.0 - std::pow(state.beta1, t);
    const double c2 = 1.0 - std::pow(state.beta2, t);
    std::map<std::string, const Matrix*> grad_by_name;
    grads.for_each([&](const char* name, const Matrix& g) { grad_by_name[name] = &g; });
    params.for_each([&](const char* name, Matrix& p) {
        const Matrix& g = *grad_by_name.at(name);
        detail::require(g.same_shape(p), std::string("adam_step: gradient shape mismatch for ") + name + " " +
                                             g.shape_string() + " vs " + p.shape_string());
        Matrix& m = state.first.try_emplace(name, p.rows(), p.cols()).first->second;
        Matrix& v = state.second.try_emplace(name, p.rows(), p.cols()).first->second;
        detail::require(m.same_shape(p) && v.same_shape(p), std::string("adam_step: moment shape mismatch for ") + name);
        const double rate = lr.for_param(name);
        for (std::size_t i = 0; i < p.size(); ++i) {
            m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * g[i];
            v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * g[i] * g[i];
            const double mhat = m[i] / c1;
            const double vhat = v[i] / c2;
            p[i] -= rate * mhat / (std::sqrt(vhat) + state.eps);
        }
    });
}

// ---- training ----------------------------------------------------------------------------------

struct TraceEntry {
    std::size_t step = 0;
    std::size_t epoch = 0;
    double total = 0.0;
    double classification = 0.0;
    double instance = 0.0;

    friend bool operator==(const TraceEntry&, const TraceEntry&) = default;
};

struct TokenizedPairs {
    std::vector<TokenIds> premises;
    std::vector<TokenIds> hypotheses;
};

inline TokenizedPairs tokenize_pairs(std::span<const SentencePair> pairs, const Vocabulary& vocab) {
    TokenizedPairs t;
    for (const auto& p : pairs) {
        t.premises.push_back(tokenize(p.premise, vocab));
        t.hypotheses.push_back(tokenize(p.hypothesis, vocab));
    }
    return t;
}

inline Vocabulary build_vocabulary(std::span<const SentencePair> pairs) {
    std::vector<std::string> texts;
    for (const auto& p : pairs) {
        texts.push_back(p.premise);
        texts.push_back(p.hypothesis);
    }
    return Vocabulary::build(texts);
}

inline constexpr std::uint64_t kInitSeedStream = 0x1417;

inline ModelParams initial_params(const TrainConfig& cfg, const Vocabulary& vocab) {
    return ModelParams::init(vocab.size(), cfg.dim, derive_seed(cfg.seed, kInitSeedStream), cfg.activation);
}

inline std::uint64_t epoch_seed(const TrainConfig& cfg, std::size_t epoch) { return derive_seed(cfg.seed, epoch); }

// Rows for one batch: premise of pair j at 2j, hypothesis at 2j+1.
inline std::vector<TokenIds> batch_sentences(const TokenizedPairs& toks, const PairBatch& batch) {
    std::vector<TokenIds> rows;
    rows.reserve(2 * batch.size());
    for (std::size_t k : batch.pair_indices) {
        rows.push_back(toks.premises[k]);
        rows.push_back(toks.hypotheses[k]);
    }
    return rows;
}

// Forward pass of the full objective for one batch on a fresh graph.
struct BatchEvaluation {
    diff::Graph graph;
    ModelVars vars;
    LossBreakdown loss;
};

inline void evaluate_batch(BatchEvaluation& ev, const ModelParams& params, std::span<const TokenIds> rows,
                           const BatchLabels& labels, const LossOptions& opt) {
    ev.vars = ModelVars::bind(ev.graph, params);
    diff::Var u = encode(ev.vars, rows);
    diff::Var z = opt.beta > 0.0 ? project(ev.vars, u) : u;
    ev.loss = pairsupcon_batch(ev.vars, u, z, labels, opt);
}

inline LossBreakdown batch_loss(const ModelParams& params, std::span<const TokenIds> rows, const BatchLabels& labels,
                                const LossOptions& opt) {
    BatchEvaluation ev;
    evaluate_batch(ev, params, rows, labels, opt);
    return ev.loss;
}

struct TrainResult {
    ModelParams params;
    std::vector<TraceEntry> trace;
};

// Called after each step with the entry and the parameters the step started from.
using StepObserver = std::function<void(const TraceEntry&, const ModelParams& before, const PairBatch&)>;

inline TrainResult train(const TrainConfig& cfg, std::span<const SentencePair> pairs, const Vocabulary& vocab,
                         ModelParams params, const StepObserver& observer = {}) {
    cfg.validate();
    params.validate();
    detail::require(params.vocab_size() == vocab.size(), "train: embedding rows " +
                                                              std::to_string(params.vocab_size()) +
                                                              " do not match vocabulary size " +
                                                              std::to_string(vocab.size()));
    const TokenizedPairs toks = tokenize_pairs(pairs, vocab);
    const LossOptions opt = cfg.loss_options();
    const LearningRates lr{cfg.head_lr, cfg.backbone_lr};
    AdamState adam;
    adam.beta1 = cfg.adam_beta1;
    adam.beta2 = cfg.adam_beta2;
    adam.eps = cfg.adam_eps;

    TrainResult result;
    std::size_t step = 0;
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        for (const PairBatch& batch : make_batches(pairs, cfg.batch_size, epoch_seed(cfg, epoch))) {
            const auto rows = batch_sentences(toks, batch);
            BatchEvaluation ev;
            evaluate_batch(ev, params, rows, batch.labels, opt);
            TraceEntry e{step, epoch, ev.loss.total_value, ev.loss.classification, ev.loss.instance};
            if (!std::isfinite(e.total))
                throw NumericalError("train: non-finite loss at step " + std::to_string(step) + " (epoch " +
                                     std::to_string(epoch) + ", " + std::to_string(batch.size()) + " pairs, " +
                                     std::to_string(batch.labels.positives()) + " positive, cls=" +
                                     std::to_string(e.classification) + ", id=" + std::to_string(e.instance) + ")");
            ev.graph.backward(ev.loss.total);
            const ModelParams grads = ev.vars.gradients();
            if (observer) observer(e, params, batch);
            adam_step(params, grads, adam, lr);
            result.trace.push_back(e);
            ++step;
        }
    }
    result.params = std::move(params);
    return result;
}

inline std::string format_double(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

inline void write_trace_csv(std::ostream& out, std::span<const TraceEntry> trace) {
    out << "step,epoch,total,cls_term,id_term\n";
    for (const auto& e : trace)
        out << e.step << ',' << e.epoch << ',' << format_double(e.total) << ',' << format_double(e.classification)
            << ',' << format_double(e.instance) << '\n';
}

inline void write_trace_csv(const std::string& path, std::span<const TraceEntry> trace) {
    std::ofstream out(path, std::ios::binary);
    detail::require(bool(out), "cannot write " + path);
    write_trace_csv(out, trace);
}

// ---- checkpoints -------------------------------------------------------------------------------
//
// Little-endian layout:
//   "PSCKPT\r\n"                  8-byte magic
//   u32 version                   (= 1)
//   u32 n, n bytes                UTF-8 JSON: {"config": {...}, "activation": ..., "vocabulary": [...]}
//   u32 count                     number of parameters
//   per parameter: u32 n, n bytes name; u64 rows; u64 cols; rows*cols f64, row-major

inline constexpr char kCheckpointMagic[8] = {'P', 'S', 'C', 'K', 'P', 'T', '\r', '\n'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
    ModelParams params;
    TrainConfig config;
    Vocabulary vocab;
};

namespace ckpt_detail {

class Writer {
public:
    void bytes(const void* p, std::size_t n) { buf_.append(static_cast<const char*>(p), n); }
    template <typename T>
    void le(T v) {
        using U = std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>;
        U u = std::bit_cast<U>(v);
        for (std::size_t i = 0; i < sizeof(U); ++i) buf_.push_back(static_cast<char>((u >> (8 * i)) & 0xff));
    }
    void str(const std::string& s) {
        le(static_cast<std::uint32_t>(s.size()));
        bytes(s.data(), s.size());
    }
    const std::string& buffer() const { return buf_; }

private:
    std::string buf_;
};

class Reader {
public:
    explicit Reader(std::string data) : data_(std::move(data)) {}
    void need(std::size_t n) const {
        if (data_.size() - pos_ < n) detail::fail("corrupt checkpoint: truncated at byte " + std::to_string(pos_));
    }
    template <typename T>
    T le() {
        using U = std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>;
        need(sizeof(U));
        U u = 0;
        for (std::size_t i = 0; i < sizeof(U); ++i)
            u |= static_cast<U>(static_cast<unsigned char>(data_[pos_ + i])) << (8 * i);
        pos_ += sizeof(U);
        return std::bit_cast<T>(u);
    }
    std::string str() {
        const auto n = le<std::uint32_t>();
        need(n);
        std::string s = data_.substr(pos_, n);
        pos_ += n;
        return s;
    }
    std::string raw(std::size_t n) {
        need(n);
        std::string s = data_.substr(pos_, n);
        pos_ += n;
        return s;
    }
    bool done() const { return pos_ == data_.size(); }

private:
    std::string data_;
    std::size_t pos_ = 0;
};

} // namespace ckpt_detail

inline std::string serialize_checkpoint(const Checkpoint& ck) {
    ck.params.validate();
    ckpt_detail::Writer w;
    w.bytes(kCheckpointMagic, sizeof kCheckpointMagic);
    w.le(kCheckpointVersion);
    nlohmann::ordered_json meta;
    meta["config"] = ck.config.to_json();
    meta["activation"] = activation_name(ck.params.activation);
    meta["vocabulary"] = std::vector<std::string>(ck.vocab.words().begin(), ck.vocab.words().end());
    w.str(meta.dump());
    std::uint32_t count = 0;
    ck.params.for_each([&](const char*, const Matrix&) { ++count; });
    w.le(count);
    ck.params.for_each([&](const char* name, const Matrix& m) {
        w.str(name);
        w.le(static_cast<std::uint64_t>(m.rows()));
        w.le(static_cast<std::uint64_t>(m.cols()));
        for (double v : m.values()) w.le(v);
    });
    return w.buffer();
}

inline Checkpoint deserialize_checkpoint(std::string data) {
    ckpt_detail::Reader r(std::move(data));
    if (r.raw(sizeof kCheckpointMagic) != std::string(kCheckpointMagic, sizeof kCheckpointMagic))
        detail::fail("corrupt checkpoint: bad magic");
    const auto version = r.le<std::uint32_t>();
    detail::require(version == kCheckpointVersion, "unsupported checkpoint version " + std::to_string(version) +
                                                       " (expected " + std::to_string(kCheckpointVersion) + ")");
    Checkpoint ck;
    const nlohmann::json meta = nlohmann::json::parse(r.str(), nullptr, false);
    detail::require(!meta.is_discarded() && meta.is_object() && meta.contains("config") && meta.contains("vocabulary"),
                    "corrupt checkpoint: bad metadata");
    ck.config = TrainConfig::from_json(meta["config"]);
    for (const auto& t : meta["vocabulary"]) ck.vocab.add(t.get<std::string>());
    ck.params.activation = parse_activation(meta.value("activation", std::string("relu")));
    const auto count = r.le<std::uint32_t>();
    std::map<std::string, Matrix> loaded;
    for (std::uint32_t k = 0; k < count; ++k) {
        const std::string name = r.str();
        const auto rows = r.le<std::uint64_t>();
        const auto cols = r.le<std::uint64_t>();
        if (cols != 0 && rows > (std::uint64_t{1} << 40) / cols) detail::fail("corrupt checkpoint: absurd shape");
        r.need(rows * cols * 8);
        Matrix m(rows, cols);
        for (double& v : m.values()) v = r.le<double>();
        loaded[name] = std::move(m);
    }
    detail::require(r.done(), "corrupt checkpoint: trailing bytes");
    ck.params.for_each([&](const char* name, Matrix& m) {
        auto it = loaded.find(name);
        detail::require(it != loaded.end(), std::string("corrupt checkpoint: missing parameter ") + name);
        m = std::move(it->second);
    });
    ck.params.validate();
    detail::require(ck.params.vocab_size() == ck.vocab.size(), "corrupt checkpoint: vocabulary size does not match "
                                                               "embedding rows");
    return ck;
}

inline void save_checkpoint(const Checkpoint& ck, const std::string& path) {
    const std::string bytes = serialize_checkpoint(ck);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    detail::require(bool(out), "cannot write checkpoint " + path);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    detail::require(bool(out), "failed writing checkpoint " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    detail::require(bool(in), "cannot read checkpoint " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return deserialize_checkpoint(ss.str());
}

} // namespace pairsupcon
