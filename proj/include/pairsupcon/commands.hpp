#pragma once

// Command-line frontend: train / eval-cluster / eval-sts / eval-fewshot / synth / gradcheck.
// Every command writes a run manifest next to its outputs, also when it fails.
// Exit codes: 0 ok, 1 validation error, 2 numerical failure.

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "pairsupcon/data.hpp"
#include "pairsupcon/error.hpp"
#include "pairsupcon/eval.hpp"
#include "pairsupcon/gradcheck.hpp"
#include "pairsupcon/trainer.hpp"

#ifndef PAIRSUPCON_VERSION
#define PAIRSUPCON_VERSION "0.1.0-unknown"
#endif

namespace pairsupcon::cli {

namespace fs = std::filesystem;
using ojson = nlohmann::ordered_json;

inline const char* version() { return PAIRSUPCON_VERSION; }

// Temp file in the same directory, then rename: readers never see a half-written file.
inline void write_file_atomic(const fs::path& path, const std::string& content) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    fs::path tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        detail::require(bool(out), "cannot write " + tmp.string());
        out.write(content.data(), static_cast<std::streamsize>(content.size()));
        out.flush();
        detail::require(bool(out), "failed writing " + tmp.string());
    }
    fs::rename(tmp, path);
}

struct RunManifest {
    std::string command;
    ojson config = ojson::object();
    std::uint64_t seed = 0;
    ojson inputs = ojson::object();
    ojson outputs = ojson::object();
    ojson extra = ojson::object();
    std::optional<std::string> error;
    double seconds = 0.0;

    ojson to_json() const {
        ojson j;
        j["command"] = command;
        j["version"] = version();
        j["seed"] = seed;
        j["config"] = config;
        j["inputs"] = inputs;
        j["outputs"] = outputs;
        for (auto it = extra.begin(); it != extra.end(); ++it) j[it.key()] = it.value();
        j["wall_clock_seconds"] = seconds;
        j["status"] = error ? "error" : "ok";
        if (error) j["error"] = *error;
        return j;
    }

    void write(const fs::path& path) const { write_file_atomic(path, to_json().dump(2) + "\n"); }
};

struct Streams {
    std::ostream& out;
    std::ostream& err;
};

// ---- train -----------------------------------------------------------------------------------

struct TrainArgs {
    std::string data;
    std::string out;
    std::optional<std::string> profile;  // desk unless given here or in the config file
    std::optional<std::string> config;  // JSON file merged over the profile; flags win
    std::optional<double> tau, beta, head_lr, backbone_lr;
    std::optional<std::size_t> batch, epochs, dim;
    std::optional<std::uint64_t> seed;
    std::optional<std::string> objective, activation;
    std::optional<bool> hard_negatives, alpha_grad;
};

inline nlohmann::json read_json_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    detail::require(bool(in), "cannot open " + path);
    nlohmann::json j = nlohmann::json::parse(in, nullptr, false);
    detail::require(!j.is_discarded(), path + ": malformed JSON");
    return j;
}

inline TrainConfig resolve_config(const TrainArgs& a) {
    nlohmann::json j = nlohmann::json::object();
    if (a.config) {
        j = read_json_file(*a.config);
        detail::require(j.is_object(), *a.config + ": expected a JSON object");
    }
    std::string profile = "desk";
    if (a.profile)
        profile = *a.profile;
    else if (j.contains("profile") && j["profile"].is_string())
        profile = j["profile"].get<std::string>();
    j.erase("profile");
    TrainConfig c = TrainConfig::profile_named(profile);
    c.merge_json(j);
    if (a.tau) c.tau = *a.tau;
    if (a.beta) c.beta = *a.beta;
    if (a.head_lr) c.head_lr = *a.head_lr;
    if (a.backbone_lr) c.backbone_lr = *a.backbone_lr;
    if (a.batch) c.batch_size = *a.batch;
    if (a.epochs) c.epochs = *a.epochs;
    if (a.dim) c.dim = *a.dim;
    if (a.seed) c.seed = *a.seed;
    if (a.objective) c.objective = parse_objective(*a.objective);
    if (a.activation) c.activation = parse_activation(*a.activation);
    if (a.hard_negatives) c.hard_negatives = *a.hard_negatives;
    if (a.alpha_grad) c.alpha_grad = *a.alpha_grad;
    c.validate();
    return c;
}

inline void cmd_train(const TrainArgs& a, RunManifest& m, Streams io) {
    const fs::path dir(a.out);
    m.inputs["data"] = a.data;
    if (a.config) m.inputs["config"] = *a.config;
    const TrainConfig cfg = resolve_config(a);
    m.config = cfg.to_json();
    m.seed = cfg.seed;

    const NliCorpus corpus = load_nli(a.data);
    if (corpus.neutral_skipped) io.err << "train: skipped " << corpus.neutral_skipped << " neutral pairs\n";
    const Vocabulary vocab = build_vocabulary(corpus.pairs);
    const TrainResult res = train(cfg, corpus.pairs, vocab, initial_params(cfg, vocab));

    const fs::path ckpt = dir / "checkpoint.bin", trace = dir / "trace.csv", voc = dir / "vocab.txt";
    write_file_atomic(ckpt, serialize_checkpoint({res.params, cfg, vocab}));
    {
        std::ostringstream ss;
        write_trace_csv(ss, res.trace);
        write_file_atomic(trace, ss.str());
    }
    {
        std::ostringstream ss;
        vocab.save(ss);
        write_file_atomic(voc, ss.str());
    }
    m.outputs["checkpoint"] = ckpt.string();
    m.outputs["trace"] = trace.string();
    m.outputs["vocabulary"] = voc.string();
    m.extra["pairs"] = corpus.pairs.size();
    m.extra["neutral_skipped"] = corpus.neutral_skipped;
    m.extra["steps"] = res.trace.size();
    if (!res.trace.empty()) m.extra["final_total_loss"] = res.trace.back().total;
    io.out << "trained " << res.trace.size() << " steps over " << corpus.pairs.size() << " pairs ("
           << cfg.epochs << " epochs, M=" << cfg.batch_size << ", tau=" << format_double(cfg.tau)
           << ", beta=" << format_double(cfg.beta) << ", head_lr=" << format_double(cfg.head_lr)
           << ", backbone_lr=" << format_double(cfg.backbone_lr) << ", profile=" << cfg.profile << ")\n";
}

// ---- eval ------------------------------------------------------------------------------------

struct EvalArgs {
    std::string checkpoint;
    std::string data;
    std::string out;
    std::optional<std::string> vocab;  // vocabulary file that must match the checkpoint's
    std::optional<std::size_t> k;
    std::size_t runs = kClusterRuns;
    std::size_t shots = kFewShotShots;
    std::size_t sets = kFewShotSets;
    std::uint64_t seed = 0;
};

inline Checkpoint load_for_eval(const EvalArgs& a, RunManifest& m) {
    m.inputs["checkpoint"] = a.checkpoint;
    m.inputs["data"] = a.data;
    Checkpoint ck = load_checkpoint(a.checkpoint);
    detail::require(ck.params.vocab_size() == ck.vocab.size(),
                    "checkpoint embedding has " + std::to_string(ck.params.vocab_size()) +
                        " rows but its vocabulary has " + std::to_string(ck.vocab.size()) + " tokens");
    if (a.vocab) {
        m.inputs["vocabulary"] = *a.vocab;
        const Vocabulary v = Vocabulary::load(*a.vocab);
        detail::require(v == ck.vocab,
                        "vocabulary " + *a.vocab + " does not match the checkpoint's vocabulary (" +
                            std::to_string(v.size()) + " vs " + std::to_string(ck.vocab.size()) + " tokens)");
    }
    m.config = ck.config.to_json();
    m.seed = a.seed;
    return ck;
}

// A corpus with no in-vocabulary token cannot have been meant for this checkpoint.
inline void require_coverage(const Vocabulary& vocab, std::span<const std::string> texts, const std::string& path) {
    std::size_t known = 0, total = 0;
    for (const auto& t : texts)
        for (const auto& w : split_words(t)) {
            ++total;
            known += vocab.contains(w);
        }
    detail::require(total > 0 && known > 0, path + ": no token of the data is in the checkpoint vocabulary");
}

inline void emit_report(const EvalReport& r, const EvalArgs& a, RunManifest& m, Streams io) {
    const std::string text = r.to_json().dump(2) + "\n";
    write_file_atomic(a.out, text);
    m.outputs["report"] = a.out;
    m.extra["mean"] = r.mean;
    m.extra["std"] = r.std;
    io.out << text;
}

inline void cmd_eval_cluster(const EvalArgs& a, RunManifest& m, Streams io) {
    const Checkpoint ck = load_for_eval(a, m);
    const LabeledCorpus data = load_labeled(a.data);
    detail::require(data.size() > 0, a.data + ": no labeled texts");
    require_coverage(ck.vocab, data.texts, a.data);
    std::size_t k = data.num_classes();
    if (a.k) {
        k = *a.k;
    } else {
        io.err << "eval-cluster: --k not given; inferred k=" << k << " from distinct labels\n";
    }
    const Matrix u = embed_texts(data.texts, ck.vocab, ck.params);
    EvalReport r = clustering_eval(u, data.labels, k, a.runs, a.seed);
    r.params["k_inferred"] = !a.k.has_value();
    r.params["seed"] = a.seed;
    emit_report(r, a, m, io);
}

inline void cmd_eval_sts(const EvalArgs& a, RunManifest& m, Streams io) {
    const Checkpoint ck = load_for_eval(a, m);
    const std::vector<ScoredPair> pairs = load_scored(a.data);
    std::vector<std::string> texts;
    for (const auto& p : pairs) {
        texts.push_back(p.first);
        texts.push_back(p.second);
    }
    require_coverage(ck.vocab, texts, a.data);
    emit_report(sts_eval(ck.params, ck.vocab, pairs), a, m, io);
}

inline void cmd_eval_fewshot(const EvalArgs& a, RunManifest& m, Streams io) {
    const Checkpoint ck = load_for_eval(a, m);
    const LabeledCorpus data = load_labeled(a.data);
    require_coverage(ck.vocab, data.texts, a.data);
    std::vector<std::size_t> count(data.num_classes(), 0);
    for (std::size_t y : data.labels) ++count[y];
    for (std::size_t c = 0; c < count.size(); ++c)
        detail::require(count[c] >= a.shots + 1, "eval-fewshot: class '" + data.class_names[c] + "' has " +
                                                     std::to_string(count[c]) + " examples, need at least " +
                                                     std::to_string(a.shots + 1));
    const Matrix u = embed_texts(data.texts, ck.vocab, ck.params);
    EvalReport r = fewshot_probe(u, data.labels, a.shots, a.sets, a.seed);
    r.params["seed"] = a.seed;
    emit_report(r, a, m, io);
}

// ---- synth -----------------------------------------------------------------------------------

struct SynthArgs {
    std::string out;
    SynthConfig cfg;
};

inline void cmd_synth(const SynthArgs& a, RunManifest& m, Streams io) {
    const SynthConfig& c = a.cfg;
    m.seed = c.seed;
    m.config["classes"] = c.classes;
    m.config["per_class"] = c.per_class;
    m.config["cross_rate"] = c.cross_rate;
    m.config["entailment_rate"] = c.entailment_rate;
    m.config["sibling_overlap"] = c.sibling_overlap;
    m.config["eval_per_class"] = c.eval_per_class;
    m.config["scored_pairs"] = c.scored_pairs;
    const SynthCorpus corpus = synth_generate(c);
    const fs::path dir(a.out);
    fs::create_directories(dir);
    // Generators write straight to files; stage them under .tmp names and rename.
    auto staged = [&](const char* name, auto&& writer) {
        const fs::path final_path = dir / name;
        fs::path tmp = final_path;
        tmp += ".tmp";
        writer(tmp.string());
        fs::rename(tmp, final_path);
        return final_path.string();
    };
    m.outputs["nli"] = staged("nli.jsonl", [&](const std::string& p) { write_nli(p, corpus.pairs); });
    m.outputs["labeled"] =
        staged("labeled.jsonl", [&](const std::string& p) { write_labeled(p, corpus.labeled, corpus.class_names); });
    if (!corpus.scored.empty())
        m.outputs["scored"] = staged("sts.tsv", [&](const std::string& p) { write_scored(p, corpus.scored); });
    std::size_t contradictions = 0;
    for (const auto& p : corpus.pairs) contradictions += p.label == -1;
    m.extra["pairs"] = corpus.pairs.size();
    m.extra["contradictions"] = contradictions;
    m.extra["empirical_cross_fraction"] = corpus.cross_fraction();
    io.out << "wrote " << corpus.pairs.size() << " pairs (" << contradictions << " contradictions, cross fraction "
           << format_double(corpus.cross_fraction()) << ") and " << corpus.labeled.size() << " labeled texts to "
           << dir.string() << "\n";
}

// ---- gradcheck -------------------------------------------------------------------------------

struct GradcheckArgs {
    std::size_t trials = 20;
    double tolerance = 1e-4;
    std::uint64_t seed = 0;
    std::optional<std::string> out;  // directory for report + manifest
};

// Returns false when some trial exceeds the tolerance.
inline bool cmd_gradcheck(const GradcheckArgs& a, RunManifest& m, Streams io) {
    m.seed = a.seed;
    m.config["trials"] = a.trials;
    m.config["tolerance"] = a.tolerance;
    const GradSuiteReport rep = run_gradient_suite(a.trials, a.tolerance, a.seed);
    ojson trials = ojson::array();
    for (std::size_t k = 0; k < rep.trials.size(); ++k) {
        const GradTrialResult& r = rep.trials[k];
        char line[200];
        std::snprintf(line, sizeof line, "trial %2zu  M=%zu d=%zu tau=%-4g beta=%g %s%s  max_rel_err=%.3e  %s\n", k,
                      r.trial.pairs, r.trial.dim, r.trial.tau, r.trial.beta,
                      r.trial.hard_negatives ? "weighted" : "uniform",
                      r.trial.hard_negatives ? (r.trial.alpha_grad ? "/alpha-grad" : "/alpha-stopped") : "", r.worst,
                      r.pass ? "ok" : "FAIL");
        io.out << line;
        ojson t;
        t["pairs"] = r.trial.pairs;
        t["dim"] = r.trial.dim;
        t["tau"] = r.trial.tau;
        t["beta"] = r.trial.beta;
        t["hard_negatives"] = r.trial.hard_negatives;
        t["alpha_grad"] = r.trial.alpha_grad;
        ojson errs = ojson::object();
        for (const auto& [name, e] : r.rel_err) errs[name] = e;
        t["max_rel_err"] = errs;
        t["pass"] = r.pass;
        trials.push_back(std::move(t));
    }
    io.out << (rep.pass ? "gradcheck passed" : "gradcheck FAILED") << ": worst relative error " << rep.worst
           << " (tolerance " << a.tolerance << ")\n";
    m.extra["worst_rel_err"] = rep.worst;
    m.extra["pass"] = rep.pass;
    if (a.out) {
        ojson j;
        j["tolerance"] = a.tolerance;
        j["worst_rel_err"] = rep.worst;
        j["pass"] = rep.pass;
        j["trials"] = std::move(trials);
        const fs::path p = fs::path(*a.out) / "gradcheck.json";
        write_file_atomic(p, j.dump(2) + "\n");
        m.outputs["report"] = p.string();
    }
    return rep.pass;
}

// ---- dispatch --------------------------------------------------------------------------------

inline int exit_code_for(const std::exception_ptr& e, std::string& message) {
    try {
        std::rethrow_exception(e);
    } catch (const NumericalError& x) {
        message = x.what();
        return 2;
    } catch (const std::exception& x) {
        message = x.what();
        return 1;
    }
}

// Runs body, records duration and any error in the manifest, writes it if a path is known.
template <typename Body>
int run_command(const std::string& name, std::optional<fs::path> manifest_path, Streams io, Body&& body) {
    RunManifest m;
    m.command = name;
    const auto t0 = std::chrono::steady_clock::now();
    int code = 0;
    try {
        code = body(m);
    } catch (...) {
        std::string msg;
        code = exit_code_for(std::current_exception(), msg);
        m.error = msg;
        io.err << name << ": error: " << msg << "\n";
    }
    m.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (manifest_path) {
        try {
            m.write(*manifest_path);
        } catch (const std::exception& x) {
            io.err << name << ": could not write manifest: " << x.what() << "\n";
            if (code == 0) code = 1;
        }
    }
    return code;
}

inline fs::path sidecar_manifest(const std::string& report_path) {
    fs::path p(report_path);
    p += ".manifest.json";
    return p;
}

inline int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
    Streams io{out, err};
    CLI::App app{"PairSupCon sentence-embedding toolkit", "pairsupcon"};
    app.require_subcommand(1);
    app.set_version_flag("--version", std::string(version()));

    TrainArgs ta;
    auto* train = app.add_subcommand("train", "train an encoder on NLI pairs");
    train->add_option("--data", ta.data, "NLI JSONL corpus")->required();
    train->add_option("--out", ta.out, "output directory")->required();
    train->add_option("--profile", ta.profile, "desk|paper defaults")->check(CLI::IsMember({"desk", "paper"}));
    train->add_option("--config", ta.config, "JSON config merged over the profile; flags take precedence");
    train->add_option("--tau", ta.tau, "temperature");
    train->add_option("--beta", ta.beta, "instance-discrimination weight");
    train->add_option("--batch", ta.batch, "pairs per batch (M)");
    train->add_option("--epochs", ta.epochs);
    train->add_option("--seed", ta.seed);
    train->add_option("--dim", ta.dim, "embedding width d");
    train->add_option("--head-lr", ta.head_lr);
    train->add_option("--backbone-lr", ta.backbone_lr, "learning rate of the embedding table");
    train->add_option("--objective", ta.objective, "pairsupcon|classification|instance");
    train->add_option("--activation", ta.activation, "relu|identity");
    train->add_option("--hard-negatives", ta.hard_negatives, "importance-weight negatives (true|false)");
    train->add_option("--alpha-grad", ta.alpha_grad, "backpropagate through the importance weights (true|false)");

    EvalArgs ea;
    auto add_eval = [&](const char* name, const char* help, bool cluster, bool fewshot) {
        auto* c = app.add_subcommand(name, help);
        c->add_option("--checkpoint", ea.checkpoint)->required();
        c->add_option("--data", ea.data)->required();
        c->add_option("--out", ea.out, "report JSON path")->required();
        c->add_option("--vocab", ea.vocab, "vocabulary file to cross-check against the checkpoint");
        c->add_option("--seed", ea.seed);
        if (cluster) {
            c->add_option("--k", ea.k, "cluster count (default: number of distinct labels)");
            c->add_option("--runs", ea.runs, "independent K-Means runs")->check(CLI::PositiveNumber);
        }
        if (fewshot) {
            c->add_option("--shots", ea.shots, "training examples per class")->check(CLI::PositiveNumber);
            c->add_option("--sets", ea.sets, "independent training sets")->check(CLI::PositiveNumber);
        }
        return c;
    };
    auto* ecl = add_eval("eval-cluster", "K-Means clustering accuracy", true, false);
    auto* ests = add_eval("eval-sts", "Spearman correlation on scored pairs", false, false);
    auto* efs = add_eval("eval-fewshot", "few-shot logistic probe", false, true);

    SynthArgs sa;
    auto* synth = app.add_subcommand("synth", "generate a synthetic topic corpus");
    synth->add_option("--out", sa.out, "output directory")->required();
    synth->add_option("--classes", sa.cfg.classes);
    synth->add_option("--per-class", sa.cfg.per_class, "training pairs per topic");
    synth->add_option("--cross-rate", sa.cfg.cross_rate, "fraction of cross-topic contradictions");
    synth->add_option("--seed", sa.cfg.seed);
    synth->add_option("--overlap", sa.cfg.sibling_overlap, "fraction of topic 0 words shared with topic 1");
    synth->add_option("--eval-per-class", sa.cfg.eval_per_class, "held-out labeled texts per topic");
    synth->add_option("--scored-pairs", sa.cfg.scored_pairs, "also write this many scored pairs (sts.tsv)");

    GradcheckArgs ga;
    auto* grad = app.add_subcommand("gradcheck", "finite-difference check of the full loss");
    grad->add_option("--trials", ga.trials)->check(CLI::PositiveNumber);
    grad->add_option("--tolerance", ga.tolerance)->check(CLI::PositiveNumber);
    grad->add_option("--seed", ga.seed);
    grad->add_option("--out", ga.out, "directory for gradcheck.json and the manifest");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e, out, err);
        return code == 0 ? 0 : 1;
    }

    auto wrap = [&](auto&& f) {
        return [&f, &io](RunManifest& m) {
            f(m, io);
            return 0;
        };
    };
    if (train->parsed())
        return run_command("train", fs::path(ta.out) / "manifest.json", io,
                           wrap([&](RunManifest& m, Streams s) { cmd_train(ta, m, s); }));
    if (ecl->parsed())
        return run_command("eval-cluster", sidecar_manifest(ea.out), io,
                           wrap([&](RunManifest& m, Streams s) { cmd_eval_cluster(ea, m, s); }));
    if (ests->parsed())
        return run_command("eval-sts", sidecar_manifest(ea.out), io,
                           wrap([&](RunManifest& m, Streams s) { cmd_eval_sts(ea, m, s); }));
    if (efs->parsed())
        return run_command("eval-fewshot", sidecar_manifest(ea.out), io,
                           wrap([&](RunManifest& m, Streams s) { cmd_eval_fewshot(ea, m, s); }));
    if (synth->parsed())
        return run_command("synth", fs::path(sa.out) / "manifest.json", io,
                           wrap([&](RunManifest& m, Streams s) { cmd_synth(sa, m, s); }));
    std::optional<fs::path> gm;
    if (ga.out) gm = fs::path(*ga.out) / "manifest.json";
    return run_command("gradcheck", gm, io, [&](RunManifest& m) { return cmd_gradcheck(ga, m, io) ? 0 : 2; });
}

} // namespace pairsupcon::cli
