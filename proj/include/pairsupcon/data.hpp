#pragma once

// Corpora: NLI-style pairs (JSONL), labeled texts (JSONL), scored pairs (TSV), pair batching,
// and a seeded synthetic topic corpus generator.

#include <algorithm>
#include <cctype>
#include <charconv>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "pairsupcon/encoder.hpp"
#include "pairsupcon/error.hpp"
#include "pairsupcon/losses.hpp"
#include "pairsupcon/random.hpp"

namespace pairsupcon {

struct SentencePair {
    std::string premise;
    std::string hypothesis;
    int label = 1;  // +1 entailment, -1 contradiction

    friend bool operator==(const SentencePair&, const SentencePair&) = default;
};

struct LabeledText {
    std::string text;
    std::size_t class_id = 0;
};

struct ScoredPair {
    std::string first;
    std::string second;
    double score = 0.0;  // gold similarity in [0, 5]
};

namespace data_detail {

inline std::string lower(std::string s) {
    for (char& c : s) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    return s;
}

inline std::string where(const std::string& source, std::size_t lineno) {
    return source + ":" + std::to_string(lineno) + ": ";
}

inline std::string string_field(const nlohmann::json& obj, const char* key, const std::string& at) {
    auto it = obj.find(key);
    detail::require(it != obj.end(), at + "missing field '" + key + "'");
    detail::require(it->is_string(), at + "field '" + key + "' is not a string");
    return it->get<std::string>();
}

inline nlohmann::json parse_object(std::string_view line, const std::string& at) {
    nlohmann::json obj = nlohmann::json::parse(line, nullptr, false);
    detail::require(!obj.is_discarded(), at + "malformed JSON");
    detail::require(obj.is_object(), at + "record is not a JSON object");
    return obj;
}

template <typename F>
void for_each_line(const std::string& path, F&& f) {
    std::ifstream in(path, std::ios::binary);
    detail::require(bool(in), "cannot open " + path);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.find_first_not_of(" \t") == std::string::npos) continue;
        f(line, lineno);
    }
}

inline std::ofstream open_out(const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    detail::require(bool(out), "cannot write " + path);
    return out;
}

} // namespace data_detail

// One NLI JSONL record. Neutral pairs come back as nullopt; they are excluded from training.
inline std::optional<SentencePair> parse_nli_record(std::string_view line, std::size_t lineno = 1,
                                                    const std::string& source = "<input>") {
    const std::string at = data_detail::where(source, lineno);
    const nlohmann::json obj = data_detail::parse_object(line, at);
    SentencePair p;
    p.premise = data_detail::string_field(obj, "premise", at);
    p.hypothesis = data_detail::string_field(obj, "hypothesis", at);
    const std::string label = data_detail::lower(data_detail::string_field(obj, "label", at));
    if (label == "neutral") return std::nullopt;
    if (label == "entailment")
        p.label = 1;
    else if (label == "contradiction")
        p.label = -1;
    else
        detail::fail(at + "unknown label '" + label + "'");
    detail::require(!split_words(p.premise).empty(), at + "premise is empty");
    detail::require(!split_words(p.hypothesis).empty(), at + "hypothesis is empty");
    return p;
}

struct NliCorpus {
    std::vector<SentencePair> pairs;
    std::size_t neutral_skipped = 0;
};

inline NliCorpus load_nli(const std::string& path) {
    NliCorpus c;
    data_detail::for_each_line(path, [&](const std::string& line, std::size_t lineno) {
        if (auto p = parse_nli_record(line, lineno, path))
            c.pairs.push_back(std::move(*p));
        else
            ++c.neutral_skipped;
    });
    return c;
}

struct LabeledCorpus {
    std::vector<std::string> texts;
    std::vector<std::size_t> labels;
    std::vector<std::string> class_names;  // index = class id, in first-seen order

    std::size_t size() const noexcept { return texts.size(); }
    std::size_t num_classes() const noexcept { return class_names.size(); }
};

inline LabeledCorpus load_labeled(const std::string& path) {
    LabeledCorpus c;
    std::map<std::string, std::size_t> ids;
    data_detail::for_each_line(path, [&](const std::string& line, std::size_t lineno) {
        const std::string at = data_detail::where(path, lineno);
        const nlohmann::json obj = data_detail::parse_object(line, at);
        std::string text = data_detail::string_field(obj, "text", at);
        std::string label = data_detail::string_field(obj, "label", at);
        auto [it, fresh] = ids.try_emplace(label, c.class_names.size());
        if (fresh) c.class_names.push_back(label);
        c.texts.push_back(std::move(text));
        c.labels.push_back(it->second);
    });
    return c;
}

inline ScoredPair parse_scored_line(std::string_view line, std::size_t lineno = 1,
                                    const std::string& source = "<input>") {
    const std::string at = data_detail::where(source, lineno);
    const auto t1 = line.find('\t');
    const auto t2 = t1 == std::string_view::npos ? t1 : line.find('\t', t1 + 1);
    detail::require(t2 != std::string_view::npos && line.find('\t', t2 + 1) == std::string_view::npos,
                    at + "expected 3 tab-separated fields");
    ScoredPair p;
    p.first = std::string(line.substr(0, t1));
    p.second = std::string(line.substr(t1 + 1, t2 - t1 - 1));
    std::string_view num = line.substr(t2 + 1);
    while (!num.empty() && std::isspace(static_cast<unsigned char>(num.back()))) num.remove_suffix(1);
    while (!num.empty() && std::isspace(static_cast<unsigned char>(num.front()))) num.remove_prefix(1);
    const auto [ptr, ec] = std::from_chars(num.data(), num.data() + num.size(), p.score);
    detail::require(ec == std::errc{} && ptr == num.data() + num.size(),
                    at + "score '" + std::string(num) + "' is not a number");
    detail::require(p.score >= 0.0 && p.score <= 5.0, at + "score " + std::string(num) + " outside [0, 5]");
    return p;
}

inline std::vector<ScoredPair> load_scored(const std::string& path) {
    std::vector<ScoredPair> out;
    data_detail::for_each_line(path, [&](const std::string& line, std::size_t lineno) {
        out.push_back(parse_scored_line(line, lineno, path));
    });
    return out;
}

inline void write_nli(const std::string& path, std::span<const SentencePair> pairs) {
    auto out = data_detail::open_out(path);
    for (const auto& p : pairs) {
        nlohmann::ordered_json j;
        j["premise"] = p.premise;
        j["hypothesis"] = p.hypothesis;
        j["label"] = p.label == 1 ? "entailment" : "contradiction";
        out << j.dump() << '\n';
    }
}

inline void write_labeled(const std::string& path, std::span<const LabeledText> items,
                          std::span<const std::string> class_names) {
    auto out = data_detail::open_out(path);
    for (const auto& t : items) {
        nlohmann::ordered_json j;
        j["text"] = t.text;
        j["label"] = class_names[t.class_id];
        out << j.dump() << '\n';
    }
}

inline void write_scored(const std::string& path, std::span<const ScoredPair> pairs) {
    auto out = data_detail::open_out(path);
    char buf[32];
    for (const auto& p : pairs) {
        auto [end, ec] = std::to_chars(buf, buf + sizeof buf, p.score);
        out << p.first << '\t' << p.second << '\t' << std::string_view(buf, end - buf) << '\n';
    }
}

// ---- batching --------------------------------------------------------------------------------

struct PairBatch {
    std::vector<std::size_t> pair_indices;  // into the dataset; pair j -> rows 2j, 2j+1
    BatchLabels labels;

    std::size_t size() const noexcept { return pair_indices.size(); }
};

// One epoch: a seeded uniform shuffle cut into batches of M. A short final batch is kept only
// when it contains a positive pair.
inline std::vector<PairBatch> make_batches(std::span<const SentencePair> pairs, std::size_t batch_size,
                                           std::uint64_t seed) {
    detail::require(batch_size >= 2, "make_batches: batch size must be >= 2");
    detail::require(pairs.size() >= batch_size, "make_batches: " + std::to_string(pairs.size()) +
                                                    " pairs is fewer than batch size " + std::to_string(batch_size));
    const bool any_positive = std::any_of(pairs.begin(), pairs.end(), [](const auto& p) { return p.label == 1; });
    detail::require(any_positive, "make_batches: dataset has no entailment pairs");

    std::vector<std::size_t> order(pairs.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng rng(seed);
    rng.shuffle(std::span(order));

    std::vector<PairBatch> batches;
    for (std::size_t start = 0; start < order.size(); start += batch_size) {
        const std::size_t end = std::min(order.size(), start + batch_size);
        PairBatch b;
        std::vector<int> y;
        for (std::size_t k = start; k < end; ++k) {
            b.pair_indices.push_back(order[k]);
            y.push_back(pairs[order[k]].label);
        }
        b.labels = BatchLabels(std::move(y));
        if (b.size() < batch_size && b.labels.positives() == 0) break;
        batches.push_back(std::move(b));
    }
    return batches;
}

// ---- synthetic topic corpus ------------------------------------------------------------------

struct SynthConfig {
    std::size_t classes = 8;
    std::size_t per_class = 500;       // training pairs whose premise is drawn from each topic
    double cross_rate = 0.5;           // P(contradiction hypothesis comes from another topic)
    std::uint64_t seed = 0;
    double entailment_rate = 0.5;
    std::size_t topic_words = 24;      // vocabulary size per topic
    std::size_t words_per_sentence = 6;
    std::size_t shared_words = 3;      // topic words a same-topic hypothesis copies from its premise
    std::size_t filler_words = 16;     // topic-neutral words shared by all topics
    std::size_t fillers_per_sentence = 2;
    std::size_t stance_words = 1;      // per polarity; entailment keeps polarity, contradiction flips it
    double sibling_overlap = 0.0;      // fraction of topic 1's vocabulary copied from topic 0
    std::size_t eval_per_class = 100;  // held-out labeled texts per topic
    std::size_t scored_pairs = 0;      // similarity-scored pairs for STS-style evaluation
};

struct SynthCorpus {
    std::vector<SentencePair> pairs;
    std::vector<std::pair<std::size_t, std::size_t>> pair_topics;  // (premise, hypothesis) topic
    std::vector<LabeledText> labeled;
    std::vector<std::string> class_names;
    std::vector<ScoredPair> scored;

    // fraction of contradiction pairs whose two sides come from different topics
    double cross_fraction() const {
        std::size_t contra = 0, cross = 0;
        for (std::size_t k = 0; k < pairs.size(); ++k)
            if (pairs[k].label == -1) {
                ++contra;
                cross += pair_topics[k].first != pair_topics[k].second;
            }
        return contra ? static_cast<double>(cross) / static_cast<double>(contra) : 0.0;
    }

    LabeledCorpus labeled_corpus() const {
        LabeledCorpus c;
        c.class_names = class_names;
        for (const auto& t : labeled) {
            c.texts.push_back(t.text);
            c.labels.push_back(t.class_id);
        }
        return c;
    }
};

namespace synth_detail {

inline std::string two_digits(std::size_t n) { return (n < 10 ? "0" : "") + std::to_string(n); }

class Generator {
public:
    Generator(const SynthConfig& cfg) : cfg_(cfg), rng_(cfg.seed) {
        topics_.resize(cfg.classes);
        const auto shared = static_cast<std::size_t>(cfg.sibling_overlap * static_cast<double>(cfg.topic_words) + 0.5);
        for (std::size_t t = 0; t < cfg.classes; ++t)
            for (std::size_t w = 0; w < cfg.topic_words; ++w)
                topics_[t].push_back(t == 1 && w < shared ? topics_[0][w]
                                                          : "t" + std::to_string(t) + "w" + two_digits(w));
        for (std::size_t w = 0; w < cfg.filler_words; ++w) fillers_.push_back("f" + two_digits(w));
        for (std::size_t w = 0; w < cfg.stance_words; ++w) {
            pos_.push_back("pos" + std::to_string(w));
            neg_.push_back("neg" + std::to_string(w));
        }
    }

    struct Sentence {
        std::vector<std::string> topic;
        std::vector<std::string> rest;
    };

    std::vector<std::string> topic_words(std::size_t t, std::size_t n) {
        std::vector<std::string> w;
        for (std::size_t k = 0; k < n; ++k) w.push_back(pick(topics_[t]));
        return w;
    }

    Sentence sentence(std::size_t topic, bool positive_stance, std::vector<std::string> keep = {}) {
        Sentence s;
        s.topic = std::move(keep);
        while (s.topic.size() < cfg_.words_per_sentence) s.topic.push_back(pick(topics_[topic]));
        for (std::size_t k = 0; k < cfg_.fillers_per_sentence; ++k) s.rest.push_back(pick(fillers_));
        s.rest.push_back(pick(positive_stance ? pos_ : neg_));
        return s;
    }

    std::string render(Sentence s) {
        std::vector<std::string> all = std::move(s.topic);
        all.insert(all.end(), s.rest.begin(), s.rest.end());
        rng_.shuffle(std::span(all));
        std::string out;
        for (const auto& w : all) out += (out.empty() ? "" : " ") + w;
        return out + ".";
    }

    std::vector<std::string> copied(const Sentence& premise) {
        std::vector<std::string> pool = premise.topic;
        rng_.shuffle(std::span(pool));
        pool.resize(std::min(cfg_.shared_words, pool.size()));
        return pool;
    }

    SynthCorpus run() {
        SynthCorpus c;
        for (std::size_t t = 0; t < cfg_.classes; ++t) c.class_names.push_back("topic" + std::to_string(t));
        for (std::size_t t = 0; t < cfg_.classes; ++t) {
            for (std::size_t k = 0; k < cfg_.per_class; ++k) {
                const bool stance = rng_.bernoulli(0.5);
                Sentence prem = sentence(t, stance);
                const bool entail = rng_.bernoulli(cfg_.entailment_rate);
                std::size_t ht = t;
                if (!entail && rng_.bernoulli(cfg_.cross_rate)) {
                    ht = rng_.index(cfg_.classes - 1);
                    if (ht >= t) ++ht;
                }
                Sentence hyp = ht == t ? sentence(t, entail ? stance : !stance, copied(prem))
                                       : sentence(ht, !stance);
                c.pairs.push_back({render(prem), render(hyp), entail ? 1 : -1});
                c.pair_topics.emplace_back(t, ht);
            }
        }
        // interleave topics so the file order carries no structure
        std::vector<std::size_t> order(c.pairs.size());
        for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
        rng_.shuffle(std::span(order));
        SynthCorpus shuffled;
        shuffled.class_names = c.class_names;
        for (std::size_t i : order) {
            shuffled.pairs.push_back(c.pairs[i]);
            shuffled.pair_topics.push_back(c.pair_topics[i]);
        }
        for (std::size_t t = 0; t < cfg_.classes; ++t)
            for (std::size_t k = 0; k < cfg_.eval_per_class; ++k)
                shuffled.labeled.push_back({render(sentence(t, rng_.bernoulli(0.5))), t});
        for (std::size_t k = 0; k < cfg_.scored_pairs; ++k) shuffled.scored.push_back(scored_pair());
        return shuffled;
    }

    // Gold similarity: 5 * Jaccard overlap of the two word sets.
    ScoredPair scored_pair() {
        const std::size_t t = rng_.index(cfg_.classes);
        Sentence a = sentence(t, rng_.bernoulli(0.5));
        const std::size_t tb = rng_.bernoulli(0.5) ? t : rng_.index(cfg_.classes);
        std::vector<std::string> keep;
        if (tb == t) {
            keep = a.topic;
            rng_.shuffle(std::span(keep));
            keep.resize(rng_.index(keep.size() + 1));
        }
        Sentence b = sentence(tb, rng_.bernoulli(0.5), std::move(keep));
        auto words = [](const Sentence& s) {
            std::vector<std::string> w = s.topic;
            w.insert(w.end(), s.rest.begin(), s.rest.end());
            std::sort(w.begin(), w.end());
            w.erase(std::unique(w.begin(), w.end()), w.end());
            return w;
        };
        const auto wa = words(a);
        const auto wb = words(b);
        std::vector<std::string> inter, uni;
        std::set_intersection(wa.begin(), wa.end(), wb.begin(), wb.end(), std::back_inserter(inter));
        std::set_union(wa.begin(), wa.end(), wb.begin(), wb.end(), std::back_inserter(uni));
        const double score = std::round(500.0 * static_cast<double>(inter.size()) / static_cast<double>(uni.size())) / 100.0;
        return {render(std::move(a)), render(std::move(b)), score};
    }

private:
    const std::string& pick(const std::vector<std::string>& from) { return from[rng_.index(from.size())]; }

    SynthConfig cfg_;
    Rng rng_;
    std::vector<std::vector<std::string>> topics_;
    std::vector<std::string> fillers_, pos_, neg_;
};

} // namespace synth_detail

inline SynthCorpus synth_generate(const SynthConfig& cfg) {
    detail::require(cfg.classes >= 2, "synth_generate: need at least 2 classes");
    detail::require(cfg.cross_rate >= 0.0 && cfg.cross_rate <= 1.0, "synth_generate: cross-rate must be in [0, 1]");
    detail::require(cfg.entailment_rate > 0.0 && cfg.entailment_rate <= 1.0,
                    "synth_generate: entailment rate must be in (0, 1]");
    detail::require(cfg.sibling_overlap >= 0.0 && cfg.sibling_overlap < 1.0,
                    "synth_generate: sibling overlap must be in [0, 1); 1 makes two topics identical");
    detail::require(cfg.topic_words >= 1 && cfg.words_per_sentence >= 1 && cfg.stance_words >= 1,
                    "synth_generate: empty topic or stance vocabulary");
    detail::require(cfg.filler_words >= 1 || cfg.fillers_per_sentence == 0, "synth_generate: no filler words");
    detail::require(cfg.per_class >= 1, "synth_generate: per-class count must be >= 1");
    return synth_detail::Generator(cfg).run();
}

} // namespace pairsupcon
