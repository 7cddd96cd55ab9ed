#include "frul/scrubber.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <mutex>
#include <set>
#include <thread>
#include <unordered_set>

#include <nlohmann/json.hpp>
#include <spdlog/spdlog.h>

#include "frul/common.hpp"
#include "frul/rng.hpp"
#include "frul/tokenizer.hpp"

namespace frul::scrub {

using nlohmann::json;

namespace {

bool is_punct_token(std::string_view t) { return t == "." || t == "," || t == "?"; }

std::vector<std::string> token_texts(std::string_view text) {
    std::vector<std::string> out;
    for (auto& p : tok::split_words(text)) out.push_back(std::move(p.text));
    return out;
}

const std::unordered_set<std::string>& stopwords() {
    static const std::unordered_set<std::string> s = {
        "a",  "an",   "the", "is",  "was", "are",   "were", "be",   "in",   "on",  "at",   "of",  "to",
        "for", "by",  "as",  "and", "or",  "with",  "from", "this", "that", "these", "it", "so",  "we",
        "who", "what", "which", "when", "where", "does", "did", "do", "has", "have", "had", "his", "her"};
    return s;
}

}  // namespace

std::vector<std::string> index_terms(std::string_view text) {
    std::vector<std::string> out;
    for (auto& p : tok::split_words(text)) {
        if (!is_punct_token(p.text)) out.push_back(std::move(p.text));
    }
    return out;
}

// ------------------------------------------------------------------ retrieval

RetrievalIndex::RetrievalIndex(std::vector<corpus::KnowledgeFact> facts, double k1, double b)
    : facts_(std::move(facts)), k1_(k1), b_(b) {
    if (facts_.empty()) throw ValidationError("cannot build a retrieval index over zero facts");
    if (!(k1_ >= 0) || !(b_ >= 0 && b_ <= 1)) throw ValidationError("BM25 needs k1 >= 0 and b in [0, 1]");
    std::size_t total = 0;
    for (std::size_t d = 0; d < facts_.size(); ++d) {
        const auto terms = index_terms(facts_[d].text);
        lengths_.push_back(terms.size());
        total += terms.size();
        std::map<std::string, int> tf;
        for (const auto& t : terms) ++tf[t];
        for (const auto& [t, n] : tf) postings_[t].push_back({d, n});
    }
    avg_len_ = static_cast<double>(total) / static_cast<double>(facts_.size());
    if (avg_len_ == 0.0) avg_len_ = 1.0;
}

double RetrievalIndex::idf(std::string_view term) const {
    auto it = postings_.find(std::string(term));
    if (it == postings_.end()) return 0.0;
    const double n = static_cast<double>(facts_.size());
    const double df = static_cast<double>(it->second.size());
    return std::log(1.0 + (n - df + 0.5) / (df + 0.5));
}

double RetrievalIndex::term_score(const std::vector<Posting>& postings, std::size_t doc, double idf) const {
    for (const auto& p : postings) {
        if (p.doc != doc) continue;
        const double tf = p.tf;
        const double norm = 1.0 - b_ + b_ * static_cast<double>(lengths_[doc]) / avg_len_;
        return idf * (tf * (k1_ + 1.0)) / (tf + k1_ * norm);
    }
    return 0.0;
}

double RetrievalIndex::score(std::string_view query, std::size_t doc) const {
    if (doc >= facts_.size()) throw ValidationError("document index out of range");
    auto terms = index_terms(query);
    std::sort(terms.begin(), terms.end());
    terms.erase(std::unique(terms.begin(), terms.end()), terms.end());
    double s = 0.0;
    for (const auto& t : terms) {
        auto it = postings_.find(t);
        if (it != postings_.end()) s += term_score(it->second, doc, idf(t));
    }
    return s;
}

std::vector<RetrievalIndex::Hit> RetrievalIndex::retrieve(std::string_view query, std::size_t k) const {
    if (k == 0) throw ValidationError("retrieve needs k >= 1");
    auto terms = index_terms(query);
    std::sort(terms.begin(), terms.end());
    terms.erase(std::unique(terms.begin(), terms.end()), terms.end());
    std::vector<double> scores(facts_.size(), 0.0);
    for (const auto& t : terms) {
        auto it = postings_.find(t);
        if (it == postings_.end()) continue;
        const double w = idf(t);
        for (const auto& p : it->second) scores[p.doc] += term_score(it->second, p.doc, w);
    }
    std::vector<Hit> hits;
    for (std::size_t d = 0; d < facts_.size(); ++d) {
        if (scores[d] > 0.0) hits.push_back({&facts_[d], scores[d]});
    }
    std::sort(hits.begin(), hits.end(), [](const Hit& a, const Hit& b) {
        if (a.score != b.score) return a.score > b.score;
        return a.fact->fact_id < b.fact->fact_id;
    });
    if (hits.size() > k) hits.resize(k);
    return hits;
}

// ---------------------------------------------------------------- extraction

std::vector<std::string> content_tokens(std::span<const std::string> tokens) {
    std::set<std::string> seen;
    for (const auto& t : tokens) {
        if (is_punct_token(t) || stopwords().count(t)) continue;
        seen.insert(t);
    }
    return {seen.begin(), seen.end()};
}

RuleExtractor::RuleExtractor(Overlap mode, double threshold) : mode_(mode), threshold_(threshold) {
    if (!(threshold >= 0.0 && threshold <= 1.0)) throw ValidationError("extractor threshold must be in [0, 1]");
}

std::string RuleExtractor::id() const { return mode_ == Overlap::Jaccard ? "rule-jaccard" : "rule-containment"; }

double RuleExtractor::overlap(Overlap mode, std::span<const std::string> sentence, std::span<const std::string> fact) {
    // both inputs are sorted and unique (content_tokens output)
    std::vector<std::string> common;
    std::set_intersection(sentence.begin(), sentence.end(), fact.begin(), fact.end(), std::back_inserter(common));
    const double inter = static_cast<double>(common.size());
    if (mode == Overlap::Jaccard) {
        const double uni = static_cast<double>(sentence.size() + fact.size()) - inter;
        return uni == 0.0 ? 0.0 : inter / uni;
    }
    return fact.empty() ? 0.0 : inter / static_cast<double>(fact.size());
}

std::vector<Span> RuleExtractor::extract(const corpus::Example& example,
                                         std::span<const corpus::KnowledgeFact> context) const {
    const auto tokens = token_texts(example.cot);
    std::vector<std::vector<std::string>> fact_terms;
    for (const auto& f : context) fact_terms.push_back(content_tokens(token_texts(f.text)));

    std::vector<Span> out;
    for (const auto& r : tok::sentence_ranges(tokens)) {
        const auto sentence =
            content_tokens(std::span<const std::string>(tokens).subspan(r.begin, r.end - r.begin));
        double best = 0.0;
        for (const auto& ft : fact_terms) best = std::max(best, overlap(mode_, sentence, ft));
        if (best >= threshold_ && best > 0.0)
            out.push_back({r.begin, r.end, span_text(tokens, r.begin, r.end), best, id()});
    }
    return out;
}

std::optional<Span> locate_segment(std::string_view cot, std::string_view segment) {
    const auto first = segment.find_first_not_of(" \t\r\n");
    if (first == std::string_view::npos) return std::nullopt;
    segment = segment.substr(first, segment.find_last_not_of(" \t\r\n") - first + 1);
    const auto pos = cot.find(segment);
    if (pos == std::string_view::npos) return std::nullopt;
    const std::size_t end_byte = pos + segment.size();

    const auto pieces = tok::split_words(cot);
    std::vector<std::string> tokens;
    for (const auto& p : pieces) tokens.push_back(p.text);
    std::size_t lo = pieces.size(), hi = 0;
    for (std::size_t i = 0; i < pieces.size(); ++i) {
        if (pieces[i].end > pos && pieces[i].begin < end_byte) {
            lo = std::min(lo, i);
            hi = i + 1;
        }
    }
    if (lo >= hi) return std::nullopt;
    for (const auto& r : tok::sentence_ranges(tokens)) {
        if (r.begin <= lo && lo < r.end) lo = r.begin;
        if (r.begin < hi && hi <= r.end) hi = r.end;
    }
    return Span{lo, hi, span_text(tokens, lo, hi), 1.0, ""};
}

RemoteExtractor::RemoteExtractor(RemoteConfig config) : config_(std::move(config)) {
    if (config_.endpoint.empty()) throw ValidationError("remote extractor needs an endpoint");
}

std::vector<Span> RemoteExtractor::extract(const corpus::Example& example,
                                           std::span<const corpus::KnowledgeFact> context) const {
    auto result = remote_extract(config_, example, context);
    for (const auto& w : result.warnings) spdlog::warn("{}: {}: {}", config_.id, example.id, w);
    return std::move(result.spans);
}

std::vector<std::shared_ptr<const Extractor>> default_extractors() {
    return {std::make_shared<RuleExtractor>(RuleExtractor::Overlap::Jaccard),
            std::make_shared<RuleExtractor>(RuleExtractor::Overlap::Containment)};
}

// --------------------------------------------------------------- aggregation

std::string span_text(std::span<const std::string> cot_tokens, std::size_t start, std::size_t end) {
    std::string out;
    for (std::size_t i = start; i < end && i < cot_tokens.size(); ++i) {
        if (i > start) out += ' ';
        out += cot_tokens[i];
    }
    return out;
}

std::vector<Span> aggregate_spans(const std::vector<std::vector<Span>>& per_extractor,
                                  std::span<const double> weights, double vote_threshold,
                                  std::span<const std::string> cot_tokens) {
    if (weights.size() != per_extractor.size())
        throw ValidationError("aggregation has " + std::to_string(per_extractor.size()) + " extractor outputs but " +
                              std::to_string(weights.size()) + " weights");
    double weight_sum = 0.0;
    for (double w : weights) {
        if (!(w >= 0.0)) throw ValidationError("aggregation weights must be non-negative");
        weight_sum += w;
    }
    if (weight_sum == 0.0) throw ValidationError("aggregation weights are all zero");

    const std::size_t n = cot_tokens.size();
    std::vector<double> score(n, 0.0);
    for (std::size_t e = 0; e < per_extractor.size(); ++e) {
        for (const auto& s : per_extractor[e]) {
            if (s.start >= s.end || s.end > n) throw ValidationError("extractor span outside the reasoning trace");
            for (std::size_t t = s.start; t < s.end; ++t) score[t] += weights[e] * s.confidence;
        }
    }

    const auto sentences = tok::sentence_ranges(cot_tokens);
    auto sentence_of = [&](std::size_t t) -> const tok::TokenRange& {
        for (const auto& r : sentences)
            if (r.begin <= t && t < r.end) return r;
        throw ValidationError("token outside every sentence");
    };

    std::vector<Span> out;
    std::size_t t = 0;
    while (t < n) {
        if (score[t] < vote_threshold) {
            ++t;
            continue;
        }
        std::size_t run_end = t;
        while (run_end < n && score[run_end] >= vote_threshold) ++run_end;
        const std::size_t lo = sentence_of(t).begin;
        const std::size_t hi = sentence_of(run_end - 1).end;
        if (!out.empty() && lo < out.back().end) {
            // widened into the previous span's last sentence
            out.back().end = std::max(out.back().end, hi);
        } else {
            out.push_back({lo, hi, "", 0.0, "aggregate"});
        }
        t = run_end;
    }
    for (auto& s : out) {
        double sum = 0.0;
        std::size_t kept = 0;
        for (std::size_t i = s.start; i < s.end; ++i) {
            if (score[i] >= vote_threshold) {
                sum += score[i];
                ++kept;
            }
        }
        s.confidence = std::min(1.0, sum / static_cast<double>(kept));
        s.text = span_text(cot_tokens, s.start, s.end);
    }
    return out;
}

// --------------------------------------------------------------- replacement

PlaceholderPolicy parse_policy(std::string_view s) {
    if (s == "sequential") return PlaceholderPolicy::Sequential;
    if (s == "shuffled") return PlaceholderPolicy::Shuffled;
    throw ValidationError("unknown placeholder policy '" + std::string(s) + "' (expected sequential or shuffled)");
}

std::string_view policy_name(PlaceholderPolicy p) {
    return p == PlaceholderPolicy::Sequential ? "sequential" : "shuffled";
}

ScrubbedExample replace_segments(const corpus::Example& example, const std::vector<Span>& spans,
                                 std::span<const corpus::KnowledgeFact> value_facts, PlaceholderPolicy policy,
                                 std::uint64_t seed) {
    const auto pieces = tok::split_words(example.cot);
    std::vector<std::string> tokens;
    for (const auto& p : pieces) tokens.push_back(p.text);
    for (std::size_t i = 0; i < spans.size(); ++i) {
        if (spans[i].start >= spans[i].end || spans[i].end > tokens.size())
            throw ValidationError("span outside the reasoning of " + example.id);
        if (i > 0 && spans[i].start < spans[i - 1].end)
            throw ValidationError("spans of " + example.id + " overlap or are unsorted");
    }

    struct Candidate {
        std::string value;
        std::vector<std::string> tokens;
        bool person;
    };
    std::vector<Candidate> candidates;
    std::set<std::string> seen;
    for (const auto& f : value_facts) {
        if (!seen.insert(f.value).second) continue;
        auto vt = token_texts(f.value);
        if (vt.empty()) continue;
        candidates.push_back(
            {f.value, std::move(vt), f.attribute == corpus::Attribute::Name || f.attribute == corpus::Attribute::Mentor});
    }
    std::sort(candidates.begin(), candidates.end(), [](const Candidate& a, const Candidate& b) {
        if (a.tokens.size() != b.tokens.size()) return a.tokens.size() > b.tokens.size();
        return a.value < b.value;
    });

    std::vector<std::size_t> person_order(tok::person_placeholders().size());
    std::vector<std::size_t> value_order(tok::value_placeholders().size());
    for (std::size_t i = 0; i < person_order.size(); ++i) person_order[i] = i;
    for (std::size_t i = 0; i < value_order.size(); ++i) value_order[i] = i;
    if (policy == PlaceholderPolicy::Shuffled) {
        Rng rng(seed ^ fnv1a64(example.id));
        shuffle_in_place(person_order, rng);
        shuffle_in_place(value_order, rng);
    }
    std::size_t next_person = 0, next_value = 0;

    ScrubbedExample out;
    out.example_id = example.id;
    out.spans = spans;
    for (auto& s : out.spans) s.text = span_text(tokens, s.start, s.end);

    auto placeholder_for = [&](const Candidate& c) -> const std::string& {
        auto it = out.placeholder_map.find(c.value);
        if (it != out.placeholder_map.end()) return it->second;
        std::string ph;
        if (c.person) {
            if (next_person >= person_order.size())
                throw RuntimeFailure("person placeholder pool exhausted in " + example.id);
            ph = tok::person_placeholders()[person_order[next_person++]];
        } else {
            if (next_value >= value_order.size())
                throw RuntimeFailure("value placeholder pool exhausted in " + example.id);
            ph = tok::value_placeholders()[value_order[next_value++]];
        }
        return out.placeholder_map.emplace(c.value, std::move(ph)).first->second;
    };

    std::string text;
    std::size_t copied = 0;  // bytes of the original already emitted
    for (const auto& s : spans) {
        std::size_t i = s.start;
        while (i < s.end) {
            const Candidate* hit = nullptr;
            for (const auto& c : candidates) {
                if (i + c.tokens.size() > s.end) continue;
                if (std::equal(c.tokens.begin(), c.tokens.end(), tokens.begin() + static_cast<std::ptrdiff_t>(i))) {
                    hit = &c;
                    break;
                }
            }
            if (!hit) {
                ++i;
                continue;
            }
            const std::size_t last = i + hit->tokens.size() - 1;
            text.append(example.cot, copied, pieces[i].begin - copied);
            text += placeholder_for(*hit);
            copied = pieces[last].end;
            i = last + 1;
        }
    }
    text.append(example.cot, copied, std::string::npos);
    out.cot_modified = std::move(text);
    return out;
}

// ---------------------------------------------------------------- persistence

namespace {

json to_json(const ScrubbedExample& s) {
    json spans = json::array();
    for (const auto& sp : s.spans)
        spans.push_back({{"start", sp.start}, {"end", sp.end}, {"text", sp.text}, {"confidence", sp.confidence},
                         {"source", sp.source}});
    json map = json::object();
    for (const auto& [k, v] : s.placeholder_map) map[k] = v;
    return {{"example_id", s.example_id}, {"spans", spans}, {"cot_modified", s.cot_modified},
            {"placeholder_map", map}};
}

ScrubbedExample from_json(const json& j) {
    ScrubbedExample s;
    s.example_id = j.at("example_id").get<std::string>();
    for (const auto& sp : j.at("spans")) {
        Span x;
        x.start = sp.at("start").get<std::size_t>();
        x.end = sp.at("end").get<std::size_t>();
        x.text = sp.at("text").get<std::string>();
        x.confidence = sp.at("confidence").get<double>();
        x.source = sp.at("source").get<std::string>();
        if (x.start >= x.end) throw ValidationError("span with start >= end");
        s.spans.push_back(std::move(x));
    }
    s.cot_modified = j.at("cot_modified").get<std::string>();
    for (const auto& [k, v] : j.at("placeholder_map").items()) s.placeholder_map[k] = v.get<std::string>();
    return s;
}

}  // namespace

std::string scrubbed_to_jsonl(const std::vector<ScrubbedExample>& examples) {
    std::string out;
    for (const auto& s : examples) {
        out += to_json(s).dump();
        out += '\n';
    }
    return out;
}

std::vector<ScrubbedExample> scrubbed_from_jsonl(std::string_view text) {
    std::vector<ScrubbedExample> out;
    std::unordered_set<std::string> ids;
    const auto lines = split_lines(text);
    for (std::size_t i = 0; i < lines.size(); ++i) {
        if (lines[i].find_first_not_of(" \t\r") == std::string::npos) continue;
        try {
            auto s = from_json(json::parse(lines[i]));
            if (!ids.insert(s.example_id).second) throw ValidationError("duplicate example_id '" + s.example_id + "'");
            out.push_back(std::move(s));
        } catch (const json::exception& e) {
            throw ValidationError("line " + std::to_string(i + 1) + ": malformed scrubbed record (" + e.what() + ")");
        } catch (const ValidationError& e) {
            throw ValidationError("line " + std::to_string(i + 1) + ": " + e.what());
        }
    }
    return out;
}

void write_scrubbed(const std::vector<ScrubbedExample>& examples, const std::filesystem::path& path) {
    write_file_atomic(path, scrubbed_to_jsonl(examples));
}

std::vector<ScrubbedExample> read_scrubbed(const std::filesystem::path& path) {
    return scrubbed_from_jsonl(read_file(path));
}

// ---------------------------------------------------------------- pipeline

namespace {

std::string cache_key(const std::vector<corpus::Example>& forget, const std::vector<corpus::KnowledgeFact>& kb,
                      const std::vector<std::shared_ptr<const Extractor>>& extractors, const ScrubConfig& c) {
    json j = {{"version", 1},
              {"weights", c.weights},
              {"vote_threshold", c.vote_threshold},
              {"top_k", c.top_k},
              {"policy", std::string(policy_name(c.policy))},
              {"seed", c.seed}};
    json ids = json::array();
    for (const auto& e : extractors) ids.push_back(e->id());
    j["extractors"] = ids;
    const std::string payload = j.dump() + corpus::examples_to_jsonl(forget) + corpus::facts_to_jsonl(kb);
    return hex64(fnv1a64(payload));
}

std::filesystem::path meta_path(const std::filesystem::path& cache) {
    auto p = cache;
    p += ".meta.json";
    return p;
}

}  // namespace

ScrubResult scrub_corpus(const corpus::Corpus& corpus, const corpus::Split& split,
                         const std::vector<std::shared_ptr<const Extractor>>& extractors, const ScrubConfig& config) {
    if (extractors.empty()) throw ValidationError("scrubbing needs at least one extractor");
    if (config.weights.size() != extractors.size())
        throw ValidationError("scrub config has " + std::to_string(config.weights.size()) + " weights for " +
                              std::to_string(extractors.size()) + " extractors");
    if (config.top_k == 0) throw ValidationError("retrieval top_k must be >= 1");

    auto forget = corpus::select(corpus, split.forget_ids);
    std::sort(forget.begin(), forget.end(),
              [](const corpus::Example& a, const corpus::Example& b) { return a.id < b.id; });
    const auto kb = corpus::forget_knowledge_base(corpus, split);
    const std::string key = cache_key(forget, kb, extractors, config);

    ScrubResult result;
    std::map<std::string, ScrubbedExample> done;
    if (config.cache_path && std::filesystem::exists(*config.cache_path) &&
        std::filesystem::exists(meta_path(*config.cache_path))) {
        json meta;
        try {
            meta = json::parse(read_file(meta_path(*config.cache_path)));
        } catch (const json::exception&) {
            meta = json::object();
        }
        if (meta.value("key", std::string()) == key) {
            for (auto& s : read_scrubbed(*config.cache_path)) done.emplace(s.example_id, std::move(s));
        } else {
            spdlog::info("scrub cache key changed; recomputing all records");
        }
    }

    std::vector<const corpus::Example*> pending;
    for (const auto& e : forget) {
        if (done.count(e.id))
            ++result.cache_hits;
        else
            pending.push_back(&e);
    }

    if (!pending.empty()) {
        const RetrievalIndex index(kb);
        std::mutex mu;
        std::atomic<std::size_t> next{0};
        auto worker = [&] {
            for (std::size_t i = next++; i < pending.size(); i = next++) {
                const auto& ex = *pending[i];
                try {
                    std::vector<corpus::KnowledgeFact> context;
                    for (const auto& h : index.retrieve(ex.question + " " + ex.cot, config.top_k))
                        context.push_back(*h.fact);
                    std::vector<std::vector<Span>> per;
                    for (const auto& x : extractors) per.push_back(x->extract(ex, context));
                    const auto tokens = token_texts(ex.cot);
                    auto spans = aggregate_spans(per, config.weights, config.vote_threshold, tokens);
                    std::vector<corpus::KnowledgeFact> values;
                    for (const auto& f : kb)
                        if (f.entity_id == ex.entity_id) values.push_back(f);
                    values.insert(values.end(), context.begin(), context.end());
                    auto scrubbed = replace_segments(ex, spans, values, config.policy, config.seed);
                    std::lock_guard lock(mu);
                    done.emplace(ex.id, std::move(scrubbed));
                } catch (const ValidationError&) {
                    throw;
                } catch (const std::exception& err) {
                    std::lock_guard lock(mu);
                    result.failures.push_back({ex.id, err.what()});
                }
            }
        };
        const std::size_t n_threads = std::clamp<std::size_t>(config.max_in_flight, 1, pending.size());
        if (n_threads == 1) {
            worker();
        } else {
            std::vector<std::thread> threads;
            std::exception_ptr first_error;
            for (std::size_t t = 0; t < n_threads; ++t) {
                threads.emplace_back([&] {
                    try {
                        worker();
                    } catch (...) {
                        std::lock_guard lock(mu);
                        if (!first_error) first_error = std::current_exception();
                        next = pending.size();
                    }
                });
            }
            for (auto& th : threads) th.join();
            if (first_error) std::rethrow_exception(first_error);
        }
    }

    for (auto& [id, s] : done) result.examples.push_back(s);
    std::sort(result.failures.begin(), result.failures.end(),
              [](const ScrubFailure& a, const ScrubFailure& b) { return a.example_id < b.example_id; });

    if (config.cache_path) {
        write_scrubbed(result.examples, *config.cache_path);
        json failed = json::array();
        for (const auto& f : result.failures) failed.push_back(f.example_id);
        json meta = {{"version", 1}, {"key", key}, {"records", result.examples.size()}, {"failed", failed}};
        write_file_atomic(meta_path(*config.cache_path), meta.dump(2) + "\n");
    }
    return result;
}

}  // namespace frul::scrub
