#include <doctest.h>

#include <cmath>
#include <random>

#include "frul/common.hpp"
#include "frul/scrubber.hpp"
#include "helpers.hpp"

using namespace frul;
using namespace frul::scrub;
using corpus::Attribute;
using corpus::KnowledgeFact;

namespace {

KnowledgeFact fact(std::string id, std::string entity, Attribute a, std::string value, std::string text) {
    return {std::move(id), std::move(entity), a, std::move(value), std::move(text)};
}

std::vector<std::string> words(std::string_view text) {
    std::vector<std::string> out;
    for (auto& p : tok::split_words(text)) out.push_back(p.text);
    return out;
}

corpus::Example example(std::string cot) {
    corpus::Example e;
    e.id = "ex";
    e.entity_id = "ent0000";
    e.question = "when was alice born ?";
    e.cot = std::move(cot);
    e.answer = "1901";
    return e;
}

}  // namespace

TEST_CASE("BM25 score matches the Okapi formula on a toy corpus") {
    const RetrievalIndex index({fact("d1", "e", Attribute::Name, "alice", "alice met alice in paris ."),
                                fact("d2", "e", Attribute::City, "rome", "bob lives in rome .")});
    // lengths 5 and 4 (punctuation not indexed), average 4.5; "alice" has tf 2 in d1
    const double idf = std::log(1.0 + (2 - 1 + 0.5) / (1 + 0.5));
    const double expected = idf * (2 * 2.2) / (2 + 1.2 * (1 - 0.75 + 0.75 * 5 / 4.5));
    CHECK(std::abs(index.score("alice", 0) - expected) <= 1e-9);
    CHECK(index.score("alice", 1) == 0.0);
    CHECK(index.average_length() == doctest::Approx(4.5));

    // "in" occurs in both documents: idf = ln(1 + 0.5 / 2.5)
    const double idf_in = std::log(1.0 + 0.5 / 2.5);
    CHECK(std::abs(index.idf("in") - idf_in) <= 1e-12);
    const double in_d2 = idf_in * 2.2 / (1 + 1.2 * (1 - 0.75 + 0.75 * 4 / 4.5));
    const double rome = idf * 2.2 / (1 + 1.2 * (1 - 0.75 + 0.75 * 4 / 4.5));
    CHECK(std::abs(index.score("rome in rome", 1) - (in_d2 + rome)) <= 1e-9);
    CHECK(index.idf("zebra") == 0.0);
    for (const auto& t : {"alice", "met", "in", "paris", "bob", "lives", "rome"}) CHECK(std::isfinite(index.idf(t)));
}

TEST_CASE("BM25 index construction and retrieval contracts") {
    CHECK_THROWS_AS(RetrievalIndex({}), ValidationError);
    const RetrievalIndex one({fact("f", "e", Attribute::City, "oslo", "carol lives in oslo .")});
    for (const auto& q : {"oslo", "who lives where", "carol", "in"}) {
        const auto hits = one.retrieve(q, 3);
        REQUIRE(hits.size() == 1);
        CHECK(hits[0].fact->fact_id == "f");
    }
    CHECK(one.retrieve("zebra . ,", 3).empty());
    CHECK_THROWS_AS(one.retrieve("oslo", 0), ValidationError);

    // ties break by fact_id; k truncates
    const RetrievalIndex twins({fact("b", "e", Attribute::City, "x", "same words here ."),
                                fact("a", "e", Attribute::City, "x", "same words here ."),
                                fact("c", "e", Attribute::City, "x", "other text entirely .")});
    const auto hits = twins.retrieve("same words", 5);
    REQUIRE(hits.size() == 2);
    CHECK(hits[0].fact->fact_id == "a");
    CHECK(hits[1].fact->fact_id == "b");
    CHECK(hits[0].score == hits[1].score);
    CHECK(twins.retrieve("same words", 1).size() == 1);
}

TEST_CASE("retrieval is deterministic and exact fact text ranks first") {
    const auto c = corpus::generate_corpus({100, 4, 1});
    const RetrievalIndex a(c.facts), b(c.facts);
    std::mt19937_64 rng(3);
    int hits = 0;
    for (int q = 0; q < 100; ++q) {
        const auto& f = c.facts[rng() % c.facts.size()];
        const auto ra = a.retrieve(f.text, 5);
        const auto rb = b.retrieve(f.text, 5);
        REQUIRE(ra.size() == rb.size());
        for (std::size_t i = 0; i < ra.size(); ++i) {
            CHECK(ra[i].fact->fact_id == rb[i].fact->fact_id);
            CHECK(ra[i].score == rb[i].score);
        }
        hits += !ra.empty() && ra[0].fact->fact_id == f.fact_id;
    }
    CHECK(hits == 100);
}

TEST_CASE("rule extractor") {
    const auto kb = std::vector{fact("ent0000-birth_year", "ent0000", Attribute::BirthYear, "1901", "alice was born in 1901 .")};
    const auto ex = example("we should recall the record . alice was born in 1901 . this gives the final answer .");
    const RuleExtractor jac(RuleExtractor::Overlap::Jaccard);
    const auto spans = jac.extract(ex, kb);
    REQUIRE(spans.size() == 1);
    CHECK(spans[0].start == 6);
    CHECK(spans[0].end == 12);
    CHECK(spans[0].text == "alice was born in 1901 .");
    CHECK(spans[0].confidence == 1.0);
    CHECK(spans[0].source == "rule-jaccard");

    // confidence is the overlap: sentence {alice, born, 1901, paris} vs fact {alice, born, 1901}
    const auto partial = example("alice was born in 1901 in paris .");
    const auto ps = jac.extract(partial, kb);
    REQUIRE(ps.size() == 1);
    CHECK(ps[0].confidence == doctest::Approx(3.0 / 4.0));
    const RuleExtractor con(RuleExtractor::Overlap::Containment);
    CHECK(con.extract(partial, kb)[0].confidence == 1.0);

    CHECK(jac.extract(example("nothing relevant is said here ."), kb).empty());
    CHECK(jac.extract(ex, {}).empty());
    CHECK_THROWS_AS(RuleExtractor(RuleExtractor::Overlap::Jaccard, 1.5), ValidationError);

    const std::vector<std::string> s = {"a", "b", "c"}, f = {"b", "c", "d", "e"};
    CHECK(RuleExtractor::overlap(RuleExtractor::Overlap::Jaccard, s, f) == doctest::Approx(2.0 / 5.0));
    CHECK(RuleExtractor::overlap(RuleExtractor::Overlap::Containment, s, f) == doctest::Approx(2.0 / 4.0));
    CHECK(content_tokens(words("the cat , the hat .")) == std::vector<std::string>{"cat", "hat"});
}

TEST_CASE("rule extractor recovers the generator's fact sentences") {
    const auto c = corpus::generate_corpus({20, 4, 9});
    const RuleExtractor jac(RuleExtractor::Overlap::Jaccard);
    for (const auto& ex : c.examples) {
        std::vector<KnowledgeFact> own;
        for (const auto& f : c.facts)
            if (f.entity_id == ex.entity_id) own.push_back(f);
        const auto toks = words(ex.cot);
        const auto sentences = tok::sentence_ranges(toks);
        std::vector<Span> expected;
        for (const auto& src : c.provenance.at(ex.id)) {
            const auto& r = sentences[static_cast<std::size_t>(src.sentence_index)];
            expected.push_back({r.begin, r.end});
        }
        const auto got = jac.extract(ex, own);
        REQUIRE(got.size() == expected.size());
        for (std::size_t i = 0; i < got.size(); ++i) {
            CHECK(got[i].start == expected[i].start);
            CHECK(got[i].end == expected[i].end);
        }
    }
}

TEST_CASE("locate_segment snaps to sentences") {
    const std::string cot = "first part here . alice was born in 1901 . last one .";
    const auto s = locate_segment(cot, "born in 1901");
    REQUIRE(s);
    CHECK(s->start == 4);
    CHECK(s->end == 10);
    CHECK(s->text == "alice was born in 1901 .");
    const auto two = locate_segment(cot, "here . alice");
    REQUIRE(two);
    CHECK(two->start == 0);
    CHECK(two->end == 10);
    CHECK_FALSE(locate_segment(cot, "not present"));
    CHECK_FALSE(locate_segment(cot, "   "));
}

TEST_CASE("aggregation reductions") {
    const auto toks = words("one two . three four five . six .");
    const std::vector<Span> a = {{0, 3, "", 1.0, "a"}, {7, 9, "", 1.0, "a"}};
    const std::vector<double> w1 = {1.0};
    auto out = aggregate_spans({a}, w1, 1.0, toks);
    REQUIRE(out.size() == 2);
    CHECK(out[0].start == 0);
    CHECK(out[0].end == 3);
    CHECK(out[1].start == 7);
    CHECK(out[1].end == 9);
    CHECK(out[0].text == "one two .");
    CHECK(out[0].confidence == 1.0);

    const std::vector<double> halves = {0.5, 0.5};
    const auto twin = aggregate_spans({a, a}, halves, 1.0, toks);
    REQUIRE(twin.size() == 2);
    CHECK(twin[0].start == 0);
    CHECK(twin[1].end == 9);

    // one vote at weight 0.5 is below threshold 1
    CHECK(aggregate_spans({a, {}}, halves, 1.0, toks).empty());
    // a partial-sentence vote widens to the whole sentence
    const auto widened = aggregate_spans({{{4, 5, "", 1.0, "a"}}}, w1, 0.5, toks);
    REQUIRE(widened.size() == 1);
    CHECK(widened[0].start == 3);
    CHECK(widened[0].end == 7);

    const std::vector<double> zeros = {0.0, 0.0}, negative = {1.0, -1.0};
    CHECK_THROWS_AS(aggregate_spans({a, a}, zeros, 0.5, toks), ValidationError);
    CHECK_THROWS_AS(aggregate_spans({a, a}, negative, 0.5, toks), ValidationError);
    CHECK_THROWS_AS(aggregate_spans({a, a}, w1, 0.5, toks), ValidationError);
    CHECK_THROWS_AS(aggregate_spans({{{0, 99, "", 1.0, "a"}}}, w1, 0.5, toks), ValidationError);
}

TEST_CASE("aggregation equals a brute-force per-token vote") {
    std::mt19937_64 rng(12);
    for (int trial = 0; trial < 500; ++trial) {
        // random sentence lengths, each ending in "."
        std::vector<std::string> toks;
        const int n_sent = 1 + static_cast<int>(rng() % 5);
        for (int s = 0; s < n_sent; ++s) {
            const int len = 1 + static_cast<int>(rng() % 4);
            for (int i = 0; i < len; ++i) toks.push_back("w" + std::to_string(rng() % 5));
            toks.push_back(".");
        }
        const auto n = toks.size();
        const auto sentences = tok::sentence_ranges(toks);
        const std::size_t n_ext = 1 + rng() % 3;
        std::vector<std::vector<Span>> per(n_ext);
        std::vector<double> weights(n_ext);
        std::uniform_real_distribution<double> u(0.0, 1.0);
        for (std::size_t e = 0; e < n_ext; ++e) {
            weights[e] = u(rng);
            const int k = static_cast<int>(rng() % 4);
            for (int i = 0; i < k; ++i) {
                const std::size_t a = rng() % n, b = rng() % n;
                per[e].push_back({std::min(a, b), std::max(a, b) + 1, "", u(rng), "x"});
            }
        }
        const double threshold = 0.05 + 0.5 * u(rng);

        // oracle: score every position independently
        std::vector<double> score(n, 0.0);
        for (std::size_t e = 0; e < n_ext; ++e)
            for (const auto& s : per[e])
                for (std::size_t t = s.start; t < s.end; ++t) score[t] += weights[e] * s.confidence;
        std::vector<bool> kept(n);
        for (std::size_t t = 0; t < n; ++t) kept[t] = score[t] >= threshold;
        // sentences holding a kept position, chained across a boundary when
        // the kept run crosses it
        std::vector<std::pair<std::size_t, std::size_t>> expected;
        for (std::size_t si = 0; si < sentences.size(); ++si) {
            const auto& r = sentences[si];
            bool any = false;
            for (std::size_t t = r.begin; t < r.end; ++t) any = any || kept[t];
            if (!any) continue;
            const bool joins = !expected.empty() && expected.back().second == r.begin && kept[r.begin] &&
                               kept[r.begin - 1];
            if (joins)
                expected.back().second = r.end;
            else
                expected.emplace_back(r.begin, r.end);
        }

        const auto got = aggregate_spans(per, weights, threshold, toks);
        REQUIRE(got.size() == expected.size());
        for (std::size_t i = 0; i < got.size(); ++i) {
            CHECK(got[i].start == expected[i].first);
            CHECK(got[i].end == expected[i].second);
            if (i > 0) CHECK(got[i - 1].end <= got[i].start);
            double sum = 0;
            int cnt = 0;
            for (std::size_t t = expected[i].first; t < expected[i].second; ++t)
                if (kept[t]) {
                    sum += score[t];
                    ++cnt;
                }
            CHECK(got[i].confidence == doctest::Approx(std::min(1.0, sum / cnt)).epsilon(1e-12));
            CHECK(got[i].text == span_text(toks, got[i].start, got[i].end));
        }
    }
}

TEST_CASE("placeholder replacement") {
    const std::vector<KnowledgeFact> values = {
        fact("n", "ent0000", Attribute::Name, "alice", "alice is a known author ."),
        fact("y", "ent0000", Attribute::BirthYear, "1901", "alice was born in 1901 ."),
        fact("c", "ent0000", Attribute::City, "new york", "alice lives in new york ."),
        fact("m", "ent0000", Attribute::Mentor, "bob", "alice was mentored by bob .")};
    const auto ex = example("alice was born in 1901 . alice lives in new york . she met bob later .");

    const auto none = replace_segments(ex, {}, values, PlaceholderPolicy::Sequential, 0);
    CHECK(none.cot_modified == ex.cot);
    CHECK(none.placeholder_map.empty());

    const auto first = replace_segments(ex, {{0, 6}}, values, PlaceholderPolicy::Sequential, 0);
    CHECK(first.cot_modified == "PERSON_A was born in VALUE_1 . alice lives in new york . she met bob later .");
    CHECK(first.placeholder_map == std::map<std::string, std::string>{{"alice", "PERSON_A"}, {"1901", "VALUE_1"}});
    CHECK(first.spans[0].text == "alice was born in 1901 .");

    // consistent mapping, multi-token value, mentor draws from the person pool
    const auto all = replace_segments(ex, {{0, 12}, {12, 17}}, values, PlaceholderPolicy::Sequential, 0);
    CHECK(all.cot_modified == "PERSON_A was born in VALUE_1 . PERSON_A lives in VALUE_2 . she met PERSON_B later .");
    CHECK(corpus::split_sentences(all.cot_modified).size() == corpus::split_sentences(ex.cot).size());

    const auto shuffled = replace_segments(ex, {{0, 12}}, values, PlaceholderPolicy::Shuffled, 4);
    CHECK(shuffled.placeholder_map.size() == 3);
    CHECK(shuffled.placeholder_map.at("alice").rfind("PERSON_", 0) == 0);
    CHECK(shuffled.placeholder_map.at("new york").rfind("VALUE_", 0) == 0);
    CHECK(replace_segments(ex, {{0, 12}}, values, PlaceholderPolicy::Shuffled, 4) == shuffled);

    CHECK_THROWS_AS(replace_segments(ex, {{0, 99}}, values, PlaceholderPolicy::Sequential, 0), ValidationError);
    CHECK_THROWS_AS(replace_segments(ex, {{6, 12}, {0, 6}}, values, PlaceholderPolicy::Sequential, 0), ValidationError);
    CHECK(parse_policy("shuffled") == PlaceholderPolicy::Shuffled);
    CHECK_THROWS_AS(parse_policy("random"), ValidationError);
}

TEST_CASE("placeholder pool exhaustion") {
    std::vector<KnowledgeFact> values;
    std::string cot;
    for (int i = 0; i < 17; ++i) {
        values.push_back(fact("v" + std::to_string(i), "ent0000", Attribute::City, "city" + std::to_string(i), ""));
        cot += "city" + std::to_string(i) + " ";
    }
    cot += ".";
    const auto ex = example(cot);
    CHECK_THROWS_AS(replace_segments(ex, {{0, 18}}, values, PlaceholderPolicy::Sequential, 0), RuntimeFailure);
    CHECK_NOTHROW(replace_segments(ex, {{0, 16}}, values, PlaceholderPolicy::Sequential, 0));
}

TEST_CASE("scrubbing the forget split of the desk corpus") {
    const auto c = corpus::generate_corpus({100, 4, 1});
    const auto split = corpus::partition(c, 0.05, 1);
    const auto kb = corpus::forget_knowledge_base(c, split);
    const auto res = scrub_corpus(c, split, default_extractors(), {});
    CHECK(res.failures.empty());
    REQUIRE(res.examples.size() == split.forget_ids.size());
    for (std::size_t i = 1; i < res.examples.size(); ++i) CHECK(res.examples[i - 1].example_id < res.examples[i].example_id);

    const auto fid = test::span_fidelity(c, res.examples);
    CHECK(fid.precision() >= 0.95);
    CHECK(fid.recall() >= 0.95);
    CHECK(test::verbatim_leaks(res.examples, kb, c) == 0);

    for (const auto& s : res.examples) {
        const auto& ex = c.find(s.example_id);
        const auto orig = corpus::split_sentences(ex.cot);
        const auto mod = corpus::split_sentences(s.cot_modified);
        REQUIRE(orig.size() == mod.size());
        // sentences outside every span are byte-identical
        const auto toks = words(ex.cot);
        const auto ranges = tok::sentence_ranges(toks);
        for (std::size_t i = 0; i < ranges.size(); ++i) {
            bool covered = false;
            for (const auto& sp : s.spans) covered = covered || (sp.start < ranges[i].end && ranges[i].begin < sp.end);
            if (!covered) CHECK(orig[i] == mod[i]);
        }
        for (std::size_t i = 0; i < s.spans.size(); ++i) {
            CHECK(s.spans[i].start < s.spans[i].end);
            CHECK(s.spans[i].text == span_text(toks, s.spans[i].start, s.spans[i].end));
            if (i > 0) CHECK(s.spans[i - 1].end <= s.spans[i].start);
        }
    }

    // parallel workers give the same records
    ScrubConfig serial;
    serial.max_in_flight = 1;
    CHECK(scrub_corpus(c, split, default_extractors(), serial).examples == res.examples);
}

TEST_CASE("scrub cache: warm rerun is idempotent and keyed by configuration") {
    const auto w = test::small_world(8, 3, 0.25, 2);
    test::TempDir dir;
    ScrubConfig cfg;
    cfg.cache_path = dir / "scrubbed.jsonl";
    const auto cold = scrub_corpus(w.corpus, w.split, default_extractors(), cfg);
    CHECK(cold.cache_hits == 0);
    const auto bytes = read_file(*cfg.cache_path);
    const auto warm = scrub_corpus(w.corpus, w.split, default_extractors(), cfg);
    CHECK(warm.cache_hits == cold.examples.size());
    CHECK(warm.examples == cold.examples);
    CHECK(read_file(*cfg.cache_path) == bytes);

    cfg.vote_threshold = 0.9;
    CHECK(scrub_corpus(w.corpus, w.split, default_extractors(), cfg).cache_hits == 0);
}

TEST_CASE("scrub_corpus reports per-example failures and continues") {
    struct Flaky final : Extractor {
        std::string id() const override { return "flaky"; }
        std::vector<Span> extract(const corpus::Example& e, std::span<const KnowledgeFact>) const override {
            if (e.id.back() == '0') throw RetryableError("timeout");
            return {};
        }
    };
    const auto w = test::small_world(8, 3, 0.5, 2);
    ScrubConfig cfg;
    cfg.weights = {1.0};
    const auto res = scrub_corpus(w.corpus, w.split, {std::make_shared<Flaky>()}, cfg);
    std::size_t expected_fail = 0;
    for (const auto& id : w.split.forget_ids) expected_fail += id.back() == '0';
    REQUIRE(expected_fail > 0);
    CHECK(res.failures.size() == expected_fail);
    CHECK(res.examples.size() == w.split.forget_ids.size() - expected_fail);
    for (const auto& f : res.failures) CHECK(f.message == "timeout");

    CHECK_THROWS_AS(scrub_corpus(w.corpus, w.split, {}, cfg), ValidationError);
    cfg.weights = {0.5, 0.5};
    CHECK_THROWS_AS(scrub_corpus(w.corpus, w.split, {std::make_shared<Flaky>()}, cfg), ValidationError);
}

TEST_CASE("scrubbed JSONL round trip and errors") {
    ScrubbedExample s;
    s.example_id = "ent0001-q0";
    s.spans = {{2, 5, "a b c", 0.75, "aggregate"}};
    s.cot_modified = "x PERSON_A y";
    s.placeholder_map = {{"alice", "PERSON_A"}};
    const std::vector<ScrubbedExample> v = {s};
    const auto text = scrubbed_to_jsonl(v);
    CHECK(scrubbed_from_jsonl(text) == v);
    CHECK(text.find("\"example_id\"") != std::string::npos);
    CHECK(text.find("\"placeholder_map\"") != std::string::npos);
    CHECK_THROWS_WITH_AS(scrubbed_from_jsonl(text + text), doctest::Contains("line 2"), ValidationError);
    CHECK_THROWS_WITH_AS(scrubbed_from_jsonl("{\"example_id\": 3}\n"), doctest::Contains("line 1"), ValidationError);

    test::TempDir dir;
    write_scrubbed(v, dir / "s.jsonl");
    CHECK(read_scrubbed(dir / "s.jsonl") == v);
}
