#include <doctest.h>

#include <algorithm>
#include <set>

#include "frul/common.hpp"
#include "frul/corpus.hpp"
#include "helpers.hpp"

using namespace frul;
using namespace frul::corpus;

namespace {

std::vector<const KnowledgeFact*> entity_facts(const Corpus& c, const std::string& entity) {
    std::vector<const KnowledgeFact*> out;
    for (const auto& f : c.facts)
        if (f.entity_id == entity) out.push_back(&f);
    return out;
}

}  // namespace

TEST_CASE("single entity, single question") {
    const auto c = generate_corpus({1, 1, 7});
    CHECK(c.examples.size() == 1);
    CHECK(c.facts.size() == 7);
}

TEST_CASE("generation is deterministic to the byte") {
    const auto a = generate_corpus({20, 4, 3});
    const auto b = generate_corpus({20, 4, 3});
    CHECK(examples_to_jsonl(a.examples) == examples_to_jsonl(b.examples));
    CHECK(facts_to_jsonl(a.facts) == facts_to_jsonl(b.facts));
    CHECK(examples_to_jsonl(generate_corpus({20, 4, 4}).examples) != examples_to_jsonl(a.examples));
}

TEST_CASE("invalid generator specs are rejected") {
    CHECK_THROWS_AS(generate_corpus({0, 1, 1}), ValidationError);
    CHECK_THROWS_AS(generate_corpus({1, 0, 1}), ValidationError);
}

TEST_CASE("desk corpus: every answer is grounded in a fact of the same entity") {
    const auto c = generate_corpus({100, 4, 3});
    REQUIRE(c.examples.size() == 400);
    std::set<std::string> ids;
    for (const auto& e : c.examples) {
        CHECK(ids.insert(e.id).second);
        CHECK_FALSE(e.answer.empty());
        CHECK(split_sentences(e.cot).size() >= 2);
        bool verbatim = false, is_value = false;
        for (const auto* f : entity_facts(c, e.entity_id)) {
            verbatim = verbatim || f->text.find(e.answer) != std::string::npos;
            is_value = is_value || f->value == e.answer;
        }
        CHECK(verbatim);
        CHECK(is_value);
    }
}

TEST_CASE("facts: unique (entity, attribute) and text contains value") {
    const auto c = generate_corpus({50, 4, 3});
    std::set<std::pair<std::string, Attribute>> keys;
    for (const auto& f : c.facts) {
        CHECK(keys.insert({f.entity_id, f.attribute}).second);
        CHECK(f.text.find(f.value) != std::string::npos);
    }
}

TEST_CASE("cot chains supporting facts before the queried fact") {
    const auto c = generate_corpus({30, 6, 9});
    for (const auto& e : c.examples) {
        const auto& src = c.provenance.at(e.id);
        REQUIRE(src.size() >= 2);
        const auto sentences = split_sentences(e.cot);
        for (const auto& s : src) {
            const auto& f = *std::find_if(c.facts.begin(), c.facts.end(),
                                          [&](const KnowledgeFact& k) { return k.fact_id == s.fact_id; });
            CHECK(sentences.at(static_cast<std::size_t>(s.sentence_index)) == f.text);
            CHECK(f.entity_id == e.entity_id);
        }
        const auto& last = *std::find_if(c.facts.begin(), c.facts.end(),
                                         [&](const KnowledgeFact& k) { return k.fact_id == src.back().fact_id; });
        CHECK(last.value == e.answer);
    }
}

TEST_CASE("partition sizes") {
    const auto c4000 = generate_corpus({1000, 4, 1});
    const auto s = partition(c4000, 0.05, 2);
    CHECK(s.forget_ids.size() == 200);
    CHECK(s.retain_ids.size() == 3800);
    const auto c400 = generate_corpus({100, 4, 3});
    CHECK(partition(c400, 0.01, 3).forget_ids.size() == 4);
    CHECK(partition(c400, 0.03, 3).forget_ids.size() == 12);
}

TEST_CASE("partition is a pure function and a partition") {
    const auto c = generate_corpus({100, 4, 3});
    for (double f : {0.01, 0.03, 0.05, 0.5, 0.99}) {
        for (std::uint64_t seed : {1u, 2u, 3u}) {
            const auto s = partition(c, f, seed);
            CHECK(s == partition(c, f, seed));
            validate_split(c, s);
            std::set<std::string> fset(s.forget_ids.begin(), s.forget_ids.end());
            std::set<std::string> rset(s.retain_ids.begin(), s.retain_ids.end());
            std::vector<std::string> inter;
            std::set_intersection(fset.begin(), fset.end(), rset.begin(), rset.end(), std::back_inserter(inter));
            CHECK(inter.empty());
            CHECK(fset.size() + rset.size() == c.examples.size());
        }
    }
    CHECK(partition(c, 0.05, 1).forget_ids != partition(c, 0.05, 2).forget_ids);
}

TEST_CASE("partition rejects fractions outside (0, 1)") {
    const auto c = generate_corpus({2, 2, 1});
    for (double f : {0.0, 1.0, -0.1, 1.5}) CHECK_THROWS_AS(partition(c, f, 1), ValidationError);
}

TEST_CASE("forget knowledge base") {
    const auto c = generate_corpus({10, 4, 3});
    Split empty;
    for (const auto& e : c.examples) empty.retain_ids.push_back(e.id);
    CHECK(forget_knowledge_base(c, empty).empty());

    Split one;
    for (const auto& e : c.examples) (e.entity_id == "ent0002" ? one.forget_ids : one.retain_ids).push_back(e.id);
    const auto kb1 = forget_knowledge_base(c, one);
    CHECK(kb1.size() == 7);
    for (const auto& f : kb1) CHECK(f.entity_id == "ent0002");

    // Mixed forget set spanning three entities: brute-force membership scan.
    Split mixed;
    for (const auto& e : c.examples) {
        const bool pick = (e.entity_id == "ent0001" && e.id.ends_with("q0")) || (e.entity_id == "ent0004") ||
                          (e.entity_id == "ent0007" && e.id.ends_with("q3"));
        (pick ? mixed.forget_ids : mixed.retain_ids).push_back(e.id);
    }
    const auto kb = forget_knowledge_base(c, mixed);
    std::set<std::string> forget_entities;
    for (const auto& id : mixed.forget_ids) forget_entities.insert(c.find(id).entity_id);
    CHECK(forget_entities.size() == 3);
    std::set<std::string> expected, got;
    for (const auto& f : c.facts)
        if (forget_entities.count(f.entity_id)) expected.insert(f.fact_id);
    for (const auto& f : kb) got.insert(f.fact_id);
    CHECK(got == expected);
    CHECK(std::is_sorted(kb.begin(), kb.end(), [](auto& a, auto& b) { return a.fact_id < b.fact_id; }));
}

TEST_CASE("corpus files round trip") {
    test::TempDir dir;
    const auto c = generate_corpus({12, 4, 3});
    write_corpus(c, dir / "c.jsonl", dir / "f.jsonl");
    CHECK(read_corpus(dir / "c.jsonl", dir / "f.jsonl") == c);
    const auto s = partition(c, 0.25, 4);
    write_split(s, dir / "s.json");
    CHECK(read_split(dir / "s.json") == s);
}

TEST_CASE("duplicate ids and truncated lines are reported with line numbers") {
    const auto c = generate_corpus({2, 2, 3});
    auto text = examples_to_jsonl(c.examples);
    const auto first = text.substr(0, text.find('\n') + 1);
    try {
        examples_from_jsonl(text + first);
        FAIL("expected duplicate-id error");
    } catch (const ValidationError& e) {
        CHECK(std::string(e.what()).find("duplicate id") != std::string::npos);
        CHECK(std::string(e.what()).find("line 5") != std::string::npos);
    }
    const auto truncated = text.substr(0, text.size() - 10);
    try {
        examples_from_jsonl(truncated);
        FAIL("expected parse error");
    } catch (const ValidationError& e) {
        CHECK(std::string(e.what()).find("line 4") != std::string::npos);
    }
    CHECK_THROWS_AS(facts_from_jsonl(facts_to_jsonl(c.facts) + facts_to_jsonl({c.facts[0]})), ValidationError);
}

TEST_CASE("split validation catches overlap and gaps") {
    const auto c = generate_corpus({2, 2, 3});
    auto s = partition(c, 0.5, 1);
    auto overlap = s;
    overlap.retain_ids.push_back(s.forget_ids[0]);
    CHECK_THROWS_AS(validate_split(c, overlap), ValidationError);
    auto gap = s;
    gap.retain_ids.pop_back();
    CHECK_THROWS_AS(validate_split(c, gap), ValidationError);
}

TEST_CASE("sentence splitting") {
    CHECK(split_sentences("a b . c d .") == std::vector<std::string>{"a b .", "c d ."});
    CHECK(split_sentences("x 1.5 y . z") == std::vector<std::string>{"x 1.5 y .", "z"});
    CHECK(split_sentences("").empty());
}
