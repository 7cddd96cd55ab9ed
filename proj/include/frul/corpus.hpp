#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <string_view>
#include <vector>

namespace frul::corpus {

enum class Attribute { Name, BirthYear, City, Profession, Award, Mentor, Hobby };

inline constexpr int kAttributeCount = 7;

std::string_view attribute_name(Attribute a);
Attribute parse_attribute(std::string_view s);

/// One (question, reasoning trace, answer) record.
struct Example {
    std::string id;
    std::string entity_id;
    std::string question;
    std::string cot;
    std::string answer;

    bool operator==(const Example&) const = default;
};

struct KnowledgeFact {
    std::string fact_id;
    std::string entity_id;
    Attribute attribute = Attribute::Name;
    std::string value;
    std::string text;

    bool operator==(const KnowledgeFact&) const = default;
};

/// Which cot sentences the generator rendered from which facts. Kept in
/// memory only; it is the ground truth the scrubber is scored against.
struct SentenceSource {
    int sentence_index = 0;
    std::string fact_id;

    bool operator==(const SentenceSource&) const = default;
};

struct Corpus {
    std::vector<Example> examples;
    std::vector<KnowledgeFact> facts;
    std::map<std::string, std::vector<SentenceSource>> provenance;

    bool operator==(const Corpus& o) const { return examples == o.examples && facts == o.facts; }

    const Example& find(std::string_view id) const;
};

struct GeneratorSpec {
    int n_entities = 100;
    int questions_per_entity = 4;
    std::uint64_t seed = 1;
};

struct Split {
    double fraction = 0.0;
    std::uint64_t seed = 0;
    std::vector<std::string> forget_ids;
    std::vector<std::string> retain_ids;

    bool operator==(const Split&) const = default;
};

Corpus generate_corpus(const GeneratorSpec& spec);

/// Seeded uniform selection of round(fraction * |corpus|) forget examples.
/// Both id lists keep corpus order.
Split partition(const Corpus& corpus, double fraction, std::uint64_t seed);

/// Facts of every entity that has at least one example in the forget set,
/// ordered by fact_id.
std::vector<KnowledgeFact> forget_knowledge_base(const Corpus& corpus, const Split& split);

std::vector<Example> select(const Corpus& corpus, const std::vector<std::string>& ids);

/// Sentences of a text: each ends at a "." followed by a space or end of
/// text. Trailing text without a period forms a final sentence.
std::vector<std::string> split_sentences(std::string_view text);

// JSONL / JSON persistence. Readers throw ValidationError naming the line.
void write_examples(const std::vector<Example>& examples, const std::filesystem::path& path);
std::vector<Example> read_examples(const std::filesystem::path& path);
void write_facts(const std::vector<KnowledgeFact>& facts, const std::filesystem::path& path);
std::vector<KnowledgeFact> read_facts(const std::filesystem::path& path);
void write_split(const Split& split, const std::filesystem::path& path);
Split read_split(const std::filesystem::path& path);

std::string examples_to_jsonl(const std::vector<Example>& examples);
std::vector<Example> examples_from_jsonl(std::string_view text);
std::string facts_to_jsonl(const std::vector<KnowledgeFact>& facts);
std::vector<KnowledgeFact> facts_from_jsonl(std::string_view text);

void write_corpus(const Corpus& corpus, const std::filesystem::path& examples_path,
                  const std::filesystem::path& facts_path);
Corpus read_corpus(const std::filesystem::path& examples_path, const std::filesystem::path& facts_path);

/// Throws ValidationError unless the split partitions the corpus ids.
void validate_split(const Corpus& corpus, const Split& split);

}  // namespace frul::corpus
