#pragma once

#include <filesystem>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "frul/corpus.hpp"
#include "frul/scrub_types.hpp"

namespace frul::scrub {

// ------------------------------------------------------------------ retrieval

/// Okapi BM25 over fact sentences. Punctuation is not indexed.
class RetrievalIndex {
  public:
    RetrievalIndex(std::vector<corpus::KnowledgeFact> facts, double k1 = 1.2, double b = 0.75);

    struct Hit {
        const corpus::KnowledgeFact* fact;
        double score;
    };

    /// Top-k facts with positive score, descending, ties by fact_id.
    std::vector<Hit> retrieve(std::string_view query, std::size_t k) const;
    double score(std::string_view query, std::size_t doc) const;
    double idf(std::string_view term) const;

    std::size_t size() const { return facts_.size(); }
    const std::vector<corpus::KnowledgeFact>& facts() const { return facts_; }
    double k1() const { return k1_; }
    double b() const { return b_; }
    double average_length() const { return avg_len_; }

  private:
    struct Posting {
        std::size_t doc;
        int tf;
    };
    double term_score(const std::vector<Posting>& postings, std::size_t doc, double idf) const;

    std::vector<corpus::KnowledgeFact> facts_;
    double k1_, b_;
    std::unordered_map<std::string, std::vector<Posting>> postings_;
    std::vector<std::size_t> lengths_;
    double avg_len_ = 0.0;
};

/// Index terms of a text: tokens excluding punctuation.
std::vector<std::string> index_terms(std::string_view text);

// ---------------------------------------------------------------- extraction

class Extractor {
  public:
    virtual ~Extractor() = default;
    virtual std::string id() const = 0;
    /// Sentence-aligned spans in cot-token coordinates. Must be safe to call
    /// concurrently.
    virtual std::vector<Span> extract(const corpus::Example& example,
                                      std::span<const corpus::KnowledgeFact> context) const = 0;
};

/// Offline sentence classifier. A sentence is forget-relevant when its best
/// overlap with any context fact reaches the threshold; confidence is that
/// overlap.
class RuleExtractor final : public Extractor {
  public:
    enum class Overlap {
        Jaccard,      ///< |S ∩ F| / |S ∪ F| over content tokens
        Containment,  ///< |S ∩ F| / |F|
    };
    explicit RuleExtractor(Overlap mode, double threshold = 0.5);

    std::string id() const override;
    std::vector<Span> extract(const corpus::Example& example,
                              std::span<const corpus::KnowledgeFact> context) const override;

    static double overlap(Overlap mode, std::span<const std::string> sentence, std::span<const std::string> fact);

  private:
    Overlap mode_;
    double threshold_;
};

/// Lowercase tokens not in the stopword list and not punctuation, deduplicated.
std::vector<std::string> content_tokens(std::span<const std::string> tokens);

struct RemoteConfig {
    std::string endpoint;  ///< scheme://host:port, no trailing path
    std::string token;     ///< bearer credential
    double timeout_s = 30.0;
    int retries = 2;
    std::string instructions;  ///< optional prompt template text sent along
    std::string id = "remote";
};

struct RemoteExtraction {
    std::vector<Span> spans;
    std::vector<std::string> warnings;
};

/// POST {endpoint}/extract. Timeouts and HTTP failures are retried and then
/// raise RetryableError; a malformed response raises RuntimeFailure.
RemoteExtraction remote_extract(const RemoteConfig& config, const corpus::Example& example,
                                std::span<const corpus::KnowledgeFact> context);

class RemoteExtractor final : public Extractor {
  public:
    explicit RemoteExtractor(RemoteConfig config);
    std::string id() const override { return config_.id; }
    std::vector<Span> extract(const corpus::Example& example,
                              std::span<const corpus::KnowledgeFact> context) const override;

  private:
    RemoteConfig config_;
};

/// Maps returned text to the sentences it overlaps; nullopt when the text is
/// not a substring of the cot.
std::optional<Span> locate_segment(std::string_view cot, std::string_view segment);

// --------------------------------------------------------------- aggregation

/// Weighted per-token confidence vote. Positions scoring at least
/// vote_threshold are merged into maximal runs and widened to whole
/// sentences. Span confidence is the mean score over its kept positions,
/// capped at 1.
std::vector<Span> aggregate_spans(const std::vector<std::vector<Span>>& per_extractor,
                                  std::span<const double> weights, double vote_threshold,
                                  std::span<const std::string> cot_tokens);

std::string span_text(std::span<const std::string> cot_tokens, std::size_t start, std::size_t end);

// --------------------------------------------------------------- replacement

enum class PlaceholderPolicy {
    Sequential,  ///< PERSON_A, PERSON_B, ... in order of first occurrence
    Shuffled,    ///< seeded permutation of each pool per example
};
PlaceholderPolicy parse_policy(std::string_view s);
std::string_view policy_name(PlaceholderPolicy p);

/// Replaces fact values inside spans by placeholders, longest match first.
/// Name and mentor values draw from the person pool, all others from the
/// value pool. Text outside spans is kept byte for byte.
ScrubbedExample replace_segments(const corpus::Example& example, const std::vector<Span>& spans,
                                 std::span<const corpus::KnowledgeFact> value_facts, PlaceholderPolicy policy,
                                 std::uint64_t seed);

// ---------------------------------------------------------------- pipeline

struct ScrubConfig {
    std::vector<double> weights = {0.5, 0.5};
    double vote_threshold = 0.5;
    std::size_t top_k = 5;
    PlaceholderPolicy policy = PlaceholderPolicy::Sequential;
    std::uint64_t seed = 0;
    std::size_t max_in_flight = 4;
    std::optional<std::filesystem::path> cache_path;  ///< JSONL; sidecar gets ".meta.json"
};

struct ScrubFailure {
    std::string example_id;
    std::string message;
};

struct ScrubResult {
    std::vector<ScrubbedExample> examples;  ///< ordered by example_id
    std::vector<ScrubFailure> failures;
    std::size_t cache_hits = 0;
};

/// Scrubs every D_f example. An extractor failure marks that example failed
/// and the rest continue. With a cache path, completed records are reused
/// when the configuration key matches and the file is rewritten canonically.
ScrubResult scrub_corpus(const corpus::Corpus& corpus, const corpus::Split& split,
                         const std::vector<std::shared_ptr<const Extractor>>& extractors, const ScrubConfig& config);

/// The default offline pair: Jaccard and containment rule extractors.
std::vector<std::shared_ptr<const Extractor>> default_extractors();

std::string scrubbed_to_jsonl(const std::vector<ScrubbedExample>& examples);
std::vector<ScrubbedExample> scrubbed_from_jsonl(std::string_view text);
void write_scrubbed(const std::vector<ScrubbedExample>& examples, const std::filesystem::path& path);
std::vector<ScrubbedExample> read_scrubbed(const std::filesystem::path& path);

}  // namespace frul::scrub
