#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "frul/corpus.hpp"
#include "frul/model.hpp"
#include "frul/tokenizer.hpp"

namespace frul::eval {

struct RougeScore {
    double precision = 0.0;
    double recall = 0.0;
    double f1 = 0.0;
};

std::size_t lcs_length(std::span<const tok::TokenId> a, std::span<const tok::TokenId> b);

/// ROUGE-L F1 over words. Words outside the vocabulary score as distinct
/// symbols, never matching an in-vocabulary word.
RougeScore rouge_l(std::string_view candidate, std::string_view reference, const tok::Vocabulary& vocab);
RougeScore rouge_l_ids(std::span<const tok::TokenId> candidate, std::span<const tok::TokenId> reference);

struct Generation {
    std::string reasoning;
    std::string answer;
    bool closed = false;  ///< a </think> was emitted
};

/// Splits a continuation of BOS q <think>. Without </think> the whole
/// continuation is reasoning and the answer is empty.
Generation parse_generation(std::span<const tok::TokenId> continuation, const tok::Vocabulary& vocab);

template <class S>
std::vector<Generation> generate_outputs(const model::Parameters<S>& params, const tok::Vocabulary& vocab,
                                         std::span<const std::string> questions, int max_new,
                                         std::size_t batch_size = 32);

/// ROUGE-L F1 of each generation against the example's ground-truth c and a.
struct ExampleScore {
    std::string example_id;
    double reasoning = 0.0;
    double answer = 0.0;
};
std::vector<ExampleScore> score_outputs(std::span<const corpus::Example> examples,
                                        std::span<const Generation> outputs, const tok::Vocabulary& vocab);

double mean_f1(std::span<const double> scores);

/// |mean(model) - mean(reference)|; the score lists must cover the same ids.
double unlearning_error(std::span<const ExampleScore> model, std::span<const ExampleScore> reference,
                        bool reasoning_channel);

inline constexpr std::string_view kSplits[] = {"forget", "retain"};
inline constexpr std::string_view kChannels[] = {"reasoning", "answer"};

struct Cell {
    std::string split;
    std::string channel;
    double model_mean = 0.0;
    double ref_mean = 0.0;
    double ue = 0.0;
};

struct ExampleRow {
    std::string example_id;
    std::string split;
    std::string channel;
    double model_f1 = 0.0;
    double ref_f1 = 0.0;
};

struct ReportMeta {
    std::uint64_t seed = 0;
    std::string config_hash;
    std::string model_checkpoint;
    std::string reference_checkpoint;
    std::string vocab_fingerprint;
};

struct EvalReport {
    std::vector<Cell> cells;  ///< forget/reasoning, forget/answer, retain/reasoning, retain/answer
    std::vector<ExampleRow> per_example;
    ReportMeta meta;

    const Cell& cell(std::string_view split, std::string_view channel) const;
};

struct EvalConfig {
    int max_new = 64;
    std::size_t batch_size = 32;
};

/// Per-split scores for one model, reusable across comparisons.
struct SplitScores {
    std::vector<ExampleScore> forget;
    std::vector<ExampleScore> retain;
};

template <class S>
SplitScores score_model(const model::Parameters<S>& params, const corpus::Corpus& corpus,
                        const corpus::Split& split, const tok::Vocabulary& vocab, const EvalConfig& config);

EvalReport build_report(const SplitScores& model, const SplitScores& reference, ReportMeta meta);

template <class S>
EvalReport evaluate_pair(const model::Parameters<S>& model, const model::Parameters<S>& reference,
                         const corpus::Corpus& corpus, const corpus::Split& split, const tok::Vocabulary& vocab,
                         const EvalConfig& config, ReportMeta meta);

std::string report_to_json(const EvalReport& report);
EvalReport report_from_json(std::string_view text);
std::string summary_csv(const EvalReport& report);
std::string per_example_csv(const EvalReport& report);

/// Writes report.json, summary.csv and per_example.csv into dir.
void emit_report(const EvalReport& report, const std::filesystem::path& dir);

/// Shortest round-trip decimal rendering, used by every CSV writer.
std::string format_double(double v);

}  // namespace frul::eval
