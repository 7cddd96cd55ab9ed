#pragma once

#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "frul/config.hpp"
#include "frul/corpus.hpp"
#include "frul/eval.hpp"
#include "frul/losses.hpp"
#include "frul/model.hpp"
#include "frul/scrub_types.hpp"
#include "frul/tokenizer.hpp"

namespace frul::orch {

using Params = model::Parameters<float>;

/// Read access to examples by id. Retraining goes through this interface so
/// tests can log exactly which examples a run touched.
class ExampleStore {
  public:
    virtual ~ExampleStore() = default;
    virtual const corpus::Example& get(const std::string& id) const = 0;
};

class CorpusStore : public ExampleStore {
  public:
    explicit CorpusStore(const corpus::Corpus& corpus);
    const corpus::Example& get(const std::string& id) const override;

  private:
    std::map<std::string, const corpus::Example*> by_id_;
};

struct StepRecord {
    std::int64_t step = 0;
    int epoch = 0;
    std::string kind;  ///< "train", "forget" or "retain"
    double lr = 0.0;
    double loss = 0.0;
    std::optional<loss::LossBreakdown<double>> breakdown;  ///< frul steps
    bool skipped = false;  ///< gradient was identically zero; no update applied
};

struct RunRecord {
    std::string method;
    std::string config_hash;
    std::vector<StepRecord> history;
    double wall_time_s = 0.0;
    std::string final_checkpoint;
    int epochs_run = 0;
    std::optional<int> early_stop_epoch;
    std::vector<std::pair<int, double>> forget_answer_rouge;  ///< (epoch, mean F1) at each check

    /// One JSON object per step.
    std::string history_jsonl() const;
};

struct TrainResult {
    Params params;
    RunRecord record;
};

/// Fresh model for the vocabulary, initialised from seeds.model.
Params initial_model(const config::RunConfig& cfg, const tok::Vocabulary& vocab);

/// Language-model training on reasoning, answer and delimiter tokens with
/// AdamW and warm-up. Batch order comes from seeds.run.
TrainResult finetune(const config::RunConfig& cfg, std::span<const corpus::Example> examples,
                     const tok::Vocabulary& vocab, std::optional<Params> start = std::nullopt);

/// Trains M_r from scratch on the retain ids only.
TrainResult retrain(const config::RunConfig& cfg, const ExampleStore& store, const corpus::Split& split,
                    const tok::Vocabulary& vocab);

struct UnlearnInputs {
    std::vector<corpus::Example> forget;
    std::vector<corpus::Example> retain;
    std::vector<scrub::ScrubbedExample> scrubbed;  ///< required for frul
};

/// Starts from `original` and alternates forget and retain steps. Every
/// method except ga uses the most recent (forget, retain) batch pair at each
/// step; ga takes forget steps only.
TrainResult unlearn(const config::RunConfig& cfg, const Params& original, const UnlearnInputs& inputs,
                    const tok::Vocabulary& vocab);

/// Seeded standard-normal direction scaled to the RMS of the original
/// model's forget activations at layer.
std::vector<float> r2mu_target(const Params& original, std::span<const loss::EncodedExample> forget, int layer,
                               std::uint64_t seed);

// -------------------------------------------------------------------- matrix

struct MatrixCell {
    double fraction = 0.0;
    std::string method;
    std::uint64_t seed = 0;
    std::string key() const;  ///< e.g. "f0.05/frul/seed1"
};

struct MatrixRow {
    MatrixCell cell;
    eval::Cell ue;
};

struct MatrixResult {
    std::vector<MatrixRow> rows;
    std::vector<std::pair<std::string, std::string>> failures;  ///< (cell key, message)
    std::size_t cells_run = 0;
    std::size_t cells_skipped = 0;
};

struct MatrixOptions {
    /// Runs before each cell; throwing marks the cell failed. Test hook.
    std::function<void(const MatrixCell&)> before_cell;
};

/// For each fraction: partition with seeds.data, scrub, retrain M_r. Then for
/// each (method, seed): unlearn from the shared M_original with seeds.run =
/// seed and evaluate against M_r. Completed cells recorded in the manifest
/// under out_dir are skipped on rerun.
MatrixResult run_matrix(const config::RunConfig& cfg, const corpus::Corpus& corpus, const tok::Vocabulary& vocab,
                        const std::filesystem::path& out_dir, const MatrixOptions& options = {});

std::string matrix_csv(const std::vector<MatrixRow>& rows);

// ------------------------------------------------------------------- helpers

/// Mean answer ROUGE-L F1 of greedy generations on the given examples.
double answer_rouge(const Params& params, std::span<const corpus::Example> examples, const tok::Vocabulary& vocab,
                    const config::RunConfig& cfg);

std::vector<scrub::ScrubbedExample> scrub_split(const config::RunConfig& cfg, const corpus::Corpus& corpus,
                                                const corpus::Split& split,
                                                const std::optional<std::filesystem::path>& cache,
                                                std::vector<std::string>* failures = nullptr);

model::CheckpointMeta checkpoint_meta(const tok::Vocabulary& vocab, const std::string& label);

}  // namespace frul::orch
