#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "frul/losses.hpp"
#include "frul/model.hpp"

namespace frul::config {

struct DataSettings {
    int n_entities = 100;
    int questions_per_entity = 4;
    double forget_fraction = 0.05;
};

struct TrainSettings {
    int epochs = 40;
    int batch_size = 16;
};

struct UnlearnSettings {
    std::string method = "frul";  ///< frul, ga, gd or r2mu_lite
    int epochs = 150;
    double early_stop_rouge = 0.2;  ///< stop once forget answer ROUGE-L is at or below this
    int eval_every = 10;            ///< epochs between early-stop checks; 0 disables
};

struct ScrubSettings {
    std::vector<std::string> extractors = {"rule-jaccard", "rule-containment"};
    std::vector<double> weights = {0.5, 0.5};
    double vote_threshold = 0.5;
    int top_k = 5;
    std::string placeholder_policy = "sequential";
    int max_in_flight = 4;
    std::string endpoint;  ///< for "remote" extractors; FRUL_EXTRACTOR_URL overrides
    double timeout_s = 30.0;
    int retries = 2;
    std::string templates_dir = "templates";
};

struct EvalSettings {
    int max_new = 64;
    int batch_size = 32;
};

struct Seeds {
    std::uint64_t data = 3;   ///< corpus generation and partition
    std::uint64_t model = 1;  ///< parameter init
    std::uint64_t run = 1;    ///< batch order, R2MU target, placeholder shuffle
};

/// Relative paths resolve against the output directory.
struct Paths {
    std::string corpus = "data/corpus.jsonl";
    std::string facts = "data/facts.jsonl";
    std::string split = "data/split.json";
    std::string kb = "data/kb.jsonl";
    std::string vocab = "data/vocab.json";
    std::string scrub_cache = "scrub/scrubbed.jsonl";
    std::string checkpoints = "checkpoints";
    std::string reports = "reports";
};

struct MatrixSettings {
    std::vector<double> fractions = {0.01, 0.03, 0.05};
    std::vector<std::string> methods = {"frul", "ga", "gd", "r2mu_lite"};
    std::vector<std::uint64_t> seeds = {1, 2, 3};
};

struct RunConfig {
    model::ModelConfig model;  ///< vocab_size and init_seed are filled at run time
    model::AdamWHyper optim;
    TrainSettings train;
    UnlearnSettings unlearn;
    loss::LossWeights loss;
    loss::CotOptions cot;
    int r2mu_layer = -1;  ///< -1 selects the middle layer
    double r2mu_retain_weight = 1.0;
    DataSettings data;
    ScrubSettings scrub;
    EvalSettings eval;
    Seeds seeds;
    Paths paths;
    MatrixSettings matrix;
};

/// Every accepted dotted key, sorted.
std::vector<std::string> config_keys();

/// Applies a TOML document on top of cfg. Unknown keys and type mismatches
/// throw ValidationError naming the key.
void apply_toml(RunConfig& cfg, std::string_view toml_text, std::string_view source = "config");

/// Applies one "dotted.key=value" override; the value uses TOML syntax, and
/// string keys also accept a bare word.
void apply_override(RunConfig& cfg, std::string_view assignment);

/// Built-in defaults, then the file, then overrides in order.
RunConfig load_config(const std::optional<std::filesystem::path>& path, const std::vector<std::string>& overrides);

/// Range and consistency checks across keys.
void validate(const RunConfig& cfg);

/// Sorted "key = value" TOML lines; apply_toml(canonical(c)) reproduces c.
std::string canonical(const RunConfig& cfg);
std::string config_hash(const RunConfig& cfg);

int resolved_r2mu_layer(const RunConfig& cfg);

}  // namespace frul::config
