#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "frul/tokenizer.hpp"

namespace frul::model {

using tok::TokenId;

template <class S>
using Matrix = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct ModelConfig {
    int n_layers = 2;
    int n_heads = 4;
    int d_model = 128;
    int d_ff = 512;
    int context_len = 256;
    int vocab_size = 0;
    std::uint64_t init_seed = 1;

    int head_dim() const { return d_model / n_heads; }
    void validate() const;  ///< throws ValidationError
    bool operator==(const ModelConfig&) const = default;
};

/// Named tensors in a fixed order. Vectors (gains, biases) are 1 x n.
/// The same structure holds gradients and optimizer moments.
template <class S>
struct Parameters {
    ModelConfig config;
    std::vector<std::string> names;
    std::vector<Matrix<S>> tensors;

    // Tensor indices.
    static constexpr std::size_t kTokEmb = 0;
    static constexpr std::size_t kPosEmb = 1;
    static constexpr std::size_t kLayerBase = 2;
    static constexpr std::size_t kPerLayer = 12;
    enum LayerSlot : std::size_t {
        Ln1Gain, Ln1Bias, Wqkv, Bqkv, Wo, Bo, Ln2Gain, Ln2Bias, Wfc, Bfc, Wproj, Bproj
    };
    std::size_t layer(int l, LayerSlot slot) const { return kLayerBase + kPerLayer * static_cast<std::size_t>(l) + slot; }
    std::size_t lnf_gain() const { return kLayerBase + kPerLayer * static_cast<std::size_t>(config.n_layers); }
    std::size_t lnf_bias() const { return lnf_gain() + 1; }
    std::size_t w_out() const { return lnf_gain() + 2; }
    std::size_t b_out() const { return lnf_gain() + 3; }

    Matrix<S>& operator[](std::size_t i) { return tensors[i]; }
    const Matrix<S>& operator[](std::size_t i) const { return tensors[i]; }
    std::size_t count() const;  ///< total scalar count
    bool all_finite() const;

    /// Same names and shapes, all zeros.
    Parameters zeros_like() const;
};

template <class S>
Parameters<S> init_model(const ModelConfig& config);

template <class To, class From>
Parameters<To> cast(const Parameters<From>& p) {
    Parameters<To> out;
    out.config = p.config;
    out.names = p.names;
    out.tensors.reserve(p.tensors.size());
    for (const auto& t : p.tensors) out.tensors.push_back(t.template cast<To>());
    return out;
}

/// One forward evaluation over a batch of sequences, stacked row-wise.
/// Keeps every activation so seeded gradients can be propagated back.
template <class S>
class ForwardPass {
  public:
    ForwardPass(const Parameters<S>& params, std::vector<std::vector<TokenId>> sequences);

    std::size_t num_sequences() const { return seqs_.size(); }
    std::size_t length(std::size_t seq) const { return seqs_[seq].size(); }
    const std::vector<TokenId>& tokens(std::size_t seq) const { return seqs_[seq]; }
    std::size_t row(std::size_t seq, std::size_t pos) const { return offsets_[seq] + pos; }

    /// log p(token[pos] | token[0..pos)), for 1 <= pos < length.
    S target_logprob(std::size_t seq, std::size_t pos) const;
    /// Next-token log distribution after position pos (row of the N x V matrix).
    auto next_logprobs(std::size_t seq, std::size_t pos) const { return logprobs_.row(row(seq, pos)); }
    const Matrix<S>& logprobs() const { return logprobs_; }

    /// Residual stream after block \p layer; rows follow row(seq, pos).
    const Matrix<S>& hidden(int layer) const { return layers_[static_cast<std::size_t>(layer)].x_out; }

    /// Adds coeff * d(target_logprob(seq, pos)) to the pending gradient.
    void seed_target(std::size_t seq, std::size_t pos, S coeff);
    /// Adds a gradient row for hidden(layer) at (seq, pos).
    void seed_hidden(int layer, std::size_t seq, std::size_t pos, const Eigen::Ref<const Eigen::Matrix<S, 1, Eigen::Dynamic>>& g);

    bool has_seeds() const { return seeded_; }
    void backward(Parameters<S>& grads) const;

  private:
    struct LayerCache {
        Matrix<S> x_in, xhat1, h1, qkv, att, x_mid, xhat2, h2, u, z, x_out;
        std::vector<S> rstd1, rstd2;
        std::vector<Matrix<S>> probs;  // per (seq, head), T x T
    };

    const Parameters<S>& params_;
    std::vector<std::vector<TokenId>> seqs_;
    std::vector<std::size_t> offsets_;
    std::size_t rows_ = 0;
    std::vector<LayerCache> layers_;
    Matrix<S> xhatf_, hf_, logprobs_;
    std::vector<S> rstdf_;

    struct TargetSeed {
        std::size_t row;
        TokenId target;
        S coeff;
    };
    std::vector<TargetSeed> target_seeds_;
    std::vector<Matrix<S>> hidden_seeds_;                   // per layer, lazily sized
    bool seeded_ = false;
};

/// Collects forward passes so several loss terms can share one backward sweep.
template <class S>
class Tape {
  public:
    explicit Tape(const Parameters<S>& params) : params_(params) {}
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    const Parameters<S>& params() const { return params_; }
    ForwardPass<S>& run(std::vector<std::vector<TokenId>> sequences);
    Parameters<S> backward() const;

  private:
    const Parameters<S>& params_;
    std::vector<std::unique_ptr<ForwardPass<S>>> passes_;
};

template <class S>
struct GradResult {
    S loss{};
    Parameters<S> grads;
};

/// Exact reverse-mode gradient of the scalar returned by \p loss_fn, which
/// must build its value from passes recorded on the tape it receives.
/// Throws RuntimeFailure carrying the value when the loss is not finite.
template <class S, class LossFn>
GradResult<S> grad(const Parameters<S>& params, LossFn&& loss_fn);

/// Per-position log distributions over the next token (rows of length V).
template <class S>
Matrix<S> forward_logprobs(const Parameters<S>& params, std::span<const TokenId> token_ids);

template <class S>
Matrix<S> hidden_state(const Parameters<S>& params, std::span<const TokenId> token_ids, int layer_index);

template <class S>
struct SequenceLogprob {
    S total{};
    std::vector<S> per_token;
    std::vector<std::size_t> positions;
};

/// Teacher-forced log-probability of the tokens whose role is in \p roles.
template <class S>
SequenceLogprob<S> sequence_logprob(const Parameters<S>& params, const tok::RenderedExample& rendered,
                                    tok::RoleSet roles);

/// Greedy decoding; ties break toward the lowest id. Returns only the new tokens.
template <class S>
std::vector<TokenId> greedy_decode(const Parameters<S>& params, std::span<const TokenId> prompt, int max_new,
                                   TokenId stop_token);

/// Batched greedy decoding, equal to calling greedy_decode per prompt.
template <class S>
std::vector<std::vector<TokenId>> greedy_decode_batch(const Parameters<S>& params,
                                                      const std::vector<std::vector<TokenId>>& prompts, int max_new,
                                                      TokenId stop_token);

// ------------------------------------------------------------------ optimizer

struct AdamWHyper {
    double lr = 3e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.01;
    int warmup_steps = 100;
    bool operator==(const AdamWHyper&) const = default;
};

template <class S>
struct OptimizerState {
    std::int64_t step = 0;
    Parameters<S> first_moment;
    Parameters<S> second_moment;
    AdamWHyper hyper;

    static OptimizerState fresh(const Parameters<S>& params, const AdamWHyper& hyper);
};

/// Linear warm-up to the base rate over warmup_steps, constant afterwards.
double lr_at(std::int64_t step, const AdamWHyper& hyper);

/// Decoupled-weight-decay Adam update at lr_at(state.step); increments step.
template <class S>
void adamw_step(Parameters<S>& params, const Parameters<S>& grads, OptimizerState<S>& state);

// ----------------------------------------------------------------- checkpoint

struct CheckpointMeta {
    std::string vocab_fingerprint;
    std::string label;  ///< free-form role tag such as "original"
};

template <class S>
struct Checkpoint {
    Parameters<S> params;
    std::optional<OptimizerState<S>> optimizer;
    CheckpointMeta meta;
};

inline constexpr int kCheckpointVersion = 1;

template <class S>
std::string serialize_checkpoint(const Parameters<S>& params, const OptimizerState<S>* state,
                                 const CheckpointMeta& meta);
template <class S>
void save_checkpoint(const Parameters<S>& params, const OptimizerState<S>* state, const CheckpointMeta& meta,
                     const std::filesystem::path& path);

/// Tensors are converted to S when the stored dtype differs. \p expected, when
/// given, must match the stored config (otherwise a shape-mismatch error).
template <class S>
Checkpoint<S> load_checkpoint(const std::filesystem::path& path, const ModelConfig* expected = nullptr);
template <class S>
Checkpoint<S> parse_checkpoint(std::string_view bytes, const ModelConfig* expected = nullptr);

}  // namespace frul::model

#include "frul/model_grad.inl"
