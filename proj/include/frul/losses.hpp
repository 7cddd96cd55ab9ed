#pragma once

#include <span>
#include <string>
#include <vector>

#include "frul/corpus.hpp"
#include "frul/model.hpp"
#include "frul/scrub_types.hpp"
#include "frul/tokenizer.hpp"

namespace frul::loss {

using model::ForwardPass;
using model::Parameters;
using model::Tape;

struct LossWeights {
    double alpha = 1.0;
    double lambda_f = 1.0;
    double lambda_r = 2.0;
    double beta_g = 0.25;
    double beta_r = 0.75;

    void validate() const;  ///< all weights must be non-negative
    bool all_zero() const { return alpha == 0 && lambda_f == 0 && lambda_r == 0 && beta_g == 0 && beta_r == 0; }
};

struct CotOptions {
    bool normalize = true;    ///< per-token mean log-prob feeds log1mexp
    double clamp_eps = 1e-6;  ///< segment log-prob is clamped to <= -clamp_eps
};

/// An example pre-rendered in both layouts the losses use.
struct EncodedExample {
    std::string id;
    tok::RenderedExample full;         ///< BOS q <think> c </think> <answer> a EOS
    tok::RenderedExample answer_only;  ///< BOS q <answer> a EOS
};

/// A forget example with its forget spans and placeholder rewrite.
struct EncodedScrubbed {
    std::string id;
    tok::RenderedExample original;
    std::vector<tok::TokenRange> spans;  ///< cot-token coordinates
    tok::RenderedExample replaced;       ///< cot replaced by c_m
};

EncodedExample encode_example(const corpus::Example& example, const tok::Vocabulary& vocab);
std::vector<EncodedExample> encode_examples(std::span<const corpus::Example> examples, const tok::Vocabulary& vocab);
EncodedScrubbed encode_scrubbed(const corpus::Example& example, const scrub::ScrubbedExample& scrubbed,
                                const tok::Vocabulary& vocab);

template <class S>
struct LossBreakdown {
    S gd{};
    S cot_forget{};
    S cot_replace{};
    S rp{};
    S total{};
    std::size_t n_forget = 0;
    std::size_t n_retain = 0;
};

/// log(1 - e^x) for x < 0, branching at -ln 2 between log(-expm1(x)) and
/// log1p(-exp(x)). Throws ValidationError for x >= 0.
double log1mexp(double x);
float log1mexp(float x);

// Every tape-level term below adds weight * d(value)/d(theta) to the tape's
// pending gradient and returns the unweighted value. Empty batches throw
// ValidationError.

/// Mean over examples of -sum log p(token) at positions whose role is in roles.
template <class S>
S role_nll(Tape<S>& tape, std::span<const tok::RenderedExample* const> renders, tok::RoleSet roles, S weight);

/// Mean -log p(a | q) on answer-only renderings.
template <class S>
S answer_nll(Tape<S>& tape, std::span<const EncodedExample> batch, S weight);

/// -answer_nll(forget) + alpha * answer_nll(retain).
template <class S>
S loss_gd(Tape<S>& tape, std::span<const EncodedExample> forget, std::span<const EncodedExample> retain,
          double alpha, S weight);

/// Sum (or per-token mean) of teacher-forced log-probs at the span tokens.
template <class S>
S segment_logprob(const ForwardPass<S>& pass, std::size_t seq, const tok::RenderedExample& original,
                  std::span<const tok::TokenRange> spans, bool normalize);

template <class S>
struct CotParts {
    S forget{};   ///< mean -log(1 - p(c_f | q))
    S replace{};  ///< mean -log p(c_m | q)
    S value{};    ///< lambda_f * forget + lambda_r * replace
};

template <class S>
CotParts<S> loss_cot(Tape<S>& tape, std::span<const EncodedScrubbed> scrubbed, double lambda_f, double lambda_r,
                     const CotOptions& options, S weight);

/// Mean -log p(c | q) over the reasoning tokens of full renderings.
template <class S>
S loss_rp(Tape<S>& tape, std::span<const EncodedExample> retain, S weight);

template <class S>
LossBreakdown<S> loss_frul(Tape<S>& tape, std::span<const EncodedExample> forget,
                           std::span<const EncodedScrubbed> scrubbed, std::span<const EncodedExample> retain,
                           const LossWeights& weights, const CotOptions& options);

/// Gradient-ascent baseline: -(loss_rp + answer_nll) on the forget batch.
template <class S>
S loss_ga(Tape<S>& tape, std::span<const EncodedExample> forget, S weight);

/// Representation-misdirection baseline: MSE of forget reasoning+answer
/// activations at layer_index to target, plus c_retain times the MSE of
/// retain activations against the frozen model.
template <class S>
S loss_r2mu_lite(Tape<S>& tape, std::span<const EncodedExample> forget, std::span<const EncodedExample> retain,
                 int layer_index, std::span<const S> target_vector, double c_retain, const Parameters<S>& frozen,
                 S weight);

/// Standard language-model NLL over reasoning, answer and delimiter targets,
/// averaged per token across the batch.
template <class S>
S loss_lm(Tape<S>& tape, std::span<const tok::RenderedExample* const> renders, S weight);

/// Evaluates a tape-level loss without computing gradients.
template <class S, class Fn>
auto evaluate(const Parameters<S>& params, Fn&& fn) {
    Tape<S> tape(params);
    return fn(tape);
}

}  // namespace frul::loss
