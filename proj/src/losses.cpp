#include "frul/losses.hpp"

#include <cmath>
#include <numbers>

#include "frul/common.hpp"

namespace frul::loss {

void LossWeights::validate() const {
    const std::pair<const char*, double> fields[] = {
        {"alpha", alpha}, {"lambda_f", lambda_f}, {"lambda_r", lambda_r}, {"beta_g", beta_g}, {"beta_r", beta_r}};
    for (const auto& [name, v] : fields) {
        if (!(v >= 0.0) || !std::isfinite(v))
            throw ValidationError(std::string("loss weight ") + name + " must be finite and non-negative");
    }
}

EncodedExample encode_example(const corpus::Example& example, const tok::Vocabulary& vocab) {
    return {example.id, tok::render_example(example, vocab),
            tok::render_answer_only(example.question, example.answer, vocab)};
}

std::vector<EncodedExample> encode_examples(std::span<const corpus::Example> examples, const tok::Vocabulary& vocab) {
    std::vector<EncodedExample> out;
    out.reserve(examples.size());
    for (const auto& e : examples) out.push_back(encode_example(e, vocab));
    return out;
}

EncodedScrubbed encode_scrubbed(const corpus::Example& example, const scrub::ScrubbedExample& scrubbed,
                                const tok::Vocabulary& vocab) {
    if (scrubbed.example_id != example.id)
        throw ValidationError("scrubbed record " + scrubbed.example_id + " does not match example " + example.id);
    if (scrubbed.spans.empty()) throw ValidationError("scrubbed example " + example.id + " has no forget spans");
    if (scrubbed.cot_modified.empty())
        throw ValidationError("scrubbed example " + example.id + " is missing its replacement reasoning");
    EncodedScrubbed out;
    out.id = example.id;
    out.original = tok::render_example(example, vocab);
    for (const auto& s : scrubbed.spans) {
        if (s.start >= s.end || s.end > out.original.reasoning_length)
            throw ValidationError("span [" + std::to_string(s.start) + ", " + std::to_string(s.end) +
                                  ") lies outside the reasoning of " + example.id);
        out.spans.push_back({s.start, s.end});
    }
    out.replaced = tok::render_with_cot(example.question, scrubbed.cot_modified, example.answer, vocab);
    return out;
}

double log1mexp(double x) {
    if (!(x < 0.0)) throw ValidationError("log1mexp requires x < 0, got " + std::to_string(x));
    if (x > -std::numbers::ln2) return std::log(-std::expm1(x));
    return std::log1p(-std::exp(x));
}

float log1mexp(float x) { return static_cast<float>(log1mexp(static_cast<double>(x))); }

namespace {

template <class S>
void require_nonempty(std::size_t n, const char* what) {
    if (n == 0) throw ValidationError(std::string(what) + " batch is empty");
}

template <class Range, class Get>
std::vector<std::vector<tok::TokenId>> sequences_of(const Range& batch, Get get) {
    std::vector<std::vector<tok::TokenId>> seqs;
    seqs.reserve(batch.size());
    for (const auto& e : batch) seqs.push_back(get(e).token_ids);
    return seqs;
}

bool in_roles(tok::Role r, tok::RoleSet roles) { return (tok::role_bit(r) & roles) != 0; }

// d/dx of -log1mexp(x) = 1 / expm1(-x)
double neg_log1mexp_derivative(double x) { return 1.0 / std::expm1(-x); }

}  // namespace

template <class S>
S role_nll(Tape<S>& tape, std::span<const tok::RenderedExample* const> renders, tok::RoleSet roles, S weight) {
    require_nonempty<S>(renders.size(), "loss");
    std::vector<std::vector<tok::TokenId>> seqs;
    seqs.reserve(renders.size());
    for (const auto* r : renders) seqs.push_back(r->token_ids);
    auto& pass = tape.run(std::move(seqs));
    const S inv_n = S(1) / static_cast<S>(renders.size());
    S total = 0;
    for (std::size_t i = 0; i < renders.size(); ++i) {
        const auto& r = *renders[i];
        bool any = false;
        for (std::size_t t = 1; t < r.size(); ++t) {
            if (!in_roles(r.roles[t], roles)) continue;
            any = true;
            total -= pass.target_logprob(i, t);
            if (weight != S(0)) pass.seed_target(i, t, -weight * inv_n);
        }
        if (!any) throw ValidationError("role filter selects no tokens in a rendered example");
    }
    return total * inv_n;
}

template <class S>
S answer_nll(Tape<S>& tape, std::span<const EncodedExample> batch, S weight) {
    require_nonempty<S>(batch.size(), "answer");
    std::vector<const tok::RenderedExample*> renders;
    for (const auto& e : batch) renders.push_back(&e.answer_only);
    return role_nll<S>(tape, renders, tok::kAnswerRoles, weight);
}

template <class S>
S loss_gd(Tape<S>& tape, std::span<const EncodedExample> forget, std::span<const EncodedExample> retain,
          double alpha, S weight) {
    require_nonempty<S>(forget.size(), "forget");
    require_nonempty<S>(retain.size(), "retain");
    const S a = static_cast<S>(alpha);
    const S f = answer_nll<S>(tape, forget, -weight);
    const S r = answer_nll<S>(tape, retain, a * weight);
    return -f + a * r;
}

template <class S>
S segment_logprob(const ForwardPass<S>& pass, std::size_t seq, const tok::RenderedExample& original,
                  std::span<const tok::TokenRange> spans, bool normalize) {
    if (spans.empty()) throw ValidationError("segment_logprob needs at least one span");
    S sum = 0;
    std::size_t count = 0;
    for (const auto& s : spans) {
        if (s.begin >= s.end || s.end > original.reasoning_length)
            throw ValidationError("span lies outside the reasoning region");
        for (std::size_t t = s.begin; t < s.end; ++t) {
            sum += pass.target_logprob(seq, original.reasoning_offset + t);
            ++count;
        }
    }
    return normalize ? sum / static_cast<S>(count) : sum;
}

template <class S>
CotParts<S> loss_cot(Tape<S>& tape, std::span<const EncodedScrubbed> scrubbed, double lambda_f, double lambda_r,
                     const CotOptions& options, S weight) {
    require_nonempty<S>(scrubbed.size(), "scrubbed");
    CotParts<S> parts;
    const S n = static_cast<S>(scrubbed.size());
    const S lf = static_cast<S>(lambda_f);
    const S lr = static_cast<S>(lambda_r);

    auto& pass = tape.run(sequences_of(scrubbed, [](const EncodedScrubbed& e) -> const auto& { return e.original; }));
    const double clamp = -std::abs(options.clamp_eps);
    for (std::size_t i = 0; i < scrubbed.size(); ++i) {
        const auto& e = scrubbed[i];
        const S seg = segment_logprob<S>(pass, i, e.original, e.spans, options.normalize);
        const double x = std::min(static_cast<double>(seg), clamp);
        parts.forget += static_cast<S>(-log1mexp(x)) / n;

        const bool clamped = !(static_cast<double>(seg) < clamp);
        if (weight == S(0) || lf == S(0) || clamped) continue;
        std::size_t count = 0;
        for (const auto& s : e.spans) count += s.end - s.begin;
        S coeff = weight * lf / n * static_cast<S>(neg_log1mexp_derivative(x));
        if (options.normalize) coeff /= static_cast<S>(count);
        for (const auto& s : e.spans)
            for (std::size_t t = s.begin; t < s.end; ++t) pass.seed_target(i, e.original.reasoning_offset + t, coeff);
    }

    std::vector<const tok::RenderedExample*> replaced;
    for (const auto& e : scrubbed) replaced.push_back(&e.replaced);
    parts.replace = role_nll<S>(tape, replaced, tok::kReasoningRoles, weight * lr);
    parts.value = lf * parts.forget + lr * parts.replace;
    return parts;
}

template <class S>
S loss_rp(Tape<S>& tape, std::span<const EncodedExample> retain, S weight) {
    require_nonempty<S>(retain.size(), "retain");
    std::vector<const tok::RenderedExample*> renders;
    for (const auto& e : retain) renders.push_back(&e.full);
    return role_nll<S>(tape, renders, tok::kReasoningRoles, weight);
}

template <class S>
LossBreakdown<S> loss_frul(Tape<S>& tape, std::span<const EncodedExample> forget,
                           std::span<const EncodedScrubbed> scrubbed, std::span<const EncodedExample> retain,
                           const LossWeights& weights, const CotOptions& options) {
    weights.validate();
    require_nonempty<S>(forget.size(), "forget");
    require_nonempty<S>(retain.size(), "retain");
    for (const auto& f : forget) {
        bool found = false;
        for (const auto& s : scrubbed) found = found || s.id == f.id;
        if (!found) throw ValidationError("forget example " + f.id + " has no scrubbed record");
    }
    LossBreakdown<S> b;
    b.n_forget = forget.size();
    b.n_retain = retain.size();
    const auto cot = loss_cot<S>(tape, scrubbed, weights.lambda_f, weights.lambda_r, options, S(1));
    b.cot_forget = cot.forget;
    b.cot_replace = cot.replace;
    b.gd = loss_gd<S>(tape, forget, retain, weights.alpha, static_cast<S>(weights.beta_g));
    b.rp = loss_rp<S>(tape, retain, static_cast<S>(weights.beta_r));
    b.total = static_cast<S>(weights.lambda_f) * b.cot_forget + static_cast<S>(weights.lambda_r) * b.cot_replace +
              static_cast<S>(weights.beta_g) * b.gd + static_cast<S>(weights.beta_r) * b.rp;
    return b;
}

template <class S>
S loss_ga(Tape<S>& tape, std::span<const EncodedExample> forget, S weight) {
    require_nonempty<S>(forget.size(), "forget");
    const S rp = loss_rp<S>(tape, forget, -weight);
    const S an = answer_nll<S>(tape, forget, -weight);
    return -(rp + an);
}

namespace {

constexpr tok::RoleSet kMisdirectRoles = tok::kReasoningRoles | tok::kAnswerRoles;

template <class S>
std::size_t count_positions(std::span<const EncodedExample> batch, tok::RoleSet roles) {
    std::size_t n = 0;
    for (const auto& e : batch)
        for (auto r : e.full.roles) n += in_roles(r, roles) ? 1 : 0;
    return n;
}

}  // namespace

template <class S>
S loss_r2mu_lite(Tape<S>& tape, std::span<const EncodedExample> forget, std::span<const EncodedExample> retain,
                 int layer_index, std::span<const S> target_vector, double c_retain, const Parameters<S>& frozen,
                 S weight) {
    require_nonempty<S>(forget.size(), "forget");
    const auto& cfg = tape.params().config;
    if (layer_index < 0 || layer_index >= cfg.n_layers)
        throw ValidationError("r2mu layer " + std::to_string(layer_index) + " outside [0, " +
                              std::to_string(cfg.n_layers) + ")");
    const auto d = static_cast<std::size_t>(cfg.d_model);
    if (target_vector.size() != d)
        throw ValidationError("target vector has " + std::to_string(target_vector.size()) + " entries, expected " +
                              std::to_string(d));
    if (!(frozen.config == cfg)) throw ValidationError("frozen model shape differs from the trained model");
    const Eigen::Map<const Eigen::Matrix<S, 1, Eigen::Dynamic>> target(target_vector.data(),
                                                                       static_cast<Eigen::Index>(d));

    // forget: pull activations toward the target vector
    auto& fpass = tape.run(sequences_of(forget, [](const EncodedExample& e) -> const auto& { return e.full; }));
    const auto& hf = fpass.hidden(layer_index);
    const std::size_t nf = count_positions<S>(forget, kMisdirectRoles);
    if (nf == 0) throw ValidationError("forget batch has no reasoning or answer tokens");
    const S scale_f = S(1) / static_cast<S>(nf * d);
    S forget_term = 0;
    for (std::size_t i = 0; i < forget.size(); ++i) {
        const auto& r = forget[i].full;
        for (std::size_t t = 0; t < r.size(); ++t) {
            if (!in_roles(r.roles[t], kMisdirectRoles)) continue;
            const Eigen::Matrix<S, 1, Eigen::Dynamic> diff = hf.row(fpass.row(i, t)) - target;
            forget_term += diff.squaredNorm() * scale_f;
            if (weight != S(0)) fpass.seed_hidden(layer_index, i, t, (S(2) * weight * scale_f) * diff);
        }
    }
    if (c_retain == 0.0) return forget_term;

    // retain: stay close to the frozen model's activations at every position
    require_nonempty<S>(retain.size(), "retain");
    const S cr = static_cast<S>(c_retain);
    auto seqs = sequences_of(retain, [](const EncodedExample& e) -> const auto& { return e.full; });
    const ForwardPass<S> ref(frozen, seqs);
    auto& rpass = tape.run(std::move(seqs));
    const auto& hr = rpass.hidden(layer_index);
    const auto& h0 = ref.hidden(layer_index);
    std::size_t nr = 0;
    for (const auto& e : retain) nr += e.full.size();
    const S scale_r = S(1) / static_cast<S>(nr * d);
    S retain_term = 0;
    for (std::size_t i = 0; i < retain.size(); ++i) {
        for (std::size_t t = 0; t < retain[i].full.size(); ++t) {
            const Eigen::Matrix<S, 1, Eigen::Dynamic> diff = hr.row(rpass.row(i, t)) - h0.row(ref.row(i, t));
            retain_term += diff.squaredNorm() * scale_r;
            if (weight != S(0)) rpass.seed_hidden(layer_index, i, t, (S(2) * weight * cr * scale_r) * diff);
        }
    }
    return forget_term + cr * retain_term;
}

template <class S>
S loss_lm(Tape<S>& tape, std::span<const tok::RenderedExample* const> renders, S weight) {
    require_nonempty<S>(renders.size(), "training");
    std::vector<std::vector<tok::TokenId>> seqs;
    std::size_t count = 0;
    for (const auto* r : renders) {
        seqs.push_back(r->token_ids);
        for (std::size_t t = 1; t < r->size(); ++t) count += in_roles(r->roles[t], tok::kGenerationRoles) ? 1 : 0;
    }
    if (count == 0) throw ValidationError("training batch has no target tokens");
    auto& pass = tape.run(std::move(seqs));
    const S inv = S(1) / static_cast<S>(count);
    S total = 0;
    for (std::size_t i = 0; i < renders.size(); ++i) {
        const auto& r = *renders[i];
        for (std::size_t t = 1; t < r.size(); ++t) {
            if (!in_roles(r.roles[t], tok::kGenerationRoles)) continue;
            total -= pass.target_logprob(i, t);
            if (weight != S(0)) pass.seed_target(i, t, -weight * inv);
        }
    }
    return total * inv;
}

#define FRUL_INSTANTIATE_LOSSES(S)                                                                                   \
    template S role_nll<S>(Tape<S>&, std::span<const tok::RenderedExample* const>, tok::RoleSet, S);                 \
    template S answer_nll<S>(Tape<S>&, std::span<const EncodedExample>, S);                                          \
    template S loss_gd<S>(Tape<S>&, std::span<const EncodedExample>, std::span<const EncodedExample>, double, S);    \
    template S segment_logprob<S>(const ForwardPass<S>&, std::size_t, const tok::RenderedExample&,                   \
                                  std::span<const tok::TokenRange>, bool);                                           \
    template CotParts<S> loss_cot<S>(Tape<S>&, std::span<const EncodedScrubbed>, double, double, const CotOptions&, \
                                     S);                                                                             \
    template S loss_rp<S>(Tape<S>&, std::span<const EncodedExample>, S);                                             \
    template LossBreakdown<S> loss_frul<S>(Tape<S>&, std::span<const EncodedExample>,                                \
                                           std::span<const EncodedScrubbed>, std::span<const EncodedExample>,        \
                                           const LossWeights&, const CotOptions&);                                   \
    template S loss_ga<S>(Tape<S>&, std::span<const EncodedExample>, S);                                             \
    template S loss_r2mu_lite<S>(Tape<S>&, std::span<const EncodedExample>, std::span<const EncodedExample>, int,    \
                                 std::span<const S>, double, const Parameters<S>&, S);                               \
    template S loss_lm<S>(Tape<S>&, std::span<const tok::RenderedExample* const>, S);

FRUL_INSTANTIATE_LOSSES(float)
FRUL_INSTANTIATE_LOSSES(double)

}  // namespace frul::loss
